use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array3, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use crate::error::{Error, Result};
use crate::volume::{Mask, Spacing, VolumeGrid};

/// Source of image volumes; swap implementations to support other containers.
pub trait VolumeReader {
    fn read_volume(&self, path: &Path) -> Result<VolumeGrid>;
    fn read_mask(&self, path: &Path) -> Result<Mask>;
}

/// NIfTI-1 (`.nii` / `.nii.gz`) reader and writer.
#[derive(Debug, Clone, Copy, Default)]
pub struct NiftiIo;

fn nifti_err(path: &Path, e: nifti::NiftiError) -> Error {
    Error::Nifti(format!("{}: {e}", path.display()))
}

fn read_array(path: &Path) -> Result<(Array3<f64>, NiftiHeader)> {
    let obj = ReaderOptions::new().read_file(path).map_err(|e| nifti_err(path, e))?;
    let header = obj.header().clone();
    let arr = obj
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| nifti_err(path, e))?;
    let arr = arr
        .into_dimensionality::<Ix3>()
        .map_err(|_| Error::Nifti(format!("{}: expected a 3D volume", path.display())))?;
    // Standard layout so downstream code can rely on contiguous slices.
    Ok((arr.as_standard_layout().to_owned(), header))
}

impl VolumeReader for NiftiIo {
    fn read_volume(&self, path: &Path) -> Result<VolumeGrid> {
        let (arr, h) = read_array(path)?;
        let spacing = Spacing([h.pixdim[1] as f64, h.pixdim[2] as f64, h.pixdim[3] as f64]);
        let origin = [h.quatern_x as f64, h.quatern_y as f64, h.quatern_z as f64];
        VolumeGrid::new(arr, spacing, origin)
    }

    fn read_mask(&self, path: &Path) -> Result<Mask> {
        let (arr, _) = read_array(path)?;
        Ok(arr.mapv(|v| u8::from(v > 0.5)))
    }
}

fn header_for(spacing: Spacing, origin: [f64; 3]) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    h.pixdim = [1.0, spacing.0[0] as f32, spacing.0[1] as f32, spacing.0[2] as f32, 1.0, 1.0, 1.0, 1.0];
    h.qform_code = 1;
    h.quatern_x = origin[0] as f32;
    h.quatern_y = origin[1] as f32;
    h.quatern_z = origin[2] as f32;
    h.xyzt_units = 2; // millimetres
    h
}

impl NiftiIo {
    pub fn write_volume(&self, path: &Path, volume: &VolumeGrid) -> Result<()> {
        let h = header_for(volume.spacing(), volume.origin());
        let data = volume.voxels().mapv(|v| v as f32);
        WriterOptions::new(path)
            .reference_header(&h)
            .write_nifti(&data)
            .map_err(|e| nifti_err(path, e))
    }

    pub fn write_mask(&self, path: &Path, mask: &Mask, spacing: Spacing, origin: [f64; 3]) -> Result<()> {
        let h = header_for(spacing, origin);
        WriterOptions::new(path)
            .reference_header(&h)
            .write_nifti(mask)
            .map_err(|e| nifti_err(path, e))
    }
}

const PATCH_MAGIC: &[u8; 8] = b"NVPATCH1";

/// Raw little-endian `f32` block with a small header: magic, three `u32` extents.
pub fn write_patch(path: &Path, data: &Array3<f32>) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    w.write_all(PATCH_MAGIC).map_err(io)?;
    for &d in data.shape() {
        w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
    }
    for v in data.iter() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_patch(path: &Path) -> Result<Array3<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_patch(&bytes).map_err(|reason| Error::Integrity {
        path: path.to_path_buf(),
        reason,
    })
}

fn decode_patch(bytes: &[u8]) -> std::result::Result<Array3<f32>, String> {
    if bytes.len() < 20 || &bytes[..8] != PATCH_MAGIC {
        return Err("not a patch file".into());
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let ext = [dim(0), dim(1), dim(2)];
    let n: usize = ext.iter().product();
    if bytes.len() != 20 + 4 * n {
        return Err(format!("expected {} payload bytes, found {}", 4 * n, bytes.len() - 20));
    }
    let values = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array3::from_shape_vec((ext[0], ext[1], ext[2]), values).map_err(|e| e.to_string())
}
