use ndarray::Array3;

use crate::error::{Error, Result};
use crate::volume::{extents_of, Mask, Spacing, VolumeGrid};

/// Output extents `round(extent · spacing / target)` per axis.
pub fn resampled_extents(extents: [usize; 3], spacing: Spacing, target: Spacing) -> [usize; 3] {
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = ((extents[a] as f64 * spacing.0[a] / target.0[a]).round() as usize).max(1);
    }
    out
}

/// Trilinear sample at fractional index `pos`, clamped to the grid.
pub fn sample_trilinear(a: &Array3<f64>, pos: [f64; 3]) -> f64 {
    let e = extents_of(a);
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut t = [0.0f64; 3];
    for ax in 0..3 {
        let max = (e[ax] - 1) as f64;
        let p = pos[ax].clamp(0.0, max);
        let f = p.floor();
        lo[ax] = f as usize;
        hi[ax] = (lo[ax] + 1).min(e[ax] - 1);
        t[ax] = p - f;
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let pick = |ax: usize| (corner >> (2 - ax)) & 1 == 1;
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for ax in 0..3 {
            if pick(ax) {
                w *= t[ax];
                idx[ax] = hi[ax];
            } else {
                w *= 1.0 - t[ax];
                idx[ax] = lo[ax];
            }
        }
        if w != 0.0 {
            acc += w * a[idx];
        }
    }
    acc
}

fn check_resample_input(extents: [usize; 3], target: Spacing) -> Result<()> {
    target.validate()?;
    if extents.iter().any(|&e| e < 2) {
        return Err(Error::invalid(format!(
            "cannot resample degenerate extents {extents:?} (single-voxel axis)"
        )));
    }
    Ok(())
}

/// Source index of output index `o` when going from `spacing` to `target`
/// with a shared origin.
fn source_pos(o: [usize; 3], spacing: Spacing, target: Spacing) -> [f64; 3] {
    [0, 1, 2].map(|a| o[a] as f64 * target.0[a] / spacing.0[a])
}

/// Trilinear resampling of intensities onto a new spacing, origin kept.
pub fn resample(volume: &VolumeGrid, target: Spacing) -> Result<VolumeGrid> {
    let ext = volume.extents();
    check_resample_input(ext, target)?;
    let out_ext = resampled_extents(ext, volume.spacing(), target);
    if volume.spacing() == target {
        return Ok(volume.clone());
    }
    let src = volume.voxels();
    let out = Array3::from_shape_fn((out_ext[0], out_ext[1], out_ext[2]), |(i, j, k)| {
        sample_trilinear(src, source_pos([i, j, k], volume.spacing(), target))
    });
    VolumeGrid::new(out, target, volume.origin())
}

/// Nearest-neighbour resampling for label masks.
pub fn resample_mask(mask: &Mask, spacing: Spacing, target: Spacing) -> Result<Mask> {
    let ext = extents_of(mask);
    check_resample_input(ext, target)?;
    let out_ext = resampled_extents(ext, spacing, target);
    Ok(Array3::from_shape_fn((out_ext[0], out_ext[1], out_ext[2]), |(i, j, k)| {
        let p = source_pos([i, j, k], spacing, target);
        let idx = [0, 1, 2].map(|a| (p[a].round() as usize).min(ext[a] - 1));
        mask[idx]
    }))
}

/// Maps a voxel index through a spacing change (nearest output voxel).
pub fn map_index(idx: [usize; 3], spacing: Spacing, target: Spacing, out_extents: [usize; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| {
        let v = (idx[a] as f64 * spacing.0[a] / target.0[a]).round() as usize;
        v.min(out_extents[a] - 1)
    })
}
