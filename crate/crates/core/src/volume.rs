use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary voxel mask (0 or 1).
pub type Mask = Array3<u8>;

/// Physical voxel size in millimetres along (i, j, k).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing(pub [f64; 3]);

impl Spacing {
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        let s = Spacing([x, y, z]);
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::invalid(format!("spacing must be strictly positive, got {:?}", self.0)))
        }
    }

    pub fn voxel_volume(&self) -> f64 {
        self.0.iter().product()
    }
}

/// 3D scalar field in HU with physical spacing and origin.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    voxels: Array3<f64>,
    spacing: Spacing,
    origin: [f64; 3],
}

impl VolumeGrid {
    pub fn new(voxels: Array3<f64>, spacing: Spacing, origin: [f64; 3]) -> Result<Self> {
        spacing.validate()?;
        if voxels.shape().contains(&0) {
            return Err(Error::invalid(format!(
                "volume extents must be positive, got {:?}",
                voxels.shape()
            )));
        }
        Ok(VolumeGrid {
            voxels,
            spacing,
            origin,
        })
    }

    pub fn voxels(&self) -> &Array3<f64> {
        &self.voxels
    }

    pub fn into_voxels(self) -> Array3<f64> {
        self.voxels
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn extents(&self) -> [usize; 3] {
        let s = self.voxels.shape();
        [s[0], s[1], s[2]]
    }

    pub fn contains(&self, idx: [usize; 3]) -> bool {
        let e = self.extents();
        idx.iter().zip(e).all(|(&i, e)| i < e)
    }
}

pub fn extents_of<T>(a: &Array3<T>) -> [usize; 3] {
    let s = a.shape();
    [s[0], s[1], s[2]]
}
