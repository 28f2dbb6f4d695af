use ndarray::Array3;

use crate::error::{Error, Result};
use crate::volume::extents_of;

pub const DEFAULT_PATCH: [usize; 3] = [64, 64, 32];

/// Axis-aligned crop of `size` centred on `center` (start `center − size/2`),
/// zero-padded outside the source.
pub fn extract_patch<T: Copy + Default>(src: &Array3<T>, center: [usize; 3], size: [usize; 3]) -> Result<Array3<T>> {
    let ext = extents_of(src);
    if center.iter().zip(ext).any(|(&c, e)| c >= e) {
        return Err(Error::invalid(format!(
            "patch center {center:?} outside volume extents {ext:?}"
        )));
    }
    if size.contains(&0) {
        return Err(Error::invalid("patch size must be positive"));
    }
    let start: [isize; 3] = [0, 1, 2].map(|a| center[a] as isize - (size[a] / 2) as isize);
    let mut out = Array3::from_elem((size[0], size[1], size[2]), T::default());
    // Copy only the overlapping box.
    let lo: [usize; 3] = [0, 1, 2].map(|a| (-start[a]).max(0) as usize);
    let hi: [usize; 3] = [0, 1, 2].map(|a| {
        let end = start[a] + size[a] as isize;
        (size[a] as isize - (end - ext[a] as isize).max(0)).max(0) as usize
    });
    for i in lo[0]..hi[0] {
        let si = (start[0] + i as isize) as usize;
        for j in lo[1]..hi[1] {
            let sj = (start[1] + j as isize) as usize;
            for k in lo[2]..hi[2] {
                let sk = (start[2] + k as isize) as usize;
                out[[i, j, k]] = src[[si, sj, sk]];
            }
        }
    }
    Ok(out)
}
