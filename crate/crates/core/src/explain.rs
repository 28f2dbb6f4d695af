//! Activation-map post-processing: normalisation, upsampling to patch
//! resolution, overlay rendering and a localisation score.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};

pub const DEFAULT_CUTOFF: f64 = 0.25;
pub const DEFAULT_TOP_FRACTION: f64 = 0.01;

/// Min-max scaling to `[0, 1]`. A constant map becomes all zeros and the
/// returned flag is set.
pub fn normalize_map(map: &[f64]) -> (Vec<f64>, bool) {
    let (lo, hi) = map
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if map.is_empty() || hi - lo <= 0.0 {
        log::warn!("activation map is constant; normalised to zeros");
        return (vec![0.0; map.len()], true);
    }
    let span = hi - lo;
    (map.iter().map(|&v| ((v - lo) / span).clamp(0.0, 1.0)).collect(), false)
}

/// Source coordinate of output index `o` under half-pixel alignment.
fn source_coord(o: usize, n_in: usize, n_out: usize) -> f64 {
    let c = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
    c.clamp(0.0, (n_in - 1) as f64)
}

/// Trilinear resampling of a row-major map from `from` to `to` extents with
/// half-pixel alignment and edge clamping.
pub fn upsample_map(map: &[f64], from: [usize; 3], to: [usize; 3]) -> Result<Vec<f64>> {
    if from.contains(&0) || to.contains(&0) {
        return Err(Error::invalid(format!("map extents must be positive: {from:?} -> {to:?}")));
    }
    ensure_shape(&[from.iter().product()], &[map.len()])?;
    // per-axis (lower index, upper index, upper weight)
    let axis = |a: usize| -> Vec<(usize, usize, f64)> {
        (0..to[a])
            .map(|o| {
                let c = source_coord(o, from[a], to[a]);
                let i0 = c.floor() as usize;
                let i1 = (i0 + 1).min(from[a] - 1);
                (i0, i1, c - i0 as f64)
            })
            .collect()
    };
    let (ax, ay, az) = (axis(0), axis(1), axis(2));
    let at = |i: usize, j: usize, k: usize| map[(i * from[1] + j) * from[2] + k];
    let mut out = Vec::with_capacity(to.iter().product());
    for &(i0, i1, fx) in &ax {
        for &(j0, j1, fy) in &ay {
            for &(k0, k1, fz) in &az {
                let c00 = at(i0, j0, k0) * (1.0 - fz) + at(i0, j0, k1) * fz;
                let c01 = at(i0, j1, k0) * (1.0 - fz) + at(i0, j1, k1) * fz;
                let c10 = at(i1, j0, k0) * (1.0 - fz) + at(i1, j0, k1) * fz;
                let c11 = at(i1, j1, k0) * (1.0 - fz) + at(i1, j1, k1) * fz;
                let c0 = c00 * (1.0 - fy) + c01 * fy;
                let c1 = c10 * (1.0 - fy) + c11 * fy;
                out.push(c0 * (1.0 - fx) + c1 * fx);
            }
        }
    }
    Ok(out)
}

/// Fraction of the `top_fraction` most activated voxels that fall inside
/// `mask`. Voxels tied at the selection boundary share the remaining slots
/// in proportion to how many of them lie inside the mask.
pub fn localization_score(map: &[f64], mask: &[u8], top_fraction: f64) -> Result<f64> {
    ensure_shape(&[map.len()], &[mask.len()])?;
    if !mask.iter().any(|&m| m != 0) {
        return Err(Error::invalid("localisation needs a nonempty lesion mask"));
    }
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::invalid(format!("top fraction {top_fraction} outside (0, 1]")));
    }
    if map.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("activation map contains non-finite values".into()));
    }
    let n_top = ((top_fraction * map.len() as f64).ceil() as usize).clamp(1, map.len());
    let mut order: Vec<usize> = (0..map.len()).collect();
    order.sort_by(|&a, &b| map[b].total_cmp(&map[a]));
    let boundary = map[order[n_top - 1]];
    let above = order.iter().take_while(|&&i| map[i] > boundary);
    let (n_above, in_above) = above.fold((0usize, 0usize), |(n, k), &i| (n + 1, k + usize::from(mask[i] != 0)));
    let tied: Vec<usize> = order.iter().copied().filter(|&i| map[i] == boundary).collect();
    let in_tied = tied.iter().filter(|&&i| mask[i] != 0).count();
    let slots = (n_top - n_above) as f64;
    let credit = in_above as f64 + slots * in_tied as f64 / tied.len() as f64;
    Ok(credit / n_top as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Axial,
    Sagittal,
    Coronal,
}

impl View {
    pub const ALL: [View; 3] = [View::Axial, View::Sagittal, View::Coronal];

    pub fn name(self) -> &'static str {
        match self {
            View::Axial => "axial",
            View::Sagittal => "sagittal",
            View::Coronal => "coronal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(View::Axial),
            "sagittal" => Ok(View::Sagittal),
            "coronal" => Ok(View::Coronal),
            o => Err(Error::invalid(format!("unknown view `{o}`"))),
        }
    }

    /// `(rows, cols)` of the central slice, as flat indices into an
    /// `(x, y, z)` row-major volume. Rows run superior to inferior for the
    /// sagittal and coronal views.
    fn slice(self, e: [usize; 3]) -> (usize, usize, Box<dyn Fn(usize, usize) -> usize>) {
        let c = e.map(|n| n / 2);
        let idx = move |i: usize, j: usize, k: usize| (i * e[1] + j) * e[2] + k;
        match self {
            View::Axial => (e[1], e[0], Box::new(move |r, col| idx(col, r, c[2]))),
            View::Sagittal => (e[2], e[1], Box::new(move |r, col| idx(c[0], col, e[2] - 1 - r))),
            View::Coronal => (e[2], e[0], Box::new(move |r, col| idx(col, c[1], e[2] - 1 - r))),
        }
    }
}

/// Jet-style colour ramp.
fn colormap(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |x: f64| ((1.5 - (4.0 * v - x).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlayStyle {
    pub cutoff: f64,
    /// Opacity of the activation colour over the base image.
    pub alpha: f64,
    /// Integer magnification of each voxel.
    pub scale: u32,
    /// Draw the cutoff isocontour in white.
    pub contour: bool,
}

impl Default for OverlayStyle {
    fn default() -> Self {
        OverlayStyle {
            cutoff: DEFAULT_CUTOFF,
            alpha: 0.5,
            scale: 8,
            contour: true,
        }
    }
}

fn gray(v: f32) -> u8 {
    (f64::from(v).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Central-slice overlay of a normalised map on a `[0, 1]` patch. Pixels
/// whose map value is below the cutoff show the base image unchanged.
pub fn render_overlay(patch: &[f32], map: &[f64], extents: [usize; 3], view: View, style: &OverlayStyle) -> Result<RgbImage> {
    let v: usize = extents.iter().product();
    ensure_shape(&[v, v], &[patch.len(), map.len()])?;
    if style.scale == 0 {
        return Err(Error::invalid("overlay scale must be positive"));
    }
    let (rows, cols, at) = view.slice(extents);
    let shown = |r: usize, c: usize| map[at(r, c)] >= style.cutoff;
    let s = style.scale;
    let mut img = RgbImage::new(cols as u32 * s, rows as u32 * s);
    for r in 0..rows {
        for c in 0..cols {
            let i = at(r, c);
            let g = gray(patch[i]);
            let px = if shown(r, c) {
                let edge = style.contour
                    && (r == 0
                        || c == 0
                        || r + 1 == rows
                        || c + 1 == cols
                        || !shown(r - 1, c)
                        || !shown(r + 1, c)
                        || !shown(r, c - 1)
                        || !shown(r, c + 1));
                if edge {
                    [255, 255, 255]
                } else {
                    let col = colormap(map[i]);
                    col.map(|ch| ((1.0 - style.alpha) * f64::from(g) + style.alpha * f64::from(ch)).round() as u8)
                }
            } else {
                [g, g, g]
            };
            for dy in 0..s {
                for dx in 0..s {
                    img.put_pixel(c as u32 * s + dx, r as u32 * s + dy, Rgb(px));
                }
            }
        }
    }
    Ok(img)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// A SAM map brought to patch resolution and normalised.
pub fn patch_resolution_map(sam: &[f32], sam_extents: [usize; 3], patch_extents: [usize; 3]) -> Result<Vec<f64>> {
    let raw: Vec<f64> = sam.iter().map(|&v| f64::from(v)).collect();
    let up = upsample_map(&raw, sam_extents, patch_extents)?;
    Ok(normalize_map(&up).0)
}
