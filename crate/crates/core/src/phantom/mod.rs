//! Synthetic nodule phantoms with known manifestation ground truth.
//!
//! A phantom is a sphere optionally deformed by lobulation bumps and
//! spicule spikes, with an optional hyperdense core, a solid or
//! ground-glass texture, vessel-like tubes crossing it, and Gaussian noise.
//! A thin bone-like slab sits on one face of the volume, away from the nodule.

mod cohort;

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::labels::label_malignancy;
use crate::ingest::record::{NoduleRecord, RaterAnnotation};
use crate::volume::{Mask, Spacing, VolumeGrid};

pub use cohort::{
    assign_splits, cohort_plan, desk_prepare_config, prepare_phantoms, write_phantom_cohort, PhantomCohortConfig, DESK_PATCH,
};

pub const BACKGROUND_HU: f64 = -850.0;
pub const SOLID_HU: f64 = 20.0;
pub const GROUND_GLASS_HU: f64 = -450.0;
pub const CALCIFICATION_HU: f64 = 820.0;
pub const TUBE_HU: f64 = -30.0;
/// Bone-like slab on the first axis-0 layer. It holds the upper
/// normalisation percentile at bone level so that calcification and soft
/// tissue stay distinguishable after clipping.
pub const CHEST_WALL_HU: f64 = 1000.0;

/// Ordered manifestation names of phantom cohorts.
pub const MANIFESTATIONS: [&str; 5] = ["lobulation", "spiculation", "calcification", "ground_glass", "vessel_contact"];

pub fn manifestation_names() -> Vec<String> {
    MANIFESTATIONS.iter().map(|s| s.to_string()).collect()
}

const MIN_MARGIN_VOXELS: f64 = 4.0;
const LOBE_OFFSET: f64 = 1.0;
const LOBE_RADIUS: f64 = 0.6;
const SPICULE_MIN_LEN: f64 = 1.6;
const SPICULE_MAX_LEN: f64 = 2.0;
const SPICULE_TIP_MM: f64 = 0.8;
const CORE_FRACTION: f64 = 0.4;
const TUBE_RADIUS_MM: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Solid,
    GroundGlass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub radius_mm: f64,
    pub lobulation_count: u32,
    pub spicule_count: u32,
    pub calcified: bool,
    pub texture: Texture,
    pub tube_count: u32,
    pub noise_sd: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// Ground-truth manifestation labels in [`MANIFESTATIONS`] order.
    pub fn labels(&self) -> [u8; 5] {
        [
            u8::from(self.lobulation_count > 0),
            u8::from(self.spicule_count > 0),
            u8::from(self.calcified),
            u8::from(self.texture == Texture::GroundGlass),
            u8::from(self.tube_count > 0),
        ]
    }

    /// Declared malignancy rule for phantoms.
    pub fn is_malignant(&self) -> bool {
        self.spicule_count >= 3 || self.lobulation_count >= 2
    }

    /// Farthest distance from the centre any nodule structure can reach.
    pub fn reach_mm(&self) -> f64 {
        let mut reach = self.radius_mm;
        if self.lobulation_count > 0 {
            reach = reach.max((LOBE_OFFSET + LOBE_RADIUS) * self.radius_mm);
        }
        if self.spicule_count > 0 {
            reach = reach.max(SPICULE_MAX_LEN * self.radius_mm);
        }
        reach
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomGrid {
    pub extents: [usize; 3],
    pub spacing: Spacing,
}

impl PhantomGrid {
    pub fn center_voxel(&self) -> [usize; 3] {
        self.extents.map(|e| e / 2)
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: VolumeGrid,
    pub mask: Mask,
    pub record: NoduleRecord,
    pub spec: PhantomSpec,
}

fn random_direction(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = norm(v);
        if n > 1e-9 {
            return v.map(|x| x / n);
        }
    }
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    a.map(|v| v * s)
}

struct Geometry {
    radius: f64,
    lobes: Vec<[f64; 3]>,
    spicules: Vec<([f64; 3], f64)>,
    calcified: bool,
    tubes: Vec<([f64; 3], [f64; 3])>,
    nodule_hu: f64,
}

impl Geometry {
    fn sample(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Self {
        let r = spec.radius_mm;
        let lobes = (0..spec.lobulation_count)
            .map(|_| scale(random_direction(rng), LOBE_OFFSET * r))
            .collect();
        let spicules = (0..spec.spicule_count)
            .map(|_| (random_direction(rng), rng.random_range(SPICULE_MIN_LEN..=SPICULE_MAX_LEN) * r))
            .collect();
        let tubes = (0..spec.tube_count)
            .map(|_| {
                let through = scale(random_direction(rng), rng.random_range(0.0..0.3) * r);
                (through, random_direction(rng))
            })
            .collect();
        Geometry {
            radius: r,
            lobes,
            spicules,
            calcified: spec.calcified,
            tubes,
            nodule_hu: match spec.texture {
                Texture::Solid => SOLID_HU,
                Texture::GroundGlass => GROUND_GLASS_HU,
            },
        }
    }

    fn in_nodule(&self, p: [f64; 3]) -> bool {
        let r = self.radius;
        if norm(p) <= r {
            return true;
        }
        if self.lobes.iter().any(|&c| norm(sub(p, c)) <= LOBE_RADIUS * r) {
            return true;
        }
        self.spicules.iter().any(|&(u, len)| {
            let t = dot(p, u);
            if !(0.0..=len).contains(&t) {
                return false;
            }
            let radial = norm(sub(p, scale(u, t)));
            // tapers from 1.4 mm at the centre to 0.8 mm at the tip
            radial <= SPICULE_TIP_MM + 0.6 * (1.0 - t / len)
        })
    }

    fn in_tube(&self, p: [f64; 3]) -> bool {
        self.tubes.iter().any(|&(c, u)| {
            let d = sub(p, c);
            let t = dot(d, u);
            norm(sub(d, scale(u, t))) <= TUBE_RADIUS_MM
        })
    }

    /// Intensity and nodule membership at physical offset `p` from the centre.
    fn value(&self, p: [f64; 3]) -> (f64, bool) {
        if self.in_nodule(p) {
            if self.calcified && norm(p) <= CORE_FRACTION * self.radius {
                (CALCIFICATION_HU, true)
            } else {
                (self.nodule_hu, true)
            }
        } else if self.in_tube(p) {
            (TUBE_HU, false)
        } else {
            (BACKGROUND_HU, false)
        }
    }
}

/// Renders one phantom. Intensities use 2×2×2 supersampling; a voxel is in
/// the mask when at least half of its subsamples fall inside the nodule.
pub fn generate_phantom(spec: &PhantomSpec, grid: &PhantomGrid) -> Result<Phantom> {
    grid.spacing.validate()?;
    if !(spec.radius_mm > 0.0) || !(spec.noise_sd >= 0.0) {
        return Err(Error::invalid("phantom radius must be positive and noise non-negative"));
    }
    let center = grid.center_voxel();
    let reach = spec.reach_mm();
    for a in 0..3 {
        let sp = grid.spacing.0[a];
        let below = center[a] as f64 * sp;
        let above = (grid.extents[a] - 1 - center[a]) as f64 * sp;
        let need = reach + MIN_MARGIN_VOXELS * sp;
        if below < need || above < need {
            return Err(Error::invalid(format!(
                "phantom reach {reach:.2} mm does not fit grid {:?} at spacing {:?} with a {MIN_MARGIN_VOXELS}-voxel margin",
                grid.extents, grid.spacing.0
            )));
        }
    }

    let mut geo_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let geo = Geometry::sample(spec, &mut geo_rng);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(1);
    let noise = Normal::new(0.0, spec.noise_sd.max(0.0)).expect("valid sd");

    let [ex, ey, ez] = grid.extents;
    let sp = grid.spacing.0;
    let mut voxels = Array3::<f64>::zeros((ex, ey, ez));
    let mut mask: Mask = Array3::zeros((ex, ey, ez));
    const SUB: [f64; 2] = [-0.25, 0.25];
    for i in 0..ex {
        for j in 0..ey {
            for k in 0..ez {
                let base = [
                    (i as f64 - center[0] as f64) * sp[0],
                    (j as f64 - center[1] as f64) * sp[1],
                    (k as f64 - center[2] as f64) * sp[2],
                ];
                let mut acc = 0.0;
                let mut inside = 0;
                for &a in &SUB {
                    for &b in &SUB {
                        for &c in &SUB {
                            let p = [base[0] + a * sp[0], base[1] + b * sp[1], base[2] + c * sp[2]];
                            let (v, n) = geo.value(p);
                            acc += v;
                            inside += usize::from(n);
                        }
                    }
                }
                let n: f64 = if spec.noise_sd > 0.0 { noise.sample(&mut noise_rng) } else { 0.0 };
                let base_hu = if i == 0 { CHEST_WALL_HU } else { acc / 8.0 };
                voxels[[i, j, k]] = base_hu + n;
                mask[[i, j, k]] = u8::from(inside >= 4);
            }
        }
    }

    let labels = spec.labels();
    let malignant = spec.is_malignant();
    let rater = |malignancy: u8| RaterAnnotation {
        mask: mask.clone(),
        attribute_scores: MANIFESTATIONS
            .iter()
            .zip(labels)
            .map(|(n, l)| (n.to_string(), if l == 1 { 5.0 } else { 1.0 }))
            .collect(),
        malignancy_score: malignancy,
    };
    let annotations = if malignant { vec![rater(4), rater(5)] } else { vec![rater(2), rater(1)] };
    let scores: Vec<u8> = annotations.iter().map(|a| a.malignancy_score).collect();
    let mut provenance = BTreeMap::new();
    provenance.insert("generator".into(), "phantom".into());
    provenance.insert("spec".into(), serde_json::to_string(spec)?);
    let record = NoduleRecord {
        id: format!("ph{:08}", spec.seed),
        center_voxel: center,
        diameter_mm: 2.0 * spec.radius_mm,
        annotations,
        consensus_mask: Some(mask.clone()),
        diagnosis_label: label_malignancy(&scores)?,
        manifestation_labels: MANIFESTATIONS
            .iter()
            .zip(labels)
            .map(|(n, l)| (n.to_string(), l))
            .collect(),
        provenance,
    };
    Ok(Phantom {
        volume: VolumeGrid::new(voxels, grid.spacing, [0.0; 3])?,
        mask,
        record,
        spec: spec.clone(),
    })
}

/// Parameters for drawing a balanced batch of phantom specs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    pub count: usize,
    /// Requested positive fraction per manifestation, [`MANIFESTATIONS`] order.
    pub positive_fraction: [f64; 5],
    pub radius_mm: [f64; 2],
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            count: 20,
            positive_fraction: [0.35, 0.35, 0.4, 0.3, 0.4],
            radius_mm: [3.0, 4.0],
            noise_sd: 25.0,
            seed: 0,
        }
    }
}

/// Draws `count` phantom specs where manifestation `m` is present in exactly
/// `round(positive_fraction[m] · count)` of them.
pub fn balanced_specs(cohort: &CohortSpec) -> Vec<PhantomSpec> {
    let n = cohort.count;
    let mut rng = ChaCha8Rng::seed_from_u64(cohort.seed);
    let mut columns: Vec<Vec<bool>> = Vec::with_capacity(5);
    for &frac in &cohort.positive_fraction {
        let pos = (frac.clamp(0.0, 1.0) * n as f64).round() as usize;
        let mut col: Vec<bool> = (0..n).map(|i| i < pos).collect();
        col.shuffle(&mut rng);
        columns.push(col);
    }
    (0..n)
        .map(|i| {
            let seed = cohort.seed.wrapping_mul(1_000_003).wrapping_add(i as u64 + 1);
            PhantomSpec {
                radius_mm: rng.random_range(cohort.radius_mm[0]..=cohort.radius_mm[1]),
                // present manifestations always reach the malignancy thresholds
                lobulation_count: if columns[0][i] { rng.random_range(2..=4) } else { 0 },
                spicule_count: if columns[1][i] { rng.random_range(3..=6) } else { 0 },
                calcified: columns[2][i],
                texture: if columns[3][i] { Texture::GroundGlass } else { Texture::Solid },
                tube_count: if columns[4][i] { rng.random_range(1..=2) } else { 0 },
                noise_sd: cohort.noise_sd,
                seed,
            }
        })
        .collect()
}
