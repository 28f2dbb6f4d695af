use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::nn::ops::sigmoid;

pub const BCE_EPS: f64 = 1e-7;

/// Negated binary cross-entropy with the probability clamped to `[ε, 1 − ε]`.
pub fn bce(prob: f64, label: u8) -> f64 {
    let p = prob.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let y = f64::from(label);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// `bce(σ(z), y)` and its derivative in `z` (zero where the clamp is active).
pub fn bce_logit(z: f64, label: u8) -> (f64, f64) {
    let p = sigmoid(z);
    let clamped = !(BCE_EPS..=1.0 - BCE_EPS).contains(&p);
    (bce(p, label), if clamped { 0.0 } else { p - f64::from(label) })
}

/// Manifestation loss weights `w_i > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w: Vec<f64>,
}

impl LossWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid(format!("loss weights must be positive and finite: {w:?}")));
        }
        Ok(LossWeights { w })
    }

    pub fn ones(k: usize) -> Self {
        LossWeights { w: vec![1.0; k] }
    }
}

/// `w_i = 1 / AUC_i` from phase-one validation AUCs.
pub fn weights_from_phase1_auc(aucs: &[f64]) -> Result<LossWeights> {
    if let Some(bad) = aucs.iter().find(|&&a| !(a > 0.0 && a <= 1.0)) {
        return Err(Error::invalid(format!("phase-one AUC {bad} outside (0, 1]")));
    }
    LossWeights::new(aucs.iter().map(|a| 1.0 / a).collect())
}

/// `L_all = L_D + Σ w_i L_M_i`.
pub fn total_loss(l_d: f64, l_m: &[f64], weights: &LossWeights) -> Result<f64> {
    ensure_shape(&[weights.w.len()], &[l_m.len()])?;
    Ok(l_d + l_m.iter().zip(&weights.w).map(|(l, w)| w * l).sum::<f64>())
}

/// Model-selection weights, `1/K` each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionWeights {
    pub w: Vec<f64>,
}

impl SelectionWeights {
    pub fn uniform(k: usize) -> Self {
        SelectionWeights {
            w: vec![1.0 / k as f64; k],
        }
    }
}

/// `V_D + Σ w_i V_M_i`.
pub fn selection_score(v_d: f64, v_m: &[f64], w_sel: &SelectionWeights) -> Result<f64> {
    ensure_shape(&[w_sel.w.len()], &[v_m.len()])?;
    Ok(v_d + v_m.iter().zip(&w_sel.w).map(|(v, w)| w * v).sum::<f64>())
}
