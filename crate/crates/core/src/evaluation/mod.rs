//! Classification and segmentation metrics, reports and embedding export.

mod embeddings;
mod metrics;

pub use embeddings::{export_embeddings, EmbeddingRow, EmbeddingTable};
pub use metrics::{
    bootstrap_ci, confusion_metrics, dice_flat, dice_metric, roc_auc, ConfusionCounts, ConfusionMetrics, DEFAULT_ALPHA,
    DEFAULT_N_BOOT, DEFAULT_THRESHOLD,
};

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    pub n_boot: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: DEFAULT_THRESHOLD,
            n_boot: DEFAULT_N_BOOT,
            alpha: DEFAULT_ALPHA,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    /// `None` when the evaluated split holds a single class.
    pub auc: Option<f64>,
    pub auc_ci: Option<(f64, f64)>,
    pub acc: f64,
    pub sen: f64,
    pub prec: f64,
    pub prec_undefined: bool,
    pub f1: f64,
    pub threshold: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub counts: ConfusionCounts,
}

/// Metrics for one task from predicted probabilities.
pub fn evaluate_task(task: &str, probs: &[f64], labels: &[u8], cfg: &EvalConfig) -> Result<TaskMetrics> {
    let cm = confusion_metrics(probs, labels, cfg.threshold)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    let (auc, auc_ci) = if n_pos > 0 && n_neg > 0 {
        (
            Some(roc_auc(probs, labels)?),
            Some(bootstrap_ci(probs, labels, cfg.n_boot, cfg.alpha, cfg.seed)?),
        )
    } else {
        log::warn!("task {task}: single-class split, AUC undefined");
        (None, None)
    };
    Ok(TaskMetrics {
        task: task.to_string(),
        auc,
        auc_ci,
        acc: cm.acc,
        sen: cm.sen,
        prec: cm.prec,
        prec_undefined: cm.prec_undefined,
        f1: cm.f1,
        threshold: cfg.threshold,
        n_pos,
        n_neg,
        counts: cm.counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub n_samples: usize,
    pub diagnosis: TaskMetrics,
    pub manifestations: Vec<TaskMetrics>,
    pub eval: EvalConfig,
    /// Mean Dice of thresholded probability maps against consensus masks.
    pub segmentation_dice: Option<f64>,
}

impl MetricsReport {
    pub fn tasks(&self) -> impl Iterator<Item = &TaskMetrics> {
        std::iter::once(&self.diagnosis).chain(&self.manifestations)
    }
}

fn fmt3(v: f64) -> String {
    format!("{v:.3}")
}

/// Plain-text table with one row per task: AUC [CI], Acc, Sen, Prec, F1.
pub fn format_report(report: &MetricsReport) -> String {
    let mut rows = vec![[
        "Task".to_string(),
        "AUC [95% CI]".to_string(),
        "Acc".to_string(),
        "Sen".to_string(),
        "Prec".to_string(),
        "F1".to_string(),
        "n+/n-".to_string(),
    ]];
    for t in report.tasks() {
        let auc = match (t.auc, t.auc_ci) {
            (Some(a), Some((lo, hi))) => format!("{a:.3} [{lo:.3}-{hi:.3}]"),
            _ => "n/a".to_string(),
        };
        let prec = if t.prec_undefined { format!("{}*", fmt3(t.prec)) } else { fmt3(t.prec) };
        rows.push([
            t.task.clone(),
            auc,
            fmt3(t.acc),
            fmt3(t.sen),
            prec,
            fmt3(t.f1),
            format!("{}/{}", t.n_pos, t.n_neg),
        ]);
    }
    let widths: Vec<usize> = (0..7).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = format!("split: {} (n = {})\n", report.split, report.n_samples);
    for (i, r) in rows.iter().enumerate() {
        let line: Vec<String> = r.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 12));
            out.push('\n');
        }
    }
    if report.tasks().any(|t| t.prec_undefined) {
        out.push_str("* no positive predictions; precision reported as 0\n");
    }
    if let Some(d) = report.segmentation_dice {
        out.push_str(&format!("segmentation Dice: {d:.3}\n"));
    }
    out
}
