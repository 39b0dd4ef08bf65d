//! Per-iteration metric rows rendered as whole-file CSV rewrites.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::io::write_atomic;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub source_loss: f64,
    pub target_loss: Option<f64>,
    pub labeled_fraction: Option<f64>,
    pub clamp_count: Option<usize>,
    pub miou_val: Option<f64>,
    pub chi: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorRow {
    pub iteration: usize,
    pub chi: Vec<f64>,
    /// Mean threshold over the iteration's target images.
    pub theta: Vec<f64>,
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

fn join(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn class_columns(prefix: &str, k: usize) -> String {
    (0..k).map(|c| format!("{prefix}_{c}")).collect::<Vec<_>>().join(",")
}

pub fn pretrain_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("iteration,source_loss,miou_val\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.iteration, r.source_loss, opt(&r.miou_val));
    }
    out
}

pub fn adapt_csv(rows: &[MetricsRow], num_classes: usize) -> String {
    let mut out = format!(
        "iteration,source_loss,target_loss,labeled_fraction,clamp_count,miou_val,{}\n",
        class_columns("chi", num_classes)
    );
    for r in rows {
        let chi = r.chi.as_deref().map(join).unwrap_or_else(|| ",".repeat(num_classes - 1));
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{chi}",
            r.iteration,
            r.source_loss,
            opt(&r.target_loss),
            opt(&r.labeled_fraction),
            opt(&r.clamp_count),
            opt(&r.miou_val),
        );
    }
    out
}

pub fn priors_csv(rows: &[PriorRow], num_classes: usize) -> String {
    let mut out = format!(
        "iteration,{},{}\n",
        class_columns("chi", num_classes),
        class_columns("theta", num_classes)
    );
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.iteration, join(&r.chi), join(&r.theta));
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}
