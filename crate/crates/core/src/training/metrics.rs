//! CSV logs of training runs.

use std::path::Path;

use crate::error::{Error, Result};

use super::runner::{EpochMetrics, RoundStats};

pub const METRICS_HEADER: &str = "epoch,lr,L_I,L_M,L_cls_s,L_cls_t,source_acc,target_acc";
pub const SELECTION_HEADER: &str = "round,gamma,selected_fraction";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per epoch; accuracies that were not measured are left empty.
pub fn format_metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.lr,
            r.implicit,
            r.mask,
            r.cls_source,
            r.cls_target,
            opt(r.source_acc),
            opt(r.target_acc)
        ));
    }
    s
}

pub fn format_selection_csv(rows: &[RoundStats]) -> String {
    let mut s = format!("{SELECTION_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{}\n",
            r.round, r.gamma, r.selected_fraction
        ));
    }
    s
}

pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    std::fs::write(path, format_metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

pub fn write_selection_csv(path: &Path, rows: &[RoundStats]) -> Result<()> {
    std::fs::write(path, format_selection_csv(rows)).map_err(|e| Error::io(path, e))
}
