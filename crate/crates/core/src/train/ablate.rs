//! Ablation driver: train one run per config row and tabulate mAP.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::runner::run_training;
use crate::data::{Dataset, Split};
use crate::error::Result;
use crate::eval::evaluate_checkpoint;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub n_classifiers: usize,
    pub lambda: f64,
    pub seed: u64,
    pub source_val_map: f64,
    pub target_val_map: f64,
    pub wall_clock_s: f64,
    pub checkpoint: String,
}

/// One training run plus both-val evaluation per config. Rows land in
/// `<out_dir>/<label>/` and the table in `<out_dir>/ablation.csv`.
pub fn ablate(
    configs: &[(String, TrainConfig)],
    dataset: &Dataset,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    fs::create_dir_all(out_dir)?;
    let mut rows = Vec::with_capacity(configs.len());
    for (label, config) in configs {
        let run_dir = out_dir.join(label);
        let summary = run_training(config, dataset, &run_dir)?;
        let (source_ap, _) = evaluate_checkpoint(&summary.checkpoint, dataset, Split::SourceVal)?;
        let (target_ap, _) = evaluate_checkpoint(&summary.checkpoint, dataset, Split::TargetVal)?;
        log::info!(
            "ablation row {label}: source-val mAP {:.3}, target-val mAP {:.3} ({:.1}s)",
            source_ap.mean_ap,
            target_ap.mean_ap,
            summary.wall_clock_s
        );
        rows.push(AblationRow {
            label: label.clone(),
            n_classifiers: config.n_classifiers,
            lambda: config.lambda,
            seed: config.seed,
            source_val_map: source_ap.mean_ap,
            target_val_map: target_ap.mean_ap,
            wall_clock_s: summary.wall_clock_s,
            checkpoint: summary.checkpoint.display().to_string(),
        });
    }
    write_ablation_csv(&rows, &out_dir.join("ablation.csv"))?;
    Ok(rows)
}

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut text = String::from(
        "label,n_classifiers,lambda,seed,source_val_map,target_val_map,wall_clock_s\n",
    );
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.label, r.n_classifiers, r.lambda, r.seed, r.source_val_map, r.target_val_map, r.wall_clock_s
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

/// The default grid: the source-only baseline (lambda = 0) plus the adapted
/// model at every classifier placement.
pub fn default_grid(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut rows = Vec::new();
    let mut source_only = base.clone();
    source_only.lambda = 0.0;
    rows.push(("lambda0".to_string(), source_only));
    for n in 1..=4usize {
        let mut c = base.clone();
        c.lambda = if base.lambda > 0.0 { base.lambda } else { 0.1 };
        c.n_classifiers = n;
        rows.push((format!("n{n}"), c));
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_five_rows() {
        let grid = default_grid(&TrainConfig::default());
        assert_eq!(grid.len(), 5);
        assert_eq!(grid[0].1.lambda, 0.0);
        assert_eq!(grid[1].1.n_classifiers, 1);
        assert_eq!(grid[4].1.n_classifiers, 4);
    }
}
