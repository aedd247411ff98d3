use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use groupdetr::groupdecoder::{load_checkpoint, GroupDecoder};
use groupdetr::querystats::{
    dump_positions, mean_group_emd, write_distance_series, write_positions, DistanceRow, GroupPositions, Point,
};
use groupdetr::scenes::Scene;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::evaluate::{decode_all, distances, positions};
use crate::train::checkpoint_path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseSummary {
    pub groups: usize,
    pub queries: usize,
    pub epochs: Vec<usize>,
    pub missing_epochs: Vec<usize>,
    pub final_pd: f64,
    /// `None` when no validation scene had an object.
    pub final_md: Option<f64>,
    /// Mean marginal EMD between the final positions of every group pair.
    pub group_emd: f64,
    /// The same statistic for independent uniform point sets of the same shape.
    pub uniform_emd: f64,
}

pub fn diagnostics_dir(run: &Path) -> PathBuf {
    run.join("diagnostics")
}

fn uniform_baseline(groups: usize, queries: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sets: Vec<Vec<Point>> = (0..groups)
        .map(|_| (0..queries).map(|_| [rng.random(), rng.random()]).collect())
        .collect();
    Ok(mean_group_emd(&GroupPositions::new(sets)?)?)
}

fn check_compatible(decoder: &GroupDecoder, cfg: &RunConfig, path: &Path) -> Result<()> {
    if *decoder.config() != cfg.decoder_config() {
        bail!(
            "{}: checkpoint model {:?} does not match the run config {:?}",
            path.display(),
            decoder.config(),
            cfg.decoder_config()
        );
    }
    Ok(())
}

/// PD/MD per saved epoch and a position dump of the last one, written to
/// `<run>/diagnostics`. Missing checkpoints are skipped with a warning.
pub fn diagnose(run: &Path, cfg: &RunConfig, val: &[Scene]) -> Result<DiagnoseSummary> {
    let groups = cfg.strategy.groups();
    if groups < 2 {
        bail!(
            "diagnostics need a group-wise model with at least 2 groups, got {}",
            cfg.strategy.label()
        );
    }
    let mut series = Vec::new();
    let mut epochs = Vec::new();
    let mut missing = Vec::new();
    let mut last = None;
    for epoch in 1..=cfg.epochs {
        let path = checkpoint_path(run, epoch);
        if !path.exists() {
            log::warn!("missing checkpoint {}", path.display());
            missing.push(epoch);
            continue;
        }
        let decoder = load_checkpoint(&path)?;
        check_compatible(&decoder, cfg, &path)?;
        let outputs = decode_all(&decoder, val)?;
        let d = distances(&decoder, &outputs, val, &cfg.weights)?;
        series.push(DistanceRow {
            step: epoch,
            pd: d.pd.expect("at least two groups"),
            md: d.md.unwrap_or(f64::NAN),
        });
        epochs.push(epoch);
        last = Some((decoder, d));
    }
    let Some((decoder, d)) = last else {
        bail!("no checkpoints found under {}", run.join("checkpoints").display());
    };
    let dir = diagnostics_dir(run);
    write_distance_series(&dir.join("pd_md.csv"), &series)?;
    let pos = positions(&decoder)?;
    write_positions(&dir.join("positions.csv"), &dump_positions(&pos))?;
    let summary = DiagnoseSummary {
        groups,
        queries: pos.queries(),
        epochs,
        missing_epochs: missing,
        final_pd: d.pd.expect("at least two groups"),
        final_md: d.md,
        group_emd: mean_group_emd(&pos)?,
        uniform_emd: uniform_baseline(groups, pos.queries(), cfg.seed())?,
    };
    let path = dir.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(summary)
}
