use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use groupdetr::scenes::{generate, load_dataset, save_dataset, Scene, SceneParams};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Debug, Clone)]
pub struct Splits {
    pub params: SceneParams,
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
}

/// Train scenes take ids `0..train_count`, validation scenes the ids after them.
pub fn generate_splits(params: &SceneParams, seed: u64, train_count: usize, val_count: usize) -> Result<Splits> {
    Ok(Splits {
        params: *params,
        train: generate(seed, 0, train_count, params)?,
        val: generate(seed, train_count as u64, val_count, params)?,
    })
}

pub fn write_splits(splits: &Splits, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let train = dir.join("train.txt");
    let val = dir.join("val.txt");
    save_dataset(&splits.train, &splits.params, &train)?;
    save_dataset(&splits.val, &splits.params, &val)?;
    Ok((train, val))
}

fn load_split(path: &Path, expected: &SceneParams) -> Result<Vec<Scene>> {
    let (params, scenes) = load_dataset(path)?;
    if params.d_model != expected.d_model || params.grid != expected.grid || params.classes != expected.classes {
        bail!(
            "{}: dataset has d_model {} grid {} classes {}, model expects {} {} {}",
            path.display(),
            params.d_model,
            params.grid,
            params.classes,
            expected.d_model,
            expected.grid,
            expected.classes
        );
    }
    Ok(scenes)
}

/// Scenes named by the config, or sampled in memory when no files are given.
pub fn load_or_generate(cfg: &RunConfig) -> Result<Splits> {
    let params = cfg.scene_params();
    match (&cfg.data.train, &cfg.data.val) {
        (Some(train), Some(val)) => Ok(Splits {
            params,
            train: load_split(train, &params)?,
            val: load_split(val, &params)?,
        }),
        (None, None) => generate_splits(&params, cfg.data.seed, cfg.data.train_count, cfg.data.val_count),
        _ => bail!("give both data.train and data.val, or neither"),
    }
}

pub fn content_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
