//! Subcommand implementations behind the `grouplab` binary.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use groupdetr::evalkit::{nms, write_detections};
use groupdetr::groupdecoder::{load_checkpoint, GroupDecoder};
use groupdetr::scenes::{load_dataset, Scene};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Strategy};
use crate::data::{content_hash, generate_splits, load_or_generate, write_splits};
use crate::diagnose::{diagnose, DiagnoseSummary};
use crate::evaluate::{collect_detections, decode_all, score_detections};
use crate::sweep::{sweep, Axis, SweepReport};
use crate::train::{checkpoint_dir, train, EpochMetrics};

/// Command-line settings layered over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub k: Option<usize>,
    pub multiplicity: Option<usize>,
    pub epochs: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        if self.k.is_some() && self.multiplicity.is_some() {
            bail!("--k and --multiplicity select different strategies; give at most one");
        }
        if let Some(k) = self.k {
            cfg.strategy = Strategy::GroupWise { k };
        }
        if let Some(multiplicity) = self.multiplicity {
            cfg.strategy = Strategy::OneToMany { multiplicity };
        }
        if let Some(epochs) = self.epochs {
            cfg.epochs = epochs;
        }
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        Ok(cfg)
    }
}

pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let base = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = overrides.apply(base)?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub train: PathBuf,
    pub val: PathBuf,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub train_sha256: String,
    pub val_sha256: String,
}

/// Writes `train.txt` and `val.txt` under the output directory.
pub fn cmd_generate(cfg: &RunConfig) -> Result<GenerateSummary> {
    let params = cfg.scene_params();
    let splits = generate_splits(&params, cfg.data.seed, cfg.data.train_count, cfg.data.val_count)?;
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let (train, val) = write_splits(&splits, &cfg.out)?;
    Ok(GenerateSummary {
        train_sha256: content_hash(&train)?,
        val_sha256: content_hash(&val)?,
        train,
        val,
        train_scenes: splits.train.len(),
        val_scenes: splits.val.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub out: PathBuf,
    pub final_metrics: EpochMetrics,
}

/// One run per configured seed, each in [`RunConfig::run_dir`].
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<TrainSummary>> {
    let data = load_or_generate(cfg)?;
    let mut summaries = Vec::new();
    for &seed in &cfg.seeds {
        let out = cfg.run_dir(seed);
        let run = train(cfg, seed, &data, Some(&out))?;
        summaries.push(TrainSummary {
            seed,
            out,
            final_metrics: *run.history.last().expect("at least one epoch"),
        });
    }
    Ok(summaries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub group_index: usize,
    pub nms: bool,
    pub scenes: usize,
    /// mAP over IoU 0.50:0.95 under the requested NMS setting.
    pub map: f64,
    pub map50: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub duplicate_rate: f64,
    pub detections: usize,
    pub detections_path: PathBuf,
}

/// Most recent `epoch_XXX.bin` under `<run>/checkpoints`.
pub fn latest_checkpoint(run: &Path) -> Result<PathBuf> {
    let dir = checkpoint_dir(run);
    let mut found: Vec<PathBuf> = std::fs::read_dir(&dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("epoch_") && n.ends_with(".bin"))
        })
        .collect();
    found.sort();
    found
        .pop()
        .with_context(|| format!("no checkpoints in {}", dir.display()))
}

fn eval_scenes(cfg: &RunConfig, dataset: Option<&Path>, decoder: &GroupDecoder) -> Result<Vec<Scene>> {
    let scenes = match dataset {
        Some(path) => {
            let (params, scenes) = load_dataset(path)?;
            if params.d_model != decoder.config().d_model || params.memory_tokens() != decoder.config().memory_tokens {
                bail!(
                    "{}: dataset memory does not match the checkpoint's model",
                    path.display()
                );
            }
            scenes
        }
        None => load_or_generate(cfg)?.val,
    };
    Ok(scenes)
}

/// Evaluates one group of a checkpoint, writing `report.json` and the
/// detections CSV into the run directory of the first configured seed.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    dataset: Option<&Path>,
    group_index: usize,
    use_nms: bool,
) -> Result<EvalReport> {
    let run = cfg.run_dir(cfg.seed());
    let checkpoint = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => latest_checkpoint(&run)?,
    };
    let decoder = load_checkpoint(&checkpoint)?;
    let mut expected = cfg.decoder_config();
    expected.groups = decoder.config().groups;
    if *decoder.config() != expected {
        bail!(
            "{}: checkpoint model {:?} does not match the config {:?}",
            checkpoint.display(),
            decoder.config(),
            expected
        );
    }
    if group_index >= decoder.config().groups {
        bail!(
            "group index {group_index} out of range for {} groups",
            decoder.config().groups
        );
    }
    let scenes = eval_scenes(cfg, dataset, &decoder)?;
    let outputs = decode_all(&decoder, &scenes)?;
    let dets = collect_detections(&outputs, &scenes, group_index, cfg.eval.score_threshold)?;
    let eval = score_detections(&dets, &scenes, decoder.config().classes, group_index, &cfg.eval)?;
    let kept = if use_nms { nms(&dets, cfg.eval.nms_iou) } else { dets };
    std::fs::create_dir_all(&run).with_context(|| format!("creating {}", run.display()))?;
    let detections_path = run.join(format!(
        "detections_g{group_index}_{}.csv",
        if use_nms { "nms" } else { "raw" }
    ));
    write_detections(&detections_path, &kept)?;
    let report = EvalReport {
        checkpoint,
        group_index,
        nms: use_nms,
        scenes: scenes.len(),
        map: if use_nms { eval.map_nms } else { eval.map_no_nms },
        map50: if use_nms { eval.map50_nms } else { eval.map50_no_nms },
        per_class_ap: if use_nms {
            eval.per_class_ap_nms
        } else {
            eval.per_class_ap_no_nms
        },
        duplicate_rate: eval.duplicate_rate,
        detections: kept.len(),
        detections_path,
    };
    let path = run.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(report)
}

pub fn cmd_sweep(cfg: &RunConfig, axis: Axis, values: &[usize]) -> Result<SweepReport> {
    let data = load_or_generate(cfg)?;
    sweep(cfg, axis, values, &cfg.seeds, &data, Some(&cfg.out))
}

/// Diagnostics for the run in the output directory, using its saved config.
pub fn cmd_diagnose(run: &Path, dataset: Option<&Path>) -> Result<DiagnoseSummary> {
    let cfg = RunConfig::load(&run.join("config.json"))?;
    let val = match dataset {
        Some(path) => load_dataset(path)?.1,
        None => load_or_generate(&cfg)?.val,
    };
    diagnose(run, &cfg, &val)
}
