use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use groupdetr::diffcore::{default_drop_epoch, AdamW, LrSchedule};
use groupdetr::evalkit::{DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESHOLD};
use groupdetr::groupdecoder::GroupConfig;
use groupdetr::matchcost::CostWeights;
use groupdetr::scenes::SceneParams;
use serde::{Deserialize, Serialize};

/// Label-assignment strategy used during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    OneToOne,
    OneToMany { multiplicity: usize },
    GroupWise { k: usize },
}

impl Strategy {
    pub fn groups(&self) -> usize {
        match self {
            Strategy::GroupWise { k } => *k,
            _ => 1,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Strategy::OneToOne => "one_to_one".into(),
            Strategy::OneToMany { multiplicity } => format!("one_to_many(m={multiplicity})"),
            Strategy::GroupWise { k } => format!("group_wise(k={k})"),
        }
    }
}

/// Decoder shape apart from the group count (set by the strategy) and the
/// memory size (set by the scene grid).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub queries: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let g = GroupConfig::default();
        Self {
            queries: g.queries,
            d_model: g.d_model,
            heads: g.heads,
            layers: g.layers,
            ffn_dim: g.ffn_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset files written by `generate`; scenes are sampled in memory when absent.
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub train_count: usize,
    pub val_count: usize,
    pub seed: u64,
    pub scenes: SceneParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            val: None,
            train_count: 2000,
            val_count: 500,
            seed: 7,
            scenes: SceneParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub nms_iou: f64,
    pub score_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            nms_iou: DEFAULT_NMS_IOU,
            score_threshold: DEFAULT_SCORE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epoch (zero-based) from which the rate is multiplied by 0.1; defaults to
    /// `ceil(11/12 * epochs)`, which means no drop for runs shorter than 12 epochs.
    pub drop_epoch: Option<usize>,
    pub weight_decay: f64,
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub out: PathBuf,
    pub eval: EvalConfig,
    pub weights: CostWeights,
    /// Write a checkpoint at the end of every epoch.
    pub checkpoints: bool,
    /// Evaluate on the validation split after every epoch; otherwise only after the last.
    pub eval_every_epoch: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::OneToOne,
            model: ModelConfig::default(),
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            drop_epoch: None,
            weight_decay: 1e-4,
            seeds: vec![0, 1, 2],
            data: DataConfig::default(),
            out: PathBuf::from("runs/default"),
            eval: EvalConfig::default(),
            weights: CostWeights::default(),
            checkpoints: true,
            eval_every_epoch: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn scene_params(&self) -> SceneParams {
        SceneParams {
            d_model: self.model.d_model,
            ..self.data.scenes
        }
    }

    pub fn decoder_config(&self) -> GroupConfig {
        GroupConfig {
            groups: self.strategy.groups(),
            queries: self.model.queries,
            classes: self.data.scenes.classes,
            d_model: self.model.d_model,
            heads: self.model.heads,
            layers: self.model.layers,
            memory_tokens: self.data.scenes.grid * self.data.scenes.grid,
            ffn_dim: self.model.ffn_dim,
        }
    }

    pub fn drop_epoch(&self) -> usize {
        self.drop_epoch.unwrap_or_else(|| default_drop_epoch(self.epochs))
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr,
            drop_epoch: Some(self.drop_epoch()),
            factor: 0.1,
        }
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }

    /// Output directory of the run for `seed`: `out` itself for a single-seed
    /// config, `out/seed_<seed>` otherwise.
    pub fn run_dir(&self, seed: u64) -> PathBuf {
        if self.seeds.len() == 1 {
            self.out.clone()
        } else {
            self.out.join(format!("seed_{seed}"))
        }
    }

    pub fn seed(&self) -> u64 {
        self.seeds.first().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        match self.strategy {
            Strategy::GroupWise { k } if k == 0 => bail!("group_wise needs k >= 1"),
            Strategy::OneToMany { multiplicity } if multiplicity == 0 => bail!("one_to_many needs multiplicity >= 1"),
            Strategy::OneToMany { multiplicity }
                if multiplicity * self.data.scenes.max_objects > self.model.queries =>
            {
                bail!(
                    "one_to_many with multiplicity {multiplicity} needs at least {} queries for {} objects",
                    multiplicity * self.data.scenes.max_objects,
                    self.data.scenes.max_objects
                )
            }
            _ => {}
        }
        if self.model.queries < self.data.scenes.max_objects {
            bail!(
                "{} queries cannot cover {} objects",
                self.model.queries,
                self.data.scenes.max_objects
            );
        }
        if self.seeds.is_empty() {
            bail!("at least one seed is required");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            bail!("epochs and batch_size must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            bail!("learning rate must be positive and weight decay non-negative");
        }
        if let Some(drop) = self.drop_epoch.filter(|&d| d >= self.epochs) {
            bail!("drop epoch {drop} must be below the epoch count {}", self.epochs);
        }
        if self.data.train_count == 0 || self.data.val_count == 0 {
            bail!("train and validation splits must be non-empty");
        }
        let e = self.eval;
        if !(0.0 < e.nms_iou && e.nms_iou < 1.0 && 0.0 < e.score_threshold && e.score_threshold < 1.0) {
            bail!("evaluation thresholds must lie in (0, 1)");
        }
        self.weights.validate()?;
        self.decoder_config().validate()?;
        self.scene_params().validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.drop_epoch(), 28);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), cfg);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"strategy": {"kind": "group_wise", "k": 3}, "epochs": 12}"#).unwrap();
        assert_eq!(cfg.strategy, Strategy::GroupWise { k: 3 });
        assert_eq!(cfg.decoder_config().groups, 3);
        assert_eq!(cfg.drop_epoch(), 11);
        assert_eq!(cfg.batch_size, 8);
    }

    #[test]
    fn inconsistent_settings_are_rejected() {
        let bad = |f: fn(&mut RunConfig)| {
            let mut cfg = RunConfig::default();
            f(&mut cfg);
            cfg.validate().is_err()
        };
        assert!(bad(|c| c.strategy = Strategy::GroupWise { k: 0 }));
        assert!(bad(|c| c.strategy = Strategy::OneToMany { multiplicity: 0 }));
        assert!(bad(|c| c.strategy = Strategy::OneToMany { multiplicity: 5 }));
        assert!(bad(|c| c.drop_epoch = Some(30)));
        assert!(bad(|c| c.model.heads = 3));
        assert!(bad(|c| c.eval.nms_iou = 1.0));
    }
}
