use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use groupdetr::assign::{group_wise_assign, hungarian, one_to_many_assign};
use groupdetr::diffcore::{optimizer_step, OptimizerState, Tape};
use groupdetr::groupdecoder::{save_checkpoint, GroupDecoder};
use groupdetr::matchcost::{build_cost_matrix, multi_set_loss, set_loss, CostWeights, Prediction};
use groupdetr::scenes::Scene;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Strategy};
use crate::data::Splits;
use crate::evaluate::{collect_detections, decode_all, distances, score_detections, Evaluation};

/// One row of `metrics.csv`. Evaluation columns are empty for epochs that
/// were not evaluated; PD and MD are empty for single-group models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub map_no_nms: Option<f64>,
    pub map_nms: Option<f64>,
    pub duplicate_rate: Option<f64>,
    pub pd: Option<f64>,
    pub md: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub history: Vec<EpochMetrics>,
    pub final_eval: Evaluation,
    pub decoder: GroupDecoder,
}

pub fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

pub fn checkpoint_path(out: &Path, epoch: usize) -> PathBuf {
    checkpoint_dir(out).join(format!("epoch_{epoch:03}.bin"))
}

fn predictions(values: &[f64], boxes: &[f64], classes: usize) -> Vec<Prediction> {
    values
        .chunks(classes)
        .zip(boxes.chunks(4))
        .map(|(p, b)| Prediction {
            class_probs: p.to_vec(),
            bbox: groupdetr::boxes::BBox::from_slice(b),
        })
        .collect()
}

/// Forward, match, and backward for one scene. Gradients are added to the
/// decoder's parameters scaled by `scale`; the unscaled loss is returned.
pub fn scene_step(
    decoder: &mut GroupDecoder,
    scene: &Scene,
    strategy: Strategy,
    weights: &CostWeights,
    scale: f64,
) -> Result<f64> {
    let cfg = *decoder.config();
    let tape = Tape::new();
    let bound = decoder.params().bind(&tape, true);
    let out = decoder.forward(&tape, &bound, &scene.memory)?;
    let preds = predictions(&out.probs.value(), &out.boxes.value(), cfg.classes);
    let loss = match strategy {
        Strategy::OneToOne => {
            let cost = build_cost_matrix(&preds, &scene.gts, weights)?;
            let assignment = hungarian(&cost)?;
            set_loss(out.probs, out.boxes, &scene.gts, &[assignment], cfg.queries, weights)?
        }
        Strategy::GroupWise { .. } => {
            let costs = preds
                .chunks(cfg.queries)
                .map(|group| build_cost_matrix(group, &scene.gts, weights))
                .collect::<groupdetr::Result<Vec<_>>>()?;
            let assignments = group_wise_assign(&costs)?;
            set_loss(out.probs, out.boxes, &scene.gts, &assignments, cfg.queries, weights)?
        }
        Strategy::OneToMany { multiplicity } => {
            let cost = build_cost_matrix(&preds, &scene.gts, weights)?;
            let assignment = one_to_many_assign(&cost, multiplicity)?;
            multi_set_loss(out.probs, out.boxes, &scene.gts, &assignment, weights)?
        }
    };
    let value = loss.item()?;
    if !value.is_finite() {
        bail!("non-finite loss on scene {}", scene.scene_id);
    }
    let grads = tape.backward(loss)?;
    decoder.params_mut().accumulate(&bound, &grads, scale);
    Ok(value)
}

/// Mean training loss over one pass through `scenes` in a seeded order.
pub fn train_epoch(
    decoder: &mut GroupDecoder,
    opt: &mut OptimizerState,
    scenes: &[Scene],
    cfg: &RunConfig,
    seed: u64,
    epoch: usize,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_0000_0000_0000);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    opt.set_epoch(&cfg.schedule(), epoch);
    let mut total = 0.0;
    for batch in order.chunks(cfg.batch_size) {
        decoder.params_mut().zero_grad();
        let scale = 1.0 / batch.len() as f64;
        for &i in batch {
            total += scene_step(decoder, &scenes[i], cfg.strategy, &cfg.weights, scale)
                .with_context(|| format!("epoch {}", epoch + 1))?;
        }
        optimizer_step(decoder.params_mut(), opt);
    }
    Ok(total / scenes.len() as f64)
}

fn write_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<EpochMetrics>, _>>()?)
}

/// Trains one model. With `out` set, `config.json`, `metrics.csv` (rewritten
/// after every epoch) and per-epoch checkpoints are written there.
pub fn train(cfg: &RunConfig, seed: u64, data: &Splits, out: Option<&Path>) -> Result<RunResult> {
    cfg.validate()?;
    let mut decoder = GroupDecoder::new(cfg.decoder_config(), seed)?;
    let mut opt = OptimizerState::new(cfg.optimizer(), cfg.lr);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut resolved = cfg.clone();
        resolved.seeds = vec![seed];
        resolved.out = dir.to_path_buf();
        resolved.save(&dir.join("config.json"))?;
    }
    let classes = cfg.decoder_config().classes;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut final_eval = None;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let loss = match train_epoch(&mut decoder, &mut opt, &data.train, cfg, seed, epoch) {
            Ok(loss) => loss,
            Err(e) => {
                log::error!("{}: training halted: {e:#}", cfg.strategy.label());
                return Err(e.context(format!("run diverged; {} completed epochs kept", history.len())));
            }
        };
        let last = epoch + 1 == cfg.epochs;
        let mut row = EpochMetrics {
            epoch: epoch + 1,
            loss,
            map_no_nms: None,
            map_nms: None,
            duplicate_rate: None,
            pd: None,
            md: None,
        };
        if cfg.eval_every_epoch || last {
            let outputs = decode_all(&decoder, &data.val)?;
            let dets = collect_detections(&outputs, &data.val, 0, cfg.eval.score_threshold)?;
            let eval = score_detections(&dets, &data.val, classes, 0, &cfg.eval)?;
            let dist = distances(&decoder, &outputs, &data.val, &cfg.weights)?;
            row.map_no_nms = Some(eval.map_no_nms);
            row.map_nms = Some(eval.map_nms);
            row.duplicate_rate = Some(eval.duplicate_rate);
            row.pd = dist.pd;
            row.md = dist.md;
            if last {
                final_eval = Some(eval);
            }
        }
        log::info!(
            "{} seed {seed} epoch {}/{}: loss {:.4} mAP {:?}/{:?} dup {:?} pd {:?} md {:?} ({:.1}s)",
            cfg.strategy.label(),
            epoch + 1,
            cfg.epochs,
            loss,
            row.map_no_nms,
            row.map_nms,
            row.duplicate_rate,
            row.pd,
            row.md,
            started.elapsed().as_secs_f64()
        );
        history.push(row);
        if let Some(dir) = out {
            write_metrics(&dir.join("metrics.csv"), &history)?;
            if cfg.checkpoints {
                save_checkpoint(&decoder, &checkpoint_path(dir, epoch + 1))?;
            }
        }
    }
    Ok(RunResult {
        history,
        final_eval: final_eval.ok_or_else(|| anyhow!("no epochs were run"))?,
        decoder,
    })
}
