//! Decode, match per group, and optimize through the public API.

use groupdetr::assign::group_wise_assign;
use groupdetr::diffcore::{optimizer_step, AdamW, OptimizerState, Tape};
use groupdetr::groupdecoder::{inference_slice, GroupConfig, GroupDecoder};
use groupdetr::matchcost::{build_cost_matrix, set_loss, CostWeights};
use groupdetr::scenes::{sample_scene, Scene, SceneParams};

fn small_config(groups: usize) -> GroupConfig {
    GroupConfig {
        groups,
        queries: 6,
        d_model: 16,
        heads: 2,
        layers: 1,
        ffn_dim: 32,
        ..GroupConfig::default()
    }
}

fn step(decoder: &mut GroupDecoder, scene: &Scene, opt: &mut OptimizerState) -> f64 {
    let cfg = *decoder.config();
    let w = CostWeights::default();
    decoder.params_mut().zero_grad();
    let value = {
        let tape = Tape::new();
        let bound = decoder.params().bind(&tape, true);
        let out = decoder.forward(&tape, &bound, &scene.memory).unwrap();
        let values = out.probs.to_vec();
        let boxes = out.boxes.to_vec();
        let preds: Vec<_> = (0..cfg.total_queries())
            .map(|r| groupdetr::matchcost::Prediction {
                class_probs: values[r * cfg.classes..(r + 1) * cfg.classes].to_vec(),
                bbox: groupdetr::boxes::BBox::from_slice(&boxes[r * 4..r * 4 + 4]),
            })
            .collect();
        let costs: Vec<_> = preds
            .chunks(cfg.queries)
            .map(|g| build_cost_matrix(g, &scene.gts, &w).unwrap())
            .collect();
        let assignments = group_wise_assign(&costs).unwrap();
        for a in &assignments {
            assert_eq!(a.len(), scene.gts.len());
        }
        let loss = set_loss(out.probs, out.boxes, &scene.gts, &assignments, cfg.queries, &w).unwrap();
        let grads = tape.backward(loss).unwrap();
        decoder.params_mut().accumulate(&bound, &grads, 1.0);
        loss.item().unwrap()
    };
    optimizer_step(decoder.params_mut(), opt);
    value
}

#[test]
fn group_training_overfits_one_scene() {
    let params = SceneParams {
        d_model: 16,
        min_objects: 3,
        max_objects: 3,
        ..SceneParams::default()
    };
    let scene = sample_scene(0, 99, &params).unwrap();
    let mut decoder = GroupDecoder::new(small_config(3), 5).unwrap();
    let mut opt = OptimizerState::new(AdamW::default(), 5e-3);
    let first = step(&mut decoder, &scene, &mut opt);
    let mut last = first;
    for _ in 0..150 {
        last = step(&mut decoder, &scene, &mut opt);
    }
    assert!(last < 0.5 * first, "loss {first} -> {last}");

    let out = decoder.decode(&scene.memory).unwrap();
    let first_group = inference_slice(&out);
    assert_eq!(first_group.rows(), 6);
    for gt in &scene.gts {
        let best = (0..first_group.rows())
            .map(|r| groupdetr::boxes::iou(&first_group.bbox(r), &gt.bbox))
            .fold(0.0, f64::max);
        assert!(best > 0.5, "best IoU {best} for {gt:?}");
    }
}

#[test]
fn trained_groups_share_everything_but_queries() {
    let one = GroupDecoder::new(small_config(1), 0).unwrap();
    let many = GroupDecoder::new(small_config(4), 0).unwrap();
    assert_eq!(one.shared_parameter_count(), many.shared_parameter_count());
    assert_eq!(many.positions().len(), 4 * one.positions().len());
}
