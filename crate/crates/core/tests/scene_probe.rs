//! Linear separability of object presence in the synthetic scene memory.

use groupdetr::diffcore::{optimizer_step, AdamW, OptimizerState, ParamStore, Tape};
use groupdetr::scenes::{generate, Scene, SceneParams};

/// Per-cell labels: 1 when some object centre falls inside the cell.
fn presence(scene: &Scene, grid: usize) -> Vec<f64> {
    let mut labels = vec![0.0; grid * grid];
    for gt in &scene.gts {
        let u = ((gt.bbox.cx * grid as f64) as usize).min(grid - 1);
        let v = ((gt.bbox.cy * grid as f64) as usize).min(grid - 1);
        labels[v * grid + u] = 1.0;
    }
    labels
}

fn table(scenes: &[Scene], params: &SceneParams) -> (Vec<f64>, Vec<f64>) {
    let d = params.d_model;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for s in scenes {
        for token in s.memory.chunks(d) {
            x.extend_from_slice(token);
            x.push(1.0);
        }
        y.extend(presence(s, params.grid));
    }
    (x, y)
}

/// Logistic regression fitted by full-batch AdamW on the autodiff tape.
fn fit(x: &[f64], y: &[f64], width: usize, steps: usize) -> Vec<f64> {
    let rows = y.len();
    let mut store = ParamStore::new();
    let w = store.add("w", &[width, 1], vec![0.0; width]).unwrap();
    let mut opt = OptimizerState::new(
        AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        },
        0.05,
    );
    for _ in 0..steps {
        store.zero_grad();
        {
            let tape = Tape::new();
            let bound = store.bind(&tape, true);
            let xs = tape.constant(&[rows, width], x.to_vec()).unwrap();
            let ys = tape.constant(&[rows, 1], y.to_vec()).unwrap();
            let p = xs.matmul(bound.get(w)).unwrap().sigmoid().clamp(1e-9, 1.0 - 1e-9);
            let pos = ys.mul(p.ln()).unwrap();
            let neg = ys.rsub_scalar(1.0).mul(p.rsub_scalar(1.0).ln()).unwrap();
            let loss = pos.add(neg).unwrap().mean().neg();
            let grads = tape.backward(loss).unwrap();
            store.accumulate(&bound, &grads, 1.0);
        }
        optimizer_step(&mut store, &mut opt);
    }
    store.get(w).value().to_vec()
}

fn scores(x: &[f64], w: &[f64]) -> Vec<f64> {
    x.chunks(w.len())
        .map(|row| row.iter().zip(w).map(|(a, b)| a * b).sum())
        .collect()
}

#[test]
fn linear_probe_detects_object_cells() {
    let params = SceneParams {
        d_model: 32,
        ..SceneParams::default()
    };
    let train = generate(11, 0, 1000, &params).unwrap();
    let test = generate(11, 1000, 300, &params).unwrap();
    let width = params.d_model + 1;
    let (x, y) = table(&train, &params);
    let w = fit(&x, &y, width, 300);

    let (xt, yt) = table(&test, &params);
    let pred: Vec<bool> = scores(&xt, &w).iter().map(|s| *s > 0.0).collect();
    let (mut tp, mut tn, mut pos, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (p, t) in pred.iter().zip(&yt) {
        if *t > 0.5 {
            pos += 1;
            tp += usize::from(*p);
        } else {
            neg += 1;
            tn += usize::from(!*p);
        }
    }
    let accuracy = (tp + tn) as f64 / yt.len() as f64;
    let recall = tp as f64 / pos as f64;
    let specificity = tn as f64 / neg as f64;
    println!("probe accuracy {accuracy:.4} recall {recall:.4} specificity {specificity:.4}");
    assert!(accuracy > 0.9, "accuracy {accuracy}");
    assert!(recall > 0.5, "recall {recall}");
}
