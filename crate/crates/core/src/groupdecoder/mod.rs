//! Toy detection-transformer decoder with K groups of N object queries.
//!
//! All groups run through the same parameters in one pass. Self-attention is
//! masked block-diagonally so that no query attends outside its own group;
//! cross-attention to the scene memory is unmasked. Each query carries a
//! learnable 2-d reference point (the sigmoid of its anchor logits) that
//! conditions attention through a sine embedding and anchors the box centre.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::diffcore::{self, concat, sigmoid, BoundParams, ParamId, ParamStore, Tape, Tensor};
use crate::matchcost::Prediction;
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

const LN_EPS: f64 = 1e-5;
/// Prior foreground probability encoded in the class-head bias.
const CLASS_PRIOR: f64 = 0.01;
/// Initial box side length encoded in the box-head size bias.
const INITIAL_SIZE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupConfig {
    pub groups: usize,
    pub queries: usize,
    pub classes: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub memory_tokens: usize,
    pub ffn_dim: usize,
}

impl Default for GroupConfig {
    fn default() -> Self {
        Self {
            groups: 1,
            queries: 20,
            classes: 4,
            d_model: 64,
            heads: 4,
            layers: 2,
            memory_tokens: 64,
            ffn_dim: 128,
        }
    }
}

impl GroupConfig {
    pub fn total_queries(&self) -> usize {
        self.groups * self.queries
    }

    /// Side of the square memory grid.
    pub fn grid(&self) -> usize {
        (self.memory_tokens as f64).sqrt().round() as usize
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Invalid(msg));
        if self.groups == 0 || self.queries == 0 || self.classes == 0 || self.layers == 0 || self.ffn_dim == 0 {
            return fail(format!("group config sizes must be positive: {self:?}"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.d_model % 4 != 0 {
            return fail(format!(
                "d_model {} must be a multiple of 4 for the sine embedding",
                self.d_model
            ));
        }
        let g = self.grid();
        if g == 0 || g * g != self.memory_tokens {
            return fail(format!("memory_tokens {} is not a square grid", self.memory_tokens));
        }
        Ok(())
    }
}

/// Boolean `(K*N) x (K*N)` self-attention mask; `true` means attendable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.size + col]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    pub fn true_count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }
}

pub fn build_group_mask(groups: usize, queries: usize) -> AttentionMask {
    let size = groups * queries;
    let allowed = (0..size * size)
        .map(|i| (i / size) / queries == (i % size) / queries)
        .collect();
    AttentionMask { size, allowed }
}

/// Learnable query inputs: content embeddings and anchor logits, one row per query.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub content: Vec<f64>,
    pub anchors: Vec<f64>,
}

impl QuerySet {
    /// Normalized reference points `sigmoid(anchors)`, one `[x, y]` per query.
    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.anchors.chunks(2).map(|a| [sigmoid(a[0]), sigmoid(a[1])]).collect()
    }
}

/// Per-query class probabilities and boxes for all `K*N` queries.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    pub groups: usize,
    pub queries: usize,
    pub classes: usize,
    /// `[rows, classes]`, row-major.
    pub probs: Vec<f64>,
    /// `[rows, 4]` centre-size boxes, row-major.
    pub boxes: Vec<f64>,
}

impl DecoderOutput {
    pub fn rows(&self) -> usize {
        self.groups * self.queries
    }

    pub fn class_probs(&self, row: usize) -> &[f64] {
        &self.probs[row * self.classes..(row + 1) * self.classes]
    }

    pub fn bbox(&self, row: usize) -> BBox {
        BBox::from_slice(&self.boxes[row * 4..row * 4 + 4])
    }

    pub fn prediction(&self, row: usize) -> Prediction {
        Prediction {
            class_probs: self.class_probs(row).to_vec(),
            bbox: self.bbox(row),
        }
    }

    pub fn predictions(&self) -> Vec<Prediction> {
        (0..self.rows()).map(|r| self.prediction(r)).collect()
    }

    /// Predictions of group `g` only.
    pub fn group_predictions(&self, g: usize) -> Vec<Prediction> {
        (g * self.queries..(g + 1) * self.queries)
            .map(|r| self.prediction(r))
            .collect()
    }

    /// Rows `[g*N, (g+1)*N)` as a single-group output.
    pub fn group_slice(&self, g: usize) -> Result<DecoderOutput> {
        if g >= self.groups {
            return Err(Error::OutOfRange {
                what: "groups",
                index: g,
                len: self.groups,
            });
        }
        let (a, b) = (g * self.queries, (g + 1) * self.queries);
        Ok(DecoderOutput {
            groups: 1,
            queries: self.queries,
            classes: self.classes,
            probs: self.probs[a * self.classes..b * self.classes].to_vec(),
            boxes: self.boxes[a * 4..b * 4].to_vec(),
        })
    }
}

/// The first group, which is all that is kept at inference.
pub fn inference_slice(out: &DecoderOutput) -> DecoderOutput {
    out.group_slice(0).expect("decoder output has at least one group")
}

/// Taped decoder outputs: `probs` is `[K*N, C]`, `boxes` is `[K*N, 4]`.
pub struct DecoderTensors<'t> {
    pub probs: Tensor<'t>,
    pub boxes: Tensor<'t>,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    self_attn: Attention,
    norm1: Norm,
    cross_attn: Attention,
    norm2: Norm,
    ffn1: Linear,
    ffn2: Linear,
    norm3: Norm,
}

#[derive(Debug, Clone)]
struct Ids {
    content: ParamId,
    anchors: ParamId,
    pos1: Linear,
    pos2: Linear,
    layers: Vec<Layer>,
    class: Linear,
    box1: Linear,
    box2: Linear,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn param(&mut self, name: String, shape: &[usize], values: Vec<f64>) -> Result<ParamId> {
        Ok(self.store.add(name, shape, values)?)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        Ok(Linear {
            w: self.param(format!("{name}.weight"), &[fan_in, fan_out], w)?,
            b: self.param(format!("{name}.bias"), &[fan_out], vec![0.0; fan_out])?,
        })
    }

    fn filled_linear(&mut self, name: &str, fan_in: usize, bias: Vec<f64>) -> Result<Linear> {
        let fan_out = bias.len();
        Ok(Linear {
            w: self.param(
                format!("{name}.weight"),
                &[fan_in, fan_out],
                vec![0.0; fan_in * fan_out],
            )?,
            b: self.param(format!("{name}.bias"), &[fan_out], bias)?,
        })
    }

    fn attention(&mut self, name: &str, d: usize) -> Result<Attention> {
        Ok(Attention {
            q: self.linear(&format!("{name}.q"), d, d)?,
            k: self.linear(&format!("{name}.k"), d, d)?,
            v: self.linear(&format!("{name}.v"), d, d)?,
            o: self.linear(&format!("{name}.out"), d, d)?,
        })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            gain: self.param(format!("{name}.gain"), &[d], vec![1.0; d])?,
            bias: self.param(format!("{name}.bias"), &[d], vec![0.0; d])?,
        })
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Angular frequencies of the sine embedding, geometric from pi to 16 pi.
fn frequencies(d_model: usize) -> Vec<f64> {
    let f = d_model / 4;
    (0..f)
        .map(|i| {
            let t = if f > 1 { i as f64 / (f - 1) as f64 } else { 0.0 };
            std::f64::consts::PI * 16f64.powf(t)
        })
        .collect()
}

/// Sine embedding of a normalized point, laid out as
/// `[sin(w x).., sin(w y).., cos(w x).., cos(w y)..]`.
pub fn sine_embedding(x: f64, y: f64, d_model: usize) -> Vec<f64> {
    let freqs = frequencies(d_model);
    let phases: Vec<f64> = freqs.iter().map(|w| w * x).chain(freqs.iter().map(|w| w * y)).collect();
    phases
        .iter()
        .map(|p| p.sin())
        .chain(phases.iter().map(|p| p.cos()))
        .collect()
}

/// Centre of memory cell `index` on a `grid x grid` lattice, row-major in `v` then `u`.
pub fn cell_center(index: usize, grid: usize) -> [f64; 2] {
    let (v, u) = (index / grid, index % grid);
    [(u as f64 + 0.5) / grid as f64, (v as f64 + 0.5) / grid as f64]
}

fn linear<'t>(p: &BoundParams<'t>, l: Linear, x: Tensor<'t>) -> diffcore::Result<Tensor<'t>> {
    x.matmul(p.get(l.w))?.add(p.get(l.b))
}

fn norm<'t>(p: &BoundParams<'t>, n: Norm, x: Tensor<'t>) -> diffcore::Result<Tensor<'t>> {
    x.layer_norm(LN_EPS)?.mul(p.get(n.gain))?.add(p.get(n.bias))
}

#[derive(Debug, Clone)]
pub struct GroupDecoder {
    cfg: GroupConfig,
    params: ParamStore,
    ids: Ids,
    mask: AttentionMask,
    memory_pos: Vec<f64>,
    freq_matrix: Vec<f64>,
}

impl GroupDecoder {
    /// Fresh decoder; every query row (in every group) draws its own
    /// content embedding and a reference point uniform in `[0.05, 0.95]^2`.
    pub fn new(cfg: GroupConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let (d, rows) = (cfg.d_model, cfg.total_queries());

        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let content: Vec<f64> = (0..rows * d).map(|_| normal.sample(&mut init.rng)).collect();
        let anchors: Vec<f64> = (0..rows * 2)
            .map(|_| logit(init.rng.random_range(0.05..0.95)))
            .collect();
        let content = init.param("query.content".into(), &[rows, d], content)?;
        let anchors = init.param("query.anchors".into(), &[rows, 2], anchors)?;

        let pos1 = init.linear("pos.0", d, d)?;
        let pos2 = init.linear("pos.1", d, d)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            layers.push(Layer {
                self_attn: init.attention(&format!("layer{l}.self_attn"), d)?,
                norm1: init.norm(&format!("layer{l}.norm1"), d)?,
                cross_attn: init.attention(&format!("layer{l}.cross_attn"), d)?,
                norm2: init.norm(&format!("layer{l}.norm2"), d)?,
                ffn1: init.linear(&format!("layer{l}.ffn.0"), d, cfg.ffn_dim)?,
                ffn2: init.linear(&format!("layer{l}.ffn.1"), cfg.ffn_dim, d)?,
                norm3: init.norm(&format!("layer{l}.norm3"), d)?,
            });
        }
        let class = init.linear("class_head", d, cfg.classes)?;
        let prior = -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln();
        init.store.get_mut(class.b).value_mut().fill(prior);
        let box1 = init.linear("box_head.0", d, d)?;
        let size = logit(INITIAL_SIZE);
        let box2 = init.filled_linear("box_head.1", d, vec![0.0, 0.0, size, size])?;

        let ids = Ids {
            content,
            anchors,
            pos1,
            pos2,
            layers,
            class,
            box1,
            box2,
        };
        Ok(Self::assemble(cfg, store, ids))
    }

    fn assemble(cfg: GroupConfig, params: ParamStore, ids: Ids) -> Self {
        let grid = cfg.grid();
        let memory_pos = (0..cfg.memory_tokens)
            .flat_map(|i| {
                let [x, y] = cell_center(i, grid);
                sine_embedding(x, y, cfg.d_model)
            })
            .collect();
        let freqs = frequencies(cfg.d_model);
        let f = freqs.len();
        let mut freq_matrix = vec![0.0; 2 * 2 * f];
        for (i, w) in freqs.iter().enumerate() {
            freq_matrix[i] = *w;
            freq_matrix[2 * f + f + i] = *w;
        }
        Self {
            mask: build_group_mask(cfg.groups, cfg.queries),
            cfg,
            params,
            ids,
            memory_pos,
            freq_matrix,
        }
    }

    pub fn config(&self) -> &GroupConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn mask(&self) -> &AttentionMask {
        &self.mask
    }

    pub fn query_set(&self) -> QuerySet {
        QuerySet {
            content: self.params.get(self.ids.content).value().to_vec(),
            anchors: self.params.get(self.ids.anchors).value().to_vec(),
        }
    }

    /// Reference points of every query, `[x, y]` per row.
    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.query_set().positions()
    }

    /// Number of parameter elements excluding the per-query embeddings and anchors.
    pub fn shared_parameter_count(&self) -> usize {
        let query = self.params.get(self.ids.content).len() + self.params.get(self.ids.anchors).len();
        self.params.element_count() - query
    }

    fn check_memory(&self, memory: &[f64]) -> Result<()> {
        let want = self.cfg.memory_tokens * self.cfg.d_model;
        if memory.len() != want {
            return Err(Error::Invalid(format!(
                "memory has {} values, expected {} tokens x {} channels",
                memory.len(),
                self.cfg.memory_tokens,
                self.cfg.d_model
            )));
        }
        Ok(())
    }

    /// Taped forward pass over all groups using the bound parameters.
    pub fn forward<'t>(&self, tape: &'t Tape, p: &BoundParams<'t>, memory: &[f64]) -> Result<DecoderTensors<'t>> {
        self.forward_with(tape, p, p.get(self.ids.content), p.get(self.ids.anchors), memory)
    }

    /// Forward pass with explicit query inputs in place of the stored ones.
    pub fn forward_with<'t>(
        &self,
        tape: &'t Tape,
        p: &BoundParams<'t>,
        content: Tensor<'t>,
        anchors: Tensor<'t>,
        memory: &[f64],
    ) -> Result<DecoderTensors<'t>> {
        self.check_memory(memory)?;
        let (d, rows) = (self.cfg.d_model, self.cfg.total_queries());
        if content.shape() != [rows, d] || anchors.shape() != [rows, 2] {
            return Err(Error::Invalid(format!(
                "query inputs {:?} / {:?} do not match {rows} queries of width {d}",
                content.shape(),
                anchors.shape()
            )));
        }
        let ids = &self.ids;
        let value = tape.constant(&[self.cfg.memory_tokens, d], memory.to_vec())?;
        let key_input: Vec<f64> = memory.iter().zip(&self.memory_pos).map(|(m, e)| m + e).collect();
        let key = tape.constant(&[self.cfg.memory_tokens, d], key_input)?;

        let reference = anchors.sigmoid();
        let freqs = tape.constant(&[2, d / 2], self.freq_matrix.clone())?;
        let phases = reference.matmul(freqs)?;
        let embed = concat(&[phases.sin(), phases.cos()], 1)?;
        let query_pos = linear(p, ids.pos2, linear(p, ids.pos1, embed)?.relu())?;

        let mut x = content;
        for (l, layer) in ids.layers.iter().enumerate() {
            let q = x.add(query_pos)?;
            let attn = self.attention(p, layer.self_attn, q, q, x, Some(self.mask.as_slice()))?;
            x = norm(p, layer.norm1, x.add(attn)?)?;
            let attn = self.attention(p, layer.cross_attn, x.add(query_pos)?, key, value, None)?;
            x = norm(p, layer.norm2, x.add(attn)?)?;
            let ffn = linear(p, layer.ffn2, linear(p, layer.ffn1, x)?.relu())?;
            x = norm(p, layer.norm3, x.add(ffn)?)?;
            if !x.all_finite() {
                return Err(Error::NonFinite { layer: l });
            }
        }

        let probs = linear(p, ids.class, x)?.sigmoid();
        let raw = linear(p, ids.box2, linear(p, ids.box1, x)?.relu())?;
        let centers = raw.slice(1, 0, 2)?.add(anchors)?.sigmoid();
        let sizes = raw.slice(1, 2, 4)?.sigmoid();
        let boxes = concat(&[centers, sizes], 1)?;
        if !probs.all_finite() || !boxes.all_finite() {
            return Err(Error::NonFinite { layer: self.cfg.layers });
        }
        Ok(DecoderTensors { probs, boxes })
    }

    fn attention<'t>(
        &self,
        p: &BoundParams<'t>,
        a: Attention,
        query: Tensor<'t>,
        key: Tensor<'t>,
        value: Tensor<'t>,
        mask: Option<&[bool]>,
    ) -> diffcore::Result<Tensor<'t>> {
        let h = self.cfg.heads;
        let scale = 1.0 / ((self.cfg.d_model / h) as f64).sqrt();
        let q = linear(p, a.q, query)?.split_heads(h)?;
        let k = linear(p, a.k, key)?.split_heads(h)?;
        let v = linear(p, a.v, value)?.split_heads(h)?;
        let weights = q.matmul(k.transpose_last()?)?.scale(scale).softmax(mask)?;
        linear(p, a.o, weights.matmul(v)?.merge_heads()?)
    }

    fn collect(&self, t: DecoderTensors<'_>) -> DecoderOutput {
        DecoderOutput {
            groups: self.cfg.groups,
            queries: self.cfg.queries,
            classes: self.cfg.classes,
            probs: t.probs.to_vec(),
            boxes: t.boxes.to_vec(),
        }
    }

    /// Gradient-free forward pass over all groups.
    pub fn decode(&self, memory: &[f64]) -> Result<DecoderOutput> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let out = self.forward(&tape, &p, memory)?;
        Ok(self.collect(out))
    }

    /// Gradient-free forward pass with substituted query inputs.
    pub fn decode_with(&self, queries: &QuerySet, memory: &[f64]) -> Result<DecoderOutput> {
        let (d, rows) = (self.cfg.d_model, self.cfg.total_queries());
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let content = tape.constant(&[rows, d], queries.content.clone())?;
        let anchors = tape.constant(&[rows, 2], queries.anchors.clone())?;
        let out = self.forward_with(&tape, &p, content, anchors, memory)?;
        Ok(self.collect(out))
    }
}
