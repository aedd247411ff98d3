//! Synthetic detection scenes.
//!
//! A scene is a handful of class-labelled boxes plus a `G x G` grid of
//! memory tokens standing in for encoder features. Each token is a fixed
//! random projection of per-class Gaussian bumps and the cell coordinates,
//! with additive Gaussian noise.
//!
//! Dataset files are line-delimited text. Line 1 is a JSON header; every
//! following line is one scene:
//!
//! ```text
//! <scene_id> <truncated 0|1> <M> [<class> <cx> <cy> <w> <h>]xM <memory values>
//! ```
//!
//! Floats are written with 17 significant digits so loading is bit-exact.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::groupdecoder::cell_center;
use crate::matchcost::GroundTruth;
use crate::{Error, Result};

pub const DATASET_FORMAT: &str = "groupdetr-scenes";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub min_objects: usize,
    pub max_objects: usize,
    pub classes: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub min_center_distance: f64,
    pub max_tries: usize,
    pub grid: usize,
    pub d_model: usize,
    pub bump_scale: f64,
    pub noise_sigma: f64,
    pub projection_seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            min_objects: 1,
            max_objects: 5,
            classes: 4,
            min_size: 0.08,
            max_size: 0.4,
            min_center_distance: 0.05,
            max_tries: 1000,
            grid: 8,
            d_model: 64,
            bump_scale: 0.02,
            noise_sigma: 0.05,
            projection_seed: 0x5eed,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.min_objects <= self.max_objects
            && self.classes > 0
            && self.grid > 0
            && self.d_model > 0
            && self.max_tries > 0
            && 0.0 < self.min_size
            && self.min_size <= self.max_size
            && self.max_size <= 1.0
            && self.min_center_distance >= 0.0
            && self.bump_scale > 0.0
            && self.noise_sigma >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid scene parameters: {self:?}")))
        }
    }

    pub fn memory_tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn memory_len(&self) -> usize {
        self.memory_tokens() * self.d_model
    }

    /// Fixed `(classes + 2) x d_model` projection, row-major.
    pub fn projection(&self) -> Vec<f64> {
        let rows = self.classes + 2;
        let mut rng = ChaCha8Rng::seed_from_u64(self.projection_seed);
        let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("positive scale");
        (0..rows * self.d_model).map(|_| normal.sample(&mut rng)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: u64,
    pub gts: Vec<GroundTruth>,
    /// `[grid * grid, d_model]`, row-major; token `v * grid + u`.
    pub memory: Vec<f64>,
    /// Fewer objects were placed than drawn because rejection sampling gave up.
    pub truncated: bool,
}

/// Per-scene seed derived from a dataset seed and a scene id (SplitMix64).
pub fn scene_seed(base: u64, scene_id: u64) -> u64 {
    let mut z = base ^ scene_id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_objects(rng: &mut ChaCha8Rng, params: &SceneParams) -> (Vec<GroundTruth>, bool) {
    let m = rng.random_range(params.min_objects..=params.max_objects);
    let mut gts: Vec<GroundTruth> = Vec::with_capacity(m);
    for _ in 0..m {
        let placed = (0..params.max_tries).find_map(|_| {
            let cx: f64 = rng.random();
            let cy: f64 = rng.random();
            let w = rng.random_range(params.min_size..=params.max_size);
            let h = rng.random_range(params.min_size..=params.max_size);
            let class_id = rng.random_range(0..params.classes);
            let [x1, y1, x2, y2] = BBox::new(cx, cy, w, h).corners();
            let bbox = BBox::from_corners(x1.max(0.0), y1.max(0.0), x2.min(1.0), y2.min(1.0));
            let clear = gts.iter().all(|g| {
                let (dx, dy) = (g.bbox.cx - bbox.cx, g.bbox.cy - bbox.cy);
                (dx * dx + dy * dy).sqrt() >= params.min_center_distance
            });
            clear.then_some(GroundTruth { class_id, bbox })
        });
        match placed {
            Some(gt) => gts.push(gt),
            None => {
                log::warn!("rejection sampling gave up after {} tries", params.max_tries);
                return (gts, true);
            }
        }
    }
    (gts, false)
}

/// Noise-free `[grid * grid, classes + 2]` features: per-class bump sums,
/// then the cell-centre coordinates.
pub fn raw_features(gts: &[GroundTruth], params: &SceneParams) -> Vec<f64> {
    let width = params.classes + 2;
    let mut out = vec![0.0; params.memory_tokens() * width];
    for (cell, row) in out.chunks_mut(width).enumerate() {
        let [x, y] = cell_center(cell, params.grid);
        for gt in gts {
            let (dx, dy) = (x - gt.bbox.cx, y - gt.bbox.cy);
            let spread = 2.0 * (gt.bbox.w * gt.bbox.h).sqrt() * params.bump_scale;
            row[gt.class_id] += (-(dx * dx + dy * dy) / spread).exp();
        }
        row[params.classes] = x;
        row[params.classes + 1] = y;
    }
    out
}

fn project(features: &[f64], projection: &[f64], params: &SceneParams) -> Vec<f64> {
    let (width, d) = (params.classes + 2, params.d_model);
    let mut out = vec![0.0; params.memory_tokens() * d];
    for (row, dst) in features.chunks(width).zip(out.chunks_mut(d)) {
        for (f, proj) in row.iter().zip(projection.chunks(d)) {
            for (o, p) in dst.iter_mut().zip(proj) {
                *o += f * p;
            }
        }
    }
    out
}

/// Memory tokens for a set of objects; `rng` supplies the noise.
pub fn build_memory(gts: &[GroundTruth], params: &SceneParams, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut memory = project(&raw_features(gts, params), &params.projection(), params);
    if params.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, params.noise_sigma).expect("positive sigma");
        memory.iter_mut().for_each(|v| *v += noise.sample(rng));
    }
    memory
}

/// Scene fully determined by `seed` and `params`; `scene_id` is only a label.
pub fn sample_scene(scene_id: u64, seed: u64, params: &SceneParams) -> Result<Scene> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (gts, truncated) = sample_objects(&mut rng, params);
    let memory = build_memory(&gts, params, &mut rng);
    Ok(Scene {
        scene_id,
        gts,
        memory,
        truncated,
    })
}

/// Scenes with ids `first_id..first_id + count`, seeded from `base_seed`.
pub fn generate(base_seed: u64, first_id: u64, count: usize, params: &SceneParams) -> Result<Vec<Scene>> {
    (first_id..first_id + count as u64)
        .map(|id| sample_scene(id, scene_seed(base_seed, id), params))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub params: SceneParams,
    pub count: usize,
}

fn write_scene(out: &mut impl Write, scene: &Scene) -> std::io::Result<()> {
    write!(
        out,
        "{} {} {}",
        scene.scene_id,
        u8::from(scene.truncated),
        scene.gts.len()
    )?;
    for gt in &scene.gts {
        write!(out, " {}", gt.class_id)?;
        for v in gt.bbox.to_array() {
            write!(out, " {v:.16e}")?;
        }
    }
    for v in &scene.memory {
        write!(out, " {v:.16e}")?;
    }
    writeln!(out)
}

pub fn save_dataset(scenes: &[Scene], params: &SceneParams, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        params: *params,
        count: scenes.len(),
    };
    let header = serde_json::to_string(&header).map_err(|e| Error::Invalid(e.to_string()))?;
    let io = |e| Error::io(path, e);
    writeln!(out, "{header}").map_err(io)?;
    for scene in scenes {
        if scene.memory.len() != params.memory_len() {
            return Err(Error::Invalid(format!(
                "scene {} has {} memory values, parameters imply {}",
                scene.scene_id,
                scene.memory.len(),
                params.memory_len()
            )));
        }
        write_scene(&mut out, scene).map_err(io)?;
    }
    out.flush().map_err(io)
}

fn parse_scene(line: &str, params: &SceneParams) -> std::result::Result<Scene, String> {
    let mut tokens = line.split_ascii_whitespace();
    let mut next = |what: &str| tokens.next().ok_or_else(|| format!("truncated record: missing {what}"));
    let int = |s: &str, what: &str| s.parse::<u64>().map_err(|e| format!("{what} {s:?}: {e}"));
    let float = |s: &str| s.parse::<f64>().map_err(|e| format!("value {s:?}: {e}"));

    let scene_id = int(next("scene id")?, "scene id")?;
    let truncated = match next("truncation flag")? {
        "0" => false,
        "1" => true,
        other => return Err(format!("truncation flag {other:?}")),
    };
    let m = int(next("object count")?, "object count")? as usize;
    if m > params.max_objects {
        return Err(format!("{m} objects exceed the maximum {}", params.max_objects));
    }
    let mut gts = Vec::with_capacity(m);
    for _ in 0..m {
        let class_id = int(next("class")?, "class")? as usize;
        if class_id >= params.classes {
            return Err(format!("class {class_id} out of range"));
        }
        let mut b = [0.0; 4];
        for v in &mut b {
            *v = float(next("box")?)?;
        }
        gts.push(GroundTruth {
            class_id,
            bbox: BBox::from_slice(&b),
        });
    }
    let mut memory = Vec::with_capacity(params.memory_len());
    for _ in 0..params.memory_len() {
        memory.push(float(next("memory value")?)?);
    }
    if next("end").is_ok() {
        return Err("trailing values".into());
    }
    Ok(Scene {
        scene_id,
        gts,
        memory,
        truncated,
    })
}

pub fn load_dataset(path: &Path) -> Result<(SceneParams, Vec<Scene>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let format_err = |line: usize, reason: String| Error::Format {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| format_err(1, "empty file".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: DatasetHeader = serde_json::from_str(&header).map_err(|e| format_err(1, format!("header: {e}")))?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(format_err(
            1,
            format!(
                "unsupported format {} version {}, expected {DATASET_FORMAT} version {DATASET_VERSION}",
                header.format, header.version
            ),
        ));
    }
    header.params.validate().map_err(|e| format_err(1, e.to_string()))?;
    let mut scenes = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        scenes.push(parse_scene(&line, &header.params).map_err(|r| format_err(line_no, r))?);
    }
    if scenes.len() != header.count {
        return Err(format_err(
            scenes.len() + 2,
            format!("header promises {} scenes, found {}", header.count, scenes.len()),
        ));
    }
    Ok((header.params, scenes))
}
