//! Procedural joint segmentation + depth scenes.
//!
//! A scene is a flat background (class 0, depth 1.0) with two to four
//! circles, rectangles and triangles. Larger objects sit nearer the camera.
//! Each pixel belongs to the nearest object covering it, which then also
//! determines the pixel's depth and colour.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLASSES: usize = 4;
pub const BACKGROUND_DEPTH: f64 = 1.0;
const NOISE_SIGMA: f64 = 0.02;
const RAMP: f64 = 0.05;
/// Seed offset between consecutive splits; split sizes must stay below it.
pub const SPLIT_STRIDE: u64 = 1 << 32;

const COLORS: [[f64; 3]; CLASSES] = [
    [0.45, 0.45, 0.5],
    [0.9, 0.25, 0.2],
    [0.25, 0.8, 0.3],
    [0.25, 0.35, 0.95],
];

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub h: usize,
    pub w: usize,
    /// [3, H, W] in [0, 1].
    pub image: Vec<f64>,
    /// [H, W] class ids.
    pub seg: Vec<u8>,
    /// [H, W] in [0.1, 1.0].
    pub depth: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Circle { cy: f64, cx: f64, r: f64 },
    Rect { cy: f64, cx: f64, hy: f64, hx: f64 },
    Triangle { v: [(f64, f64); 3] },
}

impl Shape {
    fn class(&self) -> u8 {
        match self {
            Shape::Circle { .. } => 1,
            Shape::Rect { .. } => 2,
            Shape::Triangle { .. } => 3,
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Circle { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Rect { cy, cx, hy, hx } => (y - cy).abs() <= hy && (x - cx).abs() <= hx,
            Shape::Triangle { v } => {
                let edge = |a: (f64, f64), b: (f64, f64)| (b.1 - a.1) * (y - a.0) - (b.0 - a.0) * (x - a.1);
                let d = [edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0])];
                d.iter().all(|&e| e >= 0.0) || d.iter().all(|&e| e <= 0.0)
            }
        }
    }
}

struct Object {
    shape: Shape,
    /// Depth at the object's centre.
    depth: f64,
    /// Unit direction and centre of the in-object depth ramp.
    ramp_dir: (f64, f64),
    center: (f64, f64),
    extent: f64,
    tint: [f64; 3],
}

impl Object {
    fn depth_at(&self, y: f64, x: f64) -> f64 {
        let proj = (y - self.center.0) * self.ramp_dir.0 + (x - self.center.1) * self.ramp_dir.1;
        self.depth + RAMP * 0.5 * (proj / self.extent).clamp(-1.0, 1.0)
    }
}

fn sample_object(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Object {
    let side = h.min(w) as f64;
    let t: f64 = rng.random();
    let size = (0.12 + 0.23 * t) * side;
    let cy = rng.random_range(0.0..h as f64);
    let cx = rng.random_range(0.0..w as f64);
    let shape = match rng.random_range(0..3u8) {
        0 => Shape::Circle { cy, cx, r: size },
        1 => Shape::Rect {
            cy,
            cx,
            hy: size * rng.random_range(0.6..1.0),
            hx: size * rng.random_range(0.6..1.0),
        },
        _ => {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let r = size * 1.2;
            let v = [0.0, 1.0, 2.0].map(|i: f64| {
                let a = theta + i * std::f64::consts::TAU / 3.0;
                (cy + r * a.sin(), cx + r * a.cos())
            });
            Shape::Triangle { v }
        }
    };
    // Bigger objects are nearer: size maps linearly onto [0.85, 0.15].
    let depth = 0.85 - 0.7 * t + rng.random_range(-0.02..0.02);
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let base = COLORS[shape.class() as usize];
    let tint = base.map(|c| (c + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0));
    Object {
        shape,
        depth,
        ramp_dir: (phi.sin(), phi.cos()),
        center: (cy, cx),
        extent: size,
        tint,
    }
}

/// One object's footprint: its class and, at every pixel it covers, the
/// depth it would have if nothing occluded it.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub class: u8,
    pub depth: Vec<Option<f64>>,
}

impl Object {
    fn rasterize(&self, h: usize, w: usize) -> Layer {
        let mut depth = vec![None; h * w];
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                if self.shape.contains(py, px) {
                    depth[y * w + x] = Some(self.depth_at(py, px).clamp(0.1, 0.9));
                }
            }
        }
        Layer {
            class: self.shape.class(),
            depth,
        }
    }
}

fn sample_objects(seed: u64, h: usize, w: usize, classes: usize) -> Result<(ChaCha8Rng, Vec<Object>)> {
    if classes != CLASSES {
        return Err(Error::invalid(format!(
            "scene generator draws {CLASSES} classes, got {classes}"
        )));
    }
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!("scene size {h}x{w} too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_obj = rng.random_range(2..=4);
    let objects = (0..n_obj).map(|_| sample_object(&mut rng, h, w)).collect();
    Ok((rng, objects))
}

/// The unoccluded object layers `generate_scene` composites for `seed`.
pub fn scene_layers(seed: u64, h: usize, w: usize, classes: usize) -> Result<Vec<Layer>> {
    let (_, objects) = sample_objects(seed, h, w, classes)?;
    Ok(objects.iter().map(|o| o.rasterize(h, w)).collect())
}

/// Deterministic scene for `seed`; only `classes == 4` is supported.
pub fn generate_scene(seed: u64, h: usize, w: usize, classes: usize) -> Result<Scene> {
    let (mut rng, objects) = sample_objects(seed, h, w, classes)?;
    let layers: Vec<Layer> = objects.iter().map(|o| o.rasterize(h, w)).collect();
    let hw = h * w;
    let mut seg = vec![0u8; hw];
    let mut depth = vec![BACKGROUND_DEPTH; hw];
    let mut owner: Vec<Option<usize>> = vec![None; hw];
    for (oi, layer) in layers.iter().enumerate() {
        for (i, d) in layer.depth.iter().enumerate() {
            if let &Some(d) = d {
                if d < depth[i] {
                    depth[i] = d;
                    seg[i] = layer.class;
                    owner[i] = Some(oi);
                }
            }
        }
    }
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut image = vec![0.0; 3 * hw];
    for i in 0..hw {
        let tint = match owner[i] {
            Some(oi) => objects[oi].tint,
            None => COLORS[0],
        };
        // Nearer surfaces are lit more brightly.
        let shade = 1.1 - 0.7 * depth[i];
        for ch in 0..3 {
            let v = tint[ch] * shade + noise.sample(&mut rng);
            image[ch * hw + i] = v.clamp(0.0, 1.0);
        }
    }
    Ok(Scene {
        seed,
        h,
        w,
        image,
        seg,
        depth,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            n_train: 512,
            n_val: 96,
            n_test: 128,
        }
    }
}

impl SplitSpec {
    pub fn val_fraction(&self) -> f64 {
        self.n_val as f64 / (self.n_train + self.n_val) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[u64] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Scene seeds per split. Split `s` draws from
/// `[base_seed + s * SPLIT_STRIDE, …)`, so the lists never overlap.
pub fn make_splits(spec: SplitSpec, base_seed: u64) -> Result<Splits> {
    let counts = [spec.n_train, spec.n_val, spec.n_test];
    if counts.iter().any(|&c| c == 0 || c as u64 >= SPLIT_STRIDE) {
        return Err(Error::invalid(format!("split sizes {counts:?} out of range")));
    }
    if base_seed.checked_add(3 * SPLIT_STRIDE).is_none() {
        return Err(Error::invalid(format!("base seed {base_seed} too large")));
    }
    let range = |s: u64, n: usize| (0..n as u64).map(|i| base_seed + s * SPLIT_STRIDE + i).collect();
    Ok(Splits {
        train: range(0, spec.n_train),
        val: range(1, spec.n_val),
        test: range(2, spec.n_test),
    })
}

/// Network-ready tensors for a list of scenes.
#[derive(Clone, Debug)]
pub struct Batch {
    /// [N, 3, H, W].
    pub images: Tensor,
    /// [N, H, W] flattened.
    pub labels: Vec<usize>,
    /// [N, 1, H, W].
    pub depth: Tensor,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub h: usize,
    pub w: usize,
    pub classes: usize,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn generate(seeds: &[u64], h: usize, w: usize, classes: usize) -> Result<Self> {
        let scenes = seeds
            .iter()
            .map(|&s| generate_scene(s, h, w, classes))
            .collect::<Result<_>>()?;
        Ok(Self { h, w, classes, scenes })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Scenes at `indices`, in the given order.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let (h, w) = (self.h, self.w);
        let n = indices.len();
        let mut images = Vec::with_capacity(n * 3 * h * w);
        let mut labels = Vec::with_capacity(n * h * w);
        let mut depth = Vec::with_capacity(n * h * w);
        for &i in indices {
            let s = &self.scenes[i];
            images.extend_from_slice(&s.image);
            labels.extend(s.seg.iter().map(|&c| c as usize));
            depth.extend_from_slice(&s.depth);
        }
        Batch {
            images: Tensor::new(vec![n, 3, h, w], images).expect("image batch"),
            labels,
            depth: Tensor::new(vec![n, 1, h, w], depth).expect("depth batch"),
        }
    }

    /// Consecutive batches of at most `size` scenes covering the dataset in
    /// order.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Batch> + '_ {
        let size = size.max(1);
        (0..self.len()).step_by(size).map(move |start| {
            let idx: Vec<usize> = (start..(start + size).min(self.len())).collect();
            self.batch(&idx)
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ExportIndex {
    h: usize,
    w: usize,
    classes: usize,
    seeds: Vec<u64>,
    image_shape: [usize; 3],
    depth_shape: [usize; 2],
    seg_shape: [usize; 2],
}

fn write_f64(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes one split: `<seed>.image.bin` and `<seed>.depth.bin` as
/// little-endian f64, `<seed>.seg.bin` as one byte per pixel, plus
/// `index.json`.
pub fn export_split(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in &data.scenes {
        write_f64(&dir.join(format!("{}.image.bin", s.seed)), &s.image)?;
        write_f64(&dir.join(format!("{}.depth.bin", s.seed)), &s.depth)?;
        let seg = dir.join(format!("{}.seg.bin", s.seed));
        fs::write(&seg, &s.seg).map_err(|e| Error::io(&seg, e))?;
    }
    let index = ExportIndex {
        h: data.h,
        w: data.w,
        classes: data.classes,
        seeds: data.scenes.iter().map(|s| s.seed).collect(),
        image_shape: [3, data.h, data.w],
        depth_shape: [data.h, data.w],
        seg_shape: [data.h, data.w],
    };
    let path = dir.join("index.json");
    fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))
}
