//! Knowledge trajectories: attention maps, their top-k essential points, a
//! bounded per-model history of those points, and the L1 trajectory loss.
//!
//! Both streams are compared on soft-argmax coordinates. The newest student
//! frame keeps its coordinates on the graph; every stored frame holds plain
//! numbers, so older frames contribute a constant to the loss.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Sum-normalized spatial attention map, row-major `[h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl AttentionMap {
    /// Per-pixel `Σ_c f_c²` of an [N, C, H, W] feature, averaged over the
    /// batch and normalized to sum 1 (uniform when the feature is all zero).
    pub fn from_feature(feature: &Tensor) -> Result<Self> {
        let (n, c, h, w) = feature.dims4("attention map")?;
        let hw = h * w;
        // Same association as the graph version: channels, then samples.
        let mut acc = vec![0.0; hw];
        for sample in feature.data().chunks_exact(c * hw) {
            let mut per = vec![0.0; hw];
            for plane in sample.chunks_exact(hw) {
                for (a, v) in per.iter_mut().zip(plane) {
                    *a += v * v;
                }
            }
            for (a, p) in acc.iter_mut().zip(&per) {
                *a += p;
            }
        }
        acc.iter_mut().for_each(|a| *a *= 1.0 / n as f64);
        Ok(Self::normalized(h, w, acc))
    }

    /// Normalizes raw non-negative values to sum 1.
    pub fn normalized(h: usize, w: usize, mut values: Vec<f64>) -> Self {
        let s: f64 = values.iter().sum();
        if s == 0.0 {
            let u = 1.0 / values.len() as f64;
            values.fill(u);
        } else {
            values.iter_mut().for_each(|v| *v /= s);
        }
        Self { h, w, values }
    }

    pub fn norm_coord(&self, index: usize) -> (f64, f64) {
        norm_coord(self.h, self.w, index)
    }
}

fn norm_coord(h: usize, w: usize, index: usize) -> (f64, f64) {
    let axis = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    (axis(index / w, h), axis(index % w, w))
}

/// Differentiable attention map of an [N, C, H, W] feature, as a flat
/// `[H * W]` value.
pub fn attention_map(g: &mut Graph, feature: Var) -> Result<Var> {
    let (n, _, h, w) = g.value(feature).dims4("attention map")?;
    let sq = g.mul(feature, feature)?;
    let per_sample = g.sum_axis(sq, 1)?;
    let pooled = g.sum_axis(per_sample, 0)?;
    let pooled = g.scale(pooled, 1.0 / n as f64);
    let flat = g.reshape(pooled, &[h * w])?;
    Ok(g.normalize_sum(flat))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EssentialPoint {
    /// 1-based rank within the frame.
    pub rank: usize,
    pub row: usize,
    pub col: usize,
    pub norm_y: f64,
    pub norm_x: f64,
    pub value: f64,
}

/// Pixel order by value, highest first, ties in row-major order.
fn ranked_indices(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// The `k` highest-valued pixels of `map`, ranked from 1.
pub fn extract_essential_points(map: &AttentionMap, k: usize) -> Result<Vec<EssentialPoint>> {
    if k > map.values.len() {
        return Err(Error::invalid(format!(
            "cannot take {k} essential points from a {}x{} map",
            map.h, map.w
        )));
    }
    Ok(ranked_indices(&map.values)
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(j, i)| {
            let (norm_y, norm_x) = map.norm_coord(i);
            EssentialPoint {
                rank: j + 1,
                row: i / map.w,
                col: i % map.w,
                norm_y,
                norm_x,
                value: map.values[i],
            }
        })
        .collect())
}

/// Soft-argmax surrogate of the top-k points of one map.
pub struct SoftPoints {
    /// One `[2]` value `(y, x)` per rank, on the graph.
    pub coords: Vec<Var>,
    /// Hard argmax picked at each round, as flat pixel indices.
    pub hard: Vec<usize>,
}

/// Sequential soft-argmax over a flat `[h * w]` map: the map is rescaled by
/// its maximum, sharpened by `gamma`, and after each round the hard argmax
/// is masked out. Gradients reach the map through the coordinates only.
pub fn soft_points(g: &mut Graph, map: Var, h: usize, w: usize, k: usize, gamma: f64) -> Result<SoftPoints> {
    let n = h * w;
    g.value(map).expect_shape("soft points", &[n])?;
    if k > n {
        return Err(Error::invalid(format!(
            "cannot take {k} soft points from a {h}x{w} map"
        )));
    }
    if !(gamma > 0.0) {
        return Err(Error::invalid(format!(
            "soft-argmax gamma must be positive, got {gamma}"
        )));
    }
    let mut grid = vec![0.0; 2 * n];
    for i in 0..n {
        let (y, x) = norm_coord(h, w, i);
        grid[i] = y;
        grid[n + i] = x;
    }
    let grid = Tensor::new(vec![2, n], grid)?;
    let rescaled = g.div_by_max(map)?;
    let logits = g.scale(rescaled, gamma);
    let order = ranked_indices(g.value(map).data());
    let mut mask = vec![false; n];
    let mut coords = Vec::with_capacity(k);
    let mut hard = Vec::with_capacity(k);
    for &pick in order.iter().take(k) {
        let p = g.masked_softmax(logits, &mask)?;
        coords.push(g.matvec_const(p, grid.clone())?);
        hard.push(pick);
        mask[pick] = true;
    }
    Ok(SoftPoints { coords, hard })
}

/// One time step of a trajectory stream: hard points plus the soft
/// coordinates the loss compares.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub points: Vec<EssentialPoint>,
    pub soft: Vec<(f64, f64)>,
}

impl Frame {
    /// Builds a frame from a map and the soft coordinates computed on it.
    pub fn from_soft(g: &Graph, map: &AttentionMap, soft: &SoftPoints) -> Result<Self> {
        let points = extract_essential_points(map, soft.coords.len())?;
        let coords = soft
            .coords
            .iter()
            .map(|&c| {
                let d = g.value(c).data();
                (d[0], d[1])
            })
            .collect();
        Ok(Self { points, soft: coords })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBuffer {
    window: usize,
    k: usize,
    frames: VecDeque<Frame>,
}

impl TrajectoryBuffer {
    pub fn new(window: usize, k: usize) -> Result<Self> {
        if window == 0 || k == 0 {
            return Err(Error::invalid(format!(
                "trajectory window {window} and k {k} must be positive"
            )));
        }
        Ok(Self {
            window,
            k,
            frames: VecDeque::with_capacity(window + 1),
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frames oldest to newest.
    pub fn frames(&self) -> impl Iterator<Item = &Frame> {
        self.frames.iter()
    }

    pub fn newest(&self) -> Option<&Frame> {
        self.frames.back()
    }

    /// Appends a frame, evicting the oldest once the window is exceeded.
    pub fn push_frame(&mut self, frame: Frame) -> Result<()> {
        if frame.points.len() != self.k || frame.soft.len() != self.k {
            return Err(Error::invalid(format!(
                "frame has {} points and {} coordinates, buffer expects {}",
                frame.points.len(),
                frame.soft.len(),
                self.k
            )));
        }
        self.frames.push_back(frame);
        while self.frames.len() > self.window {
            self.frames.pop_front();
        }
        Ok(())
    }

    /// Flat `[frames, k, 7]` record of (row, col, norm_y, norm_x, value,
    /// soft_y, soft_x); rank is implied by position.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.len() * self.k * 7);
        for f in &self.frames {
            for (p, s) in f.points.iter().zip(&f.soft) {
                data.extend_from_slice(&[p.row as f64, p.col as f64, p.norm_y, p.norm_x, p.value, s.0, s.1]);
            }
        }
        Tensor::new(vec![self.len(), self.k, 7], data).expect("buffer record shape")
    }

    pub fn from_tensor(window: usize, t: &Tensor) -> Result<Self> {
        let (frames, k) = match t.shape() {
            [f, k, 7] => (*f, *k),
            s => return Err(Error::invalid(format!("bad trajectory record shape {s:?}"))),
        };
        let mut buf = Self::new(window, k)?;
        for f in t.data().chunks_exact(k * 7).take(frames) {
            let mut points = Vec::with_capacity(k);
            let mut soft = Vec::with_capacity(k);
            for (j, r) in f.chunks_exact(7).enumerate() {
                points.push(EssentialPoint {
                    rank: j + 1,
                    row: r[0] as usize,
                    col: r[1] as usize,
                    norm_y: r[2],
                    norm_x: r[3],
                    value: r[4],
                });
                soft.push((r[5], r[6]));
            }
            buf.push_frame(Frame { points, soft })?;
        }
        Ok(buf)
    }
}

/// Mean over frames and ranks of `|Δy| + |Δx|` between rank-matched
/// coordinates. When `current` is given it replaces the newest student
/// frame's stored coordinates with live graph values, so only that frame
/// carries gradient.
pub fn trajectory_loss(
    g: &mut Graph,
    teacher: &TrajectoryBuffer,
    student: &TrajectoryBuffer,
    current: Option<&[Var]>,
) -> Result<Var> {
    if teacher.len() != student.len() || teacher.k != student.k {
        return Err(Error::invalid(format!(
            "trajectory mismatch: {} frames of {} vs {} frames of {}",
            teacher.len(),
            teacher.k,
            student.len(),
            student.k
        )));
    }
    if teacher.is_empty() {
        return Err(Error::invalid("trajectory loss over empty buffers"));
    }
    let frames = teacher.len();
    let live = current.is_some();
    let history = if live { frames - 1 } else { frames };
    let mut constant = 0.0;
    for (ft, fs) in teacher.frames.iter().zip(&student.frames).take(history) {
        for (a, b) in ft.soft.iter().zip(&fs.soft) {
            constant += (a.0 - b.0).abs() + (a.1 - b.1).abs();
        }
    }
    let denom = (frames * teacher.k) as f64;
    let Some(current) = current else {
        return Ok(g.constant(Tensor::scalar(constant / denom)));
    };
    if current.len() != teacher.k {
        return Err(Error::invalid(format!(
            "{} live coordinates for k = {}",
            current.len(),
            teacher.k
        )));
    }
    let newest = teacher.newest().expect("non-empty");
    let target: Vec<f64> = newest.soft.iter().flat_map(|&(y, x)| [y, x]).collect();
    let live = g.concat(current, 0)?;
    let target = g.constant(Tensor::from_vec(target));
    let d = g.sub(live, target)?;
    let d = g.abs(d);
    let s = g.sum(d);
    let s = g.add_scalar(s, constant);
    Ok(g.scale(s, 1.0 / denom))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(coords: &[(f64, f64)]) -> Frame {
        Frame {
            points: coords
                .iter()
                .enumerate()
                .map(|(j, &(y, x))| EssentialPoint {
                    rank: j + 1,
                    row: 0,
                    col: 0,
                    norm_y: y,
                    norm_x: x,
                    value: 0.0,
                })
                .collect(),
            soft: coords.to_vec(),
        }
    }

    #[test]
    fn channel_energy() {
        let f = Tensor::new(vec![1, 2, 1, 2], vec![3.0, 0.0, 4.0, 0.0]).unwrap();
        let m = AttentionMap::from_feature(&f).unwrap();
        assert_eq!(m.values, vec![1.0, 0.0]);
        let mut g = Graph::new();
        let x = g.constant(f);
        let v = attention_map(&mut g, x).unwrap();
        assert_eq!(g.value(v).data(), &[1.0, 0.0]);
    }

    #[test]
    fn top_two() {
        let m = AttentionMap {
            h: 2,
            w: 2,
            values: vec![0.1, 0.5, 0.3, 0.1],
        };
        let p = extract_essential_points(&m, 2).unwrap();
        assert_eq!((p[0].row, p[0].col, p[0].value), (0, 1, 0.5));
        assert_eq!((p[1].row, p[1].col, p[1].value), (1, 0, 0.3));
        let u = AttentionMap::normalized(2, 2, vec![1.0; 4]);
        let p = extract_essential_points(&u, 1).unwrap();
        assert_eq!((p[0].row, p[0].col), (0, 0));
        assert!(extract_essential_points(&u, 5).is_err());
    }

    #[test]
    fn soft_points_on_one_hot_and_twin_peaks() {
        let mut g = Graph::new();
        let mut v = vec![0.0; 12];
        v[7] = 1.0;
        let m = g.param(Tensor::from_vec(v));
        let sp = soft_points(&mut g, m, 3, 4, 1, 50.0).unwrap();
        let c = g.value(sp.coords[0]).data();
        assert!((c[0] - 0.5).abs() < 1e-15 && (c[1] - 1.0).abs() < 1e-15);
        assert_eq!(sp.hard, vec![7]);

        let mut g = Graph::new();
        let m = g.param(Tensor::from_vec(vec![0.4, 0.1, 0.1, 0.4]));
        let sp = soft_points(&mut g, m, 1, 4, 1, 0.5).unwrap();
        let c = g.value(sp.coords[0]).data();
        assert!((c[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ring_eviction() {
        let mut b = TrajectoryBuffer::new(3, 1).unwrap();
        for i in 0..5 {
            b.push_frame(frame(&[(i as f64, 0.0)])).unwrap();
            assert!(b.len() <= 3);
        }
        let ys: Vec<f64> = b.frames().map(|f| f.soft[0].0).collect();
        assert_eq!(ys, vec![2.0, 3.0, 4.0]);
        assert!(b.push_frame(frame(&[(0.0, 0.0), (1.0, 1.0)])).is_err());
        let back = TrajectoryBuffer::from_tensor(3, &b.to_tensor()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn corner_to_corner_is_two() {
        let mut t = TrajectoryBuffer::new(10, 1).unwrap();
        let mut s = TrajectoryBuffer::new(10, 1).unwrap();
        t.push_frame(frame(&[(0.0, 0.0)])).unwrap();
        s.push_frame(frame(&[(1.0, 1.0)])).unwrap();
        let mut g = Graph::new();
        let l = trajectory_loss(&mut g, &t, &s, None).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 2.0);
        let c = g.param(Tensor::from_vec(vec![1.0, 1.0]));
        let l = trajectory_loss(&mut g, &t, &s, Some(&[c])).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 2.0);
        let l = trajectory_loss(&mut g, &t, &t, None).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
    }
}
