use super::conv::{crop_add, gemm, im2col, widen, Padded, TAP_MIN_CHANNELS};
use super::{axis_extents, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one training-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    /// Number of values per channel (N * H * W).
    pub count: usize,
}

enum Op {
    Leaf,
    // Patch columns are recomputed in the reverse pass rather than stored.
    Conv {
        x: Var,
        w: Var,
        b: Var,
        k: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Abs(Var),
    Powf(Var, f64),
    Scale(Var, f64),
    AddScalar(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
        mean: bool,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Nll {
        logp: Var,
        labels: Vec<usize>,
    },
    NormalizeSum {
        x: Var,
        degenerate: bool,
    },
    DivByMax {
        x: Var,
        argmax: usize,
    },
    MaskedSoftmax {
        x: Var,
        mask: Vec<bool>,
    },
    MatVecConst {
        x: Var,
        weights: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Execution-ordered record of operations. Node `i` only ever refers to
/// nodes `< i`, so the record is its own topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`]: one optional gradient buffer per node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, `None` if `v` did not
    /// participate in the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `v`; all zeros for values the loss
    /// does not depend on.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        let shape = graph.value(v).shape();
        match self.get(v) {
            Some(g) => Tensor::new(shape.to_vec(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    b.expect_shape(op, a.shape())
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies `v` into a new constant leaf; no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Sign pattern of every ReLU input recorded so far (true = active).
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    // ------------------------------------------------------------------
    // Convolution and normalization
    // ------------------------------------------------------------------

    /// Stride-1 cross-correlation with zero padding `k / 2`, for square
    /// kernels of size 1 or 3.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4("conv2d")?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 {
            return Err(Error::RankMismatch {
                op: "conv2d",
                expected: 4,
                found: ws.len(),
            });
        }
        let (cout, k) = (ws[0], ws[2]);
        if ws[1] != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                axis: 1,
                expected: cin,
                found: ws[1],
            });
        }
        if k != ws[3] || !(k == 1 || k == 3) {
            return Err(Error::invalid(format!(
                "conv2d: unsupported kernel {}x{}",
                ws[2], ws[3]
            )));
        }
        self.value(b).expect_shape("conv2d bias", &[cout])?;

        let hw = h * wd;
        let ck = cin * k * k;
        let mut out = vec![0.0; n * cout * hw];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for s in 0..n {
                let ys = &mut out[s * cout * hw..(s + 1) * cout * hw];
                for (co, row) in ys.chunks_exact_mut(hw).enumerate() {
                    row.fill(bv[co]);
                }
            }
            if k > 1 && cin >= TAP_MIN_CHANNELS {
                let mut xp = Padded::new(cin, h, wd, k);
                let mut grid = vec![0.0; cout * xp.grid()];
                for s in 0..n {
                    xp.fill(&xv[s * cin * hw..(s + 1) * cin * hw]);
                    xp.correlate(k, wv, |t| t, k * k, ck, cout, &mut grid);
                    crop_add(&grid, cout, h, wd, k, &mut out[s * cout * hw..(s + 1) * cout * hw]);
                }
            } else {
                let mut scratch = if k > 1 { vec![0.0; ck * hw] } else { Vec::new() };
                for s in 0..n {
                    let xs = &xv[s * cin * hw..(s + 1) * cin * hw];
                    let cols: &[f64] = if k == 1 {
                        xs
                    } else {
                        im2col(xs, cin, h, wd, k, &mut scratch);
                        &scratch
                    };
                    gemm(
                        cout,
                        ck,
                        hw,
                        wv,
                        false,
                        cols,
                        false,
                        1.0,
                        &mut out[s * cout * hw..(s + 1) * cout * hw],
                    );
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::new(vec![n, cout, h, wd], out)?;
        Ok(self.push(value, Op::Conv { x, w, b, k }, rg))
    }

    /// Training-mode batch normalization over (N, H, W) per channel.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c, h, w) = self.value(x).dims4("batch_norm")?;
        self.value(gamma).expect_shape("batch_norm gamma", &[c])?;
        self.value(beta).expect_shape("batch_norm beta", &[c])?;
        let hw = h * w;
        let count = n * hw;
        if count < 2 {
            return Err(Error::invalid(format!(
                "batch_norm: training mode needs N*H*W >= 2, got {count}"
            )));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for s_i in 0..n {
                s += xv[(s_i * c + ch) * hw..(s_i * c + ch + 1) * hw].iter().sum::<f64>();
            }
            let m = s / count as f64;
            let mut sq = 0.0;
            for s_i in 0..n {
                for &v in &xv[(s_i * c + ch) * hw..(s_i * c + ch + 1) * hw] {
                    sq += (v - m) * (v - m);
                }
            }
            mean[ch] = m;
            var[ch] = sq / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for s_i in 0..n {
            for ch in 0..c {
                let base = (s_i * c + ch) * hw;
                for p in base..base + hw {
                    let xh = (xv[p] - mean[ch]) * inv_std[ch];
                    xhat[p] = xh;
                    out[p] = g[ch] * xh + bt[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
            rg,
        );
        Ok((v, BatchStats { mean, var, count }))
    }

    /// Evaluation-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("batch_norm")?;
        self.value(gamma).expect_shape("batch_norm gamma", &[c])?;
        self.value(beta).expect_shape("batch_norm beta", &[c])?;
        if mean.len() != c || var.len() != c {
            return Err(Error::ShapeMismatch {
                op: "batch_norm running stats",
                axis: 0,
                expected: c,
                found: mean.len().min(var.len()),
            });
        }
        let hw = h * w;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for s_i in 0..n {
            for ch in 0..c {
                let base = (s_i * c + ch) * hw;
                for p in base..base + hw {
                    let xh = (xv[p] - mean[ch]) * inv_std[ch];
                    xhat[p] = xh;
                    out[p] = g[ch] * xh + bt[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
            rg,
        ))
    }

    // ------------------------------------------------------------------
    // Elementwise
    // ------------------------------------------------------------------

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("unary shape");
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    /// Rectifier; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, Op::Powf(x, p), |v| v.powf(p))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<(Vec<f64>, bool)> {
        same_shape(op_name, self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok((Vec::with_capacity(self.value(a).numel()), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mut data, rg) = self.binary("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        data.extend(av.data().iter().zip(bv.data()).map(|(x, y)| x + y));
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mut data, rg) = self.binary("sub", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        data.extend(av.data().iter().zip(bv.data()).map(|(x, y)| x - y));
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mut data, rg) = self.binary("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        data.extend(av.data().iter().zip(bv.data()).map(|(x, y)| x * y));
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Sum of a list of equally shaped values, left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::invalid("add_all of zero terms"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    // ------------------------------------------------------------------
    // Reductions and shape ops
    // ------------------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::InvalidAxis {
                op: "sum_axis",
                axis,
                rank: t.rank(),
            });
        }
        let (outer, dim, inner) = axis_extents(t.shape(), axis);
        if dim == 0 {
            return Err(Error::EmptyAxis { op: "sum_axis", axis });
        }
        let xv = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for d in 0..dim {
                let src = &xv[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (a, b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
            if mean {
                for a in dst.iter_mut() {
                    *a /= dim as f64;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(x);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SumAxis { x, axis, mean }, rg))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidAxis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != base.len() {
                return Err(Error::RankMismatch {
                    op: "concat",
                    expected: base.len(),
                    found: s.len(),
                });
            }
            for (ax, (&e, &f)) in base.iter().zip(s).enumerate() {
                if ax != axis && e != f {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        axis: ax,
                        expected: e,
                        found: f,
                    });
                }
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let d = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    // ------------------------------------------------------------------
    // Softmax family
    // ------------------------------------------------------------------

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let op_name = if log { "log_softmax" } else { "softmax" };
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::InvalidAxis {
                op: op_name,
                axis,
                rank: t.rank(),
            });
        }
        let (outer, dim, inner) = axis_extents(t.shape(), axis);
        if dim == 0 {
            return Err(Error::EmptyAxis { op: op_name, axis });
        }
        let xv = t.data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |d: usize| (o * dim + d) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for d in 0..dim {
                    m = m.max(xv[idx(d)]);
                }
                let mut z = 0.0;
                for d in 0..dim {
                    z += (xv[idx(d)] - m).exp();
                }
                if log {
                    let lse = m + z.ln();
                    for d in 0..dim {
                        out[idx(d)] = xv[idx(d)] - lse;
                    }
                } else {
                    for d in 0..dim {
                        out[idx(d)] = (xv[idx(d)] - m).exp() / z;
                    }
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let op = if log {
            Op::LogSoftmax { x, axis }
        } else {
            Op::Softmax { x, axis }
        };
        Ok(self.push(value, op, rg))
    }

    /// Max-shifted log-softmax along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    /// Mean negative log-likelihood of `labels` under class log-probabilities
    /// `logp` of shape [N, C, H, W]; `labels` is [N, H, W] flattened.
    pub fn nll(&mut self, logp: Var, labels: &[usize]) -> Result<Var> {
        let (n, c, h, w) = self.value(logp).dims4("nll")?;
        let hw = h * w;
        if labels.len() != n * hw {
            return Err(Error::ShapeMismatch {
                op: "nll labels",
                axis: 0,
                expected: n * hw,
                found: labels.len(),
            });
        }
        let lv = self.value(logp).data();
        let mut total = 0.0;
        for (p, &l) in labels.iter().enumerate() {
            if l >= c {
                let (s, pix) = (p / hw, p % hw);
                return Err(Error::LabelOutOfRange {
                    n: s,
                    row: pix / w,
                    col: pix % w,
                    label: l,
                    classes: c,
                });
            }
            let (s, pix) = (p / hw, p % hw);
            total += lv[(s * c + l) * hw + pix];
        }
        let loss = -total / labels.len() as f64;
        let rg = self.rg(logp);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Nll {
                logp,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    // ------------------------------------------------------------------
    // Attention-map helpers
    // ------------------------------------------------------------------

    /// `x / sum(x)`; an all-zero input maps to the uniform distribution.
    pub fn normalize_sum(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().sum();
        let n = t.numel();
        let degenerate = s == 0.0;
        let data = if degenerate {
            vec![1.0 / n as f64; n]
        } else {
            t.data().iter().map(|v| v / s).collect()
        };
        let value = Tensor::new(t.shape().to_vec(), data).expect("normalize shape");
        let rg = self.rg(x) && !degenerate;
        self.push(value, Op::NormalizeSum { x, degenerate }, rg)
    }

    /// `x / max(x)`; the maximum is the first occurrence in index order and
    /// must be positive.
    pub fn div_by_max(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (argmax, m) =
            t.data().iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                },
            );
        if m <= 0.0 || !m.is_finite() {
            return Err(Error::invalid(format!("div_by_max: maximum {m} not positive")));
        }
        let data = t.data().iter().map(|v| v / m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::DivByMax { x, argmax }, rg))
    }

    /// Softmax over the unmasked entries of a 1-D value; masked entries get
    /// probability exactly 0.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 1 {
            return Err(Error::RankMismatch {
                op: "masked_softmax",
                expected: 1,
                found: t.rank(),
            });
        }
        if mask.len() != t.numel() {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax mask",
                axis: 0,
                expected: t.numel(),
                found: mask.len(),
            });
        }
        let xv = t.data();
        let m = xv
            .iter()
            .zip(mask)
            .filter(|(_, &masked)| !masked)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return Err(Error::EmptyAxis {
                op: "masked_softmax",
                axis: 0,
            });
        }
        let mut out: Vec<f64> = xv
            .iter()
            .zip(mask)
            .map(|(&v, &masked)| if masked { 0.0 } else { (v - m).exp() })
            .collect();
        let z: f64 = out.iter().sum();
        for v in &mut out {
            *v /= z;
        }
        let value = Tensor::new(vec![xv.len()], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaskedSoftmax { x, mask: mask.to_vec() }, rg))
    }

    /// `weights · x` for a constant [rows, n] matrix and a 1-D `x` of length n.
    pub fn matvec_const(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let t = self.value(x);
        let n = t.numel();
        if weights.rank() != 2 || weights.shape()[1] != n {
            return Err(Error::ShapeMismatch {
                op: "matvec_const",
                axis: 1,
                expected: n,
                found: weights.shape().get(1).copied().unwrap_or(0),
            });
        }
        let rows = weights.shape()[0];
        let xv = t.data();
        let out = (0..rows)
            .map(|r| {
                weights.data()[r * n..(r + 1) * n]
                    .iter()
                    .zip(xv)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let rg = self.rg(x);
        let value = Tensor::new(vec![rows], out)?;
        Ok(self.push(value, Op::MatVecConst { x, weights }, rg))
    }

    // ------------------------------------------------------------------
    // Reverse pass
    // ------------------------------------------------------------------

    /// Reverse-mode gradients of the scalar `loss` with respect to every
    /// recorded value that requires a gradient. Repeated uses of a value
    /// accumulate additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        if !lt.data()[0].is_finite() {
            return Err(Error::NonFinite { what: "loss".into() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let numel = |v: Var| self.nodes[v.0].value.numel();
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                accumulate(&mut grads[v.0], numel(v))
            }};
        }

        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, k } => {
                let (n, cin, h, wd) = self.nodes[x.0].value.dims4("conv2d").unwrap();
                let cout = self.nodes[w.0].value.shape()[0];
                let (k, hw) = (*k, h * wd);
                let ck = cin * k * k;
                if self.rg(*b) {
                    let gb = slot!(*b);
                    for s in 0..n {
                        for (co, g) in gb.iter_mut().enumerate() {
                            let row = &dy[(s * cout + co) * hw..(s * cout + co + 1) * hw];
                            *g += row.iter().sum::<f64>();
                        }
                    }
                }
                if self.rg(*w) {
                    let xv = val(*x);
                    let mut gw = grads[w.0].take().unwrap_or_else(|| vec![0.0; cout * ck]);
                    if k > 1 && cin >= TAP_MIN_CHANNELS {
                        let mut xp = Padded::new(cin, h, wd, k);
                        let mut dyw = vec![0.0; cout * xp.grid()];
                        for s in 0..n {
                            xp.fill(&xv[s * cin * hw..(s + 1) * cin * hw]);
                            widen(&dy[s * cout * hw..(s + 1) * cout * hw], cout, h, wd, k, &mut dyw);
                            xp.weight_grad(k, &dyw, cout, &mut gw);
                        }
                    } else {
                        let mut cols = if k > 1 { vec![0.0; ck * hw] } else { Vec::new() };
                        for s in 0..n {
                            let dys = &dy[s * cout * hw..(s + 1) * cout * hw];
                            let xs = &xv[s * cin * hw..(s + 1) * cin * hw];
                            let c: &[f64] = if k == 1 {
                                xs
                            } else {
                                im2col(xs, cin, h, wd, k, &mut cols);
                                &cols
                            };
                            gemm(cout, hw, ck, dys, false, c, true, 1.0, &mut gw);
                        }
                    }
                    grads[w.0] = Some(gw);
                }
                if self.rg(*x) {
                    let wv = val(*w);
                    let mut gx = grads[x.0].take().unwrap_or_else(|| vec![0.0; n * cin * hw]);
                    let kk = k * k;
                    if k == 1 {
                        for s in 0..n {
                            let dys = &dy[s * cout * hw..(s + 1) * cout * hw];
                            let gxs = &mut gx[s * cin * hw..(s + 1) * cin * hw];
                            gemm(cin, cout, hw, wv, true, dys, false, 1.0, gxs);
                        }
                    } else if cout >= TAP_MIN_CHANNELS {
                        // The adjoint of a same-padded correlation is the
                        // same-padded correlation with the flipped,
                        // channel-transposed kernel, read here by stride.
                        let mut dyp = Padded::new(cout, h, wd, k);
                        let mut grid = vec![0.0; cin * dyp.grid()];
                        for s in 0..n {
                            dyp.fill(&dy[s * cout * hw..(s + 1) * cout * hw]);
                            dyp.correlate(k, wv, |t| kk - 1 - t, cin * kk, kk, cin, &mut grid);
                            crop_add(&grid, cin, h, wd, k, &mut gx[s * cin * hw..(s + 1) * cin * hw]);
                        }
                    } else {
                        let mut flipped = vec![0.0; cin * cout * kk];
                        for co in 0..cout {
                            for ci in 0..cin {
                                for t in 0..kk {
                                    flipped[(ci * cout + co) * kk + (kk - 1 - t)] = wv[(co * cin + ci) * kk + t];
                                }
                            }
                        }
                        let mut dcols = vec![0.0; cout * kk * hw];
                        for s in 0..n {
                            let dys = &dy[s * cout * hw..(s + 1) * cout * hw];
                            let gxs = &mut gx[s * cin * hw..(s + 1) * cin * hw];
                            im2col(dys, cout, h, wd, k, &mut dcols);
                            gemm(cin, cout * kk, hw, &flipped, false, &dcols, false, 1.0, gxs);
                        }
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4("batch_norm").unwrap();
                let hw = h * w;
                let count = (n * hw) as f64;
                let g = val(*gamma);
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for p in base..base + hw {
                            sum_dy[ch] += dy[p];
                            sum_dy_xhat[ch] += dy[p] * xhat[p];
                        }
                    }
                }
                if self.rg(*gamma) {
                    let gg = slot!(*gamma);
                    for ch in 0..c {
                        gg[ch] += sum_dy_xhat[ch];
                    }
                }
                if self.rg(*beta) {
                    let gb = slot!(*beta);
                    for ch in 0..c {
                        gb[ch] += sum_dy[ch];
                    }
                }
                if self.rg(*x) {
                    let gx = slot!(*x);
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            let scale = g[ch] * inv_std[ch];
                            if *train {
                                let (sd, sdx) = (sum_dy[ch], sum_dy_xhat[ch]);
                                for p in base..base + hw {
                                    gx[p] += scale / count * (count * dy[p] - sd - xhat[p] * sdx);
                                }
                            } else {
                                for p in base..base + hw {
                                    gx[p] += scale * dy[p];
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                let gx = slot!(*x);
                for ((g, &d), &v) in gx.iter_mut().zip(dy).zip(xv) {
                    if v > 0.0 {
                        *g += d;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                let gx = slot!(*x);
                for ((g, &d), &s) in gx.iter_mut().zip(dy).zip(yv) {
                    *g += d * s * (1.0 - s);
                }
            }
            Op::Exp(x) => {
                let yv = node.value.data();
                let gx = slot!(*x);
                for ((g, &d), &e) in gx.iter_mut().zip(dy).zip(yv) {
                    *g += d * e;
                }
            }
            Op::Abs(x) => {
                let xv = val(*x);
                let gx = slot!(*x);
                for ((g, &d), &v) in gx.iter_mut().zip(dy).zip(xv) {
                    if v > 0.0 {
                        *g += d;
                    } else if v < 0.0 {
                        *g -= d;
                    }
                }
            }
            Op::Powf(x, p) => {
                let xv = val(*x);
                let gx = slot!(*x);
                for ((g, &d), &v) in gx.iter_mut().zip(dy).zip(xv) {
                    *g += d * p * v.powf(p - 1.0);
                }
            }
            Op::Scale(x, c) => {
                let gx = slot!(*x);
                for (g, &d) in gx.iter_mut().zip(dy) {
                    *g += d * c;
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let gx = slot!(*x);
                for (g, &d) in gx.iter_mut().zip(dy) {
                    *g += d;
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.rg(*a) {
                    let ga = slot!(*a);
                    for (g, &d) in ga.iter_mut().zip(dy) {
                        *g += d;
                    }
                }
                if self.rg(*b) {
                    let gb = slot!(*b);
                    for (g, &d) in gb.iter_mut().zip(dy) {
                        *g += sign * d;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = val(*b);
                    let ga = slot!(*a);
                    for ((g, &d), &o) in ga.iter_mut().zip(dy).zip(bv) {
                        *g += d * o;
                    }
                }
                if self.rg(*b) {
                    let av = val(*a);
                    let gb = slot!(*b);
                    for ((g, &d), &o) in gb.iter_mut().zip(dy).zip(av) {
                        *g += d * o;
                    }
                }
            }
            Op::Sum(x) => {
                let gx = slot!(*x);
                for g in gx.iter_mut() {
                    *g += dy[0];
                }
            }
            Op::Mean(x) => {
                let n = numel(*x) as f64;
                let gx = slot!(*x);
                for g in gx.iter_mut() {
                    *g += dy[0] / n;
                }
            }
            Op::SumAxis { x, axis, mean } => {
                let (outer, dim, inner) = axis_extents(self.nodes[x.0].value.shape(), *axis);
                let f = if *mean { 1.0 / dim as f64 } else { 1.0 };
                let gx = slot!(*x);
                for o in 0..outer {
                    let src = &dy[o * inner..(o + 1) * inner];
                    for d in 0..dim {
                        let dst = &mut gx[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                        for (g, &s) in dst.iter_mut().zip(src) {
                            *g += s * f;
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } | Op::Softmax { x, axis } => {
                let log = matches!(node.op, Op::LogSoftmax { .. });
                let (outer, dim, inner) = axis_extents(node.value.shape(), *axis);
                let yv = node.value.data();
                let gx = slot!(*x);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |d: usize| (o * dim + d) * inner + i;
                        if log {
                            let s: f64 = (0..dim).map(|d| dy[idx(d)]).sum();
                            for d in 0..dim {
                                gx[idx(d)] += dy[idx(d)] - yv[idx(d)].exp() * s;
                            }
                        } else {
                            let s: f64 = (0..dim).map(|d| dy[idx(d)] * yv[idx(d)]).sum();
                            for d in 0..dim {
                                gx[idx(d)] += yv[idx(d)] * (dy[idx(d)] - s);
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_extents(shape, *axis);
                for o in 0..outer {
                    let mut offset = 0;
                    for &v in inputs {
                        let d = self.nodes[v.0].value.shape()[*axis];
                        if self.rg(v) {
                            let gv = slot!(v);
                            let src = &dy[(o * total + offset) * inner..(o * total + offset + d) * inner];
                            let dst = &mut gv[o * d * inner..(o + 1) * d * inner];
                            for (g, &s) in dst.iter_mut().zip(src) {
                                *g += s;
                            }
                        }
                        offset += d;
                    }
                }
            }
            Op::Nll { logp, labels } => {
                let (_, c, h, w) = self.nodes[logp.0].value.dims4("nll").unwrap();
                let hw = h * w;
                let f = -dy[0] / labels.len() as f64;
                let gl = slot!(*logp);
                for (p, &l) in labels.iter().enumerate() {
                    let (s, pix) = (p / hw, p % hw);
                    gl[(s * c + l) * hw + pix] += f;
                }
            }
            Op::NormalizeSum { x, degenerate } => {
                if *degenerate {
                    return;
                }
                let s: f64 = val(*x).iter().sum();
                let yv = node.value.data();
                let dot: f64 = dy.iter().zip(yv).map(|(a, b)| a * b).sum();
                let gx = slot!(*x);
                for (g, &d) in gx.iter_mut().zip(dy) {
                    *g += (d - dot) / s;
                }
            }
            Op::DivByMax { x, argmax } => {
                let xv = val(*x);
                let m = xv[*argmax];
                let mut cross = 0.0;
                for (i, (&d, &v)) in dy.iter().zip(xv).enumerate() {
                    if i != *argmax {
                        cross += d * v;
                    }
                }
                let gx = slot!(*x);
                for (i, (g, &d)) in gx.iter_mut().zip(dy).enumerate() {
                    if i != *argmax {
                        *g += d / m;
                    }
                }
                gx[*argmax] -= cross / (m * m);
            }
            Op::MaskedSoftmax { x, mask } => {
                let pv = node.value.data();
                let dot: f64 = dy.iter().zip(pv).map(|(a, b)| a * b).sum();
                let gx = slot!(*x);
                for i in 0..pv.len() {
                    if !mask[i] {
                        gx[i] += pv[i] * (dy[i] - dot);
                    }
                }
            }
            Op::MatVecConst { x, weights } => {
                let n = numel(*x);
                let wv = weights.data();
                let gx = slot!(*x);
                for (r, &d) in dy.iter().enumerate() {
                    for (g, &wr) in gx.iter_mut().zip(&wv[r * n..(r + 1) * n]) {
                        *g += d * wr;
                    }
                }
            }
        }
    }
}
