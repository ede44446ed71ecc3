// Convolution kernels. Wide layers run one GEMM per kernel tap over
// zero-padded planes; narrow inputs fall back to im2col lowering.

/// Row-major GEMM: `c = alpha * op(a) * op(b) + beta * c` with
/// `op(a)` of shape m x k and `op(b)` of shape k x n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: the slices cover exactly the extents described by the
    // dimensions and strides above, checked by the debug assertions.
    unsafe {
        if m < n && k < n && k >= 64 {
            // Weight-by-patches products run faster with the pixel axis as
            // rows, so compute c^T = op(b)^T op(a)^T through c's strides.
            matrixmultiply::dgemm(
                n,
                k,
                m,
                1.0,
                b.as_ptr(),
                csb as isize,
                rsb as isize,
                a.as_ptr(),
                csa as isize,
                rsa as isize,
                beta,
                c.as_mut_ptr(),
                1,
                n as isize,
            );
        } else {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// Valid output-column range `[lo, hi)` for a horizontal tap offset `dx`.
fn valid_cols(w: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx).min(w as isize).max(0) as usize;
    (lo.min(hi), hi)
}

/// Lowers one `[c, h, w]` image into `[c * k * k, h * w]` patch columns
/// for a stride-1, `k / 2`-padded convolution.
pub(crate) fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (lo, hi) = valid_cols(w, dx);
                let row = (ci * k + ky) * k + kx;
                let out = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut out[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    let s0 = (lo as isize + dx) as usize;
                    dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                }
            }
        }
    }
}

/// Channel count from which the shifted-tap kernels beat im2col.
pub(crate) const TAP_MIN_CHANNELS: usize = 8;

/// Zero-padded copy of `[c, h, w]` planes, each `(h + 2p) x (w + 2p)`.
/// Trailing slack keeps the furthest tap of the last plane in bounds.
pub(crate) struct Padded {
    data: Vec<f64>,
    c: usize,
    h: usize,
    w: usize,
    p: usize,
}

impl Padded {
    pub(crate) fn new(c: usize, h: usize, w: usize, k: usize) -> Self {
        let p = k / 2;
        let plane = (h + 2 * p) * (w + 2 * p);
        Self {
            data: vec![0.0; c * plane + 2 * p],
            c,
            h,
            w,
            p,
        }
    }

    fn wp(&self) -> usize {
        self.w + 2 * self.p
    }

    fn plane(&self) -> usize {
        (self.h + 2 * self.p) * self.wp()
    }

    /// Rows of the padded-width output grid, `h * (w + 2p)`.
    pub(crate) fn grid(&self) -> usize {
        self.h * self.wp()
    }

    /// Overwrites the interior with `x`; the border stays zero.
    pub(crate) fn fill(&mut self, x: &[f64]) {
        let (h, w, p, wp, plane) = (self.h, self.w, self.p, self.wp(), self.plane());
        debug_assert_eq!(x.len(), self.c * h * w);
        for ci in 0..self.c {
            for y in 0..h {
                let dst = ci * plane + (y + p) * wp + p;
                self.data[dst..dst + w].copy_from_slice(&x[(ci * h + y) * w..(ci * h + y + 1) * w]);
            }
        }
    }

    fn tap(&self, k: usize, t: usize) -> usize {
        (t / k) * self.wp() + t % k
    }

    /// Same-padded k x k correlation onto the padded-width grid:
    /// `out[co, g] = sum_t sum_ci wt[off(t) + ci * rs + co * cs] * x[ci, g + tap(t)]`
    /// for `out` of shape `[cout, grid]`. Columns x >= w of each grid row
    /// are garbage and must be discarded by the caller.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn correlate(
        &self,
        k: usize,
        wt: &[f64],
        off: impl Fn(usize) -> usize,
        rs: usize,
        cs: usize,
        cout: usize,
        out: &mut [f64],
    ) {
        let (m, plane) = (self.grid(), self.plane());
        assert_eq!(out.len(), cout * m);
        for t in 0..k * k {
            let (a0, b0) = (self.tap(k, t), off(t));
            assert!(b0 + (self.c - 1) * rs + (cout - 1) * cs < wt.len());
            debug_assert!(a0 + m - 1 + (self.c - 1) * plane < self.data.len());
            // SAFETY: the asserts above bound every element the strides
            // reach in `wt` and `out`; the padded buffer carries slack for
            // the furthest tap (see `new`).
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    self.c,
                    cout,
                    1.0,
                    self.data.as_ptr().add(a0),
                    1,
                    plane as isize,
                    wt.as_ptr().add(b0),
                    rs as isize,
                    cs as isize,
                    if t == 0 { 0.0 } else { 1.0 },
                    out.as_mut_ptr(),
                    1,
                    m as isize,
                );
            }
        }
    }

    /// Kernel gradient of [`Padded::correlate`] with the forward layout
    /// `gw[co, ci, t]`: `gw[co, ci, t] += sum_g dy[co, g] * x[ci, g + tap(t)]`.
    /// `dy` is `[cout, grid]` with zeros in the garbage columns.
    pub(crate) fn weight_grad(&self, k: usize, dy: &[f64], cout: usize, gw: &mut [f64]) {
        let (m, plane, kk) = (self.grid(), self.plane(), k * k);
        assert_eq!(dy.len(), cout * m);
        assert_eq!(gw.len(), cout * self.c * kk);
        for t in 0..kk {
            let a0 = self.tap(k, t);
            debug_assert!(a0 + m - 1 + (self.c - 1) * plane < self.data.len());
            // SAFETY: `gw` holds cout x c x kk values, so tap offset t with
            // strides (c * kk, kk) stays in bounds; `dy` is cout x m.
            unsafe {
                matrixmultiply::dgemm(
                    cout,
                    m,
                    self.c,
                    1.0,
                    dy.as_ptr(),
                    m as isize,
                    1,
                    self.data.as_ptr().add(a0),
                    1,
                    plane as isize,
                    1.0,
                    gw.as_mut_ptr().add(t),
                    (self.c * kk) as isize,
                    kk as isize,
                );
            }
        }
    }
}

/// Adds the valid `[c, h, w]` part of a padded-width grid into `dst`.
pub(crate) fn crop_add(grid: &[f64], c: usize, h: usize, w: usize, k: usize, dst: &mut [f64]) {
    let wp = w + 2 * (k / 2);
    for ci in 0..c {
        for y in 0..h {
            let src = &grid[(ci * h + y) * wp..(ci * h + y) * wp + w];
            for (d, s) in dst[(ci * h + y) * w..(ci * h + y + 1) * w].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

/// Spreads `[c, h, w]` onto a padded-width grid with zero garbage columns.
pub(crate) fn widen(x: &[f64], c: usize, h: usize, w: usize, k: usize, grid: &mut [f64]) {
    let wp = w + 2 * (k / 2);
    grid.fill(0.0);
    for ci in 0..c {
        for y in 0..h {
            grid[(ci * h + y) * wp..(ci * h + y) * wp + w].copy_from_slice(&x[(ci * h + y) * w..(ci * h + y + 1) * w]);
        }
    }
}
