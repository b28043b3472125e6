//! Slice-level numeric kernels shared by the op records and the hand-written
//! network passes. Matrices are row-major. Accumulating kernels add into
//! their output.

use super::tensor::Real;

const LANES: usize = 16;

#[inline]
pub fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [R::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        let x: &[R; LANES] = x.try_into().expect("exact chunk");
        let y: &[R; LANES] = y.try_into().expect("exact chunk");
        for i in 0..LANES {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = R::zero();
    for (x, y) in ta.iter().zip(tb) {
        tail += *x * *y;
    }
    // Pairwise tree over the lanes.
    let mut width = LANES / 2;
    while width > 0 {
        for i in 0..width {
            acc[i] = acc[i] + acc[i + width];
        }
        width /= 2;
    }
    acc[0] + tail
}

/// `y += a * x`
#[inline]
pub fn axpy<R: Real>(a: R, x: &[R], y: &mut [R]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * *xi;
    }
}

/// `out = W x + b`, `W` is `rows x cols`. `bias` may be empty.
pub fn affine<R: Real>(w: &[R], bias: &[R], x: &[R], out: &mut [R]) {
    let cols = x.len();
    debug_assert_eq!(w.len(), out.len() * cols);
    for (r, o) in out.iter_mut().enumerate() {
        let b = if bias.is_empty() { R::zero() } else { bias[r] };
        *o = b + dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// `out += W x`
pub fn affine_accum<R: Real>(w: &[R], x: &[R], out: &mut [R]) {
    let cols = x.len();
    debug_assert_eq!(w.len(), out.len() * cols);
    for (r, o) in out.iter_mut().enumerate() {
        *o += dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// `out = W x + b` on the rows where `keep` is nonzero; the other rows are
/// set to 0 (their unit is dropped downstream anyway).
pub fn affine_kept<R: Real>(w: &[R], bias: &[R], x: &[R], keep: Option<&[R]>, out: &mut [R]) {
    let Some(keep) = keep else {
        return affine(w, bias, x, out);
    };
    let cols = x.len();
    debug_assert_eq!(w.len(), out.len() * cols);
    for (r, o) in out.iter_mut().enumerate() {
        *o = if keep[r] == R::zero() {
            R::zero()
        } else {
            bias[r] + dot(&w[r * cols..(r + 1) * cols], x)
        };
    }
}

/// `out += W x` on the rows where `keep` is nonzero.
pub fn affine_accum_kept<R: Real>(w: &[R], x: &[R], keep: Option<&[R]>, out: &mut [R]) {
    let Some(keep) = keep else {
        return affine_accum(w, x, out);
    };
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        if keep[r] != R::zero() {
            *o += dot(&w[r * cols..(r + 1) * cols], x);
        }
    }
}

/// `dx += W^T dy`
pub fn affine_t_accum<R: Real>(w: &[R], dy: &[R], dx: &mut [R]) {
    let cols = dx.len();
    debug_assert_eq!(w.len(), dy.len() * cols);
    for (r, &g) in dy.iter().enumerate() {
        if g != R::zero() {
            axpy(g, &w[r * cols..(r + 1) * cols], dx);
        }
    }
}

/// `dW += dy x^T`
pub fn outer_accum<R: Real>(dy: &[R], x: &[R], dw: &mut [R]) {
    let cols = x.len();
    debug_assert_eq!(dw.len(), dy.len() * cols);
    for (r, &g) in dy.iter().enumerate() {
        if g != R::zero() {
            axpy(g, x, &mut dw[r * cols..(r + 1) * cols]);
        }
    }
}

/// Geometry of a stride-1, square-kernel, zero-padded convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.in_h + 2 * self.pad + 1 - self.k
    }

    pub fn out_w(&self) -> usize {
        self.in_w + 2 * self.pad + 1 - self.k
    }

    pub fn patch(&self) -> usize {
        self.in_c * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds `x` (`C x H x W`) into a `patch x positions` column matrix.
pub fn im2col<R: Real>(g: &ConvGeom, x: &[R], col: &mut [R]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    debug_assert_eq!(col.len(), g.patch() * p);
    for c in 0..g.in_c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = oy as isize + ki as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(R::zero());
                        continue;
                    }
                    let src = &x[(c * g.in_h + iy as usize) * g.in_w..][..g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize + kj as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            R::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds a column-gradient matrix back onto the input, accumulating.
pub fn col2im_accum<R: Real>(g: &ConvGeom, col: &[R], dx: &mut [R]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.in_c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = oy as isize + ki as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.in_h + iy as usize) * g.in_w..][..g.in_w];
                    for ox in 0..ow {
                        let ix = ox as isize + kj as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[o, :] = b[o] + sum_k W[o, k] col[k, :]`
pub fn conv_forward<R: Real>(g: &ConvGeom, w: &[R], b: &[R], col: &[R], out: &mut [R]) {
    let p = g.positions();
    let patch = g.patch();
    for o in 0..g.out_c {
        let dst = &mut out[o * p..(o + 1) * p];
        dst.fill(b[o]);
        for k in 0..patch {
            let wk = w[o * patch + k];
            if wk != R::zero() {
                axpy(wk, &col[k * p..(k + 1) * p], dst);
            }
        }
    }
}

/// Accumulates weight, bias and column gradients of [`conv_forward`].
pub fn conv_backward<R: Real>(
    g: &ConvGeom,
    w: &[R],
    col: &[R],
    dy: &[R],
    dw: &mut [R],
    db: &mut [R],
    dcol: Option<&mut [R]>,
) {
    let p = g.positions();
    let patch = g.patch();
    for o in 0..g.out_c {
        let go = &dy[o * p..(o + 1) * p];
        db[o] += go.iter().copied().sum::<R>();
        for k in 0..patch {
            dw[o * patch + k] += dot(go, &col[k * p..(k + 1) * p]);
        }
    }
    if let Some(dcol) = dcol {
        for o in 0..g.out_c {
            let go = &dy[o * p..(o + 1) * p];
            for k in 0..patch {
                let wk = w[o * patch + k];
                if wk != R::zero() {
                    axpy(wk, go, &mut dcol[k * p..(k + 1) * p]);
                }
            }
        }
    }
}

/// Non-overlapping `size x size` max pooling over `C x H x W`. Output extent
/// is `floor(H / size) x floor(W / size)`. `argmax` receives the flat input
/// index of each winner; ties go to the lowest index in scan order.
pub fn maxpool_forward<R: Real>(
    x: &[R],
    c: usize,
    h: usize,
    w: usize,
    size: usize,
    out: &mut [R],
    argmax: &mut [usize],
) {
    let (oh, ow) = (h / size, w / size);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = usize::MAX;
                let mut best_v = R::neg_infinity();
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = (ch * h + oy * size + dy) * w + ox * size + dx;
                        if best == usize::MAX || x[idx] > best_v {
                            best = idx;
                            best_v = x[idx];
                        }
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                out[o] = best_v;
                argmax[o] = best;
            }
        }
    }
}

/// Routes each upstream value to its recorded argmax input, accumulating.
pub fn scatter_argmax<R: Real>(argmax: &[usize], dy: &[R], dx: &mut [R]) {
    for (&i, &g) in argmax.iter().zip(dy) {
        dx[i] += g;
    }
}

/// Integer feature-cell window of an ROI: rows `[y0, y1)`, cols `[x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoiWindow {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// Bin `i` of `grid` bins over `len` cells covers
/// `[floor(i * len / grid), ceil((i + 1) * len / grid))`.
#[inline]
pub fn bin_range(i: usize, len: usize, grid: usize) -> (usize, usize) {
    let start = (i * len) / grid;
    let end = ((i + 1) * len).div_ceil(grid);
    (start, end.max(start + 1))
}

/// ROI max pooling over a `C x H x W` map into a `grid_h x grid_w x C`
/// (channel-fastest) vector.
pub fn roi_pool_forward<R: Real>(
    fm: &[R],
    c: usize,
    h: usize,
    w: usize,
    win: &RoiWindow,
    out: &mut [R],
    argmax: &mut [usize],
) {
    debug_assert!(win.y1 <= h && win.x1 <= w && win.y0 < win.y1 && win.x0 < win.x1);
    let (rh, rw) = (win.y1 - win.y0, win.x1 - win.x0);
    let ybins: Vec<(usize, usize)> = (0..win.grid_h).map(|g| bin_range(g, rh, win.grid_h)).collect();
    let xbins: Vec<(usize, usize)> = (0..win.grid_w).map(|g| bin_range(g, rw, win.grid_w)).collect();
    let plane_len = h * w;
    for (ch, plane) in fm.chunks_exact(plane_len).take(c).enumerate() {
        for (gy, &(ys, ye)) in ybins.iter().enumerate() {
            for (gx, &(xs, xe)) in xbins.iter().enumerate() {
                // Seeded with the first cell; strict `>` keeps the lowest index.
                let first = (win.y0 + ys) * w + win.x0 + xs;
                let (mut best, mut best_v) = (first, plane[first]);
                for y in ys..ye {
                    let row = (win.y0 + y) * w + win.x0;
                    for (x, &v) in plane[row + xs..row + xe].iter().enumerate() {
                        if v > best_v {
                            best = row + xs + x;
                            best_v = v;
                        }
                    }
                }
                let o = (gy * win.grid_w + gx) * c + ch;
                out[o] = best_v;
                argmax[o] = ch * plane_len + best;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f64> = (0..37).map(|i| i as f64 * 0.5 - 3.0).collect();
        let b: Vec<f64> = (0..37).map(|i| (i as f64).sin()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn bins_cover_and_never_empty() {
        for len in 1..20 {
            for grid in 1..8 {
                let mut covered = vec![false; len];
                for i in 0..grid {
                    let (s, e) = bin_range(i, len, grid);
                    assert!(s < e && e <= len.max(1));
                    covered[s..e].iter_mut().for_each(|c| *c = true);
                }
                assert!(covered.iter().all(|&c| c));
            }
        }
    }

    #[test]
    fn maxpool_ties_pick_lowest_index() {
        let x = [1.0f64, 1.0, 1.0, 1.0];
        let mut out = [0.0];
        let mut am = [0];
        maxpool_forward(&x, 1, 2, 2, 2, &mut out, &mut am);
        assert_eq!(am[0], 0);
    }
}
