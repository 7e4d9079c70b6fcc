//! Raw numeric kernels on contiguous buffers. The autodiff tape in
//! [`crate::graph`] and the data pipeline both call into these.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::math;

/// Row-major matrix view over a slice with explicit strides.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    /// Columns `start..start+len`.
    pub fn cols(self, start: usize, len: usize) -> Self {
        MatRef {
            offset: self.offset + start * self.cs,
            cols: len,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

pub struct MatMut<'a> {
    pub data: &'a mut [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatMut<'a> {
    pub fn new(data: &'a mut [f64], rows: usize, cols: usize) -> Self {
        MatMut {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn cols(self, start: usize, len: usize) -> Self {
        MatMut {
            offset: self.offset + start * self.cs,
            cols: len,
            ..self
        }
    }
}

/// `c = alpha·a·b + beta·c`.
pub fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: MatMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    a.check();
    b.check();
    if c.rows > 0 && c.cols > 0 {
        let last = c.offset + (c.rows - 1) * c.rs + (c.cols - 1) * c.cs;
        assert!(last < c.data.len(), "output view out of bounds");
    }
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: every view was bounds-checked above, `c` is uniquely borrowed,
    // and the strides describe non-overlapping output elements.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Valid output columns `x` for a horizontal tap offset `shift`, i.e.
/// those with `0 <= x + shift < w`.
#[inline]
fn tap_range(shift: isize, w: usize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (w as isize - shift).clamp(0, w as isize) as usize;
    (lo.min(hi), hi)
}

/// Unfold one `cin×h×w` image into `(cin·k·k)×(h·w)` patches, zero padded by
/// `k/2` on every side.
#[cfg(test)]
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize, col: &mut [f64]) {
    im2col_rows(x, cin, h, w, k, 0..h, col);
}

/// Adjoint of [`im2col`]: accumulate patches back into `dx`.
#[cfg(test)]
fn col2im(col: &[f64], cin: usize, h: usize, w: usize, k: usize, dx: &mut [f64]) {
    col2im_rows(col, cin, h, w, k, 0..h, dx);
}

/// [`im2col`] restricted to output rows `rows`; `col` is
/// `(cin·k·k)×(rows.len()·w)`.
fn im2col_rows(x: &[f64], cin: usize, h: usize, w: usize, k: usize, rows: Range<usize>, col: &mut [f64]) {
    let pad = k / 2;
    let plane = h * w;
    let span = rows.len() * w;
    for ci in 0..cin {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let shift = kx as isize - pad as isize;
                let (lo, hi) = tap_range(shift, w);
                let dst = &mut col[row * span..(row + 1) * span];
                for (j, y) in rows.clone().enumerate() {
                    let sy = y as isize + ky as isize - pad as isize;
                    let out = &mut dst[j * w..(j + 1) * w];
                    if sy < 0 || sy >= h as isize || lo >= hi {
                        out.fill(0.0);
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    out[..lo].fill(0.0);
                    out[hi..].fill(0.0);
                    let s0 = (lo as isize + shift) as usize;
                    out[lo..hi].copy_from_slice(&srow[s0..s0 + (hi - lo)]);
                }
            }
        }
    }
}

fn col2im_rows(col: &[f64], cin: usize, h: usize, w: usize, k: usize, rows: Range<usize>, dx: &mut [f64]) {
    let pad = k / 2;
    let plane = h * w;
    let span = rows.len() * w;
    for ci in 0..cin {
        let dst = &mut dx[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let shift = kx as isize - pad as isize;
                let (lo, hi) = tap_range(shift, w);
                if lo >= hi {
                    continue;
                }
                let src = &col[row * span..(row + 1) * span];
                let s0 = (lo as isize + shift) as usize;
                for (j, y) in rows.clone().enumerate() {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[sy as usize * w + s0..sy as usize * w + s0 + (hi - lo)];
                    for (d, g) in drow.iter_mut().zip(&src[j * w + lo..j * w + hi]) {
                        *d += g;
                    }
                }
            }
        }
    }
}

/// Patch-matrix budget per strip, in elements; keeps the unfolded strip
/// resident in L2 while it is packed and multiplied.
const STRIP_ELEMS: usize = 1 << 16;

fn strip_rows(kk: usize, h: usize, w: usize) -> usize {
    (STRIP_ELEMS / (kk * w).max(1)).clamp(1, h)
}

/// Same-padded stride-1 convolution of a batch. `weight` is
/// `cout×cin×k×k`, output is `n×cout×h×w`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: Option<&[f64]>,
    cout: usize,
    k: usize,
    out: &mut [f64],
) {
    let plane = h * w;
    let kk = cin * k * k;
    let wm = MatRef::new(weight, cout, kk);
    let step = strip_rows(kk, h, w);
    let mut col = if k == 1 { Vec::new() } else { vec![0.0; kk * step * w] };
    for b in 0..n {
        let xb = &x[b * cin * plane..(b + 1) * cin * plane];
        let ob = &mut out[b * cout * plane..(b + 1) * cout * plane];
        if k == 1 {
            gemm(1.0, wm, MatRef::new(xb, kk, plane), 0.0, MatMut::new(ob, cout, plane));
        } else {
            for y0 in (0..h).step_by(step) {
                let y1 = (y0 + step).min(h);
                let span = (y1 - y0) * w;
                im2col_rows(xb, cin, h, w, k, y0..y1, &mut col[..kk * span]);
                gemm(
                    1.0,
                    wm,
                    MatRef::new(&col[..kk * span], kk, span),
                    0.0,
                    MatMut::new(&mut *ob, cout, plane).cols(y0 * w, span),
                );
            }
        }
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                for v in &mut ob[co * plane..(co + 1) * plane] {
                    *v += bv;
                }
            }
        }
    }
}

/// Gradients of [`conv2d_forward`]. Each of `dx`, `dweight`, `dbias` is
/// accumulated into when present.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    k: usize,
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dweight: Option<&mut [f64]>,
    mut dbias: Option<&mut [f64]>,
) {
    let plane = h * w;
    let kk = cin * k * k;
    let wt = MatRef::new(weight, cout, kk).t();
    let step = strip_rows(kk, h, w);
    let strip = if k == 1 { 0 } else { kk * step * w };
    let mut col = vec![0.0; if dweight.is_some() { strip } else { 0 }];
    let mut dcol = vec![0.0; if dx.is_some() { strip } else { 0 }];
    for b in 0..n {
        let xb = &x[b * cin * plane..(b + 1) * cin * plane];
        let gb = &dout[b * cout * plane..(b + 1) * cout * plane];
        if let Some(db) = dbias.as_deref_mut() {
            for (co, d) in db.iter_mut().enumerate() {
                *d += gb[co * plane..(co + 1) * plane].iter().sum::<f64>();
            }
        }
        if k == 1 {
            let g = MatRef::new(gb, cout, plane);
            if let Some(dw) = dweight.as_deref_mut() {
                gemm(1.0, g, MatRef::new(xb, kk, plane).t(), 1.0, MatMut::new(dw, cout, kk));
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dxb = &mut dx[b * cin * plane..(b + 1) * cin * plane];
                gemm(1.0, wt, g, 1.0, MatMut::new(dxb, kk, plane));
            }
            continue;
        }
        for y0 in (0..h).step_by(step) {
            let y1 = (y0 + step).min(h);
            let span = (y1 - y0) * w;
            let g = MatRef::new(gb, cout, plane).cols(y0 * w, span);
            if let Some(dw) = dweight.as_deref_mut() {
                im2col_rows(xb, cin, h, w, k, y0..y1, &mut col[..kk * span]);
                gemm(1.0, g, MatRef::new(&col[..kk * span], kk, span).t(), 1.0, MatMut::new(dw, cout, kk));
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dxb = &mut dx[b * cin * plane..(b + 1) * cin * plane];
                gemm(1.0, wt, g, 0.0, MatMut::new(&mut dcol[..kk * span], kk, span));
                col2im_rows(&dcol[..kk * span], cin, h, w, k, y0..y1, dxb);
            }
        }
    }
}

/// Per-axis sampling plan for bilinear resampling with half-pixel centres
/// (`src = (dst + 0.5)·in/out − 0.5`, clamped at the borders).
#[derive(Clone, Debug)]
pub struct AxisPlan {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisPlan {
    pub fn bilinear(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for d in 0..output {
            let mut src = (d as f64 + 0.5) * scale - 0.5;
            if src < 0.0 {
                src = 0.0;
            }
            let mut i0 = math::floor(src) as usize;
            if i0 > input - 1 {
                i0 = input - 1;
            }
            let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
            lo.push(i0);
            hi.push(i1);
            frac.push(src - i0 as f64);
        }
        AxisPlan { lo, hi, frac }
    }
}

#[derive(Clone, Debug)]
pub struct ResizePlan {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    rows: AxisPlan,
    cols: AxisPlan,
}

impl ResizePlan {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        ResizePlan {
            in_h,
            in_w,
            out_h,
            out_w,
            rows: AxisPlan::bilinear(in_h, out_h),
            cols: AxisPlan::bilinear(in_w, out_w),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.in_h == self.out_h && self.in_w == self.out_w
    }

    /// Resample one plane.
    pub fn apply(&self, src: &[f64], dst: &mut [f64]) {
        if self.is_identity() {
            dst.copy_from_slice(src);
            return;
        }
        let (r, c) = (&self.rows, &self.cols);
        for y in 0..self.out_h {
            let fy = r.frac[y];
            let top = &src[r.lo[y] * self.in_w..(r.lo[y] + 1) * self.in_w];
            let bot = &src[r.hi[y] * self.in_w..(r.hi[y] + 1) * self.in_w];
            for x in 0..self.out_w {
                let fx = c.frac[x];
                let (x0, x1) = (c.lo[x], c.hi[x]);
                let t = top[x0] * (1.0 - fx) + top[x1] * fx;
                let b = bot[x0] * (1.0 - fx) + bot[x1] * fx;
                dst[y * self.out_w + x] = t * (1.0 - fy) + b * fy;
            }
        }
    }

    /// Adjoint of [`ResizePlan::apply`], accumulating into `dsrc`.
    pub fn apply_adjoint(&self, ddst: &[f64], dsrc: &mut [f64]) {
        if self.is_identity() {
            for (s, d) in dsrc.iter_mut().zip(ddst) {
                *s += *d;
            }
            return;
        }
        let (r, c) = (&self.rows, &self.cols);
        for y in 0..self.out_h {
            let fy = r.frac[y];
            for x in 0..self.out_w {
                let fx = c.frac[x];
                let g = ddst[y * self.out_w + x];
                let (x0, x1) = (c.lo[x], c.hi[x]);
                let top = r.lo[y] * self.in_w;
                let bot = r.hi[y] * self.in_w;
                dsrc[top + x0] += g * (1.0 - fy) * (1.0 - fx);
                dsrc[top + x1] += g * (1.0 - fy) * fx;
                dsrc[bot + x0] += g * fy * (1.0 - fx);
                dsrc[bot + x1] += g * fy * fx;
            }
        }
    }
}

/// Nearest-neighbour source index with half-pixel centres.
pub fn nearest_index(dst: usize, input: usize, output: usize) -> usize {
    let src = math::floor((dst as f64 + 0.5) * input as f64 / output as f64) as usize;
    src.min(input - 1)
}

/// Block size for the row-streamed global-context kernels.
const CONTEXT_BLOCK: usize = 128;

/// Softmax each row of a `rows×cols` buffer in place.
fn softmax_rows(buf: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut buf[r * cols..(r + 1) * cols];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = math::exp(*v - m);
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

/// Global context aggregation on one `c×p` feature matrix `x`:
/// `ω = softmax_rows(xᵀx)`, `g = x·ω`. Rows of `ω` are produced in blocks
/// so memory stays `O(block·p)` rather than `O(p²)`.
pub fn global_context_forward(x: &[f64], c: usize, p: usize, g: &mut [f64]) {
    let xm = MatRef::new(x, c, p);
    g.fill(0.0);
    let mut blk = vec![0.0; CONTEXT_BLOCK.min(p) * p];
    let mut start = 0;
    while start < p {
        let len = CONTEXT_BLOCK.min(p - start);
        let s = &mut blk[..len * p];
        // S[I, :] = X[:, I]ᵀ X
        gemm(1.0, xm.cols(start, len).t(), xm, 0.0, MatMut::new(s, len, p));
        softmax_rows(s, len, p);
        // G += X[:, I] ω[I, :]
        gemm(
            1.0,
            xm.cols(start, len),
            MatRef::new(s, len, p),
            1.0,
            MatMut::new(g, c, p),
        );
        start += len;
    }
}

/// Adjoint of [`global_context_forward`]; accumulates into `dx`.
pub fn global_context_backward(x: &[f64], c: usize, p: usize, dg: &[f64], dx: &mut [f64]) {
    let xm = MatRef::new(x, c, p);
    let gm = MatRef::new(dg, c, p);
    let b = CONTEXT_BLOCK.min(p);
    let mut omega = vec![0.0; b * p];
    let mut domega = vec![0.0; b * p];
    let mut start = 0;
    while start < p {
        let len = CONTEXT_BLOCK.min(p - start);
        let om = &mut omega[..len * p];
        let dom = &mut domega[..len * p];
        gemm(1.0, xm.cols(start, len).t(), xm, 0.0, MatMut::new(om, len, p));
        softmax_rows(om, len, p);
        // dω[I, :] = X[:, I]ᵀ dG
        gemm(1.0, xm.cols(start, len).t(), gm, 0.0, MatMut::new(dom, len, p));
        // dX[:, I] += dG ω[I, :]ᵀ
        gemm(
            1.0,
            gm,
            MatRef::new(om, len, p).t(),
            1.0,
            MatMut::new(dx, c, p).cols(start, len),
        );
        // dS = ω ⊙ (dω − rowsum(ω ⊙ dω)), stored over dω
        for r in 0..len {
            let o = &om[r * p..(r + 1) * p];
            let d = &mut dom[r * p..(r + 1) * p];
            let dot: f64 = o.iter().zip(d.iter()).map(|(a, b)| a * b).sum();
            for (dv, ov) in d.iter_mut().zip(o) {
                *dv = ov * (*dv - dot);
            }
        }
        let ds = MatRef::new(dom, len, p);
        // S = XᵀX is symmetric in its arguments:
        // dX[:, I] += X dS[I, :]ᵀ and dX += X[:, I] dS[I, :]
        gemm(1.0, xm, ds.t(), 1.0, MatMut::new(dx, c, p).cols(start, len));
        gemm(1.0, xm.cols(start, len), ds, 1.0, MatMut::new(dx, c, p));
        start += len;
    }
}
