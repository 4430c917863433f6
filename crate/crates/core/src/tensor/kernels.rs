//! Dense f64 kernels behind the graph operators.
//!
//! Convolution is lowered to im2col + GEMM. The three members of the
//! convolution family (forward, input-gradient, weight-gradient) share the
//! same geometry and column layout so that each one's adjoint is another
//! member of the family.

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.n, self.cin, self.h, self.w]
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.cout, self.cin, self.kh, self.kw]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.oh, self.ow]
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// 1x1, stride 1, no padding: the column matrix is the input itself.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c = alpha * a·b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    let max_index = |rows: usize, cols: usize, (rs, cs): (isize, isize)| {
        (rows.saturating_sub(1)) * rs as usize + (cols.saturating_sub(1)) * cs as usize
    };
    if k > 0 {
        assert!(max_index(m, k, a_strides) < a.len());
        assert!(max_index(k, n, b_strides) < b.len());
    }
    // SAFETY: bounds of every operand were checked above; strides are non-negative.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major `[m,k]·[k,n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), 0.0, &mut out);
    out
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.oh, g.ow);
    let plane = oh * ow;
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], x: &mut [f64]) {
    let (oh, ow) = (g.oh, g.ow);
    let plane = oh * ow;
    for c in 0..g.cin {
        let xc = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation `y[n] = W · cols(x[n])`.
pub fn conv_forward(g: &ConvGeom, x: &[f64], weight: &[f64]) -> Vec<f64> {
    let (k, p) = (g.col_rows(), g.col_cols());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let mut out = vec![0.0; g.n * out_len];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    for n in 0..g.n {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let colsn: &[f64] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        gemm(
            g.cout,
            k,
            p,
            weight,
            (k as isize, 1),
            colsn,
            (p as isize, 1),
            0.0,
            &mut out[n * out_len..(n + 1) * out_len],
        );
    }
    out
}

/// Adjoint of [`conv_forward`] in its input argument.
pub fn conv_input_grad(g: &ConvGeom, grad_out: &[f64], weight: &[f64]) -> Vec<f64> {
    let (k, p) = (g.col_rows(), g.col_cols());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let mut dx = vec![0.0; g.n * in_len];
    let mut cols = vec![0.0; k * p];
    for n in 0..g.n {
        let gn = &grad_out[n * out_len..(n + 1) * out_len];
        if g.is_pointwise() {
            gemm(
                k,
                g.cout,
                p,
                weight,
                (1, k as isize),
                gn,
                (p as isize, 1),
                0.0,
                &mut dx[n * in_len..(n + 1) * in_len],
            );
        } else {
            gemm(k, g.cout, p, weight, (1, k as isize), gn, (p as isize, 1), 0.0, &mut cols);
            col2im(g, &cols, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    dx
}

/// Adjoint of [`conv_forward`] in its weight argument.
pub fn conv_weight_grad(g: &ConvGeom, x: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let (k, p) = (g.col_rows(), g.col_cols());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let mut dw = vec![0.0; g.cout * k];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    for n in 0..g.n {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let colsn: &[f64] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        let gn = &grad_out[n * out_len..(n + 1) * out_len];
        // dw += g[n] · cols^T
        gemm(g.cout, p, k, gn, (p as isize, 1), colsn, (1, p as isize), 1.0, &mut dw);
    }
    dw
}

/// Nearest-neighbour upsampling of the two trailing axes by `k`.
pub fn upsample(x: &[f64], planes: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h * k, w * k);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let srow = &src[(oy / k) * w..(oy / k + 1) * w];
            let drow = &mut dst[oy * ow..(oy + 1) * ow];
            for (ox, v) in drow.iter_mut().enumerate() {
                *v = srow[ox / k];
            }
        }
    }
    out
}

/// `k×k` average pooling of the two trailing axes (`h`, `w` divisible by `k`).
pub fn avg_pool(x: &[f64], planes: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            let srow = &src[y * w..(y + 1) * w];
            let drow = &mut dst[(y / k) * ow..(y / k + 1) * ow];
            for (x, v) in srow.iter().enumerate() {
                drow[x / k] += v;
            }
        }
        dst.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Axes merged into maximal runs that are either all broadcast (size 1 in
/// the small shape) or all kept. Each entry is `(length, broadcast)`.
fn runs(small: &[usize], big: &[usize]) -> Vec<(usize, bool)> {
    let mut out: Vec<(usize, bool)> = Vec::new();
    for (&s, &b) in small.iter().zip(big) {
        if b == 1 {
            continue;
        }
        let bc = s == 1;
        match out.last_mut() {
            Some((len, kind)) if *kind == bc => *len *= b,
            _ => out.push((b, bc)),
        }
    }
    out
}

/// Offsets of each run in the small tensor (0 for broadcast runs).
fn run_strides(runs: &[(usize, bool)]) -> Vec<usize> {
    let mut strides = vec![0; runs.len()];
    let mut acc = 1;
    for i in (0..runs.len()).rev() {
        if !runs[i].1 {
            strides[i] = acc;
            acc *= runs[i].0;
        }
    }
    strides
}

fn expand(runs: &[(usize, bool)], strides: &[usize], x: &[f64], off: usize, out: &mut Vec<f64>) {
    let (len, bc) = runs[0];
    if runs.len() == 1 {
        if bc {
            out.extend(std::iter::repeat_n(x[off], len));
        } else {
            out.extend_from_slice(&x[off..off + len]);
        }
        return;
    }
    for i in 0..len {
        expand(&runs[1..], &strides[1..], x, off + i * strides[0], out);
    }
}

fn reduce(runs: &[(usize, bool)], strides: &[usize], x: &mut std::slice::Iter<'_, f64>, off: usize, out: &mut [f64]) {
    let (len, bc) = runs[0];
    if runs.len() == 1 {
        if bc {
            out[off] += x.by_ref().take(len).sum::<f64>();
        } else {
            for (o, v) in out[off..off + len].iter_mut().zip(x.by_ref()) {
                *o += v;
            }
        }
        return;
    }
    for i in 0..len {
        reduce(&runs[1..], &strides[1..], x, off + i * strides[0], out);
    }
}

/// Expand size-1 axes of `src_shape` to `dst_shape`.
pub fn broadcast_to(x: &[f64], src_shape: &[usize], dst_shape: &[usize]) -> Vec<f64> {
    let total: usize = dst_shape.iter().product();
    let runs = runs(src_shape, dst_shape);
    if runs.is_empty() {
        return vec![x[0]; total];
    }
    let mut out = Vec::with_capacity(total);
    expand(&runs, &run_strides(&runs), x, 0, &mut out);
    out
}

/// Sum over the axes where `dst_shape` is 1 (adjoint of [`broadcast_to`]).
pub fn sum_to(x: &[f64], src_shape: &[usize], dst_shape: &[usize]) -> Vec<f64> {
    let total: usize = dst_shape.iter().product();
    let mut out = vec![0.0; total];
    let runs = runs(dst_shape, src_shape);
    if runs.is_empty() {
        out[0] = x.iter().sum();
        return out;
    }
    reduce(&runs, &run_strides(&runs), &mut x.iter(), 0, &mut out);
    out
}

/// Copy `len` entries starting at `start` along `axis`.
pub fn narrow(x: &[f64], shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<f64> {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let full = shape[axis];
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out.extend_from_slice(&x[base..base + len * inner]);
    }
    out
}

/// Zero-pad along `axis` so `x` occupies `[start, start+len)` of `full` (adjoint of [`narrow`]).
pub fn embed(x: &[f64], shape: &[usize], axis: usize, start: usize, full: usize) -> Vec<f64> {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = shape[axis];
    let mut out = vec![0.0; outer * full * inner];
    for o in 0..outer {
        let dst = (o * full + start) * inner;
        out[dst..dst + len * inner].copy_from_slice(&x[o * len * inner..(o + 1) * len * inner]);
    }
    out
}

pub fn transpose2(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}
