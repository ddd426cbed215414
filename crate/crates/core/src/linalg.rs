//! Dense f32 kernels used by the transformer.
//!
//! Matrix products go through `matrixmultiply::sgemm`, which is single-threaded
//! here and therefore reduces in a fixed order. The wrappers below check every
//! strided view against its backing slice so the unsafe call stays sound.

/// A strided read-only view over a row-major buffer.
#[derive(Clone, Copy)]
pub struct View<'a> {
    data: &'a [f32],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> View<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        check_extent(data.len(), rows, cols, rs, cs);
        View {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    /// Contiguous row-major `[rows, cols]`.
    pub fn dense(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self::new(data, rows, cols, cols, 1)
    }

    /// Transpose without copying.
    pub fn t(self) -> Self {
        View {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// A strided mutable view.
pub struct ViewMut<'a> {
    data: &'a mut [f32],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> ViewMut<'a> {
    pub fn new(data: &'a mut [f32], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        check_extent(data.len(), rows, cols, rs, cs);
        ViewMut {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    pub fn dense(data: &'a mut [f32], rows: usize, cols: usize) -> Self {
        Self::new(data, rows, cols, cols, 1)
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs + (cols - 1) * cs;
    assert!(
        last < len,
        "view [{rows}x{cols}] strides ({rs},{cs}) overruns buffer of {len}"
    );
}

/// `c = alpha * a·b + beta * c`.
pub fn gemm(alpha: f32, a: View<'_>, b: View<'_>, beta: f32, c: ViewMut<'_>) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!(a.rows, c.rows, "output rows differ");
    assert_eq!(b.cols, c.cols, "output cols differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c.data[i * c.rs + j * c.cs];
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: every view's extent was checked against its slice on construction,
    // and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// `out[m,n] = x[m,k] · w[k,n] + bias[n]`.
pub fn linear(x: &[f32], w: &[f32], bias: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for row in out[..m * n].chunks_exact_mut(n) {
        row.copy_from_slice(bias);
    }
    gemm(
        1.0,
        View::dense(x, m, k),
        View::dense(w, k, n),
        1.0,
        ViewMut::dense(out, m, n),
    );
}

/// Backward of [`linear`]: accumulates `dw += xᵀ·dy`, `db += Σ dy`, and
/// writes (or accumulates, if `accumulate_dx`) `dx = dy·wᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    m: usize,
    k: usize,
    n: usize,
    dx: &mut [f32],
    dw: &mut [f32],
    db: &mut [f32],
    accumulate_dx: bool,
) {
    gemm(
        1.0,
        View::dense(x, m, k).t(),
        View::dense(dy, m, n),
        1.0,
        ViewMut::dense(dw, k, n),
    );
    for row in dy[..m * n].chunks_exact(n) {
        for (b, g) in db.iter_mut().zip(row) {
            *b += g;
        }
    }
    gemm(
        1.0,
        View::dense(dy, m, n),
        View::dense(w, k, n).t(),
        if accumulate_dx { 1.0 } else { 0.0 },
        ViewMut::dense(dx, m, k),
    );
}

/// `out[n] = x[k] · w[k,n] + bias[n]` for a single row, streaming `w` once.
pub fn vecmat(x: &[f32], w: &[f32], bias: &[f32], out: &mut [f32]) {
    let n = bias.len();
    out.copy_from_slice(bias);
    for (xi, wrow) in x.iter().zip(w.chunks_exact(n)) {
        for (o, wv) in out.iter_mut().zip(wrow) {
            *o += xi * wv;
        }
    }
}

pub const LN_EPS: f32 = 1e-5;

/// Row-wise layer normalization; returns per-row mean and reciprocal std.
pub fn layer_norm(
    x: &[f32],
    gain: &[f32],
    bias: &[f32],
    out: &mut [f32],
    mean: &mut [f32],
    rstd: &mut [f32],
) {
    let d = gain.len();
    for (r, (xr, or)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let mu = xr.iter().sum::<f32>() / d as f32;
        let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f32>() / d as f32;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        for i in 0..d {
            or[i] = (xr[i] - mu) * rs * gain[i] + bias[i];
        }
        mean[r] = mu;
        rstd[r] = rs;
    }
}

/// Accumulates `dx`, `dgain`, `dbias` for [`layer_norm`].
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward(
    x: &[f32],
    gain: &[f32],
    mean: &[f32],
    rstd: &[f32],
    dout: &[f32],
    dx: &mut [f32],
    dgain: &mut [f32],
    dbias: &mut [f32],
) {
    let d = gain.len();
    let rows = x.len() / d;
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let gr = &dout[r * d..(r + 1) * d];
        let (mu, rs) = (mean[r], rstd[r]);
        let mut sum_g = 0.0f32;
        let mut sum_gx = 0.0f32;
        for i in 0..d {
            let xhat = (xr[i] - mu) * rs;
            let g = gr[i] * gain[i];
            sum_g += g;
            sum_gx += g * xhat;
            dgain[i] += gr[i] * xhat;
            dbias[i] += gr[i];
        }
        let mean_g = sum_g / d as f32;
        let mean_gx = sum_gx / d as f32;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            let xhat = (xr[i] - mu) * rs;
            dxr[i] += rs * (gr[i] * gain[i] - mean_g - xhat * mean_gx);
        }
    }
}

const GELU_SCALE: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_CUBIC: f32 = 0.044_715;

// 0.5 * (1 + tanh(u)) == sigmoid(2u); one exp is cheaper than tanh.
fn gelu_gate(x: f32) -> f32 {
    let u = GELU_SCALE * (x + GELU_CUBIC * x * x * x);
    1.0 / (1.0 + (-2.0 * u).exp())
}

pub fn gelu(x: f32) -> f32 {
    x * gelu_gate(x)
}

pub fn gelu_grad(x: f32) -> f32 {
    let s = gelu_gate(x);
    let du = GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x * x);
    s + 2.0 * x * s * (1.0 - s) * du
}

/// Numerically stable log-softmax of one row, written into `out`.
pub fn log_softmax(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = row.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for (o, v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
