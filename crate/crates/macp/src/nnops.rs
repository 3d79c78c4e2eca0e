//! Differentiable primitives: submanifold sparse convolution, pointwise
//! convolution, dense 2D convolution, activations, scale-shift, residual
//! add, channel normalization, and the tensor-level tape ops built on the
//! same kernels.
//!
//! Each primitive exists twice behind one shared kernel: a plain function
//! over `geom` containers (the inference/oracle surface) and a [`TapeOp`]
//! for recording on an autodiff tape. Both paths run identical arithmetic,
//! so results agree bitwise.

use crate::autodiff::{AdError, TapeOp, Tensor};
use crate::geom::{DenseGrid, SparseTensor};
use rand::Rng;
use thiserror::Error;

pub const CHANNEL_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("channel mismatch: input has {got}, kernel expects {expect}")]
    ChannelMismatch { got: usize, expect: usize },
    #[error("pointwise convolution requires k = 1, got k = {0}")]
    NotPointwise(usize),
    #[error("kernel size must be odd, got {0}")]
    EvenKernel(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Geom(#[from] crate::geom::GeomError),
}

/// Spatial k x k convolution weights (odd k) with per-output-channel bias.
/// Weight layout is `[ky][kx][c_in][c_out]`, row-major.
#[derive(Debug, Clone)]
pub struct ConvKernel {
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvKernel {
    pub fn new(k: usize, c_in: usize, c_out: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self, NnError> {
        if k % 2 == 0 {
            return Err(NnError::EvenKernel(k));
        }
        if weights.len() != k * k * c_in * c_out || bias.len() != c_out {
            return Err(NnError::Shape(format!(
                "kernel {k}x{k} {c_in}->{c_out} needs {} weights and {c_out} biases, got {} and {}",
                k * k * c_in * c_out,
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self { k, c_in, c_out, weights, bias })
    }

    /// Identity pointwise kernel (square channel count, zero bias).
    pub fn identity(c: usize) -> Self {
        let mut weights = vec![0.0; c * c];
        for i in 0..c {
            weights[i * c + i] = 1.0;
        }
        Self { k: 1, c_in: c, c_out: c, weights, bias: vec![0.0; c] }
    }

    /// Uniform init in +-1/sqrt(k*k*c_in) with zero bias.
    pub fn random<R: Rng>(k: usize, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((k * k * c_in) as f64).sqrt();
        let weights = (0..k * k * c_in * c_out).map(|_| rng.random_range(-bound..bound)).collect();
        Self { k, c_in, c_out, weights, bias: vec![0.0; c_out] }
    }

    pub fn weight_tensor(&self) -> Tensor {
        Tensor::new(vec![self.k, self.k, self.c_in, self.c_out], self.weights.clone())
    }

    pub fn bias_tensor(&self) -> Tensor {
        Tensor::new(vec![self.c_out], self.bias.clone())
    }
}

// ---------------------------------------------------------------------------
// Shared numeric kernels. Inner loops run over contiguous output channels so
// they vectorize.
// ---------------------------------------------------------------------------

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = a.mul_add(*xi, *yi);
    }
}

/// Dot product with eight independent partial sums; the fixed lane split
/// keeps results deterministic while letting the lanes vectorize.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let ca = &a[i * 8..(i + 1) * 8];
        let cb = &b[i * 8..(i + 1) * 8];
        for j in 0..8 {
            lanes[j] = ca[j].mul_add(cb[j], lanes[j]);
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail = a[i].mul_add(b[i], tail);
    }
    let quad = [lanes[0] + lanes[4], lanes[1] + lanes[5], lanes[2] + lanes[6], lanes[3] + lanes[7]];
    (quad[0] + quad[2]) + (quad[1] + quad[3]) + tail
}

/// Accumulates `out_row += sum over taps of x[x_base..][ci] * K[k_base..]`
/// with a register-resident eight-wide accumulator per output block.
/// `taps` holds (x_base, k_base) pairs; K rows are c_out wide.
#[inline]
fn tap_microkernel(
    taps: &[(usize, usize)],
    x: &[f64],
    kw: &[f64],
    c_in: usize,
    c_out: usize,
    bias: &[f64],
    out_row: &mut [f64],
) {
    let mut co = 0;
    while co + 8 <= c_out {
        let mut acc = [0.0f64; 8];
        acc.copy_from_slice(&bias[co..co + 8]);
        for &(xb, kb) in taps {
            let xr = &x[xb..xb + c_in];
            for (ci, &xv) in xr.iter().enumerate() {
                let base = kb + ci * c_out + co;
                let kr = &kw[base..base + 8];
                for j in 0..8 {
                    acc[j] = xv.mul_add(kr[j], acc[j]);
                }
            }
        }
        out_row[co..co + 8].copy_from_slice(&acc);
        co += 8;
    }
    while co < c_out {
        let mut acc = bias[co];
        for &(xb, kb) in taps {
            let xr = &x[xb..xb + c_in];
            for (ci, &xv) in xr.iter().enumerate() {
                acc = xv.mul_add(kw[kb + ci * c_out + co], acc);
            }
        }
        out_row[co] = acc;
        co += 1;
    }
}

/// Four consecutive cells sharing one tap geometry (cell c's input rows sit
/// `c * c_in` past the first cell's). Kernel rows are loaded once per four
/// cells; the accumulators stay in registers.
#[inline]
fn tap_microkernel4(
    taps: &[(usize, usize)],
    x: &[f64],
    kw: &[f64],
    c_in: usize,
    c_out: usize,
    bias: &[f64],
    out4: &mut [f64],
) {
    debug_assert_eq!(out4.len(), 4 * c_out);
    let mut co = 0;
    while co + 8 <= c_out {
        let mut a0 = [0.0f64; 8];
        let mut a1 = [0.0f64; 8];
        let mut a2 = [0.0f64; 8];
        let mut a3 = [0.0f64; 8];
        a0.copy_from_slice(&bias[co..co + 8]);
        a1.copy_from_slice(&bias[co..co + 8]);
        a2.copy_from_slice(&bias[co..co + 8]);
        a3.copy_from_slice(&bias[co..co + 8]);
        for &(xb, kb) in taps {
            for ci in 0..c_in {
                let base = kb + ci * c_out + co;
                let kr = &kw[base..base + 8];
                let x0 = x[xb + ci];
                let x1 = x[xb + c_in + ci];
                let x2 = x[xb + 2 * c_in + ci];
                let x3 = x[xb + 3 * c_in + ci];
                for j in 0..8 {
                    a0[j] = x0.mul_add(kr[j], a0[j]);
                    a1[j] = x1.mul_add(kr[j], a1[j]);
                    a2[j] = x2.mul_add(kr[j], a2[j]);
                    a3[j] = x3.mul_add(kr[j], a3[j]);
                }
            }
        }
        out4[co..co + 8].copy_from_slice(&a0);
        out4[c_out + co..c_out + co + 8].copy_from_slice(&a1);
        out4[2 * c_out + co..2 * c_out + co + 8].copy_from_slice(&a2);
        out4[3 * c_out + co..3 * c_out + co + 8].copy_from_slice(&a3);
        co += 8;
    }
    while co < c_out {
        for m in 0..4 {
            let mut acc = bias[co];
            for &(xb, kb) in taps {
                for ci in 0..c_in {
                    acc = x[xb + m * c_in + ci].mul_add(kw[kb + ci * c_out + co], acc);
                }
            }
            out4[m * c_out + co] = acc;
        }
        co += 1;
    }
}

/// y[r, :] = b + x[r, :] . W for every row r.
fn linear_fwd(x: &[f64], rows: usize, c_in: usize, w: &[f64], b: &[f64], c_out: usize, out: &mut [f64]) {
    for r in 0..rows {
        tap_microkernel(
            &[(r * c_in, 0)],
            x,
            w,
            c_in,
            c_out,
            b,
            &mut out[r * c_out..(r + 1) * c_out],
        );
    }
}

fn linear_bwd(
    x: &[f64],
    rows: usize,
    c_in: usize,
    w: &[f64],
    c_out: usize,
    gout: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    for r in 0..rows {
        let xr = &x[r * c_in..(r + 1) * c_in];
        let gr = &gout[r * c_out..(r + 1) * c_out];
        let dxr = &mut dx[r * c_in..(r + 1) * c_in];
        axpy(1.0, gr, db);
        for ci in 0..c_in {
            dxr[ci] += dot(&w[ci * c_out..(ci + 1) * c_out], gr);
            axpy(xr[ci], gr, &mut dw[ci * c_out..(ci + 1) * c_out]);
        }
    }
}

/// Zero-padded same-size convolution, stride 1, odd k. Interior columns
/// share a full tap geometry and run through the four-cell microkernel;
/// border cells fall back to the per-cell path.
fn conv2d_fwd(x: &[f64], h: usize, w: usize, c_in: usize, kw: &[f64], k: usize, b: &[f64], c_out: usize, out: &mut [f64]) {
    let r = k / 2;
    let tap_stride = c_in * c_out;
    let mut taps: Vec<(usize, usize)> = Vec::with_capacity(k * k);
    let single_cell = |taps: &mut Vec<(usize, usize)>, oh: usize, ow: usize, out: &mut [f64]| {
        taps.clear();
        for ky in 0..k {
            let ih = oh as isize + ky as isize - r as isize;
            if ih < 0 || ih >= h as isize {
                continue;
            }
            for kx in 0..k {
                let iw = ow as isize + kx as isize - r as isize;
                if iw < 0 || iw >= w as isize {
                    continue;
                }
                taps.push((((ih as usize) * w + iw as usize) * c_in, (ky * k + kx) * tap_stride));
            }
        }
        let base = (oh * w + ow) * c_out;
        tap_microkernel(taps, x, kw, c_in, c_out, b, &mut out[base..base + c_out]);
    };
    for oh in 0..h {
        for ow in 0..r.min(w) {
            single_cell(&mut taps, oh, ow, out);
        }
        // Interior columns: every kx is valid.
        let lo = r;
        let hi = w.saturating_sub(r); // exclusive
        let mut ow = lo;
        while ow + 4 <= hi {
            taps.clear();
            for ky in 0..k {
                let ih = oh as isize + ky as isize - r as isize;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let iw = ow + kx - r;
                    taps.push((((ih as usize) * w + iw) * c_in, (ky * k + kx) * tap_stride));
                }
            }
            let base = (oh * w + ow) * c_out;
            tap_microkernel4(&taps, x, kw, c_in, c_out, b, &mut out[base..base + 4 * c_out]);
            ow += 4;
        }
        while ow < hi {
            single_cell(&mut taps, oh, ow, out);
            ow += 1;
        }
        for ow in hi.max(r)..w {
            single_cell(&mut taps, oh, ow, out);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_bwd(
    x: &[f64],
    h: usize,
    w: usize,
    c_in: usize,
    kw: &[f64],
    k: usize,
    c_out: usize,
    gout: &[f64],
    dx: &mut [f64],
    dkw: &mut [f64],
    db: &mut [f64],
) {
    let r = (k / 2) as isize;
    let tap_stride = c_in * c_out;
    for oh in 0..h as isize {
        for ow in 0..w as isize {
            let gr = &gout[((oh as usize) * w + ow as usize) * c_out..][..c_out];
            axpy(1.0, gr, db);
            for ky in 0..k as isize {
                let ih = oh + ky - r;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                for kx in 0..k as isize {
                    let iw = ow + kx - r;
                    if iw < 0 || iw >= w as isize {
                        continue;
                    }
                    let base = ((ih as usize) * w + iw as usize) * c_in;
                    let xr = &x[base..base + c_in];
                    let tap_base = (ky as usize * k + kx as usize) * tap_stride;
                    let dxr = &mut dx[base..base + c_in];
                    for ci in 0..c_in {
                        dxr[ci] += dot(&kw[tap_base + ci * c_out..tap_base + (ci + 1) * c_out], gr);
                        axpy(xr[ci], gr, &mut dkw[tap_base + ci * c_out..tap_base + (ci + 1) * c_out]);
                    }
                }
            }
        }
    }
}

/// Submanifold convolution over occupied sites: `neighbors[site * k2 + tap]`
/// holds the slot of the occupied neighbor under that kernel tap, or -1.
fn subm_fwd(x: &[f64], n: usize, c_in: usize, neighbors: &[i64], k2: usize, kw: &[f64], b: &[f64], c_out: usize, out: &mut [f64]) {
    let tap_stride = c_in * c_out;
    let mut taps: Vec<(usize, usize)> = Vec::with_capacity(k2);
    for site in 0..n {
        taps.clear();
        for tap in 0..k2 {
            let nb = neighbors[site * k2 + tap];
            if nb >= 0 {
                taps.push(((nb as usize) * c_in, tap * tap_stride));
            }
        }
        tap_microkernel(&taps, x, kw, c_in, c_out, b, &mut out[site * c_out..(site + 1) * c_out]);
    }
}

#[allow(clippy::too_many_arguments)]
fn subm_bwd(
    x: &[f64],
    n: usize,
    c_in: usize,
    neighbors: &[i64],
    k2: usize,
    kw: &[f64],
    c_out: usize,
    gout: &[f64],
    dx: &mut [f64],
    dkw: &mut [f64],
    db: &mut [f64],
) {
    let tap_stride = c_in * c_out;
    for site in 0..n {
        let gr = &gout[site * c_out..(site + 1) * c_out];
        axpy(1.0, gr, db);
        for tap in 0..k2 {
            let nb = neighbors[site * k2 + tap];
            if nb < 0 {
                continue;
            }
            let base = (nb as usize) * c_in;
            let xr = &x[base..base + c_in];
            let tap_base = tap * tap_stride;
            let dxr = &mut dx[base..base + c_in];
            for ci in 0..c_in {
                dxr[ci] += dot(&kw[tap_base + ci * c_out..tap_base + (ci + 1) * c_out], gr);
                axpy(xr[ci], gr, &mut dkw[tap_base + ci * c_out..tap_base + (ci + 1) * c_out]);
            }
        }
    }
}

/// tanh-approximate GELU (the documented formula for the whole crate):
/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    const S: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (S * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    const S: f64 = 0.797_884_560_802_865_4;
    let u = S * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * S * (1.0 + 3.0 * 0.044715 * x * x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------------------
// Functional ops over geom containers.
// ---------------------------------------------------------------------------

/// Builds the occupied-neighbor table for a k x k submanifold stencil, in
/// slot order: `table[site * k * k + ky * k + kx]`.
pub fn subm_neighbors(st: &SparseTensor, k: usize) -> Vec<i64> {
    let r = (k / 2) as i64;
    let mut table = vec![-1i64; st.len() * k * k];
    for (site, &(row, col)) in st.coords().iter().enumerate() {
        for ky in 0..k as i64 {
            for kx in 0..k as i64 {
                if let Some(slot) = st.lookup(row + ky - r, col + kx - r) {
                    table[site * k * k + (ky as usize) * k + kx as usize] = slot as i64;
                }
            }
        }
    }
    table
}

/// Submanifold sparse convolution: outputs exist only at input-occupied
/// sites; only occupied neighbors contribute. At k = 1 this is exactly the
/// per-site channel mix `out_c' = b_c' + sum_k K[k][c'] f_k`.
pub fn subm_conv(st: &SparseTensor, kernel: &ConvKernel) -> Result<SparseTensor, NnError> {
    if st.channels() != kernel.c_in {
        return Err(NnError::ChannelMismatch { got: st.channels(), expect: kernel.c_in });
    }
    let neighbors = subm_neighbors(st, kernel.k);
    let mut out = vec![0.0; st.len() * kernel.c_out];
    subm_fwd(
        st.feats(),
        st.len(),
        kernel.c_in,
        &neighbors,
        kernel.k * kernel.k,
        &kernel.weights,
        &kernel.bias,
        kernel.c_out,
        &mut out,
    );
    Ok(st.with_feats(out, kernel.c_out)?)
}

/// Per-site affine map over a sparse tensor; requires k = 1.
pub fn pointwise_conv_sparse(st: &SparseTensor, kernel: &ConvKernel) -> Result<SparseTensor, NnError> {
    if kernel.k != 1 {
        return Err(NnError::NotPointwise(kernel.k));
    }
    if st.channels() != kernel.c_in {
        return Err(NnError::ChannelMismatch { got: st.channels(), expect: kernel.c_in });
    }
    let mut out = vec![0.0; st.len() * kernel.c_out];
    linear_fwd(st.feats(), st.len(), kernel.c_in, &kernel.weights, &kernel.bias, kernel.c_out, &mut out);
    Ok(st.with_feats(out, kernel.c_out)?)
}

/// Per-cell affine map over a dense grid; requires k = 1.
pub fn pointwise_conv_dense(grid: &DenseGrid, kernel: &ConvKernel) -> Result<DenseGrid, NnError> {
    if kernel.k != 1 {
        return Err(NnError::NotPointwise(kernel.k));
    }
    if grid.c != kernel.c_in {
        return Err(NnError::ChannelMismatch { got: grid.c, expect: kernel.c_in });
    }
    let mut out = vec![0.0; grid.h * grid.w * kernel.c_out];
    linear_fwd(&grid.data, grid.h * grid.w, kernel.c_in, &kernel.weights, &kernel.bias, kernel.c_out, &mut out);
    Ok(DenseGrid::from_data(grid.h, grid.w, kernel.c_out, out))
}

/// Zero-padded same-size dense convolution, stride 1.
pub fn dense_conv2d(grid: &DenseGrid, kernel: &ConvKernel) -> Result<DenseGrid, NnError> {
    if grid.c != kernel.c_in {
        return Err(NnError::ChannelMismatch { got: grid.c, expect: kernel.c_in });
    }
    let mut out = vec![0.0; grid.h * grid.w * kernel.c_out];
    conv2d_fwd(&grid.data, grid.h, grid.w, kernel.c_in, &kernel.weights, kernel.k, &kernel.bias, kernel.c_out, &mut out);
    Ok(DenseGrid::from_data(grid.h, grid.w, kernel.c_out, out))
}

pub fn gelu_dense(grid: &DenseGrid) -> DenseGrid {
    DenseGrid::from_data(grid.h, grid.w, grid.c, grid.data.iter().map(|&v| gelu(v)).collect())
}

pub fn gelu_sparse(st: &SparseTensor) -> SparseTensor {
    st.with_feats(st.feats().iter().map(|&v| gelu(v)).collect(), st.channels()).expect("same length")
}

pub fn sigmoid_dense(grid: &DenseGrid) -> DenseGrid {
    DenseGrid::from_data(grid.h, grid.w, grid.c, grid.data.iter().map(|&v| sigmoid(v)).collect())
}

/// Per-channel scale and shift: `out = gamma (.) x + beta` at every cell.
/// No cross-cell mixing: positional identities are untouched.
pub fn scale_shift(grid: &DenseGrid, gamma: &[f64], beta: &[f64]) -> Result<DenseGrid, NnError> {
    if gamma.len() != grid.c || beta.len() != grid.c {
        return Err(NnError::ChannelMismatch { got: gamma.len().max(beta.len()), expect: grid.c });
    }
    let mut out = Vec::with_capacity(grid.data.len());
    for cell in grid.data.chunks_exact(grid.c) {
        for c in 0..grid.c {
            out.push(gamma[c] * cell[c] + beta[c]);
        }
    }
    Ok(DenseGrid::from_data(grid.h, grid.w, grid.c, out))
}

pub fn residual_add_dense(a: &DenseGrid, b: &DenseGrid) -> Result<DenseGrid, NnError> {
    if (a.h, a.w, a.c) != (b.h, b.w, b.c) {
        return Err(NnError::Shape(format!("{}x{}x{} vs {}x{}x{}", a.h, a.w, a.c, b.h, b.w, b.c)));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(DenseGrid::from_data(a.h, a.w, a.c, data))
}

/// Elementwise sum of two sparse tensors over the same coordinate list (in
/// the same slot order).
pub fn residual_add_sparse(a: &SparseTensor, b: &SparseTensor) -> Result<SparseTensor, NnError> {
    if a.channels() != b.channels() || a.coords() != b.coords() {
        return Err(NnError::Shape("sparse operands must share the coordinate list".into()));
    }
    let data = a.feats().iter().zip(b.feats()).map(|(x, y)| x + y).collect();
    Ok(a.with_feats(data, a.channels())?)
}

/// Normalizes each channel to zero mean / unit variance over spatial
/// positions, then applies a learnable per-channel affine.
pub fn channel_norm(grid: &DenseGrid, gamma: &[f64], beta: &[f64]) -> Result<DenseGrid, NnError> {
    if gamma.len() != grid.c || beta.len() != grid.c {
        return Err(NnError::ChannelMismatch { got: gamma.len().max(beta.len()), expect: grid.c });
    }
    let mut out = vec![0.0; grid.data.len()];
    channel_norm_fwd(&grid.data, grid.h * grid.w, grid.c, gamma, beta, &mut out, None);
    Ok(DenseGrid::from_data(grid.h, grid.w, grid.c, out))
}

/// Shared forward; optionally records (mean, inv_std) per channel.
fn channel_norm_fwd(x: &[f64], n: usize, c: usize, gamma: &[f64], beta: &[f64], out: &mut [f64], mut stats: Option<&mut Vec<(f64, f64)>>) {
    for ch in 0..c {
        let mut sum = 0.0;
        for i in 0..n {
            sum += x[i * c + ch];
        }
        let mean = sum / n as f64;
        let mut var = 0.0;
        for i in 0..n {
            let d = x[i * c + ch] - mean;
            var += d * d;
        }
        var /= n as f64;
        let inv = 1.0 / (var + CHANNEL_NORM_EPS).sqrt();
        for i in 0..n {
            out[i * c + ch] = gamma[ch] * ((x[i * c + ch] - mean) * inv) + beta[ch];
        }
        if let Some(s) = stats.as_deref_mut() {
            s.push((mean, inv));
        }
    }
}

// ---------------------------------------------------------------------------
// Tape ops.
// ---------------------------------------------------------------------------

fn shape_err(op: &'static str, detail: String) -> AdError {
    AdError::ShapeMismatch { op, detail }
}

/// inputs: x [rows.., C_in], w [C_in, C_out], b [C_out].
pub struct LinearOp;

impl TapeOp for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AdError> {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let [c_in, c_out] = w.shape() else {
            return Err(shape_err("linear", format!("weight rank {:?}", w.shape())));
        };
        let (c_in, c_out) = (*c_in, *c_out);
        let last = *x.shape().last().ok_or_else(|| shape_err("linear", "rank-0 input".into()))?;
        if last != c_in || b.numel() != c_out {
            return Err(shape_err("linear", format!("x {:?} w {:?} b {:?}", x.shape(), w.shape(), b.shape())));
        }
        let rows = x.numel() / c_in;
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().unwrap() = c_out;
        let mut out = vec![0.0; rows * c_out];
        linear_fwd(x.data(), rows, c_in, w.data(), b.data(), c_out, &mut out);
        Ok(Tensor::new(out_shape, out))
    }
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, gout: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let c_in = w.shape()[0];
        let c_out = w.shape()[1];
        let rows = x.numel() / c_in;
        let mut dx = vec![0.0; x.numel()];
        let mut dw = vec![0.0; w.numel()];
        let mut db = vec![0.0; c_out];
        linear_bwd(x.data(), rows, c_in, w.data(), c_out, gout.data(), &mut dx, &mut dw, &mut db);
        Ok(vec![
            Some(Tensor::new(x.shape().to_vec(), dx)),
            Some(Tensor::new(w.shape().to_vec(), dw)),
            Some(Tensor::new(b.shape().to_vec(), db)),
        ])
    }
}

/// inputs: x [H, W, C_in], w [k, k, C_in, C_out], b [C_out].
pub struct Conv2dOp;

impl TapeOp for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AdError> {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let [h, wd, c_in] = x.shape() else {
            return Err(shape_err("conv2d", format!("input rank {:?}", x.shape())));
        };
        let [k, k2, wc_in, c_out] = w.shape() else {
            return Err(shape_err("conv2d", format!("weight rank {:?}", w.shape())));
        };
        if k != k2 || wc_in != c_in || b.numel() != *c_out || k % 2 == 0 {
            return Err(shape_err("conv2d", format!("x {:?} w {:?} b {:?}", x.shape(), w.shape(), b.shape())));
        }
        let (h, wd, c_in, k, c_out) = (*h, *wd, *c_in, *k, *c_out);
        let mut out = vec![0.0; h * wd * c_out];
        conv2d_fwd(x.data(), h, wd, c_in, w.data(), k, b.data(), c_out, &mut out);
        Ok(Tensor::new(vec![h, wd, c_out], out))
    }
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, gout: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let (h, wd, c_in) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (k, c_out) = (w.shape()[0], w.shape()[3]);
        let mut dx = vec![0.0; x.numel()];
        let mut dw = vec![0.0; w.numel()];
        let mut db = vec![0.0; c_out];
        conv2d_bwd(x.data(), h, wd, c_in, w.data(), k, c_out, gout.data(), &mut dx, &mut dw, &mut db);
        Ok(vec![
            Some(Tensor::new(x.shape().to_vec(), dx)),
            Some(Tensor::new(w.shape().to_vec(), dw)),
            Some(Tensor::new(b.shape().to_vec(), db)),
        ])
    }
}

/// inputs: x [N, C_in], w [k, k, C_in, C_out], b [C_out]. The neighbor
/// table freezes the occupancy pattern, so the output coordinate set is the
/// input coordinate set by construction.
pub struct SubmConvOp {
    pub neighbors: Vec<i64>,
    pub k: usize,
}

impl TapeOp for SubmConvOp {
    fn name(&self) -> &'static str {
        "subm_conv"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AdError> {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let [n, c_in] = x.shape() else {
            return Err(shape_err("subm_conv", format!("input rank {:?}", x.shape())));
        };
        let (n, c_in) = (*n, *c_in);
        let (k, c_out) = (w.shape()[0], w.shape()[3]);
        if k != self.k || w.shape()[2] != c_in || self.neighbors.len() != n * k * k || b.numel() != c_out {
            return Err(shape_err("subm_conv", format!("x {:?} w {:?}", x.shape(), w.shape())));
        }
        let mut out = vec![0.0; n * c_out];
        subm_fwd(x.data(), n, c_in, &self.neighbors, k * k, w.data(), b.data(), c_out, &mut out);
        Ok(Tensor::new(vec![n, c_out], out))
    }
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, gout: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let (n, c_in) = (x.shape()[0], x.shape()[1]);
        let (k, c_out) = (w.shape()[0], w.shape()[3]);
        let mut dx = vec![0.0; x.numel()];
        let mut dw = vec![0.0; w.numel()];
        let mut db = vec![0.0; c_out];
        subm_bwd(x.data(), n, c_in, &self.neighbors, k * k, w.data(), c_out, gout.data(), &mut dx, &mut dw, &mut db);
        Ok(vec![
            Some(Tensor::new(x.shape().to_vec(), dx)),
            Some(Tensor::new(w.shape().to_vec(), dw)),
            Some(Tensor::new(b.shape().to_vec(), db)),
        ])
    }
}

pub struct GeluOp;

impl TapeOp for GeluOp {
    fn name(&self) -> &'static str {
        "gelu"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AdError> {
        let x = inputs[0];
        Ok(Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| gelu(v)).collect()))
    }
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, gout: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let x = inputs[0];
        let dx = x.data().iter().zip(gout.data()).map(|(&v, &g)| g * gelu_grad(v)).collect();
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), dx))])
    }
}

pub struct SigmoidOp;

impl TapeOp for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AdError> {
        let x = inputs[0];
        Ok(Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| sigmoid(v)).collect()))
    }
    fn backward(&self, _inputs: &[&Tensor], out: &Tensor, gout: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let dx = out.data().iter().zip(gout.data()).map(|(&s, &g)| g * s * (1.0 - s)).collect();
        Ok(vec![Some(Tensor::new(out.shape().to_vec(), dx))])
    }
}

/// inputs: x [.., C], gamma [C], beta [C].
pub struct ScaleShiftOp;

impl TapeOp for ScaleShiftOp {
    fn name(&self) -> &'static str {
        "scale_shift"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AdError> {
        let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
        let c = *x.shape().last().ok_or_else(|| shape_err("scale_shift", "rank-0 input".into()))?;
        if gamma.numel() != c || beta.numel() != c {
            return Err(shape_err("scale_shift", format!("x {:?} gamma {:?}", x.shape(), gamma.shape())));
        }
        let g = gamma.data();
        let bt = beta.data();
        let mut out = Vec::with_capacity(x.numel());
        for cell in x.data().chunks_exact(c) {
            for i in 0..c {
                out.push(g[i] * cell[i] + bt[i]);
            }
        }
        Ok(Tensor::new(x.shape().to_vec(), out))
    }
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, gout: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let c = *x.shape().last().unwrap();
        let g = gamma.data();
        let mut dx = Vec::with_capacity(x.numel());
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (cell, gr) in x.data().chunks_exact(c).zip(gout.data().chunks_exact(c)) {
            for i in 0..c {
                dx.push(gr[i] * g[i]);
                dgamma[i] += gr[i] * cell[i];
                dbeta[i] += gr[i];
            }
        }
        Ok(vec![
            Some(Tensor::new(x.shape().to_vec(), dx)),
            Some(Tensor::new(vec![c], dgamma)),
            Some(Tensor::new(vec![c], dbeta)),
        ])
    }
}

/// inputs: x [H, W, C], gamma [C], beta [C]. Instance-style: statistics per
/// channel over the spatial positions of this single map.
pub struct ChannelNormOp;

impl TapeOp for ChannelNormOp {
    fn name(&self) -> &'static str {
        "channel_norm"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AdError> {
        let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
        let [h, w, c] = x.shape() else {
            return Err(shape_err("channel_norm", format!("input rank {:?}", x.shape())));
        };
        if gamma.numel() != *c || beta.numel() != *c {
            return Err(shape_err("channel_norm", "affine length".into()));
        }
        let mut out = vec![0.0; x.numel()];
        channel_norm_fwd(x.data(), h * w, *c, gamma.data(), beta.data(), &mut out, None);
        Ok(Tensor::new(x.shape().to_vec(), out))
    }
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, gout: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let n = h * w;
        let nf = n as f64;
        let xd = x.data();
        let gd = gout.data();
        let mut dx = vec![0.0; x.numel()];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0;
            for i in 0..n {
                sum += xd[i * c + ch];
            }
            let mean = sum / nf;
            let mut var = 0.0;
            for i in 0..n {
                let d = xd[i * c + ch] - mean;
                var += d * d;
            }
            var /= nf;
            let inv = 1.0 / (var + CHANNEL_NORM_EPS).sqrt();
            // dxhat = g * gamma; dx = inv (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
            let gam = gamma.data()[ch];
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for i in 0..n {
                let xhat = (xd[i * c + ch] - mean) * inv;
                let dxh = gd[i * c + ch] * gam;
                s1 += dxh;
                s2 += dxh * xhat;
                dgamma[ch] += gd[i * c + ch] * xhat;
                dbeta[ch] += gd[i * c + ch];
            }
            s1 /= nf;
            s2 /= nf;
            for i in 0..n {
                let xhat = (xd[i * c + ch] - mean) * inv;
                let dxh = gd[i * c + ch] * gam;
                dx[i * c + ch] = inv * (dxh - s1 - xhat * s2);
            }
        }
        Ok(vec![
            Some(Tensor::new(x.shape().to_vec(), dx)),
            Some(Tensor::new(vec![c], dgamma)),
            Some(Tensor::new(beta.shape().to_vec(), dbeta)),
        ])
    }
}

pub struct AddOp;

impl TapeOp for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AdError> {
        let (a, b) = (inputs[0], inputs[1]);
        if a.shape() != b.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        Ok(Tensor::new(a.shape().to_vec(), data))
    }
    fn backward(&self, _inputs: &[&Tensor], _out: &Tensor, gout: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        Ok(vec![Some(gout.clone()), Some(gout.clone())])
    }
}

pub struct ScaleOp(pub f64);

impl TapeOp for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AdError> {
        let x = inputs[0];
        Ok(Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| self.0 * v).collect()))
    }
    fn backward(&self, _inputs: &[&Tensor], _out: &Tensor, gout: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        Ok(vec![Some(Tensor::new(gout.shape().to_vec(), gout.data().iter().map(|v| self.0 * v).collect()))])
    }
}

/// Concatenates two tensors along the last (channel) dimension.
pub struct ConcatChannelsOp;

impl TapeOp for ConcatChannelsOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AdError> {
        let (a, b) = (inputs[0], inputs[1]);
        let (ca, cb) = (*a.shape().last().unwrap(), *b.shape().last().unwrap());
        if a.shape()[..a.shape().len() - 1] != b.shape()[..b.shape().len() - 1] {
            return Err(shape_err("concat_channels", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let rows = a.numel() / ca;
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&a.data()[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&b.data()[r * cb..(r + 1) * cb]);
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        Ok(Tensor::new(shape, out))
    }
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, gout: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let (a, b) = (inputs[0], inputs[1]);
        let (ca, cb) = (*a.shape().last().unwrap(), *b.shape().last().unwrap());
        let rows = a.numel() / ca;
        let mut da = Vec::with_capacity(a.numel());
        let mut db = Vec::with_capacity(b.numel());
        for r in 0..rows {
            let g = &gout.data()[r * (ca + cb)..(r + 1) * (ca + cb)];
            da.extend_from_slice(&g[..ca]);
            db.extend_from_slice(&g[ca..]);
        }
        Ok(vec![Some(Tensor::new(a.shape().to_vec(), da)), Some(Tensor::new(b.shape().to_vec(), db))])
    }
}

/// Scatters sparse site features onto a dense [H, W, C] grid (zeros
/// elsewhere). `cells[site]` is the flat cell index `row * W + col`.
pub struct ScatterOp {
    pub cells: Vec<usize>,
    pub h: usize,
    pub w: usize,
}

impl TapeOp for ScatterOp {
    fn name(&self) -> &'static str {
        "scatter"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AdError> {
        let x = inputs[0];
        let [n, c] = x.shape() else {
            return Err(shape_err("scatter", format!("input rank {:?}", x.shape())));
        };
        if *n != self.cells.len() {
            return Err(shape_err("scatter", "cell table length".into()));
        }
        let mut out = vec![0.0; self.h * self.w * c];
        for (site, &cell) in self.cells.iter().enumerate() {
            out[cell * c..(cell + 1) * c].copy_from_slice(&x.data()[site * c..(site + 1) * c]);
        }
        Ok(Tensor::new(vec![self.h, self.w, *c], out))
    }
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, gout: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let x = inputs[0];
        let c = x.shape()[1];
        let mut dx = vec![0.0; x.numel()];
        for (site, &cell) in self.cells.iter().enumerate() {
            dx[site * c..(site + 1) * c].copy_from_slice(&gout.data()[cell * c..(cell + 1) * c]);
        }
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), dx))])
    }
}

/// Nearest-neighbor resampling of a dense grid: output cell j reads input
/// cell `map[j]`, or zero when `map[j] < 0`. Backward scatter-adds.
pub struct GatherCellsOp {
    pub map: Vec<i64>,
    pub out_h: usize,
    pub out_w: usize,
}

impl TapeOp for GatherCellsOp {
    fn name(&self) -> &'static str {
        "gather_cells"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AdError> {
        let x = inputs[0];
        let [h, w, c] = x.shape() else {
            return Err(shape_err("gather_cells", format!("input rank {:?}", x.shape())));
        };
        if self.map.len() != self.out_h * self.out_w {
            return Err(shape_err("gather_cells", "map length".into()));
        }
        let n_in = h * w;
        let mut out = vec![0.0; self.map.len() * c];
        for (j, &src) in self.map.iter().enumerate() {
            if src >= 0 {
                let s = src as usize;
                debug_assert!(s < n_in);
                out[j * c..(j + 1) * c].copy_from_slice(&x.data()[s * c..(s + 1) * c]);
            }
        }
        Ok(Tensor::new(vec![self.out_h, self.out_w, *c], out))
    }
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, gout: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let x = inputs[0];
        let c = x.shape()[2];
        let mut dx = vec![0.0; x.numel()];
        for (j, &src) in self.map.iter().enumerate() {
            if src >= 0 {
                let s = src as usize;
                for ch in 0..c {
                    dx[s * c + ch] += gout.data()[j * c + ch];
                }
            }
        }
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), dx))])
    }
}

/// Scalar sum of all elements.
pub struct SumAllOp;

impl TapeOp for SumAllOp {
    fn name(&self) -> &'static str {
        "sum_all"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AdError> {
        Ok(Tensor::scalar(inputs[0].data().iter().sum()))
    }
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, gout: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let g = gout.item();
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), vec![g; inputs[0].numel()]))])
    }
}

/// Scalar read-out `sum(x .* v)` against a fixed vector; a directionally
/// informative alternative to `SumAllOp` for gradient checks.
pub struct DotReadoutOp(pub Vec<f64>);

impl TapeOp for DotReadoutOp {
    fn name(&self) -> &'static str {
        "dot_readout"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AdError> {
        let x = inputs[0];
        if x.numel() != self.0.len() {
            return Err(shape_err("dot_readout", format!("{} vs {}", x.numel(), self.0.len())));
        }
        Ok(Tensor::scalar(dot(x.data(), &self.0)))
    }
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, gout: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let g = gout.item();
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), self.0.iter().map(|v| g * v).collect()))])
    }
}
