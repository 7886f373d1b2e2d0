//! Dense row-major `f64` tensors and the raw numeric kernels behind every
//! differentiable op.
//!
//! A [`Tensor`] is an immutable value: the payload sits behind an `Arc`, so
//! clones are cheap and tensors can be sent between threads freely. All
//! tracking of gradients lives in [`crate::autodiff`].

use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Sentinel in gather/scatter index maps meaning "no source, emit zero".
pub const NO_SOURCE: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("dims {dims:?} hold {n} values but {} were given", data.len()),
            ));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor {
            dims,
            data: Arc::new(data),
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, 1.0)
    }

    pub fn full(dims: &[usize], v: f64) -> Self {
        let n = dims.iter().product();
        Tensor::from_parts(dims.to_vec(), vec![v; n])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_parts(vec![1], vec![v])
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = dims.iter().product();
        Tensor::from_parts(dims.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Mutable access to the payload, copying it first if it is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::shape("item", &self.dims, &[1]));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        if dims.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", &self.dims, dims));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn slice0(&self, start: usize, len: usize) -> Result<Tensor> {
        let lead = *self.dims.first().unwrap_or(&0);
        if start + len > lead {
            return Err(Error::invalid(
                "slice0",
                format!("rows {start}..{} out of range for {:?}", start + len, self.dims),
            ));
        }
        let row = self.numel() / lead.max(1);
        let mut dims = self.dims.clone();
        dims[0] = len;
        Ok(Tensor::from_parts(
            dims,
            self.data[start * row..(start + len) * row].to_vec(),
        ))
    }

    /// Gathers rows along the leading axis.
    pub fn select0(&self, rows: &[usize]) -> Result<Tensor> {
        let lead = *self.dims.first().unwrap_or(&0);
        let row = self.numel() / lead.max(1);
        let mut out = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            if r >= lead {
                return Err(Error::invalid(
                    "select0",
                    format!("row {r} out of range for {:?}", self.dims),
                ));
            }
            out.extend_from_slice(&self.data[r * row..(r + 1) * row]);
        }
        let mut dims = self.dims.clone();
        dims[0] = rows.len();
        Ok(Tensor::from_parts(dims, out))
    }

    /// Concatenates along the leading axis.
    pub fn concat0(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat0", "no tensors given"))?;
        let tail = &first.dims[1..];
        let mut lead = 0;
        let mut out = Vec::new();
        for p in parts {
            if &p.dims[1..] != tail {
                return Err(Error::shape("concat0", &first.dims, &p.dims));
            }
            lead += p.dims[0];
            out.extend_from_slice(&p.data);
        }
        let mut dims = first.dims.clone();
        dims[0] = lead;
        Ok(Tensor::from_parts(dims, out))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(Error::shape(op, &self.dims, &other.dims));
        }
        Ok(Tensor::from_parts(
            self.dims.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }
}

pub(crate) fn check_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.dims.len() != rank {
        return Err(Error::invalid(
            op,
            format!("expected a rank-{rank} tensor, got dims {:?}", t.dims),
        ));
    }
    Ok(())
}

/// `(m, k) x (k, n) -> (m, n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_rank("matmul", a, 2)?;
    check_rank("matmul", b, 2)?;
    let (m, k) = (a.dims[0], a.dims[1]);
    let (k2, n) = (b.dims[0], b.dims[1]);
    if k != k2 {
        return Err(Error::shape("matmul", &a.dims, &b.dims));
    }
    let mut out = vec![0.0; m * n];
    gemm_nn(m, k, n, &a.data, &b.data, &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose2(a: &Tensor) -> Result<Tensor> {
    check_rank("transpose", a, 2)?;
    let (m, n) = (a.dims[0], a.dims[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Broadcasts a length-`k` vector into `outer x k x inner` (viewed as `out_dims`).
pub fn expand_mid(v: &Tensor, outer: usize, inner: usize, out_dims: &[usize]) -> Result<Tensor> {
    let k = v.numel();
    if outer * k * inner != out_dims.iter().product::<usize>() {
        return Err(Error::shape("expand", &v.dims, out_dims));
    }
    let mut out = Vec::with_capacity(outer * k * inner);
    for _ in 0..outer {
        for &x in v.data.iter() {
            out.extend(std::iter::repeat_n(x, inner));
        }
    }
    Ok(Tensor::from_parts(out_dims.to_vec(), out))
}

/// Sums an `outer x k x inner` view down to the middle axis, giving `out_dims` (k values).
pub fn reduce_mid(x: &Tensor, outer: usize, inner: usize, out_dims: &[usize]) -> Result<Tensor> {
    let k: usize = out_dims.iter().product();
    if outer * k * inner != x.numel() {
        return Err(Error::shape("reduce", &x.dims, out_dims));
    }
    let mut out = vec![0.0; k];
    for o in 0..outer {
        for (j, acc) in out.iter_mut().enumerate() {
            let base = (o * k + j) * inner;
            *acc += x.data[base..base + inner].iter().sum::<f64>();
        }
    }
    Ok(Tensor::from_parts(out_dims.to_vec(), out))
}

/// Geometry of a 2-d convolution over NCHW inputs with OIHW weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        let padded = input + 2 * self.pad;
        if self.stride == 0 || padded < kernel {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "kernel {kernel} does not fit input {input} with pad {} stride {}",
                    self.pad, self.stride
                ),
            ));
        }
        Ok((padded - kernel) / self.stride + 1)
    }

    /// Output columns `lo..hi` whose input column `o*stride + k - pad` lies in `0..input`.
    fn valid_range(&self, k: usize, input: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let k = k as isize;
        // o*s + k - p >= 0  =>  o >= ceil((p - k) / s)
        let lo = if p - k <= 0 { 0 } else { (p - k + s - 1) / s };
        // o*s + k - p <= input - 1  =>  o <= floor((input - 1 + p - k) / s)
        let top = input as isize - 1 + p - k;
        let hi = if top < 0 { 0 } else { top / s + 1 };
        let lo = lo.clamp(0, out as isize) as usize;
        let hi = hi.clamp(0, out as isize) as usize;
        (lo, hi.max(lo))
    }
}

fn conv_dims(x: &[usize], w: &[usize]) -> Result<()> {
    if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
        return Err(Error::shape("conv2d", x, w));
    }
    Ok(())
}

/// `x (n, ci, h, w) * weight (co, ci, kh, kw) -> (n, co, ho, wo)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, geom: ConvGeom) -> Result<Tensor> {
    conv_dims(&x.dims, &weight.dims)?;
    let [n, ci, h, w] = [x.dims[0], x.dims[1], x.dims[2], x.dims[3]];
    let [co, _, kh, kw] = [weight.dims[0], weight.dims[1], weight.dims[2], weight.dims[3]];
    let ho = geom.out_extent(h, kh)?;
    let wo = geom.out_extent(w, kw)?;
    let cols = im2col(&x.data, [n, ci, h, w], (kh, kw), (ho, wo), geom);
    let cols_n = n * ho * wo;
    let mut mat = vec![0.0; co * cols_n];
    gemm_nn(co, ci * kh * kw, cols_n, &weight.data, &cols, &mut mat);
    Ok(Tensor::from_parts(vec![n, co, ho, wo], channel_major_to_batch(&mat, n, co, ho * wo)))
}

/// Adjoint of [`conv2d`] in its input: `g (n, co, ho, wo)` back to `(n, ci, h, w)`.
pub fn conv2d_input_grad(g: &Tensor, weight: &Tensor, in_hw: (usize, usize), geom: ConvGeom) -> Result<Tensor> {
    if g.dims.len() != 4 || weight.dims.len() != 4 || g.dims[1] != weight.dims[0] {
        return Err(Error::shape("conv2d_input_grad", &g.dims, &weight.dims));
    }
    let [n, co, ho, wo] = [g.dims[0], g.dims[1], g.dims[2], g.dims[3]];
    let [_, ci, kh, kw] = [weight.dims[0], weight.dims[1], weight.dims[2], weight.dims[3]];
    let (h, w) = in_hw;
    if geom.out_extent(h, kh)? != ho || geom.out_extent(w, kw)? != wo {
        return Err(Error::shape("conv2d_input_grad", &g.dims, &[n, ci, h, w]));
    }
    let rows = ci * kh * kw;
    let cols_n = n * ho * wo;
    let gm = batch_to_channel_major(&g.data, n, co, ho * wo);
    let wt = transpose2(&weight.reshape(&[co, rows])?)?;
    let mut cols = vec![0.0; rows * cols_n];
    gemm_nn(rows, co, cols_n, &wt.data, &gm, &mut cols);
    Ok(Tensor::from_parts(vec![n, ci, h, w], col2im(&cols, [n, ci, h, w], (kh, kw), (ho, wo), geom)))
}

/// Adjoint of [`conv2d`] in its weight: correlates `x` with `g` into `(co, ci, kh, kw)`.
pub fn conv2d_weight_grad(x: &Tensor, g: &Tensor, kernel: (usize, usize), geom: ConvGeom) -> Result<Tensor> {
    if x.dims.len() != 4 || g.dims.len() != 4 || x.dims[0] != g.dims[0] {
        return Err(Error::shape("conv2d_weight_grad", &x.dims, &g.dims));
    }
    let [n, ci, h, w] = [x.dims[0], x.dims[1], x.dims[2], x.dims[3]];
    let [_, co, ho, wo] = [g.dims[0], g.dims[1], g.dims[2], g.dims[3]];
    let (kh, kw) = kernel;
    if geom.out_extent(h, kh)? != ho || geom.out_extent(w, kw)? != wo {
        return Err(Error::shape("conv2d_weight_grad", &x.dims, &g.dims));
    }
    let rows = ci * kh * kw;
    let cols_n = n * ho * wo;
    let cols = im2col(&x.data, [n, ci, h, w], (kh, kw), (ho, wo), geom);
    let gm = batch_to_channel_major(&g.data, n, co, ho * wo);
    let cols_t = transpose_raw(&cols, rows, cols_n);
    let mut out = vec![0.0; co * rows];
    gemm_nn(co, cols_n, rows, &gm, &cols_t, &mut out);
    Ok(Tensor::from_parts(vec![co, ci, kh, kw], out))
}

/// Unfolds `x` into a `(ci*kh*kw, n*ho*wo)` matrix; out-of-bounds taps are zero.
fn im2col(x: &[f64], [n, ci, h, w]: [usize; 4], (kh, kw): (usize, usize), (ho, wo): (usize, usize), geom: ConvGeom) -> Vec<f64> {
    let cols_n = n * ho * wo;
    let mut cols = vec![0.0; ci * kh * kw * cols_n];
    let s = geom.stride;
    for ic in 0..ci {
        for ky in 0..kh {
            let (oy_lo, oy_hi) = geom.valid_range(ky, h, ho);
            for kx in 0..kw {
                let (ox_lo, ox_hi) = geom.valid_range(kx, w, wo);
                let row = &mut cols[((ic * kh + ky) * kw + kx) * cols_n..][..cols_n];
                for b in 0..n {
                    let plane = &x[(b * ci + ic) * h * w..][..h * w];
                    let dst = &mut row[b * ho * wo..][..ho * wo];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - geom.pad;
                        let d = &mut dst[oy * wo + ox_lo..oy * wo + ox_hi];
                        let x0 = iy * w + ox_lo * s + kx - geom.pad;
                        if s == 1 {
                            d.copy_from_slice(&plane[x0..x0 + d.len()]);
                        } else {
                            for (j, o) in d.iter_mut().enumerate() {
                                *o = plane[x0 + j * s];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates columns back into an NCHW buffer.
fn col2im(cols: &[f64], [n, ci, h, w]: [usize; 4], (kh, kw): (usize, usize), (ho, wo): (usize, usize), geom: ConvGeom) -> Vec<f64> {
    let cols_n = n * ho * wo;
    let mut x = vec![0.0; n * ci * h * w];
    let s = geom.stride;
    for ic in 0..ci {
        for ky in 0..kh {
            let (oy_lo, oy_hi) = geom.valid_range(ky, h, ho);
            for kx in 0..kw {
                let (ox_lo, ox_hi) = geom.valid_range(kx, w, wo);
                let row = &cols[((ic * kh + ky) * kw + kx) * cols_n..][..cols_n];
                for b in 0..n {
                    let plane = &mut x[(b * ci + ic) * h * w..][..h * w];
                    let src = &row[b * ho * wo..][..ho * wo];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - geom.pad;
                        let x0 = iy * w + ox_lo * s + kx - geom.pad;
                        for (j, &v) in src[oy * wo + ox_lo..oy * wo + ox_hi].iter().enumerate() {
                            plane[x0 + j * s] += v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// `(c, n, hw)` -> `(n, c, hw)`.
fn channel_major_to_batch(m: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c * hw];
    for ch in 0..c {
        for b in 0..n {
            out[(b * c + ch) * hw..][..hw].copy_from_slice(&m[(ch * n + b) * hw..][..hw]);
        }
    }
    out
}

/// `(n, c, hw)` -> `(c, n, hw)`.
fn batch_to_channel_major(x: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c * hw];
    for b in 0..n {
        for ch in 0..c {
            out[(ch * n + b) * hw..][..hw].copy_from_slice(&x[(b * c + ch) * hw..][..hw]);
        }
    }
    out
}

const MR: usize = 4;
const NR: usize = 8;

/// `out (m, n) += a (m, k) * b (k, n)`, all row-major.
fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature was detected at runtime.
            unsafe { gemm_nn_avx512(m, k, n, a, b, out) };
            return;
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { gemm_nn_avx2(m, k, n, a, b, out) };
            return;
        }
    }
    gemm_nn_generic(m, k, n, a, b, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn gemm_nn_avx512(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    gemm_nn_generic(m, k, n, a, b, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_nn_avx2(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    gemm_nn_generic(m, k, n, a, b, out);
}

#[inline(always)]
fn gemm_nn_generic(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    const KC: usize = 256;
    let (m_main, n_main) = (m - m % MR, n - n % NR);
    for p0 in (0..k).step_by(KC) {
        let ps = p0..(p0 + KC).min(k);
        for i in (0..m_main).step_by(MR) {
            for j in (0..n_main).step_by(NR) {
                let mut acc = [[0.0f64; NR]; MR];
                for p in ps.clone() {
                    let bv: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
                    for (r, row) in acc.iter_mut().enumerate() {
                        let av = a[(i + r) * k + p];
                        for l in 0..NR {
                            row[l] += av * bv[l];
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    for (o, v) in out[(i + r) * n + j..(i + r) * n + j + NR].iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
            if n_main < n {
                gemm_nn_tail(i..i + MR, n_main..n, ps.clone(), k, n, a, b, out);
            }
        }
        gemm_nn_tail(m_main..m, 0..n, ps, k, n, a, b, out);
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gemm_nn_tail(rows: Range<usize>, cols: Range<usize>, ps: Range<usize>, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in rows {
        let orow = &mut out[i * n + cols.start..i * n + cols.end];
        for p in ps.clone() {
            let av = a[i * k + p];
            for (o, &bv) in orow.iter_mut().zip(&b[p * n + cols.start..p * n + cols.end]) {
                *o += av * bv;
            }
        }
    }
}

/// Row-major `(m, n)` -> `(n, m)`, in cache-sized tiles.
fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    const TILE: usize = 32;
    let mut out = vec![0.0; m * n];
    for i0 in (0..m).step_by(TILE) {
        for j0 in (0..n).step_by(TILE) {
            for i in i0..(i0 + TILE).min(m) {
                for j in j0..(j0 + TILE).min(n) {
                    out[j * m + i] = a[i * n + j];
                }
            }
        }
    }
    out
}

fn group_rows(dims: &[usize], groups: usize) -> Result<(usize, usize)> {
    if dims.len() != 4 || groups == 0 || dims[1] % groups != 0 {
        return Err(Error::invalid("group_norm", format!("{groups} groups do not divide input {dims:?}")));
    }
    Ok((dims[0] * groups, dims[1] / groups * dims[2] * dims[3]))
}

fn row_inv_std(row: &[f64], eps: f64) -> (f64, f64) {
    let len = row.len() as f64;
    let mean = row.iter().sum::<f64>() / len;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Group normalization over NCHW without affine part: each group of
/// `c / groups` channels is shifted to mean 0 and scaled by `(var + eps)^-1/2`.
pub fn group_norm(x: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    let (_, len) = group_rows(&x.dims, groups)?;
    let mut out = vec![0.0; x.numel()];
    for (row, dst) in x.data.chunks(len).zip(out.chunks_mut(len)) {
        let (mean, s) = row_inv_std(row, eps);
        for (o, &v) in dst.iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
    }
    Ok(Tensor::from_parts(x.dims.clone(), out))
}

/// Adjoint of [`group_norm`] given its input `x`, output `y` and upstream `g`.
pub fn group_norm_grad(x: &Tensor, y: &Tensor, g: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    let (_, len) = group_rows(&x.dims, groups)?;
    if y.dims != x.dims || g.dims != x.dims {
        return Err(Error::shape("group_norm_grad", &x.dims, &g.dims));
    }
    let mut out = vec![0.0; x.numel()];
    let rows = x.data.chunks(len).zip(y.data.chunks(len)).zip(g.data.chunks(len));
    for (((xr, yr), gr), dst) in rows.zip(out.chunks_mut(len)) {
        let (_, s) = row_inv_std(xr, eps);
        let gm = gr.iter().sum::<f64>() / len as f64;
        let gym = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / len as f64;
        for ((o, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
            *o = s * (gv - gm - yv * gym);
        }
    }
    Ok(Tensor::from_parts(x.dims.clone(), out))
}

/// Non-overlapping `k x k` average pooling (stride `k`, no padding, floor).
pub fn avgpool2d(x: &Tensor, k: usize) -> Result<Tensor> {
    check_rank("avgpool2d", x, 4)?;
    let [n, c, h, w] = [x.dims[0], x.dims[1], x.dims[2], x.dims[3]];
    if k == 0 || h < k || w < k {
        return Err(Error::invalid("avgpool2d", format!("window {k} too large for {h}x{w}")));
    }
    let (ho, wo) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * ho * wo];
    for p in 0..n * c {
        let plane = &x.data[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho * k {
            let oy = y / k;
            for xx in 0..wo * k {
                op[oy * wo + xx / k] += plane[y * w + xx];
            }
        }
        op.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(Tensor::from_parts(vec![n, c, ho, wo], out))
}

/// Adjoint of [`avgpool2d`]: spreads each pooled value back over its window.
pub fn avgpool2d_t(g: &Tensor, k: usize, in_hw: (usize, usize)) -> Result<Tensor> {
    check_rank("avgpool2d_t", g, 4)?;
    let [n, c, ho, wo] = [g.dims[0], g.dims[1], g.dims[2], g.dims[3]];
    let (h, w) = in_hw;
    if k == 0 || h / k != ho || w / k != wo {
        return Err(Error::shape("avgpool2d_t", &g.dims, &[n, c, h, w]));
    }
    let scale = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let gp = &g.data[p * ho * wo..(p + 1) * ho * wo];
        let op = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..ho * k {
            for xx in 0..wo * k {
                op[y * w + xx] = gp[(y / k) * wo + xx / k] * scale;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h, w], out))
}

/// `out[i] = x[src[i]]`, or zero where `src[i] == NO_SOURCE`.
pub fn gather(x: &Tensor, src: &[u32], out_dims: &[usize]) -> Result<Tensor> {
    if src.len() != out_dims.iter().product::<usize>() {
        return Err(Error::shape("gather", &[src.len()], out_dims));
    }
    let n = x.numel();
    let mut out = Vec::with_capacity(src.len());
    for &s in src {
        out.push(if s == NO_SOURCE {
            0.0
        } else {
            let s = s as usize;
            if s >= n {
                return Err(Error::invalid("gather", format!("index {s} out of range {n}")));
            }
            x.data[s]
        });
    }
    Ok(Tensor::from_parts(out_dims.to_vec(), out))
}

/// Adjoint of [`gather`]: `out[src[i]] += g[i]`.
pub fn scatter_add(g: &Tensor, src: &[u32], in_dims: &[usize]) -> Result<Tensor> {
    if src.len() != g.numel() {
        return Err(Error::shape("scatter_add", &g.dims, &[src.len()]));
    }
    let n: usize = in_dims.iter().product();
    let mut out = vec![0.0; n];
    for (&s, &v) in src.iter().zip(g.data.iter()) {
        if s != NO_SOURCE {
            let s = s as usize;
            if s >= n {
                return Err(Error::invalid("scatter_add", format!("index {s} out of range {n}")));
            }
            out[s] += v;
        }
    }
    Ok(Tensor::from_parts(in_dims.to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
        let err = matmul(&b, &b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        assert!(err.to_string().contains("[2, 1]"));
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let x = Tensor::from_fn(&[2, 1, 5, 4], |i| (i as f64 * 0.37).sin());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = Tensor::new(&[1, 1, 3, 3], k).unwrap();
        let y = conv2d(&x, &w, ConvGeom { stride: 1, pad: 1 }).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn avgpool_of_ones() {
        let x = Tensor::ones(&[1, 1, 2, 2]);
        let y = avgpool2d(&x, 2).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[1.0]);
    }

    #[test]
    fn strided_conv_matches_naive() {
        let x = Tensor::from_fn(&[1, 2, 7, 6], |i| ((i * 7 + 3) % 11) as f64 - 5.0);
        let w = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 5 + 1) % 7) as f64 - 3.0);
        let geom = ConvGeom { stride: 2, pad: 1 };
        let y = conv2d(&x, &w, geom).unwrap();
        let (ho, wo) = (y.dims()[2], y.dims()[3]);
        for oc in 0..3 {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= 7 || ix >= 6 {
                                    continue;
                                }
                                acc += x.data()[(ic * 7 + iy as usize) * 6 + ix as usize]
                                    * w.data()[((oc * 2 + ic) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    assert_eq!(y.data()[(oc * ho + oy) * wo + ox], acc);
                }
            }
        }
    }

    #[test]
    fn conv_adjoints_satisfy_inner_product_identity() {
        // <conv(x, w), g> == <x, input_grad(g, w)> == <w, weight_grad(x, g)>
        let geom = ConvGeom { stride: 2, pad: 1 };
        let x = Tensor::from_fn(&[2, 3, 7, 5], |i| (i as f64 * 0.71).cos());
        let w = Tensor::from_fn(&[4, 3, 3, 3], |i| (i as f64 * 1.3).sin());
        let y = conv2d(&x, &w, geom).unwrap();
        let g = Tensor::from_fn(y.dims(), |i| (i as f64 * 0.19).sin());
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let gx = conv2d_input_grad(&g, &w, (7, 5), geom).unwrap();
        let gw = conv2d_weight_grad(&x, &g, (3, 3), geom).unwrap();
        let via_x: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        let via_w: f64 = w.data().iter().zip(gw.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }

    #[test]
    fn gather_scatter_are_adjoint() {
        let x = Tensor::from_fn(&[5], |i| i as f64 + 1.0);
        let src = [4, NO_SOURCE, 0, 0];
        let y = gather(&x, &src, &[4]).unwrap();
        assert_eq!(y.data(), &[5.0, 0.0, 1.0, 1.0]);
        let g = Tensor::ones(&[4]);
        assert_eq!(scatter_add(&g, &src, &[5]).unwrap().data(), &[2.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn expand_reduce_roundtrip_counts() {
        let v = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let e = expand_mid(&v, 2, 4, &[2, 3, 4]).unwrap();
        assert_eq!(e.data()[4..8], [2.0; 4]);
        let r = reduce_mid(&e, 2, 4, &[3]).unwrap();
        assert_eq!(r.data(), &[8.0, 16.0, 24.0]);
    }
}
