//! Forward and backward kernels on flat NHWC buffers.
//!
//! The tape calls these directly; the `Tensor`-level wrappers at the bottom
//! run a single op without recording anything.

use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

/// Slope of the negative half of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Upper bound on im2col buffer elements per chunk.
/// Target size of one im2col block, in elements; small enough to stay in
/// cache between unfolding and the matrix product.
const IM2COL_BLOCK: usize = 1 << 18;
const IM2COL_MIN_ROWS: usize = 256;

/// Shape bookkeeping for one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k: usize,
    pub out_c: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// `input` is `[H, W, C]` or `[N, H, W, C]`; `kernel` is `[k, k, Cin, Cout]`.
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (batch, in_h, in_w, in_c) = match *input {
            [h, w, c] => (1, h, w, c),
            [n, h, w, c] => (n, h, w, c),
            _ => return Err(Error::InvalidShape(format!("conv2d input must be rank 3 or 4, got {input:?}"))),
        };
        let [kh, kw, kc, out_c] = *kernel else {
            return Err(Error::InvalidShape(format!("conv2d kernel must be [k,k,Cin,Cout], got {kernel:?}")));
        };
        if kh != kw {
            return Err(Error::InvalidShape(format!("non-square kernel {kernel:?}")));
        }
        if kc != in_c {
            return Err(Error::InvalidShape(format!(
                "kernel expects {kc} input channels, input has {in_c}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidShape("stride must be >= 1".into()));
        }
        if kh > in_h + 2 * pad || kh > in_w + 2 * pad {
            return Err(Error::InvalidShape(format!(
                "kernel {kh} larger than padded input {in_h}x{in_w} (pad {pad})"
            )));
        }
        Ok(ConvGeom {
            batch,
            in_h,
            in_w,
            in_c,
            k: kh,
            out_c,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kh) / stride + 1,
            out_w: (in_w + 2 * pad - kh) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.in_c
    }

    fn rows_per_sample(&self) -> usize {
        self.out_h * self.out_w
    }

    fn total_rows(&self) -> usize {
        self.batch * self.rows_per_sample()
    }

    fn rows_per_block(&self) -> usize {
        (IM2COL_BLOCK / self.patch_len().max(1)).max(IM2COL_MIN_ROWS).min(self.total_rows())
    }

    pub fn output_shape(&self, batched: bool) -> Vec<usize> {
        if batched {
            vec![self.batch, self.out_h, self.out_w, self.out_c]
        } else {
            vec![self.out_h, self.out_w, self.out_c]
        }
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.in_h * self.in_w * self.in_c
    }
}

/// Visits output rows `rows` (global index `n * out_h * out_w + oy * out_w
/// + ox`) one kernel row at a time. For a fixed kernel row the in-bounds taps
/// read consecutive input pixels, so each visit is one contiguous span:
/// `f(block_row, patch_offset, input_offset, len)`.
fn for_each_span(g: &ConvGeom, rows: std::ops::Range<usize>, mut f: impl FnMut(usize, usize, usize, usize)) {
    let per_sample = g.rows_per_sample();
    let sample_len = g.in_h * g.in_w * g.in_c;
    let (k, pad) = (g.k as isize, g.pad as isize);
    for (local, row) in rows.enumerate() {
        let n = row / per_sample;
        let (oy, ox) = ((row % per_sample) / g.out_w, row % g.out_w);
        let x0 = (ox * g.stride) as isize - pad;
        let kx_lo = (-x0).max(0);
        let kx_hi = (g.in_w as isize - x0).min(k);
        if kx_lo >= kx_hi {
            continue;
        }
        let len = (kx_hi - kx_lo) as usize * g.in_c;
        for ky in 0..g.k {
            let iy = (oy * g.stride + ky) as isize - pad;
            if iy < 0 || iy >= g.in_h as isize {
                continue;
            }
            let src = n * sample_len + ((iy as usize) * g.in_w + (x0 + kx_lo) as usize) * g.in_c;
            f(local, (ky * g.k + kx_lo as usize) * g.in_c, src, len);
        }
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], rows: std::ops::Range<usize>, col: &mut Vec<T>) {
    let plen = g.patch_len();
    col.clear();
    col.resize(rows.len() * plen, T::zero());
    for_each_span(g, rows, |local, off, src, len| {
        let dst = local * plen + off;
        col[dst..dst + len].copy_from_slice(&x[src..src + len]);
    });
}

fn col2im_add<T: Scalar>(g: &ConvGeom, col: &[T], rows: std::ops::Range<usize>, dx: &mut [T]) {
    let plen = g.patch_len();
    for_each_span(g, rows, |local, off, dst, len| {
        let src = local * plen + off;
        dx[dst..dst + len].iter_mut().zip(&col[src..src + len]).for_each(|(a, &b)| *a += b);
    });
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let plen = g.patch_len();
    let total = g.total_rows();
    let mut out = vec![T::zero(); total * g.out_c];
    let mut col = Vec::new();
    let block = g.rows_per_block();
    let w = MatRef::new(kernel, plen, g.out_c);
    for r0 in (0..total).step_by(block) {
        let r1 = (r0 + block).min(total);
        im2col(g, x, r0..r1, &mut col);
        gemm(MatRef::new(&col, r1 - r0, plen), w, &mut out[r0 * g.out_c..r1 * g.out_c], false);
    }
    for px in out.chunks_exact_mut(g.out_c) {
        px.iter_mut().zip(bias).for_each(|(v, &b)| *v += b);
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    kernel: &[T],
    dout: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let (want_x, want_k, want_b) = want;
    let plen = g.patch_len();
    let mut dx = want_x.then(|| vec![T::zero(); g.input_len()]);
    let mut dk = want_k.then(|| vec![T::zero(); plen * g.out_c]);
    let db = want_b.then(|| {
        let mut db = vec![T::zero(); g.out_c];
        for px in dout.chunks_exact(g.out_c) {
            db.iter_mut().zip(px).for_each(|(a, &b)| *a += b);
        }
        db
    });
    if want_x || want_k {
        let total = g.total_rows();
        let block = g.rows_per_block();
        let mut col = Vec::new();
        let mut dcol = Vec::new();
        let w = MatRef::new(kernel, plen, g.out_c);
        for r0 in (0..total).step_by(block) {
            let r1 = (r0 + block).min(total);
            let dmat = MatRef::new(&dout[r0 * g.out_c..r1 * g.out_c], r1 - r0, g.out_c);
            if let Some(dk) = dk.as_mut() {
                im2col(g, x, r0..r1, &mut col);
                gemm(MatRef::new(&col, r1 - r0, plen).t(), dmat, dk, true);
            }
            if let Some(dx) = dx.as_mut() {
                dcol.clear();
                dcol.resize((r1 - r0) * plen, T::zero());
                gemm(dmat, w.t(), &mut dcol, false);
                col2im_add(g, &dcol, r0..r1, dx);
            }
        }
    }
    ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    }
}

/// Shape bookkeeping for a dense layer: `[n]` or `[N, n]` times `[n, m]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseGeom {
    pub batch: usize,
    pub inputs: usize,
    pub outputs: usize,
}

impl DenseGeom {
    pub fn new(input: &[usize], weights: &[usize], bias: &[usize]) -> Result<Self> {
        let (batch, inputs) = match *input {
            [n] => (1, n),
            [b, n] => (b, n),
            _ => return Err(Error::InvalidShape(format!("dense input must be rank 1 or 2, got {input:?}"))),
        };
        let [wn, wm] = *weights else {
            return Err(Error::InvalidShape(format!("dense weights must be [n, m], got {weights:?}")));
        };
        if wn != inputs {
            return Err(Error::InvalidShape(format!(
                "dense weights expect {wn} inputs, got {inputs}"
            )));
        }
        if bias != [wm] {
            return Err(Error::InvalidShape(format!("dense bias {bias:?} for {wm} outputs")));
        }
        Ok(DenseGeom {
            batch,
            inputs,
            outputs: wm,
        })
    }
}

pub(crate) fn dense_forward<T: Scalar>(g: &DenseGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.outputs];
    for row in out.chunks_exact_mut(g.outputs) {
        row.copy_from_slice(b);
    }
    gemm(
        MatRef::new(x, g.batch, g.inputs),
        MatRef::new(w, g.inputs, g.outputs),
        &mut out,
        true,
    );
    out
}

pub(crate) fn dense_backward<T: Scalar>(
    g: &DenseGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    want: (bool, bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let dmat = MatRef::new(dout, g.batch, g.outputs);
    let dx = want.0.then(|| {
        let mut dx = vec![T::zero(); g.batch * g.inputs];
        gemm(dmat, MatRef::new(w, g.inputs, g.outputs).t(), &mut dx, false);
        dx
    });
    let dw = want.1.then(|| {
        let mut dw = vec![T::zero(); g.inputs * g.outputs];
        gemm(MatRef::new(x, g.batch, g.inputs).t(), dmat, &mut dw, false);
        dw
    });
    let db = want.2.then(|| {
        let mut db = vec![T::zero(); g.outputs];
        for row in dout.chunks_exact(g.outputs) {
            db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
        }
        db
    });
    (dx, dw, db)
}

/// `[.., H, W, 4C] -> [.., 2H, 2W, C]`; output `(2i+dy, 2j+dx, c)` reads
/// input channel `(2*dy + dx) * C + c` of cell `(i, j)`.
pub fn pixel_shuffle_shape(shape: &[usize]) -> Result<Vec<usize>> {
    let (lead, h, w, c4) = match *shape {
        [h, w, c] => (None, h, w, c),
        [n, h, w, c] => (Some(n), h, w, c),
        _ => return Err(Error::InvalidShape(format!("pixel_shuffle input must be rank 3 or 4, got {shape:?}"))),
    };
    if c4 % 4 != 0 {
        return Err(Error::InvalidShape(format!("pixel_shuffle needs channels divisible by 4, got {c4}")));
    }
    let mut out: Vec<usize> = lead.into_iter().collect();
    out.extend([2 * h, 2 * w, c4 / 4]);
    Ok(out)
}

fn shuffle_dims(shape: &[usize]) -> (usize, usize, usize, usize) {
    match *shape {
        [h, w, c] => (1, h, w, c / 4),
        [n, h, w, c] => (n, h, w, c / 4),
        _ => unreachable!("validated by pixel_shuffle_shape"),
    }
}

/// Applies the depth-to-space permutation (`inverse == false`) or its inverse.
/// `shape` is always the low-resolution, 4C-channel shape.
pub(crate) fn pixel_shuffle_permute<T: Scalar>(shape: &[usize], src: &[T], inverse: bool) -> Vec<T> {
    let (n, h, w, c) = shuffle_dims(shape);
    let mut dst = vec![T::zero(); src.len()];
    let ow = 2 * w;
    for b in 0..n {
        let base = b * h * w * 4 * c;
        for i in 0..h {
            for j in 0..w {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let lo = base + (i * w + j) * 4 * c + (2 * dy + dx) * c;
                        let hi = base + ((2 * i + dy) * ow + 2 * j + dx) * c;
                        if inverse {
                            dst[lo..lo + c].copy_from_slice(&src[hi..hi + c]);
                        } else {
                            dst[hi..hi + c].copy_from_slice(&src[lo..lo + c]);
                        }
                    }
                }
            }
        }
    }
    dst
}

pub(crate) fn leaky_relu_value<T: Scalar>(v: T) -> T {
    let s = T::lit(LEAKY_SLOPE);
    if v > T::zero() {
        v
    } else {
        v * s
    }
}

pub(crate) fn leaky_relu_slope<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else {
        T::lit(LEAKY_SLOPE)
    }
}

pub(crate) fn sigmoid_value<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn l1_mean<T: Scalar>(pred: &[T], target: &[T]) -> T {
    let sum: T = pred.iter().zip(target).map(|(&p, &t)| (p - t).abs()).sum();
    sum / T::from_usize(pred.len()).unwrap()
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub(crate) fn l1_grad<T: Scalar>(pred: &[T], target: &[T], upstream: T) -> Vec<T> {
    let scale = upstream / T::from_usize(pred.len()).unwrap();
    pred.iter().zip(target).map(|(&p, &t)| sign(p - t) * scale).collect()
}

// Tensor-level conveniences, no tape.

pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>, bias: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), kernels.shape(), stride, pad)?;
    if bias.shape() != [g.out_c] {
        return Err(Error::InvalidShape(format!("conv2d bias {:?} for {} kernels", bias.shape(), g.out_c)));
    }
    let out = conv2d_forward(&g, input.data(), kernels.data(), bias.data());
    Tensor::new(&g.output_shape(input.shape().len() == 4), out)
}

pub fn fully_connected<T: Scalar>(x: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let g = DenseGeom::new(x.shape(), weights.shape(), bias.shape())?;
    let out = dense_forward(&g, x.data(), weights.data(), bias.data());
    let shape = if x.shape().len() == 2 { vec![g.batch, g.outputs] } else { vec![g.outputs] };
    Tensor::new(&shape, out)
}

pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = pixel_shuffle_shape(x.shape())?;
    Tensor::new(&shape, pixel_shuffle_permute(x.shape(), x.data(), false))
}

/// Inverse of [`pixel_shuffle`]: `[.., 2H, 2W, C] -> [.., H, W, 4C]`.
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut lo = x.shape().to_vec();
    let r = lo.len();
    if !(3..=4).contains(&r) || lo[r - 3] % 2 != 0 || lo[r - 2] % 2 != 0 {
        return Err(Error::InvalidShape(format!("pixel_unshuffle needs even spatial dims, got {lo:?}")));
    }
    lo[r - 3] /= 2;
    lo[r - 2] /= 2;
    lo[r - 1] *= 4;
    Tensor::new(&lo, pixel_shuffle_permute(&lo, x.data(), true))
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::new(x.shape(), x.data().iter().map(|&v| leaky_relu_value(v)).collect()).unwrap()
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::new(x.shape(), x.data().iter().map(|&v| sigmoid_value(v)).collect()).unwrap()
}

pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::InvalidShape(format!(
            "l1_loss shapes differ: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(l1_mean(pred.data(), target.data()))
}
