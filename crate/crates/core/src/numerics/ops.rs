//! Forward kernels and their adjoints. The graph in [`super::graph`] records
//! calls to these; they are also usable directly on plain tensors.

use crate::error::{Error, Result};

use super::real::{gemm, MatRef};
use super::{Real, Tensor};

fn as_matrix<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        [n] => Ok((*n, 1)),
        s => Err(Error::dim(format!("{what}: expected matrix or vector, got {s:?}"))),
    }
}

/// Matrix product. A rank-1 right operand is treated as a column vector and
/// the result is rank-1.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = match a.shape() {
        [m, n] => (*m, *n),
        s => return Err(Error::dim(format!("matmul lhs must be a matrix, got {s:?}"))),
    };
    let (n2, p) = as_matrix(b, "matmul rhs")?;
    if n != n2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions differ: {:?} × {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * p];
    gemm(
        MatRef::row_major(a.data(), m, n),
        MatRef::row_major(b.data(), n, p),
        T::zero(),
        &mut out,
    );
    let shape = if b.rank() == 1 { vec![m] } else { vec![m, p] };
    Tensor::new(shape, out)
}

/// Gradients of `a·b` given the output gradient.
pub(crate) fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &Tensor<T>,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let p = if b.rank() == 1 { 1 } else { b.shape()[1] };
    let g = MatRef::row_major(grad.data(), m, p);
    let da = need_a.then(|| {
        let mut out = vec![T::zero(); m * n];
        gemm(g, MatRef::row_major(b.data(), n, p).t(), T::zero(), &mut out);
        Tensor::new(a.shape().to_vec(), out).expect("shape")
    });
    let db = need_b.then(|| {
        let mut out = vec![T::zero(); n * p];
        gemm(MatRef::row_major(a.data(), m, n).t(), g, T::zero(), &mut out);
        Tensor::new(b.shape().to_vec(), out).expect("shape")
    });
    (da, db)
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "add")?;
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect(),
    )
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "mul")?;
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect(),
    )
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes differ {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

#[inline]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// `ln(1 + e^x)` in the form `max(x, 0) + ln(1 + e^-|x|)`, floored at the
/// smallest subnormal so the result stays strictly positive.
#[inline]
pub fn softplus_scalar<T: Real>(x: T) -> T {
    (x.max(T::zero()) + (-x.abs()).exp().ln_1p()).max(T::tiny())
}

pub fn softplus<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(softplus_scalar)
}

/// Softmax over a vector. `-inf` entries get probability exactly zero.
pub fn softmax_1d<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 1 {
        return Err(Error::dim(format!("softmax_1d expects a vector, got {:?}", x.shape())));
    }
    let mut max = T::neg_infinity();
    for &v in x.data() {
        if v.is_nan() || v == T::infinity() {
            return Err(Error::NonFinite {
                context: "softmax_1d input".into(),
            });
        }
        if v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        return Err(Error::DegenerateDistribution);
    }
    let mut out: Vec<T> = x
        .data()
        .iter()
        .map(|&v| {
            if v == T::neg_infinity() {
                T::zero()
            } else {
                (v - max).exp()
            }
        })
        .collect();
    let total: T = out.iter().copied().sum();
    for v in &mut out {
        *v = *v / total;
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Spatial mean of a `C×H×W` tensor, giving a length-`C` vector.
pub fn mean_pool_spatial<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    let hw = h * w;
    let inv = T::one() / T::lit(hw as f64);
    let out = x
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect::<Vec<_>>();
    debug_assert_eq!(out.len(), c);
    Ok(Tensor::vector(out))
}

/// Source taps for half-pixel-centred bilinear upsampling along one axis.
fn upsample_taps(len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling of a `C×H×W` tensor by an integer factor
/// (half-pixel centres, edge clamping).
pub fn bilinear_upsample<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    if factor == 0 || h == 0 || w == 0 {
        return Err(Error::dim("bilinear_upsample needs a positive factor and nonempty input"));
    }
    let (ho, wo) = (h * factor, w * factor);
    let ty = upsample_taps(h, factor);
    let tx = upsample_taps(w, factor);
    let mut out = vec![T::zero(); c * ho * wo];
    for ch in 0..c {
        let src = &x.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::lit(ly);
            let row0 = &src[y0 * w..(y0 + 1) * w];
            let row1 = &src[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::lit(lx);
                let top = row0[x0] + lx * (row0[x1] - row0[x0]);
                let bot = row1[x0] + lx * (row1[x1] - row1[x0]);
                dst[oy * wo + ox] = top + ly * (bot - top);
            }
        }
    }
    Tensor::new([c, ho, wo], out)
}

pub(crate) fn bilinear_upsample_backward<T: Real>(
    grad: &Tensor<T>,
    in_shape: &[usize],
    factor: usize,
) -> Tensor<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (ho, wo) = (h * factor, w * factor);
    let ty = upsample_taps(h, factor);
    let tx = upsample_taps(w, factor);
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let g = &grad.data()[ch * ho * wo..(ch + 1) * ho * wo];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::lit(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::lit(lx);
                let v = g[oy * wo + ox];
                let top = v * (T::one() - ly);
                let bot = v * ly;
                dst[y0 * w + x0] = dst[y0 * w + x0] + top * (T::one() - lx);
                dst[y0 * w + x1] = dst[y0 * w + x1] + top * lx;
                dst[y1 * w + x0] = dst[y1 * w + x0] + bot * (T::one() - lx);
                dst[y1 * w + x1] = dst[y1 * w + x1] + bot * lx;
            }
        }
    }
    Tensor::new(in_shape.to_vec(), out).expect("shape")
}

/// Geometry of a 3×3, pad-1 convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new<T: Real>(input: &Tensor<T>, kernels: &Tensor<T>, bias: &Tensor<T>, stride: usize) -> Result<Self> {
        let (c_in, h, w) = input.chw()?;
        let c_out = match kernels.shape() {
            [o, i, 3, 3] if *i == c_in => *o,
            s => {
                return Err(Error::dim(format!(
                    "conv2d kernels must be C_out×{c_in}×3×3, got {s:?}"
                )))
            }
        };
        if bias.shape() != [c_out] {
            return Err(Error::dim(format!(
                "conv2d bias must have shape [{c_out}], got {:?}",
                bias.shape()
            )));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::dim(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        let ho = h.div_ceil(stride);
        let wo = w.div_ceil(stride);
        Ok(Self { c_in, h, w, c_out, stride, ho, wo })
    }

    fn patch_rows(&self) -> usize {
        self.c_in * 9
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Real>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.positions();
    let mut cols = vec![T::zero(); g.patch_rows() * p];
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 3 + ky) * 3 + kx) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.positions();
    let mut out = vec![T::zero(); g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 3 + ky) * 3 + kx) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in row[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// 3×3 cross-correlation with zero padding 1. Returns the output and the
/// unfolded input patches, which the backward pass reuses.
pub(crate) fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<(Tensor<T>, Vec<T>, ConvGeom)> {
    let g = ConvGeom::new(input, kernels, bias, stride)?;
    let cols = im2col(input.data(), &g);
    let p = g.positions();
    let mut out = vec![T::zero(); g.c_out * p];
    for (o, chunk) in out.chunks_exact_mut(p).enumerate() {
        chunk.fill(bias.data()[o]);
    }
    gemm(
        MatRef::row_major(kernels.data(), g.c_out, g.patch_rows()),
        MatRef::row_major(&cols, g.patch_rows(), p),
        T::one(),
        &mut out,
    );
    Ok((Tensor::new([g.c_out, g.ho, g.wo], out)?, cols, g))
}

pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    conv2d_forward(input, kernels, bias, stride).map(|(out, _, _)| out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernels: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    grad: &Tensor<T>,
    cols: &[T],
    kernels: &Tensor<T>,
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads<T> {
    let p = g.positions();
    let gm = MatRef::row_major(grad.data(), g.c_out, p);
    let input = need[0].then(|| {
        let mut dcols = vec![T::zero(); g.patch_rows() * p];
        gemm(
            MatRef::row_major(kernels.data(), g.c_out, g.patch_rows()).t(),
            gm,
            T::zero(),
            &mut dcols,
        );
        Tensor::new([g.c_in, g.h, g.w], col2im(&dcols, g)).expect("shape")
    });
    let kernel_grad = need[1].then(|| {
        let mut dk = vec![T::zero(); g.c_out * g.patch_rows()];
        gemm(gm, MatRef::row_major(cols, g.patch_rows(), p).t(), T::zero(), &mut dk);
        Tensor::new(kernels.shape().to_vec(), dk).expect("shape")
    });
    let bias = need[2].then(|| {
        Tensor::vector(
            grad.data()
                .chunks_exact(p)
                .map(|c| c.iter().copied().sum())
                .collect(),
        )
    });
    ConvGrads {
        input,
        kernels: kernel_grad,
        bias,
    }
}

/// Mean binary cross-entropy between `sigmoid(logits)` and `target`, in the
/// stable logit form `max(x,0) - x·t + ln(1 + e^-|x|)`.
pub fn bce_with_logits<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if logits.len() != target.len() {
        return Err(Error::dim(format!(
            "bce: logits {:?} vs target {:?}",
            logits.shape(),
            target.shape()
        )));
    }
    let n = T::lit(logits.len().max(1) as f64);
    let total: T = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&x, &t)| x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p())
        .sum();
    Ok(total / n)
}

/// Squared coefficient of variation of `importance`, using the population
/// variance and a `1e-10` floor on the squared mean.
pub fn cv_squared<T: Real>(importance: &[T]) -> T {
    let k = T::lit(importance.len().max(1) as f64);
    let mean = importance.iter().copied().sum::<T>() / k;
    let var = importance
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .sum::<T>()
        / k;
    var / (mean * mean + T::lit(CV2_EPS))
}

pub(crate) const CV2_EPS: f64 = 1e-10;

/// Gradient of [`cv_squared`] with respect to each importance entry.
pub(crate) fn cv_squared_grad<T: Real>(importance: &[T]) -> Vec<T> {
    let k = T::lit(importance.len().max(1) as f64);
    let mean = importance.iter().copied().sum::<T>() / k;
    let var = importance
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .sum::<T>()
        / k;
    let denom = mean * mean + T::lit(CV2_EPS);
    let two = T::lit(2.0);
    importance
        .iter()
        .map(|&v| two * (v - mean) / (k * denom) - var * two * mean / (k * denom * denom))
        .collect()
}
