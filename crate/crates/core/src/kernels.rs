//! Forward and backward kernels for the layers of the low-resolution
//! stream. Every kernel here works on batched, channels-last tensors and is
//! generic over the element type so the same code runs in `f64` under the
//! gradient checker.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Spatial extent after a 3×3 convolution with zero padding: `ceil(n / stride)`.
pub fn conv_out_extent(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// Interprets a rank-3 image as a batch of one.
pub(crate) fn as_batch(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [h, w, c] => Ok([1, h, w, c]),
        [n, h, w, c] => Ok([n, h, w, c]),
        _ => Err(Error::Shape(format!(
            "expected [H, W, C] or [N, H, W, C], got {shape:?}"
        ))),
    }
}

fn check_conv(input: &[usize], weight: &[usize], bias: &[usize], stride: usize) -> Result<[usize; 4]> {
    let dims = as_batch(input)?;
    if stride != 1 && stride != 2 {
        return Err(Error::Contract(format!("conv2d stride must be 1 or 2, got {stride}")));
    }
    if weight.len() != 4 || weight[0] != 3 || weight[1] != 3 {
        return Err(Error::Shape(format!("conv2d weight must be [3, 3, Cin, Cout], got {weight:?}")));
    }
    if weight[2] != dims[3] {
        return Err(Error::Shape(format!(
            "conv2d input channels: input has {}, weight expects {}",
            dims[3], weight[2]
        )));
    }
    if bias != [weight[3]] {
        return Err(Error::Shape(format!(
            "conv2d bias: expected [{}], got {bias:?}",
            weight[3]
        )));
    }
    Ok(dims)
}

/// Gathers the 3×3 zero-padded neighbourhood of every output pixel into a
/// row: `cols[(oy * wo + ox), (ky * 3 + kx) * cin + c]`.
fn im2col<T: Real>(img: &[T], h: usize, w: usize, cin: usize, stride: usize, cols: &mut [T]) {
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    let k = 9 * cin;
    debug_assert_eq!(cols.len(), ho * wo * k);
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut cols[(oy * wo + ox) * k..][..k];
            for ky in 0..3 {
                let iy = (stride * oy + ky) as isize - 1;
                for kx in 0..3 {
                    let ix = (stride * ox + kx) as isize - 1;
                    let dst = &mut row[(ky * 3 + kx) * cin..][..cin];
                    if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                        dst.fill(T::zero());
                    } else {
                        let src = (iy as usize * w + ix as usize) * cin;
                        dst.copy_from_slice(&img[src..src + cin]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds the column gradient back to pixels.
fn col2im<T: Real>(cols: &[T], h: usize, w: usize, cin: usize, stride: usize, img: &mut [T]) {
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    let k = 9 * cin;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &cols[(oy * wo + ox) * k..][..k];
            for ky in 0..3 {
                let iy = (stride * oy + ky) as isize - 1;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (stride * ox + kx) as isize - 1;
                    if ix < 0 || ix as usize >= w {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * cin;
                    let src = &row[(ky * 3 + kx) * cin..][..cin];
                    for (d, &s) in img[dst..dst + cin].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// 3×3 cross-correlation with zero padding, sampled at `stride * (x, y)`.
///
/// `input` is `[H, W, Cin]` or `[N, H, W, Cin]`, `weight` is
/// `[ky, kx, Cin, Cout]`. No activation is applied.
pub fn conv2d<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let [n, h, w, cin] = check_conv(input.shape(), weight.shape(), bias.shape(), stride)?;
    let cout = weight.shape()[3];
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    let mut out = vec![T::zero(); n * ho * wo * cout];
    let mut cols = vec![T::zero(); ho * wo * 9 * cin];
    let k = 9 * cin;
    for b in 0..n {
        im2col(&input.data()[b * h * w * cin..][..h * w * cin], h, w, cin, stride, &mut cols);
        let dst = &mut out[b * ho * wo * cout..][..ho * wo * cout];
        for row in dst.chunks_mut(cout) {
            row.copy_from_slice(bias.data());
        }
        T::gemm(ho * wo, k, cout, &cols, k as isize, 1, weight.data(), cout as isize, 1, T::one(), dst, cout as isize, 1);
    }
    let shape = if input.rank() == 3 {
        vec![ho, wo, cout]
    } else {
        vec![n, ho, wo, cout]
    };
    Tensor::from_vec(&shape, out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of [`conv2d`] given the upstream gradient `dout`.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    dout: &Tensor<T>,
    need_input: bool,
) -> ConvGrads<T> {
    let [n, h, w, cin] = as_batch(input.shape()).expect("checked in forward");
    let cout = weight.shape()[3];
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    let k = 9 * cin;
    let mut dw = vec![T::zero(); k * cout];
    let mut db = vec![T::zero(); cout];
    let mut din = need_input.then(|| vec![T::zero(); input.len()]);
    let mut cols = vec![T::zero(); ho * wo * k];
    for b in 0..n {
        let g = &dout.data()[b * ho * wo * cout..][..ho * wo * cout];
        for row in g.chunks(cout) {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc += v;
            }
        }
        im2col(&input.data()[b * h * w * cin..][..h * w * cin], h, w, cin, stride, &mut cols);
        // dW += cols^T @ g
        T::gemm(k, ho * wo, cout, &cols, 1, k as isize, g, cout as isize, 1, T::one(), &mut dw, cout as isize, 1);
        if let Some(din) = din.as_mut() {
            // dcols = g @ W^T
            T::gemm(ho * wo, cout, k, g, cout as isize, 1, weight.data(), 1, cout as isize, T::zero(), &mut cols, k as isize, 1);
            col2im(&cols, h, w, cin, stride, &mut din[b * h * w * cin..][..h * w * cin]);
        }
    }
    ConvGrads {
        input: din.map(|d| Tensor::from_vec(input.shape(), d).unwrap()),
        weight: Tensor::from_vec(weight.shape(), dw).unwrap(),
        bias: Tensor::from_vec(&[cout], db).unwrap(),
    }
}

fn check_dense(input: &[usize], weight: &[usize], bias: &[usize]) -> Result<()> {
    let last = *input.last().unwrap();
    if weight.len() != 2 || weight[0] != last {
        return Err(Error::Shape(format!(
            "dense: input features {last} do not match weight {weight:?}"
        )));
    }
    if bias != [weight[1]] {
        return Err(Error::Shape(format!(
            "dense bias: expected [{}], got {bias:?}",
            weight[1]
        )));
    }
    Ok(())
}

/// `out[..., m] = bias[m] + Σ_n input[..., n] * weight[n, m]`, applied along
/// the innermost axis (a 1×1 convolution for image tensors).
pub fn dense<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    check_dense(input.shape(), weight.shape(), bias.shape())?;
    let (fin, fout) = (weight.shape()[0], weight.shape()[1]);
    let rows = input.len() / fin;
    let mut out = Vec::with_capacity(rows * fout);
    for _ in 0..rows {
        out.extend_from_slice(bias.data());
    }
    T::gemm(rows, fin, fout, input.data(), fin as isize, 1, weight.data(), fout as isize, 1, T::one(), &mut out, fout as isize, 1);
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = fout;
    Tensor::from_vec(&shape, out)
}

pub struct DenseGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dense_backward<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, dout: &Tensor<T>, need_input: bool) -> DenseGrads<T> {
    let (fin, fout) = (weight.shape()[0], weight.shape()[1]);
    let rows = input.len() / fin;
    let mut dw = vec![T::zero(); fin * fout];
    T::gemm(fin, rows, fout, input.data(), 1, fin as isize, dout.data(), fout as isize, 1, T::zero(), &mut dw, fout as isize, 1);
    let mut db = vec![T::zero(); fout];
    for row in dout.data().chunks(fout) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let din = need_input.then(|| {
        let mut d = vec![T::zero(); input.len()];
        T::gemm(rows, fout, fin, dout.data(), fout as isize, 1, weight.data(), 1, fout as isize, T::zero(), &mut d, fin as isize, 1);
        Tensor::from_vec(input.shape(), d).unwrap()
    });
    DenseGrads {
        input: din,
        weight: Tensor::from_vec(weight.shape(), dw).unwrap(),
        bias: Tensor::from_vec(&[fout], db).unwrap(),
    }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient 0 at exactly 0.
pub fn relu_backward<T: Real>(x: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dout.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data).unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Standalone batch-norm layer: learnable per-channel affine plus running
/// statistics.
#[derive(Clone, Debug)]
pub struct BatchNormState<T> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub eps: T,
    pub mode: Mode,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Tensor::full(&[channels], T::one()),
            shift: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: T::lit(BN_MOMENTUM),
            eps: T::lit(BN_EPS),
            mode: Mode::Train,
        }
    }
}

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPS: f64 = 1e-5;

/// Values the backward pass of a train-mode batch norm needs.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Per-channel mean and (biased) variance over every non-channel axis.
pub fn channel_moments<T: Real>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let c = x.channels();
    let rows = x.len() / c;
    let inv_n = T::one() / T::from_usize(rows).unwrap();
    let mut mean = vec![T::zero(); c];
    for row in x.data().chunks(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv_n);
    let mut var = vec![T::zero(); c];
    for row in x.data().chunks(c) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s *= inv_n);
    (mean, var)
}

fn check_bn(x: &Tensor<impl Real>, channels: usize) -> Result<()> {
    if x.channels() != channels {
        return Err(Error::Shape(format!(
            "batch_norm channels: input has {}, state has {channels}",
            x.channels()
        )));
    }
    Ok(())
}

/// Normalizes with the given statistics, returning `(y, xhat, inv_std)`.
fn normalize<T: Real>(x: &Tensor<T>, mean: &[T], var: &[T], scale: &[T], shift: &[T], eps: T) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let c = mean.len();
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = x.clone();
    let mut y = x.clone();
    for (hrow, yrow) in xhat.data_mut().chunks_mut(c).zip(y.data_mut().chunks_mut(c)) {
        for ch in 0..c {
            let h = (hrow[ch] - mean[ch]) * inv_std[ch];
            hrow[ch] = h;
            yrow[ch] = h * scale[ch] + shift[ch];
        }
    }
    (y, xhat, inv_std)
}

/// Train-mode batch norm from explicit scale/shift; statistics come from the
/// batch. The caller folds `cache.mean`/`cache.var` into its running stats.
pub fn batch_norm_train<T: Real>(x: &Tensor<T>, scale: &Tensor<T>, shift: &Tensor<T>, eps: T) -> Result<(Tensor<T>, BnCache<T>)> {
    check_bn(x, scale.len())?;
    let (mean, var) = channel_moments(x);
    let (y, xhat, inv_std) = normalize(x, &mean, &var, scale.data(), shift.data(), eps);
    Ok((y, BnCache { xhat, inv_std, mean, var }))
}

pub fn batch_norm_infer<T: Real>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Vec<T>)> {
    check_bn(x, scale.len())?;
    let (y, _, inv_std) = normalize(x, running_mean.data(), running_var.data(), scale.data(), shift.data(), eps);
    Ok((y, inv_std))
}

/// Batch norm through a [`BatchNormState`]; in train mode the running
/// statistics are updated with the state's momentum.
pub fn batch_norm<T: Real>(x: &Tensor<T>, state: &mut BatchNormState<T>) -> Result<Tensor<T>> {
    match state.mode {
        Mode::Train => {
            let (y, cache) = batch_norm_train(x, &state.scale, &state.shift, state.eps)?;
            update_running(&mut state.running_mean, &mut state.running_var, &cache, state.momentum);
            Ok(y)
        }
        Mode::Infer => Ok(batch_norm_infer(x, &state.scale, &state.shift, &state.running_mean, &state.running_var, state.eps)?.0),
    }
}

pub fn update_running<T: Real>(mean: &mut Tensor<T>, var: &mut Tensor<T>, cache: &BnCache<T>, momentum: T) {
    let keep = momentum;
    let take = T::one() - momentum;
    for (r, &m) in mean.data_mut().iter_mut().zip(&cache.mean) {
        *r = keep * *r + take * m;
    }
    for (r, &v) in var.data_mut().iter_mut().zip(&cache.var) {
        *r = keep * *r + take * v;
    }
}

pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
}

pub fn batch_norm_train_backward<T: Real>(cache: &BnCache<T>, scale: &Tensor<T>, dout: &Tensor<T>) -> BnGrads<T> {
    let c = scale.len();
    let rows = dout.len() / c;
    let n = T::from_usize(rows).unwrap();
    let mut dscale = vec![T::zero(); c];
    let mut dshift = vec![T::zero(); c];
    for (g, h) in dout.data().chunks(c).zip(cache.xhat.data().chunks(c)) {
        for ch in 0..c {
            dshift[ch] += g[ch];
            dscale[ch] += g[ch] * h[ch];
        }
    }
    // dx = scale * inv_std / n * (n * dy - Σdy - xhat * Σ(dy * xhat))
    let mut dx = dout.clone();
    for (d, h) in dx.data_mut().chunks_mut(c).zip(cache.xhat.data().chunks(c)) {
        for ch in 0..c {
            let k = scale.data()[ch] * cache.inv_std[ch] / n;
            d[ch] = k * (n * d[ch] - dshift[ch] - h[ch] * dscale[ch]);
        }
    }
    BnGrads {
        input: dx,
        scale: Tensor::from_vec(&[c], dscale).unwrap(),
        shift: Tensor::from_vec(&[c], dshift).unwrap(),
    }
}

pub fn batch_norm_infer_backward<T: Real>(x: &Tensor<T>, running_mean: &Tensor<T>, inv_std: &[T], scale: &Tensor<T>, dout: &Tensor<T>) -> BnGrads<T> {
    let c = scale.len();
    let mut dscale = vec![T::zero(); c];
    let mut dshift = vec![T::zero(); c];
    let mut dx = dout.clone();
    for ((d, xr), g) in dx.data_mut().chunks_mut(c).zip(x.data().chunks(c)).zip(dout.data().chunks(c)) {
        for ch in 0..c {
            let h = (xr[ch] - running_mean.data()[ch]) * inv_std[ch];
            dshift[ch] += g[ch];
            dscale[ch] += g[ch] * h;
            d[ch] = g[ch] * scale.data()[ch] * inv_std[ch];
        }
    }
    BnGrads {
        input: dx,
        scale: Tensor::from_vec(&[c], dscale).unwrap(),
        shift: Tensor::from_vec(&[c], dshift).unwrap(),
    }
}

/// Per-image mean squared error, averaged over the batch (leading axis for
/// rank-4 inputs; a rank-3 input is a single image).
pub fn mse<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "mse: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = if pred.rank() == 4 { pred.shape()[0] } else { 1 };
    let per = pred.len() / n;
    let mut total = T::zero();
    for (p, t) in pred.data().chunks(per).zip(target.data().chunks(per)) {
        let s: T = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum();
        total += s / T::from_usize(per).unwrap();
    }
    Ok(total / T::from_usize(n).unwrap())
}

pub fn mse_backward<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, dloss: T) -> Tensor<T> {
    // Equal-sized images: per-image mean then batch mean is a plain mean.
    let k = T::lit(2.0) * dloss / T::from_usize(pred.len()).unwrap();
    let data = pred.data().iter().zip(target.data()).map(|(&p, &t)| k * (p - t)).collect();
    Tensor::from_vec(pred.shape(), data).unwrap()
}
