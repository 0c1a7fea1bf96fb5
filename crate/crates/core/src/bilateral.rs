//! Full-resolution stage: the learned guidance map, trilinear slicing of
//! the coefficient grid, and the per-pixel affine color transform.
//!
//! Conventions shared by every function in this module:
//!
//! * pixel `x` of a `W`-wide image maps to grid coordinate
//!   `(x + 0.5) * grid_w / W - 0.5` (likewise for `y`), so grid cell centers
//!   sit at the centers of the image tiles they cover;
//! * a guide value `g` maps to depth coordinate `d * g - 0.5`;
//! * lattice reads outside the grid clamp to the border cell, so the
//!   interpolation weights of a pixel always sum to one.
//!
//! The scalar helpers ([`guide_pixel`], [`SliceAxis`], [`affine_pixel`]) are
//! shared by the tensor kernels and the fused inference path, which is what
//! makes the two bit-identical.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Number of knots in each per-channel guide curve.
pub const CURVE_KNOTS: usize = 16;

/// Parameters of the pointwise guide network:
/// `g = clamp(b + Σ_c ρ_c(M_c · φ + b'_c), 0, 1)` with
/// `ρ_c(u) = Σ_i a_{c,i} max(u - t_{c,i}, 0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GuideParams<T> {
    /// `[3, 3]`, row `c` mixes the input color into curve input `c`.
    pub ccm: Tensor<T>,
    /// `[3]`, the per-curve offsets `b'`.
    pub ccm_bias: Tensor<T>,
    /// `[3, 16]`
    pub slopes: Tensor<T>,
    /// `[3, 16]`
    pub thresholds: Tensor<T>,
    /// `[1]`
    pub bias: Tensor<T>,
}

impl<T: Real> GuideParams<T> {
    /// Identity color matrix, knots at `i / 16`, and curves that are the
    /// identity on `[0, 1]` scaled by 1/3, so the guide starts out as the
    /// channel mean.
    pub fn identity() -> Self {
        let third = T::one() / T::lit(3.0);
        Self {
            ccm: Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { T::one() } else { T::zero() }),
            ccm_bias: Tensor::zeros(&[3]),
            slopes: Tensor::from_fn(&[3, CURVE_KNOTS], |i| if i % CURVE_KNOTS == 0 { third } else { T::zero() }),
            thresholds: Tensor::from_fn(&[3, CURVE_KNOTS], |i| {
                T::from_usize(i % CURVE_KNOTS).unwrap() / T::from_usize(CURVE_KNOTS).unwrap()
            }),
            bias: Tensor::zeros(&[1]),
        }
    }

    pub fn check(&self) -> Result<()> {
        let want: [(&str, &Tensor<T>, &[usize]); 5] = [
            ("ccm", &self.ccm, &[3, 3]),
            ("ccm_bias", &self.ccm_bias, &[3]),
            ("slopes", &self.slopes, &[3, CURVE_KNOTS]),
            ("thresholds", &self.thresholds, &[3, CURVE_KNOTS]),
            ("bias", &self.bias, &[1]),
        ];
        for (name, t, shape) in want {
            if t.shape() != shape {
                return Err(Error::Shape(format!("guide {name}: expected {shape:?}, got {:?}", t.shape())));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> GuideParams<U> {
        GuideParams {
            ccm: self.ccm.cast(),
            ccm_bias: self.ccm_bias.cast(),
            slopes: self.slopes.cast(),
            thresholds: self.thresholds.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Unclamped guide value of one pixel.
#[inline]
pub fn guide_pixel<T: Real>(p: &[T], gp: &GuideParams<T>) -> T {
    let m = gp.ccm.data();
    let a = gp.slopes.data();
    let t = gp.thresholds.data();
    let mut g = gp.bias.data()[0];
    for c in 0..3 {
        let u = m[3 * c] * p[0] + m[3 * c + 1] * p[1] + m[3 * c + 2] * p[2] + gp.ccm_bias.data()[c];
        let mut rho = T::zero();
        for i in 0..CURVE_KNOTS {
            let k = c * CURVE_KNOTS + i;
            let e = u - t[k];
            if e > T::zero() {
                rho += a[k] * e;
            }
        }
        g += rho;
    }
    g
}

#[inline]
fn clamp01<T: Real>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

fn check_phi(phi: &[usize]) -> Result<()> {
    if !(phi.len() == 3 || phi.len() == 4) || phi[phi.len() - 1] != 3 {
        return Err(Error::Shape(format!("expected a 3-channel image, got {phi:?}")));
    }
    Ok(())
}

/// Guidance map `[.., H, W, 1]` for a 3-channel image `[.., H, W, 3]`.
pub fn compute_guide<T: Real>(phi: &Tensor<T>, gp: &GuideParams<T>) -> Result<Tensor<T>> {
    check_phi(phi.shape())?;
    gp.check()?;
    let data = phi.data().chunks(3).map(|p| clamp01(guide_pixel(p, gp))).collect();
    let mut shape = phi.shape().to_vec();
    *shape.last_mut().unwrap() = 1;
    Tensor::from_vec(&shape, data)
}

pub struct GuideGrads<T> {
    pub phi: Option<Tensor<T>>,
    pub params: GuideParams<T>,
}

pub fn compute_guide_backward<T: Real>(phi: &Tensor<T>, gp: &GuideParams<T>, dg: &Tensor<T>, need_phi: bool) -> GuideGrads<T> {
    let m = gp.ccm.data();
    let a = gp.slopes.data();
    let t = gp.thresholds.data();
    let mut d_ccm = [T::zero(); 9];
    let mut d_ccm_bias = [T::zero(); 3];
    let mut d_slopes = vec![T::zero(); 3 * CURVE_KNOTS];
    let mut d_thresholds = vec![T::zero(); 3 * CURVE_KNOTS];
    let mut d_bias = T::zero();
    let mut d_phi = need_phi.then(|| vec![T::zero(); phi.len()]);
    for (px, (p, &g_up)) in phi.data().chunks(3).zip(dg.data()).enumerate() {
        let raw = guide_pixel(p, gp);
        if g_up == T::zero() || raw < T::zero() || raw > T::one() {
            continue;
        }
        d_bias += g_up;
        for c in 0..3 {
            let u = m[3 * c] * p[0] + m[3 * c + 1] * p[1] + m[3 * c + 2] * p[2] + gp.ccm_bias.data()[c];
            let mut slope = T::zero();
            for i in 0..CURVE_KNOTS {
                let k = c * CURVE_KNOTS + i;
                let e = u - t[k];
                if e > T::zero() {
                    d_slopes[k] += g_up * e;
                    d_thresholds[k] -= g_up * a[k];
                    slope += a[k];
                }
            }
            let du = g_up * slope;
            d_ccm_bias[c] += du;
            for cc in 0..3 {
                d_ccm[3 * c + cc] += du * p[cc];
            }
            if let Some(d) = d_phi.as_mut() {
                for cc in 0..3 {
                    d[3 * px + cc] += du * m[3 * c + cc];
                }
            }
        }
    }
    GuideGrads {
        phi: d_phi.map(|d| Tensor::from_vec(phi.shape(), d).unwrap()),
        params: GuideParams {
            ccm: Tensor::from_vec(&[3, 3], d_ccm.to_vec()).unwrap(),
            ccm_bias: Tensor::from_vec(&[3], d_ccm_bias.to_vec()).unwrap(),
            slopes: Tensor::from_vec(&[3, CURVE_KNOTS], d_slopes).unwrap(),
            thresholds: Tensor::from_vec(&[3, CURVE_KNOTS], d_thresholds).unwrap(),
            bias: Tensor::scalar(d_bias),
        },
    }
}

/// Two-tap linear interpolation along one axis with clamped lattice reads.
#[derive(Clone, Copy, Debug)]
pub struct SliceAxis<T> {
    pub lo: usize,
    pub hi: usize,
    /// Weight of `hi`; `lo` gets `1 - frac`.
    pub frac: T,
}

impl<T: Real> SliceAxis<T> {
    /// Tap positions for continuous lattice coordinate `coord` on `0..n`.
    #[inline]
    pub fn at(coord: T, n: usize) -> Self {
        let f = coord.floor();
        let frac = coord - f;
        let i = f.to_i64().unwrap();
        let last = n as i64 - 1;
        Self {
            lo: i.clamp(0, last) as usize,
            hi: (i + 1).clamp(0, last) as usize,
            frac,
        }
    }

    /// Spatial axis: pixel `p` of an image `len` wide onto `cells` cells.
    #[inline]
    pub fn spatial(p: usize, len: usize, cells: usize) -> Self {
        let coord = (T::from_usize(p).unwrap() + T::lit(0.5)) * T::from_usize(cells).unwrap() / T::from_usize(len).unwrap() - T::lit(0.5);
        Self::at(coord, cells)
    }

    /// Depth axis for guide value `g` on a grid `depth` cells deep.
    #[inline]
    pub fn depth(g: T, depth: usize) -> Self {
        Self::at(T::from_usize(depth).unwrap() * g - T::lit(0.5), depth)
    }
}

/// Extents of a coefficient grid `[gh, gw, d, k]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridDims {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub coeffs: usize,
}

impl GridDims {
    pub fn cell_len(&self) -> usize {
        self.height * self.width * self.depth * self.coeffs
    }

    #[inline]
    fn offset(&self, y: usize, x: usize, z: usize) -> usize {
        ((y * self.width + x) * self.depth + z) * self.coeffs
    }
}

/// Splits a grid shape `[gh, gw, d, k]` or `[N, gh, gw, d, k]`.
pub fn grid_dims(shape: &[usize]) -> Result<(usize, GridDims)> {
    let (n, s) = match shape.len() {
        4 => (1, shape),
        5 => (shape[0], &shape[1..]),
        _ => return Err(Error::Shape(format!("grid must be [gh, gw, d, k] or [N, gh, gw, d, k], got {shape:?}"))),
    };
    Ok((
        n,
        GridDims {
            height: s[0],
            width: s[1],
            depth: s[2],
            coeffs: s[3],
        },
    ))
}

/// Per-pixel interpolation taps for one image.
struct Taps<T> {
    xs: Vec<SliceAxis<T>>,
    ys: Vec<SliceAxis<T>>,
}

impl<T: Real> Taps<T> {
    fn new(h: usize, w: usize, dims: &GridDims) -> Self {
        Self {
            xs: (0..w).map(|x| SliceAxis::spatial(x, w, dims.width)).collect(),
            ys: (0..h).map(|y| SliceAxis::spatial(y, h, dims.height)).collect(),
        }
    }
}

/// Trilinear lookup of one pixel's coefficients, written into `out`.
#[inline]
fn slice_pixel<T: Real>(grid: &[T], dims: &GridDims, sx: SliceAxis<T>, sy: SliceAxis<T>, sz: SliceAxis<T>, out: &mut [T]) {
    out.fill(T::zero());
    let corners = [
        (sy.lo, T::one() - sy.frac),
        (sy.hi, sy.frac),
    ];
    for (iy, wy) in corners {
        for (ix, wx) in [(sx.lo, T::one() - sx.frac), (sx.hi, sx.frac)] {
            let wxy = wy * wx;
            for (iz, wz) in [(sz.lo, T::one() - sz.frac), (sz.hi, sz.frac)] {
                let w = wxy * wz;
                let cell = &grid[dims.offset(iy, ix, iz)..][..dims.coeffs];
                for (o, &c) in out.iter_mut().zip(cell) {
                    *o += w * c;
                }
            }
        }
    }
}

fn split_image(shape: &[usize], channels: usize) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w, c] if c == channels => Ok((1, h, w)),
        [n, h, w, c] if c == channels => Ok((n, h, w)),
        _ => Err(Error::Shape(format!("expected [.., H, W, {channels}], got {shape:?}"))),
    }
}

fn slice_shapes(grid: &[usize], guide: &[usize]) -> Result<(usize, usize, usize, GridDims)> {
    let (gn, dims) = grid_dims(grid)?;
    let (n, h, w) = split_image(guide, 1)?;
    if gn != n {
        return Err(Error::Shape(format!("slice: grid batch {gn} vs guide batch {n}")));
    }
    Ok((n, h, w, dims))
}

/// Per-pixel coefficients `[.., H, W, k]` by trilinear interpolation of the
/// grid at `(x, y, g[x, y])`.
pub fn slice<T: Real>(grid: &Tensor<T>, guide: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, h, w, dims) = slice_shapes(grid.shape(), guide.shape())?;
    let k = dims.coeffs;
    let taps = Taps::new(h, w, &dims);
    let mut out = vec![T::zero(); n * h * w * k];
    for b in 0..n {
        let g = &grid.data()[b * dims.cell_len()..][..dims.cell_len()];
        let gd = &guide.data()[b * h * w..][..h * w];
        let ob = &mut out[b * h * w * k..][..h * w * k];
        ob.par_chunks_mut(w * k).enumerate().for_each(|(y, row)| {
            for x in 0..w {
                let sz = SliceAxis::depth(gd[y * w + x], dims.depth);
                slice_pixel(g, &dims, taps.xs[x], taps.ys[y], sz, &mut row[x * k..][..k]);
            }
        });
    }
    let mut shape = guide.shape().to_vec();
    *shape.last_mut().unwrap() = k;
    Tensor::from_vec(&shape, out)
}

pub struct SliceGrads<T> {
    pub grid: Tensor<T>,
    pub guide: Option<Tensor<T>>,
}

/// Gradients of [`slice`]: the grid receives the same interpolation weights
/// scattered back, the guide the derivative of the depth tent (spatial tents
/// do not depend on it).
pub fn slice_backward<T: Real>(grid: &Tensor<T>, guide: &Tensor<T>, dout: &Tensor<T>, need_guide: bool) -> SliceGrads<T> {
    let (n, h, w, dims) = slice_shapes(grid.shape(), guide.shape()).expect("checked in forward");
    let k = dims.coeffs;
    let depth = T::from_usize(dims.depth).unwrap();
    let taps = Taps::new(h, w, &dims);
    let mut dgrid = vec![T::zero(); grid.len()];
    let mut dguide = need_guide.then(|| vec![T::zero(); guide.len()]);
    for b in 0..n {
        let g = &grid.data()[b * dims.cell_len()..][..dims.cell_len()];
        let dg = &mut dgrid[b * dims.cell_len()..][..dims.cell_len()];
        for y in 0..h {
            let sy = taps.ys[y];
            for x in 0..w {
                let p = (b * h + y) * w + x;
                let up = &dout.data()[p * k..][..k];
                let sx = taps.xs[x];
                let sz = SliceAxis::depth(guide.data()[p], dims.depth);
                let mut dz = T::zero();
                for (iy, wy) in [(sy.lo, T::one() - sy.frac), (sy.hi, sy.frac)] {
                    for (ix, wx) in [(sx.lo, T::one() - sx.frac), (sx.hi, sx.frac)] {
                        let wxy = wy * wx;
                        let lo = dims.offset(iy, ix, sz.lo);
                        let hi = dims.offset(iy, ix, sz.hi);
                        for c in 0..k {
                            dg[lo + c] += wxy * (T::one() - sz.frac) * up[c];
                            dg[hi + c] += wxy * sz.frac * up[c];
                            dz += wxy * (g[hi + c] - g[lo + c]) * up[c];
                        }
                    }
                }
                if let Some(d) = dguide.as_mut() {
                    d[p] = dz * depth;
                }
            }
        }
    }
    SliceGrads {
        grid: Tensor::from_vec(grid.shape(), dgrid).unwrap(),
        guide: dguide.map(|d| Tensor::from_vec(guide.shape(), d).unwrap()),
    }
}

/// One output pixel of the affine model. Coefficients are laid out per
/// output channel as `n_phi` multipliers followed by a bias.
#[inline]
pub fn affine_pixel<T: Real>(coeffs: &[T], phi: &[T], out: &mut [T]) {
    let nf = phi.len();
    for (c, o) in out.iter_mut().enumerate() {
        let row = &coeffs[(nf + 1) * c..][..nf + 1];
        let mut acc = row[nf];
        for (&a, &f) in row.iter().zip(phi) {
            acc += a * f;
        }
        *o = acc;
    }
}

fn affine_shapes(coeffs: &[usize], phi: &[usize]) -> Result<usize> {
    let nf = *phi.last().unwrap();
    if coeffs.len() != phi.len() || coeffs[..coeffs.len() - 1] != phi[..phi.len() - 1] {
        return Err(Error::Shape(format!("apply_affine: coefficients {coeffs:?} vs features {phi:?}")));
    }
    let k = *coeffs.last().unwrap();
    if k % (nf + 1) != 0 {
        return Err(Error::Shape(format!("apply_affine: {k} coefficients is not a multiple of {}", nf + 1)));
    }
    Ok(k / (nf + 1))
}

/// `O_c = A[(n+1)c + n] + Σ_c' A[(n+1)c + c'] φ_c'`. Output is not clamped.
pub fn apply_affine<T: Real>(coeffs: &Tensor<T>, phi: &Tensor<T>) -> Result<Tensor<T>> {
    let outc = affine_shapes(coeffs.shape(), phi.shape())?;
    let nf = phi.channels();
    let k = coeffs.channels();
    let mut out = vec![T::zero(); phi.len() / nf * outc];
    out.par_chunks_mut(outc * 1024)
        .zip(coeffs.data().par_chunks(k * 1024))
        .zip(phi.data().par_chunks(nf * 1024))
        .for_each(|((o, a), f)| {
            for ((o, a), f) in o.chunks_mut(outc).zip(a.chunks(k)).zip(f.chunks(nf)) {
                affine_pixel(a, f, o);
            }
        });
    let mut shape = phi.shape().to_vec();
    *shape.last_mut().unwrap() = outc;
    Tensor::from_vec(&shape, out)
}

pub struct AffineGrads<T> {
    pub coeffs: Tensor<T>,
    pub phi: Option<Tensor<T>>,
}

pub fn apply_affine_backward<T: Real>(coeffs: &Tensor<T>, phi: &Tensor<T>, dout: &Tensor<T>, need_phi: bool) -> AffineGrads<T> {
    let nf = phi.channels();
    let k = coeffs.channels();
    let outc = k / (nf + 1);
    let mut dc = vec![T::zero(); coeffs.len()];
    let mut dphi = need_phi.then(|| vec![T::zero(); phi.len()]);
    for (px, ((a, f), g)) in coeffs.data().chunks(k).zip(phi.data().chunks(nf)).zip(dout.data().chunks(outc)).enumerate() {
        let d = &mut dc[px * k..][..k];
        for c in 0..outc {
            let base = (nf + 1) * c;
            for cc in 0..nf {
                d[base + cc] = g[c] * f[cc];
            }
            d[base + nf] = g[c];
        }
        if let Some(dp) = dphi.as_mut() {
            for cc in 0..nf {
                dp[px * nf + cc] = (0..outc).map(|c| g[c] * a[(nf + 1) * c + cc]).sum();
            }
        }
    }
    AffineGrads {
        coeffs: Tensor::from_vec(coeffs.shape(), dc).unwrap(),
        phi: dphi.map(|d| Tensor::from_vec(phi.shape(), d).unwrap()),
    }
}

/// Guide, slice and apply for one `[H, W, 3]` image without materializing
/// the guide or the sliced coefficients. Bit-identical to running
/// [`compute_guide`], [`slice`] and [`apply_affine`] in sequence.
pub fn render<T: Real>(grid: &Tensor<T>, gp: &GuideParams<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    let (gn, dims) = grid_dims(grid.shape())?;
    let (n, h, w) = split_image(image.shape(), 3)?;
    if gn != 1 || n != 1 {
        return Err(Error::Shape("render works on a single image".into()));
    }
    if dims.coeffs != 12 {
        return Err(Error::Shape(format!("render expects 12 coefficients per cell, got {}", dims.coeffs)));
    }
    gp.check()?;
    let taps = Taps::new(h, w, &dims);
    let mut out = vec![T::zero(); h * w * 3];
    out.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
        let mut coeffs = [T::zero(); 12];
        for x in 0..w {
            let p = &image.data()[(y * w + x) * 3..][..3];
            let g = clamp01(guide_pixel(p, gp));
            slice_pixel(grid.data(), &dims, taps.xs[x], taps.ys[y], SliceAxis::depth(g, dims.depth), &mut coeffs);
            affine_pixel(&coeffs, p, &mut row[x * 3..][..3]);
        }
    });
    Tensor::from_vec(image.shape(), out)
}

/// Guidance map `(r + g + b) / 3`, the fixed luminance guide.
pub fn luminance_guide<T: Real>(phi: &Tensor<T>) -> Result<Tensor<T>> {
    check_phi(phi.shape())?;
    let third = T::one() / T::lit(3.0);
    let data = phi.data().chunks(3).map(|p| (p[0] + p[1] + p[2]) * third).collect();
    let mut shape = phi.shape().to_vec();
    *shape.last_mut().unwrap() = 1;
    Tensor::from_vec(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tent(v: f64) -> f64 {
        (1.0 - v.abs()).max(0.0)
    }

    /// Triple sum over every lattice index whose tent can be non-zero, with
    /// clamped reads; independent of the two-tap fast path.
    pub(crate) fn slice_oracle(grid: &Tensor<f64>, guide: &Tensor<f64>) -> Tensor<f64> {
        let (gh, gw, d, k) = (grid.shape()[0], grid.shape()[1], grid.shape()[2], grid.shape()[3]);
        let (h, w) = (guide.shape()[0], guide.shape()[1]);
        let mut out = Tensor::zeros(&[h, w, k]);
        for y in 0..h {
            for x in 0..w {
                let gx = (x as f64 + 0.5) * gw as f64 / w as f64 - 0.5;
                let gy = (y as f64 + 0.5) * gh as f64 / h as f64 - 0.5;
                let gz = d as f64 * guide.at(&[y, x, 0]) - 0.5;
                for c in 0..k {
                    let mut acc = 0.0;
                    for j in -1..=gh as i64 {
                        for i in -1..=gw as i64 {
                            for z in -1..=d as i64 {
                                let wt = tent(gx - i as f64) * tent(gy - j as f64) * tent(gz - z as f64);
                                if wt == 0.0 {
                                    continue;
                                }
                                let cj = j.clamp(0, gh as i64 - 1) as usize;
                                let ci = i.clamp(0, gw as i64 - 1) as usize;
                                let cz = z.clamp(0, d as i64 - 1) as usize;
                                acc += wt * grid.at(&[cj, ci, cz, c]);
                            }
                        }
                    }
                    out.set(&[y, x, c], acc);
                }
            }
        }
        out
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    #[test]
    fn identity_guide_is_channel_mean() {
        let gp = GuideParams::<f64>::identity();
        let g = compute_guide(&Tensor::from_vec(&[1, 1, 3], vec![0.3, 0.3, 0.3]).unwrap(), &gp).unwrap();
        assert!((g.at(&[0, 0, 0]) - 0.3).abs() < 1e-12);
        let g = compute_guide(&Tensor::from_vec(&[1, 1, 3], vec![0.9, 0.0, 0.3]).unwrap(), &gp).unwrap();
        assert!((g.at(&[0, 0, 0]) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn flat_curves_give_constant_guide() {
        let mut gp = GuideParams::<f64>::identity();
        gp.slopes.fill(0.0);
        gp.bias = Tensor::scalar(0.42);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = compute_guide(&random(&[4, 5, 3], &mut rng, 0.0, 1.0), &gp).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.42));
        gp.bias = Tensor::scalar(1.7);
        let g = compute_guide(&random(&[2, 2, 3], &mut rng, 0.0, 1.0), &gp).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0));
    }

    proptest! {
        #[test]
        fn monotone_curves_give_monotone_guide(
            slopes in proptest::collection::vec(0.0f64..0.2, 48),
            p in proptest::array::uniform3(0.0f64..1.0),
            bump in 0.0f64..0.5,
            ch in 0usize..3,
        ) {
            let mut gp = GuideParams::<f64>::identity();
            gp.slopes = Tensor::from_vec(&[3, 16], slopes).unwrap();
            let mut q = p;
            q[ch] = (q[ch] + bump).min(1.0);
            let img = Tensor::from_vec(&[1, 2, 3], [p, q].concat()).unwrap();
            let g = compute_guide(&img, &gp).unwrap();
            prop_assert!(g.data()[1] >= g.data()[0]);
        }

        #[test]
        fn slicing_is_linear_in_grid(seed in 0u64..1000, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g1 = random(&[3, 4, 5, 2], &mut rng, -1.0, 1.0);
            let g2 = random(&[3, 4, 5, 2], &mut rng, -1.0, 1.0);
            let guide = random(&[7, 9, 1], &mut rng, 0.0, 1.0);
            let mut mix = g1.map(|v| alpha * v);
            mix.add_assign(&g2.map(|v| beta * v));
            let lhs = slice(&mix, &guide).unwrap();
            let mut rhs = slice(&g1, &guide).unwrap().map(|v| alpha * v);
            rhs.add_assign(&slice(&g2, &guide).unwrap().map(|v| beta * v));
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-5);
        }
    }

    #[test]
    fn constant_grid_slices_to_constant() {
        let grid = Tensor::from_fn(&[3, 3, 4, 12], |i| (i % 12) as f64 * 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = slice(&grid, &random(&[10, 6, 1], &mut rng, 0.0, 1.0)).unwrap();
        for px in out.data().chunks(12) {
            for (c, &v) in px.iter().enumerate() {
                assert!((v - c as f64 * 0.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn depth_tent_hand_values() {
        let grid = Tensor::from_vec(&[1, 1, 2, 1], vec![0.0f64, 1.0]).unwrap();
        let at = |g: f64| slice(&grid, &Tensor::from_vec(&[1, 1, 1], vec![g]).unwrap()).unwrap().data()[0];
        assert_eq!(at(0.75), 1.0);
        assert_eq!(at(0.5), 0.5);
        assert_eq!(at(0.0), 0.0);
        assert_eq!(at(1.0), 1.0);
    }

    #[test]
    fn slice_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let grid = random(&[4, 4, 4, 3], &mut rng, -1.0, 1.0);
            let mut guide = random(&[9, 13, 1], &mut rng, 0.0, 1.0);
            guide.data_mut()[0] = 0.0;
            guide.data_mut()[1] = 1.0;
            let got = slice(&grid, &guide).unwrap();
            assert!(got.max_abs_diff(&slice_oracle(&grid, &guide)) < 1e-6);
        }
    }

    #[test]
    fn slicing_respects_guide_edges() {
        // Guide steps from 0.1 to 0.9; the grid holds different values in the
        // depth cells on either side, constant spatially.
        let d = 8;
        let grid = Tensor::from_fn(&[4, 4, d, 1], |i| if i % d < d / 2 { -1.0f64 } else { 1.0 });
        let guide = Tensor::from_fn(&[16, 16, 1], |i| if (i % 16) < 7 { 0.1 } else { 0.9 });
        let out = slice(&grid, &guide).unwrap();
        for (o, g) in out.data().iter().zip(guide.data()) {
            let want = if *g < 0.5 { -1.0 } else { 1.0 };
            assert_eq!(*o, want);
        }
    }

    #[test]
    fn affine_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let phi = random(&[5, 4, 3], &mut rng, 0.0, 1.0).cast::<f32>();
        let ident: Vec<f32> = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0].repeat(20);
        let coeffs = Tensor::from_vec(&[5, 4, 12], ident).unwrap();
        assert_eq!(apply_affine(&coeffs, &phi).unwrap(), phi);

        let bias: Vec<f32> = [0.0, 0.0, 0.0, 0.1, 0.0, 0.0, 0.0, 0.2, 0.0, 0.0, 0.0, 0.3].repeat(20);
        let out = apply_affine(&Tensor::from_vec(&[5, 4, 12], bias).unwrap(), &phi).unwrap();
        for px in out.data().chunks(3) {
            assert_eq!(px, &[0.1, 0.2, 0.3]);
        }
    }

    #[test]
    fn affine_matches_matrix_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let coeffs = random(&[3, 3, 12], &mut rng, -2.0, 2.0);
        let phi = random(&[3, 3, 3], &mut rng, 0.0, 1.0);
        let out = apply_affine(&coeffs, &phi).unwrap();
        for px in 0..9 {
            let a = &coeffs.data()[px * 12..][..12];
            let f = &phi.data()[px * 3..][..3];
            for c in 0..3 {
                let want = a[4 * c] * f[0] + a[4 * c + 1] * f[1] + a[4 * c + 2] * f[2] + a[4 * c + 3];
                assert!((out.data()[px * 3 + c] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fused_render_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let grid = random(&[4, 4, 8, 12], &mut rng, -1.0, 1.0).cast::<f32>();
        let img = random(&[23, 17, 3], &mut rng, 0.0, 1.0).cast::<f32>();
        let mut gp = GuideParams::<f32>::identity();
        gp.ccm.data_mut()[1] = 0.2;
        let unfused = apply_affine(&slice(&grid, &compute_guide(&img, &gp).unwrap()).unwrap(), &img).unwrap();
        assert_eq!(render(&grid, &gp, &img).unwrap(), unfused);
    }

    #[test]
    fn one_pixel_image() {
        let grid = Tensor::full(&[16, 16, 8, 12], 0.5f32);
        let img = Tensor::full(&[1, 1, 3], 0.2f32);
        let out = render(&grid, &GuideParams::identity(), &img).unwrap();
        assert_eq!(out.shape(), &[1, 1, 3]);
        assert!(out.is_finite());
    }
}
