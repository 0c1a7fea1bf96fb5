//! Programmatic ground-truth operators, a synthetic image source, the
//! per-cell least-squares grid fit, and dataset generation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bilateral::{apply_affine, luminance_guide, slice, SliceAxis};
use crate::coeffnet::BilateralGrid;
use crate::error::{Error, Result};
use crate::io::{self, BitDepth};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Identity,
    GammaSat,
    VignetteTone,
    CrossChannel,
    GuideDependent,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 5] = [
        OperatorKind::Identity,
        OperatorKind::GammaSat,
        OperatorKind::VignetteTone,
        OperatorKind::CrossChannel,
        OperatorKind::GuideDependent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::Identity => "identity",
            OperatorKind::GammaSat => "gamma_sat",
            OperatorKind::VignetteTone => "vignette_tone",
            OperatorKind::CrossChannel => "cross_channel",
            OperatorKind::GuideDependent => "guide_dependent",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s || k.name().replace('_', "-") == s)
            .ok_or_else(|| Error::Config(format!("unknown operator {s:?}")))
    }
}

/// A ground-truth operator and its parameters. Every operator maps
/// `[0, 1]` colors into `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorSpec {
    Identity,
    /// Per-channel `c^gamma`, then saturation scaled by `saturation` around
    /// the mean of the three channels.
    GammaSat { gamma: f64, saturation: f64 },
    /// Radial falloff `1 - strength * r^2` (r = 1 at the corners), a global
    /// contrast curve, and a local-contrast boost
    /// `detail * (l - box_blur(l, blur_radius))` whose blur radius is a fixed
    /// number of pixels.
    VignetteTone {
        strength: f64,
        contrast: f64,
        detail: f64,
        blur_radius: usize,
    },
    /// `M c + b` with row-major `matrix`.
    CrossChannel { matrix: [f64; 9], bias: [f64; 3] },
    /// Affine transforms (`3 × 4`, row-major) at evenly spaced intensity
    /// anchors `(j + 0.5) / K` of the guide `weights · c`, linearly
    /// interpolated between anchors and held constant beyond the end ones.
    /// Optional terms: a global gain `1 + exposure * (0.5 - mean luminance)`
    /// and a local gain `1 + texture * e` where `e` is the box-blurred
    /// absolute high-pass of luminance over `texture_radius` pixels.
    GuideDependent {
        weights: [f64; 3],
        anchors: Vec<[f64; 12]>,
        #[serde(default)]
        exposure: f64,
        #[serde(default)]
        texture: f64,
        #[serde(default = "default_texture_radius")]
        texture_radius: usize,
    },
}

fn default_texture_radius() -> usize {
    4
}

const IDENTITY_AFFINE: [f64; 12] = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];

impl OperatorSpec {
    /// Default parameters for each kind.
    pub fn preset(kind: OperatorKind) -> Self {
        match kind {
            OperatorKind::Identity => OperatorSpec::Identity,
            OperatorKind::GammaSat => OperatorSpec::GammaSat {
                gamma: 0.6,
                saturation: 1.5,
            },
            OperatorKind::VignetteTone => OperatorSpec::VignetteTone {
                strength: 0.5,
                contrast: 1.4,
                detail: 1.5,
                blur_radius: 3,
            },
            OperatorKind::CrossChannel => OperatorSpec::CrossChannel {
                matrix: [0.7, 0.2, 0.1, 0.1, 0.6, 0.3, 0.2, 0.1, 0.5],
                bias: [0.05, 0.0, 0.1],
            },
            OperatorKind::GuideDependent => OperatorSpec::guide_dependent_bands(8, 0.15, 11),
        }
    }

    /// Banded operator with `bands` anchors drawn from `seed`, guided by
    /// luminance. Matrix entries deviate from the identity by up to
    /// `amplitude`, offsets by a third of that. Representable by a grid of
    /// depth `bands`.
    pub fn guide_dependent_bands(bands: usize, amplitude: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchors = (0..bands)
            .map(|_| {
                let mut a = IDENTITY_AFFINE;
                for (i, v) in a.iter_mut().enumerate() {
                    *v += if i % 4 == 3 {
                        rng.random_range(-amplitude / 3.0..=amplitude / 3.0)
                    } else {
                        rng.random_range(-amplitude..=amplitude)
                    };
                }
                a
            })
            .collect();
        OperatorSpec::GuideDependent {
            weights: [1.0 / 3.0; 3],
            anchors,
            exposure: 0.0,
            texture: 0.0,
            texture_radius: default_texture_radius(),
        }
    }

    pub fn kind(&self) -> OperatorKind {
        match self {
            OperatorSpec::Identity => OperatorKind::Identity,
            OperatorSpec::GammaSat { .. } => OperatorKind::GammaSat,
            OperatorSpec::VignetteTone { .. } => OperatorKind::VignetteTone,
            OperatorSpec::CrossChannel { .. } => OperatorKind::CrossChannel,
            OperatorSpec::GuideDependent { .. } => OperatorKind::GuideDependent,
        }
    }

    /// Whether applying the operator commutes with resampling.
    pub fn scale_invariant(&self) -> bool {
        match self {
            OperatorSpec::VignetteTone { detail, .. } => *detail == 0.0,
            OperatorSpec::GuideDependent { texture, .. } => *texture == 0.0,
            _ => true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self {
            OperatorSpec::GammaSat { gamma, saturation } if !(*gamma > 0.0 && *saturation >= 0.0) => {
                bad(format!("gamma_sat needs gamma > 0 and saturation >= 0, got {gamma}, {saturation}"))
            }
            OperatorSpec::VignetteTone { strength, contrast, .. } if !((0.0..=1.0).contains(strength) && *contrast > 0.0) => {
                bad(format!("vignette_tone needs strength in [0, 1] and contrast > 0, got {strength}, {contrast}"))
            }
            OperatorSpec::GuideDependent { weights, anchors, .. } => {
                if anchors.is_empty() {
                    return bad("guide_dependent needs at least one anchor".into());
                }
                if weights.iter().any(|w| *w < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                    return bad(format!("guide weights must be non-negative and sum to 1, got {weights:?}"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// `key=value` lines; values are JSON.
    pub fn to_key_values(&self) -> String {
        let Value::Object(map) = serde_json::to_value(self).expect("spec serializes") else {
            unreachable!("tagged enum serializes to an object")
        };
        let mut out = format!("kind={}\n", map["kind"].as_str().unwrap());
        for (k, v) in map.iter().filter(|(k, _)| *k != "kind") {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    /// Parses [`Self::to_key_values`]; keys it does not know are ignored.
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut map = serde_json::Map::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            let v = if k == "kind" {
                Value::String(v.to_string())
            } else {
                serde_json::from_str(v).map_err(|e| Error::Config(format!("{k}: {e}")))?
            };
            map.insert(k.to_string(), v);
        }
        let spec: Self = serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(format!("operator spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Box blur of a single-channel plane with radius `r` (window `2r + 1`),
/// edge samples repeated.
pub fn box_blur(plane: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let pass = |src: &[f64], n: usize, len: usize, stride: usize, step: usize| {
        let mut out = vec![0.0; src.len()];
        let norm = 1.0 / (2 * r + 1) as f64;
        for line in 0..n {
            let at = |i: isize| src[line * stride + (i.clamp(0, len as isize - 1) as usize) * step];
            let mut acc: f64 = (-(r as isize)..=r as isize).map(at).sum();
            for i in 0..len {
                out[line * stride + i * step] = acc * norm;
                acc += at(i as isize + r as isize + 1) - at(i as isize - r as isize);
            }
        }
        out
    };
    let rows = pass(plane, h, w, w, 1);
    pass(&rows, w, h, 1, w)
}

fn luminance_plane(img: &Tensor<f32>) -> Vec<f64> {
    img.data().chunks(3).map(|p| (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0).collect()
}

fn high_pass_energy(lum: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let low = box_blur(lum, h, w, r);
    let mag: Vec<f64> = lum.iter().zip(&low).map(|(a, b)| (a - b).abs()).collect();
    box_blur(&mag, h, w, r)
}

fn interp_anchor(anchors: &[[f64; 12]], g: f64) -> [f64; 12] {
    let k = anchors.len();
    let s = SliceAxis::<f64>::depth(g, k);
    let mut out = [0.0; 12];
    for (i, o) in out.iter_mut().enumerate() {
        *o = (1.0 - s.frac) * anchors[s.lo][i] + s.frac * anchors[s.hi][i];
    }
    out
}

fn affine3(a: &[f64; 12], c: [f64; 3]) -> [f64; 3] {
    let mut o = [0.0; 3];
    for (k, v) in o.iter_mut().enumerate() {
        *v = a[4 * k] * c[0] + a[4 * k + 1] * c[1] + a[4 * k + 2] * c[2] + a[4 * k + 3];
    }
    o
}

/// Applies `spec` to an `[H, W, 3]` image.
pub fn apply_operator(spec: &OperatorSpec, img: &Tensor<f32>) -> Result<Tensor<f32>> {
    if img.rank() != 3 || img.channels() != 3 {
        return Err(Error::Shape(format!("operators take [H, W, 3], got {:?}", img.shape())));
    }
    spec.validate()?;
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let px = |i: usize| -> [f64; 3] {
        let p = &img.data()[3 * i..3 * i + 3];
        [p[0] as f64, p[1] as f64, p[2] as f64]
    };
    let out: Vec<[f64; 3]> = match spec {
        OperatorSpec::Identity => return Ok(img.clone()),
        OperatorSpec::GammaSat { gamma, saturation } => (0..h * w)
            .map(|i| {
                let c = px(i).map(|v| v.powf(*gamma));
                let l = (c[0] + c[1] + c[2]) / 3.0;
                c.map(|v| l + saturation * (v - l))
            })
            .collect(),
        OperatorSpec::VignetteTone {
            strength,
            contrast,
            detail,
            blur_radius,
        } => {
            let lum = luminance_plane(img);
            let low = box_blur(&lum, h, w, *blur_radius);
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            let r2max = cy * cy + cx * cx;
            (0..h * w)
                .map(|i| {
                    let (y, x) = ((i / w) as f64, (i % w) as f64);
                    let r2 = if r2max > 0.0 { ((y - cy).powi(2) + (x - cx).powi(2)) / r2max } else { 0.0 };
                    let gain = 1.0 - strength * r2;
                    let boost = detail * (lum[i] - low[i]);
                    px(i).map(|v| {
                        let t = (v * gain).clamp(0.0, 1.0);
                        // Symmetric contrast curve around 0.5.
                        let s = 0.5 + 0.5 * (2.0 * t - 1.0).signum() * (2.0 * t - 1.0).abs().powf(1.0 / contrast);
                        s + boost
                    })
                })
                .collect()
        }
        OperatorSpec::CrossChannel { matrix, bias } => (0..h * w)
            .map(|i| {
                let c = px(i);
                let mut o = *bias;
                for (k, v) in o.iter_mut().enumerate() {
                    *v += matrix[3 * k] * c[0] + matrix[3 * k + 1] * c[1] + matrix[3 * k + 2] * c[2];
                }
                o
            })
            .collect(),
        OperatorSpec::GuideDependent {
            weights,
            anchors,
            exposure,
            texture,
            texture_radius,
        } => {
            let lum = luminance_plane(img);
            let mean = lum.iter().sum::<f64>() / lum.len() as f64;
            let global = 1.0 + exposure * (0.5 - mean);
            let energy = (*texture != 0.0).then(|| high_pass_energy(&lum, h, w, *texture_radius));
            (0..h * w)
                .map(|i| {
                    let c = px(i);
                    let g = (weights[0] * c[0] + weights[1] * c[1] + weights[2] * c[2]).clamp(0.0, 1.0);
                    let local = energy.as_ref().map_or(1.0, |e| 1.0 + texture * e[i]);
                    affine3(&interp_anchor(anchors, g), c).map(|v| v * global * local)
                })
                .collect()
        }
    };
    let data = out.into_iter().flat_map(|c| c.map(|v| v.clamp(0.0, 1.0) as f32)).collect();
    Tensor::from_vec(img.shape(), data)
}

/// Random test scene: a smooth two-color gradient, soft-edged shapes,
/// striped texture patches, mild noise, and a random global exposure.
pub fn synth_image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
    let c0 = color(&mut rng);
    let c1 = color(&mut rng);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    let scale = h.max(w) as f64;
    struct Shape {
        cy: f64,
        cx: f64,
        r: f64,
        color: [f64; 3],
        square: bool,
    }
    let shapes: Vec<Shape> = (0..rng.random_range(3..9))
        .map(|_| Shape {
            cy: rng.random_range(0.0..h as f64),
            cx: rng.random_range(0.0..w as f64),
            r: rng.random_range(0.05..0.3) * scale,
            color: color(&mut rng),
            square: rng.random_bool(0.5),
        })
        .collect();
    struct Stripes {
        cy: f64,
        cx: f64,
        r: f64,
        period: f64,
        angle: f64,
        amp: f64,
    }
    let stripes: Vec<Stripes> = (0..rng.random_range(1..4))
        .map(|_| Stripes {
            cy: rng.random_range(0.0..h as f64),
            cx: rng.random_range(0.0..w as f64),
            r: rng.random_range(0.1..0.35) * scale,
            period: rng.random_range(0.015..0.05) * scale,
            angle: rng.random_range(0.0..std::f64::consts::PI),
            amp: rng.random_range(0.05..0.2),
        })
        .collect();
    let exposure = rng.random_range(0.45..1.15);
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64, x as f64);
            let t = (((fx * dx + fy * dy) / scale) * 0.7 + 0.5).clamp(0.0, 1.0);
            let mut c = [0.0; 3];
            for k in 0..3 {
                c[k] = c0[k] * (1.0 - t) + c1[k] * t;
            }
            for s in &shapes {
                let d = if s.square {
                    (fy - s.cy).abs().max((fx - s.cx).abs())
                } else {
                    ((fy - s.cy).powi(2) + (fx - s.cx).powi(2)).sqrt()
                };
                let a = ((s.r - d) / (0.01 * scale + 1.0)).clamp(0.0, 1.0);
                for k in 0..3 {
                    c[k] = c[k] * (1.0 - a) + s.color[k] * a;
                }
            }
            for s in &stripes {
                let d = ((fy - s.cy).powi(2) + (fx - s.cx).powi(2)).sqrt();
                if d < s.r {
                    let u = (fx - s.cx) * s.angle.cos() + (fy - s.cy) * s.angle.sin();
                    let v = s.amp * (std::f64::consts::TAU * u / s.period).sin();
                    for ch in c.iter_mut() {
                        *ch += v;
                    }
                }
            }
            for ch in c {
                let n: f64 = rng.random_range(-0.01..0.01);
                data.push(((ch * exposure) + n).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Tensor::from_vec(&[h, w, 3], data).unwrap()
}

/// Result of [`fit_grid`].
#[derive(Clone, Debug)]
pub struct GridFit {
    pub grid: BilateralGrid<f32>,
    pub lambda: f64,
    /// `[gh, gw, d]`: weighted mean squared residual of each cell's own
    /// affine model over the pixels it touches (0 for empty cells).
    pub cell_residual: Tensor<f64>,
    /// `[gh, gw, d]`: total interpolation weight of each cell.
    pub cell_mass: Tensor<f64>,
}

impl GridFit {
    /// Mass-weighted mean of the per-cell residuals.
    pub fn mean_residual(&self) -> f64 {
        let m = self.cell_mass.sum();
        self.cell_residual.data().iter().zip(self.cell_mass.data()).map(|(r, w)| r * w).sum::<f64>() / m.max(f64::MIN_POSITIVE)
    }

    /// Slices the fitted grid with the luminance guide and applies it.
    pub fn render(&self, img: &Tensor<f32>) -> Result<Tensor<f32>> {
        let g = luminance_guide(img)?;
        apply_affine(&slice(&self.grid.0, &g)?, img)
    }
}

/// Cholesky solve of the 4×4 symmetric positive definite system `a x = b`
/// for three right-hand sides.
fn solve4(a: &[[f64; 4]; 4], b: &[[f64; 3]; 4]) -> [[f64; 3]; 4] {
    let mut l = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            l[i][j] = if i == j { (a[i][i] - s).max(1e-300).sqrt() } else { (a[i][j] - s) / l[j][j] };
        }
    }
    let mut x = [[0.0; 3]; 4];
    for c in 0..3 {
        let mut y = [0.0; 4];
        for i in 0..4 {
            y[i] = (b[i][c] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
        }
        for i in (0..4).rev() {
            x[i][c] = (y[i] - (i + 1..4).map(|k| l[k][i] * x[k][c]).sum::<f64>()) / l[i][i];
        }
    }
    x
}

/// Fits a `[gh, gw, d, 12]` grid of affine transforms mapping `input` to
/// `output` under the luminance guide. Each cell solves its own weighted
/// least-squares problem, pixels weighted by the same tents slicing uses,
/// with Tikhonov regularization `lambda * mass` toward the identity.
pub fn fit_grid(input: &Tensor<f32>, output: &Tensor<f32>, gh: usize, gw: usize, d: usize, lambda: f64) -> Result<GridFit> {
    if input.shape() != output.shape() || input.rank() != 3 || input.channels() != 3 {
        return Err(Error::Shape(format!("fit_grid: {:?} vs {:?}", input.shape(), output.shape())));
    }
    if gh == 0 || gw == 0 || d == 0 {
        return Err(Error::Config("grid extents must be positive".into()));
    }
    let (h, w) = (input.shape()[0], input.shape()[1]);
    let cells = gh * gw * d;
    let mut gram = vec![[[0.0f64; 4]; 4]; cells];
    let mut rhs = vec![[[0.0f64; 3]; 4]; cells];
    let mut tt = vec![0.0f64; cells];
    let mut mass = vec![0.0f64; cells];
    let xs: Vec<SliceAxis<f64>> = (0..w).map(|x| SliceAxis::spatial(x, w, gw)).collect();
    for y in 0..h {
        let sy = SliceAxis::<f64>::spatial(y, h, gh);
        for (x, &sx) in xs.iter().enumerate() {
            let i = y * w + x;
            let p = &input.data()[3 * i..3 * i + 3];
            let t = &output.data()[3 * i..3 * i + 3];
            let phi = [p[0] as f64, p[1] as f64, p[2] as f64, 1.0];
            let t = [t[0] as f64, t[1] as f64, t[2] as f64];
            let g = (phi[0] + phi[1] + phi[2]) / 3.0;
            let sz = SliceAxis::depth(g, d);
            for (iy, wy) in [(sy.lo, 1.0 - sy.frac), (sy.hi, sy.frac)] {
                for (ix, wx) in [(sx.lo, 1.0 - sx.frac), (sx.hi, sx.frac)] {
                    for (iz, wz) in [(sz.lo, 1.0 - sz.frac), (sz.hi, sz.frac)] {
                        let wt = wy * wx * wz;
                        if wt == 0.0 {
                            continue;
                        }
                        let c = (iy * gw + ix) * d + iz;
                        mass[c] += wt;
                        tt[c] += wt * (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]);
                        for a in 0..4 {
                            for b in 0..4 {
                                gram[c][a][b] += wt * phi[a] * phi[b];
                            }
                            for k in 0..3 {
                                rhs[c][a][k] += wt * phi[a] * t[k];
                            }
                        }
                    }
                }
            }
        }
    }
    let mut grid = vec![0.0f32; cells * 12];
    let mut residual = vec![0.0f64; cells];
    for c in 0..cells {
        let reg = lambda * mass[c] + 1e-12;
        let mut a = gram[c];
        let mut b = rhs[c];
        for i in 0..4 {
            a[i][i] += reg;
            if i < 3 {
                b[i][i] += reg;
            }
        }
        let x = solve4(&a, &b);
        if mass[c] > 0.0 {
            // Σ w |Xᵀφ - t|² = tᵀt - 2 tr(XᵀB) + tr(XᵀGX)
            let mut e = tt[c];
            for k in 0..3 {
                for i in 0..4 {
                    e -= 2.0 * x[i][k] * rhs[c][i][k];
                    for j in 0..4 {
                        e += x[i][k] * gram[c][i][j] * x[j][k];
                    }
                }
            }
            residual[c] = e.max(0.0) / mass[c];
        }
        for k in 0..3 {
            for i in 0..4 {
                grid[c * 12 + 4 * k + i] = x[i][k] as f32;
            }
        }
    }
    Ok(GridFit {
        grid: BilateralGrid(Tensor::from_vec(&[gh, gw, d, 12], grid)?),
        lambda,
        cell_residual: Tensor::from_vec(&[gh, gw, d], residual)?,
        cell_mass: Tensor::from_vec(&[gh, gw, d], mass)?,
    })
}

/// Where [`make_dataset`] gets its inputs.
#[derive(Clone, Debug)]
pub enum Source {
    /// Synthetic scenes of the given side length.
    Synthetic { size: usize },
    /// PNG/PPM files from a directory, in name order.
    Directory(PathBuf),
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: PathBuf,
    pub pairs: Vec<(PathBuf, PathBuf)>,
    /// Source files that could not be read.
    pub skipped: Vec<String>,
}

pub const MANIFEST_NAME: &str = "manifest.tsv";
pub const SPEC_NAME: &str = "operator.txt";

/// Writes `n` input/target pairs as 16-bit PNGs under `out_dir`, a
/// manifest of relative paths and the operator spec. Targets are computed
/// from the quantized inputs.
pub fn make_dataset(spec: &OperatorSpec, source: &Source, out_dir: &Path, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut skipped = Vec::new();
    let inputs: Vec<(String, Tensor<f32>)> = match source {
        Source::Synthetic { size } => (0..n).map(|i| (format!("{i:05}"), synth_image(*size, *size, seed.wrapping_add(i as u64)))).collect(),
        Source::Directory(dir) => {
            let mut files: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            let mut out = Vec::new();
            for f in files {
                if out.len() == n {
                    break;
                }
                match io::load_image(&f) {
                    Ok(img) => out.push((f.file_stem().unwrap_or_default().to_string_lossy().into_owned(), img)),
                    Err(e) => skipped.push(e.to_string()),
                }
            }
            out
        }
    };
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for sub in ["inputs", "targets"] {
        fs::create_dir_all(out_dir.join(sub)).map_err(|e| Error::io(out_dir.join(sub), e))?;
    }
    let mut pairs = Vec::new();
    let mut lines = String::new();
    for (stem, img) in inputs {
        let rel_in = PathBuf::from("inputs").join(format!("{stem}.png"));
        let rel_out = PathBuf::from("targets").join(format!("{stem}.png"));
        let img = io::quantize(&img, BitDepth::Sixteen);
        let target = apply_operator(spec, &img)?;
        io::save_image_depth(&out_dir.join(&rel_in), &img, BitDepth::Sixteen)?;
        io::save_image_depth(&out_dir.join(&rel_out), &target, BitDepth::Sixteen)?;
        lines.push_str(&format!("{}\t{}\n", rel_in.display(), rel_out.display()));
        pairs.push((out_dir.join(rel_in), out_dir.join(rel_out)));
    }
    let manifest = out_dir.join(MANIFEST_NAME);
    fs::write(&manifest, lines).map_err(|e| Error::io(&manifest, e))?;
    let mut meta = spec.to_key_values();
    meta.push_str(&format!("seed={seed}\ncount={}\n", pairs.len()));
    if let Source::Synthetic { size } = source {
        meta.push_str(&format!("size={size}\n"));
    }
    fs::write(out_dir.join(SPEC_NAME), meta).map_err(|e| Error::io(out_dir.join(SPEC_NAME), e))?;
    Ok(Dataset { manifest, pairs, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::psnr;

    fn img(seed: u64, n: usize) -> Tensor<f32> {
        synth_image(n, n, seed)
    }

    fn noise(seed: u64, n: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, n, 3], |_| rng.random::<f32>())
    }

    #[test]
    fn operator_examples() {
        let x = img(1, 24);
        assert_eq!(apply_operator(&OperatorSpec::Identity, &x).unwrap(), x);
        let q = Tensor::full(&[4, 4, 3], 0.25f32);
        let g = apply_operator(&OperatorSpec::GammaSat { gamma: 2.0, saturation: 1.7 }, &q).unwrap();
        assert!(g.data().iter().all(|v| (v - 0.0625).abs() < 1e-7));
        let perm = OperatorSpec::CrossChannel {
            matrix: [0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0],
            bias: [0.0; 3],
        };
        let p = apply_operator(&perm, &x).unwrap();
        for (a, b) in p.data().chunks(3).zip(x.data().chunks(3)) {
            assert_eq!(a, [b[1], b[2], b[0]]);
        }
    }

    #[test]
    fn operators_stay_in_range() {
        let x = img(2, 32);
        for kind in OperatorKind::ALL {
            let y = apply_operator(&OperatorSpec::preset(kind), &x).unwrap();
            assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)), "{}", kind.name());
        }
    }

    #[test]
    fn spec_key_values_round_trip() {
        for kind in OperatorKind::ALL {
            let s = OperatorSpec::preset(kind);
            assert_eq!(OperatorSpec::from_key_values(&s.to_key_values()).unwrap(), s);
        }
        assert!(OperatorSpec::from_key_values("kind=sepia\n").is_err());
    }

    #[test]
    fn box_blur_matches_direct_sum() {
        let (h, w, r) = (7, 9, 2);
        let plane: Vec<f64> = (0..h * w).map(|i| ((i * 37) % 11) as f64).collect();
        let fast = box_blur(&plane, h, w, r);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for dy in -(r as isize)..=r as isize {
                    for dx in -(r as isize)..=r as isize {
                        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        s += plane[yy * w + xx];
                    }
                }
                assert!((fast[y * w + x] - s / 25.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fit_identity_and_scaling() {
        let x = img(3, 40);
        let fit = fit_grid(&x, &x, 4, 4, 4, 1e-3).unwrap();
        assert!(fit.mean_residual() < 1e-12);
        for cell in fit.grid.0.data().chunks(12) {
            for (a, b) in cell.iter().zip(IDENTITY_AFFINE) {
                assert!((*a as f64 - b).abs() < 1e-4);
            }
        }
        let x = noise(3, 40);
        let doubled = x.map(|v| 2.0 * v);
        let fit = fit_grid(&x, &doubled, 4, 4, 4, 1e-6).unwrap();
        let nonempty = fit.cell_mass.data().iter().map(|&m| m > 1.0).collect::<Vec<_>>();
        for (cell, ok) in fit.grid.0.data().chunks(12).zip(nonempty) {
            if ok {
                for (a, b) in cell.iter().zip(IDENTITY_AFFINE) {
                    assert!((*a as f64 - 2.0 * b).abs() < 1e-3, "{cell:?}");
                }
            }
        }
    }

    #[test]
    fn banded_operator_is_fit_closely() {
        let x = img(4, 128);
        let spec = OperatorSpec::guide_dependent_bands(4, 0.075, 5);
        let y = apply_operator(&spec, &x).unwrap();
        let fit = fit_grid(&x, &y, 8, 8, 4, 1e-3).unwrap();
        let p = psnr(&fit.render(&x).unwrap(), &y).unwrap();
        assert!(p > 45.0, "{p}");
    }

    #[test]
    fn residual_shrinks_with_depth() {
        let x = img(5, 64);
        let y = apply_operator(&OperatorSpec::preset(OperatorKind::GuideDependent), &x).unwrap();
        let r: Vec<f64> = [2, 4, 8].iter().map(|&d| fit_grid(&x, &y, 4, 4, d, 1e-3).unwrap().mean_residual()).collect();
        assert!(r[0] >= r[1] && r[1] >= r[2], "{r:?}");
    }

    #[test]
    fn synthetic_dataset_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let src = Source::Synthetic { size: 16 };
        let da = make_dataset(&OperatorSpec::Identity, &src, a.path(), 3, 7).unwrap();
        make_dataset(&OperatorSpec::Identity, &src, b.path(), 3, 7).unwrap();
        assert_eq!(fs::read(&da.manifest).unwrap(), fs::read(b.path().join(MANIFEST_NAME)).unwrap());
        for (i, t) in &da.pairs {
            assert_eq!(fs::read(i).unwrap(), fs::read(t).unwrap());
        }
        let err = make_dataset(&OperatorSpec::Identity, &src, a.path(), 0, 7).unwrap_err();
        assert_eq!(err.to_string(), "empty dataset");
    }
}
