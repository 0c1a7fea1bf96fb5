//! The low-resolution stream: a strided convolution stack splits into a
//! local (convolutional) and a global (convolutional + fully connected)
//! path, the two are fused, and a pointwise linear layer predicts a map of
//! affine coefficients that is reinterpreted as a bilateral grid.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{GuideVars, Tape, Var};
use crate::bilateral::{GuideParams, CURVE_KNOTS};
use crate::error::{Error, Result};
use crate::kernels::{conv_out_extent, Mode, BN_EPS, BN_MOMENTUM};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Architecture switches used for ablation studies. All off is the full
/// model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Fusion sees only the local path.
    #[serde(default)]
    pub no_global: bool,
    /// Replace the learned low-level stack with fixed histogram splatting.
    #[serde(default)]
    pub hard_splat: bool,
    /// Use `(r + g + b) / 3` instead of the learned guide.
    #[serde(default)]
    pub luma_guide: bool,
}

impl Ablation {
    pub fn label(&self) -> &'static str {
        match (self.no_global, self.hard_splat, self.luma_guide) {
            (false, false, false) => "full",
            (true, false, false) => "no-global",
            (false, true, false) => "hard-splat",
            (false, false, true) => "luma-guide",
            _ => "mixed",
        }
    }
}

/// Starting point of the prediction layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionInit {
    /// Zero weights and a bias that makes every cell the identity color
    /// transform.
    #[default]
    Identity,
    /// He-normal weights and zero bias, like every other layer.
    HeNormal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Strided low-level layers; the grid is `lowres_size / 2^n_lowlevel`.
    pub n_lowlevel: usize,
    /// Stride-1 local layers.
    pub n_local: usize,
    /// Strided convolutions at the head of the global path (three fully
    /// connected layers follow).
    pub n_global_conv: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub grid_depth: usize,
    /// Full-resolution features; only the input colors are supported.
    pub n_phi: usize,
    pub channel_multiplier: f64,
    pub lowres_size: usize,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub prediction_init: PredictionInit,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            n_lowlevel: 4,
            n_local: 2,
            n_global_conv: 2,
            grid_w: 16,
            grid_h: 16,
            grid_depth: 8,
            n_phi: 3,
            channel_multiplier: 1.0,
            lowres_size: 256,
            ablation: Ablation::default(),
            prediction_init: PredictionInit::default(),
        }
    }
}

/// Number of intensity bins of the hard-coded splat (4 channels each).
pub const SPLAT_BINS: usize = 16;

const FC_LAYERS: usize = 3;

impl NetConfig {
    /// Small network: three strided layers from 64×64 onto an 8×8 grid,
    /// quarter channel widths.
    pub fn tiny(depth: usize) -> Self {
        Self {
            n_lowlevel: 3,
            grid_w: 8,
            grid_h: 8,
            grid_depth: depth,
            channel_multiplier: 0.25,
            lowres_size: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_phi != 3 {
            return fail(format!("n_phi must be 3 (features are the input colors), got {}", self.n_phi));
        }
        if self.grid_w != self.grid_h {
            return fail(format!("grid must be square, got {}x{}", self.grid_w, self.grid_h));
        }
        if self.n_lowlevel == 0 || self.lowres_size != self.grid_w << self.n_lowlevel {
            return fail(format!(
                "lowres_size {} must equal grid_w {} * 2^n_lowlevel ({})",
                self.lowres_size, self.grid_w, self.n_lowlevel
            ));
        }
        if self.grid_depth == 0 || self.n_global_conv == 0 {
            return fail("grid_depth and n_global_conv must be positive".into());
        }
        if !(self.channel_multiplier > 0.0 && self.channel_multiplier.is_finite()) {
            return fail(format!("channel_multiplier must be positive, got {}", self.channel_multiplier));
        }
        Ok(())
    }

    fn scaled(&self, base: usize) -> usize {
        ((base as f64) * self.channel_multiplier).ceil().max(1.0) as usize
    }

    /// Output channels of low-level layer `i` (1-based): 8, 16, 32, ...
    pub fn lowlevel_channels(&self, i: usize) -> usize {
        self.scaled(8 << (i - 1))
    }

    /// Channel width of the local, global-conv and fusion layers.
    pub fn features(&self) -> usize {
        self.lowlevel_channels(self.n_lowlevel)
    }

    /// Channels entering the local and global paths.
    pub fn trunk_channels(&self) -> usize {
        if self.ablation.hard_splat {
            4 * SPLAT_BINS
        } else {
            self.features()
        }
    }

    /// Widths of the fully connected layers: 4F, 2F, F.
    pub fn fc_widths(&self) -> [usize; FC_LAYERS] {
        let f = self.features();
        [4 * f, 2 * f, f]
    }

    /// Spatial extent of the last global convolution.
    pub fn global_extent(&self) -> usize {
        (0..self.n_global_conv).fold(self.grid_w, |n, _| conv_out_extent(n, 2))
    }

    pub fn coeffs_per_cell(&self) -> usize {
        (self.n_phi + 1) * 3
    }

    pub fn prediction_channels(&self) -> usize {
        self.grid_depth * self.coeffs_per_cell()
    }

    /// Every learnable tensor: name, shape, whether it takes weight decay,
    /// in canonical order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>, bool)> {
        let mut out = Vec::new();
        let conv = |out: &mut Vec<_>, name: String, cin: usize, cout: usize| {
            out.push((format!("{name}.weight"), vec![3, 3, cin, cout], true));
            out.push((format!("{name}.bias"), vec![cout], true));
            out.push((format!("{name}.bn.scale"), vec![cout], false));
            out.push((format!("{name}.bn.shift"), vec![cout], false));
        };
        if !self.ablation.hard_splat {
            let mut cin = 3;
            for i in 1..=self.n_lowlevel {
                let c = self.lowlevel_channels(i);
                conv(&mut out, format!("S{i}"), cin, c);
                cin = c;
            }
        }
        let f = self.features();
        let trunk = self.trunk_channels();
        for i in 1..=self.n_local {
            conv(&mut out, format!("L{i}"), if i == 1 { trunk } else { f }, f);
        }
        if !self.ablation.no_global {
            for i in 1..=self.n_global_conv {
                conv(&mut out, format!("G{i}"), if i == 1 { trunk } else { f }, f);
            }
            let ge = self.global_extent();
            let mut fin = ge * ge * f;
            for (j, width) in self.fc_widths().into_iter().enumerate() {
                let name = format!("G{}", self.n_global_conv + 1 + j);
                out.push((format!("{name}.weight"), vec![fin, width], true));
                out.push((format!("{name}.bias"), vec![width], true));
                out.push((format!("{name}.bn.scale"), vec![width], false));
                out.push((format!("{name}.bn.shift"), vec![width], false));
                fin = width;
            }
            out.push(("fusion.global_weight".into(), vec![fin, f], true));
        }
        out.push(("fusion.local_weight".into(), vec![f, f], true));
        out.push(("fusion.bias".into(), vec![f], true));
        out.push(("pred.weight".into(), vec![f, self.prediction_channels()], true));
        out.push(("pred.bias".into(), vec![self.prediction_channels()], true));
        out.push(("guide.ccm".into(), vec![3, 3], true));
        out.push(("guide.ccm_bias".into(), vec![3], true));
        out.push(("guide.slopes".into(), vec![3, CURVE_KNOTS], false));
        out.push(("guide.thresholds".into(), vec![3, CURVE_KNOTS], false));
        out.push(("guide.bias".into(), vec![1], true));
        out
    }

    /// Names of the batch-normalized layers, in forward order.
    pub fn bn_layers(&self) -> Vec<String> {
        self.param_layout()
            .into_iter()
            .filter_map(|(n, _, _)| n.strip_suffix(".bn.scale").map(str::to_string))
            .collect()
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

/// Batch statistics gathered by a train-mode forward pass, per layer.
pub type BnStats<T> = Vec<(String, Vec<T>, Vec<T>)>;

/// All learnable weights plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: NetConfig,
    pub store: ParamStore<T>,
    /// Bias-corrected exponential averages of the batch statistics.
    pub running: BTreeMap<String, RunningStats<T>>,
    /// Number of train-mode batches folded into `running`.
    pub bn_updates: u64,
}

/// Index in the prediction layer of coefficient `k` at depth `z`.
#[inline]
pub fn unrolled_channel(depth: usize, z: usize, k: usize) -> usize {
    depth * k + z
}

impl<T: Real> ModelParams<T> {
    /// He-normal weights, zero biases, unit batch-norm scale, identity guide;
    /// the prediction layer follows `config.prediction_init`.
    pub fn init(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let guide = GuideParams::<T>::identity();
        let d = config.grid_depth;
        let nc = config.coeffs_per_cell();
        for (name, shape, decay) in config.param_layout() {
            let value = if name.ends_with(".bn.scale") {
                Tensor::full(&shape, T::one())
            } else if name == "pred.weight" && config.prediction_init == PredictionInit::Identity {
                Tensor::zeros(&shape)
            } else if name == "pred.bias" && config.prediction_init == PredictionInit::Identity {
                let mut b = Tensor::zeros(&shape);
                for c in 0..3 {
                    let k = (config.n_phi + 1) * c + c;
                    debug_assert!(k < nc);
                    for z in 0..d {
                        b.data_mut()[unrolled_channel(d, z, k)] = T::one();
                    }
                }
                b
            } else if name.ends_with("weight") {
                let fan_in: usize = shape[..shape.len() - 1].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                Tensor::from_fn(&shape, |_| T::lit(normal.sample(&mut rng)))
            } else {
                match name.as_str() {
                    "guide.ccm" => guide.ccm.clone(),
                    "guide.ccm_bias" => guide.ccm_bias.clone(),
                    "guide.slopes" => guide.slopes.clone(),
                    "guide.thresholds" => guide.thresholds.clone(),
                    "guide.bias" => guide.bias.clone(),
                    _ => Tensor::zeros(&shape),
                }
            };
            store.add(&name, value, decay);
        }
        let running = config
            .bn_layers()
            .into_iter()
            .map(|layer| {
                let c = store.by_name(&format!("{layer}.bn.scale")).unwrap().value.len();
                (
                    layer,
                    RunningStats {
                        mean: Tensor::zeros(&[c]),
                        var: Tensor::full(&[c], T::one()),
                    },
                )
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            store,
            running,
            bn_updates: 0,
        })
    }

    pub fn param(&self, name: &str) -> &Tensor<T> {
        &self.store.by_name(name).expect("parameter present").value
    }

    pub fn guide_params(&self) -> GuideParams<T> {
        GuideParams {
            ccm: self.param("guide.ccm").clone(),
            ccm_bias: self.param("guide.ccm_bias").clone(),
            slopes: self.param("guide.slopes").clone(),
            thresholds: self.param("guide.thresholds").clone(),
            bias: self.param("guide.bias").clone(),
        }
    }

    /// Folds batch statistics into the running averages. The averages are
    /// bias-corrected: after `t` updates each holds
    /// `Σ_i (1 - m) m^(t-i) x_i / (1 - m^t)`, so the initial values carry
    /// no weight once a batch has been seen.
    pub fn update_running(&mut self, stats: &BnStats<T>) {
        self.bn_updates += 1;
        let m = BN_MOMENTUM;
        let t = self.bn_updates.min(i32::MAX as u64) as i32;
        let norm = 1.0 - m.powi(t);
        let keep = T::lit(m * (1.0 - m.powi(t - 1)) / norm);
        let take = T::lit((1.0 - m) / norm);
        for (layer, mean, var) in stats {
            let r = self.running.get_mut(layer).expect("known layer");
            for (a, &b) in r.mean.data_mut().iter_mut().zip(mean) {
                *a = keep * *a + take * b;
            }
            for (a, &b) in r.var.data_mut().iter_mut().zip(var) {
                *a = keep * *a + take * b;
            }
        }
    }

    /// Every stored tensor by name: parameters, then running statistics.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<_> = self.store.iter().map(|p| (p.name.clone(), &p.value)).collect();
        for (layer, r) in &self.running {
            out.push((format!("{layer}.bn.running_mean"), &r.mean));
            out.push((format!("{layer}.bn.running_var"), &r.var));
        }
        out
    }

    /// Mutable access to a stored tensor by the names of [`Self::named_tensors`].
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        if let Some(i) = self.store.position(name) {
            return Some(&mut self.store.get_mut(i).value);
        }
        let (layer, which) = name.rsplit_once(".bn.")?;
        let r = self.running.get_mut(layer)?;
        match which {
            "running_mean" => Some(&mut r.mean),
            "running_var" => Some(&mut r.var),
            _ => None,
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            store: self.store.cast(),
            running: self
                .running
                .iter()
                .map(|(k, r)| {
                    (
                        k.clone(),
                        RunningStats {
                            mean: r.mean.cast(),
                            var: r.var.cast(),
                        },
                    )
                })
                .collect(),
            bn_updates: self.bn_updates,
        }
    }
}

/// Parameters bound as leaves of a tape.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Binds every parameter; `trainable` leaves track gradients and write
    /// back to the store through [`crate::autodiff::Gradients::write_params`].
    pub fn bind<T: Real>(tape: &mut Tape<T>, model: &ModelParams<T>, trainable: bool) -> Self {
        let vars = (0..model.store.len())
            .map(|i| {
                if trainable {
                    tape.param(&model.store, i)
                } else {
                    tape.leaf(model.store.get(i).value.clone(), false)
                }
            })
            .collect();
        Self { vars }
    }

    pub fn get<T: Real>(&self, model: &ModelParams<T>, name: &str) -> Var {
        self.vars[model.store.position(name).unwrap_or_else(|| panic!("no parameter {name}"))]
    }

    pub fn guide<T: Real>(&self, model: &ModelParams<T>) -> GuideVars {
        GuideVars {
            ccm: self.get(model, "guide.ccm"),
            ccm_bias: self.get(model, "guide.ccm_bias"),
            slopes: self.get(model, "guide.slopes"),
            thresholds: self.get(model, "guide.thresholds"),
            bias: self.get(model, "guide.bias"),
        }
    }
}

/// Fixed bilateral splat of `[N, L, L, 3]` into `[N, cells, cells, 4 * bins]`:
/// per cell, every pixel adds `(r, g, b, 1) / pixels_per_cell` to the bin of
/// its mean intensity.
pub fn hard_splat<T: Real>(lowres: &Tensor<T>, cells: usize, bins: usize) -> Result<Tensor<T>> {
    let [n, h, w, c] = crate::kernels::as_batch(lowres.shape())?;
    if c != 3 || h != w || h % cells != 0 {
        return Err(Error::Shape(format!("hard_splat: {:?} onto {cells} cells", lowres.shape())));
    }
    let s = h / cells;
    let inv = T::one() / T::from_usize(s * s).unwrap();
    let third = T::one() / T::lit(3.0);
    let ch = 4 * bins;
    let mut out = Tensor::zeros(&[n, cells, cells, ch]);
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let p = &lowres.data()[((b * h + y) * w + x) * 3..][..3];
                let l = (p[0] + p[1] + p[2]) * third;
                let bin = (l * T::from_usize(bins).unwrap()).floor().to_i64().unwrap().clamp(0, bins as i64 - 1) as usize;
                let o = ((b * cells + y / s) * cells + x / s) * ch + 4 * bin;
                let cell = &mut out.data_mut()[o..o + 4];
                for k in 0..3 {
                    cell[k] += p[k] * inv;
                }
                cell[3] += inv;
            }
        }
    }
    Ok(out)
}

/// Tape output of the low-res stream.
pub struct LowresOutput<T> {
    /// `[N, gh, gw, d * 12]`
    pub coeffs: Var,
    /// `[N, gh, gw, d, 12]`
    pub grid: Var,
    /// Batch statistics (train mode only).
    pub bn_stats: BnStats<T>,
}

fn conv_bn_relu<T: Real>(
    tape: &mut Tape<T>,
    model: &ModelParams<T>,
    p: &BoundParams,
    x: Var,
    layer: &str,
    stride: usize,
    mode: Mode,
    stats: &mut BnStats<T>,
) -> Result<Var> {
    let y = tape.conv2d(x, p.get(model, &format!("{layer}.weight")), p.get(model, &format!("{layer}.bias")), stride)?;
    let y = norm(tape, model, p, y, layer, mode, stats)?;
    Ok(tape.relu(y))
}

fn norm<T: Real>(tape: &mut Tape<T>, model: &ModelParams<T>, p: &BoundParams, x: Var, layer: &str, mode: Mode, stats: &mut BnStats<T>) -> Result<Var> {
    let scale = p.get(model, &format!("{layer}.bn.scale"));
    let shift = p.get(model, &format!("{layer}.bn.shift"));
    let eps = T::lit(BN_EPS);
    match mode {
        Mode::Train => {
            let (y, mean, var) = tape.batch_norm_train(x, scale, shift, eps)?;
            stats.push((layer.to_string(), mean, var));
            Ok(y)
        }
        Mode::Infer => {
            let r = &model.running[layer];
            tape.batch_norm_infer(x, scale, shift, &r.mean, &r.var, eps)
        }
    }
}

/// Records the low-res stream on `tape`. `lowres` is `[N, L, L, 3]`.
pub fn build_lowres<T: Real>(tape: &mut Tape<T>, model: &ModelParams<T>, p: &BoundParams, lowres: Var, mode: Mode) -> Result<LowresOutput<T>> {
    let cfg = &model.config;
    let shape = tape.value(lowres).shape().to_vec();
    if shape.len() != 4 || shape[1] != cfg.lowres_size || shape[2] != cfg.lowres_size || shape[3] != 3 {
        return Err(Error::Contract(format!(
            "low-res input must be [N, {0}, {0}, 3] (the fully connected layers fix it), got {shape:?}",
            cfg.lowres_size
        )));
    }
    let n = shape[0];
    let mut stats = Vec::new();
    let trunk = if cfg.ablation.hard_splat {
        let s = hard_splat(tape.value(lowres), cfg.grid_w, SPLAT_BINS)?;
        tape.leaf(s, false)
    } else {
        let mut x = lowres;
        for i in 1..=cfg.n_lowlevel {
            x = conv_bn_relu(tape, model, p, x, &format!("S{i}"), 2, mode, &mut stats)?;
        }
        x
    };

    let mut local = trunk;
    for i in 1..=cfg.n_local {
        local = conv_bn_relu(tape, model, p, local, &format!("L{i}"), 1, mode, &mut stats)?;
    }

    let global = if cfg.ablation.no_global {
        None
    } else {
        let mut g = trunk;
        for i in 1..=cfg.n_global_conv {
            g = conv_bn_relu(tape, model, p, g, &format!("G{i}"), 2, mode, &mut stats)?;
        }
        let flat: usize = tape.value(g).shape()[1..].iter().product();
        g = tape.reshape(g, &[n, flat])?;
        for j in 0..FC_LAYERS {
            let layer = format!("G{}", cfg.n_global_conv + 1 + j);
            g = tape.dense(g, p.get(model, &format!("{layer}.weight")), p.get(model, &format!("{layer}.bias")))?;
            g = norm(tape, model, p, g, &layer, mode, &mut stats)?;
            g = tape.relu(g);
        }
        Some((g, p.get(model, "fusion.global_weight")))
    };

    let fused = tape.fusion(local, p.get(model, "fusion.local_weight"), p.get(model, "fusion.bias"), global)?;
    let fused = tape.relu(fused);
    let coeffs = tape.dense(fused, p.get(model, "pred.weight"), p.get(model, "pred.bias"))?;
    let grid = tape.unroll_grid(coeffs, cfg.grid_depth)?;
    Ok(LowresOutput {
        coeffs,
        grid,
        bn_stats: stats,
    })
}

/// The unreshaped prediction `[gh, gw, d * 12]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoeffMap<T>(pub Tensor<T>);

/// Coefficients as a grid `[gh, gw, d, 12]`; see [`reshape_to_grid`].
#[derive(Clone, Debug, PartialEq)]
pub struct BilateralGrid<T>(pub Tensor<T>);

/// Runs the low-res stream on one `[L, L, 3]` image. Train mode normalizes
/// with batch statistics and returns them without touching the model.
pub fn forward_lowres<T: Real>(model: &ModelParams<T>, lowres: &Tensor<T>, mode: Mode) -> Result<(CoeffMap<T>, BnStats<T>)> {
    let batch = match lowres.rank() {
        3 => lowres.clone().reshape(&[1, lowres.shape()[0], lowres.shape()[1], lowres.shape()[2]])?,
        _ => lowres.clone(),
    };
    let mut tape = Tape::new();
    let p = BoundParams::bind(&mut tape, model, false);
    let x = tape.leaf(batch, false);
    let out = build_lowres(&mut tape, model, &p, x, mode)?;
    let a = tape.value(out.coeffs).clone();
    let a = if lowres.rank() == 3 {
        let s = a.shape()[1..].to_vec();
        a.reshape(&s)?
    } else {
        a
    };
    Ok((CoeffMap(a), out.bn_stats))
}

/// Inference-mode coefficient prediction.
pub fn predict_coeffs<T: Real>(model: &ModelParams<T>, lowres: &Tensor<T>) -> Result<CoeffMap<T>> {
    Ok(forward_lowres(model, lowres, Mode::Infer)?.0)
}

/// `grid[.., z, k] = map[.., d * k + z]`; the trailing axis `d * K` of a
/// rank-3 or rank-4 tensor becomes `[d, K]`.
pub fn unroll<T: Real>(map: &Tensor<T>, depth: usize) -> Result<Tensor<T>> {
    let c = map.channels();
    if depth == 0 || c % depth != 0 {
        return Err(Error::Shape(format!("{c} channels do not unroll into depth {depth}")));
    }
    let k = c / depth;
    let mut out = Vec::with_capacity(map.len());
    for px in map.data().chunks(c) {
        for z in 0..depth {
            for kk in 0..k {
                out.push(px[unrolled_channel(depth, z, kk)]);
            }
        }
    }
    let mut shape = map.shape().to_vec();
    *shape.last_mut().unwrap() = depth;
    shape.push(k);
    Tensor::from_vec(&shape, out)
}

/// Inverse of [`unroll`].
pub fn roll<T: Real>(grid: &Tensor<T>, depth: usize) -> Result<Tensor<T>> {
    let r = grid.rank();
    if r < 2 || grid.shape()[r - 2] != depth {
        return Err(Error::Shape(format!("grid {:?} does not have depth {depth}", grid.shape())));
    }
    let k = grid.channels();
    let c = depth * k;
    let mut out = vec![T::zero(); grid.len()];
    for (dst, src) in out.chunks_mut(c).zip(grid.data().chunks(c)) {
        for z in 0..depth {
            for kk in 0..k {
                dst[unrolled_channel(depth, z, kk)] = src[z * k + kk];
            }
        }
    }
    let mut shape = grid.shape()[..r - 2].to_vec();
    shape.push(c);
    Tensor::from_vec(&shape, out)
}

pub fn reshape_to_grid<T: Real>(a: &CoeffMap<T>, cfg: &NetConfig) -> Result<BilateralGrid<T>> {
    if a.0.channels() != cfg.prediction_channels() {
        return Err(Error::Shape(format!(
            "coefficient map has {} channels, config needs {}",
            a.0.channels(),
            cfg.prediction_channels()
        )));
    }
    Ok(BilateralGrid(unroll(&a.0, cfg.grid_depth)?))
}

pub fn grid_to_coeffs<T: Real>(g: &BilateralGrid<T>, cfg: &NetConfig) -> Result<CoeffMap<T>> {
    Ok(CoeffMap(roll(&g.0, cfg.grid_depth)?))
}
