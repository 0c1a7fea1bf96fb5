//! Training: data handling, augmentation, the optimization loop and
//! evaluation metrics.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bilateral::luminance_guide;
use crate::coeffnet::{build_lowres, BoundParams, ModelParams, NetConfig};
use crate::error::{Error, Result};
use crate::kernels::Mode;
use crate::optim::AdamState;
use crate::autodiff::Tape;
use crate::pipeline::enhance;
use crate::tensor::{Real, Tensor};

/// An aligned input/target pair with values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct SamplePair {
    /// Identifier used for the train/validation split (usually a file name).
    pub name: String,
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
    lowres: OnceLock<Tensor<f32>>,
}

impl SamplePair {
    pub fn new(name: impl Into<String>, input: Tensor<f32>, target: Tensor<f32>) -> Result<Self> {
        let name = name.into();
        if input.rank() != 3 || input.channels() != 3 || input.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "pair {name}: input {:?} and target {:?} must both be [H, W, 3]",
                input.shape(),
                target.shape()
            )));
        }
        for (what, t) in [("input", &input), ("target", &target)] {
            if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Contract(format!("pair {name}: {what} has values outside [0, 1]")));
            }
        }
        Ok(Self {
            name,
            input,
            target,
            lowres: OnceLock::new(),
        })
    }

    /// Downsampled input, computed once per pair.
    pub fn lowres(&self, size: usize) -> Result<Tensor<f32>> {
        if let Some(t) = self.lowres.get().filter(|t| t.shape()[0] == size) {
            return Ok(t.clone());
        }
        let t = downsample_to_lowres(&self.input, size)?;
        let _ = self.lowres.set(t.clone());
        Ok(t)
    }
}

/// Source taps `(index, weight)` of each output sample when resampling
/// `n` samples onto `m` by area averaging.
fn area_taps(n: usize, m: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n as f64 / m as f64;
    (0..m)
        .map(|i| {
            let (a, b) = (i as f64 * scale, (i + 1) as f64 * scale);
            let first = a.floor() as usize;
            let last = (b.ceil() as usize).min(n);
            (first..last)
                .filter_map(|j| {
                    let overlap = (b.min(j as f64 + 1.0) - a.max(j as f64)).max(0.0);
                    (overlap > 0.0).then_some((j, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// Box (area-averaging) resample of `[H, W, C]` to `[size, size, C]`.
/// Same-size input is returned unchanged.
pub fn downsample_to_lowres<T: Real>(img: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
    if img.rank() != 3 {
        return Err(Error::Shape(format!("expected [H, W, C], got {:?}", img.shape())));
    }
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if h == size && w == size {
        return Ok(img.clone());
    }
    let xt = area_taps(w, size);
    let yt = area_taps(h, size);
    let mut rows = vec![T::zero(); h * size * c];
    for y in 0..h {
        for (x, taps) in xt.iter().enumerate() {
            let o = &mut rows[(y * size + x) * c..][..c];
            for &(j, wt) in taps {
                let wt = T::lit(wt);
                for (ch, v) in o.iter_mut().enumerate() {
                    *v += wt * img.data()[(y * w + j) * c + ch];
                }
            }
        }
    }
    let mut out = vec![T::zero(); size * size * c];
    for (y, taps) in yt.iter().enumerate() {
        for &(j, wt) in taps {
            let wt = T::lit(wt);
            let src = &rows[j * size * c..][..size * c];
            for (o, &v) in out[y * size * c..][..size * c].iter_mut().zip(src) {
                *o += wt * v;
            }
        }
    }
    Tensor::from_vec(&[size, size, c], out)
}

/// Mean squared error: per-image mean, then the mean over the batch.
pub fn mse_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    crate::kernels::mse(pred, target)
}

/// Peak signal-to-noise ratio in dB on the `[0, 1]` scale, with `pred`
/// clamped first. Capped at 100 dB.
pub fn psnr<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("psnr: {:?} vs {:?}", pred.shape(), target.shape())));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p.to_f64().unwrap().clamp(0.0, 1.0) - t.to_f64().unwrap();
            d * d
        })
        .sum();
    let mse = sum / pred.len() as f64;
    Ok(if mse < 1e-10 { 100.0 } else { (10.0 * (1.0 / mse).log10()).min(100.0) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    /// Square crop side; `None` keeps the whole image. Clamped to the
    /// image's smaller side.
    pub crop: Option<usize>,
    pub flips: bool,
    pub rotations: bool,
}

impl Default for Augment {
    fn default() -> Self {
        Self {
            crop: Some(512),
            flips: true,
            rotations: true,
        }
    }
}

impl Augment {
    pub fn none() -> Self {
        Self {
            crop: None,
            flips: false,
            rotations: false,
        }
    }
}

/// Rotates `[H, W, C]` counter-clockwise by `k` quarter turns.
pub fn rotate90<T: Real>(t: &Tensor<T>, k: usize) -> Tensor<T> {
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    match k % 4 {
        0 => t.clone(),
        2 => {
            let mut out = Vec::with_capacity(t.len());
            for px in t.data().chunks(c).rev() {
                out.extend_from_slice(px);
            }
            Tensor::from_vec(t.shape(), out).unwrap()
        }
        r => {
            let mut out = Vec::with_capacity(t.len());
            for y in 0..w {
                for x in 0..h {
                    // One turn reads column w-1-y top to bottom; three turns
                    // read column y bottom to top.
                    let (sy, sx) = if r == 1 { (x, w - 1 - y) } else { (h - 1 - x, y) };
                    out.extend_from_slice(&t.data()[(sy * w + sx) * c..][..c]);
                }
            }
            Tensor::from_vec(&[w, h, c], out).unwrap()
        }
    }
}

fn flip<T: Real>(t: &Tensor<T>, horizontal: bool) -> Tensor<T> {
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = Vec::with_capacity(t.len());
    for y in 0..h {
        let sy = if horizontal { y } else { h - 1 - y };
        for x in 0..w {
            let sx = if horizontal { w - 1 - x } else { x };
            out.extend_from_slice(&t.data()[(sy * w + sx) * c..][..c]);
        }
    }
    Tensor::from_vec(t.shape(), out).unwrap()
}

fn crop<T: Real>(t: &Tensor<T>, y0: usize, x0: usize, side: usize) -> Tensor<T> {
    let (w, c) = (t.shape()[1], t.shape()[2]);
    let mut out = Vec::with_capacity(side * side * c);
    for y in y0..y0 + side {
        out.extend_from_slice(&t.data()[(y * w + x0) * c..][..side * c]);
    }
    Tensor::from_vec(&[side, side, c], out).unwrap()
}

/// Draws one random geometric transform and applies it to both images.
pub fn augment<R: Rng>(pair: &SamplePair, aug: &Augment, rng: &mut R) -> SamplePair {
    let (h, w) = (pair.input.shape()[0], pair.input.shape()[1]);
    let mut input = pair.input.clone();
    let mut target = pair.target.clone();
    let mut square = h == w;
    if let Some(side) = aug.crop {
        let side = side.min(h).min(w);
        let y0 = rng.random_range(0..=h - side);
        let x0 = rng.random_range(0..=w - side);
        input = crop(&input, y0, x0, side);
        target = crop(&target, y0, x0, side);
        square = true;
    }
    if aug.flips {
        for horizontal in [true, false] {
            if rng.random_bool(0.5) {
                input = flip(&input, horizontal);
                target = flip(&target, horizontal);
            }
        }
    }
    if aug.rotations {
        let k = if square { rng.random_range(0..4) } else { 2 * rng.random_range(0..2) };
        input = rotate90(&input, k);
        target = rotate90(&target, k);
    }
    SamplePair {
        name: pair.name.clone(),
        input,
        target,
        lowres: OnceLock::new(),
    }
}

/// True when `name` belongs to the validation tenth.
pub fn is_validation(name: &str) -> bool {
    crc32fast::hash(name.as_bytes()) % 10 == 0
}

/// 9:1 split by a hash of each pair's name. When no name lands in the
/// validation bucket, the pair with the smallest hash is moved there so
/// validation is never empty for datasets of two or more pairs.
pub fn split_dataset(pairs: Vec<SamplePair>) -> (Vec<SamplePair>, Vec<SamplePair>) {
    let (mut train, mut val): (Vec<_>, Vec<_>) = pairs.into_iter().partition(|p| !is_validation(&p.name));
    if val.is_empty() && train.len() >= 2 {
        let i = (0..train.len()).min_by_key(|&i| (crc32fast::hash(train[i].name.as_bytes()), train[i].name.clone())).unwrap();
        val.push(train.remove(i));
    }
    (train, val)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps, running as many epochs as that
    /// takes. `None` runs exactly `epochs`.
    pub max_steps: Option<usize>,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: Augment,
    /// Validate every N steps; `None` validates at the end of each epoch.
    /// The last step is always validated.
    pub eval_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            epochs: 30,
            max_steps: None,
            lr: 1e-4,
            weight_decay: 1e-8,
            seed: 0,
            augment: Augment::default(),
            eval_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub val_psnr: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelParams<f32>,
    pub history: Vec<MetricRecord>,
    pub steps: usize,
}

impl TrainOutcome {
    /// Validation PSNR of the last evaluated step.
    pub fn final_val_psnr(&self) -> Option<f64> {
        self.history.iter().rev().find_map(|r| r.val_psnr)
    }
}

/// PSNR of the enhanced input against the target for every pair.
pub fn evaluate(model: &ModelParams<f32>, pairs: &[SamplePair]) -> Result<Vec<f64>> {
    pairs.iter().map(|p| psnr(&enhance(model, &p.input)?, &p.target)).collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// One optimizer step on a batch; returns the loss.
fn train_step(model: &mut ModelParams<f32>, adam: &mut AdamState<f32>, batch: &[SamplePair], step: usize) -> Result<f64> {
    let size = model.config.lowres_size;
    let inputs = Tensor::stack(&batch.iter().map(|p| p.input.clone()).collect::<Vec<_>>())?;
    let targets = Tensor::stack(&batch.iter().map(|p| p.target.clone()).collect::<Vec<_>>())?;
    let lowres = Tensor::stack(&batch.iter().map(|p| p.lowres(size)).collect::<Result<Vec<_>>>()?)?;

    let mut tape = Tape::new();
    let p = BoundParams::bind(&mut tape, model, true);
    let low = tape.leaf(lowres, false);
    let out = build_lowres(&mut tape, model, &p, low, Mode::Train)?;
    let guide = if model.config.ablation.luma_guide {
        let g = luminance_guide(&inputs)?;
        tape.leaf(g, false)
    } else {
        let phi = tape.leaf(inputs.clone(), false);
        tape.guide(phi, p.guide(model))?
    };
    let phi = tape.leaf(inputs, false);
    let coeffs = tape.slice(out.grid, guide)?;
    let pred = tape.apply_affine(coeffs, phi)?;
    let target = tape.leaf(targets, false);
    let loss = tape.mse(pred, target)?;
    let value = tape.value(loss).data()[0];

    let grads = tape.backward(loss)?;
    grads.write_params(&tape, &mut model.store, false);
    if !value.is_finite() {
        let param = model.store.first_non_finite().unwrap_or("none (loss only)").to_string();
        return Err(Error::NonFinite { step, param });
    }
    if let Some(param) = model.store.first_non_finite() {
        return Err(Error::NonFinite {
            step,
            param: param.to_string(),
        });
    }
    adam.step(&mut model.store);
    model.update_running(&out.bn_stats);
    Ok(value as f64)
}

/// Trains a fresh model. Without an explicit validation set the pairs are
/// split 9:1 by name. Every step appends a JSON line to `log` when given.
pub fn train(
    pairs: Vec<SamplePair>,
    val: Option<Vec<SamplePair>>,
    cfg: &TrainConfig,
    net: &NetConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    net.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (train, val) = match val {
        Some(v) => (pairs, v),
        None => split_dataset(pairs),
    };
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = ModelParams::<f32>::init(net, cfg.seed)?;
    let mut adam = AdamState::new(&model.store, cfg.lr as f32, cfg.weight_decay as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0bad_cafe);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.max_steps.unwrap_or(cfg.epochs * per_epoch);
    let start = Instant::now();
    let mut history = Vec::new();
    let mut step = 0;
    let mut epoch = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    while step < total {
        epoch += 1;
        order.shuffle(&mut rng);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            if step >= total {
                break;
            }
            let side = cfg
                .augment
                .crop
                .map(|c| idx.iter().fold(c, |m, &i| m.min(train[i].input.shape()[0]).min(train[i].input.shape()[1])));
            let aug = Augment {
                crop: side,
                ..cfg.augment.clone()
            };
            let batch: Vec<SamplePair> = idx.iter().map(|&i| augment(&train[i], &aug, &mut rng)).collect();
            step += 1;
            let loss = train_step(&mut model, &mut adam, &batch, step)?;
            let epoch_end = b + 1 == per_epoch;
            let due = match cfg.eval_every {
                Some(n) => step % n.max(1) == 0,
                None => epoch_end,
            };
            let val_psnr = if (due || step == total) && !val.is_empty() {
                Some(mean(&evaluate(&model, &val)?))
            } else {
                None
            };
            let record = MetricRecord {
                step,
                epoch,
                loss,
                val_psnr,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            if let Some(w) = log.as_mut() {
                let line = serde_json::to_string(&record).expect("record serializes");
                writeln!(w, "{line}").map_err(|e| Error::io("metrics log", e))?;
            }
            history.push(record);
        }
    }
    Ok(TrainOutcome {
        model,
        history,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_examples() {
        let c = Tensor::full(&[300, 170, 3], 0.37f64);
        let d = downsample_to_lowres(&c, 256).unwrap();
        assert!(d.data().iter().all(|v| (v - 0.37).abs() < 1e-12));

        let blocks = Tensor::from_fn(&[512, 512, 3], |i| ((i * 31) % 97) as f64 / 97.0);
        let d = downsample_to_lowres(&blocks, 256).unwrap();
        for (y, x, ch) in [(0, 0, 0), (17, 200, 2), (255, 255, 1)] {
            let m: f64 = [(0, 0), (0, 1), (1, 0), (1, 1)].iter().map(|&(dy, dx)| blocks.at(&[2 * y + dy, 2 * x + dx, ch])).sum::<f64>() / 4.0;
            assert!((d.at(&[y, x, ch]) - m).abs() < 1e-12);
        }

        let same = Tensor::from_fn(&[256, 256, 3], |i| (i % 13) as f32 / 13.0);
        assert_eq!(downsample_to_lowres(&same, 256).unwrap(), same);
    }

    #[test]
    fn fractional_downsample_preserves_mean() {
        let img = Tensor::from_fn(&[37, 53, 3], |i| ((i * 7) % 11) as f64);
        let d = downsample_to_lowres(&img, 16).unwrap();
        assert!((img.sum() / img.len() as f64 - d.sum() / d.len() as f64).abs() < 1e-9);
    }

    #[test]
    fn psnr_examples() {
        let a = Tensor::full(&[4, 4, 3], 0.5f32);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let b = Tensor::full(&[4, 4, 3], 0.6f64);
        let a = Tensor::full(&[4, 4, 3], 0.5f64);
        assert!((psnr(&b, &a).unwrap() - 20.0).abs() < 1e-9);
        let z = Tensor::zeros(&[2, 2, 3]);
        let o = Tensor::full(&[2, 2, 3], 1.0f64);
        assert!(psnr(&z, &o).unwrap().abs() < 1e-12);
    }

    fn pair(h: usize, w: usize, seed: usize) -> SamplePair {
        let t = Tensor::from_fn(&[h, w, 3], |i| ((i * 2654435761 + seed) % 1000) as f32 / 999.0);
        SamplePair::new(format!("p{seed}"), t.clone(), t).unwrap()
    }

    #[test]
    fn rotations_compose() {
        let p = pair(5, 7, 1);
        assert_eq!(rotate90(&rotate90(&p.input, 2), 2), p.input);
        assert_eq!(rotate90(&rotate90(&p.input, 1), 3), p.input);
        let r = rotate90(&p.input, 1);
        assert_eq!(r.shape(), &[7, 5, 3]);
        // Counter-clockwise: the top-right pixel moves to the top-left.
        assert_eq!(&r.data()[..3], &p.input.data()[6 * 3..7 * 3]);
    }

    #[test]
    fn augmentation_keeps_pairs_aligned() {
        let p = pair(40, 33, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let a = augment(&p, &Augment { crop: Some(24), ..Augment::default() }, &mut rng);
            assert_eq!(a.input, a.target);
            assert_eq!(a.input.shape(), &[24, 24, 3]);
        }
        let same = augment(&p, &Augment::none(), &mut rng);
        assert_eq!(same.input, p.input);
    }

    #[test]
    fn split_is_deterministic_and_nonempty() {
        let pairs: Vec<_> = (0..5).map(|i| pair(4, 4, i)).collect();
        let (t1, v1) = split_dataset(pairs.clone());
        let (t2, v2) = split_dataset(pairs);
        assert!(!v1.is_empty());
        assert_eq!(t1.len() + v1.len(), 5);
        assert_eq!(v1.iter().map(|p| &p.name).collect::<Vec<_>>(), v2.iter().map(|p| &p.name).collect::<Vec<_>>());
        assert_eq!(t1.len(), t2.len());
    }

    #[test]
    fn rejects_out_of_range_and_empty() {
        let bad = Tensor::full(&[2, 2, 3], 1.5f32);
        assert!(SamplePair::new("x", bad.clone(), bad).is_err());
        let err = train(Vec::new(), None, &TrainConfig::default(), &NetConfig::tiny(4), None).unwrap_err();
        assert_eq!(err.to_string(), "empty dataset");
    }

    #[test]
    fn zero_learning_rate_leaves_weights() {
        let pairs: Vec<_> = (0..6).map(|i| pair(64, 64, i)).collect();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 1,
            augment: Augment::none(),
            ..TrainConfig::default()
        };
        let net = NetConfig::tiny(4);
        let out = train(pairs, None, &cfg, &net, None).unwrap();
        let init = ModelParams::<f32>::init(&net, cfg.seed).unwrap();
        for (a, b) in out.model.store.iter().zip(init.store.iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }
}
