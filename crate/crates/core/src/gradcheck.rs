//! Finite-difference verification of analytic gradients, in `f64`.
//!
//! Each checked entry is perturbed by `±h`; the central difference is
//! compared with the analytic gradient. Entries where the forward and
//! backward one-sided differences disagree sit within `h` of a kink (ReLU
//! corner, tent peak, clamp edge); there the function has no derivative to
//! compare against, so they are counted as skipped rather than checked.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{GuideVars, Tape, Var};
use crate::bilateral::GuideParams;
use crate::error::Result;
use crate::tensor::Tensor;

/// Something with a scalar value and an analytic gradient.
pub trait Differentiable {
    fn value(&self, inputs: &[Tensor<f64>]) -> Result<f64>;
    fn gradient(&self, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>;
}

/// Adapts a tape-building closure: every input becomes a leaf that tracks
/// gradients and the closure returns the scalar loss.
pub struct TapeFn<F>(pub F);

impl<F> TapeFn<F>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    fn build(&self, inputs: &[Tensor<f64>]) -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = (self.0)(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    }
}

impl<F> Differentiable for TapeFn<F>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    fn value(&self, inputs: &[Tensor<f64>]) -> Result<f64> {
        let (tape, _, loss) = self.build(inputs)?;
        Ok(tape.value(loss).data()[0])
    }

    fn gradient(&self, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
        let (tape, vars, loss) = self.build(inputs)?;
        let grads = tape.backward(loss)?;
        Ok(vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect())
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error.
    pub scale_floor: f64,
    /// Relative disagreement of one-sided differences that marks a kink.
    pub kink_threshold: f64,
    /// Check at most this many entries per input (evenly strided).
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            scale_floor: 1e-6,
            kink_threshold: 1e-2,
            max_entries: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub tolerance: f64,
    pub inputs: Vec<InputReport>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|r| r.max_rel_error < self.tolerance && r.checked > 0)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &InputReport> {
        self.inputs.iter().filter(move |r| r.max_rel_error >= self.tolerance || r.checked == 0)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.inputs {
            let verdict = if r.max_rel_error < self.tolerance && r.checked > 0 { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<24} max rel err {:.3e} (entry {}, {} checked, {} at kinks) {verdict}",
                r.name, r.max_rel_error, r.worst_index, r.checked, r.skipped
            )?;
        }
        Ok(())
    }
}

/// Compares analytic and central-difference gradients for every named input.
pub fn check_gradients(f: &dyn Differentiable, inputs: &[(&str, Tensor<f64>)], opts: &GradCheckOptions) -> Result<GradReport> {
    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let analytic = f.gradient(&values)?;
    let base = f.value(&values)?;
    let h = opts.step;
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, (name, t)) in inputs.iter().enumerate() {
        let stride = opts.max_entries.map_or(1, |m| t.len().div_ceil(m).max(1));
        let mut report = InputReport {
            name: name.to_string(),
            max_rel_error: 0.0,
            worst_index: 0,
            checked: 0,
            skipped: 0,
        };
        for j in (0..t.len()).step_by(stride) {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + h;
            let plus = f.value(&values)?;
            values[i].data_mut()[j] = orig - h;
            let minus = f.value(&values)?;
            values[i].data_mut()[j] = orig;

            let fwd = (plus - base) / h;
            let bwd = (base - minus) / h;
            let spread = fwd.abs().max(bwd.abs()).max(opts.scale_floor);
            if (fwd - bwd).abs() > opts.kink_threshold * spread {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.scale_floor);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_index = j;
            }
        }
        reports.push(report);
    }
    Ok(GradReport {
        tolerance: opts.tolerance,
        inputs: reports,
    })
}

/// One checked instance of the standard suite.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub op: &'static str,
    pub instance: usize,
    pub report: GradReport,
}

/// Operations covered by [`standard_suite`].
pub const SUITE_OPS: [&str; 12] = [
    "conv2d",
    "conv2d_stride2",
    "dense",
    "relu",
    "batch_norm_train",
    "batch_norm_infer",
    "fusion",
    "prediction",
    "compute_guide",
    "slice",
    "apply_affine",
    "mse_loss",
];

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn mse_to(t: &mut Tape<f64>, y: Var, target: Tensor<f64>) -> Result<Var> {
    let target = t.leaf(target, false);
    t.mse(y, target)
}

/// Checks every differentiable operation on `instances` random cases each,
/// composed with an MSE loss against a random target.
pub fn standard_suite(instances: usize, seed: u64, opts: &GradCheckOptions) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for op in SUITE_OPS {
        for instance in 0..instances {
            let r = &mut rng;
            let n = r.random_range(1..3);
            let h = r.random_range(3..7);
            let w = r.random_range(3..7);
            let cin = r.random_range(1..4);
            let cout = r.random_range(1..4);
            let report = match op {
                "conv2d" | "conv2d_stride2" => {
                    let stride = if op == "conv2d" { 1 } else { 2 };
                    let oh = crate::kernels::conv_out_extent(h, stride);
                    let ow = crate::kernels::conv_out_extent(w, stride);
                    let target = uniform(&[n, oh, ow, cout], -1.0, 1.0, r);
                    let f = TapeFn(move |t: &mut Tape<f64>, v: &[Var]| {
                        let y = t.conv2d(v[0], v[1], v[2], stride)?;
                        mse_to(t, y, target.clone())
                    });
                    let inputs = [
                        ("input", uniform(&[n, h, w, cin], -1.0, 1.0, r)),
                        ("weight", uniform(&[3, 3, cin, cout], -1.0, 1.0, r)),
                        ("bias", uniform(&[cout], -1.0, 1.0, r)),
                    ];
                    check_gradients(&f, &inputs, opts)?
                }
                "dense" => {
                    let target = uniform(&[n, cout], -1.0, 1.0, r);
                    let f = TapeFn(move |t: &mut Tape<f64>, v: &[Var]| {
                        let y = t.dense(v[0], v[1], v[2])?;
                        mse_to(t, y, target.clone())
                    });
                    let inputs = [
                        ("input", uniform(&[n, cin + 2], -1.0, 1.0, r)),
                        ("weight", uniform(&[cin + 2, cout], -1.0, 1.0, r)),
                        ("bias", uniform(&[cout], -1.0, 1.0, r)),
                    ];
                    check_gradients(&f, &inputs, opts)?
                }
                "relu" => {
                    let target = uniform(&[n, h, cout], -1.0, 1.0, r);
                    let f = TapeFn(move |t: &mut Tape<f64>, v: &[Var]| {
                        let y = t.relu(v[0]);
                        mse_to(t, y, target.clone())
                    });
                    check_gradients(&f, &[("input", uniform(&[n, h, cout], -1.0, 1.0, r))], opts)?
                }
                "batch_norm_train" | "batch_norm_infer" => {
                    let shape = [n + 1, h, w, cout];
                    let target = uniform(&shape, -1.0, 1.0, r);
                    let mean = uniform(&[cout], -0.5, 0.5, r);
                    let var = uniform(&[cout], 0.5, 2.0, r);
                    let train = op == "batch_norm_train";
                    let f = TapeFn(move |t: &mut Tape<f64>, v: &[Var]| {
                        let y = if train {
                            t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0
                        } else {
                            t.batch_norm_infer(v[0], v[1], v[2], &mean, &var, 1e-5)?
                        };
                        mse_to(t, y, target.clone())
                    });
                    let inputs = [
                        ("input", uniform(&shape, -1.0, 1.0, r)),
                        ("scale", uniform(&[cout], 0.5, 1.5, r)),
                        ("shift", uniform(&[cout], -0.5, 0.5, r)),
                    ];
                    check_gradients(&f, &inputs, opts)?
                }
                "fusion" => {
                    let (c, cg) = (cin + 1, cout + 1);
                    let target = uniform(&[n, h, w, c], -1.0, 1.0, r);
                    let f = TapeFn(move |t: &mut Tape<f64>, v: &[Var]| {
                        let y = t.fusion(v[0], v[1], v[2], Some((v[3], v[4])))?;
                        let y = t.relu(y);
                        mse_to(t, y, target.clone())
                    });
                    let inputs = [
                        ("local", uniform(&[n, h, w, c], -1.0, 1.0, r)),
                        ("w_local", uniform(&[c, c], -1.0, 1.0, r)),
                        ("bias", uniform(&[c], -1.0, 1.0, r)),
                        ("global", uniform(&[n, cg], -1.0, 1.0, r)),
                        ("w_global", uniform(&[cg, c], -1.0, 1.0, r)),
                    ];
                    check_gradients(&f, &inputs, opts)?
                }
                "prediction" => {
                    let depth = r.random_range(1..4);
                    let c = cin + 1;
                    let target = uniform(&[n, h, w, depth, 12], -1.0, 1.0, r);
                    let f = TapeFn(move |t: &mut Tape<f64>, v: &[Var]| {
                        let a = t.dense(v[0], v[1], v[2])?;
                        let g = t.unroll_grid(a, depth)?;
                        mse_to(t, g, target.clone())
                    });
                    let inputs = [
                        ("features", uniform(&[n, h, w, c], -1.0, 1.0, r)),
                        ("weight", uniform(&[c, 12 * depth], -1.0, 1.0, r)),
                        ("bias", uniform(&[12 * depth], -1.0, 1.0, r)),
                    ];
                    check_gradients(&f, &inputs, opts)?
                }
                "compute_guide" => {
                    // Perturbed identity parameters keep most pixels inside
                    // the unclamped range.
                    let gp = GuideParams::<f64>::identity();
                    let jitter = |t: &Tensor<f64>, s: f64, r: &mut ChaCha8Rng| {
                        let mut t = t.clone();
                        t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-s..s));
                        t
                    };
                    let ccm = jitter(&gp.ccm, 0.1, r);
                    let ccm_bias = jitter(&gp.ccm_bias, 0.05, r);
                    let slopes = jitter(&gp.slopes, 0.1, r);
                    let thresholds = jitter(&gp.thresholds, 0.02, r);
                    let bias = jitter(&gp.bias, 0.05, r);
                    let target = uniform(&[n, h, w, 1], 0.0, 1.0, r);
                    let f = TapeFn(move |t: &mut Tape<f64>, v: &[Var]| {
                        let g = t.guide(
                            v[0],
                            GuideVars {
                                ccm: v[1],
                                ccm_bias: v[2],
                                slopes: v[3],
                                thresholds: v[4],
                                bias: v[5],
                            },
                        )?;
                        mse_to(t, g, target.clone())
                    });
                    let inputs = [
                        ("phi", uniform(&[n, h, w, 3], 0.05, 0.95, r)),
                        ("ccm", ccm),
                        ("ccm_bias", ccm_bias),
                        ("slopes", slopes),
                        ("thresholds", thresholds),
                        ("bias", bias),
                    ];
                    check_gradients(&f, &inputs, opts)?
                }
                "slice" => {
                    let (gh, gw, d) = (r.random_range(1..4), r.random_range(1..4), r.random_range(2..6));
                    let k = r.random_range(1..5);
                    let target = uniform(&[n, h, w, k], -1.0, 1.0, r);
                    let f = TapeFn(move |t: &mut Tape<f64>, v: &[Var]| {
                        let y = t.slice(v[0], v[1])?;
                        mse_to(t, y, target.clone())
                    });
                    let inputs = [("grid", uniform(&[n, gh, gw, d, k], -1.0, 1.0, r)), ("guide", uniform(&[n, h, w, 1], 0.0, 1.0, r))];
                    check_gradients(&f, &inputs, opts)?
                }
                "apply_affine" => {
                    let target = uniform(&[n, h, w, 3], 0.0, 1.0, r);
                    let f = TapeFn(move |t: &mut Tape<f64>, v: &[Var]| {
                        let y = t.apply_affine(v[0], v[1])?;
                        mse_to(t, y, target.clone())
                    });
                    let inputs = [("coeffs", uniform(&[n, h, w, 12], -1.0, 1.0, r)), ("phi", uniform(&[n, h, w, 3], 0.0, 1.0, r))];
                    check_gradients(&f, &inputs, opts)?
                }
                "mse_loss" => {
                    let f = TapeFn(|t: &mut Tape<f64>, v: &[Var]| t.mse(v[0], v[1]));
                    let inputs = [("pred", uniform(&[n, h, w, 3], 0.0, 1.0, r)), ("target", uniform(&[n, h, w, 3], 0.0, 1.0, r))];
                    check_gradients(&f, &inputs, opts)?
                }
                _ => unreachable!(),
            };
            out.push(SuiteEntry { op, instance, report });
        }
    }
    Ok(out)
}
