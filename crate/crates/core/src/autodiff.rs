//! Reverse-mode differentiation over a recorded tape of the operations the
//! network uses. There is no general expression graph: each [`Op`] variant
//! knows its own backward rule, delegating to the kernels.

use crate::bilateral::{self, GuideParams};
use crate::error::{Error, Result};
use crate::kernels::{self, BnCache};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GuideVars {
    pub ccm: Var,
    pub ccm_bias: Var,
    pub slopes: Var,
    pub thresholds: Var,
    pub bias: Var,
}

enum Op<T> {
    Leaf { param: Option<usize> },
    Conv2d { input: Var, weight: Var, bias: Var, stride: usize },
    Dense { input: Var, weight: Var, bias: Var },
    Relu(Var),
    BnTrain { input: Var, scale: Var, shift: Var, cache: BnCache<T> },
    BnInfer { input: Var, scale: Var, shift: Var, mean: Tensor<T>, inv_std: Vec<T> },
    Fusion { local: Var, w_local: Var, bias: Var, global: Option<(Var, Var)> },
    Reshape(Var),
    UnrollGrid { coeffs: Var, depth: usize },
    Guide { phi: Var, params: GuideVars },
    Slice { grid: Var, guide: Var },
    Affine { coeffs: Var, phi: Var },
    Mse { pred: Var, target: Var },
    Add(Var, Var),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single forward pass. Values are kept for the backward pass; build a
/// fresh tape per step.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf; gradients are tracked only when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf { param: None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf bound to entry `index` of a parameter store.
    pub fn param(&mut self, store: &ParamStore<T>, index: usize) -> Var {
        self.nodes.push(Node {
            value: store.get(index).value.clone(),
            op: Op::Leaf { param: Some(index) },
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let y = kernels::conv2d(self.value(input), self.value(weight), self.value(bias), stride)?;
        Ok(self.push(y, Op::Conv2d { input, weight, bias, stride }, &[input, weight, bias]))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = kernels::dense(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(y, Op::Dense { input, weight, bias }, &[input, weight, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = kernels::relu(self.value(x));
        self.push(y, Op::Relu(x), &[x])
    }

    /// Train-mode batch norm. Returns the batch statistics so the caller can
    /// update its running averages.
    pub fn batch_norm_train(&mut self, input: Var, scale: Var, shift: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (y, cache) = kernels::batch_norm_train(self.value(input), self.value(scale), self.value(shift), eps)?;
        let stats = (cache.mean.clone(), cache.var.clone());
        let v = self.push(y, Op::BnTrain { input, scale, shift, cache }, &[input, scale, shift]);
        Ok((v, stats.0, stats.1))
    }

    pub fn batch_norm_infer(&mut self, input: Var, scale: Var, shift: Var, mean: &Tensor<T>, var: &Tensor<T>, eps: T) -> Result<Var> {
        let (y, inv_std) = kernels::batch_norm_infer(self.value(input), self.value(scale), self.value(shift), mean, var, eps)?;
        Ok(self.push(
            y,
            Op::BnInfer {
                input,
                scale,
                shift,
                mean: mean.clone(),
                inv_std,
            },
            &[input, scale, shift],
        ))
    }

    /// Pre-activation fusion of a local feature map `[N, h, w, C]` with a
    /// per-image global vector `[N, C']` broadcast over every position:
    /// `bias + local @ w_local + global @ w_global`. `global` is `None` when
    /// the global path is disabled.
    pub fn fusion(&mut self, local: Var, w_local: Var, bias: Var, global: Option<(Var, Var)>) -> Result<Var> {
        let mut y = kernels::dense(self.value(local), self.value(w_local), self.value(bias))?;
        let mut inputs = vec![local, w_local, bias];
        if let Some((g, wg)) = global {
            let n = self.value(local).shape()[0];
            let gvec = self.value(g);
            if self.value(local).rank() != 4 || gvec.shape() != [n, self.value(wg).shape()[0]] {
                return Err(Error::Shape(format!(
                    "fusion: local {:?} vs global {:?}",
                    self.value(local).shape(),
                    gvec.shape()
                )));
            }
            let zero = Tensor::zeros(&[self.value(wg).shape()[1]]);
            let gterm = kernels::dense(gvec, self.value(wg), &zero)?;
            let c = y.channels();
            if gterm.channels() != c {
                return Err(Error::Shape(format!("fusion: global produces {} channels, local {c}", gterm.channels())));
            }
            let per = y.len() / n;
            for (b, chunk) in y.data_mut().chunks_mut(per).enumerate() {
                let gb = &gterm.data()[b * c..][..c];
                for px in chunk.chunks_mut(c) {
                    for (v, &g) in px.iter_mut().zip(gb) {
                        *v += g;
                    }
                }
            }
            inputs.extend([g, wg]);
        }
        Ok(self.push(y, Op::Fusion { local, w_local, bias, global }, &inputs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x), &[x]))
    }

    /// `[N, gh, gw, d * K]` coefficient map to `[N, gh, gw, d, K]` grid with
    /// `grid[.., z, k] = map[.., d * k + z]`.
    pub fn unroll_grid(&mut self, coeffs: Var, depth: usize) -> Result<Var> {
        let y = crate::coeffnet::unroll(self.value(coeffs), depth)?;
        Ok(self.push(y, Op::UnrollGrid { coeffs, depth }, &[coeffs]))
    }

    pub fn guide(&mut self, phi: Var, params: GuideVars) -> Result<Var> {
        let gp = self.guide_params(params);
        let y = bilateral::compute_guide(self.value(phi), &gp)?;
        let p = params;
        Ok(self.push(y, Op::Guide { phi, params }, &[phi, p.ccm, p.ccm_bias, p.slopes, p.thresholds, p.bias]))
    }

    fn guide_params(&self, p: GuideVars) -> GuideParams<T> {
        GuideParams {
            ccm: self.value(p.ccm).clone(),
            ccm_bias: self.value(p.ccm_bias).clone(),
            slopes: self.value(p.slopes).clone(),
            thresholds: self.value(p.thresholds).clone(),
            bias: self.value(p.bias).clone(),
        }
    }

    pub fn slice(&mut self, grid: Var, guide: Var) -> Result<Var> {
        let y = bilateral::slice(self.value(grid), self.value(guide))?;
        Ok(self.push(y, Op::Slice { grid, guide }, &[grid, guide]))
    }

    pub fn apply_affine(&mut self, coeffs: Var, phi: Var) -> Result<Var> {
        let y = bilateral::apply_affine(self.value(coeffs), self.value(phi))?;
        Ok(self.push(y, Op::Affine { coeffs, phi }, &[coeffs, phi]))
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let l = kernels::mse(self.value(pred), self.value(target))?;
        Ok(self.push(Tensor::scalar(l), Op::Mse { pred, target }, &[pred, target]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!("add: {:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Runs the backward pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, d: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&d),
                slot => *slot = Some(d),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Conv2d { input, weight, bias, stride } => {
                let r = kernels::conv2d_backward(self.value(*input), self.value(*weight), *stride, g, self.needs(*input));
                if let Some(d) = r.input {
                    acc(*input, d);
                }
                acc(*weight, r.weight);
                acc(*bias, r.bias);
            }
            Op::Dense { input, weight, bias } => {
                let r = kernels::dense_backward(self.value(*input), self.value(*weight), g, self.needs(*input));
                if let Some(d) = r.input {
                    acc(*input, d);
                }
                acc(*weight, r.weight);
                acc(*bias, r.bias);
            }
            Op::Relu(x) => acc(*x, kernels::relu_backward(self.value(*x), g)),
            Op::BnTrain { input, scale, shift, cache } => {
                let r = kernels::batch_norm_train_backward(cache, self.value(*scale), g);
                acc(*input, r.input);
                acc(*scale, r.scale);
                acc(*shift, r.shift);
            }
            Op::BnInfer { input, scale, shift, mean, inv_std } => {
                let r = kernels::batch_norm_infer_backward(self.value(*input), mean, inv_std, self.value(*scale), g);
                acc(*input, r.input);
                acc(*scale, r.scale);
                acc(*shift, r.shift);
            }
            Op::Fusion { local, w_local, bias, global } => {
                let r = kernels::dense_backward(self.value(*local), self.value(*w_local), g, self.needs(*local));
                if let Some(d) = r.input {
                    acc(*local, d);
                }
                acc(*w_local, r.weight);
                acc(*bias, r.bias);
                if let Some((gv, wg)) = global {
                    // Sum the upstream gradient over positions per image.
                    let n = g.shape()[0];
                    let c = g.channels();
                    let per = g.len() / n;
                    let mut dsum = vec![T::zero(); n * c];
                    for (b, chunk) in g.data().chunks(per).enumerate() {
                        for px in chunk.chunks(c) {
                            for (s, &v) in dsum[b * c..][..c].iter_mut().zip(px) {
                                *s += v;
                            }
                        }
                    }
                    let dsum = Tensor::from_vec(&[n, c], dsum).unwrap();
                    let r = kernels::dense_backward(self.value(*gv), self.value(*wg), &dsum, self.needs(*gv));
                    if let Some(d) = r.input {
                        acc(*gv, d);
                    }
                    acc(*wg, r.weight);
                }
            }
            Op::Reshape(x) => acc(*x, g.clone().reshape(self.value(*x).shape()).unwrap()),
            Op::UnrollGrid { coeffs, depth } => acc(*coeffs, crate::coeffnet::roll(g, *depth).unwrap()),
            Op::Guide { phi, params } => {
                let gp = self.guide_params(*params);
                let r = bilateral::compute_guide_backward(self.value(*phi), &gp, g, self.needs(*phi));
                if let Some(d) = r.phi {
                    acc(*phi, d);
                }
                acc(params.ccm, r.params.ccm);
                acc(params.ccm_bias, r.params.ccm_bias);
                acc(params.slopes, r.params.slopes);
                acc(params.thresholds, r.params.thresholds);
                acc(params.bias, r.params.bias);
            }
            Op::Slice { grid, guide } => {
                let r = bilateral::slice_backward(self.value(*grid), self.value(*guide), g, self.needs(*guide));
                acc(*grid, r.grid);
                if let Some(d) = r.guide {
                    acc(*guide, d);
                }
            }
            Op::Affine { coeffs, phi } => {
                let r = bilateral::apply_affine_backward(self.value(*coeffs), self.value(*phi), g, self.needs(*phi));
                acc(*coeffs, r.coeffs);
                if let Some(d) = r.phi {
                    acc(*phi, d);
                }
            }
            Op::Mse { pred, target } => {
                let up = g.data()[0];
                let d = kernels::mse_backward(self.value(*pred), self.value(*target), up);
                if self.needs(*target) {
                    acc(*target, d.map(|v| -v));
                }
                acc(*pred, d);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sum(x) => {
                let up = g.data()[0];
                acc(*x, Tensor::full(self.value(*x).shape(), up));
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a node; `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a node, zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }

    /// Writes parameter gradients into the store. Without `accumulate`,
    /// every parameter gradient is zeroed first, so parameters the loss does
    /// not reach end up exactly zero.
    pub fn write_params(&self, tape: &Tape<T>, store: &mut ParamStore<T>, accumulate: bool) {
        if !accumulate {
            store.zero_grads();
        }
        for (node, grad) in tape.nodes.iter().zip(&self.grads) {
            if let (Op::Leaf { param: Some(idx) }, Some(g)) = (&node.op, grad) {
                store.get_mut(*idx).grad.add_assign(g);
            }
        }
    }
}
