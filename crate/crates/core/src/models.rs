//! Inner learner models: softmax regression and ReLU MLPs.
//!
//! Forward pass, analytic backward pass, SGD and SGD-with-momentum steps,
//! dataset evaluation, and a finite-difference gradient check. All math is
//! batch-mean cross-entropy in f64.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{relu, softmax_cross_entropy, DenseMatrix, RngStream};

/// Learner architecture. Hidden layers use ReLU; the last layer emits logits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    SoftmaxRegression {
        inputs: usize,
        classes: usize,
    },
    Mlp {
        inputs: usize,
        hidden: Vec<usize>,
        classes: usize,
    },
}

impl Architecture {
    pub fn inputs(&self) -> usize {
        match self {
            Architecture::SoftmaxRegression { inputs, .. } => *inputs,
            Architecture::Mlp { inputs, .. } => *inputs,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Architecture::SoftmaxRegression { classes, .. } => *classes,
            Architecture::Mlp { classes, .. } => *classes,
        }
    }

    /// Layer widths from inputs to logits, e.g. mlp(20->32->3) = [20, 32, 3].
    fn widths(&self) -> Vec<usize> {
        match self {
            Architecture::SoftmaxRegression { inputs, classes } => vec![*inputs, *classes],
            Architecture::Mlp {
                inputs,
                hidden,
                classes,
            } => {
                let mut w = vec![*inputs];
                w.extend_from_slice(hidden);
                w.push(*classes);
                w
            }
        }
    }
}

/// One affine layer: `weights` is (out x in), `biases` has out entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DenseMatrix,
    pub biases: Vec<f64>,
}

/// A mini-batch of labelled samples. `inputs` is (n x d).
#[derive(Debug, Clone)]
pub struct MiniBatch {
    pub inputs: DenseMatrix,
    pub labels: Vec<usize>,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A labelled dataset split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: DenseMatrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies the rows at `indices` into a batch.
    pub fn minibatch(&self, indices: &[usize]) -> MiniBatch {
        let d = self.inputs.cols();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        MiniBatch {
            inputs: DenseMatrix::from_vec(indices.len(), d, data),
            labels,
        }
    }

    /// Batch of up to `n` distinct samples drawn from `rng`.
    pub fn sample_batch(&self, n: usize, rng: &mut RngStream) -> MiniBatch {
        let idx = rng.sample_indices(self.len(), n);
        self.minibatch(&idx)
    }

    /// Whole split as one batch.
    pub fn full_batch(&self) -> MiniBatch {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.minibatch(&idx)
    }
}

/// Train/validation/test partition of a problem.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Activations cached by [`LearnerModel::forward_loss`] for the backward pass.
///
/// `version` pins the cache to the parameter state it was computed from;
/// running backward against a stepped model is a usage error.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    /// Post-activation of every layer input: `acts[0]` is the batch input,
    /// `acts[l]` the ReLU output feeding layer l.
    acts: Vec<DenseMatrix>,
    /// Mean-scaled logit gradients, (n x classes): (softmax - onehot) / n.
    dlogits: DenseMatrix,
}

/// Gradients shaped like the model parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<(DenseMatrix, Vec<f64>)>,
}

impl Gradients {
    pub fn zeros_like(model: &LearnerModel) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| {
                    (
                        DenseMatrix::zeros(l.weights.rows(), l.weights.cols()),
                        vec![0.0; l.biases.len()],
                    )
                })
                .collect(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn from_flat(model: &LearnerModel, flat: &[f64]) -> Self {
        let mut g = Gradients::zeros_like(model);
        let mut pos = 0;
        for (w, b) in g.layers.iter_mut() {
            let wn = w.as_slice().len();
            w.as_mut_slice().copy_from_slice(&flat[pos..pos + wn]);
            pos += wn;
            let bn = b.len();
            b.copy_from_slice(&flat[pos..pos + bn]);
            pos += bn;
        }
        assert_eq!(pos, flat.len(), "flat gradient length mismatch");
        g
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.is_finite() && b.iter().all(|v| v.is_finite()))
    }
}

/// Optimizer selector for the inner model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
}

/// SGD state: optional momentum buffers plus coupled weight decay.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<(DenseMatrix, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(model: &LearnerModel, kind: OptimizerKind, momentum: f64, weight_decay: f64) -> Self {
        assert!((0.0..1.0).contains(&momentum), "momentum must be in [0,1)");
        assert!(weight_decay >= 0.0);
        OptimizerState {
            kind,
            momentum,
            weight_decay,
            velocity: model
                .layers
                .iter()
                .map(|l| {
                    (
                        DenseMatrix::zeros(l.weights.rows(), l.weights.cols()),
                        vec![0.0; l.biases.len()],
                    )
                })
                .collect(),
        }
    }

    pub fn plain(model: &LearnerModel) -> Self {
        OptimizerState::new(model, OptimizerKind::Sgd, 0.0, 0.0)
    }
}

/// The inner model being trained. Parameter count is fixed at construction.
#[derive(Debug, Clone)]
pub struct LearnerModel {
    arch: Architecture,
    layers: Vec<Layer>,
    version: u64,
}

impl LearnerModel {
    /// Weights ~ normal(0, 1/sqrt(fan_in)), biases zero.
    pub fn init(arch: Architecture, rng: &mut RngStream) -> Self {
        let widths = arch.widths();
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            let mut weights = DenseMatrix::zeros(fan_out, fan_in);
            for v in weights.as_mut_slice() {
                *v = scale * rng.normal();
            }
            layers.push(Layer {
                weights,
                biases: vec![0.0; fan_out],
            });
        }
        LearnerModel {
            arch,
            layers,
            version: 0,
        }
    }

    /// All-zero parameters; handy for closed-form loss checks.
    pub fn zeroed(arch: Architecture) -> Self {
        let widths = arch.widths();
        let layers = widths
            .windows(2)
            .map(|w| Layer {
                weights: DenseMatrix::zeros(w[1], w[0]),
                biases: vec![0.0; w[1]],
            })
            .collect();
        LearnerModel {
            arch,
            layers,
            version: 0,
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.biases.len())
            .sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for l in self.layers.iter_mut() {
            let wn = l.weights.as_slice().len();
            l.weights.as_mut_slice().copy_from_slice(&flat[pos..pos + wn]);
            pos += wn;
            let bn = l.biases.len();
            l.biases.copy_from_slice(&flat[pos..pos + bn]);
            pos += bn;
        }
        assert_eq!(pos, flat.len(), "flat parameter length mismatch");
        self.version += 1;
    }

    fn check_batch(&self, batch: &MiniBatch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        if batch.inputs.cols() != self.arch.inputs() {
            return Err(Error::ShapeMismatch(format!(
                "batch feature dim {} != model input dim {}",
                batch.inputs.cols(),
                self.arch.inputs()
            )));
        }
        let c = self.arch.classes();
        if batch.labels.iter().any(|&y| y >= c) {
            return Err(Error::Domain(format!("label out of range for {c} classes")));
        }
        Ok(())
    }

    /// Mean cross-entropy over the batch, plus the activations needed by
    /// [`LearnerModel::backward`].
    pub fn forward_loss(&self, batch: &MiniBatch) -> Result<(f64, ForwardCache)> {
        self.check_batch(batch)?;
        let n = batch.len();
        let classes = self.arch.classes();

        let mut acts: Vec<DenseMatrix> = vec![batch.inputs.clone()];
        for (li, layer) in self.layers.iter().enumerate() {
            let last = li + 1 == self.layers.len();
            let prev = &acts[li];
            let mut out = DenseMatrix::zeros(n, layer.biases.len());
            for i in 0..n {
                let mut z = layer.weights.matvec(prev.row(i));
                for (zv, b) in z.iter_mut().zip(layer.biases.iter()) {
                    *zv += b;
                }
                if !last {
                    for zv in z.iter_mut() {
                        *zv = relu(*zv).0;
                    }
                }
                out.row_mut(i).copy_from_slice(&z);
            }
            acts.push(out);
        }

        let logits = acts.last().unwrap();
        let mut loss_sum = 0.0;
        let mut dlogits = DenseMatrix::zeros(n, classes);
        for i in 0..n {
            let (loss, grad) = softmax_cross_entropy(logits.row(i), batch.labels[i])?;
            loss_sum += loss;
            let row = dlogits.row_mut(i);
            for (dst, g) in row.iter_mut().zip(grad.iter()) {
                *dst = g / n as f64;
            }
        }

        Ok((
            loss_sum / n as f64,
            ForwardCache {
                version: self.version,
                acts,
                dlogits,
            },
        ))
    }

    /// Gradients of the batch-mean loss with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache) -> Result<Gradients> {
        if cache.version != self.version {
            return Err(Error::Usage(
                "stale forward cache: model parameters changed since forward_loss".into(),
            ));
        }
        let n = cache.dlogits.rows();
        let mut grads = Gradients::zeros_like(self);

        // delta starts as the mean-scaled logit gradient and is pulled back
        // through each layer; ReLU masks come from the cached activations.
        let mut delta = cache.dlogits.clone();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &cache.acts[li];
            let (gw, gb) = &mut grads.layers[li];
            for i in 0..n {
                let d = delta.row(i);
                gw.add_outer(d, input.row(i), 1.0);
                for (b, dv) in gb.iter_mut().zip(d.iter()) {
                    *b += dv;
                }
            }
            if li > 0 {
                let mut prev_delta = DenseMatrix::zeros(n, layer.weights.cols());
                for i in 0..n {
                    let back = layer.weights.matvec_t(delta.row(i));
                    let act = cache.acts[li].row(i);
                    let row = prev_delta.row_mut(i);
                    for ((dst, bv), av) in row.iter_mut().zip(back.iter()).zip(act.iter()) {
                        // act > 0 marks the units that were live in forward.
                        *dst = if *av > 0.0 { *bv } else { 0.0 };
                    }
                }
                delta = prev_delta;
            }
        }
        Ok(grads)
    }

    /// One optimizer step. Plain SGD: `w <- w - lr*(g + wd*w)`. Momentum:
    /// `v <- mu*v + (g + wd*w); w <- w - lr*v`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64, opt: &mut OptimizerState) -> Result<()> {
        if lr < 0.0 {
            return Err(Error::Domain(format!("negative learning rate {lr}")));
        }
        if !grads.is_finite() {
            return Err(Error::Divergence("non-finite gradient in sgd_step".into()));
        }
        let wd = opt.weight_decay;
        for (li, layer) in self.layers.iter_mut().enumerate() {
            let (gw, gb) = &grads.layers[li];
            match opt.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in layer.weights.as_mut_slice().iter_mut().zip(gw.as_slice()) {
                        *w -= lr * (g + wd * *w);
                    }
                    for (b, g) in layer.biases.iter_mut().zip(gb.iter()) {
                        *b -= lr * (g + wd * *b);
                    }
                }
                OptimizerKind::SgdMomentum => {
                    let (vw, vb) = &mut opt.velocity[li];
                    let mu = opt.momentum;
                    for ((w, v), g) in layer
                        .weights
                        .as_mut_slice()
                        .iter_mut()
                        .zip(vw.as_mut_slice().iter_mut())
                        .zip(gw.as_slice())
                    {
                        *v = mu * *v + (g + wd * *w);
                        *w -= lr * *v;
                    }
                    for ((b, v), g) in layer
                        .biases
                        .iter_mut()
                        .zip(vb.iter_mut())
                        .zip(gb.iter())
                    {
                        *v = mu * *v + (g + wd * *b);
                        *b -= lr * *v;
                    }
                }
            }
        }
        self.version += 1;
        Ok(())
    }

    /// `w <- w - lr*g`, no weight decay, no momentum. Used by the one-step
    /// lookahead in meta training, which differentiates exactly this map.
    pub fn plain_step(&mut self, grads: &Gradients, lr: f64) {
        for (li, layer) in self.layers.iter_mut().enumerate() {
            let (gw, gb) = &grads.layers[li];
            for (w, g) in layer.weights.as_mut_slice().iter_mut().zip(gw.as_slice()) {
                *w -= lr * g;
            }
            for (b, g) in layer.biases.iter_mut().zip(gb.iter()) {
                *b -= lr * g;
            }
        }
        self.version += 1;
    }

    /// Mean loss and argmax accuracy over a dataset split.
    pub fn evaluate(&self, data: &Dataset) -> Result<(f64, f64)> {
        if data.is_empty() {
            return Err(Error::Domain("evaluate on empty dataset".into()));
        }
        let batch = data.full_batch();
        self.check_batch(&batch)?;
        let n = batch.len();
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for i in 0..n {
            let logits = self.logits_for(batch.inputs.row(i));
            let (loss, _) = softmax_cross_entropy(&logits, batch.labels[i])?;
            loss_sum += loss;
            let mut best = 0;
            for (k, v) in logits.iter().enumerate() {
                if *v > logits[best] {
                    best = k;
                }
            }
            if best == batch.labels[i] {
                correct += 1;
            }
        }
        Ok((loss_sum / n as f64, correct as f64 / n as f64))
    }

    fn logits_for(&self, input: &[f64]) -> Vec<f64> {
        let mut a = input.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let last = li + 1 == self.layers.len();
            let mut z = layer.weights.matvec(&a);
            for (zv, b) in z.iter_mut().zip(layer.biases.iter()) {
                *zv += b;
            }
            if !last {
                for zv in z.iter_mut() {
                    *zv = relu(*zv).0;
                }
            }
            a = z;
        }
        a
    }
}

/// Max relative error between analytic and central finite-difference
/// gradients over every parameter. The probe step for parameter `p` is
/// `eps * (1 + |p|)`; the relative error is
/// `|analytic - fd| / (|analytic| + |fd| + 1e-12)`.
pub fn gradient_check(model: &LearnerModel, batch: &MiniBatch, eps: f64) -> Result<f64> {
    assert!(eps > 0.0, "gradient_check: eps must be positive");
    let (_, cache) = model.forward_loss(batch)?;
    let analytic = model.backward(&cache)?.to_flat();
    let params = model.flat_params();

    let mut probe = model.clone();
    let mut max_rel: f64 = 0.0;
    for k in 0..params.len() {
        let h = eps * (1.0 + params[k].abs());
        let pp = params[k] + h;
        let pm = params[k] - h;
        let mut shifted = params.clone();
        shifted[k] = pp;
        probe.set_flat_params(&shifted);
        let (lp, _) = probe.forward_loss(batch)?;
        shifted[k] = pm;
        probe.set_flat_params(&shifted);
        let (lm, _) = probe.forward_loss(batch)?;
        // Divide by the realized probe spread, not 2h: pp and pm are
        // rounded to f64, and the spread absorbs that rounding exactly.
        let fd = (lp - lm) / (pp - pm);
        let rel = (analytic[k] - fd).abs() / (analytic[k].abs() + fd.abs() + 1e-12);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
