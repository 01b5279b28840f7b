//! Models, losses, gradients, and the local update rules used during
//! distributed fine-tuning: plain mini-batch SGD, server-side compensatory
//! training on missing classes, proximal updates, and control-variate
//! updates.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::error::SimError;
use crate::Result;

/// Network architecture of a model's flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    /// Softmax regression: logits = W x + b.
    Linear { input_dim: usize, classes: usize },
    /// One hidden ReLU layer: logits = W2 relu(W1 x + b1) + b2.
    Mlp {
        input_dim: usize,
        hidden: usize,
        classes: usize,
    },
}

impl Arch {
    pub fn param_count(&self) -> usize {
        match *self {
            Arch::Linear { input_dim, classes } => classes * input_dim + classes,
            Arch::Mlp {
                input_dim,
                hidden,
                classes,
            } => hidden * input_dim + hidden + classes * hidden + classes,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            Arch::Linear { classes, .. } | Arch::Mlp { classes, .. } => classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        match *self {
            Arch::Linear { input_dim, .. } | Arch::Mlp { input_dim, .. } => input_dim,
        }
    }
}

/// Flat model parameters with their architecture descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub theta: Vec<f64>,
}

impl ModelParams {
    pub fn new(arch: Arch, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != arch.param_count() {
            return Err(SimError::parameter(format!(
                "theta has {} entries, arch needs {}",
                theta.len(),
                arch.param_count()
            )));
        }
        Ok(Self { arch, theta })
    }

    pub fn zeros(arch: Arch) -> Self {
        Self {
            arch,
            theta: vec![0.0; arch.param_count()],
        }
    }

    /// Deterministic scaled-uniform initialization: each weight matrix is
    /// drawn from U(-a, a) with `a = sqrt(6 / (fan_in + fan_out))`, biases
    /// start at zero.
    pub fn init_scaled_uniform(arch: Arch, rng: &mut ChaCha8Rng) -> Self {
        let mut theta = vec![0.0; arch.param_count()];
        let fill = |slice: &mut [f64], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in slice {
                *w = rng.gen_range(-bound..bound);
            }
        };
        match arch {
            Arch::Linear { input_dim, classes } => {
                fill(&mut theta[..classes * input_dim], input_dim, classes, rng);
            }
            Arch::Mlp {
                input_dim,
                hidden,
                classes,
            } => {
                let w1 = hidden * input_dim;
                fill(&mut theta[..w1], input_dim, hidden, rng);
                let w2_start = w1 + hidden;
                fill(
                    &mut theta[w2_start..w2_start + classes * hidden],
                    hidden,
                    classes,
                    rng,
                );
            }
        }
        Self { arch, theta }
    }

    /// Logits for a single feature row.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        match self.arch {
            Arch::Linear { input_dim, classes } => {
                let (w, rest) = self.theta.split_at(classes * input_dim);
                (0..classes)
                    .map(|c| {
                        rest[c]
                            + w[c * input_dim..(c + 1) * input_dim]
                                .iter()
                                .zip(x)
                                .map(|(wi, xi)| wi * xi)
                                .sum::<f64>()
                    })
                    .collect()
            }
            Arch::Mlp {
                input_dim,
                hidden,
                classes,
            } => {
                let (a1, _) = mlp_hidden(&self.theta, x, input_dim, hidden);
                let w2_start = hidden * input_dim + hidden;
                let w2 = &self.theta[w2_start..w2_start + classes * hidden];
                let b2 = &self.theta[w2_start + classes * hidden..];
                (0..classes)
                    .map(|c| {
                        b2[c]
                            + w2[c * hidden..(c + 1) * hidden]
                                .iter()
                                .zip(&a1)
                                .map(|(wi, ai)| wi * ai)
                                .sum::<f64>()
                    })
                    .collect()
            }
        }
    }
}

/// SCAFFOLD-style control variate, same length as the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlVariate {
    pub c: Vec<f64>,
}

impl ControlVariate {
    pub fn zeros(len: usize) -> Self {
        Self { c: vec![0.0; len] }
    }
}

/// Local update rule applied on top of the plain SGD step.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainVariant {
    Plain,
    Prox { mu: f64 },
    Scaffold,
}

/// Hyperparameters of a local training pass.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub local_steps: usize,
    pub batch_size: usize,
    pub variant: TrainVariant,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(SimError::parameter("learning_rate must be finite and >= 0"));
        }
        if self.local_steps == 0 {
            return Err(SimError::parameter("local_steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(SimError::parameter("batch_size must be at least 1"));
        }
        if let TrainVariant::Prox { mu } = self.variant {
            if mu < 0.0 {
                return Err(SimError::parameter("proximal mu must be >= 0"));
            }
        }
        Ok(())
    }
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Hidden activations and pre-activations of the MLP.
fn mlp_hidden(theta: &[f64], x: &[f64], input_dim: usize, hidden: usize) -> (Vec<f64>, Vec<f64>) {
    let w1 = &theta[..hidden * input_dim];
    let b1 = &theta[hidden * input_dim..hidden * input_dim + hidden];
    let mut z1 = vec![0.0; hidden];
    for h in 0..hidden {
        z1[h] = b1[h]
            + w1[h * input_dim..(h + 1) * input_dim]
                .iter()
                .zip(x)
                .map(|(wi, xi)| wi * xi)
                .sum::<f64>();
    }
    let a1 = z1.iter().map(|&z| relu(z)).collect();
    (a1, z1)
}

/// Softmax probabilities and the cross-entropy loss for one sample.
fn softmax_ce(logits: &[f64], label: usize) -> (Vec<f64>, f64) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
    let loss = sum.ln() + max - logits[label];
    (probs, loss)
}

/// Mean cross-entropy over the batch and its gradient with respect to the
/// flat parameter vector.
pub fn loss_and_gradient(
    params: &ModelParams,
    data: &LabeledDataset,
    batch: &[usize],
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(SimError::parameter("batch must be non-empty"));
    }
    let mut grad = vec![0.0; params.theta.len()];
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;

    match params.arch {
        Arch::Linear { input_dim, classes } => {
            for &i in batch {
                let x = data.sample(i);
                let label = data.labels()[i];
                let (probs, l) = softmax_ce(&params.logits(x), label);
                loss += l * scale;
                for c in 0..classes {
                    let dz = (probs[c] - if c == label { 1.0 } else { 0.0 }) * scale;
                    let row = &mut grad[c * input_dim..(c + 1) * input_dim];
                    for (g, &xi) in row.iter_mut().zip(x) {
                        *g += dz * xi;
                    }
                    grad[classes * input_dim + c] += dz;
                }
            }
        }
        Arch::Mlp {
            input_dim,
            hidden,
            classes,
        } => {
            let w2_start = hidden * input_dim + hidden;
            for &i in batch {
                let x = data.sample(i);
                let label = data.labels()[i];
                let (a1, z1) = mlp_hidden(&params.theta, x, input_dim, hidden);
                let w2 = &params.theta[w2_start..w2_start + classes * hidden];
                let logits: Vec<f64> = (0..classes)
                    .map(|c| {
                        params.theta[w2_start + classes * hidden + c]
                            + w2[c * hidden..(c + 1) * hidden]
                                .iter()
                                .zip(&a1)
                                .map(|(wi, ai)| wi * ai)
                                .sum::<f64>()
                    })
                    .collect();
                let (probs, l) = softmax_ce(&logits, label);
                loss += l * scale;

                let mut da1 = vec![0.0; hidden];
                for c in 0..classes {
                    let dz2 = (probs[c] - if c == label { 1.0 } else { 0.0 }) * scale;
                    for h in 0..hidden {
                        grad[w2_start + c * hidden + h] += dz2 * a1[h];
                        da1[h] += dz2 * w2[c * hidden + h];
                    }
                    grad[w2_start + classes * hidden + c] += dz2;
                }
                for h in 0..hidden {
                    if z1[h] > 0.0 {
                        let dz1 = da1[h];
                        let row = &mut grad[h * input_dim..(h + 1) * input_dim];
                        for (g, &xi) in row.iter_mut().zip(x) {
                            *g += dz1 * xi;
                        }
                        grad[hidden * input_dim + h] += dz1;
                    }
                }
            }
        }
    }
    Ok((loss, grad))
}

/// Draws batches without replacement within a shuffled epoch, reshuffling
/// once the epoch is exhausted. The final batch of an epoch may be short.
struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl EpochSampler {
    fn new(indices: &[usize]) -> Self {
        Self {
            order: indices.to_vec(),
            cursor: usize::MAX, // force an initial shuffle
        }
    }

    fn next_batch(&mut self, batch_size: usize, rng: &mut ChaCha8Rng) -> &[usize] {
        if self.cursor >= self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let end = (self.cursor + batch_size).min(self.order.len());
        let batch = &self.order[self.cursor..end];
        self.cursor = end;
        batch
    }
}

/// Runs `cfg.local_steps` SGD steps where `adjust` rewrites each step's raw
/// gradient (proximal term, control variates) before it is applied.
fn sgd_steps<F>(
    start: &ModelParams,
    data: &LabeledDataset,
    indices: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut adjust: F,
) -> Result<ModelParams>
where
    F: FnMut(&mut [f64], &[f64]),
{
    cfg.validate()?;
    if indices.is_empty() {
        return Err(SimError::parameter("cannot train on an empty dataset"));
    }
    let mut model = start.clone();
    let mut sampler = EpochSampler::new(indices);
    for _ in 0..cfg.local_steps {
        let batch = sampler.next_batch(cfg.batch_size, rng).to_vec();
        let (_, mut grad) = loss_and_gradient(&model, data, &batch)?;
        adjust(&mut grad, &model.theta);
        for (w, g) in model.theta.iter_mut().zip(&grad) {
            *w -= cfg.learning_rate * g;
        }
    }
    Ok(model)
}

/// Plain mini-batch SGD from the broadcast global model.
pub fn local_update(
    start: &ModelParams,
    data: &LabeledDataset,
    indices: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ModelParams> {
    sgd_steps(start, data, indices, cfg, rng, |_, _| {})
}

/// The server's own local pass over the public dataset. Same rule as
/// [`local_update`], kept as a named entry point for the round protocol.
pub fn server_update(
    start: &ModelParams,
    data: &LabeledDataset,
    public_indices: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ModelParams> {
    local_update(start, data, public_indices, cfg, rng)
}

/// Trains the compensatory model on the public samples whose label falls in
/// `missing`. Returns the trained model and the index subset it used. Fails
/// with [`SimError::CoverageGap`] when the public set lacks one of the
/// missing classes.
pub fn compensatory_update(
    start: &ModelParams,
    data: &LabeledDataset,
    public_indices: &[usize],
    missing: &BTreeSet<usize>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ModelParams, Vec<usize>)> {
    if missing.is_empty() {
        return Err(SimError::parameter("missing class set must be non-empty"));
    }
    let mut covered: BTreeSet<usize> = BTreeSet::new();
    let subset: Vec<usize> = public_indices
        .iter()
        .copied()
        .filter(|&i| {
            let label = data.labels()[i];
            if missing.contains(&label) {
                covered.insert(label);
                true
            } else {
                false
            }
        })
        .collect();
    let uncovered: Vec<usize> = missing.difference(&covered).copied().collect();
    if !uncovered.is_empty() {
        return Err(SimError::CoverageGap { uncovered });
    }
    let model = local_update(start, data, &subset, cfg, rng)?;
    Ok((model, subset))
}

/// Proximal local update: each step's gradient is `grad F + mu (w - anchor)`.
/// `mu` comes from `cfg.variant`.
pub fn prox_local_update(
    start: &ModelParams,
    data: &LabeledDataset,
    indices: &[usize],
    cfg: &TrainConfig,
    anchor: &ModelParams,
    rng: &mut ChaCha8Rng,
) -> Result<ModelParams> {
    let mu = match cfg.variant {
        TrainVariant::Prox { mu } => mu,
        _ => {
            return Err(SimError::contract(
                "prox_local_update requires TrainVariant::Prox",
            ))
        }
    };
    if anchor.theta.len() != start.theta.len() {
        return Err(SimError::contract("anchor length mismatch"));
    }
    let anchor_theta = anchor.theta.clone();
    sgd_steps(start, data, indices, cfg, rng, move |grad, theta| {
        for ((g, &w), &a) in grad.iter_mut().zip(theta).zip(&anchor_theta) {
            *g += mu * (w - a);
        }
    })
}

/// Control-variate local update. Each step uses `grad F - c_i + c`; after
/// the pass the client control variate is refreshed as
/// `c_i+ = c_i - c + (w_start - w_end) / (k * learning_rate)`.
#[allow(clippy::too_many_arguments)]
pub fn scaffold_local_update(
    start: &ModelParams,
    data: &LabeledDataset,
    indices: &[usize],
    cfg: &TrainConfig,
    server_cv: &ControlVariate,
    client_cv: &ControlVariate,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ModelParams, ControlVariate)> {
    if server_cv.c.len() != start.theta.len() || client_cv.c.len() != start.theta.len() {
        return Err(SimError::contract("control variate length mismatch"));
    }
    if k == 0 {
        return Err(SimError::parameter("k must be at least 1"));
    }
    let c = server_cv.c.clone();
    let c_i = client_cv.c.clone();
    let model = sgd_steps(start, data, indices, cfg, rng, |grad, _| {
        for ((g, &ci), &cs) in grad.iter_mut().zip(&c_i).zip(&c) {
            *g += cs - ci;
        }
    })?;
    let denom = k as f64 * cfg.learning_rate;
    let new_cv = ControlVariate {
        c: start
            .theta
            .iter()
            .zip(&model.theta)
            .zip(client_cv.c.iter().zip(&server_cv.c))
            .map(|((&w0, &w1), (&ci, &cs))| ci - cs + (w0 - w1) / denom)
            .collect(),
    };
    Ok((model, new_cv))
}

/// Mean loss and argmax accuracy over an index set.
pub fn evaluate_on(
    params: &ModelParams,
    data: &LabeledDataset,
    indices: &[usize],
) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Err(SimError::parameter("cannot evaluate on an empty set"));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for &i in indices {
        let logits = params.logits(data.sample(i));
        let label = data.labels()[i];
        let (_, l) = softmax_ce(&logits, label);
        loss += l;
        let pred = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(c, _)| c)
            .unwrap();
        if pred == label {
            correct += 1;
        }
    }
    let n = indices.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Mean loss and accuracy over a whole dataset.
pub fn evaluate(params: &ModelParams, data: &LabeledDataset) -> Result<(f64, f64)> {
    evaluate_on(params, data, &data.all_indices())
}
