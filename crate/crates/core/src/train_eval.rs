//! Losses, the Adam training loop, inference per model kind, and sequence
//! metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::EnvInfo;
use crate::diffcore::{DiffError, Graph, Tensor, Var};
use crate::envs::tower::has_repeat;
use crate::envs::TaskInstance;
use crate::nets::{
    argmax, bc_head, encode, init_params, perm_head, predicted_length, stop_head, tcn_decode, EncoderConfig, Family,
    ModelArch, ModelKind, ModelParams, NetError, TcnConfig,
};
use crate::sinkhorn::{gumbel_noise, hard_assignment_scores, masked_perm_loss_batch, sinkhorn_graph, SinkhornConfig, SinkhornError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("loss became non-finite in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("invalid target: {0}")]
    BadTarget(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Sinkhorn(#[from] SinkhornError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub sinkhorn: SinkhornConfig,
    pub adam: AdamConfig,
    pub hidden_dims: Vec<usize>,
    pub latent_dim: usize,
    pub tcn_state_dim: usize,
    pub tcn_layers: usize,
}

impl TrainConfig {
    pub fn new(kind: ModelKind) -> Self {
        TrainConfig {
            kind,
            learning_rate: 3e-4,
            batch_size: 16,
            epochs: 200,
            seed: 0,
            sinkhorn: SinkhornConfig::default(),
            adam: AdamConfig::default(),
            hidden_dims: vec![128],
            latent_dim: 64,
            tcn_state_dim: 16,
            tcn_layers: 6,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(TrainError::BadConfig("learning rate and batch size must be positive".into()));
        }
        if !(self.sinkhorn.noise_scale >= 0.0) {
            return Err(TrainError::BadConfig("noise scale must be non-negative".into()));
        }
        Ok(())
    }

    pub fn arch(&self, info: &EnvInfo) -> ModelArch {
        ModelArch {
            family: self.kind.family(),
            encoder: EncoderConfig {
                input_dim: info.raster_dim(),
                hidden_dims: self.hidden_dims.clone(),
                latent_dim: self.latent_dim,
            },
            n_actions: info.n_actions,
            max_len: info.max_len,
            variable_length: info.variable_length,
            tcn: TcnConfig {
                steps: info.max_len,
                state_dim: self.tcn_state_dim,
                layers: self.tcn_layers,
            },
        }
    }
}

/// A trained (or initialized) model ready for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub arch: ModelArch,
    pub params: ModelParams,
    pub sinkhorn: SinkhornConfig,
}

impl Model {
    pub fn init(config: &TrainConfig, info: &EnvInfo) -> Result<Model, TrainError> {
        let arch = config.arch(info);
        Ok(Model {
            kind: config.kind,
            params: init_params(&arch, config.seed)?,
            arch,
            sinkhorn: config.sinkhorn.clone(),
        })
    }

    /// Same weights, different inference rule (e.g. `bc` to `bc_hungarian`).
    pub fn with_kind(&self, kind: ModelKind) -> Result<Model, TrainError> {
        if kind.family() != self.kind.family() {
            return Err(TrainError::BadConfig(format!("{kind} cannot reuse {} weights", self.kind)));
        }
        Ok(Model { kind, ..self.clone() })
    }
}

/// Cross-entropy over the last axis of `logits [batch, steps, classes]`,
/// averaged over the active steps of each item and then over the batch.
/// `targets[b]` holds one class per active step; later steps are ignored.
pub fn masked_cross_entropy(g: &mut Graph, logits: Var, targets: &[Vec<usize>]) -> Result<Var, TrainError> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 3 || shape[0] != targets.len() {
        return Err(TrainError::BadTarget(format!("logits {shape:?} for {} targets", targets.len())));
    }
    let (b, steps, classes) = (shape[0], shape[1], shape[2]);
    let mut weights = vec![0.0; b * steps * classes];
    for (bi, seq) in targets.iter().enumerate() {
        if seq.is_empty() || seq.len() > steps {
            return Err(TrainError::BadTarget(format!("{} active steps out of {steps}", seq.len())));
        }
        let w = -1.0 / (seq.len() as f64 * b as f64);
        for (i, &c) in seq.iter().enumerate() {
            if c >= classes {
                return Err(TrainError::BadTarget(format!("class {c} of {classes}")));
            }
            weights[(bi * steps + i) * classes + c] = w;
        }
    }
    let logp = g.log_softmax(logits)?;
    let picked = g.mask(logp, &Tensor::new(shape, weights)?)?;
    Ok(g.sum(picked)?)
}

/// Per-step softmax classification of actions for the first `k` steps.
pub fn bc_loss(g: &mut Graph, logits: Var, targets: &[Vec<usize>]) -> Result<Var, TrainError> {
    masked_cross_entropy(g, logits, targets)
}

/// Step classification over `n` actions plus a stop class (index `n`). The
/// step right after the sequence must predict stop; later steps are ignored.
pub fn tcn_loss(g: &mut Graph, logits: Var, targets: &[Vec<usize>]) -> Result<Var, TrainError> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 3 {
        return Err(TrainError::BadTarget(format!("logits {shape:?}")));
    }
    let (steps, stop) = (shape[1], shape[2] - 1);
    let mut extended = Vec::with_capacity(targets.len());
    for seq in targets {
        if seq.len() > steps {
            return Err(TrainError::BadTarget(format!("length {} exceeds {steps} steps", seq.len())));
        }
        let mut s = seq.clone();
        if s.len() < steps {
            s.push(stop);
        }
        extended.push(s);
    }
    masked_cross_entropy(g, logits, &extended)
}

/// Classification of the sequence length; `logits [batch, max_len]` score
/// lengths `1..=max_len`.
pub fn stop_loss(g: &mut Graph, logits: Var, lengths: &[usize]) -> Result<Var, TrainError> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(TrainError::BadTarget(format!("stop logits {shape:?}")));
    }
    if let Some(&k) = lengths.iter().find(|&&k| k == 0 || k > shape[1]) {
        return Err(TrainError::BadTarget(format!("length {k} outside 1..={}", shape[1])));
    }
    let l3 = g.reshape(logits, &[shape[0], 1, shape[1]])?;
    let targets: Vec<Vec<usize>> = lengths.iter().map(|&k| vec![k - 1]).collect();
    masked_cross_entropy(g, l3, &targets)
}

fn rasters_tensor(tasks: &[&TaskInstance], dim: usize) -> Result<Tensor, TrainError> {
    let mut data = Vec::with_capacity(tasks.len() * dim);
    for t in tasks {
        if t.raster.len() != dim {
            return Err(NetError::InputDim {
                expected: dim,
                got: t.raster.len(),
            }
            .into());
        }
        data.extend_from_slice(&t.raster);
    }
    Ok(Tensor::new(vec![tasks.len(), dim], data)?)
}

/// Builds the training loss for one batch. Gumbel noise is drawn from `rng`
/// for the Sinkhorn family.
pub fn batch_loss(
    g: &mut Graph,
    model: &Model,
    batch: &[&TaskInstance],
    rng: &mut ChaCha8Rng,
) -> Result<(Var, crate::nets::BoundParams), TrainError> {
    let arch = &model.arch;
    let bound = model.params.bind(g, true);
    let x = g.constant(rasters_tensor(batch, arch.encoder.input_dim)?);
    let z = encode(g, x, &bound, &arch.encoder)?;
    let targets: Vec<Vec<usize>> = batch.iter().map(|t| t.actions.clone()).collect();
    let b = batch.len();
    let n = arch.n_actions;
    let mut loss = match arch.family {
        Family::Bc => {
            let logits = bc_head(g, z, &bound, arch.max_len, n)?;
            bc_loss(g, logits, &targets)?
        }
        Family::Tcn => {
            let flat = tcn_decode(g, z, &bound, &arch.tcn)?;
            let logits = g.reshape(flat, &[b, arch.tcn.steps, n + 1])?;
            tcn_loss(g, logits, &targets)?
        }
        Family::Sinkhorn => {
            let mut logits = perm_head(g, z, &bound, n)?;
            let cfg = &model.sinkhorn;
            if cfg.noise_scale > 0.0 {
                let noise = g.constant(Tensor::new(vec![b, n, n], gumbel_noise(rng, b * n * n, cfg.noise_scale))?);
                logits = g.add(logits, noise)?;
            }
            let p = sinkhorn_graph(g, logits, cfg.tau, cfg.iters)?;
            masked_perm_loss_batch(g, p, &targets)?
        }
    };
    if arch.variable_length && arch.family != Family::Tcn {
        let stop = stop_head(g, z, &bound)?;
        let lengths: Vec<usize> = batch.iter().map(|t| t.len()).collect();
        let sl = stop_loss(g, stop, &lengths)?;
        loss = g.add(loss, sl)?;
    }
    Ok((loss, bound))
}

/// Adam moments for every parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    config: AdamConfig,
    step: i32,
    moments: std::collections::BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            ..Default::default()
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[(String, Vec<f64>)], lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for (name, grad) in grads {
            let t = params.get_mut(name).expect("gradient for a known parameter");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for (((w, &gi), mi), vi) in t.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + epsilon);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean training loss per epoch.
    pub history: Vec<f64>,
}

/// Mini-batch Adam with a seeded shuffle per epoch. Deterministic for a
/// given config and task list.
pub fn train(config: &TrainConfig, tasks: &[TaskInstance], info: &EnvInfo) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut model = Model::init(config, info)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(config.adam.clone());
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TaskInstance> = chunk.iter().map(|&i| &tasks[i]).collect();
            let mut g = Graph::new();
            let (loss, bound) = batch_loss(&mut g, &model, &batch, &mut rng).map_err(|e| diverged(e, epoch))?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            g.backward(loss).map_err(|e| diverged(e.into(), epoch))?;
            let grads: Vec<(String, Vec<f64>)> = bound
                .iter()
                .map(|(name, &v)| (name.clone(), g.grad(v).map(<[f64]>::to_vec).unwrap_or_default()))
                .filter(|(_, gr)| !gr.is_empty())
                .collect();
            adam.step(&mut model.params, &grads, config.learning_rate);
            total += value * batch.len() as f64;
        }
        history.push(total / tasks.len() as f64);
    }
    Ok(TrainOutcome { model, history })
}

fn diverged(e: TrainError, epoch: usize) -> TrainError {
    match e {
        TrainError::Diff(DiffError::NonFinite { .. }) => TrainError::Diverged { epoch },
        TrainError::Sinkhorn(SinkhornError::Diff(DiffError::NonFinite { .. })) => TrainError::Diverged { epoch },
        TrainError::Net(NetError::Diff(DiffError::NonFinite { .. })) => TrainError::Diverged { epoch },
        other => other,
    }
}

const PREDICT_CHUNK: usize = 64;

/// Action sequences predicted for each raster.
pub fn predict(model: &Model, rasters: &[&[f64]]) -> Result<Vec<Vec<usize>>, TrainError> {
    let mut out = Vec::with_capacity(rasters.len());
    for chunk in rasters.chunks(PREDICT_CHUNK) {
        out.extend(predict_chunk(model, chunk)?);
    }
    Ok(out)
}

fn predict_chunk(model: &Model, rasters: &[&[f64]]) -> Result<Vec<Vec<usize>>, TrainError> {
    let arch = &model.arch;
    let (b, n, dim) = (rasters.len(), arch.n_actions, arch.encoder.input_dim);
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, false);
    let mut data = Vec::with_capacity(b * dim);
    for r in rasters {
        if r.len() != dim {
            return Err(NetError::InputDim { expected: dim, got: r.len() }.into());
        }
        data.extend_from_slice(r);
    }
    let x = g.constant(Tensor::new(vec![b, dim], data)?);
    let z = encode(&mut g, x, &bound, &arch.encoder)?;
    let lengths: Vec<usize> = if arch.variable_length && arch.family != Family::Tcn {
        let s = stop_head(&mut g, z, &bound)?;
        let t = g.value(s);
        (0..b).map(|i| predicted_length(t.row(i))).collect()
    } else {
        vec![arch.max_len; b]
    };
    let hungarian = matches!(model.kind, ModelKind::BcHungarian | ModelKind::TcnHungarian);
    let mut preds = Vec::with_capacity(b);
    match arch.family {
        Family::Bc => {
            let logits = bc_head(&mut g, z, &bound, arch.max_len, n)?;
            let probs = g.softmax(logits)?;
            let t = g.value(probs);
            for (i, &k) in lengths.iter().enumerate() {
                let rows: Vec<&[f64]> = (0..k).map(|s| t.row(i * arch.max_len + s)).collect();
                preds.push(decode_rows(&rows, n, hungarian)?);
            }
        }
        Family::Tcn => {
            let steps = arch.tcn.steps;
            let flat = tcn_decode(&mut g, z, &bound, &arch.tcn)?;
            let probs = g.softmax(flat)?;
            let t = g.value(probs);
            for i in 0..b {
                let rows: Vec<&[f64]> = (0..steps).map(|s| t.row(i * steps + s)).collect();
                let k = if arch.variable_length {
                    rows.iter().position(|r| argmax(r) == n).unwrap_or(steps)
                } else {
                    arch.max_len
                };
                let actions: Vec<&[f64]> = rows[..k].iter().map(|r| &r[..n]).collect();
                preds.push(decode_rows(&actions, n, hungarian)?);
            }
        }
        Family::Sinkhorn => {
            let logits = perm_head(&mut g, z, &bound, n)?;
            let p = sinkhorn_graph(&mut g, logits, model.sinkhorn.tau, model.sinkhorn.iters)?;
            let t = g.value(p);
            for (i, &k) in lengths.iter().enumerate() {
                let perm = hard_assignment_scores(n, &t.data()[i * n * n..(i + 1) * n * n])?;
                preds.push(perm.perm()[..k].to_vec());
            }
        }
    }
    Ok(preds)
}

/// Per-row argmax, or a maximum-score assignment of distinct actions to
/// rows when `assign` is set (rows padded with zeros to a square matrix).
pub fn decode_rows(rows: &[&[f64]], n: usize, assign: bool) -> Result<Vec<usize>, TrainError> {
    if !assign {
        return Ok(rows.iter().map(|r| argmax(r)).collect());
    }
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let mut scores = vec![0.0; n * n];
    for (i, r) in rows.iter().enumerate() {
        scores[i * n..(i + 1) * n].copy_from_slice(r);
    }
    Ok(hard_assignment_scores(n, &scores)?.perm()[..rows.len()].to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean symbol-level precision (colour, letter or piece).
    pub precision: f64,
    /// Fraction of predictions whose symbol sequence equals the truth.
    pub exact_rate: f64,
    /// Fraction of predictions that reuse an action.
    pub repetition_rate: f64,
    /// Fraction of predictions with the true length.
    pub length_acc: f64,
}

/// Matches over the shared prefix divided by the longer length; for equal
/// lengths this is the plain per-position precision.
pub fn sequence_precision(pred: &[usize], truth: &[usize]) -> f64 {
    let longer = pred.len().max(truth.len());
    if longer == 0 {
        return 1.0;
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / longer as f64
}

pub fn metrics_from_predictions(preds: &[Vec<usize>], tasks: &[TaskInstance], info: &EnvInfo) -> Metrics {
    let m = tasks.len().max(1) as f64;
    let mut precision = 0.0;
    let mut exact = 0usize;
    let mut repeated = 0usize;
    let mut length_ok = 0usize;
    for (pred, task) in preds.iter().zip(tasks) {
        let ps = info.symbol_sequence(pred);
        let ts = info.symbol_sequence(&task.actions);
        precision += sequence_precision(&ps, &ts);
        exact += usize::from(ps == ts);
        repeated += usize::from(has_repeat(pred));
        length_ok += usize::from(pred.len() == task.len());
    }
    Metrics {
        precision: precision / m,
        exact_rate: exact as f64 / m,
        repetition_rate: repeated as f64 / m,
        length_acc: length_ok as f64 / m,
    }
}

/// Predictions and metrics on a task list.
pub fn evaluate(model: &Model, tasks: &[TaskInstance], info: &EnvInfo) -> Result<(Metrics, Vec<Vec<usize>>), TrainError> {
    let rasters: Vec<&[f64]> = tasks.iter().map(|t| t.raster.as_slice()).collect();
    let preds = predict(model, &rasters)?;
    Ok((metrics_from_predictions(&preds, tasks, info), preds))
}

#[cfg(test)]
mod tests;
