//! Model heads on top of a shared dense encoder: permutation logits, stopping
//! classifier, direct behaviour-cloning logits, and a causal temporal
//! convolution decoder.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Graph, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("input has {got} values, encoder expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("invalid architecture: {0}")]
    BadArch(String),
    #[error("unknown model kind `{0}`")]
    UnknownKind(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Inference/training variant. `*_hungarian` kinds share weights with their
/// plain counterpart and differ only at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Bc,
    BcHungarian,
    Tcn,
    TcnHungarian,
    Sinkhorn,
}

/// Which set of heads a kind trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Bc,
    Tcn,
    Sinkhorn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Bc,
        ModelKind::BcHungarian,
        ModelKind::Tcn,
        ModelKind::TcnHungarian,
        ModelKind::Sinkhorn,
    ];

    pub fn family(self) -> Family {
        match self {
            ModelKind::Bc | ModelKind::BcHungarian => Family::Bc,
            ModelKind::Tcn | ModelKind::TcnHungarian => Family::Tcn,
            ModelKind::Sinkhorn => Family::Sinkhorn,
        }
    }

    /// Whether predictions are structurally guaranteed to be repeat-free.
    pub fn is_permutation_constrained(self) -> bool {
        matches!(
            self,
            ModelKind::BcHungarian | ModelKind::TcnHungarian | ModelKind::Sinkhorn
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Bc => "bc",
            ModelKind::BcHungarian => "bc_hungarian",
            ModelKind::Tcn => "tcn",
            ModelKind::TcnHungarian => "tcn_hungarian",
            ModelKind::Sinkhorn => "sinkhorn",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = NetError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| NetError::UnknownKind(s.to_string()))
    }
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Bc => "bc",
            Family::Tcn => "tcn",
            Family::Sinkhorn => "sinkhorn",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub latent_dim: usize,
}

impl EncoderConfig {
    pub fn new(input_dim: usize) -> Self {
        EncoderConfig {
            input_dim,
            hidden_dims: vec![256, 128],
            latent_dim: 128,
        }
    }

    fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.latent_dim);
        dims
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TcnConfig {
    /// Output sequence length, including room for the stop class.
    pub steps: usize,
    pub state_dim: usize,
    /// Dilation doubles per layer: 1, 2, 4, ...
    pub layers: usize,
}

impl Default for TcnConfig {
    fn default() -> Self {
        TcnConfig {
            steps: 6,
            state_dim: 16,
            layers: 6,
        }
    }
}

/// Everything needed to allocate and run one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    pub family: Family,
    pub encoder: EncoderConfig,
    pub n_actions: usize,
    pub max_len: usize,
    /// Whether sequence lengths vary, so inference must predict a length.
    #[serde(default)]
    pub variable_length: bool,
    pub tcn: TcnConfig,
}

impl ModelArch {
    pub fn validate(&self) -> Result<(), NetError> {
        let e = &self.encoder;
        if e.input_dim == 0 || e.latent_dim == 0 || e.hidden_dims.contains(&0) {
            return Err(NetError::BadArch("encoder dimensions must be >= 1".into()));
        }
        if self.n_actions == 0 || self.max_len == 0 || self.max_len > self.n_actions {
            return Err(NetError::BadArch(format!(
                "need 1 <= max_len ({}) <= n_actions ({})",
                self.max_len, self.n_actions
            )));
        }
        if self.family == Family::Tcn
            && (self.tcn.steps < self.max_len || self.tcn.state_dim == 0 || self.tcn.layers == 0)
        {
            return Err(NetError::BadArch("tcn needs steps >= max_len and non-empty layers".into()));
        }
        Ok(())
    }

    /// `(name, shape)` of every parameter, in allocation order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let dims = self.encoder.layer_dims();
        for (i, w) in dims.windows(2).enumerate() {
            out.push((format!("enc.{i}.w"), vec![w[0], w[1]]));
            out.push((format!("enc.{i}.b"), vec![w[1]]));
        }
        let l = self.encoder.latent_dim;
        let n = self.n_actions;
        if self.family != Family::Tcn {
            out.push(("stop.w".into(), vec![l, self.max_len]));
            out.push(("stop.b".into(), vec![self.max_len]));
        }
        match self.family {
            Family::Sinkhorn => {
                out.push(("perm.w".into(), vec![l, n * n]));
                out.push(("perm.b".into(), vec![n * n]));
            }
            Family::Bc => {
                out.push(("bc.w".into(), vec![l, self.max_len * n]));
                out.push(("bc.b".into(), vec![self.max_len * n]));
            }
            Family::Tcn => {
                let TcnConfig {
                    steps,
                    state_dim: s,
                    layers,
                } = self.tcn;
                out.push(("tcn.in.w".into(), vec![l, s]));
                out.push(("tcn.in.b".into(), vec![s]));
                out.push(("tcn.pos".into(), vec![steps, s]));
                for i in 0..layers {
                    out.push((format!("tcn.{i}.w0"), vec![s, s]));
                    out.push((format!("tcn.{i}.w1"), vec![s, s]));
                    out.push((format!("tcn.{i}.b"), vec![s]));
                }
                out.push(("tcn.out.w".into(), vec![s, n + 1]));
                out.push(("tcn.out.b".into(), vec![n + 1]));
            }
        }
        out
    }
}

/// Named weight and bias tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        ModelParams::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Registers every tensor as a graph leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), g.leaf(t.clone(), trainable)))
            .collect();
        BoundParams { vars }
    }

    /// Checks that every parameter the architecture needs is present with
    /// the right shape.
    pub fn check_arch(&self, arch: &ModelArch) -> Result<(), NetError> {
        for (name, shape) in arch.param_shapes() {
            match self.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(NetError::BadArch(format!(
                        "`{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(NetError::MissingParam(name)),
            }
        }
        Ok(())
    }
}

/// Graph handles for a [`ModelParams`] set.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var, NetError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| NetError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Glorot-uniform weights in `+-sqrt(6 / (fan_in + fan_out))`, zero biases.
pub fn init_params(arch: &ModelArch, seed: u64) -> Result<ModelParams, NetError> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::new();
    for (name, shape) in arch.param_shapes() {
        let numel: usize = shape.iter().product();
        let t = if shape.len() == 2 {
            let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::new(shape, data)?
        } else {
            Tensor::zeros(&shape)
        };
        params.insert(name, t);
    }
    Ok(params)
}

fn dense(g: &mut Graph, x: Var, p: &BoundParams, prefix: &str) -> Result<Var, NetError> {
    let w = p.var(&format!("{prefix}.w"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    let h = g.matmul(x, w)?;
    Ok(g.add_periodic(h, b)?)
}

/// Dense ReLU stack: `[batch, input_dim] -> [batch, latent_dim]`.
pub fn encode(g: &mut Graph, x: Var, p: &BoundParams, cfg: &EncoderConfig) -> Result<Var, NetError> {
    let shape = g.shape(x);
    if shape.len() != 2 || shape[1] != cfg.input_dim {
        return Err(NetError::InputDim {
            expected: cfg.input_dim,
            got: *shape.last().unwrap_or(&0),
        });
    }
    let mut h = x;
    for i in 0..cfg.layer_dims().len() - 1 {
        let z = dense(g, h, p, &format!("enc.{i}"))?;
        h = g.relu(z)?;
    }
    Ok(h)
}

/// Encodes a single flat raster outside any training graph.
pub fn encode_raster(
    raster: &[f64],
    params: &ModelParams,
    cfg: &EncoderConfig,
) -> Result<Vec<f64>, NetError> {
    if raster.len() != cfg.input_dim {
        return Err(NetError::InputDim {
            expected: cfg.input_dim,
            got: raster.len(),
        });
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(Tensor::new(vec![1, raster.len()], raster.to_vec())?);
    let z = encode(&mut g, x, &bound, cfg)?;
    Ok(g.value(z).data().to_vec())
}

/// `[batch, latent] -> [batch, n, n]` permutation logits.
pub fn perm_head(g: &mut Graph, latent: Var, p: &BoundParams, n: usize) -> Result<Var, NetError> {
    let b = g.shape(latent)[0];
    let z = dense(g, latent, p, "perm")?;
    Ok(g.reshape(z, &[b, n, n])?)
}

/// `[batch, latent] -> [batch, max_len]` logits over lengths `1..=max_len`.
pub fn stop_head(g: &mut Graph, latent: Var, p: &BoundParams) -> Result<Var, NetError> {
    dense(g, latent, p, "stop")
}

/// Predicted length from stop logits: first argmax plus one, so ties resolve
/// to the shortest length.
pub fn predicted_length(stop_logits: &[f64]) -> usize {
    argmax(stop_logits) + 1
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// `[batch, latent] -> [batch, steps, n]` unconstrained per-step action logits.
pub fn bc_head(
    g: &mut Graph,
    latent: Var,
    p: &BoundParams,
    steps: usize,
    n: usize,
) -> Result<Var, NetError> {
    let b = g.shape(latent)[0];
    let z = dense(g, latent, p, "bc")?;
    Ok(g.reshape(z, &[b, steps, n])?)
}

/// Causal dilated convolution stack over a `[batch * steps, state_dim]`
/// input sequence, returning `[batch * steps, n + 1]` logits where class `n`
/// is the stop action. Step `t` only sees input steps `<= t`.
pub fn tcn_sequence(
    g: &mut Graph,
    seq: Var,
    p: &BoundParams,
    cfg: &TcnConfig,
) -> Result<Var, NetError> {
    let mut h = seq;
    for i in 0..cfg.layers {
        let dilation = 1usize << i.min(30);
        let past = g.shift_rows(h, dilation, cfg.steps)?;
        let w0 = p.var(&format!("tcn.{i}.w0"))?;
        let w1 = p.var(&format!("tcn.{i}.w1"))?;
        let b = p.var(&format!("tcn.{i}.b"))?;
        let now_term = g.matmul(h, w0)?;
        let past_term = g.matmul(past, w1)?;
        let z = g.add(now_term, past_term)?;
        let z = g.add_periodic(z, b)?;
        let a = g.relu(z)?;
        h = g.add(h, a)?;
    }
    dense(g, h, p, "tcn.out")
}

/// Temporal decoder: the latent is projected to `state_dim`, broadcast to
/// every step, offset by a learned per-step embedding, then decoded causally.
pub fn tcn_decode(
    g: &mut Graph,
    latent: Var,
    p: &BoundParams,
    cfg: &TcnConfig,
) -> Result<Var, NetError> {
    let z = dense(g, latent, p, "tcn.in")?;
    let seq = g.repeat_rows(z, cfg.steps)?;
    let pos = p.var("tcn.pos")?;
    let seq = g.add_periodic(seq, pos)?;
    tcn_sequence(g, seq, p, cfg)
}
