//! Vision and text encoders sharing one embedding space, plus the frozen
//! reference copy of the vision encoder.
//!
//! Both encoders are stacks of affine layers with a nonlinearity, ending in a
//! bias-free linear projection to the shared embedding width `d`. The vision
//! encoder reads flattened pixels; the text encoder mean-pools learned token
//! embeddings. Outputs are always L2-normalized rows.

mod checkpoint;
mod tokenizer;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use tokenizer::{tokenize, TokenSeq, Vocabulary, OOV_INDEX, OOV_TOKEN};

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

pub const VISION_PREFIX: &str = "vision.";
pub const TEXT_PREFIX: &str = "text.";
pub const FROZEN_PREFIX: &str = "frozen.";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    #[default]
    Relu,
    Tanh,
}

impl Nonlinearity {
    fn apply<S: Scalar>(self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        match self {
            Nonlinearity::Relu => g.relu(x),
            Nonlinearity::Tanh => g.tanh(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// `C·H·W` for the vision encoder, token-embedding width for text.
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
    #[serde(default)]
    pub seed: u64,
    /// Required for the text encoder; ignored for vision.
    #[serde(default)]
    pub vocab_size: Option<usize>,
}

impl EncoderConfig {
    fn validate(&self, what: &str) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config(format!("{what} encoder dimensions must be positive")));
        }
        Ok(())
    }
}

/// Named parameter tensors of one encoder, kept in sorted-name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params<S>(BTreeMap<String, Tensor<S>>);

impl<S: Scalar> Params<S> {
    pub fn new() -> Self {
        Params(BTreeMap::new())
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.0.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        self.0.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.0
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.0.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.0.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.0.values().map(Tensor::numel).sum()
    }

    /// Bitwise equality of every tensor, including NaN payloads and signed
    /// zeros.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.0.len() == other.0.len()
            && self.0.iter().zip(&other.0).all(|((na, ta), (nb, tb))| {
                na == nb
                    && ta.shape() == tb.shape()
                    && ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

/// Which vision parameters an image goes through.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VisionPath {
    Target,
    Frozen,
}

/// Vision parameters θ, text parameters φ, temperature τ, and the frozen
/// vision snapshot θ₀.
#[derive(Clone, Debug)]
pub struct ModelState<S> {
    pub theta: Params<S>,
    pub phi: Params<S>,
    tau: S,
    theta0: Option<Arc<Params<S>>>,
    pub vision_act: Nonlinearity,
    pub text_act: Nonlinearity,
}

fn hidden_name(prefix: &str, i: usize, part: &str) -> String {
    format!("{prefix}hidden.{i}.{part}")
}

fn xavier<S: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<S> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| S::lit(rng.gen_range(-a..=a)))
}

fn init_stack<S: Scalar>(
    prefix: &str,
    cfg: &EncoderConfig,
    rng: &mut ChaCha8Rng,
    params: &mut Params<S>,
) -> Result<()> {
    let mut width = cfg.input_dim;
    for (i, &h) in cfg.hidden_dims.iter().enumerate() {
        params.insert(hidden_name(prefix, i, "weight"), xavier(rng, width, h))?;
        params.insert(hidden_name(prefix, i, "bias"), Tensor::zeros(&[1, h]))?;
        width = h;
    }
    params.insert(format!("{prefix}proj.weight"), xavier(rng, width, cfg.embed_dim))
}

/// Initializes both encoders. Weights are uniform in `[-a, a]` with
/// `a = sqrt(6 / (fan_in + fan_out))`, biases are zero, and the result is a
/// pure function of the configs and `seed`.
pub fn init_model<S: Scalar>(
    vision: &EncoderConfig,
    text: &EncoderConfig,
    tau: S,
    seed: u64,
) -> Result<ModelState<S>> {
    vision.validate("vision")?;
    text.validate("text")?;
    if vision.embed_dim != text.embed_dim {
        return Err(Error::Config(format!(
            "embed_dim mismatch: vision {} vs text {}",
            vision.embed_dim, text.embed_dim
        )));
    }
    check_tau(tau)?;
    let vocab = text
        .vocab_size
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::Config("text encoder needs a positive vocab_size".into()))?;

    let mut theta = Params::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * vision.seed);
    init_stack(VISION_PREFIX, vision, &mut rng, &mut theta)?;

    let mut phi = Params::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * text.seed + 1);
    phi.insert(format!("{TEXT_PREFIX}token_embedding"), xavier(&mut rng, vocab, text.input_dim))?;
    init_stack(TEXT_PREFIX, text, &mut rng, &mut phi)?;

    Ok(ModelState {
        theta,
        phi,
        tau,
        theta0: None,
        vision_act: vision.nonlinearity,
        text_act: text.nonlinearity,
    })
}

fn check_tau<S: Scalar>(tau: S) -> Result<()> {
    if !(tau > S::zero()) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Parameters of one encoder registered on a graph.
#[derive(Clone, Debug)]
pub struct BoundEncoder {
    embedding: Option<Var>,
    layers: Vec<(Var, Var)>,
    proj: Var,
    act: Nonlinearity,
    input_dim: usize,
    names: Vec<(String, Var)>,
}

fn bind_stack<S: Scalar>(
    g: &mut Graph<S>,
    params: &Params<S>,
    prefix: &str,
    act: Nonlinearity,
    trainable: bool,
) -> Result<BoundEncoder> {
    let mut names = Vec::new();
    let mut bind = |g: &mut Graph<S>, name: String, t: &Tensor<S>| {
        let v = g.leaf(t.clone(), trainable);
        names.push((name, v));
        v
    };
    let emb_name = format!("{prefix}token_embedding");
    let embedding = match params.get(&emb_name) {
        Ok(t) => Some(bind(g, emb_name, t)),
        Err(_) => None,
    };
    let mut layers = Vec::new();
    let mut input_dim = None;
    for i in 0.. {
        let w_name = hidden_name(prefix, i, "weight");
        if !params.contains(&w_name) {
            break;
        }
        let w = params.get(&w_name)?;
        input_dim.get_or_insert(w.shape()[0]);
        let b_name = hidden_name(prefix, i, "bias");
        let b = params.get(&b_name)?;
        let wv = bind(g, w_name, w);
        let bv = bind(g, b_name, b);
        layers.push((wv, bv));
    }
    let p_name = format!("{prefix}proj.weight");
    let p = params.get(&p_name)?;
    let input_dim = input_dim.unwrap_or(p.shape()[0]);
    let proj = bind(g, p_name, p);
    Ok(BoundEncoder {
        embedding,
        layers,
        proj,
        act,
        input_dim,
        names,
    })
}

impl BoundEncoder {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn embedding(&self) -> Option<Var> {
        self.embedding
    }

    /// Parameter names with the graph handles they were bound to.
    pub fn param_vars(&self) -> &[(String, Var)] {
        &self.names
    }

    /// Affine stack + projection + row normalization on `x[N×input_dim]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::Dimension {
                op: "encoder input",
                lhs: shape,
                rhs: vec![0, self.input_dim],
            });
        }
        let mut h = x;
        for &(w, b) in &self.layers {
            let z = g.matmul(h, w)?;
            let z = g.add_row(z, b)?;
            h = self.act.apply(g, z)?;
        }
        let out = g.matmul(h, self.proj)?;
        g.l2_normalize_rows(out)
    }

    /// Mean-pools token embeddings (an empty sequence pools to the OOV row)
    /// and runs the stack. Only valid for a text encoder.
    pub fn forward_tokens<S: Scalar>(&self, g: &mut Graph<S>, tokens: &[TokenSeq]) -> Result<Var> {
        let emb = self
            .embedding
            .ok_or_else(|| Error::Contract("forward_tokens on an encoder without token embeddings".into()))?;
        if tokens.is_empty() {
            return Err(Error::Contract("text batch must be nonempty".into()));
        }
        let vocab = g.value(emb).shape()[0];
        let pool = pooling_matrix::<S>(tokens, vocab)?;
        let pool = g.constant(pool);
        let pooled = g.matmul(pool, emb)?;
        self.forward(g, pooled)
    }
}

/// `N×V` matrix whose row `i` averages the one-hot rows of sequence `i`.
pub fn pooling_matrix<S: Scalar>(tokens: &[TokenSeq], vocab: usize) -> Result<Tensor<S>> {
    let mut m = Tensor::zeros(&[tokens.len(), vocab]);
    for (i, seq) in tokens.iter().enumerate() {
        let row = &mut m.data_mut()[i * vocab..(i + 1) * vocab];
        if seq.is_empty() {
            row[OOV_INDEX] = S::one();
            continue;
        }
        let w = S::one() / S::from_usize_lossy(seq.len());
        for &id in &seq.ids {
            if id >= vocab {
                return Err(Error::Contract(format!("token index {id} >= vocab size {vocab}")));
            }
            row[id] += w;
        }
    }
    Ok(m)
}

impl<S: Scalar> ModelState<S> {
    pub fn from_parts(theta: Params<S>, phi: Params<S>, tau: S, theta0: Option<Params<S>>) -> Result<Self> {
        check_tau(tau)?;
        Ok(ModelState {
            theta,
            phi,
            tau,
            theta0: theta0.map(Arc::new),
            vision_act: Nonlinearity::default(),
            text_act: Nonlinearity::default(),
        })
    }

    pub fn tau(&self) -> S {
        self.tau
    }

    pub fn set_tau(&mut self, tau: S) -> Result<()> {
        check_tau(tau)?;
        self.tau = tau;
        Ok(())
    }

    pub fn theta0(&self) -> Option<&Params<S>> {
        self.theta0.as_deref()
    }

    pub fn is_snapshotted(&self) -> bool {
        self.theta0.is_some()
    }

    /// Deep-copies θ into the frozen reference θ₀. May be called once.
    pub fn snapshot_frozen(&mut self) -> Result<()> {
        if self.theta0.is_some() {
            return Err(Error::Contract("frozen vision snapshot already taken".into()));
        }
        self.theta0 = Some(Arc::new(self.theta.clone()));
        Ok(())
    }

    /// Width of a flattened image.
    pub fn image_dim(&self) -> Result<usize> {
        let probe = self
            .theta
            .get(&hidden_name(VISION_PREFIX, 0, "weight"))
            .or_else(|_| self.theta.get(&format!("{VISION_PREFIX}proj.weight")))?;
        Ok(probe.shape()[0])
    }

    pub fn embed_dim(&self) -> Result<usize> {
        Ok(self.theta.get(&format!("{VISION_PREFIX}proj.weight"))?.shape()[1])
    }

    pub fn vocab_size(&self) -> Result<usize> {
        Ok(self.phi.get(&format!("{TEXT_PREFIX}token_embedding"))?.shape()[0])
    }

    /// Registers vision parameters on `g`. The frozen path never records
    /// parameter gradients.
    pub fn bind_vision(&self, g: &mut Graph<S>, path: VisionPath, trainable: bool) -> Result<BoundEncoder> {
        match path {
            VisionPath::Target => bind_stack(g, &self.theta, VISION_PREFIX, self.vision_act, trainable),
            VisionPath::Frozen => {
                let theta0 = self
                    .theta0
                    .as_deref()
                    .ok_or_else(|| Error::Contract("frozen path requested before snapshot".into()))?;
                bind_stack(g, theta0, VISION_PREFIX, self.vision_act, false)
            }
        }
    }

    pub fn bind_text(&self, g: &mut Graph<S>, trainable: bool) -> Result<BoundEncoder> {
        bind_stack(g, &self.phi, TEXT_PREFIX, self.text_act, trainable)
    }

    /// Embeds an `N×C×H×W` (or already flattened `N×D`) image batch with no
    /// gradient tracking.
    pub fn encode_images(&self, images: &Tensor<S>, use_frozen: bool) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let path = if use_frozen { VisionPath::Frozen } else { VisionPath::Target };
        let enc = self.bind_vision(&mut g, path, false)?;
        let x = g.constant(flatten_images(images)?);
        let out = enc.forward(&mut g, x)?;
        Ok(g.value(out).clone())
    }

    pub fn encode_texts(&self, tokens: &[TokenSeq]) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let enc = self.bind_text(&mut g, false)?;
        let out = enc.forward_tokens(&mut g, tokens)?;
        Ok(g.value(out).clone())
    }
}

/// Reshapes `N×C×H×W` to `N×(C·H·W)`, warning when pixels leave `[0, 1]`.
pub fn flatten_images<S: Scalar>(images: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, w) = images.rows_and_width();
    let tol = S::lit(1e-6);
    if images.data().iter().any(|&p| p < -tol || p > S::one() + tol) {
        log::warn!("image batch has pixels outside [0, 1]");
    }
    images.reshape(&[n, w])
}
