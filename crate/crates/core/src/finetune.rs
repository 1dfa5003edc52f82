//! Clean contrastive pretraining and adversarial finetuning.
//!
//! Finetuning methods update only the vision parameters θ; the text
//! parameters φ and the frozen snapshot θ₀ are read but never written.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_model, AttackConfig, AttackKind, AttackTarget, Init};
use crate::data::{build_class_texts, epoch_batches, stack_images, ClassDataset, ImageTextPair};
use crate::encoders::{flatten_images, tokenize, ModelState, Params, TokenSeq, VisionPath, Vocabulary, TEXT_PREFIX, VISION_PREFIX};
use crate::error::{Error, Result};
use crate::eval::{clean_accuracy, robust_accuracy};
use crate::objectives::{self, FullInputs, RegFlags};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Pretrain,
    Advflyp,
    AdvflypFull,
    Tecoa,
    Fare,
    NaiveFlyp,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Pretrain,
        Method::Advflyp,
        Method::AdvflypFull,
        Method::Tecoa,
        Method::Fare,
        Method::NaiveFlyp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Pretrain => "pretrain",
            Method::Advflyp => "advflyp",
            Method::AdvflypFull => "advflyp-full",
            Method::Tecoa => "tecoa",
            Method::Fare => "fare",
            Method::NaiveFlyp => "naive-flyp",
        }
    }

    pub fn is_finetune(self) -> bool {
        self != Method::Pretrain
    }

    /// Inner-maximization objective, if the method attacks at all.
    pub fn attack_kind(self) -> Option<AttackKind> {
        match self {
            Method::Pretrain => None,
            Method::Advflyp | Method::AdvflypFull | Method::NaiveFlyp => Some(AttackKind::Contrastive),
            Method::Tecoa => Some(AttackKind::Ce),
            Method::Fare => Some(AttackKind::Fare),
        }
    }

    fn needs_captions(self) -> bool {
        matches!(self, Method::Pretrain | Method::Advflyp | Method::AdvflypFull)
    }

    fn needs_labels(self) -> bool {
        matches!(self, Method::Tecoa | Method::NaiveFlyp)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown training method {s:?}")))
    }
}

fn default_batch_size() -> usize {
    256
}

fn default_lr0() -> f64 {
    1e-4
}

fn default_patience() -> usize {
    10
}

fn default_max_len() -> usize {
    16
}

fn default_attack() -> AttackConfig {
    AttackConfig::training(AttackKind::Contrastive)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    pub total_epochs: usize,
    /// Training-time budget. The objective is always the method's own, so
    /// the `objective` field here is ignored.
    #[serde(default = "default_attack")]
    pub attack: AttackConfig,
    #[serde(default)]
    pub reg_logit: bool,
    #[serde(default)]
    pub reg_feat: bool,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    /// Caption and prompt truncation length in tokens.
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

impl TrainConfig {
    /// Defaults for `method`; advflyp-full enables both regularizers.
    pub fn new(method: Method, total_epochs: usize) -> Self {
        let full = method == Method::AdvflypFull;
        TrainConfig {
            method,
            batch_size: default_batch_size(),
            lr0: default_lr0(),
            total_epochs,
            attack: default_attack(),
            reg_logit: full,
            reg_feat: full,
            patience: default_patience(),
            seed: 0,
            max_len: default_max_len(),
        }
    }

    pub fn reg_flags(&self) -> RegFlags {
        RegFlags {
            logit: self.reg_logit,
            feat: self.reg_feat,
        }
    }

    /// The attack actually run during training. FARE always starts from a
    /// random point: its distance objective has zero gradient at `δ = 0`.
    pub fn training_attack(&self) -> Option<AttackConfig> {
        self.method.attack_kind().map(|objective| AttackConfig {
            objective,
            init: if objective == AttackKind::Fare { Init::Uniform } else { self.attack.init },
            ..self.attack.clone()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be >= 1".into()));
        }
        if let Some(a) = self.training_attack() {
            a.validate()?;
        }
        if self.reg_flags().any() && matches!(self.method, Method::Pretrain | Method::Fare) {
            return Err(Error::Config(format!("method {} takes no regularizers", self.method)));
        }
        Ok(())
    }
}

/// `lr0 · (1 + cos(π · step / total_steps)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Contract(format!("lr step {step} beyond {total_steps} total steps")));
    }
    if total_steps == 0 {
        return Ok(lr0);
    }
    let frac = step as f64 / total_steps as f64;
    Ok(lr0 * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0)
}

/// Adam with β₁ = 0.9, β₂ = 0.999, ε = 1e-8 and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: BTreeMap<String, (Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Adam<S> {
    /// Zero moment buffers for every listed parameter.
    pub fn new<'a>(params: impl IntoIterator<Item = (&'a String, &'a Tensor<S>)>) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: params
                .into_iter()
                .map(|(k, t)| (k.clone(), (vec![S::zero(); t.numel()], vec![S::zero(); t.numel()])))
                .collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn tracks(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    /// First and second moment buffers of one parameter.
    pub fn moments(&self, name: &str) -> Option<(&[S], &[S])> {
        self.moments.get(name).map(|(m, v)| (&m[..], &v[..]))
    }

    /// One update of every parameter named in `grads`. Each name must be
    /// tracked by this optimizer.
    pub fn step(&mut self, params: &mut Params<S>, grads: &[(String, Tensor<S>)], lr: f64) -> Result<()> {
        self.t += 1;
        self.update(params, grads, lr)
    }

    /// Applies the current step to a further parameter map without
    /// advancing the step counter.
    fn update(&mut self, params: &mut Params<S>, grads: &[(String, Tensor<S>)], lr: f64) -> Result<()> {
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let c1 = S::one() - S::lit(self.beta1.powi(self.t as i32));
        let c2 = S::one() - S::lit(self.beta2.powi(self.t as i32));
        let (lr, eps) = (S::lit(lr), S::lit(self.eps));
        for (name, grad) in grads {
            let (m, v) = self
                .moments
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("optimizer does not track {name}")))?;
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))?;
            if p.numel() != grad.numel() || m.len() != grad.numel() {
                return Err(Error::Dimension {
                    op: "adam step",
                    lhs: p.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            for (((w, &g), mi), vi) in p.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (S::one() - b1) * g;
                *vi = b2 * *vi + (S::one() - b2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Model, optimizer and early-stopping bookkeeping owned by one training
/// loop.
#[derive(Clone, Debug)]
pub struct TrainerState<S> {
    pub model: ModelState<S>,
    pub optimizer: Adam<S>,
    pub epoch: usize,
    pub step: usize,
    pub best_score: Option<f64>,
    pub epochs_since_improvement: usize,
    rng: ChaCha8Rng,
}

impl<S: Scalar> TrainerState<S> {
    /// Finetuning methods snapshot θ₀ here unless the model already carries
    /// one.
    pub fn new(mut model: ModelState<S>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.method.is_finetune() && !model.is_snapshotted() {
            model.snapshot_frozen()?;
        }
        let optimizer = if cfg.method.is_finetune() {
            Adam::new(model.theta.iter())
        } else {
            Adam::new(model.theta.iter().chain(model.phi.iter()))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::MAX);
        Ok(TrainerState {
            model,
            optimizer,
            epoch: 0,
            step: 0,
            best_score: None,
            epochs_since_improvement: 0,
            rng,
        })
    }

    /// Records an end-of-epoch proxy score; returns whether it improved on
    /// the best so far.
    pub fn record_score(&mut self, score: f64) -> bool {
        match self.best_score {
            Some(best) if score <= best => {
                self.epochs_since_improvement += 1;
                false
            }
            _ => {
                self.best_score = Some(score);
                self.epochs_since_improvement = 0;
                true
            }
        }
    }
}

/// Images plus whichever texts the method needs: captions for pair-based
/// methods, labels for tecoa and naive-flyp.
#[derive(Clone, Debug)]
pub struct TrainBatch<S> {
    pub images: Tensor<S>,
    pub captions: Option<Vec<TokenSeq>>,
    pub labels: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss: f64,
    /// Main term: contrastive, cross-entropy or embedding distance.
    pub clip: f64,
    pub logit: f64,
    pub feat: f64,
}

fn captions_of<S>(batch: &TrainBatch<S>, method: Method) -> Result<&[TokenSeq]> {
    batch
        .captions
        .as_deref()
        .ok_or_else(|| Error::Config(format!("method {method} needs image-caption pairs")))
}

fn labels_of<S>(batch: &TrainBatch<S>, method: Method) -> Result<&[usize]> {
    batch
        .labels
        .as_deref()
        .ok_or_else(|| Error::Config(format!("method {method} needs labeled images")))
}

fn class_texts_of(class_texts: Option<&[TokenSeq]>, method: Method) -> Result<&[TokenSeq]> {
    class_texts.ok_or_else(|| Error::Config(format!("method {method} needs class-template texts")))
}

fn collect_grads<S: Scalar>(g: &Graph<S>, loss: Var, bound: &[&[(String, Var)]]) -> Result<Vec<(String, Tensor<S>)>> {
    let mut grads = g.backward(loss)?;
    let mut out = Vec::new();
    for vars in bound {
        for (name, v) in vars.iter() {
            if let Some(t) = grads.take(*v) {
                out.push((name.clone(), t));
            }
        }
    }
    Ok(out)
}

fn apply_update<S: Scalar>(trainer: &mut TrainerState<S>, grads: Vec<(String, Tensor<S>)>, lr: f64) -> Result<()> {
    let (vision, text): (Vec<_>, Vec<_>) = grads.into_iter().partition(|(n, _)| n.starts_with(VISION_PREFIX));
    if text.iter().any(|(n, _)| !n.starts_with(TEXT_PREFIX)) {
        return Err(Error::Contract("gradient for an unknown parameter namespace".into()));
    }
    trainer.optimizer.step(&mut trainer.model.theta, &vision, lr)?;
    trainer.optimizer.update(&mut trainer.model.phi, &text, lr)
}

/// One optimizer step of `cfg.method` on `batch`. The attack (if any) runs
/// against the current model before the update.
pub fn train_step<S: Scalar>(
    cfg: &TrainConfig,
    trainer: &mut TrainerState<S>,
    batch: &TrainBatch<S>,
    class_texts: Option<&[TokenSeq]>,
    lr: f64,
) -> Result<StepMetrics> {
    let method = cfg.method;
    let n = batch.images.shape()[0];
    if let Some(c) = &batch.captions {
        if c.len() != n {
            return Err(Error::Config(format!("{} captions for {n} images", c.len())));
        }
    }
    if let Some(l) = &batch.labels {
        if l.len() != n {
            return Err(Error::Config(format!("{} labels for {n} images", l.len())));
        }
    }
    if method == Method::Pretrain {
        return pretrain_step(trainer, batch, lr);
    }
    let attack = cfg.training_attack().expect("finetuning methods attack");
    let model = &trainer.model;

    // Texts the outer loss compares against, as constants.
    let txt: Option<Tensor<S>> = match method {
        Method::Advflyp | Method::AdvflypFull => Some(model.encode_texts(captions_of(batch, method)?)?),
        Method::NaiveFlyp => {
            let labels = labels_of(batch, method)?;
            let classes = class_texts_of(class_texts, method)?;
            let texts = labels
                .iter()
                .map(|&y| {
                    classes
                        .get(y)
                        .cloned()
                        .ok_or_else(|| Error::Config(format!("label {y} has no class text")))
                })
                .collect::<Result<Vec<_>>>()?;
            Some(model.encode_texts(&texts)?)
        }
        Method::Tecoa => Some(model.encode_texts(class_texts_of(class_texts, method)?)?),
        Method::Fare | Method::Pretrain => None,
    };
    let labels = if method == Method::Tecoa { Some(labels_of(batch, method)?) } else { None };

    let target = match (method, &txt, labels) {
        (Method::Tecoa, Some(cls), Some(labels)) => AttackTarget::Labels { labels, class_txt: cls },
        (Method::Fare, _, _) => AttackTarget::Unlabeled,
        (_, Some(t), _) => AttackTarget::Texts(t),
        _ => unreachable!("texts resolved above"),
    };
    let perturbation = pgd_model(&attack, model, &batch.images, target, &mut trainer.rng)?;
    let adv = perturbation.apply(&batch.images)?;

    let mut g = Graph::new();
    let vision = model.bind_vision(&mut g, VisionPath::Target, true)?;
    let xa = g.constant(flatten_images(&adv)?);
    let emb_adv = vision.forward(&mut g, xa)?;
    let txt_var = txt.map(|t| g.constant(t));
    let main = match method {
        Method::Advflyp | Method::AdvflypFull | Method::NaiveFlyp => {
            objectives::contrastive_loss(&mut g, emb_adv, txt_var.expect("texts"), model.tau())?
        }
        Method::Tecoa => {
            let per = objectives::zero_shot_ce_per_sample(&mut g, emb_adv, txt_var.expect("texts"), labels.expect("labels"))?;
            g.mean(per)
        }
        Method::Fare => {
            let target = model.encode_images(&batch.images, true)?;
            let target = g.constant(target);
            let diff = g.sub(emb_adv, target)?;
            let dist = g.row_norm(diff)?;
            g.mean(dist)
        }
        Method::Pretrain => unreachable!(),
    };
    let flags = cfg.reg_flags();
    let (logit, feat) = if flags.any() {
        let xc = g.constant(flatten_images(&batch.images)?);
        let emb_clean = vision.forward(&mut g, xc)?;
        let frozen = model.bind_vision(&mut g, VisionPath::Frozen, false)?;
        let emb_frozen = frozen.forward(&mut g, xa)?;
        let inputs = FullInputs {
            x_adv: emb_adv,
            x_adv_frozen: emb_frozen,
            x_clean: emb_clean,
            txt: txt_var.ok_or_else(|| Error::Config(format!("method {method} takes no regularizers")))?,
        };
        objectives::regularizers(&mut g, &inputs, flags)?
    } else {
        (None, None)
    };
    let mut total = main;
    for term in [logit, feat].into_iter().flatten() {
        total = g.add(total, term)?;
    }
    let metrics = StepMetrics {
        loss: g.item(total).as_f64(),
        clip: g.item(main).as_f64(),
        logit: logit.map_or(0.0, |v| g.item(v).as_f64()),
        feat: feat.map_or(0.0, |v| g.item(v).as_f64()),
    };
    let grads = collect_grads(&g, total, &[vision.param_vars()])?;
    apply_update(trainer, grads, lr)?;
    trainer.step += 1;
    Ok(metrics)
}

fn pretrain_step<S: Scalar>(trainer: &mut TrainerState<S>, batch: &TrainBatch<S>, lr: f64) -> Result<StepMetrics> {
    let captions = captions_of(batch, Method::Pretrain)?;
    let model = &trainer.model;
    let mut g = Graph::new();
    let vision = model.bind_vision(&mut g, VisionPath::Target, true)?;
    let text = model.bind_text(&mut g, true)?;
    let x = g.constant(flatten_images(&batch.images)?);
    let img = vision.forward(&mut g, x)?;
    let txt = text.forward_tokens(&mut g, captions)?;
    let loss = objectives::contrastive_loss(&mut g, img, txt, model.tau())?;
    let value = g.item(loss).as_f64();
    let grads = collect_grads(&g, loss, &[vision.param_vars(), text.param_vars()])?;
    apply_update(trainer, grads, lr)?;
    trainer.step += 1;
    Ok(StepMetrics {
        loss: value,
        clip: value,
        ..StepMetrics::default()
    })
}

/// Training examples: bare pairs, or a labeled dataset whose captions (if
/// present) serve the pair-based methods.
#[derive(Clone, Copy, Debug)]
pub enum TrainData<'a> {
    Pairs(&'a [ImageTextPair]),
    Labeled(&'a ClassDataset),
}

impl TrainData<'_> {
    pub fn len(&self) -> usize {
        match self {
            TrainData::Pairs(p) => p.len(),
            TrainData::Labeled(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn image(&self, i: usize) -> &Tensor<f32> {
        match self {
            TrainData::Pairs(p) => &p[i].image,
            TrainData::Labeled(d) => &d.images[i],
        }
    }

    fn caption(&self, i: usize) -> Option<&str> {
        match self {
            TrainData::Pairs(p) => Some(&p[i].caption),
            TrainData::Labeled(d) if d.captions.iter().any(|c| !c.is_empty()) => Some(&d.captions[i]),
            TrainData::Labeled(_) => None,
        }
    }
}

/// End-of-epoch model score used for early stopping.
pub trait ProxyScorer<S: Scalar> {
    fn score(&mut self, model: &ModelState<S>, epoch: usize) -> Result<f64>;
}

impl<S: Scalar, F: FnMut(&ModelState<S>, usize) -> Result<f64>> ProxyScorer<S> for F {
    fn score(&mut self, model: &ModelState<S>, epoch: usize) -> Result<f64> {
        self(model, epoch)
    }
}

/// Zero-shot accuracy on a held-out labeled set, under an attack when one
/// is given.
pub struct AccuracyProxy<'a> {
    pub dataset: &'a ClassDataset,
    pub class_texts: Vec<TokenSeq>,
    pub attack: Option<AttackConfig>,
}

impl<'a> AccuracyProxy<'a> {
    /// Robust accuracy under cross-entropy PGD with the training budget for
    /// finetuning methods; clean accuracy for pretraining, where robust
    /// accuracy stays near zero and carries no signal.
    pub fn for_config(cfg: &TrainConfig, dataset: &'a ClassDataset, vocab: &Vocabulary) -> Result<Self> {
        let attack = cfg.method.is_finetune().then(|| AttackConfig {
            objective: AttackKind::Ce,
            track_best: true,
            ..cfg.attack.clone()
        });
        Ok(AccuracyProxy {
            dataset,
            class_texts: build_class_texts(dataset, vocab, cfg.max_len)?,
            attack,
        })
    }
}

impl<S: Scalar> ProxyScorer<S> for AccuracyProxy<'_> {
    fn score(&mut self, model: &ModelState<S>, _epoch: usize) -> Result<f64> {
        let class_emb = model.encode_texts(&self.class_texts)?;
        match &self.attack {
            Some(a) => robust_accuracy(model, self.dataset, &class_emb, a),
            None => clean_accuracy(model, self.dataset, &class_emb),
        }
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub loss_clip: f64,
    pub loss_logit: f64,
    pub loss_feat: f64,
    pub proxy_robust_acc: f64,
    pub lr: f64,
}

pub fn write_log(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for rec in log {
        serde_json::to_writer(&mut out, rec)?;
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S> {
    /// Best-scoring checkpoint (the initial model if no epoch ran).
    pub model: ModelState<S>,
    /// Epoch of the returned checkpoint; 0 for the initial model.
    pub best_epoch: usize,
    pub best_score: Option<f64>,
    pub epochs_run: usize,
    pub log: Vec<EpochLog>,
}

struct Prepared {
    captions: Option<Vec<TokenSeq>>,
    labels: Option<Vec<usize>>,
    class_texts: Option<Vec<TokenSeq>>,
}

fn prepare(cfg: &TrainConfig, data: TrainData<'_>, vocab: &Vocabulary) -> Result<Prepared> {
    let method = cfg.method;
    let captions = (0..data.len())
        .map(|i| data.caption(i).map(|c| tokenize(c, vocab, cfg.max_len)))
        .collect::<Option<Vec<_>>>();
    if method.needs_captions() && captions.is_none() {
        return Err(Error::Config(format!("method {method} needs image-caption pairs")));
    }
    let (labels, class_texts) = match data {
        TrainData::Labeled(ds) => (Some(ds.labels.clone()), Some(build_class_texts(ds, vocab, cfg.max_len)?)),
        TrainData::Pairs(_) => (None, None),
    };
    if method.needs_labels() && labels.is_none() {
        return Err(Error::Config(format!("method {method} needs a labeled dataset")));
    }
    Ok(Prepared {
        captions,
        labels,
        class_texts,
    })
}

/// Epoch loop with a per-step cosine schedule, end-of-epoch proxy scoring
/// and early stopping after `cfg.patience` epochs without improvement.
pub fn run_training<S: Scalar>(
    cfg: &TrainConfig,
    model: ModelState<S>,
    data: TrainData<'_>,
    vocab: &Vocabulary,
    proxy: &mut dyn ProxyScorer<S>,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if cfg.batch_size > data.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds the {} training examples",
            cfg.batch_size,
            data.len()
        )));
    }
    if cfg.total_epochs == 0 {
        return Ok(TrainOutcome {
            model,
            best_epoch: 0,
            best_score: None,
            epochs_run: 0,
            log: Vec::new(),
        });
    }
    let prep = prepare(cfg, data, vocab)?;
    let mut trainer = TrainerState::new(model, cfg)?;
    let steps_per_epoch = data.len() / cfg.batch_size;
    let total_steps = steps_per_epoch * cfg.total_epochs;
    let mut best = trainer.model.clone();
    let mut best_epoch = 0;
    let mut log = Vec::new();

    for epoch in 1..=cfg.total_epochs {
        trainer.epoch = epoch;
        let plan = epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch as u64, true)?;
        let mut sums = StepMetrics::default();
        let mut lr = cfg.lr0;
        for idx in &plan {
            let batch = TrainBatch {
                images: stack_images(idx.iter().map(|&i| data.image(i)))?,
                captions: prep.captions.as_ref().map(|c| idx.iter().map(|&i| c[i].clone()).collect()),
                labels: prep.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            };
            lr = cosine_lr(trainer.step, total_steps, cfg.lr0)?;
            let m = train_step(cfg, &mut trainer, &batch, prep.class_texts.as_deref(), lr)
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch} step {}: {msg}", trainer.step)),
                    other => other,
                })?;
            sums.loss += m.loss;
            sums.clip += m.clip;
            sums.logit += m.logit;
            sums.feat += m.feat;
        }
        let k = plan.len() as f64;
        let score = proxy.score(&trainer.model, epoch)?;
        if trainer.record_score(score) {
            best = trainer.model.clone();
            best_epoch = epoch;
        }
        let rec = EpochLog {
            epoch,
            mean_loss: sums.loss / k,
            loss_clip: sums.clip / k,
            loss_logit: sums.logit / k,
            loss_feat: sums.feat / k,
            proxy_robust_acc: score,
            lr,
        };
        log::info!(
            "{} epoch {epoch}: loss {:.4} proxy {:.4} lr {:.2e}",
            cfg.method,
            rec.mean_loss,
            score,
            lr
        );
        log.push(rec);
        if trainer.epochs_since_improvement >= cfg.patience {
            log::info!("no improvement for {} epochs, stopping", cfg.patience);
            break;
        }
    }
    Ok(TrainOutcome {
        model: best,
        best_epoch,
        best_score: trainer.best_score,
        epochs_run: log.len(),
        log,
    })
}
