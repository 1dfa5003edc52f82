//! L∞ projected gradient ascent on pixel perturbations.
//!
//! The attack owns its perturbation for the duration of a run and reads the
//! model through an immutable [`ModelState`]; only the perturbation leaf
//! requires gradients, so θ, θ₀ and φ never receive any.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{flatten_images, ModelState, VisionPath};
use crate::error::{Error, Result};
use crate::objectives;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    /// Mean per-image zero-shot cross-entropy against the true class.
    Ce,
    /// Batch contrastive loss, optimized jointly over all perturbations.
    Contrastive,
    /// Mean per-image cosine margin `max_{k≠y} s_k − s_y`.
    Cw,
    /// Mean L2 distance between perturbed and clean embeddings.
    Fare,
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" | "pgd" => Ok(AttackKind::Ce),
            "contrastive" => Ok(AttackKind::Contrastive),
            "cw" => Ok(AttackKind::Cw),
            "fare" => Ok(AttackKind::Fare),
            other => Err(Error::Config(format!("unknown attack objective {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    #[default]
    Zero,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// L∞ budget in `[0, 1]` pixel units.
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    #[serde(default)]
    pub init: Init,
    pub objective: AttackKind,
    #[serde(default)]
    pub track_best: bool,
    /// Seeds the uniform initialization.
    #[serde(default)]
    pub seed: u64,
}

impl AttackConfig {
    /// Training-time attack: two steps at `ε = α = 1/255`, final iterate.
    pub fn training(objective: AttackKind) -> Self {
        AttackConfig {
            epsilon: 1.0 / 255.0,
            step_size: 1.0 / 255.0,
            steps: 2,
            init: Init::Zero,
            objective,
            track_best: false,
            seed: 0,
        }
    }

    /// Evaluation attack with best-iterate tracking.
    pub fn evaluation(objective: AttackKind, epsilon: f64, steps: usize) -> Self {
        AttackConfig {
            epsilon,
            step_size: epsilon / 4.0,
            steps,
            init: Init::Zero,
            objective,
            track_best: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return Err(Error::Config(format!("step_size must be >= 0, got {}", self.step_size)));
        }
        if self.steps == 0 {
            return Err(Error::Config("attack needs at least one step".into()));
        }
        Ok(())
    }
}

/// Result of an attack on an `N`-image batch.
#[derive(Clone, Debug)]
pub struct PerturbationBatch<S> {
    /// Same shape as the attacked images.
    pub delta: Tensor<S>,
    pub epsilon: S,
    /// Objective at the returned perturbation.
    pub achieved_objective: S,
    /// Objective at the initial iterate.
    pub initial_objective: S,
}

impl<S: Scalar> PerturbationBatch<S> {
    /// `x + δ`, guaranteed inside `[0, 1]`.
    pub fn apply(&self, images: &Tensor<S>) -> Result<Tensor<S>> {
        add_same_shape(images, &self.delta)
    }
}

fn add_same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.numel() != b.numel() {
        return Err(Error::Dimension {
            op: "apply perturbation",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &d)| x + d).collect();
    Tensor::from_vec(a.shape().to_vec(), data)
}

/// Projects `delta` onto the L∞ ball of radius `epsilon` and then onto the
/// set where `x + delta` stays in `[0, 1]`. Both constraints hold exactly in
/// floating point for the returned perturbation.
pub fn project_and_clamp<S: Scalar>(x: &Tensor<S>, delta: &Tensor<S>, epsilon: S) -> Result<Tensor<S>> {
    if x.shape() != delta.shape() {
        return Err(Error::Dimension {
            op: "project_and_clamp",
            lhs: x.shape().to_vec(),
            rhs: delta.shape().to_vec(),
        });
    }
    let (zero, one) = (S::zero(), S::one());
    let data = x
        .data()
        .iter()
        .zip(delta.data())
        .map(|(&xi, &di)| {
            let mut d = di.max(-epsilon).min(epsilon);
            let y = xi + d;
            if y > one {
                d = one - xi;
            } else if y < zero {
                d = zero - xi;
            }
            // rounding in x + (1 - x) can leave the sum a hair outside the box
            let nudge = S::epsilon() * xi.abs().max(one);
            while xi + d > one {
                d -= nudge;
            }
            while xi + d < zero {
                d += nudge;
            }
            d
        })
        .collect();
    Tensor::from_vec(x.shape().to_vec(), data)
}

/// Attack objective value before aggregation.
#[derive(Clone, Copy, Debug)]
pub enum ObjectiveValue {
    /// `N×1`, one independent term per image; the batch objective is the mean.
    PerSample(Var),
    /// A single scalar coupling every image.
    Joint(Var),
}

/// Something PGD can maximize over the perturbed batch `adv[N×D]`.
pub trait AttackObjective<S: Scalar> {
    fn evaluate(&self, g: &mut Graph<S>, adv: Var) -> Result<ObjectiveValue>;
}

/// What an attack objective compares the perturbed images against.
#[derive(Clone, Copy, Debug)]
pub enum AttackTarget<'a, S> {
    /// Per-image caption embeddings `N×d` (contrastive).
    Texts(&'a Tensor<S>),
    /// True labels and class-prompt embeddings `K×d` (ce, cw).
    Labels { labels: &'a [usize], class_txt: &'a Tensor<S> },
    /// Clean-embedding distance needs no text (fare).
    Unlabeled,
}

/// The four built-in objectives evaluated through the target vision encoder.
pub struct ModelObjective<'a, S: Scalar> {
    state: &'a ModelState<S>,
    kind: AttackKind,
    target: AttackTarget<'a, S>,
    clean_emb: Option<Tensor<S>>,
}

impl<'a, S: Scalar> ModelObjective<'a, S> {
    /// `images` is needed for the FARE objective, whose clean embeddings are
    /// computed once and then held constant.
    pub fn new(
        state: &'a ModelState<S>,
        kind: AttackKind,
        target: AttackTarget<'a, S>,
        images: &Tensor<S>,
    ) -> Result<Self> {
        let ok = matches!(
            (kind, &target),
            (AttackKind::Contrastive, AttackTarget::Texts(_))
                | (AttackKind::Ce | AttackKind::Cw, AttackTarget::Labels { .. })
                | (AttackKind::Fare, _)
        );
        if !ok {
            return Err(Error::Config(format!("attack objective {kind:?} does not match its target")));
        }
        let clean_emb = match kind {
            AttackKind::Fare => Some(state.encode_images(images, false)?),
            _ => None,
        };
        Ok(ModelObjective {
            state,
            kind,
            target,
            clean_emb,
        })
    }
}

impl<S: Scalar> AttackObjective<S> for ModelObjective<'_, S> {
    fn evaluate(&self, g: &mut Graph<S>, adv: Var) -> Result<ObjectiveValue> {
        let enc = self.state.bind_vision(g, VisionPath::Target, false)?;
        let emb = enc.forward(g, adv)?;
        match (self.kind, self.target) {
            (AttackKind::Contrastive, AttackTarget::Texts(txt)) => {
                let txt = g.constant(txt.clone());
                let l = objectives::contrastive_loss(g, emb, txt, self.state.tau())?;
                Ok(ObjectiveValue::Joint(l))
            }
            (AttackKind::Ce, AttackTarget::Labels { labels, class_txt }) => {
                let cls = g.constant(class_txt.clone());
                let l = objectives::zero_shot_ce_per_sample(g, emb, cls, labels)?;
                Ok(ObjectiveValue::PerSample(l))
            }
            (AttackKind::Cw, AttackTarget::Labels { labels, class_txt }) => {
                let cls = g.constant(class_txt.clone());
                let l = objectives::cw_margin_per_sample(g, emb, cls, labels)?;
                Ok(ObjectiveValue::PerSample(l))
            }
            (AttackKind::Fare, _) => {
                let clean = g.constant(self.clean_emb.clone().expect("computed in new"));
                let diff = g.sub(emb, clean)?;
                Ok(ObjectiveValue::PerSample(g.row_norm(diff)?))
            }
            (kind, _) => Err(Error::Config(format!("attack objective {kind:?} does not match its target"))),
        }
    }
}

struct Evaluated<S> {
    per_sample: Option<Vec<S>>,
    value: S,
    grad: Option<Tensor<S>>,
}

fn run_objective<S: Scalar>(
    objective: &dyn AttackObjective<S>,
    x: &Tensor<S>,
    delta: &Tensor<S>,
    want_grad: bool,
) -> Result<Evaluated<S>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let dv = g.leaf(delta.clone(), want_grad);
    let adv = g.add(xv, dv)?;
    let (scalar, per_sample) = match objective.evaluate(&mut g, adv)? {
        ObjectiveValue::PerSample(v) => {
            let per = g.value(v).data().to_vec();
            (g.mean(v), Some(per))
        }
        ObjectiveValue::Joint(v) => (v, None),
    };
    let value = g.item(scalar);
    if !value.is_finite() {
        return Err(Error::Numeric(format!("attack objective is {value}")));
    }
    let grad = if want_grad {
        let mut grads = g.backward(scalar)?;
        Some(grads.take(dv).unwrap_or_else(|| Tensor::zeros(delta.shape())))
    } else {
        None
    };
    Ok(Evaluated {
        per_sample,
        value,
        grad,
    })
}

/// Objective value of a fixed perturbation (batch mean for per-image
/// objectives).
pub fn objective_value<S: Scalar>(objective: &dyn AttackObjective<S>, images: &Tensor<S>, delta: &Tensor<S>) -> Result<S> {
    let x = flatten_images(images)?;
    let d = delta.reshape(x.shape())?;
    Ok(run_objective(objective, &x, &d, false)?.value)
}

/// Sign-gradient ascent with projection after every step.
///
/// With `track_best`, per-image objectives keep each image's best iterate
/// (the batch objective is separable, so this maximizes it) and the joint
/// contrastive objective keeps the best batch iterate. The initial iterate
/// is always a candidate.
pub fn pgd<S: Scalar, R: Rng + ?Sized>(
    cfg: &AttackConfig,
    objective: &dyn AttackObjective<S>,
    images: &Tensor<S>,
    rng: &mut R,
) -> Result<PerturbationBatch<S>> {
    cfg.validate()?;
    let x = flatten_images(images)?;
    let (n, w) = x.dims2()?;
    let eps = S::lit(cfg.epsilon);
    let step = S::lit(cfg.step_size);
    let init = match cfg.init {
        Init::Zero => Tensor::zeros(x.shape()),
        Init::Uniform => Tensor::from_fn(x.shape(), |_| {
            if cfg.epsilon > 0.0 {
                S::lit(rng.gen_range(-cfg.epsilon..=cfg.epsilon))
            } else {
                S::zero()
            }
        }),
    };
    let mut delta = project_and_clamp(&x, &init, eps)?;
    let at = |t: usize| move |e: Error| match e {
        Error::Numeric(m) => Error::Numeric(format!("pgd iteration {t}: {m}")),
        other => other,
    };

    let mut best_delta = delta.clone();
    let mut best_value = S::neg_infinity();
    let mut best_per: Vec<S> = vec![S::neg_infinity(); n];
    let mut initial = S::zero();
    for t in 0..=cfg.steps {
        let last = t == cfg.steps;
        let ev = run_objective(objective, &x, &delta, !last).map_err(at(t))?;
        if t == 0 {
            initial = ev.value;
        }
        match &ev.per_sample {
            Some(per) if cfg.track_best => {
                for (i, &v) in per.iter().enumerate() {
                    if v > best_per[i] {
                        best_per[i] = v;
                        best_delta.data_mut()[i * w..(i + 1) * w].copy_from_slice(&delta.data()[i * w..(i + 1) * w]);
                    }
                }
                best_value = best_per.iter().copied().sum::<S>() / S::from_usize_lossy(n);
            }
            _ if cfg.track_best => {
                if ev.value > best_value {
                    best_value = ev.value;
                    best_delta = delta.clone();
                }
            }
            _ => {
                best_value = ev.value;
                best_delta = delta.clone();
            }
        }
        if let Some(grad) = ev.grad {
            let stepped = Tensor::from_vec(
                delta.shape().to_vec(),
                delta
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&d, &gr)| d + step * sign(gr))
                    .collect(),
            )?;
            delta = project_and_clamp(&x, &stepped, eps)?;
        }
    }
    Ok(PerturbationBatch {
        delta: best_delta.reshape(images.shape())?,
        epsilon: eps,
        achieved_objective: best_value,
        initial_objective: initial,
    })
}

fn sign<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        S::one()
    } else if x < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

/// Runs one of the built-in objectives against `state`.
pub fn pgd_model<S: Scalar, R: Rng + ?Sized>(
    cfg: &AttackConfig,
    state: &ModelState<S>,
    images: &Tensor<S>,
    target: AttackTarget<'_, S>,
    rng: &mut R,
) -> Result<PerturbationBatch<S>> {
    let objective = ModelObjective::new(state, cfg.objective, target, images)?;
    pgd(cfg, &objective, images, rng)
}

/// Built-in objective value at a given perturbation.
pub fn attack_objective<S: Scalar>(
    kind: AttackKind,
    state: &ModelState<S>,
    images: &Tensor<S>,
    target: AttackTarget<'_, S>,
    delta: &Tensor<S>,
) -> Result<S> {
    let objective = ModelObjective::new(state, kind, target, images)?;
    objective_value(&objective, images, delta)
}
