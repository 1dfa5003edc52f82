//! Zero-shot clean and robust evaluation.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_model, AttackConfig, AttackKind, AttackTarget};
use crate::data::{stack_images, ClassDataset};
use crate::encoders::{ModelState, TokenSeq};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Images per attack batch during evaluation.
pub const EVAL_BATCH: usize = 100;

/// Argmax of each row of `img_emb · class_embᵀ`; ties go to the lowest
/// class index.
pub fn predict_classes<S: Scalar>(img_emb: &Tensor<S>, class_emb: &Tensor<S>) -> Result<Vec<usize>> {
    if class_emb.shape()[0] == 0 {
        return Err(Error::Config("zero-shot prediction needs at least one class".into()));
    }
    let sims = img_emb.matmul_t(class_emb)?;
    let (n, _) = sims.dims2()?;
    Ok((0..n)
        .map(|i| {
            sims.row(i)
                .iter()
                .enumerate()
                .fold((0, S::neg_infinity()), |(bi, bv), (j, &v)| if v > bv { (j, v) } else { (bi, bv) })
                .0
        })
        .collect())
}

/// Class of a single image (`C×H×W` or `1×C×H×W`).
pub fn zero_shot_predict<S: Scalar>(state: &ModelState<S>, image: &Tensor<S>, class_emb: &Tensor<S>) -> Result<usize> {
    if class_emb.numel() == 0 || class_emb.shape()[0] == 0 {
        return Err(Error::Config("zero-shot prediction needs at least one class".into()));
    }
    let flat = image.reshape(&[1, image.numel()])?;
    let emb = state.encode_images(&flat, false)?;
    Ok(predict_classes(&emb, class_emb)?[0])
}

/// Angle `arccos(⟨a_i, b_i⟩)` between matching unit rows (dot products
/// clipped to `[-1, 1]`), and their mean.
pub fn cosine_deviation<S: Scalar>(clean: &Tensor<S>, adv: &Tensor<S>) -> Result<(Vec<S>, S)> {
    if clean.shape() != adv.shape() {
        return Err(Error::Dimension {
            op: "cosine_deviation",
            lhs: clean.shape().to_vec(),
            rhs: adv.shape().to_vec(),
        });
    }
    let (n, _) = clean.dims2()?;
    let phi: Vec<S> = (0..n)
        .map(|i| {
            let dot: S = clean.row(i).iter().zip(adv.row(i)).map(|(&a, &b)| a * b).sum();
            dot.max(-S::one()).min(S::one()).acos()
        })
        .collect();
    let mean = phi.iter().copied().sum::<S>() / S::from_usize_lossy(n);
    Ok((phi, mean))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub name: String,
    pub eps: f64,
    pub steps: usize,
    pub robust_acc: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhiStats {
    pub mean: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub n: usize,
    pub clean_acc: f64,
    pub attacks: Vec<AttackResult>,
    /// Cosine deviation between clean and adversarial embeddings under the
    /// first attack.
    pub phi: PhiStats,
}

impl EvalReport {
    /// Header for [`EvalReport::csv_row`].
    pub fn csv_header(&self) -> String {
        let mut h = String::from("model,dataset,clean_acc");
        for a in &self.attacks {
            let _ = write!(h, ",{}_eps{}", a.name, a.eps);
        }
        h.push_str(",phi_mean");
        h
    }

    pub fn csv_row(&self, model: &str) -> String {
        let mut r = format!("{model},{},{:.4}", self.dataset, self.clean_acc);
        for a in &self.attacks {
            let _ = write!(r, ",{:.4}", a.robust_acc);
        }
        let _ = write!(r, ",{:.4}", self.phi.mean);
        r
    }
}

/// Display name of an evaluation attack.
pub fn attack_name(kind: AttackKind) -> &'static str {
    match kind {
        AttackKind::Ce => "pgd",
        AttackKind::Cw => "cw",
        AttackKind::Fare => "fare",
        AttackKind::Contrastive => "contrastive",
    }
}

/// Clean embeddings and adversarial embeddings of `ds` under one attack.
pub fn attacked_embeddings<S: Scalar>(
    state: &ModelState<S>,
    ds: &ClassDataset,
    class_emb: &Tensor<S>,
    attack: &AttackConfig,
) -> Result<(Tensor<S>, Tensor<S>)> {
    if attack.objective == AttackKind::Contrastive {
        return Err(Error::Config("evaluation attacks must be label-based (ce or cw)".into()));
    }
    attack.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(attack.seed);
    let (mut clean, mut adv) = (Vec::new(), Vec::new());
    let mut dims = None;
    for start in (0..ds.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(ds.len());
        let images: Tensor<S> = stack_images(&ds.images[start..end])?;
        let labels = &ds.labels[start..end];
        let target = AttackTarget::Labels { labels, class_txt: class_emb };
        let out = pgd_model(attack, state, &images, target, &mut rng)?;
        let perturbed = out.apply(&images)?;
        let c = state.encode_images(&images, false)?;
        let a = state.encode_images(&perturbed, false)?;
        dims.get_or_insert(c.shape()[1]);
        clean.extend_from_slice(c.data());
        adv.extend_from_slice(a.data());
    }
    let d = dims.ok_or_else(|| Error::Config("cannot evaluate an empty dataset".into()))?;
    Ok((
        Tensor::from_vec(vec![ds.len(), d], clean)?,
        Tensor::from_vec(vec![ds.len(), d], adv)?,
    ))
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Clean zero-shot accuracy on `ds`.
pub fn clean_accuracy<S: Scalar>(state: &ModelState<S>, ds: &ClassDataset, class_emb: &Tensor<S>) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Config("cannot evaluate an empty dataset".into()));
    }
    let images: Tensor<S> = stack_images(&ds.images)?;
    let emb = state.encode_images(&images, false)?;
    Ok(accuracy(&predict_classes(&emb, class_emb)?, &ds.labels))
}

/// Accuracy on adversarial images crafted with the true labels.
pub fn robust_accuracy<S: Scalar>(
    state: &ModelState<S>,
    ds: &ClassDataset,
    class_emb: &Tensor<S>,
    attack: &AttackConfig,
) -> Result<f64> {
    let (_, adv) = attacked_embeddings(state, ds, class_emb, attack)?;
    Ok(accuracy(&predict_classes(&adv, class_emb)?, &ds.labels))
}

/// Clean accuracy, robust accuracy per attack, and cosine deviation under
/// the first attack.
pub fn evaluate<S: Scalar>(
    state: &ModelState<S>,
    ds: &ClassDataset,
    class_texts: &[TokenSeq],
    attacks: &[AttackConfig],
    dataset_name: &str,
) -> Result<EvalReport> {
    for a in attacks {
        if a.objective == AttackKind::Contrastive {
            return Err(Error::Config("evaluation attacks must be label-based (ce or cw)".into()));
        }
        a.validate()?;
    }
    if class_texts.len() != ds.num_classes() {
        return Err(Error::Config(format!(
            "{} class texts for {} classes",
            class_texts.len(),
            ds.num_classes()
        )));
    }
    let class_emb = state.encode_texts(class_texts)?;
    let clean_acc = clean_accuracy(state, ds, &class_emb)?;
    let mut results = Vec::new();
    let mut phi = PhiStats::default();
    for (i, a) in attacks.iter().enumerate() {
        let (clean, adv) = attacked_embeddings(state, ds, &class_emb, a)?;
        if i == 0 {
            let (per, mean) = cosine_deviation(&clean, &adv)?;
            phi = PhiStats {
                mean: mean.as_f64(),
                max: per.iter().fold(0.0f64, |m, v| m.max(v.as_f64())),
            };
        }
        results.push(AttackResult {
            name: attack_name(a.objective).to_string(),
            eps: a.epsilon,
            steps: a.steps,
            robust_acc: accuracy(&predict_classes(&adv, &class_emb)?, &ds.labels),
        });
    }
    Ok(EvalReport {
        dataset: dataset_name.to_string(),
        n: ds.len(),
        clean_acc,
        attacks: results,
        phi,
    })
}

/// Tab-separated clean and adversarial embeddings:
/// `index<TAB>label<TAB>clean|adv<TAB>e0<TAB>e1...`.
pub fn export_embeddings<S: Scalar>(
    state: &ModelState<S>,
    ds: &ClassDataset,
    class_texts: &[TokenSeq],
    attack: &AttackConfig,
) -> Result<String> {
    let class_emb = state.encode_texts(class_texts)?;
    let (clean, adv) = attacked_embeddings(state, ds, &class_emb, attack)?;
    let mut out = String::new();
    for (kind, emb) in [("clean", &clean), ("adv", &adv)] {
        for i in 0..ds.len() {
            let _ = write!(out, "{i}\t{}\t{kind}", ds.labels[i]);
            for v in emb.row(i) {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Parses `pgd:eps=0.00392,steps=10;cw:eps=0.00392,steps=10`. Unspecified
/// step sizes default to `eps / 4`; every attack tracks its best iterate.
pub fn parse_attack_list(spec: &str) -> Result<Vec<AttackConfig>> {
    let mut out = Vec::new();
    for item in spec.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let (name, args) = item.split_once(':').unwrap_or((item, ""));
        let kind: AttackKind = name.trim().parse()?;
        let mut cfg = AttackConfig::evaluation(kind, 1.0 / 255.0, 10);
        let mut step_given = false;
        for kv in args.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value in attack list, got {kv:?}")))?;
            let num = |v: &str| -> Result<f64> {
                v.parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad number {v:?} in attack list")))
            };
            match k.trim() {
                "eps" => cfg.epsilon = num(v)?,
                "steps" => {
                    cfg.steps = v
                        .parse()
                        .map_err(|_| Error::Config(format!("bad step count {v:?}")))?
                }
                "step" | "alpha" => {
                    cfg.step_size = num(v)?;
                    step_given = true;
                }
                "seed" => cfg.seed = v.parse().map_err(|_| Error::Config(format!("bad seed {v:?}")))?,
                "init" => {
                    cfg.init = match v {
                        "zero" => crate::attacks::Init::Zero,
                        "uniform" => crate::attacks::Init::Uniform,
                        _ => return Err(Error::Config(format!("unknown init {v:?}"))),
                    }
                }
                other => return Err(Error::Config(format!("unknown attack option {other:?}"))),
            }
        }
        if !step_given {
            cfg.step_size = cfg.epsilon / 4.0;
        }
        if kind == AttackKind::Contrastive {
            return Err(Error::Config("evaluation attacks must be label-based (ce or cw)".into()));
        }
        cfg.validate()?;
        out.push(cfg);
    }
    Ok(out)
}
