//! Scalar training and attack objectives, all recorded on a [`Graph`].
//!
//! Every function takes L2-normalized embedding rows, so inner products are
//! cosine similarities.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Floor applied to probabilities before taking logs in the KL terms.
pub const KL_FLOOR: f64 = 1e-12;

fn check_same_shape<S: Scalar>(g: &Graph<S>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (g.value(a).shape(), g.value(b).shape());
    if sa != sb || sa.len() != 2 {
        return Err(Error::Dimension {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    Ok(())
}

/// `X · Tᵀ` for row-embedding matrices.
pub fn similarity<S: Scalar>(g: &mut Graph<S>, x: Var, t: Var) -> Result<Var> {
    let tt = g.transpose(t)?;
    g.matmul(x, tt)
}

/// Symmetric InfoNCE over an `N`-pair batch:
/// `-(1/2N) Σᵢ [log softmax_row(S/τ)ᵢᵢ + log softmax_col(S/τ)ᵢᵢ]`.
pub fn contrastive_loss<S: Scalar>(g: &mut Graph<S>, img: Var, txt: Var, tau: S) -> Result<Var> {
    check_same_shape(g, "contrastive_loss", img, txt)?;
    let n = g.value(img).shape()[0];
    if n < 2 {
        return Err(Error::Contract(format!("contrastive batch needs N >= 2, got {n}")));
    }
    if !(tau > S::zero()) {
        return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
    }
    let s = similarity(g, img, txt)?;
    let logits = g.scale(s, S::one() / tau)?;
    let diag: Vec<usize> = (0..n).collect();
    let img_to_txt = g.log_softmax_rows(logits)?;
    let img_to_txt = g.pick_per_row(img_to_txt, &diag)?;
    let cols = g.transpose(logits)?;
    let txt_to_img = g.log_softmax_rows(cols)?;
    let txt_to_img = g.pick_per_row(txt_to_img, &diag)?;
    let both = g.add(img_to_txt, txt_to_img)?;
    let total = g.sum(both);
    g.scale(total, -S::one() / S::from_usize_lossy(2 * n))
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Contract(format!("{} labels for {n} images", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Contract(format!("label {bad} out of range for K={k}")));
    }
    Ok(())
}

/// Per-image zero-shot cross-entropy `-log softmax(s)[yᵢ]` on raw cosine
/// similarities (no temperature), returned as an `N×1` column.
pub fn zero_shot_ce_per_sample<S: Scalar>(
    g: &mut Graph<S>,
    img: Var,
    class_txt: Var,
    labels: &[usize],
) -> Result<Var> {
    let (n, k) = (g.value(img).shape()[0], g.value(class_txt).shape()[0]);
    check_labels(labels, n, k)?;
    let s = similarity(g, img, class_txt)?;
    let logp = g.log_softmax_rows(s)?;
    let picked = g.pick_per_row(logp, labels)?;
    g.scale(picked, -S::one())
}

/// Zero-shot cross-entropy of one image (`1×d`) against `K` class texts.
pub fn zero_shot_ce<S: Scalar>(g: &mut Graph<S>, img: Var, class_txt: Var, true_idx: usize) -> Result<Var> {
    let per = zero_shot_ce_per_sample(g, img, class_txt, &[true_idx])?;
    Ok(g.mean(per))
}

/// Per-image CW margin `max_{k≠y} s_k − s_y` on cosine similarities, `N×1`.
pub fn cw_margin_per_sample<S: Scalar>(g: &mut Graph<S>, img: Var, class_txt: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = (g.value(img).shape()[0], g.value(class_txt).shape()[0]);
    check_labels(labels, n, k)?;
    if k < 2 {
        return Err(Error::Config("CW margin needs at least two classes".into()));
    }
    let s = similarity(g, img, class_txt)?;
    let other = g.row_max_except(s, labels)?;
    let own = g.pick_per_row(s, labels)?;
    g.sub(other, own)
}

/// `(1/N)[‖X_adv − X_frozen‖_F + ‖X_adv − X_clean‖_F]`.
pub fn feature_reg<S: Scalar>(g: &mut Graph<S>, x_adv: Var, x_adv_frozen: Var, x_clean: Var) -> Result<Var> {
    check_same_shape(g, "feature_reg", x_adv, x_adv_frozen)?;
    check_same_shape(g, "feature_reg", x_adv, x_clean)?;
    let n = g.value(x_adv).shape()[0];
    let d_frozen = g.sub(x_adv, x_adv_frozen)?;
    let d_clean = g.sub(x_adv, x_clean)?;
    let a = g.frobenius_norm(d_frozen);
    let b = g.frobenius_norm(d_clean);
    let total = g.add(a, b)?;
    g.scale(total, S::one() / S::from_usize_lossy(n))
}

/// Row-softmax probability matrices of the adversarial, frozen-adversarial
/// and clean image embeddings against the batch texts.
#[derive(Clone, Copy, Debug)]
pub struct LogitTriple {
    pub adv: Var,
    pub adv_frozen: Var,
    pub clean: Var,
}

/// `softmax_rows(X Tᵀ)` for each of the three embedding sets; no
/// temperature.
pub fn logit_matrices<S: Scalar>(
    g: &mut Graph<S>,
    x_adv: Var,
    x_adv_frozen: Var,
    x_clean: Var,
    txt: Var,
) -> Result<LogitTriple> {
    check_same_shape(g, "logit_matrices", x_adv, x_adv_frozen)?;
    check_same_shape(g, "logit_matrices", x_adv, x_clean)?;
    let mut probs = |x: Var| -> Result<Var> {
        let s = similarity(g, x, txt)?;
        g.softmax_rows(s)
    };
    Ok(LogitTriple {
        adv: probs(x_adv)?,
        adv_frozen: probs(x_adv_frozen)?,
        clean: probs(x_clean)?,
    })
}

fn kl_rows_summed<S: Scalar>(g: &mut Graph<S>, p: Var, q: Var) -> Result<Var> {
    let floor = S::lit(KL_FLOOR);
    let pf = g.clamp_min(p, floor)?;
    let qf = g.clamp_min(q, floor)?;
    let lp = g.log(pf)?;
    let lq = g.log(qf)?;
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(p, diff)?;
    Ok(g.sum(terms))
}

/// `(1/N)[KL(P_adv ‖ P_frozen) + KL(P_adv ‖ P_clean)]`, with each KL summed
/// over rows.
pub fn logit_reg<S: Scalar>(g: &mut Graph<S>, lt: &LogitTriple) -> Result<Var> {
    check_same_shape(g, "logit_reg", lt.adv, lt.adv_frozen)?;
    check_same_shape(g, "logit_reg", lt.adv, lt.clean)?;
    let n = g.value(lt.adv).shape()[0];
    let a = kl_rows_summed(g, lt.adv, lt.adv_frozen)?;
    let b = kl_rows_summed(g, lt.adv, lt.clean)?;
    let total = g.add(a, b)?;
    g.scale(total, S::one() / S::from_usize_lossy(n))
}

/// Which regularizers join the contrastive term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RegFlags {
    pub logit: bool,
    pub feat: bool,
}

impl RegFlags {
    pub const NONE: RegFlags = RegFlags { logit: false, feat: false };
    pub const BOTH: RegFlags = RegFlags { logit: true, feat: true };

    pub fn any(self) -> bool {
        self.logit || self.feat
    }
}

/// Embeddings feeding the regularized objective.
#[derive(Clone, Copy, Debug)]
pub struct FullInputs {
    /// Target-encoder embeddings of the perturbed images.
    pub x_adv: Var,
    /// Frozen-encoder embeddings of the perturbed images.
    pub x_adv_frozen: Var,
    /// Target-encoder embeddings of the clean images.
    pub x_clean: Var,
    pub txt: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ObjectiveParts {
    pub total: Var,
    pub clip: Var,
    pub logit: Option<Var>,
    pub feat: Option<Var>,
}

/// Regularizer terms against an arbitrary text matrix; `txt` may hold
/// batch captions or class prompts.
pub fn regularizers<S: Scalar>(
    g: &mut Graph<S>,
    inputs: &FullInputs,
    flags: RegFlags,
) -> Result<(Option<Var>, Option<Var>)> {
    let logit = if flags.logit {
        let lt = logit_matrices(g, inputs.x_adv, inputs.x_adv_frozen, inputs.x_clean, inputs.txt)?;
        Some(logit_reg(g, &lt)?)
    } else {
        None
    };
    let feat = if flags.feat {
        Some(feature_reg(g, inputs.x_adv, inputs.x_adv_frozen, inputs.x_clean)?)
    } else {
        None
    };
    Ok((logit, feat))
}

/// Contrastive loss on the adversarial batch plus the enabled regularizers,
/// each with unit weight.
pub fn full_objective<S: Scalar>(
    g: &mut Graph<S>,
    inputs: &FullInputs,
    tau: S,
    flags: RegFlags,
) -> Result<ObjectiveParts> {
    let clip = contrastive_loss(g, inputs.x_adv, inputs.txt, tau)?;
    let (logit, feat) = regularizers(g, inputs, flags)?;
    let mut total = clip;
    for term in [logit, feat].into_iter().flatten() {
        total = g.add(total, term)?;
    }
    Ok(ObjectiveParts { total, clip, logit, feat })
}
