//! Loss terms for adversarial training, as pure differentiable functions of
//! network outputs.
//!
//! Two adversarial formulations ship: the logarithmic form (probabilities
//! through a sigmoid on the source score) and the Wasserstein form (raw
//! scores, optional gradient penalty on convex combinations of real and
//! synthesized inputs). Probabilities are clamped at 1e-7 before any log;
//! clamping events are counted and surfaced to the caller.

use veil_tensor::{ops, Scalar, Tensor};

use crate::data::AttributeVector;
use crate::error::{Error, Result};
use crate::nets::{attr_class_indices, ATTR_LOGITS};

pub const PROB_CLAMP: f64 = 1e-7;

/// The lambda coefficients of the two total losses.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_d_attr: f64,
    pub lambda_g_attr: f64,
    pub lambda_m: f64,
    pub lambda_rec: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_d_attr: 1.0, lambda_g_attr: 4.0, lambda_m: 4.0, lambda_rec: 4.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_d_attr, self.lambda_g_attr, self.lambda_m, self.lambda_rec];
        if all.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::config("loss weights must be nonnegative"));
        }
        Ok(())
    }

    /// The baseline-GAN ablation drops the matching term.
    pub fn is_baseline_gan(&self) -> bool {
        self.lambda_m == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialKind {
    LogLoss,
    Wasserstein,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdversarialVariant {
    pub kind: AdversarialKind,
    /// Only used by the Wasserstein form.
    pub gradient_penalty_coeff: f64,
    /// Log-loss generator objective: false = non-saturating -log(p_fake)
    /// (training default), true = the literal saturating log(1 - p_fake).
    pub saturating_generator: bool,
}

impl AdversarialVariant {
    pub fn log_loss() -> Self {
        AdversarialVariant {
            kind: AdversarialKind::LogLoss,
            gradient_penalty_coeff: 0.0,
            saturating_generator: false,
        }
    }

    pub fn log_loss_saturating() -> Self {
        AdversarialVariant { saturating_generator: true, ..Self::log_loss() }
    }

    pub fn wasserstein(gradient_penalty_coeff: f64) -> Self {
        AdversarialVariant {
            kind: AdversarialKind::Wasserstein,
            gradient_penalty_coeff,
            saturating_generator: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gradient_penalty_coeff >= 0.0) {
            return Err(Error::config("gradient_penalty_coeff must be >= 0"));
        }
        Ok(())
    }
}

/// Clamp probabilities into [1e-7, 1 - 1e-7], counting how many values were
/// outside the open interval.
fn clamp_probs<E: Scalar>(p: &Tensor<E>) -> (Tensor<E>, usize) {
    let lo = E::from_f64(PROB_CLAMP);
    let hi = E::from_f64(1.0 - PROB_CLAMP);
    let clamped_events = p.data().iter().filter(|v| **v < lo || **v > hi).count();
    (ops::clamp(p, lo, hi), clamped_events)
}

/// Source-discrimination loss for the discriminator.
///
/// Log form: mean(-log p_real) + mean(-log(1 - p_fake)), inputs are
/// probabilities. Wasserstein form: mean(fake) - mean(real) on raw scores,
/// plus `coeff * penalty` when a gradient penalty term is supplied.
pub fn loss_d_src<E: Scalar>(
    scores_real: &Tensor<E>,
    scores_fake: &Tensor<E>,
    variant: &AdversarialVariant,
    penalty: Option<&Tensor<E>>,
) -> (Tensor<E>, usize) {
    assert!(!scores_real.is_empty() && !scores_fake.is_empty(), "empty score batch");
    match variant.kind {
        AdversarialKind::LogLoss => {
            let (p_real, c1) = clamp_probs(scores_real);
            let (p_fake, c2) = clamp_probs(scores_fake);
            let real_term = ops::neg(&ops::mean_all(&ops::ln(&p_real)));
            let fake_term = ops::neg(&ops::mean_all(&ops::ln(&ops::add_scalar(
                &ops::neg(&p_fake),
                E::one(),
            ))));
            (ops::add(&real_term, &fake_term), c1 + c2)
        }
        AdversarialKind::Wasserstein => {
            let mut loss = ops::sub(&ops::mean_all(scores_fake), &ops::mean_all(scores_real));
            if let Some(p) = penalty {
                loss = ops::add(
                    &loss,
                    &ops::mul_scalar(p, E::from_f64(variant.gradient_penalty_coeff)),
                );
            }
            (loss, 0)
        }
    }
}

/// Source-discrimination loss for the generator.
pub fn loss_g_src<E: Scalar>(
    scores_fake: &Tensor<E>,
    variant: &AdversarialVariant,
) -> (Tensor<E>, usize) {
    assert!(!scores_fake.is_empty(), "empty score batch");
    match variant.kind {
        AdversarialKind::LogLoss => {
            let (p_fake, clamps) = clamp_probs(scores_fake);
            if variant.saturating_generator {
                // literal form: mean(log(1 - p_fake))
                (
                    ops::mean_all(&ops::ln(&ops::add_scalar(&ops::neg(&p_fake), E::one()))),
                    clamps,
                )
            } else {
                (ops::neg(&ops::mean_all(&ops::ln(&p_fake))), clamps)
            }
        }
        AdversarialKind::Wasserstein => (ops::neg(&ops::mean_all(scores_fake)), 0),
    }
}

/// Attribute-classification loss: sum over the three probability groups of
/// the negative log-probability of the labeled class, averaged over the
/// batch.
pub fn loss_attr<E: Scalar>(probs: &Tensor<E>, labels: &[AttributeVector]) -> (Tensor<E>, usize) {
    let n = labels.len();
    assert_eq!(probs.shape(), &[n, ATTR_LOGITS], "probability group shape");
    let mut mask = vec![E::zero(); n * ATTR_LOGITS];
    for (i, v) in labels.iter().enumerate() {
        for idx in attr_class_indices(v) {
            mask[i * ATTR_LOGITS + idx] = E::one();
        }
    }
    let mask = Tensor::from_vec(mask, probs.shape());
    let (clamped, clamps) = clamp_probs(probs);
    let picked = ops::mul(&ops::neg(&ops::ln(&clamped)), &mask);
    // sum the three selected group terms per sample, then average
    let per_sample = ops::sum_axes(&picked, &[1]);
    (ops::mean_all(&per_sample), clamps)
}

/// Matching loss: squared Euclidean distance between unit-norm descriptors,
/// averaged over the batch. Range [0, 4].
pub fn loss_g_match<E: Scalar>(desc_orig: &Tensor<E>, desc_pert: &Tensor<E>) -> Result<Tensor<E>> {
    if desc_orig.shape() != desc_pert.shape() {
        return Err(Error::domain(format!(
            "descriptor shapes {:?} vs {:?}",
            desc_orig.shape(),
            desc_pert.shape()
        )));
    }
    for t in [desc_orig, desc_pert] {
        let d = t.shape()[1];
        let data = t.data();
        for row in data.chunks(d) {
            let norm: f64 = row.iter().map(|v| v.to_f64_().powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-4 {
                return Err(Error::domain(format!(
                    "matching loss requires unit-norm descriptors (got {norm})"
                )));
            }
        }
    }
    let diff = ops::sub(desc_orig, desc_pert);
    let per_sample = ops::sum_axes(&ops::mul(&diff, &diff), &[1]);
    Ok(ops::mean_all(&per_sample))
}

/// Cycle-reconstruction loss: mean absolute pixelwise difference.
pub fn loss_g_rec<E: Scalar>(x: &Tensor<E>, x_cycled: &Tensor<E>) -> Result<Tensor<E>> {
    if x.shape() != x_cycled.shape() {
        return Err(Error::domain(format!(
            "reconstruction shapes {:?} vs {:?}",
            x.shape(),
            x_cycled.shape()
        )));
    }
    Ok(ops::mean_all(&ops::abs(&ops::sub(x, x_cycled))))
}

/// Per-term discriminator losses feeding the total.
pub struct DLossParts<E: Scalar> {
    pub d_src: Tensor<E>,
    pub d_attr: Tensor<E>,
}

/// Per-term generator losses feeding the total.
pub struct GLossParts<E: Scalar> {
    pub g_src: Tensor<E>,
    pub g_attr: Tensor<E>,
    pub g_match: Option<Tensor<E>>,
    pub g_rec: Tensor<E>,
}

fn check_finite<E: Scalar>(name: &str, t: &Tensor<E>) -> Result<()> {
    if !t.item().is_finite() {
        return Err(Error::NonFinite { term: name.to_string(), iteration: 0 });
    }
    Ok(())
}

/// Total discriminator loss: `L_D,src + lambda_d_attr * L_D,attr`.
pub fn total_d_loss<E: Scalar>(parts: &DLossParts<E>, w: &LossWeights) -> Result<Tensor<E>> {
    check_finite("l_d_src", &parts.d_src)?;
    check_finite("l_d_attr", &parts.d_attr)?;
    let mut total = parts.d_src.clone();
    if w.lambda_d_attr != 0.0 {
        total = ops::add(
            &total,
            &ops::mul_scalar(&parts.d_attr, E::from_f64(w.lambda_d_attr)),
        );
    }
    Ok(total)
}

/// Total generator loss:
/// `L_G,src + lambda_g_attr * L_G,attr + lambda_m * L_G,m + lambda_rec * L_G,rec`.
/// Zero-weight terms are skipped entirely, so the total is structurally
/// independent of them (the baseline-GAN ablation sets lambda_m = 0).
pub fn total_g_loss<E: Scalar>(parts: &GLossParts<E>, w: &LossWeights) -> Result<Tensor<E>> {
    check_finite("l_g_src", &parts.g_src)?;
    check_finite("l_g_attr", &parts.g_attr)?;
    check_finite("l_g_rec", &parts.g_rec)?;
    let mut total = parts.g_src.clone();
    if w.lambda_g_attr != 0.0 {
        total = ops::add(&total, &ops::mul_scalar(&parts.g_attr, E::from_f64(w.lambda_g_attr)));
    }
    if w.lambda_m != 0.0 {
        let g_match = parts
            .g_match
            .as_ref()
            .ok_or_else(|| Error::config("lambda_m > 0 requires a matching-loss term"))?;
        check_finite("l_g_m", g_match)?;
        total = ops::add(&total, &ops::mul_scalar(g_match, E::from_f64(w.lambda_m)));
    }
    if w.lambda_rec != 0.0 {
        total = ops::add(&total, &ops::mul_scalar(&parts.g_rec, E::from_f64(w.lambda_rec)));
    }
    check_finite("total_g", &total)?;
    Ok(total)
}

/// Gradient-penalty term `mean((||grad_input score|| - 1)^2)` evaluated at a
/// random convex combination of the real and synthesized inputs (image and
/// label planes interpolated together with per-sample epsilon).
///
/// `d_score` maps the interpolated (image, labels) pair to `[N, 1]` scores.
pub fn gradient_penalty<E: Scalar>(
    real_image: &Tensor<E>,
    real_labels: &Tensor<E>,
    fake_image: &Tensor<E>,
    fake_labels: &Tensor<E>,
    eps_per_sample: &[f64],
    d_score: impl Fn(&Tensor<E>, &Tensor<E>) -> Tensor<E>,
) -> Tensor<E> {
    let n = real_image.shape()[0];
    assert_eq!(eps_per_sample.len(), n);
    let eps = Tensor::from_vec(
        eps_per_sample.iter().map(|&e| E::from_f64(e)).collect(),
        &[n, 1, 1, 1],
    );
    let one_minus = Tensor::from_vec(
        eps_per_sample.iter().map(|&e| E::from_f64(1.0 - e)).collect(),
        &[n, 1, 1, 1],
    );
    let mix = |a: &Tensor<E>, b: &Tensor<E>| {
        ops::add(
            &ops::mul(a, &ops::broadcast_to(&eps, a.shape())),
            &ops::mul(b, &ops::broadcast_to(&one_minus, b.shape())),
        )
    };
    let interp_img = mix(real_image, fake_image).detach().requires_grad();
    let interp_lab = mix(real_labels, fake_labels).detach().requires_grad();

    let score = d_score(&interp_img, &interp_lab);
    assert_eq!(score.shape(), &[n, 1]);
    let grads = ops::sum_all(&score).backward(true);

    // norm over the full input: image channels plus label planes
    let gi = grads.grad(&interp_img).expect("gradient w.r.t. image").clone();
    let gl = grads.grad(&interp_lab).expect("gradient w.r.t. labels").clone();
    let sq = ops::add(
        &ops::sum_axes(&ops::mul(&gi, &gi), &[1, 2, 3]),
        &ops::sum_axes(&ops::mul(&gl, &gl), &[1, 2, 3]),
    );
    let norm = ops::sqrt(&ops::reshape(&sq, &[n, 1]));
    ops::mean_all(&ops::powi(&ops::add_scalar(&norm, -E::one()), 2))
}
