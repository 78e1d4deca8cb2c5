//! Gradient verification: analytic gradients of every loss term against
//! central finite differences on tiny double-precision networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use veil_tensor::{no_grad, ops, Tensor};

use crate::data::{mix_seed, AttributeVector};
use crate::loss::{
    gradient_penalty, loss_attr, loss_d_src, loss_g_match, loss_g_rec, loss_g_src,
    AdversarialKind, AdversarialVariant,
};
use crate::nets::{
    labels_to_tensor, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Matcher,
    MatcherConfig,
};

pub const FD_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const MAX_SAMPLED_PARAMS: usize = 600;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTermKind {
    DSrc,
    DAttr,
    GSrc,
    GAttr,
    GMatch,
    GRec,
}

impl LossTermKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossTermKind::DSrc => "l_d_src",
            LossTermKind::DAttr => "l_d_attr",
            LossTermKind::GSrc => "l_g_src",
            LossTermKind::GAttr => "l_g_attr",
            LossTermKind::GMatch => "l_g_m",
            LossTermKind::GRec => "l_g_rec",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "l_d_src" => LossTermKind::DSrc,
            "l_d_attr" => LossTermKind::DAttr,
            "l_g_src" => LossTermKind::GSrc,
            "l_g_attr" => LossTermKind::GAttr,
            "l_g_m" => LossTermKind::GMatch,
            "l_g_rec" => LossTermKind::GRec,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckResult {
    pub term: LossTermKind,
    pub variant_label: String,
    pub max_rel_err: f64,
    pub n_checked: usize,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOLERANCE
    }
}

struct TinyRig {
    generator: Generator<f64>,
    discriminator: Discriminator<f64>,
    matcher: Matcher<f64>,
    x: Tensor<f64>,
    v0: Vec<AttributeVector>,
    vt: Vec<AttributeVector>,
    v0_planes: Tensor<f64>,
    vt_planes: Tensor<f64>,
    fake_const: Tensor<f64>,
    desc_orig: Tensor<f64>,
    eps: Vec<f64>,
}

impl TinyRig {
    fn new(seed: u64) -> Self {
        let res = 16;
        let generator = Generator::new(
            GeneratorConfig { resolution: res, base_width: 4, n_residual_blocks: 1, n_downsamples: 1 },
            mix_seed(seed, &[1]),
        )
        .unwrap();
        let discriminator = Discriminator::new(
            DiscriminatorConfig { resolution: res, trunk_depth: 2, leaky_slope: 0.01, base_width: 4 },
            mix_seed(seed, &[2]),
        )
        .unwrap();
        let matcher = Matcher::new(
            MatcherConfig { resolution: res, descriptor_dim: 6, base_width: 4 },
            mix_seed(seed, &[3]),
        )
        .unwrap()
        .frozen_copy();

        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, &[4]));
        let n = 2usize;
        let x = Tensor::from_vec(
            (0..n * 3 * res * res).map(|_| rng.gen_range(-0.9..0.9)).collect(),
            &[n, 3, res, res],
        );
        let v0 = vec![
            AttributeVector::new(0, 1, 0).unwrap(),
            AttributeVector::new(1, 0, 2).unwrap(),
        ];
        let vt = vec![
            AttributeVector::new(1, 1, 1).unwrap(),
            AttributeVector::new(0, 0, 0).unwrap(),
        ];
        let v0_planes = labels_to_tensor(&v0, res, res);
        let vt_planes = labels_to_tensor(&vt, res, res);
        let fake_const = no_grad(|| generator.forward(&x, &vt_planes)).detach();
        let desc_orig = no_grad(|| matcher.descriptor(&x)).unwrap().detach();
        let eps: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..0.9)).collect();
        TinyRig {
            generator,
            discriminator,
            matcher,
            x,
            v0,
            vt,
            v0_planes,
            vt_planes,
            fake_const,
            desc_orig,
            eps,
        }
    }

    fn loss(&self, term: LossTermKind, variant: &AdversarialVariant) -> Tensor<f64> {
        let to_prob = |s: &Tensor<f64>| match variant.kind {
            AdversarialKind::LogLoss => ops::sigmoid(s),
            AdversarialKind::Wasserstein => s.clone(),
        };
        match term {
            LossTermKind::DSrc => {
                let (src_real, _) = self.discriminator.forward(&self.x, &self.v0_planes);
                let (src_fake, _) = self.discriminator.forward(&self.fake_const, &self.vt_planes);
                let penalty = (variant.kind == AdversarialKind::Wasserstein
                    && variant.gradient_penalty_coeff > 0.0)
                    .then(|| {
                        gradient_penalty(
                            &self.x,
                            &self.v0_planes,
                            &self.fake_const,
                            &self.vt_planes,
                            &self.eps,
                            |img, lab| self.discriminator.forward(img, lab).0,
                        )
                    });
                loss_d_src(&to_prob(&src_real), &to_prob(&src_fake), variant, penalty.as_ref()).0
            }
            LossTermKind::DAttr => {
                let (_, probs) = self.discriminator.forward(&self.x, &self.v0_planes);
                loss_attr(&probs, &self.v0).0
            }
            LossTermKind::GSrc => {
                let fake = self.generator.forward(&self.x, &self.vt_planes);
                let (src, _) = self.discriminator.forward(&fake, &self.vt_planes);
                loss_g_src(&to_prob(&src), variant).0
            }
            LossTermKind::GAttr => {
                let fake = self.generator.forward(&self.x, &self.vt_planes);
                let (_, probs) = self.discriminator.forward(&fake, &self.vt_planes);
                loss_attr(&probs, &self.vt).0
            }
            LossTermKind::GMatch => {
                let fake = self.generator.forward(&self.x, &self.vt_planes);
                let desc = self.matcher.descriptor(&fake).expect("descriptor");
                loss_g_match(&self.desc_orig, &desc).expect("match loss")
            }
            LossTermKind::GRec => {
                let fake = self.generator.forward(&self.x, &self.vt_planes);
                let cycled = self.generator.forward(&fake, &self.v0_planes);
                loss_g_rec(&self.x, &cycled).expect("rec loss")
            }
        }
    }

    fn checked_params(&self, term: LossTermKind) -> Vec<Tensor<f64>> {
        match term {
            LossTermKind::DSrc | LossTermKind::DAttr => self.discriminator.params(),
            _ => self.generator.params(),
        }
    }
}

/// Compare analytic gradients of one loss term against central finite
/// differences with step 1e-5, returning the worst relative error over a
/// deterministic sample of parameters.
///
/// Relative error uses `|a - f| / max(|a|, |f|, 1e-6)`.
pub fn gradient_check(
    term: LossTermKind,
    variant: &AdversarialVariant,
    seed: u64,
    inject_bug: bool,
) -> GradCheckResult {
    let rig = TinyRig::new(seed);
    let params = rig.checked_params(term);

    let loss = rig.loss(term, variant);
    let grads = loss.backward(false);
    let bug_factor = if inject_bug { 1.01 } else { 1.0 };
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            grads
                .grad(p)
                .map(|g| g.data().iter().map(|v| v * bug_factor).collect())
                .unwrap_or_else(|| vec![0.0; p.len()])
        })
        .collect();

    let total: usize = params.iter().map(|p| p.len()).sum();
    let stride = total.div_ceil(MAX_SAMPLED_PARAMS).max(1);

    let mut max_rel = 0.0f64;
    let mut n_checked = 0usize;
    let mut flat_index = 0usize;
    for (pi, p) in params.iter().enumerate() {
        let base = p.to_vec();
        for i in 0..base.len() {
            let global = flat_index + i;
            if global % stride != 0 {
                continue;
            }
            let mut bumped = base.clone();
            bumped[i] += FD_STEP;
            p.set_data(&bumped);
            let up = rig.loss(term, variant).item();
            bumped[i] = base[i] - FD_STEP;
            p.set_data(&bumped);
            let down = rig.loss(term, variant).item();
            p.set_data(&base);
            let fd = (up - down) / (2.0 * FD_STEP);
            let a = analytic[pi][i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
            n_checked += 1;
        }
        flat_index += base.len();
    }

    GradCheckResult {
        term,
        variant_label: variant_label(term, variant),
        max_rel_err: max_rel,
        n_checked,
    }
}

fn variant_label(term: LossTermKind, variant: &AdversarialVariant) -> String {
    match (term, variant.kind) {
        (LossTermKind::DSrc | LossTermKind::GSrc, AdversarialKind::LogLoss) => {
            if variant.saturating_generator && term == LossTermKind::GSrc {
                "log_loss (saturating)".to_string()
            } else {
                "log_loss".to_string()
            }
        }
        (LossTermKind::DSrc, AdversarialKind::Wasserstein) => format!(
            "wasserstein (gp={})",
            variant.gradient_penalty_coeff
        ),
        (LossTermKind::GSrc, AdversarialKind::Wasserstein) => "wasserstein".to_string(),
        _ => "-".to_string(),
    }
}

/// The full verification table: the two adversarial terms under both
/// variants (plus the saturating generator form), and the four
/// variant-independent terms.
pub fn gradient_check_all(seed: u64, inject_bug: Option<LossTermKind>) -> Vec<GradCheckResult> {
    let log = AdversarialVariant::log_loss();
    let log_sat = AdversarialVariant::log_loss_saturating();
    let wgan = AdversarialVariant::wasserstein(10.0);
    let cases: Vec<(LossTermKind, AdversarialVariant)> = vec![
        (LossTermKind::DSrc, log),
        (LossTermKind::DSrc, wgan),
        (LossTermKind::GSrc, log),
        (LossTermKind::GSrc, log_sat),
        (LossTermKind::GSrc, wgan),
        (LossTermKind::DAttr, log),
        (LossTermKind::GAttr, log),
        (LossTermKind::GMatch, log),
        (LossTermKind::GRec, log),
    ];
    cases
        .into_iter()
        .map(|(term, variant)| {
            gradient_check(term, &variant, seed, inject_bug == Some(term))
        })
        .collect()
}
