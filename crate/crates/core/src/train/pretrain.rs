//! Auxiliary matcher pretraining: identity classification over the training
//! subjects on scaled unit descriptors, verified by EER on held-out
//! identities before the matcher is frozen for adversarial training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use veil_tensor::nn::{log_softmax_rows, Linear};
use veil_tensor::optim::Adam;
use veil_tensor::{no_grad, ops, Tensor};

use super::TrainSet;
use crate::data::mix_seed;
use crate::error::{Error, Result};
use crate::eval::{compute_eer, compute_roc, ScoreSet};
use crate::nets::{images_to_tensor, FaceDescriptor, Matcher, MatcherConfig};

pub struct PretrainedMatcher {
    pub matcher: Matcher<f32>,
    pub holdout_eer: f64,
}

const DESCRIPTOR_LOGIT_SCALE: f32 = 16.0;

/// Mean cross-entropy of row logits against class indices.
pub fn cross_entropy_rows(logits: &Tensor<f32>, classes: &[usize]) -> Tensor<f32> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    assert_eq!(n, classes.len());
    let log_p = log_softmax_rows(logits);
    let mut mask = vec![0.0f32; n * k];
    for (i, &c) in classes.iter().enumerate() {
        mask[i * k + c] = 1.0;
    }
    let mask = Tensor::from_vec(mask, &[n, k]);
    ops::neg(&ops::mean_all(&ops::sum_axes(&ops::mul(&log_p, &mask), &[1])))
}

/// Verification EER over held-out identities: all genuine pairs plus a
/// deterministic sample of impostor pairs.
pub fn verification_eer(
    matcher: &Matcher<f32>,
    images: &[&crate::data::FaceImage],
    subjects: &[usize],
    seed: u64,
) -> Result<f64> {
    assert_eq!(images.len(), subjects.len());
    let descs = batched_descriptors(matcher, images)?;
    let mut scores = ScoreSet::default();
    for i in 0..descs.len() {
        for j in (i + 1)..descs.len() {
            if subjects[i] == subjects[j] {
                scores
                    .genuine
                    .push(crate::nets::match_score(&descs[i], &descs[j])?);
            }
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, &[0x1b]));
    let want = (scores.genuine.len() * 4).clamp(64, 20_000);
    let mut attempts = 0;
    while scores.impostor.len() < want && attempts < want * 20 {
        attempts += 1;
        let i = rng.gen_range(0..descs.len());
        let j = rng.gen_range(0..descs.len());
        if subjects[i] != subjects[j] {
            scores
                .impostor
                .push(crate::nets::match_score(&descs[i], &descs[j])?);
        }
    }
    compute_eer(&compute_roc(&scores)?)
}

pub(crate) fn batched_descriptors(
    matcher: &Matcher<f32>,
    images: &[&crate::data::FaceImage],
) -> Result<Vec<FaceDescriptor>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let x = images_to_tensor::<f32>(chunk);
        let d = no_grad(|| matcher.descriptor(&x))?;
        out.extend(FaceDescriptor::from_rows(&d)?);
    }
    Ok(out)
}

/// Train the auxiliary matcher on subject identities and verify it reaches
/// the EER bar on held-out identities. With `allow_below_bar` the matcher is
/// returned even if the bar is missed (explicit override).
pub fn pretrain_matcher(
    cfg: MatcherConfig,
    train_set: &TrainSet,
    iterations: u64,
    seed: u64,
    allow_below_bar: bool,
) -> Result<PretrainedMatcher> {
    cfg.validate()?;
    if train_set.n_subjects < 4 {
        return Err(Error::domain("matcher pretraining needs at least 4 subjects"));
    }
    if train_set.resolution() != cfg.resolution {
        return Err(Error::domain("matcher/dataset resolution mismatch"));
    }

    // identity-disjoint holdout for the EER bar
    let holdout_subjects = (train_set.n_subjects / 5).max(2);
    let holdout_start = train_set.n_subjects - holdout_subjects;
    let (mut fit_idx, mut holdout_idx) = (Vec::new(), Vec::new());
    for (i, &s) in train_set.subject_index.iter().enumerate() {
        if s >= holdout_start {
            holdout_idx.push(i);
        } else {
            fit_idx.push(i);
        }
    }

    let matcher = Matcher::new(cfg, mix_seed(seed, &[0x3a]))?;
    let head = Linear::<f32>::new(
        cfg.descriptor_dim,
        holdout_start,
        &mut ChaCha12Rng::seed_from_u64(mix_seed(seed, &[0x3b])),
    );
    let mut params = matcher.params();
    params.push(head.weight.clone());
    params.push(head.bias.clone());
    let mut adam = Adam::new(3e-4, 0.9, 0.999);

    let batch = 32usize;
    for it in 0..iterations {
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, &[0x3c, it]));
        let idx: Vec<usize> = (0..batch)
            .map(|_| fit_idx[rng.gen_range(0..fit_idx.len())])
            .collect();
        let imgs: Vec<&crate::data::FaceImage> =
            idx.iter().map(|&i| &train_set.images[i]).collect();
        let classes: Vec<usize> = idx.iter().map(|&i| train_set.subject_index[i]).collect();
        let x = images_to_tensor::<f32>(&imgs);
        let desc = matcher.descriptor(&x)?;
        let logits = head.forward(&ops::mul_scalar(&desc, DESCRIPTOR_LOGIT_SCALE));
        let loss = cross_entropy_rows(&logits, &classes);
        if !loss.item().is_finite() {
            return Err(Error::NonFinite { term: "matcher_pretrain_ce".into(), iteration: it });
        }
        let grads = loss.backward(false);
        adam.step(&params, &grads);
    }

    let holdout_imgs: Vec<&crate::data::FaceImage> =
        holdout_idx.iter().map(|&i| &train_set.images[i]).collect();
    let holdout_subj: Vec<usize> = holdout_idx
        .iter()
        .map(|&i| train_set.subject_index[i])
        .collect();
    let eer = verification_eer(&matcher, &holdout_imgs, &holdout_subj, seed)?;
    if eer > 0.10 && !allow_below_bar {
        return Err(Error::CompetenceBar {
            what: "auxiliary matcher holdout EER".into(),
            value: eer,
            required: "<= 0.10".into(),
        });
    }
    Ok(PretrainedMatcher { matcher, holdout_eer: eer })
}

/// Persist / restore a pretrained matcher.
pub fn save_matcher(m: &Matcher<f32>, path: &std::path::Path, holdout_eer: f64) -> Result<()> {
    let mut b = crate::nets::CheckpointBuilder::new("matcher")
        .config("matcher", m.cfg)
        .meta("holdout_eer", holdout_eer);
    b.add_named_params("matcher", &m.named_params());
    b.write(path)
}

pub fn load_matcher(path: &std::path::Path) -> Result<Matcher<f32>> {
    let ck = crate::nets::Checkpoint::load(path)?;
    let cfg: MatcherConfig = ck.config("matcher")?;
    let m = Matcher::new(cfg, 0)?;
    ck.load_named_params("matcher", &m.named_params())?;
    Ok(m)
}
