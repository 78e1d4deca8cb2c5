//! Unseen evaluators: attribute classifiers and a face matcher that never
//! participate in adversarial training. Their architectures (3x3 convs with
//! average pooling; 5x5 strided matcher) and seed namespace are deliberately
//! distinct from the auxiliary networks (4x4 strided convs).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use veil_tensor::nn::{global_avg_pool, l2_normalize_rows, row_norms, Conv2d, Linear};
use veil_tensor::optim::Adam;
use veil_tensor::{no_grad, ops, Tensor};

use super::{compute_eer, compute_roc, ScoreSet};
use crate::data::{mix_seed, FaceImage};
use crate::error::{Error, Result};
use crate::nets::{images_to_tensor, Checkpoint, CheckpointBuilder, FaceDescriptor};
use crate::train::TrainSet;

/// Which attribute a classifier predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeTask {
    Gender,
    Race,
    /// Age head: 3 group logits plus a years regression output.
    Age,
}

impl AttributeTask {
    fn n_outputs(&self) -> usize {
        match self {
            AttributeTask::Gender | AttributeTask::Race => 2,
            AttributeTask::Age => 4,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttributeTask::Gender => "gender",
            AttributeTask::Race => "race",
            AttributeTask::Age => "age",
        }
    }
}

/// Small CNN: 3x3 convs with 2x2 average pooling between stages.
pub struct AttributeClassifier {
    pub task: AttributeTask,
    pub resolution: usize,
    convs: Vec<Conv2d<f32>>,
    head: Linear<f32>,
}

const CLASSIFIER_WIDTHS: [usize; 3] = [12, 24, 48];

impl AttributeClassifier {
    pub fn new(task: AttributeTask, resolution: usize, seed: u64) -> Result<Self> {
        if resolution % 8 != 0 {
            return Err(Error::config("classifier resolution must be divisible by 8"));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut c_in = 3;
        for &w in &CLASSIFIER_WIDTHS {
            convs.push(Conv2d::new(c_in, w, 3, 1, 1, true, &mut rng));
            c_in = w;
        }
        let head = Linear::new(c_in, task.n_outputs(), &mut rng);
        Ok(AttributeClassifier { task, resolution, convs, head })
    }

    fn features(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let r = self.resolution;
        assert_eq!(&x.shape()[1..], &[3, r, r], "classifier input shape");
        let mut h = x.clone();
        for conv in &self.convs {
            h = ops::avg_pool2(&ops::relu(&conv.forward(&h)));
        }
        global_avg_pool(&h)
    }

    /// Raw head outputs: class logits (age: logits + years/100 column).
    pub fn forward(&self, x: &Tensor<f32>) -> Tensor<f32> {
        self.head.forward(&self.features(x))
    }

    /// Class probabilities (softmax over the class logits only).
    pub fn class_probs(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let out = self.forward(x);
        let n = out.shape()[0];
        let k = match self.task {
            AttributeTask::Age => 3,
            _ => 2,
        };
        let logits = ops::reshape(
            &ops::slice_c(&ops::reshape(&out, &[n, out.shape()[1], 1, 1]), 0, k),
            &[n, k],
        );
        veil_tensor::nn::softmax_rows(&logits)
    }

    /// Predicted years for the age task.
    pub fn predict_years(&self, x: &Tensor<f32>) -> Result<Vec<f64>> {
        if self.task != AttributeTask::Age {
            return Err(Error::domain("years prediction only exists for the age task"));
        }
        let out = no_grad(|| self.forward(x));
        let n = out.shape()[0];
        let data = out.data();
        Ok((0..n).map(|i| (data[i * 4 + 3] * 100.0) as f64).collect())
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            c.named_params(&format!("conv{i}"), &mut out);
        }
        self.head.named_params("head", &mut out);
        out
    }

    pub fn params(&self) -> Vec<Tensor<f32>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }
}

/// Unseen matcher: 5x5 strided convs, leaky activations, 96-d descriptors.
pub struct UnseenMatcher {
    pub resolution: usize,
    pub descriptor_dim: usize,
    convs: Vec<Conv2d<f32>>,
    proj: Linear<f32>,
}

const UNSEEN_MATCHER_WIDTHS: [usize; 4] = [12, 24, 48, 96];

impl UnseenMatcher {
    pub fn new(resolution: usize, descriptor_dim: usize, seed: u64) -> Result<Self> {
        if resolution % 16 != 0 {
            return Err(Error::config("matcher resolution must be divisible by 16"));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut c_in = 3;
        for &w in &UNSEEN_MATCHER_WIDTHS {
            convs.push(Conv2d::new(c_in, w, 5, 2, 2, true, &mut rng));
            c_in = w;
        }
        let proj = Linear::new(c_in, descriptor_dim, &mut rng);
        Ok(UnseenMatcher { resolution, descriptor_dim, convs, proj })
    }

    fn embed(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let r = self.resolution;
        assert_eq!(&x.shape()[1..], &[3, r, r], "matcher input shape");
        let mut h = x.clone();
        for conv in &self.convs {
            h = ops::leaky_relu(&conv.forward(&h), 0.1);
        }
        self.proj.forward(&global_avg_pool(&h))
    }

    pub fn descriptor(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let raw = self.embed(x);
        let min_norm = row_norms(&raw)
            .data()
            .iter()
            .fold(f64::INFINITY, |m, v| m.min(*v as f64));
        if min_norm < 1e-12 {
            return Err(Error::Numerical("zero-norm unseen descriptor".into()));
        }
        Ok(l2_normalize_rows(&raw))
    }

    pub fn descriptors(&self, images: &[&FaceImage]) -> Result<Vec<FaceDescriptor>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let x = images_to_tensor::<f32>(chunk);
            let d = no_grad(|| self.descriptor(&x))?;
            out.extend(FaceDescriptor::from_rows(&d)?);
        }
        Ok(out)
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            c.named_params(&format!("conv{i}"), &mut out);
        }
        self.proj.named_params("proj", &mut out);
        out
    }

    pub fn params(&self) -> Vec<Tensor<f32>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }
}

pub struct UnseenEvaluators {
    pub gender: AttributeClassifier,
    pub race: AttributeClassifier,
    pub age: AttributeClassifier,
    pub matcher: UnseenMatcher,
    /// Held-out competence measurements on original images.
    pub gender_acc: f64,
    pub race_acc: f64,
    pub age_group_acc: f64,
    pub matcher_eer: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct EvaluatorBudget {
    pub classifier_iterations: u64,
    pub matcher_iterations: u64,
    pub batch_size: usize,
}

impl Default for EvaluatorBudget {
    fn default() -> Self {
        EvaluatorBudget {
            classifier_iterations: 400,
            matcher_iterations: 700,
            batch_size: 32,
        }
    }
}

fn classifier_loss(
    clf: &AttributeClassifier,
    x: &Tensor<f32>,
    classes: &[usize],
    years: Option<&[f64]>,
) -> Tensor<f32> {
    let out = clf.forward(x);
    let n = out.shape()[0];
    let k = out.shape()[1];
    let n_classes = match clf.task {
        AttributeTask::Age => 3,
        _ => 2,
    };
    let logits = ops::reshape(
        &ops::slice_c(&ops::reshape(&out, &[n, k, 1, 1]), 0, n_classes),
        &[n, n_classes],
    );
    let ce = crate::train::cross_entropy_rows(&logits, classes);
    match years {
        Some(ys) => {
            let pred = ops::reshape(
                &ops::slice_c(&ops::reshape(&out, &[n, k, 1, 1]), 3, 1),
                &[n, 1],
            );
            let target = Tensor::from_vec(ys.iter().map(|y| (*y / 100.0) as f32).collect(), &[n, 1]);
            let diff = ops::sub(&pred, &target);
            let mse = ops::mean_all(&ops::mul(&diff, &diff));
            ops::add(&ce, &ops::mul_scalar(&mse, 10.0))
        }
        None => ce,
    }
}

fn train_classifier(
    clf: &AttributeClassifier,
    set: &TrainSet,
    fit_idx: &[usize],
    budget: &EvaluatorBudget,
    seed: u64,
) -> Result<()> {
    let mut adam = Adam::new(1e-3, 0.9, 0.999);
    let params = clf.params();
    for it in 0..budget.classifier_iterations {
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, &[0xc1a, it]));
        let idx: Vec<usize> = (0..budget.batch_size)
            .map(|_| fit_idx[rng.gen_range(0..fit_idx.len())])
            .collect();
        let imgs: Vec<&FaceImage> = idx.iter().map(|&i| &set.images[i]).collect();
        let x = images_to_tensor::<f32>(&imgs);
        let classes: Vec<usize> = idx
            .iter()
            .map(|&i| {
                let a = &set.images[i].attrs;
                match clf.task {
                    AttributeTask::Gender => a.gender as usize,
                    AttributeTask::Race => a.race as usize,
                    AttributeTask::Age => a.age_group as usize,
                }
            })
            .collect();
        let years: Option<Vec<f64>> = (clf.task == AttributeTask::Age)
            .then(|| idx.iter().map(|&i| set.age_years[i]).collect());
        let loss = classifier_loss(clf, &x, &classes, years.as_deref());
        if !loss.item().is_finite() {
            return Err(Error::NonFinite { term: format!("evaluator_{}", clf.task.name()), iteration: it });
        }
        let grads = loss.backward(false);
        adam.step(&params, &grads);
    }
    Ok(())
}

/// Accuracy of a classifier on a set of images, against ground truth.
pub fn classifier_accuracy(
    clf: &AttributeClassifier,
    images: &[&FaceImage],
    truths: &[usize],
) -> f64 {
    let mut correct = 0usize;
    for (chunk, truth_chunk) in images.chunks(32).zip(truths.chunks(32)) {
        let x = images_to_tensor::<f32>(chunk);
        let probs = no_grad(|| clf.class_probs(&x));
        let k = probs.shape()[1];
        let data = probs.data();
        for (i, &t) in truth_chunk.iter().enumerate() {
            let row = &data[i * k..(i + 1) * k];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == t {
                correct += 1;
            }
        }
    }
    correct as f64 / images.len() as f64
}

fn train_unseen_matcher(
    matcher: &UnseenMatcher,
    set: &TrainSet,
    fit_idx: &[usize],
    n_fit_subjects: usize,
    budget: &EvaluatorBudget,
    seed: u64,
) -> Result<()> {
    let head = Linear::<f32>::new(
        matcher.descriptor_dim,
        n_fit_subjects,
        &mut ChaCha12Rng::seed_from_u64(mix_seed(seed, &[0xc1b])),
    );
    let mut params = matcher.params();
    params.push(head.weight.clone());
    params.push(head.bias.clone());
    let mut adam = Adam::new(5e-4, 0.9, 0.999);
    for it in 0..budget.matcher_iterations {
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, &[0xc1c, it]));
        let idx: Vec<usize> = (0..budget.batch_size)
            .map(|_| fit_idx[rng.gen_range(0..fit_idx.len())])
            .collect();
        let imgs: Vec<&FaceImage> = idx.iter().map(|&i| &set.images[i]).collect();
        let classes: Vec<usize> = idx.iter().map(|&i| set.subject_index[i]).collect();
        let x = images_to_tensor::<f32>(&imgs);
        let desc = matcher.descriptor(&x)?;
        let logits = head.forward(&ops::mul_scalar(&desc, 16.0));
        let loss = crate::train::cross_entropy_rows(&logits, &classes);
        if !loss.item().is_finite() {
            return Err(Error::NonFinite { term: "unseen_matcher_ce".into(), iteration: it });
        }
        let grads = loss.backward(false);
        adam.step(&params, &grads);
    }
    Ok(())
}

/// Train the full evaluator suite on `eval_train_set` and verify competence
/// bars on a held-out slice: attribute accuracy >= 0.9, matcher EER <= 0.10.
/// Bars can only be bypassed with the explicit override.
pub fn train_unseen_evaluators(
    eval_train_set: &TrainSet,
    seed: u64,
    budget: &EvaluatorBudget,
    allow_below_bar: bool,
) -> Result<UnseenEvaluators> {
    if eval_train_set.n_subjects < 8 {
        return Err(Error::domain("evaluator training needs at least 8 subjects"));
    }
    let res = eval_train_set.resolution();
    // distinct seed namespace from the auxiliary networks
    let ns = mix_seed(seed, &[0xe7a1]);

    // subject-disjoint holdout for competence measurement
    let holdout_subjects = (eval_train_set.n_subjects / 5).max(2);
    let holdout_start = eval_train_set.n_subjects - holdout_subjects;
    let (mut fit_idx, mut holdout_idx) = (Vec::new(), Vec::new());
    for (i, &s) in eval_train_set.subject_index.iter().enumerate() {
        if s >= holdout_start {
            holdout_idx.push(i)
        } else {
            fit_idx.push(i)
        }
    }

    let gender = AttributeClassifier::new(AttributeTask::Gender, res, mix_seed(ns, &[1]))?;
    let race = AttributeClassifier::new(AttributeTask::Race, res, mix_seed(ns, &[2]))?;
    let age = AttributeClassifier::new(AttributeTask::Age, res, mix_seed(ns, &[3]))?;
    train_classifier(&gender, eval_train_set, &fit_idx, budget, mix_seed(ns, &[4]))?;
    train_classifier(&race, eval_train_set, &fit_idx, budget, mix_seed(ns, &[5]))?;
    train_classifier(&age, eval_train_set, &fit_idx, budget, mix_seed(ns, &[6]))?;

    let matcher = UnseenMatcher::new(res, 96, mix_seed(ns, &[7]))?;
    train_unseen_matcher(&matcher, eval_train_set, &fit_idx, holdout_start, budget, mix_seed(ns, &[8]))?;

    let holdout_imgs: Vec<&FaceImage> = holdout_idx.iter().map(|&i| &eval_train_set.images[i]).collect();
    let gender_truth: Vec<usize> = holdout_imgs.iter().map(|im| im.attrs.gender as usize).collect();
    let race_truth: Vec<usize> = holdout_imgs.iter().map(|im| im.attrs.race as usize).collect();
    let age_truth: Vec<usize> = holdout_imgs.iter().map(|im| im.attrs.age_group as usize).collect();

    let gender_acc = classifier_accuracy(&gender, &holdout_imgs, &gender_truth);
    let race_acc = classifier_accuracy(&race, &holdout_imgs, &race_truth);
    let age_group_acc = classifier_accuracy(&age, &holdout_imgs, &age_truth);

    let descs = matcher.descriptors(&holdout_imgs)?;
    let holdout_subj: Vec<usize> = holdout_idx
        .iter()
        .map(|&i| eval_train_set.subject_index[i])
        .collect();
    let mut scores = ScoreSet::default();
    for i in 0..descs.len() {
        for j in (i + 1)..descs.len() {
            let s = crate::nets::match_score(&descs[i], &descs[j])?;
            if holdout_subj[i] == holdout_subj[j] {
                scores.genuine.push(s);
            } else if scores.impostor.len() < 20_000 {
                scores.impostor.push(s);
            }
        }
    }
    let matcher_eer = compute_eer(&compute_roc(&scores)?)?;

    for (what, value, required, ok) in [
        ("unseen gender classifier accuracy", gender_acc, ">= 0.90", gender_acc >= 0.90),
        ("unseen race classifier accuracy", race_acc, ">= 0.90", race_acc >= 0.90),
        ("unseen age-group classifier accuracy", age_group_acc, ">= 0.90", age_group_acc >= 0.90),
        ("unseen matcher EER", matcher_eer, "<= 0.10", matcher_eer <= 0.10),
    ] {
        if !ok && !allow_below_bar {
            return Err(Error::CompetenceBar {
                what: what.into(),
                value,
                required: required.into(),
            });
        }
    }

    Ok(UnseenEvaluators {
        gender,
        race,
        age,
        matcher,
        gender_acc,
        race_acc,
        age_group_acc,
        matcher_eer,
    })
}

impl UnseenEvaluators {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut b = CheckpointBuilder::new("evaluators")
            .config("resolution", self.gender.resolution)
            .config("descriptor_dim", self.matcher.descriptor_dim)
            .meta("gender_acc", self.gender_acc)
            .meta("race_acc", self.race_acc)
            .meta("age_group_acc", self.age_group_acc)
            .meta("matcher_eer", self.matcher_eer);
        b.add_named_params("gender", &self.gender.named_params());
        b.add_named_params("race", &self.race.named_params());
        b.add_named_params("age", &self.age.named_params());
        b.add_named_params("matcher", &self.matcher.named_params());
        b.write(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.kind() != "evaluators" {
            return Err(Error::Checkpoint(format!("expected evaluators, got '{}'", ck.kind())));
        }
        let res: usize = ck.config("resolution")?;
        let dim: usize = ck.config("descriptor_dim")?;
        let gender = AttributeClassifier::new(AttributeTask::Gender, res, 0)?;
        let race = AttributeClassifier::new(AttributeTask::Race, res, 0)?;
        let age = AttributeClassifier::new(AttributeTask::Age, res, 0)?;
        let matcher = UnseenMatcher::new(res, dim, 0)?;
        ck.load_named_params("gender", &gender.named_params())?;
        ck.load_named_params("race", &race.named_params())?;
        ck.load_named_params("age", &age.named_params())?;
        ck.load_named_params("matcher", &matcher.named_params())?;
        Ok(UnseenEvaluators {
            gender,
            race,
            age,
            matcher,
            gender_acc: ck.meta()["gender_acc"].as_f64().unwrap_or(f64::NAN),
            race_acc: ck.meta()["race_acc"].as_f64().unwrap_or(f64::NAN),
            age_group_acc: ck.meta()["age_group_acc"].as_f64().unwrap_or(f64::NAN),
            matcher_eer: ck.meta()["matcher_eer"].as_f64().unwrap_or(f64::NAN),
        })
    }
}
