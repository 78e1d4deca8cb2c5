//! The alternating adversarial training loop, target sampling,
//! checkpointing, resume, and the frozen auxiliary matcher.

mod gradcheck;
mod pretrain;

pub use gradcheck::{gradient_check, gradient_check_all, GradCheckResult, LossTermKind};
pub use pretrain::{cross_entropy_rows, load_matcher, pretrain_matcher, save_matcher, verification_eer, PretrainedMatcher};

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use veil_tensor::optim::{Adam, AdamState};
use veil_tensor::{no_grad, ops, Tensor};

use crate::data::{mix_seed, AttributeVector, FaceImage, PrivacyTargetSpec, SyntheticDataset};
use crate::error::{Error, Result};
use crate::loss::{
    gradient_penalty, loss_attr, loss_d_src, loss_g_match, loss_g_rec, loss_g_src, total_d_loss,
    total_g_loss, AdversarialKind, AdversarialVariant, DLossParts, GLossParts, LossWeights,
};
use crate::nets::{
    images_to_tensor, labels_to_tensor, params_checksum, Checkpoint, CheckpointBuilder,
    Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Matcher,
};

/// Full training configuration; flat keys mirror the config-file format.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_iterations: u64,
    pub critic_steps_per_gen_step: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub variant: AdversarialVariant,
    pub weights: LossWeights,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let variant = AdversarialVariant::wasserstein(10.0);
        TrainConfig {
            batch_size: 16,
            total_iterations: 5000,
            critic_steps_per_gen_step: recommended_critic_steps(variant.kind),
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            variant,
            weights: LossWeights::default(),
            seed: 17,
            checkpoint_every: 1000,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

pub fn recommended_critic_steps(kind: AdversarialKind) -> usize {
    match kind {
        AdversarialKind::Wasserstein => 5,
        AdversarialKind::LogLoss => 1,
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 || self.total_iterations < 1 || self.critic_steps_per_gen_step < 1 {
            return Err(Error::config(
                "batch_size, total_iterations and critic steps must be >= 1",
            ));
        }
        if self.learning_rate <= 0.0 || self.checkpoint_every < 1 {
            return Err(Error::config("learning_rate must be > 0, checkpoint_every >= 1"));
        }
        self.variant.validate()?;
        self.weights.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.generator.resolution != self.discriminator.resolution {
            return Err(Error::config("generator/discriminator resolution mismatch"));
        }
        Ok(())
    }
}

/// In-memory training set.
pub struct TrainSet {
    pub images: Vec<FaceImage>,
    pub age_years: Vec<f64>,
    pub subject_index: Vec<usize>,
    pub n_subjects: usize,
}

impl TrainSet {
    pub fn from_synthetic(ds: &SyntheticDataset) -> Self {
        let n_subjects = ds.samples.iter().map(|s| s.subject_index).max().map_or(0, |m| m + 1);
        TrainSet {
            images: ds.samples.iter().map(|s| s.image.clone()).collect(),
            age_years: ds.samples.iter().map(|s| s.age_years).collect(),
            subject_index: ds.samples.iter().map(|s| s.subject_index).collect(),
            n_subjects,
        }
    }

    pub fn from_images(images: Vec<FaceImage>, age_years: Vec<f64>) -> Result<Self> {
        assert_eq!(images.len(), age_years.len());
        let mut subjects: Vec<String> = Vec::new();
        let mut subject_index = Vec::with_capacity(images.len());
        for img in &images {
            let sid = img
                .subject_id
                .clone()
                .ok_or_else(|| Error::domain("training images require subject ids"))?;
            let idx = match subjects.iter().position(|s| *s == sid) {
                Some(i) => i,
                None => {
                    subjects.push(sid);
                    subjects.len() - 1
                }
            };
            subject_index.push(idx);
        }
        Ok(TrainSet { images, age_years, subject_index, n_subjects: subjects.len() })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.images.first().map_or(0, |i| i.resolution)
    }
}

/// Uniformly sample one of the 15 enumerated privacy targets.
pub fn sample_training_target(
    v0: &AttributeVector,
    rng: &mut ChaCha12Rng,
) -> (PrivacyTargetSpec, AttributeVector) {
    let targets = crate::data::enumerate_privacy_targets(v0);
    targets[rng.gen_range(0..targets.len())]
}

/// Per-iteration metric row; CSV columns are fixed (schema v1).
#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainStepMetrics {
    pub iteration: u64,
    pub l_d_src: f64,
    pub l_d_attr: f64,
    pub l_d_total: f64,
    pub l_g_src: f64,
    pub l_g_attr: f64,
    pub l_g_m: f64,
    pub l_g_rec: f64,
    pub l_g_total: f64,
    pub clamp_events: u64,
    pub wall_ms: f64,
}

pub const METRICS_HEADER: &str =
    "iteration,l_d_src,l_d_attr,l_d_total,l_g_src,l_g_attr,l_g_m,l_g_rec,l_g_total,clamp_events,wall_ms";

impl TrainStepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{:.3}",
            self.iteration,
            self.l_d_src,
            self.l_d_attr,
            self.l_d_total,
            self.l_g_src,
            self.l_g_attr,
            self.l_g_m,
            self.l_g_rec,
            self.l_g_total,
            self.clamp_events,
            self.wall_ms
        )
    }
}

/// Outcome of one step: completed with metrics, or rolled back after a
/// non-finite loss.
pub enum StepOutcome {
    Completed(TrainStepMetrics),
    RolledBack { term: String, iteration: u64 },
}

pub struct TrainState {
    pub cfg: TrainConfig,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    /// Frozen copy: parameters are constant leaves.
    pub matcher: Matcher<f32>,
    pub adam_g: Adam<f32>,
    pub adam_d: Adam<f32>,
    pub iteration: u64,
    pub matcher_checksum: u64,
}

impl TrainState {
    pub fn new(cfg: TrainConfig, matcher: &Matcher<f32>) -> Result<Self> {
        cfg.validate()?;
        if matcher.cfg.resolution != cfg.generator.resolution {
            return Err(Error::config("matcher resolution mismatch"));
        }
        let generator = Generator::new(cfg.generator, mix_seed(cfg.seed, &[0x6e]))?;
        let discriminator = Discriminator::new(cfg.discriminator, mix_seed(cfg.seed, &[0xd1]))?;
        let adam_g = Adam::new(cfg.learning_rate as f32, cfg.beta1 as f32, cfg.beta2 as f32);
        let adam_d = Adam::new(cfg.learning_rate as f32, cfg.beta1 as f32, cfg.beta2 as f32);
        let frozen = matcher.frozen_copy();
        let matcher_checksum = params_checksum(&frozen.named_params());
        Ok(TrainState {
            cfg,
            generator,
            discriminator,
            matcher: frozen,
            adam_g,
            adam_d,
            iteration: 0,
            matcher_checksum,
        })
    }
}

/// A batch ready for the step: images plus ground-truth labels.
pub struct Batch {
    pub x: Tensor<f32>,
    pub v0: Vec<AttributeVector>,
    pub v0_planes: Tensor<f32>,
}

impl Batch {
    pub fn sample(set: &TrainSet, batch_size: usize, seed: u64, iteration: u64) -> Batch {
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, &[0xba, iteration]));
        let res = set.resolution();
        let idx: Vec<usize> = (0..batch_size).map(|_| rng.gen_range(0..set.len())).collect();
        let refs: Vec<&FaceImage> = idx.iter().map(|&i| &set.images[i]).collect();
        let v0: Vec<AttributeVector> = refs.iter().map(|im| im.attrs).collect();
        Batch {
            x: images_to_tensor(&refs),
            v0_planes: labels_to_tensor(&v0, res, res),
            v0,
        }
    }
}

struct Snapshot {
    g: Vec<Vec<f32>>,
    d: Vec<Vec<f32>>,
    adam_g: AdamState<f32>,
    adam_d: AdamState<f32>,
}

fn take_snapshot(state: &TrainState) -> Snapshot {
    Snapshot {
        g: state.generator.params().iter().map(|t| t.to_vec()).collect(),
        d: state.discriminator.params().iter().map(|t| t.to_vec()).collect(),
        adam_g: state.adam_g.state(&state.generator.params()),
        adam_d: state.adam_d.state(&state.discriminator.params()),
    }
}

fn restore_snapshot(state: &mut TrainState, snap: Snapshot) {
    for (t, data) in state.generator.params().iter().zip(&snap.g) {
        t.set_data(data);
    }
    for (t, data) in state.discriminator.params().iter().zip(&snap.d) {
        t.set_data(data);
    }
    state.adam_g.load_state(&state.generator.params(), snap.adam_g);
    state.adam_d.load_state(&state.discriminator.params(), snap.adam_d);
}

fn src_probs(scores: &Tensor<f32>, variant: &AdversarialVariant) -> Tensor<f32> {
    match variant.kind {
        AdversarialKind::LogLoss => ops::sigmoid(scores),
        AdversarialKind::Wasserstein => scores.clone(),
    }
}

/// One training step: `critic_steps` discriminator updates, then one
/// generator update including the cycle pass. On a non-finite loss the step
/// rolls back to its pre-step snapshot.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<StepOutcome> {
    let t0 = Instant::now();
    let iter = state.iteration;
    let cfg = state.cfg.clone();
    let res = cfg.generator.resolution;
    let snapshot = take_snapshot(state);

    let mut clamp_events = 0usize;

    let run = |state: &mut TrainState, clamp_events: &mut usize| -> Result<TrainStepMetrics> {
        let mut d_metrics = (0.0, 0.0, 0.0);
        for k in 0..cfg.critic_steps_per_gen_step {
            let mut rng_t =
                ChaCha12Rng::seed_from_u64(mix_seed(cfg.seed, &[0xdc, iter, k as u64]));
            let targets: Vec<AttributeVector> = batch
                .v0
                .iter()
                .map(|v| sample_training_target(v, &mut rng_t).1)
                .collect();
            let vt_planes = labels_to_tensor::<f32>(&targets, res, res);
            let fake = no_grad(|| state.generator.forward(&batch.x, &vt_planes));

            let (src_real, attr_real) = state.discriminator.forward(&batch.x, &batch.v0_planes);
            let (src_fake, _) = state.discriminator.forward(&fake, &vt_planes);

            let penalty = match cfg.variant.kind {
                AdversarialKind::Wasserstein if cfg.variant.gradient_penalty_coeff > 0.0 => {
                    let mut rng_e =
                        ChaCha12Rng::seed_from_u64(mix_seed(cfg.seed, &[0xe5, iter, k as u64]));
                    let eps: Vec<f64> =
                        (0..cfg.batch_size).map(|_| rng_e.gen_range(0.0..1.0)).collect();
                    Some(gradient_penalty(
                        &batch.x,
                        &batch.v0_planes,
                        &fake,
                        &vt_planes,
                        &eps,
                        |img, lab| state.discriminator.forward(img, lab).0,
                    ))
                }
                _ => None,
            };

            let (l_d_src, c1) = loss_d_src(
                &src_probs(&src_real, &cfg.variant),
                &src_probs(&src_fake, &cfg.variant),
                &cfg.variant,
                penalty.as_ref(),
            );
            let (l_d_attr, c2) = loss_attr(&attr_real, &batch.v0);
            *clamp_events += c1 + c2;

            let total = total_d_loss(
                &DLossParts { d_src: l_d_src.clone(), d_attr: l_d_attr.clone() },
                &cfg.weights,
            )
            .map_err(|e| tag_iteration(e, iter))?;
            let grads = total.backward(false);
            state.adam_d.step(&state.discriminator.params(), &grads);
            d_metrics = (
                l_d_src.item() as f64,
                l_d_attr.item() as f64,
                total.item() as f64,
            );
        }

        // generator update with cycle pass
        let mut rng_t = ChaCha12Rng::seed_from_u64(mix_seed(cfg.seed, &[0x66, iter]));
        let targets: Vec<AttributeVector> = batch
            .v0
            .iter()
            .map(|v| sample_training_target(v, &mut rng_t).1)
            .collect();
        let vt_planes = labels_to_tensor::<f32>(&targets, res, res);

        let x_fake = state.generator.forward(&batch.x, &vt_planes);
        let (src_fake, attr_fake) = state.discriminator.forward(&x_fake, &vt_planes);
        let (l_g_src, c3) = loss_g_src(&src_probs(&src_fake, &cfg.variant), &cfg.variant);
        let (l_g_attr, c4) = loss_attr(&attr_fake, &targets);
        *clamp_events += c3 + c4;

        let l_g_match = if cfg.weights.lambda_m != 0.0 {
            let desc_orig = no_grad(|| state.matcher.descriptor(&batch.x))?.detach();
            let desc_pert = state.matcher.descriptor(&x_fake)?;
            Some(loss_g_match(&desc_orig, &desc_pert)?)
        } else {
            None
        };

        let x_cycled = state.generator.forward(&x_fake, &batch.v0_planes);
        let l_g_rec = loss_g_rec(&batch.x, &x_cycled)?;

        let parts = GLossParts {
            g_src: l_g_src.clone(),
            g_attr: l_g_attr.clone(),
            g_match: l_g_match.clone(),
            g_rec: l_g_rec.clone(),
        };
        let total = total_g_loss(&parts, &cfg.weights).map_err(|e| tag_iteration(e, iter))?;
        let grads = total.backward(false);
        state.adam_g.step(&state.generator.params(), &grads);

        Ok(TrainStepMetrics {
            iteration: iter,
            l_d_src: d_metrics.0,
            l_d_attr: d_metrics.1,
            l_d_total: d_metrics.2,
            l_g_src: l_g_src.item() as f64,
            l_g_attr: l_g_attr.item() as f64,
            l_g_m: l_g_match.as_ref().map_or(0.0, |t| t.item() as f64),
            l_g_rec: l_g_rec.item() as f64,
            l_g_total: total.item() as f64,
            clamp_events: 0,
            wall_ms: 0.0,
        })
    };

    let result = run(state, &mut clamp_events);

    debug_assert_eq!(
        params_checksum(&state.matcher.named_params()),
        state.matcher_checksum,
        "auxiliary matcher must stay bitwise frozen"
    );

    match result {
        Ok(mut metrics) => {
            state.iteration += 1;
            metrics.clamp_events = clamp_events as u64;
            metrics.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
            Ok(StepOutcome::Completed(metrics))
        }
        Err(Error::NonFinite { term, .. }) => {
            restore_snapshot(state, snapshot);
            state.iteration += 1;
            Ok(StepOutcome::RolledBack { term, iteration: iter })
        }
        Err(other) => Err(other),
    }
}

fn tag_iteration(e: Error, iteration: u64) -> Error {
    match e {
        Error::NonFinite { term, .. } => Error::NonFinite { term, iteration },
        other => other,
    }
}

pub struct TrainOutcome {
    pub final_state_checkpoint: PathBuf,
    pub generator_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub rolled_back_steps: u64,
    pub completed_iterations: u64,
}

const MAX_CONSECUTIVE_ROLLBACKS: u32 = 10;

/// Save the full training state (both networks, optimizer moments,
/// iteration counter).
pub fn save_train_state(state: &TrainState, path: &Path) -> Result<()> {
    let mut b = CheckpointBuilder::new("train_state")
        .config("train", &state.cfg)
        .meta("iteration", state.iteration)
        .meta("adam_g_t", state.adam_g.step_count())
        .meta("adam_d_t", state.adam_d.step_count())
        .meta("matcher_checksum", state.matcher_checksum.to_string());
    b.add_named_params("generator", &state.generator.named_params());
    b.add_named_params("discriminator", &state.discriminator.named_params());
    let g_params = state.generator.params();
    let ag = state.adam_g.state(&g_params);
    for ((name, t), (m, v)) in state.generator.named_params().iter().zip(&ag.moments) {
        b.add_f32(&format!("adam_g.{name}.m"), t.shape(), m);
        b.add_f32(&format!("adam_g.{name}.v"), t.shape(), v);
    }
    let d_params = state.discriminator.params();
    let ad = state.adam_d.state(&d_params);
    for ((name, t), (m, v)) in state.discriminator.named_params().iter().zip(&ad.moments) {
        b.add_f32(&format!("adam_d.{name}.m"), t.shape(), m);
        b.add_f32(&format!("adam_d.{name}.v"), t.shape(), v);
    }
    b.write(path)
}

/// Restore a [`TrainState`] previously written by [`save_train_state`].
pub fn load_train_state(path: &Path, matcher: &Matcher<f32>) -> Result<TrainState> {
    let ck = Checkpoint::load(path)?;
    if ck.kind() != "train_state" {
        return Err(Error::Checkpoint(format!(
            "expected train_state checkpoint, found '{}'",
            ck.kind()
        )));
    }
    let cfg: TrainConfig = ck.config("train")?;
    let mut state = TrainState::new(cfg, matcher)?;
    ck.load_named_params("generator", &state.generator.named_params())?;
    ck.load_named_params("discriminator", &state.discriminator.named_params())?;
    state.iteration = ck.meta()["iteration"].as_u64().unwrap_or(0);

    let load_adam = |prefix: &str,
                     named: &[(String, Tensor<f32>)],
                     t_steps: u64|
     -> Result<AdamState<f32>> {
        let mut moments = Vec::new();
        for (name, _) in named {
            let (_, m) = ck.f32_tensor(&format!("{prefix}.{name}.m"))?;
            let (_, v) = ck.f32_tensor(&format!("{prefix}.{name}.v"))?;
            moments.push((m, v));
        }
        Ok(AdamState { t: t_steps, moments })
    };
    let ag = load_adam(
        "adam_g",
        &state.generator.named_params(),
        ck.meta()["adam_g_t"].as_u64().unwrap_or(0),
    )?;
    state.adam_g.load_state(&state.generator.params(), ag);
    let ad = load_adam(
        "adam_d",
        &state.discriminator.named_params(),
        ck.meta()["adam_d_t"].as_u64().unwrap_or(0),
    )?;
    state.adam_d.load_state(&state.discriminator.params(), ad);
    Ok(state)
}

/// Write the deployment artifact: the generator alone.
pub fn save_generator(g: &Generator<f32>, path: &Path, meta_iteration: u64) -> Result<()> {
    let mut b = CheckpointBuilder::new("generator")
        .config("generator", g.cfg)
        .meta("iteration", meta_iteration);
    b.add_named_params("generator", &g.named_params());
    b.write(path)
}

pub fn load_generator(path: &Path) -> Result<Generator<f32>> {
    let ck = Checkpoint::load(path)?;
    let cfg: GeneratorConfig = ck.config("generator")?;
    let g = Generator::new(cfg, 0)?;
    ck.load_named_params("generator", &g.named_params())?;
    Ok(g)
}

/// Run (or resume) training, writing periodic checkpoints, the metrics CSV,
/// and the final generator-only artifact.
pub fn train(
    cfg: &TrainConfig,
    data: &TrainSet,
    matcher: &Matcher<f32>,
    out_dir: &Path,
    resume: bool,
    mut progress: impl FnMut(&StepOutcome),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::domain("empty training set"));
    }
    if data.resolution() != cfg.generator.resolution {
        return Err(Error::domain(format!(
            "dataset resolution {} does not match model resolution {}",
            data.resolution(),
            cfg.generator.resolution
        )));
    }
    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let metrics_path = out_dir.join("metrics.csv");

    let mut state = if resume {
        match latest_checkpoint(&ckpt_dir)? {
            Some(path) => {
                let st = load_train_state(&path, matcher)?;
                if st.cfg != *cfg {
                    return Err(Error::config(
                        "resume requested but checkpoint config differs from requested config",
                    ));
                }
                st
            }
            None => TrainState::new(cfg.clone(), matcher)?,
        }
    } else {
        TrainState::new(cfg.clone(), matcher)?
    };

    use std::io::Write;
    let mut metrics_file = if state.iteration > 0 && metrics_path.exists() {
        std::fs::OpenOptions::new().append(true).open(&metrics_path)?
    } else {
        let mut f = std::fs::File::create(&metrics_path)?;
        writeln!(f, "{METRICS_HEADER}")?;
        f
    };

    let mut rolled_back = 0u64;
    let mut consecutive = 0u32;
    while state.iteration < cfg.total_iterations {
        let batch = Batch::sample(data, cfg.batch_size, cfg.seed, state.iteration);
        let outcome = train_step(&mut state, &batch)?;
        match &outcome {
            StepOutcome::Completed(m) => {
                writeln!(metrics_file, "{}", m.csv_row())?;
                consecutive = 0;
            }
            StepOutcome::RolledBack { term, iteration } => {
                rolled_back += 1;
                consecutive += 1;
                eprintln!("iteration {iteration}: non-finite {term}; rolled back");
                if consecutive > MAX_CONSECUTIVE_ROLLBACKS {
                    return Err(Error::NonFinite {
                        term: term.clone(),
                        iteration: *iteration,
                    });
                }
            }
        }
        progress(&outcome);

        if state.iteration % cfg.checkpoint_every == 0 || state.iteration == cfg.total_iterations {
            let path = ckpt_dir.join(format!("ckpt_{:08}.veil", state.iteration));
            save_train_state(&state, &path)?;
        }
    }
    metrics_file.flush()?;

    let final_ckpt = ckpt_dir.join(format!("ckpt_{:08}.veil", state.iteration));
    if !final_ckpt.exists() {
        save_train_state(&state, &final_ckpt)?;
    }
    let generator_path = out_dir.join("generator.veil");
    save_generator(&state.generator, &generator_path, state.iteration)?;

    Ok(TrainOutcome {
        final_state_checkpoint: final_ckpt,
        generator_checkpoint: generator_path,
        metrics_path,
        rolled_back_steps: rolled_back,
        completed_iterations: state.iteration,
    })
}

/// Most recent checkpoint in a directory, by iteration number in the name.
pub fn latest_checkpoint(ckpt_dir: &Path) -> Result<Option<PathBuf>> {
    if !ckpt_dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(ckpt_dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some(num) = name.strip_prefix("ckpt_").and_then(|s| s.strip_suffix(".veil")) {
            if let Ok(iter) = num.parse::<u64>() {
                if best.as_ref().map_or(true, |(b, _)| iter > *b) {
                    best = Some((iter, path));
                }
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}
