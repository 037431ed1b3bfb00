//! Alternating adversarial training, the supervised comparison modes,
//! checkpointing and F1-based model selection.

mod adam;
mod objective;
mod pool;

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use objective::{
    discriminator_objective, full_objective, generator_objective, translate_batch, Batch, BundleBound, DiscInputs,
    DiscriminatorTerms, GeneratorTerms, Translation,
};
pub use pool::{pool_sample, ImagePool};

use crate::ck::{condition_masks, relabel_with_ck, BinaryMask, CkConfig};
use crate::datamodel::{DatasetSplit, Domain, Example, ImagePatch, LabelMask, TC_POSITIVE};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, AbsentClass, F1Report};
use crate::graph::{Graph, Var};
use crate::losses::{LossReport, LossWeights};
use crate::nn::{
    image_batch, label_batch, to_patches, ArchConfig, Discriminator, NetworkBundle, NetworkId, ParamStore,
};
use crate::scalar::Real;

/// Which model is trained and on what.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Joint translation and segmentation; `D_A` is the segmenter.
    #[default]
    Dasgan,
    /// Supervised segmentation on annotated domain-A patches only.
    SegOnlyReal,
    /// Translation phase, then supervised segmentation on translated B patches only.
    SegOnlySynth,
    /// Translation phase, then supervised segmentation on annotated A and translated B patches.
    TwoStep,
}

impl TrainMode {
    fn has_translation_phase(self) -> bool {
        matches!(self, TrainMode::SegOnlySynth | TrainMode::TwoStep)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub iterations: u64,
    pub batch_size: usize,
    pub g_lr: f64,
    /// Learning rate of the discriminators and of standalone segmenters.
    pub d_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub pool_size: usize,
    /// Annotated domain-A patches guaranteed in every adversarial batch when
    /// the training set mixes annotated and unannotated patches.
    pub min_labeled_a: usize,
    pub checkpoint_every: u64,
    /// Also train `G_AB` through the segmentation head of `D_B`.
    pub symmetric_seg: bool,
    pub power_iterations: usize,
    /// Share of the iterations spent in the translation phase of two-phase modes.
    pub phase_one_fraction: f64,
    /// Relabel B patches with the CK heuristic instead of their stored masks.
    pub ck: Option<CkConfig>,
    pub absent: AbsentClass,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Dasgan,
            iterations: 5000,
            batch_size: 4,
            g_lr: 1e-4,
            d_lr: 5e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights::default(),
            seed: 0,
            pool_size: 50,
            min_labeled_a: 2,
            checkpoint_every: 500,
            symmetric_seg: true,
            power_iterations: 1,
            phase_one_fraction: 0.5,
            ck: Some(CkConfig::default()),
            absent: AbsentClass::One,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.g_lr > 0.0 && self.d_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.iterations == 0 {
            return bad("iterations must be positive");
        }
        if self.batch_size == 0 || self.checkpoint_every == 0 || self.power_iterations == 0 {
            return bad("batch size, checkpoint cadence and power iterations must be positive");
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2) && self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.mode.has_translation_phase() {
            if self.iterations < 2 {
                return bad("two-phase modes need at least two iterations");
            }
            if !(self.phase_one_fraction > 0.0 && self.phase_one_fraction < 1.0) {
                return bad("phase_one_fraction must lie in (0, 1)");
            }
        }
        self.weights.validate()?;
        self.arch.generator.validate()?;
        self.arch.discriminator.validate()
    }

    /// Iterations of the translation phase (zero outside two-phase modes).
    pub fn phase_one_iterations(&self) -> u64 {
        if !self.mode.has_translation_phase() {
            return 0;
        }
        let n = libm::round(self.iterations as f64 * self.phase_one_fraction) as u64;
        n.clamp(1, self.iterations - 1)
    }
}

/// Stage of a run a step or checkpoint belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Adversarial update of all four networks.
    Joint,
    /// Adversarial update with the segmentation weight forced to zero.
    Translation,
    /// Cross-entropy update of a standalone segmenter.
    Supervised,
}

/// Discriminator-side loss components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscReport {
    pub adv_a: f64,
    pub adv_b: f64,
    pub seg: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: u64,
    pub phase: Phase,
    /// Generator losses, or the segmenter's cross-entropy in `seg` and `total`.
    pub losses: LossReport,
    pub discriminator: Option<DiscReport>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub iteration: u64,
    pub phase: Phase,
    /// Test-split scores of the segmentation model, when one was evaluated.
    pub f1: Option<F1Report>,
}

/// The checkpoint with the highest mean F1; ties go to the later one.
pub fn select_model(checkpoints: &[CheckpointRecord]) -> Result<&CheckpointRecord> {
    checkpoints
        .iter()
        .filter(|c| c.f1.is_some())
        .fold(None, |best: Option<&CheckpointRecord>, c| match best {
            Some(b) if b.f1.map(|f| f.mean) > c.f1.map(|f| f.mean) => Some(b),
            _ => Some(c),
        })
        .ok_or(Error::NoCheckpoints)
}

/// Hooks called by [`train_with`]; an error aborts the run.
pub trait Observer<T: Real> {
    fn on_step(&mut self, _state: &TrainState<T>, _report: &StepReport) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _state: &TrainState<T>, _record: &CheckpointRecord) -> Result<()> {
        Ok(())
    }

    /// Translated B patches of a two-phase run, before the supervised phase.
    fn on_synthetic(&mut self, _examples: &[Example]) -> Result<()> {
        Ok(())
    }
}

impl<T: Real> Observer<T> for () {}

#[derive(Clone, Debug)]
struct Optimizers<T> {
    g_ab: Adam<T>,
    g_ba: Adam<T>,
    d_a: Adam<T>,
    d_b: Adam<T>,
    seg: Option<Adam<T>>,
}

/// All mutable state of a run.
#[derive(Clone, Debug)]
pub struct TrainState<T: Real = f32> {
    pub config: TrainConfig,
    pub bundle: NetworkBundle<T>,
    /// Standalone segmenter of the supervised modes.
    pub segmenter: Option<Discriminator<T>>,
    pub iteration: u64,
    pub pool_a: ImagePool,
    pub pool_b: ImagePool,
    pub checkpoints: Vec<CheckpointRecord>,
    /// Best test mean F1 so far; never decreases.
    pub best_f1: Option<f64>,
    pub best_iteration: Option<u64>,
    best_params: Option<ParamStore<T>>,
    optimizers: Optimizers<T>,
    rng: ChaCha8Rng,
    translation_only: bool,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn diverged(iteration: u64, parts: &[(&str, f64)]) -> Result<()> {
    if parts.iter().all(|(_, v)| v.is_finite()) {
        return Ok(());
    }
    let snapshot = parts.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ");
    Err(Error::Divergence { iteration, snapshot })
}

impl<T: Real> TrainState<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let bundle = NetworkBundle::new(&config.arch, config.seed)?;
        let segmenter = match config.mode {
            TrainMode::Dasgan => None,
            _ => {
                let mut spec = config.arch.discriminator.clone();
                spec.source_head = false;
                Some(Discriminator::new(spec, &mut stream(config.seed, 1))?)
            }
        };
        let adam =
            |store: &ParamStore<T>, lr| Adam::new(store, lr, config.adam_beta1, config.adam_beta2, config.adam_eps);
        let optimizers = Optimizers {
            g_ab: adam(&bundle.g_ab.store, config.g_lr),
            g_ba: adam(&bundle.g_ba.store, config.g_lr),
            d_a: adam(&bundle.d_a.store, config.d_lr),
            d_b: adam(&bundle.d_b.store, config.d_lr),
            seg: segmenter.as_ref().map(|s| adam(&s.store, config.d_lr)),
        };
        Ok(Self {
            pool_a: ImagePool::new(config.pool_size),
            pool_b: ImagePool::new(config.pool_size),
            rng: stream(config.seed, 2),
            config,
            bundle,
            segmenter,
            iteration: 0,
            checkpoints: Vec::new(),
            best_f1: None,
            best_iteration: None,
            best_params: None,
            optimizers,
            translation_only: false,
        })
    }

    /// The network whose segmentation head is evaluated: `D_A` in joint
    /// training, otherwise the standalone segmenter.
    pub fn segmentation_model(&self) -> &Discriminator<T> {
        self.segmenter.as_ref().unwrap_or(&self.bundle.d_a)
    }

    /// The segmentation model with the parameters of the best checkpoint
    /// (the current ones if nothing was evaluated yet).
    pub fn best_model(&self) -> Result<Discriminator<T>> {
        let mut model = self.segmentation_model().clone();
        if let Some(best) = &self.best_params {
            model.store.load_from(best)?;
        }
        Ok(model)
    }

    fn step_weights(&self) -> LossWeights {
        let mut w = self.config.weights;
        if self.translation_only {
            w.lambda_seg = 0.0;
        }
        w
    }

    /// One discriminator update on real and pooled generated images, then
    /// one generator update against the updated discriminators.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepReport> {
        let iteration = self.iteration + 1;
        let weights = self.step_weights();
        let pi = self.config.power_iterations;
        for id in NetworkId::ALL {
            self.bundle.store_mut(id).refresh_spectral(pi);
        }

        let mut gg = Graph::new();
        let g_ab = self.bundle.g_ab.store.bind(&mut gg, true);
        let g_ba = self.bundle.g_ba.store.bind(&mut gg, true);
        let tr = translate_batch(&mut gg, &self.bundle, &g_ab, &g_ba, batch)?;

        let generated = |v: Var, sources: &[&ImagePatch], masks: &[&LabelMask]| -> Vec<Example> {
            let fakes = to_patches(gg.value(v), gg.shape(v), sources);
            fakes.into_iter().zip(masks).map(|(p, m)| (p, (*m).clone())).collect()
        };
        let fresh_a = generated(tr.fake_a, &batch.images_b, &batch.masks_b);
        let fresh_b = generated(tr.fake_b, &batch.images_a, &batch.masks_a);
        let pooled_a = pool_sample(&mut self.pool_a, fresh_a, &mut self.rng);
        let pooled_b = pool_sample(&mut self.pool_b, fresh_b, &mut self.rng);

        let disc = self.discriminator_update(batch, &pooled_a, &pooled_b, &weights, iteration)?;

        let d_a = self.bundle.d_a.store.bind(&mut gg, false);
        let d_b = self.bundle.d_b.store.bind(&mut gg, false);
        let terms =
            generator_objective(&mut gg, &self.bundle, &d_a, &d_b, &tr, batch, &weights, self.config.symmetric_seg)?;
        let value = |v: Var| gg.scalar(v).as_f64();
        let seg = terms.seg.map_or(0.0, value);
        let (gan_ab, gan_ba, cycle, total) =
            (value(terms.gan_ab), value(terms.gan_ba), value(terms.cycle), value(terms.total));
        diverged(
            iteration,
            &[("gan_ab", gan_ab), ("gan_ba", gan_ba), ("cycle", cycle), ("seg", seg), ("total", total)],
        )?;
        let grads = gg.backward(terms.total);
        self.optimizers.g_ab.step(&mut self.bundle.g_ab.store, &g_ab, &grads);
        self.optimizers.g_ba.step(&mut self.bundle.g_ba.store, &g_ba, &grads);

        self.iteration = iteration;
        let phase = if self.translation_only { Phase::Translation } else { Phase::Joint };
        let losses = LossReport { gan_ab, gan_ba, cycle, seg, total };
        Ok(StepReport { iteration, phase, losses, discriminator: Some(disc) })
    }

    fn discriminator_update(
        &mut self,
        batch: &Batch,
        pooled_a: &[Example],
        pooled_b: &[Example],
        weights: &LossWeights,
        iteration: u64,
    ) -> Result<DiscReport> {
        let mut g = Graph::new();
        let d_a = self.bundle.d_a.store.bind(&mut g, true);
        let d_b = self.bundle.d_b.store.bind(&mut g, true);
        let mut input = |images: &[&ImagePatch], masks: &[&LabelMask]| -> Result<(Var, Vec<u8>)> {
            let (shape, data) = image_batch::<T>(images)?;
            Ok((g.constant(shape, data), label_batch(masks)))
        };
        let (fa_img, fa_mask) = split(pooled_a);
        let (fb_img, fb_mask) = split(pooled_b);
        let inputs = DiscInputs {
            real_a: input(&batch.images_a, &batch.masks_a)?,
            real_b: input(&batch.images_b, &batch.masks_b)?,
            fake_a: input(&fa_img, &fa_mask)?,
            fake_b: input(&fb_img, &fb_mask)?,
        };
        let terms = discriminator_objective(&mut g, &self.bundle, &d_a, &d_b, &inputs, weights)?;
        let value = |v: Var| g.scalar(v).as_f64();
        let report = DiscReport {
            adv_a: value(terms.adv_a),
            adv_b: value(terms.adv_b),
            seg: terms.seg.map_or(0.0, value),
            total: value(terms.total),
        };
        diverged(iteration, &[("d_adv_a", report.adv_a), ("d_adv_b", report.adv_b), ("d_seg", report.seg)])?;
        let grads = g.backward(terms.total);
        self.optimizers.d_a.step(&mut self.bundle.d_a.store, &d_a, &grads);
        self.optimizers.d_b.step(&mut self.bundle.d_b.store, &d_b, &grads);
        Ok(report)
    }

    /// One cross-entropy update of the standalone segmenter.
    pub fn supervised_step(&mut self, examples: &[&Example]) -> Result<StepReport> {
        let iteration = self.iteration + 1;
        let pi = self.config.power_iterations;
        let (Some(model), Some(opt)) = (self.segmenter.as_mut(), self.optimizers.seg.as_mut()) else {
            return Err(Error::Config("supervised steps need a standalone segmenter".into()));
        };
        model.store.refresh_spectral(pi);
        let images: Vec<&ImagePatch> = examples.iter().map(|e| &e.0).collect();
        let masks: Vec<&LabelMask> = examples.iter().map(|e| &e.1).collect();
        let (shape, data) = image_batch::<T>(&images)?;
        let mut g = Graph::new();
        let bound = model.store.bind(&mut g, true);
        let x = g.constant(shape, data);
        let out = model.forward(&mut g, &bound, x)?;
        let ce = g.masked_cross_entropy(out.posterior, &label_batch(&masks))?;
        let value = g.scalar(ce).as_f64();
        diverged(iteration, &[("ce", value)])?;
        let grads = g.backward(ce);
        opt.step(&mut model.store, &bound, &grads);
        self.iteration = iteration;
        let losses = LossReport { seg: value, total: value, ..LossReport::default() };
        Ok(StepReport { iteration, phase: Phase::Supervised, losses, discriminator: None })
    }

    /// Record a checkpoint, scoring the segmentation model on `test` when
    /// `evaluate` is set and the split is non-empty.
    pub fn checkpoint(&mut self, test: &[Example], evaluate: bool, phase: Phase) -> Result<CheckpointRecord> {
        let f1 = if evaluate && !test.is_empty() {
            Some(evaluate_model(self.segmentation_model(), test, self.config.absent)?)
        } else {
            None
        };
        if let Some(report) = f1 {
            if self.best_f1.is_none_or(|b| report.mean >= b) {
                self.best_f1 = Some(report.mean);
                self.best_iteration = Some(self.iteration);
                self.best_params = Some(self.segmentation_model().store.clone());
            }
        }
        let record = CheckpointRecord { iteration: self.iteration, phase, f1 };
        self.checkpoints.push(record);
        Ok(record)
    }
}

/// Endless epoch-shuffled index stream.
#[derive(Clone, Debug)]
struct Sampler {
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn new(len: usize) -> Self {
        Self { order: (0..len).collect(), cursor: len }
    }

    fn draw<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// Domain-A batches that reserve up to `min_labeled` slots for annotated
/// patches when the set mixes annotated and unannotated ones.
#[derive(Clone, Debug)]
struct DomainASampler {
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
    all: Sampler,
    from_labeled: Sampler,
    from_unlabeled: Sampler,
}

impl DomainASampler {
    fn new(train_a: &[Example]) -> Self {
        let (labeled, unlabeled): (Vec<usize>, Vec<usize>) =
            (0..train_a.len()).partition(|i| train_a[*i].1.labeled_pixels() > 0);
        Self {
            all: Sampler::new(train_a.len()),
            from_labeled: Sampler::new(labeled.len()),
            from_unlabeled: Sampler::new(unlabeled.len()),
            labeled,
            unlabeled,
        }
    }

    fn draw<R: Rng + ?Sized>(&mut self, n: usize, min_labeled: usize, rng: &mut R) -> Vec<usize> {
        let k = min_labeled.min(n);
        if k == 0 || self.labeled.is_empty() || self.unlabeled.is_empty() {
            return self.all.draw(n, rng);
        }
        let mut idx: Vec<usize> = self.from_labeled.draw(k, rng).into_iter().map(|i| self.labeled[i]).collect();
        idx.extend(self.from_unlabeled.draw(n - k, rng).into_iter().map(|i| self.unlabeled[i]));
        idx
    }
}

/// B examples with both conditioning variants of each CK mask. With `ck`
/// the masks are recomputed from the images.
pub fn conditioned_b(train_b: &[Example], ck: Option<&CkConfig>) -> Result<Vec<Example>> {
    let mut examples = train_b.to_vec();
    if let Some(cfg) = ck {
        relabel_with_ck(&mut examples, cfg)?;
    }
    Ok(examples
        .into_iter()
        .flat_map(|(patch, mask)| {
            let (neg, pos) = condition_masks(&BinaryMask::from_labels(&mask));
            [(patch.clone(), neg), (patch, pos)]
        })
        .collect())
}

/// Translate conditioned B examples to domain A. Each result keeps its
/// conditioning mask as the label and gets a variant suffix on its id.
pub fn materialize_synthetic<T: Real>(bundle: &NetworkBundle<T>, conditioned: &[Example]) -> Result<Vec<Example>> {
    let mut out = Vec::with_capacity(conditioned.len());
    for chunk in conditioned.chunks(8) {
        let images: Vec<&ImagePatch> = chunk.iter().map(|e| &e.0).collect();
        let masks: Vec<&LabelMask> = chunk.iter().map(|e| &e.1).collect();
        for (mut patch, mask) in bundle.g_ba.translate(&images, &masks)?.into_iter().zip(masks) {
            let variant = if mask.labels.contains(&TC_POSITIVE) { "pos" } else { "neg" };
            patch.id = format!("{}-{variant}", patch.id);
            let label = LabelMask { domain: Domain::A, ..mask.clone() };
            out.push((patch, label));
        }
    }
    Ok(out)
}

fn split(examples: &[Example]) -> (Vec<&ImagePatch>, Vec<&LabelMask>) {
    examples.iter().map(|(p, m)| (p, m)).unzip()
}

fn require(ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("training data lacks {what}")))
    }
}

fn run_adversarial<T: Real, O: Observer<T>>(
    state: &mut TrainState<T>,
    train_a: &[Example],
    train_b: &[Example],
    test: &[Example],
    until: u64,
    observer: &mut O,
) -> Result<()> {
    let mut sa = DomainASampler::new(train_a);
    let mut sb = Sampler::new(train_b.len());
    let evaluate = !state.translation_only;
    let phase = if evaluate { Phase::Joint } else { Phase::Translation };
    while state.iteration < until {
        let n = state.config.batch_size;
        let idx = sa.draw(n, state.config.min_labeled_a, &mut state.rng);
        let a: Vec<&Example> = idx.into_iter().map(|i| &train_a[i]).collect();
        let b: Vec<&Example> = sb.draw(n, &mut state.rng).into_iter().map(|i| &train_b[i]).collect();
        let report = state.train_step(&Batch::new(&a, &b))?;
        observer.on_step(state, &report)?;
        if state.iteration.is_multiple_of(state.config.checkpoint_every) || state.iteration == until {
            let record = state.checkpoint(test, evaluate, phase)?;
            observer.on_checkpoint(state, &record)?;
        }
    }
    Ok(())
}

fn run_supervised<T: Real, O: Observer<T>>(
    state: &mut TrainState<T>,
    train: &[Example],
    test: &[Example],
    observer: &mut O,
) -> Result<()> {
    let mut sampler = Sampler::new(train.len());
    while state.iteration < state.config.iterations {
        let batch: Vec<&Example> =
            sampler.draw(state.config.batch_size, &mut state.rng).into_iter().map(|i| &train[i]).collect();
        let report = state.supervised_step(&batch)?;
        observer.on_step(state, &report)?;
        if state.iteration.is_multiple_of(state.config.checkpoint_every) || state.iteration == state.config.iterations {
            let record = state.checkpoint(test, true, Phase::Supervised)?;
            observer.on_checkpoint(state, &record)?;
        }
    }
    Ok(())
}

/// [`train_with`] without hooks.
pub fn train<T: Real>(config: TrainConfig, data: &DatasetSplit) -> Result<TrainState<T>> {
    train_with(config, data, &mut ())
}

/// Run a full training schedule for `config.mode`, checkpointing every
/// `checkpoint_every` iterations and at the end of each phase.
pub fn train_with<T: Real, O: Observer<T>>(
    config: TrainConfig,
    data: &DatasetSplit,
    observer: &mut O,
) -> Result<TrainState<T>> {
    data.validate()?;
    let mut state = TrainState::<T>::new(config)?;
    let cfg = state.config.clone();
    let labeled_a: Vec<Example> = data.train_a.iter().filter(|(_, m)| m.labeled_pixels() > 0).cloned().collect();
    match cfg.mode {
        TrainMode::Dasgan => {
            require(!data.train_a.is_empty(), "domain-A patches")?;
            require(!data.train_b.is_empty(), "domain-B patches")?;
            let b = conditioned_b(&data.train_b, cfg.ck.as_ref())?;
            run_adversarial(&mut state, &data.train_a, &b, &data.test, cfg.iterations, observer)?;
        }
        TrainMode::SegOnlyReal => {
            require(!labeled_a.is_empty(), "annotated domain-A patches")?;
            run_supervised(&mut state, &labeled_a, &data.test, observer)?;
        }
        TrainMode::SegOnlySynth | TrainMode::TwoStep => {
            require(!data.train_a.is_empty(), "domain-A patches")?;
            require(!data.train_b.is_empty(), "domain-B patches")?;
            let b = conditioned_b(&data.train_b, cfg.ck.as_ref())?;
            state.translation_only = true;
            run_adversarial(&mut state, &data.train_a, &b, &data.test, cfg.phase_one_iterations(), observer)?;
            state.translation_only = false;
            let mut train = materialize_synthetic(&state.bundle, &b)?;
            observer.on_synthetic(&train)?;
            if cfg.mode == TrainMode::TwoStep {
                train.extend(labeled_a);
            }
            run_supervised(&mut state, &train, &data.test, observer)?;
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests;
