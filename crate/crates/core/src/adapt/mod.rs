//! Source-teacher training and source-free teacher-student adaptation.
//!
//! A teacher is trained with cross-entropy on one domain and frozen. A
//! student starts as a weight copy of the teacher and is trained on a small
//! labelled set of the target domain with a weighted sum of a feature-store
//! square loss, a temperature-softened distillation loss and cross-entropy.
//! Plain fine-tuning and distillation-only training are the same loop with
//! the unused terms switched off.

mod early_stop;
mod trace;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use early_stop::{best_index, early_stopper, MIN_IMPROVEMENT};
pub use trace::{EpochRecord, StopReason, TrainingTrace};

use crate::backbone::checkpoint::{Checkpoint, TrainingMetadata};
use crate::backbone::{Architecture, ImageTensor, ModelHandle, ModelOutput, OutputGrad};
use crate::datagen::cutmix::{cutmix, CutMixConfig, MixedSample};
use crate::datagen::{normalize, DomainDataset, Sample, Split, ADAPT_GROUPS};
use crate::error::{Error, Result};
use crate::eval::{evaluate_samples, EvalOptions};
use crate::feature_store::{forward_samples, store_from_outputs, BinSpec, FeatureStore, StoreBinning};
use crate::label::Label;
use crate::losses::{ce_loss, fsl_cell_gradients, fsl_loss, kd_loss, objective, soft_ce_loss_grad, LossBreakdown, LossConfig, ObjectiveInputs};
use crate::optim::{Sgd, SgdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Feature-store square loss + distillation + cross-entropy.
    Fretal,
    /// Distillation only.
    Kd,
    /// Cross-entropy fine-tuning only.
    Ft,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ft, Method::Kd, Method::Fretal];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fretal => "fretal",
            Method::Kd => "kd",
            Method::Ft => "ft",
        }
    }

    pub fn uses_fsl(self) -> bool {
        self == Method::Fretal
    }

    pub fn uses_kd(self) -> bool {
        matches!(self, Method::Fretal | Method::Kd)
    }

    pub fn uses_ce(self) -> bool {
        matches!(self, Method::Fretal | Method::Ft)
    }

    /// The loss weights actually used: the configured ones for the full
    /// method, a single unit weight for the baselines.
    pub fn loss_config(self, base: &LossConfig) -> LossConfig {
        match self {
            Method::Fretal => *base,
            Method::Kd => LossConfig::kd_only(base.temperature),
            Method::Ft => LossConfig::ce_only(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fretal" => Ok(Method::Fretal),
            "kd" => Ok(Method::Kd),
            "ft" | "fine-tune" | "finetune" => Ok(Method::Ft),
            other => Err(Error::Config(format!("unknown method '{other}' (expected fretal, kd or ft)"))),
        }
    }
}

/// When the student's feature store is rebuilt during adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefreshCadence {
    #[default]
    PerEpoch,
    PerBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub architecture: Architecture,
    pub optimizer: SgdConfig,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub cutmix: CutMixConfig,
    /// Source validation F1 below this fails training.
    pub min_source_f1: f64,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::default(),
            optimizer: SgdConfig::default(),
            max_epochs: 30,
            patience: 5,
            batch_size: 32,
            cutmix: CutMixConfig::default(),
            min_source_f1: 0.90,
            seed: 0,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("teacher max_epochs and batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.min_source_f1) {
            return Err(Error::Config(format!("min_source_f1 must lie in [0, 1], got {}", self.min_source_f1)));
        }
        self.cutmix.validate()?;
        self.architecture.param_shapes().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    pub method: Method,
    pub bins: BinSpec,
    pub loss: LossConfig,
    pub optimizer: SgdConfig,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub refresh: RefreshCadence,
    pub binning: StoreBinning,
    /// Applied to the cross-entropy branch only.
    pub cutmix: CutMixConfig,
    /// Required number of target-domain groups in the adaptation split.
    pub adapt_groups: usize,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            method: Method::Fretal,
            bins: BinSpec::default(),
            loss: LossConfig::default(),
            optimizer: SgdConfig::default(),
            max_epochs: 100,
            patience: 5,
            batch_size: 32,
            refresh: RefreshCadence::default(),
            binning: StoreBinning::default(),
            cutmix: CutMixConfig::default(),
            adapt_groups: ADAPT_GROUPS,
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("adaptation max_epochs and batch_size must be positive".into()));
        }
        self.bins.validate()?;
        self.loss.validate()?;
        self.cutmix.validate()
    }

    pub fn effective_loss(&self) -> LossConfig {
        self.method.loss_config(&self.loss)
    }
}

/// A frozen source-domain model.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub model: ModelHandle,
    pub source_domain: String,
    pub trace: Option<TrainingTrace>,
}

impl Teacher {
    pub fn new(mut model: ModelHandle, source_domain: impl Into<String>) -> Self {
        model.freeze();
        Self { model, source_domain: source_domain.into(), trace: None }
    }

    pub fn checkpoint(&self, seed: u64) -> Checkpoint {
        let metadata = TrainingMetadata {
            source_domain: Some(self.source_domain.clone()),
            epoch: self.trace.as_ref().map(|t| t.best_epoch),
            seed,
            ..TrainingMetadata::default()
        };
        Checkpoint::new(self.model.clone(), metadata)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let source = ck
            .metadata
            .source_domain
            .ok_or_else(|| Error::Checkpoint("teacher checkpoint does not record its source domain".into()))?;
        Ok(Self::new(ck.model, source))
    }
}

/// Result of one adaptation run: the best student by target validation F1.
#[derive(Debug, Clone)]
pub struct Adapted {
    pub student: ModelHandle,
    pub trace: TrainingTrace,
}

fn tensors(images: &[MixedSample]) -> Vec<ImageTensor> {
    images.iter().map(|m| normalize(&m.image)).collect()
}

fn passthrough(batch: &[&Sample]) -> Vec<MixedSample> {
    batch.iter().map(|s| MixedSample { image: s.image.clone(), target: s.label.one_hot(), mix: None }).collect()
}

fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn to_f32(v: [f64; 2]) -> [f32; 2] {
    [v[0] as f32, v[1] as f32]
}

/// Tracks the best model and decides when to stop.
struct Selection {
    history: Vec<f64>,
    best: ModelHandle,
    best_epoch: usize,
    patience: usize,
}

impl Selection {
    fn new(initial: &ModelHandle, patience: usize) -> Self {
        Self { history: Vec::new(), best: initial.clone(), best_epoch: 0, patience }
    }

    /// Records the score of `epoch`; returns whether training should stop.
    fn observe(&mut self, epoch: usize, score: f64, model: &ModelHandle) -> bool {
        self.history.push(score);
        if best_index(&self.history) == Some(self.history.len() - 1) {
            self.best = model.clone();
            self.best_epoch = epoch;
        }
        early_stopper(&self.history, self.patience)
    }

    fn best_score(&self) -> f64 {
        best_index(&self.history).map_or(0.0, |i| self.history[i])
    }
}

/// Trains a teacher on the source domain's teacher-train split with
/// cross-entropy (and CutMix), selects the epoch with the best source
/// validation F1, and freezes it.
pub fn train_teacher(dataset: &DomainDataset, cfg: &TeacherConfig) -> Result<Teacher> {
    cfg.validate()?;
    let train = dataset.require_split(Split::TeacherTrain)?;
    let val = dataset.require_split(Split::Validation)?;
    let mut model = ModelHandle::new(cfg.architecture.clone(), cfg.seed)?;
    let mut sgd = Sgd::new(&model, cfg.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut selection = Selection::new(&model, cfg.patience);
    let mut records = Vec::new();
    let started = Instant::now();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let mut ce_sum = 0.0;
        for idx in shuffled_batches(train.len(), cfg.batch_size, &mut rng) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| train[i]).collect();
            let mixed = if cfg.cutmix.enabled {
                cutmix(&batch, cfg.cutmix.probability, cfg.cutmix.alpha, &mut rng)?
            } else {
                passthrough(&batch)
            };
            let targets: Vec<[f64; 2]> = mixed.iter().map(|m| m.target).collect();
            let mut loss = 0.0;
            let (_, grads) = model.forward_backward(&tensors(&mixed), |outs| {
                let logits: Vec<[f64; 2]> = outs.iter().map(ModelOutput::logits_f64).collect();
                let l = soft_ce_loss_grad(&logits, &targets)?;
                loss = l.value;
                Ok(l.grad.iter().map(|g| OutputGrad::logits_only([g[0] as f32, g[1] as f32])).collect())
            })?;
            ce_sum += loss * batch.len() as f64;
            sgd.step(&mut model, &grads)?;
        }
        let ce = ce_sum / train.len() as f64;
        if !ce.is_finite() {
            return Err(Error::NumericInput(format!("teacher loss diverged at epoch {epoch}")));
        }
        let val_f1 = evaluate_samples(&model, &val, EvalOptions::default())?.f1();
        log::info!("teacher[{}] epoch {epoch}: ce {ce:.5} val F1 {val_f1:.4}", dataset.domain);
        records.push(EpochRecord {
            epoch,
            fsl: None,
            kd: None,
            ce: Some(ce),
            total: ce,
            val_f1,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        if selection.observe(epoch, val_f1, &model) {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }

    let best_val_f1 = selection.best_score();
    if best_val_f1 < cfg.min_source_f1 {
        return Err(Error::UnderTrainedTeacher { f1: best_val_f1, required: cfg.min_source_f1 });
    }
    let mut teacher = Teacher::new(selection.best, dataset.domain.clone());
    teacher.trace = Some(TrainingTrace {
        kind: "teacher".into(),
        records,
        best_epoch: selection.best_epoch,
        best_val_f1,
        stop_reason,
        source_samples_read: 0,
    });
    Ok(teacher)
}

/// Student store and, per adaptation sample, the cell it belongs to.
struct StudentStore {
    fsl: f64,
    membership: Vec<Option<usize>>,
    cell_grads: Vec<Option<Vec<f64>>>,
}

struct AdaptState<'a> {
    cfg: &'a AdaptationConfig,
    loss: LossConfig,
    samples: Vec<&'a Sample>,
    labels: Vec<Label>,
    teacher_logits: Vec<[f64; 2]>,
    teacher_conf: Vec<f64>,
    teacher_store: FeatureStore,
    source_domain: &'a str,
    source_samples_read: usize,
}

impl AdaptState<'_> {
    fn student_store(&self, student: &ModelHandle) -> Result<StudentStore> {
        let outputs = forward_samples(student, &self.samples)?;
        self.student_store_from(&outputs)
    }

    fn student_store_from(&self, outputs: &[ModelOutput]) -> Result<StudentStore> {
        let confs = match self.cfg.binning {
            StoreBinning::OwnConfidence => None,
            StoreBinning::TeacherConfidence => Some(self.teacher_conf.as_slice()),
        };
        let build = store_from_outputs(self.cfg.bins, outputs, &self.labels, confs)?;
        Ok(StudentStore {
            fsl: fsl_loss(&build.store, &self.teacher_store)?,
            cell_grads: fsl_cell_gradients(&build.store, &self.teacher_store)?,
            membership: build.membership,
        })
    }

    /// Full-pass loss terms of the current student, without augmentation.
    fn full_pass(&self, student: &ModelHandle) -> Result<LossBreakdown> {
        let method = self.cfg.method;
        let outputs = forward_samples(student, &self.samples)?;
        let logits: Vec<[f64; 2]> = outputs.iter().map(ModelOutput::logits_f64).collect();
        let fsl = if method.uses_fsl() { Some(self.student_store_from(&outputs)?.fsl) } else { None };
        let kd = if method.uses_kd() { Some(kd_loss(&self.teacher_logits, &logits, self.loss.temperature)?) } else { None };
        let ce = if method.uses_ce() {
            let idx: Vec<usize> = self.labels.iter().map(|l| l.index()).collect();
            Some(ce_loss(&logits, &idx)?)
        } else {
            None
        };
        Ok(LossBreakdown::combine(&self.loss, fsl, kd, ce))
    }

    /// One optimizer step on the batch `idx`; returns its loss terms.
    fn step(
        &mut self,
        student: &mut ModelHandle,
        sgd: &mut Sgd,
        idx: &[usize],
        store: Option<&StudentStore>,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossBreakdown> {
        let method = self.cfg.method;
        let batch: Vec<&Sample> = idx.iter().map(|&i| self.samples[i]).collect();
        let hits = batch.iter().filter(|s| &*s.domain == self.source_domain).count();
        if hits > 0 {
            self.source_samples_read += hits;
            return Err(Error::Protocol(format!("{hits} source-domain samples reached the adaptation loop")));
        }
        let b = batch.len();
        let need_clean = method.uses_kd() || method.uses_fsl();

        let mut inputs = Vec::with_capacity(2 * b);
        let mut clean_idx = Vec::new();
        if need_clean {
            inputs.extend(batch.iter().map(|s| s.tensor()));
            clean_idx.extend(0..b);
        }
        let mut ce_idx = Vec::new();
        let mut targets = Vec::new();
        if method.uses_ce() {
            let mixed = if self.cfg.cutmix.enabled {
                cutmix(&batch, self.cfg.cutmix.probability, self.cfg.cutmix.alpha, rng)?
            } else {
                passthrough(&batch)
            };
            for (i, m) in mixed.iter().enumerate() {
                if need_clean && m.mix.is_none() {
                    ce_idx.push(clean_idx[i]);
                } else {
                    inputs.push(normalize(&m.image));
                    ce_idx.push(inputs.len() - 1);
                }
                targets.push(m.target);
            }
        }

        let teacher_logits: Vec<[f64; 2]> = if method.uses_kd() { idx.iter().map(|&i| self.teacher_logits[i]).collect() } else { Vec::new() };
        // each member receives the exact partial derivative of the full-set
        // square loss, so one epoch of batches applies its gradient once
        let fsl_scale = self.loss.fsl_weight;
        let loss_cfg = self.loss;
        let mut breakdown = None;
        let (_, grads) = student.forward_backward(&inputs, |outs| {
            let student_logits: Vec<[f64; 2]> = clean_idx.iter().map(|&j| outs[j].logits_f64()).collect();
            let ce_logits: Vec<[f64; 2]> = ce_idx.iter().map(|&j| outs[j].logits_f64()).collect();
            let obj = objective(
                &loss_cfg,
                ObjectiveInputs { teacher_logits: &teacher_logits, student_logits: &student_logits, ce_logits: &ce_logits, ce_targets: &targets },
                store.map(|s| s.fsl),
                method.uses_kd(),
                method.uses_ce(),
            )?;
            let mut d_logits = vec![[0.0f64; 2]; outs.len()];
            if method.uses_kd() {
                for (i, g) in obj.d_student_logits.iter().enumerate() {
                    d_logits[clean_idx[i]][0] += g[0];
                    d_logits[clean_idx[i]][1] += g[1];
                }
            }
            for (i, g) in obj.d_ce_logits.iter().enumerate() {
                d_logits[ce_idx[i]][0] += g[0];
                d_logits[ce_idx[i]][1] += g[1];
            }
            let mut out: Vec<OutputGrad> = d_logits.into_iter().map(|g| OutputGrad::logits_only(to_f32(g))).collect();
            if let Some(store) = store {
                for (i, &sample) in idx.iter().enumerate() {
                    if let Some(g) = store.membership[sample].and_then(|c| store.cell_grads[c].as_ref()) {
                        out[clean_idx[i]].d_features = Some(g.iter().map(|v| (fsl_scale * v) as f32).collect());
                    }
                }
            }
            breakdown = Some(obj.breakdown);
            Ok(out)
        })?;
        sgd.step(student, &grads)?;
        breakdown.ok_or_else(|| Error::BatchContract("objective was not evaluated".into()))
    }
}

/// Batch-size-weighted mean of per-batch loss terms.
#[derive(Default)]
struct TermMeans {
    fsl: f64,
    kd: f64,
    ce: f64,
    n: usize,
}

impl TermMeans {
    fn add(&mut self, b: &LossBreakdown, size: usize) {
        let w = size as f64;
        self.fsl += b.fsl.unwrap_or(0.0) * w;
        self.kd += b.kd.unwrap_or(0.0) * w;
        self.ce += b.ce.unwrap_or(0.0) * w;
        self.n += size;
    }

    fn breakdown(&self, method: Method, cfg: &LossConfig) -> LossBreakdown {
        let n = self.n.max(1) as f64;
        LossBreakdown::combine(
            cfg,
            method.uses_fsl().then_some(self.fsl / n),
            method.uses_kd().then_some(self.kd / n),
            method.uses_ce().then_some(self.ce / n),
        )
    }
}

/// Adapts a copy of the frozen teacher to `target` using only the target's
/// adaptation and validation splits.
///
/// The returned student is the epoch with the best target validation F1
/// (epoch 0 being the unmodified copy). Fails with a protocol error when
/// the teacher is trainable, when the adaptation split does not hold
/// exactly `adapt_groups` groups, or when any input sample belongs to the
/// teacher's source domain.
pub fn adapt_student(teacher: &Teacher, target: &DomainDataset, cfg: &AdaptationConfig) -> Result<Adapted> {
    adapt_student_observed(teacher, target, cfg, |_, _| Ok(()))
}

/// [`adapt_student`] calling `observer(epoch, student)` after every epoch,
/// including epoch 0.
pub fn adapt_student_observed<F>(teacher: &Teacher, target: &DomainDataset, cfg: &AdaptationConfig, mut observer: F) -> Result<Adapted>
where
    F: FnMut(usize, &ModelHandle) -> Result<()>,
{
    cfg.validate()?;
    if teacher.model.is_trainable() {
        return Err(Error::Protocol("the teacher must be frozen before adaptation".into()));
    }
    let adapt = target.require_split(Split::Adapt)?;
    let val = target.require_split(Split::Validation)?;
    let groups = target.num_groups(Split::Adapt);
    if groups != cfg.adapt_groups {
        return Err(Error::Protocol(format!(
            "adaptation split of '{}' has {groups} groups, expected exactly {}",
            target.domain, cfg.adapt_groups
        )));
    }
    let source_hits = adapt.iter().chain(&val).filter(|s| *s.domain == *teacher.source_domain).count();
    if source_hits > 0 {
        return Err(Error::Protocol(format!(
            "{source_hits} samples of the teacher's source domain '{}' in the adaptation inputs",
            teacher.source_domain
        )));
    }

    let teacher_hash = teacher.model.parameter_hash();
    let teacher_out = forward_samples(&teacher.model, &adapt)?;
    let labels: Vec<Label> = adapt.iter().map(|s| s.label).collect();
    let teacher_store = store_from_outputs(cfg.bins, &teacher_out, &labels, None)?.store;
    let teacher_store_hash = teacher_store.content_hash();
    let mut state = AdaptState {
        cfg,
        loss: cfg.effective_loss(),
        samples: adapt,
        labels,
        teacher_logits: teacher_out.iter().map(ModelOutput::logits_f64).collect(),
        teacher_conf: teacher_out.iter().map(ModelOutput::confidence).collect(),
        teacher_store,
        source_domain: &teacher.source_domain,
        source_samples_read: 0,
    };

    let mut student = teacher.model.trainable_clone();
    let mut sgd = Sgd::new(&student, cfg.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let started = Instant::now();
    let method = cfg.method;

    let initial = state.full_pass(&student)?;
    let val_f1 = evaluate_samples(&student, &val, EvalOptions::default())?.f1();
    let mut records = vec![EpochRecord {
        epoch: 0,
        fsl: initial.fsl,
        kd: initial.kd,
        ce: initial.ce,
        total: initial.total,
        val_f1,
        wall_seconds: started.elapsed().as_secs_f64(),
    }];
    let mut selection = Selection::new(&student, cfg.patience);
    selection.observe(0, val_f1, &student);
    observer(0, &student)?;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let mut means = TermMeans::default();
        let mut diverged = false;
        let mut store = match (method.uses_fsl(), cfg.refresh) {
            (true, RefreshCadence::PerEpoch) => match state.student_store(&student) {
                Ok(s) => Some(s),
                Err(Error::NumericInput(_)) => {
                    stop_reason = StopReason::Diverged;
                    break;
                }
                Err(e) => return Err(e),
            },
            _ => None,
        };
        for idx in shuffled_batches(state.samples.len(), cfg.batch_size, &mut rng) {
            if method.uses_fsl() && cfg.refresh == RefreshCadence::PerBatch {
                store = Some(state.student_store(&student)?);
            }
            match state.step(&mut student, &mut sgd, &idx, store.as_ref(), &mut rng) {
                Ok(b) if b.total.is_finite() => means.add(&b, idx.len()),
                Ok(_) | Err(Error::NumericInput(_)) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if diverged {
            log::warn!("{method}[{} -> {}] diverged in epoch {epoch}; keeping epoch {}", teacher.source_domain, target.domain, selection.best_epoch);
            stop_reason = StopReason::Diverged;
            break;
        }
        let terms = means.breakdown(method, &state.loss);
        let val_f1 = evaluate_samples(&student, &val, EvalOptions::default())?.f1();
        log::info!(
            "{method}[{} -> {}] epoch {epoch}: total {:.6} val F1 {val_f1:.4}",
            teacher.source_domain,
            target.domain,
            terms.total
        );
        records.push(EpochRecord {
            epoch,
            fsl: terms.fsl,
            kd: terms.kd,
            ce: terms.ce,
            total: terms.total,
            val_f1,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        observer(epoch, &student)?;
        if selection.observe(epoch, val_f1, &student) {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }

    if teacher.model.parameter_hash() != teacher_hash || state.teacher_store.content_hash() != teacher_store_hash {
        return Err(Error::Protocol("teacher parameters or feature store changed during adaptation".into()));
    }
    let best_val_f1 = selection.best_score();
    Ok(Adapted {
        student: selection.best,
        trace: TrainingTrace {
            kind: method.as_str().into(),
            records,
            best_epoch: selection.best_epoch,
            best_val_f1,
            stop_reason,
            source_samples_read: state.source_samples_read,
        },
    })
}

/// Stores used by [`fretal_loss`].
#[derive(Debug, Clone)]
pub struct Stores {
    pub teacher: FeatureStore,
    pub student: FeatureStore,
}

/// Value of the combined objective on an un-augmented batch with
/// hard-label cross-entropy and the square loss between `stores`.
pub fn fretal_loss(batch: &[&Sample], teacher: &ModelHandle, student: &ModelHandle, stores: &Stores, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyInput("loss batch is empty".into()));
    }
    let t: Vec<[f64; 2]> = forward_samples(teacher, batch)?.iter().map(ModelOutput::logits_f64).collect();
    let s: Vec<[f64; 2]> = forward_samples(student, batch)?.iter().map(ModelOutput::logits_f64).collect();
    let labels: Vec<usize> = batch.iter().map(|x| x.label.index()).collect();
    let fsl = fsl_loss(&stores.student, &stores.teacher)?;
    let kd = kd_loss(&t, &s, cfg.temperature)?;
    let ce = ce_loss(&s, &labels)?;
    Ok(LossBreakdown::combine(cfg, Some(fsl), Some(kd), Some(ce)))
}
