//! Pretraining and finetuning loops.

pub mod checkpoint;
mod run;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hiermodel::classifier::bce_l1;
use crate::hiermodel::{
    classifier_forward, doc_ctx, pretrain_loss, BaseVars, ClassifierConfig, ClassifierVars,
    HierModel, L1Queries, L1Target, PretrainConfig, PretrainVars, BASE,
};
use crate::numerics::params::{accumulate, grad_norm, scale_grads};
use crate::numerics::rng::mix;
use crate::numerics::{adamw_step, AdamWConfig, GradMap, OptimizerState, Real, RngStream, Tape};
use crate::reformer::CallCtx;
use crate::textpipe::Document;

pub use checkpoint::{load_model, load_trainer, save_model, save_trainer};
pub use run::{
    finetune_model, run_finetune, run_pretraining, run_steps, validation_loss, FinetuneOutcome,
    Init, Outputs, ValRecord,
};

pub const PRETRAIN_LR: f64 = 2e-4;
pub const FINETUNE_LR: f64 = 2e-5;
pub const FROZEN_FINETUNE_LR: f64 = 3e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Pretrain,
    Finetune,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Pretrain => "pretrain",
            Task::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Linear,
    Cosine,
}

/// Linear decay from `lr_peak` at step 0 to zero at `total_steps`.
pub fn lr_linear(step: u64, total_steps: u64, lr_peak: f64) -> f64 {
    if total_steps == 0 {
        return lr_peak;
    }
    lr_peak * (1.0 - step.min(total_steps) as f64 / total_steps as f64)
}

pub fn lr_cosine(step: u64, total_steps: u64, lr_peak: f64) -> f64 {
    if total_steps == 0 {
        return lr_peak;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr_peak * 0.5 * (1.0 + (PI * t).cos())
}

/// Learning rate for optimizer step `step` (0-based), with optional linear warmup.
pub fn lr_at(schedule: Schedule, warmup: u64, step: u64, total_steps: u64, lr_peak: f64) -> f64 {
    if step < warmup {
        return lr_peak * (step + 1) as f64 / warmup as f64;
    }
    let (s, n) = (step - warmup, total_steps.saturating_sub(warmup));
    match schedule {
        Schedule::Linear => lr_linear(s, n, lr_peak),
        Schedule::Cosine => lr_cosine(s, n, lr_peak),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub task: Task,
    /// `None` picks the task default (2e-4 pretraining; 3e-6 frozen or 2e-5 finetuning).
    pub lr_peak: Option<f64>,
    /// `None` picks linear for pretraining and cosine for finetuning.
    pub schedule: Option<Schedule>,
    pub warmup_steps: u64,
    pub batch_size_effective: usize,
    pub micro_batch: usize,
    /// `None` picks 1 for pretraining and 2 for finetuning.
    pub epochs: Option<f64>,
    /// Overrides the epoch-derived step count.
    pub total_steps: Option<u64>,
    pub freeze_base: bool,
    pub l1_lambda: f64,
    pub l1_target: L1Target,
    pub l1_queries: L1Queries,
    pub mask_ratio: f64,
    pub keep_boundaries: bool,
    pub clip_norm: Option<f64>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: Option<u64>,
    /// Extra validation passes every N steps (finetuning also validates at each epoch end).
    pub eval_every: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        TrainConfig {
            task: Task::Pretrain,
            lr_peak: None,
            schedule: None,
            warmup_steps: 0,
            batch_size_effective: 32,
            micro_batch: 1,
            epochs: None,
            total_steps: None,
            freeze_base: false,
            l1_lambda: ClassifierConfig::default().l1_lambda,
            l1_target: L1Target::Weights,
            l1_queries: L1Queries::First,
            mask_ratio: PretrainConfig::default().mask_ratio,
            keep_boundaries: false,
            clip_norm: Some(1.0),
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            seed: 0,
            log_every: 1,
            checkpoint_every: None,
            eval_every: None,
        }
    }
}

impl TrainConfig {
    pub fn finetune() -> Self {
        TrainConfig {
            task: Task::Finetune,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.micro_batch == 0 || self.batch_size_effective == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.batch_size_effective % self.micro_batch != 0 {
            return Err(Error::Config(format!(
                "batch_size_effective {} is not divisible by micro_batch {}",
                self.batch_size_effective, self.micro_batch
            )));
        }
        if self.lr_peak.is_some_and(|lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("lr_peak must be positive".into()));
        }
        if self.epochs.is_some_and(|e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        self.adam().validate()?;
        self.pretrain().validate()?;
        if !(self.l1_lambda >= 0.0) {
            return Err(Error::Config("l1_lambda must be non-negative".into()));
        }
        Ok(())
    }

    pub fn lr(&self) -> f64 {
        self.lr_peak.unwrap_or(match (self.task, self.freeze_base) {
            (Task::Pretrain, _) => PRETRAIN_LR,
            (Task::Finetune, true) => FROZEN_FINETUNE_LR,
            (Task::Finetune, false) => FINETUNE_LR,
        })
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule.unwrap_or(match self.task {
            Task::Pretrain => Schedule::Linear,
            Task::Finetune => Schedule::Cosine,
        })
    }

    pub fn epochs(&self) -> f64 {
        self.epochs.unwrap_or(match self.task {
            Task::Pretrain => 1.0,
            Task::Finetune => 2.0,
        })
    }

    pub fn accumulation(&self) -> usize {
        self.batch_size_effective / self.micro_batch
    }

    pub fn steps_per_epoch(&self, n_docs: usize) -> u64 {
        n_docs.div_ceil(self.batch_size_effective) as u64
    }

    pub fn total_steps(&self, n_docs: usize) -> u64 {
        self.total_steps.unwrap_or_else(|| {
            ((self.epochs() * n_docs as f64) / self.batch_size_effective as f64).ceil() as u64
        })
    }

    pub fn adam(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr(),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn classifier(&self) -> ClassifierConfig {
        ClassifierConfig {
            l1_lambda: self.l1_lambda,
            l1_target: self.l1_target,
            l1_queries: self.l1_queries,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            mask_ratio: self.mask_ratio,
            keep_boundaries: self.keep_boundaries,
        }
    }

    /// Whether parameter `path` is updated under this configuration.
    pub fn trains(&self, path: &str) -> bool {
        !(self.freeze_base && path.starts_with(&format!("{BASE}.")))
    }
}

/// One training document; `label` is required for finetuning.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub doc: &'a Document,
    pub label: Option<u8>,
}

impl<'a> Example<'a> {
    pub fn unlabeled(doc: &'a Document) -> Self {
        Example { doc, label: None }
    }

    pub fn labeled(doc: &'a Document, label: u8) -> Self {
        Example {
            doc,
            label: Some(label),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub task: Task,
}

#[derive(Debug, Clone)]
struct Pending<T: Real> {
    grads: GradMap<T>,
    loss_sum: f64,
    micro_steps: usize,
}

/// Model, optimizer and accumulation state of one training run.
#[derive(Debug, Clone)]
pub struct Trainer<T: Real> {
    pub model: HierModel<T>,
    pub opt: OptimizerState<T>,
    pub cfg: TrainConfig,
    pub total_steps: u64,
    pending: Option<Pending<T>>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: HierModel<T>, cfg: TrainConfig, total_steps: u64) -> Result<Self> {
        cfg.validate()?;
        let needs = match cfg.task {
            Task::Pretrain => "pretrain.w_ff",
            Task::Finetune => "cls.mlp.w1",
        };
        if !model.params.contains(needs) {
            return Err(Error::Contract(format!(
                "{} training needs a model with its head ({needs} missing)",
                cfg.task
            )));
        }
        Ok(Trainer {
            opt: OptimizerState::new(cfg.adam()),
            model,
            cfg,
            total_steps,
            pending: None,
        })
    }

    pub(crate) fn from_parts(
        model: HierModel<T>,
        opt: OptimizerState<T>,
        cfg: TrainConfig,
        total_steps: u64,
    ) -> Self {
        Trainer {
            model,
            opt,
            cfg,
            total_steps,
            pending: None,
        }
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.opt.step
    }

    /// Micro-batches accumulated since the last optimizer step.
    pub fn pending_micro_steps(&self) -> usize {
        self.pending.as_ref().map_or(0, |p| p.micro_steps)
    }

    pub fn lr(&self) -> f64 {
        lr_at(
            self.cfg.schedule(),
            self.cfg.warmup_steps,
            self.step(),
            self.total_steps,
            self.cfg.lr(),
        )
    }

    /// Training-mode call context of the document at `position` within the
    /// effective batch of the current optimizer step.
    pub fn call_ctx(&self, position: usize) -> CallCtx {
        let parts = [self.step(), position as u64];
        CallCtx {
            lsh: RngStream::new(self.cfg.seed, "lsh").derive_n(&parts),
            dropout_key: mix(
                RngStream::new(self.cfg.seed, "dropout").key(),
                mix(parts[0], parts[1]),
            ),
            train: true,
        }
    }

    fn mask_rng(&self, position: usize) -> RngStream {
        RngStream::new(self.cfg.seed, "mask").derive_n(&[self.step(), position as u64])
    }

    /// Loss and parameter gradients of one micro-batch (mean over its documents).
    pub fn micro_grads(&self, micro: &[Example<'_>], first_position: usize) -> Result<(f64, GradMap<T>)> {
        if micro.is_empty() {
            return Err(Error::Contract("empty micro-batch".into()));
        }
        let tape = Tape::new();
        let b = self.model.params.bind(&tape, |p| self.cfg.trains(p));
        let base = BaseVars::bind(&b, &self.model.cfg)?;
        let mut losses = Vec::with_capacity(micro.len());
        for (i, ex) in micro.iter().enumerate() {
            let pos = first_position + i;
            let ctx = doc_ctx(&self.call_ctx(pos), ex.doc);
            let loss = match self.cfg.task {
                Task::Pretrain => {
                    let head = PretrainVars::bind(&b)?;
                    pretrain_loss(
                        ex.doc,
                        &base,
                        &head,
                        &self.model.cfg,
                        &self.cfg.pretrain(),
                        &self.mask_rng(pos),
                        &ctx,
                    )?
                }
                Task::Finetune => {
                    let label = ex.label.ok_or_else(|| {
                        Error::Contract(format!("document {} has no label", ex.doc.meta.doc_id))
                    })?;
                    let head = ClassifierVars::bind(&b)?;
                    let enc = crate::hiermodel::base_forward(ex.doc, &base, &self.model.cfg, &ctx)?;
                    let out = classifier_forward(enc, &head, &self.model.cfg, &self.cfg.classifier(), &ctx)?;
                    bce_l1(out.prob, out.l1_source, label, out.l1_lambda)?
                }
            };
            losses.push(loss);
        }
        let total = losses[1..]
            .iter()
            .try_fold(losses[0], |acc, l| acc.add(*l))?
            .scale(1.0 / micro.len() as f64);
        let value = total.value().item().f64();
        if !value.is_finite() {
            return Err(self.non_finite(micro));
        }
        let grads = b.grads(&tape.backward(total)?);
        Ok((value, grads))
    }

    fn non_finite(&self, docs: &[Example<'_>]) -> Error {
        Error::NonFinite {
            step: self.step() as usize,
            docs: docs.iter().map(|e| e.doc.meta.doc_id.clone()).collect(),
        }
    }

    /// Feeds one micro-batch. Every `batch_size_effective / micro_batch`
    /// calls the averaged gradient is applied and the step's stats returned.
    pub fn train_step(&mut self, micro: &[Example<'_>]) -> Result<Option<StepStats>> {
        if micro.len() != self.cfg.micro_batch {
            return Err(Error::Contract(format!(
                "micro-batch of {} documents, expected {}",
                micro.len(),
                self.cfg.micro_batch
            )));
        }
        let done = self.pending_micro_steps();
        let (loss, grads) = self.micro_grads(micro, done * self.cfg.micro_batch)?;
        let p = self.pending.get_or_insert_with(|| Pending {
            grads: GradMap::new(),
            loss_sum: 0.0,
            micro_steps: 0,
        });
        accumulate(&mut p.grads, grads);
        p.loss_sum += loss;
        p.micro_steps += 1;
        if p.micro_steps < self.cfg.accumulation() {
            return Ok(None);
        }
        let Pending {
            mut grads,
            loss_sum,
            micro_steps,
        } = self.pending.take().expect("pending set above");
        scale_grads(&mut grads, 1.0 / micro_steps as f64);
        let norm = grad_norm(&grads);
        if !norm.is_finite() {
            return Err(self.non_finite(micro));
        }
        if let Some(c) = self.cfg.clip_norm {
            if norm > c {
                scale_grads(&mut grads, c / norm);
            }
        }
        let lr = self.lr();
        self.opt.hyper.lr = lr;
        adamw_step(&mut self.model.params, &grads, &mut self.opt)?;
        Ok(Some(StepStats {
            step: self.step(),
            lr,
            loss: loss_sum / micro_steps as f64,
            task: self.cfg.task,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hiermodel::tests::{doc, tiny_cfg};

    #[test]
    fn schedules() {
        assert_eq!(lr_linear(0, 100, 2e-4), 2e-4);
        assert!((lr_linear(50, 100, 2e-4) - 1e-4).abs() < 1e-18);
        assert_eq!(lr_linear(100, 100, 2e-4), 0.0);
        assert_eq!(lr_cosine(0, 100, 1.0), 1.0);
        assert!(lr_cosine(100, 100, 1.0).abs() < 1e-15);
        assert!((lr_cosine(50, 100, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(lr_at(Schedule::Linear, 0, 0, 10, 1.0), 1.0);
        assert!((lr_at(Schedule::Linear, 4, 1, 14, 1.0) - 0.5).abs() < 1e-15);
        assert!((lr_at(Schedule::Linear, 4, 9, 14, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn task_defaults() {
        let mut c = TrainConfig::finetune();
        assert_eq!(c.lr(), 2e-5);
        c.freeze_base = true;
        assert_eq!(c.lr(), 3e-6);
        assert_eq!(c.epochs(), 2.0);
        assert_eq!(c.schedule(), Schedule::Cosine);
        let p = TrainConfig::default();
        assert_eq!((p.lr(), p.epochs(), p.schedule()), (2e-4, 1.0, Schedule::Linear));
        let bad = TrainConfig {
            batch_size_effective: 6,
            micro_batch: 4,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    fn docs() -> Vec<Document> {
        (0..4)
            .map(|i| {
                doc(
                    &format!("d{i}"),
                    &[&[5 + i, 6, 7], &[8, 9 + i], &[10, 11, 12, 13], &[14 + i]],
                )
            })
            .collect()
    }

    fn trainer(task: Task, micro: usize, freeze: bool) -> Trainer<f64> {
        let m = HierModel::<f64>::new(tiny_cfg(), 1).unwrap();
        let m = match task {
            Task::Pretrain => m.with_pretrain_head(2),
            Task::Finetune => m.with_classifier_head(2),
        };
        let cfg = TrainConfig {
            task,
            micro_batch: micro,
            batch_size_effective: 4,
            lr_peak: Some(1e-2),
            freeze_base: freeze,
            mask_ratio: 0.5,
            ..Default::default()
        };
        Trainer::new(m, cfg, 10).unwrap()
    }

    fn examples(d: &[Document]) -> Vec<Example<'_>> {
        d.iter()
            .enumerate()
            .map(|(i, d)| Example::labeled(d, (i % 2) as u8))
            .collect()
    }

    #[test]
    fn steps_once_per_effective_batch() {
        let d = docs();
        let ex = examples(&d);
        let mut t = trainer(Task::Pretrain, 1, false);
        for (i, e) in ex.iter().enumerate() {
            let r = t.train_step(std::slice::from_ref(e)).unwrap();
            assert_eq!(r.is_some(), i == 3);
        }
        assert_eq!(t.step(), 1);
    }

    #[test]
    fn accumulation_matches_large_batch() {
        let d = docs();
        let ex = examples(&d);
        for task in [Task::Pretrain, Task::Finetune] {
            let mut small = trainer(task, 1, false);
            for e in &ex {
                small.train_step(std::slice::from_ref(e)).unwrap();
            }
            let mut big = trainer(task, 4, false);
            big.train_step(&ex).unwrap().unwrap();
            for (p, a) in small.model.params.iter() {
                let b = big.model.params.get(p).unwrap();
                for (x, y) in a.data().iter().zip(b.data()) {
                    let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-12);
                    assert!(rel < 1e-6, "{task} {p}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn frozen_base_is_untouched() {
        let d = docs();
        let ex = examples(&d);
        let mut t = trainer(Task::Finetune, 4, true);
        let before = t.model.params.clone();
        t.train_step(&ex).unwrap().unwrap();
        for (p, a) in before.iter() {
            let b = t.model.params.get(p).unwrap();
            if p.starts_with("base.") {
                assert_eq!(a, b, "{p} moved");
                assert!(!t.opt.first_moment.contains_key(p));
            } else {
                assert_ne!(a, b, "{p} did not move");
            }
        }
    }

    #[test]
    fn non_finite_loss_names_the_documents() {
        let d = docs();
        let ex = examples(&d);
        let mut t = trainer(Task::Finetune, 4, false);
        t.model.params.get_mut("cls.mlp.b2").unwrap().data_mut()[0] = f64::NAN;
        match t.train_step(&ex) {
            Err(Error::NonFinite { step, docs }) => {
                assert_eq!(step, 0);
                assert_eq!(docs, vec!["d0", "d1", "d2", "d3"]);
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn missing_label_is_a_contract_error() {
        let d = docs();
        let mut t = trainer(Task::Finetune, 1, false);
        let r = t.train_step(&[Example::unlabeled(&d[0])]);
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
