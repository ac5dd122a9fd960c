use std::path::PathBuf;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{save_trainer, Example, StepStats, Task, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::hiermodel::classifier::document_loss;
use crate::hiermodel::{doc_ctx, transfer_base, BaseVars, ClassifierConfig, ClassifierVars, HierModel, ModelConfig};
use crate::jsonl::Appender;
use crate::numerics::{Real, RngStream, Tape};
use crate::reformer::CallCtx;
use crate::textpipe::Document;

/// Where a run writes its step log and trainer checkpoints.
#[derive(Debug, Clone, Default)]
pub struct Outputs {
    pub log: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

/// Epoch-wise shuffled document stream; position `k` of the stream is a pure
/// function of the seed, so a resumed run sees the same order.
struct Order {
    n: usize,
    seed: u64,
    epoch: Option<(usize, Vec<usize>)>,
}

impl Order {
    fn new(n: usize, seed: u64) -> Self {
        Order { n, seed, epoch: None }
    }

    fn at(&mut self, k: u64) -> usize {
        let e = (k / self.n as u64) as usize;
        if self.epoch.as_ref().is_none_or(|(have, _)| *have != e) {
            let mut perm: Vec<usize> = (0..self.n).collect();
            perm.shuffle(&mut RngStream::new(self.seed, "shuffle").derive(e).rng());
            self.epoch = Some((e, perm));
        }
        self.epoch.as_ref().unwrap().1[(k % self.n as u64) as usize]
    }
}

/// Trains until `until` optimizer steps have been taken, calling `on_step`
/// after each one.
pub fn run_steps<T: Real>(
    trainer: &mut Trainer<T>,
    data: &[Example<'_>],
    until: u64,
    out: &Outputs,
    mut on_step: impl FnMut(&Trainer<T>, &StepStats) -> Result<()>,
) -> Result<Vec<StepStats>> {
    if data.is_empty() {
        return Err(Error::Data("no training documents".into()));
    }
    let mut log = out.log.as_deref().map(Appender::append).transpose()?;
    let mut order = Order::new(data.len(), trainer.cfg.seed);
    let (b, m) = (trainer.cfg.batch_size_effective, trainer.cfg.micro_batch);
    let mut stats = Vec::new();
    while trainer.step() < until {
        let first = trainer.step() * b as u64;
        let mut done = None;
        for j in 0..trainer.cfg.accumulation() {
            let micro: Vec<Example<'_>> = (0..m)
                .map(|i| data[order.at(first + (j * m + i) as u64)])
                .collect();
            done = trainer.train_step(&micro)?;
        }
        let s = done.expect("an optimizer step after a full effective batch");
        if let Some(w) = log.as_mut() {
            if s.step % trainer.cfg.log_every == 0 || s.step == until {
                w.push(&s)?;
                w.flush()?;
            }
        }
        if let (Some(dir), Some(every)) = (&out.checkpoint_dir, trainer.cfg.checkpoint_every) {
            if s.step % every == 0 {
                save_trainer(trainer, dir)?;
            }
        }
        on_step(trainer, &s)?;
        stats.push(s);
    }
    Ok(stats)
}

/// Masked-sentence pretraining over `corpus` from a model carrying the
/// pretraining head. Returns the final trainer and its step log.
pub fn run_pretraining<T: Real>(
    corpus: &[Document],
    model: HierModel<T>,
    cfg: TrainConfig,
    out: &Outputs,
) -> Result<(Trainer<T>, Vec<StepStats>)> {
    if corpus.is_empty() {
        return Err(Error::Data("empty pretraining corpus".into()));
    }
    if cfg.task != Task::Pretrain {
        return Err(Error::Config("run_pretraining needs task = pretrain".into()));
    }
    let total = cfg.total_steps(corpus.len());
    let mut t = Trainer::new(model, cfg, total)?;
    let data: Vec<Example<'_>> = corpus.iter().map(Example::unlabeled).collect();
    let stats = run_steps(&mut t, &data, total, out, |_, _| Ok(()))?;
    if let Some(dir) = &out.checkpoint_dir {
        save_trainer(&t, dir)?;
    }
    Ok((t, stats))
}

/// How the encoder of a finetuning model is initialized.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Random,
    Checkpoint(PathBuf),
}

/// A classifier model whose encoder is fresh or transferred from a
/// pretraining checkpoint, with a fresh classifier head.
pub fn finetune_model<T: Real>(cfg: &ModelConfig, init: &Init, seed: u64) -> Result<HierModel<T>> {
    let model = match init {
        Init::Random => HierModel::new(cfg.clone(), seed)?,
        Init::Checkpoint(path) => {
            if !path.exists() {
                return Err(Error::Data(format!("checkpoint {} not found", path.display())));
            }
            let src = super::load_model::<T>(path)?;
            cfg.validate()?;
            HierModel {
                cfg: cfg.clone(),
                params: transfer_base(&src.params, cfg)?,
            }
        }
    };
    Ok(model.with_classifier_head(seed))
}

/// Mean classification objective over `data` in inference mode.
pub fn validation_loss<T: Real>(
    model: &HierModel<T>,
    data: &[Example<'_>],
    ccfg: &ClassifierConfig,
    lsh_seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("empty validation set".into()));
    }
    let losses: Vec<f64> = data
        .par_iter()
        .map(|ex| -> Result<f64> {
            let label = ex
                .label
                .ok_or_else(|| Error::Contract(format!("document {} has no label", ex.doc.meta.doc_id)))?;
            let tape = Tape::new();
            let b = model.params.bind(&tape, |_| false);
            let base = BaseVars::bind(&b, &model.cfg)?;
            let head = ClassifierVars::bind(&b)?;
            let ctx = doc_ctx(&CallCtx::eval(lsh_seed), ex.doc);
            let (loss, _) = document_loss(ex.doc, label, &base, &head, &model.cfg, ccfg, &ctx)?;
            Ok(loss.value().item().f64())
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ValRecord {
    pub step: u64,
    pub epoch: f64,
    /// Mean training loss over the steps since the previous record.
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<T: Real> {
    /// Parameters at the lowest validation loss.
    pub best: HierModel<T>,
    pub best_step: u64,
    pub trace: Vec<ValRecord>,
    pub log: Vec<StepStats>,
}

/// Finetunes on `train`, validating at every epoch end (and every
/// `eval_every` steps when set), and keeps the best-validation model.
pub fn run_finetune<T: Real>(
    train: &[Example<'_>],
    val: &[Example<'_>],
    model: HierModel<T>,
    cfg: TrainConfig,
    out: &Outputs,
) -> Result<FinetuneOutcome<T>> {
    if cfg.task != Task::Finetune {
        return Err(Error::Config("run_finetune needs task = finetune".into()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("finetuning needs non-empty train and validation splits".into()));
    }
    let total = cfg.total_steps(train.len());
    let per_epoch = cfg.steps_per_epoch(train.len());
    let ccfg = cfg.classifier();
    let lsh_seed = cfg.seed;
    let mut t = Trainer::new(model, cfg, total)?;
    let mut trace = Vec::new();
    let mut best: Option<(f64, u64, HierModel<T>)> = None;
    let mut since = Vec::new();
    let log = run_steps(&mut t, train, total, out, |tr, s| {
        since.push(s.loss);
        let due = s.step % per_epoch == 0
            || s.step == total
            || tr.cfg.eval_every.is_some_and(|n| s.step % n == 0);
        if due {
            let val_loss = validation_loss(&tr.model, val, &ccfg, lsh_seed)?;
            trace.push(ValRecord {
                step: s.step,
                epoch: s.step as f64 / per_epoch as f64,
                train_loss: since.iter().sum::<f64>() / since.len() as f64,
                val_loss,
            });
            since.clear();
            if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
                best = Some((val_loss, s.step, tr.model.clone()));
            }
        }
        Ok(())
    })?;
    if let Some(dir) = &out.checkpoint_dir {
        save_trainer(&t, dir)?;
    }
    let (_, best_step, best) = best.ok_or_else(|| Error::Config("finetuning ran zero steps".into()))?;
    Ok(FinetuneOutcome {
        best,
        best_step,
        trace,
        log,
    })
}
