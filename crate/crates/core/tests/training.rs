use chrono::NaiveDate;
use hierformer::hiermodel::{HierModel, ModelConfig};
use hierformer::numerics::Real;
use hierformer::textpipe::{DocMeta, Document, TokenizedSentence, BOS, EOS};
use hierformer::training::{
    finetune_model, load_trainer, run_pretraining, run_steps, save_trainer, Example, Init, Outputs,
    StepStats, Task, TrainConfig,
};
use hierformer::Error;

fn cfg() -> ModelConfig {
    ModelConfig {
        vocab_size: 32,
        model_dim: 32,
        n_heads: 4,
        ff_dim: 64,
        word_layers: 2,
        sentence_layers: 2,
        max_words: 16,
        max_sentences: 8,
        word_chunk: 4,
        sentence_chunk: 4,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

/// Document `i` repeats pool sentence `i mod 6`, so any unmasked sentence
/// reveals a masked one.
fn corpus(n: usize) -> Vec<Document> {
    let pool: Vec<Vec<u32>> = (0..6u32)
        .map(|k| (0..4).map(|j| 5 + (k * 4 + j) % 27).collect())
        .collect();
    (0..n)
        .map(|i| Document {
            meta: DocMeta {
                doc_id: format!("doc{i}"),
                ticker: "TCK".into(),
                filing_date: NaiveDate::from_ymd_opt(2016, 1, 4).unwrap(),
                doc_type: "mda".into(),
            },
            sentences: (0..5)
                .map(|_| {
                    let mut ids = vec![BOS];
                    ids.extend(&pool[i % pool.len()]);
                    ids.push(EOS);
                    TokenizedSentence::new(ids).unwrap()
                })
                .collect(),
        })
        .collect()
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        lr_peak: Some(1e-2),
        batch_size_effective: 4,
        micro_batch: 2,
        mask_ratio: 0.2,
        weight_decay: 0.0,
        seed: 11,
        ..Default::default()
    }
}

fn losses(s: &[StepStats]) -> Vec<u64> {
    s.iter().map(|x| x.loss.to_bits()).collect()
}

fn params_bits<T: Real>(m: &HierModel<T>) -> Vec<(String, Vec<f64>)> {
    m.params
        .iter()
        .map(|(k, v)| (k.clone(), v.data().iter().map(|x| x.f64()).collect()))
        .collect()
}

#[test]
fn same_seeds_same_losses() {
    let docs = corpus(8);
    let run = || {
        let m = HierModel::<f64>::new(cfg(), 1).unwrap().with_pretrain_head(1);
        let c = TrainConfig {
            total_steps: Some(5),
            ..train_cfg()
        };
        run_pretraining(&docs, m, c, &Outputs::default()).unwrap()
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(losses(&sa), losses(&sb));
    assert_eq!(params_bits(&a.model), params_bits(&b.model));
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let docs = corpus(6);
    let data: Vec<Example<'_>> = docs.iter().map(Example::unlabeled).collect();
    let dir = tempfile::tempdir().unwrap();
    let c = TrainConfig {
        total_steps: Some(6),
        ..train_cfg()
    };
    let m = HierModel::<f64>::new(cfg(), 2).unwrap().with_pretrain_head(2);
    let (full, full_stats) = run_pretraining(&docs, m.clone(), c.clone(), &Outputs::default()).unwrap();

    let mut t = hierformer::training::Trainer::new(m, c, 6).unwrap();
    let mut stats = run_steps(&mut t, &data, 3, &Outputs::default(), |_, _| Ok(())).unwrap();
    save_trainer(&t, dir.path()).unwrap();
    drop(t);
    let mut back = load_trainer::<f64>(dir.path()).unwrap();
    assert_eq!(back.step(), 3);
    stats.extend(run_steps(&mut back, &data, 6, &Outputs::default(), |_, _| Ok(())).unwrap());
    assert_eq!(losses(&stats), losses(&full_stats));
    assert_eq!(params_bits(&back.model), params_bits(&full.model));
}

#[test]
fn resume_in_single_precision_stays_close() {
    let docs = corpus(6);
    let data: Vec<Example<'_>> = docs.iter().map(Example::unlabeled).collect();
    let dir = tempfile::tempdir().unwrap();
    let c = TrainConfig {
        total_steps: Some(4),
        ..train_cfg()
    };
    let m = HierModel::<f32>::new(cfg(), 2).unwrap().with_pretrain_head(2);
    let (_, full) = run_pretraining(&docs, m.clone(), c.clone(), &Outputs::default()).unwrap();
    let mut t = hierformer::training::Trainer::new(m, c, 4).unwrap();
    let mut stats = run_steps(&mut t, &data, 2, &Outputs::default(), |_, _| Ok(())).unwrap();
    save_trainer(&t, dir.path()).unwrap();
    let mut back = load_trainer::<f32>(dir.path()).unwrap();
    stats.extend(run_steps(&mut back, &data, 4, &Outputs::default(), |_, _| Ok(())).unwrap());
    for (a, b) in stats.iter().zip(&full) {
        assert!((a.loss - b.loss).abs() <= 1e-5 * b.loss.abs(), "{} vs {}", a.loss, b.loss);
    }
}

#[test]
fn pretraining_overfits_a_small_corpus() {
    let docs = corpus(32);
    let m = HierModel::<f32>::new(cfg(), 3).unwrap().with_pretrain_head(3);
    let c = TrainConfig {
        total_steps: Some(200),
        ..train_cfg()
    };
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("train.jsonl");
    let out = Outputs {
        log: Some(log.clone()),
        checkpoint_dir: None,
    };
    let (_, stats) = run_pretraining(&docs, m, c, &out).unwrap();
    let initial = stats[0].loss;
    let last: Vec<f64> = stats[190..].iter().map(|s| s.loss).collect();
    let final_loss = last.iter().sum::<f64>() / last.len() as f64;
    assert!(final_loss < 0.1 * initial, "initial {initial}, final {final_loss}");
    let logged: Vec<StepStats> = hierformer::jsonl::read(&log).unwrap();
    assert_eq!(logged.len(), 200);
    assert_eq!(logged[0].task, Task::Pretrain);
}

#[test]
fn empty_corpus_is_rejected() {
    let m = HierModel::<f32>::new(cfg(), 1).unwrap().with_pretrain_head(1);
    let r = run_pretraining(&[], m, train_cfg(), &Outputs::default());
    assert!(matches!(r, Err(Error::Data(_))));
}

#[test]
fn finetune_init_from_checkpoint() {
    let docs = corpus(4);
    let dir = tempfile::tempdir().unwrap();
    let out = Outputs {
        log: None,
        checkpoint_dir: Some(dir.path().to_path_buf()),
    };
    let m = HierModel::<f32>::new(cfg(), 1).unwrap().with_pretrain_head(1);
    let c = TrainConfig {
        total_steps: Some(1),
        ..train_cfg()
    };
    let (t, _) = run_pretraining(&docs, m, c, &out).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let ft = finetune_model::<f32>(&cfg(), &Init::Checkpoint(ckpt), 5).unwrap();
    for (p, v) in ft.params.iter() {
        assert!(!p.starts_with("pretrain."), "{p} transferred");
        if p.starts_with("base.") {
            assert_eq!(v, t.model.params.get(p).unwrap());
        }
    }
    assert!(ft.has_classifier());
    let missing = finetune_model::<f32>(&cfg(), &Init::Checkpoint(dir.path().join("nope.ckpt")), 5);
    assert!(missing.is_err());
}
