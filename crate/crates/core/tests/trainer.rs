use std::collections::BTreeSet;

use mosaic::data::{gen_synthetic_corpus, PairRecord, SyntheticCorpus};
use mosaic::encoder::{embed_sentence, EncoderConfig};
use mosaic::numerics::{Tape, Tensor};
use mosaic::objectives::{
    apply_domain_masking, batch_objective_on_tape, candidate_ids, contrastive_loss, MaskScope, MaskedBatch,
    MaskingConfig,
};
use mosaic::tokenizer::{encode, train_subword_vocab, Vocab};
use mosaic::trainer::{
    epoch_batches, lr_schedule, parse_plan, run_pipeline, run_stage1, run_training_stage, Checkpoint, PipelineConfig,
    PipelineData, Stage1Config, StageConfig, StageKind, CHECKPOINT_VERSION,
};
use mosaic::Error;
use proptest::prelude::*;

const MAX_LEN: usize = 24;

fn corpus() -> SyntheticCorpus {
    gen_synthetic_corpus(3, 32, 6).unwrap()
}

/// Random-init checkpoint whose vocabulary comes from the domain-free half of the corpus.
fn base_checkpoint(c: &SyntheticCorpus) -> Checkpoint {
    let general = c.general_text()[..16].to_vec();
    let vocab = train_subword_vocab(&general, 150).unwrap();
    let cfg = EncoderConfig {
        layers: 1,
        heads: 2,
        model_dim: 8,
        ff_dim: 16,
        max_len: MAX_LEN,
        vocab_size: vocab.len(),
        seed: 3,
    };
    Checkpoint::initial(cfg, vocab).unwrap()
}

fn augmented(c: &SyntheticCorpus) -> Checkpoint {
    let s1 = Stage1Config {
        domain_vocab_size: 200,
        max_new: 40,
    };
    let (ckpt, records) = run_stage1(&base_checkpoint(c), &c.all_text(), &s1).unwrap();
    assert!(!records.is_empty());
    ckpt
}

fn stage(kind: StageKind, batch: usize) -> StageConfig {
    StageConfig {
        seed: 5,
        batch_size: batch,
        ..StageConfig::desk(kind)
    }
}

#[test]
fn stage3_records_the_contrastive_loss_of_its_batch() {
    let c = corpus();
    let ckpt = augmented(&c);
    let cfg = stage(StageKind::Stage3, 8);
    let (_, history) = run_training_stage(&ckpt, &c.pairs, &cfg).unwrap();
    let first = epoch_batches(c.pairs.len(), 8, cfg.seed, 0)[0].clone();
    let rows = |pick: fn(&PairRecord) -> &str| {
        let v: Vec<Vec<f64>> = first
            .iter()
            .map(|&i| embed_sentence(&ckpt.weights, &ckpt.vocab, pick(&c.pairs[i]), MAX_LEN).unwrap().vector)
            .collect();
        Tensor::from_rows(&v).unwrap()
    };
    let q = rows(|p| &p.query);
    let d = rows(|p| &p.document);
    let expected = contrastive_loss(&q, &d, &cfg.joint).unwrap();
    assert_eq!(history[0].loss, expected);
    assert_eq!(history[0].cl_loss, expected);
    assert_eq!(history[0].mlm_loss, 0.0);
}

#[test]
fn one_small_step_lowers_the_batch_loss() {
    let c = corpus();
    let ckpt = augmented(&c);
    let pairs = c.pairs[..2].to_vec();
    let cfg = StageConfig {
        max_lr: 1e-3,
        ..stage(StageKind::Stage3, 2)
    };
    let (after, h1) = run_training_stage(&ckpt, &pairs, &cfg).unwrap();
    assert_eq!(h1.len(), 1);
    let (_, h2) = run_training_stage(&after, &pairs, &cfg).unwrap();
    assert!(h2[0].loss < h1[0].loss, "{} -> {}", h1[0].loss, h2[0].loss);
}

fn embedding_grad(ckpt: &Checkpoint, batch: &MaskedBatch, mlm: Option<&[usize]>, alpha: f64) -> Tensor {
    let w = &ckpt.weights;
    let mut tape = Tape::new();
    let vars = w.register(&mut tape);
    let joint = mosaic::objectives::JointLossConfig {
        alpha,
        ..Default::default()
    };
    let obj = batch_objective_on_tape(&mut tape, &vars, w.config(), batch, &joint, mlm).unwrap();
    let out = if mlm.is_some() { obj.mlm.unwrap() } else { obj.total };
    tape.backward(out).unwrap().get_or_zeros(0, w.embedding().shape())
}

#[test]
fn masked_new_tokens_receive_gradient() {
    let c = corpus();
    let base_len = base_checkpoint(&c).vocab.len();
    let ckpt = augmented(&c);
    let cands = candidate_ids(&ckpt.vocab, MaskScope::DomainOnly).unwrap();
    let enc = |t: &str| encode(&ckpt.vocab, t, MAX_LEN).unwrap();
    let mut touched = 0;
    for (step, batch) in epoch_batches(c.pairs.len(), 8, 1, 0).into_iter().enumerate() {
        let q: Vec<_> = batch.iter().map(|&i| enc(&c.pairs[i].query)).collect();
        let d: Vec<_> = batch.iter().map(|&i| enc(&c.pairs[i].document)).collect();
        let masking = MaskingConfig {
            seed: step as u64,
            ..Default::default()
        };
        let masked = apply_domain_masking(&q, &d, &batch, &masking).unwrap();
        let new_targets: BTreeSet<usize> = masked
            .queries
            .iter()
            .flat_map(|m| m.targets.iter().copied())
            .filter(|&t| t >= base_len)
            .collect();
        if new_targets.is_empty() {
            continue;
        }
        let g = embedding_grad(&ckpt, &masked, Some(&cands), 0.3);
        for t in new_targets {
            assert!(g.row(t).iter().any(|&v| v != 0.0), "new token {t} got no gradient");
            touched += 1;
        }
    }
    assert!(touched > 0, "no new token was masked over the epoch");
}

#[test]
fn absent_tokens_get_zero_contrastive_gradient() {
    let c = corpus();
    let ckpt = augmented(&c);
    let enc = |t: &str| encode(&ckpt.vocab, t, MAX_LEN).unwrap();
    let batch: Vec<usize> = (0..6).collect();
    let q: Vec<_> = batch.iter().map(|&i| enc(&c.pairs[i].query)).collect();
    let d: Vec<_> = batch.iter().map(|&i| enc(&c.pairs[i].document)).collect();
    let present: BTreeSet<usize> = q.iter().chain(&d).flat_map(|e| e.ids.iter().copied()).collect();
    let g = embedding_grad(&ckpt, &MaskedBatch::plain(q, d, batch), None, 0.0);
    let mut absent = 0;
    for id in 0..ckpt.vocab.len() {
        if present.contains(&id) {
            continue;
        }
        assert!(g.row(id).iter().all(|&v| v == 0.0), "row {id}");
        absent += 1;
    }
    assert!(absent > 0);
    assert!(present.iter().any(|&id| g.row(id).iter().any(|&v| v != 0.0)));
}

#[test]
fn stage1_bookkeeping() {
    let c = corpus();
    let base = base_checkpoint(&c);
    let none = Stage1Config {
        domain_vocab_size: 200,
        max_new: 0,
    };
    let (same, records) = run_stage1(&base, &c.all_text(), &none).unwrap();
    assert!(records.is_empty());
    assert_eq!(same.weights.params(), base.weights.params());

    let some = Stage1Config {
        domain_vocab_size: 200,
        max_new: 40,
    };
    let (grown, records) = run_stage1(&base, &c.all_text(), &some).unwrap();
    assert_eq!(grown.vocab.len() - base.vocab.len(), records.len());
    assert_eq!(grown.config().vocab_size, grown.vocab.len());
}

fn data(c: &SyntheticCorpus) -> PipelineData {
    PipelineData {
        domain_corpus: c.all_text(),
        pairs: c.pairs.clone(),
    }
}

fn small_pipeline() -> PipelineConfig {
    PipelineConfig {
        stage1: Stage1Config {
            domain_vocab_size: 200,
            max_new: 40,
        },
        stage2: stage(StageKind::Stage2, 8),
        stage3: stage(StageKind::Stage3, 8),
    }
}

#[test]
fn pipeline_plans() {
    let c = corpus();
    let base = base_checkpoint(&c);
    let cfg = small_pipeline();

    let (only, reports) = run_pipeline(&base, &[StageKind::Stage1], &data(&c), &cfg).unwrap();
    let (direct, _) = run_stage1(&base, &c.all_text(), &cfg.stage1).unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(only.to_bytes(), direct.to_bytes());

    let canonical = parse_plan("stage1,stage2,stage3").unwrap();
    let (_, reports) = run_pipeline(&base, &canonical, &data(&c), &cfg).unwrap();
    let names: Vec<&str> = reports.iter().map(|r| r.checkpoint.stage.as_str()).collect();
    assert_eq!(names, ["stage1", "stage2", "stage3"]);
    assert!(reports[1].losses.iter().all(|l| l.stage == StageKind::Stage2));

    let swapped = parse_plan("stage1,stage3,stage2").unwrap();
    let (last, reports) = run_pipeline(&base, &swapped, &data(&c), &cfg).unwrap();
    let labels: Vec<StageKind> = reports.iter().map(|r| r.stage).collect();
    assert_eq!(labels, swapped);
    assert_eq!(reports[1].checkpoint.stage, "stage3");
    assert!(reports[2].losses.iter().all(|l| l.stage == StageKind::Stage2 && l.mlm_loss >= 0.0));
    assert_eq!(last.stage, "stage2");
}

#[test]
fn training_before_any_vocabulary_is_an_error() {
    let c = corpus();
    let empty = Vocab::from_tokens(Vec::<String>::new()).unwrap();
    let cfg = EncoderConfig {
        model_dim: 8,
        ff_dim: 16,
        ..Default::default()
    };
    let base = Checkpoint::initial(cfg, empty).unwrap();
    let err = run_pipeline(&base, &[StageKind::Stage2], &data(&c), &small_pipeline()).unwrap_err();
    assert!(matches!(err, Error::Pipeline(_)), "{err}");
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let c = corpus();
    let (trained, _) = run_training_stage(&augmented(&c), &c.pairs, &stage(StageKind::Stage2, 8)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    trained.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), trained.to_bytes());
    assert_eq!(loaded.vocab, trained.vocab);
    let text = &c.pairs[0].query;
    assert_eq!(
        embed_sentence(&loaded.weights, &loaded.vocab, text, MAX_LEN).unwrap(),
        embed_sentence(&trained.weights, &trained.vocab, text, MAX_LEN).unwrap()
    );

    let bytes = std::fs::read(&path).unwrap();
    for cut in [0, 3, 8, bytes.len() / 2, bytes.len() - 1] {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut foreign = bytes.clone();
    foreign[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&foreign), Err(Error::CheckpointVersion { .. })));
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(Checkpoint::from_bytes(&magic).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn epoch_batches_partition_the_pairs(n in 2usize..200, bs in 2usize..40, seed in any::<u64>(), epoch in 0usize..5) {
        let batches = epoch_batches(n, bs, seed, epoch);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        prop_assert!(batches.iter().all(|b| b.len() >= 2 || n < 2));
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(epoch_batches(n, bs, seed, epoch), batches);
    }

    #[test]
    fn lr_stays_within_bounds(total in 1usize..500, frac in 0.0f64..0.5, max_lr in 1e-6f64..1e-2, pick in 0usize..500) {
        let step = pick % (total + 1);
        let lr = lr_schedule(step, total, max_lr, frac).unwrap();
        prop_assert!((0.0..=max_lr * (1.0 + 1e-12)).contains(&lr));
        prop_assert_eq!(lr_schedule(0, total, max_lr, frac).unwrap(), 0.0);
    }
}
