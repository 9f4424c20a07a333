#![allow(dead_code)]

use std::collections::BTreeSet;

use mosaic::encoder::{init_weights, EncoderConfig, EncoderWeights};
use mosaic::numerics::Tensor;
use mosaic::objectives::{MaskedBatch, MaskedEncoding};
use mosaic::tokenizer::{Encoding, Vocab, CLS, NUM_SPECIALS, SEP, SPECIAL_TOKENS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Specials, then `general` plain tokens `g0…`, then `domain` tokens `d0…` marked as domain.
pub fn toy_vocab(general: usize, domain: usize) -> Vocab {
    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend((0..general).map(|i| format!("g{i}")));
    tokens.extend((0..domain).map(|i| format!("d{i}")));
    let ids: BTreeSet<usize> = (NUM_SPECIALS + general..NUM_SPECIALS + general + domain).collect();
    Vocab::from_full_list(tokens, ids).unwrap()
}

pub fn small_config(vocab: &Vocab, layers: usize, d: usize, seed: u64) -> EncoderConfig {
    EncoderConfig {
        layers,
        heads: 2,
        model_dim: d,
        ff_dim: 2 * d,
        max_len: 8,
        vocab_size: vocab.len(),
        seed,
    }
}

/// Uniform(±r) weights and gains in 1 ± 0.3, so gradients sit well above rounding noise.
pub fn spread_weights(config: &EncoderConfig, seed: u64, r: f64) -> EncoderWeights {
    let mut w = init_weights(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, p) in w.names().to_vec().iter().zip(w.params_mut()) {
        let gain = name.ends_with("gain");
        for v in p.data_mut() {
            *v = if gain { 1.0 + rng.gen_range(-0.3..0.3) } else { rng.gen_range(-r..r) };
        }
    }
    w
}

/// `b` random pairs of 3–5 content tokens; every query holds at least one domain token.
pub fn toy_encodings(vocab: &Vocab, b: usize, seed: u64) -> (Vec<Encoding>, Vec<Encoding>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let domain = vocab.domain_ids();
    let general: Vec<usize> = vocab.non_special_ids().into_iter().filter(|i| !vocab.is_domain(*i)).collect();
    let mut make = |force_domain: bool| {
        let n = rng.gen_range(3..=5);
        let mut ids = vec![CLS];
        for k in 0..n {
            let pool = if (force_domain && k == 0) || rng.gen_bool(0.4) { &domain } else { &general };
            ids.push(pool[rng.gen_range(0..pool.len())]);
        }
        ids.push(SEP);
        Encoding::from_ids(vocab, ids).unwrap()
    };
    let mut q = Vec::new();
    let mut d = Vec::new();
    for _ in 0..b {
        q.push(make(true));
        d.push(make(false));
    }
    (q, d)
}

/// Mask every domain position of every query.
pub fn mask_domain_positions(queries: Vec<Encoding>, documents: Vec<Encoding>) -> MaskedBatch {
    let b = queries.len();
    let queries = queries
        .into_iter()
        .map(|e| {
            let pos: Vec<usize> = (0..e.len()).filter(|&i| e.is_domain[i]).collect();
            let targets = pos.iter().map(|&i| e.ids[i]).collect();
            MaskedEncoding { encoding: e, mask_positions: pos, targets }
        })
        .collect();
    MaskedBatch {
        queries,
        documents: documents.into_iter().map(MaskedEncoding::unmasked).collect(),
        pair_indices: (0..b).collect(),
    }
}

pub fn matrix(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

use mosaic::data::{gen_synthetic_corpus, PairRecord};
use mosaic::encoder::embed_sentence;
use mosaic::eval::{evaluate_retrieval, MetricReport, RelevanceJudgments};
use mosaic::tokenizer::train_subword_vocab;
use mosaic::trainer::{
    loss_history_csv, run_pipeline, Checkpoint, PipelineConfig, PipelineData, Stage1Config, StageConfig, StageKind,
};

pub struct EndToEnd {
    pub final_bytes: Vec<u8>,
    pub reports_csv: Vec<String>,
    pub loss_csv: String,
    pub ndcg_after: Vec<(StageKind, f64)>,
    pub positive_cosine: f64,
    pub negative_cosine: f64,
    pub new_tokens: usize,
}

pub const E2E_PAIRS: usize = 500;
pub const E2E_TERMS: usize = 30;
pub const E2E_HELD_OUT: usize = 50;
pub const E2E_BASE_PAIRS: usize = 150;
pub const E2E_BASE_VOCAB: usize = 800;

pub fn e2e_config(seed: u64) -> PipelineConfig {
    let stage = |kind| StageConfig {
        epochs: 3,
        max_lr: 1e-3,
        seed,
        ..StageConfig::desk(kind)
    };
    let mut stage2 = stage(StageKind::Stage2);
    stage2.masking.seed = seed;
    PipelineConfig {
        stage1: Stage1Config {
            domain_vocab_size: 600,
            max_new: 100,
        },
        stage2,
        stage3: stage(StageKind::Stage3),
    }
}

fn mean_cosine(ckpt: &Checkpoint, pairs: &[(&str, &str)]) -> f64 {
    let max_len = ckpt.config().max_len;
    let total: f64 = pairs
        .iter()
        .map(|(a, b)| {
            let ea = embed_sentence(&ckpt.weights, &ckpt.vocab, a, max_len).unwrap();
            let eb = embed_sentence(&ckpt.weights, &ckpt.vocab, b, max_len).unwrap();
            ea.cosine(&eb)
        })
        .sum();
    total / pairs.len() as f64
}

pub fn retrieval_report(ckpt: &Checkpoint, all: &[PairRecord], held_out: std::ops::Range<usize>) -> MetricReport {
    let queries: Vec<(String, String)> = held_out.clone().map(|i| (format!("q{i}"), all[i].query.clone())).collect();
    let collection: Vec<(String, String)> =
        all.iter().enumerate().map(|(i, p)| (format!("d{i}"), p.document.clone())).collect();
    let mut judgments = RelevanceJudgments::new();
    for i in held_out {
        judgments.entry(format!("q{i}")).or_default().insert(format!("d{i}"), 1);
    }
    let max_len = ckpt.config().max_len;
    evaluate_retrieval(
        |t| Ok(embed_sentence(&ckpt.weights, &ckpt.vocab, t, max_len)?.vector),
        &queries,
        &collection,
        &judgments,
        10,
    )
    .unwrap()
}

/// Synthetic domain shift: base vocabulary from domain-free text, random init,
/// then `plan` over the first 450 pairs; the last 50 are held out.
pub fn run_end_to_end(seed: u64, plan: &[StageKind], config: &PipelineConfig) -> EndToEnd {
    let corpus = gen_synthetic_corpus(seed, E2E_PAIRS, E2E_TERMS).unwrap();
    let split = E2E_PAIRS - E2E_HELD_OUT;
    let train = corpus.pairs[..split].to_vec();
    // The base tokenizer sees only the first 150 pairs, so most training and all
    // held-out core words reach the encoder as subword pieces.
    let general: Vec<String> = corpus.general_text()[..2 * E2E_BASE_PAIRS].to_vec();
    let base_vocab = train_subword_vocab(&general, E2E_BASE_VOCAB).unwrap();
    let enc = EncoderConfig {
        layers: 2,
        heads: 2,
        model_dim: 64,
        ff_dim: 128,
        max_len: 32,
        vocab_size: base_vocab.len(),
        seed,
    };
    let base = Checkpoint::initial(enc, base_vocab).unwrap();
    let data = PipelineData {
        domain_corpus: train.iter().flat_map(|p| [p.query.clone(), p.document.clone()]).collect(),
        pairs: train,
    };
    let (last, reports) = run_pipeline(&base, plan, &data, config).unwrap();
    let held = split..E2E_PAIRS;
    let mut ndcg_after = Vec::new();
    let mut reports_csv = Vec::new();
    let mut losses = Vec::new();
    let mut new_tokens = 0;
    for r in &reports {
        let m = retrieval_report(&r.checkpoint, &corpus.pairs, held.clone());
        ndcg_after.push((r.stage, m.mean));
        reports_csv.push(m.to_csv());
        losses.extend(r.losses.iter().cloned());
        new_tokens += r.new_tokens.len();
    }
    let pos: Vec<(&str, &str)> = corpus.pairs[held.clone()]
        .iter()
        .map(|p| (p.query.as_str(), p.document.as_str()))
        .collect();
    let neg: Vec<(&str, &str)> = held
        .clone()
        .map(|i| {
            let j = split + (i - split + 1) % E2E_HELD_OUT;
            (corpus.pairs[i].query.as_str(), corpus.pairs[j].document.as_str())
        })
        .collect();
    EndToEnd {
        final_bytes: last.to_bytes(),
        reports_csv,
        loss_csv: loss_history_csv(&losses),
        ndcg_after,
        positive_cosine: mean_cosine(&last, &pos),
        negative_cosine: mean_cosine(&last, &neg),
        new_tokens,
    }
}
