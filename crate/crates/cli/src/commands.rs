//! One function per subcommand.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mosaic::data::{consistency_filter, gen_synthetic_corpus, load_pairs, pairs_to_jsonl, BagOfWords, PairRecord};
use mosaic::encoder::embed_sentence;
use mosaic::eval::{evaluate_retrieval, load_qrels, qrels_to_text, spearman, MetricReport, RelevanceJudgments};
use mosaic::tokenizer::{train_subword_vocab, NewTokenRecord, Vocab};
use mosaic::trainer::{
    loss_history_csv, parse_plan, run_pipeline, run_stage1, run_training_stage, Checkpoint, PipelineData, StageKind,
};
use serde_json::json;

use crate::config::RunConfig;
use crate::files::{ensure_dir, read_jsonl, read_lines, to_jsonl, write, IdText, StsPair};

pub const CHECKPOINT_FILE: &str = "checkpoint.mosc";
pub const CONFIG_ECHO_FILE: &str = "config.resolved.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum EmbedderKind {
    /// Word-count vectors fitted on the command's own input text.
    Bow,
    /// Mean-pooled encoder states from `--checkpoint`.
    Checkpoint,
}

/// Flag value, else the config path, else an error naming both.
pub fn resolve(flag: Option<PathBuf>, fallback: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .with_context(|| format!("missing required path: --{} or paths.{key}", key.replace('_', "-")))
}

/// [`resolve`] plus an existence check, so bad inputs fail before any work.
pub fn input(flag: Option<PathBuf>, fallback: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    let p = resolve(flag, fallback, key)?;
    if !p.is_file() {
        bail!("paths.{key}: {} does not exist", p.display());
    }
    Ok(p)
}

fn echo_config(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    write(&out_dir.join(CONFIG_ECHO_FILE), cfg.to_toml())
}

pub struct Synth {
    pub pairs: usize,
    pub terms: usize,
    pub held_out: usize,
    pub base_pairs: usize,
}

pub fn gen_synth(cfg: &RunConfig, opts: &Synth, out_dir: &Path) -> Result<()> {
    if opts.held_out >= opts.pairs {
        bail!("--held-out {} leaves no training pairs out of {}", opts.held_out, opts.pairs);
    }
    let corpus = gen_synthetic_corpus(cfg.seed, opts.pairs, opts.terms)?;
    let split = opts.pairs - opts.held_out;
    ensure_dir(out_dir)?;
    let train = &corpus.pairs[..split];
    write(&out_dir.join("pairs.jsonl"), pairs_to_jsonl(train))?;
    write(&out_dir.join("domain_terms.txt"), lines(&corpus.domain_terms))?;
    let domain: Vec<String> = train.iter().flat_map(|p| [p.query.clone(), p.document.clone()]).collect();
    write(&out_dir.join("domain_corpus.txt"), lines(&domain))?;
    let general = corpus.general_text();
    write(&out_dir.join("general.txt"), lines(&general[..2 * opts.base_pairs.min(split)]))?;

    let queries: Vec<IdText> = (split..opts.pairs)
        .map(|i| IdText {
            id: format!("q{i}"),
            text: corpus.pairs[i].query.clone(),
        })
        .collect();
    let collection: Vec<IdText> = corpus
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| IdText {
            id: format!("d{i}"),
            text: p.document.clone(),
        })
        .collect();
    let mut qrels = RelevanceJudgments::new();
    for i in split..opts.pairs {
        qrels.entry(format!("q{i}")).or_default().insert(format!("d{i}"), 1);
    }
    write(&out_dir.join("queries.jsonl"), to_jsonl(&queries))?;
    write(&out_dir.join("collection.jsonl"), to_jsonl(&collection))?;
    write(&out_dir.join("qrels.txt"), qrels_to_text(&qrels))?;
    println!(
        "{}",
        json!({"pairs": split, "held_out": opts.held_out, "domain_terms": corpus.domain_terms.len()})
    );
    Ok(())
}

fn lines(items: &[String]) -> String {
    let mut s = items.join("\n");
    s.push('\n');
    s
}

pub fn train_tokenizer(cfg: &RunConfig, corpus: &Path, size: usize, out: &Path, init: Option<&Path>) -> Result<()> {
    let text = read_lines(corpus)?;
    let vocab = train_subword_vocab(&text, size)?;
    write(out, vocab.to_text())?;
    if let Some(path) = init {
        let ckpt = Checkpoint::initial(cfg.encoder_config(vocab.len()), vocab.clone())?;
        write(path, ckpt.to_bytes())?;
    }
    println!("{}", json!({"vocab_size": vocab.len()}));
    Ok(())
}

/// A saved checkpoint, or a fresh random-init encoder over a vocabulary file.
pub fn base_checkpoint(cfg: &RunConfig, checkpoint: Option<&Path>, vocab: Option<&Path>) -> Result<Checkpoint> {
    match (checkpoint, vocab) {
        (Some(c), _) => Ok(Checkpoint::load(c).with_context(|| format!("loading {}", c.display()))?),
        (None, Some(v)) => {
            let vocab = Vocab::load(v, None)?;
            Ok(Checkpoint::initial(cfg.encoder_config(vocab.len()), vocab)?)
        }
        (None, None) => bail!("missing required path: --checkpoint/paths.checkpoint or --vocab/paths.vocab"),
    }
}

fn new_tokens_jsonl(records: &[NewTokenRecord]) -> String {
    let rows: Vec<_> = records
        .iter()
        .map(|r| json!({"token": r.token, "id": r.assigned_id, "decomposition": r.decomposition}))
        .collect();
    to_jsonl(&rows)
}

pub fn stage1(cfg: &RunConfig, base: &Checkpoint, domain_corpus: &Path, out_dir: &Path) -> Result<()> {
    let text = read_lines(domain_corpus)?;
    let (ckpt, records) = run_stage1(base, &text, &cfg.stage1)?;
    ensure_dir(out_dir)?;
    echo_config(cfg, out_dir)?;
    write(&out_dir.join("new_tokens.jsonl"), new_tokens_jsonl(&records))?;
    write(&out_dir.join(CHECKPOINT_FILE), ckpt.to_bytes())?;
    println!("{}", json!({"stage": "stage1", "new_tokens": records.len(), "vocab_size": ckpt.vocab.len()}));
    Ok(())
}

fn read_pairs(path: &Path, limit: Option<usize>) -> Result<Vec<PairRecord>> {
    let loaded = load_pairs(path, limit)?;
    if loaded.malformed + loaded.too_short > 0 {
        log::warn!(
            "{}: skipped {} malformed and {} short lines",
            path.display(),
            loaded.malformed,
            loaded.too_short
        );
    }
    Ok(loaded.records)
}

pub fn train_stage(
    cfg: &RunConfig,
    kind: StageKind,
    checkpoint: &Path,
    pairs: &Path,
    limit: Option<usize>,
    out_dir: &Path,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let pairs = read_pairs(pairs, limit)?;
    let (out, history) = run_training_stage(&ckpt, &pairs, &cfg.stage_config(kind))?;
    ensure_dir(out_dir)?;
    echo_config(cfg, out_dir)?;
    write(&out_dir.join("losses.csv"), loss_history_csv(&history))?;
    write(&out_dir.join(CHECKPOINT_FILE), out.to_bytes())?;
    let last = history.last().map(|r| r.loss);
    println!("{}", json!({"stage": kind.name(), "steps": history.len(), "final_loss": last}));
    Ok(())
}

/// Held-out retrieval inputs evaluated after every pipeline stage.
pub struct RetrievalSet {
    pub queries: Vec<IdText>,
    pub collection: Vec<IdText>,
    pub qrels: RelevanceJudgments,
}

impl RetrievalSet {
    pub fn load(queries: &Path, collection: &Path, qrels: &Path) -> Result<Self> {
        Ok(Self {
            queries: read_jsonl(queries)?,
            collection: read_jsonl(collection)?,
            qrels: load_qrels(qrels)?,
        })
    }

    fn evaluate(&self, embed: &Embedder, k: usize) -> Result<MetricReport> {
        let q: Vec<(String, String)> = self.queries.iter().map(|r| (r.id.clone(), r.text.clone())).collect();
        let c: Vec<(String, String)> = self.collection.iter().map(|r| (r.id.clone(), r.text.clone())).collect();
        Ok(evaluate_retrieval(|t| embed.embed(t), &q, &c, &self.qrels, k)?)
    }

    fn texts(&self) -> Vec<String> {
        self.queries.iter().chain(&self.collection).map(|r| r.text.clone()).collect()
    }
}

pub struct PipelineArgs<'a> {
    pub plan: &'a str,
    pub pairs: &'a Path,
    pub domain_corpus: &'a Path,
    pub retrieval: Option<RetrievalSet>,
    pub out_dir: &'a Path,
}

pub fn pipeline(cfg: &RunConfig, base: &Checkpoint, args: PipelineArgs<'_>) -> Result<()> {
    let plan = parse_plan(args.plan)?;
    let data = PipelineData {
        domain_corpus: read_lines(args.domain_corpus)?,
        pairs: read_pairs(args.pairs, None)?,
    };
    let (last, reports) = run_pipeline(base, &plan, &data, &cfg.pipeline_config())?;
    ensure_dir(args.out_dir)?;
    echo_config(cfg, args.out_dir)?;
    let mut summary = String::from("position,stage,new_tokens,steps,final_loss,ndcg\n");
    for (i, r) in reports.iter().enumerate() {
        let dir = args.out_dir.join(format!("{}_{}", i + 1, r.stage));
        ensure_dir(&dir)?;
        write(&dir.join(CHECKPOINT_FILE), r.checkpoint.to_bytes())?;
        if r.stage == StageKind::Stage1 {
            write(&dir.join("new_tokens.jsonl"), new_tokens_jsonl(&r.new_tokens))?;
        } else {
            write(&dir.join("losses.csv"), loss_history_csv(&r.losses))?;
        }
        let ndcg = match &args.retrieval {
            Some(set) => {
                let report = set.evaluate(&Embedder::Model(r.checkpoint.clone()), cfg.eval.k)?;
                write(&dir.join("retrieval.csv"), report.to_csv())?;
                report.mean.to_string()
            }
            None => String::new(),
        };
        let final_loss = r.losses.last().map(|l| l.loss.to_string()).unwrap_or_default();
        summary.push_str(&format!(
            "{},{},{},{},{final_loss},{ndcg}\n",
            i + 1,
            r.stage,
            r.new_tokens.len(),
            r.losses.len()
        ));
    }
    write(&args.out_dir.join("summary.csv"), &summary)?;
    write(&args.out_dir.join(CHECKPOINT_FILE), last.to_bytes())?;
    let stages: Vec<&str> = reports.iter().map(|r| r.stage.name()).collect();
    println!("{}", json!({"plan": stages, "vocab_size": last.vocab.len()}));
    Ok(())
}

pub enum Embedder {
    Bow(BagOfWords),
    Model(Checkpoint),
}

impl Embedder {
    pub fn new(kind: EmbedderKind, checkpoint: Option<&Path>, fit: &[String]) -> Result<Self> {
        match kind {
            EmbedderKind::Bow => Ok(Embedder::Bow(BagOfWords::fit(fit))),
            EmbedderKind::Checkpoint => {
                let path = checkpoint.context("missing required path: --checkpoint or paths.checkpoint")?;
                Ok(Embedder::Model(Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?))
            }
        }
    }

    pub fn embed(&self, text: &str) -> mosaic::Result<Vec<f64>> {
        match self {
            Embedder::Bow(b) => Ok(b.embed(text)),
            Embedder::Model(c) => Ok(embed_sentence(&c.weights, &c.vocab, text, c.config().max_len)?.vector),
        }
    }
}

pub fn filter_pairs(
    cfg: &RunConfig,
    pairs: &Path,
    kind: EmbedderKind,
    checkpoint: Option<&Path>,
    k: Option<usize>,
    out_dir: &Path,
) -> Result<()> {
    let pairs = read_pairs(pairs, None)?;
    let fit: Vec<String> = pairs.iter().flat_map(|p| [p.query.clone(), p.document.clone()]).collect();
    let embedder = Embedder::new(kind, checkpoint, &fit)?;
    let out = consistency_filter(&pairs, |t| embedder.embed(t), k.unwrap_or(cfg.filter.k))?;
    ensure_dir(out_dir)?;
    write(&out_dir.join("retained.jsonl"), pairs_to_jsonl(&out.retained))?;
    write(&out_dir.join("filter_report.jsonl"), out.report.to_jsonl())?;
    print!("{}", out.report.to_jsonl());
    Ok(())
}

pub fn embed(checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let texts = read_lines(input)?;
    let embedder = Embedder::new(EmbedderKind::Checkpoint, Some(checkpoint), &[])?;
    let mut rows = Vec::with_capacity(texts.len());
    for (i, t) in texts.iter().enumerate() {
        let v = embedder.embed(t).with_context(|| format!("line {}", i + 1))?;
        rows.push(json!({"text": t, "embedding": v}));
    }
    write(out, to_jsonl(&rows))?;
    println!("{}", json!({"embedded": rows.len()}));
    Ok(())
}

pub fn eval_retrieval(
    set: &RetrievalSet,
    kind: EmbedderKind,
    checkpoint: Option<&Path>,
    k: usize,
    out: &Path,
) -> Result<()> {
    let embedder = Embedder::new(kind, checkpoint, &set.texts())?;
    let report = set.evaluate(&embedder, k)?;
    write(out, report.to_csv())?;
    println!(
        "{}",
        json!({"ndcg_at_k": report.mean, "k": k, "queries": report.scores.len(), "zero_count": report.zero_count})
    );
    Ok(())
}

pub fn eval_sts(input: &Path, kind: EmbedderKind, checkpoint: Option<&Path>, out: &Path) -> Result<()> {
    let pairs: Vec<StsPair> = read_jsonl(input)?;
    let fit: Vec<String> = pairs.iter().flat_map(|p| [p.sentence1.clone(), p.sentence2.clone()]).collect();
    let embedder = Embedder::new(kind, checkpoint, &fit)?;
    let mut predicted = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let (a, b) = (embedder.embed(&p.sentence1)?, embedder.embed(&p.sentence2)?);
        predicted.push(cosine(&a, &b));
    }
    let gold: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    let rho = spearman(&predicted, &gold)?;
    write(out, format!("metric,value\nspearman,{rho}\npairs,{}\n", pairs.len()))?;
    println!("{}", json!({"spearman": rho, "pairs": pairs.len()}));
    Ok(())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (mosaic::numerics::l2_norm(a), mosaic::numerics::l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    mosaic::numerics::dot(a, b) / (na * nb)
}
