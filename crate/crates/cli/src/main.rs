use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use mosaic::trainer::StageKind;
use mosaic_cli::commands::{self, input, resolve, EmbedderKind, PipelineArgs, RetrievalSet, Synth};
use mosaic_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "mosaic", version, about = "Domain-adaptive sentence encoder training and evaluation")]
struct Cli {
    /// TOML run configuration. Missing keys take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Print the resolved configuration as TOML before running.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired corpus with held-out retrieval judgments.
    GenSynth {
        #[arg(long, default_value_t = 500)]
        pairs: usize,
        #[arg(long, default_value_t = 30)]
        terms: usize,
        #[arg(long, default_value_t = 50)]
        held_out: usize,
        /// Training pairs whose text goes into general.txt.
        #[arg(long, default_value_t = 150)]
        base_pairs: usize,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train a base subword vocabulary on a plain-text corpus.
    TrainTokenizer {
        #[arg(long)]
        corpus: PathBuf,
        /// Defaults to tokenizer.vocab_size.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a randomly initialised checkpoint here.
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
    },
    /// Extend the vocabulary with domain tokens.
    Stage1 {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        domain_corpus: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Joint masked-LM and contrastive training.
    Stage2(TrainArgs),
    /// Contrastive fine-tuning.
    Stage3(TrainArgs),
    /// Run several stages in order, evaluating after each if retrieval files are given.
    Pipeline {
        #[arg(long, default_value = "stage1,stage2,stage3")]
        plan: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        domain_corpus: Option<PathBuf>,
        #[command(flatten)]
        retrieval: RetrievalFiles,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Drop pairs whose document is not among the query's k nearest.
    FilterPairs {
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = EmbedderKind::Bow)]
        embedder: EmbedderKind,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to filter.k.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Embed each line of a text file.
    Embed {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// NDCG@k over a query set and collection.
    EvalRetrieval {
        #[command(flatten)]
        retrieval: RetrievalFiles,
        #[arg(long, value_enum, default_value_t = EmbedderKind::Checkpoint)]
        embedder: EmbedderKind,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to eval.k.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Spearman correlation between cosine similarity and gold scores.
    EvalSts {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = EmbedderKind::Checkpoint)]
        embedder: EmbedderKind,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Use at most this many pairs.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(clap::Args)]
struct RetrievalFiles {
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    collection: Option<PathBuf>,
    #[arg(long)]
    qrels: Option<PathBuf>,
}

impl RetrievalFiles {
    fn any(&self, cfg: &RunConfig) -> bool {
        let p = &cfg.paths;
        self.queries.is_some() || self.collection.is_some() || self.qrels.is_some()
            || p.queries.is_some() || p.collection.is_some() || p.qrels.is_some()
    }

    fn load(self, cfg: &RunConfig) -> Result<RetrievalSet> {
        let p = &cfg.paths;
        RetrievalSet::load(
            &input(self.queries, &p.queries, "queries")?,
            &input(self.collection, &p.collection, "collection")?,
            &input(self.qrels, &p.qrels, "qrels")?,
        )
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenSynth { .. } => "gen-synth",
            Command::TrainTokenizer { .. } => "train-tokenizer",
            Command::Stage1 { .. } => "stage1",
            Command::Stage2(_) => "stage2",
            Command::Stage3(_) => "stage3",
            Command::Pipeline { .. } => "pipeline",
            Command::FilterPairs { .. } => "filter-pairs",
            Command::Embed { .. } => "embed",
            Command::EvalRetrieval { .. } => "eval-retrieval",
            Command::EvalSts { .. } => "eval-sts",
        }
    }
}

fn optional_input(flag: Option<PathBuf>, fallback: &Option<PathBuf>, key: &str) -> Result<Option<PathBuf>> {
    match flag.or_else(|| fallback.clone()) {
        Some(p) => input(Some(p), &None, key).map(Some),
        None => Ok(None),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cfg: &RunConfig, command: Command) -> Result<()> {
    let p = &cfg.paths;
    match command {
        Command::GenSynth { pairs, terms, held_out, base_pairs, out_dir } => {
            let out = resolve(out_dir, &p.out_dir, "out_dir")?;
            commands::gen_synth(cfg, &Synth { pairs, terms, held_out, base_pairs }, &out)
        }
        Command::TrainTokenizer { corpus, size, out, init_checkpoint } => {
            let corpus = input(Some(corpus), &None, "corpus")?;
            let out = resolve(out, &p.vocab, "vocab")?;
            let size = size.unwrap_or(cfg.tokenizer.vocab_size);
            commands::train_tokenizer(cfg, &corpus, size, &out, init_checkpoint.as_deref())
        }
        Command::Stage1 { checkpoint, vocab, domain_corpus, out_dir } => {
            let checkpoint = optional_input(checkpoint, &p.checkpoint, "checkpoint")?;
            let vocab = optional_input(vocab, &p.vocab, "vocab")?;
            let corpus = input(domain_corpus, &p.domain_corpus, "domain_corpus")?;
            let out = resolve(out_dir, &p.out_dir, "out_dir")?;
            let base = commands::base_checkpoint(cfg, checkpoint.as_deref(), vocab.as_deref())?;
            commands::stage1(cfg, &base, &corpus, &out)
        }
        Command::Stage2(a) => train(cfg, StageKind::Stage2, a),
        Command::Stage3(a) => train(cfg, StageKind::Stage3, a),
        Command::Pipeline { plan, checkpoint, vocab, pairs, domain_corpus, retrieval, out_dir } => {
            let checkpoint = optional_input(checkpoint, &p.checkpoint, "checkpoint")?;
            let vocab = optional_input(vocab, &p.vocab, "vocab")?;
            let pairs = input(pairs, &p.pairs, "pairs")?;
            let corpus = input(domain_corpus, &p.domain_corpus, "domain_corpus")?;
            let out = resolve(out_dir, &p.out_dir, "out_dir")?;
            let retrieval = if retrieval.any(cfg) { Some(retrieval.load(cfg)?) } else { None };
            let base = commands::base_checkpoint(cfg, checkpoint.as_deref(), vocab.as_deref())?;
            let args = PipelineArgs { plan: &plan, pairs: &pairs, domain_corpus: &corpus, retrieval, out_dir: &out };
            commands::pipeline(cfg, &base, args)
        }
        Command::FilterPairs { pairs, embedder, checkpoint, k, out_dir } => {
            let pairs = input(pairs, &p.pairs, "pairs")?;
            let checkpoint = optional_input(checkpoint, &p.checkpoint, "checkpoint")?;
            let out = resolve(out_dir, &p.out_dir, "out_dir")?;
            commands::filter_pairs(cfg, &pairs, embedder, checkpoint.as_deref(), k, &out)
        }
        Command::Embed { checkpoint, input: file, out } => {
            let checkpoint = input(checkpoint, &p.checkpoint, "checkpoint")?;
            let file = input(Some(file), &None, "input")?;
            commands::embed(&checkpoint, &file, &out)
        }
        Command::EvalRetrieval { retrieval, embedder, checkpoint, k, out } => {
            let checkpoint = optional_input(checkpoint, &p.checkpoint, "checkpoint")?;
            let set = retrieval.load(cfg)?;
            commands::eval_retrieval(&set, embedder, checkpoint.as_deref(), k.unwrap_or(cfg.eval.k), &out)
        }
        Command::EvalSts { input: file, embedder, checkpoint, out } => {
            let checkpoint = optional_input(checkpoint, &p.checkpoint, "checkpoint")?;
            let file = input(Some(file), &None, "input")?;
            commands::eval_sts(&file, embedder, checkpoint.as_deref(), &out)
        }
    }
}

fn train(cfg: &RunConfig, kind: StageKind, a: TrainArgs) -> Result<()> {
    let p = &cfg.paths;
    let checkpoint = input(a.checkpoint, &p.checkpoint, "checkpoint")?;
    let pairs = input(a.pairs, &p.pairs, "pairs")?;
    let out = resolve(a.out_dir, &p.out_dir, "out_dir")?;
    commands::train_stage(cfg, kind, &checkpoint, &pairs, a.limit, &out)
}

fn fail(command: &str, err: anyhow::Error) -> ExitCode {
    let msg = format!("{err:#}").replace('\n', " ");
    eprintln!("{}", serde_json::json!({"error": msg, "command": command}));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MOSAIC_LOG", "warn")).init();
    let cli = Cli::parse();
    let name = cli.command.as_ref().map_or("config", Command::name);
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => return fail(name, e),
    };
    if cli.print_config {
        print!("{}", cfg.to_toml());
    }
    let Some(command) = cli.command else {
        if cli.print_config {
            return ExitCode::SUCCESS;
        }
        let mut cmd = <Cli as clap::CommandFactory>::command();
        eprintln!("{}", cmd.render_usage());
        return ExitCode::from(2);
    };
    match run(&cfg, command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(name, e),
    }
}
