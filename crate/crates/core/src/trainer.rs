//! Vocabulary augmentation, the two gradient stages, AdamW, the learning-rate
//! schedule, checkpoints and multi-stage plans.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PairRecord;
use crate::encoder::{EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::numerics::{Tape, Tensor};
use crate::objectives::{
    apply_domain_masking, batch_objective_on_tape, candidate_ids, JointLossConfig, MaskedBatch, MaskingConfig,
};
use crate::tokenizer::{
    augment_vocabulary, encode, init_new_embeddings, train_subword_vocab, Encoding, NewTokenRecord, Vocab,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Stage1,
    Stage2,
    Stage3,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Stage1 => "stage1",
            StageKind::Stage2 => "stage2",
            StageKind::Stage3 => "stage3",
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "stage1" => Ok(StageKind::Stage1),
            "stage2" => Ok(StageKind::Stage2),
            "stage3" => Ok(StageKind::Stage3),
            other => Err(Error::invalid(format!("unknown stage {other:?}"))),
        }
    }
}

/// Parse a comma-separated plan such as `stage1,stage2,stage3`.
pub fn parse_plan(text: &str) -> Result<Vec<StageKind>> {
    let plan = text
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(StageKind::from_str)
        .collect::<Result<Vec<_>>>()?;
    if plan.is_empty() {
        return Err(Error::invalid("empty plan"));
    }
    Ok(plan)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub stage: StageKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub masking: MaskingConfig,
    pub joint: JointLossConfig,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            stage: StageKind::Stage2,
            epochs: 1,
            batch_size: 128,
            max_lr: 5e-4,
            weight_decay: 0.01,
            warmup_fraction: 0.06,
            masking: MaskingConfig::default(),
            joint: JointLossConfig::default(),
            seed: 0,
        }
    }
}

impl StageConfig {
    /// Small-machine preset: batch 16, otherwise the defaults.
    pub fn desk(stage: StageKind) -> Self {
        Self {
            stage,
            batch_size: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage == StageKind::Stage1 {
            return Err(Error::invalid("stage1 has no training configuration"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::invalid(format!(
                "warmup_fraction {} outside [0, 1)",
                self.warmup_fraction
            )));
        }
        if !(self.max_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("max_lr and weight_decay must be non-negative"));
        }
        self.masking.validate()?;
        self.joint.validate()
    }

    /// Whether this stage masks inputs and adds the masked-token term.
    /// A zero weight disables both so the stage coincides with contrastive-only training.
    pub fn uses_mlm(&self) -> bool {
        self.stage == StageKind::Stage2 && self.joint.alpha > 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub lr: f64,
}

impl TrainState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            lr: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// One AdamW update. Every gradient is checked before any parameter changes.
/// Decay is `p ← p − lr·wd·p`, applied before the moment step.
pub fn adam_step(
    params: &mut [Tensor],
    names: &[String],
    grads: &[Tensor],
    state: &mut TrainState,
    lr: f64,
    hyper: &AdamParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::shape("parameter, gradient and moment counts differ"));
    }
    let label = |i: usize| names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(Error::shape(format!("shape mismatch for parameter {}", label(i))));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(label(i)));
        }
    }
    state.step += 1;
    state.lr = lr;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g[j];
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g[j] * g[j];
            *w -= lr * hyper.weight_decay * *w;
            *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// Linear warmup over `⌈warmup_fraction·total⌉` steps, then linear decay to
/// zero at `total`. The warmup vertex wins when it coincides with `total`.
pub fn lr_schedule(step: usize, total_steps: usize, max_lr: f64, warmup_fraction: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("total_steps must be positive"));
    }
    if step > total_steps {
        return Err(Error::invalid(format!("step {step} beyond total {total_steps}")));
    }
    let warmup = (warmup_fraction * total_steps as f64).ceil() as usize;
    if warmup > 0 && step <= warmup {
        return Ok(max_lr * step as f64 / warmup as f64);
    }
    Ok(max_lr * (total_steps - step) as f64 / (total_steps - warmup) as f64)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for `(base, stream, index)`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(base) ^ stream) ^ index)
}

const SHUFFLE_STREAM: u64 = 1;
const MASK_STREAM: u64 = 2;

/// Batches for one epoch: a seeded permutation cut into `batch_size` chunks.
/// A trailing chunk of one pair joins the previous chunk.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SHUFFLE_STREAM, epoch as u64));
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MOSC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub vocab: Vocab,
    pub weights: EncoderWeights,
    pub train_state: Option<TrainState>,
}

impl Checkpoint {
    /// Fresh weights sized to `vocab`.
    pub fn initial(mut config: EncoderConfig, vocab: Vocab) -> Result<Self> {
        config.vocab_size = vocab.len();
        Ok(Self {
            stage: "init".to_string(),
            weights: crate::encoder::init_weights(&config)?,
            vocab,
            train_state: None,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        self.weights.config()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_section(&mut out, "config", self.config().to_canonical_text().as_bytes());
        put_section(&mut out, "stage", self.stage.as_bytes());
        put_section(&mut out, "vocab", self.vocab.to_text().as_bytes());
        put_section(&mut out, "domain", self.vocab.domain_text().as_bytes());
        let mut w = Vec::new();
        put_named_tensors(&mut w, self.weights.names(), self.weights.params());
        put_section(&mut out, "weights", &w);
        if let Some(state) = &self.train_state {
            let mut s = Vec::new();
            s.extend_from_slice(&state.step.to_le_bytes());
            s.extend_from_slice(&state.lr.to_le_bytes());
            put_named_tensors(&mut s, self.weights.names(), &state.m);
            put_named_tensors(&mut s, self.weights.names(), &state.v);
            put_section(&mut out, "train_state", &s);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (mut config, mut stage, mut vocab, mut domain, mut weights, mut state) =
            (None, None, None, None, None, None);
        while !r.done() {
            let name_len = r.u32()? as usize;
            let name = utf8(r.take(name_len)?)?;
            let len = r.u64()? as usize;
            let payload = r.take(len)?;
            let slot = match name.as_str() {
                "config" => &mut config,
                "stage" => &mut stage,
                "vocab" => &mut vocab,
                "domain" => &mut domain,
                "weights" => &mut weights,
                "train_state" => &mut state,
                other => return Err(Error::Checkpoint(format!("unknown section {other:?}"))),
            };
            if slot.replace(payload).is_some() {
                return Err(Error::Checkpoint(format!("duplicate section {name:?}")));
            }
        }
        let config = EncoderConfig::from_canonical_text(&utf8(need(config, "config")?)?)?;
        let vocab = Vocab::from_text(&utf8(need(vocab, "vocab")?)?, &utf8(need(domain, "domain")?)?)?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} tokens but config says {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut wr = Reader {
            bytes: need(weights, "weights")?,
            pos: 0,
        };
        let named = wr.named_tensors()?;
        wr.finish()?;
        let weights = EncoderWeights::from_parts(config, named)?;
        let train_state = match state {
            None => None,
            Some(bytes) => {
                let mut sr = Reader { bytes, pos: 0 };
                let step = sr.u64()?;
                let lr = f64::from_le_bytes(sr.take(8)?.try_into().unwrap());
                let m = sr.named_tensors()?;
                let v = sr.named_tensors()?;
                sr.finish()?;
                let shapes_ok = |t: &[(String, Tensor)]| {
                    t.len() == weights.params().len()
                        && t.iter().zip(weights.params()).all(|((_, a), b)| a.shape() == b.shape())
                };
                if !shapes_ok(&m) || !shapes_ok(&v) {
                    return Err(Error::Checkpoint("optimizer moments do not match weights".into()));
                }
                Some(TrainState {
                    step,
                    lr,
                    m: m.into_iter().map(|(_, t)| t).collect(),
                    v: v.into_iter().map(|(_, t)| t).collect(),
                })
            }
        };
        Ok(Self {
            stage: utf8(need(stage, "stage")?)?,
            vocab,
            weights,
            train_state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_section(out: &mut Vec<u8>, name: &str, payload: &[u8]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn put_named_tensors(out: &mut Vec<u8>, names: &[String], tensors: &[Tensor]) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in names.iter().zip(tensors) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn need<'b>(section: Option<&'b [u8]>, name: &str) -> Result<&'b [u8]> {
    section.ok_or_else(|| Error::Checkpoint(format!("missing section {name:?}")))
}

fn utf8(bytes: &[u8]) -> Result<String> {
    String::from_utf8(bytes.to_vec()).map_err(|_| Error::Checkpoint("section is not UTF-8".into()))
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn finish(&self) -> Result<()> {
        if self.done() {
            Ok(())
        } else {
            Err(Error::Checkpoint("trailing bytes in section".into()))
        }
    }

    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn named_tensors(&mut self) -> Result<Vec<(String, Tensor)>> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let n = self.u32()? as usize;
            let name = utf8(self.take(n)?)?;
            let ndim = self.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(self.u64()? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?;
            let raw = self.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.push((name, Tensor::new(shape, data)?));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    /// Target size of the vocabulary learned from the domain corpus.
    pub domain_vocab_size: usize,
    /// Upper bound on tokens appended to the base vocabulary.
    pub max_new: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            domain_vocab_size: 2000,
            max_new: 500,
        }
    }
}

/// Learn a domain vocabulary, append its missing tokens, and initialize their
/// rows as the mean of their base-token rows. No other parameter changes.
pub fn run_stage1<S: AsRef<str>>(
    base: &Checkpoint,
    domain_corpus: &[S],
    config: &Stage1Config,
) -> Result<(Checkpoint, Vec<NewTokenRecord>)> {
    let domain = train_subword_vocab(domain_corpus, config.domain_vocab_size)?;
    let (vocab, records) = augment_vocabulary(&base.vocab, &domain, config.max_new)?;
    let mut weights = base.weights.clone();
    if !records.is_empty() {
        let table = init_new_embeddings(weights.embedding(), &records)?;
        weights.replace_embedding(table)?;
    }
    log::info!("stage1: {} new tokens, vocabulary {}", records.len(), vocab.len());
    Ok((
        Checkpoint {
            stage: StageKind::Stage1.name().to_string(),
            vocab,
            weights,
            train_state: None,
        },
        records,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub stage: StageKind,
    pub loss: f64,
    pub mlm_loss: f64,
    pub cl_loss: f64,
    pub lr: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,stage,loss,mlm_loss,cl_loss,lr";

pub fn loss_history_csv(records: &[LossRecord]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.stage, r.loss, r.mlm_loss, r.cl_loss, r.lr
        ));
    }
    out
}

fn encode_pairs(vocab: &Vocab, pairs: &[PairRecord], max_len: usize) -> Result<(Vec<Encoding>, Vec<Encoding>)> {
    let mut q = Vec::with_capacity(pairs.len());
    let mut d = Vec::with_capacity(pairs.len());
    for p in pairs {
        q.push(encode(vocab, &p.query, max_len)?);
        d.push(encode(vocab, &p.document, max_len)?);
    }
    Ok((q, d))
}

/// Number of optimizer steps a stage will take on `n` pairs.
pub fn planned_steps(n: usize, config: &StageConfig) -> usize {
    (0..config.epochs)
        .map(|e| epoch_batches(n, config.batch_size, config.seed, e).len())
        .sum()
}

/// Train with the joint objective (stage 2) or the contrastive objective alone (stage 3).
pub fn run_training_stage(
    checkpoint: &Checkpoint,
    pairs: &[PairRecord],
    config: &StageConfig,
) -> Result<(Checkpoint, Vec<LossRecord>)> {
    config.validate()?;
    if checkpoint.vocab.non_special_ids().is_empty() {
        return Err(Error::Pipeline(format!("{} needs a vocabulary", config.stage)));
    }
    if pairs.len() < config.batch_size {
        return Err(Error::invalid(format!(
            "{} pairs for batch size {}",
            pairs.len(),
            config.batch_size
        )));
    }
    let candidates = if config.uses_mlm() {
        Some(candidate_ids(&checkpoint.vocab, config.masking.scope)?)
    } else {
        None
    };
    let mut weights = checkpoint.weights.clone();
    let (queries, documents) = encode_pairs(&checkpoint.vocab, pairs, weights.config().max_len)?;
    let total = planned_steps(pairs.len(), config);
    let hyper = AdamParams {
        weight_decay: config.weight_decay,
        ..AdamParams::default()
    };
    let mut state = TrainState::new(weights.params());
    let mut history = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..config.epochs {
        for batch in epoch_batches(pairs.len(), config.batch_size, config.seed, epoch) {
            let q: Vec<Encoding> = batch.iter().map(|&i| queries[i].clone()).collect();
            let d: Vec<Encoding> = batch.iter().map(|&i| documents[i].clone()).collect();
            let masked = if candidates.is_some() {
                let masking = MaskingConfig {
                    seed: derive_seed(config.masking.seed, MASK_STREAM, step as u64),
                    ..config.masking.clone()
                };
                apply_domain_masking(&q, &d, &batch, &masking)?
            } else {
                MaskedBatch::plain(q, d, batch)
            };
            let lr = lr_schedule(step + 1, total, config.max_lr, config.warmup_fraction)?;
            let (record, grads) = {
                let mut tape = Tape::new();
                let vars = weights.register(&mut tape);
                let obj =
                    batch_objective_on_tape(&mut tape, &vars, weights.config(), &masked, &config.joint, candidates.as_deref())?;
                let loss = tape.value(obj.total).item();
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { step });
                }
                let record = LossRecord {
                    step,
                    stage: config.stage,
                    loss,
                    mlm_loss: obj.mlm.map_or(0.0, |m| tape.value(m).item()),
                    cl_loss: tape.value(obj.cl).item(),
                    lr,
                };
                let g = tape.backward(obj.total)?;
                let grads: Vec<Tensor> = weights
                    .params()
                    .iter()
                    .enumerate()
                    .map(|(i, p)| g.get_or_zeros(i, p.shape()))
                    .collect();
                (record, grads)
            };
            let names = weights.names().to_vec();
            adam_step(weights.params_mut(), &names, &grads, &mut state, lr, &hyper)?;
            log::debug!("{} step {step}: loss {:.6}", config.stage, record.loss);
            history.push(record);
            step += 1;
        }
    }
    Ok((
        Checkpoint {
            stage: config.stage.name().to_string(),
            vocab: checkpoint.vocab.clone(),
            weights,
            train_state: Some(state),
        },
        history,
    ))
}

/// Inputs bound to a plan.
#[derive(Clone, Debug, Default)]
pub struct PipelineData {
    pub domain_corpus: Vec<String>,
    pub pairs: Vec<PairRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub stage1: Stage1Config,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stage1: Stage1Config::default(),
            stage2: StageConfig::desk(StageKind::Stage2),
            stage3: StageConfig::desk(StageKind::Stage3),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub stage: StageKind,
    pub new_tokens: Vec<NewTokenRecord>,
    pub losses: Vec<LossRecord>,
    pub checkpoint: Checkpoint,
}

/// Run `plan` in order, handing each stage's checkpoint to the next.
pub fn run_pipeline(
    base: &Checkpoint,
    plan: &[StageKind],
    data: &PipelineData,
    config: &PipelineConfig,
) -> Result<(Checkpoint, Vec<StageReport>)> {
    if plan.is_empty() {
        return Err(Error::Pipeline("empty plan".into()));
    }
    let mut current = base.clone();
    let mut reports = Vec::with_capacity(plan.len());
    for &stage in plan {
        let (next, new_tokens, losses) = match stage {
            StageKind::Stage1 => {
                let (c, r) = run_stage1(&current, &data.domain_corpus, &config.stage1)?;
                (c, r, Vec::new())
            }
            StageKind::Stage2 | StageKind::Stage3 => {
                let cfg = if stage == StageKind::Stage2 { &config.stage2 } else { &config.stage3 };
                let cfg = StageConfig { stage, ..cfg.clone() };
                let (c, h) = run_training_stage(&current, &data.pairs, &cfg)?;
                (c, Vec::new(), h)
            }
        };
        reports.push(StageReport {
            stage,
            new_tokens,
            losses,
            checkpoint: next.clone(),
        });
        current = next;
    }
    Ok((current, reports))
}
