//! Pre-norm transformer sentence encoder with mean pooling.
//!
//! The masked-token head has no parameters of its own: a candidate's logit is
//! the dot product of a hidden state with that token's row of the input
//! embedding table, so the head and the input lookup share storage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::tokenizer::{self, encode, Encoding, Vocab, CLS, MASK, PAD, SEP};

const INIT_STD: f64 = 0.02;
const PARAMS_PER_LAYER: usize = 15;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Zero layers is allowed: the encoder reduces to embeddings plus the final layer norm.
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            model_dim: 64,
            ff_dim: 256,
            max_len: 64,
            vocab_size: tokenizer::NUM_SPECIALS,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim == 0 || self.ff_dim == 0 || self.vocab_size == 0 {
            return Err(Error::invalid("encoder dimensions must be at least 1"));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::invalid("max_len must be at least 2"));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        2 + self.layers * PARAMS_PER_LAYER + 2
    }

    /// `key=value` lines in a fixed order.
    pub fn to_canonical_text(&self) -> String {
        format!(
            "layers={}\nheads={}\nmodel_dim={}\nff_dim={}\nmax_len={}\nvocab_size={}\nseed={}\n",
            self.layers, self.heads, self.model_dim, self.ff_dim, self.max_len, self.vocab_size, self.seed
        )
    }

    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let mut fields = [None::<u64>; 7];
        const KEYS: [&str; 7] = ["layers", "heads", "model_dim", "ff_dim", "max_len", "vocab_size", "seed"];
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("bad config line {line:?}")))?;
            let slot = KEYS
                .iter()
                .position(|key| *key == k)
                .ok_or_else(|| Error::invalid(format!("unknown config key {k:?}")))?;
            fields[slot] = Some(
                v.parse()
                    .map_err(|_| Error::invalid(format!("bad value for {k}: {v:?}")))?,
            );
        }
        let get = |i: usize| fields[i].ok_or_else(|| Error::invalid(format!("missing config key {}", KEYS[i])));
        let cfg = Self {
            layers: get(0)? as usize,
            heads: get(1)? as usize,
            model_dim: get(2)? as usize,
            ff_dim: get(3)? as usize,
            max_len: get(4)? as usize,
            vocab_size: get(5)? as usize,
            seed: get(6)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Index of each parameter in [`EncoderWeights::params`].
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    layers: usize,
}

/// Parameter offsets within one transformer block.
#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub ff_w1: usize,
    pub ff_b1: usize,
    pub ff_w2: usize,
    pub ff_b2: usize,
}

impl Layout {
    pub const TOKEN_EMBEDDING: usize = 0;
    pub const POSITION_EMBEDDING: usize = 1;

    pub fn new(layers: usize) -> Self {
        Self { layers }
    }

    pub fn block(&self, l: usize) -> BlockParams {
        let b = 2 + l * PARAMS_PER_LAYER;
        BlockParams {
            ln1_gain: b,
            ln1_bias: b + 1,
            wq: b + 2,
            bq: b + 3,
            wk: b + 4,
            wv: b + 5,
            bv: b + 6,
            wo: b + 7,
            bo: b + 8,
            ln2_gain: b + 9,
            ln2_bias: b + 10,
            ff_w1: b + 11,
            ff_b1: b + 12,
            ff_w2: b + 13,
            ff_b2: b + 14,
        }
    }

    pub fn final_gain(&self) -> usize {
        2 + self.layers * PARAMS_PER_LAYER
    }

    pub fn final_bias(&self) -> usize {
        self.final_gain() + 1
    }
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

fn param_specs(cfg: &EncoderConfig) -> Vec<(String, [usize; 2], Init)> {
    let (d, f) = (cfg.model_dim, cfg.ff_dim);
    let mut specs = vec![
        ("token_embedding".to_string(), [cfg.vocab_size, d], Init::Normal),
        ("position_embedding".to_string(), [cfg.max_len, d], Init::Normal),
    ];
    for l in 0..cfg.layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        specs.extend([
            (p("ln1.gain"), [1, d], Init::Ones),
            (p("ln1.bias"), [1, d], Init::Zeros),
            (p("attn.wq"), [d, d], Init::Normal),
            (p("attn.bq"), [1, d], Init::Zeros),
            (p("attn.wk"), [d, d], Init::Normal),
            (p("attn.wv"), [d, d], Init::Normal),
            (p("attn.bv"), [1, d], Init::Zeros),
            (p("attn.wo"), [d, d], Init::Normal),
            (p("attn.bo"), [1, d], Init::Zeros),
            (p("ln2.gain"), [1, d], Init::Ones),
            (p("ln2.bias"), [1, d], Init::Zeros),
            (p("ff.w1"), [d, f], Init::Normal),
            (p("ff.b1"), [1, f], Init::Zeros),
            (p("ff.w2"), [f, d], Init::Normal),
            (p("ff.b2"), [1, d], Init::Zeros),
        ]);
    }
    specs.push(("final_ln.gain".to_string(), [1, d], Init::Ones));
    specs.push(("final_ln.bias".to_string(), [1, d], Init::Zeros));
    specs
}

/// All encoder parameters. Index 0 is the token embedding table, which also
/// scores masked-token candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    config: EncoderConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Gaussian(0, 0.02) matrices, zero biases, unit layer-norm gains; deterministic in `config.seed`.
pub fn init_weights(config: &EncoderConfig) -> Result<EncoderWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut names = Vec::new();
    let mut params = Vec::new();
    for (name, shape, init) in param_specs(config) {
        let n = shape[0] * shape[1];
        let data = match init {
            Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        names.push(name);
        params.push(Tensor::new(shape.to_vec(), data)?);
    }
    Ok(EncoderWeights {
        config: config.clone(),
        names,
        params,
    })
}

impl EncoderWeights {
    /// Reassemble from named tensors, checking names and shapes against `config`.
    pub fn from_parts(config: EncoderConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != named.len() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                specs.len(),
                named.len()
            )));
        }
        for ((name, shape, _), (got_name, t)) in specs.iter().zip(&named) {
            if name != got_name || t.shape() != shape {
                return Err(Error::shape(format!(
                    "parameter {got_name} {:?} does not match {name} {:?}",
                    t.shape(),
                    shape
                )));
            }
            t.ensure_finite(got_name)?;
        }
        let (names, params) = named.into_iter().unzip();
        Ok(Self { config, names, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.config.layers)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn embedding(&self) -> &Tensor {
        &self.params[Layout::TOKEN_EMBEDDING]
    }

    pub fn embedding_mut(&mut self) -> &mut Tensor {
        &mut self.params[Layout::TOKEN_EMBEDDING]
    }

    /// Rows scored by the masked-token head. Same storage as [`Self::embedding`].
    pub fn mlm_head_rows(&self) -> &Tensor {
        &self.params[Layout::TOKEN_EMBEDDING]
    }

    /// Swap in a new embedding table (vocabulary growth); the row count becomes the vocab size.
    pub fn replace_embedding(&mut self, table: Tensor) -> Result<()> {
        if !table.is_matrix() || table.cols() != self.config.model_dim {
            return Err(Error::shape(format!(
                "embedding table {:?} for model_dim {}",
                table.shape(),
                self.config.model_dim
            )));
        }
        self.config.vocab_size = table.rows();
        self.params[Layout::TOKEN_EMBEDDING] = table;
        Ok(())
    }

    /// Borrow every parameter onto `tape`; the returned vars are indexed like [`Self::params`].
    pub fn register<'a>(&'a self, tape: &mut Tape<'a>) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(i, p))
            .collect()
    }
}

/// A pooled sentence vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceEmbedding {
    pub vector: Vec<f64>,
    pub normalized: bool,
}

impl SentenceEmbedding {
    pub fn cosine(&self, other: &SentenceEmbedding) -> f64 {
        let d = crate::numerics::dot(&self.vector, &other.vector);
        if self.normalized && other.normalized {
            d
        } else {
            d / (crate::numerics::l2_norm(&self.vector) * crate::numerics::l2_norm(&other.vector))
        }
    }
}

/// Positions that contribute to the pooled vector: not PAD, CLS or SEP.
pub fn content_positions(encoding: &Encoding) -> Vec<usize> {
    encoding
        .ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| id != PAD && id != CLS && id != SEP)
        .map(|(i, _)| i)
        .collect()
}

/// Final-layer hidden states `[L×d]` for `encoding`, recorded on `tape`.
/// Positions in `mask_positions` are fed `[MASK]` instead of their token.
pub fn forward_on_tape(
    tape: &mut Tape<'_>,
    vars: &[Var],
    config: &EncoderConfig,
    encoding: &Encoding,
    mask_positions: &[usize],
) -> Result<Var> {
    let len = encoding.len();
    if len == 0 {
        return Err(Error::invalid("empty encoding"));
    }
    if len > config.max_len {
        return Err(Error::invalid(format!(
            "encoding length {len} exceeds max_len {}",
            config.max_len
        )));
    }
    let mut ids = encoding.ids.clone();
    for &p in mask_positions {
        if p >= len {
            return Err(Error::invalid(format!("mask position {p} beyond length {len}")));
        }
        ids[p] = MASK;
    }
    let vocab_size = tape.value(vars[Layout::TOKEN_EMBEDDING]).rows();
    if let Some(&bad) = ids.iter().find(|&&id| id >= vocab_size) {
        return Err(Error::TokenOutOfRange {
            id: bad,
            size: vocab_size,
        });
    }
    let keep: Vec<bool> = encoding.ids.iter().map(|&id| id != PAD).collect();
    let positions: Vec<usize> = (0..len).collect();

    let tok = tape.gather_rows(vars[Layout::TOKEN_EMBEDDING], &ids)?;
    let pos = tape.gather_rows(vars[Layout::POSITION_EMBEDDING], &positions)?;
    let mut x = tape.add(tok, pos)?;

    let layout = Layout::new(config.layers);
    let head_dim = config.model_dim / config.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    for l in 0..config.layers {
        let b = layout.block(l);
        let h = tape.layer_norm(x, vars[b.ln1_gain], vars[b.ln1_bias])?;
        let q = tape.matmul(h, vars[b.wq])?;
        let q = tape.add_row(q, vars[b.bq])?;
        // No key bias: it shifts every score in a row equally and softmax ignores it.
        let k = tape.matmul(h, vars[b.wk])?;
        let v = tape.matmul(h, vars[b.wv])?;
        let v = tape.add_row(v, vars[b.bv])?;
        let mut heads = Vec::with_capacity(config.heads);
        for hd in 0..config.heads {
            let (s, e) = (hd * head_dim, (hd + 1) * head_dim);
            let qh = tape.slice_cols(q, s, e)?;
            let kh = tape.slice_cols(k, s, e)?;
            let vh = tape.slice_cols(v, s, e)?;
            let scores = tape.matmul_t(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.masked_softmax_rows(scores, &keep)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let out = tape.matmul(merged, vars[b.wo])?;
        let out = tape.add_row(out, vars[b.bo])?;
        x = tape.add(x, out)?;

        let h = tape.layer_norm(x, vars[b.ln2_gain], vars[b.ln2_bias])?;
        let f = tape.matmul(h, vars[b.ff_w1])?;
        let f = tape.add_row(f, vars[b.ff_b1])?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, vars[b.ff_w2])?;
        let f = tape.add_row(f, vars[b.ff_b2])?;
        x = tape.add(x, f)?;
    }
    tape.layer_norm(x, vars[layout.final_gain()], vars[layout.final_bias()])
}

/// Unit-normalized mean of the content-position rows of `states`, as a `[1×d]` var.
pub fn mean_pool_on_tape(tape: &mut Tape<'_>, states: Var, encoding: &Encoding) -> Result<Var> {
    let rows = content_positions(encoding);
    if rows.is_empty() {
        return Err(Error::invalid("no content positions to pool"));
    }
    if tape.value(states).rows() != encoding.len() {
        return Err(Error::shape("states and encoding lengths differ"));
    }
    let mean = tape.mean_rows(states, &rows)?;
    tape.l2_normalize_rows(mean)
}

/// Hidden states `[L×d]` for one encoding.
pub fn forward_states(
    weights: &EncoderWeights,
    encoding: &Encoding,
    mask_positions: Option<&[usize]>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = weights.register(&mut tape);
    let out = forward_on_tape(&mut tape, &vars, weights.config(), encoding, mask_positions.unwrap_or(&[]))?;
    Ok(tape.value(out).clone())
}

/// Mean over content positions, then unit-normalized. Errors when nothing
/// contributes or the mean has norm below 1e-8.
pub fn mean_pool(states: &Tensor, encoding: &Encoding) -> Result<SentenceEmbedding> {
    let mut tape = Tape::new();
    let s = tape.param(0, states);
    let pooled = mean_pool_on_tape(&mut tape, s, encoding)?;
    Ok(SentenceEmbedding {
        vector: tape.value(pooled).data().to_vec(),
        normalized: true,
    })
}

pub fn embed_sentence(
    weights: &EncoderWeights,
    vocab: &Vocab,
    text: &str,
    max_len: usize,
) -> Result<SentenceEmbedding> {
    let enc = encode(vocab, text, max_len.min(weights.config().max_len))?;
    let states = forward_states(weights, &enc, None)?;
    mean_pool(&states, &enc)
}

/// Logit per candidate: `state · e[candidate]`.
pub fn mlm_domain_logits(weights: &EncoderWeights, state: &[f64], candidate_ids: &[usize]) -> Result<Tensor> {
    if candidate_ids.is_empty() {
        return Err(Error::invalid("empty candidate set"));
    }
    let e = weights.mlm_head_rows();
    if state.len() != e.cols() {
        return Err(Error::shape(format!("state dim {} for model_dim {}", state.len(), e.cols())));
    }
    let mut logits = Vec::with_capacity(candidate_ids.len());
    for &id in candidate_ids {
        if id >= e.rows() {
            return Err(Error::TokenOutOfRange { id, size: e.rows() });
        }
        logits.push(crate::numerics::dot(state, e.row(id)));
    }
    Ok(Tensor::row_vector(logits))
}
