//! Token masking, the in-batch contrastive loss, the domain-restricted masked
//! token loss and their weighted sum.
//!
//! The tape-level builders are what the trainer differentiates; the plain
//! functions run the same builders on a throwaway tape so both paths agree
//! bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{forward_on_tape, mean_pool_on_tape, EncoderConfig, EncoderWeights, Layout};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::tokenizer::{is_special, Encoding, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskScope {
    #[default]
    DomainOnly,
    AllTokens,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingConfig {
    pub rate: f64,
    pub scope: MaskScope,
    pub seed: u64,
    /// Also mask the document side of each pair.
    pub mask_documents: bool,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            rate: 0.15,
            scope: MaskScope::DomainOnly,
            seed: 0,
            mask_documents: false,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::invalid(format!("masking rate {} outside [0, 1]", self.rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    Dot,
    #[default]
    Cosine,
}

/// Which hidden state scores a masked position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MlmState {
    #[default]
    Position,
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointLossConfig {
    pub alpha: f64,
    pub scoring: Scoring,
    pub tau: f64,
    pub mlm_state: MlmState,
}

impl Default for JointLossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            scoring: Scoring::Cosine,
            tau: 0.05,
            mlm_state: MlmState::Position,
        }
    }
}

impl JointLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// An encoding plus the positions fed `[MASK]` and the ids they hid.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedEncoding {
    pub encoding: Encoding,
    pub mask_positions: Vec<usize>,
    pub targets: Vec<usize>,
}

impl MaskedEncoding {
    pub fn unmasked(encoding: Encoding) -> Self {
        Self {
            encoding,
            mask_positions: Vec::new(),
            targets: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub queries: Vec<MaskedEncoding>,
    pub documents: Vec<MaskedEncoding>,
    pub pair_indices: Vec<usize>,
}

impl MaskedBatch {
    /// Both sides unmasked.
    pub fn plain(queries: Vec<Encoding>, documents: Vec<Encoding>, pair_indices: Vec<usize>) -> Self {
        Self {
            queries: queries.into_iter().map(MaskedEncoding::unmasked).collect(),
            documents: documents.into_iter().map(MaskedEncoding::unmasked).collect(),
            pair_indices,
        }
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn mask_count(&self) -> usize {
        self.queries
            .iter()
            .chain(&self.documents)
            .map(|m| m.mask_positions.len())
            .sum()
    }
}

fn eligible(enc: &Encoding, pos: usize, scope: MaskScope) -> bool {
    let id = enc.ids[pos];
    if is_special(id) {
        return false;
    }
    match scope {
        MaskScope::DomainOnly => enc.is_domain[pos],
        MaskScope::AllTokens => true,
    }
}

fn mask_one(enc: &Encoding, scope: MaskScope, rate: f64, rng: &mut ChaCha8Rng) -> MaskedEncoding {
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for pos in 0..enc.len() {
        if eligible(enc, pos, scope) && rng.gen::<f64>() < rate {
            positions.push(pos);
            targets.push(enc.ids[pos]);
        }
    }
    MaskedEncoding {
        encoding: enc.clone(),
        mask_positions: positions,
        targets,
    }
}

/// Mask each eligible query position independently with probability `rate`.
/// One uniform draw is consumed per eligible position, queries first, then
/// documents when `mask_documents` is set.
pub fn apply_domain_masking(
    queries: &[Encoding],
    documents: &[Encoding],
    pair_indices: &[usize],
    config: &MaskingConfig,
) -> Result<MaskedBatch> {
    config.validate()?;
    if queries.len() != documents.len() || queries.len() != pair_indices.len() {
        return Err(Error::shape("queries, documents and pair indices differ in length"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let q = queries
        .iter()
        .map(|e| mask_one(e, config.scope, config.rate, &mut rng))
        .collect();
    let d = documents
        .iter()
        .map(|e| {
            if config.mask_documents {
                mask_one(e, config.scope, config.rate, &mut rng)
            } else {
                MaskedEncoding::unmasked(e.clone())
            }
        })
        .collect();
    Ok(MaskedBatch {
        queries: q,
        documents: d,
        pair_indices: pair_indices.to_vec(),
    })
}

/// Candidate ids scored by the masked-token head, ascending.
pub fn candidate_ids(vocab: &Vocab, scope: MaskScope) -> Result<Vec<usize>> {
    let ids = match scope {
        MaskScope::DomainOnly => vocab.domain_ids(),
        MaskScope::AllTokens => vocab.non_special_ids(),
    };
    if ids.is_empty() {
        return Err(Error::invalid(match scope {
            MaskScope::DomainOnly => "domain vocabulary is empty",
            MaskScope::AllTokens => "vocabulary has no non-special tokens",
        }));
    }
    Ok(ids)
}

/// In-batch contrastive loss over `[B×d]` query and document rows.
pub fn contrastive_on_tape(tape: &mut Tape<'_>, queries: Var, documents: Var, config: &JointLossConfig) -> Result<Var> {
    let (b, bd) = (tape.value(queries).rows(), tape.value(documents).rows());
    if b != bd {
        return Err(Error::shape(format!("{b} queries against {bd} documents")));
    }
    if b < 2 {
        return Err(Error::invalid("contrastive loss needs at least 2 pairs"));
    }
    let scores = match config.scoring {
        Scoring::Dot => tape.matmul_t(queries, documents)?,
        Scoring::Cosine => {
            let q = tape.l2_normalize_rows(queries)?;
            let d = tape.l2_normalize_rows(documents)?;
            let s = tape.matmul_t(q, d)?;
            tape.scale(s, 1.0 / config.tau)
        }
    };
    let targets: Vec<usize> = (0..b).collect();
    tape.cross_entropy_rows(scores, &targets)
}

/// Mean cross-entropy of `states` rows against `targets`, scored only over `candidates`
/// via dot products with rows of `embedding`. No rows gives a constant 0.
pub fn mlm_on_tape(
    tape: &mut Tape<'_>,
    states: Option<Var>,
    targets: &[usize],
    embedding: Var,
    candidates: &[usize],
) -> Result<Var> {
    let Some(states) = states else {
        if !targets.is_empty() {
            return Err(Error::shape("targets without states"));
        }
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    if candidates.is_empty() {
        return Err(Error::invalid("empty candidate set"));
    }
    let mut local = Vec::with_capacity(targets.len());
    for &t in targets {
        match candidates.iter().position(|&c| c == t) {
            Some(i) => local.push(i),
            None => return Err(Error::invalid(format!("target id {t} is not a candidate"))),
        }
    }
    let rows = tape.gather_rows(embedding, candidates)?;
    let logits = tape.matmul_t(states, rows)?;
    tape.cross_entropy_rows(logits, &local)
}

/// Domain loss for fixed state rows `[M×d]`; 0 when `M == 0`.
pub fn mlm_domain_loss(
    states: &Tensor,
    targets: &[usize],
    weights: &EncoderWeights,
    vocab: &Vocab,
    scope: MaskScope,
) -> Result<f64> {
    if states.is_matrix() && states.rows() != targets.len() {
        return Err(Error::shape(format!("{} states for {} targets", states.rows(), targets.len())));
    }
    if targets.is_empty() {
        return Ok(0.0);
    }
    let candidates = candidate_ids(vocab, scope)?;
    let mut tape = Tape::new();
    let s = tape.param(0, states);
    let e = tape.param(1, weights.embedding());
    let out = mlm_on_tape(&mut tape, Some(s), targets, e, &candidates)?;
    Ok(tape.value(out).item())
}

pub fn contrastive_loss(queries: &Tensor, documents: &Tensor, config: &JointLossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let q = tape.param(0, queries);
    let d = tape.param(1, documents);
    let out = contrastive_on_tape(&mut tape, q, d, config)?;
    Ok(tape.value(out).item())
}

/// `alpha·mlm + cl`.
pub fn joint_loss(mlm: f64, cl: f64, alpha: f64) -> Result<f64> {
    if !(mlm >= 0.0) || !(cl >= 0.0) || !(alpha >= 0.0) {
        return Err(Error::invalid(format!(
            "joint loss needs non-negative inputs (mlm {mlm}, cl {cl}, alpha {alpha})"
        )));
    }
    Ok(alpha * mlm + cl)
}

/// Loss nodes for one batch.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub total: Var,
    pub cl: Var,
    pub mlm: Option<Var>,
}

/// Encode both sides of `batch`, pool, and build the contrastive loss plus,
/// when `mlm` is given, `alpha` times the masked-token loss over its candidates.
pub fn batch_objective_on_tape(
    tape: &mut Tape<'_>,
    vars: &[Var],
    cfg: &EncoderConfig,
    batch: &MaskedBatch,
    joint: &JointLossConfig,
    mlm: Option<&[usize]>,
) -> Result<ObjectiveVars> {
    let mut pooled_q = Vec::with_capacity(batch.len());
    let mut pooled_d = Vec::with_capacity(batch.len());
    let mut states = Vec::new();
    let mut targets = Vec::new();
    for (side, pooled) in [(&batch.queries, &mut pooled_q), (&batch.documents, &mut pooled_d)] {
        for m in side.iter() {
            let h = forward_on_tape(tape, vars, cfg, &m.encoding, &m.mask_positions)?;
            let p = mean_pool_on_tape(tape, h, &m.encoding)?;
            pooled.push(p);
            if mlm.is_some() && !m.mask_positions.is_empty() {
                let rows = match joint.mlm_state {
                    MlmState::Position => tape.gather_rows(h, &m.mask_positions)?,
                    MlmState::Pooled => tape.gather_rows(p, &vec![0; m.mask_positions.len()])?,
                };
                states.push(rows);
                targets.extend_from_slice(&m.targets);
            }
        }
    }
    let q = tape.concat_rows(&pooled_q)?;
    let d = tape.concat_rows(&pooled_d)?;
    let cl = contrastive_on_tape(tape, q, d, joint)?;
    let Some(candidates) = mlm else {
        return Ok(ObjectiveVars { total: cl, cl, mlm: None });
    };
    let states = match states.len() {
        0 => None,
        1 => Some(states[0]),
        _ => Some(tape.concat_rows(&states)?),
    };
    let mlm_loss = mlm_on_tape(tape, states, &targets, vars[Layout::TOKEN_EMBEDDING], candidates)?;
    let weighted = tape.scale(mlm_loss, joint.alpha);
    let total = tape.add(weighted, cl)?;
    Ok(ObjectiveVars {
        total,
        cl,
        mlm: Some(mlm_loss),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{CLS, SEP};
    use std::collections::BTreeSet;

    fn dot() -> JointLossConfig {
        JointLossConfig {
            scoring: Scoring::Dot,
            ..Default::default()
        }
    }

    #[test]
    fn contrastive_examples() {
        let same = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let l = contrastive_loss(&same, &same, &dot()).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);

        let q = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let d = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        // Both rows are mirror images, so the mean equals the first row's term.
        let l = contrastive_loss(&q, &d, &dot()).unwrap();
        assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.313_261_7).abs() < 1e-7);

        let one = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(contrastive_loss(&one, &one, &dot()).is_err());
    }

    #[test]
    fn cosine_scoring_ignores_scale() {
        let q = Tensor::from_rows(&[vec![1.0, 0.2], vec![0.3, 1.0]]).unwrap();
        let d = Tensor::from_rows(&[vec![0.9, 0.1], vec![-0.2, 1.0]]).unwrap();
        let q5 = Tensor::new(vec![2, 2], q.data().iter().map(|v| v * 5.0).collect()).unwrap();
        let cfg = JointLossConfig::default();
        let a = contrastive_loss(&q, &d, &cfg).unwrap();
        let b = contrastive_loss(&q5, &d, &cfg).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn joint_examples() {
        assert_eq!(joint_loss(1.7, 0.25, 0.0).unwrap(), 0.25);
        assert!((joint_loss(1.0, 0.5, 0.3).unwrap() - 0.8).abs() < 1e-12);
        assert!(joint_loss(1.0, 0.5, -0.1).is_err());
        assert!(joint_loss(-1.0, 0.5, 0.3).is_err());
    }

    fn enc(vocab: &Vocab, ids: Vec<usize>) -> Encoding {
        Encoding::from_ids(vocab, ids).unwrap()
    }

    fn domain_vocab() -> Vocab {
        let tokens: Vec<String> = crate::tokenizer::SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(["a", "b", "c", "x", "y"].map(String::from))
            .collect();
        Vocab::from_full_list(tokens, BTreeSet::from([8, 9])).unwrap()
    }

    #[test]
    fn masking_rate_extremes_and_scope() {
        let v = domain_vocab();
        let e = enc(&v, vec![CLS, 5, 8, 6, 9, 9, SEP]);
        let none = apply_domain_masking(&[e.clone()], &[e.clone()], &[0], &MaskingConfig { rate: 0.0, ..Default::default() }).unwrap();
        assert_eq!(none.mask_count(), 0);

        let all = MaskingConfig { rate: 1.0, ..Default::default() };
        let b = apply_domain_masking(&[e.clone()], &[e.clone()], &[0], &all).unwrap();
        assert_eq!(b.queries[0].mask_positions, vec![2, 4, 5]);
        assert_eq!(b.queries[0].targets, vec![8, 9, 9]);
        assert!(b.documents[0].mask_positions.is_empty());

        let every = MaskingConfig { rate: 1.0, scope: MaskScope::AllTokens, mask_documents: true, ..Default::default() };
        let b = apply_domain_masking(&[e.clone()], &[e.clone()], &[0], &every).unwrap();
        assert_eq!(b.queries[0].mask_positions, vec![1, 2, 3, 4, 5]);
        assert_eq!(b.documents[0].mask_positions, vec![1, 2, 3, 4, 5]);

        assert!(MaskingConfig { rate: 1.5, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn masking_is_seed_deterministic() {
        let v = domain_vocab();
        let e = enc(&v, vec![CLS, 8, 9, 8, 9, 8, 9, 8, 9, SEP]);
        let cfg = MaskingConfig { rate: 0.5, seed: 11, ..Default::default() };
        let a = apply_domain_masking(&[e.clone()], &[e.clone()], &[0], &cfg).unwrap();
        let b = apply_domain_masking(&[e.clone()], &[e.clone()], &[0], &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mlm_loss_examples() {
        let v = domain_vocab();
        let w = crate::encoder::init_weights(&crate::encoder::EncoderConfig {
            vocab_size: v.len(),
            model_dim: 4,
            heads: 1,
            ff_dim: 4,
            layers: 0,
            ..Default::default()
        })
        .unwrap();
        let zero = Tensor::zeros(&[2, 4]);
        let l = mlm_domain_loss(&zero, &[8, 9], &w, &v, MaskScope::DomainOnly).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert_eq!(mlm_domain_loss(&Tensor::zeros(&[0, 4]), &[], &w, &v, MaskScope::DomainOnly).unwrap(), 0.0);
        assert!(mlm_domain_loss(&Tensor::zeros(&[1, 4]), &[5], &w, &v, MaskScope::DomainOnly).is_err());
        let all = mlm_domain_loss(&Tensor::zeros(&[1, 4]), &[5], &w, &v, MaskScope::AllTokens).unwrap();
        assert!((all - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_candidate_gives_zero() {
        let tokens: Vec<String> = crate::tokenizer::SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(["a", "z"].map(String::from))
            .collect();
        let v = Vocab::from_full_list(tokens, BTreeSet::from([6])).unwrap();
        let w = crate::encoder::init_weights(&crate::encoder::EncoderConfig {
            vocab_size: v.len(),
            model_dim: 4,
            heads: 1,
            ff_dim: 4,
            layers: 0,
            ..Default::default()
        })
        .unwrap();
        let s = Tensor::from_rows(&[vec![3.0, -1.0, 2.0, 0.5]]).unwrap();
        assert_eq!(mlm_domain_loss(&s, &[6], &w, &v, MaskScope::DomainOnly).unwrap(), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(JointLossConfig { alpha: -1.0, ..Default::default() }.validate().is_err());
        assert!(JointLossConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(JointLossConfig::default().validate().is_ok());
    }
}
