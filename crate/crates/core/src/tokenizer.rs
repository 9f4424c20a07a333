//! Subword vocabulary: training, greedy longest-match encoding, and
//! augmentation of a base vocabulary with domain tokens.
//!
//! Text is normalized by lowercasing and splitting on whitespace. Word-initial
//! pieces are stored as-is; pieces that continue a word carry the `##` prefix.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::numerics::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;
pub const CLS: usize = 3;
pub const SEP: usize = 4;
pub const NUM_SPECIALS: usize = 5;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["[PAD]", "[UNK]", "[MASK]", "[CLS]", "[SEP]"];
pub const CONTINUATION: &str = "##";

pub fn is_special(id: usize) -> bool {
    id < NUM_SPECIALS
}

/// Token inventory with the domain subset used as the restricted MLM candidate set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    id_of: HashMap<String, usize>,
    domain_ids: BTreeSet<usize>,
}

impl Vocab {
    /// Build from the non-special tokens; specials are prepended at ids 0–4.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let all = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(tokens.into_iter().map(Into::into))
            .collect();
        Self::from_full_list(all, BTreeSet::new())
    }

    /// Build from a complete token list (specials included) and domain ids.
    pub fn from_full_list(tokens: Vec<String>, domain_ids: BTreeSet<usize>) -> Result<Self> {
        if tokens.len() < NUM_SPECIALS
            || tokens[..NUM_SPECIALS]
                .iter()
                .zip(SPECIAL_TOKENS)
                .any(|(t, s)| t != s)
        {
            return Err(Error::invalid("vocabulary must start with the five special tokens"));
        }
        let mut id_of = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("invalid token {t:?} at id {i}")));
            }
            if id_of.insert(t.clone(), i).is_some() {
                return Err(Error::DuplicateId(t.clone()));
            }
        }
        if let Some(&bad) = domain_ids
            .iter()
            .find(|&&id| is_special(id) || id >= tokens.len())
        {
            return Err(Error::invalid(format!("domain id {bad} is special or out of range")));
        }
        Ok(Self {
            tokens,
            id_of,
            domain_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == NUM_SPECIALS
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.id_of.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.id_of.contains_key(token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_domain(&self, id: usize) -> bool {
        self.domain_ids.contains(&id)
    }

    /// Domain ids in ascending order.
    pub fn domain_ids(&self) -> Vec<usize> {
        self.domain_ids.iter().copied().collect()
    }

    pub fn domain_len(&self) -> usize {
        self.domain_ids.len()
    }

    /// Every non-special id in ascending order.
    pub fn non_special_ids(&self) -> Vec<usize> {
        (NUM_SPECIALS..self.tokens.len()).collect()
    }

    fn max_token_chars(&self) -> usize {
        self.tokens.iter().map(|t| t.chars().count()).max().unwrap_or(0)
    }

    /// One token per line, line number = id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    /// Domain token strings, one per line, in id order.
    pub fn domain_text(&self) -> String {
        let mut out = String::new();
        for &id in &self.domain_ids {
            out.push_str(&self.tokens[id]);
            out.push('\n');
        }
        out
    }

    pub fn from_text(vocab_text: &str, domain_text: &str) -> Result<Self> {
        let tokens: Vec<String> = vocab_text.lines().map(str::to_string).collect();
        let mut vocab = Self::from_full_list(tokens, BTreeSet::new())?;
        let mut domain = BTreeSet::new();
        for line in domain_text.lines().filter(|l| !l.is_empty()) {
            let id = vocab
                .id(line)
                .ok_or_else(|| Error::invalid(format!("domain token {line:?} not in vocabulary")))?;
            domain.insert(id);
        }
        vocab = Self::from_full_list(vocab.tokens, domain)?;
        Ok(vocab)
    }

    /// Write the vocabulary file and its domain sidecar.
    pub fn save(&self, vocab_path: &Path, domain_path: &Path) -> Result<()> {
        write_atomic(vocab_path, self.to_text().as_bytes())?;
        write_atomic(domain_path, self.domain_text().as_bytes())
    }

    pub fn load(vocab_path: &Path, domain_path: Option<&Path>) -> Result<Self> {
        let vocab_text = std::fs::read_to_string(vocab_path)?;
        let domain_text = match domain_path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::from_text(&vocab_text, &domain_text)
    }

    fn push_domain(&mut self, token: String) -> usize {
        let id = self.tokens.len();
        self.id_of.insert(token.clone(), id);
        self.tokens.push(token);
        self.domain_ids.insert(id);
        id
    }
}

/// A tokenized context wrapped in `[CLS] … [SEP]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<usize>,
    pub is_domain: Vec<bool>,
}

impl Encoding {
    pub fn from_ids(vocab: &Vocab, ids: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab.len()) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                size: vocab.len(),
            });
        }
        let is_domain = ids.iter().map(|&id| vocab.is_domain(id)).collect();
        Ok(Self { ids, is_domain })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Append `[PAD]` up to `len`.
    pub fn padded(mut self, len: usize) -> Self {
        while self.ids.len() < len {
            self.ids.push(PAD);
            self.is_domain.push(false);
        }
        self
    }
}

/// A domain token appended during augmentation, with its base-vocabulary segmentation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NewTokenRecord {
    pub token: String,
    pub decomposition: Vec<usize>,
    pub assigned_id: usize,
}

fn normalize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Greedy longest-match-first segmentation of one word. `continuation`
/// marks the first piece as word-internal. Returns `None` when some span
/// cannot be matched.
fn segment_word(vocab: &Vocab, word: &str, continuation: bool, max_chars: usize) -> Option<Vec<usize>> {
    let chars: Vec<char> = word.chars().collect();
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len().min(start + max_chars);
        let mut found = None;
        while end > start {
            let body: String = chars[start..end].iter().collect();
            let candidate = if start > 0 || continuation {
                format!("{CONTINUATION}{body}")
            } else {
                body
            };
            if let Some(id) = vocab.id(&candidate) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        pieces.push(found?);
        start = end;
    }
    Some(pieces)
}

/// Train a vocabulary of `target_size` tokens (specials included).
///
/// Whole words are taken first by corpus frequency; remaining slots go to
/// substrings (word-initial, or `##`-prefixed when word-internal) by
/// occurrence frequency. Ties break by lexicographic token order. Token ids
/// follow selection order, so a lower id means a higher frequency rank.
pub fn train_subword_vocab<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Vocab> {
    if target_size <= NUM_SPECIALS {
        return Err(Error::invalid(format!(
            "target size {target_size} leaves no room beyond the special tokens"
        )));
    }
    let mut word_counts: HashMap<String, u64> = HashMap::new();
    for line in corpus {
        for w in normalize(line.as_ref()) {
            *word_counts.entry(w).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let by_rank = |counts: HashMap<String, u64>| {
        let mut v: Vec<(String, u64)> = counts.into_iter().collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v
    };

    let mut substr_counts: HashMap<String, u64> = HashMap::new();
    for (word, &count) in &word_counts {
        let chars: Vec<char> = word.chars().collect();
        let n = chars.len();
        for s in 0..n {
            for e in s + 1..=n {
                if s == 0 && e == n {
                    continue;
                }
                let body: String = chars[s..e].iter().collect();
                let tok = if s == 0 { body } else { format!("{CONTINUATION}{body}") };
                *substr_counts.entry(tok).or_default() += count;
            }
        }
    }

    let budget = target_size - NUM_SPECIALS;
    let mut chosen: Vec<String> = Vec::with_capacity(budget);
    let mut seen = std::collections::HashSet::new();
    for (tok, _) in by_rank(word_counts).into_iter().chain(by_rank(substr_counts)) {
        if chosen.len() == budget {
            break;
        }
        if seen.insert(tok.clone()) {
            chosen.push(tok);
        }
    }
    Vocab::from_tokens(chosen)
}

/// Lowercase, split on whitespace, segment each word, wrap in `[CLS] … [SEP]`
/// and truncate to `max_len`. A word with any unmatched span becomes one `[UNK]`.
pub fn encode(vocab: &Vocab, text: &str, max_len: usize) -> Result<Encoding> {
    if max_len < 2 {
        return Err(Error::invalid("max_len must be at least 2"));
    }
    let max_chars = vocab.max_token_chars();
    let mut ids = vec![CLS];
    for word in normalize(text) {
        if ids.len() >= max_len - 1 {
            break;
        }
        match segment_word(vocab, &word, false, max_chars) {
            Some(pieces) => ids.extend(pieces),
            None => ids.push(UNK),
        }
    }
    ids.truncate(max_len - 1);
    ids.push(SEP);
    Encoding::from_ids(vocab, ids)
}

/// Inverse of [`encode`] for in-vocabulary text: specials are dropped and
/// `##` pieces are glued onto the preceding piece.
pub fn decode(vocab: &Vocab, ids: &[usize]) -> Result<String> {
    let mut out = String::new();
    for &id in ids {
        let tok = vocab.token(id).ok_or(Error::TokenOutOfRange {
            id,
            size: vocab.len(),
        })?;
        if is_special(id) {
            continue;
        }
        match tok.strip_prefix(CONTINUATION) {
            Some(rest) if !rest.is_empty() => out.push_str(rest),
            _ => {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
    }
    Ok(out)
}

/// Append domain tokens missing from `base`, in the domain vocabulary's rank
/// order, up to `max_new`. Candidates whose base segmentation needs `[UNK]`
/// are skipped. Added ids join the domain set.
pub fn augment_vocabulary(
    base: &Vocab,
    domain: &Vocab,
    max_new: usize,
) -> Result<(Vocab, Vec<NewTokenRecord>)> {
    let mut out = base.clone();
    let mut records = Vec::new();
    if max_new == 0 {
        return Ok((out, records));
    }
    let max_chars = base.max_token_chars();
    for id in domain.non_special_ids() {
        if records.len() == max_new {
            break;
        }
        let token = &domain.tokens[id];
        if base.contains(token) {
            continue;
        }
        let segmented = match token.strip_prefix(CONTINUATION) {
            Some(rest) if !rest.is_empty() => segment_word(base, rest, true, max_chars),
            Some(_) => None,
            None => segment_word(base, token, false, max_chars),
        };
        let Some(decomposition) = segmented else { continue };
        if decomposition.is_empty() || decomposition.contains(&UNK) {
            continue;
        }
        let assigned_id = out.push_domain(token.clone());
        records.push(NewTokenRecord {
            token: token.clone(),
            decomposition,
            assigned_id,
        });
    }
    Ok((out, records))
}

/// Extend a `[V×d]` embedding matrix with one row per record, each the mean
/// of its decomposition rows. Existing rows are copied unchanged.
pub fn init_new_embeddings(matrix: &Tensor, records: &[NewTokenRecord]) -> Result<Tensor> {
    if !matrix.is_matrix() {
        return Err(Error::shape("embedding matrix must be 2-D"));
    }
    let (v, d) = (matrix.rows(), matrix.cols());
    let mut data = matrix.data().to_vec();
    data.reserve(records.len() * d);
    for (i, rec) in records.iter().enumerate() {
        if rec.decomposition.is_empty() {
            return Err(Error::invalid(format!("empty decomposition for {:?}", rec.token)));
        }
        if rec.assigned_id != v + i {
            return Err(Error::invalid(format!(
                "record {:?} has id {}, expected {}",
                rec.token,
                rec.assigned_id,
                v + i
            )));
        }
        let mut row = vec![0.0; d];
        for &id in &rec.decomposition {
            if id >= v {
                return Err(Error::TokenOutOfRange { id, size: v });
            }
            for (a, x) in row.iter_mut().zip(matrix.row(id)) {
                *a += x;
            }
        }
        let n = rec.decomposition.len() as f64;
        data.extend(row.into_iter().map(|x| x / n));
    }
    Tensor::new(vec![v + records.len(), d], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ab_cd() -> Vocab {
        Vocab::from_tokens(["ab", "##cd"]).unwrap()
    }

    #[test]
    fn specials_occupy_first_five_ids() {
        let v = train_subword_vocab(&["hello world"], 10).unwrap();
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(v.id(s), Some(i));
        }
    }

    #[test]
    fn single_repeated_word_is_a_token() {
        let v = train_subword_vocab(&["aa aa aa"], 6).unwrap();
        assert!(v.contains("aa"));
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn training_rejects_tiny_target_and_blank_corpus() {
        assert!(train_subword_vocab(&["a b"], 5).is_err());
        assert!(matches!(
            train_subword_vocab(&["   \n\t "], 10),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["the cat sat", "the dog sat on the mat", "cats and dogs"];
        assert_eq!(
            train_subword_vocab(&corpus, 40).unwrap(),
            train_subword_vocab(&corpus, 40).unwrap()
        );
    }

    #[test]
    fn substrings_follow_whole_words() {
        let v = train_subword_vocab(&["abc abc abd"], 9).unwrap();
        // words abc(2), abd(1); then "##b", "a", "ab" tie at 3 and sort lexicographically
        assert_eq!(&v.tokens()[5..], &["abc", "abd", "##b", "a"]);
    }

    #[test]
    fn encode_edge_cases() {
        let v = ab_cd();
        assert_eq!(encode(&v, "", 8).unwrap().ids, vec![CLS, SEP]);
        assert_eq!(encode(&v, "zzz", 8).unwrap().ids, vec![CLS, UNK, SEP]);
        let ab = v.id("ab").unwrap();
        let cd = v.id("##cd").unwrap();
        assert_eq!(encode(&v, "ABCD", 8).unwrap().ids, vec![CLS, ab, cd, SEP]);
        assert_eq!(encode(&v, "abcd abcd", 4).unwrap().ids, vec![CLS, ab, cd, SEP]);
        assert_eq!(encode(&v, "abcd", 2).unwrap().ids, vec![CLS, SEP]);
        assert!(encode(&v, "abcd", 1).is_err());
    }

    #[test]
    fn decode_examples() {
        let v = ab_cd();
        assert_eq!(decode(&v, &[CLS, SEP]).unwrap(), "");
        let ids = encode(&v, "abcd", 8).unwrap().ids;
        assert_eq!(decode(&v, &ids).unwrap(), "abcd");
        assert!(decode(&v, &[99]).is_err());
    }

    #[test]
    fn augmentation_examples() {
        let base = ab_cd();
        let domain = Vocab::from_tokens(["abcd", "ab", "qz"]).unwrap();
        let (out, recs) = augment_vocabulary(&base, &domain, 10).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].token, "abcd");
        assert_eq!(
            recs[0].decomposition,
            vec![base.id("ab").unwrap(), base.id("##cd").unwrap()]
        );
        assert_eq!(recs[0].assigned_id, base.len());
        assert!(out.is_domain(recs[0].assigned_id));
        assert_eq!(&out.tokens()[..base.len()], base.tokens());

        let (same, none) = augment_vocabulary(&base, &domain, 0).unwrap();
        assert_eq!(same, base);
        assert!(none.is_empty());
    }

    #[test]
    fn continuation_candidates_segment_in_continuation_mode() {
        let base = Vocab::from_tokens(["x", "##y", "##z"]).unwrap();
        let domain = Vocab::from_tokens(["##yz"]).unwrap();
        let (_, recs) = augment_vocabulary(&base, &domain, 5).unwrap();
        assert_eq!(recs[0].decomposition, vec![6, 7]);
    }

    #[test]
    fn augmentation_respects_max_new_and_domain_order() {
        let base = Vocab::from_tokens(["a", "b", "##a", "##b"]).unwrap();
        let domain = Vocab::from_tokens(["ab", "ba", "aa", "bb"]).unwrap();
        let (out, recs) = augment_vocabulary(&base, &domain, 2).unwrap();
        let names: Vec<_> = recs.iter().map(|r| r.token.as_str()).collect();
        assert_eq!(names, ["ab", "ba"]);
        assert_eq!(out.len(), base.len() + 2);
    }

    #[test]
    fn new_rows_are_decomposition_means() {
        let m = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![3.0, 0.0], vec![0.0, 3.0], vec![0.0, 0.0]])
            .unwrap();
        let rec = |id, d: Vec<usize>| NewTokenRecord {
            token: format!("t{id}"),
            decomposition: d,
            assigned_id: id,
        };
        let out = init_new_embeddings(&m, &[rec(5, vec![0, 1]), rec(6, vec![3]), rec(7, vec![2, 3, 4])]).unwrap();
        assert_eq!(out.row(5), &[0.5, 0.5]);
        assert_eq!(out.row(6), &[0.0, 3.0]);
        assert_eq!(out.row(7), &[1.0, 1.0]);
        assert_eq!(&out.data()[..m.len()], m.data());
        assert!(init_new_embeddings(&m, &[rec(5, vec![])]).is_err());
        assert!(init_new_embeddings(&m, &[rec(5, vec![9])]).is_err());
    }

    #[test]
    fn vocab_text_round_trip() {
        let base = ab_cd();
        let domain = Vocab::from_tokens(["abcd"]).unwrap();
        let (v, _) = augment_vocabulary(&base, &domain, 1).unwrap();
        let back = Vocab::from_text(&v.to_text(), &v.domain_text()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_text(), v.to_text());
    }

    #[test]
    fn vocab_rejects_bad_lists() {
        assert!(Vocab::from_tokens(["a", "a"]).is_err());
        assert!(Vocab::from_full_list(vec!["x".into()], BTreeSet::new()).is_err());
        let tokens = Vocab::from_tokens(["a"]).unwrap().tokens().to_vec();
        assert!(Vocab::from_full_list(tokens, [UNK].into_iter().collect()).is_err());
    }

    proptest! {
        #[test]
        fn in_vocab_words_round_trip(words in proptest::collection::vec("[a-f]{1,6}", 1..6)) {
            let corpus = vec![words.join(" ")];
            let vocab = train_subword_vocab(&corpus, 400).unwrap();
            let enc = encode(&vocab, &corpus[0], 256).unwrap();
            prop_assert!(!enc.ids.contains(&MASK));
            prop_assert!(!enc.ids.contains(&UNK));
            prop_assert_eq!(decode(&vocab, &enc.ids).unwrap(), words.join(" "));
        }

        #[test]
        fn augmentation_keeps_base_ids_stable(
            base_words in proptest::collection::vec("[a-d]{1,4}", 1..8),
            domain_words in proptest::collection::vec("[a-d]{2,6}", 1..8),
            max_new in 0usize..6,
        ) {
            let base = train_subword_vocab(&[base_words.join(" ")], 60).unwrap();
            let domain = train_subword_vocab(&[domain_words.join(" ")], 40).unwrap();
            let (out, recs) = augment_vocabulary(&base, &domain, max_new).unwrap();
            prop_assert!(recs.len() <= max_new);
            prop_assert_eq!(&out.tokens()[..base.len()], base.tokens());
            prop_assert_eq!(out.len() - base.len(), recs.len());
            for r in &recs {
                prop_assert!(out.is_domain(r.assigned_id));
                prop_assert!(!r.decomposition.contains(&UNK));
                prop_assert!(!base.contains(&r.token));
            }
        }
    }
}
