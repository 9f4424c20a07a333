//! Training pairs, a synthetic desk-scale corpus, an exact cosine index, and
//! consistency filtering of pairs against that index.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Display;
use std::hash::Hash;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm};

/// Pairs where either side is shorter than this (in characters, trimmed) are dropped on load.
pub const DEFAULT_MIN_CHARS: usize = 8;

/// A (query, document) training pair, e.g. a title and its abstract.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub query: String,
    pub document: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<BTreeMap<String, String>>,
}

impl PairRecord {
    pub fn new(query: impl Into<String>, document: impl Into<String>) -> Self {
        Self {
            query: query.into(),
            document: document.into(),
            meta: None,
        }
    }
}

/// Result of [`load_pairs`].
#[derive(Clone, Debug, Default)]
pub struct LoadedPairs {
    pub records: Vec<PairRecord>,
    /// Lines that failed to parse or lacked a required field.
    pub malformed: usize,
    /// Well-formed lines dropped for being too short.
    pub too_short: usize,
}

/// Parse line-delimited JSON pairs from `text`.
pub fn parse_pairs(text: &str, limit: Option<usize>, min_chars: usize) -> LoadedPairs {
    let mut out = LoadedPairs::default();
    for line in text.lines() {
        if limit.is_some_and(|n| out.records.len() >= n) {
            break;
        }
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(_) => {
                out.malformed += 1;
                continue;
            }
        };
        let (q, d) = (rec.query.trim(), rec.document.trim());
        if q.is_empty() || d.is_empty() {
            out.malformed += 1;
        } else if q.chars().count() < min_chars || d.chars().count() < min_chars {
            out.too_short += 1;
        } else {
            out.records.push(rec);
        }
    }
    out
}

/// Load pairs from a JSON-lines file with fields `query`, `document`, optional `meta`.
pub fn load_pairs(path: &Path, limit: Option<usize>) -> Result<LoadedPairs> {
    load_pairs_with(path, limit, DEFAULT_MIN_CHARS)
}

pub fn load_pairs_with(path: &Path, limit: Option<usize>, min_chars: usize) -> Result<LoadedPairs> {
    let text = std::fs::read_to_string(path)?;
    let loaded = parse_pairs(&text, limit, min_chars);
    if loaded.records.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!(
                "no valid pairs ({} malformed, {} too short)",
                loaded.malformed, loaded.too_short
            ),
        });
    }
    Ok(loaded)
}

pub fn pairs_to_jsonl(pairs: &[PairRecord]) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(p).expect("pair serializes"));
        out.push('\n');
    }
    out
}

/// Generated corpus with the pseudo-domain terms it uses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub pairs: Vec<PairRecord>,
    pub domain_terms: Vec<String>,
    /// Words that occur in the corpus but are not domain terms.
    pub general_words: Vec<String>,
}

impl SyntheticCorpus {
    /// The corpus text with every domain term removed, one line per side.
    pub fn general_text(&self) -> Vec<String> {
        let domain: HashSet<&str> = self.domain_terms.iter().map(String::as_str).collect();
        self.pairs
            .iter()
            .flat_map(|p| [&p.query, &p.document])
            .map(|t| {
                t.split_whitespace()
                    .filter(|w| !domain.contains(w))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect()
    }

    /// Every query and document, one line each.
    pub fn all_text(&self) -> Vec<String> {
        self.pairs
            .iter()
            .flat_map(|p| [p.query.clone(), p.document.clone()])
            .collect()
    }
}

const ONSETS: [&str; 16] = [
    "b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const DOMAIN_SUFFIXES: [&str; 6] = ["ase", "itis", "ocyte", "amine", "ogen", "emia"];

fn pseudo_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
        w.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
    }
    w
}

fn unique_words(
    rng: &mut ChaCha8Rng,
    n: usize,
    taken: &mut HashSet<String>,
    make: impl Fn(&mut ChaCha8Rng) -> String,
) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = make(rng);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

const QUERY_CORE: usize = 2;
const DOC_CORE: usize = 3;
const QUERY_FILLERS: usize = 1;
const DOC_FILLERS: usize = 3;
const FILLER_POOL: usize = 40;

/// Deterministic corpus of topic pairs.
///
/// Every pair owns three core words no other pair uses. Its query holds two
/// of them, one pseudo-domain term and one filler; its document holds all
/// three, the same domain term and three fillers (all words in a document are
/// distinct). A query therefore shares at least three words with its own
/// document and at most two with any other, so under bag-of-words cosine the
/// true document is the unique nearest neighbour.
pub fn gen_synthetic_corpus(seed: u64, n_pairs: usize, n_domain_terms: usize) -> Result<SyntheticCorpus> {
    if n_pairs < 2 || n_domain_terms < 1 {
        return Err(Error::invalid("need n_pairs >= 2 and n_domain_terms >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = HashSet::new();
    let domain_terms = unique_words(&mut rng, n_domain_terms, &mut taken, |r| {
        let stem = pseudo_word(r, 2);
        format!("{stem}{}", DOMAIN_SUFFIXES[r.gen_range(0..DOMAIN_SUFFIXES.len())])
    });
    let fillers = unique_words(&mut rng, FILLER_POOL, &mut taken, |r| pseudo_word(r, 2));
    let cores = unique_words(&mut rng, n_pairs * DOC_CORE, &mut taken, |r| {
        let n = r.gen_range(2..=3);
        pseudo_word(r, n)
    });

    let mut pairs = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let core = &cores[i * DOC_CORE..(i + 1) * DOC_CORE];
        let term = &domain_terms[i % n_domain_terms];
        let picked: Vec<&String> = fillers
            .choose_multiple(&mut rng, QUERY_FILLERS + DOC_FILLERS)
            .collect();

        let mut query: Vec<&str> = core[..QUERY_CORE].iter().map(String::as_str).collect();
        query.push(term);
        query.extend(picked[..QUERY_FILLERS].iter().map(|s| s.as_str()));
        query.shuffle(&mut rng);

        let mut doc: Vec<&str> = core.iter().map(String::as_str).collect();
        doc.push(term);
        doc.extend(picked[QUERY_FILLERS..].iter().map(|s| s.as_str()));
        doc.shuffle(&mut rng);

        pairs.push(PairRecord::new(query.join(" "), doc.join(" ")));
    }

    let mut general_words: Vec<String> = fillers.into_iter().chain(cores).collect();
    general_words.sort();
    Ok(SyntheticCorpus {
        pairs,
        domain_terms,
        general_words,
    })
}

/// Replace the documents of `count` randomly chosen pairs with text built from
/// fresh words that occur nowhere else. Returns the affected pair indices, ascending.
pub fn plant_off_topic_documents(
    corpus: &mut SyntheticCorpus,
    count: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if count > corpus.pairs.len() {
        return Err(Error::invalid("more planted documents than pairs"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken: HashSet<String> = corpus
        .pairs
        .iter()
        .flat_map(|p| p.query.split_whitespace().chain(p.document.split_whitespace()))
        .map(str::to_string)
        .collect();
    let mut chosen: Vec<usize> = (0..corpus.pairs.len()).collect::<Vec<_>>();
    chosen.shuffle(&mut rng);
    chosen.truncate(count);
    chosen.sort_unstable();
    for &i in &chosen {
        let words = unique_words(&mut rng, DOC_CORE + 1 + DOC_FILLERS, &mut taken, |r| pseudo_word(r, 4));
        corpus.pairs[i].document = words.join(" ");
    }
    Ok(chosen)
}

/// Word-count vectors over a fixed lexicon.
#[derive(Clone, Debug)]
pub struct BagOfWords {
    index: HashMap<String, usize>,
}

impl BagOfWords {
    /// Lexicon of every lowercase whitespace token in `texts`, in first-seen order.
    pub fn fit<S: AsRef<str>>(texts: &[S]) -> Self {
        let mut index = HashMap::new();
        for t in texts {
            for w in t.as_ref().to_lowercase().split_whitespace() {
                let n = index.len();
                index.entry(w.to_string()).or_insert(n);
            }
        }
        Self { index }
    }

    pub fn dim(&self) -> usize {
        self.index.len()
    }

    /// Counts of known words; unknown words are ignored.
    pub fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.index.len()];
        for w in text.to_lowercase().split_whitespace() {
            if let Some(&i) = self.index.get(w) {
                v[i] += 1.0;
            }
        }
        v
    }
}

/// Exact (full-scan) cosine index over unit-normalized rows.
#[derive(Clone, Debug)]
pub struct CosineIndex<I = String> {
    dim: usize,
    vectors: Vec<f64>,
    row_ids: Vec<I>,
}

/// Normalize every embedding and store it under its id.
pub fn build_index<I>(embeddings: &[Vec<f64>], ids: Vec<I>) -> Result<CosineIndex<I>>
where
    I: Clone + Eq + Hash + Display,
{
    if embeddings.is_empty() {
        return Err(Error::invalid("cannot index zero vectors"));
    }
    if embeddings.len() != ids.len() {
        return Err(Error::shape(format!(
            "{} embeddings for {} ids",
            embeddings.len(),
            ids.len()
        )));
    }
    let dim = embeddings[0].len();
    let mut seen = HashSet::with_capacity(ids.len());
    for id in &ids {
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId(id.to_string()));
        }
    }
    let mut vectors = Vec::with_capacity(embeddings.len() * dim);
    for (e, id) in embeddings.iter().zip(&ids) {
        if e.len() != dim {
            return Err(Error::shape(format!("vector for {id} has dim {}, expected {dim}", e.len())));
        }
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding for {id}")));
        }
        let n = l2_norm(e);
        if n == 0.0 {
            return Err(Error::ZeroVector(id.to_string()));
        }
        vectors.extend(e.iter().map(|v| v / n));
    }
    Ok(CosineIndex {
        dim,
        vectors,
        row_ids: ids,
    })
}

impl<I: Clone + Ord> CosineIndex<I> {
    pub fn len(&self) -> usize {
        self.row_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn ids(&self) -> &[I] {
        &self.row_ids
    }

    /// Up to `k` ids by descending cosine; equal scores order by ascending id.
    pub fn top_k(&self, query: &[f64], k: usize) -> Result<Vec<(I, f64)>> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if query.len() != self.dim {
            return Err(Error::shape(format!(
                "query dim {} for index dim {}",
                query.len(),
                self.dim
            )));
        }
        let n = l2_norm(query);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroVector("query".into()));
        }
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .map(|i| (i, dot(self.row(i), query) / n))
            .collect();
        scored.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.row_ids[a.0].cmp(&self.row_ids[b.0]))
        });
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(i, s)| (self.row_ids[i].clone(), s))
            .collect())
    }
}

/// Counts written by [`consistency_filter`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub retained: usize,
    pub discarded: usize,
    pub k: usize,
}

impl FilterReport {
    pub fn to_jsonl(&self) -> String {
        let mut s = serde_json::to_string(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Pairs kept by [`consistency_filter`] plus the indices they came from.
#[derive(Clone, Debug)]
pub struct FilterOutcome {
    pub retained: Vec<PairRecord>,
    pub retained_indices: Vec<usize>,
    pub report: FilterReport,
}

/// Keep pair `i` iff document `i` is among the `k` nearest documents to query `i`.
pub fn consistency_filter<F>(pairs: &[PairRecord], embed: F, k: usize) -> Result<FilterOutcome>
where
    F: Fn(&str) -> Result<Vec<f64>>,
{
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let wrap = |index: usize| move |e: Error| Error::Embedding {
        index,
        source: Box::new(e),
    };
    let docs = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| embed(&p.document).map_err(wrap(i)))
        .collect::<Result<Vec<_>>>()?;
    let index = build_index(&docs, (0..pairs.len()).collect()).map_err(|e| match e {
        Error::ZeroVector(id) => Error::Embedding {
            index: id.parse().unwrap_or(0),
            source: Box::new(Error::ZeroVector(format!("document {id}"))),
        },
        other => other,
    })?;

    let mut retained = Vec::new();
    let mut retained_indices = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let q = embed(&p.query).map_err(wrap(i))?;
        let hits = index.top_k(&q, k).map_err(wrap(i))?;
        if hits.iter().any(|(id, _)| *id == i) {
            retained.push(p.clone());
            retained_indices.push(i);
        }
    }
    let report = FilterReport {
        retained: retained.len(),
        discarded: pairs.len() - retained.len(),
        k,
    };
    Ok(FilterOutcome {
        retained,
        retained_indices,
        report,
    })
}
