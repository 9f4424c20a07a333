//! Retrieval and similarity metrics: NDCG@k, Spearman, per-query summaries
//! and the paired t-test.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::Serialize;

use crate::data::build_index;
use crate::error::{Error, Result};

/// Graded judgments: query id → document id → relevance.
pub type RelevanceJudgments = BTreeMap<String, BTreeMap<String, u32>>;

/// NDCG over the first `k` entries of `ranking`, with gain `2^rel − 1` and
/// discount `log2(i + 1)` for 1-based rank `i`. Returns `(score, has_relevant)`;
/// a query with no positive judgment scores 0 and reports `false`.
pub fn ndcg_at_k_flagged(ranking: &[String], judgments: &BTreeMap<String, u32>, k: usize) -> Result<(f64, bool)> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut seen = HashSet::with_capacity(ranking.len());
    for id in ranking {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    let gain = |rel: u32| 2f64.powi(rel as i32) - 1.0;
    let discount = |i: usize| (i as f64 + 2.0).log2();
    let mut ideal: Vec<u32> = judgments.values().copied().filter(|&r| r > 0).collect();
    if ideal.is_empty() {
        return Ok((0.0, false));
    }
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, &r)| gain(r) / discount(i)).sum();
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, id)| gain(judgments.get(id).copied().unwrap_or(0)) / discount(i))
        .sum();
    Ok((dcg / idcg, true))
}

pub fn ndcg_at_k(ranking: &[String], judgments: &BTreeMap<String, u32>, k: usize) -> Result<f64> {
    ndcg_at_k_flagged(ranking, judgments, k).map(|(s, _)| s)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("correlation needs two equal-length lists of at least 2 values"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("constant input has no correlation".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spearman input".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Per-query scores with boxplot statistics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub query_ids: Vec<String>,
    pub scores: Vec<f64>,
    /// Queries with no positive judgment.
    pub unjudged: Vec<String>,
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub zero_count: usize,
}

/// Quantile by linear interpolation between closest ranks of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl MetricReport {
    pub fn from_scores(query_ids: Vec<String>, scores: Vec<f64>, unjudged: Vec<String>) -> Result<Self> {
        if query_ids.len() != scores.len() || scores.is_empty() {
            return Err(Error::invalid("report needs one score per query and at least one query"));
        }
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        let (q1, median, q3) = (quantile(&sorted, 0.25), quantile(&sorted, 0.5), quantile(&sorted, 0.75));
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        // Whiskers end at the most extreme observations inside the fences.
        let whisker_low = sorted.iter().copied().find(|&v| v >= lo_fence).unwrap_or(q1);
        let whisker_high = sorted.iter().rev().copied().find(|&v| v <= hi_fence).unwrap_or(q3);
        Ok(Self {
            mean: scores.iter().sum::<f64>() / scores.len() as f64,
            zero_count: scores.iter().filter(|&&s| s == 0.0).count(),
            query_ids,
            scores,
            unjudged,
            q1,
            median,
            q3,
            whisker_low,
            whisker_high,
        })
    }

    /// Per-query rows, a blank line, then `metric,value` summary rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("query_id,score\n");
        for (q, s) in self.query_ids.iter().zip(&self.scores) {
            out.push_str(&format!("{q},{s}\n"));
        }
        out.push_str("\nmetric,value\n");
        for (name, v) in [
            ("mean", self.mean),
            ("q1", self.q1),
            ("median", self.median),
            ("q3", self.q3),
            ("whisker_low", self.whisker_low),
            ("whisker_high", self.whisker_high),
        ] {
            out.push_str(&format!("{name},{v}\n"));
        }
        out.push_str(&format!("zero_count,{}\n", self.zero_count));
        out.push_str(&format!("queries,{}\n", self.scores.len()));
        out.push_str(&format!("unjudged,{}\n", self.unjudged.len()));
        out
    }
}

/// Embed the collection once, rank it for every query by cosine, and score NDCG@k.
pub fn evaluate_retrieval<F>(
    embed: F,
    queries: &[(String, String)],
    collection: &[(String, String)],
    judgments: &RelevanceJudgments,
    k: usize,
) -> Result<MetricReport>
where
    F: Fn(&str) -> Result<Vec<f64>>,
{
    if queries.is_empty() || collection.is_empty() {
        return Err(Error::invalid("queries and collection must be non-empty"));
    }
    let doc_vecs = collection
        .iter()
        .map(|(_, text)| embed(text))
        .collect::<Result<Vec<_>>>()?;
    let index = build_index(&doc_vecs, collection.iter().map(|(id, _)| id.clone()).collect())?;
    let empty = BTreeMap::new();
    let mut ids = Vec::with_capacity(queries.len());
    let mut scores = Vec::with_capacity(queries.len());
    let mut unjudged = Vec::new();
    for (qid, text) in queries {
        let ranking: Vec<String> = index.top_k(&embed(text)?, k)?.into_iter().map(|(id, _)| id).collect();
        let (score, judged) = ndcg_at_k_flagged(&ranking, judgments.get(qid).unwrap_or(&empty), k)?;
        if !judged {
            unjudged.push(qid.clone());
        }
        ids.push(qid.clone());
        scores.push(score);
    }
    MetricReport::from_scores(ids, scores, unjudged)
}

/// Parse `query doc relevance` or TREC `query iteration doc relevance` lines.
pub fn parse_qrels(text: &str) -> std::result::Result<RelevanceJudgments, String> {
    let mut out = RelevanceJudgments::new();
    for (n, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let (q, d, r) = match fields.as_slice() {
            [] => continue,
            [q, d, r] => (q, d, r),
            [q, _, d, r] => (q, d, r),
            _ => return Err(format!("line {}: expected 3 or 4 columns", n + 1)),
        };
        let rel: u32 = r
            .parse()
            .map_err(|_| format!("line {}: bad relevance {r:?}", n + 1))?;
        out.entry(q.to_string()).or_default().insert(d.to_string(), rel);
    }
    Ok(out)
}

pub fn load_qrels(path: &Path) -> Result<RelevanceJudgments> {
    let text = std::fs::read_to_string(path)?;
    parse_qrels(&text).map_err(|message| Error::Parse {
        path: path.to_path_buf(),
        message,
    })
}

/// TREC four-column lines, sorted by query then document.
pub fn qrels_to_text(judgments: &RelevanceJudgments) -> String {
    let mut out = String::new();
    for (q, docs) in judgments {
        for (d, r) in docs {
            out.push_str(&format!("{q} 0 {d} {r}\n"));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// Two-sided paired t-test on `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("paired t-test needs two equal-length lists of at least 2 values"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Err(Error::Degenerate("all differences are identical".into()));
    }
    let t = mean / (var.sqrt() / n.sqrt());
    let df = d.len() - 1;
    let p = student_t_two_sided(t, df as f64);
    Ok(TTest { t, p, df })
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0)
}

/// Lanczos approximation (g = 7, 9 terms) of `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// `I_x(a, b)` by the modified Lentz continued fraction.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x > (a + 1.0) / (a + b + 2.0) {
        return 1.0 - regularized_incomplete_beta(1.0 - x, b, a);
    }
    const TINY: f64 = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut f = d;
    for m in 1..500 {
        let m = m as f64;
        let num = m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m));
        for (k, num) in [num, -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0))]
            .into_iter()
            .enumerate()
        {
            d = 1.0 + num * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + num / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let delta = c * d;
            f *= delta;
            if k == 1 && (delta - 1.0).abs() < 1e-15 {
                return ln_front.exp() * f / a;
            }
        }
    }
    ln_front.exp() * f / a
}
