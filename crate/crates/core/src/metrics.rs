//! Top-k generation and ranking metrics.
//!
//! * WER@k: minimum over the first `k` suggestions of word-level edit
//!   distance divided by the reference word count.
//! * BertF1@k: maximum over the first `k` suggestions of greedy-matching F1
//!   under a token similarity.
//! * MRR@k and S@k on exact (normalized) matches.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::autograd::Float;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::session::SessionRecord;
use crate::text::{normalize, words};
use crate::tokenizer::Vocab;

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word error rate of the best of the first `k` hypotheses. An empty
/// hypothesis list scores 1 by convention.
pub fn wer_at_k<S: AsRef<str>>(reference: &str, hyps: &[S], k: usize) -> Result<f64> {
    let r = words(reference);
    if r.is_empty() {
        return Err(Error::InvalidInput("WER reference is empty".into()));
    }
    let best = hyps
        .iter()
        .take(k)
        .map(|h| edit_distance(&r, &words(h.as_ref())))
        .min();
    Ok(best.map_or(1.0, |d| d as f64 / r.len() as f64))
}

/// Token similarity used by BertF1 (cosine of unit-norm embeddings).
pub trait TokenEmbedder {
    fn similarity(&self, a: &str, b: &str) -> f64;
}

/// Every distinct token is its own orthogonal axis.
#[derive(Debug, Clone, Copy, Default)]
pub struct OneHotEmbedder;

impl TokenEmbedder for OneHotEmbedder {
    fn similarity(&self, a: &str, b: &str) -> f64 {
        if a == b {
            1.0
        } else {
            0.0
        }
    }
}

/// A word's vector is the normalized mean of its BPE token embeddings.
pub struct ModelEmbedder {
    vectors: HashMap<String, Vec<f64>>,
    table: Vec<Vec<f64>>,
    vocab: Vocab,
}

impl ModelEmbedder {
    pub fn new<F: Float>(model: &Model<F>, vocab: &Vocab) -> Self {
        let table = model
            .token_embeddings()
            .outer_iter()
            .map(|r| r.iter().map(|v| v.to_f64().unwrap_or(0.0)).collect())
            .collect();
        ModelEmbedder {
            vectors: HashMap::new(),
            table,
            vocab: vocab.clone(),
        }
    }

    fn compute(&self, word: &str) -> Vec<f64> {
        let d = self.table.first().map_or(0, |r| r.len());
        let mut v = vec![0.0; d];
        for id in self.vocab.encode_text(word) {
            if let Some(row) = self.table.get(id as usize) {
                for (a, b) in v.iter_mut().zip(row) {
                    *a += b;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }

    /// Caches the vectors of every word in `texts`.
    pub fn warm<'a>(&mut self, texts: impl IntoIterator<Item = &'a str>) {
        for t in texts {
            for w in t.split_whitespace() {
                if !self.vectors.contains_key(w) {
                    let v = self.compute(w);
                    self.vectors.insert(w.to_string(), v);
                }
            }
        }
    }

    pub fn embed(&self, word: &str) -> Vec<f64> {
        self.vectors
            .get(word)
            .cloned()
            .unwrap_or_else(|| self.compute(word))
    }
}

impl TokenEmbedder for ModelEmbedder {
    fn similarity(&self, a: &str, b: &str) -> f64 {
        if a == b {
            return 1.0;
        }
        let (va, vb) = (self.embed(a), self.embed(b));
        va.iter().zip(&vb).map(|(x, y)| x * y).sum()
    }
}

/// Greedy-matching F1 between two strings: recall averages, over reference
/// tokens, the best similarity to any hypothesis token; precision is the
/// mirror image.
pub fn greedy_f1(reference: &str, hyp: &str, embedder: &dyn TokenEmbedder) -> f64 {
    let (r, h) = (words(reference), words(hyp));
    if r.is_empty() || h.is_empty() {
        return 0.0;
    }
    let sim: Vec<Vec<f64>> = r
        .iter()
        .map(|a| h.iter().map(|b| embedder.similarity(a, b)).collect())
        .collect();
    let recall = sim
        .iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / r.len() as f64;
    let precision = (0..h.len())
        .map(|j| {
            sim.iter()
                .map(|row| row[j])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum::<f64>()
        / h.len() as f64;
    if precision + recall <= 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn bertf1_at_k<S: AsRef<str>>(
    reference: &str,
    hyps: &[S],
    k: usize,
    embedder: &dyn TokenEmbedder,
) -> f64 {
    hyps.iter()
        .take(k)
        .map(|h| greedy_f1(reference, h.as_ref(), embedder))
        .fold(0.0, f64::max)
}

fn first_match_rank<S: AsRef<str>>(reference: &str, hyps: &[S], k: usize) -> Option<usize> {
    let r = normalize(reference);
    hyps.iter()
        .take(k)
        .position(|h| normalize(h.as_ref()) == r)
        .map(|p| p + 1)
}

pub fn mrr_at_k<S: AsRef<str>>(reference: &str, hyps: &[S], k: usize) -> f64 {
    first_match_rank(reference, hyps, k).map_or(0.0, |r| 1.0 / r as f64)
}

pub fn success_at_k<S: AsRef<str>>(reference: &str, hyps: &[S], k: usize) -> f64 {
    if first_match_rank(reference, hyps, k).is_some() {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonResult {
    /// Non-zero differences used.
    pub n: usize,
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    pub exact: bool,
}

/// Largest sample for which the exact null distribution is enumerated.
pub const WILCOXON_EXACT_MAX: usize = 30;

/// Mid-ranks of `|d|`, doubled so that tied ranks stay integral.
pub fn doubled_abs_ranks(diffs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&a, &b| diffs[a].abs().total_cmp(&diffs[b].abs()));
    let mut ranks = vec![0u64; diffs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean; doubled: (i+1)+(j+1)
        let r2 = (i + j + 2) as u64;
        for &o in &order[i..=j] {
            ranks[o] = r2;
        }
        i = j + 1;
    }
    ranks
}

/// Wilcoxon signed-rank test on paired differences (zeros dropped).
///
/// For up to [`WILCOXON_EXACT_MAX`] pairs the two-sided p-value comes from
/// the exact null distribution of the rank sum, counted by dynamic
/// programming over the (tie-aware) ranks; larger samples use the normal
/// approximation with tie correction.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> WilcoxonResult {
    let d: Vec<f64> = diffs.iter().copied().filter(|x| *x != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return WilcoxonResult {
            n,
            w_plus: 0.0,
            p_value: 1.0,
            exact: true,
        };
    }
    let r2 = doubled_abs_ranks(&d);
    let total: u64 = r2.iter().sum();
    let w2: u64 = d
        .iter()
        .zip(&r2)
        .filter(|(x, _)| **x > 0.0)
        .map(|(_, r)| r)
        .sum();
    let w_plus = w2 as f64 / 2.0;

    if n <= WILCOXON_EXACT_MAX {
        // counts[s] = number of sign assignments with doubled positive rank sum s
        let mut counts = vec![0f64; total as usize + 1];
        counts[0] = 1.0;
        let mut reach = 0usize;
        for &r in &r2 {
            let r = r as usize;
            for s in (0..=reach).rev() {
                if counts[s] > 0.0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let observed = (2 * w2 as i64 - total as i64).abs();
        let extreme: f64 = counts
            .iter()
            .enumerate()
            .filter(|(s, _)| (2 * *s as i64 - total as i64).abs() >= observed)
            .map(|(_, c)| c)
            .sum();
        return WilcoxonResult {
            n,
            w_plus,
            p_value: (extreme / 2f64.powi(n as i32)).min(1.0),
            exact: true,
        };
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = r2.clone();
    sorted.sort_unstable();
    for group in sorted.chunk_by(|a, b| a == b) {
        let t = group.len() as f64;
        tie_term += t * t * t - t;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = if var > 0.0 {
        (w_plus - mean) / var.sqrt()
    } else {
        0.0
    };
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    WilcoxonResult {
        n,
        w_plus,
        p_value: (2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0),
        exact: false,
    }
}

/// Metric values of one session for each configured `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub session_id: String,
    /// Queries in the session, ground truth included.
    pub n_queries: usize,
    /// Clicks on the last context query.
    pub last_clicks: usize,
    pub wer: Vec<f64>,
    pub bertf1: Vec<f64>,
    pub mrr: Vec<f64>,
    pub success: Vec<f64>,
    /// No suggestion was produced (WER counted as 1).
    pub empty: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    Wer,
    BertF1,
    Mrr,
    Success,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Wer => "wer",
            MetricKind::BertF1 => "bertf1",
            MetricKind::Mrr => "mrr",
            MetricKind::Success => "s",
        }
    }

    pub fn lower_is_better(self) -> bool {
        self == MetricKind::Wer
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wer" => Ok(MetricKind::Wer),
            "bertf1" => Ok(MetricKind::BertF1),
            "mrr" => Ok(MetricKind::Mrr),
            "s" | "success" => Ok(MetricKind::Success),
            _ => Err(Error::Config(format!("unknown metric {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ks: Vec<usize>,
    pub rows: Vec<SessionMetrics>,
}

impl SessionMetrics {
    pub fn values(&self, metric: MetricKind) -> &[f64] {
        match metric {
            MetricKind::Wer => &self.wer,
            MetricKind::BertF1 => &self.bertf1,
            MetricKind::Mrr => &self.mrr,
            MetricKind::Success => &self.success,
        }
    }
}

impl MetricReport {
    fn k_index(&self, k: usize) -> Result<usize> {
        self.ks.iter().position(|&x| x == k).ok_or_else(|| {
            Error::Config(format!("k = {k} is not in the report (ks = {:?})", self.ks))
        })
    }

    /// Per-session values of one metric at one `k`.
    pub fn column(&self, metric: MetricKind, k: usize) -> Result<Vec<f64>> {
        let i = self.k_index(k)?;
        Ok(self.rows.iter().map(|r| r.values(metric)[i]).collect())
    }

    /// Arithmetic mean of per-session values (0 for an empty report).
    pub fn mean(&self, metric: MetricKind, k: usize) -> Result<f64> {
        let col = self.column(metric, k)?;
        Ok(if col.is_empty() {
            0.0
        } else {
            col.iter().sum::<f64>() / col.len() as f64
        })
    }

    /// `name@k=value` lines for every metric and `k`, plus counts.
    pub fn aggregate_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "sessions={}", self.rows.len());
        let _ = writeln!(
            out,
            "empty_suggestion_sessions={}",
            self.rows.iter().filter(|r| r.empty).count()
        );
        for metric in [
            MetricKind::Wer,
            MetricKind::BertF1,
            MetricKind::Mrr,
            MetricKind::Success,
        ] {
            for &k in &self.ks {
                let m = self.mean(metric, k).expect("k from report");
                let _ = writeln!(out, "{}@{k}={m:.6}", metric.name());
            }
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("session_id\tn_queries\tlast_clicks\tempty");
        for metric in [
            MetricKind::Wer,
            MetricKind::BertF1,
            MetricKind::Mrr,
            MetricKind::Success,
        ] {
            for k in &self.ks {
                let _ = write!(out, "\t{}@{k}", metric.name());
            }
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{}\t{}\t{}\t{}",
                r.session_id,
                r.n_queries,
                r.last_clicks,
                u8::from(r.empty)
            );
            for v in r
                .wer
                .iter()
                .chain(&r.bertf1)
                .chain(&r.mrr)
                .chain(&r.success)
            {
                let _ = write!(out, "\t{v:.6}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse("report", "missing header"))?;
        let cols: Vec<&str> = header.split('\t').collect();
        if cols.len() < 4
            || cols[..4] != ["session_id", "n_queries", "last_clicks", "empty"]
            || (cols.len() - 4) % 4 != 0
        {
            return Err(Error::parse("report header", "unexpected columns"));
        }
        let nk = (cols.len() - 4) / 4;
        let ks = cols[4..4 + nk]
            .iter()
            .map(|c| c.strip_prefix("wer@").and_then(|k| k.parse().ok()))
            .collect::<Option<Vec<usize>>>()
            .ok_or_else(|| Error::parse("report header", "bad wer@k columns"))?;
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let loc = format!("report line {}", i + 2);
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != cols.len() {
                return Err(Error::parse(loc, "wrong field count"));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::parse(loc.clone(), format!("bad number {s:?}")))
            };
            let int = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::parse(loc.clone(), format!("bad integer {s:?}")))
            };
            let vals = f[4..]
                .iter()
                .map(|s| num(s))
                .collect::<Result<Vec<f64>>>()?;
            rows.push(SessionMetrics {
                session_id: f[0].to_string(),
                n_queries: int(f[1])?,
                last_clicks: int(f[2])?,
                empty: f[3] == "1",
                wer: vals[..nk].to_vec(),
                bertf1: vals[nk..2 * nk].to_vec(),
                mrr: vals[2 * nk..3 * nk].to_vec(),
                success: vals[3 * nk..].to_vec(),
            });
        }
        Ok(MetricReport { ks, rows })
    }
}

/// Scores ranked suggestion texts against held-out sessions. Sessions
/// without suggestions count as empty lists.
pub fn evaluate(
    refs: &[SessionRecord],
    suggestions: &BTreeMap<String, Vec<String>>,
    ks: &[usize],
    embedder: &dyn TokenEmbedder,
) -> Result<MetricReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("k values must be positive".into()));
    }
    let none = Vec::new();
    let mut rows = Vec::with_capacity(refs.len());
    for s in refs {
        let gt = s.ground_truth()?;
        let hyps = suggestions.get(&s.session_id).unwrap_or(&none);
        rows.push(SessionMetrics {
            session_id: s.session_id.clone(),
            n_queries: s.query_count(),
            last_clicks: s.interactions.last().map_or(0, |i| i.clicks.len()),
            wer: ks
                .iter()
                .map(|&k| wer_at_k(gt, hyps, k))
                .collect::<Result<_>>()?,
            bertf1: ks
                .iter()
                .map(|&k| bertf1_at_k(gt, hyps, k, embedder))
                .collect(),
            mrr: ks.iter().map(|&k| mrr_at_k(gt, hyps, k)).collect(),
            success: ks.iter().map(|&k| success_at_k(gt, hyps, k)).collect(),
            empty: hyps.is_empty(),
        });
    }
    Ok(MetricReport {
        ks: ks.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wer_examples() {
        assert_eq!(
            wer_at_k("data engineer", &["data engineer"], 1).unwrap(),
            0.0
        );
        assert_eq!(
            wer_at_k("data engineer", &["data analyst"], 1).unwrap(),
            0.5
        );
        assert_eq!(wer_at_k("a b", &["x y z", "a b"], 2).unwrap(), 0.0);
        assert_eq!(wer_at_k("a b", &["x y z", "a b"], 1).unwrap(), 1.5);
        assert_eq!(wer_at_k::<&str>("a b", &[], 3).unwrap(), 1.0);
        assert!(wer_at_k("  ", &["a"], 1).is_err());
    }

    #[test]
    fn bertf1_examples() {
        let e = OneHotEmbedder;
        assert_eq!(bertf1_at_k("a b", &["a b"], 1, &e), 1.0);
        assert_eq!(bertf1_at_k("a b", &["c d"], 1, &e), 0.0);
        assert_eq!(greedy_f1("a b", "a c", &e), 0.5);
        assert_eq!(greedy_f1("a b", "", &e), 0.0);
        assert_eq!(bertf1_at_k("a b", &["c", "a c", "a b"], 2, &e), 0.5);
    }

    #[test]
    fn ranking_examples() {
        assert_eq!(mrr_at_k("x", &["x", "y"], 3), 1.0);
        assert_eq!(success_at_k("x", &["x", "y"], 3), 1.0);
        assert_eq!(mrr_at_k("x", &["a", "b", "X "], 3), 1.0 / 3.0);
        assert_eq!(mrr_at_k("x", &["a", "b", "x"], 2), 0.0);
        assert_eq!(success_at_k("x", &["a"], 3), 0.0);
    }

    #[test]
    fn doubled_ranks_with_ties() {
        assert_eq!(doubled_abs_ranks(&[1.0, -1.0, 3.0, 0.5]), vec![5, 5, 8, 2]);
    }

    #[test]
    fn wilcoxon_small_cases() {
        // all positive, n = 3: only the all-positive and all-negative
        // assignments are as extreme -> p = 2/8
        let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0]);
        assert_eq!(r.n, 3);
        assert_eq!(r.w_plus, 6.0);
        assert!((r.p_value - 0.25).abs() < 1e-12);
        assert_eq!(wilcoxon_signed_rank(&[0.0, 0.0]).p_value, 1.0);
        let large: Vec<f64> = (1..=40).map(|i| i as f64).collect();
        let r = wilcoxon_signed_rank(&large);
        assert!(!r.exact && r.p_value < 1e-6);
    }

    #[test]
    fn report_tsv_round_trip() {
        let r = MetricReport {
            ks: vec![1, 3],
            rows: vec![SessionMetrics {
                session_id: "u#0".into(),
                n_queries: 3,
                last_clicks: 2,
                wer: vec![0.5, 0.0],
                bertf1: vec![0.5, 1.0],
                mrr: vec![0.0, 0.5],
                success: vec![0.0, 1.0],
                empty: false,
            }],
        };
        assert_eq!(MetricReport::from_tsv(&r.to_tsv()).unwrap(), r);
        assert!(r.aggregate_kv().contains("wer@3=0.000000"));
        assert!(MetricReport::from_tsv("bad\n").is_err());
    }
}
