//! Breakdowns of evaluation results: session-length buckets, attention
//! profiles, win/tie/loss counts, novelty and click statistics.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Float;
use crate::error::{Error, Result};
use crate::metrics::{MetricKind, MetricReport};
use crate::model::{MeshedSequence, Mode, Model, N_HYPOTHESES};
use crate::mps::CandidatePool;
use crate::session::SessionRecord;
use crate::text::normalize;
use crate::tokenizer::Vocab;

/// Aggregates over sessions with at least `min_queries` queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub min_queries: usize,
    pub sessions: usize,
    /// One (method, WER@k, MRR@k) entry per report.
    pub methods: Vec<(String, f64, f64)>,
}

/// Buckets X = 2..=max over `reports` (which must cover the same sessions).
/// Empty buckets are omitted.
pub fn bucket_by_min_session_length(
    reports: &[(&str, &MetricReport)],
    k: usize,
) -> Result<Vec<LengthBucket>> {
    let Some((_, first)) = reports.first() else {
        return Ok(Vec::new());
    };
    for (name, r) in reports {
        same_sessions(first, r).map_err(|e| Error::InvalidInput(format!("report {name}: {e}")))?;
    }
    let max = first.rows.iter().map(|r| r.n_queries).max().unwrap_or(0);
    let mut out = Vec::new();
    for x in 2..=max {
        let keep: Vec<usize> = (0..first.rows.len())
            .filter(|&i| first.rows[i].n_queries >= x)
            .collect();
        if keep.is_empty() {
            continue;
        }
        let mut methods = Vec::new();
        for (name, r) in reports {
            let wer = r.column(MetricKind::Wer, k)?;
            let mrr = r.column(MetricKind::Mrr, k)?;
            let mean = |c: &[f64]| keep.iter().map(|&i| c[i]).sum::<f64>() / keep.len() as f64;
            methods.push((name.to_string(), mean(&wer), mean(&mrr)));
        }
        out.push(LengthBucket {
            min_queries: x,
            sessions: keep.len(),
            methods,
        });
    }
    Ok(out)
}

pub fn length_buckets_tsv(buckets: &[LengthBucket], k: usize) -> String {
    let mut out = format!("min_queries\tsessions\tmethod\twer@{k}\tmrr@{k}\n");
    for b in buckets {
        for (m, w, r) in &b.methods {
            let _ = writeln!(
                out,
                "{}\t{}\t{m}\t{w:.6}\t{r:.6}",
                b.min_queries, b.sessions
            );
        }
    }
    out
}

fn same_sessions(a: &MetricReport, b: &MetricReport) -> Result<()> {
    let ids = |r: &MetricReport| {
        r.rows
            .iter()
            .map(|x| x.session_id.clone())
            .collect::<Vec<_>>()
    };
    if ids(a) != ids(b) {
        return Err(Error::InvalidInput(
            "reports cover different sessions".into(),
        ));
    }
    Ok(())
}

/// Mean α per hypothesis over positions where at least two hypotheses are
/// valid; `None` when no such position exists.
pub fn session_attention<F: Float>(
    meshed: &MeshedSequence<F>,
) -> Result<Option<[f64; N_HYPOTHESES]>> {
    let (Some(alpha), Some(mask)) = (&meshed.attn_weights, &meshed.hypothesis_mask) else {
        return Err(Error::Precondition(
            "attention profile needs a mesh-mode model".into(),
        ));
    };
    let mut sum = [0.0; N_HYPOTHESES];
    let mut count = 0usize;
    for j in 0..alpha.ncols() {
        if mask.column(j).iter().filter(|v| **v).count() < 2 {
            continue;
        }
        for (i, s) in sum.iter_mut().enumerate() {
            *s += alpha[[i, j]].to_f64().unwrap_or(f64::NAN);
        }
        count += 1;
    }
    Ok((count > 0).then(|| sum.map(|s| s / count as f64)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionAttention {
    pub session_id: String,
    pub n_queries: usize,
    pub last_clicks: usize,
    pub mean_alpha: [f64; N_HYPOTHESES],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStat {
    /// Inclusive lower bound; the last bucket is open-ended.
    pub lower: usize,
    pub upper: Option<usize>,
    pub sessions: usize,
    pub mean: [f64; N_HYPOTHESES],
    pub stderr: [f64; N_HYPOTHESES],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfile {
    pub sessions: Vec<SessionAttention>,
    /// Sessions skipped because no position had two valid hypotheses.
    pub skipped: usize,
    pub by_length: Vec<BucketStat>,
    pub by_last_clicks: Vec<BucketStat>,
}

/// Groups values by `key` into buckets starting at each of `bounds`
/// (ascending); keys below the first bound are ignored.
pub fn bucket_means(items: &[(usize, [f64; N_HYPOTHESES])], bounds: &[usize]) -> Vec<BucketStat> {
    let mut out = Vec::new();
    for (b, &lower) in bounds.iter().enumerate() {
        let upper = bounds.get(b + 1).copied();
        let vals: Vec<&[f64; N_HYPOTHESES]> = items
            .iter()
            .filter(|(k, _)| *k >= lower && upper.is_none_or(|u| *k < u))
            .map(|(_, v)| v)
            .collect();
        let n = vals.len();
        let mut mean = [0.0; N_HYPOTHESES];
        let mut stderr = [0.0; N_HYPOTHESES];
        if n > 0 {
            for i in 0..N_HYPOTHESES {
                mean[i] = vals.iter().map(|v| v[i]).sum::<f64>() / n as f64;
                if n > 1 {
                    let var =
                        vals.iter().map(|v| (v[i] - mean[i]).powi(2)).sum::<f64>() / (n - 1) as f64;
                    stderr[i] = (var / n as f64).sqrt();
                }
            }
        }
        out.push(BucketStat {
            lower,
            upper,
            sessions: n,
            mean,
            stderr,
        });
    }
    out
}

pub fn attention_profile<F: Float>(
    model: &Model<F>,
    vocab: &Vocab,
    sessions: &[SessionRecord],
    length_bounds: &[usize],
    click_bounds: &[usize],
) -> Result<AttentionProfile> {
    if model.mode() != Mode::Mesh {
        return Err(Error::Precondition(
            "attention profile needs a mesh-mode model".into(),
        ));
    }
    let per: Vec<Option<SessionAttention>> = sessions
        .par_iter()
        .map(|s| {
            let meshed = model.memory(&model.model_inputs(s, vocab)?)?;
            Ok(
                session_attention(&meshed)?.map(|mean_alpha| SessionAttention {
                    session_id: s.session_id.clone(),
                    n_queries: s.query_count(),
                    last_clicks: s.interactions.last().map_or(0, |i| i.clicks.len()),
                    mean_alpha,
                }),
            )
        })
        .collect::<Result<_>>()?;
    let skipped = per.iter().filter(|p| p.is_none()).count();
    let sessions: Vec<SessionAttention> = per.into_iter().flatten().collect();
    let by_len: Vec<_> = sessions
        .iter()
        .map(|s| (s.n_queries, s.mean_alpha))
        .collect();
    let by_clicks: Vec<_> = sessions
        .iter()
        .map(|s| (s.last_clicks, s.mean_alpha))
        .collect();
    Ok(AttentionProfile {
        by_length: bucket_means(&by_len, length_bounds),
        by_last_clicks: bucket_means(&by_clicks, click_bounds),
        sessions,
        skipped,
    })
}

pub fn bucket_stats_tsv(stats: &[BucketStat]) -> String {
    let mut out =
        String::from("lower\tupper\tsessions\tk1\tk2\tk3\tk4\tk1_se\tk2_se\tk3_se\tk4_se\n");
    for b in stats {
        let upper = b.upper.map_or("inf".to_string(), |u| u.to_string());
        let _ = write!(out, "{}\t{upper}\t{}", b.lower, b.sessions);
        for v in b.mean.iter().chain(&b.stderr) {
            let _ = write!(out, "\t{v:.6}");
        }
        out.push('\n');
    }
    out
}

/// Per-session outcomes of method `a` against method `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinTieLoss {
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
}

impl WinTieLoss {
    pub fn total(&self) -> usize {
        self.wins + self.ties + self.losses
    }

    /// Percentages with `decimals` places that sum to exactly 100, by
    /// largest-remainder rounding of the exact fractions.
    pub fn percentages(&self, decimals: u32) -> [String; 3] {
        let n = self.total() as u128;
        let unit = 100 * 10u128.pow(decimals);
        let counts = [self.wins as u128, self.ties as u128, self.losses as u128];
        if n == 0 {
            return counts.map(|_| format_fixed(0, decimals));
        }
        let mut floors = counts.map(|c| c * unit / n);
        let rem = counts.map(|c| c * unit % n);
        let mut missing = unit - floors.iter().sum::<u128>();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| rem[b].cmp(&rem[a]).then(a.cmp(&b)));
        for &i in &order {
            if missing == 0 {
                break;
            }
            if rem[i] > 0 {
                floors[i] += 1;
                missing -= 1;
            }
        }
        floors.map(|f| format_fixed(f, decimals))
    }
}

fn format_fixed(v: u128, decimals: u32) -> String {
    if decimals == 0 {
        return v.to_string();
    }
    let s = 10u128.pow(decimals);
    format!("{}.{:0width$}", v / s, v % s, width = decimals as usize)
}

/// Compares `a` to `b` session by session on `metric` at `k`; a win means
/// `a` is strictly better in the metric's direction.
pub fn win_tie_loss(
    a: &MetricReport,
    b: &MetricReport,
    metric: MetricKind,
    k: usize,
) -> Result<WinTieLoss> {
    same_sessions(a, b)?;
    let (ca, cb) = (a.column(metric, k)?, b.column(metric, k)?);
    let mut out = WinTieLoss {
        wins: 0,
        ties: 0,
        losses: 0,
    };
    for (x, y) in ca.iter().zip(&cb) {
        let (x, y) = if metric.lower_is_better() {
            (-x, -y)
        } else {
            (*x, *y)
        };
        if x > y {
            out.wins += 1;
        } else if x < y {
            out.losses += 1;
        } else {
            out.ties += 1;
        }
    }
    Ok(out)
}

/// Fraction of sessions with at least one suggestion outside the pool's
/// candidates for their last query. Input pairs are (last query, suggestions).
pub fn novelty_rate<S: AsRef<str>>(items: &[(String, Vec<S>)], pool: &CandidatePool) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let novel = items
        .iter()
        .filter(|(last, sugg)| {
            let cands = pool.candidates(last);
            sugg.iter()
                .any(|s| cands.is_none_or(|c| !c.contains_key(&normalize(s.as_ref()))))
        })
        .count();
    novel as f64 / items.len() as f64
}

/// Sessions cross-tabulated by clicks on the last query (rows) and total
/// clicks (columns), both capped at `cap` (the last row/column reads "cap+").
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub cap: usize,
    pub counts: Vec<Vec<usize>>,
}

impl ContingencyTable {
    /// Each non-empty column divided by its total; empty columns stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        let n = self.cap + 1;
        let col_tot: Vec<usize> = (0..n)
            .map(|c| (0..n).map(|r| self.counts[r][c]).sum())
            .collect();
        (0..n)
            .map(|r| {
                (0..n)
                    .map(|c| {
                        if col_tot[c] == 0 {
                            0.0
                        } else {
                            self.counts[r][c] as f64 / col_tot[c] as f64
                        }
                    })
                    .collect()
            })
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let label = |i: usize| {
            if i == self.cap {
                format!("{i}+")
            } else {
                i.to_string()
            }
        };
        let mut out = String::from("last_clicks\\total_clicks");
        for c in 0..=self.cap {
            let _ = write!(out, "\t{}", label(c));
        }
        out.push('\n');
        for (r, row) in self.normalized().iter().enumerate() {
            out.push_str(&label(r));
            for v in row {
                let _ = write!(out, "\t{v:.6}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn click_contingency(sessions: &[SessionRecord], cap: usize) -> ContingencyTable {
    let mut counts = vec![vec![0usize; cap + 1]; cap + 1];
    for s in sessions {
        let total: usize = s.interactions.iter().map(|i| i.clicks.len()).sum();
        let last = s.interactions.last().map_or(0, |i| i.clicks.len());
        counts[last.min(cap)][total.min(cap)] += 1;
    }
    ContingencyTable { cap, counts }
}
