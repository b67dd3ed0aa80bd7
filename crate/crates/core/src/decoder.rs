//! Beam-search generation of ranked suggestions.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::io::BufRead;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Float;
use crate::error::{Error, Result};
use crate::model::{MeshedSequence, Model};
use crate::session::SessionRecord;
use crate::text::normalize;
use crate::tokenizer::{Vocab, BOS, EOS};

/// Anything that yields next-token log-probabilities for a prefix.
pub trait StepScorer {
    /// Log-probabilities over the vocabulary after `prefix` (starting with BOS).
    fn next_log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>>;
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Adapts a model and a fixed decoder memory to [`StepScorer`].
pub struct ModelScorer<'a, F: Float> {
    pub model: &'a Model<F>,
    pub memory: &'a MeshedSequence<F>,
}

impl<F: Float> StepScorer for ModelScorer<'_, F> {
    fn next_log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        let logits: Vec<f64> = self
            .model
            .decode_step(self.memory, prefix)?
            .into_iter()
            .map(|v| v.to_f64().unwrap_or(f64::NAN))
            .collect();
        Ok(log_softmax(&logits))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub width: usize,
    /// Maximum number of generated tokens, EOS included.
    pub max_len: usize,
    pub k: usize,
    pub bos: u32,
    pub eos: u32,
}

impl BeamConfig {
    pub fn new(width: usize, max_len: usize, k: usize) -> Self {
        BeamConfig {
            width,
            max_len,
            k,
            bos: BOS,
            eos: EOS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.width < self.k {
            return Err(Error::Precondition(format!(
                "beam search needs width >= k >= 1 (width {}, k {})",
                self.width, self.k
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Precondition("beam search needs max_len >= 2".into()));
        }
        Ok(())
    }
}

/// A generated id sequence (BOS excluded, EOS included when finished).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSequence {
    pub ids: Vec<u32>,
    pub log_prob: f64,
}

impl ScoredSequence {
    /// Total log-probability divided by the number of generated tokens.
    pub fn score(&self) -> f64 {
        self.log_prob / self.ids.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutput {
    /// Best first; finished sequences, or unfinished prefixes when none finished.
    pub ranked: Vec<ScoredSequence>,
    pub unfinished: bool,
}

/// Higher log-probability first; ties go to the lower id sequence.
fn by_log_prob(a: &ScoredSequence, b: &ScoredSequence) -> Ordering {
    b.log_prob
        .partial_cmp(&a.log_prob)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.ids.cmp(&b.ids))
}

/// Higher normalized score first; ties go to the lower id sequence.
pub fn by_score(a: &ScoredSequence, b: &ScoredSequence) -> Ordering {
    b.score()
        .partial_cmp(&a.score())
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.ids.cmp(&b.ids))
}

/// Standard beam search from BOS.
///
/// Each step expands every live beam by every token and keeps the `width`
/// best candidates by cumulative log-probability; candidates ending in EOS
/// are finalized. Search ends when no beam is live, when no live beam can
/// still reach the best `width` finished results, or after `max_len`
/// tokens. Results are ranked by length-normalized log-probability and the
/// best `width` are returned.
pub fn beam_search_ids<S: StepScorer + ?Sized>(scorer: &S, cfg: &BeamConfig) -> Result<BeamOutput> {
    cfg.validate()?;
    let mut live = vec![ScoredSequence {
        ids: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<ScoredSequence> = Vec::new();
    let mut prefix = Vec::with_capacity(cfg.max_len + 1);

    for _ in 0..cfg.max_len {
        let mut candidates = Vec::new();
        for beam in &live {
            prefix.clear();
            prefix.push(cfg.bos);
            prefix.extend_from_slice(&beam.ids);
            let lp = scorer.next_log_probs(&prefix)?;
            for (tok, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let mut ids = beam.ids.clone();
                ids.push(tok as u32);
                candidates.push(ScoredSequence {
                    ids,
                    log_prob: beam.log_prob + l,
                });
            }
        }
        candidates.sort_by(by_log_prob);
        candidates.truncate(cfg.width);
        live.clear();
        for c in candidates {
            if c.ids.last() == Some(&cfg.eos) {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() || settled(&live, &mut finished, cfg) {
            break;
        }
    }

    let unfinished = finished.is_empty();
    let mut ranked = if unfinished { live } else { finished };
    ranked.sort_by(by_score);
    ranked.truncate(cfg.width);
    Ok(BeamOutput { ranked, unfinished })
}

/// True once no live beam can finish among the best `width` results.
///
/// A completion of a beam with cumulative log-probability `lp` scores at
/// most `lp / max_len`, since further tokens only lower the sum.
fn settled(live: &[ScoredSequence], finished: &mut [ScoredSequence], cfg: &BeamConfig) -> bool {
    if finished.len() < cfg.width {
        return false;
    }
    finished.sort_by(by_score);
    let cutoff = finished[cfg.width - 1].score();
    let best_live = live
        .iter()
        .map(|b| b.log_prob)
        .fold(f64::NEG_INFINITY, f64::max);
    best_live / (cfg.max_len as f64) < cutoff
}

/// Greedy decoding: argmax at every step (lowest id on ties).
pub fn greedy_ids<S: StepScorer + ?Sized>(
    scorer: &S,
    bos: u32,
    eos: u32,
    max_len: usize,
) -> Result<ScoredSequence> {
    let mut seq = ScoredSequence {
        ids: Vec::new(),
        log_prob: 0.0,
    };
    let mut prefix = vec![bos];
    for _ in 0..max_len {
        let lp = scorer.next_log_probs(&prefix)?;
        let (tok, &l) = lp
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, &f64)>, (i, l)| match best {
                Some((_, bl)) if *bl >= *l => best,
                _ => Some((i, l)),
            })
            .ok_or_else(|| Error::Shape("empty vocabulary".into()))?;
        seq.ids.push(tok as u32);
        seq.log_prob += l;
        prefix.push(tok as u32);
        if tok as u32 == eos {
            break;
        }
    }
    Ok(seq)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestionList {
    pub session_id: String,
    pub suggestions: Vec<Suggestion>,
    pub beam_width: usize,
    pub k: usize,
    /// No beam reached EOS; suggestions are the best unfinished prefixes.
    #[serde(default)]
    pub unfinished: bool,
}

impl SuggestionList {
    pub fn texts(&self) -> Vec<&str> {
        self.suggestions.iter().map(|s| s.text.as_str()).collect()
    }
}

/// Beam search over a model's decoder memory, decoded to at most `k`
/// distinct non-empty strings (a repeated surface form keeps its best score).
pub fn beam_search<F: Float>(
    session_id: &str,
    memory: &MeshedSequence<F>,
    model: &Model<F>,
    vocab: &Vocab,
    cfg: &BeamConfig,
) -> Result<SuggestionList> {
    let out = beam_search_ids(&ModelScorer { model, memory }, cfg)?;
    let mut seen = HashSet::new();
    let mut suggestions = Vec::new();
    for seq in &out.ranked {
        let text = normalize(&vocab.decode(&seq.ids));
        if text.is_empty() || !seen.insert(text.clone()) {
            continue;
        }
        suggestions.push(Suggestion {
            text,
            score: seq.score(),
        });
        if suggestions.len() == cfg.k {
            break;
        }
    }
    Ok(SuggestionList {
        session_id: session_id.to_string(),
        suggestions,
        beam_width: cfg.width,
        k: cfg.k,
        unfinished: out.unfinished,
    })
}

/// Beam-search suggestions for every session, in input order.
pub fn suggest_sessions<F: Float>(
    model: &Model<F>,
    vocab: &Vocab,
    sessions: &[SessionRecord],
    cfg: &BeamConfig,
) -> Result<Vec<SuggestionList>> {
    sessions
        .par_iter()
        .map(|s| {
            let memory = model.memory(&model.model_inputs(s, vocab)?)?;
            beam_search(&s.session_id, &memory, model, vocab, cfg)
        })
        .collect()
}

/// Tab-separated `session_id, rank, text, score`, ranks starting at 1.
pub fn write_suggestions(lists: &[SuggestionList]) -> String {
    let mut out = String::new();
    for list in lists {
        for (rank, s) in list.suggestions.iter().enumerate() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.6}\n",
                list.session_id,
                rank + 1,
                s.text,
                s.score
            ));
        }
    }
    out
}

/// Parses [`write_suggestions`] output into per-session ranked texts, in file order.
pub fn read_suggestions<R: BufRead>(reader: R) -> Result<Vec<(String, Vec<String>)>> {
    let mut out: Vec<(String, Vec<String>)> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<suggestions>", e))?;
        if line.is_empty() {
            continue;
        }
        let loc = format!("suggestions line {}", lineno + 1);
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::parse(loc, "expected session_id, rank, text, score"));
        }
        let rank: usize = f[1]
            .parse()
            .map_err(|_| Error::parse(loc.clone(), "bad rank"))?;
        f[3].parse::<f64>()
            .map_err(|_| Error::parse(loc.clone(), "bad score"))?;
        match out.last_mut() {
            Some((id, texts)) if id == f[0] => {
                if rank != texts.len() + 1 {
                    return Err(Error::parse(loc, "ranks must be consecutive"));
                }
                texts.push(f[2].to_string());
            }
            _ => {
                if rank != 1 {
                    return Err(Error::parse(loc, "ranks must start at 1"));
                }
                out.push((f[0].to_string(), vec![f[2].to_string()]));
            }
        }
    }
    Ok(out)
}
