//! Synthetic job-search logs with planted next-query rules.
//!
//! Every session belongs to its own user and ends with the query a model
//! should predict. The final query follows one of three rules:
//!
//! * refinement: the last query plus a location mentioned earlier in the
//!   session (recoverable from the query history alone);
//! * clicked title: a skill and a role that only appear in the titles
//!   clicked after the last query;
//! * noise: an unrelated random query.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::session::RawEvent;
use crate::trainer::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Refinement,
    Clicked,
    Noise,
}

impl Rule {
    pub fn as_str(self) -> &'static str {
        match self {
            Rule::Refinement => "refinement",
            Rule::Clicked => "clicked",
            Rule::Noise => "noise",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "refinement" => Ok(Rule::Refinement),
            "clicked" => Ok(Rule::Clicked),
            "noise" => Ok(Rule::Noise),
            _ => Err(Error::parse("label", format!("unknown rule {s:?}"))),
        }
    }
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthProfile {
    pub roles: Vec<String>,
    pub skills: Vec<String>,
    pub locations: Vec<String>,
    pub companies: Vec<String>,
    pub seniorities: Vec<String>,
    pub p_refinement: f64,
    pub p_clicked: f64,
    /// Context queries before the final one, inclusive range.
    pub min_context_queries: usize,
    pub max_context_queries: usize,
    /// Relative weights of 0, 1, 2, ... clicks after a context query.
    pub click_weights: Vec<f64>,
    /// Forces at least one click after every context query.
    pub always_click: bool,
    pub start_time: u64,
}

impl Default for SynthProfile {
    fn default() -> Self {
        SynthProfile {
            roles: words(&[
                "accountant",
                "analyst",
                "architect",
                "chef",
                "designer",
                "developer",
                "electrician",
                "engineer",
                "lawyer",
                "manager",
                "nurse",
                "pharmacist",
                "plumber",
                "recruiter",
                "scientist",
                "teacher",
            ]),
            skills: words(&[
                "python",
                "sql",
                "excel",
                "java",
                "payroll",
                "welding",
                "sales",
                "marketing",
                "tableau",
                "react",
                "autocad",
                "compliance",
                "logistics",
                "hospitality",
            ]),
            locations: words(&[
                "sydney",
                "melbourne",
                "brisbane",
                "perth",
                "adelaide",
                "hobart",
                "darwin",
                "canberra",
            ]),
            companies: words(&[
                "acme", "globex", "initech", "umbrella", "hooli", "stark", "wayne", "vandelay",
            ]),
            seniorities: words(&["junior", "senior", "lead", "graduate"]),
            p_refinement: 0.15,
            p_clicked: 0.7,
            min_context_queries: 1,
            max_context_queries: 3,
            click_weights: vec![0.35, 0.35, 0.2, 0.1],
            always_click: false,
            start_time: 1_600_000_000,
        }
    }
}

impl SynthProfile {
    /// Small profile for memorization runs: every query is clicked so the
    /// four hypotheses differ.
    pub fn overfit() -> Self {
        SynthProfile {
            always_click: true,
            click_weights: vec![0.0, 0.6, 0.4],
            p_refinement: 0.5,
            p_clicked: 0.5,
            ..SynthProfile::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, list) in [
            ("roles", &self.roles),
            ("skills", &self.skills),
            ("locations", &self.locations),
            ("companies", &self.companies),
            ("seniorities", &self.seniorities),
        ] {
            if list.is_empty() {
                return Err(Error::Config(format!(
                    "synthetic vocabulary {name} is empty"
                )));
            }
            if list.iter().any(|w| {
                w.trim().is_empty() || w.contains(char::is_whitespace) || w != &w.to_lowercase()
            }) {
                return Err(Error::Config(format!(
                    "synthetic vocabulary {name} needs single lowercase words"
                )));
            }
        }
        let (a, b) = (self.p_refinement, self.p_clicked);
        if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a + b > 1.0 + 1e-12 {
            return Err(Error::Config(
                "rule probabilities must lie in [0, 1] and sum to at most 1".into(),
            ));
        }
        if self.min_context_queries == 0 || self.max_context_queries < self.min_context_queries {
            return Err(Error::Config(
                "need 1 <= min_context_queries <= max_context_queries".into(),
            ));
        }
        if self.click_weights.is_empty()
            || self
                .click_weights
                .iter()
                .any(|w| *w < 0.0 || !w.is_finite())
        {
            return Err(Error::Config("click_weights must be non-negative".into()));
        }
        let positive = if self.always_click {
            &self.click_weights[1.min(self.click_weights.len())..]
        } else {
            &self.click_weights[..]
        };
        if positive.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(
                "click_weights leave no admissible click count".into(),
            ));
        }
        Ok(())
    }
}

/// Rule label of one generated session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionLabel {
    /// Id the session receives from segmentation (`user#0`).
    pub session_id: String,
    pub rule: Rule,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SynthCorpus {
    pub events: Vec<RawEvent>,
    pub labels: Vec<SessionLabel>,
}

impl SynthCorpus {
    pub fn events_tsv(&self) -> String {
        self.events.iter().map(|e| e.to_line() + "\n").collect()
    }

    pub fn labels_tsv(&self) -> String {
        self.labels
            .iter()
            .map(|l| format!("{}\t{}\n", l.session_id, l.rule))
            .collect()
    }
}

pub fn parse_labels(text: &str) -> Result<Vec<SessionLabel>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let (id, rule) = line.split_once('\t').ok_or_else(|| {
                Error::parse(format!("labels line {}", i + 1), "expected 2 fields")
            })?;
            Ok(SessionLabel {
                session_id: id.to_string(),
                rule: rule.parse()?,
            })
        })
        .collect()
}

const SESSIONS_PER_CHUNK: usize = 256;
const SESSION_SPACING: u64 = 7200;

/// Generates `n_sessions` sessions; identical for identical seed and profile.
pub fn generate(seed: u64, n_sessions: usize, profile: &SynthProfile) -> Result<SynthCorpus> {
    profile.validate()?;
    let chunks: Vec<(Vec<RawEvent>, Vec<SessionLabel>)> = (0..n_sessions
        .div_ceil(SESSIONS_PER_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[c as u64]));
            let lo = c * SESSIONS_PER_CHUNK;
            let hi = (lo + SESSIONS_PER_CHUNK).min(n_sessions);
            let mut events = Vec::new();
            let mut labels = Vec::new();
            for i in lo..hi {
                let (ev, rule) = session(&mut rng, i, profile);
                labels.push(SessionLabel {
                    session_id: format!("{}#0", user_id(i)),
                    rule,
                });
                events.extend(ev);
            }
            (events, labels)
        })
        .collect();
    let mut out = SynthCorpus::default();
    for (e, l) in chunks {
        out.events.extend(e);
        out.labels.extend(l);
    }
    Ok(out)
}

fn user_id(i: usize) -> String {
    format!("u{:06}", i + 1)
}

fn pick<'a, R: Rng>(rng: &mut R, list: &'a [String]) -> &'a str {
    list.choose(rng).expect("validated non-empty")
}

fn click_count<R: Rng>(rng: &mut R, profile: &SynthProfile) -> usize {
    let start = usize::from(profile.always_click);
    let w = &profile.click_weights[start.min(profile.click_weights.len())..];
    let total: f64 = w.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        if x < *wi {
            return start + i;
        }
        x -= wi;
    }
    start + w.len() - 1
}

fn random_query<R: Rng>(rng: &mut R, p: &SynthProfile) -> String {
    match rng.random_range(0..5) {
        0 => pick(rng, &p.roles).to_string(),
        1 => format!("{} {}", pick(rng, &p.seniorities), pick(rng, &p.roles)),
        2 => format!("{} {}", pick(rng, &p.roles), pick(rng, &p.locations)),
        3 => format!("{} jobs", pick(rng, &p.skills)),
        _ => format!("{} careers", pick(rng, &p.companies)),
    }
}

fn random_title<R: Rng>(rng: &mut R, p: &SynthProfile) -> String {
    format!(
        "{} {} at {}",
        pick(rng, &p.seniorities),
        pick(rng, &p.roles),
        pick(rng, &p.companies)
    )
}

fn session<R: Rng>(rng: &mut R, index: usize, p: &SynthProfile) -> (Vec<RawEvent>, Rule) {
    let user = user_id(index);
    let u: f64 = rng.random();
    let rule = if u < p.p_refinement {
        Rule::Refinement
    } else if u < p.p_refinement + p.p_clicked {
        Rule::Clicked
    } else {
        Rule::Noise
    };
    let n = rng.random_range(p.min_context_queries..=p.max_context_queries);
    let role = pick(rng, &p.roles).to_string();
    let location = pick(rng, &p.locations).to_string();

    let mut queries: Vec<String> = (0..n).map(|_| random_query(rng, p)).collect();
    let mut clicks: Vec<Vec<String>> = (0..n)
        .map(|_| {
            let c = click_count(rng, p);
            let mut seen = BTreeSet::new();
            (0..c)
                .map(|_| random_title(rng, p))
                .filter(|t| seen.insert(t.clone()))
                .collect()
        })
        .collect();

    let target = match rule {
        Rule::Refinement => {
            let last = format!("{} {}", pick(rng, &p.seniorities), role);
            if n > 1 {
                queries[0] = format!("{role} {location}");
            }
            queries[n - 1] = last.clone();
            let loc = if n > 1 {
                location
            } else {
                p.locations
                    [p.roles.iter().position(|r| *r == role).unwrap_or(0) % p.locations.len()]
                .clone()
            };
            format!("{last} {loc}")
        }
        Rule::Clicked => {
            let skill = pick(rng, &p.skills).to_string();
            let title_role = pick(rng, &p.roles).to_string();
            let c = click_count(rng, p).max(1);
            let mut seen = BTreeSet::new();
            clicks[n - 1] = (0..c)
                .map(|_| format!("{title_role} {skill} at {}", pick(rng, &p.companies)))
                .filter(|t| seen.insert(t.clone()))
                .collect();
            format!("{skill} {title_role}")
        }
        Rule::Noise => random_query(rng, p),
    };

    let mut t = p.start_time + index as u64 * SESSION_SPACING;
    let mut events = Vec::new();
    for (q, cs) in queries.iter().zip(&clicks) {
        events.push(RawEvent::query(&user, t, q));
        for c in cs {
            t += rng.random_range(5..60);
            events.push(RawEvent::click(&user, t, c));
        }
        t += rng.random_range(20..300);
    }
    events.push(RawEvent::query(&user, t, &target));
    (events, rule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::{segment_sessions, DEFAULT_GAP_SECONDS};

    #[test]
    fn deterministic_and_empty() {
        let p = SynthProfile::default();
        let a = generate(3, 300, &p).unwrap();
        assert_eq!(a.events_tsv(), generate(3, 300, &p).unwrap().events_tsv());
        assert_ne!(a.events_tsv(), generate(4, 300, &p).unwrap().events_tsv());
        let e = generate(3, 0, &p).unwrap();
        assert!(e.events.is_empty() && e.labels.is_empty());
    }

    #[test]
    fn empty_vocabulary_rejected() {
        let p = SynthProfile {
            skills: vec![],
            ..SynthProfile::default()
        };
        assert!(matches!(generate(1, 5, &p), Err(Error::Config(_))));
    }

    #[test]
    fn clicked_rule_shares_a_word_with_last_titles() {
        let p = SynthProfile {
            p_refinement: 0.0,
            p_clicked: 1.0,
            ..SynthProfile::default()
        };
        let corpus = generate(9, 200, &p).unwrap();
        let seg = segment_sessions(&corpus.events, DEFAULT_GAP_SECONDS).unwrap();
        assert_eq!(seg.sessions.len(), 200);
        assert_eq!((seg.dropped_clicks, seg.dropped_queries), (0, 0));
        for s in &seg.sessions {
            let n = s.interactions.len();
            let target = &s.interactions[n - 1].query;
            let last = &s.interactions[n - 2];
            assert!(!last.clicks.is_empty());
            assert!(target
                .split(' ')
                .any(|w| last.clicks.iter().any(|t| t.split(' ').any(|x| x == w))));
        }
    }

    #[test]
    fn labels_round_trip() {
        let c = generate(1, 20, &SynthProfile::default()).unwrap();
        assert_eq!(parse_labels(&c.labels_tsv()).unwrap(), c.labels);
        assert_eq!(c.labels[0].session_id, "u000001#0");
    }
}
