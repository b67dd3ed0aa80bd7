//! Most Popular Suggestion: rank next queries by how often they followed
//! the session's last query in training.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::decoder::{Suggestion, SuggestionList};
use crate::error::{Error, Result};
use crate::session::SessionRecord;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CandidatePool {
    /// `previous query -> next query -> count`
    pub cooccurrence: BTreeMap<String, BTreeMap<String, usize>>,
    pub global_freq: BTreeMap<String, usize>,
}

/// Counts adjacent query pairs `(Q_i, Q_{i+1})` of held-out training
/// sessions, the ground truth included as the final query.
pub fn build_pool(train: &[SessionRecord]) -> CandidatePool {
    let mut pool = CandidatePool::default();
    for s in train {
        let queries: Vec<&String> = s
            .interactions
            .iter()
            .map(|i| &i.query)
            .chain(s.ground_truth.iter())
            .collect();
        for q in &queries {
            *pool.global_freq.entry((*q).clone()).or_insert(0) += 1;
        }
        for pair in queries.windows(2) {
            *pool
                .cooccurrence
                .entry(pair[0].clone())
                .or_default()
                .entry(pair[1].clone())
                .or_insert(0) += 1;
        }
    }
    pool
}

impl CandidatePool {
    pub fn is_empty(&self) -> bool {
        self.cooccurrence.is_empty()
    }

    pub fn candidates(&self, last_query: &str) -> Option<&BTreeMap<String, usize>> {
        self.cooccurrence.get(last_query)
    }

    pub fn covers(&self, last_query: &str) -> bool {
        self.cooccurrence.contains_key(last_query)
    }

    /// Fraction of sessions whose last query is a pool key.
    pub fn coverage(&self, sessions: &[SessionRecord]) -> f64 {
        if sessions.is_empty() {
            return 0.0;
        }
        let hit = sessions
            .iter()
            .filter(|s| s.last_query().is_some_and(|q| self.covers(q)))
            .count();
        hit as f64 / sessions.len() as f64
    }

    /// Sorted text table: `pair\tprev\tnext\tcount` then `freq\tquery\tcount`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (prev, nexts) in &self.cooccurrence {
            for (next, c) in nexts {
                let _ = writeln!(out, "pair\t{prev}\t{next}\t{c}");
            }
        }
        for (q, c) in &self.global_freq {
            let _ = writeln!(out, "freq\t{q}\t{c}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut pool = CandidatePool::default();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let loc = format!("pool line {}", lineno + 1);
            let f: Vec<&str> = line.split('\t').collect();
            let count = |s: &str| -> Result<usize> {
                match s.parse::<usize>() {
                    Ok(c) if c > 0 => Ok(c),
                    _ => Err(Error::parse(
                        loc.clone(),
                        "count must be a positive integer",
                    )),
                }
            };
            match f.as_slice() {
                ["pair", prev, next, c] => {
                    pool.cooccurrence
                        .entry(prev.to_string())
                        .or_default()
                        .insert(next.to_string(), count(c)?);
                }
                ["freq", q, c] => {
                    pool.global_freq.insert(q.to_string(), count(c)?);
                }
                _ => return Err(Error::parse(loc, "expected a pair or freq row")),
            }
        }
        Ok(pool)
    }
}

/// Top-`k` followers of `last_query` by co-occurrence count, then global
/// frequency, then lexicographic order. Unseen queries yield an empty list.
pub fn suggest_mps(
    session_id: &str,
    last_query: &str,
    pool: &CandidatePool,
    k: usize,
) -> Result<SuggestionList> {
    if k == 0 {
        return Err(Error::Precondition("k must be at least 1".into()));
    }
    let mut ranked: Vec<(&String, usize)> = pool
        .candidates(last_query)
        .map(|c| c.iter().map(|(q, &n)| (q, n)).collect())
        .unwrap_or_default();
    ranked.sort_by(|a, b| {
        let ga = pool.global_freq.get(a.0).copied().unwrap_or(0);
        let gb = pool.global_freq.get(b.0).copied().unwrap_or(0);
        b.1.cmp(&a.1).then(gb.cmp(&ga)).then(a.0.cmp(b.0))
    });
    Ok(SuggestionList {
        session_id: session_id.to_string(),
        suggestions: ranked
            .into_iter()
            .take(k)
            .map(|(q, n)| Suggestion {
                text: q.clone(),
                score: n as f64,
            })
            .collect(),
        beam_width: 0,
        k,
        unfinished: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::Interaction;
    use proptest::prelude::*;

    fn chain(id: &str, qs: &[&str]) -> SessionRecord {
        let (last, rest) = qs.split_last().unwrap();
        SessionRecord {
            session_id: id.into(),
            interactions: rest
                .iter()
                .enumerate()
                .map(|(i, q)| Interaction::new(q, &[], i as u64))
                .collect(),
            ground_truth: Some(last.to_string()),
        }
    }

    #[test]
    fn pair_counts() {
        let pool = build_pool(&[
            chain("1", &["a", "b"]),
            chain("2", &["a", "b"]),
            chain("3", &["a", "c"]),
        ]);
        let a = pool.candidates("a").unwrap();
        assert_eq!(a.get("b"), Some(&2));
        assert_eq!(a.get("c"), Some(&1));
        assert_eq!(a.len(), 2);
        let s = suggest_mps("x", "a", &pool, 3).unwrap();
        assert_eq!(s.texts(), ["b", "c"]);
    }

    #[test]
    fn adjacency_only() {
        let pool = build_pool(&[chain("1", &["a", "b", "c"])]);
        assert_eq!(
            pool.candidates("a").unwrap().keys().collect::<Vec<_>>(),
            ["b"]
        );
        assert_eq!(
            pool.candidates("b").unwrap().keys().collect::<Vec<_>>(),
            ["c"]
        );
        assert!(pool.candidates("c").is_none());
        assert_eq!(pool.global_freq.values().sum::<usize>(), 3);
    }

    #[test]
    fn empty_and_unseen() {
        let pool = build_pool(&[]);
        assert!(pool.is_empty());
        assert!(suggest_mps("x", "a", &pool, 3)
            .unwrap()
            .suggestions
            .is_empty());
        assert!(suggest_mps("x", "a", &pool, 0).is_err());
    }

    #[test]
    fn ties_fall_back_to_global_then_lexicographic() {
        let pool = build_pool(&[
            chain("1", &["a", "z"]),
            chain("2", &["a", "y"]),
            chain("3", &["a", "x"]),
            chain("4", &["q", "z"]),
        ]);
        let s = suggest_mps("s", "a", &pool, 3).unwrap();
        assert_eq!(s.texts(), ["z", "x", "y"]);
    }

    #[test]
    fn text_round_trip() {
        let pool = build_pool(&[chain("1", &["a b", "c"]), chain("2", &["a b", "c", "d"])]);
        let back = CandidatePool::from_text(&pool.to_text()).unwrap();
        assert_eq!(back, pool);
        assert!(CandidatePool::from_text("pair\ta\tb\t0\n").is_err());
    }

    proptest! {
        #[test]
        fn matches_brute_force_sort(sessions in prop::collection::vec(prop::collection::vec(0u8..4, 2..5), 0..12), k in 1usize..5) {
            let names = ["a", "b", "c", "d"];
            let recs: Vec<SessionRecord> = sessions
                .iter()
                .enumerate()
                .map(|(i, s)| chain(&i.to_string(), &s.iter().map(|&q| names[q as usize]).collect::<Vec<_>>()))
                .collect();
            let pool = build_pool(&recs);
            for last in names {
                // brute force: count pairs directly, sort by the documented key
                let mut counts: Vec<(String, usize, usize)> = Vec::new();
                for next in names {
                    let n = sessions.iter().map(|s| s.windows(2).filter(|w| names[w[0] as usize] == last && names[w[1] as usize] == next).count()).sum::<usize>();
                    let g = sessions.iter().map(|s| s.iter().filter(|&&q| names[q as usize] == next).count()).sum::<usize>();
                    if n > 0 {
                        counts.push((next.to_string(), n, g));
                    }
                }
                counts.sort_by(|a, b| b.1.cmp(&a.1).then(b.2.cmp(&a.2)).then(a.0.cmp(&b.0)));
                let expected: Vec<String> = counts.into_iter().take(k).map(|c| c.0).collect();
                let got = suggest_mps("s", last, &pool, k).unwrap();
                prop_assert_eq!(got.texts(), expected.iter().map(|s| s.as_str()).collect::<Vec<_>>());
            }
        }
    }
}
