//! Session segmentation, corpus filtering and ground-truth holdout.

use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypothesis;
use crate::text::normalize;
use crate::tokenizer::Vocab;

/// Default inactivity gap that closes a session: 30 minutes.
pub const DEFAULT_GAP_SECONDS: u64 = 1800;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Query,
    Click,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Query => "query",
            EventKind::Click => "click",
        }
    }
}

impl std::str::FromStr for EventKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" => Ok(EventKind::Query),
            "click" => Ok(EventKind::Click),
            other => Err(Error::InvalidInput(format!("unknown event kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawEvent {
    pub user_id: String,
    pub timestamp: u64,
    pub kind: EventKind,
    pub text: String,
}

impl RawEvent {
    pub fn query(user_id: &str, timestamp: u64, text: &str) -> Self {
        RawEvent {
            user_id: user_id.to_string(),
            timestamp,
            kind: EventKind::Query,
            text: text.to_string(),
        }
    }

    pub fn click(user_id: &str, timestamp: u64, text: &str) -> Self {
        RawEvent {
            user_id: user_id.to_string(),
            timestamp,
            kind: EventKind::Click,
            text: text.to_string(),
        }
    }

    /// One tab-separated line, without the trailing newline.
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.user_id,
            self.timestamp,
            self.kind.as_str(),
            self.text
        )
    }
}

/// Parses the tab-separated event log: `user_id, timestamp, kind, text`.
pub fn parse_events<R: BufRead>(reader: R) -> Result<Vec<RawEvent>> {
    let mut events = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<events>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let loc = format!("line {}", lineno + 1);
        let fields: Vec<&str> = line.splitn(4, '\t').collect();
        if fields.len() != 4 {
            return Err(Error::parse(loc, "expected 4 tab-separated fields"));
        }
        let timestamp = fields[1]
            .trim()
            .parse::<u64>()
            .map_err(|e| Error::parse(loc.clone(), format!("bad timestamp: {e}")))?;
        let kind = fields[2]
            .trim()
            .parse::<EventKind>()
            .map_err(|e| Error::parse(loc.clone(), e.to_string()))?;
        let text = normalize(fields[3]);
        if text.is_empty() {
            return Err(Error::parse(loc, "empty text"));
        }
        events.push(RawEvent {
            user_id: fields[0].to_string(),
            timestamp,
            kind,
            text,
        });
    }
    Ok(events)
}

/// Canonical event order: user, time, queries before clicks at equal time, text.
pub fn sort_events(events: &mut [RawEvent]) {
    events.sort_by(|a, b| {
        (&a.user_id, a.timestamp, a.kind, &a.text).cmp(&(&b.user_id, b.timestamp, b.kind, &b.text))
    });
}

/// One query `Q_i` with its clicked titles `C_i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub query: String,
    pub clicks: Vec<String>,
    pub query_time: u64,
}

impl Interaction {
    pub fn new(query: &str, clicks: &[&str], query_time: u64) -> Self {
        Interaction {
            query: query.to_string(),
            clicks: clicks.iter().map(|c| c.to_string()).collect(),
            query_time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub interactions: Vec<Interaction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
}

impl SessionRecord {
    pub fn is_held_out(&self) -> bool {
        self.ground_truth.is_some()
    }

    /// Number of queries in the session, counting a held-out ground truth.
    pub fn query_count(&self) -> usize {
        self.interactions.len() + usize::from(self.ground_truth.is_some())
    }

    pub fn last_query(&self) -> Option<&str> {
        self.interactions.last().map(|i| i.query.as_str())
    }

    pub fn start_time(&self) -> u64 {
        self.interactions.first().map_or(0, |i| i.query_time)
    }

    pub fn ground_truth(&self) -> Result<&str> {
        self.ground_truth.as_deref().ok_or_else(|| {
            Error::Precondition(format!("session {} is not held out", self.session_id))
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Segmentation {
    pub sessions: Vec<SessionRecord>,
    /// Clicks with no preceding query in their session.
    pub dropped_clicks: usize,
    /// Queries sharing a timestamp with the previous query of their session.
    pub dropped_queries: usize,
}

/// Splits a `(user_id, timestamp)`-sorted event stream into sessions.
///
/// A new session starts whenever two consecutive events of a user are
/// `gap_seconds` or more apart. Clicks attach to the latest query of the
/// current session; a click with no such query is dropped and counted.
pub fn segment_sessions(events: &[RawEvent], gap_seconds: u64) -> Result<Segmentation> {
    if gap_seconds == 0 {
        return Err(Error::Precondition("gap_seconds must be positive".into()));
    }
    if let Some(w) = events
        .windows(2)
        .position(|w| (&w[0].user_id, w[0].timestamp) > (&w[1].user_id, w[1].timestamp))
    {
        return Err(Error::Precondition(format!(
            "events not sorted by (user_id, timestamp) at index {}",
            w + 1
        )));
    }

    let mut out = Segmentation::default();
    let mut current: Option<SessionRecord> = None;
    let mut ordinal = 0usize;
    let mut prev: Option<&RawEvent> = None;

    for ev in events {
        let new_user = prev.is_none_or(|p| p.user_id != ev.user_id);
        let gap_break =
            prev.is_some_and(|p| !new_user && ev.timestamp - p.timestamp >= gap_seconds);
        if new_user || gap_break {
            if let Some(s) = current.take() {
                if !s.interactions.is_empty() {
                    out.sessions.push(s);
                    ordinal += 1;
                }
            }
            if new_user {
                ordinal = 0;
            }
            current = Some(SessionRecord {
                session_id: format!("{}#{}", ev.user_id, ordinal),
                interactions: Vec::new(),
                ground_truth: None,
            });
        }
        let session = current.as_mut().expect("session opened above");
        match ev.kind {
            EventKind::Query => match session.interactions.last() {
                Some(last) if last.query_time >= ev.timestamp => out.dropped_queries += 1,
                _ => session.interactions.push(Interaction {
                    query: ev.text.clone(),
                    clicks: Vec::new(),
                    query_time: ev.timestamp,
                }),
            },
            EventKind::Click => match session.interactions.last_mut() {
                Some(last) => {
                    if !last.clicks.contains(&ev.text) {
                        last.clicks.push(ev.text.clone());
                    }
                }
                None => out.dropped_clicks += 1,
            },
        }
        prev = Some(ev);
    }
    if let Some(s) = current.take() {
        if !s.interactions.is_empty() {
            out.sessions.push(s);
        }
    }
    Ok(out)
}

/// One JSON object per line.
pub fn sessions_to_jsonl(sessions: &[SessionRecord]) -> Result<String> {
    let mut out = String::new();
    for s in sessions {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn sessions_from_jsonl(text: &str) -> Result<Vec<SessionRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::parse(format!("sessions line {}", i + 1), e.to_string()))
        })
        .collect()
}

/// Moves the final query into `ground_truth`; its clicks are discarded.
pub fn holdout_ground_truth(session: &SessionRecord) -> Result<SessionRecord> {
    if session.is_held_out() {
        return Err(Error::Precondition(format!(
            "session {} is already held out",
            session.session_id
        )));
    }
    if session.interactions.len() < 2 {
        return Err(Error::Precondition(format!(
            "session {} has {} queries, holdout needs at least 2",
            session.session_id,
            session.interactions.len()
        )));
    }
    let mut interactions = session.interactions.clone();
    let last = interactions.pop().expect("length checked");
    Ok(SessionRecord {
        session_id: session.session_id.clone(),
        interactions,
        ground_truth: Some(last.query),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            dev_fraction: 0.05,
            test_fraction: 0.15,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub input_sessions: usize,
    pub removed_too_few_queries: usize,
    pub removed_overlong: usize,
    pub surviving_sessions: usize,
    /// Query submissions removed by the frequency rule (not a session count).
    pub infrequent_submissions_removed: usize,
    pub distinct_queries_removed: usize,
}

impl FilterStats {
    pub fn to_kv(&self) -> String {
        format!(
            "input_sessions={}\nremoved_too_few_queries={}\nremoved_overlong={}\nsurviving_sessions={}\ninfrequent_submissions_removed={}\ndistinct_queries_removed={}\n",
            self.input_sessions,
            self.removed_too_few_queries,
            self.removed_overlong,
            self.surviving_sessions,
            self.infrequent_submissions_removed,
            self.distinct_queries_removed
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<SessionRecord>,
    pub dev: Vec<SessionRecord>,
    pub test: Vec<SessionRecord>,
    pub query_frequency: BTreeMap<String, usize>,
    pub stats: FilterStats,
}

/// Per-submission query counts over the whole input, ground truths included.
pub fn query_frequencies(sessions: &[SessionRecord]) -> BTreeMap<String, usize> {
    let mut freq = BTreeMap::new();
    for s in sessions {
        for q in s
            .interactions
            .iter()
            .map(|i| &i.query)
            .chain(s.ground_truth.iter())
        {
            *freq.entry(q.clone()).or_insert(0) += 1;
        }
    }
    freq
}

/// Encoded length of the longest hypothesis (or of the target) of a held-out session.
pub fn longest_encoding(session: &SessionRecord, vocab: &Vocab) -> Result<usize> {
    let hyps = hypothesis::build_all(session)?;
    let longest = hyps
        .iter()
        .map(|h| vocab.encode_hypothesis(h).len())
        .max()
        .unwrap_or(0);
    let target = vocab.encode_target(session.ground_truth()?).len();
    Ok(longest.max(target))
}

/// Applies the frequency, singleton and max-length rules, holds out the
/// final query of each survivor, and splits chronologically.
///
/// Query frequency is counted per submission across all input sessions;
/// a query with count `<= min_query_freq` is removed together with its clicks.
pub fn apply_filters(
    sessions: &[SessionRecord],
    min_query_freq: usize,
    max_tokens: usize,
    tokenizer: Option<&Vocab>,
    split: &SplitConfig,
) -> Result<CorpusSplit> {
    let vocab = tokenizer.ok_or_else(|| Error::Config("tokenizer has not been trained".into()))?;
    if max_tokens == 0 {
        return Err(Error::Precondition("max_tokens must be positive".into()));
    }
    if !(0.0..=1.0).contains(&split.dev_fraction)
        || !(0.0..=1.0).contains(&split.test_fraction)
        || split.dev_fraction + split.test_fraction > 1.0
    {
        return Err(Error::Config(format!("invalid split fractions {split:?}")));
    }
    if let Some(s) = sessions.iter().find(|s| s.is_held_out()) {
        return Err(Error::Precondition(format!(
            "session {} is already held out",
            s.session_id
        )));
    }

    let all_freq = query_frequencies(sessions);
    let mut stats = FilterStats {
        input_sessions: sessions.len(),
        distinct_queries_removed: all_freq.values().filter(|&&c| c <= min_query_freq).count(),
        ..FilterStats::default()
    };

    let mut survivors = Vec::new();
    for s in sessions {
        let kept: Vec<Interaction> = s
            .interactions
            .iter()
            .filter(|i| all_freq[&i.query] > min_query_freq)
            .cloned()
            .collect();
        stats.infrequent_submissions_removed += s.interactions.len() - kept.len();
        if kept.len() < 2 {
            stats.removed_too_few_queries += 1;
            continue;
        }
        let held = holdout_ground_truth(&SessionRecord {
            session_id: s.session_id.clone(),
            interactions: kept,
            ground_truth: None,
        })?;
        if longest_encoding(&held, vocab)? > max_tokens {
            stats.removed_overlong += 1;
            continue;
        }
        survivors.push(held);
    }
    stats.surviving_sessions = survivors.len();

    survivors.sort_by(|a, b| (a.start_time(), &a.session_id).cmp(&(b.start_time(), &b.session_id)));
    let n = survivors.len();
    let n_test = ((n as f64) * split.test_fraction).round() as usize;
    let n_dev = (((n as f64) * split.dev_fraction).round() as usize).min(n - n_test);
    let test = survivors.split_off(n - n_test);

    let mut order: Vec<usize> = (0..survivors.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(split.seed));
    let dev_idx: HashSet<usize> = order.into_iter().take(n_dev).collect();
    let (mut dev, mut train) = (Vec::new(), Vec::new());
    for (i, s) in survivors.into_iter().enumerate() {
        if dev_idx.contains(&i) {
            dev.push(s);
        } else {
            train.push(s);
        }
    }
    // keep dev chronological too
    dev.sort_by(|a, b| (a.start_time(), &a.session_id).cmp(&(b.start_time(), &b.session_id)));

    let query_frequency = all_freq
        .into_iter()
        .filter(|(_, c)| *c > min_query_freq)
        .collect();
    Ok(CorpusSplit {
        train,
        dev,
        test,
        query_frequency,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(events: &[RawEvent]) -> Vec<SessionRecord> {
        segment_sessions(events, DEFAULT_GAP_SECONDS)
            .unwrap()
            .sessions
    }

    #[test]
    fn gap_just_below_boundary_stays_in_session() {
        let s = seg(&[
            RawEvent::query("u", 0, "a"),
            RawEvent::query("u", 1799, "b"),
        ]);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].interactions.len(), 2);
    }

    #[test]
    fn gap_at_boundary_splits() {
        let s = seg(&[
            RawEvent::query("u", 0, "a"),
            RawEvent::query("u", 1800, "b"),
        ]);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].session_id, "u#0");
        assert_eq!(s[1].session_id, "u#1");
    }

    #[test]
    fn hand_traced_stream() {
        let s = seg(&[
            RawEvent::query("u", 0, "q1"),
            RawEvent::click("u", 10, "c1"),
            RawEvent::query("u", 20, "q2"),
            RawEvent::query("u", 4000, "q3"),
        ]);
        assert_eq!(
            s,
            vec![
                SessionRecord {
                    session_id: "u#0".into(),
                    interactions: vec![
                        Interaction::new("q1", &["c1"], 0),
                        Interaction::new("q2", &[], 20)
                    ],
                    ground_truth: None,
                },
                SessionRecord {
                    session_id: "u#1".into(),
                    interactions: vec![Interaction::new("q3", &[], 4000)],
                    ground_truth: None,
                },
            ]
        );
    }

    #[test]
    fn orphan_click_is_dropped_and_counted() {
        let out = segment_sessions(
            &[
                RawEvent::click("u", 0, "t"),
                RawEvent::query("u", 5, "q"),
                RawEvent::query("u", 5000, "r"),
                RawEvent::click("v", 1, "t"),
            ],
            1800,
        )
        .unwrap();
        assert_eq!(out.dropped_clicks, 2);
        assert_eq!(out.sessions.len(), 2);
    }

    #[test]
    fn clicks_deduplicated_in_first_order() {
        let s = seg(&[
            RawEvent::query("u", 0, "q"),
            RawEvent::click("u", 1, "b"),
            RawEvent::click("u", 2, "a"),
            RawEvent::click("u", 3, "b"),
        ]);
        assert_eq!(s[0].interactions[0].clicks, vec!["b", "a"]);
    }

    #[test]
    fn unsorted_stream_rejected() {
        let err = segment_sessions(
            &[RawEvent::query("u", 10, "a"), RawEvent::query("u", 5, "b")],
            1800,
        );
        assert!(matches!(err, Err(Error::Precondition(_))));
        assert!(segment_sessions(&[], 0).is_err());
    }

    #[test]
    fn holdout_examples() {
        let two = SessionRecord {
            session_id: "s".into(),
            interactions: vec![
                Interaction::new("q1", &["t1"], 0),
                Interaction::new("q2", &[], 1),
            ],
            ground_truth: None,
        };
        let h = holdout_ground_truth(&two).unwrap();
        assert_eq!(h.interactions, vec![Interaction::new("q1", &["t1"], 0)]);
        assert_eq!(h.ground_truth.as_deref(), Some("q2"));

        let three = SessionRecord {
            session_id: "s".into(),
            interactions: vec![
                Interaction::new("q1", &[], 0),
                Interaction::new("q2", &["t2"], 1),
                Interaction::new("q3", &["late"], 2),
            ],
            ground_truth: None,
        };
        let h = holdout_ground_truth(&three).unwrap();
        assert_eq!(
            h.interactions,
            vec![
                Interaction::new("q1", &[], 0),
                Interaction::new("q2", &["t2"], 1)
            ]
        );
        assert_eq!(h.ground_truth.as_deref(), Some("q3"));

        let one = SessionRecord {
            session_id: "s".into(),
            interactions: vec![Interaction::new("q1", &[], 0)],
            ground_truth: None,
        };
        assert!(matches!(
            holdout_ground_truth(&one),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn parse_normalizes_and_rejects_bad_lines() {
        let input = "u1\t5\tquery\t  Data   Engineer \nu1\t9\tclick\tSenior DATA engineer\n\n";
        let ev = parse_events(input.as_bytes()).unwrap();
        assert_eq!(ev.len(), 2);
        assert_eq!(ev[0].text, "data engineer");
        assert_eq!(ev[1].kind, EventKind::Click);
        assert!(parse_events("u\t1\tquery\n".as_bytes()).is_err());
        assert!(parse_events("u\tx\tquery\tq\n".as_bytes()).is_err());
        assert!(parse_events("u\t1\tview\tq\n".as_bytes()).is_err());
        assert!(parse_events("u\t1\tquery\t  \n".as_bytes()).is_err());
    }
}
