//! The four behavioral hypotheses over a held-out session prefix.
//!
//! With `Q_1..Q_n` the session queries and `C_i` the titles clicked under
//! `Q_i`:
//!
//! * K1: `Q_1, .., Q_n`
//! * K2: every title of `C_1..C_{n-1}` in order, then `Q_n`
//! * K3: for each `i` with non-empty `C_i`, `Q_i` and its titles, then `Q_n`
//! * K4: `Q_n` followed by the titles of `C_n`
//!
//! K3 appends `Q_n` unconditionally, so `Q_n` appears twice when `C_n` is
//! non-empty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::session::SessionRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HypothesisKind {
    K1,
    K2,
    K3,
    K4,
}

impl HypothesisKind {
    /// Fixed order; the mesh attention index of a hypothesis is its position here.
    pub const ALL: [HypothesisKind; 4] = [
        HypothesisKind::K1,
        HypothesisKind::K2,
        HypothesisKind::K3,
        HypothesisKind::K4,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            HypothesisKind::K1 => "K1",
            HypothesisKind::K2 => "K2",
            HypothesisKind::K3 => "K3",
            HypothesisKind::K4 => "K4",
        }
    }
}

impl std::str::FromStr for HypothesisKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "K1" => Ok(HypothesisKind::K1),
            "K2" => Ok(HypothesisKind::K2),
            "K3" => Ok(HypothesisKind::K3),
            "K4" => Ok(HypothesisKind::K4),
            _ => Err(Error::Config(format!("unknown hypothesis kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemKind {
    Query,
    Title,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub text: String,
    pub kind: ItemKind,
}

impl Item {
    fn query(text: &str) -> Self {
        Item {
            text: text.to_string(),
            kind: ItemKind::Query,
        }
    }

    fn title(text: &str) -> Self {
        Item {
            text: text.to_string(),
            kind: ItemKind::Title,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub kind: HypothesisKind,
    pub items: Vec<Item>,
    pub session_id: String,
}

impl Hypothesis {
    pub fn texts(&self) -> Vec<&str> {
        self.items.iter().map(|i| i.text.as_str()).collect()
    }
}

pub fn build_hypothesis(session: &SessionRecord, kind: HypothesisKind) -> Result<Hypothesis> {
    let (last, earlier) = session.interactions.split_last().ok_or_else(|| {
        Error::Precondition(format!(
            "session {} has no interactions",
            session.session_id
        ))
    })?;
    let mut items = Vec::new();
    match kind {
        HypothesisKind::K1 => {
            items.extend(session.interactions.iter().map(|i| Item::query(&i.query)));
        }
        HypothesisKind::K2 => {
            for i in earlier {
                items.extend(i.clicks.iter().map(|t| Item::title(t)));
            }
            items.push(Item::query(&last.query));
        }
        HypothesisKind::K3 => {
            for i in session.interactions.iter().filter(|i| !i.clicks.is_empty()) {
                items.push(Item::query(&i.query));
                items.extend(i.clicks.iter().map(|t| Item::title(t)));
            }
            items.push(Item::query(&last.query));
        }
        HypothesisKind::K4 => {
            items.push(Item::query(&last.query));
            items.extend(last.clicks.iter().map(|t| Item::title(t)));
        }
    }
    debug_assert!(!items.is_empty());
    Ok(Hypothesis {
        kind,
        items,
        session_id: session.session_id.clone(),
    })
}

/// All four hypotheses in `HypothesisKind::ALL` order.
pub fn build_all(session: &SessionRecord) -> Result<[Hypothesis; 4]> {
    Ok([
        build_hypothesis(session, HypothesisKind::K1)?,
        build_hypothesis(session, HypothesisKind::K2)?,
        build_hypothesis(session, HypothesisKind::K3)?,
        build_hypothesis(session, HypothesisKind::K4)?,
    ])
}

/// Serialized form written by the `hypotheses` command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub session_id: String,
    pub hypotheses: Vec<Hypothesis>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::Interaction;
    use proptest::prelude::*;

    fn session(inter: Vec<Interaction>) -> SessionRecord {
        SessionRecord {
            session_id: "s".into(),
            interactions: inter,
            ground_truth: Some("next".into()),
        }
    }

    fn texts(h: &Hypothesis) -> Vec<&str> {
        h.texts()
    }

    #[test]
    fn k3_interleaves_clicked_queries() {
        let s = session(vec![
            Interaction::new("q1", &["t11", "t12"], 0),
            Interaction::new("q2", &[], 1),
        ]);
        let h = build_hypothesis(&s, HypothesisKind::K3).unwrap();
        assert_eq!(texts(&h), ["q1", "t11", "t12", "q2"]);
        assert_eq!(
            h.items.iter().map(|i| i.kind).collect::<Vec<_>>(),
            [
                ItemKind::Query,
                ItemKind::Title,
                ItemKind::Title,
                ItemKind::Query
            ]
        );
    }

    #[test]
    fn k2_without_earlier_clicks_is_last_query() {
        let s = session(vec![
            Interaction::new("q1", &[], 0),
            Interaction::new("q2", &[], 1),
        ]);
        assert_eq!(
            texts(&build_hypothesis(&s, HypothesisKind::K2).unwrap()),
            ["q2"]
        );
    }

    #[test]
    fn k4_uses_last_interaction() {
        let s = session(vec![
            Interaction::new("q1", &["t"], 0),
            Interaction::new("q2", &["u"], 1),
        ]);
        assert_eq!(
            texts(&build_hypothesis(&s, HypothesisKind::K4).unwrap()),
            ["q2", "u"]
        );
    }

    #[test]
    fn click_free_session() {
        let s = session(vec![
            Interaction::new("a", &[], 0),
            Interaction::new("b", &[], 1),
            Interaction::new("c", &[], 2),
        ]);
        let all = build_all(&s).unwrap();
        assert_eq!(texts(&all[0]), ["a", "b", "c"]);
        for h in &all[1..] {
            assert_eq!(texts(h), ["c"]);
        }
    }

    #[test]
    fn single_query_with_clicks_duplicates_last_query_in_k3() {
        let s = session(vec![Interaction::new("q1", &["t1"], 0)]);
        let all = build_all(&s).unwrap();
        assert_eq!(all.len(), 4);
        assert_eq!(texts(&all[0]), ["q1"]);
        assert_eq!(texts(&all[1]), ["q1"]);
        assert_eq!(texts(&all[2]), ["q1", "t1", "q1"]);
        assert_eq!(texts(&all[3]), ["q1", "t1"]);
        for (h, k) in all.iter().zip(HypothesisKind::ALL) {
            assert_eq!(h.kind, k);
        }
    }

    #[test]
    fn empty_session_rejected() {
        assert!(build_all(&session(vec![])).is_err());
    }

    fn arb_session() -> impl Strategy<Value = SessionRecord> {
        prop::collection::vec(
            ("[a-c]{1,2}", prop::collection::vec("[x-z]{1,2}", 0..3)),
            1..5,
        )
        .prop_map(|inter| {
            session(
                inter
                    .into_iter()
                    .enumerate()
                    .map(|(i, (q, c))| Interaction {
                        query: q,
                        clicks: c,
                        query_time: i as u64,
                    })
                    .collect(),
            )
        })
    }

    proptest! {
        #[test]
        fn structural_invariants(s in arb_session()) {
            let all = build_all(&s).unwrap();
            let queries: Vec<&str> = s.interactions.iter().map(|i| i.query.as_str()).collect();
            prop_assert_eq!(texts(&all[0]), queries.clone());
            prop_assert!(all[0].items.iter().all(|i| i.kind == ItemKind::Query));

            // K4 depends only on the final interaction
            let mut tail_only = s.clone();
            tail_only.interactions = vec![s.interactions.last().unwrap().clone()];
            prop_assert_eq!(&all[3].items, &build_hypothesis(&tail_only, HypothesisKind::K4).unwrap().items);

            if s.interactions.iter().all(|i| i.clicks.is_empty()) {
                let last = vec![*queries.last().unwrap()];
                for h in &all[1..] {
                    prop_assert_eq!(texts(h), last.clone());
                }
            }
            // items never empty, and every hypothesis but K4 ends with Q_n
            for h in &all[..3] {
                prop_assert_eq!(h.items.last().unwrap().text.as_str(), *queries.last().unwrap());
            }
        }
    }
}
