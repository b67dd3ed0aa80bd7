use meshquery::decoder::{
    beam_search_ids, by_score, greedy_ids, log_softmax, BeamConfig, ScoredSequence, StepScorer,
};
use meshquery::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EOS: u32 = 0;
const BOS: u32 = 3;

/// Pseudo-random log-probabilities over 3 tokens for every prefix.
struct HashModel(u64);

impl StepScorer for HashModel {
    fn next_log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        let key = prefix.iter().fold(self.0, |h, &t| {
            h.wrapping_mul(31).wrapping_add(t as u64 + 1)
        });
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        Ok(log_softmax(
            &(0..3)
                .map(|_| rng.random_range(-3.0..3.0))
                .collect::<Vec<f64>>(),
        ))
    }
}

fn cfg(width: usize, max_len: usize) -> BeamConfig {
    BeamConfig {
        width,
        max_len,
        k: 1,
        bos: BOS,
        eos: EOS,
    }
}

fn enumerate(m: &HashModel, max_len: usize) -> Vec<ScoredSequence> {
    let mut out = Vec::new();
    let mut stack = vec![ScoredSequence {
        ids: vec![],
        log_prob: 0.0,
    }];
    while let Some(s) = stack.pop() {
        let mut prefix = vec![BOS];
        prefix.extend(&s.ids);
        let lp = m.next_log_probs(&prefix).unwrap();
        for t in 0..3u32 {
            let mut ids = s.ids.clone();
            ids.push(t);
            let next = ScoredSequence {
                ids,
                log_prob: s.log_prob + lp[t as usize],
            };
            if t == EOS {
                out.push(next);
            } else if next.ids.len() < max_len {
                stack.push(next);
            }
        }
    }
    out.sort_by(by_score);
    out
}

proptest! {
    #[test]
    fn exhaustive_beam_matches_enumeration(seed in any::<u64>(), max_len in 2usize..=4) {
        let m = HashModel(seed);
        let width = 3usize.pow(max_len as u32);
        let beam = beam_search_ids(&m, &cfg(width, max_len)).unwrap();
        let all = enumerate(&m, max_len);
        prop_assert!(!beam.unfinished);
        prop_assert_eq!(&beam.ranked[0].ids, &all[0].ids);
        prop_assert_eq!(beam.ranked.len(), all.len());
    }

    #[test]
    fn width_one_is_greedy(seed in any::<u64>(), max_len in 2usize..8) {
        let m = HashModel(seed);
        let beam = beam_search_ids(&m, &cfg(1, max_len)).unwrap();
        let greedy = greedy_ids(&m, BOS, EOS, max_len).unwrap();
        prop_assert_eq!(&beam.ranked[0].ids, &greedy.ids);
    }

    #[test]
    fn ranking_is_sorted_and_bounded(seed in any::<u64>(), width in 1usize..6) {
        let m = HashModel(seed);
        let out = beam_search_ids(&m, &cfg(width, 6)).unwrap();
        prop_assert!(out.ranked.len() <= width);
        prop_assert!(out.ranked.windows(2).all(|w| w[0].score() >= w[1].score()));
    }
}

/// One confident path `1 1 1 1 EOS`; any other prefix ends almost surely.
struct OnePath;

impl StepScorer for OnePath {
    fn next_log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        let gen = &prefix[1..];
        let on_path = gen.iter().all(|&t| t == 1);
        let p = match (on_path, gen.len()) {
            (true, 4) => [0.98, 0.01, 0.01],
            (true, _) => [0.01, 0.98, 0.01],
            (false, _) => [0.9, 0.05, 0.05],
        };
        Ok(p.iter().map(|x: &f64| x.ln()).collect())
    }
}

#[test]
fn early_junk_does_not_end_search() {
    let out = beam_search_ids(&OnePath, &cfg(2, 8)).unwrap();
    assert_eq!(out.ranked[0].ids, vec![1, 1, 1, 1, 0]);
    assert!(out.ranked.len() <= 2);
}
