//! Byte-level BPE shared by every model, plus sentence formatting.
//!
//! Ids 0..5 are the control tokens, 5..261 the 256 raw bytes, and every id
//! above that is a learned merge. Words after the first in a sentence carry
//! their leading space, so decoding is plain byte concatenation.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypothesis::Hypothesis;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const SEP: u32 = 2;
pub const PAD: u32 = 3;
pub const UNK: u32 = 4;
pub const N_CONTROL: usize = 5;
pub const ALPHABET_SIZE: usize = 256;

const CONTROL_NAMES: [&str; N_CONTROL] = ["<bos>", "<eos>", "<sep>", "<pad>", "<unk>"];
const FORMAT_HEADER: &str = "meshquery-bpe v1";

/// Smallest vocabulary that admits at least one merge.
pub const MIN_VOCAB_SIZE: usize = N_CONTROL + ALPHABET_SIZE + 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    /// Byte string of every id; empty for control tokens.
    tokens: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    merge_rank: HashMap<(u32, u32), usize>,
    token_to_id: HashMap<Vec<u8>, u32>,
}

/// Model input or target ids with their validity mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn unpadded(ids: Vec<u32>) -> Self {
        let mask = vec![true; ids.len()];
        TokenSequence { ids, mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of real (unpadded) tokens.
    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn byte_id(b: u8) -> u32 {
    (N_CONTROL + b as usize) as u32
}

/// Splits a sentence into words, re-attaching the separating space to the
/// following word.
fn pretokenize(text: &str) -> impl Iterator<Item = Vec<u8>> + '_ {
    text.split_whitespace().enumerate().map(|(i, w)| {
        let mut bytes = Vec::with_capacity(w.len() + 1);
        if i > 0 {
            bytes.push(b' ');
        }
        bytes.extend_from_slice(w.as_bytes());
        bytes
    })
}

impl Vocab {
    fn base() -> Self {
        let mut tokens: Vec<Vec<u8>> = vec![Vec::new(); N_CONTROL];
        tokens.extend((0..=255u8).map(|b| vec![b]));
        let token_to_id = tokens
            .iter()
            .enumerate()
            .skip(N_CONTROL)
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            tokens,
            merges: Vec::new(),
            merge_rank: HashMap::new(),
            token_to_id,
        }
    }

    fn push_merge(&mut self, pair: (u32, u32)) -> u32 {
        let mut bytes = self.tokens[pair.0 as usize].clone();
        bytes.extend_from_slice(&self.tokens[pair.1 as usize]);
        let id = self.tokens.len() as u32;
        self.token_to_id.entry(bytes.clone()).or_insert(id);
        self.tokens.push(bytes);
        self.merge_rank.insert(pair, self.merges.len());
        self.merges.push(pair);
        id
    }

    /// Greedy BPE training: repeatedly merges the most frequent adjacent pair,
    /// breaking count ties by the lexicographically smallest byte strings.
    pub fn train(corpus: &[String], vocab_size: usize) -> Result<Vocab> {
        if corpus.is_empty() {
            return Err(Error::InvalidInput(
                "cannot train BPE on an empty corpus".into(),
            ));
        }
        if vocab_size < MIN_VOCAB_SIZE {
            return Err(Error::Config(format!(
                "vocab_size must exceed {} (control tokens plus byte alphabet), got {vocab_size}",
                N_CONTROL + ALPHABET_SIZE
            )));
        }
        let mut word_counts: BTreeMap<Vec<u8>, usize> = BTreeMap::new();
        for line in corpus {
            for w in pretokenize(line) {
                *word_counts.entry(w).or_insert(0) += 1;
            }
        }
        let mut words: Vec<(Vec<u32>, usize)> = word_counts
            .into_iter()
            .map(|(w, c)| (w.iter().map(|&b| byte_id(b)).collect(), c))
            .collect();

        let mut vocab = Vocab::base();
        while vocab.tokens.len() < vocab_size {
            let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
            for (symbols, c) in &words {
                for pair in symbols.windows(2) {
                    *counts.entry((pair[0], pair[1])).or_insert(0) += c;
                }
            }
            let Some((&best, _)) = counts.iter().max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb)
                    .then_with(|| {
                        let ka = (&vocab.tokens[pb.0 as usize], &vocab.tokens[pb.1 as usize]);
                        let kb = (&vocab.tokens[pa.0 as usize], &vocab.tokens[pa.1 as usize]);
                        ka.cmp(&kb)
                    })
                    .then_with(|| pb.cmp(pa))
            }) else {
                break;
            };
            let merged = vocab.push_merge(best);
            for (symbols, _) in &mut words {
                merge_pair(symbols, best, merged);
            }
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(|t| t.as_slice())
    }

    pub fn token_id(&self, bytes: &[u8]) -> Option<u32> {
        self.token_to_id.get(bytes).copied()
    }

    fn encode_word(&self, word: &[u8]) -> Vec<u32> {
        let mut symbols: Vec<u32> = word.iter().map(|&b| byte_id(b)).collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|p| {
                    self.merge_rank
                        .get(&(p[0], p[1]))
                        .map(|&r| (r, (p[0], p[1])))
                })
                .min();
            let Some((rank, pair)) = best else { break };
            merge_pair(
                &mut symbols,
                pair,
                (N_CONTROL + ALPHABET_SIZE + rank) as u32,
            );
        }
        symbols
    }

    /// BPE ids of one sentence, without control tokens.
    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        pretokenize(text)
            .flat_map(|w| self.encode_word(&w))
            .collect()
    }

    /// `BOS item_1 SEP item_2 .. SEP item_m EOS`, unpadded.
    pub fn encode_items<'a>(&self, items: impl IntoIterator<Item = &'a str>) -> TokenSequence {
        let mut ids = vec![BOS];
        for (i, item) in items.into_iter().enumerate() {
            if i > 0 {
                ids.push(SEP);
            }
            ids.extend(self.encode_text(item));
        }
        ids.push(EOS);
        TokenSequence::unpadded(ids)
    }

    pub fn encode_hypothesis(&self, h: &Hypothesis) -> TokenSequence {
        self.encode_items(h.items.iter().map(|i| i.text.as_str()))
    }

    /// Decoder target: `BOS text EOS`.
    pub fn encode_target(&self, text: &str) -> TokenSequence {
        self.encode_items([text])
    }

    /// Items of an id sequence: control tokens dropped, split at SEP.
    pub fn decode_items(&self, ids: &[u32]) -> Vec<String> {
        let mut items = Vec::new();
        let mut cur: Vec<u8> = Vec::new();
        let mut started = false;
        for &id in ids {
            match id {
                SEP => {
                    items.push(String::from_utf8_lossy(&cur).into_owned());
                    cur.clear();
                }
                EOS => break,
                BOS | PAD | UNK => {}
                _ => {
                    if let Some(t) = self.tokens.get(id as usize) {
                        cur.extend_from_slice(t);
                    }
                }
            }
            started = true;
        }
        if started {
            items.push(String::from_utf8_lossy(&cur).into_owned());
        }
        items
    }

    /// Decodes generated ids to one string, stopping at EOS.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            if id == EOS {
                break;
            }
            if (id as usize) >= N_CONTROL {
                if let Some(t) = self.tokens.get(id as usize) {
                    bytes.extend_from_slice(t);
                }
            }
        }
        String::from_utf8_lossy(&bytes).trim().to_string()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{FORMAT_HEADER}");
        let _ = writeln!(out, "tokens {}", self.tokens.len());
        for (id, t) in self.tokens.iter().enumerate() {
            if id < N_CONTROL {
                let _ = writeln!(out, "{id}\t{}", CONTROL_NAMES[id]);
            } else {
                let _ = writeln!(out, "{id}\t{}", hex::encode(t));
            }
        }
        let _ = writeln!(out, "merges {}", self.merges.len());
        for (a, b) in &self.merges {
            let _ = writeln!(out, "{a}\t{b}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Vocab> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| {
                Error::parse("vocab", format!("unexpected end of file, expected {what}"))
            })
        };
        let (_, header) = next("header")?;
        if header != FORMAT_HEADER {
            return Err(Error::parse(
                "vocab line 1",
                format!("bad header {header:?}"),
            ));
        }
        let count = |line: (usize, &str), key: &str| -> Result<usize> {
            line.1
                .strip_prefix(key)
                .and_then(|n| n.trim().parse().ok())
                .ok_or_else(|| {
                    Error::parse(
                        format!("vocab line {}", line.0 + 1),
                        format!("expected `{key} N`"),
                    )
                })
        };
        let n_tokens = count(next("token count")?, "tokens")?;
        let mut vocab = Vocab::base();
        if n_tokens < vocab.tokens.len() {
            return Err(Error::parse(
                "vocab",
                "token table smaller than the base alphabet",
            ));
        }
        for expected in 0..n_tokens {
            let (lineno, line) = next("token")?;
            let loc = format!("vocab line {}", lineno + 1);
            let (id, body) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(loc.clone(), "expected `id<TAB>token`"))?;
            if id.parse::<usize>().ok() != Some(expected) {
                return Err(Error::parse(loc, "token ids must be dense and ordered"));
            }
            if expected < N_CONTROL {
                if body != CONTROL_NAMES[expected] {
                    return Err(Error::parse(
                        loc,
                        format!("expected control token {}", CONTROL_NAMES[expected]),
                    ));
                }
            } else if expected < vocab.tokens.len() {
                let bytes =
                    hex::decode(body).map_err(|e| Error::parse(loc.clone(), e.to_string()))?;
                if bytes != vocab.tokens[expected] {
                    return Err(Error::parse(loc, "byte alphabet mismatch"));
                }
            }
        }
        let n_merges = count(next("merge count")?, "merges")?;
        if n_tokens != N_CONTROL + ALPHABET_SIZE + n_merges {
            return Err(Error::parse(
                "vocab",
                "token count does not match merge count",
            ));
        }
        for _ in 0..n_merges {
            let (lineno, line) = next("merge")?;
            let loc = format!("vocab line {}", lineno + 1);
            let pair = line
                .split_once('\t')
                .and_then(|(a, b)| Some((a.parse::<u32>().ok()?, b.parse::<u32>().ok()?)))
                .ok_or_else(|| Error::parse(loc.clone(), "expected `left<TAB>right`"))?;
            let limit = vocab.tokens.len() as u32;
            if pair.0 < N_CONTROL as u32
                || pair.1 < N_CONTROL as u32
                || pair.0 >= limit
                || pair.1 >= limit
            {
                return Err(Error::parse(
                    loc,
                    "merge refers to an unknown or control token",
                ));
            }
            vocab.push_merge(pair);
        }
        Ok(vocab)
    }
}

fn merge_pair(symbols: &mut Vec<u32>, pair: (u32, u32), merged: u32) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(merged);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    *symbols = out;
}

/// Right-pads every sequence to `target_len` with PAD (mask false).
pub fn pad_batch(seqs: &[TokenSequence], target_len: usize) -> Result<Vec<TokenSequence>> {
    seqs.iter()
        .map(|s| {
            if s.len() > target_len {
                return Err(Error::Precondition(format!(
                    "sequence of length {} does not fit target length {target_len}",
                    s.len()
                )));
            }
            let mut out = s.clone();
            out.ids.resize(target_len, PAD);
            out.mask.resize(target_len, false);
            Ok(out)
        })
        .collect()
}
