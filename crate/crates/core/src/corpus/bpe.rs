// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level byte-pair encoding.
//!
//! Text is split with the GPT-2 pre-tokenization pattern, each piece's UTF-8
//! bytes are mapped to printable code points (`Ġ` for space, `Ċ` for newline,
//! `ĉ` for tab, ...), and adjacent symbols are merged greedily by merge rank
//! until no ranked pair remains.
//!
//! The vocabulary bundle is JSON:
//!
//! ```json
//! {"vocab": {"!": 0, "\"": 1, ...}, "merges": ["Ġ t", "Ġt he", ...], "bos_token": "<|endoftext|>"}
//! ```
//!
//! `merges` entries may also be two-element arrays. `bos_token` is optional.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use fancy_regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PRETOKENIZE: &str = r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

fn pretokenizer() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(PRETOKENIZE).expect("valid pattern"))
}

/// The reversible byte → code point table used by byte-level BPE.
pub fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let printable = |b: u32| {
        (u32::from(b'!')..=u32::from(b'~')).contains(&b) || (0xA1..=0xAC).contains(&b) || (0xAE..=0xFF).contains(&b)
    };
    let mut next = 0u32;
    for b in 0..256u32 {
        table[b as usize] = if printable(b) {
            char::from_u32(b).expect("latin-1")
        } else {
            let c = char::from_u32(256 + next).expect("valid code point");
            next += 1;
            c
        };
    }
    table
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(untagged)]
enum MergeEntry {
    Joined(String),
    Pair([String; 2]),
}

#[derive(Debug, Deserialize, Serialize)]
struct Bundle {
    vocab: HashMap<String, u32>,
    merges: Vec<MergeEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bos_token: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: HashMap<u32, String>,
    ranks: HashMap<(String, String), usize>,
    merges: Vec<(String, String)>,
    byte_encoder: [char; 256],
    byte_decoder: HashMap<char, u8>,
    bos_token: Option<String>,
}

impl Vocabulary {
    pub fn new(token_to_id: HashMap<String, u32>, merges: Vec<(String, String)>, bos_token: Option<String>) -> Result<Self> {
        let byte_encoder = bytes_to_unicode();
        let byte_decoder = byte_encoder.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        let mut id_to_token = HashMap::with_capacity(token_to_id.len());
        for (tok, &id) in &token_to_id {
            if let Some(prev) = id_to_token.insert(id, tok.clone()) {
                return Err(Error::format(
                    "vocabulary",
                    format!("id {id} assigned to both `{prev}` and `{tok}`"),
                ));
            }
        }
        if let Some(bos) = &bos_token {
            if !token_to_id.contains_key(bos) {
                return Err(Error::format("vocabulary", format!("bos token `{bos}` has no id")));
            }
        }
        let ranks = merges.iter().cloned().enumerate().map(|(i, m)| (m, i)).collect();
        Ok(Self {
            token_to_id,
            id_to_token,
            ranks,
            merges,
            byte_encoder,
            byte_decoder,
            bos_token,
        })
    }

    /// Base vocabulary of the 256 byte symbols (ids `0..256` in byte order)
    /// followed by one token per merge, in merge order.
    pub fn byte_level(merges: Vec<(String, String)>) -> Result<Self> {
        let table = bytes_to_unicode();
        let mut vocab: HashMap<String, u32> = table.iter().enumerate().map(|(i, c)| (c.to_string(), i as u32)).collect();
        for (a, b) in &merges {
            let joined = format!("{a}{b}");
            let next = vocab.len() as u32;
            vocab.entry(joined).or_insert(next);
        }
        Self::new(vocab, merges, None)
    }

    /// Learns `n_merges` merges from `texts` (most frequent adjacent pair
    /// first, ties broken lexicographically) on top of the byte vocabulary.
    pub fn train<S: AsRef<str>>(texts: &[S], n_merges: usize) -> Result<Self> {
        let table = bytes_to_unicode();
        let mut words: HashMap<Vec<String>, usize> = HashMap::new();
        for text in texts {
            for piece in pretokenizer().find_iter(text.as_ref()) {
                let piece = piece.map_err(|e| Error::format("pre-tokenizer", e.to_string()))?;
                let syms = piece.as_str().bytes().map(|b| table[b as usize].to_string()).collect();
                *words.entry(syms).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<String>, usize)> = words.into_iter().collect();
        words.sort();
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
            for (syms, freq) in &words {
                for w in syms.windows(2) {
                    *counts.entry((&w[0], &w[1])).or_default() += freq;
                }
            }
            let Some(((a, b), _)) = counts
                .into_iter()
                .max_by(|x, y| x.1.cmp(&y.1).then_with(|| y.0.cmp(&x.0)))
            else {
                break;
            };
            let pair = (a.to_string(), b.to_string());
            for (syms, _) in &mut words {
                *syms = merge_pair(syms, &pair.0, &pair.1);
            }
            merges.push(pair);
        }
        Self::byte_level(merges)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let bundle: Bundle = serde_json::from_str(s).map_err(|e| Error::format("vocabulary", e.to_string()))?;
        let merges = bundle
            .merges
            .into_iter()
            .map(|m| match m {
                MergeEntry::Pair([a, b]) => Ok((a, b)),
                MergeEntry::Joined(s) => s
                    .split_once(' ')
                    .map(|(a, b)| (a.to_string(), b.to_string()))
                    .ok_or_else(|| Error::format("vocabulary", format!("merge `{s}` is not a pair"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(bundle.vocab, merges, bundle.bos_token)
    }

    pub fn to_json(&self) -> String {
        let bundle = Bundle {
            vocab: self.token_to_id.clone(),
            merges: self
                .merges
                .iter()
                .map(|(a, b)| MergeEntry::Joined(format!("{a} {b}")))
                .collect(),
            bos_token: self.bos_token.clone(),
        };
        serde_json::to_string(&bundle).expect("bundle serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.token_to_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_to_id.is_empty()
    }

    pub fn bos_id(&self) -> Option<u32> {
        self.bos_token.as_ref().map(|t| self.token_to_id[t])
    }

    pub fn with_bos(mut self, token: &str) -> Result<Self> {
        if !self.token_to_id.contains_key(token) {
            let id = self.token_to_id.values().max().map_or(0, |m| m + 1);
            self.token_to_id.insert(token.to_string(), id);
            self.id_to_token.insert(id, token.to_string());
        }
        self.bos_token = Some(token.to_string());
        Ok(self)
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    /// Id of the token whose decoded text is exactly `text`.
    pub fn id_for_text(&self, text: &str) -> Option<u32> {
        let sym: String = text.bytes().map(|b| self.byte_encoder[b as usize]).collect();
        self.token_id(&sym)
    }

    /// Decoded text of a single token.
    pub fn token_text(&self, id: u32) -> Option<String> {
        self.id_to_token.get(&id).map(|t| self.symbols_to_text(t))
    }

    fn symbols_to_text(&self, symbols: &str) -> String {
        let bytes: Vec<u8> = symbols
            .chars()
            .flat_map(|c| match self.byte_decoder.get(&c) {
                Some(&b) => vec![b],
                None => c.to_string().into_bytes(),
            })
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    fn bpe(&self, piece: &str) -> Vec<String> {
        let mut syms: Vec<String> = piece.bytes().map(|b| self.byte_encoder[b as usize].to_string()).collect();
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, w)))
                .min_by_key(|(r, _)| *r);
            let Some((_, w)) = best else { break };
            let (a, b) = (w[0].clone(), w[1].clone());
            syms = merge_pair(&syms, &a, &b);
        }
        syms
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = Vec::new();
        for piece in pretokenizer().find_iter(text) {
            let piece = piece.map_err(|e| Error::format("pre-tokenizer", e.to_string()))?;
            for sym in self.bpe(piece.as_str()) {
                let id = self
                    .token_to_id
                    .get(&sym)
                    .ok_or_else(|| Error::format("vocabulary", format!("no id for symbol `{sym}`")))?;
                ids.push(*id);
            }
        }
        Ok(ids)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut symbols = String::new();
        for id in ids {
            let tok = self
                .id_to_token
                .get(id)
                .ok_or_else(|| Error::Tokens(format!("token id {id} not in vocabulary")))?;
            symbols.push_str(tok);
        }
        Ok(self.symbols_to_text(&symbols))
    }
}

fn merge_pair(syms: &[String], a: &str, b: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
            out.push(format!("{a}{b}"));
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair(a: &str, b: &str) -> (String, String) {
        (a.to_string(), b.to_string())
    }

    #[test]
    fn byte_table_is_a_bijection() {
        let t = bytes_to_unicode();
        let set: std::collections::HashSet<char> = t.iter().copied().collect();
        assert_eq!(set.len(), 256);
        assert_eq!(t[b' ' as usize], 'Ġ');
        assert_eq!(t[b'\n' as usize], 'Ċ');
        assert_eq!(t[b'\t' as usize], 'ĉ');
        assert_eq!(t[b'A' as usize], 'A');
    }

    #[test]
    fn empty_text_is_empty_sequence() {
        let v = Vocabulary::byte_level(vec![]).unwrap();
        assert!(v.encode("").unwrap().is_empty());
    }

    #[test]
    fn greedy_merges_by_rank() {
        let v = Vocabulary::byte_level(vec![pair("Ġ", "t"), pair("h", "e"), pair("Ġt", "he")]).unwrap();
        let ids = v.encode(" the").unwrap();
        assert_eq!(ids.len(), 1);
        assert_eq!(v.token_text(ids[0]).unwrap(), " the");
        let ids = v.encode("the").unwrap();
        assert_eq!(ids.len(), 2);
    }

    #[test]
    fn code_prompt_keeps_newline_and_tab() {
        let v = Vocabulary::byte_level(vec![]).unwrap();
        let ids = v.encode("class MyClass:\n\tdef").unwrap();
        let nl = v.id_for_text("\n").unwrap();
        let tab = v.id_for_text("\t").unwrap();
        assert!(ids.contains(&nl) && ids.contains(&tab));
    }

    #[test]
    fn pretokenizer_splits_like_gpt2() {
        let pieces: Vec<&str> = pretokenizer()
            .find_iter("It's  on the\n\tdef 42")
            .map(|m| m.unwrap().as_str())
            .collect();
        assert_eq!(pieces, ["It", "'s", " ", " on", " the", "\n", "\t", "def", " 42"]);
    }

    #[test]
    fn random_ascii_round_trips() {
        let texts = ["the cat sat on the mat", "def f(x):\n\treturn x"];
        let v = Vocabulary::train(&texts, 40).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let len = rng.gen_range(0..60);
            let s: String = (0..len).map(|_| rng.gen_range(9u8..127) as char).collect();
            assert_eq!(v.decode(&v.encode(&s).unwrap()).unwrap(), s);
        }
        let unicode = "naïve café ✓ ok";
        assert_eq!(v.decode(&v.encode(unicode).unwrap()).unwrap(), unicode);
    }

    #[test]
    fn training_learns_frequent_pairs() {
        let v = Vocabulary::train(&["the the the the then"], 3).unwrap();
        assert_eq!(v.encode(" the").unwrap().len(), 1);
    }

    #[test]
    fn bundle_round_trip_and_errors() {
        let v = Vocabulary::train(&["hello world hello"], 5).unwrap().with_bos("<|endoftext|>").unwrap();
        let back = Vocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(back.encode("hello world").unwrap(), v.encode("hello world").unwrap());
        assert_eq!(back.bos_id(), v.bos_id());
        let pairs = r#"{"vocab": {"a": 0, "b": 1, "ab": 2}, "merges": [["a", "b"]]}"#;
        let p = Vocabulary::from_json(pairs).unwrap();
        assert_eq!(p.encode("ab").unwrap(), vec![2]);
        assert!(Vocabulary::from_json(r#"{"vocab": {"a": 0, "b": 0}, "merges": []}"#).is_err());
        assert!(Vocabulary::from_json(r#"{"vocab": {}, "merges": ["ab"]}"#).is_err());
        assert!(v.decode(&[999_999]).is_err());
        // A symbol missing from the vocabulary is an error, not a silent drop.
        assert!(p.encode("c").is_err());
    }
}
