use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::corpus::SyntheticScene;
use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const UNK: u32 = 3;
const SPECIALS: [&str; 4] = ["<bos>", "<eos>", "<pad>", "<unk>"];

/// Word-level vocabulary with dense ids; specials occupy ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Tokenizer {
    /// Builds from a word list in id order (after the specials).
    pub fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(words).collect();
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self { words, ids }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.ids.get(w).copied().unwrap_or(UNK)).collect()
    }

    /// Tokens followed by EOS, the form used as a training target.
    pub fn encode_target(&self, text: &str) -> Vec<u32> {
        let mut t = self.encode(text);
        t.push(EOS);
        t
    }

    /// Stops at the first EOS; BOS and PAD are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = Vec::new();
        for &id in ids {
            match id {
                EOS => break,
                BOS | PAD => {}
                _ => out.push(self.word(id).unwrap_or(SPECIALS[UNK as usize])),
            }
        }
        out.join(" ")
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, u32> = self.words.iter().enumerate().map(|(i, w)| (w.as_str(), i as u32)).collect();
        serde_json::to_string_pretty(&map).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let map: BTreeMap<String, u32> = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let mut words = vec![String::new(); map.len()];
        for (w, id) in map {
            let slot = words.get_mut(id as usize).ok_or_else(|| format!("id {id} is not dense"))?;
            *slot = w;
        }
        if words.iter().take(SPECIALS.len()).map(String::as_str).ne(SPECIALS) {
            return Err("special tokens are not at their reserved ids".into());
        }
        if words.iter().any(String::is_empty) {
            return Err("duplicate ids in vocabulary".into());
        }
        Ok(Self::from_words(words.into_iter().skip(SPECIALS.len())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|reason| Error::Integrity { path: path.to_path_buf(), reason })
    }
}

/// Vocabulary over every caption variant in the corpus, most frequent first, ties lexicographic.
pub fn build_tokenizer(corpus: &[SyntheticScene]) -> Result<Tokenizer> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for scene in corpus {
        for o in &scene.objects {
            for v in o.captions.iter().flat_map(|c| &c.variants) {
                for w in v.object_caption.split_whitespace().chain(v.part_caption.split_whitespace()) {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyInput("corpus has no captions to build a vocabulary from".into()));
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|(w, _)| !SPECIALS.contains(w)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Ok(Tokenizer::from_words(ranked.into_iter().map(|(w, _)| w.to_string())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};

    fn corpus() -> Vec<SyntheticScene> {
        generate_corpus(&CorpusSpec { num_scenes: 3, ..Default::default() }).unwrap()
    }

    #[test]
    fn round_trip_and_unknown_words() {
        let tok = build_tokenizer(&corpus()).unwrap();
        for s in ["a red fabric seat", "a chair with two parts"] {
            if s.split_whitespace().all(|w| tok.ids.contains_key(w)) {
                assert_eq!(tok.decode(&tok.encode(s)), s);
            }
        }
        assert_eq!(tok.encode("zyzzyva"), vec![UNK]);
        assert_eq!(tok.word(EOS), Some("<eos>"));
    }

    #[test]
    fn every_corpus_caption_round_trips() {
        let c = corpus();
        let tok = build_tokenizer(&c).unwrap();
        for o in c.iter().flat_map(|s| &s.objects) {
            for v in &o.captions.as_ref().unwrap().variants {
                assert_eq!(tok.decode(&tok.encode_target(&v.part_caption)), v.part_caption);
                assert!(!tok.encode(&v.object_caption).contains(&UNK));
            }
        }
    }

    #[test]
    fn vocabulary_is_deterministic_and_frequency_ordered() {
        let a = build_tokenizer(&corpus()).unwrap();
        let b = build_tokenizer(&corpus()).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        // "a" opens every caption variant, so it is the most frequent word
        assert_eq!(a.word(4), Some("a"));
        let back = Tokenizer::from_json(&a.to_json()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(build_tokenizer(&[]), Err(Error::EmptyInput(_))));
    }
}
