use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tokenizers::merge::{apply_ranked_merges, Pair, PairMerger};
use crate::tokenizers::pretokenize::{byte_char, byte_decode, pretokenize, PreTokenizerSpec};
use crate::tokenizers::{Vocab, SPECIAL_TOKENS};

/// Byte-level byte-pair-encoding model.
///
/// Ids `0..5` are the special tokens, the next 256 ids are the byte symbols and
/// every later id is the result of a merge.
#[derive(Debug, Clone, PartialEq)]
pub struct BpeModel {
    pub(crate) pretokenizer: PreTokenizerSpec,
    pub(crate) vocab: Vocab,
    pub(crate) merges: Vec<(String, String)>,
    ranks: HashMap<Pair, (usize, u32)>,
}

fn base_vocab() -> Vocab {
    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend((0..=255u8).map(|b| byte_char(b).to_string()));
    Vocab::from_tokens(tokens).expect("special and byte tokens are distinct")
}

impl BpeModel {
    /// Greedy BPE: repeatedly merge the most frequent adjacent pair (ties go to
    /// the lexicographically smaller pair) until `vocab_size` tokens exist or
    /// no pair is left.
    pub fn train<S: AsRef<str>>(corpus: &[S], vocab_size: usize, pretokenizer: PreTokenizerSpec) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("empty corpus"));
        }
        let min = SPECIAL_TOKENS.len() + 256;
        if vocab_size < min {
            return Err(Error::invalid(format!(
                "BPE vocab_size must be at least {min} (bytes + special tokens), got {vocab_size}"
            )));
        }
        let pretokenizer = force_byte_level(pretokenizer);
        let mut vocab = base_vocab();

        let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
        for doc in corpus {
            for seg in pretokenize(doc.as_ref(), &pretokenizer) {
                *word_freq.entry(seg).or_insert(0) += 1;
            }
        }
        let (words, freqs): (Vec<Vec<u32>>, Vec<u64>) = word_freq
            .into_iter()
            .map(|(w, f)| {
                let ids = w.chars().map(|c| vocab.id(&c.to_string()).unwrap()).collect();
                (ids, f)
            })
            .unzip();
        let mut merger = PairMerger::new(words, freqs);
        let mut merges = Vec::new();

        while vocab.len() < vocab_size {
            let best = merger.pairs().max_by(|&(pa, ca), &(pb, cb)| {
                ca.cmp(&cb).then_with(|| {
                    // smaller pair wins, so it must compare as "greater"
                    let ka = (vocab.token(pa.0), vocab.token(pa.1));
                    let kb = (vocab.token(pb.0), vocab.token(pb.1));
                    kb.cmp(&ka)
                })
            });
            let Some((pair, _)) = best else { break };
            let left = vocab.token(pair.0).to_string();
            let right = vocab.token(pair.1).to_string();
            let merged = vocab.get_or_insert(format!("{left}{right}"));
            merger.merge(pair, merged);
            merges.push((left, right));
        }
        BpeModel::from_parts(pretokenizer, vocab, merges)
    }

    pub(crate) fn from_parts(
        pretokenizer: PreTokenizerSpec,
        vocab: Vocab,
        merges: Vec<(String, String)>,
    ) -> Result<Self> {
        let base = base_vocab();
        for (id, tok) in base.tokens().iter().enumerate() {
            if vocab.id(tok) != Some(id as u32) {
                return Err(Error::Format {
                    kind: "tokenizer",
                    message: format!("BPE vocab must start with specials and bytes; `{tok}` misplaced"),
                });
            }
        }
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.iter().enumerate() {
            let lookup = |t: &str| {
                vocab.id(t).ok_or_else(|| Error::Format {
                    kind: "tokenizer",
                    message: format!("merge part `{t}` is not in the vocabulary"),
                })
            };
            let pair = (lookup(l)?, lookup(r)?);
            let merged = lookup(&format!("{l}{r}"))?;
            ranks.entry(pair).or_insert((rank, merged));
        }
        Ok(BpeModel {
            pretokenizer: force_byte_level(pretokenizer),
            vocab,
            merges,
            ranks,
        })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        pretokenize(text, &self.pretokenizer)
            .iter()
            .flat_map(|seg| self.encode_segment(seg))
            .collect()
    }

    pub(crate) fn encode_segment(&self, seg: &str) -> Vec<u32> {
        let symbols: Vec<u32> = seg
            .chars()
            .map(|c| self.vocab.id(&c.to_string()).expect("byte symbols are always present"))
            .collect();
        apply_ranked_merges(symbols, &self.ranks)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut joined = String::new();
        for &id in ids {
            joined.push_str(self.vocab.get(id).ok_or(Error::UnknownId(id))?);
        }
        let bytes = byte_decode(&joined)?;
        String::from_utf8(bytes).map_err(|e| Error::invalid(format!("decoded bytes are not UTF-8: {e}")))
    }
}

fn force_byte_level(mut spec: PreTokenizerSpec) -> PreTokenizerSpec {
    if !spec.is_byte_level() {
        spec.rules.push(crate::tokenizers::PreTokenRule::ByteLevel);
    }
    spec
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let m = BpeModel::train(&["abab", "abab"], 262, PreTokenizerSpec::byte_level()).unwrap();
        assert_eq!(m.merges()[0], ("a".to_string(), "b".to_string()));
    }

    #[test]
    fn ties_break_toward_smaller_pair() {
        // (c,d) and (a,b) both occur once; (a,b) sorts first
        let m = BpeModel::train(&["cd ab"], 262, PreTokenizerSpec::byte_level()).unwrap();
        assert_eq!(m.merges()[0], ("a".to_string(), "b".to_string()));
    }

    #[test]
    fn minimum_budget_means_no_merges() {
        let m = BpeModel::train(&["hello hello"], 261, PreTokenizerSpec::byte_level()).unwrap();
        assert!(m.merges().is_empty());
        assert_eq!(m.vocab_size(), 261);
        assert!(BpeModel::train(&["x"], 260, PreTokenizerSpec::byte_level()).is_err());
    }

    #[test]
    fn empty_corpus_rejected() {
        let empty: [&str; 0] = [];
        assert!(BpeModel::train(&empty, 300, PreTokenizerSpec::byte_level()).is_err());
    }

    #[test]
    fn round_trips_training_text_and_more() {
        let corpus = ["Molo, unjani?", "Ndiyaphila enkosi 2024", "xhosa xhosa xhosa"];
        let m = BpeModel::train(&corpus, 300, PreTokenizerSpec::byte_level()).unwrap();
        for s in corpus.iter().chain(&["xhosa", "", "☃ snow 雪"]) {
            assert_eq!(m.decode(&m.encode(s)).unwrap(), *s);
        }
        assert!(m.encode("").is_empty());
        assert!(m.encode("xhosa").len() < 5);
    }

    #[test]
    fn deterministic_training() {
        let corpus = ["the cat sat on the mat", "the dog sat on the log"];
        let a = BpeModel::train(&corpus, 290, PreTokenizerSpec::byte_level()).unwrap();
        let b = BpeModel::train(&corpus, 290, PreTokenizerSpec::byte_level()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_id_in_decode() {
        let m = BpeModel::train(&["ab"], 262, PreTokenizerSpec::byte_level()).unwrap();
        assert!(matches!(m.decode(&[9999]), Err(Error::UnknownId(9999))));
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(s in "\\PC{0,64}") {
            let corpus = ["abc abd abe", "ümlaut ñ 123 456"];
            let m = BpeModel::train(&corpus, 280, PreTokenizerSpec::byte_level()).unwrap();
            prop_assert_eq!(m.decode(&m.encode(&s)).unwrap(), s);
        }
    }
}
