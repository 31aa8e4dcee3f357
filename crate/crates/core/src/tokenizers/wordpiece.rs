use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::tokenizers::merge::PairMerger;
use crate::tokenizers::pretokenize::{byte_decode, pretokenize, PreTokenizerSpec};
use crate::tokenizers::{Vocab, SPECIAL_TOKENS, UNK_ID};

pub const CONTINUATION_PREFIX: &str = "##";

/// Words longer than this many characters encode as the unknown token.
const MAX_WORD_CHARS: usize = 100;

/// Greedy longest-match subword model with `##` continuation pieces.
#[derive(Debug, Clone, PartialEq)]
pub struct WordPieceModel {
    pub(crate) pretokenizer: PreTokenizerSpec,
    pub(crate) vocab: Vocab,
}

fn piece(c: char, initial: bool) -> String {
    if initial {
        c.to_string()
    } else {
        format!("{CONTINUATION_PREFIX}{c}")
    }
}

impl WordPieceModel {
    /// Likelihood-style WordPiece training: start from every character seen
    /// (word-initial and `##`-continuation forms), then repeatedly merge the pair
    /// maximising `freq(pair) / (freq(left) · freq(right))`.
    pub fn train<S: AsRef<str>>(corpus: &[S], vocab_size: usize, pretokenizer: PreTokenizerSpec) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("empty corpus"));
        }
        let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
        for doc in corpus {
            for seg in pretokenize(doc.as_ref(), &pretokenizer) {
                *word_freq.entry(seg).or_insert(0) += 1;
            }
        }
        let alphabet: BTreeSet<String> = word_freq
            .keys()
            .flat_map(|w| w.chars().enumerate().map(|(i, c)| piece(c, i == 0)))
            .collect();
        let min = alphabet.len() + SPECIAL_TOKENS.len();
        if vocab_size < min {
            return Err(Error::invalid(format!(
                "WordPiece vocab_size must cover the {} training symbols plus specials ({min}), got {vocab_size}",
                alphabet.len()
            )));
        }
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(alphabet);
        let mut vocab = Vocab::from_tokens(tokens)?;

        let (words, freqs): (Vec<Vec<u32>>, Vec<u64>) = word_freq
            .into_iter()
            .map(|(w, f)| {
                let ids = w
                    .chars()
                    .enumerate()
                    .map(|(i, c)| vocab.id(&piece(c, i == 0)).unwrap())
                    .collect();
                (ids, f)
            })
            .unzip();
        let mut merger = PairMerger::new(words, freqs);

        while vocab.len() < vocab_size {
            let best = merger
                .pairs()
                .map(|(pair, count)| {
                    let denom = merger.token_count(pair.0) as f64 * merger.token_count(pair.1) as f64;
                    (pair, count as f64 / denom)
                })
                .max_by(|&(pa, sa), &(pb, sb)| {
                    sa.total_cmp(&sb).then_with(|| {
                        let ka = (vocab.token(pa.0), vocab.token(pa.1));
                        let kb = (vocab.token(pb.0), vocab.token(pb.1));
                        kb.cmp(&ka)
                    })
                });
            let Some((pair, _)) = best else { break };
            let left = vocab.token(pair.0);
            let right = vocab.token(pair.1);
            let merged = format!(
                "{left}{}",
                right.strip_prefix(CONTINUATION_PREFIX).unwrap_or(right)
            );
            let id = vocab.get_or_insert(merged);
            merger.merge(pair, id);
        }
        Ok(WordPieceModel { pretokenizer, vocab })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.vocab.id(token).is_some()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        pretokenize(text, &self.pretokenizer)
            .iter()
            .flat_map(|w| self.encode_word(w))
            .collect()
    }

    /// Greedy longest-match-first; a word with any unmatched position becomes `[UNK]`.
    pub(crate) fn encode_word(&self, word: &str) -> Vec<u32> {
        let bounds: Vec<usize> = word
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(word.len()))
            .collect();
        if bounds.len() - 1 > MAX_WORD_CHARS {
            return vec![UNK_ID];
        }
        let mut out = Vec::new();
        let mut start = 0;
        while start < bounds.len() - 1 {
            let mut found = None;
            for end in (start + 1..bounds.len()).rev() {
                let sub = &word[bounds[start]..bounds[end]];
                let candidate = if start == 0 {
                    self.vocab.id(sub)
                } else {
                    self.vocab.id(&format!("{CONTINUATION_PREFIX}{sub}"))
                };
                if let Some(id) = candidate {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    out.push(id);
                    start = end;
                }
                None => return vec![UNK_ID],
            }
        }
        out
    }

    /// Joins pieces back into text (lossy for `[UNK]`).
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut joined = String::new();
        for &id in ids {
            let tok = self.vocab.get(id).ok_or(Error::UnknownId(id))?;
            joined.push_str(tok.strip_prefix(CONTINUATION_PREFIX).unwrap_or(tok));
        }
        if self.pretokenizer.is_byte_level() {
            let bytes = byte_decode(&joined)?;
            return Ok(String::from_utf8_lossy(&bytes).into_owned());
        }
        Ok(joined)
    }
}

/// A WordPiece vocabulary extended with `k` indexed mask tokens `[MASK-0]..[MASK-(k-1)]`
/// occupying the ids directly after the base vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedVocab {
    model: WordPieceModel,
    base_size: usize,
    k: usize,
}

pub fn mask_token(n: usize) -> String {
    format!("[MASK-{n}]")
}

fn is_mask_token(tok: &str) -> bool {
    tok.strip_prefix("[MASK-")
        .and_then(|r| r.strip_suffix(']'))
        .is_some_and(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()))
}

impl AugmentedVocab {
    /// Appends `[MASK-n]` for `n` in `0..k`; fails if any indexed mask token already exists.
    pub fn augment(model: &WordPieceModel, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if let Some(existing) = model.vocab.tokens().iter().find(|t| is_mask_token(t)) {
            return Err(Error::TokenCollision(existing.clone()));
        }
        let base_size = model.vocab.len();
        let mut model = model.clone();
        for n in 0..k {
            model.vocab.push(mask_token(n))?;
        }
        Ok(AugmentedVocab { model, base_size, k })
    }

    /// Recognises a trailing `[MASK-0]..[MASK-(k-1)]` run in a loaded vocabulary.
    pub(crate) fn detect(model: WordPieceModel) -> std::result::Result<Self, WordPieceModel> {
        let tokens = model.vocab.tokens();
        let Some(first) = tokens.iter().position(|t| t == "[MASK-0]") else {
            return Err(model);
        };
        let k = tokens.len() - first;
        if (0..k).all(|n| tokens[first + n] == mask_token(n)) {
            Ok(AugmentedVocab {
                base_size: first,
                k,
                model,
            })
        } else {
            Err(model)
        }
    }

    pub fn model(&self) -> &WordPieceModel {
        &self.model
    }

    pub fn base_size(&self) -> usize {
        self.base_size
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn mask_id(&self, n: usize) -> Result<u32> {
        if n >= self.k {
            return Err(Error::invalid(format!("mask index {n} >= k = {}", self.k)));
        }
        Ok((self.base_size + n) as u32)
    }

    /// Category index of an indexed mask id.
    pub fn mask_index(&self, id: u32) -> Option<usize> {
        let id = id as usize;
        (id >= self.base_size && id < self.base_size + self.k).then(|| id - self.base_size)
    }
}
