//! The three subword pipelines: byte-level BPE, byte-level + digit WordPiece,
//! and whitespace WordPiece with indexed mask tokens.
//!
//! Every model reserves ids `0..5` for the special tokens in [`SPECIAL_TOKENS`].
//!
//! On disk a tokenizer is UTF-8 text:
//!
//! ```text
//! TOKFMT v1 <kind> <pre-tokenizer rules>
//! <id>\t<token>          one line per vocabulary entry, ids dense and ascending
//! #MERGES                BPE only
//! <left> <right>         one line per merge, in rank order
//! ```
//!
//! Tokens are escaped so that `\\`, tab, newline and carriage return survive.

mod bpe;
mod merge;
mod pretokenize;
mod wordpiece;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

pub use bpe::BpeModel;
pub use pretokenize::{
    byte_decode, byte_encode, pretokenize, pretokenize_with_offsets, PreTokenRule, PreTokenizerSpec,
    Segment,
};
pub use wordpiece::{mask_token, AugmentedVocab, WordPieceModel, CONTINUATION_PREFIX};

use crate::error::{Error, Result};
use crate::io::{read_utf8, write_atomic};

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

/// Dense id ↔ token table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut v = Vocab::default();
        for t in tokens {
            v.push(t)?;
        }
        Ok(v)
    }

    pub fn push(&mut self, token: String) -> Result<u32> {
        if self.ids.contains_key(&token) {
            return Err(Error::TokenCollision(token));
        }
        let id = self.tokens.len() as u32;
        self.ids.insert(token.clone(), id);
        self.tokens.push(token);
        Ok(id)
    }

    pub fn get_or_insert(&mut self, token: String) -> u32 {
        match self.ids.get(&token) {
            Some(&id) => id,
            None => self.push(token).expect("checked absent"),
        }
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn get(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub(crate) fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Named tokenizer configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizerPreset {
    /// Byte-level BPE.
    Roberta,
    /// Byte-level + digit-isolation pre-tokenization with WordPiece.
    Elc,
    /// Whitespace WordPiece (cased), augmented later with `[MASK-n]` for the student.
    Mlsm,
}

impl FromStr for TokenizerPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "roberta" | "mlm" | "bpe" => Ok(TokenizerPreset::Roberta),
            "elc" => Ok(TokenizerPreset::Elc),
            "mlsm" | "wordpiece" => Ok(TokenizerPreset::Mlsm),
            other => Err(Error::invalid(format!("unknown tokenizer preset `{other}`"))),
        }
    }
}

impl TokenizerPreset {
    pub fn name(self) -> &'static str {
        match self {
            TokenizerPreset::Roberta => "roberta",
            TokenizerPreset::Elc => "elc",
            TokenizerPreset::Mlsm => "mlsm",
        }
    }
}

/// Any trained tokenizer.
#[derive(Debug, Clone, PartialEq)]
pub enum Tokenizer {
    Bpe(BpeModel),
    WordPiece(WordPieceModel),
    Augmented(AugmentedVocab),
}

impl Tokenizer {
    pub fn train<S: AsRef<str>>(preset: TokenizerPreset, corpus: &[S], vocab_size: usize) -> Result<Self> {
        Ok(match preset {
            TokenizerPreset::Roberta => {
                Tokenizer::Bpe(BpeModel::train(corpus, vocab_size, PreTokenizerSpec::byte_level())?)
            }
            TokenizerPreset::Elc => Tokenizer::WordPiece(WordPieceModel::train(
                corpus,
                vocab_size,
                PreTokenizerSpec::byte_level_digits(),
            )?),
            TokenizerPreset::Mlsm => Tokenizer::WordPiece(WordPieceModel::train(
                corpus,
                vocab_size,
                PreTokenizerSpec::whitespace(),
            )?),
        })
    }

    fn vocab(&self) -> &Vocab {
        match self {
            Tokenizer::Bpe(m) => &m.vocab,
            Tokenizer::WordPiece(m) => &m.vocab,
            Tokenizer::Augmented(a) => &a.model().vocab,
        }
    }

    fn pretokenizer(&self) -> &PreTokenizerSpec {
        match self {
            Tokenizer::Bpe(m) => &m.pretokenizer,
            Tokenizer::WordPiece(m) => &m.pretokenizer,
            Tokenizer::Augmented(a) => &a.model().pretokenizer,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Tokenizer::Bpe(_) => "bpe",
            Tokenizer::WordPiece(_) | Tokenizer::Augmented(_) => "wordpiece",
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab().len()
    }

    pub fn token_to_id(&self, token: &str) -> Option<u32> {
        self.vocab().id(token)
    }

    pub fn id_to_token(&self, id: u32) -> Option<&str> {
        self.vocab().get(id)
    }

    pub fn augmented(&self) -> Option<&AugmentedVocab> {
        match self {
            Tokenizer::Augmented(a) => Some(a),
            _ => None,
        }
    }

    /// Special tokens and indexed mask tokens; never chosen for masking or random replacement.
    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < SPECIAL_TOKENS.len()
            || self.augmented().is_some_and(|a| a.mask_index(id).is_some())
    }

    /// Ids eligible as random replacements during masking.
    pub fn ordinary_ids(&self) -> std::ops::Range<u32> {
        let end = match self {
            Tokenizer::Augmented(a) => a.base_size(),
            _ => self.vocab_size(),
        };
        SPECIAL_TOKENS.len() as u32..end as u32
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        match self {
            Tokenizer::Bpe(m) => m.encode(text),
            Tokenizer::WordPiece(m) => m.encode(text),
            Tokenizer::Augmented(a) => a.model().encode(text),
        }
    }

    fn encode_segment(&self, seg: &str) -> Vec<u32> {
        match self {
            Tokenizer::Bpe(m) => m.encode_segment(seg),
            Tokenizer::WordPiece(m) => m.encode_word(seg),
            Tokenizer::Augmented(a) => a.model().encode_word(seg),
        }
    }

    /// Encodes `words` joined by single spaces and reports, for every id, the
    /// index of the word it came from.
    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> (Vec<u32>, Vec<usize>) {
        let mut text = String::new();
        let mut starts = Vec::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if i > 0 {
                text.push(' ');
            }
            starts.push(text.len());
            text.push_str(w.as_ref());
        }
        let mut ids = Vec::new();
        let mut owners = Vec::new();
        for seg in pretokenize_with_offsets(&text, self.pretokenizer()) {
            let anchor = text[seg.start..seg.end]
                .char_indices()
                .find(|(_, c)| !c.is_whitespace())
                .map(|(i, _)| seg.start + i)
                .unwrap_or(seg.start);
            let word = starts.partition_point(|&s| s <= anchor).saturating_sub(1);
            for id in self.encode_segment(&seg.text) {
                ids.push(id);
                owners.push(word);
            }
        }
        (ids, owners)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        match self {
            Tokenizer::Bpe(m) => m.decode(ids),
            Tokenizer::WordPiece(m) => m.decode(ids),
            Tokenizer::Augmented(a) => a.model().decode(ids),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("TOKFMT v1 {} {}\n", self.kind(), self.pretokenizer());
        for (id, tok) in self.vocab().tokens().iter().enumerate() {
            out.push_str(&format!("{id}\t{}\n", escape(tok)));
        }
        if let Tokenizer::Bpe(m) = self {
            out.push_str("#MERGES\n");
            for (l, r) in m.merges() {
                out.push_str(&format!("{} {}\n", escape(l), escape(r)));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let fail = |line: usize, msg: String| Error::Format {
            kind: "tokenizer",
            message: format!("line {line}: {msg}"),
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| fail(1, "missing header".into()))?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.len() != 4 || fields[0] != "TOKFMT" || fields[1] != "v1" {
            return Err(fail(1, format!("bad header `{header}`")));
        }
        let kind = fields[2];
        let pretokenizer: PreTokenizerSpec = fields[3].parse().map_err(|e: Error| fail(1, e.to_string()))?;

        let mut tokens = Vec::new();
        let mut merges = Vec::new();
        let mut in_merges = false;
        for (n, line) in lines {
            if line == "#MERGES" {
                in_merges = true;
                continue;
            }
            if in_merges {
                let (l, r) = line
                    .split_once(' ')
                    .ok_or_else(|| fail(n, "merge needs `left right`".into()))?;
                merges.push((unescape(l).map_err(|e| fail(n, e))?, unescape(r).map_err(|e| fail(n, e))?));
            } else {
                let (id, tok) = line
                    .split_once('\t')
                    .ok_or_else(|| fail(n, "vocab entry needs `id<TAB>token`".into()))?;
                let id: usize = id.parse().map_err(|_| fail(n, format!("bad id `{id}`")))?;
                if id != tokens.len() {
                    return Err(fail(n, format!("expected id {}, got {id}", tokens.len())));
                }
                tokens.push(unescape(tok).map_err(|e| fail(n, e))?);
            }
        }
        let vocab = Vocab::from_tokens(tokens)?;
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if vocab.id(s) != Some(i as u32) {
                return Err(fail(0, format!("special token {s} must have id {i}")));
            }
        }
        match kind {
            "bpe" => Ok(Tokenizer::Bpe(BpeModel::from_parts(pretokenizer, vocab, merges)?)),
            "wordpiece" => {
                if in_merges {
                    return Err(fail(0, "WordPiece files have no merges".into()));
                }
                let model = WordPieceModel { pretokenizer, vocab };
                Ok(match AugmentedVocab::detect(model) {
                    Ok(aug) => Tokenizer::Augmented(aug),
                    Err(model) => Tokenizer::WordPiece(model),
                })
            }
            other => Err(fail(1, format!("unknown tokenizer kind `{other}`"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Tokenizer::from_text(&read_utf8(path)?)
    }
}

impl fmt::Display for Tokenizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} tokenizer ({} tokens, {})", self.kind(), self.vocab_size(), self.pretokenizer())
    }
}

fn escape(tok: &str) -> String {
    let mut out = String::with_capacity(tok.len());
    for c in tok.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            ' ' => out.push_str("\\s"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('s') => out.push(' '),
            other => return Err(format!("bad escape `\\{}`", other.map(String::from).unwrap_or_default())),
        }
    }
    Ok(out)
}
