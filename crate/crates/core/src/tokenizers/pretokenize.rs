use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use crate::error::{Error, Result};

/// One pre-tokenization rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PreTokenRule {
    /// Split before every whitespace run that follows a non-whitespace character.
    /// Whitespace stays attached to the following word, so nothing is dropped.
    WhitespaceSplit,
    /// Remap every byte to a printable character (GPT-2 byte table).
    ByteLevel,
    /// Every numeric character becomes its own segment.
    Digits,
}

impl PreTokenRule {
    pub fn name(self) -> &'static str {
        match self {
            PreTokenRule::WhitespaceSplit => "whitespace-split",
            PreTokenRule::ByteLevel => "byte-level-remap",
            PreTokenRule::Digits => "digit-isolation",
        }
    }
}

impl FromStr for PreTokenRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whitespace-split" => Ok(PreTokenRule::WhitespaceSplit),
            "byte-level-remap" => Ok(PreTokenRule::ByteLevel),
            "digit-isolation" => Ok(PreTokenRule::Digits),
            other => Err(Error::invalid(format!("unknown pre-tokenizer rule `{other}`"))),
        }
    }
}

/// Ordered list of rules. Split rules act on the raw text in order; the byte
/// remap, when present, is applied to the finished segments.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PreTokenizerSpec {
    pub rules: Vec<PreTokenRule>,
}

impl PreTokenizerSpec {
    pub fn new(rules: Vec<PreTokenRule>) -> Self {
        PreTokenizerSpec { rules }
    }

    /// Whitespace split plus byte remap (the RoBERTa-style pipeline).
    pub fn byte_level() -> Self {
        Self::new(vec![PreTokenRule::WhitespaceSplit, PreTokenRule::ByteLevel])
    }

    /// Whitespace split, single digits, byte remap.
    pub fn byte_level_digits() -> Self {
        Self::new(vec![
            PreTokenRule::WhitespaceSplit,
            PreTokenRule::Digits,
            PreTokenRule::ByteLevel,
        ])
    }

    pub fn whitespace() -> Self {
        Self::new(vec![PreTokenRule::WhitespaceSplit])
    }

    pub fn has(&self, rule: PreTokenRule) -> bool {
        self.rules.contains(&rule)
    }

    pub fn is_byte_level(&self) -> bool {
        self.has(PreTokenRule::ByteLevel)
    }
}

impl fmt::Display for PreTokenizerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.rules.iter().map(|r| r.name()).collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

impl FromStr for PreTokenizerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "none" || s.is_empty() {
            return Ok(PreTokenizerSpec::default());
        }
        s.split(',')
            .map(str::parse)
            .collect::<Result<Vec<_>>>()
            .map(PreTokenizerSpec::new)
    }
}

/// A pre-token and the byte range of the original text it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

pub fn pretokenize(text: &str, spec: &PreTokenizerSpec) -> Vec<String> {
    pretokenize_with_offsets(text, spec)
        .into_iter()
        .map(|s| s.text)
        .collect()
}

pub fn pretokenize_with_offsets(text: &str, spec: &PreTokenizerSpec) -> Vec<Segment> {
    if text.is_empty() {
        return Vec::new();
    }
    let mut ranges = vec![(0usize, text.len())];
    for rule in &spec.rules {
        let split: fn(&str) -> Vec<usize> = match rule {
            PreTokenRule::WhitespaceSplit => whitespace_boundaries,
            PreTokenRule::Digits => digit_boundaries,
            PreTokenRule::ByteLevel => continue,
        };
        ranges = ranges
            .into_iter()
            .flat_map(|(s, e)| {
                let mut cuts = split(&text[s..e]);
                cuts.retain(|&c| c > 0 && c < e - s);
                let mut out = Vec::with_capacity(cuts.len() + 1);
                let mut prev = s;
                for c in cuts {
                    out.push((prev, s + c));
                    prev = s + c;
                }
                out.push((prev, e));
                out
            })
            .collect();
    }
    let remap = spec.is_byte_level();
    ranges
        .into_iter()
        .map(|(start, end)| {
            let piece = &text[start..end];
            Segment {
                text: if remap {
                    byte_encode(piece.as_bytes())
                } else {
                    piece.to_string()
                },
                start,
                end,
            }
        })
        .collect()
}

fn whitespace_boundaries(s: &str) -> Vec<usize> {
    let mut cuts = Vec::new();
    let mut prev_ws = None;
    for (i, c) in s.char_indices() {
        let ws = c.is_whitespace();
        if ws && prev_ws == Some(false) {
            cuts.push(i);
        }
        prev_ws = Some(ws);
    }
    cuts
}

fn digit_boundaries(s: &str) -> Vec<usize> {
    let mut cuts = Vec::new();
    for (i, c) in s.char_indices() {
        if c.is_numeric() {
            cuts.push(i);
            cuts.push(i + c.len_utf8());
        }
    }
    cuts.dedup();
    cuts
}

struct ByteTable {
    to_char: [char; 256],
    to_byte: std::collections::HashMap<char, u8>,
}

fn byte_table() -> &'static ByteTable {
    static TABLE: OnceLock<ByteTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let printable = |b: u32| {
            (u32::from('!')..=u32::from('~')).contains(&b)
                || (0xA1..=0xAC).contains(&b)
                || (0xAE..=0xFF).contains(&b)
        };
        let mut to_char = ['\0'; 256];
        let mut next = 256u32;
        for b in 0..256u32 {
            to_char[b as usize] = if printable(b) {
                char::from_u32(b).unwrap()
            } else {
                let c = char::from_u32(next).unwrap();
                next += 1;
                c
            };
        }
        let to_byte = to_char
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect();
        ByteTable { to_char, to_byte }
    })
}

/// The printable character standing in for byte `b`.
pub fn byte_char(b: u8) -> char {
    byte_table().to_char[b as usize]
}

pub fn byte_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|&b| byte_char(b)).collect()
}

/// Inverse of [`byte_encode`]; fails on characters outside the byte table.
pub fn byte_decode(s: &str) -> Result<Vec<u8>> {
    let table = byte_table();
    s.chars()
        .map(|c| {
            table
                .to_byte
                .get(&c)
                .copied()
                .ok_or_else(|| Error::invalid(format!("character {c:?} is not a byte symbol")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reassemble(segments: &[String], spec: &PreTokenizerSpec) -> String {
        let joined: String = segments.concat();
        if spec.is_byte_level() {
            String::from_utf8(byte_decode(&joined).unwrap()).unwrap()
        } else {
            joined
        }
    }

    #[test]
    fn digits_are_isolated() {
        let spec = PreTokenizerSpec::new(vec![PreTokenRule::Digits]);
        assert_eq!(pretokenize("abc123", &spec), vec!["abc", "1", "2", "3"]);
    }

    #[test]
    fn empty_text_has_no_segments() {
        for spec in [
            PreTokenizerSpec::byte_level(),
            PreTokenizerSpec::byte_level_digits(),
            PreTokenizerSpec::whitespace(),
        ] {
            assert!(pretokenize("", &spec).is_empty());
        }
    }

    #[test]
    fn whitespace_attaches_to_following_word() {
        let spec = PreTokenizerSpec::whitespace();
        assert_eq!(pretokenize("hello world", &spec), vec!["hello", " world"]);
        assert_eq!(pretokenize("a  b ", &spec), vec!["a", "  b", " "]);
        assert_eq!(pretokenize("  x", &spec), vec!["  x"]);
    }

    #[test]
    fn byte_level_round_trip_on_non_ascii() {
        let spec = PreTokenizerSpec::byte_level_digits();
        let segs = pretokenize("år 2024", &spec);
        assert_eq!(segs.len(), 6); // "år", " ", "2", "0", "2", "4"
        assert_eq!(reassemble(&segs, &spec), "år 2024");
        assert!(segs.iter().all(|s| !s.contains(' ')));
    }

    #[test]
    fn byte_table_is_a_bijection() {
        let all: Vec<u8> = (0..=255).collect();
        assert_eq!(byte_decode(&byte_encode(&all)).unwrap(), all);
        let distinct: std::collections::HashSet<char> = all.iter().map(|&b| byte_char(b)).collect();
        assert_eq!(distinct.len(), 256);
        assert!(distinct.iter().all(|c| !c.is_whitespace()));
    }

    #[test]
    fn spec_parses_and_prints() {
        let spec: PreTokenizerSpec = "whitespace-split,digit-isolation,byte-level-remap".parse().unwrap();
        assert_eq!(spec, PreTokenizerSpec::byte_level_digits());
        assert_eq!(spec.to_string().parse::<PreTokenizerSpec>().unwrap(), spec);
        assert!("shout".parse::<PreTokenizerSpec>().is_err());
    }

    proptest! {
        #[test]
        fn segmentation_is_loss_free(text in "\\PC{0,40}", which in 0usize..4) {
            let spec = match which {
                0 => PreTokenizerSpec::byte_level(),
                1 => PreTokenizerSpec::byte_level_digits(),
                2 => PreTokenizerSpec::whitespace(),
                _ => PreTokenizerSpec::new(vec![PreTokenRule::Digits, PreTokenRule::WhitespaceSplit]),
            };
            let segs = pretokenize_with_offsets(&text, &spec);
            let texts: Vec<String> = segs.iter().map(|s| s.text.clone()).collect();
            prop_assert_eq!(reassemble(&texts, &spec), text.clone());
            let mut pos = 0;
            for s in &segs {
                prop_assert_eq!(s.start, pos);
                prop_assert!(s.end > s.start);
                pos = s.end;
            }
            prop_assert_eq!(pos, text.len());
            if spec.has(PreTokenRule::Digits) {
                for s in &segs {
                    let raw = &text[s.start..s.end];
                    if raw.chars().any(char::is_numeric) {
                        prop_assert_eq!(raw.chars().count(), 1);
                    }
                }
            }
        }
    }
}
