use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::read_utf8;

/// Sentences of `(token, label)` pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenTaskDataset {
    pub sentences: Vec<Vec<(String, String)>>,
}

impl TokenTaskDataset {
    /// Sorted distinct labels.
    pub fn label_set(&self) -> BTreeSet<String> {
        self.sentences.iter().flatten().map(|(_, l)| l.clone()).collect()
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }
}

/// `(label, text)` examples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqTaskDataset {
    pub examples: Vec<(String, String)>,
}

impl SeqTaskDataset {
    pub fn label_set(&self) -> BTreeSet<String> {
        self.examples.iter().map(|(l, _)| l.clone()).collect()
    }
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
}

/// Parses `token<TAB>label` lines; blank lines end sentences.
pub fn load_conll(path: &Path) -> Result<TokenTaskDataset> {
    parse_conll(&read_utf8(path)?, path)
}

pub fn parse_conll(text: &str, source: &Path) -> Result<TokenTaskDataset> {
    let mut sentences = Vec::new();
    let mut current = Vec::new();
    for (line_no, line) in lines(text) {
        if line.trim().is_empty() {
            if !current.is_empty() {
                sentences.push(std::mem::take(&mut current));
            }
            continue;
        }
        let err = |message: String| Error::Parse { path: source.to_path_buf(), line: line_no, message };
        let Some((token, label)) = line.split_once('\t') else {
            return Err(err(format!("expected `token<TAB>label`, got `{line}`")));
        };
        let (token, label) = (token.trim(), label.trim());
        if token.is_empty() || label.is_empty() || label.contains('\t') {
            return Err(err(format!("expected `token<TAB>label`, got `{line}`")));
        }
        current.push((token.to_string(), label.to_string()));
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    Ok(TokenTaskDataset { sentences })
}

/// An `I-X` label that does not continue a `B-X` or `I-X`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BioViolation {
    pub sentence: usize,
    pub token: usize,
    pub label: String,
    pub previous: Option<String>,
}

pub fn bio_violations(data: &TokenTaskDataset) -> Vec<BioViolation> {
    let mut out = Vec::new();
    for (s, sentence) in data.sentences.iter().enumerate() {
        let mut prev: Option<&str> = None;
        for (t, (_, label)) in sentence.iter().enumerate() {
            if let Some(kind) = label.strip_prefix("I-") {
                let ok = prev.is_some_and(|p| p.strip_prefix("B-").or_else(|| p.strip_prefix("I-")) == Some(kind));
                if !ok {
                    out.push(BioViolation {
                        sentence: s,
                        token: t,
                        label: label.clone(),
                        previous: prev.map(str::to_string),
                    });
                }
            }
            prev = Some(label);
        }
    }
    out
}

/// Parses `label<TAB>text` lines; blank lines are skipped.
pub fn load_tsv_classification(path: &Path) -> Result<SeqTaskDataset> {
    parse_tsv_classification(&read_utf8(path)?, path)
}

pub fn parse_tsv_classification(text: &str, source: &Path) -> Result<SeqTaskDataset> {
    let mut examples = Vec::new();
    for (line_no, line) in lines(text) {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { path: source.to_path_buf(), line: line_no, message };
        let Some((label, body)) = line.split_once('\t') else {
            return Err(err(format!("expected `label<TAB>text`, got `{line}`")));
        };
        if label.trim().is_empty() {
            return Err(err("empty label".into()));
        }
        if body.trim().is_empty() {
            return Err(err("empty text".into()));
        }
        examples.push((label.trim().to_string(), body.trim().to_string()));
    }
    Ok(SeqTaskDataset { examples })
}

/// Per-subword labels from word labels: the first subword of each word gets
/// the word's label and the rest get `None`. `owners[i]` is the word index of
/// subword `i` and must cover every word in order.
pub fn align_labels(owners: &[usize], word_labels: &[usize]) -> Result<Vec<Option<usize>>> {
    let mut out = Vec::with_capacity(owners.len());
    let mut next_word = 0usize;
    for (i, &w) in owners.iter().enumerate() {
        if w == next_word {
            let label = *word_labels
                .get(w)
                .ok_or_else(|| Error::invalid(format!("subword {i} belongs to word {w}, beyond {} words", word_labels.len())))?;
            out.push(Some(label));
            next_word += 1;
        } else if next_word > 0 && w == next_word - 1 {
            out.push(None);
        } else {
            return Err(Error::invalid(format!(
                "subword {i} belongs to word {w}; expected word {} or {next_word}",
                next_word.saturating_sub(1)
            )));
        }
    }
    if next_word != word_labels.len() {
        return Err(Error::invalid(format!(
            "word {next_word} has no subwords ({} words labelled)",
            word_labels.len()
        )));
    }
    Ok(out)
}

/// Deterministic 80/10/10 assignment by a hash of the item index:
/// returns (train, dev, test) index lists.
pub fn hashed_split(n: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let (mut train, mut dev, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        match splitmix64(i as u64) % 10 {
            0..=7 => train.push(i),
            8 => dev.push(i),
            _ => test.push(i),
        }
    }
    (train, dev, test)
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conll_examples() {
        let d = parse_conll("a\tB-PER\nb\tI-PER\n\nc\tO\r\n", Path::new("x")).unwrap();
        assert_eq!(d.sentences.len(), 2);
        assert!(bio_violations(&d).is_empty());
        match parse_conll("a\tO\nword\n", Path::new("x")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bio_violation_reported_not_fixed() {
        let d = parse_conll("a\tO\nb\tI-LOC\nc\tB-PER\nd\tI-LOC\n", Path::new("x")).unwrap();
        let v = bio_violations(&d);
        assert_eq!(v.len(), 2);
        assert_eq!((v[0].token, v[1].token), (1, 3));
        assert_eq!(d.sentences[0][1].1, "I-LOC");
    }

    #[test]
    fn tsv_examples() {
        let d = parse_tsv_classification("sport\tgoal\r\npolitics\tvote\nsport\tgoal\n", Path::new("x")).unwrap();
        assert_eq!(d.examples.len(), 3);
        assert_eq!(d.label_set().len(), 2);
        assert!(parse_tsv_classification("sport\t  \n", Path::new("x")).is_err());
    }

    #[test]
    fn alignment_examples() {
        assert_eq!(align_labels(&[0, 0], &[4]).unwrap(), vec![Some(4), None]);
        assert_eq!(align_labels(&[0, 1, 2], &[1, 2, 3]).unwrap(), vec![Some(1), Some(2), Some(3)]);
        assert!(align_labels(&[0, 2], &[1, 2, 3]).is_err());
        assert!(align_labels(&[0], &[1, 2]).is_err());
    }

    #[test]
    fn split_is_deterministic_and_complete() {
        let (a, b, c) = hashed_split(1000);
        assert_eq!(a.len() + b.len() + c.len(), 1000);
        assert_eq!((a, b, c), hashed_split(1000));
    }
}
