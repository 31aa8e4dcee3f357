use std::ops::Range;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::io::read_utf8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub documents: Vec<String>,
    pub word_count: usize,
}

/// One document per line; blank lines are dropped and a trailing `\r` is ignored.
pub fn ingest_corpus(path: &Path) -> Result<Corpus> {
    Ok(corpus_from_text(&read_utf8(path)?))
}

pub fn corpus_from_text(text: &str) -> Corpus {
    let documents: Vec<String> = text
        .lines()
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect();
    let word_count = documents.iter().map(|d| d.split_whitespace().count()).sum();
    Corpus { documents, word_count }
}

/// Concatenates token streams, each followed by `sep_id`, and cuts the result
/// into `seq_len` chunks; the last chunk is padded with `pad_id`.
pub fn pack_sequences(streams: &[Vec<u32>], seq_len: usize, sep_id: u32, pad_id: u32) -> Result<Vec<Vec<u32>>> {
    if seq_len < 2 {
        return Err(Error::invalid(format!("seq_len must be at least 2, got {seq_len}")));
    }
    let mut flat = Vec::new();
    for s in streams {
        flat.extend_from_slice(s);
        flat.push(sep_id);
    }
    Ok(flat
        .chunks(seq_len)
        .map(|c| {
            let mut v = c.to_vec();
            v.resize(seq_len, pad_id);
            v
        })
        .collect())
}

/// Replacement fractions for selected positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskPolicy {
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy { mask: 0.8, random: 0.1, keep: 0.1 }
    }
}

impl MaskPolicy {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.mask, self.random, self.keep];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "mask/random/keep fractions must lie in [0,1] and sum to 1, got {}/{}/{}",
                self.mask, self.random, self.keep
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

/// Token ids the masker needs: the mask token and the ordinary-token range
/// (positions outside it are never selected; random replacements come from it).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVocab {
    pub mask_id: u32,
    pub ordinary: Range<u32>,
}

impl MaskVocab {
    pub fn is_ordinary(&self, id: u32) -> bool {
        self.ordinary.contains(&id)
    }
}

/// Inputs after masking. `labels[b][p]` is `Some(original id)` exactly at
/// selected positions, which are also listed in `positions[b]` with their
/// replacement action.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub inputs: Vec<Vec<u32>>,
    pub labels: Vec<Vec<Option<u32>>>,
    pub positions: Vec<Vec<usize>>,
    pub actions: Vec<Vec<MaskAction>>,
}

impl MaskedBatch {
    pub fn num_selected(&self) -> usize {
        self.positions.iter().map(Vec::len).sum()
    }

    fn select(&mut self, b: usize, p: usize, action: MaskAction, replacement: u32) {
        self.labels[b][p] = Some(self.inputs[b][p]);
        self.inputs[b][p] = replacement;
        self.positions[b].push(p);
        self.actions[b].push(action);
    }
}

fn draw_action<R: Rng>(policy: &MaskPolicy, vocab: &MaskVocab, original: u32, rng: &mut R) -> (MaskAction, u32) {
    let u: f64 = rng.random();
    if u < policy.mask {
        (MaskAction::Mask, vocab.mask_id)
    } else if u < policy.mask + policy.random && !vocab.ordinary.is_empty() {
        (MaskAction::Random, rng.random_range(vocab.ordinary.clone()))
    } else {
        (MaskAction::Keep, original)
    }
}

/// Selects each ordinary position independently with probability `mask_rate`
/// and applies the replacement policy.
pub fn mask_batch<R: Rng>(
    batch: &[Vec<u32>],
    mask_rate: f64,
    policy: &MaskPolicy,
    vocab: &MaskVocab,
    rng: &mut R,
) -> Result<MaskedBatch> {
    if !(0.0..=1.0).contains(&mask_rate) {
        return Err(Error::invalid(format!("mask_rate must lie in [0,1], got {mask_rate}")));
    }
    policy.validate()?;
    let mut out = MaskedBatch {
        inputs: batch.to_vec(),
        labels: batch.iter().map(|s| vec![None; s.len()]).collect(),
        positions: vec![Vec::new(); batch.len()],
        actions: vec![Vec::new(); batch.len()],
    };
    for (b, seq) in batch.iter().enumerate() {
        for (p, &id) in seq.iter().enumerate() {
            if !vocab.is_ordinary(id) {
                continue;
            }
            if rng.random::<f64>() < mask_rate {
                let (action, replacement) = draw_action(policy, vocab, id, rng);
                out.select(b, p, action, replacement);
            }
        }
    }
    Ok(out)
}

/// Selects one uniformly chosen ordinary position when nothing was selected,
/// so that every training batch carries a signal. Returns whether it did.
pub fn ensure_one_selected<R: Rng>(
    masked: &mut MaskedBatch,
    policy: &MaskPolicy,
    vocab: &MaskVocab,
    rng: &mut R,
) -> bool {
    if masked.num_selected() > 0 {
        return false;
    }
    let eligible: Vec<(usize, usize)> = masked
        .inputs
        .iter()
        .enumerate()
        .flat_map(|(b, s)| s.iter().enumerate().filter(|(_, &id)| vocab.is_ordinary(id)).map(move |(p, _)| (b, p)))
        .collect();
    if eligible.is_empty() {
        return false;
    }
    let (b, p) = eligible[rng.random_range(0..eligible.len())];
    let (action, replacement) = draw_action(policy, vocab, masked.inputs[b][p], rng);
    masked.select(b, p, action, replacement);
    true
}
