use std::collections::{BTreeSet, HashMap};

pub(crate) type Pair = (u32, u32);

/// Frequency-weighted words as symbol sequences, with adjacent-pair and
/// per-symbol counts kept current across merges. Shared by the BPE and
/// WordPiece trainers; they differ only in how they pick the next pair.
pub(crate) struct PairMerger {
    words: Vec<Vec<u32>>,
    freqs: Vec<i64>,
    pair_counts: HashMap<Pair, i64>,
    pair_words: HashMap<Pair, BTreeSet<usize>>,
    token_counts: HashMap<u32, i64>,
}

impl PairMerger {
    pub fn new(words: Vec<Vec<u32>>, freqs: Vec<u64>) -> Self {
        let mut m = PairMerger {
            freqs: freqs.into_iter().map(|f| f as i64).collect(),
            words,
            pair_counts: HashMap::new(),
            pair_words: HashMap::new(),
            token_counts: HashMap::new(),
        };
        for w in 0..m.words.len() {
            m.account(w, 1);
        }
        m
    }

    fn account(&mut self, w: usize, sign: i64) {
        let f = self.freqs[w] * sign;
        let word = &self.words[w];
        for &t in word {
            *self.token_counts.entry(t).or_insert(0) += f;
        }
        for pair in word.windows(2).map(|p| (p[0], p[1])) {
            *self.pair_counts.entry(pair).or_insert(0) += f;
            if sign > 0 {
                self.pair_words.entry(pair).or_default().insert(w);
            }
        }
    }

    /// Pairs that currently occur, with their weighted counts.
    pub fn pairs(&self) -> impl Iterator<Item = (Pair, i64)> + '_ {
        self.pair_counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .map(|(&p, &c)| (p, c))
    }

    pub fn token_count(&self, t: u32) -> i64 {
        self.token_counts.get(&t).copied().unwrap_or(0)
    }

    /// Replaces every non-overlapping left-to-right occurrence of `pair` with `merged`.
    pub fn merge(&mut self, pair: Pair, merged: u32) {
        let Some(affected) = self.pair_words.remove(&pair) else {
            return;
        };
        for w in affected {
            if !self.words[w].windows(2).any(|p| (p[0], p[1]) == pair) {
                continue;
            }
            self.account(w, -1);
            let old = std::mem::take(&mut self.words[w]);
            let mut new = Vec::with_capacity(old.len());
            let mut i = 0;
            while i < old.len() {
                if i + 1 < old.len() && (old[i], old[i + 1]) == pair {
                    new.push(merged);
                    i += 2;
                } else {
                    new.push(old[i]);
                    i += 1;
                }
            }
            self.words[w] = new;
            self.account(w, 1);
        }
        self.pair_counts.retain(|_, c| *c > 0);
    }
}

/// Applies ranked merges to one symbol sequence, lowest rank first.
pub(crate) fn apply_ranked_merges(
    mut symbols: Vec<u32>,
    ranks: &HashMap<Pair, (usize, u32)>,
) -> Vec<u32> {
    loop {
        let best = symbols
            .windows(2)
            .filter_map(|p| ranks.get(&(p[0], p[1])).map(|&(r, id)| (r, (p[0], p[1]), id)))
            .min_by_key(|&(r, _, _)| r);
        let Some((_, pair, id)) = best else {
            return symbols;
        };
        let mut out = Vec::with_capacity(symbols.len());
        let mut i = 0;
        while i < symbols.len() {
            if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
                out.push(id);
                i += 2;
            } else {
                out.push(symbols[i]);
                i += 1;
            }
        }
        symbols = out;
    }
}
