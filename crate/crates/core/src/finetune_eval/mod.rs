//! Downstream tasks: loaders, a multi-seed finetuning driver and metrics.

mod data;
mod metrics;

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::Model;
use crate::numerics::{lr_schedule, AdamW, AdamWConfig, Graph, Var};
use crate::tokenizers::{Tokenizer, CLS_ID, SEP_ID};

pub use data::{
    align_labels, bio_violations, hashed_split, load_conll, load_tsv_classification, parse_conll,
    parse_tsv_classification, BioViolation, SeqTaskDataset, TokenTaskDataset,
};
pub use metrics::{accuracy, aggregate_runs, weighted_f1, RunSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Pos,
    Ner,
    Ntc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    WeightedF1,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::WeightedF1 => "weighted_f1",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Metric::Accuracy),
            "weighted_f1" | "f1" => Ok(Metric::WeightedF1),
            other => Err(Error::invalid(format!("unknown metric `{other}`"))),
        }
    }
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Pos => "pos",
            Task::Ner => "ner",
            Task::Ntc => "ntc",
        }
    }

    /// Accuracy for POS, weighted F1 for NER and topic classification.
    pub fn metric(self) -> Metric {
        match self {
            Task::Pos => Metric::Accuracy,
            Task::Ner | Task::Ntc => Metric::WeightedF1,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pos" => Ok(Task::Pos),
            "ner" => Ok(Task::Ner),
            "ntc" | "news" => Ok(Task::Ntc),
            other => Err(Error::invalid(format!("unknown task `{other}` (expected pos, ner or ntc)"))),
        }
    }
}

/// Train and evaluation data for one task.
#[derive(Debug, Clone)]
pub enum TaskData {
    Tokens { train: TokenTaskDataset, test: TokenTaskDataset },
    Sequences { train: SeqTaskDataset, test: SeqTaskDataset },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub grad_clip: f64,
    pub head_init_std: f32,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 20,
            seeds: vec![1, 2, 3, 4, 5],
            lr: 1e-3,
            batch_size: 8,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
            grad_clip: 1.0,
            head_init_std: 0.02,
        }
    }
}

/// Per-seed scores with their mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task: String,
    pub metric: Metric,
    pub seeds: Vec<u64>,
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub single_run: bool,
}

impl EvalReport {
    pub fn new(task: &str, metric: Metric, seeds: Vec<u64>, scores: Vec<f64>) -> Result<Self> {
        if seeds.len() != scores.len() {
            return Err(Error::shape(format!("{} seeds for {} scores", seeds.len(), scores.len())));
        }
        let s = aggregate_runs(&scores)?;
        Ok(EvalReport {
            task: task.to_string(),
            metric,
            seeds,
            scores,
            mean: s.mean,
            std: s.std,
            single_run: s.single_run,
        })
    }

    /// One JSON object per seed, then the aggregate record.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for (seed, score) in self.seeds.iter().zip(&self.scores) {
            let rec = json!({ "task": self.task, "metric": self.metric.name(), "seed": seed, "score": score });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        let agg = json!({
            "task": self.task,
            "metric": self.metric.name(),
            "scores": self.scores,
            "mean": self.mean,
            "std": self.std,
            "single_run": self.single_run,
        });
        out.push_str(&agg.to_string());
        out.push('\n');
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json_lines().as_bytes())
    }
}

/// One model input with the positions that carry labels.
#[derive(Debug, Clone, PartialEq)]
struct Example {
    ids: Vec<u32>,
    positions: Vec<usize>,
    labels: Vec<usize>,
}

fn label_index(labels: &[String], label: &str) -> Result<usize> {
    labels
        .binary_search_by(|l| l.as_str().cmp(label))
        .map_err(|_| Error::invalid(format!("label `{label}` is not in the training label set")))
}

/// `[CLS] subwords [SEP]` windows over one sentence; each window holds whole
/// words, and a word longer than a window keeps only its leading subwords.
fn token_examples(
    tokenizer: &Tokenizer,
    sentence: &[(String, String)],
    labels: &[String],
    max_len: usize,
) -> Result<Vec<Example>> {
    let words: Vec<&str> = sentence.iter().map(|(w, _)| w.as_str()).collect();
    let word_labels = sentence.iter().map(|(_, l)| label_index(labels, l)).collect::<Result<Vec<_>>>()?;
    let (ids, owners) = tokenizer.encode_words(&words);
    let aligned = align_labels(&owners, &word_labels)?;
    let budget = max_len.saturating_sub(2).max(1);

    // subword spans per word
    let mut spans: Vec<(usize, usize)> = Vec::with_capacity(words.len());
    for (i, &w) in owners.iter().enumerate() {
        if w == spans.len() {
            spans.push((i, i + 1));
        } else {
            spans[w].1 = i + 1;
        }
    }
    let mut out = Vec::new();
    let mut current = Example { ids: vec![CLS_ID], positions: Vec::new(), labels: Vec::new() };
    for &(start, end) in &spans {
        let end = end.min(start + budget);
        if current.ids.len() - 1 + (end - start) > budget {
            current.ids.push(SEP_ID);
            out.push(std::mem::replace(
                &mut current,
                Example { ids: vec![CLS_ID], positions: Vec::new(), labels: Vec::new() },
            ));
        }
        for i in start..end {
            if let Some(label) = aligned[i] {
                current.positions.push(current.ids.len());
                current.labels.push(label);
            }
            current.ids.push(ids[i]);
        }
    }
    current.ids.push(SEP_ID);
    out.push(current);
    Ok(out)
}

fn seq_example(tokenizer: &Tokenizer, text: &str, label: usize, max_len: usize) -> Example {
    let mut ids = vec![CLS_ID];
    ids.extend(tokenizer.encode(text).into_iter().take(max_len.saturating_sub(2)));
    ids.push(SEP_ID);
    Example { ids, positions: vec![0], labels: vec![label] }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HeadKind {
    Token,
    Sequence,
}

struct Prepared {
    kind: HeadKind,
    labels: Vec<String>,
    train: Vec<Example>,
    test: Vec<Example>,
}

fn prepare(tokenizer: &Tokenizer, data: &TaskData, max_len: usize) -> Result<Prepared> {
    let check = |train: BTreeSet<String>, test: BTreeSet<String>| -> Result<Vec<String>> {
        if let Some(extra) = test.difference(&train).next() {
            return Err(Error::invalid(format!(
                "evaluation label `{extra}` never occurs in the training data"
            )));
        }
        if train.len() < 2 {
            return Err(Error::invalid("training data needs at least two distinct labels"));
        }
        Ok(train.into_iter().collect())
    };
    match data {
        TaskData::Tokens { train, test } => {
            if train.sentences.is_empty() || test.sentences.is_empty() {
                return Err(Error::NoTrainingData);
            }
            let labels = check(train.label_set(), test.label_set())?;
            let build = |d: &TokenTaskDataset| -> Result<Vec<Example>> {
                let mut out = Vec::new();
                for s in &d.sentences {
                    out.extend(token_examples(tokenizer, s, &labels, max_len)?);
                }
                Ok(out)
            };
            Ok(Prepared { kind: HeadKind::Token, train: build(train)?, test: build(test)?, labels })
        }
        TaskData::Sequences { train, test } => {
            if train.examples.is_empty() || test.examples.is_empty() {
                return Err(Error::NoTrainingData);
            }
            let labels = check(train.label_set(), test.label_set())?;
            let build = |d: &SeqTaskDataset| -> Result<Vec<Example>> {
                d.examples
                    .iter()
                    .map(|(l, t)| Ok(seq_example(tokenizer, t, label_index(&labels, l)?, max_len)))
                    .collect()
            };
            Ok(Prepared { kind: HeadKind::Sequence, train: build(train)?, test: build(test)?, labels })
        }
    }
}

fn logits_for(model: &Model, g: &mut Graph, kind: HeadKind, ex: &Example) -> Result<Var> {
    let out = model.encoder_forward(g, &ex.ids, None)?;
    match kind {
        HeadKind::Token => {
            let rows = g.select_rows(out.last(), &ex.positions)?;
            model.token_cls_logits(g, rows)
        }
        HeadKind::Sequence => model.seq_cls_logits(g, out.last()),
    }
}

fn predict(model: &Model, kind: HeadKind, examples: &[Example]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    for ex in examples {
        if ex.positions.is_empty() {
            continue;
        }
        let mut g = Graph::new();
        let logits = logits_for(model, &mut g, kind, ex)?;
        let t = g.value(logits);
        for r in 0..t.rows() {
            let row = t.row(r);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            pred.push(best);
        }
        gold.extend_from_slice(&ex.labels);
    }
    Ok((pred, gold))
}

fn score(metric: Metric, pred: &[usize], gold: &[usize]) -> Result<f64> {
    match metric {
        Metric::Accuracy => {
            let gold: Vec<Option<usize>> = gold.iter().copied().map(Some).collect();
            accuracy(pred, &gold)
        }
        Metric::WeightedF1 => weighted_f1(pred, gold),
    }
}

fn run_seed(base: &Model, prepared: &Prepared, metric: Metric, cfg: &FinetuneConfig, seed: u64) -> Result<f64> {
    let mut model = base.clone();
    let n_labels = prepared.labels.len();
    match prepared.kind {
        HeadKind::Token => model.add_token_cls_head(n_labels, seed, cfg.head_init_std)?,
        HeadKind::Sequence => model.add_seq_cls_head(n_labels, seed, cfg.head_init_std)?,
    }
    let mut optimizer = AdamW::new(AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train: Vec<&Example> = prepared.train.iter().filter(|e| !e.positions.is_empty()).collect();
    if train.is_empty() {
        return Err(Error::NoTrainingData);
    }
    let batch = cfg.batch_size.max(1);
    let total = train.len().div_ceil(batch) * cfg.epochs;
    let mut step = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut g = Graph::new();
            let mut logits = Vec::with_capacity(chunk.len());
            let mut targets = Vec::new();
            for &i in chunk {
                logits.push(logits_for(&model, &mut g, prepared.kind, train[i])?);
                targets.extend_from_slice(&train[i].labels);
            }
            let all = if logits.len() == 1 { logits[0] } else { g.concat_rows(&logits)? };
            let loss = g.cross_entropy(all, &targets)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged { step: step + 1, loss: value });
            }
            model.params.zero_grads();
            g.backward(loss, &mut model.params)?;
            model.params.clip_grad_norm(cfg.grad_clip);
            let lr = lr_schedule(step, total, cfg.lr, cfg.warmup_fraction)?;
            optimizer.step(&mut model.params, lr)?;
            step += 1;
        }
    }
    let (pred, gold) = predict(&model, prepared.kind, &prepared.test)?;
    score(metric, &pred, &gold)
}

/// Finetunes a fresh head on `model` once per seed (seeds run in parallel)
/// and scores each run on the evaluation split.
pub fn finetune(model: &Model, tokenizer: &Tokenizer, task: Task, data: &TaskData, cfg: &FinetuneConfig) -> Result<EvalReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::invalid("at least one seed is required"));
    }
    if cfg.epochs == 0 {
        return Err(Error::invalid("epochs must be at least 1"));
    }
    if model.config.vocab_size < tokenizer.vocab_size() {
        return Err(Error::invalid(format!(
            "checkpoint vocabulary ({}) is smaller than the tokenizer's ({})",
            model.config.vocab_size,
            tokenizer.vocab_size()
        )));
    }
    let expected = match data {
        TaskData::Tokens { .. } => task != Task::Ntc,
        TaskData::Sequences { .. } => task == Task::Ntc,
    };
    if !expected {
        return Err(Error::invalid(format!("task {task} does not match the supplied data format")));
    }
    let prepared = prepare(tokenizer, data, model.config.max_seq_len)?;
    let metric = task.metric();
    let scores = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed(model, &prepared, metric, cfg, seed))
        .collect::<Result<Vec<f64>>>()?;
    EvalReport::new(task.name(), metric, cfg.seeds.clone(), scores)
}
