//! Corpus plumbing, masking and the pretraining loop shared by the three objectives.

mod check;
mod data;
mod state;

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::mlsm::{l2_normalize, target_from_f64, SemanticDictionary, SparseEncoder};
use crate::model::{Model, ModelConfig, ResidualMode};
use crate::numerics::{lr_schedule, AdamW, AdamWConfig, Graph, Tensor, Var};
use crate::tokenizers::{AugmentedVocab, TokenizerPreset, PAD_ID};

pub use data::{
    corpus_from_text, ensure_one_selected, ingest_corpus, mask_batch, pack_sequences, Corpus, MaskAction,
    MaskPolicy, MaskVocab, MaskedBatch,
};
pub use check::builtin_grad_check;
pub use state::TrainState;

const ORDER_SALT: u64 = 0x6f72_6465_7200_0001;
const MASK_SALT: u64 = 0x6d61_736b_0000_0002;
const EMA_DECAY: f64 = 0.98;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    MlmStandard,
    MlmElc,
    MlsmStudent,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::MlmStandard => "mlm_standard",
            Objective::MlmElc => "mlm_elc",
            Objective::MlsmStudent => "mlsm_student",
        }
    }

    pub fn residual_mode(self) -> ResidualMode {
        match self {
            Objective::MlmElc => ResidualMode::Elc,
            _ => ResidualMode::Standard,
        }
    }

    pub fn default_tokenizer(self) -> TokenizerPreset {
        match self {
            Objective::MlmStandard => TokenizerPreset::Roberta,
            Objective::MlmElc => TokenizerPreset::Elc,
            Objective::MlsmStudent => TokenizerPreset::Mlsm,
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlm_standard" | "mlm" => Ok(Objective::MlmStandard),
            "mlm_elc" | "elc" => Ok(Objective::MlmElc),
            "mlsm_student" | "mlsm" => Ok(Objective::MlsmStudent),
            other => Err(Error::Config(format!(
                "unknown objective `{other}` (expected mlm_standard, mlm_elc or mlsm_student)"
            ))),
        }
    }
}

/// Every knob of a pretraining run. Parsed from and echoed to flat
/// `key = value` text by [`crate::config`].
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub objective: Objective,
    pub lr: f64,
    pub seq_len: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub mask_rate: f64,
    pub policy: MaskPolicy,
    pub seed: u64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub grad_clip: f64,
    pub checkpoint_epochs: Vec<usize>,
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ff_hidden: usize,
    pub init_std: f64,
    pub tokenizer: TokenizerPreset,
    pub vocab_size: usize,
    pub latent_k: usize,
    pub lambda: f64,
    /// `None` selects the middle layer of the teacher.
    pub teacher_layer: Option<usize>,
    pub dict_samples: usize,
    pub dict_iterations: usize,
    pub normalize_hidden: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            objective: Objective::MlmStandard,
            lr: 5e-5,
            seq_len: 512,
            batch_size: 8,
            epochs: 200,
            mask_rate: 0.15,
            policy: MaskPolicy::default(),
            seed: 42,
            weight_decay: 0.01,
            warmup_fraction: 0.01,
            grad_clip: 1.0,
            checkpoint_epochs: vec![20, 100, 200],
            num_layers: 12,
            num_heads: 4,
            hidden_dim: 64,
            ff_hidden: 1024,
            init_std: 0.02,
            tokenizer: TokenizerPreset::Roberta,
            vocab_size: 8000,
            latent_k: 64,
            lambda: crate::mlsm::DEFAULT_LAMBDA,
            teacher_layer: None,
            dict_samples: 10_000,
            dict_iterations: 10,
            normalize_hidden: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.seq_len < 2 {
            return fail("seq_len must be at least 2".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return fail(format!("mask_rate must lie in [0,1], got {}", self.mask_rate));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return fail(format!("warmup_fraction must lie in [0,1), got {}", self.warmup_fraction));
        }
        if !(self.grad_clip > 0.0) {
            return fail(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if !(self.init_std > 0.0) {
            return fail(format!("init_std must be positive, got {}", self.init_std));
        }
        self.policy.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.objective == Objective::MlsmStudent && self.latent_k == 0 {
            return fail("latent_k must be positive for mlsm_student".into());
        }
        self.model_config(self.vocab_size.max(1))
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Geometry of the model this run trains, for a tokenizer of `vocab_size` ids.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            ff_hidden: self.ff_hidden,
            hidden_dim: self.hidden_dim,
            max_seq_len: self.seq_len,
            vocab_size,
            residual_mode: self.objective.residual_mode(),
            latent_k: if self.objective == Objective::MlsmStudent { self.latent_k } else { 0 },
        }
    }

    pub fn resolved_teacher_layer(&self, teacher_layers: usize) -> usize {
        self.teacher_layer.unwrap_or(teacher_layers / 2)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }
}

/// Labels gathered at selected positions, in batch then position order.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchLabels {
    Tokens(Vec<usize>),
    /// One target distribution per selected position, `[n × k]`.
    Latent(Tensor),
}

/// A masked batch reduced to what the loss needs.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    pub inputs: Vec<Vec<u32>>,
    pub positions: Vec<Vec<usize>>,
    pub labels: BatchLabels,
}

/// Mean loss over selected positions: token cross-entropy for the MLM
/// objectives, soft cross-entropy against latent targets for the student.
pub fn batch_loss(model: &Model, g: &mut Graph, batch: &PreparedBatch) -> Result<Var> {
    let mut rows = Vec::new();
    for (ids, positions) in batch.inputs.iter().zip(&batch.positions) {
        if positions.is_empty() {
            continue;
        }
        let keep: Vec<bool> = ids.iter().map(|&t| t != PAD_ID).collect();
        let mask = keep.iter().any(|k| !k).then_some(keep.as_slice());
        let out = model.encoder_forward(g, ids, mask)?;
        rows.push(g.select_rows(out.last(), positions)?);
    }
    if rows.is_empty() {
        return Err(Error::invalid("batch has no selected positions"));
    }
    let h = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
    let n = g.value(h).rows();
    let all: Vec<usize> = (0..n).collect();
    match &batch.labels {
        BatchLabels::Tokens(labels) => {
            let logits = model.mlm_logits(g, h, &all)?;
            g.cross_entropy(logits, labels)
        }
        BatchLabels::Latent(targets) => {
            let logits = model.latent_logits(g, h, &all, targets.cols())?;
            g.soft_cross_entropy(logits, targets)
        }
    }
}

/// Teacher, dictionary and augmented vocabulary for the student objective.
pub struct MlsmContext {
    pub teacher: Model,
    pub dictionary: SemanticDictionary,
    pub augmented: AugmentedVocab,
    pub normalize_hidden: bool,
    encoder: SparseEncoder,
}

impl MlsmContext {
    pub fn new(
        teacher: Model,
        dictionary: SemanticDictionary,
        augmented: AugmentedVocab,
        normalize_hidden: bool,
    ) -> Result<Self> {
        if dictionary.k != augmented.k() {
            return Err(Error::invalid(format!(
                "dictionary has k = {}, vocabulary has {} mask tokens",
                dictionary.k,
                augmented.k()
            )));
        }
        if dictionary.d != teacher.config.hidden_dim {
            return Err(Error::invalid(format!(
                "dictionary atoms have d = {}, teacher hidden size is {}",
                dictionary.d, teacher.config.hidden_dim
            )));
        }
        if dictionary.teacher_layer > teacher.config.num_layers {
            return Err(Error::invalid(format!(
                "dictionary teacher layer {} exceeds teacher depth {}",
                dictionary.teacher_layer, teacher.config.num_layers
            )));
        }
        if teacher.config.vocab_size != augmented.base_size() {
            return Err(Error::invalid(format!(
                "teacher vocabulary has {} ids, student base vocabulary has {}",
                teacher.config.vocab_size,
                augmented.base_size()
            )));
        }
        let encoder = SparseEncoder::new(&dictionary);
        Ok(MlsmContext { teacher, dictionary, augmented, normalize_hidden, encoder })
    }

    /// Latent targets for `positions` of the unmasked sequence `ids`.
    pub fn targets(&self, ids: &[u32], positions: &[usize]) -> Result<Vec<crate::mlsm::LatentTarget>> {
        if positions.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let keep: Vec<bool> = ids.iter().map(|&t| t != PAD_ID).collect();
        let mask = keep.iter().any(|k| !k).then_some(keep.as_slice());
        let out = self.teacher.encoder_forward(&mut g, ids, mask)?;
        let h = g.value(out.hidden[self.dictionary.teacher_layer]);
        positions
            .iter()
            .map(|&p| {
                let mut x = h.row(p).to_vec();
                if self.normalize_hidden {
                    l2_normalize(&mut x);
                }
                target_from_f64(&self.encoder.encode(&x, None)?)
            })
            .collect()
    }
}

/// Largest deviation of a target sum from one, over every target produced so far.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TargetStats {
    pub count: usize,
    pub max_sum_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 1-based global step.
    pub step: usize,
    /// 1-based epoch.
    pub epoch: usize,
    pub loss: f64,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        format!("{}\t{}\t{}", self.step, self.epoch, self.loss)
    }
}

/// Owns the model and optimizer for one pretraining run.
pub struct Trainer {
    pub config: PretrainConfig,
    pub model: Model,
    pub optimizer: AdamW,
    pub state: TrainState,
    pub target_stats: TargetStats,
    sequences: Vec<Vec<u32>>,
    mask_vocab: MaskVocab,
    mlsm: Option<MlsmContext>,
}

impl Trainer {
    pub fn new(
        config: PretrainConfig,
        model: Model,
        sequences: Vec<Vec<u32>>,
        mask_vocab: MaskVocab,
        mlsm: Option<MlsmContext>,
    ) -> Result<Self> {
        config.validate()?;
        if sequences.is_empty() {
            return Err(Error::NoTrainingData);
        }
        if let Some(bad) = sequences.iter().find(|s| s.len() > model.config.max_seq_len) {
            return Err(Error::invalid(format!(
                "sequence of {} tokens exceeds the model's max_seq_len {}",
                bad.len(),
                model.config.max_seq_len
            )));
        }
        let expected = config.objective.residual_mode();
        if model.config.residual_mode != expected {
            return Err(Error::invalid(format!(
                "objective {} needs a {:?} model",
                config.objective, expected
            )));
        }
        match (config.objective, &mlsm) {
            (Objective::MlsmStudent, None) => {
                return Err(Error::invalid("mlsm_student needs a teacher and a dictionary"))
            }
            (Objective::MlsmStudent, Some(ctx)) => {
                if model.config.latent_k != ctx.dictionary.k {
                    return Err(Error::invalid(format!(
                        "student latent head has k = {}, dictionary has k = {}",
                        model.config.latent_k, ctx.dictionary.k
                    )));
                }
                if model.config.vocab_size != ctx.augmented.model().vocab_size() {
                    return Err(Error::invalid("student vocabulary does not match the augmented tokenizer"));
                }
            }
            (_, _) => {
                if model.config.latent_k != 0 {
                    return Err(Error::invalid("MLM objectives need a model with a vocabulary head"));
                }
            }
        }
        Ok(Trainer {
            optimizer: AdamW::new(config.adamw()),
            state: TrainState::new(config.seed),
            config,
            model,
            target_stats: TargetStats::default(),
            sequences,
            mask_vocab,
            mlsm,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.sequences.len().div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.config.epochs
    }

    pub fn is_finished(&self) -> bool {
        self.state.global_step >= self.total_steps()
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.state.seed ^ ORDER_SALT);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..self.sequences.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Masks the next batch and attaches labels (latent targets for the student).
    fn prepare(&mut self) -> Result<Option<PreparedBatch>> {
        let order = self.epoch_order(self.state.epoch);
        let b = self.config.batch_size;
        let start = self.state.step_in_epoch * b;
        let batch: Vec<Vec<u32>> = order[start..(start + b).min(order.len())]
            .iter()
            .map(|&i| self.sequences[i].clone())
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(self.state.seed ^ MASK_SALT);
        rng.set_stream(self.state.global_step as u64);
        let mut masked = mask_batch(&batch, self.config.mask_rate, &self.config.policy, &self.mask_vocab, &mut rng)?;
        if self.config.mask_rate > 0.0 {
            ensure_one_selected(&mut masked, &self.config.policy, &self.mask_vocab, &mut rng);
        }
        if masked.num_selected() == 0 {
            return Ok(None);
        }

        let labels = match &self.mlsm {
            None => BatchLabels::Tokens(
                masked
                    .positions
                    .iter()
                    .zip(&masked.labels)
                    .flat_map(|(ps, ls)| ps.iter().map(move |&p| ls[p].expect("label at selected position") as usize))
                    .collect(),
            ),
            Some(ctx) => {
                let k = ctx.dictionary.k;
                let mut flat = Vec::with_capacity(masked.num_selected() * k);
                for (bi, original) in batch.iter().enumerate() {
                    let targets = ctx.targets(original, &masked.positions[bi])?;
                    for ((&p, action), t) in masked.positions[bi].iter().zip(&masked.actions[bi]).zip(&targets) {
                        let err = (t.sum() - 1.0).abs();
                        self.target_stats.count += 1;
                        self.target_stats.max_sum_error = self.target_stats.max_sum_error.max(err);
                        if *action == MaskAction::Mask {
                            masked.inputs[bi][p] = ctx.augmented.mask_id(t.argmax())?;
                        }
                        flat.extend_from_slice(&t.distribution);
                    }
                }
                BatchLabels::Latent(Tensor::matrix(masked.num_selected(), k, flat)?)
            }
        };
        Ok(Some(PreparedBatch { inputs: masked.inputs, positions: masked.positions, labels }))
    }

    fn advance(&mut self) {
        self.state.global_step += 1;
        self.state.step_in_epoch += 1;
        if self.state.step_in_epoch == self.steps_per_epoch() {
            self.state.step_in_epoch = 0;
            self.state.epoch += 1;
        }
    }

    /// Runs one optimisation step. Returns `None` once training is complete
    /// or when the batch had nothing to predict.
    pub fn step(&mut self) -> Result<Option<StepRecord>> {
        if self.is_finished() {
            return Ok(None);
        }
        let epoch = self.state.epoch + 1;
        let Some(batch) = self.prepare()? else {
            self.advance();
            return Ok(None);
        };
        let mut g = Graph::new();
        let loss_var = batch_loss(&self.model, &mut g, &batch)?;
        let loss = g.value(loss_var).item() as f64;
        let step = self.state.global_step + 1;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss: loss as f32 });
        }
        self.model.params.zero_grads();
        g.backward(loss_var, &mut self.model.params)?;
        self.model.params.clip_grad_norm(self.config.grad_clip);
        let lr = lr_schedule(self.state.global_step, self.total_steps(), self.config.lr, self.config.warmup_fraction)?;
        self.optimizer.step(&mut self.model.params, lr)?;

        self.state.loss_ema = if self.state.global_step == 0 {
            loss
        } else {
            EMA_DECAY * self.state.loss_ema + (1.0 - EMA_DECAY) * loss
        };
        self.advance();
        Ok(Some(StepRecord { step, epoch, loss }))
    }

    /// Trains until the configured epochs are done (or `max_steps` more steps
    /// have run), logging and checkpointing into `run` when given.
    pub fn run(&mut self, run: Option<&RunDir>, max_steps: Option<usize>) -> Result<Vec<StepRecord>> {
        let mut records = Vec::new();
        let mut log = match run {
            Some(r) => Some(r.open_loss_log(self.state.global_step)?),
            None => None,
        };
        let stop_at = max_steps.map(|m| self.state.global_step + m);
        while !self.is_finished() && stop_at.is_none_or(|s| self.state.global_step < s) {
            let epoch_before = self.state.epoch;
            if let Some(rec) = self.step()? {
                if let Some(f) = log.as_mut() {
                    writeln!(f, "{}", rec.log_line()).map_err(|e| Error::io("writing loss log", e))?;
                }
                records.push(rec);
            }
            if let Some(r) = run {
                if self.state.epoch > epoch_before && self.config.checkpoint_epochs.contains(&self.state.epoch) {
                    self.model.save_checkpoint(&r.epoch_checkpoint(self.state.epoch))?;
                    self.save(r)?;
                }
            }
        }
        if let Some(f) = log.as_mut() {
            f.flush().map_err(|e| Error::io("writing loss log", e))?;
        }
        if let Some(r) = run {
            self.save(r)?;
        }
        Ok(records)
    }

    /// Writes the latest model and the resumable state.
    pub fn save(&self, run: &RunDir) -> Result<()> {
        self.model.save_checkpoint(&run.model_path())?;
        state::save_state(&run.state_path(), &self.state, &self.optimizer.state)
    }

    /// Restores model, optimizer and counters saved by [`Trainer::save`].
    pub fn restore(&mut self, run: &RunDir) -> Result<()> {
        let model = Model::load_checkpoint(&run.model_path())?;
        if model.config != self.model.config {
            return Err(Error::invalid("saved model does not match this run's configuration"));
        }
        let (state, optim) = state::load_state(&run.state_path())?;
        if state.seed != self.config.seed {
            return Err(Error::invalid(format!(
                "saved state used seed {}, config has {}",
                state.seed, self.config.seed
            )));
        }
        self.model = model;
        self.state = state;
        self.optimizer.state = optim;
        Ok(())
    }
}

/// Output directory layout of a pretraining run.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root.join("checkpoints")).map_err(|e| Error::io(format!("creating {}", root.display()), e))?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn model_path(&self) -> PathBuf {
        self.root.join("model.ckpt")
    }

    pub fn state_path(&self) -> PathBuf {
        self.root.join("state.bin")
    }

    pub fn loss_log_path(&self) -> PathBuf {
        self.root.join("loss.tsv")
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn tokenizer_path(&self) -> PathBuf {
        self.root.join("tokenizer.tok")
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("epoch-{epoch:04}.ckpt"))
    }

    /// Opens the loss log for appending, first dropping any lines past
    /// `keep_through_step` left by an interrupted run.
    fn open_loss_log(&self, keep_through_step: usize) -> Result<File> {
        let path = self.loss_log_path();
        let ctx = || format!("loss log {}", path.display());
        let mut kept = String::new();
        if keep_through_step > 0 && path.exists() {
            let f = File::open(&path).map_err(|e| Error::io(ctx(), e))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(ctx(), e))?;
                let step: usize = line.split('\t').next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
                if step <= keep_through_step {
                    kept.push_str(&line);
                    kept.push('\n');
                }
            }
        }
        fs::write(&path, kept).map_err(|e| Error::io(ctx(), e))?;
        OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(ctx(), e))
    }
}

/// Reads a loss log back as records.
pub fn read_loss_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = crate::io::read_utf8(path)?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let parse_err = || Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected `step<TAB>epoch<TAB>loss`, got `{line}`"),
            };
            let mut parts = line.split('\t');
            let (Some(s), Some(e), Some(l), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
                return Err(parse_err());
            };
            Ok(StepRecord {
                step: s.parse().map_err(|_| parse_err())?,
                epoch: e.parse().map_err(|_| parse_err())?,
                loss: l.parse().map_err(|_| parse_err())?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlsm::SemanticDictionary;
    use crate::tokenizers::{Tokenizer, WordPieceModel};

    fn tiny_config(objective: Objective) -> PretrainConfig {
        PretrainConfig {
            objective,
            lr: 3e-3,
            seq_len: 8,
            batch_size: 2,
            epochs: 3,
            num_layers: 2,
            num_heads: 2,
            hidden_dim: 8,
            ff_hidden: 16,
            init_std: 0.1,
            latent_k: 4,
            mask_rate: 0.3,
            checkpoint_epochs: vec![2],
            ..PretrainConfig::default()
        }
    }

    fn sequences() -> Vec<Vec<u32>> {
        (0..5u32).map(|i| (0..8).map(|j| 5 + (i * 3 + j) % 20).collect()).collect()
    }

    fn mlm_trainer(objective: Objective) -> Trainer {
        let cfg = tiny_config(objective);
        let model = Model::init(cfg.model_config(25), cfg.seed, cfg.init_std as f32).unwrap();
        Trainer::new(cfg, model, sequences(), MaskVocab { mask_id: 4, ordinary: 5..25 }, None).unwrap()
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let cfg = tiny_config(Objective::MlmStandard);
        let model = Model::init(cfg.model_config(25), 0, 0.1).unwrap();
        let r = Trainer::new(cfg, model, Vec::new(), MaskVocab { mask_id: 4, ordinary: 5..25 }, None);
        assert!(matches!(r, Err(Error::NoTrainingData)));
    }

    #[test]
    fn runs_are_bit_identical() {
        for obj in [Objective::MlmStandard, Objective::MlmElc] {
            let a = mlm_trainer(obj).run(None, None).unwrap();
            let b = mlm_trainer(obj).run(None, None).unwrap();
            assert_eq!(a.len(), 9);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn objective_model_mismatch_rejected() {
        let cfg = tiny_config(Objective::MlmElc);
        let model = Model::init(tiny_config(Objective::MlmStandard).model_config(25), 0, 0.1).unwrap();
        assert!(Trainer::new(cfg, model, sequences(), MaskVocab { mask_id: 4, ordinary: 5..25 }, None).is_err());
    }

    #[test]
    fn resume_matches_straight_run() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::create(dir.path()).unwrap();
        let straight = mlm_trainer(Objective::MlmElc).run(None, None).unwrap();

        let mut first = mlm_trainer(Objective::MlmElc);
        first.run(Some(&run), Some(4)).unwrap();
        let mut second = mlm_trainer(Objective::MlmElc);
        second.restore(&run).unwrap();
        second.run(Some(&run), None).unwrap();
        let logged = read_loss_log(&run.loss_log_path()).unwrap();
        assert_eq!(logged.len(), straight.len());
        for (a, b) in logged.iter().zip(&straight) {
            assert_eq!((a.step, a.epoch), (b.step, b.epoch));
            assert!((a.loss - b.loss).abs() <= 1e-6);
        }
        assert!(run.epoch_checkpoint(2).exists());
    }

    #[test]
    fn student_inputs_use_argmax_mask_tokens() {
        let corpus = ["ab ba ab", "ba ab ba"];
        let wp = WordPieceModel::train(&corpus, 12, crate::tokenizers::PreTokenizerSpec::whitespace()).unwrap();
        let base = wp.vocab_size();
        let aug = AugmentedVocab::augment(&wp, 4).unwrap();
        let student_vocab = Tokenizer::Augmented(aug.clone()).vocab_size();

        let cfg = tiny_config(Objective::MlsmStudent);
        let teacher_cfg = PretrainConfig { objective: Objective::MlmStandard, ..cfg.clone() };
        let teacher = Model::init(teacher_cfg.model_config(base), 1, 0.3).unwrap();
        let mut atoms = vec![0.0f32; 4 * 8];
        for j in 0..4 {
            atoms[j * 8 + j] = 1.0;
        }
        let dict = SemanticDictionary::new(atoms, 4, 8, 0.0, 1).unwrap();
        let ctx = MlsmContext::new(teacher, dict, aug.clone(), true).unwrap();
        let student = Model::init(cfg.model_config(student_vocab), 2, 0.1).unwrap();
        let seqs: Vec<Vec<u32>> = (0..4).map(|i| (0..8).map(|j| 5 + ((i + j) % (base as u32 - 5))).collect()).collect();
        let policy = MaskPolicy { mask: 1.0, random: 0.0, keep: 0.0 };
        let cfg = PretrainConfig { policy, ..cfg };
        let mut t = Trainer::new(
            cfg,
            student,
            seqs,
            MaskVocab { mask_id: crate::tokenizers::MASK_ID, ordinary: 5..base as u32 },
            Some(ctx),
        )
        .unwrap();
        let batch = t.prepare().unwrap().unwrap();
        let BatchLabels::Latent(targets) = &batch.labels else { panic!("latent labels expected") };
        let mut row = 0;
        for (ids, ps) in batch.inputs.iter().zip(&batch.positions) {
            for &p in ps {
                let dist = targets.row(row);
                let argmax = (0..4).max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a))).unwrap();
                assert_eq!(aug.mask_index(ids[p]), Some(argmax));
                row += 1;
            }
        }
        t.run(None, None).unwrap();
        assert!(t.target_stats.count > 0);
        assert!(t.target_stats.max_sum_error <= 1e-6);
    }
}
