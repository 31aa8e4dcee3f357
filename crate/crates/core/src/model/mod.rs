//! Post-LN transformer encoder with two residual topologies and four heads.
//!
//! Layer `i` (1-based) reads `x_i = Σ_{j<i} w_ij · h_j` where `h_0` is the
//! embedding output and `h_j` the output of layer `j`:
//!
//! * [`ResidualMode::Standard`]: `w_ij = 1/i`, every earlier output counts equally;
//! * [`ResidualMode::Elc`]: `w_i· = softmax(α_i·)` over the valid prefix of a
//!   learned `L × (L+1)` logit matrix (`elc.logits`), row `i-1` for layer `i`.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{softmax, Graph, ParamStore, Tensor, Var};

pub use checkpoint::{checkpoint_from_bytes, checkpoint_to_bytes};

pub const LN_EPS: f32 = 1e-5;
/// Raw logit given to the immediately preceding output when ELC weights are initialised.
pub const ELC_INIT_LOGIT: f32 = 4.0;
const MASK_PENALTY: f32 = -1e9;

pub const ELC_LOGITS: &str = "elc.logits";
pub const MLM_WEIGHT: &str = "heads.mlm.weight";
pub const MLM_BIAS: &str = "heads.mlm.bias";
pub const LATENT_WEIGHT: &str = "heads.latent.weight";
pub const LATENT_BIAS: &str = "heads.latent.bias";
pub const TOKEN_CLS_WEIGHT: &str = "heads.token_cls.weight";
pub const TOKEN_CLS_BIAS: &str = "heads.token_cls.bias";
pub const SEQ_CLS_WEIGHT: &str = "heads.seq_cls.weight";
pub const SEQ_CLS_BIAS: &str = "heads.seq_cls.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualMode {
    Standard,
    Elc,
}

/// Encoder geometry. `latent_k == 0` means the model carries a vocabulary
/// (MLM) head; otherwise it carries a `latent_k`-way latent head instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_hidden: usize,
    pub hidden_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub residual_mode: ResidualMode,
    pub latent_k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 12,
            num_heads: 4,
            ff_hidden: 1024,
            hidden_dim: 64,
            max_seq_len: 128,
            vocab_size: 8000,
            residual_mode: ResidualMode::Standard,
            latent_k: 0,
        }
    }
}

impl ModelConfig {
    /// 2 layers, d = 8, 2 heads: the size used for gradient checks.
    pub fn tiny(vocab_size: usize, residual_mode: ResidualMode) -> Self {
        ModelConfig {
            num_layers: 2,
            num_heads: 2,
            ff_hidden: 16,
            hidden_dim: 8,
            max_seq_len: 16,
            vocab_size,
            residual_mode,
            latent_k: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_heads == 0 || self.ff_hidden == 0 {
            return Err(Error::invalid("hidden_dim, num_heads and ff_hidden must be positive"));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::invalid(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::invalid("max_seq_len must be at least 2"));
        }
        if self.vocab_size == 0 {
            return Err(Error::invalid("vocab_size must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// Per-layer hidden states `h_0..h_L` recorded on a graph.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub hidden: Vec<Var>,
}

impl EncoderOutput {
    pub fn last(&self) -> Var {
        *self.hidden.last().expect("h_0 always present")
    }
}

fn layer_name(layer: usize, part: &str) -> String {
    format!("layers.{layer:02}.{part}")
}

/// Encoder parameters plus configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f32>,
}

impl Init {
    fn new(seed: u64, std: f32) -> Result<Self> {
        Ok(Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, std).map_err(|e| Error::invalid(format!("init std: {e}")))?,
        })
    }

    fn normal(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.normal.sample(&mut self.rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("positive dims")
    }
}

impl Model {
    /// Random initialisation: `N(0, init_std)` weights, zero biases, unit gains,
    /// ELC logits biased towards the preceding layer.
    pub fn init(config: ModelConfig, seed: u64, init_std: f32) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let mut init = Init::new(seed, init_std)?;
        let mut p = ParamStore::new();
        p.insert("embeddings.token", init.normal(&[config.vocab_size, d]))?;
        p.insert("embeddings.position", init.normal(&[config.max_seq_len, d]))?;
        p.insert("embeddings.norm.gain", Tensor::full(&[d], 1.0))?;
        p.insert("embeddings.norm.bias", Tensor::zeros(&[d]))?;
        for l in 0..config.num_layers {
            for proj in ["q", "k", "v", "o"] {
                p.insert(layer_name(l, &format!("attn.{proj}.weight")), init.normal(&[d, d]))?;
                p.insert(layer_name(l, &format!("attn.{proj}.bias")), Tensor::zeros(&[d]))?;
            }
            p.insert(layer_name(l, "attn.norm.gain"), Tensor::full(&[d], 1.0))?;
            p.insert(layer_name(l, "attn.norm.bias"), Tensor::zeros(&[d]))?;
            p.insert(layer_name(l, "ffn.in.weight"), init.normal(&[d, config.ff_hidden]))?;
            p.insert(layer_name(l, "ffn.in.bias"), Tensor::zeros(&[config.ff_hidden]))?;
            p.insert(layer_name(l, "ffn.out.weight"), init.normal(&[config.ff_hidden, d]))?;
            p.insert(layer_name(l, "ffn.out.bias"), Tensor::zeros(&[d]))?;
            p.insert(layer_name(l, "ffn.norm.gain"), Tensor::full(&[d], 1.0))?;
            p.insert(layer_name(l, "ffn.norm.bias"), Tensor::zeros(&[d]))?;
        }
        if config.residual_mode == ResidualMode::Elc && config.num_layers > 0 {
            let l = config.num_layers;
            let mut logits = Tensor::zeros(&[l, l + 1]);
            for r in 0..l {
                logits.data_mut()[r * (l + 1) + r] = ELC_INIT_LOGIT;
            }
            p.insert(ELC_LOGITS, logits)?;
        }
        if config.latent_k == 0 {
            p.insert(MLM_WEIGHT, init.normal(&[d, config.vocab_size]))?;
            p.insert(MLM_BIAS, Tensor::zeros(&[config.vocab_size]))?;
        } else {
            p.insert(LATENT_WEIGHT, init.normal(&[d, config.latent_k]))?;
            p.insert(LATENT_BIAS, Tensor::zeros(&[config.latent_k]))?;
        }
        Ok(Model { config, params: p })
    }

    /// (Re)initialises a token-classification head with `labels` outputs.
    pub fn add_token_cls_head(&mut self, labels: usize, seed: u64, init_std: f32) -> Result<()> {
        self.add_head(TOKEN_CLS_WEIGHT, TOKEN_CLS_BIAS, labels, seed, init_std)
    }

    /// (Re)initialises a sequence-classification head with `labels` outputs.
    pub fn add_seq_cls_head(&mut self, labels: usize, seed: u64, init_std: f32) -> Result<()> {
        self.add_head(SEQ_CLS_WEIGHT, SEQ_CLS_BIAS, labels, seed, init_std)
    }

    fn add_head(&mut self, w: &str, b: &str, labels: usize, seed: u64, init_std: f32) -> Result<()> {
        if labels < 2 {
            return Err(Error::invalid(format!("a classification head needs at least 2 labels, got {labels}")));
        }
        let mut init = Init::new(seed, init_std)?;
        self.params.set(w, init.normal(&[self.config.hidden_dim, labels]));
        self.params.set(b, Tensor::zeros(&[labels]));
        Ok(())
    }

    /// `h_0 = LayerNorm(token_embedding[ids] + position_embedding[0..len])`.
    pub fn embed(&self, g: &mut Graph, ids: &[u32]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::invalid("cannot embed an empty sequence"));
        }
        if ids.len() > self.config.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                ids.len(),
                self.config.max_seq_len
            )));
        }
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} >= vocab_size {}",
                self.config.vocab_size
            )));
        }
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok_table = g.param(&self.params, "embeddings.token")?;
        let pos_table = g.param(&self.params, "embeddings.position")?;
        let tok = g.gather(tok_table, &ids)?;
        let pos = g.gather(pos_table, &positions)?;
        let sum = g.add(tok, pos)?;
        let gain = g.param(&self.params, "embeddings.norm.gain")?;
        let bias = g.param(&self.params, "embeddings.norm.bias")?;
        g.layer_norm(sum, gain, bias, LN_EPS)
    }

    /// Combination weights layer `layer` (1-based) applies to `h_0..h_{layer-1}`.
    fn layer_input_weights(&self, g: &mut Graph, layer: usize) -> Result<Var> {
        match self.config.residual_mode {
            ResidualMode::Standard => {
                let w = 1.0 / layer as f32;
                Ok(g.constant(Tensor::row_vector(vec![w; layer])?))
            }
            ResidualMode::Elc => {
                let logits = g.param(&self.params, ELC_LOGITS)?;
                let row = g.row_prefix(logits, layer - 1, layer)?;
                Ok(g.softmax_rows(row))
            }
        }
    }

    fn linear(&self, g: &mut Graph, x: Var, weight: &str, bias: &str) -> Result<Var> {
        let w = g.param(&self.params, weight)?;
        let b = g.param(&self.params, bias)?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    fn attention(&self, g: &mut Graph, layer: usize, x: Var, key_mask: Option<&[f32]>) -> Result<Var> {
        let q = self.linear(g, x, &layer_name(layer, "attn.q.weight"), &layer_name(layer, "attn.q.bias"))?;
        let k = self.linear(g, x, &layer_name(layer, "attn.k.weight"), &layer_name(layer, "attn.k.bias"))?;
        let v = self.linear(g, x, &layer_name(layer, "attn.v.weight"), &layer_name(layer, "attn.v.bias"))?;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        let mut heads = Vec::with_capacity(self.config.num_heads);
        for h in 0..self.config.num_heads {
            let qh = g.slice_cols(q, h * hd, hd)?;
            let kh = g.slice_cols(k, h * hd, hd)?;
            let vh = g.slice_cols(v, h * hd, hd)?;
            let scores = g.matmul_nt(qh, kh)?;
            let mut scores = g.scale(scores, scale);
            if let Some(mask) = key_mask {
                scores = g.add_const_row(scores, mask)?;
            }
            let probs = g.softmax_rows(scores);
            heads.push(g.matmul(probs, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        self.linear(g, cat, &layer_name(layer, "attn.o.weight"), &layer_name(layer, "attn.o.bias"))
    }

    /// One post-LN block: `a = LN(x + Attn(x))`, `h = LN(a + FFN(a))`.
    fn block(&self, g: &mut Graph, layer: usize, x: Var, key_mask: Option<&[f32]>) -> Result<Var> {
        let attn = self.attention(g, layer, x, key_mask)?;
        let res = g.add(x, attn)?;
        let gain = g.param(&self.params, &layer_name(layer, "attn.norm.gain"))?;
        let bias = g.param(&self.params, &layer_name(layer, "attn.norm.bias"))?;
        let a = g.layer_norm(res, gain, bias, LN_EPS)?;
        let hidden = self.linear(g, a, &layer_name(layer, "ffn.in.weight"), &layer_name(layer, "ffn.in.bias"))?;
        let act = g.gelu(hidden);
        let out = self.linear(g, act, &layer_name(layer, "ffn.out.weight"), &layer_name(layer, "ffn.out.bias"))?;
        let res = g.add(a, out)?;
        let gain = g.param(&self.params, &layer_name(layer, "ffn.norm.gain"))?;
        let bias = g.param(&self.params, &layer_name(layer, "ffn.norm.bias"))?;
        g.layer_norm(res, gain, bias, LN_EPS)
    }

    /// Runs the encoder over one sequence. `attention_mask[j] == false` hides key `j`.
    pub fn encoder_forward(&self, g: &mut Graph, ids: &[u32], attention_mask: Option<&[bool]>) -> Result<EncoderOutput> {
        if let Some(m) = attention_mask {
            if m.len() != ids.len() {
                return Err(Error::shape(format!(
                    "attention mask has {} entries for {} tokens",
                    m.len(),
                    ids.len()
                )));
            }
        }
        let key_mask: Option<Vec<f32>> = attention_mask
            .filter(|m| m.iter().any(|&keep| !keep))
            .map(|m| m.iter().map(|&keep| if keep { 0.0 } else { MASK_PENALTY }).collect());

        let h0 = self.embed(g, ids)?;
        check_finite(g, h0, 0)?;
        let mut hidden = vec![h0];
        for layer in 1..=self.config.num_layers {
            let weights = self.layer_input_weights(g, layer)?;
            let x = elc_combine(g, &hidden, weights)?;
            let h = self.block(g, layer - 1, x, key_mask.as_deref())?;
            check_finite(g, h, layer)?;
            hidden.push(h);
        }
        Ok(EncoderOutput { hidden })
    }

    fn head_logits(&self, g: &mut Graph, h: Var, positions: &[usize], weight: &str, bias: &str) -> Result<Var> {
        if positions.is_empty() {
            return Err(Error::invalid("no positions given to the head"));
        }
        let rows = g.select_rows(h, positions)?;
        self.linear(g, rows, weight, bias)
    }

    /// Vocabulary logits `[positions × vocab_size]`.
    pub fn mlm_logits(&self, g: &mut Graph, h_last: Var, positions: &[usize]) -> Result<Var> {
        self.head_logits(g, h_last, positions, MLM_WEIGHT, MLM_BIAS)
    }

    /// Latent-category logits `[positions × k]`; `expected_k` must match the head.
    pub fn latent_logits(&self, g: &mut Graph, h_last: Var, positions: &[usize], expected_k: usize) -> Result<Var> {
        if self.config.latent_k == 0 || self.config.latent_k != expected_k {
            return Err(Error::invalid(format!(
                "latent head has k = {}, dictionary has k = {expected_k}",
                self.config.latent_k
            )));
        }
        self.head_logits(g, h_last, positions, LATENT_WEIGHT, LATENT_BIAS)
    }

    /// Latent distributions (rows sum to one).
    pub fn latent_head(&self, g: &mut Graph, h_last: Var, positions: &[usize], expected_k: usize) -> Result<Var> {
        let logits = self.latent_logits(g, h_last, positions, expected_k)?;
        Ok(g.softmax_rows(logits))
    }

    /// Per-token label logits `[seq_len × labels]`.
    pub fn token_cls_logits(&self, g: &mut Graph, h_last: Var) -> Result<Var> {
        self.linear(g, h_last, TOKEN_CLS_WEIGHT, TOKEN_CLS_BIAS)
    }

    /// Sequence label logits `[1 × labels]` from the first position.
    pub fn seq_cls_logits(&self, g: &mut Graph, h_last: Var) -> Result<Var> {
        let first = g.select_rows(h_last, &[0])?;
        self.linear(g, first, SEQ_CLS_WEIGHT, SEQ_CLS_BIAS)
    }

    /// Effective ELC weights, one row per layer, row `i` covering outputs `0..=i`.
    pub fn layer_weights(&self) -> Result<Vec<Vec<f64>>> {
        if self.config.residual_mode != ResidualMode::Elc {
            return Err(Error::NoLayerWeights);
        }
        let l = self.config.num_layers;
        if l == 0 {
            return Ok(Vec::new());
        }
        let logits = self.params.get(ELC_LOGITS)?;
        (0..l)
            .map(|r| {
                let row = &logits.row(r)[..=r];
                effective_weights_f64(row)
            })
            .collect()
    }

    /// Sets every valid ELC logit to zero, so each layer averages its inputs
    /// exactly as the standard residual stream does.
    pub fn set_equal_layer_weights(&mut self) -> Result<()> {
        if self.config.residual_mode != ResidualMode::Elc {
            return Err(Error::NoLayerWeights);
        }
        if self.config.num_layers == 0 {
            return Ok(());
        }
        let logits = self.params.get_mut(ELC_LOGITS)?;
        logits.data_mut().fill(0.0);
        Ok(())
    }
}

fn effective_weights_f64(row: &[f32]) -> Result<Vec<f64>> {
    if row.is_empty() {
        return Err(Error::EmptyLogits);
    }
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = row.iter().map(|&z| (z as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Softmax over the valid prefix of a raw ELC logit row.
pub fn effective_weights(raw_row: &[f32], valid: usize) -> Result<Vec<f32>> {
    if valid > raw_row.len() {
        return Err(Error::shape(format!("{valid} valid entries in a row of {}", raw_row.len())));
    }
    softmax(&raw_row[..valid])
}

/// `x = Σ_j weights[j] · outputs[j]` for a `[1, n]` weight row.
pub fn elc_combine(g: &mut Graph, outputs: &[Var], weights: Var) -> Result<Var> {
    if g.value(weights).len() != outputs.len() {
        return Err(Error::shape(format!(
            "{} combination weights for {} outputs",
            g.value(weights).len(),
            outputs.len()
        )));
    }
    if outputs.len() == 1 && g.value(weights).item() == 1.0 {
        return Ok(outputs[0]);
    }
    g.weighted_sum(outputs, weights)
}

fn check_finite(g: &Graph, v: Var, layer: usize) -> Result<()> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("hidden state of layer {layer}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckOptions};

    fn tiny(mode: ResidualMode) -> Model {
        Model::init(ModelConfig::tiny(11, mode), 7, 0.5).unwrap()
    }

    #[test]
    fn embedding_is_pure_and_finite() {
        let m = tiny(ResidualMode::Standard);
        let mut g = Graph::new();
        let a = m.embed(&mut g, &[0]).unwrap();
        let b = m.embed(&mut g, &[0]).unwrap();
        assert!(g.value(a).all_finite());
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn permuting_tokens_permutes_token_part() {
        // with the position table zeroed, h_0 rows follow their tokens
        let mut m = tiny(ResidualMode::Standard);
        m.params.get_mut("embeddings.position").unwrap().data_mut().fill(0.0);
        let mut g = Graph::new();
        let a = m.embed(&mut g, &[3, 5, 9]).unwrap();
        let b = m.embed(&mut g, &[9, 3, 5]).unwrap();
        assert_eq!(g.value(a).row(0), g.value(b).row(1));
        assert_eq!(g.value(a).row(2), g.value(b).row(0));
    }

    #[test]
    fn overlength_and_bad_ids_rejected() {
        let m = tiny(ResidualMode::Standard);
        let mut g = Graph::new();
        assert!(m.embed(&mut g, &[1; 17]).is_err());
        assert!(m.embed(&mut g, &[11]).is_err());
    }

    #[test]
    fn combine_examples() {
        let mut g = Graph::new();
        let hs: Vec<Var> = (0..4)
            .map(|i| g.constant(Tensor::matrix(1, 2, vec![i as f32, 10.0 * i as f32]).unwrap()))
            .collect();
        let one = g.constant(Tensor::row_vector(vec![1.0]).unwrap());
        let x = elc_combine(&mut g, &hs[..1], one).unwrap();
        assert_eq!(g.value(x), g.value(hs[0]));
        let half = g.constant(Tensor::row_vector(vec![0.5, 0.5]).unwrap());
        let x = elc_combine(&mut g, &hs[..2], half).unwrap();
        assert_eq!(g.value(x).data(), &[0.5, 5.0]);
        let hot = g.constant(Tensor::row_vector(vec![0.0, 0.0, 0.0, 1.0]).unwrap());
        let x = elc_combine(&mut g, &hs, hot).unwrap();
        assert_eq!(g.value(x), g.value(hs[3]));
        assert!(elc_combine(&mut g, &hs[..3], half).is_err());
    }

    #[test]
    fn zero_layers_yields_only_embedding() {
        let mut cfg = ModelConfig::tiny(5, ResidualMode::Elc);
        cfg.num_layers = 0;
        let m = Model::init(cfg, 1, 0.1).unwrap();
        let mut g = Graph::new();
        let out = m.encoder_forward(&mut g, &[1, 2], None).unwrap();
        assert_eq!(out.hidden.len(), 1);
        assert!(m.layer_weights().unwrap().is_empty());
    }

    #[test]
    fn equal_weight_elc_matches_standard() {
        let standard = tiny(ResidualMode::Standard);
        let mut elc = Model::init(ModelConfig::tiny(11, ResidualMode::Elc), 7, 0.5).unwrap();
        elc.set_equal_layer_weights().unwrap();
        let ids = [1u32, 4, 7, 2, 9];
        let mut g1 = Graph::new();
        let a = standard.encoder_forward(&mut g1, &ids, None).unwrap();
        let mut g2 = Graph::new();
        let b = elc.encoder_forward(&mut g2, &ids, None).unwrap();
        for (x, y) in a.hidden.iter().zip(&b.hidden) {
            for (u, v) in g1.value(*x).data().iter().zip(g2.value(*y).data()) {
                assert!((u - v).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn padding_beyond_mask_is_invisible() {
        for mode in [ResidualMode::Standard, ResidualMode::Elc] {
            let m = tiny(mode);
            let short = [3u32, 1, 4, 1];
            let padded = [3u32, 1, 4, 1, 0, 0, 0];
            let mask = [true, true, true, true, false, false, false];
            let mut g1 = Graph::new();
            let a = m.encoder_forward(&mut g1, &short, None).unwrap();
            let mut g2 = Graph::new();
            let b = m.encoder_forward(&mut g2, &padded, Some(&mask)).unwrap();
            let (ta, tb) = (g1.value(a.last()), g2.value(b.last()));
            for r in 0..4 {
                for (u, v) in ta.row(r).iter().zip(tb.row(r)) {
                    assert!((u - v).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn fresh_elc_weights_favour_previous_layer() {
        let mut cfg = ModelConfig::tiny(11, ResidualMode::Elc);
        cfg.num_layers = 5;
        let m = Model::init(cfg, 3, 0.1).unwrap();
        let w = m.layer_weights().unwrap();
        assert_eq!(w.len(), 5);
        for (i, row) in w.iter().enumerate() {
            assert_eq!(row.len(), i + 1);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, i);
        }
        assert!(matches!(tiny(ResidualMode::Standard).layer_weights(), Err(Error::NoLayerWeights)));
    }

    #[test]
    fn identity_mlm_head_selects_row() {
        let mut cfg = ModelConfig::tiny(8, ResidualMode::Standard);
        cfg.num_layers = 0;
        let mut m = Model::init(cfg, 0, 0.1).unwrap();
        let mut eye = vec![0.0; 64];
        for i in 0..8 {
            eye[i * 8 + i] = 1.0;
        }
        *m.params.get_mut(MLM_WEIGHT).unwrap() = Tensor::matrix(8, 8, eye).unwrap();
        let mut g = Graph::new();
        let mut onehot = vec![0.0; 16];
        onehot[8 + 5] = 1.0;
        let h = g.constant(Tensor::matrix(2, 8, onehot).unwrap());
        let logits = m.mlm_logits(&mut g, h, &[1]).unwrap();
        assert_eq!(g.value(logits).shape(), &[1, 8]);
        let row = g.value(logits).row(0);
        assert_eq!(row[5], 1.0);
        assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), 7);
        assert!(m.mlm_logits(&mut g, h, &[]).is_err());
    }

    #[test]
    fn latent_head_rows_are_distributions() {
        let mut cfg = ModelConfig::tiny(11, ResidualMode::Standard);
        cfg.latent_k = 6;
        let m = Model::init(cfg, 2, 0.5).unwrap();
        let mut g = Graph::new();
        let out = m.encoder_forward(&mut g, &[1, 2, 3], None).unwrap();
        let p = m.latent_head(&mut g, out.last(), &[0, 2], 6).unwrap();
        for r in 0..2 {
            assert!((g.value(p).row(r).iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(m.latent_head(&mut g, out.last(), &[0], 5).is_err());

        let mut zero = m.clone();
        zero.params.get_mut(LATENT_WEIGHT).unwrap().data_mut().fill(0.0);
        let mut g = Graph::new();
        let out = zero.encoder_forward(&mut g, &[1, 2, 3], None).unwrap();
        let p = zero.latent_head(&mut g, out.last(), &[1], 6).unwrap();
        assert!(g.value(p).data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-7));
    }

    #[test]
    fn classification_heads_on_zero_hidden_give_bias() {
        let mut m = tiny(ResidualMode::Standard);
        m.add_token_cls_head(2, 1, 0.5).unwrap();
        m.add_seq_cls_head(3, 1, 0.5).unwrap();
        m.params.get_mut(TOKEN_CLS_BIAS).unwrap().data_mut().copy_from_slice(&[0.25, -1.5]);
        let mut g = Graph::new();
        let h = g.constant(Tensor::zeros(&[4, 8]));
        let t = m.token_cls_logits(&mut g, h).unwrap();
        assert_eq!(g.value(t).shape(), &[4, 2]);
        assert_eq!(g.value(t).row(3), &[0.25, -1.5]);
        let s = m.seq_cls_logits(&mut g, h).unwrap();
        assert_eq!(g.value(s).shape(), &[1, 3]);
        assert!(m.add_token_cls_head(1, 0, 0.1).is_err());
    }

    #[test]
    fn argmax_of_weights_ignores_row_shift() {
        let row = [0.3f32, -1.2, 2.2, 0.9];
        let shifted: Vec<f32> = row.iter().map(|v| v + 17.5).collect();
        let a = effective_weights(&row, 4).unwrap();
        let b = effective_weights(&shifted, 4).unwrap();
        let argmax = |v: &[f32]| v.iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).unwrap().0;
        assert_eq!(argmax(&a), argmax(&b));
    }

    #[test]
    fn heads_pass_gradient_check() {
        let mut m = tiny(ResidualMode::Elc);
        m.add_token_cls_head(3, 5, 0.5).unwrap();
        m.add_seq_cls_head(2, 6, 0.5).unwrap();
        let ids = [1u32, 5, 2, 8];
        let forward = |p: &ParamStore, g: &mut Graph| -> Result<Var> {
            let model = Model { config: m.config, params: p.clone() };
            let out = model.encoder_forward(g, &ids, None)?;
            let mlm = model.mlm_logits(g, out.last(), &[1, 3])?;
            let l1 = g.cross_entropy(mlm, &[4, 7])?;
            let tok = model.token_cls_logits(g, out.last())?;
            let l2 = g.cross_entropy(tok, &[0, 2, 1, 1])?;
            let seq = model.seq_cls_logits(g, out.last())?;
            let l3 = g.cross_entropy(seq, &[1])?;
            let s = g.add(l1, l2)?;
            g.add(s, l3)
        };
        let report = grad_check(&m.params, GradCheckOptions { max_per_param: 6, ..Default::default() }, forward).unwrap();
        assert!(report.max_relative_error < 1e-3, "{report:?}");
    }
}
