//! Latent semantic targets: teacher hidden states, a sparse dictionary over
//! them, non-negative sparse codes and the distributions derived from codes.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{read_bytes, write_atomic, ByteReader, ByteWriter};
use crate::model::Model;
use crate::numerics::Graph;
use crate::tokenizers::SPECIAL_TOKENS;

pub const DEFAULT_LAMBDA: f64 = 0.05;
pub const ENCODE_TOLERANCE: f64 = 1e-6;
pub const MAX_SWEEPS: usize = 2000;
const TARGET_LOG_FLOOR: f64 = 1e-12;

/// `k` unit-norm atoms of dimension `d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticDictionary {
    pub atoms: Vec<f32>,
    pub k: usize,
    pub d: usize,
    pub lambda: f64,
    pub teacher_layer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    pub coefficients: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentTarget {
    pub distribution: Vec<f32>,
}

impl LatentTarget {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.distribution.iter().enumerate() {
            if p > self.distribution[best] {
                best = i;
            }
        }
        best
    }

    pub fn sum(&self) -> f64 {
        self.distribution.iter().map(|&p| p as f64).sum()
    }
}

impl SemanticDictionary {
    pub fn new(atoms: Vec<f32>, k: usize, d: usize, lambda: f64, teacher_layer: usize) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::invalid("dictionary needs k > 0 and d > 0"));
        }
        if atoms.len() != k * d {
            return Err(Error::shape(format!("{} atom values for k={k}, d={d}", atoms.len())));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be finite and non-negative, got {lambda}")));
        }
        for (j, atom) in atoms.chunks(d).enumerate() {
            let norm = atom.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-4 {
                return Err(Error::invalid(format!("atom {j} has norm {norm}")));
            }
        }
        Ok(SemanticDictionary { atoms, k, d, lambda, teacher_layer })
    }

    pub fn atom(&self, j: usize) -> &[f32] {
        &self.atoms[j * self.d..(j + 1) * self.d]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(b"DICT v1\n");
        w.u64(self.k as u64);
        w.u64(self.d as u64);
        w.u64(self.teacher_layer as u64);
        w.f64(self.lambda);
        w.f32s(&self.atoms);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "dictionary");
        r.expect(b"DICT v1\n")?;
        let k = r.usize()?;
        let d = r.usize()?;
        let teacher_layer = r.usize()?;
        let lambda = r.f64()?;
        let n = k.checked_mul(d).ok_or_else(|| r.err("k * d overflows"))?;
        let atoms = r.f32s(n)?;
        r.finish()?;
        SemanticDictionary::new(atoms, k, d, lambda, teacher_layer).map_err(|e| r.err(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?)
    }
}

/// Scales `v` to unit L2 norm; an all-zero vector is left unchanged.
pub fn l2_normalize(v: &mut [f32]) {
    let norm = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x = (*x as f64 / norm) as f32);
    }
}

/// Samples up to `max_rows` teacher hidden vectors from `layer` (0 is the
/// embedding output) at non-special positions of `sequences`.
pub fn collect_hidden(
    teacher: &Model,
    sequences: &[Vec<u32>],
    layer: usize,
    max_rows: usize,
    seed: u64,
) -> Result<Vec<Vec<f32>>> {
    if layer > teacher.config.num_layers {
        return Err(Error::invalid(format!(
            "teacher layer {layer} out of range 0..={}",
            teacher.config.num_layers
        )));
    }
    let mut candidates: Vec<(usize, usize)> = sequences
        .iter()
        .enumerate()
        .flat_map(|(s, ids)| {
            ids.iter()
                .enumerate()
                .filter(|(_, &id)| id as usize >= SPECIAL_TOKENS.len())
                .map(move |(p, _)| (s, p))
        })
        .collect();
    candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    candidates.truncate(max_rows);
    candidates.sort_unstable();

    let mut by_sequence: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (s, p) in candidates {
        by_sequence.entry(s).or_default().push(p);
    }
    let groups: Vec<(usize, Vec<usize>)> = by_sequence.into_iter().collect();
    let rows: Vec<Vec<Vec<f32>>> = groups
        .par_iter()
        .map(|(s, positions)| {
            let mut g = Graph::new();
            let out = teacher.encoder_forward(&mut g, &sequences[*s], None)?;
            let h = g.value(out.hidden[layer]);
            Ok(positions.iter().map(|&p| h.row(p).to_vec()).collect())
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().flatten().collect())
}

/// Cyclic coordinate descent for `min_{c ≥ 0} ½‖x − Dᵀc‖² + λ‖c‖₁`, with the
/// Gram matrix `D Dᵀ` computed once per dictionary.
pub struct SparseEncoder {
    atoms: Vec<f64>,
    gram: Vec<f64>,
    k: usize,
    d: usize,
    lambda: f64,
}

impl SparseEncoder {
    pub fn new(dict: &SemanticDictionary) -> Self {
        let atoms: Vec<f64> = dict.atoms.iter().map(|&v| v as f64).collect();
        Self::from_f64(atoms, dict.k, dict.d, dict.lambda)
    }

    fn from_f64(atoms: Vec<f64>, k: usize, d: usize, lambda: f64) -> Self {
        let mut gram = vec![0.0; k * k];
        for i in 0..k {
            for j in i..k {
                let v: f64 = (0..d).map(|t| atoms[i * d + t] * atoms[j * d + t]).sum();
                gram[i * k + j] = v;
                gram[j * k + i] = v;
            }
        }
        SparseEncoder { atoms, gram, k, d, lambda }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Encodes `x`, starting from `warm` when given.
    pub fn encode(&self, x: &[f32], warm: Option<&[f64]>) -> Result<Vec<f64>> {
        if x.len() != self.d {
            return Err(Error::shape(format!("vector of length {} for d={}", x.len(), self.d)));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("input to sparse_encode".into()));
        }
        let x: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        Ok(self.encode_f64(&x, warm))
    }

    fn encode_f64(&self, x: &[f64], warm: Option<&[f64]>) -> Vec<f64> {
        let (k, d) = (self.k, self.d);
        let corr: Vec<f64> = (0..k)
            .map(|j| (0..d).map(|t| self.atoms[j * d + t] * x[t]).sum())
            .collect();
        let mut c = match warm {
            Some(w) => w.iter().map(|&v| v.max(0.0)).collect(),
            None => vec![0.0; k],
        };
        // gc = G c, kept current as coordinates move
        let mut gc = vec![0.0; k];
        for (j, &cj) in c.iter().enumerate() {
            if cj != 0.0 {
                for i in 0..k {
                    gc[i] += self.gram[i * k + j] * cj;
                }
            }
        }
        for _ in 0..MAX_SWEEPS {
            let mut max_delta = 0.0f64;
            for j in 0..k {
                let gjj = self.gram[j * k + j];
                if gjj <= 0.0 {
                    continue;
                }
                let new = (c[j] + (corr[j] - gc[j] - self.lambda) / gjj).max(0.0);
                let delta = new - c[j];
                if delta != 0.0 {
                    for i in 0..k {
                        gc[i] += self.gram[i * k + j] * delta;
                    }
                    c[j] = new;
                    max_delta = max_delta.max(delta.abs());
                }
            }
            if max_delta < ENCODE_TOLERANCE {
                break;
            }
        }
        c
    }

    /// `½‖x − Dᵀc‖² + λ‖c‖₁`.
    pub fn objective(&self, x: &[f32], c: &[f64]) -> f64 {
        let x: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        self.objective_f64(&x, c)
    }

    fn objective_f64(&self, x: &[f64], c: &[f64]) -> f64 {
        let d = self.d;
        let mut resid = x.to_vec();
        for (j, &cj) in c.iter().enumerate() {
            if cj != 0.0 {
                for t in 0..d {
                    resid[t] -= cj * self.atoms[j * d + t];
                }
            }
        }
        0.5 * resid.iter().map(|r| r * r).sum::<f64>() + self.lambda * c.iter().map(|v| v.abs()).sum::<f64>()
    }
}

/// Non-negative sparse code of `x` against `dict`.
pub fn sparse_encode(x: &[f32], dict: &SemanticDictionary) -> Result<SparseCode> {
    let c = SparseEncoder::new(dict).encode(x, None)?;
    Ok(SparseCode { coefficients: c.into_iter().map(|v| v as f32).collect() })
}

/// `c / Σc`, or uniform when every coefficient is zero.
pub fn target_distribution(code: &SparseCode) -> Result<LatentTarget> {
    target_from_f64(&code.coefficients.iter().map(|&v| v as f64).collect::<Vec<_>>())
}

pub(crate) fn target_from_f64(c: &[f64]) -> Result<LatentTarget> {
    if c.is_empty() {
        return Err(Error::invalid("empty sparse code"));
    }
    if let Some((j, v)) = c.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::invalid(format!("coefficient {j} is {v}; codes must be non-negative")));
    }
    let total: f64 = c.iter().sum();
    let distribution = if total > 0.0 {
        c.iter().map(|&v| (v / total) as f32).collect()
    } else {
        vec![(1.0 / c.len() as f64) as f32; c.len()]
    };
    Ok(LatentTarget { distribution })
}

/// Cross-entropy `−Σ target · ln(pred + 1e-12)`.
pub fn mlsm_loss(pred: &LatentTarget, target: &LatentTarget) -> Result<f64> {
    if pred.distribution.len() != target.distribution.len() {
        return Err(Error::shape(format!(
            "prediction has {} categories, target has {}",
            pred.distribution.len(),
            target.distribution.len()
        )));
    }
    Ok(-pred
        .distribution
        .iter()
        .zip(&target.distribution)
        .map(|(&p, &t)| t as f64 * (p as f64 + TARGET_LOG_FLOOR).ln())
        .sum::<f64>())
}

/// Sparsity of the codes a dictionary assigns to a sample of hidden vectors.
/// `mean_target_entropy` is the floor of the student's expected loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodeStats {
    pub rows: usize,
    pub mean_nonzeros: f64,
    pub zero_codes: usize,
    pub mean_target_entropy: f64,
}

pub fn code_stats(hiddens: &[Vec<f32>], dict: &SemanticDictionary) -> Result<CodeStats> {
    if hiddens.is_empty() {
        return Err(Error::invalid("no hidden vectors"));
    }
    let encoder = SparseEncoder::new(dict);
    let per_row = hiddens
        .par_iter()
        .map(|x| {
            let c = encoder.encode(x, None)?;
            let nnz = c.iter().filter(|&&v| v > 0.0).count();
            let t = target_from_f64(&c)?;
            let h: f64 = t.distribution.iter().filter(|&&p| p > 0.0).map(|&p| -(p as f64) * (p as f64).ln()).sum();
            Ok((nnz, h))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_row.len() as f64;
    Ok(CodeStats {
        rows: per_row.len(),
        mean_nonzeros: per_row.iter().map(|r| r.0 as f64).sum::<f64>() / n,
        zero_codes: per_row.iter().filter(|r| r.0 == 0).count(),
        mean_target_entropy: per_row.iter().map(|r| r.1).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DictLearnOptions {
    pub k: usize,
    pub lambda: f64,
    pub iterations: usize,
    pub seed: u64,
    pub teacher_layer: usize,
}

#[derive(Debug, Clone)]
pub struct DictLearnReport {
    pub dictionary: SemanticDictionary,
    /// Objective after each iteration.
    pub objective: Vec<f64>,
}

/// Alternates a warm-started encode of every row with a per-atom update on
/// the unit sphere, `d_j ∝ Σ_i c_ij (x_i − Σ_{l≠j} c_il d_l)`. Both steps
/// minimise their block exactly or by descent, so the objective never rises.
pub fn dict_learn(hiddens: &[Vec<f32>], options: DictLearnOptions) -> Result<DictLearnReport> {
    let DictLearnOptions { k, lambda, iterations, seed, teacher_layer } = options;
    if hiddens.is_empty() {
        return Err(Error::invalid("no hidden vectors to learn a dictionary from"));
    }
    if k == 0 || iterations == 0 {
        return Err(Error::invalid("dict_learn needs k >= 1 and iterations >= 1"));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    let d = hiddens[0].len();
    if d == 0 || hiddens.iter().any(|h| h.len() != d) {
        return Err(Error::shape("hidden vectors must share a positive dimension"));
    }
    if hiddens.iter().any(|h| !h.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite("hidden vector".into()));
    }
    let xs: Vec<Vec<f64>> = hiddens.iter().map(|h| h.iter().map(|&v| v as f64).collect()).collect();
    let n = xs.len();
    let mut atoms = init_atoms(&xs, k, d, seed);
    let mut codes: Vec<Vec<f64>> = vec![vec![0.0; k]; n];
    let mut history = Vec::with_capacity(iterations);

    for _ in 0..iterations {
        let enc = SparseEncoder::from_f64(atoms.clone(), k, d, lambda);
        codes = xs
            .par_iter()
            .zip(codes.par_iter())
            .map(|(x, warm)| enc.encode_f64(x, Some(warm)))
            .collect();

        // residuals e_i = x_i − Dᵀc_i
        let mut resid: Vec<Vec<f64>> = xs
            .iter()
            .zip(&codes)
            .map(|(x, c)| {
                let mut e = x.clone();
                for (j, &cj) in c.iter().enumerate() {
                    if cj != 0.0 {
                        for t in 0..d {
                            e[t] -= cj * atoms[j * d + t];
                        }
                    }
                }
                e
            })
            .collect();
        let mut users: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, c) in codes.iter().enumerate() {
            for (j, &cj) in c.iter().enumerate() {
                if cj != 0.0 {
                    users[j].push(i);
                }
            }
        }
        for j in 0..k {
            if users[j].is_empty() {
                continue;
            }
            let old: Vec<f64> = atoms[j * d..(j + 1) * d].to_vec();
            let c_sq: f64 = users[j].iter().map(|&i| codes[i][j].powi(2)).sum();
            let mut u: Vec<f64> = old.iter().map(|&v| v * c_sq).collect();
            for &i in &users[j] {
                let cij = codes[i][j];
                for t in 0..d {
                    u[t] += cij * resid[i][t];
                }
            }
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 1e-12) {
                continue;
            }
            let new: Vec<f64> = u.iter().map(|v| v / norm).collect();
            for &i in &users[j] {
                let cij = codes[i][j];
                for t in 0..d {
                    resid[i][t] += cij * (old[t] - new[t]);
                }
            }
            atoms[j * d..(j + 1) * d].copy_from_slice(&new);
        }
        let l1: f64 = codes.iter().flatten().sum();
        let sq: f64 = resid.iter().flatten().map(|v| v * v).sum();
        history.push(0.5 * sq + lambda * l1);
    }

    let atoms32: Vec<f32> = atoms
        .chunks(d)
        .flat_map(|a| {
            let mut a32: Vec<f32> = a.iter().map(|&v| v as f32).collect();
            l2_normalize(&mut a32);
            a32
        })
        .collect();
    Ok(DictLearnReport {
        dictionary: SemanticDictionary::new(atoms32, k, d, lambda, teacher_layer)?,
        objective: history,
    })
}

/// Farthest-point selection over normalised data rows; atoms beyond the
/// number of usable rows are random unit vectors.
fn init_atoms(xs: &[Vec<f64>], k: usize, d: usize, seed: u64) -> Vec<f64> {
    let unit: Vec<Vec<f64>> = xs
        .iter()
        .filter_map(|x| {
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            (norm > 1e-12).then(|| x.iter().map(|v| v / norm).collect())
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut atoms = Vec::with_capacity(k * d);
    if !unit.is_empty() {
        let first = {
            let mut idx: Vec<usize> = (0..unit.len()).collect();
            idx.shuffle(&mut rng);
            idx[0]
        };
        // similarity to the closest chosen atom; pick the least similar next
        let mut nearest = vec![f64::NEG_INFINITY; unit.len()];
        let mut chosen = first;
        for _ in 0..k.min(unit.len()) {
            atoms.extend_from_slice(&unit[chosen]);
            for (i, u) in unit.iter().enumerate() {
                let s: f64 = u.iter().zip(&unit[chosen]).map(|(a, b)| a * b).sum();
                nearest[i] = nearest[i].max(s);
            }
            chosen = (0..unit.len())
                .min_by(|&a, &b| nearest[a].total_cmp(&nearest[b]))
                .expect("non-empty");
        }
    }
    while atoms.len() < k * d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        atoms.extend(v);
    }
    atoms
}
