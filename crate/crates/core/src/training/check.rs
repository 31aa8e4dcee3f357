use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{batch_loss, BatchLabels, Objective, PreparedBatch};
use crate::error::Result;
use crate::mlsm::target_from_f64;
use crate::model::{Model, ModelConfig};
use crate::numerics::{grad_check, GradCheckOptions, GradCheckReport, Graph, ParamStore, Tensor, Var};

const VOCAB: usize = 12;
const LATENT_K: usize = 4;
const INIT_STD: f32 = 0.5;

/// Compares analytic and finite-difference gradients of one objective's
/// training loss on a built-in 2-layer, d = 8, 2-head encoder.
pub fn builtin_grad_check(objective: Objective, options: GradCheckOptions) -> Result<GradCheckReport> {
    let mut config = ModelConfig::tiny(VOCAB, objective.residual_mode());
    if objective == Objective::MlsmStudent {
        config.latent_k = LATENT_K;
    }
    let model = Model::init(config, options.seed, INIT_STD)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0x67_7261_64);
    let inputs: Vec<Vec<u32>> = (0..2)
        .map(|_| (0..6).map(|_| rng.random_range(4..VOCAB as u32)).collect())
        .collect();
    let positions = vec![vec![1, 4], vec![2]];
    let n: usize = positions.iter().map(Vec::len).sum();
    let labels = if objective == Objective::MlsmStudent {
        let mut flat = Vec::with_capacity(n * LATENT_K);
        for _ in 0..n {
            let code: Vec<f64> = (0..LATENT_K).map(|_| rng.random_range(0.0..1.0)).collect();
            flat.extend(target_from_f64(&code)?.distribution);
        }
        BatchLabels::Latent(Tensor::matrix(n, LATENT_K, flat)?)
    } else {
        BatchLabels::Tokens((0..n).map(|_| rng.random_range(5..VOCAB)).collect())
    };
    let batch = PreparedBatch { inputs, positions, labels };
    let forward = |p: &ParamStore, g: &mut Graph| -> Result<Var> {
        let m = Model { config, params: p.clone() };
        batch_loss(&m, g, &batch)
    };
    grad_check(&model.params, options, forward)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_objective_passes() {
        for obj in [Objective::MlmStandard, Objective::MlmElc, Objective::MlsmStudent] {
            let r = builtin_grad_check(obj, GradCheckOptions { max_per_param: 4, ..Default::default() }).unwrap();
            assert!(r.max_relative_error < 1e-3, "{obj}: {r:?}");
        }
    }
}
