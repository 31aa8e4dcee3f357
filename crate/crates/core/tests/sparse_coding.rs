use babylm_core::mlsm::{
    dict_learn, l2_normalize, sparse_encode, target_distribution, DictLearnOptions, SemanticDictionary,
    SparseEncoder,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_rows(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Vec<f32> {
    let mut atoms = Vec::with_capacity(k * d);
    for _ in 0..k {
        let mut row: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        l2_normalize(&mut row);
        atoms.extend(row);
    }
    atoms
}

/// Projected gradient descent with a 1/L step, run to a tight fixed point.
fn projected_gradient(atoms: &[f32], k: usize, d: usize, x: &[f32], lambda: f64) -> Vec<f64> {
    let a: Vec<f64> = atoms.iter().map(|&v| v as f64).collect();
    let gram: Vec<f64> = (0..k * k)
        .map(|ij| (0..d).map(|t| a[(ij / k) * d + t] * a[(ij % k) * d + t]).sum())
        .collect();
    let corr: Vec<f64> = (0..k).map(|j| (0..d).map(|t| a[j * d + t] * x[t] as f64).sum()).collect();
    // power iteration for the largest eigenvalue of the Gram matrix
    let mut v = vec![1.0; k];
    let mut lip = 1.0;
    for _ in 0..200 {
        let w: Vec<f64> = (0..k).map(|i| (0..k).map(|j| gram[i * k + j] * v[j]).sum()).collect();
        lip = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w.iter().map(|x| x / lip).collect();
    }
    let step = 1.0 / (lip * 1.01);
    let mut c = vec![0.0; k];
    for _ in 0..50_000 {
        let grad: Vec<f64> = (0..k)
            .map(|i| (0..k).map(|j| gram[i * k + j] * c[j]).sum::<f64>() - corr[i] + lambda)
            .collect();
        let mut moved = 0.0f64;
        for i in 0..k {
            let next = (c[i] - step * grad[i]).max(0.0);
            moved = moved.max((next - c[i]).abs());
            c[i] = next;
        }
        if moved < 1e-13 {
            break;
        }
    }
    c
}

#[test]
fn coordinate_descent_matches_projected_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (k, d) = (5, 8);
    for case in 0..200 {
        let lambda = [0.0, 0.05, 0.5][case % 3];
        let atoms = unit_rows(&mut rng, k, d);
        let x: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dict = SemanticDictionary::new(atoms.clone(), k, d, lambda, 0).unwrap();
        let enc = SparseEncoder::new(&dict);
        let cd = enc.encode(&x, None).unwrap();
        let pg = projected_gradient(&atoms, k, d, &x, lambda);
        let (f_cd, f_pg) = (enc.objective(&x, &cd), enc.objective(&x, &pg));
        assert!((f_cd - f_pg).abs() < 1e-4, "case {case}: cd {f_cd} vs oracle {f_pg}");
        assert!(cd.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn single_orthonormal_atom_closed_form() {
    let atom = [0.6f32, 0.0, 0.8, 0.0];
    let x: Vec<f32> = atom.iter().map(|v| 0.8 * v).collect();
    let dict = SemanticDictionary::new(atom.to_vec(), 1, 4, 0.05, 0).unwrap();
    let c = sparse_encode(&x, &dict).unwrap();
    assert!((c.coefficients[0] as f64 - 0.75).abs() < 1e-6);
}

#[test]
fn dictionary_learning_recovers_generating_atoms() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (k, d) = (8, 16);
    let truth = unit_rows(&mut rng, k, d);
    let xs: Vec<Vec<f32>> = (0..400)
        .map(|i| {
            let j = i % k;
            let scale = rng.random_range(0.5..1.5f32);
            let mut x: Vec<f32> = truth[j * d..(j + 1) * d].iter().map(|v| v * scale).collect();
            x.iter_mut().for_each(|v| *v += rng.random_range(-0.02..0.02f32));
            x
        })
        .collect();
    let report = dict_learn(&xs, DictLearnOptions { k, lambda: 0.0, iterations: 15, seed: 1, teacher_layer: 0 }).unwrap();
    for w in report.objective.windows(2) {
        assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0), "objective rose: {w:?}");
    }
    for j in 0..k {
        let t = &truth[j * d..(j + 1) * d];
        let best = (0..k)
            .map(|l| {
                let a = report.dictionary.atom(l);
                let cos: f64 = a.iter().zip(t).map(|(&u, &v)| u as f64 * v as f64).sum();
                cos.abs().min(1.0).acos().to_degrees()
            })
            .fold(f64::INFINITY, f64::min);
        assert!(best < 5.0, "atom {j} recovered only to {best} degrees");
    }
}

fn instance() -> impl Strategy<Value = (Vec<f32>, Vec<f32>, u64)> {
    (any::<u64>(), 1usize..6, 2usize..9).prop_map(|(seed, k, d)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let atoms = unit_rows(&mut rng, k, d);
        let x: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        (atoms, x, (k as u64) << 32 | d as u64)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn l1_norm_shrinks_along_the_path((atoms, x, kd) in instance()) {
        let (k, d) = ((kd >> 32) as usize, (kd & 0xffff_ffff) as usize);
        let mut previous = f64::INFINITY;
        for step in 0..=20 {
            let lambda = step as f64 * 0.05;
            let dict = SemanticDictionary::new(atoms.clone(), k, d, lambda, 0).unwrap();
            let c = SparseEncoder::new(&dict).encode(&x, None).unwrap();
            let l1: f64 = c.iter().sum();
            prop_assert!(l1 <= previous + 1e-8, "lambda {lambda}: {l1} > {previous}");
            previous = l1;
        }
    }

    #[test]
    fn lambda_above_max_correlation_gives_zero((atoms, x, kd) in instance(), slack in 0.0f64..1.0) {
        let (k, d) = ((kd >> 32) as usize, (kd & 0xffff_ffff) as usize);
        let max_corr = (0..k)
            .map(|j| (0..d).map(|t| atoms[j * d + t] as f64 * x[t] as f64).sum::<f64>())
            .fold(0.0f64, f64::max);
        let dict = SemanticDictionary::new(atoms, k, d, max_corr + slack, 0).unwrap();
        let c = sparse_encode(&x, &dict).unwrap();
        prop_assert!(c.coefficients.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn targets_are_distributions((atoms, x, kd) in instance(), lambda in 0.0f64..1.0) {
        let (k, d) = ((kd >> 32) as usize, (kd & 0xffff_ffff) as usize);
        let dict = SemanticDictionary::new(atoms, k, d, lambda, 0).unwrap();
        let t = target_distribution(&sparse_encode(&x, &dict).unwrap()).unwrap();
        prop_assert!((t.sum() - 1.0).abs() < 1e-6);
        prop_assert!(t.distribution.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn warm_start_reaches_the_same_objective((atoms, x, kd) in instance(), lambda in 0.0f64..0.5) {
        let (k, d) = ((kd >> 32) as usize, (kd & 0xffff_ffff) as usize);
        let dict = SemanticDictionary::new(atoms, k, d, lambda, 0).unwrap();
        let enc = SparseEncoder::new(&dict);
        let cold = enc.encode(&x, None).unwrap();
        let warm = enc.encode(&x, Some(&vec![0.3; k])).unwrap();
        prop_assert!((enc.objective(&x, &cold) - enc.objective(&x, &warm)).abs() < 1e-5);
    }
}
