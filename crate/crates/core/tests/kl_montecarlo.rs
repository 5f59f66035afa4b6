//! Closed-form KL divergences vs brute-force Monte Carlo estimates.

use npf_core::geometry::{
    basis_log_pdf, basis_set_kl, diag_gaussian_kl, sample_basis_gaussian, GaussianBasis,
    GaussianBasisSet, Rotation,
};
use npf_core::latents::DiagonalGaussian;
use npf_core::rng::{normal_vec, stream};

use rand::Rng;

fn diag_log_pdf(d: &DiagonalGaussian, x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((&m, &s), &v) in d.mean.iter().zip(d.std.iter()).zip(x.iter()) {
        acc += -0.5 * (2.0 * std::f64::consts::PI).ln() - s.ln() - (v - m) * (v - m) / (2.0 * s * s);
    }
    acc
}

#[test]
fn diag_kl_matches_monte_carlo() {
    let n = 200_000;
    for inst in 0..10 {
        let mut rng = stream(50, "diag-mc", inst);
        let k = rng.gen_range(1..5);
        let q = DiagonalGaussian {
            mean: (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            std: (0..k).map(|_| rng.gen_range(0.3..1.5)).collect(),
        };
        let p = DiagonalGaussian {
            mean: (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            std: (0..k).map(|_| rng.gen_range(0.3..1.5)).collect(),
        };
        let closed = diag_gaussian_kl(&q, &p).unwrap();
        assert!(closed >= 0.0);
        let mut acc = 0.0;
        let mut acc_sq = 0.0;
        for _ in 0..n {
            let eps = normal_vec(&mut rng, k);
            let x: Vec<f64> = q
                .mean
                .iter()
                .zip(q.std.iter())
                .zip(eps.iter())
                .map(|((&m, &s), &e)| m + s * e)
                .collect();
            let lr = diag_log_pdf(&q, &x) - diag_log_pdf(&p, &x);
            acc += lr;
            acc_sq += lr * lr;
        }
        let mc = acc / n as f64;
        let var = (acc_sq / n as f64 - mc * mc).max(0.0);
        let se = (var / n as f64).sqrt();
        assert!(
            (closed - mc).abs() < 3.0 * se.max(1e-6),
            "instance {inst}: closed {closed} vs mc {mc} (se {se})"
        );
    }
}

fn random_basis(rng: &mut rand_chacha::ChaCha8Rng, d: usize) -> GaussianBasis {
    let rotation = match d {
        1 => Rotation::None,
        2 => Rotation::Angle(rng.gen_range(-3.0..3.0)),
        3 => {
            let mut q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0f64));
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
            q.iter_mut().for_each(|v| *v /= norm);
            Rotation::Quat(q)
        }
        _ => unreachable!(),
    };
    GaussianBasis {
        center: (0..d).map(|_| rng.gen_range(-0.8..0.8)).collect(),
        log_scale: (0..d).map(|_| rng.gen_range(-1.2..0.5)).collect(),
        rotation,
        embedding: vec![],
    }
}

#[test]
fn basis_pair_kl_matches_monte_carlo() {
    let n = 200_000;
    let jitter = 1e-6;
    for inst in 0..10 {
        let mut rng = stream(51, "pair-mc", inst);
        let d = 1 + (inst as usize % 3);
        let a = random_basis(&mut rng, d);
        let b = random_basis(&mut rng, d);
        let sa = GaussianBasisSet::new(vec![a.clone()]).unwrap();
        let sb = GaussianBasisSet::new(vec![b.clone()]).unwrap();
        let closed = basis_set_kl(&sa, &sb, jitter).unwrap();
        assert!(closed >= 0.0);
        let mut acc = 0.0;
        let mut acc_sq = 0.0;
        for _ in 0..n {
            let eps = normal_vec(&mut rng, d);
            let x = sample_basis_gaussian(&a, jitter, &eps).unwrap();
            let lr = basis_log_pdf(&a, &x, jitter).unwrap() - basis_log_pdf(&b, &x, jitter).unwrap();
            acc += lr;
            acc_sq += lr * lr;
        }
        let mc = acc / n as f64;
        let var = (acc_sq / n as f64 - mc * mc).max(0.0);
        let se = (var / n as f64).sqrt();
        assert!(
            (closed - mc).abs() < 3.0 * se.max(1e-6),
            "instance {inst} (d={d}): closed {closed} vs mc {mc} (se {se})"
        );
    }
}
