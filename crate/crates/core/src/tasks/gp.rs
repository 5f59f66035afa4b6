//! Gaussian-process function sampling for 1D regression episodes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::normal_vec;
use crate::tensor::Tensor;
use crate::Modality;

use super::{BatchMeta, TaskBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Rbf,
    Matern52,
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rbf" => Ok(KernelKind::Rbf),
            "matern52" => Ok(KernelKind::Matern52),
            other => Err(Error::config(format!("unknown kernel {other}"))),
        }
    }
}

pub fn kernel_eval(
    kind: KernelKind,
    lengthscale: f64,
    variance: f64,
    x: f64,
    x2: f64,
) -> Result<f64> {
    if !(lengthscale > 0.0) || !(variance > 0.0) {
        return Err(Error::invalid_input("kernel hyperparameters must be positive"));
    }
    let r = (x - x2).abs();
    Ok(match kind {
        KernelKind::Rbf => variance * (-r * r / (2.0 * lengthscale * lengthscale)).exp(),
        KernelKind::Matern52 => {
            let s = 5.0f64.sqrt() * r / lengthscale;
            variance * (1.0 + s + s * s / 3.0) * (-s).exp()
        }
    })
}

fn cholesky(k: &Tensor) -> Option<Tensor> {
    let n = k.rows;
    let mut l = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = k.at(i, j);
            for p in 0..j {
                sum -= l.at(i, p) * l.at(j, p);
            }
            if i == j {
                if !(sum > 0.0) {
                    return None;
                }
                *l.at_mut(i, j) = sum.sqrt();
            } else {
                *l.at_mut(i, j) = sum / l.at(j, j);
            }
        }
    }
    Some(l)
}

/// Draw from N(0, K + jitter I) by Cholesky; jitter escalates from 1e-6
/// to 1e-4 before giving up.
pub fn gp_sample(
    kind: KernelKind,
    lengthscale: f64,
    variance: f64,
    xs: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let n = xs.len();
    if n == 0 {
        return Err(Error::invalid_input("no points to sample"));
    }
    let mut k = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            *k.at_mut(i, j) = kernel_eval(kind, lengthscale, variance, xs[i], xs[j])?;
        }
    }
    let mut l = None;
    for jitter in [1e-6, 1e-5, 1e-4] {
        let mut kj = k.clone();
        for i in 0..n {
            *kj.at_mut(i, i) += jitter;
        }
        l = cholesky(&kj);
        if l.is_some() {
            break;
        }
    }
    let Some(l) = l else {
        return Err(Error::Numerical {
            what: "gp kernel matrix not positive definite after jitter escalation".into(),
            cond: f64::INFINITY,
        });
    };
    let eps = normal_vec(rng, n);
    let mut ys = vec![0.0; n];
    for i in 0..n {
        for j in 0..=i {
            ys[i] += l.at(i, j) * eps[j];
        }
    }
    Ok(ys)
}

/// Context size ~ Uniform{3..=min(47, n-3)}; the target set is all points
/// (context is a subset of the targets).
pub fn split_context_target(
    xs: &[f64],
    ys: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<TaskBatch> {
    let n = xs.len();
    if n < 4 {
        return Err(Error::invalid_input("need at least 4 points to split"));
    }
    if ys.len() != n {
        return Err(Error::shape("xs/ys length mismatch"));
    }
    let hi = 47.min(n - 3);
    let ctx_size = rng.gen_range(3..=hi);
    // choose without replacement: partial Fisher-Yates over indices
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..ctx_size {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    let mut ctx: Vec<usize> = idx[..ctx_size].to_vec();
    ctx.sort_unstable();
    let context_inputs = Tensor::col(ctx.iter().map(|&i| xs[i]).collect());
    let context_outputs = Tensor::col(ctx.iter().map(|&i| ys[i]).collect());
    Ok(TaskBatch {
        modality: Modality::Signal1d,
        context_inputs,
        context_outputs,
        target_inputs: Tensor::col(xs.to_vec()),
        target_outputs: Some(Tensor::col(ys.to_vec())),
        meta: BatchMeta::default(),
    })
}

/// Full 1D episode recipe: hyperparameters drawn per episode
/// (lengthscale ~ U[0.6,1.0), amplitude sigma ~ U[0.1,1.0)), 50 points
/// uniform on [-2,2].
#[derive(Clone, Copy, Debug)]
pub struct Gp1dConfig {
    pub kind: KernelKind,
    pub n_points: usize,
    pub x_lo: f64,
    pub x_hi: f64,
}

impl Default for Gp1dConfig {
    fn default() -> Self {
        Gp1dConfig { kind: KernelKind::Rbf, n_points: 50, x_lo: -2.0, x_hi: 2.0 }
    }
}

impl Gp1dConfig {
    pub fn episode(&self, rng: &mut ChaCha8Rng) -> Result<TaskBatch> {
        let lengthscale = rng.gen_range(0.6..1.0);
        let sigma: f64 = rng.gen_range(0.1..1.0);
        let xs: Vec<f64> = (0..self.n_points).map(|_| rng.gen_range(self.x_lo..self.x_hi)).collect();
        let ys = gp_sample(self.kind, lengthscale, sigma * sigma, &xs, rng)?;
        split_context_target(&xs, &ys, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn kernel_values() {
        for kind in [KernelKind::Rbf, KernelKind::Matern52] {
            assert!((kernel_eval(kind, 0.8, 1.0, 0.3, 0.3).unwrap() - 1.0).abs() < 1e-15);
        }
        let w = kernel_eval(KernelKind::Rbf, 1.0, 1.0, 0.0, 1.0).unwrap();
        assert!((w - (-0.5f64).exp()).abs() < 1e-12);
        let m = kernel_eval(KernelKind::Matern52, 1.0, 1.0, 0.0, 1.0).unwrap();
        let s = 5.0f64.sqrt();
        let expect = (1.0 + s + 5.0 / 3.0) * (-s).exp();
        assert!((m - expect).abs() < 1e-12);
        assert!((expect - 0.52399).abs() < 1e-5);
        assert!(kernel_eval(KernelKind::Rbf, 0.0, 1.0, 0.0, 1.0).is_err());
        assert!(kernel_eval(KernelKind::Rbf, 1.0, -1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn gp_single_point_variance() {
        let mut rng = stream(1, "gp-var", 0);
        let n = 10_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let y = gp_sample(KernelKind::Rbf, 1.0, 1.0, &[0.3], &mut rng).unwrap()[0];
            acc += y * y;
        }
        let var = acc / n as f64;
        assert!((var - 1.0).abs() < 0.05, "empirical variance {var}");
    }

    #[test]
    fn gp_coincident_points_correlate() {
        let mut rng = stream(2, "gp-coincident", 0);
        let n = 2000;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let ys = gp_sample(KernelKind::Rbf, 0.8, 1.0, &[0.5, 0.5 + 1e-9], &mut rng).unwrap();
            sxy += ys[0] * ys[1];
            sxx += ys[0] * ys[0];
            syy += ys[1] * ys[1];
        }
        let corr = sxy / (sxx.sqrt() * syy.sqrt());
        assert!(corr > 0.99, "correlation {corr}");
    }

    #[test]
    fn gp_covariance_matches_kernel() {
        let xs = [-1.5, -0.4, 0.0, 0.9, 1.8];
        let n = 10_000;
        let mut rng = stream(3, "gp-cov", 0);
        let mut acc = vec![0.0; 25];
        for _ in 0..n {
            let ys = gp_sample(KernelKind::Matern52, 0.9, 0.64, &xs, &mut rng).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    acc[i * 5 + j] += ys[i] * ys[j];
                }
            }
        }
        for i in 0..5 {
            for j in 0..5 {
                let emp = acc[i * 5 + j] / n as f64;
                let k = kernel_eval(KernelKind::Matern52, 0.9, 0.64, xs[i], xs[j]).unwrap();
                // SE of a product-moment estimate ~ sqrt((kii*kjj + kij^2)/n)
                let kii = kernel_eval(KernelKind::Matern52, 0.9, 0.64, xs[i], xs[i]).unwrap();
                let kjj = kernel_eval(KernelKind::Matern52, 0.9, 0.64, xs[j], xs[j]).unwrap();
                let se = ((kii * kjj + k * k) / n as f64).sqrt();
                assert!((emp - k).abs() < 3.0 * se, "({i},{j}): emp {emp} vs {k} (se {se})");
            }
        }
    }

    #[test]
    fn split_respects_contract() {
        let xs: Vec<f64> = (0..50).map(|i| -2.0 + 4.0 * i as f64 / 49.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x.sin()).collect();
        let b1 = split_context_target(&xs, &ys, &mut stream(9, "split", 4)).unwrap();
        let n_ctx = b1.context_inputs.rows;
        assert!((3..=47).contains(&n_ctx));
        assert_eq!(b1.target_inputs.rows, 50);
        // context values all appear among targets
        for i in 0..n_ctx {
            let x = b1.context_inputs.data[i];
            assert!(xs.contains(&x));
        }
        let b2 = split_context_target(&xs, &ys, &mut stream(9, "split", 4)).unwrap();
        assert_eq!(b1.context_inputs.data, b2.context_inputs.data);
        assert!(split_context_target(&xs[..3], &ys[..3], &mut stream(9, "split", 0)).is_err());
    }

    #[test]
    fn episode_is_deterministic_per_seed() {
        let cfg = Gp1dConfig::default();
        let a = cfg.episode(&mut stream(5, "episode", 7)).unwrap();
        let b = cfg.episode(&mut stream(5, "episode", 7)).unwrap();
        assert_eq!(a.target_outputs.unwrap().data, b.target_outputs.unwrap().data);
    }
}
