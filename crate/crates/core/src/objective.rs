//! The hierarchical ELBO objective and the training loop around it:
//! posteriors from target bases, priors from context bases, KL
//! alignment, reconstruction from posterior samples.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Adam;
use crate::tasks::TaskBatch;

pub const PSNR_CAP: f64 = 99.0;

/// One step's loss decomposition. The invariant
/// total = recon + alpha (kl_global + kl_local) + beta kl_bases
/// holds exactly (same floating-point evaluation order everywhere).
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossTerms {
    pub recon: f64,
    pub kl_global: f64,
    pub kl_local: f64,
    pub kl_bases: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn recompose(&self, alpha: f64, beta: f64) -> f64 {
        self.recon + alpha * (self.kl_global + self.kl_local) + beta * self.kl_bases
    }

    fn finite_or_divergence(&self, step: u64) -> Result<()> {
        for (name, v) in [
            ("recon", self.recon),
            ("kl_global", self.kl_global),
            ("kl_local", self.kl_local),
            ("kl_bases", self.kl_bases),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::Divergence { term: name.into(), step });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TrainingConfig {
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip: f64,
    /// 1D/2D: target points per episode per step (0 = all).
    pub targets_per_step: usize,
    /// 3D: rays per episode per step (0 = all).
    pub rays_per_step: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            alpha: 0.001,
            beta: 0.001,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            steps: 1000,
            batch_size: 16,
            seed: 0,
            grad_clip: 10.0,
            targets_per_step: 0,
            rays_per_step: 64,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::config("alpha and beta must be non-negative"));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::config("learning_rate must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Owns the model parameters and optimizer state for one run.
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainingConfig,
    pub opt: Adam,
    pub step: u64,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainingConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = Adam::new(&model.params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2);
        Ok(Trainer { model, cfg, opt, step: 0 })
    }

    /// Loss decomposition for one episode without updating parameters.
    pub fn elbo_terms(&self, batch: &TaskBatch, rng: &mut ChaCha8Rng) -> Result<LossTerms> {
        let (prep, draws) = self.model.prepare_training(
            batch,
            rng,
            self.cfg.targets_per_step,
            self.cfg.rays_per_step,
        )?;
        let (s, vars) = self.model.elbo_graph(&prep, &draws, self.cfg.alpha, self.cfg.beta)?;
        let read = |v: Option<crate::graph::Var>| v.map(|v| s.g.val(v).item()).unwrap_or(0.0);
        let terms = LossTerms {
            recon: s.g.val(vars.recon).item(),
            kl_global: read(vars.kl_global),
            kl_local: read(vars.kl_local),
            kl_bases: read(vars.kl_bases),
            total: s.g.val(vars.total).item(),
        };
        debug_assert_eq!(terms.total, terms.recompose(self.cfg.alpha, self.cfg.beta));
        Ok(terms)
    }

    /// One gradient step over a batch of episodes. Deterministic given
    /// (parameters, batch, step index, seed): every random draw comes
    /// from a stream derived from (seed, "step", step).
    pub fn training_step(&mut self, batches: &[TaskBatch]) -> Result<LossTerms> {
        if batches.is_empty() {
            return Err(Error::invalid_input("empty training batch"));
        }
        let mut rng = crate::rng::stream(self.cfg.seed, "step", self.step);
        let mut grad_acc: Vec<Option<crate::tensor::Tensor>> = vec![None; self.model.params.len()];
        let mut acc = LossTerms { recon: 0.0, kl_global: 0.0, kl_local: 0.0, kl_bases: 0.0, total: 0.0 };
        for batch in batches {
            let (prep, draws) = self.model.prepare_training(
                batch,
                &mut rng,
                self.cfg.targets_per_step,
                self.cfg.rays_per_step,
            )?;
            let (mut s, vars) =
                self.model.elbo_graph(&prep, &draws, self.cfg.alpha, self.cfg.beta).map_err(
                    |e| match e {
                        Error::Divergence { term, .. } => {
                            Error::Divergence { term, step: self.step }
                        }
                        other => other,
                    },
                )?;
            let read = |s: &crate::nn::Session, v: Option<crate::graph::Var>| {
                v.map(|v| s.g.val(v).item()).unwrap_or(0.0)
            };
            let terms = LossTerms {
                recon: s.g.val(vars.recon).item(),
                kl_global: read(&s, vars.kl_global),
                kl_local: read(&s, vars.kl_local),
                kl_bases: read(&s, vars.kl_bases),
                total: s.g.val(vars.total).item(),
            };
            terms.finite_or_divergence(self.step)?;
            assert_eq!(
                terms.total,
                terms.recompose(self.cfg.alpha, self.cfg.beta),
                "loss total does not recompose from its parts"
            );
            acc.recon += terms.recon;
            acc.kl_global += terms.kl_global;
            acc.kl_local += terms.kl_local;
            acc.kl_bases += terms.kl_bases;
            let grads = s.grads(vars.total);
            for (slot, g) in grad_acc.iter_mut().zip(grads.into_iter()) {
                match (slot.as_mut(), g) {
                    (Some(a), Some(b)) => a.add_assign(&b),
                    (None, Some(b)) => *slot = Some(b),
                    _ => {}
                }
            }
        }
        let inv = 1.0 / batches.len() as f64;
        for g in grad_acc.iter_mut().flatten() {
            g.scale_in_place(inv);
        }
        acc.recon *= inv;
        acc.kl_global *= inv;
        acc.kl_local *= inv;
        acc.kl_bases *= inv;
        acc.total = acc.recompose(self.cfg.alpha, self.cfg.beta);
        self.opt.apply(&mut self.model.params, &grad_acc, Some(self.cfg.grad_clip));
        if !self.model.params.all_finite() {
            return Err(Error::Divergence { term: "parameters".into(), step: self.step });
        }
        self.step += 1;
        Ok(acc)
    }
}

/// -10 log10(MSE), capped at 99 dB for MSE below 1e-10.
pub fn psnr(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::invalid_input("psnr inputs must be same nonempty shape"));
    }
    let mse: f64 =
        pred.iter().zip(truth.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok(-10.0 * mse.log10())
}

/// Mean Gaussian log-likelihood per point.
pub fn gaussian_loglik(mean: &[f64], std: &[f64], y: &[f64]) -> Result<f64> {
    if mean.len() != std.len() || mean.len() != y.len() || mean.is_empty() {
        return Err(Error::invalid_input("log-likelihood inputs must be same nonempty shape"));
    }
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut acc = 0.0;
    for ((&m, &s), &yv) in mean.iter().zip(std.iter()).zip(y.iter()) {
        if !(s > 0.0) {
            return Err(Error::invalid_input("non-positive std"));
        }
        acc += -0.5 * ln2pi - s.ln() - (yv - m) * (yv - m) / (2.0 * s * s);
    }
    Ok(acc / mean.len() as f64)
}

/// One line of the JSONL metrics log.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub recon: f64,
    pub kl_global: f64,
    pub kl_local: f64,
    pub kl_bases: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loglik: Option<f64>,
    pub wall_ms: f64,
}

impl MetricsRecord {
    pub fn from_terms(step: u64, t: &LossTerms, wall_ms: f64) -> Self {
        MetricsRecord {
            step,
            recon: t.recon,
            kl_global: t.kl_global,
            kl_local: t.kl_local,
            kl_bases: t.kl_bases,
            total: t.total,
            psnr: None,
            loglik: None,
            wall_ms,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let truth = vec![0.5; 100];
        let pred: Vec<f64> = truth.iter().map(|v| v + 0.1).collect();
        // mse = 0.01
        assert!((psnr(&pred, &truth).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&truth, &truth).unwrap(), 99.0);
        assert!(psnr(&pred[..5], &truth).is_err());
    }

    #[test]
    fn loglik_examples() {
        let v = gaussian_loglik(&[1.3], &[1.0], &[1.3]).unwrap();
        assert!((v + 0.9189385332046727).abs() < 1e-12);
        let v = gaussian_loglik(&[0.0], &[1.0], &[1.0]).unwrap();
        assert!((v + 1.4189385332046727).abs() < 1e-12);
        assert!(gaussian_loglik(&[0.0], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn loss_terms_recompose() {
        let t = LossTerms {
            recon: 0.371,
            kl_global: 1.7,
            kl_local: 12.03,
            kl_bases: 0.004,
            total: 0.0,
        };
        let total = t.recompose(0.001, 0.001);
        let expect = 0.371 + 0.001 * (1.7 + 12.03) + 0.001 * 0.004;
        assert_eq!(total, expect);
    }
}
