//! Hierarchical latent variables: one global (object-level) diagonal
//! Gaussian and per-group local Gaussians (per ray in 3D, per coordinate
//! or coordinate chunk in 1D/2D), sampled by reparameterization.

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Activation, Builder, Linear, Mlp, Session, TransformerBlock};
use crate::tensor::Tensor;
use crate::Modality;

pub const STD_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn standard(k: usize) -> Self {
        DiagonalGaussian { mean: vec![0.0; k], std: vec![1.0; k] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::shape("mean/std length mismatch"));
        }
        if !self.mean.iter().chain(self.std.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite distribution parameters".into()));
        }
        if self.std.iter().any(|&s| s < STD_FLOOR * (1.0 - 1e-12)) {
            return Err(Error::InvalidParameter("std below floor".into()));
        }
        Ok(())
    }
}

/// mean + std .* noise.
pub fn sample_latent(dist: &DiagonalGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != dist.mean.len() {
        return Err(Error::shape(format!(
            "noise length {} vs latent dim {}",
            noise.len(),
            dist.mean.len()
        )));
    }
    Ok(dist
        .mean
        .iter()
        .zip(dist.std.iter())
        .zip(noise.iter())
        .map(|((&m, &s), &n)| m + s * n)
        .collect())
}

/// Hierarchy description for one episode's targets.
#[derive(Clone, Debug)]
pub struct HierarchicalLatents {
    pub global: DiagonalGaussian,
    pub locals: Vec<DiagonalGaussian>,
    pub grouping: Grouping,
}

/// Equal-sized consecutive groups: target index i belongs to group
/// i / group_size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grouping {
    pub n_groups: usize,
    pub group_size: usize,
}

impl Grouping {
    pub fn group_of(&self, target_index: usize) -> usize {
        target_index / self.group_size
    }

    pub fn n_targets(&self) -> usize {
        self.n_groups * self.group_size
    }
}

/// 3D: one group per ray of `points_per_ray` samples. 1D/2D: consecutive
/// chunks of `chunk` coordinates (chunk 1 = per-point local variables).
pub fn group_targets(n_targets: usize, modality: Modality, chunk_or_p: usize) -> Result<Grouping> {
    if n_targets == 0 {
        return Err(Error::invalid_input("no targets to group"));
    }
    if chunk_or_p == 0 {
        return Err(Error::config("group size must be positive"));
    }
    match modality {
        Modality::Rays3d | Modality::Image2d | Modality::Signal1d => {
            if n_targets % chunk_or_p != 0 {
                return Err(Error::invalid_input(format!(
                    "{n_targets} targets not divisible into groups of {chunk_or_p}"
                )));
            }
            Ok(Grouping { n_groups: n_targets / chunk_or_p, group_size: chunk_or_p })
        }
    }
}

/// On-graph diagonal Gaussian: mean and std, one row per group.
#[derive(Clone, Copy, Debug)]
pub struct GaussVars {
    pub mean: Var,
    pub std: Var,
}

impl GaussVars {
    /// Split a head output [n, 2k] into mean and softplus(raw) + floor std.
    pub fn from_raw(s: &mut Session, raw: Var, k: usize) -> Self {
        let mean = s.g.slice_cols(raw, 0, k);
        let raw_std = s.g.slice_cols(raw, k, 2 * k);
        let sp = s.g.softplus(raw_std);
        let std = s.g.add_const(sp, STD_FLOOR);
        GaussVars { mean, std }
    }

    /// Reparameterized sample with externally drawn standard normals.
    pub fn sample(&self, s: &mut Session, noise: &Tensor) -> Var {
        let n = s.g.constant(noise.clone());
        let scaled = s.g.mul(self.std, n);
        s.g.add(self.mean, scaled)
    }

    pub fn to_plain(&self, s: &Session) -> Vec<DiagonalGaussian> {
        let mean = s.g.val(self.mean);
        let std = s.g.val(self.std);
        (0..mean.rows)
            .map(|r| DiagonalGaussian {
                mean: mean.row_slice(r).to_vec(),
                std: std.row_slice(r).to_vec(),
            })
            .collect()
    }
}

/// Sum over rows and dims of KL(q || p) for paired diagonal Gaussians.
pub fn diag_kl_on_graph(s: &mut Session, q: &GaussVars, p: &GaussVars) -> Var {
    let ratio = s.g.div(p.std, q.std);
    let log_ratio = s.g.ln(ratio);
    let var_q = s.g.square(q.std);
    let dmu = s.g.sub(q.mean, p.mean);
    let dmu2 = s.g.square(dmu);
    let num = s.g.add(var_q, dmu2);
    let var_p = s.g.square(p.std);
    let denom = s.g.scale(var_p, 2.0);
    let frac = s.g.div(num, denom);
    let t = s.g.add(log_ratio, frac);
    let t = s.g.add_const(t, -0.5);
    s.g.sum_all(t)
}

/// Pools point representations and emits the global latent distribution.
#[derive(Clone, Debug)]
pub struct GlobalHead {
    mlp: Mlp,
    latent_dim: usize,
}

impl GlobalHead {
    pub fn build(b: &mut Builder, name: &str, rep_dim: usize, hidden: usize, latent_dim: usize) -> Self {
        GlobalHead {
            mlp: b.mlp(name, &[rep_dim, hidden, 2 * latent_dim], Activation::Relu),
            latent_dim,
        }
    }

    /// reps: [n_points, rep_dim] -> one diagonal Gaussian.
    pub fn forward(&self, s: &mut Session, reps: Var) -> GaussVars {
        let pooled = s.g.mean_axis0(reps);
        let raw = self.mlp.forward(s, pooled);
        GaussVars::from_raw(s, raw, self.latent_dim)
    }
}

/// Lightweight transformer over group tokens plus one global token,
/// emitting per-group local latent distributions.
#[derive(Clone, Debug)]
pub struct LocalHead {
    in_proj: Linear,
    z_proj: Linear,
    blocks: Vec<TransformerBlock>,
    out: Linear,
    latent_dim: usize,
}

impl LocalHead {
    pub fn build(
        b: &mut Builder,
        name: &str,
        rep_dim: usize,
        latent_dim: usize,
        layers: usize,
        heads: usize,
    ) -> Self {
        LocalHead {
            in_proj: b.linear(&format!("{name}.in"), rep_dim, latent_dim),
            z_proj: b.linear(&format!("{name}.z"), latent_dim, latent_dim),
            blocks: (0..layers)
                .map(|i| b.transformer_block(&format!("{name}.blk{i}"), latent_dim, heads, 2))
                .collect(),
            out: b.linear(&format!("{name}.out"), latent_dim, 2 * latent_dim),
            latent_dim,
        }
    }

    /// group_reps: [G, rep_dim], z_g_sample: [1, latent_dim] -> G local
    /// distributions (rows).
    pub fn forward(&self, s: &mut Session, group_reps: Var, z_g_sample: Var) -> GaussVars {
        let n_groups = s.g.val(group_reps).rows;
        let tokens = self.in_proj.forward(s, group_reps);
        let ztok = self.z_proj.forward(s, z_g_sample);
        let mut seq = s.g.concat_rows(&[tokens, ztok]);
        for blk in &self.blocks {
            seq = blk.forward(s, seq);
        }
        let groups = s.g.slice_rows(seq, 0, n_groups);
        let raw = self.out.forward(s, groups);
        GaussVars::from_raw(s, raw, self.latent_dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sample_latent_identities() {
        let d = DiagonalGaussian { mean: vec![1.0, -2.0], std: vec![0.5, 2.0] };
        assert_eq!(sample_latent(&d, &[0.0, 0.0]).unwrap(), vec![1.0, -2.0]);
        let floor = DiagonalGaussian { mean: vec![1.0], std: vec![STD_FLOOR] };
        assert_eq!(sample_latent(&floor, &[1.0]).unwrap(), vec![1.0 + STD_FLOOR]);
        assert!(sample_latent(&d, &[0.0]).is_err());
    }

    #[test]
    fn sample_latent_monte_carlo_mean() {
        let d = DiagonalGaussian { mean: vec![0.7], std: vec![1.3] };
        let n = 100_000;
        let mut rng = crate::rng::stream(11, "mc-mean", 0);
        let mut acc = 0.0;
        for _ in 0..n {
            let noise = crate::rng::normal_vec(&mut rng, 1);
            acc += sample_latent(&d, &noise).unwrap()[0];
        }
        let mean = acc / n as f64;
        let tol = 4.0 * 1.3 / (n as f64).sqrt();
        assert!((mean - 0.7).abs() < tol, "mean {mean}");
    }

    #[test]
    fn grouping_examples() {
        let g = group_targets(4 * 16, Modality::Rays3d, 16).unwrap();
        assert_eq!(g, Grouping { n_groups: 4, group_size: 16 });
        let g = group_targets(100, Modality::Image2d, 1).unwrap();
        assert_eq!(g.n_groups, 100);
        let g = group_targets(100, Modality::Image2d, 25).unwrap();
        assert_eq!(g.n_groups, 4);
        assert_eq!(g.group_of(49), 1);
        assert!(group_targets(0, Modality::Signal1d, 1).is_err());
    }

    #[test]
    fn global_head_is_permutation_and_duplication_invariant() {
        let mut ps = ParamSet::new();
        let mut b = Builder::new(&mut ps, ChaCha8Rng::seed_from_u64(5));
        let head = GlobalHead::build(&mut b, "g", 4, 8, 3);

        let rows = vec![
            vec![0.1, -0.2, 0.3, 0.4],
            vec![1.0, 0.5, -0.5, 0.2],
            vec![-0.3, 0.8, 0.0, -0.1],
        ];
        let run = |order: &[usize], dup: usize| -> (Vec<f64>, Vec<f64>) {
            let mut s = Session::new(&ps);
            let mut data = Vec::new();
            for _ in 0..dup {
                for &i in order {
                    data.extend_from_slice(&rows[i]);
                }
            }
            let x = s.g.constant(Tensor::from_vec(order.len() * dup, 4, data));
            let gv = head.forward(&mut s, x);
            (s.g.val(gv.mean).data.clone(), s.g.val(gv.std).data.clone())
        };
        let base = run(&[0, 1, 2], 1);
        let perm = run(&[2, 0, 1], 1);
        let dup = run(&[0, 1, 2], 3);
        for (a, b) in base.0.iter().zip(perm.0.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in base.1.iter().zip(dup.1.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn global_head_zero_init_matches_bias() {
        // all-zero reps through a zero-initialized MLP: mean 0,
        // std = softplus(0) + floor
        let mut ps = ParamSet::new();
        let mut b = Builder::new(&mut ps, ChaCha8Rng::seed_from_u64(5));
        let head = GlobalHead::build(&mut b, "g", 4, 8, 3);
        for i in 0..ps.len() {
            let t = ps.get_mut(crate::nn::ParamId(i));
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut s = Session::new(&ps);
        let x = s.g.constant(Tensor::zeros(5, 4));
        let gv = head.forward(&mut s, x);
        let expect_std = crate::graph::stable_softplus(0.0) + STD_FLOOR;
        for &m in &s.g.val(gv.mean).data {
            assert_eq!(m, 0.0);
        }
        for &sd in &s.g.val(gv.std).data {
            assert!((sd - expect_std).abs() < 1e-15);
        }
    }

    #[test]
    fn local_head_symmetry_and_global_sensitivity() {
        let mut ps = ParamSet::new();
        let mut b = Builder::new(&mut ps, ChaCha8Rng::seed_from_u64(9));
        let head = LocalHead::build(&mut b, "l", 4, 8, 2, 2);

        // identical groups -> identical local distributions
        let mut s = Session::new(&ps);
        let row = vec![0.3, -0.1, 0.8, 0.2];
        let mut data = row.clone();
        data.extend_from_slice(&row);
        let reps = s.g.constant(Tensor::from_vec(2, 4, data));
        let z = s.g.constant(Tensor::from_vec(1, 8, (0..8).map(|i| 0.1 * i as f64).collect()));
        let gv = head.forward(&mut s, reps, z);
        let mean = s.g.val(gv.mean);
        for c in 0..8 {
            assert!((mean.at(0, c) - mean.at(1, c)).abs() < 1e-12);
        }

        // changing the global sample moves local means (nonzero Jacobian,
        // finite-difference probe)
        let probe = |zval: f64| -> Vec<f64> {
            let mut s = Session::new(&ps);
            let reps = s.g.constant(Tensor::from_vec(1, 4, row.clone()));
            let z = s.g.constant(Tensor::full(1, 8, zval));
            let gv = head.forward(&mut s, reps, z);
            s.g.val(gv.mean).data.clone()
        };
        let a = probe(0.0);
        let b2 = probe(0.1);
        let diff: f64 = a.iter().zip(b2.iter()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-8, "local head ignores the global sample");
    }

    #[test]
    fn emitted_stds_respect_floor() {
        let mut ps = ParamSet::new();
        let mut b = Builder::new(&mut ps, ChaCha8Rng::seed_from_u64(2));
        let head = GlobalHead::build(&mut b, "g", 3, 6, 2);
        let mut s = Session::new(&ps);
        let x = s.g.constant(Tensor::from_vec(2, 3, vec![100.0, -100.0, 3.0, -4.0, 5.0, -6.0]));
        let gv = head.forward(&mut s, x);
        for plain in gv.to_plain(&s) {
            plain.validate().unwrap();
        }
    }

    #[test]
    fn reparameterization_gradients() {
        // d(sample)/d(mean) = 1, d(sample)/d(std) = noise
        let mut ps = ParamSet::new();
        ps.register("mean", Tensor::row(vec![0.3, -0.2]));
        ps.register("std", Tensor::row(vec![0.9, 0.4]));
        let mut s = Session::new(&ps);
        let mean = s.p(crate::nn::ParamId(0));
        let std = s.p(crate::nn::ParamId(1));
        let gv = GaussVars { mean, std };
        let noise = Tensor::row(vec![1.7, -0.6]);
        let sample = gv.sample(&mut s, &noise);
        let total = s.g.sum_all(sample);
        let grads = s.grads(total);
        assert_eq!(grads[0].as_ref().unwrap().data, vec![1.0, 1.0]);
        assert_eq!(grads[1].as_ref().unwrap().data, vec![1.7, -0.6]);
    }
}
