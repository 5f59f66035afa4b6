//! Gaussian geometric bases: covariance construction, RBF interaction
//! weights, and the KL divergences used by the training objective.

use crate::error::{Error, Result};
use crate::gauss::{self, RotKind, RotMat};
use crate::latents::DiagonalGaussian;
use crate::tensor::Tensor;

pub const DEFAULT_JITTER: f64 = 1e-6;
pub const EXPONENT_FLOOR: f64 = -60.0;
pub const LOG_SCALE_MIN: f64 = -5.0;
pub const LOG_SCALE_MAX: f64 = 2.0;

/// Rotation parameterization per spatial dimension: absent in 1D, a single
/// angle in 2D, a unit quaternion (w, x, y, z) in 3D.
#[derive(Clone, Debug, PartialEq)]
pub enum Rotation {
    None,
    Angle(f64),
    Quat([f64; 4]),
}

impl Rotation {
    pub fn kind(&self) -> RotKind {
        match self {
            Rotation::None => RotKind::None,
            Rotation::Angle(_) => RotKind::Angle,
            Rotation::Quat(_) => RotKind::Quat,
        }
    }

    /// Dense rotation matrix, validating the quaternion.
    pub fn matrix(&self) -> Result<RotMat> {
        match self {
            Rotation::None => Ok(gauss::identity_rot()),
            Rotation::Angle(theta) => {
                if !theta.is_finite() {
                    return Err(Error::InvalidParameter("non-finite rotation angle".into()));
                }
                Ok(gauss::angle_to_rot(*theta))
            }
            Rotation::Quat(q) => {
                if q.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidParameter("non-finite quaternion".into()));
                }
                let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < 1e-6 {
                    return Err(Error::DegenerateRotation { norm });
                }
                let qn: Vec<f64> = q.iter().map(|v| v / norm).collect();
                Ok(gauss::quat_to_rot(&qn))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct GaussianBasis {
    /// Center in the normalized scene box [-1,1]^d.
    pub center: Vec<f64>,
    /// Log of per-axis standard deviations.
    pub log_scale: Vec<f64>,
    pub rotation: Rotation,
    /// Semantic embedding omega.
    pub embedding: Vec<f64>,
}

impl GaussianBasis {
    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn isotropic(center: Vec<f64>, log_scale: f64, embedding: Vec<f64>) -> Self {
        let d = center.len();
        let rotation = match d {
            1 => Rotation::None,
            2 => Rotation::Angle(0.0),
            3 => Rotation::Quat([1.0, 0.0, 0.0, 0.0]),
            _ => panic!("unsupported dim {d}"),
        };
        GaussianBasis { center, log_scale: vec![log_scale; d], rotation, embedding }
    }
}

/// Ordered basis set; index identity matters for the set-level KL pairing.
#[derive(Clone, Debug)]
pub struct GaussianBasisSet {
    pub bases: Vec<GaussianBasis>,
    pub dim: usize,
}

impl GaussianBasisSet {
    pub fn new(bases: Vec<GaussianBasis>) -> Result<Self> {
        let Some(first) = bases.first() else {
            return Err(Error::invalid_input("basis set must hold at least one basis"));
        };
        let dim = first.dim();
        for (i, b) in bases.iter().enumerate() {
            if b.dim() != dim || b.log_scale.len() != dim {
                return Err(Error::invalid_input(format!("basis {i} has mixed dimension")));
            }
            if b.rotation.kind() != RotKind::for_dim(dim) {
                return Err(Error::invalid_input(format!(
                    "basis {i} rotation parameterization does not match dim {dim}"
                )));
            }
        }
        Ok(GaussianBasisSet { bases, dim })
    }

    pub fn count(&self) -> usize {
        self.bases.len()
    }

    /// Struct-of-arrays view (centers, log_scales, rotations, embeddings).
    pub fn to_tensors(&self) -> (Tensor, Tensor, Option<Tensor>, Tensor) {
        let r = self.count();
        let d = self.dim;
        let kind = RotKind::for_dim(d);
        let mut centers = Tensor::zeros(r, d);
        let mut log_scales = Tensor::zeros(r, d);
        let emb_dim = self.bases[0].embedding.len();
        let mut embeddings = Tensor::zeros(r, emb_dim);
        let mut rot = match kind {
            RotKind::None => None,
            RotKind::Angle => Some(Tensor::zeros(r, 1)),
            RotKind::Quat => Some(Tensor::zeros(r, 4)),
        };
        for (i, b) in self.bases.iter().enumerate() {
            centers.row_slice_mut(i).copy_from_slice(&b.center);
            log_scales.row_slice_mut(i).copy_from_slice(&b.log_scale);
            embeddings.row_slice_mut(i)[..b.embedding.len()].copy_from_slice(&b.embedding);
            match (&b.rotation, rot.as_mut()) {
                (Rotation::Angle(t), Some(rt)) => rt.row_slice_mut(i)[0] = *t,
                (Rotation::Quat(q), Some(rt)) => rt.row_slice_mut(i).copy_from_slice(q),
                (Rotation::None, None) => {}
                _ => unreachable!("validated at construction"),
            }
        }
        (centers, log_scales, rot, embeddings)
    }
}

/// Sigma = R diag(exp(2 ls)) R^T + jitter I.
pub fn build_covariance(log_scale: &[f64], rotation: &Rotation, jitter: f64) -> Result<Tensor> {
    if log_scale.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite log_scale".into()));
    }
    if !(jitter >= 0.0) {
        return Err(Error::InvalidParameter(format!("jitter must be >= 0, got {jitter}")));
    }
    let d = log_scale.len();
    let expected = RotKind::for_dim(d);
    if rotation.kind() != expected {
        return Err(Error::InvalidParameter(format!(
            "rotation parameterization does not match dimension {d}"
        )));
    }
    let rot = rotation.matrix()?;
    let dense = gauss::covariance_dense(log_scale, &rot, jitter);
    Ok(Tensor::from_vec(d, d, dense))
}

/// Per-axis variances exp(2 ls) + jitter (eigenvalues of Sigma).
fn variances(basis: &GaussianBasis, jitter: f64) -> Result<Vec<f64>> {
    let vars: Vec<f64> = basis.log_scale.iter().map(|l| (2.0 * l).exp() + jitter).collect();
    let min = vars.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = vars.iter().cloned().fold(0.0f64, f64::max);
    if !(min > 0.0) || !max.is_finite() {
        return Err(Error::Numerical {
            what: "covariance not invertible".into(),
            cond: if min > 0.0 { max / min } else { f64::INFINITY },
        });
    }
    Ok(vars)
}

/// exp(max(-1/2 (x-mu)^T Sigma^-1 (x-mu), -60)), in (0, 1].
pub fn rbf_weight(x: &[f64], basis: &GaussianBasis, jitter: f64) -> Result<f64> {
    let d = basis.dim();
    if x.len() != d {
        return Err(Error::shape(format!("point dim {} vs basis dim {d}", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite query point".into()));
    }
    let vars = variances(basis, jitter)?;
    let rot = basis.rotation.matrix()?;
    let mut e = 0.0;
    for k in 0..d {
        let mut u = 0.0;
        for j in 0..d {
            u += rot[j * 3 + k] * (x[j] - basis.center[j]);
        }
        e += u * u / vars[k];
    }
    Ok((-0.5 * e).max(EXPONENT_FLOOR).exp())
}

/// RBF-weighted sum of basis embeddings (the aggregation before the
/// representation MLP; the network itself lives on the model's graph).
pub fn aggregate_embeddings(
    x: &[f64],
    set: &GaussianBasisSet,
    jitter: f64,
) -> Result<Vec<f64>> {
    if set.bases.is_empty() {
        return Err(Error::invalid_input("empty basis set"));
    }
    let emb_dim = set.bases[0].embedding.len();
    let mut out = vec![0.0; emb_dim];
    for b in &set.bases {
        let w = rbf_weight(x, b, jitter)?;
        for (o, &e) in out.iter_mut().zip(b.embedding.iter()) {
            *o += w * e;
        }
    }
    Ok(out)
}

/// KL(q || p) for diagonal Gaussians:
/// sum_k [ ln(sp/sq) + (sq^2 + (mq-mp)^2) / (2 sp^2) - 1/2 ].
pub fn diag_gaussian_kl(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<f64> {
    if q.mean.len() != p.mean.len() {
        return Err(Error::invalid_input(format!(
            "dimension mismatch: q is {}, p is {}",
            q.mean.len(),
            p.mean.len()
        )));
    }
    let mut kl = 0.0;
    for k in 0..q.mean.len() {
        let (mq, sq) = (q.mean[k], q.std[k]);
        let (mp, sp) = (p.mean[k], p.std[k]);
        if !(sq > 0.0 && sp > 0.0) {
            return Err(Error::invalid_input("non-positive std in KL"));
        }
        kl += (sp / sq).ln() + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5;
    }
    Ok(kl)
}

/// Mean over index-paired bases of the closed-form KL between the spatial
/// Gaussians KL(N_a || N_b); embeddings are excluded.
pub fn basis_set_kl(a: &GaussianBasisSet, b: &GaussianBasisSet, jitter: f64) -> Result<f64> {
    if a.count() != b.count() {
        return Err(Error::invalid_input(format!(
            "basis count mismatch: {} vs {}",
            a.count(),
            b.count()
        )));
    }
    if a.dim != b.dim {
        return Err(Error::invalid_input("basis dimension mismatch"));
    }
    let kind = RotKind::for_dim(a.dim);
    let (mu_a, ls_a, rot_a, _) = a.to_tensors();
    let (mu_b, ls_b, rot_b, _) = b.to_tensors();
    let per_pair = gauss::basis_pair_kl_forward(
        &mu_a,
        &ls_a,
        rot_a.as_ref(),
        &mu_b,
        &ls_b,
        rot_b.as_ref(),
        kind,
        jitter,
    );
    Ok(per_pair.data.iter().sum::<f64>() / a.count() as f64)
}

/// Draw from a basis's spatial Gaussian: mu + R sqrt(diag(var)) eps.
pub fn sample_basis_gaussian(
    basis: &GaussianBasis,
    jitter: f64,
    eps: &[f64],
) -> Result<Vec<f64>> {
    let d = basis.dim();
    let vars = variances(basis, jitter)?;
    let rot = basis.rotation.matrix()?;
    let mut out = basis.center.clone();
    for j in 0..d {
        for k in 0..d {
            out[j] += rot[j * 3 + k] * vars[k].sqrt() * eps[k];
        }
    }
    Ok(out)
}

/// Log density of the basis's spatial Gaussian at x.
pub fn basis_log_pdf(basis: &GaussianBasis, x: &[f64], jitter: f64) -> Result<f64> {
    let d = basis.dim();
    let vars = variances(basis, jitter)?;
    let rot = basis.rotation.matrix()?;
    let mut quad = 0.0;
    let mut logdet = 0.0;
    for k in 0..d {
        let mut u = 0.0;
        for j in 0..d {
            u += rot[j * 3 + k] * (x[j] - basis.center[j]);
        }
        quad += u * u / vars[k];
        logdet += vars[k].ln();
    }
    Ok(-0.5 * (quad + logdet + d as f64 * (2.0 * std::f64::consts::PI).ln()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SQ2: f64 = std::f64::consts::SQRT_2;

    fn quat_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
        [
            a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
            a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
            a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
            a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
        ]
    }

    #[test]
    fn covariance_identity_case() {
        let cov =
            build_covariance(&[0.0, 0.0, 0.0], &Rotation::Quat([1.0, 0.0, 0.0, 0.0]), 0.0)
                .unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((cov.at(i, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn covariance_diagonal_case() {
        let cov = build_covariance(
            &[2.0f64.ln(), 0.0, 0.0],
            &Rotation::Quat([1.0, 0.0, 0.0, 0.0]),
            0.0,
        )
        .unwrap();
        assert!((cov.at(0, 0) - 4.0).abs() < 1e-12);
        assert!((cov.at(1, 1) - 1.0).abs() < 1e-12);
        assert!((cov.at(2, 2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn covariance_rotated_case() {
        // 90 degrees about z maps the x-axis variance onto y
        let cov = build_covariance(
            &[2.0f64.ln(), 0.0, 0.0],
            &Rotation::Quat([SQ2 / 2.0, 0.0, 0.0, SQ2 / 2.0]),
            0.0,
        )
        .unwrap();
        let expect = [1.0, 0.0, 0.0, 0.0, 4.0, 0.0, 0.0, 0.0, 1.0];
        for (a, e) in cov.data.iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn covariance_errors() {
        assert!(matches!(
            build_covariance(&[f64::NAN, 0.0, 0.0], &Rotation::Quat([1.0, 0.0, 0.0, 0.0]), 0.0),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            build_covariance(&[0.0, 0.0, 0.0], &Rotation::Quat([0.0; 4]), 0.0),
            Err(Error::DegenerateRotation { .. })
        ));
    }

    #[test]
    fn covariance_symmetric_positive_definite() {
        // symmetric within 1e-12, eigenvalues >= jitter (checked via
        // quadratic form over probe vectors)
        let mut rng = crate::rng::stream(42, "cov-prop", 0);
        use rand::Rng;
        for _ in 0..1000 {
            let ls: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-3 {
                continue;
            }
            let qn: [f64; 4] = std::array::from_fn(|i| q[i] / norm);
            let cov = build_covariance(&ls, &Rotation::Quat(qn), 1e-6).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert!((cov.at(i, j) - cov.at(j, i)).abs() < 1e-12);
                }
            }
            for _ in 0..4 {
                let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let vn: f64 = v.iter().map(|x| x * x).sum();
                if vn < 1e-12 {
                    continue;
                }
                let mut quad = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        quad += v[i] * cov.at(i, j) * v[j];
                    }
                }
                assert!(quad >= 1e-6 * vn * (1.0 - 1e-9), "quad {quad} vs {}", 1e-6 * vn);
            }
        }
    }

    #[test]
    fn rbf_weight_examples() {
        let b = GaussianBasis::isotropic(vec![0.2, -0.1, 0.4], 0.0, vec![1.0]);
        assert!((rbf_weight(&[0.2, -0.1, 0.4], &b, 0.0).unwrap() - 1.0).abs() < 1e-15);

        let w = rbf_weight(&[1.2, -0.1, 0.4], &b, 0.0).unwrap();
        assert!((w - (-0.5f64).exp()).abs() < 1e-12, "unit offset: {w}");

        let b2 = GaussianBasis {
            center: vec![0.0, 0.0, 0.0],
            log_scale: vec![2.0f64.ln(), 0.0, 0.0],
            rotation: Rotation::Quat([1.0, 0.0, 0.0, 0.0]),
            embedding: vec![1.0],
        };
        let w2 = rbf_weight(&[2.0, 0.0, 0.0], &b2, 0.0).unwrap();
        assert!((w2 - (-0.5f64).exp()).abs() < 1e-12, "mahalanobis 1: {w2}");
    }

    #[test]
    fn rbf_weight_rotation_consistency() {
        // rotating both the offset and the basis by the same quaternion
        // leaves the weight unchanged
        let mut rng = crate::rng::stream(3, "rot-consistency", 0);
        use rand::Rng;
        for _ in 0..200 {
            let ls: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.5..1.0)).collect();
            let mut q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let mut qa: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            for arr in [&mut q, &mut qa] {
                let n = arr.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
                arr.iter_mut().for_each(|v| *v /= n);
            }
            let offset: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let basis = GaussianBasis {
                center: vec![0.0; 3],
                log_scale: ls.clone(),
                rotation: Rotation::Quat(q),
                embedding: vec![],
            };
            let w0 = rbf_weight(&offset, &basis, DEFAULT_JITTER).unwrap();

            let ra = gauss::quat_to_rot(&qa);
            let mut rotated = vec![0.0; 3];
            for i in 0..3 {
                for j in 0..3 {
                    rotated[i] += ra[i * 3 + j] * offset[j];
                }
            }
            let basis2 = GaussianBasis {
                center: vec![0.0; 3],
                log_scale: ls,
                rotation: Rotation::Quat(quat_mul(&qa, &q)),
                embedding: vec![],
            };
            let w1 = rbf_weight(&rotated, &basis2, DEFAULT_JITTER).unwrap();
            assert!((w0 - w1).abs() < 1e-10, "w0={w0} w1={w1}");
        }
    }

    #[test]
    fn aggregate_examples() {
        let v = vec![0.3, -0.7, 2.0];
        let b = GaussianBasis::isotropic(vec![0.1, 0.1, 0.1], 0.0, v.clone());
        let agg = aggregate_embeddings(&[0.1, 0.1, 0.1], &GaussianBasisSet::new(vec![b]).unwrap(), 0.0)
            .unwrap();
        for (a, e) in agg.iter().zip(v.iter()) {
            assert!((a - e).abs() < 1e-14);
        }

        // symmetric cancellation
        let b1 = GaussianBasis::isotropic(vec![0.0, 0.0, 0.0], 0.0, vec![1.0, 2.0]);
        let b2 = GaussianBasis::isotropic(vec![0.0, 0.0, 0.0], 0.0, vec![-1.0, -2.0]);
        let set = GaussianBasisSet::new(vec![b1, b2]).unwrap();
        let agg = aggregate_embeddings(&[0.37, -0.2, 0.9], &set, 0.0).unwrap();
        assert!(agg.iter().all(|v| v.abs() < 1e-14));

        // far basis contributes only the clamp floor
        let near = GaussianBasis::isotropic(vec![0.0, 0.0, 0.0], 0.0, vec![1.0]);
        let far = GaussianBasis::isotropic(vec![20.0, 0.0, 0.0], 0.0, vec![1000.0]);
        let wfar = rbf_weight(&[0.0, 0.0, 0.0], &far, 0.0).unwrap();
        assert!((wfar - EXPONENT_FLOOR.exp()).abs() < 1e-40);
        let set = GaussianBasisSet::new(vec![near, far]).unwrap();
        let agg = aggregate_embeddings(&[0.0, 0.0, 0.0], &set, 0.0).unwrap();
        assert!((agg[0] - 1.0).abs() < 1e-20, "agg {}", agg[0]);

        assert!(matches!(
            GaussianBasisSet::new(vec![]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn diag_kl_examples() {
        let std_normal = DiagonalGaussian { mean: vec![0.0; 3], std: vec![1.0; 3] };
        assert_eq!(diag_gaussian_kl(&std_normal, &std_normal).unwrap(), 0.0);

        let q = DiagonalGaussian { mean: vec![0.0], std: vec![1.0] };
        let p = DiagonalGaussian { mean: vec![1.0], std: vec![1.0] };
        assert!((diag_gaussian_kl(&q, &p).unwrap() - 0.5).abs() < 1e-15);

        let q = DiagonalGaussian { mean: vec![0.0], std: vec![2.0] };
        let p = DiagonalGaussian { mean: vec![0.0], std: vec![1.0] };
        let expect = (0.5f64).ln() + 2.0 - 0.5;
        assert!((diag_gaussian_kl(&q, &p).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.80685).abs() < 1e-4);

        let bad = DiagonalGaussian { mean: vec![0.0, 1.0], std: vec![1.0, 1.0] };
        assert!(diag_gaussian_kl(&q, &bad).is_err());
    }

    #[test]
    fn basis_set_kl_examples() {
        let a = GaussianBasis::isotropic(vec![0.0, 0.0, 0.0], 0.0, vec![]);
        let b = GaussianBasis::isotropic(vec![1.0, 0.0, 0.0], 0.0, vec![]);
        let sa = GaussianBasisSet::new(vec![a.clone()]).unwrap();
        let sb = GaussianBasisSet::new(vec![b]).unwrap();
        assert_eq!(basis_set_kl(&sa, &sa, 0.0).unwrap(), 0.0);
        assert!((basis_set_kl(&sa, &sb, 0.0).unwrap() - 0.5).abs() < 1e-12);

        let wide = GaussianBasis {
            center: vec![0.0, 0.0, 0.0],
            log_scale: vec![2.0f64.ln(), 0.0, 0.0],
            rotation: Rotation::Quat([1.0, 0.0, 0.0, 0.0]),
            embedding: vec![],
        };
        let sw = GaussianBasisSet::new(vec![wide]).unwrap();
        let expect = 0.5 * (6.0 - 3.0 - 4.0f64.ln());
        assert!((basis_set_kl(&sw, &sa, 0.0).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.80685).abs() < 1e-4);

        // count mismatch
        let two = GaussianBasisSet::new(vec![a.clone(), a]).unwrap();
        assert!(matches!(basis_set_kl(&two, &sa, 0.0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn basis_set_kl_positive_when_centers_differ() {
        let mut rng = crate::rng::stream(5, "kl-pos", 0);
        use rand::Rng;
        for _ in 0..50 {
            let mk = |center: Vec<f64>, rng: &mut rand_chacha::ChaCha8Rng| GaussianBasis {
                center,
                log_scale: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                rotation: Rotation::Quat([1.0, 0.0, 0.0, 0.0]),
                embedding: vec![],
            };
            let c1: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut c2 = c1.clone();
            c2[0] += 0.1;
            let a = GaussianBasisSet::new(vec![mk(c1, &mut rng)]).unwrap();
            let b = GaussianBasisSet::new(vec![mk(c2, &mut rng)]).unwrap();
            assert!(basis_set_kl(&a, &b, DEFAULT_JITTER).unwrap() > 0.0);
        }
    }
}
