//! Shared Gaussian-basis kernels: rotation construction, RBF interaction
//! weights, and the closed-form KL between full-covariance pairs.
//!
//! Covariances are kept in factored form Sigma = R diag(exp(2 ls) + j) R^T
//! (the jitter commutes with the orthogonal R), so inverses and log-dets
//! are exact per-axis expressions and never need a linear solve.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RotKind {
    /// d = 1, covariance is a positive scalar
    None,
    /// d = 2, rotation parameterized by one angle
    Angle,
    /// d = 3, rotation parameterized by a unit quaternion (w, x, y, z)
    Quat,
}

impl RotKind {
    pub fn dim(self) -> usize {
        match self {
            RotKind::None => 1,
            RotKind::Angle => 2,
            RotKind::Quat => 3,
        }
    }

    pub fn rot_cols(self) -> usize {
        match self {
            RotKind::None => 0,
            RotKind::Angle => 1,
            RotKind::Quat => 4,
        }
    }

    pub fn for_dim(d: usize) -> RotKind {
        match d {
            1 => RotKind::None,
            2 => RotKind::Angle,
            3 => RotKind::Quat,
            _ => panic!("unsupported spatial dimension {d}"),
        }
    }
}

/// Row-major d x d rotation in a fixed 9-slot buffer.
pub type RotMat = [f64; 9];

pub fn identity_rot() -> RotMat {
    let mut r = [0.0; 9];
    r[0] = 1.0;
    r[4] = 1.0;
    r[8] = 1.0;
    r
}

pub fn quat_to_rot(q: &[f64]) -> RotMat {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ]
}

/// Partial derivatives of the rotation entries w.r.t. the (normalized)
/// quaternion components, in the same row-major layout.
pub fn quat_to_rot_grads(q: &[f64]) -> [RotMat; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = [0.0, -z, y, z, 0.0, -x, -y, x, 0.0].map(|v| 2.0 * v);
    let dx = [0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x].map(|v| 2.0 * v);
    let dy = [-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y].map(|v| 2.0 * v);
    let dz = [-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0].map(|v| 2.0 * v);
    [dw, dx, dy, dz]
}

pub fn angle_to_rot(theta: f64) -> RotMat {
    let (s, c) = theta.sin_cos();
    let mut r = [0.0; 9];
    r[0] = c;
    r[1] = -s;
    r[3] = s;
    r[4] = c;
    r
}

pub fn angle_to_rot_grad(theta: f64) -> RotMat {
    let (s, c) = theta.sin_cos();
    let mut r = [0.0; 9];
    r[0] = -s;
    r[1] = -c;
    r[3] = c;
    r[4] = -s;
    r
}

/// Rotation for one basis row; quaternions are renormalized (they arrive
/// normalized from the encoder head, this absorbs float drift).
fn rot_for_row(kind: RotKind, rot: Option<&Tensor>, r: usize) -> (RotMat, f64, [f64; 4]) {
    match kind {
        RotKind::None => (identity_rot(), 1.0, [0.0; 4]),
        RotKind::Angle => {
            let theta = rot.expect("angle rotation").at(r, 0);
            (angle_to_rot(theta), 1.0, [theta, 0.0, 0.0, 0.0])
        }
        RotKind::Quat => {
            let row = rot.expect("quaternion rotation").row_slice(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm > 1e-8, "degenerate quaternion reached kernel");
            let qn = [row[0] / norm, row[1] / norm, row[2] / norm, row[3] / norm];
            (quat_to_rot(&qn), norm, qn)
        }
    }
}

/// Chain a gradient w.r.t. rotation entries back to the rotation
/// parameters, including the quaternion-normalization Jacobian.
fn rot_grad_to_params(kind: RotKind, g_rot: &RotMat, norm: f64, qn: &[f64; 4], out: &mut [f64]) {
    match kind {
        RotKind::None => {}
        RotKind::Angle => {
            let dr = angle_to_rot_grad(qn[0]);
            let mut acc = 0.0;
            for i in 0..9 {
                acc += g_rot[i] * dr[i];
            }
            out[0] += acc;
        }
        RotKind::Quat => {
            let drs = quat_to_rot_grads(qn);
            let mut gq_hat = [0.0f64; 4];
            for (k, dr) in drs.iter().enumerate() {
                let mut acc = 0.0;
                for i in 0..9 {
                    acc += g_rot[i] * dr[i];
                }
                gq_hat[k] = acc;
            }
            // q_hat = q / |q|  =>  dq = (I - q_hat q_hat^T) gq_hat / |q|
            let dot: f64 = qn.iter().zip(gq_hat.iter()).map(|(&a, &b)| a * b).sum();
            for k in 0..4 {
                out[k] += (gq_hat[k] - qn[k] * dot) / norm;
            }
        }
    }
}

/// Per-axis precision eigenvalues 1 / (exp(2 ls) + jitter).
#[inline]
fn prec_diag(ls: &[f64], jitter: f64, out: &mut [f64]) {
    for (o, &l) in out.iter_mut().zip(ls.iter()) {
        *o = 1.0 / ((2.0 * l).exp() + jitter);
    }
}

pub fn rbf_weights_forward(
    points: &Tensor,
    centers: &Tensor,
    log_scales: &Tensor,
    rot: Option<&Tensor>,
    kind: RotKind,
    jitter: f64,
    exponent_floor: f64,
) -> Tensor {
    let d = kind.dim();
    let (n, nr) = (points.rows, centers.rows);
    let mut rots = vec![identity_rot(); nr];
    let mut precs = vec![[0.0f64; 3]; nr];
    for r in 0..nr {
        rots[r] = rot_for_row(kind, rot, r).0;
        prec_diag(log_scales.row_slice(r), jitter, &mut precs[r][..d]);
    }
    let mut out = Tensor::zeros(n, nr);
    for i in 0..n {
        let x = points.row_slice(i);
        let orow = out.row_slice_mut(i);
        for r in 0..nr {
            let mu = centers.row_slice(r);
            let rm = &rots[r];
            let pd = &precs[r];
            let mut e = 0.0;
            for k in 0..d {
                let mut u = 0.0;
                for j in 0..d {
                    u += rm[j * 3 + k] * (x[j] - mu[j]);
                }
                e += pd[k] * u * u;
            }
            orow[r] = (-0.5 * e).max(exponent_floor).exp();
        }
    }
    out
}

pub struct RbfGrads {
    pub points: Tensor,
    pub centers: Tensor,
    pub log_scales: Tensor,
    pub rot: Option<Tensor>,
}

#[allow(clippy::too_many_arguments)]
pub fn rbf_weights_backward(
    grad: &Tensor,
    weights: &Tensor,
    points: &Tensor,
    centers: &Tensor,
    log_scales: &Tensor,
    rot: Option<&Tensor>,
    kind: RotKind,
    jitter: f64,
    exponent_floor: f64,
) -> RbfGrads {
    let d = kind.dim();
    let (n, nr) = (points.rows, centers.rows);
    let mut g_points = Tensor::zeros(n, d);
    let mut g_centers = Tensor::zeros(nr, d);
    let mut g_ls = Tensor::zeros(nr, d);
    let mut g_rot = rot.map(|t| Tensor::zeros(t.rows, t.cols));

    for r in 0..nr {
        let (rm, norm, qn) = rot_for_row(kind, rot, r);
        let ls = log_scales.row_slice(r);
        let mut pd = [0.0f64; 3];
        prec_diag(ls, jitter, &mut pd[..d]);
        let mu = centers.row_slice(r);
        let mut acc_rot = [0.0f64; 9];
        let mut acc_mu = [0.0f64; 3];
        let mut acc_ls = [0.0f64; 3];
        for i in 0..n {
            let gw = grad.at(i, r);
            if gw == 0.0 {
                continue;
            }
            let x = points.row_slice(i);
            let mut delta = [0.0f64; 3];
            for j in 0..d {
                delta[j] = x[j] - mu[j];
            }
            let mut u = [0.0f64; 3];
            for k in 0..d {
                for j in 0..d {
                    u[k] += rm[j * 3 + k] * delta[j];
                }
            }
            let mut e = 0.0;
            for k in 0..d {
                e += pd[k] * u[k] * u[k];
            }
            e *= -0.5;
            if e <= exponent_floor {
                continue; // clamped: weight is constant here
            }
            let ge = gw * weights.at(i, r);
            // gu_k = -pd_k u_k ge ; gdelta = R gu
            let mut gu = [0.0f64; 3];
            for k in 0..d {
                gu[k] = -pd[k] * u[k] * ge;
            }
            let prow = g_points.row_slice_mut(i);
            for j in 0..d {
                let mut gd = 0.0;
                for k in 0..d {
                    gd += rm[j * 3 + k] * gu[k];
                }
                prow[j] += gd;
                acc_mu[j] -= gd;
            }
            // g pd_k = -1/2 u_k^2 ge ; chain to ls
            for k in 0..d {
                let gpd = -0.5 * u[k] * u[k] * ge;
                let e2 = (2.0 * ls[k]).exp();
                acc_ls[k] += gpd * (-2.0 * e2 * pd[k] * pd[k]);
            }
            // gR_{jk} = delta_j * gu_k
            if kind != RotKind::None {
                for j in 0..d {
                    for k in 0..d {
                        acc_rot[j * 3 + k] += delta[j] * gu[k];
                    }
                }
            }
        }
        let crow = g_centers.row_slice_mut(r);
        let lrow = g_ls.row_slice_mut(r);
        for j in 0..d {
            crow[j] += acc_mu[j];
            lrow[j] += acc_ls[j];
        }
        if let Some(gr) = g_rot.as_mut() {
            rot_grad_to_params(kind, &acc_rot, norm, &qn, gr.row_slice_mut(r));
        }
    }
    RbfGrads { points: g_points, centers: g_centers, log_scales: g_ls, rot: g_rot }
}

/// KL(N_a || N_b) per index-paired row, closed form for the factored
/// covariances. Output [R,1].
#[allow(clippy::too_many_arguments)]
pub fn basis_pair_kl_forward(
    mu_a: &Tensor,
    ls_a: &Tensor,
    rot_a: Option<&Tensor>,
    mu_b: &Tensor,
    ls_b: &Tensor,
    rot_b: Option<&Tensor>,
    kind: RotKind,
    jitter: f64,
) -> Tensor {
    let d = kind.dim();
    let nr = mu_a.rows;
    assert_eq!(mu_b.rows, nr, "basis pair count mismatch");
    let mut out = Tensor::zeros(nr, 1);
    for r in 0..nr {
        if pair_rows_identical(mu_a, ls_a, rot_a, mu_b, ls_b, rot_b, r) {
            continue; // KL is exactly zero at equality
        }
        let (ra, _, _) = rot_for_row(kind, rot_a, r);
        let (rb, _, _) = rot_for_row(kind, rot_b, r);
        let mut da = [0.0f64; 3];
        let mut db = [0.0f64; 3];
        prec_diag_inv(ls_a.row_slice(r), jitter, &mut da[..d]);
        prec_diag_inv(ls_b.row_slice(r), jitter, &mut db[..d]);
        // M = Rb^T Ra
        let mut m = [0.0f64; 9];
        for k in 0..d {
            for l in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += rb[j * 3 + k] * ra[j * 3 + l];
                }
                m[k * 3 + l] = acc;
            }
        }
        // u = Rb^T (mu_a - mu_b)
        let mut u = [0.0f64; 3];
        for k in 0..d {
            for j in 0..d {
                u[k] += rb[j * 3 + k] * (mu_a.at(r, j) - mu_b.at(r, j));
            }
        }
        let mut tr = 0.0;
        for k in 0..d {
            for l in 0..d {
                tr += m[k * 3 + l] * m[k * 3 + l] * da[l] / db[k];
            }
        }
        let mut quad = 0.0;
        let mut logdet = 0.0;
        for k in 0..d {
            quad += u[k] * u[k] / db[k];
            logdet += db[k].ln() - da[k].ln();
        }
        out.data[r] = 0.5 * (tr + quad - d as f64 + logdet);
    }
    out
}

/// Both Gaussians of a pair bitwise equal: KL and its gradients are
/// exactly zero (equality is the joint minimum).
#[allow(clippy::too_many_arguments)]
fn pair_rows_identical(
    mu_a: &Tensor,
    ls_a: &Tensor,
    rot_a: Option<&Tensor>,
    mu_b: &Tensor,
    ls_b: &Tensor,
    rot_b: Option<&Tensor>,
    r: usize,
) -> bool {
    if mu_a.row_slice(r) != mu_b.row_slice(r) || ls_a.row_slice(r) != ls_b.row_slice(r) {
        return false;
    }
    match (rot_a, rot_b) {
        (None, None) => true,
        (Some(a), Some(b)) => a.row_slice(r) == b.row_slice(r),
        _ => false,
    }
}

/// Variance eigenvalues exp(2 ls) + jitter.
#[inline]
fn prec_diag_inv(ls: &[f64], jitter: f64, out: &mut [f64]) {
    for (o, &l) in out.iter_mut().zip(ls.iter()) {
        *o = (2.0 * l).exp() + jitter;
    }
}

pub struct PairKlGrads {
    pub mu_a: Tensor,
    pub ls_a: Tensor,
    pub rot_a: Option<Tensor>,
    pub mu_b: Tensor,
    pub ls_b: Tensor,
    pub rot_b: Option<Tensor>,
}

#[allow(clippy::too_many_arguments)]
pub fn basis_pair_kl_backward(
    grad: &Tensor,
    mu_a: &Tensor,
    ls_a: &Tensor,
    rot_a: Option<&Tensor>,
    mu_b: &Tensor,
    ls_b: &Tensor,
    rot_b: Option<&Tensor>,
    kind: RotKind,
    jitter: f64,
) -> PairKlGrads {
    let d = kind.dim();
    let nr = mu_a.rows;
    let mut g_mu_a = Tensor::zeros(nr, d);
    let mut g_mu_b = Tensor::zeros(nr, d);
    let mut g_ls_a = Tensor::zeros(nr, d);
    let mut g_ls_b = Tensor::zeros(nr, d);
    let mut g_rot_a = rot_a.map(|t| Tensor::zeros(t.rows, t.cols));
    let mut g_rot_b = rot_b.map(|t| Tensor::zeros(t.rows, t.cols));

    for r in 0..nr {
        let g = grad.data[r];
        if g == 0.0 || pair_rows_identical(mu_a, ls_a, rot_a, mu_b, ls_b, rot_b, r) {
            continue;
        }
        let (ra, norm_a, qa) = rot_for_row(kind, rot_a, r);
        let (rb, norm_b, qb) = rot_for_row(kind, rot_b, r);
        let lsa = ls_a.row_slice(r);
        let lsb = ls_b.row_slice(r);
        let mut da = [0.0f64; 3];
        let mut db = [0.0f64; 3];
        prec_diag_inv(lsa, jitter, &mut da[..d]);
        prec_diag_inv(lsb, jitter, &mut db[..d]);
        let mut m = [0.0f64; 9];
        for k in 0..d {
            for l in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += rb[j * 3 + k] * ra[j * 3 + l];
                }
                m[k * 3 + l] = acc;
            }
        }
        let mut v = [0.0f64; 3];
        for j in 0..d {
            v[j] = mu_a.at(r, j) - mu_b.at(r, j);
        }
        let mut u = [0.0f64; 3];
        for k in 0..d {
            for j in 0..d {
                u[k] += rb[j * 3 + k] * v[j];
            }
        }
        // means: d/dv = Rb (u / db)
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += rb[j * 3 + k] * u[k] / db[k];
            }
            let gv = g * acc;
            *g_mu_a.at_mut(r, j) += gv;
            *g_mu_b.at_mut(r, j) -= gv;
        }
        // variance eigenvalues
        for l in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += m[k * 3 + l] * m[k * 3 + l] / db[k];
            }
            let gda = 0.5 * g * (s - 1.0 / da[l]);
            *g_ls_a.at_mut(r, l) += gda * 2.0 * (2.0 * lsa[l]).exp();
        }
        for k in 0..d {
            let mut s = 0.0;
            for l in 0..d {
                s += m[k * 3 + l] * m[k * 3 + l] * da[l];
            }
            let gdb = 0.5 * g * (-(s + u[k] * u[k]) / (db[k] * db[k]) + 1.0 / db[k]);
            *g_ls_b.at_mut(r, k) += gdb * 2.0 * (2.0 * lsb[k]).exp();
        }
        if kind != RotKind::None {
            // G_kl = g * M_kl * da_l / db_k
            let mut gm = [0.0f64; 9];
            for k in 0..d {
                for l in 0..d {
                    gm[k * 3 + l] = g * m[k * 3 + l] * da[l] / db[k];
                }
            }
            // gRa = Rb G
            let mut gra = [0.0f64; 9];
            for i in 0..d {
                for l in 0..d {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += rb[i * 3 + k] * gm[k * 3 + l];
                    }
                    gra[i * 3 + l] = acc;
                }
            }
            // gRb = Ra G^T + g * v (u/db)^T
            let mut grb = [0.0f64; 9];
            for i in 0..d {
                for k in 0..d {
                    let mut acc = 0.0;
                    for l in 0..d {
                        acc += ra[i * 3 + l] * gm[k * 3 + l];
                    }
                    grb[i * 3 + k] = acc + g * v[i] * u[k] / db[k];
                }
            }
            if let Some(gr) = g_rot_a.as_mut() {
                rot_grad_to_params(kind, &gra, norm_a, &qa, gr.row_slice_mut(r));
            }
            if let Some(gr) = g_rot_b.as_mut() {
                rot_grad_to_params(kind, &grb, norm_b, &qb, gr.row_slice_mut(r));
            }
        }
    }
    PairKlGrads {
        mu_a: g_mu_a,
        ls_a: g_ls_a,
        rot_a: g_rot_a,
        mu_b: g_mu_b,
        ls_b: g_ls_b,
        rot_b: g_rot_b,
    }
}

/// Dense covariance R diag(exp(2 ls)) R^T + jitter I, row-major d x d.
pub fn covariance_dense(ls: &[f64], rot: &RotMat, jitter: f64) -> Vec<f64> {
    let d = ls.len();
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += rot[i * 3 + k] * (2.0 * ls[k]).exp() * rot[j * 3 + k];
            }
            out[i * d + j] = acc + if i == j { jitter } else { 0.0 };
        }
    }
    out
}
