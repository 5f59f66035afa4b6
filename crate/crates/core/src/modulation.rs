//! Style modulation of field-network weights: a latent-derived style
//! vector scales the rows of a weight matrix, and each column is then
//! renormalized, w''_ij = s_i w_ij / sqrt(sum_i (s_i w_ij)^2 + eps).
//!
//! The forward pass never materializes per-group weight copies: scaling
//! rows of W by s is the same as scaling the input features, and the
//! column norms come from one small matmul of squares.

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::latents::STD_FLOOR;
use crate::nn::{Activation, Builder, Linear, Mlp, ParamSet, Session};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentKind {
    Global,
    Local,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputHead {
    /// 1D regression: predictive mean and a softplus-floored std.
    ScalarMeanStd,
    /// 2D image regression/completion: sigmoid RGB.
    Rgb,
    /// 3D radiance: sigmoid RGB plus softplus density.
    RgbDensity,
}

impl OutputHead {
    pub fn out_dim(self) -> usize {
        match self {
            OutputHead::ScalarMeanStd => 2,
            OutputHead::Rgb => 3,
            OutputHead::RgbDensity => 4,
        }
    }
}

/// Field-network layout: full width chain (input dim first, head output
/// last) and, per layer, which latent modulates it.
#[derive(Clone, Debug)]
pub struct ModulatedFieldConfig {
    pub widths: Vec<usize>,
    pub modulated: Vec<Option<LatentKind>>,
    pub epsilon: f64,
    pub head: OutputHead,
}

impl ModulatedFieldConfig {
    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::config("field needs at least one layer"));
        }
        if self.modulated.len() != self.n_layers() {
            return Err(Error::config("modulation map length must equal layer count"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        if *self.widths.last().unwrap() != self.head.out_dim() {
            return Err(Error::config(format!(
                "last width {} does not match head {:?}",
                self.widths.last().unwrap(),
                self.head
            )));
        }
        Ok(())
    }

    /// 3D radiance field: 4 layers, layer 1 modulated by the global
    /// latent, layer 2 by the local latent, layers 3-4 shared.
    pub fn radiance(in_dim: usize, width: usize) -> Self {
        ModulatedFieldConfig {
            widths: vec![in_dim, width, width, width, OutputHead::RgbDensity.out_dim()],
            modulated: vec![
                Some(LatentKind::Global),
                Some(LatentKind::Local),
                None,
                None,
            ],
            epsilon: DEFAULT_EPSILON,
            head: OutputHead::RgbDensity,
        }
    }

    /// 1D/2D field: 5 layers, layers 1-2 modulated by the global latent,
    /// layer 3 by the local latent, layers 4-5 shared.
    pub fn signal(in_dim: usize, width: usize, head: OutputHead) -> Self {
        ModulatedFieldConfig {
            widths: vec![in_dim, width, width, width, width, head.out_dim()],
            modulated: vec![
                Some(LatentKind::Global),
                Some(LatentKind::Global),
                Some(LatentKind::Local),
                None,
                None,
            ],
            epsilon: DEFAULT_EPSILON,
            head,
        }
    }
}

/// Two-layer MLP mapping a latent sample to a style vector. No positivity
/// constraint: sign flips are legal styles.
#[derive(Clone, Debug)]
pub struct StyleNet {
    mlp: Mlp,
}

impl StyleNet {
    pub fn build(b: &mut Builder, name: &str, latent_dim: usize, d_in: usize) -> Self {
        StyleNet { mlp: b.mlp(name, &[latent_dim, latent_dim, d_in], Activation::Relu) }
    }

    pub fn forward(&self, s: &mut Session, z: Var) -> Var {
        self.mlp.forward(s, z)
    }

    pub fn eval_plain(&self, ps: &ParamSet, z: &[f64]) -> Vec<f64> {
        let mut s = Session::new(ps);
        let zv = s.g.constant(Tensor::row(z.to_vec()));
        let out = self.forward(&mut s, zv);
        s.g.val(out).data.clone()
    }
}

/// Plain-value modulation: scale rows of W by s, renormalize columns.
pub fn modulate_normalize(w: &Tensor, s: &[f64], epsilon: f64) -> Result<Tensor> {
    if s.len() != w.rows {
        return Err(Error::shape(format!(
            "style length {} vs weight rows {}",
            s.len(),
            w.rows
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::config("epsilon must be positive"));
    }
    let mut out = w.clone();
    for (i, &si) in s.iter().enumerate() {
        for v in out.row_slice_mut(i) {
            *v *= si;
        }
    }
    for j in 0..out.cols {
        let mut norm_sq = epsilon;
        for i in 0..out.rows {
            let v = out.at(i, j);
            norm_sq += v * v;
        }
        let norm = norm_sq.sqrt();
        for i in 0..out.rows {
            *out.at_mut(i, j) /= norm;
        }
    }
    Ok(out)
}

/// The modulated field network. Shared layers are ordinary linears;
/// modulated layers scale input features by per-group styles and divide
/// by the per-group column norms (mathematically identical to running
/// each group through its own modulated weight matrix).
#[derive(Clone, Debug)]
pub struct FieldNet {
    pub cfg: ModulatedFieldConfig,
    layers: Vec<Linear>,
    styles: Vec<Option<StyleNet>>,
}

impl FieldNet {
    pub fn build(b: &mut Builder, name: &str, cfg: ModulatedFieldConfig, latent_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::new();
        let mut styles = Vec::new();
        for i in 0..cfg.n_layers() {
            layers.push(b.linear(&format!("{name}.l{i}"), cfg.widths[i], cfg.widths[i + 1]));
            styles.push(
                cfg.modulated[i]
                    .map(|_| StyleNet::build(b, &format!("{name}.s{i}"), latent_dim, cfg.widths[i])),
            );
        }
        Ok(FieldNet { cfg, layers, styles })
    }

    /// x_features [n, d0]; z_global [1, k]; z_local [G, k] with
    /// n = G * group_size. Returns the raw head output [n, head_dim]
    /// before output activations.
    fn forward_raw(
        &self,
        s: &mut Session,
        x_features: Var,
        z_global: Option<Var>,
        z_local: Option<Var>,
        group_size: usize,
    ) -> Var {
        let n = s.g.val(x_features).rows;
        let mut h = x_features;
        for i in 0..self.layers.len() {
            let lin = &self.layers[i];
            h = match self.cfg.modulated[i] {
                None => lin.forward(s, h),
                Some(kind) => {
                    let z = match kind {
                        LatentKind::Global => z_global,
                        LatentKind::Local => z_local,
                    };
                    match z {
                        None => {
                            // latent disabled (ablation): all-ones style,
                            // i.e. plain column normalization
                            let g_rows = match kind {
                                LatentKind::Global => 1,
                                LatentKind::Local => n / group_size,
                            };
                            let ones =
                                s.g.constant(Tensor::full(g_rows, self.cfg.widths[i], 1.0));
                            self.modulated_layer(s, h, lin, ones, kind, group_size)
                        }
                        Some(z) => {
                            let style = self.styles[i].as_ref().expect("style net").forward(s, z);
                            self.modulated_layer(s, h, lin, style, kind, group_size)
                        }
                    }
                }
            };
            if i + 1 < self.layers.len() {
                h = s.g.relu(h);
            }
        }
        h
    }

    fn modulated_layer(
        &self,
        s: &mut Session,
        h: Var,
        lin: &Linear,
        styles: Var,
        kind: LatentKind,
        group_size: usize,
    ) -> Var {
        let w = s.p(lin.w);
        let b = s.p(lin.b);
        let s_sq = s.g.square(styles);
        let w_sq = s.g.square(w);
        let norm_sq = s.g.matmul(s_sq, w_sq);
        let norm_sq = s.g.add_const(norm_sq, self.cfg.epsilon);
        let norms = s.g.sqrt(norm_sq);
        let (scaled, y) = match kind {
            LatentKind::Global => {
                let scaled = s.g.mul_b(h, styles);
                let y = s.g.matmul(scaled, w);
                (scaled, s.g.div_b(y, norms))
            }
            LatentKind::Local => {
                let s_pts = s.g.repeat_rows_grouped(styles, group_size);
                let scaled = s.g.mul(h, s_pts);
                let y = s.g.matmul(scaled, w);
                let n_pts = s.g.repeat_rows_grouped(norms, group_size);
                (scaled, s.g.div(y, n_pts))
            }
        };
        let _ = scaled;
        s.g.add_b(y, b)
    }

    /// Full forward pass with output activations applied.
    pub fn forward(
        &self,
        s: &mut Session,
        x_features: Var,
        z_global: Option<Var>,
        z_local: Option<Var>,
        group_size: usize,
    ) -> FieldOutput {
        let raw = self.forward_raw(s, x_features, z_global, z_local, group_size);
        match self.cfg.head {
            OutputHead::Rgb => FieldOutput::Rgb(s.g.sigmoid(raw)),
            OutputHead::RgbDensity => {
                let rgb_raw = s.g.slice_cols(raw, 0, 3);
                let rgb = s.g.sigmoid(rgb_raw);
                let d_raw = s.g.slice_cols(raw, 3, 4);
                let density = s.g.softplus(d_raw);
                FieldOutput::RgbDensity { rgb, density }
            }
            OutputHead::ScalarMeanStd => {
                let mean = s.g.slice_cols(raw, 0, 1);
                let srow = s.g.slice_cols(raw, 1, 2);
                let sp = s.g.softplus(srow);
                let std = s.g.add_const(sp, STD_FLOOR);
                FieldOutput::ScalarMeanStd { mean, std }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum FieldOutput {
    Rgb(Var),
    RgbDensity { rgb: Var, density: Var },
    ScalarMeanStd { mean: Var, std: Var },
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn modulate_normalize_examples() {
        // unit-norm columns with ones style stay put (up to eps)
        let w = Tensor::from_vec(2, 2, vec![0.6, 1.0, 0.8, 0.0]);
        let out = modulate_normalize(&w, &[1.0, 1.0], 1e-12).unwrap();
        for (a, b) in out.data.iter().zip(w.data.iter()) {
            assert!((a - b).abs() < 1e-9);
        }

        // single column [3,4] -> [0.6, 0.8]
        let w = Tensor::from_vec(2, 1, vec![3.0, 4.0]);
        let out = modulate_normalize(&w, &[1.0, 1.0], 1e-15).unwrap();
        assert!((out.data[0] - 0.6).abs() < 1e-12);
        assert!((out.data[1] - 0.8).abs() < 1e-12);

        // positive rescaling of the style cancels
        let w = Tensor::from_vec(3, 2, vec![0.3, -1.2, 0.7, 0.4, -0.5, 2.0]);
        let s = [0.9, -1.4, 0.3];
        let s2: Vec<f64> = s.iter().map(|v| v * 2.0).collect();
        let a = modulate_normalize(&w, &s, 1e-12).unwrap();
        let b = modulate_normalize(&w, &s2, 1e-12).unwrap();
        for (x, y) in a.data.iter().zip(b.data.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn modulated_column_norms_bounded() {
        let mut rng = crate::rng::stream(23, "modnorm", 0);
        use rand::Rng;
        for _ in 0..200 {
            let (di, dj) = (rng.gen_range(1..6), rng.gen_range(1..6));
            let w = Tensor::from_vec(
                di,
                dj,
                (0..di * dj).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            );
            let s: Vec<f64> = (0..di).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let out = modulate_normalize(&w, &s, DEFAULT_EPSILON).unwrap();
            for j in 0..dj {
                let norm: f64 = (0..di).map(|i| out.at(i, j).powi(2)).sum::<f64>().sqrt();
                assert!(norm <= 1.0 + 1e-6, "column norm {norm}");
            }
        }
    }

    #[test]
    fn all_zero_column_stays_near_zero() {
        let w = Tensor::from_vec(2, 2, vec![0.0, 1.0, 0.0, 2.0]);
        let out = modulate_normalize(&w, &[1.0, 1.0], DEFAULT_EPSILON).unwrap();
        assert_eq!(out.at(0, 0), 0.0);
        assert_eq!(out.at(1, 0), 0.0);
        assert!(out.all_finite());
    }

    fn zero_style_net_with_unit_bias(ps: &mut ParamSet, net: &StyleNet) {
        // zero every style parameter, then set the final bias to ones
        for layer in &net.mlp.layers {
            ps.get_mut(layer.w).data.iter_mut().for_each(|v| *v = 0.0);
            ps.get_mut(layer.b).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let last = net.mlp.layers.last().unwrap();
        ps.get_mut(last.b).data.iter_mut().for_each(|v| *v = 1.0);
    }

    #[test]
    fn style_vector_zero_init_gives_ones() {
        let mut ps = ParamSet::new();
        let mut b = Builder::new(&mut ps, ChaCha8Rng::seed_from_u64(4));
        let net = StyleNet::build(&mut b, "s", 6, 5);
        zero_style_net_with_unit_bias(&mut ps, &net);
        let s = net.eval_plain(&ps, &[0.3, -0.5, 1.0, 0.0, 2.0, -1.0]);
        assert_eq!(s, vec![1.0; 5]);
    }

    #[test]
    fn style_vector_depends_on_latent() {
        let mut ps = ParamSet::new();
        let mut b = Builder::new(&mut ps, ChaCha8Rng::seed_from_u64(8));
        let net = StyleNet::build(&mut b, "s", 4, 4);
        let a = net.eval_plain(&ps, &[0.1, 0.2, 0.3, 0.4]);
        let c = net.eval_plain(&ps, &[0.1, 0.2, 0.3, 0.5]);
        let diff: f64 = a.iter().zip(c.iter()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-9);
        // purity: same input, same output
        let a2 = net.eval_plain(&ps, &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(a, a2);
    }

    #[test]
    fn ones_style_equals_reference_normalized_forward() {
        let mut ps = ParamSet::new();
        let mut b = Builder::new(&mut ps, ChaCha8Rng::seed_from_u64(21));
        let cfg = ModulatedFieldConfig::radiance(5, 6);
        let eps = cfg.epsilon;
        let field = FieldNet::build(&mut b, "f", cfg, 3).unwrap();
        for i in [0usize, 1] {
            zero_style_net_with_unit_bias(&mut ps, field.styles[i].as_ref().unwrap());
        }

        let n = 4;
        let x = Tensor::from_vec(n, 5, (0..n * 5).map(|i| (i as f64 * 0.23).sin()).collect());
        let zg = Tensor::zeros(1, 3);
        let zl = Tensor::zeros(2, 3);
        let mut s = Session::new(&ps);
        let xv = s.g.constant(x.clone());
        let zgv = s.g.constant(zg);
        let zlv = s.g.constant(zl);
        let out = field.forward_raw(&mut s, xv, Some(zgv), Some(zlv), 2);
        let got = s.g.val(out).clone();

        // reference: modulate_normalize with all-ones styles per layer
        let mut h = x;
        for (i, lin) in field.layers.iter().enumerate() {
            let w = ps.get(lin.w);
            let bia = ps.get(lin.b);
            let weff = if field.cfg.modulated[i].is_some() {
                modulate_normalize(w, &vec![1.0; w.rows], eps).unwrap()
            } else {
                w.clone()
            };
            let mut y = Tensor::zeros(h.rows, weff.cols);
            crate::tensor::matmul(&h, &weff, &mut y);
            for r in 0..y.rows {
                for c in 0..y.cols {
                    *y.at_mut(r, c) += bia.data[c];
                }
            }
            if i + 1 < field.layers.len() {
                y.data.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = y;
        }
        for (a, b) in got.data.iter().zip(h.data.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn output_head_ranges() {
        let mut ps = ParamSet::new();
        let mut b = Builder::new(&mut ps, ChaCha8Rng::seed_from_u64(31));
        let field = FieldNet::build(&mut b, "f", ModulatedFieldConfig::radiance(4, 8), 4).unwrap();
        let mut s = Session::new(&ps);
        let x = s.g.constant(Tensor::from_vec(6, 4, (0..24).map(|i| i as f64 * 0.3 - 2.0).collect()));
        let zg = s.g.constant(Tensor::full(1, 4, 0.7));
        let zl = s.g.constant(Tensor::full(3, 4, -0.4));
        match field.forward(&mut s, x, Some(zg), Some(zl), 2) {
            FieldOutput::RgbDensity { rgb, density } => {
                for &v in &s.g.val(rgb).data {
                    assert!(v > 0.0 && v < 1.0);
                }
                for &v in &s.g.val(density).data {
                    assert!(v >= 0.0);
                }
            }
            _ => panic!("wrong head"),
        }
    }

    #[test]
    fn per_group_styles_match_per_group_weight_modulation() {
        // running two groups through the shared path equals running each
        // group through its own explicitly modulated weights
        let mut ps = ParamSet::new();
        let mut b = Builder::new(&mut ps, ChaCha8Rng::seed_from_u64(77));
        let lin = b.linear("w", 4, 3);
        let eps = 1e-8;
        let styles = Tensor::from_vec(2, 4, vec![0.5, -1.0, 2.0, 0.3, 1.5, 0.2, -0.7, 1.1]);
        let x = Tensor::from_vec(4, 4, (0..16).map(|i| (i as f64 * 0.7).cos()).collect());

        let mut s = Session::new(&ps);
        let xv = s.g.constant(x.clone());
        let sv = s.g.constant(styles.clone());
        let cfg = ModulatedFieldConfig {
            widths: vec![4, 3],
            modulated: vec![Some(LatentKind::Local)],
            epsilon: eps,
            head: OutputHead::Rgb,
        };
        let field = FieldNet { cfg, layers: vec![lin], styles: vec![None] };
        let y = field.modulated_layer(&mut s, xv, &field.layers[0], sv, LatentKind::Local, 2);
        let got = s.g.val(y).clone();

        let w = ps.get(field.layers[0].w);
        let bias = ps.get(field.layers[0].b);
        for g in 0..2 {
            let weff = modulate_normalize(w, styles.row_slice(g), eps).unwrap();
            for p in 0..2 {
                let row = x.row_slice(g * 2 + p);
                for c in 0..3 {
                    let mut acc = bias.data[c];
                    for i in 0..4 {
                        acc += row[i] * weff.at(i, c);
                    }
                    assert!((got.at(g * 2 + p, c) - acc).abs() < 1e-12);
                }
            }
        }
    }
}
