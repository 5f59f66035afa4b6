//! Context tokenization and the self-attention encoder that predicts the
//! geometric basis set with two heads (Gaussian parameters, embeddings).

use crate::error::{Error, Result};
use crate::gauss::RotKind;
use crate::geometry::{GaussianBasis, GaussianBasisSet, Rotation, LOG_SCALE_MAX, LOG_SCALE_MIN};
use crate::graph::Var;
use crate::nn::{Activation, Builder, Mlp, ParamId, ParamSet, Session};
use crate::tensor::Tensor;
use crate::Modality;

#[derive(Clone, Debug)]
pub struct TokenSequence {
    /// [M_tok, D_tok] raw token features.
    pub tokens: Tensor,
    /// [M_tok, d] patch-center coordinates in [-1,1]^d.
    pub grid_positions: Tensor,
    pub modality: Modality,
}

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// One basis per token; must equal the tokenizer's output count.
    pub basis_count: usize,
    /// d_B, the semantic embedding width.
    pub embedding_dim: usize,
    pub token_feat_dim: usize,
    pub spatial_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.basis_count == 0 || self.embedding_dim == 0 {
            return Err(Error::config("basis_count and embedding_dim must be positive"));
        }
        Ok(())
    }
}

pub fn token_grid_side(extent: usize, patch: usize) -> usize {
    extent.div_ceil(patch)
}

fn patchify(
    channels: usize,
    h: usize,
    w: usize,
    data: &[f64],
    patch: usize,
    modality: Modality,
    positions: Tensor,
) -> TokenSequence {
    let gh = token_grid_side(h, patch);
    let gw = token_grid_side(w, patch);
    let feat = patch * patch * channels;
    let mut tokens = Tensor::zeros(gh * gw, feat);
    for pr in 0..gh {
        for pc in 0..gw {
            let row = tokens.row_slice_mut(pr * gw + pc);
            for dy in 0..patch {
                for dx in 0..patch {
                    let (y, x) = (pr * patch + dy, pc * patch + dx);
                    if y >= h || x >= w {
                        continue; // zero padding
                    }
                    let src = (y * w + x) * channels;
                    let dst = (dy * patch + dx) * channels;
                    row[dst..dst + channels].copy_from_slice(&data[src..src + channels]);
                }
            }
        }
    }
    TokenSequence { tokens, grid_positions: positions, modality }
}

fn grid_positions_2d(h: usize, w: usize, patch: usize) -> Tensor {
    let gh = token_grid_side(h, patch);
    let gw = token_grid_side(w, patch);
    let (hp, wp) = (gh * patch, gw * patch);
    let mut pos = Tensor::zeros(gh * gw, 2);
    for pr in 0..gh {
        for pc in 0..gw {
            let cx = ((pc as f64 + 0.5) * patch as f64) / wp as f64 * 2.0 - 1.0;
            let cy = ((pr as f64 + 0.5) * patch as f64) / hp as f64 * 2.0 - 1.0;
            let row = pos.row_slice_mut(pr * gw + pc);
            row[0] = cx;
            row[1] = cy;
        }
    }
    pos
}

/// Image in [0,1], row-major H x W x 3, zero-padded up to whole patches.
/// Token count is ceil(H/p) * ceil(W/p).
pub fn tokenize_image(image: &[f64], h: usize, w: usize, patch: usize) -> Result<TokenSequence> {
    if h == 0 || w == 0 || image.is_empty() {
        return Err(Error::invalid_input("empty image"));
    }
    if image.len() != h * w * 3 {
        return Err(Error::shape(format!("image buffer {} for {h}x{w}x3", image.len())));
    }
    if h < patch || w < patch {
        return Err(Error::invalid_input("image smaller than patch"));
    }
    Ok(patchify(3, h, w, image, patch, Modality::Image2d, grid_positions_2d(h, w, patch)))
}

/// Completion-context variant: 4 channels (RGB masked to zero where
/// unobserved, plus the 0/1 mask itself).
pub fn tokenize_masked_image(
    image: &[f64],
    mask: &[bool],
    h: usize,
    w: usize,
    patch: usize,
) -> Result<TokenSequence> {
    if image.len() != h * w * 3 || mask.len() != h * w {
        return Err(Error::shape("masked image buffer mismatch"));
    }
    let mut chans = vec![0.0; h * w * 4];
    for i in 0..h * w {
        let m = if mask[i] { 1.0 } else { 0.0 };
        for c in 0..3 {
            chans[i * 4 + c] = image[i * 3 + c] * m;
        }
        chans[i * 4 + 3] = m;
    }
    Ok(patchify(4, h, w, &chans, patch, Modality::Image2d, grid_positions_2d(h, w, patch)))
}

/// Ray context: per pixel (origin, direction, rgb) as a 9-channel image,
/// patchified like tokenize_image. Origins are divided by coord_scale so
/// token features stay O(1); grid positions are lifted to 3D as the
/// patch's central ray evaluated at mid depth, in normalized units.
pub fn tokenize_ray_context(
    rays: &[f64],
    pixels: &[f64],
    h: usize,
    w: usize,
    patch: usize,
    t_mid: f64,
    coord_scale: f64,
) -> Result<TokenSequence> {
    let n = h * w;
    if rays.len() != n * 6 {
        return Err(Error::shape(format!("ray buffer {} for {n} pixels", rays.len())));
    }
    if pixels.len() != n * 3 {
        return Err(Error::shape(format!("pixel buffer {} for {n} pixels", pixels.len())));
    }
    for i in 0..n {
        let d = &rays[i * 6 + 3..i * 6 + 6];
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(Error::invalid_input(format!(
                "ray {i} direction norm {norm} exceeds unit tolerance"
            )));
        }
    }
    let mut chans = vec![0.0; n * 9];
    for i in 0..n {
        for k in 0..3 {
            chans[i * 9 + k] = rays[i * 6 + k] / coord_scale;
        }
        chans[i * 9 + 3..i * 9 + 6].copy_from_slice(&rays[i * 6 + 3..i * 6 + 6]);
        chans[i * 9 + 6..i * 9 + 9].copy_from_slice(&pixels[i * 3..i * 3 + 3]);
    }
    let gh = token_grid_side(h, patch);
    let gw = token_grid_side(w, patch);
    let mut pos = Tensor::zeros(gh * gw, 3);
    for pr in 0..gh {
        for pc in 0..gw {
            let y = (pr * patch + patch / 2).min(h - 1);
            let x = (pc * patch + patch / 2).min(w - 1);
            let rbase = (y * w + x) * 6;
            let row = pos.row_slice_mut(pr * gw + pc);
            for k in 0..3 {
                let p = (rays[rbase + k] + t_mid * rays[rbase + 3 + k]) / coord_scale;
                row[k] = p.clamp(-1.0, 1.0);
            }
        }
    }
    Ok(patchify(9, h, w, &chans, patch, Modality::Rays3d, pos))
}

pub const SIGNAL1D_FEATURES: usize = 4;

/// 1D context on a fixed bin grid over [x_lo, x_hi]: per bin the point
/// fraction, mean in-bin offset, mean y, and an occupancy flag. The fixed
/// grid keeps context and target token counts equal.
pub fn tokenize_signal1d(
    xs: &[f64],
    ys: &[f64],
    bins: usize,
    x_lo: f64,
    x_hi: f64,
) -> Result<TokenSequence> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::invalid_input("empty or mismatched 1d context"));
    }
    if bins == 0 || !(x_hi > x_lo) {
        return Err(Error::config("bad 1d tokenizer grid"));
    }
    let width = (x_hi - x_lo) / bins as f64;
    let mut count = vec![0usize; bins];
    let mut sum_x = vec![0.0; bins];
    let mut sum_y = vec![0.0; bins];
    for (&x, &y) in xs.iter().zip(ys.iter()) {
        let b = (((x - x_lo) / width) as usize).min(bins - 1);
        count[b] += 1;
        sum_x[b] += x;
        sum_y[b] += y;
    }
    let mut tokens = Tensor::zeros(bins, SIGNAL1D_FEATURES);
    let mut pos = Tensor::zeros(bins, 1);
    let half_span = (x_hi - x_lo) / 2.0;
    let mid = (x_hi + x_lo) / 2.0;
    for b in 0..bins {
        let center = x_lo + (b as f64 + 0.5) * width;
        pos.data[b] = (center - mid) / half_span;
        let row = tokens.row_slice_mut(b);
        if count[b] > 0 {
            let c = count[b] as f64;
            row[0] = c / xs.len() as f64;
            row[1] = (sum_x[b] / c - center) / (width / 2.0);
            row[2] = sum_y[b] / c;
            row[3] = 1.0;
        }
    }
    Ok(TokenSequence { tokens, grid_positions: pos, modality: Modality::Signal1d })
}

/// Linear projection + learned positional embedding + pre-norm
/// self-attention stack.
#[derive(Clone, Debug)]
pub struct TokenEncoder {
    proj: crate::nn::Linear,
    pos_embed: ParamId,
    blocks: Vec<crate::nn::TransformerBlock>,
}

impl TokenEncoder {
    pub fn build(b: &mut Builder, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(TokenEncoder {
            proj: b.linear(&format!("{name}.proj"), cfg.token_feat_dim, cfg.model_dim),
            pos_embed: b.tensor_uniform(
                &format!("{name}.pos"),
                cfg.basis_count,
                cfg.model_dim,
                0.05,
            ),
            blocks: (0..cfg.layers)
                .map(|i| b.transformer_block(&format!("{name}.blk{i}"), cfg.model_dim, cfg.heads, 4))
                .collect(),
        })
    }

    /// seq tokens [M, D_tok] -> features [M, model_dim]; row i corresponds
    /// to token i.
    pub fn encode_tokens(&self, s: &mut Session, seq: &TokenSequence, cfg: &EncoderConfig) -> Result<Var> {
        if seq.tokens.rows != cfg.basis_count {
            return Err(Error::config(format!(
                "tokenizer produced {} tokens but basis_count is {}",
                seq.tokens.rows, cfg.basis_count
            )));
        }
        if seq.tokens.cols != cfg.token_feat_dim {
            return Err(Error::config(format!(
                "token feature width {} vs configured {}",
                seq.tokens.cols, cfg.token_feat_dim
            )));
        }
        let x = s.g.constant(seq.tokens.clone());
        let mut h = self.proj.forward(s, x);
        let pe = s.p(self.pos_embed);
        h = s.g.add(h, pe);
        for blk in &self.blocks {
            h = blk.forward(s, h);
        }
        Ok(h)
    }
}

/// On-graph basis set (struct of arrays).
#[derive(Clone, Copy, Debug)]
pub struct BasisVars {
    pub centers: Var,
    pub log_scales: Var,
    pub rot: Option<Var>,
    pub embeddings: Var,
    pub kind: RotKind,
}

impl BasisVars {
    pub fn to_plain(&self, s: &Session) -> Result<GaussianBasisSet> {
        let centers = s.g.val(self.centers);
        let ls = s.g.val(self.log_scales);
        let emb = s.g.val(self.embeddings);
        let rot = self.rot.map(|r| s.g.val(r));
        let d = centers.cols;
        let mut bases = Vec::with_capacity(centers.rows);
        for r in 0..centers.rows {
            let rotation = match (self.kind, rot) {
                (RotKind::None, _) => Rotation::None,
                (RotKind::Angle, Some(rt)) => Rotation::Angle(rt.at(r, 0)),
                (RotKind::Quat, Some(rt)) => {
                    let q = rt.row_slice(r);
                    Rotation::Quat([q[0], q[1], q[2], q[3]])
                }
                _ => return Err(Error::config("rotation tensor missing")),
            };
            bases.push(GaussianBasis {
                center: centers.row_slice(r).to_vec(),
                log_scale: ls.row_slice(r).to_vec(),
                rotation,
                embedding: emb.row_slice(r).to_vec(),
            });
            let _ = d;
        }
        GaussianBasisSet::new(bases)
    }
}

/// Two MLP heads over encoded tokens: one for Gaussian parameters
/// (center offset, log scales, rotation), one for the embeddings.
#[derive(Clone, Debug)]
pub struct BasisHeads {
    geom: Mlp,
    embed: Mlp,
    spatial_dim: usize,
}

impl BasisHeads {
    pub fn build(b: &mut Builder, name: &str, cfg: &EncoderConfig) -> Self {
        let d = cfg.spatial_dim;
        let rot_cols = RotKind::for_dim(d).rot_cols();
        let geom_out = 2 * d + rot_cols;
        let heads = BasisHeads {
            geom: b.mlp(
                &format!("{name}.geom"),
                &[cfg.model_dim, cfg.model_dim, geom_out],
                Activation::Relu,
            ),
            embed: b.mlp(
                &format!("{name}.embed"),
                &[cfg.model_dim, cfg.model_dim, cfg.embedding_dim],
                Activation::Relu,
            ),
            spatial_dim: d,
        };
        // identity quaternion prior: bias the w component to 1
        if rot_cols == 4 {
            let last = heads.geom.layers.last().unwrap();
            b.ps.get_mut(last.b).data[2 * d] = 1.0;
        }
        heads
    }

    /// Start bases at a moderate width instead of sigma = 1 (the whole
    /// normalized box).
    pub fn set_log_scale_bias(&self, ps: &mut ParamSet, value: f64) {
        let last = self.geom.layers.last().unwrap();
        let bias = ps.get_mut(last.b);
        for k in self.spatial_dim..2 * self.spatial_dim {
            bias.data[k] = value;
        }
    }

    /// features [M, model_dim] -> one basis per token. Centers are
    /// tanh(grid + offset); log scales clamped to [-5, 2]; quaternions
    /// normalized.
    pub fn infer_bases(
        &self,
        s: &mut Session,
        features: Var,
        grid_positions: &Tensor,
    ) -> Result<BasisVars> {
        let d = self.spatial_dim;
        let kind = RotKind::for_dim(d);
        let geom = self.geom.forward(s, features);
        let geom_val = s.g.val(geom);
        if !geom_val.all_finite() {
            return Err(Error::Divergence { term: "basis geometry head".into(), step: 0 });
        }
        let offsets = s.g.slice_cols(geom, 0, d);
        let grid = s.g.constant(grid_positions.clone());
        let pre = s.g.add(offsets, grid);
        let centers = s.g.tanh(pre);
        let ls_raw = s.g.slice_cols(geom, d, 2 * d);
        let log_scales = s.g.clamp(ls_raw, LOG_SCALE_MIN, LOG_SCALE_MAX);
        let rot = match kind {
            RotKind::None => None,
            RotKind::Angle => Some(s.g.slice_cols(geom, 2 * d, 2 * d + 1)),
            RotKind::Quat => {
                let raw = s.g.slice_cols(geom, 2 * d, 2 * d + 4);
                let raw_val = s.g.val(raw);
                for r in 0..raw_val.rows {
                    let norm = raw_val.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm < 1e-8 {
                        return Err(Error::DegenerateRotation { norm });
                    }
                }
                Some(s.g.normalize_rows(raw, 1e-12))
            }
        };
        let embeddings = self.embed.forward(s, features);
        Ok(BasisVars { centers, log_scales, rot, embeddings, kind })
    }
}
