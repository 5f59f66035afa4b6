//! The full model: context tokens -> geometric bases -> hierarchical
//! latents -> style-modulated field, with the training (posterior) and
//! inference (prior-only) paths.

use rand_chacha::ChaCha8Rng;

use crate::encoder::{
    tokenize_image, tokenize_masked_image, tokenize_ray_context, tokenize_signal1d, BasisHeads,
    BasisVars, EncoderConfig, TokenEncoder, TokenSequence, SIGNAL1D_FEATURES,
};
use crate::error::{Error, Result};
use crate::geometry::{DEFAULT_JITTER, EXPONENT_FLOOR};
use crate::graph::Var;
use crate::latents::{diag_kl_on_graph, GaussVars, GlobalHead, Grouping, LocalHead};
use crate::modulation::{FieldNet, FieldOutput, ModulatedFieldConfig, OutputHead};
use crate::nn::{Activation, Builder, Mlp, ParamSet, Session};
use crate::rng::normal_vec;
use crate::tasks::TaskBatch;
use crate::tensor::Tensor;
use crate::Modality;

/// Cap on how many point representations are pooled for the global
/// latent when rendering large target sets (deterministic stride).
const GLOBAL_POOL_CAP: usize = 4096;

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub modality: Modality,
    pub encoder: EncoderConfig,
    /// Location-representation width after the aggregation MLP.
    pub rep_dim: usize,
    pub rep_hidden: usize,
    pub latent_dim: usize,
    pub field_width: usize,
    pub fourier_pos_bands: usize,
    pub fourier_dir_bands: usize,
    /// 1D/2D local-variable chunk (1 = one local per coordinate).
    pub local_chunk: usize,
    /// 3D: samples per ray.
    pub points_per_ray: usize,
    pub t_near: f64,
    pub t_far: f64,
    pub white_background: bool,
    /// 1D tokenizer grid bins.
    pub signal_bins: usize,
    /// Completion runs a 4-channel (rgb+mask) tokenizer on both sides.
    pub mask_channel: bool,
    /// Half-extent of the scene in native units (queries are divided by
    /// this before touching bases or Fourier features).
    pub coord_scale: f64,
    pub local_layers: usize,
    pub local_heads: usize,
    // ablation switches
    pub use_bases: bool,
    pub use_global: bool,
    pub use_local: bool,
}

impl ModelConfig {
    pub fn spatial_dim(&self) -> usize {
        self.modality.dim()
    }

    fn fourier_dim(&self) -> usize {
        let d = self.spatial_dim();
        let pos = d * (2 * self.fourier_pos_bands + 1);
        let dir = if self.modality == Modality::Rays3d {
            3 * (2 * self.fourier_dir_bands + 1)
        } else {
            0
        };
        pos + dir
    }

    fn field_in_dim(&self) -> usize {
        self.rep_dim + self.fourier_dim()
    }

    pub fn head(&self) -> OutputHead {
        match self.modality {
            Modality::Signal1d => OutputHead::ScalarMeanStd,
            Modality::Image2d => OutputHead::Rgb,
            Modality::Rays3d => OutputHead::RgbDensity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.modality == Modality::Rays3d && self.points_per_ray == 0 {
            return Err(Error::config("points_per_ray must be positive"));
        }
        if self.local_chunk == 0 {
            return Err(Error::config("local_chunk must be positive"));
        }
        if !(self.coord_scale > 0.0) {
            return Err(Error::config("coord_scale must be positive"));
        }
        Ok(())
    }

    /// Desk-scale defaults per modality; callers override what they need.
    pub fn for_modality(modality: Modality) -> Self {
        let (patch, basis_count, feat, d) = match modality {
            Modality::Signal1d => (1, 16, SIGNAL1D_FEATURES, 1),
            Modality::Image2d => (8, 64, 8 * 8 * 3, 2),
            Modality::Rays3d => (8, 256, 8 * 8 * 9, 3),
        };
        ModelConfig {
            modality,
            encoder: EncoderConfig {
                patch_size: patch,
                model_dim: 64,
                layers: 2,
                heads: 4,
                basis_count,
                embedding_dim: 32,
                token_feat_dim: feat,
                spatial_dim: d,
            },
            rep_dim: 48,
            rep_hidden: 64,
            latent_dim: 64,
            field_width: 64,
            fourier_pos_bands: 6,
            fourier_dir_bands: 4,
            local_chunk: 1,
            points_per_ray: 64,
            t_near: 2.0,
            t_far: 6.0,
            white_background: true,
            signal_bins: 16,
            mask_channel: false,
            coord_scale: if modality == Modality::Image2d { 1.0 } else { 2.0 },
            local_layers: 2,
            local_heads: 4,
            use_bases: true,
            use_global: true,
            use_local: true,
        }
    }
}

/// Fourier features with identity pass-through:
/// per axis [x, sin(pi x), cos(pi x), ..., sin(2^{L-1} pi x), cos(...)].
pub fn fourier_features(points: &Tensor, bands: usize) -> Tensor {
    let d = points.cols;
    let width = d * (2 * bands + 1);
    let mut out = Tensor::zeros(points.rows, width);
    for r in 0..points.rows {
        let src = points.row_slice(r);
        let dst = out.row_slice_mut(r);
        let mut c = 0;
        for &x in src.iter() {
            dst[c] = x;
            c += 1;
            let mut freq = std::f64::consts::PI;
            for _ in 0..bands {
                dst[c] = (freq * x).sin();
                dst[c + 1] = (freq * x).cos();
                c += 2;
                freq *= 2.0;
            }
        }
    }
    out
}

/// Context summary entering the field: geometric bases, or (ablation)
/// one pooled token feature vector.
pub enum ContextRepr {
    Bases(BasisVars),
    Pooled(Var),
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    encoder: TokenEncoder,
    heads: BasisHeads,
    rep_net: Mlp,
    pooled_net: Mlp,
    global_head: GlobalHead,
    local_head: LocalHead,
    field: FieldNet,
}

/// Per-step noise and subsampling decisions, drawn in a fixed order.
pub struct StepDraws {
    pub target_subset: Option<Vec<usize>>,
    pub ray_subset: Option<Vec<usize>>,
    pub strat_noise: Vec<f64>,
    pub zg_noise: Vec<f64>,
    pub zl_noise: Vec<f64>,
}

/// Everything the decoder needs for one episode pass.
pub struct PreparedEpisode {
    pub ctx_seq: TokenSequence,
    pub tgt_seq: Option<TokenSequence>,
    /// Normalized query points [n, d].
    pub points: Tensor,
    /// 3D: per-point ray directions [n, 3].
    pub dirs: Option<Tensor>,
    /// 3D: quadrature spacings per sample.
    pub deltas: Option<Vec<f64>>,
    /// Supervision rows: 1D [m,1], 2D [m,3], 3D per-ray pixels [rays,3].
    pub targets: Option<Tensor>,
    pub grouping: Grouping,
    pub n_rays: usize,
}

pub struct ElboVars {
    pub recon: Var,
    pub kl_global: Option<Var>,
    pub kl_local: Option<Var>,
    pub kl_bases: Option<Var>,
    pub total: Var,
    pub global_prior: Option<GaussVars>,
    pub global_post: Option<GaussVars>,
    pub local_prior: Option<GaussVars>,
    pub local_post: Option<GaussVars>,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut b = Builder::new(&mut params, crate::rng::stream(seed, "init", 0));
        let encoder = TokenEncoder::build(&mut b, "encoder", &cfg.encoder)?;
        let heads = BasisHeads::build(&mut b, "basis", &cfg.encoder);
        let rep_net = b.mlp(
            "rep",
            &[cfg.encoder.embedding_dim, cfg.rep_hidden, cfg.rep_dim],
            Activation::Relu,
        );
        let pooled_net = b.mlp(
            "pooled_rep",
            &[cfg.encoder.model_dim, cfg.rep_hidden, cfg.rep_dim],
            Activation::Relu,
        );
        let global_head =
            GlobalHead::build(&mut b, "global", cfg.rep_dim, cfg.rep_hidden, cfg.latent_dim);
        let local_head = LocalHead::build(
            &mut b,
            "local",
            cfg.rep_dim,
            cfg.latent_dim,
            cfg.local_layers,
            cfg.local_heads,
        );
        let field_cfg = match cfg.modality {
            Modality::Rays3d => ModulatedFieldConfig::radiance(cfg.field_in_dim(), cfg.field_width),
            _ => ModulatedFieldConfig::signal(cfg.field_in_dim(), cfg.field_width, cfg.head()),
        };
        let field = FieldNet::build(&mut b, "field", field_cfg, cfg.latent_dim)?;
        heads.set_log_scale_bias(&mut params, (0.2f64).ln());
        Ok(Model { cfg, params, encoder, heads, rep_net, pooled_net, global_head, local_head, field })
    }

    pub fn session(&self) -> Session<'_> {
        Session::new(&self.params)
    }

    // ---- episode preparation ----

    fn context_tokens(&self, batch: &TaskBatch) -> Result<TokenSequence> {
        match batch.modality {
            Modality::Signal1d => tokenize_signal1d(
                &batch.context_inputs.data,
                &batch.context_outputs.data,
                self.cfg.signal_bins,
                -self.cfg.coord_scale,
                self.cfg.coord_scale,
            ),
            Modality::Image2d => {
                let (h, w) = batch
                    .meta
                    .image_hw
                    .ok_or_else(|| Error::invalid_input("2d episode lacks image shape"))?;
                match &batch.meta.context_mask {
                    Some(mask) => {
                        if !self.cfg.mask_channel {
                            return Err(Error::config(
                                "masked context requires a mask_channel model",
                            ));
                        }
                        let mut image = vec![0.0; h * w * 3];
                        let mut row = 0;
                        for (i, &m) in mask.iter().enumerate() {
                            if m {
                                image[i * 3..i * 3 + 3]
                                    .copy_from_slice(batch.context_outputs.row_slice(row));
                                row += 1;
                            }
                        }
                        tokenize_masked_image(&image, mask, h, w, self.cfg.encoder.patch_size)
                    }
                    None => {
                        if self.cfg.mask_channel {
                            let mask = vec![true; h * w];
                            tokenize_masked_image(
                                &batch.context_outputs.data,
                                &mask,
                                h,
                                w,
                                self.cfg.encoder.patch_size,
                            )
                        } else {
                            tokenize_image(
                                &batch.context_outputs.data,
                                h,
                                w,
                                self.cfg.encoder.patch_size,
                            )
                        }
                    }
                }
            }
            Modality::Rays3d => {
                let (h, w) = batch
                    .meta
                    .image_hw
                    .ok_or_else(|| Error::invalid_input("3d episode lacks view shape"))?;
                let views = batch.meta.context_views.max(1);
                let n_px = h * w;
                let t_mid = (self.cfg.t_near + self.cfg.t_far) / 2.0;
                let mut seqs = Vec::with_capacity(views);
                for v in 0..views {
                    let rays = &batch.context_inputs.data[v * n_px * 6..(v + 1) * n_px * 6];
                    let pixels = &batch.context_outputs.data[v * n_px * 3..(v + 1) * n_px * 3];
                    seqs.push(tokenize_ray_context(
                        rays,
                        pixels,
                        h,
                        w,
                        self.cfg.encoder.patch_size,
                        t_mid,
                        self.cfg.coord_scale,
                    )?);
                }
                let mut out = seqs.remove(0);
                for s in seqs {
                    let mut tok = Tensor::zeros(out.tokens.rows + s.tokens.rows, out.tokens.cols);
                    tok.data[..out.tokens.len()].copy_from_slice(&out.tokens.data);
                    tok.data[out.tokens.len()..].copy_from_slice(&s.tokens.data);
                    let mut pos = Tensor::zeros(
                        out.grid_positions.rows + s.grid_positions.rows,
                        out.grid_positions.cols,
                    );
                    pos.data[..out.grid_positions.len()].copy_from_slice(&out.grid_positions.data);
                    pos.data[out.grid_positions.len()..].copy_from_slice(&s.grid_positions.data);
                    out.tokens = tok;
                    out.grid_positions = pos;
                }
                Ok(out)
            }
        }
    }

    fn target_tokens(&self, batch: &TaskBatch) -> Result<TokenSequence> {
        let targets = batch
            .target_outputs
            .as_ref()
            .ok_or_else(|| Error::invalid_input("posterior path requires target outputs"))?;
        match batch.modality {
            Modality::Signal1d => tokenize_signal1d(
                &batch.target_inputs.data,
                &targets.data,
                self.cfg.signal_bins,
                -self.cfg.coord_scale,
                self.cfg.coord_scale,
            ),
            Modality::Image2d => {
                let (h, w) = batch.meta.image_hw.unwrap();
                if self.cfg.mask_channel {
                    let mask = vec![true; h * w];
                    tokenize_masked_image(&targets.data, &mask, h, w, self.cfg.encoder.patch_size)
                } else {
                    tokenize_image(&targets.data, h, w, self.cfg.encoder.patch_size)
                }
            }
            Modality::Rays3d => {
                let (h, w) = batch.meta.image_hw.unwrap();
                let t_mid = (self.cfg.t_near + self.cfg.t_far) / 2.0;
                tokenize_ray_context(
                    &batch.target_inputs.data,
                    &targets.data,
                    h,
                    w,
                    self.cfg.encoder.patch_size,
                    t_mid,
                    self.cfg.coord_scale,
                )
            }
        }
    }

    /// Build query points, supervision and noise for one training step.
    pub fn prepare_training(
        &self,
        batch: &TaskBatch,
        rng: &mut ChaCha8Rng,
        targets_per_step: usize,
        rays_per_step: usize,
    ) -> Result<(PreparedEpisode, StepDraws)> {
        use rand::Rng;
        batch.validate(true)?;
        let ctx_seq = self.context_tokens(batch)?;
        let tgt_seq = Some(self.target_tokens(batch)?);
        let targets_full = batch.target_outputs.as_ref().unwrap();

        match batch.modality {
            Modality::Signal1d | Modality::Image2d => {
                let m = batch.target_inputs.rows;
                let chunk = self.cfg.local_chunk;
                let want = if targets_per_step == 0 { m } else { targets_per_step.min(m) };
                let want = (want / chunk).max(1) * chunk;
                let subset = if want < m {
                    let mut idx: Vec<usize> = (0..m).collect();
                    for i in 0..want {
                        let j = rng.gen_range(i..m);
                        idx.swap(i, j);
                    }
                    idx.truncate(want);
                    Some(idx)
                } else {
                    None
                };
                let pick = |t: &Tensor, idx: &Option<Vec<usize>>| -> Tensor {
                    match idx {
                        None => t.clone(),
                        Some(rows) => {
                            let mut out = Tensor::zeros(rows.len(), t.cols);
                            for (r, &i) in rows.iter().enumerate() {
                                out.row_slice_mut(r).copy_from_slice(t.row_slice(i));
                            }
                            out
                        }
                    }
                };
                let mut points = pick(&batch.target_inputs, &subset);
                points.scale_in_place(1.0 / self.cfg.coord_scale);
                let targets = pick(targets_full, &subset);
                let n = points.rows;
                let grouping = Grouping { n_groups: n / chunk, group_size: chunk };
                let zg_noise = normal_vec(rng, self.cfg.latent_dim);
                let zl_noise = normal_vec(rng, grouping.n_groups * self.cfg.latent_dim);
                Ok((
                    PreparedEpisode {
                        ctx_seq,
                        tgt_seq,
                        points,
                        dirs: None,
                        deltas: None,
                        targets: Some(targets),
                        grouping,
                        n_rays: 0,
                    },
                    StepDraws {
                        target_subset: subset,
                        ray_subset: None,
                        strat_noise: vec![],
                        zg_noise,
                        zl_noise,
                    },
                ))
            }
            Modality::Rays3d => {
                let n_rays_total = batch.target_inputs.rows;
                let want = if rays_per_step == 0 {
                    n_rays_total
                } else {
                    rays_per_step.min(n_rays_total)
                };
                let subset: Vec<usize> = if want < n_rays_total {
                    let mut idx: Vec<usize> = (0..n_rays_total).collect();
                    for i in 0..want {
                        let j = rng.gen_range(i..n_rays_total);
                        idx.swap(i, j);
                    }
                    idx.truncate(want);
                    idx
                } else {
                    (0..n_rays_total).collect()
                };
                let p = self.cfg.points_per_ray;
                let strat_noise: Vec<f64> =
                    (0..subset.len() * p).map(|_| rng.gen_range(0.0..1.0)).collect();
                let (points, dirs, deltas) =
                    self.sample_points_for_rays(batch, &subset, Some(&strat_noise))?;
                let mut targets = Tensor::zeros(subset.len(), 3);
                for (r, &i) in subset.iter().enumerate() {
                    targets.row_slice_mut(r).copy_from_slice(targets_full.row_slice(i));
                }
                let grouping = Grouping { n_groups: subset.len(), group_size: p };
                let zg_noise = normal_vec(rng, self.cfg.latent_dim);
                let zl_noise = normal_vec(rng, grouping.n_groups * self.cfg.latent_dim);
                Ok((
                    PreparedEpisode {
                        ctx_seq,
                        tgt_seq,
                        points,
                        dirs: Some(dirs),
                        deltas: Some(deltas),
                        targets: Some(targets),
                        grouping,
                        n_rays: subset.len(),
                    },
                    StepDraws {
                        target_subset: None,
                        ray_subset: Some(subset),
                        strat_noise,
                        zg_noise,
                        zl_noise,
                    },
                ))
            }
        }
    }

    fn sample_points_for_rays(
        &self,
        batch: &TaskBatch,
        ray_ids: &[usize],
        strat_noise: Option<&[f64]>,
    ) -> Result<(Tensor, Tensor, Vec<f64>)> {
        let p = self.cfg.points_per_ray;
        let (t_near, t_far) = batch.meta.t_bounds.unwrap_or((self.cfg.t_near, self.cfg.t_far));
        let mut points = Tensor::zeros(ray_ids.len() * p, 3);
        let mut dirs = Tensor::zeros(ray_ids.len() * p, 3);
        let mut deltas = Vec::with_capacity(ray_ids.len() * p);
        for (r, &i) in ray_ids.iter().enumerate() {
            let row = batch.target_inputs.row_slice(i);
            let ray = crate::render::Ray::new(
                [row[0], row[1], row[2]],
                [row[3], row[4], row[5]],
                t_near,
                t_far,
            )?;
            let samples = match strat_noise {
                Some(noise) => crate::render::sample_ray_points(
                    &ray,
                    p,
                    crate::render::SampleMode::Stratified,
                    &noise[r * p..(r + 1) * p],
                )?,
                None => {
                    crate::render::sample_ray_points(&ray, p, crate::render::SampleMode::Uniform, &[])?
                }
            };
            for (s, pt) in samples.points.iter().enumerate() {
                let prow = points.row_slice_mut(r * p + s);
                for k in 0..3 {
                    prow[k] = pt[k] / self.cfg.coord_scale;
                }
                dirs.row_slice_mut(r * p + s).copy_from_slice(&row[3..6]);
            }
            deltas.extend_from_slice(&samples.deltas);
        }
        Ok((points, dirs, deltas))
    }

    // ---- graph construction ----

    pub fn encode_context(&self, s: &mut Session, seq: &TokenSequence) -> Result<ContextRepr> {
        let features = self.encoder.encode_tokens(s, seq, &self.cfg.encoder)?;
        if self.cfg.use_bases {
            let bases = self.heads.infer_bases(s, features, &seq.grid_positions)?;
            Ok(ContextRepr::Bases(bases))
        } else {
            Ok(ContextRepr::Pooled(s.g.mean_axis0(features)))
        }
    }

    /// Location representations <x, B> for normalized points [n, d].
    pub fn location_reps(&self, s: &mut Session, points: &Tensor, repr: &ContextRepr) -> Var {
        match repr {
            ContextRepr::Bases(b) => {
                let pts = s.g.constant(points.clone());
                let w = s.g.rbf_weights(
                    pts,
                    b.centers,
                    b.log_scales,
                    b.rot,
                    b.kind,
                    DEFAULT_JITTER,
                    EXPONENT_FLOOR,
                );
                let agg = s.g.matmul(w, b.embeddings);
                self.rep_net.forward(s, agg)
            }
            ContextRepr::Pooled(pooled) => {
                let rep = self.pooled_net.forward(s, *pooled);
                s.g.repeat_rows(rep, points.rows)
            }
        }
    }

    fn field_features(&self, s: &mut Session, points: &Tensor, dirs: Option<&Tensor>, rep: Var) -> Var {
        let four = fourier_features(points, self.cfg.fourier_pos_bands);
        let fv = s.g.constant(four);
        let mut parts = vec![rep, fv];
        if let Some(dirs) = dirs {
            let fd = fourier_features(dirs, self.cfg.fourier_dir_bands);
            parts.push(s.g.constant(fd));
        }
        s.g.concat_cols(&parts)
    }

    /// Decode points through the modulated field.
    fn decode(
        &self,
        s: &mut Session,
        prep: &PreparedEpisode,
        rep_ctx: Var,
        zg_sample: Option<Var>,
        zl_sample: Option<Var>,
    ) -> FieldOutput {
        let feats = self.field_features(s, &prep.points, prep.dirs.as_ref(), rep_ctx);
        self.field.forward(s, feats, zg_sample, zl_sample, prep.grouping.group_size)
    }

    /// Training-mode graph: posteriors from target bases, priors from
    /// context bases, reconstruction decoded from posterior samples,
    /// conditioned on the context bases.
    pub fn elbo_graph<'m>(
        &'m self,
        prep: &PreparedEpisode,
        draws: &StepDraws,
        alpha: f64,
        beta: f64,
    ) -> Result<(Session<'m>, ElboVars)> {
        let mut s = self.session();
        let ctx = self.encode_context(&mut s, &prep.ctx_seq)?;
        let tgt_seq = prep
            .tgt_seq
            .as_ref()
            .ok_or_else(|| Error::invalid_input("training graph requires target tokens"))?;
        let tgt = self.encode_context(&mut s, tgt_seq)?;

        let reps_c = self.location_reps(&mut s, &prep.points, &ctx);
        let reps_t = self.location_reps(&mut s, &prep.points, &tgt);

        let k = self.cfg.latent_dim;
        let g = prep.grouping;

        // global latent
        let mut dists: [Option<GaussVars>; 4] = [None, None, None, None];
        let (zg_sample, kl_global) = if self.cfg.use_global {
            let prior_g = self.global_head.forward(&mut s, reps_c);
            let post_g = self.global_head.forward(&mut s, reps_t);
            let noise = Tensor::row(draws.zg_noise.clone());
            let zg = post_g.sample(&mut s, &noise);
            let kl = diag_kl_on_graph(&mut s, &post_g, &prior_g);
            dists[0] = Some(prior_g);
            dists[1] = Some(post_g);
            (Some(zg), Some(kl))
        } else {
            (None, None)
        };
        // the local heads condition on one shared global draw
        let zg_for_local = match zg_sample {
            Some(v) => v,
            None => s.g.constant(Tensor::zeros(1, k)),
        };

        // local latents
        let (zl_sample, kl_local) = if self.cfg.use_local {
            let group_reps_c = s.g.group_mean_rows(reps_c, g.group_size);
            let group_reps_t = s.g.group_mean_rows(reps_t, g.group_size);
            let prior_l = self.local_head.forward(&mut s, group_reps_c, zg_for_local);
            let post_l = self.local_head.forward(&mut s, group_reps_t, zg_for_local);
            let noise = Tensor::from_vec(g.n_groups, k, draws.zl_noise.clone());
            let zl = post_l.sample(&mut s, &noise);
            let kl = diag_kl_on_graph(&mut s, &post_l, &prior_l);
            dists[2] = Some(prior_l);
            dists[3] = Some(post_l);
            (Some(zl), Some(kl))
        } else {
            (None, None)
        };

        // basis alignment
        let kl_bases = match (&ctx, &tgt) {
            (ContextRepr::Bases(bc), ContextRepr::Bases(bt)) => {
                Some(self.basis_alignment(&mut s, bc, bt)?)
            }
            _ => None,
        };

        let out = self.decode(&mut s, prep, reps_c, zg_sample, zl_sample);
        let recon = self.reconstruction(&mut s, prep, &out)?;

        let zero = s.g.scalar(0.0);
        let kg = kl_global.unwrap_or(zero);
        let kl = kl_local.unwrap_or(zero);
        let kb = kl_bases.unwrap_or(zero);
        let hier = s.g.add(kg, kl);
        let hier = s.g.scale(hier, alpha);
        let bases_term = s.g.scale(kb, beta);
        let partial = s.g.add(recon, hier);
        let total = s.g.add(partial, bases_term);

        Ok((
            s,
            ElboVars {
                recon,
                kl_global,
                kl_local,
                kl_bases,
                total,
                global_prior: dists[0],
                global_post: dists[1],
                local_prior: dists[2],
                local_post: dists[3],
            },
        ))
    }

    /// Mean over index-paired bases of KL(N_c || N_t). With stacked
    /// multi-view context the context count is a multiple of the target
    /// count; each view block pairs against the shared target grid.
    fn basis_alignment(&self, s: &mut Session, bc: &BasisVars, bt: &BasisVars) -> Result<Var> {
        let nc = s.g.val(bc.centers).rows;
        let nt = s.g.val(bt.centers).rows;
        if nc % nt != 0 {
            return Err(Error::invalid_input(format!(
                "context basis count {nc} not a multiple of target count {nt}"
            )));
        }
        let blocks = nc / nt;
        let mut acc: Option<Var> = None;
        for v in 0..blocks {
            let (from, to) = (v * nt, (v + 1) * nt);
            let mu = s.g.slice_rows(bc.centers, from, to);
            let ls = s.g.slice_rows(bc.log_scales, from, to);
            let rot = bc.rot.map(|r| s.g.slice_rows(r, from, to));
            let kl = s.g.basis_pair_kl(
                mu,
                ls,
                rot,
                bt.centers,
                bt.log_scales,
                bt.rot,
                bt.kind,
                DEFAULT_JITTER,
            );
            let m = s.g.mean_all(kl);
            acc = Some(match acc {
                None => m,
                Some(a) => s.g.add(a, m),
            });
        }
        let total = acc.unwrap();
        Ok(if blocks > 1 { s.g.scale(total, 1.0 / blocks as f64) } else { total })
    }

    /// recon = MSE for 2D/3D, negative mean Gaussian log-likelihood for 1D.
    fn reconstruction(&self, s: &mut Session, prep: &PreparedEpisode, out: &FieldOutput) -> Result<Var> {
        let targets = prep
            .targets
            .as_ref()
            .ok_or_else(|| Error::invalid_input("reconstruction requires targets"))?;
        match out {
            FieldOutput::ScalarMeanStd { mean, std } => {
                let y = s.g.constant(targets.clone());
                let diff = s.g.sub(y, *mean);
                let diff2 = s.g.square(diff);
                let var = s.g.square(*std);
                let var2 = s.g.scale(var, 2.0);
                let quad = s.g.div(diff2, var2);
                let lnsig = s.g.ln(*std);
                let t = s.g.add(quad, lnsig);
                let t = s.g.add_const(t, 0.5 * (2.0 * std::f64::consts::PI).ln());
                Ok(s.g.mean_all(t))
            }
            FieldOutput::Rgb(rgb) => {
                let y = s.g.constant(targets.clone());
                let diff = s.g.sub(*rgb, y);
                let sq = s.g.square(diff);
                Ok(s.g.mean_all(sq))
            }
            FieldOutput::RgbDensity { rgb, density } => {
                let deltas = prep
                    .deltas
                    .as_ref()
                    .ok_or_else(|| Error::invalid_input("3d reconstruction requires deltas"))?;
                let pixels = s.g.composite_rays(
                    *rgb,
                    *density,
                    deltas,
                    prep.n_rays,
                    self.cfg.points_per_ray,
                    self.cfg.white_background,
                );
                let y = s.g.constant(targets.clone());
                let diff = s.g.sub(pixels, y);
                let sq = s.g.square(diff);
                Ok(s.g.mean_all(sq))
            }
        }
    }

    // ---- prior-only prediction ----

    /// Decode target inputs from the context alone, averaging
    /// `n_samples` prior draws (zero noise = decode at prior means).
    /// 1D predictions carry a moment-matched predictive std.
    pub fn predict(
        &self,
        batch: &TaskBatch,
        n_samples: usize,
        rng: &mut ChaCha8Rng,
        zero_noise: bool,
    ) -> Result<Prediction> {
        batch.validate(false)?;
        if n_samples == 0 {
            return Err(Error::invalid_input("n_samples must be positive"));
        }
        let ctx_seq = self.context_tokens(batch)?;
        match batch.modality {
            Modality::Signal1d | Modality::Image2d => {
                let mut points = batch.target_inputs.clone();
                points.scale_in_place(1.0 / self.cfg.coord_scale);
                let chunk = if points.rows % self.cfg.local_chunk == 0 {
                    self.cfg.local_chunk
                } else {
                    1
                };
                let prior_g = self.global_prior_plain(&ctx_seq, &points)?;
                let prep = PreparedEpisode {
                    ctx_seq,
                    tgt_seq: None,
                    points,
                    dirs: None,
                    deltas: None,
                    targets: None,
                    grouping: Grouping {
                        n_groups: batch.target_inputs.rows / chunk,
                        group_size: chunk,
                    },
                    n_rays: 0,
                };
                let mut avg = SampleAverager::new();
                for _ in 0..n_samples {
                    let zg = self.draw_global(&prior_g, rng, zero_noise);
                    let zl_noise = self.draw_local(prep.grouping.n_groups, rng, zero_noise);
                    let (values, stds) = self.decode_prior_chunk(&prep, zg.as_ref(), &zl_noise)?;
                    avg.push(values, stds);
                }
                Ok(avg.finish())
            }
            Modality::Rays3d => {
                let ray_ids: Vec<usize> = (0..batch.target_inputs.rows).collect();
                self.predict_rays(&ctx_seq, batch, &ray_ids, n_samples, rng, zero_noise, 1024)
            }
        }
    }

    /// Render target-view rays in chunks. The global prior is derived
    /// once from a strided subset of all sample points, so every chunk
    /// shares the same latent draws.
    #[allow(clippy::too_many_arguments)]
    pub fn predict_rays(
        &self,
        ctx_seq: &TokenSequence,
        batch: &TaskBatch,
        ray_ids: &[usize],
        n_samples: usize,
        rng: &mut ChaCha8Rng,
        zero_noise: bool,
        chunk_rays: usize,
    ) -> Result<Prediction> {
        let p = self.cfg.points_per_ray;
        // strided ray subset for the global pooling pass
        let pool_rays: Vec<usize> = {
            let cap = (GLOBAL_POOL_CAP / p).max(1);
            let stride = ray_ids.len().div_ceil(cap);
            ray_ids.iter().step_by(stride).copied().collect()
        };
        let (pool_points, _, _) = self.sample_points_for_rays(batch, &pool_rays, None)?;
        let prior_g = self.global_prior_plain(ctx_seq, &pool_points)?;

        // latent draws shared across chunks
        let zg_draws: Vec<Option<Tensor>> =
            (0..n_samples).map(|_| self.draw_global(&prior_g, rng, zero_noise)).collect();
        let zl_noises: Vec<Tensor> =
            (0..n_samples).map(|_| self.draw_local(ray_ids.len(), rng, zero_noise)).collect();

        let mut out = Tensor::zeros(ray_ids.len(), 3);
        for (ci, chunk) in ray_ids.chunks(chunk_rays).enumerate() {
            let (points, dirs, deltas) = self.sample_points_for_rays(batch, chunk, None)?;
            let prep = PreparedEpisode {
                ctx_seq: ctx_seq.clone(),
                tgt_seq: None,
                points,
                dirs: Some(dirs),
                deltas: Some(deltas),
                targets: None,
                grouping: Grouping { n_groups: chunk.len(), group_size: p },
                n_rays: chunk.len(),
            };
            let mut avg = SampleAverager::new();
            let base = ci * chunk_rays;
            for si in 0..n_samples {
                let k = self.cfg.latent_dim;
                let zl_chunk = Tensor::from_vec(
                    chunk.len(),
                    k,
                    zl_noises[si].data[base * k..(base + chunk.len()) * k].to_vec(),
                );
                let (values, stds) =
                    self.decode_prior_chunk(&prep, zg_draws[si].as_ref(), &zl_chunk)?;
                avg.push(values, stds);
            }
            let pred = avg.finish();
            for r in 0..chunk.len() {
                out.row_slice_mut(base + r).copy_from_slice(pred.outputs.row_slice(r));
            }
        }
        Ok(Prediction { outputs: out, std: None })
    }

    /// Prior over the global latent, read out as plain values. Large
    /// target sets are strided down before pooling.
    fn global_prior_plain(
        &self,
        ctx_seq: &TokenSequence,
        points: &Tensor,
    ) -> Result<Option<crate::latents::DiagonalGaussian>> {
        if !self.cfg.use_global {
            return Ok(None);
        }
        let pooled = if points.rows > GLOBAL_POOL_CAP {
            let stride = points.rows.div_ceil(GLOBAL_POOL_CAP);
            let rows: Vec<usize> = (0..points.rows).step_by(stride).collect();
            let mut sub = Tensor::zeros(rows.len(), points.cols);
            for (r, &i) in rows.iter().enumerate() {
                sub.row_slice_mut(r).copy_from_slice(points.row_slice(i));
            }
            sub
        } else {
            points.clone()
        };
        let mut s = self.session();
        let ctx = self.encode_context(&mut s, ctx_seq)?;
        let reps = self.location_reps(&mut s, &pooled, &ctx);
        let prior = self.global_head.forward(&mut s, reps);
        Ok(Some(prior.to_plain(&s).remove(0)))
    }

    fn draw_global(
        &self,
        prior: &Option<crate::latents::DiagonalGaussian>,
        rng: &mut ChaCha8Rng,
        zero_noise: bool,
    ) -> Option<Tensor> {
        prior.as_ref().map(|p| {
            let noise = if zero_noise {
                vec![0.0; self.cfg.latent_dim]
            } else {
                normal_vec(rng, self.cfg.latent_dim)
            };
            let vals = crate::latents::sample_latent(p, &noise).expect("latent dims");
            Tensor::row(vals)
        })
    }

    fn draw_local(&self, n_groups: usize, rng: &mut ChaCha8Rng, zero_noise: bool) -> Tensor {
        if zero_noise {
            Tensor::zeros(n_groups, self.cfg.latent_dim)
        } else {
            Tensor::from_vec(
                n_groups,
                self.cfg.latent_dim,
                normal_vec(rng, n_groups * self.cfg.latent_dim),
            )
        }
    }

    /// One prior-only decode with fixed latent draws; returns plain
    /// outputs (values, 1D stds).
    fn decode_prior_chunk(
        &self,
        prep: &PreparedEpisode,
        zg_value: Option<&Tensor>,
        zl_noise: &Tensor,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let mut s = self.session();
        let ctx = self.encode_context(&mut s, &prep.ctx_seq)?;
        let reps_c = self.location_reps(&mut s, &prep.points, &ctx);
        let zg_sample = zg_value.map(|t| s.g.constant(t.clone()));
        let zg_for_local = match zg_sample {
            Some(v) => v,
            None => s.g.constant(Tensor::zeros(1, self.cfg.latent_dim)),
        };
        let zl_sample = if self.cfg.use_local {
            let group_reps = s.g.group_mean_rows(reps_c, prep.grouping.group_size);
            let prior_l = self.local_head.forward(&mut s, group_reps, zg_for_local);
            Some(prior_l.sample(&mut s, zl_noise))
        } else {
            None
        };
        let out = self.decode(&mut s, prep, reps_c, zg_sample, zl_sample);
        Ok(match out {
            FieldOutput::Rgb(rgb) => (s.g.val(rgb).clone(), None),
            FieldOutput::ScalarMeanStd { mean, std } => {
                (s.g.val(mean).clone(), Some(s.g.val(std).clone()))
            }
            FieldOutput::RgbDensity { rgb, density } => {
                let deltas = prep.deltas.as_ref().unwrap();
                let pixels = s.g.composite_rays(
                    rgb,
                    density,
                    deltas,
                    prep.n_rays,
                    self.cfg.points_per_ray,
                    self.cfg.white_background,
                );
                (s.g.val(pixels).clone(), None)
            }
        })
    }
}

/// Running mean of sampled decodes, with moment-matched predictive
/// variance when per-sample stds are present:
/// var = E[sigma^2] + E[mu^2] - (E[mu])^2.
struct SampleAverager {
    n: usize,
    sum: Option<Tensor>,
    sum_sq: Option<Tensor>,
    sum_std_sq: Option<Tensor>,
}

impl SampleAverager {
    fn new() -> Self {
        SampleAverager { n: 0, sum: None, sum_sq: None, sum_std_sq: None }
    }

    fn push(&mut self, values: Tensor, stds: Option<Tensor>) {
        self.n += 1;
        match &mut self.sum {
            None => {
                let mut sq = values.clone();
                sq.data.iter_mut().for_each(|v| *v *= *v);
                self.sum_sq = Some(sq);
                if let Some(stds) = &stds {
                    let mut ss = stds.clone();
                    ss.data.iter_mut().for_each(|v| *v *= *v);
                    self.sum_std_sq = Some(ss);
                }
                self.sum = Some(values);
            }
            Some(sum) => {
                let sq = self.sum_sq.as_mut().unwrap();
                for (i, v) in values.data.iter().enumerate() {
                    sum.data[i] += v;
                    sq.data[i] += v * v;
                }
                if let (Some(stds), Some(ss)) = (&stds, self.sum_std_sq.as_mut()) {
                    for (i, v) in stds.data.iter().enumerate() {
                        ss.data[i] += v * v;
                    }
                }
            }
        }
    }

    fn finish(self) -> Prediction {
        let n = self.n as f64;
        let mut mean = self.sum.expect("no samples");
        mean.scale_in_place(1.0 / n);
        let std = self.sum_std_sq.map(|ss| {
            let sq = self.sum_sq.unwrap();
            let mut out = Tensor::zeros(mean.rows, mean.cols);
            for i in 0..out.data.len() {
                let e_mu2 = sq.data[i] / n;
                let e_s2 = ss.data[i] / n;
                let var = (e_s2 + e_mu2 - mean.data[i] * mean.data[i]).max(0.0);
                out.data[i] = var.sqrt().max(crate::latents::STD_FLOOR);
            }
            out
        });
        Prediction { outputs: mean, std }
    }
}

pub struct Prediction {
    pub outputs: Tensor,
    /// 1D head only: moment-matched predictive std.
    pub std: Option<Tensor>,
}
