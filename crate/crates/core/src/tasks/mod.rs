//! Episode generation and loading: synthetic 1D GP functions, 2D images
//! with regression/completion splits, and procedural 3D scenes rendered
//! by an analytic-density oracle.

mod gp;
mod images;
mod records;
mod scenes;

pub use gp::{gp_sample, kernel_eval, split_context_target, Gp1dConfig, KernelKind};
pub use images::{
    completion_mask, load_image_dir, nearest_context_baseline, texture_image, image2d_episode,
    completion_episode,
};
pub use records::{read_episode, write_episode, DatasetManifest};
pub use scenes::{
    make_cameras, oracle_render, procedural_scene, rays3d_episode, BlobSpec, Scene3dData,
    SceneSpec, DEFAULT_VIEWS_PER_SCENE,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Modality;

/// One meta-learning episode.
#[derive(Clone, Debug)]
pub struct TaskBatch {
    pub modality: Modality,
    /// 1D: [n,1] xs; 2D: [n,2] normalized pixel coords; 3D: [n,6] rays
    /// (origin, direction) with n = context_views * H * W.
    pub context_inputs: Tensor,
    /// 1D: [n,1]; 2D/3D: [n,3] colors.
    pub context_outputs: Tensor,
    /// 1D: [m,1]; 2D: [m,2]; 3D: [m,6] target-view rays.
    pub target_inputs: Tensor,
    /// Present in training mode.
    pub target_outputs: Option<Tensor>,
    pub meta: BatchMeta,
}

/// Side information the tokenizers need.
#[derive(Clone, Debug, Default)]
pub struct BatchMeta {
    /// Image/view extent for grid tokenization.
    pub image_hw: Option<(usize, usize)>,
    /// Completion: which pixels (row-major) are observed context.
    pub context_mask: Option<Vec<bool>>,
    /// 3D: number of context views stacked in context_inputs.
    pub context_views: usize,
    /// 3D: near/far bounds shared by all rays.
    pub t_bounds: Option<(f64, f64)>,
}

impl TaskBatch {
    pub fn validate(&self, training: bool) -> Result<()> {
        if self.context_inputs.rows == 0 {
            return Err(Error::invalid_input("episode has empty context"));
        }
        if self.context_inputs.rows != self.context_outputs.rows {
            return Err(Error::shape("context inputs/outputs row mismatch"));
        }
        if training && self.target_outputs.is_none() {
            return Err(Error::invalid_input("training episode lacks target outputs"));
        }
        if let Some(t) = &self.target_outputs {
            if t.rows != self.target_inputs.rows {
                return Err(Error::shape("target inputs/outputs row mismatch"));
            }
        }
        if self.modality == Modality::Rays3d && self.context_inputs.cols != 6 {
            return Err(Error::shape("3d context must carry (origin, direction) rays"));
        }
        Ok(())
    }
}

/// Normalized pixel-center coordinates, row-major, in [-1,1]^2 as (x, y).
pub fn pixel_coords(h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(h * w, 2);
    for r in 0..h {
        for c in 0..w {
            let row = out.row_slice_mut(r * w + c);
            row[0] = (c as f64 + 0.5) / w as f64 * 2.0 - 1.0;
            row[1] = (r as f64 + 0.5) / h as f64 * 2.0 - 1.0;
        }
    }
    out
}
