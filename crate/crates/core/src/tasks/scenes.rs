//! Procedural 3D scenes: Gaussian density blobs with an exact analytic
//! density field, multi-view oracle renders, and sphere-sampled cameras.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gauss;
use crate::render::{composite, make_rays, sample_ray_points, Camera, SampleMode};
use crate::tensor::Tensor;
use crate::Modality;

use super::{BatchMeta, TaskBatch};

pub const DEFAULT_VIEWS_PER_SCENE: usize = 25;

#[derive(Clone, Debug)]
pub struct BlobSpec {
    pub center: [f64; 3],
    /// Per-axis standard deviations of the density Gaussian.
    pub scales: [f64; 3],
    /// Unit quaternion orienting the blob.
    pub quat: [f64; 4],
    pub color: [f64; 3],
    pub peak_density: f64,
}

#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub blobs: Vec<BlobSpec>,
    pub white_background: bool,
    pub t_near: f64,
    pub t_far: f64,
}

impl SceneSpec {
    /// Density and density-weighted color at a point.
    pub fn field(&self, p: &[f64; 3]) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut color = [0.0f64; 3];
        for blob in &self.blobs {
            let rot = gauss::quat_to_rot(&blob.quat);
            let mut quad = 0.0;
            for k in 0..3 {
                let mut u = 0.0;
                for j in 0..3 {
                    u += rot[j * 3 + k] * (p[j] - blob.center[j]);
                }
                quad += u * u / (blob.scales[k] * blob.scales[k]);
            }
            let w = blob.peak_density * (-0.5 * quad).exp();
            sigma += w;
            for c in 0..3 {
                color[c] += w * blob.color[c];
            }
        }
        if sigma > 1e-12 {
            for c in color.iter_mut() {
                *c /= sigma;
            }
        }
        (sigma, color)
    }
}

/// 3 to 8 random blobs: axis scales in [0.05, 0.3], peak densities in
/// [5, 50], centers inside the scene box. Deterministic per seed.
pub fn procedural_scene(seed: u64) -> SceneSpec {
    let mut rng = crate::rng::stream(seed, "scene", 0);
    let n: usize = rng.gen_range(3..=8);
    let blobs = (0..n)
        .map(|_| {
            let mut quat: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0f64));
            let norm = quat.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
            quat.iter_mut().for_each(|v| *v /= norm);
            BlobSpec {
                center: std::array::from_fn(|_| rng.gen_range(-0.5..0.5)),
                scales: std::array::from_fn(|_| rng.gen_range(0.05..0.3)),
                quat,
                color: std::array::from_fn(|_| rng.gen_range(0.05..0.95)),
                peak_density: rng.gen_range(5.0..50.0),
            }
        })
        .collect();
    SceneSpec { blobs, white_background: true, t_near: 2.0, t_far: 6.0 }
}

/// Quadrature render of the analytic field at `p_oracle` uniform samples
/// per ray; this generates the ground-truth views for 3D episodes.
pub fn oracle_render(scene: &SceneSpec, camera: &Camera, p_oracle: usize) -> Result<Vec<f64>> {
    if p_oracle < 256 {
        return Err(Error::invalid_input("oracle needs at least 256 samples per ray"));
    }
    let rays = make_rays(camera, scene.t_near, scene.t_far)?;
    let mut out = vec![0.0; rays.len() * 3];
    let mut colors = vec![[0.0f64; 3]; p_oracle];
    let mut dens = vec![0.0f64; p_oracle];
    for (i, ray) in rays.iter().enumerate() {
        let samples = sample_ray_points(ray, p_oracle, SampleMode::Uniform, &[])?;
        for (s, p) in samples.points.iter().enumerate() {
            let (sigma, color) = scene.field(p);
            dens[s] = sigma;
            colors[s] = color;
        }
        let (px, _) = composite(&colors, &dens, &samples.deltas, scene.white_background)?;
        out[i * 3..i * 3 + 3].copy_from_slice(&px);
    }
    Ok(out)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Cameras at uniformly random directions on a sphere of `radius`, all
/// looking at the origin. Deterministic per seed.
pub fn make_cameras(
    n: usize,
    radius: f64,
    focal: f64,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<Camera>> {
    if n == 0 || !(radius > 0.0) {
        return Err(Error::invalid_input("need n >= 1 cameras and positive radius"));
    }
    let mut rng = crate::rng::stream(seed, "cameras", 0);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        // uniform sphere direction from normalized gaussians
        let dir = loop {
            let v: [f64; 3] = std::array::from_fn(|_| {
                use rand_distr::StandardNormal;
                rng.sample::<f64, _>(StandardNormal)
            });
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                break [v[0] / norm, v[1] / norm, v[2] / norm];
            }
        };
        let origin = [dir[0] * radius, dir[1] * radius, dir[2] * radius];
        // camera looks down -z: z axis points from origin toward the camera
        let z = dir;
        let up = if z[1].abs() > 0.999 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let x = normalize(cross(up, z));
        let y = cross(z, x);
        let mut pose = [0.0f64; 12];
        for r in 0..3 {
            pose[r * 4] = x[r];
            pose[r * 4 + 1] = y[r];
            pose[r * 4 + 2] = z[r];
            pose[r * 4 + 3] = origin[r];
        }
        let cam = Camera { pose, focal, height, width };
        cam.validate()?;
        out.push(cam);
    }
    Ok(out)
}

/// One scene's cached multi-view dataset: cameras, per-view flattened
/// rays [H*W x 6], and oracle-rendered images.
#[derive(Clone, Debug)]
pub struct Scene3dData {
    pub spec: SceneSpec,
    pub cameras: Vec<Camera>,
    pub rays: Vec<Vec<f64>>,
    pub images: Vec<Vec<f64>>,
}

impl Scene3dData {
    #[allow(clippy::too_many_arguments)]
    pub fn generate(
        scene_seed: u64,
        n_views: usize,
        height: usize,
        width: usize,
        radius: f64,
        focal: f64,
        p_oracle: usize,
    ) -> Result<Self> {
        let spec = procedural_scene(scene_seed);
        let cameras = make_cameras(n_views, radius, focal, height, width, scene_seed ^ 0x5eed)?;
        let mut rays = Vec::with_capacity(n_views);
        let mut images = Vec::with_capacity(n_views);
        for cam in &cameras {
            let rs = make_rays(cam, spec.t_near, spec.t_far)?;
            let mut flat = Vec::with_capacity(rs.len() * 6);
            for r in &rs {
                flat.extend_from_slice(&r.origin);
                flat.extend_from_slice(&r.direction);
            }
            rays.push(flat);
            images.push(oracle_render(&spec, cam, p_oracle)?);
        }
        Ok(Scene3dData { spec, cameras, rays, images })
    }

    pub fn view_hw(&self) -> (usize, usize) {
        (self.cameras[0].height, self.cameras[0].width)
    }
}

/// Assemble an episode from cached scene data: `context_views` views as
/// context, one view as the target.
pub fn rays3d_episode(
    data: &Scene3dData,
    context_view_ids: &[usize],
    target_view_id: usize,
) -> Result<TaskBatch> {
    if context_view_ids.is_empty() {
        return Err(Error::invalid_input("need at least one context view"));
    }
    let (h, w) = data.view_hw();
    let n_px = h * w;
    let mut ctx_in = Tensor::zeros(context_view_ids.len() * n_px, 6);
    let mut ctx_out = Tensor::zeros(context_view_ids.len() * n_px, 3);
    for (vi, &view) in context_view_ids.iter().enumerate() {
        ctx_in.data[vi * n_px * 6..(vi + 1) * n_px * 6].copy_from_slice(&data.rays[view]);
        ctx_out.data[vi * n_px * 3..(vi + 1) * n_px * 3].copy_from_slice(&data.images[view]);
    }
    Ok(TaskBatch {
        modality: Modality::Rays3d,
        context_inputs: ctx_in,
        context_outputs: ctx_out,
        target_inputs: Tensor::from_vec(n_px, 6, data.rays[target_view_id].clone()),
        target_outputs: Some(Tensor::from_vec(n_px, 3, data.images[target_view_id].clone())),
        meta: BatchMeta {
            image_hw: Some((h, w)),
            context_views: context_view_ids.len(),
            t_bounds: Some((data.spec.t_near, data.spec.t_far)),
            ..Default::default()
        },
    })
}
