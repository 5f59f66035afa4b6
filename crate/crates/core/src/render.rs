//! Volume rendering: ray generation from pinhole cameras, point sampling
//! along rays, and the discrete transmittance quadrature
//! alpha_i = 1 - exp(-sigma_i delta_i), T_i = prod_{j<i} (1 - alpha_j),
//! C = sum_i T_i alpha_i c_i.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: [f64; 3], direction: [f64; 3], t_near: f64, t_far: f64) -> Result<Self> {
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::invalid_input(format!("ray direction norm {norm} is not unit")));
        }
        if !(0.0 <= t_near && t_near < t_far) {
            return Err(Error::invalid_input(format!("bad ray bounds [{t_near}, {t_far}]")));
        }
        Ok(Ray { origin, direction, t_near, t_far })
    }

    pub fn point_at(&self, t: f64) -> [f64; 3] {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }
}

#[derive(Clone, Debug)]
pub struct RaySamples {
    /// Strictly ascending depths in [t_near, t_far].
    pub ts: Vec<f64>,
    /// Spacings; last one is t_far - t_P.
    pub deltas: Vec<f64>,
    pub points: Vec<[f64; 3]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Midpoints of P equal bins.
    Uniform,
    /// One uniform draw per bin (noise in [0,1) supplied by the caller).
    Stratified,
}

pub fn sample_ray_points(
    ray: &Ray,
    p: usize,
    mode: SampleMode,
    noise: &[f64],
) -> Result<RaySamples> {
    if p == 0 {
        return Err(Error::invalid_input("need at least one sample per ray"));
    }
    let h = (ray.t_far - ray.t_near) / p as f64;
    let ts: Vec<f64> = match mode {
        SampleMode::Uniform => (0..p).map(|i| ray.t_near + (i as f64 + 0.5) * h).collect(),
        SampleMode::Stratified => {
            if noise.len() != p {
                return Err(Error::shape(format!(
                    "stratified noise length {} != {p}",
                    noise.len()
                )));
            }
            (0..p).map(|i| ray.t_near + (i as f64 + noise[i]) * h).collect()
        }
    };
    let mut deltas = Vec::with_capacity(p);
    for i in 0..p {
        let next = if i + 1 < p { ts[i + 1] } else { ray.t_far };
        deltas.push(next - ts[i]);
    }
    let points = ts.iter().map(|&t| ray.point_at(t)).collect();
    Ok(RaySamples { ts, deltas, points })
}

/// Composite one ray's samples into a pixel. Returns (rgb, accumulated
/// alpha). Accumulated alpha is 1 - prod_i (1 - alpha_i); the white
/// background, when enabled, adds (1 - alpha) to every channel.
pub fn composite(
    colors: &[[f64; 3]],
    densities: &[f64],
    deltas: &[f64],
    white_background: bool,
) -> Result<([f64; 3], f64)> {
    if colors.len() != densities.len() || colors.len() != deltas.len() {
        return Err(Error::shape("composite input length mismatch"));
    }
    let mut cum = 0.0f64;
    let mut px = [0.0f64; 3];
    for ((c, &sigma), &delta) in colors.iter().zip(densities.iter()).zip(deltas.iter()) {
        if sigma < 0.0 {
            return Err(Error::invalid_input(format!("negative density {sigma}")));
        }
        if delta <= 0.0 {
            return Err(Error::invalid_input(format!("non-positive delta {delta}")));
        }
        let t = (-cum).exp();
        let alpha = 1.0 - (-sigma * delta).exp();
        let w = t * alpha;
        for k in 0..3 {
            px[k] += w * c[k];
        }
        cum += sigma * delta;
    }
    let alpha_total = 1.0 - (-cum).exp();
    if white_background {
        let rest = 1.0 - alpha_total;
        for v in px.iter_mut() {
            *v += rest;
        }
    }
    Ok((px, alpha_total))
}

/// Pinhole camera: camera-to-world pose (3x4 row-major, orthonormal
/// rotation block), focal length in pixels, resolution (height, width).
/// The camera looks down its local -z axis.
#[derive(Clone, Debug)]
pub struct Camera {
    pub pose: [f64; 12],
    pub focal: f64,
    pub height: usize,
    pub width: usize,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        // columns of the rotation block must be orthonormal
        for a in 0..3 {
            for b in a..3 {
                let mut dot = 0.0;
                for r in 0..3 {
                    dot += self.pose[r * 4 + a] * self.pose[r * 4 + b];
                }
                let expect = if a == b { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-5 {
                    return Err(Error::invalid_input(format!(
                        "camera rotation block not orthonormal (col {a}.col {b} = {dot})"
                    )));
                }
            }
        }
        if !(self.focal > 0.0) {
            return Err(Error::invalid_input("camera focal must be positive"));
        }
        Ok(())
    }

    pub fn identity(focal: f64, height: usize, width: usize) -> Self {
        let mut pose = [0.0; 12];
        pose[0] = 1.0;
        pose[5] = 1.0;
        pose[10] = 1.0;
        Camera { pose, focal, height, width }
    }

    pub fn origin(&self) -> [f64; 3] {
        [self.pose[3], self.pose[7], self.pose[11]]
    }
}

/// One ray per pixel through the pixel center, row-major pixel order.
pub fn make_rays(camera: &Camera, t_near: f64, t_far: f64) -> Result<Vec<Ray>> {
    camera.validate()?;
    let (h, w) = (camera.height, camera.width);
    let origin = camera.origin();
    let mut rays = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let x = (c as f64 + 0.5 - w as f64 / 2.0) / camera.focal;
            let y = -(r as f64 + 0.5 - h as f64 / 2.0) / camera.focal;
            let dir_cam = [x, y, -1.0];
            let mut dir = [0.0f64; 3];
            for i in 0..3 {
                for j in 0..3 {
                    dir[i] += camera.pose[i * 4 + j] * dir_cam[j];
                }
            }
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in dir.iter_mut() {
                *v /= norm;
            }
            rays.push(Ray::new(origin, dir, t_near, t_far)?);
        }
    }
    Ok(rays)
}

/// 8-bit binary PPM (P6). Pixels are row-major RGB floats in [0,1].
pub fn write_ppm(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<()> {
    if pixels.len() != width * height * 3 {
        return Err(Error::shape(format!(
            "ppm pixel buffer {} for {width}x{height}",
            pixels.len()
        )));
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> =
        pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    f.write_all(&bytes)?;
    Ok(())
}

/// Read a binary PPM (P6, maxval 255) into row-major RGB floats in [0,1].
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let mut pos = 0;
    let mut token = |raw: &[u8]| -> Result<String> {
        while pos < raw.len() && (raw[pos] as char).is_whitespace() {
            pos += 1;
        }
        while pos < raw.len() && raw[pos] == b'#' {
            while pos < raw.len() && raw[pos] != b'\n' {
                pos += 1;
            }
            while pos < raw.len() && (raw[pos] as char).is_whitespace() {
                pos += 1;
            }
        }
        let start = pos;
        while pos < raw.len() && !(raw[pos] as char).is_whitespace() {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&raw[start..pos]).to_string())
    };
    let magic = token(&raw)?;
    if magic != "P6" {
        return Err(Error::invalid_input(format!("not a P6 ppm (magic {magic})")));
    }
    let width: usize = token(&raw)?.parse().map_err(|_| Error::invalid_input("bad ppm width"))?;
    let height: usize =
        token(&raw)?.parse().map_err(|_| Error::invalid_input("bad ppm height"))?;
    let maxval: usize =
        token(&raw)?.parse().map_err(|_| Error::invalid_input("bad ppm maxval"))?;
    if maxval != 255 {
        return Err(Error::invalid_input("only 8-bit ppm supported"));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height * 3;
    if raw.len() < pos + need {
        return Err(Error::invalid_input("truncated ppm payload"));
    }
    let pixels = raw[pos..pos + need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((width, height, pixels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn uniform_sampling_example() {
        let ray = Ray::new([0.0; 3], [0.0, 0.0, -1.0], 0.0, 1.0).unwrap();
        let s = sample_ray_points(&ray, 2, SampleMode::Uniform, &[]).unwrap();
        assert_eq!(s.ts, vec![0.25, 0.75]);
        assert_eq!(s.deltas, vec![0.5, 0.25]);
    }

    #[test]
    fn stratified_zero_noise_hits_left_edges() {
        let ray = Ray::new([0.0; 3], [0.0, 0.0, -1.0], 2.0, 6.0).unwrap();
        let s = sample_ray_points(&ray, 4, SampleMode::Stratified, &[0.0; 4]).unwrap();
        assert_eq!(s.ts, vec![2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn stratified_samples_stay_in_bins() {
        let ray = Ray::new([0.0; 3], [1.0, 0.0, 0.0], 1.0, 3.0).unwrap();
        let mut rng = crate::rng::stream(17, "strat", 0);
        for _ in 0..1000 {
            let noise: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s = sample_ray_points(&ray, 8, SampleMode::Stratified, &noise).unwrap();
            let h = 0.25;
            for i in 0..8 {
                assert!(s.ts[i] >= 1.0 + i as f64 * h && s.ts[i] < 1.0 + (i + 1) as f64 * h);
                if i > 0 {
                    assert!(s.ts[i] > s.ts[i - 1]);
                }
                assert!(s.deltas[i] > 0.0);
            }
        }
    }

    #[test]
    fn composite_empty_medium() {
        let (px, alpha) = composite(&[[1.0, 1.0, 1.0]; 4], &[0.0; 4], &[0.25; 4], false).unwrap();
        assert_eq!(px, [0.0, 0.0, 0.0]);
        assert_eq!(alpha, 0.0);
    }

    #[test]
    fn composite_opaque_limit() {
        let (px, alpha) = composite(&[[1.0, 0.0, 0.0]], &[40.0], &[1.0], false).unwrap();
        assert!((px[0] - 1.0).abs() < 1e-15);
        assert!((alpha - 1.0).abs() < 1e-15);
    }

    #[test]
    fn composite_homogeneous_matches_analytic() {
        // sigma = 1 over unit length: C = 1 - e^{-1} per channel
        let p = 256;
        let colors = vec![[1.0, 1.0, 1.0]; p];
        let dens = vec![1.0; p];
        let deltas = vec![1.0 / p as f64; p];
        let (px, _) = composite(&colors, &dens, &deltas, false).unwrap();
        let expect = 1.0 - (-1.0f64).exp();
        for v in px {
            assert!((v - expect).abs() < 1e-3, "{v} vs {expect}");
        }
    }

    #[test]
    fn composite_negative_density_errors() {
        assert!(composite(&[[0.0; 3]], &[-0.1], &[0.5], false).is_err());
    }

    #[test]
    fn composite_interval_split_invariance() {
        let colors = vec![[0.2, 0.5, 0.9], [0.8, 0.1, 0.3], [0.4, 0.4, 0.4]];
        let dens = vec![0.7, 2.0, 1.2];
        let deltas = vec![0.4, 0.3, 0.5];
        let (a, _) = composite(&colors, &dens, &deltas, true).unwrap();
        // split the middle interval in two halves with the same density
        let colors2 = vec![colors[0], colors[1], colors[1], colors[2]];
        let dens2 = vec![dens[0], dens[1], dens[1], dens[2]];
        let deltas2 = vec![0.4, 0.15, 0.15, 0.5];
        let (b, _) = composite(&colors2, &dens2, &deltas2, true).unwrap();
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn alpha_monotone_in_density() {
        let colors = vec![[0.5; 3]; 4];
        let deltas = vec![0.25; 4];
        let mut dens = vec![0.3, 1.0, 0.2, 0.8];
        let (_, a0) = composite(&colors, &dens, &deltas, false).unwrap();
        for i in 0..4 {
            let mut d2 = dens.clone();
            d2[i] += 0.5;
            let (_, a1) = composite(&colors, &d2, &deltas, false).unwrap();
            assert!(a1 >= a0);
        }
        dens[2] += 10.0;
        let (_, a2) = composite(&colors, &dens, &deltas, false).unwrap();
        assert!(a2 > a0);
    }

    #[test]
    fn identity_camera_center_ray_points_down_negative_z() {
        let cam = Camera::identity(50.0, 9, 9);
        let rays = make_rays(&cam, 0.1, 4.0).unwrap();
        assert_eq!(rays.len(), 81);
        let center = &rays[4 * 9 + 4];
        assert!(center.direction[2] < -0.999);
        assert!(center.direction[0].abs() < 0.02);
        for ray in &rays {
            let n = ray.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn non_orthonormal_pose_rejected() {
        let mut cam = Camera::identity(30.0, 4, 4);
        cam.pose[0] = 2.0;
        assert!(make_rays(&cam, 0.1, 1.0).is_err());
    }

    #[test]
    fn ppm_roundtrip() {
        let dir = std::env::temp_dir().join("npf_ppm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.ppm");
        let pixels: Vec<f64> = (0..2 * 3 * 3).map(|i| (i as f64) / 17.0).collect();
        write_ppm(&path, 3, 2, &pixels).unwrap();
        let (w, h, back) = read_ppm(&path).unwrap();
        assert_eq!((w, h), (3, 2));
        for (a, b) in pixels.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1.0 / 255.0 + 1e-9);
        }
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..2], b"P6");
    }
}
