//! 2D image episodes: seeded value-noise textures, a directory loader,
//! completion masks, and the nearest-context-pixel baseline.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Modality;

use super::{pixel_coords, BatchMeta, TaskBatch};

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise, one lattice per channel, normalized per
/// channel to use most of [0,1].
pub fn texture_image(seed: u64, h: usize, w: usize) -> Vec<f64> {
    let mut rng = crate::rng::stream(seed, "texture", 0);
    let base: usize = rng.gen_range(3..6);
    let octaves = [(base, 1.0), (base * 2, 0.45), (base * 4, 0.2)];
    let mut out = vec![0.0; h * w * 3];
    for ch in 0..3 {
        let mut field = vec![0.0; h * w];
        for &(freq, amp) in &octaves {
            let g = freq + 1;
            let lattice: Vec<f64> = (0..g * g).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for r in 0..h {
                let fy = r as f64 / h as f64 * freq as f64;
                let y0 = fy as usize;
                let ty = smoothstep(fy - y0 as f64);
                for c in 0..w {
                    let fx = c as f64 / w as f64 * freq as f64;
                    let x0 = fx as usize;
                    let tx = smoothstep(fx - x0 as f64);
                    let v00 = lattice[y0 * g + x0];
                    let v01 = lattice[y0 * g + x0 + 1];
                    let v10 = lattice[(y0 + 1) * g + x0];
                    let v11 = lattice[(y0 + 1) * g + x0 + 1];
                    let v = v00 * (1.0 - tx) * (1.0 - ty)
                        + v01 * tx * (1.0 - ty)
                        + v10 * (1.0 - tx) * ty
                        + v11 * tx * ty;
                    field[r * w + c] += amp * v;
                }
            }
        }
        let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-9);
        for (i, v) in field.iter().enumerate() {
            out[i * 3 + ch] = (v - lo) / span * 0.9 + 0.05;
        }
    }
    out
}

/// Uniformly random context pixel subset of size round(fraction * H * W),
/// without replacement. Returns sorted row-major indices.
pub fn completion_mask(
    h: usize,
    w: usize,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid_input(format!("fraction {fraction} out of (0, 1]")));
    }
    let n = h * w;
    let take = (fraction * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..take {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    let mut chosen = idx[..take].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Regression episode: the full image is both context and target.
pub fn image2d_episode(image: &[f64], h: usize, w: usize) -> Result<TaskBatch> {
    if image.len() != h * w * 3 {
        return Err(Error::shape("image buffer size"));
    }
    let coords = pixel_coords(h, w);
    let colors = Tensor::from_vec(h * w, 3, image.to_vec());
    Ok(TaskBatch {
        modality: Modality::Image2d,
        context_inputs: coords.clone(),
        context_outputs: colors.clone(),
        target_inputs: coords,
        target_outputs: Some(colors),
        meta: BatchMeta { image_hw: Some((h, w)), ..Default::default() },
    })
}

/// Completion episode: a random pixel subset is context, the full image
/// is the target.
pub fn completion_episode(
    image: &[f64],
    h: usize,
    w: usize,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TaskBatch> {
    let chosen = completion_mask(h, w, fraction, rng)?;
    let mut mask = vec![false; h * w];
    for &i in &chosen {
        mask[i] = true;
    }
    let coords = pixel_coords(h, w);
    let mut ctx_in = Tensor::zeros(chosen.len(), 2);
    let mut ctx_out = Tensor::zeros(chosen.len(), 3);
    for (row, &i) in chosen.iter().enumerate() {
        ctx_in.row_slice_mut(row).copy_from_slice(coords.row_slice(i));
        ctx_out.row_slice_mut(row).copy_from_slice(&image[i * 3..i * 3 + 3]);
    }
    Ok(TaskBatch {
        modality: Modality::Image2d,
        context_inputs: ctx_in,
        context_outputs: ctx_out,
        target_inputs: coords,
        target_outputs: Some(Tensor::from_vec(h * w, 3, image.to_vec())),
        meta: BatchMeta {
            image_hw: Some((h, w)),
            context_mask: Some(mask),
            ..Default::default()
        },
    })
}

/// Copy-nearest-context-pixel baseline for completion (ties broken by
/// row-major order).
pub fn nearest_context_baseline(image: &[f64], h: usize, w: usize, mask: &[bool]) -> Vec<f64> {
    let context: Vec<(usize, usize)> = (0..h * w)
        .filter(|&i| mask[i])
        .map(|i| (i / w, i % w))
        .collect();
    let mut out = vec![0.0; h * w * 3];
    for r in 0..h {
        for c in 0..w {
            let mut best = usize::MAX;
            let mut best_d = i64::MAX;
            for (idx, &(cr, cc)) in context.iter().enumerate() {
                let dr = cr as i64 - r as i64;
                let dc = cc as i64 - c as i64;
                let d = dr * dr + dc * dc;
                if d < best_d {
                    best_d = d;
                    best = idx;
                }
            }
            let (cr, cc) = context[best];
            let src = (cr * w + cc) * 3;
            let dst = (r * w + c) * 3;
            out[dst..dst + 3].copy_from_slice(&image[src..src + 3]);
        }
    }
    out
}

/// Load every .ppm/.png in a directory as RGB floats, sorted by filename.
pub fn load_image_dir(dir: &Path) -> Result<Vec<(String, usize, usize, Vec<f64>)>> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|s| s.to_str()),
                Some("ppm") | Some("png")
            )
        })
        .collect();
    entries.sort();
    let mut out = Vec::new();
    for path in entries {
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("");
        let (w, h, pixels) = if ext == "ppm" {
            crate::render::read_ppm(&path)?
        } else {
            let img = image::open(&path)
                .map_err(|e| Error::invalid_input(format!("png load {name}: {e}")))?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let pixels = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
            (w, h, pixels)
        };
        out.push((name, h, w, pixels));
    }
    Ok(out)
}
