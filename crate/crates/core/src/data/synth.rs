//! Procedural RGB-D scenes with graded distortions.
//!
//! Each scene is a textured gradient background with a few flat shapes at
//! distinct simulated depths. The same scene is written at `levels`
//! distortion magnitudes; the score decreases linearly with the level and
//! is kept away from the sigmoid saturation ends.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::image_io;
use super::manifest::{save_manifest, ManifestRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distortion {
    GaussianBlur,
    AdditiveNoise,
    /// Each scene draws blur or noise.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Number of base scenes; total records = `n_samples * levels`.
    pub n_samples: usize,
    pub image_size: usize,
    pub distortion: Distortion,
    pub levels: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_samples: 20,
            image_size: 64,
            distortion: Distortion::GaussianBlur,
            levels: 5,
            seed: 0,
        }
    }
}

/// `0.05 + 0.9*(1 - level/levels)`: level 0 maps to 0.95.
pub fn level_score(level: usize, levels: usize) -> f64 {
    0.05 + 0.9 * (1.0 - level as f64 / levels as f64)
}

struct Scene {
    /// `[3, s, s]` in [0,1].
    rgb: Vec<f64>,
    /// `[s, s]` in [0,1].
    depth: Vec<f64>,
}

fn render_scene(size: usize, rng: &mut ChaCha12Rng) -> Scene {
    let s = size;
    let mut rgb = vec![0.0; 3 * s * s];
    let mut depth = vec![0.0; s * s];

    // textured gradient background: oriented ramp plus two sinusoids
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let freq_a = rng.gen_range(4.0..14.0);
    let freq_b = rng.gen_range(10.0..30.0);
    let base: [f64; 3] = [
        rng.gen_range(0.2..0.8),
        rng.gen_range(0.2..0.8),
        rng.gen_range(0.2..0.8),
    ];
    for y in 0..s {
        for x in 0..s {
            let u = x as f64 / s as f64;
            let v = y as f64 / s as f64;
            let ramp = 0.5 + 0.5 * (ca * (u - 0.5) + sa * (v - 0.5));
            let tex = 0.12 * (freq_a * u * std::f64::consts::TAU).sin()
                + 0.08 * (freq_b * (u * 0.7 + v) * std::f64::consts::TAU).sin();
            for c in 0..3 {
                let val = (base[c] * 0.6 + 0.4 * ramp + tex).clamp(0.02, 0.98);
                rgb[c * s * s + y * s + x] = val;
            }
            // background depth: far-to-near vertical ramp
            depth[y * s + x] = 0.15 + 0.35 * v;
        }
    }

    // 2-4 shapes at constant simulated depths, nearer than the background
    let n_shapes = rng.gen_range(2..=4);
    for _ in 0..n_shapes {
        let shape_depth = rng.gen_range(0.55..0.95);
        let color: [f64; 3] = [
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.95),
        ];
        let cx = rng.gen_range(0.15..0.85) * s as f64;
        let cy = rng.gen_range(0.15..0.85) * s as f64;
        let radius = rng.gen_range(0.08..0.22) * s as f64;
        let circular = rng.gen_range(0.0..1.0) < 0.5;
        for y in 0..s {
            for x in 0..s {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let inside = if circular {
                    dx * dx + dy * dy <= radius * radius
                } else {
                    dx.abs() <= radius && dy.abs() <= radius
                };
                if inside {
                    for c in 0..3 {
                        rgb[c * s * s + y * s + x] = color[c];
                    }
                    depth[y * s + x] = shape_depth;
                }
            }
        }
    }
    Scene { rgb, depth }
}

/// Separable Gaussian blur with edge clamping; `sigma == 0` is identity.
fn gaussian_blur(values: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut total = 0.0;
    for i in -radius..=radius {
        let v = (-0.5 * (i as f64 / sigma).powi(2)).exp();
        kernel.push(v);
        total += v;
    }
    for k in &mut kernel {
        *k /= total;
    }
    let clamp = |v: isize, max: usize| v.clamp(0, max as isize - 1) as usize;
    let mut tmp = vec![0.0; values.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sx = clamp(x as isize + ki as isize - radius, w);
                acc += k * values[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; values.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sy = clamp(y as isize + ki as isize - radius, h);
                acc += k * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn gaussian_noise(rng: &mut ChaCha12Rng) -> f64 {
    // Box-Muller from two uniform draws
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn distort(
    rgb: &[f64],
    size: usize,
    kind: Distortion,
    level: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<f64> {
    match kind {
        Distortion::GaussianBlur => {
            let sigma = 0.8 * level as f64;
            let plane = size * size;
            let mut out = Vec::with_capacity(rgb.len());
            for c in 0..3 {
                out.extend(gaussian_blur(&rgb[c * plane..(c + 1) * plane], size, size, sigma));
            }
            out
        }
        Distortion::AdditiveNoise => {
            let sigma = 0.08 * level as f64;
            rgb.iter()
                .map(|&v| (v + sigma * gaussian_noise(rng)).clamp(0.0, 1.0))
                .collect()
        }
        Distortion::Mixed => unreachable!("mixed resolves to a concrete kind per scene"),
    }
}

/// Renders the dataset under `out_dir` and returns the manifest path.
pub fn synth_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<PathBuf> {
    if spec.n_samples == 0 || spec.levels == 0 || spec.image_size < 8 {
        return Err(Error::Config(
            "synth spec needs n_samples >= 1, levels >= 1, image_size >= 8".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.n_samples * spec.levels);
    let s = spec.image_size;
    for scene_idx in 0..spec.n_samples {
        let scene = render_scene(s, &mut rng);
        let kind = match spec.distortion {
            Distortion::Mixed => {
                if rng.gen_range(0.0..1.0) < 0.5 {
                    Distortion::GaussianBlur
                } else {
                    Distortion::AdditiveNoise
                }
            }
            other => other,
        };
        let group = format!("scene_{scene_idx:04}");
        let depth_name = format!("{group}_depth.png");
        image_io::save_gray16(&out_dir.join(&depth_name), &scene.depth, s, s)?;
        for level in 0..spec.levels {
            let distorted = distort(&scene.rgb, s, kind, level, &mut rng);
            let rgb_name = format!("{group}_lvl{level}.png");
            image_io::save_rgb8(&out_dir.join(&rgb_name), &distorted, s, s)?;
            records.push(ManifestRecord {
                rgb_path: rgb_name,
                depth_path: depth_name.clone(),
                score: level_score(level, spec.levels),
                group_id: Some(group.clone()),
            });
        }
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    save_manifest(&manifest_path, &records)?;
    Ok(manifest_path)
}
