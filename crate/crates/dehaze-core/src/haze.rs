//! Paired (clean, hazy) data synthesis with a simplified scattering model:
//! I = J * t + A * (1 - t), t = exp(-beta * depth), followed by gamma shift,
//! color cast, and sensor noise.

use crate::error::{DehazeError, Result};
use crate::imgio;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HazeParams {
    /// Atmospheric light per channel, each in [0.7, 1.0].
    pub atmospheric_light: [f64; 3],
    /// Scattering coefficient, > 0.
    pub beta_scatter: f64,
    pub gamma_shift: f64,
    pub color_cast_rgb: [f64; 3],
    pub noise_sigma: f64,
    /// Seed used to regenerate the depth map.
    pub depth_seed: u64,
    /// Seed used for the additive noise draw.
    pub noise_seed: u64,
}

impl HazeParams {
    pub fn validate(&self) -> Result<()> {
        for a in self.atmospheric_light {
            if !(0.7..=1.0).contains(&a) {
                return Err(DehazeError::contract(format!(
                    "atmospheric light {a} outside [0.7, 1.0]"
                )));
            }
        }
        if self.beta_scatter <= 0.0 {
            return Err(DehazeError::contract("beta_scatter must be > 0"));
        }
        if self.noise_sigma < 0.0 {
            return Err(DehazeError::contract("noise_sigma must be >= 0"));
        }
        Ok(())
    }

    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        HazeParams {
            atmospheric_light: [
                rng.gen_range(0.7..1.0),
                rng.gen_range(0.7..1.0),
                rng.gen_range(0.7..1.0),
            ],
            beta_scatter: rng.gen_range(0.5..3.0),
            gamma_shift: rng.gen_range(0.8..1.2),
            color_cast_rgb: [
                rng.gen_range(0.92..1.0),
                rng.gen_range(0.92..1.0),
                rng.gen_range(0.92..1.0),
            ],
            noise_sigma: rng.gen_range(0.0..0.02),
            depth_seed: rng.gen(),
            noise_seed: rng.gen(),
        }
    }
}

/// Smooth depth proxy in [0,1]: bilinearly upsampled low-frequency noise
/// blended with a vertical gradient (far scene toward the top).
pub fn synth_depth(h: usize, w: usize, seed: u64) -> Result<Array3<f32>> {
    if h < 8 || w < 8 {
        return Err(DehazeError::contract("synth_depth requires H, W >= 8"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (gh, gw) = (5usize, 5usize);
    let coarse: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut out = Array3::<f32>::zeros((h, w, 1));
    for y in 0..h {
        let fy = y as f64 / (h - 1) as f64 * (gh - 1) as f64;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(gh - 1);
        let ty = fy - y0 as f64;
        let vertical = 1.0 - y as f64 / (h - 1) as f64;
        for x in 0..w {
            let fx = x as f64 / (w - 1) as f64 * (gw - 1) as f64;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(gw - 1);
            let tx = fx - x0 as f64;
            let n00 = coarse[y0 * gw + x0];
            let n01 = coarse[y0 * gw + x1];
            let n10 = coarse[y1 * gw + x0];
            let n11 = coarse[y1 * gw + x1];
            let noise = n00 * (1.0 - ty) * (1.0 - tx)
                + n01 * (1.0 - ty) * tx
                + n10 * ty * (1.0 - tx)
                + n11 * ty * tx;
            let d = 0.5 * vertical + 0.5 * noise;
            out[(y, x, 0)] = d.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(out)
}

/// Koschmieder scattering: I = J * t + A * (1 - t), clamped to [0,1].
pub fn apply_scattering(
    clean: &Array3<f32>,
    depth: &Array3<f32>,
    params: &HazeParams,
) -> Result<Array3<f32>> {
    params.validate()?;
    let (h, w, c) = (clean.shape()[0], clean.shape()[1], clean.shape()[2]);
    if depth.shape()[0] != h || depth.shape()[1] != w {
        return Err(DehazeError::Shape {
            expected: format!("depth {h}x{w}"),
            got: format!("{:?}", depth.shape()),
        });
    }
    let mut out = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            let t = (-params.beta_scatter * depth[(y, x, 0)] as f64).exp() as f32;
            for ch in 0..c {
                let a = params.atmospheric_light[ch] as f32;
                out[(y, x, ch)] = (clean[(y, x, ch)] * t + a * (1.0 - t)).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Gamma shift, per-channel color cast, additive Gaussian noise (seeded).
pub fn degrade_extras(img: &Array3<f32>, params: &HazeParams) -> Result<Array3<f32>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.noise_seed);
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut v = (img[(y, x, ch)] as f64).powf(params.gamma_shift);
                v *= params.color_cast_rgb[ch];
                if params.noise_sigma > 0.0 {
                    v += crate::nn::normal_sample(&mut rng) * params.noise_sigma;
                } else {
                    // keep the rng stream position independent of sigma
                    let _ = crate::nn::normal_sample(&mut rng);
                }
                out[(y, x, ch)] = (v as f32).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// One manifest row: where the pair lives and how the hazy half was made.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clean_path: PathBuf,
    pub hazy_path: PathBuf,
    pub params: HazeParams,
    pub seed: u64,
}

pub type Manifest = Vec<ManifestEntry>;

/// Generate `count` (clean, hazy) patch pairs plus a JSON manifest.
/// Randomness for pair i derives from (seed, i), so output is reproducible.
pub fn make_dataset(
    clean_dir: &Path,
    count: usize,
    seed: u64,
    out_dir: &Path,
    patch: usize,
) -> Result<Manifest> {
    let mut sources: Vec<PathBuf> = std::fs::read_dir(clean_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    sources.sort();
    if sources.is_empty() {
        return Err(DehazeError::contract(format!(
            "no PNG images in {}",
            clean_dir.display()
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut manifest = Manifest::new();
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let src = &sources[rng.gen_range(0..sources.len())];
        let img = imgio::load_png(src)?;
        let (h, w) = (img.shape()[0], img.shape()[1]);
        if h < patch || w < patch {
            return Err(DehazeError::contract(format!(
                "source image {} smaller than patch size {patch}",
                src.display()
            )));
        }
        let y0 = rng.gen_range(0..=h - patch);
        let x0 = rng.gen_range(0..=w - patch);
        // snap to the 8-bit grid so the stored PNG is the exact pipeline input
        let clean = img
            .slice(ndarray::s![y0..y0 + patch, x0..x0 + patch, ..])
            .mapv(|v| imgio::to_u8(v) as f32 / 255.0);
        let params = HazeParams::sample(&mut rng);
        let hazy = synthesize_pair(&clean, &params)?;
        let clean_path = out_dir.join(format!("pair_{i:05}_clean.png"));
        let hazy_path = out_dir.join(format!("pair_{i:05}_hazy.png"));
        imgio::save_png(&clean_path, &clean)?;
        imgio::save_png(&hazy_path, &hazy)?;
        manifest.push(ManifestEntry {
            clean_path,
            hazy_path,
            params,
            seed,
        });
    }
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// The full degradation for one clean patch, recomputable from params alone.
pub fn synthesize_pair(clean: &Array3<f32>, params: &HazeParams) -> Result<Array3<f32>> {
    let depth = synth_depth(clean.shape()[0], clean.shape()[1], params.depth_seed)?;
    let scattered = apply_scattering(clean, &depth, params)?;
    degrade_extras(&scattered, params)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Procedural clean images: smooth color fields with simple geometry,
/// enough structure for the toy codebook to learn.
pub fn make_clean_images(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let img = clean_pattern(size, &mut rng);
        let path = dir.join(format!("clean_{i:04}.png"));
        imgio::save_png(&path, &img)?;
        paths.push(path);
    }
    Ok(paths)
}

fn clean_pattern(size: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let base: [f64; 3] = [
        rng.gen_range(0.1..0.9),
        rng.gen_range(0.1..0.9),
        rng.gen_range(0.1..0.9),
    ];
    let freq = rng.gen_range(1.0..3.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let mut img = Array3::<f32>::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let u = x as f64 / size as f64;
            let v = y as f64 / size as f64;
            let wave =
                (std::f64::consts::TAU * freq * (u * angle.cos() + v * angle.sin()) + phase).sin();
            for c in 0..3 {
                img[(y, x, c)] = ((base[c] + 0.25 * wave).clamp(0.02, 0.98)) as f32;
            }
        }
    }
    // a few solid shapes with their own colors
    for _ in 0..rng.gen_range(2..5) {
        let color: [f32; 3] = [
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.95),
        ];
        let cy = rng.gen_range(0..size);
        let cx = rng.gen_range(0..size);
        let r = rng.gen_range(size / 10..size / 3) as isize;
        for y in 0..size {
            for x in 0..size {
                let dy = y as isize - cy as isize;
                let dx = x as isize - cx as isize;
                if dy * dy + dx * dx <= r * r {
                    for c in 0..3 {
                        img[(y, x, c)] = color[c];
                    }
                }
            }
        }
    }
    img
}
