//! Procedural forgery benchmark generation.
//!
//! Authentic base images come from three texture programs (value noise,
//! oriented gradients, flat geometric shapes over a gradient). A forgery
//! applies one family's transform to a random rectangle or ellipse with
//! feathered blending inside the region; the recorded mask is the exact
//! region footprint. Pasted content also takes a mild photometric shift so
//! every family leaves a statistical trace at the patch scale.
//!
//! Everything is deterministic per (seed, sample index).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::rng::sample_stream;

use super::io::{Family, Label, SampleRecord, Split, FORGERY_FAMILIES};

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub image_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Family excluded from train/val and exclusively used in test-ood.
    pub holdout: Family,
    /// Fraction of forged samples per split.
    pub forged_ratio: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            image_size: 64,
            n_train: 2000,
            n_val: 500,
            n_test: 500,
            holdout: Family::BlurPatch,
            forged_ratio: 0.5,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::config("split sizes must be positive".to_string()));
        }
        if self.image_size % 16 != 0 || self.image_size < 32 {
            return Err(Error::config("image_size must be a multiple of 16, ≥ 32".to_string()));
        }
        if self.holdout == Family::None {
            return Err(Error::config("holdout must be a forgery family".to_string()));
        }
        if !(0.0..1.0).contains(&self.forged_ratio) && self.forged_ratio != 1.0 {
            return Err(Error::config("forged_ratio must lie in (0,1]".to_string()));
        }
        Ok(())
    }

    fn train_families(&self) -> Vec<Family> {
        FORGERY_FAMILIES.iter().copied().filter(|&f| f != self.holdout).collect()
    }
}

/// Generate all splits. Record order: train, val, test-ood.
pub fn generate(cfg: &GenConfig, seed: u64) -> Result<Vec<SampleRecord>> {
    cfg.validate()?;
    let mut records = Vec::with_capacity(cfg.n_train + cfg.n_val + cfg.n_test);
    let mut global = 0u64;
    let in_dist = cfg.train_families();
    let ood = vec![cfg.holdout];
    for (split, count, families) in [
        (Split::Train, cfg.n_train, &in_dist),
        (Split::Val, cfg.n_val, &in_dist),
        (Split::TestOod, cfg.n_test, &ood),
    ] {
        for i in 0..count {
            let mut rng = sample_stream(seed, global);
            global += 1;
            let forged = (i as f64 + 0.5) / count as f64 <= cfg.forged_ratio;
            let rec = make_sample(cfg, &mut rng, split, i, forged, families)?;
            records.push(rec);
        }
    }
    Ok(records)
}

fn make_sample(
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
    split: Split,
    idx: usize,
    forged: bool,
    families: &[Family],
) -> Result<SampleRecord> {
    let s = cfg.image_size;
    let mut img = base_texture(rng, s);
    let (mask, family) = if forged {
        let family = families[rng.random_range(0..families.len())];
        let mask = apply_forgery(rng, &mut img, s, family);
        (mask, family)
    } else {
        (vec![0u8; s * s], Family::None)
    };
    let image: Vec<u8> = img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let rec = SampleRecord {
        id: format!("{}-{idx:05}", split.as_str()),
        h: s,
        w: s,
        image,
        label: if forged { Label::Forged } else { Label::Authentic },
        mask,
        family,
        split,
    };
    rec.validate()?;
    Ok(rec)
}

// ── textures ────────────────────────────────────────────────────────────

/// Smooth value noise: bilinear interpolation of a coarse random lattice.
fn value_noise(rng: &mut ChaCha8Rng, s: usize, cells: usize, amp: f64) -> Vec<f64> {
    let lat: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random::<f64>()).collect();
    let mut out = vec![0.0; s * s];
    let step = s as f64 / cells as f64;
    for y in 0..s {
        let gy = y as f64 / step;
        let y0 = (gy as usize).min(cells - 1);
        let fy = gy - y0 as f64;
        for x in 0..s {
            let gx = x as f64 / step;
            let x0 = (gx as usize).min(cells - 1);
            let fx = gx - x0 as f64;
            let l = cells + 1;
            let v = (1.0 - fy) * ((1.0 - fx) * lat[y0 * l + x0] + fx * lat[y0 * l + x0 + 1])
                + fy * ((1.0 - fx) * lat[(y0 + 1) * l + x0] + fx * lat[(y0 + 1) * l + x0 + 1]);
            out[y * s + x] = (v - 0.5) * amp;
        }
    }
    out
}

/// RGB base texture in [0,1], plane-major.
fn base_texture(rng: &mut ChaCha8Rng, s: usize) -> Vec<f64> {
    let kind = rng.random_range(0..3u32);
    let mut img = vec![0.0f64; 3 * s * s];
    match kind {
        0 => {
            // Value noise over a base color, partially correlated channels.
            let base: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            let shared = value_noise(rng, s, 4 + rng.random_range(0..4) as usize, 0.8);
            for c in 0..3 {
                let own = value_noise(rng, s, 4 + rng.random_range(0..4) as usize, 0.5);
                for i in 0..s * s {
                    img[c * s * s + i] = 0.3 + 0.4 * base[c] + 0.5 * shared[i] + 0.3 * own[i];
                }
            }
        }
        1 => {
            // Linear gradient between two colors at a random orientation.
            let a: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            let b: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            let theta = rng.random::<f64>() * std::f64::consts::TAU;
            let (dx, dy) = (theta.cos(), theta.sin());
            let fine = value_noise(rng, s, 8, 0.12);
            for y in 0..s {
                for x in 0..s {
                    let t = ((x as f64 * dx + y as f64 * dy) / s as f64 + 1.0) / 2.0;
                    let t = t.clamp(0.0, 1.0);
                    for c in 0..3 {
                        img[c * s * s + y * s + x] = a[c] * (1.0 - t) + b[c] * t + fine[y * s + x];
                    }
                }
            }
        }
        _ => {
            // Flat shapes over a gradient background.
            let bg: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            let fine = value_noise(rng, s, 6, 0.1);
            for y in 0..s {
                for x in 0..s {
                    let t = (x + y) as f64 / (2 * s) as f64;
                    for c in 0..3 {
                        img[c * s * s + y * s + x] = bg[c] * (0.6 + 0.4 * t) + fine[y * s + x];
                    }
                }
            }
            for _ in 0..2 + rng.random_range(0..3u32) {
                let col: [f64; 3] = [rng.random(), rng.random(), rng.random()];
                let cx = rng.random_range(0..s) as f64;
                let cy = rng.random_range(0..s) as f64;
                let rx = 3.0 + rng.random::<f64>() * s as f64 / 4.0;
                let ry = 3.0 + rng.random::<f64>() * s as f64 / 4.0;
                let round = rng.random::<f64>() < 0.5;
                for y in 0..s {
                    for x in 0..s {
                        let inside = if round {
                            let dx = (x as f64 - cx) / rx;
                            let dy = (y as f64 - cy) / ry;
                            dx * dx + dy * dy <= 1.0
                        } else {
                            (x as f64 - cx).abs() <= rx && (y as f64 - cy).abs() <= ry
                        };
                        if inside {
                            for c in 0..3 {
                                img[c * s * s + y * s + x] = col[c];
                            }
                        }
                    }
                }
            }
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

// ── forgery regions ─────────────────────────────────────────────────────

struct Region {
    /// Per-pixel blend alpha in [0,1]; footprint = alpha > 0.
    alpha: Vec<f64>,
}

/// Random rectangle or ellipse with area fraction ~ U(0.10, 0.30) and a
/// ~2-pixel feathered rim, fully inside the image.
fn sample_region(rng: &mut ChaCha8Rng, s: usize) -> Region {
    let frac = 0.10 + rng.random::<f64>() * 0.20;
    let area = frac * (s * s) as f64;
    let aspect = 0.5 + rng.random::<f64>() * 1.5;
    let feather = 2.0;
    let mut alpha = vec![0.0; s * s];
    if rng.random::<f64>() < 0.5 {
        // Rectangle.
        let rw = (area * aspect).sqrt().min(s as f64 - 2.0).max(4.0);
        let rh = (area / rw).min(s as f64 - 2.0).max(4.0);
        let x0 = rng.random::<f64>() * (s as f64 - rw);
        let y0 = rng.random::<f64>() * (s as f64 - rh);
        for y in 0..s {
            for x in 0..s {
                let fx = x as f64 + 0.5;
                let fy = y as f64 + 0.5;
                if fx >= x0 && fx <= x0 + rw && fy >= y0 && fy <= y0 + rh {
                    let d = (fx - x0).min(x0 + rw - fx).min(fy - y0).min(y0 + rh - fy);
                    alpha[y * s + x] = (d / feather).min(1.0).max(0.05);
                }
            }
        }
    } else {
        // Ellipse: π·a·b = area.
        let a = (area * aspect / std::f64::consts::PI).sqrt().min(s as f64 / 2.0 - 1.0).max(3.0);
        let b = (area / (std::f64::consts::PI * a)).min(s as f64 / 2.0 - 1.0).max(3.0);
        let cx = a + rng.random::<f64>() * (s as f64 - 2.0 * a);
        let cy = b + rng.random::<f64>() * (s as f64 - 2.0 * b);
        for y in 0..s {
            for x in 0..s {
                let dx = (x as f64 + 0.5 - cx) / a;
                let dy = (y as f64 + 0.5 - cy) / b;
                let r = (dx * dx + dy * dy).sqrt();
                if r <= 1.0 {
                    let edge_px = (1.0 - r) * a.min(b);
                    alpha[y * s + x] = (edge_px / feather).min(1.0).max(0.05);
                }
            }
        }
    }
    // A region must move at least one pixel.
    if alpha.iter().all(|&a| a == 0.0) {
        let c = s / 2 * s + s / 2;
        alpha[c] = 1.0;
    }
    Region { alpha }
}

/// Mild brightness/contrast shift applied to pasted content so copy-move and
/// splice leave a photometric trace.
fn photometric_jitter(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let gain = 1.0 + (rng.random::<f64>() - 0.5) * 0.3;
    let bias_mag = 0.06 + rng.random::<f64>() * 0.08;
    let bias = if rng.random::<f64>() < 0.5 { bias_mag } else { -bias_mag };
    (gain, bias)
}

fn apply_forgery(rng: &mut ChaCha8Rng, img: &mut [f64], s: usize, family: Family) -> Vec<u8> {
    let region = sample_region(rng, s);
    let hw = s * s;
    let content: Vec<f64> = match family {
        Family::CopyMove => {
            let dx = (rng.random_range(0..s / 2) + s / 4) as isize * if rng.random::<f64>() < 0.5 { 1 } else { -1 };
            let dy = (rng.random_range(0..s / 2) + s / 4) as isize * if rng.random::<f64>() < 0.5 { 1 } else { -1 };
            let (gain, bias) = photometric_jitter(rng);
            let mut out = vec![0.0; 3 * hw];
            for c in 0..3 {
                for y in 0..s {
                    for x in 0..s {
                        let sy = (y as isize - dy).rem_euclid(s as isize) as usize;
                        let sx = (x as isize - dx).rem_euclid(s as isize) as usize;
                        out[c * hw + y * s + x] = img[c * hw + sy * s + sx] * gain + bias;
                    }
                }
            }
            out
        }
        Family::Splice => {
            let mut donor = base_texture(rng, s);
            let (gain, bias) = photometric_jitter(rng);
            for v in &mut donor {
                *v = *v * gain + bias;
            }
            donor
        }
        Family::NoiseInpaint => {
            let sigma = 0.15 + rng.random::<f64>() * 0.15;
            let mut out = img.to_vec();
            for v in out.iter_mut() {
                // Irwin–Hall(4) ≈ normal.
                let n: f64 = (0..4).map(|_| rng.random::<f64>()).sum::<f64>() - 2.0;
                *v += n * sigma;
            }
            out
        }
        Family::BlurPatch => {
            // Two box-blur passes, radius 2.
            let mut out = img.to_vec();
            for _ in 0..2 {
                out = box_blur(&out, s, 2);
            }
            out
        }
        Family::None => unreachable!("authentic samples never reach apply_forgery"),
    };
    let mut mask = vec![0u8; hw];
    for i in 0..hw {
        let a = region.alpha[i];
        if a > 0.0 {
            mask[i] = 1;
            for c in 0..3 {
                let j = c * hw + i;
                img[j] = (1.0 - a) * img[j] + a * content[j].clamp(0.0, 1.0);
            }
        }
    }
    mask
}

fn box_blur(img: &[f64], s: usize, radius: usize) -> Vec<f64> {
    let hw = s * s;
    let mut out = vec![0.0; 3 * hw];
    let r = radius as isize;
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let yy = y as isize + dy;
                        let xx = x as isize + dx;
                        if yy >= 0 && yy < s as isize && xx >= 0 && xx < s as isize {
                            acc += img[c * hw + yy as usize * s + xx as usize];
                            cnt += 1.0;
                        }
                    }
                }
                out[c * hw + y * s + x] = acc / cnt;
            }
        }
    }
    out
}
