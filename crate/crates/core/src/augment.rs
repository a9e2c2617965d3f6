//! Seeded augmentation: affine distortion, blur, patch masking, noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{LineImage, BACKGROUND};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.hi > self.lo {
            rng.gen_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchFill {
    Noise,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometric {
    pub rotation_deg: Range,
    pub shear: Range,
    pub scale: Range,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMask {
    pub patches_per_line: (usize, usize),
    pub width_px: Range,
    pub height_fraction: Range,
    pub fill: PatchFill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplyProb {
    pub geometric: f64,
    pub blur: f64,
    pub patch: f64,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub blur_sigma: Range,
    /// Gaussian noise std as a fraction of the 0..255 range.
    pub noise_std: Range,
    pub geometric: Geometric,
    pub patch_mask: PatchMask,
    pub apply_prob: ApplyProb,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            blur_sigma: Range::new(0.0, 1.5),
            noise_std: Range::new(0.0, 0.08),
            geometric: Geometric {
                rotation_deg: Range::new(-2.0, 2.0),
                shear: Range::new(-0.15, 0.15),
                scale: Range::new(0.9, 1.1),
            },
            patch_mask: PatchMask {
                patches_per_line: (0, 3),
                width_px: Range::new(8.0, 48.0),
                height_fraction: Range::new(0.3, 1.0),
                fill: PatchFill::Noise,
            },
            apply_prob: ApplyProb { geometric: 0.5, blur: 0.3, patch: 0.3, noise: 0.5 },
        }
    }
}

impl AugmentConfig {
    /// Every stage disabled.
    pub fn identity() -> Self {
        let mut c = AugmentConfig::default();
        c.apply_prob = ApplyProb { geometric: 0.0, blur: 0.0, patch: 0.0, noise: 0.0 };
        c
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("blur_sigma", self.blur_sigma),
            ("noise_std", self.noise_std),
            ("rotation_deg", self.geometric.rotation_deg),
            ("shear", self.geometric.shear),
            ("scale", self.geometric.scale),
            ("patch width", self.patch_mask.width_px),
            ("patch height fraction", self.patch_mask.height_fraction),
        ];
        for (name, r) in ranges {
            if !(r.lo.is_finite() && r.hi.is_finite()) || r.lo > r.hi {
                return Err(Error::InvalidConfig(format!("{name} range [{}, {}] is invalid", r.lo, r.hi)));
            }
        }
        let p = &self.apply_prob;
        if [p.geometric, p.blur, p.patch, p.noise].iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig("apply probabilities must lie in [0, 1]".into()));
        }
        let hf = self.patch_mask.height_fraction;
        let (pmin, pmax) = self.patch_mask.patches_per_line;
        if self.blur_sigma.lo < 0.0 || self.noise_std.lo < 0.0 || self.geometric.scale.lo <= 0.0 {
            return Err(Error::InvalidConfig("blur, noise and scale must be non-negative".into()));
        }
        if pmin > pmax || hf.lo < 0.0 || hf.hi > 1.0 || self.patch_mask.width_px.lo < 0.0 {
            return Err(Error::InvalidConfig("invalid patch mask settings".into()));
        }
        Ok(())
    }
}

/// Rectangles `(x, y, w, h)` occluded by the patch stage, clipped to the image.
pub fn patch_rects<R: Rng>(width: usize, height: usize, cfg: &PatchMask, rng: &mut R) -> Vec<(usize, usize, usize, usize)> {
    let (lo, hi) = cfg.patches_per_line;
    let n = rng.gen_range(lo..=hi);
    (0..n)
        .map(|_| {
            let w = (cfg.width_px.sample(rng).round() as usize).clamp(1, width);
            let h = ((cfg.height_fraction.sample(rng) * height as f64).round() as usize).clamp(1, height);
            let x = rng.gen_range(0..=width - w);
            let y = rng.gen_range(0..=height - h);
            (x, y, w, h)
        })
        .collect()
}

fn affine(img: &[f32], w: usize, h: usize, g: &Geometric, rng: &mut impl Rng) -> Vec<f32> {
    let rot = g.rotation_deg.sample(rng).to_radians();
    let shear = g.shear.sample(rng);
    let scale = g.scale.sample(rng);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (s, c) = rot.sin_cos();
    // Forward map: scale, shear, rotate about the centre. Sample by inverse.
    let (a, b, cc, d) = (scale * c, scale * (c * shear - s), scale * s, scale * (s * shear + c));
    let det = a * d - b * cc;
    let (ia, ib, ic, id) = (d / det, -b / det, -cc / det, a / det);
    let bg = BACKGROUND as f32;
    let mut out = vec![bg; w * h];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let sx = ia * dx + ib * dy + cx - 0.5;
            let sy = ic * dx + id * dy + cy - 0.5;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
            let px = |xx: f64, yy: f64| -> f32 {
                if xx < 0.0 || yy < 0.0 || xx >= w as f64 || yy >= h as f64 {
                    bg
                } else {
                    img[yy as usize * w + xx as usize]
                }
            };
            let top = px(x0, y0) * (1.0 - fx) + px(x0 + 1.0, y0) * fx;
            let bot = px(x0, y0 + 1.0) * (1.0 - fx) + px(x0 + 1.0, y0 + 1.0) * fx;
            out[y * w + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

fn gaussian_blur(img: &mut [f32], w: usize, h: usize, sigma: f64) {
    if sigma < 0.2 {
        return;
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32).collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let xx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * img[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let yy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            img[y * w + x] = acc;
        }
    }
}

/// Augmented copy of `image`. Same shape; deterministic per
/// `(image, cfg, seed)`.
pub fn augment(image: &LineImage, cfg: &AugmentConfig, seed: u64) -> LineImage {
    let mut rng = seed::rng(seed, "augment", 0);
    let p = &cfg.apply_prob;
    let (w, h) = (image.width, image.height);
    // Stage decisions are drawn up front so each stage's randomness is
    // independent of whether earlier stages ran.
    let on = [p.geometric, p.blur, p.patch, p.noise].map(|q| q > 0.0 && rng.gen_bool(q));
    if !on.iter().any(|&b| b) {
        return image.clone();
    }
    let mut px: Vec<f32> = image.pixels.iter().map(|&v| v as f32).collect();
    let stage_rng = |i: u64| seed::rng(seed, "augment-stage", i);
    if on[0] {
        px = affine(&px, w, h, &cfg.geometric, &mut stage_rng(0));
    }
    if on[1] {
        gaussian_blur(&mut px, w, h, cfg.blur_sigma.sample(&mut stage_rng(1)));
    }
    if on[2] {
        let mut r = stage_rng(2);
        let mean = px.iter().sum::<f32>() / px.len() as f32;
        for (x0, y0, pw, ph) in patch_rects(w, h, &cfg.patch_mask, &mut r) {
            for y in y0..y0 + ph {
                for x in x0..x0 + pw {
                    px[y * w + x] = match cfg.patch_mask.fill {
                        PatchFill::Noise => r.gen_range(0.0..=255.0),
                        PatchFill::Mean => mean,
                    };
                }
            }
        }
    }
    if on[3] {
        let mut r = stage_rng(3);
        let std = cfg.noise_std.sample(&mut r) * 255.0;
        if std > 0.0 {
            let n = Normal::new(0.0, std).unwrap();
            px.iter_mut().for_each(|v| *v += n.sample(&mut r) as f32);
        }
    }
    LineImage { width: w, height: h, pixels: px.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect() }
}
