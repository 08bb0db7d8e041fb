//! Stochastic affine augmentation: per-image rotation, translation, and
//! scaling sampled uniformly, applied in a single bilinear resampling pass
//! into the target grid. Out-of-footprint samples fill with -1 (black).

use rand::Rng;

use crate::data::normalize_pixel;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub target_size: usize,
    pub max_rotation: f64,
    pub max_translate: f64,
    pub scale_range: (f64, f64),
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            target_size: 112,
            max_rotation: 45.0,
            max_translate: 0.15,
            scale_range: (0.85, 1.15),
            enabled: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=180.0).contains(&self.max_rotation) {
            return Err("max_rotation must be in [0, 180]".into());
        }
        if !(0.0..1.0).contains(&self.max_translate) {
            return Err("max_translate must be in [0, 1)".into());
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err("scale_range must satisfy 0 < low <= high".into());
        }
        if self.target_size == 0 {
            return Err("target_size must be >= 1".into());
        }
        Ok(())
    }

    /// Resize-only configuration for validation/test evaluation.
    pub fn disabled(target_size: usize) -> Self {
        Self {
            target_size,
            enabled: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub rotation: f64,
    pub translate_x: f64,
    pub translate_y: f64,
    pub scale: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        rotation: 0.0,
        translate_x: 0.0,
        translate_y: 0.0,
        scale: 1.0,
    };
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + rng.random::<f64>() * (hi - lo)
}

/// Draw one parameter set. Always consumes exactly four rng draws so the
/// stream position is independent of the configured ranges.
pub fn sample_affine<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> AffineParams {
    AffineParams {
        rotation: uniform(rng, -cfg.max_rotation, cfg.max_rotation),
        translate_x: uniform(rng, -cfg.max_translate, cfg.max_translate),
        translate_y: uniform(rng, -cfg.max_translate, cfg.max_translate),
        scale: uniform(rng, cfg.scale_range.0, cfg.scale_range.1),
    }
}

pub const FILL_VALUE: f64 = -1.0;

/// Bilinear sample of the normalized source image at fractional pixel
/// coordinates; `None` outside the source footprint.
fn sample_bilinear(image: &[u8], height: usize, width: usize, x: f64, y: f64) -> Option<f64> {
    if x < 0.0 || y < 0.0 || x > (width - 1) as f64 || y > (height - 1) as f64 {
        return None;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let p = |yy: usize, xx: usize| normalize_pixel(image[yy * width + xx]);
    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
    let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
    Some(top * (1.0 - fy) + bot * fy)
}

/// Apply the transform (scale, then rotate about center, then translate by
/// fraction of the output side) and resample into an out_size x out_size
/// grid. Output values are normalized into [-1, 1].
pub fn apply_affine(
    image: &[u8],
    height: usize,
    width: usize,
    params: &AffineParams,
    out_size: usize,
) -> Vec<f64> {
    assert!(!image.is_empty() && image.len() == height * width);
    let theta = params.rotation.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let c_out = (out_size as f64 - 1.0) / 2.0;
    let cx_src = (width as f64 - 1.0) / 2.0;
    let cy_src = (height as f64 - 1.0) / 2.0;
    // resize factor from the output grid back to the source grid
    let rx = if out_size > 1 {
        (width as f64 - 1.0) / (out_size as f64 - 1.0)
    } else {
        0.0
    };
    let ry = if out_size > 1 {
        (height as f64 - 1.0) / (out_size as f64 - 1.0)
    } else {
        0.0
    };
    let tx = params.translate_x * out_size as f64;
    let ty = params.translate_y * out_size as f64;

    let mut out = vec![FILL_VALUE; out_size * out_size];
    for oy in 0..out_size {
        for ox in 0..out_size {
            // invert: translate, rotate, scale, then resize into source coords
            let dx = ox as f64 - c_out - tx;
            let dy = oy as f64 - c_out - ty;
            let ux = (dx * cos_t + dy * sin_t) / params.scale;
            let uy = (-dx * sin_t + dy * cos_t) / params.scale;
            let sx = cx_src + ux * rx;
            let sy = cy_src + uy * ry;
            if let Some(v) = sample_bilinear(image, height, width, sx, sy) {
                out[oy * out_size + ox] = v;
            }
        }
    }
    out
}
