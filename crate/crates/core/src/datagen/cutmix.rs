//! CutMix: paste a rectangle from a donor frame and mix the labels by the
//! pasted area.

use std::sync::Arc;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::label::{Label, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CutMixConfig {
    pub enabled: bool,
    pub probability: f64,
    pub alpha: f64,
}

impl Default for CutMixConfig {
    fn default() -> Self {
        Self { enabled: true, probability: 0.5, alpha: 1.0 }
    }
}

impl CutMixConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) || !(self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "cutmix needs probability in [0, 1] and alpha > 0, got {} / {}",
                self.probability, self.alpha
            )));
        }
        Ok(())
    }
}

/// Pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl Rect {
    pub fn area_fraction(&self, width: u32, height: u32) -> f64 {
        ((self.x1 - self.x0) as f64 * (self.y1 - self.y0) as f64) / (width as f64 * height as f64)
    }
}

#[derive(Debug, Clone)]
pub struct MixedSample {
    pub image: Arc<RgbImage>,
    /// Target distribution over (real, fake).
    pub target: [f64; NUM_CLASSES],
    /// Index of the donor within the batch and the realized area fraction.
    pub mix: Option<(usize, f64)>,
}

/// Copies `rect` of `donor` into a copy of `base`.
pub fn paste_patch(base: &RgbImage, donor: &RgbImage, rect: Rect) -> RgbImage {
    let mut out = base.clone();
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            out.put_pixel(x, y, *donor.get_pixel(x, y));
        }
    }
    out
}

/// `(1 - area) * onehot(base) + area * onehot(donor)`.
pub fn mixed_target(base: Label, donor: Label, area: f64) -> [f64; NUM_CLASSES] {
    let a = base.one_hot();
    let b = donor.one_hot();
    [(1.0 - area) * a[0] + area * b[0], (1.0 - area) * a[1] + area * b[1]]
}

/// Rectangle whose nominal area fraction is `lambda`, centered uniformly at
/// random and clipped to the image.
fn random_rect<R: Rng>(width: u32, height: u32, lambda: f64, rng: &mut R) -> Rect {
    let side = lambda.sqrt();
    let cut_w = (width as f64 * side).round() as i64;
    let cut_h = (height as f64 * side).round() as i64;
    let cx = rng.random_range(0..width as i64);
    let cy = rng.random_range(0..height as i64);
    let clip = |v: i64, hi: u32| v.clamp(0, hi as i64) as u32;
    Rect {
        x0: clip(cx - cut_w / 2, width),
        y0: clip(cy - cut_h / 2, height),
        x1: clip(cx + cut_w - cut_w / 2, width),
        y1: clip(cy + cut_h - cut_h / 2, height),
    }
}

/// Each sample is mixed with probability `probability` against a random
/// other sample of the batch; unselected samples pass through unchanged.
/// Batches smaller than two are returned unchanged with a warning.
pub fn cutmix<R: Rng>(batch: &[&Sample], probability: f64, alpha: f64, rng: &mut R) -> Result<Vec<MixedSample>> {
    CutMixConfig { enabled: true, probability, alpha }.validate()?;
    let passthrough = |s: &Sample| MixedSample { image: s.image.clone(), target: s.label.one_hot(), mix: None };
    if batch.len() < 2 {
        log::warn!("cutmix skipped: batch of {} cannot be mixed", batch.len());
        return Ok(batch.iter().map(|s| passthrough(s)).collect());
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("beta({alpha}, {alpha}): {e}")))?;
    let mut out = Vec::with_capacity(batch.len());
    for (i, s) in batch.iter().enumerate() {
        if probability <= 0.0 || rng.random::<f64>() >= probability {
            out.push(passthrough(s));
            continue;
        }
        let mut j = rng.random_range(0..batch.len() - 1);
        if j >= i {
            j += 1;
        }
        let donor = batch[j];
        let (w, h) = s.image.dimensions();
        if donor.image.dimensions() != (w, h) {
            return Err(Error::BatchContract(format!("cutmix pair {i}/{j} differs in size")));
        }
        let rect = random_rect(w, h, beta.sample(rng), rng);
        let area = rect.area_fraction(w, h);
        out.push(MixedSample {
            image: Arc::new(paste_patch(&s.image, &donor.image, rect)),
            target: mixed_target(s.label, donor.label, area),
            mix: Some((j, area)),
        });
    }
    Ok(out)
}

pub fn cutmix_seeded(batch: &[&Sample], probability: f64, alpha: f64, seed: u64) -> Result<Vec<MixedSample>> {
    cutmix(batch, probability, alpha, &mut ChaCha8Rng::seed_from_u64(seed))
}
