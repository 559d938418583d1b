//! Domain-specific manipulation artifacts.
//!
//! Each domain stamps a distinct artifact onto the manipulated face region of
//! its fake frames. Amplitudes are in 8-bit pixel units per unit strength.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use crate::error::{Error, Result};

const UNIT_AMPLITUDE: f32 = 96.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Artifact {
    /// Smoothed, color-shifted face region with a seam at its boundary.
    Blend { strength: f32 },
    /// Periodic up-sampling pattern with the given period in pixels.
    Grid { strength: f32, period: f32 },
    /// A fixed pseudo-random texture tile repeated over the face.
    Speckle { strength: f32, tile: usize },
    /// Horizontal chroma stripes (red and blue in antiphase).
    Stripe { strength: f32, period: f32 },
}

impl Artifact {
    pub fn strength(&self) -> f32 {
        match *self {
            Artifact::Blend { strength }
            | Artifact::Grid { strength, .. }
            | Artifact::Speckle { strength, .. }
            | Artifact::Stripe { strength, .. } => strength,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.strength();
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Config(format!("artifact strength must be positive, got {s}")));
        }
        match *self {
            Artifact::Grid { period, .. } | Artifact::Stripe { period, .. } if !(period >= 2.0) => {
                Err(Error::Config(format!("artifact period must be >= 2 pixels, got {period}")))
            }
            Artifact::Speckle { tile, .. } if !(2..=32).contains(&tile) => {
                Err(Error::Config(format!("speckle tile must be within 2..=32, got {tile}")))
            }
            _ => Ok(()),
        }
    }

    pub(crate) fn prepare(&self, domain: &str) -> PreparedArtifact {
        let tile = match *self {
            Artifact::Speckle { tile, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[b"speckle", domain.as_bytes()]));
                (0..tile * tile * 3).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
            }
            _ => Vec::new(),
        };
        PreparedArtifact { artifact: self.clone(), tile }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub artifact: Artifact,
    /// JPEG quality for low-quality emulation; `None` keeps frames lossless.
    #[serde(default)]
    pub quality: Option<u8>,
}

impl DomainSpec {
    pub fn new(name: impl Into<String>, artifact: Artifact) -> Self {
        Self { name: name.into(), artifact, quality: None }
    }

    pub fn with_quality(mut self, quality: u8) -> Self {
        self.quality = Some(quality);
        self
    }

    /// Built-in domains, named after their artifact.
    pub fn preset(name: &str) -> Result<Self> {
        let artifact = match name {
            "blend" => Artifact::Blend { strength: 1.0 },
            "grid" => Artifact::Grid { strength: 1.0, period: 4.0 },
            "speckle" => Artifact::Speckle { strength: 1.0, tile: 5 },
            "stripe" => Artifact::Stripe { strength: 1.0, period: 6.0 },
            other => return Err(Error::Config(format!("unknown domain preset '{other}'"))),
        };
        Ok(Self::new(name, artifact))
    }

    pub fn presets() -> [&'static str; 4] {
        ["blend", "grid", "speckle", "stripe"]
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\', ',']) {
            return Err(Error::Config(format!("invalid domain name '{}'", self.name)));
        }
        if let Some(q) = self.quality {
            if !(1..=100).contains(&q) {
                return Err(Error::Config(format!("JPEG quality must be in 1..=100, got {q}")));
            }
        }
        self.artifact.validate()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct PreparedArtifact {
    artifact: Artifact,
    tile: Vec<f32>,
}

impl PreparedArtifact {
    /// Applies the artifact to an HWC `[0, 255]` float image within `mask`.
    /// `gain` scales the strength per group.
    pub fn apply(&self, img: &mut [f32], mask: &[f32], size: usize, gain: f32) {
        let amp = UNIT_AMPLITUDE * self.artifact.strength() * gain;
        match self.artifact {
            Artifact::Blend { .. } => {
                let blurred = box_blur3(img, size);
                let shift = [0.9 * amp, -0.35 * amp, -0.7 * amp];
                for (p, &m) in mask.iter().enumerate() {
                    if m <= 0.0 {
                        continue;
                    }
                    for c in 0..3 {
                        let i = p * 3 + c;
                        img[i] = img[i] * (1.0 - m) + (blurred[i] + shift[c]) * m;
                    }
                }
            }
            Artifact::Grid { period, .. } => {
                let w = std::f32::consts::TAU / period;
                for (p, &m) in mask.iter().enumerate() {
                    if m <= 0.0 {
                        continue;
                    }
                    let (y, x) = ((p / size) as f32, (p % size) as f32);
                    let v = m * amp * (w * x).cos() * (w * y).cos();
                    img[p * 3..p * 3 + 3].iter_mut().for_each(|c| *c += v);
                }
            }
            Artifact::Speckle { tile, .. } => {
                for (p, &m) in mask.iter().enumerate() {
                    if m <= 0.0 {
                        continue;
                    }
                    let (y, x) = (p / size % tile, p % size % tile);
                    for c in 0..3 {
                        img[p * 3 + c] += m * amp * self.tile[(y * tile + x) * 3 + c];
                    }
                }
            }
            Artifact::Stripe { period, .. } => {
                let w = std::f32::consts::TAU / period;
                for (p, &m) in mask.iter().enumerate() {
                    if m <= 0.0 {
                        continue;
                    }
                    let v = m * amp * (w * (p / size) as f32).sin();
                    img[p * 3] += v;
                    img[p * 3 + 2] -= v;
                }
            }
        }
    }
}

fn box_blur3(img: &[f32], size: usize) -> Vec<f32> {
    let mut out = vec![0.0; img.len()];
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                let mut acc = 0.0;
                let mut n = 0.0;
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        let (yy, xx) = (y as i32 + dy, x as i32 + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < size && (xx as usize) < size {
                            acc += img[(yy as usize * size + xx as usize) * 3 + c];
                            n += 1.0;
                        }
                    }
                }
                out[(y * size + x) * 3 + c] = acc / n;
            }
        }
    }
    out
}
