//! Multi-domain labeled frame datasets.
//!
//! A dataset is a set of *groups* (the frames of one video). Every frame is
//! a 128x128 RGB image stored as 8-bit pixels and normalized on demand to
//! `[-1, 1]` with per-channel center 0.5 and scale 0.5.

pub mod cutmix;
mod face;
pub mod fingerprint;
pub mod ingest;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{ImageTensor, INPUT_CHANNELS};
use crate::error::{Error, Result};
use crate::label::Label;

pub use cutmix::{cutmix, cutmix_seeded, CutMixConfig, MixedSample};
pub use fingerprint::{Artifact, DomainSpec};
pub use ingest::{ingest_frames, write_dataset};

/// Frames per group: 16 clips of 5 consecutive frames.
pub const FRAMES_PER_GROUP: usize = 80;
pub const CLIPS_PER_GROUP: usize = 16;
pub const ADAPT_GROUPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    TeacherTrain,
    Adapt,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::TeacherTrain, Split::Adapt, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::TeacherTrain => "teacher-train",
            Split::Adapt => "adapt",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "teacher-train" | "train" => Ok(Split::TeacherTrain),
            "adapt" | "transfer" => Ok(Split::Adapt),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Arc<RgbImage>,
    pub label: Label,
    pub domain: Arc<str>,
    pub group_id: u32,
    pub frame_index: u32,
}

impl Sample {
    /// Normalized HWC tensor: `(v / 255 - 0.5) / 0.5`.
    pub fn tensor(&self) -> ImageTensor {
        normalize(&self.image)
    }
}

pub fn normalize(image: &RgbImage) -> ImageTensor {
    let (w, h) = image.dimensions();
    let data = image.as_raw().iter().map(|&v| v as f32 / 127.5 - 1.0).collect();
    ImageTensor::new(h as usize, w as usize, INPUT_CHANNELS, data)
}

#[derive(Debug, Clone)]
pub struct Group {
    pub group_id: u32,
    pub label: Label,
    pub split: Split,
    pub frames: Vec<Sample>,
}

#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub domain: String,
    pub groups: Vec<Group>,
}

impl DomainDataset {
    pub fn groups_in(&self, split: Split) -> impl Iterator<Item = &Group> {
        self.groups.iter().filter(move |g| g.split == split)
    }

    pub fn samples(&self, split: Split) -> Vec<&Sample> {
        self.groups_in(split).flat_map(|g| g.frames.iter()).collect()
    }

    pub fn has_split(&self, split: Split) -> bool {
        self.groups_in(split).next().is_some()
    }

    pub fn require_split(&self, split: Split) -> Result<Vec<&Sample>> {
        let samples = self.samples(split);
        if samples.is_empty() {
            return Err(Error::MissingSplit(format!("{} in domain {}", split, self.domain)));
        }
        Ok(samples)
    }

    pub fn num_groups(&self, split: Split) -> usize {
        self.groups_in(split).count()
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.frames.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (real, fake) group counts of a split.
    pub fn label_balance(&self, split: Split) -> (usize, usize) {
        self.groups_in(split).fold((0, 0), |(r, f), g| match g.label {
            Label::Real => (r + 1, f),
            Label::Fake => (r, f + 1),
        })
    }

    /// Checks group-level invariants: unique ids, and frames consistent
    /// with their group's label and domain.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for g in &self.groups {
            if let Some(prev) = seen.insert(g.group_id, g.split) {
                return Err(Error::Config(format!(
                    "group {} of domain {} appears in both {} and {}",
                    g.group_id, self.domain, prev, g.split
                )));
            }
            for s in &g.frames {
                if s.label != g.label || &*s.domain != self.domain || s.group_id != g.group_id {
                    return Err(Error::Config(format!(
                        "frame {} of group {} disagrees with its group's label or domain",
                        s.frame_index, g.group_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Sets of group ids per split.
    pub fn split_ids(&self) -> BTreeMap<Split, BTreeSet<u32>> {
        let mut out: BTreeMap<Split, BTreeSet<u32>> = BTreeMap::new();
        for g in &self.groups {
            out.entry(g.split).or_default().insert(g.group_id);
        }
        out
    }

    /// SHA-256 over every group's metadata and pixel data.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.domain.as_bytes());
        for g in &self.groups {
            h.update(g.group_id.to_le_bytes());
            h.update([g.label.index() as u8, g.split as u8]);
            for s in &g.frames {
                h.update(s.frame_index.to_le_bytes());
                h.update(s.image.as_raw());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Group counts per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitLayout {
    pub teacher_train: usize,
    pub adapt: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitLayout {
    /// Teacher-train : validation : test = 75 : 12 : 13 over the groups left
    /// after reserving `adapt` groups; 110 groups give 75/10/12/13.
    pub fn for_groups(n_groups: usize, adapt: usize) -> Result<Self> {
        if n_groups < 40 {
            return Err(Error::Config(format!("need at least 40 groups for all splits, got {n_groups}")));
        }
        if adapt == 0 || adapt + 6 > n_groups {
            return Err(Error::Config(format!("cannot reserve {adapt} adaptation groups out of {n_groups}")));
        }
        let rest = n_groups - adapt;
        let validation = ((rest as f64) * 0.12).round() as usize;
        let test = ((rest as f64) * 0.13).round() as usize;
        Ok(Self { teacher_train: rest - validation - test, adapt, validation, test })
    }

    pub fn total(&self) -> usize {
        self.teacher_train + self.adapt + self.validation + self.test
    }

    fn splits(&self) -> Vec<Split> {
        let mut v = Vec::with_capacity(self.total());
        v.extend(std::iter::repeat_n(Split::TeacherTrain, self.teacher_train));
        v.extend(std::iter::repeat_n(Split::Adapt, self.adapt));
        v.extend(std::iter::repeat_n(Split::Validation, self.validation));
        v.extend(std::iter::repeat_n(Split::Test, self.test));
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_groups: usize,
    pub frames_per_group: usize,
    pub adapt_groups: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { n_groups: 110, frames_per_group: FRAMES_PER_GROUP, adapt_groups: ADAPT_GROUPS }
    }
}

pub(crate) fn derive_seed(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Generates a domain with the default frames per group.
pub fn generate_domain(spec: &DomainSpec, n_groups: usize, seed: u64) -> Result<DomainDataset> {
    generate_domain_with(spec, &GeneratorConfig { n_groups, ..GeneratorConfig::default() }, seed)
}

/// Real groups come from a procedural face process shared by all domains;
/// fake groups are real renders overlaid with the domain's artifact. Each
/// group is generated from a seed derived from (seed, domain, group id).
pub fn generate_domain_with(spec: &DomainSpec, cfg: &GeneratorConfig, seed: u64) -> Result<DomainDataset> {
    spec.validate()?;
    if cfg.frames_per_group == 0 {
        return Err(Error::Config("frames_per_group must be positive".into()));
    }
    let layout = SplitLayout::for_groups(cfg.n_groups, cfg.adapt_groups)?;
    let splits = layout.splits();
    let domain: Arc<str> = Arc::from(spec.name.as_str());
    let artifact = spec.artifact.prepare(&spec.name);

    // alternate labels within each split so every split is balanced
    let mut position_in_split: BTreeMap<Split, usize> = BTreeMap::new();
    let plan: Vec<(u32, Split, Label)> = splits
        .iter()
        .enumerate()
        .map(|(id, &split)| {
            let pos = position_in_split.entry(split).or_default();
            let label = if *pos % 2 == 0 { Label::Real } else { Label::Fake };
            *pos += 1;
            (id as u32, split, label)
        })
        .collect();

    let groups = plan
        .par_iter()
        .map(|&(group_id, split, label)| {
            let group_seed = derive_seed(&[&seed.to_le_bytes(), spec.name.as_bytes(), &group_id.to_le_bytes()]);
            let frames = face::render_group(group_seed, cfg.frames_per_group, label, &artifact, spec.quality)?
                .into_iter()
                .enumerate()
                .map(|(i, img)| Sample {
                    image: Arc::new(img),
                    label,
                    domain: domain.clone(),
                    group_id,
                    frame_index: i as u32,
                })
                .collect();
            Ok(Group { group_id, label, split, frames })
        })
        .collect::<Result<Vec<_>>>()?;

    let ds = DomainDataset { domain: spec.name.clone(), groups };
    ds.validate()?;
    Ok(ds)
}
