//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.csv                                 domain,group,label,split
//! <root>/<domain>/<split>/<group_id>/<frame_index>.png
//! ```
//!
//! Frames are expected to be face crops. Non-square frames are center-cropped
//! to a square (never stretched) and resized to 128x128.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::imageops::{self, FilterType};
use image::RgbImage;

use super::{DomainDataset, Group, Sample, Split, FRAMES_PER_GROUP};
use crate::backbone::INPUT_SIZE;
use crate::error::{Error, Result};
use crate::label::Label;

pub const MANIFEST_NAME: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "domain,group,label,split";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ManifestEntry {
    pub domain: String,
    pub group_id: u32,
    pub label: Label,
    pub split: Split,
}

impl ManifestEntry {
    fn line(&self) -> String {
        format!("{},{},{},{}", self.domain, self.group_id, self.label, self.split)
    }

    pub fn group_dir(&self, root: &Path) -> PathBuf {
        root.join(&self.domain).join(self.split.as_str()).join(self.group_id.to_string())
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Ingestion { paths: vec![path.to_path_buf()], reason: e.to_string() })?;
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line == MANIFEST_HEADER {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |reason: String| Error::Ingestion { paths: vec![path.to_path_buf()], reason: format!("line {}: {reason}", n + 1) };
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", fields.len())));
        }
        entries.push(ManifestEntry {
            domain: fields[0].to_string(),
            group_id: fields[1].parse().map_err(|_| bad(format!("bad group id '{}'", fields[1])))?,
            label: fields[2].parse().map_err(|e: Error| bad(e.to_string()))?,
            split: fields[3].parse().map_err(|e: Error| bad(e.to_string()))?,
        });
    }
    Ok(entries)
}

fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    for e in entries {
        text.push_str(&e.line());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Writes every frame as PNG and merges the domain's groups into
/// `<root>/manifest.csv`, replacing any previous entries for that domain.
pub fn write_dataset(ds: &DomainDataset, root: &Path) -> Result<PathBuf> {
    fs::create_dir_all(root)?;
    let manifest = root.join(MANIFEST_NAME);
    let mut entries: Vec<ManifestEntry> = if manifest.exists() {
        read_manifest(&manifest)?.into_iter().filter(|e| e.domain != ds.domain).collect()
    } else {
        Vec::new()
    };
    for g in &ds.groups {
        let entry = ManifestEntry { domain: ds.domain.clone(), group_id: g.group_id, label: g.label, split: g.split };
        let dir = entry.group_dir(root);
        fs::create_dir_all(&dir)?;
        for s in &g.frames {
            s.image.save_with_format(dir.join(format!("{}.png", s.frame_index)), image::ImageFormat::Png)?;
        }
        entries.push(entry);
    }
    entries.sort();
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Center-crops to a square and resizes to the network input size.
pub fn preprocess_frame(img: RgbImage) -> RgbImage {
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let cropped = if w != h { imageops::crop_imm(&img, (w - side) / 2, (h - side) / 2, side, side).to_image() } else { img };
    let target = INPUT_SIZE as u32;
    if side == target {
        cropped
    } else {
        imageops::resize(&cropped, target, target, FilterType::Triangle)
    }
}

fn frame_files(dir: &Path) -> std::io::Result<Vec<(u32, PathBuf)>> {
    let mut frames = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"));
        if !is_image {
            continue;
        }
        if let Some(idx) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<u32>().ok()) {
            frames.push((idx, path));
        }
    }
    frames.sort();
    Ok(frames)
}

#[derive(Debug, Clone)]
pub struct IngestReport {
    pub datasets: Vec<DomainDataset>,
    /// (domain, group id, frame count) of groups whose frame count differs
    /// from the expected count.
    pub irregular_groups: Vec<(String, u32, usize)>,
}

/// Loads every group listed in the manifest. All missing or unreadable
/// paths are collected and reported together.
pub fn ingest_frames(root: &Path, manifest: &Path) -> Result<IngestReport> {
    ingest_frames_expecting(root, manifest, FRAMES_PER_GROUP)
}

pub fn ingest_frames_expecting(root: &Path, manifest: &Path, expected_frames: usize) -> Result<IngestReport> {
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::Ingestion { paths: vec![manifest.to_path_buf()], reason: "manifest lists no groups".into() });
    }
    let mut bad_paths = Vec::new();
    let mut by_domain: BTreeMap<String, Vec<Group>> = BTreeMap::new();
    let mut irregular = Vec::new();
    let mut domains: BTreeMap<String, Arc<str>> = BTreeMap::new();
    for entry in &entries {
        let dir = entry.group_dir(root);
        let files = match frame_files(&dir) {
            Ok(f) if !f.is_empty() => f,
            _ => {
                bad_paths.push(dir);
                continue;
            }
        };
        let domain = domains.entry(entry.domain.clone()).or_insert_with(|| Arc::from(entry.domain.as_str())).clone();
        let mut frames = Vec::with_capacity(files.len());
        for (idx, path) in files {
            match image::open(&path) {
                Ok(img) => frames.push(Sample {
                    image: Arc::new(preprocess_frame(img.to_rgb8())),
                    label: entry.label,
                    domain: domain.clone(),
                    group_id: entry.group_id,
                    frame_index: idx,
                }),
                Err(_) => bad_paths.push(path),
            }
        }
        if frames.len() != expected_frames {
            log::warn!(
                "group {} of domain {} has {} usable frames (expected {expected_frames})",
                entry.group_id,
                entry.domain,
                frames.len()
            );
            irregular.push((entry.domain.clone(), entry.group_id, frames.len()));
        }
        by_domain.entry(entry.domain.clone()).or_default().push(Group {
            group_id: entry.group_id,
            label: entry.label,
            split: entry.split,
            frames,
        });
    }
    if !bad_paths.is_empty() {
        return Err(Error::Ingestion { paths: bad_paths, reason: "missing or unreadable".into() });
    }
    let datasets = by_domain
        .into_iter()
        .map(|(domain, groups)| {
            let ds = DomainDataset { domain, groups };
            ds.validate()?;
            Ok(ds)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IngestReport { datasets, irregular_groups: irregular })
}
