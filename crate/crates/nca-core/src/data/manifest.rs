//! Dataset manifests: (edge image, ground truth) pairs with splits.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{canny, grayscale, load_png, save_edge_png, RgbaImage};
use crate::error::{Error, Result};
use crate::rng;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Ood,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Ground-truth RGBA image; OOD entries may have none.
    pub gt: Option<String>,
    pub edge: String,
    pub split: Split,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    /// `[height, width]` shared by every image.
    pub size: [usize; 2],
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| {
            Error::config(format!("{}: invalid manifest: {e}", path.display()))
        })?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::config(format!(
                "{}: unsupported manifest version {}",
                path.display(),
                manifest.version
            )));
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn split_entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

#[derive(Clone, Debug)]
pub struct ManifestOptions {
    /// Working resolution; sources are box-downscaled to this side.
    pub resolution: usize,
    pub val_fraction: f32,
    pub sigma: f32,
    pub low: f32,
    pub high: f32,
    /// Recompute cached edge images even if present.
    pub force: bool,
    pub seed: u64,
    /// Where edge images go; next to the ground truth when `None`.
    pub edge_dir: Option<PathBuf>,
}

impl Default for ManifestOptions {
    fn default() -> Self {
        ManifestOptions {
            resolution: 32,
            val_fraction: 0.0,
            sigma: 1.4,
            low: 0.1,
            high: 0.2,
            force: false,
            seed: 0,
            edge_dir: None,
        }
    }
}

/// Scans `gt_dir` for PNG images, extracts and caches their edges, and
/// assigns a deterministic train/val split.
///
/// Source images must all share one size; edge caches get the suffix
/// `.edge.png`. The result is a pure function of the directory contents
/// and the seed.
pub fn build_manifest(gt_dir: &Path, opts: &ManifestOptions) -> Result<DatasetManifest> {
    let mut files: Vec<PathBuf> = fs::read_dir(gt_dir)
        .map_err(|e| Error::io(gt_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().map_or(false, |e| e == "png")
                && !p.to_string_lossy().ends_with(".edge.png")
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::config(format!(
            "no images found in {}",
            gt_dir.display()
        )));
    }
    if files.len() < 2 {
        return Err(Error::config(format!(
            "need at least 2 images in {}, found {}",
            gt_dir.display(),
            files.len()
        )));
    }

    // Load everything and reject mixed sizes, naming the offenders.
    let mut images: Vec<(PathBuf, RgbaImage)> = Vec::with_capacity(files.len());
    for f in &files {
        images.push((f.clone(), load_png(f)?));
    }
    let (w0, h0) = (images[0].1.width, images[0].1.height);
    let offenders: Vec<String> = images
        .iter()
        .filter(|(_, img)| img.width != w0 || img.height != h0)
        .map(|(p, img)| format!("{} ({}x{})", p.display(), img.width, img.height))
        .collect();
    if !offenders.is_empty() {
        return Err(Error::config(format!(
            "images must share one size ({w0}x{h0}): {}",
            offenders.join(", ")
        )));
    }

    if let Some(dir) = &opts.edge_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut entries = Vec::with_capacity(images.len());
    for (path, img) in &images {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let edge_path = match &opts.edge_dir {
            Some(dir) => dir.join(format!("{id}.edge.png")),
            None => path.with_extension("edge.png"),
        };
        if opts.force || !edge_path.exists() {
            let small = img.resize_box(opts.resolution);
            let gray = grayscale(&small);
            let edge = canny(
                &gray,
                opts.resolution,
                opts.resolution,
                opts.sigma,
                opts.low,
                opts.high,
            )?;
            save_edge_png(&edge, &edge_path)?;
        }
        entries.push(ManifestEntry {
            id,
            gt: Some(path.to_string_lossy().into_owned()),
            edge: edge_path.to_string_lossy().into_owned(),
            split: Split::Train,
        });
    }

    // Deterministic split: shuffle ids with the data stream and move the
    // first chunk to validation.
    let val_count = (entries.len() as f32 * opts.val_fraction).round() as usize;
    if val_count > 0 {
        let mut order: Vec<usize> = (0..entries.len()).collect();
        order.shuffle(&mut rng::stream(opts.seed, "split"));
        for &idx in order.iter().take(val_count) {
            entries[idx].split = Split::Val;
        }
    }

    Ok(DatasetManifest {
        version: MANIFEST_VERSION,
        size: [opts.resolution, opts.resolution],
        entries,
    })
}

/// Loads a manifest entry's ground truth, downscaled to the manifest
/// resolution.
pub fn load_gt(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<Option<RgbaImage>> {
    match &entry.gt {
        None => Ok(None),
        Some(p) => {
            let img = load_png(Path::new(p))?;
            Ok(Some(img.resize_box(manifest.size[0])))
        }
    }
}

/// Groups entry indices by split, in manifest order.
pub fn split_index(manifest: &DatasetManifest) -> BTreeMap<&'static str, Vec<usize>> {
    let mut out: BTreeMap<&'static str, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        let key = match e.split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Ood => "ood",
        };
        out.entry(key).or_default().push(i);
    }
    out
}
