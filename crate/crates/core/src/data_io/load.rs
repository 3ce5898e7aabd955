use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::{has_image_ext, read_image, read_mask, ImageSample};
use crate::error::{Error, Result};
use crate::exec::Exec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub has_mask: bool,
    pub label: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

/// Audit record of one dataset load.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub root: PathBuf,
    pub split: Option<Split>,
    pub entries: Vec<ManifestEntry>,
    pub skipped: Vec<SkippedFile>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Loaded {
    pub samples: Vec<ImageSample>,
    pub manifest: Manifest,
}

struct Candidate {
    id: String,
    path: PathBuf,
    mask: Option<PathBuf>,
    label: bool,
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && has_image_ext(p))
        .collect();
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn find_mask(mask_dir: &Path, stem: &str) -> Option<PathBuf> {
    super::IMAGE_EXTENSIONS
        .iter()
        .map(|ext| mask_dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

/// Load one split from the folder layout
///
/// ```text
/// root/train/good/*.png|jpg
/// root/test/good/*.png|jpg
/// root/test/bad/*.png|jpg
/// root/test/bad_masks/<same-stem>.png
/// ```
///
/// Samples come back sorted by id (`good/<stem>`, `bad/<stem>`).
/// Undecodable images are skipped and recorded in the manifest.
pub fn load_dataset(root: &Path, split: Split) -> Result<Loaded> {
    if !root.is_dir() {
        return Err(Error::MissingRoot(root.to_path_buf()));
    }
    let mut candidates = Vec::new();
    match split {
        Split::Train => {
            for p in list_images(&root.join("train").join("good"))? {
                candidates.push(Candidate {
                    id: format!("good/{}", stem(&p)),
                    path: p,
                    mask: None,
                    label: false,
                });
            }
        }
        Split::Test => {
            let test = root.join("test");
            for p in list_images(&test.join("good"))? {
                candidates.push(Candidate {
                    id: format!("good/{}", stem(&p)),
                    path: p,
                    mask: None,
                    label: false,
                });
            }
            let mask_dir = test.join("bad_masks");
            for p in list_images(&test.join("bad"))? {
                let s = stem(&p);
                candidates.push(Candidate {
                    id: format!("bad/{s}"),
                    mask: find_mask(&mask_dir, &s),
                    path: p,
                    label: true,
                });
            }
        }
    }
    candidates.sort_by(|a, b| a.id.cmp(&b.id));
    if candidates.is_empty() {
        warn!("no images found for {split:?} split under {}", root.display());
    }

    let decoded = Exec::default().map(&candidates, |c| -> Result<Option<ImageSample>> {
        let pixels = match read_image(&c.path) {
            Ok(px) => px,
            Err(e) => {
                warn!("skipping unreadable image: {e}");
                return Ok(None);
            }
        };
        let (h, w, _) = pixels.dim();
        let mask = match &c.mask {
            Some(mp) => {
                let m = read_mask(mp)?;
                if m.dim() != (h, w) {
                    return Err(Error::MaskShape {
                        image: c.path.clone(),
                        mask: mp.clone(),
                        image_shape: (h, w),
                        mask_shape: m.dim(),
                    });
                }
                Some(m)
            }
            None => None,
        };
        ImageSample::new(c.id.clone(), pixels, mask, Some(c.label)).map(Some)
    });

    let mut manifest = Manifest {
        root: root.to_path_buf(),
        split: Some(split),
        ..Default::default()
    };
    let mut samples = Vec::with_capacity(candidates.len());
    for (c, r) in candidates.iter().zip(decoded) {
        match r? {
            Some(s) => {
                let (h, w, ch) = s.pixels.dim();
                manifest.entries.push(ManifestEntry {
                    id: s.id.clone(),
                    path: c.path.clone(),
                    height: h,
                    width: w,
                    channels: ch,
                    has_mask: s.mask.is_some(),
                    label: s.label,
                });
                samples.push(s);
            }
            None => manifest.skipped.push(SkippedFile {
                path: c.path.clone(),
                reason: "unreadable image".into(),
            }),
        }
    }
    Ok(Loaded { samples, manifest })
}
