//! `images.json` manifests of annotated PNG images.

use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{argmax, one_hot, AnnotatedInstance, BBox, Domain, LabeledImage};

pub const MANIFEST_NAME: &str = "images.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub id: String,
    pub file: String,
    pub domain: Domain,
    #[serde(default)]
    pub instances: Vec<ManifestInstance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestInstance {
    /// `[x, y, w, h]` in pixels.
    pub bbox: [i64; 4],
    pub class: usize,
    /// Soft label written for augmented instances.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// An image read from disk along with its manifest entry.
#[derive(Debug, Clone)]
pub struct DatasetImage {
    pub entry: ManifestImage,
    pub image: LabeledImage,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestImage>> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

pub fn write_manifest(dir: &Path, entries: &[ManifestImage]) -> Result<()> {
    let path = dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(entries).expect("manifest serialises");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Loads every image listed in `<dir>/images.json`.
///
/// Out-of-range class ids are always fatal. Boxes outside the image are fatal
/// when `strict`, otherwise the instance is dropped with a warning.
pub fn load_dataset(dir: &Path, num_classes: usize, strict: bool) -> Result<Vec<DatasetImage>> {
    let mut out = Vec::new();
    for entry in read_manifest(dir)? {
        let path = dir.join(&entry.file);
        let pixels = image::open(&path)
            .map_err(|e| Error::image(&path, e))?
            .to_rgb8();
        let (w, h) = pixels.dimensions();
        let mut instances = Vec::with_capacity(entry.instances.len());
        for (idx, inst) in entry.instances.iter().enumerate() {
            if inst.class >= num_classes {
                return Err(Error::Dataset(format!(
                    "image {}: instance {idx} has class {} but only {num_classes} classes exist",
                    entry.id, inst.class
                )));
            }
            let [x, y, bw, bh] = inst.bbox;
            let bbox = match (u32::try_from(x), u32::try_from(y), u32::try_from(bw), u32::try_from(bh)) {
                (Ok(x), Ok(y), Ok(bw), Ok(bh)) => Some(BBox::new(x, y, bw, bh)),
                _ => None,
            }
            .filter(|b| b.fits_within(w, h));
            let Some(bbox) = bbox else {
                let msg = format!(
                    "image {}: instance {idx} box {:?} outside {w}x{h}",
                    entry.id, inst.bbox
                );
                if strict {
                    return Err(Error::Dataset(msg));
                }
                warn!("{msg}; skipped");
                continue;
            };
            let label = match &inst.label {
                Some(l) => {
                    let sum: f64 = l.iter().sum();
                    if l.len() != num_classes || (sum - 1.0).abs() > 1e-9 || l.iter().any(|&p| p < 0.0) {
                        return Err(Error::Dataset(format!(
                            "image {}: instance {idx} label is not a distribution over {num_classes} classes",
                            entry.id
                        )));
                    }
                    l.clone()
                }
                None => one_hot(inst.class, num_classes)?,
            };
            instances.push(AnnotatedInstance {
                bbox,
                label,
                score: inst.score.unwrap_or(1.0),
            });
        }
        out.push(DatasetImage {
            image: LabeledImage {
                id: entry.id.clone(),
                pixels,
                instances,
                domain: entry.domain,
            },
            entry,
        });
    }
    Ok(out)
}

/// Manifest entry describing `image` stored as `file`.
pub fn manifest_entry(image: &LabeledImage, file: &str) -> ManifestImage {
    ManifestImage {
        id: image.id.clone(),
        file: file.to_string(),
        domain: image.domain,
        instances: image
            .instances
            .iter()
            .map(|inst| ManifestInstance {
                bbox: [
                    i64::from(inst.bbox.x),
                    i64::from(inst.bbox.y),
                    i64::from(inst.bbox.w),
                    i64::from(inst.bbox.h),
                ],
                class: argmax(&inst.label),
                label: inst.hard_class().is_none().then(|| inst.label.clone()),
                score: (inst.score != 1.0).then_some(inst.score),
            })
            .collect(),
    }
}
