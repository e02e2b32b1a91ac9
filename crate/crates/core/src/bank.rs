//! Per-class FIFO stores of instance crops, one bank per domain.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use log::warn;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Domain, LabeledImage};

pub const DEFAULT_CAPACITY: usize = 64;
/// Crops narrower or shorter than this are never banked.
pub const DEFAULT_MIN_SIDE: u32 = 8;

/// Pixels cut out of an image along one instance's box.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceCrop {
    pub pixels: RgbImage,
    pub class_id: usize,
    pub domain: Domain,
}

impl InstanceCrop {
    pub fn new(pixels: RgbImage, class_id: usize, domain: Domain) -> Self {
        Self {
            pixels,
            class_id,
            domain,
        }
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }
}

/// Result of offering a crop to a bank.
#[derive(Debug, PartialEq)]
pub enum Insertion {
    Stored,
    /// Stored, and the oldest crop of that class was pushed out.
    Evicted(InstanceCrop),
    /// Below the minimum crop size; not stored.
    TooSmall,
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    id: u64,
    crop: InstanceCrop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropBank {
    domain: Domain,
    num_classes: usize,
    capacity_per_class: usize,
    min_side: u32,
    rings: Vec<VecDeque<Entry>>,
    next_id: u64,
}

impl CropBank {
    pub fn new(domain: Domain, num_classes: usize, capacity_per_class: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::param("num_classes", "must be positive"));
        }
        if capacity_per_class == 0 {
            return Err(Error::param("capacity_per_class", "must be positive"));
        }
        Ok(Self {
            domain,
            num_classes,
            capacity_per_class,
            min_side: DEFAULT_MIN_SIDE,
            rings: vec![VecDeque::new(); num_classes],
            next_id: 0,
        })
    }

    pub fn with_min_side(mut self, min_side: u32) -> Self {
        self.min_side = min_side;
        self
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn capacity_per_class(&self) -> usize {
        self.capacity_per_class
    }

    pub fn len(&self, class_id: usize) -> usize {
        self.rings.get(class_id).map_or(0, VecDeque::len)
    }

    pub fn is_empty(&self) -> bool {
        self.rings.iter().all(VecDeque::is_empty)
    }

    /// Crops of one class, oldest first.
    pub fn ring(&self, class_id: usize) -> impl Iterator<Item = &InstanceCrop> {
        self.rings
            .get(class_id)
            .into_iter()
            .flat_map(|r| r.iter().map(|e| &e.crop))
    }

    pub fn insert(&mut self, crop: InstanceCrop) -> Result<Insertion> {
        if crop.domain != self.domain {
            return Err(Error::DomainMismatch {
                bank: self.domain,
                crop: crop.domain,
            });
        }
        if crop.class_id >= self.num_classes {
            return Err(Error::ClassIndex {
                index: crop.class_id,
                num_classes: self.num_classes,
            });
        }
        if crop.width() < self.min_side || crop.height() < self.min_side {
            return Ok(Insertion::TooSmall);
        }
        let id = self.next_id;
        self.next_id += 1;
        let ring = &mut self.rings[crop.class_id];
        ring.push_back(Entry { id, crop });
        if ring.len() > self.capacity_per_class {
            let oldest = ring.pop_front().expect("ring is over capacity");
            return Ok(Insertion::Evicted(oldest.crop));
        }
        Ok(Insertion::Stored)
    }

    /// Crops of `class_id` whose area is at least `min_area`.
    pub fn qualifying(&self, class_id: usize, min_area: u64) -> impl Iterator<Item = &InstanceCrop> {
        self.ring(class_id).filter(move |c| c.area() >= min_area)
    }

    /// Uniform draw among the qualifying crops of a class.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        class_id: usize,
        min_area: u64,
        rng: &mut R,
    ) -> Option<&InstanceCrop> {
        let candidates: Vec<&InstanceCrop> = self.qualifying(class_id, min_area).collect();
        candidates.choose(rng).copied()
    }

    /// Banks every hard-labelled instance of `image` scoring at least `min_score`.
    /// Returns the number of crops stored.
    pub fn ingest(&mut self, image: &LabeledImage, min_score: f64) -> Result<usize> {
        let mut stored = 0;
        for (crop, score) in extract_scored(image) {
            if score < min_score {
                continue;
            }
            if self.insert(crop)? != Insertion::TooSmall {
                stored += 1;
            }
        }
        Ok(stored)
    }

    /// Writes `<root>/<domain>/<class>/<insertion id>.png` plus a manifest
    /// recording ring order.
    pub fn save(&self, root: &Path) -> Result<()> {
        let dir = root.join(self.domain.to_string());
        let mut manifest = BankManifest {
            domain: self.domain,
            num_classes: self.num_classes,
            capacity_per_class: self.capacity_per_class,
            min_side: self.min_side,
            next_id: self.next_id,
            rings: Vec::with_capacity(self.num_classes),
        };
        for (class_id, ring) in self.rings.iter().enumerate() {
            let class_dir = dir.join(class_id.to_string());
            fs::create_dir_all(&class_dir).map_err(|e| Error::io(&class_dir, e))?;
            for entry in ring {
                let path = crop_path(&dir, class_id, entry.id);
                entry
                    .crop
                    .pixels
                    .save(&path)
                    .map_err(|e| Error::image(&path, e))?;
            }
            manifest.rings.push(ring.iter().map(|e| e.id).collect());
        }
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(root: &Path, domain: Domain) -> Result<Self> {
        let dir = root.join(domain.to_string());
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: BankManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if manifest.domain != domain || manifest.rings.len() != manifest.num_classes {
            return Err(Error::Dataset(format!(
                "{}: manifest does not describe a {domain} bank",
                path.display()
            )));
        }
        let mut bank = CropBank::new(domain, manifest.num_classes, manifest.capacity_per_class)?
            .with_min_side(manifest.min_side);
        for (class_id, ids) in manifest.rings.iter().enumerate() {
            for &id in ids {
                let path = crop_path(&dir, class_id, id);
                let pixels = image::open(&path)
                    .map_err(|e| Error::image(&path, e))?
                    .to_rgb8();
                bank.rings[class_id].push_back(Entry {
                    id,
                    crop: InstanceCrop::new(pixels, class_id, domain),
                });
            }
        }
        bank.next_id = manifest.next_id;
        Ok(bank)
    }
}

#[derive(Serialize, Deserialize)]
struct BankManifest {
    domain: Domain,
    num_classes: usize,
    capacity_per_class: usize,
    min_side: u32,
    next_id: u64,
    rings: Vec<Vec<u64>>,
}

fn crop_path(domain_dir: &Path, class_id: usize, id: u64) -> PathBuf {
    domain_dir.join(class_id.to_string()).join(format!("{id:08}.png"))
}

/// One crop per hard-labelled instance; mixed labels and out-of-bounds boxes are skipped.
pub fn extract_crops(image: &LabeledImage) -> Vec<InstanceCrop> {
    extract_scored(image).into_iter().map(|(c, _)| c).collect()
}

fn extract_scored(image: &LabeledImage) -> Vec<(InstanceCrop, f64)> {
    let mut crops = Vec::new();
    for (idx, inst) in image.instances.iter().enumerate() {
        let Some(class_id) = inst.hard_class() else {
            continue;
        };
        let b = inst.bbox;
        if !b.fits_within(image.width(), image.height()) {
            warn!(
                "skipping crop image={} instance={idx}: box {:?} outside {}x{}",
                image.id,
                b,
                image.width(),
                image.height()
            );
            continue;
        }
        let pixels = image::imageops::crop_imm(&image.pixels, b.x, b.y, b.w, b.h).to_image();
        crops.push((InstanceCrop::new(pixels, class_id, image.domain), inst.score));
    }
    crops
}
