//! Geometry and annotation types shared by the bank, augmentation and simulation code.

use std::fmt;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which dataset an image or crop came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Source => f.write_str("source"),
            Domain::Target => f.write_str("target"),
        }
    }
}

/// Axis-aligned pixel box, `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        u64::from(self.w) * u64::from(self.h)
    }

    /// True when the box has positive size and lies inside a `width`×`height` image.
    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.w >= 1
            && self.h >= 1
            && u64::from(self.x) + u64::from(self.w) <= u64::from(width)
            && u64::from(self.y) + u64::from(self.h) <= u64::from(height)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        if x1 <= x0 || y1 <= y0 {
            return 0.0;
        }
        let inter = u64::from(x1 - x0) * u64::from(y1 - y0);
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }
}

/// A box plus a soft class label over the foreground classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedInstance {
    pub bbox: BBox,
    pub label: Vec<f64>,
    /// Detector confidence; 1.0 for ground truth.
    pub score: f64,
}

impl AnnotatedInstance {
    /// Ground-truth instance with a one-hot label.
    pub fn ground_truth(bbox: BBox, class: usize, num_classes: usize) -> Result<Self> {
        Ok(Self {
            bbox,
            label: one_hot(class, num_classes)?,
            score: 1.0,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.label.len()
    }

    /// Index of the largest label entry; ties go to the lowest index.
    pub fn dominant_class(&self) -> usize {
        argmax(&self.label)
    }

    /// The class index if the label is exactly one-hot, `None` for mixed labels.
    pub fn hard_class(&self) -> Option<usize> {
        let mut hot = None;
        for (c, &p) in self.label.iter().enumerate() {
            if p == 1.0 && hot.is_none() {
                hot = Some(c);
            } else if p != 0.0 {
                return None;
            }
        }
        hot
    }
}

/// An image with its annotations and domain tag.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub pixels: RgbImage,
    pub instances: Vec<AnnotatedInstance>,
    pub domain: Domain,
}

impl LabeledImage {
    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }
}

pub fn one_hot(class: usize, num_classes: usize) -> Result<Vec<f64>> {
    if class >= num_classes {
        return Err(Error::ClassIndex {
            index: class,
            num_classes,
        });
    }
    let mut v = vec![0.0; num_classes];
    v[class] = 1.0;
    Ok(v)
}

/// Argmax with ties broken toward the lowest index. Empty input yields 0.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
