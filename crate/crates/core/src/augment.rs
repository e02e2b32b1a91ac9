//! Class-relation augmentation: each selected base instance is blended in
//! place with a crop of a related class drawn from the crop banks.
//!
//! Majority bases draw the mix class from the column of the relation matrix
//! (classes often mistaken *for* the base class, self excluded). Minority
//! bases draw from their own row, self included. Target-domain minority bases
//! are never augmented. Source images draw crops from both banks; target
//! images fall back to the source bank only when the target bank has no
//! qualifying crop of the chosen class.

use std::collections::HashSet;

use image::{Rgb, RgbImage};
use log::debug;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::Beta;

use crate::bank::{CropBank, InstanceCrop};
use crate::error::{check_unit_interval, Error, Result};
use crate::relation::ClassRelationMatrix;
use crate::types::{one_hot, Domain, LabeledImage};

pub const DEFAULT_AUG_RATIO: f64 = 0.5;
pub const DEFAULT_BETA_PARAMS: (f64, f64) = (0.5, 0.5);
/// A mix crop must cover at least this fraction of the base box area.
pub const MIN_AREA_FRACTION: f64 = 0.25;

/// One base instance paired with the crop to blend into it.
#[derive(Debug, Clone, PartialEq)]
pub struct MixPlan {
    pub base_index: usize,
    pub mix_crop: Option<InstanceCrop>,
    /// Weight of the base instance in the blend.
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Per-instance probability of being augmented.
    pub ratio: f64,
    pub beta_params: (f64, f64),
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            ratio: DEFAULT_AUG_RATIO,
            beta_params: DEFAULT_BETA_PARAMS,
        }
    }
}

/// Sampling weights over mix classes for a base class.
pub fn mix_weights(m: &ClassRelationMatrix, base_class: usize, is_majority: bool) -> Vec<f64> {
    if is_majority {
        let mut w = m.column(base_class);
        w[base_class] = 0.0;
        w
    } else {
        m.row(base_class).to_vec()
    }
}

/// Draws a mix class in proportion to [`mix_weights`]; `None` when every weight is zero.
pub fn select_mix_class<R: Rng + ?Sized>(
    m: &ClassRelationMatrix,
    base_class: usize,
    is_majority: bool,
    rng: &mut R,
) -> Option<usize> {
    if base_class >= m.num_classes() {
        return None;
    }
    let weights = mix_weights(m, base_class, is_majority);
    WeightedIndex::new(&weights).ok().map(|d| d.sample(rng))
}

/// Bilinear resize to exactly `target_w`×`target_h`, ignoring aspect ratio.
///
/// Pixel centres are aligned (`src = (dst + 0.5) * scale - 0.5`) and samples
/// are clamped at the borders, so same-size resizes are exact copies.
pub fn resize_to_base(src: &RgbImage, target_w: u32, target_h: u32) -> RgbImage {
    let (sw, sh) = src.dimensions();
    let mut out = RgbImage::new(target_w, target_h);
    if sw == 0 || sh == 0 {
        return out;
    }
    let sx = f64::from(sw) / f64::from(target_w);
    let sy = f64::from(sh) / f64::from(target_h);
    let axis = |dst: u32, scale: f64, len: u32| -> (u32, u32, f64) {
        let pos = ((f64::from(dst) + 0.5) * scale - 0.5).clamp(0.0, f64::from(len - 1));
        let lo = pos.floor() as u32;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, pos - f64::from(lo))
    };
    for y in 0..target_h {
        let (y0, y1, fy) = axis(y, sy, sh);
        for x in 0..target_w {
            let (x0, x1, fx) = axis(x, sx, sw);
            let p00 = src.get_pixel(x0, y0);
            let p10 = src.get_pixel(x1, y0);
            let p01 = src.get_pixel(x0, y1);
            let p11 = src.get_pixel(x1, y1);
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let top = f64::from(p00[ch]) * (1.0 - fx) + f64::from(p10[ch]) * fx;
                let bottom = f64::from(p01[ch]) * (1.0 - fx) + f64::from(p11[ch]) * fx;
                px[ch] = to_u8(top * (1.0 - fy) + bottom * fy);
            }
            out.put_pixel(x, y, Rgb(px));
        }
    }
    out
}

/// `beta * base + (1 - beta) * mix` per channel, rounded half away from zero.
pub fn mixup_pixels(base: &RgbImage, mix: &RgbImage, beta: f64) -> Result<RgbImage> {
    check_unit_interval("beta", beta)?;
    if base.dimensions() != mix.dimensions() {
        return Err(Error::Shape(format!(
            "mixup regions differ: {:?} vs {:?}",
            base.dimensions(),
            mix.dimensions()
        )));
    }
    let mut out = base.clone();
    for (o, (&b, &m)) in out.iter_mut().zip(base.iter().zip(mix.iter())) {
        *o = to_u8(beta * f64::from(b) + (1.0 - beta) * f64::from(m));
    }
    Ok(out)
}

/// `beta * base_label + (1 - beta) * onehot(mix_class)`.
pub fn mixup_labels(base_label: &[f64], mix_class: usize, beta: f64) -> Result<Vec<f64>> {
    check_unit_interval("beta", beta)?;
    let mix = one_hot(mix_class, base_label.len())?;
    Ok(base_label
        .iter()
        .zip(&mix)
        .map(|(&b, &m)| beta * b + (1.0 - beta) * m)
        .collect())
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn min_mix_area(base_area: u64) -> u64 {
    (MIN_AREA_FRACTION * base_area as f64).ceil() as u64
}

fn pick_crop<'a, R: Rng + ?Sized>(
    domain: Domain,
    class: usize,
    min_area: u64,
    source_bank: &'a CropBank,
    target_bank: &'a CropBank,
    rng: &mut R,
) -> Option<&'a InstanceCrop> {
    match domain {
        Domain::Source => {
            let pool: Vec<&InstanceCrop> = source_bank
                .qualifying(class, min_area)
                .chain(target_bank.qualifying(class, min_area))
                .collect();
            pool.choose(rng).copied()
        }
        Domain::Target => target_bank
            .sample(class, min_area, rng)
            .or_else(|| source_bank.sample(class, min_area, rng)),
    }
}

/// Decides which instances of `image` get blended and with what.
///
/// Each instance is gated independently with probability `params.ratio`.
/// Instances that pass the gate but cannot be paired are skipped and logged.
pub fn plan_augmentation<R: Rng + ?Sized>(
    image: &LabeledImage,
    m: &ClassRelationMatrix,
    source_bank: &CropBank,
    target_bank: &CropBank,
    params: &AugmentParams,
    rng: &mut R,
) -> Result<Vec<MixPlan>> {
    check_unit_interval("ratio", params.ratio)?;
    let (a, b) = params.beta_params;
    let beta_dist = Beta::new(a, b)
        .map_err(|e| Error::param("beta_params", format!("({a}, {b}): {e}")))?;
    if source_bank.domain() != Domain::Source || target_bank.domain() != Domain::Target {
        return Err(Error::param("banks", "expected a source bank and a target bank"));
    }
    let partition = m.partition_classes();
    let skip = |idx: usize, reason: &str| {
        debug!("CRA-SKIP image={} instance={idx} reason={reason}", image.id);
    };

    let mut plans = Vec::new();
    for (idx, inst) in image.instances.iter().enumerate() {
        if !rng.random_bool(params.ratio) {
            continue;
        }
        let base_class = inst.dominant_class();
        let is_majority = partition.is_majority(base_class);
        if image.domain == Domain::Target && !is_majority {
            skip(idx, "target-minority");
            continue;
        }
        let Some(mix_class) = select_mix_class(m, base_class, is_majority, rng) else {
            skip(idx, "no-mix-class");
            continue;
        };
        let min_area = min_mix_area(inst.bbox.area());
        let Some(crop) =
            pick_crop(image.domain, mix_class, min_area, source_bank, target_bank, rng)
        else {
            skip(idx, "no-crop");
            continue;
        };
        plans.push(MixPlan {
            base_index: idx,
            mix_crop: Some(crop.clone()),
            beta: beta_dist.sample(rng),
        });
    }
    Ok(plans)
}

/// Blends each planned crop into its base box and mixes the label.
/// Boxes and the instance count are left unchanged.
pub fn apply_augmentation(image: &LabeledImage, plans: &[MixPlan]) -> Result<LabeledImage> {
    let mut seen = HashSet::new();
    for plan in plans {
        if plan.base_index >= image.instances.len() {
            return Err(Error::param(
                "base_index",
                format!(
                    "{} but image {} has {} instances",
                    plan.base_index,
                    image.id,
                    image.instances.len()
                ),
            ));
        }
        if !seen.insert(plan.base_index) {
            return Err(Error::DuplicatePlan(plan.base_index));
        }
    }

    let mut out = image.clone();
    for plan in plans {
        let Some(crop) = &plan.mix_crop else {
            continue;
        };
        let inst = &mut out.instances[plan.base_index];
        let b = inst.bbox;
        if !b.fits_within(image.width(), image.height()) {
            return Err(Error::Shape(format!(
                "instance {} box {:?} outside image {}",
                plan.base_index, b, image.id
            )));
        }
        let region = image::imageops::crop_imm(&out.pixels, b.x, b.y, b.w, b.h).to_image();
        let resized = resize_to_base(&crop.pixels, b.w, b.h);
        let blended = mixup_pixels(&region, &resized, plan.beta)?;
        image::imageops::replace(&mut out.pixels, &blended, i64::from(b.x), i64::from(b.y));
        inst.label = mixup_labels(&inst.label, crop.class_id, plan.beta)?;
    }
    Ok(out)
}

/// Plans and applies augmentation for one image.
pub fn augment_image<R: Rng + ?Sized>(
    image: &LabeledImage,
    m: &ClassRelationMatrix,
    source_bank: &CropBank,
    target_bank: &CropBank,
    params: &AugmentParams,
    rng: &mut R,
) -> Result<(LabeledImage, Vec<MixPlan>)> {
    let plans = plan_augmentation(image, m, source_bank, target_bank, params, rng)?;
    let out = apply_augmentation(image, &plans)?;
    Ok((out, plans))
}
