//! Mean-teacher scaffolding: EMA parameter averaging, the burn-in/mutual
//! schedule and confidence thresholding of pseudo-labels.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_unit_interval, Error, Result};
use crate::types::{AnnotatedInstance, LabeledImage};

pub const DEFAULT_ALPHA: f64 = 0.9996;
pub const DEFAULT_TAU: f64 = 0.8;
pub const DEFAULT_BURN_IN_STEPS: u64 = 20_000;
pub const DEFAULT_TOTAL_STEPS: u64 = 80_000;

/// Flat model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::param("parameters", "empty parameter vector"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("parameters", "non-finite parameter"));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Little-endian `f64`s, no header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.0.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Shape(format!(
                "{}: {} bytes is not a whole number of f64s",
                path.display(),
                bytes.len()
            )));
        }
        Self::new(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        )
    }
}

/// `alpha * teacher + (1 - alpha) * student`.
pub fn ema_params(
    teacher: &ParameterVector,
    student: &ParameterVector,
    alpha: f64,
) -> Result<ParameterVector> {
    check_unit_interval("alpha", alpha)?;
    if teacher.len() != student.len() {
        return Err(Error::Shape(format!(
            "teacher has {} parameters, student {}",
            teacher.len(),
            student.len()
        )));
    }
    Ok(ParameterVector(
        teacher
            .0
            .iter()
            .zip(&student.0)
            .map(|(&t, &s)| alpha * t + (1.0 - alpha) * s)
            .collect(),
    ))
}

/// Teacher initialisation at the end of burn-in.
pub fn burn_in_copy(student: &ParameterVector) -> Result<ParameterVector> {
    if student.is_empty() {
        return Err(Error::param("parameters", "empty parameter vector"));
    }
    Ok(student.clone())
}

/// Anything carrying a confidence score that can be thresholded.
pub trait Scored {
    fn score(&self) -> f64;
}

/// A teacher detection kept as a training target.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    /// Hard (one-hot) label at the teacher's argmax class.
    pub instance: AnnotatedInstance,
    pub score: f64,
}

impl PseudoLabel {
    pub fn class(&self) -> usize {
        self.instance.dominant_class()
    }
}

impl Scored for PseudoLabel {
    fn score(&self) -> f64 {
        self.score
    }
}

/// Keeps candidates with `score >= tau`, in order.
pub fn filter_pseudo_labels<T: Scored + Clone>(candidates: &[T], tau: f64) -> Vec<T> {
    candidates
        .iter()
        .filter(|c| c.score() >= tau)
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    BurnIn,
    Mutual,
    Finished,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::BurnIn => "burn-in",
            Phase::Mutual => "mutual",
            Phase::Finished => "finished",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingSchedule {
    pub burn_in_steps: u64,
    pub total_steps: u64,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        Self {
            burn_in_steps: DEFAULT_BURN_IN_STEPS,
            total_steps: DEFAULT_TOTAL_STEPS,
        }
    }
}

impl TrainingSchedule {
    pub fn phase(&self, iteration: u64) -> Phase {
        if iteration >= self.total_steps {
            Phase::Finished
        } else if iteration < self.burn_in_steps {
            Phase::BurnIn
        } else {
            Phase::Mutual
        }
    }
}

/// Hook for the weak (teacher) and strong (student) views of an image.
pub trait ImageTransform {
    fn apply(&self, image: &LabeledImage) -> LabeledImage;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl ImageTransform for Identity {
    fn apply(&self, image: &LabeledImage) -> LabeledImage {
        image.clone()
    }
}

/// Sidecar written next to a parameter checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub iteration: u64,
    pub alpha: f64,
    pub tau: f64,
}

/// Writes `<stem>.bin` and `<stem>.json` in `dir`.
pub fn save_checkpoint(
    dir: &Path,
    stem: &str,
    params: &ParameterVector,
    meta: &CheckpointMeta,
) -> Result<()> {
    params.save(&dir.join(format!("{stem}.bin")))?;
    let path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(meta).expect("meta serialises");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<(ParameterVector, CheckpointMeta)> {
    let params = ParameterVector::load(&dir.join(format!("{stem}.bin")))?;
    let path = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    Ok((params, meta))
}
