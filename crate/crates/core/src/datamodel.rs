//! Core value types and label conventions shared by every module.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of segmentation classes.
pub const NUM_CLASSES: usize = 3;
pub const OTHER: u8 = 0;
pub const TC_NEGATIVE: u8 = 1;
pub const TC_POSITIVE: u8 = 2;
/// Unannotated pixel, excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// Stain domain of a patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    /// PD-L1-like target domain.
    A,
    /// CK-like source domain.
    B,
}

impl Domain {
    pub fn flipped(self) -> Self {
        match self {
            Domain::A => Domain::B,
            Domain::B => Domain::A,
        }
    }
}

/// RGB image, `height x width x 3` interleaved, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch {
    pub id: String,
    pub domain: Domain,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl ImagePatch {
    pub fn new(id: impl Into<String>, domain: Domain, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::ShapeMismatch(alloc::format!("{} values for a {height}x{width}x3 patch", pixels.len())));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(alloc::format!("pixel value {bad} outside [0,1]")));
        }
        Ok(Self { id: id.into(), domain, height, width, pixels })
    }

    /// Uniform patch, mostly for tests and padding.
    pub fn filled(id: impl Into<String>, domain: Domain, height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self { id: id.into(), domain, height, width, pixels }
    }

    pub fn rgb(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Planar `3 x h x w` copy.
    pub fn to_planar(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; 3 * plane];
        for (p, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = px[c];
            }
        }
        out
    }

    /// Inverse of [`ImagePatch::to_planar`]; values are clamped into `[0, 1]`.
    pub fn from_planar(id: impl Into<String>, domain: Domain, height: usize, width: usize, planar: &[f32]) -> Self {
        let plane = height * width;
        let mut pixels = vec![0.0; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                pixels[p * 3 + c] = planar[c * plane + p].clamp(0.0, 1.0);
            }
        }
        Self { id: id.into(), domain, height, width, pixels }
    }
}

/// Per-pixel class map over `{0, 1, 2, 255}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub domain: Domain,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

pub fn is_legal_label(l: u8) -> bool {
    (l as usize) < NUM_CLASSES || l == IGNORE
}

impl LabelMask {
    pub fn new(domain: Domain, height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch(alloc::format!("{} labels for a {height}x{width} mask", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|l| !is_legal_label(**l)) {
            return Err(Error::InvalidLabel { label: bad, num_classes: NUM_CLASSES });
        }
        Ok(Self { domain, height, width, labels })
    }

    pub fn filled(domain: Domain, height: usize, width: usize, label: u8) -> Self {
        Self { domain, height, width, labels: vec![label; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn same_shape(&self, other: &LabelMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn matches(&self, patch: &ImagePatch) -> bool {
        self.height == patch.height && self.width == patch.width
    }

    /// Count of pixels carrying each class label (ignore excluded).
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &l in &self.labels {
            if let Some(c) = counts.get_mut(l as usize) {
                *c += 1;
            }
        }
        counts
    }

    pub fn labeled_pixels(&self) -> usize {
        self.labels.iter().filter(|l| **l != IGNORE).count()
    }
}

/// Per-pixel class distribution, `height x width x 3` interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPosterior {
    pub height: usize,
    pub width: usize,
    pub probs: Vec<f32>,
}

impl ClassPosterior {
    pub fn new(height: usize, width: usize, probs: Vec<f32>) -> Result<Self> {
        if probs.len() != height * width * NUM_CLASSES {
            return Err(Error::ShapeMismatch(alloc::format!(
                "{} probabilities for a {height}x{width}x{NUM_CLASSES} posterior",
                probs.len()
            )));
        }
        for px in probs.chunks_exact(NUM_CLASSES) {
            let sum: f32 = px.iter().sum();
            if px.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidInput(alloc::format!("pixel distribution {px:?} is not normalized")));
            }
        }
        Ok(Self { height, width, probs })
    }

    /// Build from a planar `3 x h x w` buffer without re-validating.
    pub(crate) fn from_planar(height: usize, width: usize, planar: &[f32]) -> Self {
        let plane = height * width;
        let mut probs = vec![0.0; plane * NUM_CLASSES];
        for p in 0..plane {
            for c in 0..NUM_CLASSES {
                probs[p * NUM_CLASSES + c] = planar[c * plane + p];
            }
        }
        Self { height, width, probs }
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * NUM_CLASSES;
        &self.probs[i..i + NUM_CLASSES]
    }
}

/// One-hot encode a mask as `height x width x num_classes` (interleaved).
/// Ignore pixels encode as all zeros.
pub fn encode_one_hot(mask: &LabelMask, num_classes: usize) -> Result<Vec<f32>> {
    let mut out = vec![0.0; mask.labels.len() * num_classes];
    for (i, &l) in mask.labels.iter().enumerate() {
        if l == IGNORE {
            continue;
        }
        if l as usize >= num_classes {
            return Err(Error::InvalidLabel { label: l, num_classes });
        }
        out[i * num_classes + l as usize] = 1.0;
    }
    Ok(out)
}

/// Planar (`num_classes x h x w`) variant of [`encode_one_hot`], the layout
/// the networks consume.
pub fn encode_one_hot_planar(mask: &LabelMask, num_classes: usize) -> Result<Vec<f32>> {
    let plane = mask.labels.len();
    let mut out = vec![0.0; plane * num_classes];
    for (i, &l) in mask.labels.iter().enumerate() {
        if l == IGNORE {
            continue;
        }
        if l as usize >= num_classes {
            return Err(Error::InvalidLabel { label: l, num_classes });
        }
        out[l as usize * plane + i] = 1.0;
    }
    Ok(out)
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(px: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in px.iter().enumerate().skip(1) {
        if *v > px[best] {
            best = i;
        }
    }
    best
}

/// Hard labels from a posterior.
pub fn argmax_mask(posterior: &ClassPosterior, domain: Domain) -> LabelMask {
    let labels = posterior.probs.chunks_exact(NUM_CLASSES).map(|px| argmax(px) as u8).collect();
    LabelMask { domain, height: posterior.height, width: posterior.width, labels }
}

/// A labeled patch.
pub type Example = (ImagePatch, LabelMask);

/// Training, model-selection and evaluation partitions.
#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train_a: Vec<Example>,
    pub train_b: Vec<Example>,
    pub test: Vec<Example>,
    pub validation: Vec<Example>,
}

impl DatasetSplit {
    /// Check that no patch id occurs in more than one split (or twice in one).
    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<&str> = self.all().map(|(p, _)| p.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput(alloc::format!("patch id {} appears more than once", w[0])));
        }
        for (p, m) in self.all() {
            if !m.matches(p) {
                return Err(Error::ShapeMismatch(alloc::format!("mask of {} does not match its patch", p.id)));
            }
        }
        Ok(())
    }

    pub fn all(&self) -> impl Iterator<Item = &Example> {
        self.train_a.iter().chain(&self.train_b).chain(&self.test).chain(&self.validation)
    }
}
