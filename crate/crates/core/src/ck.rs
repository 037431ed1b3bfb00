//! Heuristic epithelium labeling of CK-stained patches.
//!
//! Color deconvolution separates the CK stain, an Otsu threshold binarizes
//! it and a morphological closing cleans up the result. The binary masks are
//! then turned into the two three-class conditioning masks used by training.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datamodel::{Domain, ImagePatch, LabelMask, OTHER, TC_NEGATIVE, TC_POSITIVE};
use crate::error::{Error, Result};

/// Floor applied to pixel intensities before taking optical densities.
pub const OD_EPS: f64 = 1e-6;

/// Three unit-norm optical-density stain vectors, one per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct StainMatrix {
    rows: [[f64; 3]; 3],
    inverse: [[f64; 3]; 3],
}

impl TryFrom<[[f64; 3]; 3]> for StainMatrix {
    type Error = Error;

    fn try_from(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::new(rows)
    }
}

impl From<StainMatrix> for [[f64; 3]; 3] {
    fn from(m: StainMatrix) -> Self {
        m.rows
    }
}

fn normalize(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    (n > 0.0 && n.is_finite()).then(|| [v[0] / n, v[1] / n, v[2] / n])
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn invert(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-9 || !det.is_finite() {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            // cofactor of m[j][i]
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    Some(inv)
}

impl StainMatrix {
    /// Rows are normalized; a singular matrix is a configuration error.
    pub fn new(rows: [[f64; 3]; 3]) -> Result<Self> {
        let mut unit = [[0.0; 3]; 3];
        for (dst, src) in unit.iter_mut().zip(rows) {
            *dst =
                normalize(src).ok_or_else(|| Error::Config("stain vector has zero or non-finite norm".to_string()))?;
        }
        let inverse = invert(&unit).ok_or_else(|| Error::Config("stain matrix is singular".to_string()))?;
        Ok(Self { rows: unit, inverse })
    }

    /// Two stains plus their cross product as the residual channel.
    pub fn from_two(first: [f64; 3], second: [f64; 3]) -> Result<Self> {
        Self::new([first, second, cross(first, second)])
    }

    /// Hematoxylin / DAB vectors of Ruifrok and Johnston.
    pub fn hematoxylin_dab() -> Self {
        Self::from_two([0.650, 0.704, 0.286], [0.268, 0.570, 0.776]).expect("reference stains are independent")
    }

    pub fn rows(&self) -> &[[f64; 3]; 3] {
        &self.rows
    }

    /// Densities `d` with `d * M = od`.
    pub fn unmix(&self, od: [f64; 3]) -> [f64; 3] {
        let mut d = [0.0; 3];
        for (j, dj) in d.iter_mut().enumerate() {
            *dj = (0..3).map(|i| od[i] * self.inverse[i][j]).sum();
        }
        d
    }

    /// RGB transmission of stain densities (Beer-Lambert, base 10).
    pub fn compose(&self, densities: [f64; 3]) -> [f64; 3] {
        let mut rgb = [0.0; 3];
        for (c, v) in rgb.iter_mut().enumerate() {
            let od: f64 = (0..3).map(|s| densities[s] * self.rows[s][c]).sum();
            *v = libm::pow(10.0, -od);
        }
        rgb
    }
}

impl Default for StainMatrix {
    fn default() -> Self {
        Self::hematoxylin_dab()
    }
}

/// Boolean epithelium mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(alloc::format!("{} values for {height}x{width}", values.len())));
        }
        Ok(Self { height, width, values })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, values: vec![false; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|v| **v).count()
    }

    /// Epithelium (class 1 or 2) support of a label mask.
    pub fn from_labels(mask: &LabelMask) -> Self {
        let values = mask.labels.iter().map(|l| *l == TC_NEGATIVE || *l == TC_POSITIVE).collect();
        Self { height: mask.height, width: mask.width, values }
    }

    /// Intersection over union; two empty masks score 1.
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.values.iter().zip(&other.values) {
            inter += (*a && *b) as usize;
            union += (*a || *b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Per-pixel stain densities, `height x width x 3` interleaved, clipped at 0.
pub fn color_deconvolve(patch: &ImagePatch, stains: &StainMatrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(patch.pixels.len());
    for px in patch.pixels.chunks_exact(3) {
        let od = [0, 1, 2].map(|c| -libm::log10((px[c] as f64).max(OD_EPS)));
        out.extend(stains.unmix(od).map(|d| d.max(0.0)));
    }
    out
}

/// Otsu split point of a histogram: the bin index `k` such that bins `< k`
/// form the lower class. Maximizes the between-class variance exactly
/// (integer arithmetic); ties resolve to the smallest `k`.
pub fn otsu_from_histogram(hist: &[u64]) -> Result<usize> {
    let total: u128 = hist.iter().map(|h| *h as u128).sum();
    let weighted: u128 = hist.iter().enumerate().map(|(i, h)| i as u128 * *h as u128).sum();
    let mut best: Option<(usize, u128, u128)> = None;
    let (mut n0, mut s0) = (0u128, 0u128);
    for k in 1..hist.len() {
        n0 += hist[k - 1] as u128;
        s0 += (k as u128 - 1) * hist[k - 1] as u128;
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        // between-class variance ~ (total*s0 - n0*weighted)^2 / (n0*n1)
        let diff = (total * s0).abs_diff(n0 * weighted);
        let num = diff * diff;
        let den = n0 * n1;
        let better = match best {
            None => num > 0,
            Some((_, bn, bd)) => fraction_gt(num, den, bn, bd),
        };
        if better {
            best = Some((k, num, den));
        }
    }
    best.map(|(k, _, _)| k).ok_or_else(|| Error::DegenerateInput("histogram has no between-class variance".to_string()))
}

/// `a/b > c/d` for positive denominators, exact while products fit in u128.
fn fraction_gt(a: u128, b: u128, c: u128, d: u128) -> bool {
    match (a.checked_mul(d), c.checked_mul(b)) {
        (Some(l), Some(r)) => l > r,
        _ => (a as f64 / b as f64) > (c as f64 / d as f64),
    }
}

/// Histogram of `channel` over `[min, max]` with `bins` equal-width bins,
/// returned with the range.
pub fn histogram(channel: &[f64], bins: usize) -> Result<(Vec<u64>, f64, f64)> {
    if bins < 2 {
        return Err(Error::InvalidInput("Otsu needs at least two bins".to_string()));
    }
    let (lo, hi) = channel.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::DegenerateInput("channel is constant".to_string()));
    }
    let width = (hi - lo) / bins as f64;
    let mut hist = vec![0u64; bins];
    for v in channel {
        hist[bin_of(*v, lo, width, bins)] += 1;
    }
    Ok((hist, lo, hi))
}

#[inline]
fn bin_of(v: f64, lo: f64, width: f64, bins: usize) -> usize {
    (((v - lo) / width) as usize).min(bins - 1)
}

/// Otsu threshold of a channel; values `>= threshold` form the upper class.
/// The threshold is the lower edge of the first upper-class bin.
pub fn otsu_threshold(channel: &[f64], bins: usize) -> Result<f64> {
    let (hist, lo, hi) = histogram(channel, bins)?;
    let k = otsu_from_histogram(&hist)?;
    Ok(lo + k as f64 * (hi - lo) / bins as f64)
}

/// Offsets of a disk structuring element.
fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut offs = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                offs.push((dy, dx));
            }
        }
    }
    offs
}

/// Closing (dilation then erosion) with a disk of the given radius, computed
/// as on an unbounded plane so it is extensive and idempotent.
pub fn morphological_close(mask: &BinaryMask, radius: i64) -> Result<BinaryMask> {
    if radius < 0 {
        return Err(Error::InvalidInput(alloc::format!("closing radius {radius} is negative")));
    }
    let r = radius as usize;
    if r == 0 {
        return Ok(mask.clone());
    }
    let (h, w) = (mask.height, mask.width);
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let se = disk(r);
    let mut dilated = vec![false; ph * pw];
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            for (dy, dx) in &se {
                let (py, px) = ((y + r) as isize + dy, (x + r) as isize + dx);
                dilated[py as usize * pw + px as usize] = true;
            }
        }
    }
    let mut values = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            values[y * w + x] = se.iter().all(|(dy, dx)| {
                let (py, px) = ((y + r) as isize + dy, (x + r) as isize + dx);
                dilated[py as usize * pw + px as usize]
            });
        }
    }
    Ok(BinaryMask { height: h, width: w, values })
}

/// What to do with a patch that carries no CK stain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlankPolicy {
    #[default]
    EmptyMask,
    Error,
}

/// Settings of the CK labeling heuristic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CkConfig {
    pub stains: StainMatrix,
    /// Row of the stain matrix holding the CK stain.
    pub ck_channel: usize,
    pub close_radius: i64,
    pub bins: usize,
    /// Patches whose peak CK density stays below this are blank.
    pub min_density: f64,
    pub blank: BlankPolicy,
}

impl Default for CkConfig {
    fn default() -> Self {
        Self {
            stains: StainMatrix::default(),
            ck_channel: 1,
            close_radius: 2,
            bins: 256,
            min_density: 0.1,
            blank: BlankPolicy::EmptyMask,
        }
    }
}

/// Deconvolve, Otsu-binarize the CK channel and close.
pub fn segment_ck(patch: &ImagePatch, cfg: &CkConfig) -> Result<BinaryMask> {
    if patch.domain != Domain::B {
        return Err(Error::InvalidInput(alloc::format!("patch {} is not a CK-domain patch", patch.id)));
    }
    if cfg.ck_channel > 2 {
        return Err(Error::Config(alloc::format!("stain channel {} out of range", cfg.ck_channel)));
    }
    let densities = color_deconvolve(patch, &cfg.stains);
    let channel: Vec<f64> = densities.chunks_exact(3).map(|d| d[cfg.ck_channel]).collect();
    let peak = channel.iter().fold(0.0f64, |a, v| a.max(*v));
    let threshold = if peak < cfg.min_density {
        Err(Error::DegenerateInput(alloc::format!("patch {} carries no CK stain", patch.id)))
    } else {
        otsu_threshold(&channel, cfg.bins)
    };
    let threshold = match (threshold, cfg.blank) {
        (Ok(t), _) => t,
        (Err(Error::DegenerateInput(_)), BlankPolicy::EmptyMask) => {
            return Ok(BinaryMask::empty(patch.height, patch.width));
        }
        (Err(e), _) => return Err(e),
    };
    let raw = BinaryMask {
        height: patch.height,
        width: patch.width,
        values: channel.iter().map(|v| *v >= threshold).collect(),
    };
    morphological_close(&raw, cfg.close_radius)
}

/// The TC- (labels 0/1) and TC+ (labels 0/2) conditioning masks of a CK mask.
pub fn condition_masks(binary: &BinaryMask) -> (LabelMask, LabelMask) {
    let with = |label: u8| LabelMask {
        domain: Domain::B,
        height: binary.height,
        width: binary.width,
        labels: binary.values.iter().map(|e| if *e { label } else { OTHER }).collect(),
    };
    (with(TC_NEGATIVE), with(TC_POSITIVE))
}

/// Replace the masks of CK-domain examples by the heuristic segmentation
/// (stored as labels 0/1).
pub fn relabel_with_ck(examples: &mut [(ImagePatch, LabelMask)], cfg: &CkConfig) -> Result<()> {
    for (patch, mask) in examples.iter_mut() {
        let binary = segment_ck(patch, cfg)?;
        *mask = condition_masks(&binary).0;
    }
    Ok(())
}
