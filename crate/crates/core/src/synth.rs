//! Procedural two-domain data with exact ground truth.
//!
//! A scene is a set of blobs, each the positive part of a smoothed random
//! field (a radial bump plus band-limited noise) around a random center.
//! Domain B renders the blobs in DAB over a hematoxylin counterstain, so the
//! CK pipeline can invert it. Domain A recolors them by class: TC- blobs in
//! hematoxylin blue, TC+ blobs with a brown membrane texture, plus brown
//! speckles outside the epithelium that are labeled Other.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ck::{BinaryMask, StainMatrix};
use crate::datamodel::{DatasetSplit, Domain, Example, ImagePatch, LabelMask, IGNORE, OTHER, TC_NEGATIVE, TC_POSITIVE};
use crate::error::{Error, Result};

/// Hematoxylin and DAB optical densities of the rendered structures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Palette {
    pub background: [f64; 2],
    pub negative: [f64; 2],
    pub positive: [f64; 2],
    /// DAB density added on the rim of TC+ blobs.
    pub membrane: f64,
    pub distractor: [f64; 2],
    /// Amplitude of the hematoxylin nuclear texture.
    pub texture: f64,
}

impl Palette {
    pub fn domain_a() -> Self {
        Self {
            background: [0.12, 0.0],
            negative: [0.75, 0.0],
            positive: [0.45, 0.25],
            membrane: 0.55,
            distractor: [0.35, 0.8],
            texture: 0.15,
        }
    }

    /// In B every epithelial blob is stained alike, so only `negative` matters.
    pub fn domain_b() -> Self {
        Self {
            background: [0.15, 0.0],
            negative: [0.2, 0.7],
            positive: [0.2, 0.7],
            membrane: 0.0,
            distractor: [0.0, 0.0],
            texture: 0.15,
        }
    }
}

impl Default for Palette {
    fn default() -> Self {
        Self::domain_a()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub patch_size: usize,
    /// Inclusive range of epithelial blobs per patch.
    pub n_blobs: (usize, usize),
    /// Range of blob radii in pixels.
    pub blob_scale: (f64, f64),
    /// Probability that a domain-A blob is TC+.
    pub positive_fraction: f64,
    /// Expected brown speckles per 1000 pixels of domain-A patches.
    pub distractor_density: f64,
    pub noise_sigma: f64,
    /// Relative per-patch jitter of all stain densities.
    pub intensity_jitter: f64,
    pub palette_a: Palette,
    pub palette_b: Palette,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            patch_size: 64,
            n_blobs: (1, 4),
            blob_scale: (6.0, 13.0),
            positive_fraction: 0.5,
            distractor_density: 3.0,
            noise_sigma: 0.02,
            intensity_jitter: 0.1,
            palette_a: Palette::domain_a(),
            palette_b: Palette::domain_b(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::Config(format!("positive_fraction {} outside [0,1]", self.positive_fraction)));
        }
        if !(self.noise_sigma >= 0.0) || !(self.distractor_density >= 0.0) || !(self.intensity_jitter >= 0.0) {
            return Err(Error::Config("noise, jitter and distractor density must be non-negative".into()));
        }
        if self.patch_size == 0 || self.n_blobs.0 > self.n_blobs.1 {
            return Err(Error::Config("patch size must be positive and n_blobs ordered".into()));
        }
        if !(self.blob_scale.0 > 0.0 && self.blob_scale.0 <= self.blob_scale.1) {
            return Err(Error::Config("blob_scale must be a positive ordered range".into()));
        }
        Ok(())
    }
}

/// Independent random stream per (seed, stream, index).
fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) << 32);
    ChaCha8Rng::seed_from_u64(rng.random())
}

const WAVES: usize = 6;

/// Band-limited noise: a sum of random low-frequency plane waves in `[-1, 1]`.
#[derive(Clone, Debug)]
struct SmoothField {
    waves: [(f64, f64, f64); WAVES],
}

impl SmoothField {
    fn random<R: Rng + ?Sized>(rng: &mut R, max_freq: f64) -> Self {
        let mut waves = [(0.0, 0.0, 0.0); WAVES];
        for w in &mut waves {
            let f = rng.random_range(0.3..1.0) * max_freq;
            let a = rng.random_range(0.0..core::f64::consts::TAU);
            *w = (f * libm::cos(a), f * libm::sin(a), rng.random_range(0.0..core::f64::consts::TAU));
        }
        Self { waves }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        self.waves.iter().map(|(fy, fx, p)| libm::cos(fy * y + fx * x + p)).sum::<f64>() / WAVES as f64
    }
}

#[derive(Clone, Debug)]
struct Blob {
    cy: f64,
    cx: f64,
    radius: f64,
    field: SmoothField,
    positive: bool,
}

impl Blob {
    /// Positive inside the blob; near zero on its rim.
    fn level(&self, y: f64, x: f64) -> f64 {
        let d = libm::sqrt((y - self.cy) * (y - self.cy) + (x - self.cx) * (x - self.cx));
        1.0 - d / self.radius + 0.35 * self.field.at(y, x)
    }
}

/// Blob layout of one patch.
#[derive(Clone, Debug)]
pub struct Scene {
    size: usize,
    blobs: Vec<Blob>,
}

impl Scene {
    pub fn random<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Self {
        let size = cfg.patch_size;
        let n = rng.random_range(cfg.n_blobs.0..=cfg.n_blobs.1);
        let blobs = (0..n)
            .map(|_| {
                let radius = if cfg.blob_scale.0 < cfg.blob_scale.1 {
                    rng.random_range(cfg.blob_scale.0..cfg.blob_scale.1)
                } else {
                    cfg.blob_scale.0
                };
                Blob {
                    cy: rng.random_range(0.0..size as f64),
                    cx: rng.random_range(0.0..size as f64),
                    radius,
                    field: SmoothField::random(rng, 2.0 / radius),
                    positive: rng.random_bool(cfg.positive_fraction),
                }
            })
            .collect();
        Self { size, blobs }
    }

    /// Per pixel: index of the first blob covering it and its level there.
    fn owners(&self) -> Vec<Option<(usize, f64)>> {
        let s = self.size;
        let mut out = vec![None; s * s];
        for y in 0..s {
            for x in 0..s {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                out[y * s + x] = self.blobs.iter().enumerate().find_map(|(i, b)| {
                    let l = b.level(py, px);
                    (l > 0.0).then_some((i, l))
                });
            }
        }
        out
    }

    pub fn support(&self) -> BinaryMask {
        let s = self.size;
        BinaryMask { height: s, width: s, values: self.owners().iter().map(Option::is_some).collect() }
    }

    /// Ground-truth classes of the domain-A rendering.
    pub fn labels(&self) -> LabelMask {
        let s = self.size;
        let labels = self
            .owners()
            .iter()
            .map(|o| match o {
                Some((i, _)) if self.blobs[*i].positive => TC_POSITIVE,
                Some(_) => TC_NEGATIVE,
                None => OTHER,
            })
            .collect();
        LabelMask { domain: Domain::A, height: s, width: s, labels }
    }
}

fn jittered<R: Rng + ?Sized>(d: [f64; 2], jitter: f64, rng: &mut R) -> [f64; 2] {
    let mut f = |v: f64| if jitter > 0.0 { v * (1.0 + rng.random_range(-jitter..jitter)) } else { v };
    [f(d[0]), f(d[1])]
}

fn finish<R: Rng + ?Sized>(
    id: String,
    domain: Domain,
    size: usize,
    densities: &[[f64; 2]],
    sigma: f64,
    rng: &mut R,
) -> ImagePatch {
    let stains = StainMatrix::hematoxylin_dab();
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    let mut pixels = Vec::with_capacity(size * size * 3);
    for d in densities {
        let rgb = stains.compose([d[0].max(0.0), d[1].max(0.0), 0.0]);
        for v in rgb {
            let v = if sigma > 0.0 { v + noise.sample(rng) } else { v };
            pixels.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    ImagePatch { id, domain, height: size, width: size, pixels }
}

/// Render a label layout in domain-A colors: class 1 as TC-, class 2 as TC+
/// (with a membrane rim derived from the distance to the class boundary),
/// brown speckles on class-0 pixels. Ignore pixels render as background.
/// Applied to a B patch's conditioning mask this is the exact B-to-A
/// translation of the generator.
pub fn render_a(cfg: &SynthConfig, id: impl Into<String>, mask: &LabelMask, seed: u64) -> Result<ImagePatch> {
    cfg.validate()?;
    let (h, w) = (mask.height, mask.width);
    if h != w || h != cfg.patch_size {
        return Err(Error::ShapeMismatch(format!("mask {h}x{w} for patch size {}", cfg.patch_size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = &cfg.palette_a;
    let j = cfg.intensity_jitter;
    let bg = jittered(p.background, j, &mut rng);
    let neg = jittered(p.negative, j, &mut rng);
    let pos = jittered(p.positive, j, &mut rng);
    let membrane = p.membrane * (1.0 + if j > 0.0 { rng.random_range(-j..j) } else { 0.0 });
    let distractor = jittered(p.distractor, j, &mut rng);
    let texture = SmoothField::random(&mut rng, 1.4);
    let rim = rim_distance(mask);
    let mut densities: Vec<[f64; 2]> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let t = p.texture * texture.at(y, x);
            match mask.labels[i] {
                TC_NEGATIVE => [neg[0] + t, neg[1]],
                TC_POSITIVE => {
                    let m = if rim[i] <= 2 { membrane } else { 0.0 };
                    [pos[0] + t, pos[1] + m]
                }
                _ => [bg[0] + 0.5 * t, bg[1]],
            }
        })
        .collect();
    let expected = cfg.distractor_density * (h * w) as f64 / 1000.0;
    let count = poisson(expected, &mut rng);
    for _ in 0..count {
        let (cy, cx) = (rng.random_range(0..h) as i64, rng.random_range(0..w) as i64);
        let r: i64 = rng.random_range(1..=2);
        for dy in -r..=r {
            for dx in -r..=r {
                let (y, x) = (cy + dy, cx + dx);
                if dy * dy + dx * dx > r * r || y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                    continue;
                }
                let i = y as usize * w + x as usize;
                if mask.labels[i] == OTHER || mask.labels[i] == IGNORE {
                    densities[i] = distractor;
                }
            }
        }
    }
    Ok(finish(id.into(), Domain::A, h, &densities, cfg.noise_sigma, &mut rng))
}

/// Chebyshev distance (capped at 3) to the nearest pixel of another class.
fn rim_distance(mask: &LabelMask) -> Vec<u8> {
    let (h, w) = (mask.height as i64, mask.width as i64);
    let mut out = vec![3u8; mask.labels.len()];
    for y in 0..h {
        for x in 0..w {
            let own = mask.labels[(y * w + x) as usize];
            'search: for r in 1..3i64 {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy >= 0 && xx >= 0 && yy < h && xx < w && mask.labels[(yy * w + xx) as usize] != own {
                            out[(y * w + x) as usize] = r as u8;
                            break 'search;
                        }
                    }
                }
            }
        }
    }
    out
}

fn poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    let limit = libm::exp(-lambda);
    let (mut k, mut p) = (0usize, 1.0);
    loop {
        p *= rng.random::<f64>();
        if p <= limit || k > 10_000 {
            return k;
        }
        k += 1;
    }
}

/// Render a binary epithelium layout in domain-B colors.
pub fn render_b(cfg: &SynthConfig, id: impl Into<String>, support: &BinaryMask, seed: u64) -> Result<ImagePatch> {
    cfg.validate()?;
    let (h, w) = (support.height, support.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = &cfg.palette_b;
    let j = cfg.intensity_jitter;
    let bg = jittered(p.background, j, &mut rng);
    let epi = jittered(p.negative, j, &mut rng);
    let texture = SmoothField::random(&mut rng, 1.4);
    let densities: Vec<[f64; 2]> = support
        .values
        .iter()
        .enumerate()
        .map(|(i, inside)| {
            let t = p.texture * texture.at((i / w) as f64, (i % w) as f64);
            if *inside {
                [epi[0] + t, epi[1]]
            } else {
                [bg[0] + 0.5 * t, bg[1]]
            }
        })
        .collect();
    Ok(finish(id.into(), Domain::B, h, &densities, cfg.noise_sigma, &mut rng))
}

const STREAM_A: u64 = 1;
const STREAM_B: u64 = 2;

fn generate_a_stream(cfg: &SynthConfig, n: usize, stream: u64, prefix: &str) -> Result<Vec<Example>> {
    cfg.validate()?;
    (0..n)
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, stream, i as u64);
            let scene = Scene::random(cfg, &mut rng);
            let mask = scene.labels();
            let patch = render_a(cfg, format!("{prefix}{i:05}"), &mask, rng.random())?;
            Ok((patch, mask))
        })
        .collect()
}

/// `n` domain-A patches with their three-class masks.
pub fn generate_a(cfg: &SynthConfig, n: usize) -> Result<Vec<Example>> {
    generate_a_stream(cfg, n, STREAM_A, "a")
}

fn generate_b_stream(cfg: &SynthConfig, n: usize, stream: u64, prefix: &str) -> Result<Vec<(ImagePatch, BinaryMask)>> {
    cfg.validate()?;
    (0..n)
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, stream, i as u64);
            let support = Scene::random(cfg, &mut rng).support();
            let patch = render_b(cfg, format!("{prefix}{i:05}"), &support, rng.random())?;
            Ok((patch, support))
        })
        .collect()
}

/// `n` domain-B patches with their exact epithelium masks.
pub fn generate_b(cfg: &SynthConfig, n: usize) -> Result<Vec<(ImagePatch, BinaryMask)>> {
    generate_b_stream(cfg, n, STREAM_B, "b")
}

/// Split sizes and the share of domain-A training patches keeping labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSizes {
    pub train_a: usize,
    pub train_b: usize,
    pub test: usize,
    pub validation: usize,
    pub annotation_fraction: f64,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self { train_a: 32, train_b: 64, test: 8, validation: 32, annotation_fraction: 1.0 }
    }
}

/// Build all four splits from disjoint random streams. Only the first
/// `round(fraction * train_a)` domain-A training patches keep their labels;
/// the others are entirely ignore-labeled. Domain-B masks are the exact
/// epithelium layouts with labels 0/1.
pub fn make_splits(cfg: &SynthConfig, sizes: &SplitSizes) -> Result<DatasetSplit> {
    if !(0.0..=1.0).contains(&sizes.annotation_fraction) {
        return Err(Error::Config(format!("annotation fraction {} outside [0,1]", sizes.annotation_fraction)));
    }
    let mut train_a = generate_a_stream(cfg, sizes.train_a, 10, "train-a-")?;
    let keep = libm::round(sizes.annotation_fraction * sizes.train_a as f64) as usize;
    for (_, mask) in train_a.iter_mut().skip(keep) {
        mask.labels.iter_mut().for_each(|l| *l = IGNORE);
    }
    let train_b = generate_b_stream(cfg, sizes.train_b, 11, "train-b-")?
        .into_iter()
        .map(|(p, m)| {
            let mask = crate::ck::condition_masks(&m).0;
            (p, mask)
        })
        .collect();
    let split = DatasetSplit {
        train_a,
        train_b,
        test: generate_a_stream(cfg, sizes.test, 12, "test-")?,
        validation: generate_a_stream(cfg, sizes.validation, 13, "val-")?,
    };
    split.validate()?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ck::{condition_masks, segment_ck, CkConfig};
    use proptest::prelude::*;

    fn small() -> SynthConfig {
        SynthConfig { patch_size: 32, blob_scale: (4.0, 8.0), ..SynthConfig::default() }
    }

    #[test]
    fn generation_is_reproducible() {
        let cfg = small();
        let a = generate_b(&cfg, 3).unwrap();
        let b = generate_b(&cfg, 3).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
        assert_eq!(generate_a(&cfg, 2).unwrap(), generate_a(&cfg, 2).unwrap());
        let other = SynthConfig { seed: 1, ..cfg };
        assert_ne!(generate_b(&other, 3).unwrap(), a);
    }

    #[test]
    fn empty_scene_is_blank() {
        let cfg = SynthConfig { n_blobs: (0, 0), noise_sigma: 0.0, ..small() };
        let stains = StainMatrix::hematoxylin_dab();
        for (p, m) in generate_b(&cfg, 3).unwrap() {
            assert_eq!(m.count(), 0);
            let d = crate::ck::color_deconvolve(&p, &stains);
            assert!(d.chunks(3).all(|px| px[1] < 1e-6));
        }
    }

    #[test]
    fn noise_free_b_is_recovered_by_ck_pipeline() {
        let cfg = SynthConfig { noise_sigma: 0.0, ..SynthConfig::default() };
        for (p, truth) in generate_b(&cfg, 10).unwrap() {
            let mask = segment_ck(&p, &CkConfig::default()).unwrap();
            if truth.count() == 0 {
                assert_eq!(mask.count(), 0);
            } else {
                assert!(mask.iou(&truth) >= 0.98, "{}: iou {}", p.id, mask.iou(&truth));
            }
        }
    }

    #[test]
    fn positive_fraction_boundaries() {
        let none = SynthConfig { positive_fraction: 0.0, ..small() };
        for (_, m) in generate_a(&none, 5).unwrap() {
            assert!(!m.labels.contains(&TC_POSITIVE));
        }
        let all = SynthConfig { positive_fraction: 1.0, n_blobs: (1, 3), ..small() };
        for (_, m) in generate_a(&all, 5).unwrap() {
            let c = m.class_counts();
            assert!(c[2] > 0 && c[1] == 0);
        }
    }

    #[test]
    fn distractors_are_brown_but_other() {
        let cfg = SynthConfig { distractor_density: 10.0, noise_sigma: 0.0, ..small() };
        let stains = StainMatrix::hematoxylin_dab();
        let mut found = false;
        for (p, m) in generate_a(&cfg, 4).unwrap() {
            let d = crate::ck::color_deconvolve(&p, &stains);
            found |= m.labels.iter().enumerate().any(|(i, l)| *l == OTHER && d[i * 3 + 1] > 0.5);
        }
        assert!(found);
    }

    #[test]
    fn reference_translation_renders_the_conditioning() {
        let cfg = SynthConfig { noise_sigma: 0.0, distractor_density: 0.0, ..small() };
        let (_, support) = generate_b(&cfg, 1).unwrap().remove(0);
        let (neg, pos) = condition_masks(&support);
        let a_neg = render_a(&cfg, "n", &neg, 3).unwrap();
        let a_pos = render_a(&cfg, "p", &pos, 3).unwrap();
        assert_eq!(a_neg.domain, Domain::A);
        let stains = StainMatrix::hematoxylin_dab();
        let dn = crate::ck::color_deconvolve(&a_neg, &stains);
        let dp = crate::ck::color_deconvolve(&a_pos, &stains);
        for (i, inside) in support.values.iter().enumerate() {
            assert!(dn[i * 3 + 1] < 1e-6);
            if *inside {
                assert!(dp[i * 3 + 1] > 0.1);
            }
        }
    }

    #[test]
    fn splits_follow_annotation_fraction() {
        let cfg = small();
        let sizes = SplitSizes { train_a: 8, train_b: 4, test: 2, validation: 2, annotation_fraction: 0.0 };
        let s = make_splits(&cfg, &sizes).unwrap();
        assert!(s.train_a.iter().all(|(_, m)| m.labels.iter().all(|l| *l == IGNORE)));
        let full = make_splits(&cfg, &SplitSizes { annotation_fraction: 1.0, ..sizes.clone() }).unwrap();
        assert!(full.train_a.iter().all(|(_, m)| !m.labels.contains(&IGNORE)));
        let quarter = make_splits(&cfg, &SplitSizes { annotation_fraction: 0.25, ..sizes.clone() }).unwrap();
        assert_eq!(quarter.train_a.iter().filter(|(_, m)| m.labeled_pixels() > 0).count(), 2);
        let again = make_splits(&cfg, &SplitSizes { annotation_fraction: 0.25, ..sizes }).unwrap();
        assert_eq!(quarter.train_a, again.train_a);
        assert_eq!(quarter.validation, again.validation);
        assert!(s.train_b.iter().all(|(p, _)| p.domain == Domain::B));
    }

    #[test]
    fn invalid_config_is_rejected() {
        assert!(generate_a(&SynthConfig { positive_fraction: 1.5, ..small() }, 1).is_err());
        assert!(generate_b(&SynthConfig { noise_sigma: -0.1, ..small() }, 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn tc_truth_is_positive_area_share(seed in 0u64..1000, frac in 0.0f64..=1.0) {
            let cfg = SynthConfig { seed, positive_fraction: frac, ..small() };
            for (p, m) in generate_a(&cfg, 2).unwrap() {
                prop_assert!(p.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert!(m.labels.iter().all(|l| *l <= TC_POSITIVE));
                let c = m.class_counts();
                if c[1] + c[2] > 0 {
                    let share = c[2] as f64 / (c[1] + c[2]) as f64;
                    prop_assert_eq!(crate::eval::tc_score(&m).unwrap(), share);
                }
            }
        }
    }
}
