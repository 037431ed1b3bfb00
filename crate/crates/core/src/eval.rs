//! Tiled inference, per-class F1, tumor-cell scoring and concordance.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datamodel::{
    argmax_mask, ClassPosterior, Domain, ImagePatch, LabelMask, IGNORE, NUM_CLASSES, TC_NEGATIVE, TC_POSITIVE,
};
use crate::error::{Error, Result};
use crate::nn::Discriminator;
use crate::scalar::Real;

/// Tiles evaluated per forward pass.
const TILE_BATCH: usize = 8;

fn tile_starts(len: usize, tile: usize, step: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..).map(|i| i * step).take_while(|s| s + tile < len).collect();
    starts.push(len - tile);
    starts
}

fn crop(image: &ImagePatch, y0: usize, x0: usize, tile: usize) -> ImagePatch {
    // outside the image the tile is padded with white (empty glass)
    let mut pixels = vec![1.0f32; tile * tile * 3];
    for y in 0..tile.min(image.height.saturating_sub(y0)) {
        for x in 0..tile.min(image.width.saturating_sub(x0)) {
            let src = ((y0 + y) * image.width + x0 + x) * 3;
            pixels[(y * tile + x) * 3..(y * tile + x) * 3 + 3].copy_from_slice(&image.pixels[src..src + 3]);
        }
    }
    ImagePatch { id: image.id.clone(), domain: image.domain, height: tile, width: tile, pixels }
}

/// Segmentation posterior of an image of any size. Tiles of side `tile`
/// start every `tile - overlap` pixels (the last one flush with the border);
/// posteriors of overlapping tiles are averaged. Images smaller than a tile
/// are padded and cropped back.
pub fn predict_posterior<T: Real>(
    model: &Discriminator<T>,
    image: &ImagePatch,
    tile: usize,
    overlap: usize,
) -> Result<ClassPosterior> {
    if tile == 0 || overlap >= tile {
        return Err(Error::InvalidInput(format!("tile {tile} must exceed overlap {overlap}")));
    }
    let (h, w) = (image.height, image.width);
    let step = tile - overlap;
    let mut sums = vec![0.0f64; h * w * NUM_CLASSES];
    let mut counts = vec![0u32; h * w];
    let origins: Vec<(usize, usize)> = tile_starts(h, tile, step)
        .into_iter()
        .flat_map(|y| tile_starts(w, tile, step).into_iter().map(move |x| (y, x)))
        .collect();
    for chunk in origins.chunks(TILE_BATCH) {
        let tiles: Vec<ImagePatch> = chunk.iter().map(|(y, x)| crop(image, *y, *x, tile)).collect();
        let refs: Vec<&ImagePatch> = tiles.iter().collect();
        for ((y0, x0), (_, post)) in chunk.iter().zip(model.predict(&refs)?) {
            for y in 0..tile.min(h - y0) {
                for x in 0..tile.min(w - x0) {
                    let dst = (y0 + y) * w + x0 + x;
                    counts[dst] += 1;
                    for (c, p) in post.pixel(y, x).iter().enumerate() {
                        sums[dst * NUM_CLASSES + c] += f64::from(*p);
                    }
                }
            }
        }
    }
    let probs = sums
        .chunks_exact(NUM_CLASSES)
        .zip(&counts)
        .flat_map(|(px, n)| px.iter().map(move |v| (v / f64::from(*n)) as f32))
        .collect();
    Ok(ClassPosterior { height: h, width: w, probs })
}

/// Hard labels of [`predict_posterior`].
pub fn predict_mask<T: Real>(
    model: &Discriminator<T>,
    image: &ImagePatch,
    tile: usize,
    overlap: usize,
) -> Result<LabelMask> {
    Ok(argmax_mask(&predict_posterior(model, image, tile, overlap)?, Domain::A))
}

/// Pooled F1 of a model over labeled examples. Patches are predicted whole,
/// padded up to the next multiple of the discriminator stride when needed.
pub fn evaluate_model<T: Real>(
    model: &Discriminator<T>,
    examples: &[(ImagePatch, LabelMask)],
    absent: AbsentClass,
) -> Result<F1Report> {
    let stride = model.spec.stride_product();
    let mut confusion = Confusion::default();
    for chunk in examples.chunks(TILE_BATCH) {
        let uniform = chunk.iter().all(|(p, _)| p.height == chunk[0].0.height && p.width == chunk[0].0.width);
        let fits = chunk[0].0.height % stride == 0 && chunk[0].0.width % stride == 0;
        if uniform && fits {
            let refs: Vec<&ImagePatch> = chunk.iter().map(|(p, _)| p).collect();
            for ((_, truth), (_, post)) in chunk.iter().zip(model.predict(&refs)?) {
                confusion.add(&argmax_mask(&post, Domain::A), truth)?;
            }
        } else {
            for (patch, truth) in chunk {
                let tile = patch.height.max(patch.width).div_ceil(stride) * stride;
                confusion.add(&predict_mask(model, patch, tile, 0)?, truth)?;
            }
        }
    }
    confusion.scores(absent)
}

/// How to score a class that occurs in neither mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AbsentClass {
    /// Vacuously perfect: F1 = 1.
    #[default]
    One,
    /// Left out of the mean.
    Exclude,
}

/// Pixel confusion counts, `counts[truth][pred]`; accumulates across images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
    /// Labeled truth pixels whose prediction is the ignore label.
    pub unpredicted: [u64; NUM_CLASSES],
}

impl Confusion {
    pub fn add(&mut self, pred: &LabelMask, truth: &LabelMask) -> Result<()> {
        if !pred.same_shape(truth) {
            return Err(Error::ShapeMismatch(format!(
                "prediction {}x{} vs truth {}x{}",
                pred.height, pred.width, truth.height, truth.width
            )));
        }
        for (&p, &t) in pred.labels.iter().zip(&truth.labels) {
            if t == IGNORE {
                continue;
            }
            if t as usize >= NUM_CLASSES {
                return Err(Error::InvalidLabel { label: t, num_classes: NUM_CLASSES });
            }
            match p {
                IGNORE => self.unpredicted[t as usize] += 1,
                p if (p as usize) < NUM_CLASSES => self.counts[t as usize][p as usize] += 1,
                p => return Err(Error::InvalidLabel { label: p, num_classes: NUM_CLASSES }),
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum::<u64>() + self.unpredicted.iter().sum::<u64>()
    }

    /// `(tp, fp, fn)` of the union of `classes`.
    fn tally(&self, classes: &[usize]) -> (u64, u64, u64) {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for t in 0..NUM_CLASSES {
            for p in 0..NUM_CLASSES {
                let n = self.counts[t][p];
                match (classes.contains(&t), classes.contains(&p)) {
                    (true, true) => tp += n,
                    (false, true) => fp += n,
                    (true, false) => fn_ += n,
                    (false, false) => {}
                }
            }
            if classes.contains(&t) {
                fn_ += self.unpredicted[t];
            }
        }
        (tp, fp, fn_)
    }

    fn f1(&self, classes: &[usize]) -> Option<f64> {
        let (tp, fp, fn_) = self.tally(classes);
        let denom = 2 * tp + fp + fn_;
        (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
    }

    pub fn scores(&self, absent: AbsentClass) -> Result<F1Report> {
        if self.total() == 0 {
            return Err(Error::UndefinedMetric("every pixel is ignored".into()));
        }
        let fill = |v: Option<f64>| match absent {
            AbsentClass::One => Some(v.unwrap_or(1.0)),
            AbsentClass::Exclude => v,
        };
        let per_class = [fill(self.f1(&[0])), fill(self.f1(&[1])), fill(self.f1(&[2]))];
        let tc = fill(self.f1(&[1, 2]));
        let mean_of = |vals: &[Option<f64>]| {
            let present: Vec<f64> = vals.iter().flatten().copied().collect();
            (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
        };
        let mean = mean_of(&per_class).ok_or_else(|| Error::UndefinedMetric("no class to average".into()))?;
        let binary_mean = mean_of(&[per_class[0], tc]).unwrap_or(mean);
        Ok(F1Report {
            other: per_class[0],
            tc_negative: per_class[1],
            tc_positive: per_class[2],
            tc,
            mean,
            binary_mean,
        })
    }
}

/// F1 per class, of the merged epithelium class, and their means. `None`
/// marks a class excluded under [`AbsentClass::Exclude`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub other: Option<f64>,
    pub tc_negative: Option<f64>,
    pub tc_positive: Option<f64>,
    /// Epithelium regardless of positivity.
    pub tc: Option<f64>,
    /// Mean over Other, TC- and TC+.
    pub mean: f64,
    /// Mean over Other and TC.
    pub binary_mean: f64,
}

/// F1 scores of one prediction; ignore pixels of `truth` do not count.
pub fn f1_scores(pred: &LabelMask, truth: &LabelMask, absent: AbsentClass) -> Result<F1Report> {
    let mut c = Confusion::default();
    c.add(pred, truth)?;
    c.scores(absent)
}

/// F1 of the pooled confusion over many images.
pub fn pooled_f1<'a>(
    pairs: impl IntoIterator<Item = (&'a LabelMask, &'a LabelMask)>,
    absent: AbsentClass,
) -> Result<F1Report> {
    let mut c = Confusion::default();
    for (p, t) in pairs {
        c.add(p, t)?;
    }
    c.scores(absent)
}

/// `#TC+ / (#TC- + #TC+)` by pixel area, in `[0, 1]`.
pub fn tc_score(mask: &LabelMask) -> Result<f64> {
    let pos = mask.labels.iter().filter(|l| **l == TC_POSITIVE).count();
    let neg = mask.labels.iter().filter(|l| **l == TC_NEGATIVE).count();
    if pos + neg == 0 {
        return Err(Error::NoEpithelium);
    }
    Ok(pos as f64 / (pos + neg) as f64)
}

/// Agreement between predicted and reference scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concordance {
    /// Lin's concordance correlation coefficient.
    pub lcc: f64,
    /// Pearson correlation coefficient.
    pub pcc: f64,
    /// Mean absolute error, in the units of the inputs.
    pub mae: f64,
}

/// Lin's and Pearson's coefficients (population moments) and the MAE.
pub fn concordance(pred: &[f64], truth: &[f64]) -> Result<Concordance> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidInput(format!("{} predicted vs {} reference scores", pred.len(), truth.len())));
    }
    if pred.len() < 2 {
        return Err(Error::InvalidInput("concordance needs at least two scores".into()));
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = truth.iter().sum::<f64>() / n;
    let vp = pred.iter().map(|p| (p - mp) * (p - mp)).sum::<f64>() / n;
    let vt = truth.iter().map(|t| (t - mt) * (t - mt)).sum::<f64>() / n;
    let cov = pred.iter().zip(truth).map(|(p, t)| (p - mp) * (t - mt)).sum::<f64>() / n;
    if vp == 0.0 || vt == 0.0 {
        return Err(Error::UndefinedMetric("Pearson correlation of a constant score vector".into()));
    }
    let mae = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    Ok(Concordance { lcc: 2.0 * cov / (vp + vt + (mp - mt) * (mp - mt)), pcc: cov / libm::sqrt(vp * vt), mae })
}

/// Predicted-score statistics of the images whose reference score falls in one bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreBin {
    pub label: String,
    /// `None` for an empty bin.
    pub mean: Option<f64>,
    /// Population standard deviation.
    pub std: Option<f64>,
    pub count: usize,
}

pub const BIN_COUNT: usize = 12;

/// Index of the bin of a reference score in `[0, 100]`.
pub fn bin_index(truth: f64) -> usize {
    let t = truth.clamp(0.0, 100.0);
    if t < 1.0 {
        0
    } else if t < 10.0 {
        1
    } else if t >= 100.0 {
        BIN_COUNT - 1
    } else {
        1 + libm::floor(t / 10.0) as usize
    }
}

pub fn bin_label(index: usize) -> String {
    match index {
        0 => "TC<1".into(),
        1 => "1≤TC<10".into(),
        i if i == BIN_COUNT - 1 => "TC=100".into(),
        i => format!("{}≤TC<{}", (i - 1) * 10, i * 10),
    }
}

/// Twelve-bin report over `(predicted, reference)` score pairs in `[0, 100]`.
pub fn bin_report(scores: &[(f64, f64)]) -> Vec<ScoreBin> {
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); BIN_COUNT];
    for (p, t) in scores {
        groups[bin_index(*t)].push(*p);
    }
    groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let n = g.len();
            let mean = (n > 0).then(|| g.iter().sum::<f64>() / n as f64);
            let std = mean.map(|m| libm::sqrt(g.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64));
            ScoreBin { label: bin_label(i), mean, std, count: n }
        })
        .collect()
}

/// Score of one image: predicted and, when available, reference TC score in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub tc_cnn: f64,
    pub tc_true: Option<f64>,
}

/// Cohort-level scoring. Concordance and bins are in percentage points and
/// cover images with both scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TcScoreReport {
    pub per_image: Vec<ImageScore>,
    /// Images without predicted epithelium.
    pub unscoreable: Vec<String>,
    pub concordance: Option<Concordance>,
    pub bins: Vec<ScoreBin>,
}

/// Score every `(id, predicted mask, reference mask)`.
pub fn score_report(items: &[(String, LabelMask, Option<LabelMask>)]) -> Result<TcScoreReport> {
    let mut per_image = Vec::new();
    let mut unscoreable = Vec::new();
    for (id, pred, truth) in items {
        let tc_cnn = match tc_score(pred) {
            Ok(v) => v,
            Err(Error::NoEpithelium) => {
                unscoreable.push(id.clone());
                continue;
            }
            Err(e) => return Err(e),
        };
        let tc_true = match truth.as_ref().map(tc_score) {
            Some(Ok(v)) => Some(v),
            Some(Err(Error::NoEpithelium)) | None => None,
            Some(Err(e)) => return Err(e),
        };
        per_image.push(ImageScore { id: id.clone(), tc_cnn, tc_true });
    }
    let pairs: Vec<(f64, f64)> =
        per_image.iter().filter_map(|s| s.tc_true.map(|t| (100.0 * s.tc_cnn, 100.0 * t))).collect();
    let (p, t): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let concordance = match concordance(&p, &t) {
        Ok(c) => Some(c),
        Err(Error::InvalidInput(_)) | Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(TcScoreReport { per_image, unscoreable, concordance, bins: bin_report(&pairs) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::OTHER;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(labels: &[u8], h: usize, w: usize) -> LabelMask {
        LabelMask::new(Domain::A, h, w, labels.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let m = mask(&[0, 1, 2, 1], 2, 2);
        let r = f1_scores(&m, &m, AbsentClass::One).unwrap();
        assert_eq!((r.other, r.tc_negative, r.tc_positive, r.tc), (Some(1.0), Some(1.0), Some(1.0), Some(1.0)));
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn complement_misses_all_epithelium() {
        let truth = mask(&[0, 1, 1, 0], 2, 2);
        let pred = mask(&[1, 0, 0, 1], 2, 2);
        assert_eq!(f1_scores(&pred, &truth, AbsentClass::One).unwrap().tc, Some(0.0));
    }

    #[test]
    fn confusion_fixture_matches_counting() {
        let truth = mask(&[0, 0, 0, 0, 1, 1, 1, 2, 2, 2, 2, 255, 0, 1, 2, 255], 4, 4);
        let pred = mask(&[0, 0, 1, 2, 1, 1, 0, 2, 2, 1, 0, 2, 0, 2, 2, 0], 4, 4);
        // class 0: tp 3, fp 2 (truth 1->0, 2->0), fn 2 (0->1, 0->2)
        // class 1: tp 2, fp 2 (0->1, 2->1), fn 2 (1->0, 1->2)
        // class 2: tp 3, fp 2 (0->2, 1->2), fn 2 (2->1, 2->0)
        // tc: tp 7, fp 2 (0->1, 0->2), fn 2 (1->0, 2->0)
        let r = f1_scores(&pred, &truth, AbsentClass::One).unwrap();
        assert_eq!(r.other, Some(6.0 / 10.0));
        assert_eq!(r.tc_negative, Some(4.0 / 8.0));
        assert_eq!(r.tc_positive, Some(6.0 / 10.0));
        assert_eq!(r.tc, Some(14.0 / 18.0));
        assert!((r.mean - (0.6 + 0.5 + 0.6) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn absent_class_policy() {
        let m = mask(&[0, 1, 1, 0], 2, 2);
        let one = f1_scores(&m, &m, AbsentClass::One).unwrap();
        assert_eq!(one.tc_positive, Some(1.0));
        let excl = f1_scores(&m, &m, AbsentClass::Exclude).unwrap();
        assert_eq!(excl.tc_positive, None);
        assert_eq!(excl.mean, 1.0);
    }

    #[test]
    fn metric_errors() {
        let ignored = mask(&[255; 4], 2, 2);
        assert!(matches!(f1_scores(&ignored, &ignored, AbsentClass::One), Err(Error::UndefinedMetric(_))));
        assert!(matches!(
            f1_scores(&mask(&[0; 6], 2, 3), &mask(&[0; 6], 3, 2), AbsentClass::One),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn tc_score_examples() {
        let mut labels = vec![OTHER; 1000];
        labels[..30].fill(TC_POSITIVE);
        labels[30..100].fill(TC_NEGATIVE);
        assert!((tc_score(&mask(&labels, 10, 100)).unwrap() - 0.30).abs() < 1e-15);
        assert_eq!(tc_score(&mask(&[2, 2, 0, 255], 2, 2)).unwrap(), 1.0);
        assert!(matches!(tc_score(&mask(&[0, 255, 0, 0], 2, 2)), Err(Error::NoEpithelium)));
    }

    #[test]
    fn concordance_examples() {
        let t = [10.0, 20.0, 35.0, 80.0];
        let c = concordance(&t, &t).unwrap();
        assert!((c.lcc - 1.0).abs() < 1e-12 && (c.pcc - 1.0).abs() < 1e-12 && c.mae == 0.0);
        let shifted: Vec<f64> = t.iter().map(|v| v + 10.0).collect();
        let c = concordance(&shifted, &t).unwrap();
        assert!((c.pcc - 1.0).abs() < 1e-12 && c.lcc < 1.0 && (c.mae - 10.0).abs() < 1e-12);
        assert!(matches!(concordance(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(concordance(&[1.0, 2.0], &[1.0]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn concordance_matches_textbook_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..100.0)).collect();
        let t: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..100.0)).collect();
        let n = 20.0;
        let (mut sp, mut st) = (0.0, 0.0);
        for i in 0..20 {
            sp += p[i];
            st += t[i];
        }
        let (mp, mt) = (sp / n, st / n);
        let (mut sxx, mut syy, mut sxy, mut sad) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..20 {
            sxx += (p[i] - mp) * (p[i] - mp);
            syy += (t[i] - mt) * (t[i] - mt);
            sxy += (p[i] - mp) * (t[i] - mt);
            sad += (p[i] - t[i]).abs();
        }
        let pcc = sxy / (sxx.sqrt() * syy.sqrt());
        let lcc = 2.0 * sxy / n / (sxx / n + syy / n + (mp - mt) * (mp - mt));
        let c = concordance(&p, &t).unwrap();
        assert!((c.pcc - pcc).abs() < 1e-9 && (c.lcc - lcc).abs() < 1e-9 && (c.mae - sad / n).abs() < 1e-9);
    }

    #[test]
    fn bin_edges() {
        assert_eq!(bin_label(bin_index(0.5)), "TC<1");
        assert_eq!(bin_label(bin_index(100.0)), "TC=100");
        assert_eq!(bin_label(bin_index(10.0)), "10≤TC<20");
        assert_eq!(bin_label(bin_index(1.0)), "1≤TC<10");
        assert_eq!(bin_label(bin_index(99.99)), "90≤TC<100");
        let labels: Vec<String> = (0..BIN_COUNT).map(bin_label).collect();
        assert_eq!(labels.len(), 12);
        let report = bin_report(&[(12.0, 15.0), (18.0, 11.0), (50.0, 100.0)]);
        assert_eq!(report[2].count, 2);
        assert_eq!(report[2].mean, Some(15.0));
        assert_eq!(report[2].std, Some(3.0));
        assert_eq!(report[11].count, 1);
        assert_eq!(report[0].mean, None);
    }

    #[test]
    fn score_report_skips_unscoreable() {
        let items = vec![
            ("a".into(), mask(&[2, 1, 0, 0], 2, 2), Some(mask(&[2, 2, 1, 0], 2, 2))),
            ("b".into(), mask(&[0; 4], 2, 2), None),
            ("c".into(), mask(&[1, 1, 0, 0], 2, 2), Some(mask(&[2, 1, 1, 1], 2, 2))),
        ];
        let r = score_report(&items).unwrap();
        assert_eq!(r.unscoreable, ["b"]);
        assert_eq!(r.per_image.len(), 2);
        let c = r.concordance.unwrap();
        assert!((c.mae - (100.0 * (2.0 / 3.0 - 0.5) + 25.0) / 2.0).abs() < 1e-9);
    }

    fn model(seed: u64) -> Discriminator<f32> {
        let spec = crate::nn::DiscriminatorSpec { seg_resnet_blocks: 1, ..Default::default() };
        Discriminator::new(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn noise_image(seed: u64, h: usize, w: usize) -> ImagePatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImagePatch::new("img", Domain::A, h, w, (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_tile_equals_direct_prediction() {
        let d = model(1);
        let img = noise_image(2, 16, 16);
        let direct = argmax_mask(&d.predict(&[&img]).unwrap()[0].1, Domain::A);
        assert_eq!(predict_mask(&d, &img, 16, 0).unwrap(), direct);
    }

    #[test]
    fn zero_overlap_partitions_the_image() {
        let d = model(3);
        let img = noise_image(4, 32, 32);
        let tiled = predict_mask(&d, &img, 16, 0).unwrap();
        for (y0, x0) in [(0, 0), (0, 16), (16, 0), (16, 16)] {
            let part = argmax_mask(&d.predict(&[&crop(&img, y0, x0, 16)]).unwrap()[0].1, Domain::A);
            for y in 0..16 {
                for x in 0..16 {
                    assert_eq!(tiled.get(y0 + y, x0 + x), part.get(y, x));
                }
            }
        }
    }

    #[test]
    fn overlap_averages_identical_posteriors() {
        let mut d = model(5);
        // a zero final layer makes every posterior equal to the softmax of its bias
        let w = d.store.find("seg.up2.weight").unwrap();
        d.store.params[w].value.fill(0.0);
        let b = d.store.find("seg.up2.bias").unwrap();
        d.store.params[b].value.copy_from_slice(&[0.1, 0.5, 0.2]);
        let img = ImagePatch::filled("c", Domain::A, 48, 48, [0.6, 0.4, 0.7]);
        let a = predict_mask(&d, &img, 32, 16).unwrap();
        assert_eq!(a, predict_mask(&d, &img, 32, 0).unwrap());
        assert!(a.labels.iter().all(|l| *l == TC_NEGATIVE));
    }

    #[test]
    fn small_images_are_padded_and_cropped() {
        let d = model(6);
        let img = noise_image(7, 10, 12);
        let m = predict_mask(&d, &img, 16, 4).unwrap();
        assert_eq!((m.height, m.width), (10, 12));
        let p = predict_posterior(&d, &noise_image(8, 40, 24), 16, 4).unwrap();
        assert!(p.probs.chunks(3).all(|px| (px.iter().sum::<f32>() - 1.0).abs() < 1e-5));
        assert!(predict_mask(&d, &img, 16, 16).is_err());
    }

    proptest! {
        #[test]
        fn tc_score_ignores_other_pixels(labels in proptest::collection::vec(0u8..3, 16), relabel in proptest::collection::vec(prop_oneof![Just(0u8), Just(255u8)], 16)) {
            let m = mask(&labels, 4, 4);
            let mut other = labels.clone();
            for (l, r) in other.iter_mut().zip(&relabel) {
                if *l == 0 { *l = *r; }
            }
            match (tc_score(&m), tc_score(&mask(&other, 4, 4))) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false),
            }
        }

        #[test]
        fn binary_f1_is_symmetric(a in proptest::collection::vec(0u8..3, 16), b in proptest::collection::vec(0u8..3, 16)) {
            let (ma, mb) = (mask(&a, 4, 4), mask(&b, 4, 4));
            let x = f1_scores(&ma, &mb, AbsentClass::One).unwrap();
            let y = f1_scores(&mb, &ma, AbsentClass::One).unwrap();
            prop_assert_eq!(x.tc, y.tc);
        }

        #[test]
        fn matched_moments_give_equal_lcc_and_pcc(v in proptest::collection::vec(0.0f64..100.0, 3..20), seed in 0u64..100) {
            let mut w = v.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..w.len()).rev() {
                w.swap(i, rng.random_range(0..=i));
            }
            if let Ok(c) = concordance(&v, &w) {
                prop_assert!((c.lcc - c.pcc).abs() < 1e-9);
            }
        }

        #[test]
        fn mae_scales_with_percentages(v in proptest::collection::vec(0.0f64..1.0, 3..10), w in proptest::collection::vec(0.0f64..1.0, 3..10)) {
            let n = v.len().min(w.len());
            let (v, w) = (&v[..n], &w[..n]);
            let pv: Vec<f64> = v.iter().map(|x| 100.0 * x).collect();
            let pw: Vec<f64> = w.iter().map(|x| 100.0 * x).collect();
            if let (Ok(a), Ok(b)) = (concordance(v, w), concordance(&pv, &pw)) {
                prop_assert!((b.mae - 100.0 * a.mae).abs() < 1e-9);
            }
        }
    }
}
