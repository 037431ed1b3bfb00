//! Adversarial, cycle-consistency and segmentation objectives.
//!
//! Every loss exists twice: as a plain function over slices (used for
//! reporting and checked against independent loops in the tests) and as a
//! graph builder used during training. Both reduce by the mean within a
//! term and sum across the two domains.

use alloc::format;
use alloc::string::ToString;

use serde::{Deserialize, Serialize};

use crate::datamodel::{ClassPosterior, LabelMask, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::graph::{clamped_ln, Graph, Var};
use crate::scalar::Real;

/// Weights of the cycle and segmentation terms in the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_cycle: f64,
    pub lambda_seg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_cycle: 10.0, lambda_seg: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cycle >= 0.0 && self.lambda_seg >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".to_string()));
        }
        Ok(())
    }
}

/// Generator-side loss components of one step and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Adversarial loss of `G_AB` against `D_B`.
    pub gan_ab: f64,
    /// Adversarial loss of `G_BA` against `D_A`.
    pub gan_ba: f64,
    pub cycle: f64,
    pub seg: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(gan_ab: f64, gan_ba: f64, cycle: f64, seg: f64, weights: &LossWeights) -> Result<Self> {
        let total = total_loss(gan_ab, gan_ba, cycle, seg, weights)?;
        Ok(Self { gan_ab, gan_ba, cycle, seg, total })
    }

    pub fn is_finite(&self) -> bool {
        [self.gan_ab, self.gan_ba, self.cycle, self.seg, self.total].iter().all(|v| v.is_finite())
    }
}

fn mean_ln<T: Real>(xs: &[T], complement: bool) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let total: f64 = xs
        .iter()
        .map(|v| {
            let v = v.as_f64();
            clamped_ln(if complement { 1.0 - v } else { v })
        })
        .sum();
    total / xs.len() as f64
}

/// Discriminator objective `-[mean ln D(real) + mean ln(1 - D(fake))]`.
pub fn adversarial_loss_d<T: Real>(real_scores: &[T], fake_scores: &[T]) -> f64 {
    -(mean_ln(real_scores, false) + mean_ln(fake_scores, true))
}

/// Non-saturating generator objective `-mean ln D(fake)`.
pub fn adversarial_loss_g<T: Real>(fake_scores: &[T]) -> f64 {
    -mean_ln(fake_scores, false)
}

fn mean_abs<T: Real>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("cycle loss over {} vs {} values", a.len(), b.len())));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).sum::<f64>() / a.len() as f64)
}

/// L1 cycle-consistency: mean `|x_a - cyc_a|` plus mean `|x_b - cyc_b|`.
pub fn cycle_loss<T: Real>(x_a: &[T], cyc_a: &[T], x_b: &[T], cyc_b: &[T]) -> Result<f64> {
    Ok(mean_abs(x_a, cyc_a)? + mean_abs(x_b, cyc_b)?)
}

/// Cross-entropy of one domain averaged over its labeled pixels; zero when
/// nothing is labeled.
pub fn cross_entropy(truth: &LabelMask, pred: &ClassPosterior) -> Result<f64> {
    if truth.height != pred.height || truth.width != pred.width {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} vs posterior {}x{}",
            truth.height, truth.width, pred.height, pred.width
        )));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for (i, &l) in truth.labels.iter().enumerate() {
        if (l as usize) < NUM_CLASSES {
            total -= clamped_ln(pred.probs[i * NUM_CLASSES + l as usize] as f64);
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Segmentation loss: the two per-domain cross-entropies summed.
pub fn segmentation_loss(
    true_a: &LabelMask,
    pred_a: &ClassPosterior,
    true_b: &LabelMask,
    pred_b: &ClassPosterior,
) -> Result<f64> {
    Ok(cross_entropy(true_a, pred_a)? + cross_entropy(true_b, pred_b)?)
}

/// `gan_ab + gan_ba + lambda_cycle * cycle + lambda_seg * seg`.
pub fn total_loss(gan_ab: f64, gan_ba: f64, cycle: f64, seg: f64, weights: &LossWeights) -> Result<f64> {
    let parts = [gan_ab, gan_ba, cycle, seg];
    if parts.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { iteration: 0, snapshot: format!("non-finite loss parts {parts:?}") });
    }
    Ok(gan_ab + gan_ba + weights.lambda_cycle * cycle + weights.lambda_seg * seg)
}

/// Graph form of [`adversarial_loss_d`].
pub fn adversarial_d_graph<T: Real>(g: &mut Graph<T>, real: Var, fake: Var) -> Result<Var> {
    let r = g.mean_log(real, false);
    let f = g.mean_log(fake, true);
    g.weighted_sum(&[(r, -1.0), (f, -1.0)])
}

/// Graph form of [`adversarial_loss_g`].
pub fn adversarial_g_graph<T: Real>(g: &mut Graph<T>, fake: Var) -> Result<Var> {
    let f = g.mean_log(fake, false);
    g.weighted_sum(&[(f, -1.0)])
}

/// Graph form of [`cycle_loss`].
pub fn cycle_graph<T: Real>(g: &mut Graph<T>, x_a: Var, cyc_a: Var, x_b: Var, cyc_b: Var) -> Result<Var> {
    let a = g.mean_abs_diff(x_a, cyc_a)?;
    let b = g.mean_abs_diff(x_b, cyc_b)?;
    g.weighted_sum(&[(a, 1.0), (b, 1.0)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Domain;
    use alloc::vec;

    const LN2: f64 = core::f64::consts::LN_2;

    #[test]
    fn uninformative_discriminator() {
        let half = [0.5f64; 6];
        assert!((adversarial_loss_d(&half, &half) - 2.0 * LN2).abs() < 1e-12);
        assert!((adversarial_loss_g(&half) - LN2).abs() < 1e-12);
    }

    #[test]
    fn perfect_players_score_zero() {
        assert_eq!(adversarial_loss_d(&[1.0f64, 1.0], &[0.0f64, 0.0]), 0.0);
        assert_eq!(adversarial_loss_g(&[1.0f64; 3]), 0.0);
    }

    #[test]
    fn saturated_scores_stay_finite() {
        let l = adversarial_loss_d(&[0.0f64], &[1.0f64]);
        assert!(l.is_finite() && l > 0.0);
    }

    #[test]
    fn cycle_examples() {
        assert_eq!(cycle_loss(&[0.3f64, 0.4], &[0.3, 0.4], &[0.1], &[0.1]).unwrap(), 0.0);
        let v = cycle_loss(&[0.2f64, 0.8], &[0.1, 0.6], &[0.5], &[0.5]).unwrap();
        assert!((v - 0.15).abs() < 1e-12);
        assert!(cycle_loss(&[0.2f64], &[0.1, 0.6], &[], &[]).is_err());
    }

    #[test]
    fn single_pixel_cross_entropy() {
        let m = LabelMask::new(Domain::A, 1, 1, vec![1]).unwrap();
        let p = ClassPosterior::new(1, 1, vec![0.25, 0.25, 0.5]).unwrap();
        assert!((cross_entropy(&m, &p).unwrap() - (-(0.25f64).ln())).abs() < 1e-6);
        let ignored = LabelMask::new(Domain::B, 1, 1, vec![255]).unwrap();
        assert!((segmentation_loss(&m, &p, &ignored, &p).unwrap() - 4f64.ln() / 1.0).abs() < 1e-6);
        assert_eq!(segmentation_loss(&ignored, &p, &ignored, &p).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(1.0, 1.0, 0.5, 2.0, &w).unwrap(), 9.0);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, &w).unwrap(), 0.0);
        let off = LossWeights { lambda_cycle: 0.0, lambda_seg: 0.0 };
        assert_eq!(total_loss(0.7, 0.2, 3.0, 4.0, &off).unwrap(), 0.7 + 0.2);
        assert!(matches!(total_loss(f64::NAN, 0.0, 0.0, 0.0, &w), Err(Error::Divergence { .. })));
    }

    #[test]
    fn report_total_is_composed() {
        let w = LossWeights::default();
        let r = LossReport::new(0.6, 0.8, 0.12, 1.5, &w).unwrap();
        assert!((r.total - (0.6 + 0.8 + 10.0 * 0.12 + 1.5)).abs() < 1e-12);
    }

    #[test]
    fn negative_weights_rejected() {
        assert!(LossWeights { lambda_cycle: -1.0, lambda_seg: 1.0 }.validate().is_err());
    }
}
