//! Graph builders for the joint translation and segmentation objective.
//!
//! The training step uses the generator and discriminator halves
//! separately; [`full_objective`] strings them together with every network
//! trainable, which is the graph the gradient check differentiates.

use alloc::vec::Vec;

use crate::datamodel::{ImagePatch, LabelMask, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{adversarial_d_graph, adversarial_g_graph, cycle_graph, LossWeights};
use crate::nn::{image_batch, label_batch, onehot_batch, Bound, NetworkBundle, NetworkId};
use crate::scalar::Real;

/// One training batch per domain. B masks are conditioning masks
/// (labels 0/1 or 0/2); A masks may contain ignore pixels.
#[derive(Clone, Debug, Default)]
pub struct Batch<'a> {
    pub images_a: Vec<&'a ImagePatch>,
    pub masks_a: Vec<&'a LabelMask>,
    pub images_b: Vec<&'a ImagePatch>,
    pub masks_b: Vec<&'a LabelMask>,
}

impl<'a> Batch<'a> {
    pub fn new(a: &[&'a (ImagePatch, LabelMask)], b: &[&'a (ImagePatch, LabelMask)]) -> Self {
        Self {
            images_a: a.iter().map(|e| &e.0).collect(),
            masks_a: a.iter().map(|e| &e.1).collect(),
            images_b: b.iter().map(|e| &e.0).collect(),
            masks_b: b.iter().map(|e| &e.1).collect(),
        }
    }

    pub fn labels_a(&self) -> Vec<u8> {
        label_batch(&self.masks_a)
    }

    pub fn labels_b(&self) -> Vec<u8> {
        label_batch(&self.masks_b)
    }
}

/// Graph handles of all four networks.
#[derive(Clone, Debug)]
pub struct BundleBound {
    pub g_ab: Bound,
    pub g_ba: Bound,
    pub d_a: Bound,
    pub d_b: Bound,
}

impl BundleBound {
    pub fn bind<T: Real>(g: &mut Graph<T>, bundle: &NetworkBundle<T>, trainable: bool) -> Self {
        let mut bind = |id| bundle.store(id).bind(g, trainable);
        Self {
            g_ab: bind(NetworkId::GAb),
            g_ba: bind(NetworkId::GBa),
            d_a: bind(NetworkId::DA),
            d_b: bind(NetworkId::DB),
        }
    }
}

/// Real inputs, translations and reconstructions of one batch.
#[derive(Clone, Copy, Debug)]
pub struct Translation {
    pub real_a: Var,
    pub real_b: Var,
    pub fake_a: Var,
    pub fake_b: Var,
    pub cyc_a: Var,
    pub cyc_b: Var,
}

/// `fake_b = G_AB(x_a | m_a)`, `fake_a = G_BA(x_b | m_b)` and both cycles,
/// each reconstruction conditioned on the mask of its source image.
pub fn translate_batch<T: Real>(
    g: &mut Graph<T>,
    bundle: &NetworkBundle<T>,
    g_ab: &Bound,
    g_ba: &Bound,
    batch: &Batch,
) -> Result<Translation> {
    let (shape_a, xa) = image_batch::<T>(&batch.images_a)?;
    let (shape_b, xb) = image_batch::<T>(&batch.images_b)?;
    let ma = onehot_batch::<T>(&batch.masks_a, shape_a)?;
    let mb = onehot_batch::<T>(&batch.masks_b, shape_b)?;
    let real_a = g.constant(shape_a, xa);
    let real_b = g.constant(shape_b, xb);
    let cond_a = g.constant([shape_a[0], NUM_CLASSES, shape_a[2], shape_a[3]], ma);
    let cond_b = g.constant([shape_b[0], NUM_CLASSES, shape_b[2], shape_b[3]], mb);
    let fake_b = bundle.g_ab.forward(g, g_ab, real_a, cond_a)?;
    let fake_a = bundle.g_ba.forward(g, g_ba, real_b, cond_b)?;
    let cyc_a = bundle.g_ba.forward(g, g_ba, fake_b, cond_a)?;
    let cyc_b = bundle.g_ab.forward(g, g_ab, fake_a, cond_b)?;
    Ok(Translation { real_a, real_b, fake_a, fake_b, cyc_a, cyc_b })
}

/// Graph handles of the generator objective and its parts. `seg` is absent
/// when the segmentation weight is zero.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms {
    pub gan_ab: Var,
    pub gan_ba: Var,
    pub cycle: Var,
    pub seg: Option<Var>,
    pub total: Var,
}

/// Non-saturating adversarial terms, L1 cycle and the segmentation loss of
/// the discriminators on the translations: `D_A` must recover the B mask
/// from `fake_a`, and with `symmetric` also `D_B` the A mask from `fake_b`.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective<T: Real>(
    g: &mut Graph<T>,
    bundle: &NetworkBundle<T>,
    d_a: &Bound,
    d_b: &Bound,
    tr: &Translation,
    batch: &Batch,
    weights: &LossWeights,
    symmetric: bool,
) -> Result<GeneratorTerms> {
    let on_fake_b = bundle.d_b.forward(g, d_b, tr.fake_b)?;
    let on_fake_a = bundle.d_a.forward(g, d_a, tr.fake_a)?;
    let source = |s: Option<Var>| s.ok_or_else(|| Error::Config("adversarial training needs a source head".into()));
    let gan_ab = adversarial_g_graph(g, source(on_fake_b.source)?)?;
    let gan_ba = adversarial_g_graph(g, source(on_fake_a.source)?)?;
    let cycle = cycle_graph(g, tr.real_a, tr.cyc_a, tr.real_b, tr.cyc_b)?;
    let seg = if weights.lambda_seg > 0.0 {
        let mut parts = Vec::with_capacity(2);
        parts.push((g.masked_cross_entropy(on_fake_a.posterior, &batch.labels_b())?, 1.0));
        if symmetric {
            parts.push((g.masked_cross_entropy(on_fake_b.posterior, &batch.labels_a())?, 1.0));
        }
        Some(g.weighted_sum(&parts)?)
    } else {
        None
    };
    let mut terms = alloc::vec![(gan_ab, 1.0), (gan_ba, 1.0), (cycle, weights.lambda_cycle)];
    if let Some(s) = seg {
        terms.push((s, weights.lambda_seg));
    }
    let total = g.weighted_sum(&terms)?;
    Ok(GeneratorTerms { gan_ab, gan_ba, cycle, seg, total })
}

/// Inputs of one discriminator update: images with the labels their
/// segmentation heads are trained on.
#[derive(Clone, Debug)]
pub struct DiscInputs {
    pub real_a: (Var, Vec<u8>),
    pub real_b: (Var, Vec<u8>),
    pub fake_a: (Var, Vec<u8>),
    pub fake_b: (Var, Vec<u8>),
}

#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorTerms {
    pub adv_a: Var,
    pub adv_b: Var,
    pub seg: Option<Var>,
    pub total: Var,
}

/// Adversarial loss of both discriminators plus the cross-entropy of their
/// segmentation heads on real and generated images.
pub fn discriminator_objective<T: Real>(
    g: &mut Graph<T>,
    bundle: &NetworkBundle<T>,
    d_a: &Bound,
    d_b: &Bound,
    inputs: &DiscInputs,
    weights: &LossWeights,
) -> Result<DiscriminatorTerms> {
    let real_a = bundle.d_a.forward(g, d_a, inputs.real_a.0)?;
    let fake_a = bundle.d_a.forward(g, d_a, inputs.fake_a.0)?;
    let real_b = bundle.d_b.forward(g, d_b, inputs.real_b.0)?;
    let fake_b = bundle.d_b.forward(g, d_b, inputs.fake_b.0)?;
    let source = |s: Option<Var>| s.ok_or_else(|| Error::Config("adversarial training needs a source head".into()));
    let adv_a = adversarial_d_graph(g, source(real_a.source)?, source(fake_a.source)?)?;
    let adv_b = adversarial_d_graph(g, source(real_b.source)?, source(fake_b.source)?)?;
    let seg = if weights.lambda_seg > 0.0 {
        let parts = [
            (g.masked_cross_entropy(real_a.posterior, &inputs.real_a.1)?, 1.0),
            (g.masked_cross_entropy(real_b.posterior, &inputs.real_b.1)?, 1.0),
            (g.masked_cross_entropy(fake_a.posterior, &inputs.fake_a.1)?, 1.0),
            (g.masked_cross_entropy(fake_b.posterior, &inputs.fake_b.1)?, 1.0),
        ];
        Some(g.weighted_sum(&parts)?)
    } else {
        None
    };
    let mut terms = alloc::vec![(adv_a, 1.0), (adv_b, 1.0)];
    if let Some(s) = seg {
        terms.push((s, weights.lambda_seg));
    }
    let total = g.weighted_sum(&terms)?;
    Ok(DiscriminatorTerms { adv_a, adv_b, seg, total })
}

/// Generator and discriminator objectives over one graph in which every
/// network is trainable and the discriminators see the live translations.
pub fn full_objective<T: Real>(
    g: &mut Graph<T>,
    bundle: &NetworkBundle<T>,
    bound: &BundleBound,
    batch: &Batch,
    weights: &LossWeights,
    symmetric: bool,
) -> Result<Var> {
    let tr = translate_batch(g, bundle, &bound.g_ab, &bound.g_ba, batch)?;
    let gen = generator_objective(g, bundle, &bound.d_a, &bound.d_b, &tr, batch, weights, symmetric)?;
    let inputs = DiscInputs {
        real_a: (tr.real_a, batch.labels_a()),
        real_b: (tr.real_b, batch.labels_b()),
        fake_a: (tr.fake_a, batch.labels_b()),
        fake_b: (tr.fake_b, batch.labels_a()),
    };
    let disc = discriminator_objective(g, bundle, &bound.d_a, &bound.d_b, &inputs, weights)?;
    g.weighted_sum(&[(gen.total, 1.0), (disc.total, 1.0)])
}
