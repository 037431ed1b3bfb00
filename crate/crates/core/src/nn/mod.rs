//! The four networks: two mask-conditioned generators and two dual-head
//! discriminators, all spectrally normalized and carrying self-attention.

mod discriminator;
mod generator;
mod layers;
mod params;

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use discriminator::{DiscOutput, Discriminator, DiscriminatorSpec, ParamGroups};
pub use generator::{Generator, GeneratorSpec};
pub use params::{spectral_normalize, Bound, Param, ParamStore, SpectralState};

use crate::datamodel::{encode_one_hot_planar, ImagePatch, LabelMask, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::graph::{Graph, Shape};
use crate::scalar::Real;

/// Floor on spectral-norm estimates.
pub const SPECTRAL_EPS: f64 = 1e-12;

/// Network shapes of a bundle.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
}

/// `G_AB`, `G_BA`, `D_A`, `D_B`.
#[derive(Clone, Debug)]
pub struct NetworkBundle<T> {
    /// Translates domain A (PD-L1-like) to B (CK-like).
    pub g_ab: Generator<T>,
    /// Translates domain B to A.
    pub g_ba: Generator<T>,
    /// Judges and segments domain-A images; the only network used for prediction.
    pub d_a: Discriminator<T>,
    pub d_b: Discriminator<T>,
}

/// Which network of a bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkId {
    GAb,
    GBa,
    DA,
    DB,
}

impl NetworkId {
    pub const ALL: [NetworkId; 4] = [NetworkId::GAb, NetworkId::GBa, NetworkId::DA, NetworkId::DB];

    pub fn name(self) -> &'static str {
        match self {
            NetworkId::GAb => "g_ab",
            NetworkId::GBa => "g_ba",
            NetworkId::DA => "d_a",
            NetworkId::DB => "d_b",
        }
    }
}

impl<T: Real> NetworkBundle<T> {
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            g_ab: Generator::new(arch.generator.clone(), &mut rng)?,
            g_ba: Generator::new(arch.generator.clone(), &mut rng)?,
            d_a: Discriminator::new(arch.discriminator.clone(), &mut rng)?,
            d_b: Discriminator::new(arch.discriminator.clone(), &mut rng)?,
        })
    }

    pub fn store(&self, id: NetworkId) -> &ParamStore<T> {
        match id {
            NetworkId::GAb => &self.g_ab.store,
            NetworkId::GBa => &self.g_ba.store,
            NetworkId::DA => &self.d_a.store,
            NetworkId::DB => &self.d_b.store,
        }
    }

    pub fn store_mut(&mut self, id: NetworkId) -> &mut ParamStore<T> {
        match id {
            NetworkId::GAb => &mut self.g_ab.store,
            NetworkId::GBa => &mut self.g_ba.store,
            NetworkId::DA => &mut self.d_a.store,
            NetworkId::DB => &mut self.d_b.store,
        }
    }

    pub fn param_count(&self) -> usize {
        NetworkId::ALL.iter().map(|id| self.store(*id).count()).sum()
    }
}

/// Stack patches into a planar `[n, 3, h, w]` buffer.
pub fn image_batch<T: Real>(images: &[&ImagePatch]) -> Result<(Shape, Vec<T>)> {
    let first = images.first().ok_or_else(|| Error::InvalidInput("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::ShapeMismatch(alloc::format!(
                "batch mixes {h}x{w} and {}x{} patches",
                img.height,
                img.width
            )));
        }
        data.extend(img.to_planar().into_iter().map(|v| T::lit(v as f64)));
    }
    Ok(([images.len(), 3, h, w], data))
}

/// Planar one-hot conditioning for a batch whose image shape is `shape`.
pub fn onehot_batch<T: Real>(masks: &[&LabelMask], shape: Shape) -> Result<Vec<T>> {
    let [n, _, h, w] = shape;
    if masks.len() != n {
        return Err(Error::ShapeMismatch(alloc::format!("{} masks for {n} images", masks.len())));
    }
    let mut data = Vec::with_capacity(n * NUM_CLASSES * h * w);
    for m in masks {
        if m.height != h || m.width != w {
            return Err(Error::ShapeMismatch(alloc::format!("mask {}x{} for {h}x{w} images", m.height, m.width)));
        }
        data.extend(encode_one_hot_planar(m, NUM_CLASSES)?.into_iter().map(|v| T::lit(v as f64)));
    }
    Ok(data)
}

/// Concatenated labels of a batch, sample-major.
pub fn label_batch(masks: &[&LabelMask]) -> Vec<u8> {
    masks.iter().flat_map(|m| m.labels.iter().copied()).collect()
}

pub(crate) fn to_patches<T: Real>(values: &[T], shape: Shape, sources: &[&ImagePatch]) -> Vec<ImagePatch> {
    let [n, c, h, w] = shape;
    let per = c * h * w;
    (0..n)
        .map(|i| {
            let planar: Vec<f32> = values[i * per..(i + 1) * per].iter().map(|v| v.as_f64() as f32).collect();
            ImagePatch::from_planar(sources[i].id.clone(), sources[i].domain.flipped(), h, w, &planar)
        })
        .collect()
}

/// Explicit parameters of a standalone self-attention block over `c`
/// channels with `ck` key channels. Weights are row-major `out x in`.
#[derive(Clone, Debug)]
pub struct AttentionParams<T> {
    pub query_w: Vec<T>,
    pub query_b: Vec<T>,
    pub key_w: Vec<T>,
    pub key_b: Vec<T>,
    pub value_w: Vec<T>,
    pub value_b: Vec<T>,
    pub gamma: T,
}

/// Self-attention over a `c x h x w` feature map (planar): returns
/// `features + gamma * attention(features)` and the `hw x hw` attention
/// weights (row = query position).
pub fn self_attention<T: Real>(
    features: &[T],
    dims: [usize; 3],
    params: &AttentionParams<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    let [c, h, w] = dims;
    if features.len() != c * h * w || c == 0 {
        return Err(Error::ShapeMismatch(alloc::format!("{} features for {c}x{h}x{w}", features.len())));
    }
    let ck = params.query_w.len() / c;
    if ck == 0
        || params.query_w.len() != ck * c
        || params.key_w.len() != ck * c
        || params.query_b.len() != ck
        || params.key_b.len() != ck
        || params.value_w.len() != c * c
        || params.value_b.len() != c
    {
        return Err(Error::Config("self-attention parameter shapes are inconsistent".into()));
    }
    if c % ck != 0 {
        return Err(Error::Config(alloc::format!("{ck} key channels do not divide {c} channels")));
    }
    let mut g = Graph::new();
    let x = g.constant([1, c, h, w], features.to_vec());
    let conv = |g: &mut Graph<T>, wts: &[T], bias: &[T], out: usize| {
        let wv = g.constant([out, c, 1, 1], wts.to_vec());
        let bv = g.constant([1, out, 1, 1], bias.to_vec());
        g.conv2d(x, wv, Some(bv), 1, 0)
    };
    let q = conv(&mut g, &params.query_w, &params.query_b, ck)?;
    let k = conv(&mut g, &params.key_w, &params.key_b, ck)?;
    let v = conv(&mut g, &params.value_w, &params.value_b, c)?;
    let att = g.attention(q, k, v)?;
    let gamma = g.constant([1, 1, 1, 1], vec![params.gamma]);
    let gated = g.scale_by(att, gamma)?;
    let out = g.add(x, gated)?;
    let weights = g.attention_weights(att).expect("attention node").to_vec();
    Ok((g.value(out).to_vec(), weights))
}
