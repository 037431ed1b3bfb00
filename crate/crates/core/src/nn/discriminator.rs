use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image_batch;
use super::layers::{deconv_pad, key_channels, layer_name, same_pad, Builder, Conv, Norm, Residual, SelfAttention};
use super::params::{Bound, ParamStore};
use crate::datamodel::{ClassPosterior, ImagePatch, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Real;

/// Dual-head discriminator: a shared stride-2 trunk feeding a patch-level
/// realism head and a segmentation head (residual blocks plus transposed
/// convolutions back to input resolution).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorSpec {
    pub input_channels: usize,
    pub base_filters: usize,
    pub max_filters: usize,
    /// Number of stride-2 trunk convolutions shared by both heads.
    pub shared_conv_layers: usize,
    pub kernel_size: usize,
    pub use_self_attention: bool,
    pub attention_reduction: usize,
    pub seg_resnet_blocks: usize,
    pub deconv_kernel: usize,
    pub num_classes: usize,
    /// Segmentation-only networks drop the realism head.
    pub source_head: bool,
    pub spectral_norm: bool,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            input_channels: 3,
            base_filters: 16,
            max_filters: 64,
            shared_conv_layers: 3,
            kernel_size: 4,
            use_self_attention: true,
            attention_reduction: 8,
            seg_resnet_blocks: 3,
            deconv_kernel: 4,
            num_classes: NUM_CLASSES,
            source_head: true,
            spectral_norm: true,
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorSpec {
    pub fn widths(&self) -> Vec<usize> {
        (0..self.shared_conv_layers).map(|i| (self.base_filters << i).min(self.max_filters).max(1)).collect()
    }

    /// Input sides must be divisible by this.
    pub fn stride_product(&self) -> usize {
        1 << self.shared_conv_layers
    }

    pub fn validate(&self) -> Result<()> {
        if self.shared_conv_layers == 0 || self.base_filters == 0 {
            return Err(Error::Config("discriminator needs a trunk and at least one filter".into()));
        }
        if self.num_classes != NUM_CLASSES {
            return Err(Error::Config(alloc::format!("segmentation head must predict {NUM_CLASSES} classes")));
        }
        deconv_pad(self.deconv_kernel)?;
        if self.use_self_attention {
            key_channels(self.widths()[0], self.attention_reduction)?;
        }
        Ok(())
    }
}

/// Output handles of a discriminator pass.
#[derive(Clone, Copy, Debug)]
pub struct DiscOutput {
    /// Patch realism scores in `(0, 1)`, `[n, 1, h/8, w/8]`.
    pub source: Option<Var>,
    /// Class posterior `[n, classes, h, w]`.
    pub posterior: Var,
}

/// Parameter indices by role, see [`Discriminator::param_groups`].
#[derive(Clone, Debug)]
pub struct ParamGroups {
    pub trunk: Vec<usize>,
    pub attention: Vec<usize>,
    pub source: Vec<usize>,
    pub seg: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub spec: DiscriminatorSpec,
    pub store: ParamStore<T>,
    trunk: Vec<Conv>,
    attention: Option<SelfAttention>,
    source: Option<Conv>,
    blocks: Vec<Residual>,
    decoder: Vec<(Conv, Option<Norm>)>,
}

impl<T: Real> Discriminator<T> {
    pub fn new<R: Rng + ?Sized>(spec: DiscriminatorSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let widths = spec.widths();
        let k = spec.kernel_size;
        let mut store = ParamStore::default();
        let mut b = Builder { store: &mut store, rng, spectral: spec.spectral_norm };
        let mut trunk = Vec::new();
        let mut cin = spec.input_channels;
        for (i, w) in widths.iter().enumerate() {
            trunk.push(b.conv(&layer_name("trunk", i), cin, *w, k, 2, same_pad(k)));
            cin = *w;
        }
        let attention = if spec.use_self_attention {
            Some(b.attention("attn", widths[0], spec.attention_reduction)?)
        } else {
            None
        };
        let deepest = *widths.last().expect("non-empty trunk");
        let source = spec.source_head.then(|| b.conv("source", deepest, 1, 3, 1, 1));
        let blocks = (0..spec.seg_resnet_blocks).map(|i| b.residual(&layer_name("seg.res", i), deepest, 3)).collect();
        let dk = spec.deconv_kernel;
        let dp = deconv_pad(dk)?;
        let mut decoder = Vec::new();
        let mut cin = deepest;
        for i in (0..widths.len()).rev() {
            let name = layer_name("seg.up", widths.len() - 1 - i);
            if i == 0 {
                decoder.push((b.deconv(&name, cin, spec.num_classes, dk, 2, dp), None));
            } else {
                let cout = widths[i - 1];
                let conv = b.deconv(&name, cin, cout, dk, 2, dp);
                decoder.push((conv, Some(b.norm(&alloc::format!("{name}.norm"), cout))));
                cin = cout;
            }
        }
        Ok(Self { spec, store, trunk, attention, source, blocks, decoder })
    }

    /// Store indices of the shared trunk convolutions, the trunk attention
    /// block, the realism head and the segmentation head.
    pub fn param_groups(&self) -> ParamGroups {
        let conv_ids = |c: &Conv| core::iter::once(c.weight).chain(c.bias);
        let trunk: Vec<usize> = self.trunk.iter().flat_map(conv_ids).collect();
        let attention: Vec<usize> = match &self.attention {
            Some(a) => {
                [&a.query, &a.key, &a.value].into_iter().flat_map(conv_ids).chain(core::iter::once(a.gamma)).collect()
            }
            None => Vec::new(),
        };
        let source: Vec<usize> = self.source.iter().flat_map(conv_ids).collect();
        let seg = (0..self.store.len())
            .filter(|i| !trunk.contains(i) && !attention.contains(i) && !source.contains(i))
            .collect();
        ParamGroups { trunk, attention, source, seg }
    }

    pub fn forward(&self, g: &mut Graph<T>, b: &Bound, image: Var) -> Result<DiscOutput> {
        let [_, c, h, w] = g.shape(image);
        let stride = self.spec.stride_product();
        if c != self.spec.input_channels || h % stride != 0 || w % stride != 0 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(alloc::format!(
                "discriminator expects {} channels and sides divisible by {stride}, got {c}x{h}x{w}",
                self.spec.input_channels
            )));
        }
        let s = &self.store;
        let slope = self.spec.leaky_slope;
        // Centre [0, 1] pixels on zero.
        let mut x = g.affine(image, 2.0, -1.0);
        for (i, conv) in self.trunk.iter().enumerate() {
            let y = conv.forward(g, s, b, x)?;
            x = g.leaky_relu(y, slope);
            if i == 0 {
                if let Some(attn) = &self.attention {
                    x = attn.forward(g, s, b, x)?;
                }
            }
        }
        let source = match &self.source {
            Some(conv) => {
                let logits = conv.forward(g, s, b, x)?;
                Some(g.sigmoid(logits))
            }
            None => None,
        };
        for block in &self.blocks {
            x = block.forward(g, s, b, x)?;
        }
        for (conv, norm) in &self.decoder {
            x = conv.forward(g, s, b, x)?;
            if let Some(norm) = norm {
                let y = norm.forward(g, b, x)?;
                x = g.relu(y);
            }
        }
        let posterior = g.softmax_channels(x);
        Ok(DiscOutput { source, posterior })
    }

    /// Inference on a batch of patches: realism scores (row-major per
    /// patch, empty without a source head) and class posteriors.
    pub fn predict(&self, images: &[&ImagePatch]) -> Result<Vec<(Vec<f32>, ClassPosterior)>> {
        let (shape, data) = image_batch::<T>(images)?;
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g, false);
        let x = g.constant(shape, data);
        let out = self.forward(&mut g, &bound, x)?;
        let [n, _, h, w] = shape;
        let plane = h * w;
        let classes = self.spec.num_classes;
        let post = g.value(out.posterior);
        let mut result = Vec::with_capacity(n);
        for i in 0..n {
            let scores = match out.source {
                Some(sv) => {
                    let per = g.value(sv).len() / n;
                    g.value(sv)[i * per..(i + 1) * per].iter().map(|v| v.as_f64() as f32).collect()
                }
                None => Vec::new(),
            };
            let planar: Vec<f32> =
                post[i * classes * plane..(i + 1) * classes * plane].iter().map(|v| v.as_f64() as f32).collect();
            result.push((scores, ClassPosterior::from_planar(h, w, &planar)));
        }
        Ok(result)
    }
}
