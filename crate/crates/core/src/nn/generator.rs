use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{deconv_pad, key_channels, layer_name, same_pad, Builder, Conv, Norm, Residual, SelfAttention};
use super::params::{Bound, ParamStore};
use super::{image_batch, onehot_batch};
use crate::datamodel::{ImagePatch, LabelMask, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Real;

/// Mask-conditioned image-to-image generator: stride-2 encoder, residual
/// core, transposed-convolution decoder with a self-attention block at
/// half resolution, tanh output rescaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    /// Image plus one-hot mask channels.
    pub input_channels: usize,
    pub output_channels: usize,
    pub base_filters: usize,
    /// Cap on the channel count reached by the encoder.
    pub max_filters: usize,
    pub num_resnet_blocks: usize,
    pub use_self_attention: bool,
    pub attention_reduction: usize,
    pub kernel_size: usize,
    pub deconv_kernel: usize,
    pub out_kernel: usize,
    pub spectral_norm: bool,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            input_channels: 3 + NUM_CLASSES,
            output_channels: 3,
            base_filters: 8,
            max_filters: 64,
            num_resnet_blocks: 4,
            use_self_attention: true,
            attention_reduction: 8,
            kernel_size: 3,
            deconv_kernel: 4,
            out_kernel: 3,
            spectral_norm: true,
        }
    }
}

impl GeneratorSpec {
    /// Channel counts at full, half and quarter resolution.
    pub fn widths(&self) -> [usize; 3] {
        let f = |m: usize| (self.base_filters * m).min(self.max_filters).max(1);
        [f(1), f(2), f(4)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels <= self.output_channels || self.base_filters == 0 {
            return Err(Error::Config("generator needs image+mask input and at least one filter".into()));
        }
        if self.kernel_size.is_multiple_of(2) || self.out_kernel.is_multiple_of(2) {
            return Err(Error::Config("generator convolution kernels must be odd".into()));
        }
        deconv_pad(self.deconv_kernel)?;
        if self.use_self_attention {
            key_channels(self.widths()[1], self.attention_reduction)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Generator<T> {
    pub spec: GeneratorSpec,
    pub store: ParamStore<T>,
    stem: (Conv, Norm),
    down: Vec<(Conv, Norm)>,
    blocks: Vec<Residual>,
    up: Vec<(Conv, Norm)>,
    attention: Option<SelfAttention>,
    head: Conv,
}

impl<T: Real> Generator<T> {
    pub fn new<R: Rng + ?Sized>(spec: GeneratorSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let [c0, c1, c2] = spec.widths();
        let k = spec.kernel_size;
        let mut store = ParamStore::default();
        let mut b = Builder { store: &mut store, rng, spectral: spec.spectral_norm };
        let stem = (b.conv("stem", spec.input_channels, c0, k, 1, same_pad(k)), b.norm("stem.norm", c0));
        let down = [(c0, c1), (c1, c2)]
            .iter()
            .enumerate()
            .map(|(i, (ci, co))| {
                let name = layer_name("down", i);
                (b.conv(&name, *ci, *co, k, 2, same_pad(k)), b.norm(&alloc::format!("{name}.norm"), *co))
            })
            .collect();
        let blocks = (0..spec.num_resnet_blocks).map(|i| b.residual(&layer_name("res", i), c2, k)).collect();
        let dk = spec.deconv_kernel;
        let dp = deconv_pad(dk)?;
        let up = [(c2, c1), (c1, c0)]
            .iter()
            .enumerate()
            .map(|(i, (ci, co))| {
                let name = layer_name("up", i);
                (b.deconv(&name, *ci, *co, dk, 2, dp), b.norm(&alloc::format!("{name}.norm"), *co))
            })
            .collect();
        let attention =
            if spec.use_self_attention { Some(b.attention("attn", c1, spec.attention_reduction)?) } else { None };
        let head = b.conv("head", c0, spec.output_channels, spec.out_kernel, 1, same_pad(spec.out_kernel));
        Ok(Self { spec, store, stem, down, blocks, up, attention, head })
    }

    /// Record a forward pass. `image` is `[n, 3, h, w]`, `mask` the planar
    /// one-hot conditioning `[n, classes, h, w]`; output is `[n, 3, h, w]`
    /// in `[0, 1]`. `h` and `w` must be divisible by 4.
    pub fn forward(&self, g: &mut Graph<T>, b: &Bound, image: Var, mask: Var) -> Result<Var> {
        let [_, _, h, w] = g.shape(image);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::ShapeMismatch(alloc::format!("generator input {h}x{w} is not divisible by 4")));
        }
        let x = g.concat_channels(image, mask)?;
        if g.shape(x)[1] != self.spec.input_channels {
            return Err(Error::ShapeMismatch(alloc::format!(
                "generator expects {} input channels, got {}",
                self.spec.input_channels,
                g.shape(x)[1]
            )));
        }
        let s = &self.store;
        let x = self.stem.0.forward(g, s, b, x)?;
        let x = self.stem.1.forward(g, b, x)?;
        let mut x = g.relu(x);
        for (conv, norm) in &self.down {
            let y = conv.forward(g, s, b, x)?;
            let y = norm.forward(g, b, y)?;
            x = g.relu(y);
        }
        for block in &self.blocks {
            x = block.forward(g, s, b, x)?;
        }
        for (i, (conv, norm)) in self.up.iter().enumerate() {
            let y = conv.forward(g, s, b, x)?;
            let y = norm.forward(g, b, y)?;
            x = g.relu(y);
            if i == 0 {
                if let Some(attn) = &self.attention {
                    x = attn.forward(g, s, b, x)?;
                }
            }
        }
        let x = self.head.forward(g, s, b, x)?;
        let x = g.tanh(x);
        Ok(g.affine(x, 0.5, 0.5))
    }

    /// Translate a batch of patches conditioned on their masks. Output
    /// patches carry the opposite domain tag and the input ids.
    pub fn translate(&self, images: &[&ImagePatch], masks: &[&LabelMask]) -> Result<Vec<ImagePatch>> {
        let (shape, data) = image_batch::<T>(images)?;
        let onehot = onehot_batch::<T>(masks, shape)?;
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g, false);
        let x = g.constant(shape, data);
        let m = g.constant([shape[0], NUM_CLASSES, shape[2], shape[3]], onehot);
        let y = self.forward(&mut g, &bound, x, m)?;
        Ok(super::to_patches(g.value(y), shape, images))
    }
}
