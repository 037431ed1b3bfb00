//! Building blocks shared by the generators and discriminators.

use alloc::format;
use alloc::string::String;
use alloc::vec;

use rand::Rng;

use super::params::{Bound, ParamStore};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Real;

pub(crate) const INIT_STD: f64 = 0.02;
pub(crate) const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub weight: usize,
    pub bias: Option<usize>,
    pub stride: usize,
    pub pad: usize,
    pub transposed: bool,
    pub spectral: Option<usize>,
}

impl Conv {
    pub fn weight<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, b: &Bound) -> Result<Var> {
        let w = b.get(self.weight);
        match self.spectral {
            Some(s) => {
                let st = &store.spectral[s];
                g.spectral_norm(w, &st.u, &st.v)
            }
            None => Ok(w),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, b: &Bound, x: Var) -> Result<Var> {
        let w = self.weight(g, store, b)?;
        let bias = self.bias.map(|i| b.get(i));
        if self.transposed {
            g.conv_transpose2d(x, w, bias, self.stride, self.pad)
        } else {
            g.conv2d(x, w, bias, self.stride, self.pad)
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    pub gamma: usize,
    pub beta: usize,
}

impl Norm {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        g.instance_norm(x, b.get(self.gamma), b.get(self.beta), NORM_EPS)
    }
}

/// Two 3x3 convolutions with a skip connection.
#[derive(Clone, Debug)]
pub(crate) struct Residual {
    pub first: Conv,
    pub first_norm: Norm,
    pub second: Conv,
    pub second_norm: Norm,
}

impl Residual {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, b: &Bound, x: Var) -> Result<Var> {
        let h = self.first.forward(g, store, b, x)?;
        let h = self.first_norm.forward(g, b, h)?;
        let h = g.relu(h);
        let h = self.second.forward(g, store, b, h)?;
        let h = self.second_norm.forward(g, b, h)?;
        g.add(x, h)
    }
}

/// Self-attention over spatial positions with a residual gate `gamma`
/// initialized to zero.
#[derive(Clone, Debug)]
pub(crate) struct SelfAttention {
    pub query: Conv,
    pub key: Conv,
    pub value: Conv,
    pub gamma: usize,
}

impl SelfAttention {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, b: &Bound, x: Var) -> Result<Var> {
        let q = self.query.forward(g, store, b, x)?;
        let k = self.key.forward(g, store, b, x)?;
        let v = self.value.forward(g, store, b, x)?;
        let attended = g.attention(q, k, v)?;
        let gated = g.scale_by(attended, b.get(self.gamma))?;
        g.add(x, gated)
    }
}

/// Allocates layers into a [`ParamStore`].
pub(crate) struct Builder<'a, T, R: ?Sized> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    pub spectral: bool,
}

impl<T: Real, R: Rng + ?Sized> Builder<'_, T, R> {
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Conv {
        let weight = self.store.add_normal(format!("{name}.weight"), [cout, cin, kernel, kernel], INIT_STD, self.rng);
        self.finish(name, weight, cout, stride, pad, false)
    }

    pub fn deconv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Conv {
        let weight = self.store.add_normal(format!("{name}.weight"), [cin, cout, kernel, kernel], INIT_STD, self.rng);
        self.finish(name, weight, cout, stride, pad, true)
    }

    fn finish(&mut self, name: &str, weight: usize, cout: usize, stride: usize, pad: usize, transposed: bool) -> Conv {
        let bias = Some(self.store.add(format!("{name}.bias"), [1, cout, 1, 1], vec![T::zero(); cout]));
        let spectral = self.spectral.then(|| self.store.add_spectral(weight, self.rng));
        Conv { weight, bias, stride, pad, transposed, spectral }
    }

    pub fn norm(&mut self, name: &str, channels: usize) -> Norm {
        let gamma = self.store.add(format!("{name}.gamma"), [1, channels, 1, 1], vec![T::one(); channels]);
        let beta = self.store.add(format!("{name}.beta"), [1, channels, 1, 1], vec![T::zero(); channels]);
        Norm { gamma, beta }
    }

    pub fn residual(&mut self, name: &str, channels: usize, kernel: usize) -> Residual {
        let pad = kernel / 2;
        Residual {
            first: self.conv(&format!("{name}.conv1"), channels, channels, kernel, 1, pad),
            first_norm: self.norm(&format!("{name}.norm1"), channels),
            second: self.conv(&format!("{name}.conv2"), channels, channels, kernel, 1, pad),
            second_norm: self.norm(&format!("{name}.norm2"), channels),
        }
    }

    pub fn attention(&mut self, name: &str, channels: usize, reduction: usize) -> Result<SelfAttention> {
        let keys = key_channels(channels, reduction)?;
        Ok(SelfAttention {
            query: self.conv(&format!("{name}.query"), channels, keys, 1, 1, 0),
            key: self.conv(&format!("{name}.key"), channels, keys, 1, 1, 0),
            value: self.conv(&format!("{name}.value"), channels, channels, 1, 1, 0),
            gamma: self.store.add(format!("{name}.gamma"), [1, 1, 1, 1], vec![T::zero()]),
        })
    }
}

pub(crate) fn key_channels(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || !channels.is_multiple_of(reduction) {
        return Err(Error::Config(format!(
            "attention over {channels} channels needs a reduction factor dividing it, got {reduction}"
        )));
    }
    Ok(channels / reduction)
}

pub(crate) fn same_pad(kernel: usize) -> usize {
    (kernel - 1) / 2
}

/// Padding making a stride-2 transposed convolution double the size.
pub(crate) fn deconv_pad(kernel: usize) -> Result<usize> {
    if kernel < 2 || !kernel.is_multiple_of(2) {
        return Err(Error::Config(format!("transposed-convolution kernel must be even and >= 2, got {kernel}")));
    }
    Ok((kernel - 2) / 2)
}

pub(crate) fn layer_name(prefix: &str, idx: usize) -> String {
    format!("{prefix}{idx}")
}
