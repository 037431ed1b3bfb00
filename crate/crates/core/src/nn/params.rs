use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::SPECTRAL_EPS;
use crate::error::{Error, Result};
use crate::graph::{Graph, Shape, Var};
use crate::scalar::Real;

/// A named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Shape,
    pub value: Vec<T>,
}

/// Persistent power-iteration vectors of one spectrally normalized weight.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState<T> {
    pub param: usize,
    pub u: Vec<T>,
    pub v: Vec<T>,
}

/// All parameters and spectral states of one network.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    pub params: Vec<Param<T>>,
    pub spectral: Vec<SpectralState<T>>,
}

/// Graph handles of a store's parameters, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, idx: usize) -> Var {
        self.vars[idx]
    }
}

impl<T: Real> ParamStore<T> {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn add(&mut self, name: String, shape: Shape, value: Vec<T>) -> usize {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.params.push(Param { name, shape, value });
        self.params.len() - 1
    }

    pub fn add_normal<R: Rng + ?Sized>(&mut self, name: String, shape: Shape, std: f64, rng: &mut R) -> usize {
        let dist = Normal::new(0.0, std).expect("finite std");
        let value = (0..shape.iter().product::<usize>()).map(|_| T::lit(dist.sample(rng))).collect();
        self.add(name, shape, value)
    }

    /// Register spectral normalization for parameter `param`, starting the
    /// power iteration from a random unit vector.
    pub fn add_spectral<R: Rng + ?Sized>(&mut self, param: usize, rng: &mut R) -> usize {
        let shape = self.params[param].shape;
        let rows = shape[0];
        let cols = self.params[param].value.len() / rows;
        let dist = Normal::new(0.0, 1.0).expect("unit normal");
        let mut u: Vec<T> = (0..rows).map(|_| T::lit(dist.sample(rng))).collect();
        normalize(&mut u);
        let mut state = SpectralState { param, u, v: vec![T::zero(); cols] };
        // one step so that v is consistent with u
        power_step(&self.params[param].value, rows, cols, &mut state.u, &mut state.v);
        self.spectral.push(state);
        self.spectral.len() - 1
    }

    /// Register every parameter on `g`; trainable parameters receive gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { g.param(p.shape, p.value.clone()) } else { g.constant(p.shape, p.value.clone()) })
            .collect();
        Bound { vars }
    }

    /// Advance every power iteration by `iters` steps.
    pub fn refresh_spectral(&mut self, iters: usize) {
        for state in &mut self.spectral {
            let p = &self.params[state.param];
            let rows = p.shape[0];
            let cols = p.value.len() / rows;
            for _ in 0..iters {
                power_step(&p.value, rows, cols, &mut state.u, &mut state.v);
            }
        }
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Copy values (and spectral vectors) from a store with identical layout.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.params.len() != other.params.len() || self.spectral.len() != other.spectral.len() {
            return Err(Error::ShapeMismatch("parameter stores differ in layout".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.shape != src.shape {
                return Err(Error::ShapeMismatch(alloc::format!("parameter {} vs {}", dst.name, src.name)));
            }
            dst.value.clone_from(&src.value);
        }
        for (dst, src) in self.spectral.iter_mut().zip(&other.spectral) {
            if dst.param != src.param || dst.u.len() != src.u.len() || dst.v.len() != src.v.len() {
                return Err(Error::ShapeMismatch("spectral states differ in layout".into()));
            }
            dst.u.clone_from(&src.u);
            dst.v.clone_from(&src.v);
        }
        Ok(())
    }
}

fn normalize<T: Real>(x: &mut [T]) -> T {
    let n = x.iter().fold(T::zero(), |a, v| a + *v * *v).sqrt();
    let d = n.max(T::lit(SPECTRAL_EPS));
    for v in x.iter_mut() {
        *v /= d;
    }
    n
}

/// `v <- normalize(W^T u)`, `u <- normalize(W v)`; returns `u^T W v`.
pub(crate) fn power_step<T: Real>(w: &[T], rows: usize, cols: usize, u: &mut [T], v: &mut [T]) -> T {
    for (j, vj) in v.iter_mut().enumerate() {
        *vj = (0..rows).fold(T::zero(), |a, i| a + w[i * cols + j] * u[i]);
    }
    normalize(v);
    for (i, ui) in u.iter_mut().enumerate() {
        *ui = w[i * cols..(i + 1) * cols].iter().zip(v.iter()).fold(T::zero(), |a, (x, y)| a + *x * *y);
    }
    normalize(u)
}

/// Divide a `rows x cols` weight by the power-iteration estimate of its
/// largest singular value. `u` persists across calls; the estimate is
/// floored at a tiny epsilon so a zero matrix stays zero.
pub fn spectral_normalize<T: Real>(
    weight: &[T],
    rows: usize,
    cols: usize,
    iters: usize,
    u: &mut Vec<T>,
) -> Result<Vec<T>> {
    if iters == 0 {
        return Err(Error::InvalidInput("spectral normalization needs at least one power iteration".into()));
    }
    if weight.len() != rows * cols || rows == 0 {
        return Err(Error::ShapeMismatch(alloc::format!("{} weights for {rows}x{cols}", weight.len())));
    }
    if u.len() != rows {
        // deterministic start when no state exists yet
        *u = (0..rows).map(|i| T::lit(1.0 + i as f64 * 1e-3)).collect();
        normalize(u);
    }
    let mut v = vec![T::zero(); cols];
    let mut sigma = T::zero();
    for _ in 0..iters {
        sigma = power_step(weight, rows, cols, u, &mut v);
    }
    let sigma = sigma.max(T::lit(SPECTRAL_EPS));
    Ok(weight.iter().map(|w| *w / sigma).collect())
}
