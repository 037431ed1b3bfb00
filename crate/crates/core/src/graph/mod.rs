//! A small define-by-run reverse-mode autodiff engine over NCHW tensors.
//!
//! Every forward pass records its operations on a [`Graph`]; calling
//! [`Graph::backward`] walks the record in reverse. Nodes that do not depend
//! on a gradient-requiring leaf are never differentiated, so parameters bound
//! as constants cost nothing on the backward pass.

mod conv;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Real;
use conv::{col2im, im2col, Geometry};

/// Tensor shape as `[batch, channels, height, width]`.
pub type Shape = [usize; 4];

/// Lower clamp applied inside every logarithm.
pub const LOG_EPS: f64 = 1e-7;

pub(crate) fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, geo: Geometry, cols: Vec<T> },
    ConvTranspose { x: Var, w: Var, b: Option<Var>, geo: Geometry },
    SpectralNorm { w: Var, u: Vec<T>, v: Vec<T>, sigma: T, floored: bool },
    InstanceNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Affine(Var, T),
    Add(Var, Var),
    ScaleBy(Var, Var),
    Concat(Var, Var),
    Softmax(Var),
    Attention { q: Var, k: Var, v: Var, weights: Vec<T> },
    MeanLog { x: Var, complement: bool },
    MeanAbsDiff(Var, Var),
    MaskedCe { p: Var, labels: Vec<u8>, count: usize },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Vec<T>,
    shape: Shape,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every differentiable node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &str, a: &Shape, b: &Shape) -> Error {
    Error::ShapeMismatch(alloc::format!("{op}: {a:?} vs {b:?}"))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Vec<T>, shape: Shape, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node { value, shape, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, shape: Shape, value: Vec<T>) -> Var {
        assert_eq!(value.len(), numel(&shape), "constant shape/value mismatch");
        self.push(value, shape, Op::Leaf, false)
    }

    /// Leaf whose gradient is collected by [`Graph::backward`].
    pub fn param(&mut self, shape: Shape, value: Vec<T>) -> Var {
        assert_eq!(value.len(), numel(&shape), "param shape/value mismatch");
        self.push(value, shape, Op::Leaf, true)
    }

    /// Cross-correlation with weight `[out, in, k, k]` and optional bias `[1, out, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = self.shape(x);
        let [o, ci, k, k2] = self.shape(w);
        if ci != c || k != k2 {
            return Err(shape_err("conv2d", &self.shape(x), &self.shape(w)));
        }
        let geo = Geometry::new(c, h, wd, k, stride, pad)
            .ok_or_else(|| Error::ShapeMismatch(alloc::format!("conv2d: kernel {k} does not fit {h}x{wd}")))?;
        let rows = geo.col_rows();
        let plane = geo.col_cols();
        let keep_cols = self.nodes[w.0].needs_grad;
        let mut cols_all = if keep_cols { vec![T::zero(); n * rows * plane] } else { Vec::new() };
        let mut scratch = if keep_cols { Vec::new() } else { vec![T::zero(); rows * plane] };
        let mut out = vec![T::zero(); n * o * plane];
        for s in 0..n {
            let img = &self.nodes[x.0].value[s * c * h * wd..(s + 1) * c * h * wd];
            let cols =
                if keep_cols { &mut cols_all[s * rows * plane..(s + 1) * rows * plane] } else { &mut scratch[..] };
            im2col(&geo, img, cols);
            let dst = &mut out[s * o * plane..(s + 1) * o * plane];
            T::gemm(false, false, o, plane, rows, T::one(), &self.nodes[w.0].value, cols, T::zero(), dst);
        }
        if let Some(b) = b {
            if numel(&self.shape(b)) != o {
                return Err(shape_err("conv2d bias", &self.shape(b), &[1, o, 1, 1]));
            }
            add_channel_bias(&mut out, &self.nodes[b.0].value, n, o, plane);
        }
        let needs = self.grad_any(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        let shape = [n, o, geo.out_h, geo.out_w];
        Ok(self.push(out, shape, Op::Conv { x, w, b, geo, cols: cols_all }, needs))
    }

    /// Transposed convolution with weight `[in, out, k, k]`; output size is
    /// `(h - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = self.shape(x);
        let [ci, o, k, k2] = self.shape(w);
        if ci != c || k != k2 {
            return Err(shape_err("conv_transpose2d", &self.shape(x), &self.shape(w)));
        }
        let oh = ((h - 1) * stride + k).checked_sub(2 * pad);
        let ow = ((wd - 1) * stride + k).checked_sub(2 * pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::ShapeMismatch("conv_transpose2d: padding exceeds output".into()));
        };
        let geo = Geometry::new(o, oh, ow, k, stride, pad)
            .filter(|g| g.out_h == h && g.out_w == wd)
            .ok_or_else(|| Error::ShapeMismatch("conv_transpose2d: inconsistent geometry".into()))?;
        let rows = geo.col_rows();
        let plane = h * wd;
        let mut cols = vec![T::zero(); rows * plane];
        let mut out = vec![T::zero(); n * o * oh * ow];
        for s in 0..n {
            let src = &self.nodes[x.0].value[s * c * plane..(s + 1) * c * plane];
            T::gemm(true, false, rows, plane, c, T::one(), &self.nodes[w.0].value, src, T::zero(), &mut cols);
            col2im(&geo, &cols, &mut out[s * o * oh * ow..(s + 1) * o * oh * ow]);
        }
        if let Some(b) = b {
            if numel(&self.shape(b)) != o {
                return Err(shape_err("conv_transpose2d bias", &self.shape(b), &[1, o, 1, 1]));
            }
            add_channel_bias(&mut out, &self.nodes[b.0].value, n, o, oh * ow);
        }
        let needs = self.grad_any(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, [n, o, oh, ow], Op::ConvTranspose { x, w, b, geo }, needs))
    }

    /// `w / sigma` with `sigma = u^T W v` for fixed power-iteration vectors.
    /// `W` is viewed as `shape[0] x rest`.
    pub fn spectral_norm(&mut self, w: Var, u: &[T], v: &[T]) -> Result<Var> {
        let shape = self.shape(w);
        let rows = shape[0];
        let cols = numel(&shape) / rows.max(1);
        if u.len() != rows || v.len() != cols {
            return Err(Error::ShapeMismatch(alloc::format!(
                "spectral_norm: u/v lengths {}/{} for {rows}x{cols}",
                u.len(),
                v.len()
            )));
        }
        let wv = &self.nodes[w.0].value;
        let mut raw = T::zero();
        for i in 0..rows {
            let row = &wv[i * cols..(i + 1) * cols];
            let dot = row.iter().zip(v).fold(T::zero(), |acc, (a, b)| acc + *a * *b);
            raw += u[i] * dot;
        }
        let eps = T::lit(crate::nn::SPECTRAL_EPS);
        let floored = raw < eps;
        let sigma = if floored { eps } else { raw };
        let out: Vec<T> = wv.iter().map(|x| *x / sigma).collect();
        let needs = self.requires_grad(w);
        Ok(self.push(out, shape, Op::SpectralNorm { w, u: u.to_vec(), v: v.to_vec(), sigma, floored }, needs))
    }

    /// Per-sample, per-channel normalization with affine `[1, c, 1, 1]` parameters.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if numel(&self.shape(gamma)) != c || numel(&self.shape(beta)) != c {
            return Err(shape_err("instance_norm", &self.shape(x), &self.shape(gamma)));
        }
        let plane = h * w;
        let xs = &self.nodes[x.0].value;
        let gs = &self.nodes[gamma.0].value;
        let bs = &self.nodes[beta.0].value;
        let mut xhat = vec![T::zero(); xs.len()];
        let mut inv_std = vec![T::zero(); n * c];
        let mut out = vec![T::zero(); xs.len()];
        let m = T::lit(plane as f64);
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                let src = &xs[base..base + plane];
                let mean = src.iter().fold(T::zero(), |a, v| a + *v) / m;
                let var = src.iter().fold(T::zero(), |a, v| a + (*v - mean) * (*v - mean)) / m;
                let inv = T::one() / (var + T::lit(eps)).sqrt();
                inv_std[s * c + ch] = inv;
                for i in 0..plane {
                    let xh = (src[i] - mean) * inv;
                    xhat[base + i] = xh;
                    out[base + i] = gs[ch] * xh + bs[ch];
                }
            }
        }
        let needs = self.grad_any(&[x, gamma, beta]);
        Ok(self.push(out, [n, c, h, w], Op::InstanceNorm { x, gamma, beta, xhat, inv_std }, needs))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out: Vec<T> = self.nodes[x.0].value.iter().map(|v| f(*v)).collect();
        let needs = self.requires_grad(x);
        let shape = self.shape(x);
        self.push(out, shape, op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let a = T::lit(slope);
        self.unary(x, move |v| if v > T::zero() { v } else { a * v }, Op::LeakyRelu(x, a))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `scale * x + shift` for constant scalars.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (a, b) = (T::lit(scale), T::lit(shift));
        self.unary(x, move |v| a * v + b, Op::Affine(x, a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", &self.shape(a), &self.shape(b)));
        }
        let out: Vec<T> = self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| *x + *y).collect();
        let needs = self.grad_any(&[a, b]);
        let shape = self.shape(a);
        Ok(self.push(out, shape, Op::Add(a, b), needs))
    }

    /// Multiply every element of `x` by the one-element node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if numel(&self.shape(s)) != 1 {
            return Err(shape_err("scale_by", &self.shape(s), &[1, 1, 1, 1]));
        }
        let k = self.scalar(s);
        let out: Vec<T> = self.nodes[x.0].value.iter().map(|v| *v * k).collect();
        let needs = self.grad_any(&[x, s]);
        let shape = self.shape(x);
        Ok(self.push(out, shape, Op::ScaleBy(x, s), needs))
    }

    /// Channel-axis concatenation.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.shape(a);
        let [nb, cb, hb, wb] = self.shape(b);
        if n != nb || h != hb || w != wb {
            return Err(shape_err("concat_channels", &self.shape(a), &self.shape(b)));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for s in 0..n {
            out.extend_from_slice(&self.nodes[a.0].value[s * ca * plane..(s + 1) * ca * plane]);
            out.extend_from_slice(&self.nodes[b.0].value[s * cb * plane..(s + 1) * cb * plane]);
        }
        let needs = self.grad_any(&[a, b]);
        Ok(self.push(out, [n, ca + cb, h, w], Op::Concat(a, b), needs))
    }

    /// Softmax across the channel axis at every spatial position.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let plane = h * w;
        let xs = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); xs.len()];
        for s in 0..n {
            let base = s * c * plane;
            for p in 0..plane {
                let mut mx = T::neg_infinity();
                for ch in 0..c {
                    mx = mx.max(xs[base + ch * plane + p]);
                }
                let mut sum = T::zero();
                for ch in 0..c {
                    let e = (xs[base + ch * plane + p] - mx).exp();
                    out[base + ch * plane + p] = e;
                    sum += e;
                }
                for ch in 0..c {
                    out[base + ch * plane + p] /= sum;
                }
            }
        }
        let needs = self.requires_grad(x);
        self.push(out, [n, c, h, w], Op::Softmax(x), needs)
    }

    /// Dot-product attention over spatial positions. `q` and `k` are
    /// `[n, ck, h, w]`, `v` is `[n, cv, h, w]`; output position `i` is
    /// `sum_j softmax_j(q_i . k_j) v_j`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let [n, ck, h, w] = self.shape(q);
        let [nv, cv, hv, wv] = self.shape(v);
        if self.shape(k) != self.shape(q) || n != nv || h != hv || w != wv {
            return Err(shape_err("attention", &self.shape(q), &self.shape(v)));
        }
        let l = h * w;
        let mut weights = vec![T::zero(); n * l * l];
        let mut out = vec![T::zero(); n * cv * l];
        for s in 0..n {
            let qs = &self.nodes[q.0].value[s * ck * l..(s + 1) * ck * l];
            let ks = &self.nodes[k.0].value[s * ck * l..(s + 1) * ck * l];
            let vs = &self.nodes[v.0].value[s * cv * l..(s + 1) * cv * l];
            let a = &mut weights[s * l * l..(s + 1) * l * l];
            // scores = Q^T K  (l x l)
            T::gemm(true, false, l, l, ck, T::one(), qs, ks, T::zero(), a);
            for row in a.chunks_mut(l) {
                softmax_in_place(row);
            }
            // out = V A^T  (cv x l)
            T::gemm(false, true, cv, l, l, T::one(), vs, a, T::zero(), &mut out[s * cv * l..(s + 1) * cv * l]);
        }
        let needs = self.grad_any(&[q, k, v]);
        Ok(self.push(out, [n, cv, h, w], Op::Attention { q, k, v, weights }, needs))
    }

    /// Attention weights recorded by an [`Graph::attention`] node, `[n, l, l]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// `mean(ln(clamp(x)))`, or of `1 - x` when `complement` is set.
    pub fn mean_log(&mut self, x: Var, complement: bool) -> Var {
        let xs = &self.nodes[x.0].value;
        let total: f64 = xs.iter().map(|v| clamped_ln(arg(v.as_f64(), complement))).sum();
        let value = if xs.is_empty() { 0.0 } else { total / xs.len() as f64 };
        let needs = self.requires_grad(x);
        self.push(vec![T::lit(value)], [1, 1, 1, 1], Op::MeanLog { x, complement }, needs)
    }

    /// `mean(|a - b|)`.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mean_abs_diff", &self.shape(a), &self.shape(b)));
        }
        let xs = &self.nodes[a.0].value;
        let ys = &self.nodes[b.0].value;
        let total: f64 = xs.iter().zip(ys).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).sum();
        let value = if xs.is_empty() { 0.0 } else { total / xs.len() as f64 };
        let needs = self.grad_any(&[a, b]);
        Ok(self.push(vec![T::lit(value)], [1, 1, 1, 1], Op::MeanAbsDiff(a, b), needs))
    }

    /// Categorical cross-entropy of a channel-wise posterior `p` against
    /// per-pixel labels (`n*h*w`, sample-major), averaged over pixels whose
    /// label is below the channel count. Other labels are ignored; with no
    /// labeled pixel the value is zero.
    pub fn masked_cross_entropy(&mut self, p: Var, labels: &[u8]) -> Result<Var> {
        let [n, c, h, w] = self.shape(p);
        let plane = h * w;
        if labels.len() != n * plane {
            return Err(Error::ShapeMismatch(alloc::format!(
                "masked_cross_entropy: {} labels for {n}x{h}x{w}",
                labels.len()
            )));
        }
        let ps = &self.nodes[p.0].value;
        let mut total = 0.0;
        let mut count = 0usize;
        for (idx, &lab) in labels.iter().enumerate() {
            let lab = lab as usize;
            if lab >= c {
                continue;
            }
            let (s, pix) = (idx / plane, idx % plane);
            total -= clamped_ln(ps[(s * c + lab) * plane + pix].as_f64());
            count += 1;
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        let needs = self.requires_grad(p);
        Ok(self.push(vec![T::lit(value)], [1, 1, 1, 1], Op::MaskedCe { p, labels: labels.to_vec(), count }, needs))
    }

    /// `sum_i weight_i * term_i` over one-element nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        let mut needs = false;
        for (v, wt) in terms {
            if numel(&self.shape(*v)) != 1 {
                return Err(shape_err("weighted_sum", &self.shape(*v), &[1, 1, 1, 1]));
            }
            total += wt * self.scalar(*v).as_f64();
            needs |= self.requires_grad(*v);
        }
        let terms: Vec<(Var, T)> = terms.iter().map(|(v, w)| (*v, T::lit(*w))).collect();
        Ok(self.push(vec![T::lit(total)], [1, 1, 1, 1], Op::WeightedSum(terms), needs))
    }

    /// Reverse pass from a one-element `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(vec![T::one(); self.nodes[root.0].value.len()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop(node, &dy, &mut grads);
        }
        Gradients { grads }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backprop(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geo, cols } => {
                let [n, o, _, _] = node.shape;
                let rows = geo.col_rows();
                let plane = geo.col_cols();
                let img = geo.channels * geo.height * geo.width;
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        bias_grad(gb, dy, n, o, plane);
                    }
                }
                if let Some(gw) = self.slot(grads, *w) {
                    for s in 0..n {
                        let d = &dy[s * o * plane..(s + 1) * o * plane];
                        let c = &cols[s * rows * plane..(s + 1) * rows * plane];
                        T::gemm(false, true, o, rows, plane, T::one(), d, c, T::one(), gw);
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let wv = &self.nodes[w.0].value;
                    let mut dcols = vec![T::zero(); rows * plane];
                    let gx = self.slot(grads, *x).expect("needs grad");
                    for s in 0..n {
                        let d = &dy[s * o * plane..(s + 1) * o * plane];
                        T::gemm(true, false, rows, plane, o, T::one(), wv, d, T::zero(), &mut dcols);
                        col2im(geo, &dcols, &mut gx[s * img..(s + 1) * img]);
                    }
                }
            }
            Op::ConvTranspose { x, w, b, geo } => {
                let [n, o, oh, ow] = node.shape;
                let [_, c, h, wd] = self.nodes[x.0].shape;
                let rows = geo.col_rows();
                let plane = h * wd;
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        bias_grad(gb, dy, n, o, oh * ow);
                    }
                }
                let want_w = self.nodes[w.0].needs_grad;
                let want_x = self.nodes[x.0].needs_grad;
                let mut dcols = vec![T::zero(); rows * plane];
                for s in 0..n {
                    im2col(geo, &dy[s * o * oh * ow..(s + 1) * o * oh * ow], &mut dcols);
                    if want_w {
                        let xs = &self.nodes[x.0].value[s * c * plane..(s + 1) * c * plane];
                        let gw = self.slot(grads, *w).expect("needs grad");
                        T::gemm(false, true, c, rows, plane, T::one(), xs, &dcols, T::one(), gw);
                    }
                    if want_x {
                        let wv = &self.nodes[w.0].value;
                        let gx = self.slot(grads, *x).expect("needs grad");
                        T::gemm(
                            false,
                            false,
                            c,
                            plane,
                            rows,
                            T::one(),
                            wv,
                            &dcols,
                            T::one(),
                            &mut gx[s * c * plane..(s + 1) * c * plane],
                        );
                    }
                }
            }
            Op::SpectralNorm { w, u, v, sigma, floored } => {
                let Some(gw) = self.slot(grads, *w) else { return };
                let cols = v.len();
                let inner = if *floored {
                    T::zero()
                } else {
                    dy.iter().zip(&node.value).fold(T::zero(), |a, (g, wn)| a + *g * *wn)
                };
                for (i, ui) in u.iter().enumerate() {
                    for (j, vj) in v.iter().enumerate() {
                        let idx = i * cols + j;
                        gw[idx] += (dy[idx] - inner * *ui * *vj) / *sigma;
                    }
                }
            }
            Op::InstanceNorm { x, gamma, beta, xhat, inv_std } => {
                let [n, c, h, w] = node.shape;
                let plane = h * w;
                if let Some(gg) = self.slot(grads, *gamma) {
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * plane;
                            gg[ch] += (0..plane).fold(T::zero(), |a, i| a + dy[base + i] * xhat[base + i]);
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    bias_grad(gb, dy, n, c, plane);
                }
                if self.nodes[x.0].needs_grad {
                    let gs = &self.nodes[gamma.0].value;
                    let m = T::lit(plane as f64);
                    let gx = self.slot(grads, *x).expect("needs grad");
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * plane;
                            let mut sum_d = T::zero();
                            let mut sum_dx = T::zero();
                            for i in 0..plane {
                                let d = dy[base + i] * gs[ch];
                                sum_d += d;
                                sum_dx += d * xhat[base + i];
                            }
                            let inv = inv_std[s * c + ch];
                            for i in 0..plane {
                                let d = dy[base + i] * gs[ch];
                                gx[base + i] += inv / m * (m * d - sum_d - xhat[base + i] * sum_dx);
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xs = &self.nodes[x.0].value;
                if let Some(gx) = self.slot(grads, *x) {
                    for ((g, d), xv) in gx.iter_mut().zip(dy).zip(xs) {
                        if *xv > T::zero() {
                            *g += *d;
                        }
                    }
                }
            }
            Op::LeakyRelu(x, a) => {
                let xs = &self.nodes[x.0].value;
                if let Some(gx) = self.slot(grads, *x) {
                    for ((g, d), xv) in gx.iter_mut().zip(dy).zip(xs) {
                        *g += if *xv > T::zero() { *d } else { *a * *d };
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((g, d), y) in gx.iter_mut().zip(dy).zip(&node.value) {
                        *g += *d * (T::one() - *y * *y);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((g, d), y) in gx.iter_mut().zip(dy).zip(&node.value) {
                        *g += *d * *y * (T::one() - *y);
                    }
                }
            }
            Op::Affine(x, a) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (g, d) in gx.iter_mut().zip(dy) {
                        *g += *a * *d;
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.slot(grads, *v) {
                        for (g, d) in gv.iter_mut().zip(dy) {
                            *g += *d;
                        }
                    }
                }
            }
            Op::ScaleBy(x, s) => {
                let k = self.scalar(*s);
                if let Some(gs) = self.slot(grads, *s) {
                    let xs = &self.nodes[x.0].value;
                    gs[0] += dy.iter().zip(xs).fold(T::zero(), |a, (d, xv)| a + *d * *xv);
                }
                if let Some(gx) = self.slot(grads, *x) {
                    for (g, d) in gx.iter_mut().zip(dy) {
                        *g += *d * k;
                    }
                }
            }
            Op::Concat(a, b) => {
                let [n, _, h, w] = node.shape;
                let plane = h * w;
                let ca = self.nodes[a.0].shape[1];
                let cb = self.nodes[b.0].shape[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for s in 0..n {
                        let src = &dy[s * (ca + cb) * plane..(s * (ca + cb) + ca) * plane];
                        for (g, d) in ga[s * ca * plane..(s + 1) * ca * plane].iter_mut().zip(src) {
                            *g += *d;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for s in 0..n {
                        let src = &dy[(s * (ca + cb) + ca) * plane..(s + 1) * (ca + cb) * plane];
                        for (g, d) in gb[s * cb * plane..(s + 1) * cb * plane].iter_mut().zip(src) {
                            *g += *d;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let [n, c, h, w] = node.shape;
                let plane = h * w;
                let y = &node.value;
                if let Some(gx) = self.slot(grads, *x) {
                    for s in 0..n {
                        let base = s * c * plane;
                        for p in 0..plane {
                            let dot = (0..c)
                                .fold(T::zero(), |a, ch| a + dy[base + ch * plane + p] * y[base + ch * plane + p]);
                            for ch in 0..c {
                                let i = base + ch * plane + p;
                                gx[i] += y[i] * (dy[i] - dot);
                            }
                        }
                    }
                }
            }
            Op::Attention { q, k, v, weights } => {
                let [n, cv, h, w] = node.shape;
                let ck = self.nodes[q.0].shape[1];
                let l = h * w;
                let mut da = vec![T::zero(); l * l];
                for s in 0..n {
                    let a = &weights[s * l * l..(s + 1) * l * l];
                    let d = &dy[s * cv * l..(s + 1) * cv * l];
                    let vs = &self.nodes[v.0].value[s * cv * l..(s + 1) * cv * l];
                    if let Some(gv) = self.slot(grads, *v) {
                        // dV = dOut A
                        T::gemm(
                            false,
                            false,
                            cv,
                            l,
                            l,
                            T::one(),
                            d,
                            a,
                            T::one(),
                            &mut gv[s * cv * l..(s + 1) * cv * l],
                        );
                    }
                    let want_q = self.nodes[q.0].needs_grad;
                    let want_k = self.nodes[k.0].needs_grad;
                    if !(want_q || want_k) {
                        continue;
                    }
                    // dA = dOut^T V, then softmax backward row-wise.
                    T::gemm(true, false, l, l, cv, T::one(), d, vs, T::zero(), &mut da);
                    for (drow, arow) in da.chunks_mut(l).zip(a.chunks(l)) {
                        let dot = drow.iter().zip(arow).fold(T::zero(), |acc, (x, y)| acc + *x * *y);
                        for (dv, av) in drow.iter_mut().zip(arow) {
                            *dv = *av * (*dv - dot);
                        }
                    }
                    let qs = &self.nodes[q.0].value[s * ck * l..(s + 1) * ck * l];
                    let ks = &self.nodes[k.0].value[s * ck * l..(s + 1) * ck * l];
                    if want_q {
                        // dQ = K dS^T
                        let gq = self.slot(grads, *q).expect("needs grad");
                        T::gemm(
                            false,
                            true,
                            ck,
                            l,
                            l,
                            T::one(),
                            ks,
                            &da,
                            T::one(),
                            &mut gq[s * ck * l..(s + 1) * ck * l],
                        );
                    }
                    if want_k {
                        // dK = Q dS
                        let gk = self.slot(grads, *k).expect("needs grad");
                        T::gemm(
                            false,
                            false,
                            ck,
                            l,
                            l,
                            T::one(),
                            qs,
                            &da,
                            T::one(),
                            &mut gk[s * ck * l..(s + 1) * ck * l],
                        );
                    }
                }
            }
            Op::MeanLog { x, complement } => {
                let xs = &self.nodes[x.0].value;
                let scale = dy[0].as_f64() / xs.len().max(1) as f64;
                if let Some(gx) = self.slot(grads, *x) {
                    for (g, xv) in gx.iter_mut().zip(xs) {
                        let z = arg(xv.as_f64(), *complement);
                        if z > LOG_EPS {
                            let d = scale / z;
                            *g += T::lit(if *complement { -d } else { d });
                        }
                    }
                }
            }
            Op::MeanAbsDiff(a, b) => {
                let xs = &self.nodes[a.0].value;
                let ys = &self.nodes[b.0].value;
                let scale = dy[0] / T::lit(xs.len().max(1) as f64);
                for (v, sign) in [(a, T::one()), (b, -T::one())] {
                    if let Some(gv) = self.slot(grads, *v) {
                        for ((g, x), y) in gv.iter_mut().zip(xs).zip(ys) {
                            if x > y {
                                *g += sign * scale;
                            } else if x < y {
                                *g -= sign * scale;
                            }
                        }
                    }
                }
            }
            Op::MaskedCe { p, labels, count } => {
                if *count == 0 {
                    return;
                }
                let [_, c, h, w] = self.nodes[p.0].shape;
                let plane = h * w;
                let ps = &self.nodes[p.0].value;
                let scale = dy[0].as_f64() / *count as f64;
                if let Some(gp) = self.slot(grads, *p) {
                    for (idx, &lab) in labels.iter().enumerate() {
                        let lab = lab as usize;
                        if lab >= c {
                            continue;
                        }
                        let i = ((idx / plane) * c + lab) * plane + idx % plane;
                        let pv = ps[i].as_f64();
                        if pv > LOG_EPS {
                            gp[i] -= T::lit(scale / pv);
                        }
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for (v, wt) in terms {
                    if let Some(gv) = self.slot(grads, *v) {
                        gv[0] += dy[0] * *wt;
                    }
                }
            }
        }
    }
}

#[inline]
fn arg(x: f64, complement: bool) -> f64 {
    if complement {
        1.0 - x
    } else {
        x
    }
}

/// `ln(clamp(z, LOG_EPS, 1))`.
#[inline]
pub fn clamped_ln(z: f64) -> f64 {
    libm::log(z.clamp(LOG_EPS, 1.0))
}

#[inline]
fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().fold(T::neg_infinity(), |a, v| a.max(*v));
    for v in row.iter_mut() {
        *v -= mx;
    }
    T::exp_in_place(row);
    let sum = row.iter().fold(T::zero(), |a, v| a + *v);
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

fn add_channel_bias<T: Real>(out: &mut [T], bias: &[T], n: usize, c: usize, plane: usize) {
    for s in 0..n {
        for ch in 0..c {
            let b = bias[ch];
            for v in &mut out[(s * c + ch) * plane..(s * c + ch + 1) * plane] {
                *v += b;
            }
        }
    }
}

fn bias_grad<T: Real>(gb: &mut [T], dy: &[T], n: usize, c: usize, plane: usize) {
    for s in 0..n {
        for ch in 0..c {
            gb[ch] += dy[(s * c + ch) * plane..(s * c + ch + 1) * plane].iter().fold(T::zero(), |a, v| a + *v);
        }
    }
}

#[cfg(test)]
mod tests;
