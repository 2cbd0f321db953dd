use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::objective::ScalarObjective;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One layer of a feedforward classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    /// Valid (unpadded) convolution over a `[channels, height, width]` input.
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Relu,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Relu => "relu",
        }
    }

    /// `(weight_len, bias_len)` for this layer.
    pub fn param_sizes(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense { in_dim, out_dim } => (in_dim * out_dim, out_dim),
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => (out_ch * in_ch * kernel * kernel, out_ch),
            LayerSpec::Flatten | LayerSpec::Relu => (0, 0),
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { in_dim, .. } => in_dim,
            LayerSpec::Conv2d { in_ch, kernel, .. } => in_ch * kernel * kernel,
            _ => 1,
        }
    }

    /// Output shape for a given input shape, or `None` when they do not chain.
    pub fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Dense { in_dim, out_dim } => {
                (input == [in_dim] && in_dim > 0 && out_dim > 0).then(|| vec![out_dim])
            }
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
            } => {
                if input.len() != 3 || input[0] != in_ch || kernel == 0 || stride == 0 || out_ch == 0
                {
                    return None;
                }
                let (h, w) = (input[1], input[2]);
                if h < kernel || w < kernel {
                    return None;
                }
                Some(vec![out_ch, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerSpec::Flatten => Some(vec![input.iter().product()]),
            LayerSpec::Relu => Some(input.to_vec()),
        }
    }
}

/// Weight and bias buffers of one layer; both empty for parameterless layers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerParams {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerParams {
    pub fn zeros_like(other: &LayerParams) -> Self {
        Self {
            weight: vec![0.0; other.weight.len()],
            bias: vec![0.0; other.bias.len()],
        }
    }

    fn add_assign(&mut self, other: &LayerParams) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.weight.iter_mut().for_each(|v| *v *= c);
        self.bias.iter_mut().for_each(|v| *v *= c);
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(&self.bias)
    }
}

/// Per-layer parameter gradients, laid out like [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerParams>,
}

impl ParamGrads {
    pub fn zeros_for(net: &Network) -> Self {
        Self {
            layers: net.params.iter().map(LayerParams::zeros_like).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
    }

    /// `self += c * other`
    pub fn add_scaled(&mut self, c: f64, other: &ParamGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += c * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += c * y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.layers.iter_mut().for_each(|l| l.scale(c));
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.values().all(|v| v.is_finite()))
    }
}

/// Activations cached by a forward pass: `activations[0]` is the input and
/// `activations[i + 1]` the output of layer `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn input(&self) -> &[f64] {
        &self.activations[0]
    }

    pub fn logits(&self) -> &[f64] {
        self.activations.last().expect("trace always holds the input")
    }
}

/// Forward activations for a batch of `n` samples; each buffer is
/// row-major `n x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTrace {
    pub n: usize,
    pub activations: Vec<Vec<f64>>,
}

impl BatchTrace {
    pub fn logits(&self, k: usize) -> &[f64] {
        let z = self.activations.last().expect("trace always holds the input");
        let c = z.len() / self.n;
        &z[k * c..(k + 1) * c]
    }
}

/// Result of differentiating a scalar objective with respect to the input.
#[derive(Debug, Clone)]
pub struct InputGradient {
    pub value: f64,
    pub grad: Tensor,
    /// Set when the objective has a kink at this point and `grad` is the
    /// declared subgradient (smallest-index tie-break).
    pub subgradient: bool,
}

/// A feedforward classifier. Immutable once built; training replaces params.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
    pub(crate) params: Vec<LayerParams>,
    pub provenance: BTreeMap<String, String>,
}

/// Samples per work unit when reducing batch gradients. Fixed so that the
/// summation order does not depend on the thread count.
pub(crate) const GRAD_CHUNK: usize = 32;

impl Network {
    /// Validates the layer chain and attaches parameters.
    pub fn new(
        input_shape: Vec<usize>,
        num_classes: usize,
        layers: Vec<LayerSpec>,
        params: Vec<LayerParams>,
    ) -> Result<Self> {
        let shapes = validate_chain(&input_shape, num_classes, &layers)?;
        if params.len() != layers.len() {
            return Err(Error::Architecture(format!(
                "{} layers but {} parameter blocks",
                layers.len(),
                params.len()
            )));
        }
        for (i, (spec, p)) in layers.iter().zip(&params).enumerate() {
            let (w, b) = spec.param_sizes();
            if p.weight.len() != w || p.bias.len() != b {
                return Err(Error::Architecture(format!(
                    "layer {i} ({}) expects {w} weights and {b} biases, got {} and {}",
                    spec.name(),
                    p.weight.len(),
                    p.bias.len()
                )));
            }
            if p.values().any(|v| !v.is_finite()) {
                return Err(Error::Architecture(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(Self {
            input_shape,
            num_classes,
            layers,
            shapes,
            params,
            provenance: BTreeMap::new(),
        })
    }

    /// He-normal weights, zero biases.
    pub fn init<R: Rng>(
        input_shape: Vec<usize>,
        num_classes: usize,
        layers: Vec<LayerSpec>,
        rng: &mut R,
    ) -> Result<Self> {
        validate_chain(&input_shape, num_classes, &layers)?;
        let params = layers
            .iter()
            .map(|spec| {
                let (w, b) = spec.param_sizes();
                let std = (2.0 / spec.fan_in() as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                LayerParams {
                    weight: (0..w).map(|_| normal.sample(rng)).collect(),
                    bias: vec![0.0; b],
                }
            })
            .collect();
        Self::new(input_shape, num_classes, layers, params)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    /// Replaces parameters, keeping the architecture.
    pub fn set_params(&mut self, params: Vec<LayerParams>) -> Result<()> {
        let net = Network::new(
            self.input_shape.clone(),
            self.num_classes,
            self.layers.clone(),
            params,
        )?;
        self.params = net.params;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [LayerParams] {
        &mut self.params
    }

    fn check_input(&self, x: &[f64], shape: Option<&[usize]>) -> Result<()> {
        let bad_shape = shape.is_some_and(|s| s != self.input_shape.as_slice());
        if bad_shape || x.len() != self.input_len() {
            return Err(Error::Shape {
                expected: self.input_shape.clone(),
                actual: shape.map(<[usize]>::to_vec).unwrap_or_else(|| vec![x.len()]),
            });
        }
        if let Some(index) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(())
    }

    pub(crate) fn check_tensor(&self, x: &Tensor) -> Result<()> {
        self.check_input(x.data(), Some(x.shape()))
    }

    /// Forward pass returning the logits and the activations needed for a
    /// reverse pass.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ForwardTrace)> {
        self.check_input(x.data(), Some(x.shape()))?;
        let trace = self.trace(x.data())?;
        let logits = Tensor::from_parts(vec![self.num_classes], trace.logits().to_vec());
        Ok((logits, trace))
    }

    /// Forward pass on a flat input buffer.
    pub fn trace(&self, x: &[f64]) -> Result<ForwardTrace> {
        self.check_input(x, None)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for (i, spec) in self.layers.iter().enumerate() {
            let input = &activations[i];
            let out = self.layer_forward(i, spec, input);
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericOverflow {
                    layer: i,
                    kind: spec.name().to_string(),
                });
            }
            activations.push(out);
        }
        Ok(ForwardTrace { activations })
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut trace = self.trace(x)?;
        Ok(trace.activations.pop().expect("non-empty trace"))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(crate::tensor::argmax(&self.logits(x)?))
    }

    fn layer_forward(&self, i: usize, spec: &LayerSpec, x: &[f64]) -> Vec<f64> {
        let p = &self.params[i];
        match *spec {
            LayerSpec::Dense { in_dim, out_dim } => (0..out_dim)
                .map(|o| p.bias[o] + dot(&p.weight[o * in_dim..(o + 1) * in_dim], x))
                .collect(),
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
            } => {
                let (h, w) = (self.shapes[i][1], self.shapes[i][2]);
                let (oh, ow) = (self.shapes[i + 1][1], self.shapes[i + 1][2]);
                let mut out = vec![0.0; out_ch * oh * ow];
                for oc in 0..out_ch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = p.bias[oc];
                            for ic in 0..in_ch {
                                for ky in 0..kernel {
                                    let row = ic * h * w + (oy * stride + ky) * w + ox * stride;
                                    let wrow = ((oc * in_ch + ic) * kernel + ky) * kernel;
                                    acc += dot(
                                        &p.weight[wrow..wrow + kernel],
                                        &x[row..row + kernel],
                                    );
                                }
                            }
                            out[(oc * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
                out
            }
            LayerSpec::Flatten => x.to_vec(),
            LayerSpec::Relu => x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        }
    }

    /// Reverse pass. Returns `d objective / d input` when `want_input` is set
    /// and accumulates parameter gradients into `param_grads` when given.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_logits: &[f64],
        want_input: bool,
        mut param_grads: Option<&mut ParamGrads>,
    ) -> Vec<f64> {
        let mut grad = grad_logits.to_vec();
        for i in (0..self.layers.len()).rev() {
            let x = &trace.activations[i];
            let need_dx = want_input || i > 0;
            let pg = param_grads.as_deref_mut().map(|g| &mut g.layers[i]);
            grad = self.layer_backward(i, x, &grad, need_dx, pg);
        }
        if want_input {
            grad
        } else {
            Vec::new()
        }
    }

    fn layer_backward(
        &self,
        i: usize,
        x: &[f64],
        g: &[f64],
        need_dx: bool,
        pg: Option<&mut LayerParams>,
    ) -> Vec<f64> {
        let p = &self.params[i];
        match self.layers[i] {
            LayerSpec::Dense { in_dim, out_dim } => {
                let mut dx = vec![0.0; if need_dx { in_dim } else { 0 }];
                let mut pg = pg;
                for o in 0..out_dim {
                    let go = g[o];
                    if go == 0.0 {
                        continue;
                    }
                    let row = &p.weight[o * in_dim..(o + 1) * in_dim];
                    if need_dx {
                        axpy(go, row, &mut dx);
                    }
                    if let Some(pg) = pg.as_deref_mut() {
                        axpy(go, x, &mut pg.weight[o * in_dim..(o + 1) * in_dim]);
                        pg.bias[o] += go;
                    }
                }
                dx
            }
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
            } => {
                let (h, w) = (self.shapes[i][1], self.shapes[i][2]);
                let (oh, ow) = (self.shapes[i + 1][1], self.shapes[i + 1][2]);
                let mut dx = vec![0.0; if need_dx { x.len() } else { 0 }];
                let mut pg = pg;
                for oc in 0..out_ch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g[(oc * oh + oy) * ow + ox];
                            if go == 0.0 {
                                continue;
                            }
                            if let Some(pg) = pg.as_deref_mut() {
                                pg.bias[oc] += go;
                            }
                            for ic in 0..in_ch {
                                for ky in 0..kernel {
                                    let row = ic * h * w + (oy * stride + ky) * w + ox * stride;
                                    let wrow = ((oc * in_ch + ic) * kernel + ky) * kernel;
                                    if need_dx {
                                        axpy(
                                            go,
                                            &p.weight[wrow..wrow + kernel],
                                            &mut dx[row..row + kernel],
                                        );
                                    }
                                    if let Some(pg) = pg.as_deref_mut() {
                                        axpy(
                                            go,
                                            &x[row..row + kernel],
                                            &mut pg.weight[wrow..wrow + kernel],
                                        );
                                    }
                                }
                            }
                        }
                    }
                }
                dx
            }
            LayerSpec::Flatten => g.to_vec(),
            // subgradient 0 at the kink
            LayerSpec::Relu => x
                .iter()
                .zip(g)
                .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                .collect(),
        }
    }

    /// Forward pass over a batch. Dense layers run as one matrix product;
    /// per-sample results agree with [`Network::trace`] up to rounding.
    pub fn trace_batch(&self, xs: &[&[f64]]) -> Result<BatchTrace> {
        let n = xs.len();
        let d = self.input_len();
        let mut input = Vec::with_capacity(n * d);
        for x in xs {
            self.check_input(x, None)?;
            input.extend_from_slice(x);
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input);
        for (i, spec) in self.layers.iter().enumerate() {
            let x = &activations[i];
            let out = match *spec {
                LayerSpec::Dense { in_dim, out_dim } => {
                    let p = &self.params[i];
                    let mut y = Vec::with_capacity(n * out_dim);
                    for _ in 0..n {
                        y.extend_from_slice(&p.bias);
                    }
                    // Y = X W^T + b
                    gemm(n, in_dim, out_dim, x, (in_dim, 1), &p.weight, (1, in_dim), &mut y, (out_dim, 1));
                    y
                }
                LayerSpec::Relu => x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
                LayerSpec::Flatten => x.clone(),
                LayerSpec::Conv2d { out_ch, .. } => {
                    let p = &self.params[i];
                    let din = x.len() / n.max(1);
                    let pos = self.shapes[i + 1][1] * self.shapes[i + 1][2];
                    let kk = p.weight.len() / out_ch;
                    let mut y = Vec::with_capacity(n * out_ch * pos);
                    for _ in 0..n {
                        for &b in &p.bias {
                            y.extend(std::iter::repeat_n(b, pos));
                        }
                    }
                    let mut patches = Vec::new();
                    for k in 0..n {
                        self.im2col(i, &x[k * din..(k + 1) * din], &mut patches);
                        // Y_k^T (pos x out_ch) = P W^T, stored channel-major
                        let yk = &mut y[k * out_ch * pos..(k + 1) * out_ch * pos];
                        gemm(pos, kk, out_ch, &patches, (kk, 1), &p.weight, (1, kk), yk, (1, pos));
                    }
                    y
                }
            };
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericOverflow {
                    layer: i,
                    kind: spec.name().to_string(),
                });
            }
            activations.push(out);
        }
        Ok(BatchTrace { n, activations })
    }

    /// Logits for every input in `xs`.
    pub fn logits_batch(&self, xs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let trace = self.trace_batch(xs)?;
        Ok((0..xs.len()).map(|k| trace.logits(k).to_vec()).collect())
    }

    /// Batched reverse pass; `grad_logits` is row-major `n x classes`.
    /// Returns the row-major input gradients when `want_input` is set.
    pub fn backward_batch(
        &self,
        trace: &BatchTrace,
        grad_logits: &[f64],
        want_input: bool,
        mut param_grads: Option<&mut ParamGrads>,
    ) -> Vec<f64> {
        let n = trace.n;
        let mut grad = grad_logits.to_vec();
        for i in (0..self.layers.len()).rev() {
            let x = &trace.activations[i];
            let need_dx = want_input || i > 0;
            let pg = param_grads.as_deref_mut().map(|g| &mut g.layers[i]);
            grad = match self.layers[i] {
                LayerSpec::Dense { in_dim, out_dim } => {
                    let p = &self.params[i];
                    if let Some(pg) = pg {
                        // dW += G^T X, db += column sums of G
                        gemm(out_dim, n, in_dim, &grad, (1, out_dim), x, (in_dim, 1), &mut pg.weight, (in_dim, 1));
                        for row in grad.chunks(out_dim) {
                            for (b, g) in pg.bias.iter_mut().zip(row) {
                                *b += g;
                            }
                        }
                    }
                    if need_dx {
                        let mut dx = vec![0.0; n * in_dim];
                        gemm(n, out_dim, in_dim, &grad, (out_dim, 1), &p.weight, (in_dim, 1), &mut dx, (in_dim, 1));
                        dx
                    } else {
                        Vec::new()
                    }
                }
                LayerSpec::Relu => x
                    .iter()
                    .zip(&grad)
                    .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect(),
                LayerSpec::Flatten => grad,
                LayerSpec::Conv2d { out_ch, .. } => {
                    let p = &self.params[i];
                    let din = x.len() / n.max(1);
                    let pos = self.shapes[i + 1][1] * self.shapes[i + 1][2];
                    let kk = p.weight.len() / out_ch;
                    let mut pg = pg;
                    let mut dx = vec![0.0; if need_dx { x.len() } else { 0 }];
                    let mut patches = Vec::new();
                    let mut dpatches = vec![0.0; pos * kk];
                    for k in 0..n {
                        let gk = &grad[k * out_ch * pos..(k + 1) * out_ch * pos];
                        if let Some(pg) = pg.as_deref_mut() {
                            self.im2col(i, &x[k * din..(k + 1) * din], &mut patches);
                            // dW += G_k P, G_k is out_ch x pos
                            gemm(out_ch, pos, kk, gk, (pos, 1), &patches, (kk, 1), &mut pg.weight, (kk, 1));
                            for (b, row) in pg.bias.iter_mut().zip(gk.chunks(pos)) {
                                *b += row.iter().sum::<f64>();
                            }
                        }
                        if need_dx {
                            dpatches.iter_mut().for_each(|v| *v = 0.0);
                            gemm(pos, out_ch, kk, gk, (1, pos), &p.weight, (kk, 1), &mut dpatches, (kk, 1));
                            self.col2im(i, &dpatches, &mut dx[k * din..(k + 1) * din]);
                        }
                    }
                    dx
                }
            };
        }
        if want_input {
            grad
        } else {
            Vec::new()
        }
    }

    /// Patch matrix (`positions x in_ch*k*k`) of conv layer `i` on one sample.
    fn im2col(&self, i: usize, x: &[f64], out: &mut Vec<f64>) {
        let LayerSpec::Conv2d { in_ch, kernel, stride, .. } = self.layers[i] else {
            unreachable!("im2col on a non-conv layer")
        };
        let (h, w) = (self.shapes[i][1], self.shapes[i][2]);
        let (oh, ow) = (self.shapes[i + 1][1], self.shapes[i + 1][2]);
        out.clear();
        for oy in 0..oh {
            for ox in 0..ow {
                for ic in 0..in_ch {
                    for ky in 0..kernel {
                        let row = ic * h * w + (oy * stride + ky) * w + ox * stride;
                        out.extend_from_slice(&x[row..row + kernel]);
                    }
                }
            }
        }
    }

    /// Adjoint of [`Network::im2col`]: scatter-adds patch gradients.
    fn col2im(&self, i: usize, patches: &[f64], dx: &mut [f64]) {
        let LayerSpec::Conv2d { in_ch, kernel, stride, .. } = self.layers[i] else {
            unreachable!("col2im on a non-conv layer")
        };
        let (h, w) = (self.shapes[i][1], self.shapes[i][2]);
        let (oh, ow) = (self.shapes[i + 1][1], self.shapes[i + 1][2]);
        let mut src = patches.chunks_exact(kernel);
        for oy in 0..oh {
            for ox in 0..ow {
                for ic in 0..in_ch {
                    for ky in 0..kernel {
                        let row = ic * h * w + (oy * stride + ky) * w + ox * stride;
                        let seg = src.next().expect("patch matrix matches layer");
                        for (d, v) in dx[row..row + kernel].iter_mut().zip(seg) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }

    /// Per-sample objective values and input gradients for a batch.
    pub(crate) fn input_gradient_batch(
        &self,
        xs: &[&[f64]],
        objectives: &[ScalarObjective],
    ) -> Result<Vec<(f64, Vec<f64>, bool)>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let trace = self.trace_batch(xs)?;
        let c = self.num_classes;
        let mut g = Vec::with_capacity(xs.len() * c);
        let mut heads = Vec::with_capacity(xs.len());
        for (k, obj) in objectives.iter().enumerate() {
            let head = obj.evaluate(trace.logits(k))?;
            g.extend_from_slice(&head.grad);
            heads.push((head.value, head.kink));
        }
        let dx = self.backward_batch(&trace, &g, true, None);
        let d = self.input_len();
        Ok(heads
            .into_iter()
            .enumerate()
            .map(|(k, (v, kink))| (v, dx[k * d..(k + 1) * d].to_vec(), kink))
            .collect())
    }

    /// Gradient of a scalar objective of the logits with respect to the input.
    pub fn input_gradient(&self, x: &Tensor, objective: &ScalarObjective) -> Result<InputGradient> {
        self.check_input(x.data(), Some(x.shape()))?;
        let (value, grad, subgradient) = self.input_gradient_flat(x.data(), objective)?;
        Ok(InputGradient {
            value,
            grad: x.with_data(grad),
            subgradient,
        })
    }

    pub(crate) fn input_gradient_flat(
        &self,
        x: &[f64],
        objective: &ScalarObjective,
    ) -> Result<(f64, Vec<f64>, bool)> {
        let trace = self.trace(x)?;
        let head = objective.evaluate(trace.logits())?;
        let grad = self.backward(&trace, &head.grad, true, None);
        Ok((head.value, grad, head.kink))
    }

    /// Mean objective and mean parameter gradient over a batch.
    pub fn param_gradient(
        &self,
        inputs: &[&[f64]],
        objectives: &[ScalarObjective],
    ) -> Result<(f64, ParamGrads)> {
        let weights = vec![1.0; inputs.len()];
        let (loss, mut grads) = self.param_gradient_weighted(inputs, objectives, &weights)?;
        let n = inputs.len() as f64;
        grads.scale(1.0 / n);
        Ok((loss / n, grads))
    }

    /// `sum_k w_k * objective_k` and its parameter gradient (unnormalized).
    ///
    /// Samples are reduced in fixed-size chunks, in order, so the result is
    /// bitwise independent of the rayon thread count.
    pub fn param_gradient_weighted(
        &self,
        inputs: &[&[f64]],
        objectives: &[ScalarObjective],
        weights: &[f64],
    ) -> Result<(f64, ParamGrads)> {
        use rayon::prelude::*;
        if inputs.len() != objectives.len() || inputs.len() != weights.len() || inputs.is_empty() {
            return Err(Error::Config(format!(
                "param_gradient needs matching non-empty batches ({} inputs, {} objectives, {} weights)",
                inputs.len(),
                objectives.len(),
                weights.len()
            )));
        }
        let idx: Vec<usize> = (0..inputs.len()).collect();
        let partials = idx
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| -> Result<(f64, ParamGrads)> {
                let mut grads = ParamGrads::zeros_for(self);
                let mut loss = 0.0;
                let xs: Vec<&[f64]> = chunk.iter().map(|&k| inputs[k]).collect();
                let trace = self.trace_batch(&xs)?;
                let mut g = Vec::with_capacity(chunk.len() * self.num_classes);
                for (j, &k) in chunk.iter().enumerate() {
                    let head = objectives[k].evaluate(trace.logits(j))?;
                    loss += weights[k] * head.value;
                    g.extend(head.grad.iter().map(|v| v * weights[k]));
                }
                self.backward_batch(&trace, &g, false, Some(&mut grads));
                Ok((loss, grads))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = ParamGrads::zeros_for(self);
        let mut loss = 0.0;
        for (l, g) in &partials {
            loss += l;
            total.add_assign(g);
        }
        Ok((loss, total))
    }
}

fn validate_chain(
    input_shape: &[usize],
    num_classes: usize,
    layers: &[LayerSpec],
) -> Result<Vec<Vec<usize>>> {
    if input_shape.is_empty() || input_shape.contains(&0) {
        return Err(Error::Architecture(format!("bad input shape {input_shape:?}")));
    }
    if num_classes < 2 {
        return Err(Error::Architecture("need at least two classes".into()));
    }
    match layers.last() {
        Some(LayerSpec::Dense { out_dim, .. }) if *out_dim == num_classes => {}
        _ => {
            return Err(Error::Architecture(format!(
                "final layer must be dense with {num_classes} outputs"
            )))
        }
    }
    let mut shapes = vec![input_shape.to_vec()];
    for (i, spec) in layers.iter().enumerate() {
        let next = spec.output_shape(&shapes[i]).ok_or_else(|| {
            Error::Architecture(format!(
                "layer {i} ({}) cannot take input of shape {:?}",
                spec.name(),
                shapes[i]
            ))
        })?;
        shapes.push(next);
    }
    Ok(shapes)
}

/// `C += A B` for an `m x k` by `k x n` product; strides are `(row, col)`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    assert!(a.len() >= span(m, k, rsa, csa));
    assert!(b.len() >= span(k, n, rsb, csb));
    assert!(c.len() >= span(m, n, rsc, csc));
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let k = c * 4;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut tail = 0.0;
    for k in chunks * 4..a.len() {
        tail += a[k] * b[k];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Convenience: dense ReLU MLP with the given hidden widths.
pub fn mlp_layers(input: usize, hidden: &[usize], classes: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut prev = input;
    for &h in hidden {
        layers.push(LayerSpec::Dense {
            in_dim: prev,
            out_dim: h,
        });
        layers.push(LayerSpec::Relu);
        prev = h;
    }
    layers.push(LayerSpec::Dense {
        in_dim: prev,
        out_dim: classes,
    });
    layers
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::objective::ScalarObjective;

    fn dense(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> (LayerSpec, LayerParams) {
        (LayerSpec::Dense { in_dim, out_dim }, LayerParams { weight, bias })
    }

    fn build(input: Vec<usize>, classes: usize, parts: Vec<(LayerSpec, LayerParams)>) -> Network {
        let (layers, params) = parts.into_iter().unzip();
        Network::new(input, classes, layers, params).unwrap()
    }

    fn relu() -> (LayerSpec, LayerParams) {
        (LayerSpec::Relu, LayerParams::default())
    }

    #[test]
    fn identity_dense_layer() {
        let net = build(vec![2], 2, vec![dense(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0])]);
        let x = Tensor::from_vec(vec![1.0, 2.0]).unwrap();
        let (logits, _) = net.forward(&x).unwrap();
        assert_eq!(logits.data(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_weights_give_bias() {
        let net = build(vec![3], 2, vec![dense(3, 2, vec![0.0; 6], vec![0.5, -1.5])]);
        let x = Tensor::from_vec(vec![7.0, -3.0, 2.0]).unwrap();
        assert_eq!(net.forward(&x).unwrap().0.data(), &[0.5, -1.5]);
    }

    #[test]
    fn hand_worked_two_layer_mlp() {
        // hidden = relu(W1 x + b1), W1 = [[1,2],[-1,1],[0.5,-0.5]], b1 = [0,1,0]
        // x = [1,-1]: pre = [-1, -1, 1] -> h = [0, 0, 1]
        // logits = W2 h + b2, W2 = [[1,2,3],[-1,0,2]], b2 = [0.5,0] -> [3.5, 2]
        let net = build(
            vec![2],
            2,
            vec![
                dense(2, 3, vec![1.0, 2.0, -1.0, 1.0, 0.5, -0.5], vec![0.0, 1.0, 0.0]),
                relu(),
                dense(3, 2, vec![1.0, 2.0, 3.0, -1.0, 0.0, 2.0], vec![0.5, 0.0]),
            ],
        );
        let x = Tensor::from_vec(vec![1.0, -1.0]).unwrap();
        let (logits, trace) = net.forward(&x).unwrap();
        assert_eq!(logits.data(), &[3.5, 2.0]);
        assert_eq!(trace.activations[2], vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn trace_replay_is_bitwise() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        use rand::SeedableRng;
        let net = Network::init(vec![5], 3, mlp_layers(5, &[7], 3), &mut rng).unwrap();
        let x = Tensor::from_vec(vec![0.1, 0.9, 0.3, 0.2, 0.5]).unwrap();
        let (l1, trace) = net.forward(&x).unwrap();
        let replay = net.trace(trace.input()).unwrap();
        assert_eq!(replay, trace);
        assert_eq!(l1.data(), replay.logits());
    }

    #[test]
    fn input_shape_mismatch_is_an_error() {
        let net = build(vec![2], 2, vec![dense(2, 2, vec![0.0; 4], vec![0.0; 2])]);
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(net.forward(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn overflow_names_the_layer() {
        let net = build(
            vec![1],
            2,
            vec![
                dense(1, 1, vec![1e300], vec![0.0]),
                relu(),
                dense(1, 2, vec![1e300, 1.0], vec![0.0, 0.0]),
            ],
        );
        let x = Tensor::from_vec(vec![1.0]).unwrap();
        assert!(matches!(
            net.forward(&x),
            Err(Error::NumericOverflow { layer: 2, .. })
        ));
    }

    #[test]
    fn rejects_trailing_activation_and_bad_chain() {
        let layers = vec![LayerSpec::Dense { in_dim: 2, out_dim: 2 }, LayerSpec::Relu];
        let params = vec![
            LayerParams { weight: vec![0.0; 4], bias: vec![0.0; 2] },
            LayerParams::default(),
        ];
        assert!(Network::new(vec![2], 2, layers, params).is_err());
        let layers = vec![LayerSpec::Dense { in_dim: 3, out_dim: 2 }];
        let params = vec![LayerParams { weight: vec![0.0; 6], bias: vec![0.0; 2] }];
        assert!(Network::new(vec![2], 2, layers, params).is_err());
    }

    #[test]
    fn conv_shapes_chain() {
        let layers = vec![
            LayerSpec::Conv2d { in_ch: 1, out_ch: 4, kernel: 5, stride: 2 },
            LayerSpec::Relu,
            LayerSpec::Conv2d { in_ch: 4, out_ch: 8, kernel: 5, stride: 2 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { in_dim: 128, out_dim: 10 },
        ];
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let net = Network::init(vec![1, 28, 28], 10, layers, &mut rng).unwrap();
        assert_eq!(net.shapes[2], vec![4, 12, 12]);
        assert_eq!(net.shapes[4], vec![8, 4, 4]);
    }

    #[test]
    fn linear_logit_gradient_is_weight_row() {
        let w = vec![1.0, -2.0, 3.0, 0.5, 4.0, -1.0];
        let net = build(vec![3], 2, vec![dense(3, 2, w.clone(), vec![0.0, 0.0])]);
        let x = Tensor::from_vec(vec![0.2, 0.4, 0.6]).unwrap();
        let g = net.input_gradient(&x, &ScalarObjective::Logit { index: 0 }).unwrap();
        assert_eq!(g.grad.data(), &w[..3]);
        assert!(!g.subgradient);
    }

    #[test]
    fn squared_error_param_gradient_is_outer_product() {
        let net = build(vec![2], 2, vec![dense(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0])]);
        let x = [2.0, 3.0];
        let target = [1.0, 1.0];
        let obj = ScalarObjective::SquaredError { target: &target };
        let (loss, g) = net.param_gradient(&[&x], &[obj]).unwrap();
        // loss = 0.5 * |Wx - t|^2, error = [1, 2]
        assert_eq!(loss, 2.5);
        assert_eq!(g.layers[0].weight, vec![2.0, 3.0, 4.0, 6.0]);
        assert_eq!(g.layers[0].bias, vec![1.0, 2.0]);

        let fit = [2.0, 3.0];
        let obj = ScalarObjective::SquaredError { target: &fit };
        let (loss, g) = net.param_gradient(&[&x], &[obj]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.layers[0].values().all(|&v| v == 0.0));
    }

    #[test]
    fn batched_path_matches_per_sample_path() {
        use rand::Rng as _;
        let layers = vec![
            LayerSpec::Conv2d { in_ch: 2, out_ch: 3, kernel: 3, stride: 2 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { in_dim: 27, out_dim: 6 },
            LayerSpec::Relu,
            LayerSpec::Dense { in_dim: 6, out_dim: 4 },
        ];
        let mut rng = crate::rng(11);
        let net = Network::init(vec![2, 7, 7], 4, layers, &mut rng).unwrap();
        let xs: Vec<Vec<f64>> = (0..5).map(|_| (0..98).map(|_| rng.random::<f64>()).collect()).collect();
        let views: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let objs: Vec<ScalarObjective> = (0..5).map(|k| ScalarObjective::cross_entropy(k % 4)).collect();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(u, v)| (u - v).abs() <= 1e-12 * (1.0 + v.abs()));

        let batch = net.input_gradient_batch(&views, &objs).unwrap();
        let mut per_sample = ParamGrads::zeros_for(&net);
        for (k, x) in xs.iter().enumerate() {
            let (v, g, _) = net.input_gradient_flat(x, &objs[k]).unwrap();
            assert!((batch[k].0 - v).abs() < 1e-12);
            assert!(close(&batch[k].1, &g));
            let trace = net.trace(x).unwrap();
            let head = objs[k].evaluate(trace.logits()).unwrap();
            net.backward(&trace, &head.grad, false, Some(&mut per_sample));
        }
        let (_, sum) = net.param_gradient_weighted(&views, &objs, &[1.0; 5]).unwrap();
        for (a, b) in sum.layers.iter().zip(&per_sample.layers) {
            assert!(close(&a.weight, &b.weight) && close(&a.bias, &b.bias));
        }
    }
}
