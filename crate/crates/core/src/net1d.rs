//! The alternating channel-wise / slice-wise 1D network, trained from
//! scratch with plain SGD on globally pooled feature maps.
//!
//! Activations are laid out `slices x (W*H) x channels`, row-major. A
//! channel-wise layer convolves along the slice axis at every spatial
//! position with a `(P, in, out)` kernel and zero padding; a slice-wise layer
//! mixes slices with one `(in_slices, out_slices)` matrix shared across all
//! spatial positions and channels. Both apply ReLU. The head is a dense layer
//! to two logits followed by softmax.
//!
//! Arithmetic is `f64` throughout; parameters are exported as `f32` tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{tensor_read, tensor_write, Tensor};
use crate::volume::Label;

/// Probability clamp used by [`loss`].
pub const PROB_EPS: f64 = 1e-7;

/// Dims of the pooled input `J x W x H x K`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub slices: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl InputShape {
    pub fn of(t: &Tensor) -> Result<Self> {
        match *t.dims() {
            [slices, width, height, channels] => Ok(Self { slices, width, height, channels }),
            _ => Err(Error::shape(format!("expected rank-4 pooled maps, got {:?}", t.dims()))),
        }
    }

    fn spatial(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// C1 S1 C2 S2 C3 S3 C4 FC.
    AlternatingConv,
    /// FC on the flattened input only.
    LinearHead,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConv {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[p][in][out]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMix {
    pub in_slices: usize,
    pub out_slices: usize,
    /// `[in][out]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `[in][out]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Channel(ChannelConv),
    Slice(SliceMix),
}

/// Activation tensor `slices x spatial x channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct Activation {
    pub slices: usize,
    pub spatial: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Activation {
    fn zeros(slices: usize, spatial: usize, channels: usize) -> Self {
        Self { slices, spatial, channels, data: vec![0.0; slices * spatial * channels] }
    }
}

fn glorot(rng: &mut SplitMix64, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.uniform(-s, s)).collect()
}

impl ChannelConv {
    fn new(kernel: usize, in_channels: usize, out_channels: usize, rng: &mut SplitMix64) -> Self {
        let n = kernel * in_channels * out_channels;
        Self {
            kernel,
            in_channels,
            out_channels,
            weights: glorot(rng, n, kernel * in_channels, kernel * out_channels),
            bias: vec![0.0; out_channels],
        }
    }

    fn forward(&self, x: &Activation) -> Activation {
        let (ci, co) = (self.in_channels, self.out_channels);
        let half = (self.kernel / 2) as isize;
        let mut out = Activation::zeros(x.slices, x.spatial, co);
        for n in 0..x.slices {
            for s in 0..x.spatial {
                let o = &mut out.data[(n * x.spatial + s) * co..][..co];
                o.copy_from_slice(&self.bias);
                for p in 0..self.kernel {
                    let src = n as isize + p as isize - half;
                    if src < 0 || src >= x.slices as isize {
                        continue;
                    }
                    let xr = &x.data[(src as usize * x.spatial + s) * ci..][..ci];
                    for (c, &xv) in xr.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let wr = &self.weights[(p * ci + c) * co..][..co];
                        for (ov, &wv) in o.iter_mut().zip(wr) {
                            *ov += wv * xv;
                        }
                    }
                }
                relu_in_place(o);
            }
        }
        out
    }

    /// Accumulates parameter gradients into `dw`, `db` and returns the input gradient
    /// when `need_dx`.
    fn backward(
        &self,
        x: &Activation,
        out: &Activation,
        dout: &[f64],
        dw: &mut [f64],
        db: &mut [f64],
        need_dx: bool,
    ) -> Option<Vec<f64>> {
        let (ci, co) = (self.in_channels, self.out_channels);
        let half = (self.kernel / 2) as isize;
        let mut dx = need_dx.then(|| vec![0.0; x.data.len()]);
        let mut dz = vec![0.0; co];
        for n in 0..x.slices {
            for s in 0..x.spatial {
                let base = (n * x.spatial + s) * co;
                let mut any = false;
                for o in 0..co {
                    dz[o] = if out.data[base + o] > 0.0 { dout[base + o] } else { 0.0 };
                    any |= dz[o] != 0.0;
                }
                if !any {
                    continue;
                }
                for (b, &d) in db.iter_mut().zip(&dz) {
                    *b += d;
                }
                for p in 0..self.kernel {
                    let src = n as isize + p as isize - half;
                    if src < 0 || src >= x.slices as isize {
                        continue;
                    }
                    let xbase = (src as usize * x.spatial + s) * ci;
                    let off = p * ci * co;
                    let wp = &self.weights[off..off + ci * co];
                    let dwp = &mut dw[off..off + ci * co];
                    let xr = &x.data[xbase..xbase + ci];
                    for (c, (wr, dwr)) in wp.chunks_exact(co).zip(dwp.chunks_exact_mut(co)).enumerate() {
                        let xv = xr[c];
                        if xv != 0.0 {
                            for (d, &g) in dwr.iter_mut().zip(&dz) {
                                *d += xv * g;
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            dx[xbase + c] += wr.iter().zip(&dz).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
        dx
    }
}

impl SliceMix {
    fn new(in_slices: usize, out_slices: usize, rng: &mut SplitMix64) -> Self {
        Self {
            in_slices,
            out_slices,
            weights: glorot(rng, in_slices * out_slices, in_slices, out_slices),
            bias: vec![0.0; out_slices],
        }
    }

    fn forward(&self, x: &Activation) -> Activation {
        let q = x.spatial * x.channels;
        let mut out = Activation::zeros(self.out_slices, x.spatial, x.channels);
        for m in 0..self.out_slices {
            let row = &mut out.data[m * q..(m + 1) * q];
            row.fill(self.bias[m]);
            for n in 0..self.in_slices {
                let w = self.weights[n * self.out_slices + m];
                for (r, &xv) in row.iter_mut().zip(&x.data[n * q..(n + 1) * q]) {
                    *r += w * xv;
                }
            }
            relu_in_place(row);
        }
        out
    }

    fn backward(
        &self,
        x: &Activation,
        out: &Activation,
        dout: &[f64],
        dw: &mut [f64],
        db: &mut [f64],
        need_dx: bool,
    ) -> Option<Vec<f64>> {
        let q = x.spatial * x.channels;
        let mut dx = need_dx.then(|| vec![0.0; x.data.len()]);
        let mut dz = vec![0.0; q];
        for m in 0..self.out_slices {
            let mut any = false;
            for i in 0..q {
                let idx = m * q + i;
                dz[i] = if out.data[idx] > 0.0 { dout[idx] } else { 0.0 };
                any |= dz[i] != 0.0;
            }
            if !any {
                continue;
            }
            db[m] += dz.iter().sum::<f64>();
            for n in 0..self.in_slices {
                let xr = &x.data[n * q..(n + 1) * q];
                dw[n * self.out_slices + m] += xr.iter().zip(&dz).map(|(a, b)| a * b).sum::<f64>();
                if let Some(dx) = dx.as_mut() {
                    let w = self.weights[n * self.out_slices + m];
                    for (d, &g) in dx[n * q..(n + 1) * q].iter_mut().zip(&dz) {
                        *d += w * g;
                    }
                }
            }
        }
        dx
    }
}

impl Dense {
    fn new(inputs: usize, outputs: usize, rng: &mut SplitMix64) -> Self {
        Self { inputs, outputs, weights: glorot(rng, inputs * outputs, inputs, outputs), bias: vec![0.0; outputs] }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (i, &xv) in x.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(&self.weights[i * self.outputs..(i + 1) * self.outputs]) {
                *o += w * xv;
            }
        }
        out
    }
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x <= 0.0 {
            *x = 0.0;
        }
    }
}

/// Numerically stable two-way softmax.
pub fn softmax(logits: &[f64]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// Cross-entropy against the one-hot `label`, with the label probability
/// clamped to `[1e-7, 1 - 1e-7]`.
pub fn loss(probabilities: [f64; 2], label: usize) -> f64 {
    -probabilities[label].clamp(PROB_EPS, 1.0 - PROB_EPS).ln()
}

/// Everything [`Net1D::backward`] needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Input followed by every hidden layer's post-ReLU output.
    pub activations: Vec<Activation>,
    pub logits: Vec<f64>,
    pub probabilities: [f64; 2],
}

impl ForwardPass {
    pub fn p_positive(&self) -> f64 {
        self.probabilities[Label::Sz.class_index()]
    }
}

/// Parameter gradients, block-aligned with [`Net1D::param_blocks`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(net: &Net1D) -> Self {
        Gradients(net.param_blocks().iter().map(|b| vec![0.0; b.len()]).collect())
    }

    pub fn clear(&mut self) {
        for block in &mut self.0 {
            block.fill(0.0);
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for block in &mut self.0 {
            for v in block {
                *v *= factor;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Net1D {
    pub architecture: Architecture,
    pub input: InputShape,
    pub layers: Vec<Layer>,
    pub head: Dense,
}

/// `(kind, kernel, nodes)` for C1..C4 / S1..S3 in order. Slice-wise node
/// counts are halvings of `J`.
fn table_layers(j: usize) -> [(char, usize, usize); 7] {
    [('C', 3, 32), ('S', 1, j / 2), ('C', 3, 32), ('S', 1, j / 4), ('C', 3, 64), ('S', 1, j / 8), ('C', 1, 128)]
}

/// Builds the alternating network for pooled input `shape`. Weights are
/// Glorot-uniform from a SplitMix64 stream on `seed`, biases zero.
pub fn build_net(shape: InputShape, seed: u64) -> Result<Net1D> {
    if shape.slices < 8 {
        return Err(Error::invalid(format!(
            "J = {} is too small for three slice halvings (need J >= 8)",
            shape.slices
        )));
    }
    if shape.channels == 0 || shape.width == 0 || shape.height == 0 {
        return Err(Error::invalid(format!("degenerate input shape {shape:?}")));
    }
    let mut rng = SplitMix64::new(seed);
    let mut layers = Vec::with_capacity(7);
    let (mut slices, mut channels) = (shape.slices, shape.channels);
    for (kind, kernel, nodes) in table_layers(shape.slices) {
        if kind == 'C' {
            layers.push(Layer::Channel(ChannelConv::new(kernel, channels, nodes, &mut rng)));
            channels = nodes;
        } else {
            layers.push(Layer::Slice(SliceMix::new(slices, nodes, &mut rng)));
            slices = nodes;
        }
    }
    let head = Dense::new(slices * shape.spatial() * channels, 2, &mut rng);
    Ok(Net1D { architecture: Architecture::AlternatingConv, input: shape, layers, head })
}

/// Dense layer straight from the flattened pooled input to two logits.
pub fn build_linear_head(shape: InputShape, seed: u64) -> Result<Net1D> {
    let n = shape.slices * shape.spatial() * shape.channels;
    if n == 0 {
        return Err(Error::invalid(format!("degenerate input shape {shape:?}")));
    }
    let mut rng = SplitMix64::new(seed);
    Ok(Net1D { architecture: Architecture::LinearHead, input: shape, layers: vec![], head: Dense::new(n, 2, &mut rng) })
}

pub fn build(architecture: Architecture, shape: InputShape, seed: u64) -> Result<Net1D> {
    match architecture {
        Architecture::AlternatingConv => build_net(shape, seed),
        Architecture::LinearHead => build_linear_head(shape, seed),
    }
}

/// Trainable parameter count of the alternating network for `shape`,
/// computed from the layer arithmetic without building it.
pub fn parameter_count_for(shape: InputShape) -> usize {
    let (mut slices, mut channels) = (shape.slices, shape.channels);
    let mut total = 0;
    for (kind, kernel, nodes) in table_layers(shape.slices) {
        if kind == 'C' {
            total += kernel * channels * nodes + nodes;
            channels = nodes;
        } else {
            total += slices * nodes + nodes;
            slices = nodes;
        }
    }
    total + slices * shape.spatial() * channels * 2 + 2
}

impl Net1D {
    /// `[slices, W, H, channels]` after each hidden layer.
    pub fn layer_output_dims(&self) -> Vec<[usize; 4]> {
        let (w, h) = (self.input.width, self.input.height);
        let (mut slices, mut channels) = (self.input.slices, self.input.channels);
        self.layers
            .iter()
            .map(|l| {
                match l {
                    Layer::Channel(c) => channels = c.out_channels,
                    Layer::Slice(s) => slices = s.out_slices,
                }
                [slices, w, h, channels]
            })
            .collect()
    }

    pub fn param_blocks(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &self.layers {
            match l {
                Layer::Channel(c) => v.extend([c.weights.as_slice(), c.bias.as_slice()]),
                Layer::Slice(s) => v.extend([s.weights.as_slice(), s.bias.as_slice()]),
            }
        }
        v.extend([self.head.weights.as_slice(), self.head.bias.as_slice()]);
        v
    }

    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &mut self.layers {
            match l {
                Layer::Channel(c) => v.extend([c.weights.as_mut_slice(), c.bias.as_mut_slice()]),
                Layer::Slice(s) => v.extend([s.weights.as_mut_slice(), s.bias.as_mut_slice()]),
            }
        }
        v.extend([self.head.weights.as_mut_slice(), self.head.bias.as_mut_slice()]);
        v
    }

    /// Names aligned with [`Self::param_blocks`], e.g. `c1.weight`, `s2.bias`, `fc.weight`.
    pub fn param_names(&self) -> Vec<String> {
        let (mut nc, mut ns) = (0, 0);
        let mut names = Vec::new();
        for l in &self.layers {
            let tag = match l {
                Layer::Channel(_) => {
                    nc += 1;
                    format!("c{nc}")
                }
                Layer::Slice(_) => {
                    ns += 1;
                    format!("s{ns}")
                }
            };
            names.push(format!("{tag}.weight"));
            names.push(format!("{tag}.bias"));
        }
        names.push("fc.weight".into());
        names.push("fc.bias".into());
        names
    }

    /// Tensor dims of each parameter block.
    pub fn param_dims(&self) -> Vec<Vec<usize>> {
        let mut dims = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Channel(c) => {
                    dims.push(vec![c.kernel, c.in_channels, c.out_channels]);
                    dims.push(vec![c.out_channels]);
                }
                Layer::Slice(s) => {
                    dims.push(vec![s.in_slices, s.out_slices]);
                    dims.push(vec![s.out_slices]);
                }
            }
        }
        dims.push(vec![self.head.inputs, self.head.outputs]);
        dims.push(vec![self.head.outputs]);
        dims
    }

    pub fn parameter_count(&self) -> usize {
        self.param_blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.param_blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn input_activation(&self, x: &Tensor) -> Result<Activation> {
        let shape = InputShape::of(x)?;
        if shape != self.input {
            return Err(Error::shape(format!("network expects input {:?}, got {:?}", self.input, shape)));
        }
        Ok(Activation {
            slices: shape.slices,
            spatial: shape.spatial(),
            channels: shape.channels,
            data: x.data().iter().map(|&v| v as f64).collect(),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<ForwardPass> {
        let input = self.input_activation(x)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input);
        for l in &self.layers {
            let prev = activations.last().unwrap();
            let next = match l {
                Layer::Channel(c) => c.forward(prev),
                Layer::Slice(s) => s.forward(prev),
            };
            activations.push(next);
        }
        let logits = self.head.forward(&activations.last().unwrap().data);
        let probabilities = softmax(&logits);
        Ok(ForwardPass { activations, logits, probabilities })
    }

    /// Probability of the positive (SZ) class.
    pub fn predict(&self, x: &Tensor) -> Result<f64> {
        Ok(self.forward(x)?.p_positive())
    }

    /// Exact gradients of `loss(forward(x), label)` with respect to every
    /// parameter. The clamp in [`loss`] is ignored: the logit gradient is
    /// always `softmax - onehot`.
    pub fn backward(&self, pass: &ForwardPass, label: usize) -> Gradients {
        let mut grads = Gradients::zeros_like(self);
        self.accumulate_gradients(pass, label, &mut grads);
        grads
    }

    /// Adds the gradients of [`Net1D::backward`] into `grads`.
    pub fn accumulate_gradients(&self, pass: &ForwardPass, label: usize, grads: &mut Gradients) {
        let nl = self.layers.len();
        let mut dlogits = pass.probabilities.to_vec();
        dlogits[label] -= 1.0;

        let feat = &pass.activations[nl].data;
        let outputs = self.head.outputs;
        {
            let (dw, db) = grads.0.split_at_mut(2 * nl + 1);
            let dw = &mut dw[2 * nl];
            for (&xv, row) in feat.iter().zip(dw.chunks_exact_mut(outputs)) {
                for (d, &g) in row.iter_mut().zip(&dlogits) {
                    *d += xv * g;
                }
            }
            for (d, &g) in db[0].iter_mut().zip(&dlogits) {
                *d += g;
            }
        }
        if nl == 0 {
            return;
        }
        let mut dcur: Vec<f64> =
            self.head.weights.chunks_exact(outputs).map(|w| w.iter().zip(&dlogits).map(|(a, b)| a * b).sum()).collect();

        for li in (0..nl).rev() {
            let x = &pass.activations[li];
            let out = &pass.activations[li + 1];
            let (head, tail) = grads.0.split_at_mut(2 * li + 1);
            let dw = &mut head[2 * li];
            let db = &mut tail[0];
            let need_dx = li > 0;
            let dx = match &self.layers[li] {
                Layer::Channel(c) => c.backward(x, out, &dcur, dw, db, need_dx),
                Layer::Slice(s) => s.backward(x, out, &dcur, dw, db, need_dx),
            };
            match dx {
                Some(d) => dcur = d,
                None => break,
            }
        }
    }

    /// `theta <- theta - lr * g`.
    pub fn sgd_step(&mut self, grads: &Gradients, learning_rate: f64) {
        for (block, g) in self.param_blocks_mut().into_iter().zip(&grads.0) {
            for (p, d) in block.iter_mut().zip(g) {
                *p -= learning_rate * d;
            }
        }
    }

    /// Writes one `{name}.v21t` per parameter block (as `f32`) and `net.json`.
    pub fn save_bundle(&self, dir: impl AsRef<Path>, meta: &BundleMeta) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for ((name, dims), block) in self.param_names().iter().zip(self.param_dims()).zip(self.param_blocks()) {
            let t = Tensor::new(dims, block.iter().map(|&v| v as f32).collect())?;
            tensor_write(&t, dir.join(format!("{name}.v21t")))?;
        }
        let json = serde_json::to_string_pretty(meta).expect("bundle metadata serializes");
        let path = dir.join("net.json");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load_bundle(dir: impl AsRef<Path>) -> Result<(Net1D, BundleMeta)> {
        let dir = dir.as_ref();
        let path = dir.join("net.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: BundleMeta = serde_json::from_str(&text)
            .map_err(|source| Error::Json { context: path.display().to_string(), source })?;
        let mut net = build(meta.architecture, meta.input, 0)?;
        let names = net.param_names();
        let dims = net.param_dims();
        for ((name, dims), block) in names.iter().zip(dims).zip(net.param_blocks_mut()) {
            let t = tensor_read(dir.join(format!("{name}.v21t")))?;
            if t.dims() != dims.as_slice() {
                return Err(Error::shape(format!("{name}: expected {dims:?}, found {:?}", t.dims())));
            }
            for (p, &v) in block.iter_mut().zip(t.data()) {
                *p = v as f64;
            }
        }
        Ok((net, meta))
    }
}

/// JSON sidecar of a saved network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub architecture: Architecture,
    pub input: InputShape,
    pub layer_dims: Vec<[usize; 4]>,
    pub parameter_count: usize,
    pub seed: u64,
    pub config: TrainConfig,
}

impl BundleMeta {
    pub fn describe(net: &Net1D, config: &TrainConfig) -> Self {
        Self {
            architecture: net.architecture,
            input: net.input,
            layer_dims: net.layer_output_dims(),
            parameter_count: net.parameter_count(),
            seed: config.seed,
            config: config.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitRule {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    #[default]
    GlorotUniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub init: InitRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.01, batch_size: 8, epochs: 100, seed: 0, init: InitRule::GlorotUniform }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        Ok(())
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, 0)
    }

    pub fn shuffle_seed(&self) -> u64 {
        derive_seed(self.seed, 1)
    }
}

/// Mini-batch index lists for every epoch: one shuffle per epoch drawn from
/// a single stream on `shuffle_seed`, cut into consecutive batches.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut SplitMix64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Redraws of a dead initialization before giving up.
pub const MAX_INIT_ATTEMPTS: u64 = 32;

/// Initial network for [`train_branch`]. A draw whose head sees an all-zero
/// input for every training subject receives no gradient below the head, so
/// it is redrawn from `derive_seed(init_seed, attempt)`; attempt 0 uses
/// `init_seed` itself.
pub fn initialize_for_corpus(
    corpus: &[(&Tensor, Label)],
    architecture: Architecture,
    cfg: &TrainConfig,
) -> Result<Net1D> {
    let first = corpus.first().ok_or_else(|| Error::invalid("empty training corpus"))?;
    let shape = InputShape::of(first.0)?;
    let mut last = None;
    for attempt in 0..MAX_INIT_ATTEMPTS {
        let seed = if attempt == 0 { cfg.init_seed() } else { derive_seed(cfg.init_seed(), attempt) };
        let net = build(architecture, shape, seed)?;
        if architecture == Architecture::LinearHead {
            return Ok(net);
        }
        let mut alive = false;
        for (x, _) in corpus {
            let pass = net.forward(x)?;
            if pass.activations.last().unwrap().data.iter().any(|&v| v > 0.0) {
                alive = true;
                break;
            }
        }
        if alive {
            return Ok(net);
        }
        last = Some(net);
    }
    Ok(last.expect("at least one attempt"))
}

/// Trains a fresh network of `architecture` on `(pooled maps, label)` pairs.
pub fn train_branch(corpus: &[(&Tensor, Label)], architecture: Architecture, cfg: &TrainConfig) -> Result<Net1D> {
    cfg.validate()?;
    if corpus.len() < 2 {
        return Err(Error::invalid("training needs at least two subjects"));
    }
    let positives = corpus.iter().filter(|(_, l)| l.is_positive()).count();
    if positives == 0 || positives == corpus.len() {
        return Err(Error::invalid("training corpus contains a single class"));
    }
    let mut net = initialize_for_corpus(corpus, architecture, cfg)?;
    let mut rng = SplitMix64::new(cfg.shuffle_seed());
    let mut acc = Gradients::zeros_like(&net);
    for _ in 0..cfg.epochs {
        for batch in epoch_batches(corpus.len(), cfg.batch_size, &mut rng) {
            acc.clear();
            for &i in &batch {
                let (x, label) = corpus[i];
                let pass = net.forward(x)?;
                net.accumulate_gradients(&pass, label.class_index(), &mut acc);
            }
            acc.scale(1.0 / batch.len() as f64);
            net.sgd_step(&acc, cfg.learning_rate);
        }
    }
    if !net.is_finite() {
        return Err(Error::invalid("training diverged to non-finite parameters"));
    }
    Ok(net)
}
