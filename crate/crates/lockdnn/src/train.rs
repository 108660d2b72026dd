//! Floating-point SGD trainer for the supported layer set, with
//! post-training quantization to the fixed-point model.

use lockdnn_core::model::argmax;
use lockdnn_core::numeric::{dequantize, quantize};
use lockdnn_core::{forward_reference, Accumulator, FixedVal, Layer, LayerKind, Model, QFormat, Shape};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{to_tensor, Sample, ToyDataset};
use crate::error::Error;

/// Layer sequence plus input extent and class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub input: Shape,
    pub classes: usize,
    pub layers: Vec<LayerKind>,
}

impl Arch {
    /// conv3x3(1->8) / maxpool 2 / relu / fc(128->32) / relu / fc(32->classes)
    pub fn toy_cnn(classes: usize) -> Self {
        Arch::cnn(classes, 8, 32)
    }

    /// conv3x3(1->channels) on 1x8x8 / maxpool 2 / relu / fc(->hidden) /
    /// relu / fc(hidden->classes)
    pub fn cnn(classes: usize, channels: usize, hidden: usize) -> Self {
        Arch {
            input: Shape::new(1, 8, 8),
            classes,
            layers: vec![
                LayerKind::Conv2d { in_channels: 1, out_channels: channels, kernel: 3, stride: 1, padding: 1 },
                LayerKind::MaxPool { kernel: 2, stride: 2 },
                LayerKind::Relu,
                LayerKind::Fc { in_features: channels * 16, out_features: hidden },
                LayerKind::Relu,
                LayerKind::Fc { in_features: hidden, out_features: classes },
            ],
        }
    }

    /// Single fc layer.
    pub fn linear(input: Shape, classes: usize) -> Self {
        Arch { input, classes, layers: vec![LayerKind::Fc { in_features: input.len(), out_features: classes }] }
    }

    /// Checks the layer sequence with the fixed-point model's rules.
    pub fn validate(&self) -> Result<(), Error> {
        let layers =
            self.layers.iter().map(|k| Layer::new(*k, vec![0; k.weight_len()], vec![0; k.bias_len()])).collect();
        Model {
            name: String::new(),
            qformat: QFormat::Q8_8,
            accumulator: Accumulator::Saturating,
            classes: self.classes,
            input: self.input,
            layers,
            obfuscation: None,
        }
        .validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloatLayer {
    pub kind: LayerKind,
    pub w: Vec<f32>,
    pub b: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloatNet {
    pub input: Shape,
    pub classes: usize,
    pub layers: Vec<FloatLayer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm clip per step.
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams { epochs: 30, batch_size: 16, lr: 0.02, max_grad_norm: 5.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainStats {
    pub steps: usize,
    pub final_loss: f64,
}

impl FloatNet {
    /// He-uniform weights, zero biases.
    pub fn init(arch: &Arch, seed: u64) -> Result<Self, Error> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .layers
            .iter()
            .map(|k| {
                let n = k.weight_len();
                let fan_in = match *k {
                    LayerKind::Conv2d { in_channels, kernel, .. } => in_channels * kernel * kernel,
                    LayerKind::Fc { in_features, .. } => in_features,
                    _ => 1,
                };
                let a = (6.0 / fan_in as f64).sqrt() as f32;
                FloatLayer { kind: *k, w: (0..n).map(|_| rng.gen_range(-a..a)).collect(), b: vec![0.0; k.bias_len()] }
            })
            .collect();
        Ok(FloatNet { input: arch.input, classes: arch.classes, layers })
    }

    /// Real-valued view of a fixed-point model (biases as stored).
    pub fn from_model(model: &Model) -> Self {
        let q = model.qformat;
        let deq = |v: &[i32]| v.iter().map(|&r| dequantize(FixedVal::from_raw(r as i64, q)) as f32).collect();
        FloatNet {
            input: model.input,
            classes: model.classes,
            layers: model
                .layers
                .iter()
                .map(|l| FloatLayer { kind: l.kind, w: deq(&l.weight), b: deq(&l.bias) })
                .collect(),
        }
    }

    pub fn arch(&self) -> Arch {
        Arch { input: self.input, classes: self.classes, layers: self.layers.iter().map(|l| l.kind).collect() }
    }

    /// Round-half-even, saturating quantization of every parameter.
    pub fn quantize(&self, name: &str, q: QFormat, accumulator: Accumulator) -> Result<Model, Error> {
        let qv = |v: &[f32]| v.iter().map(|&x| quantize(x as f64, q).raw()).collect();
        let model = Model {
            name: name.to_string(),
            qformat: q,
            accumulator,
            classes: self.classes,
            input: self.input,
            layers: self.layers.iter().map(|l| Layer::new(l.kind, qv(&l.w), qv(&l.b))).collect(),
            obfuscation: None,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn logits(&self, x: &[f32]) -> Vec<f32> {
        let mut cur = x.to_vec();
        let mut shape = self.input;
        for l in &self.layers {
            let (next, s) = layer_forward(l, &cur, shape);
            cur = next;
            shape = s;
        }
        cur
    }

    pub fn predict(&self, x: &[f32]) -> usize {
        let z = self.logits(x);
        let mut best = 0;
        for (i, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = i;
            }
        }
        best
    }

    /// Adds this sample's gradients into `grads`; returns its loss.
    fn accumulate(&self, s: &Sample, grads: &mut [FloatLayer]) -> f64 {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        acts.push(s.x.clone());
        shapes.push(self.input);
        for l in &self.layers {
            let (next, sh) = layer_forward(l, acts.last().unwrap(), *shapes.last().unwrap());
            acts.push(next);
            shapes.push(sh);
        }
        let z = acts.last().unwrap();
        let zmax = z.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = z.iter().map(|&v| (v as f64 - zmax).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let loss = sum.ln() + zmax - z[s.label] as f64;
        let mut delta: Vec<f32> = exps.iter().map(|&e| (e / sum) as f32).collect();
        delta[s.label] -= 1.0;
        for i in (0..self.layers.len()).rev() {
            delta = layer_backward(&self.layers[i], &acts[i], shapes[i], &acts[i + 1], &delta, &mut grads[i], i > 0);
        }
        loss
    }

    /// Mini-batch SGD on softmax cross-entropy. Single-threaded and
    /// deterministic for a given seed.
    pub fn train(&mut self, data: &[Sample], p: &TrainParams) -> Result<TrainStats, Error> {
        if data.is_empty() || p.batch_size == 0 || !p.lr.is_finite() || p.lr <= 0.0 {
            return Err(Error::Usage("training needs samples, a batch size and a positive learning rate".into()));
        }
        if let Some(s) = data.iter().find(|s| s.label >= self.classes || s.x.len() != self.input.len()) {
            return Err(Error::Dataset(format!(
                "sample with label {} and {} features does not fit the network",
                s.label,
                s.x.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut grads = self.zero_grads();
        let mut steps = 0;
        let mut final_loss = f64::NAN;
        for epoch in 0..p.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(p.batch_size) {
                grads.iter_mut().for_each(|g| {
                    g.w.fill(0.0);
                    g.b.fill(0.0);
                });
                for &i in batch {
                    epoch_loss += self.accumulate(&data[i], &mut grads);
                }
                if !epoch_loss.is_finite() {
                    return Err(Error::Divergence { epoch });
                }
                let scale = 1.0 / batch.len() as f64;
                let norm = grads
                    .iter()
                    .flat_map(|g| g.w.iter().chain(&g.b))
                    .map(|&v| (v as f64 * scale).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let clip = if norm > p.max_grad_norm { p.max_grad_norm / norm } else { 1.0 };
                let step = (p.lr * scale * clip) as f32;
                for (l, g) in self.layers.iter_mut().zip(&grads) {
                    l.w.iter_mut().zip(&g.w).for_each(|(w, d)| *w -= step * d);
                    l.b.iter_mut().zip(&g.b).for_each(|(b, d)| *b -= step * d);
                }
                steps += 1;
            }
            final_loss = epoch_loss / data.len() as f64;
        }
        Ok(TrainStats { steps, final_loss })
    }

    fn zero_grads(&self) -> Vec<FloatLayer> {
        self.layers
            .iter()
            .map(|l| FloatLayer { kind: l.kind, w: vec![0.0; l.w.len()], b: vec![0.0; l.b.len()] })
            .collect()
    }
}

fn layer_forward(l: &FloatLayer, x: &[f32], shape: Shape) -> (Vec<f32>, Shape) {
    let out_shape = l.kind.output_shape(shape).expect("architecture validated");
    let mut out = vec![0.0f32; out_shape.len()];
    match l.kind {
        LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
            let ksq = kernel * kernel;
            for oc in 0..out_channels {
                for oy in 0..out_shape.height {
                    for ox in 0..out_shape.width {
                        let mut acc = l.b[oc];
                        for_taps(shape, kernel, stride, padding, oy, ox, |ky, kx, iy, ix| {
                            for ic in 0..in_channels {
                                acc += l.w[(oc * in_channels + ic) * ksq + ky * kernel + kx]
                                    * x[(ic * shape.height + iy) * shape.width + ix];
                            }
                        });
                        out[(oc * out_shape.height + oy) * out_shape.width + ox] = acc;
                    }
                }
            }
        }
        LayerKind::Fc { in_features, .. } => {
            for (o, v) in out.iter_mut().enumerate() {
                let row = &l.w[o * in_features..(o + 1) * in_features];
                *v = l.b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>();
            }
        }
        LayerKind::MaxPool { kernel, stride } => {
            for c in 0..out_shape.channels {
                for oy in 0..out_shape.height {
                    for ox in 0..out_shape.width {
                        let (_, v) = window_max(x, shape, c, oy, ox, kernel, stride);
                        out[(c * out_shape.height + oy) * out_shape.width + ox] = v;
                    }
                }
            }
        }
        LayerKind::Relu => out.iter_mut().zip(x).for_each(|(o, &v)| *o = v.max(0.0)),
    }
    (out, out_shape)
}

/// Returns `dL/dx` (empty when `need_dx` is false) and accumulates the
/// parameter gradients into `g`.
fn layer_backward(
    l: &FloatLayer,
    x: &[f32],
    shape: Shape,
    y: &[f32],
    dy: &[f32],
    g: &mut FloatLayer,
    need_dx: bool,
) -> Vec<f32> {
    let mut dx = if need_dx { vec![0.0f32; x.len()] } else { Vec::new() };
    let out_shape = l.kind.output_shape(shape).expect("architecture validated");
    match l.kind {
        LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
            let ksq = kernel * kernel;
            for oc in 0..out_channels {
                for oy in 0..out_shape.height {
                    for ox in 0..out_shape.width {
                        let d = dy[(oc * out_shape.height + oy) * out_shape.width + ox];
                        if d == 0.0 {
                            continue;
                        }
                        g.b[oc] += d;
                        for_taps(shape, kernel, stride, padding, oy, ox, |ky, kx, iy, ix| {
                            for ic in 0..in_channels {
                                let wi = (oc * in_channels + ic) * ksq + ky * kernel + kx;
                                let xi = (ic * shape.height + iy) * shape.width + ix;
                                g.w[wi] += d * x[xi];
                                if need_dx {
                                    dx[xi] += d * l.w[wi];
                                }
                            }
                        });
                    }
                }
            }
        }
        LayerKind::Fc { in_features, .. } => {
            for (o, &d) in dy.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.b[o] += d;
                let row = o * in_features;
                for j in 0..in_features {
                    g.w[row + j] += d * x[j];
                    if need_dx {
                        dx[j] += d * l.w[row + j];
                    }
                }
            }
        }
        LayerKind::MaxPool { kernel, stride } => {
            if need_dx {
                for c in 0..out_shape.channels {
                    for oy in 0..out_shape.height {
                        for ox in 0..out_shape.width {
                            let (at, _) = window_max(x, shape, c, oy, ox, kernel, stride);
                            dx[at] += dy[(c * out_shape.height + oy) * out_shape.width + ox];
                        }
                    }
                }
            }
        }
        LayerKind::Relu => {
            if need_dx {
                for i in 0..dx.len() {
                    if y[i] > 0.0 {
                        dx[i] = dy[i];
                    }
                }
            }
        }
    }
    dx
}

fn for_taps(
    shape: Shape,
    kernel: usize,
    stride: usize,
    padding: usize,
    oy: usize,
    ox: usize,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    for ky in 0..kernel {
        let Some(iy) = (oy * stride + ky).checked_sub(padding).filter(|&v| v < shape.height) else {
            continue;
        };
        for kx in 0..kernel {
            let Some(ix) = (ox * stride + kx).checked_sub(padding).filter(|&v| v < shape.width) else {
                continue;
            };
            f(ky, kx, iy, ix);
        }
    }
}

/// Flat index and value of the first maximum in a pooling window.
fn window_max(x: &[f32], shape: Shape, c: usize, oy: usize, ox: usize, kernel: usize, stride: usize) -> (usize, f32) {
    let mut best = (usize::MAX, f32::NEG_INFINITY);
    for ky in 0..kernel {
        for kx in 0..kernel {
            let i = (c * shape.height + oy * stride + ky) * shape.width + ox * stride + kx;
            if best.0 == usize::MAX || x[i] > best.1 {
                best = (i, x[i]);
            }
        }
    }
    best
}

/// Top-1 accuracy in percent of the float network.
pub fn accuracy_float(net: &FloatNet, samples: &[Sample]) -> f64 {
    let hits = samples.iter().filter(|s| net.predict(&s.x) == s.label).count();
    100.0 * hits as f64 / samples.len().max(1) as f64
}

/// Top-1 accuracy in percent of the fixed-point reference forward pass on
/// quantized inputs.
pub fn accuracy_fixed(model: &Model, samples: &[Sample]) -> Result<f64, Error> {
    let hits = samples
        .par_iter()
        .map(|s| {
            let out = forward_reference(model, &to_tensor(s, model.input, model.qformat))?;
            Ok(usize::from(argmax(out.data()) == s.label))
        })
        .collect::<Result<Vec<usize>, lockdnn_core::Error>>()?
        .into_iter()
        .sum::<usize>();
    Ok(100.0 * hits as f64 / samples.len().max(1) as f64)
}

/// Largest tolerated drop from float to fixed-point test accuracy.
pub const MAX_QUANTIZATION_GAP: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct Trained {
    pub net: FloatNet,
    pub model: Model,
    pub float_accuracy: f64,
    pub fixed_accuracy: f64,
    pub stats: TrainStats,
}

/// Trains from a seeded init on the full training split, quantizes, and
/// checks the fixed-point test accuracy against the float one.
pub fn train_toy(arch: &Arch, data: &ToyDataset, p: &TrainParams, q: QFormat, name: &str) -> Result<Trained, Error> {
    if arch.input != data.shape || arch.classes != data.classes {
        return Err(Error::Dataset(format!(
            "architecture takes {:?} with {} classes, data has {:?} with {}",
            arch.input, arch.classes, data.shape, data.classes
        )));
    }
    let mut net = FloatNet::init(arch, p.seed)?;
    let stats = net.train(&data.train, p)?;
    let model = net.quantize(name, q, Accumulator::Saturating)?;
    let float_accuracy = accuracy_float(&net, &data.test);
    let fixed_accuracy = accuracy_fixed(&model, &data.test)?;
    if float_accuracy - fixed_accuracy > MAX_QUANTIZATION_GAP {
        return Err(Error::QuantizationGap { float: float_accuracy, fixed: fixed_accuracy });
    }
    Ok(Trained { net, model, float_accuracy, fixed_accuracy, stats })
}
