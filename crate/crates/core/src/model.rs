//! Tensors, layers, and the fixed-point reference forward pass.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::numeric::{Accumulator, QFormat};

/// Extents of one feature map (channels, rows, columns).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape { channels, height, width }
    }

    pub const fn vector(len: usize) -> Self {
        Shape::new(len, 1, 1)
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One sample's feature map in CHW order. Batches are slices of tensors.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Tensor {
    shape: Shape,
    data: Vec<i32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<i32>) -> Result<Self, Error> {
        if shape.is_empty() {
            return Err(Error::ShapeMismatch(format!("empty extent {shape:?}")));
        }
        if shape.len() != data.len() {
            return Err(Error::ShapeMismatch(format!("{shape:?} holds {} elements, got {}", shape.len(), data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![0; shape.len()] }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [i32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<i32> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> i32 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum LayerKind {
    /// Weights laid out `[out][in][ky][kx]`, one bias per output channel.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Weights laid out `[out][in]`; the input map is flattened in CHW order.
    Fc {
        in_features: usize,
        out_features: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    /// ReLU stage. On the accelerator this is the locked ReLU, match
    /// detector and compressor whose output goes to memory.
    Relu,
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Fc { .. })
    }

    pub fn weight_len(&self) -> usize {
        match *self {
            LayerKind::Conv2d { in_channels, out_channels, kernel, .. } => out_channels * in_channels * kernel * kernel,
            LayerKind::Fc { in_features, out_features } => out_features * in_features,
            _ => 0,
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            LayerKind::Conv2d { out_channels, .. } => out_channels,
            LayerKind::Fc { out_features, .. } => out_features,
            _ => 0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Fc { .. } => "fc",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Relu => "relu",
        }
    }

    /// Output extent for a given input extent.
    pub fn output_shape(&self, input: Shape) -> Result<Shape, Error> {
        match *self {
            LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                if input.channels != in_channels {
                    return Err(Error::ShapeMismatch(format!(
                        "conv2d expects {in_channels} input channels, got {}",
                        input.channels
                    )));
                }
                if kernel == 0 || stride == 0 {
                    return Err(Error::InvalidLayer("conv2d kernel and stride must be nonzero".into()));
                }
                let (ph, pw) = (input.height + 2 * padding, input.width + 2 * padding);
                if ph < kernel || pw < kernel {
                    return Err(Error::ShapeMismatch(format!(
                        "conv2d kernel {kernel} larger than padded input {ph}x{pw}"
                    )));
                }
                Ok(Shape::new(out_channels, (ph - kernel) / stride + 1, (pw - kernel) / stride + 1))
            }
            LayerKind::Fc { in_features, out_features } => {
                if input.len() != in_features {
                    return Err(Error::ShapeMismatch(format!("fc expects {in_features} inputs, got {}", input.len())));
                }
                Ok(Shape::vector(out_features))
            }
            LayerKind::MaxPool { kernel, stride } => {
                if kernel == 0 || stride == 0 {
                    return Err(Error::InvalidLayer("maxpool kernel and stride must be nonzero".into()));
                }
                if input.height < kernel || input.width < kernel {
                    return Err(Error::ShapeMismatch(format!(
                        "maxpool window {kernel} larger than input {}x{}",
                        input.height, input.width
                    )));
                }
                Ok(Shape::new(
                    input.channels,
                    (input.height - kernel) / stride + 1,
                    (input.width - kernel) / stride + 1,
                ))
            }
            LayerKind::Relu => Ok(input),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Layer {
    pub kind: LayerKind,
    pub weight: Vec<i32>,
    pub bias: Vec<i32>,
}

impl Layer {
    pub fn new(kind: LayerKind, weight: Vec<i32>, bias: Vec<i32>) -> Self {
        Layer { kind, weight, bias }
    }

    pub fn relu() -> Self {
        Layer::new(LayerKind::Relu, Vec::new(), Vec::new())
    }

    pub fn maxpool(kernel: usize, stride: usize) -> Self {
        Layer::new(LayerKind::MaxPool { kernel, stride }, Vec::new(), Vec::new())
    }
}

/// Public description of how biases were masked. The mask values themselves
/// are never part of a model.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ObfuscationMeta {
    pub groups: u32,
    pub msb_bits: u32,
    /// Group id of every bias, one list per layer (empty for parameter-free layers).
    pub group_map: Vec<Vec<u32>>,
    /// Groups whose biases are masked.
    pub masked_groups: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Model {
    pub name: String,
    pub qformat: QFormat,
    pub accumulator: Accumulator,
    pub classes: usize,
    pub input: Shape,
    pub layers: Vec<Layer>,
    pub obfuscation: Option<ObfuscationMeta>,
}

impl Model {
    pub fn is_obfuscated(&self) -> bool {
        self.obfuscation.is_some()
    }

    /// Checks parameter extents, shape composition and the pipeline order
    /// (conv/fc, optional maxpool, then ReLU), returning each layer's output
    /// extent.
    pub fn validate(&self) -> Result<Vec<Shape>, Error> {
        if self.layers.is_empty() {
            return Err(Error::InvalidLayer("model has no layers".into()));
        }
        if self.input.is_empty() {
            return Err(Error::ShapeMismatch("empty input extent".into()));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let k = &layer.kind;
            if layer.weight.len() != k.weight_len() || layer.bias.len() != k.bias_len() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} ({}) expects {} weights and {} biases, got {} and {}",
                    k.name(),
                    k.weight_len(),
                    k.bias_len(),
                    layer.weight.len(),
                    layer.bias.len()
                )));
            }
            if let Some(bad) = layer.weight.iter().chain(&layer.bias).find(|&&v| !self.qformat.contains(v)) {
                return Err(Error::InvalidLayer(format!("layer {i} holds out-of-range word {bad}")));
            }
            let prev = if i == 0 { None } else { Some(&self.layers[i - 1].kind) };
            match k {
                LayerKind::MaxPool { .. } => {
                    if !prev.is_some_and(LayerKind::has_params) {
                        return Err(Error::InvalidLayer(format!(
                            "layer {i}: maxpool must directly follow conv2d or fc"
                        )));
                    }
                }
                LayerKind::Relu => {
                    if !prev.is_some_and(|p| p.has_params() || matches!(p, LayerKind::MaxPool { .. })) {
                        return Err(Error::InvalidLayer(format!("layer {i}: relu must follow conv2d, fc or maxpool")));
                    }
                }
                _ => {
                    if prev.is_some_and(|p| !matches!(p, LayerKind::Relu)) {
                        return Err(Error::InvalidLayer(format!("layer {i}: {} must consume a relu output", k.name())));
                    }
                }
            }
            if i == last && !k.has_params() && !matches!(k, LayerKind::Relu) {
                return Err(Error::InvalidLayer("model must end in conv2d, fc or relu".into()));
            }
            cur = k.output_shape(cur).map_err(|e| match e {
                Error::ShapeMismatch(m) => Error::ShapeMismatch(format!("layer {i}: {m}")),
                other => other,
            })?;
            shapes.push(cur);
        }
        if cur.len() != self.classes {
            return Err(Error::ShapeMismatch(format!("model emits {} values for {} classes", cur.len(), self.classes)));
        }
        Ok(shapes)
    }

    /// Number of MAC operations for one sample.
    pub fn mac_count(&self) -> Result<u64, Error> {
        let shapes = self.validate()?;
        Ok(self
            .layers
            .iter()
            .zip(&shapes)
            .map(|(l, out)| match l.kind {
                LayerKind::Conv2d { in_channels, kernel, .. } => (out.len() * in_channels * kernel * kernel) as u64,
                LayerKind::Fc { in_features, .. } => (out.len() * in_features) as u64,
                _ => 0,
            })
            .sum())
    }

    pub fn bias_count(&self) -> usize {
        self.layers.iter().map(|l| l.bias.len()).sum()
    }
}

/// Pre-bias MAC sums of a conv2d or fc layer. Taps are accumulated in
/// `(in_channel, ky, kx)` order; padded taps are skipped.
pub(crate) fn mac_sums(layer: &Layer, input: &Tensor, q: QFormat, acc: Accumulator) -> Result<Tensor, Error> {
    let out_shape = layer.kind.output_shape(input.shape())?;
    let mut out = Tensor::zeros(out_shape);
    match layer.kind {
        LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
            let s = input.shape();
            let ksq = kernel * kernel;
            for oc in 0..out_channels {
                let wbase = oc * in_channels * ksq;
                for oy in 0..out_shape.height {
                    for ox in 0..out_shape.width {
                        let taps = (0..in_channels)
                            .flat_map(|ic| (0..kernel).flat_map(move |ky| (0..kernel).map(move |kx| (ic, ky, kx))));
                        let pairs = taps.filter_map(|(ic, ky, kx)| {
                            let iy = (oy * stride + ky).checked_sub(padding)?;
                            let ix = (ox * stride + kx).checked_sub(padding)?;
                            if iy >= s.height || ix >= s.width {
                                return None;
                            }
                            let w = layer.weight[wbase + ic * ksq + ky * kernel + kx];
                            Some((w, input.at(ic, iy, ix)))
                        });
                        let idx = (oc * out_shape.height + oy) * out_shape.width + ox;
                        out.data[idx] = acc.dot(q, pairs);
                    }
                }
            }
        }
        LayerKind::Fc { in_features, out_features } => {
            let x = input.data();
            for o in 0..out_features {
                let row = &layer.weight[o * in_features..(o + 1) * in_features];
                out.data[o] = acc.dot(q, row.iter().copied().zip(x.iter().copied()));
            }
        }
        _ => return Err(Error::InvalidLayer(format!("{} has no MAC stage", layer.kind.name()))),
    }
    Ok(out)
}

/// Channel whose bias is added to element `idx` of a map with extent `shape`.
#[inline]
pub(crate) fn bias_index(shape: Shape, idx: usize) -> usize {
    idx / (shape.height * shape.width)
}

pub(crate) fn maxpool(input: &Tensor, kernel: usize, stride: usize) -> Result<Tensor, Error> {
    let kind = LayerKind::MaxPool { kernel, stride };
    let out_shape = kind.output_shape(input.shape())?;
    let mut out = Tensor::zeros(out_shape);
    for c in 0..out_shape.channels {
        for oy in 0..out_shape.height {
            for ox in 0..out_shape.width {
                let mut m = i32::MIN;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        m = m.max(input.at(c, oy * stride + ky, ox * stride + kx));
                    }
                }
                out.data[(c * out_shape.height + oy) * out_shape.width + ox] = m;
            }
        }
    }
    Ok(out)
}

/// Plain fixed-point inference: no keys, no locking, no compression.
pub fn forward_reference(model: &Model, input: &Tensor) -> Result<Tensor, Error> {
    model.validate()?;
    if input.shape() != model.input {
        return Err(Error::ShapeMismatch(format!("model expects input {:?}, got {:?}", model.input, input.shape())));
    }
    let q = model.qformat;
    let mut cur = input.clone();
    for layer in &model.layers {
        cur = match layer.kind {
            LayerKind::Conv2d { .. } | LayerKind::Fc { .. } => {
                let mut t = mac_sums(layer, &cur, q, model.accumulator)?;
                let shape = t.shape();
                for (i, v) in t.data.iter_mut().enumerate() {
                    *v = q.saturate(*v as i64 + layer.bias[bias_index(shape, i)] as i64);
                }
                t
            }
            LayerKind::MaxPool { kernel, stride } => maxpool(&cur, kernel, stride)?,
            LayerKind::Relu => {
                let mut t = cur;
                t.data.iter_mut().for_each(|v| *v = (*v).max(0));
                t
            }
        };
    }
    Ok(cur)
}

/// Index of the largest logit; ties resolve to the lowest index.
pub fn argmax(logits: &[i32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::quantize;
    use num_bigint::BigInt;
    use proptest::prelude::*;

    const Q: QFormat = QFormat::Q8_8;

    fn conv(in_c: usize, out_c: usize, k: usize, pad: usize, weight: Vec<i32>, bias: Vec<i32>) -> Layer {
        Layer::new(
            LayerKind::Conv2d { in_channels: in_c, out_channels: out_c, kernel: k, stride: 1, padding: pad },
            weight,
            bias,
        )
    }

    fn model(input: Shape, classes: usize, layers: Vec<Layer>) -> Model {
        Model {
            name: "t".into(),
            qformat: Q,
            accumulator: Accumulator::Saturating,
            classes,
            input,
            layers,
            obfuscation: None,
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_logits() {
        let m = model(
            Shape::new(1, 4, 4),
            2,
            vec![
                conv(1, 2, 3, 1, vec![77; 18], vec![0, 0]),
                Layer::relu(),
                Layer::new(LayerKind::Fc { in_features: 32, out_features: 2 }, vec![-300; 64], vec![0, 0]),
            ],
        );
        let out = forward_reference(&m, &Tensor::zeros(Shape::new(1, 4, 4))).unwrap();
        assert_eq!(out.data(), &[0, 0]);
    }

    #[test]
    fn identity_kernel_passes_nonnegative_map() {
        let mut w = vec![0; 9];
        w[4] = 256;
        let m = model(Shape::new(1, 5, 5), 25, vec![conv(1, 1, 3, 1, w, vec![0]), Layer::relu()]);
        let data: Vec<i32> = (0..25).map(|i| i * 37 % 1000).collect();
        let x = Tensor::new(Shape::new(1, 5, 5), data.clone()).unwrap();
        assert_eq!(forward_reference(&m, &x).unwrap().data(), &data[..]);
    }

    /// Independent forward pass of a two-layer MLP in big integers.
    fn mlp_oracle(w1: &[i32], b1: &[i32], w2: &[i32], b2: &[i32], x: &[i32]) -> Vec<i64> {
        let clamp = |v: BigInt| -> BigInt {
            let lo = BigInt::from(-32768);
            let hi = BigInt::from(32767);
            if v < lo {
                lo
            } else if v > hi {
                hi
            } else {
                v
            }
        };
        let round = |p: BigInt| -> BigInt {
            // round-half-even of p / 256
            let d = BigInt::from(256);
            let mut q = &p / &d;
            let mut r = &p - &q * &d;
            if r < BigInt::from(0) {
                q -= 1;
                r += &d;
            }
            let twice = &r * 2;
            if twice > d || (twice == d && (&q % 2 != BigInt::from(0))) {
                q + 1
            } else {
                q
            }
        };
        let layer = |w: &[i32], b: &[i32], x: &[BigInt], relu: bool| -> Vec<BigInt> {
            let n_in = x.len();
            b.iter()
                .enumerate()
                .map(|(o, &bias)| {
                    let mut acc = BigInt::from(0);
                    for i in 0..n_in {
                        acc = clamp(acc + round(BigInt::from(w[o * n_in + i]) * &x[i]));
                    }
                    let v = clamp(acc + BigInt::from(bias));
                    if relu && v < BigInt::from(0) {
                        BigInt::from(0)
                    } else {
                        v
                    }
                })
                .collect()
        };
        let xs: Vec<BigInt> = x.iter().map(|&v| BigInt::from(v)).collect();
        let h = layer(w1, b1, &xs, true);
        layer(w2, b2, &h, false).into_iter().map(|v| i64::try_from(v).unwrap()).collect()
    }

    #[test]
    fn toy_mlp_matches_big_integer_oracle() {
        let r = |x: f64| quantize(x, Q).raw();
        let w1: Vec<i32> =
            [0.5, -1.25, 2.0, 0.75, -0.5, 1.5, 3.0, -2.0, 0.125, 0.25, -0.75, 1.0].iter().map(|&v| r(v)).collect();
        let b1 = vec![r(0.1), r(-0.3), r(0.7)];
        let w2: Vec<i32> = [1.0, -0.5, 0.25, -1.5, 2.0, 0.5].iter().map(|&v| r(v)).collect();
        let b2 = vec![r(-0.2), r(0.4)];
        let m = model(
            Shape::vector(4),
            2,
            vec![
                Layer::new(LayerKind::Fc { in_features: 4, out_features: 3 }, w1.clone(), b1.clone()),
                Layer::relu(),
                Layer::new(LayerKind::Fc { in_features: 3, out_features: 2 }, w2.clone(), b2.clone()),
            ],
        );
        let samples =
            [[1.0, 2.0, -1.0, 0.5], [-3.0, 0.25, 4.0, 1.0], [0.0, 0.0, 0.0, 0.0], [100.0, -90.0, 80.0, 120.0]];
        for s in samples {
            let x: Vec<i32> = s.iter().map(|&v| r(v)).collect();
            let got = forward_reference(&m, &Tensor::new(Shape::vector(4), x.clone()).unwrap()).unwrap();
            let want = mlp_oracle(&w1, &b1, &w2, &b2, &x);
            let got: Vec<i64> = got.data().iter().map(|&v| v as i64).collect();
            assert_eq!(got, want, "sample {s:?}");
        }
    }

    #[test]
    fn composition_errors() {
        // conv 3 -> 8 channels, fc expects the wrong flattened size
        let m = model(
            Shape::new(3, 4, 4),
            10,
            vec![
                conv(3, 8, 3, 1, vec![0; 8 * 27], vec![0; 8]),
                Layer::relu(),
                Layer::new(LayerKind::Fc { in_features: 100, out_features: 10 }, vec![0; 1000], vec![0; 10]),
            ],
        );
        assert!(matches!(m.validate(), Err(Error::ShapeMismatch(_))));

        let m = model(
            Shape::vector(4),
            2,
            vec![Layer::new(LayerKind::Fc { in_features: 4, out_features: 2 }, vec![0; 7], vec![0; 2])],
        );
        assert!(matches!(m.validate(), Err(Error::ShapeMismatch(_))));

        // two MAC layers back to back without a relu stage
        let m = model(
            Shape::vector(4),
            2,
            vec![
                Layer::new(LayerKind::Fc { in_features: 4, out_features: 4 }, vec![0; 16], vec![0; 4]),
                Layer::new(LayerKind::Fc { in_features: 4, out_features: 2 }, vec![0; 8], vec![0; 2]),
            ],
        );
        assert!(matches!(m.validate(), Err(Error::InvalidLayer(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let m = model(
            Shape::new(2, 6, 6),
            8 * 2 * 2,
            vec![
                conv(
                    2,
                    8,
                    3,
                    0,
                    (0..144).map(|i| (i * 97 % 512) - 256).collect(),
                    (0..8).map(|i| i * 40 - 160).collect(),
                ),
                Layer::maxpool(2, 2),
                Layer::relu(),
            ],
        );
        let x = Tensor::new(Shape::new(2, 6, 6), (0..72).map(|i| (i * 131 % 700) - 350).collect()).unwrap();
        let a = forward_reference(&m, &x).unwrap();
        let b = forward_reference(&m, &x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), Shape::new(8, 2, 2));
    }

    proptest! {
        #[test]
        fn maxpool_matches_sliding_window(c in 1usize..3, h in 1usize..9, w in 1usize..9, k in 1usize..4, s in 1usize..4, seed in any::<u64>()) {
            prop_assume!(h >= k && w >= k);
            let shape = Shape::new(c, h, w);
            let data: Vec<i32> = (0..shape.len()).map(|i| ((i as u64).wrapping_mul(seed | 1) >> 7) as i32 % 4000 - 2000).collect();
            let t = Tensor::new(shape, data).unwrap();
            let out = maxpool(&t, k, s).unwrap();
            let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
            prop_assert_eq!(out.shape(), Shape::new(c, oh, ow));
            // naive oracle: scan every window origin reachable by stride
            let mut want = Vec::new();
            for ch in 0..c {
                let mut y = 0;
                while y + k <= h {
                    let mut x = 0;
                    while x + k <= w {
                        let mut m = i32::MIN;
                        for dy in 0..k { for dx in 0..k { m = m.max(t.at(ch, y + dy, x + dx)); } }
                        want.push(m);
                        x += s;
                    }
                    y += s;
                }
            }
            prop_assert_eq!(out.data(), &want[..]);
        }
    }
}
