#![allow(dead_code)]

use lockdnn_core::keying::CounterRng;
use lockdnn_core::{Accumulator, Layer, LayerKind, Model, QFormat, Shape, Tensor};

/// Small CNN with seeded weights: conv 1->4 (3x3, pad 1), maxpool 2, relu,
/// fc 64->16, relu, fc 16->5.
pub fn toy_cnn(seed: u64) -> Model {
    let mut rng = CounterRng::new(seed);
    let mut w = |n: usize, spread: i32| -> Vec<i32> {
        (0..n).map(|_| rng.below(2 * spread as u64 + 1) as i32 - spread).collect()
    };
    Model {
        name: "toy".into(),
        qformat: QFormat::Q8_8,
        accumulator: Accumulator::Saturating,
        classes: 5,
        input: Shape::new(1, 8, 8),
        layers: vec![
            Layer::new(
                LayerKind::Conv2d { in_channels: 1, out_channels: 4, kernel: 3, stride: 1, padding: 1 },
                w(36, 200),
                w(4, 100),
            ),
            Layer::maxpool(2, 2),
            Layer::relu(),
            Layer::new(LayerKind::Fc { in_features: 64, out_features: 16 }, w(1024, 60), w(16, 150)),
            Layer::relu(),
            Layer::new(LayerKind::Fc { in_features: 16, out_features: 5 }, w(80, 120), w(5, 80)),
        ],
        obfuscation: None,
    }
}

pub fn inputs(seed: u64, n: usize, shape: Shape) -> Vec<Tensor> {
    let mut rng = CounterRng::new(seed);
    (0..n)
        .map(|_| {
            let data = (0..shape.len()).map(|_| rng.below(1025) as i32 - 512).collect();
            Tensor::new(shape, data).unwrap()
        })
        .collect()
}
