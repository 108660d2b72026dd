//! Seeded synthetic classification data and a CSV loader.
//!
//! Each class owns `clusters_per_class` prototypes drawn from
//! `N(0, spread^2)` per feature; a sample is a prototype plus `N(0, noise^2)`
//! noise. Train and test samples are drawn from disjoint RNG streams, so the
//! splits never share a sample.

use std::path::Path;

use lockdnn_core::numeric::quantize;
use lockdnn_core::{QFormat, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobParams {
    pub classes: usize,
    pub shape: Shape,
    pub clusters_per_class: usize,
    pub spread: f64,
    pub noise: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl BlobParams {
    /// The 10-class, 1x8x8 set used by the bundled toy model and the attack
    /// experiments.
    pub fn toy(seed: u64) -> Self {
        BlobParams {
            classes: 10,
            shape: Shape::new(1, 8, 8),
            clusters_per_class: 4,
            spread: 1.0,
            noise: 1.0,
            train_per_class: 200,
            test_per_class: 100,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f32>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub classes: usize,
    pub shape: Shape,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Generator parameters; `None` for loaded data.
    pub params: Option<BlobParams>,
}

const PROTO_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

impl ToyDataset {
    pub fn blobs(p: &BlobParams) -> Result<Self, Error> {
        if p.classes < 2 || p.clusters_per_class == 0 || p.shape.is_empty() {
            return Err(Error::Dataset(format!("degenerate generator parameters {p:?}")));
        }
        if p.train_per_class == 0 || p.test_per_class == 0 {
            return Err(Error::Dataset("both splits need samples".into()));
        }
        if !(p.spread.is_finite() && p.noise.is_finite() && p.spread >= 0.0 && p.noise >= 0.0) {
            return Err(Error::Dataset("spread and noise must be finite and non-negative".into()));
        }
        let dim = p.shape.len();
        let mut rng = stream(p.seed, PROTO_STREAM);
        let protos: Vec<Vec<f64>> = (0..p.classes * p.clusters_per_class)
            .map(|_| (0..dim).map(|_| p.spread * normal(&mut rng)).collect())
            .collect();
        let draw = |id: u64, per_class: usize| {
            let mut rng = stream(p.seed, id);
            let mut out = Vec::with_capacity(per_class * p.classes);
            for _ in 0..per_class {
                for label in 0..p.classes {
                    let k = rng.gen_range(0..p.clusters_per_class);
                    let proto = &protos[label * p.clusters_per_class + k];
                    let x = proto.iter().map(|&c| (c + p.noise * normal(&mut rng)) as f32).collect();
                    out.push(Sample { x, label });
                }
            }
            out
        };
        Ok(ToyDataset {
            classes: p.classes,
            shape: p.shape,
            train: draw(TRAIN_STREAM, p.train_per_class),
            test: draw(TEST_STREAM, p.test_per_class),
            params: Some(p.clone()),
        })
    }

    /// Reads `label,f0,f1,...` rows (no header). Rows are split class by
    /// class: the first `test_fraction` of each class's rows go to test.
    pub fn from_csv(path: &Path, shape: Shape, test_fraction: f64) -> Result<Self, Error> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Dataset(format!("test fraction {test_fraction} outside [0, 1)")));
        }
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
            let bad = |what: &str| Error::Dataset(format!("{}: row {}: {what}", path.display(), line + 1));
            let mut fields = rec.iter();
            let label: usize = fields
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| bad("label is not a non-negative integer"))?;
            let x: Vec<f32> = fields
                .map(|s| s.trim().parse::<f32>().ok().filter(|v| v.is_finite()))
                .collect::<Option<_>>()
                .ok_or_else(|| bad("feature is not a finite number"))?;
            if x.len() != shape.len() {
                return Err(bad(&format!("{} features, expected {}", x.len(), shape.len())));
            }
            rows.push(Sample { x, label });
        }
        let classes = rows.iter().map(|s| s.label + 1).max().unwrap_or(0);
        if classes < 2 {
            return Err(Error::Dataset(format!("{}: fewer than two classes", path.display())));
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for c in 0..classes {
            let of_class: Vec<&Sample> = rows.iter().filter(|s| s.label == c).collect();
            let n_test = (of_class.len() as f64 * test_fraction).round() as usize;
            for (i, s) in of_class.into_iter().enumerate() {
                if i < n_test {
                    test.push(s.clone());
                } else {
                    train.push(s.clone());
                }
            }
        }
        Ok(ToyDataset { classes, shape, train, test, params: None })
    }

    /// Class-balanced subset of the training split holding
    /// `round(fraction * per_class)` samples of each class (at least one).
    /// The choice is a seeded shuffle, so fractions with the same seed nest.
    pub fn thief_split(&self, fraction: f64, seed: u64) -> Result<Vec<Sample>, Error> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Dataset(format!("thief fraction {fraction} outside (0, 1]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for c in 0..self.classes {
            let mut idx: Vec<usize> = (0..self.train.len()).filter(|&i| self.train[i].label == c).collect();
            rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
            let take = ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len().max(1));
            out.extend(idx.into_iter().take(take).map(|i| self.train[i].clone()));
        }
        Ok(out)
    }

    pub fn chance(&self) -> f64 {
        100.0 / self.classes as f64
    }
}

/// Quantized copy of a sample, ready for the fixed-point path.
pub fn to_tensor(s: &Sample, shape: Shape, q: QFormat) -> Tensor {
    let data = s.x.iter().map(|&v| quantize(v as f64, q).raw()).collect();
    Tensor::new(shape, data).expect("sample length checked at construction")
}

pub fn to_tensors(samples: &[Sample], shape: Shape, q: QFormat) -> Vec<Tensor> {
    samples.iter().map(|s| to_tensor(s, shape, q)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> BlobParams {
        BlobParams { train_per_class: 20, test_per_class: 10, ..BlobParams::toy(seed) }
    }

    #[test]
    fn deterministic_and_balanced() {
        let a = ToyDataset::blobs(&small(3)).unwrap();
        let b = ToyDataset::blobs(&small(3)).unwrap();
        assert_eq!(a, b);
        for c in 0..10 {
            assert_eq!(a.train.iter().filter(|s| s.label == c).count(), 20);
            assert_eq!(a.test.iter().filter(|s| s.label == c).count(), 10);
        }
        assert_ne!(a, ToyDataset::blobs(&small(4)).unwrap());
    }

    #[test]
    fn splits_disjoint() {
        let d = ToyDataset::blobs(&small(1)).unwrap();
        for s in &d.test {
            assert!(!d.train.iter().any(|t| t.x == s.x));
        }
    }

    #[test]
    fn thief_split_nests_and_balances() {
        let d = ToyDataset::blobs(&small(1)).unwrap();
        let a = d.thief_split(0.1, 9).unwrap();
        let b = d.thief_split(0.5, 9).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(b.len(), 100);
        for c in 0..10 {
            let ca: Vec<_> = a.iter().filter(|s| s.label == c).collect();
            assert_eq!(ca.len(), 2);
            assert!(ca.iter().all(|s| b.contains(s)));
        }
        assert!(d.thief_split(0.0, 1).is_err());
        // tiny fractions still give every class one sample
        assert_eq!(d.thief_split(0.001, 1).unwrap().len(), 10);
    }

    #[test]
    fn bad_params() {
        let mut p = small(0);
        p.classes = 1;
        assert!(ToyDataset::blobs(&p).is_err());
        let mut p = small(0);
        p.noise = f64::NAN;
        assert!(ToyDataset::blobs(&p).is_err());
    }
}
