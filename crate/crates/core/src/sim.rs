//! Layer-by-layer accelerator run with memory and energy accounting.
//!
//! Per conv/fc layer the datapath is: MAC array, keyed bias adders,
//! optional max pooling, then at the ReLU stage the locked ReLU, the match
//! detectors, the compressor and a store to memory. The next layer reads the
//! map back through the T-restoring path. Element `e` of a stage (CHW order)
//! is handled by detector lane `e mod n_detectors`; bias `j` of a layer is
//! handled by the adder of its group in the model's group map.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::codec::{self, Format};
use crate::datapath::{readback, relu_locked_raw, restore_bias};
use crate::error::Error;
use crate::keying::{round_robin_groups, CounterRng, Hkey, HkeyConfig, KeyMaterial, Mkey, TVector};
use crate::model::{bias_index, mac_sums, maxpool, LayerKind, Model, Tensor};

/// Linear cost model. One MAC costs `mac_energy`; one byte moved to or from
/// DRAM costs `byte_energy` (25 per byte is 200 per 8-bit access).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EnergyModel {
    pub mac_energy: u64,
    pub byte_energy: u64,
    pub parallel_macs: u64,
    pub bytes_per_cycle: u64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        EnergyModel { mac_energy: 1, byte_energy: 25, parallel_macs: 64, bytes_per_cycle: 8 }
    }
}

/// What drives the detector outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum DetectorMode {
    /// Hkey match detectors as designed.
    #[default]
    Keyed,
    /// Detector output replaced by constant 0.
    StuckAtZero,
    /// Detector output replaced by constant 1.
    StuckAtOne,
}

/// Keyed bias adders: which groups take an Mkey segment and the gate
/// polarity of every group.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AdderBank {
    pub n_groups: u32,
    pub msb_bits: u32,
    pub masked_groups: Vec<u32>,
    pub polarity: Vec<u32>,
}

impl AdderBank {
    pub fn slot(&self, group: u32) -> Option<usize> {
        self.masked_groups.binary_search(&group).ok()
    }

    /// Mkey that makes every keyed adder transparent (`MK_i = P_i`), for
    /// running models that were never obfuscated.
    pub fn transparent_key(&self) -> Mkey {
        Mkey { segments: self.masked_groups.iter().map(|&g| self.polarity[g as usize]).collect() }
    }
}

/// A fabricated accelerator: T, the Hkey comparators and the keyed adders.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Device {
    pub t: TVector,
    pub hkey: HkeyConfig,
    pub adders: AdderBank,
    pub energy: EnergyModel,
}

impl Device {
    pub fn from_keys(keys: &KeyMaterial) -> Self {
        Device {
            t: keys.t,
            hkey: keys.hkey.clone(),
            adders: AdderBank {
                n_groups: keys.mkey.n_groups,
                msb_bits: keys.mkey.msb_bits,
                masked_groups: keys.mkey.masked_groups.clone(),
                polarity: keys.mkey.polarity.clone(),
            },
            energy: EnergyModel::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    pub format: Format,
    pub detectors: DetectorMode,
}

/// Accounting for one layer, summed over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct LayerReport {
    pub layer: usize,
    pub kind: &'static str,
    pub mac_count: u64,
    /// Elements passing the ReLU stage (zero for other layers).
    pub elements: u64,
    /// Elements whose plain ReLU output is zero.
    pub zeros: u64,
    /// Elements the detectors discarded.
    pub flagged: u64,
    pub stored_bits: u64,
    /// Bits the same maps take when every zero is discarded.
    pub reference_bits: u64,
    pub bytes_written: u64,
    pub bytes_read: u64,
}

impl LayerReport {
    pub fn bytes_moved(&self) -> u64 {
        self.bytes_written + self.bytes_read
    }

    /// `stored_bits / reference_bits`, or `None` for layers that store nothing.
    pub fn size_ratio(&self) -> Option<f64> {
        (self.reference_bits > 0).then(|| self.stored_bits as f64 / self.reference_bits as f64)
    }

    fn add(&mut self, o: &LayerReport) {
        self.mac_count += o.mac_count;
        self.elements += o.elements;
        self.zeros += o.zeros;
        self.flagged += o.flagged;
        self.stored_bits += o.stored_bits;
        self.reference_bits += o.reference_bits;
        self.bytes_written += o.bytes_written;
        self.bytes_read += o.bytes_read;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Totals {
    pub stored_bits: u64,
    pub reference_bits: u64,
    pub bytes_written: u64,
    pub bytes_read: u64,
    pub bytes_moved: u64,
    pub mac_count: u64,
    pub energy_units: u64,
    pub cycles: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub format: Format,
    pub detectors: DetectorMode,
    pub energy: EnergyModel,
    pub images: u64,
    pub layers: Vec<LayerReport>,
    pub logits: Vec<Vec<i32>>,
}

impl RunReport {
    pub fn totals(&self) -> Totals {
        let mut t = Totals::default();
        for l in &self.layers {
            t.stored_bits += l.stored_bits;
            t.reference_bits += l.reference_bits;
            t.bytes_written += l.bytes_written;
            t.bytes_read += l.bytes_read;
            t.mac_count += l.mac_count;
        }
        t.bytes_moved = t.bytes_written + t.bytes_read;
        let e = &self.energy;
        t.energy_units = t.mac_count * e.mac_energy + t.bytes_moved * e.byte_energy;
        t.cycles = t.mac_count.div_ceil(e.parallel_macs.max(1)) + t.bytes_moved.div_ceil(e.bytes_per_cycle.max(1));
        t
    }

    /// Overall `stored / reference` ratio.
    pub fn size_ratio(&self) -> Option<f64> {
        let t = self.totals();
        (t.reference_bits > 0).then(|| t.stored_bits as f64 / t.reference_bits as f64)
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.logits.iter().map(|l| crate::model::argmax(l)).collect()
    }

    pub fn logits_hash(&self) -> String {
        hash_logits(&self.logits)
    }

    /// Combines reports of disjoint batches run with the same configuration.
    pub fn merge(mut self, other: RunReport) -> Result<RunReport, Error> {
        if self.format != other.format
            || self.detectors != other.detectors
            || self.energy != other.energy
            || self.layers.len() != other.layers.len()
        {
            return Err(Error::ShapeMismatch("reports come from different configurations".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add(b);
        }
        self.images += other.images;
        self.logits.extend(other.logits);
        Ok(self)
    }
}

fn to_hex(bytes: &[u8]) -> String {
    use core::fmt::Write;
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// SHA-256 over the little-endian logit words, image after image.
pub fn hash_logits(logits: &[Vec<i32>]) -> String {
    let mut h = Sha256::new();
    for img in logits {
        h.update((img.len() as u32).to_le_bytes());
        for v in img {
            h.update(v.to_le_bytes());
        }
    }
    to_hex(&h.finalize())
}

/// SHA-256 of a key's segments, for reports that must not carry the key.
pub fn hash_segments(segments: &[u32]) -> String {
    let mut h = Sha256::new();
    for s in segments {
        h.update(s.to_le_bytes());
    }
    to_hex(&h.finalize())
}

/// Biases as they leave the keyed adders for a given Mkey.
pub fn effective_biases(device: &Device, model: &Model, mk: &Mkey) -> Result<Vec<Vec<i32>>, Error> {
    let adders = &device.adders;
    if mk.segments.len() != adders.masked_groups.len() {
        return Err(Error::KeyConfig(format!(
            "Mkey has {} segments, device has {} keyed adders",
            mk.segments.len(),
            adders.masked_groups.len()
        )));
    }
    let q = model.qformat;
    let fallback;
    let group_map = match &model.obfuscation {
        Some(meta) => {
            if meta.groups != adders.n_groups
                || meta.msb_bits != adders.msb_bits
                || meta.masked_groups != adders.masked_groups
            {
                return Err(Error::KeyConfig("model obfuscation layout does not match the device adders".into()));
            }
            &meta.group_map
        }
        None => {
            fallback = round_robin_groups(model, adders.n_groups);
            &fallback
        }
    };
    if group_map.len() != model.layers.len() {
        return Err(Error::GroupCoverage("group map does not match layer count".into()));
    }
    model
        .layers
        .iter()
        .zip(group_map)
        .map(|(layer, ids)| {
            if ids.len() != layer.bias.len() {
                return Err(Error::GroupCoverage("group map does not match bias count".into()));
            }
            Ok(layer
                .bias
                .iter()
                .zip(ids)
                .map(|(&b, &g)| match adders.slot(g) {
                    Some(s) => restore_bias(b, mk.segments[s], adders.polarity[g as usize], q, adders.msb_bits),
                    None => b,
                })
                .collect())
        })
        .collect()
}

/// Detector outputs for one locked ReLU map.
pub fn detector_flags(device: &Device, xp: &[i32], hk: &Hkey, mode: DetectorMode) -> Vec<bool> {
    let q = device.t.format();
    let t = device.t.bits();
    let lanes = device.hkey.n_detectors.max(1);
    let lane_open: Vec<bool> = (0..lanes)
        .map(|lane| match device.hkey.slot(lane) {
            Some(s) => hk.segments[s] == device.hkey.correct[s],
            None => true,
        })
        .collect();
    xp.iter()
        .enumerate()
        .map(|(e, &v)| match mode {
            DetectorMode::Keyed => lane_open[e % lanes] && q.to_bits(v) == t,
            DetectorMode::StuckAtZero => false,
            DetectorMode::StuckAtOne => true,
        })
        .collect()
}

/// Runs a batch through the locked accelerator.
pub fn run(
    device: &Device,
    model: &Model,
    inputs: &[Tensor],
    hk: &Hkey,
    mk: &Mkey,
    opts: RunOptions,
) -> Result<RunReport, Error> {
    model.validate()?;
    let q = model.qformat;
    if device.t.format() != q {
        return Err(Error::KeyConfig("device word width differs from the model format".into()));
    }
    if hk.segments.len() != device.hkey.locked.len() {
        return Err(Error::KeyConfig(format!(
            "Hkey has {} segments, device has {} locked detectors",
            hk.segments.len(),
            device.hkey.locked.len()
        )));
    }
    let biases = effective_biases(device, model, mk)?;
    let mut layers: Vec<LayerReport> = model
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| LayerReport { layer: i, kind: l.kind.name(), ..Default::default() })
        .collect();
    let mut logits = Vec::with_capacity(inputs.len());
    for input in inputs {
        if input.shape() != model.input {
            return Err(Error::ShapeMismatch(format!(
                "model expects input {:?}, got {:?}",
                model.input,
                input.shape()
            )));
        }
        let mut cur = input.clone();
        for (i, layer) in model.layers.iter().enumerate() {
            let rep = &mut layers[i];
            cur = match layer.kind {
                LayerKind::Conv2d { .. } | LayerKind::Fc { .. } => {
                    let mut t = mac_sums(layer, &cur, q, model.accumulator)?;
                    rep.mac_count += match layer.kind {
                        LayerKind::Conv2d { in_channels, kernel, .. } => {
                            (t.shape().len() * in_channels * kernel * kernel) as u64
                        }
                        LayerKind::Fc { in_features, .. } => (t.shape().len() * in_features) as u64,
                        _ => 0,
                    };
                    let shape = t.shape();
                    let b = &biases[i];
                    for (e, v) in t.data_mut().iter_mut().enumerate() {
                        *v = q.saturate(*v as i64 + b[bias_index(shape, e)] as i64);
                    }
                    t
                }
                LayerKind::MaxPool { kernel, stride } => maxpool(&cur, kernel, stride)?,
                LayerKind::Relu => {
                    let shape = cur.shape();
                    let xp: Vec<i32> = cur.data().iter().map(|&a| relu_locked_raw(a, device.t)).collect();
                    let flags = detector_flags(device, &xp, hk, opts.detectors);
                    let ideal: Vec<bool> = cur.data().iter().map(|&a| a <= 0).collect();
                    let stored = codec::encode(&xp, &flags, shape, opts.format, q)?;
                    rep.elements += shape.len() as u64;
                    rep.zeros += ideal.iter().filter(|&&z| z).count() as u64;
                    rep.flagged += stored.nnz_flagged as u64;
                    rep.stored_bits += stored.size_bits;
                    rep.reference_bits += codec::encoded_size(&ideal, shape, opts.format, q);
                    let bytes = stored.size_bits.div_ceil(8);
                    rep.bytes_written += bytes;
                    rep.bytes_read += bytes;
                    readback(&stored, device.t)?
                }
            };
        }
        logits.push(cur.into_data());
    }
    Ok(RunReport {
        format: opts.format,
        detectors: opts.detectors,
        energy: device.energy,
        images: inputs.len() as u64,
        layers,
        logits,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepRow {
    pub key_hash: String,
    /// Locked detectors whose segment happened to be correct.
    pub matching_segments: usize,
    pub stored_bits: u64,
    pub logits_hash: String,
}

/// Draws `n` uniformly random Hkeys and runs each. With `include_correct`
/// the correct Hkey is added as the first row.
#[allow(clippy::too_many_arguments)]
pub fn sweep_hkeys(
    device: &Device,
    model: &Model,
    inputs: &[Tensor],
    mk: &Mkey,
    n: usize,
    seed: u64,
    format: Format,
    include_correct: bool,
) -> Result<Vec<SweepRow>, Error> {
    if n == 0 {
        return Err(Error::KeyConfig("sweep needs at least one key".into()));
    }
    let mut rng = CounterRng::new(seed);
    let mut keys = Vec::with_capacity(n + 1);
    if include_correct {
        keys.push(device.hkey.correct_key());
    }
    for _ in 0..n {
        keys.push(random_hkey(&mut rng, &device.hkey));
    }
    let opts = RunOptions { format, detectors: DetectorMode::Keyed };
    keys.iter()
        .map(|hk| {
            let r = run(device, model, inputs, hk, mk, opts)?;
            Ok(SweepRow {
                key_hash: hash_segments(&hk.segments),
                matching_segments: matching_segments(&device.hkey, hk),
                stored_bits: r.totals().stored_bits,
                logits_hash: r.logits_hash(),
            })
        })
        .collect()
}

pub fn random_hkey(rng: &mut CounterRng, cfg: &HkeyConfig) -> Hkey {
    Hkey { segments: (0..cfg.locked.len()).map(|_| rng.bits(cfg.seg_bits)).collect() }
}

/// Random Hkey with every segment wrong (resampling any segment that hits).
pub fn wrong_hkey(rng: &mut CounterRng, cfg: &HkeyConfig) -> Hkey {
    Hkey {
        segments: cfg
            .correct
            .iter()
            .map(|&star| loop {
                let s = rng.bits(cfg.seg_bits);
                if s != star {
                    break s;
                }
            })
            .collect(),
    }
}

pub fn matching_segments(cfg: &HkeyConfig, hk: &Hkey) -> usize {
    cfg.correct.iter().zip(&hk.segments).filter(|(a, b)| a == b).count()
}
