//! Attack experiments: detector removal, Hkey distinguishing by memory
//! footprint, and finetuning the obfuscated model with thief data.

use lockdnn_core::keying::{gen_keys, CounterRng, KeyParams};
use lockdnn_core::obfuscator::obfuscate;
use lockdnn_core::sim::{self, hash_segments, wrong_hkey};
use lockdnn_core::{DetectorMode, Device, Format, Hkey, Mkey, Model, QFormat, RunOptions, RunReport, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{BlobParams, ToyDataset};
use crate::error::Error;
use crate::train::{accuracy_fixed, train_toy, Arch, FloatNet, TrainParams};

/// Thief-data fractions evaluated by default.
pub const ALPHA_GRID: [f64; 4] = [0.01, 0.03, 0.05, 0.10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Stuck {
    Zero,
    One,
}

/// Runs with every detector output tied to a constant.
pub fn removal_attack(
    device: &Device,
    model: &Model,
    inputs: &[Tensor],
    mk: &Mkey,
    stuck: Stuck,
    format: Format,
) -> Result<RunReport, Error> {
    let detectors = match stuck {
        Stuck::Zero => DetectorMode::StuckAtZero,
        Stuck::One => DetectorMode::StuckAtOne,
    };
    // the Hkey is never looked at once the detector output is cut
    let hk = device.hkey.correct_key();
    Ok(sim::run(device, model, inputs, &hk, mk, RunOptions { format, detectors })?)
}

/// Top-1 accuracy in percent of a run's logits against labels.
pub fn run_accuracy(report: &RunReport, labels: &[usize]) -> f64 {
    let hits = report.predictions().iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * hits as f64 / labels.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DistinguishRow {
    pub value: u32,
    pub stored_bits: u64,
    pub logits_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Distinguish {
    pub seg_bits: u32,
    /// Detector lane whose segment is enumerated.
    pub lane: usize,
    /// Hash of the Hkey the other segments are held at.
    pub background_key_hash: String,
    pub rows: Vec<DistinguishRow>,
    /// Values reaching the smallest storage.
    pub minimizers: Vec<u32>,
    pub unique_minimizer: bool,
    pub minimizer_is_correct: bool,
    pub logits_invariant: bool,
}

/// Largest segment width the distinguisher enumerates.
pub const MAX_ENUMERATED_BITS: u32 = 12;

/// Enumerates all `2^c` values of the segment of locked lane `lane`, with
/// every other segment held at a seeded wrong value, and records storage and
/// logits for each.
pub fn key_sweep_distinguisher(
    device: &Device,
    model: &Model,
    inputs: &[Tensor],
    mk: &Mkey,
    lane: usize,
    format: Format,
    seed: u64,
) -> Result<Distinguish, Error> {
    let cfg = &device.hkey;
    if cfg.seg_bits > MAX_ENUMERATED_BITS {
        return Err(Error::Usage(format!(
            "segment width {} too wide to enumerate (at most {MAX_ENUMERATED_BITS})",
            cfg.seg_bits
        )));
    }
    let slot = cfg.slot(lane).ok_or_else(|| Error::Usage(format!("detector lane {lane} is not locked")))?;
    let background = wrong_hkey(&mut CounterRng::new(seed), cfg);
    let opts = RunOptions { format, detectors: DetectorMode::Keyed };
    let rows = (0..1u32 << cfg.seg_bits)
        .into_par_iter()
        .map(|value| {
            let mut hk = background.clone();
            hk.segments[slot] = value;
            let r = sim::run(device, model, inputs, &hk, mk, opts)?;
            Ok(DistinguishRow { value, stored_bits: r.totals().stored_bits, logits_hash: r.logits_hash() })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let min = rows.iter().map(|r| r.stored_bits).min().unwrap_or(0);
    let minimizers: Vec<u32> = rows.iter().filter(|r| r.stored_bits == min).map(|r| r.value).collect();
    let unique_minimizer = minimizers.len() == 1;
    Ok(Distinguish {
        seg_bits: cfg.seg_bits,
        lane,
        background_key_hash: hash_segments(&background.segments),
        minimizer_is_correct: unique_minimizer && minimizers[0] == cfg.correct[slot],
        logits_invariant: rows.iter().all(|r| r.logits_hash == rows[0].logits_hash),
        unique_minimizer,
        minimizers,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FinetunePoint {
    pub alpha: f64,
    pub thief_samples: usize,
    /// Fixed-point test accuracy after finetuning the obfuscated model.
    pub obf_init: f64,
    /// Same budget, same thief data, fresh random weights.
    pub rand_init: f64,
}

/// Finetunes `obf` on an `alpha` thief split of the training data and
/// trains a randomly initialized copy of its architecture with the same data
/// and budget. Both are quantized and scored on the test split.
pub fn finetune_attack(
    obf: &Model,
    alpha: f64,
    data: &ToyDataset,
    budget: &TrainParams,
    seed: u64,
    allow_off_grid: bool,
) -> Result<FinetunePoint, Error> {
    if !allow_off_grid && !ALPHA_GRID.contains(&alpha) {
        return Err(Error::Usage(format!(
            "alpha {alpha} is off the grid {ALPHA_GRID:?} (allow it explicitly to proceed)"
        )));
    }
    let thief = data.thief_split(alpha, seed ^ 0x7468_6965_6600)?;
    let score = |net: &FloatNet| -> Result<f64, Error> {
        accuracy_fixed(&net.quantize(&obf.name, obf.qformat, obf.accumulator)?, &data.test)
    };
    let mut attacked = FloatNet::from_model(obf);
    attacked.train(&thief, budget)?;
    let mut fresh = FloatNet::init(&attacked.arch(), seed ^ 0x7261_6e64)?;
    fresh.train(&thief, budget)?;
    Ok(FinetunePoint { alpha, thief_samples: thief.len(), obf_init: score(&attacked)?, rand_init: score(&fresh)? })
}

/// Everything one finetune experiment needs besides the seed list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSettings {
    /// Dataset template; its seed is replaced by the trial seed.
    pub dataset: BlobParams,
    pub arch: Arch,
    pub train: TrainParams,
    /// Finetune budget, used for both initializations.
    pub finetune: TrainParams,
    pub alphas: Vec<f64>,
    pub allow_off_grid: bool,
    pub detectors: usize,
    pub seg_bits: u32,
    pub groups: u32,
    pub msb_bits: u32,
}

impl FinetuneSettings {
    pub fn toy() -> Self {
        FinetuneSettings {
            dataset: BlobParams::toy(0),
            arch: Arch::toy_cnn(10),
            train: TrainParams::default(),
            finetune: TrainParams::default(),
            alphas: ALPHA_GRID.to_vec(),
            allow_off_grid: false,
            detectors: 4,
            seg_bits: 8,
            groups: 16,
            msb_bits: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneTrial {
    pub seed: u64,
    pub dataset: BlobParams,
    pub chance: f64,
    pub original_float: f64,
    pub original: f64,
    pub obfuscated: f64,
    pub mkey_hash: String,
    pub points: Vec<FinetunePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneMean {
    pub alpha: f64,
    pub obf_init: f64,
    pub rand_init: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneOutcome {
    pub scenario: &'static str,
    pub settings: FinetuneSettings,
    pub seeds: Vec<u64>,
    pub trials: Vec<FinetuneTrial>,
    pub mean_original: f64,
    pub mean_obfuscated: f64,
    pub means: Vec<FinetuneMean>,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// One trial per seed: generate the data, train and quantize the original,
/// draw keys, obfuscate, then attack at every alpha. Trials and alphas run in
/// parallel; each training run is single-threaded.
pub fn finetune_experiment(settings: &FinetuneSettings, seeds: &[u64]) -> Result<FinetuneOutcome, Error> {
    if seeds.is_empty() {
        return Err(Error::Usage("at least one seed is needed".into()));
    }
    let trials = seeds.par_iter().map(|&seed| finetune_trial(settings, seed)).collect::<Result<Vec<_>, Error>>()?;
    let means = settings
        .alphas
        .iter()
        .enumerate()
        .map(|(i, &alpha)| FinetuneMean {
            alpha,
            obf_init: mean(trials.iter().map(|t| t.points[i].obf_init)),
            rand_init: mean(trials.iter().map(|t| t.points[i].rand_init)),
        })
        .collect();
    Ok(FinetuneOutcome {
        scenario: "finetune",
        settings: settings.clone(),
        seeds: seeds.to_vec(),
        mean_original: mean(trials.iter().map(|t| t.original)),
        mean_obfuscated: mean(trials.iter().map(|t| t.obfuscated)),
        trials,
        means,
    })
}

fn finetune_trial(s: &FinetuneSettings, seed: u64) -> Result<FinetuneTrial, Error> {
    let dataset = BlobParams { seed, ..s.dataset.clone() };
    let data = ToyDataset::blobs(&dataset)?;
    let train = TrainParams { seed, ..s.train };
    let trained = train_toy(&s.arch, &data, &train, QFormat::Q8_8, &format!("toy-{seed}"))?;
    let keys = gen_keys(seed, &trained.model, &KeyParams::new(s.detectors, s.seg_bits, s.groups, s.msb_bits))?;
    let obf = obfuscate(&trained.model, &keys.mkey)?;
    let obfuscated = accuracy_fixed(&obf, &data.test)?;
    let budget = TrainParams { seed: seed ^ 0x6674, ..s.finetune };
    let points = s
        .alphas
        .par_iter()
        .map(|&alpha| finetune_attack(&obf, alpha, &data, &budget, seed, s.allow_off_grid))
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(FinetuneTrial {
        seed,
        chance: data.chance(),
        dataset,
        original_float: trained.float_accuracy,
        original: trained.fixed_accuracy,
        obfuscated,
        mkey_hash: hash_segments(&keys.mkey.correct_key().segments),
        points,
    })
}

/// Hkey with all segments wrong, drawn from `seed`.
pub fn seeded_wrong_hkey(device: &Device, seed: u64) -> Hkey {
    wrong_hkey(&mut CounterRng::new(seed), &device.hkey)
}
