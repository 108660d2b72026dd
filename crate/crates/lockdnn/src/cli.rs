//! The `lockdnn` command line.
//!
//! Every report starts with the invocation that produced it;
//! `lockdnn replay <report>` re-executes that invocation and rewrites the
//! report, which comes out byte-identical.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use lockdnn_core::keying::CounterRng;
use lockdnn_core::keying::{gen_keys, KeyParams, PolarityMode};
use lockdnn_core::obfuscator::{obfuscate, restore};
use lockdnn_core::sim::{self, hash_logits, hash_segments, matching_segments, random_hkey};
use lockdnn_core::{
    forward_reference, DetectorMode, Device, Format, Hkey, Mkey, Model, QFormat, RunOptions, RunReport, Tensor,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, FinetuneSettings, Stuck, ALPHA_GRID};
use crate::dataset::{to_tensors, BlobParams, Sample, ToyDataset};
use crate::error::{Error, ErrorReport};
use crate::keyfile::{self, load_device, load_keys, parse_segments, KeysFile, SecretFile};
use crate::manifest::{self, bundled_model, encode_model, load_model, save_model};
use crate::report::{
    json_bytes, layer_csv, sha256_hex, write_atomic, write_json, Envelope, RunSummary, ATTACK_SCHEMA, RUN_SCHEMA,
    SWEEP_SCHEMA, TOOL_VERSION,
};
use crate::train::{train_toy, Arch, TrainParams};

#[derive(Debug, Parser)]
#[command(name = "lockdnn", version, about = "Locked sparsity-aware DNN accelerator simulator")]
pub struct Cli {
    /// Worker threads for batches, sweeps and attack trials (0: one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", content = "config", rename_all = "snake_case")]
pub enum Command {
    /// Draw T, the Hkey and the Mkey layout for a model.
    Genkeys(GenkeysArgs),
    /// Mask the model's bias MSBs with the provider's V.
    Obfuscate(ObfuscateArgs),
    /// Run a batch through the locked accelerator and report memory traffic.
    Run(RunArgs),
    /// Run many random Hkeys and compare logits and storage.
    Sweep(SweepArgs),
    #[command(subcommand)]
    Attack(AttackCommand),
    /// Train the toy CNN on the blob data set and quantize it.
    Train(TrainArgs),
    /// Re-execute the invocation recorded in a report.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "attack", rename_all = "snake_case")]
pub enum AttackCommand {
    /// Finetune the obfuscated model with thief data, against random init.
    Finetune(FinetuneArgs),
    /// Tie every detector output to a constant.
    Removal(RemovalArgs),
    /// Enumerate one Hkey segment and watch the memory footprint.
    Distinguish(DistinguishArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatArg {
    Bitmap,
    Rlc,
    Csc,
}

impl FormatArg {
    fn format(self, run_bits: u32) -> Format {
        match self {
            FormatArg::Bitmap => Format::BitMap,
            FormatArg::Rlc => Format::Rlc { run_bits },
            FormatArg::Csc => Format::Csc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorArg {
    Keyed,
    StuckZero,
    StuckOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolarityArg {
    Random,
    AllXor,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ModelArg {
    /// Model manifest (the bundled toy CNN when omitted).
    #[arg(long)]
    pub model: Option<PathBuf>,
}

impl ModelArg {
    fn load(&self) -> Result<Model, Error> {
        match &self.model {
            Some(p) => load_model(p),
            None => Ok(bundled_model()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct KeyPaths {
    #[arg(long, default_value = "keys.json")]
    pub keys: PathBuf,
    #[arg(long, default_value = "accel_private.json")]
    pub device: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct DataArgs {
    /// CSV of `label,feature...` rows (the toy blob test split when omitted).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generator seed of the toy blob set.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// Samples to run, taken from the front.
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
}

impl DataArgs {
    fn load(&self, model: &Model) -> Result<(Vec<Tensor>, Vec<usize>), Error> {
        let rows: Vec<Sample> = match &self.data {
            Some(p) => ToyDataset::from_csv(p, model.input, 0.0)?.train,
            None => {
                let p = BlobParams::toy(self.data_seed);
                if p.shape != model.input {
                    return Err(Error::Usage(format!(
                        "the toy data set is {:?}, model takes {:?}; pass --data",
                        p.shape, model.input
                    )));
                }
                ToyDataset::blobs(&p)?.test
            }
        };
        if self.samples == 0 || rows.is_empty() {
            return Err(Error::Usage("no samples selected".into()));
        }
        let rows = &rows[..self.samples.min(rows.len())];
        Ok((to_tensors(rows, model.input, model.qformat), rows.iter().map(|s| s.label).collect()))
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GenkeysArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long, env = "LOCKDNN_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Parallel match detectors.
    #[arg(long, default_value_t = 4)]
    pub detectors: usize,
    /// Locked detectors, taken from lane 0 up (all when omitted).
    #[arg(long)]
    pub locked: Option<usize>,
    /// Bits per Hkey segment.
    #[arg(long, default_value_t = 8)]
    pub seg_bits: u32,
    /// Bias adder groups.
    #[arg(long, default_value_t = 16)]
    pub groups: u32,
    /// Masked MSBs per bias.
    #[arg(long = "msb", default_value_t = 2)]
    pub msb_bits: u32,
    /// Masked groups, taken from group 0 up (all when omitted).
    #[arg(long)]
    pub masked: Option<u32>,
    #[arg(long, value_enum, default_value_t = PolarityArg::Random)]
    pub polarity: PolarityArg,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ObfuscateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub keys: KeyPaths,
    /// Manifest path of the obfuscated model; the blob goes next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "provider_secret.json")]
    pub secret: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct RunArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[command(flatten)]
    pub keys: KeyPaths,
    #[command(flatten)]
    pub data: DataArgs,
    /// `correct`, `wrong` (seeded, every segment wrong) or comma-separated hex segments.
    #[arg(long, default_value = "correct")]
    pub hkey: String,
    /// `correct`, `zero`, `transparent` (MK = P) or comma-separated hex segments.
    /// For a plain model `correct` means `transparent`.
    #[arg(long, default_value = "correct")]
    pub mkey: String,
    #[arg(long, value_enum, default_value_t = FormatArg::Bitmap)]
    pub format: FormatArg,
    /// RLC run-length field width.
    #[arg(long, default_value_t = 4)]
    pub run_bits: u32,
    #[arg(long, value_enum, default_value_t = DetectorArg::Keyed)]
    pub detectors: DetectorArg,
    #[arg(long, env = "LOCKDNN_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: PathBuf,
    /// Per-layer table.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[command(flatten)]
    pub keys: KeyPaths,
    #[command(flatten)]
    pub data: DataArgs,
    /// Random Hkeys to try besides the correct one.
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, value_enum, default_value_t = FormatArg::Bitmap)]
    pub format: FormatArg,
    #[arg(long, default_value_t = 4)]
    pub run_bits: u32,
    #[arg(long, env = "LOCKDNN_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct FinetuneArgs {
    /// Thief fractions (repeatable; the full grid when omitted).
    #[arg(long)]
    pub alpha: Vec<f64>,
    /// Accept alphas outside the standard grid.
    #[arg(long)]
    pub allow_off_grid: bool,
    /// Number of trials; trial `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long, env = "LOCKDNN_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Epochs of the provider's training run.
    #[arg(long, default_value_t = 30)]
    pub train_epochs: usize,
    /// Finetune budget in epochs, for both initializations.
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 4)]
    pub clusters: usize,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct RemovalArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[command(flatten)]
    pub keys: KeyPaths,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub stuck: Stuck,
    #[arg(long, value_enum, default_value_t = FormatArg::Bitmap)]
    pub format: FormatArg,
    #[arg(long, default_value_t = 4)]
    pub run_bits: u32,
    #[arg(long, env = "LOCKDNN_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct DistinguishArgs {
    /// Plain model to attack (the bundled toy CNN when omitted).
    #[command(flatten)]
    pub model: ModelArg,
    #[command(flatten)]
    pub data: DataArgs,
    /// Segment width c of the freshly keyed device.
    #[arg(long, default_value_t = 4)]
    pub seg_bits: u32,
    #[arg(long, default_value_t = 4)]
    pub detectors: usize,
    /// Lane whose segment is enumerated.
    #[arg(long, default_value_t = 0)]
    pub lane: usize,
    #[arg(long, value_enum, default_value_t = FormatArg::Bitmap)]
    pub format: FormatArg,
    #[arg(long, default_value_t = 4)]
    pub run_bits: u32,
    #[arg(long, env = "LOCKDNN_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long, env = "LOCKDNN_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Training summary.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    pub report: PathBuf,
}

fn write_report<B: Serialize>(path: &Path, schema: &'static str, cmd: &Command, body: &B) -> Result<(), Error> {
    write_json(path, &Envelope { schema, tool_version: TOOL_VERSION, invocation: cmd, body })
}

#[derive(Debug, Serialize)]
struct ModelInfo {
    name: String,
    digest: String,
    obfuscated: bool,
    qformat: manifest::QSpec,
    accumulator: lockdnn_core::Accumulator,
    classes: usize,
}

fn model_info(m: &Model) -> Result<ModelInfo, Error> {
    let (man, blob) = encode_model(m, "model.bin")?;
    let text = serde_json::to_vec(&man).expect("manifest serializes");
    Ok(ModelInfo {
        name: m.name.clone(),
        digest: sha256_hex(&[&text, &blob]),
        obfuscated: m.is_obfuscated(),
        qformat: man.qformat,
        accumulator: m.accumulator,
        classes: m.classes,
    })
}

/// Runs `inputs` split across the thread pool and merges the per-chunk
/// reports in input order.
pub fn run_parallel(
    device: &Device,
    model: &Model,
    inputs: &[Tensor],
    hk: &Hkey,
    mk: &Mkey,
    opts: RunOptions,
) -> Result<RunReport, Error> {
    let chunk = inputs.len().div_ceil(rayon::current_num_threads().max(1)).max(1);
    let parts =
        inputs.par_chunks(chunk).map(|c| sim::run(device, model, c, hk, mk, opts)).collect::<Result<Vec<_>, _>>()?;
    let mut it = parts.into_iter();
    let first = it.next().ok_or_else(|| Error::Usage("empty batch".into()))?;
    Ok(it.try_fold(first, |a, b| a.merge(b))?)
}

struct Setup {
    model: Model,
    keys: KeysFile,
    device: Device,
    polarity: Vec<u32>,
    inputs: Vec<Tensor>,
    labels: Vec<usize>,
}

fn setup(model: &ModelArg, keys: &KeyPaths, data: &DataArgs) -> Result<Setup, Error> {
    let model = model.load()?;
    let kf = load_keys(&keys.keys)?;
    let df = load_device(&keys.device)?;
    let device = df.device()?;
    if device.t.format() != model.qformat {
        return Err(Error::KeyFile("device word format differs from the model's".into()));
    }
    let (inputs, labels) = data.load(&model)?;
    Ok(Setup { model, keys: kf, device, polarity: df.polarity()?, inputs, labels })
}

impl Setup {
    fn correct_mkey(&self) -> Result<Mkey, Error> {
        if self.model.is_obfuscated() {
            self.keys.mkey()
        } else {
            Ok(self.device.adders.transparent_key())
        }
    }

    fn parse_mkey(&self, spec: &str) -> Result<Mkey, Error> {
        let n = self.device.adders.masked_groups.len();
        let mk = match spec {
            "correct" => self.correct_mkey()?,
            "zero" => Mkey { segments: vec![0; n] },
            "transparent" => self.device.adders.transparent_key(),
            hex => Mkey { segments: parse_segments(hex).map_err(|e| Error::Usage(e.to_string()))? },
        };
        if mk.segments.len() != n {
            return Err(Error::Usage(format!("Mkey needs {n} segments, got {}", mk.segments.len())));
        }
        Ok(mk)
    }

    fn parse_hkey(&self, spec: &str, seed: u64) -> Result<Hkey, Error> {
        let cfg = &self.device.hkey;
        let hk = match spec {
            "correct" => self.keys.hkey()?,
            "wrong" => {
                let hk = sim::wrong_hkey(&mut CounterRng::new(seed), cfg);
                if matching_segments(cfg, &hk) != 0 {
                    return Err(Error::Invariant("wrong Hkey matched a segment".into()));
                }
                hk
            }
            hex => Hkey { segments: parse_segments(hex).map_err(|e| Error::Usage(e.to_string()))? },
        };
        if hk.segments.len() != cfg.locked.len() {
            return Err(Error::Usage(format!("Hkey needs {} segments, got {}", cfg.locked.len(), hk.segments.len())));
        }
        Ok(hk)
    }

    /// The plain model the keyed adders reconstruct under the correct Mkey.
    fn reference_model(&self) -> Result<Model, Error> {
        if self.model.is_obfuscated() {
            Ok(restore(&self.model, &self.keys.mkey()?, &self.polarity)?)
        } else {
            Ok(self.model.clone())
        }
    }

    fn reference_hash(&self) -> Result<String, Error> {
        let m = self.reference_model()?;
        let logits = self
            .inputs
            .par_iter()
            .map(|x| forward_reference(&m, x).map(|t| t.into_data()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(hash_logits(&logits))
    }
}

#[derive(Debug, Serialize)]
struct RunBody {
    model: ModelInfo,
    hkey_hash: String,
    hkey_matching_segments: usize,
    hkey_segments: usize,
    mkey_hash: String,
    run: RunSummary,
    reference_logits_hash: String,
    matches_reference: bool,
    accuracy: f64,
    logits: Vec<Vec<i32>>,
}

fn cmd_run(a: &RunArgs, cmd: &Command) -> Result<(), Error> {
    let s = setup(&a.model, &a.keys, &a.data)?;
    let hk = s.parse_hkey(&a.hkey, a.seed)?;
    let mk = s.parse_mkey(&a.mkey)?;
    let detectors = match a.detectors {
        DetectorArg::Keyed => DetectorMode::Keyed,
        DetectorArg::StuckZero => DetectorMode::StuckAtZero,
        DetectorArg::StuckOne => DetectorMode::StuckAtOne,
    };
    let opts = RunOptions { format: a.format.format(a.run_bits), detectors };
    let r = run_parallel(&s.device, &s.model, &s.inputs, &hk, &mk, opts)?;
    let reference = s.reference_hash()?;
    let summary = RunSummary::from(&r);
    if let Some(p) = &a.csv {
        write_atomic(p, &layer_csv(&summary.layers)?)?;
    }
    let body = RunBody {
        model: model_info(&s.model)?,
        hkey_hash: hash_segments(&hk.segments),
        hkey_matching_segments: matching_segments(&s.device.hkey, &hk),
        hkey_segments: hk.segments.len(),
        mkey_hash: hash_segments(&mk.segments),
        matches_reference: summary.logits_hash == reference,
        reference_logits_hash: reference,
        accuracy: attacks::run_accuracy(&r, &s.labels),
        run: summary,
        logits: r.logits,
    };
    write_report(&a.report, RUN_SCHEMA, cmd, &body)
}

#[derive(Debug, Serialize)]
struct SweepRowOut {
    correct_key: bool,
    key_hash: String,
    matching_segments: usize,
    stored_bits: u64,
    logits_hash: String,
}

#[derive(Debug, Serialize)]
struct SweepBody {
    model: ModelInfo,
    format: Format,
    images: usize,
    reference_logits_hash: String,
    distinct_logits: usize,
    all_match_reference: bool,
    correct_key_stored_bits: u64,
    min_wrong_stored_bits: Option<u64>,
    rows: Vec<SweepRowOut>,
}

fn cmd_sweep(a: &SweepArgs, cmd: &Command) -> Result<(), Error> {
    if a.trials == 0 {
        return Err(Error::Usage("--trials must be positive".into()));
    }
    let s = setup(&a.model, &a.keys, &a.data)?;
    let mk = s.correct_mkey()?;
    let mut rng = CounterRng::new(a.seed);
    let mut keys = vec![s.keys.hkey()?];
    keys.extend((0..a.trials).map(|_| random_hkey(&mut rng, &s.device.hkey)));
    let opts = RunOptions { format: a.format.format(a.run_bits), detectors: DetectorMode::Keyed };
    let rows = keys
        .par_iter()
        .enumerate()
        .map(|(i, hk)| {
            let r = sim::run(&s.device, &s.model, &s.inputs, hk, &mk, opts)?;
            Ok(SweepRowOut {
                correct_key: i == 0,
                key_hash: hash_segments(&hk.segments),
                matching_segments: matching_segments(&s.device.hkey, hk),
                stored_bits: r.totals().stored_bits,
                logits_hash: r.logits_hash(),
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let reference = s.reference_hash()?;
    let mut hashes: Vec<&str> = rows.iter().map(|r| r.logits_hash.as_str()).collect();
    hashes.sort_unstable();
    hashes.dedup();
    let body = SweepBody {
        model: model_info(&s.model)?,
        format: opts.format,
        images: s.inputs.len(),
        distinct_logits: hashes.len(),
        all_match_reference: rows.iter().all(|r| r.logits_hash == reference),
        reference_logits_hash: reference,
        correct_key_stored_bits: rows[0].stored_bits,
        min_wrong_stored_bits: rows
            .iter()
            .filter(|r| r.matching_segments < s.device.hkey.locked.len())
            .map(|r| r.stored_bits)
            .min(),
        rows,
    };
    write_report(&a.report, SWEEP_SCHEMA, cmd, &body)
}

fn cmd_genkeys(a: &GenkeysArgs) -> Result<(), Error> {
    let model = a.model.load()?;
    let params = KeyParams {
        locked_detectors: a.locked.unwrap_or(a.detectors),
        masked_groups: a.masked,
        polarity: match a.polarity {
            PolarityArg::Random => PolarityMode::Random,
            PolarityArg::AllXor => PolarityMode::AllXor,
        },
        ..KeyParams::new(a.detectors, a.seg_bits, a.groups, a.msb_bits)
    };
    let k = gen_keys(a.seed, &model, &params)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    keyfile::save_key_pair(&k, &a.out_dir.join("keys.json"), &a.out_dir.join("accel_private.json"))
}

fn cmd_obfuscate(a: &ObfuscateArgs) -> Result<(), Error> {
    if a.out == a.model {
        return Err(Error::Usage("--out must differ from --model".into()));
    }
    let model = load_model(&a.model)?;
    let keys = load_keys(&a.keys.keys)?;
    let dev = load_device(&a.keys.device)?;
    let cfg = keyfile::mkey_config(&keys, &dev)?;
    let obf = obfuscate(&model, &cfg)?;
    save_model(&obf, &a.out)?;
    write_json(&a.secret, &SecretFile::new(&cfg))
}

#[derive(Debug, Serialize)]
struct FinetuneBody {
    #[serde(flatten)]
    outcome: attacks::FinetuneOutcome,
}

fn cmd_finetune(a: &FinetuneArgs, cmd: &Command) -> Result<(), Error> {
    let alphas = if a.alpha.is_empty() { ALPHA_GRID.to_vec() } else { a.alpha.clone() };
    if let Some(bad) = alphas.iter().find(|&&x| !(x > 0.0 && x <= 1.0)) {
        return Err(Error::Usage(format!("alpha {bad} outside (0, 1]")));
    }
    let off_grid: Vec<f64> = alphas.iter().copied().filter(|x| !ALPHA_GRID.contains(x)).collect();
    if !off_grid.is_empty() {
        if a.allow_off_grid {
            eprintln!("warning: alphas {off_grid:?} are off the grid {ALPHA_GRID:?}");
        } else {
            return Err(Error::Usage(format!(
                "alphas {off_grid:?} are off the grid {ALPHA_GRID:?}; pass --allow-off-grid"
            )));
        }
    }
    let mut settings = FinetuneSettings::toy();
    settings.alphas = alphas;
    settings.allow_off_grid = a.allow_off_grid;
    settings.train.epochs = a.train_epochs;
    settings.finetune.epochs = a.epochs;
    settings.dataset.clusters_per_class = a.clusters;
    settings.dataset.noise = a.noise;
    let seeds: Vec<u64> = (0..a.seeds).map(|i| a.seed.wrapping_add(i)).collect();
    let outcome = attacks::finetune_experiment(&settings, &seeds)?;
    write_report(&a.report, ATTACK_SCHEMA, cmd, &FinetuneBody { outcome })
}

#[derive(Debug, Serialize)]
struct RemovalBody {
    scenario: &'static str,
    stuck: Stuck,
    model: ModelInfo,
    run: RunSummary,
    accuracy: f64,
    chance: f64,
    reference_logits_hash: String,
    matches_reference: bool,
    wrong_hkey_hash: String,
    wrong_hkey_stored_bits: u64,
    storage_equals_wrong_hkey: bool,
}

fn cmd_removal(a: &RemovalArgs, cmd: &Command) -> Result<(), Error> {
    let s = setup(&a.model, &a.keys, &a.data)?;
    let mk = s.correct_mkey()?;
    let format = a.format.format(a.run_bits);
    let r = attacks::removal_attack(&s.device, &s.model, &s.inputs, &mk, a.stuck, format)?;
    let wrong = attacks::seeded_wrong_hkey(&s.device, a.seed);
    let w = run_parallel(
        &s.device,
        &s.model,
        &s.inputs,
        &wrong,
        &mk,
        RunOptions { format, detectors: DetectorMode::Keyed },
    )?;
    let reference = s.reference_hash()?;
    let summary = RunSummary::from(&r);
    let body = RemovalBody {
        scenario: "removal",
        stuck: a.stuck,
        model: model_info(&s.model)?,
        accuracy: attacks::run_accuracy(&r, &s.labels),
        chance: 100.0 / s.model.classes as f64,
        matches_reference: summary.logits_hash == reference,
        reference_logits_hash: reference,
        wrong_hkey_hash: hash_segments(&wrong.segments),
        wrong_hkey_stored_bits: w.totals().stored_bits,
        storage_equals_wrong_hkey: w.totals().stored_bits == summary.totals.stored_bits,
        run: summary,
    };
    write_report(&a.report, ATTACK_SCHEMA, cmd, &body)
}

#[derive(Debug, Serialize)]
struct DistinguishBody {
    scenario: &'static str,
    model: ModelInfo,
    images: usize,
    #[serde(flatten)]
    outcome: attacks::Distinguish,
}

fn cmd_distinguish(a: &DistinguishArgs, cmd: &Command) -> Result<(), Error> {
    let model = a.model.load()?;
    if model.is_obfuscated() {
        return Err(Error::Usage("distinguish runs on a plain model".into()));
    }
    let keys = gen_keys(a.seed, &model, &KeyParams::new(a.detectors, a.seg_bits, 16, 2))?;
    let device = Device::from_keys(&keys);
    let (inputs, _) = a.data.load(&model)?;
    let mk = device.adders.transparent_key();
    let outcome =
        attacks::key_sweep_distinguisher(&device, &model, &inputs, &mk, a.lane, a.format.format(a.run_bits), a.seed)?;
    let body = DistinguishBody { scenario: "distinguish", model: model_info(&model)?, images: inputs.len(), outcome };
    write_report(&a.report, ATTACK_SCHEMA, cmd, &body)
}

#[derive(Debug, Serialize)]
struct TrainBody {
    dataset: BlobParams,
    arch: Arch,
    train: TrainParams,
    steps: usize,
    final_loss: f64,
    float_accuracy: f64,
    fixed_accuracy: f64,
    model: ModelInfo,
}

fn cmd_train(a: &TrainArgs, cmd: &Command) -> Result<(), Error> {
    let dataset = BlobParams::toy(a.seed);
    let data = ToyDataset::blobs(&dataset)?;
    let arch = Arch::toy_cnn(data.classes);
    let train = TrainParams { seed: a.seed, epochs: a.epochs, ..TrainParams::default() };
    let t = train_toy(&arch, &data, &train, QFormat::Q8_8, "toy_cnn")?;
    save_model(&t.model, &a.out)?;
    if let Some(p) = &a.report {
        let body = TrainBody {
            dataset,
            arch,
            train,
            steps: t.stats.steps,
            final_loss: t.stats.final_loss,
            float_accuracy: t.float_accuracy,
            fixed_accuracy: t.fixed_accuracy,
            model: model_info(&t.model)?,
        };
        write_report(p, "lockdnn.train.v1", cmd, &body)?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct Recorded {
    invocation: Command,
}

fn cmd_replay(a: &ReplayArgs) -> Result<(), Error> {
    let text = std::fs::read(&a.report).map_err(|e| Error::io(&a.report, e))?;
    let rec: Recorded =
        serde_json::from_slice(&text).map_err(|e| Error::Usage(format!("{}: {e}", a.report.display())))?;
    if matches!(rec.invocation, Command::Replay(_)) {
        return Err(Error::Usage("a report cannot record a replay".into()));
    }
    execute(&rec.invocation)
}

/// Runs one parsed command.
pub fn execute(cmd: &Command) -> Result<(), Error> {
    match cmd {
        Command::Genkeys(a) => cmd_genkeys(a),
        Command::Obfuscate(a) => cmd_obfuscate(a),
        Command::Run(a) => cmd_run(a, cmd),
        Command::Sweep(a) => cmd_sweep(a, cmd),
        Command::Attack(AttackCommand::Finetune(a)) => cmd_finetune(a, cmd),
        Command::Attack(AttackCommand::Removal(a)) => cmd_removal(a, cmd),
        Command::Attack(AttackCommand::Distinguish(a)) => cmd_distinguish(a, cmd),
        Command::Train(a) => cmd_train(a, cmd),
        Command::Replay(a) => cmd_replay(a),
    }
}

fn fail(e: &ErrorReport) -> i32 {
    eprintln!("{}", String::from_utf8_lossy(&json_bytes(e)).trim_end());
    e.exit_code
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            return fail(&ErrorReport { error: "usage", message: e.to_string().trim_end().to_string(), exit_code: 2 });
        }
    };
    if cli.jobs > 0 {
        // a pool installed earlier in the process (tests) is kept
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global();
    }
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => fail(&e.report()),
    }
}
