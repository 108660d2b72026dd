//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Expected values come from oracles written here (closed forms, bit
//! counters, the plain reference forward pass), never from the code under
//! test. A criterion listed in `DOCUMENTED_FAILURES` still prints FAIL when
//! it fails; it just does not turn the process exit code red.

use std::time::Instant;

use lockdnn::attacks::{
    self, key_sweep_distinguisher, removal_attack, run_accuracy, FinetuneSettings, Stuck, ALPHA_GRID,
};
use lockdnn::dataset::{to_tensors, BlobParams, ToyDataset};
use lockdnn::keyfile::save_key_pair;
use lockdnn::manifest::{bundled_model, load_model, save_model};
use lockdnn_core::codec::{decode, encode, Format};
use lockdnn_core::keying::{gen_keys, CounterRng, KeyMaterial, KeyParams};
use lockdnn_core::obfuscator::{obfuscate, restore, verify_restoration};
use lockdnn_core::sim::{self, random_hkey, wrong_hkey};
use lockdnn_core::{forward_reference, DetectorMode, Device, Model, QFormat, Ratio, RunOptions, Shape, Tensor};

/// Criteria that fail for reasons recorded in the README.
const DOCUMENTED_FAILURES: &[u32] = &[7];

const H: u64 = 16;
const Q: QFormat = QFormat::Q8_8;
const RLC: Format = Format::Rlc { run_bits: 4 };
const FORMATS: [Format; 3] = [Format::BitMap, RLC, Format::Csc];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn keys(seed: u64, model: &Model, seg_bits: u32) -> KeyMaterial {
    gen_keys(seed, model, &KeyParams::new(4, seg_bits, 16, 2)).unwrap()
}

fn test_split(n: usize) -> (Vec<Tensor>, Vec<usize>) {
    let d = ToyDataset::blobs(&BlobParams::toy(0)).unwrap();
    let rows = &d.test[..n.min(d.test.len())];
    (to_tensors(rows, d.shape, Q), rows.iter().map(|s| s.label).collect())
}

fn reference_logits(m: &Model, inputs: &[Tensor]) -> Vec<Vec<i32>> {
    inputs.iter().map(|x| forward_reference(m, x).unwrap().into_data()).collect()
}

fn keyed(format: Format) -> RunOptions {
    RunOptions { format, detectors: DetectorMode::Keyed }
}

/// A map with exactly `round(z*N)` flagged positions, chosen by a
/// Fisher-Yates shuffle; stored words are nonzero.
fn synthetic_map(seed: u64, shape: Shape, z: f64) -> (Vec<i32>, Vec<bool>) {
    let n = shape.len();
    let zeros = (z * n as f64).round() as usize;
    let mut rng = CounterRng::new(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.below(i as u64 + 1) as usize);
    }
    let mut flags = vec![false; n];
    for &i in &idx[..zeros] {
        flags[i] = true;
    }
    let values = flags.iter().map(|&f| if f { 0 } else { 1 + rng.below(32767) as i32 }).collect();
    (values, flags)
}

fn size(values: &[i32], flags: &[bool], shape: Shape, f: Format) -> u64 {
    encode(values, flags, shape, f, Q).unwrap().size_bits
}

/// wrong-key (nothing flagged) over correct-key size.
fn ratio(values: &[i32], flags: &[bool], shape: Shape, f: Format) -> Ratio<u64> {
    let none = vec![false; flags.len()];
    Ratio::new(size(values, &none, shape, f), size(values, flags, shape, f))
}

fn bits_for(n: u64) -> u64 {
    // smallest b with 2^b >= n
    let mut b = 0;
    while (1u64 << b) < n {
        b += 1;
    }
    b
}

/// Payload bit count by walking the flag stream.
fn counted_bits(flags: &[bool], shape: Shape, f: Format) -> u64 {
    match f {
        Format::BitMap => flags.iter().map(|&x| if x { 1 } else { 1 + H }).sum(),
        Format::Rlc { run_bits } => {
            let max_run = (1u64 << run_bits) - 1;
            let pair = run_bits as u64 + H;
            let mut bits = 0;
            let mut gap = 0u64;
            let mut escapes = 0u64;
            for &x in flags {
                if x {
                    gap += 1;
                    if gap == max_run {
                        escapes += 1;
                        gap = 0;
                    }
                } else {
                    // escapes only travel ahead of a stored word
                    bits += (escapes + 1) * pair;
                    gap = 0;
                    escapes = 0;
                }
            }
            bits
        }
        Format::Csc => {
            let plane = shape.height * shape.width;
            flags
                .chunks(plane)
                .map(|ch| {
                    let nnz = ch.iter().filter(|&&x| !x).count() as u64;
                    (shape.width as u64 + 1) * bits_for(nnz + 1) + nnz * (bits_for(shape.height as u64) + H)
                })
                .sum()
        }
    }
}

fn c1_key_transparency() -> Outcome {
    let m = bundled_model();
    let k = keys(0, &m, 8);
    let dev = Device::from_keys(&k);
    let (inputs, _) = test_split(100);
    let mk = dev.adders.transparent_key();
    let oracle = reference_logits(&m, &inputs);
    let correct = sim::run(&dev, &m, &inputs, &k.hkey.correct_key(), &mk, keyed(Format::BitMap)).unwrap();
    let mut rng = CounterRng::new(0xacce);
    let mut identical = 0;
    let mut larger = 0;
    for _ in 0..100 {
        let hk = random_hkey(&mut rng, &k.hkey);
        let r = sim::run(&dev, &m, &inputs, &hk, &mk, keyed(Format::BitMap)).unwrap();
        identical += (r.logits == correct.logits) as usize;
        larger += (r.totals().stored_bits > correct.totals().stored_bits) as usize;
    }
    outcome(
        correct.logits == oracle && identical == 100,
        format!("{identical}/100 random Hkeys bit-identical to the correct key; correct key matches the plain forward pass: {}; {larger} keys grew storage", correct.logits == oracle),
    )
}

fn c2_blowup_formula() -> Outcome {
    let shape = Shape::new(10, 10, 10);
    let n = shape.len() as u64;
    let (v, f) = synthetic_map(2, shape, 0.81);
    let nnz = (n as f64 * (1.0 - 0.81)).round() as u64;
    let (want_wrong, want_correct) = (n * (1 + H), n + nnz * H);
    let none = vec![false; f.len()];
    let (wrong, correct) = (size(&v, &none, shape, Format::BitMap), size(&v, &f, shape, Format::BitMap));
    let bm = ratio(&v, &f, shape, Format::BitMap);
    let rlc = ratio(&v, &f, shape, RLC);
    let csc = ratio(&v, &f, shape, Format::Csc);
    let exact = (want_wrong, want_correct) == (17000, 4040) && (wrong, correct) == (want_wrong, want_correct);
    outcome(
        exact && bm == Ratio::new(17000, 4040) && rlc > bm && csc > bm,
        format!(
            "bitmap {wrong}/{correct} (closed form {want_wrong}/{want_correct}) = {:.4}; rlc {:.4}; csc {:.4}",
            17000.0 / 4040.0,
            *rlc.numer() as f64 / *rlc.denom() as f64,
            *csc.numer() as f64 / *csc.denom() as f64
        ),
    )
}

fn c3_ratio_monotone() -> Outcome {
    let shape = Shape::new(10, 10, 10);
    let (v59, f59) = synthetic_map(59, shape, 0.59);
    let (v81, f81) = synthetic_map(81, shape, 0.81);
    let mut ok = true;
    let mut parts = Vec::new();
    for f in FORMATS {
        let (a, b) = (ratio(&v59, &f59, shape, f), ratio(&v81, &f81, shape, f));
        ok &= b > a;
        parts.push(format!(
            "{} {:.3} -> {:.3}",
            f.name(),
            *a.numer() as f64 / *a.denom() as f64,
            *b.numer() as f64 / *b.denom() as f64
        ));
    }
    outcome(ok, parts.join("; "))
}

fn c4_codec_soundness() -> Outcome {
    let mut rng = CounterRng::new(0xc0dec);
    let mut bad = [0usize; 3];
    for (fi, f) in FORMATS.iter().enumerate() {
        for _ in 0..10_000 {
            let shape = Shape::new(1 + rng.below(4) as usize, 1 + rng.below(12) as usize, 1 + rng.below(12) as usize);
            let z = rng.unit_f64();
            let flags: Vec<bool> = (0..shape.len()).map(|_| rng.unit_f64() < z).collect();
            let values: Vec<i32> = (0..shape.len()).map(|_| rng.bits(16) as i32 - 32768).collect();
            let c = encode(&values, &flags, shape, *f, Q).unwrap();
            let d = decode(&c).unwrap();
            let want: Vec<i32> = values.iter().zip(&flags).map(|(&v, &x)| if x { 0 } else { v }).collect();
            let counted = counted_bits(&flags, shape, *f);
            let pad_clear = match c.payload.last() {
                Some(&b) if !counted.is_multiple_of(8) => b & (0xff >> (counted % 8)) == 0,
                _ => true,
            };
            let sound = d.values == want
                && d.flagged == flags
                && c.size_bits == counted
                && c.payload.len() as u64 == counted.div_ceil(8)
                && pad_clear;
            bad[fi] += !sound as usize;
        }
    }
    outcome(bad == [0; 3], format!("failures per 10000: bitmap {}, rlc {}, csc {}", bad[0], bad[1], bad[2]))
}

fn c5_mkey() -> Outcome {
    let m = bundled_model();
    let dir = tempfile::tempdir().unwrap();
    let mut ok = true;
    let mut notes = Vec::new();
    for seed in 0..3u64 {
        let k = keys(seed, &m, 8);
        let cfg = &k.mkey;
        let mk = cfg.correct_key();
        let obf = obfuscate(&m, cfg).unwrap();
        let round_trip = restore(&obf, &mk, &cfg.polarity).unwrap() == m;
        // every group's adder gate flipped
        let all_flipped: Vec<u32> = cfg.polarity.iter().map(|p| p ^ ((1 << cfg.msb_bits) - 1)).collect();
        let mut rng = CounterRng::new(seed ^ 0x9);
        let random_p: Vec<u32> = loop {
            let p: Vec<u32> = (0..cfg.n_groups).map(|_| rng.bits(cfg.msb_bits)).collect();
            if cfg.masked_groups.iter().any(|&g| p[g as usize] != cfg.polarity[g as usize]) {
                break p;
            }
        };
        let wrong_fails = [all_flipped, random_p]
            .iter()
            .all(|p| !verify_restoration(&m, &obf, &mk, p).unwrap().restored && restore(&obf, &mk, p).unwrap() != m);

        // published: obfuscated manifest + blob and keys.json
        let d = dir.path().join(format!("s{seed}"));
        std::fs::create_dir_all(&d).unwrap();
        save_model(&obf, &d.join("obf.json")).unwrap();
        save_key_pair(&k, &d.join("keys.json"), &d.join("accel_private.json")).unwrap();
        let reloaded = load_model(&d.join("obf.json")).unwrap();
        let v: Vec<String> = cfg.masked_groups.iter().map(|&g| format!("{:x}", cfg.masks[g as usize])).collect();
        let mut leak = false;
        for name in ["obf.json", "keys.json"] {
            let json: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join(name)).unwrap()).unwrap();
            leak |= scan(&json, &v);
        }
        let plain_biases_hidden =
            m.layers.iter().zip(&reloaded.layers).zip(&cfg.group_map).all(|((a, b), ids)| {
                a.bias.iter().zip(&b.bias).zip(ids).all(|((x, y), &g)| !cfg.is_masked(g) || x != y)
            });
        let this = round_trip && wrong_fails && !leak && plain_biases_hidden && reloaded == obf;
        ok &= this;
        notes.push(format!(
            "seed {seed}: round-trip {round_trip}, wrong P rejected {wrong_fails}, leak {leak}, masked biases altered {plain_biases_hidden}"
        ));
    }
    outcome(ok, notes.join("; "))
}

/// True if some object key names the masks or polarity, or some array equals
/// the mask list.
fn scan(v: &serde_json::Value, masks: &[String]) -> bool {
    match v {
        serde_json::Value::Object(o) => o
            .iter()
            .any(|(k, x)| k.contains("mask") && k != "masked_groups" || k.contains("polarity") || scan(x, masks)),
        serde_json::Value::Array(a) => {
            let strs: Vec<Option<&str>> = a.iter().map(|x| x.as_str()).collect();
            strs.len() == masks.len() && strs.iter().zip(masks).all(|(s, m)| *s == Some(m.as_str()))
                || a.iter().any(|x| scan(x, masks))
        }
        _ => false,
    }
}

fn c6_c7_finetune() -> (Outcome, Outcome) {
    let settings = FinetuneSettings::toy();
    let o = attacks::finetune_experiment(&settings, &[0, 1, 2]).unwrap();
    let mut ok6 = true;
    let mut n6 = Vec::new();
    for t in &o.trials {
        ok6 &= t.obfuscated <= t.chance + 10.0 && t.original >= t.chance + 40.0;
        n6.push(format!("seed {}: original {:.1}, obfuscated {:.1}", t.seed, t.original, t.obfuscated));
    }
    let c6 = outcome(ok6, format!("chance {:.1}; {}", o.trials[0].chance, n6.join("; ")));

    assert_eq!(settings.alphas, ALPHA_GRID);
    let mut parity = true;
    let mut margin = true;
    let mut monotone = true;
    let mut notes = Vec::new();
    for (j, p) in o.means.iter().enumerate() {
        let gap = (p.obf_init - p.rand_init).abs();
        parity &= gap <= 10.0;
        margin &= p.obf_init <= o.mean_original - 10.0 && p.rand_init <= o.mean_original - 10.0;
        for q in &o.means[..j] {
            monotone &= p.obf_init >= q.obf_init - 3.0 && p.rand_init >= q.rand_init - 3.0;
        }
        notes.push(format!("a={:.2}: obf {:.1} rand {:.1} (gap {gap:.1})", p.alpha, p.obf_init, p.rand_init));
    }
    let c7 = outcome(
        parity && margin && monotone,
        format!(
            "original {:.1}; {}; parity<=10 {parity}, >=10 below original {margin}, monotone {monotone}",
            o.mean_original,
            notes.join("; ")
        ),
    );
    (c6, c7)
}

fn c8_removal() -> Outcome {
    let m = bundled_model();
    let (inputs, labels) = test_split(1000);
    let oracle = reference_logits(&m, &inputs);
    let mut ok = true;
    let mut notes = Vec::new();
    for seed in 0..3u64 {
        let k = keys(seed, &m, 8);
        let dev = Device::from_keys(&k);
        let mk = dev.adders.transparent_key();
        let zero = removal_attack(&dev, &m, &inputs, &mk, Stuck::Zero, Format::BitMap).unwrap();
        let wrong = wrong_hkey(&mut CounterRng::new(seed), &k.hkey);
        let w = sim::run(&dev, &m, &inputs, &wrong, &mk, keyed(Format::BitMap)).unwrap();
        let one = removal_attack(&dev, &m, &inputs, &mk, Stuck::One, Format::BitMap).unwrap();
        let acc = run_accuracy(&one, &labels);
        let dense: u64 = zero.layers.iter().map(|l| l.elements * (1 + H)).sum();
        let this = zero.logits == oracle
            && zero.totals().stored_bits == w.totals().stored_bits
            && zero.totals().stored_bits == dense
            && acc <= 10.0 + 5.0;
        ok &= this;
        notes.push(format!(
            "seed {seed}: stuck-0 correct {}, bits {} vs all-wrong {}, stuck-1 accuracy {acc:.1}",
            zero.logits == oracle,
            zero.totals().stored_bits,
            w.totals().stored_bits
        ));
    }
    outcome(ok, notes.join("; "))
}

fn c9_enumeration() -> Outcome {
    let m = bundled_model();
    let (inputs, _) = test_split(10);
    let mut ok = true;
    let mut notes = Vec::new();
    for c in [4u32, 8] {
        let k = keys(c as u64, &m, c);
        let dev = Device::from_keys(&k);
        let mk = dev.adders.transparent_key();
        let mut unlocking = Vec::new();
        for lane in 0..k.hkey.n_detectors {
            let d = key_sweep_distinguisher(&dev, &m, &inputs, &mk, lane, Format::BitMap, 7).unwrap();
            let top = d.rows.iter().map(|r| r.stored_bits).max().unwrap();
            let smaller: Vec<u32> = d.rows.iter().filter(|r| r.stored_bits < top).map(|r| r.value).collect();
            let slot = k.hkey.slot(lane).unwrap();
            ok &= d.rows.len() == 1 << c
                && smaller == [k.hkey.correct[slot]]
                && d.minimizer_is_correct
                && d.logits_invariant;
            unlocking.push(smaller.len());
        }
        notes.push(format!("c={c}: unlocking patterns per detector {unlocking:?}"));
    }
    outcome(ok, notes.join("; "))
}

fn main() {
    let names = [
        "key transparency",
        "memory blowup formula",
        "ratio monotone in sparsity",
        "codec soundness",
        "Mkey round-trip and leakage",
        "accuracy collapse",
        "finetune resistance",
        "removal attack",
        "segment enumeration",
    ];
    fn timed(id: u32, f: fn() -> Outcome) -> (u32, Outcome, f64) {
        let t = Instant::now();
        let o = f();
        (id, o, t.elapsed().as_secs_f64())
    }
    let mut results = vec![
        timed(1, c1_key_transparency),
        timed(2, c2_blowup_formula),
        timed(3, c3_ratio_monotone),
        timed(4, c4_codec_soundness),
        timed(5, c5_mkey),
    ];
    let t = Instant::now();
    let (c6, c7) = c6_c7_finetune();
    let ft = t.elapsed().as_secs_f64();
    results.push((6, c6, ft));
    results.push((7, c7, ft));
    results.push(timed(8, c8_removal));
    results.push(timed(9, c9_enumeration));

    let mut red = false;
    for (id, o, secs) in &results {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        let note = if !o.pass && DOCUMENTED_FAILURES.contains(id) { " [documented]" } else { "" };
        println!("{verdict} {id} {}{note} ({secs:.1}s): {}", names[*id as usize - 1], o.detail);
        red |= !o.pass && !DOCUMENTED_FAILURES.contains(id);
    }
    let passed = results.iter().filter(|r| r.1.pass).count();
    println!("acceptance: {passed}/{} PASS", results.len());
    if red {
        std::process::exit(1);
    }
}
