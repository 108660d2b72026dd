//! Secret material for one simulated device: the T vector, the Hkey layout
//! with its correct segments, and the Mkey layout with bias masks, gate
//! polarity and the bias-to-adder group schedule.

use alloc::format;
use alloc::vec::Vec;

use num_rational::Ratio;

use crate::error::Error;
use crate::model::Model;
use crate::numeric::QFormat;

/// SplitMix64 used as a counter-based generator: output `i` (from 0) is
/// `mix(seed + (i + 1) * 0x9E3779B97F4A7C15)` where `mix` is the SplitMix64
/// finalizer (`xor-shift 30, * 0xBF58476D1CE4E5B9, xor-shift 27,
/// * 0x94D049BB133111EB, xor-shift 31`). Small enough to port anywhere.
#[derive(Debug, Clone)]
pub struct CounterRng {
    seed: u64,
    counter: u64,
}

impl CounterRng {
    const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

    pub fn new(seed: u64) -> Self {
        CounterRng { seed, counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        let mut z = self.seed.wrapping_add(self.counter.wrapping_mul(Self::GAMMA));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform `bits`-wide value (top bits of one draw).
    pub fn bits(&mut self, bits: u32) -> u32 {
        debug_assert!((1..=32).contains(&bits));
        (self.next_u64() >> (64 - bits)) as u32
    }

    /// Uniform integer in `[0, n)` by rejection.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Uniform value in `[0, 1)` with 53 random bits.
    pub fn unit_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// Width-`h` constant XORed onto every ReLU output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TVector {
    bits: u32,
    format: QFormat,
}

impl TVector {
    pub fn new(bits: u32, format: QFormat) -> Self {
        TVector { bits: bits & format.mask(), format }
    }

    pub fn bits(self) -> u32 {
        self.bits
    }

    pub fn format(self) -> QFormat {
        self.format
    }

    /// The T pattern read as a signed raw word.
    pub fn as_raw(self) -> i32 {
        self.format.from_bits(self.bits)
    }
}

/// Hkey layout and the correct segment of every locked match detector.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HkeyConfig {
    pub n_detectors: usize,
    pub seg_bits: u32,
    /// Detector lanes that take an Hkey segment, ascending.
    pub locked: Vec<usize>,
    /// `HK*_i` for each entry of `locked`.
    pub correct: Vec<u32>,
}

impl HkeyConfig {
    pub fn total_bits(&self) -> u32 {
        self.seg_bits * self.locked.len() as u32
    }

    pub fn validate(&self) -> Result<(), Error> {
        if !(1..=24).contains(&self.seg_bits) {
            return Err(Error::SegmentWidth(self.seg_bits));
        }
        if self.locked.is_empty() || self.locked.len() != self.correct.len() {
            return Err(Error::KeyConfig("locked detector set must be nonempty with one segment each".into()));
        }
        if self.locked.windows(2).any(|w| w[0] >= w[1]) || self.locked.iter().any(|&l| l >= self.n_detectors) {
            return Err(Error::KeyConfig("locked detectors must be ascending lane indices".into()));
        }
        if self.correct.iter().any(|&s| s >> self.seg_bits != 0) {
            return Err(Error::KeyConfig("segment wider than seg_bits".into()));
        }
        Ok(())
    }

    /// Position of `lane` in the locked list, if it is locked.
    pub fn slot(&self, lane: usize) -> Option<usize> {
        self.locked.binary_search(&lane).ok()
    }

    pub fn correct_key(&self) -> Hkey {
        Hkey { segments: self.correct.clone() }
    }
}

/// Hkey supplied to the device: one segment per locked detector.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Hkey {
    pub segments: Vec<u32>,
}

/// Mkey supplied to the device: one `m`-bit segment per masked group.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mkey {
    pub segments: Vec<u32>,
}

/// Bias grouping, masks `V_i` and polarity `P_i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MkeyConfig {
    pub n_groups: u32,
    pub msb_bits: u32,
    /// Group id of every bias, one list per layer.
    pub group_map: Vec<Vec<u32>>,
    /// Groups whose adders take an Mkey segment, ascending.
    pub masked_groups: Vec<u32>,
    /// `V_i` per group id (zero for unmasked groups).
    pub masks: Vec<u32>,
    /// `P_i` per group id; a set bit means that bit uses an XNOR gate.
    pub polarity: Vec<u32>,
}

impl MkeyConfig {
    pub fn total_bits(&self) -> u32 {
        self.msb_bits * self.masked_groups.len() as u32
    }

    pub fn validate(&self, q: QFormat) -> Result<(), Error> {
        let g = self.n_groups as usize;
        if g == 0 || self.masks.len() != g || self.polarity.len() != g {
            return Err(Error::KeyConfig("mask and polarity vectors must have one entry per group".into()));
        }
        if self.msb_bits == 0 || self.msb_bits > q.width() {
            return Err(Error::KeyConfig(format!("cannot mask {} MSBs of a {}-bit word", self.msb_bits, q.width())));
        }
        if self.masked_groups.windows(2).any(|w| w[0] >= w[1]) || self.masked_groups.iter().any(|&m| m >= self.n_groups)
        {
            return Err(Error::KeyConfig("masked groups must be ascending group ids".into()));
        }
        let limit = 1u64 << self.msb_bits;
        if self.masks.iter().chain(&self.polarity).any(|&v| v as u64 >= limit) {
            return Err(Error::KeyConfig("mask or polarity wider than msb_bits".into()));
        }
        if self.group_map.iter().flatten().any(|&id| id >= self.n_groups) {
            return Err(Error::GroupCoverage("group id out of range".into()));
        }
        Ok(())
    }

    pub fn is_masked(&self, group: u32) -> bool {
        self.masked_groups.binary_search(&group).is_ok()
    }

    pub fn slot(&self, group: u32) -> Option<usize> {
        self.masked_groups.binary_search(&group).ok()
    }

    /// `MK_i = V_i XOR P_i` for each masked group.
    pub fn correct_key(&self) -> Mkey {
        Mkey {
            segments: self.masked_groups.iter().map(|&g| self.masks[g as usize] ^ self.polarity[g as usize]).collect(),
        }
    }

    /// Checks that the map has one entry per bias of `model`.
    pub fn check_coverage(&self, model: &Model) -> Result<(), Error> {
        if self.group_map.len() != model.layers.len() {
            return Err(Error::GroupCoverage(format!(
                "map covers {} layers, model has {}",
                self.group_map.len(),
                model.layers.len()
            )));
        }
        for (i, (ids, layer)) in self.group_map.iter().zip(&model.layers).enumerate() {
            if ids.len() != layer.bias.len() {
                return Err(Error::GroupCoverage(format!(
                    "layer {i}: {} group ids for {} biases",
                    ids.len(),
                    layer.bias.len()
                )));
            }
        }
        Ok(())
    }
}

/// Round-robin bias schedule: bias `j` of every layer goes to group `j mod g`.
pub fn round_robin_groups(model: &Model, n_groups: u32) -> Vec<Vec<u32>> {
    model.layers.iter().map(|l| (0..l.bias.len()).map(|j| (j % n_groups as usize) as u32).collect()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PolarityMode {
    /// Each polarity bit drawn uniformly.
    #[default]
    Random,
    /// All XOR gates.
    AllXor,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyParams {
    /// Parallel lanes: MACs, bias adders, ReLU units and match detectors.
    pub detectors: usize,
    /// Bits per Hkey segment (`c`).
    pub seg_bits: u32,
    /// Locked detectors; the first `locked_detectors` lanes take a segment.
    pub locked_detectors: usize,
    /// If set, must equal `seg_bits * locked_detectors`.
    pub hkey_bits: Option<u32>,
    pub groups: u32,
    pub msb_bits: u32,
    /// Masked groups; the first `masked_groups` ids are masked. Defaults to all.
    pub masked_groups: Option<u32>,
    /// Permit `msb_bits == 1`.
    pub allow_single_msb: bool,
    /// Draw `V_i` from the nonzero patterns only.
    pub nonzero_masks: bool,
    pub polarity: PolarityMode,
}

impl KeyParams {
    pub fn new(detectors: usize, seg_bits: u32, groups: u32, msb_bits: u32) -> Self {
        KeyParams {
            detectors,
            seg_bits,
            locked_detectors: detectors,
            hkey_bits: None,
            groups,
            msb_bits,
            masked_groups: None,
            allow_single_msb: false,
            nonzero_masks: true,
            polarity: PolarityMode::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyMaterial {
    pub t: TVector,
    pub hkey: HkeyConfig,
    pub mkey: MkeyConfig,
}

/// Derives all key material from `seed`. Draw order: T, then `HK*_i` for
/// each locked lane, then `V_i` for each masked group, then `P_i` for every
/// group.
pub fn gen_keys(seed: u64, model: &Model, params: &KeyParams) -> Result<KeyMaterial, Error> {
    let q = model.qformat;
    let p = params;
    if !(1..=24).contains(&p.seg_bits) {
        return Err(Error::SegmentWidth(p.seg_bits));
    }
    if p.detectors == 0 || p.locked_detectors == 0 || p.locked_detectors > p.detectors {
        return Err(Error::KeyConfig(format!("cannot lock {} of {} detectors", p.locked_detectors, p.detectors)));
    }
    if let Some(lh) = p.hkey_bits {
        if lh != p.seg_bits * p.locked_detectors as u32 {
            return Err(Error::KeyConfig(format!(
                "Hkey of {lh} bits does not split into {} segments of {} bits",
                p.locked_detectors, p.seg_bits
            )));
        }
    }
    if p.groups == 0 {
        return Err(Error::KeyConfig("at least one bias group is required".into()));
    }
    if p.msb_bits == 0 || p.msb_bits > q.width() || (p.msb_bits < 2 && !p.allow_single_msb) {
        return Err(Error::KeyConfig(format!("invalid msb_bits {}", p.msb_bits)));
    }
    let masked = p.masked_groups.unwrap_or(p.groups);
    if masked == 0 || masked > p.groups {
        return Err(Error::KeyConfig(format!("cannot mask {masked} of {} groups", p.groups)));
    }

    let mut rng = CounterRng::new(seed);
    let t = TVector::new(rng.bits(q.width()), q);
    let correct = (0..p.locked_detectors).map(|_| rng.bits(p.seg_bits)).collect();
    let hkey = HkeyConfig {
        n_detectors: p.detectors,
        seg_bits: p.seg_bits,
        locked: (0..p.locked_detectors).collect(),
        correct,
    };

    let span = 1u64 << p.msb_bits;
    let mut masks = alloc::vec![0u32; p.groups as usize];
    for v in masks.iter_mut().take(masked as usize) {
        *v = if p.nonzero_masks { 1 + rng.below(span - 1) as u32 } else { rng.below(span) as u32 };
    }
    let polarity = (0..p.groups)
        .map(|_| match p.polarity {
            PolarityMode::Random => rng.below(span) as u32,
            PolarityMode::AllXor => 0,
        })
        .collect();
    let mkey = MkeyConfig {
        n_groups: p.groups,
        msb_bits: p.msb_bits,
        group_map: round_robin_groups(model, p.groups),
        masked_groups: (0..masked).collect(),
        masks,
        polarity,
    };
    hkey.validate()?;
    mkey.validate(q)?;
    Ok(KeyMaterial { t, hkey, mkey })
}

/// Fraction of `c`-bit segments that satisfy one detector's key test.
pub fn segment_match_fraction(c: u32) -> Result<Ratio<u64>, Error> {
    if !(1..=24).contains(&c) {
        return Err(Error::SegmentWidth(c));
    }
    Ok(Ratio::new(1, 1u64 << c))
}
