//! Bias masking on the model provider's side.

use alloc::format;
use alloc::vec::Vec;

use crate::datapath::{restore_bias, xor_msbs};
use crate::error::Error;
use crate::keying::{Mkey, MkeyConfig};
use crate::model::{Model, ObfuscationMeta};

/// How an Mkey of a given length is spread over the bias adders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocationPlan {
    pub n_groups: u32,
    pub msb_bits: u32,
    pub masked_groups: Vec<u32>,
}

impl AllocationPlan {
    /// Mkey bits actually consumed.
    pub fn key_bits(&self) -> u32 {
        self.msb_bits * self.masked_groups.len() as u32
    }
}

/// With at least two key bits per adder every group is masked with
/// `floor(L_M / n)` MSBs; otherwise the first `L_M / 2` groups get two MSBs
/// each and the rest stay plain.
pub fn plan_allocation(key_bits: u32, n_adders: u32) -> Result<AllocationPlan, Error> {
    if key_bits < 2 {
        return Err(Error::NothingToMask(key_bits));
    }
    if !key_bits.is_multiple_of(2) {
        return Err(Error::KeyConfig(format!("Mkey length {key_bits} must be even")));
    }
    if n_adders == 0 {
        return Err(Error::KeyConfig("no bias adders".into()));
    }
    Ok(if key_bits >= 2 * n_adders {
        AllocationPlan { n_groups: n_adders, msb_bits: key_bits / n_adders, masked_groups: (0..n_adders).collect() }
    } else {
        AllocationPlan { n_groups: n_adders, msb_bits: 2, masked_groups: (0..key_bits / 2).collect() }
    })
}

/// XORs `V_i` onto the MSBs of every bias in each masked group. Weights are
/// untouched; the layout (not the masks) is recorded in the model.
pub fn obfuscate(model: &Model, cfg: &MkeyConfig) -> Result<Model, Error> {
    if model.is_obfuscated() {
        return Err(Error::DoubleObfuscation);
    }
    let q = model.qformat;
    cfg.validate(q)?;
    cfg.check_coverage(model)?;
    let mut out = model.clone();
    for (layer, ids) in out.layers.iter_mut().zip(&cfg.group_map) {
        for (b, &g) in layer.bias.iter_mut().zip(ids) {
            if cfg.is_masked(g) {
                *b = xor_msbs(*b, cfg.masks[g as usize], q, cfg.msb_bits);
            }
        }
    }
    out.obfuscation = Some(ObfuscationMeta {
        groups: cfg.n_groups,
        msb_bits: cfg.msb_bits,
        group_map: cfg.group_map.clone(),
        masked_groups: cfg.masked_groups.clone(),
    });
    Ok(out)
}

/// Applies `MK_i XOR P_i` to every masked group, giving the plain model the
/// keyed adders compute with.
pub fn restore(obf: &Model, mk: &Mkey, polarity: &[u32]) -> Result<Model, Error> {
    let meta = obf.obfuscation.as_ref().ok_or(Error::NotObfuscated)?;
    if mk.segments.len() != meta.masked_groups.len() || polarity.len() != meta.groups as usize {
        return Err(Error::KeyConfig("Mkey or polarity does not match the obfuscation layout".into()));
    }
    if meta.group_map.len() != obf.layers.len()
        || meta.group_map.iter().zip(&obf.layers).any(|(g, l)| g.len() != l.bias.len())
    {
        return Err(Error::GroupCoverage("group map does not match the model".into()));
    }
    let q = obf.qformat;
    let mut out = obf.clone();
    for (layer, ids) in out.layers.iter_mut().zip(&meta.group_map) {
        for (b, &g) in layer.bias.iter_mut().zip(ids) {
            if let Ok(s) = meta.masked_groups.binary_search(&g) {
                *b = restore_bias(*b, mk.segments[s], polarity[g as usize], q, meta.msb_bits);
            }
        }
    }
    out.obfuscation = None;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RestorationCheck {
    pub restored: bool,
    /// Groups holding at least one bias that did not come back.
    pub bad_groups: Vec<u32>,
    pub weights_match: bool,
}

/// Applies `MK_i XOR P_i` to each masked group of `obf` and compares with
/// `orig` bit for bit.
pub fn verify_restoration(orig: &Model, obf: &Model, mk: &Mkey, polarity: &[u32]) -> Result<RestorationCheck, Error> {
    let meta = obf.obfuscation.as_ref().ok_or(Error::NotObfuscated)?;
    if orig.layers.len() != obf.layers.len()
        || orig.qformat != obf.qformat
        || orig.input != obf.input
        || orig
            .layers
            .iter()
            .zip(&obf.layers)
            .any(|(a, b)| a.kind != b.kind || a.weight.len() != b.weight.len() || a.bias.len() != b.bias.len())
    {
        return Err(Error::ArchitectureMismatch(format!("{} vs {}", orig.name, obf.name)));
    }
    if mk.segments.len() != meta.masked_groups.len() || polarity.len() != meta.groups as usize {
        return Err(Error::KeyConfig("Mkey or polarity does not match the obfuscation layout".into()));
    }
    if meta.group_map.len() != obf.layers.len() {
        return Err(Error::GroupCoverage("group map does not match layer count".into()));
    }
    let q = obf.qformat;
    let mut bad_groups = Vec::new();
    for ((lo, lb), ids) in orig.layers.iter().zip(&obf.layers).zip(&meta.group_map) {
        if ids.len() != lb.bias.len() {
            return Err(Error::GroupCoverage("group map does not match bias count".into()));
        }
        for ((&want, &have), &g) in lo.bias.iter().zip(&lb.bias).zip(ids) {
            let got = match meta.masked_groups.binary_search(&g) {
                Ok(s) => restore_bias(have, mk.segments[s], polarity[g as usize], q, meta.msb_bits),
                Err(_) => have,
            };
            if got != want {
                bad_groups.push(g);
            }
        }
    }
    bad_groups.sort_unstable();
    bad_groups.dedup();
    let weights_match = orig.layers.iter().zip(&obf.layers).all(|(a, b)| a.weight == b.weight);
    Ok(RestorationCheck { restored: bad_groups.is_empty() && weights_match, bad_groups, weights_match })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapath::msb_mask;
    use crate::keying::{gen_keys, round_robin_groups, KeyParams, PolarityMode};
    use crate::model::{Layer, LayerKind, Shape};
    use crate::numeric::{Accumulator, QFormat};
    use alloc::vec;

    fn mlp() -> Model {
        Model {
            name: "m".into(),
            qformat: QFormat::Q8_8,
            accumulator: Accumulator::Saturating,
            classes: 3,
            input: Shape::vector(4),
            layers: vec![
                Layer::new(
                    LayerKind::Fc { in_features: 4, out_features: 6 },
                    (0..24).collect(),
                    vec![0x0100, -3, 77, -1000, 0, 31000],
                ),
                Layer::relu(),
                Layer::new(LayerKind::Fc { in_features: 6, out_features: 3 }, (0..18).collect(), vec![5, -5, 0x0100]),
            ],
            obfuscation: None,
        }
    }

    fn cfg(model: &Model, masks: Vec<u32>, polarity: Vec<u32>) -> MkeyConfig {
        let g = masks.len() as u32;
        MkeyConfig {
            n_groups: g,
            msb_bits: 2,
            group_map: round_robin_groups(model, g),
            masked_groups: (0..g).collect(),
            masks,
            polarity,
        }
    }

    #[test]
    fn zero_masks_change_nothing_but_metadata() {
        let m = mlp();
        let o = obfuscate(&m, &cfg(&m, vec![0; 3], vec![0; 3])).unwrap();
        assert_eq!(o.layers, m.layers);
        assert!(o.is_obfuscated());
    }

    #[test]
    fn two_msbs_flip() {
        let m = mlp();
        let o = obfuscate(&m, &cfg(&m, vec![0b11, 0, 0], vec![0; 3])).unwrap();
        // bias 0 is 0x0100 in group 0
        assert_eq!(QFormat::Q8_8.to_bits(o.layers[0].bias[0]), 0xC100);
    }

    #[test]
    fn diff_matches_mask_pattern() {
        let m = mlp();
        let k = gen_keys(5, &m, &KeyParams::new(2, 4, 3, 2)).unwrap();
        let o = obfuscate(&m, &k.mkey).unwrap();
        let q = m.qformat;
        for ((a, b), ids) in m.layers.iter().zip(&o.layers).zip(&k.mkey.group_map) {
            assert_eq!(a.weight, b.weight);
            for ((&x, &y), &g) in a.bias.iter().zip(&b.bias).zip(ids) {
                let diff = q.to_bits(x) ^ q.to_bits(y);
                assert_eq!(diff & !msb_mask(q, 2), 0);
                assert_eq!(diff >> 14, k.mkey.masks[g as usize]);
            }
        }
    }

    #[test]
    fn restoration_checks() {
        let m = mlp();
        let mut p = KeyParams::new(2, 4, 3, 2);
        p.polarity = PolarityMode::Random;
        let mut k = gen_keys(9, &m, &p).unwrap();
        k.mkey.polarity = vec![0b01, 0b00, 0b10];
        let o = obfuscate(&m, &k.mkey).unwrap();
        let mk = k.mkey.correct_key();
        let ok = verify_restoration(&m, &o, &mk, &k.mkey.polarity).unwrap();
        assert!(ok.restored && ok.bad_groups.is_empty());
        assert_eq!(restore(&o, &mk, &k.mkey.polarity).unwrap(), m);
        assert_eq!(restore(&m, &mk, &k.mkey.polarity), Err(Error::NotObfuscated));

        let mut flipped = mk.clone();
        flipped.segments[1] ^= 1;
        let bad = verify_restoration(&m, &o, &flipped, &k.mkey.polarity).unwrap();
        assert!(!bad.restored);
        assert_eq!(bad.bad_groups, [1]);

        // right Mkey, polarity assumed all-XOR
        let bad = verify_restoration(&m, &o, &mk, &[0, 0, 0]).unwrap();
        assert!(!bad.restored);
        assert_eq!(bad.bad_groups, [0, 2]);
    }

    #[test]
    fn double_obfuscation_and_coverage() {
        let m = mlp();
        let c = cfg(&m, vec![1, 2, 3], vec![0; 3]);
        let o = obfuscate(&m, &c).unwrap();
        assert_eq!(obfuscate(&o, &c), Err(Error::DoubleObfuscation));
        let mut short = c.clone();
        short.group_map[0].pop();
        assert!(matches!(obfuscate(&m, &short), Err(Error::GroupCoverage(_))));
    }

    #[test]
    fn architecture_mismatch() {
        let m = mlp();
        let c = cfg(&m, vec![1, 2, 3], vec![0; 3]);
        let o = obfuscate(&m, &c).unwrap();
        let mut other = m.clone();
        other.layers.pop();
        assert!(matches!(
            verify_restoration(&other, &o, &c.correct_key(), &c.polarity),
            Err(Error::ArchitectureMismatch(_))
        ));
        assert_eq!(verify_restoration(&m, &m, &c.correct_key(), &c.polarity), Err(Error::NotObfuscated));
    }

    #[test]
    fn allocation_rules() {
        let p = plan_allocation(256, 128).unwrap();
        assert_eq!((p.msb_bits, p.masked_groups.len()), (2, 128));
        let p = plan_allocation(128, 100).unwrap();
        assert_eq!((p.msb_bits, p.masked_groups.len(), p.n_groups), (2, 64, 100));
        assert_eq!(p.masked_groups, (0..64).collect::<Vec<_>>());
        let p = plan_allocation(400, 100).unwrap();
        assert_eq!((p.msb_bits, p.masked_groups.len()), (4, 100));
        assert_eq!(plan_allocation(0, 10), Err(Error::NothingToMask(0)));
        assert!(plan_allocation(7, 10).is_err());
    }
}
