//! Keyed hardware blocks: bias adder with Mkey, ReLU with the T vector, the
//! Hkey match detector, and the read-back path that strips T again.

use alloc::vec::Vec;

use crate::codec::{self, CompressedMap};
use crate::error::Error;
use crate::keying::TVector;
use crate::model::Tensor;
use crate::numeric::{relu_plain, FixedVal, QFormat};

/// Output of one match detector: set means "discard this element".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct DetectorFlag(pub bool);

impl DetectorFlag {
    pub fn is_set(self) -> bool {
        self.0
    }
}

/// Pattern covering the `m` most significant bits of an `h`-bit word.
#[inline]
pub fn msb_mask(q: QFormat, m: u32) -> u32 {
    debug_assert!(m >= 1 && m <= q.width());
    (q.mask() >> (q.width() - m)) << (q.width() - m)
}

/// XORs `pattern` (an `m`-bit value) onto the `m` MSBs of `raw`.
#[inline]
pub fn xor_msbs(raw: i32, pattern: u32, q: QFormat, m: u32) -> i32 {
    let shifted = (pattern << (q.width() - m)) & msb_mask(q, m);
    q.from_bits(q.to_bits(raw) ^ shifted)
}

/// Bias word after the keyed adder's XOR/XNOR gates.
#[inline]
pub fn restore_bias(bias_obf: i32, mk_i: u32, p_i: u32, q: QFormat, m: u32) -> i32 {
    xor_msbs(bias_obf, mk_i ^ p_i, q, m)
}

/// Keyed bias adder: restores the `m` MSBs of the bias with `MK_i` through
/// gates of polarity `P_i`, then adds it to the MAC sum (saturating).
pub fn bias_add_keyed(sum: FixedVal, bias_obf: FixedVal, mk_i: u32, p_i: u32, m: u32) -> FixedVal {
    let q = sum.format();
    let restored = FixedVal::from_raw(restore_bias(bias_obf.raw(), mk_i, p_i, q, m) as i64, q);
    sum.saturating_add(restored)
}

/// Modified ReLU: `X' = ReLU(A) XOR T`. The sign bit of `ReLU(A)` is always
/// 0, so the sign bit of `X'` is exactly `t_{h-1}`.
#[inline]
pub fn relu_locked(a: FixedVal, t: TVector) -> FixedVal {
    let x = relu_plain(a);
    FixedVal::from_bits(x.bits() ^ t.bits(), a.format())
}

/// Same as [`relu_locked`] on raw words.
#[inline]
pub(crate) fn relu_locked_raw(a: i32, t: TVector) -> i32 {
    let q = t.format();
    q.from_bits(q.to_bits(a.max(0)) ^ t.bits())
}

/// `f_x`: true when the pre-T ReLU output was zero, i.e. `X' == T`.
#[inline]
pub fn zero_test(xp: FixedVal, t: TVector) -> bool {
    xp.bits() == t.bits()
}

/// Hkey match detector `g = f_k(HK_i) & f_x(X')`. A lane without a key
/// segment (`hk_i == None`) is an ordinary zero detector on `X'` vs `T`.
pub fn match_detect(xp: FixedVal, hk_i: Option<u32>, t: TVector, hk_star_i: u32) -> DetectorFlag {
    let fx = zero_test(xp, t);
    let fk = hk_i.is_none_or(|k| k == hk_star_i);
    DetectorFlag(fk && fx)
}

/// Decodes a stored map, re-inserts `T` at every discarded position and
/// XORs the whole map with `T`, yielding the plain ReLU map.
pub fn readback(stored: &CompressedMap, t: TVector) -> Result<Tensor, Error> {
    let q = t.format();
    let decoded = codec::decode(stored)?;
    let data: Vec<i32> = decoded
        .values
        .iter()
        .zip(&decoded.flagged)
        .map(|(&v, &f)| {
            let bits = if f { t.bits() } else { q.to_bits(v) };
            q.from_bits(bits ^ t.bits())
        })
        .collect();
    Tensor::new(stored.shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode, Format};
    use crate::keying::CounterRng;
    use crate::model::Shape;

    const Q: QFormat = QFormat::Q8_8;

    fn raw(v: i32) -> FixedVal {
        FixedVal::from_raw(v as i64, Q)
    }

    #[test]
    fn keyed_adder_with_correct_key_restores_bias() {
        let orig = 0x0123;
        let v = 0b11;
        let obf = xor_msbs(orig, v, Q, 2);
        assert_eq!(Q.to_bits(obf), 0xC123);
        let out = bias_add_keyed(raw(0), raw(obf), v, 0, 2);
        assert_eq!(out.raw(), orig);
    }

    #[test]
    fn zero_mkey_leaves_sign_flipped() {
        let orig = 0x0123; // 1.13671875
        let obf = xor_msbs(orig, 0b10, Q, 2);
        let out = bias_add_keyed(raw(0), raw(obf), 0, 0, 2);
        // oracle: flipping bit 15 moves the word by 2^15 raw = 128.0
        assert_eq!((orig - out.raw()) as f64 / 256.0, 128.0);
    }

    #[test]
    fn polarity_algebra() {
        let orig = -700;
        let v = 0b10;
        let p = 0b01;
        let obf = xor_msbs(orig, v, Q, 2);
        let mk = v ^ p;
        assert_eq!(bias_add_keyed(raw(0), raw(obf), mk, p, 2).raw(), orig);
        // the right Mkey through the wrong gates is wrong
        assert_ne!(bias_add_keyed(raw(0), raw(obf), mk, 0, 2).raw(), orig);
    }

    #[test]
    fn relu_locked_examples() {
        let t = TVector::new(0x8001, Q);
        assert_eq!(relu_locked(raw(0x00FF), t).bits(), 0x80FE);
        for a in [-1, -300, -32768] {
            assert_eq!(relu_locked(raw(a), t).bits(), t.bits());
        }
    }

    #[test]
    fn relu_locked_exhaustive() {
        let zero_t = TVector::new(0, Q);
        let t = TVector::new(0xB5A3, Q);
        for bits in 0u32..(1 << 16) {
            let a = FixedVal::from_bits(bits, Q);
            assert_eq!(relu_locked(a, zero_t), relu_plain(a));
            let xp = relu_locked(a, t);
            assert_eq!(xp.bits() >> 15, t.bits() >> 15);
            assert_eq!(xp.bits() ^ t.bits(), relu_plain(a).bits());
            assert_eq!(relu_locked_raw(a.raw(), t), xp.raw());
        }
    }

    #[test]
    fn detector_truth_table() {
        let t = TVector::new(0x1234, Q);
        let at_t = FixedVal::from_bits(0x1234, Q);
        let off_t = FixedVal::from_bits(0x1235, Q);
        assert!(match_detect(at_t, Some(5), t, 5).is_set());
        assert!(!match_detect(at_t, Some(4), t, 5).is_set());
        assert!(!match_detect(off_t, Some(5), t, 5).is_set());
        assert!(match_detect(at_t, None, t, 5).is_set());
        assert!(!match_detect(off_t, None, t, 5).is_set());
    }

    #[test]
    fn flag_only_for_zero_relu_output() {
        let t = TVector::new(0x7E01, Q);
        for bits in (0u32..(1 << 16)).step_by(7) {
            let a = FixedVal::from_bits(bits, Q);
            let flag = match_detect(relu_locked(a, t), Some(3), t, 3);
            assert_eq!(flag.is_set(), relu_plain(a).raw() == 0);
        }
    }

    #[test]
    fn wrong_segments_never_flag() {
        let mut rng = CounterRng::new(9);
        let t = TVector::new(rng.bits(16), Q);
        let xs: Vec<FixedVal> = (0..512).map(|_| raw(rng.bits(16) as i32 - 40000)).collect();
        for c in [4u32, 8, 12] {
            let star = rng.bits(c);
            for seg in 0..(1u32 << c) {
                let n = xs.iter().filter(|&&a| match_detect(relu_locked(a, t), Some(seg), t, star).is_set()).count();
                if seg == star {
                    assert!(n > 0);
                } else {
                    assert_eq!(n, 0, "c={c} seg={seg}");
                }
            }
        }
    }

    #[test]
    fn plain_zero_detector_on_locked_output_is_misled() {
        let t = TVector::new(0x0340, Q);
        let mut xs: Vec<i32> = (-200..200).collect();
        xs.push(0x0340);
        let mut misflagged = 0;
        for &a in &xs {
            let x = relu_plain(raw(a));
            let xp = relu_locked(raw(a), t);
            let naive = xp.raw() == 0;
            // flags exactly the elements where X == T, misses every true zero
            assert_eq!(naive, x.bits() == t.bits());
            if x.raw() == 0 {
                assert!(!naive);
            }
            misflagged += naive as usize;
        }
        assert_eq!(misflagged, 1);
    }

    fn locked_map(data: &[i32], t: TVector) -> Vec<i32> {
        data.iter().map(|&a| relu_locked_raw(a, t)).collect()
    }

    #[test]
    fn readback_restores_plain_relu() {
        let mut rng = CounterRng::new(21);
        let t = TVector::new(rng.bits(16), Q);
        let shape = Shape::new(3, 5, 7);
        for fmt in [Format::BitMap, Format::Rlc { run_bits: 4 }, Format::Csc] {
            let a: Vec<i32> = (0..shape.len()).map(|_| rng.bits(16) as i32 - 32768).collect();
            let plain: Vec<i32> = a.iter().map(|&v| v.max(0)).collect();
            let xp = locked_map(&a, t);
            let correct: Vec<bool> = xp.iter().map(|&v| Q.to_bits(v) == t.bits()).collect();
            let wrong = alloc::vec![false; shape.len()];
            for flags in [&correct, &wrong] {
                let c = encode(&xp, flags, shape, fmt, Q).unwrap();
                assert_eq!(readback(&c, t).unwrap().data(), &plain[..]);
            }
        }
    }

    #[test]
    fn zero_map_reads_back_as_zeros() {
        let t = TVector::new(0xBEEF, Q);
        let shape = Shape::new(2, 4, 4);
        let xp = locked_map(&alloc::vec![-5; shape.len()], t);
        let flags = alloc::vec![true; shape.len()];
        let c = encode(&xp, &flags, shape, Format::BitMap, Q).unwrap();
        assert!(readback(&c, t).unwrap().data().iter().all(|&v| v == 0));
    }
}
