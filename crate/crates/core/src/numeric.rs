//! Two's-complement fixed-point scalars.
//!
//! Every value on the datapath is an `h`-bit two's-complement word with `F`
//! fraction bits. Raw words are carried in an `i32`, always sign-extended and
//! always inside `[-2^(h-1), 2^(h-1) - 1]`. Arithmetic saturates; it never
//! wraps. All rounding is round-half-to-even.

use crate::error::Error;

/// Width and fraction layout of a fixed-point word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QFormat {
    width_bits: u8,
    frac_bits: u8,
}

impl QFormat {
    /// 16-bit word with 8 fraction bits.
    pub const Q8_8: QFormat = QFormat { width_bits: 16, frac_bits: 8 };

    pub fn new(width_bits: u32, frac_bits: u32) -> Result<Self, Error> {
        if frac_bits < 1 || frac_bits >= width_bits || width_bits > 32 {
            return Err(Error::InvalidFormat { width_bits, frac_bits });
        }
        Ok(QFormat { width_bits: width_bits as u8, frac_bits: frac_bits as u8 })
    }

    #[inline]
    pub fn width(self) -> u32 {
        self.width_bits as u32
    }

    #[inline]
    pub fn frac(self) -> u32 {
        self.frac_bits as u32
    }

    #[inline]
    pub fn max_raw(self) -> i32 {
        ((1i64 << (self.width() - 1)) - 1) as i32
    }

    #[inline]
    pub fn min_raw(self) -> i32 {
        (-(1i64 << (self.width() - 1))) as i32
    }

    /// Mask selecting the `h` low bits of a word.
    #[inline]
    pub fn mask(self) -> u32 {
        if self.width() == 32 {
            u32::MAX
        } else {
            (1u32 << self.width()) - 1
        }
    }

    /// Raw value of 1.0.
    #[inline]
    pub fn one_raw(self) -> i32 {
        1i32 << self.frac()
    }

    #[inline]
    pub fn saturate(self, v: i64) -> i32 {
        v.clamp(self.min_raw() as i64, self.max_raw() as i64) as i32
    }

    /// `h`-bit pattern of a raw value (`a_{h-1} ... a_0`).
    #[inline]
    pub fn to_bits(self, raw: i32) -> u32 {
        (raw as u32) & self.mask()
    }

    /// Sign-extends an `h`-bit pattern back into a raw value.
    #[inline]
    pub fn from_bits(self, bits: u32) -> i32 {
        let shift = 32 - self.width();
        (((bits & self.mask()) << shift) as i32) >> shift
    }

    #[inline]
    pub fn contains(self, raw: i32) -> bool {
        raw >= self.min_raw() && raw <= self.max_raw()
    }
}

impl Default for QFormat {
    fn default() -> Self {
        QFormat::Q8_8
    }
}

/// A single fixed-point scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FixedVal {
    raw: i32,
    format: QFormat,
}

impl FixedVal {
    /// Builds a value from a raw word, saturating it into range.
    pub fn from_raw(raw: i64, format: QFormat) -> Self {
        FixedVal { raw: format.saturate(raw), format }
    }

    pub fn from_bits(bits: u32, format: QFormat) -> Self {
        FixedVal { raw: format.from_bits(bits), format }
    }

    pub fn zero(format: QFormat) -> Self {
        FixedVal { raw: 0, format }
    }

    pub fn max(format: QFormat) -> Self {
        FixedVal { raw: format.max_raw(), format }
    }

    #[inline]
    pub fn raw(self) -> i32 {
        self.raw
    }

    #[inline]
    pub fn format(self) -> QFormat {
        self.format
    }

    #[inline]
    pub fn bits(self) -> u32 {
        self.format.to_bits(self.raw)
    }

    #[inline]
    pub fn sign_bit(self) -> bool {
        self.raw < 0
    }

    pub fn to_f64(self) -> f64 {
        dequantize(self)
    }

    pub fn saturating_add(self, other: FixedVal) -> FixedVal {
        debug_assert_eq!(self.format, other.format);
        FixedVal::from_raw(self.raw as i64 + other.raw as i64, self.format)
    }
}

/// Integer division by `2^shift` with round-half-to-even.
pub fn round_shift(v: i64, shift: u32) -> i64 {
    if shift == 0 {
        return v;
    }
    let floor = v >> shift;
    let rem = v - (floor << shift);
    let half = 1i64 << (shift - 1);
    if rem > half || (rem == half && floor & 1 == 1) {
        floor + 1
    } else {
        floor
    }
}

/// Nearest representable value, ties to even, saturated to range. NaN maps to 0.
pub fn quantize(x: f64, q: QFormat) -> FixedVal {
    if x.is_nan() {
        return FixedVal::zero(q);
    }
    let scaled = x * (1u64 << q.frac()) as f64;
    if scaled >= q.max_raw() as f64 {
        return FixedVal::max(q);
    }
    if scaled <= q.min_raw() as f64 {
        return FixedVal { raw: q.min_raw(), format: q };
    }
    // |scaled| < 2^31 here, so truncation and the fractional part are exact.
    let trunc = scaled as i64;
    let frac = scaled - trunc as f64;
    let rounded = if frac > 0.5 || (frac == 0.5 && trunc & 1 == 1) {
        trunc + 1
    } else if frac < -0.5 || (frac == -0.5 && trunc & 1 == 1) {
        trunc - 1
    } else {
        trunc
    };
    FixedVal::from_raw(rounded, q)
}

pub fn dequantize(v: FixedVal) -> f64 {
    v.raw as f64 / (1u64 << v.format.frac()) as f64
}

/// `acc + round(a*b / 2^F)`, saturating.
pub fn mac(acc: FixedVal, a: FixedVal, b: FixedVal) -> FixedVal {
    debug_assert!(acc.format == a.format && a.format == b.format);
    let q = acc.format;
    let prod = round_shift(a.raw as i64 * b.raw as i64, q.frac());
    FixedVal::from_raw(acc.raw as i64 + prod, q)
}

/// ReLU on a fixed-point word.
pub fn relu_plain(a: FixedVal) -> FixedVal {
    if a.raw < 0 {
        FixedVal::zero(a.format)
    } else {
        a
    }
}

/// How MAC chains accumulate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Accumulator {
    /// Every product is rounded to `F` fraction bits and added into an
    /// `h`-bit saturating register.
    #[default]
    Saturating,
    /// Exact products are summed in a wide register and rounded and
    /// saturated once at the end.
    Wide,
}

impl Accumulator {
    /// Runs a MAC chain from zero over `(a, b)` raw pairs in iteration order.
    pub fn dot<I>(self, q: QFormat, pairs: I) -> i32
    where
        I: IntoIterator<Item = (i32, i32)>,
    {
        match self {
            Accumulator::Saturating => {
                let (lo, hi) = (q.min_raw() as i64, q.max_raw() as i64);
                let mut acc = 0i64;
                for (a, b) in pairs {
                    acc = (acc + round_shift(a as i64 * b as i64, q.frac())).clamp(lo, hi);
                }
                acc as i32
            }
            Accumulator::Wide => {
                let mut acc = 0i64;
                for (a, b) in pairs {
                    acc = acc.saturating_add(a as i64 * b as i64);
                }
                q.saturate(round_shift(acc, q.frac()))
            }
        }
    }
}
