//! Sparse feature-map codecs with exact bit accounting.
//!
//! Each encoder stores every element whose detector flag is clear and drops
//! every flagged element. Payloads are bit-packed MSB-first; the final byte is
//! zero-padded. Let `h` be the word width, `N` the element count and `nnz`
//! the number of stored (unflagged) elements:
//!
//! * **BitMap**: `N` presence bits (1 = stored) followed by the `nnz` stored
//!   words. `size = N + nnz*h`.
//! * **RLC**: `(run, value)` pairs, `run` being `r` bits counting flagged
//!   elements before the value. The run code `2^r - 1` is an escape: it
//!   stands for `2^r - 1` flagged elements and carries a zero value field, so
//!   stored runs are at most `2^r - 2`. Flagged elements after the last
//!   stored one need no pairs. `size = pairs * (r + h)`.
//! * **CSC**: each channel is an `H x W` matrix. Per channel, `W + 1` column
//!   pointers of `ceil(log2(nnz_c + 1))` bits, then for every stored element
//!   in column-major order a `ceil(log2 H)`-bit row index and the word.
//!   `size = nnz*h + nnz*ceil(log2 H) + sum_c (W+1)*ceil(log2(nnz_c+1))`.
//!   The per-channel counts travel in the map header next to the extent.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_rational::Ratio;

use crate::error::Error;
use crate::model::Shape;
use crate::numeric::QFormat;

/// Default RLC run width.
pub const DEFAULT_RUN_BITS: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "format", rename_all = "snake_case"))]
pub enum Format {
    #[default]
    BitMap,
    Rlc {
        run_bits: u32,
    },
    Csc,
}

impl Format {
    pub const ALL_DEFAULT: [Format; 3] = [Format::Csc, Format::Rlc { run_bits: DEFAULT_RUN_BITS }, Format::BitMap];

    pub fn name(&self) -> &'static str {
        match self {
            Format::BitMap => "bitmap",
            Format::Rlc { .. } => "rlc",
            Format::Csc => "csc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedMap {
    pub format: Format,
    pub shape: Shape,
    pub qformat: QFormat,
    pub payload: Vec<u8>,
    pub size_bits: u64,
    pub nnz_flagged: usize,
    /// Stored elements per channel (CSC only; empty otherwise).
    pub channel_nnz: Vec<u32>,
}

/// Stored words at their positions (zero where flagged) and the flag mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub values: Vec<i32>,
    pub flagged: Vec<bool>,
}

#[inline]
pub fn ceil_log2(x: u64) -> u32 {
    if x <= 1 {
        0
    } else {
        64 - (x - 1).leading_zeros()
    }
}

struct BitWriter {
    bytes: Vec<u8>,
    len: u64,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter { bytes: Vec::new(), len: 0 }
    }

    fn push(&mut self, value: u64, width: u32) {
        for i in (0..width).rev() {
            let bit = (value >> i) & 1;
            let byte = (self.len / 8) as usize;
            if byte == self.bytes.len() {
                self.bytes.push(0);
            }
            self.bytes[byte] |= (bit as u8) << (7 - (self.len % 8));
            self.len += 1;
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
    limit: u64,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8], limit: u64) -> Result<Self, Error> {
        let need = limit.div_ceil(8) as usize;
        if bytes.len() < need {
            return Err(Error::Truncated);
        }
        if bytes.len() > need {
            return Err(Error::Overlong);
        }
        let tail = limit % 8;
        if tail != 0 && bytes[need - 1] & (0xFF >> tail) != 0 {
            return Err(Error::Overlong);
        }
        Ok(BitReader { bytes, pos: 0, limit })
    }

    fn read(&mut self, width: u32) -> Result<u64, Error> {
        if self.pos + width as u64 > self.limit {
            return Err(Error::Truncated);
        }
        let mut v = 0u64;
        for _ in 0..width {
            let byte = self.bytes[(self.pos / 8) as usize];
            let bit = (byte >> (7 - (self.pos % 8))) & 1;
            v = (v << 1) | bit as u64;
            self.pos += 1;
        }
        Ok(v)
    }

    fn remaining(&self) -> u64 {
        self.limit - self.pos
    }
}

fn check_inputs(values: &[i32], flags: &[bool], shape: Shape, format: Format, q: QFormat) -> Result<(), Error> {
    if flags.len() != shape.len() {
        return Err(Error::FlagLengthMismatch { flags: flags.len(), elements: shape.len() });
    }
    if values.len() != shape.len() {
        return Err(Error::ShapeMismatch(format!("{} values for extent {shape:?}", values.len())));
    }
    if let Format::Rlc { run_bits } = format {
        if !(1..=16).contains(&run_bits) {
            return Err(Error::Corrupt(format!("RLC run width {run_bits} outside 1..=16")));
        }
    }
    if let Some(v) = values.iter().find(|&&v| !q.contains(v)) {
        return Err(Error::ShapeMismatch(format!("word {v} does not fit {q:?}")));
    }
    Ok(())
}

/// Channel-wise stored counts for CSC.
fn channel_counts(flags: &[bool], shape: Shape) -> Vec<u32> {
    let plane = shape.height * shape.width;
    flags.chunks(plane).map(|c| c.iter().filter(|&&f| !f).count() as u32).collect()
}

/// Number of RLC pairs needed for a flag stream.
fn rlc_pairs(flags: &[bool], run_bits: u32) -> u64 {
    let esc = (1u64 << run_bits) - 1;
    let mut pairs = 0;
    let mut run = 0u64;
    for &f in flags {
        if f {
            run += 1;
        } else {
            pairs += run / esc + 1;
            run = 0;
        }
    }
    pairs
}

/// Closed-form encoded size of a flag stream.
pub fn encoded_size(flags: &[bool], shape: Shape, format: Format, q: QFormat) -> u64 {
    let h = q.width() as u64;
    let nnz = flags.iter().filter(|&&f| !f).count() as u64;
    match format {
        Format::BitMap => flags.len() as u64 + nnz * h,
        Format::Rlc { run_bits } => rlc_pairs(flags, run_bits) * (run_bits as u64 + h),
        Format::Csc => {
            let rb = ceil_log2(shape.height as u64) as u64;
            let ptrs: u64 = channel_counts(flags, shape)
                .iter()
                .map(|&n| (shape.width as u64 + 1) * ceil_log2(n as u64 + 1) as u64)
                .sum();
            nnz * h + nnz * rb + ptrs
        }
    }
}

/// Encodes the locked ReLU map `values`, dropping every flagged element.
pub fn encode(
    values: &[i32],
    flags: &[bool],
    shape: Shape,
    format: Format,
    q: QFormat,
) -> Result<CompressedMap, Error> {
    check_inputs(values, flags, shape, format, q)?;
    let h = q.width();
    let mut w = BitWriter::new();
    let mut channel_nnz = Vec::new();
    match format {
        Format::BitMap => {
            for &f in flags {
                w.push(!f as u64, 1);
            }
            for (&v, _) in values.iter().zip(flags).filter(|(_, &f)| !f) {
                w.push(q.to_bits(v) as u64, h);
            }
        }
        Format::Rlc { run_bits } => {
            let esc = (1u64 << run_bits) - 1;
            let mut run = 0u64;
            for (&v, &f) in values.iter().zip(flags) {
                if f {
                    run += 1;
                    continue;
                }
                while run >= esc {
                    w.push(esc, run_bits);
                    w.push(0, h);
                    run -= esc;
                }
                w.push(run, run_bits);
                w.push(q.to_bits(v) as u64, h);
                run = 0;
            }
        }
        Format::Csc => {
            let (hh, ww) = (shape.height, shape.width);
            let rb = ceil_log2(hh as u64);
            channel_nnz = channel_counts(flags, shape);
            for (c, &nnz_c) in channel_nnz.iter().enumerate() {
                let base = c * hh * ww;
                let pw = ceil_log2(nnz_c as u64 + 1);
                let mut ptr = 0u64;
                w.push(0, pw);
                for x in 0..ww {
                    ptr += (0..hh).filter(|&y| !flags[base + y * ww + x]).count() as u64;
                    w.push(ptr, pw);
                }
                for x in 0..ww {
                    for y in 0..hh {
                        let i = base + y * ww + x;
                        if !flags[i] {
                            w.push(y as u64, rb);
                            w.push(q.to_bits(values[i]) as u64, h);
                        }
                    }
                }
            }
        }
    }
    let size_bits = encoded_size(flags, shape, format, q);
    debug_assert_eq!(size_bits, w.len);
    Ok(CompressedMap {
        format,
        shape,
        qformat: q,
        payload: w.bytes,
        size_bits,
        nnz_flagged: flags.iter().filter(|&&f| f).count(),
        channel_nnz,
    })
}

pub fn decode(c: &CompressedMap) -> Result<Decoded, Error> {
    let q = c.qformat;
    let h = q.width();
    let n = c.shape.len();
    let mut values = vec![0i32; n];
    let mut flagged = vec![true; n];
    let mut r = BitReader::new(&c.payload, c.size_bits)?;
    match c.format {
        Format::BitMap => {
            if c.size_bits < n as u64 {
                return Err(Error::Truncated);
            }
            for f in flagged.iter_mut() {
                *f = r.read(1)? == 0;
            }
            for i in 0..n {
                if !flagged[i] {
                    values[i] = q.from_bits(r.read(h)? as u32);
                }
            }
        }
        Format::Rlc { run_bits } => {
            if !(1..=16).contains(&run_bits) {
                return Err(Error::Corrupt(format!("RLC run width {run_bits} outside 1..=16")));
            }
            let pair = (run_bits + h) as u64;
            if !c.size_bits.is_multiple_of(pair) {
                return Err(Error::Truncated);
            }
            let esc = (1u64 << run_bits) - 1;
            let mut pos = 0usize;
            while r.remaining() > 0 {
                let run = r.read(run_bits)?;
                let v = r.read(h)?;
                if run == esc {
                    if v != 0 {
                        return Err(Error::Corrupt("escape pair with nonzero value".into()));
                    }
                    pos += esc as usize;
                    if pos > n {
                        return Err(Error::Corrupt("run past end of map".into()));
                    }
                    continue;
                }
                pos += run as usize;
                if pos >= n {
                    return Err(Error::Corrupt("value past end of map".into()));
                }
                values[pos] = q.from_bits(v as u32);
                flagged[pos] = false;
                pos += 1;
            }
        }
        Format::Csc => {
            let (hh, ww) = (c.shape.height, c.shape.width);
            if c.channel_nnz.len() != c.shape.channels {
                return Err(Error::Corrupt("channel count header mismatch".into()));
            }
            let rb = ceil_log2(hh as u64);
            for (ch, &nnz_c) in c.channel_nnz.iter().enumerate() {
                if nnz_c as usize > hh * ww {
                    return Err(Error::Corrupt(format!("channel {ch} claims {nnz_c} elements")));
                }
                let base = ch * hh * ww;
                let pw = ceil_log2(nnz_c as u64 + 1);
                let ptrs: Vec<u64> = (0..=ww).map(|_| r.read(pw)).collect::<Result<_, _>>()?;
                if ptrs[0] != 0 || ptrs[ww] != nnz_c as u64 || ptrs.windows(2).any(|p| p[0] > p[1]) {
                    return Err(Error::Corrupt(format!("channel {ch}: bad column pointers")));
                }
                for x in 0..ww {
                    let mut last: Option<u64> = None;
                    for _ in ptrs[x]..ptrs[x + 1] {
                        let y = r.read(rb)?;
                        if y >= hh as u64 || last.is_some_and(|l| l >= y) {
                            return Err(Error::Corrupt(format!("channel {ch}: bad row index {y}")));
                        }
                        last = Some(y);
                        let i = base + y as usize * ww + x;
                        values[i] = q.from_bits(r.read(h)? as u32);
                        flagged[i] = false;
                    }
                }
            }
            if r.remaining() != 0 {
                return Err(Error::Overlong);
            }
        }
    }
    Ok(Decoded { values, flagged })
}

/// `size(wrong) / size(correct)` for two flag streams over the same map.
pub fn size_ratio(
    values: &[i32],
    flags_correct: &[bool],
    flags_wrong: &[bool],
    shape: Shape,
    format: Format,
    q: QFormat,
) -> Result<Ratio<u64>, Error> {
    let correct = encode(values, flags_correct, shape, format, q)?.size_bits;
    let wrong = encode(values, flags_wrong, shape, format, q)?.size_bits;
    if correct == 0 {
        return Err(Error::EmptyMap);
    }
    Ok(Ratio::new(wrong, correct))
}
