//! SWAR bit-packing: several low-resolution lanes inside one wide word.
//!
//! Lane `i` occupies bits `[i*lane_bits, (i+1)*lane_bits)`. Three ways of
//! adding packed words are provided:
//!
//! * [`add_contaminated`]: one plain wide add; a lane's carry-out spills into
//!   the lane above it.
//! * [`add_lane_isolated`]: every lane wraps independently, as a vector
//!   instruction would.
//! * [`add_buffered`]: lanes reserve their top bit as a buffer that absorbs
//!   carries and is masked off after each add.
//!
//! When `lane_bits` does not divide the word width the unused top bits are
//! padding and always stay zero.

mod carry;

pub use carry::{
    carry_batch_stats, carry_count, carry_count_closed_form, packed_dot_contaminated,
    soft_carry_count, soft_carry_slope, update_moving_mean, CarryCount, CarryStats, ContaminatedDot, SoftCarry,
    DEFAULT_CARRY_MOMENTUM, DEFAULT_TANH_TEMPERATURE,
};

use crate::error::{Error, Result};

/// Layout of a packed word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PackSpec {
    width: u32,
    lane_bits: u32,
    buffered: bool,
}

impl PackSpec {
    pub fn new(width: u32, lane_bits: u32, buffered: bool) -> Result<Self> {
        if !matches!(width, 16 | 32 | 64) {
            return Err(Error::SpecMismatch(format!(
                "word width must be 16, 32 or 64, got {width}"
            )));
        }
        let min_bits = if buffered { 3 } else { 2 };
        if lane_bits < min_bits || lane_bits > width {
            return Err(Error::SpecMismatch(format!(
                "lane width {lane_bits} invalid for a {width}-bit word"
            )));
        }
        Ok(PackSpec {
            width,
            lane_bits,
            buffered,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn lane_bits(&self) -> u32 {
        self.lane_bits
    }

    pub fn buffered(&self) -> bool {
        self.buffered
    }

    pub fn lanes(&self) -> usize {
        (self.width / self.lane_bits) as usize
    }

    /// Bits per lane that carry a value (one less when buffered).
    pub fn value_bits(&self) -> u32 {
        self.lane_bits - self.buffered as u32
    }

    /// Mask of all bits that belong to some lane.
    pub fn lanes_mask(&self) -> u64 {
        low_mask(self.lanes() as u32 * self.lane_bits)
    }

    /// Mask of the value bits of every lane.
    pub fn value_mask(&self) -> u64 {
        self.replicate(low_mask(self.value_bits()))
    }

    /// Mask of the buffer bit of every lane (zero when unbuffered).
    pub fn buffer_mask(&self) -> u64 {
        if self.buffered {
            self.replicate(1 << (self.lane_bits - 1))
        } else {
            0
        }
    }

    /// Mask of the most significant value bit of every lane.
    pub fn value_msb_mask(&self) -> u64 {
        self.replicate(1 << (self.value_bits() - 1))
    }

    /// Places `pattern` (which must fit in one lane) into every lane.
    pub fn replicate(&self, pattern: u64) -> u64 {
        (0..self.lanes()).fold(0u64, |acc, i| acc | (pattern << (i as u32 * self.lane_bits)))
    }
}

fn low_mask(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PackedWord {
    spec: PackSpec,
    payload: u64,
}

impl PackedWord {
    /// Wraps a raw payload; bits outside the lanes must be clear.
    pub fn from_payload(spec: PackSpec, payload: u64) -> Result<Self> {
        if payload & !spec.lanes_mask() != 0 {
            return Err(Error::SpecMismatch(format!(
                "payload {payload:#x} has bits outside the lanes"
            )));
        }
        Ok(PackedWord { spec, payload })
    }

    pub fn spec(&self) -> PackSpec {
        self.spec
    }

    pub fn payload(&self) -> u64 {
        self.payload
    }

    pub fn lane(&self, i: usize) -> u64 {
        (self.payload >> (i as u32 * self.spec.lane_bits)) & low_mask(self.spec.lane_bits)
    }
}

/// Packs one unsigned value per lane, lane 0 in the least significant bits.
pub fn pack(values: &[u64], spec: PackSpec) -> Result<PackedWord> {
    if values.len() != spec.lanes() {
        return Err(Error::LengthMismatch {
            expected: spec.lanes(),
            actual: values.len(),
        });
    }
    let cap = low_mask(spec.value_bits());
    let mut payload = 0u64;
    for (i, &v) in values.iter().enumerate() {
        if v > cap {
            return Err(Error::OutOfRange {
                value: v as i64,
                min: 0,
                max: cap as i64,
            });
        }
        payload |= v << (i as u32 * spec.lane_bits);
    }
    Ok(PackedWord { spec, payload })
}

pub fn unpack(word: PackedWord) -> Vec<u64> {
    (0..word.spec.lanes()).map(|i| word.lane(i)).collect()
}

fn check_same(a: &PackedWord, c: &PackedWord) -> Result<PackSpec> {
    if a.spec != c.spec {
        return Err(Error::SpecMismatch(format!(
            "operands use different layouts: {:?} vs {:?}",
            a.spec, c.spec
        )));
    }
    Ok(a.spec)
}

/// A single wide add. Lane `i`'s carry-out lands in lane `i+1`; the top lane's
/// carry-out leaves the word.
pub fn add_contaminated(a: PackedWord, c: PackedWord) -> Result<PackedWord> {
    let spec = check_same(&a, &c)?;
    if spec.buffered {
        return Err(Error::SpecMismatch(
            "contaminated adds operate on unbuffered words".into(),
        ));
    }
    Ok(PackedWord {
        spec,
        payload: a.payload.wrapping_add(c.payload) & spec.lanes_mask(),
    })
}

/// SWAR add where each lane wraps modulo `2^value_bits` on its own.
///
/// The most significant value bit of each lane is excluded from the wide add
/// so no carry can cross a lane boundary, then restored with an XOR.
#[inline]
pub fn swar_add_isolated(x: u64, y: u64, value_mask: u64, msb_mask: u64) -> u64 {
    let low = value_mask & !msb_mask;
    ((x & low).wrapping_add(y & low) ^ ((x ^ y) & msb_mask)) & value_mask
}

pub fn add_lane_isolated(a: PackedWord, c: PackedWord) -> Result<PackedWord> {
    let spec = check_same(&a, &c)?;
    if spec.buffered && (a.payload | c.payload) & spec.buffer_mask() != 0 {
        return Err(Error::BufferBitSet(a.payload | c.payload));
    }
    Ok(PackedWord {
        spec,
        payload: swar_add_isolated(a.payload, c.payload, spec.value_mask(), spec.value_msb_mask()),
    })
}

/// Wide add followed by clearing the buffer bits that absorbed the carries.
pub fn add_buffered(a: PackedWord, c: PackedWord) -> Result<PackedWord> {
    let spec = check_same(&a, &c)?;
    if !spec.buffered {
        return Err(Error::SpecMismatch("add_buffered needs a buffered layout".into()));
    }
    for w in [a, c] {
        if w.payload & spec.buffer_mask() != 0 {
            return Err(Error::BufferBitSet(w.payload));
        }
    }
    Ok(PackedWord {
        spec,
        payload: a.payload.wrapping_add(c.payload) & spec.value_mask(),
    })
}
