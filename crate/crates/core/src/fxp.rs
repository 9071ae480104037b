//! Quantizers, fixed-point tensors and wrapping integer accumulation.
//!
//! Everything downstream (cyclic activations, bit packing, kernels) builds on
//! the two primitives here: [`wrap`], which reduces a wide integer into the
//! signed `b`-bit range, and the signed/unsigned reinterpretation pair
//! [`to_unsigned`] / [`to_signed`].

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported quantizer bitwidth.
pub const MAX_QUANT_BITS: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantKind {
    Uniform,
    Binary,
    Ternary,
}

impl QuantKind {
    pub fn as_str(self) -> &'static str {
        match self {
            QuantKind::Uniform => "uniform",
            QuantKind::Binary => "binary",
            QuantKind::Ternary => "ternary",
        }
    }
}

impl std::str::FromStr for QuantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(QuantKind::Uniform),
            "binary" => Ok(QuantKind::Binary),
            "ternary" => Ok(QuantKind::Ternary),
            other => Err(Error::InvalidScheme(format!("unknown quantizer kind `{other}`"))),
        }
    }
}

/// Step size, bitwidth and signedness of a fixed-point representation.
///
/// A real value `x` is represented as `x ≈ step_size * x_q` with `x_q` an
/// integer in [`QuantScheme::range`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantScheme {
    step_size: f64,
    bits: u32,
    signed: bool,
    kind: QuantKind,
}

impl QuantScheme {
    pub fn new(step_size: f64, bits: u32, signed: bool, kind: QuantKind) -> Result<Self> {
        if !(step_size.is_finite() && step_size > 0.0) {
            return Err(Error::InvalidScheme(format!(
                "step size must be positive and finite, got {step_size}"
            )));
        }
        if !(1..=MAX_QUANT_BITS).contains(&bits) {
            return Err(Error::InvalidScheme(format!(
                "bits must lie in [1, {MAX_QUANT_BITS}], got {bits}"
            )));
        }
        match kind {
            QuantKind::Binary if bits != 1 => {
                return Err(Error::InvalidScheme("binary schemes use exactly 1 bit".into()))
            }
            QuantKind::Ternary if bits != 2 => {
                return Err(Error::InvalidScheme("ternary schemes use exactly 2 bits".into()))
            }
            QuantKind::Binary | QuantKind::Ternary if !signed => {
                return Err(Error::InvalidScheme("binary/ternary schemes are signed".into()))
            }
            _ => {}
        }
        Ok(QuantScheme {
            step_size,
            bits,
            signed,
            kind,
        })
    }

    pub fn uniform(step_size: f64, bits: u32, signed: bool) -> Result<Self> {
        Self::new(step_size, bits, signed, QuantKind::Uniform)
    }

    pub fn binary(step_size: f64) -> Result<Self> {
        Self::new(step_size, 1, true, QuantKind::Binary)
    }

    pub fn ternary(step_size: f64) -> Result<Self> {
        Self::new(step_size, 2, true, QuantKind::Ternary)
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn signed(&self) -> bool {
        self.signed
    }

    pub fn kind(&self) -> QuantKind {
        self.kind
    }

    /// Same scheme with a different step size.
    pub fn with_step_size(&self, step_size: f64) -> Result<Self> {
        Self::new(step_size, self.bits, self.signed, self.kind)
    }

    /// Inclusive integer range of the representation.
    ///
    /// Binary codes are `{-1, +1}` and ternary codes `{-1, 0, +1}`; the
    /// two's-complement formula only applies to uniform schemes.
    pub fn range(&self) -> (i64, i64) {
        match self.kind {
            QuantKind::Binary | QuantKind::Ternary => (-1, 1),
            QuantKind::Uniform if self.signed => {
                let half = 1i64 << (self.bits - 1);
                (-half, half - 1)
            }
            QuantKind::Uniform => (0, (1i64 << self.bits) - 1),
        }
    }

    /// Whether `v` is a valid code of this scheme.
    pub fn contains(&self, v: i64) -> bool {
        let (lo, hi) = self.range();
        match self.kind {
            QuantKind::Binary => v == -1 || v == 1,
            _ => (lo..=hi).contains(&v),
        }
    }
}

/// Shape, integer payload and scheme of a quantized tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedTensor {
    shape: Vec<usize>,
    values: Vec<i32>,
    scheme: QuantScheme,
}

impl FixedTensor {
    pub fn new(shape: Vec<usize>, values: Vec<i32>, scheme: QuantScheme) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::LengthMismatch {
                expected,
                actual: values.len(),
            });
        }
        if let Some(&bad) = values.iter().find(|&&v| !scheme.contains(v as i64)) {
            let (min, max) = scheme.range();
            return Err(Error::OutOfRange {
                value: bad as i64,
                min,
                max,
            });
        }
        Ok(FixedTensor {
            shape,
            values,
            scheme,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    pub fn scheme(&self) -> &QuantScheme {
        &self.scheme
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<i32> {
        self.values
    }

    /// Same payload viewed under a new shape with the same element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.values.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(FixedTensor {
            shape,
            values: self.values.clone(),
            scheme: self.scheme,
        })
    }

    /// Real values `step_size * x_q`.
    pub fn dequantize(&self) -> Vec<f64> {
        let step = self.scheme.step_size;
        self.values.iter().map(|&v| v as f64 * step).collect()
    }

    /// Writes the little-endian blob: dimension count, dimensions, then values,
    /// all as 32-bit integers.
    pub fn write_blob<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write_dims(&mut w, &self.shape)?;
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    /// Reads a blob written by [`FixedTensor::write_blob`] and attaches `scheme`.
    pub fn read_blob<R: Read>(mut r: R, scheme: QuantScheme) -> Result<Self> {
        let shape = read_dims(&mut r)?;
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("tensor payload truncated: {e}")))?;
        ensure_eof(&mut r)?;
        let values = buf
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        FixedTensor::new(shape, values, scheme)
    }
}

/// A dense real tensor, used for full-precision layers and raw inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RealTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl RealTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::LengthMismatch {
                expected,
                actual: values.len(),
            });
        }
        Ok(RealTensor { shape, values })
    }

    /// Same header as the fixed-point blob, followed by little-endian `f64`s.
    pub fn write_blob<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write_dims(&mut w, &self.shape)?;
        let mut buf = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_blob<R: Read>(mut r: R) -> Result<Self> {
        let shape = read_dims(&mut r)?;
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("tensor payload truncated: {e}")))?;
        ensure_eof(&mut r)?;
        let values = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        RealTensor::new(shape, values)
    }
}

fn write_dims<W: Write>(w: &mut W, shape: &[usize]) -> std::io::Result<()> {
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("tensor header truncated: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_dims<R: Read>(r: &mut R) -> Result<Vec<usize>> {
    let count = read_u32(r)?;
    if count > 8 {
        return Err(Error::Format(format!("implausible dimension count {count}")));
    }
    let shape: Vec<usize> = (0..count)
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect::<Result<_>>()?;
    let elements = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d));
    match elements {
        Some(n) if n <= 1 << 30 => Ok(shape),
        _ => Err(Error::Format(format!("implausible tensor shape {shape:?}"))),
    }
}

fn ensure_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut extra = [0u8; 1];
    match r.read(&mut extra) {
        Ok(0) => Ok(()),
        Ok(_) => Err(Error::Format("trailing bytes after tensor payload".into())),
        Err(e) => Err(Error::Format(e.to_string())),
    }
}

/// Bitwidth `b` of a wrapping accumulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AccumulatorSpec {
    bits: u32,
}

impl AccumulatorSpec {
    pub const MIN_BITS: u32 = 4;
    pub const MAX_BITS: u32 = 32;

    pub fn new(bits: u32) -> Result<Self> {
        if !(Self::MIN_BITS..=Self::MAX_BITS).contains(&bits) {
            return Err(Error::InvalidMode(format!(
                "accumulator bits must lie in [{}, {}], got {bits}",
                Self::MIN_BITS,
                Self::MAX_BITS
            )));
        }
        Ok(AccumulatorSpec { bits })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// `2^b`.
    pub fn period(&self) -> i64 {
        1i64 << self.bits
    }

    pub fn wrap(&self, z: i64) -> i64 {
        wrap(z, self.bits)
    }
}

/// `x / step`, rounded half away from zero and clamped into the scheme range.
fn quantize_scalar(x: f64, step: f64, lo: i64, hi: i64) -> i32 {
    let q = (x / step).round();
    // NaN clamps to zero.
    let q = if q.is_nan() { 0.0 } else { q };
    q.clamp(lo as f64, hi as f64) as i32
}

/// Uniform quantizer: `clamp(round(x / Δ))`, ties rounded away from zero.
pub fn quantize_uniform(x: &[f64], shape: Vec<usize>, scheme: QuantScheme) -> Result<FixedTensor> {
    if scheme.kind != QuantKind::Uniform {
        return Err(Error::InvalidScheme(format!(
            "quantize_uniform needs a uniform scheme, got {}",
            scheme.kind.as_str()
        )));
    }
    let (lo, hi) = scheme.range();
    let values = x
        .iter()
        .map(|&v| quantize_scalar(v, scheme.step_size, lo, hi))
        .collect();
    FixedTensor::new(shape, values, scheme)
}

fn mean_abs(w: &[f64]) -> f64 {
    w.iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64
}

/// Sign quantizer with a per-tensor scale `Δ_w = mean |w|`.
///
/// Zero maps to `+1`.
pub fn quantize_binary(w: &[f64], shape: Vec<usize>) -> Result<FixedTensor> {
    if w.is_empty() {
        return Err(Error::DegenerateScale("empty weight tensor".into()));
    }
    let scale = mean_abs(w);
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::DegenerateScale(
            "binary scale is zero: every weight is zero".into(),
        ));
    }
    let values = w.iter().map(|&v| if v < 0.0 { -1 } else { 1 }).collect();
    FixedTensor::new(shape, values, QuantScheme::binary(scale)?)
}

/// Ternary threshold factor applied to `mean |w|`.
pub const TERNARY_THRESHOLD: f64 = 0.7;

/// Threshold quantizer onto `{-1, 0, +1}`.
///
/// Entries with `|w| > 0.7 * mean |w|` keep their sign; the scale is the mean
/// magnitude of those surviving entries.
pub fn quantize_ternary(w: &[f64], shape: Vec<usize>) -> Result<FixedTensor> {
    if w.is_empty() {
        return Err(Error::DegenerateScale("empty weight tensor".into()));
    }
    let threshold = TERNARY_THRESHOLD * mean_abs(w);
    let (mut sum, mut count) = (0.0, 0usize);
    let values: Vec<i32> = w
        .iter()
        .map(|&v| {
            if v.abs() > threshold {
                sum += v.abs();
                count += 1;
                if v < 0.0 {
                    -1
                } else {
                    1
                }
            } else {
                0
            }
        })
        .collect();
    if count == 0 {
        return Err(Error::DegenerateScale(
            "no weight exceeds the ternary threshold".into(),
        ));
    }
    FixedTensor::new(shape, values, QuantScheme::ternary(sum / count as f64)?)
}

/// Reduces `z` into `[-2^(b-1), 2^(b-1))`, keeping it congruent mod `2^b`.
///
/// This is exactly what a two's-complement `b`-bit register holds after the
/// sum has overflowed any number of times.
#[inline]
pub fn wrap(z: i64, bits: u32) -> i64 {
    debug_assert!((1..=64).contains(&bits));
    let shift = 64 - bits;
    (z << shift) >> shift
}

fn check_same_len(x: &[i32], w: &[i32]) -> Result<()> {
    if x.len() != w.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            actual: w.len(),
        });
    }
    Ok(())
}

/// Exact dot product in a 64-bit accumulator.
pub fn exact_dot(x: &[i32], w: &[i32]) -> Result<i64> {
    check_same_len(x, w)?;
    Ok(x.iter().zip(w).map(|(&a, &b)| a as i64 * b as i64).sum())
}

/// Dot product through a `b`-bit accumulator that wraps after every addition.
pub fn wrapped_dot(x: &[i32], w: &[i32], bits: u32) -> Result<i64> {
    check_same_len(x, w)?;
    let mut acc = 0i64;
    for (&a, &b) in x.iter().zip(w) {
        acc = wrap(acc + wrap(a as i64 * b as i64, bits), bits);
    }
    Ok(acc)
}

/// Reinterprets a signed `b`-bit value as the unsigned integer with the same
/// two's-complement bit pattern.
pub fn to_unsigned(v: i64, bits: u32) -> Result<u64> {
    let half = 1i64 << (bits - 1);
    if !(-half..half).contains(&v) {
        return Err(Error::OutOfRange {
            value: v,
            min: -half,
            max: half - 1,
        });
    }
    Ok(if v < 0 { (v + (1i64 << bits)) as u64 } else { v as u64 })
}

/// Inverse of [`to_unsigned`].
pub fn to_signed(u: u64, bits: u32) -> Result<i64> {
    if u >> bits != 0 {
        return Err(Error::OutOfRange {
            value: u as i64,
            min: 0,
            max: (1i64 << bits) - 1,
        });
    }
    Ok(wrap(u as i64, bits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(x: f64, step: f64) -> i32 {
        let s = QuantScheme::uniform(step, 8, true).unwrap();
        quantize_uniform(&[x], vec![1], s).unwrap().values()[0]
    }

    #[test]
    fn uniform_examples() {
        assert_eq!(q(0.0, 0.5), 0);
        assert_eq!(q(1.3, 0.5), 3);
        assert_eq!(q(-1.3, 0.5), -3);
        let s = QuantScheme::uniform(0.5, 8, true).unwrap();
        let t = quantize_uniform(&[1.3], vec![1], s).unwrap();
        assert_eq!(t.dequantize(), vec![1.5]);
    }

    #[test]
    fn uniform_ties_round_away_and_clamp() {
        assert_eq!(q(0.25, 0.5), 1);
        assert_eq!(q(-0.25, 0.5), -1);
        assert_eq!(q(1000.0, 0.5), 127);
        assert_eq!(q(-1000.0, 0.5), -128);
        let s = QuantScheme::uniform(1.0, 3, false).unwrap();
        let t = quantize_uniform(&[-2.0, 9.0], vec![2], s).unwrap();
        assert_eq!(t.values(), &[0, 7]);
    }

    #[test]
    fn invalid_schemes() {
        assert!(matches!(
            QuantScheme::uniform(0.0, 8, true),
            Err(Error::InvalidScheme(_))
        ));
        assert!(QuantScheme::uniform(-1.0, 8, true).is_err());
        assert!(QuantScheme::uniform(f64::NAN, 8, true).is_err());
        assert!(QuantScheme::uniform(1.0, 0, true).is_err());
        assert!(QuantScheme::uniform(1.0, 17, true).is_err());
        assert!(QuantScheme::new(1.0, 2, true, QuantKind::Binary).is_err());
        assert!(QuantScheme::new(1.0, 1, true, QuantKind::Ternary).is_err());
        let binary = QuantScheme::binary(1.0).unwrap();
        assert!(matches!(
            quantize_uniform(&[1.0], vec![1], binary),
            Err(Error::InvalidScheme(_))
        ));
    }

    #[test]
    fn ranges() {
        assert_eq!(QuantScheme::uniform(1.0, 8, true).unwrap().range(), (-128, 127));
        assert_eq!(QuantScheme::uniform(1.0, 3, false).unwrap().range(), (0, 7));
        let b = QuantScheme::binary(1.0).unwrap();
        assert!(b.contains(1) && b.contains(-1) && !b.contains(0));
        assert!(FixedTensor::new(vec![2], vec![1, 0], b).is_err());
        assert!(FixedTensor::new(vec![3], vec![1, 1], b).is_err());
    }

    #[test]
    fn binary_examples() {
        let t = quantize_binary(&[0.3, -0.4], vec![2]).unwrap();
        assert_eq!(t.values(), &[1, -1]);
        assert!((t.scheme().step_size() - 0.35).abs() < 1e-15);
        let t = quantize_binary(&[1.0, 1.0, 1.0], vec![3]).unwrap();
        assert_eq!(t.values(), &[1, 1, 1]);
        assert_eq!(t.scheme().step_size(), 1.0);
        let t = quantize_binary(&[-2.0, 2.0], vec![2]).unwrap();
        assert_eq!(t.values(), &[-1, 1]);
        assert_eq!(t.scheme().step_size(), 2.0);
        assert!(matches!(
            quantize_binary(&[0.0, 0.0], vec![2]),
            Err(Error::DegenerateScale(_))
        ));
    }

    #[test]
    fn ternary_examples() {
        let t = quantize_ternary(&[0.05, 0.9, -0.8], vec![3]).unwrap();
        assert_eq!(t.values(), &[0, 1, -1]);
        assert!((t.scheme().step_size() - 0.85).abs() < 1e-15);
        let t = quantize_ternary(&[0.0, 0.0, 1.0], vec![3]).unwrap();
        assert_eq!(t.values(), &[0, 0, 1]);
        assert_eq!(t.scheme().step_size(), 1.0);
        let t = quantize_ternary(&[0.4, 0.4, 0.4], vec![3]).unwrap();
        assert_eq!(t.values(), &[1, 1, 1]);
        assert!(matches!(
            quantize_ternary(&[0.0; 4], vec![4]),
            Err(Error::DegenerateScale(_))
        ));
    }

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap(127, 8), 127);
        assert_eq!(wrap(130, 8), -126);
        assert_eq!(wrap(-129, 8), 127);
        assert_eq!(wrap(-128, 8), -128);
        assert_eq!(wrap(128, 8), -128);
        assert_eq!(wrap(i64::MAX, 32), -1);
    }

    #[test]
    fn dot_examples() {
        assert_eq!(exact_dot(&[1, 1], &[1, -1]).unwrap(), 0);
        assert_eq!(wrapped_dot(&[1, 1], &[1, -1], 8).unwrap(), 0);
        assert_eq!(exact_dot(&[100; 3], &[1; 3]).unwrap(), 300);
        assert_eq!(wrapped_dot(&[100; 3], &[1; 3], 8).unwrap(), 44);
        assert_eq!(exact_dot(&[-1; 300], &[1; 300]).unwrap(), -300);
        assert_eq!(wrapped_dot(&[-1; 300], &[1; 300], 8).unwrap(), -44);
        assert!(matches!(
            exact_dot(&[1, 2], &[1]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(wrapped_dot(&[1], &[1, 2], 8).is_err());
    }

    #[test]
    fn unsigned_examples() {
        assert_eq!(to_unsigned(-1, 8).unwrap(), 255);
        assert_eq!(to_unsigned(0, 8).unwrap(), 0);
        assert_eq!(to_unsigned(-128, 8).unwrap(), 128);
        assert_eq!(to_unsigned(127, 8).unwrap(), 127);
        assert!(to_unsigned(128, 8).is_err());
        assert!(to_unsigned(-129, 8).is_err());
        assert!(to_signed(256, 8).is_err());
    }

    #[test]
    fn unsigned_roundtrip_exhaustive() {
        for b in [4u32, 8, 12] {
            for u in 0..(1u64 << b) {
                assert_eq!(to_unsigned(to_signed(u, b).unwrap(), b).unwrap(), u);
            }
        }
    }

    #[test]
    fn fixed_blob_roundtrip_and_layout() {
        let s = QuantScheme::uniform(0.25, 8, true).unwrap();
        let t = FixedTensor::new(vec![2, 2], vec![1, -1, 127, -128], s).unwrap();
        let mut buf = Vec::new();
        t.write_blob(&mut buf).unwrap();
        assert_eq!(&buf[..12], &[2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&buf[12..16], &[1, 0, 0, 0]);
        assert_eq!(&buf[16..20], &[0xff, 0xff, 0xff, 0xff]);
        assert_eq!(FixedTensor::read_blob(&buf[..], s).unwrap(), t);
        assert!(FixedTensor::read_blob(&buf[..buf.len() - 1], s).is_err());
        let mut longer = buf.clone();
        longer.push(0);
        assert!(FixedTensor::read_blob(&longer[..], s).is_err());
    }

    #[test]
    fn real_blob_roundtrip() {
        let t = RealTensor::new(vec![3], vec![0.1, -2.5, 1e300]).unwrap();
        let mut buf = Vec::new();
        t.write_blob(&mut buf).unwrap();
        assert_eq!(RealTensor::read_blob(&buf[..]).unwrap(), t);
    }

    proptest! {
        #[test]
        fn wrap_is_congruent_and_in_range(z in any::<i64>(), b in 1u32..=32) {
            let w = wrap(z, b);
            let half = 1i64 << (b - 1);
            prop_assert!(w >= -half && w < half);
            prop_assert_eq!((z as i128 - w as i128).rem_euclid(1i128 << b), 0);
        }

        #[test]
        fn wrap_is_additive(a in -(1i64 << 50)..(1i64 << 50), c in -(1i64 << 50)..(1i64 << 50), b in 4u32..=32) {
            prop_assert_eq!(wrap(a + c, b), wrap(wrap(a, b) + wrap(c, b), b));
        }

        #[test]
        fn uniform_is_monotone(x in -100.0f64..100.0, dx in 0.0f64..10.0, step in 0.01f64..4.0) {
            prop_assert!(q(x, step) <= q(x + dx, step));
        }

        #[test]
        fn requantizing_is_idempotent(codes in proptest::collection::vec(-128i32..=127, 1..32), step in 0.001f64..8.0) {
            let s = QuantScheme::uniform(step, 8, true).unwrap();
            let t = FixedTensor::new(vec![codes.len()], codes.clone(), s).unwrap();
            let again = quantize_uniform(&t.dequantize(), vec![codes.len()], s).unwrap();
            prop_assert_eq!(again.values(), &codes[..]);
        }
    }
}
