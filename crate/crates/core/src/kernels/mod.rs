//! Integer GEMM and convolution with selectable accumulator semantics.

mod bench;
mod im2col;

pub use bench::{bench_gemm, mad, median, preset, BenchRecord, Preset, PRESETS};
pub use im2col::{conv2d, im2col, ConvGeometry};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fxp::{wrap, FixedTensor};
use crate::packing::{packed_dot_contaminated, swar_add_isolated, PackSpec};

/// How partial sums are accumulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccMode {
    /// 64-bit accumulation; never overflows for supported shapes.
    Exact32,
    /// A `bits`-wide two's-complement accumulator.
    Wrapped { bits: u32 },
    /// SWAR lanes of `bits` in `width`-bit words, each lane wrapping on its own.
    PackedIsolated { bits: u32, width: u32 },
    /// SWAR lanes of `bits` whose top bit is a buffer, so values wrap at `bits - 1`.
    PackedBuffered { bits: u32, width: u32 },
    /// SWAR lanes summed with plain wide adds; carries cross lanes.
    PackedContaminated { bits: u32, width: u32 },
}

impl AccMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AccMode::Exact32 => Ok(()),
            AccMode::Wrapped { bits } => {
                if (4..=32).contains(&bits) {
                    Ok(())
                } else {
                    Err(Error::InvalidMode(format!("wrapped bits {bits} outside [4, 32]")))
                }
            }
            AccMode::PackedIsolated { bits, width }
            | AccMode::PackedBuffered { bits, width }
            | AccMode::PackedContaminated { bits, width } => {
                if !(4..=16).contains(&bits) {
                    return Err(Error::InvalidMode(format!("packed bits {bits} outside [4, 16]")));
                }
                if !matches!(width, 16 | 32 | 64) || bits > width {
                    return Err(Error::InvalidMode(format!(
                        "packed word width {width} invalid for {bits}-bit lanes"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Accumulator bits, or `None` for the exact mode.
    pub fn bits(&self) -> Option<u32> {
        match *self {
            AccMode::Exact32 => None,
            AccMode::Wrapped { bits }
            | AccMode::PackedIsolated { bits, .. }
            | AccMode::PackedBuffered { bits, .. }
            | AccMode::PackedContaminated { bits, .. } => Some(bits),
        }
    }

    /// Period (in bits) of the modular result; buffered lanes lose one bit.
    pub fn effective_bits(&self) -> Option<u32> {
        match *self {
            AccMode::PackedBuffered { bits, .. } => Some(bits - 1),
            other => other.bits(),
        }
    }

    pub fn width(&self) -> Option<u32> {
        match *self {
            AccMode::PackedIsolated { width, .. }
            | AccMode::PackedBuffered { width, .. }
            | AccMode::PackedContaminated { width, .. } => Some(width),
            _ => None,
        }
    }

    pub fn is_packed(&self) -> bool {
        self.width().is_some()
    }

    pub fn name(&self) -> &'static str {
        match self {
            AccMode::Exact32 => "exact32",
            AccMode::Wrapped { .. } => "wrapped",
            AccMode::PackedIsolated { .. } => "packed_isolated",
            AccMode::PackedBuffered { .. } => "packed_buffered",
            AccMode::PackedContaminated { .. } => "packed_contaminated",
        }
    }
}

impl fmt::Display for AccMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.bits(), self.width()) {
            (None, _) => f.write_str(self.name()),
            (Some(b), None) => write!(f, "{}:{b}", self.name()),
            (Some(b), Some(w)) => write!(f, "{}:{b}:{w}", self.name()),
        }
    }
}

impl FromStr for AccMode {
    type Err = Error;

    /// Parses `exact32`, `wrapped:B`, `packed_isolated:B:W`,
    /// `packed_buffered:B:W` or `packed_contaminated:B:W`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize| -> Result<u32> {
            parts
                .get(i)
                .ok_or_else(|| Error::InvalidMode(format!("`{s}` is missing a field")))?
                .parse()
                .map_err(|_| Error::InvalidMode(format!("bad number in `{s}`")))
        };
        let expect_fields = |n: usize| -> Result<()> {
            if parts.len() == n {
                Ok(())
            } else {
                Err(Error::InvalidMode(format!("`{s}` should have {n} fields")))
            }
        };
        let mode = match parts[0] {
            "exact32" | "exact" => {
                expect_fields(1)?;
                AccMode::Exact32
            }
            "wrapped" => {
                expect_fields(2)?;
                AccMode::Wrapped { bits: num(1)? }
            }
            "packed_isolated" => {
                expect_fields(3)?;
                AccMode::PackedIsolated {
                    bits: num(1)?,
                    width: num(2)?,
                }
            }
            "packed_buffered" => {
                expect_fields(3)?;
                AccMode::PackedBuffered {
                    bits: num(1)?,
                    width: num(2)?,
                }
            }
            "packed_contaminated" => {
                expect_fields(3)?;
                AccMode::PackedContaminated {
                    bits: num(1)?,
                    width: num(2)?,
                }
            }
            other => return Err(Error::InvalidMode(format!("unknown mode `{other}`"))),
        };
        mode.validate()?;
        Ok(mode)
    }
}

/// Row-major matrix of accumulator outputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i64>,
}

impl IntMatrix {
    pub fn get(&self, r: usize, c: usize) -> i64 {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> IntMatrix {
        let mut data = vec![0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        IntMatrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }
}

fn matrix_dims(t: &FixedTensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::Shape(format!(
            "{what} must be a matrix, got shape {:?}",
            t.shape()
        ))),
    }
}

/// `A (M x K) * B (K x N)` under `mode`.
pub fn gemm(a: &FixedTensor, b: &FixedTensor, mode: AccMode) -> Result<IntMatrix> {
    let (m, k) = matrix_dims(a, "A")?;
    let (k2, n) = matrix_dims(b, "B")?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "inner dimensions differ: A is {m}x{k}, B is {k2}x{n}"
        )));
    }
    gemm_raw(a.values(), b.values(), m, k, n, mode)
}

/// [`gemm`] on raw row-major slices.
pub fn gemm_raw(a: &[i32], b: &[i32], m: usize, k: usize, n: usize, mode: AccMode) -> Result<IntMatrix> {
    mode.validate()?;
    if a.len() != m * k || b.len() != k * n {
        return Err(Error::Shape(format!(
            "buffers of length {} and {} do not match {m}x{k} * {k}x{n}",
            a.len(),
            b.len()
        )));
    }
    let data = match mode {
        AccMode::Exact32 => gemm_exact(a, b, m, k, n),
        AccMode::Wrapped { bits } => gemm_wrapped(a, b, m, k, n, bits),
        AccMode::PackedIsolated { bits, width } => {
            let w = PackedWeights::new(b, k, n, PackSpec::new(width, bits, false)?)?;
            w.multiply(a, m)?
        }
        AccMode::PackedBuffered { bits, width } => {
            let w = PackedWeights::new(b, k, n, PackSpec::new(width, bits, true)?)?;
            w.multiply(a, m)?
        }
        AccMode::PackedContaminated { bits, width } => {
            gemm_contaminated(a, b, m, k, n, PackSpec::new(width, bits, false)?)?
                .0
        }
    };
    Ok(IntMatrix { rows: m, cols: n, data })
}

fn gemm_exact(a: &[i32], b: &[i32], m: usize, k: usize, n: usize) -> Vec<i64> {
    let mut out = vec![0i64; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p] as i64;
            if av == 0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv as i64;
            }
        }
    }
    out
}

/// Scalar kernel with a 32-bit two's-complement accumulator, reduced to
/// `bits` at the end (valid because `2^bits` divides `2^32`).
fn gemm_wrapped(a: &[i32], b: &[i32], m: usize, k: usize, n: usize, bits: u32) -> Vec<i64> {
    let mut acc = vec![0i32; n];
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0);
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in acc.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = o.wrapping_add(av.wrapping_mul(bv));
            }
        }
        out.extend(acc.iter().map(|&v| wrap(v as i64, bits)));
    }
    out
}

fn check_ternary(b: &[i32]) -> Result<()> {
    match b.iter().find(|&&v| !(-1..=1).contains(&v)) {
        Some(&bad) => Err(Error::WeightRange(bad as i64)),
        None => Ok(()),
    }
}

/// Per-entry contaminated dot products; also returns dropped-carry counts.
pub fn gemm_contaminated(
    a: &[i32],
    b: &[i32],
    m: usize,
    k: usize,
    n: usize,
    spec: PackSpec,
) -> Result<(Vec<i64>, Vec<u64>)> {
    check_ternary(b)?;
    let mut bt = vec![0i32; k * n];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    let mut out = Vec::with_capacity(m * n);
    let mut dropped = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let r = packed_dot_contaminated(row, &bt[j * k..(j + 1) * k], spec)?;
            out.push(r.value);
            dropped.push(r.dropped());
        }
    }
    Ok((out, dropped))
}

/// Ternary weights pre-packed as per-lane sign masks for SWAR accumulation.
///
/// Output columns are spread across lanes: word `j` of row `p` holds columns
/// `j*L .. j*L + L`. A product `a * w` is then `a` in `+1` lanes, `-a` in `-1`
/// lanes and zero elsewhere, selected with two ANDs.
#[derive(Debug, Clone)]
pub struct PackedWeights {
    spec: PackSpec,
    k: usize,
    n: usize,
    words: usize,
    plus: Vec<u64>,
    minus: Vec<u64>,
}

impl PackedWeights {
    pub fn new(b: &[i32], k: usize, n: usize, spec: PackSpec) -> Result<Self> {
        check_ternary(b)?;
        let lanes = spec.lanes();
        let words = n.div_ceil(lanes);
        let lane_ones = (1u64 << spec.value_bits()) - 1;
        let mut plus = vec![0u64; k * words];
        let mut minus = vec![0u64; k * words];
        for p in 0..k {
            for j in 0..n {
                let (w, l) = (j / lanes, j % lanes);
                let bits = lane_ones << (l as u32 * spec.lane_bits());
                match b[p * n + j] {
                    1 => plus[p * words + w] |= bits,
                    -1 => minus[p * words + w] |= bits,
                    _ => {}
                }
            }
        }
        Ok(PackedWeights {
            spec,
            k,
            n,
            words,
            plus,
            minus,
        })
    }

    pub fn spec(&self) -> PackSpec {
        self.spec
    }

    /// `A (m x k)` times the packed weights.
    pub fn multiply(&self, a: &[i32], m: usize) -> Result<Vec<i64>> {
        let mut out = vec![0i64; m * self.n];
        self.multiply_into(a, m, &mut out)?;
        Ok(out)
    }

    pub fn multiply_into(&self, a: &[i32], m: usize, out: &mut [i64]) -> Result<()> {
        let (k, n, words) = (self.k, self.n, self.words);
        if a.len() != m * k || out.len() != m * n {
            return Err(Error::Shape(format!(
                "buffers do not match {m}x{k} * {k}x{n}"
            )));
        }
        let spec = self.spec;
        let vbits = spec.value_bits();
        let lane_mask = (1u64 << vbits) - 1;
        let ones = spec.replicate(1);
        let value_mask = spec.value_mask();
        let msb = spec.value_msb_mask();
        let buffered = spec.buffered();
        let mut acc = vec![0u64; words];
        for i in 0..m {
            acc.iter_mut().for_each(|v| *v = 0);
            for p in 0..k {
                let av = a[i * k + p] as i64;
                if av == 0 {
                    continue;
                }
                let pos = (av as u64 & lane_mask) * ones;
                let neg = (av.wrapping_neg() as u64 & lane_mask) * ones;
                let plus = &self.plus[p * words..(p + 1) * words];
                let minus = &self.minus[p * words..(p + 1) * words];
                if buffered {
                    for ((s, &pm), &mm) in acc.iter_mut().zip(plus).zip(minus) {
                        let prod = (pos & pm) | (neg & mm);
                        *s = s.wrapping_add(prod) & value_mask;
                    }
                } else {
                    for ((s, &pm), &mm) in acc.iter_mut().zip(plus).zip(minus) {
                        let prod = (pos & pm) | (neg & mm);
                        *s = swar_add_isolated(*s, prod, value_mask, msb);
                    }
                }
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (j, o) in row.iter_mut().enumerate() {
                let (w, l) = (j / spec.lanes(), j % spec.lanes());
                let lane = (acc[w] >> (l as u32 * spec.lane_bits())) & lane_mask;
                *o = wrap(lane as i64, vbits);
            }
        }
        Ok(())
    }
}

/// `x (batch x inputs) * w^T` for a row-major `outputs x inputs` weight matrix.
///
/// Shared by every floating-point dense layer so training and inference round
/// identically.
pub fn dense_f64(x: &[f64], w: &[f64], inputs: usize, outputs: usize) -> Vec<f64> {
    let batch = x.len() / inputs;
    let mut out = vec![0.0; batch * outputs];
    for s in 0..batch {
        let xr = &x[s * inputs..(s + 1) * inputs];
        for o in 0..outputs {
            let wr = &w[o * inputs..(o + 1) * inputs];
            out[s * outputs + o] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
        }
    }
    out
}
