//! Carry accounting for packed accumulation without lane isolation.

use super::{PackSpec, PackedWord};
use crate::error::{Error, Result};
use crate::fxp::{to_signed, to_unsigned, wrap};

/// Moving-average momentum for per-neuron carry means.
pub const DEFAULT_CARRY_MOMENTUM: f64 = 0.99;

/// Temperature of the tanh that replaces the sign test in [`soft_carry_count`].
pub const DEFAULT_TANH_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CarryCount {
    /// Total carries produced while folding them back into the register.
    pub carries: u64,
    /// Register contents once no new carry is produced.
    pub residue: u64,
    /// Sum of the operands reinterpreted as unsigned `b`-bit integers.
    pub unsigned_sum: u64,
    /// Executions of the fold loop.
    pub iterations: u32,
}

/// Counts the carries produced when `v` is summed in a `b`-bit register and
/// every carry is added back in until none remain.
///
/// The operands are first reinterpreted as unsigned (negative `v` becomes
/// `v + 2^b`), so carries only arise from unsigned overflow.
pub fn carry_count(v: &[i64], bits: u32) -> Result<CarryCount> {
    let mut u = 0u64;
    for &x in v {
        u += to_unsigned(x, bits)?;
    }
    let mask = (1u64 << bits) - 1;
    let (mut carry, mut reg) = (u, 0u64);
    let (mut total, mut iterations) = (0u64, 0u32);
    while carry != 0 {
        let s = carry + reg;
        carry = s >> bits;
        reg = s & mask;
        total += carry;
        iterations += 1;
    }
    Ok(CarryCount {
        carries: total,
        residue: reg,
        unsigned_sum: u,
        iterations,
    })
}

/// Closed form of [`carry_count`] on an unsigned sum `u`.
///
/// Each folded carry removes `2^b` from the register and adds back one, so the
/// residue is `u` reduced modulo `2^b - 1` into `[1, 2^b - 1]` (or 0 when
/// `u == 0`). Returns `(carries, residue)`.
#[inline]
pub fn carry_count_closed_form(u: u64, bits: u32) -> (u64, u64) {
    if u == 0 {
        return (0, 0);
    }
    let m = (1u64 << bits) - 1;
    let c = (u - 1) / m;
    (c, u - c * m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContaminatedDot {
    /// Signed `b`-bit result left in the register.
    pub value: i64,
    /// Carries pushed out of the top lane during accumulation.
    pub dropped_top: u64,
    /// Carries lost while summing the lanes horizontally.
    pub dropped_reduction: u64,
}

impl ContaminatedDot {
    pub fn dropped(&self) -> u64 {
        self.dropped_top + self.dropped_reduction
    }
}

/// Dot product of activations with `{-1, 0, 1}` weights through packed words
/// and plain wide adds.
///
/// Product `i` goes to lane `i mod L` of word `i / L`. Words are summed with
/// [`super::add_contaminated`] semantics, then the `L` lanes are added with
/// `b`-bit wrapping adds whose carries are dropped.
pub fn packed_dot_contaminated(x: &[i32], w: &[i32], spec: PackSpec) -> Result<ContaminatedDot> {
    if x.len() != w.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            actual: w.len(),
        });
    }
    if spec.buffered() {
        return Err(Error::SpecMismatch(
            "contaminated accumulation uses unbuffered lanes".into(),
        ));
    }
    if let Some(&bad) = w.iter().find(|&&v| !(-1..=1).contains(&v)) {
        return Err(Error::WeightRange(bad as i64));
    }
    let b = spec.lane_bits();
    let lanes = spec.lanes();
    let used = lanes as u32 * b;
    let lane_mask = (1u64 << b) - 1;

    let mut acc = 0u64;
    let mut dropped_top = 0u64;
    for (chunk_x, chunk_w) in x.chunks(lanes).zip(w.chunks(lanes)) {
        let mut word = 0u64;
        for (l, (&a, &s)) in chunk_x.iter().zip(chunk_w).enumerate() {
            let p = wrap(a as i64 * s as i64, b);
            word |= to_unsigned(p, b)? << (l as u32 * b);
        }
        let (sum, overflow) = acc.overflowing_add(word);
        if used == 64 {
            dropped_top += overflow as u64;
            acc = sum;
        } else {
            dropped_top += sum >> used;
            acc = sum & spec.lanes_mask();
        }
    }
    let word = PackedWord::from_payload(spec, acc)?;

    let mut reg = word.lane(0);
    let mut dropped_reduction = 0u64;
    for l in 1..lanes {
        let s = reg + word.lane(l);
        dropped_reduction += s >> b;
        reg = s & lane_mask;
    }
    Ok(ContaminatedDot {
        value: to_signed(reg, b)?,
        dropped_top,
        dropped_reduction,
    })
}

/// Per-neuron carry statistics: a moving-average mean and the most recent
/// batch variance.
#[derive(Debug, Clone, PartialEq)]
pub struct CarryStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl CarryStats {
    pub fn new(neurons: usize, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Format(format!("momentum must lie in (0, 1), got {momentum}")));
        }
        Ok(CarryStats {
            mean: vec![0.0; neurons],
            var: vec![0.0; neurons],
            momentum,
        })
    }

    /// Initialises the moving mean directly from a calibration batch.
    pub fn from_batch(counts: &[f64], neurons: usize, momentum: f64) -> Result<Self> {
        let (mean, var) = carry_batch_stats(counts, neurons)?;
        let mut s = Self::new(neurons, momentum)?;
        s.mean = mean;
        s.var = var;
        Ok(s)
    }

    /// Folds a batch in: the variance is replaced, the mean is averaged.
    pub fn observe(&mut self, counts: &[f64]) -> Result<()> {
        let (mean, var) = carry_batch_stats(counts, self.mean.len())?;
        update_moving_mean(self, &mean)?;
        self.var = var;
        Ok(())
    }
}

/// Mean and population variance (divisor = batch size) per neuron of a
/// row-major `batch x neurons` matrix of carry counts.
pub fn carry_batch_stats(counts: &[f64], neurons: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if neurons == 0 || counts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !counts.len().is_multiple_of(neurons) {
        return Err(Error::Shape(format!(
            "{} counts do not form rows of {neurons} neurons",
            counts.len()
        )));
    }
    let batch = (counts.len() / neurons) as f64;
    let mut mean = vec![0.0; neurons];
    for row in counts.chunks_exact(neurons) {
        for (m, &c) in mean.iter_mut().zip(row) {
            *m += c;
        }
    }
    mean.iter_mut().for_each(|m| *m /= batch);
    let mut var = vec![0.0; neurons];
    for row in counts.chunks_exact(neurons) {
        for ((v, &c), &m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (c - m) * (c - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= batch);
    Ok((mean, var))
}

/// `mean <- momentum * mean + (1 - momentum) * batch_mean`.
pub fn update_moving_mean(stats: &mut CarryStats, batch_mean: &[f64]) -> Result<()> {
    if batch_mean.len() != stats.mean.len() {
        return Err(Error::LengthMismatch {
            expected: stats.mean.len(),
            actual: batch_mean.len(),
        });
    }
    let m = stats.momentum;
    for (old, &new) in stats.mean.iter_mut().zip(batch_mean) {
        *old = m * *old + (1.0 - m) * new;
    }
    Ok(())
}

/// Differentiable carry count and its gradient with respect to each operand.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftCarry {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Soft negative-operand selector `tanh(max(-v, 0) / T)`: exactly 0 for
/// `v >= 0`, approaching 1 for `v <= -1` as the temperature shrinks.
///
/// Returns the selector and its derivative; at `v = 0` the derivative of the
/// negative side is used.
#[inline]
fn soft_negative(v: f64, temperature: f64) -> (f64, f64) {
    if v > 0.0 {
        return (0.0, 0.0);
    }
    let t = (-v / temperature).tanh();
    (t, -(1.0 - t * t) / temperature)
}

/// `d carries / d v` of the soft surrogate for one operand.
#[inline]
pub fn soft_carry_slope(v: f64, bits: u32, temperature: f64) -> f64 {
    let p = (1u64 << bits) as f64;
    let (_, ds) = soft_negative(v, temperature);
    (1.0 + p * ds) / (p - 1.0)
}

/// Differentiable surrogate of [`carry_count`].
///
/// The sign test of the unsigned reinterpretation is replaced by a one-sided
/// tanh (see `soft_negative`), giving
/// a real-valued unsigned sum `u`. The fold loop's floor and modulo are
/// straight-through: the final register is held at its value for `round(u)`,
/// and the carry total follows `(u - residue) / (2^b - 1)`, whose slope is the
/// limit of the loop's geometric series of `2^-b` factors.
pub fn soft_carry_count(v: &[f64], bits: u32, temperature: f64) -> SoftCarry {
    let p = (1u64 << bits) as f64;
    let mut u = 0.0;
    let grad = v
        .iter()
        .map(|&x| {
            let (s, ds) = soft_negative(x, temperature);
            u += x + p * s;
            (1.0 + p * ds) / (p - 1.0)
        })
        .collect();
    let rounded = u.round().max(0.0) as u64;
    let (_, residue) = carry_count_closed_form(rounded, bits);
    SoftCarry {
        value: (u - residue as f64) / (p - 1.0),
        grad,
    }
}
