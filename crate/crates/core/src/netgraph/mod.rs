//! Sequential quantized networks: block forward pass, overflow measurement,
//! step-size calibration and on-disk manifests.
//!
//! A quantized block computes
//!
//! ```text
//! z_q = W_q x_q            (accumulated under an AccMode)
//! y   = γ · (c(z_q) · Δ_z) + β,   Δ_z = Δ_w · Δ_x
//! out = quantize(relu(y))  (or left real)
//! ```
//!
//! where `c` is an optional cyclic activation. Full-precision blocks replace
//! the first line with a floating-point product and have no cyclic stage.

mod calibrate;
mod manifest;

pub use calibrate::{
    activation_bits, calibrate_model, calibrate_step_size, percentile, Calibration,
    LayerCalibration, CALIBRATION_ITERATIONS, CALIBRATION_TOLERANCE, RANGE_PERCENTILE,
};
pub use manifest::{load_model, save_model, MANIFEST_FILE, MANIFEST_VERSION};

use crate::cyclic::CyclicSpec;
use crate::error::{Error, Result};
use crate::fxp::{quantize_uniform, to_unsigned, wrap, FixedTensor, QuantKind, QuantScheme, RealTensor};
use crate::kernels::{conv2d, dense_f64, gemm_raw, AccMode, ConvGeometry};
use crate::packing::{carry_batch_stats, carry_count_closed_form};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerOp {
    Linear,
    /// Per-sample input is `[in_channels, height, width]`.
    Conv {
        geometry: ConvGeometry,
        in_channels: usize,
        height: usize,
        width: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Weights {
    Fixed(FixedTensor),
    Real(RealTensor),
}

impl Weights {
    pub fn shape(&self) -> &[usize] {
        match self {
            Weights::Fixed(t) => t.shape(),
            Weights::Real(t) => &t.shape,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub op: LayerOp,
    /// `[out, in]` for linear layers, `[out, in, kh, kw]` for convolutions.
    pub weights: Weights,
    /// Scheme of the incoming activations; `None` means real input.
    pub input_scheme: Option<QuantScheme>,
    pub cyclic: Option<CyclicSpec>,
    /// Per-output-channel affine `γ`.
    pub scale: Vec<f64>,
    /// Per-output-channel affine `β`.
    pub shift: Vec<f64>,
    pub relu: bool,
    /// Requantization for the next layer; `None` leaves the output real.
    pub output_scheme: Option<QuantScheme>,
    pub full_precision: bool,
    /// Mean carry per output neuron, subtracted under contaminated or
    /// carry-simulated accumulation.
    pub carry_mean: Option<Vec<f64>>,
    /// The layer reserves a buffer bit per lane, leaving `b - 1` value bits.
    pub buffered: bool,
}

impl LayerSpec {
    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Flattened per-sample input size.
    pub fn in_features(&self) -> usize {
        match self.op {
            LayerOp::Linear => self.weights.shape().get(1).copied().unwrap_or(0),
            LayerOp::Conv {
                in_channels,
                height,
                width,
                ..
            } => in_channels * height * width,
        }
    }

    /// Positions per output channel (1 for linear layers).
    pub fn positions(&self) -> Result<usize> {
        match self.op {
            LayerOp::Linear => Ok(1),
            LayerOp::Conv {
                geometry,
                height,
                width,
                ..
            } => {
                let (h, w) = geometry.output_size(height, width)?;
                Ok(h * w)
            }
        }
    }

    pub fn out_features(&self) -> Result<usize> {
        Ok(self.out_channels() * self.positions()?)
    }

    /// `Δ_z = Δ_w · Δ_x` for quantized layers.
    pub fn step_z(&self) -> Option<f64> {
        match (&self.weights, &self.input_scheme) {
            (Weights::Fixed(w), Some(x)) => Some(w.scheme().step_size() * x.step_size()),
            _ => None,
        }
    }

    /// Accumulator mode this layer actually runs under when the model is
    /// evaluated with `mode`.
    pub fn effective_mode(&self, mode: AccMode) -> AccMode {
        if !self.buffered {
            return mode;
        }
        match mode {
            AccMode::Wrapped { bits } if bits > 4 => AccMode::Wrapped { bits: bits - 1 },
            AccMode::PackedIsolated { bits, width } | AccMode::PackedContaminated { bits, width } => {
                AccMode::PackedBuffered { bits, width }
            }
            other => other,
        }
    }

    /// Accumulator bits for this layer in a model with `accumulator_bits`.
    pub fn accumulator_bits(&self, accumulator_bits: u32) -> u32 {
        accumulator_bits - self.buffered as u32
    }

    fn validate(&self, index: usize, accumulator_bits: u32) -> Result<()> {
        let bad = |msg: String| Err(Error::InconsistentModel(format!("layer {index} ({}): {msg}", self.name)));
        let shape = self.weights.shape();
        match self.op {
            LayerOp::Linear if shape.len() != 2 => return bad(format!("linear weights need 2 dims, got {shape:?}")),
            LayerOp::Conv {
                geometry, in_channels, ..
            } if shape.len() != 4
                || shape[1] != in_channels
                || shape[2] != geometry.kernel_h
                || shape[3] != geometry.kernel_w =>
            {
                return bad(format!("conv weights {shape:?} do not match the geometry"))
            }
            _ => {}
        }
        self.positions()?;
        let c = self.out_channels();
        if self.scale.len() != c || self.shift.len() != c {
            return bad(format!("affine needs {c} entries per parameter"));
        }
        if let Some(m) = &self.carry_mean {
            if m.len() != c {
                return bad(format!("carry mean needs {c} entries"));
            }
        }
        if let Some(s) = &self.output_scheme {
            if s.kind() != QuantKind::Uniform {
                return bad("output scheme must be uniform".into());
            }
        }
        if self.full_precision {
            if !matches!(self.weights, Weights::Real(_)) {
                return bad("full-precision layers carry real weights".into());
            }
            if self.cyclic.is_some() {
                return bad("full-precision layers have no cyclic activation".into());
            }
            if !matches!(self.op, LayerOp::Linear) {
                return bad("full-precision layers must be linear".into());
            }
        } else {
            if !matches!(self.weights, Weights::Fixed(_)) {
                return bad("quantized layers carry fixed-point weights".into());
            }
            match &self.input_scheme {
                None => return bad("quantized layers need an input scheme".into()),
                Some(s) if s.kind() != QuantKind::Uniform => {
                    return bad("input scheme must be uniform".into())
                }
                _ => {}
            }
            if let Some(cyc) = &self.cyclic {
                let want = self.accumulator_bits(accumulator_bits);
                if cyc.bits() != want {
                    return bad(format!("cyclic bits {} differ from accumulator bits {want}", cyc.bits()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelManifest {
    pub version: u32,
    pub accumulator_bits: u32,
    pub seed: u64,
    pub layers: Vec<LayerSpec>,
}

impl ModelManifest {
    pub fn new(accumulator_bits: u32, seed: u64, layers: Vec<LayerSpec>) -> Result<Self> {
        let m = ModelManifest {
            version: MANIFEST_VERSION,
            accumulator_bits,
            seed,
            layers,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(4..=32).contains(&self.accumulator_bits) {
            return Err(Error::InconsistentModel(format!(
                "accumulator bits {} outside [4, 32]",
                self.accumulator_bits
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::InconsistentModel("model has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.validate(i, self.accumulator_bits)?;
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            let (a, b) = (&pair[0], &pair[1]);
            if a.output_scheme != b.input_scheme {
                return Err(Error::InconsistentModel(format!(
                    "layer {i} output scheme {:?} differs from layer {} input scheme {:?}",
                    a.output_scheme,
                    i + 1,
                    b.input_scheme
                )));
            }
            if a.out_features()? != b.in_features() {
                return Err(Error::InconsistentModel(format!(
                    "layer {i} emits {} features, layer {} expects {}",
                    a.out_features()?,
                    i + 1,
                    b.in_features()
                )));
            }
        }
        Ok(())
    }

    pub fn in_features(&self) -> usize {
        self.layers[0].in_features()
    }
}

/// A batch of activations, `[batch, features]`.
#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    Fixed(FixedTensor),
    Real(RealTensor),
}

impl Activation {
    pub fn batch(&self) -> usize {
        match self {
            Activation::Fixed(t) => t.shape()[0],
            Activation::Real(t) => t.shape[0],
        }
    }

    pub fn to_real(&self) -> RealTensor {
        match self {
            Activation::Fixed(t) => RealTensor {
                shape: t.shape().to_vec(),
                values: t.dequantize(),
            },
            Activation::Real(t) => t.clone(),
        }
    }
}

/// Output of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutput {
    pub activation: Activation,
    /// Pre-activation `z_q` as delivered by the accumulator (quantized
    /// layers only), `[batch, out_features]`.
    pub preactivation: Option<Vec<i64>>,
}

/// `γ · pre + β`, then ReLU if requested.
#[inline]
pub fn affine_relu(pre: f64, gamma: f64, beta: f64, relu: bool) -> f64 {
    let y = gamma * pre + beta;
    if relu {
        y.max(0.0)
    } else {
        y
    }
}

fn batch_dims(x: &[usize], features: usize) -> Result<usize> {
    match *x {
        [b, f] if f == features => Ok(b),
        _ => Err(Error::Shape(format!(
            "expected [batch, {features}] activations, got {x:?}"
        ))),
    }
}

/// Carry counts of the products `x_q[s, i] * w[o, i]`, folding
/// every operand into a `bits`-wide register; `[batch, out]`.
pub fn carry_counts(x_q: &[i32], batch: usize, w: &[i32], out: usize, bits: u32) -> Result<Vec<u64>> {
    let inputs = x_q.len().checked_div(batch).unwrap_or(0);
    if x_q.len() != batch * inputs || w.len() != out * inputs {
        return Err(Error::Shape("carry count operands do not line up".into()));
    }
    let period = 1i64 << bits;
    let mut counts = Vec::with_capacity(batch * out);
    for s in 0..batch {
        let xr = &x_q[s * inputs..(s + 1) * inputs];
        for o in 0..out {
            let wr = &w[o * inputs..(o + 1) * inputs];
            let u: u64 = if bits < 32 {
                xr.iter()
                    .zip(wr)
                    .map(|(&a, &c)| (a as i64 * c as i64).rem_euclid(period) as u64)
                    .sum()
            } else {
                xr.iter()
                    .zip(wr)
                    .map(|(&a, &c)| to_unsigned(wrap(a as i64 * c as i64, bits), bits).unwrap_or(0))
                    .sum()
            };
            counts.push(carry_count_closed_form(u, bits).0);
        }
    }
    Ok(counts)
}

/// Per-neuron carry statistics of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCarryStats {
    pub layer: usize,
    pub name: String,
    pub mean: Vec<f64>,
    /// Population variance over the samples.
    pub var: Vec<f64>,
}

impl LayerCarryStats {
    /// Average carry count over neurons.
    pub fn mean_carry(&self) -> f64 {
        self.mean.iter().sum::<f64>() / self.mean.len().max(1) as f64
    }

    /// Average per-neuron standard deviation.
    pub fn mean_std(&self) -> f64 {
        self.var.iter().map(|v| v.sqrt()).sum::<f64>() / self.var.len().max(1) as f64
    }
}

/// Carry counts of every quantized, unbuffered dense layer on `input`, with
/// each layer fed the activations of the exact forward pass.
///
/// Layers with multi-bit weights are rejected, as their products do not fit
/// the packed representation the count describes.
pub fn carry_statistics(model: &ModelManifest, input: &RealTensor) -> Result<Vec<LayerCarryStats>> {
    let trace = forward_trace(model, input, AccMode::Exact32, false)?;
    let mut stats = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        let Weights::Fixed(w) = &layer.weights else { continue };
        if w.scheme().kind() == QuantKind::Uniform {
            return Err(Error::Unsupported(format!(
                "layer {} has {}-bit weights; carry simulation needs binary or ternary weights",
                layer.name,
                w.scheme().bits()
            )));
        }
        if layer.buffered {
            continue;
        }
        if !matches!(layer.op, LayerOp::Linear) {
            return Err(Error::Unsupported(format!("carry statistics of convolution layer {}", layer.name)));
        }
        let scheme = layer
            .input_scheme
            .ok_or_else(|| Error::InconsistentModel(format!("layer {} lacks an input scheme", layer.name)))?;
        let x = quantized_input(&trace.inputs[l], &scheme, layer.in_features())?;
        let batch = x.shape()[0];
        let out = layer.out_channels();
        let bits = layer.accumulator_bits(model.accumulator_bits);
        let counts: Vec<f64> = carry_counts(x.values(), batch, w.values(), out, bits)?
            .into_iter()
            .map(|c| c as f64)
            .collect();
        let (mean, var) = carry_batch_stats(&counts, out)?;
        stats.push(LayerCarryStats {
            layer: l,
            name: layer.name.clone(),
            mean,
            var,
        });
    }
    Ok(stats)
}

fn quantized_input<'a>(x: &'a Activation, scheme: &QuantScheme, features: usize) -> Result<std::borrow::Cow<'a, FixedTensor>> {
    match x {
        Activation::Fixed(t) => {
            if t.scheme() != scheme {
                return Err(Error::SpecMismatch(format!(
                    "activation scheme {:?} differs from layer input scheme {scheme:?}",
                    t.scheme()
                )));
            }
            batch_dims(t.shape(), features)?;
            Ok(std::borrow::Cow::Borrowed(t))
        }
        Activation::Real(t) => {
            batch_dims(&t.shape, features)?;
            Ok(std::borrow::Cow::Owned(quantize_uniform(&t.values, t.shape.clone(), *scheme)?))
        }
    }
}

/// Accumulates `z_q` for a quantized layer under `mode`.
fn accumulate(x: &FixedTensor, layer: &LayerSpec, w: &FixedTensor, mode: AccMode, carry_bits: Option<u32>) -> Result<Vec<i64>> {
    let batch = x.shape()[0];
    let out = layer.out_channels();
    let mode = layer.effective_mode(mode);
    let mut z = match layer.op {
        LayerOp::Linear => {
            let k = layer.in_features();
            let mut wt = vec![0i32; k * out];
            for o in 0..out {
                for i in 0..k {
                    wt[i * out + o] = w.values()[o * k + i];
                }
            }
            gemm_raw(x.values(), &wt, batch, k, out, mode)?.data
        }
        LayerOp::Conv {
            geometry,
            in_channels,
            height,
            width,
        } => {
            if carry_bits.is_some() {
                return Err(Error::Unsupported("carry simulation on convolutions".into()));
            }
            let per = in_channels * height * width;
            let mut z = Vec::new();
            for s in 0..batch {
                let xs = FixedTensor::new(
                    vec![in_channels, height, width],
                    x.values()[s * per..(s + 1) * per].to_vec(),
                    *x.scheme(),
                )?;
                z.extend(conv2d(&xs, w, geometry, mode)?.data);
            }
            z
        }
    };
    let positions = layer.positions()?;
    let mean_offset = |j: usize| -> i64 {
        layer
            .carry_mean
            .as_ref()
            .map_or(0, |m| m[(j % (out * positions)) / positions].round() as i64)
    };
    match (carry_bits, mode) {
        (Some(bits), _) if !layer.buffered => {
            let n = carry_counts(x.values(), batch, w.values(), out, bits)?;
            for (j, (zj, nj)) in z.iter_mut().zip(n).enumerate() {
                *zj += nj as i64 - mean_offset(j);
            }
        }
        (None, AccMode::PackedContaminated { bits, .. }) => {
            for (j, zj) in z.iter_mut().enumerate() {
                *zj = wrap(*zj - mean_offset(j), bits);
            }
        }
        _ => {}
    }
    Ok(z)
}

/// Runs one block, leaving the output real (before requantization).
pub fn forward_block_real(x: &Activation, layer: &LayerSpec, mode: AccMode, carry_bits: Option<u32>) -> Result<(RealTensor, Option<Vec<i64>>)> {
    let features = layer.in_features();
    let out = layer.out_channels();
    let positions = layer.positions()?;
    let width = out * positions;
    match &layer.weights {
        Weights::Real(w) => {
            if !layer.full_precision {
                return Err(Error::InconsistentModel(format!("layer {} has real weights", layer.name)));
            }
            let xr = x.to_real();
            let batch = batch_dims(&xr.shape, features)?;
            let pre = dense_f64(&xr.values, &w.values, features, out);
            let values = pre
                .iter()
                .enumerate()
                .map(|(j, &p)| {
                    let o = j % out;
                    affine_relu(p, layer.scale[o], layer.shift[o], layer.relu)
                })
                .collect();
            Ok((RealTensor::new(vec![batch, out], values)?, None))
        }
        Weights::Fixed(w) => {
            let scheme = layer
                .input_scheme
                .ok_or_else(|| Error::InconsistentModel(format!("layer {} lacks an input scheme", layer.name)))?;
            let xq = quantized_input(x, &scheme, features)?;
            let batch = xq.shape()[0];
            let z = accumulate(&xq, layer, w, mode, carry_bits)?;
            let dz = w.scheme().step_size() * scheme.step_size();
            let values = z
                .iter()
                .enumerate()
                .map(|(j, &zj)| {
                    let o = (j % width) / positions;
                    let c = match &layer.cyclic {
                        Some(cyc) => cyc.apply(zj as f64),
                        None => zj as f64,
                    };
                    affine_relu(c * dz, layer.scale[o], layer.shift[o], layer.relu)
                })
                .collect();
            Ok((RealTensor::new(vec![batch, width], values)?, Some(z)))
        }
    }
}

/// Runs one block and requantizes its output with the layer's output scheme.
pub fn forward_block(x: &Activation, layer: &LayerSpec, mode: AccMode) -> Result<BlockOutput> {
    forward_block_with(x, layer, mode, None)
}

/// [`forward_block`] with optional carry simulation at `carry_bits`: the
/// exact pre-activation is offset by its carry count minus the
/// rounded stored mean.
pub fn forward_block_with(x: &Activation, layer: &LayerSpec, mode: AccMode, carry_bits: Option<u32>) -> Result<BlockOutput> {
    let (real, preactivation) = forward_block_real(x, layer, mode, carry_bits)?;
    let activation = match &layer.output_scheme {
        Some(s) => Activation::Fixed(quantize_uniform(&real.values, real.shape.clone(), *s)?),
        None => Activation::Real(real),
    };
    Ok(BlockOutput {
        activation,
        preactivation,
    })
}

/// Result of a full forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub output: RealTensor,
    /// Per layer, the accumulator output (quantized layers only).
    pub preactivations: Vec<Option<Vec<i64>>>,
    /// Per layer, the activation fed into it.
    pub inputs: Vec<Activation>,
}

/// Forward pass keeping every layer's input and pre-activation.
pub fn forward_trace(model: &ModelManifest, input: &RealTensor, mode: AccMode, simulate_carries: bool) -> Result<Trace> {
    batch_dims(&input.shape, model.in_features())?;
    let mut x = Activation::Real(input.clone());
    let mut pre = Vec::with_capacity(model.layers.len());
    let mut inputs = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let carry_bits = (simulate_carries && layer.carry_mean.is_some()).then_some(model.accumulator_bits);
        let out = forward_block_with(&x, layer, mode, carry_bits)?;
        inputs.push(std::mem::replace(&mut x, out.activation));
        pre.push(out.preactivation);
    }
    Ok(Trace {
        output: x.to_real(),
        preactivations: pre,
        inputs,
    })
}

/// Real-valued network output (logits) for a `[batch, features]` input.
pub fn forward(model: &ModelManifest, input: &RealTensor, mode: AccMode) -> Result<RealTensor> {
    forward_trace(model, input, mode, false).map(|t| t.output)
}

/// Row-wise argmax.
pub fn predictions(logits: &RealTensor) -> Vec<usize> {
    let cols = logits.shape.get(1).copied().unwrap_or(1).max(1);
    logits
        .values
        .chunks(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &RealTensor, labels: &[usize]) -> f64 {
    let p = predictions(logits);
    if p.is_empty() {
        return 0.0;
    }
    p.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / p.len() as f64
}

/// Whether `|z| > 2^(b-1) - 1`, i.e. `z` leaves the symmetric `b`-bit range.
#[inline]
pub fn overflows(z: i64, bits: u32) -> bool {
    z.unsigned_abs() > (1u64 << (bits - 1)) - 1
}

/// Per-layer fraction of neuron evaluations (over samples and neurons) whose
/// exact pre-activation overflows `bits`; `None` for full-precision layers.
pub fn overflow_rate(model: &ModelManifest, data: &RealTensor, bits: u32) -> Result<Vec<Option<f64>>> {
    if data.shape.first().copied().unwrap_or(0) == 0 {
        return Err(Error::EmptyBatch);
    }
    let trace = forward_trace(model, data, AccMode::Exact32, false)?;
    Ok(trace
        .preactivations
        .iter()
        .map(|z| {
            z.as_ref().map(|z| {
                z.iter().filter(|&&v| overflows(v, bits)).count() as f64 / z.len().max(1) as f64
            })
        })
        .collect())
}

/// Mean hinge `max(|z| - 2^(b-1), 0)` and its gradient.
///
/// The subgradient is 0 on the hinge itself.
pub fn overflow_penalty(z: &[f64], bits: u32) -> (f64, Vec<f64>) {
    if z.is_empty() {
        return (0.0, Vec::new());
    }
    let edge = (1u64 << (bits - 1)) as f64;
    let n = z.len() as f64;
    let mut total = 0.0;
    let grad = z
        .iter()
        .map(|&v| {
            let excess = v.abs() - edge;
            if excess > 0.0 {
                total += excess;
                v.signum() / n
            } else {
                0.0
            }
        })
        .collect();
    (total / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cyclic::Slope;

    fn unit(bits: u32) -> QuantScheme {
        QuantScheme::uniform(1.0, bits, true).unwrap()
    }

    fn linear(name: &str, w: Vec<i32>, out: usize, inp: usize, input: QuantScheme) -> LayerSpec {
        LayerSpec {
            name: name.into(),
            op: LayerOp::Linear,
            weights: Weights::Fixed(FixedTensor::new(vec![out, inp], w, unit(8)).unwrap()),
            input_scheme: Some(input),
            cyclic: None,
            scale: vec![1.0; out],
            shift: vec![0.0; out],
            relu: false,
            output_scheme: None,
            full_precision: false,
            carry_mean: None,
            buffered: false,
        }
    }

    #[test]
    fn identity_layer_is_identity() {
        let s = unit(8);
        let mut l = linear("id", vec![1, 0, 0, 0, 1, 0, 0, 0, 1], 3, 3, s);
        l.output_scheme = Some(s);
        let x = FixedTensor::new(vec![2, 3], vec![1, -2, 3, 127, 0, -128], s).unwrap();
        let out = forward_block(&Activation::Fixed(x.clone()), &l, AccMode::Exact32).unwrap();
        assert_eq!(out.activation, Activation::Fixed(x));
    }

    #[test]
    fn single_neuron_wraps_into_cyclic() {
        let s = QuantScheme::uniform(1.0, 16, true).unwrap();
        let mut l = linear("n", vec![1, 1, 1], 1, 3, s);
        l.cyclic = Some(CyclicSpec::smooth(8, 2.0).unwrap());
        let x = Activation::Real(RealTensor::new(vec![1, 3], vec![100.0; 3]).unwrap());
        for mode in [AccMode::Exact32, AccMode::Wrapped { bits: 8 }] {
            let (y, _) = forward_block_real(&x, &l, mode, None).unwrap();
            assert_eq!(y.values, vec![44.0]);
        }
    }

    #[test]
    fn wrapped_differs_exactly_on_overflowing_neurons() {
        let s = QuantScheme::uniform(1.0, 16, true).unwrap();
        let l = linear("n", vec![1, 1, 1, 1, -1, 1], 2, 3, s);
        let xs = [vec![10.0, 20.0, 30.0], vec![100.0, 50.0, 0.0], vec![-60.0, -60.0, -10.0]];
        for x in xs {
            let x = Activation::Real(RealTensor::new(vec![1, 3], x).unwrap());
            let exact = forward_block(&x, &l, AccMode::Exact32).unwrap().preactivation.unwrap();
            let wrapped = forward_block(&x, &l, AccMode::Wrapped { bits: 8 }).unwrap().preactivation.unwrap();
            for (e, w) in exact.iter().zip(&wrapped) {
                assert_eq!(e != w, e.abs() >= 128, "exact {e} wrapped {w}");
            }
        }
    }

    #[test]
    fn overflow_rate_example() {
        let s = QuantScheme::uniform(1.0, 16, true).unwrap();
        let l = linear("n", vec![1], 1, 1, s);
        let model = ModelManifest::new(8, 0, vec![l]).unwrap();
        let data = RealTensor::new(vec![4, 1], vec![100.0, 300.0, -300.0, 0.0]).unwrap();
        assert_eq!(overflow_rate(&model, &data, 8).unwrap(), vec![Some(0.5)]);
        let empty = RealTensor::new(vec![0, 1], vec![]).unwrap();
        assert!(matches!(overflow_rate(&model, &empty, 8), Err(Error::EmptyBatch)));
    }

    #[test]
    fn zero_weights_never_overflow() {
        let s = QuantScheme::uniform(1.0, 16, true).unwrap();
        let model = ModelManifest::new(8, 0, vec![linear("z", vec![0; 4], 2, 2, s)]).unwrap();
        let data = RealTensor::new(vec![2, 2], vec![3e4, -3e4, 1.0, 2.0]).unwrap();
        assert_eq!(overflow_rate(&model, &data, 8).unwrap(), vec![Some(0.0)]);
    }

    #[test]
    fn penalty_examples() {
        let (v, g) = overflow_penalty(&[100.0, -200.0, 300.0], 8);
        assert!((v - 244.0 / 3.0).abs() < 1e-12);
        assert_eq!(g, vec![0.0, -1.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(overflow_penalty(&[127.0, -127.0, 0.0], 8).0, 0.0);
        assert_eq!(overflow_penalty(&[128.0], 8).1, vec![0.0]);
    }

    #[test]
    fn adjacent_scheme_mismatch_is_rejected() {
        let a = linear("a", vec![1], 1, 1, unit(8));
        let b = linear("b", vec![1], 1, 1, unit(4));
        assert!(matches!(ModelManifest::new(8, 0, vec![a, b]), Err(Error::InconsistentModel(_))));
    }

    #[test]
    fn cyclic_bits_must_match_accumulator() {
        let mut a = linear("a", vec![1], 1, 1, unit(8));
        a.cyclic = Some(CyclicSpec::new(12, Slope::Finite(2.0), crate::cyclic::CyclicKind::SmoothModulo).unwrap());
        assert!(ModelManifest::new(8, 0, vec![a.clone()]).is_err());
        a.buffered = true;
        a.cyclic = Some(CyclicSpec::smooth(7, 2.0).unwrap());
        assert!(ModelManifest::new(8, 0, vec![a]).is_ok());
    }

    #[test]
    fn carry_counts_match_ledger() {
        let x = [1, 2, 3, 0];
        let w = [-1, -1, 1, 1, 1, 1, 1, 1];
        let n = carry_counts(&x, 1, &w, 2, 8).unwrap();
        let direct = crate::packing::carry_count(&[-1, -2, 3, 0], 8).unwrap().carries;
        assert_eq!(n, vec![direct, 0]);
    }
}
