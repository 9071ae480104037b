use crate::error::{Error, Result};
use crate::fxp::{quantize_uniform, FixedTensor, QuantScheme, RealTensor, MAX_QUANT_BITS};
use crate::kernels::{gemm_raw, AccMode};

use super::{forward_block_real, overflows, Activation, LayerOp, ModelManifest, Weights};

/// Bisection steps before giving up on the tolerance.
pub const CALIBRATION_ITERATIONS: usize = 40;
/// Acceptable distance (absolute fraction) between measured and target rate.
pub const CALIBRATION_TOLERANCE: f64 = 0.005;
/// Percentile of the activations that sets the activation range.
pub const RANGE_PERCENTILE: f64 = 99.9;

/// Outcome of a step-size search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub step_size: f64,
    pub bits: u32,
    /// Measured overflow rate at `step_size`, as a fraction.
    pub rate: f64,
    /// Whether the measured rate is within 1% absolute of the target.
    pub reachable: bool,
    pub iterations: usize,
}

impl Calibration {
    pub fn scheme(&self) -> Result<QuantScheme> {
        QuantScheme::uniform(self.step_size, self.bits, false)
    }
}

/// Nearest-rank percentile (`q` in percent).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    // The small slack keeps exact ranks like 99.9% of 1000 from rounding up.
    let rank = (q * v.len() as f64 / 100.0 - 1e-9).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// `ceil(log2(ceil(q / Δ) + 1))`, at least 1 and at most the quantizer limit.
pub fn activation_bits(q: f64, step: f64) -> u32 {
    let levels = (q / step).ceil().max(0.0) + 1.0;
    (levels.log2().ceil() as u32).clamp(1, MAX_QUANT_BITS)
}

fn unsigned_scheme(q: f64, step: f64) -> Result<QuantScheme> {
    QuantScheme::uniform(step, activation_bits(q, step), false)
}

/// Overflow rate of `x · W^T` for activations quantized with `scheme`.
fn layer_rate(acts: &RealTensor, weights: &FixedTensor, scheme: QuantScheme, bits: u32) -> Result<(usize, usize)> {
    let xq = quantize_uniform(&acts.values, acts.shape.clone(), scheme)?;
    let (out, k) = (weights.shape()[0], weights.shape()[1]);
    let batch = acts.shape[0];
    let mut wt = vec![0i32; k * out];
    for o in 0..out {
        for i in 0..k {
            wt[i * out + o] = weights.values()[o * k + i];
        }
    }
    let z = gemm_raw(xq.values(), &wt, batch, k, out, AccMode::Exact32)?.data;
    Ok((z.iter().filter(|&&v| overflows(v, bits)).count(), z.len()))
}

/// Geometric bisection for the smallest step whose rate does not exceed the
/// target. `rate` must be (roughly) non-increasing in the step.
fn search(max_abs: f64, target: f64, mut rate: impl FnMut(f64) -> Result<f64>) -> Result<(f64, f64, bool, usize)> {
    let mut lo = max_abs / (1u64 << 20) as f64;
    let mut hi = 4.0 * max_abs;
    let mut r_hi = rate(hi)?;
    if r_hi > target {
        return Ok((hi, r_hi, false, 0));
    }
    let r_lo = rate(lo)?;
    if r_lo <= target {
        return Ok((lo, r_lo, (target - r_lo) <= 0.01, 0));
    }
    let mut iterations = 0;
    while iterations < CALIBRATION_ITERATIONS && target - r_hi > CALIBRATION_TOLERANCE {
        let mid = (lo * hi).sqrt();
        let r = rate(mid)?;
        if r <= target {
            hi = mid;
            r_hi = r;
        } else {
            lo = mid;
        }
        iterations += 1;
    }
    Ok((hi, r_hi, (target - r_hi) <= 0.01, iterations))
}

fn check_target(p_target: f64) -> Result<f64> {
    if !(0.0..=50.0).contains(&p_target) {
        return Err(Error::Config(vec![format!(
            "p_target must lie in [0, 50] percent, got {p_target}"
        )]));
    }
    Ok(p_target / 100.0)
}

/// Chooses the activation step size `Δ_x` of a linear layer so that about
/// `p_target` percent of its pre-activations overflow a `bits`-wide
/// accumulator.
///
/// `acts` are the real (post-ReLU) inputs of the layer, `[batch, in]`. The
/// rate at each candidate step is measured with the activation bitwidth that
/// step implies. Returns the smallest step meeting the target; when even the
/// coarsest step misses it, that step is returned with `reachable = false`.
pub fn calibrate_step_size(acts: &RealTensor, weights: &FixedTensor, p_target: f64, bits: u32) -> Result<Calibration> {
    let target = check_target(p_target)?;
    if acts.values.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if weights.shape().len() != 2 || acts.shape.len() != 2 || acts.shape[1] != weights.shape()[1] {
        return Err(Error::Shape(format!(
            "activations {:?} do not match weights {:?}",
            acts.shape,
            weights.shape()
        )));
    }
    let q = percentile(&acts.values, RANGE_PERCENTILE);
    let max_abs = acts.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        return Ok(Calibration {
            step_size: 1.0,
            bits: 1,
            rate: 0.0,
            reachable: target <= 0.01,
            iterations: 0,
        });
    }
    let (step, rate, reachable, iterations) = search(max_abs, target, |step| {
        let (hit, n) = layer_rate(acts, weights, unsigned_scheme(q, step)?, bits)?;
        Ok(hit as f64 / n as f64)
    })?;
    Ok(Calibration {
        step_size: step,
        bits: activation_bits(q, step),
        rate,
        reachable,
        iterations,
    })
}

/// Calibration result for one layer of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCalibration {
    pub layer: usize,
    pub name: String,
    pub calibration: Calibration,
}

/// Calibrates every quantized layer's input step size front to back on
/// `data`, updating the model's schemes in place.
///
/// Each layer sees activations produced by the already-calibrated layers in
/// front of it. With `shared`, one step size is searched for all quantized
/// layers at once against the pooled overflow rate.
pub fn calibrate_model(model: &mut ModelManifest, data: &RealTensor, p_target: f64, shared: bool) -> Result<Vec<LayerCalibration>> {
    let target = check_target(p_target)?;
    if data.shape.first().copied().unwrap_or(0) == 0 {
        return Err(Error::EmptyBatch);
    }
    for (i, l) in model.layers.iter().enumerate() {
        if !l.full_precision && !matches!(l.op, LayerOp::Linear) {
            return Err(Error::Unsupported(format!("calibrating conv layer {i}")));
        }
    }
    let bits = model.accumulator_bits;
    if !shared {
        let mut report = Vec::new();
        let mut prev = data.clone();
        for i in 0..model.layers.len() {
            let x = if let Weights::Fixed(w) = &model.layers[i].weights {
                let cal = calibrate_step_size(&prev, w, p_target, model.layers[i].accumulator_bits(bits))?;
                set_input_scheme(model, i, cal.scheme()?);
                report.push(LayerCalibration {
                    layer: i,
                    name: model.layers[i].name.clone(),
                    calibration: cal,
                });
                Activation::Real(prev)
            } else {
                input_for(&model.layers[i].input_scheme, prev)?
            };
            prev = forward_block_real(&x, &model.layers[i], AccMode::Exact32, None)?.0;
        }
        model.validate()?;
        return Ok(report);
    }

    let quantized: Vec<usize> = (0..model.layers.len()).filter(|&i| !model.layers[i].full_precision).collect();
    if quantized.is_empty() {
        return Ok(Vec::new());
    }
    // Run the chain once with the current schemes to size the search window.
    let mut max_abs = 0.0f64;
    {
        let mut prev = data.clone();
        for l in &model.layers {
            if !l.full_precision {
                max_abs = prev.values.iter().fold(max_abs, |m, v| m.max(v.abs()));
            }
            let x = match l.full_precision {
                true => input_for(&l.input_scheme, prev)?,
                false => Activation::Real(prev),
            };
            prev = forward_block_real(&x, l, AccMode::Exact32, None)?.0;
        }
    }
    let mut per_layer = Vec::new();
    let pooled = |step: f64, model: &mut ModelManifest, per_layer: &mut Vec<(usize, Calibration)>| -> Result<f64> {
        per_layer.clear();
        let (mut hit, mut total) = (0usize, 0usize);
        let mut prev = data.clone();
        for i in 0..model.layers.len() {
            let x = if let Weights::Fixed(w) = &model.layers[i].weights {
                let q = percentile(&prev.values, RANGE_PERCENTILE);
                let scheme = unsigned_scheme(q, step)?;
                let (h, n) = layer_rate(&prev, w, scheme, model.layers[i].accumulator_bits(bits))?;
                hit += h;
                total += n;
                set_input_scheme(model, i, scheme);
                per_layer.push((
                    i,
                    Calibration {
                        step_size: step,
                        bits: scheme.bits(),
                        rate: h as f64 / n as f64,
                        reachable: true,
                        iterations: 0,
                    },
                ));
                Activation::Real(prev)
            } else {
                input_for(&model.layers[i].input_scheme, prev)?
            };
            prev = forward_block_real(&x, &model.layers[i], AccMode::Exact32, None)?.0;
        }
        Ok(hit as f64 / total.max(1) as f64)
    };
    let (step, _, reachable, iterations) = if max_abs == 0.0 {
        (1.0, 0.0, target <= 0.01, 0)
    } else {
        let mut scratch = model.clone();
        search(max_abs, target, |s| pooled(s, &mut scratch, &mut Vec::new()))?
    };
    pooled(step, model, &mut per_layer)?;
    model.validate()?;
    Ok(per_layer
        .into_iter()
        .map(|(i, mut cal)| {
            cal.reachable = reachable;
            cal.iterations = iterations;
            LayerCalibration {
                layer: i,
                name: model.layers[i].name.clone(),
                calibration: cal,
            }
        })
        .collect())
}

fn set_input_scheme(model: &mut ModelManifest, i: usize, scheme: QuantScheme) {
    model.layers[i].input_scheme = Some(scheme);
    if i > 0 {
        model.layers[i - 1].output_scheme = Some(scheme);
    }
}

fn input_for(scheme: &Option<QuantScheme>, prev: RealTensor) -> Result<Activation> {
    Ok(match scheme {
        Some(s) => Activation::Fixed(quantize_uniform(&prev.values, prev.shape.clone(), *s)?),
        None => Activation::Real(prev),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(out: usize, inp: usize) -> FixedTensor {
        FixedTensor::new(vec![out, inp], vec![1; out * inp], QuantScheme::binary(1.0).unwrap()).unwrap()
    }

    #[test]
    fn bits_formula() {
        assert_eq!(activation_bits(7.0, 1.0), 3);
        assert_eq!(activation_bits(6.5, 1.0), 3);
        assert_eq!(activation_bits(7.5, 1.0), 4);
        assert_eq!(activation_bits(8.0, 1.0), 4);
        assert_eq!(activation_bits(0.1, 1.0), 1);
        assert_eq!(activation_bits(0.0, 1.0), 1);
        assert_eq!(activation_bits(1e9, 1e-9), MAX_QUANT_BITS);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=1000).map(f64::from).collect();
        assert_eq!(percentile(&v, 99.9), 999.0);
        assert_eq!(percentile(&v, 50.0), 500.0);
        assert_eq!(percentile(&[3.0], 99.9), 3.0);
    }

    #[test]
    fn zero_target_picks_one_bit() {
        let acts = RealTensor::new(vec![4, 2], vec![0.5, 1.0, 2.0, 0.0, 3.0, 3.5, 1.5, 0.25]).unwrap();
        let cal = calibrate_step_size(&acts, &ones(1, 2), 0.0, 8).unwrap();
        assert_eq!(cal.rate, 0.0);
        assert!(cal.reachable);
        assert_eq!(cal.bits, 1);
    }

    #[test]
    fn median_target_on_uniform_magnitudes() {
        // One input, weight 1: z = round(x / Δ) overflows when it exceeds 127,
        // so p = 50 puts 127.5 Δ near the median magnitude.
        let acts: Vec<f64> = (1..=999).map(|i| i as f64).collect();
        let acts = RealTensor::new(vec![999, 1], acts).unwrap();
        let cal = calibrate_step_size(&acts, &ones(1, 1), 50.0, 8).unwrap();
        assert!(cal.reachable);
        assert!((cal.rate - 0.5).abs() <= 0.01, "rate {}", cal.rate);
        let edge = 127.5 * cal.step_size;
        assert!((edge - 500.0).abs() < 15.0, "edge {edge}");
        // Brute force over the sample: fraction of values quantizing above 127.
        let brute = (1..=999)
            .filter(|&i| (i as f64 / cal.step_size).round() > 127.0)
            .count() as f64
            / 999.0;
        assert_eq!(brute, cal.rate);
    }

    #[test]
    fn doubling_inputs_doubles_step() {
        let acts: Vec<f64> = (0..400).map(|i| ((i * 37) % 101) as f64 / 7.0).collect();
        let a = RealTensor::new(vec![100, 4], acts.clone()).unwrap();
        let b = RealTensor::new(vec![100, 4], acts.iter().map(|v| 2.0 * v).collect()).unwrap();
        let w = ones(3, 4);
        for p in [2.0, 5.0, 20.0] {
            let ca = calibrate_step_size(&a, &w, p, 6).unwrap();
            let cb = calibrate_step_size(&b, &w, p, 6).unwrap();
            assert_eq!(cb.step_size, 2.0 * ca.step_size);
            assert_eq!((ca.bits, ca.rate), (cb.bits, cb.rate));
        }
    }

    #[test]
    fn bad_inputs() {
        let acts = RealTensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(calibrate_step_size(&acts, &ones(1, 2), 60.0, 8), Err(Error::Config(_))));
        let empty = RealTensor::new(vec![0, 2], vec![]).unwrap();
        assert!(matches!(calibrate_step_size(&empty, &ones(1, 2), 5.0, 8), Err(Error::EmptyBatch)));
    }
}
