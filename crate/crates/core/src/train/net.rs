//! The trainable MLP and its hand-written batched backward pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cyclic::CyclicSpec;
use crate::error::{Error, Result};
use crate::fxp::{quantize_binary, quantize_ternary, quantize_uniform, wrap, FixedTensor, QuantScheme};
use crate::kernels::dense_f64;
use crate::netgraph::{affine_relu, carry_counts, overflow_penalty, overflows};
use crate::packing::soft_carry_slope;

/// Temperature of the soft carry surrogate used for the carry regularizer.
pub const CARRY_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layer {
    pub quantized: bool,
    pub inputs: usize,
    pub outputs: usize,
    /// Latent weights, `[outputs, inputs]`.
    pub w: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    mw: Vec<f64>,
    mg: Vec<f64>,
    mb: Vec<f64>,
    pub relu: bool,
    pub weight_bits: u32,
    /// `Δ_x` of the incoming activations.
    pub act_step: f64,
    /// Activation bits once calibrated; before that inputs stay real.
    pub act_bits: Option<u32>,
    pub cyclic: Option<CyclicSpec>,
    pub carry_sim: bool,
    pub carry_mean: Vec<f64>,
    pub buffered: bool,
}

impl Layer {
    fn new(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize, quantized: bool, relu: bool, weight_bits: u32) -> Self {
        let w: Vec<f64> = if quantized {
            let a = 2.0 * (2.0 / inputs as f64).sqrt();
            (0..inputs * outputs).map(|_| rng.gen_range(-a..a)).collect()
        } else {
            let sd = if relu { (2.0 / inputs as f64).sqrt() } else { (1.0 / inputs as f64).sqrt() };
            let n = Normal::new(0.0, sd).expect("positive sd");
            (0..inputs * outputs).map(|_| n.sample(rng)).collect()
        };
        Layer {
            quantized,
            inputs,
            outputs,
            mw: vec![0.0; w.len()],
            w,
            gamma: vec![1.0; outputs],
            beta: vec![0.0; outputs],
            mg: vec![0.0; outputs],
            mb: vec![0.0; outputs],
            relu,
            weight_bits,
            act_step: 1.0,
            act_bits: None,
            cyclic: None,
            carry_sim: false,
            carry_mean: vec![0.0; outputs],
            buffered: false,
        }
    }

    /// Quantized weights: binary for 1 bit, ternary for 2, symmetric uniform above.
    pub fn weight_tensor(&self) -> Result<FixedTensor> {
        let shape = vec![self.outputs, self.inputs];
        match self.weight_bits {
            1 => quantize_binary(&self.w, shape),
            2 => quantize_ternary(&self.w, shape),
            b @ 3..=5 => {
                let max = self.w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if max == 0.0 {
                    return Err(Error::DegenerateScale("all weights are zero".into()));
                }
                let levels = ((1u32 << (b - 1)) - 1) as f64;
                quantize_uniform(&self.w, shape, QuantScheme::uniform(max / levels, b, true)?)
            }
            b => Err(Error::Config(vec![format!("weight bits {b} outside [1, 5]")])),
        }
    }

    pub fn input_scheme(&self) -> Result<Option<QuantScheme>> {
        self.act_bits
            .map(|b| QuantScheme::uniform(self.act_step, b, false))
            .transpose()
    }

    /// Accumulator bits available to this layer.
    pub fn acc_bits(&self, model_bits: u32) -> u32 {
        model_bits - self.buffered as u32
    }
}

/// Per-pass switches.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Pass {
    /// Round calibrated activations; otherwise they are only rescaled.
    pub quantize_acts: bool,
    /// Wrap pre-activations to this accumulator width (evaluation only).
    pub wrap_bits: Option<u32>,
    pub acc_bits: u32,
    pub lambda_overflow: f64,
    pub lambda_carry: f64,
    pub update_carry_mean: bool,
    /// Compute carry counts even when nothing else needs them.
    pub need_counts: bool,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct LayerCache {
    /// Layer input after scaling/quantization (codes for quantized layers).
    pub x: Vec<f64>,
    /// `d x / d input` per element.
    dxdh: Vec<f64>,
    codes: Vec<f64>,
    dw_step: f64,
    dz_step: f64,
    /// Accumulator output before any carry offset.
    pub z: Vec<f64>,
    zeff: Vec<f64>,
    a: Vec<f64>,
    h: Vec<f64>,
    pub counts: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub(crate) struct Cache {
    pub batch: usize,
    pub layers: Vec<LayerCache>,
}

impl Cache {
    pub fn logits(&self) -> &[f64] {
        &self.layers.last().expect("non-empty network").h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Net {
    pub layers: Vec<Layer>,
    pub classes: usize,
}

/// Gradients of every parameter, in layer order.
pub(crate) struct Grads {
    w: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

/// Regularizer values of one pass.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Penalties {
    pub overflow: f64,
    pub carry: f64,
}

impl Net {
    /// Full-precision input layer, `quantized` hidden layers, full-precision head.
    pub fn new(rng: &mut ChaCha8Rng, features: usize, hidden: usize, quantized: usize, classes: usize, weight_bits: u32, full_precision: bool) -> Self {
        let mut layers = vec![Layer::new(rng, features, hidden, false, true, weight_bits)];
        for _ in 0..quantized {
            layers.push(Layer::new(rng, hidden, hidden, !full_precision, true, weight_bits));
        }
        layers.push(Layer::new(rng, hidden, classes, false, false, weight_bits));
        Net { layers, classes }
    }

    pub fn forward(&mut self, input: &[f64], pass: Pass) -> Result<Cache> {
        let batch = input.len() / self.layers[0].inputs;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h: Vec<f64> = input.to_vec();
        for layer in &mut self.layers {
            let c = forward_layer(layer, &h, batch, pass)?;
            h = c.h.clone();
            caches.push(c);
        }
        Ok(Cache { batch, layers: caches })
    }

    /// Gradients of `mean CE + λ_o Σ R^o + λ_c Σ R^c` for the batch in `cache`.
    pub fn backward(&self, cache: &Cache, labels: &[usize], pass: Pass) -> Result<Grads> {
        let batch = cache.batch;
        let classes = self.classes;
        let logits = cache.logits();
        let mut dh = vec![0.0; logits.len()];
        for s in 0..batch {
            let row = &logits[s * classes..(s + 1) * classes];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = e.iter().sum();
            for c in 0..classes {
                let p = e[c] / sum;
                dh[s * classes + c] = (p - (labels[s] == c) as u8 as f64) / batch as f64;
            }
        }
        let n = self.layers.len();
        let mut grads = Grads {
            w: vec![Vec::new(); n],
            g: vec![Vec::new(); n],
            b: vec![Vec::new(); n],
        };
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let c = &cache.layers[l];
            let (o_n, i_n) = (layer.outputs, layer.inputs);
            let mut dg = vec![0.0; o_n];
            let mut db = vec![0.0; o_n];
            let mut dz = vec![0.0; batch * o_n];
            for j in 0..batch * o_n {
                let o = j % o_n;
                let dy = if layer.relu && c.h[j] <= 0.0 { 0.0 } else { dh[j] };
                dg[o] += dy * c.a[j];
                db[o] += dy;
                let da = dy * layer.gamma[o];
                dz[j] = if layer.quantized {
                    let d = match &layer.cyclic {
                        Some(cyc) => cyc.derivative(c.zeff[j]),
                        None => 1.0,
                    };
                    da * c.dz_step * d
                } else {
                    da
                };
            }
            let weights = if layer.quantized { &c.codes } else { &layer.w };
            if layer.quantized && pass.lambda_overflow > 0.0 {
                let (_, g) = overflow_penalty(&c.z, layer.acc_bits(pass.acc_bits) );
                for (d, gv) in dz.iter_mut().zip(g) {
                    *d += pass.lambda_overflow * gv;
                }
            }
            let mut dw = vec![0.0; o_n * i_n];
            for s in 0..batch {
                let xr = &c.x[s * i_n..(s + 1) * i_n];
                for o in 0..o_n {
                    let d = dz[s * o_n + o];
                    if d != 0.0 {
                        for (w, &x) in dw[o * i_n..(o + 1) * i_n].iter_mut().zip(xr) {
                            *w += d * x;
                        }
                    }
                }
            }
            let mut dx = if l > 0 {
                let mut dx = vec![0.0; batch * i_n];
                for s in 0..batch {
                    let row = &mut dx[s * i_n..(s + 1) * i_n];
                    for o in 0..o_n {
                        let d = dz[s * o_n + o];
                        if d != 0.0 {
                            for (x, &w) in row.iter_mut().zip(&weights[o * i_n..(o + 1) * i_n]) {
                                *x += d * w;
                            }
                        }
                    }
                }
                dx
            } else {
                Vec::new()
            };
            if layer.quantized && pass.lambda_carry > 0.0 && !layer.buffered {
                if let Some(counts) = &c.counts {
                    carry_regularizer_grad(layer, c, counts, batch, pass, &mut dw, &mut dx);
                }
            }
            if layer.quantized {
                let inv = 1.0 / c.dw_step;
                dw.iter_mut().for_each(|v| *v *= inv);
            }
            if l > 0 {
                for (d, &k) in dx.iter_mut().zip(&c.dxdh) {
                    *d *= k;
                }
            }
            grads.w[l] = dw;
            grads.g[l] = dg;
            grads.b[l] = db;
            dh = dx;
        }
        Ok(grads)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(&l.gamma).chain(&l.beta).all(|v| v.is_finite()))
    }

    /// SGD with momentum; latent quantized weights are clipped to `[-1, 1]`.
    pub fn step(&mut self, grads: &Grads, lr: f64, momentum: f64) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            sgd(&mut layer.w, &mut layer.mw, &grads.w[l], lr, momentum);
            sgd(&mut layer.gamma, &mut layer.mg, &grads.g[l], lr, momentum);
            sgd(&mut layer.beta, &mut layer.mb, &grads.b[l], lr, momentum);
            if layer.quantized {
                layer.w.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
            }
        }
    }

    /// Regularizer values summed over quantized layers.
    pub fn penalties(&self, cache: &Cache, pass: Pass) -> Penalties {
        let mut p = Penalties::default();
        for (layer, c) in self.layers.iter().zip(&cache.layers) {
            if !layer.quantized {
                continue;
            }
            p.overflow += overflow_penalty(&c.z, layer.acc_bits(pass.acc_bits)).0;
            if let (Some(counts), false) = (&c.counts, layer.buffered) {
                p.carry += carry_variance(counts, cache.batch, layer.outputs).0.iter().sum::<f64>() / layer.outputs as f64;
            }
        }
        p
    }

    /// Fraction of quantized-layer pre-activations that overflow, per layer.
    pub fn overflow_rates(&self, cache: &Cache, acc_bits: u32) -> Vec<f64> {
        self.layers
            .iter()
            .zip(&cache.layers)
            .filter(|(l, _)| l.quantized)
            .map(|(l, c)| {
                let b = l.acc_bits(acc_bits);
                c.z.iter().filter(|&&z| overflows(z.round() as i64, b)).count() as f64 / c.z.len().max(1) as f64
            })
            .collect()
    }
}

fn sgd(p: &mut [f64], m: &mut [f64], g: &[f64], lr: f64, momentum: f64) {
    for ((p, m), &g) in p.iter_mut().zip(m.iter_mut()).zip(g) {
        *m = momentum * *m + g;
        *p -= lr * *m;
    }
}

/// Per-neuron `(variance, mean)` of carry counts over the batch.
pub(crate) fn carry_variance(counts: &[f64], batch: usize, outputs: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; outputs];
    for (j, &n) in counts.iter().enumerate() {
        mean[j % outputs] += n;
    }
    mean.iter_mut().for_each(|m| *m /= batch as f64);
    let mut var = vec![0.0; outputs];
    for (j, &n) in counts.iter().enumerate() {
        let d = n - mean[j % outputs];
        var[j % outputs] += d * d;
    }
    var.iter_mut().for_each(|v| *v /= batch as f64);
    (var, mean)
}

/// Adds `λ_c · d R^c / d(codes, inputs)` for `R^c = mean_o Var_s(n)`, routing
/// `d n / d v` through the soft carry slope of each product `v = x · w`.
fn carry_regularizer_grad(layer: &Layer, c: &LayerCache, counts: &[f64], batch: usize, pass: Pass, dw: &mut [f64], dx: &mut [f64]) {
    let (o_n, i_n) = (layer.outputs, layer.inputs);
    let bits = layer.acc_bits(pass.acc_bits);
    let half = 1i64 << (bits - 1);
    let p = (1u64 << bits) as f64;
    // Slope for every wrapped product value; at v = 0 the one-sided slope in
    // the direction the product moves is used.
    let table: Vec<f64> = (-half..half)
        .map(|v| soft_carry_slope(v as f64, bits, CARRY_TEMPERATURE))
        .collect();
    let up_at_zero = 1.0 / (p - 1.0);
    let slope = |v: f64, rising: bool| -> f64 {
        let v = wrap(v as i64, bits);
        if v == 0 && rising {
            up_at_zero
        } else {
            table[(v + half) as usize]
        }
    };
    let (_, mean) = carry_variance(counts, batch, o_n);
    let scale = pass.lambda_carry * 2.0 / (batch * o_n) as f64;
    let has_dx = !dx.is_empty();
    for s in 0..batch {
        let xr = &c.x[s * i_n..(s + 1) * i_n];
        for o in 0..o_n {
            let g = scale * (counts[s * o_n + o] - mean[o]);
            if g == 0.0 {
                continue;
            }
            let wr = &c.codes[o * i_n..(o + 1) * i_n];
            let dwr = &mut dw[o * i_n..(o + 1) * i_n];
            for i in 0..i_n {
                let (x, w) = (xr[i], wr[i]);
                let v = x * w;
                if x != 0.0 {
                    dwr[i] += g * x * slope(v, x > 0.0);
                }
                if has_dx && w != 0.0 {
                    dx[s * i_n + i] += g * w * slope(v, w > 0.0);
                }
            }
        }
    }
}

fn forward_layer(layer: &mut Layer, input: &[f64], batch: usize, pass: Pass) -> Result<LayerCache> {
    let (o_n, i_n) = (layer.outputs, layer.inputs);
    if input.len() != batch * i_n {
        return Err(Error::Shape(format!("layer expects {i_n} inputs per sample")));
    }
    if !layer.quantized {
        let z = dense_f64(input, &layer.w, i_n, o_n);
        let h = z
            .iter()
            .enumerate()
            .map(|(j, &p)| affine_relu(p, layer.gamma[j % o_n], layer.beta[j % o_n], layer.relu))
            .collect();
        return Ok(LayerCache {
            x: input.to_vec(),
            dxdh: vec![1.0; input.len()],
            a: z.clone(),
            zeff: Vec::new(),
            z,
            h,
            ..Default::default()
        });
    }

    let step = layer.act_step;
    let integer = pass.quantize_acts && layer.act_bits.is_some();
    let (x, dxdh): (Vec<f64>, Vec<f64>) = match (integer, layer.act_bits) {
        (true, Some(bits)) => {
            let hi = ((1u64 << bits) - 1) as f64;
            input
                .iter()
                .map(|&v| {
                    let r = v / step;
                    let q = r.round();
                    let q = if q.is_nan() { 0.0 } else { q.clamp(0.0, hi) };
                    let inside = (0.0..=hi).contains(&r);
                    (q, if inside { 1.0 / step } else { 0.0 })
                })
                .unzip()
        }
        _ => input.iter().map(|&v| (v / step, 1.0 / step)).unzip(),
    };
    let wt = layer.weight_tensor()?;
    let codes: Vec<f64> = wt.values().iter().map(|&v| v as f64).collect();
    let dw_step = wt.scheme().step_size();
    let dz_step = dw_step * step;
    let mut z = dense_f64(&x, &codes, i_n, o_n);
    let bits = layer.acc_bits(pass.acc_bits);
    if let (Some(wb), true) = (pass.wrap_bits, integer) {
        let wb = wb - layer.buffered as u32;
        z.iter_mut().for_each(|v| *v = wrap(*v as i64, wb) as f64);
    }
    let want_counts = integer
        && !layer.buffered
        && (layer.carry_sim || pass.lambda_carry > 0.0 || pass.need_counts);
    let counts = if want_counts {
        let xi: Vec<i32> = x.iter().map(|&v| v as i32).collect();
        let n = carry_counts(&xi, batch, wt.values(), o_n, bits)?;
        Some(n.into_iter().map(|v| v as f64).collect::<Vec<f64>>())
    } else {
        None
    };
    let zeff = match (&counts, layer.carry_sim && integer && !layer.buffered) {
        (Some(n), true) => {
            let out: Vec<f64> = z
                .iter()
                .zip(n)
                .enumerate()
                .map(|(j, (&zj, &nj))| zj + nj - layer.carry_mean[j % o_n].round())
                .collect();
            if pass.update_carry_mean {
                let (_, mean) = carry_variance(n, batch, o_n);
                for (m, bm) in layer.carry_mean.iter_mut().zip(mean) {
                    *m = crate::packing::DEFAULT_CARRY_MOMENTUM * *m + (1.0 - crate::packing::DEFAULT_CARRY_MOMENTUM) * bm;
                }
            }
            out
        }
        _ => z.clone(),
    };
    let mut a = Vec::with_capacity(zeff.len());
    let mut h = Vec::with_capacity(zeff.len());
    for (j, &ze) in zeff.iter().enumerate() {
        let o = j % o_n;
        let cv = match &layer.cyclic {
            Some(cyc) => cyc.apply(ze),
            None => ze,
        };
        let av = cv * dz_step;
        a.push(av);
        h.push(affine_relu(av, layer.gamma[o], layer.beta[o], layer.relu));
    }
    Ok(LayerCache {
        x,
        dxdh,
        codes,
        dw_step,
        dz_step,
        z,
        zeff,
        a,
        h,
        counts,
    })
}
