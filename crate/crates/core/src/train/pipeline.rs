use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cyclic::{CyclicKind, CyclicSpec, Slope};
use crate::error::{Error, Result};
use crate::fxp::{QuantScheme, RealTensor};
use crate::netgraph::{
    calibrate_model, percentile, LayerCalibration, LayerOp, LayerSpec, ModelManifest, Weights,
    RANGE_PERCENTILE,
};

use super::dataset::{Dataset, Split};
use super::net::{carry_variance, Cache, Net, Pass};

/// Validation accuracy within this margin of chance counts as a failed epoch.
pub const DIVERGENCE_MARGIN: f64 = 0.02;
/// Consecutive failed epochs that abort training.
pub const DIVERGENCE_PATIENCE: usize = 10;
/// Bits of the placeholder activation scheme exported before calibration.
pub const PROVISIONAL_BITS: u32 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageEpochs {
    pub pretrain: usize,
    pub warmup: usize,
    pub finetune: usize,
}

impl Default for StageEpochs {
    fn default() -> Self {
        StageEpochs {
            pretrain: 30,
            warmup: 5,
            finetune: 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageRates {
    pub pretrain: f64,
    pub warmup: f64,
    pub finetune: f64,
}

impl Default for StageRates {
    fn default() -> Self {
        StageRates {
            pretrain: 0.05,
            warmup: 0.02,
            finetune: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub samples: usize,
    pub difficulty: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            samples: 3000,
            difficulty: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Run the layer-by-layer carry adaptation after fine-tuning.
    pub enabled: bool,
    /// Validation accuracy drop (percentage points) that switches the
    /// remaining layers to buffer-bit mode.
    pub drop_threshold: f64,
    pub epochs_per_layer: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            enabled: false,
            drop_threshold: 3.0,
            epochs_per_layer: 4,
        }
    }
}

/// Training configuration; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub accumulator_bits: u32,
    /// 1 binary, 2 ternary, 3 to 5 uniform.
    pub weight_bits: u32,
    pub hidden: usize,
    pub quantized_layers: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub epochs: StageEpochs,
    pub lr: StageRates,
    /// Target overflow rate, percent.
    pub p_target: f64,
    /// Transition slope `k`, or `inf`.
    pub slope: String,
    /// Cyclic activation kind, or `none`.
    pub cyclic: String,
    pub lambda_overflow: f64,
    pub lambda_carry: f64,
    /// Fine-tune with simulated carries on every quantized layer.
    pub simulate_carries: bool,
    /// One activation step size for all quantized layers.
    pub shared_step: bool,
    pub calibration_samples: usize,
    /// Stop after this stage: pretrain, calibrate, warmup or finetune.
    pub last_stage: String,
    /// Keep every weight real (reference baseline; pretrain only).
    pub full_precision: bool,
    pub dataset: DatasetConfig,
    pub schedule: ScheduleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            accumulator_bits: 8,
            weight_bits: 1,
            hidden: 96,
            quantized_layers: 2,
            batch_size: 64,
            momentum: 0.9,
            epochs: StageEpochs::default(),
            lr: StageRates::default(),
            p_target: 5.0,
            slope: "2".into(),
            cyclic: "smooth_modulo".into(),
            lambda_overflow: 0.01,
            lambda_carry: 0.0,
            simulate_carries: false,
            shared_step: false,
            calibration_samples: 1024,
            last_stage: "finetune".into(),
            full_precision: false,
            dataset: DatasetConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

pub const STAGES: [&str; 4] = ["pretrain", "calibrate", "warmup", "finetune"];

impl TrainConfig {
    /// Checks every field, reporting all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(4..=32).contains(&self.accumulator_bits) {
            bad.push(format!("accumulator_bits = {} (expected 4..=32)", self.accumulator_bits));
        }
        if !(1..=5).contains(&self.weight_bits) {
            bad.push(format!("weight_bits = {} (expected 1..=5)", self.weight_bits));
        }
        if self.hidden == 0 {
            bad.push("hidden must be positive".into());
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bad.push(format!("momentum = {} (expected [0, 1))", self.momentum));
        }
        for (name, v) in [
            ("lr.pretrain", self.lr.pretrain),
            ("lr.warmup", self.lr.warmup),
            ("lr.finetune", self.lr.finetune),
        ] {
            if !(v.is_finite() && v > 0.0) {
                bad.push(format!("{name} = {v} (expected > 0)"));
            }
        }
        if !(0.0..=50.0).contains(&self.p_target) {
            bad.push(format!("p_target = {} (expected 0..=50 percent)", self.p_target));
        }
        if self.slope.parse::<Slope>().is_err() {
            bad.push(format!("slope = `{}` (expected a number >= 1 or `inf`)", self.slope));
        }
        if self.cyclic != "none" && self.cyclic.parse::<CyclicKind>().is_err() {
            bad.push(format!("cyclic = `{}` (expected a cyclic kind or `none`)", self.cyclic));
        }
        if !(self.lambda_overflow.is_finite() && self.lambda_overflow >= 0.0) {
            bad.push(format!("lambda_overflow = {} (expected >= 0)", self.lambda_overflow));
        }
        if !(self.lambda_carry.is_finite() && self.lambda_carry >= 0.0) {
            bad.push(format!("lambda_carry = {} (expected >= 0)", self.lambda_carry));
        }
        if self.calibration_samples == 0 {
            bad.push("calibration_samples must be positive".into());
        }
        if !STAGES.contains(&self.last_stage.as_str()) {
            bad.push(format!("last_stage = `{}` (expected one of {STAGES:?})", self.last_stage));
        }
        if self.full_precision && self.last_stage != "pretrain" {
            bad.push("full_precision models only run the pretrain stage".into());
        }
        if self.dataset.samples < 10 {
            bad.push(format!("dataset.samples = {} (expected >= 10)", self.dataset.samples));
        }
        if !(0.0..=1.0).contains(&self.dataset.difficulty) {
            bad.push(format!("dataset.difficulty = {} (expected 0..=1)", self.dataset.difficulty));
        }
        if self.schedule.drop_threshold.is_nan() || self.schedule.drop_threshold < 0.0 {
            bad.push(format!("schedule.drop_threshold = {} (expected >= 0)", self.schedule.drop_threshold));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    /// Cyclic activation for a `bits`-wide accumulator, if any.
    pub fn cyclic_spec(&self, bits: u32) -> Result<Option<CyclicSpec>> {
        if self.cyclic == "none" {
            return Ok(None);
        }
        let kind: CyclicKind = self.cyclic.parse()?;
        CyclicSpec::new(bits, self.slope.parse()?, kind).map(Some)
    }

    fn runs(&self, stage: &str) -> bool {
        let pos = |s: &str| STAGES.iter().position(|&t| t == s).unwrap_or(usize::MAX);
        pos(stage) <= pos(&self.last_stage)
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: String,
    pub epoch: usize,
    /// Validation accuracy.
    pub acc: f64,
    /// Mean over quantized layers of the overflow fraction.
    pub overflow_rate: f64,
    /// Mean per-neuron carry standard deviation, once activations are integer.
    pub carry_std: Option<f64>,
    #[serde(rename = "R_o")]
    pub r_o: f64,
    #[serde(rename = "R_c")]
    pub r_c: Option<f64>,
    pub loss: f64,
}

/// Accuracy and statistics of the current model on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub acc: f64,
    pub overflow_rate: f64,
    /// Per quantized layer.
    pub layer_overflow: Vec<f64>,
    pub carry_std: Option<f64>,
    /// Per quantized, unbuffered layer.
    pub layer_carry_std: Vec<f64>,
    pub r_o: f64,
    pub r_c: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CarryMode {
    Simulated,
    Buffered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    /// Network layer indices in the order they were adapted.
    pub order: Vec<usize>,
    /// Carry standard deviation of each adapted layer before adaptation.
    pub carry_std: Vec<f64>,
    /// Final mode per adapted layer, in `order`.
    pub modes: Vec<CarryMode>,
    pub reference_acc: f64,
    /// Validation accuracy after each step.
    pub step_acc: Vec<f64>,
}

/// Indices sorted by ascending carry standard deviation (stable).
pub fn schedule_order(stds: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..stds.len()).collect();
    idx.sort_by(|&a, &b| stds[a].total_cmp(&stds[b]));
    idx
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: ModelManifest,
    pub metrics: Vec<EpochMetrics>,
    pub calibration: Vec<LayerCalibration>,
    pub schedule: Option<ScheduleReport>,
    pub test: Evaluation,
}

/// Staged trainer. Cloning it forks the run, including the RNG state.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    net: Net,
    rng: ChaCha8Rng,
    metrics: Vec<EpochMetrics>,
    bad_epochs: usize,
    /// Activations are rounded (after warm-up).
    integer_acts: bool,
    provisional_steps: Vec<f64>,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: &Dataset) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = Net::new(
            &mut rng,
            data.features,
            config.hidden,
            config.quantized_layers,
            data.classes,
            config.weight_bits,
            config.full_precision,
        );
        let n = net.layers.len();
        Ok(Trainer {
            config,
            net,
            rng,
            metrics: Vec::new(),
            bad_epochs: 0,
            integer_acts: false,
            provisional_steps: vec![1.0; n],
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Adjusts settings for later stages (e.g. after a shared pretrain).
    pub fn config_mut(&mut self) -> &mut TrainConfig {
        &mut self.config
    }

    pub fn metrics(&self) -> &[EpochMetrics] {
        &self.metrics
    }

    /// Network indices of the quantized layers.
    pub fn quantized_layers(&self) -> Vec<usize> {
        (0..self.net.layers.len()).filter(|&i| self.net.layers[i].quantized).collect()
    }

    fn pass(&self, integer: bool, lambda_overflow: f64, lambda_carry: f64) -> Pass {
        Pass {
            quantize_acts: integer,
            wrap_bits: None,
            acc_bits: self.config.accumulator_bits,
            lambda_overflow,
            lambda_carry,
            update_carry_mean: false,
            need_counts: false,
        }
    }

    /// Runs the configured stages in order.
    pub fn run(&mut self, data: &Dataset) -> Result<TrainOutput> {
        self.pretrain(data)?;
        let mut calibration = Vec::new();
        if self.config.runs("calibrate") {
            calibration = self.calibrate(data)?;
            self.insert_cyclic()?;
        }
        if self.config.runs("warmup") {
            self.warmup(data)?;
        }
        let mut schedule = None;
        if self.config.runs("finetune") {
            self.finetune(data)?;
            if self.config.schedule.enabled {
                schedule = Some(self.adapt_carries(data, self.config.schedule.drop_threshold)?);
            }
        }
        Ok(TrainOutput {
            model: self.export()?,
            metrics: self.metrics.clone(),
            calibration,
            schedule,
            test: self.evaluate(&data.test)?,
        })
    }

    pub fn pretrain(&mut self, data: &Dataset) -> Result<()> {
        let pass = self.pass(false, 0.0, 0.0);
        self.train_epochs("pretrain", self.config.epochs.pretrain, self.config.lr.pretrain, pass, data)?;
        // Fine placeholder activation grids, so a pretrained export runs.
        let cache = self.forward(&data.train.x, self.pass(false, 0.0, 0.0))?;
        for l in self.quantized_layers() {
            let max = cache.layers[l].x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            self.provisional_steps[l] = if max > 0.0 { max / ((1u64 << PROVISIONAL_BITS) - 1) as f64 } else { 1.0 };
        }
        Ok(())
    }

    fn calibration_split(&self, data: &Dataset) -> Split {
        data.train.head(self.config.calibration_samples)
    }

    /// Overflow-rate calibration of every quantized layer's `Δ_x`.
    pub fn calibrate(&mut self, data: &Dataset) -> Result<Vec<LayerCalibration>> {
        let mut model = self.export()?;
        let split = self.calibration_split(data);
        let report = calibrate_model(&mut model, &split.tensor(), self.config.p_target, self.config.shared_step)?;
        for (l, spec) in model.layers.iter().enumerate() {
            if let (true, Some(s)) = (self.net.layers[l].quantized, spec.input_scheme) {
                self.net.layers[l].act_step = s.step_size();
                self.net.layers[l].act_bits = Some(s.bits());
            }
        }
        Ok(report)
    }

    /// Conventional range setting: `Δ_x = q99.9 / (2^bits - 1)` on the
    /// pretrained activations, no overflow target.
    pub fn calibrate_range(&mut self, data: &Dataset, act_bits: u32) -> Result<()> {
        let split = self.calibration_split(data);
        let cache = self.forward(&split.x, self.pass(false, 0.0, 0.0))?;
        for l in self.quantized_layers() {
            let layer = &mut self.net.layers[l];
            let acts: Vec<f64> = cache.layers[l].x.iter().map(|v| v * layer.act_step).collect();
            let q = percentile(&acts, RANGE_PERCENTILE);
            layer.act_step = if q > 0.0 { q / ((1u64 << act_bits) - 1) as f64 } else { 1.0 };
            layer.act_bits = Some(act_bits);
        }
        Ok(())
    }

    /// Conventional quantization-aware fine-tuning from a pretrained state:
    /// percentile range setting at `act_bits`, no cyclic activation, no
    /// regularizers.
    pub fn conventional(&mut self, data: &Dataset, act_bits: u32) -> Result<()> {
        self.config.cyclic = "none".into();
        self.config.lambda_overflow = 0.0;
        self.config.lambda_carry = 0.0;
        self.config.simulate_carries = false;
        for l in self.quantized_layers() {
            self.net.layers[l].cyclic = None;
        }
        self.calibrate_range(data, act_bits)?;
        self.finetune(data)
    }

    pub fn insert_cyclic(&mut self) -> Result<()> {
        let bits = self.config.accumulator_bits;
        for l in self.quantized_layers() {
            let layer = &mut self.net.layers[l];
            layer.cyclic = self.config.cyclic_spec(layer.acc_bits(bits))?;
        }
        Ok(())
    }

    /// Fine-tuning with real activations; the overflow penalty only applies
    /// with a shared step size.
    pub fn warmup(&mut self, data: &Dataset) -> Result<()> {
        let lo = if self.config.shared_step { self.config.lambda_overflow } else { 0.0 };
        let pass = self.pass(false, lo, 0.0);
        self.train_epochs("warmup", self.config.epochs.warmup, self.config.lr.warmup, pass, data)
    }

    /// Fine-tuning with quantized activations and both regularizers.
    pub fn finetune(&mut self, data: &Dataset) -> Result<()> {
        self.integer_acts = true;
        if self.config.simulate_carries {
            for l in self.quantized_layers() {
                self.net.layers[l].carry_sim = !self.net.layers[l].buffered;
            }
            self.init_carry_means(data)?;
        }
        let epochs = self.config.epochs.finetune;
        self.finetune_epochs("finetune", epochs, data)
    }

    fn finetune_epochs(&mut self, stage: &str, epochs: usize, data: &Dataset) -> Result<()> {
        self.integer_acts = true;
        let mut pass = self.pass(true, self.config.lambda_overflow, self.config.lambda_carry);
        pass.update_carry_mean = true;
        self.train_epochs(stage, epochs, self.config.lr.finetune, pass, data)
    }

    /// Sets each simulated layer's carry mean from a pass over the calibration samples.
    pub fn init_carry_means(&mut self, data: &Dataset) -> Result<()> {
        let split = self.calibration_split(data);
        let mut pass = self.pass(true, 0.0, 0.0);
        pass.need_counts = true;
        let cache = self.forward(&split.x, pass)?;
        for l in self.quantized_layers() {
            if let Some(n) = &cache.layers[l].counts {
                let layer = &mut self.net.layers[l];
                layer.carry_mean = carry_variance(n, cache.batch, layer.outputs).1;
            }
        }
        Ok(())
    }

    /// Layer-by-layer carry adaptation.
    ///
    /// Layers are visited in ascending order of carry standard deviation.
    /// Each gets carry simulation and a short fine-tune; once validation
    /// accuracy falls more than `threshold` points below the starting
    /// accuracy, that layer and all later ones switch to buffer-bit mode.
    pub fn adapt_carries(&mut self, data: &Dataset, threshold: f64) -> Result<ScheduleReport> {
        self.integer_acts = true;
        let reference_acc = self.evaluate(&data.val)?.acc;
        let split = self.calibration_split(data);
        let stats = self.evaluate(&split)?;
        let quantized: Vec<usize> = self
            .quantized_layers()
            .into_iter()
            .filter(|&l| !self.net.layers[l].buffered)
            .collect();
        let order: Vec<usize> = schedule_order(&stats.layer_carry_std)
            .into_iter()
            .map(|i| quantized[i])
            .collect();
        let carry_std: Vec<f64> = schedule_order(&stats.layer_carry_std)
            .into_iter()
            .map(|i| stats.layer_carry_std[i])
            .collect();
        let epochs = self.config.schedule.epochs_per_layer;
        let bits = self.config.accumulator_bits;
        let mut modes = Vec::new();
        let mut step_acc = Vec::new();
        for (pos, &l) in order.iter().enumerate() {
            self.net.layers[l].carry_sim = true;
            self.init_carry_means(data)?;
            self.finetune_epochs("adapt", epochs, data)?;
            let acc = self.evaluate(&data.val)?.acc;
            step_acc.push(acc);
            if (reference_acc - acc) * 100.0 > threshold {
                for &r in &order[pos..] {
                    let layer = &mut self.net.layers[r];
                    layer.carry_sim = false;
                    layer.buffered = true;
                    layer.cyclic = self.config.cyclic_spec(layer.acc_bits(bits))?;
                    modes.push(CarryMode::Buffered);
                }
                self.finetune_epochs("adapt", epochs, data)?;
                step_acc.push(self.evaluate(&data.val)?.acc);
                break;
            }
            modes.push(CarryMode::Simulated);
        }
        Ok(ScheduleReport {
            order,
            carry_std,
            modes,
            reference_acc,
            step_acc,
        })
    }

    fn forward(&mut self, x: &[f64], pass: Pass) -> Result<Cache> {
        self.net.forward(x, pass)
    }

    fn train_epochs(&mut self, stage: &str, epochs: usize, lr: f64, pass: Pass, data: &Dataset) -> Result<()> {
        let n = data.train.len();
        let bs = self.config.batch_size;
        let steps_per_epoch = n.div_ceil(bs);
        let total = (epochs * steps_per_epoch).max(1);
        let mut order: Vec<usize> = (0..n).collect();
        for epoch in 0..epochs {
            order.shuffle(&mut self.rng);
            let mut loss_sum = 0.0;
            for (k, idx) in order.chunks(bs).enumerate() {
                let t = (epoch * steps_per_epoch + k) as f64 / total as f64;
                let rate = lr * 0.5 * (1.0 + (PI * t).cos());
                let (x, y) = data.train.gather(idx);
                let cache = self.net.forward(&x, pass)?;
                loss_sum += cross_entropy(cache.logits(), &y, self.net.classes) * idx.len() as f64;
                let grads = self.net.backward(&cache, &y, pass)?;
                self.net.step(&grads, rate, self.config.momentum);
                if !loss_sum.is_finite() || !self.net.is_finite() {
                    return Err(Error::Divergence {
                        stage: stage.into(),
                        epoch,
                        accuracy: f64::NAN,
                    });
                }
            }
            let eval = self.evaluate(&data.val)?;
            if !eval.acc.is_finite() || !loss_sum.is_finite() {
                return Err(Error::Divergence {
                    stage: stage.into(),
                    epoch,
                    accuracy: eval.acc,
                });
            }
            self.metrics.push(EpochMetrics {
                stage: stage.into(),
                epoch,
                acc: eval.acc,
                overflow_rate: eval.overflow_rate,
                carry_std: eval.carry_std,
                r_o: eval.r_o,
                r_c: eval.r_c,
                loss: loss_sum / n as f64,
            });
            if eval.acc <= 1.0 / self.net.classes as f64 + DIVERGENCE_MARGIN {
                self.bad_epochs += 1;
            } else {
                self.bad_epochs = 0;
            }
            if self.bad_epochs >= DIVERGENCE_PATIENCE {
                return Err(Error::Divergence {
                    stage: stage.into(),
                    epoch,
                    accuracy: eval.acc,
                });
            }
        }
        Ok(())
    }

    /// Evaluates the model as trained so far (carry simulation and buffer
    /// bits as currently assigned).
    pub fn evaluate(&mut self, split: &Split) -> Result<Evaluation> {
        self.evaluate_with(split, None)
    }

    /// As [`Trainer::evaluate`], wrapping pre-activations to `wrap_bits` when given.
    pub fn evaluate_with(&mut self, split: &Split, wrap_bits: Option<u32>) -> Result<Evaluation> {
        let mut pass = self.pass(self.integer_acts, 0.0, 0.0);
        pass.wrap_bits = wrap_bits;
        pass.need_counts = self.integer_acts;
        let cache = self.net.forward(&split.x, pass)?;
        let acc = accuracy(cache.logits(), &split.y, self.net.classes);
        let layer_overflow = self.net.overflow_rates(&cache, self.config.accumulator_bits);
        let overflow_rate = mean(&layer_overflow);
        let pen = self.net.penalties(&cache, pass);
        let mut layer_carry_std = Vec::new();
        for l in self.quantized_layers() {
            if let Some(n) = &cache.layers[l].counts {
                let (var, _) = carry_variance(n, cache.batch, self.net.layers[l].outputs);
                layer_carry_std.push(mean(&var.iter().map(|v| v.sqrt()).collect::<Vec<_>>()));
            }
        }
        let has_counts = !layer_carry_std.is_empty();
        Ok(Evaluation {
            acc,
            overflow_rate,
            layer_overflow,
            carry_std: has_counts.then(|| mean(&layer_carry_std)),
            layer_carry_std,
            r_o: pen.overflow,
            r_c: has_counts.then_some(pen.carry),
        })
    }

    /// Logits of the current model; activations rounded once calibrated.
    pub fn logits(&mut self, x: &[f64], wrap_bits: Option<u32>) -> Result<Vec<f64>> {
        let mut pass = self.pass(self.integer_acts, 0.0, 0.0);
        pass.wrap_bits = wrap_bits;
        Ok(self.net.forward(x, pass)?.logits().to_vec())
    }

    /// The current model as an inference manifest. Before calibration,
    /// quantized layers get a fine placeholder activation scheme.
    pub fn export(&self) -> Result<ModelManifest> {
        let n = self.net.layers.len();
        let mut inputs = Vec::with_capacity(n);
        for (l, layer) in self.net.layers.iter().enumerate() {
            inputs.push(if !layer.quantized {
                None
            } else {
                Some(match layer.input_scheme()? {
                    Some(s) => s,
                    None => QuantScheme::uniform(self.provisional_steps[l], PROVISIONAL_BITS, false)?,
                })
            });
        }
        let mut specs = Vec::with_capacity(n);
        for (l, layer) in self.net.layers.iter().enumerate() {
            let weights = if layer.quantized {
                Weights::Fixed(layer.weight_tensor()?)
            } else {
                Weights::Real(RealTensor::new(vec![layer.outputs, layer.inputs], layer.w.clone())?)
            };
            specs.push(LayerSpec {
                name: if !layer.quantized {
                    if l == 0 { "input".into() } else { "head".into() }
                } else {
                    format!("hidden{l}")
                },
                op: LayerOp::Linear,
                weights,
                input_scheme: inputs[l],
                cyclic: layer.cyclic,
                scale: layer.gamma.clone(),
                shift: layer.beta.clone(),
                relu: layer.relu,
                output_scheme: inputs.get(l + 1).copied().flatten(),
                full_precision: !layer.quantized,
                carry_mean: layer.carry_sim.then(|| layer.carry_mean.clone()),
                buffered: layer.buffered,
            });
        }
        ModelManifest::new(self.config.accumulator_bits, self.config.seed, specs)
    }
}

/// Runs every configured stage on `data`.
pub fn train_pipeline(config: &TrainConfig, data: &Dataset) -> Result<TrainOutput> {
    Trainer::new(config.clone(), data)?.run(data)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> f64 {
    let mut total = 0.0;
    for (s, &y) in labels.iter().enumerate() {
        let row = &logits[s * classes..(s + 1) * classes];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len().max(1) as f64
}

fn accuracy(logits: &[f64], labels: &[usize], classes: usize) -> f64 {
    let t = RealTensor {
        shape: vec![labels.len(), classes],
        values: logits.to_vec(),
    };
    crate::netgraph::accuracy(&t, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::AccMode;
    use crate::netgraph::forward_trace;

    #[test]
    fn config_reports_every_bad_field() {
        let c = TrainConfig {
            weight_bits: 7,
            p_target: 80.0,
            slope: "0.5".into(),
            lambda_overflow: -1.0,
            ..TrainConfig::default()
        };
        match c.validate() {
            Err(Error::Config(v)) => assert_eq!(v.len(), 4, "{v:?}"),
            other => panic!("{other:?}"),
        }
        assert!(TrainConfig::default().validate().is_ok());
    }

    fn small() -> (TrainConfig, Dataset) {
        let c = TrainConfig {
            hidden: 32,
            epochs: StageEpochs {
                pretrain: 12,
                warmup: 2,
                finetune: 3,
            },
            dataset: DatasetConfig {
                samples: 1000,
                difficulty: 0.3,
            },
            calibration_samples: 200,
            ..TrainConfig::default()
        };
        let d = make(&c);
        (c, d)
    }

    fn make(c: &TrainConfig) -> Dataset {
        super::super::make_synthetic_dataset(c.seed, c.dataset.samples, c.dataset.difficulty).unwrap()
    }

    fn assert_same_logits(t: &mut Trainer, data: &Dataset, mode: AccMode, wrap: Option<u32>, sim: bool) {
        let model = t.export().unwrap();
        let ours = t.logits(&data.test.x, wrap).unwrap();
        let theirs = forward_trace(&model, &data.test.tensor(), mode, sim).unwrap().output.values;
        assert_eq!(ours.len(), theirs.len());
        for (a, b) in ours.iter().zip(&theirs) {
            assert_eq!(a.to_bits(), b.to_bits(), "{a} vs {b}");
        }
    }

    #[test]
    fn trainer_forward_matches_exported_graph() {
        let (c, data) = small();
        let mut t = Trainer::new(c, &data).unwrap();
        t.pretrain(&data).unwrap();
        t.calibrate(&data).unwrap();
        t.insert_cyclic().unwrap();
        t.warmup(&data).unwrap();
        t.finetune(&data).unwrap();
        assert_same_logits(&mut t, &data, AccMode::Exact32, None, false);
        assert_same_logits(&mut t, &data, AccMode::Wrapped { bits: 8 }, Some(8), false);

        let mut sim = t.clone();
        sim.adapt_carries(&data, f64::INFINITY).unwrap();
        assert_same_logits(&mut sim, &data, AccMode::Exact32, None, true);

        let mut buf = t.clone();
        buf.adapt_carries(&data, -1.0).unwrap();
        assert!(buf.export().unwrap().layers.iter().any(|l| l.buffered));
        assert_same_logits(&mut buf, &data, AccMode::Wrapped { bits: 8 }, Some(8), false);
    }

    #[test]
    fn identical_seeds_identical_weights() {
        let (c, data) = small();
        let run = || {
            let mut t = Trainer::new(c.clone(), &data).unwrap();
            t.run(&data).unwrap();
            t.net.layers.iter().flat_map(|l| l.w.iter().map(|v| v.to_bits())).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn full_precision_baseline_and_permuted_control() {
        let c = TrainConfig {
            full_precision: true,
            last_stage: "pretrain".into(),
            ..TrainConfig::default()
        };
        let data = make(&c);
        let out = train_pipeline(&c, &data).unwrap();
        assert!(out.test.acc >= 0.95, "{}", out.test.acc);

        let permuted = data.with_permuted_labels(9);
        let c = TrainConfig {
            epochs: StageEpochs {
                pretrain: 8,
                ..StageEpochs::default()
            },
            ..c
        };
        let out = train_pipeline(&c, &permuted).unwrap();
        assert!((out.test.acc - permuted.chance()).abs() < 0.08, "{}", out.test.acc);
    }

    #[test]
    fn degenerate_config_is_plain_quantized_training() {
        let (c, data) = small();
        let c = TrainConfig {
            cyclic: "none".into(),
            lambda_overflow: 0.0,
            accumulator_bits: 32,
            ..c
        };
        let out = train_pipeline(&c, &data).unwrap();
        assert!(out.model.layers.iter().all(|l| l.cyclic.is_none()));
        assert!(out.metrics.iter().all(|m| m.overflow_rate == 0.0 && m.r_o == 0.0));
    }

    #[test]
    fn schedule_sorts_ascending() {
        assert_eq!(schedule_order(&[1.0, 50.0]), vec![0, 1]);
        assert_eq!(schedule_order(&[50.0, 1.0, 7.0]), vec![1, 2, 0]);
        assert_eq!(schedule_order(&[3.0]), vec![0]);
    }

    #[test]
    fn config_toml_roundtrip() {
        let c = TrainConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<TrainConfig>(&text).unwrap(), c);
        assert!(toml::from_str::<TrainConfig>("bogus = 1").is_err());
    }
}
