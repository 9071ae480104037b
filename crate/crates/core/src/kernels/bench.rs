use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::packing::PackSpec;

use super::{gemm_contaminated, gemm_exact, gemm_wrapped, AccMode, PackedWeights};

/// Warm-up runs before timing starts.
pub const WARMUP: usize = 3;

/// A named 3x3, pad-1 convolution layer, lowered to a GEMM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Preset {
    pub name: &'static str,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Preset {
    /// `(M, K, N)` of the lowered GEMM: output pixels, taps, output channels.
    pub fn gemm_shape(&self) -> (usize, usize, usize) {
        (self.height * self.width, 9 * self.channels, self.channels)
    }
}

pub const PRESETS: [Preset; 4] = [
    Preset { name: "resnet-64x56x56", channels: 64, height: 56, width: 56 },
    Preset { name: "resnet-128x28x28", channels: 128, height: 28, width: 28 },
    Preset { name: "resnet-256x14x14", channels: 256, height: 14, width: 14 },
    Preset { name: "resnet-512x7x7", channels: 512, height: 7, width: 7 },
];

pub fn preset(name: &str) -> Option<Preset> {
    PRESETS.iter().copied().find(|p| p.name == name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub shape: String,
    pub mode: String,
    pub b: Option<u32>,
    #[serde(rename = "W")]
    pub w: Option<u32>,
    pub median_ns: f64,
    pub mad_ns: f64,
    pub gops: f64,
}

pub fn median(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Median absolute deviation from the median.
pub fn mad(samples: &[f64]) -> f64 {
    let m = median(samples);
    let dev: Vec<f64> = samples.iter().map(|x| (x - m).abs()).collect();
    median(&dev)
}

/// Times `M x K` activations in `[0, 7]` against `K x N` ternary weights.
///
/// Weight packing happens once before timing, as it would for a deployed
/// model. `repetitions` timed runs follow [`WARMUP`] untimed ones.
pub fn bench_gemm(
    label: &str,
    (m, k, n): (usize, usize, usize),
    mode: AccMode,
    repetitions: usize,
    seed: u64,
) -> Result<BenchRecord> {
    mode.validate()?;
    if repetitions == 0 {
        return Err(Error::InvalidMode("repetitions must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<i32> = (0..m * k).map(|_| rng.gen_range(0..8)).collect();
    let b: Vec<i32> = (0..k * n).map(|_| rng.gen_range(-1..=1)).collect();

    let mut out = vec![0i64; m * n];
    let mut run: Box<dyn FnMut()> = match mode {
        AccMode::Exact32 => Box::new(|| {
            black_box(gemm_exact(black_box(&a), &b, m, k, n));
        }),
        AccMode::Wrapped { bits } => Box::new(move || {
            black_box(gemm_wrapped(black_box(&a), &b, m, k, n, bits));
        }),
        AccMode::PackedIsolated { bits, width } | AccMode::PackedBuffered { bits, width } => {
            let buffered = matches!(mode, AccMode::PackedBuffered { .. });
            let packed = PackedWeights::new(&b, k, n, PackSpec::new(width, bits, buffered)?)?;
            Box::new(move || {
                packed
                    .multiply_into(black_box(&a), m, &mut out)
                    .expect("shapes checked above");
                black_box(&out);
            })
        }
        AccMode::PackedContaminated { bits, width } => {
            let spec = PackSpec::new(width, bits, false)?;
            Box::new(move || {
                black_box(gemm_contaminated(black_box(&a), &b, m, k, n, spec).expect("ternary"));
            })
        }
    };

    for _ in 0..WARMUP {
        run();
    }
    let samples: Vec<f64> = (0..repetitions)
        .map(|_| {
            let t = Instant::now();
            run();
            t.elapsed().as_nanos() as f64
        })
        .collect();
    let med = median(&samples);
    Ok(BenchRecord {
        shape: label.to_string(),
        mode: mode.name().to_string(),
        b: mode.bits(),
        w: mode.width(),
        median_ns: med,
        mad_ns: mad(&samples),
        gops: 2.0 * (m * n * k) as f64 / med.max(1.0),
    })
}
