use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::fxp::RealTensor;

pub const DEFAULT_CLASSES: usize = 4;
pub const DEFAULT_FEATURES: usize = 8;

/// Labelled samples, row-major `[len, features]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub features: usize,
    pub x: Vec<f64>,
    pub y: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn tensor(&self) -> RealTensor {
        RealTensor {
            shape: vec![self.len(), self.features],
            values: self.x.clone(),
        }
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Split {
        let n = n.min(self.len());
        Split {
            features: self.features,
            x: self.x[..n * self.features].to_vec(),
            y: self.y[..n].to_vec(),
        }
    }

    /// Rows `idx`, gathered into a contiguous batch.
    pub fn gather(&self, idx: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let f = self.features;
        let mut x = Vec::with_capacity(idx.len() * f);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(&self.x[i * f..(i + 1) * f]);
            y.push(self.y[i]);
        }
        (x, y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: usize,
    pub classes: usize,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Dataset {
    pub fn chance(&self) -> f64 {
        1.0 / self.classes as f64
    }

    /// Same inputs with labels shuffled across samples in every split.
    pub fn with_permuted_labels(&self, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = self.clone();
        for s in [&mut d.train, &mut d.val, &mut d.test] {
            s.y.shuffle(&mut rng);
        }
        d
    }
}

/// Interleaved spirals in the plane, one arm per class, lifted to
/// [`DEFAULT_FEATURES`] inputs by a fixed random linear map.
///
/// `difficulty` in `[0, 1]` sets both the number of turns and the noise.
/// Samples are split 60/20/20 into train, validation and test.
pub fn make_synthetic_dataset(seed: u64, n: usize, difficulty: f64) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::Config(vec![format!("dataset needs at least 10 samples, got {n}")]));
    }
    if !(0.0..=1.0).contains(&difficulty) {
        return Err(Error::Config(vec![format!(
            "difficulty must lie in [0, 1], got {difficulty}"
        )]));
    }
    let classes = DEFAULT_CLASSES;
    let features = DEFAULT_FEATURES;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");

    let lift: Vec<f64> = (0..features * 2).map(|_| gauss.sample(&mut rng)).collect();
    let offset: Vec<f64> = (0..features).map(|_| 0.1 * gauss.sample(&mut rng)).collect();

    let turns = 0.75 + 0.75 * difficulty;
    let noise = 0.02 + 0.08 * difficulty;
    let mut x = Vec::with_capacity(n * features);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let t: f64 = rng.gen();
        let r = 0.15 + 0.85 * t;
        let angle = std::f64::consts::TAU * (c as f64 / classes as f64 + turns * t);
        let px = r * angle.cos() + noise * gauss.sample(&mut rng);
        let py = r * angle.sin() + noise * gauss.sample(&mut rng);
        for f in 0..features {
            x.push(lift[2 * f] * px + lift[2 * f + 1] * py + offset[f]);
        }
        y.push(c);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let all = Split { features, x, y };
    let n_train = n * 3 / 5;
    let n_val = n / 5;
    let take = |idx: &[usize]| {
        let (x, y) = all.gather(idx);
        Split { features, x, y }
    };
    Ok(Dataset {
        features,
        classes,
        train: take(&order[..n_train]),
        val: take(&order[n_train..n_train + n_val]),
        test: take(&order[n_train + n_val..]),
    })
}
