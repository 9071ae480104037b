//! Desk-scale training: synthetic data, straight-through estimators, the
//! staged quantization pipeline, both regularizers and carry adaptation.

mod autodiff;
mod dataset;
mod net;
mod pipeline;

pub use autodiff::{ste_quantize, Gradients, Rule, Tape, Value};
pub use dataset::{make_synthetic_dataset, Dataset, Split, DEFAULT_CLASSES, DEFAULT_FEATURES};
pub use net::CARRY_TEMPERATURE;
pub use pipeline::{
    schedule_order, train_pipeline, CarryMode, DatasetConfig, EpochMetrics, Evaluation,
    ScheduleConfig, ScheduleReport, StageEpochs, StageRates, TrainConfig, TrainOutput, Trainer,
    DIVERGENCE_MARGIN, DIVERGENCE_PATIENCE, PROVISIONAL_BITS, STAGES,
};
