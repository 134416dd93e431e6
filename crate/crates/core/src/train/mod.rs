//! Joint training of encoder, codebook, diffusion stage and head, plus the
//! module and timestep ablations.

mod ablation;
mod config;
mod model;
mod trainer;

pub use ablation::{run_ablation, run_cell, AblationMatrix, AblationReport, AblationRow, CellResult, CellStatus, Variant};
pub use config::{AblationFlags, DataConfig, DiffusionConfig, EvalConfig, ExperimentConfig, LossWeights, ModelConfig, OptimConfig};
pub use model::{
    CodebookStage, DiffusionStage, LossBreakdown, Model, SampleTerms, TrainSample, CODEBOOK_GROUP, DENOISER_GROUP,
    ENCODER_GROUP, HEAD_GROUP,
};
pub use trainer::{evaluate_weathers, load_model, train, EvalRecord, StepLog, TrainOptions, TrainReport, WeatherSplit};
