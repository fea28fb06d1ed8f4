//! Coupled profile/frontal GAN embedding learning: synthetic paired data,
//! U-Net generators and patch discriminators with hand-written backprop,
//! the coupled training loop, and verification/identification metrics.
//!
//! Every network is generic over [`Scalar`] (`f32` or `f64`).

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use config::{EvalOptions, RunConfig, SCHEMA_VERSION};
pub use data::{
    build_folds, export_dataset, generate_synthetic_dataset, load_dataset, sample_pair_batch, seeded_folds,
    DatasetSpec, Domain, Fold, FoldProtocol, ImageSample, ImageShape, PairExample,
};
pub use error::{Error, Result};
pub use eval::{EvalReport, EvalSettings, RocCurve, ScoredPair, Scorer};
pub use losses::{ContrastiveForm, GanForm, LossBreakdown, LossConfig};
pub use networks::{init_model, GeneratorConfig, ModelState};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use trainer::{
    load_checkpoint, save_checkpoint, train_step, AblationPreset, OptimizerStates, TrainConfig,
    Trainer,
};
