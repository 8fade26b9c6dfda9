//! Light-FMP: feature and model pruning for click-through-rate models.
//!
//! A backbone model (per-field embeddings feeding an MLP) is pretrained on a
//! small subset with a hard-concrete gate per field. The gate decides which
//! fields survive; the pruned model inherits the pretrained weights and is
//! trained further on the remaining data.
//!
//! ```no_run
//! use lightfmp_core::prelude::*;
//!
//! let spec = SyntheticSpec::uniform(24, (0..8).collect(), 10, 50_000, 1);
//! let data = generate_synthetic(&spec).unwrap();
//! let cfg = RunConfig::default();
//! let run = run_all::<f32>(&data, &cfg).unwrap();
//! println!("test auc {:.4}", run.report.test.auc);
//! ```

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gate;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod real;
pub mod report;

pub use error::{Error, Result};

pub mod prelude {
    pub use crate::adam::{AdamConfig, AdamState};
    pub use crate::checkpoint::{Checkpoint, Phase};
    pub use crate::config::{ModelConfig, PhaseConfig, RunConfig, Seeds, SplitConfig};
    pub use crate::data::{
        batch_iter, generate_synthetic, load_dataset, stratified_split, Batch, Cell, Dataset, DatasetView,
        FieldKind, FieldSchema, FieldSpec, SplitRatios, SplitSet, SyntheticSpec,
    };
    pub use crate::error::{Error, Result};
    pub use crate::gate::{GateConstants, GateParams, MaskSample};
    pub use crate::metrics::{auc, auc_bruteforce, mean_logloss, EvalResult, PhaseTimer, PhaseTimings};
    pub use crate::model::{BackboneModel, Gradients};
    pub use crate::objective::{ConstraintState, LossReport};
    pub use crate::pipeline::{
        base_model, continue_train, evaluate, fit, infer, pretrain, prune, run_all, PruneMask, RunArtifacts,
    };
    pub use crate::real::Real;
}
