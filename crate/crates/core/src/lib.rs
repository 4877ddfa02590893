//! Coupled sparse variational inference for Gaussian process additive models.
//!
//! The predictor is a sum of independent GP components, each acting on a
//! subset of the inputs. The variational posterior keeps the components
//! jointly Gaussian through a low-rank coupling factor, so posterior
//! correlations between components survive the approximation.

pub mod error;
pub mod friedman;
pub mod full;
pub mod kernels;
pub mod likelihood;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod persist;
pub mod scaling;
pub mod sparse;

pub use error::{Error, Result};
pub use full::{train_full, train_full_with, FullGradient, FullModel};
pub use kernels::{build_anova_kernel, Kernel, KernelParams};
pub use likelihood::Likelihood;
pub use model::{
    init_state, regular_grid, validate_model, ComponentMarginals, ComponentSpec, Dataset,
    FullVariationalState, PredictorMarginals, Structure, ValidationReport, VariationalState,
    Violation, PRIOR_JITTER,
};
pub use optim::{AdamConfig, OptimizerConfig, Status};
pub use persist::{FittedState, InputScaling, SavedModel};
pub use sparse::{
    decompose, train_sparse, EffectTable, Hyperparameters, ParamSelection, SparseGradient,
    SparseModel, TrainConfig, TrainReport,
};
