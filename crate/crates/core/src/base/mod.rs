//! Offline-tuned controllers: fixed-gain ALINEA, the gain network, and the
//! rollout that extends either into a warm start for the online solvers.

pub mod alinea;
pub mod mlp;
pub mod training;
pub mod warm_start;

pub use alinea::{alinea_step, AlineaState, DEFAULT_ALINEA_GAIN};
pub use mlp::{mlp_forward, Activation, AnnBank, MlpFile, MlpParams};
pub use training::{generate_training_data, solve_isolated_gain, train_mlp, CellDataset, TrainedMlp, TrainingConfig, TrainingSample};
pub use warm_start::{warm_start_rollout, BaseAction, BaseController, BaseLaw, Measurement, WarmStart};
