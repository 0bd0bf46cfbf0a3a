//! The acoustic model `p_theta`: a small conv + fully-connected network
//! emitting per-frame token log-probabilities, trained with CTC loss through
//! hand-written backpropagation and Adagrad updates.

mod checkpoint;
mod ctc;
mod model;
mod train;

pub(crate) use ctc::BLANK;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use ctc::{ctc_feasible, ctc_log_prob, ctc_loss_grad, greedy_decode, required_frames};
pub use model::{AcousticModel, ConvSpec, EmissionLattice, ModelConfig};
pub use train::{train_epochs, LossRecord, OptimizerState, SampleOrigin, TrainSample};
