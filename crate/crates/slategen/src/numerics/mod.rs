//! Dense f64 linear algebra, FLOP accounting, and reverse-mode autodiff.
//!
//! Everything downstream builds on this module: [`Matrix`] is the only
//! tensor type, [`flops`] holds the process-wide operation counter,
//! [`Tape`] records differentiable computations, [`ParamStore`] owns named
//! parameters and their gradient slots, and [`gradcheck`] verifies the two
//! against central finite differences.

mod checkpoint;
mod dice;
pub mod flops;
pub mod gradcheck;
mod matrix;
mod params;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use dice::{
    batch_stats, dice, dice_tape, fold_running_stats, DiceState, DiceTape, DiceUpdate,
    DICE_EPSILON, DICE_MOMENTUM,
};
pub use matrix::{sigmoid_scalar, Matrix, ShapeError};
pub use params::{ParamError, ParamStore};
pub use tape::{Gradients, ParamMode, Tape, Var};
