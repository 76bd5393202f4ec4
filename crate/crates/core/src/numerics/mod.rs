//! Dense tensors, a reverse-mode tape, parameter storage, Adam and a
//! finite-difference gradient oracle.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{compare_gradients, finite_diff_check, finite_diff_gradients, FdOptions, FdReport, Offender};
pub use graph::{Graph, Var};
pub use params::{init_params, Gradients, InitKind, ParamId, ParamStore};
pub use tensor::{Real, Tensor};
