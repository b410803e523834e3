//! Cumulative spatial knowledge distillation (CSKD) at desk scale.
//!
//! A small convolutional teacher is trained on an image classification set,
//! then distilled into a small vision transformer whose patch tokens are
//! supervised by the teacher's dense per-position predictions. The dense
//! targets are blended from local (per-position) to global (pooled) teacher
//! responses as training progresses.

pub mod analyze;
pub mod config;
pub mod cskd;
pub mod error;
pub mod kv;
pub mod nets;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use nets::{Checkpoint, Params, StudentOutputs, TeacherConfig, TeacherOutputs, VitConfig};
pub use tensor::{Element, Graph, Tensor, Var};
