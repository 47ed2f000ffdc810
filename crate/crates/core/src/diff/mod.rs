//! Minimal dense-tensor math with reverse-mode gradients.
//!
//! Everything is `f64` and row-major. The [`Tape`] records a forward pass;
//! [`Tape::backward`] accumulates parameter gradients into a
//! [`ParameterStore`], and [`adam_step`] consumes them.

mod adam;
mod checkpoint;
mod gradcheck;
mod mlp;
mod store;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{check_gradients, finite_difference_check, GradCheckReport, ParamCheck};
pub use mlp::{binary_cross_entropy, clip_probability, glorot_uniform, Activation, Mlp, PROB_EPS};
pub use store::{ParamId, ParameterStore};
pub use tape::{sigmoid, softplus, EmbeddingLookup, Tape, Var};
pub use tensor::Tensor;
