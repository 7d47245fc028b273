//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is the value currency of the whole crate: a contiguous
//! f64 buffer plus shape, an optional gradient buffer, and a
//! `requires_grad` flag. Computation that needs gradients runs through a
//! [`Tape`]: operations evaluate eagerly and record themselves, and
//! [`Tape::backward`] replays the record once in reverse, accumulating
//! gradients into every tracked ancestor.
//!
//! [`gradcheck`] holds the central-finite-difference oracle used by the
//! test suite to validate every primitive and every composite loss.

mod adamw;
pub mod gradcheck;
mod mlp;
mod tape;
mod tensor;

pub use adamw::AdamW;
pub use mlp::{BoundMlp, Mlp};
pub use tape::{cosine_similarity, linear, Activation, Tape, Var};
pub use tensor::Tensor;
