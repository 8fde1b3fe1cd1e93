//! Dense arrays, reverse-mode differentiation, Adam with cosine annealing,
//! parameter EMA and perceptrons.

mod array;
mod mlp;
mod optim;
mod params;
mod tape;

pub(crate) use array::gemm;
pub use array::Array;
pub use mlp::{glorot, mlp_forward, Activation, Mlp};
pub use optim::{adam_step, clip_global_norm, cosine_lr, EmaState, OptimState};
pub use params::ParamSet;
pub use tape::{value_and_grad, Gradients, ParamVars, Tape, Unary, Var};

/// Global-norm threshold applied to gradients before every Adam step.
pub const GRAD_CLIP_NORM: f64 = 10.0;
