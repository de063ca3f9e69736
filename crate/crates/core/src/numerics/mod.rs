//! Dense matrices, a reverse-mode tape, and the seeded RNG.

mod activation;
mod gradcheck;
mod matrix;
mod params;
mod rng;
mod tape;

pub use activation::{
    activation, leaky_relu, sigmoid, softmax_rows, tanh, Activation, LEAKY_RELU_SLOPE,
};
pub use gradcheck::gradient_check;
pub use matrix::Matrix;
pub use params::{ParamId, ParameterStore};
pub use rng::Rng;
pub use tape::{
    column_moments, weighted_cross_entropy_value, BatchStats, BlockNorm, Tape, Var, LOG_CLAMP,
};
