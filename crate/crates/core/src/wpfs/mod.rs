//! The weight-predictor classifier: first-layer generation, objective,
//! importance scores, parameter accounting and persistence.

mod counts;
mod importance;
mod model;
pub mod persist;

pub use counts::{parameter_counts, ParameterCounts};
pub use importance::{feature_importance, select, ImportanceVector, DEFAULT_THRESHOLD};
pub use model::{
    argmax_rows, assemble_first_layer, total_loss, total_loss_value, Architecture,
    FirstLayerWeight, ForwardOutput, Method, MlpBaseline, Model, ParameterBreakdown, WpfsModel,
    WpfsNet,
};
