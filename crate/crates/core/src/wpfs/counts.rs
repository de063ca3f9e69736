use serde::{Deserialize, Serialize};

use super::model::WpfsModel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterCounts {
    /// Size of a directly learned first-layer matrix, `K · D`.
    pub direct_first_layer: usize,
    /// Learnable scalars of the model as built.
    pub wpfs_total: usize,
    /// The same classifier with a directly learned first layer.
    pub direct_total: usize,
    /// `1 − wpfs_total / direct_total`; may be negative.
    pub reduction: f64,
}

pub fn parameter_counts(model: &WpfsModel) -> ParameterCounts {
    let parts = model.net.parameter_breakdown(&model.params);
    let k = model
        .net
        .architecture
        .classifier_hidden
        .first()
        .copied()
        .unwrap_or(0);
    let direct_first_layer = k * model.net.features;
    let wpfs_total = parts.classifier + parts.wpn + parts.spn;
    let direct_total = if model.net.use_wpn {
        parts.classifier + direct_first_layer
    } else {
        parts.classifier
    };
    ParameterCounts {
        direct_first_layer,
        wpfs_total,
        direct_total,
        reduction: 1.0 - wpfs_total as f64 / direct_total as f64,
    }
}
