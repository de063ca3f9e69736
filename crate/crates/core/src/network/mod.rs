//! Feed-forward layers, the weighted loss, AdamW, clipping and the
//! learning-rate schedule.

mod loss;
mod mlp;
mod optim;
mod schedule;

pub use loss::{class_weights, weighted_cross_entropy, ClassWeights};
pub use mlp::{
    mlp_forward, BatchNormLayer, ForwardCtx, HiddenLayer, Linear, Mlp, MlpConfig, Mode, BN_EPS,
    BN_MOMENTUM,
};
pub use optim::{clip_gradients, AdamWConfig, AdamWState};
pub use schedule::{lr_at, ScheduleConfig};
