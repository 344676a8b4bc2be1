//! Neural surrogate of the trajectory generator.

#[cfg(all(target_arch = "x86_64", target_os = "linux"))]
mod amx;
pub mod mlp;
mod net;
mod train;
mod weights;

pub use net::{InputNormalization, SurrogateNet, LAYER_SIZES};
pub use train::{train, train_with_progress, Optimizer, TrainConfig, TrainReport, TRAIN_FRACTION};
pub use weights::{from_json, load_weights, save_weights, to_json};
