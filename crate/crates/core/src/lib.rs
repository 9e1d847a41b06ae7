//! Adversarial training on small MLPs: a reverse-mode autodiff tape,
//! L-infinity attacks with several initializations (including backward
//! smoothing), TRADES-style trainers and loss-landscape diagnostics.

pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod models;
pub mod tensor;
pub mod trainers;

pub use attacks::{AttackSpec, InitKind, Perturbation};
pub use data::Dataset;
pub use error::{Error, Result};
pub use models::{init_model, ModelParams, ModelSpec};
pub use tensor::Tensor;
pub use trainers::{train, LrSchedule, Strategy, TrainSpec};

/// Derives an independent 64-bit seed (splitmix64 finalizer).
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
