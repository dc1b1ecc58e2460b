//! Datasets and synthetic generators.

mod dataset;
mod lq;
mod minimax;
mod synthetic;

pub use dataset::{Dataset, Source};
pub use lq::{solve_kkt, spd_condition, LqToy};
pub use minimax::{gen_minimax_toy, MinimaxCell, MinimaxToy};
pub use synthetic::{gen_synthetic, true_tau, Exclusion, GenerationRecord, SyntheticConfig, N_LATENT};
