//! Training procedures: the stochastic primal-dual augmented-Lagrangian
//! estimator, its penalty and ablation variants, weighted-loss fusion,
//! single-source baselines and a T-learner, plus closed-form solvers on the
//! linear-quadratic and two-cell constructions.

mod bundle;
mod lq;
mod minimax;
mod tlearner;
mod train;

pub use bundle::{ModelBundle, Standardizer, TraceRecord, TrainTrace};
pub use lq::{
    lq_alpha_sweep, lq_penalty_residual, lq_primal_dual, saddle_gap, tail_log_linear_fit, LqAlphaRow, LqPdConfig,
    LqRun, PathConstants,
};
pub use minimax::{minimax_residual, solve_minimax_toy, MinimaxSolution};
pub use tlearner::{train_t_learner, TLearner, TLearnerConfig};
pub use train::{
    alpha_sweep, evaluate_objective_terms, q_hat, q_hat_objective, train, train_ablation, train_constrained_pd,
    train_obs_only, train_penalty, train_rct_only, train_weighted, Ablation, AlphaRow, ObjectiveTerms, TrainConfig,
    TrainMode,
};
