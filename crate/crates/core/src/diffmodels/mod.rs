//! Small dense networks with analytic gradients: the representation map, the
//! arm-headed outcome predictor and the overlap critic, plus a central
//! finite-difference oracle for checking them.

mod fd;
mod fusion;
mod mlp;
mod nets;
mod params;

pub use fd::{finite_diff_grad, finite_diff_net, max_relative_error};
pub use fusion::{FusionGradients, FusionModel, FusionTape};
pub use mlp::{Gradients, Mlp, Tape};
pub use nets::{
    append_one_hot, Architecture, CriticNet, PredictorGradients, PredictorNet, PredictorTape, RepresentationNet,
    Trainable,
};
pub use params::{init_params, Activation, InitScheme, LayerSpec, Layout, ParamVector};
