//! Task models, the routing policy and Monte Carlo dropout uncertainty.

mod entropy;
mod policy;
mod suite;
mod unet;

pub use entropy::{
    argmax_labels, categorical_entropy, entropy_of, mc_entropy, policy_state, predict, EntropyMap, McPrediction,
};
pub use policy::{PatchProbs, PolicyNet, PolicySpec};
pub use suite::{cost_vector, ModelSuite};
pub use unet::{LayerCost, UNet, UNetSpec};
