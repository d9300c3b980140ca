use crate::error::Result;
use crate::models::ModelSuite;
use crate::tensorkit::{RngStream, Scalar};
use crate::training::{execute_actions, Inference, Prepared};

/// Routes every patch to a uniformly drawn model.
pub fn random_policy_infer<T: Scalar>(
    suite: &ModelSuite<T>,
    prep: &Prepared<T>,
    rng: &mut RngStream,
) -> Result<Inference> {
    let actions: Vec<Vec<usize>> =
        (0..prep.len()).map(|_| (0..prep.patches).map(|_| rng.below(suite.len())).collect()).collect();
    let (labels, routed) = execute_actions(suite, prep, &actions)?;
    Ok(Inference { labels, actions, flops: prep.len() as u64 * prep.mc_flops + routed })
}

/// Closed-form expected flops of [`random_policy_infer`].
pub fn random_policy_expected_flops<T: Scalar>(suite: &ModelSuite<T>, prep: &Prepared<T>) -> Result<f64> {
    let (ph, pw) = prep.patch_size();
    let mut per_patch = 0.0;
    for m in 1..suite.len() {
        per_patch += suite.flops(m, ph, pw)? as f64;
    }
    per_patch /= suite.len() as f64;
    Ok(prep.len() as f64 * (prep.mc_flops as f64 + prep.patches as f64 * per_patch))
}
