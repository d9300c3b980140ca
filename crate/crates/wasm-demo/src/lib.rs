//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each binding returns a JSON string; the plain functions behind them are
//! usable (and tested) natively.

use paser_core::data::{gen_blurred_glyphs_named, gen_phase_texture, inject_salt_pepper};
use paser_core::models::{cost_vector, UNetSpec};
use paser_core::tensorkit::{Mode, RngStream};
use paser_core::training::compute_reward;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn parse_list<T: std::str::FromStr>(what: &str, s: &str) -> Result<Vec<T>, String> {
    s.split(',').map(|v| v.trim().parse().map_err(|_| format!("{what}: cannot parse {v:?}"))).collect()
}

/// One synthetic image and its label map, optionally with salt-and-pepper noise.
/// `generator` is `texture` or a glyph noise type (`gauss_r1`, `gauss_r2`, `box`).
pub fn sample(generator: &str, seed: u64, salt_pepper: f64) -> Result<Value, String> {
    let s = match generator {
        "texture" => gen_phase_texture(1, seed, [0.2, 0.2, 0.6]),
        noise => gen_blurred_glyphs_named(1, noise, seed),
    }
    .map_err(|e| e.to_string())?
    .remove(0);
    let image = if salt_pepper > 0.0 {
        inject_salt_pepper(&s.image, salt_pepper, &mut RngStream::new(seed).named("salt_pepper"))
            .map_err(|e| e.to_string())?
    } else {
        s.image
    };
    Ok(json!({
        "height": s.labels.height,
        "width": s.labels.width,
        "image": image.data(),
        "labels": s.labels.labels,
    }))
}

/// Parameter counts, normalized costs and per-patch flops of a UNet suite.
pub fn suite_costs(depths: &str, channels: &str, patch: usize) -> Result<Value, String> {
    let depths: Vec<usize> = parse_list("depths", depths)?;
    let channels: Vec<usize> = parse_list("channels", channels)?;
    if depths.len() != channels.len() || depths.is_empty() {
        return Err("depths and channels need the same, non-zero length".into());
    }
    let specs: Vec<UNetSpec> = depths
        .iter()
        .zip(&channels)
        .map(|(&depth, &c)| UNetSpec { depth, base_channels: c, in_channels: 1, num_classes: 3, dropout_rate: 0.0 })
        .collect();
    let params: Vec<usize> = specs.iter().map(UNetSpec::param_count).collect();
    let flops = specs
        .iter()
        .map(|s| s.flops(patch, patch, Mode::Eval))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    Ok(json!({ "params": params, "costs": cost_vector(&params), "flops": flops }))
}

/// Reward of routing one patch to each model, given every model's IoU on it.
pub fn patch_rewards(ious: &str, costs: &str, lambda: f64) -> Result<Value, String> {
    let ious: Vec<f64> = parse_list("ious", ious)?;
    let costs: Vec<f64> = parse_list("costs", costs)?;
    if ious.len() != costs.len() {
        return Err(format!("{} IoUs for {} costs", ious.len(), costs.len()));
    }
    let row = vec![ious.iter().copied().map(Some).collect::<Vec<_>>()];
    let rewards = (0..ious.len())
        .map(|a| compute_reward(&[a], &row, lambda, &costs).map(|r| r.total))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let best = (0..rewards.len()).fold(0, |b, a| if rewards[a] > rewards[b] { a } else { b });
    Ok(json!({ "rewards": rewards, "best": best }))
}

fn to_js(v: Result<Value, String>) -> Result<String, JsError> {
    v.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = sample)]
pub fn sample_js(generator: &str, seed: u32, salt_pepper: f64) -> Result<String, JsError> {
    to_js(sample(generator, seed as u64, salt_pepper))
}

#[wasm_bindgen(js_name = suiteCosts)]
pub fn suite_costs_js(depths: &str, channels: &str, patch: usize) -> Result<String, JsError> {
    to_js(suite_costs(depths, channels, patch))
}

#[wasm_bindgen(js_name = patchRewards)]
pub fn patch_rewards_js(ious: &str, costs: &str, lambda: f64) -> Result<String, JsError> {
    to_js(patch_rewards(ious, costs, lambda))
}
