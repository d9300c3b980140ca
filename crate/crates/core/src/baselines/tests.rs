use super::*;
use crate::data::{gen_phase_texture, LabelMap};
use crate::models::{ModelSuite, UNetSpec};
use crate::tensorkit::RngStream;
use crate::training::{execute_actions, prepare, Prepared};

fn unet(depth: usize, c: usize, dropout: f64) -> UNetSpec {
    UNetSpec { depth, base_channels: c, in_channels: 1, num_classes: 3, dropout_rate: dropout }
}

fn fixture(n: usize) -> (ModelSuite<f32>, Prepared<f32>) {
    let suite =
        ModelSuite::build(&[unet(1, 2, 0.1), unet(1, 4, 0.0), unet(2, 4, 0.0)], &mut RngStream::new(1)).unwrap();
    let data = gen_phase_texture(n, 3, [0.2, 0.2, 0.6]).unwrap();
    let prep = prepare(&suite.models[0], &data, 16, 3, &RngStream::new(2)).unwrap();
    (suite, prep)
}

fn cfg(t0: f64, t1: f64) -> CascadeConfig {
    CascadeConfig { thresholds: vec![t0, t1], lambda_idk: 0.01 }
}

#[test]
fn cached_cascade_matches_lazy_execution() {
    let (suite, prep) = fixture(4);
    let cache = CascadeCache::build(&suite, &prep).unwrap();
    let e0 = cache.entropies(0);
    let e1 = cache.entropies(1);
    let mid = |e: &[f64]| e.iter().sum::<f64>() / e.len() as f64;
    for c in [cfg(0.0, 0.0), cfg(f64::INFINITY, 0.0), cfg(mid(&e0), mid(&e1)), cfg(mid(&e0), f64::INFINITY)] {
        let lazy = idk_infer(&suite, &c, &prep).unwrap();
        let cached = cache.evaluate(&c).unwrap();
        assert_eq!(lazy.actions, cached.actions, "{c:?}");
        assert_eq!(lazy.labels, cached.labels);
        assert_eq!(lazy.flops, cached.flops);
    }
}

#[test]
fn cascade_never_cheaper_than_direct_routing_per_patch() {
    let (suite, prep) = fixture(4);
    let cache = CascadeCache::build(&suite, &prep).unwrap();
    let c = cfg(cache.entropies(0)[3], cache.entropies(1)[5]);
    let inf = idk_infer(&suite, &c, &prep).unwrap();
    let (_, routed) = execute_actions(&suite, &prep, &inf.actions).unwrap();
    let (ph, pw) = prep.patch_size();
    let f1 = suite.flops(1, ph, pw).unwrap();
    let to_f2 = inf.actions.iter().flatten().filter(|&&a| a == 2).count() as u64;
    assert_eq!(inf.flops, prep.len() as u64 * prep.mc_flops + routed + to_f2 * f1);
    assert!(inf.flops >= prep.len() as u64 * prep.mc_flops + routed);
}

#[test]
fn infinite_gate_keeps_small_model() {
    let (suite, prep) = fixture(3);
    let inf = idk_infer(&suite, &cfg(f64::INFINITY, f64::INFINITY), &prep).unwrap();
    assert!(inf.actions.iter().flatten().all(|&a| a == 0));
    assert_eq!(inf.flops, 3 * prep.mc_flops);
}

#[test]
fn threshold_count_must_match_suite() {
    let (suite, prep) = fixture(1);
    let bad = CascadeConfig { thresholds: vec![0.1], lambda_idk: 0.01 };
    assert!(idk_infer(&suite, &bad, &prep).is_err());
}

#[test]
fn idk_loss_matches_hand_computation() {
    let y = LabelMap::new(1, 2, vec![0, 1]).unwrap();
    // [K=2, 1, 2]: pixel 0 -> (0.8, 0.2), pixel 1 -> (0.4, 0.6)
    let probs = [0.8, 0.4, 0.2, 0.6];
    let costs = [0.1, 0.3];
    let want = -(0.8f64.ln() + 0.6f64.ln()) / 2.0 + 0.5 * 0.3;
    assert!((idk_loss(&probs, &y, 1, 0.5, &costs).unwrap() - want).abs() < 1e-12);
    assert!(idk_loss(&probs, &y, 2, 0.5, &costs).is_err());
}

#[test]
fn grid_search_returns_minimum_loss() {
    let (suite, prep) = fixture(4);
    let cache = CascadeCache::build(&suite, &prep).unwrap();
    let grids = threshold_grid(&cache, 5).unwrap();
    let (best, loss) = tune_idk_over(&cache, &grids, 0.01).unwrap();
    for &a in &grids[0] {
        for &b in &grids[1] {
            assert!(cache.mean_loss(&cfg(a, b)).unwrap() >= loss - 1e-12);
        }
    }
    assert!((cache.mean_loss(&best).unwrap() - loss).abs() < 1e-12);
    let e = cache.entropies(0);
    let mu = e.iter().sum::<f64>() / e.len() as f64;
    assert!(grids[0][0] <= mu && mu <= grids[0][4]);
}

#[test]
fn iou_match_reaches_attainable_target() {
    let (suite, prep) = fixture(4);
    let cache = CascadeCache::build(&suite, &prep).unwrap();
    let all_small = cache.iou(&joint_thresholds(&cache, 1.0, 0.01)).unwrap().0;
    let all_up = cache.iou(&joint_thresholds(&cache, 0.0, 0.01)).unwrap().0;
    let (lo, hi) = if all_small < all_up { (all_small, all_up) } else { (all_up, all_small) };
    let target = 0.5 * (lo + hi);
    let out = iou_match_tune(&cache, target, 1e-3, 0.01).unwrap();
    assert!(out.iou >= target, "{out:?}");
    assert!(cache.iou(&out.config).unwrap().0 == out.iou);
    let unreachable = iou_match_tune(&cache, hi + 0.5, 1e-3, 0.01).unwrap();
    assert!(!unreachable.matched);
}

#[test]
fn random_routing_is_uniform_and_matches_expected_flops() {
    let (suite, prep) = fixture(12);
    let inf = random_policy_infer(&suite, &prep, &mut RngStream::new(5)).unwrap();
    let mut counts = [0usize; 3];
    for &a in inf.actions.iter().flatten() {
        counts[a] += 1;
    }
    let n = (12 * prep.patches) as f64;
    for c in counts {
        assert!((c as f64 / n - 1.0 / 3.0).abs() < 0.08, "{counts:?}");
    }
    let expect = random_policy_expected_flops(&suite, &prep).unwrap();
    assert!((inf.flops as f64 / expect - 1.0).abs() < 0.15, "{} vs {expect}", inf.flops);
}
