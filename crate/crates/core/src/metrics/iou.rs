use crate::data::LabelMap;
use crate::error::{Error, Result};

/// Mean Jaccard index over the classes present in `pred` or `gt`.
pub fn mean_iou(pred: &LabelMap, gt: &LabelMap, k: usize) -> Result<f64> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::shape("mean_iou", format!("{}x{} vs {}x{}", pred.height, pred.width, gt.height, gt.width)));
    }
    let mut inter = vec![0u64; k];
    let mut union = vec![0u64; k];
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        let (p, g) = (p as usize, g as usize);
        if p >= k || g >= k {
            return Err(Error::invalid(format!("label {} outside 0..{k}", p.max(g))));
        }
        union[p] += 1;
        if p == g {
            inter[p] += 1;
        } else {
            union[g] += 1;
        }
    }
    let (sum, n) = inter
        .iter()
        .zip(&union)
        .filter(|(_, &u)| u > 0)
        .fold((0.0, 0usize), |(s, n), (&i, &u)| (s + i as f64 / u as f64, n + 1));
    Ok(if n == 0 { 1.0 } else { sum / n as f64 })
}

/// Mean of per-image IoUs.
pub fn dataset_iou(preds: &[LabelMap], gts: &[LabelMap], k: usize) -> Result<f64> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::invalid(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        total += mean_iou(p, g, k)?;
    }
    Ok(total / preds.len() as f64)
}

pub fn iou_per_gigaflop(iou: f64, flops: f64) -> Result<f64> {
    if !(flops > 0.0) {
        return Err(Error::invalid(format!("flop count must be positive, got {flops}")));
    }
    Ok(iou / (flops / 1e9))
}
