use serde::{Deserialize, Serialize};

use crate::data::{patchify, stitch_labels, LabelMap};
use crate::error::{Error, Result};
use crate::metrics::{dataset_iou, mean_iou};
use crate::models::{argmax_labels, categorical_entropy, ModelSuite};
use crate::tensorkit::{Mode, RngStream, Scalar, Tensor};
use crate::training::{Inference, Prepared};

/// Entropy gates of the cascade: patch `p` escalates past model `k` when
/// the mean entropy of `f_k` on it exceeds `thresholds[k]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub thresholds: Vec<f64>,
    pub lambda_idk: f64,
}

impl CascadeConfig {
    pub fn validate(&self, num_models: usize) -> Result<()> {
        if self.thresholds.len() + 1 != num_models {
            return Err(Error::invalid(format!("{} thresholds for {num_models} models", self.thresholds.len())));
        }
        if self.thresholds.iter().any(|t| t.is_nan() || *t < 0.0) || !(self.lambda_idk >= 0.0) {
            return Err(Error::invalid(format!("bad cascade config {self:?}")));
        }
        Ok(())
    }
}

/// Softmax outputs of one model on a patch.
struct PatchOutput {
    labels: LabelMap,
    probs: Vec<f64>,
    entropy: f64,
}

const CHUNK: usize = 64;

fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    let s = logits.shape();
    let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    (0..n)
        .map(|i| {
            let mut out = vec![0.0; k * hw];
            for p in 0..hw {
                let at = |c: usize| (i * k + c) * hw + p;
                let mx = (0..k).map(|c| d[at(c)].to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..k).map(|c| (d[at(c)].to_f64_lossy() - mx).exp()).sum();
                for c in 0..k {
                    out[c * hw + p] = (d[at(c)].to_f64_lossy() - mx).exp() / z;
                }
            }
            out
        })
        .collect()
}

fn mean_entropy(probs: &[f64], k: usize) -> f64 {
    let hw = probs.len() / k;
    (0..hw).map(|p| categorical_entropy((0..k).map(|c| probs[c * hw + p]), k)).sum::<f64>() / hw as f64
}

fn run_model<T: Scalar>(
    suite: &ModelSuite<T>,
    m: usize,
    prep: &Prepared<T>,
    picks: &[(usize, usize)],
) -> Result<Vec<PatchOutput>> {
    let k = suite.num_classes();
    let mut rng = RngStream::new(0);
    let mut out = Vec::with_capacity(picks.len());
    for chunk in picks.chunks(CHUNK) {
        let x = Tensor::stack(&chunk.iter().map(|&(i, p)| prep.inputs[i][p].clone()).collect::<Vec<_>>())?;
        let logits = suite.models[m].logits(&x, Mode::Eval, &mut rng)?;
        for (labels, probs) in argmax_labels(&logits).into_iter().zip(softmax_rows(&logits)) {
            out.push(PatchOutput { entropy: mean_entropy(&probs, k), labels, probs });
        }
    }
    Ok(out)
}

/// Monte Carlo mean probabilities of the small model, tiled `[K, ph, pw]` per patch.
fn small_patch_probs<T: Scalar>(prep: &Prepared<T>, i: usize) -> Result<Vec<Vec<f64>>> {
    let k = prep.num_classes();
    let t = Tensor::new(vec![k, prep.height, prep.width], prep.mc[i].probs.clone())?;
    Ok(patchify(&t, prep.patches)?.patches.into_iter().map(|p| p.into_data()).collect())
}

/// Runs the entropy-gated cascade; only the models a patch actually reaches are executed.
pub fn idk_infer<T: Scalar>(suite: &ModelSuite<T>, cfg: &CascadeConfig, prep: &Prepared<T>) -> Result<Inference> {
    cfg.validate(suite.len())?;
    let n = prep.len();
    let (ph, pw) = prep.patch_size();
    let mut tiles = prep.small_patch_labels.clone();
    let mut actions = vec![vec![0usize; prep.patches]; n];
    let mut flops = n as u64 * prep.mc_flops;
    let mut live: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        for (p, e) in prep.patch_entropy(i).into_iter().enumerate() {
            if e > cfg.thresholds[0] {
                live.push((i, p));
            }
        }
    }
    for m in 1..suite.len() {
        if live.is_empty() {
            break;
        }
        flops += live.len() as u64 * suite.flops(m, ph, pw)?;
        let outs = run_model(suite, m, prep, &live)?;
        let mut next = Vec::new();
        for (&(i, p), o) in live.iter().zip(outs) {
            tiles[i][p] = o.labels;
            actions[i][p] = m;
            if m + 1 < suite.len() && o.entropy > cfg.thresholds[m] {
                next.push((i, p));
            }
        }
        live = next;
    }
    let labels = tiles.iter().map(|t| stitch_labels(t)).collect::<Result<Vec<_>>>()?;
    Ok(Inference { labels, actions, flops })
}

/// Cross-entropy of the answering model plus its weighted cost.
pub fn idk_loss(probs: &[f64], y: &LabelMap, model: usize, lambda_idk: f64, costs: &[f64]) -> Result<f64> {
    let hw = y.labels.len();
    if hw == 0 || probs.len() % hw != 0 {
        return Err(Error::shape("idk_loss", format!("{} probabilities for {hw} pixels", probs.len())));
    }
    let k = probs.len() / hw;
    let cost = *costs.get(model).ok_or_else(|| Error::invalid(format!("model {model} outside the suite")))?;
    let mut ce = 0.0;
    for (p, &l) in y.labels.iter().enumerate() {
        if l as usize >= k {
            return Err(Error::invalid(format!("label {l} outside 0..{k}")));
        }
        ce -= probs[l as usize * hw + p].max(f64::MIN_POSITIVE).ln();
    }
    Ok(ce / hw as f64 + lambda_idk * cost)
}

/// Every model's output on every patch, so cascades with any thresholds
/// can be scored without re-running the networks.
#[derive(Clone, Debug)]
pub struct CascadeCache {
    pub num_models: usize,
    pub num_classes: usize,
    /// `[image][patch][model]`.
    pub labels: Vec<Vec<Vec<LabelMap>>>,
    pub entropy: Vec<Vec<Vec<f64>>>,
    pub ce: Vec<Vec<Vec<f64>>>,
    pub gt: Vec<LabelMap>,
    pub gt_patches: Vec<Vec<LabelMap>>,
    pub costs: Vec<f64>,
    pub mc_flops: u64,
    pub patch_flops: Vec<u64>,
}

impl CascadeCache {
    pub fn build<T: Scalar>(suite: &ModelSuite<T>, prep: &Prepared<T>) -> Result<Self> {
        let n = prep.len();
        let k = suite.num_classes();
        let (ph, pw) = prep.patch_size();
        let mut labels = vec![vec![Vec::with_capacity(suite.len()); prep.patches]; n];
        let mut entropy = vec![vec![Vec::with_capacity(suite.len()); prep.patches]; n];
        let mut ce = vec![vec![Vec::with_capacity(suite.len()); prep.patches]; n];
        let zero = vec![0.0; 1];
        for i in 0..n {
            let probs = small_patch_probs(prep, i)?;
            for (p, e) in prep.patch_entropy(i).into_iter().enumerate() {
                labels[i][p].push(prep.small_patch_labels[i][p].clone());
                entropy[i][p].push(e);
                ce[i][p].push(idk_loss(&probs[p], &prep.gt_patches[i][p], 0, 0.0, &zero)?);
            }
        }
        let picks: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..prep.patches).map(move |p| (i, p))).collect();
        for m in 1..suite.len() {
            for (&(i, p), o) in picks.iter().zip(run_model(suite, m, prep, &picks)?) {
                ce[i][p].push(idk_loss(&o.probs, &prep.gt_patches[i][p], 0, 0.0, &zero)?);
                entropy[i][p].push(o.entropy);
                labels[i][p].push(o.labels);
            }
        }
        let _ = k;
        Ok(Self {
            num_models: suite.len(),
            num_classes: suite.num_classes(),
            labels,
            entropy,
            ce,
            gt: prep.gt.clone(),
            gt_patches: prep.gt_patches.clone(),
            costs: suite.costs().to_vec(),
            mc_flops: prep.mc_flops,
            patch_flops: (0..suite.len())
                .map(|m| if m == 0 { Ok(0) } else { suite.flops(m, ph, pw) })
                .collect::<Result<_>>()?,
        })
    }

    /// Model at which the cascade stops for patch `(i, p)`.
    pub fn exit(&self, cfg: &CascadeConfig, i: usize, p: usize) -> usize {
        let e = &self.entropy[i][p];
        (0..self.num_models - 1).find(|&m| e[m] <= cfg.thresholds[m]).unwrap_or(self.num_models - 1)
    }

    pub fn evaluate(&self, cfg: &CascadeConfig) -> Result<Inference> {
        cfg.validate(self.num_models)?;
        let mut flops = self.labels.len() as u64 * self.mc_flops;
        let mut actions = Vec::with_capacity(self.labels.len());
        let mut out = Vec::with_capacity(self.labels.len());
        for (i, img) in self.labels.iter().enumerate() {
            let a: Vec<usize> = (0..img.len()).map(|p| self.exit(cfg, i, p)).collect();
            flops += a.iter().map(|&m| self.patch_flops[..=m].iter().sum::<u64>()).sum::<u64>();
            out.push(stitch_labels(&a.iter().enumerate().map(|(p, &m)| img[p][m].clone()).collect::<Vec<_>>())?);
            actions.push(a);
        }
        Ok(Inference { labels: out, actions, flops })
    }

    pub fn iou(&self, cfg: &CascadeConfig) -> Result<(f64, Inference)> {
        let inf = self.evaluate(cfg)?;
        Ok((dataset_iou(&inf.labels, &self.gt, self.num_classes)?, inf))
    }

    /// Mean cascade loss over all patches.
    pub fn mean_loss(&self, cfg: &CascadeConfig) -> Result<f64> {
        cfg.validate(self.num_models)?;
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, img) in self.ce.iter().enumerate() {
            for p in 0..img.len() {
                let m = self.exit(cfg, i, p);
                total += img[p][m] + cfg.lambda_idk * self.costs[m];
                count += 1;
            }
        }
        Ok(total / count as f64)
    }

    /// Patch-mean entropies of model `m` over the cached set.
    pub fn entropies(&self, m: usize) -> Vec<f64> {
        self.entropy.iter().flatten().map(|e| e[m]).collect()
    }

    /// Per-patch IoU of model `m`.
    pub fn patch_iou(&self, i: usize, p: usize, m: usize) -> Result<f64> {
        mean_iou(&self.labels[i][p][m], &self.gt_patches[i][p], self.num_classes)
    }
}

/// Grid over `[μ−σ, μ+σ]` of each gated model's validation entropies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub points: usize,
    pub lambda_idk: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { points: 8, lambda_idk: 0.01 }
    }
}

/// Candidate thresholds for each gated model.
pub fn threshold_grid(cache: &CascadeCache, points: usize) -> Result<Vec<Vec<f64>>> {
    if points == 0 {
        return Err(Error::invalid("empty threshold grid"));
    }
    Ok((0..cache.num_models - 1)
        .map(|m| {
            let e = cache.entropies(m);
            let mu = e.iter().sum::<f64>() / e.len() as f64;
            let sd = (e.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / e.len() as f64).sqrt();
            if points == 1 {
                return vec![mu.max(0.0)];
            }
            (0..points).map(|j| (mu - sd + 2.0 * sd * j as f64 / (points - 1) as f64).max(0.0)).collect()
        })
        .collect())
}

/// Exhaustive search over threshold grids; returns the loss-minimising config
/// (first one found on ties) and its loss.
pub fn tune_idk_over(cache: &CascadeCache, grids: &[Vec<f64>], lambda_idk: f64) -> Result<(CascadeConfig, f64)> {
    if grids.len() + 1 != cache.num_models || grids.iter().any(|g| g.is_empty()) {
        return Err(Error::invalid("threshold grid does not cover every gated model"));
    }
    let mut best: Option<(CascadeConfig, f64)> = None;
    let mut idx = vec![0usize; grids.len()];
    loop {
        let cfg = CascadeConfig { thresholds: idx.iter().zip(grids).map(|(&j, g)| g[j]).collect(), lambda_idk };
        let loss = cache.mean_loss(&cfg)?;
        if best.as_ref().map_or(true, |(_, l)| loss < *l) {
            best = Some((cfg, loss));
        }
        let mut d = 0;
        loop {
            if d == idx.len() {
                return Ok(best.expect("grid is non-empty"));
            }
            idx[d] += 1;
            if idx[d] < grids[d].len() {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

pub fn tune_idk(cache: &CascadeCache, grid: &GridSpec) -> Result<CascadeConfig> {
    let grids = threshold_grid(cache, grid.points)?;
    Ok(tune_idk_over(cache, &grids, grid.lambda_idk)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub config: CascadeConfig,
    /// Joint quantile level that produced `config`.
    pub level: f64,
    pub iou: f64,
    pub flops: u64,
    /// Whether the returned IoU lies within tolerance of the target.
    pub matched: bool,
}

fn quantile(sorted: &[f64], t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    if t >= 1.0 {
        return f64::INFINITY;
    }
    let pos = t * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Thresholds at the `t`-quantile of each gated model's entropies on the cached set.
pub fn joint_thresholds(cache: &CascadeCache, t: f64, lambda_idk: f64) -> CascadeConfig {
    let thresholds = (0..cache.num_models - 1)
        .map(|m| {
            let mut e = cache.entropies(m);
            e.sort_by(f64::total_cmp);
            quantile(&e, t)
        })
        .collect();
    CascadeConfig { thresholds, lambda_idk }
}

const MATCH_GRID: usize = 200;

/// Searches a joint quantile level whose cascade IoU is the least upper
/// bound of `target` (within `tolerance`). Level 0 escalates every uncertain
/// patch to the largest model; level 1 keeps everything on `f_0`. A coarse
/// scan picks the bracket, bisection refines it. When no level reaches the
/// target, the level with the highest IoU is returned unmatched.
pub fn iou_match_tune(cache: &CascadeCache, target: f64, tolerance: f64, lambda_idk: f64) -> Result<MatchOutcome> {
    let outcome = |t: f64| -> Result<MatchOutcome> {
        let config = joint_thresholds(cache, t, lambda_idk);
        let (iou, inf) = cache.iou(&config)?;
        Ok(MatchOutcome {
            config,
            level: t,
            iou,
            flops: inf.flops,
            matched: iou >= target && iou - target <= tolerance,
        })
    };
    let scan = (0..=MATCH_GRID).map(|j| outcome(j as f64 / MATCH_GRID as f64)).collect::<Result<Vec<_>>>()?;
    let above = |o: &&MatchOutcome| o.iou >= target;
    let Some(best) = scan
        .iter()
        .filter(above)
        .min_by(|a, b| (a.iou - target).total_cmp(&(b.iou - target)).then(a.flops.cmp(&b.flops)))
    else {
        return Ok(scan.into_iter().max_by(|a, b| a.iou.total_cmp(&b.iou)).expect("scan is non-empty"));
    };
    let mut best = best.clone();
    if best.matched {
        return Ok(best);
    }
    let j = (best.level * MATCH_GRID as f64).round() as usize;
    for nb in [j.checked_sub(1), Some(j + 1).filter(|&k| k <= MATCH_GRID)].into_iter().flatten() {
        if scan[nb].iou >= target {
            continue;
        }
        let (mut good, mut bad) = (best.level, scan[nb].level);
        for _ in 0..40 {
            let mid = 0.5 * (good + bad);
            let m = outcome(mid)?;
            if m.iou >= target {
                good = mid;
                if m.iou < best.iou {
                    best = m;
                }
            } else {
                bad = mid;
            }
            if best.matched {
                return Ok(best);
            }
        }
    }
    Ok(best)
}
