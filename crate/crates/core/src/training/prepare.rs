use crate::data::{grid_side, patchify, patchify_labels, stitch_labels, LabelMap, SegSample};
use crate::error::{Error, Result};
use crate::metrics::mean_iou;
use crate::models::{argmax_labels, mc_entropy, policy_state, McPrediction, ModelSuite, PolicyNet, UNet};
use crate::tensorkit::{Mode, RngStream, Scalar, Tensor};

use super::Action;

/// Images per Monte Carlo dropout batch; batch `j` draws from `rng.fork(j)`.
pub const MC_CHUNK: usize = 16;
const PATCH_CHUNK: usize = 64;

/// A dataset with the small model's Monte Carlo prediction and the patch
/// tiling precomputed, as consumed by routing, training and baselines.
#[derive(Clone, Debug)]
pub struct Prepared<T: Scalar = f32> {
    pub patches: usize,
    pub grid: usize,
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    pub mc: Vec<McPrediction>,
    pub small_patch_labels: Vec<Vec<LabelMap>>,
    pub inputs: Vec<Vec<Tensor<T>>>,
    pub gt: Vec<LabelMap>,
    pub gt_patches: Vec<Vec<LabelMap>>,
    pub noise: Vec<String>,
    /// Flops of the `samples` dropout forwards for one image.
    pub mc_flops: u64,
}

impl<T: Scalar> Prepared<T> {
    pub fn len(&self) -> usize {
        self.mc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mc.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.mc[0].num_classes
    }

    pub fn patch_size(&self) -> (usize, usize) {
        (self.height / self.grid, self.width / self.grid)
    }

    /// Policy states `[B, K+1, H, W]` for the given images.
    pub fn states(&self, idx: &[usize]) -> Result<Tensor<T>> {
        policy_state(&idx.iter().map(|&i| self.mc[i].clone()).collect::<Vec<_>>())
    }

    /// Mean entropy of the small model inside each patch of image `i`.
    pub fn patch_entropy(&self, i: usize) -> Vec<f64> {
        let e = &self.mc[i].entropy;
        let (ph, pw) = self.patch_size();
        (0..self.patches)
            .map(|p| {
                let (gy, gx) = (p / self.grid, p % self.grid);
                let mut s = 0.0;
                for y in 0..ph {
                    for x in 0..pw {
                        s += e.values[(gy * ph + y) * e.width + gx * pw + x];
                    }
                }
                s / (ph * pw) as f64
            })
            .collect()
    }
}

/// Runs the small model's Monte Carlo dropout over `data` and tiles everything into patches.
pub fn prepare<T: Scalar>(
    small: &UNet<T>,
    data: &[SegSample],
    patches: usize,
    samples: usize,
    rng: &RngStream,
) -> Result<Prepared<T>> {
    let first = data.first().ok_or_else(|| Error::invalid("cannot prepare an empty dataset"))?;
    let (h, w) = (first.height(), first.width());
    let grid = grid_side(patches)?;
    let mut mc = Vec::with_capacity(data.len());
    for (j, chunk) in data.chunks(MC_CHUNK).enumerate() {
        let x = Tensor::stack(&chunk.iter().map(|s| s.image.cast::<T>()).collect::<Vec<_>>())?;
        mc.extend(mc_entropy(small, &x, samples, &rng.fork(j as u64))?);
    }
    let mut out = Prepared {
        patches,
        grid,
        samples,
        height: h,
        width: w,
        small_patch_labels: Vec::with_capacity(data.len()),
        inputs: Vec::with_capacity(data.len()),
        gt: Vec::with_capacity(data.len()),
        gt_patches: Vec::with_capacity(data.len()),
        noise: data.iter().map(|s| s.meta.noise.clone()).collect(),
        mc_flops: samples as u64 * small.spec.flops(h, w, Mode::McDropout)?,
        mc: Vec::new(),
    };
    for (s, m) in data.iter().zip(&mc) {
        out.small_patch_labels.push(patchify_labels(&m.labels, patches)?);
        out.inputs.push(patchify(&s.image.cast::<T>(), patches)?.patches);
        out.gt.push(s.labels.clone());
        out.gt_patches.push(patchify_labels(&s.labels, patches)?);
    }
    out.mc = mc;
    Ok(out)
}

/// Eval-mode label maps of `model` on the listed `(image, patch)` tiles.
pub fn predict_patches<T: Scalar>(
    model: &UNet<T>,
    prep: &Prepared<T>,
    picks: &[(usize, usize)],
) -> Result<Vec<LabelMap>> {
    let mut out = Vec::with_capacity(picks.len());
    let mut rng = RngStream::new(0);
    for chunk in picks.chunks(PATCH_CHUNK) {
        let x = Tensor::stack(&chunk.iter().map(|&(i, p)| prep.inputs[i][p].clone()).collect::<Vec<_>>())?;
        out.extend(argmax_labels(&model.logits(&x, Mode::Eval, &mut rng)?));
    }
    Ok(out)
}

/// `table[i][p][k]`: IoU of model `k` on patch `p` of image `i`; model 0
/// uses the Monte Carlo mean prediction.
pub type IouTable = Vec<Vec<Vec<Option<f64>>>>;

pub fn iou_table<T: Scalar>(suite: &ModelSuite<T>, prep: &Prepared<T>) -> Result<IouTable> {
    let k = prep.num_classes();
    let n = prep.len();
    let mut table = vec![vec![vec![None; suite.len()]; prep.patches]; n];
    for i in 0..n {
        for p in 0..prep.patches {
            table[i][p][0] = Some(mean_iou(&prep.small_patch_labels[i][p], &prep.gt_patches[i][p], k)?);
        }
    }
    let picks: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..prep.patches).map(move |p| (i, p))).collect();
    for (m, model) in suite.models.iter().enumerate().skip(1) {
        for (&(i, p), pred) in picks.iter().zip(predict_patches(model, prep, &picks)?) {
            table[i][p][m] = Some(mean_iou(&pred, &prep.gt_patches[i][p], k)?);
        }
    }
    Ok(table)
}

/// Greedy (argmax) routing of every image.
pub fn route<T: Scalar>(policy: &PolicyNet<T>, prep: &Prepared<T>) -> Result<Vec<Action>> {
    let mut out = Vec::with_capacity(prep.len());
    let idx: Vec<usize> = (0..prep.len()).collect();
    for chunk in idx.chunks(MC_CHUNK) {
        out.extend(policy.probabilities(&prep.states(chunk)?)?.iter().map(|p| p.argmax()));
    }
    Ok(out)
}

/// Segmentations, per-patch assignments and total flops of a routed run.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub labels: Vec<LabelMap>,
    pub actions: Vec<Action>,
    pub flops: u64,
}

/// Assembles segmentations for fixed actions; patches routed to model 0
/// reuse the Monte Carlo mean. Returns the labels and the routed-model flops.
pub fn execute_actions<T: Scalar>(
    suite: &ModelSuite<T>,
    prep: &Prepared<T>,
    actions: &[Action],
) -> Result<(Vec<LabelMap>, u64)> {
    if actions.len() != prep.len() {
        return Err(Error::invalid(format!("{} actions for {} images", actions.len(), prep.len())));
    }
    let (ph, pw) = prep.patch_size();
    let mut tiles = prep.small_patch_labels.clone();
    let mut flops = 0;
    for (m, model) in suite.models.iter().enumerate().skip(1) {
        let picks: Vec<(usize, usize)> = actions
            .iter()
            .enumerate()
            .flat_map(|(i, a)| a.iter().enumerate().filter(move |(_, &k)| k == m).map(move |(p, _)| (i, p)))
            .collect();
        if picks.is_empty() {
            continue;
        }
        flops += picks.len() as u64 * suite.flops(m, ph, pw)?;
        for (&(i, p), pred) in picks.iter().zip(predict_patches(model, prep, &picks)?) {
            tiles[i][p] = pred;
        }
    }
    if let Some(bad) = actions.iter().flatten().find(|&&a| a >= suite.len()) {
        return Err(Error::invalid(format!("action {bad} outside the suite")));
    }
    let labels = tiles.iter().map(|t| stitch_labels(t)).collect::<Result<Vec<_>>>()?;
    Ok((labels, flops))
}

/// Policy-routed inference: Monte Carlo state, policy argmax, then routed models.
pub fn paser_infer<T: Scalar>(suite: &ModelSuite<T>, policy: &PolicyNet<T>, prep: &Prepared<T>) -> Result<Inference> {
    let actions = route(policy, prep)?;
    let (labels, routed) = execute_actions(suite, prep, &actions)?;
    let per_image = prep.mc_flops + policy.spec.flops()?;
    Ok(Inference { labels, actions, flops: prep.len() as u64 * per_image + routed })
}
