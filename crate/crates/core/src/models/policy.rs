use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorkit::{flops, Graph, Mode, ParamSet, RngStream, Scalar, Tensor, Var};

/// Routing policy architecture: stride-2 3×3 convolutions halve the state
/// until it matches the patch grid, then a 1×1 conv emits one logit per
/// model for every patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    /// State channels: K class probabilities plus one entropy channel.
    pub in_channels: usize,
    /// State height and width.
    pub input_size: (usize, usize),
    /// Patches per side (√P).
    pub grid: usize,
    /// Number of routable models (m + 1).
    pub num_actions: usize,
    /// Output channels of the strided stages; the last entry repeats as needed.
    pub channels: Vec<usize>,
}

impl PolicySpec {
    pub fn stages(&self) -> Result<usize> {
        let (h, w) = self.input_size;
        if self.grid == 0 || h % self.grid != 0 || w % self.grid != 0 {
            return Err(Error::shape("policy", format!("{h}x{w} not divisible into a {}-grid", self.grid)));
        }
        let (fh, fw) = (h / self.grid, w / self.grid);
        if fh != fw || !fh.is_power_of_two() {
            return Err(Error::shape("policy", format!("{h}x{w} -> {} needs a power-of-two reduction", self.grid)));
        }
        Ok(fh.trailing_zeros() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_actions == 0 || self.channels.is_empty() {
            return Err(Error::invalid(format!("degenerate policy spec {self:?}")));
        }
        self.stages().map(|_| ())
    }

    fn stage_channels(&self, i: usize) -> usize {
        self.channels[i.min(self.channels.len() - 1)]
    }

    fn head_in(&self) -> Result<usize> {
        let n = self.stages()?;
        Ok(if n == 0 { self.in_channels } else { self.stage_channels(n - 1) })
    }

    pub fn param_count(&self) -> Result<usize> {
        let mut total = 0;
        let mut prev = self.in_channels;
        for i in 0..self.stages()? {
            let c = self.stage_channels(i);
            total += 9 * prev * c + c;
            prev = c;
        }
        Ok(total + prev * self.num_actions + self.num_actions)
    }

    /// Flops of one forward pass producing logits.
    pub fn flops(&self) -> Result<u64> {
        let (mut h, mut w) = self.input_size;
        let mut prev = self.in_channels;
        let mut total = 0;
        for i in 0..self.stages()? {
            let c = self.stage_channels(i);
            h /= 2;
            w /= 2;
            total += flops::conv2d(1, prev, c, 3, 3, h, w) + flops::elementwise(c * h * w);
            prev = c;
        }
        Ok(total + flops::conv2d(1, prev, self.num_actions, 1, 1, self.grid, self.grid))
    }
}

/// Routing policy network.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet<T: Scalar = f32> {
    pub spec: PolicySpec,
    pub params: ParamSet<T>,
}

/// Per-patch categorical distributions over models, row-major patch order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchProbs {
    pub rows: Vec<Vec<f64>>,
}

impl PatchProbs {
    pub fn argmax(&self) -> Vec<usize> {
        self.rows
            .iter()
            .map(|r| {
                let mut best = 0;
                for (i, &p) in r.iter().enumerate() {
                    if p > r[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

impl<T: Scalar> PolicyNet<T> {
    /// He-initialised stages and a zeroed head, so a fresh policy is uniform.
    pub fn new(spec: PolicySpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamSet::new();
        let mut prev = spec.in_channels;
        for i in 0..spec.stages()? {
            let c = spec.stage_channels(i);
            params.init_conv(&format!("s{i}"), prev, c, 3, rng);
            prev = c;
        }
        params.insert("head.w", Tensor::zeros(&[spec.num_actions, prev, 1, 1]));
        params.insert("head.b", Tensor::zeros(&[spec.num_actions]));
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: PolicySpec, params: ParamSet<T>) -> Result<Self> {
        spec.validate()?;
        if params.count() != spec.param_count()? {
            return Err(Error::invalid("policy parameter count does not match its spec"));
        }
        Ok(Self { spec, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Records the forward pass; `state: [N, K+1, H, W]` → logits `[N, m+1, g, g]`.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, state: Var) -> Result<Var> {
        let s = g.value(state).shape().to_vec();
        let (h, w) = self.spec.input_size;
        if s.len() != 4 || s[1] != self.spec.in_channels || s[2] != h || s[3] != w {
            return Err(Error::shape(
                "policy",
                format!("state {s:?}, expected [N, {}, {h}, {w}]", self.spec.in_channels),
            ));
        }
        let mut y = state;
        for i in 0..self.spec.stages()? {
            let wv = g.param(&format!("s{i}.w"), self.params.get(&format!("s{i}.w"))?);
            let bv = g.param(&format!("s{i}.b"), self.params.get(&format!("s{i}.b"))?);
            y = g.conv2d(y, wv, bv, 2, 1)?;
            y = g.relu(y);
        }
        debug_assert_eq!(self.spec.head_in().ok(), Some(g.value(y).shape()[1]));
        let wv = g.param("head.w", self.params.get("head.w")?);
        let bv = g.param("head.b", self.params.get("head.b")?);
        g.conv2d(y, wv, bv, 1, 0)
    }

    /// Per-patch probabilities for a batch of states.
    pub fn probabilities(&self, states: &Tensor<T>) -> Result<Vec<PatchProbs>> {
        let mut g = Graph::new(Mode::Eval);
        let sv = g.input_ref(states);
        let logits = self.forward(&mut g, sv)?;
        let probs = g.softmax(logits)?;
        let pt = g.value(probs);
        if !pt.all_finite() {
            return Err(Error::NonFinite("policy forward"));
        }
        let (n, a) = (pt.shape()[0], pt.shape()[1]);
        let cells = self.spec.grid * self.spec.grid;
        Ok((0..n)
            .map(|i| PatchProbs {
                rows: (0..cells)
                    .map(|p| (0..a).map(|k| pt.data()[(i * a + k) * cells + p].to_f64_lossy()).collect())
                    .collect(),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> PolicySpec {
        PolicySpec { in_channels: 4, input_size: (64, 64), grid: 4, num_actions: 3, channels: vec![8, 16, 32, 32] }
    }

    #[test]
    fn reference_architecture_is_about_fifteen_thousand_parameters() {
        let s = spec();
        // 9·4·8+8 + 9·8·16+16 + 9·16·32+32 + 9·32·32+32 + 32·3+3
        assert_eq!(s.param_count().unwrap(), 296 + 1168 + 4640 + 9248 + 99);
        let p = PolicyNet::<f32>::new(s.clone(), &mut RngStream::new(0)).unwrap();
        assert_eq!(p.param_count(), s.param_count().unwrap());
    }

    #[test]
    fn fresh_policy_is_uniform() {
        let p = PolicyNet::<f32>::new(spec(), &mut RngStream::new(0)).unwrap();
        let mut r = RngStream::new(1);
        let state = Tensor::new(vec![1, 4, 64, 64], (0..4 * 64 * 64).map(|_| r.uniform() as f32).collect()).unwrap();
        let probs = p.probabilities(&state).unwrap();
        assert_eq!(probs[0].rows.len(), 16);
        for row in &probs[0].rows {
            for &v in row {
                assert!((v - 1.0 / 3.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_patch_grid() {
        let s = PolicySpec { in_channels: 3, input_size: (32, 32), grid: 1, num_actions: 3, channels: vec![8, 16] };
        assert_eq!(s.stages().unwrap(), 5);
        let p = PolicyNet::<f32>::new(s, &mut RngStream::new(0)).unwrap();
        let probs = p.probabilities(&Tensor::zeros(&[2, 3, 32, 32])).unwrap();
        assert_eq!(probs.len(), 2);
        assert_eq!(probs[0].rows.len(), 1);
    }

    #[test]
    fn state_shape_mismatch() {
        let p = PolicyNet::<f32>::new(spec(), &mut RngStream::new(0)).unwrap();
        assert!(p.probabilities(&Tensor::zeros(&[1, 3, 64, 64])).is_err());
    }

    #[test]
    fn recorded_flops_match_spec() {
        let p = PolicyNet::<f32>::new(spec(), &mut RngStream::new(0)).unwrap();
        let x = Tensor::zeros(&[1, 4, 64, 64]);
        let mut g = Graph::new(Mode::Eval);
        let xv = g.input_ref(&x);
        p.forward(&mut g, xv).unwrap();
        assert_eq!(g.flops(), p.spec.flops().unwrap());
    }
}
