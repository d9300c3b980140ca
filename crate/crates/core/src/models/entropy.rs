use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::tensorkit::{Mode, RngStream, Scalar, Tensor};

use super::UNet;

/// Per-pixel predictive entropy (nats) of a Monte Carlo mean prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyMap {
    pub height: usize,
    pub width: usize,
    pub samples: usize,
    pub values: Vec<f64>,
}

impl EntropyMap {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Mean softmax over Monte Carlo samples, its argmax and its entropy.
#[derive(Clone, Debug, PartialEq)]
pub struct McPrediction {
    /// `[K, H, W]` class probabilities.
    pub probs: Vec<f64>,
    pub num_classes: usize,
    pub labels: LabelMap,
    pub entropy: EntropyMap,
}

/// Per-position argmax over the channel axis of `[N, K, H, W]` scores.
/// Ties resolve to the smallest class index.
pub fn argmax_labels<T: Scalar>(scores: &Tensor<T>) -> Vec<LabelMap> {
    let s = scores.shape();
    let (n, k, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    (0..n)
        .map(|i| {
            let labels = (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if scores.data()[(i * k + c) * hw + p] > scores.data()[(i * k + best) * hw + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap { height: h, width: w, labels }
        })
        .collect()
}

/// Deterministic prediction: eval-mode logits and their per-pixel argmax.
pub fn predict<T: Scalar>(model: &UNet<T>, input: &Tensor<T>) -> Result<(Vec<LabelMap>, Tensor<T>)> {
    let logits = model.logits(input, Mode::Eval, &mut RngStream::new(0))?;
    Ok((argmax_labels(&logits), logits))
}

/// Entropy `-Σ p ln p` of one categorical, clamped into `[0, ln K]`.
pub fn categorical_entropy(p: impl Iterator<Item = f64>, k: usize) -> f64 {
    let h: f64 = p.filter(|&v| v > 0.0).map(|v| -v * v.ln()).sum();
    h.clamp(0.0, (k as f64).ln())
}

/// Per-pixel entropy of `[K, H, W]` probabilities.
pub fn entropy_of(probs: &[f64], k: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    (0..hw).map(|p| categorical_entropy((0..k).map(|c| probs[c * hw + p]), k)).collect()
}

/// Runs `samples` dropout-active forward passes over a batch `[B, C, H, W]`.
/// Sample `s` draws its dropout masks from `rng.fork(s)`.
pub fn mc_entropy<T: Scalar>(
    model: &UNet<T>,
    images: &Tensor<T>,
    samples: usize,
    rng: &RngStream,
) -> Result<Vec<McPrediction>> {
    if samples < 2 {
        return Err(Error::invalid(format!("Monte Carlo dropout needs at least 2 samples, got {samples}")));
    }
    if model.spec.dropout_rate <= 0.0 {
        return Err(Error::invalid("Monte Carlo dropout needs a model with dropout"));
    }
    let s = images.shape();
    let (b, h, w) = (s[0], s[2], s[3]);
    let k = model.spec.num_classes;
    let per = k * h * w;
    let mut sum = vec![0.0f64; b * per];
    for i in 0..samples {
        let logits = model.logits(images, Mode::McDropout, &mut rng.fork(i as u64))?;
        accumulate_softmax(&logits, &mut sum);
    }
    let inv = 1.0 / samples as f64;
    Ok((0..b)
        .map(|i| {
            let probs: Vec<f64> = sum[i * per..(i + 1) * per].iter().map(|v| v * inv).collect();
            let mean = Tensor::new(vec![1, k, h, w], probs.clone()).unwrap();
            let labels = argmax_labels(&mean).remove(0);
            let values = entropy_of(&probs, k, h, w);
            McPrediction { probs, num_classes: k, labels, entropy: EntropyMap { height: h, width: w, samples, values } }
        })
        .collect())
}

fn accumulate_softmax<T: Scalar>(logits: &Tensor<T>, sum: &mut [f64]) {
    let s = logits.shape();
    let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    for i in 0..n {
        for p in 0..hw {
            let at = |c: usize| (i * k + c) * hw + p;
            let mx = (0..k).map(|c| d[at(c)].to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (d[at(c)].to_f64_lossy() - mx).exp()).sum();
            for c in 0..k {
                sum[at(c)] += (d[at(c)].to_f64_lossy() - mx).exp() / z;
            }
        }
    }
}

/// Policy input `[B, K+1, H, W]`: mean class probabilities plus entropy.
pub fn policy_state<T: Scalar>(preds: &[McPrediction]) -> Result<Tensor<T>> {
    let first = preds.first().ok_or_else(|| Error::invalid("empty prediction batch"))?;
    let (k, h, w) = (first.num_classes, first.entropy.height, first.entropy.width);
    let mut data = Vec::with_capacity(preds.len() * (k + 1) * h * w);
    for p in preds {
        data.extend(p.probs.iter().map(|&v| T::from_f64_lossy(v)));
        data.extend(p.entropy.values.iter().map(|&v| T::from_f64_lossy(v)));
    }
    Tensor::new(vec![preds.len(), k + 1, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::UNetSpec;

    #[test]
    fn uniform_probabilities_have_maximum_entropy() {
        let e = categorical_entropy([1.0 / 3.0; 3].into_iter(), 3);
        assert!((e - 3f64.ln()).abs() < 1e-12);
        assert!((e - 1.0986).abs() < 1e-4);
    }

    #[test]
    fn one_hot_has_zero_entropy() {
        assert_eq!(categorical_entropy([0.0, 1.0, 0.0].into_iter(), 3), 0.0);
    }

    #[test]
    fn argmax_ties_go_to_lowest_class() {
        let t = Tensor::<f32>::zeros(&[1, 3, 2, 2]);
        assert!(argmax_labels(&t)[0].labels.iter().all(|&l| l == 0));
        let mut t = Tensor::<f32>::zeros(&[1, 3, 1, 2]);
        t.data_mut()[4] = 1.0;
        t.data_mut()[5] = 1.0;
        assert_eq!(argmax_labels(&t)[0].labels, vec![2, 2]);
    }

    #[test]
    fn collapsed_model_has_zero_entropy() {
        // Zero every weight and give the head bias a huge margin for class 1.
        let spec = UNetSpec { depth: 1, base_channels: 2, in_channels: 1, num_classes: 3, dropout_rate: 0.5 };
        let mut m = UNet::<f32>::new(spec, &mut RngStream::new(0)).unwrap();
        for (_, t) in m.params.iter_mut() {
            t.data_mut().fill(0.0);
        }
        m.params.get_mut("head.b").unwrap().data_mut()[1] = 100.0;
        let x = Tensor::full(&[2, 1, 4, 4], 0.5);
        let preds = mc_entropy(&m, &x, 4, &RngStream::new(3)).unwrap();
        for p in &preds {
            assert!(p.entropy.values.iter().all(|&e| e < 1e-12));
            assert!(p.labels.labels.iter().all(|&l| l == 1));
        }
    }

    #[test]
    fn rejects_bad_sample_count_or_no_dropout() {
        let mut spec = UNetSpec { depth: 1, base_channels: 2, in_channels: 1, num_classes: 3, dropout_rate: 0.1 };
        let m = UNet::<f32>::new(spec.clone(), &mut RngStream::new(0)).unwrap();
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(mc_entropy(&m, &x, 1, &RngStream::new(0)).is_err());
        spec.dropout_rate = 0.0;
        let m = UNet::<f32>::new(spec, &mut RngStream::new(0)).unwrap();
        assert!(mc_entropy(&m, &x, 5, &RngStream::new(0)).is_err());
    }

    #[test]
    fn entropy_is_bounded_and_sampling_is_reproducible() {
        let spec = UNetSpec { depth: 2, base_channels: 4, in_channels: 1, num_classes: 3, dropout_rate: 0.3 };
        let m = UNet::<f32>::new(spec, &mut RngStream::new(4)).unwrap();
        let mut r = RngStream::new(5);
        let x = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|_| r.uniform() as f32).collect()).unwrap();
        let a = mc_entropy(&m, &x, 5, &RngStream::new(6)).unwrap();
        let b = mc_entropy(&m, &x, 5, &RngStream::new(6)).unwrap();
        assert_eq!(a, b);
        for p in &a {
            assert!(p.entropy.values.iter().all(|&e| (0.0..=3f64.ln()).contains(&e)));
            for px in 0..64 {
                let s: f64 = (0..3).map(|c| p.probs[c * 64 + px]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}
