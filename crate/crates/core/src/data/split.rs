use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorkit::RngStream;

use super::SegSample;

/// Fractions for pretraining, RL, fine-tuning, validation and test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub pretrain: f64,
    pub rl: f64,
    pub finetune: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn as_array(&self) -> [f64; 5] {
        [self.pretrain, self.rl, self.finetune, self.val, self.test]
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.as_array();
        if a.iter().any(|v| !v.is_finite() || *v < 0.0) || (a.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("split ratios {a:?} must be non-negative and sum to 1")));
        }
        Ok(())
    }

    /// Largest-remainder allocation of `n` items; ties go to the earlier split.
    pub fn sizes(&self, n: usize) -> Result<[usize; 5]> {
        self.validate()?;
        let a = self.as_array();
        let exact: Vec<f64> = a.iter().map(|r| r * n as f64).collect();
        let mut sizes = [0usize; 5];
        for (s, e) in sizes.iter_mut().zip(&exact) {
            *s = e.floor() as usize;
        }
        let mut order: Vec<usize> = (0..5).collect();
        order.sort_by(|&i, &j| (exact[j] - exact[j].floor()).total_cmp(&(exact[i] - exact[i].floor())).then(i.cmp(&j)));
        let mut left = n - sizes.iter().sum::<usize>();
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            if a[i] > 0.0 {
                sizes[i] += 1;
                left -= 1;
            }
        }
        Ok(sizes)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitSet {
    pub pretrain: Vec<SegSample>,
    pub rl: Vec<SegSample>,
    pub finetune: Vec<SegSample>,
    pub val: Vec<SegSample>,
    pub test: Vec<SegSample>,
}

impl SplitSet {
    pub const NAMES: [&'static str; 5] = ["pretrain", "rl", "finetune", "val", "test"];

    pub fn parts(&self) -> [&Vec<SegSample>; 5] {
        [&self.pretrain, &self.rl, &self.finetune, &self.val, &self.test]
    }

    pub fn parts_mut(&mut self) -> [&mut Vec<SegSample>; 5] {
        [&mut self.pretrain, &mut self.rl, &mut self.finetune, &mut self.val, &mut self.test]
    }

    pub fn sizes(&self) -> [usize; 5] {
        self.parts().map(|p| p.len())
    }

    /// Concatenates the same split of several sets.
    pub fn merge(sets: Vec<SplitSet>) -> SplitSet {
        let mut out = SplitSet::default();
        for set in sets {
            for (dst, src) in out.parts_mut().into_iter().zip([set.pretrain, set.rl, set.finetune, set.val, set.test]) {
                dst.extend(src);
            }
        }
        out
    }
}

/// Seeded shuffle followed by a contiguous partition.
pub fn split_dataset(samples: Vec<SegSample>, ratios: SplitRatios, seed: u64) -> Result<SplitSet> {
    let sizes = ratios.sizes(samples.len())?;
    let mut items: Vec<Option<SegSample>> = samples.into_iter().map(Some).collect();
    RngStream::new(seed).named("split").shuffle(&mut items);
    let mut it = items.into_iter().map(|s| s.expect("each sample taken once"));
    let mut set = SplitSet::default();
    for (part, n) in set.parts_mut().into_iter().zip(sizes) {
        part.extend(it.by_ref().take(n));
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabelMap, SampleMeta};
    use crate::tensorkit::Tensor;

    fn thirds() -> SplitRatios {
        SplitRatios { pretrain: 1.0 / 3.0, rl: 1.0 / 3.0, finetune: 1.0 / 3.0, val: 0.0, test: 0.0 }
    }

    fn tagged(n: usize) -> Vec<SegSample> {
        (0..n)
            .map(|i| {
                SegSample::new(
                    Tensor::full(&[1, 1, 1], i as f32),
                    LabelMap::filled(1, 1, 0),
                    SampleMeta { generator: "t".into(), noise: "clean".into() },
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn near_equal_thirds() {
        assert_eq!(thirds().sizes(1270).unwrap(), [424, 423, 423, 0, 0]);
    }

    #[test]
    fn everything_in_pretrain() {
        let r = SplitRatios { pretrain: 1.0, rl: 0.0, finetune: 0.0, val: 0.0, test: 0.0 };
        let set = split_dataset(tagged(17), r, 0).unwrap();
        assert_eq!(set.sizes(), [17, 0, 0, 0, 0]);
    }

    #[test]
    fn union_is_the_input() {
        let r = SplitRatios { pretrain: 0.3, rl: 0.3, finetune: 0.2, val: 0.1, test: 0.1 };
        let set = split_dataset(tagged(53), r, 4).unwrap();
        let mut ids: Vec<u32> = set.parts().iter().flat_map(|p| p.iter().map(|s| s.image.data()[0] as u32)).collect();
        ids.sort();
        assert_eq!(ids, (0..53).collect::<Vec<_>>());
        assert_eq!(set.sizes().iter().sum::<usize>(), 53);
    }

    #[test]
    fn invalid_ratios() {
        let r = SplitRatios { pretrain: 0.5, rl: 0.3, finetune: 0.0, val: 0.0, test: 0.0 };
        assert!(split_dataset(tagged(3), r, 0).is_err());
    }
}
