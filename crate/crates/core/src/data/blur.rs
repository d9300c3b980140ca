use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalised discrete Gaussian truncated at 3σ.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil().max(1.0) as isize;
    let w: Vec<f64> = (-half..=half).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable convolution of an `h×w` plane with zero padding.
pub fn convolve_separable(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let half = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let xx = x as isize + k as isize - half;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let yy = y as isize + k as isize - half;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Degradation applied to glyph masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NoiseType {
    GaussR1,
    GaussR2,
    Box,
}

impl NoiseType {
    pub const ALL: [NoiseType; 3] = [NoiseType::GaussR1, NoiseType::GaussR2, NoiseType::Box];

    pub fn name(self) -> &'static str {
        match self {
            NoiseType::GaussR1 => "gauss_r1",
            NoiseType::GaussR2 => "gauss_r2",
            NoiseType::Box => "box",
        }
    }

    /// 1-D factor of the separable 2-D kernel.
    pub fn kernel(self) -> Vec<f64> {
        match self {
            NoiseType::GaussR1 => gaussian_kernel(1.0 / 1.5),
            NoiseType::GaussR2 => gaussian_kernel(2.0 / 1.5),
            NoiseType::Box => vec![1.0 / 3.0; 3],
        }
    }

    pub fn apply(self, plane: &[f64], h: usize, w: usize) -> Vec<f64> {
        convolve_separable(plane, h, w, &self.kernel())
    }
}

impl fmt::Display for NoiseType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NoiseType::ALL
            .into_iter()
            .find(|n| n.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown noise type `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_are_normalised() {
        for n in NoiseType::ALL {
            let k = n.kernel();
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(k.len() % 2, 1);
        }
        assert_eq!(NoiseType::GaussR1.kernel().len(), 5);
        assert_eq!(NoiseType::GaussR2.kernel().len(), 9);
    }

    #[test]
    fn box_blur_of_a_point() {
        let mut plane = vec![0.0; 25];
        plane[12] = 9.0;
        let out = NoiseType::Box.apply(&plane, 5, 5);
        for y in 0..5 {
            for x in 0..5 {
                let inside = (1..=3).contains(&y) && (1..=3).contains(&x);
                assert!((out[y * 5 + x] - if inside { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parse_names() {
        assert_eq!("gauss_r2".parse::<NoiseType>().unwrap(), NoiseType::GaussR2);
        assert!("median".parse::<NoiseType>().is_err());
    }
}
