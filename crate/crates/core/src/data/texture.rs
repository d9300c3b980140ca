use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorkit::{RngStream, Tensor};

use super::blur::{convolve_separable, gaussian_kernel};
use super::{LabelMap, SampleMeta, SegSample};

/// Knobs of the three-phase texture generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureConfig {
    pub size: usize,
    pub balance: [f64; 3],
    /// Smoothing of the coarse phase field.
    pub coarse_sigma: f64,
    /// Smoothing of the fine phase field mixed in where the roughness mask is high.
    pub fine_sigma: f64,
    /// Weight of the fine field.
    pub fine_weight: f64,
    /// Grey level of each phase.
    pub intensities: [f64; 3],
    /// Amplitude of the speckle texture carried by class 1.
    pub speckle: f64,
    /// Correlation length of the speckle.
    pub speckle_sigma: f64,
    /// Point-spread blur applied to the rendered image.
    pub render_blur: f64,
    /// Amplitude of correlated and white acquisition noise.
    pub correlated_noise: f64,
    pub white_noise: f64,
}

impl Default for TextureConfig {
    fn default() -> Self {
        Self {
            size: 64,
            balance: [0.2, 0.2, 0.6],
            coarse_sigma: 8.0,
            fine_sigma: 1.2,
            fine_weight: 0.8,
            intensities: [0.3, 0.45, 0.8],
            speckle: 0.3,
            speckle_sigma: 0.6,
            render_blur: 0.6,
            correlated_noise: 0.08,
            white_noise: 0.04,
        }
    }
}

fn check_balance(b: &[f64; 3]) -> Result<()> {
    if b.iter().any(|&v| !(0.0..=1.0).contains(&v) || !v.is_finite()) || (b.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("class balance {b:?} is not a probability partition")));
    }
    Ok(())
}

/// Zero-mean unit-variance smoothed Gaussian noise.
fn smooth_field(rng: &mut RngStream, s: usize, sigma: f64) -> Vec<f64> {
    let white: Vec<f64> = (0..s * s).map(|_| rng.normal()).collect();
    let mut f = convolve_separable(&white, s, s, &gaussian_kernel(sigma));
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    let sd = (f.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f.len() as f64).sqrt().max(1e-12);
    f.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    f
}

/// Value below which a `q` fraction of `values` lies.
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if q <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if q >= 1.0 {
        return f64::INFINITY;
    }
    let k = ((q * v.len() as f64).round() as usize).min(v.len());
    if k == 0 {
        f64::NEG_INFINITY
    } else if k == v.len() {
        f64::INFINITY
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}

/// Coarse blobs with patches of fine interleaved structure, as a mixed field.
fn phase_field(rng: &mut RngStream, cfg: &TextureConfig) -> Vec<f64> {
    let s = cfg.size;
    let coarse = smooth_field(rng, s, cfg.coarse_sigma);
    let fine = smooth_field(rng, s, cfg.fine_sigma);
    let rough = smooth_field(rng, s, 2.0 * cfg.coarse_sigma);
    coarse.iter().zip(&fine).zip(&rough).map(|((c, f), r)| c + cfg.fine_weight * f / (1.0 + (-2.0 * r).exp())).collect()
}

fn texture_sample(rng: &mut RngStream, cfg: &TextureConfig) -> Result<SegSample> {
    let s = cfg.size;
    let b = cfg.balance;
    // Class 2 takes the top of one field; classes 0 and 1 split the rest by a second.
    let major = phase_field(rng, cfg);
    let minor = phase_field(rng, cfg);
    let t2 = quantile(&major, 1.0 - b[2]);
    let rest: Vec<f64> = (0..s * s).filter(|&i| major[i] <= t2).map(|i| minor[i]).collect();
    let t0 = if b[0] + b[1] > 0.0 { quantile(&rest, b[0] / (b[0] + b[1])) } else { 0.0 };
    let labels: Vec<u8> = (0..s * s)
        .map(|i| {
            if major[i] > t2 {
                2
            } else if minor[i] <= t0 {
                0
            } else {
                1
            }
        })
        .collect();

    let speckle = smooth_field(rng, s, cfg.speckle_sigma);
    let rendered: Vec<f64> = labels
        .iter()
        .zip(&speckle)
        .map(|(&l, sp)| cfg.intensities[l as usize] + if l == 1 { cfg.speckle * sp } else { 0.0 })
        .collect();
    let blurred = if cfg.render_blur > 0.0 {
        convolve_separable(&rendered, s, s, &gaussian_kernel(cfg.render_blur))
    } else {
        rendered
    };
    let corr = smooth_field(rng, s, 1.5);
    let image: Vec<f32> = blurred
        .iter()
        .zip(&corr)
        .map(|(v, c)| (v + cfg.correlated_noise * c + cfg.white_noise * rng.normal()).clamp(0.0, 1.0) as f32)
        .collect();

    SegSample::new(
        Tensor::new(vec![1, s, s], image)?,
        LabelMap::new(s, s, labels)?,
        SampleMeta { generator: "phase_texture".into(), noise: "clean".into() },
    )
}

/// Three-phase microstructure-like textures with the default renderer.
pub fn gen_phase_texture(n: usize, seed: u64, class_balance: [f64; 3]) -> Result<Vec<SegSample>> {
    gen_phase_texture_with(n, seed, &TextureConfig { balance: class_balance, ..TextureConfig::default() })
}

pub fn gen_phase_texture_with(n: usize, seed: u64, cfg: &TextureConfig) -> Result<Vec<SegSample>> {
    if n == 0 {
        return Err(Error::invalid("texture count must be positive"));
    }
    check_balance(&cfg.balance)?;
    if cfg.size < 4 {
        return Err(Error::invalid("texture canvas too small"));
    }
    let root = RngStream::new(seed).named("phase_texture");
    (0..n).map(|i| texture_sample(&mut root.fork(i as u64), cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_under_seed() {
        let a = gen_phase_texture(10, 7, [0.2, 0.2, 0.6]).unwrap();
        let b = gen_phase_texture(10, 7, [0.2, 0.2, 0.6]).unwrap();
        assert_eq!(a, b);
        let c = gen_phase_texture(10, 8, [0.2, 0.2, 0.6]).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn majority_fraction_follows_balance() {
        let samples = gen_phase_texture(100, 3, [0.2, 0.2, 0.6]).unwrap();
        let (mut hits, mut total) = (0usize, 0usize);
        for s in &samples {
            hits += s.labels.labels.iter().filter(|&&l| l == 2).count();
            total += s.labels.labels.len();
        }
        assert!((hits as f64 / total as f64 - 0.6).abs() <= 0.05);
    }

    #[test]
    fn labels_and_pixels_in_range() {
        for s in gen_phase_texture(5, 1, [0.3, 0.3, 0.4]).unwrap() {
            assert!(s.labels.labels.iter().all(|&l| l < 3));
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(s.image.shape(), &[1, 64, 64]);
        }
    }

    #[test]
    fn invalid_balance() {
        assert!(gen_phase_texture(1, 0, [0.5, 0.5, 0.5]).is_err());
        assert!(gen_phase_texture(1, 0, [-0.2, 0.6, 0.6]).is_err());
        assert!(gen_phase_texture(0, 0, [0.2, 0.2, 0.6]).is_err());
    }
}
