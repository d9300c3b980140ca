use crate::error::{Error, Result};
use crate::tensorkit::{RngStream, Tensor};

use super::blur::NoiseType;
use super::{LabelMap, SampleMeta, SegSample};

pub const GLYPH_SIZE: usize = 32;

/// Foreground fraction bounds enforced by rejection.
const MIN_FILL: f64 = 0.05;
const MAX_FILL: f64 = 0.5;

fn draw_stroke(mask: &mut [u8], s: usize, rng: &mut RngStream) {
    let lo = 4.0;
    let span = s as f64 - 8.0;
    let mut pt = || [lo + span * rng.uniform(), lo + span * rng.uniform()];
    let (p0, p1, p2) = (pt(), pt(), pt());
    let radius: f64 = [0.6, 0.9, 1.3][rng.below(3)];
    let steps = 64;
    for t in 0..=steps {
        let t = t as f64 / steps as f64;
        let u = 1.0 - t;
        let cx = u * u * p0[0] + 2.0 * u * t * p1[0] + t * t * p2[0];
        let cy = u * u * p0[1] + 2.0 * u * t * p1[1] + t * t * p2[1];
        let r = radius.ceil() as isize + 1;
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (cx.floor() as isize + dx, cy.floor() as isize + dy);
                if x < 0 || y < 0 || x >= s as isize || y >= s as isize {
                    continue;
                }
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if (px - cx).powi(2) + (py - cy).powi(2) <= radius * radius {
                    mask[y as usize * s + x as usize] = 1;
                }
            }
        }
    }
}

/// Random multi-stroke glyph mask; retries until the fill fraction is in bounds.
pub fn glyph_mask(rng: &mut RngStream, s: usize) -> Vec<u8> {
    loop {
        let mut mask = vec![0u8; s * s];
        for _ in 0..2 + rng.below(3) {
            draw_stroke(&mut mask, s, rng);
        }
        let fill = mask.iter().filter(|&&m| m == 1).count() as f64 / (s * s) as f64;
        if fill > MIN_FILL && fill < MAX_FILL {
            return mask;
        }
    }
}

/// Binary glyph masks degraded by the named blur; ground truth is the clean mask.
pub fn gen_blurred_glyphs(n: usize, noise_type: NoiseType, seed: u64) -> Result<Vec<SegSample>> {
    if n == 0 {
        return Err(Error::invalid("glyph count must be positive"));
    }
    let s = GLYPH_SIZE;
    let root = RngStream::new(seed).named("glyph");
    (0..n)
        .map(|i| {
            let mask = glyph_mask(&mut root.fork(i as u64), s);
            let plane: Vec<f64> = mask.iter().map(|&m| m as f64).collect();
            let image = noise_type.apply(&plane, s, s).into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
            SegSample::new(
                Tensor::new(vec![1, s, s], image)?,
                LabelMap::new(s, s, mask)?,
                SampleMeta { generator: "glyph".into(), noise: noise_type.name().into() },
            )
        })
        .collect()
}

/// Parses the noise name before generating.
pub fn gen_blurred_glyphs_named(n: usize, noise_type: &str, seed: u64) -> Result<Vec<SegSample>> {
    gen_blurred_glyphs(n, noise_type.parse()?, seed)
}
