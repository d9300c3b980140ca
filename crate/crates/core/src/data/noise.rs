use crate::error::{Error, Result};
use crate::tensorkit::{RngStream, Tensor};

/// Sets exactly `round(rate·H·W)` distinct pixels (all channels) to 0 or 1.
pub fn inject_salt_pepper(image: &Tensor<f32>, rate: f64, rng: &mut RngStream) -> Result<Tensor<f32>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid(format!("salt-and-pepper rate {rate} outside [0, 1]")));
    }
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("salt-and-pepper", format!("expected [C, H, W], got {s:?}")));
    }
    let (c, hw) = (s[0], s[1] * s[2]);
    let count = (rate * hw as f64).round() as usize;
    let mut idx: Vec<usize> = (0..hw).collect();
    let mut out = image.clone();
    let data = out.data_mut();
    for i in 0..count {
        let j = i + rng.below(hw - i);
        idx.swap(i, j);
        let v = if rng.below(2) == 0 { 0.0 } else { 1.0 };
        for ci in 0..c {
            data[ci * hw + idx[i]] = v;
        }
    }
    Ok(out)
}
