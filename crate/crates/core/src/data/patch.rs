use crate::error::{Error, Result};
use crate::tensorkit::{Scalar, Tensor};

use super::LabelMap;

/// Non-overlapping tiling of a `[C, H, W]` image into `P = g²` patches,
/// row-major patch order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<T: Scalar = f32> {
    pub patches: Vec<Tensor<T>>,
    pub grid: usize,
    pub source: (usize, usize, usize),
}

/// Side length of the patch grid for `p` patches.
pub fn grid_side(p: usize) -> Result<usize> {
    let g = (p as f64).sqrt().round() as usize;
    if p == 0 || g * g != p {
        return Err(Error::invalid(format!("patch count {p} is not a perfect square")));
    }
    Ok(g)
}

fn patch_dims(h: usize, w: usize, p: usize) -> Result<(usize, usize, usize)> {
    let g = grid_side(p)?;
    if h % g != 0 || w % g != 0 {
        return Err(Error::shape("patchify", format!("{h}x{w} not divisible by {g}")));
    }
    Ok((g, h / g, w / g))
}

pub fn patchify<T: Scalar>(image: &Tensor<T>, p: usize) -> Result<PatchGrid<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("patchify", format!("expected [C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (g, ph, pw) = patch_dims(h, w, p)?;
    let d = image.data();
    let mut patches = Vec::with_capacity(p);
    for gy in 0..g {
        for gx in 0..g {
            let mut data = Vec::with_capacity(c * ph * pw);
            for ci in 0..c {
                for y in 0..ph {
                    let row = (ci * h + gy * ph + y) * w + gx * pw;
                    data.extend_from_slice(&d[row..row + pw]);
                }
            }
            patches.push(Tensor::new(vec![c, ph, pw], data)?);
        }
    }
    Ok(PatchGrid { patches, grid: g, source: (c, h, w) })
}

pub fn departchify<T: Scalar>(grid: &PatchGrid<T>) -> Result<Tensor<T>> {
    let (c, h, w) = grid.source;
    let g = grid.grid;
    if grid.patches.len() != g * g {
        return Err(Error::shape("departchify", format!("{} patches for a {g}x{g} grid", grid.patches.len())));
    }
    let (ph, pw) = (h / g, w / g);
    let mut out = vec![T::zero(); c * h * w];
    for (i, patch) in grid.patches.iter().enumerate() {
        if patch.shape() != [c, ph, pw] {
            return Err(Error::shape("departchify", format!("patch {:?}", patch.shape())));
        }
        let (gy, gx) = (i / g, i % g);
        for ci in 0..c {
            for y in 0..ph {
                let dst = (ci * h + gy * ph + y) * w + gx * pw;
                let src = (ci * ph + y) * pw;
                out[dst..dst + pw].copy_from_slice(&patch.data()[src..src + pw]);
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Label-map counterpart of [`patchify`].
pub fn patchify_labels(labels: &LabelMap, p: usize) -> Result<Vec<LabelMap>> {
    let (g, ph, pw) = patch_dims(labels.height, labels.width, p)?;
    Ok((0..p)
        .map(|i| {
            let (gy, gx) = (i / g, i % g);
            let mut out = Vec::with_capacity(ph * pw);
            for y in 0..ph {
                let row = (gy * ph + y) * labels.width + gx * pw;
                out.extend_from_slice(&labels.labels[row..row + pw]);
            }
            LabelMap { height: ph, width: pw, labels: out }
        })
        .collect())
}

/// Reassembles patch label maps (row-major) into a full map.
pub fn stitch_labels(patches: &[LabelMap]) -> Result<LabelMap> {
    let g = grid_side(patches.len())?;
    let (ph, pw) = (patches[0].height, patches[0].width);
    let (h, w) = (ph * g, pw * g);
    let mut out = vec![0u8; h * w];
    for (i, p) in patches.iter().enumerate() {
        if p.height != ph || p.width != pw {
            return Err(Error::shape("stitch", "patches differ in size"));
        }
        let (gy, gx) = (i / g, i % g);
        for y in 0..ph {
            let dst = (gy * ph + y) * w + gx * pw;
            out[dst..dst + pw].copy_from_slice(&p.labels[y * pw..(y + 1) * pw]);
        }
    }
    Ok(LabelMap { height: h, width: w, labels: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_patch_size() {
        let img = Tensor::<f32>::zeros(&[1, 224, 256]);
        let grid = patchify(&img, 16).unwrap();
        assert_eq!(grid.patches.len(), 16);
        assert!(grid.patches.iter().all(|p| p.shape() == [1, 56, 64]));
    }

    #[test]
    fn single_patch_is_identity() {
        let img = Tensor::new(vec![2, 3, 4], (0..24).map(|v| v as f32).collect()).unwrap();
        let grid = patchify(&img, 1).unwrap();
        assert_eq!(grid.patches[0], img);
    }

    #[test]
    fn patch_order_is_row_major() {
        let img = Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let grid = patchify(&img, 4).unwrap();
        assert_eq!(grid.patches[1].data(), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(grid.patches[2].data(), &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn indivisible_dimensions_are_rejected() {
        assert!(patchify(&Tensor::<f32>::zeros(&[1, 10, 12]), 16).is_err());
        assert!(patchify(&Tensor::<f32>::zeros(&[1, 12, 12]), 8).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(g in 1usize..5, ph in 1usize..6, pw in 1usize..6, c in 1usize..3, seed in any::<u64>()) {
            let mut r = crate::tensorkit::RngStream::new(seed);
            let (h, w) = (g * ph, g * pw);
            let img = Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| r.normal() as f32).collect()).unwrap();
            let grid = patchify(&img, g * g).unwrap();
            prop_assert_eq!(departchify(&grid).unwrap(), img);
            let labels = LabelMap::new(h, w, (0..h * w).map(|_| r.below(3) as u8).collect()).unwrap();
            prop_assert_eq!(stitch_labels(&patchify_labels(&labels, g * g).unwrap()).unwrap(), labels);
        }
    }
}
