use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorkit::{flops, Graph, Mode, ParamSet, RngStream, Scalar, Tensor, Var};

/// Architecture of one encoder/decoder segmentation network.
///
/// Each level has two 3×3 conv + ReLU blocks; channels double per level.
/// The decoder upsamples (nearest), concatenates the skip connection and
/// applies two more conv blocks. A 1×1 head maps to class logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
}

/// One row of the analytic cost table.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub flops: u64,
}

impl UNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::invalid(format!("degenerate UNet spec {self:?}")));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("UNet needs at least 2 classes"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| k * k * cin * cout + cout;
        let mut total = 0;
        let mut prev = self.in_channels;
        for l in 0..self.depth {
            let c = self.channels(l);
            total += conv(prev, c, 3) + conv(c, c, 3);
            prev = c;
        }
        let cb = self.channels(self.depth);
        total += conv(prev, cb, 3) + conv(cb, cb, 3);
        for l in (0..self.depth).rev() {
            let c = self.channels(l);
            total += conv(self.channels(l + 1) + c, c, 3) + conv(c, c, 3);
        }
        total + conv(self.channels(0), self.num_classes, 1)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = 1 << self.depth;
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::shape("unet", format!("{h}x{w} not divisible by {f}")));
        }
        Ok(())
    }

    /// Per-layer flops of one forward pass on a single `h × w` input.
    pub fn layer_table(&self, h: usize, w: usize, mode: Mode) -> Result<Vec<LayerCost>> {
        self.check_input(h, w)?;
        let mut rows = Vec::new();
        let mut push = |name: String, flops: u64| rows.push(LayerCost { name, flops });
        let drop = self.dropout_rate > 0.0 && mode.dropout_active();
        let block = |push: &mut dyn FnMut(String, u64), tag: &str, cin: usize, c: usize, hh: usize, ww: usize| {
            push(format!("{tag}.c1"), flops::conv2d(1, cin, c, 3, 3, hh, ww));
            push(format!("{tag}.relu1"), flops::elementwise(c * hh * ww));
            push(format!("{tag}.c2"), flops::conv2d(1, c, c, 3, 3, hh, ww));
            push(format!("{tag}.relu2"), flops::elementwise(c * hh * ww));
            if drop {
                push(format!("{tag}.dropout"), flops::elementwise(c * hh * ww));
            }
        };
        let mut prev = self.in_channels;
        for l in 0..self.depth {
            let (hh, ww, c) = (h >> l, w >> l, self.channels(l));
            block(&mut push, &format!("enc{l}"), prev, c, hh, ww);
            push(format!("pool{l}"), flops::resample(c * (hh / 2) * (ww / 2)));
            prev = c;
        }
        let (hb, wb, cb) = (h >> self.depth, w >> self.depth, self.channels(self.depth));
        block(&mut push, "mid", prev, cb, hb, wb);
        for l in (0..self.depth).rev() {
            let (hh, ww, c) = (h >> l, w >> l, self.channels(l));
            let up = self.channels(l + 1);
            push(format!("up{l}"), flops::resample(up * hh * ww));
            block(&mut push, &format!("dec{l}"), up + c, c, hh, ww);
        }
        push("head".into(), flops::conv2d(1, self.channels(0), self.num_classes, 1, 1, h, w));
        Ok(rows)
    }

    /// Total flops of one forward pass on a single `h × w` input.
    pub fn flops(&self, h: usize, w: usize, mode: Mode) -> Result<u64> {
        Ok(self.layer_table(h, w, mode)?.iter().map(|r| r.flops).sum())
    }
}

/// A segmentation network and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet<T: Scalar = f32> {
    pub spec: UNetSpec,
    pub params: ParamSet<T>,
}

impl<T: Scalar> UNet<T> {
    pub fn new(spec: UNetSpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamSet::new();
        let mut prev = spec.in_channels;
        for l in 0..spec.depth {
            let c = spec.channels(l);
            params.init_conv(&format!("enc{l}.c1"), prev, c, 3, rng);
            params.init_conv(&format!("enc{l}.c2"), c, c, 3, rng);
            prev = c;
        }
        let cb = spec.channels(spec.depth);
        params.init_conv("mid.c1", prev, cb, 3, rng);
        params.init_conv("mid.c2", cb, cb, 3, rng);
        for l in (0..spec.depth).rev() {
            let c = spec.channels(l);
            params.init_conv(&format!("dec{l}.c1"), spec.channels(l + 1) + c, c, 3, rng);
            params.init_conv(&format!("dec{l}.c2"), c, c, 3, rng);
        }
        params.init_conv("head", spec.channels(0), spec.num_classes, 1, rng);
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: UNetSpec, params: ParamSet<T>) -> Result<Self> {
        spec.validate()?;
        if params.count() != spec.param_count() {
            return Err(Error::invalid(format!(
                "parameter set has {} values, spec needs {}",
                params.count(),
                spec.param_count()
            )));
        }
        Ok(Self { spec, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn conv<'a>(&'a self, g: &mut Graph<'a, T>, name: &str, x: Var, pad: usize) -> Result<Var> {
        let w = g.param(&format!("{name}.w"), self.params.get(&format!("{name}.w"))?);
        let b = g.param(&format!("{name}.b"), self.params.get(&format!("{name}.b"))?);
        g.conv2d(x, w, b, 1, pad)
    }

    fn block<'a>(&'a self, g: &mut Graph<'a, T>, tag: &str, x: Var, rng: &mut RngStream) -> Result<Var> {
        let y = self.conv(g, &format!("{tag}.c1"), x, 1)?;
        let y = g.relu(y);
        let y = self.conv(g, &format!("{tag}.c2"), y, 1)?;
        let y = g.relu(y);
        g.dropout(y, self.spec.dropout_rate, rng)
    }

    /// Records the forward pass of `x: [N, Cin, H, W]`, returning logits `[N, K, H, W]`.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, rng: &mut RngStream) -> Result<Var> {
        let xs = g.value(x).shape().to_vec();
        if xs.len() != 4 || xs[1] != self.spec.in_channels {
            return Err(Error::shape("unet", format!("input {xs:?}, expected [N, {}, H, W]", self.spec.in_channels)));
        }
        self.spec.check_input(xs[2], xs[3])?;
        let mut skips = Vec::with_capacity(self.spec.depth);
        let mut y = x;
        for l in 0..self.spec.depth {
            y = self.block(g, &format!("enc{l}"), y, rng)?;
            skips.push(y);
            y = g.max_pool2(y)?;
        }
        y = self.block(g, "mid", y, rng)?;
        for l in (0..self.spec.depth).rev() {
            let up = g.upsample2(y)?;
            let cat = g.concat(&[up, skips[l]])?;
            y = self.block(g, &format!("dec{l}"), cat, rng)?;
        }
        self.conv(g, "head", y, 0)
    }

    /// Logits for a batch in the given mode.
    pub fn logits(&self, x: &Tensor<T>, mode: Mode, rng: &mut RngStream) -> Result<Tensor<T>> {
        let mut g = Graph::new(mode);
        let xv = g.input_ref(x);
        let out = self.forward(&mut g, xv, rng)?;
        let t = g.value(out).clone();
        if !t.all_finite() {
            return Err(Error::NonFinite("unet forward"));
        }
        Ok(t)
    }
}
