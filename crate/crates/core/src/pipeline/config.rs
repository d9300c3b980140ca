use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{NoiseType, SplitRatios};
use crate::error::{Error, Result};
use crate::models::{PolicySpec, UNetSpec};
use crate::training::{FinetuneConfig, RlConfig, TrainConfig, TvdConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Generator {
    PhaseTexture,
    Glyph,
}

impl Generator {
    pub fn name(self) -> &'static str {
        match self {
            Generator::PhaseTexture => "phase_texture",
            Generator::Glyph => "glyph",
        }
    }
}

impl FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phase_texture" => Ok(Generator::PhaseTexture),
            "glyph" => Ok(Generator::Glyph),
            other => Err(Error::Parse(format!("unknown generator {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub generator: Generator,
    /// Images to generate (per noise type for glyphs).
    pub count: usize,
    pub balance: [f64; 3],
    /// Glyph noise types; model `i` is pretrained on type `i`.
    pub noise: Vec<NoiseType>,
    pub patches: usize,
    pub split: SplitRatios,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub depths: Vec<usize>,
    pub channels: Vec<usize>,
    /// Dropout of the small model; larger models use none.
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub small_epochs: usize,
    pub small_batch_size: usize,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub lr: f64,
    pub model_lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvdSection {
    pub threshold: f64,
    pub lambda_start: f64,
    pub lambda_step: f64,
    pub max_epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdkSection {
    pub lambda: f64,
    pub grid_points: usize,
    pub match_tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    /// Salt-and-pepper rate applied to test images.
    pub salt_pepper: f64,
    /// Checkpoint stage to evaluate: `auto`, `rl`, `finetune` or `tvd`.
    pub stage: String,
}

/// Everything a run needs, parsed from flat `key = value` text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub suite: SuiteConfig,
    pub pretrain: PretrainConfig,
    pub mc_samples: usize,
    pub policy_channels: Vec<usize>,
    pub rl: RlConfig,
    pub finetune: FinetuneSection,
    pub tvd: TvdSection,
    pub idk: IdkSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig {
                generator: Generator::PhaseTexture,
                count: 240,
                balance: [0.2, 0.2, 0.6],
                noise: NoiseType::ALL.to_vec(),
                patches: 16,
                split: SplitRatios { pretrain: 0.4, rl: 0.25, finetune: 0.1, val: 0.1, test: 0.15 },
            },
            suite: SuiteConfig { depths: vec![2, 2, 3], channels: vec![4, 10, 16], dropout: 0.1 },
            pretrain: PretrainConfig {
                epochs: 15,
                lr: 3e-3,
                batch_size: 32,
                small_epochs: 40,
                small_batch_size: 8,
                beta: 0.01,
            },
            mc_samples: 5,
            policy_channels: vec![8, 16],
            rl: RlConfig { lambda: 0.5, epochs: 300, lr: 1e-4, batch_size: 16, baseline: true, patch_credit: false },
            finetune: FinetuneSection { epochs: 20, lr: 1e-4, model_lr: 1e-3 },
            tvd: TvdSection { threshold: 0.1, lambda_start: 0.0, lambda_step: 0.01, max_epochs: 200 },
            idk: IdkSection { lambda: 0.01, grid_points: 8, match_tolerance: 1e-3 },
            eval: EvalSection { salt_pepper: 0.0, stage: "auto".into() },
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn check(ok: bool, key: &str, detail: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!("{key}: {detail}")))
    }
}

impl ExperimentConfig {
    /// Every recognised key, in canonical order.
    pub const KEYS: [&'static str; 36] = [
        "seed",
        "data.generator",
        "data.count",
        "data.balance",
        "data.noise",
        "data.patches",
        "data.split",
        "suite.depths",
        "suite.channels",
        "suite.dropout",
        "pretrain.epochs",
        "pretrain.lr",
        "pretrain.batch_size",
        "pretrain.small_epochs",
        "pretrain.small_batch_size",
        "pretrain.beta",
        "mc.samples",
        "policy.channels",
        "rl.lambda",
        "rl.epochs",
        "rl.lr",
        "rl.batch_size",
        "rl.baseline",
        "rl.patch_credit",
        "finetune.epochs",
        "finetune.lr",
        "finetune.model_lr",
        "tvd.threshold",
        "tvd.lambda_start",
        "tvd.lambda_step",
        "tvd.max_epochs",
        "idk.lambda",
        "idk.grid_points",
        "idk.match_tolerance",
        "eval.salt_pepper",
        "eval.stage",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.generator" => self.data.generator = v.parse()?,
            "data.count" => self.data.count = parse(key, v)?,
            "data.balance" => {
                let b: Vec<f64> = parse_list(key, v)?;
                check(b.len() == 3, key, "needs three values")?;
                self.data.balance = [b[0], b[1], b[2]];
            }
            "data.noise" => self.data.noise = v.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?,
            "data.patches" => self.data.patches = parse(key, v)?,
            "data.split" => {
                let s: Vec<f64> = parse_list(key, v)?;
                check(s.len() == 5, key, "needs five values")?;
                self.data.split = SplitRatios { pretrain: s[0], rl: s[1], finetune: s[2], val: s[3], test: s[4] };
            }
            "suite.depths" => self.suite.depths = parse_list(key, v)?,
            "suite.channels" => self.suite.channels = parse_list(key, v)?,
            "suite.dropout" => self.suite.dropout = parse(key, v)?,
            "pretrain.epochs" => self.pretrain.epochs = parse(key, v)?,
            "pretrain.lr" => self.pretrain.lr = parse(key, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse(key, v)?,
            "pretrain.small_epochs" => self.pretrain.small_epochs = parse(key, v)?,
            "pretrain.small_batch_size" => self.pretrain.small_batch_size = parse(key, v)?,
            "pretrain.beta" => self.pretrain.beta = parse(key, v)?,
            "mc.samples" => self.mc_samples = parse(key, v)?,
            "policy.channels" => self.policy_channels = parse_list(key, v)?,
            "rl.lambda" => self.rl.lambda = parse(key, v)?,
            "rl.epochs" => self.rl.epochs = parse(key, v)?,
            "rl.lr" => self.rl.lr = parse(key, v)?,
            "rl.batch_size" => self.rl.batch_size = parse(key, v)?,
            "rl.baseline" => self.rl.baseline = parse(key, v)?,
            "rl.patch_credit" => self.rl.patch_credit = parse(key, v)?,
            "finetune.epochs" => self.finetune.epochs = parse(key, v)?,
            "finetune.lr" => self.finetune.lr = parse(key, v)?,
            "finetune.model_lr" => self.finetune.model_lr = parse(key, v)?,
            "tvd.threshold" => self.tvd.threshold = parse(key, v)?,
            "tvd.lambda_start" => self.tvd.lambda_start = parse(key, v)?,
            "tvd.lambda_step" => self.tvd.lambda_step = parse(key, v)?,
            "tvd.max_epochs" => self.tvd.max_epochs = parse(key, v)?,
            "idk.lambda" => self.idk.lambda = parse(key, v)?,
            "idk.grid_points" => self.idk.grid_points = parse(key, v)?,
            "idk.match_tolerance" => self.idk.match_tolerance = parse(key, v)?,
            "eval.salt_pepper" => self.eval.salt_pepper = parse(key, v)?,
            "eval.stage" => self.eval.stage = v.to_string(),
            other => return Err(Error::Parse(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "seed" => self.seed.to_string(),
            "data.generator" => self.data.generator.name().into(),
            "data.count" => self.data.count.to_string(),
            "data.balance" => join(&self.data.balance),
            "data.noise" => self.data.noise.iter().map(|n| n.name()).collect::<Vec<_>>().join(","),
            "data.patches" => self.data.patches.to_string(),
            "data.split" => {
                let s = &self.data.split;
                join(&[s.pretrain, s.rl, s.finetune, s.val, s.test])
            }
            "suite.depths" => join(&self.suite.depths),
            "suite.channels" => join(&self.suite.channels),
            "suite.dropout" => self.suite.dropout.to_string(),
            "pretrain.epochs" => self.pretrain.epochs.to_string(),
            "pretrain.lr" => self.pretrain.lr.to_string(),
            "pretrain.batch_size" => self.pretrain.batch_size.to_string(),
            "pretrain.small_epochs" => self.pretrain.small_epochs.to_string(),
            "pretrain.small_batch_size" => self.pretrain.small_batch_size.to_string(),
            "pretrain.beta" => self.pretrain.beta.to_string(),
            "mc.samples" => self.mc_samples.to_string(),
            "policy.channels" => join(&self.policy_channels),
            "rl.lambda" => self.rl.lambda.to_string(),
            "rl.epochs" => self.rl.epochs.to_string(),
            "rl.lr" => self.rl.lr.to_string(),
            "rl.batch_size" => self.rl.batch_size.to_string(),
            "rl.baseline" => self.rl.baseline.to_string(),
            "rl.patch_credit" => self.rl.patch_credit.to_string(),
            "finetune.epochs" => self.finetune.epochs.to_string(),
            "finetune.lr" => self.finetune.lr.to_string(),
            "finetune.model_lr" => self.finetune.model_lr.to_string(),
            "tvd.threshold" => self.tvd.threshold.to_string(),
            "tvd.lambda_start" => self.tvd.lambda_start.to_string(),
            "tvd.lambda_step" => self.tvd.lambda_step.to_string(),
            "tvd.max_epochs" => self.tvd.max_epochs.to_string(),
            "idk.lambda" => self.idk.lambda.to_string(),
            "idk.grid_points" => self.idk.grid_points.to_string(),
            "idk.match_tolerance" => self.idk.match_tolerance.to_string(),
            "eval.salt_pepper" => self.eval.salt_pepper.to_string(),
            "eval.stage" => self.eval.stage.clone(),
            other => return Err(Error::Parse(format!("unknown key {other:?}"))),
        })
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v).map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    /// Applies a `key=value` override and revalidates.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Parse(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v)?;
        self.validate()
    }

    /// Canonical text: every key in order, one per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("canonical keys are known"));
        }
        out
    }

    /// SHA-256 of the canonical text of every key that affects training.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for k in Self::KEYS.iter().filter(|k| !k.starts_with("eval.") && !k.starts_with("idk.")) {
            h.update(format!("{k} = {}\n", self.get(k).expect("canonical keys are known")).as_bytes());
        }
        h.finalize().into()
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        check(d.count > 0, "data.count", "must be positive")?;
        check(
            d.balance.iter().all(|b| (0.0..=1.0).contains(b)) && (d.balance.iter().sum::<f64>() - 1.0).abs() < 1e-6,
            "data.balance",
            "must be a probability partition",
        )?;
        d.split.validate()?;
        check(d.patches > 0 && crate::data::grid_side(d.patches).is_ok(), "data.patches", "must be a square number")?;
        let s = &self.suite;
        check(s.depths.len() >= 2, "suite.depths", "needs at least two models")?;
        check(s.depths.len() == s.channels.len(), "suite.channels", "one entry per model")?;
        check(s.channels.iter().all(|&c| c > 0) && s.depths.iter().all(|&d| d > 0), "suite", "sizes must be positive")?;
        check((0.0..1.0).contains(&s.dropout) && s.dropout > 0.0, "suite.dropout", "must be in (0, 1)")?;
        if d.generator == Generator::Glyph {
            check(d.noise.len() == s.depths.len(), "data.noise", "one noise type per model")?;
        }
        let p = &self.pretrain;
        check(
            p.lr > 0.0 && p.batch_size > 0 && p.small_batch_size > 0,
            "pretrain",
            "lr and batch sizes must be positive",
        )?;
        check(p.beta >= 0.0, "pretrain.beta", "must be non-negative")?;
        check(self.mc_samples >= 2, "mc.samples", "needs at least two samples")?;
        check(
            !self.policy_channels.is_empty() && self.policy_channels.iter().all(|&c| c > 0),
            "policy.channels",
            "must be positive",
        )?;
        let r = &self.rl;
        check((0.0..=1.0).contains(&r.lambda), "rl.lambda", "must be in [0, 1]")?;
        check(r.lr > 0.0 && r.batch_size > 0, "rl", "lr and batch size must be positive")?;
        check(self.finetune.lr > 0.0 && self.finetune.model_lr > 0.0, "finetune", "learning rates must be positive")?;
        let t = &self.tvd;
        check((0.0..=1.0).contains(&t.threshold), "tvd.threshold", "must be in [0, 1]")?;
        check((0.0..=1.0).contains(&t.lambda_start) && t.lambda_step >= 0.0, "tvd", "bad λ ramp")?;
        check(t.max_epochs > 0, "tvd.max_epochs", "must be positive")?;
        let i = &self.idk;
        check(i.lambda >= 0.0 && i.grid_points > 0 && i.match_tolerance > 0.0, "idk", "bad cascade settings")?;
        check((0.0..=1.0).contains(&self.eval.salt_pepper), "eval.salt_pepper", "must be in [0, 1]")?;
        check(
            ["auto", "rl", "finetune", "tvd"].contains(&self.eval.stage.as_str()),
            "eval.stage",
            "auto, rl, finetune or tvd",
        )?;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        match self.data.generator {
            Generator::PhaseTexture => 3,
            Generator::Glyph => 2,
        }
    }

    pub fn image_size(&self) -> usize {
        match self.data.generator {
            Generator::PhaseTexture => 64,
            Generator::Glyph => crate::data::GLYPH_SIZE,
        }
    }

    pub fn unet_specs(&self) -> Vec<UNetSpec> {
        let s = &self.suite;
        s.depths
            .iter()
            .zip(&s.channels)
            .enumerate()
            .map(|(i, (&depth, &c))| UNetSpec {
                depth,
                base_channels: c,
                in_channels: 1,
                num_classes: self.num_classes(),
                dropout_rate: if i == 0 { s.dropout } else { 0.0 },
            })
            .collect()
    }

    pub fn policy_spec(&self) -> Result<PolicySpec> {
        let size = self.image_size();
        Ok(PolicySpec {
            in_channels: self.num_classes() + 1,
            input_size: (size, size),
            grid: crate::data::grid_side(self.data.patches)?,
            num_actions: self.suite.depths.len(),
            channels: self.policy_channels.clone(),
        })
    }

    pub fn large_train(&self) -> TrainConfig {
        TrainConfig { epochs: self.pretrain.epochs, lr: self.pretrain.lr, batch_size: self.pretrain.batch_size }
    }

    pub fn small_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.pretrain.small_epochs,
            lr: self.pretrain.lr,
            batch_size: self.pretrain.small_batch_size,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            rl: RlConfig { epochs: self.finetune.epochs, lr: self.finetune.lr, ..self.rl.clone() },
            model_lr: self.finetune.model_lr,
        }
    }

    /// λ ramp starting from the cost-oblivious reference policy.
    pub fn tvd_config(&self) -> TvdConfig {
        TvdConfig {
            threshold: self.tvd.threshold,
            lambda_start: self.tvd.lambda_start,
            lambda_step: self.tvd.lambda_step,
            max_epochs: self.tvd.max_epochs,
            alpha: crate::training::Phase::Finetune.alpha_range().0,
            rl: RlConfig { epochs: 1, lr: self.finetune.lr, ..self.rl.clone() },
        }
    }
}
