use std::path::{Path, PathBuf};

use crate::baselines::{idk_infer, iou_match_tune, random_policy_infer, tune_idk, CascadeCache, GridSpec};
use crate::data::{
    gen_blurred_glyphs, gen_phase_texture, inject_salt_pepper, read_dataset, split_dataset, write_dataset, NoiseType,
    SampleMeta, SegSample, SplitSet,
};
use crate::error::{Error, Result};
use crate::metrics::{assignment_confusion, dataset_iou, iou_per_gigaflop, marginal, tvd, RunReport};
use crate::models::{ModelSuite, PolicyNet, UNet};
use crate::tensorkit::{ParamSet, RngStream, Scalar};
use crate::training::{
    finetune, finetune_tvd, iou_table, paser_infer, prepare, pretrain_large, pretrain_small_kd, routing_marginal,
    train_rl, EventLog, Inference, Prepared, TvdOutcome,
};

use super::{Checkpoint, ExperimentConfig, Generator};

/// Evaluation methods accepted by [`eval`].
pub const METHODS: [&str; 4] = ["paser", "idk", "idk-match", "random"];

/// File layout of one run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self, split: &str, noise: Option<NoiseType>) -> PathBuf {
        match noise {
            Some(n) => self.root.join("data").join(format!("{split}_{}.paserds", n.name())),
            None => self.root.join("data").join(format!("{split}.paserds")),
        }
    }

    pub fn checkpoint(&self, stage: &str, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(stage).join(format!("{name}.pasr"))
    }

    pub fn events(&self) -> PathBuf {
        self.root.join("events.jsonl")
    }

    pub fn report(&self, method: &str) -> PathBuf {
        self.root.join("reports").join(method)
    }
}

/// Configuration, run directory and the event log of the current stage.
pub struct Stage<'a> {
    pub cfg: &'a ExperimentConfig,
    pub dir: RunDir,
    pub log: EventLog,
    /// Warnings raised while loading inputs (also recorded in the log).
    pub warnings: Vec<String>,
}

impl<'a> Stage<'a> {
    pub fn new(cfg: &'a ExperimentConfig, root: impl Into<PathBuf>) -> Self {
        Self { cfg, dir: RunDir::new(root), log: EventLog::new(), warnings: Vec::new() }
    }

    fn rng(&self, name: &str) -> RngStream {
        RngStream::new(self.cfg.seed).named(name)
    }

    fn warn(&mut self, stage: &str, msg: String) {
        self.log.warn(stage, 0, msg.clone());
        self.warnings.push(msg);
    }

    /// Appends this stage's events to the run's log file.
    pub fn flush(&mut self) -> Result<()> {
        std::fs::create_dir_all(&self.dir.root).map_err(|e| Error::io(&self.dir.root, e))?;
        self.log.append_to(&self.dir.events())?;
        self.log = EventLog::new();
        Ok(())
    }

    fn noises(&self) -> Vec<Option<NoiseType>> {
        match self.cfg.data.generator {
            Generator::PhaseTexture => vec![None],
            Generator::Glyph => self.cfg.data.noise.iter().copied().map(Some).collect(),
        }
    }

    fn split_ratio(&self, split: &str) -> f64 {
        let s = &self.cfg.data.split;
        match split {
            "pretrain" => s.pretrain,
            "rl" => s.rl,
            "finetune" => s.finetune,
            "val" => s.val,
            _ => s.test,
        }
    }

    fn read_part(&self, split: &str, noise: Option<NoiseType>) -> Result<Vec<SegSample>> {
        let path = self.dir.data(split, noise);
        if !path.exists() {
            if self.split_ratio(split) == 0.0 {
                return Ok(Vec::new());
            }
            return Err(Error::MissingStage(format!("gen-data ({} not found)", path.display())));
        }
        let meta = SampleMeta {
            generator: self.cfg.data.generator.name().into(),
            noise: noise.map_or("clean".into(), |n| n.name().into()),
        };
        Ok(read_dataset(&path, &meta)?.0)
    }

    /// All samples of a split, noise types concatenated in configuration order.
    pub fn load_split(&self, split: &str) -> Result<Vec<SegSample>> {
        let mut out = Vec::new();
        for n in self.noises() {
            out.extend(self.read_part(split, n)?);
        }
        Ok(out)
    }

    fn load_params<T: Scalar>(&mut self, stage: &str, name: &str, producer: &str) -> Result<ParamSet<T>> {
        let path = self.dir.checkpoint(stage, name);
        if !path.exists() {
            return Err(Error::MissingStage(format!("{producer} ({} not found)", path.display())));
        }
        let ck = Checkpoint::<T>::load(&path)?;
        if let Some(w) = ck.hash_warning(&self.cfg.hash(), &path) {
            self.warn(stage, w);
        }
        Ok(ck.params)
    }

    fn save_params<T: Scalar>(&self, stage: &str, name: &str, params: &ParamSet<T>) -> Result<()> {
        Checkpoint::new(self.cfg.hash(), params.clone()).save(&self.dir.checkpoint(stage, name))
    }

    pub fn load_suite<T: Scalar>(&mut self, stage: &str) -> Result<ModelSuite<T>> {
        let producer = if stage == "pretrain" { "pretrain" } else { stage };
        let specs = self.cfg.unet_specs();
        let mut models = Vec::with_capacity(specs.len());
        for (i, spec) in specs.into_iter().enumerate() {
            let params = self.load_params(stage, &format!("f{i}"), producer)?;
            models.push(UNet::from_params(spec, params)?);
        }
        ModelSuite::from_models(models)
    }

    pub fn load_policy<T: Scalar>(&mut self, stage: &str) -> Result<PolicyNet<T>> {
        let producer = match stage {
            "rl" => "train-rl",
            "tvd" => "finetune-tvd",
            other => other,
        };
        let params = self.load_params(stage, "policy", producer)?;
        PolicyNet::from_params(self.cfg.policy_spec()?, params)
    }

    fn save_suite<T: Scalar>(&self, stage: &str, suite: &ModelSuite<T>) -> Result<()> {
        for (i, m) in suite.models.iter().enumerate() {
            self.save_params(stage, &format!("f{i}"), &m.params)?;
        }
        Ok(())
    }

    fn prepared<T: Scalar>(&self, small: &UNet<T>, split: &str, data: &[SegSample]) -> Result<Prepared<T>> {
        if data.is_empty() {
            return Err(Error::invalid(format!("split {split} is empty")));
        }
        prepare(small, data, self.cfg.data.patches, self.cfg.mc_samples, &self.rng(&format!("mc_{split}")))
    }
}

/// Generates the configured dataset and writes one file per split (and noise
/// type for glyphs). Returns `(file stem, sample count)` pairs.
pub fn gen_data(st: &mut Stage<'_>) -> Result<Vec<(String, usize)>> {
    let cfg = st.cfg;
    let k = cfg.num_classes();
    let mut sizes = Vec::new();
    for (j, noise) in st.noises().into_iter().enumerate() {
        let samples = match noise {
            None => gen_phase_texture(cfg.data.count, cfg.seed, cfg.data.balance)?,
            Some(n) => gen_blurred_glyphs(cfg.data.count, n, cfg.seed.wrapping_mul(1000).wrapping_add(j as u64))?,
        };
        let set: SplitSet = split_dataset(samples, cfg.data.split, cfg.seed.wrapping_add(j as u64))?;
        for (name, part) in SplitSet::NAMES.iter().zip(set.parts()) {
            let path = st.dir.data(name, noise);
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or(name).to_string();
            if !part.is_empty() {
                std::fs::create_dir_all(path.parent().expect("data dir")).map_err(|e| Error::io(&path, e))?;
                write_dataset(&path, part, k)?;
            }
            st.log.record("gen_data", 0, &[(stem.as_str(), part.len() as f64)]);
            sizes.push((stem, part.len()));
        }
    }
    st.flush()?;
    Ok(sizes)
}

/// Pretrains the large models on patches, then the small model with
/// distillation from the largest one. Glyph runs train model `i` on noise `i`.
pub fn pretrain<T: Scalar>(st: &mut Stage<'_>) -> Result<ModelSuite<T>> {
    let cfg = st.cfg;
    let rng = st.rng("pretrain");
    let mut suite = ModelSuite::<T>::build(&cfg.unet_specs(), &mut rng.named("init"))?;
    let data_for = |st: &Stage<'_>, m: usize| -> Result<Vec<SegSample>> {
        match cfg.data.generator {
            Generator::PhaseTexture => st.load_split("pretrain"),
            Generator::Glyph => st.read_part("pretrain", Some(cfg.data.noise[m])),
        }
    };
    for m in (1..suite.len()).rev() {
        let data = data_for(st, m)?;
        let mut r = rng.named(&format!("f{m}"));
        pretrain_large(&mut suite.models[m], &data, cfg.data.patches, &cfg.large_train(), &mut r, &mut st.log)?;
    }
    let data = data_for(st, 0)?;
    let teacher = suite.models[suite.len() - 1].clone();
    let mut r = rng.named("f0");
    pretrain_small_kd(
        &mut suite.models[0],
        &teacher,
        &data,
        cfg.data.patches,
        cfg.pretrain.beta,
        &cfg.small_train(),
        &mut r,
        &mut st.log,
    )?;
    st.save_suite("pretrain", &suite)?;
    st.flush()?;
    Ok(suite)
}

/// Trains the routing policy against the frozen pretrained suite.
pub fn train_rl_stage<T: Scalar>(st: &mut Stage<'_>) -> Result<PolicyNet<T>> {
    let cfg = st.cfg;
    let suite = st.load_suite::<T>("pretrain")?;
    let data = st.load_split("rl")?;
    let prep = st.prepared(&suite.models[0], "rl", &data)?;
    let ious = iou_table(&suite, &prep)?;
    let mut policy = PolicyNet::<T>::new(cfg.policy_spec()?, &mut st.rng("policy_init"))?;
    train_rl(&mut policy, &suite, &prep, &ious, &cfg.rl, &mut st.rng("train_rl"), &mut st.log)?;
    st.save_params("rl", "policy", &policy.params)?;
    st.flush()?;
    Ok(policy)
}

/// Jointly updates the large models and the policy on the fine-tuning split.
pub fn finetune_stage<T: Scalar>(st: &mut Stage<'_>) -> Result<(ModelSuite<T>, PolicyNet<T>)> {
    let cfg = st.cfg;
    let mut policy = st.load_policy::<T>("rl")?;
    let mut suite = st.load_suite::<T>("pretrain")?;
    let data = st.load_split("finetune")?;
    let prep = st.prepared(&suite.models[0], "finetune", &data)?;
    finetune(&mut suite, &mut policy, &prep, &cfg.finetune_config(), &mut st.rng("finetune"), &mut st.log)?;
    st.save_suite("finetune", &suite)?;
    st.save_params("finetune", "policy", &policy.params)?;
    st.flush()?;
    Ok((suite, policy))
}

/// Ramps λ from the trained policy until its validation routing drifts past
/// the TVD threshold from where it started.
pub fn finetune_tvd_stage<T: Scalar>(st: &mut Stage<'_>) -> Result<TvdOutcome> {
    let cfg = st.cfg;
    let mut policy = st.load_policy::<T>("rl")?;
    let suite = st.load_suite::<T>("pretrain")?;
    if cfg.rl.lambda != 0.0 {
        st.warn("finetune_tvd", format!("reference policy was trained with λ = {}, not 0", cfg.rl.lambda));
    }
    let train = st.load_split("finetune")?;
    let val = st.load_split("val")?;
    let train_prep = st.prepared(&suite.models[0], "finetune", &train)?;
    let val_prep = st.prepared(&suite.models[0], "val", &val)?;
    let reference = routing_marginal(&policy, &val_prep)?;
    let ious = iou_table(&suite, &train_prep)?;
    let outcome = finetune_tvd(
        &mut policy,
        &suite,
        &train_prep,
        &ious,
        &val_prep,
        &reference,
        &cfg.tvd_config(),
        &mut st.rng("finetune_tvd"),
        &mut st.log,
    )?;
    st.save_params("tvd", "policy", &policy.params)?;
    let path = st.dir.root.join("checkpoints").join("tvd").join("outcome.json");
    std::fs::write(&path, serde_json::to_string_pretty(&outcome)? + "\n").map_err(|e| Error::io(&path, e))?;
    st.flush()?;
    Ok(outcome)
}

fn resolve_stage(st: &Stage<'_>) -> &'static str {
    match st.cfg.eval.stage.as_str() {
        "rl" => "rl",
        "finetune" => "finetune",
        "tvd" => "tvd",
        _ if st.dir.checkpoint("finetune", "policy").exists() => "finetune",
        _ => "rl",
    }
}

fn noisy_test(st: &Stage<'_>, data: Vec<SegSample>) -> Result<Vec<SegSample>> {
    let rate = st.cfg.eval.salt_pepper;
    if rate == 0.0 {
        return Ok(data);
    }
    let base = st.rng("salt_pepper");
    data.into_iter()
        .enumerate()
        .map(|(i, mut s)| {
            s.image = inject_salt_pepper(&s.image, rate, &mut base.fork(i as u64))?;
            s.meta.noise = format!("{}+salt_pepper", s.meta.noise);
            Ok(s)
        })
        .collect()
}

/// Per-image flop counts of an inference, recomputed from its actions.
pub fn flop_ledger<T: Scalar>(
    suite: &ModelSuite<T>,
    prep: &Prepared<T>,
    actions: &[Vec<usize>],
    policy_flops: u64,
    cascade: bool,
) -> Result<Vec<u64>> {
    let (ph, pw) = prep.patch_size();
    let per: Vec<u64> =
        (0..suite.len()).map(|m| if m == 0 { Ok(0) } else { suite.flops(m, ph, pw) }).collect::<Result<_>>()?;
    Ok(actions
        .iter()
        .map(|a| {
            let routed: u64 = a.iter().map(|&m| if cascade { per[..=m].iter().sum::<u64>() } else { per[m] }).sum();
            prep.mc_flops + policy_flops + routed
        })
        .collect())
}

/// Runs one inference method on the test split and writes its report.
pub fn eval<T: Scalar>(st: &mut Stage<'_>, method: &str) -> Result<RunReport> {
    if !METHODS.contains(&method) {
        return Err(Error::invalid(format!("unknown method {method:?} (expected one of {METHODS:?})")));
    }
    let cfg = st.cfg;
    let stage = resolve_stage(st);
    let model_stage = if stage == "finetune" { "finetune" } else { "pretrain" };
    let suite = st.load_suite::<T>(model_stage)?;
    let test = noisy_test(st, st.load_split("test")?)?;
    let prep = st.prepared(&suite.models[0], "test", &test)?;
    let k = cfg.num_classes();
    let tag = format!("eval_{method}");
    let paser = |st: &mut Stage<'_>| -> Result<(Inference, u64)> {
        let policy = st.load_policy::<T>(stage)?;
        Ok((paser_infer(&suite, &policy, &prep)?, policy.spec.flops()?))
    };
    let (inf, policy_flops, cascade) = match method {
        "paser" => {
            let (inf, pf) = paser(st)?;
            (inf, pf, false)
        }
        "idk" => {
            let val = st.load_split("val")?;
            let vp = st.prepared(&suite.models[0], "val", &val)?;
            let grid = GridSpec { points: cfg.idk.grid_points, lambda_idk: cfg.idk.lambda };
            let tuned = tune_idk(&CascadeCache::build(&suite, &vp)?, &grid)?;
            st.log.record(&tag, 0, &[("threshold0", tuned.thresholds[0])]);
            (idk_infer(&suite, &tuned, &prep)?, 0, true)
        }
        "idk-match" => {
            let (p, _) = paser(st)?;
            let target = dataset_iou(&p.labels, &prep.gt, k)?;
            let cache = CascadeCache::build(&suite, &prep)?;
            let m = iou_match_tune(&cache, target, cfg.idk.match_tolerance, cfg.idk.lambda)?;
            if !m.matched {
                st.warn(&tag, format!("cascade IoU {:.4} does not match target {target:.4}", m.iou));
            }
            st.log.record(&tag, 0, &[("target_iou", target), ("level", m.level)]);
            (cache.evaluate(&m.config)?, 0, true)
        }
        _ => (random_policy_infer(&suite, &prep, &mut st.rng("random_policy"))?, 0, false),
    };
    let ledger = flop_ledger(&suite, &prep, &inf.actions, policy_flops, cascade)?;
    for (i, f) in ledger.iter().enumerate() {
        st.log.record(&tag, i, &[("flops", *f as f64)]);
    }
    if ledger.iter().sum::<u64>() != inf.flops {
        return Err(Error::invalid(format!(
            "flop ledger {} disagrees with total {}",
            ledger.iter().sum::<u64>(),
            inf.flops
        )));
    }
    let report = build_report(method, cfg, &suite, &prep, &test, &inf, cascade)?;
    report.save(&st.dir.report(method))?;
    st.flush()?;
    Ok(report)
}

fn build_report<T: Scalar>(
    method: &str,
    cfg: &ExperimentConfig,
    suite: &ModelSuite<T>,
    prep: &Prepared<T>,
    data: &[SegSample],
    inf: &Inference,
    cascade: bool,
) -> Result<RunReport> {
    let k = cfg.num_classes();
    let m = suite.len();
    let iou = dataset_iou(&inf.labels, &prep.gt, k)?;
    let flat: Vec<usize> = inf.actions.iter().flatten().copied().collect();
    let mut counts = vec![0u64; m];
    flat.iter().for_each(|&a| counts[a] += 1);
    let c = suite.costs();
    let mean_cost =
        flat.iter().map(|&a| if cascade { c[..=a].iter().sum() } else { c[a] }).sum::<f64>() / flat.len() as f64;
    let (confusion, tvd_ref) = if cfg.data.generator == Generator::Glyph {
        let reference: Vec<usize> = data
            .iter()
            .zip(&inf.actions)
            .flat_map(|(s, a)| {
                let r = cfg.data.noise.iter().position(|n| s.meta.noise.starts_with(n.name())).unwrap_or(0);
                std::iter::repeat(r).take(a.len())
            })
            .collect();
        let conf = assignment_confusion(&flat, &reference, m)?;
        let d = tvd(&marginal(&flat, m), &marginal(&reference, m))?;
        (Some(conf), Some(d))
    } else {
        (None, None)
    };
    Ok(RunReport {
        method: method.to_string(),
        lambda: (method == "paser").then_some(cfg.rl.lambda),
        images: prep.len(),
        patches: prep.patches,
        mean_iou: iou,
        total_flops: inf.flops as f64,
        iou_per_gigaflop: iou_per_gigaflop(iou, inf.flops as f64)?,
        assignment_counts: counts,
        mean_cost,
        confusion,
        tvd: tvd_ref,
    })
}

/// Loads the report of every method found under each run directory (or a
/// report directory given directly).
pub fn collect_reports(paths: &[PathBuf]) -> Result<Vec<(PathBuf, RunReport)>> {
    if paths.is_empty() {
        return Err(Error::invalid("no run directories given"));
    }
    let mut out = Vec::new();
    for p in paths {
        if p.join("report.json").exists() {
            out.push((p.clone(), RunReport::load(p)?));
            continue;
        }
        let reports = p.join("reports");
        let entries = std::fs::read_dir(&reports).map_err(|e| Error::io(&reports, e))?;
        let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|d| d.is_dir()).collect();
        dirs.sort();
        if dirs.is_empty() {
            return Err(Error::MissingStage(format!("eval ({} holds no reports)", reports.display())));
        }
        for d in dirs {
            out.push((d.clone(), RunReport::load(&d)?));
        }
    }
    Ok(out)
}

/// Comparison table in the layout of a results table.
pub fn comparison_table(reports: &[(PathBuf, RunReport)]) -> String {
    let mut s =
        String::from("| run | method | λ | IoU | flops | IoU/GigaFlop | mean cost |\n|---|---|---|---|---|---|---|\n");
    for (p, r) in reports {
        let run = p.parent().and_then(Path::parent).unwrap_or(p).display();
        let lambda = r.lambda.map(|l| l.to_string()).unwrap_or_else(|| "-".into());
        s += &format!(
            "| {run} | {} | {lambda} | {:.4} | {:.3e} | {:.4e} | {:.4} |\n",
            r.method, r.mean_iou, r.total_flops, r.iou_per_gigaflop, r.mean_cost
        );
    }
    s
}

/// `lambda,mean_cost,mean_iou` rows of the PaSeR reports, sorted by λ.
pub fn lambda_sweep_csv(reports: &[(PathBuf, RunReport)]) -> String {
    let mut rows: Vec<&RunReport> = reports.iter().map(|(_, r)| r).filter(|r| r.lambda.is_some()).collect();
    rows.sort_by(|a, b| a.lambda.partial_cmp(&b.lambda).expect("finite λ"));
    let mut s = String::from("lambda,mean_cost,mean_iou\n");
    for r in rows {
        s += &format!("{},{},{}\n", r.lambda.expect("filtered"), r.mean_cost, r.mean_iou);
    }
    s
}

/// Writes the comparison table and sweep CSV into `out`.
pub fn write_report(paths: &[PathBuf], out: &Path) -> Result<String> {
    let reports = collect_reports(paths)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let table = comparison_table(&reports);
    let mut csv = format!("run,{}\n", RunReport::CSV_HEADER);
    for (p, r) in &reports {
        csv += &format!("{},{}\n", p.display(), r.csv_row());
    }
    for (name, body) in
        [("comparison.md", &table), ("comparison.csv", &csv), ("lambda_sweep.csv", &lambda_sweep_csv(&reports))]
    {
        let path = out.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(table)
}
