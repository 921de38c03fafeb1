//! One function per subcommand.

use scar_core::rng::stream;
use scar_core::{Config, ConfigError};
use scar_eval::{
    a2l_latent_mse, a2l_rollout_metrics, action_probe, evaluate_episodes, labeled_frames, latent_recovery_score,
    latent_sample, leakage_eval, mean_row, metric_csv, train_frame_classifier, ClassifierConfig, EvalRow, FitConfig,
    LeakageResult, MetricRow, ProbeReport, RecoveryReport,
};
use scar_models::{
    pretrain_fdm, train_a2l, train_scar, training_pool, A2l, A2lMode, A2lTrainConfig, ModelConfig, ScarModel,
    TrainConfig, Variant,
};
use scar_theory::{
    idm_lemma_check, linear_spec, mgf_probe_check, pushforward_and_transfer_check, recurrence_residual, saddle_train,
    CheckReport, LemmaConfig, LemmaReport, PushforwardCheck, SaddleConfig, SaddleReport, TheoryError, VmfExperiment,
};
use scar_world::{generate_dataset, Split};
use serde::Serialize;

use crate::data::{cond_source, load_params, parse_config, parse_spec, read_text, DataDir, Method, DATASET_FILE, SPEC_FILE};
use crate::error::CliError;
use crate::manifest::{Outputs, RunManifest};

const PRETRAIN_STEM: &str = "fdm-pretrain";

fn config_err(file: &str) -> impl FnOnce(ConfigError) -> CliError + '_ {
    move |source| CliError::Config {
        file: file.to_string(),
        source,
    }
}

/// Flag settings as a config, so every command has a hashable configuration.
fn flag_config(pairs: &[(&str, String)]) -> Config {
    let mut c = Config::default();
    for (k, v) in pairs {
        c.set(k, v);
    }
    c
}

pub fn gen(a: &crate::GenArgs, argv: &[String]) -> Result<RunManifest, CliError> {
    let text = read_text(&a.spec)?;
    let file = a.spec.display().to_string();
    let c = Config::parse(&text).map_err(config_err(&file))?;
    let hash = c.hash();
    let (spec, counts) = parse_spec(c, &file)?;
    let ds = generate_dataset(a.seed, &counts, &spec)?;
    for (split, e, n) in counts.plan(&spec) {
        let got = ds.count(split, e);
        if got != n {
            return Err(CliError::Usage(format!("{} split of embodiment {e}: {got} episodes, planned {n}", split.name())));
        }
    }
    let mut out = Outputs::create(&a.out)?;
    out.write(DATASET_FILE, &ds.to_bytes())?;
    out.write(SPEC_FILE, text.as_bytes())?;
    out.checksums.insert("spec".into(), spec.hash_hex());
    out.seal("gen.manifest.json", argv, hash, a.seed)
}

pub fn train(a: &crate::TrainArgs, argv: &[String]) -> Result<RunManifest, CliError> {
    let data = DataDir::open(&a.data)?;
    let file = a.config.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
    let mut c = match &a.config {
        Some(p) => parse_config(p)?,
        None => Config::default(),
    };
    if let Some(s) = a.seed {
        c.set("train.seed", &s.to_string());
    }
    let variant = match &a.variant {
        Some(v) => Variant::parse(v).ok_or_else(|| {
            let known: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            CliError::Usage(format!("unknown variant `{v}` (expected one of {})", known.join(", ")))
        })?,
        None => Variant::SharedLatent,
    };
    if c.contains("train.variant") {
        let named = c.str_or("train.variant", "");
        if named != variant.name() {
            return Err(CliError::Config {
                file: file.clone(),
                source: ConfigError::Contradiction(format!("config names variant {named}, flag names {}", variant.name())),
            });
        }
    }
    let mc = ModelConfig::from_config(&mut c, data.model_base())?;
    let tc = TrainConfig::from_config(&mut c, Some(variant))?;
    c.finish().map_err(config_err(&file))?;
    c.set("train.variant", variant.name());
    let hash = c.hash();

    let pool = training_pool(&data.ds, variant);
    let (model, mut store) = ScarModel::new(&mc, cond_source(variant), tc.seed)?;
    let mut out = Outputs::create(&a.out)?;
    if a.pretrain_only {
        let pre = pretrain_fdm(&model, store, &tc, &pool, tc.pretrain_steps)?;
        let fdm = pre.store.subset("fdm.");
        out.write(&format!("{PRETRAIN_STEM}.ckpt"), &ScarModel::save(&fdm))?;
        out.write(&format!("{PRETRAIN_STEM}.log.csv"), pre.log.to_csv().as_bytes())?;
        out.checksums.insert("fdm".into(), fdm.checksum(""));
        return out.seal("train-pretrain.manifest.json", argv, hash, tc.seed);
    }
    let stem = variant.name();
    if let Some(init) = &a.init {
        let fdm = load_params(init)?.subset("fdm.");
        if fdm.is_empty() {
            return Err(CliError::Missing(format!("{} has no fdm. parameters", init.display())));
        }
        store.load_matching(&fdm)?;
        out.checksums.insert("init.fdm".into(), fdm.checksum(""));
    } else if tc.pretrain_fdm {
        let pre = pretrain_fdm(&model, store, &tc, &pool, tc.pretrain_steps)?;
        out.write(&format!("{stem}.pretrain.log.csv"), pre.log.to_csv().as_bytes())?;
        store = pre.store;
    }
    let run = train_scar(&model, store, &tc, &pool)?;
    out.write(&format!("{stem}.ckpt"), &ScarModel::save(&run.store))?;
    out.write(&format!("{stem}.log.csv"), run.log.to_csv().as_bytes())?;
    out.write(&format!("{stem}.cfg"), c.canonical().as_bytes())?;
    for prefix in ["idm.", "fdm.", "cond.", "disc."] {
        out.checksums.insert(prefix.trim_end_matches('.').into(), run.store.checksum(prefix));
    }
    out.seal(&format!("train-{stem}.manifest.json"), argv, hash, tc.seed)
}

pub fn eval(a: &crate::EvalArgs, argv: &[String]) -> Result<RunManifest, CliError> {
    let data = DataDir::open(&a.data)?;
    let methods = Method::load_dir(&a.checkpoints, &data)?;
    let transfer = data.spec.transfer_task();
    let tasks = [("target", Split::EvalTarget, &data.spec), ("transfer", Split::EvalTransfer, &transfer)];
    let (mut rows, mut summary) = (Vec::new(), Vec::new());
    for m in &methods {
        for (task, split, spec) in tasks {
            let eps = data.ds.trajectories(split);
            let metrics = evaluate_episodes(&m.model, &m.store, spec, &eps, a.seed)?;
            let cell = |episode, metrics| EvalRow {
                method: m.name().into(),
                task: task.into(),
                episode,
                metrics,
            };
            summary.push(cell(0, mean_row(&metrics)));
            rows.extend(metrics.into_iter().enumerate().map(|(i, r)| cell(i, r)));
        }
    }
    let mut out = Outputs::create(&a.out)?;
    out.write("metrics.csv", metric_csv(&rows).as_bytes())?;
    out.write("summary.csv", metric_csv(&summary).as_bytes())?;
    let c = flag_config(&[("eval.seed", a.seed.to_string())]);
    out.seal("eval.manifest.json", argv, c.hash(), a.seed)
}

#[derive(Serialize)]
pub struct ProbeEntry {
    pub method: String,
    pub action: ProbeReport,
    pub recovery: RecoveryReport,
    pub pushforward: PushforwardCheck,
}

/// Rows per embodiment compared by the pushforward test, and its permutation count.
const PUSH_ROWS: usize = 150;
const PUSH_PERMS: usize = 199;

pub fn probe(a: &crate::EvalArgs, argv: &[String]) -> Result<RunManifest, CliError> {
    let data = DataDir::open(&a.data)?;
    let methods = Method::load_dir(&a.checkpoints, &data)?;
    let ds = &data.ds;
    let train: Vec<_> = ds.trajectories(Split::Train).into_iter().filter(|t| t.embodiment == ds.target).collect();
    let held = ds.trajectories(Split::EvalTarget);
    let analysis = ds.trajectories(Split::Analysis);
    let mut out = Outputs::create(&a.out)?;
    let mut entries = Vec::new();
    for m in &methods {
        let before = m.store.checksum("idm.");
        let action = action_probe(&m.model, &m.store, &train, &held, &FitConfig::mlp(a.seed))?;
        let sample = latent_sample(&m.model, &m.store, &analysis, ds.n_embodiments)?;
        let recovery = latent_recovery_score(&sample, a.seed)?;
        let pushforward = pushforward_and_transfer_check(&sample, PUSH_ROWS, PUSH_PERMS, a.seed)?;
        let after = m.store.checksum("idm.");
        if before != after {
            return Err(CliError::Usage(format!("{}: probing changed the IDM", m.name())));
        }
        out.checksums.insert(format!("{}.idm", m.name()), after);
        entries.push(ProbeEntry {
            method: m.name().into(),
            action,
            recovery,
            pushforward,
        });
    }
    out.write_json("probe.json", &entries)?;
    let c = flag_config(&[("probe.seed", a.seed.to_string())]);
    out.seal("probe.manifest.json", argv, c.hash(), a.seed)
}

#[derive(Serialize)]
pub struct LeakageEntry {
    pub method: String,
    #[serde(flatten)]
    pub result: LeakageResult,
}

pub fn leakage(a: &crate::LeakageArgs, argv: &[String]) -> Result<RunManifest, CliError> {
    let data = DataDir::open(&a.data)?;
    let methods = Method::load_dir(&a.checkpoints, &data)?;
    let (ds, spec) = (&data.ds, &data.spec);
    let train = labeled_frames(ds, Split::Train, spec, 4);
    let val = labeled_frames(ds, Split::Analysis, spec, 4);
    let clf = train_frame_classifier(&train, &val, ds.n_embodiments, &ClassifierConfig::new(a.seed))?;
    let mut entries = Vec::new();
    for m in &methods {
        let result = leakage_eval(&m.model, &m.store, spec, ds, &clf, a.pairs, a.seed)?;
        entries.push(LeakageEntry {
            method: m.name().into(),
            result,
        });
    }
    let mut out = Outputs::create(&a.out)?;
    out.write_json("leakage.json", &entries)?;
    let c = flag_config(&[("leakage.seed", a.seed.to_string()), ("leakage.pairs", a.pairs.to_string())]);
    out.seal("leakage.manifest.json", argv, c.hash(), a.seed)
}

/// Reads the `[a2l]` section.
pub fn a2l_config(c: &mut Config, seed: u64) -> Result<A2lTrainConfig, ConfigError> {
    let d = A2lTrainConfig::new(seed);
    Ok(A2lTrainConfig {
        finetune: false,
        steps: c.usize_or("a2l.steps", d.steps)?,
        batch: c.usize_or("a2l.batch", d.batch)?,
        lr: c.f64_or("a2l.lr", d.lr)?,
        wd: c.f64_or("a2l.wd", d.wd)?,
        lr_fdm: c.f64_or("a2l.lr_fdm", d.lr_fdm)?,
        wd_fdm: c.f64_or("a2l.wd_fdm", d.wd_fdm)?,
        seed,
    })
}

/// Controller variants in report order: name, mode, FDM fine-tuning.
pub const A2L_VARIANTS: [(&str, A2lMode, bool); 3] = [
    ("pointwise-a2l", A2lMode::Pointwise, false),
    ("sequence-a2l", A2lMode::Sequence, false),
    ("sequence-a2l-ft", A2lMode::Sequence, true),
];

pub fn a2l(a: &crate::A2lArgs, argv: &[String]) -> Result<RunManifest, CliError> {
    let data = DataDir::open(&a.data)?;
    let base = Method::load(&a.checkpoint, &data)?;
    if base.variant.raw_actions() {
        return Err(CliError::Usage(format!("{} conditions on raw actions and has no latent interface", base.name())));
    }
    let file = a.config.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
    let mut c = match &a.config {
        Some(p) => parse_config(p)?,
        None => Config::default(),
    };
    let cfg = a2l_config(&mut c, a.seed).map_err(config_err(&file))?;
    c.finish().map_err(config_err(&file))?;
    c.set("a2l.seed", &a.seed.to_string());
    let pool = data.ds.trajectories(Split::A2l);
    let held = data.ds.trajectories(Split::EvalTarget);
    let idm = base.store.checksum("idm.");
    let mut out = Outputs::create(&a.out)?;
    let mut csv = String::from("method,latent_mse,SSIM,PSNR,MSE,SSIM-L\n");
    for (name, mode, finetune) in A2L_VARIANTS {
        let mut store = base.store.clone();
        let ctl = A2l::new(&mut store, &base.model.cfg, mode, &mut stream(a.seed, &format!("a2l/init/{name}")))?;
        let run = train_a2l(&base.model, &ctl, store, &A2lTrainConfig { finetune, ..cfg.clone() }, &pool)?;
        if run.store.checksum("idm.") != idm {
            return Err(CliError::Usage(format!("{name}: A2L training changed the IDM")));
        }
        let mse = a2l_latent_mse(&base.model, &ctl, &run.store, &held)?;
        let r: MetricRow = mean_row(&a2l_rollout_metrics(&base.model, &ctl, &run.store, &data.spec, &held, a.seed)?);
        csv.push_str(&format!("{name},{mse:.6e},{:.6},{:.4},{:.6e},{:.6}\n", r.ssim, r.psnr, r.mse, r.ssim_l));
        out.write(&format!("{name}.ckpt"), &ScarModel::save(&run.store))?;
        out.write(&format!("{name}.log.csv"), run.log.to_csv().as_bytes())?;
        out.checksums.insert(format!("{name}.a2l"), run.store.checksum("a2l."));
    }
    out.checksums.insert("idm".into(), idm);
    out.write("a2l.csv", csv.as_bytes())?;
    out.seal("a2l.manifest.json", argv, c.hash(), a.seed)
}

/// Worst Bessel recurrence residual on `ν ∈ [1, 5]`, `r ∈ [0.1, 50]`.
pub fn bessel_recurrence_worst() -> f64 {
    let mut worst: f64 = 0.0;
    for nu in [1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0] {
        for k in 0..=500 {
            let r = 0.1 + (50.0 - 0.1) * k as f64 / 500.0;
            worst = worst.max(recurrence_residual(nu, r));
        }
    }
    worst
}

fn check(name: &str, statistic: f64, threshold: f64, pass: bool, seeds: &[u64]) -> CheckReport {
    CheckReport {
        check: name.into(),
        statistic,
        threshold,
        pass,
        seeds: seeds.to_vec(),
    }
}

fn max_of(it: impl Iterator<Item = f64>) -> f64 {
    it.fold(f64::NEG_INFINITY, f64::max)
}

/// MGF samples per probe.
const MGF_SAMPLES: usize = 50_000;

/// Saddle and MGF checks on the vMF preset with ambient dimension `d_a`.
pub fn verify_vmf(d_a: usize, seeds: &[u64]) -> Result<(Vec<CheckReport>, Vec<SaddleReport>), CliError> {
    let mut reports = Vec::new();
    let mut checks = Vec::new();
    for &s in seeds {
        match saddle_train(&VmfExperiment::preset(d_a, s)?, &SaddleConfig::new(s)) {
            Ok(r) => reports.push(r),
            Err(TheoryError::RankCollapse(ratio)) => checks.push(check("saddle/rank", ratio, 0.0, false, &[s])),
            Err(e) => return Err(e.into()),
        }
    }
    let p = format!("vmf-d{d_a}");
    let all = reports.len() == seeds.len();
    let ce = max_of(reports.iter().map(|r| (r.heldout_ce - r.ln_e).abs()));
    let gap = max_of(reports.iter().map(|r| r.max_center_gap));
    let angle = max_of(reports.iter().map(|r| r.max_angle));
    checks.push(check(&format!("{p}/saddle/ce_minus_ln_e"), ce, 0.05, all && ce <= 0.05, seeds));
    checks.push(check(&format!("{p}/saddle/center_gap"), gap, 0.05, all && gap < 0.05, seeds));
    checks.push(check(&format!("{p}/saddle/max_angle"), angle, 0.1, all && angle < 0.1, seeds));
    let mut z: f64 = 0.0;
    for &s in seeds {
        z = z.max(mgf_probe_check(&VmfExperiment::preset(d_a, s)?, 20, MGF_SAMPLES, 0.5, s)?.max_z());
    }
    checks.push(check(&format!("{p}/mgf/max_z"), z, 3.0, z <= 3.0, seeds));
    Ok((checks, reports))
}

pub fn verify_lemma(seeds: &[u64]) -> Result<(Vec<CheckReport>, Vec<LemmaReport>), CliError> {
    let spec = linear_spec()?;
    let mut reports = Vec::new();
    let mut checks = Vec::new();
    for &s in seeds {
        match idm_lemma_check(&spec, &LemmaConfig::new(s)) {
            Ok(r) => reports.push(r),
            Err(TheoryError::PremiseUnmet(rec)) => checks.push(check("lemma/premise", rec, 1e-3, false, &[s])),
            Err(e) => return Err(e.into()),
        }
    }
    let all = reports.len() == seeds.len();
    let min_of = |f: &dyn Fn(&LemmaReport) -> f64| reports.iter().map(f).fold(f64::INFINITY, f64::min);
    let fwd = min_of(&|r| r.trained.r2_forward);
    let inv = min_of(&|r| r.trained.r2_inverse);
    let rho = min_of(&|r| r.spearman);
    let gap = max_of(reports.iter().map(|r| r.trained.state_gap));
    let shuffled = max_of(reports.iter().map(|r| r.shuffled_r2));
    checks.push(check("lemma/r2_forward", fwd, 0.99, all && fwd > 0.99, seeds));
    checks.push(check("lemma/r2_inverse", inv, 0.99, all && inv > 0.99, seeds));
    checks.push(check("lemma/state_gap", gap, 0.01, all && gap < 0.01, seeds));
    checks.push(check("lemma/shuffled_r2", shuffled, 0.1, all && shuffled < 0.1, seeds));
    checks.push(check("lemma/gap_spearman", rho, 0.8, all && rho > 0.8, seeds));
    Ok((checks, reports))
}

#[derive(Serialize, Default)]
struct VerifyDetail {
    saddle: Vec<SaddleReport>,
    lemma: Vec<LemmaReport>,
}

pub fn verify(a: &crate::VerifyArgs, argv: &[String]) -> Result<RunManifest, CliError> {
    let dims: &[usize] = match a.preset.as_str() {
        "vmf-small" => &[4],
        "vmf-medium" => &[6],
        "vmf-large" => &[8],
        "lemma" => &[],
        "all" => &[4, 6, 8],
        p => return Err(CliError::Usage(format!("unknown preset `{p}` (vmf-small, vmf-medium, vmf-large, lemma, all)"))),
    };
    if a.seeds.is_empty() {
        return Err(CliError::Usage("at least one seed is required".into()));
    }
    let mut checks = Vec::new();
    let mut detail = VerifyDetail::default();
    for &d in dims {
        let (c, r) = verify_vmf(d, &a.seeds)?;
        checks.extend(c);
        detail.saddle.extend(r);
    }
    if matches!(a.preset.as_str(), "lemma" | "all") {
        let (c, r) = verify_lemma(&a.seeds)?;
        checks.extend(c);
        detail.lemma = r;
    }
    if !dims.is_empty() {
        let worst = bessel_recurrence_worst();
        checks.push(check("bessel/recurrence", worst, 1e-8, worst < 1e-8, &[]));
    }
    let mut out = Outputs::create(&a.out)?;
    out.write_json("verify.json", &checks)?;
    out.write_json("verify-detail.json", &detail)?;
    let passed = checks.iter().filter(|c| c.pass).count();
    out.checksums.insert("passed".into(), format!("{passed}/{}", checks.len()));
    let seeds: Vec<String> = a.seeds.iter().map(u64::to_string).collect();
    let c = flag_config(&[("verify.preset", a.preset.clone()), ("verify.seeds", seeds.join(","))]);
    out.seal("verify.manifest.json", argv, c.hash(), a.seeds[0])
}
