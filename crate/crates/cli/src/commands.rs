use std::fs;
use std::path::{Path, PathBuf};

use danet_core::data::{
    build_bundles, bundles_for_range, default_synthetic_start, parse_timestamp, synthesize_series,
    BundleSet, NormStats, Series, SplitBundles, SplitSpec, TIMESTAMP_FORMAT,
};
use danet_core::ensemble::{
    ensemble_size_sweep, evaluate as score, predict_ensemble, robustness_grid,
    train_ensemble as fit_ensemble, write_grid_csv, write_sweep_csv, write_sweep_long_csv,
    EnsembleConfig, EnsembleModel, EvaluationReport,
};
use danet_core::layers::{gradient_growth_study, CombineRule};
use danet_core::training::{
    load_model, predict as predict_single, save_model, train as train_model, TrainedModel,
    TrainingManifest,
};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::output::{write_file, OutputDir};
use crate::{CliError, Common, ModelArgs};

const MODEL_FILE: &str = "model.danet";
const ENSEMBLE_MANIFEST: &str = "ensemble.toml";

struct Run {
    cfg: RunConfig,
    root: PathBuf,
}

impl Run {
    fn open(c: &Common, needs_data: bool) -> Result<Self, CliError> {
        let mut cfg = RunConfig::load(&c.config, c.seed, needs_data)?;
        if let Some(out) = &c.out {
            cfg.out_dir = out.clone();
        }
        let root = cfg.out_dir.clone();
        Ok(Self { cfg, root })
    }

    fn output(&self, command: &str, force: bool) -> Result<OutputDir, CliError> {
        let out = OutputDir::prepare(self.root.join(command), force)?;
        out.write("run_config.toml", self.cfg.to_toml()?)?;
        Ok(out)
    }

    fn data(&self) -> Result<(Series, SplitSpec), CliError> {
        let series = self.cfg.load_series()?;
        let split = self.cfg.resolve_split(&series)?;
        Ok((series, split))
    }

    fn bundles(&self) -> Result<(Series, SplitSpec, NormStats, SplitBundles), CliError> {
        let (series, split) = self.data()?;
        let stats = NormStats::fit(&series, &split.fitting())?;
        let b = build_bundles(&series, &split, &stats)?;
        Ok((series, split, stats, b))
    }
}

pub fn synthesize(
    days: usize,
    seed: u64,
    start: Option<&str>,
    out: &Path,
    force: bool,
) -> Result<(), CliError> {
    let start = match start {
        Some(s) => parse_timestamp(s)
            .ok_or_else(|| CliError::Usage(format!("cannot parse --start `{s}`")))?,
        None => default_synthetic_start(),
    };
    crate::output::refuse_existing(out, force)?;
    let series = synthesize_series(days, seed, start)?;
    let mut bytes = Vec::new();
    series.write_to(&mut bytes)?;
    write_file(out, &bytes, force)?;
    info!("wrote {} hours to {}", series.len(), out.display());
    Ok(())
}

fn loss_csv(m: &TrainingManifest) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "learning_rate", "train_loss", "validation_loss"])
        .map_err(core_csv)?;
    for (e, (&lr, &tl)) in m.learning_rates.iter().zip(&m.train_losses).enumerate() {
        let vl = m
            .validation_losses
            .get(e)
            .map_or(String::new(), f64::to_string);
        w.write_record([e.to_string(), lr.to_string(), tl.to_string(), vl])
            .map_err(core_csv)?;
    }
    w.into_inner().map_err(|e| CliError::Usage(e.to_string()))
}

fn core_csv(e: csv::Error) -> CliError {
    CliError::Core(e.into())
}

fn validation(b: &SplitBundles) -> Option<&BundleSet> {
    Some(&b.validation).filter(|v| !v.is_empty())
}

pub fn train(c: &Common) -> Result<(), CliError> {
    let run = Run::open(c, true)?;
    let out = run.output("train", c.force)?;
    let (_, _, stats, b) = run.bundles()?;
    info!(
        "training on {} bundles ({} validation)",
        b.train.len(),
        b.validation.len()
    );
    let model = train_model(
        &b.train,
        validation(&b),
        &stats,
        &run.cfg.train,
        &run.cfg.model,
    )?;
    save_model(&model, &out.path(MODEL_FILE))?;
    out.write("losses.csv", loss_csv(&model.manifest)?)?;
    info!("model written to {}", out.path(MODEL_FILE).display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct MemberEntry {
    file: String,
    seed: u64,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct EnsembleManifest {
    subsample: f64,
    members: Vec<MemberEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn train_ensemble(c: &Common) -> Result<(), CliError> {
    let run = Run::open(c, true)?;
    let out = run.output("train-ensemble", c.force)?;
    let (_, _, stats, b) = run.bundles()?;
    let ens = fit_ensemble(
        &b.train,
        validation(&b),
        &stats,
        &run.cfg.train,
        &run.cfg.model,
        &run.cfg.ensemble,
    )?;
    let mut members = Vec::new();
    for (i, (m, &seed)) in ens.members.iter().zip(&ens.seeds).enumerate() {
        let file = format!("member_{i}.danet");
        save_model(m, &out.path(&file))?;
        let bytes = fs::read(out.path(&file)).map_err(|e| CliError::Core(e.into()))?;
        out.write(&format!("losses_member_{i}.csv"), loss_csv(&m.manifest)?)?;
        members.push(MemberEntry {
            file,
            seed,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = EnsembleManifest {
        subsample: ens.subsample,
        members,
    };
    let text = toml::to_string(&manifest).map_err(|e| CliError::Usage(e.to_string()))?;
    out.write(ENSEMBLE_MANIFEST, text)?;
    info!(
        "{} members written to {}",
        ens.len(),
        out.path("").display()
    );
    Ok(())
}

fn load_ensemble(path: &Path) -> Result<EnsembleModel, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Core(e.into()))?;
    let manifest: EnsembleManifest = toml::from_str(&text).map_err(|e| {
        CliError::Core(danet_core::Error::Corrupt(format!(
            "{}: {e}",
            path.display()
        )))
    })?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut members = Vec::new();
    let mut seeds = Vec::new();
    for m in &manifest.members {
        let file = dir.join(&m.file);
        let bytes = fs::read(&file).map_err(|e| CliError::Core(e.into()))?;
        if sha256_hex(&bytes) != m.sha256 {
            return Err(CliError::Core(danet_core::Error::Corrupt(format!(
                "{} does not match its manifest checksum",
                file.display()
            ))));
        }
        members.push(load_model(&file)?);
        seeds.push(m.seed);
    }
    Ok(EnsembleModel::from_members(
        members,
        manifest.subsample,
        seeds,
    )?)
}

enum Loaded {
    Single(Box<TrainedModel>),
    Ensemble(EnsembleModel),
}

impl Loaded {
    fn name(&self) -> &'static str {
        match self {
            Loaded::Single(_) => "single",
            Loaded::Ensemble(_) => "ensemble",
        }
    }

    fn stats(&self) -> &NormStats {
        match self {
            Loaded::Single(m) => &m.stats,
            Loaded::Ensemble(e) => e.stats(),
        }
    }

    fn forecast(&self, set: &BundleSet) -> Result<Vec<f64>, CliError> {
        Ok(match self {
            Loaded::Single(m) => predict_single(m, set)?,
            Loaded::Ensemble(e) => predict_ensemble(e, set)?,
        })
    }
}

/// Explicit paths, or whatever `train` / `train-ensemble` left in the run root.
fn resolve_models(run: &Run, args: &ModelArgs) -> Result<Vec<Loaded>, CliError> {
    let explicit = args.model.is_some() || args.ensemble.is_some();
    let single = args.model.clone().or_else(|| {
        Some(run.root.join("train").join(MODEL_FILE)).filter(|p| !explicit && p.exists())
    });
    let ensemble = args.ensemble.clone().or_else(|| {
        Some(run.root.join("train-ensemble").join(ENSEMBLE_MANIFEST))
            .filter(|p| !explicit && p.exists())
    });
    let mut out = Vec::new();
    if let Some(p) = single {
        out.push(Loaded::Single(Box::new(load_model(&p)?)));
    }
    if let Some(p) = ensemble {
        out.push(Loaded::Ensemble(load_ensemble(&p)?));
    }
    if out.is_empty() {
        return Err(CliError::Usage(
            "no model found: pass --model or --ensemble, or run train / train-ensemble first"
                .into(),
        ));
    }
    Ok(out)
}

fn test_bundles(series: &Series, split: &SplitSpec, model: &Loaded) -> Result<BundleSet, CliError> {
    Ok(bundles_for_range(series, &split.test, model.stats())?)
}

pub fn predict(c: &Common, args: &ModelArgs) -> Result<(), CliError> {
    let run = Run::open(c, true)?;
    let models = resolve_models(&run, args)?;
    let out = run.output("predict", c.force)?;
    let (series, split) = run.data()?;
    for m in &models {
        let set = test_bundles(&series, &split, m)?;
        let f = m.forecast(&set)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["timestamp", "forecast", "actual"])
            .map_err(core_csv)?;
        for (b, v) in set.bundles.iter().zip(&f) {
            w.write_record([
                b.timestamp.format(TIMESTAMP_FORMAT).to_string(),
                v.to_string(),
                b.actual.to_string(),
            ])
            .map_err(core_csv)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?;
        out.write(&format!("{}_forecasts.csv", m.name()), bytes)?;
    }
    Ok(())
}

fn residual_csv(set: &BundleSet, f: &[f64], r: &EvaluationReport) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["timestamp", "actual", "forecast", "residual"])
        .map_err(core_csv)?;
    for ((b, v), e) in set.bundles.iter().zip(f).zip(&r.residuals) {
        w.write_record([
            b.timestamp.format(TIMESTAMP_FORMAT).to_string(),
            b.actual.to_string(),
            v.to_string(),
            e.to_string(),
        ])
        .map_err(core_csv)?;
    }
    w.into_inner().map_err(|e| CliError::Usage(e.to_string()))
}

pub fn evaluate(c: &Common, args: &ModelArgs) -> Result<(), CliError> {
    let run = Run::open(c, true)?;
    let models = resolve_models(&run, args)?;
    let out = run.output("evaluate", c.force)?;
    let (series, split) = run.data()?;
    let mut hours = None;
    for m in &models {
        let set = test_bundles(&series, &split, m)?;
        // single and ensemble are scored on the same hours
        let ts = set.timestamps();
        if hours.get_or_insert_with(|| ts.clone()) != &ts {
            return Err(CliError::Usage("models disagree on the test hours".into()));
        }
        let f = m.forecast(&set)?;
        let r = score(&f, &set.actuals())?;
        info!(
            "{}: MAPE {:.4}% MAE {:.3} RMSE {:.3} MAX {:.3} SD {:.3} (n = {})",
            m.name(),
            r.mape,
            r.mae,
            r.rmse,
            r.max_abs_bias,
            r.bias_sd,
            r.n
        );
        out.write(
            &format!("{}_residuals.csv", m.name()),
            residual_csv(&set, &f, &r)?,
        )?;
        out.write(&format!("{}_report.toml", m.name()), r.to_toml()?)?;
    }
    Ok(())
}

pub fn size_sweep(c: &Common) -> Result<(), CliError> {
    let run = Run::open(c, true)?;
    let out = run.output("size-sweep", c.force)?;
    let (_, _, stats, b) = run.bundles()?;
    let ec = EnsembleConfig {
        members: run.cfg.study.max_ensemble,
        ..run.cfg.ensemble.clone()
    };
    let (_, rows) = ensemble_size_sweep(&b, &stats, &run.cfg.train, &run.cfg.model, &ec)?;
    let mut wide = Vec::new();
    write_sweep_csv(&rows, &mut wide)?;
    out.write("sweep.csv", wide)?;
    let mut long = Vec::new();
    write_sweep_long_csv(&rows, &mut long)?;
    out.write("sweep_long.csv", long)?;
    Ok(())
}

pub fn robustness(c: &Common) -> Result<(), CliError> {
    let run = Run::open(c, true)?;
    let out = run.output("robustness", c.force)?;
    let (series, split) = run.data()?;
    let cells = robustness_grid(
        &series,
        &split,
        &run.cfg.train,
        &run.cfg.model,
        &run.cfg.study.robustness,
    )?;
    let mut bytes = Vec::new();
    write_grid_csv(&cells, &mut bytes)?;
    out.write("robustness.csv", bytes)?;
    Ok(())
}

pub fn grad_study(c: &Common) -> Result<(), CliError> {
    let run = Run::open(c, false)?;
    let out = run.output("grad-study", c.force)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["rule", "depth", "grad_norm", "parameter_count"])
        .map_err(core_csv)?;
    for rule in CombineRule::ALL {
        for row in gradient_growth_study(rule, &run.cfg.study.growth)? {
            w.write_record([
                rule.name().to_string(),
                row.depth.to_string(),
                row.grad_norm.to_string(),
                row.parameter_count.to_string(),
            ])
            .map_err(core_csv)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?;
    out.write("grad_study.csv", bytes)?;
    Ok(())
}
