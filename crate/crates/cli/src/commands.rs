//! Implementations of the `mlgrf` subcommands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde_json::{json, Value};

use mlgrf_core::darcy::{write_pressure_csv, ObservationSet};
use mlgrf_core::estimators::{acf, summarize, RunSummary};
use mlgrf_core::grf::write_field_csv;
use mlgrf_core::mcmc::{read_level_csv, run_chains, ChainConfig, ChainRecord};
use mlgrf_core::posterior::{generate_observations, DarcyPosterior};
use mlgrf_core::rng::{Purpose, SeedTree, StreamId};
use mlgrf_core::validation::{run_identity_suite, ValidationReport};
use mlgrf_core::Error;

use crate::config::RunConfig;

/// A failure of the numerics rather than of the invocation.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct NumericalFailure(pub String);

/// 2 for numerical failures, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<NumericalFailure>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            if e.is_numerical() {
                return 2;
            }
        }
    }
    1
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json(path: &Path, value: &Value) -> anyhow::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

fn with_provenance(mut value: Value, cfg: &RunConfig) -> Value {
    if let Value::Object(map) = &mut value {
        map.insert("seed".into(), json!(cfg.seed));
        map.insert("config_hash".into(), json!(cfg.hash()));
    }
    value
}

/// Synthetic observations plus the reference field and pressure.
pub fn generate_observations_cmd(cfg: &RunConfig, out: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    cfg.validate()?;
    let data = generate_observations(&cfg.prior(), cfg.sigma_eta2.sqrt(), cfg.seed)?;
    let path = out.unwrap_or_else(|| cfg.observations_path());
    write_json(&path, &with_provenance(serde_json::to_value(&data.observations)?, cfg))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut header = cfg.provenance();
    header.push(format!("reference_qoi={}", data.reference_qoi));
    write_field_csv(&data.reference_mesh, &data.reference_field, &header, create(&dir.join("reference_field.csv"))?)?;
    let mut w = create(&dir.join("reference_pressure.csv"))?;
    for line in &header {
        writeln!(w, "# {line}")?;
    }
    write_pressure_csv(&data.reference_mesh, &data.reference_pressure, w)?;
    Ok(path)
}

/// Writes `count` prior field realizations on `level` (default: finest)
/// into `<output_dir>/grf/`. Levels above the coarsest also get the coarse
/// lift and complement components.
pub fn sample_grf_cmd(cfg: &RunConfig, level: Option<usize>, count: usize) -> anyhow::Result<Vec<PathBuf>> {
    cfg.validate()?;
    let level = level.unwrap_or(cfg.levels);
    if level > cfg.levels {
        bail!("level {level} exceeds the finest level {}", cfg.levels);
    }
    let sampler = cfg.prior().build_sampler()?;
    let seeds = SeedTree::new(cfg.seed);
    let mesh = &sampler.hierarchy.levels[level];
    let dir = cfg.output_dir.join("grf");
    let tag = cfg.coarsest_sampler.as_str();
    let mut written = Vec::new();
    for i in 0..count {
        let noise: Vec<Vec<f64>> = (0..=level)
            .map(|l| seeds.normals(StreamId::new(i, l, 0, Purpose::Sample), sampler.noise_dim(l)))
            .collect();
        let parts = sampler.field_components(&noise)?;
        let mut header = cfg.provenance();
        header.push(format!("sampler={tag} sample={i}"));
        let mut emit = |suffix: &str, theta: &[f64]| -> anyhow::Result<()> {
            let path = dir.join(format!("{tag}_level{level}_sample{i}{suffix}.csv"));
            write_field_csv(mesh, theta, &header, create(&path)?)?;
            written.push(path);
            Ok(())
        };
        emit("", &parts.total.theta)?;
        if level > 0 {
            emit("_coarse", &parts.coarse_lift.theta)?;
            emit("_complement", &parts.complement.theta)?;
        }
    }
    Ok(written)
}

pub fn chain_file(dir: &Path, chain: usize, level: usize) -> PathBuf {
    dir.join(format!("chain_{chain}_level_{level}.csv"))
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    /// A summary with the same configuration hash already exists.
    UpToDate,
    /// `n_samples = 0`: configuration echoed, nothing sampled.
    DryRun,
    Completed { failed_chains: usize },
}

fn average_fields(records: &[&ChainRecord], pick: fn(&ChainRecord) -> &Vec<Vec<f64>>, level: usize) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    let mut n = 0;
    for r in records {
        let f = &pick(r)[level];
        if f.is_empty() {
            continue;
        }
        if acc.is_empty() {
            acc = vec![0.0; f.len()];
        }
        acc.iter_mut().zip(f).for_each(|(a, v)| *a += v);
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n.max(1) as f64);
    acc
}

pub fn run_cmd(cfg: &RunConfig) -> anyhow::Result<RunOutcome> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    let summary_path = dir.join("summary.json");
    if let Ok(text) = std::fs::read_to_string(&summary_path) {
        let old: Value = serde_json::from_str(&text).unwrap_or(Value::Null);
        if old.get("config_hash").and_then(Value::as_str) == Some(cfg.hash().as_str()) {
            return Ok(RunOutcome::UpToDate);
        }
    }
    let mut echo = create(&dir.join("config.txt"))?;
    for line in cfg.provenance() {
        writeln!(echo, "# {line}")?;
    }
    write!(echo, "{}", cfg.to_text())?;
    echo.flush()?;
    if cfg.n_samples == 0 {
        return Ok(RunOutcome::DryRun);
    }

    let obs_path = cfg.observations_path();
    let observations = ObservationSet::read(&obs_path)
        .with_context(|| format!("loading observations from {}", obs_path.display()))?;
    let mut model = DarcyPosterior::new(cfg.prior().build_sampler()?, observations)?;
    model.keep_fields = true;
    let chain_cfg = ChainConfig {
        beta: cfg.beta_per_level(),
        subchain: cfg.subchain_per_level(),
        n_samples: cfg.n_samples,
        burnin_fraction: cfg.burnin_fraction,
        seed: cfg.seed,
        keep_fields: true,
    };
    let results = run_chains(&model, &chain_cfg, cfg.n_chains);

    let header = cfg.provenance();
    let mut good = Vec::new();
    let mut failed = Vec::new();
    for (c, res) in results.iter().enumerate() {
        match res {
            Ok(rec) => {
                for l in 0..cfg.num_levels() {
                    rec.write_level_csv(l, &header, create(&chain_file(dir, c, l))?)?;
                }
                match &rec.error {
                    None => good.push(rec),
                    Some(e) => failed.push(json!({"chain": c, "error": e})),
                }
            }
            Err(e) => failed.push(json!({"chain": c, "error": e.to_string()})),
        }
    }
    for f in &failed {
        eprintln!("chain {} failed: {}", f["chain"], f["error"]);
    }
    if good.is_empty() {
        return Err(NumericalFailure("every chain failed".into()).into());
    }
    let owned: Vec<ChainRecord> = good.iter().map(|r| (*r).clone()).collect();
    let summary = summarize(&owned, cfg.epsilon, cfg.seed, &cfg.hash())?;
    for l in 0..cfg.num_levels() {
        let mesh = &model.sampler.hierarchy.levels[l];
        let field = average_fields(&good, |r| &r.mean_field, l);
        write_field_csv(mesh, &field, &header, create(&dir.join(format!("posterior_mean_field_level{l}.csv")))?)?;
        let pressure = average_fields(&good, |r| &r.mean_pressure, l);
        let mut w = create(&dir.join(format!("posterior_mean_pressure_level{l}.csv")))?;
        for line in &header {
            writeln!(w, "# {line}")?;
        }
        write_pressure_csv(mesh, &pressure, w)?;
    }
    let mut value = serde_json::to_value(&summary)?;
    value["failed_chains"] = json!(failed);
    write_json(&summary_path, &value)?;
    Ok(RunOutcome::Completed {
        failed_chains: failed.len(),
    })
}

/// Reads every chain CSV of a run directory.
pub fn load_run(run_dir: &Path) -> anyhow::Result<(RunConfig, Vec<ChainRecord>)> {
    let config_path = run_dir.join("config.txt");
    if !config_path.exists() {
        return Err(Error::MissingFiles {
            dir: run_dir.to_path_buf(),
            missing: vec!["config.txt".into()],
        }
        .into());
    }
    let cfg = RunConfig::load(&config_path)?;
    let mut missing = Vec::new();
    for c in 0..cfg.n_chains {
        for l in 0..cfg.num_levels() {
            let p = chain_file(run_dir, c, l);
            if !p.exists() {
                missing.push(p.file_name().unwrap_or_default().to_string_lossy().into_owned());
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingFiles {
            dir: run_dir.to_path_buf(),
            missing,
        }
        .into());
    }
    let mut records = Vec::with_capacity(cfg.n_chains);
    for c in 0..cfg.n_chains {
        let mut rows = Vec::new();
        for l in 0..cfg.num_levels() {
            rows.extend(read_level_csv(&chain_file(run_dir, c, l))?);
        }
        records.push(ChainRecord {
            chain: c,
            rows,
            failures: vec![0; cfg.num_levels()],
            mean_field: Vec::new(),
            mean_pressure: Vec::new(),
            error: None,
        });
    }
    Ok((cfg, records))
}

fn write_acf(path: &Path, header: &[String], series: &[Vec<f64>]) -> anyhow::Result<()> {
    let mut w = create(path)?;
    for line in header {
        writeln!(w, "# {line}")?;
    }
    writeln!(w, "lag,acf")?;
    let min_len = series.iter().map(Vec::len).min().unwrap_or(0);
    if min_len < 2 {
        return Ok(());
    }
    let max_lag = (min_len / 4).clamp(1, 200);
    let curves: Vec<Vec<f64>> = series.iter().filter_map(|s| acf(s, max_lag).ok()).collect();
    if curves.is_empty() {
        return Ok(());
    }
    for lag in 0..=max_lag {
        let v = curves.iter().map(|c| c[lag]).sum::<f64>() / curves.len() as f64;
        writeln!(w, "{lag},{v}")?;
    }
    Ok(())
}

/// ACF tables, acceptance and decay tables and the planned allocation, in
/// `<run_dir>/diagnostics/`.
pub fn diagnostics_cmd(run_dir: &Path) -> anyhow::Result<RunSummary> {
    let (cfg, records) = load_run(run_dir)?;
    let out = run_dir.join("diagnostics");
    let header = cfg.provenance();
    for l in 0..cfg.num_levels() {
        let (q, y): (Vec<_>, Vec<_>) = records.iter().map(|r| r.series(l)).unzip();
        write_acf(&out.join(format!("acf_level{l}_Q.csv")), &header, &q)?;
        write_acf(&out.join(format!("acf_level{l}_Y.csv")), &header, &y)?;
    }
    let summary = summarize(&records, cfg.epsilon, cfg.seed, &cfg.hash())?;
    let table = |name: &str, cols: &str, row: &dyn Fn(usize) -> String| -> anyhow::Result<()> {
        let mut w = create(&out.join(name))?;
        for line in &header {
            writeln!(w, "# {line}")?;
        }
        writeln!(w, "{cols}")?;
        for l in 0..cfg.num_levels() {
            writeln!(w, "{l},{}", row(l))?;
        }
        Ok(())
    };
    table("acceptance.csv", "level,acceptance", &|l| format!("{}", summary.acceptance[l]))?;
    table("decay.csv", "level,mean_absY,var_Y", &|l| format!("{},{}", summary.mean_abs_y[l], summary.var_y[l]))?;
    table("planned.csv", "level,iact,ess,cost_per_sample,effective_cost,planned_N", &|l| {
        format!(
            "{},{},{},{},{}",
            summary.iact[l], summary.ess[l], summary.cost_per_sample[l], summary.effective_cost[l], summary.planned_n[l]
        )
    })?;
    write_json(&out.join("diagnostics.json"), &serde_json::to_value(&summary)?)?;
    Ok(summary)
}

pub fn validate_cmd(lumped_mass: bool, out: Option<&Path>) -> anyhow::Result<ValidationReport> {
    let report = run_identity_suite(lumped_mass)?;
    if let Some(path) = out {
        write_json(path, &serde_json::to_value(&report)?)?;
    }
    Ok(report)
}
