//! Metropolis–Hastings with pCN proposals and the recursive multilevel
//! delayed-acceptance sampler over a stack of per-level noise vectors.

use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{standard_normals, Purpose, SeedTree, StreamId};

/// Forward evaluation of one level.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Evaluation {
    pub loglik: f64,
    pub qoi: f64,
    /// Nodal log-permeability; may be empty for models without a field.
    pub field: Vec<f64>,
    /// Element pressure; may be empty.
    pub pressure: Vec<f64>,
}

impl Evaluation {
    fn failed() -> Self {
        Self {
            loglik: f64::NEG_INFINITY,
            qoi: f64::NAN,
            field: Vec::new(),
            pressure: Vec::new(),
        }
    }
}

/// A posterior defined on a hierarchy of levels. Level `ℓ` is evaluated on
/// the noise stack `noise[0..=ℓ]`.
pub trait HierarchicalModel: Sync {
    fn num_levels(&self) -> usize;
    fn noise_dim(&self, level: usize) -> usize;
    fn evaluate(&self, noise: &[Vec<f64>]) -> Result<Evaluation>;
}

/// `ξᴾ = √(1−β²) ξ + β ξ̌`.
pub fn pcn_propose<R: Rng + ?Sized>(xi: &[f64], beta: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::invalid(format!("pCN step size must lie in (0, 1], got {beta}")));
    }
    let a = (1.0 - beta * beta).sqrt();
    let fresh = standard_normals(rng, xi.len());
    Ok(xi.iter().zip(fresh).map(|(x, z)| a * x + beta * z).collect())
}

/// Committed noise and cached evaluations for levels `0..=top`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub noise: Vec<Vec<f64>>,
    pub evals: Vec<Evaluation>,
}

impl ChainState {
    pub fn top(&self) -> usize {
        self.noise.len() - 1
    }

    fn prefix(&self, levels: usize) -> Self {
        Self {
            noise: self.noise[..levels].to_vec(),
            evals: self.evals[..levels].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRow {
    pub iter: u64,
    pub level: usize,
    #[serde(rename = "Q")]
    pub q: f64,
    #[serde(rename = "Y")]
    pub y: f64,
    pub accepted: bool,
    pub loglik: f64,
    pub coarse_loglik: f64,
    pub wall_time_s: f64,
    pub burnin_flag: bool,
}

#[derive(Debug, Clone)]
pub struct ChainConfig {
    /// pCN step per level.
    pub beta: Vec<f64>,
    /// Coarse steps per proposal, indexed by the coarse level.
    pub subchain: Vec<usize>,
    pub n_samples: usize,
    pub burnin_fraction: f64,
    pub seed: u64,
    /// Accumulate posterior-mean fields and pressures per level.
    pub keep_fields: bool,
}

impl ChainConfig {
    pub fn uniform(levels: usize, beta: f64, n_samples: usize, seed: u64) -> Self {
        Self {
            beta: vec![beta; levels],
            subchain: vec![1; levels.saturating_sub(1).max(1)],
            n_samples,
            burnin_fraction: 0.1,
            seed,
            keep_fields: false,
        }
    }

    fn check(&self, levels: usize) -> Result<()> {
        if self.beta.len() < levels {
            return Err(Error::invalid(format!("need {levels} pCN step sizes, got {}", self.beta.len())));
        }
        if levels > 1 && self.subchain.len() < levels - 1 {
            return Err(Error::invalid(format!("need {} subchain lengths, got {}", levels - 1, self.subchain.len())));
        }
        if self.subchain.iter().take(levels.saturating_sub(1)).any(|&s| s == 0) {
            return Err(Error::invalid("subchain lengths must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.burnin_fraction) {
            return Err(Error::invalid(format!("burn-in fraction must lie in [0, 1), got {}", self.burnin_fraction)));
        }
        for &b in &self.beta[..levels] {
            if !(b > 0.0 && b <= 1.0) {
                return Err(Error::invalid(format!("pCN step size must lie in (0, 1], got {b}")));
            }
        }
        Ok(())
    }

    /// Steps executed on each level for `n_samples` top-level samples.
    pub fn steps_per_level(&self, levels: usize) -> Vec<usize> {
        let mut steps = vec![0; levels];
        let mut count = self.n_samples;
        for l in (0..levels).rev() {
            steps[l] = count;
            if l > 0 {
                count *= self.subchain[l - 1];
            }
        }
        steps
    }
}

/// Everything one chain produced.
#[derive(Debug, Clone)]
pub struct ChainRecord {
    pub chain: usize,
    pub rows: Vec<ChainRow>,
    /// Forward-solve failures per level (counted as rejections).
    pub failures: Vec<usize>,
    /// Post-burn-in mean of the committed field per level (if requested).
    pub mean_field: Vec<Vec<f64>>,
    pub mean_pressure: Vec<Vec<f64>>,
    /// Set when the chain aborted; `rows` then holds the partial record.
    pub error: Option<String>,
}

impl ChainRecord {
    pub fn num_levels(&self) -> usize {
        self.failures.len()
    }

    pub fn level_rows(&self, level: usize) -> impl Iterator<Item = &ChainRow> {
        self.rows.iter().filter(move |r| r.level == level)
    }

    /// Post-burn-in `(Q, Y)` series of one level.
    pub fn series(&self, level: usize) -> (Vec<f64>, Vec<f64>) {
        self.level_rows(level).filter(|r| !r.burnin_flag).map(|r| (r.q, r.y)).unzip()
    }

    pub fn acceptance_rate(&self, level: usize) -> f64 {
        let (n, a) = self
            .level_rows(level)
            .filter(|r| !r.burnin_flag)
            .fold((0usize, 0usize), |(n, a), r| (n + 1, a + r.accepted as usize));
        if n == 0 {
            f64::NAN
        } else {
            a as f64 / n as f64
        }
    }

    pub fn write_level_csv<W: Write>(&self, level: usize, header: &[String], mut w: W) -> std::io::Result<()> {
        for line in header {
            writeln!(w, "# {line}")?;
        }
        writeln!(w, "iter,level,Q,Y,accepted,loglik,coarse_loglik,wall_time_s,burnin_flag")?;
        for r in self.level_rows(level) {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.iter,
                r.level,
                r.q,
                r.y,
                r.accepted as u8,
                r.loglik,
                r.coarse_loglik,
                r.wall_time_s,
                r.burnin_flag as u8
            )?;
        }
        Ok(())
    }
}

fn parse_f64(s: &str, path: &Path) -> Result<f64> {
    match s {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        "NaN" => Ok(f64::NAN),
        _ => s.parse().map_err(|e| Error::Parse {
            what: path.display().to_string(),
            msg: format!("{s:?}: {e}"),
        }),
    }
}

fn parse_flag(s: &str, path: &Path) -> Result<bool> {
    match s {
        "0" | "false" => Ok(false),
        "1" | "true" => Ok(true),
        _ => Err(Error::Parse {
            what: path.display().to_string(),
            msg: format!("bad flag {s:?}"),
        }),
    }
}

/// Reads a per-level chain CSV written by [`ChainRecord::write_level_csv`].
pub fn read_level_csv(path: &Path) -> Result<Vec<ChainRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let mut header_seen = false;
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !header_seen {
            header_seen = true;
            if line.starts_with("iter,") {
                continue;
            }
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Parse {
                what: path.display().to_string(),
                msg: format!("expected 9 fields, got {}", f.len()),
            });
        }
        let bad = |e: std::num::ParseIntError| Error::Parse {
            what: path.display().to_string(),
            msg: e.to_string(),
        };
        rows.push(ChainRow {
            iter: f[0].parse().map_err(bad)?,
            level: f[1].parse().map_err(bad)?,
            q: parse_f64(f[2], path)?,
            y: parse_f64(f[3], path)?,
            accepted: parse_flag(f[4], path)?,
            loglik: parse_f64(f[5], path)?,
            coarse_loglik: parse_f64(f[6], path)?,
            wall_time_s: parse_f64(f[7], path)?,
            burnin_flag: parse_flag(f[8], path)?,
        });
    }
    Ok(rows)
}

struct Sampler<'a, M: HierarchicalModel + ?Sized> {
    model: &'a M,
    config: &'a ChainConfig,
    seeds: SeedTree,
    chain: usize,
    counters: Vec<u64>,
    burnin: Vec<u64>,
    rows: Vec<ChainRow>,
    failures: Vec<usize>,
    field_sums: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

impl<M: HierarchicalModel + ?Sized> Sampler<'_, M> {
    fn stream(&self, level: usize, purpose: Purpose) -> StreamId {
        StreamId::new(self.chain, level, self.counters[level], purpose)
    }

    fn evaluate(&mut self, noise: &[Vec<f64>]) -> Result<(Evaluation, f64)> {
        let level = noise.len() - 1;
        let start = Instant::now();
        let eval = match self.model.evaluate(noise) {
            Ok(e) if e.loglik.is_nan() => {
                self.failures[level] += 1;
                Evaluation::failed()
            }
            Ok(e) => e,
            Err(e) if e.is_numerical() => {
                self.failures[level] += 1;
                Evaluation::failed()
            }
            Err(e) => return Err(e),
        };
        Ok((eval, start.elapsed().as_secs_f64()))
    }

    fn initial_state(&mut self) -> Result<ChainState> {
        let levels = self.model.num_levels();
        const MAX_TRIES: u64 = 100;
        for attempt in 0..MAX_TRIES {
            let noise: Vec<Vec<f64>> = (0..levels)
                .map(|l| {
                    let id = StreamId::new(self.chain, l, attempt, Purpose::Init);
                    self.seeds.normals(id, self.model.noise_dim(l))
                })
                .collect();
            let mut evals = Vec::with_capacity(levels);
            for l in 0..levels {
                evals.push(self.evaluate(&noise[..=l])?.0);
            }
            if evals.iter().all(|e| e.loglik.is_finite()) {
                return Ok(ChainState { noise, evals });
            }
        }
        Err(Error::SolveFailed {
            method: "initial state",
            iterations: MAX_TRIES as usize,
            residual: f64::NAN,
        })
    }

    fn accept(&self, level: usize, log_alpha: f64) -> bool {
        if log_alpha.is_nan() {
            return false;
        }
        if log_alpha >= 0.0 {
            return true;
        }
        let u: f64 = self.seeds.rng(self.stream(level, Purpose::Accept)).random();
        u.ln() < log_alpha
    }

    fn record(&mut self, level: usize, state: &ChainState, y: f64, accepted: bool, coarse_ll: f64, wall: f64) {
        let iter = self.counters[level];
        let burnin = iter < self.burnin[level];
        self.rows.push(ChainRow {
            iter,
            level,
            q: state.evals[level].qoi,
            y,
            accepted,
            loglik: state.evals[level].loglik,
            coarse_loglik: coarse_ll,
            wall_time_s: wall,
            burnin_flag: burnin,
        });
        if self.config.keep_fields && !burnin {
            let (count, field, pressure) = &mut self.field_sums[level];
            let e = &state.evals[level];
            if field.is_empty() {
                field.resize(e.field.len(), 0.0);
                pressure.resize(e.pressure.len(), 0.0);
            }
            if field.len() == e.field.len() && pressure.len() == e.pressure.len() {
                *count += 1;
                field.iter_mut().zip(&e.field).for_each(|(s, v)| *s += v);
                pressure.iter_mut().zip(&e.pressure).for_each(|(s, v)| *s += v);
            }
        }
        self.counters[level] += 1;
    }

    /// One Metropolis–Hastings step on the coarsest level.
    fn step0(&mut self, state: &mut ChainState) -> Result<()> {
        let mut rng = self.seeds.rng(self.stream(0, Purpose::Proposal));
        let proposal = pcn_propose(&state.noise[0], self.config.beta[0], &mut rng)?;
        let noise = [proposal];
        let (eval, wall) = self.evaluate(&noise)?;
        let accepted = self.accept(0, eval.loglik - state.evals[0].loglik);
        if accepted {
            let [xi] = noise;
            state.noise[0] = xi;
            state.evals[0] = eval;
        }
        let q = state.evals[0].qoi;
        self.record(0, state, q, accepted, f64::NAN, wall);
        Ok(())
    }

    /// One delayed-acceptance step on `level ≥ 1`. `state` covers levels
    /// `0..=level`.
    fn step(&mut self, level: usize, state: &mut ChainState) -> Result<()> {
        if level == 0 {
            return self.step0(state);
        }
        let mut coarse = state.prefix(level);
        for _ in 0..self.config.subchain[level - 1] {
            self.step(level - 1, &mut coarse)?;
        }
        let mut rng = self.seeds.rng(self.stream(level, Purpose::Proposal));
        let fine = pcn_propose(&state.noise[level], self.config.beta[level], &mut rng)?;
        let mut noise = coarse.noise.clone();
        noise.push(fine);
        let (eval, wall) = self.evaluate(&noise)?;
        let coarse_ll = coarse.evals[level - 1].loglik;
        let coarse_q = coarse.evals[level - 1].qoi;
        let log_alpha = eval.loglik + state.evals[level - 1].loglik - state.evals[level].loglik - coarse_ll;
        let accepted = eval.loglik.is_finite() && self.accept(level, log_alpha);
        if accepted {
            coarse.noise.push(noise.pop().expect("fine noise"));
            coarse.evals.push(eval);
            *state = coarse;
        }
        let y = state.evals[level].qoi - coarse_q;
        self.record(level, state, y, accepted, coarse_ll, wall);
        Ok(())
    }
}

/// Runs one chain for `config.n_samples` top-level steps. Deterministic in
/// `(config.seed, chain)`. Numerical failures of single proposals count as
/// rejections; any other error ends the chain and is stored in the record.
pub fn run_chain<M: HierarchicalModel + ?Sized>(model: &M, config: &ChainConfig, chain: usize) -> Result<ChainRecord> {
    let levels = model.num_levels();
    if levels == 0 {
        return Err(Error::Empty("model levels"));
    }
    config.check(levels)?;
    let steps = config.steps_per_level(levels);
    let mut s = Sampler {
        model,
        config,
        seeds: SeedTree::new(config.seed),
        chain,
        counters: vec![0; levels],
        burnin: steps.iter().map(|&n| (config.burnin_fraction * n as f64).floor() as u64).collect(),
        rows: Vec::with_capacity(steps.iter().sum()),
        failures: vec![0; levels],
        field_sums: vec![(0, Vec::new(), Vec::new()); levels],
    };
    let mut error = None;
    if config.n_samples > 0 {
        match s.initial_state() {
            Ok(mut state) => {
                for _ in 0..config.n_samples {
                    if let Err(e) = s.step(levels - 1, &mut state) {
                        error = Some(e.to_string());
                        break;
                    }
                }
            }
            Err(e) => error = Some(e.to_string()),
        }
    }
    let (mean_field, mean_pressure) = s
        .field_sums
        .into_iter()
        .map(|(n, f, p)| {
            let scale = if n > 0 { 1.0 / n as f64 } else { 0.0 };
            (f.iter().map(|v| v * scale).collect(), p.iter().map(|v| v * scale).collect())
        })
        .unzip();
    Ok(ChainRecord {
        chain,
        rows: s.rows,
        failures: s.failures,
        mean_field,
        mean_pressure,
        error,
    })
}

/// Runs chains `0..n_chains` in parallel.
pub fn run_chains<M: HierarchicalModel + ?Sized>(
    model: &M,
    config: &ChainConfig,
    n_chains: usize,
) -> Vec<Result<ChainRecord>> {
    (0..n_chains).into_par_iter().map(|c| run_chain(model, config, c)).collect()
}
