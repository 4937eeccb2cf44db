//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use sha2::{Digest, Sha256};

use mlgrf_core::posterior::{CoarsestSampler, PriorSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Spde,
    Kl,
}

impl SamplerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::Spde => "spde",
            SamplerKind::Kl => "kl",
        }
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "spde" => Ok(SamplerKind::Spde),
            "kl" => Ok(SamplerKind::Kl),
            other => bail!("unknown coarsest sampler {other:?} (expected spde or kl)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub h0: f64,
    /// Index of the finest level.
    pub levels: usize,
    pub nu: f64,
    pub correlation_length: f64,
    pub sigma2: f64,
    pub sigma_eta2: f64,
    pub coarsest_sampler: SamplerKind,
    pub kl_modes: usize,
    /// Per level; a single value applies to every level.
    pub beta: Vec<f64>,
    /// Per coarse level; a single value applies to every level.
    pub subchain: Vec<usize>,
    pub n_chains: usize,
    pub n_samples: usize,
    pub burnin_fraction: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/observations.json`.
    pub observations: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            h0: 0.1,
            levels: 2,
            nu: 1.0,
            correlation_length: 0.3,
            sigma2: 0.1,
            sigma_eta2: 0.01,
            coarsest_sampler: SamplerKind::Kl,
            kl_modes: 50,
            beta: vec![0.2],
            subchain: vec![1],
            n_chains: 5,
            n_samples: 10_000,
            burnin_fraction: 0.1,
            epsilon: 0.1,
            seed: 0,
            output_dir: PathBuf::from("run"),
            observations: None,
        }
    }
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let out = value
        .split(',')
        .map(|s| s.trim().parse::<T>().map_err(|e| anyhow::anyhow!("{key}: {e}")))
        .collect::<anyhow::Result<Vec<T>>>()?;
    if out.is_empty() {
        bail!("{key}: empty list");
    }
    Ok(out)
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn num_levels(&self) -> usize {
        self.levels + 1
    }

    pub fn observations_path(&self) -> PathBuf {
        self.observations.clone().unwrap_or_else(|| self.output_dir.join("observations.json"))
    }

    /// Sets one key. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> anyhow::Result<()> {
        let v = value.trim();
        let num = |what: &str| -> anyhow::Result<f64> { v.parse().with_context(|| format!("{what}: cannot parse {v:?}")) };
        let int = |what: &str| -> anyhow::Result<usize> { v.parse().with_context(|| format!("{what}: cannot parse {v:?}")) };
        match key.trim() {
            "h0" => self.h0 = num("h0")?,
            "L" | "levels" => self.levels = int("L")?,
            "nu" => self.nu = num("nu")?,
            "correlation_length" => self.correlation_length = num("correlation_length")?,
            "sigma2" => self.sigma2 = num("sigma2")?,
            "sigma_eta2" => self.sigma_eta2 = num("sigma_eta2")?,
            "coarsest_sampler" => self.coarsest_sampler = v.parse()?,
            "kl_modes" | "m" => self.kl_modes = int("kl_modes")?,
            "beta" => self.beta = list("beta", v)?,
            "subchain" => self.subchain = list("subchain", v)?,
            "n_chains" | "chains" => self.n_chains = int("n_chains")?,
            "n_samples" | "samples" => self.n_samples = int("n_samples")?,
            "burnin_fraction" | "burnin" => self.burnin_fraction = num("burnin_fraction")?,
            "epsilon" => self.epsilon = num("epsilon")?,
            "seed" => self.seed = v.parse().with_context(|| format!("seed: cannot parse {v:?}"))?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "observations" => self.observations = Some(PathBuf::from(v)),
            other => bail!("unknown configuration key {other:?}"),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> anyhow::Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("line {}: expected `key = value`, got {raw:?}", no + 1);
            };
            self.set(k, v).with_context(|| format!("line {}", no + 1))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Every setting that influences results, in a fixed order.
    fn canonical(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "h0 = {}", self.h0);
        let _ = writeln!(s, "L = {}", self.levels);
        let _ = writeln!(s, "nu = {}", self.nu);
        let _ = writeln!(s, "correlation_length = {}", self.correlation_length);
        let _ = writeln!(s, "sigma2 = {}", self.sigma2);
        let _ = writeln!(s, "sigma_eta2 = {}", self.sigma_eta2);
        let _ = writeln!(s, "coarsest_sampler = {}", self.coarsest_sampler.as_str());
        let _ = writeln!(s, "kl_modes = {}", self.kl_modes);
        let _ = writeln!(s, "beta = {}", join(&self.beta));
        let _ = writeln!(s, "subchain = {}", join(&self.subchain));
        let _ = writeln!(s, "n_chains = {}", self.n_chains);
        let _ = writeln!(s, "n_samples = {}", self.n_samples);
        let _ = writeln!(s, "burnin_fraction = {}", self.burnin_fraction);
        let _ = writeln!(s, "epsilon = {}", self.epsilon);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    /// Full echo, parseable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut s = self.canonical();
        let _ = writeln!(s, "output_dir = {}", self.output_dir.display());
        if let Some(o) = &self.observations {
            let _ = writeln!(s, "observations = {}", o.display());
        }
        s
    }

    /// SHA-256 of the result-relevant settings, hex encoded.
    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn provenance(&self) -> Vec<String> {
        vec![format!("seed={} config_hash={}", self.seed, self.hash())]
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.nu != 1.0 {
            bail!("nu = {} is not supported; only nu = 1 gives an integer-order operator in 2D", self.nu);
        }
        if !(self.h0 > 0.0 && self.h0 <= 1.0) {
            bail!("h0 must lie in (0, 1], got {}", self.h0);
        }
        if !(self.sigma_eta2 >= 0.0) {
            bail!("sigma_eta2 must be non-negative, got {}", self.sigma_eta2);
        }
        if self.coarsest_sampler == SamplerKind::Kl && self.kl_modes == 0 {
            bail!("kl_modes must be at least 1");
        }
        if self.beta.len() != 1 && self.beta.len() != self.num_levels() {
            bail!("beta needs 1 or {} values, got {}", self.num_levels(), self.beta.len());
        }
        if self.subchain.len() != 1 && self.subchain.len() != self.levels.max(1) {
            bail!("subchain needs 1 or {} values, got {}", self.levels.max(1), self.subchain.len());
        }
        if !(self.epsilon > 0.0) {
            bail!("epsilon must be positive, got {}", self.epsilon);
        }
        Ok(())
    }

    pub fn prior(&self) -> PriorSpec {
        PriorSpec {
            h0: self.h0,
            finest: self.levels,
            correlation_length: self.correlation_length,
            sigma2: self.sigma2,
            coarsest: match self.coarsest_sampler {
                SamplerKind::Spde => CoarsestSampler::Spde,
                SamplerKind::Kl => CoarsestSampler::Kl { modes: self.kl_modes },
            },
        }
    }

    pub fn beta_per_level(&self) -> Vec<f64> {
        expand(&self.beta, self.num_levels())
    }

    pub fn subchain_per_level(&self) -> Vec<usize> {
        expand(&self.subchain, self.levels.max(1))
    }
}

fn expand<T: Copy>(v: &[T], n: usize) -> Vec<T> {
    if v.len() == 1 {
        vec![v[0]; n]
    } else {
        v.to_vec()
    }
}
