//! Autocorrelation, integrated autocorrelation time, the telescoping
//! multilevel estimator, the cost model and the optimal sample allocation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcmc::ChainRecord;

/// Minimum series length accepted by [`iact`].
pub const MIN_IACT_LEN: usize = 100;

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance; zero for fewer than two values.
pub fn sample_variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
}

fn centred(series: &[f64]) -> Result<(Vec<f64>, f64)> {
    if series.is_empty() {
        return Err(Error::Empty("series"));
    }
    let m = mean(series);
    let d: Vec<f64> = series.iter().map(|v| v - m).collect();
    let var = d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64;
    if !(var > 0.0) {
        return Err(Error::ZeroVariance);
    }
    Ok((d, var))
}

fn lag(d: &[f64], var: f64, chi: usize) -> f64 {
    let n = d.len() - chi;
    d[..n].iter().zip(&d[chi..]).map(|(a, b)| a * b).sum::<f64>() / (n as f64 * var)
}

/// `ρ(χ) = 1/(N−χ) Σ_{i=1}^{N−χ} (Q_i − μ)(Q_{i+χ} − μ) / σ²` for
/// `χ = 0..=max_lag`, with `σ²` the `1/N` sample variance.
pub fn acf(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    if series.len() <= max_lag {
        return Err(Error::invalid(format!(
            "series of length {} is too short for lag {max_lag}",
            series.len()
        )));
    }
    let (d, var) = centred(series)?;
    Ok((0..=max_lag).map(|chi| lag(&d, var, chi)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Iact {
    pub tau: f64,
    /// Summation window `M`.
    pub window: usize,
}

/// `τ = 1 + 2 Σ_{χ=1}^{M} ρ(χ)` with the smallest `M ≥ 5 τ(M)`, capped at
/// `N/10`, and `τ ≥ 1`.
pub fn iact(series: &[f64]) -> Result<Iact> {
    if series.len() < MIN_IACT_LEN {
        return Err(Error::invalid(format!(
            "IACT needs at least {MIN_IACT_LEN} samples, got {}",
            series.len()
        )));
    }
    let (d, var) = centred(series)?;
    let cap = (series.len() / 10).max(1);
    let mut tau = 1.0;
    let mut window = cap;
    for m in 1..=cap {
        tau += 2.0 * lag(&d, var, m);
        if m as f64 >= 5.0 * tau {
            window = m;
            break;
        }
    }
    Ok(Iact {
        tau: tau.max(1.0),
        window,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelescopingEstimate {
    pub estimate: f64,
    /// `mean(Q₀)`, `mean(Y₁)`, ...
    pub terms: Vec<f64>,
    /// `√(τ var / N)` per term; τ = 1 where the series is too short or flat.
    pub std_errors: Vec<f64>,
}

/// `mean(Q₀) + Σ_{ℓ≥1} mean(Y_ℓ)`; `series[0]` is `Q₀`, `series[ℓ]` is `Y_ℓ`.
pub fn telescoping_estimate(series: &[Vec<f64>]) -> Result<TelescopingEstimate> {
    if series.is_empty() {
        return Err(Error::Empty("levels"));
    }
    let mut terms = Vec::with_capacity(series.len());
    let mut std_errors = Vec::with_capacity(series.len());
    for s in series {
        if s.is_empty() {
            return Err(Error::Empty("level series"));
        }
        terms.push(mean(s));
        let tau = iact(s).map(|r| r.tau).unwrap_or(1.0);
        std_errors.push((tau * sample_variance(s) / s.len() as f64).sqrt());
    }
    Ok(TelescopingEstimate {
        estimate: terms.iter().sum(),
        terms,
        std_errors,
    })
}

/// `⌈τ_ℓ⌉ (C_ℓ + ⌈τ_{ℓ−1}⌉ C_{ℓ−1})`, or `⌈τ₀⌉ C₀` on the coarsest level.
pub fn effective_cost(tau: f64, cost: f64, coarser: Option<(f64, f64)>) -> f64 {
    let own = tau.ceil();
    match coarser {
        Some((tau_c, cost_c)) => own * (cost + tau_c.ceil() * cost_c),
        None => own * cost,
    }
}

/// `N_ℓ = ⌈(2/ε²) (Σ_k √(V_k C_k)) √(V_ℓ / C_ℓ)⌉`, at least 1.
pub fn optimal_samples(epsilon: f64, variances: &[f64], costs: &[f64]) -> Result<Vec<u64>> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    if variances.len() != costs.len() {
        return Err(Error::DimensionMismatch {
            context: "costs",
            expected: variances.len(),
            actual: costs.len(),
        });
    }
    if variances.iter().any(|v| !(*v >= 0.0)) || costs.iter().any(|c| !(*c > 0.0)) {
        return Err(Error::invalid("variances must be non-negative and costs positive"));
    }
    if variances.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroVariance);
    }
    let total: f64 = variances.iter().zip(costs).map(|(v, c)| (v * c).sqrt()).sum();
    let scale = 2.0 / (epsilon * epsilon) * total;
    Ok(variances
        .iter()
        .zip(costs)
        .map(|(v, c)| {
            let n = scale * (v / c).sqrt();
            // guard against 4.000000000001 rounding up to 5
            let r = n.round();
            let n = if (n - r).abs() <= 1e-9 * r.max(1.0) { r } else { n.ceil() };
            (n as u64).max(1)
        })
        .collect())
}

fn median(x: &mut [f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.sort_by(f64::total_cmp);
    let n = x.len();
    if n % 2 == 1 {
        x[n / 2]
    } else {
        0.5 * (x[n / 2 - 1] + x[n / 2])
    }
}

/// Statistics of one chain on one level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub samples: usize,
    pub mean_q: f64,
    pub var_q: f64,
    pub mean_abs_y: f64,
    pub mean_y: f64,
    pub var_y: f64,
    pub acceptance: f64,
    /// IACT of `Y_ℓ` (of `Q₀` on the coarsest level).
    pub iact: f64,
    pub ess: f64,
    pub cost_per_sample: f64,
}

pub fn level_stats(record: &ChainRecord, level: usize) -> LevelStats {
    let (q, y) = record.series(level);
    let mut times: Vec<f64> = record
        .level_rows(level)
        .filter(|r| !r.burnin_flag)
        .map(|r| r.wall_time_s)
        .collect();
    let tau = iact(&y).map(|r| r.tau).unwrap_or(f64::NAN);
    let n = y.len();
    LevelStats {
        samples: n,
        mean_q: mean(&q),
        var_q: sample_variance(&q),
        mean_abs_y: y.iter().map(|v| v.abs()).sum::<f64>() / n as f64,
        mean_y: mean(&y),
        var_y: sample_variance(&y),
        acceptance: record.acceptance_rate(level),
        iact: tau,
        ess: n as f64 / tau,
        cost_per_sample: median(&mut times),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcrossChainStd {
    pub mean_q: Vec<f64>,
    pub var_y: Vec<f64>,
    pub acceptance: Vec<f64>,
    pub iact: Vec<f64>,
    pub ml_estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub levels: Vec<usize>,
    #[serde(rename = "mean_Q")]
    pub mean_q: Vec<f64>,
    #[serde(rename = "var_Q0")]
    pub var_q0: f64,
    #[serde(rename = "mean_absY")]
    pub mean_abs_y: Vec<f64>,
    #[serde(rename = "var_Y")]
    pub var_y: Vec<f64>,
    pub acceptance: Vec<f64>,
    pub iact: Vec<f64>,
    pub ess: Vec<f64>,
    pub cost_per_sample: Vec<f64>,
    pub effective_cost: Vec<f64>,
    pub ml_estimate: f64,
    pub epsilon: f64,
    #[serde(rename = "planned_N")]
    pub planned_n: Vec<u64>,
    pub predicted_total_cost: f64,
    pub chains: usize,
    pub seed: u64,
    pub config_hash: String,
    pub failures: Vec<usize>,
    pub across_chain_std: AcrossChainStd,
}

fn column_mean_std(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let cols = rows[0].len();
    (0..cols)
        .map(|j| {
            let v: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            // shifted by the first value so identical inputs average exactly
            let m = v[0] + v.iter().map(|x| x - v[0]).sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
            (m, var.sqrt())
        })
        .unzip()
}

/// Averages per-chain statistics over the chains and plans the sample
/// allocation for tolerance `epsilon`.
pub fn summarize(records: &[ChainRecord], epsilon: f64, seed: u64, config_hash: &str) -> Result<RunSummary> {
    if records.is_empty() {
        return Err(Error::Empty("chain records"));
    }
    let levels = records[0].num_levels();
    if records.iter().any(|r| r.num_levels() != levels) {
        return Err(Error::invalid("chains disagree on the number of levels"));
    }
    let stats: Vec<Vec<LevelStats>> =
        records.iter().map(|r| (0..levels).map(|l| level_stats(r, l)).collect()).collect();
    let pick = |f: fn(&LevelStats) -> f64| -> (Vec<f64>, Vec<f64>) {
        column_mean_std(&stats.iter().map(|s| s.iter().map(f).collect()).collect::<Vec<_>>())
    };
    let (mean_q, std_mean_q) = pick(|s| s.mean_q);
    let (mean_abs_y, _) = pick(|s| s.mean_abs_y);
    let (var_y, std_var_y) = pick(|s| s.var_y);
    let (acceptance, std_acc) = pick(|s| s.acceptance);
    let (iact_mean, std_iact) = pick(|s| s.iact);
    let (ess, _) = pick(|s| s.ess);
    let (cost, _) = pick(|s| s.cost_per_sample);
    let (var_q, _) = pick(|s| s.var_q);
    let ml: Vec<f64> = stats.iter().map(|s| s[0].mean_q + s[1..].iter().map(|x| x.mean_y).sum::<f64>()).collect();
    let (ml_mean, ml_std) = column_mean_std(&ml.iter().map(|&v| vec![v]).collect::<Vec<_>>());

    let effective: Vec<f64> = (0..levels)
        .map(|l| {
            let tau = if iact_mean[l].is_finite() { iact_mean[l] } else { 1.0 };
            let coarser = (l > 0).then(|| {
                let t = if iact_mean[l - 1].is_finite() { iact_mean[l - 1] } else { 1.0 };
                (t, cost[l - 1])
            });
            effective_cost(tau, cost[l], coarser)
        })
        .collect();
    let (planned_n, predicted_total_cost) = match optimal_samples(epsilon, &var_y, &effective) {
        Ok(n) => {
            let total = n.iter().zip(&effective).map(|(&n, c)| n as f64 * c).sum();
            (n, total)
        }
        Err(_) => (vec![0; levels], f64::NAN),
    };
    let failures = (0..levels).map(|l| records.iter().map(|r| r.failures[l]).sum()).collect();
    Ok(RunSummary {
        levels: (0..levels).collect(),
        mean_q,
        var_q0: var_q[0],
        mean_abs_y,
        var_y,
        acceptance,
        iact: iact_mean,
        ess,
        cost_per_sample: cost,
        effective_cost: effective,
        ml_estimate: ml_mean[0],
        epsilon,
        planned_n,
        predicted_total_cost,
        chains: records.len(),
        seed,
        config_hash: config_hash.to_string(),
        failures,
        across_chain_std: AcrossChainStd {
            mean_q: std_mean_q,
            var_y: std_var_y,
            acceptance: std_acc,
            iact: std_iact,
            ml_estimate: ml_std[0],
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcmc::ChainRow;
    use crate::rng::standard_normals;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ar1(a: f64, n: usize, seed: u64) -> Vec<f64> {
        let z = standard_normals(&mut ChaCha8Rng::seed_from_u64(seed), n);
        let mut x = Vec::with_capacity(n);
        let mut prev = z[0] / (1.0 - a * a).sqrt();
        for zi in z {
            prev = a * prev + zi;
            x.push(prev);
        }
        x
    }

    fn brute_acf(q: &[f64], max_lag: usize) -> Vec<f64> {
        let n = q.len();
        let mu = q.iter().sum::<f64>() / n as f64;
        let mut var = 0.0;
        for v in q {
            var += (v - mu) * (v - mu);
        }
        var /= n as f64;
        let mut out = Vec::new();
        for chi in 0..=max_lag {
            let mut s = 0.0;
            for i in 0..n - chi {
                s += (q[i] - mu) * (q[i + chi] - mu);
            }
            out.push(s / ((n - chi) as f64 * var));
        }
        out
    }

    #[test]
    fn acf_matches_double_loop() {
        let q = ar1(0.7, 1000, 1);
        let a = acf(&q, 50).unwrap();
        let b = brute_acf(&q, 50);
        assert_eq!(a[0], 1.0);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn acf_of_white_noise_is_small() {
        let n = 100_000;
        let q = standard_normals(&mut ChaCha8Rng::seed_from_u64(2), n);
        let r = acf(&q, 10).unwrap();
        for v in &r[1..] {
            assert!(v.abs() <= 3.0 / (n as f64).sqrt());
        }
    }

    #[test]
    fn acf_of_ar1_is_geometric() {
        let n = 100_000;
        let r = acf(&ar1(0.5, n, 3), 5).unwrap();
        for (chi, v) in r.iter().enumerate().skip(1) {
            // Bartlett standard error for AR(1)
            let se = ((1.0 + 0.25) / (1.0 - 0.25) / n as f64).sqrt();
            assert!((v - 0.5f64.powi(chi as i32)).abs() <= 3.0 * se, "lag {chi}: {v}");
        }
    }

    #[test]
    fn acf_errors() {
        assert!(matches!(acf(&[1.0; 10], 3), Err(Error::ZeroVariance)));
        assert!(acf(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn iact_cases() {
        let n = 100_000;
        let iid = iact(&standard_normals(&mut ChaCha8Rng::seed_from_u64(4), n)).unwrap();
        assert!((iid.tau - 1.0).abs() <= 0.1, "{iid:?}");
        let ar = iact(&ar1(0.5, n, 5)).unwrap();
        assert!((ar.tau - 3.0).abs() <= 0.45, "{ar:?}");
        let slow: Vec<f64> = (0..2000).map(|i| 1.0 + 1e-9 * (i as f64 / 700.0).sin()).collect();
        let s = iact(&slow).unwrap();
        assert!(s.tau > 10.0 && s.tau.is_finite());
        assert!(iact(&[0.0; 50]).is_err());
        assert!(matches!(iact(&[2.0; 200]), Err(Error::ZeroVariance)));
    }

    #[test]
    fn telescoping_cases() {
        let single = telescoping_estimate(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(single.estimate, 2.0);
        let q0 = vec![2.0; 10];
        let y1 = vec![0.25; 10];
        let y2 = vec![-0.05; 10];
        let e = telescoping_estimate(&[q0.clone(), y1, y2]).unwrap();
        assert!((e.estimate - 2.2).abs() < 1e-15);
        let z = telescoping_estimate(&[q0, vec![0.0; 10]]).unwrap();
        assert_eq!(z.estimate, 2.0);
        assert!(telescoping_estimate(&[vec![1.0], vec![]]).is_err());
        assert!(telescoping_estimate(&[]).is_err());
    }

    #[test]
    fn effective_cost_cases() {
        assert_eq!(effective_cost(1.0, 3.0, Some((1.0, 2.0))), 5.0);
        assert_eq!(effective_cost(1.2, 3.0, Some((1.0, 2.0))), 10.0);
        assert_eq!(effective_cost(2.5, 3.0, None), 9.0);
    }

    #[test]
    fn allocation_closed_forms() {
        let v = 0.37;
        let eps = 0.1;
        assert_eq!(optimal_samples(eps, &[v], &[2.5]).unwrap(), vec![(2.0 * v / (eps * eps)).ceil() as u64]);
        assert_eq!(optimal_samples(eps, &[0.5], &[7.0]).unwrap(), vec![100]);
        assert_eq!(optimal_samples(eps, &[0.5, 0.5], &[3.0, 3.0]).unwrap(), vec![200, 200]);
        let n = optimal_samples(eps, &[1.0, 0.5, 0.25], &[1.0, 1.0, 1.0]).unwrap();
        assert!(n[0] > n[1] && n[1] > n[2]);
        assert!(optimal_samples(eps, &[0.0, 0.0], &[1.0, 1.0]).is_err());
        assert!(optimal_samples(0.0, &[1.0], &[1.0]).is_err());
        assert_eq!(optimal_samples(eps, &[0.0, 1.0], &[1.0, 1.0]).unwrap()[0], 1);
    }

    #[test]
    fn allocation_is_cost_optimal() {
        let v = [0.8, 0.1, 0.02];
        let c = [1.0, 4.0, 16.0];
        let eps = 0.05;
        let n: Vec<f64> = optimal_samples(eps, &v, &c).unwrap().iter().map(|&x| x as f64).collect();
        let cost = |n: &[f64]| n.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        let var = |n: &[f64]| v.iter().zip(n).map(|(a, b)| a / b).sum::<f64>();
        assert!(var(&n) <= eps * eps / 2.0 * (1.0 + 1e-9));
        for l in 0..3 {
            for f in [0.9, 1.1] {
                let mut m = n.clone();
                m[l] *= f;
                // any perturbation either breaks the constraint or costs more
                assert!(var(&m) > eps * eps / 2.0 || cost(&m) > cost(&n));
            }
        }
    }

    fn record(levels: usize, q: &[Vec<f64>]) -> ChainRecord {
        let mut rows = Vec::new();
        for l in 0..levels {
            for (i, &v) in q[l].iter().enumerate() {
                rows.push(ChainRow {
                    iter: i as u64,
                    level: l,
                    q: v,
                    y: if l == 0 { v } else { v - q[l - 1][i] },
                    accepted: i % 2 == 0,
                    loglik: 0.0,
                    coarse_loglik: 0.0,
                    wall_time_s: 0.001 * (l + 1) as f64,
                    burnin_flag: false,
                });
            }
        }
        ChainRecord {
            chain: 0,
            rows,
            failures: vec![0; levels],
            mean_field: vec![],
            mean_pressure: vec![],
            error: None,
        }
    }

    #[test]
    fn summary_of_identical_chains() {
        let q0 = ar1(0.3, 400, 1);
        let q1: Vec<f64> = q0.iter().zip(ar1(0.3, 400, 2)).map(|(a, b)| a + 0.1 * b).collect();
        let rec = record(2, &[q0.clone(), q1]);
        let one = summarize(std::slice::from_ref(&rec), 0.1, 7, "abc").unwrap();
        let five = summarize(&vec![rec.clone(); 5], 0.1, 7, "abc").unwrap();
        assert_eq!(one.mean_q, five.mean_q);
        assert!(five.across_chain_std.mean_q.iter().all(|&s| s == 0.0));
        assert_eq!(five.chains, 5);
        let st = level_stats(&rec, 0);
        assert_eq!(one.mean_q[0], st.mean_q);
        assert!((one.ess[0] - 400.0 / one.iact[0]).abs() < 1e-9);
        assert!((one.cost_per_sample[1] - 0.002).abs() < 1e-15);
        assert!(one.planned_n.iter().all(|&n| n >= 1));
        let json = serde_json::to_value(&one).unwrap();
        for key in [
            "levels", "mean_Q", "var_Q0", "mean_absY", "var_Y", "acceptance", "iact", "ess",
            "cost_per_sample", "ml_estimate", "epsilon", "planned_N", "predicted_total_cost", "chains", "seed",
        ] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn degenerate_hierarchy_reduces_to_single_level_mean() {
        let q = ar1(0.5, 500, 9);
        let rec = record(3, &[q.clone(), q.clone(), q.clone()]);
        let s = summarize(&[rec], 0.1, 0, "").unwrap();
        assert!((s.ml_estimate - mean(&q)).abs() <= 1e-12);
    }

    proptest! {
        #[test]
        fn acf_is_bounded_and_starts_at_one(x in prop::collection::vec(-10.0..10.0f64, 20..200)) {
            prop_assume!(sample_variance(&x) > 1e-6);
            let r = acf(&x, 5).unwrap();
            prop_assert!((r[0] - 1.0).abs() < 1e-12);
            // 1/(N−χ) normalization allows a mild excess over 1
            let n = x.len() as f64;
            for (chi, v) in r.iter().enumerate() {
                prop_assert!(v.abs() <= n / (n - chi as f64) + 1e-12);
            }
        }

        #[test]
        fn planned_samples_meet_variance_target(
            v in prop::collection::vec(0.001..2.0f64, 1..5),
            c in prop::collection::vec(0.01..10.0f64, 5),
            eps in 0.01..0.5f64,
        ) {
            let c = &c[..v.len()];
            let n = optimal_samples(eps, &v, c).unwrap();
            let var: f64 = v.iter().zip(&n).map(|(a, &b)| a / b as f64).sum();
            prop_assert!(var <= eps * eps / 2.0 * (1.0 + 1e-9));
            prop_assert!(n.iter().all(|&k| k >= 1));
        }
    }
}
