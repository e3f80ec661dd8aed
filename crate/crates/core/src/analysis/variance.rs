//! Variance of the bridge regression target against the rectified-flow target
//! on correlated latent pairs drawn from a stationary AR(1) process.
//!
//! Per coordinate, `u = z^tau - z^{tau-1} + c'_t xi` and `u~ = z^{tau-1} - eta`.
//! With marginal variance `v` and lag-one correlation `rho`,
//! `Var(u) = 2 v (1 - rho) + c'^2` and `Var(u~) = v + 1`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mean_se, var_diff_se, var_se, CheckStatus};
use crate::error::{Error, Result};
use crate::path::{PathSchedule, PathSpec};
use crate::rng;

/// Separation, in standard errors, needed to call a direction.
pub const SEPARATION_SE: f64 = 5.0;

/// Diagonal stationary AR(1): `z^tau = rho z^{tau-1} + sqrt(v (1 - rho^2)) e`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ar1Spec {
    pub rho: Vec<f64>,
    pub var: Vec<f64>,
}

impl Ar1Spec {
    pub fn isotropic(dim: usize, rho: f64, var: f64) -> Self {
        Self {
            rho: vec![rho; dim],
            var: vec![var; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.rho.len()
    }

    fn validate(&self) -> Result<()> {
        if self.rho.is_empty() || self.rho.len() != self.var.len() {
            return Err(Error::DimensionMismatch {
                expected: self.rho.len(),
                got: self.var.len(),
            });
        }
        if self.rho.iter().any(|r| !(r.abs() < 1.0)) {
            return Err(Error::param("rho", "need |rho| < 1"));
        }
        if self.var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::param("var", "marginal variance must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VarianceRow {
    pub t: f64,
    pub c_prime: f64,
    pub trace_var_bridge: f64,
    pub se_bridge: f64,
    pub trace_var_ot: f64,
    pub se_ot: f64,
    /// `tr Var(u~) - tr Var(u)` from paired samples.
    pub diff: f64,
    pub se_diff: f64,
    pub analytic_bridge: f64,
    pub analytic_ot: f64,
    /// PASS when the Monte Carlo direction is resolved and matches the
    /// closed-form direction, INCONCLUSIVE when within the separation band.
    pub status: CheckStatus,
}

impl VarianceRow {
    pub fn analytic_diff(&self) -> f64 {
        self.analytic_ot - self.analytic_bridge
    }

    /// Whether the Monte Carlo difference is within `k` standard errors of the closed form.
    pub fn consistent(&self, k: f64) -> bool {
        (self.diff - self.analytic_diff()).abs() <= k * self.se_diff
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VarianceReport {
    pub rows: Vec<VarianceRow>,
    pub samples: usize,
    /// Extremal eigenvalues of `Cov(z^{tau-1}, z^tau) - (1/2)((sigma^4/(4 sigma_min^2) - 1) I + Var(z^tau))`.
    pub condition_min: f64,
    pub condition_max: f64,
}

impl VarianceReport {
    /// PASS if the sufficient condition holds, FAIL if it is violated in every
    /// direction, INCONCLUSIVE for an indefinite difference.
    pub fn condition_status(&self) -> CheckStatus {
        if self.condition_min >= 0.0 {
            CheckStatus::Pass
        } else if self.condition_max < 0.0 {
            CheckStatus::Fail
        } else {
            CheckStatus::Inconclusive
        }
    }
}

pub fn vf_variance_compare(
    ar1: &Ar1Spec,
    sigma_min: f64,
    sigma: f64,
    ts: &[f64],
    samples: usize,
    seed: u64,
) -> Result<VarianceReport> {
    ar1.validate()?;
    if sigma_min <= 0.0 {
        return Err(Error::param("sigma_min", "the condition is undefined for sigma_min = 0"));
    }
    if samples < 2 {
        return Err(Error::param("samples", "need at least 2 samples"));
    }
    let schedule = PathSchedule::new(PathSpec::Bridge { sigma_min, sigma })?;
    let d = ar1.dim();
    let bound = sigma.powi(4) / (4.0 * sigma_min * sigma_min);
    let slack: Vec<f64> = (0..d)
        .map(|k| ar1.rho[k] * ar1.var[k] - 0.5 * (bound - 1.0 + ar1.var[k]))
        .collect();
    let mut rows = Vec::with_capacity(ts.len());
    for (ti, &t) in ts.iter().enumerate() {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange(t));
        }
        let cp = schedule.dc(t);
        let draws: Vec<(Vec<f64>, Vec<f64>)> = (0..samples)
            .into_par_iter()
            .map(|i| {
                let mut r = rng::derived(seed, &[ti as u64, i as u64]);
                let mut u = Vec::with_capacity(d);
                let mut u_ot = Vec::with_capacity(d);
                for k in 0..d {
                    let (rho, v) = (ar1.rho[k], ar1.var[k]);
                    let prev = v.sqrt() * rng::normal(&mut r);
                    let next = rho * prev + (v * (1.0 - rho * rho)).sqrt() * rng::normal(&mut r);
                    u.push(next - prev + cp * rng::normal(&mut r));
                    u_ot.push(prev - rng::normal(&mut r));
                }
                (u, u_ot)
            })
            .collect();
        let column = |which: usize, k: usize| -> Vec<f64> {
            draws
                .iter()
                .map(|(u, w)| if which == 0 { u[k] } else { w[k] })
                .collect()
        };
        // Per-sample traces of the centred squares give the trace variances and their errors.
        let mut sq_bridge = vec![0.0; samples];
        let mut sq_ot = vec![0.0; samples];
        let mut sq_diff = vec![0.0; samples];
        for k in 0..d {
            let (u, w) = (column(0, k), column(1, k));
            let mu = u.iter().sum::<f64>() / samples as f64;
            let mw = w.iter().sum::<f64>() / samples as f64;
            for i in 0..samples {
                let (a, b) = ((u[i] - mu).powi(2), (w[i] - mw).powi(2));
                sq_bridge[i] += a;
                sq_ot[i] += b;
                sq_diff[i] += b - a;
            }
        }
        let (trace_var_bridge, se_bridge) = mean_se(&sq_bridge);
        let (trace_var_ot, se_ot) = mean_se(&sq_ot);
        let (diff, se_diff) = mean_se(&sq_diff);
        let analytic_bridge: f64 = (0..d)
            .map(|k| 2.0 * ar1.var[k] * (1.0 - ar1.rho[k]) + cp * cp)
            .sum();
        let analytic_ot: f64 = ar1.var.iter().map(|v| v + 1.0).sum();
        let expected = analytic_ot - analytic_bridge;
        let status = if diff.abs() <= SEPARATION_SE * se_diff {
            CheckStatus::Inconclusive
        } else if (diff > 0.0) == (expected > 0.0) {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        };
        rows.push(VarianceRow {
            t,
            c_prime: cp,
            trace_var_bridge,
            se_bridge,
            trace_var_ot,
            se_ot,
            diff,
            se_diff,
            analytic_bridge,
            analytic_ot,
            status,
        });
    }
    Ok(VarianceReport {
        rows,
        samples,
        condition_min: slack.iter().copied().fold(f64::INFINITY, f64::min),
        condition_max: slack.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LemmaReport {
    pub var_lhs: f64,
    pub var_rhs: f64,
    pub diff: f64,
    pub se: f64,
}

/// Equality case of the variance lemma: `B ~ N(0, 1)`, `A = B / 2`, `C, D`
/// iid `N(0, 1)`. The lemma's slack `2 Cov(A, B) - Var(B) + Var(D) - Var(C)`
/// is zero, so `Var(A + D) = Var(A - B + C) = 5/4`.
pub fn lemma1_check(samples: usize, seed: u64) -> Result<LemmaReport> {
    if samples < 2 {
        return Err(Error::param("samples", "need at least 2 samples"));
    }
    let draws: Vec<(f64, f64)> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::derived(seed, &[i as u64]);
            let b = rng::normal(&mut r);
            let a = 0.5 * b;
            let (c, d) = (rng::normal(&mut r), rng::normal(&mut r));
            (a + d, a - b + c)
        })
        .collect();
    let lhs: Vec<f64> = draws.iter().map(|p| p.0).collect();
    let rhs: Vec<f64> = draws.iter().map(|p| p.1).collect();
    let (diff, se) = var_diff_se(&lhs, &rhs);
    Ok(LemmaReport {
        var_lhs: var_se(&lhs).0,
        var_rhs: var_se(&rhs).0,
        diff,
        se,
    })
}
