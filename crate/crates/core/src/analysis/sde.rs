//! Euler-Maruyama moment checks for the linear SDEs whose marginals match
//! the bridge path.
//!
//! The main SDE is `dZ = -Z/(1-t) dt + Z1/(1-t) dt + G_t dW` with
//! `G_t = sqrt(sigma^2 + 2 sigma_min^2 / (1-t))`. Its stochastic part
//! `M_t = int_0^t (1-t)/(1-s) G_s dW_s` has variance
//! `(1-t) t sigma^2 + sigma_min^2 t (2-t)`, tending to `sigma_min^2` as `t -> 1`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mean_se, var_se};
use crate::error::{Error, Result};
use crate::path::{PathSchedule, PathSpec};
use crate::rng;

/// Largest allowed base step.
pub const MAX_DT: f64 = 1e-3;
/// Near `t = 1` the step is capped at `(1 - t) / STEPS_PER_REMAINING`.
const STEPS_PER_REMAINING: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeConfig {
    pub sigma_min: f64,
    pub sigma: f64,
    pub z0: Vec<f64>,
    pub z1: Vec<f64>,
    pub checkpoints: Vec<f64>,
    pub paths: usize,
    pub dt: f64,
    pub seed: u64,
}

impl SdeConfig {
    fn validate(&self) -> Result<()> {
        if !(self.sigma_min >= 0.0 && self.sigma >= 0.0) {
            return Err(Error::param("sigma", "sigma and sigma_min must be >= 0"));
        }
        if self.z0.is_empty() || self.z0.len() != self.z1.len() {
            return Err(Error::DimensionMismatch {
                expected: self.z0.len(),
                got: self.z1.len(),
            });
        }
        if self.paths < 2 {
            return Err(Error::param("paths", "need at least 2 paths"));
        }
        if !(self.dt > 0.0 && self.dt <= MAX_DT) {
            return Err(Error::param("dt", format!("must be in (0, {MAX_DT}], got {}", self.dt)));
        }
        if self.checkpoints.is_empty() {
            return Err(Error::Empty("checkpoints"));
        }
        if self.checkpoints.iter().any(|t| !(*t > 0.0 && *t < 1.0))
            || self.checkpoints.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::param("checkpoints", "must be increasing and inside (0, 1)"));
        }
        Ok(())
    }
}

/// Variance of the bridge path, `sigma_min^2 + sigma^2 t (1-t)`.
pub fn path_variance(sigma_min: f64, sigma: f64, t: f64) -> f64 {
    sigma_min * sigma_min + sigma * sigma * t * (1.0 - t)
}

/// Variance of the stochastic integral `M_t`.
pub fn m_variance(sigma_min: f64, sigma: f64, t: f64) -> f64 {
    (1.0 - t) * t * sigma * sigma + sigma_min * sigma_min * t * (2.0 - t)
}

/// Linear extrapolation in `1 - t` of `(t1, v1), (t2, v2)` to `t = 1`.
pub fn extrapolate_to_one(t1: f64, v1: f64, t2: f64, v2: f64) -> f64 {
    v2 + (v2 - v1) * (1.0 - t2) / (t2 - t1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SdeCheckpoint {
    pub t: f64,
    /// Largest `|mean - exact| / se` over coordinates.
    pub mean_z: f64,
    /// Empirical variance averaged over coordinates.
    pub var: f64,
    pub var_exact: f64,
    pub var_z: f64,
    pub m_var: f64,
    pub m_var_exact: f64,
    pub m_var_z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SdeReport {
    pub rows: Vec<SdeCheckpoint>,
    pub paths: usize,
}

impl SdeReport {
    pub fn max_z(&self) -> f64 {
        self.rows
            .iter()
            .flat_map(|r| [r.mean_z, r.var_z, r.m_var_z])
            .fold(0.0, f64::max)
    }

    /// `Var(M_t)` extrapolated to `t = 1` from the last two checkpoints.
    pub fn m_var_at_one(&self) -> Option<f64> {
        let n = self.rows.len();
        (n >= 2).then(|| {
            let (a, b) = (&self.rows[n - 2], &self.rows[n - 1]);
            extrapolate_to_one(a.t, a.m_var, b.t, b.m_var)
        })
    }
}

/// Simulates one path, returning `(Z, M)` at every checkpoint.
fn simulate_path(cfg: &SdeConfig, path: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut r = rng::derived(cfg.seed, &[path as u64]);
    let d = cfg.z0.len();
    let mut z: Vec<f64> = cfg
        .z0
        .iter()
        .map(|z0| z0 + cfg.sigma_min * rng::normal(&mut r))
        .collect();
    let mut m = vec![0.0; d];
    let mut t = 0.0;
    let mut out = Vec::with_capacity(cfg.checkpoints.len());
    for &stop in &cfg.checkpoints {
        while t < stop {
            let rem = 1.0 - t;
            let mut h = cfg.dt.min(rem / STEPS_PER_REMAINING);
            if t + h >= stop - 1e-15 {
                h = stop - t;
            }
            let f = -1.0 / rem;
            let g = (cfg.sigma * cfg.sigma + 2.0 * cfg.sigma_min * cfg.sigma_min / rem).sqrt();
            let sq = h.sqrt();
            for i in 0..d {
                let dw = sq * rng::normal(&mut r);
                z[i] += (f * z[i] + cfg.z1[i] / rem) * h + g * dw;
                m[i] += f * m[i] * h + g * dw;
            }
            t = if h == stop - t { stop } else { t + h };
        }
        out.push((z.clone(), m.clone()));
    }
    out
}

/// Compares Euler-Maruyama marginals of the SDE against the bridge path.
///
/// The start is drawn from `N(z0, sigma_min^2)` so that `Z_t` matches the path
/// variance; `M_t` is driven by the same increments from a zero start.
pub fn sde_moment_check(cfg: &SdeConfig) -> Result<SdeReport> {
    cfg.validate()?;
    let sims: Vec<Vec<(Vec<f64>, Vec<f64>)>> = (0..cfg.paths)
        .into_par_iter()
        .map(|p| simulate_path(cfg, p))
        .collect();
    let d = cfg.z0.len();
    let rows = cfg
        .checkpoints
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let mut row = SdeCheckpoint {
                t,
                mean_z: 0.0,
                var: 0.0,
                var_exact: path_variance(cfg.sigma_min, cfg.sigma, t),
                var_z: 0.0,
                m_var: 0.0,
                m_var_exact: m_variance(cfg.sigma_min, cfg.sigma, t),
                m_var_z: 0.0,
            };
            for i in 0..d {
                let zs: Vec<f64> = sims.iter().map(|s| s[k].0[i]).collect();
                let ms: Vec<f64> = sims.iter().map(|s| s[k].1[i]).collect();
                let exact_mean = (1.0 - t) * cfg.z0[i] + t * cfg.z1[i];
                let (mean, mean_err) = mean_se(&zs);
                let (var, var_err) = var_se(&zs);
                let (m_var, m_var_err) = var_se(&ms);
                row.mean_z = row.mean_z.max((mean - exact_mean).abs() / mean_err);
                row.var_z = row.var_z.max((var - row.var_exact).abs() / var_err);
                row.m_var_z = row.m_var_z.max((m_var - row.m_var_exact).abs() / m_var_err);
                row.var += var / d as f64;
                row.m_var += m_var / d as f64;
            }
            row
        })
        .collect();
    Ok(SdeReport {
        rows,
        paths: cfg.paths,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AltCheckpoint {
    pub t: f64,
    pub mean_z: f64,
    pub var: f64,
    /// Path variance `sigma_min^2 + sigma^2 t (1-t)`.
    pub var_path: f64,
    pub var_path_z: f64,
    /// Ito variance `sigma_min^2 + int_0^t c'(s)^2 ds` of the alternative SDE.
    pub var_ito: f64,
    pub var_ito_z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AltSdeReport {
    pub rows: Vec<AltCheckpoint>,
    pub paths: usize,
}

/// `int_0^t f(s) ds` by composite Simpson.
fn simpson<F: Fn(f64) -> f64>(f: F, t: f64, intervals: usize) -> f64 {
    let n = intervals + intervals % 2;
    let h = t / n as f64;
    let inner: f64 = (1..n)
        .map(|i| if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h))
        .sum();
    h / 3.0 * (f(0.0) + inner + f(t))
}

/// Simulates `dZ = (z1 - z0) dt + c'_t dW` from `N(z0, sigma_min^2)` and
/// compares its variance both with the path variance and with its own Ito
/// variance.
pub fn alt_sde_check(cfg: &SdeConfig) -> Result<AltSdeReport> {
    cfg.validate()?;
    if cfg.sigma_min <= 0.0 {
        return Err(Error::param("sigma_min", "the alternative SDE needs sigma_min > 0"));
    }
    let s = PathSchedule::new(PathSpec::Bridge {
        sigma_min: cfg.sigma_min,
        sigma: cfg.sigma,
    })?;
    let d = cfg.z0.len();
    let drift: Vec<f64> = cfg.z1.iter().zip(&cfg.z0).map(|(a, b)| a - b).collect();
    let sims: Vec<Vec<Vec<f64>>> = (0..cfg.paths)
        .into_par_iter()
        .map(|p| {
            let mut r = rng::derived(cfg.seed, &[p as u64]);
            let mut z: Vec<f64> = cfg
                .z0
                .iter()
                .map(|z0| z0 + cfg.sigma_min * rng::normal(&mut r))
                .collect();
            let mut t = 0.0;
            let mut out = Vec::with_capacity(cfg.checkpoints.len());
            for &stop in &cfg.checkpoints {
                while t < stop {
                    let h = cfg.dt.min(stop - t);
                    let g = s.dc(t);
                    let sq = h.sqrt();
                    for i in 0..d {
                        z[i] += drift[i] * h + g * sq * rng::normal(&mut r);
                    }
                    t = if h == stop - t { stop } else { t + h };
                }
                out.push(z.clone());
            }
            out
        })
        .collect();
    let rows = cfg
        .checkpoints
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let var_path = path_variance(cfg.sigma_min, cfg.sigma, t);
            let var_ito =
                cfg.sigma_min * cfg.sigma_min + simpson(|u| s.dc(u).powi(2), t, 2000);
            let mut row = AltCheckpoint {
                t,
                mean_z: 0.0,
                var: 0.0,
                var_path,
                var_path_z: 0.0,
                var_ito,
                var_ito_z: 0.0,
            };
            for i in 0..d {
                let zs: Vec<f64> = sims.iter().map(|sim| sim[k][i]).collect();
                let (mean, mean_err) = mean_se(&zs);
                let (var, var_err) = var_se(&zs);
                let exact_mean = (1.0 - t) * cfg.z0[i] + t * cfg.z1[i];
                row.mean_z = row.mean_z.max((mean - exact_mean).abs() / mean_err);
                row.var_path_z = row.var_path_z.max((var - var_path).abs() / var_err);
                row.var_ito_z = row.var_ito_z.max((var - var_ito).abs() / var_err);
                row.var += var / d as f64;
            }
            row
        })
        .collect();
    Ok(AltSdeReport {
        rows,
        paths: cfg.paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(checkpoints: Vec<f64>, paths: usize) -> SdeConfig {
        SdeConfig {
            sigma_min: 0.1,
            sigma: 0.5,
            z0: vec![0.0],
            z1: vec![1.0],
            checkpoints,
            paths,
            dt: 1e-3,
            seed: 7,
        }
    }

    #[test]
    fn stochastic_integral_variance_formula() {
        assert_eq!(m_variance(0.0, 1.0, 0.5), 0.25);
        assert!((m_variance(0.1, 0.5, 1.0) - 0.01).abs() < 1e-15);
        // Var(Z_t) = Var(M_t) + (1-t)^2 sigma_min^2 under the random start.
        for t in [0.1, 0.5, 0.9] {
            let lhs = m_variance(0.2, 0.7, t) + (1.0 - t).powi(2) * 0.04;
            assert!((lhs - path_variance(0.2, 0.7, t)).abs() < 1e-15);
        }
    }

    #[test]
    fn extrapolation_is_exact_for_linear_data() {
        let v = |t: f64| 2.0 + 3.0 * (1.0 - t);
        assert!((extrapolate_to_one(0.9, v(0.9), 0.99, v(0.99)) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn simpson_integrates_cubic() {
        assert!((simpson(|x| x * x * x, 2.0, 10) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoints_are_hit_exactly_and_moments_match() {
        let rep = sde_moment_check(&cfg(vec![0.25, 0.5], 4000)).unwrap();
        assert_eq!(rep.rows[1].t, 0.5);
        assert!(rep.max_z() < 4.0, "{rep:?}");
    }

    #[test]
    fn alt_sde_mean_matches_but_variance_follows_ito() {
        let rep = alt_sde_check(&cfg(vec![0.25], 4000)).unwrap();
        let row = rep.rows[0];
        assert!(row.mean_z < 4.0);
        assert!(row.var_ito_z < 4.0, "{row:?}");
        assert!(row.var_path_z > 5.0, "{row:?}");
    }

    #[test]
    fn validation() {
        let mut c = cfg(vec![0.5], 10);
        c.dt = 1e-2;
        assert!(sde_moment_check(&c).is_err());
        assert!(sde_moment_check(&cfg(vec![1.0], 10)).is_err());
        assert!(sde_moment_check(&cfg(vec![0.6, 0.4], 10)).is_err());
        let mut c = cfg(vec![0.5], 10);
        c.sigma_min = 0.0;
        assert!(alt_sde_check(&c).is_err());
    }
}
