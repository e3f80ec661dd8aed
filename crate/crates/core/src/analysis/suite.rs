//! The standard verification run: every check with its default parameters.

use serde::{Deserialize, Serialize};

use super::{
    alt_sde_check, continuity_residual, default_continuity_grid, flow_map_check, lemma1_check,
    sde_moment_check, vf_variance_compare, Ar1Spec, CheckOutcome, CheckStatus, SdeConfig,
};
use crate::error::Result;
use crate::path::{PathSchedule, PathSpec};

/// Benchmark schedule kinds in a fixed order.
pub const SCHEDULE_KINDS: [&str; 5] = ["ve", "vp", "ot", "stochastic_interpolant", "bridge"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub seed: u64,
    pub flow_draws: usize,
    pub flow_steps: usize,
    pub flow_tolerance: f64,
    pub continuity_tolerance: f64,
    pub sde_paths: usize,
    pub sde_dt: f64,
    pub sde_sigma_min: f64,
    pub sde_sigma: f64,
    pub variance_samples: usize,
    pub lemma_samples: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            flow_draws: 20,
            flow_steps: 1000,
            flow_tolerance: 1e-5,
            continuity_tolerance: 1e-3,
            sde_paths: 10_000,
            sde_dt: 1e-4,
            sde_sigma_min: 0.1,
            sde_sigma: 0.5,
            variance_samples: 20_000,
            lemma_samples: 50_000,
        }
    }
}

/// Schedules whose width the continuity grid can resolve, one per kind.
pub fn continuity_schedules() -> Vec<PathSchedule> {
    [
        PathSpec::Ve {
            sigma_min: 0.1,
            sigma_max: 1.0,
        },
        PathSpec::Vp {
            beta_min: 0.1,
            beta_max: 20.0,
        },
        PathSpec::Ot { eps_min: 0.2 },
        PathSpec::StochasticInterpolant {
            eps: 1.0,
            quadratic: true,
        },
        PathSpec::Bridge {
            sigma_min: 0.2,
            sigma: 0.3,
        },
    ]
    .into_iter()
    .map(|s| PathSchedule::new(s).expect("valid continuity schedule"))
    .collect()
}

pub fn flow_map_outcomes(cfg: &SuiteConfig) -> Result<Vec<CheckOutcome>> {
    SCHEDULE_KINDS
        .iter()
        .map(|kind| {
            let s = PathSchedule::new(PathSpec::benchmark_default(kind)?)?;
            let rep = flow_map_check(&s, 3, cfg.flow_draws, cfg.flow_steps, &[0.25, 0.5, 1.0], cfg.seed)?;
            let err = rep.max_error();
            Ok(CheckOutcome::from_bool(
                format!("flow map {kind}"),
                err < cfg.flow_tolerance,
                format!("max L2 error {err:.3e} over {} draws (tol {:.0e})", cfg.flow_draws, cfg.flow_tolerance),
            ))
        })
        .collect()
}

pub fn continuity_outcomes(cfg: &SuiteConfig) -> Result<Vec<CheckOutcome>> {
    continuity_schedules()
        .iter()
        .map(|s| {
            let grid = default_continuity_grid(s, 0.0, 1.0)?;
            let coarse = continuity_residual(s, 0.0, 1.0, &grid)?;
            let fine = continuity_residual(s, 0.0, 1.0, &grid.refined())?;
            let ratio = coarse.max_relative / fine.max_relative;
            Ok(CheckOutcome::from_bool(
                format!("continuity {}", s.name()),
                coarse.max_relative < cfg.continuity_tolerance && ratio >= 3.0,
                format!(
                    "{s}: residual {:.3e} on {}x{} grid, refinement gain {ratio:.2}",
                    coarse.max_relative, grid.nz, grid.nt
                ),
            ))
        })
        .collect()
}

fn sde_config(cfg: &SuiteConfig, checkpoints: Vec<f64>) -> SdeConfig {
    SdeConfig {
        sigma_min: cfg.sde_sigma_min,
        sigma: cfg.sde_sigma,
        z0: vec![0.0],
        z1: vec![1.0],
        checkpoints,
        paths: cfg.sde_paths,
        dt: cfg.sde_dt,
        seed: cfg.seed,
    }
}

pub fn sde_outcomes(cfg: &SuiteConfig) -> Result<Vec<CheckOutcome>> {
    let rep = sde_moment_check(&sde_config(cfg, vec![0.25, 0.5, 0.75, 0.99, 0.999]))?;
    let interior = &rep.rows[..3];
    let worst = interior
        .iter()
        .flat_map(|r| [r.mean_z, r.var_z, r.m_var_z])
        .fold(0.0, f64::max);
    let limit = rep.m_var_at_one().unwrap_or(f64::NAN);
    let target = cfg.sde_sigma_min * cfg.sde_sigma_min;
    let rel = (limit - target).abs() / target;
    let mut out = vec![
        CheckOutcome::from_bool(
            "sde moments",
            worst <= 3.0,
            format!(
                "worst |z| {worst:.2} for mean, variance and Var(M_t) at t = 0.25, 0.5, 0.75 ({} paths)",
                rep.paths
            ),
        ),
        CheckOutcome::from_bool(
            "sde terminal variance",
            rel <= 0.05,
            format!("Var(M_t) extrapolated to t = 1: {limit:.5e} vs sigma_min^2 = {target:.5e} ({:.2}%)", 100.0 * rel),
        ),
    ];

    let alt = alt_sde_check(&sde_config(cfg, vec![0.25, 0.5, 0.75]))?;
    let mean_ok = alt.rows.iter().all(|r| r.mean_z <= 3.0);
    let detail = alt
        .rows
        .iter()
        .map(|r| {
            format!(
                "t={}: var {:.4e}, path {:.4e} (|z| {:.1}), ito {:.4e} (|z| {:.1})",
                r.t, r.var, r.var_path, r.var_path_z, r.var_ito, r.var_ito_z
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    let status = if mean_ok && alt.rows.iter().all(|r| r.var_path_z <= 3.0) {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    };
    out.push(CheckOutcome::new("alternative sde marginals", status, detail).informational());
    Ok(out)
}

pub fn variance_outcomes(cfg: &SuiteConfig) -> Result<Vec<CheckOutcome>> {
    let ts = [0.0, 0.25, 0.5];
    let (sigma_min, sigma) = (0.1, 0.02);
    let strong = vf_variance_compare(&Ar1Spec::isotropic(4, 0.99, 1.0), sigma_min, sigma, &ts, cfg.variance_samples, cfg.seed)?;
    let strong_ok = strong.condition_status() == CheckStatus::Pass
        && strong.rows.iter().all(|r| r.status == CheckStatus::Pass);
    let worst_sep = strong
        .rows
        .iter()
        .map(|r| r.diff / r.se_diff)
        .fold(f64::INFINITY, f64::min);
    let weak = vf_variance_compare(&Ar1Spec::isotropic(4, 0.0, 1.0), sigma_min, sigma, &ts, cfg.variance_samples, cfg.seed)?;
    // At t = 1/2, c' = 0 and both variances coincide.
    let weak_ok = weak
        .rows
        .iter()
        .all(|r| (r.analytic_diff() < 0.0 || r.c_prime == 0.0) && r.consistent(3.0));
    let lemma = lemma1_check(cfg.lemma_samples, cfg.seed)?;
    Ok(vec![
        CheckOutcome::from_bool(
            "vf variance rho=0.99",
            strong_ok,
            format!(
                "condition slack {:.6}, tr Var(ot) - tr Var(bridge) >= {worst_sep:.1} SE at t = 0, 0.25, 0.5",
                strong.condition_min
            ),
        ),
        CheckOutcome::from_bool(
            "vf variance rho=0",
            weak_ok,
            format!(
                "closed form tr Var(ot) - tr Var(bridge) = -4 c'^2 (min {:.3e}); Monte Carlo consistent within 3 SE",
                weak.rows.iter().map(|r| r.analytic_diff()).fold(f64::INFINITY, f64::min)
            ),
        ),
        CheckOutcome::from_bool(
            "variance lemma equality",
            lemma.diff.abs() <= 3.0 * lemma.se,
            format!(
                "Var(A+D) = {:.4}, Var(A-B+C) = {:.4}, difference {:.2} SE",
                lemma.var_lhs,
                lemma.var_rhs,
                lemma.diff / lemma.se
            ),
        ),
    ])
}

/// Runs every check. Only gating outcomes can fail a verification.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<CheckOutcome>> {
    let mut out = flow_map_outcomes(cfg)?;
    out.extend(continuity_outcomes(cfg)?);
    out.extend(sde_outcomes(cfg)?);
    out.extend(variance_outcomes(cfg)?);
    Ok(out)
}
