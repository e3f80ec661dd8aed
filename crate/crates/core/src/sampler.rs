//! One-step forecasting by integrating a learned vector field, and
//! autoregressive ensemble rollouts.

use std::fmt::Write as _;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::LinearCodec;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricSet};
use crate::model::ConditionalField;
use crate::path::PathSchedule;
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
    #[default]
    Rk4,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Euler => "euler",
            Scheme::Rk4 => "rk4",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Explicit time grid `0 = s_0 < ... < s_N = 1`; uniform when absent.
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
    #[serde(default)]
    pub sigma_sam: f64,
    #[serde(default = "default_ensemble")]
    pub ensemble: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_steps() -> usize {
    10
}

fn default_ensemble() -> usize {
    1
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Rk4,
            steps: default_steps(),
            grid: None,
            sigma_sam: 0.0,
            ensemble: default_ensemble(),
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn new(scheme: Scheme, steps: usize) -> Self {
        Self {
            scheme,
            steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::param("steps", "must be >= 1"));
        }
        if !(self.sigma_sam >= 0.0 && self.sigma_sam.is_finite()) {
            return Err(Error::param("sigma_sam", "must be >= 0"));
        }
        if self.ensemble == 0 {
            return Err(Error::param("ensemble", "must be >= 1"));
        }
        if let Some(g) = &self.grid {
            check_grid(g).map_err(|e| Error::param("grid", e.to_string()))?;
            if g.len() != self.steps + 1 {
                return Err(Error::param(
                    "grid",
                    format!("expected {} points for {} steps, got {}", self.steps + 1, self.steps, g.len()),
                ));
            }
        }
        Ok(())
    }

    pub fn time_grid(&self) -> Vec<f64> {
        match &self.grid {
            Some(g) => g.clone(),
            None => uniform_grid(self.steps),
        }
    }
}

pub fn uniform_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

fn check_grid(g: &[f64]) -> Result<()> {
    if g.len() < 2 || g[0] != 0.0 || *g.last().unwrap() != 1.0 {
        return Err(Error::param("grid", "must start at 0 and end at 1"));
    }
    if g.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::param("grid", "must be strictly increasing"));
    }
    Ok(())
}

/// Advances `y` from `s0` to `s1` with one step of `scheme`.
pub fn step<F>(scheme: Scheme, y: &[f64], s0: f64, s1: f64, rhs: F) -> Result<Vec<f64>>
where
    F: Fn(f64, &[f64]) -> Result<Vec<f64>>,
{
    let h = s1 - s0;
    let axpy = |a: f64, x: &[f64]| -> Vec<f64> { y.iter().zip(x).map(|(yi, xi)| yi + a * xi).collect() };
    match scheme {
        Scheme::Euler => Ok(axpy(h, &rhs(s0, y)?)),
        Scheme::Rk4 => {
            let k1 = rhs(s0, y)?;
            let k2 = rhs(s0 + 0.5 * h, &axpy(0.5 * h, &k1))?;
            let k3 = rhs(s0 + 0.5 * h, &axpy(0.5 * h, &k2))?;
            let k4 = rhs(s1, &axpy(h, &k3))?;
            Ok(y.iter()
                .enumerate()
                .map(|(i, yi)| yi + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                .collect())
        }
    }
}

/// Integrates a fixed right-hand side over `grid`.
pub fn integrate<F>(scheme: Scheme, y0: &[f64], grid: &[f64], rhs: F) -> Result<Vec<f64>>
where
    F: Fn(f64, &[f64]) -> Result<Vec<f64>>,
{
    let mut y = y0.to_vec();
    for w in grid.windows(2) {
        y = step(scheme, &y, w[0], w[1], &rhs)?;
    }
    Ok(y)
}

/// A [`ConditionalField`] backed by a closure, for fixed or closed-form fields.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64], &[f64], &[f64], usize, f64) -> Vec<f64> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> ConditionalField for FnField<F>
where
    F: Fn(&[f64], &[f64], &[f64], usize, f64) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, z: &[f64], z_ref: &[f64], z_cond: &[f64], gap: usize, t: f64) -> Result<Vec<f64>> {
        Ok((self.f)(z, z_ref, z_cond, gap, t))
    }
}

/// Initial state `Y_0` and the reference latent handed to the model.
///
/// Paths anchored at the previous latent (`a(0) = 1`) start in a `sigma_sam`
/// ball around it, which also serves as the reference. Noise-anchored paths
/// (`a(0) = 0`) start from their own `t = 0` marginal `N(0, c(0)^2 I)` and keep
/// the previous latent as the reference.
pub fn start_state(schedule: &PathSchedule, last: &[f64], sigma_sam: f64, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    if schedule.a(0.0) == 0.0 {
        let c0 = schedule.c(0.0);
        let y0 = rng::normal_vec(rng, last.len()).into_iter().map(|e| c0 * e).collect();
        return (y0, last.to_vec());
    }
    let y0: Vec<f64> = if sigma_sam > 0.0 {
        last.iter()
            .zip(rng::normal_vec(rng, last.len()))
            .map(|(m, e)| m + sigma_sam * e)
            .collect()
    } else {
        last.to_vec()
    };
    (y0.clone(), y0)
}

/// Latent-space one-step forecast from a prefix `z^1 .. z^{T-1}`.
///
/// Each integration step draws a distance `c` in `2..=T-1`, conditions on
/// `z^{T-c}` with gap `c`, and keeps that draw for all stages of the step.
pub fn forecast_next_latent(
    field: &dyn ConditionalField,
    prefix: &[Vec<f64>],
    cfg: &SamplerConfig,
    schedule: &PathSchedule,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let len = prefix.len();
    if len < 2 {
        return Err(Error::TooShort { len, min: 2 });
    }
    let last = &prefix[len - 1];
    if last.len() != field.dim() {
        return Err(Error::DimensionMismatch {
            expected: field.dim(),
            got: last.len(),
        });
    }
    let (y0, z_ref) = start_state(schedule, last, cfg.sigma_sam, rng);
    let grid = cfg.time_grid();
    let mut y = y0;
    for w in grid.windows(2) {
        let c = rng.random_range(2..=len);
        let cond = &prefix[len - c];
        y = step(cfg.scheme, &y, w[0], w[1], |s, z| field.eval(z, &z_ref, cond, c, s))?;
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("forecast state"));
    }
    Ok(y)
}

/// Data-space one-step forecast.
pub fn forecast_next(
    field: &dyn ConditionalField,
    codec: &LinearCodec,
    prefix: &[Vec<f64>],
    cfg: &SamplerConfig,
    schedule: &PathSchedule,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let latent = codec.encode_all(prefix)?;
    codec.decode(&forecast_next_latent(field, &latent, cfg, schedule, rng)?)
}

/// Ensemble forecasts and their evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastReport {
    /// `E x l x d`.
    pub members: Vec<Vec<Vec<f64>>>,
    /// Pointwise ensemble mean, `l x d`.
    pub mean: Vec<Vec<f64>>,
    /// Per-step metrics averaged over members, when ground truth was given.
    pub metrics: Option<Vec<MetricSet>>,
}

impl ForecastReport {
    pub fn horizon(&self) -> usize {
        self.mean.len()
    }

    /// Metrics averaged over the horizon.
    pub fn overall(&self) -> Option<MetricSet> {
        self.metrics.as_ref().and_then(|m| MetricSet::mean(m).ok())
    }
}

/// Evaluation settings for [`rollout`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Truth<'a> {
    pub states: &'a [Vec<f64>],
    pub data_range: f64,
    pub field_shape: Option<(usize, usize)>,
}

fn rollout_member(
    field: &dyn ConditionalField,
    codec: &LinearCodec,
    latent_prefix: &[Vec<f64>],
    horizon: usize,
    cfg: &SamplerConfig,
    schedule: &PathSchedule,
    member: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut r = rng::derived(cfg.seed, &[member as u64]);
    let mut history = latent_prefix.to_vec();
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let z = forecast_next_latent(field, &history, cfg, schedule, &mut r)?;
        out.push(codec.decode(&z)?);
        history.push(z);
    }
    Ok(out)
}

/// Autoregressive rollout of `horizon` steps for every ensemble member.
pub fn rollout(
    field: &dyn ConditionalField,
    codec: &LinearCodec,
    prefix: &[Vec<f64>],
    horizon: usize,
    cfg: &SamplerConfig,
    schedule: &PathSchedule,
    truth: Option<Truth<'_>>,
) -> Result<ForecastReport> {
    cfg.validate()?;
    if horizon == 0 {
        return Err(Error::param("horizon", "must be >= 1"));
    }
    if let Some(t) = &truth {
        if t.states.len() < horizon {
            return Err(Error::TooShort {
                len: t.states.len(),
                min: horizon,
            });
        }
    }
    let latent = codec.encode_all(prefix)?;
    let members: Vec<Vec<Vec<f64>>> = (0..cfg.ensemble)
        .into_par_iter()
        .map(|e| rollout_member(field, codec, &latent, horizon, cfg, schedule, e))
        .collect::<Result<_>>()?;
    let d = codec.d();
    let n = members.len() as f64;
    let mean: Vec<Vec<f64>> = (0..horizon)
        .map(|s| {
            (0..d)
                .map(|i| members.iter().map(|m| m[s][i]).sum::<f64>() / n)
                .collect()
        })
        .collect();
    let metrics = match truth {
        None => None,
        Some(t) => Some(
            (0..horizon)
                .map(|s| {
                    let per: Vec<MetricSet> = members
                        .iter()
                        .map(|m| metrics::compute(&m[s], &t.states[s], t.data_range, t.field_shape))
                        .collect::<Result<_>>()?;
                    MetricSet::mean(&per)
                })
                .collect::<Result<_>>()?,
        ),
    };
    Ok(ForecastReport {
        members,
        mean,
        metrics,
    })
}

/// CSV rows `step,mse,rfne,psnr,ssim,pearson` (1-based steps); empty pearson when undefined.
pub fn metrics_csv(per_step: &[MetricSet]) -> String {
    let mut out = String::from("step,mse,rfne,psnr,ssim,pearson\n");
    for (i, m) in per_step.iter().enumerate() {
        let pearson = m.pearson.map(|p| p.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{},{}", i + 1, m.mse, m.rfne, m.psnr, m.ssim, pearson);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::PathSpec;

    fn bridge() -> PathSchedule {
        PathSchedule::new(PathSpec::Bridge { sigma_min: 0.001, sigma: 0.01 }).unwrap()
    }

    fn zero_field(dim: usize) -> impl ConditionalField {
        FnField::new(dim, move |_, _, _, _, _| vec![0.0; dim])
    }

    fn prefix() -> Vec<Vec<f64>> {
        vec![vec![0.1, 0.2], vec![0.3, -0.4], vec![0.5, 0.6]]
    }

    #[test]
    fn zero_field_persists() {
        let codec = LinearCodec::identity(2);
        for scheme in [Scheme::Euler, Scheme::Rk4] {
            let cfg = SamplerConfig::new(scheme, 7);
            let y = forecast_next(&zero_field(2), &codec, &prefix(), &cfg, &bridge(), &mut rng::seeded(1)).unwrap();
            assert_eq!(y, vec![0.5, 0.6]);
        }
    }

    #[test]
    fn constant_field_euler_is_exact() {
        let f = FnField::new(2, |_, _, _, _, _| vec![0.25, -1.5]);
        let codec = LinearCodec::identity(2);
        for n in [1, 3, 17] {
            let cfg = SamplerConfig::new(Scheme::Euler, n);
            let y = forecast_next(&f, &codec, &prefix(), &cfg, &bridge(), &mut rng::seeded(0)).unwrap();
            assert!((y[0] - 0.75).abs() < 1e-14 && (y[1] + 0.9).abs() < 1e-14);
        }
    }

    #[test]
    fn condition_draws_cover_prefix_with_matching_gap() {
        let seen = std::sync::Mutex::new(std::collections::BTreeSet::new());
        let f = FnField::new(1, |_, _, cond: &[f64], gap, _| {
            seen.lock().unwrap().insert((cond[0] as usize, gap));
            vec![0.0]
        });
        let prefix: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let cfg = SamplerConfig::new(Scheme::Euler, 200);
        forecast_next_latent(&f, &prefix, &cfg, &bridge(), &mut rng::seeded(3)).unwrap();
        let seen = seen.into_inner().unwrap();
        // Prefix holds z^1..z^4 at indices 0..4; forecasting z^5 at distance c uses z^{5-c}.
        let expected: std::collections::BTreeSet<_> = (2..=5).map(|c| (5 - c, c)).collect();
        assert_eq!(seen, expected);
    }

    #[test]
    fn rk4_stages_share_condition() {
        let calls = std::sync::Mutex::new(Vec::new());
        let f = FnField::new(1, |_, _, cond: &[f64], gap, _| {
            calls.lock().unwrap().push((cond[0], gap));
            vec![1.0]
        });
        let prefix: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let cfg = SamplerConfig::new(Scheme::Rk4, 25);
        forecast_next_latent(&f, &prefix, &cfg, &bridge(), &mut rng::seeded(4)).unwrap();
        let calls = calls.into_inner().unwrap();
        assert_eq!(calls.len(), 100);
        for chunk in calls.chunks(4) {
            assert!(chunk.iter().all(|c| *c == chunk[0]));
        }
    }

    #[test]
    fn start_noise_is_conditioning_reference() {
        let f = FnField::new(1, |_, z_ref: &[f64], _, _, _| vec![z_ref[0]]);
        let cfg = SamplerConfig {
            sigma_sam: 0.5,
            ..SamplerConfig::new(Scheme::Euler, 4)
        };
        let y = forecast_next_latent(&f, &[vec![0.0], vec![1.0]], &cfg, &bridge(), &mut rng::seeded(9)).unwrap();
        // v = Y_0 integrated over unit time from Y_0 gives 2 Y_0.
        let mut r = rng::seeded(9);
        let y0 = 1.0 + 0.5 * rng::normal(&mut r);
        assert!((y[0] - 2.0 * y0).abs() < 1e-12);
    }

    #[test]
    fn noise_anchored_paths_start_from_their_prior() {
        let ot = PathSchedule::new(PathSpec::Ot { eps_min: 0.5 }).unwrap();
        let f = FnField::new(1, |_, z_ref: &[f64], _, _, _| vec![z_ref[0]]);
        let cfg = SamplerConfig::new(Scheme::Euler, 4);
        let y = forecast_next_latent(&f, &[vec![0.0], vec![3.0]], &cfg, &ot, &mut rng::seeded(9)).unwrap();
        // Reference stays the previous latent; Y_0 = c(0) xi with c(0) = 1.
        let y0 = rng::normal(&mut rng::seeded(9));
        assert!((y[0] - (y0 + 3.0)).abs() < 1e-12);
    }

    #[test]
    fn rollout_length_one_matches_forecast_next() {
        let f = FnField::new(2, |z: &[f64], _, c: &[f64], gap, t| {
            vec![z[1] * t + c[0], -z[0] + gap as f64 * 0.01]
        });
        let codec = LinearCodec::identity(2);
        let cfg = SamplerConfig::new(Scheme::Rk4, 5);
        let rep = rollout(&f, &codec, &prefix(), 1, &cfg, &bridge(), None).unwrap();
        let mut r = rng::derived(cfg.seed, &[0]);
        let direct = forecast_next(&f, &codec, &prefix(), &cfg, &bridge(), &mut r).unwrap();
        assert_eq!(rep.members[0][0], direct);
        assert_eq!(rep.mean[0], direct);
    }

    #[test]
    fn rollout_is_reproducible() {
        let f = FnField::new(2, |z: &[f64], _, c: &[f64], _, _| vec![c[1] - z[0], c[0]]);
        let codec = LinearCodec::identity(2);
        let cfg = SamplerConfig {
            ensemble: 2,
            sigma_sam: 0.1,
            ..SamplerConfig::new(Scheme::Rk4, 5)
        };
        let a = rollout(&f, &codec, &prefix(), 4, &cfg, &bridge(), None).unwrap();
        let b = rollout(&f, &codec, &prefix(), 4, &cfg, &bridge(), None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.members.len(), 2);
        assert_eq!(a.horizon(), 4);
    }

    #[test]
    fn linear_field_orders() {
        // y' = A y with A = [[0, 1], [-1, 0]]: rotation by angle 1 at s = 1.
        let rhs = |_: f64, y: &[f64]| Ok(vec![y[1], -y[0]]);
        let exact = [1f64.cos(), -1f64.sin()];
        let err = |scheme, n| {
            let y = integrate(scheme, &[1.0, 0.0], &uniform_grid(n), rhs).unwrap();
            ((y[0] - exact[0]).powi(2) + (y[1] - exact[1]).powi(2)).sqrt()
        };
        for (scheme, order) in [(Scheme::Euler, 1.0), (Scheme::Rk4, 4.0)] {
            let p = (err(scheme, 20) / err(scheme, 40)).log2();
            assert!((p - order).abs() < 0.2, "{scheme:?}: {p}");
        }
    }

    #[test]
    fn validation() {
        assert!(SamplerConfig::new(Scheme::Euler, 0).validate().is_err());
        let bad_grid = SamplerConfig {
            grid: Some(vec![0.0, 0.7, 0.5, 1.0]),
            ..SamplerConfig::new(Scheme::Euler, 3)
        };
        assert!(bad_grid.validate().is_err());
        let good_grid = SamplerConfig {
            grid: Some(vec![0.0, 0.1, 0.5, 1.0]),
            ..SamplerConfig::new(Scheme::Euler, 3)
        };
        assert!(good_grid.validate().is_ok());
        let err = forecast_next_latent(&zero_field(1), &[vec![0.0]], &SamplerConfig::default(), &bridge(), &mut rng::seeded(0));
        assert!(matches!(err, Err(Error::TooShort { .. })));
    }

    #[test]
    fn metrics_csv_layout() {
        let m = MetricSet { mse: 0.5, rfne: 0.25, psnr: 9.0, ssim: 0.75, pearson: None };
        assert_eq!(metrics_csv(&[m]), "step,mse,rfne,psnr,ssim,pearson\n1,0.5,0.25,9,0.75,\n");
    }
}
