//! Deterministic checks: the conditional vector field transports the path
//! (flow map), and the closed-form density satisfies the continuity equation.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::path::{self, ConditionPair, PathSchedule};
use crate::rng;
use crate::sampler::{self, Scheme};

/// Offset of the log anchor from an endpoint at which `c` stays positive.
const ANCHOR_OFFSET: f64 = 1e-8;
/// `|c'/c|` times the interval length above which an endpoint is treated as stiff.
const STIFF_RATIO: f64 = 1e3;

/// Time reparametrization `t(s)` that flattens the vector field near endpoints
/// where `c` vanishes or nearly does.
#[derive(Clone, Copy, Debug)]
enum Warp {
    Uniform,
    Start { a: f64 },
    End { b: f64 },
    Both { a: f64, b: f64 },
}

impl Warp {
    fn for_schedule(s: &PathSchedule) -> Self {
        let (lo, hi) = s.time_range();
        let (sing_lo, sing_hi) = s.singular_endpoints();
        let stiff = |t: f64| (s.dc(t) / s.c(t)).abs() * (hi - lo) > STIFF_RATIO;
        let start = sing_lo || stiff(lo);
        let end = sing_hi || stiff(hi);
        let a = if lo > 0.0 { 0.0 } else { -ANCHOR_OFFSET };
        let b = if hi < 1.0 { 1.0 } else { 1.0 + ANCHOR_OFFSET };
        match (start, end) {
            (false, false) => Warp::Uniform,
            (true, false) => Warp::Start { a },
            (false, true) => Warp::End { b },
            (true, true) => Warp::Both { a, b },
        }
    }

    fn to_s(self, t: f64) -> f64 {
        match self {
            Warp::Uniform => t,
            Warp::Start { a } => (t - a).ln(),
            Warp::End { b } => -(b - t).ln(),
            Warp::Both { a, b } => ((t - a) / (b - t)).ln(),
        }
    }

    fn to_t(self, s: f64) -> f64 {
        match self {
            Warp::Uniform => s,
            Warp::Start { a } => a + s.exp(),
            Warp::End { b } => b - (-s).exp(),
            Warp::Both { a, b } => {
                let e = s.exp();
                if e.is_infinite() {
                    b
                } else {
                    (a + b * e) / (1.0 + e)
                }
            }
        }
    }

    fn dt_ds(self, t: f64) -> f64 {
        match self {
            Warp::Uniform => 1.0,
            Warp::Start { a } => t - a,
            Warp::End { b } => b - t,
            Warp::Both { a, b } => (t - a) * (b - t) / (b - a),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlowMapReport {
    pub schedule: String,
    /// `(requested t, t actually reached, max L2 error over draws)`.
    pub rows: Vec<(f64, f64, f64)>,
}

impl FlowMapReport {
    pub fn max_error(&self) -> f64 {
        self.rows.iter().map(|r| r.2).fold(0.0, f64::max)
    }
}

/// Integrates the closed-form conditional vector field with RK4 from the start
/// of the schedule's time range and compares against `a z0 + b z1 + c xi`.
///
/// Checkpoints beyond the time range are clipped to its end.
pub fn flow_map_check(
    s: &PathSchedule,
    dim: usize,
    draws: usize,
    steps: usize,
    checkpoints: &[f64],
    seed: u64,
) -> Result<FlowMapReport> {
    if steps == 0 || draws == 0 || dim == 0 {
        return Err(Error::param("steps", "steps, draws and dim must be >= 1"));
    }
    let (lo, hi) = s.time_range();
    let warp = Warp::for_schedule(s);
    let s_lo = warp.to_s(lo);
    let mut rows = Vec::with_capacity(checkpoints.len());
    for &target in checkpoints {
        if !(0.0..=1.0).contains(&target) {
            return Err(Error::TimeOutOfRange(target));
        }
        let t_end = target.clamp(lo, hi);
        let s_hi = warp.to_s(t_end);
        let grid: Vec<f64> = (0..=steps)
            .map(|i| s_lo + (s_hi - s_lo) * i as f64 / steps as f64)
            .collect();
        let errors: Vec<f64> = (0..draws)
            .into_par_iter()
            .map(|d| {
                let mut r = rng::derived(seed, &[d as u64]);
                let pair = ConditionPair::new(rng::normal_vec(&mut r, dim), rng::normal_vec(&mut r, dim))?;
                let xi = rng::normal_vec(&mut r, dim);
                let (m0, c0) = path::path_moments(s, &pair, lo)?;
                let z0: Vec<f64> = m0.iter().zip(&xi).map(|(m, x)| m + c0 * x).collect();
                let z = sampler::integrate(Scheme::Rk4, &z0, &grid, |sv, z| {
                    let t = warp.to_t(sv).clamp(lo, hi);
                    let k = warp.dt_ds(t);
                    Ok(path::conditional_vf(s, &pair, t, z)?
                        .into_iter()
                        .map(|u| u * k)
                        .collect())
                })?;
                let (m1, c1) = path::path_moments(s, &pair, t_end)?;
                Ok(z.iter()
                    .zip(m1.iter().zip(&xi))
                    .map(|(zi, (m, x))| (zi - m - c1 * x).powi(2))
                    .sum::<f64>()
                    .sqrt())
            })
            .collect::<Result<_>>()?;
        rows.push((target, t_end, errors.iter().copied().fold(0.0, f64::max)));
    }
    Ok(FlowMapReport {
        schedule: s.to_string(),
        rows,
    })
}

/// Rectangular `(z, t)` grid for the continuity check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ContinuityGrid {
    pub z_lo: f64,
    pub z_hi: f64,
    pub nz: usize,
    pub t_lo: f64,
    pub t_hi: f64,
    pub nt: usize,
}

impl ContinuityGrid {
    pub fn dz(&self) -> f64 {
        (self.z_hi - self.z_lo) / (self.nz - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        (self.t_hi - self.t_lo) / (self.nt - 1) as f64
    }

    /// Same extent with both steps halved.
    pub fn refined(&self) -> Self {
        Self {
            nz: 2 * self.nz - 1,
            nt: 2 * self.nt - 1,
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ContinuityReport {
    /// `max |residual| / max |dp/dt|` over interior grid points.
    pub max_relative: f64,
    pub max_abs: f64,
    pub max_dp_dt: f64,
    pub dz: f64,
    pub c_min: f64,
}

/// Grid rules: `z` covers the mean path plus six standard deviations, `t`
/// covers the window around the peak of `c` where `c >= c_max / 4`, and the
/// steps resolve `c` and the relative rate of change of the density.
pub fn default_continuity_grid(s: &PathSchedule, z0: f64, z1: f64) -> Result<ContinuityGrid> {
    let (lo, hi) = s.time_range();
    let scan = 10_000;
    let ts: Vec<f64> = (0..=scan).map(|i| lo + (hi - lo) * i as f64 / scan as f64).collect();
    let cs: Vec<f64> = ts.iter().map(|&t| s.c(t)).collect();
    let peak = (0..=scan)
        .max_by(|&a, &b| cs[a].total_cmp(&cs[b]))
        .ok_or(Error::Empty("time scan"))?;
    let c_max = cs[peak];
    if !(c_max > 0.0) {
        return Err(Error::SingularSchedule { t: ts[peak] });
    }
    let floor = 0.25 * c_max;
    let mut i0 = peak;
    while i0 > 0 && cs[i0 - 1] >= floor {
        i0 -= 1;
    }
    let mut i1 = peak;
    while i1 < scan && cs[i1 + 1] >= floor {
        i1 += 1;
    }
    let (t_lo, t_hi) = (ts[i0], ts[i1]);
    let mean = |t: f64| s.a(t) * z0 + s.b(t) * z1;
    let window = &ts[i0..=i1];
    let c_min = cs[i0..=i1].iter().copied().fold(f64::INFINITY, f64::min);
    let m_lo = window.iter().map(|&t| mean(t)).fold(f64::INFINITY, f64::min);
    let m_hi = window.iter().map(|&t| mean(t)).fold(f64::NEG_INFINITY, f64::max);
    let (z_lo, z_hi) = (m_lo - 6.0 * c_max, m_hi + 6.0 * c_max);
    let nz = 401usize.max(((z_hi - z_lo) / (c_min / 40.0)).ceil() as usize + 1);
    let rate = window
        .iter()
        .map(|&t| {
            let c = s.c(t);
            (s.dc(t) / c).abs() + (s.da(t) * z0 + s.db(t) * z1).abs() / c
        })
        .fold(0.0, f64::max);
    let nt = 101usize.max(((t_hi - t_lo) * rate / 0.01).ceil() as usize + 1);
    Ok(ContinuityGrid {
        z_lo,
        z_hi,
        nz,
        t_lo,
        t_hi,
        nt,
    })
}

fn density(mean: f64, c: f64, z: f64) -> f64 {
    let x = (z - mean) / c;
    (-0.5 * x * x).exp() / (c * (2.0 * std::f64::consts::PI).sqrt())
}

/// Central-difference residual of `dp/dt + d(p u)/dz` for a scalar path.
pub fn continuity_residual(
    s: &PathSchedule,
    z0: f64,
    z1: f64,
    grid: &ContinuityGrid,
) -> Result<ContinuityReport> {
    if grid.nz < 3 || grid.nt < 3 || !(grid.z_hi > grid.z_lo) || !(grid.t_hi > grid.t_lo) {
        return Err(Error::param("grid", "need at least 3 points per axis and a positive extent"));
    }
    let (lo, hi) = s.time_range();
    if grid.t_lo < lo || grid.t_hi > hi {
        return Err(Error::param(
            "grid.t",
            format!("[{}, {}] leaves the schedule range [{lo}, {hi}]", grid.t_lo, grid.t_hi),
        ));
    }
    let (dz, dt) = (grid.dz(), grid.dt());
    let c_min = (0..grid.nt)
        .map(|j| s.c(grid.t_lo + j as f64 * dt))
        .fold(f64::INFINITY, f64::min);
    if !(c_min > 0.0) {
        return Err(Error::SingularSchedule { t: grid.t_lo });
    }
    if dz > c_min / 10.0 {
        return Err(Error::GridTooCoarse {
            dz,
            limit: c_min / 10.0,
        });
    }
    let pair = ConditionPair::new(vec![z0], vec![z1])?;
    let rows: Vec<(f64, f64)> = (1..grid.nt - 1)
        .into_par_iter()
        .map(|j| {
            let t = grid.t_lo + j as f64 * dt;
            let (tm, tp) = (t - dt, t + dt);
            let (mean_m, mean_p) = (s.a(tm) * z0 + s.b(tm) * z1, s.a(tp) * z0 + s.b(tp) * z1);
            let (c_m, c_p) = (s.c(tm), s.c(tp));
            let (mean, c) = (s.a(t) * z0 + s.b(t) * z1, s.c(t));
            // The field is affine in z, so two evaluations fix it on the whole row.
            let u_lo = path::conditional_vf(s, &pair, t, &[grid.z_lo])?[0];
            let u_hi = path::conditional_vf(s, &pair, t, &[grid.z_hi])?[0];
            let slope = (u_hi - u_lo) / (grid.z_hi - grid.z_lo);
            let flux: Vec<f64> = (0..grid.nz)
                .map(|i| {
                    let z = grid.z_lo + i as f64 * dz;
                    density(mean, c, z) * (u_lo + slope * (z - grid.z_lo))
                })
                .collect();
            let mut max_res = 0.0f64;
            let mut max_dp = 0.0f64;
            for i in 1..grid.nz - 1 {
                let z = grid.z_lo + i as f64 * dz;
                let dp = (density(mean_p, c_p, z) - density(mean_m, c_m, z)) / (2.0 * dt);
                let dflux = (flux[i + 1] - flux[i - 1]) / (2.0 * dz);
                max_res = max_res.max((dp + dflux).abs());
                max_dp = max_dp.max(dp.abs());
            }
            Ok((max_res, max_dp))
        })
        .collect::<Result<_>>()?;
    let max_abs = rows.iter().map(|r| r.0).fold(0.0, f64::max);
    let max_dp_dt = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    if max_dp_dt == 0.0 {
        return Err(Error::Degenerate("continuity check: density is static"));
    }
    Ok(ContinuityReport {
        max_relative: max_abs / max_dp_dt,
        max_abs,
        max_dp_dt,
        dz,
        c_min,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::PathSpec;

    fn bridge(sigma_min: f64, sigma: f64) -> PathSchedule {
        PathSchedule::new(PathSpec::Bridge { sigma_min, sigma }).unwrap()
    }

    #[test]
    fn warps_round_trip() {
        for w in [
            Warp::Uniform,
            Warp::Start { a: 0.0 },
            Warp::End { b: 1.0 + ANCHOR_OFFSET },
            Warp::Both { a: -ANCHOR_OFFSET, b: 1.0 },
        ] {
            for t in [1e-4, 0.3, 0.9, 0.99999] {
                assert!((w.to_t(w.to_s(t)) - t).abs() < 1e-12, "{w:?} {t}");
                let h = 1e-6;
                let fd = (w.to_t(w.to_s(t) + h) - w.to_t(w.to_s(t) - h)) / (2.0 * h);
                assert!((fd - w.dt_ds(t)).abs() < 1e-6 * (1.0 + fd.abs()), "{w:?} {t}");
            }
        }
    }

    #[test]
    fn bridge_flow_map() {
        let r = flow_map_check(&bridge(0.1, 0.5), 3, 5, 200, &[0.25, 0.5, 1.0], 1).unwrap();
        assert!(r.max_error() < 1e-6, "{r:?}");
    }

    #[test]
    fn bridge_continuity() {
        let s = bridge(0.2, 0.3);
        let g = default_continuity_grid(&s, 0.0, 1.0).unwrap();
        assert!(g.nz >= 401 && g.nt >= 101);
        let coarse = continuity_residual(&s, 0.0, 1.0, &g).unwrap();
        assert!(coarse.max_relative < 1e-3, "{coarse:?}");
        let fine = continuity_residual(&s, 0.0, 1.0, &g.refined()).unwrap();
        assert!(coarse.max_relative / fine.max_relative >= 3.0);
    }

    #[test]
    fn constant_width_translation() {
        let s = bridge(0.2, 0.0);
        let g = ContinuityGrid { z_lo: -1.5, z_hi: 2.5, nz: 401, t_lo: 0.0, t_hi: 1.0, nt: 101 };
        assert!(continuity_residual(&s, 0.0, 1.0, &g).unwrap().max_relative < 1e-3);
    }

    #[test]
    fn coarse_grid_rejected() {
        let g = ContinuityGrid { z_lo: -1.5, z_hi: 2.5, nz: 21, t_lo: 0.0, t_hi: 1.0, nt: 101 };
        assert!(matches!(
            continuity_residual(&bridge(0.2, 0.3), 0.0, 1.0, &g),
            Err(Error::GridTooCoarse { .. })
        ));
    }
}
