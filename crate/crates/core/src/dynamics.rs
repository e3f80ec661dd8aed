//! Ground-truth trajectories from small dynamical systems.
//!
//! ODE systems are integrated with fixed-step RK4; heat equations use forward
//! Euler finite differences with zero-flux boundaries on a cell-centred grid.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Sampled states of one system run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// `m` states of dimension `d`, channel-major.
    pub states: Vec<Vec<f64>>,
    pub system_id: String,
    pub dt: f64,
    /// Number of physical channels; `d` is a multiple of it.
    pub channels: usize,
    /// Spatial layout of one channel for 2D fields.
    pub field_shape: Option<(usize, usize)>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum System {
    /// `x'' + 2 zeta omega x' + omega^2 x = 0`; initial amplitude drawn from
    /// `[amp_min, amp_max]` with a uniform phase.
    DampedOscillator {
        #[serde(default = "one")]
        omega: f64,
        #[serde(default = "default_zeta")]
        zeta: f64,
        #[serde(default = "default_amp_min")]
        amp_min: f64,
        #[serde(default = "one")]
        amp_max: f64,
    },
    /// Lorenz '63 started from `center + ic_std * N(0, I)`.
    Lorenz63 {
        #[serde(default = "default_lorenz_sigma")]
        sigma: f64,
        #[serde(default = "default_lorenz_rho")]
        rho: f64,
        #[serde(default = "default_lorenz_beta")]
        beta: f64,
        #[serde(default = "default_lorenz_center")]
        center: [f64; 3],
        #[serde(default = "one")]
        ic_std: f64,
    },
    /// Heat equation on `[0, 1]` with `n` cells, random cosine-mode initial field.
    Heat1d {
        n: usize,
        kappa: f64,
        #[serde(default = "default_modes")]
        modes: usize,
    },
    /// Heat equation on `[0, 1]^2` with `n x n` cells.
    Heat2d {
        n: usize,
        kappa: f64,
        #[serde(default = "default_modes")]
        modes: usize,
    },
}

fn one() -> f64 {
    1.0
}
fn default_zeta() -> f64 {
    0.05
}
fn default_amp_min() -> f64 {
    0.5
}
fn default_lorenz_sigma() -> f64 {
    10.0
}
fn default_lorenz_rho() -> f64 {
    28.0
}
fn default_lorenz_beta() -> f64 {
    8.0 / 3.0
}
fn default_lorenz_center() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}
fn default_modes() -> usize {
    4
}
fn default_substeps() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    #[serde(flatten)]
    pub system: System,
    /// Fixed initial state, overriding the random draw.
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
    /// Internal integration steps per recorded step.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
}

impl SystemSpec {
    pub fn new(system: System) -> Self {
        Self {
            system,
            initial: None,
            substeps: 1,
        }
    }

    pub fn with_initial(mut self, x0: Vec<f64>) -> Self {
        self.initial = Some(x0);
        self
    }

    pub fn id(&self) -> &'static str {
        match self.system {
            System::DampedOscillator { .. } => "damped_oscillator",
            System::Lorenz63 { .. } => "lorenz63",
            System::Heat1d { .. } => "heat1d",
            System::Heat2d { .. } => "heat2d",
        }
    }

    pub fn dim(&self) -> usize {
        match self.system {
            System::DampedOscillator { .. } => 2,
            System::Lorenz63 { .. } => 3,
            System::Heat1d { n, .. } => n,
            System::Heat2d { n, .. } => n * n,
        }
    }

    pub fn channels(&self) -> usize {
        match self.system {
            System::DampedOscillator { .. } => 2,
            System::Lorenz63 { .. } => 3,
            System::Heat1d { .. } | System::Heat2d { .. } => 1,
        }
    }

    pub fn field_shape(&self) -> Option<(usize, usize)> {
        match self.system {
            System::Heat2d { n, .. } => Some((n, n)),
            _ => None,
        }
    }

    /// Checks grid sizes and the explicit-scheme stability bound for `dt`.
    pub fn validate(&self, dt: f64) -> Result<()> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::param("dt", format!("must be > 0, got {dt}")));
        }
        if self.substeps == 0 {
            return Err(Error::param("substeps", "must be >= 1"));
        }
        let h = dt / self.substeps as f64;
        match self.system {
            System::DampedOscillator {
                omega,
                zeta,
                amp_min,
                amp_max,
            } => {
                if !(omega > 0.0) || !(zeta >= 0.0) {
                    return Err(Error::param("omega", "omega must be > 0 and zeta >= 0"));
                }
                if !(amp_min >= 0.0 && amp_max >= amp_min) {
                    return Err(Error::param("amp_max", "need 0 <= amp_min <= amp_max"));
                }
            }
            System::Lorenz63 { ic_std, .. } => {
                if !(ic_std >= 0.0) {
                    return Err(Error::param("ic_std", "must be >= 0"));
                }
            }
            System::Heat1d { n, kappa, .. } | System::Heat2d { n, kappa, .. } => {
                if n < 4 {
                    return Err(Error::param("n", format!("grid size must be >= 4, got {n}")));
                }
                if !(kappa > 0.0) {
                    return Err(Error::param("kappa", "must be > 0"));
                }
                let dx = 1.0 / n as f64;
                let ratio = kappa * h / (dx * dx);
                let bound = if matches!(self.system, System::Heat1d { .. }) {
                    0.25
                } else {
                    0.125
                };
                if ratio > bound {
                    return Err(Error::Unstable { ratio, bound });
                }
            }
        }
        if let Some(x0) = &self.initial {
            if x0.len() != self.dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.dim(),
                    got: x0.len(),
                });
            }
        }
        Ok(())
    }

    fn draw_initial(&self, rng: &mut Rng) -> Vec<f64> {
        if let Some(x0) = &self.initial {
            return x0.clone();
        }
        match self.system {
            System::DampedOscillator {
                omega,
                amp_min,
                amp_max,
                ..
            } => {
                let amp = amp_min + (amp_max - amp_min) * rng.random::<f64>();
                let phase = std::f64::consts::TAU * rng.random::<f64>();
                vec![amp * phase.cos(), -amp * omega * phase.sin()]
            }
            System::Lorenz63 { center, ic_std, .. } => center
                .iter()
                .map(|c| c + ic_std * rng::normal(rng))
                .collect(),
            System::Heat1d { n, modes, .. } => {
                let amps: Vec<f64> = (0..=modes)
                    .map(|k| rng::normal(rng) / (1.0 + k as f64))
                    .collect();
                (0..n)
                    .map(|i| {
                        let x = (i as f64 + 0.5) / n as f64;
                        amps.iter()
                            .enumerate()
                            .map(|(k, a)| a * (k as f64 * std::f64::consts::PI * x).cos())
                            .sum()
                    })
                    .collect()
            }
            System::Heat2d { n, modes, .. } => {
                let mut amps = vec![vec![0.0; modes + 1]; modes + 1];
                for (k, row) in amps.iter_mut().enumerate() {
                    for (l, a) in row.iter_mut().enumerate() {
                        *a = rng::normal(rng) / (1.0 + (k + l) as f64);
                    }
                }
                let mut field = vec![0.0; n * n];
                for (idx, v) in field.iter_mut().enumerate() {
                    let (r, c) = (idx / n, idx % n);
                    let y = (r as f64 + 0.5) / n as f64;
                    let x = (c as f64 + 0.5) / n as f64;
                    for (k, row) in amps.iter().enumerate() {
                        for (l, a) in row.iter().enumerate() {
                            *v += a
                                * (k as f64 * std::f64::consts::PI * y).cos()
                                * (l as f64 * std::f64::consts::PI * x).cos();
                        }
                    }
                }
                field
            }
        }
    }

    /// Advances `state` by one internal step of size `h`.
    fn step(&self, state: &mut [f64], h: f64) {
        match self.system {
            System::DampedOscillator { omega, zeta, .. } => {
                let f = |s: &[f64]| vec![s[1], -omega * omega * s[0] - 2.0 * zeta * omega * s[1]];
                rk4_step(state, h, f);
            }
            System::Lorenz63 {
                sigma, rho, beta, ..
            } => {
                let f = |s: &[f64]| {
                    vec![
                        sigma * (s[1] - s[0]),
                        s[0] * (rho - s[2]) - s[1],
                        s[0] * s[1] - beta * s[2],
                    ]
                };
                rk4_step(state, h, f);
            }
            System::Heat1d { n, kappa, .. } => {
                let r = kappa * h * (n * n) as f64;
                let old = state.to_vec();
                for i in 0..n {
                    let left = old[i.saturating_sub(1)];
                    let right = old[(i + 1).min(n - 1)];
                    state[i] = old[i] + r * (left - 2.0 * old[i] + right);
                }
            }
            System::Heat2d { n, kappa, .. } => {
                let r = kappa * h * (n * n) as f64;
                let old = state.to_vec();
                let at = |i: usize, j: usize| old[i * n + j];
                for i in 0..n {
                    for j in 0..n {
                        let c = at(i, j);
                        let up = at(i.saturating_sub(1), j);
                        let down = at((i + 1).min(n - 1), j);
                        let left = at(i, j.saturating_sub(1));
                        let right = at(i, (j + 1).min(n - 1));
                        state[i * n + j] = c + r * (up + down + left + right - 4.0 * c);
                    }
                }
            }
        }
    }
}

fn rk4_step<F>(state: &mut [f64], h: f64, f: F)
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let k1 = f(state);
    let probe = |k: &[f64], s: f64| -> Vec<f64> {
        state.iter().zip(k).map(|(x, k)| x + s * h * k).collect()
    };
    let k2 = f(&probe(&k1, 0.5));
    let k3 = f(&probe(&k2, 0.5));
    let k4 = f(&probe(&k3, 1.0));
    for (i, x) in state.iter_mut().enumerate() {
        *x += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Simulates `m` samples spaced `dt` apart, initial state drawn under `seed`.
pub fn simulate(spec: &SystemSpec, seed: u64, m: usize, dt: f64) -> Result<Trajectory> {
    spec.validate(dt)?;
    if m < 3 {
        return Err(Error::TooShort { len: m, min: 3 });
    }
    let mut rng = rng::seeded(seed);
    let mut state = spec.draw_initial(&mut rng);
    let h = dt / spec.substeps as f64;
    let mut states = Vec::with_capacity(m);
    states.push(state.clone());
    for _ in 1..m {
        for _ in 0..spec.substeps {
            spec.step(&mut state, h);
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("simulated state"));
        }
        states.push(state.clone());
    }
    Ok(Trajectory {
        times: (0..m).map(|i| i as f64 * dt).collect(),
        states,
        system_id: spec.id().to_string(),
        dt,
        channels: spec.channels(),
        field_shape: spec.field_shape(),
    })
}

/// Simulates `count` trajectories with seeds derived from `seed`.
pub fn simulate_corpus(
    spec: &SystemSpec,
    seed: u64,
    count: usize,
    m: usize,
    dt: f64,
) -> Result<Vec<Trajectory>> {
    use rayon::prelude::*;
    (0..count as u64)
        .into_par_iter()
        .map(|i| simulate(spec, rng::derive_seed(seed, &[i]), m, dt))
        .collect()
}

/// Per-channel standardization followed by scaling into `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub channels: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Training-set max absolute standardized value per channel.
    pub scale: Vec<f64>,
}

impl Normalizer {
    pub fn identity(channels: usize) -> Self {
        Self {
            channels,
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            scale: vec![1.0; channels],
        }
    }

    pub fn fit(trajs: &[Trajectory]) -> Result<Self> {
        let first = trajs.first().ok_or(Error::Empty("trajectory list"))?;
        let (channels, d) = (first.channels, first.dim());
        if channels == 0 || d % channels != 0 {
            return Err(Error::param("channels", "state dimension must be a multiple of channels"));
        }
        let per = d / channels;
        let mut sum = vec![0.0; channels];
        let mut count = 0usize;
        for tr in trajs {
            if tr.dim() != d || tr.channels != channels {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: tr.dim(),
                });
            }
            for x in &tr.states {
                for (ch, s) in sum.iter_mut().enumerate() {
                    *s += x[ch * per..(ch + 1) * per].iter().sum::<f64>();
                }
                count += per;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; channels];
        for x in trajs.iter().flat_map(|t| &t.states) {
            for (ch, s) in sq.iter_mut().enumerate() {
                *s += x[ch * per..(ch + 1) * per]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        let std: Vec<f64> = sq
            .iter()
            .map(|s| {
                let v = (s / count as f64).sqrt();
                if v > 0.0 {
                    v
                } else {
                    1.0
                }
            })
            .collect();
        let mut scale = vec![0.0f64; channels];
        for x in trajs.iter().flat_map(|t| &t.states) {
            for (ch, sc) in scale.iter_mut().enumerate() {
                for v in &x[ch * per..(ch + 1) * per] {
                    *sc = sc.max(((v - mean[ch]) / std[ch]).abs());
                }
            }
        }
        for sc in &mut scale {
            if *sc == 0.0 {
                *sc = 1.0;
            }
        }
        Ok(Self {
            channels,
            mean,
            std,
            scale,
        })
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        let per = x.len() / self.channels;
        x.iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = i / per;
                (v - self.mean[ch]) / self.std[ch] / self.scale[ch]
            })
            .collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        let per = x.len() / self.channels;
        x.iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = i / per;
                v * self.scale[ch] * self.std[ch] + self.mean[ch]
            })
            .collect()
    }

    pub fn normalize_trajectory(&self, tr: &Trajectory) -> Trajectory {
        Trajectory {
            states: tr.states.iter().map(|x| self.normalize(x)).collect(),
            ..tr.clone()
        }
    }
}

/// A conditioning prefix and the states to forecast after it.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastSample {
    pub prefix: Vec<Vec<f64>>,
    pub suffix: Vec<Vec<f64>>,
}

/// Normalized forecasting samples plus the normalization that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub k: usize,
    pub l: usize,
    pub normalizer: Normalizer,
    /// Full normalized trajectories, used for training.
    pub sequences: Vec<Vec<Vec<f64>>>,
    pub samples: Vec<ForecastSample>,
    pub field_shape: Option<(usize, usize)>,
}

impl DatasetSpec {
    /// Applies this dataset's normalization to other trajectories, e.g. a test split.
    pub fn with_normalizer(&self, trajs: &[Trajectory]) -> Result<DatasetSpec> {
        split(trajs, self.k, self.l, self.normalizer.clone())
    }
}

fn split(trajs: &[Trajectory], k: usize, l: usize, normalizer: Normalizer) -> Result<DatasetSpec> {
    if k < 2 {
        return Err(Error::param("k", format!("conditioning length must be >= 2, got {k}")));
    }
    if l < 1 {
        return Err(Error::param("l", "horizon must be >= 1"));
    }
    let mut sequences = Vec::with_capacity(trajs.len());
    let mut samples = Vec::with_capacity(trajs.len());
    for tr in trajs {
        if k + l > tr.len() {
            return Err(Error::param(
                "l",
                format!("k + l = {} exceeds trajectory length {}", k + l, tr.len()),
            ));
        }
        let normed = normalizer.normalize_trajectory(tr).states;
        samples.push(ForecastSample {
            prefix: normed[..k].to_vec(),
            suffix: normed[k..k + l].to_vec(),
        });
        sequences.push(normed);
    }
    Ok(DatasetSpec {
        k,
        l,
        normalizer,
        sequences,
        samples,
        field_shape: trajs.first().and_then(|t| t.field_shape),
    })
}

/// Splits each trajectory into `k` conditioning states and `l` targets, with
/// normalization statistics taken from `trajs`.
pub fn build_dataset(trajs: &[Trajectory], k: usize, l: usize) -> Result<DatasetSpec> {
    let normalizer = Normalizer::fit(trajs)?;
    split(trajs, k, l, normalizer)
}
