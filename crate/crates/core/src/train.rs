//! Conditional flow matching on latent sequences.
//!
//! Each example picks a target index `tau`, a flow time `t`, a point on the
//! conditional path between `z^{tau-1}` and `z^tau`, and an earlier
//! conditioning state `z^c`. The model sees `(Z, z^{tau-1}, z^c, tau - c, t)`.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::LinearCodec;
use crate::dynamics::DatasetSpec;
use crate::error::{Error, Result};
use crate::model::{Example, VectorFieldModel};
use crate::path::{self, ConditionPair, LossKind, PathSchedule, PathSpec};
use crate::rng::{self, Rng};

/// Training aborts once the batch loss exceeds this.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Per-example weight of the score loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreWeighting {
    /// `lambda(t) = c_t^2`, which makes the loss scale like the noise loss.
    #[default]
    Variance,
    /// `lambda(t) = beta(1 - t)`; only defined for the vp schedule.
    ScoreFlow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default)]
    pub score_weighting: ScoreWeighting,
}

fn default_batch() -> usize {
    32
}

fn default_lr() -> f64 {
    1e-3
}

fn default_warmup() -> f64 {
    0.05
}

impl TrainConfig {
    pub fn new(iterations: usize) -> Self {
        Self {
            iterations,
            batch_size: default_batch(),
            lr: default_lr(),
            warmup_frac: default_warmup(),
            seed: 0,
            loss: LossKind::Flow,
            score_weighting: ScoreWeighting::Variance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param("lr", format!("must be > 0, got {}", self.lr)));
        }
        if !(0.0..=0.5).contains(&self.warmup_frac) {
            return Err(Error::param(
                "warmup_frac",
                format!("must be in [0, 0.5], got {}", self.warmup_frac),
            ));
        }
        Ok(())
    }

    fn warmup_iters(&self) -> usize {
        (self.warmup_frac * self.iterations as f64).round() as usize
    }

    /// Linear warmup from 0, then cosine decay to 0 at the last iteration.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let warm = self.warmup_iters();
        if iteration < warm {
            return self.lr * iteration as f64 / warm as f64;
        }
        let span = self.iterations.saturating_sub(warm).max(1) as f64;
        let progress = ((iteration - warm) as f64 / span).min(1.0);
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Loss curve and final parameters of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainTrace {
    pub seed: u64,
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    /// Wall-clock milliseconds since the start of training, per iteration.
    pub wall_ms: Vec<f64>,
    /// Iterations that make up one epoch (one per training trajectory).
    pub iterations_per_epoch: usize,
    pub model: VectorFieldModel,
}

impl TrainTrace {
    pub fn epochs(&self) -> f64 {
        self.losses.len() as f64 / self.iterations_per_epoch.max(1) as f64
    }

    /// CSV with columns `iteration,loss,lr,wall_ms`. With `wall_clock = false`
    /// the timing column is left empty so the output is reproducible.
    pub fn to_csv(&self, wall_clock: bool) -> String {
        let mut out = String::from("iteration,loss,lr,wall_ms\n");
        for (i, (loss, lr)) in self.losses.iter().zip(&self.lrs).enumerate() {
            let wall = if wall_clock {
                format!("{:.3}", self.wall_ms[i])
            } else {
                String::new()
            };
            let _ = writeln!(out, "{i},{loss},{lr},{wall}");
        }
        out
    }

    /// Mean of the last `n` losses.
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        let n = n.min(self.losses.len());
        (n > 0).then(|| self.losses[self.losses.len() - n..].iter().sum::<f64>() / n as f64)
    }
}

/// First iteration at which the trailing `window`-mean of `losses` is at most `level`.
pub fn iterations_to_level(losses: &[f64], level: f64, window: usize) -> Option<usize> {
    let window = window.max(1);
    let mut sum = 0.0;
    for (i, l) in losses.iter().enumerate() {
        sum += l;
        if i >= window {
            sum -= losses[i - window];
        }
        if i + 1 >= window && sum / window as f64 <= level {
            return Some(i + 1);
        }
    }
    None
}

fn loss_weight(
    schedule: &PathSchedule,
    kind: LossKind,
    weighting: ScoreWeighting,
    t: f64,
) -> Result<f64> {
    match (kind, weighting) {
        (LossKind::Score, ScoreWeighting::Variance) => Ok(schedule.c(t).powi(2)),
        (LossKind::Score, ScoreWeighting::ScoreFlow) => match *schedule.spec() {
            PathSpec::Vp { beta_min, beta_max } => Ok(beta_min + (1.0 - t) * (beta_max - beta_min)),
            _ => Err(Error::param(
                "train.score_weighting",
                "score_flow weighting needs the vp schedule",
            )),
        },
        _ => Ok(1.0),
    }
}

/// Draws one training example from a latent sequence.
pub fn draw_example(
    seq: &[Vec<f64>],
    schedule: &PathSchedule,
    kind: LossKind,
    weighting: ScoreWeighting,
    rng: &mut Rng,
) -> Result<Example> {
    if seq.len() < 3 {
        return Err(Error::TooShort {
            len: seq.len(),
            min: 3,
        });
    }
    // Zero-based: target at `tau`, so tau - 1 >= 1 leaves room for a condition.
    let tau = rng.random_range(2..seq.len());
    let (lo, hi) = schedule.time_range();
    let t = lo + (hi - lo) * rng.random::<f64>();
    let pair = ConditionPair::new(seq[tau - 1].clone(), seq[tau].clone())?;
    let pt = path::sample_point(schedule, &pair, t, rng)?;
    let target = path::regression_target(schedule, &pair, &pt, kind)?;
    let c = rng.random_range(0..tau - 1);
    Ok(Example {
        z: pt.z,
        z_ref: pair.z0,
        z_cond: seq[c].clone(),
        gap: tau - c,
        t,
        target,
        weight: loss_weight(schedule, kind, weighting, t)?,
    })
}

/// One stochastic flow-matching step on a single data trajectory.
pub fn cfm_step(
    model: &VectorFieldModel,
    codec: &LinearCodec,
    states: &[Vec<f64>],
    schedule: &PathSchedule,
    kind: LossKind,
    rng: &mut Rng,
) -> Result<(f64, Vec<f64>)> {
    let latent = codec.encode_all(states)?;
    let ex = draw_example(&latent, schedule, kind, ScoreWeighting::Variance, rng)?;
    model.loss_and_grad(&[ex])
}

/// Monte Carlo estimate of the zero model's loss, `E[w |target|^2]`, with its standard error.
pub fn zero_model_baseline(
    sequences: &[Vec<Vec<f64>>],
    schedule: &PathSchedule,
    kind: LossKind,
    weighting: ScoreWeighting,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if sequences.is_empty() || samples < 2 {
        return Err(Error::Empty("baseline samples"));
    }
    let values: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::derived(seed, &[i as u64]);
            let seq = &sequences[r.random_range(0..sequences.len())];
            let ex = draw_example(seq, schedule, kind, weighting, &mut r)?;
            Ok(ex.weight * ex.target.iter().map(|v| v * v).sum::<f64>())
        })
        .collect::<Result<_>>()?;
    let n = samples as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Encodes every training sequence of `dataset` with `codec`.
pub fn encode_sequences(dataset: &DatasetSpec, codec: &LinearCodec) -> Result<Vec<Vec<Vec<f64>>>> {
    dataset
        .sequences
        .iter()
        .map(|s| codec.encode_all(s))
        .collect()
}

/// Runs `cfg.iterations` Adam steps starting from `model`.
pub fn train(
    cfg: &TrainConfig,
    model: VectorFieldModel,
    dataset: &DatasetSpec,
    codec: &LinearCodec,
    schedule: &PathSchedule,
) -> Result<TrainTrace> {
    train_with(cfg, model, dataset, codec, schedule, |_, _| Ok(()))
}

/// Like [`train`], calling `on_iteration(i, model)` after every update.
pub fn train_with<F>(
    cfg: &TrainConfig,
    mut model: VectorFieldModel,
    dataset: &DatasetSpec,
    codec: &LinearCodec,
    schedule: &PathSchedule,
    mut on_iteration: F,
) -> Result<TrainTrace>
where
    F: FnMut(usize, &VectorFieldModel) -> Result<()>,
{
    cfg.validate()?;
    if dataset.sequences.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    if codec.p() != model.config().latent_dim {
        return Err(Error::DimensionMismatch {
            expected: model.config().latent_dim,
            got: codec.p(),
        });
    }
    let sequences = encode_sequences(dataset, codec)?;
    if let Some(short) = sequences.iter().find(|s| s.len() < 3) {
        return Err(Error::TooShort {
            len: short.len(),
            min: 3,
        });
    }
    loss_weight(schedule, cfg.loss, cfg.score_weighting, 0.5)?;

    let mut adam = Adam::new(model.num_params());
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut lrs = Vec::with_capacity(cfg.iterations);
    let mut wall_ms = Vec::with_capacity(cfg.iterations);
    let start = Instant::now();
    for it in 0..cfg.iterations {
        let batch: Vec<Example> = (0..cfg.batch_size)
            .into_par_iter()
            .map(|e| {
                let mut r = rng::derived(cfg.seed, &[it as u64, e as u64]);
                let seq = &sequences[r.random_range(0..sequences.len())];
                draw_example(seq, schedule, cfg.loss, cfg.score_weighting, &mut r)
            })
            .collect::<Result<_>>()?;
        let (loss, grad) = model.loss_and_grad(&batch)?;
        if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
            return Err(Error::Diverged {
                iteration: it,
                loss,
            });
        }
        let lr = cfg.lr_at(it);
        adam.update(model.params_mut(), &grad, lr);
        losses.push(loss);
        lrs.push(lr);
        wall_ms.push(start.elapsed().as_secs_f64() * 1e3);
        on_iteration(it, &model)?;
    }
    Ok(TrainTrace {
        seed: cfg.seed,
        losses,
        lrs,
        wall_ms,
        iterations_per_epoch: dataset.sequences.len(),
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TimeEmbedding};

    fn line_sequence(m: usize, p: usize) -> Vec<Vec<f64>> {
        (0..m)
            .map(|i| (0..p).map(|j| (i as f64 * 0.3 + j as f64).sin()).collect())
            .collect()
    }

    fn bridge() -> PathSchedule {
        PathSchedule::new(PathSpec::Bridge {
            sigma_min: 0.001,
            sigma: 0.01,
        })
        .unwrap()
    }

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = TrainConfig {
            warmup_frac: 0.1,
            ..TrainConfig::new(100)
        };
        assert_eq!(cfg.lr_at(0), 0.0);
        assert!((cfg.lr_at(10) - cfg.lr).abs() < 1e-15);
        assert!(cfg.lr_at(5) > 0.0 && cfg.lr_at(5) < cfg.lr);
        assert!(cfg.lr_at(99) < 1e-3 * cfg.lr);
        assert!(cfg.lr_at(100).abs() < 1e-15);
        let flat = TrainConfig {
            warmup_frac: 0.0,
            ..TrainConfig::new(100)
        };
        assert_eq!(flat.lr_at(0), flat.lr);
    }

    #[test]
    fn shortest_sequence_fixes_indices() {
        let seq = line_sequence(3, 2);
        let mut r = rng::seeded(0);
        for _ in 0..50 {
            let ex = draw_example(&seq, &bridge(), LossKind::Flow, ScoreWeighting::Variance, &mut r)
                .unwrap();
            assert_eq!(ex.z_ref, seq[1]);
            assert_eq!(ex.z_cond, seq[0]);
            assert_eq!(ex.gap, 2);
        }
    }

    #[test]
    fn indices_cover_allowed_ranges() {
        let seq: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let mut r = rng::seeded(1);
        let mut seen_ref = [false; 6];
        let mut max_gap = 0;
        for _ in 0..2000 {
            let ex = draw_example(&seq, &bridge(), LossKind::Flow, ScoreWeighting::Variance, &mut r)
                .unwrap();
            let tau_minus_1 = ex.z_ref[0] as usize;
            let c = ex.z_cond[0] as usize;
            seen_ref[tau_minus_1] = true;
            assert!(c < tau_minus_1);
            assert_eq!(ex.gap, tau_minus_1 + 1 - c);
            max_gap = max_gap.max(ex.gap);
        }
        assert_eq!(seen_ref, [false, true, true, true, true, false]);
        assert_eq!(max_gap, 5);
    }

    #[test]
    fn too_short_sequence_rejected() {
        let mut r = rng::seeded(0);
        let err = draw_example(&line_sequence(2, 1), &bridge(), LossKind::Flow, ScoreWeighting::Variance, &mut r);
        assert!(matches!(err, Err(Error::TooShort { len: 2, min: 3 })));
    }

    #[test]
    fn score_flow_weighting_needs_vp() {
        let mut r = rng::seeded(0);
        let seq = line_sequence(4, 1);
        assert!(draw_example(&seq, &bridge(), LossKind::Score, ScoreWeighting::ScoreFlow, &mut r).is_err());
        let vp = PathSchedule::new(PathSpec::Vp { beta_min: 0.1, beta_max: 20.0 }).unwrap();
        let ex = draw_example(&seq, &vp, LossKind::Score, ScoreWeighting::ScoreFlow, &mut r).unwrap();
        assert!((ex.weight - (0.1 + (1.0 - ex.t) * 19.9)).abs() < 1e-12);
    }

    #[test]
    fn iterations_to_level_uses_trailing_window() {
        let losses = [4.0, 4.0, 2.0, 1.0, 1.0, 0.5];
        assert_eq!(iterations_to_level(&losses, 1.5, 2), Some(4));
        assert_eq!(iterations_to_level(&losses, 0.1, 2), None);
        assert_eq!(iterations_to_level(&losses, 4.0, 1), Some(1));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(2);
        let mut p = [1.0, -1.0];
        adam.update(&mut p, &[0.5, -2.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn csv_layout() {
        let model = VectorFieldModel::zeros(ModelConfig {
            latent_dim: 1,
            width: 2,
            depth: 1,
            activation: Default::default(),
            time_embedding: TimeEmbedding::flow_time(2),
            gap_embedding: TimeEmbedding::gap(2),
        })
        .unwrap();
        let trace = TrainTrace {
            seed: 0,
            losses: vec![1.5, 0.25],
            lrs: vec![0.0, 0.001],
            wall_ms: vec![1.0, 2.0],
            iterations_per_epoch: 1,
            model,
        };
        assert_eq!(trace.to_csv(false), "iteration,loss,lr,wall_ms\n0,1.5,0,\n1,0.25,0.001,\n");
        assert!(trace.to_csv(true).contains("1,0.25,0.001,2.000"));
        assert_eq!(trace.tail_mean(1), Some(0.25));
        assert_eq!(trace.epochs(), 2.0);
    }
}
