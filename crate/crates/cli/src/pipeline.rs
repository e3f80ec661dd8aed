//! Pipeline stages over one output directory. Each stage records a
//! fingerprint of the configuration it depends on; a stage whose record is
//! missing or stale is rerun before anything downstream of it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use bridgeflow::analysis::{self, CheckOutcome};
use bridgeflow::codec::{self, LinearCodec};
use bridgeflow::dynamics::{self, DatasetSpec, Trajectory};
use bridgeflow::metrics::{self, MetricSet};
use bridgeflow::model::VectorFieldModel;
use bridgeflow::path::PathSchedule;
use bridgeflow::rng::derive_seed;
use bridgeflow::sampler::{self, ForecastReport, SamplerConfig, Truth};
use bridgeflow::tensor_file;
use bridgeflow::train::{self, TrainTrace};
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::config::{fingerprint, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::{Manifest, StageRecord};

pub const TRAIN_DATA: &str = "data/train";
pub const TEST_DATA: &str = "data/test";
pub const CODEC: &str = "codec";
pub const MODEL: &str = "model";
pub const TRAIN_TRACE: &str = "train_trace.csv";
pub const FORECAST_METRICS: &str = "forecast/metrics.csv";
pub const FORECAST_ENSEMBLE: &str = "forecast/ensemble";
pub const METRICS_STEPS: &str = "metrics/metrics.csv";
pub const METRICS_SAMPLES: &str = "metrics/per_sample.csv";
pub const SWEEP_TABLE: &str = "sweep/sweep.csv";
pub const VERIFY_CHECKS: &str = "verify/checks.csv";
pub const VERIFY_SUMMARY: &str = "verify/summary.txt";

/// Monte Carlo draws for the zero-model baseline loss.
const BASELINE_SAMPLES: usize = 10_000;

/// Seed streams derived from the global seed.
mod stream {
    pub const TRAIN_CORPUS: u64 = 1;
    pub const TEST_CORPUS: u64 = 2;
    pub const MODEL_INIT: u64 = 3;
    pub const TRAINING: u64 = 4;
    pub const SAMPLING: u64 = 5;
    pub const BASELINE: u64 = 6;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Data,
    Codec,
    Train,
    Forecast,
    Metrics,
    Sweep,
    Verify,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Data,
        Stage::Codec,
        Stage::Train,
        Stage::Forecast,
        Stage::Metrics,
        Stage::Sweep,
        Stage::Verify,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "gen-data",
            Stage::Codec => "fit-codec",
            Stage::Train => "train",
            Stage::Forecast => "forecast",
            Stage::Metrics => "metrics",
            Stage::Sweep => "sweep",
            Stage::Verify => "verify",
        }
    }
}

pub struct Pipeline {
    cfg: ExperimentConfig,
    dir: PathBuf,
    manifest: Manifest,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, dir: impl Into<PathBuf>) -> CliResult<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let manifest = Manifest::open(&dir, &cfg);
        let mut p = Self { cfg, dir, manifest };
        // Records made under a different configuration no longer describe this run.
        let current: Vec<(String, String)> = Stage::ALL
            .iter()
            .map(|s| (s.name().to_string(), p.fingerprint(*s)))
            .collect();
        p.manifest
            .stages
            .retain(|name, r| current.iter().any(|(n, f)| n == name && *f == r.fingerprint));
        Ok(p)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn seed(&self, stream: u64) -> u64 {
        derive_seed(self.cfg.seed, &[stream])
    }

    fn fingerprint(&self, stage: Stage) -> String {
        let c = &self.cfg;
        let data = json!({ "seed": c.seed, "system": c.system, "data": c.data });
        let codec = json!({ "data": data, "codec": c.codec });
        let train = json!({ "codec": codec, "path": c.path, "model": c.model, "train": c.train });
        let value = match stage {
            Stage::Data => data,
            Stage::Codec => codec,
            Stage::Train => train,
            Stage::Forecast | Stage::Metrics => {
                json!({ "train": train, "sampler": c.sampler, "metrics": c.metrics, "stage": stage.name() })
            }
            Stage::Sweep => json!({
                "train": train, "sampler": c.sampler, "metrics": c.metrics, "sweep": c.sweep
            }),
            Stage::Verify => json!({ "seed": c.seed, "verify": c.verify }),
        };
        fingerprint(&value)
    }

    /// Runs `stage` unless its recorded outputs are current.
    pub fn ensure(&mut self, stage: Stage) -> CliResult<()> {
        if self.manifest.is_fresh(&self.dir, stage.name(), &self.fingerprint(stage)) {
            return Ok(());
        }
        self.run(stage)
    }

    /// Runs `stage` unconditionally, bringing its inputs up to date first.
    pub fn run(&mut self, stage: Stage) -> CliResult<()> {
        match stage {
            Stage::Data => self.gen_data(),
            Stage::Codec => self.fit_codec(),
            Stage::Train => self.train(),
            Stage::Forecast => self.forecast(),
            Stage::Metrics => self.metrics(),
            Stage::Sweep => self.sweep(),
            Stage::Verify => self.verify().map(|_| ()),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn write_text(&self, rel: &str, text: &str) -> CliResult<String> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(rel.to_string())
    }

    fn tensor_outputs(rel: &str) -> [String; 2] {
        [format!("{rel}.bin"), format!("{rel}.json")]
    }

    fn record(&mut self, stage: Stage, outputs: Vec<String>, summary: Value) -> CliResult<()> {
        let record = StageRecord {
            fingerprint: self.fingerprint(stage),
            outputs,
            summary,
        };
        self.manifest.stages.insert(stage.name().to_string(), record);
        self.manifest.save(&self.dir)
    }

    pub fn gen_data(&mut self) -> CliResult<()> {
        let (sys, d) = (&self.cfg.system, &self.cfg.data);
        let train = dynamics::simulate_corpus(sys, self.seed(stream::TRAIN_CORPUS), d.train_trajectories, d.steps, d.dt)?;
        let test = dynamics::simulate_corpus(sys, self.seed(stream::TEST_CORPUS), d.test_trajectories, d.steps, d.dt)?;
        tensor_file::save_trajectories(&self.path(TRAIN_DATA), &train)?;
        tensor_file::save_trajectories(&self.path(TEST_DATA), &test)?;
        let mut outputs = Vec::new();
        outputs.extend(Self::tensor_outputs(TRAIN_DATA));
        outputs.extend(Self::tensor_outputs(TEST_DATA));
        let summary = json!({
            "system": sys.id(), "dim": sys.dim(),
            "train_trajectories": train.len(), "test_trajectories": test.len(), "steps": d.steps,
        });
        eprintln!("gen-data: {} train + {} test {} trajectories of {} steps", train.len(), test.len(), sys.id(), d.steps);
        self.record(Stage::Data, outputs, summary)
    }

    fn load_trajectories(&mut self) -> CliResult<(Vec<Trajectory>, Vec<Trajectory>)> {
        self.ensure(Stage::Data)?;
        Ok((
            tensor_file::load_trajectories(&self.path(TRAIN_DATA))?,
            tensor_file::load_trajectories(&self.path(TEST_DATA))?,
        ))
    }

    /// Normalized training set and the test set under the same normalization.
    fn datasets(&mut self) -> CliResult<(DatasetSpec, DatasetSpec)> {
        let (train, test) = self.load_trajectories()?;
        let (k, l) = (self.cfg.data.k, self.cfg.data.l);
        let ds = dynamics::build_dataset(&train, k, l)?;
        let test = ds.with_normalizer(&test)?;
        Ok((ds, test))
    }

    pub fn fit_codec(&mut self) -> CliResult<()> {
        let (ds, test) = self.datasets()?;
        let states: Vec<Vec<f64>> = ds.sequences.iter().flatten().cloned().collect();
        let codec = codec::fit(&states, self.cfg.latent_dim())?;
        tensor_file::save_codec(&self.path(CODEC), &codec)?;
        let test_states: Vec<Vec<f64>> = test.sequences.iter().flatten().cloned().collect();
        let train_mse = codec.reconstruction_mse(&states)?;
        let test_mse = codec.reconstruction_mse(&test_states)?;
        eprintln!("fit-codec: p = {}, reconstruction mse {train_mse:.3e} (train) {test_mse:.3e} (test)", codec.p());
        let summary = json!({ "p": codec.p(), "train_mse": train_mse, "test_mse": test_mse });
        self.record(Stage::Codec, Self::tensor_outputs(CODEC).to_vec(), summary)
    }

    fn load_codec(&mut self) -> CliResult<LinearCodec> {
        self.ensure(Stage::Codec)?;
        Ok(tensor_file::load_codec(&self.path(CODEC))?)
    }

    /// Trains a fresh model on `cfg`'s path, calling `checkpoint` after each update.
    fn fit_model<F>(&mut self, cfg: &ExperimentConfig, checkpoint: F) -> CliResult<(TrainTrace, PathSchedule, LinearCodec)>
    where
        F: FnMut(usize, &VectorFieldModel) -> bridgeflow::Result<()>,
    {
        let (ds, _) = self.datasets()?;
        let codec = self.load_codec()?;
        let schedule = cfg.schedule()?;
        let model = VectorFieldModel::init(cfg.model_config(), self.seed(stream::MODEL_INIT))?;
        let train_cfg = cfg.train_config(self.seed(stream::TRAINING));
        let trace = train::train_with(&train_cfg, model, &ds, &codec, &schedule, checkpoint)?;
        Ok((trace, schedule, codec))
    }

    pub fn train(&mut self) -> CliResult<()> {
        let cfg = self.cfg.clone();
        let every = cfg.train.checkpoint_every;
        let ckpt_dir = self.path("checkpoints");
        let init = VectorFieldModel::init(cfg.model_config(), self.seed(stream::MODEL_INIT))?;
        let mut outputs = Vec::new();
        let ckpt = |it: usize| format!("checkpoints/iter_{it:06}");
        tensor_file::save_model(&ckpt_dir.join(format!("iter_{:06}", 0)), &init)?;
        outputs.extend(Self::tensor_outputs(&ckpt(0)));
        let mut saved = vec![0];
        let (trace, schedule, codec) = self.fit_model(&cfg, |it, model| {
            let done = it + 1;
            if every > 0 && done % every == 0 {
                tensor_file::save_model(&ckpt_dir.join(format!("iter_{done:06}")), model)?;
                saved.push(done);
            }
            Ok(())
        })?;
        let last = cfg.train.iterations;
        if saved.last() != Some(&last) {
            tensor_file::save_model(&ckpt_dir.join(format!("iter_{last:06}")), &trace.model)?;
            saved.push(last);
        }
        for &it in &saved[1..] {
            outputs.extend(Self::tensor_outputs(&ckpt(it)));
        }
        tensor_file::save_model(&self.path(MODEL), &trace.model)?;
        outputs.extend(Self::tensor_outputs(MODEL));
        outputs.push(self.write_text(TRAIN_TRACE, &trace.to_csv(true))?);

        let (ds, _) = self.datasets()?;
        let sequences = train::encode_sequences(&ds, &codec)?;
        let (baseline, baseline_se) = train::zero_model_baseline(
            &sequences,
            &schedule,
            cfg.train.loss,
            cfg.train.score_weighting,
            BASELINE_SAMPLES,
            self.seed(stream::BASELINE),
        )?;
        let tail = trace.tail_mean(100);
        let half = train::iterations_to_level(&trace.losses, 0.5 * baseline, 50);
        match tail {
            Some(t) => eprintln!(
                "train: {} iterations ({:.1} epochs) on {}, last-100 loss {t:.4e} = {:.3} x zero-model baseline",
                last,
                trace.epochs(),
                schedule.name(),
                t / baseline
            ),
            None => eprintln!("train: 0 iterations, wrote the initialization checkpoint"),
        }
        let summary = json!({
            "iterations": last,
            "epochs": trace.epochs(),
            "path": schedule.to_string(),
            "baseline_loss": baseline,
            "baseline_se": baseline_se,
            "final_loss_tail100": tail,
            "iterations_to_half_baseline": half,
        });
        self.record(Stage::Train, outputs, summary)
    }

    fn load_model(&mut self) -> CliResult<VectorFieldModel> {
        self.ensure(Stage::Train)?;
        Ok(tensor_file::load_model(&self.path(MODEL))?)
    }

    pub fn forecast(&mut self) -> CliResult<()> {
        self.cfg.require_flow_loss()?;
        let (_, test) = self.datasets()?;
        let codec = self.load_codec()?;
        let model = self.load_model()?;
        let schedule = self.cfg.schedule()?;
        let base = self.cfg.sampler_config(self.seed(stream::SAMPLING));
        let range = self.cfg.metrics.data_range;
        let reports = evaluate(&model, &codec, &schedule, &test, &base, range)?;
        let per_step = mean_per_step(&reports)?;
        let overall = MetricSet::mean(&per_step)?;

        let (n, e, l, d) = (reports.len(), base.ensemble, test.l, codec.d());
        let mut data = Vec::with_capacity(n * e * l * d);
        for r in &reports {
            data.extend(r.members.iter().flatten().flatten());
        }
        let mut attrs = Map::new();
        attrs.insert("units".into(), json!("normalized"));
        attrs.insert("data_range".into(), json!(range));
        attrs.insert("layout".into(), json!("sample, member, step, state"));
        tensor_file::write(&self.path(FORECAST_ENSEMBLE), "forecast_ensemble", &[n, e, l, d], &data, attrs)?;
        let mut outputs = Self::tensor_outputs(FORECAST_ENSEMBLE).to_vec();
        outputs.push(self.write_text(FORECAST_METRICS, &sampler::metrics_csv(&per_step))?);
        eprintln!(
            "forecast: {n} samples x {e} members x {l} steps ({} N = {}), rfne {:.4e}, mse {:.4e}, psnr {:.2} dB (range {range})",
            base.scheme.name(),
            base.steps,
            overall.rfne,
            overall.mse,
            overall.psnr
        );
        let summary = json!({ "overall": overall, "data_range": range, "samples": n, "ensemble": e, "horizon": l });
        self.record(Stage::Forecast, outputs, summary)
    }

    /// Recomputes metrics from the stored ensemble.
    pub fn metrics(&mut self) -> CliResult<()> {
        self.ensure(Stage::Forecast)?;
        let (_, test) = self.datasets()?;
        let t = tensor_file::read(&self.path(FORECAST_ENSEMBLE))?;
        let [n, e, l, d] = t.meta.shape[..] else {
            return Err(bridgeflow::Error::TensorFile {
                path: FORECAST_ENSEMBLE.into(),
                reason: format!("expected a 4-d tensor, got shape {:?}", t.meta.shape),
            }
            .into());
        };
        if n != test.samples.len() || l > test.l {
            return Err(bridgeflow::Error::DimensionMismatch {
                expected: test.samples.len(),
                got: n,
            }
            .into());
        }
        let range = self.cfg.metrics.data_range;
        let member = |i: usize, m: usize, s: usize| {
            let off = ((i * e + m) * l + s) * d;
            &t.data[off..off + d]
        };
        let per_sample: Vec<Vec<MetricSet>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (0..l)
                    .map(|s| {
                        let sets = (0..e)
                            .map(|m| metrics::compute(member(i, m, s), &test.samples[i].suffix[s], range, test.field_shape))
                            .collect::<bridgeflow::Result<Vec<_>>>()?;
                        MetricSet::mean(&sets)
                    })
                    .collect()
            })
            .collect::<bridgeflow::Result<_>>()?;
        let per_step: Vec<MetricSet> = (0..l)
            .map(|s| MetricSet::mean(&per_sample.iter().map(|r| r[s]).collect::<Vec<_>>()))
            .collect::<bridgeflow::Result<_>>()?;
        let mut table = String::from("sample,step,mse,rfne,psnr,ssim,pearson\n");
        for (i, rows) in per_sample.iter().enumerate() {
            for (s, m) in rows.iter().enumerate() {
                let pearson = m.pearson.map(|p| p.to_string()).unwrap_or_default();
                let _ = writeln!(table, "{i},{},{},{},{},{},{pearson}", s + 1, m.mse, m.rfne, m.psnr, m.ssim);
            }
        }
        let overall = MetricSet::mean(&per_step)?;
        let outputs = vec![
            self.write_text(METRICS_STEPS, &sampler::metrics_csv(&per_step))?,
            self.write_text(METRICS_SAMPLES, &table)?,
        ];
        println!(
            "mse {:.6e}  rfne {:.6e}  psnr {:.3} dB  ssim {:.6}  pearson {}  (data range {range})",
            overall.mse,
            overall.rfne,
            overall.psnr,
            overall.ssim,
            overall.pearson.map(|p| format!("{p:.6}")).unwrap_or_else(|| "undefined".into())
        );
        self.record(Stage::Metrics, outputs, json!({ "overall": overall, "data_range": range }))
    }

    /// Retrains per bridge `sigma` and evaluates every scheme and step count.
    pub fn sweep(&mut self) -> CliResult<()> {
        self.cfg.validate_sweep()?;
        let (_, test) = self.datasets()?;
        let range = self.cfg.metrics.data_range;
        let grid = self.cfg.sweep.clone();
        let mut table = String::from("sigma,scheme,steps,mse,rfne,psnr,ssim\n");
        for &sigma in &grid.sigmas {
            let cfg = self.cfg.with_bridge_sigma(sigma);
            let (trace, schedule, codec) = self.fit_model(&cfg, |_, _| Ok(()))?;
            for &scheme in &grid.schemes {
                for &steps in &grid.steps {
                    let sc = SamplerConfig {
                        scheme,
                        steps,
                        grid: None,
                        ..cfg.sampler_config(self.seed(stream::SAMPLING))
                    };
                    let reports = evaluate(&trace.model, &codec, &schedule, &test, &sc, range)?;
                    let m = MetricSet::mean(&mean_per_step(&reports)?)?;
                    let _ = writeln!(table, "{sigma},{},{steps},{},{},{},{}", scheme.name(), m.mse, m.rfne, m.psnr, m.ssim);
                    eprintln!("sweep: sigma {sigma} {} N = {steps}: rfne {:.4e}", scheme.name(), m.rfne);
                }
            }
        }
        let rows = grid.sigmas.len() * grid.schemes.len() * grid.steps.len();
        let outputs = vec![self.write_text(SWEEP_TABLE, &table)?];
        self.record(Stage::Sweep, outputs, json!({ "rows": rows, "data_range": range }))
    }

    /// Runs the verification suite; fails when any gating check fails.
    pub fn verify(&mut self) -> CliResult<Vec<CheckOutcome>> {
        let outcomes = analysis::run_suite(&self.cfg.verify)?;
        let mut csv = String::from("check,status,gating,detail\n");
        let mut summary = String::new();
        for o in &outcomes {
            let _ = writeln!(csv, "{},{},{},\"{}\"", o.name, o.status, o.gating, o.detail.replace('"', "\"\""));
            let _ = writeln!(summary, "{o}");
        }
        let failed = outcomes.iter().filter(|o| o.is_failure()).count();
        let _ = writeln!(summary, "{} checks, {failed} failed", outcomes.len());
        print!("{summary}");
        let outputs = vec![
            self.write_text(VERIFY_CHECKS, &csv)?,
            self.write_text(VERIFY_SUMMARY, &summary)?,
        ];
        self.record(Stage::Verify, outputs, json!({ "checks": outcomes.len(), "failed": failed }))?;
        if failed > 0 {
            return Err(CliError::VerifyFailed { failed });
        }
        Ok(outcomes)
    }
}

/// Rolls out every test sample; sample `i` samples with seed `(seed, i)`.
pub fn evaluate(
    model: &VectorFieldModel,
    codec: &LinearCodec,
    schedule: &PathSchedule,
    test: &DatasetSpec,
    base: &SamplerConfig,
    data_range: f64,
) -> bridgeflow::Result<Vec<ForecastReport>> {
    test.samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let cfg = SamplerConfig {
                seed: derive_seed(base.seed, &[i as u64]),
                ..base.clone()
            };
            let truth = Truth {
                states: &s.suffix,
                data_range,
                field_shape: test.field_shape,
            };
            sampler::rollout(model, codec, &s.prefix, test.l, &cfg, schedule, Some(truth))
        })
        .collect()
}

/// Per-step metrics averaged over samples.
pub fn mean_per_step(reports: &[ForecastReport]) -> bridgeflow::Result<Vec<MetricSet>> {
    let horizon = reports.first().map_or(0, ForecastReport::horizon);
    (0..horizon)
        .map(|s| {
            let sets: Vec<MetricSet> = reports
                .iter()
                .map(|r| r.metrics.as_ref().map(|m| m[s]).ok_or(bridgeflow::Error::Empty("forecast metrics")))
                .collect::<bridgeflow::Result<_>>()?;
            MetricSet::mean(&sets)
        })
        .collect()
}
