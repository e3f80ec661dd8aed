use bridgeflow::codec::{self, LinearCodec};
use bridgeflow::dynamics::{self, DatasetSpec, System, SystemSpec};
use bridgeflow::model::{Example, ModelConfig, VectorFieldModel};
use bridgeflow::path::{LossKind, PathSchedule, PathSpec};
use bridgeflow::rng;
use bridgeflow::train::{self, ScoreWeighting, TrainConfig};

fn oscillator_data(seed: u64) -> DatasetSpec {
    let spec = SystemSpec::new(System::DampedOscillator {
        omega: 1.0,
        zeta: 0.05,
        amp_min: 0.5,
        amp_max: 1.0,
    });
    let trajs = dynamics::simulate_corpus(&spec, seed, 32, 48, 0.1).unwrap();
    dynamics::build_dataset(&trajs, 16, 16).unwrap()
}

fn bridge(sigma: f64) -> PathSchedule {
    PathSchedule::new(PathSpec::Bridge { sigma_min: 0.001, sigma }).unwrap()
}

fn small_model(p: usize) -> ModelConfig {
    ModelConfig {
        width: 64,
        depth: 2,
        ..ModelConfig::new(p)
    }
}

#[test]
fn zero_model_loss_matches_monte_carlo_baseline() {
    let data = oscillator_data(1);
    let codec = LinearCodec::identity(2);
    let seqs = train::encode_sequences(&data, &codec).unwrap();
    for schedule in [bridge(0.01), PathSchedule::new(PathSpec::benchmark_default("ot").unwrap()).unwrap()] {
        let (base, se) = train::zero_model_baseline(&seqs, &schedule, LossKind::Flow, ScoreWeighting::Variance, 20_000, 7).unwrap();
        let zero = VectorFieldModel::zeros(small_model(codec.p())).unwrap();
        let batch: Vec<Example> = (0..20_000u64)
            .map(|i| {
                let mut r = rng::derived(99, &[i]);
                let seq = &seqs[i as usize % seqs.len()];
                train::draw_example(seq, &schedule, LossKind::Flow, ScoreWeighting::Variance, &mut r).unwrap()
            })
            .collect();
        let per: Vec<f64> = batch.iter().map(|ex| zero.loss(std::slice::from_ref(ex)).unwrap()).collect();
        let n = per.len() as f64;
        let mean = per.iter().sum::<f64>() / n;
        let var = per.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let tol = 3.0 * (se * se + var / n).sqrt();
        assert!((mean - base).abs() <= tol, "{}: {mean} vs {base} (tol {tol})", schedule.name());
    }
}

#[test]
fn bridge_training_beats_zero_model() {
    let data = oscillator_data(2);
    let codec = codec::fit(&data.sequences.concat(), 2).unwrap();
    let schedule = bridge(0.01);
    let seqs = train::encode_sequences(&data, &codec).unwrap();
    let (base, _) = train::zero_model_baseline(&seqs, &schedule, LossKind::Flow, ScoreWeighting::Variance, 10_000, 3).unwrap();
    let cfg = TrainConfig { seed: 5, ..TrainConfig::new(2000) };
    let model = VectorFieldModel::init(small_model(2), 11).unwrap();
    let trace = train::train(&cfg, model, &data, &codec, &schedule).unwrap();
    let tail = trace.tail_mean(100).unwrap();
    assert!(tail < 0.2 * base, "tail {tail} vs baseline {base}");
}

#[test]
fn training_is_deterministic() {
    let data = oscillator_data(3);
    let codec = LinearCodec::identity(2);
    let schedule = bridge(0.01);
    let cfg = TrainConfig { seed: 9, ..TrainConfig::new(50) };
    let run = || {
        let model = VectorFieldModel::init(small_model(2), 4).unwrap();
        train::train(&cfg, model, &data, &codec, &schedule).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.model.params(), b.model.params());
}

#[test]
fn identity_codec_trains_on_raw_states() {
    let data = oscillator_data(4);
    let codec = LinearCodec::identity(2);
    let cfg = TrainConfig { seed: 1, ..TrainConfig::new(200) };
    let model = VectorFieldModel::init(small_model(2), 2).unwrap();
    let trace = train::train(&cfg, model, &data, &codec, &bridge(0.01)).unwrap();
    assert_eq!(trace.losses.len(), 200);
    let head = trace.losses[..20].iter().sum::<f64>() / 20.0;
    assert!(trace.tail_mean(20).unwrap() < head);
}

/// Loss noise grows with the bridge width: the regression target carries a
/// `c'(t) xi` term whose scale is proportional to sigma.
#[test]
fn loss_noise_grows_with_sigma() {
    let data = oscillator_data(5);
    let codec = LinearCodec::identity(2);
    let sigmas = [0.0, 0.1, 0.5];
    let seeds = [1u64, 2, 3];
    let mut medians = Vec::new();
    for &sigma in &sigmas {
        let mut vars: Vec<f64> = seeds
            .iter()
            .map(|&seed| {
                let cfg = TrainConfig { seed, ..TrainConfig::new(1000) };
                let model = VectorFieldModel::init(small_model(2), seed).unwrap();
                let trace = train::train(&cfg, model, &data, &codec, &bridge(sigma)).unwrap();
                let tail = &trace.losses[500..];
                let mean = tail.iter().sum::<f64>() / tail.len() as f64;
                tail.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (tail.len() - 1) as f64
            })
            .collect();
        vars.sort_by(f64::total_cmp);
        eprintln!("sigma {sigma}: tail loss variances {vars:?}");
        medians.push(vars[vars.len() / 2]);
    }
    assert!(medians.windows(2).all(|w| w[0] < w[1]), "{medians:?}");
}
