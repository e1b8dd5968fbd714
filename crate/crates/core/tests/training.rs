mod common;

use common::*;
use spikeflow::ann::HybridVariant;
use spikeflow::eval::evaluate;
use spikeflow::optim::{adam_step, lr_schedule, OptimizerState};
use spikeflow::params::ParamStore;
use spikeflow::tensor::Tensor;
use spikeflow::trainer::{batch_gradients, resume_state, train, train_from, RunFiles};
use spikeflow::Error;

#[test]
fn adam_follows_the_bias_corrected_update() {
    let mut params = ParamStore::new();
    params.insert("w", Tensor::scalar(1.0)).unwrap();
    let mut state = OptimizerState::new(&params);
    let (mut m, mut v, mut p) = (0.0f64, 0.0f64, 1.0f64);
    for (t, g) in [0.5, -0.2, 0.8].into_iter().enumerate() {
        let mut grads = ParamStore::new();
        grads.insert("w", Tensor::scalar(g)).unwrap();
        adam_step(&mut params, &grads, &mut state, 0.1, true).unwrap();
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let k = (t + 1) as i32;
        let (mh, vh) = (m / (1.0 - 0.9f64.powi(k)), v / (1.0 - 0.999f64.powi(k)));
        p -= 0.1 * mh / (vh.sqrt() + 1e-8);
        assert!((params.get("w").unwrap().item() - p).abs() < 1e-15);
    }
    assert_eq!(state.step, 3);
}

#[test]
fn nan_gradient_names_the_parameter() {
    let mut params = ParamStore::new();
    params.insert("enc1.weight", Tensor::scalar(1.0)).unwrap();
    let mut state = OptimizerState::new(&params);
    let mut grads = ParamStore::new();
    grads.insert("enc1.weight", Tensor::scalar(f64::NAN)).unwrap();
    let e = adam_step(&mut params, &grads, &mut state, 0.1, true).unwrap_err();
    assert!(matches!(&e, Error::Numeric(msg) if msg.contains("enc1.weight")));
    assert_eq!(state.step, 0);
    assert_eq!(params.get("enc1.weight").unwrap().item(), 1.0);
}

#[test]
fn learning_rate_decays_at_milestones() {
    let expect = [(0, 1.0), (4, 1.0), (5, 0.7), (9, 0.7), (10, 0.49), (20, 0.343), (30, 0.2401), (40, 0.16807)];
    for (epoch, f) in expect {
        assert!((lr_schedule(1.0, epoch) - f).abs() < 1e-12, "epoch {epoch}");
    }
}

#[test]
fn every_parameter_receives_gradient() {
    for variant in HybridVariant::ALL {
        let (data, mut cfg) = tiny_setup(2, 3);
        cfg.variant = variant;
        let batch: Vec<_> = data.iter().map(|s| s.prepare(cfg.n_frames).unwrap()).collect();
        let params = spikeflow::ann::init_params::<f64>(&cfg.network(), 0).unwrap();
        let r = batch_gradients(&batch, &params, &cfg.network(), &cfg.loss(), true).unwrap();
        for (name, g) in r.grads.iter() {
            assert!(g.max_abs() > 0.0, "{variant}: `{name}` has zero gradient");
        }
    }
}

#[test]
fn resumed_training_reproduces_an_uninterrupted_run() {
    let (data, cfg) = tiny_setup(4, 5);
    let whole = tempfile::tempdir().unwrap();
    let full = train(&data, &cfg, whole.path()).unwrap();

    let split = tempfile::tempdir().unwrap();
    let first = spikeflow::trainer::TrainConfig { epochs: 1, ..cfg.clone() };
    train(&data, &first, split.path()).unwrap();
    let state = resume_state(&RunFiles { dir: split.path().to_path_buf() }, &cfg, 1).unwrap();
    assert_eq!(state.epoch, 1);
    let resumed = train_from(&data, &cfg, split.path(), state).unwrap();

    assert_eq!(resumed.state, full.state);
    for f in ["loss.csv", "final.sfn", "epoch0002.sfn", "epoch0002.adam", "best.sfn"] {
        assert_eq!(std::fs::read(whole.path().join(f)).unwrap(), std::fs::read(split.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn evaluation_reproduces_the_final_training_loss() {
    let (data, cfg) = tiny_setup(3, 6);
    let dir = tempfile::tempdir().unwrap();
    let summary = train(&data, &cfg, dir.path()).unwrap();
    let report = evaluate(&summary.final_checkpoint, &data, &cfg, 5.1).unwrap();
    assert!((report.total_loss - summary.final_loss).abs() <= 1e-9 * summary.final_loss.abs().max(1.0));
    assert!(report.aee.is_some());
    assert_eq!(report.spike_rates.len(), 3);
}

#[test]
fn csv_rows_cover_every_iteration() {
    let (data, mut cfg) = tiny_setup(4, 7);
    cfg.max_iterations = Some(3);
    let dir = tempfile::tempdir().unwrap();
    let s = train(&data, &cfg, dir.path()).unwrap();
    assert_eq!(s.log.len(), 3);
    let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], spikeflow::trainer::LOSS_CSV_HEADER);
    assert_eq!(lines.len(), 4);
}

#[test]
fn crop_larger_than_the_sample_is_a_contract_error() {
    let (data, mut cfg) = tiny_setup(2, 8);
    cfg.crop_size = Some(64);
    let dir = tempfile::tempdir().unwrap();
    let e = train(&data, &cfg, dir.path()).unwrap_err();
    assert!(matches!(e, Error::Contract(_)), "{e}");
    assert!(e.to_string().contains("crop"), "{e}");
}
