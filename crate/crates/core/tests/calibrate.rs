//! Temporary calibration harness; removed before release.

use std::time::Instant;

use msr_core::data::{synth_dataset, SynthSpec};
use msr_core::eval::{
    linear_probe, run_grid, table1_cells, ExperimentGrid, FeatureSource, ProbeConfig,
};
use msr_core::nn::init_models;
use msr_core::trainer::{init_state, pretrain, pretrain_step, TrainConfig, TrainMode};

fn base_config(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::for_mode(TrainMode::Msr);
    cfg.arch = "synth-small".to_string();
    cfg.epochs = epochs;
    cfg.batch_size = 256;
    cfg.seed = 11;
    cfg
}

#[test]
#[ignore]
fn timing_one_step_and_probe_epoch() {
    let train = synth_dataset(&SynthSpec::default()).unwrap();
    let cfg = base_config(1);
    let mut state = init_state(&cfg, train.len()).unwrap();
    let batch = train.gather(&(0..256).collect::<Vec<_>>());
    // warmup
    pretrain_step(&mut state, &batch).unwrap();
    let t0 = Instant::now();
    for _ in 0..3 {
        pretrain_step(&mut state, &batch).unwrap();
    }
    let per_step = t0.elapsed().as_secs_f64() / 3.0;
    println!("per-step (B=256, synth-small): {:.1} ms", per_step * 1e3);
    println!("per-epoch (7 steps): {:.2} s", per_step * 7.0);
    println!("50 epochs: {:.1} s", per_step * 7.0 * 50.0);

    let test = synth_dataset(&SynthSpec { per_class: 100, seed: 8, ..SynthSpec::default() })
        .unwrap();
    let probe = ProbeConfig { epochs: 1, decay_epochs: vec![], ..ProbeConfig::default() };
    let src = FeatureSource::encoder(&state.pair.online);
    let t0 = Instant::now();
    linear_probe(&src, &train, &test, &probe).unwrap();
    let per_probe_epoch = t0.elapsed().as_secs_f64();
    println!("probe epoch: {:.2} s; 100 epochs: {:.1} s", per_probe_epoch, per_probe_epoch * 100.0);
}

#[test]
#[ignore]
fn short_learning_signal() {
    let train = synth_dataset(&SynthSpec::default()).unwrap();
    let test = synth_dataset(&SynthSpec { per_class: 100, seed: 8, ..SynthSpec::default() })
        .unwrap();
    let probe = ProbeConfig {
        epochs: 30,
        decay_epochs: vec![18, 24],
        seed: 5,
        ..ProbeConfig::default()
    };

    let random_pair = init_models("synth-small", 11).unwrap();
    let t0 = Instant::now();
    let rand_acc =
        linear_probe(&FeatureSource::encoder(&random_pair.online), &train, &test, &probe).unwrap();
    println!("random-init probe: {rand_acc:.4} ({:.1} s)", t0.elapsed().as_secs_f64());

    for (epochs, crop_lo) in [(25usize, 0.2), (25, 0.4)] {
        let mut cfg = base_config(epochs);
        cfg.aug.crop_scale.0 = crop_lo;
        let t0 = Instant::now();
        let state = pretrain(&cfg, &train).unwrap();
        let train_time = t0.elapsed().as_secs_f64();
        let acc = linear_probe(&FeatureSource::encoder(&state.pair.online), &train, &test, &probe)
            .unwrap();
        let last = state.metrics.last().unwrap();
        println!(
            "msr {epochs} epochs crop_lo {crop_lo}: probe {acc:.4}, loss {:.4}, train {train_time:.1} s",
            last.loss
        );
    }
}

#[test]
#[ignore]
fn grid_ordering_signal() {
    let train = synth_dataset(&SynthSpec::default()).unwrap();
    let test = synth_dataset(&SynthSpec { per_class: 100, seed: 8, ..SynthSpec::default() })
        .unwrap();
    let mut base = base_config(10);
    base.aug.jitter_strength = (0.8, 0.8, 0.8, 0.2); // doubled
    base.beta_base = 0.5;
    let probe = ProbeConfig {
        epochs: 30,
        decay_epochs: vec![18, 24],
        seed: 5,
        ..ProbeConfig::default()
    };
    let grid = ExperimentGrid { cells: table1_cells(0.5, &[1]), base, probe };
    let t0 = Instant::now();
    let report = run_grid(&grid, &train, &test, 2).unwrap();
    println!("grid wall time: {:.0} s", t0.elapsed().as_secs_f64());
    print!("{}", report.table());
}
