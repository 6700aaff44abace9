//! Whole-run invariants on small synthetic cities.

use std::sync::Arc;

use mac_core::eval::{run_on_dataset, Dataset, ExperimentConfig, ExperimentOutput};
use mac_core::sim::{NoopObserver, SamplingMode};
use mac_core::synth::{generate, SynthConfig};

fn city(users: usize, seed: u64) -> Dataset {
    generate(&SynthConfig {
        users,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
    .dataset
}

fn run(data: &Dataset, cfg: ExperimentConfig) -> ExperimentOutput {
    run_on_dataset(&cfg, data, Arc::new(NoopObserver)).unwrap()
}

fn base(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        k_regions: 2,
        lr: 0.5,
        patience: 0,
        max_epochs: 4,
        ..ExperimentConfig::default()
    }
}

#[test]
fn without_collaboration_sampling_changes_nothing_but_traffic() {
    let data = city(30, 1);
    let full = run(&data, ExperimentConfig { gamma: 0.0, sampling: SamplingMode::Full, ..base(1) });
    let perf = run(&data, ExperimentConfig { gamma: 0.0, sampling: SamplingMode::Performance, ..base(1) });
    let loc = |o: &ExperimentOutput| -> Vec<f64> { o.logs.iter().flat_map(|l| l.records.iter().map(|r| r.l_loc)).collect() };
    assert_eq!(loc(&full), loc(&perf));
    let ranks = |o: &ExperimentOutput| -> Vec<usize> { o.report.per_device.iter().map(|e| e.rank).collect() };
    assert_eq!(ranks(&full), ranks(&perf));
}

#[test]
fn reported_traffic_is_the_sum_of_device_records() {
    let data = city(30, 2);
    let out = run(&data, base(2));
    let summed: u64 = out.logs.iter().flat_map(|l| &l.records).map(|r| r.bytes_in as u64).sum();
    assert_eq!(out.report.total_bytes_exchanged, summed);
    assert!(summed > 0);
}

#[test]
fn one_epoch_budget_runs_one_round() {
    let data = city(20, 3);
    let out = run(&data, ExperimentConfig { max_epochs: 1, ..base(3) });
    assert_eq!(out.report.rounds, 1);
    assert_eq!(out.logs.len(), 1);
    assert_eq!(out.logs[0].records.len(), data.split.users.len());
    assert!(out.logs[0].records.iter().all(|r| !r.resampled));
}

#[test]
fn frozen_devices_leave_the_round_logs() {
    let data = city(30, 4);
    let out = run(&data, ExperimentConfig { patience: 1, max_epochs: 20, ..base(4) });
    let active: Vec<usize> = out.logs.iter().map(|l| l.records.len()).collect();
    assert!(active.windows(2).all(|w| w[0] >= w[1]), "{active:?}");
    assert!(out.report.converged_devices > 0);
    assert_eq!(out.report.per_device.len(), data.split.users.len());
}

#[test]
fn every_device_is_evaluated_once() {
    let data = city(25, 5);
    let out = run(&data, base(5));
    let users: Vec<_> = out.report.per_device.iter().map(|e| e.user).collect();
    let expected: Vec<_> = data.split.users.keys().copied().collect();
    assert_eq!(users, expected);
    for e in &out.report.per_device {
        assert!(e.rank >= 1 && e.rank <= e.num_candidates);
    }
}
