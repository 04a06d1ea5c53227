//! Small end-to-end runs through the experiment layer.

use cpdyn::experiments::{
    dynamics_preset, rank_one_preset, run_dynamics, run_rank_one_experiment, run_recovery, ProblemSpec, RecoveryConfig,
};
use cpdyn::optim::{AdamConfig, LrScheme, StopReason, TrainConfig};
use cpdyn::probe::{run_probe_on, BinaryDataset, ProbeConfig, Variant};
use cpdyn::LossKind;

fn small_recovery(problem: ProblemSpec, shape: Vec<usize>, gt_rank: usize, std: f64) -> RecoveryConfig {
    RecoveryConfig {
        shape,
        gt_rank,
        problem,
        rank: 12,
        init_stds: vec![std],
        loss: LossKind::Squared { coeff: 1.0 },
        train: TrainConfig {
            lr: LrScheme::adaptive(),
            stop_loss: 1e-9,
            max_iters: 200_000,
            record_every: 20,
            record_vector_norms: false,
        },
        top_norms: 5,
        rip_trials: 0,
        seed: 3,
    }
}

#[test]
fn small_init_completion_finds_the_low_rank_solution() {
    let cfg = small_recovery(ProblemSpec::Completion { observations: 150 }, vec![6, 6, 6], 2, 1e-3);
    let rep = run_recovery(&cfg, None).unwrap();
    let run = &rep.runs[0];
    assert_eq!(run.stop, StopReason::Converged);
    assert!(run.reconstruction_error < 0.05, "{run:?}");
    assert!(run.gap_ratio < 0.1, "{run:?}");
}

#[test]
fn small_init_sensing_finds_the_low_rank_solution() {
    let cfg = small_recovery(ProblemSpec::Sensing { measurements: 120 }, vec![4, 4, 4], 1, 1e-3);
    let rep = run_recovery(&cfg, None).unwrap();
    let run = &rep.runs[0];
    assert!(run.reconstruction_error < 0.05, "{run:?}");
    assert!(run.gap_ratio < 0.1, "{run:?}");
}

#[test]
fn dynamics_desk_checks_pass_and_are_reproducible() {
    let mut cfg = dynamics_preset("desk").unwrap();
    cfg.seed = 11;
    cfg.conservation_steps = 2000;
    cfg.ode_steps = 200;
    let a = run_dynamics(&cfg, None).unwrap();
    assert!(a.pass, "{a:?}");
    assert!(a.halving_ratio > 3.0 && a.halving_ratio < 5.0, "second-order drift: {}", a.halving_ratio);
    let b = run_dynamics(&cfg, None).unwrap();
    assert_eq!(a.ode.max_violation, b.ode.max_violation);
}

#[test]
fn shrinking_the_scale_tightens_the_rank_one_tracking() {
    let mut cfg = rank_one_preset("desk").unwrap();
    cfg.seed = 5;
    cfg.alphas = vec![1e-1, 1e-2];
    cfg.companions = 0;
    cfg.nonleading_tol = 1e-6;
    let s = run_rank_one_experiment(&cfg, None).unwrap();
    assert!(s.assumptions.all_hold());
    assert!(s.crossing_nondecreasing && s.distance_decreasing, "{:?} {:?}", s.crossing_times, s.max_distances);
    // Crossing time grows roughly like 1/α for order three.
    let ratio = s.crossing_times[1] / s.crossing_times[0];
    assert!(ratio > 5.0 && ratio < 20.0, "{ratio}");
}

/// 4×4 binary images whose label is 1 exactly when pixel 5 is on; a
/// rank-one predictor fits the original labels but not shuffled ones.
#[test]
fn structured_labels_are_rank_one_and_shuffled_ones_are_not() {
    let make = |n: usize, salt: usize| {
        let pixels: Vec<u8> = (0..n * 16).map(|i| u8::from((i * 2654435761 + salt) % 7 < 3)).collect();
        let labels = (0..n).map(|i| if pixels[i * 16 + 5] == 1 { 1 } else { 4 }).collect();
        BinaryDataset { dim: 16, pixels, labels }
    };
    let (train, test) = (make(400, 1), make(100, 2));
    let cfg = ProbeConfig {
        variants: vec![Variant::Original, Variant::RandLabel],
        digits: vec![1],
        ranks: vec![1],
        ridge: true,
        adam: AdamConfig {
            lr: 1e-2,
            batch_size: 100,
            max_iters: 3000,
            ..AdamConfig::with_seed(0)
        },
        ..ProbeConfig::new(std::path::Path::new("."), 2)
    };
    let res = run_probe_on(&cfg, &train, &test).unwrap();
    let fit = |v: Variant| res.fits.iter().find(|r| r.variant == v).unwrap();
    assert!(fit(Variant::Original).train_mse < 1e-3, "{:?}", fit(Variant::Original));
    assert!(fit(Variant::Original).test_mse_clipped < 1e-3);
    assert!(fit(Variant::RandLabel).train_mse > 0.1, "{:?}", fit(Variant::RandLabel));
    let ridge = res.ridge.iter().find(|r| r.variant == Variant::Original).unwrap();
    assert!(ridge.train_mse < 0.01);
}
