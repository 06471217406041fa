//! End-to-end runs through the public API.

use coded_offload::exec::Parallelism;
use coded_offload::field::Prime;
use coded_offload::trainer::{
    calibrate_model_tau, encoded_train, encoded_train_with_store, Dataset, ModelState, SealStore,
    TrainConfig, TAU_TRIALS,
};
use coded_offload::workers::audit::collusion_report;
use coded_offload::workers::WorkerBehavior;

fn cfg(mode: Parallelism) -> TrainConfig {
    TrainConfig {
        k: 2,
        m: 1,
        workers: 4,
        integrity: true,
        epochs: 8,
        large_batch: 10,
        seed: 21,
        mode,
        ..TrainConfig::default()
    }
}

#[test]
fn training_matches_across_modes_and_tracks_plaintext() {
    let data = Dataset::two_moons(120, 0.1, 4);
    let model = ModelState::mlp(2, 8, 2, 0.3, 4).unwrap();
    let seq = encoded_train(&model, &data, &cfg(Parallelism::Sequential)).unwrap();
    let par = encoded_train(&model, &data, &cfg(Parallelism::Parallel)).unwrap();
    assert_eq!(seq.metrics, par.metrics);
    assert_eq!(seq.transcript_digest, par.transcript_digest);
    assert_eq!(seq.model.layers[0].w, par.model.layers[0].w);

    let tau = calibrate_model_tau(&model, &cfg(Parallelism::Sequential), TAU_TRIALS).unwrap();
    let s = seq.summary();
    assert!(s.accuracy_gap <= 0.02, "{s:?}");
    assert!(s.max_grad_delta_scaled <= tau, "{s:?} tau {tau}");
    assert_eq!(s.integrity_violations, 0);
}

#[test]
fn directory_store_gives_the_same_run() {
    let data = Dataset::xor(60, 2);
    let model = ModelState::mlp(2, 4, 2, 0.3, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut store = SealStore::dir(dir.path()).unwrap();
    let c = TrainConfig {
        epochs: 3,
        ..cfg(Parallelism::default())
    };
    let on_disk = encoded_train_with_store(&model, &data, &c, &mut store).unwrap();
    let in_memory = encoded_train(&model, &data, &c).unwrap();
    assert_eq!(on_disk.metrics, in_memory.metrics);
}

#[test]
fn colluders_see_uniform_shares_and_change_nothing() {
    let data = Dataset::two_gaussians(40, 1);
    let model = ModelState::mlp(2, 4, 2, 0.3, 1).unwrap();
    let honest_cfg = TrainConfig {
        epochs: 2,
        integrity: false,
        workers: 3,
        ..cfg(Parallelism::default())
    };
    let spy_cfg = TrainConfig {
        behaviors: vec![
            WorkerBehavior::Colluding,
            WorkerBehavior::Honest,
            WorkerBehavior::Honest,
        ],
        ..honest_cfg.clone()
    };
    let honest = encoded_train(&model, &data, &honest_cfg).unwrap();
    let spied = encoded_train(&model, &data, &spy_cfg).unwrap();
    assert_eq!(honest.metrics, spied.metrics);
    assert!(!spied.ledger.is_empty());
    assert!(spied.ledger.records().iter().all(|r| r.worker_id == 0));

    let report = collusion_report(&spied.ledger, 1, Prime::p25(), 16, 0);
    assert!(report.min_p_value().unwrap() > 1e-4, "{report:?}");
}

#[test]
fn faulty_pool_never_updates_the_model() {
    let data = Dataset::xor(40, 0);
    let model = ModelState::mlp(2, 4, 2, 0.3, 0).unwrap();
    let c = TrainConfig {
        epochs: 2,
        behaviors: vec![WorkerBehavior::Honest, WorkerBehavior::always_faulty(9)],
        ..cfg(Parallelism::default())
    };
    let out = encoded_train(&model, &data, &c).unwrap();
    assert_eq!(out.integrity_violations, 2 * 4);
    assert_eq!(out.model, model);
    assert!(out.first_violation.is_some());
}
