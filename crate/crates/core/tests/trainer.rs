//! Phase orchestration: freezing, determinism, split isolation and the
//! direction of the reconstruction and alignment objectives.

use gkd_core::losses::LossWeights;
use gkd_core::nets::{Component, Models, NetConfig, NetKind, ParamStore};
use gkd_core::synthdata::{make_dataset, Dataset, SynthConfig};
use gkd_core::trainer::{alignment_error, epoch_means, LossRow, Phase, Pipeline, TrainConfig};
use gkd_core::Error;

fn setup(seed: u64, epochs: usize) -> (Pipeline, Dataset) {
    let net = NetConfig {
        latent_dim: 8,
        input_size: 32,
        ..NetConfig::default()
    };
    let train = TrainConfig {
        batch_size: 4,
        epochs_p1: epochs,
        epochs_p2: epochs,
        epochs_p3: epochs,
        epochs_p4: 1,
        seed,
        ..TrainConfig::default()
    };
    let ds = make_dataset(1, 2, 8, 4, &SynthConfig { size: 32, ..SynthConfig::default() }).unwrap();
    let p = Pipeline::new(Models::new(&net, seed).unwrap(), train, LossWeights::default()).unwrap();
    (p, ds)
}

fn snapshot(store: &ParamStore, c: Component) -> Vec<Vec<u64>> {
    store.snapshot(c).iter().map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect()).collect()
}

fn run_all(seed: u64) -> (Vec<Vec<LossRow>>, Pipeline, Dataset) {
    let (mut p, ds) = setup(seed, 1);
    let logs = Phase::ALL.iter().map(|&ph| p.run_phase(ph, &ds.train_a).unwrap()).collect();
    (logs, p, ds)
}

#[test]
fn frozen_components_are_bitwise_unchanged() {
    let (mut p, ds) = setup(5, 1);
    p.run_phase(Phase::P1Psae, &ds.train_a).unwrap();
    p.run_phase(Phase::P2Scratch, &ds.train_a).unwrap();
    let before: Vec<_> = Component::ALL.iter().map(|&c| snapshot(&p.models.store, c)).collect();
    p.run_phase(Phase::P3Msan, &ds.train_a).unwrap();
    for (i, &c) in Component::ALL.iter().enumerate() {
        let now = snapshot(&p.models.store, c);
        if Phase::P3Msan.frozen().contains(&c) {
            assert_eq!(now, before[i], "{c:?} moved during P3");
        } else {
            assert_ne!(now, before[i], "{c:?} did not train during P3");
        }
    }
    let before: Vec<_> = Component::ALL.iter().map(|&c| snapshot(&p.models.store, c)).collect();
    p.run_phase(Phase::P4Distill, &ds.train_a).unwrap();
    for (i, &c) in Component::ALL.iter().enumerate() {
        let now = snapshot(&p.models.store, c);
        if Phase::P4Distill.frozen().contains(&c) {
            assert_eq!(now, before[i], "{c:?} moved during P4");
        } else {
            assert_ne!(now, before[i], "{c:?} did not train during P4");
        }
    }
}

#[test]
fn identical_seeds_reproduce_loss_logs_and_parameters() {
    let (a, pa, _) = run_all(11);
    let (b, pb, _) = run_all(11);
    assert_eq!(a, b);
    assert_eq!(pa.models.store, pb.models.store);
    let (c, _, _) = run_all(12);
    assert_ne!(a, c);
}

#[test]
fn training_never_reads_test_splits() {
    let (_, _, ds) = run_all(2);
    assert!(ds.train_a.reads() > 0);
    assert_eq!(ds.test_a.reads(), 0);
    assert_eq!(ds.test_b.reads(), 0);
}

#[test]
fn prerequisites_are_enforced_in_order() {
    let (mut p, ds) = setup(1, 1);
    p.run_phase(Phase::P1Psae, &ds.train_a).unwrap();
    let before = p.models.store.clone();
    assert_eq!(p.run_phase(Phase::P3Msan, &ds.train_a), Err(Error::MissingPrerequisite("P2")));
    assert_eq!(p.run_phase(Phase::P4Distill, &ds.train_a), Err(Error::MissingPrerequisite("P2")));
    p.run_phase(Phase::P2Scratch, &ds.train_a).unwrap();
    assert_eq!(p.run_phase(Phase::P4Distill, &ds.train_a), Err(Error::MissingPrerequisite("P3")));
    assert_ne!(p.models.store, before);
    assert!(p.run_phase(Phase::P3Msan, &ds.train_a).is_ok());
}

#[test]
fn reconstruction_and_alignment_losses_decrease() {
    let (mut p, ds) = setup(4, 6);
    let p1 = epoch_means(&p.run_phase(Phase::P1Psae, &ds.train_a).unwrap());
    assert!(p1.last().unwrap() < p1.first().unwrap(), "{p1:?}");
    p.run_phase(Phase::P2Scratch, &ds.train_a).unwrap();
    let before = alignment_error(&p.models, NetKind::Student, &ds.train_a).unwrap();
    let p3 = epoch_means(&p.run_phase(Phase::P3Msan, &ds.train_a).unwrap());
    assert!(p3.last().unwrap() < p3.first().unwrap(), "{p3:?}");
    let after = alignment_error(&p.models, NetKind::Student, &ds.train_a).unwrap();
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn checkpoint_restore_round_trip() {
    let (mut p, ds) = setup(8, 1);
    p.run_phase(Phase::P1Psae, &ds.train_a).unwrap();
    let ck = p.checkpoint(Phase::P1Psae).unwrap();
    assert!(p.checkpoint(Phase::P2Scratch).is_err());
    let (mut q, _) = setup(9, 1);
    q.restore(&ck).unwrap();
    assert!(q.is_completed(Phase::P1Psae));
    assert_eq!(q.models.store.snapshot(Component::Psae), p.models.store.snapshot(Component::Psae));
    let mut bad = ck.clone();
    bad.phase = Phase::P3Msan;
    assert!(q.restore(&bad).is_err());
}
