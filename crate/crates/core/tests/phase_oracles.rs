//! Training-run oracles for the first three phases, plus the structural
//! gradient isolation of the cross-reconstruction and DICD paths.
//! Everything runs at 32×32 so the whole file stays under a few minutes.

use gkd_core::losses::{dicd_loss, LossWeights};
use gkd_core::nets::{Component, Models, NetConfig, NetKind, Session};
use gkd_core::synthdata::{make_dataset, Dataset, SynthConfig};
use gkd_core::trainer::{alignment_error, cross_reconstruct, epoch_means, evaluate, EvalConfig, Phase, Pipeline, TrainConfig};
use gkd_core::Tensor;

const SEEDS: [u64; 3] = [1, 2, 3];

fn data(seed: u64, n_train: usize, n_test: usize) -> Dataset {
    let cfg = SynthConfig { size: 32, ..SynthConfig::default() };
    make_dataset(2 * seed + 100, 2 * seed + 101, n_train, n_test, &cfg).unwrap()
}

fn pipeline(seed: u64) -> Pipeline {
    let net = NetConfig { input_size: 32, ..NetConfig::default() };
    let train = TrainConfig { seed, ..TrainConfig::default() };
    Pipeline::new(Models::new(&net, seed).unwrap(), train, LossWeights::default()).unwrap()
}

fn moving_average(v: &[f64], w: usize) -> Vec<f64> {
    v.windows(w).map(|x| x.iter().sum::<f64>() / w as f64).collect()
}

#[test]
fn psae_reconstruction_converges_on_64_masks() {
    for seed in SEEDS {
        let ds = data(seed, 64, 8);
        let mut p = pipeline(seed);
        assert_eq!(p.train.epochs_p1, 20);
        let means = epoch_means(&p.run_phase(Phase::P1Psae, &ds.train_a).unwrap());
        let last = *means.last().unwrap();
        assert!(last < 0.05, "seed {seed}: final epoch L_srec {last:.4}");
        let ma = moving_average(&means, 5);
        for w in ma.windows(2) {
            assert!(w[1] <= w[0], "seed {seed}: moving average rose {:.5} -> {:.5}", w[0], w[1]);
        }
    }
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

#[test]
fn psae_round_trip_on_held_out_masks() {
    for seed in SEEDS {
        let ds = data(seed, 128, 32);
        let mut p = pipeline(seed);
        p.run_phase(Phase::P1Psae, &ds.train_a).unwrap();
        let m = &p.models;
        let masks: Vec<Tensor> = ds.test_a.samples_untracked().iter().map(|s| s.mask.clone()).collect();
        let batch = Tensor::stack(&masks).unwrap();
        let rec = m.psae_decode(&m.psae_encode(&batch).unwrap()).unwrap();
        let err = mean_abs(rec.data(), batch.data());
        assert!(err < 0.05, "seed {seed}: held-out round trip {err:.4}");

        let zeros = Tensor::zeros(&[1, 1, 32, 32]);
        let ones = Tensor::full(&[1, 1, 32, 32], 1.0);
        let (a, b) = (m.psae_encode(&zeros).unwrap(), m.psae_encode(&ones).unwrap());
        let dist: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        assert!(dist > 0.0, "seed {seed}: empty and full masks share a latent");
    }
}

#[test]
fn teacher_outperforms_student_and_headers_align() {
    let ec = EvalConfig { with_fsd: false, ..EvalConfig::default() };
    for seed in SEEDS {
        let ds = data(seed, 128, 48);
        let mut p = pipeline(seed);
        p.run_phase(Phase::P1Psae, &ds.train_a).unwrap();
        p.run_phase(Phase::P2Scratch, &ds.train_a).unwrap();
        let t = evaluate(&p.models, NetKind::Teacher, &ds.test_a, &ec).unwrap().miou;
        let s = evaluate(&p.models, NetKind::Student, &ds.test_a, &ec).unwrap().miou;
        assert!(t > s, "seed {seed}: teacher mIoU {t:.4} <= student {s:.4}");
        assert!(t > 0.85, "seed {seed}: teacher mIoU {t:.4}");

        let before: Vec<f64> = [NetKind::Teacher, NetKind::Student].iter().map(|&k| alignment_error(&p.models, k, &ds.test_a).unwrap()).collect();
        p.run_phase(Phase::P3Msan, &ds.train_a).unwrap();
        for (i, k) in [NetKind::Teacher, NetKind::Student].into_iter().enumerate() {
            let after = alignment_error(&p.models, k, &ds.test_a).unwrap();
            assert!(after < before[i], "seed {seed}: {k:?} header regu {:.4} -> {after:.4}", before[i]);
        }
        assert_eq!(ds.test_b.reads(), 0);
    }
}

fn small_models() -> (Models, Tensor) {
    let net = NetConfig { input_size: 32, latent_dim: 8, ..NetConfig::default() };
    let models = Models::new(&net, 11).unwrap();
    let ds = data(4, 2, 1);
    let x = Tensor::stack(&ds.train_a.samples_untracked().iter().map(|s| s.image.clone()).collect::<Vec<_>>()).unwrap();
    (models, x)
}

/// Largest absolute gradient over every bound parameter of `c`.
fn max_grad(s: &Session, models: &Models, c: Component) -> f64 {
    let ids = models.store.ids(c);
    s.param_grads()
        .iter()
        .filter(|(id, _)| ids.contains(id))
        .flat_map(|(_, g)| g.data().iter().map(|v| v.abs()))
        .fold(0.0, f64::max)
}

// Nothing is frozen here, so a zero teacher gradient comes from the graph
// itself and not from the freeze bookkeeping.
#[test]
fn cross_reconstruction_sends_no_gradient_to_the_teacher() {
    let (models, x) = small_models();
    let mut s = Session::new(&models.store, true);
    let xv = s.input(x.clone());
    let t = models.teacher.forward(&mut s, xv).unwrap();
    let st = models.student.forward(&mut s, xv).unwrap();
    let s_t = models.tan.encode(&mut s, t.bottleneck).unwrap();
    let s_s = models.san.encode(&mut s, st.bottleneck).unwrap();
    let (_, f_hat_s) = cross_reconstruct(&models, &mut s, s_t, s_s).unwrap();
    let sq = s.tape.mul(f_hat_s.var, f_hat_s.var).unwrap();
    let loss = s.tape.sum(sq);
    s.tape.backward(loss).unwrap();
    assert_eq!(max_grad(&s, &models, Component::Teacher), 0.0);
    assert_eq!(max_grad(&s, &models, Component::Tan), 0.0);
    assert!(max_grad(&s, &models, Component::San) > 0.0);

    let mut s = Session::new(&models.store, true);
    let xv = s.input(x);
    let st = models.student.forward(&mut s, xv).unwrap();
    let t = models.teacher.forward(&mut s, xv).unwrap();
    let s_t = models.tan.encode(&mut s, t.bottleneck).unwrap();
    let s_s = models.san.encode(&mut s, st.bottleneck).unwrap();
    let (f_hat_t, _) = cross_reconstruct(&models, &mut s, s_t, s_s).unwrap();
    let sq = s.tape.mul(f_hat_t.var, f_hat_t.var).unwrap();
    let loss = s.tape.sum(sq);
    s.tape.backward(loss).unwrap();
    assert_eq!(max_grad(&s, &models, Component::Teacher), 0.0);
    assert!(max_grad(&s, &models, Component::Student) > 0.0, "student side must stay live");
}

#[test]
fn dicd_target_sends_no_gradient_to_the_teacher() {
    let (models, x) = small_models();
    let mut s = Session::new(&models.store, true);
    let xv = s.input(x);
    let t = models.teacher.forward(&mut s, xv).unwrap();
    let st = models.student.forward(&mut s, xv).unwrap();
    let l = dicd_loss(&mut s.tape, t.prediction, st.prediction, st.prediction).unwrap();
    s.tape.backward(l).unwrap();
    assert_eq!(max_grad(&s, &models, Component::Teacher), 0.0);
    assert!(max_grad(&s, &models, Component::Student) > 0.0);
}
