//! Central finite-difference checks of every loss, the graph builders and
//! the network ops, on random two-sample inputs.

use gkd_core::autograd::{Tape, Var};
use gkd_core::graphs::{inter_graph_on, intra_graph_on, NodeMode};
use gkd_core::losses::{ce_loss, dicd_loss, inter_loss, intra_loss, kl_div, l1_loss, msan_loss, total_loss, LossWeights};
use gkd_core::rng::{normal, rng_from};
use gkd_core::{Result, Tensor};

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng_from(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal(&mut r)).collect()).unwrap()
}

fn binary(shape: &[usize], seed: u64) -> Tensor {
    randn(shape, seed).map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn eval(f: &Build, inputs: &[Tensor]) -> f64 {
    let mut t = Tape::new();
    let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
    let out = f(&mut t, &vs).unwrap();
    t.value(out).item()
}

/// Largest relative error `‖g − ĝ‖ / max(‖g‖ + ‖ĝ‖, 1e-8)` over the inputs
/// listed in `wrt`. The others are stop-gradient targets and must receive none.
fn max_rel_error(f: &Build, inputs: &[Tensor], wrt: &[usize]) -> f64 {
    let mut t = Tape::new();
    let vs: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone(), true)).collect();
    let out = f(&mut t, &vs).unwrap();
    t.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vs.iter().enumerate() {
        if !wrt.contains(&k) {
            assert!(t.grad(*v).is_none_or(|g| g.data().iter().all(|&x| x == 0.0)), "input {k} should be detached");
            continue;
        }
        let analytic = t.grad(*v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = vec![0.0; inputs[k].len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            *slot = (eval(f, &plus) - eval(f, &minus)) / (2.0 * H);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        worst = worst.max(diff / scale.max(1e-8));
    }
    worst
}

fn assert_grad(name: &str, f: &Build, inputs: &[Tensor]) {
    let all: Vec<usize> = (0..inputs.len()).collect();
    assert_grad_wrt(name, f, inputs, &all);
}

fn assert_grad_wrt(name: &str, f: &Build, inputs: &[Tensor], wrt: &[usize]) {
    let e = max_rel_error(f, inputs, wrt);
    assert!(e < TOL, "{name}: relative error {e:e}");
}

fn rows(t: &mut Tape, v: Var, n: usize) -> Vec<Var> {
    (0..n).map(|i| t.row(v, i).unwrap()).collect()
}

#[test]
fn l1() {
    assert_grad("l1", &|t, v| l1_loss(t, v[0], v[1]), &[randn(&[2, 6], 1), randn(&[2, 6], 2)]);
}

#[test]
fn cross_entropy() {
    let mask = binary(&[2, 1, 4, 4], 4);
    assert_grad(
        "ce",
        &|t, v| {
            let p = t.sigmoid(v[0]);
            let m = t.constant(mask.clone());
            ce_loss(t, p, m)
        },
        &[randn(&[2, 1, 4, 4], 3)],
    );
}

#[test]
fn kl() {
    assert_grad(
        "kl",
        &|t, v| {
            let (a, b) = (rows(t, v[0], 2), rows(t, v[1], 2));
            let k0 = kl_div(t, a[0], b[0])?;
            let k1 = kl_div(t, a[1], b[1])?;
            t.add(k0, k1)
        },
        &[randn(&[2, 5], 5), randn(&[2, 5], 6)],
    );
}

#[test]
fn msan() {
    assert_grad(
        "msan",
        &|t, v| msan_loss(t, v[0], v[1], v[2], v[3], 0.5),
        &[randn(&[2, 3, 2, 2], 7), randn(&[2, 3, 2, 2], 8), randn(&[2, 4], 9), randn(&[2, 4], 10)],
    );
}

fn latents(k: usize, seed: u64) -> Vec<Tensor> {
    (0..2).map(|i| randn(&[k + 1, 4], seed + i)).collect()
}

fn intra_avg(t: &mut Tape, teacher: &[Var], student: &[Var], k: usize, mode: NodeMode) -> Result<Var> {
    let mut terms = Vec::new();
    for (&tv, &sv) in teacher.iter().zip(student) {
        let tr = rows(t, tv, k + 1);
        let sr = rows(t, sv, k + 1);
        let gt = intra_graph_on(t, tr[0], &tr[1..], mode)?;
        let gs = intra_graph_on(t, sr[0], &sr[1..], mode)?;
        terms.push(intra_loss(t, &gt, &gs)?);
    }
    let s = t.add_all(&terms)?;
    Ok(t.scale(s, 0.5))
}

#[test]
fn intra_both_node_modes() {
    for mode in [NodeMode::SelfProduct, NodeMode::CrossProduct] {
        let mut inputs = latents(3, 20);
        inputs.extend(latents(3, 30));
        assert_grad_wrt("intra", &|t, v| intra_avg(t, &v[..2], &v[2..], 3, mode), &inputs, &[2, 3]);
    }
}

#[test]
fn inter() {
    let mut inputs = latents(3, 40);
    inputs.extend(latents(3, 50));
    assert_grad_wrt(
        "inter",
        &|t, v| {
            let mut terms = Vec::new();
            for i in 0..2 {
                let tr = rows(t, v[i], 4);
                let sr = rows(t, v[2 + i], 4);
                let gt = inter_graph_on(t, &tr[1..])?;
                let gs = inter_graph_on(t, &sr[1..])?;
                terms.push(inter_loss(t, &gt, &gs)?);
            }
            t.add_all(&terms)
        },
        &inputs,
        &[2, 3],
    );
}

#[test]
fn teacher_side_receives_no_gradient() {
    let mut t = Tape::new();
    let teacher = t.leaf(randn(&[4, 4], 60), true);
    let student = t.leaf(randn(&[4, 4], 61), true);
    let tr = rows(&mut t, teacher, 4);
    let sr = rows(&mut t, student, 4);
    let gt = intra_graph_on(&mut t, tr[0], &tr[1..], NodeMode::SelfProduct).unwrap();
    let gs = intra_graph_on(&mut t, sr[0], &sr[1..], NodeMode::SelfProduct).unwrap();
    let a = intra_loss(&mut t, &gt, &gs).unwrap();
    let gt = inter_graph_on(&mut t, &tr[1..]).unwrap();
    let gs = inter_graph_on(&mut t, &sr[1..]).unwrap();
    let b = inter_loss(&mut t, &gt, &gs).unwrap();
    let total = t.add(a, b).unwrap();
    t.backward(total).unwrap();
    assert!(t.grad(teacher).is_none_or(|g| g.data().iter().all(|&x| x == 0.0)));
    assert!(t.grad(student).is_some_and(|g| g.data().iter().any(|&x| x != 0.0)));
}

#[test]
fn graph_construction() {
    let w_intra = randn(&[3], 70);
    let w_node = randn(&[4, 4], 71);
    let w_inter = randn(&[3, 3], 72);
    for mode in [NodeMode::SelfProduct, NodeMode::CrossProduct] {
        assert_grad(
            "graphs",
            &|t, v| {
                let mut terms = Vec::new();
                for &sample in v {
                    let r = rows(t, sample, 4);
                    let g = intra_graph_on(t, r[0], &r[1..], mode)?;
                    let we = t.constant(w_intra.clone());
                    let e = t.mul(g.edges, we)?;
                    terms.push(t.sum(e));
                    let wn = t.constant(w_node.clone());
                    let n = t.mul(g.aug_nodes[1], wn)?;
                    terms.push(t.sum(n));
                    let h = inter_graph_on(t, &r[1..])?;
                    let wi = t.constant(w_inter.clone());
                    let e = t.mul(h.edges, wi)?;
                    terms.push(t.sum(e));
                }
                t.add_all(&terms)
            },
            &latents(3, 80),
        );
    }
}

#[test]
fn dicd() {
    assert_grad_wrt(
        "dicd",
        &|t, v| {
            let y = t.sigmoid(v[0]);
            let a = t.sigmoid(v[1]);
            let b = t.sigmoid(v[2]);
            dicd_loss(t, y, a, b)
        },
        &[randn(&[2, 1, 4, 4], 90), randn(&[2, 1, 4, 4], 91), randn(&[2, 1, 4, 4], 92)],
        &[1, 2],
    );
}

#[test]
fn total() {
    let w = LossWeights::default();
    let mask = binary(&[2, 1, 3, 3], 100);
    let mut inputs = vec![randn(&[2, 1, 3, 3], 101)];
    inputs.extend(latents(2, 102));
    inputs.extend(latents(2, 104));
    inputs.push(randn(&[2, 1, 3, 3], 106));
    inputs.push(randn(&[2, 1, 3, 3], 107));
    inputs.push(randn(&[2, 1, 3, 3], 108));
    assert_grad_wrt(
        "total",
        &|t, v| {
            let p = t.sigmoid(v[0]);
            let m = t.constant(mask.clone());
            let ce = ce_loss(t, p, m)?;
            let intra = intra_avg(t, &v[1..3], &v[3..5], 2, NodeMode::SelfProduct)?;
            let (tr, sr) = (rows(t, v[1], 3), rows(t, v[3], 3));
            let gt = inter_graph_on(t, &tr[1..])?;
            let gs = inter_graph_on(t, &sr[1..])?;
            let inter = inter_loss(t, &gt, &gs)?;
            let yt = t.sigmoid(v[5]);
            let ys = t.sigmoid(v[6]);
            let y = t.sigmoid(v[7]);
            let dicd = dicd_loss(t, y, yt, ys)?;
            total_loss(t, ce, Some(intra), Some(inter), Some(dicd), &w)
        },
        &inputs,
        &[0, 3, 4, 5, 6],
    );
}

#[test]
fn network_ops() {
    assert_grad(
        "conv2d",
        &|t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 2, 1)?;
            let y = t.tanh(y);
            let y = t.mul(y, y)?;
            Ok(t.sum(y))
        },
        &[randn(&[2, 2, 6, 6], 110), randn(&[3, 2, 3, 3], 111), randn(&[3], 112)],
    );
    assert_grad(
        "conv_transpose2d",
        &|t, v| {
            let y = t.conv_transpose2d(v[0], v[1], v[2])?;
            let y = t.sigmoid(y);
            let y = t.mul(y, y)?;
            Ok(t.mean(y))
        },
        &[randn(&[2, 3, 3, 3], 113), randn(&[3, 2, 2, 2], 114), randn(&[2], 115)],
    );
    // weighted so the row-sum symmetry of the normalization does not hide errors
    assert_grad(
        "row_norm+tanh",
        &|t, v| {
            let y = t.row_norm(v[0])?;
            let y = t.tanh(y);
            let y = t.mul(y, v[1])?;
            Ok(t.sum(y))
        },
        &[randn(&[3, 5], 116), randn(&[3, 5], 117)],
    );
    assert_grad(
        "linear+concat",
        &|t, v| {
            let y = t.linear(v[0], v[1], v[2])?;
            let y = t.relu(y);
            let z = t.concat_channels(&[v[3], v[4]])?;
            let z = t.mul(z, z)?;
            let a = t.sum(y);
            let b = t.mean(z);
            t.add(a, b)
        },
        &[
            randn(&[2, 5], 116),
            randn(&[5, 3], 117),
            randn(&[3], 118),
            randn(&[2, 1, 2, 2], 119),
            randn(&[2, 2, 2, 2], 120),
        ],
    );
}
