//! The four training phases: mask autoencoder (P1), scratch teacher and
//! student (P2), alignment headers (P3) and distillation (P4).
//!
//! A [`Pipeline`] owns every model, refuses to run a phase whose
//! prerequisites have not completed, freezes everything a phase does not
//! train, and logs one [`LossRow`] per optimizer step. Training reads only
//! the `train_A` split.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;

use crate::autograd::Var;
use crate::error::{param, Error, Result};
use crate::graphs::{inter_graph_on, intra_graph_on, NodeMode};
use crate::losses::{ce_loss, dicd_loss, inter_loss, intra_loss, l1_loss, msan_loss, total_loss, LossWeights};
use crate::metrics::{fsd_eps, MetricsReport, SegEvaluator, COV_EPS};
use crate::nets::{BottleneckFeature, Component, Models, NetKind, ParamId, Session};
use crate::optim::Adam;
use crate::rng::{derive, rng_from};
use crate::synthdata::{make_coupling_bundle, DomainId, SegSample, Split, SplitName, Tactic};
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    P1Psae,
    P2Scratch,
    P3Msan,
    P4Distill,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::P1Psae, Phase::P2Scratch, Phase::P3Msan, Phase::P4Distill];

    /// Short tag used in errors and directory names.
    pub fn tag(&self) -> &'static str {
        match self {
            Phase::P1Psae => "P1",
            Phase::P2Scratch => "P2",
            Phase::P3Msan => "P3",
            Phase::P4Distill => "P4",
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::P1Psae => "P1_psae",
            Phase::P2Scratch => "P2_scratch",
            Phase::P3Msan => "P3_msan",
            Phase::P4Distill => "P4_distill",
        }
    }

    pub fn prerequisites(&self) -> &'static [Phase] {
        match self {
            Phase::P1Psae | Phase::P2Scratch => &[],
            Phase::P3Msan => &[Phase::P1Psae, Phase::P2Scratch],
            Phase::P4Distill => &[Phase::P1Psae, Phase::P2Scratch, Phase::P3Msan],
        }
    }

    /// Components whose parameters this phase updates.
    pub fn trains(&self) -> &'static [Component] {
        match self {
            Phase::P1Psae => &[Component::Psae],
            Phase::P2Scratch => &[Component::Teacher, Component::Student],
            Phase::P3Msan => &[Component::Tan, Component::San],
            Phase::P4Distill => &[Component::Student],
        }
    }

    /// Everything the phase does not train.
    pub fn frozen(&self) -> Vec<Component> {
        Component::ALL.into_iter().filter(|c| !self.trains().contains(c)).collect()
    }

    fn stream(&self) -> u64 {
        0x5048_0000 + *self as u64
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.tag().eq_ignore_ascii_case(s) || p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| param(format!("unknown phase `{s}`")))
    }
}

/// Progress of the phase currently (or last) running.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhaseState {
    pub phase: Phase,
    pub frozen: Vec<Component>,
    pub epoch: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// P1 only. Masks are cheap and the autoencoder needs many small steps.
    pub batch_size_p1: usize,
    pub lr: f64,
    pub epochs_p1: usize,
    pub epochs_p2: usize,
    pub epochs_p3: usize,
    pub epochs_p4: usize,
    pub tactics: Vec<Tactic>,
    pub seed: u64,
    pub node_mode: NodeMode,
    pub use_intra: bool,
    pub use_inter: bool,
    pub use_cross: bool,
    /// Start P4 from the P2 student instead of a fresh initialization.
    pub warm_start_student: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            batch_size_p1: 1,
            lr: 0.003,
            epochs_p1: 20,
            epochs_p2: 30,
            epochs_p3: 20,
            epochs_p4: 30,
            tactics: Tactic::ALL.to_vec(),
            seed: 0,
            node_mode: NodeMode::SelfProduct,
            use_intra: true,
            use_inter: true,
            use_cross: true,
            warm_start_student: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.batch_size_p1 == 0 {
            return Err(param("batch sizes must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(param(format!("lr must be positive, got {}", self.lr)));
        }
        if self.tactics.len() < 2 {
            return Err(param("at least two distinct tactics are required"));
        }
        for (i, t) in self.tactics.iter().enumerate() {
            if self.tactics[..i].contains(t) {
                return Err(param(format!("duplicate tactic `{t}`")));
            }
        }
        Ok(())
    }

    pub fn epochs(&self, phase: Phase) -> usize {
        match phase {
            Phase::P1Psae => self.epochs_p1,
            Phase::P2Scratch => self.epochs_p2,
            Phase::P3Msan => self.epochs_p3,
            Phase::P4Distill => self.epochs_p4,
        }
    }
}

/// One optimizer step. Terms a phase does not use are 0; `total` is the
/// minimized objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub phase: &'static str,
    pub epoch: usize,
    pub step: usize,
    pub ce: f64,
    pub intra: f64,
    pub inter: f64,
    pub dicd: f64,
    pub total: f64,
}

/// Tensors produced by one phase.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub phase: Phase,
    pub seed: u64,
    pub tensors: Vec<(String, Tensor)>,
}

struct StepOut {
    total: Var,
    ce: f64,
    intra: f64,
    inter: f64,
    dicd: f64,
}

impl StepOut {
    fn total_only(total: Var) -> Self {
        Self {
            total,
            ce: 0.0,
            intra: 0.0,
            inter: 0.0,
            dicd: 0.0,
        }
    }
}

fn check_train_split(split: &Split) -> Result<()> {
    if split.name() != SplitName::TrainA {
        return Err(param(format!("training may only read train_A, got {}", split.name())));
    }
    if split.is_empty() {
        return Err(param("training split is empty"));
    }
    Ok(())
}

fn stack_images(samples: &[&SegSample]) -> Result<Tensor> {
    Tensor::stack(&samples.iter().map(|s| s.image.clone()).collect::<Vec<_>>())
}

fn stack_masks(samples: &[&SegSample]) -> Result<Tensor> {
    Tensor::stack(&samples.iter().map(|s| s.mask.clone()).collect::<Vec<_>>())
}

fn mean_of(s: &mut Session, terms: &[Var]) -> Result<Var> {
    let sum = s.tape.add_all(terms)?;
    Ok(s.tape.scale(sum, 1.0 / terms.len() as f64))
}

struct LoopSpec<'a> {
    label: &'static str,
    trainable: &'a [Component],
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
}

/// Shared epoch/batch loop. `step` records the objective for one batch of
/// training indices on a fresh session.
fn run_loop(
    models: &mut Models,
    state: &mut PhaseState,
    spec: LoopSpec,
    n: usize,
    mut step: impl FnMut(&Models, &mut Session, &[usize], usize) -> Result<StepOut>,
) -> Result<Vec<LossRow>> {
    let mut ids: Vec<ParamId> = spec.trainable.iter().flat_map(|&c| models.store.ids(c)).collect();
    ids.sort();
    let shapes: Vec<Vec<usize>> = ids.iter().map(|&id| models.store.get(id).value.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut opt = Adam::new(spec.lr, &shape_refs);
    let mut rows = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut global = 0;
    for epoch in 0..spec.epochs {
        state.epoch = epoch;
        let mut rng = rng_from(derive(spec.seed, epoch as u64));
        order.shuffle(&mut rng);
        for batch in order.chunks(spec.batch_size) {
            let (row, grads) = {
                let mut s = Session::new(&models.store, true);
                let out = step(models, &mut s, batch, epoch)?;
                let total = s.tape.value(out.total).item();
                if !total.is_finite() {
                    return Err(Error::Divergence {
                        phase: spec.label,
                        step: global,
                        detail: format!("loss is {total}"),
                    });
                }
                s.tape.backward(out.total)?;
                let mut grads: Vec<Tensor> = shapes.iter().map(|sh| Tensor::zeros(sh)).collect();
                for (id, g) in s.param_grads() {
                    let slot = ids.binary_search(&id).map_err(|_| {
                        Error::FrozenUpdate(models.store.get(id).name.clone())
                    })?;
                    grads[slot] = g;
                }
                let row = LossRow {
                    phase: spec.label,
                    epoch,
                    step: global,
                    ce: out.ce,
                    intra: out.intra,
                    inter: out.inter,
                    dicd: out.dicd,
                    total,
                };
                (row, grads)
            };
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Divergence {
                    phase: spec.label,
                    step: global,
                    detail: "non-finite gradient".into(),
                });
            }
            models.store.apply(&ids, &grads, &mut opt)?;
            rows.push(row);
            global += 1;
        }
    }
    Ok(rows)
}

/// Cross reconstruction on anchor latents: `D_TAN(S_S)` and `D_SAN(S_T)`.
/// `s_t` is detached, so nothing flows back towards the teacher side.
pub fn cross_reconstruct(
    models: &Models,
    s: &mut Session,
    s_t: Var,
    s_s: Var,
) -> Result<(BottleneckFeature, BottleneckFeature)> {
    let f_hat_t = models.tan.decode(s, s_s)?;
    let s_t = s.tape.detach(s_t);
    let f_hat_s = models.san.decode(s, s_t)?;
    Ok((f_hat_t, f_hat_s))
}

/// Owns the models and the record of completed phases.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub models: Models,
    pub train: TrainConfig,
    pub weights: LossWeights,
    completed: BTreeSet<Phase>,
    state: Option<PhaseState>,
}

impl Pipeline {
    pub fn new(models: Models, train: TrainConfig, weights: LossWeights) -> Result<Self> {
        train.validate()?;
        weights.validate()?;
        Ok(Self {
            models,
            train,
            weights,
            completed: BTreeSet::new(),
            state: None,
        })
    }

    pub fn is_completed(&self, phase: Phase) -> bool {
        self.completed.contains(&phase)
    }

    pub fn completed(&self) -> Vec<Phase> {
        self.completed.iter().copied().collect()
    }

    pub fn state(&self) -> Option<&PhaseState> {
        self.state.as_ref()
    }

    /// Fails with the first missing prerequisite of `phase`.
    pub fn check_prerequisites(&self, phase: Phase) -> Result<()> {
        match phase.prerequisites().iter().find(|p| !self.completed.contains(p)) {
            Some(p) => Err(Error::MissingPrerequisite(p.tag())),
            None => Ok(()),
        }
    }

    /// Runs one phase on `train` (which must be the `train_A` split).
    pub fn run_phase(&mut self, phase: Phase, train: &Split) -> Result<Vec<LossRow>> {
        self.check_prerequisites(phase)?;
        check_train_split(train)?;
        for c in Component::ALL {
            self.models.store.set_frozen(c, !phase.trains().contains(&c));
        }
        let mut state = PhaseState {
            phase,
            frozen: phase.frozen(),
            epoch: 0,
            seed: self.train.seed,
        };
        let rows = match phase {
            Phase::P1Psae => self.train_psae(&mut state, train),
            Phase::P2Scratch => {
                let mut rows = self.train_scratch(&mut state, NetKind::Teacher, train)?;
                rows.extend(self.train_scratch(&mut state, NetKind::Student, train)?);
                Ok(rows)
            }
            Phase::P3Msan => self.train_msan(&mut state, train),
            Phase::P4Distill => self.distill_student(&mut state, train),
        };
        self.state = Some(state);
        let rows = rows?;
        for &c in phase.trains() {
            self.models.store.quantize_f32(c);
        }
        self.completed.insert(phase);
        Ok(rows)
    }

    fn loop_spec<'a>(&self, label: &'static str, phase: Phase, trainable: &'a [Component], part: u64) -> LoopSpec<'a> {
        LoopSpec {
            label,
            trainable,
            epochs: self.train.epochs(phase),
            batch_size: if phase == Phase::P1Psae { self.train.batch_size_p1 } else { self.train.batch_size },
            lr: self.train.lr,
            seed: derive(derive(self.train.seed, phase.stream()), part),
        }
    }

    fn train_psae(&mut self, state: &mut PhaseState, split: &Split) -> Result<Vec<LossRow>> {
        let spec = self.loop_spec("P1_psae", Phase::P1Psae, &[Component::Psae], 0);
        run_loop(&mut self.models, state, spec, split.len(), |m, s, idx, _| {
            let samples: Vec<&SegSample> = idx.iter().map(|&i| split.get(i)).collect();
            let y = s.input(stack_masks(&samples)?);
            let z = m.psae.encode(s, y)?;
            let rec = m.psae.decode(s, z)?;
            Ok(StepOut::total_only(l1_loss(&mut s.tape, y, rec)?))
        })
    }

    fn train_scratch(&mut self, state: &mut PhaseState, kind: NetKind, split: &Split) -> Result<Vec<LossRow>> {
        let (label, trainable): (&'static str, &[Component]) = match kind {
            NetKind::Teacher => ("P2_teacher", &[Component::Teacher]),
            NetKind::Student => ("P2_student", &[Component::Student]),
        };
        let spec = self.loop_spec(label, Phase::P2Scratch, trainable, kind as u64);
        run_loop(&mut self.models, state, spec, split.len(), |m, s, idx, _| {
            let samples: Vec<&SegSample> = idx.iter().map(|&i| split.get(i)).collect();
            let x = s.input(stack_images(&samples)?);
            let y = s.input(stack_masks(&samples)?);
            let out = m.segnet(kind).forward(s, x)?;
            let ce = ce_loss(&mut s.tape, out.prediction, y)?;
            let mut o = StepOut::total_only(ce);
            o.ce = s.tape.value(ce).item();
            Ok(o)
        })
    }

    fn train_msan(&mut self, state: &mut PhaseState, split: &Split) -> Result<Vec<LossRow>> {
        let lambda = self.weights.lambda_msan;
        let spec = self.loop_spec("P3_msan", Phase::P3Msan, &[Component::Tan, Component::San], 0);
        run_loop(&mut self.models, state, spec, split.len(), |m, s, idx, _| {
            let samples: Vec<&SegSample> = idx.iter().map(|&i| split.get(i)).collect();
            let x = s.input(stack_images(&samples)?);
            let y = s.input(stack_masks(&samples)?);
            let s_y = m.psae.encode(s, y)?;
            let mut terms = Vec::with_capacity(2);
            for kind in [NetKind::Teacher, NetKind::Student] {
                let (f, _) = m.segnet(kind).encode(s, x)?;
                let header = m.header(kind);
                let z = header.encode(s, f)?;
                let f_hat = header.decode(s, z)?;
                terms.push(msan_loss(&mut s.tape, f.var, f_hat.var, z, s_y, lambda)?);
            }
            Ok(StepOut::total_only(s.tape.add_all(&terms)?))
        })
    }

    fn distill_student(&mut self, state: &mut PhaseState, split: &Split) -> Result<Vec<LossRow>> {
        if !self.train.warm_start_student {
            let seed = derive(self.train.seed, Phase::P4Distill.stream());
            self.models.reinit(Component::Student, seed)?;
        }
        let cfg = self.train.clone();
        let w = self.weights;
        let bundle_seed = derive(self.train.seed, 0xB0D1E);
        let spec = self.loop_spec("P4_distill", Phase::P4Distill, &[Component::Student], 0);
        run_loop(&mut self.models, state, spec, split.len(), |m, s, idx, epoch| {
            distill_step(m, s, split, idx, derive(bundle_seed, epoch as u64), &cfg, &w)
        })
    }

    /// Tensors of every component `phase` trains.
    pub fn checkpoint(&self, phase: Phase) -> Result<Checkpoint> {
        if !self.is_completed(phase) {
            return Err(Error::Checkpoint(format!("phase {} has not completed", phase.tag())));
        }
        let tensors = phase.trains().iter().flat_map(|&c| self.models.store.snapshot(c)).collect();
        Ok(Checkpoint {
            phase,
            seed: self.train.seed,
            tensors,
        })
    }

    /// Loads a checkpoint and marks its phase completed.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for (name, _) in &ckpt.tensors {
            let ok = ckpt.phase.trains().iter().any(|c| name.starts_with(c.as_str()) && name[c.as_str().len()..].starts_with('.'));
            if !ok {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` does not belong to phase {}",
                    ckpt.phase.tag()
                )));
            }
        }
        self.models.store.load(&ckpt.tensors)?;
        self.completed.insert(ckpt.phase);
        Ok(())
    }
}

fn distill_step(
    m: &Models,
    s: &mut Session,
    split: &Split,
    idx: &[usize],
    seed: u64,
    cfg: &TrainConfig,
    w: &LossWeights,
) -> Result<StepOut> {
    let samples: Vec<&SegSample> = idx.iter().map(|&i| split.get(i)).collect();
    let b = samples.len();
    let k = cfg.tactics.len();
    let use_graphs = cfg.use_intra || cfg.use_inter;
    let mut images: Vec<Tensor> = samples.iter().map(|smp| smp.image.clone()).collect();
    if use_graphs {
        for (&i, smp) in idx.iter().zip(&samples) {
            let bundle = make_coupling_bundle(smp, &cfg.tactics, derive(seed, i as u64))?;
            images.extend(bundle.augmented);
        }
    }
    let x = s.input(Tensor::stack(&images)?);
    let y = s.input(stack_masks(&samples)?);
    let x_anchor = s.tape.slice_first(x, 0, b)?;

    let student = m.student.forward(s, x)?;
    let pred = s.tape.slice_first(student.prediction, 0, b)?;
    let ce = ce_loss(&mut s.tape, pred, y)?;

    let mut intra = None;
    let mut inter = None;
    let mut dicd = None;
    if use_graphs || cfg.use_cross {
        let teacher = m.teacher.forward(s, x)?;
        let s_t = m.tan.encode(s, teacher.bottleneck)?;
        let s_s = m.san.encode(s, student.bottleneck)?;
        if use_graphs {
            let mut intra_terms = Vec::with_capacity(b);
            let mut inter_terms = Vec::with_capacity(b);
            for j in 0..b {
                let rows = |s: &mut Session, z: Var| -> Result<(Var, Vec<Var>)> {
                    let anchor = s.tape.row(z, j)?;
                    let augs = (0..k).map(|t| s.tape.row(z, b + j * k + t)).collect::<Result<Vec<_>>>()?;
                    Ok((anchor, augs))
                };
                let (at, augs_t) = rows(s, s_t)?;
                let (as_, augs_s) = rows(s, s_s)?;
                if cfg.use_intra {
                    let gt = intra_graph_on(&mut s.tape, at, &augs_t, cfg.node_mode)?;
                    let gs = intra_graph_on(&mut s.tape, as_, &augs_s, cfg.node_mode)?;
                    intra_terms.push(intra_loss(&mut s.tape, &gt, &gs)?);
                }
                if cfg.use_inter {
                    let gt = inter_graph_on(&mut s.tape, &augs_t)?;
                    let gs = inter_graph_on(&mut s.tape, &augs_s)?;
                    inter_terms.push(inter_loss(&mut s.tape, &gt, &gs)?);
                }
            }
            if cfg.use_intra {
                intra = Some(mean_of(s, &intra_terms)?);
            }
            if cfg.use_inter {
                inter = Some(mean_of(s, &inter_terms)?);
            }
        }
        if cfg.use_cross {
            let st_a = s.tape.slice_first(s_t, 0, b)?;
            let ss_a = s.tape.slice_first(s_s, 0, b)?;
            let (f_hat_t, f_hat_s) = cross_reconstruct(m, s, st_a, ss_a)?;
            let anchors = |s: &mut Session, vs: &[Var]| -> Result<Vec<Var>> {
                vs.iter().map(|&v| s.tape.slice_first(v, 0, b)).collect()
            };
            let skips_t = anchors(s, &teacher.skips)?;
            let skips_s = anchors(s, &student.skips)?;
            let yrec_t = m.teacher.decode(s, f_hat_t.var, &skips_t, x_anchor)?;
            let yrec_s = m.student.decode(s, f_hat_s.var, &skips_s, x_anchor)?;
            let y_t = s.tape.slice_first(teacher.prediction, 0, b)?;
            dicd = Some(dicd_loss(&mut s.tape, y_t, yrec_t, yrec_s)?);
        }
    }
    let value = |s: &Session, v: Option<Var>| v.map_or(0.0, |v| s.tape.value(v).item());
    let total = total_loss(&mut s.tape, ce, intra, inter, dicd, w)?;
    Ok(StepOut {
        total,
        ce: s.tape.value(ce).item(),
        intra: value(s, intra),
        inter: value(s, inter),
        dicd: value(s, dicd),
    })
}

const EVAL_BATCH: usize = 16;

fn split_domain(split: &Split) -> DomainId {
    match split.name() {
        SplitName::TestB => DomainId::B,
        _ => DomainId::A,
    }
}

/// Eval-mode predictions for every sample of `split`, each `[1, H, W]`.
pub fn predict_split(models: &Models, kind: NetKind, split: &Split) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(split.len());
    for start in (0..split.len()).step_by(EVAL_BATCH) {
        let samples: Vec<&SegSample> = (start..(start + EVAL_BATCH).min(split.len())).map(|i| split.get(i)).collect();
        let (_, pred) = models.forward_segnet(kind, &stack_images(&samples)?)?;
        out.extend((0..samples.len()).map(|i| pred.index_first(i)));
    }
    Ok(out)
}

/// Latents of `split` through `kind` and its header, and P-SAE latents of
/// the matching masks. One anchor per sample, no augmentation.
pub fn split_latents(models: &Models, kind: NetKind, split: &Split) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let c = models.cfg.latent_dim;
    let mut zm = Vec::with_capacity(split.len());
    let mut zy = Vec::with_capacity(split.len());
    for start in (0..split.len()).step_by(EVAL_BATCH) {
        let samples: Vec<&SegSample> = (start..(start + EVAL_BATCH).min(split.len())).map(|i| split.get(i)).collect();
        let a = models.image_latents(kind, &stack_images(&samples)?)?;
        let b = models.psae_encode(&stack_masks(&samples)?)?;
        zm.extend(a.data().chunks(c).map(|r| r.to_vec()));
        zy.extend(b.data().chunks(c).map(|r| r.to_vec()));
    }
    Ok((zm, zy))
}

pub fn fsd_split(models: &Models, kind: NetKind, split: &Split) -> Result<f64> {
    fsd_split_eps(models, kind, split, COV_EPS)
}

pub fn fsd_split_eps(models: &Models, kind: NetKind, split: &Split, eps: f64) -> Result<f64> {
    let (zm, zy) = split_latents(models, kind, split)?;
    fsd_eps(&zm, &zy, eps)
}

/// Mean `l1(S_Y, S)` per sample over `split`: how far header latents sit
/// from the mask latents.
pub fn alignment_error(models: &Models, kind: NetKind, split: &Split) -> Result<f64> {
    let (zm, zy) = split_latents(models, kind, split)?;
    let total: f64 = zm
        .iter()
        .zip(&zy)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
        .sum();
    Ok(total / zm.len().max(1) as f64)
}

/// Evaluation settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub threshold: f64,
    pub cov_eps: f64,
    /// Compute FSD (needs trained headers and more samples than the latent width).
    pub with_fsd: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: crate::metrics::THRESHOLD,
            cov_eps: COV_EPS,
            with_fsd: true,
        }
    }
}

/// Pooled metrics of `kind` on `split`. FSD is skipped when disabled or
/// when the split is too small for the latent width.
pub fn evaluate(models: &Models, kind: NetKind, split: &Split, ec: &EvalConfig) -> Result<MetricsReport> {
    let preds = predict_split(models, kind, split)?;
    let mut ev = SegEvaluator::new(ec.threshold);
    for (i, p) in preds.iter().enumerate() {
        ev.add(p.data(), split.get(i).mask.data())?;
    }
    let fsd = if ec.with_fsd && split.len() > models.cfg.latent_dim {
        Some(fsd_split_eps(models, kind, split, ec.cov_eps)?)
    } else {
        None
    };
    ev.finish(split_domain(split), fsd)
}

/// Mean of `total` per epoch, in epoch order.
pub fn epoch_means(rows: &[LossRow]) -> Vec<f64> {
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for r in rows {
        if sums.len() <= r.epoch {
            sums.resize(r.epoch + 1, (0.0, 0));
        }
        sums[r.epoch].0 += r.total;
        sums[r.epoch].1 += 1;
    }
    sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
}
