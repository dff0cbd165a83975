//! Intra-coupling and inter-coupling contrastive graphs over latent vectors.
//!
//! Graph construction is recorded on a [`Tape`] so distillation losses can
//! back-propagate into the latents. The plain-value builders run the same
//! code on a throwaway tape.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{cosine_values, Tape, Var};
use crate::error::{param, Result};
use crate::Tensor;

/// How augmented intra-graph nodes are formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NodeMode {
    /// Each node is the outer product of its own latent with itself.
    #[default]
    SelfProduct,
    /// Augmented nodes are anchor ⊗ augmented (not symmetric).
    CrossProduct,
}

/// Intra-coupling graph with plain values. Matrices are row-major C × C.
#[derive(Clone, Debug, PartialEq)]
pub struct IntraGraph {
    pub c: usize,
    pub anchor_node: Vec<f64>,
    pub aug_nodes: Vec<Vec<f64>>,
    pub edges: Vec<f64>,
}

/// Inter-coupling graph with plain values; `edges` is row-major K × K.
#[derive(Clone, Debug, PartialEq)]
pub struct InterGraph {
    pub c: usize,
    pub nodes: Vec<Vec<f64>>,
    pub edges: Vec<f64>,
}

impl InterGraph {
    pub fn k(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge(&self, i: usize, j: usize) -> f64 {
        self.edges[i * self.k() + j]
    }
}

/// Intra-coupling graph recorded on a tape.
#[derive(Clone, Debug)]
pub struct IntraGraphVars {
    pub anchor_node: Var,
    pub aug_nodes: Vec<Var>,
    /// `[K]`
    pub edges: Var,
}

/// Inter-coupling graph recorded on a tape.
#[derive(Clone, Debug)]
pub struct InterGraphVars {
    pub nodes: Vec<Var>,
    /// `[K, K]`
    pub edges: Var,
}

/// `a·b / (‖a‖‖b‖)`, or 0 when either norm is below 1e-12.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(param(format!("cosine_similarity width mismatch: {} vs {}", a.len(), b.len())));
    }
    Ok(cosine_values(a, b))
}

/// `vᵀv` as a row-major C × C matrix.
pub fn outer_node(v: &[f64]) -> Vec<f64> {
    v.iter().flat_map(|&x| v.iter().map(move |&y| x * y)).collect()
}

fn latent_width(tape: &Tape, vs: &[Var], op: &str) -> Result<usize> {
    let c = match tape.shape(vs[0]) {
        [c] => *c,
        s => return Err(param(format!("{op}: latents must be vectors, got {s:?}"))),
    };
    for &v in vs {
        if tape.shape(v) != [c] {
            return Err(param(format!("{op}: width mismatch, {:?} vs [{c}]", tape.shape(v))));
        }
    }
    Ok(c)
}

/// Records an intra-coupling graph: one anchor node, K augmented nodes and
/// the K anchor-to-augmented cosine edges.
pub fn intra_graph_on(tape: &mut Tape, anchor: Var, augs: &[Var], mode: NodeMode) -> Result<IntraGraphVars> {
    if augs.is_empty() {
        return Err(param("build_intra_graph needs at least one augmented latent"));
    }
    let mut all = Vec::with_capacity(augs.len() + 1);
    all.push(anchor);
    all.extend_from_slice(augs);
    let c = latent_width(tape, &all, "build_intra_graph")?;
    let anchor_node = tape.outer(anchor)?;
    let mut aug_nodes = Vec::with_capacity(augs.len());
    for &a in augs {
        let node = match mode {
            NodeMode::SelfProduct => tape.outer(a)?,
            NodeMode::CrossProduct => {
                let col = tape.reshape(anchor, &[c, 1])?;
                let row = tape.reshape(a, &[1, c])?;
                tape.matmul(col, row)?
            }
        };
        aug_nodes.push(node);
    }
    let mut edges = Vec::with_capacity(augs.len());
    for &n in &aug_nodes {
        edges.push(tape.cosine(anchor_node, n)?);
    }
    let edges = tape.stack(&edges)?;
    Ok(IntraGraphVars {
        anchor_node,
        aug_nodes,
        edges,
    })
}

/// Records an inter-coupling graph over the K augmented latents only.
pub fn inter_graph_on(tape: &mut Tape, augs: &[Var]) -> Result<InterGraphVars> {
    if augs.len() < 2 {
        return Err(param("build_inter_graph needs at least two augmented latents"));
    }
    latent_width(tape, augs, "build_inter_graph")?;
    let k = augs.len();
    let mut edges = Vec::with_capacity(k * k);
    for &a in augs {
        for &b in augs {
            edges.push(tape.cosine(a, b)?);
        }
    }
    let flat = tape.stack(&edges)?;
    let edges = tape.reshape(flat, &[k, k])?;
    Ok(InterGraphVars {
        nodes: augs.to_vec(),
        edges,
    })
}

fn leaves(tape: &mut Tape, vs: &[Vec<f64>]) -> Vec<Var> {
    vs.iter().map(|v| tape.constant(Tensor::from_vec(v.clone()))).collect()
}

pub fn build_intra_graph(anchor: &[f64], augs: &[Vec<f64>], mode: NodeMode) -> Result<IntraGraph> {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_vec(anchor.to_vec()));
    let vs = leaves(&mut tape, augs);
    let g = intra_graph_on(&mut tape, a, &vs, mode)?;
    Ok(IntraGraph {
        c: anchor.len(),
        anchor_node: tape.value(g.anchor_node).data().to_vec(),
        aug_nodes: g.aug_nodes.iter().map(|&n| tape.value(n).data().to_vec()).collect(),
        edges: tape.value(g.edges).data().to_vec(),
    })
}

pub fn build_inter_graph(augs: &[Vec<f64>]) -> Result<InterGraph> {
    let mut tape = Tape::new();
    let vs = leaves(&mut tape, augs);
    let g = inter_graph_on(&mut tape, &vs)?;
    Ok(InterGraph {
        c: augs[0].len(),
        nodes: augs.to_vec(),
        edges: tape.value(g.edges).data().to_vec(),
    })
}
