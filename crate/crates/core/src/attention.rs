//! Distance-aware cross-slice attention.
//!
//! Each candidate slice `j` gets the logit `sim(F_t, F_j) · exp(-λ·d²)` and
//! the weights are the softmax of those logits. The weights then mix the
//! patch-feature grids of the candidates into one fused grid.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Initial value of the learned distance decay rate.
pub const LAMBDA_INIT: f64 = 0.1;

/// Epsilon of the layer normalisation applied after fusion.
pub const FUSE_LN_EPS: f64 = 1e-5;

/// `exp(-λ·d²)`.
pub fn distance_modulation(d: f64, lambda: f64) -> Result<f64> {
    check_distance(d)?;
    check_lambda(lambda)?;
    Ok((-lambda * d * d).exp())
}

fn check_distance(d: f64) -> Result<()> {
    if !d.is_finite() || d < 0.0 {
        return Err(Error::domain("distance_modulation", format!("distance must be finite and >= 0, got {d}")));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::domain("distance_modulation", format!("lambda must be finite and >= 0, got {lambda}")));
    }
    Ok(())
}

/// Query embedding plus candidate embeddings and their physical distances.
#[derive(Debug, Clone)]
pub struct AttentionContext {
    pub query: Tensor,
    pub candidates: Vec<Tensor>,
    pub distances: Vec<f64>,
}

impl AttentionContext {
    pub fn new(query: Tensor, candidates: Vec<Tensor>, distances: Vec<f64>) -> Result<Self> {
        if candidates.len() != distances.len() {
            return Err(Error::contract(
                "attention_context",
                format!("{} candidates but {} distances", candidates.len(), distances.len()),
            ));
        }
        for &d in &distances {
            check_distance(d)?;
        }
        Ok(Self {
            query,
            candidates,
            distances,
        })
    }

    /// Puts the query itself in front of `memory` at distance 0.
    pub fn with_self(query: Tensor, memory: Vec<Tensor>, mut distances: Vec<f64>) -> Result<Self> {
        let mut candidates = Vec::with_capacity(memory.len() + 1);
        candidates.push(query.clone());
        candidates.extend(memory);
        distances.insert(0, 0.0);
        Self::new(query, candidates, distances)
    }
}

/// Attention weights over `candidates` on the graph.
///
/// `lambda` must be a single-element node holding a non-negative value.
pub fn cross_slice_weights_graph(
    g: &mut Graph,
    query: Var,
    candidates: &[Var],
    distances: &[f64],
    lambda: Var,
) -> Result<Var> {
    if candidates.is_empty() {
        return Err(Error::contract("cross_slice_weights", "empty context"));
    }
    if candidates.len() != distances.len() {
        return Err(Error::contract(
            "cross_slice_weights",
            format!("{} candidates but {} distances", candidates.len(), distances.len()),
        ));
    }
    check_lambda(g.scalar_value(lambda))?;
    let mut logits = Vec::with_capacity(candidates.len());
    for (&c, &d) in candidates.iter().zip(distances) {
        check_distance(d)?;
        let sim = g.cosine_sim(query, c)?;
        let phi = if d == 0.0 {
            // exp(-λ·0) is exactly 1 for every λ
            g.scalar(1.0)
        } else {
            let e = g.scale(lambda, -d * d);
            g.exp(e)
        };
        logits.push(g.mul(sim, phi)?);
    }
    let logits = g.concat(&logits)?;
    g.softmax(logits)
}

/// Attention weights for a context of plain tensors.
pub fn cross_slice_weights(ctx: &AttentionContext, lambda: f64) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let q = g.constant(ctx.query.clone());
    let cands: Vec<Var> = ctx.candidates.iter().map(|c| g.constant(c.clone())).collect();
    let l = g.scalar(lambda);
    let w = cross_slice_weights_graph(&mut g, q, &cands, &ctx.distances, l)?;
    Ok(g.data(w).to_vec())
}

/// `layer_norm(α₀·self + Σ αⱼ·memoryⱼ)`; `weights[0]` belongs to `current`.
pub fn fuse_memory_graph(g: &mut Graph, current: Var, memory: &[Var], weights: Var) -> Result<Var> {
    if g.value(weights).len() != memory.len() + 1 {
        return Err(Error::dim("fuse_memory", g.shape(weights), &[memory.len() + 1]));
    }
    let shape = g.shape(current).to_vec();
    for &m in memory {
        if g.shape(m) != shape.as_slice() {
            return Err(Error::dim("fuse_memory", &shape, g.shape(m)));
        }
    }
    let a0 = g.index(weights, 0)?;
    let mut acc = g.scale_by(current, a0)?;
    for (j, &m) in memory.iter().enumerate() {
        let aj = g.index(weights, j + 1)?;
        let term = g.scale_by(m, aj)?;
        acc = g.add(acc, term)?;
    }
    g.layer_norm(acc, FUSE_LN_EPS)
}

pub fn fuse_memory(current: &Tensor, memory: &[Tensor], weights: &[f64]) -> Result<Tensor> {
    let mut g = Graph::new();
    let c = g.constant(current.clone());
    let m: Vec<Var> = memory.iter().map(|t| g.constant(t.clone())).collect();
    let w = g.constant(Tensor::vector(weights.to_vec()));
    let out = fuse_memory_graph(&mut g, c, &m, w)?;
    Ok(g.value(out).clone())
}
