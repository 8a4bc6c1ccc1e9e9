//! Globally shared parameters and the forward pass: gated max-reduction
//! message passing over a text graph, sum readout through ReLU + dropout +
//! a linear map, softmax, and cross-entropy loss.
//!
//! Everything is generic over [`Real`] so training runs in f32 while
//! gradient verification runs the identical code path in f64.

use crate::edges::PmiTable;
use crate::error::{Error, Result};
use crate::graph::TextGraph;
use crate::real::Real;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Neighborhood reduction used by message passing. `Max` is the model;
/// `Mean` exists for the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Max,
    Mean,
}

impl std::str::FromStr for Reduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "max" => Ok(Reduction::Max),
            "mean" => Ok(Reduction::Mean),
            other => Err(Error::Config(format!(
                "unknown reduction {other:?} (expected `max` or `mean`)"
            ))),
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Reduction::Max => "max",
            Reduction::Mean => "mean",
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModelConfig {
    pub reduction: Reduction,
    /// Keep probability for inverted dropout on the readout vector.
    pub dropout_keep: f64,
    /// When false, edge weights come from a PMI table and receive no
    /// gradient.
    pub edges_trainable: bool,
    /// Number of collect-and-update applications; each feeds the updated
    /// representations back in.
    pub mpm_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            reduction: Reduction::Max,
            dropout_keep: 0.5,
            edges_trainable: true,
            mpm_steps: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::Config(format!(
                "dropout keep probability must be in (0, 1], got {}",
                self.dropout_keep
            )));
        }
        if self.mpm_steps < 1 {
            return Err(Error::Config("mpm_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// All trainable state. Node and edge parameters are shared across every
/// document graph; a document only selects rows/indices from here.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    /// One row per vocabulary word: the r_i vectors. |V| × d.
    pub embeddings: Array2<F>,
    /// One weight per edge-vocabulary index; the last is the public edge.
    pub edge_weights: Array1<F>,
    /// One gate per vocabulary word, unconstrained.
    pub gates: Array1<F>,
    /// Classification map, d × c.
    pub dense_w: Array2<F>,
    pub dense_b: Array1<F>,
}

impl<F: Real> Params<F> {
    pub fn vocab_size(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn edge_param_count(&self) -> usize {
        self.edge_weights.len()
    }

    pub fn num_classes(&self) -> usize {
        self.dense_b.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.gates.len() != self.vocab_size() {
            return Err(Error::Config(format!(
                "gate count {} != vocabulary size {}",
                self.gates.len(),
                self.vocab_size()
            )));
        }
        if self.dense_w.nrows() != self.dim() || self.dense_w.ncols() != self.num_classes() {
            return Err(Error::Config(format!(
                "dense map is {}x{}, expected {}x{}",
                self.dense_w.nrows(),
                self.dense_w.ncols(),
                self.dim(),
                self.num_classes()
            )));
        }
        if !self.all_finite() {
            return Err(Error::Config("parameters contain non-finite values".into()));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.embeddings.iter().all(|v| v.is_finite())
            && self.edge_weights.iter().all(|v| v.is_finite())
            && self.gates.iter().all(|v| v.is_finite())
            && self.dense_w.iter().all(|v| v.is_finite())
            && self.dense_b.iter().all(|v| v.is_finite())
    }

    /// Convert precision (f32 <-> f64), e.g. for running the gradient check
    /// in f64 on f32 training parameters.
    pub fn convert<G: Real>(&self) -> Params<G> {
        Params {
            embeddings: self.embeddings.mapv(|v| G::from_f64(v.to_f64())),
            edge_weights: self.edge_weights.mapv(|v| G::from_f64(v.to_f64())),
            gates: self.gates.mapv(|v| G::from_f64(v.to_f64())),
            dense_w: self.dense_w.mapv(|v| G::from_f64(v.to_f64())),
            dense_b: self.dense_b.mapv(|v| G::from_f64(v.to_f64())),
        }
    }
}

/// Fresh parameters: embeddings from `init` when given (pretrained) else
/// uniform ±0.01; edge weights 1.0 so the first message pass is a plain
/// windowed pooling; gates 0.5 (even blend); dense map Glorot uniform
/// ±sqrt(6/(d+c)); bias zero. Deterministic per seed.
pub fn initialize_params<F: Real>(
    vocab_size: usize,
    dim: usize,
    edge_param_count: usize,
    num_classes: usize,
    init: Option<&crate::data::EmbeddingInit>,
    seed: u64,
) -> Result<Params<F>> {
    if dim < 1 {
        return Err(Error::Config("embedding dimension must be >= 1".into()));
    }
    if num_classes < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    if vocab_size < 1 || edge_param_count < 1 {
        return Err(Error::Config("empty vocabulary or edge table".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embeddings = match init {
        Some(e) => {
            if e.matrix.nrows() != vocab_size || e.matrix.ncols() != dim {
                return Err(Error::Config(format!(
                    "embedding init is {}x{}, expected {}x{}",
                    e.matrix.nrows(),
                    e.matrix.ncols(),
                    vocab_size,
                    dim
                )));
            }
            e.matrix.mapv(F::from_f64)
        }
        None => {
            let mut m = Array2::<F>::zeros((vocab_size, dim));
            for v in m.iter_mut() {
                *v = F::from_f64(rng.random_range(-0.01..0.01));
            }
            m
        }
    };
    let glorot = (6.0 / (dim + num_classes) as f64).sqrt();
    let mut dense_w = Array2::<F>::zeros((dim, num_classes));
    for v in dense_w.iter_mut() {
        *v = F::from_f64(rng.random_range(-glorot..glorot));
    }
    Ok(Params {
        embeddings,
        edge_weights: Array1::from_elem(edge_param_count, F::from_f64(1.0)),
        gates: Array1::from_elem(vocab_size, F::from_f64(0.5)),
        dense_w,
        dense_b: Array1::zeros(num_classes),
    })
}

/// Where forward evaluation reads edge weights from.
#[derive(Clone, Copy)]
pub enum EdgeMode<'a> {
    /// Weight = trainable parameter at the graph's edge index.
    Trainable,
    /// Weight = PMI of the (sender, receiver) word pair; 0 when absent.
    FixedPmi(&'a PmiTable),
}

impl<'a> EdgeMode<'a> {
    pub fn from_config(config: &ModelConfig, pmi: Option<&'a PmiTable>) -> Result<Self> {
        if config.edges_trainable {
            Ok(EdgeMode::Trainable)
        } else {
            pmi.map(EdgeMode::FixedPmi).ok_or_else(|| {
                Error::Config("fixed-PMI edge mode requires a PMI table".into())
            })
        }
    }
}

#[inline]
pub(crate) fn edge_weight<F: Real>(
    params: &Params<F>,
    graph: &TextGraph,
    node: usize,
    slot: usize,
    mode: EdgeMode<'_>,
) -> F {
    match mode {
        EdgeMode::Trainable => params.edge_weights[graph.edge_refs[node][slot] as usize],
        EdgeMode::FixedPmi(t) => {
            let sender = graph.node_words[graph.neighbors[node][slot]];
            let receiver = graph.node_words[node];
            F::from_f64(t.get(sender, receiver))
        }
    }
}

/// Everything one message-passing step needs to replay for the backward
/// pass.
#[derive(Debug, Clone)]
pub struct StepCache<F> {
    /// Node representations fed into this step, n × d.
    pub inputs: Array2<F>,
    /// Reduced messages M, n × d.
    pub messages: Array2<F>,
    /// For max reduction: winning neighbor slot per (node, dim). Lowest
    /// slot wins ties so the backward routing is deterministic.
    pub argmax: Option<Array2<u32>>,
}

fn message_step<F: Real>(
    graph: &TextGraph,
    params: &Params<F>,
    reduction: Reduction,
    mode: EdgeMode<'_>,
    inputs: &Array2<F>,
) -> StepCache<F> {
    let n = graph.num_nodes();
    let d = inputs.ncols();
    let mut messages = Array2::<F>::zeros((n, d));
    let mut argmax = match reduction {
        Reduction::Max => Some(Array2::<u32>::zeros((n, d))),
        Reduction::Mean => None,
    };
    for i in 0..n {
        let nbrs = &graph.neighbors[i];
        match reduction {
            Reduction::Max => {
                let am = argmax.as_mut().unwrap();
                for t in 0..d {
                    let mut best = F::neg_infinity();
                    let mut best_slot = 0u32;
                    for (slot, &j) in nbrs.iter().enumerate() {
                        let e = edge_weight(params, graph, i, slot, mode);
                        let m = e * inputs[[j, t]];
                        // Strict > keeps the lowest slot on ties.
                        if m > best {
                            best = m;
                            best_slot = slot as u32;
                        }
                    }
                    messages[[i, t]] = best;
                    am[[i, t]] = best_slot;
                }
            }
            Reduction::Mean => {
                let inv = F::from_f64(1.0 / nbrs.len() as f64);
                for t in 0..d {
                    let mut sum = F::zero();
                    for (slot, &j) in nbrs.iter().enumerate() {
                        let e = edge_weight(params, graph, i, slot, mode);
                        sum += e * inputs[[j, t]];
                    }
                    messages[[i, t]] = sum * inv;
                }
            }
        }
    }
    StepCache {
        inputs: inputs.clone(),
        messages,
        argmax,
    }
}

/// Run `mpm_steps` rounds of collect-and-update. Per node n and dimension
/// t: `M_n[t] = reduce_{a in N(n)} e_an * r_a[t]`, then
/// `r'_n = (1 - eta_n) * M_n + eta_n * r_n` with the gate of n's word.
/// Returns the final representations and one cache entry per step.
pub fn message_pass<F: Real>(
    graph: &TextGraph,
    params: &Params<F>,
    config: &ModelConfig,
    pmi: Option<&PmiTable>,
) -> Result<(Array2<F>, Vec<StepCache<F>>)> {
    config.validate()?;
    let mode = EdgeMode::from_config(config, pmi)?;
    let n = graph.num_nodes();
    let d = params.dim();
    let mut reps = Array2::<F>::zeros((n, d));
    for (i, &w) in graph.node_words.iter().enumerate() {
        for t in 0..d {
            reps[[i, t]] = params.embeddings[[w as usize, t]];
        }
    }
    let mut steps = Vec::with_capacity(config.mpm_steps);
    for _ in 0..config.mpm_steps {
        let cache = message_step(graph, params, config.reduction, mode, &reps);
        let mut next = Array2::<F>::zeros((n, d));
        for (i, &w) in graph.node_words.iter().enumerate() {
            let eta = params.gates[w as usize];
            let one_minus = F::one() - eta;
            for t in 0..d {
                next[[i, t]] = one_minus * cache.messages[[i, t]] + eta * reps[[i, t]];
            }
        }
        steps.push(cache);
        reps = next;
    }
    Ok((reps, steps))
}

/// Readout intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ReadoutCache<F> {
    /// s = Σ_n r'_n.
    pub sum: Array1<F>,
    /// h = ReLU(s).
    pub hidden: Array1<F>,
    /// Per-unit keep decisions when dropout was applied; `None` in eval
    /// mode or with keep = 1.
    pub keep_mask: Option<Vec<bool>>,
    /// h after inverted dropout (kept units scaled by 1/keep).
    pub dropped: Array1<F>,
    /// z = h·W + b.
    pub logits: Array1<F>,
}

/// Sum-pool node representations, apply ReLU, inverted dropout (train mode
/// only, i.e. when an RNG is supplied), and the linear classification map.
pub fn readout<F: Real>(
    reps: &Array2<F>,
    params: &Params<F>,
    dropout_keep: f64,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> ReadoutCache<F> {
    let d = params.dim();
    let c = params.num_classes();
    let mut sum = Array1::<F>::zeros(d);
    for row in reps.rows() {
        for t in 0..d {
            sum[t] += row[t];
        }
    }
    let hidden = sum.mapv(|v| if v > F::zero() { v } else { F::zero() });
    let (dropped, keep_mask) = match dropout_rng {
        Some(rng) if dropout_keep < 1.0 => {
            let scale = F::from_f64(1.0 / dropout_keep);
            let mask: Vec<bool> = (0..d).map(|_| rng.random::<f64>() < dropout_keep).collect();
            let mut dropped = hidden.clone();
            for (t, &keep) in mask.iter().enumerate() {
                dropped[t] = if keep { dropped[t] * scale } else { F::zero() };
            }
            (dropped, Some(mask))
        }
        _ => (hidden.clone(), None),
    };
    let mut logits = params.dense_b.clone();
    for u in 0..d {
        let h = dropped[u];
        if h != F::zero() {
            for v in 0..c {
                logits[v] += h * params.dense_w[[u, v]];
            }
        }
    }
    ReadoutCache {
        sum,
        hidden,
        keep_mask,
        dropped,
        logits,
    }
}

/// Numerically stable softmax (max-shifted).
pub fn softmax<F: Real>(logits: &Array1<F>) -> Array1<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let exps = logits.mapv(|z| (z - max).exp());
    let total: F = exps.iter().copied().sum();
    exps.mapv(|e| e / total)
}

fn log_sum_exp<F: Real>(logits: &Array1<F>) -> F {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let sum: F = logits.iter().map(|&z| (z - max).exp()).sum();
    max + sum.ln()
}

/// Cross-entropy −log y[label], computed from logits via log-sum-exp so
/// extreme logits cannot overflow.
pub fn loss_forward<F: Real>(logits: &Array1<F>, label_id: usize) -> F {
    debug_assert!(label_id < logits.len());
    log_sum_exp(logits) - logits[label_id]
}

/// Full forward evaluation of one document graph.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    pub steps: Vec<StepCache<F>>,
    /// Final node representations r' after the last step.
    pub reps: Array2<F>,
    pub readout: ReadoutCache<F>,
    pub probs: Array1<F>,
    pub loss: F,
}

impl<F: Real> ForwardCache<F> {
    /// Predicted class: argmax of the logits, lowest index on ties.
    pub fn prediction(&self) -> usize {
        let mut best = 0;
        for (i, &z) in self.readout.logits.iter().enumerate() {
            if z > self.readout.logits[best] {
                best = i;
            }
        }
        best
    }
}

/// Message passing + readout + loss. Supplying `dropout_rng` selects train
/// mode; eval mode never consumes randomness.
pub fn forward<F: Real>(
    graph: &TextGraph,
    params: &Params<F>,
    config: &ModelConfig,
    pmi: Option<&PmiTable>,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardCache<F>> {
    if graph.label_id >= params.num_classes() {
        return Err(Error::Data(format!(
            "label id {} out of range for {} classes",
            graph.label_id,
            params.num_classes()
        )));
    }
    let (reps, steps) = message_pass(graph, params, config, pmi)?;
    let ro = readout(&reps, params, config.dropout_keep, dropout_rng);
    let probs = softmax(&ro.logits);
    let loss = loss_forward(&ro.logits, graph.label_id);
    Ok(ForwardCache {
        steps,
        reps,
        readout: ro,
        probs,
        loss,
    })
}

/// Model size accounting for the memory comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capacity {
    pub vocab_size: usize,
    pub dim: usize,
    /// Named edges + the public edge.
    pub edge_param_count: usize,
    pub num_classes: usize,
    pub total_params: usize,
    /// Total at 4 bytes per parameter.
    pub bytes: usize,
}

/// total = |V|·d (embeddings) + (E+1) (edges) + |V| (gates) + d·c + c.
pub fn count_capacity(
    vocab_size: usize,
    dim: usize,
    named_edges: usize,
    num_classes: usize,
) -> Capacity {
    let edge_param_count = named_edges + 1;
    let total_params =
        vocab_size * dim + edge_param_count + vocab_size + dim * num_classes + num_classes;
    Capacity {
        vocab_size,
        dim,
        edge_param_count,
        num_classes,
        total_params,
        bytes: 4 * total_params,
    }
}

impl<F: Real> Params<F> {
    pub fn capacity(&self) -> Capacity {
        count_capacity(
            self.vocab_size(),
            self.dim(),
            self.edge_param_count() - 1,
            self.num_classes(),
        )
    }
}
