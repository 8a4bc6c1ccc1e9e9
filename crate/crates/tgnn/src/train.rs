//! Hand-derived reverse-mode gradients with a finite-difference
//! verification harness, lazy sparse Adam with coupled L2 decay, the
//! mini-batch training loop with early stopping, and evaluation.
//!
//! Training runs in f32; the gradient check runs the same code path in f64.

use crate::data::{Corpus, EmbeddingInit};
use crate::edges::{EdgeVocabulary, PmiTable};
use crate::error::{Error, Result};
use crate::graph::{build_graphs, TextGraph};
use crate::model::{
    forward, initialize_params, EdgeMode, ForwardCache, ModelConfig, Params, Reduction,
};
use crate::real::Real;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

/// Per-batch gradient accumulator. Embedding, edge and gate gradients stay
/// sparse (documents touch few rows); the classification map is dense.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub embeddings: HashMap<u32, Vec<F>>,
    pub edges: HashMap<u32, F>,
    pub gates: HashMap<u32, F>,
    pub dense_w: Array2<F>,
    pub dense_b: Array1<F>,
}

impl<F: Real> Gradients<F> {
    pub fn zeros(dim: usize, num_classes: usize) -> Self {
        Self {
            embeddings: HashMap::new(),
            edges: HashMap::new(),
            gates: HashMap::new(),
            dense_w: Array2::zeros((dim, num_classes)),
            dense_b: Array1::zeros(num_classes),
        }
    }

    /// Index-wise sum; commutative, so merge order across a batch does not
    /// change the result (up to float associativity in f32).
    pub fn merge(&mut self, other: &Gradients<F>) {
        for (&w, row) in &other.embeddings {
            let acc = self
                .embeddings
                .entry(w)
                .or_insert_with(|| vec![F::zero(); row.len()]);
            for (a, &b) in acc.iter_mut().zip(row.iter()) {
                *a += b;
            }
        }
        for (&e, &g) in &other.edges {
            *self.edges.entry(e).or_insert_with(F::zero) += g;
        }
        for (&w, &g) in &other.gates {
            *self.gates.entry(w).or_insert_with(F::zero) += g;
        }
        self.dense_w += &other.dense_w;
        self.dense_b += &other.dense_b;
    }

    pub fn scale(&mut self, s: F) {
        for row in self.embeddings.values_mut() {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        for v in self.edges.values_mut() {
            *v *= s;
        }
        for v in self.gates.values_mut() {
            *v *= s;
        }
        self.dense_w.mapv_inplace(|v| v * s);
        self.dense_b.mapv_inplace(|v| v * s);
    }

    pub fn all_finite(&self) -> bool {
        self.embeddings
            .values()
            .all(|r| r.iter().all(|v| v.is_finite()))
            && self.edges.values().all(|v| v.is_finite())
            && self.gates.values().all(|v| v.is_finite())
            && self.dense_w.iter().all(|v| v.is_finite())
            && self.dense_b.iter().all(|v| v.is_finite())
    }
}

/// Exact reverse-mode gradients of the cross-entropy loss for one document,
/// replayed from the forward cache. Max-reduction gradient flows only
/// through the cached argmax slot per (node, dimension); in fixed-PMI mode
/// edge gradients are discarded.
pub fn backward<F: Real>(
    graph: &TextGraph,
    params: &Params<F>,
    config: &ModelConfig,
    cache: &ForwardCache<F>,
    label_id: usize,
    pmi: Option<&PmiTable>,
) -> Result<Gradients<F>> {
    let n = graph.num_nodes();
    let d = params.dim();
    let c = params.num_classes();
    if cache.reps.nrows() != n || cache.steps.len() != config.mpm_steps {
        return Err(Error::Data(
            "forward cache does not match the graph/config it is replayed against".into(),
        ));
    }
    if label_id >= c {
        return Err(Error::Data(format!(
            "label id {label_id} out of range for {c} classes"
        )));
    }
    let mode = EdgeMode::from_config(config, pmi)?;
    let mut grads = Gradients::zeros(d, c);

    // Softmax + cross-entropy: dL/dz = y - onehot(label).
    let mut dz = cache.probs.clone();
    dz[label_id] -= F::one();

    // Linear map: z = h_drop · W + b.
    grads.dense_b += &dz;
    let mut d_hidden = Array1::<F>::zeros(d);
    for u in 0..d {
        let h = cache.readout.dropped[u];
        let mut acc = F::zero();
        for v in 0..c {
            grads.dense_w[[u, v]] += h * dz[v];
            acc += params.dense_w[[u, v]] * dz[v];
        }
        d_hidden[u] = acc;
    }

    // Inverted dropout: kept units were scaled by 1/keep, dropped get 0.
    if let Some(mask) = &cache.readout.keep_mask {
        let scale = F::from_f64(1.0 / config.dropout_keep);
        for (u, &keep) in mask.iter().enumerate() {
            d_hidden[u] = if keep { d_hidden[u] * scale } else { F::zero() };
        }
    }

    // ReLU on the summed representation (strict: zero gradient at s = 0).
    let mut d_sum = d_hidden;
    for u in 0..d {
        if cache.readout.sum[u] <= F::zero() {
            d_sum[u] = F::zero();
        }
    }

    // Sum readout: every node's r' receives d_sum.
    let mut d_reps = Array2::<F>::zeros((n, d));
    for i in 0..n {
        for t in 0..d {
            d_reps[[i, t]] = d_sum[t];
        }
    }

    // Message-passing steps in reverse. r' = (1-eta)·M + eta·r.
    for step in cache.steps.iter().rev() {
        let mut d_inputs = Array2::<F>::zeros((n, d));
        for i in 0..n {
            let w = graph.node_words[i] as usize;
            let eta = params.gates[w];
            let one_minus = F::one() - eta;
            let mut d_gate = F::zero();
            for t in 0..d {
                let up = d_reps[[i, t]];
                if up == F::zero() {
                    continue;
                }
                d_gate += (step.inputs[[i, t]] - step.messages[[i, t]]) * up;
                let dm = one_minus * up;
                // Direct path through the gate.
                d_inputs[[i, t]] += eta * up;
                match config.reduction {
                    Reduction::Max => {
                        let slot = step.argmax.as_ref().expect("max cache")[[i, t]] as usize;
                        let j = graph.neighbors[i][slot];
                        let e = crate::model::edge_weight(params, graph, i, slot, mode);
                        d_inputs[[j, t]] += dm * e;
                        if let EdgeMode::Trainable = mode {
                            let idx = graph.edge_refs[i][slot];
                            *grads.edges.entry(idx).or_insert_with(F::zero) +=
                                dm * step.inputs[[j, t]];
                        }
                    }
                    Reduction::Mean => {
                        let inv = F::from_f64(1.0 / graph.neighbors[i].len() as f64);
                        let dm = dm * inv;
                        for (slot, &j) in graph.neighbors[i].iter().enumerate() {
                            let e = crate::model::edge_weight(params, graph, i, slot, mode);
                            d_inputs[[j, t]] += dm * e;
                            if let EdgeMode::Trainable = mode {
                                let idx = graph.edge_refs[i][slot];
                                *grads.edges.entry(idx).or_insert_with(F::zero) +=
                                    dm * step.inputs[[j, t]];
                            }
                        }
                    }
                }
            }
            if d_gate != F::zero() || !grads.gates.contains_key(&(w as u32)) {
                *grads.gates.entry(w as u32).or_insert_with(F::zero) += d_gate;
            }
        }
        d_reps = d_inputs;
    }

    // What remains is the gradient w.r.t. the initial lookups: accumulate
    // per word id (repeated occurrences add up).
    for (i, &w) in graph.node_words.iter().enumerate() {
        let row = grads
            .embeddings
            .entry(w)
            .or_insert_with(|| vec![F::zero(); d]);
        for t in 0..d {
            row[t] += d_reps[[i, t]];
        }
    }
    Ok(grads)
}

/// Outcome of a finite-difference comparison over every parameter
/// coordinate one document touches.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinates actually compared.
    pub checked: usize,
    /// Coordinates skipped because the max-reduction argmax flipped between
    /// the +eps and -eps evaluations (loss locally non-differentiable).
    pub argmax_crossings: usize,
    /// Coordinates skipped because the ReLU active set changed between the
    /// two evaluations.
    pub relu_crossings: usize,
    /// Worst coordinate: (label, analytic, numeric).
    pub worst: Option<(String, f64, f64)>,
}

enum Coord {
    Emb(u32, usize),
    Edge(u32),
    Gate(u32),
    W(usize, usize),
    B(usize),
}

impl Coord {
    fn label(&self) -> String {
        match self {
            Coord::Emb(w, t) => format!("embeddings[{w}][{t}]"),
            Coord::Edge(e) => format!("edge_weights[{e}]"),
            Coord::Gate(w) => format!("gates[{w}]"),
            Coord::W(u, v) => format!("dense_w[{u}][{v}]"),
            Coord::B(v) => format!("dense_b[{v}]"),
        }
    }

    fn get(&self, p: &Params<f64>) -> f64 {
        match *self {
            Coord::Emb(w, t) => p.embeddings[[w as usize, t]],
            Coord::Edge(e) => p.edge_weights[e as usize],
            Coord::Gate(w) => p.gates[w as usize],
            Coord::W(u, v) => p.dense_w[[u, v]],
            Coord::B(v) => p.dense_b[v],
        }
    }

    fn set(&self, p: &mut Params<f64>, value: f64) {
        match *self {
            Coord::Emb(w, t) => p.embeddings[[w as usize, t]] = value,
            Coord::Edge(e) => p.edge_weights[e as usize] = value,
            Coord::Gate(w) => p.gates[w as usize] = value,
            Coord::W(u, v) => p.dense_w[[u, v]] = value,
            Coord::B(v) => p.dense_b[v] = value,
        }
    }

    fn analytic(&self, g: &Gradients<f64>) -> f64 {
        match *self {
            Coord::Emb(w, t) => g.embeddings.get(&w).map_or(0.0, |r| r[t]),
            Coord::Edge(e) => g.edges.get(&e).copied().unwrap_or(0.0),
            Coord::Gate(w) => g.gates.get(&w).copied().unwrap_or(0.0),
            Coord::W(u, v) => g.dense_w[[u, v]],
            Coord::B(v) => g.dense_b[v],
        }
    }
}

fn nondiff_signature(cache: &ForwardCache<f64>) -> (Vec<u32>, Vec<bool>) {
    let argmax: Vec<u32> = cache
        .steps
        .iter()
        .flat_map(|s| s.argmax.iter().flat_map(|a| a.iter().copied()))
        .collect();
    let relu: Vec<bool> = cache.readout.sum.iter().map(|&s| s > 0.0).collect();
    (argmax, relu)
}

/// Compare backward against central finite differences `(L+ − L−)/2ε` on
/// every coordinate the document touches, in f64 with dropout disabled.
/// Coordinates where the argmax routing or the ReLU active set differs
/// between the two perturbed evaluations are counted separately instead of
/// compared: the loss is not differentiable there. Relative error is
/// `|a − n| / max(|a|, |n|, 1e-4)`.
pub fn gradient_check(
    graph: &TextGraph,
    params: &Params<f64>,
    config: &ModelConfig,
    pmi: Option<&PmiTable>,
    eps: f64,
) -> Result<GradCheckReport> {
    let config = ModelConfig {
        dropout_keep: 1.0,
        ..*config
    };
    let cache = forward(graph, params, &config, pmi, None)?;
    let grads = backward(graph, params, &config, &cache, graph.label_id, pmi)?;

    let mut words: Vec<u32> = graph.node_words.clone();
    words.sort_unstable();
    words.dedup();
    let mut coords: Vec<Coord> = Vec::new();
    for &w in &words {
        for t in 0..params.dim() {
            coords.push(Coord::Emb(w, t));
        }
        coords.push(Coord::Gate(w));
    }
    if config.edges_trainable {
        let mut edges: Vec<u32> = graph.edge_refs.iter().flatten().copied().collect();
        edges.sort_unstable();
        edges.dedup();
        coords.extend(edges.into_iter().map(Coord::Edge));
    }
    for u in 0..params.dim() {
        for v in 0..params.num_classes() {
            coords.push(Coord::W(u, v));
        }
    }
    coords.extend((0..params.num_classes()).map(Coord::B));

    let mut perturbed = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        argmax_crossings: 0,
        relu_crossings: 0,
        worst: None,
    };
    for coord in &coords {
        let original = coord.get(&perturbed);
        coord.set(&mut perturbed, original + eps);
        let plus = forward(graph, &perturbed, &config, pmi, None)?;
        coord.set(&mut perturbed, original - eps);
        let minus = forward(graph, &perturbed, &config, pmi, None)?;
        coord.set(&mut perturbed, original);

        let (am_p, relu_p) = nondiff_signature(&plus);
        let (am_m, relu_m) = nondiff_signature(&minus);
        if am_p != am_m {
            report.argmax_crossings += 1;
            continue;
        }
        if relu_p != relu_m {
            report.relu_crossings += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * eps);
        let analytic = coord.analytic(&grads);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
        report.checked += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((coord.label(), analytic, numeric));
        }
    }
    Ok(report)
}

/// Training hyperparameters. Defaults are the reference configuration:
/// Adam at 1e-3 with 1e-4 L2, batches of 32, patience 10.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    /// Node representation dimension.
    pub dim: usize,
    pub seed: u64,
    /// Skip L2 decay on dense_b.
    pub exempt_bias_decay: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 32,
            patience: 10,
            max_epochs: 200,
            dim: 300,
            seed: 42,
            exempt_bias_decay: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if self.dim < 1 {
            return Err(Error::Config("dimension must be >= 1".into()));
        }
        self.model.validate()
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam moments, sparse for the sparse parameter groups. Untouched indices
/// keep their moments (and receive no decay) until a batch touches them.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    emb: HashMap<u32, (Vec<F>, Vec<F>)>,
    edge: HashMap<u32, (F, F)>,
    gate: HashMap<u32, (F, F)>,
    w_m: Array2<F>,
    w_v: Array2<F>,
    b_m: Array1<F>,
    b_v: Array1<F>,
    /// Global timestep used for bias correction.
    pub t: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(dim: usize, num_classes: usize) -> Self {
        Self {
            emb: HashMap::new(),
            edge: HashMap::new(),
            gate: HashMap::new(),
            w_m: Array2::zeros((dim, num_classes)),
            w_v: Array2::zeros((dim, num_classes)),
            b_m: Array1::zeros(num_classes),
            b_v: Array1::zeros(num_classes),
            t: 0,
        }
    }
}

#[inline]
fn adam_update<F: Real>(
    theta: &mut F,
    grad: F,
    m: &mut F,
    v: &mut F,
    lr: F,
    wd: F,
    bc1: F,
    bc2: F,
) -> F {
    let g = grad + wd * *theta;
    *m = F::from_f64(BETA1) * *m + F::from_f64(1.0 - BETA1) * g;
    *v = F::from_f64(BETA2) * *v + F::from_f64(1.0 - BETA2) * g * g;
    let m_hat = *m / bc1;
    let v_hat = *v / bc2;
    let update = lr * m_hat / (v_hat.sqrt() + F::from_f64(ADAM_EPS));
    *theta -= update;
    update
}

/// One lazy sparse Adam step: moments, L2 decay and updates only for the
/// indices present in `grads` (dense_w/dense_b are always dense). Bias
/// correction uses the global timestep.
pub fn adam_step<F: Real>(
    params: &mut Params<F>,
    grads: &Gradients<F>,
    state: &mut AdamState<F>,
    cfg: &TrainConfig,
) -> Result<()> {
    state.t += 1;
    let bc1 = F::from_f64(1.0 - BETA1.powi(state.t as i32));
    let bc2 = F::from_f64(1.0 - BETA2.powi(state.t as i32));
    let lr = F::from_f64(cfg.lr);
    let wd = F::from_f64(cfg.weight_decay);
    let d = params.dim();

    let mut bad: Option<String> = None;
    let check = |label: &dyn Fn() -> String, theta: F, update: F, bad: &mut Option<String>| {
        if bad.is_none() && !(theta.is_finite() && update.is_finite()) {
            *bad = Some(format!(
                "non-finite Adam update at {}: value {theta}, step {update}",
                label()
            ));
        }
    };

    for (&w, row) in &grads.embeddings {
        let (m, v) = state
            .emb
            .entry(w)
            .or_insert_with(|| (vec![F::zero(); d], vec![F::zero(); d]));
        for t in 0..d {
            let theta = &mut params.embeddings[[w as usize, t]];
            let u = adam_update(theta, row[t], &mut m[t], &mut v[t], lr, wd, bc1, bc2);
            check(&|| format!("embeddings[{w}][{t}]"), *theta, u, &mut bad);
        }
    }
    for (&e, &g) in &grads.edges {
        let (m, v) = state.edge.entry(e).or_insert((F::zero(), F::zero()));
        let theta = &mut params.edge_weights[e as usize];
        let u = adam_update(theta, g, m, v, lr, wd, bc1, bc2);
        check(&|| format!("edge_weights[{e}]"), *theta, u, &mut bad);
    }
    for (&w, &g) in &grads.gates {
        let (m, v) = state.gate.entry(w).or_insert((F::zero(), F::zero()));
        let theta = &mut params.gates[w as usize];
        let u = adam_update(theta, g, m, v, lr, wd, bc1, bc2);
        check(&|| format!("gates[{w}]"), *theta, u, &mut bad);
    }
    for u in 0..d {
        for c in 0..params.num_classes() {
            let theta = &mut params.dense_w[[u, c]];
            let up = adam_update(
                theta,
                grads.dense_w[[u, c]],
                &mut state.w_m[[u, c]],
                &mut state.w_v[[u, c]],
                lr,
                wd,
                bc1,
                bc2,
            );
            check(&|| format!("dense_w[{u}][{c}]"), *theta, up, &mut bad);
        }
    }
    let bias_wd = if cfg.exempt_bias_decay { F::zero() } else { wd };
    for c in 0..params.num_classes() {
        let theta = &mut params.dense_b[c];
        let up = adam_update(
            theta,
            grads.dense_b[c],
            &mut state.b_m[c],
            &mut state.b_v[c],
            lr,
            bias_wd,
            bc1,
            bc2,
        );
        check(&|| format!("dense_b[{c}]"), *theta, up, &mut bad);
    }
    match bad {
        Some(msg) => Err(Error::Train {
            epoch: 0,
            batch: 0,
            msg,
        }),
        None => Ok(()),
    }
}

/// Minimum-tracking early stop: an epoch counts as improvement only when
/// its validation loss is strictly below the best so far.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_improvement: 0,
        }
    }

    /// Record an epoch's validation loss; returns whether it improved.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.since_improvement = 0;
            true
        } else {
            self.since_improvement += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_improvement >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub test_accuracy: f64,
    pub wall_secs: f64,
}

impl TrainReport {
    /// `epoch\ttrain_loss\tval_loss\tval_acc` rows plus a final test line.
    /// Fixed six-decimal formatting keeps reruns byte-identical.
    pub fn write_metrics_tsv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "epoch\ttrain_loss\tval_loss\tval_acc")?;
        for r in &self.epochs {
            writeln!(
                w,
                "{}\t{:.6}\t{:.6}\t{:.6}",
                r.epoch, r.train_loss, r.val_loss, r.val_acc
            )?;
        }
        writeln!(w, "test_accuracy\t{:.6}", self.test_accuracy)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Dropout stream for one (document, epoch): a pure function of the seed,
/// so results do not depend on thread count or batch composition.
fn doc_rng(seed: u64, epoch: usize, doc_index: usize) -> ChaCha8Rng {
    let s = splitmix64(splitmix64(splitmix64(seed).wrapping_add(epoch as u64)).wrapping_add(doc_index as u64));
    ChaCha8Rng::seed_from_u64(s)
}

fn mean_loss_and_accuracy<F: Real>(
    params: &Params<F>,
    graphs: &[TextGraph],
    config: &ModelConfig,
    pmi: Option<&PmiTable>,
) -> Result<(f64, f64)> {
    if graphs.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty document set".into()));
    }
    let per_doc: Vec<Result<(f64, bool)>> = graphs
        .par_iter()
        .map(|g| {
            let cache = forward(g, params, config, pmi, None)?;
            Ok((cache.loss.to_f64(), cache.prediction() == g.label_id))
        })
        .collect();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for r in per_doc {
        let (l, ok) = r?;
        loss_sum += l;
        correct += ok as usize;
    }
    Ok((loss_sum / graphs.len() as f64, correct as f64 / graphs.len() as f64))
}

/// Fraction of documents whose argmax prediction matches the label
/// (dropout off). Errors on an empty set rather than returning 0/0.
pub fn evaluate_accuracy<F: Real>(
    params: &Params<F>,
    graphs: &[TextGraph],
    config: &ModelConfig,
    pmi: Option<&PmiTable>,
) -> Result<f64> {
    mean_loss_and_accuracy(params, graphs, config, pmi).map(|(_, acc)| acc)
}

/// Full training run: prebuilt graphs, seeded epoch shuffles, mini-batches
/// whose gradients are averaged, one Adam step per batch, per-epoch
/// validation, early stopping with best-parameter restore, and a single
/// final test evaluation on the restored parameters.
///
/// Per-document forward/backward runs in parallel against the immutable
/// parameter snapshot; every dropout stream is derived from
/// (seed, epoch, document index), so the outcome is independent of thread
/// count. Merge order within a batch is fixed by document order.
pub fn train(
    corpus: &Corpus,
    vocab_size: usize,
    edge_vocab: &EdgeVocabulary,
    window: usize,
    cfg: &TrainConfig,
    embedding_init: Option<&EmbeddingInit>,
    pmi: Option<&PmiTable>,
) -> Result<(Params<f32>, TrainReport)> {
    cfg.validate()?;
    if corpus.train.is_empty() || corpus.val.is_empty() || corpus.test.is_empty() {
        return Err(Error::Data(format!(
            "training requires nonempty partitions, got train {} / val {} / test {}",
            corpus.train.len(),
            corpus.val.len(),
            corpus.test.len()
        )));
    }
    let started = Instant::now();
    let train_graphs = build_graphs(&corpus.train, edge_vocab, window)?;
    let val_graphs = build_graphs(&corpus.val, edge_vocab, window)?;
    let test_graphs = build_graphs(&corpus.test, edge_vocab, window)?;

    let mut params: Params<f32> = initialize_params(
        vocab_size,
        cfg.dim,
        edge_vocab.param_count(),
        corpus.num_classes(),
        embedding_init,
        cfg.seed,
    )?;
    let mut adam = AdamState::new(cfg.dim, corpus.num_classes());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed));
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = params.clone();
    let mut epochs = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_graphs.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let snapshot = &params;
            let results: Vec<Result<(f64, Gradients<f32>)>> = batch
                .par_iter()
                .map(|&i| {
                    let g = &train_graphs[i];
                    let mut rng = doc_rng(cfg.seed, epoch, i);
                    let cache = forward(g, snapshot, &cfg.model, pmi, Some(&mut rng))?;
                    if !cache.loss.is_finite() {
                        return Err(Error::Train {
                            epoch,
                            batch: batch_no,
                            msg: format!("non-finite loss on document {i}"),
                        });
                    }
                    let grads = backward(g, snapshot, &cfg.model, &cache, g.label_id, pmi)?;
                    Ok((cache.loss.to_f64(), grads))
                })
                .collect();
            let mut merged = Gradients::<f32>::zeros(cfg.dim, corpus.num_classes());
            for r in results {
                let (l, g) = r?;
                loss_sum += l;
                merged.merge(&g);
            }
            merged.scale(1.0 / batch.len() as f32);
            adam_step(&mut params, &merged, &mut adam, cfg).map_err(|e| match e {
                Error::Train { msg, .. } => Error::Train {
                    epoch,
                    batch: batch_no,
                    msg,
                },
                other => other,
            })?;
        }
        let train_loss = loss_sum / train_graphs.len() as f64;
        let (val_loss, val_acc) = mean_loss_and_accuracy(&params, &val_graphs, &cfg.model, pmi)?;
        if !val_loss.is_finite() {
            return Err(Error::Train {
                epoch,
                batch: 0,
                msg: "non-finite validation loss".into(),
            });
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_acc,
        });
        if stopper.observe(epoch, val_loss) {
            best_params = params.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }

    let test_accuracy = evaluate_accuracy(&best_params, &test_graphs, &cfg.model, pmi)?;
    let report = TrainReport {
        epochs,
        best_epoch: stopper.best_epoch(),
        test_accuracy,
        wall_secs: started.elapsed().as_secs_f64(),
    };
    Ok((best_params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Document;
    use crate::edges::{build_edge_vocabulary, compute_pmi_table, count_edge_pairs};
    use crate::graph::build_text_graph;
    use crate::model::softmax;
    use ndarray::array;
    use rand::Rng;

    fn doc(tokens: &[u32], label: usize) -> Document {
        Document {
            label_id: label,
            tokens: tokens.to_vec(),
        }
    }

    fn graph_for(tokens: &[u32], window: usize, label: usize) -> TextGraph {
        let d = doc(tokens, label);
        let stats = count_edge_pairs(std::slice::from_ref(&d), window).unwrap();
        let ev = build_edge_vocabulary(&stats, 1).unwrap();
        build_text_graph(&d, &ev, window).unwrap()
    }

    fn random_params(vocab: usize, dim: usize, edges: usize, classes: usize, seed: u64) -> Params<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params {
            embeddings: Array2::zeros((vocab, dim)),
            edge_weights: Array1::zeros(edges),
            gates: Array1::zeros(vocab),
            dense_w: Array2::zeros((dim, classes)),
            dense_b: Array1::zeros(classes),
        };
        for v in p.embeddings.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        for v in p.edge_weights.iter_mut() {
            *v = rng.random_range(0.2..1.5);
        }
        for v in p.gates.iter_mut() {
            *v = rng.random_range(0.1..0.9);
        }
        for v in p.dense_w.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        for v in p.dense_b.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        p
    }

    #[test]
    fn identity_gate_kills_edge_gradients() {
        let g = graph_for(&[1, 2, 3, 2], 2, 1);
        let mut p = random_params(4, 3, 20, 2, 1);
        p.gates.fill(1.0);
        let cfg = ModelConfig::default();
        let cache = forward(&g, &p, &cfg, None, None).unwrap();
        let grads = backward(&g, &p, &cfg, &cache, g.label_id, None).unwrap();
        for (&e, &v) in &grads.edges {
            assert_eq!(v, 0.0, "edge {e} should get zero gradient");
        }
    }

    #[test]
    fn single_node_gradients_match_symbolic_derivation() {
        // One node of word 1, d = 1, c = 2:
        //   M = e·x, r' = (1−η)M + ηx, s = r', h = relu(s), z = h·W + b.
        let g = graph_for(&[1], 1, 0);
        let (x, e, eta): (f64, f64, f64) = (0.8, 1.2, 0.3);
        let p = Params {
            embeddings: array![[0.0], [x]],
            edge_weights: array![e],
            gates: array![0.5, eta],
            dense_w: array![[0.5, -0.4]],
            dense_b: array![0.1, -0.2],
        };
        let cfg = ModelConfig::default();
        let cache = forward(&g, &p, &cfg, None, None).unwrap();
        let grads = backward(&g, &p, &cfg, &cache, 0, None).unwrap();

        let m = e * x;
        let r = (1.0 - eta) * m + eta * x;
        let z = array![r * 0.5 + 0.1, r * -0.4 - 0.2];
        let y = softmax(&z);
        let dz = array![y[0] - 1.0, y[1]];
        let dh = 0.5 * dz[0] - 0.4 * dz[1];
        let d_eta = (x - m) * dh;
        let d_e = (1.0 - eta) * dh * x;
        let d_x = dh * ((1.0 - eta) * e + eta);

        assert!((grads.dense_b[0] - dz[0]).abs() < 1e-12);
        assert!((grads.dense_b[1] - dz[1]).abs() < 1e-12);
        assert!((grads.dense_w[[0, 0]] - r * dz[0]).abs() < 1e-12);
        assert!((grads.dense_w[[0, 1]] - r * dz[1]).abs() < 1e-12);
        assert!((grads.gates[&1] - d_eta).abs() < 1e-12);
        let self_edge = g.edge_refs[0][0];
        assert!((grads.edges[&self_edge] - d_e).abs() < 1e-12);
        assert!((grads.embeddings[&1][0] - d_x).abs() < 1e-12);
    }

    #[test]
    fn repeated_words_accumulate_embedding_gradient() {
        let g = graph_for(&[1, 1], 1, 0);
        let p = random_params(2, 2, 4, 2, 3);
        let cfg = ModelConfig::default();
        let cache = forward(&g, &p, &cfg, None, None).unwrap();
        let grads = backward(&g, &p, &cfg, &cache, 0, None).unwrap();
        assert_eq!(grads.embeddings.len(), 1);
        assert!(grads.embeddings.contains_key(&1));
    }

    #[test]
    fn gradient_check_passes_on_a_single_token_doc() {
        let g = graph_for(&[1], 1, 0);
        let p = random_params(2, 3, 1, 2, 5);
        let report = gradient_check(&g, &p, &ModelConfig::default(), None, 1e-4).unwrap();
        // Coverage: d embedding coords + 1 gate + 1 edge + d·c + c.
        assert_eq!(
            report.checked + report.argmax_crossings + report.relu_crossings,
            3 + 1 + 1 + 6 + 2
        );
        assert!(
            report.max_rel_error < 1e-3,
            "worst {:?}: {}",
            report.worst,
            report.max_rel_error
        );
    }

    #[test]
    fn gradient_check_passes_on_an_eight_token_doc() {
        let g = graph_for(&[1, 2, 3, 1, 4, 2, 5, 3], 3, 1);
        let p = random_params(6, 4, 40, 3, 7);
        let report = gradient_check(&g, &p, &ModelConfig::default(), None, 1e-4).unwrap();
        assert!(report.checked > 0);
        assert!(
            report.max_rel_error < 1e-3,
            "worst {:?}: {}",
            report.worst,
            report.max_rel_error
        );
    }

    #[test]
    fn gradient_check_mean_reduction_has_no_exclusions() {
        let g = graph_for(&[1, 2, 3, 1], 2, 0);
        let p = random_params(4, 3, 16, 2, 11);
        let cfg = ModelConfig {
            reduction: Reduction::Mean,
            ..Default::default()
        };
        let report = gradient_check(&g, &p, &cfg, None, 1e-4).unwrap();
        assert_eq!(report.argmax_crossings, 0);
        assert_eq!(report.relu_crossings, 0);
        assert!(report.max_rel_error < 1e-3, "{}", report.max_rel_error);
    }

    #[test]
    fn gradient_check_passes_in_fixed_pmi_mode() {
        let train = [doc(&[1, 2, 3], 0), doc(&[2, 3], 1), doc(&[1, 3, 3], 0)];
        let table = compute_pmi_table(&train, 3).unwrap();
        let g = graph_for(&[1, 2, 3], 2, 0);
        let p = random_params(4, 3, 12, 2, 13);
        let cfg = ModelConfig {
            edges_trainable: false,
            ..Default::default()
        };
        let report = gradient_check(&g, &p, &cfg, Some(&table), 1e-4).unwrap();
        assert!(report.max_rel_error < 1e-3, "{}", report.max_rel_error);
    }

    #[test]
    fn multi_step_gradients_check_out() {
        let g = graph_for(&[1, 2, 1, 3], 1, 1);
        let mut p = random_params(4, 3, 12, 2, 17);
        // Keep magnitudes tame so two steps stay well-conditioned.
        p.edge_weights.mapv_inplace(|v| 0.5 * v);
        let cfg = ModelConfig {
            mpm_steps: 2,
            ..Default::default()
        };
        let report = gradient_check(&g, &p, &cfg, None, 1e-4).unwrap();
        assert!(
            report.max_rel_error < 1e-3,
            "worst {:?}: {}",
            report.worst,
            report.max_rel_error
        );
    }

    #[test]
    fn gradient_merge_is_commutative() {
        let g1 = graph_for(&[1, 2], 1, 0);
        let g2 = graph_for(&[2, 3], 1, 1);
        let p = random_params(4, 2, 10, 2, 19);
        let cfg = ModelConfig::default();
        let b1 = backward(&g1, &p, &cfg, &forward(&g1, &p, &cfg, None, None).unwrap(), 0, None).unwrap();
        let b2 = backward(&g2, &p, &cfg, &forward(&g2, &p, &cfg, None, None).unwrap(), 1, None).unwrap();
        let mut ab = Gradients::zeros(2, 2);
        ab.merge(&b1);
        ab.merge(&b2);
        let mut ba = Gradients::zeros(2, 2);
        ba.merge(&b2);
        ba.merge(&b1);
        assert_eq!(ab.dense_w, ba.dense_w);
        assert_eq!(ab.dense_b, ba.dense_b);
        for (k, v) in &ab.embeddings {
            assert_eq!(v, &ba.embeddings[k]);
        }
        for (k, v) in &ab.edges {
            assert_eq!(v, &ba.edges[k]);
        }
        for (k, v) in &ab.gates {
            assert_eq!(v, &ba.gates[k]);
        }
    }

    #[test]
    fn adam_zero_gradient_zero_decay_is_a_no_op() {
        let mut p = random_params(3, 2, 4, 2, 23).convert::<f32>();
        let before = p.clone();
        let grads = Gradients::<f32>::zeros(2, 2);
        let mut state = AdamState::new(2, 2);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            dim: 2,
            ..Default::default()
        };
        adam_step(&mut p, &grads, &mut state, &cfg).unwrap();
        // Sparse groups untouched; dense groups see g = 0 -> update 0.
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_is_minus_lr() {
        // theta = 0, g = 1, t = 1: bias-corrected moments cancel and the
        // update is lr·1/(1 + 1e-8) ~ lr.
        let mut p = Params::<f64> {
            embeddings: Array2::zeros((1, 1)),
            edge_weights: array![0.0],
            gates: array![0.0],
            dense_w: Array2::zeros((1, 2)),
            dense_b: Array1::zeros(2),
        };
        let mut grads = Gradients::<f64>::zeros(1, 2);
        grads.edges.insert(0, 1.0);
        let mut state = AdamState::new(1, 2);
        let cfg = TrainConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            dim: 1,
            ..Default::default()
        };
        adam_step(&mut p, &grads, &mut state, &cfg).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p.edge_weights[0] - expected).abs() < 1e-15);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn untouched_rows_receive_no_decay() {
        let mut p = random_params(4, 2, 4, 2, 29).convert::<f32>();
        let row3_before: Vec<f32> = p.embeddings.row(3).to_vec();
        let mut grads = Gradients::<f32>::zeros(2, 2);
        grads.embeddings.insert(1, vec![0.5, -0.5]);
        let mut state = AdamState::new(2, 2);
        let cfg = TrainConfig {
            dim: 2,
            ..Default::default()
        };
        adam_step(&mut p, &grads, &mut state, &cfg).unwrap();
        assert_eq!(p.embeddings.row(3).to_vec(), row3_before);
        assert_ne!(p.embeddings.row(1).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn early_stopping_protocol_edge_case() {
        // Patience 10, validation loss strictly increasing after epoch 1:
        // improvement only at epoch 1, stop after epoch 11.
        let mut es = EarlyStopping::new(10);
        assert!(es.observe(1, 1.0));
        for epoch in 2..=10 {
            assert!(!es.observe(epoch, 1.0 + epoch as f64));
            assert!(!es.should_stop(), "epoch {epoch}");
        }
        assert!(!es.observe(11, 100.0));
        assert!(es.should_stop());
        assert_eq!(es.best_epoch(), 1);
    }

    #[test]
    fn ties_do_not_count_as_improvement() {
        let mut es = EarlyStopping::new(2);
        assert!(es.observe(1, 0.5));
        assert!(!es.observe(2, 0.5));
        assert!(!es.observe(3, 0.5));
        assert!(es.should_stop());
        assert_eq!(es.best_epoch(), 1);
    }

    fn tiny_corpus() -> (Corpus, EdgeVocabulary, usize) {
        // Two trivially separable classes: word 1 marks class 0, word 2
        // marks class 1. Vocab ids 0..=4.
        let train = vec![
            doc(&[1, 3], 0),
            doc(&[1, 4], 0),
            doc(&[2, 3], 1),
            doc(&[2, 4], 1),
            doc(&[1, 3, 4], 0),
            doc(&[2, 4, 3], 1),
        ];
        let val = vec![doc(&[1, 4, 3], 0), doc(&[2, 3, 4], 1)];
        let test = vec![doc(&[1, 3], 0), doc(&[2, 4], 1)];
        let stats = count_edge_pairs(&train, 2).unwrap();
        let ev = build_edge_vocabulary(&stats, 1).unwrap();
        let labels = crate::data::LabelMap::from_names(vec!["a".into(), "b".into()]);
        (
            Corpus {
                train,
                val,
                test,
                labels,
            },
            ev,
            5,
        )
    }

    fn fast_config(seed: u64, max_epochs: usize) -> TrainConfig {
        TrainConfig {
            lr: 0.05,
            weight_decay: 0.0,
            batch_size: 3,
            patience: 50,
            max_epochs,
            dim: 8,
            seed,
            exempt_bias_decay: false,
            model: ModelConfig {
                dropout_keep: 1.0,
                ..Default::default()
            },
        }
    }

    #[test]
    fn training_learns_a_separable_toy_problem() {
        let (corpus, ev, vocab) = tiny_corpus();
        let cfg = fast_config(1, 60);
        let (params, report) = train(&corpus, vocab, &ev, 2, &cfg, None, None).unwrap();
        assert_eq!(report.test_accuracy, 1.0, "report: {:?}", report.epochs.last());
        assert!(params.all_finite());
        assert!(report.best_epoch >= 1);
        let last = report.epochs.last().unwrap();
        assert!(last.train_loss < report.epochs[0].train_loss);
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let (corpus, ev, vocab) = tiny_corpus();
        let cfg = fast_config(7, 5);
        let (p1, r1) = train(&corpus, vocab, &ev, 2, &cfg, None, None).unwrap();
        let (p2, r2) = train(&corpus, vocab, &ev, 2, &cfg, None, None).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(r1.epochs, r2.epochs);
        assert_eq!(r1.test_accuracy, r2.test_accuracy);
    }

    #[test]
    fn diverging_run_reports_epoch_and_batch() {
        let (corpus, ev, vocab) = tiny_corpus();
        let mut cfg = fast_config(3, 30);
        cfg.lr = 1e18;
        let err = train(&corpus, vocab, &ev, 2, &cfg, None, None).unwrap_err();
        match err {
            Error::Train { epoch, .. } => assert!(epoch >= 1),
            other => panic!("expected a training divergence error, got {other:?}"),
        }
    }

    #[test]
    fn dropout_training_stays_deterministic() {
        let (corpus, ev, vocab) = tiny_corpus();
        let mut cfg = fast_config(9, 4);
        cfg.model.dropout_keep = 0.5;
        let (_, r1) = train(&corpus, vocab, &ev, 2, &cfg, None, None).unwrap();
        let (_, r2) = train(&corpus, vocab, &ev, 2, &cfg, None, None).unwrap();
        assert_eq!(r1.epochs, r2.epochs);
    }

    #[test]
    fn evaluate_accuracy_rejects_empty_input() {
        let p = random_params(2, 2, 2, 2, 31).convert::<f32>();
        let err = evaluate_accuracy(&p, &[], &ModelConfig::default(), None).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn metrics_tsv_has_stable_shape() {
        let report = TrainReport {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_loss: 0.25,
                val_acc: 0.75,
            }],
            best_epoch: 1,
            test_accuracy: 0.875,
            wall_secs: 0.1,
        };
        let mut buf = Vec::new();
        report.write_metrics_tsv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "epoch\ttrain_loss\tval_loss\tval_acc\n1\t0.500000\t0.250000\t0.750000\ntest_accuracy\t0.875000\n"
        );
    }
}
