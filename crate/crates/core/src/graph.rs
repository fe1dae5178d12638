//! The inference core: a bipartite factor graph over per-pixel disparity
//! variables, loopy sum-product message passing, and MAP extraction.
//!
//! Every pixel owns a variable node, an evidence factor carrying its prior
//! distribution, and a dependency factor whose members come from the
//! kernel-selected neighborhood. Dependency potentials are equality
//! indicators (1 when all member labels agree, else 0), which collapses the
//! factor-to-variable marginalization into a per-label product of incoming
//! messages: no explicit sum over joint states is ever formed.
//!
//! Messages live in the probability domain, floored at a small positive
//! value so that label support mismatches between neighboring pixels
//! attenuate rather than annihilate, and renormalized after every update.

use rayon::prelude::*;
use std::time::Instant;

use crate::cost::PriorField;
use crate::error::{Error, Result};
use crate::image::DisparityMap;
use crate::neighborhood::NeighborStructure;

/// How the Eq.-style map-change norm is compared against `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceNorm {
    /// Compare the absolute L2 norm of the disparity-map change.
    AbsoluteL2,
    /// Compare the per-pixel RMS change (L2 / sqrt(pixel count)).
    Rms,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbpConfig {
    /// Convergence threshold on the decoded-map change.
    pub tau: f64,
    pub convergence: ConvergenceNorm,
    pub max_iter: usize,
    /// Iterations to run before convergence may stop the loop; raise it
    /// when exact posterior values (not just the argmax) are needed.
    pub min_iter: usize,
    /// Blend factor toward the previous message, in `[0, 1)`.
    pub damping: f64,
    /// Lower bound applied to every message entry before normalization.
    pub message_floor: f64,
}

impl Default for LbpConfig {
    fn default() -> Self {
        LbpConfig {
            tau: 0.5,
            convergence: ConvergenceNorm::AbsoluteL2,
            max_iter: 60,
            min_iter: 1,
            damping: 0.0,
            message_floor: 1e-12,
        }
    }
}

impl LbpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0) {
            return Err(Error::InvalidInput("tau must be >= 0".into()));
        }
        if self.max_iter < 1 {
            return Err(Error::InvalidInput("max_iter must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::InvalidInput("damping must lie in [0, 1)".into()));
        }
        if !(self.message_floor > 0.0) {
            return Err(Error::InvalidInput("message_floor must be positive".into()));
        }
        Ok(())
    }
}

/// The assembled graph: per-pixel supports and evidence vectors (the
/// prior), dependency-factor membership, and the reverse adjacency from
/// each variable to the factors listing it.
pub struct FactorGraph {
    pub prior: PriorField,
    pub structure: NeighborStructure,
    /// Per-variable `(factor, slot)` pairs, flattened.
    var_adj_offsets: Vec<u32>,
    var_adj: Vec<(u32, u32)>,
    /// Per-slot offsets into the message value arenas.
    slot_value_offsets: Vec<u32>,
    /// Value-arena offsets at factor boundaries, for per-factor slicing.
    factor_value_offsets: Vec<u32>,
}

impl FactorGraph {
    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.prior.pixel_count()
    }

    /// Factors adjacent to variable `i`, as `(factor, slot)` pairs.
    #[inline]
    pub fn factors_of(&self, var: usize) -> &[(u32, u32)] {
        &self.var_adj[self.var_adj_offsets[var] as usize..self.var_adj_offsets[var + 1] as usize]
    }

    #[inline]
    fn slot_values<'a>(&self, arena: &'a [f64], slot: usize) -> &'a [f64] {
        &arena[self.slot_value_offsets[slot] as usize..self.slot_value_offsets[slot + 1] as usize]
    }
}

/// Build the graph from a prior field and a dependency structure covering
/// the same pixel grid.
pub fn build_graph(prior: PriorField, structure: NeighborStructure) -> Result<FactorGraph> {
    if prior.width != structure.width || prior.height != structure.height {
        return Err(Error::InvalidInput(
            "prior field and neighbor structure cover different grids".into(),
        ));
    }
    let n = prior.pixel_count();
    for p in 0..n {
        if prior.support_len(p) == 0 {
            return Err(Error::InvalidInput(format!(
                "pixel {p} has an empty label support"
            )));
        }
    }

    let mut degree = vec![0u32; n];
    for f in 0..structure.factor_count() {
        for m in structure.members(f) {
            if (*m as usize) >= n {
                return Err(Error::InvalidInput(format!(
                    "factor {f} lists out-of-range pixel {m}"
                )));
            }
            degree[*m as usize] += 1;
        }
    }
    let mut var_adj_offsets = vec![0u32; n + 1];
    for i in 0..n {
        var_adj_offsets[i + 1] = var_adj_offsets[i] + degree[i];
    }
    let mut var_adj = vec![(0u32, 0u32); var_adj_offsets[n] as usize];
    let mut cursor: Vec<u32> = var_adj_offsets[..n].to_vec();
    for f in 0..structure.factor_count() {
        let base = structure.slot_range(f).start;
        for (s, m) in structure.members(f).iter().enumerate() {
            let c = &mut cursor[*m as usize];
            var_adj[*c as usize] = (f as u32, (base + s) as u32);
            *c += 1;
        }
    }

    let total_slots = structure.total_slots();
    let mut slot_value_offsets = vec![0u32; total_slots + 1];
    for slot in 0..total_slots {
        let len = prior.support_len(structure.slot_member(slot) as usize) as u32;
        slot_value_offsets[slot + 1] = slot_value_offsets[slot] + len;
    }
    let mut factor_value_offsets = vec![0u32; structure.factor_count() + 1];
    for f in 0..structure.factor_count() {
        factor_value_offsets[f + 1] = slot_value_offsets[structure.slot_range(f).end];
    }

    Ok(FactorGraph {
        prior,
        structure,
        var_adj_offsets,
        var_adj,
        slot_value_offsets,
        factor_value_offsets,
    })
}

/// All directed messages, flattened: for every (factor, member) edge one
/// variable-to-factor and one factor-to-variable vector over the member's
/// support.
pub struct MessageStore {
    pub v2f: Vec<f64>,
    pub f2v: Vec<f64>,
    pub iteration: usize,
}

impl MessageStore {
    /// Fresh store: factor-to-variable messages start uniform; the first
    /// variable-to-factor sweep then reproduces the priors.
    pub fn new(graph: &FactorGraph) -> Self {
        let total = graph.slot_value_offsets[graph.structure.total_slots()] as usize;
        let mut f2v = vec![0.0; total];
        for slot in 0..graph.structure.total_slots() {
            let range = graph.slot_value_offsets[slot] as usize
                ..graph.slot_value_offsets[slot + 1] as usize;
            let len = range.len() as f64;
            for v in &mut f2v[range] {
                *v = 1.0 / len;
            }
        }
        MessageStore {
            v2f: f2v.clone(),
            f2v,
            iteration: 0,
        }
    }

    /// Current variable-to-factor message on a slot.
    pub fn v2f_slot<'a>(&'a self, graph: &FactorGraph, slot: usize) -> &'a [f64] {
        graph.slot_values(&self.v2f, slot)
    }

    /// Current factor-to-variable message on a slot.
    pub fn f2v_slot<'a>(&'a self, graph: &FactorGraph, slot: usize) -> &'a [f64] {
        graph.slot_values(&self.f2v, slot)
    }
}

#[inline]
fn floor_and_normalize(values: &mut [f64], floor: f64) {
    let mut sum = 0.0;
    for v in values.iter_mut() {
        if *v < floor {
            *v = floor;
        }
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}

/// Variable-to-factor message: the prior times every incoming dependency
/// message except the one from `factor`, floored and normalized.
pub fn msg_var_to_factor(
    graph: &FactorGraph,
    store: &MessageStore,
    var: usize,
    factor: usize,
) -> Vec<f64> {
    let mut out = graph.prior.probs(var).to_vec();
    accumulate_var_product(graph, store, var, Some(factor), &mut out);
    floor_and_normalize(&mut out, 1e-12_f64.min(f64::MAX));
    out
}

/// Multiply `out` by every factor-to-variable message incoming to `var`,
/// skipping `exclude` when given.
fn accumulate_var_product(
    graph: &FactorGraph,
    store: &MessageStore,
    var: usize,
    exclude: Option<usize>,
    out: &mut [f64],
) {
    for (f, slot) in graph.factors_of(var) {
        if exclude == Some(*f as usize) {
            continue;
        }
        let msg = store.f2v_slot(graph, *slot as usize);
        for (o, m) in out.iter_mut().zip(msg) {
            *o *= m;
        }
    }
}

/// The equality-indicator closed form of the factor-to-variable message,
/// before flooring/normalization: for each label `d` in `var`'s support,
/// the product over the other members' variable-to-factor messages at `d`,
/// with members whose support lacks `d` contributing `message_floor`.
///
/// This equals the literal sum-product marginalization of the 0/1
/// dependency potential over the members' (floor-extended) supports: only
/// the all-equal joint state survives the indicator.
pub fn factor_message_raw(
    graph: &FactorGraph,
    store: &MessageStore,
    factor: usize,
    var: usize,
    message_floor: f64,
) -> Vec<f64> {
    let lo_i = graph.prior.label_lo(var);
    let len_i = graph.prior.support_len(var);
    let mut out = vec![1.0f64; len_i];
    for (s, member) in graph.structure.members(factor).iter().enumerate() {
        let j = *member as usize;
        if j == var {
            continue;
        }
        let slot = graph.structure.slot_range(factor).start + s;
        let msg = store.v2f_slot(graph, slot);
        let lo_j = graph.prior.label_lo(j);
        let len_j = graph.prior.support_len(j) as i64;
        for (k, o) in out.iter_mut().enumerate() {
            let d = lo_i as i64 + k as i64;
            let idx = d - lo_j as i64;
            *o *= if (0..len_j).contains(&idx) {
                msg[idx as usize]
            } else {
                message_floor
            };
        }
    }
    out
}

/// Factor-to-variable message: the closed form above, floored and
/// normalized.
pub fn msg_factor_to_var(
    graph: &FactorGraph,
    store: &MessageStore,
    factor: usize,
    var: usize,
    message_floor: f64,
) -> Vec<f64> {
    let mut out = factor_message_raw(graph, store, factor, var, message_floor);
    floor_and_normalize(&mut out, message_floor);
    out
}

/// Per-pixel posterior distributions over the pixel supports.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorField {
    pub width: usize,
    pub height: usize,
    lo: Vec<i32>,
    offsets: Vec<u32>,
    probs: Vec<f64>,
}

impl PosteriorField {
    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn label_lo(&self, pixel: usize) -> i32 {
        self.lo[pixel]
    }

    #[inline]
    pub fn probs(&self, pixel: usize) -> &[f64] {
        &self.probs[self.offsets[pixel] as usize..self.offsets[pixel + 1] as usize]
    }
}

/// MAP disparity: per-pixel posterior argmax, ties toward the smaller label.
pub fn map_disparity(post: &PosteriorField) -> DisparityMap {
    let data = (0..post.pixel_count())
        .map(|p| {
            let probs = post.probs(p);
            let mut best = 0usize;
            for (i, v) in probs.iter().enumerate() {
                if *v > probs[best] {
                    best = i;
                }
            }
            (post.lo[p] + best as i32) as f32
        })
        .collect();
    DisparityMap {
        width: post.width,
        height: post.height,
        data,
    }
}

/// One row of the per-iteration convergence trace.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct IterationTrace {
    pub iteration: usize,
    /// Absolute L2 norm of the decoded-map change.
    pub epsilon: f64,
    pub seconds: f64,
}

pub struct LbpRun {
    pub posterior: PosteriorField,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<IterationTrace>,
}

fn compute_posterior(graph: &FactorGraph, store: &MessageStore) -> PosteriorField {
    let n = graph.pixel_count();
    let mut lo = Vec::with_capacity(n);
    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0u32);
    for p in 0..n {
        lo.push(graph.prior.label_lo(p));
        offsets.push(offsets[p] + graph.prior.support_len(p) as u32);
    }
    let per_pixel: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|p| {
            let mut b = graph.prior.probs(p).to_vec();
            accumulate_var_product(graph, store, p, None, &mut b);
            let sum: f64 = b.iter().sum();
            if sum > 0.0 {
                for v in &mut b {
                    *v /= sum;
                }
            } else {
                let len = b.len() as f64;
                for v in &mut b {
                    *v = 1.0 / len;
                }
            }
            b
        })
        .collect();
    let mut probs = Vec::with_capacity(*offsets.last().unwrap() as usize);
    for b in per_pixel {
        probs.extend(b);
    }
    PosteriorField {
        width: graph.prior.width,
        height: graph.prior.height,
        lo,
        offsets,
        probs,
    }
}

/// Split a value arena into per-factor mutable slices.
fn per_factor_slices<'a>(values: &'a mut [f64], bounds: &[u32]) -> Vec<&'a mut [f64]> {
    let mut out = Vec::with_capacity(bounds.len() - 1);
    let mut rest = values;
    for w in bounds.windows(2) {
        let len = (w[1] - w[0]) as usize;
        let (head, tail) = rest.split_at_mut(len);
        out.push(head);
        rest = tail;
    }
    out
}

/// Run synchronous-flooding loopy belief propagation.
///
/// Each iteration recomputes every variable-to-factor message from the
/// previous iteration's factor-to-variable messages, then every
/// factor-to-variable message from those fresh variable messages. The MAP
/// map is decoded after each iteration and the loop stops when its change
/// norm reaches `tau` (but not before `min_iter`) or at `max_iter`.
pub fn run_lbp(graph: &FactorGraph, cfg: &LbpConfig) -> Result<LbpRun> {
    cfg.validate()?;
    let start = Instant::now();
    let mut store = MessageStore::new(graph);
    let mut prev_map = map_disparity(&compute_posterior(graph, &store));
    let mut trace = Vec::with_capacity(cfg.max_iter);
    let mut converged = false;
    let mut iterations = 0usize;
    let n = graph.pixel_count() as f64;
    let floor = cfg.message_floor;
    let damping = cfg.damping;

    for t in 1..=cfg.max_iter {
        // Half-sweep 1: variable -> factor, reading the f2v store.
        {
            let f2v = &store.f2v;
            let mut slices = per_factor_slices(&mut store.v2f, &graph.factor_value_offsets);
            slices
                .par_iter_mut()
                .enumerate()
                .for_each_init(Vec::new, |scratch: &mut Vec<f64>, (f, slice)| {
                    let base_off = graph.factor_value_offsets[f] as usize;
                    for (s, member) in graph.structure.members(f).iter().enumerate() {
                        let var = *member as usize;
                        let slot = graph.structure.slot_range(f).start + s;
                        scratch.clear();
                        scratch.extend_from_slice(graph.prior.probs(var));
                        for (g, gslot) in graph.factors_of(var) {
                            if *g as usize == f {
                                continue;
                            }
                            let msg = graph.slot_values(f2v, *gslot as usize);
                            for (o, m) in scratch.iter_mut().zip(msg) {
                                *o *= m;
                            }
                        }
                        floor_and_normalize(scratch, floor);
                        let lo = graph.slot_value_offsets[slot] as usize - base_off;
                        let dst = &mut slice[lo..lo + scratch.len()];
                        blend(dst, scratch, damping);
                    }
                });
        }
        // Half-sweep 2: factor -> variable, reading the fresh v2f store.
        {
            let v2f = &store.v2f;
            let mut slices = per_factor_slices(&mut store.f2v, &graph.factor_value_offsets);
            slices
                .par_iter_mut()
                .enumerate()
                .for_each_init(Vec::new, |scratch: &mut Vec<f64>, (f, slice)| {
                    let base_off = graph.factor_value_offsets[f] as usize;
                    let members = graph.structure.members(f);
                    let slot0 = graph.structure.slot_range(f).start;
                    for (s, member) in members.iter().enumerate() {
                        let var = *member as usize;
                        let lo_i = graph.prior.label_lo(var);
                        let len_i = graph.prior.support_len(var);
                        scratch.clear();
                        scratch.resize(len_i, 1.0);
                        for (s2, other) in members.iter().enumerate() {
                            if s2 == s {
                                continue;
                            }
                            let j = *other as usize;
                            let msg = graph.slot_values(v2f, slot0 + s2);
                            let lo_j = graph.prior.label_lo(j) as i64;
                            let len_j = graph.prior.support_len(j) as i64;
                            for (k, o) in scratch.iter_mut().enumerate() {
                                let idx = lo_i as i64 + k as i64 - lo_j;
                                *o *= if (0..len_j).contains(&idx) {
                                    msg[idx as usize]
                                } else {
                                    floor
                                };
                            }
                        }
                        floor_and_normalize(scratch, floor);
                        let lo = graph.slot_value_offsets[slot0 + s] as usize - base_off;
                        let dst = &mut slice[lo..lo + scratch.len()];
                        blend(dst, scratch, damping);
                    }
                });
        }
        store.iteration = t;
        iterations = t;

        let posterior = compute_posterior(graph, &store);
        let map = map_disparity(&posterior);
        let mut sq = 0.0;
        for (a, b) in map.data.iter().zip(&prev_map.data) {
            let d = (*a - *b) as f64;
            sq += d * d;
        }
        let epsilon = sq.sqrt();
        trace.push(IterationTrace {
            iteration: t,
            epsilon,
            seconds: start.elapsed().as_secs_f64(),
        });
        prev_map = map;

        let compare = match cfg.convergence {
            ConvergenceNorm::AbsoluteL2 => epsilon,
            ConvergenceNorm::Rms => epsilon / n.sqrt(),
        };
        if t >= cfg.min_iter && compare <= cfg.tau {
            converged = true;
            break;
        }
    }

    let posterior = compute_posterior(graph, &store);
    Ok(LbpRun {
        posterior,
        iterations,
        converged,
        trace,
    })
}

#[inline]
fn blend(dst: &mut [f64], fresh: &[f64], damping: f64) {
    if damping == 0.0 {
        dst.copy_from_slice(fresh);
    } else {
        for (d, f) in dst.iter_mut().zip(fresh) {
            *d = (1.0 - damping) * f + damping * *d;
        }
    }
}

/// Serialize a trace as CSV (`iteration,epsilon,seconds`).
pub fn trace_to_csv(trace: &[IterationTrace]) -> String {
    let mut out = String::from("iteration,epsilon,seconds\n");
    for row in trace {
        out.push_str(&format!(
            "{},{:.9},{:.6}\n",
            row.iteration, row.epsilon, row.seconds
        ));
    }
    out
}
