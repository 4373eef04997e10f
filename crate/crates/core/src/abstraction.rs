//! Medication abstraction: medication embeddings are lifted to daily nodes,
//! prescription nodes and a memory reference, and selected candidates are
//! abstracted the same way before prediction.

use std::rc::Rc;

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::Visit;
use crate::error::{Error, Result};
use crate::graph::{subgraph, EhrGraph, SubGraph};
use crate::nn::{gat_stack, GatLayer, Gru, Linear};
use crate::params::{ParamId, ParamStore};
use crate::reasoning::{argmax, chained_traverse, softmax, traverse, GatParams, RestartQuery, Traversal};
use crate::tape::{sigmoid, Tape, Var};

#[derive(Debug, Clone)]
pub struct MedParams {
    pub med_emb: ParamId,
    pub gat_global: Vec<GatLayer>,
    pub gat_local: Vec<GatLayer>,
    /// `dim x dim` bilinear score shared by start selection and candidate scoring.
    pub bilinear: ParamId,
    pub gru_day: Gru,
    pub gru_visit: Gru,
    pub gru_cand: Gru,
    pub out_head: Linear,
    pub dim: usize,
}

/// Per-visit abstraction results.
#[derive(Debug, Clone)]
pub struct VisitAbstraction {
    pub daily_nodes: Vec<Var>,
    pub prescription_node: Var,
    pub traversals: Vec<Traversal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub predicted_set: Vec<usize>,
}

impl Prediction {
    /// Probabilities `sigmoid(logits)`; a medication is predicted when its
    /// probability is strictly above 0.5.
    pub fn from_logits(logits: &[f64]) -> Self {
        let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        let predicted_set = probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.5)
            .map(|(i, _)| i)
            .collect();
        Self { probs, predicted_set }
    }
}

pub struct ModelShape {
    pub n_med: usize,
    pub dim: usize,
    pub n_heads: usize,
    pub global_layers: usize,
    pub local_layers: usize,
    pub negative_slope: f64,
}

impl MedParams {
    pub fn new(store: &mut ParamStore, shape: &ModelShape, rng: &mut ChaCha8Rng) -> Self {
        let dim = shape.dim;
        let med_emb = store.add_glorot("med.emb", shape.n_med, dim, rng);
        let gat_global = (0..shape.global_layers)
            .map(|l| GatLayer::new(store, &format!("med.gat_global.{l}"), dim, shape.n_heads, shape.negative_slope, rng))
            .collect();
        let gat_local = (0..shape.local_layers)
            .map(|l| GatLayer::new(store, &format!("med.gat_local.{l}"), dim, shape.n_heads, shape.negative_slope, rng))
            .collect();
        Self {
            med_emb,
            gat_global,
            gat_local,
            bilinear: store.add_glorot("med.bilinear", dim, dim, rng),
            gru_day: Gru::new(store, "med.gru_day", dim, dim, rng),
            gru_visit: Gru::new(store, "med.gru_visit", dim, dim, rng),
            gru_cand: Gru::new(store, "med.gru_cand", dim, dim, rng),
            out_head: Linear::new(store, "med.out_head", 3 * dim, shape.n_med, rng),
            dim,
        }
    }

    /// Heads that vote during graph reasoning: the last local layer (or the
    /// last global one when there are no local layers).
    pub fn voting_heads(&self, store: &ParamStore) -> GatParams {
        self.gat_local
            .last()
            .or(self.gat_global.last())
            .expect("model has at least one GAT layer")
            .heads(store)
    }

    /// Medication embeddings propagated over the full co-occurrence graph.
    pub fn update_global_embeddings(&self, tape: &mut Tape, store: &ParamStore, graph: &EhrGraph) -> Var {
        let w = tape.param(store, self.med_emb);
        gat_stack(&self.gat_global, tape, store, w, Rc::new(graph.attention_mask()))
    }

    /// Local GAT over a subgraph, applied to copies of the given rows.
    pub fn update_local_embeddings(&self, tape: &mut Tape, store: &ParamStore, rows: Var, sub: &SubGraph) -> Var {
        gat_stack(&self.gat_local, tape, store, rows, Rc::new(sub.attention_mask()))
    }

    /// Abstracts one visit's prescription into daily nodes and a prescription node.
    #[allow(clippy::too_many_arguments)]
    pub fn abstract_prescription(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        graph: &EhrGraph,
        e_m: Var,
        query: Var,
        visit: &Visit,
        voting: &GatParams,
    ) -> Result<VisitAbstraction> {
        let meds = visit.medications();
        if meds.is_empty() {
            return Err(Error::EmptySet);
        }
        let visit_sub = subgraph(graph, &meds)?;
        let rows = tape.rows(e_m, visit_sub.nodes());
        let e_visit = self.update_local_embeddings(tape, store, rows, &visit_sub);

        let bilinear = store.get(self.bilinear);
        let q = Array1::from(tape.row(query));
        let restart = RestartQuery::new(q.view(), bilinear.view());

        let mut daily_nodes = Vec::with_capacity(visit.daily_meds.len());
        let mut traversals = Vec::with_capacity(visit.daily_meds.len());
        let mut bridge: Option<(usize, Array1<f64>)> = None;
        for day in &visit.daily_meds {
            let day_sub = subgraph(graph, day)?;
            let pos: Vec<usize> = day_sub
                .nodes()
                .iter()
                .map(|&m| visit_sub.position(m).expect("day set within visit set"))
                .collect();
            let day_rows = tape.rows(e_visit, &pos);
            let e_day = self.update_local_embeddings(tape, store, day_rows, &day_sub);
            let vals = tape.value(e_day).clone();

            let t = match &bridge {
                None => {
                    let (start, _) = select_start(q.view(), vals.view(), bilinear.view())?;
                    traverse(&day_sub, vals.view(), day_sub.nodes()[start], voting, Some(&restart))?
                }
                Some((b, emb)) => chained_traverse(graph, &day_sub, vals.view(), *b, emb.view(), voting, Some(&restart))?,
            };
            let order_pos: Vec<usize> = t.order.iter().map(|&m| day_sub.position(m).unwrap()).collect();
            let ordered = tape.rows(e_day, &order_pos);
            daily_nodes.push(encode_day(&self.gru_day, tape, store, ordered));

            let last = *order_pos.last().unwrap();
            bridge = Some((day_sub.nodes()[last], vals.row(last).to_owned()));
            traversals.push(t);
        }
        let states = self.gru_visit.run(tape, store, &daily_nodes);
        Ok(VisitAbstraction {
            prescription_node: *states.last().unwrap(),
            daily_nodes,
            traversals,
        })
    }

    /// Bilinear logits `qᵀ B e_j` over the full table and their softmax.
    pub fn candidate_scores(&self, tape: &mut Tape, store: &ParamStore, query: Var, e_m: Var) -> (Var, Var) {
        let b = tape.param(store, self.bilinear);
        let qb = tape.matmul(query, b);
        let z = tape.matmul_t(qb, e_m);
        let alpha = tape.softmax_rows(z);
        (z, alpha)
    }

    /// Orders the selected candidates and encodes the sequence.
    ///
    /// The walk starts at the selected candidate with the highest logit.
    #[allow(clippy::too_many_arguments)]
    pub fn abstract_candidates(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        graph: &EhrGraph,
        e_m: Var,
        query: Var,
        selected: &[usize],
        logits: &[f64],
        voting: &GatParams,
    ) -> Result<(Var, Traversal)> {
        if selected.is_empty() {
            return Err(Error::EmptySet);
        }
        let sub = subgraph(graph, selected)?;
        let rows = tape.rows(e_m, sub.nodes());
        let vals = tape.value(rows).clone();
        let sel_logits: Vec<f64> = sub.nodes().iter().map(|&m| logits[m]).collect();
        let start = sub.nodes()[argmax(&sel_logits)];
        let q = Array1::from(tape.row(query));
        let restart = RestartQuery::new(q.view(), store.get(self.bilinear).view());
        let t = traverse(&sub, vals.view(), start, voting, Some(&restart))?;
        let pos: Vec<usize> = t.order.iter().map(|&m| sub.position(m).unwrap()).collect();
        let ordered = tape.rows(rows, &pos);
        let h = self.gru_cand.last_over_rows(tape, store, ordered);
        Ok((h, t))
    }

    /// Output logits `f([q, ref_a, ref_b])`.
    pub fn predict(&self, tape: &mut Tape, store: &ParamStore, query: Var, ref_a: Var, ref_b: Var) -> Var {
        let cat = tape.concat_cols(&[query, ref_a, ref_b]);
        self.out_head.forward(tape, store, cat)
    }
}

/// Start node of a set: `argmax softmax(queryᵀ B e_j)`, ties to the lowest
/// position. Returns the position and the weights.
pub fn select_start(
    query: ArrayView1<f64>,
    set_embs: ArrayView2<f64>,
    bilinear: ArrayView2<f64>,
) -> Result<(usize, Vec<f64>)> {
    if set_embs.nrows() == 0 {
        return Err(Error::EmptySet);
    }
    let logits = RestartQuery::new(query, bilinear).logits(set_embs);
    let weights = softmax(&logits);
    Ok((argmax(&weights), weights))
}

/// Final hidden state of a recurrence over an ordered sequence of rows.
pub fn encode_day(gru: &Gru, tape: &mut Tape, store: &ParamStore, ordered: Var) -> Var {
    gru.last_over_rows(tape, store, ordered)
}

/// Key-value memory read: attention of `query` over `keys`, mixed over
/// `values`. An empty memory reads as the zero vector.
pub fn memory_read(tape: &mut Tape, query: Var, keys: &[Var], values: &[Var], dim: usize) -> Var {
    if keys.is_empty() {
        return tape.zeros(1, dim);
    }
    let k = tape.concat_rows(keys);
    let v = tape.concat_rows(values);
    let logits = tape.matmul_t(query, k);
    let alpha = tape.softmax_rows(logits);
    tape.matmul(alpha, v)
}

/// Attention read `r = α e_m`.
pub fn candidate_read(tape: &mut Tape, alpha: Var, e_m: Var) -> Var {
    tape.matmul(alpha, e_m)
}

/// Medications whose `sigmoid(logit)` exceeds `tau`; never empty (falls back
/// to the single highest logit).
pub fn select_candidates(logits: &[f64], tau: f64) -> Vec<usize> {
    let sel: Vec<usize> = logits
        .iter()
        .enumerate()
        .filter(|(_, &z)| sigmoid(z) > tau)
        .map(|(i, _)| i)
        .collect();
    if sel.is_empty() && !logits.is_empty() {
        vec![argmax(logits)]
    } else {
        sel
    }
}

/// Mean-pooled embedding of a medication set.
pub fn mean_pool(tape: &mut Tape, e_m: Var, meds: &[usize]) -> Result<Var> {
    if meds.is_empty() {
        return Err(Error::EmptySet);
    }
    let rows = tape.rows(e_m, meds);
    Ok(tape.mean_rows(rows))
}
