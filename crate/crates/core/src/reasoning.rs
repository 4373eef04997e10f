//! Multi-head graph reasoning: orders a flat medication set by walking its
//! co-occurrence subgraph, with every attention head voting for the next node.
//!
//! At each step the walk looks at the unvisited neighbours of the current
//! node. Every head scores them with its graph-attention weights and votes for
//! its top candidate. The candidate with the most votes wins. When several
//! candidates share the top vote count, each one is scored by the mean weight
//! it received from the heads that voted for it, and the highest mean wins.
//! Remaining exact ties, both inside a head and after averaging, go to the
//! lowest medication index.
//!
//! A walk that reaches a node with no unvisited neighbours while nodes remain
//! restarts at the unvisited node preferred by the query attention (when a
//! query is supplied) or else at the lowest unvisited index.
//!
//! The walk is discrete and carries no gradient.

use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EhrGraph, SubGraph};

/// One attention head: projection `dim -> head_dim` and the two halves of the
/// scoring vector (current node, candidate node).
#[derive(Debug, Clone, PartialEq)]
pub struct AttnHead {
    pub proj: Array2<f64>,
    pub a_src: Array1<f64>,
    pub a_dst: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatParams {
    pub heads: Vec<AttnHead>,
    pub negative_slope: f64,
}

/// Attention weights of one head from `current` over the candidate rows.
pub fn head_attention(
    head: &AttnHead,
    negative_slope: f64,
    current: ArrayView1<f64>,
    candidates: ArrayView2<f64>,
) -> Result<Vec<f64>> {
    if candidates.nrows() == 0 {
        return Err(Error::NoCandidates);
    }
    let s_src = head.a_src.dot(&current.dot(&head.proj));
    let s_dst = candidates.dot(&head.proj).dot(&head.a_dst);
    let logits: Vec<f64> = s_dst
        .iter()
        .map(|&s| {
            let e = s_src + s;
            if e > 0.0 {
                e
            } else {
                negative_slope * e
            }
        })
        .collect();
    Ok(softmax(&logits))
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Position of the first maximum.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Audit record for one transition of a walk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub current: usize,
    /// Candidates considered, ascending. For a restart: every unvisited node.
    pub candidates: Vec<usize>,
    /// Per head, the weights over `candidates`. Empty for restarts.
    pub head_weights: Vec<Vec<f64>>,
    /// Per head, the medication it voted for. Empty for restarts.
    pub head_votes: Vec<usize>,
    pub chosen: usize,
    /// More than one candidate shared the top vote count.
    pub tie_broken: bool,
    pub restarted: bool,
}

/// One voting step from `current` over ascending `candidates`.
pub fn vote_next(
    current: usize,
    current_emb: ArrayView1<f64>,
    candidates: &[usize],
    candidate_embs: ArrayView2<f64>,
    gat: &GatParams,
) -> Result<(usize, StepRecord)> {
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    if candidate_embs.nrows() != candidates.len() {
        return Err(Error::Shape(format!(
            "{} candidate embeddings for {} candidates",
            candidate_embs.nrows(),
            candidates.len()
        )));
    }
    debug_assert!(candidates.windows(2).all(|w| w[0] < w[1]));

    let head_weights = gat
        .heads
        .iter()
        .map(|h| head_attention(h, gat.negative_slope, current_emb, candidate_embs))
        .collect::<Result<Vec<_>>>()?;
    let picks: Vec<usize> = head_weights.iter().map(|w| argmax(w)).collect();

    let mut counts = vec![0usize; candidates.len()];
    for &p in &picks {
        counts[p] += 1;
    }
    let top = counts.iter().copied().max().unwrap_or(0);
    let tied: Vec<usize> = (0..candidates.len()).filter(|&p| counts[p] == top).collect();

    let winner = if tied.len() == 1 {
        tied[0]
    } else {
        let means: Vec<f64> = tied
            .iter()
            .map(|&p| {
                let voters: Vec<f64> = picks
                    .iter()
                    .zip(&head_weights)
                    .filter(|(&pick, _)| pick == p)
                    .map(|(_, w)| w[p])
                    .collect();
                voters.iter().sum::<f64>() / voters.len() as f64
            })
            .collect();
        tied[argmax(&means)]
    };

    let chosen = candidates[winner];
    Ok((
        chosen,
        StepRecord {
            current,
            candidates: candidates.to_vec(),
            head_votes: picks.iter().map(|&p| candidates[p]).collect(),
            head_weights,
            chosen,
            tie_broken: tied.len() > 1,
            restarted: false,
        },
    ))
}

/// Bilinear query attention `queryᵀ B e_j`, used to pick restart nodes.
#[derive(Debug, Clone)]
pub struct RestartQuery {
    projected: Array1<f64>,
}

impl RestartQuery {
    pub fn new(query: ArrayView1<f64>, bilinear: ArrayView2<f64>) -> Self {
        Self {
            projected: query.dot(&bilinear),
        }
    }

    pub fn logits(&self, rows: ArrayView2<f64>) -> Vec<f64> {
        rows.dot(&self.projected).to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Traversal {
    /// Visiting order; a permutation of the traversed set.
    pub order: Vec<usize>,
    /// Bridge node a chained walk started from; it is not part of `order`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bridge: Option<usize>,
    /// One record per transition, including the step out of the bridge.
    pub steps: Vec<StepRecord>,
}

impl Traversal {
    pub fn restarts(&self) -> usize {
        self.steps.iter().filter(|s| s.restarted).count()
    }

    pub fn vote_calls(&self) -> usize {
        self.steps.iter().filter(|s| !s.restarted).count()
    }
}

/// Walks `sub` from `start`. `embs` rows are aligned with `sub.nodes()`.
pub fn traverse(
    sub: &SubGraph,
    embs: ArrayView2<f64>,
    start: usize,
    gat: &GatParams,
    restart: Option<&RestartQuery>,
) -> Result<Traversal> {
    if sub.is_empty() {
        return Err(Error::EmptySet);
    }
    if embs.nrows() != sub.len() {
        return Err(Error::Shape(format!(
            "{} embedding rows for {} nodes",
            embs.nrows(),
            sub.len()
        )));
    }
    let start_pos = sub.position(start).ok_or(Error::NodeNotInSubgraph(start))?;
    let nodes = sub.nodes();
    let mut visited: HashSet<usize> = HashSet::with_capacity(nodes.len());
    visited.insert(start);
    let mut order = vec![start];
    let mut steps = Vec::with_capacity(nodes.len().saturating_sub(1));
    let mut cur = start;
    let mut cur_pos = start_pos;

    while order.len() < nodes.len() {
        let cands = sub.unvisited_neighbors(cur, &visited)?;
        let (next, record) = if !cands.is_empty() {
            let pos: Vec<usize> = cands.iter().map(|&c| sub.position(c).unwrap()).collect();
            let cand_embs = embs.select(Axis(0), &pos);
            vote_next(cur, embs.row(cur_pos), &cands, cand_embs.view(), gat)?
        } else {
            let rest: Vec<usize> = nodes.iter().copied().filter(|m| !visited.contains(m)).collect();
            let next = match restart {
                Some(q) => {
                    let pos: Vec<usize> = rest.iter().map(|&c| sub.position(c).unwrap()).collect();
                    rest[argmax(&q.logits(embs.select(Axis(0), &pos).view()))]
                }
                None => rest[0],
            };
            let record = StepRecord {
                current: cur,
                candidates: rest,
                head_weights: Vec::new(),
                head_votes: Vec::new(),
                chosen: next,
                tie_broken: false,
                restarted: true,
            };
            (next, record)
        };
        visited.insert(next);
        order.push(next);
        steps.push(record);
        cur = next;
        cur_pos = sub.position(next).unwrap();
    }
    Ok(Traversal {
        order,
        bridge: None,
        steps,
    })
}

/// Walks `sub` starting from a bridge node carried over from the previous
/// day. The bridge joins the subgraph with its edges from `graph` (or edges
/// to every member when it has none), seeds the walk, and is dropped from
/// the returned order. A bridge already in `sub` is simply the start node.
pub fn chained_traverse(
    graph: &EhrGraph,
    sub: &SubGraph,
    embs: ArrayView2<f64>,
    bridge: usize,
    bridge_emb: ArrayView1<f64>,
    gat: &GatParams,
    restart: Option<&RestartQuery>,
) -> Result<Traversal> {
    if sub.is_empty() {
        return Err(Error::EmptySet);
    }
    if sub.contains(bridge) {
        return traverse(sub, embs, bridge, gat, restart);
    }
    let aug = sub.with_bridge(graph, bridge)?;
    let at = aug.position(bridge).expect("bridge inserted");
    let mut rows: Vec<ArrayView1<f64>> = embs.rows().into_iter().collect();
    rows.insert(at, bridge_emb);
    let aug_embs = ndarray::stack(Axis(0), &rows)
        .map_err(|e| Error::Shape(format!("bridge embedding: {e}")))?;
    let mut t = traverse(&aug, aug_embs.view(), bridge, gat, restart)?;
    t.order.remove(0);
    t.bridge = Some(bridge);
    Ok(t)
}
