//! Dense reference computations and random instance builders shared by the
//! integration tests. Everything here is written with plain loops over
//! `Vec<f64>` so it shares no code path with the library.

#![allow(dead_code)]

pub mod checks;

use std::collections::BTreeMap;

use medrec_core::cohort::{index_cohort, CohortSplit, PatientRecord, Vocabs};
use medrec_core::graph::{subgraph, EhrGraph, SubGraph};
use medrec_core::reasoning::{AttnHead, GatParams};
use medrec_core::{build_cooccurrence_graph, generate_synthetic_cohort, synthetic_vocabs, SyntheticSpec};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn to_mat(a: &Array2<f64>) -> Mat {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn rand_array(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row vector times matrix.
pub fn vecmat(v: &[f64], m: &Mat) -> Vec<f64> {
    let cols = m[0].len();
    (0..cols).map(|j| (0..v.len()).map(|i| v[i] * m[i][j]).sum()).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Multi-head graph attention with concatenated heads, computed densely.
/// `adj[i][j]` is the neighbourhood including self loops.
pub fn gat_dense(x: &Mat, w: &Mat, a_src: &Mat, a_dst: &Mat, adj: &[Vec<bool>], slope: f64) -> Mat {
    let n = x.len();
    let n_heads = a_src.len();
    let hd = a_src[0].len();
    let h: Mat = x.iter().map(|r| vecmat(r, w)).collect();
    let mut out = vec![Vec::new(); n];
    for k in 0..n_heads {
        let hk: Mat = h.iter().map(|r| r[k * hd..(k + 1) * hd].to_vec()).collect();
        for i in 0..n {
            let mut logits = Vec::new();
            let mut js = Vec::new();
            for j in 0..n {
                if adj[i][j] {
                    let e = dot(&a_src[k], &hk[i]) + dot(&a_dst[k], &hk[j]);
                    logits.push(if e > 0.0 { e } else { slope * e });
                    js.push(j);
                }
            }
            let att = softmax(&logits);
            let mut acc = vec![0.0; hd];
            for (a, &j) in att.iter().zip(&js) {
                for d in 0..hd {
                    acc[d] += a * hk[j][d];
                }
            }
            out[i].extend(acc);
        }
    }
    out
}

/// One recurrent step with gates packed as reset, update, candidate.
pub fn gru_dense(x: &[f64], h: &[f64], w_ih: &Mat, w_hh: &Mat, b_ih: &[f64], b_hh: &[f64]) -> Vec<f64> {
    let hd = h.len();
    let gi = vecmat(x, w_ih);
    let gh = vecmat(h, w_hh);
    (0..hd)
        .map(|j| {
            let r = sigmoid(gi[j] + b_ih[j] + gh[j] + b_hh[j]);
            let z = sigmoid(gi[hd + j] + b_ih[hd + j] + gh[hd + j] + b_hh[hd + j]);
            let n = (gi[2 * hd + j] + b_ih[2 * hd + j] + r * (gh[2 * hd + j] + b_hh[2 * hd + j])).tanh();
            (1.0 - z) * n + z * h[j]
        })
        .collect()
}

/// Brute-force voting walk. Nodes are medication ids; `emb` maps each id to
/// its embedding row; `edge` reports adjacency. Heads vote for their first
/// maximum; the most voted candidate wins, ties go to the highest mean
/// weight among the voting heads and then to the smallest id. Dead ends
/// restart at the unvisited node with the largest `query·B·e` (or the
/// smallest id without a query).
pub struct OracleWalk {
    pub order: Vec<usize>,
    pub restarts: usize,
}

pub fn oracle_walk(
    nodes: &[usize],
    edge: &dyn Fn(usize, usize) -> bool,
    emb: &BTreeMap<usize, Vec<f64>>,
    heads: &[(Mat, Vec<f64>, Vec<f64>)],
    slope: f64,
    start: usize,
    restart: Option<(&[f64], &Mat)>,
) -> OracleWalk {
    let mut sorted = nodes.to_vec();
    sorted.sort();
    let mut visited = vec![start];
    let mut cur = start;
    let mut restarts = 0;
    while visited.len() < sorted.len() {
        let cands: Vec<usize> = sorted
            .iter()
            .copied()
            .filter(|&m| !visited.contains(&m) && edge(cur, m))
            .collect();
        let next = if cands.is_empty() {
            restarts += 1;
            let rest: Vec<usize> = sorted.iter().copied().filter(|m| !visited.contains(m)).collect();
            match restart {
                None => rest[0],
                Some((q, b)) => {
                    let qb = vecmat(q, b);
                    let mut best = rest[0];
                    let mut best_score = dot(&qb, &emb[&rest[0]]);
                    for &m in &rest[1..] {
                        let s = dot(&qb, &emb[&m]);
                        if s > best_score {
                            best = m;
                            best_score = s;
                        }
                    }
                    best
                }
            }
        } else {
            let mut votes: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for (proj, a_src, a_dst) in heads {
                let hc = vecmat(&emb[&cur], proj);
                let logits: Vec<f64> = cands
                    .iter()
                    .map(|m| {
                        let e = dot(a_src, &hc) + dot(a_dst, &vecmat(&emb[m], proj));
                        if e > 0.0 {
                            e
                        } else {
                            slope * e
                        }
                    })
                    .collect();
                let w = softmax(&logits);
                let mut pick = 0;
                for i in 1..w.len() {
                    if w[i] > w[pick] {
                        pick = i;
                    }
                }
                votes.entry(cands[pick]).or_default().push(w[pick]);
            }
            let key = |ws: &Vec<f64>| (ws.len(), ws.iter().sum::<f64>() / ws.len() as f64);
            let mut best: Option<(usize, (usize, f64))> = None;
            for (&m, ws) in &votes {
                let k = key(ws);
                let better = match best {
                    None => true,
                    Some((_, bk)) => k.0 > bk.0 || (k.0 == bk.0 && k.1 > bk.1),
                };
                if better {
                    best = Some((m, k));
                }
            }
            best.unwrap().0
        };
        visited.push(next);
        cur = next;
    }
    OracleWalk {
        order: visited,
        restarts,
    }
}

/// A random traversal instance: graph, subgraph, embeddings and heads.
pub struct WalkInstance {
    pub graph: EhrGraph,
    pub sub: SubGraph,
    pub embs: Array2<f64>,
    pub gat: GatParams,
    pub start: usize,
    pub query: Array1<f64>,
    pub bilinear: Array2<f64>,
}

impl WalkInstance {
    pub fn emb_map(&self) -> BTreeMap<usize, Vec<f64>> {
        self.sub
            .nodes()
            .iter()
            .enumerate()
            .map(|(i, &m)| (m, self.embs.row(i).to_vec()))
            .collect()
    }

    pub fn oracle_heads(&self) -> Vec<(Mat, Vec<f64>, Vec<f64>)> {
        self.gat
            .heads
            .iter()
            .map(|h| (to_mat(&h.proj), h.a_src.to_vec(), h.a_dst.to_vec()))
            .collect()
    }
}

/// Random instance over up to `max_nodes` medications of a 12-node graph.
/// With `tie_prone`, embeddings are drawn from two prototypes so equal
/// attention weights and split votes are common.
pub fn random_walk_instance(rng: &mut ChaCha8Rng, max_nodes: usize, tie_prone: bool) -> WalkInstance {
    let n = 12;
    let dim = 6;
    let p_edge = rng.gen_range(0.1..0.7);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(p_edge) {
                edges.push((i, j));
            }
        }
    }
    let graph = EhrGraph::from_edges(n, &edges).unwrap();
    let k = rng.gen_range(1..=max_nodes);
    let set = rand::seq::index::sample(rng, n, k).into_vec();
    let sub = subgraph(&graph, &set).unwrap();
    let protos = [rand_vec(rng, dim), rand_vec(rng, dim)];
    let embs = Array2::from_shape_fn((sub.len(), dim), |_| 0.0);
    let mut embs = embs;
    for i in 0..sub.len() {
        let row = if tie_prone {
            protos[rng.gen_range(0..2)].clone()
        } else {
            rand_vec(rng, dim)
        };
        for d in 0..dim {
            embs[[i, d]] = row[d];
        }
    }
    let n_heads = rng.gen_range(2..=4);
    let hd = 3;
    let heads = (0..n_heads)
        .map(|_| AttnHead {
            proj: rand_array(rng, dim, hd),
            a_src: Array1::from(rand_vec(rng, hd)),
            a_dst: Array1::from(rand_vec(rng, hd)),
        })
        .collect();
    let start = sub.nodes()[rng.gen_range(0..sub.len())];
    WalkInstance {
        graph,
        sub,
        embs,
        gat: GatParams {
            heads,
            negative_slope: 0.2,
        },
        start,
        query: Array1::from(rand_vec(rng, dim)),
        bilinear: rand_array(rng, dim, dim),
    }
}

/// A synthetic cohort indexed over its full code space.
pub fn synthetic(spec: &SyntheticSpec) -> (Vec<PatientRecord>, Vocabs) {
    let raw = generate_synthetic_cohort(spec).unwrap();
    let vocabs = synthetic_vocabs(spec).unwrap();
    (index_cohort(&raw, &vocabs).unwrap(), vocabs)
}

pub fn small_spec(n_patients: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_patients,
        n_diag: 24,
        n_proc: 8,
        n_med: 16,
        n_conditions: 4,
        meds_per_condition: (2, 4),
        conditions_per_patient: (1, 2),
        visits_range: (2, 4),
        days_range: (1, 3),
        noise_rate: 0.1,
        seed,
    }
}

pub fn split_of(records: &[PatientRecord], seed: u64) -> CohortSplit<PatientRecord> {
    medrec_core::cohort::split_cohort(records, medrec_core::cohort::DEFAULT_SPLIT, seed).unwrap()
}

pub fn train_graph(split: &CohortSplit<PatientRecord>, n_med: usize) -> EhrGraph {
    build_cooccurrence_graph(&split.train, n_med).unwrap()
}
