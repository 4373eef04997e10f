//! Differentiable building blocks recorded on a [`Tape`].

use std::rc::Rc;

use ndarray::s;
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParamStore};
use crate::reasoning::{AttnHead, GatParams};
use crate::tape::{Tape, Var};

/// Affine map `x W + b` applied to each row of `x`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: store.add_glorot(format!("{name}.weight"), input, output, rng),
            bias: store.add_zeros(format!("{name}.bias"), 1, output),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

/// Gated recurrent unit with reset, update and candidate gates packed in
/// that column order:
///
/// ```text
/// r  = σ(x W_r + b_r + h U_r + c_r)
/// z  = σ(x W_z + b_z + h U_z + c_z)
/// n  = tanh(x W_n + b_n + r ⊙ (h U_n + c_n))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w_ih: store.add_glorot(format!("{name}.w_ih"), input, 3 * hidden, rng),
            w_hh: store.add_glorot(format!("{name}.w_hh"), hidden, 3 * hidden, rng),
            b_ih: store.add_zeros(format!("{name}.b_ih"), 1, 3 * hidden),
            b_hh: store.add_zeros(format!("{name}.b_hh"), 1, 3 * hidden),
            hidden,
        }
    }

    pub fn zero_state(&self, tape: &mut Tape) -> Var {
        tape.zeros(1, self.hidden)
    }

    pub fn step(&self, tape: &mut Tape, store: &ParamStore, h: Var, x: Var) -> Var {
        let hd = self.hidden;
        let w_ih = tape.param(store, self.w_ih);
        let w_hh = tape.param(store, self.w_hh);
        let b_ih = tape.param(store, self.b_ih);
        let b_hh = tape.param(store, self.b_hh);
        let gi = tape.matmul(x, w_ih);
        let gi = tape.add_row(gi, b_ih);
        let gh = tape.matmul(h, w_hh);
        let gh = tape.add_row(gh, b_hh);

        let gi_r = tape.slice_cols(gi, 0, hd);
        let gh_r = tape.slice_cols(gh, 0, hd);
        let r = tape.add(gi_r, gh_r);
        let r = tape.sigmoid(r);

        let gi_z = tape.slice_cols(gi, hd, 2 * hd);
        let gh_z = tape.slice_cols(gh, hd, 2 * hd);
        let z = tape.add(gi_z, gh_z);
        let z = tape.sigmoid(z);

        let gi_n = tape.slice_cols(gi, 2 * hd, 3 * hd);
        let gh_n = tape.slice_cols(gh, 2 * hd, 3 * hd);
        let rn = tape.mul(r, gh_n);
        let n = tape.add(gi_n, rn);
        let n = tape.tanh(n);

        // h' = n + z ⊙ (h − n)
        let diff = tape.sub(h, n);
        let zd = tape.mul(z, diff);
        tape.add(n, zd)
    }

    /// Runs the recurrence from a zero state; returns every hidden state.
    pub fn run(&self, tape: &mut Tape, store: &ParamStore, inputs: &[Var]) -> Vec<Var> {
        let mut h = self.zero_state(tape);
        inputs
            .iter()
            .map(|&x| {
                h = self.step(tape, store, h, x);
                h
            })
            .collect()
    }

    /// Final hidden state over the rows of an `n x input` matrix.
    pub fn last_over_rows(&self, tape: &mut Tape, store: &ParamStore, seq: Var) -> Var {
        let n = tape.value(seq).nrows();
        let mut h = self.zero_state(tape);
        for i in 0..n {
            let x = tape.rows(seq, &[i]);
            h = self.step(tape, store, h, x);
        }
        h
    }
}

/// Multi-head graph attention layer with concatenated head outputs.
///
/// Head `k` projects `H_k = X W_k` and scores an edge `i -> j` (node `i`
/// attending to neighbour `j`) as `LeakyReLU(a_src,k · H_k[i] + a_dst,k · H_k[j])`,
/// normalised by a softmax over `j` in `N(i) ∪ {i}`. The output row is
/// `concat_k Σ_j α_ij H_k[j]`; no further nonlinearity is applied.
#[derive(Debug, Clone)]
pub struct GatLayer {
    pub weight: ParamId,
    pub a_src: ParamId,
    pub a_dst: ParamId,
    pub n_heads: usize,
    pub head_dim: usize,
    pub negative_slope: f64,
}

impl GatLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        n_heads: usize,
        negative_slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(n_heads >= 1 && dim % n_heads == 0, "dim must be divisible by n_heads");
        let head_dim = dim / n_heads;
        Self {
            weight: store.add_glorot(format!("{name}.weight"), dim, dim, rng),
            a_src: store.add_glorot(format!("{name}.a_src"), n_heads, head_dim, rng),
            a_dst: store.add_glorot(format!("{name}.a_dst"), n_heads, head_dim, rng),
            n_heads,
            head_dim,
            negative_slope,
        }
    }

    /// `mask` is the row-major `n x n` neighbourhood including self loops.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mask: Rc<Vec<bool>>) -> Var {
        let w = tape.param(store, self.weight);
        let a_src = tape.param(store, self.a_src);
        let a_dst = tape.param(store, self.a_dst);
        let h = tape.matmul(x, w);
        let heads: Vec<Var> = (0..self.n_heads)
            .map(|k| {
                let hk = tape.slice_cols(h, k * self.head_dim, (k + 1) * self.head_dim);
                let src = tape.rows(a_src, &[k]);
                let dst = tape.rows(a_dst, &[k]);
                let s_src = tape.matmul_t(hk, src); // n x 1
                let s_dst = tape.matmul_t(dst, hk); // 1 x n
                let e = tape.outer_sum(s_src, s_dst);
                let e = tape.leaky_relu(e, self.negative_slope);
                let att = tape.masked_softmax_rows(e, mask.clone());
                tape.matmul(att, hk)
            })
            .collect();
        if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        }
    }

    /// Plain-value view of the heads, used for voting.
    pub fn heads(&self, store: &ParamStore) -> GatParams {
        let w = store.get(self.weight);
        let a_src = store.get(self.a_src);
        let a_dst = store.get(self.a_dst);
        let heads = (0..self.n_heads)
            .map(|k| AttnHead {
                proj: w.slice(s![.., k * self.head_dim..(k + 1) * self.head_dim]).to_owned(),
                a_src: a_src.row(k).to_owned(),
                a_dst: a_dst.row(k).to_owned(),
            })
            .collect();
        GatParams {
            heads,
            negative_slope: self.negative_slope,
        }
    }
}

/// Applies a stack of GAT layers over one neighbourhood mask.
pub fn gat_stack(layers: &[GatLayer], tape: &mut Tape, store: &ParamStore, x: Var, mask: Rc<Vec<bool>>) -> Var {
    layers
        .iter()
        .fold(x, |h, layer| layer.forward(tape, store, h, mask.clone()))
}
