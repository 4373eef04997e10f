//! Layer-versus-reference checks. Each returns the largest absolute
//! deviation seen over `cases` random instances.

use std::rc::Rc;

use super::*;
use medrec_core::abstraction::memory_read;
use medrec_core::cohort::{Visit, VocabSizes};
use medrec_core::nn::{GatLayer, Gru};
use medrec_core::params::ParamStore;
use medrec_core::tape::Tape;
use medrec_core::{Model, ModelConfig};
use ndarray::Array2;
use rand::Rng;


fn randomize(store: &mut ParamStore, rng: &mut rand_chacha::ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let (r, c) = store.get(id).dim();
        *store.get_mut(id) = rand_array(rng, r, c);
    }
}

fn small_model(rng: &mut rand_chacha::ChaCha8Rng, dim: usize) -> Model {
    let sizes = VocabSizes {
        n_diag: 7,
        n_proc: 5,
        n_med: 9,
    };
    let config = ModelConfig {
        dim,
        n_heads: 2,
        ..ModelConfig::default()
    };
    let mut model = Model::new(config, sizes, rng.gen()).unwrap();
    randomize(&mut model.store, rng);
    model
}

pub fn gat_error(seed: u64, cases: usize) -> f64 {
    let mut rng = rng(seed);
    let mut err: f64 = 0.0;
    for _ in 0..cases {
        let n = rng.gen_range(1..=6);
        let n_heads = [1, 2, 4][rng.gen_range(0..3)];
        let dim = 4 * rng.gen_range(1..=3);
        let mut store = ParamStore::default();
        let layer = GatLayer::new(&mut store, "g", dim, n_heads, 0.2, &mut rng);
        let x = rand_array(&mut rng, n, dim);
        let adj: Vec<Vec<bool>> = (0..n)
            .map(|i| (0..n).map(|j| i == j || rng.gen_bool(0.5)).collect())
            .collect();
        let mask: Vec<bool> = adj.iter().flatten().copied().collect();

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = layer.forward(&mut tape, &store, xv, Rc::new(mask));
        let got = to_mat(tape.value(out));
        let want = gat_dense(
            &to_mat(&x),
            &to_mat(store.get(layer.weight)),
            &to_mat(store.get(layer.a_src)),
            &to_mat(store.get(layer.a_dst)),
            &adj,
            0.2,
        );
        for (g, w) in got.iter().zip(&want) {
            err = err.max(max_abs_diff(g, w));
        }
    }
    err
}

pub fn gru_error(seed: u64, cases: usize) -> f64 {
    let mut rng = rng(seed);
    let mut err: f64 = 0.0;
    for _ in 0..cases {
        let input = rng.gen_range(1..=6);
        let hidden = rng.gen_range(1..=6);
        let mut store = ParamStore::default();
        let gru = Gru::new(&mut store, "r", input, hidden, &mut rng);
        randomize(&mut store, &mut rng);
        let steps = rng.gen_range(1..=4);
        let xs: Vec<Vec<f64>> = (0..steps).map(|_| rand_vec(&mut rng, input)).collect();

        let mut tape = Tape::new();
        let inputs: Vec<_> = xs
            .iter()
            .map(|x| tape.constant(Array2::from_shape_vec((1, input), x.clone()).unwrap()))
            .collect();
        let states = gru.run(&mut tape, &store, &inputs);

        let mut h = vec![0.0; hidden];
        for (x, s) in xs.iter().zip(&states) {
            h = gru_dense(
                x,
                &h,
                &to_mat(store.get(gru.w_ih)),
                &to_mat(store.get(gru.w_hh)),
                &store.get(gru.b_ih).row(0).to_vec(),
                &store.get(gru.b_hh).row(0).to_vec(),
            );
            err = err.max(max_abs_diff(&tape.row(*s), &h));
        }
    }
    err
}

pub fn bilinear_error(seed: u64, cases: usize) -> f64 {
    let mut rng = rng(seed);
    let mut err: f64 = 0.0;
    for _ in 0..cases {
        let dim = 2 * rng.gen_range(1..=4);
        let model = small_model(&mut rng, dim);
        let q = rand_vec(&mut rng, dim);
        let e = rand_array(&mut rng, 9, dim);
        let mut tape = Tape::new();
        let qv = tape.constant(Array2::from_shape_vec((1, dim), q.clone()).unwrap());
        let ev = tape.constant(e.clone());
        let (z, alpha) = model.med.candidate_scores(&mut tape, &model.store, qv, ev);

        let qb = vecmat(&q, &to_mat(model.store.get(model.bilinear())));
        let want_z: Vec<f64> = to_mat(&e).iter().map(|row| dot(&qb, row)).collect();
        err = err.max(max_abs_diff(&tape.row(z), &want_z));
        err = err.max(max_abs_diff(&tape.row(alpha), &softmax(&want_z)));
    }
    err
}

pub fn memory_read_error(seed: u64, cases: usize) -> f64 {
    let mut rng = rng(seed);
    let mut err: f64 = 0.0;
    for case in 0..cases {
        let dim = rng.gen_range(1..=8);
        let n = if case == 0 { 0 } else { rng.gen_range(1..=5) };
        let q = rand_vec(&mut rng, dim);
        let keys: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(&mut rng, dim)).collect();
        let vals: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(&mut rng, dim)).collect();

        let mut tape = Tape::new();
        let row = |tape: &mut Tape, v: &Vec<f64>| tape.constant(Array2::from_shape_vec((1, dim), v.clone()).unwrap());
        let qv = row(&mut tape, &q);
        let kv: Vec<_> = keys.iter().map(|k| row(&mut tape, k)).collect();
        let vv: Vec<_> = vals.iter().map(|v| row(&mut tape, v)).collect();
        let out = memory_read(&mut tape, qv, &kv, &vv, dim);

        let mut want = vec![0.0; dim];
        if n > 0 {
            let w = softmax(&keys.iter().map(|k| dot(&q, k)).collect::<Vec<_>>());
            for (a, v) in w.iter().zip(&vals) {
                for d in 0..dim {
                    want[d] += a * v[d];
                }
            }
        }
        err = err.max(max_abs_diff(&tape.row(out), &want));
    }
    err
}

pub fn prediction_head_error(seed: u64, cases: usize) -> f64 {
    let mut rng = rng(seed);
    let mut err: f64 = 0.0;
    for _ in 0..cases {
        let dim = 2 * rng.gen_range(1..=4);
        let model = small_model(&mut rng, dim);
        let parts: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, dim)).collect();
        let mut tape = Tape::new();
        let vars: Vec<_> = parts
            .iter()
            .map(|p| tape.constant(Array2::from_shape_vec((1, dim), p.clone()).unwrap()))
            .collect();
        let logits = model.med.predict(&mut tape, &model.store, vars[0], vars[1], vars[2]);

        let cat: Vec<f64> = parts.concat();
        let w = to_mat(model.store.get(model.med.out_head.weight));
        let b = model.store.get(model.med.out_head.bias).row(0).to_vec();
        let want: Vec<f64> = vecmat(&cat, &w).iter().zip(&b).map(|(x, y)| x + y).collect();
        err = err.max(max_abs_diff(&tape.row(logits), &want));
    }
    err
}

pub fn encoder_error(seed: u64, cases: usize) -> f64 {
    let mut rng = rng(seed);
    let mut err: f64 = 0.0;
    for _ in 0..cases {
        let dim = 2 * rng.gen_range(1..=4);
        let model = small_model(&mut rng, dim);
        let n_visits = rng.gen_range(1..=4);
        let visits: Vec<Visit> = (0..n_visits)
            .map(|_| {
                let nd = rng.gen_range(1..=3);
                let np = rng.gen_range(0..=2);
                let mut d: Vec<usize> = rand::seq::index::sample(&mut rng, 7, nd).into_vec();
                let mut p: Vec<usize> = rand::seq::index::sample(&mut rng, 5, np).into_vec();
                d.sort();
                p.sort();
                Visit {
                    diagnoses: d,
                    procedures: p,
                    daily_meds: vec![vec![0]],
                }
            })
            .collect();
        let recurrent = rng.gen_bool(0.7);
        let mut tape = Tape::new();
        let enc = model
            .encoder
            .encode_patient(&mut tape, &model.store, &visits, recurrent)
            .unwrap();

        let s = &model.store;
        let e = &model.encoder;
        let mean_rows = |table: &Mat, idx: &[usize]| -> Vec<f64> {
            if idx.is_empty() {
                return vec![0.0; dim];
            }
            (0..dim)
                .map(|c| idx.iter().map(|&i| table[i][c]).sum::<f64>() / idx.len() as f64)
                .collect()
        };
        let diag = to_mat(s.get(e.diag_emb));
        let proc = to_mat(s.get(e.proc_emb));
        let gru = |g: &Gru, x: &[f64], h: &[f64]| {
            gru_dense(
                x,
                h,
                &to_mat(s.get(g.w_ih)),
                &to_mat(s.get(g.w_hh)),
                &s.get(g.b_ih).row(0).to_vec(),
                &s.get(g.b_hh).row(0).to_vec(),
            )
        };
        let fw = to_mat(s.get(e.fuse.weight));
        let fb = s.get(e.fuse.bias).row(0).to_vec();
        let (mut hd, mut hp) = (vec![0.0; dim], vec![0.0; dim]);
        for (t, v) in visits.iter().enumerate() {
            let d = mean_rows(&diag, &v.diagnoses);
            let p = mean_rows(&proc, &v.procedures);
            if recurrent {
                hd = gru(&e.gru_diag, &d, &hd);
                hp = gru(&e.gru_proc, &p, &hp);
            } else {
                hd = d;
                hp = p;
            }
            let cat = [hd.clone(), hp.clone()].concat();
            let q: Vec<f64> = vecmat(&cat, &fw).iter().zip(&fb).map(|(x, y)| x + y).collect();
            err = err.max(max_abs_diff(&tape.row(enc.q[t]), &q));
        }
    }
    err
}
