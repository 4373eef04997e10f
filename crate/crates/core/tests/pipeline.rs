//! End-to-end properties of the forward pass, training and persistence.

mod common;

use std::collections::HashSet;

use common::*;
use medrec_core::cohort::{
    build_vocabs, filter_cohort, index_cohort, load_cohort, save_cohort, CohortSplit, PatientRecord, RawPatient,
    RawVisit,
};
use medrec_core::{
    run_variant, train_stage1, train_stage2, Checkpoint, EhrGraph, ForwardOptions, Model, ModelConfig, Stage,
    SyntheticSpec, TrainConfig, Variant,
};
use rand::Rng;

fn small_config(epochs1: usize, epochs2: usize) -> TrainConfig {
    TrainConfig {
        dim: 16,
        n_heads: 2,
        lr: 5e-3,
        epochs_stage1: epochs1,
        epochs_stage2: epochs2,
        seed: 9,
        ..TrainConfig::default()
    }
}

fn fixture(n: usize, seed: u64) -> (CohortSplit<PatientRecord>, EhrGraph, medrec_core::VocabSizes) {
    let spec = small_spec(n, seed);
    let (records, vocabs) = synthetic(&spec);
    let split = split_of(&records, seed);
    let graph = train_graph(&split, spec.n_med);
    (split, graph, vocabs.sizes())
}

fn logits_of(model: &Model, graph: &EhrGraph, r: &PatientRecord, opts: &ForwardOptions) -> Vec<Vec<f64>> {
    let fwd = model.forward_patient(r, graph, opts).unwrap();
    fwd.visits.iter().map(|v| fwd.tape.row(v.logits)).collect()
}

#[test]
fn prediction_ignores_the_target_prescription() {
    let (split, graph, sizes) = fixture(30, 1);
    let model = Model::new(ModelConfig { dim: 16, n_heads: 2, ..Default::default() }, sizes, 4).unwrap();
    let mut rng = rng(77);
    for stage in [Stage::One, Stage::Two] {
        for variant in Variant::ALL {
            let opts = ForwardOptions { stage, variant, tau: 0.5, first_target: 1 };
            for r in &split.train {
                let base = logits_of(&model, &graph, r, &opts);
                for t in 1..r.visits.len() {
                    let mut changed = r.clone();
                    let m = rng.gen_range(0..sizes.n_med);
                    changed.visits[t].daily_meds = vec![vec![m], vec![(m + 1) % sizes.n_med]];
                    let got = logits_of(&model, &graph, &changed, &opts);
                    assert_eq!(got[t - 1], base[t - 1], "{} visit {t} {variant}", r.patient_id);
                }
            }
        }
    }
}

#[test]
fn first_visit_reads_an_empty_memory() {
    let (split, graph, sizes) = fixture(20, 2);
    let model = Model::new(ModelConfig { dim: 16, n_heads: 2, ..Default::default() }, sizes, 5).unwrap();
    for variant in Variant::ALL {
        let opts = ForwardOptions { stage: Stage::One, variant, tau: 0.5, first_target: 0 };
        for r in &split.train {
            let fwd = model.forward_patient(r, &graph, &opts).unwrap();
            let first = &fwd.visits[0];
            assert_eq!(first.visit_idx, 0);
            assert_eq!(first.memory_len, 0);
            assert!(fwd.tape.row(first.reference).iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn stage_two_freezes_the_bilinear_matrix() {
    let (split, _graph, sizes) = fixture(30, 3);
    let graph = train_graph(&split, sizes.n_med);
    let cfg = small_config(2, 3);
    let s1 = train_stage1(&graph, &split, sizes, &cfg).unwrap();
    let s2 = train_stage2(&s1, &split, &cfg).unwrap();
    let (m1, m2) = (s1.model().unwrap(), s2.model().unwrap());
    assert_eq!(m1.store.get(m1.bilinear()), m2.store.get(m2.bilinear()));
    // everything else is still trained
    let changed = m1
        .store
        .iter()
        .zip(m2.store.iter())
        .filter(|((_, a), (_, b))| a != b)
        .count();
    assert!(changed > 0);
    assert_eq!(s2.stage, Stage::Two);
    assert_eq!(s2.history.iter().filter(|h| h.stage == 1).count(), 2);
    assert!(s2.history.iter().filter(|h| h.stage == 2).all(|h| h.loss_alpha == 0.0));
}

#[test]
fn zero_epochs_returns_the_initial_model() {
    let (split, graph, sizes) = fixture(20, 4);
    let cfg = small_config(0, 0);
    let s1 = train_stage1(&graph, &split, sizes, &cfg).unwrap();
    assert_eq!(s1.epoch, 0);
    assert!(s1.history.is_empty());
    let fresh = Model::new(cfg.model_config(), sizes, cfg.seed).unwrap();
    assert_eq!(s1.model().unwrap().store, fresh.store);
    let s2 = train_stage2(&s1, &split, &cfg).unwrap();
    assert_eq!(s2.model().unwrap().store, fresh.store);
}

#[test]
fn training_is_deterministic_per_seed() {
    let (split, graph, sizes) = fixture(24, 5);
    let cfg = small_config(3, 2);
    let a = train_stage2(&train_stage1(&graph, &split, sizes, &cfg).unwrap(), &split, &cfg).unwrap();
    let b = train_stage2(&train_stage1(&graph, &split, sizes, &cfg).unwrap(), &split, &cfg).unwrap();
    assert_eq!(a, b);
    let other = TrainConfig { seed: 10, ..cfg };
    let c = train_stage1(&graph, &split, sizes, &other).unwrap();
    assert_ne!(a.history[0], c.history[0]);
}

#[test]
fn logged_losses_are_finite_and_non_negative() {
    let (split, graph, sizes) = fixture(24, 6);
    let cfg = small_config(3, 2);
    let s2 = train_stage2(&train_stage1(&graph, &split, sizes, &cfg).unwrap(), &split, &cfg).unwrap();
    for h in &s2.history {
        assert!(h.loss_b.is_finite() && h.loss_b >= 0.0);
        assert!(h.loss_alpha.is_finite() && h.loss_alpha >= 0.0);
    }
}

#[test]
fn checkpoint_reload_is_bit_exact() {
    let (split, graph, sizes) = fixture(20, 7);
    let cfg = small_config(2, 1);
    let s1 = train_stage1(&graph, &split, sizes, &cfg).unwrap();
    let s2 = train_stage2(&s1, &split, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    s2.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, s2);
    let (a, b) = (s2.model().unwrap(), back.model().unwrap());
    for variant in [Variant::Full, Variant::MSet] {
        let opts = ForwardOptions { stage: Stage::Two, variant, tau: 0.5, first_target: 0 };
        for r in &split.test {
            let la = logits_of(&a, &graph, r, &opts);
            let lb = logits_of(&b, &back.graph().unwrap(), r, &opts);
            let bits = |v: &Vec<Vec<f64>>| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&la), bits(&lb));
        }
    }
}

#[test]
fn set_variant_never_traverses() {
    let (split, graph, sizes) = fixture(20, 8);
    let run = run_variant(Variant::MSet, &graph, &split, sizes, &small_config(1, 1)).unwrap();
    assert_eq!(run.traversals, 0);
    let model = run.stage2.model().unwrap();
    for stage in [Stage::One, Stage::Two] {
        let opts = ForwardOptions { stage, variant: Variant::MSet, tau: 0.5, first_target: 0 };
        for r in split.train.iter().chain(&split.test) {
            assert!(model.forward_patient(r, &graph, &opts).unwrap().traversals.is_empty());
        }
    }
    let full = run_variant(Variant::Full, &graph, &split, sizes, &small_config(1, 1)).unwrap();
    assert!(full.traversals > 0);
}

#[test]
fn full_variant_equals_the_two_stage_pipeline() {
    let (split, graph, sizes) = fixture(20, 9);
    let cfg = small_config(2, 1);
    let run = run_variant(Variant::Full, &graph, &split, sizes, &cfg).unwrap();
    let s2 = train_stage2(&train_stage1(&graph, &split, sizes, &cfg).unwrap(), &split, &cfg).unwrap();
    assert_eq!(run.stage2, s2);
}

#[test]
fn cohort_file_round_trip() {
    let spec = small_spec(50, 10);
    let raw = medrec_core::generate_synthetic_cohort(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cohort.jsonl");
    save_cohort(&path, &raw).unwrap();
    assert_eq!(load_cohort(&path).unwrap(), raw);
}

/// Straightforward restatement of the filter rules.
fn filter_oracle(records: &[RawPatient], min_visits: usize, allowed: Option<&HashSet<String>>) -> Vec<RawPatient> {
    let mut out = Vec::new();
    for r in records {
        let mut visits = Vec::new();
        for v in &r.visits {
            let mut days = Vec::new();
            for d in &v.daily_meds {
                let kept: Vec<String> = d
                    .iter()
                    .filter(|c| allowed.is_none_or(|a| a.contains(*c)))
                    .cloned()
                    .collect();
                if !kept.is_empty() {
                    days.push(kept);
                }
            }
            if !days.is_empty() {
                visits.push(RawVisit { diagnoses: v.diagnoses.clone(), procedures: v.procedures.clone(), daily_meds: days });
            }
        }
        if visits.len() >= min_visits {
            out.push(RawPatient { patient_id: r.patient_id.clone(), visits });
        }
    }
    out
}

#[test]
fn filter_matches_reference() {
    let mut rng = rng(11);
    for seed in 0..30 {
        let spec = SyntheticSpec { visits_range: (1, 4), ..small_spec(40, seed) };
        let raw = medrec_core::generate_synthetic_cohort(&spec).unwrap();
        let min_visits = rng.gen_range(1..=3);
        let allowed: HashSet<String> = (0..spec.n_med)
            .filter(|_| rng.gen_bool(0.6))
            .map(|i| format!("M{i:02}"))
            .collect();
        let whitelist = (seed % 2 == 0).then_some(&allowed);
        assert_eq!(
            filter_cohort(&raw, min_visits, whitelist).unwrap(),
            filter_oracle(&raw, min_visits, whitelist)
        );
    }
}

#[test]
fn wide_medication_vocabulary() {
    let n = 151;
    let raw: Vec<RawPatient> = (0..8)
        .map(|p| RawPatient {
            patient_id: format!("p{p}"),
            visits: (0..3)
                .map(|v| RawVisit {
                    diagnoses: vec![format!("d{}", (p + v) % 5)],
                    procedures: vec![format!("x{}", v % 2)],
                    daily_meds: (0..2)
                        .map(|d| (0..10).map(|k| format!("m{:03}", ((p * 3 + v) * 20 + d * 10 + k) % n)).collect())
                        .collect(),
                })
                .collect(),
        })
        .collect();
    let all: HashSet<String> = raw.iter().flat_map(|r| &r.visits).flat_map(|v| v.daily_meds.concat()).collect();
    let vocabs = build_vocabs(&raw).unwrap();
    assert_eq!(all.len(), n);
    assert_eq!(vocabs.sizes().n_med, n);
    let records = index_cohort(&raw, &vocabs).unwrap();
    let graph = medrec_core::build_cooccurrence_graph(&records, vocabs.sizes().n_med).unwrap();
    let model = Model::new(ModelConfig { dim: 8, n_heads: 2, ..Default::default() }, vocabs.sizes(), 1).unwrap();
    let opts = ForwardOptions { stage: Stage::Two, variant: Variant::Full, tau: 0.5, first_target: 1 };
    for r in &records {
        for l in logits_of(&model, &graph, r, &opts) {
            assert_eq!(l.len(), vocabs.sizes().n_med);
        }
    }
}
