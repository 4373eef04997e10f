//! Visit-level evaluation, aggregation and robustness binning.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abstraction::Prediction;
use crate::cohort::{PatientRecord, VocabSizes};
use crate::error::{Error, Result};
use crate::graph::EhrGraph;
use crate::metrics::{f1, jaccard, prauc};
use crate::model::{ForwardOptions, Model, Stage, Variant};

/// Bin edges on the average historical medication count per prescription.
pub const DEFAULT_BIN_EDGES: [f64; 5] = [0.0, 5.0, 10.0, 20.0, 40.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitEval {
    pub patient_id: String,
    pub visit_idx: usize,
    pub jaccard: f64,
    pub f1: f64,
    /// `None` when the visit has no true medications.
    pub prauc: Option<f64>,
    pub n_meds_truth: usize,
    /// Mean medication count over the patient's earlier prescriptions.
    pub avg_hist_meds: f64,
}

/// One line of a prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub patient_id: String,
    pub visit_idx: usize,
    pub probs: Vec<f64>,
    pub predicted: Vec<usize>,
    pub truth: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub lo: f64,
    /// `None` for the open last bin.
    pub hi: Option<f64>,
    pub count: usize,
    pub jaccard: Option<f64>,
    pub f1: Option<f64>,
    pub prauc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub stage: u8,
    pub variant: Variant,
    pub n_visits: usize,
    pub n_prauc_visits: usize,
    pub jaccard: f64,
    pub f1: f64,
    pub prauc: f64,
    pub bins: Vec<BinStats>,
    #[serde(default)]
    pub config: serde_json::Value,
}

pub struct Evaluation {
    pub report: Report,
    pub visits: Vec<VisitEval>,
    pub predictions: Vec<PredictionRecord>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, s) = xs.fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    (n > 0).then(|| s / n as f64)
}

/// Index of the half-open bin `[edges[i], edges[i+1])` holding `x`; the
/// last bin is unbounded.
pub fn bin_index(edges: &[f64], x: f64) -> usize {
    edges.iter().rposition(|&lo| x >= lo).unwrap_or(0)
}

pub fn bin_visits(visits: &[VisitEval], edges: &[f64]) -> Vec<BinStats> {
    (0..edges.len())
        .map(|b| {
            let members: Vec<&VisitEval> = visits
                .iter()
                .filter(|v| bin_index(edges, v.avg_hist_meds) == b)
                .collect();
            BinStats {
                lo: edges[b],
                hi: edges.get(b + 1).copied(),
                count: members.len(),
                jaccard: mean(members.iter().map(|v| v.jaccard)),
                f1: mean(members.iter().map(|v| v.f1)),
                prauc: mean(members.iter().filter_map(|v| v.prauc)),
            }
        })
        .collect()
}

pub fn check_vocab(records: &[PatientRecord], sizes: VocabSizes) -> Result<()> {
    for r in records {
        r.check_sizes(sizes).map_err(|e| {
            Error::VocabMismatch(format!("patient {}: {e}", r.patient_id))
        })?;
    }
    Ok(())
}

/// Evaluates every visit after the first of each patient.
pub fn evaluate_detailed(
    model: &Model,
    graph: &EhrGraph,
    records: &[PatientRecord],
    stage: Stage,
    variant: Variant,
    tau: f64,
    bin_edges: &[f64],
) -> Result<Evaluation> {
    check_vocab(records, model.sizes)?;
    let opts = ForwardOptions {
        stage,
        variant,
        tau,
        first_target: 1,
    };
    let per_patient: Vec<Result<Vec<(VisitEval, PredictionRecord)>>> = records
        .par_iter()
        .map(|r| {
            let fwd = model.forward_patient(r, graph, &opts)?;
            Ok(fwd
                .visits
                .iter()
                .map(|v| {
                    let pred = Prediction::from_logits(&fwd.tape.row(v.logits));
                    let truth = r.visits[v.visit_idx].medications();
                    let mut labels = vec![false; model.sizes.n_med];
                    for &m in &truth {
                        labels[m] = true;
                    }
                    let hist: Vec<usize> = r.visits[..v.visit_idx]
                        .iter()
                        .filter(|h| h.has_medications())
                        .map(|h| h.medications().len())
                        .collect();
                    let eval = VisitEval {
                        patient_id: r.patient_id.clone(),
                        visit_idx: v.visit_idx,
                        jaccard: jaccard(&pred.predicted_set, &truth),
                        f1: f1(&pred.predicted_set, &truth),
                        prauc: prauc(&pred.probs, &labels),
                        n_meds_truth: truth.len(),
                        avg_hist_meds: mean(hist.iter().map(|&n| n as f64)).unwrap_or(0.0),
                    };
                    let rec = PredictionRecord {
                        patient_id: r.patient_id.clone(),
                        visit_idx: v.visit_idx,
                        probs: pred.probs,
                        predicted: pred.predicted_set,
                        truth,
                    };
                    (eval, rec)
                })
                .collect())
        })
        .collect();

    let mut visits = Vec::new();
    let mut predictions = Vec::new();
    for p in per_patient {
        for (e, r) in p? {
            visits.push(e);
            predictions.push(r);
        }
    }
    let report = Report {
        stage: stage.number(),
        variant,
        n_visits: visits.len(),
        n_prauc_visits: visits.iter().filter(|v| v.prauc.is_some()).count(),
        jaccard: mean(visits.iter().map(|v| v.jaccard)).unwrap_or(0.0),
        f1: mean(visits.iter().map(|v| v.f1)).unwrap_or(0.0),
        prauc: mean(visits.iter().filter_map(|v| v.prauc)).unwrap_or(0.0),
        bins: bin_visits(&visits, bin_edges),
        config: serde_json::Value::Null,
    };
    Ok(Evaluation {
        report,
        visits,
        predictions,
    })
}

pub fn evaluate(
    model: &Model,
    graph: &EhrGraph,
    records: &[PatientRecord],
    stage: Stage,
    variant: Variant,
    tau: f64,
) -> Result<Report> {
    Ok(evaluate_detailed(model, graph, records, stage, variant, tau, &DEFAULT_BIN_EDGES)?.report)
}

/// Published MIMIC woMR results, for side-by-side reporting on real data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceValues {
    pub dataset: &'static str,
    pub jaccard: f64,
    pub prauc: f64,
    pub f1: f64,
}

pub const REFERENCE_VALUES: [ReferenceValues; 2] = [
    ReferenceValues {
        dataset: "mimic-iii-womr",
        jaccard: 0.527,
        prauc: 0.780,
        f1: 0.682,
    },
    ReferenceValues {
        dataset: "mimic-iv-womr",
        jaccard: 0.502,
        prauc: 0.762,
        f1: 0.657,
    },
];

pub fn reference_values(dataset: &str) -> Option<ReferenceValues> {
    REFERENCE_VALUES.iter().copied().find(|r| r.dataset == dataset)
}
