//! Losses, two-stage training, checkpoints and ablation runs.

use std::collections::HashSet;
use std::path::Path;
use std::rc::Rc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{encode_multi_hot, CohortSplit, PatientRecord, VocabSizes, DEFAULT_SPLIT};
use crate::error::{Error, Result};
use crate::eval::{check_vocab, evaluate, Report};
use crate::graph::{build_cooccurrence_graph, EhrGraph, GraphFile};
use crate::model::{ForwardOptions, Model, ModelConfig, Stage, Variant};
use crate::params::Adam;

/// Which patients contribute edges to the co-occurrence graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphScope {
    Train,
    All,
}

impl std::str::FromStr for GraphScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(GraphScope::Train),
            "all" => Ok(GraphScope::All),
            _ => Err(Error::InvalidArgument(format!("graph scope must be `train` or `all`, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the candidate-selection loss in Stage I.
    pub alpha: f64,
    /// Candidate selection threshold on `sigmoid(z)` in Stage II.
    pub tau: f64,
    pub lr: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub seed: u64,
    pub variant: Variant,
    pub dim: usize,
    pub n_heads: usize,
    pub global_layers: usize,
    pub local_layers: usize,
    pub negative_slope: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub graph_scope: GraphScope,
    pub split: (f64, f64, f64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            alpha: 0.1,
            tau: 0.5,
            lr: 1e-3,
            epochs_stage1: 50,
            epochs_stage2: 25,
            seed: 42,
            variant: Variant::Full,
            dim: m.dim,
            n_heads: m.n_heads,
            global_layers: m.global_layers,
            local_layers: m.local_layers,
            negative_slope: m.negative_slope,
            grad_clip: Some(5.0),
            graph_scope: GraphScope::Train,
            split: DEFAULT_SPLIT,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            n_heads: self.n_heads,
            global_layers: self.global_layers,
            local_layers: self.local_layers,
            negative_slope: self.negative_slope,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidArgument(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument(format!("grad_clip must be > 0, got {c}")));
            }
        }
        self.model_config().validate()
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("prediction has {a} entries, truth has {b}")));
    }
    Ok(())
}

/// Binary cross-entropy summed over medications.
pub fn loss_bce(probs: &[f64], truth: &[f64]) -> Result<f64> {
    check_len(probs.len(), truth.len())?;
    Ok(-probs
        .iter()
        .zip(truth)
        .map(|(&p, &y)| y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        .sum::<f64>())
}

/// Binary cross-entropy of `sigmoid(z)` against `truth`, computed from the
/// logits without forming the probabilities.
pub fn loss_attention(logits: &[f64], truth: &[f64]) -> Result<f64> {
    check_len(logits.len(), truth.len())?;
    Ok(logits
        .iter()
        .zip(truth)
        .map(|(&z, &y)| z.max(0.0) + (-z.abs()).exp().ln_1p() - z * y)
        .sum())
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: u8,
    /// Mean prediction loss per training visit.
    pub loss_b: f64,
    /// Mean selection loss per training visit (Stage I only).
    pub loss_alpha: f64,
    pub val_jaccard: f64,
    pub val_f1: f64,
    pub val_prauc: f64,
}

pub const LOG_HEADER: &str = "epoch,stage,loss_b,loss_alpha,val_jaccard,val_f1,val_prauc";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.stage, self.loss_b, self.loss_alpha, self.val_jaccard, self.val_f1, self.val_prauc
        )
    }
}

pub fn history_csv(history: &[EpochLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for h in history {
        out.push_str(&h.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Every parameter tensor by name, plus what is needed to rebuild the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Epoch the parameters were taken from; 0 means untrained.
    pub epoch: usize,
    pub config: TrainConfig,
    pub sizes: VocabSizes,
    pub graph: GraphFile,
    pub params: Vec<NamedTensor>,
    pub history: Vec<EpochLog>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, graph: &EhrGraph, config: &TrainConfig, stage: Stage, epoch: usize) -> Self {
        let params = model
            .store
            .iter()
            .map(|(name, v)| NamedTensor {
                name: name.to_string(),
                shape: [v.nrows(), v.ncols()],
                data: v.iter().copied().collect(),
            })
            .collect();
        Self {
            stage,
            epoch,
            config: config.clone(),
            sizes: model.sizes,
            graph: graph.to_file(),
            params,
            history: Vec::new(),
        }
    }

    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.model_config(), self.sizes, self.config.seed)?;
        let named = self
            .params
            .iter()
            .map(|t| {
                Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
                    .map(|a| (t.name.clone(), a))
                    .map_err(|e| Error::Checkpoint(format!("tensor `{}`: {e}", t.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        model.store.load_named(named)?;
        Ok(model)
    }

    pub fn graph(&self) -> Result<EhrGraph> {
        EhrGraph::from_file(&self.graph)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        Ok(ckpt)
    }
}

/// Builds the co-occurrence graph from the training split or from every split.
pub fn scoped_graph(splits: &CohortSplit<PatientRecord>, scope: GraphScope, n_med: usize) -> Result<EhrGraph> {
    match scope {
        GraphScope::Train => build_cooccurrence_graph(&splits.train, n_med),
        GraphScope::All => {
            let all: Vec<PatientRecord> = splits
                .train
                .iter()
                .chain(&splits.val)
                .chain(&splits.test)
                .cloned()
                .collect();
            build_cooccurrence_graph(&all, n_med)
        }
    }
}

struct PatientLoss {
    loss_b: f64,
    loss_alpha: f64,
    visits: usize,
}

/// Forward, backward and one Adam update for a single patient.
fn patient_step(
    model: &mut Model,
    adam: &mut Adam,
    graph: &EhrGraph,
    record: &PatientRecord,
    stage: Stage,
    config: &TrainConfig,
    frozen: &HashSet<crate::params::ParamId>,
) -> Result<PatientLoss> {
    let opts = ForwardOptions {
        stage,
        variant: config.variant,
        tau: config.tau,
        first_target: 0,
    };
    let mut fwd = model.forward_patient(record, graph, &opts)?;
    let tape = &mut fwd.tape;
    let mut lb_parts = Vec::new();
    let mut la_parts = Vec::new();
    for v in &fwd.visits {
        let truth = encode_multi_hot(&record.visits[v.visit_idx].medications(), model.sizes.n_med)?;
        let target = Rc::new(Array2::from_shape_vec((1, truth.len()), truth).expect("row shape"));
        lb_parts.push(tape.bce_logits(v.logits, Rc::clone(&target)));
        if stage == Stage::One {
            la_parts.push(tape.bce_logits(v.candidate_logits, target));
        }
    }
    let mut loss = tape.sum_scalars(&lb_parts);
    let loss_b = tape.scalar(loss);
    let mut loss_alpha = 0.0;
    if !la_parts.is_empty() {
        let la = tape.sum_scalars(&la_parts);
        loss_alpha = tape.scalar(la);
        let la = tape.scale(la, config.alpha);
        loss = tape.add(loss, la);
    }
    let total = tape.scalar(loss);
    if !total.is_finite() {
        return Err(Error::Diverged {
            stage: stage.number(),
            epoch: 0,
            detail: format!("non-finite loss {total} for patient {}", record.patient_id),
        });
    }
    let grads = tape.backward(loss);
    adam.step(&mut model.store, grads.params(), frozen);
    Ok(PatientLoss {
        loss_b,
        loss_alpha,
        visits: fwd.visits.len(),
    })
}

fn run_stage(
    mut model: Model,
    graph: &EhrGraph,
    splits: &CohortSplit<PatientRecord>,
    config: &TrainConfig,
    stage: Stage,
    mut history: Vec<EpochLog>,
) -> Result<Checkpoint> {
    config.validate()?;
    if splits.train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    check_vocab(&splits.train, model.sizes)?;
    check_vocab(&splits.val, model.sizes)?;
    let epochs = match stage {
        Stage::One => config.epochs_stage1,
        Stage::Two => config.epochs_stage2,
    };
    let frozen: HashSet<_> = match stage {
        Stage::One => HashSet::new(),
        Stage::Two => [model.bilinear()].into_iter().collect(),
    };
    let mut adam = Adam::new(&model.store, config.lr);
    adam.clip_norm = config.grad_clip;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(stage.number() as u64));
    let mut order: Vec<usize> = (0..splits.train.len()).collect();

    let mut best = Checkpoint::from_model(&model, graph, config, stage, 0);
    let mut best_val = f64::NEG_INFINITY;
    let mut stage_log = Vec::new();

    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let (mut lb, mut la, mut n) = (0.0, 0.0, 0usize);
        for &i in &order {
            let step = patient_step(&mut model, &mut adam, graph, &splits.train[i], stage, config, &frozen)
                .map_err(|e| match e {
                    Error::Diverged { stage, detail, .. } => Error::Diverged { stage, epoch, detail },
                    other => other,
                })?;
            lb += step.loss_b;
            la += step.loss_alpha;
            n += step.visits;
        }
        if !model.store.all_finite() {
            return Err(Error::Diverged {
                stage: stage.number(),
                epoch,
                detail: "non-finite parameter after update".into(),
            });
        }
        let denom = n.max(1) as f64;
        let val = if splits.val.is_empty() {
            None
        } else {
            Some(evaluate(&model, graph, &splits.val, stage, config.variant, config.tau)?)
        };
        let entry = EpochLog {
            epoch,
            stage: stage.number(),
            loss_b: lb / denom,
            loss_alpha: la / denom,
            val_jaccard: val.as_ref().map_or(0.0, |r| r.jaccard),
            val_f1: val.as_ref().map_or(0.0, |r| r.f1),
            val_prauc: val.as_ref().map_or(0.0, |r| r.prauc),
        };
        log::info!(
            "stage {} epoch {epoch}: loss_b {:.4} loss_alpha {:.4} val_jaccard {:.4}",
            stage.number(),
            entry.loss_b,
            entry.loss_alpha,
            entry.val_jaccard
        );
        // without a validation split the latest epoch is kept
        let score = if val.is_some() { entry.val_jaccard } else { epoch as f64 };
        stage_log.push(entry);
        if score > best_val {
            best_val = score;
            best = Checkpoint::from_model(&model, graph, config, stage, epoch);
        }
    }
    history.extend(stage_log);
    best.history = history;
    Ok(best)
}

/// Stage I: trains every parameter on `L_b + alpha * L_alpha` and returns the
/// best-validation checkpoint.
pub fn train_stage1(
    graph: &EhrGraph,
    splits: &CohortSplit<PatientRecord>,
    sizes: VocabSizes,
    config: &TrainConfig,
) -> Result<Checkpoint> {
    let model = Model::new(config.model_config(), sizes, config.seed)?;
    run_stage(model, graph, splits, config, Stage::One, Vec::new())
}

/// Stage II: warm-starts from a Stage-I checkpoint, freezes the bilinear
/// matrix and trains on `L_b` with thresholded candidate abstraction.
pub fn train_stage2(stage1: &Checkpoint, splits: &CohortSplit<PatientRecord>, config: &TrainConfig) -> Result<Checkpoint> {
    if stage1.stage != Stage::One {
        return Err(Error::Checkpoint("Stage II needs a Stage I checkpoint".into()));
    }
    if stage1.config.model_config() != config.model_config() {
        return Err(Error::Checkpoint("model settings differ from the Stage I checkpoint".into()));
    }
    let model = stage1.model()?;
    let graph = stage1.graph()?;
    run_stage(model, &graph, splits, config, Stage::Two, stage1.history.clone())
}

pub struct VariantRun {
    pub stage1: Checkpoint,
    pub stage2: Checkpoint,
    /// Test-split metrics of the Stage II model.
    pub report: Report,
    /// Number of traversals performed while evaluating the test split.
    pub traversals: usize,
}

/// Trains both stages for `variant` and evaluates the result on the test split.
pub fn run_variant(
    variant: Variant,
    graph: &EhrGraph,
    splits: &CohortSplit<PatientRecord>,
    sizes: VocabSizes,
    config: &TrainConfig,
) -> Result<VariantRun> {
    let config = TrainConfig {
        variant,
        ..config.clone()
    };
    let stage1 = train_stage1(graph, splits, sizes, &config)?;
    let stage2 = train_stage2(&stage1, splits, &config)?;
    let model = stage2.model()?;
    let report = evaluate(&model, graph, &splits.test, Stage::Two, variant, config.tau)?;
    let opts = ForwardOptions {
        stage: Stage::Two,
        variant,
        tau: config.tau,
        first_target: 1,
    };
    let mut traversals = 0;
    for r in &splits.test {
        traversals += model.forward_patient(r, graph, &opts)?.traversals.len();
    }
    Ok(VariantRun {
        stage1,
        stage2,
        report,
        traversals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_at_half_is_n_log2() {
        let n = 9;
        let l = loss_bce(&vec![0.5; n], &vec![1.0; n]).unwrap();
        assert!((l - n as f64 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_near_perfect_fit() {
        let eps = 1e-6;
        let truth = [1.0, 0.0, 1.0, 0.0];
        let probs: Vec<f64> = truth.iter().map(|&y| if y == 1.0 { 1.0 - eps } else { eps }).collect();
        let l = loss_bce(&probs, &truth).unwrap();
        assert!((l - 4.0 * -(1.0 - eps).ln()).abs() < 1e-12);
    }

    #[test]
    fn attention_loss_limits() {
        let l = loss_attention(&[0.0; 5], &[1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((l - 5.0 * 2f64.ln()).abs() < 1e-12);
        let l = loss_attention(&[50.0, -50.0], &[1.0, 0.0]).unwrap();
        assert!(l < 1e-20);
    }

    #[test]
    fn shape_mismatch_is_error() {
        assert!(matches!(loss_bce(&[0.5], &[1.0, 0.0]), Err(Error::Shape(_))));
        assert!(matches!(loss_attention(&[0.5, 0.1], &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { alpha: -0.1, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { lr: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_json_rejects_unknown_fields() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"alpha": 0.2, "bogus": 1}"#);
        assert!(err.is_err());
        let ok: TrainConfig = serde_json::from_str(r#"{"alpha": 0.2, "variant": "M_set"}"#).unwrap();
        assert_eq!(ok.alpha, 0.2);
        assert_eq!(ok.variant, Variant::MSet);
        assert_eq!(ok.lr, 1e-3);
    }

    #[test]
    fn history_csv_layout() {
        let h = vec![EpochLog {
            epoch: 1,
            stage: 1,
            loss_b: 0.5,
            loss_alpha: 0.25,
            val_jaccard: 0.1,
            val_f1: 0.2,
            val_prauc: 0.3,
        }];
        assert_eq!(history_csv(&h), format!("{LOG_HEADER}\n1,1,0.5,0.25,0.1,0.2,0.3\n"));
    }
}
