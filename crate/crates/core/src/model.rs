//! The full recommendation model and its per-patient forward pass.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::abstraction::{candidate_read, mean_pool, select_candidates, MedParams, ModelShape};
use crate::cohort::{PatientRecord, VocabSizes};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::graph::EhrGraph;
use crate::params::{ParamId, ParamStore};
use crate::reasoning::Traversal;
use crate::tape::{Tape, Var};

/// Model wiring variants used for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Full model.
    #[serde(rename = "full")]
    Full,
    /// Per-visit averaged event embeddings, no recurrence across visits.
    #[serde(rename = "V_set")]
    VSet,
    /// Historical prescriptions and selected candidates mean-pooled; no traversal anywhere.
    #[serde(rename = "M_set")]
    MSet,
    /// Historical prescriptions mean-pooled; candidates still abstracted.
    #[serde(rename = "P_set")]
    PSet,
    /// Historical prescriptions abstracted; candidates read by attention only.
    #[serde(rename = "C_att")]
    CAtt,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::VSet, Variant::MSet, Variant::PSet, Variant::CAtt];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::VSet => "V_set",
            Variant::MSet => "M_set",
            Variant::PSet => "P_set",
            Variant::CAtt => "C_att",
        }
    }

    fn abstracts_history(self) -> bool {
        !matches!(self, Variant::MSet | Variant::PSet)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(Error::InvalidArgument(format!("stage must be 1 or 2, got {n}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub n_heads: usize,
    pub global_layers: usize,
    pub local_layers: usize,
    pub negative_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            n_heads: 4,
            global_layers: 1,
            local_layers: 1,
            negative_slope: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_heads == 0 || self.dim % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "dim ({}) must be a positive multiple of n_heads ({})",
                self.dim, self.n_heads
            )));
        }
        if self.local_layers == 0 {
            return Err(Error::InvalidArgument("at least one local GAT layer is required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub stage: Stage,
    pub variant: Variant,
    pub tau: f64,
    /// First visit (0-based) to predict; earlier visits only feed history.
    pub first_target: usize,
}

#[derive(Debug, Clone)]
pub struct VisitForward {
    pub visit_idx: usize,
    pub logits: Var,
    pub candidate_logits: Var,
    /// Historical reference read from memory.
    pub reference: Var,
    pub memory_len: usize,
    /// Stage-II selected candidates.
    pub selected: Option<Vec<usize>>,
}

/// Everything recorded while forwarding one patient.
pub struct PatientForward {
    pub tape: Tape,
    pub visits: Vec<VisitForward>,
    pub traversals: Vec<Traversal>,
    pub global_embeddings: Var,
    pub queries: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub sizes: VocabSizes,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub med: MedParams,
}

impl Model {
    pub fn new(config: ModelConfig, sizes: VocabSizes, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let encoder = EncoderParams::new(&mut store, sizes.n_diag, sizes.n_proc, config.dim, &mut rng);
        let shape = ModelShape {
            n_med: sizes.n_med,
            dim: config.dim,
            n_heads: config.n_heads,
            global_layers: config.global_layers,
            local_layers: config.local_layers,
            negative_slope: config.negative_slope,
        };
        let med = MedParams::new(&mut store, &shape, &mut rng);
        Ok(Self {
            config,
            sizes,
            store,
            encoder,
            med,
        })
    }

    /// The bilinear attention matrix shared by start selection and candidate scoring.
    pub fn bilinear(&self) -> ParamId {
        self.med.bilinear
    }

    pub fn forward_patient(
        &self,
        record: &PatientRecord,
        graph: &EhrGraph,
        opts: &ForwardOptions,
    ) -> Result<PatientForward> {
        if graph.n() != self.sizes.n_med {
            return Err(Error::VocabMismatch(format!(
                "graph has {} nodes, model expects {} medications",
                graph.n(),
                self.sizes.n_med
            )));
        }
        record.check_sizes(self.sizes)?;
        let store = &self.store;
        let med = &self.med;
        let dim = self.config.dim;
        let mut tape = Tape::new();

        let e_m = med.update_global_embeddings(&mut tape, store, graph);
        let recurrent = opts.variant != Variant::VSet;
        let enc = self.encoder.encode_patient(&mut tape, store, &record.visits, recurrent)?;
        let n_visits = record.visits.len();
        let voting = med.voting_heads(store);
        let mut traversals = Vec::new();

        // history values for every visit that can precede a target
        let history_len = n_visits.saturating_sub(1);
        let mut values: Vec<Option<Var>> = Vec::with_capacity(history_len);
        if opts.first_target < n_visits {
            for (t, visit) in record.visits[..history_len].iter().enumerate() {
                if !visit.has_medications() {
                    values.push(None);
                    continue;
                }
                let v = if opts.variant.abstracts_history() {
                    let abs = med.abstract_prescription(&mut tape, store, graph, e_m, enc.q[t], visit, &voting)?;
                    traversals.extend(abs.traversals);
                    abs.prescription_node
                } else {
                    mean_pool(&mut tape, e_m, &visit.medications())?
                };
                values.push(Some(v));
            }
        }

        let mut visits = Vec::new();
        for t in opts.first_target..n_visits {
            let (keys, vals): (Vec<Var>, Vec<Var>) = (0..t)
                .filter_map(|s| values[s].map(|v| (enc.q[s], v)))
                .unzip();
            let reference = crate::abstraction::memory_read(&mut tape, enc.q[t], &keys, &vals, dim);
            let (z, alpha) = med.candidate_scores(&mut tape, store, enc.q[t], e_m);

            let (cand_ref, selected) = match (opts.stage, opts.variant) {
                (Stage::One, _) | (Stage::Two, Variant::CAtt) => (candidate_read(&mut tape, alpha, e_m), None),
                (Stage::Two, Variant::MSet) => {
                    let sel = select_candidates(&tape.row(z), opts.tau);
                    (mean_pool(&mut tape, e_m, &sel)?, Some(sel))
                }
                (Stage::Two, _) => {
                    let logits = tape.row(z);
                    let sel = select_candidates(&logits, opts.tau);
                    let (h, trav) =
                        med.abstract_candidates(&mut tape, store, graph, e_m, enc.q[t], &sel, &logits, &voting)?;
                    traversals.push(trav);
                    (h, Some(sel))
                }
            };
            let logits = med.predict(&mut tape, store, enc.q[t], reference, cand_ref);
            visits.push(VisitForward {
                visit_idx: t,
                logits,
                candidate_logits: z,
                reference,
                memory_len: keys.len(),
                selected,
            });
        }

        Ok(PatientForward {
            tape,
            visits,
            traversals,
            global_embeddings: e_m,
            queries: enc.q,
        })
    }
}
