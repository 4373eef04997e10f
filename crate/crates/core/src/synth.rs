//! Synthetic cohorts with a planted diagnoses -> medications signal.
//!
//! Each latent condition owns a disjoint block of diagnosis codes, a few
//! procedure codes and a fixed medication combination. A visit activates a
//! non-empty subset of the patient's conditions and emits:
//!
//! * a non-empty random subset of each active condition's diagnoses,
//! * a random subset of each active condition's procedures,
//! * the union of the active conditions' medication combinations.
//!
//! Because the diagnosis blocks are disjoint, the active conditions (and so
//! the medications) are recoverable from the diagnoses alone. `noise_rate`
//! drops combination medications and inserts random codes in every modality;
//! at `noise_rate = 0` the medication set is a deterministic function of the
//! visit's diagnoses.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{EventKind, EventVocab, RawPatient, RawVisit, Vocabs};
use crate::error::{Error, Result};

/// Diagnoses kept per active condition are sampled at this rate (at least one is kept).
const DIAG_KEEP: f64 = 0.7;
const PROC_KEEP: f64 = 0.7;
/// Probability that a medication is repeated on a second day.
const DAY_OVERLAP: f64 = 0.2;
const MAX_DIAG_PER_CONDITION: usize = 4;
const MAX_PROC_PER_CONDITION: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_patients: usize,
    pub n_diag: usize,
    pub n_proc: usize,
    pub n_med: usize,
    pub n_conditions: usize,
    /// Inclusive range.
    pub meds_per_condition: (usize, usize),
    pub conditions_per_patient: (usize, usize),
    pub visits_range: (usize, usize),
    pub days_range: (usize, usize),
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_patients: 200,
            n_diag: 60,
            n_proc: 20,
            n_med: 40,
            n_conditions: 6,
            meds_per_condition: (3, 6),
            conditions_per_patient: (1, 3),
            visits_range: (2, 4),
            days_range: (1, 3),
            noise_rate: 0.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_patients == 0
            || self.n_diag == 0
            || self.n_proc == 0
            || self.n_med == 0
            || self.n_conditions == 0
        {
            return bad("all counts must be positive".into());
        }
        for (name, (lo, hi)) in [
            ("meds_per_condition", self.meds_per_condition),
            ("conditions_per_patient", self.conditions_per_patient),
            ("visits_range", self.visits_range),
            ("days_range", self.days_range),
        ] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} must satisfy 1 <= lo <= hi, got ({lo}, {hi})"));
            }
        }
        if self.meds_per_condition.1 > self.n_med {
            return bad("meds_per_condition exceeds n_med".into());
        }
        if self.conditions_per_patient.1 > self.n_conditions {
            return bad("conditions_per_patient exceeds n_conditions".into());
        }
        if self.n_diag < self.n_conditions {
            return bad("n_diag must be at least n_conditions".into());
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return bad(format!("noise_rate {} outside [0, 1]", self.noise_rate));
        }
        Ok(())
    }
}

struct Condition {
    diagnoses: Vec<usize>,
    procedures: Vec<usize>,
    medications: Vec<usize>,
}

fn code(prefix: char, i: usize, n: usize) -> String {
    let width = (n.max(2) - 1).to_string().len();
    format!("{prefix}{i:0width$}")
}

fn sorted(v: impl IntoIterator<Item = usize>) -> Vec<usize> {
    v.into_iter().collect::<BTreeSet<_>>().into_iter().collect()
}

fn subset_nonempty(rng: &mut ChaCha8Rng, items: &[usize], keep: f64) -> Vec<usize> {
    let mut out: Vec<usize> = items.iter().copied().filter(|_| rng.gen_bool(keep)).collect();
    if out.is_empty() {
        out.push(items[rng.gen_range(0..items.len())]);
    }
    out
}

fn insert_noise(rng: &mut ChaCha8Rng, set: &mut Vec<usize>, base: usize, vocab: usize, rate: f64) {
    if rate <= 0.0 {
        return;
    }
    for _ in 0..base.max(1) {
        if rng.gen_bool(rate) {
            set.push(rng.gen_range(0..vocab));
        }
    }
}

/// Generates a synthetic cohort; bit-stable for a fixed spec.
pub fn generate_synthetic_cohort(spec: &SyntheticSpec) -> Result<Vec<RawPatient>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let diag_per = (spec.n_diag / spec.n_conditions).clamp(1, MAX_DIAG_PER_CONDITION);
    let mut diag_perm: Vec<usize> = (0..spec.n_diag).collect();
    diag_perm.shuffle(&mut rng);
    let conditions: Vec<Condition> = (0..spec.n_conditions)
        .map(|c| {
            let n_meds = rng.gen_range(spec.meds_per_condition.0..=spec.meds_per_condition.1);
            let n_proc = MAX_PROC_PER_CONDITION.min(spec.n_proc);
            Condition {
                diagnoses: sorted(diag_perm[c * diag_per..(c + 1) * diag_per].iter().copied()),
                procedures: sorted(sample(&mut rng, spec.n_proc, n_proc)),
                medications: sorted(sample(&mut rng, spec.n_med, n_meds)),
            }
        })
        .collect();

    let noise = spec.noise_rate;
    let mut patients = Vec::with_capacity(spec.n_patients);
    for p in 0..spec.n_patients {
        let k = rng.gen_range(spec.conditions_per_patient.0..=spec.conditions_per_patient.1);
        let own = sorted(sample(&mut rng, spec.n_conditions, k));
        let n_visits = rng.gen_range(spec.visits_range.0..=spec.visits_range.1);
        let mut visits = Vec::with_capacity(n_visits);
        for _ in 0..n_visits {
            let active = subset_nonempty(&mut rng, &own, 0.5);
            let mut diag = Vec::new();
            let mut proc = Vec::new();
            let mut meds = Vec::new();
            for &c in &active {
                let cond = &conditions[c];
                diag.extend(subset_nonempty(&mut rng, &cond.diagnoses, DIAG_KEEP));
                proc.extend(cond.procedures.iter().copied().filter(|_| rng.gen_bool(PROC_KEEP)));
                meds.extend(cond.medications.iter().copied());
            }
            let combo = sorted(meds.iter().copied());
            if noise > 0.0 {
                meds = combo.iter().copied().filter(|_| !rng.gen_bool(noise)).collect();
                if meds.is_empty() {
                    meds.push(combo[rng.gen_range(0..combo.len())]);
                }
                insert_noise(&mut rng, &mut meds, combo.len(), spec.n_med, noise);
                insert_noise(&mut rng, &mut diag, diag_per, spec.n_diag, noise);
                insert_noise(&mut rng, &mut proc, 1, spec.n_proc, noise);
            }
            let meds = sorted(meds);
            let diag = sorted(diag);
            let proc = sorted(proc);

            let n_days = rng
                .gen_range(spec.days_range.0..=spec.days_range.1)
                .min(meds.len());
            let mut order = meds.clone();
            order.shuffle(&mut rng);
            let mut days: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_days];
            for (i, &m) in order.iter().enumerate() {
                days[i % n_days].insert(m);
                if n_days > 1 && rng.gen_bool(DAY_OVERLAP) {
                    days[rng.gen_range(0..n_days)].insert(m);
                }
            }

            visits.push(RawVisit {
                diagnoses: diag.iter().map(|&i| code('D', i, spec.n_diag)).collect(),
                procedures: proc.iter().map(|&i| code('P', i, spec.n_proc)).collect(),
                daily_meds: days
                    .iter()
                    .map(|d| d.iter().map(|&i| code('M', i, spec.n_med)).collect())
                    .collect(),
            });
        }
        patients.push(RawPatient {
            patient_id: code('p', p, spec.n_patients),
            visits,
        });
    }
    Ok(patients)
}

/// Vocabularies over the full synthetic code space, including codes the
/// generated cohort never uses.
pub fn synthetic_vocabs(spec: &SyntheticSpec) -> Result<Vocabs> {
    spec.validate()?;
    let all = |prefix, n| (0..n).map(move |i| code(prefix, i, n));
    Ok(Vocabs {
        diagnosis: EventVocab::from_codes(EventKind::Diagnosis, all('D', spec.n_diag))?,
        procedure: EventVocab::from_codes(EventKind::Procedure, all('P', spec.n_proc))?,
        medication: EventVocab::from_codes(EventKind::Medication, all('M', spec.n_med))?,
    })
}
