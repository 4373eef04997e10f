//! Longitudinal EHR data model: raw (code-level) records as they appear on
//! disk, vocabularies, and the index-level records the model consumes.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One hospital visit as stored in a cohort file. Codes are opaque strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawVisit {
    pub diagnoses: Vec<String>,
    pub procedures: Vec<String>,
    pub daily_meds: Vec<Vec<String>>,
}

/// One line of a cohort JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawPatient {
    pub patient_id: String,
    pub visits: Vec<RawVisit>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Diagnosis,
    Procedure,
    Medication,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Diagnosis => "diagnosis",
            EventKind::Procedure => "procedure",
            EventKind::Medication => "medication",
        }
    }
}

/// Bijective map between event codes and dense indices `0..size`.
///
/// Indices follow lexicographic code order, so any downstream tie-break on
/// "lowest index" is reproducible across runs and machines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventVocab {
    kind: EventKind,
    codes: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    kind: EventKind,
    codes: Vec<String>,
}

impl EventVocab {
    /// Builds a vocabulary from any collection of codes; duplicates collapse.
    pub fn from_codes<I, S>(kind: EventKind, codes: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let sorted: BTreeSet<String> = codes.into_iter().map(Into::into).collect();
        if sorted.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} vocabulary would be empty",
                kind.as_str()
            )));
        }
        let codes: Vec<String> = sorted.into_iter().collect();
        let index = codes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
        Ok(Self { kind, codes, index })
    }

    pub fn kind(&self) -> EventKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn code(&self, index: usize) -> Option<&str> {
        self.codes.get(index).map(String::as_str)
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    fn lookup(&self, code: &str) -> Result<usize> {
        self.index_of(code).ok_or_else(|| Error::UnknownCode {
            kind: self.kind.as_str(),
            code: code.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = VocabFile {
            kind: self.kind,
            codes: self.codes.clone(),
        };
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &file)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: VocabFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        let n = file.codes.len();
        let vocab = Self::from_codes(file.kind, file.codes.clone())?;
        if vocab.len() != n || vocab.codes != file.codes {
            return Err(Error::InvalidArgument(
                "vocabulary file codes must be unique and sorted".into(),
            ));
        }
        Ok(vocab)
    }
}

/// The three vocabularies of a cohort.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabs {
    pub diagnosis: EventVocab,
    pub procedure: EventVocab,
    pub medication: EventVocab,
}

impl Vocabs {
    pub fn sizes(&self) -> VocabSizes {
        VocabSizes {
            n_diag: self.diagnosis.len(),
            n_proc: self.procedure.len(),
            n_med: self.medication.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSizes {
    pub n_diag: usize,
    pub n_proc: usize,
    pub n_med: usize,
}

/// A visit with all codes mapped to vocabulary indices. Every set is sorted
/// ascending and duplicate free.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visit {
    pub diagnoses: Vec<usize>,
    pub procedures: Vec<usize>,
    pub daily_meds: Vec<Vec<usize>>,
}

impl Visit {
    /// Visit-level medication set: the union over all days.
    pub fn medications(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.daily_meds.iter().flatten().copied().collect();
        set.into_iter().collect()
    }

    pub fn has_medications(&self) -> bool {
        self.daily_meds.iter().any(|d| !d.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub visits: Vec<Visit>,
}

impl PatientRecord {
    pub fn check_sizes(&self, sizes: VocabSizes) -> Result<()> {
        for v in &self.visits {
            check_range(&v.diagnoses, sizes.n_diag)?;
            check_range(&v.procedures, sizes.n_proc)?;
            for day in &v.daily_meds {
                check_range(day, sizes.n_med)?;
            }
        }
        Ok(())
    }
}

fn check_range(indices: &[usize], size: usize) -> Result<()> {
    match indices.iter().find(|&&i| i >= size) {
        Some(&index) => Err(Error::IndexOutOfRange { index, size }),
        None => Ok(()),
    }
}

/// Reads a cohort in JSONL form. Blank lines are ignored.
pub fn read_cohort<R: BufRead>(reader: R) -> Result<Vec<RawPatient>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let patient: RawPatient = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        for (v, visit) in patient.visits.iter().enumerate() {
            if visit.daily_meds.iter().any(Vec::is_empty) {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("visit {v} has an empty medication day"),
                });
            }
        }
        out.push(patient);
    }
    if out.is_empty() {
        return Err(Error::EmptyCohort);
    }
    Ok(out)
}

pub fn load_cohort(path: impl AsRef<Path>) -> Result<Vec<RawPatient>> {
    read_cohort(BufReader::new(File::open(path)?))
}

pub fn write_cohort<W: Write>(mut writer: W, records: &[RawPatient]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn save_cohort(path: impl AsRef<Path>, records: &[RawPatient]) -> Result<()> {
    write_cohort(BufWriter::new(File::create(path)?), records)
}

/// Builds the diagnosis, procedure and medication vocabularies of a cohort.
pub fn build_vocabs(records: &[RawPatient]) -> Result<Vocabs> {
    if records.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let visits = || records.iter().flat_map(|r| r.visits.iter());
    let diagnosis = EventVocab::from_codes(
        EventKind::Diagnosis,
        visits().flat_map(|v| v.diagnoses.iter().cloned()),
    )?;
    let procedure = EventVocab::from_codes(
        EventKind::Procedure,
        visits().flat_map(|v| v.procedures.iter().cloned()),
    )?;
    let medication = EventVocab::from_codes(
        EventKind::Medication,
        visits().flat_map(|v| v.daily_meds.iter().flatten().cloned()),
    )?;
    Ok(Vocabs {
        diagnosis,
        procedure,
        medication,
    })
}

fn map_set(vocab: &EventVocab, codes: &[String]) -> Result<Vec<usize>> {
    let set = codes
        .iter()
        .map(|c| vocab.lookup(c))
        .collect::<Result<BTreeSet<usize>>>()?;
    Ok(set.into_iter().collect())
}

/// Maps a raw cohort onto vocabulary indices.
pub fn index_cohort(records: &[RawPatient], vocabs: &Vocabs) -> Result<Vec<PatientRecord>> {
    records
        .iter()
        .map(|r| {
            let visits = r
                .visits
                .iter()
                .map(|v| {
                    Ok(Visit {
                        diagnoses: map_set(&vocabs.diagnosis, &v.diagnoses)?,
                        procedures: map_set(&vocabs.procedure, &v.procedures)?,
                        daily_meds: v
                            .daily_meds
                            .iter()
                            .map(|d| map_set(&vocabs.medication, d))
                            .collect::<Result<_>>()?,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(PatientRecord {
                patient_id: r.patient_id.clone(),
                visits,
            })
        })
        .collect()
}

/// Keeps patients with at least `min_visits` visits.
///
/// With a medication whitelist, codes outside it are removed from every day,
/// then empty days and medication-free visits are dropped, and the visit
/// threshold is applied to what remains.
pub fn filter_cohort(
    records: &[RawPatient],
    min_visits: usize,
    med_whitelist: Option<&HashSet<String>>,
) -> Result<Vec<RawPatient>> {
    if min_visits == 0 {
        return Err(Error::InvalidArgument("min_visits must be at least 1".into()));
    }
    let mut out = Vec::new();
    for r in records {
        let patient = match med_whitelist {
            None => r.clone(),
            Some(allowed) => {
                let visits = r
                    .visits
                    .iter()
                    .filter_map(|v| {
                        let days: Vec<Vec<String>> = v
                            .daily_meds
                            .iter()
                            .map(|d| d.iter().filter(|c| allowed.contains(*c)).cloned().collect())
                            .filter(|d: &Vec<String>| !d.is_empty())
                            .collect();
                        (!days.is_empty()).then(|| RawVisit {
                            diagnoses: v.diagnoses.clone(),
                            procedures: v.procedures.clone(),
                            daily_meds: days,
                        })
                    })
                    .collect();
                RawPatient {
                    patient_id: r.patient_id.clone(),
                    visits,
                }
            }
        };
        if patient.visits.len() >= min_visits {
            out.push(patient);
        }
    }
    Ok(out)
}

/// Multi-hot encoding of an index set.
pub fn encode_multi_hot(indices: &[usize], vocab_size: usize) -> Result<Vec<f64>> {
    let mut v = vec![0.0; vocab_size];
    for &i in indices {
        if i >= vocab_size {
            return Err(Error::IndexOutOfRange {
                index: i,
                size: vocab_size,
            });
        }
        v[i] = 1.0;
    }
    Ok(v)
}

pub const DEFAULT_SPLIT: (f64, f64, f64) = (2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0);

#[derive(Debug, Clone, PartialEq)]
pub struct CohortSplit<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Partitions records by patient into train/validation/test.
///
/// Assignment is a seeded shuffle; within each split the input order is kept.
pub fn split_cohort<T: Clone>(
    records: &[T],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<CohortSplit<T>> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be positive and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    let n = records.len();
    let n_train = (n as f64 * a).round() as usize;
    let n_val = (n as f64 * b).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::InvalidArgument(format!(
            "{n} patients cannot fill three non-empty splits"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |ids: &[usize]| {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.into_iter().map(|i| records[i].clone()).collect::<Vec<T>>()
    };
    Ok(CohortSplit {
        train: take(&idx[..n_train]),
        val: take(&idx[n_train..n_train + n_val]),
        test: take(&idx[n_train + n_val..]),
    })
}

/// Summary statistics in the usual cohort-description layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortStats {
    pub n_patients: usize,
    pub n_diagnosis: usize,
    pub n_procedure: usize,
    pub n_medication: usize,
    pub avg_visits: f64,
    pub avg_diagnosis: f64,
    pub avg_procedure: f64,
    pub avg_medication: f64,
}

pub fn cohort_stats(records: &[PatientRecord], sizes: VocabSizes) -> CohortStats {
    let visits: Vec<&Visit> = records.iter().flat_map(|r| r.visits.iter()).collect();
    let nv = visits.len().max(1) as f64;
    let mean = |f: &dyn Fn(&Visit) -> usize| visits.iter().map(|v| f(v)).sum::<usize>() as f64 / nv;
    CohortStats {
        n_patients: records.len(),
        n_diagnosis: sizes.n_diag,
        n_procedure: sizes.n_proc,
        n_medication: sizes.n_med,
        avg_visits: visits.len() as f64 / records.len().max(1) as f64,
        avg_diagnosis: mean(&|v| v.diagnoses.len()),
        avg_procedure: mean(&|v| v.procedures.len()),
        avg_medication: mean(&|v| v.medications().len()),
    }
}
