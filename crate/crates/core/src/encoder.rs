//! Visit-level patient representations from diagnosis and procedure histories.

use rand_chacha::ChaCha8Rng;

use crate::cohort::Visit;
use crate::error::{Error, Result};
use crate::nn::{Gru, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub diag_emb: ParamId,
    pub proc_emb: ParamId,
    pub gru_diag: Gru,
    pub gru_proc: Gru,
    pub fuse: Linear,
    pub dim: usize,
}

/// Per-visit outputs, one entry per visit.
#[derive(Debug, Clone)]
pub struct PatientEncoding {
    pub q: Vec<Var>,
    pub h_diag: Vec<Var>,
    pub h_proc: Vec<Var>,
}

impl EncoderParams {
    pub fn new(store: &mut ParamStore, n_diag: usize, n_proc: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            diag_emb: store.add_glorot("encoder.diag_emb", n_diag, dim, rng),
            proc_emb: store.add_glorot("encoder.proc_emb", n_proc, dim, rng),
            gru_diag: Gru::new(store, "encoder.gru_diag", dim, dim, rng),
            gru_proc: Gru::new(store, "encoder.gru_proc", dim, dim, rng),
            fuse: Linear::new(store, "encoder.fuse", 2 * dim, dim, rng),
            dim,
        }
    }

    /// Mean diagnosis and procedure embeddings of a visit. An empty
    /// procedure set gives the zero vector.
    pub fn embed_visit_events(&self, tape: &mut Tape, store: &ParamStore, visit: &Visit) -> Result<(Var, Var)> {
        if visit.diagnoses.is_empty() {
            return Err(Error::NoDiagnoses);
        }
        let n_diag = store.get(self.diag_emb).nrows();
        let n_proc = store.get(self.proc_emb).nrows();
        for (set, size) in [(&visit.diagnoses, n_diag), (&visit.procedures, n_proc)] {
            if let Some(&index) = set.iter().find(|&&i| i >= size) {
                return Err(Error::IndexOutOfRange { index, size });
            }
        }
        let wd = tape.param(store, self.diag_emb);
        let d = tape.rows(wd, &visit.diagnoses);
        let d = tape.mean_rows(d);
        let p = if visit.procedures.is_empty() {
            tape.zeros(1, self.dim)
        } else {
            let wp = tape.param(store, self.proc_emb);
            let p = tape.rows(wp, &visit.procedures);
            tape.mean_rows(p)
        };
        Ok((d, p))
    }

    /// Runs both modality recurrences from zero state and fuses their hidden
    /// states per visit with a linear layer. With `recurrent = false` the
    /// averaged embeddings are fused directly (no cross-visit modelling).
    pub fn encode_patient(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        visits: &[Visit],
        recurrent: bool,
    ) -> Result<PatientEncoding> {
        let mut enc = PatientEncoding {
            q: Vec::with_capacity(visits.len()),
            h_diag: Vec::with_capacity(visits.len()),
            h_proc: Vec::with_capacity(visits.len()),
        };
        let mut hd = self.gru_diag.zero_state(tape);
        let mut hp = self.gru_proc.zero_state(tape);
        for v in visits {
            let (d, p) = self.embed_visit_events(tape, store, v)?;
            if recurrent {
                hd = self.gru_diag.step(tape, store, hd, d);
                hp = self.gru_proc.step(tape, store, hp, p);
            } else {
                hd = d;
                hp = p;
            }
            let cat = tape.concat_cols(&[hd, hp]);
            enc.q.push(self.fuse.forward(tape, store, cat));
            enc.h_diag.push(hd);
            enc.h_proc.push(hp);
        }
        Ok(enc)
    }
}
