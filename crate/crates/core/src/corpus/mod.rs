//! Dialogue data model, JSONL persistence, privacy filtering, per-turn
//! example construction and the synthetic corpus generator.

mod examples;
mod io;
mod privacy;
pub mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::DfmedError;

pub use examples::{build_examples, build_query, TrainingExample};
pub use io::{load_corpus, parse_corpus, save_corpus, write_corpus};
pub use privacy::{filter_privacy, PrivacyFilter, DEFAULT_PLACEHOLDERS};

/// The seven doctor dialogue acts, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActLabel {
    Inquire,
    MakeDiagnosis,
    PrescribeMedications,
    StateRequiredTest,
    ProvideDailyPrecautions,
    Inform,
    Chitchat,
}

pub const NUM_ACTS: usize = 7;

impl ActLabel {
    pub const ALL: [ActLabel; NUM_ACTS] = [
        ActLabel::Inquire,
        ActLabel::MakeDiagnosis,
        ActLabel::PrescribeMedications,
        ActLabel::StateRequiredTest,
        ActLabel::ProvideDailyPrecautions,
        ActLabel::Inform,
        ActLabel::Chitchat,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ActLabel::Inquire => "Inquire",
            ActLabel::MakeDiagnosis => "MakeDiagnosis",
            ActLabel::PrescribeMedications => "PrescribeMedications",
            ActLabel::StateRequiredTest => "StateRequiredTest",
            ActLabel::ProvideDailyPrecautions => "ProvideDailyPrecautions",
            ActLabel::Inform => "Inform",
            ActLabel::Chitchat => "Chitchat",
        }
    }

    /// Reserved guidance token fed to the generator's encoder.
    pub fn token(self) -> &'static str {
        match self {
            ActLabel::Inquire => "[ACT_INQUIRE]",
            ActLabel::MakeDiagnosis => "[ACT_MAKE_DIAGNOSIS]",
            ActLabel::PrescribeMedications => "[ACT_PRESCRIBE_MEDICATIONS]",
            ActLabel::StateRequiredTest => "[ACT_STATE_REQUIRED_TEST]",
            ActLabel::ProvideDailyPrecautions => "[ACT_PROVIDE_DAILY_PRECAUTIONS]",
            ActLabel::Inform => "[ACT_INFORM]",
            ActLabel::Chitchat => "[ACT_CHITCHAT]",
        }
    }

    /// 7-bit indicator vector of an act set.
    pub fn indicator(acts: &[ActLabel]) -> [bool; NUM_ACTS] {
        let mut v = [false; NUM_ACTS];
        for a in acts {
            v[a.index()] = true;
        }
        v
    }

    /// Canonical-order, de-duplicated act set.
    pub fn canonical(acts: &[ActLabel]) -> Vec<ActLabel> {
        let ind = Self::indicator(acts);
        Self::ALL.into_iter().filter(|a| ind[a.index()]).collect()
    }
}

impl fmt::Display for ActLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActLabel {
    type Err = DfmedError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ActLabel::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| DfmedError::Invalid(format!("unknown dialogue act `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Patient,
    Doctor,
}

impl Role {
    pub fn tag(self) -> &'static str {
        match self {
            Role::Patient => crate::vocab::PATIENT,
            Role::Doctor => crate::vocab::DOCTOR,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub role: Role,
    pub tokens: Vec<String>,
    /// KG entity names mentioned in this utterance.
    pub entities: Vec<String>,
    /// Empty for patients, non-empty for doctors.
    pub acts: Vec<ActLabel>,
}

impl Utterance {
    pub fn patient(tokens: Vec<String>, entities: Vec<String>) -> Self {
        Utterance { role: Role::Patient, tokens, entities, acts: Vec::new() }
    }

    pub fn doctor(tokens: Vec<String>, entities: Vec<String>, acts: Vec<ActLabel>) -> Self {
        Utterance { role: Role::Doctor, tokens, entities, acts }
    }
}

/// Alternating patient/doctor utterances starting with the patient. A final
/// unanswered patient utterance is allowed (live consultations).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Dialogue {
    /// `(P_k, D_k)` pairs; the last doctor slot is `None` for a trailing patient turn.
    pub fn rounds(&self) -> Vec<(&Utterance, Option<&Utterance>)> {
        self.utterances.chunks(2).map(|c| (&c[0], c.get(1))).collect()
    }

    /// Number of doctor utterances.
    pub fn num_doctor_turns(&self) -> usize {
        self.utterances.iter().filter(|u| u.role == Role::Doctor).count()
    }

    pub fn validate(&self) -> Result<(), DfmedError> {
        let err = |field: String, msg: &str| DfmedError::Schema { id: self.id.clone(), field, msg: msg.to_string() };
        if self.utterances.len() < 2 {
            return Err(err("utterances".into(), "need at least one patient/doctor pair"));
        }
        for (i, u) in self.utterances.iter().enumerate() {
            let expect = if i % 2 == 0 { Role::Patient } else { Role::Doctor };
            if u.role != expect {
                return Err(err(format!("utterances[{i}].role"), "roles must alternate starting with patient"));
            }
            match u.role {
                Role::Patient if !u.acts.is_empty() => {
                    return Err(err(format!("utterances[{i}].acts"), "patient utterances carry no acts"))
                }
                Role::Doctor if u.acts.is_empty() => {
                    return Err(err(format!("utterances[{i}].acts"), "doctor utterances need at least one act"))
                }
                _ => {}
            }
        }
        Ok(())
    }
}
