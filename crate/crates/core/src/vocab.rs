//! Closed whitespace vocabulary with reserved specials and act tokens.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{ActLabel, Dialogue, Utterance};
use crate::error::{DfmedError, Result};
use crate::kg::KnowledgeGraph;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const PATIENT: &str = "[P]";
pub const DOCTOR: &str = "[D]";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
pub const PATIENT_ID: usize = 4;
pub const DOCTOR_ID: usize = 5;
const NUM_SPECIALS: usize = 6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Specials, then the seven act tokens, then `words` in sorted order.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = [PAD, UNK, BOS, EOS, PATIENT, DOCTOR].iter().map(|s| s.to_string()).collect();
        tokens.extend(ActLabel::ALL.iter().map(|a| a.token().to_string()));
        let reserved: BTreeSet<String> = tokens.iter().cloned().collect();
        let words: BTreeSet<String> = words.into_iter().map(|w| w.as_ref().to_string()).collect();
        tokens.extend(words.into_iter().filter(|w| !reserved.contains(w)));
        Vocab::from(tokens)
    }

    /// Every token of the corpus plus every KG entity-name token.
    pub fn build(corpus: &[Dialogue], kg: &KnowledgeGraph) -> Self {
        let mut words = BTreeSet::new();
        for d in corpus {
            for u in &d.utterances {
                words.extend(u.tokens.iter().cloned());
            }
        }
        for id in kg.ids() {
            words.extend(kg.name_tokens(id).iter().cloned());
        }
        Vocab::new(words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK, String::as_str)
    }

    pub fn act_id(&self, act: ActLabel) -> usize {
        NUM_SPECIALS + act.index()
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_or_unk(t.as_ref())).collect()
    }

    /// Strict variant: fails on tokens outside the vocabulary.
    pub fn encode_strict<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).ok_or_else(|| DfmedError::UnknownToken(t.as_ref().to_string())))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Role-tagged concatenation: `[P] p-tokens [D] d-tokens [P] ...`.
    pub fn encode_dialogue(&self, utterances: &[Utterance]) -> Vec<usize> {
        self.encode_dialogue_with_bounds(utterances).0
    }

    /// Like [`Vocab::encode_dialogue`] and also returns the exclusive end
    /// offset of each utterance.
    pub fn encode_dialogue_with_bounds(&self, utterances: &[Utterance]) -> (Vec<usize>, Vec<usize>) {
        let mut ids = Vec::new();
        let mut ends = Vec::with_capacity(utterances.len());
        for u in utterances {
            ids.push(self.id_or_unk(u.role.tag()));
            ids.extend(u.tokens.iter().map(|t| self.id_or_unk(t)));
            ends.push(ids.len());
        }
        (ids, ends)
    }
}

/// Keeps the most recent `max_len` items.
pub fn truncate_left<T: Clone>(ids: &[T], max_len: usize) -> Vec<T> {
    ids[ids.len().saturating_sub(max_len)..].to_vec()
}
