//! Synthetic KG + corpus with planted entity-hop and act-grammar dynamics.

use std::collections::{BTreeSet, HashSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ActLabel, Dialogue, Utterance};
use crate::error::{DfmedError, Result};
use crate::kg::{EntityId, KnowledgeGraph};

/// One state of the act grammar: the act set a doctor turn emits in it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrammarState {
    pub name: String,
    pub acts: Vec<ActLabel>,
    /// Reaching this state ends the dialogue after the turn.
    pub terminal: bool,
}

/// First-order Markov chain over act-set states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActGrammar {
    pub states: Vec<GrammarState>,
    pub initial: Vec<f64>,
    /// `transitions[i][j]` = P(next state j | state i).
    pub transitions: Vec<Vec<f64>>,
}

impl ActGrammar {
    pub fn validate(&self) -> Result<()> {
        let n = self.states.len();
        if n == 0 {
            return Err(DfmedError::Invalid("act grammar has no states".into()));
        }
        check_row("initial", &self.initial, n)?;
        if self.transitions.len() != n {
            return Err(DfmedError::Invalid(format!("transition table has {} rows, expected {n}", self.transitions.len())));
        }
        for (i, row) in self.transitions.iter().enumerate() {
            check_row(&format!("transitions[{i}]"), row, n)?;
        }
        for s in &self.states {
            if s.acts.is_empty() {
                return Err(DfmedError::Invalid(format!("grammar state {} has no acts", s.name)));
            }
        }
        if !self.states.iter().any(|s| s.terminal) {
            return Err(DfmedError::Invalid("act grammar has no terminal state".into()));
        }
        Ok(())
    }

    /// Default grammar: open with small talk and questions, alternate
    /// inquiry and information, diagnose, then prescribe or order a test,
    /// close with precautions.
    pub fn medical() -> Self {
        use ActLabel::*;
        let st = |name: &str, acts: &[ActLabel], terminal: bool| GrammarState {
            name: name.into(),
            acts: acts.to_vec(),
            terminal,
        };
        let states = vec![
            st("open", &[Inquire, Chitchat], false),
            st("ask", &[Inquire], false),
            st("tell", &[Inform], false),
            st("ask_tell", &[Inquire, Inform], false),
            st("dx_rx", &[MakeDiagnosis, PrescribeMedications], false),
            st("dx_test", &[MakeDiagnosis, StateRequiredTest], false),
            st("rx", &[PrescribeMedications, Inform], false),
            st("test", &[StateRequiredTest, Inform], false),
            st("advise", &[ProvideDailyPrecautions, Inform], false),
            st("tell_chat", &[Inform, Chitchat], false),
            st("close", &[ProvideDailyPrecautions, Chitchat], true),
        ];
        //               open  ask   tell  a_t   dx_rx dx_t  rx    test  adv   t_ch  close
        let transitions = vec![
            vec![0.00, 0.50, 0.20, 0.30, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00],
            vec![0.00, 0.10, 0.45, 0.20, 0.12, 0.06, 0.00, 0.00, 0.00, 0.07, 0.00],
            vec![0.00, 0.35, 0.05, 0.12, 0.15, 0.08, 0.00, 0.00, 0.06, 0.14, 0.05],
            vec![0.00, 0.10, 0.40, 0.10, 0.13, 0.07, 0.00, 0.00, 0.05, 0.10, 0.05],
            vec![0.00, 0.05, 0.10, 0.00, 0.00, 0.00, 0.55, 0.00, 0.10, 0.00, 0.20],
            vec![0.00, 0.10, 0.10, 0.00, 0.00, 0.00, 0.00, 0.45, 0.10, 0.00, 0.25],
            vec![0.00, 0.05, 0.15, 0.00, 0.00, 0.00, 0.20, 0.00, 0.20, 0.10, 0.30],
            vec![0.00, 0.15, 0.20, 0.00, 0.10, 0.00, 0.00, 0.05, 0.15, 0.05, 0.30],
            vec![0.00, 0.10, 0.15, 0.05, 0.00, 0.00, 0.05, 0.00, 0.10, 0.20, 0.35],
            vec![0.00, 0.35, 0.20, 0.10, 0.08, 0.04, 0.00, 0.00, 0.05, 0.00, 0.18],
            vec![0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 1.00],
        ];
        let mut initial = vec![0.0; states.len()];
        initial[0] = 1.0;
        ActGrammar { states, initial, transitions }
    }
}

fn check_row(what: &str, row: &[f64], n: usize) -> Result<()> {
    if row.len() != n {
        return Err(DfmedError::Invalid(format!("{what}: length {} != {n}", row.len())));
    }
    if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(DfmedError::Invalid(format!("{what}: probabilities must lie in [0,1]")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(DfmedError::Invalid(format!("{what}: row sums to {s}, expected 1")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_entities: usize,
    pub kg_degree: usize,
    pub n_dialogues: usize,
    pub min_rounds: usize,
    pub max_rounds: usize,
    pub p_hop: f64,
    pub grammar: ActGrammar,
    /// Size of the filler-word pool templates are built from.
    pub vocab_size: usize,
    /// Templates per act (and for patients).
    pub templates_per_act: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_entities: 200,
            kg_degree: 4,
            n_dialogues: 2000,
            min_rounds: 6,
            max_rounds: 20,
            p_hop: 0.9,
            grammar: ActGrammar::medical(),
            vocab_size: 150,
            templates_per_act: 3,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DfmedError::Invalid(m));
        if !(0.0..=1.0).contains(&self.p_hop) {
            return bad(format!("p_hop = {} outside [0,1]", self.p_hop));
        }
        if self.n_entities < 3 {
            return bad("need at least 3 entities".into());
        }
        if self.kg_degree < 2 || self.kg_degree >= self.n_entities {
            return bad(format!("kg_degree must be in [2, n_entities), got {}", self.kg_degree));
        }
        if self.min_rounds == 0 || self.min_rounds > self.max_rounds {
            return bad(format!("bad round range {}..={}", self.min_rounds, self.max_rounds));
        }
        if self.templates_per_act == 0 {
            return bad("templates_per_act must be positive".into());
        }
        if self.vocab_size < 8 {
            return bad("vocab_size must be at least 8".into());
        }
        self.grammar.validate()
    }
}

/// Ground truth behind a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOracle {
    pub seed: u64,
    pub p_hop: f64,
    pub kg_degree: usize,
    pub grammar: ActGrammar,
    /// Grammar state of every doctor turn, per dialogue.
    pub state_paths: Vec<Vec<usize>>,
    /// Whether each non-opening mention came from a one-hop draw, per dialogue
    /// and utterance.
    pub hop_draws: Vec<Vec<Vec<bool>>>,
    pub doctor_templates: Vec<Vec<Vec<String>>>,
    pub patient_templates: Vec<Vec<String>>,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn fresh_word(rng: &mut ChaCha8Rng, syllables: usize, used: &mut HashSet<String>) -> String {
    loop {
        let mut w = String::with_capacity(2 * syllables);
        for _ in 0..syllables {
            w.push(*CONSONANTS.choose(rng).unwrap() as char);
            w.push(*VOWELS.choose(rng).unwrap() as char);
        }
        if used.insert(w.clone()) {
            return w;
        }
    }
}

struct Lexicon {
    doctor: Vec<Vec<Vec<String>>>,
    patient: Vec<Vec<String>>,
}

fn build_lexicon(cfg: &SynthConfig, rng: &mut ChaCha8Rng, used: &mut HashSet<String>) -> Lexicon {
    let fillers: Vec<String> = (0..cfg.vocab_size).map(|_| fresh_word(rng, 2, used)).collect();
    let template = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let len = rng.gen_range(3..=5);
        (0..len).map(|_| fillers.choose(rng).unwrap().clone()).collect()
    };
    let doctor = ActLabel::ALL
        .iter()
        .map(|_| (0..cfg.templates_per_act).map(|_| template(rng)).collect())
        .collect();
    let patient = (0..cfg.templates_per_act * 2).map(|_| template(rng)).collect();
    Lexicon { doctor, patient }
}

fn build_kg(cfg: &SynthConfig, rng: &mut ChaCha8Rng, used: &mut HashSet<String>) -> Result<KnowledgeGraph> {
    let mut kg = KnowledgeGraph::new();
    let modifiers: Vec<String> = (0..8).map(|_| fresh_word(rng, 2, used)).collect();
    let mut ids = Vec::with_capacity(cfg.n_entities);
    for _ in 0..cfg.n_entities {
        let stem = fresh_word(rng, 3, used);
        let name = if rng.gen_bool(0.2) { format!("{} {stem}", modifiers.choose(rng).unwrap()) } else { stem };
        ids.push(kg.add_entity(&name)?);
    }
    // Hamiltonian cycle keeps the graph connected; random matchings top it up.
    let mut order = ids.clone();
    order.shuffle(rng);
    for i in 0..order.len() {
        kg.add_edge(order[i], order[(i + 1) % order.len()]);
    }
    for _ in 0..(cfg.kg_degree - 2) {
        order.shuffle(rng);
        for pair in order.chunks(2) {
            if let [a, b] = pair {
                kg.add_edge(*a, *b);
            }
        }
    }
    Ok(kg)
}

/// Builds `(KG, corpus, oracle)`. Identical configs give identical output.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(KnowledgeGraph, Vec<Dialogue>, SynthOracle)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut used = HashSet::new();
    let lex = build_lexicon(cfg, &mut rng, &mut used);
    let kg = build_kg(cfg, &mut rng, &mut used)?;
    let initial = WeightedIndex::new(&cfg.grammar.initial).map_err(|e| DfmedError::Invalid(e.to_string()))?;

    let mut corpus = Vec::with_capacity(cfg.n_dialogues);
    let mut state_paths = Vec::with_capacity(cfg.n_dialogues);
    let mut hop_draws = Vec::with_capacity(cfg.n_dialogues);
    for i in 0..cfg.n_dialogues {
        let mut drng = ChaCha8Rng::seed_from_u64(cfg.seed);
        drng.set_stream(i as u64 + 1);
        let (d, path, hops) = dialogue(cfg, &kg, &lex, &initial, &mut drng, format!("syn-{i:05}"))?;
        corpus.push(d);
        state_paths.push(path);
        hop_draws.push(hops);
    }
    let oracle = SynthOracle {
        seed: cfg.seed,
        p_hop: cfg.p_hop,
        kg_degree: cfg.kg_degree,
        grammar: cfg.grammar.clone(),
        state_paths,
        hop_draws,
        doctor_templates: lex.doctor,
        patient_templates: lex.patient,
    };
    Ok((kg, corpus, oracle))
}

struct Walker<'a> {
    kg: &'a KnowledgeGraph,
    mentioned: BTreeSet<EntityId>,
    previous: Vec<EntityId>,
    p_hop: f64,
}

impl Walker<'_> {
    /// 1-3 new entities; hop draws prefer neighbours of the previous
    /// utterance, then of anything mentioned so far.
    fn draw(&mut self, rng: &mut ChaCha8Rng) -> (Vec<EntityId>, Vec<bool>) {
        let n = rng.gen_range(1..=3);
        let mut out = Vec::with_capacity(n);
        let mut flags = Vec::with_capacity(n);
        for _ in 0..n {
            let hop = rng.gen_bool(self.p_hop);
            let fresh = |set: BTreeSet<EntityId>, m: &BTreeSet<EntityId>, o: &[EntityId]| -> Vec<EntityId> {
                set.into_iter().filter(|e| !m.contains(e) && !o.contains(e)).collect()
            };
            let pick = if hop {
                let prev: BTreeSet<EntityId> = self.previous.iter().copied().collect();
                let local = fresh(self.kg.one_hop(&prev).unwrap_or_default(), &self.mentioned, &out);
                let pool = if local.is_empty() {
                    fresh(self.kg.one_hop(&self.mentioned).unwrap_or_default(), &self.mentioned, &out)
                } else {
                    local
                };
                pool.choose(rng).copied()
            } else {
                let pool = fresh(self.kg.ids().collect(), &self.mentioned, &out);
                pool.choose(rng).copied()
            };
            if let Some(e) = pick {
                out.push(e);
                flags.push(hop);
            }
        }
        self.mentioned.extend(out.iter().copied());
        if !out.is_empty() {
            self.previous = out.clone();
        }
        (out, flags)
    }
}

fn entity_phrase(kg: &KnowledgeGraph, ents: &[EntityId]) -> Vec<String> {
    let mut toks = Vec::new();
    for (i, e) in ents.iter().enumerate() {
        if i > 0 {
            toks.push(if i + 1 == ents.len() { "and".to_string() } else { ",".to_string() });
        }
        toks.extend(kg.name_tokens(*e).iter().cloned());
    }
    toks
}

type DialogueDraw = (Dialogue, Vec<usize>, Vec<Vec<bool>>);

fn dialogue(
    cfg: &SynthConfig,
    kg: &KnowledgeGraph,
    lex: &Lexicon,
    initial: &WeightedIndex<f64>,
    rng: &mut ChaCha8Rng,
    id: String,
) -> Result<DialogueDraw> {
    let g = &cfg.grammar;
    let all: Vec<EntityId> = kg.ids().collect();
    let seed = *all.choose(rng).expect("non-empty KG");
    let mut walker = Walker { kg, mentioned: BTreeSet::from([seed]), previous: vec![seed], p_hop: cfg.p_hop };
    let names = |ents: &[EntityId]| ents.iter().map(|e| kg.name(*e)).collect::<Vec<_>>();
    let patient_utt = |rng: &mut ChaCha8Rng, ents: &[EntityId]| {
        let mut toks = lex.patient.choose(rng).unwrap().clone();
        toks.extend(entity_phrase(kg, ents));
        Utterance::patient(toks, names(ents))
    };

    let mut utterances = vec![patient_utt(rng, &[seed])];
    let mut hops = vec![Vec::new()];
    let mut path = Vec::new();
    let mut state = initial.sample(rng);
    for round in 1..=cfg.max_rounds {
        path.push(state);
        let acts = ActLabel::canonical(&g.states[state].acts);
        let (ents, flags) = walker.draw(rng);
        let mut toks = Vec::new();
        for (j, a) in acts.iter().enumerate() {
            toks.extend(lex.doctor[a.index()].choose(rng).unwrap().iter().cloned());
            if j == 0 {
                toks.extend(entity_phrase(kg, &ents));
            }
        }
        utterances.push(Utterance::doctor(toks, names(&ents), acts));
        hops.push(flags);
        if g.states[state].terminal || round == cfg.max_rounds {
            break;
        }
        let (ents, flags) = walker.draw(rng);
        utterances.push(patient_utt(rng, &ents));
        hops.push(flags);
        state = next_state(g, state, round + 1, cfg, rng)?;
    }
    Ok((Dialogue { id, utterances }, path, hops))
}

/// Terminal states are masked before `min_rounds` and forced at `max_rounds`.
fn next_state(g: &ActGrammar, cur: usize, round: usize, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<usize> {
    let row = &g.transitions[cur];
    let weights: Vec<f64> = if round < cfg.min_rounds {
        row.iter().zip(&g.states).map(|(p, s)| if s.terminal { 0.0 } else { *p }).collect()
    } else if round == cfg.max_rounds {
        let w: Vec<f64> = row.iter().zip(&g.states).map(|(p, s)| if s.terminal { *p } else { 0.0 }).collect();
        if w.iter().sum::<f64>() > 0.0 {
            w
        } else {
            g.states.iter().map(|s| if s.terminal { 1.0 } else { 0.0 }).collect()
        }
    } else {
        row.clone()
    };
    let weights = if weights.iter().sum::<f64>() > 0.0 { weights } else { row.clone() };
    let dist = WeightedIndex::new(&weights).map_err(|e| DfmedError::Invalid(e.to_string()))?;
    Ok(dist.sample(rng))
}
