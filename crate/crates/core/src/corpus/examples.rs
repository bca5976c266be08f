use std::collections::BTreeSet;

use super::{ActLabel, Dialogue, Utterance};
use crate::error::Result;
use crate::kg::{annotated_ids, build_turn_graph, EntityId, KnowledgeGraph, TurnGraph, Visibility};

/// Everything needed to predict and generate doctor turn `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub dialogue_id: String,
    /// 1-based target turn.
    pub t: usize,
    /// `P_1, D_1, ..., P_t`.
    pub history: Vec<Utterance>,
    /// `G_1 .. G_t`: completed turns see both utterances, turn `t` only `P_t`.
    pub graphs: Vec<TurnGraph>,
    /// Gold act sets `A_1 .. A_{t-1}`.
    pub act_history: Vec<Vec<ActLabel>>,
    /// Candidate pool `G¹_{≤t}`, sorted by id.
    pub candidates: Vec<EntityId>,
    /// Gold entities of `D_t` present in the candidate pool (ranking targets).
    pub target_entities: Vec<EntityId>,
    /// Gold entities of `D_t` outside the pool; kept for metrics only.
    pub unreachable_entities: Vec<EntityId>,
    /// All gold entity names of `D_t` as annotated.
    pub gold_entity_names: Vec<String>,
    pub target_acts: Vec<ActLabel>,
    pub target_tokens: Vec<String>,
}

impl TrainingExample {
    pub fn has_unreachable(&self) -> bool {
        !self.unreachable_entities.is_empty()
    }

    pub fn target_graph(&self) -> &TurnGraph {
        self.graphs.last().expect("at least one turn graph")
    }
}

/// One example per doctor turn.
pub fn build_examples(dialogue: &Dialogue, kg: &KnowledgeGraph) -> Result<Vec<TrainingExample>> {
    dialogue.validate()?;
    let rounds = dialogue.rounds();
    let n_doctor = rounds.iter().filter(|(_, d)| d.is_some()).count();
    let mut full_graphs = Vec::with_capacity(n_doctor);
    for k in 1..=n_doctor {
        full_graphs.push(build_turn_graph(dialogue, k, kg, Visibility::Full)?);
    }
    let mut out = Vec::with_capacity(n_doctor);
    for t in 1..=n_doctor {
        let target_graph = build_turn_graph(dialogue, t, kg, Visibility::PatientOnly)?;
        let candidates = pool(dialogue, t, kg)?;
        let doctor = rounds[t - 1].1.expect("complete round");
        let gold = annotated_ids(kg, &doctor.entities);
        let cand_set: BTreeSet<EntityId> = candidates.iter().copied().collect();
        let (target_entities, unreachable_entities): (Vec<_>, Vec<_>) =
            gold.into_iter().partition(|e| cand_set.contains(e));
        let mut graphs = full_graphs[..t - 1].to_vec();
        graphs.push(target_graph);
        out.push(TrainingExample {
            dialogue_id: dialogue.id.clone(),
            t,
            history: dialogue.utterances[..2 * t - 1].to_vec(),
            graphs,
            act_history: rounds[..t - 1].iter().map(|(_, d)| d.expect("complete").acts.clone()).collect(),
            candidates,
            target_entities,
            unreachable_entities,
            gold_entity_names: doctor.entities.clone(),
            target_acts: ActLabel::canonical(&doctor.acts),
            target_tokens: doctor.tokens.clone(),
        });
    }
    Ok(out)
}

/// Example for an unanswered trailing patient turn (live consultation).
/// Target fields are empty. Returns `None` when the dialogue ends with a
/// doctor utterance.
pub fn build_query(dialogue: &Dialogue, kg: &KnowledgeGraph) -> Result<Option<TrainingExample>> {
    if dialogue.utterances.is_empty() || dialogue.utterances.len() % 2 == 0 {
        return Ok(None);
    }
    if dialogue.utterances.len() > 1 {
        dialogue.validate()?;
    }
    let t = dialogue.utterances.len().div_ceil(2);
    let mut graphs = Vec::with_capacity(t);
    for k in 1..t {
        graphs.push(build_turn_graph(dialogue, k, kg, Visibility::Full)?);
    }
    graphs.push(build_turn_graph(dialogue, t, kg, Visibility::PatientOnly)?);
    let rounds = dialogue.rounds();
    Ok(Some(TrainingExample {
        dialogue_id: dialogue.id.clone(),
        t,
        history: dialogue.utterances.clone(),
        graphs,
        act_history: rounds[..t - 1].iter().map(|(_, d)| d.expect("complete").acts.clone()).collect(),
        candidates: pool(dialogue, t, kg)?,
        target_entities: Vec::new(),
        unreachable_entities: Vec::new(),
        gold_entity_names: Vec::new(),
        target_acts: Vec::new(),
        target_tokens: Vec::new(),
    }))
}

/// One-hop neighbourhood of every entity visible before `D_t`.
fn pool(dialogue: &Dialogue, t: usize, kg: &KnowledgeGraph) -> Result<Vec<EntityId>> {
    let mut seen = BTreeSet::new();
    for u in &dialogue.utterances[..2 * t - 1] {
        seen.extend(annotated_ids(kg, &u.entities));
    }
    Ok(kg.one_hop(&seen)?.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kg() -> KnowledgeGraph {
        KnowledgeGraph::parse("a\tb\nb\tc\nc\td\nx\ty\n").unwrap()
    }

    fn dialogue() -> Dialogue {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        Dialogue {
            id: "d".into(),
            utterances: vec![
                Utterance::patient(s(&["i", "have", "a"]), s(&["a"])),
                Utterance::doctor(s(&["any", "b", "?"]), s(&["b"]), vec![ActLabel::Inquire]),
                Utterance::patient(s(&["yes", "c"]), s(&["c"])),
                Utterance::doctor(s(&["take", "d", "and", "y"]), s(&["d", "y"]), vec![ActLabel::PrescribeMedications, ActLabel::Inform]),
            ],
        }
    }

    #[test]
    fn one_example_per_doctor_turn() {
        let ex = build_examples(&dialogue(), &kg()).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex.iter().map(|e| e.t).collect::<Vec<_>>(), vec![1, 2]);
        assert!(ex[0].act_history.is_empty());
        assert_eq!(ex[1].act_history, vec![vec![ActLabel::Inquire]]);
        assert_eq!(ex[1].history.len(), 3);
        assert_eq!(ex[1].graphs.len(), 2);
    }

    #[test]
    fn unreachable_gold_is_flagged() {
        let kg = kg();
        let ex = build_examples(&dialogue(), &kg).unwrap();
        let e2 = &ex[1];
        // set-difference oracle: gold {d, y} minus pool {d}
        let gold: BTreeSet<_> = ["d", "y"].iter().map(|n| kg.id(n).unwrap()).collect();
        let pool: BTreeSet<_> = e2.candidates.iter().copied().collect();
        let expect_targets: Vec<_> = gold.intersection(&pool).copied().collect();
        let expect_missing: Vec<_> = gold.difference(&pool).copied().collect();
        assert_eq!(e2.target_entities, expect_targets);
        assert_eq!(e2.unreachable_entities, expect_missing);
        assert!(e2.has_unreachable());
        assert_eq!(e2.gold_entity_names, vec!["d".to_string(), "y".to_string()]);
        // first turn: pool is one_hop({a}) = {b}, gold b is reachable
        assert_eq!(ex[0].target_entities, vec![kg.id("b").unwrap()]);
        assert!(!ex[0].has_unreachable());
    }

    #[test]
    fn query_matches_training_example_inputs() {
        let kg = kg();
        let mut d = dialogue();
        d.utterances.pop();
        let q = build_query(&d, &kg).unwrap().unwrap();
        let ex = build_examples(&dialogue(), &kg).unwrap();
        assert_eq!(q.t, 2);
        assert_eq!(q.graphs, ex[1].graphs);
        assert_eq!(q.candidates, ex[1].candidates);
        assert_eq!(q.act_history, ex[1].act_history);
        assert!(q.target_acts.is_empty());
        assert!(build_query(&dialogue(), &kg).unwrap().is_none());
    }

    #[test]
    fn targets_inside_pool_and_history_ends_with_patient() {
        let ex = build_examples(&dialogue(), &kg()).unwrap();
        for e in &ex {
            assert!(e.target_entities.iter().all(|x| e.candidates.contains(x)));
            assert_eq!(e.history.last().unwrap().role, super::super::Role::Patient);
            if !e.target_graph().is_empty() {
                assert_eq!(e.target_graph().frontier, e.candidates);
            }
        }
    }
}
