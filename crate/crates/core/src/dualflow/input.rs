use std::collections::HashMap;

use crate::corpus::{ActLabel, TrainingExample, NUM_ACTS};
use crate::error::{DfmedError, Result};
use crate::kg::{EntityId, KnowledgeGraph, TurnGraph};
use crate::vocab::{Vocab, UNK_ID};

/// A turn graph re-indexed into the dialogue-local entity table.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalGraph {
    pub turn: usize,
    /// Indices into [`FlowInput::entities`].
    pub nodes: Vec<usize>,
    /// `n x n` neighbourhood mask with self-loops.
    pub mask: Vec<bool>,
}

impl LocalGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetInput {
    pub t: usize,
    /// Index of the turn-`t` graph (patient side only) in [`FlowInput::graphs`].
    pub graph: usize,
    /// Graph whose node states embed the candidates. Equals `graph` unless
    /// `P_t` mentions nothing, in which case a frontier-only pool graph is used.
    pub cand_graph: usize,
    /// Position of each candidate inside `cand_graph`.
    pub cand_pos: Vec<usize>,
    pub candidates: Vec<EntityId>,
    /// Indices into `candidates` of the reachable gold entities.
    pub positives: Vec<usize>,
    pub acts: [bool; NUM_ACTS],
}

/// Everything the flow model needs for one dialogue, for one or more
/// target turns. Graphs are ordered: completed turns `1..=n_full`, then one
/// target graph per target, then any fallback pool graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowInput {
    pub dialogue_id: String,
    /// Role-tagged transcript `[P] .. [D] .. [P] ..` up to the last target's `P_t`.
    pub ids: Vec<usize>,
    /// Exclusive end offset of each `P_k` in `ids`.
    pub patient_ends: Vec<usize>,
    pub entities: Vec<EntityId>,
    pub entity_tokens: Vec<Vec<usize>>,
    pub graphs: Vec<LocalGraph>,
    pub n_full: usize,
    /// Gold act sets of completed turns.
    pub acts: Vec<Vec<ActLabel>>,
    pub targets: Vec<TargetInput>,
}

struct EntityTable<'a> {
    kg: &'a KnowledgeGraph,
    vocab: &'a Vocab,
    index: HashMap<EntityId, usize>,
    ids: Vec<EntityId>,
    tokens: Vec<Vec<usize>>,
}

impl EntityTable<'_> {
    fn local(&mut self, e: EntityId) -> usize {
        if let Some(&i) = self.index.get(&e) {
            return i;
        }
        let mut toks = self.vocab.encode(self.kg.name_tokens(e));
        if toks.is_empty() {
            toks.push(UNK_ID);
        }
        if toks.iter().all(|&t| t == UNK_ID) {
            log::warn!("entity {} has no in-vocabulary name token", self.kg.name(e));
        }
        let i = self.ids.len();
        self.index.insert(e, i);
        self.ids.push(e);
        self.tokens.push(toks);
        i
    }

    fn graph(&mut self, g: &TurnGraph) -> LocalGraph {
        LocalGraph { turn: g.turn, nodes: g.nodes().into_iter().map(|e| self.local(e)).collect(), mask: g.neighborhood_mask() }
    }

    fn pool_graph(&mut self, turn: usize, pool: &[EntityId]) -> LocalGraph {
        let n = pool.len();
        let mut mask = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                mask[i * n + j] = i == j || self.kg.has_edge(pool[i], pool[j]);
            }
        }
        LocalGraph { turn, nodes: pool.iter().map(|&e| self.local(e)).collect(), mask }
    }
}

impl FlowInput {
    /// Builds the input from examples of a single dialogue (any subset of
    /// its doctor turns, or one query example).
    pub fn from_examples(examples: &[TrainingExample], kg: &KnowledgeGraph, vocab: &Vocab) -> Result<Self> {
        let base = examples
            .iter()
            .max_by_key(|e| e.t)
            .ok_or_else(|| DfmedError::Invalid("no examples".into()))?;
        if examples.iter().any(|e| e.dialogue_id != base.dialogue_id) {
            return Err(DfmedError::Invalid("examples from different dialogues".into()));
        }
        let t_max = base.t;
        let (ids, ends) = vocab.encode_dialogue_with_bounds(&base.history[..2 * t_max - 1]);
        let patient_ends: Vec<usize> = (0..t_max).map(|k| ends[2 * k]).collect();

        let mut table =
            EntityTable { kg, vocab, index: HashMap::new(), ids: Vec::new(), tokens: Vec::new() };
        let n_full = t_max - 1;
        let mut graphs: Vec<LocalGraph> = base.graphs[..n_full].iter().map(|g| table.graph(g)).collect();

        let mut order: Vec<&TrainingExample> = examples.iter().collect();
        order.sort_by_key(|e| e.t);
        if order.windows(2).any(|w| w[0].t == w[1].t) {
            return Err(DfmedError::Invalid("duplicate target turn".into()));
        }
        let mut targets = Vec::with_capacity(order.len());
        let mut fallbacks = Vec::new();
        for (i, ex) in order.iter().enumerate() {
            graphs.push(table.graph(ex.target_graph()));
            targets.push((i, ex));
        }
        let n_graphs = graphs.len();
        let mut out_targets = Vec::with_capacity(targets.len());
        for (i, ex) in targets {
            let graph = n_full + i;
            let tg = ex.target_graph();
            let cand_graph = if tg.is_empty() && !ex.candidates.is_empty() {
                fallbacks.push(table.pool_graph(ex.t, &ex.candidates));
                n_graphs + fallbacks.len() - 1
            } else {
                graph
            };
            let nodes: Vec<EntityId> = if cand_graph == graph {
                tg.nodes()
            } else {
                ex.candidates.clone()
            };
            let pos_of: HashMap<EntityId, usize> = nodes.iter().enumerate().map(|(p, &e)| (e, p)).collect();
            let cand_pos = ex
                .candidates
                .iter()
                .map(|e| {
                    pos_of
                        .get(e)
                        .copied()
                        .ok_or_else(|| DfmedError::Invalid(format!("candidate {e} missing from turn graph {}", ex.t)))
                })
                .collect::<Result<Vec<_>>>()?;
            let cand_index: HashMap<EntityId, usize> = ex.candidates.iter().enumerate().map(|(p, &e)| (e, p)).collect();
            let positives = ex.target_entities.iter().filter_map(|e| cand_index.get(e).copied()).collect();
            out_targets.push(TargetInput {
                t: ex.t,
                graph,
                cand_graph,
                cand_pos,
                candidates: ex.candidates.clone(),
                positives,
                acts: ActLabel::indicator(&ex.target_acts),
            });
        }
        graphs.extend(fallbacks);
        Ok(FlowInput {
            dialogue_id: base.dialogue_id.clone(),
            ids,
            patient_ends,
            entities: table.ids,
            entity_tokens: table.tokens,
            graphs,
            n_full,
            acts: base.act_history.iter().map(|a| ActLabel::canonical(a)).collect(),
            targets: out_targets,
        })
    }

    /// Number of turns whose context state is needed (`t` of the last target).
    pub fn turns(&self) -> usize {
        self.patient_ends.len()
    }
}
