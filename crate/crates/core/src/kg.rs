//! Knowledge graph storage, entity span matching and one-hop expansion.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, Role};
use crate::error::{DfmedError, Result};

/// Dense entity index; ordering doubles as the tie-break order for ranking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Undirected entity graph. Names are token sequences; the canonical string
/// form joins tokens with single spaces.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KnowledgeGraph {
    names: Vec<Vec<String>>,
    by_name: HashMap<String, EntityId>,
    adjacency: Vec<BTreeSet<EntityId>>,
    max_name_len: usize,
}

fn canonical(tokens: &[String]) -> String {
    tokens.join(" ")
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.iter().map(|a| a.len()).sum::<usize>() / 2
    }

    /// Registers an entity (whitespace-tokenised) or returns the existing id.
    pub fn add_entity(&mut self, name: &str) -> Result<EntityId> {
        let tokens: Vec<String> = name.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(DfmedError::Invalid("empty entity name".into()));
        }
        let key = canonical(&tokens);
        if let Some(&id) = self.by_name.get(&key) {
            return Ok(id);
        }
        let id = EntityId(self.names.len() as u32);
        self.max_name_len = self.max_name_len.max(tokens.len());
        self.names.push(tokens);
        self.by_name.insert(key, id);
        self.adjacency.push(BTreeSet::new());
        Ok(id)
    }

    /// Adds an undirected edge; self-loops and duplicates are ignored.
    pub fn add_edge(&mut self, a: EntityId, b: EntityId) {
        if a == b {
            return;
        }
        self.adjacency[a.index()].insert(b);
        self.adjacency[b.index()].insert(a);
    }

    pub fn id(&self, name: &str) -> Option<EntityId> {
        if let Some(&id) = self.by_name.get(name) {
            return Some(id);
        }
        let key = name.split_whitespace().collect::<Vec<_>>().join(" ");
        self.by_name.get(&key).copied()
    }

    pub fn name_tokens(&self, id: EntityId) -> &[String] {
        &self.names[id.index()]
    }

    pub fn name(&self, id: EntityId) -> String {
        canonical(&self.names[id.index()])
    }

    pub fn neighbors(&self, id: EntityId) -> &BTreeSet<EntityId> {
        &self.adjacency[id.index()]
    }

    pub fn degree(&self, id: EntityId) -> usize {
        self.adjacency[id.index()].len()
    }

    pub fn has_edge(&self, a: EntityId, b: EntityId) -> bool {
        self.adjacency[a.index()].contains(&b)
    }

    pub fn ids(&self) -> impl Iterator<Item = EntityId> {
        (0..self.names.len() as u32).map(EntityId)
    }

    /// Reads a UTF-8 TSV edge list: `entityA<TAB>entityB` per line. A line
    /// with a single field declares an isolated entity; blank lines are skipped.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| DfmedError::io(path, e))?;
        Self::parse(&text).map_err(|(line, msg)| DfmedError::Parse { path: path.to_path_buf(), line, msg })
    }

    pub fn parse(text: &str) -> std::result::Result<Self, (usize, String)> {
        let mut kg = KnowledgeGraph::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let err = |m: &str| (i + 1, m.to_string());
            match fields.as_slice() {
                [a] => {
                    kg.add_entity(a).map_err(|_| err("empty entity name"))?;
                }
                [a, b] => {
                    let a = kg.add_entity(a).map_err(|_| err("empty entity name"))?;
                    let b = kg.add_entity(b).map_err(|_| err("empty entity name"))?;
                    kg.add_edge(a, b);
                }
                _ => return Err(err(&format!("expected 2 tab-separated fields, found {}", fields.len()))),
            }
        }
        Ok(kg)
    }

    /// Writes the graph in the format [`KnowledgeGraph::load`] reads. Each
    /// edge appears once (smaller id first); isolated entities get their own line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for a in self.ids() {
            if self.degree(a) == 0 {
                writeln!(out, "{}", self.name(a)).expect("write to vec");
            }
            for &b in self.neighbors(a) {
                if a < b {
                    writeln!(out, "{}\t{}", self.name(a), self.name(b)).expect("write to vec");
                }
            }
        }
        fs::write(path, out).map_err(|e| DfmedError::io(path, e))
    }

    /// Left-to-right greedy longest match of entity names against `tokens`.
    /// Matches never overlap; repeated entities are reported once, in order of
    /// first occurrence.
    pub fn match_entities<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<EntityId> {
        let mut found = Vec::new();
        let mut seen = BTreeSet::new();
        for (id, _, _) in self.match_spans(tokens) {
            if seen.insert(id) {
                found.push(id);
            }
        }
        found
    }

    /// Every greedy match as `(entity, start, len)`, duplicates included.
    pub fn match_spans<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<(EntityId, usize, usize)> {
        let mut spans = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let longest = self.max_name_len.min(tokens.len() - i);
            let hit = (1..=longest).rev().find_map(|len| {
                let key = tokens[i..i + len].iter().map(|t| t.as_ref()).collect::<Vec<_>>().join(" ");
                self.by_name.get(&key).map(|&id| (id, len))
            });
            match hit {
                Some((id, len)) => {
                    spans.push((id, i, len));
                    i += len;
                }
                None => i += 1,
            }
        }
        spans
    }

    /// Union of neighbours of `seeds`, minus the seeds themselves.
    pub fn one_hop(&self, seeds: &BTreeSet<EntityId>) -> Result<BTreeSet<EntityId>> {
        let mut out = BTreeSet::new();
        for &s in seeds {
            if s.index() >= self.len() {
                return Err(DfmedError::UnknownEntity(s.to_string()));
            }
            out.extend(self.adjacency[s.index()].iter().copied());
        }
        Ok(out.difference(seeds).copied().collect())
    }
}

/// Which utterances of a turn are visible when building its graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Visibility {
    /// Completed turn: patient and doctor utterances.
    Full,
    /// Target turn: patient utterance only.
    PatientOnly,
}

/// Entity subgraph of one dialogue turn: the entities mentioned in the turn
/// plus the one-hop frontier of everything mentioned so far.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TurnGraph {
    /// 1-based turn index.
    pub turn: usize,
    pub mentions: Vec<EntityId>,
    /// Sorted; disjoint from every mention up to this turn.
    pub frontier: Vec<EntityId>,
    /// KG edges among [`TurnGraph::nodes`], as local index pairs `(i, j)` with `i < j`.
    pub edges: Vec<(usize, usize)>,
}

impl TurnGraph {
    pub fn empty(turn: usize) -> Self {
        TurnGraph { turn, mentions: Vec::new(), frontier: Vec::new(), edges: Vec::new() }
    }

    /// Mentions first, then frontier.
    pub fn nodes(&self) -> Vec<EntityId> {
        self.mentions.iter().chain(&self.frontier).copied().collect()
    }

    pub fn len(&self) -> usize {
        self.mentions.len() + self.frontier.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dense `n x n` neighbourhood mask including self-loops.
    pub fn neighborhood_mask(&self) -> Vec<bool> {
        let n = self.len();
        let mut m = vec![false; n * n];
        for i in 0..n {
            m[i * n + i] = true;
        }
        for &(i, j) in &self.edges {
            m[i * n + j] = true;
            m[j * n + i] = true;
        }
        m
    }

    /// Builds a graph from mention nodes of this turn and the cumulative
    /// mention set (which must include `mentions`).
    pub fn from_mentions(
        kg: &KnowledgeGraph,
        turn: usize,
        mentions: Vec<EntityId>,
        cumulative: &BTreeSet<EntityId>,
    ) -> Result<Self> {
        let frontier: Vec<EntityId> = kg.one_hop(cumulative)?.into_iter().collect();
        let nodes: Vec<EntityId> = mentions.iter().chain(&frontier).copied().collect();
        let mut edges = Vec::new();
        for i in 0..nodes.len() {
            for j in i + 1..nodes.len() {
                if kg.has_edge(nodes[i], nodes[j]) {
                    edges.push((i, j));
                }
            }
        }
        Ok(TurnGraph { turn, mentions, frontier, edges })
    }
}

/// Entity ids annotated on an utterance; names unknown to the KG are skipped.
pub fn annotated_ids(kg: &KnowledgeGraph, names: &[String]) -> Vec<EntityId> {
    let mut seen = BTreeSet::new();
    names.iter().filter_map(|n| kg.id(n)).filter(|id| seen.insert(*id)).collect()
}

/// Graph of turn `k` (1-based). Mentions come from `P_k`, plus `D_k` when the
/// turn is [`Visibility::Full`]; the frontier is the one-hop neighbourhood of
/// all mentions visible up to and including this turn.
pub fn build_turn_graph(dialogue: &Dialogue, k: usize, kg: &KnowledgeGraph, vis: Visibility) -> Result<TurnGraph> {
    let rounds = dialogue.rounds();
    if k == 0 || k > rounds.len() {
        return Err(DfmedError::Invalid(format!("turn {k} outside 1..={}", rounds.len())));
    }
    let mut cumulative = BTreeSet::new();
    for (p, d) in &rounds[..k - 1] {
        cumulative.extend(annotated_ids(kg, &p.entities));
        if let Some(d) = d {
            cumulative.extend(annotated_ids(kg, &d.entities));
        }
    }
    let (p, d) = &rounds[k - 1];
    let mut mentions = annotated_ids(kg, &p.entities);
    if vis == Visibility::Full {
        if let Some(d) = d {
            debug_assert_eq!(d.role, Role::Doctor);
            for id in annotated_ids(kg, &d.entities) {
                if !mentions.contains(&id) {
                    mentions.push(id);
                }
            }
        }
    }
    if mentions.is_empty() {
        return Ok(TurnGraph::empty(k));
    }
    cumulative.extend(mentions.iter().copied());
    TurnGraph::from_mentions(kg, k, mentions, &cumulative)
}
