//! Dual flow modelling: context encoding, a GAT over per-turn entity
//! graphs, entity and act GRUs fed by cross-attention interweaving, entity
//! ranking, act prediction and the joint flow loss.

mod input;
#[cfg(test)]
mod tests;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ActLabel, NUM_ACTS};
use crate::error::{DfmedError, Result};
use crate::kg::EntityId;
use crate::numerics::nn::{normal, xavier_uniform, Embedding, GruCell, Linear, MultiHeadAttention, TransformerEncoder, EMBED_STD};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Var};
use crate::vocab::Vocab;

pub use input::{FlowInput, LocalGraph, TargetInput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub dim: usize,
    pub gat_heads: usize,
    pub context_layers: usize,
    pub context_heads: usize,
    pub max_context_len: usize,
    pub negatives: usize,
    pub top_k: usize,
    pub lambda_e: f64,
    pub lambda_a: f64,
    /// Predict acts from the act GRU (off: from the context state).
    pub act_flow: bool,
    /// Rank entities with the entity GRU (off: with the context state).
    pub entity_flow: bool,
    /// Graph embeddings attend to earlier act embeddings.
    pub interweave_e2a: bool,
    /// Act embeddings attend to entity embeddings.
    pub interweave_a2e: bool,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            dim: 64,
            gat_heads: 4,
            context_layers: 1,
            context_heads: 4,
            max_context_len: 512,
            negatives: 32,
            top_k: 20,
            lambda_e: 1.0,
            lambda_a: 0.05,
            act_flow: true,
            entity_flow: true,
            interweave_e2a: true,
            interweave_a2e: true,
            seed: 7,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DfmedError::Invalid(m));
        if self.dim == 0 || self.gat_heads == 0 || self.dim % self.gat_heads != 0 {
            return bad(format!("dim {} not divisible by {} GAT heads", self.dim, self.gat_heads));
        }
        if self.context_heads == 0 || self.dim % self.context_heads != 0 {
            return bad(format!("dim {} not divisible by {} context heads", self.dim, self.context_heads));
        }
        if self.lambda_e < 0.0 || self.lambda_a < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1".into());
        }
        if self.max_context_len == 0 {
            return bad("max_context_len must be positive".into());
        }
        Ok(())
    }

    /// Applies a named ablation: `no-act-flow`, `no-entity-flow`, `no-flow`,
    /// `no-interweave`, `no-e2a`, `no-a2e`.
    pub fn ablate(&mut self, name: &str) -> Result<()> {
        match name {
            "no-act-flow" => self.act_flow = false,
            "no-entity-flow" => self.entity_flow = false,
            "no-flow" => {
                self.act_flow = false;
                self.entity_flow = false;
            }
            "no-interweave" => {
                self.interweave_e2a = false;
                self.interweave_a2e = false;
            }
            "no-e2a" => self.interweave_e2a = false,
            "no-a2e" => self.interweave_a2e = false,
            other => return Err(DfmedError::Invalid(format!("unknown flow ablation `{other}`"))),
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layout {
    ctx: TransformerEncoder,
    gat_w: Linear,
    gat_src: Vec<ParamId>,
    gat_dst: Vec<ParamId>,
    act_embed: Embedding,
    query_act: ParamId,
    ca_ec: MultiHeadAttention,
    ca_ea: MultiHeadAttention,
    ca_ac: MultiHeadAttention,
    ca_ae: MultiHeadAttention,
    gru_e: GruCell,
    gru_a: GruCell,
    act_head: Linear,
}

pub struct FlowModel<F: Real> {
    pub cfg: FlowConfig,
    pub vocab: Vocab,
    pub params: ParamStore<F>,
    /// Per-act decision thresholds.
    pub thresholds: [f64; NUM_ACTS],
    layout: Layout,
}

/// Tape handles produced by [`FlowModel::forward`]. Row `r` of the per-turn
/// matrices is completed turn `r+1` for `r < n_full`, then one row per target.
#[derive(Clone, Debug)]
pub struct FlowVars {
    /// `S^c_1 .. S^c_T`, `[T, d]`.
    pub context: Var,
    /// Node states of every graph stacked, `[N, d]` (None if no nodes).
    pub nodes: Option<Var>,
    /// First row of each graph inside `nodes`.
    pub node_offsets: Vec<usize>,
    pub graph_pool: Var,
    pub act_pool: Var,
    /// `[h̄^e ; h̄^{e^c} ; h̄^{e^a}]` per row, `[R, 3d]`.
    pub entity_in: Var,
    /// `[h̄^a ; h̄^{a^c} ; h̄^{a^e}]` per row, `[R, 3d]`.
    pub act_in: Var,
    /// `S^e_t` per target, `[n_targets, d]`.
    pub entity_state: Var,
    pub act_state: Var,
    pub act_logits: Var,
    /// Candidate scores per target, `[c, 1]`; None for an empty pool.
    pub scores: Vec<Option<Var>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowOutput {
    pub t: usize,
    pub candidates: Vec<EntityId>,
    pub scores: Vec<f64>,
    /// `Ê_t`: best `min(k, |pool|)` candidates, ties by ascending id.
    pub top_k: Vec<EntityId>,
    pub act_probs: [f64; NUM_ACTS],
    /// `Â_t`, canonical order, never empty.
    pub acts: Vec<ActLabel>,
    pub entity_state: Vec<f64>,
    pub act_state: Vec<f64>,
}

/// Loss terms summed over the target turns of one input.
pub struct FlowLoss {
    /// `Σ_examples λ_e L_e + λ_a L_a`.
    pub total: Var,
    pub entity: f64,
    pub act: f64,
    pub examples: usize,
}

impl<F: Real> FlowModel<F> {
    pub fn new(cfg: FlowConfig, vocab: Vocab) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut s = ParamStore::new();
        let d = cfg.dim;
        let dh = d / cfg.gat_heads;
        let ctx = TransformerEncoder::new(&mut s, &mut rng, "ctx", vocab.len(), d, cfg.context_layers, cfg.context_heads, true)?;
        let gat_w = Linear::new(&mut s, &mut rng, "gat.w", d, d, false)?;
        let mut gat_src = Vec::new();
        let mut gat_dst = Vec::new();
        for h in 0..cfg.gat_heads {
            gat_src.push(s.add(format!("gat.a{h}.src"), xavier_uniform(&mut rng, dh, 1))?);
            gat_dst.push(s.add(format!("gat.a{h}.dst"), xavier_uniform(&mut rng, dh, 1))?);
        }
        let act_embed = Embedding::new(&mut s, &mut rng, "act.embed", NUM_ACTS, d)?;
        let query_act = s.add("act.query", normal(&mut rng, &[1, d], EMBED_STD))?;
        let mut ca = |s: &mut ParamStore<F>, name: &str| MultiHeadAttention::new(s, &mut rng, name, d, d, d, 1, false);
        let ca_ec = ca(&mut s, "iw.ec")?;
        let ca_ea = ca(&mut s, "iw.ea")?;
        let ca_ac = ca(&mut s, "iw.ac")?;
        let ca_ae = ca(&mut s, "iw.ae")?;
        let gru_e = GruCell::new(&mut s, &mut rng, "gru.entity", 3 * d, d)?;
        let gru_a = GruCell::new(&mut s, &mut rng, "gru.act", 3 * d, d)?;
        let act_head = Linear::new(&mut s, &mut rng, "act.head", d, NUM_ACTS, true)?;
        let layout = Layout {
            ctx,
            gat_w,
            gat_src,
            gat_dst,
            act_embed,
            query_act,
            ca_ec,
            ca_ea,
            ca_ac,
            ca_ae,
            gru_e,
            gru_a,
            act_head,
        };
        Ok(FlowModel { cfg, vocab, params: s, thresholds: [0.5; NUM_ACTS], layout })
    }

    /// Same architecture and weights in another precision.
    pub fn cast<G: Real>(&self) -> FlowModel<G> {
        FlowModel {
            cfg: self.cfg.clone(),
            vocab: self.vocab.clone(),
            params: self.params.cast(),
            thresholds: self.thresholds,
            layout: self.layout.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    /// Parameter ids by role, for tests and inspection.
    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.id(name)
    }

    // ── components ──────────────────────────────────────────────────

    /// `S^c_k` for each prefix end in `ends`: mean of the causal encoder's
    /// token states over `U_k`. Prefixes longer than `max_context_len` are
    /// re-encoded from their most recent tokens.
    pub fn encode_context(&self, g: &mut Graph<'_, F>, ids: &[usize], ends: &[usize]) -> Result<Var> {
        if ends.is_empty() || ends.windows(2).any(|w| w[0] >= w[1]) || ends[0] == 0 {
            return Err(DfmedError::Invalid("context ends must be positive and increasing".into()));
        }
        let max = self.cfg.max_context_len;
        let inside = ends.iter().take_while(|&&e| e <= max).count();
        let mut parts = Vec::new();
        if inside > 0 {
            let span = ends[inside - 1];
            let states = self.layout.ctx.forward(g, &ids[..span])?;
            let mut avg = vec![F::zero(); inside * span];
            for (k, &e) in ends[..inside].iter().enumerate() {
                let w = F::of(1.0 / e as f64);
                avg[k * span..k * span + e].iter_mut().for_each(|v| *v = w);
            }
            let avg = g.constant(avg, inside, span)?;
            parts.push(g.matmul(avg, states)?);
        }
        for &e in &ends[inside..] {
            let states = self.layout.ctx.forward(g, &ids[e - max..e])?;
            parts.push(g.mean_rows(states)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat_rows(&parts)
        }
    }

    /// `h^{e_0}`: mean of each entity's name-token embeddings, `[m, d]`.
    pub fn embed_entities(&self, g: &mut Graph<'_, F>, names: &[Vec<usize>]) -> Result<Var> {
        let flat: Vec<usize> = names.concat();
        let toks = self.layout.ctx.embed.lookup(g, &flat)?;
        let mut avg = vec![F::zero(); names.len() * flat.len()];
        let mut col = 0;
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(DfmedError::Invalid(format!("entity {i} has an empty name")));
            }
            let w = F::of(1.0 / n.len() as f64);
            for _ in n {
                avg[i * flat.len() + col] = w;
                col += 1;
            }
        }
        let avg = g.constant(avg, names.len(), flat.len())?;
        g.matmul(avg, toks)
    }

    /// GAT over a stack of disjoint graphs. `x` holds the raw embeddings of
    /// all nodes (graph after graph); `graphs` gives `(offset, n, mask)`.
    fn gat_stack(&self, g: &mut Graph<'_, F>, x: Var, graphs: &[(usize, usize, &[bool])]) -> Result<Var> {
        let heads = self.cfg.gat_heads;
        let dh = self.cfg.dim / heads;
        let wh = self.layout.gat_w.forward(g, x)?;
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let whh = if heads == 1 { wh } else { g.slice_cols(wh, h * dh, dh)? };
            let a_src = g.param(self.layout.gat_src[h]);
            let a_dst = g.param(self.layout.gat_dst[h]);
            let s_src = g.matmul(whh, a_src)?;
            let s_dst = g.matmul(whh, a_dst)?;
            per_head.push((whh, s_src, s_dst));
        }
        let mut blocks = Vec::with_capacity(graphs.len());
        for &(off, n, mask) in graphs {
            if n == 0 {
                continue;
            }
            let mut outs = Vec::with_capacity(heads);
            for &(whh, s_src, s_dst) in &per_head {
                let si = g.slice_rows(s_src, off, n)?;
                let sj = g.slice_rows(s_dst, off, n)?;
                let sj = g.transpose(sj);
                let e = g.add_col_row(si, sj)?;
                let e = g.leaky_relu(e, 0.2);
                let alpha = g.softmax_rows(e, Some(mask))?;
                let v = g.slice_rows(whh, off, n)?;
                outs.push(g.matmul(alpha, v)?);
            }
            blocks.push(if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? });
        }
        let h = if blocks.len() == 1 { blocks[0] } else { g.concat_rows(&blocks)? };
        Ok(g.elu(h, 1.0))
    }

    /// Updated node embeddings of one graph, `[n, d]`.
    pub fn gat_forward(&self, g: &mut Graph<'_, F>, x: Var, mask: &[bool]) -> Result<Var> {
        let n = g.rows(x);
        if n == 0 {
            return Err(DfmedError::Invalid("GAT over an empty graph".into()));
        }
        if mask.len() != n * n {
            return Err(DfmedError::shape("gat", format!("mask {} for {n} nodes", mask.len())));
        }
        self.gat_stack(g, x, &[(0, n, mask)])
    }

    /// `h̄^a`: mean of the act embeddings of `acts`; the query act `q^a`
    /// when `acts` is empty.
    pub fn act_seq_pool(&self, g: &mut Graph<'_, F>, acts: &[ActLabel]) -> Result<Var> {
        if acts.is_empty() {
            return Ok(g.param(self.layout.query_act));
        }
        let ids: Vec<usize> = acts.iter().map(|a| a.index()).collect();
        let rows = self.layout.act_embed.lookup(g, &ids)?;
        g.mean_rows(rows)
    }

    // ── full forward ────────────────────────────────────────────────

    pub fn forward(&self, g: &mut Graph<'_, F>, input: &FlowInput) -> Result<FlowVars> {
        let d = self.cfg.dim;
        let n_full = input.n_full;
        let n_tgt = input.targets.len();
        if n_tgt == 0 {
            return Err(DfmedError::Invalid("flow input has no target turn".into()));
        }
        let rows = n_full + n_tgt;
        let context = self.encode_context(g, &input.ids, &input.patient_ends)?;

        // node states of every graph
        let mut node_offsets = Vec::with_capacity(input.graphs.len());
        let mut all_nodes = Vec::new();
        for lg in &input.graphs {
            node_offsets.push(all_nodes.len());
            all_nodes.extend_from_slice(&lg.nodes);
        }
        let n_nodes = all_nodes.len();
        let nodes = if n_nodes > 0 {
            let raw = self.embed_entities(g, &input.entity_tokens)?;
            let x = g.gather_rows(raw, &all_nodes)?;
            let specs: Vec<(usize, usize, &[bool])> = input
                .graphs
                .iter()
                .zip(&node_offsets)
                .map(|(lg, &o)| (o, lg.len(), lg.mask.as_slice()))
                .collect();
            Some(self.gat_stack(g, x, &specs)?)
        } else {
            None
        };

        // which graph feeds each row, and the turn of each row
        let row_graph: Vec<usize> = (0..n_full).chain(input.targets.iter().map(|t| t.graph)).collect();
        let row_turn: Vec<usize> = (1..=n_full).chain(input.targets.iter().map(|t| t.t)).collect();
        let node_graph: Vec<usize> =
            input.graphs.iter().enumerate().flat_map(|(gi, lg)| std::iter::repeat(gi).take(lg.len())).collect();

        // Eq 3: mean pooling per graph
        let graph_pool = match nodes {
            Some(h) => {
                let mut avg = vec![F::zero(); rows * n_nodes];
                for (r, &gi) in row_graph.iter().enumerate() {
                    let n = input.graphs[gi].len();
                    let off = node_offsets[gi];
                    for j in off..off + n {
                        avg[r * n_nodes + j] = F::of(1.0 / n as f64);
                    }
                }
                let avg = g.constant(avg, rows, n_nodes)?;
                g.matmul(avg, h)?
            }
            None => g.zeros(rows, d),
        };

        // act embeddings of completed turns, and their per-turn pools
        let mut act_ids = Vec::new();
        let mut act_turn = Vec::new();
        for (k, acts) in input.acts.iter().take(n_full).enumerate() {
            for a in acts {
                act_ids.push(a.index());
                act_turn.push(k + 1);
            }
        }
        let n_act = act_ids.len();
        let act_rows = if n_act > 0 { Some(self.layout.act_embed.lookup(g, &act_ids)?) } else { None };
        let query = g.param(self.layout.query_act);
        let q_rows = g.gather_rows(query, &vec![0; n_tgt])?;
        let act_pool = if n_full > 0 {
            let ar = act_rows.ok_or_else(|| DfmedError::Invalid("completed turn without acts".into()))?;
            let mut avg = vec![F::zero(); n_full * n_act];
            for k in 1..=n_full {
                let cnt = act_turn.iter().filter(|&&t| t == k).count();
                if cnt == 0 {
                    return Err(DfmedError::Invalid(format!("completed turn {k} has no acts")));
                }
                for (j, &t) in act_turn.iter().enumerate() {
                    if t == k {
                        avg[(k - 1) * n_act + j] = F::of(1.0 / cnt as f64);
                    }
                }
            }
            let avg = g.constant(avg, n_full, n_act)?;
            let full = g.matmul(avg, ar)?;
            g.concat_rows(&[full, q_rows])?
        } else {
            q_rows
        };

        let ctx_idx: Vec<usize> = row_turn.iter().map(|&t| t - 1).collect();
        let ctx_rows = g.gather_rows(context, &ctx_idx)?;

        // Eqs 8-12: interweaving
        let (row_graph, row_turn, act_turn, node_graph) = (&row_graph, &row_turn, &act_turn, &node_graph);
        let e_c = match nodes {
            Some(h) => {
                let mask: Vec<bool> = (0..rows)
                    .flat_map(|r| node_graph.iter().map(move |&ng| ng == row_graph[r]))
                    .collect();
                self.layout.ca_ec.forward(g, ctx_rows, h, Some(&mask))?
            }
            None => g.zeros(rows, d),
        };
        let e_a = match act_rows {
            Some(ar) if self.cfg.interweave_e2a => {
                let mask: Vec<bool> =
                    (0..rows).flat_map(|r| act_turn.iter().map(move |&t| t < row_turn[r])).collect();
                self.layout.ca_ea.forward(g, graph_pool, ar, Some(&mask))?
            }
            _ => g.zeros(rows, d),
        };
        let a_c = {
            let keys = match act_rows {
                Some(ar) => g.concat_rows(&[ar, query])?,
                None => query,
            };
            let mask: Vec<bool> = (0..rows)
                .flat_map(|r| {
                    let is_target = r >= n_full;
                    act_turn.iter().map(move |&t| !is_target && t == row_turn[r]).chain(std::iter::once(is_target))
                })
                .collect();
            self.layout.ca_ac.forward(g, ctx_rows, keys, Some(&mask))?
        };
        let a_e = match nodes {
            Some(h) if self.cfg.interweave_a2e => {
                let mask: Vec<bool> = (0..rows)
                    .flat_map(|r| {
                        let (turn, own, is_target) = (row_turn[r], row_graph[r], r >= n_full);
                        // completed turn k sees G_1..G_k; target t sees G_1..G_{t-1} and its own graph
                        node_graph.iter().map(move |&ng| {
                            if is_target {
                                (ng < n_full && ng + 1 < turn) || ng == own
                            } else {
                                ng < n_full && ng < turn
                            }
                        })
                    })
                    .collect();
                self.layout.ca_ae.forward(g, act_pool, h, Some(&mask))?
            }
            _ => g.zeros(rows, d),
        };
        let entity_in = g.concat_cols(&[graph_pool, e_c, e_a])?;
        let act_in = g.concat_cols(&[act_pool, a_c, a_e])?;

        // Eqs 4 and 6
        let tgt_turns: Vec<usize> = input.targets.iter().map(|t| t.t).collect();
        let ctx_tgt = g.gather_rows(context, &tgt_turns.iter().map(|t| t - 1).collect::<Vec<_>>())?;
        let entity_state = if self.cfg.entity_flow {
            self.run_gru(g, &self.layout.gru_e, entity_in, n_full, &tgt_turns)?
        } else {
            ctx_tgt
        };
        let act_state =
            if self.cfg.act_flow { self.run_gru(g, &self.layout.gru_a, act_in, n_full, &tgt_turns)? } else { ctx_tgt };

        // Eq 7
        let act_logits = self.layout.act_head.forward(g, act_state)?;

        // Eq 5
        let mut scores = Vec::with_capacity(n_tgt);
        for (i, tgt) in input.targets.iter().enumerate() {
            match nodes {
                Some(h) if !tgt.candidates.is_empty() => {
                    let off = node_offsets[tgt.cand_graph];
                    let idx: Vec<usize> = tgt.cand_pos.iter().map(|p| off + p).collect();
                    let cands = g.gather_rows(h, &idx)?;
                    let s = g.slice_rows(entity_state, i, 1)?;
                    scores.push(Some(g.matmul_t(cands, s)?));
                }
                _ => scores.push(None),
            }
        }

        Ok(FlowVars {
            context,
            nodes,
            node_offsets,
            graph_pool,
            act_pool,
            entity_in,
            act_in,
            entity_state,
            act_state,
            act_logits,
            scores,
        })
    }

    /// Runs the GRU over completed turns, then steps every target from the
    /// state after its preceding turn.
    fn run_gru(&self, g: &mut Graph<'_, F>, cell: &GruCell, inputs: Var, n_full: usize, targets: &[usize]) -> Result<Var> {
        let d = self.cfg.dim;
        let mut states = vec![g.zeros(1, d)];
        let needed = targets.iter().map(|t| t - 1).max().unwrap_or(0);
        for k in 0..needed.min(n_full) {
            let x = g.slice_rows(inputs, k, 1)?;
            let h = cell.forward(g, x, states[k])?;
            states.push(h);
        }
        let prev = if states.len() == 1 { states[0] } else { g.concat_rows(&states)? };
        let prev = g.gather_rows(prev, &targets.iter().map(|t| t - 1).collect::<Vec<_>>())?;
        let x = g.slice_rows(inputs, n_full, targets.len())?;
        cell.forward(g, x, prev)
    }

    /// Eqs 13-15 summed over the targets of `input`; negatives are drawn
    /// from `rng`.
    pub fn flow_loss<R: Rng>(&self, g: &mut Graph<'_, F>, input: &FlowInput, rng: &mut R) -> Result<FlowLoss> {
        let vars = self.forward(g, input)?;
        self.loss_from(g, &vars, input, rng)
    }

    pub fn loss_from<R: Rng>(
        &self,
        g: &mut Graph<'_, F>,
        vars: &FlowVars,
        input: &FlowInput,
        rng: &mut R,
    ) -> Result<FlowLoss> {
        let n_tgt = input.targets.len();
        let mut terms = Vec::new();
        for (tgt, score) in input.targets.iter().zip(&vars.scores) {
            let Some(score) = *score else { continue };
            if tgt.positives.is_empty() {
                continue;
            }
            let negatives: Vec<usize> = (0..tgt.candidates.len()).filter(|i| !tgt.positives.contains(i)).collect();
            let w = 1.0 / tgt.positives.len() as f64;
            for &p in &tgt.positives {
                let mut idx = vec![p];
                idx.extend(negatives.choose_multiple(rng, self.cfg.negatives.min(negatives.len())));
                terms.push(contrastive_term(g, score, &idx, w)?);
            }
        }
        let entity = if terms.is_empty() {
            g.zeros(1, 1)
        } else {
            let all = if terms.len() == 1 { terms[0] } else { g.concat_rows(&terms)? };
            g.sum_all(all)
        };
        let labels: Vec<F> = input
            .targets
            .iter()
            .flat_map(|t| t.acts.iter().map(|&b| if b { F::one() } else { F::zero() }))
            .collect();
        let bce = g.bce_with_logits(vars.act_logits, &labels)?;
        let act = g.scale(bce, n_tgt as f64);
        let we = g.scale(entity, self.cfg.lambda_e);
        let wa = g.scale(act, self.cfg.lambda_a);
        let total = g.add(we, wa)?;
        Ok(FlowLoss { total, entity: g.scalar(entity).f64(), act: g.scalar(act).f64(), examples: n_tgt })
    }

    /// Scores, top-k entities and thresholded acts for every target.
    pub fn predict(&self, input: &FlowInput) -> Result<Vec<FlowOutput>> {
        let mut g = Graph::new(&self.params);
        let vars = self.forward(&mut g, input)?;
        self.outputs_from(&g, &vars, input)
    }

    pub fn outputs_from(&self, g: &Graph<'_, F>, vars: &FlowVars, input: &FlowInput) -> Result<Vec<FlowOutput>> {
        let d = self.cfg.dim;
        let logits = g.value(vars.act_logits);
        let es = g.value(vars.entity_state);
        let as_ = g.value(vars.act_state);
        let mut out = Vec::with_capacity(input.targets.len());
        for (i, tgt) in input.targets.iter().enumerate() {
            let scores: Vec<f64> = match vars.scores[i] {
                Some(s) => g.value(s).iter().map(|v| v.f64()).collect(),
                None => Vec::new(),
            };
            let mut probs = [0.0; NUM_ACTS];
            for (j, p) in probs.iter_mut().enumerate() {
                *p = 1.0 / (1.0 + (-logits[i * NUM_ACTS + j].f64()).exp());
            }
            out.push(FlowOutput {
                t: tgt.t,
                top_k: select_topk(&tgt.candidates, &scores, self.cfg.top_k),
                candidates: tgt.candidates.clone(),
                scores,
                act_probs: probs,
                acts: predict_acts(&probs, &self.thresholds),
                entity_state: es[i * d..(i + 1) * d].iter().map(|v| v.f64()).collect(),
                act_state: as_[i * d..(i + 1) * d].iter().map(|v| v.f64()).collect(),
            });
        }
        Ok(out)
    }
}

/// `-log softmax(scores[idx])[0]`, scaled by `w`; `idx[0]` is the positive.
pub fn contrastive_term<F: Real>(g: &mut Graph<'_, F>, scores: Var, idx: &[usize], w: f64) -> Result<Var> {
    let picked = g.gather_rows(scores, idx)?;
    let row = g.transpose(picked);
    let ce = g.cross_entropy(row, &[0])?;
    Ok(g.scale(ce, w))
}

/// Mean over nodes; zeros for an empty graph.
pub fn graph_pool<F: Real>(g: &mut Graph<'_, F>, h: Option<Var>, dim: usize) -> Result<Var> {
    match h {
        Some(h) if g.rows(h) > 0 => g.mean_rows(h),
        _ => Ok(g.zeros(1, dim)),
    }
}

/// Highest scores first; equal scores by ascending entity id.
pub fn select_topk(candidates: &[EntityId], scores: &[f64], k: usize) -> Vec<EntityId> {
    let mut order: Vec<usize> = (0..candidates.len().min(scores.len())).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(candidates[a].cmp(&candidates[b])));
    order.into_iter().take(k).map(|i| candidates[i]).collect()
}

/// `{j : p_j ≥ τ_j}`, or the single most probable act when that is empty.
pub fn predict_acts(probs: &[f64; NUM_ACTS], thresholds: &[f64; NUM_ACTS]) -> Vec<ActLabel> {
    let picked: Vec<ActLabel> = ActLabel::ALL.into_iter().filter(|a| probs[a.index()] >= thresholds[a.index()]).collect();
    if !picked.is_empty() {
        return picked;
    }
    let best = (0..NUM_ACTS).fold(0, |b, j| if probs[j] > probs[b] { j } else { b });
    vec![ActLabel::ALL[best]]
}
