//! Guided response generation: one shared encoder for the guidance sequence
//! (act tokens then entity names) and the dialogue history, and a pre-norm
//! decoder whose layers blend the two cross-attention streams with a gate.

#[cfg(test)]
mod tests;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ActLabel, Utterance};
use crate::error::{DfmedError, Result};
use crate::numerics::nn::{
    causal_mask, sinusoidal_positions, FeedForward, LayerNorm, Linear, MultiHeadAttention, TransformerEncoder,
};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::vocab::{truncate_left, Vocab, BOS_ID, EOS_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum DecodeMode {
    Greedy,
    Beam { width: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    /// Maximum number of generated tokens (excluding `[EOS]`).
    pub max_len: usize,
    pub max_history_len: usize,
    pub decode: DecodeMode,
    pub use_guidance: bool,
    /// Output projection shares the token embedding (only a bias is added).
    pub tie_embeddings: bool,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            dim: 64,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            max_len: 40,
            max_history_len: 128,
            decode: DecodeMode::Greedy,
            use_guidance: true,
            tie_embeddings: false,
            seed: 7,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(DfmedError::Invalid(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.dec_layers == 0 {
            return Err(DfmedError::Invalid("decoder needs at least one layer".into()));
        }
        if self.max_len == 0 || self.max_history_len == 0 {
            return Err(DfmedError::Invalid("max_len and max_history_len must be positive".into()));
        }
        if let DecodeMode::Beam { width: 0 } = self.decode {
            return Err(DfmedError::Invalid("beam width must be >= 1".into()));
        }
        Ok(())
    }
}

/// Planned content of the next doctor turn.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Guidance {
    pub acts: Vec<ActLabel>,
    /// Entity names (token sequences), in rank order.
    pub entities: Vec<Vec<String>>,
}

impl Guidance {
    pub fn new(acts: &[ActLabel], entities: Vec<Vec<String>>) -> Self {
        Guidance { acts: ActLabel::canonical(acts), entities }
    }

    /// Act tokens in canonical order, then entity-name tokens.
    pub fn tokens(&self) -> Vec<String> {
        let mut out: Vec<String> = ActLabel::canonical(&self.acts).iter().map(|a| a.token().to_string()).collect();
        for e in &self.entities {
            out.extend(e.iter().cloned());
        }
        out
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    ca_guide: MultiHeadAttention,
    ca_hist: MultiHeadAttention,
    gate: Linear,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct Layout {
    enc: TransformerEncoder,
    layers: Vec<DecoderLayer>,
    ln_f: LayerNorm,
    head: Head,
}

#[derive(Clone, Debug)]
enum Head {
    Linear(Linear),
    /// Logits against the embedding table plus a bias.
    Tied(ParamId),
}

#[derive(Clone, Debug)]
pub struct GenModel<F: Real> {
    pub cfg: GenConfig,
    pub vocab: Vocab,
    pub params: ParamStore<F>,
    layout: Layout,
}

/// Decoder outputs for a teacher-forced or partial prefix.
pub struct DecoderOut {
    /// `[n, |V|]` next-token logits.
    pub logits: Var,
    /// Per layer, `[n, d]` gate values (absent without guidance).
    pub gates: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub ids: Vec<usize>,
    pub tokens: Vec<String>,
    /// Sum of token log-probabilities, `[EOS]` included when emitted.
    pub log_prob: f64,
}

impl<F: Real> GenModel<F> {
    pub fn new(cfg: GenConfig, vocab: Vocab) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut s = ParamStore::new();
        let (d, h) = (cfg.dim, cfg.heads);
        let enc = TransformerEncoder::new(&mut s, &mut rng, "enc", vocab.len(), d, cfg.enc_layers, h, false)?;
        let mut layers = Vec::with_capacity(cfg.dec_layers);
        for l in 0..cfg.dec_layers {
            let p = format!("dec.layer{l}");
            layers.push(DecoderLayer {
                ln_self: LayerNorm::new(&mut s, &format!("{p}.ln_self"), d)?,
                self_attn: MultiHeadAttention::new(&mut s, &mut rng, &format!("{p}.self"), d, d, d, h, true)?,
                ln_cross: LayerNorm::new(&mut s, &format!("{p}.ln_cross"), d)?,
                ca_guide: MultiHeadAttention::new(&mut s, &mut rng, &format!("{p}.ca_guide"), d, d, d, h, true)?,
                ca_hist: MultiHeadAttention::new(&mut s, &mut rng, &format!("{p}.ca_hist"), d, d, d, h, true)?,
                gate: Linear::new(&mut s, &mut rng, &format!("{p}.gate"), d, d, false)?,
                ln_ffn: LayerNorm::new(&mut s, &format!("{p}.ln_ffn"), d)?,
                ffn: FeedForward::new(&mut s, &mut rng, &format!("{p}.ffn"), d)?,
            });
        }
        let ln_f = LayerNorm::new(&mut s, "dec.ln_f", d)?;
        let head = if cfg.tie_embeddings {
            Head::Tied(s.add("dec.head.b", Tensor::zeros(&[1, vocab.len()]))?)
        } else {
            Head::Linear(Linear::new(&mut s, &mut rng, "dec.head", d, vocab.len(), true)?)
        };
        Ok(GenModel { cfg, vocab, params: s, layout: Layout { enc, layers, ln_f, head } })
    }

    pub fn cast<G: Real>(&self) -> GenModel<G> {
        GenModel { cfg: self.cfg.clone(), vocab: self.vocab.clone(), params: self.params.cast(), layout: self.layout.clone() }
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.id(name)
    }

    // ── encoders ────────────────────────────────────────────────────

    /// Shared encoder over raw ids; both entry points go through here.
    pub fn encode_ids(&self, g: &mut Graph<'_, F>, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(DfmedError::Invalid("empty encoder input".into()));
        }
        self.layout.enc.forward(g, ids)
    }

    pub fn guidance_ids(&self, guidance: &Guidance) -> Result<Vec<usize>> {
        if guidance.acts.is_empty() {
            return Err(DfmedError::Invalid("guidance needs at least one act".into()));
        }
        Ok(self.vocab.encode(&guidance.tokens()))
    }

    pub fn encode_guidance(&self, g: &mut Graph<'_, F>, guidance: &Guidance) -> Result<Var> {
        let ids = self.guidance_ids(guidance)?;
        self.encode_ids(g, &ids)
    }

    /// Role-tagged history, keeping the most recent `max_history_len` tokens.
    pub fn history_ids(&self, history: &[Utterance]) -> Vec<usize> {
        truncate_left(&self.vocab.encode_dialogue(history), self.cfg.max_history_len)
    }

    pub fn encode_history(&self, g: &mut Graph<'_, F>, history: &[Utterance]) -> Result<Var> {
        if history.is_empty() {
            return Err(DfmedError::Invalid("empty history".into()));
        }
        let ids = self.history_ids(history);
        self.encode_ids(g, &ids)
    }

    fn memories(&self, g: &mut Graph<'_, F>, history: &[Utterance], guidance: &Guidance) -> Result<(Option<Var>, Var)> {
        let h_c = self.encode_history(g, history)?;
        let h_ea = if self.cfg.use_guidance { Some(self.encode_guidance(g, guidance)?) } else { None };
        Ok((h_ea, h_c))
    }

    // ── decoder ─────────────────────────────────────────────────────

    /// Runs the decoder over `prefix` (which starts with `[BOS]`).
    /// Row `w` of the logits is the distribution of token `w + 1`.
    pub fn decoder(&self, g: &mut Graph<'_, F>, prefix: &[usize], h_ea: Option<Var>, h_c: Var) -> Result<DecoderOut> {
        if prefix.first() != Some(&BOS_ID) {
            return Err(DfmedError::Invalid("decoder prefix must start with [BOS]".into()));
        }
        let n = prefix.len();
        let d = self.cfg.dim;
        let mut x = self.layout.enc.embed.lookup(g, prefix)?;
        let pe: Vec<F> = sinusoidal_positions(n, d).into_iter().map(F::of).collect();
        let pe = g.constant(pe, n, d)?;
        x = g.add(x, pe)?;
        let mask = causal_mask(n);
        let mut gates = Vec::new();
        for layer in &self.layout.layers {
            let h = layer.ln_self.forward(g, x)?;
            let a = layer.self_attn.forward(g, h, h, Some(&mask))?;
            x = g.add(x, a)?;
            let q = layer.ln_cross.forward(g, x)?;
            let hc = layer.ca_hist.forward(g, q, h_c, None)?;
            let fused = match h_ea {
                Some(h_ea) => {
                    let hea = layer.ca_guide.forward(g, q, h_ea, None)?;
                    let gl = layer.gate.forward(g, hc)?;
                    let gv = g.sigmoid(gl);
                    // g * hc + (1 - g) * hea = hea + g * (hc - hea)
                    let diff = g.sub(hc, hea)?;
                    let mixed = g.mul(gv, diff)?;
                    gates.push(gv);
                    g.add(hea, mixed)?
                }
                None => hc,
            };
            x = g.add(x, fused)?;
            let h = layer.ln_ffn.forward(g, x)?;
            let f = layer.ffn.forward(g, h)?;
            x = g.add(x, f)?;
        }
        let x = self.layout.ln_f.forward(g, x)?;
        let logits = match &self.layout.head {
            Head::Linear(l) => l.forward(g, x)?,
            Head::Tied(b) => {
                let table = g.param(self.layout.enc.embed.table);
                let z = g.matmul_t(x, table)?;
                let b = g.param(*b);
                g.add_row(z, b)?
            }
        };
        Ok(DecoderOut { logits, gates })
    }

    /// Mean per-token negative log-likelihood of `target` (then `[EOS]`)
    /// under teacher forcing.
    pub fn generation_loss<S: AsRef<str>>(
        &self,
        g: &mut Graph<'_, F>,
        history: &[Utterance],
        guidance: &Guidance,
        target: &[S],
    ) -> Result<Var> {
        Ok(self.teacher_forced(g, history, guidance, target)?.0)
    }

    /// Loss plus the decoder outputs it came from.
    pub fn teacher_forced<S: AsRef<str>>(
        &self,
        g: &mut Graph<'_, F>,
        history: &[Utterance],
        guidance: &Guidance,
        target: &[S],
    ) -> Result<(Var, DecoderOut)> {
        if target.is_empty() {
            return Err(DfmedError::Invalid("empty generation target".into()));
        }
        let tgt = self.vocab.encode_strict(target)?;
        let (h_ea, h_c) = self.memories(g, history, guidance)?;
        let mut prefix = Vec::with_capacity(tgt.len() + 1);
        prefix.push(BOS_ID);
        prefix.extend_from_slice(&tgt);
        let mut gold = tgt;
        gold.push(EOS_ID);
        let out = self.decoder(g, &prefix, h_ea, h_c)?;
        let loss = g.cross_entropy(out.logits, &gold)?;
        Ok((loss, out))
    }

    /// Average gate value per decoder layer on a teacher-forced target.
    pub fn gate_means<S: AsRef<str>>(&self, history: &[Utterance], guidance: &Guidance, target: &[S]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let (_, out) = self.teacher_forced(&mut g, history, guidance, target)?;
        Ok(out
            .gates
            .iter()
            .map(|&v| {
                let vals = g.value(v);
                vals.iter().map(|x| x.f64()).sum::<f64>() / vals.len() as f64
            })
            .collect())
    }

    /// Next-token probabilities after `prefix` (without the leading `[BOS]`).
    pub fn next_distribution(&self, history: &[Utterance], guidance: &Guidance, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let (h_ea, h_c) = self.memories(&mut g, history, guidance)?;
        let mut full = vec![BOS_ID];
        full.extend_from_slice(prefix);
        let lp = self.last_log_probs(&mut g, &full, h_ea, h_c)?;
        Ok(lp.into_iter().map(f64::exp).collect())
    }

    fn last_log_probs(&self, g: &mut Graph<'_, F>, prefix: &[usize], h_ea: Option<Var>, h_c: Var) -> Result<Vec<f64>> {
        let out = self.decoder(g, prefix, h_ea, h_c)?;
        let v = self.vocab.len();
        let row = &g.value(out.logits)[(prefix.len() - 1) * v..prefix.len() * v];
        Ok(log_softmax(row))
    }

    // ── inference ───────────────────────────────────────────────────

    pub fn decode(&self, history: &[Utterance], guidance: &Guidance) -> Result<Decoded> {
        match self.cfg.decode {
            DecodeMode::Greedy => self.greedy(history, guidance),
            DecodeMode::Beam { width } => self.beam(history, guidance, width),
        }
    }

    fn finish(&self, ids: Vec<usize>, log_prob: f64) -> Decoded {
        let tokens = self.vocab.decode(&ids);
        Decoded { ids, tokens, log_prob }
    }

    fn greedy(&self, history: &[Utterance], guidance: &Guidance) -> Result<Decoded> {
        let mut g = Graph::new(&self.params);
        let (h_ea, h_c) = self.memories(&mut g, history, guidance)?;
        let mut prefix = vec![BOS_ID];
        let mut total = 0.0;
        while prefix.len() <= self.cfg.max_len {
            let lp = self.last_log_probs(&mut g, &prefix, h_ea, h_c)?;
            let next = argmax(&lp);
            total += lp[next];
            if next == EOS_ID {
                break;
            }
            prefix.push(next);
        }
        Ok(self.finish(prefix[1..].to_vec(), total))
    }

    /// Beam search ranked by log-probability divided by token count
    /// (`[EOS]` included). Ties go to the lower token id.
    fn beam(&self, history: &[Utterance], guidance: &Guidance, width: usize) -> Result<Decoded> {
        let mut g = Graph::new(&self.params);
        let (h_ea, h_c) = self.memories(&mut g, history, guidance)?;
        let norm = |lp: f64, len: usize| lp / len.max(1) as f64;
        let mut active: Vec<(Vec<usize>, f64)> = vec![(vec![BOS_ID], 0.0)];
        let mut done: Vec<(Vec<usize>, f64, usize)> = Vec::new();
        while !active.is_empty() {
            let mut cands: Vec<(usize, usize, f64)> = Vec::new();
            for (b, (prefix, score)) in active.iter().enumerate() {
                let lp = self.last_log_probs(&mut g, prefix, h_ea, h_c)?;
                let mut order: Vec<usize> = (0..lp.len()).collect();
                order.sort_by(|&a, &c| lp[c].total_cmp(&lp[a]).then(a.cmp(&c)));
                for &tok in order.iter().take(width) {
                    cands.push((b, tok, score + lp[tok]));
                }
            }
            let len = active[0].0.len();
            cands.sort_by(|x, y| norm(y.2, len).total_cmp(&norm(x.2, len)).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
            let mut next = Vec::with_capacity(width);
            for (b, tok, score) in cands.into_iter().take(width) {
                let mut p = active[b].0.clone();
                if tok == EOS_ID {
                    done.push((p, score, len));
                } else {
                    p.push(tok);
                    if p.len() > self.cfg.max_len {
                        done.push((p, score, len));
                    } else {
                        next.push((p, score));
                    }
                }
            }
            active = next;
        }
        let best = done
            .into_iter()
            .enumerate()
            .max_by(|(i, x), (j, y)| norm(x.1, x.2).total_cmp(&norm(y.1, y.2)).then(j.cmp(i)))
            .map(|(_, x)| x)
            .ok_or_else(|| DfmedError::Invalid("beam search produced no hypothesis".into()))?;
        Ok(self.finish(best.0[1..].to_vec(), best.1))
    }
}

pub fn log_softmax<F: Real>(row: &[F]) -> Vec<f64> {
    let mx = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let lz = row.iter().map(|v| (v.f64() - mx).exp()).sum::<f64>().ln() + mx;
    row.iter().map(|v| v.f64() - lz).collect()
}

/// First index of the maximum.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
