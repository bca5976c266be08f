//! Layers built on the tape: linear maps, embeddings, attention, GRU, FFN,
//! and a small transformer encoder stack.

use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::{ParamId, ParamStore, Real, Tensor};
use crate::error::{DfmedError, Result};

// ── initialisation ──────────────────────────────────────────────────

pub fn xavier_uniform<F: Real, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| F::of(rng.gen_range(-bound..bound))).collect();
    Tensor { shape: vec![fan_in, fan_out], data, requires_grad: true, grad: None }
}

/// N(0, std^2) via Box-Muller.
pub fn normal<F: Real, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            F::of(std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos())
        })
        .collect();
    Tensor { shape: shape.to_vec(), data, requires_grad: true, grad: None }
}

pub const EMBED_STD: f64 = 0.02;

/// Sinusoidal position table, `len x dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / dim as f64);
            out[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

// ── linear / embedding / norm ───────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), xavier_uniform(rng, d_in, d_out))?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(&[1, d_out]))?)
        } else {
            None
        };
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        vocab: usize,
        dim: usize,
    ) -> Result<Self> {
        let table = store.add(name, normal(rng, &[vocab, dim], EMBED_STD))?;
        Ok(Embedding { table, vocab, dim })
    }

    pub fn lookup<F: Real>(&self, g: &mut Graph<'_, F>, ids: &[usize]) -> Result<Var> {
        let t = g.param(self.table);
        g.gather_rows(t, ids)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Result<Self> {
        let ones = Tensor::new(vec![1, dim], vec![F::one(); dim])?;
        let gain = store.add(format!("{name}.g"), ones)?;
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[1, dim]))?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

// ── feed-forward ────────────────────────────────────────────────────

/// Two linear maps with ReLU between; hidden width is `4 * dim`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<F: Real, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, name: &str, dim: usize) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(store, rng, &format!("{name}.up"), dim, 4 * dim, true)?,
            down: Linear::new(store, rng, &format!("{name}.down"), 4 * dim, dim, true)?,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        if g.cols(x) != self.up.d_in {
            return Err(DfmedError::shape(
                "feed_forward",
                format!("input width {} vs model dim {}", g.cols(x), self.up.d_in),
            ));
        }
        let h = self.up.forward(g, x)?;
        let h = g.relu(h);
        self.down.forward(g, h)
    }
}

// ── attention ───────────────────────────────────────────────────────

/// `softmax(q k^T / sqrt(d_head)) v`, split over `heads` column groups.
///
/// An empty key set yields zeros of shape `[nq, dv]`. `mask` is `nq x nk`
/// and shared by all heads.
pub fn scaled_dot_attention<F: Real>(
    g: &mut Graph<'_, F>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let (nq, d) = g.shape(q);
    let (nk, dk) = g.shape(k);
    let (nv, dv) = g.shape(v);
    if d != dk {
        return Err(DfmedError::shape("attention", format!("query dim {d} vs key dim {dk}")));
    }
    if nk != nv {
        return Err(DfmedError::shape("attention", format!("{nk} keys vs {nv} values")));
    }
    if heads == 0 || d % heads != 0 || dv % heads != 0 {
        return Err(DfmedError::shape("attention", format!("dims {d}/{dv} not divisible by {heads} heads")));
    }
    if nk == 0 {
        return Ok(g.zeros(nq, dv));
    }
    let dh = d / heads;
    let dvh = dv / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, h * dh, dh)?, g.slice_cols(k, h * dh, dh)?, g.slice_cols(v, h * dvh, dvh)?)
        };
        let s = g.matmul_t(qh, kh)?;
        let s = g.scale(s, scale);
        let a = g.softmax_rows(s, mask)?;
        outs.push(g.matmul(a, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

/// Lower-triangular `n x n` mask (position i sees j <= i).
pub fn causal_mask(n: usize) -> Vec<bool> {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            m[i * n + j] = true;
        }
    }
    m
}

/// Attention with learned Q/K/V/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Option<Linear>,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        d_query: usize,
        d_kv: usize,
        dim: usize,
        heads: usize,
        out_proj: bool,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(DfmedError::Invalid(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, rng, &format!("{name}.q"), d_query, dim, false)?,
            k: Linear::new(store, rng, &format!("{name}.k"), d_kv, dim, false)?,
            v: Linear::new(store, rng, &format!("{name}.v"), d_kv, dim, false)?,
            o: if out_proj { Some(Linear::new(store, rng, &format!("{name}.o"), dim, dim, true)?) } else { None },
            heads,
        })
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        query: Var,
        keys: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        if g.rows(keys) == 0 {
            let nq = g.rows(query);
            return Ok(g.zeros(nq, self.v.d_out));
        }
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, keys)?;
        let v = self.v.forward(g, keys)?;
        let a = scaled_dot_attention(g, q, k, v, self.heads, mask)?;
        match &self.o {
            Some(o) => o.forward(g, a),
            None => Ok(a),
        }
    }
}

// ── GRU ─────────────────────────────────────────────────────────────

/// Standard GRU cell:
/// `z = σ(x Wz + h Uz + bz)`, `r = σ(x Wr + h Ur + br)`,
/// `ĥ = tanh(x Wh + (r ⊙ h) Uh + bh)`, `h' = (1 - z) ⊙ h + z ⊙ ĥ`.
#[derive(Clone, Debug)]
pub struct GruCell {
    /// input weights for [z | r | ĥ], `d_in x 3h`
    pub w: ParamId,
    /// recurrent weights for [z | r], `h x 2h`
    pub u_zr: ParamId,
    /// recurrent weights for the candidate, `h x h`
    pub u_h: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        hidden: usize,
    ) -> Result<Self> {
        // Xavier per gate block, then laid side by side.
        let mut w = Tensor::<F>::zeros(&[d_in, 3 * hidden]);
        for gate in 0..3 {
            let blk: Tensor<F> = xavier_uniform(rng, d_in, hidden);
            for i in 0..d_in {
                for j in 0..hidden {
                    w.data[i * 3 * hidden + gate * hidden + j] = blk.data[i * hidden + j];
                }
            }
        }
        let mut u_zr = Tensor::<F>::zeros(&[hidden, 2 * hidden]);
        for gate in 0..2 {
            let blk: Tensor<F> = xavier_uniform(rng, hidden, hidden);
            for i in 0..hidden {
                for j in 0..hidden {
                    u_zr.data[i * 2 * hidden + gate * hidden + j] = blk.data[i * hidden + j];
                }
            }
        }
        Ok(GruCell {
            w: store.add(format!("{name}.w"), w)?,
            u_zr: store.add(format!("{name}.u_zr"), u_zr)?,
            u_h: store.add(format!("{name}.u_h"), xavier_uniform(rng, hidden, hidden))?,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[1, 3 * hidden]))?,
            d_in,
            hidden,
        })
    }

    /// Row-batched: `x` is `[n, d_in]`, `h_prev` is `[n, hidden]`.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, h_prev: Var) -> Result<Var> {
        let n = g.rows(x);
        if g.cols(x) != self.d_in {
            return Err(DfmedError::shape("gru_cell", format!("input {:?} vs [{n}, {}]", g.shape(x), self.d_in)));
        }
        if g.shape(h_prev) != (n, self.hidden) {
            return Err(DfmedError::shape(
                "gru_cell",
                format!("hidden {:?} vs [{n}, {}]", g.shape(h_prev), self.hidden),
            ));
        }
        let hd = self.hidden;
        let w = g.param(self.w);
        let b = g.param(self.b);
        let u_zr = g.param(self.u_zr);
        let u_h = g.param(self.u_h);
        let xw = g.matmul(x, w)?;
        let xw = g.add_row(xw, b)?;
        let hu = g.matmul(h_prev, u_zr)?;
        let x_zr = g.slice_cols(xw, 0, 2 * hd)?;
        let zr = g.add(x_zr, hu)?;
        let zr = g.sigmoid(zr);
        let z = g.slice_cols(zr, 0, hd)?;
        let r = g.slice_cols(zr, hd, hd)?;
        let rh = g.mul(r, h_prev)?;
        let rh_u = g.matmul(rh, u_h)?;
        let x_h = g.slice_cols(xw, 2 * hd, hd)?;
        let cand = g.add(x_h, rh_u)?;
        let cand = g.tanh(cand);
        // h' = h + z ⊙ (ĥ - h)
        let diff = g.sub(cand, h_prev)?;
        let step = g.mul(z, diff)?;
        g.add(h_prev, step)
    }
}

// ── transformer encoder ─────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, dim, dim, heads, true)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim)?,
        })
    }

    /// Pre-norm residual block.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let a = self.attn.forward(g, h, h, mask)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        g.add(x, f)
    }
}

/// Token embedding plus a stack of self-attention layers.
///
/// With zero layers the output is the raw token embeddings; otherwise
/// sinusoidal positions are added before the first layer and a final
/// layer norm is applied.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub embed: Embedding,
    pub layers: Vec<EncoderLayer>,
    pub final_ln: Option<LayerNorm>,
    pub dim: usize,
    pub causal: bool,
}

impl TransformerEncoder {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        vocab: usize,
        dim: usize,
        layers: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Self> {
        let embed = Embedding::new(store, rng, &format!("{name}.embed"), vocab, dim)?;
        let layers = (0..layers)
            .map(|i| EncoderLayer::new(store, rng, &format!("{name}.layer{i}"), dim, heads))
            .collect::<Result<Vec<_>>>()?;
        let final_ln = if layers.is_empty() { None } else { Some(LayerNorm::new(store, &format!("{name}.ln_f"), dim)?) };
        Ok(TransformerEncoder { embed, layers, final_ln, dim, causal })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, ids: &[usize]) -> Result<Var> {
        let mut x = self.embed.lookup(g, ids)?;
        if self.layers.is_empty() || ids.is_empty() {
            return Ok(x);
        }
        let pe: Vec<F> = sinusoidal_positions(ids.len(), self.dim).into_iter().map(F::of).collect();
        let pe = g.constant(pe, ids.len(), self.dim)?;
        x = g.add(x, pe)?;
        let mask = if self.causal { Some(causal_mask(ids.len())) } else { None };
        for layer in &self.layers {
            x = layer.forward(g, x, mask.as_deref())?;
        }
        match &self.final_ln {
            Some(ln) => ln.forward(g, x),
            None => Ok(x),
        }
    }
}
