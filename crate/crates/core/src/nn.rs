//! Layers shared by the ECG encoder and the decoder: linear maps with
//! optional low-rank adapters, and pre-norm transformer blocks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use unipact_tensor::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::{CoreError, Result};

/// Forward-pass mode. Training mode enables adapter dropout, drawing masks
/// from the carried generator.
pub struct Ctx {
    rng: Option<ChaCha8Rng>,
}

impl Ctx {
    pub fn eval() -> Self {
        Ctx { rng: None }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        Ctx { rng: Some(rng) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f32,
    pub dropout: f32,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 8, alpha: 16.0, dropout: 0.05 }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank as f32
    }
}

/// Parameter handles of one adapter: `a` is [r, d_in], `b` is [d_out, r].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub cfg: LoraConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
    pub lora: Option<LoraAdapter>,
}

pub(crate) fn normal_tensor(shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    let dist = Normal::new(0.0f32, std).expect("finite std");
    t.data.iter_mut().for_each(|v| *v = dist.sample(rng));
    t
}

impl Linear {
    /// Weight stored as [d_in, d_out] so the forward is `x · W + b`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f32,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = store.insert(format!("{name}.w"), normal_tensor(&[d_in, d_out], std, rng))?;
        let b = store.insert(format!("{name}.b"), Tensor::zeros(&[d_out]))?;
        Ok(Linear { name: name.to_string(), w, b, d_in, d_out, lora: None })
    }

    /// Adds a zero-initialized low-rank branch.
    pub fn attach_lora(&mut self, store: &mut ParamStore, cfg: LoraConfig, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.lora.is_some() {
            return Err(CoreError::invalid(format!("{} already has an adapter", self.name)));
        }
        if cfg.rank == 0 || cfg.rank >= self.d_in.min(self.d_out) {
            return Err(CoreError::invalid(format!(
                "adapter rank {} must be in 1..{} for {} ({}x{})",
                cfg.rank,
                self.d_in.min(self.d_out),
                self.name,
                self.d_in,
                self.d_out
            )));
        }
        if !(0.0..1.0).contains(&cfg.dropout) || !cfg.alpha.is_finite() {
            return Err(CoreError::invalid("adapter dropout must be in [0,1) and alpha finite"));
        }
        let bound = 1.0 / (self.d_in as f32).sqrt();
        let dist = Uniform::new(-bound, bound);
        let mut a = Tensor::zeros(&[cfg.rank, self.d_in]);
        a.data.iter_mut().for_each(|v| *v = dist.sample(rng));
        let a = store.insert(format!("{}.lora_a", self.name), a)?;
        let b = store.insert(format!("{}.lora_b", self.name), Tensor::zeros(&[self.d_out, cfg.rank]))?;
        self.lora = Some(LoraAdapter { a, b, cfg });
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w)?;
        let base = g.add_bias(xw, b)?;
        let Some(ad) = &self.lora else { return Ok(base) };
        let xin = match ctx.rng.as_mut() {
            Some(rng) if ad.cfg.dropout > 0.0 => {
                let keep = 1.0 - ad.cfg.dropout;
                let n = g.value(x).len();
                let mask: Vec<f32> =
                    (0..n).map(|_| if rng.gen::<f32>() < keep { 1.0 / keep } else { 0.0 }).collect();
                g.mul_const(x, mask)?
            }
            _ => x,
        };
        let a = g.param(store, ad.a);
        let bm = g.param(store, ad.b);
        let xa = g.matmul_nt(xin, a)?;
        let xab = g.matmul_nt(xa, bm)?;
        let delta = g.scale(xab, ad.cfg.scaling());
        Ok(g.add(base, delta)?)
    }

    /// Folds the adapter into the base weight: W + s·(B·A)ᵀ, since W is
    /// stored input-major. Returns the merged [d_in, d_out] data.
    pub fn merged_weight(&self, store: &ParamStore) -> Vec<f32> {
        let mut w = store.get(self.w).data.clone();
        if let Some(ad) = &self.lora {
            let a = &store.get(ad.a).data;
            let b = &store.get(ad.b).data;
            let r = ad.cfg.rank;
            let s = ad.cfg.scaling();
            for i in 0..self.d_in {
                for o in 0..self.d_out {
                    let mut acc = 0.0f32;
                    for k in 0..r {
                        acc += b[o * r + k] * a[k * self.d_in + i];
                    }
                    w[i * self.d_out + o] += s * acc;
                }
            }
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        let gain = store.insert(format!("{name}.g"), Tensor::filled(&[d], 1.0))?;
        let bias = store.insert(format!("{name}.b"), Tensor::zeros(&[d]))?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        Ok(g.layer_norm(x, gain, bias)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnMask {
    /// Each query sees every key.
    Full,
    /// Each query sees keys at its own position or earlier.
    Causal,
    /// Each query sees only its own position; a probe mode.
    Diagonal,
}

/// Multi-head attention where the `q` rows are the last rows of the key
/// sequence.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, n_heads: usize, mask: AttnMask) -> Result<Var> {
    let (tq, d) = (g.shape(q)[0], g.shape(q)[1]);
    let tk = g.shape(k)[0];
    if mask == AttnMask::Diagonal {
        if tq != tk {
            return Err(CoreError::invalid("diagonal attention needs equal query and key lengths"));
        }
        return Ok(v);
    }
    if d % n_heads != 0 {
        return Err(CoreError::invalid(format!("width {d} not divisible by {n_heads} heads")));
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (g.cols(q, h * dh, dh)?, g.cols(k, h * dh, dh)?, g.cols(v, h * dh, dh)?)
        };
        let s = g.matmul_nt(qh, kh)?;
        let s = g.scale(s, scale);
        let p = match mask {
            AttnMask::Causal => g.causal_softmax(s)?,
            _ => g.softmax(s),
        };
        heads.push(g.matmul(p, vh)?);
    }
    if heads.len() == 1 {
        Ok(heads[0])
    } else {
        Ok(g.concat_cols(&heads)?)
    }
}

/// Pre-norm transformer block: x + Attn(LN(x)), then + FFN(LN(·)).
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub up: Linear,
    pub down: Linear,
    pub n_heads: usize,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        n_heads: usize,
        d_ff: usize,
        n_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(CoreError::Config(format!("width {d} not divisible by {n_heads} heads")));
        }
        let std_in = 1.0 / (d as f32).sqrt();
        let std_out = std_in / (2.0 * n_layers as f32).sqrt();
        Ok(Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            q: Linear::new(store, &format!("{name}.attn.q"), d, d, std_in, rng)?,
            k: Linear::new(store, &format!("{name}.attn.k"), d, d, std_in, rng)?,
            v: Linear::new(store, &format!("{name}.attn.v"), d, d, std_in, rng)?,
            o: Linear::new(store, &format!("{name}.attn.o"), d, d, std_out, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            up: Linear::new(store, &format!("{name}.ffn.up"), d, d_ff, std_in, rng)?,
            down: Linear::new(
                store,
                &format!("{name}.ffn.down"),
                d_ff,
                d,
                1.0 / (d_ff as f32).sqrt() / (2.0 * n_layers as f32).sqrt(),
                rng,
            )?,
            n_heads,
        })
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 6] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o, &mut self.up, &mut self.down]
    }

    pub fn linears(&self) -> [&Linear; 6] {
        [&self.q, &self.k, &self.v, &self.o, &self.up, &self.down]
    }

    /// Runs the block over a shared prefix and any number of continuations.
    /// Each continuation attends to the prefix and to itself, never to the
    /// other continuations, so the result for every continuation equals a
    /// separate pass over `prefix ++ continuation`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prefix: Option<Var>,
        conts: &[Var],
        mask: AttnMask,
        ctx: &mut Ctx,
    ) -> Result<(Option<Var>, Vec<Var>)> {
        let qkv = |g: &mut Graph, x: Var, ctx: &mut Ctx| -> Result<(Var, Var, Var)> {
            let h = self.ln1.forward(g, store, x)?;
            Ok((
                self.q.forward(g, store, h, ctx)?,
                self.k.forward(g, store, h, ctx)?,
                self.v.forward(g, store, h, ctx)?,
            ))
        };
        let pre = match prefix {
            Some(x) => Some((x, qkv(g, x, ctx)?)),
            None => None,
        };
        let mut cont_qkv = Vec::with_capacity(conts.len());
        for &x in conts {
            cont_qkv.push((x, qkv(g, x, ctx)?));
        }
        let mut out_prefix = None;
        if let Some((x, (q, k, v))) = pre {
            let a = attention(g, q, k, v, self.n_heads, mask)?;
            out_prefix = Some(self.finish(g, store, x, a, ctx)?);
        }
        let mut outs = Vec::with_capacity(conts.len());
        for (x, (q, k, v)) in cont_qkv {
            let (keys, vals) = match &pre {
                Some((_, (_, pk, pv))) => (g.concat_rows(&[*pk, k])?, g.concat_rows(&[*pv, v])?),
                None => (k, v),
            };
            let a = attention(g, q, keys, vals, self.n_heads, mask)?;
            outs.push(self.finish(g, store, x, a, ctx)?);
        }
        Ok((out_prefix, outs))
    }

    fn finish(&self, g: &mut Graph, store: &ParamStore, x: Var, attn: Var, ctx: &mut Ctx) -> Result<Var> {
        let a = self.o.forward(g, store, attn, ctx)?;
        let x1 = g.add(x, a)?;
        let h = self.ln2.forward(g, store, x1)?;
        let u = self.up.forward(g, store, h, ctx)?;
        let u = g.gelu(u);
        let f = self.down.forward(g, store, u, ctx)?;
        Ok(g.add(x1, f)?)
    }
}
