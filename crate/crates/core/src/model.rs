//! Projector, decoder, fused input assembly, answer scoring and the
//! checkpoint format.

use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unipact_tensor::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::ecg::{EcgEncoder, EncoderConfig};
use crate::nn::{normal_tensor, AttnMask, Block, Ctx, LayerNorm, Linear, LoraConfig};
use crate::tokenizer::{Vocab, EOS, NO, YES};
use crate::{CoreError, Result};

/// Periods of the value code given to numeric tokens.
const MAGNITUDE_PERIODS: [f64; 8] = [2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0];
const MAGNITUDE_GAIN: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub d_llm: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { vocab_size: 0, d_llm: 128, n_layers: 2, n_heads: 4, ffn_mult: 4, max_len: 256 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Projector hidden width; 0 means "same as d_llm".
    pub proj_hidden: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig { vocab_size, ..DecoderConfig::default() },
            proj_hidden: 0,
            seed,
        }
    }

    pub fn proj_hidden(&self) -> usize {
        if self.proj_hidden == 0 {
            self.decoder.d_llm
        } else {
            self.proj_hidden
        }
    }
}

/// Two-layer MLP from encoder width to decoder width.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Projector {
    pub fn new(store: &mut ParamStore, d_ecg: usize, hidden: usize, d_llm: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Projector {
            fc1: Linear::new(store, "proj.fc1", d_ecg, hidden, 1.0 / (d_ecg as f32).sqrt(), rng)?,
            fc2: Linear::new(store, "proj.fc2", hidden, d_llm, 1.0 / (hidden as f32).sqrt(), rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var, ctx: &mut Ctx) -> Result<Var> {
        let width = g.shape(h)[1];
        if width != self.fc1.d_in {
            return Err(CoreError::invalid(format!(
                "projector expects width {}, got {width}",
                self.fc1.d_in
            )));
        }
        let x = self.fc1.forward(g, store, h, ctx)?;
        let x = g.gelu(x);
        self.fc2.forward(g, store, x, ctx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: DecoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.vocab_size == 0 || cfg.d_llm == 0 || cfg.n_layers == 0 || cfg.max_len == 0 {
            return Err(CoreError::Config("decoder sizes must be positive".into()));
        }
        let d = cfg.d_llm;
        let tok_emb = store.insert("dec.tok_emb", normal_tensor(&[cfg.vocab_size, d], 0.1, rng))?;
        let pos_emb = store.insert("dec.pos_emb", normal_tensor(&[cfg.max_len, d], 0.02, rng))?;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            blocks.push(Block::new(store, &format!("dec.blocks.{i}"), d, cfg.n_heads, d * cfg.ffn_mult, cfg.n_layers, rng)?);
        }
        let ln_f = LayerNorm::new(store, "dec.ln_f", d)?;
        Ok(Decoder { cfg, tok_emb, pos_emb, blocks, ln_f })
    }

    pub fn embed(&self, g: &mut Graph, store: &ParamStore, ids: &[u32]) -> Result<Var> {
        let table = g.param(store, self.tok_emb);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        Ok(g.gather_rows(table, &idx)?)
    }

    fn add_positions(&self, g: &mut Graph, store: &ParamStore, x: Var, start: usize) -> Result<Var> {
        let len = g.shape(x)[0];
        if start + len > self.cfg.max_len {
            return Err(CoreError::invalid(format!(
                "sequence of {} positions exceeds the decoder's {}",
                start + len,
                self.cfg.max_len
            )));
        }
        let pos = g.param(store, self.pos_emb);
        let p = g.rows(pos, start, len)?;
        Ok(g.add(x, p)?)
    }

    /// Final hidden states for a shared prefix and independent
    /// continuations, each continuation placed right after the prefix.
    pub fn hidden(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prefix: Option<Var>,
        conts: &[Var],
        ctx: &mut Ctx,
    ) -> Result<(Option<Var>, Vec<Var>)> {
        let plen = prefix.map(|p| g.shape(p)[0]).unwrap_or(0);
        let mut p = match prefix {
            Some(x) => Some(self.add_positions(g, store, x, 0)?),
            None => None,
        };
        let mut cs = Vec::with_capacity(conts.len());
        for &c in conts {
            cs.push(self.add_positions(g, store, c, plen)?);
        }
        for b in &self.blocks {
            let (np, ncs) = b.forward(g, store, p, &cs, AttnMask::Causal, ctx)?;
            p = np;
            cs = ncs;
        }
        let p = match p {
            Some(x) => Some(self.ln_f.forward(g, store, x)?),
            None => None,
        };
        let mut outs = Vec::with_capacity(cs.len());
        for c in cs {
            outs.push(self.ln_f.forward(g, store, c)?);
        }
        Ok((p, outs))
    }

    /// Tied output head.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let table = g.param(store, self.tok_emb);
        Ok(g.matmul_nt(h, table)?)
    }

    pub fn attach_lora(&mut self, store: &mut ParamStore, cfg: LoraConfig, rng: &mut ChaCha8Rng) -> Result<usize> {
        let mut n = 0;
        for b in &mut self.blocks {
            for lin in b.linears_mut() {
                lin.attach_lora(store, cfg, rng)?;
                n += 1;
            }
        }
        Ok(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Ecg,
    Prompt,
    Question,
    Answer,
}

/// The unified input sequence: projected ECG rows, then prompt, question
/// and answer token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedInput {
    pub embeddings: Var,
    pub segments: Vec<Segment>,
    pub answer_start: usize,
}

impl FusedInput {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn n_ecg(&self) -> usize {
        self.segments.iter().take_while(|s| **s == Segment::Ecg).count()
    }
}

/// Which stages have touched the weights, plus the vocabulary identity.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub stages: Vec<String>,
    pub vocab_fingerprint: String,
}

impl ModelMeta {
    pub fn has_stage(&self, stage: &str) -> bool {
        self.stages.iter().any(|s| s == stage)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointEcho {
    config: ModelConfig,
    lora: Option<LoraConfig>,
    meta: ModelMeta,
}

#[derive(Debug, Clone)]
pub struct FusionModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EcgEncoder,
    pub projector: Projector,
    pub decoder: Decoder,
    pub lora: Option<LoraConfig>,
    pub meta: ModelMeta,
}

/// exp(z_yes) / (exp(z_yes) + exp(z_no)), computed stably.
pub fn yes_probability(z_yes: f32, z_no: f32) -> f64 {
    let d = z_yes as f64 - z_no as f64;
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

const CKPT_MAGIC: &[u8; 4] = b"UPCK";
const CKPT_VERSION: u32 = 1;
const CONFIG_SECTION: &str = "__config__";

impl FusionModel {
    pub fn new(config: ModelConfig, vocab_fingerprint: impl Into<String>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = EcgEncoder::new(&mut store, config.encoder, &mut rng)?;
        let projector = Projector::new(
            &mut store,
            config.encoder.d_ecg,
            config.proj_hidden(),
            config.decoder.d_llm,
            &mut rng,
        )?;
        let decoder = Decoder::new(&mut store, config.decoder, &mut rng)?;
        store.set_trainable(|_| false);
        Ok(FusionModel {
            config,
            store,
            encoder,
            projector,
            decoder,
            lora: None,
            meta: ModelMeta { stages: Vec::new(), vocab_fingerprint: vocab_fingerprint.into() },
        })
    }

    /// Wraps every attention and feed-forward linear map of the encoder and
    /// the decoder with a zero-initialized adapter. Returns the adapter count.
    pub fn add_lora(&mut self, cfg: LoraConfig) -> Result<usize> {
        if self.lora.is_some() {
            return Err(CoreError::invalid("model already carries adapters"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x4c6f_5241);
        let mut probe = self.clone();
        let n = probe.encoder.attach_lora(&mut probe.store, cfg, &mut rng)?
            + probe.decoder.attach_lora(&mut probe.store, cfg, &mut rng)?;
        probe.lora = Some(cfg);
        *self = probe;
        Ok(n)
    }

    /// Gives every numeric token of `vocab` an embedding built from a
    /// multi-scale sinusoidal code of its value, so that nearby values start
    /// out close to each other. Returns the number of rows rewritten.
    pub fn encode_number_magnitudes(&mut self, vocab: &Vocab) -> Result<usize> {
        let d = self.config.decoder.d_llm;
        if vocab.len() != self.config.decoder.vocab_size {
            return Err(CoreError::Mismatch(format!(
                "vocabulary has {} tokens, decoder expects {}",
                vocab.len(),
                self.config.decoder.vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x4e55_4d42);
        let basis = normal_tensor(&[2 * MAGNITUDE_PERIODS.len(), d], 1.0 / (d as f32).sqrt(), &mut rng);
        let table = &mut self.store.get_mut(self.decoder.tok_emb).data;
        let mut n = 0;
        for (id, tok) in vocab.tokens().iter().enumerate() {
            let Ok(v) = tok.parse::<f64>() else { continue };
            let row = &mut table[id * d..(id + 1) * d];
            row.iter_mut().for_each(|x| *x *= 0.5);
            for (k, period) in MAGNITUDE_PERIODS.iter().enumerate() {
                let w = std::f64::consts::TAU * v / period;
                for (j, f) in [w.sin(), w.cos()].into_iter().enumerate() {
                    let b = &basis.data[(2 * k + j) * d..(2 * k + j + 1) * d];
                    row.iter_mut().zip(b).for_each(|(x, &bv)| *x += MAGNITUDE_GAIN * f as f32 * bv);
                }
            }
            n += 1;
        }
        Ok(n)
    }

    pub fn adapter_count(&self) -> usize {
        self.encoder
            .blocks
            .iter()
            .chain(&self.decoder.blocks)
            .flat_map(|b| b.linears())
            .filter(|l| l.lora.is_some())
            .count()
    }

    /// Encoder then projector over normalized patches: [N, d_llm].
    pub fn ecg_tokens(&self, g: &mut Graph, patches: &Tensor, ctx: &mut Ctx) -> Result<Var> {
        let x = g.leaf(patches.clone());
        let h = self.encoder.forward(g, &self.store, x, ctx)?;
        self.projector.forward(g, &self.store, h, ctx)
    }

    pub fn assemble_input(
        &self,
        g: &mut Graph,
        ecg: Option<Var>,
        prompt_ids: &[u32],
        question_ids: &[u32],
        answer_ids: &[u32],
    ) -> Result<FusedInput> {
        let mut parts = Vec::new();
        let mut segments = Vec::new();
        if let Some(e) = ecg {
            let shape = g.shape(e).to_vec();
            if shape.len() != 2 || shape[1] != self.config.decoder.d_llm {
                return Err(CoreError::invalid(format!(
                    "ECG rows must be [N, {}], got {shape:?}",
                    self.config.decoder.d_llm
                )));
            }
            parts.push(e);
            segments.extend(std::iter::repeat_n(Segment::Ecg, shape[0]));
        }
        for (ids, seg) in [(prompt_ids, Segment::Prompt), (question_ids, Segment::Question), (answer_ids, Segment::Answer)] {
            if !ids.is_empty() {
                self.check_ids(ids)?;
                parts.push(self.decoder.embed(g, &self.store, ids)?);
                segments.extend(std::iter::repeat_n(seg, ids.len()));
            }
        }
        if parts.is_empty() {
            return Err(CoreError::invalid("empty input sequence"));
        }
        let embeddings = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        let answer_start = segments.len() - answer_ids.len();
        Ok(FusedInput { embeddings, segments, answer_start })
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        let v = self.config.decoder.vocab_size;
        match ids.iter().find(|&&i| i as usize >= v) {
            Some(bad) => Err(CoreError::invalid(format!("token id {bad} out of range for vocabulary of {v}"))),
            None => Ok(()),
        }
    }

    /// Causal logits for every position: [len, V].
    pub fn forward_logits(&self, g: &mut Graph, f: &FusedInput, ctx: &mut Ctx) -> Result<Var> {
        let (h, _) = self.decoder.hidden(g, &self.store, Some(f.embeddings), &[], ctx)?;
        self.decoder.logits(g, &self.store, h.expect("prefix present"))
    }

    /// Probability of "Yes" against "No" at the position preceding the
    /// answer (the last position when the input has no answer).
    pub fn answer_score(&self, g: &mut Graph, f: &FusedInput) -> Result<f64> {
        let logits = self.forward_logits(g, f, &mut Ctx::eval())?;
        let v = self.config.decoder.vocab_size;
        let row = f.answer_start.checked_sub(1).ok_or_else(|| CoreError::invalid("answer at position 0"))?;
        let z = &g.value(logits)[row * v..(row + 1) * v];
        Ok(yes_probability(z[YES as usize], z[NO as usize]))
    }

    fn prefix(&self, g: &mut Graph, ecg: Option<&Tensor>, prompt_ids: &[u32], ctx: &mut Ctx) -> Result<Option<Var>> {
        let e = match ecg {
            Some(p) => Some(self.ecg_tokens(g, p, ctx)?),
            None => None,
        };
        if e.is_none() && prompt_ids.is_empty() {
            return Ok(None);
        }
        Ok(Some(self.assemble_input(g, e, prompt_ids, &[], &[])?.embeddings))
    }

    /// Scores several questions that share one ECG and prompt, running the
    /// shared part once.
    pub fn score_questions(&self, ecg: Option<&Tensor>, prompt_ids: &[u32], questions: &[Vec<u32>]) -> Result<Vec<f64>> {
        if questions.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let mut ctx = Ctx::eval();
        let prefix = self.prefix(&mut g, ecg, prompt_ids, &mut ctx)?;
        let mut conts = Vec::with_capacity(questions.len());
        for q in questions {
            if q.is_empty() {
                return Err(CoreError::invalid("empty question"));
            }
            self.check_ids(q)?;
            conts.push(self.decoder.embed(&mut g, &self.store, q)?);
        }
        let (_, hs) = self.decoder.hidden(&mut g, &self.store, prefix, &conts, &mut ctx)?;
        let mut lasts = Vec::with_capacity(hs.len());
        for (h, q) in hs.into_iter().zip(questions) {
            lasts.push(g.rows(h, q.len() - 1, 1)?);
        }
        let last = g.concat_rows(&lasts)?;
        let logits = self.decoder.logits(&mut g, &self.store, last)?;
        let v = self.config.decoder.vocab_size;
        let z = g.value(logits);
        Ok((0..questions.len())
            .map(|i| yes_probability(z[i * v + YES as usize], z[i * v + NO as usize]))
            .collect())
    }

    pub fn score(&self, ecg: Option<&Tensor>, prompt_ids: &[u32], question_ids: &[u32]) -> Result<f64> {
        Ok(self.score_questions(ecg, prompt_ids, &[question_ids.to_vec()])?[0])
    }

    /// Greedy decoding after the question; stops at EOS or `max_tokens`.
    /// The EOS token is not included in the result.
    pub fn generate(
        &self,
        ecg: Option<&Tensor>,
        prompt_ids: &[u32],
        question_ids: &[u32],
        max_tokens: usize,
    ) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        let v = self.config.decoder.vocab_size;
        while out.len() < max_tokens {
            let mut g = Graph::new();
            let mut ctx = Ctx::eval();
            let e = match ecg {
                Some(p) => Some(self.ecg_tokens(&mut g, p, &mut ctx)?),
                None => None,
            };
            let mut q = question_ids.to_vec();
            q.extend_from_slice(&out);
            let f = self.assemble_input(&mut g, e, prompt_ids, &q, &[])?;
            let (h, _) = self.decoder.hidden(&mut g, &self.store, Some(f.embeddings), &[], &mut ctx)?;
            let last = g.rows(h.expect("prefix present"), f.len() - 1, 1)?;
            let logits = self.decoder.logits(&mut g, &self.store, last)?;
            let z = &g.value(logits)[..v];
            let mut best = 0usize;
            for (i, &x) in z.iter().enumerate() {
                if x > z[best] {
                    best = i;
                }
            }
            if best as u32 == EOS {
                break;
            }
            out.push(best as u32);
        }
        Ok(out)
    }

    // ---- checkpoints ----------------------------------------------------

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let mut section = |name: &str, dims: &[usize], data: &mut dyn Iterator<Item = f32>| {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for &d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (_, name, t) in self.store.iter() {
            section(name, &t.shape, &mut t.data.iter().copied());
        }
        let echo = CheckpointEcho { config: self.config, lora: self.lora, meta: self.meta.clone() };
        let json = serde_json::to_vec(&echo).map_err(|e| CoreError::invalid(e.to_string()))?;
        // One byte per value keeps the echo inside the tensor-section layout.
        section(CONFIG_SECTION, &[json.len()], &mut json.iter().map(|&b| b as f32));
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| "truncated header")?;
        if &magic != CKPT_MAGIC {
            return Err(format!("bad magic {magic:?}"));
        }
        let read_u32 = |r: &mut &[u8]| -> std::result::Result<u32, String> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| "truncated section".to_string())?;
            Ok(u32::from_le_bytes(b))
        };
        let version = read_u32(&mut r)?;
        if version != CKPT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let mut sections: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
        while !r.is_empty() {
            let n = read_u32(&mut r)? as usize;
            if r.len() < n {
                return Err("truncated section name".into());
            }
            let name = std::str::from_utf8(&r[..n]).map_err(|_| "section name is not UTF-8")?.to_string();
            r = &r[n..];
            let ndim = read_u32(&mut r)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(read_u32(&mut r)? as usize);
            }
            let count: usize = dims.iter().product();
            if r.len() < 4 * count {
                return Err(format!("truncated payload for {name}"));
            }
            let data = r[..4 * count]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            r = &r[4 * count..];
            sections.push((name, dims, data));
        }
        let (name, _, echo) = sections.pop().ok_or("no sections")?;
        if name != CONFIG_SECTION {
            return Err("missing trailing config section".into());
        }
        let json: Vec<u8> = echo.iter().map(|&v| v as u8).collect();
        let echo: CheckpointEcho = serde_json::from_slice(&json).map_err(|e| format!("config section: {e}"))?;
        let mut model = FusionModel::new(echo.config, echo.meta.vocab_fingerprint.clone()).map_err(|e| e.to_string())?;
        if let Some(l) = echo.lora {
            model.add_lora(l).map_err(|e| e.to_string())?;
        }
        model.meta = echo.meta;
        if sections.len() != model.store.len() {
            return Err(format!(
                "checkpoint holds {} tensors, configuration implies {}",
                sections.len(),
                model.store.len()
            ));
        }
        for (name, dims, data) in sections {
            let id = model.store.id(&name).ok_or_else(|| format!("unexpected tensor {name}"))?;
            let t = model.store.get_mut(id);
            if t.shape != dims {
                return Err(format!("tensor {name}: shape {dims:?}, expected {:?}", t.shape));
            }
            t.data = data;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_checkpoint_bytes()?;
        std::fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes).map_err(|d| CoreError::format(path, d))
    }

    /// Names of parameters belonging to the frozen backbone (encoder and
    /// decoder weights other than adapters).
    pub fn is_base_param(name: &str) -> bool {
        (name.starts_with("enc.") || name.starts_with("dec.")) && !name.contains(".lora_")
    }

    pub fn is_projector_param(name: &str) -> bool {
        name.starts_with("proj.")
    }

    pub fn is_adapter_param(name: &str) -> bool {
        name.contains(".lora_")
    }

    /// Copies every tensor whose name matches `pred`.
    pub fn snapshot(&self, pred: impl Fn(&str) -> bool) -> Vec<(String, Tensor)> {
        self.store
            .iter()
            .filter(|(_, n, _)| pred(n))
            .map(|(_, n, t)| {
                let mut t = t.clone();
                t.grad = None;
                (n.to_string(), t)
            })
            .collect()
    }

    pub fn restore(&mut self, snap: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in snap {
            let id = self.store.id(name).ok_or_else(|| CoreError::invalid(format!("no parameter {name}")))?;
            self.store.get_mut(id).data.clone_from(&t.data);
        }
        Ok(())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.store.by_name(name)
    }
}
