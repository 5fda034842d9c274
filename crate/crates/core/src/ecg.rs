//! Raw 12-lead waveforms, the UPCT file format, patching and the patch
//! transformer encoder.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unipact_tensor::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::nn::{normal_tensor, AttnMask, Block, Ctx, LayerNorm, Linear, LoraConfig};
use crate::{CoreError, Result};

pub const N_LEADS: usize = 12;
const UPCT_MAGIC: &[u8; 4] = b"UPCT";
const UPCT_VERSION: u32 = 1;

/// Waveform of `L` time steps by `C` leads, time-major, in millivolts.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgSignal {
    pub samples: Tensor,
    pub sample_rate: f32,
}

impl EcgSignal {
    pub fn new(samples: Tensor, sample_rate: f32) -> Result<Self> {
        if samples.shape.len() != 2 || samples.shape[1] != N_LEADS {
            return Err(CoreError::invalid(format!(
                "ECG must be [L, {N_LEADS}], got {:?}",
                samples.shape
            )));
        }
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(CoreError::invalid(format!("sample rate {sample_rate} must be positive")));
        }
        Ok(EcgSignal { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leads(&self) -> usize {
        self.samples.shape[1]
    }

    pub fn duration_s(&self) -> f32 {
        self.len() as f32 / self.sample_rate
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.samples.data.iter().position(|v| !v.is_finite()) {
            let c = self.leads();
            return Err(CoreError::invalid(format!(
                "ECG sample at t={}, lead={} is not finite",
                i / c,
                i % c
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.samples.data.len());
        out.extend_from_slice(UPCT_MAGIC);
        out.extend_from_slice(&UPCT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.leads() as u32).to_le_bytes());
        for v in &self.samples.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a UPCT payload. The sample rate is not stored in the file.
    pub fn from_bytes(bytes: &[u8], sample_rate: f32) -> std::result::Result<Self, String> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| "truncated header".to_string())?;
        if &magic != UPCT_MAGIC {
            return Err(format!("bad magic {magic:?}"));
        }
        let mut word = || -> std::result::Result<u32, String> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| "truncated header".to_string())?;
            Ok(u32::from_le_bytes(b))
        };
        let version = word()?;
        if version != UPCT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let (l, c) = (word()? as usize, word()? as usize);
        let body = &bytes[16..];
        if body.len() != 4 * l * c {
            return Err(format!("expected {} payload bytes for {l}x{c}, found {}", 4 * l * c, body.len()));
        }
        let data = body.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let t = Tensor::new(vec![l, c], data).map_err(|e| e.to_string())?;
        EcgSignal::new(t, sample_rate).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path, sample_rate: f32) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_bytes(&bytes, sample_rate).map_err(|d| CoreError::format(path, d))
    }

    /// Per-lead z-score. Leads with (near) zero spread are only centered.
    pub fn normalized(&self) -> EcgSignal {
        let (l, c) = (self.len(), self.leads());
        let mut out = self.samples.clone();
        for lead in 0..c {
            let mean = (0..l).map(|t| self.samples.data[t * c + lead] as f64).sum::<f64>() / l as f64;
            let var = (0..l)
                .map(|t| {
                    let d = self.samples.data[t * c + lead] as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / l as f64;
            let sd = var.sqrt();
            let inv = if sd > 1e-6 { 1.0 / sd } else { 1.0 };
            for t in 0..l {
                let v = &mut out.data[t * c + lead];
                *v = ((*v as f64 - mean) * inv) as f32;
            }
        }
        EcgSignal { samples: out, sample_rate: self.sample_rate }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch_len: usize,
    pub d_ecg: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub max_patches: usize,
    pub attn: AttnMask,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch_len: 50,
            d_ecg: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_mult: 4,
            max_patches: 128,
            attn: AttnMask::Full,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 || self.d_ecg == 0 || self.n_layers == 0 || self.ffn_mult == 0 {
            return Err(CoreError::Config("encoder sizes must be positive".into()));
        }
        if self.n_heads == 0 || !self.d_ecg.is_multiple_of(self.n_heads) {
            return Err(CoreError::Config(format!(
                "encoder width {} not divisible by {} heads",
                self.d_ecg, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn n_patches(&self, l: usize) -> Result<usize> {
        if self.patch_len == 0 || !l.is_multiple_of(self.patch_len) || l == 0 {
            return Err(CoreError::invalid(format!(
                "signal length L={l} is not divisible by patch_len={}",
                self.patch_len
            )));
        }
        Ok(l / self.patch_len)
    }
}

/// Splits [L, C] into N = L/patch_len rows of patch_len·C values, each row
/// holding one time window with leads interleaved as stored.
pub fn patchify(sig: &EcgSignal, cfg: &EncoderConfig) -> Result<Tensor> {
    let n = cfg.n_patches(sig.len())?;
    let width = cfg.patch_len * sig.leads();
    // Time-major storage makes each patch a contiguous run.
    Ok(Tensor::new(vec![n, width], sig.samples.data.clone())?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, leads: usize) -> Result<Tensor> {
    let total = patches.numel();
    if leads == 0 || !total.is_multiple_of(leads) {
        return Err(CoreError::invalid("patch width incompatible with lead count"));
    }
    Ok(Tensor::new(vec![total / leads, leads], patches.data.clone())?)
}

/// Encoder output: one d_ecg vector per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgEmbedding {
    pub tokens: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcgEncoder {
    pub cfg: EncoderConfig,
    pub patch: Linear,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

impl EcgEncoder {
    pub fn new(store: &mut ParamStore, cfg: EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_ecg;
        let d_in = cfg.patch_len * N_LEADS;
        let patch = Linear::new(store, "enc.patch", d_in, d, 1.0 / (d_in as f32).sqrt(), rng)?;
        let pos = store.insert("enc.pos", normal_tensor(&[cfg.max_patches, d], 0.1, rng))?;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            blocks.push(Block::new(store, &format!("enc.blocks.{i}"), d, cfg.n_heads, d * cfg.ffn_mult, cfg.n_layers, rng)?);
        }
        let ln_f = LayerNorm::new(store, "enc.ln_f", d)?;
        Ok(EcgEncoder { cfg, patch, pos, blocks, ln_f })
    }

    /// Adds adapters to every attention and feed-forward linear map.
    /// Returns the number of adapters added.
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

    /// Graph forward over normalized patches [N, patch_len·C].
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, patches: Var, ctx: &mut Ctx) -> Result<Var> {
        let n = g.shape(patches)[0];
        if n > self.cfg.max_patches {
            return Err(CoreError::invalid(format!(
                "{n} patches exceed the encoder's {} positions",
                self.cfg.max_patches
            )));
        }
        let x = self.patch.forward(g, store, patches, ctx)?;
        let pos = g.param(store, self.pos);
        let pos = g.rows(pos, 0, n)?;
        let mut x = g.add(x, pos)?;
        for b in &self.blocks {
            let (out, _) = b.forward(g, store, Some(x), &[], self.cfg.attn, ctx)?;
            x = out.expect("prefix present");
        }
        self.ln_f.forward(g, store, x)
    }

    /// Normalizes, patches and encodes one signal in evaluation mode.
    pub fn encode(&self, sig: &EcgSignal, store: &ParamStore) -> Result<EcgEmbedding> {
        sig.check_finite()?;
        let patches = patchify(&sig.normalized(), &self.cfg)?;
        let mut g = Graph::new();
        let x = g.leaf(patches);
        let y = self.forward(&mut g, store, x, &mut Ctx::eval())?;
        Ok(EcgEmbedding { tokens: g.to_tensor(y) })
    }
}

/// Normalized patches ready for the encoder.
pub fn prepare(sig: &EcgSignal, cfg: &EncoderConfig) -> Result<Tensor> {
    sig.check_finite()?;
    patchify(&sig.normalized(), cfg)
}
