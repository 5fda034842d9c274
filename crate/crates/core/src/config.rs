//! Run configuration: plain-text `key = value` lines under `[section]`
//! headers. Every run directory holds the exact echo of the config used.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::TextSetup;
use crate::ecg::EncoderConfig;
use crate::ehr::{DEFAULT_ROLE, DEFAULT_TASK_DESC};
use crate::model::{DecoderConfig, ModelConfig};
use crate::nn::LoraConfig;
use crate::synth::CohortConfig;
use crate::training::{PretrainConfig, Stage, StageConfig};
use crate::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub out_dir: String,
    pub cohort: CohortConfig,
    pub role: String,
    pub task_desc: String,
    pub vocab_max: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub proj_hidden: usize,
    pub warmup_enabled: bool,
    pub warmup: PretrainConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    /// Training patients held out for checkpoint selection.
    pub val_patients: usize,
    pub bootstrap: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut stage1 = StageConfig::new(Stage::One);
        stage1.epochs = 1;
        stage1.tasks_per_patient = 8;
        let mut stage2 = StageConfig::new(Stage::Two);
        stage2.epochs = 5;
        stage2.tasks_per_patient = 8;
        stage2.lr = 2e-3;
        RunConfig {
            seed: 42,
            threads: 1,
            out_dir: "runs/default".into(),
            cohort: CohortConfig::default(),
            role: DEFAULT_ROLE.into(),
            task_desc: DEFAULT_TASK_DESC.into(),
            vocab_max: 4096,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            proj_hidden: 0,
            warmup_enabled: true,
            warmup: PretrainConfig { epochs: 3, ..PretrainConfig::default() },
            stage1,
            stage2,
            val_patients: 20,
            bootstrap: 1000,
        }
    }
}

fn parse_val<T: FromStr>(section: &str, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| CoreError::Config(format!("[{section}] {key}: cannot parse {v:?}")))
}

fn parse_bool(section: &str, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(CoreError::Config(format!("[{section}] {key}: expected true or false, got {v:?}"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        let mut unknown = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CoreError::Config(format!("line {}: expected key = value, got {line:?}", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !cfg.set(&section, k, v)? {
                unknown.push(if section.is_empty() { k.to_string() } else { format!("{section}.{k}") });
            }
        }
        if !unknown.is_empty() {
            return Err(CoreError::Config(format!("unknown key(s): {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one entry; returns false for an unknown key.
    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<bool> {
        let s = section;
        match (section, key) {
            ("run", "seed") => self.seed = parse_val(s, key, v)?,
            ("run", "threads") => self.threads = parse_val(s, key, v)?,
            ("run", "out_dir") => self.out_dir = v.to_string(),
            ("cohort", "n_patients") => self.cohort.n_patients = parse_val(s, key, v)?,
            ("cohort", "n_test") => self.cohort.n_test = parse_val(s, key, v)?,
            ("cohort", "label_noise") => self.cohort.label_noise = parse_val(s, key, v)?,
            ("cohort", "beta_ecg") => self.cohort.beta.ecg = parse_val(s, key, v)?,
            ("cohort", "beta_vitals") => self.cohort.beta.vitals = parse_val(s, key, v)?,
            ("cohort", "beta_demo") => self.cohort.beta.demo = parse_val(s, key, v)?,
            ("cohort", "beta_bio") => self.cohort.beta.bio = parse_val(s, key, v)?,
            ("cohort", "beta_jitter") => self.cohort.beta_jitter = parse_val(s, key, v)?,
            ("cohort", "sample_rate") => self.cohort.sample_rate = parse_val(s, key, v)?,
            ("cohort", "duration_s") => self.cohort.duration_s = parse_val(s, key, v)?,
            ("cohort", "missing_rate") => self.cohort.missing_rate = parse_val(s, key, v)?,
            ("text", "role") => self.role = v.to_string(),
            ("text", "task_desc") => self.task_desc = v.to_string(),
            ("vocab", "max_size") => self.vocab_max = parse_val(s, key, v)?,
            ("encoder", "patch_len") => self.encoder.patch_len = parse_val(s, key, v)?,
            ("encoder", "d_ecg") => self.encoder.d_ecg = parse_val(s, key, v)?,
            ("encoder", "n_layers") => self.encoder.n_layers = parse_val(s, key, v)?,
            ("encoder", "n_heads") => self.encoder.n_heads = parse_val(s, key, v)?,
            ("encoder", "ffn_mult") => self.encoder.ffn_mult = parse_val(s, key, v)?,
            ("encoder", "max_patches") => self.encoder.max_patches = parse_val(s, key, v)?,
            ("decoder", "d_llm") => self.decoder.d_llm = parse_val(s, key, v)?,
            ("decoder", "n_layers") => self.decoder.n_layers = parse_val(s, key, v)?,
            ("decoder", "n_heads") => self.decoder.n_heads = parse_val(s, key, v)?,
            ("decoder", "ffn_mult") => self.decoder.ffn_mult = parse_val(s, key, v)?,
            ("decoder", "max_len") => self.decoder.max_len = parse_val(s, key, v)?,
            ("projector", "hidden") => self.proj_hidden = parse_val(s, key, v)?,
            ("warmup", "enabled") => self.warmup_enabled = parse_bool(s, key, v)?,
            ("warmup", "lr") => self.warmup.lr = parse_val(s, key, v)?,
            ("warmup", "epochs") => self.warmup.epochs = parse_val(s, key, v)?,
            ("warmup", "batch_size") => self.warmup.batch_size = parse_val(s, key, v)?,
            ("warmup", "mask_ratio") => self.warmup.mask_ratio = parse_val(s, key, v)?,
            ("stage1", _) => return Self::set_stage(&mut self.stage1, s, key, v),
            ("stage2", _) => return Self::set_stage(&mut self.stage2, s, key, v),
            ("eval", "bootstrap") => self.bootstrap = parse_val(s, key, v)?,
            ("eval", "val_patients") => self.val_patients = parse_val(s, key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn set_stage(st: &mut StageConfig, s: &str, key: &str, v: &str) -> Result<bool> {
        match key {
            "lr" => st.lr = parse_val(s, key, v)?,
            "epochs" => st.epochs = parse_val(s, key, v)?,
            "batch_patients" => st.batch_patients = parse_val(s, key, v)?,
            "tasks_per_patient" => st.tasks_per_patient = parse_val(s, key, v)?,
            "grad_clip" => st.grad_clip = parse_val(s, key, v)?,
            "warmup_steps" => st.warmup_steps = parse_val(s, key, v)?,
            "group_dropout" => st.group_dropout = parse_val(s, key, v)?,
            "select_best" => st.select_best = parse_bool(s, key, v)?,
            "max_steps" => {
                let n: usize = parse_val(s, key, v)?;
                st.max_steps = (n > 0).then_some(n);
            }
            "lora_rank" if st.stage == Stage::Two => st.lora.rank = parse_val(s, key, v)?,
            "lora_alpha" if st.stage == Stage::Two => st.lora.alpha = parse_val(s, key, v)?,
            "lora_dropout" if st.stage == Stage::Two => st.lora.dropout = parse_val(s, key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(CoreError::Config("[run] threads must be at least 1".into()));
        }
        self.cohort.validate()?;
        self.encoder.validate()?;
        self.encoder.n_patches(self.cohort.signal_len()).map_err(|e| CoreError::Config(e.to_string()))?;
        if self.decoder.n_heads == 0 || !self.decoder.d_llm.is_multiple_of(self.decoder.n_heads) {
            return Err(CoreError::Config("[decoder] d_llm must be divisible by n_heads".into()));
        }
        if self.val_patients >= self.cohort.n_patients - self.cohort.n_test {
            return Err(CoreError::Config("[eval] val_patients leaves no training patients".into()));
        }
        Ok(())
    }

    /// Replaces every seed with `seed`, as the run seed propagates to all
    /// components.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn cohort_config(&self) -> CohortConfig {
        CohortConfig { seed: self.seed, ..self.cohort.clone() }
    }

    pub fn text_setup(&self) -> TextSetup {
        TextSetup { role: self.role.clone(), task_desc: self.task_desc.clone(), ..TextSetup::default() }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder,
            decoder: DecoderConfig { vocab_size, ..self.decoder },
            proj_hidden: self.proj_hidden,
            seed: self.seed,
        }
    }

    pub fn stage(&self, stage: Stage) -> StageConfig {
        let mut st = match stage {
            Stage::One => self.stage1.clone(),
            Stage::Two => self.stage2.clone(),
        };
        st.seed = self.seed.wrapping_add(stage.number() as u64);
        st
    }

    pub fn warmup(&self) -> PretrainConfig {
        PretrainConfig { seed: self.seed.wrapping_add(7), ..self.warmup.clone() }
    }

    pub fn lora(&self) -> LoraConfig {
        self.stage2.lora
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn echo(&self) -> String {
        let mut o = String::new();
        let mut sec = |name: &str, entries: Vec<(&str, String)>| {
            let _ = writeln!(o, "[{name}]");
            for (k, v) in entries {
                let _ = writeln!(o, "{k} = {v}");
            }
            o.push('\n');
        };
        let c = &self.cohort;
        sec("run", vec![("seed", self.seed.to_string()), ("threads", self.threads.to_string()), ("out_dir", self.out_dir.clone())]);
        sec(
            "cohort",
            vec![
                ("n_patients", c.n_patients.to_string()),
                ("n_test", c.n_test.to_string()),
                ("label_noise", c.label_noise.to_string()),
                ("beta_ecg", c.beta.ecg.to_string()),
                ("beta_vitals", c.beta.vitals.to_string()),
                ("beta_demo", c.beta.demo.to_string()),
                ("beta_bio", c.beta.bio.to_string()),
                ("beta_jitter", c.beta_jitter.to_string()),
                ("sample_rate", c.sample_rate.to_string()),
                ("duration_s", c.duration_s.to_string()),
                ("missing_rate", c.missing_rate.to_string()),
            ],
        );
        sec("text", vec![("role", self.role.clone()), ("task_desc", self.task_desc.clone())]);
        sec("vocab", vec![("max_size", self.vocab_max.to_string())]);
        let e = &self.encoder;
        sec(
            "encoder",
            vec![
                ("patch_len", e.patch_len.to_string()),
                ("d_ecg", e.d_ecg.to_string()),
                ("n_layers", e.n_layers.to_string()),
                ("n_heads", e.n_heads.to_string()),
                ("ffn_mult", e.ffn_mult.to_string()),
                ("max_patches", e.max_patches.to_string()),
            ],
        );
        let d = &self.decoder;
        sec(
            "decoder",
            vec![
                ("d_llm", d.d_llm.to_string()),
                ("n_layers", d.n_layers.to_string()),
                ("n_heads", d.n_heads.to_string()),
                ("ffn_mult", d.ffn_mult.to_string()),
                ("max_len", d.max_len.to_string()),
            ],
        );
        sec("projector", vec![("hidden", self.proj_hidden.to_string())]);
        let w = &self.warmup;
        sec(
            "warmup",
            vec![
                ("enabled", self.warmup_enabled.to_string()),
                ("lr", w.lr.to_string()),
                ("epochs", w.epochs.to_string()),
                ("batch_size", w.batch_size.to_string()),
                ("mask_ratio", w.mask_ratio.to_string()),
            ],
        );
        for (name, st) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            let mut v = vec![
                ("lr", st.lr.to_string()),
                ("epochs", st.epochs.to_string()),
                ("batch_patients", st.batch_patients.to_string()),
                ("tasks_per_patient", st.tasks_per_patient.to_string()),
                ("grad_clip", st.grad_clip.to_string()),
                ("warmup_steps", st.warmup_steps.to_string()),
                ("group_dropout", st.group_dropout.to_string()),
                ("select_best", st.select_best.to_string()),
                ("max_steps", st.max_steps.unwrap_or(0).to_string()),
            ];
            if st.stage == Stage::Two {
                v.push(("lora_rank", st.lora.rank.to_string()));
                v.push(("lora_alpha", st.lora.alpha.to_string()));
                v.push(("lora_dropout", st.lora.dropout.to_string()));
            }
            sec(name, v);
        }
        sec("eval", vec![("bootstrap", self.bootstrap.to_string()), ("val_patients", self.val_patients.to_string())]);
        o
    }
}

/// Parses `key=value` overrides given as `section.key=value`.
pub fn apply_overrides(cfg: &mut RunConfig, overrides: &[String]) -> Result<()> {
    let mut unknown = Vec::new();
    for o in overrides {
        let (path, v) = o
            .split_once('=')
            .ok_or_else(|| CoreError::Config(format!("override {o:?} is not section.key=value")))?;
        let (s, k) = path
            .split_once('.')
            .ok_or_else(|| CoreError::Config(format!("override {o:?} is not section.key=value")))?;
        if !cfg.set(s.trim(), k.trim(), v.trim())? {
            unknown.push(path.to_string());
        }
    }
    if !unknown.is_empty() {
        return Err(CoreError::Config(format!("unknown key(s): {}", unknown.join(", "))));
    }
    cfg.validate()
}

/// Section → keys table of every accepted key, for documentation.
pub fn known_keys() -> BTreeMap<&'static str, Vec<&'static str>> {
    let mut m = BTreeMap::new();
    m.insert("run", vec!["seed", "threads", "out_dir"]);
    m.insert(
        "cohort",
        vec![
            "n_patients", "n_test", "label_noise", "beta_ecg", "beta_vitals", "beta_demo", "beta_bio",
            "beta_jitter", "sample_rate", "duration_s", "missing_rate",
        ],
    );
    m.insert("text", vec!["role", "task_desc"]);
    m.insert("vocab", vec!["max_size"]);
    m.insert("encoder", vec!["patch_len", "d_ecg", "n_layers", "n_heads", "ffn_mult", "max_patches"]);
    m.insert("decoder", vec!["d_llm", "n_layers", "n_heads", "ffn_mult", "max_len"]);
    m.insert("projector", vec!["hidden"]);
    m.insert("warmup", vec!["enabled", "lr", "epochs", "batch_size", "mask_ratio"]);
    let stage = vec![
        "lr", "epochs", "batch_patients", "tasks_per_patient", "grad_clip", "warmup_steps", "group_dropout",
        "select_best", "max_steps",
    ];
    m.insert("stage1", stage.clone());
    let mut s2 = stage;
    s2.extend(["lora_rank", "lora_alpha", "lora_dropout"]);
    m.insert("stage2", s2);
    m.insert("eval", vec!["bootstrap", "val_patients"]);
    m
}
