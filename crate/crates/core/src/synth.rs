//! Seeded synthetic cohorts with planted cross-modal signal.
//!
//! Each patient draws four standard-normal latents: `ecg` (waveform
//! morphology), `vitals`, `demo` and `bio`. Observed fields are noisy affine
//! maps of their latent; labels depend only on the latents.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use unipact_tensor::Tensor;

use crate::ecg::{EcgSignal, N_LEADS};
use crate::ehr::EhrRecord;
use crate::metrics::{auroc, ScoredSet};
use crate::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Diagnosis,
    Deterioration,
    Icu,
    Mortality,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Diagnosis, Category::Deterioration, Category::Icu, Category::Mortality];

    pub fn name(self) -> &'static str {
        match self {
            Category::Diagnosis => "diagnosis",
            Category::Deterioration => "deterioration",
            Category::Icu => "icu",
            Category::Mortality => "mortality",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s.to_ascii_lowercase())
            .ok_or_else(|| CoreError::invalid(format!("unknown task category {s:?}")))
    }
}

/// Effect sizes on the four latents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Betas {
    pub ecg: f64,
    pub vitals: f64,
    pub demo: f64,
    pub bio: f64,
}

impl Default for Betas {
    fn default() -> Self {
        Betas { ecg: 1.0, vitals: 1.0, demo: 0.5, bio: 0.5 }
    }
}

/// A subset of latent groups visible to an oracle or a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Modalities {
    pub ecg: bool,
    pub vitals: bool,
    pub demo: bool,
    pub bio: bool,
}

impl Modalities {
    pub const ALL: Modalities = Modalities { ecg: true, vitals: true, demo: true, bio: true };
    pub const NONE: Modalities = Modalities { ecg: false, vitals: false, demo: false, bio: false };
    pub const ECG: Modalities = Modalities { ecg: true, ..Self::NONE };
    pub const EHR: Modalities = Modalities { ecg: false, ..Self::ALL };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub category: Category,
    pub question: String,
    pub beta: Betas,
    pub intercept: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRegistry {
    pub tasks: Vec<TaskSpec>,
}

const DIAGNOSES: [(&str, &str); 12] = [
    ("dx_afib", "atrial fibrillation"),
    ("dx_heart_failure", "heart failure"),
    ("dx_aki", "acute kidney injury"),
    ("dx_pneumonia", "pneumonia"),
    ("dx_sepsis", "sepsis"),
    ("dx_hypertension", "hypertension"),
    ("dx_diabetes", "type 2 diabetes"),
    ("dx_ckd", "chronic kidney disease"),
    ("dx_cad", "coronary artery disease"),
    ("dx_hyperkalemia", "hyperkalemia"),
    ("dx_anemia", "anemia"),
    ("dx_copd", "chronic obstructive pulmonary disease"),
];

const DETERIORATIONS: [(&str, &str); 6] = [
    ("det_hypoxemia", "severe hypoxemia"),
    ("det_tachycardia", "severe tachycardia"),
    ("det_hypotension", "severe hypotension"),
    ("det_tachypnea", "severe tachypnea"),
    ("det_hyperthermia", "severe hyperthermia"),
    ("det_bradycardia", "severe bradycardia"),
];

const ICU: [(&str, &str); 2] = [
    ("icu_24h", "be admitted to the ICU within 24 hours"),
    ("icu_stay", "be admitted to the ICU during this hospital stay"),
];

const MORTALITY: [(&str, &str); 7] = [
    ("mort_1d", "1 day"),
    ("mort_7d", "7 days"),
    ("mort_28d", "28 days"),
    ("mort_90d", "90 days"),
    ("mort_180d", "180 days"),
    ("mort_365d", "365 days"),
    ("mort_hosp", "the hospital stay"),
];

impl TaskRegistry {
    /// 12 diagnosis, 6 deterioration, 2 ICU and 7 mortality tasks. Every
    /// task scales the shared base effects by its own factor drawn from
    /// [1 - jitter, 1 + jitter].
    pub fn standard(base: Betas, jitter: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7461_736b);
        let mut tasks = Vec::new();
        let mut push = |id: &str, category, question: String, rng: &mut ChaCha8Rng| {
            let mut f = || 1.0 + jitter * (2.0 * rng.gen::<f64>() - 1.0);
            let beta = Betas { ecg: base.ecg * f(), vitals: base.vitals * f(), demo: base.demo * f(), bio: base.bio * f() };
            tasks.push(TaskSpec { id: id.to_string(), category, question, beta, intercept: 0.0 });
        };
        for (id, name) in DIAGNOSES {
            push(id, Category::Diagnosis, format!("Will the patient be diagnosed with {name}"), &mut rng);
        }
        for (id, name) in DETERIORATIONS {
            push(id, Category::Deterioration, format!("Will the patient experience {name}"), &mut rng);
        }
        for (id, name) in ICU {
            push(id, Category::Icu, format!("Will the patient {name}"), &mut rng);
        }
        for (id, horizon) in MORTALITY {
            let q = if horizon.starts_with("the") {
                format!("Will the patient die during {horizon}")
            } else {
                format!("Will the patient die within {horizon}")
            };
            push(id, Category::Mortality, q, &mut rng);
        }
        TaskRegistry { tasks }
    }

    pub fn get(&self, id: &str) -> Result<&TaskSpec> {
        self.tasks.iter().find(|t| t.id == id).ok_or_else(|| CoreError::UnknownTask(id.to_string()))
    }

    pub fn in_category(&self, c: Category) -> impl Iterator<Item = &TaskSpec> {
        self.tasks.iter().filter(move |t| t.category == c)
    }

    pub fn category_map(&self) -> BTreeMap<String, Category> {
        self.tasks.iter().map(|t| (t.id.clone(), t.category)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for c in Category::ALL {
            if self.in_category(c).next().is_none() {
                return Err(CoreError::Config(format!("task category {} is empty", c.name())));
            }
        }
        for t in &self.tasks {
            let b = t.beta;
            if ![b.ecg, b.vitals, b.demo, b.bio, t.intercept].iter().all(|v| v.is_finite()) {
                return Err(CoreError::Config(format!("task {} has a non-finite effect size", t.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub n_patients: usize,
    /// The last `n_test` patients form the test split.
    pub n_test: usize,
    pub seed: u64,
    pub label_noise: f64,
    pub beta: Betas,
    pub beta_jitter: f64,
    pub sample_rate: f32,
    pub duration_s: f32,
    /// Probability that any single record field is missing.
    pub missing_rate: f64,
    /// Explicit registry; the standard one is built from `beta` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tasks: Option<TaskRegistry>,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            n_patients: 200,
            n_test: 50,
            seed: 42,
            label_noise: 0.1,
            beta: Betas::default(),
            beta_jitter: 0.25,
            sample_rate: 100.0,
            duration_s: 10.0,
            missing_rate: 0.0,
            tasks: None,
        }
    }
}

impl CohortConfig {
    pub fn registry(&self) -> TaskRegistry {
        self.tasks
            .clone()
            .unwrap_or_else(|| TaskRegistry::standard(self.beta, self.beta_jitter, self.seed))
    }

    pub fn signal_len(&self) -> usize {
        (self.sample_rate * self.duration_s).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(CoreError::Config(format!("label noise {} outside [0, 0.5)", self.label_noise)));
        }
        if self.n_test > self.n_patients {
            return Err(CoreError::Config("test split larger than the cohort".into()));
        }
        if !(self.sample_rate > 0.0 && self.duration_s > 0.0) || self.signal_len() == 0 {
            return Err(CoreError::Config("sample rate and duration must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.missing_rate) || !(0.0..1.0).contains(&self.beta_jitter) {
            return Err(CoreError::Config("missing rate and beta jitter must be in [0, 1)".into()));
        }
        self.registry().validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latents {
    pub ecg: f64,
    pub vitals: f64,
    pub demo: f64,
    pub bio: f64,
}

impl Latents {
    pub fn logit(&self, beta: &Betas, subset: Modalities) -> f64 {
        let pick = |on: bool, b: f64, z: f64| if on { b * z } else { 0.0 };
        pick(subset.ecg, beta.ecg, self.ecg)
            + pick(subset.vitals, beta.vitals, self.vitals)
            + pick(subset.demo, beta.demo, self.demo)
            + pick(subset.bio, beta.bio, self.bio)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patient {
    pub id: String,
    pub split: Split,
    pub ehr: EhrRecord,
    pub latents: Latents,
    pub labels: BTreeMap<String, u8>,
    pub ecg: EcgSignal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub config: CohortConfig,
    pub tasks: TaskRegistry,
    pub patients: Vec<Patient>,
}

impl Cohort {
    pub fn split(&self, s: Split) -> impl Iterator<Item = &Patient> {
        self.patients.iter().filter(move |p| p.split == s)
    }
}

/// Physiological clipping ranges of the generated numeric fields.
pub const FIELD_RANGES: [(&str, f64, f64); 11] = [
    ("age", 18.0, 95.0),
    ("bmi", 15.0, 55.0),
    ("weight", 35.0, 200.0),
    ("height", 145.0, 205.0),
    ("temperature", 34.5, 41.0),
    ("heartrate", 40.0, 160.0),
    ("resprate", 8.0, 40.0),
    ("o2sat", 75.0, 100.0),
    ("sbp", 70.0, 220.0),
    ("dbp", 35.0, 130.0),
    ("pain", 0.0, 10.0),
];

fn range_of(name: &str) -> (f64, f64) {
    let (_, lo, hi) = FIELD_RANGES.iter().find(|(n, _, _)| *n == name).expect("declared field");
    (*lo, *hi)
}

fn clip_round(name: &str, x: f64, step: f64) -> f64 {
    let (lo, hi) = range_of(name);
    let r = (x / step).round() * step;
    // Re-round to kill representation error such as 36.900000000000006.
    let r = (r * 10.0).round() / 10.0;
    r.clamp(lo, hi)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

const RACES: [(&str, f64); 5] = [
    ("white", 0.6),
    ("black African American", 0.18),
    ("Hispanic Latino", 0.1),
    ("Asian", 0.07),
    ("other", 0.05),
];

// Lead gains for the P wave, the QRS complex and the T wave, ordered
// I, II, III, aVR, aVL, aVF, V1..V6.
const P_GAIN: [f64; N_LEADS] = [0.5, 0.8, 0.3, -0.6, 0.2, 0.5, 0.3, 0.3, 0.3, 0.4, 0.4, 0.4];
const R_GAIN: [f64; N_LEADS] = [0.6, 1.0, 0.5, -0.7, 0.3, 0.75, -0.3, 0.2, 0.6, 1.0, 1.1, 0.9];
const S_GAIN: [f64; N_LEADS] = [0.1, 0.2, 0.2, 0.1, 0.1, 0.2, 0.9, 1.0, 0.6, 0.3, 0.1, 0.1];
const T_GAIN: [f64; N_LEADS] = [0.5, 0.8, 0.35, -0.6, 0.2, 0.6, 0.1, 0.5, 0.7, 0.8, 0.7, 0.6];

fn gauss(t: f64, mu: f64, sd: f64) -> f64 {
    let z = (t - mu) / sd;
    (-0.5 * z * z).exp()
}

/// Quasi-periodic 12-lead waveform with beats at `heartrate`. The latent
/// `z_ecg` drives T-wave amplitude and ST level through σ(1.5·z).
fn synth_ecg(z_ecg: f64, heartrate: f64, sample_rate: f32, len: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let fs = sample_rate as f64;
    let rr = 60.0 / heartrate;
    let m = 2.0 * logistic(1.5 * z_ecg) - 1.0;
    let t_amp = 0.35 * (1.0 - 1.3 * m);
    let st = -0.12 * m;
    let qt = 0.3 * rr.sqrt();
    let r_scale = (0.1 * normal(rng)).exp();
    let gains: Vec<[f64; 4]> = (0..N_LEADS)
        .map(|l| {
            let j = 1.0 + 0.08 * normal(rng);
            [P_GAIN[l] * j, R_GAIN[l] * j * r_scale, S_GAIN[l] * j * r_scale, T_GAIN[l] * j]
        })
        .collect();
    let phase = rng.gen::<f64>() * rr;
    let wander_f = 0.15 + 0.25 * rng.gen::<f64>();
    let wander_phase = rng.gen::<f64>() * std::f64::consts::TAU;
    let wander_amp = 0.05 + 0.05 * rng.gen::<f64>();
    let duration = len as f64 / fs;
    let mut beats = Vec::new();
    let mut tb = phase - rr;
    while tb < duration + rr {
        // Mild beat-to-beat variability.
        beats.push(tb);
        tb += rr * (1.0 + 0.02 * normal(rng));
    }
    let mut data = vec![0.0f32; len * N_LEADS];
    for i in 0..len {
        let t = i as f64 / fs;
        let wander = wander_amp * (std::f64::consts::TAU * wander_f * t + wander_phase).sin();
        let (mut p, mut r, mut s, mut tw) = (0.0, 0.0, 0.0, 0.0);
        for &b in beats.iter().filter(|&&b| (t - b).abs() < 1.5) {
            p += 0.15 * gauss(t, b - 0.16, 0.025);
            r += 1.2 * gauss(t, b, 0.015) - 0.1 * gauss(t, b - 0.03, 0.01);
            s += 0.35 * gauss(t, b + 0.035, 0.012);
            tw += t_amp * gauss(t, b + qt, 0.05) + st * gauss(t, b + 0.12, 0.04);
        }
        for (l, gn) in gains.iter().enumerate() {
            let v = gn[0] * p + gn[1] * r - gn[2] * s + gn[3] * tw + wander + 0.03 * normal(rng);
            data[i * N_LEADS + l] = v as f32;
        }
    }
    Tensor { shape: vec![len, N_LEADS], data, requires_grad: false, grad: None }
}

fn maybe(rng: &mut ChaCha8Rng, missing: f64, v: f64) -> Option<f64> {
    if missing > 0.0 && rng.gen::<f64>() < missing {
        None
    } else {
        Some(v)
    }
}

fn synth_patient(cfg: &CohortConfig, tasks: &TaskRegistry, index: usize) -> Patient {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let z = Latents { ecg: normal(&mut rng), vitals: normal(&mut rng), demo: normal(&mut rng), bio: normal(&mut rng) };
    let mr = cfg.missing_rate;

    let age = clip_round("age", 62.0 + 15.0 * z.demo + 3.0 * normal(&mut rng), 1.0);
    let sex = if rng.gen::<bool>() { "female" } else { "male" };
    let u = rng.gen::<f64>();
    let mut acc = 0.0;
    let mut race = RACES[RACES.len() - 1].0;
    for (r, p) in RACES {
        acc += p;
        if u < acc {
            race = r;
            break;
        }
    }

    let hr_raw = 78.0 + 6.0 * z.vitals + 9.0 * normal(&mut rng);
    let heartrate = clip_round("heartrate", hr_raw, 1.0);
    let temperature = clip_round("temperature", 36.9 + 0.35 * z.vitals + 0.2 * normal(&mut rng), 0.1);
    let resprate = clip_round("resprate", 18.0 + 3.0 * z.vitals + 1.5 * normal(&mut rng), 1.0);
    let o2sat = clip_round("o2sat", 96.0 - 1.8 * z.vitals + normal(&mut rng), 1.0);
    let sbp = clip_round("sbp", 128.0 - 12.0 * z.vitals + 10.0 * normal(&mut rng), 1.0);
    let dbp = clip_round("dbp", 76.0 - 7.0 * z.vitals + 6.0 * normal(&mut rng), 1.0);
    let pain = clip_round("pain", 3.0 + 1.2 * z.vitals + 1.5 * normal(&mut rng), 1.0);

    let height = clip_round("height", 170.0 + 9.0 * normal(&mut rng), 1.0);
    let bmi = clip_round("bmi", 27.5 + 4.5 * z.bio + 0.7 * normal(&mut rng), 1.0);
    let weight = clip_round("weight", bmi * (height / 100.0).powi(2), 1.0);

    let ehr = EhrRecord {
        age: maybe(&mut rng, mr, age),
        race: maybe(&mut rng, mr, 0.0).map(|_| race.to_string()),
        sex: maybe(&mut rng, mr, 0.0).map(|_| sex.to_string()),
        bmi: maybe(&mut rng, mr, bmi),
        weight: maybe(&mut rng, mr, weight),
        height: maybe(&mut rng, mr, height),
        temperature: maybe(&mut rng, mr, temperature),
        heartrate: maybe(&mut rng, mr, heartrate),
        resprate: maybe(&mut rng, mr, resprate),
        o2sat: maybe(&mut rng, mr, o2sat),
        sbp: maybe(&mut rng, mr, sbp),
        dbp: maybe(&mut rng, mr, dbp),
        pain: maybe(&mut rng, mr, pain),
    };

    let len = cfg.signal_len();
    let beat_rate = range_of("heartrate");
    let samples = synth_ecg(z.ecg, hr_raw.clamp(beat_rate.0, beat_rate.1), cfg.sample_rate, len, &mut rng);
    let ecg = EcgSignal { samples, sample_rate: cfg.sample_rate };

    let mut labels = BTreeMap::new();
    for t in &tasks.tasks {
        let p = logistic(z.logit(&t.beta, Modalities::ALL) + t.intercept);
        let y = rng.gen::<f64>() < p;
        let flip = rng.gen::<f64>() < cfg.label_noise;
        labels.insert(t.id.clone(), u8::from(y ^ flip));
    }
    let split = if index >= cfg.n_patients - cfg.n_test { Split::Test } else { Split::Train };
    Patient { id: format!("P{index:05}"), split, ehr, latents: z, labels, ecg }
}

/// Generates the cohort; patients are independent given the seed, so the
/// work is spread over the current rayon pool without changing the output.
pub fn generate_cohort(cfg: &CohortConfig) -> Result<Cohort> {
    cfg.validate()?;
    let tasks = cfg.registry();
    let patients = (0..cfg.n_patients).into_par_iter().map(|i| synth_patient(cfg, &tasks, i)).collect();
    Ok(Cohort { config: cfg.clone(), tasks, patients })
}

/// AUROC of the true logit restricted to `subset` (absent latents set to
/// zero) against the stored labels of `patients`.
pub fn bayes_oracle_auroc<'a>(
    patients: impl IntoIterator<Item = &'a Patient>,
    tasks: &TaskRegistry,
    task: &str,
    subset: Modalities,
) -> Result<f64> {
    let def = tasks.get(task)?;
    let mut set = ScoredSet::default();
    for p in patients {
        let y = *p.labels.get(task).ok_or_else(|| CoreError::UnknownTask(task.to_string()))?;
        set.push(p.latents.logit(&def.beta, subset) + def.intercept, y);
    }
    auroc(&set)
}

/// Macro average over categories of the per-task oracle AUROC.
pub fn bayes_oracle_overall(patients: &[&Patient], tasks: &TaskRegistry, subset: Modalities, categories: &[Category]) -> Result<f64> {
    let mut total = 0.0;
    for &c in categories {
        let ids: Vec<&str> = tasks.in_category(c).map(|t| t.id.as_str()).collect();
        let mut sum = 0.0;
        for id in &ids {
            sum += bayes_oracle_auroc(patients.iter().copied(), tasks, id, subset)?;
        }
        total += sum / ids.len() as f64;
    }
    Ok(total / categories.len() as f64)
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    split: Split,
    ehr: EhrRecord,
    latents: Latents,
    labels: BTreeMap<String, u8>,
    ecg: String,
}

pub const MANIFEST: &str = "manifest.jsonl";
pub const TASKS: &str = "tasks.jsonl";
pub const COHORT_CONFIG: &str = "cohort.json";

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

/// Writes `manifest.jsonl`, `tasks.jsonl`, `cohort.json` and one UPCT file
/// per patient under `ecg/`.
pub fn serialize_cohort(cohort: &Cohort, out_dir: &Path) -> Result<()> {
    let ecg_dir = out_dir.join("ecg");
    std::fs::create_dir_all(&ecg_dir).map_err(|e| CoreError::io(&ecg_dir, e))?;
    let mut manifest = Vec::new();
    for p in &cohort.patients {
        let rel = format!("ecg/{}.upct", p.id);
        p.ecg.save(&out_dir.join(&rel))?;
        let entry = ManifestEntry {
            id: p.id.clone(),
            split: p.split,
            ehr: p.ehr.clone(),
            latents: p.latents,
            labels: p.labels.clone(),
            ecg: rel,
        };
        serde_json::to_writer(&mut manifest, &entry).map_err(|e| CoreError::invalid(e.to_string()))?;
        manifest.push(b'\n');
    }
    write_file(&out_dir.join(MANIFEST), &manifest)?;
    let mut tasks = Vec::new();
    for t in &cohort.tasks.tasks {
        serde_json::to_writer(&mut tasks, t).map_err(|e| CoreError::invalid(e.to_string()))?;
        tasks.push(b'\n');
    }
    write_file(&out_dir.join(TASKS), &tasks)?;
    let cfg = serde_json::to_vec_pretty(&cohort.config).map_err(|e| CoreError::invalid(e.to_string()))?;
    write_file(&out_dir.join(COHORT_CONFIG), &cfg)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = std::fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| l.map_err(|e| CoreError::io(path, e)))
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .collect()
}

pub fn load_cohort(dir: &Path) -> Result<Cohort> {
    let cfg_path = dir.join(COHORT_CONFIG);
    let cfg_text = std::fs::read(&cfg_path).map_err(|e| CoreError::io(&cfg_path, e))?;
    let config: CohortConfig =
        serde_json::from_slice(&cfg_text).map_err(|e| CoreError::format(&cfg_path, e.to_string()))?;
    let tasks_path = dir.join(TASKS);
    let tasks = read_lines(&tasks_path)?
        .iter()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CoreError::format(&tasks_path, format!("line {}: {e}", i + 1)))
        })
        .collect::<Result<Vec<TaskSpec>>>()?;
    let tasks = TaskRegistry { tasks };
    let manifest_path = dir.join(MANIFEST);
    let lines = read_lines(&manifest_path)?;
    let patients = lines
        .par_iter()
        .enumerate()
        .map(|(i, l)| {
            let e: ManifestEntry = serde_json::from_str(l)
                .map_err(|err| CoreError::format(&manifest_path, format!("line {}: {err}", i + 1)))?;
            let ecg_path: PathBuf = dir.join(&e.ecg);
            let ecg = EcgSignal::load(&ecg_path, config.sample_rate)?;
            Ok(Patient { id: e.id, split: e.split, ehr: e.ehr, latents: e.latents, labels: e.labels, ecg })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort { config, tasks, patients })
}

/// Writes a single manifest line for one patient (used by `predict`).
pub fn manifest_line(p: &Patient) -> Result<String> {
    let entry = ManifestEntry {
        id: p.id.clone(),
        split: p.split,
        ehr: p.ehr.clone(),
        latents: p.latents,
        labels: p.labels.clone(),
        ecg: format!("ecg/{}.upct", p.id),
    };
    serde_json::to_string(&entry).map_err(|e| CoreError::invalid(e.to_string()))
}

/// Parses one manifest line, loading its ECG relative to `dir`.
pub fn parse_manifest_line(line: &str, dir: &Path, sample_rate: f32) -> Result<Patient> {
    let e: ManifestEntry =
        serde_json::from_str(line).map_err(|err| CoreError::invalid(format!("manifest line: {err}")))?;
    let ecg = EcgSignal::load(&dir.join(&e.ecg), sample_rate)?;
    Ok(Patient { id: e.id, split: e.split, ehr: e.ehr, latents: e.latents, labels: e.labels, ecg })
}
