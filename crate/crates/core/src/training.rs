//! Answer-masked training: batch layout, loss, the two-stage schedule,
//! multi-task mixing and backbone warm-up.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use unipact_tensor::{adam_update, clip_grad_norm, AdamConfig, Graph, Moments, OptimState, ParamId, Tensor};

use crate::data::{select_tasks, PreparedPatient, QuestionBank, TextSetup};
use crate::ehr::{AblationMask, Group};
use crate::eval::score_rows;
use crate::metrics::{aggregate, group_scores, SubtaskResult};
use crate::model::FusionModel;
use crate::nn::{Ctx, LoraConfig};
use crate::synth::{Category, TaskRegistry};
use crate::tokenizer::{Vocab, ECG_SLOT, NO, PAD, YES};
use crate::{CoreError, Result};

/// One teacher-forced example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub ecg: Option<Arc<Tensor>>,
    /// Role, task description and record text.
    pub prefix_text: String,
    pub question_text: String,
    /// "Yes" or "No".
    pub answer: String,
}

#[derive(Debug, Clone)]
pub struct BatchRow {
    pub ecg: Option<Arc<Tensor>>,
    pub n_ecg: usize,
    pub prompt_len: usize,
    pub question_len: usize,
    /// Input ids over the fused positions: ECG slots, prompt, question,
    /// answer, then padding.
    pub tokens: Vec<u32>,
    /// Teacher-forcing targets; the logits at t-1 predict `targets[t]`.
    pub targets: Vec<u32>,
    pub answer_mask: Vec<bool>,
    pub valid: Vec<bool>,
}

impl BatchRow {
    pub fn prefix_len(&self) -> usize {
        self.n_ecg + self.prompt_len
    }

    pub fn valid_len(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn answer_positions(&self) -> Vec<usize> {
        (0..self.answer_mask.len()).filter(|&t| self.answer_mask[t]).collect()
    }

    fn same_prefix(&self, other: &BatchRow) -> bool {
        let ecg_same = match (&self.ecg, &other.ecg) {
            (Some(a), Some(b)) => Arc::ptr_eq(a, b),
            (None, None) => true,
            _ => false,
        };
        ecg_same && self.prefix_len() == other.prefix_len() && self.tokens[..self.prefix_len()] == other.tokens[..other.prefix_len()]
    }
}

/// Right-padded batch of fused sequences.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub rows: Vec<BatchRow>,
    pub seq_len: usize,
}

impl TrainBatch {
    pub fn answer_tokens(&self) -> usize {
        self.rows.iter().map(|r| r.answer_mask.iter().filter(|&&m| m).count()).sum()
    }
}

pub fn answer_id(answer: &str) -> Result<u32> {
    match answer {
        "Yes" => Ok(YES),
        "No" => Ok(NO),
        other => Err(CoreError::invalid(format!("answer {other:?} is neither Yes nor No"))),
    }
}

pub fn build_batch(samples: &[Sample], vocab: &Vocab) -> Result<TrainBatch> {
    if samples.is_empty() {
        return Err(CoreError::invalid("empty batch"));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let answer = answer_id(&s.answer)?;
        let prompt = vocab.encode(&s.prefix_text);
        let question = vocab.encode(&s.question_text);
        if question.is_empty() {
            return Err(CoreError::invalid("sample has an empty question"));
        }
        let n_ecg = s.ecg.as_ref().map(|p| p.rows()).unwrap_or(0);
        let mut tokens = vec![ECG_SLOT; n_ecg];
        tokens.extend_from_slice(&prompt);
        tokens.extend_from_slice(&question);
        let answer_start = tokens.len();
        tokens.push(answer);
        let mut answer_mask = vec![false; tokens.len()];
        answer_mask[answer_start] = true;
        rows.push(BatchRow {
            ecg: s.ecg.clone(),
            n_ecg,
            prompt_len: prompt.len(),
            question_len: question.len(),
            targets: tokens.clone(),
            valid: vec![true; tokens.len()],
            tokens,
            answer_mask,
        });
    }
    let seq_len = rows.iter().map(|r| r.tokens.len()).max().unwrap_or(0);
    for r in &mut rows {
        let pad = seq_len - r.tokens.len();
        r.tokens.extend(std::iter::repeat_n(PAD, pad));
        r.targets.extend(std::iter::repeat_n(PAD, pad));
        r.answer_mask.extend(std::iter::repeat_n(false, pad));
        r.valid.extend(std::iter::repeat_n(false, pad));
    }
    Ok(TrainBatch { rows, seq_len })
}

/// Consecutive rows sharing ECG and prompt.
fn prefix_groups(batch: &TrainBatch) -> Vec<std::ops::Range<usize>> {
    let mut groups = Vec::new();
    let mut start = 0;
    for i in 1..=batch.rows.len() {
        if i == batch.rows.len() || !batch.rows[i].same_prefix(&batch.rows[start]) {
            groups.push(start..i);
            start = i;
        }
    }
    groups
}

pub type Grads = Vec<(ParamId, Vec<f32>)>;

fn add_grads(into: &mut BTreeMap<ParamId, Vec<f32>>, grads: Grads) {
    for (id, g) in grads {
        match into.get_mut(&id) {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => {
                into.insert(id, g);
            }
        }
    }
}

/// Loss over one prefix group: one forward over the shared prefix plus one
/// continuation per row, cross-entropy only at answer-masked positions.
fn group_loss(model: &FusionModel, rows: &[BatchRow], weight: f32, ctx: &mut Ctx) -> Result<(f32, Grads)> {
    let mut g = Graph::new();
    let first = &rows[0];
    let plen = first.prefix_len();
    let ecg = match &first.ecg {
        Some(p) => Some(model.ecg_tokens(&mut g, p, ctx)?),
        None => None,
    };
    let prompt = &first.tokens[first.n_ecg..plen];
    let prefix = if ecg.is_some() || !prompt.is_empty() {
        Some(model.assemble_input(&mut g, ecg, prompt, &[], &[])?.embeddings)
    } else {
        None
    };
    let mut conts = Vec::with_capacity(rows.len());
    let mut picks = Vec::with_capacity(rows.len());
    for r in rows {
        let pos = r.answer_positions();
        let last = *pos.last().ok_or(unipact_tensor::TensorError::NoSupervisedPositions)?;
        if pos[0] <= plen {
            return Err(CoreError::invalid("answer must follow at least one question token"));
        }
        // Inputs up to the position that predicts the last answer token.
        let ids = &r.tokens[plen..last];
        conts.push(model.decoder.embed(&mut g, &model.store, ids)?);
        picks.push(pos);
    }
    let (_, hs) = model.decoder.hidden(&mut g, &model.store, prefix, &conts, ctx)?;
    let mut sel = Vec::new();
    let mut targets = Vec::new();
    for ((h, pos), r) in hs.iter().zip(&picks).zip(rows) {
        for &t in pos {
            sel.push(g.rows(*h, t - 1 - plen, 1)?);
            targets.push(r.targets[t] as usize);
        }
    }
    let hsel = g.concat_rows(&sel)?;
    let logits = model.decoder.logits(&mut g, &model.store, hsel)?;
    let mask = vec![true; targets.len()];
    let ce = g.cross_entropy(logits, &targets, &mask)?;
    let loss = g.scale(ce, weight);
    g.backward(loss)?;
    Ok((g.scalar(loss), g.take_param_grads()))
}

/// Reference loss for one row: a full forward over the whole sequence and
/// cross-entropy over every position under the answer mask.
fn row_loss_plain(model: &FusionModel, r: &BatchRow, weight: f32, ctx: &mut Ctx) -> Result<(f32, Grads)> {
    let mut g = Graph::new();
    let ecg = match &r.ecg {
        Some(p) => Some(model.ecg_tokens(&mut g, p, ctx)?),
        None => None,
    };
    let n = r.valid_len();
    let text = &r.tokens[r.n_ecg..n - 1];
    let f = model.assemble_input(&mut g, ecg, text, &[], &[])?;
    let logits = model.forward_logits(&mut g, &f, ctx)?;
    let targets: Vec<usize> = (1..n).map(|t| r.targets[t] as usize).collect();
    let mask: Vec<bool> = (1..n).map(|t| r.answer_mask[t]).collect();
    let ce = g.cross_entropy(logits, &targets, &mask)?;
    let k = mask.iter().filter(|&&m| m).count() as f32;
    // The op averages over masked rows; rescale to a per-token sum times weight.
    let loss = g.scale(ce, weight * k);
    g.backward(loss)?;
    Ok((g.scalar(loss), g.take_param_grads()))
}

/// Mean answer-token cross-entropy over the batch and its gradients.
/// `share_prefix` selects the grouped evaluation; both paths compute the
/// same quantity. `dropout_seed` enables training mode.
pub fn batch_loss(
    model: &FusionModel,
    batch: &TrainBatch,
    dropout_seed: Option<u64>,
    share_prefix: bool,
) -> Result<(f32, BTreeMap<ParamId, Vec<f32>>)> {
    let total = batch.answer_tokens();
    if total == 0 {
        return Err(unipact_tensor::TensorError::NoSupervisedPositions.into());
    }
    let groups: Vec<std::ops::Range<usize>> = if share_prefix {
        prefix_groups(batch)
    } else {
        (0..batch.rows.len()).map(|i| i..i + 1).collect()
    };
    let ctx_for = |i: usize| match dropout_seed {
        Some(s) => {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            rng.set_stream(i as u64);
            Ctx::train(rng)
        }
        None => Ctx::eval(),
    };
    let results: Vec<Result<(f32, Grads)>> = groups
        .par_iter()
        .enumerate()
        .map(|(i, range)| {
            let rows = &batch.rows[range.clone()];
            let mut ctx = ctx_for(i);
            if share_prefix {
                let k: usize = rows.iter().map(|r| r.answer_positions().len()).sum();
                group_loss(model, rows, k as f32 / total as f32, &mut ctx)
            } else {
                row_loss_plain(model, &rows[0], 1.0 / total as f32, &mut ctx)
            }
        })
        .collect();
    let mut loss = 0.0f32;
    let mut grads = BTreeMap::new();
    for r in results {
        let (l, g) = r?;
        loss += l;
        add_grads(&mut grads, g);
    }
    Ok((loss, grads))
}

// ---- multi-task mixing ---------------------------------------------------

/// Endless stream interleaving several datasets. Each draw picks a dataset
/// with probability proportional to its weight, then yields that dataset's
/// next item in a seeded shuffled order, reshuffling when it runs out.
#[derive(Debug, Clone)]
pub struct MixStream<T> {
    datasets: Vec<Vec<T>>,
    weights: Vec<f64>,
    cursor: Vec<usize>,
    rng: ChaCha8Rng,
}

pub fn multitask_mix<T: Clone>(datasets: Vec<Vec<T>>, weights: Vec<f64>, seed: u64) -> Result<MixStream<T>> {
    if datasets.len() != weights.len() {
        return Err(CoreError::invalid("one weight per dataset required"));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(CoreError::invalid("mixing weights must be finite and non-negative"));
    }
    if !datasets.iter().zip(&weights).any(|(d, w)| !d.is_empty() && *w > 0.0) {
        return Err(CoreError::invalid("all datasets are empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut datasets = datasets;
    for d in &mut datasets {
        d.shuffle(&mut rng);
    }
    let weights = datasets.iter().zip(weights).map(|(d, w)| if d.is_empty() { 0.0 } else { w }).collect();
    let cursor = vec![0; datasets.len()];
    Ok(MixStream { datasets, weights, cursor, rng })
}

impl<T: Clone> Iterator for MixStream<T> {
    type Item = T;

    fn next(&mut self) -> Option<T> {
        let total: f64 = self.weights.iter().sum();
        let k = if self.weights.iter().filter(|&&w| w > 0.0).count() == 1 {
            self.weights.iter().position(|&w| w > 0.0).expect("one positive weight")
        } else {
            let mut u = self.rng.gen::<f64>() * total;
            let mut k = 0;
            for (i, &w) in self.weights.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                k = i;
                if u < w {
                    break;
                }
                u -= w;
            }
            k
        };
        if self.cursor[k] == self.datasets[k].len() {
            self.datasets[k].shuffle(&mut self.rng);
            self.cursor[k] = 0;
        }
        let item = self.datasets[k][self.cursor[k]].clone();
        self.cursor[k] += 1;
        Some(item)
    }
}

// ---- stage training ------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Projector only.
    One,
    /// Adapters on encoder and decoder, plus the projector.
    Two,
}

impl Stage {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Stage::One),
            "2" => Ok(Stage::Two),
            _ => Err(CoreError::invalid(format!("stage must be 1 or 2, got {s:?}"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Stage::One => "stage1",
            Stage::Two => "stage2",
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }

    pub fn trainable(self, name: &str) -> bool {
        match self {
            Stage::One => FusionModel::is_projector_param(name),
            Stage::Two => FusionModel::is_projector_param(name) || FusionModel::is_adapter_param(name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub lr: f32,
    pub epochs: usize,
    /// Patients per optimizer step.
    pub batch_patients: usize,
    /// Questions drawn per patient per step; they share one prefix pass.
    pub tasks_per_patient: usize,
    pub lora: LoraConfig,
    pub grad_clip: f32,
    pub warmup_steps: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    /// Train stage 2 without a prior stage-1 run.
    pub allow_without_stage1: bool,
    /// Keep the epoch with the best validation AUROC.
    pub select_best: bool,
    /// Input variant seen during training.
    pub mask: AblationMask,
    /// Probability of dropping each input group of a training sample.
    pub group_dropout: f64,
    pub categories: Vec<Category>,
    pub seed: u64,
}

impl StageConfig {
    pub fn new(stage: Stage) -> Self {
        StageConfig {
            stage,
            lr: match stage {
                Stage::One => 1e-3,
                Stage::Two => 1e-3,
            },
            epochs: 3,
            batch_patients: 8,
            tasks_per_patient: 4,
            lora: LoraConfig::default(),
            grad_clip: 1.0,
            warmup_steps: 20,
            max_steps: None,
            allow_without_stage1: false,
            select_best: true,
            mask: AblationMask::full(),
            group_dropout: 0.0,
            categories: Category::ALL.to_vec(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub stage: String,
    pub loss: f32,
}

pub fn loss_csv(points: &[LossPoint]) -> String {
    let mut s = String::from("step,stage,loss\n");
    for p in points {
        s.push_str(&format!("{},{},{:.6}\n", p.step, p.stage, p.loss));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub losses: Vec<LossPoint>,
    /// Validation macro AUROC per epoch, when a validation set was given.
    pub val_auroc: Vec<f64>,
    pub best_epoch: Option<usize>,
}

/// Everything the loop reads besides the model.
pub struct TrainData<'a> {
    pub train: &'a [PreparedPatient],
    pub val: &'a [PreparedPatient],
    pub tasks: &'a TaskRegistry,
    pub vocab: &'a Vocab,
    pub text: &'a TextSetup,
}

fn cosine_lr(base: f32, step: usize, total: usize, warmup: usize) -> f32 {
    if step < warmup {
        return base * (step + 1) as f32 / warmup as f32;
    }
    let span = total.saturating_sub(warmup).max(1);
    let p = ((step - warmup) as f32 / span as f32).min(1.0);
    let floor = 0.1;
    base * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f32::consts::PI * p).cos()))
}

fn augment(mask: AblationMask, p: f64, rng: &mut ChaCha8Rng) -> AblationMask {
    if p <= 0.0 {
        return mask;
    }
    let mut m = mask;
    for g in Group::ALL {
        if m.includes(g) && rng.gen::<f64>() < p {
            m = m.without_group(g);
        }
    }
    if m.include_ecg && rng.gen::<f64>() < p {
        m.include_ecg = false;
    }
    let any_ehr = Group::ALL.iter().any(|&g| m.includes(g));
    if !any_ehr && !m.include_ecg {
        return mask;
    }
    m
}

/// Validation macro AUROC over the configured categories.
pub fn validation_auroc(model: &FusionModel, data: &TrainData<'_>, cfg: &StageConfig) -> Result<f64> {
    let tasks = select_tasks(data.tasks, &cfg.categories);
    let rows = score_rows(model, data.vocab, data.text, &tasks, data.val, &cfg.mask)?;
    let results: Vec<SubtaskResult> = group_scores(&rows)
        .iter()
        .filter_map(|(id, s)| SubtaskResult::evaluate(id, s, 0, 0).transpose())
        .collect::<Result<_>>()?;
    Ok(aggregate(&results, &data.tasks.category_map(), 0, 0)?.overall)
}

pub fn train_stage(model: &mut FusionModel, data: &TrainData<'_>, cfg: &StageConfig) -> Result<StageOutcome> {
    if data.train.is_empty() {
        return Err(CoreError::invalid("no training patients"));
    }
    if model.meta.vocab_fingerprint != data.vocab.fingerprint() {
        return Err(CoreError::Mismatch("model was built for a different vocabulary".into()));
    }
    if cfg.batch_patients == 0 || cfg.tasks_per_patient == 0 {
        return Err(CoreError::Config("batch sizes must be positive".into()));
    }
    if cfg.stage == Stage::Two {
        if !model.meta.has_stage(Stage::One.label()) && !cfg.allow_without_stage1 {
            return Err(CoreError::Stage("stage 2 needs a stage-1 checkpoint (or an explicit override)".into()));
        }
        if model.lora.is_none() {
            model.add_lora(cfg.lora)?;
        }
    }
    let n_trainable = model.store.set_trainable(|n| cfg.stage.trainable(n));
    if n_trainable == 0 {
        return Err(CoreError::invalid("stage has no trainable parameters"));
    }
    let tasks = select_tasks(data.tasks, &cfg.categories);
    if tasks.is_empty() {
        return Err(CoreError::Config("no tasks in the selected categories".into()));
    }
    let questions = QuestionBank::new(data.tasks, data.vocab)?;
    let cats: Vec<Category> = Category::ALL.into_iter().filter(|c| tasks.iter().any(|t| t.category == *c)).collect();
    let per_cat: Vec<Vec<String>> = cats
        .iter()
        .map(|c| tasks.iter().filter(|t| t.category == *c).map(|t| t.id.clone()).collect())
        .collect();
    let weights: Vec<f64> = per_cat.iter().map(|v| v.len() as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stream = multitask_mix(per_cat, weights, rng.gen())?;

    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_patients);
    let mut total_steps = steps_per_epoch * cfg.epochs;
    if let Some(m) = cfg.max_steps {
        total_steps = total_steps.min(m);
    }
    let mut opt = OptimState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut out = StageOutcome { losses: Vec::new(), val_auroc: Vec::new(), best_epoch: None };
    let mut best: Option<(f64, Vec<(String, Tensor)>)> = None;
    let mut step = 0;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_patients) {
            if step >= total_steps {
                break 'epochs;
            }
            let mut samples = Vec::with_capacity(chunk.len() * cfg.tasks_per_patient);
            for &pi in chunk {
                let p = &data.train[pi];
                let mask = augment(cfg.mask, cfg.group_dropout, &mut rng);
                let prefix_text = data.text.prefix_text(&p.ehr, &mask);
                let ecg = mask.include_ecg.then(|| p.patches.clone());
                for _ in 0..cfg.tasks_per_patient {
                    let task = stream.next().expect("endless stream");
                    let label = *p.labels.get(&task).ok_or_else(|| CoreError::UnknownTask(task.clone()))?;
                    samples.push((ecg.clone(), prefix_text.clone(), task, label));
                }
            }
            let batch = build_batch_ids(&samples, data.vocab, &questions)?;
            let (loss, grads) = batch_loss(model, &batch, Some(rng.gen()), true)?;
            model.store.zero_grads();
            for (id, g) in grads {
                if model.store.get(id).requires_grad {
                    model.store.get_mut(id).accumulate_grad(&g)?;
                }
            }
            if cfg.grad_clip > 0.0 {
                clip_grad_norm(&mut model.store, cfg.grad_clip);
            }
            opt.config.lr = cosine_lr(cfg.lr, step, total_steps, cfg.warmup_steps);
            opt.step(&mut model.store)?;
            step += 1;
            out.losses.push(LossPoint { step, stage: cfg.stage.label().to_string(), loss });
        }
        if !data.val.is_empty() {
            let v = validation_auroc(model, data, cfg)?;
            out.val_auroc.push(v);
            if cfg.select_best && best.as_ref().is_none_or(|(b, _)| v > *b) {
                best = Some((v, model.snapshot(|n| cfg.stage.trainable(n))));
                out.best_epoch = Some(epoch);
            }
        }
    }
    if let Some((_, snap)) = best {
        model.restore(&snap)?;
    }
    model.store.zero_grads();
    model.store.set_trainable(|_| false);
    model.meta.stages.push(cfg.stage.label().to_string());
    Ok(out)
}

/// Batch from (ecg, prefix text, task id, label) tuples, reusing
/// pre-tokenized questions.
fn build_batch_ids(
    samples: &[(Option<Arc<Tensor>>, String, String, u8)],
    vocab: &Vocab,
    questions: &QuestionBank,
) -> Result<TrainBatch> {
    let mut rows = Vec::with_capacity(samples.len());
    let mut last_prefix: Option<(&str, Vec<u32>)> = None;
    for (ecg, prefix, task, label) in samples {
        let prompt = match &last_prefix {
            Some((p, ids)) if *p == prefix.as_str() => ids.clone(),
            _ => {
                let ids = vocab.encode(prefix);
                last_prefix = Some((prefix.as_str(), ids.clone()));
                ids
            }
        };
        let question = questions.get(task);
        let n_ecg = ecg.as_ref().map(|p| p.rows()).unwrap_or(0);
        let mut tokens = vec![ECG_SLOT; n_ecg];
        tokens.extend_from_slice(&prompt);
        tokens.extend_from_slice(question);
        let answer_start = tokens.len();
        tokens.push(if *label == 1 { YES } else { NO });
        let mut answer_mask = vec![false; tokens.len()];
        answer_mask[answer_start] = true;
        rows.push(BatchRow {
            ecg: ecg.clone(),
            n_ecg,
            prompt_len: prompt.len(),
            question_len: question.len(),
            targets: tokens.clone(),
            valid: vec![true; tokens.len()],
            tokens,
            answer_mask,
        });
    }
    let seq_len = rows.iter().map(|r| r.tokens.len()).max().unwrap_or(0);
    for r in &mut rows {
        let pad = seq_len - r.tokens.len();
        r.tokens.extend(std::iter::repeat_n(PAD, pad));
        r.targets.extend(std::iter::repeat_n(PAD, pad));
        r.answer_mask.extend(std::iter::repeat_n(false, pad));
        r.valid.extend(std::iter::repeat_n(false, pad));
    }
    Ok(TrainBatch { rows, seq_len })
}

/// Fits a fixed list of samples for a number of full-batch steps; used for
/// small overfitting runs. Returns the per-step losses.
pub fn fit_samples(model: &mut FusionModel, batch: &TrainBatch, stage: Stage, lr: f32, steps: usize, seed: u64) -> Result<Vec<f32>> {
    fit_samples_until(model, batch, stage, lr, steps, seed, |_, _| Ok(false))
}

/// Like [`fit_samples`], but after each step `stop(model, loss)` may end
/// the run early.
pub fn fit_samples_until(
    model: &mut FusionModel,
    batch: &TrainBatch,
    stage: Stage,
    lr: f32,
    max_steps: usize,
    seed: u64,
    mut stop: impl FnMut(&FusionModel, f32) -> Result<bool>,
) -> Result<Vec<f32>> {
    model.store.set_trainable(|n| stage.trainable(n));
    let mut opt = OptimState::new(AdamConfig { lr, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses = Vec::with_capacity(max_steps);
    for _ in 0..max_steps {
        let (loss, grads) = batch_loss(model, batch, Some(rng.gen()), true)?;
        model.store.zero_grads();
        for (id, g) in grads {
            if model.store.get(id).requires_grad {
                model.store.get_mut(id).accumulate_grad(&g)?;
            }
        }
        clip_grad_norm(&mut model.store, 1.0);
        opt.step(&mut model.store)?;
        losses.push(loss);
        if stop(model, loss)? {
            break;
        }
    }
    model.store.zero_grads();
    model.store.set_trainable(|_| false);
    Ok(losses)
}

// ---- backbone warm-up ----------------------------------------------------

/// Settings for the self-supervised warm-up of encoder and decoder that
/// stands in for a pretrained backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of ECG patches hidden from the encoder.
    pub mask_ratio: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { lr: 1e-3, epochs: 2, batch_size: 16, mask_ratio: 0.3, seed: 0 }
    }
}

fn sum_grads(results: Vec<Result<(f32, Grads)>>) -> Result<(f32, BTreeMap<ParamId, Vec<f32>>)> {
    let mut loss = 0.0;
    let mut grads = BTreeMap::new();
    for r in results {
        let (l, g) = r?;
        loss += l;
        add_grads(&mut grads, g);
    }
    Ok((loss, grads))
}

fn apply_grads(model: &mut FusionModel, grads: BTreeMap<ParamId, Vec<f32>>, opt: &mut OptimState, clip: f32) -> Result<()> {
    model.store.zero_grads();
    for (id, g) in grads {
        if model.store.get(id).requires_grad {
            model.store.get_mut(id).accumulate_grad(&g)?;
        }
    }
    clip_grad_norm(&mut model.store, clip);
    Ok(opt.step(&mut model.store)?)
}

/// Next-token language modeling over record texts, updating every decoder
/// weight. Labels are never seen.
pub fn pretrain_decoder(model: &mut FusionModel, texts: &[Vec<u32>], cfg: &PretrainConfig) -> Result<Vec<LossPoint>> {
    let texts: Vec<&Vec<u32>> = texts.iter().filter(|t| t.len() >= 2).collect();
    if texts.is_empty() {
        return Err(CoreError::invalid("no text to pretrain on"));
    }
    if model.lora.is_some() {
        return Err(CoreError::Stage("warm-up must precede adapter training".into()));
    }
    model.store.set_trainable(|n| n.starts_with("dec."));
    let mut opt = OptimState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..texts.len()).collect();
    let total = texts.len().div_ceil(cfg.batch_size) * cfg.epochs;
    let mut losses = Vec::new();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let tokens: usize = chunk.iter().map(|&i| texts[i].len() - 1).sum();
            let m: &FusionModel = model;
            let results: Vec<Result<(f32, Grads)>> = chunk
                .par_iter()
                .map(|&i| {
                    let ids = texts[i];
                    let mut g = Graph::new();
                    let x = m.decoder.embed(&mut g, &m.store, &ids[..ids.len() - 1])?;
                    let (h, _) = m.decoder.hidden(&mut g, &m.store, Some(x), &[], &mut Ctx::eval())?;
                    let logits = m.decoder.logits(&mut g, &m.store, h.expect("prefix present"))?;
                    let targets: Vec<usize> = ids[1..].iter().map(|&t| t as usize).collect();
                    let mask = vec![true; targets.len()];
                    let ce = g.cross_entropy(logits, &targets, &mask)?;
                    let loss = g.scale(ce, targets.len() as f32 / tokens as f32);
                    g.backward(loss)?;
                    Ok((g.scalar(loss), g.take_param_grads()))
                })
                .collect();
            let (loss, grads) = sum_grads(results)?;
            opt.config.lr = cosine_lr(cfg.lr, step, total, 20);
            apply_grads(model, grads, &mut opt, 1.0)?;
            step += 1;
            losses.push(LossPoint { step, stage: "warmup-decoder".into(), loss });
        }
    }
    model.store.zero_grads();
    model.store.set_trainable(|_| false);
    model.meta.stages.push("warmup-decoder".into());
    Ok(losses)
}

/// Masked-patch reconstruction: a fraction of patches is zeroed at the
/// input and a temporary linear head predicts their values from the
/// encoder output. Only encoder weights are kept.
pub fn pretrain_encoder(model: &mut FusionModel, patches: &[Arc<Tensor>], cfg: &PretrainConfig) -> Result<Vec<LossPoint>> {
    if patches.is_empty() {
        return Err(CoreError::invalid("no ECG to pretrain on"));
    }
    if model.lora.is_some() {
        return Err(CoreError::Stage("warm-up must precede adapter training".into()));
    }
    model.store.set_trainable(|n| n.starts_with("enc."));
    let d = model.config.encoder.d_ecg;
    let width = patches[0].cols();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head_w = crate::nn::normal_tensor(&[d, width], 1.0 / (d as f32).sqrt(), &mut rng).data;
    let mut head_b = vec![0.0f32; width];
    let (mut mw, mut mb) = (Moments::default(), Moments::default());
    let mut opt = OptimState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let total = patches.len().div_ceil(cfg.batch_size) * cfg.epochs;
    let mut losses = Vec::new();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let jobs: Vec<(usize, Vec<usize>)> = chunk
                .iter()
                .map(|&i| {
                    let n = patches[i].rows();
                    let mut hidden: Vec<usize> = (0..n).filter(|_| rng.gen::<f64>() < cfg.mask_ratio).collect();
                    if hidden.is_empty() {
                        hidden.push(rng.gen_range(0..n));
                    }
                    (i, hidden)
                })
                .collect();
            let m: &FusionModel = model;
            let (hw, hb) = (&head_w, &head_b);
            let n_jobs = jobs.len() as f32;
            let results: Vec<Result<(f32, Grads, Vec<f32>, Vec<f32>)>> = jobs
                .par_iter()
                .map(|(i, hidden)| {
                    let p = &patches[*i];
                    let mut input = (**p).clone();
                    for &r in hidden {
                        input.data[r * width..(r + 1) * width].iter_mut().for_each(|v| *v = 0.0);
                    }
                    let mut g = Graph::new();
                    let x = g.leaf(input);
                    let h = m.encoder.forward(&mut g, &m.store, x, &mut Ctx::eval())?;
                    let rows: Vec<usize> = hidden.clone();
                    let hsel = g.gather_rows(h, &rows)?;
                    let w = g.input(vec![d, width], hw.clone())?;
                    let b = g.input(vec![width], hb.clone())?;
                    let y = g.matmul(hsel, w)?;
                    let y = g.add_bias(y, b)?;
                    let target: Vec<f32> = rows.iter().flat_map(|&r| p.row(r).iter().copied()).collect();
                    let mse = g.mse(y, target)?;
                    let loss = g.scale(mse, 1.0 / n_jobs);
                    g.backward(loss)?;
                    let gw = g.grad(w).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; d * width]);
                    let gb = g.grad(b).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; width]);
                    Ok((g.scalar(loss), g.take_param_grads(), gw, gb))
                })
                .collect();
            let mut loss = 0.0;
            let mut grads = BTreeMap::new();
            let mut gw = vec![0.0f32; d * width];
            let mut gb = vec![0.0f32; width];
            for r in results {
                let (l, g, a, b) = r?;
                loss += l;
                add_grads(&mut grads, g);
                gw.iter_mut().zip(&a).for_each(|(x, y)| *x += y);
                gb.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            }
            opt.config.lr = cosine_lr(cfg.lr, step, total, 20);
            apply_grads(model, grads, &mut opt, 1.0)?;
            let hc = AdamConfig { lr: opt.config.lr, ..AdamConfig::default() };
            adam_update(&mut head_w, &gw, &mut mw, &hc, opt.step)?;
            adam_update(&mut head_b, &gb, &mut mb, &hc, opt.step)?;
            step += 1;
            losses.push(LossPoint { step, stage: "warmup-encoder".into(), loss });
        }
    }
    model.store.zero_grads();
    model.store.set_trainable(|_| false);
    model.meta.stages.push("warmup-encoder".into());
    Ok(losses)
}
