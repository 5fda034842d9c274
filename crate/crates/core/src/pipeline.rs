//! End-to-end steps shared by the command line and the experiment suite:
//! cohort preparation, backbone warm-up and the two training stages.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{cohort_vocab, prepare_patients, PreparedPatient, QuestionBank, TextSetup};
use crate::ehr::AblationMask;
use crate::model::FusionModel;
use crate::synth::{Category, Cohort, Split};
use crate::tokenizer::{Vocab, NO, YES};
use crate::training::{pretrain_decoder, pretrain_encoder, train_stage, LossPoint, Stage, StageOutcome, TrainData};
use crate::{CoreError, Result};

/// A cohort with its text setup, vocabulary and prepared splits.
pub struct Workspace {
    pub cohort: Cohort,
    pub text: TextSetup,
    pub vocab: Vocab,
    pub train: Vec<PreparedPatient>,
    /// Tail of the training split kept aside for checkpoint selection.
    pub val: Vec<PreparedPatient>,
    pub test: Vec<PreparedPatient>,
}

impl Workspace {
    pub fn new(cfg: &RunConfig, cohort: Cohort, vocab: Option<Vocab>) -> Result<Self> {
        let text = cfg.text_setup();
        let vocab = match vocab {
            Some(v) => v,
            None => cohort_vocab(&cohort, &text, cfg.vocab_max)?,
        };
        let mut train = prepare_patients(cohort.patients.iter().filter(|p| p.split == Split::Train).collect::<Vec<_>>(), &cfg.encoder)?;
        let test = prepare_patients(cohort.patients.iter().filter(|p| p.split == Split::Test).collect::<Vec<_>>(), &cfg.encoder)?;
        if cfg.val_patients >= train.len() {
            return Err(CoreError::Config(format!(
                "{} validation patients requested but only {} training patients",
                cfg.val_patients,
                train.len()
            )));
        }
        let val = train.split_off(train.len() - cfg.val_patients);
        Ok(Workspace { cohort, text, vocab, train, val, test })
    }

    pub fn data(&self) -> TrainData<'_> {
        TrainData { train: &self.train, val: &self.val, tasks: &self.cohort.tasks, vocab: &self.vocab, text: &self.text }
    }
}

/// A freshly initialized model, optionally with its backbone warmed up:
/// numeric tokens get a value code, then decoder and encoder train on
/// unlabeled training text and ECG.
pub fn backbone(cfg: &RunConfig, ws: &Workspace) -> Result<(FusionModel, Vec<LossPoint>)> {
    let mut model = FusionModel::new(cfg.model_config(ws.vocab.len()), ws.vocab.fingerprint())?;
    let mut losses = Vec::new();
    if cfg.warmup_enabled && cfg.warmup.epochs > 0 {
        model.encode_number_magnitudes(&ws.vocab)?;
        let texts = warmup_texts(ws, cfg.seed)?;
        let w = cfg.warmup();
        losses.extend(pretrain_decoder(&mut model, &texts, &w)?);
        let patches: Vec<_> = ws.train.iter().map(|p| p.patches.clone()).collect();
        losses.extend(pretrain_encoder(&mut model, &patches, &w)?);
    }
    Ok((model, losses))
}

/// Decoder warm-up documents: each training record followed by one
/// question and a coin-flip answer. The answers carry no label information;
/// they only teach the answer format.
pub fn warmup_texts(ws: &Workspace, seed: u64) -> Result<Vec<Vec<u32>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5741_524d);
    let questions = QuestionBank::new(&ws.cohort.tasks, &ws.vocab)?;
    let ids: Vec<&String> = questions.ids.keys().collect();
    Ok(ws
        .train
        .iter()
        .map(|p| {
            let mut t = ws.vocab.encode(&ws.text.prefix_text(&p.ehr, &AblationMask::full()));
            t.extend_from_slice(questions.get(ids[rng.gen_range(0..ids.len())]));
            t.push(if rng.gen::<bool>() { YES } else { NO });
            t
        })
        .collect())
}

/// Runs stage 1 then stage 2 on a copy of `base` for one input variant and
/// category selection.
pub fn train_two_stage(
    cfg: &RunConfig,
    ws: &Workspace,
    base: &FusionModel,
    mask: AblationMask,
    categories: &[Category],
) -> Result<(FusionModel, Vec<StageOutcome>)> {
    let mut model = base.clone();
    let data = ws.data();
    let mut outcomes = Vec::new();
    for stage in [Stage::One, Stage::Two] {
        let mut sc = cfg.stage(stage);
        sc.mask = mask;
        sc.categories = categories.to_vec();
        if stage == Stage::One && !mask.include_ecg {
            // Without ECG input the projector never receives a gradient.
            continue;
        }
        if stage == Stage::Two {
            sc.allow_without_stage1 = !mask.include_ecg;
        }
        outcomes.push(train_stage(&mut model, &data, &sc)?);
    }
    Ok((model, outcomes))
}
