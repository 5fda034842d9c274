//! Turning cohort patients into model-ready pieces: normalized ECG patches,
//! prompt and question token ids.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use unipact_tensor::Tensor;

use crate::ecg::{prepare, EncoderConfig};
use crate::ehr::{
    assemble_full_text, render_question, AblationMask, EhrRecord, PromptText, TemplateRegistry, DEFAULT_ROLE,
    DEFAULT_TASK_DESC,
};
use crate::synth::{Category, Cohort, Patient, TaskRegistry, TaskSpec};
use crate::tokenizer::{build_vocab, Vocab};
use crate::Result;

/// Fixed text framing around the record.
#[derive(Debug, Clone, PartialEq)]
pub struct TextSetup {
    pub role: String,
    pub task_desc: String,
    pub templates: TemplateRegistry,
}

impl Default for TextSetup {
    fn default() -> Self {
        TextSetup {
            role: DEFAULT_ROLE.to_string(),
            task_desc: DEFAULT_TASK_DESC.to_string(),
            templates: TemplateRegistry::default(),
        }
    }
}

impl TextSetup {
    pub fn prompt(&self, rec: &EhrRecord, mask: &AblationMask) -> PromptText {
        self.templates.render_prompt(rec, mask)
    }

    /// Role, task description and record text: the part shared by every
    /// question about one patient.
    pub fn prefix_text(&self, rec: &EhrRecord, mask: &AblationMask) -> String {
        assemble_full_text(&self.role, &self.task_desc, &self.prompt(rec, mask), "")
    }

    pub fn full_text(&self, rec: &EhrRecord, mask: &AblationMask, question: &str) -> String {
        assemble_full_text(&self.role, &self.task_desc, &self.prompt(rec, mask), question)
    }
}

/// A patient with its ECG already normalized and patched.
#[derive(Debug, Clone)]
pub struct PreparedPatient {
    pub id: String,
    pub ehr: EhrRecord,
    pub patches: Arc<Tensor>,
    pub labels: BTreeMap<String, u8>,
}

pub fn prepare_patients<'a>(
    patients: impl IntoParallelIterator<Item = &'a Patient>,
    enc: &EncoderConfig,
) -> Result<Vec<PreparedPatient>> {
    patients
        .into_par_iter()
        .map(|p| {
            Ok(PreparedPatient {
                id: p.id.clone(),
                ehr: p.ehr.clone(),
                patches: Arc::new(prepare(&p.ecg, enc)?),
                labels: p.labels.clone(),
            })
        })
        .collect()
}

/// Question token ids per task, rendered with the answer instruction.
#[derive(Debug, Clone)]
pub struct QuestionBank {
    pub ids: BTreeMap<String, Vec<u32>>,
}

impl QuestionBank {
    pub fn new(tasks: &TaskRegistry, vocab: &Vocab) -> Result<Self> {
        let mut ids = BTreeMap::new();
        for t in &tasks.tasks {
            ids.insert(t.id.clone(), vocab.encode(&render_question(&t.id, &t.question)?));
        }
        Ok(QuestionBank { ids })
    }

    pub fn get(&self, task: &str) -> &[u32] {
        &self.ids[task]
    }
}

/// Tasks of the given categories, in registry order.
pub fn select_tasks<'a>(tasks: &'a TaskRegistry, categories: &[Category]) -> Vec<&'a TaskSpec> {
    tasks.tasks.iter().filter(|t| categories.contains(&t.category)).collect()
}

/// Every text the model will read: full-record prompts of all patients
/// and every question.
pub fn corpus(cohort: &Cohort, text: &TextSetup) -> Result<Vec<String>> {
    let mut docs: Vec<String> =
        cohort.patients.iter().map(|p| text.prefix_text(&p.ehr, &AblationMask::full())).collect();
    for t in &cohort.tasks.tasks {
        docs.push(render_question(&t.id, &t.question)?);
    }
    Ok(docs)
}

pub fn cohort_vocab(cohort: &Cohort, text: &TextSetup, max_size: usize) -> Result<Vocab> {
    build_vocab(corpus(cohort, text)?, max_size)
}

/// Serializable form of [`AblationMask`] names used on the command line
/// and in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputVariant {
    Full,
    EcgOnly,
    EhrOnly,
}

impl InputVariant {
    pub fn mask(self) -> AblationMask {
        match self {
            InputVariant::Full => AblationMask::full(),
            InputVariant::EcgOnly => AblationMask::ecg_only(),
            InputVariant::EhrOnly => AblationMask::ehr_only(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(InputVariant::Full),
            "ecg-only" | "ecg_only" => Ok(InputVariant::EcgOnly),
            "ehr-only" | "ehr_only" => Ok(InputVariant::EhrOnly),
            _ => Err(crate::CoreError::invalid(format!("unknown input variant {s:?}"))),
        }
    }
}
