//! Scoring cohorts with a model, building reports and ablation tables.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{select_tasks, PreparedPatient, QuestionBank, TextSetup};
use crate::ehr::{AblationMask, Group};
use crate::metrics::{aggregate, group_scores, mean_sd, EvalReport, ScoreRow, SubtaskResult};
use crate::model::FusionModel;
use crate::synth::{Category, TaskRegistry, TaskSpec};
use crate::tokenizer::Vocab;
use crate::{CoreError, Result};

/// Scores every (patient, task) pair under `mask`. One shared-prefix pass
/// per patient; rows come out ordered by patient, then task.
pub fn score_rows(
    model: &FusionModel,
    vocab: &Vocab,
    text: &TextSetup,
    tasks: &[&TaskSpec],
    patients: &[PreparedPatient],
    mask: &AblationMask,
) -> Result<Vec<ScoreRow>> {
    let bank = QuestionBank::new(
        &TaskRegistry { tasks: tasks.iter().map(|t| (*t).clone()).collect() },
        vocab,
    )?;
    let questions: Vec<Vec<u32>> = tasks.iter().map(|t| bank.get(&t.id).to_vec()).collect();
    let per_patient: Vec<Result<Vec<ScoreRow>>> = patients
        .par_iter()
        .map(|p| {
            let prompt = vocab.encode(&text.prefix_text(&p.ehr, mask));
            let ecg = mask.include_ecg.then_some(&*p.patches);
            let scores = model.score_questions(ecg, &prompt, &questions)?;
            tasks
                .iter()
                .zip(scores)
                .map(|(t, score)| {
                    let label = *p.labels.get(&t.id).ok_or_else(|| CoreError::UnknownTask(t.id.clone()))?;
                    Ok(ScoreRow { subtask_id: t.id.clone(), sample_id: p.id.clone(), score, label })
                })
                .collect()
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_patient {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Per-sub-task AUROC with bootstrap intervals, aggregated into a report.
/// Single-class sub-tasks are skipped.
pub fn evaluate_rows(rows: &[ScoreRow], tasks: &TaskRegistry, bootstrap: usize, seed: u64) -> Result<EvalReport> {
    let sets = group_scores(rows);
    let entries: Vec<(&String, &crate::metrics::ScoredSet)> = sets.iter().collect();
    let results: Vec<Option<SubtaskResult>> = entries
        .par_iter()
        .enumerate()
        .map(|(i, (id, s))| SubtaskResult::evaluate(id, s, bootstrap, seed.wrapping_add(i as u64)))
        .collect::<Result<_>>()?;
    let results: Vec<SubtaskResult> = results.into_iter().flatten().collect();
    aggregate(&results, &tasks.category_map(), bootstrap, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Plan {
    /// ECG-only, record-only and multimodal models.
    Modality,
    /// Per-category single-task models against the unified model.
    Paradigm,
    /// The full model with one input component removed at test time.
    FeatureRemoval,
}

impl Plan {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "A" | "a" | "modality" => Ok(Plan::Modality),
            "B" | "b" | "paradigm" => Ok(Plan::Paradigm),
            "C" | "c" | "feature-removal" => Ok(Plan::FeatureRemoval),
            _ => Err(CoreError::invalid(format!("unknown ablation plan {s:?} (expected A, B or C)"))),
        }
    }

    pub fn letter(self) -> &'static str {
        match self {
            Plan::Modality => "A",
            Plan::Paradigm => "B",
            Plan::FeatureRemoval => "C",
        }
    }

    /// Checkpoint names the plan reads.
    pub fn required_checkpoints(self) -> Vec<String> {
        match self {
            Plan::Modality => vec!["ecg_only".into(), "ehr_only".into(), "full".into()],
            Plan::Paradigm => {
                let mut v: Vec<String> = Category::ALL.iter().map(|c| format!("single_{}", c.name())).collect();
                v.push("full".into());
                v
            }
            Plan::FeatureRemoval => vec!["full".into()],
        }
    }
}

pub fn feature_removal_rows() -> Vec<(&'static str, AblationMask)> {
    let full = AblationMask::full();
    vec![
        ("w/o Demographics", full.without_group(Group::Demographics)),
        ("w/o Biometrics", full.without_group(Group::Biometrics)),
        ("w/o Vitals", full.without_group(Group::Vitals)),
        ("w/o ECG", AblationMask { include_ecg: false, ..full }),
        ("w/o EHR", AblationMask { include_ehr: false, ..full }.normalized()),
        ("Full model", full),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub categories: BTreeMap<Category, f64>,
    pub mean: f64,
    pub sd: f64,
    pub overall: f64,
}

impl AblationRow {
    fn from_categories(name: &str, categories: BTreeMap<Category, f64>) -> Self {
        let vals: Vec<f64> = categories.values().copied().collect();
        let (mean, sd) = mean_sd(&vals);
        AblationRow { name: name.to_string(), categories, mean, sd, overall: mean }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub plan: Plan,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn render(&self) -> String {
        let mut out = format!("Ablation plan {}\n", self.plan.letter());
        out.push_str(&format!("{:<24}", "setting"));
        for c in Category::ALL {
            out.push_str(&format!(" {:>13}", c.name()));
        }
        out.push_str(&format!(" {:>16}\n", "mean±sd"));
        for r in &self.rows {
            out.push_str(&format!("{:<24}", r.name));
            for c in Category::ALL {
                match r.categories.get(&c) {
                    Some(v) => out.push_str(&format!(" {:>13.2}", 100.0 * v)),
                    None => out.push_str(&format!(" {:>13}", "-")),
                }
            }
            out.push_str(&format!(" {:>10.2}±{:<5.2}\n", 100.0 * r.mean, 100.0 * r.sd));
        }
        out
    }
}

/// Everything needed to score one model.
pub struct EvalContext<'a> {
    pub vocab: &'a Vocab,
    pub text: &'a TextSetup,
    pub tasks: &'a TaskRegistry,
    pub patients: &'a [PreparedPatient],
}

impl EvalContext<'_> {
    pub fn category_aurocs(&self, model: &FusionModel, mask: &AblationMask, cats: &[Category]) -> Result<BTreeMap<Category, f64>> {
        let tasks = select_tasks(self.tasks, cats);
        let rows = score_rows(model, self.vocab, self.text, &tasks, self.patients, mask)?;
        let report = evaluate_rows(&rows, self.tasks, 0, 0)?;
        Ok(report.categories.iter().map(|c| (c.category, c.mean_auroc)).collect())
    }

    pub fn report(&self, model: &FusionModel, mask: &AblationMask, bootstrap: usize, seed: u64) -> Result<(Vec<ScoreRow>, EvalReport)> {
        let tasks: Vec<&TaskSpec> = self.tasks.tasks.iter().collect();
        let rows = score_rows(model, self.vocab, self.text, &tasks, self.patients, mask)?;
        let report = evaluate_rows(&rows, self.tasks, bootstrap, seed)?;
        Ok((rows, report))
    }
}

pub fn run_ablation(
    checkpoints: &BTreeMap<String, FusionModel>,
    ctx: &EvalContext<'_>,
    plan: Plan,
) -> Result<AblationTable> {
    for name in plan.required_checkpoints() {
        if !checkpoints.contains_key(&name) {
            return Err(CoreError::MissingCheckpoint(format!("plan {} cell {name:?}", plan.letter())));
        }
    }
    let all = Category::ALL;
    let mut rows = Vec::new();
    match plan {
        Plan::Modality => {
            for (name, ck, mask) in [
                ("ECG-based", "ecg_only", AblationMask::ecg_only()),
                ("EHR-based", "ehr_only", AblationMask::ehr_only()),
                ("Multimodal", "full", AblationMask::full()),
            ] {
                rows.push(AblationRow::from_categories(name, ctx.category_aurocs(&checkpoints[ck], &mask, &all)?));
            }
        }
        Plan::Paradigm => {
            let mut single = BTreeMap::new();
            for c in all {
                let model = &checkpoints[&format!("single_{}", c.name())];
                let m = ctx.category_aurocs(model, &AblationMask::full(), &[c])?;
                single.insert(c, m[&c]);
            }
            rows.push(AblationRow::from_categories("Single-Task Learning", single));
            rows.push(AblationRow::from_categories(
                "Multi-Task Learning",
                ctx.category_aurocs(&checkpoints["full"], &AblationMask::full(), &all)?,
            ));
        }
        Plan::FeatureRemoval => {
            for (name, mask) in feature_removal_rows() {
                rows.push(AblationRow::from_categories(name, ctx.category_aurocs(&checkpoints["full"], &mask, &all)?));
            }
        }
    }
    Ok(AblationTable { plan, rows })
}
