//! AUROC, bootstrap intervals and report aggregation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::synth::Category;
use crate::{CoreError, Result};

/// Scores and binary labels for one sub-task.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(CoreError::invalid(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(CoreError::invalid(format!("label {l} is not 0 or 1")));
        }
        Ok(ScoredSet { scores, labels })
    }

    pub fn push(&mut self, score: f64, label: u8) {
        self.scores.push(score);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }
}

/// Mann–Whitney AUROC via average ranks; ties count one half.
pub fn auroc(s: &ScoredSet) -> Result<f64> {
    auroc_parts(&s.scores, &s.labels)
}

fn auroc_parts(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CoreError::Degenerate(format!(
            "AUROC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    if let Some(x) = scores.iter().find(|x| x.is_nan()) {
        return Err(CoreError::invalid(format!("score {x} is not comparable")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("no NaN"));
    // Sum of positive ranks, ranks doubled to stay integral under ties.
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 averaged, doubled: (i+1)+(j+1).
        let avg2 = (i + j + 2) as u128;
        let pos_in_run = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank2_sum += avg2 * pos_in_run;
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    // U = R_pos - P(P+1)/2; in doubled units: 2U = rank2_sum - P(P+1).
    let u2 = rank2_sum - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Percentile interval (2.5th, 97.5th) over `b` resamples with
/// replacement. Single-class resamples are redrawn, at most
/// `100 * b` redraws in total.
pub fn bootstrap_ci(s: &ScoredSet, b: usize, seed: u64) -> Result<(f64, f64)> {
    auroc(s)?;
    if b == 0 {
        return Err(CoreError::invalid("bootstrap needs at least one resample"));
    }
    let n = s.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(b);
    let mut retries_left = 100 * b;
    let mut scores = vec![0.0; n];
    let mut labels = vec![0u8; n];
    while values.len() < b {
        for k in 0..n {
            let i = rng.gen_range(0..n);
            scores[k] = s.scores[i];
            labels[k] = s.labels[i];
        }
        match auroc_parts(&scores, &labels) {
            Ok(v) => values.push(v),
            Err(CoreError::Degenerate(_)) if retries_left > 0 => retries_left -= 1,
            Err(CoreError::Degenerate(_)) => {
                return Err(CoreError::Degenerate("bootstrap retry budget exhausted".into()))
            }
            Err(e) => return Err(e),
        }
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    Ok((percentile(&values, 2.5), percentile(&values, 97.5)))
}

/// Linear-interpolated percentile of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub const ROBUST_THRESHOLD: f64 = 0.8;
pub const MIN_CLASS_COUNT: usize = 5;
pub const CI_METHOD: &str = "percentile-bootstrap";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskResult {
    pub id: String,
    pub auroc: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl SubtaskResult {
    /// Evaluates one sub-task. Degenerate sets yield `None`.
    pub fn evaluate(id: &str, s: &ScoredSet, b: usize, seed: u64) -> Result<Option<Self>> {
        let a = match auroc(s) {
            Ok(a) => a,
            Err(CoreError::Degenerate(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let (ci_lo, ci_hi) = if b == 0 { (a, a) } else { bootstrap_ci(s, b, seed)? };
        Ok(Some(SubtaskResult {
            id: id.to_string(),
            auroc: a,
            ci_lo,
            ci_hi,
            n_pos: s.positives(),
            n_neg: s.negatives(),
        }))
    }

    pub fn countable(&self) -> bool {
        self.n_pos >= MIN_CLASS_COUNT && self.n_neg >= MIN_CLASS_COUNT
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySummary {
    pub category: Category,
    pub n_subtasks: usize,
    pub mean_auroc: f64,
    pub robust: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ci_method: String,
    pub bootstrap_resamples: usize,
    pub seed: u64,
    pub overall: f64,
    pub robust_total: usize,
    pub categories: Vec<CategorySummary>,
    pub subtasks: Vec<SubtaskResult>,
    /// Sub-tasks with fewer than five positives or negatives; reported but
    /// never counted as robust.
    pub excluded: Vec<String>,
}

impl EvalReport {
    pub fn category(&self, c: Category) -> Option<&CategorySummary> {
        self.categories.iter().find(|s| s.category == c)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CoreError::invalid(format!("report: {e}")))
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<15} {:>9} {:>8} {:>7}\n", "category", "subtasks", "AUROC", "robust"));
        for c in &self.categories {
            out.push_str(&format!(
                "{:<15} {:>9} {:>8.4} {:>7}\n",
                c.category.name(),
                c.n_subtasks,
                c.mean_auroc,
                c.robust
            ));
        }
        out.push_str(&format!("{:<15} {:>9} {:>8.4} {:>7}\n", "overall", self.subtasks.len(), self.overall, self.robust_total));
        out.push_str(&format!(
            "CI: {} ({} resamples, seed {}); excluded from robust counts: {}\n",
            self.ci_method,
            self.bootstrap_resamples,
            self.seed,
            if self.excluded.is_empty() { "none".to_string() } else { self.excluded.join(", ") }
        ));
        out
    }
}

/// Builds the report: category means over sub-tasks, overall as the
/// unweighted mean of category means, robust counts per category.
/// Categories without sub-tasks are left out of the overall mean.
pub fn aggregate(
    results: &[SubtaskResult],
    categories: &BTreeMap<String, Category>,
    bootstrap_resamples: usize,
    seed: u64,
) -> Result<EvalReport> {
    let mut by_cat: BTreeMap<Category, Vec<&SubtaskResult>> = BTreeMap::new();
    for r in results {
        let c = categories
            .get(&r.id)
            .ok_or_else(|| CoreError::invalid(format!("sub-task {:?} has no category", r.id)))?;
        by_cat.entry(*c).or_default().push(r);
    }
    let mut summaries = Vec::new();
    for (c, rs) in &by_cat {
        let mut sorted: Vec<f64> = rs.iter().map(|r| r.auroc).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        summaries.push(CategorySummary {
            category: *c,
            n_subtasks: rs.len(),
            mean_auroc: sorted.iter().sum::<f64>() / sorted.len() as f64,
            robust: rs.iter().filter(|r| r.countable() && r.ci_lo > ROBUST_THRESHOLD).count(),
        });
    }
    if summaries.is_empty() {
        return Err(CoreError::Degenerate("no evaluable sub-tasks".into()));
    }
    let overall = summaries.iter().map(|s| s.mean_auroc).sum::<f64>() / summaries.len() as f64;
    let mut subtasks: Vec<SubtaskResult> = results.to_vec();
    subtasks.sort_by(|a, b| a.id.cmp(&b.id));
    let excluded = subtasks.iter().filter(|r| !r.countable()).map(|r| r.id.clone()).collect();
    Ok(EvalReport {
        ci_method: CI_METHOD.to_string(),
        bootstrap_resamples,
        seed,
        overall,
        robust_total: summaries.iter().map(|s| s.robust).sum(),
        categories: summaries,
        subtasks,
        excluded,
    })
}

/// 100·(a−b)/b rounded to one decimal.
pub fn relative_improvement(a: f64, b: f64) -> Result<f64> {
    if !(b > 0.0) {
        return Err(CoreError::invalid(format!("baseline {b} must be positive")));
    }
    Ok((1000.0 * (a - b) / b).round() / 10.0)
}

/// Rounds to `places` decimals, half away from zero.
pub fn round_to(x: f64, places: i32) -> f64 {
    let f = 10f64.powi(places);
    (x * f).round() / f
}

/// Mean and sample standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One row of the score file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub subtask_id: String,
    pub sample_id: String,
    pub score: f64,
    pub label: u8,
}

pub fn scores_csv(rows: &[ScoreRow]) -> String {
    let mut out = String::from("subtask_id,sample_id,score,label\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.8},{}\n", r.subtask_id, r.sample_id, r.score, r.label));
    }
    out
}

/// Groups score rows into per-sub-task sets, keyed by id.
pub fn group_scores(rows: &[ScoreRow]) -> BTreeMap<String, ScoredSet> {
    let mut sets: BTreeMap<String, ScoredSet> = BTreeMap::new();
    for r in rows {
        sets.entry(r.subtask_id.clone()).or_default().push(r.score, r.label);
    }
    sets
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_endpoints() {
        let v = [1.0, 2.0, 3.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 100.0), 3.0);
        assert_eq!(percentile(&v, 50.0), 2.0);
    }

    #[test]
    fn rounding_helper() {
        assert_eq!(round_to(89.3675, 2), 89.37);
    }
}
