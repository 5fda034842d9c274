//! Structured record → natural-language prompt segment.

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

/// One patient's structured record. Every field is independently optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EhrRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub race: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sex: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bmi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heartrate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resprate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub o2sat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sbp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dbp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pain: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Demographics,
    Vitals,
    Biometrics,
}

impl Group {
    /// Rendering order.
    pub const ALL: [Group; 3] = [Group::Demographics, Group::Vitals, Group::Biometrics];

    pub fn name(self) -> &'static str {
        match self {
            Group::Demographics => "demographics",
            Group::Vitals => "vitals",
            Group::Biometrics => "biometrics",
        }
    }
}

pub enum FieldValue<'a> {
    Number(f64),
    Text(&'a str),
}

impl EhrRecord {
    pub const DEMOGRAPHIC_FIELDS: [&'static str; 3] = ["age", "race", "sex"];
    pub const BIOMETRIC_FIELDS: [&'static str; 3] = ["bmi", "weight", "height"];
    pub const VITAL_FIELDS: [&'static str; 7] =
        ["temperature", "heartrate", "resprate", "o2sat", "sbp", "dbp", "pain"];

    pub fn fields(group: Group) -> &'static [&'static str] {
        match group {
            Group::Demographics => &Self::DEMOGRAPHIC_FIELDS,
            Group::Vitals => &Self::VITAL_FIELDS,
            Group::Biometrics => &Self::BIOMETRIC_FIELDS,
        }
    }

    pub fn field(&self, name: &str) -> Option<FieldValue<'_>> {
        let num = |v: Option<f64>| v.map(FieldValue::Number);
        match name {
            "age" => num(self.age),
            "race" => self.race.as_deref().map(FieldValue::Text),
            "sex" => self.sex.as_deref().map(FieldValue::Text),
            "bmi" => num(self.bmi),
            "weight" => num(self.weight),
            "height" => num(self.height),
            "temperature" => num(self.temperature),
            "heartrate" => num(self.heartrate),
            "resprate" => num(self.resprate),
            "o2sat" => num(self.o2sat),
            "sbp" => num(self.sbp),
            "dbp" => num(self.dbp),
            "pain" => num(self.pain),
            _ => None,
        }
    }

    pub fn set_number(&mut self, name: &str, value: f64) -> Result<()> {
        let slot = match name {
            "age" => &mut self.age,
            "bmi" => &mut self.bmi,
            "weight" => &mut self.weight,
            "height" => &mut self.height,
            "temperature" => &mut self.temperature,
            "heartrate" => &mut self.heartrate,
            "resprate" => &mut self.resprate,
            "o2sat" => &mut self.o2sat,
            "sbp" => &mut self.sbp,
            "dbp" => &mut self.dbp,
            "pain" => &mut self.pain,
            _ => return Err(CoreError::invalid(format!("unknown numeric field {name:?}"))),
        };
        *slot = Some(value);
        Ok(())
    }

    /// Parses `key=value` pairs separated by commas or semicolons, e.g.
    /// `age=30,sex=female,heartrate=88`.
    pub fn parse_inline(s: &str) -> Result<Self> {
        let mut rec = EhrRecord::default();
        for part in s.split([',', ';']).map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| CoreError::invalid(format!("record entry {part:?} is not key=value")))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "race" => rec.race = Some(v.to_string()),
                "sex" => rec.sex = Some(v.to_string()),
                _ => {
                    let x: f64 = v
                        .parse()
                        .map_err(|_| CoreError::invalid(format!("field {k}: {v:?} is not a number")))?;
                    rec.set_number(k, x)?;
                }
            }
        }
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        for name in Group::ALL.iter().flat_map(|&g| Self::fields(g)) {
            if let Some(FieldValue::Number(x)) = self.field(name) {
                if !x.is_finite() {
                    return Err(CoreError::invalid(format!("field {name} is not finite ({x})")));
                }
            }
        }
        Ok(())
    }
}

/// Which inputs a forward pass may see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationMask {
    pub include_demographics: bool,
    pub include_biometrics: bool,
    pub include_vitals: bool,
    pub include_ecg: bool,
    pub include_ehr: bool,
}

impl Default for AblationMask {
    fn default() -> Self {
        Self::full()
    }
}

impl AblationMask {
    pub fn full() -> Self {
        AblationMask {
            include_demographics: true,
            include_biometrics: true,
            include_vitals: true,
            include_ecg: true,
            include_ehr: true,
        }
    }

    pub fn ecg_only() -> Self {
        AblationMask { include_ehr: false, ..Self::full() }.normalized()
    }

    pub fn ehr_only() -> Self {
        AblationMask { include_ecg: false, ..Self::full() }
    }

    /// Applies the rule that dropping the record drops all three groups.
    pub fn normalized(mut self) -> Self {
        if !self.include_ehr {
            self.include_demographics = false;
            self.include_biometrics = false;
            self.include_vitals = false;
        }
        self
    }

    pub fn includes(&self, group: Group) -> bool {
        let m = self.normalized();
        match group {
            Group::Demographics => m.include_demographics,
            Group::Vitals => m.include_vitals,
            Group::Biometrics => m.include_biometrics,
        }
    }

    pub fn without_group(self, group: Group) -> Self {
        let mut m = self;
        match group {
            Group::Demographics => m.include_demographics = false,
            Group::Vitals => m.include_vitals = false,
            Group::Biometrics => m.include_biometrics = false,
        }
        m.normalized()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptText {
    pub text: String,
    pub group_spans: Vec<(Group, Range<usize>)>,
}

impl PromptText {
    pub fn span(&self, group: Group) -> Option<Range<usize>> {
        self.group_spans.iter().find(|(g, _)| *g == group).map(|(_, r)| r.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct SentenceTemplate {
    header: String,
    items: Vec<String>,
    terminator: String,
}

impl SentenceTemplate {
    fn parse(raw: &str) -> Result<Self> {
        let raw = raw.trim();
        let (head, rest) = raw
            .split_once(": ")
            .ok_or_else(|| CoreError::Config(format!("template {raw:?} lacks a \"Header: \" prefix")))?;
        let (body, terminator) = match rest.strip_suffix('.') {
            Some(b) => (b, "."),
            None => (rest, ""),
        };
        let items: Vec<String> = body.split(", ").map(str::to_string).collect();
        for item in &items {
            if placeholders(item).is_empty() {
                return Err(CoreError::Config(format!("template item {item:?} has no {{field}}")));
            }
        }
        Ok(SentenceTemplate {
            header: format!("{head}: "),
            items,
            terminator: terminator.to_string(),
        })
    }

    fn render(&self, rec: &EhrRecord) -> Option<String> {
        let parts: Vec<String> = self.items.iter().filter_map(|it| render_item(it, rec)).collect();
        if parts.is_empty() {
            return None;
        }
        Some(format!("{}{}{}", self.header, parts.join(", "), self.terminator))
    }
}

fn placeholders(item: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = item;
    while let Some(open) = rest.find('{') {
        let Some(close) = rest[open..].find('}') else { break };
        out.push(&rest[open + 1..open + close]);
        rest = &rest[open + close + 1..];
    }
    out
}

fn render_item(item: &str, rec: &EhrRecord) -> Option<String> {
    let mut s = item.to_string();
    for name in placeholders(item) {
        let value = match rec.field(name)? {
            FieldValue::Number(x) => format_number(x),
            FieldValue::Text(t) => t.to_string(),
        };
        s = s.replace(&format!("{{{name}}}"), &value);
    }
    Some(s)
}

/// Fixed one-decimal rendering, independent of locale.
pub fn format_number(x: f64) -> String {
    let mut s = String::new();
    let _ = write!(s, "{x:.1}");
    if s == "-0.0" {
        s = "0.0".to_string();
    }
    s
}

/// Sentence templates per group, one `group=template` line each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateRegistry {
    demographics: SentenceTemplate,
    vitals: SentenceTemplate,
    biometrics: SentenceTemplate,
}

pub const DEFAULT_TEMPLATES: &str = "\
demographics=The demographics information: {age} year-old, {race}, {sex}.
vitals=The vital parameters: temperature {temperature}, heartrate {heartrate}, resprate {resprate}, o2sat {o2sat}, sbp {sbp}, dbp {dbp}, pain {pain}.
biometrics=The biometrics information: bmi {bmi}, weight {weight}, height {height}.
";

impl Default for TemplateRegistry {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("built-in templates parse")
    }
}

impl TemplateRegistry {
    pub fn parse(text: &str) -> Result<Self> {
        let (mut d, mut v, mut b) = (None, None, None);
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, tpl) = line
                .split_once('=')
                .ok_or_else(|| CoreError::Config(format!("template line {line:?} is not key=value")))?;
            let slot = match key.trim() {
                "demographics" => &mut d,
                "vitals" => &mut v,
                "biometrics" => &mut b,
                other => return Err(CoreError::Config(format!("unknown template group {other:?}"))),
            };
            *slot = Some(SentenceTemplate::parse(tpl)?);
        }
        let missing = |n: &str| CoreError::Config(format!("template for {n} missing"));
        Ok(TemplateRegistry {
            demographics: d.ok_or_else(|| missing("demographics"))?,
            vitals: v.ok_or_else(|| missing("vitals"))?,
            biometrics: b.ok_or_else(|| missing("biometrics"))?,
        })
    }

    fn template(&self, group: Group) -> &SentenceTemplate {
        match group {
            Group::Demographics => &self.demographics,
            Group::Vitals => &self.vitals,
            Group::Biometrics => &self.biometrics,
        }
    }

    pub fn render_prompt(&self, rec: &EhrRecord, mask: &AblationMask) -> PromptText {
        let mut text = String::new();
        let mut group_spans = Vec::new();
        for group in Group::ALL {
            if !mask.includes(group) {
                continue;
            }
            let Some(sentence) = self.template(group).render(rec) else { continue };
            if !text.is_empty() {
                text.push(' ');
            }
            let start = text.len();
            text.push_str(&sentence);
            group_spans.push((group, start..text.len()));
        }
        PromptText { text, group_spans }
    }
}

/// Renders the record with the built-in templates.
pub fn render_prompt(rec: &EhrRecord, mask: &AblationMask) -> PromptText {
    thread_local! {
        static DEFAULT: TemplateRegistry = TemplateRegistry::default();
    }
    DEFAULT.with(|t| t.render_prompt(rec, mask))
}

pub const ANSWER_INSTRUCTION: &str = "Answer strictly with Yes or No.";

pub fn render_question(task_id: &str, question_text: &str) -> Result<String> {
    let q = question_text.trim().trim_end_matches('?').trim_end();
    if q.is_empty() {
        return Err(CoreError::invalid(format!("task {task_id:?} has an empty question")));
    }
    Ok(format!("{q}? {ANSWER_INSTRUCTION}"))
}

pub const DEFAULT_ROLE: &str = "You are a cardiology assistant.";
pub const DEFAULT_TASK_DESC: &str =
    "Use the ECG and the patient information to answer the prognostic question.";

/// Joins role, task description, prompt and question with single spaces,
/// skipping empty parts.
pub fn assemble_full_text(role: &str, task_desc: &str, prompt: &PromptText, question: &str) -> String {
    [role, task_desc, prompt.text.as_str(), question]
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}
