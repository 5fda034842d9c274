use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::json;
use unipact_core::config::{apply_overrides, RunConfig};
use unipact_core::data::{cohort_vocab, prepare_patients, InputVariant};
use unipact_core::ecg::{prepare, EcgSignal};
use unipact_core::ehr::{render_question, AblationMask, EhrRecord};
use unipact_core::eval::{run_ablation, AblationTable, EvalContext, Plan};
use unipact_core::metrics::{scores_csv, EvalReport};
use unipact_core::model::FusionModel;
use unipact_core::pipeline::{backbone, Workspace};
use unipact_core::synth::{generate_cohort, load_cohort, serialize_cohort, Category, Cohort, Split, MANIFEST, TASKS, COHORT_CONFIG};
use unipact_core::tokenizer::Vocab;
use unipact_core::training::{loss_csv, train_stage, Stage};
use unipact_core::CoreError;

use crate::rundir::{self, create, write};
use crate::{CliError, Global};

type Result<T> = std::result::Result<T, CliError>;

pub const SEED_ENV: &str = "UNIPACT_SEED";
const VOCAB_FILE: &str = "vocab.txt";
const CHECKPOINT: &str = "model.ckpt";
const LOSSES: &str = "losses.csv";

/// Config file, then `--set` overrides, then UNIPACT_SEED, then `--seed`.
fn load_config(g: &Global) -> Result<(RunConfig, &'static str)> {
    let mut cfg = match &g.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CoreError::io(p, e))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, &g.overrides)?;
    let mut source = "config";
    if let Ok(v) = std::env::var(SEED_ENV) {
        let seed: u64 = v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        eprintln!("seed {seed} taken from {SEED_ENV}");
        cfg.seed = seed;
        source = SEED_ENV;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
        source = "--seed";
    }
    cfg.threads = g.threads;
    cfg.validate()?;
    Ok((cfg, source))
}

fn load_vocab(cfg: &RunConfig, data: &Path, cohort: &Cohort, explicit: Option<&Path>) -> Result<Vocab> {
    if let Some(p) = explicit {
        return Ok(Vocab::load(p)?);
    }
    let default = data.join(VOCAB_FILE);
    if default.exists() {
        return Ok(Vocab::load(&default)?);
    }
    eprintln!("no {VOCAB_FILE} in {}; building it from the cohort", data.display());
    Ok(cohort_vocab(cohort, &cfg.text_setup(), cfg.vocab_max)?)
}

fn check_vocab(model: &FusionModel, vocab: &Vocab) -> Result<()> {
    if model.meta.vocab_fingerprint != vocab.fingerprint() {
        return Err(CoreError::Mismatch(format!(
            "checkpoint was trained with vocabulary {} but {} was given",
            model.meta.vocab_fingerprint,
            vocab.fingerprint()
        ))
        .into());
    }
    Ok(())
}

fn parse_categories(s: Option<&str>) -> Result<Vec<Category>> {
    match s {
        None => Ok(Category::ALL.to_vec()),
        Some(list) => Ok(list.split(',').map(|c| Category::parse(c.trim())).collect::<unipact_core::Result<_>>()?),
    }
}

pub fn gen_data(g: &Global, out: &Path) -> Result<()> {
    let (cfg, source) = load_config(g)?;
    let cohort = generate_cohort(&cfg.cohort_config())?;
    create(out)?;
    serialize_cohort(&cohort, out)?;
    let notes = BTreeMap::from([("n_patients".to_string(), json!(cohort.patients.len()))]);
    rundir::finish(out, "gen-data", &cfg, source, &[MANIFEST, TASKS, COHORT_CONFIG], notes)?;
    println!("wrote {} patients to {}", cohort.patients.len(), out.display());
    Ok(())
}

pub fn build_vocab(g: &Global, data: &Path, out: Option<&Path>) -> Result<()> {
    let (cfg, _) = load_config(g)?;
    let cohort = load_cohort(data)?;
    let vocab = cohort_vocab(&cohort, &cfg.text_setup(), cfg.vocab_max)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| data.join(VOCAB_FILE));
    vocab.save(&path)?;
    println!("{} tokens, fingerprint {}, written to {}", vocab.len(), vocab.fingerprint(), path.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// 1 trains the projector; 2 adds adapters and fine-tunes them.
    #[arg(long)]
    pub stage: String,
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for the checkpoint, loss CSV and config echo.
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint to start from; required for stage 2.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// full, ecg-only or ehr-only.
    #[arg(long, default_value = "full")]
    pub variant: String,
    /// Comma-separated task categories to train on (default: all).
    #[arg(long)]
    pub categories: Option<String>,
}

pub fn train(g: &Global, a: &TrainArgs) -> Result<()> {
    let (cfg, source) = load_config(g)?;
    let stage = Stage::parse(&a.stage)?;
    let variant = InputVariant::parse(&a.variant)?;
    let mask = variant.mask();
    if stage == Stage::One && !mask.include_ecg {
        return Err(CoreError::Stage("stage 1 trains the projector and needs ECG input".into()).into());
    }
    let cohort = load_cohort(&a.data)?;
    let vocab = load_vocab(&cfg, &a.data, &cohort, a.vocab.as_deref())?;
    let ws = Workspace::new(&cfg, cohort, Some(vocab))?;
    let mut losses = Vec::new();
    let mut model = match (&a.init, stage) {
        (Some(p), _) => FusionModel::load(p)?,
        (None, Stage::Two) if mask.include_ecg => {
            return Err(CoreError::MissingCheckpoint("stage 2 needs --init <stage-1 checkpoint>".into()).into())
        }
        (None, _) => {
            let (m, warm) = backbone(&cfg, &ws)?;
            losses.extend(warm);
            m
        }
    };
    check_vocab(&model, &ws.vocab)?;
    let mut sc = cfg.stage(stage);
    sc.mask = mask;
    sc.categories = parse_categories(a.categories.as_deref())?;
    sc.allow_without_stage1 = !mask.include_ecg;
    let outcome = train_stage(&mut model, &ws.data(), &sc)?;
    losses.extend(outcome.losses.iter().cloned());

    create(&a.out)?;
    model.save(&a.out.join(CHECKPOINT))?;
    write(&a.out.join(LOSSES), loss_csv(&losses))?;
    let mut notes = BTreeMap::from([
        ("stage".to_string(), json!(stage.number())),
        ("variant".to_string(), json!(a.variant)),
        ("val_auroc".to_string(), json!(outcome.val_auroc)),
        ("best_epoch".to_string(), json!(outcome.best_epoch)),
        ("vocab_fingerprint".to_string(), json!(ws.vocab.fingerprint())),
    ]);
    if let Some(p) = &a.init {
        notes.insert("init_sha256".into(), json!(rundir::sha256_file(p)?));
    }
    rundir::finish(&a.out, "train", &cfg, source, &[CHECKPOINT, LOSSES], notes)?;
    let last = outcome.losses.last().map(|l| l.loss).unwrap_or(f32::NAN);
    let vals: Vec<String> = outcome.val_auroc.iter().map(|v| format!("{v:.4}")).collect();
    println!(
        "{}: {} steps, last loss {last:.4}, validation AUROC per epoch [{}] -> {}",
        stage.label(),
        outcome.losses.len(),
        vals.join(", "),
        a.out.join(CHECKPOINT).display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Input variant used at test time.
    #[arg(long, default_value = "full")]
    pub variant: String,
    /// Ablation plan: A (modality), B (paradigm) or C (feature removal).
    #[arg(long)]
    pub ablate: Option<String>,
    /// Extra checkpoints for plans A and B, `name=path` (e.g.
    /// `ecg_only=runs/e/model.ckpt`). `full` defaults to --checkpoint.
    #[arg(long = "cell", value_name = "NAME=PATH")]
    pub cells: Vec<String>,
}

pub fn eval(g: &Global, a: &EvalArgs) -> Result<()> {
    let (cfg, source) = load_config(g)?;
    let cohort = load_cohort(&a.data)?;
    let vocab = load_vocab(&cfg, &a.data, &cohort, a.vocab.as_deref())?;
    let model = FusionModel::load(&a.checkpoint)?;
    check_vocab(&model, &vocab)?;
    let mask = InputVariant::parse(&a.variant)?.mask();
    let test = prepare_patients(cohort.split(Split::Test).collect::<Vec<_>>(), &model.config.encoder)?;
    let text = cfg.text_setup();
    let ctx = EvalContext { vocab: &vocab, text: &text, tasks: &cohort.tasks, patients: &test };
    let (rows, report) = ctx.report(&model, &mask, cfg.bootstrap, cfg.seed)?;

    create(&a.out)?;
    write(&a.out.join("scores.csv"), scores_csv(&rows))?;
    write(&a.out.join("report.json"), report.to_json())?;
    write(&a.out.join("report.txt"), report.table())?;
    let mut artifacts = vec!["scores.csv", "report.json", "report.txt"];
    print!("{}", report.table());

    if let Some(p) = &a.ablate {
        let plan = Plan::parse(p)?;
        let mut checkpoints = BTreeMap::new();
        for cell in &a.cells {
            let (name, path) = cell
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--cell {cell:?} is not name=path")))?;
            let m = FusionModel::load(Path::new(path))?;
            check_vocab(&m, &vocab)?;
            checkpoints.insert(name.to_string(), m);
        }
        checkpoints.entry("full".to_string()).or_insert(model);
        let table = run_ablation(&checkpoints, &ctx, plan)?;
        let json = serde_json::to_string_pretty(&table).map_err(|e| CoreError::invalid(e.to_string()))? + "\n";
        write(&a.out.join("ablation.json"), json)?;
        write(&a.out.join("ablation.txt"), table.render())?;
        artifacts.extend(["ablation.json", "ablation.txt"]);
        print!("{}", table.render());
    }
    let notes = BTreeMap::from([
        ("checkpoint_sha256".to_string(), json!(rundir::sha256_file(&a.checkpoint)?)),
        ("variant".to_string(), json!(a.variant)),
    ]);
    rundir::finish(&a.out, "eval", &cfg, source, &artifacts, notes)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to `<data>/vocab.txt`.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Cohort directory, needed with --patient.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Patient id from the cohort manifest.
    #[arg(long, conflicts_with = "record")]
    pub patient: Option<String>,
    /// Inline record, e.g. `age=30,sex=female,heartrate=88`.
    #[arg(long)]
    pub record: Option<String>,
    /// UPCT file with the ECG for an inline record.
    #[arg(long)]
    pub ecg: Option<PathBuf>,
    /// Leave the ECG out of the input.
    #[arg(long)]
    pub no_ecg: bool,
    #[arg(long, default_value = "det_hypoxemia")]
    pub task: String,
}

pub fn predict(g: &Global, a: &PredictArgs) -> Result<()> {
    let (cfg, _) = load_config(g)?;
    let model = FusionModel::load(&a.checkpoint)?;
    let vocab = match (&a.vocab, &a.data) {
        (Some(p), _) => Vocab::load(p)?,
        (None, Some(d)) => Vocab::load(&d.join(VOCAB_FILE))?,
        (None, None) => return Err(CliError::Usage("predict needs --vocab or --data".into())),
    };
    check_vocab(&model, &vocab)?;
    let (ehr, signal, tasks) = match (&a.patient, &a.record) {
        (Some(id), _) => {
            let data = a.data.as_deref().ok_or_else(|| CliError::Usage("--patient needs --data".into()))?;
            let cohort = load_cohort(data)?;
            let p = cohort
                .patients
                .iter()
                .find(|p| &p.id == id)
                .ok_or_else(|| CoreError::invalid(format!("no patient {id:?} in {}", data.display())))?;
            let signal = if a.no_ecg { None } else { Some(p.ecg.clone()) };
            (p.ehr.clone(), signal, cohort.tasks.clone())
        }
        (None, Some(r)) => {
            let ehr = EhrRecord::parse_inline(r)?;
            let signal = match (&a.ecg, a.no_ecg) {
                (_, true) => None,
                (Some(p), false) => Some(EcgSignal::load(p, cfg.cohort.sample_rate)?),
                (None, false) => return Err(CliError::Usage("--record needs --ecg FILE or --no-ecg".into())),
            };
            (ehr, signal, cfg.cohort_config().registry())
        }
        (None, None) => return Err(CliError::Usage("give --patient ID or --record KEY=VALUE,...".into())),
    };
    let task = tasks.get(&a.task)?;
    let question = render_question(&task.id, &task.question)?;
    let mask = AblationMask { include_ecg: signal.is_some(), ..AblationMask::full() };
    let text = cfg.text_setup();
    let patches = signal.as_ref().map(|s| prepare(s, &model.config.encoder)).transpose()?;
    let prompt_ids = vocab.encode(&text.prefix_text(&ehr, &mask));
    let question_ids = vocab.encode(&question);
    let score = model.score(patches.as_ref(), &prompt_ids, &question_ids)?;
    let answer = vocab.decode(&model.generate(patches.as_ref(), &prompt_ids, &question_ids, 1)?)?;
    println!("prompt: {}", text.full_text(&ehr, &mask, &question));
    println!("ecg_tokens: {}", patches.as_ref().map_or(0, |p| p.rows()));
    println!("task: {}", task.id);
    println!("answer: {answer}");
    println!("score: {score:.4}");
    Ok(())
}

pub fn report(path: &Path) -> Result<()> {
    let (file, dir) = if path.is_dir() { (path.join("report.json"), Some(path)) } else { (path.to_path_buf(), None) };
    let text = std::fs::read_to_string(&file).map_err(|e| CoreError::io(&file, e))?;
    let report = EvalReport::from_json(&text)?;
    print!("{}", report.table());
    if let Some(d) = dir {
        let ab = d.join("ablation.json");
        if ab.exists() {
            let t = std::fs::read_to_string(&ab).map_err(|e| CoreError::io(&ab, e))?;
            let table: AblationTable = serde_json::from_str(&t).map_err(|e| CoreError::format(&ab, e.to_string()))?;
            print!("{}", table.render());
        }
    }
    Ok(())
}
