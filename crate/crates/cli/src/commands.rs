use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use newsclf::balance::{oversample_all, stratified_split, SplitPlan, SplitStrategy, StratumKey};
use newsclf::corpus::{build_training_set, load_articles, load_labels, write_articles, Article, ItemKey, Label, LabelTable, LabeledItem, LabeledSet, Language, Provenance, Subtask};
use newsclf::eval::{epoch_curve_report, f1_scores, per_language_report, MetricsReport};
use newsclf::experiments::{fine_tune, generate_corpus, predict_inputs, run_manifest, ExperimentManifest, FitSetup, SyntheticConfig};
use newsclf::inference::{ensemble_vote, predict, route_and_predict, EnsembleMember, EnsembleSpec, PredictionSet, RoutedModel, RoutingTable, DEFAULT_THRESHOLD};
use newsclf::model::{build_encoder, load_checkpoint, save_checkpoint, AdapterConfig, Model, ModelConfig};
use newsclf::textprep::{clean_article, encode, prepare_article_text, Abbreviations, CleaningRules, Vocab};
use newsclf::train::{select_checkpoint, tapt, CheckpointSeries, EpochRecord, SelectionStrategy, TaptConfig, TrainConfig};
use newsclf::translate::{translate_text, Identity, Lexicon, Remote, TranslationBackend};
use newsclf::Error;

use crate::{Cli, Command};

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Usage(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    /// 2 for I/O failures, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(Error::Io { .. }) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn parse_lang_dir(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((l, p)) if !l.is_empty() && !p.is_empty() => Ok((l.to_string(), PathBuf::from(p))),
        _ => Err(format!("expected LANG=DIR, got {s:?}")),
    }
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Article directory of one language, as LANG=DIR (repeatable)
    #[arg(long = "data", value_name = "LANG=DIR", value_parser = parse_lang_dir, required = true)]
    pub data: Vec<(String, PathBuf)>,
    /// Clean articles after loading
    #[arg(long)]
    pub clean: bool,
}

impl DataArgs {
    fn load(&self) -> Result<Vec<Article>> {
        load_data(&self.data.iter().cloned().collect(), self.clean)
    }
}

fn load_data(data: &BTreeMap<String, PathBuf>, clean: bool) -> Result<Vec<Article>> {
    let rules = CleaningRules::default();
    let mut out = Vec::new();
    for (lang, dir) in data {
        for a in load_articles(dir, &Language::new(lang))? {
            out.push(if clean { clean_article(&a, &rules) } else { a });
        }
    }
    Ok(out)
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    let dir = cli.out.as_deref().ok_or_else(|| usage("--out is required for this subcommand"))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v).map_err(Error::from)?)
}

fn config_text(cli: &Cli) -> Result<(String, PathBuf)> {
    let path = cli.config.as_deref().ok_or_else(|| usage("--config is required for this subcommand"))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((read(path)?, base))
}

fn parse_config<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    Ok(serde_json::from_str(text).map_err(Error::from)?)
}

/// Relative config paths are taken from the config file's directory.
fn resolve(base: &Path, p: &Path) -> PathBuf {
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    joined.canonicalize().unwrap_or(joined)
}

fn load_plan(path: &Path) -> Result<SplitPlan> {
    parse_config(&read(path)?)
}

/// Items to predict: whole articles, or every paragraph for persuasion.
fn unlabeled_set(articles: &[Article], task: Subtask) -> LabeledSet {
    let mut set = LabeledSet::new(task);
    for a in articles {
        let keys: Vec<ItemKey> = match task {
            Subtask::Persuasion => (1..=a.paragraphs.len()).map(|p| ItemKey::paragraph(&a.id, p)).collect(),
            _ => vec![ItemKey::article(&a.id)],
        };
        for key in keys {
            set.items.push(LabeledItem {
                key,
                article: a.clone(),
                label: Label::zero(task),
                provenance: Provenance::Original,
                source_language: None,
            });
        }
    }
    set
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Preprocess(a) => preprocess(cli, a),
        Command::Split(a) => split(cli, a),
        Command::Vocab(a) => vocab(cli, a),
        Command::Oversample(a) => oversample(cli, a),
        Command::Tapt => tapt_cmd(cli),
        Command::Train => train(cli),
        Command::Select(a) => select(cli, a),
        Command::Predict(a) => predict_cmd(cli, a),
        Command::Ensemble(a) => ensemble(cli, a),
        Command::Translate(a) => translate(cli, a),
        Command::Evaluate(a) => evaluate(cli, a),
        Command::Report(a) => report(cli, a),
        Command::Experiment => experiment(cli),
        Command::Synth => synth(cli),
    }
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Vocabulary used to measure the token budget
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Token budget of truncated inputs
    #[arg(long, default_value_t = 128)]
    pub budget: usize,
    /// Boilerplate pattern file replacing the built-in English patterns
    #[arg(long)]
    pub patterns: Option<PathBuf>,
}

fn preprocess(cli: &Cli, a: &PreprocessArgs) -> Result<()> {
    let out = out_dir(cli)?;
    let rules = match &a.patterns {
        Some(p) => CleaningRules::from_file(p)?,
        None => CleaningRules::default(),
    };
    let vocab = a.vocab.as_deref().map(Vocab::load).transpose()?;
    for (lang, dir) in &a.data.data {
        let language = Language::new(lang);
        let cleaned: Vec<Article> = load_articles(dir, &language)?.iter().map(|x| clean_article(x, &rules)).collect();
        write_articles(&out.join(lang), &cleaned)?;
        if let Some(v) = &vocab {
            let abbreviations = Abbreviations::for_language(&language);
            let mut tsv = String::new();
            for x in &cleaned {
                let _ = writeln!(tsv, "{}\t{}", x.id, prepare_article_text(x, a.budget, v, &abbreviations));
            }
            write(&out.join(lang).join("inputs.tsv"), tsv)?;
        }
        println!("{lang}: {} articles", cleaned.len());
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub subtask: Subtask,
    /// k-fold split instead of train/validation/test fractions
    #[arg(long)]
    pub k: Option<usize>,
    /// Train, validation and test fractions
    #[arg(long, value_delimiter = ',', default_value = "0.7,0.15,0.15")]
    pub fractions: Vec<f64>,
    /// Keep paragraphs without a label row (persuasion)
    #[arg(long)]
    pub include_unlabeled: bool,
}

fn split(cli: &Cli, a: &SplitArgs) -> Result<()> {
    let out = out_dir(cli)?;
    let articles = a.data.load()?;
    let labels = load_labels(&a.labels, a.subtask)?;
    let set = build_training_set(&articles, &labels, a.subtask, a.include_unlabeled)?;
    let strategy = match (a.k, a.fractions.as_slice()) {
        (Some(k), _) => SplitStrategy::KFold { k },
        (None, &[train, val, test]) => SplitStrategy::Fractions { train, val, test },
        _ => return Err(usage("--fractions takes three comma-separated values")),
    };
    let plan = stratified_split(&set, &[StratumKey::Label, StratumKey::Language], strategy, cli.seed.unwrap_or(0))?;
    write(&out.join("split.json"), to_json(&plan)?)?;
    write(&out.join("split.tsv"), plan.to_tsv())?;
    let mut sizes = vec![0usize; strategy.parts()];
    for p in plan.assignments.values() {
        sizes[*p] += 1;
    }
    println!("parts: {sizes:?}");
    Ok(())
}

#[derive(Args, Debug)]
pub struct VocabArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 2000)]
    pub size: usize,
}

fn vocab(cli: &Cli, a: &VocabArgs) -> Result<()> {
    let out = out_dir(cli)?;
    let texts: Vec<String> = a.data.load()?.iter().map(Article::full_text).collect();
    let v = Vocab::build(texts.iter().map(String::as_str), a.size)?;
    v.save(&out.join("vocab.txt"))?;
    println!("{} tokens, hash {}", v.len(), v.hash());
    Ok(())
}

#[derive(Args, Debug)]
pub struct OversampleArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub subtask: Subtask,
    /// Split plan (JSON); only its training part is oversampled
    #[arg(long)]
    pub split: Option<PathBuf>,
}

fn class_count_rows(set: &LabeledSet) -> BTreeMap<(String, String), usize> {
    let mut m = BTreeMap::new();
    for i in &set.items {
        *m.entry((i.language().to_string(), i.label.key())).or_insert(0) += 1;
    }
    m
}

fn oversample(cli: &Cli, a: &OversampleArgs) -> Result<()> {
    let out = out_dir(cli)?;
    let articles = a.data.load()?;
    let labels = load_labels(&a.labels, a.subtask)?;
    let mut set = build_training_set(&articles, &labels, a.subtask, false)?;
    if let Some(p) = &a.split {
        set = load_plan(p)?.select(&set, 0);
    }
    let balanced = oversample_all(&set, cli.seed.unwrap_or(0), &[])?;
    let registry = a.subtask.registry();
    let mut tsv = String::new();
    for i in &balanced.items {
        let row = i.label.to_row(a.subtask.class_count());
        let _ = writeln!(tsv, "{}\t{}", i.key, registry.format_set(&row));
    }
    write(&out.join("oversampled.tsv"), tsv)?;
    let (before, after) = (class_count_rows(&set), class_count_rows(&balanced));
    let mut csv = String::from("language,label,before,after\n");
    for ((l, k), n) in &after {
        let _ = writeln!(csv, "{l},{k},{},{n}", before.get(&(l.clone(), k.clone())).copied().unwrap_or(0));
    }
    write(&out.join("class_counts.csv"), csv)?;
    println!("{} -> {} items", set.len(), balanced.len());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaptJob {
    pub data: BTreeMap<String, PathBuf>,
    pub vocab: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub tapt: TaptConfig,
    /// Raise the learning rate for the desk-size encoder.
    #[serde(default)]
    pub desk_scale: bool,
    #[serde(default)]
    pub clean: bool,
}

fn tapt_cmd(cli: &Cli) -> Result<()> {
    let out = out_dir(cli)?;
    let (text, base) = config_text(cli)?;
    let mut job: TaptJob = parse_config(&text)?;
    job.vocab = resolve(&base, &job.vocab);
    for p in job.data.values_mut() {
        *p = resolve(&base, p);
    }
    if let Some(s) = cli.seed {
        job.tapt.seed = s;
    }
    let cfg = if job.desk_scale { job.tapt.desk_scaled() } else { job.tapt.clone() };
    let vocab = Vocab::load(&job.vocab)?;
    let corpus: Vec<_> = load_data(&job.data, job.clean)?
        .iter()
        .map(|a| encode(&a.full_text(), &vocab, job.model.max_len))
        .collect();
    let mut model = build_encoder(&job.model, cfg.seed)?;
    let report = tapt(&mut model, &corpus, &cfg)?;
    save_checkpoint(&model, &out.join("checkpoint"), &vocab.hash(), report.steps)?;
    let mut csv = String::from("epoch,mlm_loss\n");
    for (i, l) in report.epoch_losses.iter().enumerate() {
        let _ = writeln!(csv, "{},{l}", i + 1);
    }
    write(&out.join("tapt.csv"), csv)?;
    write(&out.join("manifest.json"), to_json(&job)?)?;
    println!("{} steps, final loss {:.4}", report.steps, report.epoch_losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn default_selection() -> SelectionStrategy {
    SelectionStrategy::OverallBest
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJobConfig {
    pub task: Subtask,
    pub data: BTreeMap<String, PathBuf>,
    pub labels: PathBuf,
    pub vocab: PathBuf,
    /// Split plan (JSON): part 0 trains, part 1 validates.
    #[serde(default)]
    pub split: Option<PathBuf>,
    /// Encoder checkpoint to start from, e.g. the output of `tapt`.
    #[serde(default)]
    pub init: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    /// Named schedule; `train` overrides it.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub desk_scale: bool,
    #[serde(default)]
    pub adapter: Option<AdapterConfig>,
    #[serde(default)]
    pub oversample: bool,
    #[serde(default)]
    pub include_unlabeled: bool,
    #[serde(default = "default_selection")]
    pub selection: SelectionStrategy,
    #[serde(default)]
    pub clean: bool,
}

fn train(cli: &Cli) -> Result<()> {
    let out = out_dir(cli)?;
    let (text, base) = config_text(cli)?;
    let mut job: TrainJobConfig = parse_config(&text)?;
    for p in job.data.values_mut() {
        *p = resolve(&base, p);
    }
    job.labels = resolve(&base, &job.labels);
    job.vocab = resolve(&base, &job.vocab);
    job.split = job.split.map(|p| resolve(&base, &p));
    job.init = job.init.map(|p| resolve(&base, &p));
    let mut schedule = match (&job.train, &job.preset) {
        (Some(t), _) => t.clone(),
        (None, Some(name)) => TrainConfig::preset(name)?,
        (None, None) => return Err(usage("training config needs `train` or `preset`")),
    };
    if job.desk_scale {
        schedule = schedule.desk_scaled();
    }
    if let Some(s) = cli.seed {
        schedule.seed = s;
    }
    let seed = schedule.seed;
    // The emitted manifest pins the resolved schedule and seed.
    job.train = Some(schedule.clone());
    job.desk_scale = false;

    let vocab = Vocab::load(&job.vocab)?;
    let articles = load_data(&job.data, job.clean)?;
    let labels = load_labels(&job.labels, job.task)?;
    let set = build_training_set(&articles, &labels, job.task, job.include_unlabeled)?;
    let (train_set, val_set) = match &job.split {
        Some(p) => {
            let plan = load_plan(p)?;
            (plan.select(&set, 0), Some(plan.select(&set, 1)))
        }
        None => (set, None),
    };
    let model = match &job.init {
        Some(dir) => {
            let (m, meta) = load_checkpoint(dir)?;
            if meta.vocab_hash != vocab.hash() {
                return Err(Error::Compatibility(format!("{} was trained with vocabulary {}", dir.display(), meta.vocab_hash)).into());
            }
            job.model = m.config;
            m
        }
        None => build_encoder(&job.model, seed)?,
    };
    let setup = FitSetup {
        model: job.model,
        train: schedule,
        adapter: job.adapter,
        tapt: None,
        selection: job.selection,
        oversample: job.oversample,
    };
    let fitted = fine_tune(model, job.task, &train_set, val_set.as_ref(), &vocab, &setup, seed)?;
    let hash = vocab.hash();
    for r in &fitted.series.records {
        let mut m: Model = fitted.model.clone();
        fitted.series.restore(&mut m, r.epoch)?;
        save_checkpoint(&m, &out.join(format!("epoch_{:03}", r.epoch)), &hash, r.step)?;
    }
    write(&out.join("metrics.tsv"), fitted.series.metrics_tsv())?;
    write(&out.join("series.json"), to_json(&fitted.series.records)?)?;
    write(&out.join("selection.json"), to_json(&fitted.selection)?)?;
    write(&out.join("manifest.json"), to_json(&job)?)?;
    println!("{} epochs, selected {:?}", fitted.series.records.len(), fitted.selection);
    Ok(())
}

#[derive(Args, Debug)]
pub struct SelectArgs {
    /// Training output directory
    #[arg(long)]
    pub run: PathBuf,
    /// per_language, overall_best or min_train_loss
    #[arg(long, default_value = "overall_best")]
    pub strategy: SelectionStrategy,
}

fn select(cli: &Cli, a: &SelectArgs) -> Result<()> {
    let records: Vec<EpochRecord> = parse_config(&read(&a.run.join("series.json"))?)?;
    let selection = select_checkpoint(&CheckpointSeries::from_records(records), a.strategy)?;
    let dir = cli.out.clone().unwrap_or_else(|| a.run.clone());
    write(&dir.join("selection.json"), to_json(&selection)?)?;
    println!("{}", serde_json::to_string(&selection).map_err(Error::from)?);
    Ok(())
}

fn parse_named(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok((n.to_string(), PathBuf::from(p))),
        _ => Err(format!("expected NAME=DIR, got {s:?}")),
    }
}

fn parse_backend(spec: &str) -> Result<Box<dyn TranslationBackend>> {
    match spec.split_once('=') {
        None if spec == "identity" => Ok(Box::new(Identity)),
        Some(("lexicon", path)) => Ok(Box::new(Lexicon::from_file(Path::new(path))?)),
        Some(("remote", url)) => Ok(Box::new(Remote::new(url))),
        _ => Err(usage(format!("unknown backend {spec:?}; use identity, lexicon=FILE or remote=URL"))),
    }
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub subtask: Subtask,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Single checkpoint directory
    #[arg(long, conflicts_with = "model")]
    pub checkpoint: Option<PathBuf>,
    /// Named checkpoint for routing, as NAME=DIR (repeatable; a name given
    /// more than once forms an ensemble)
    #[arg(long, value_parser = parse_named)]
    pub model: Vec<(String, PathBuf)>,
    /// Routing table (JSON) mapping languages to plans
    #[arg(long, requires = "model")]
    pub routing: Option<PathBuf>,
    /// Validation scores of ensemble members, in --model order
    #[arg(long, value_delimiter = ',')]
    pub scores: Vec<f64>,
    /// identity, lexicon=FILE or remote=URL
    #[arg(long, default_value = "identity")]
    pub backend: String,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Split plan (JSON) and the part to predict
    #[arg(long, requires = "part")]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub part: Option<usize>,
}

fn write_predictions(out: &Path, stem: &str, p: &PredictionSet) -> Result<()> {
    write(&out.join(format!("{stem}.json")), p.to_json()?)?;
    write(&out.join(format!("{stem}.tsv")), p.to_label_tsv())
}

fn predict_cmd(cli: &Cli, a: &PredictArgs) -> Result<()> {
    let out = out_dir(cli)?;
    let vocab = Vocab::load(&a.vocab)?;
    let articles = a.data.load()?;
    let mut set = unlabeled_set(&articles, a.subtask);
    if let (Some(p), Some(part)) = (&a.split, a.part) {
        let plan = load_plan(p)?;
        set.items.retain(|i| plan.fold_of(&i.key.article_id) == Some(part) || plan.fold_of(&i.key.to_string()) == Some(part));
    }
    let preds = match (&a.checkpoint, &a.routing) {
        (Some(dir), _) => {
            let (model, meta) = load_checkpoint(dir)?;
            let inputs = predict_inputs(&set, &vocab, model.config.max_len);
            predict(&model, &meta.vocab_hash, &vocab, a.subtask, &inputs, a.threshold)?
        }
        (None, Some(routing)) => {
            let table = RoutingTable::load(routing)?;
            let backend = parse_backend(&a.backend)?;
            let mut loaded: Vec<(String, Model, String)> = Vec::new();
            for (name, dir) in &a.model {
                let (m, meta) = load_checkpoint(dir)?;
                loaded.push((name.clone(), m, meta.vocab_hash));
            }
            if !a.scores.is_empty() && a.scores.len() != loaded.len() {
                return Err(usage("--scores needs one value per --model"));
            }
            let mut models: BTreeMap<String, RoutedModel<'_>> = BTreeMap::new();
            let mut members: BTreeMap<String, Vec<EnsembleMember>> = BTreeMap::new();
            for (i, (name, m, hash)) in loaded.iter().enumerate() {
                let entry = models.entry(name.clone()).or_insert_with(|| RoutedModel {
                    members: Vec::new(),
                    spec: None,
                    vocab: &vocab,
                    vocab_hash: hash.clone(),
                });
                if entry.vocab_hash != *hash {
                    return Err(Error::Compatibility(format!("members of {name} use different vocabularies")).into());
                }
                entry.members.push(m);
                members.entry(name.clone()).or_default().push(EnsembleMember {
                    name: format!("{name}#{}", entry.members.len()),
                    validation_score: a.scores.get(i).copied().unwrap_or(0.0),
                });
            }
            for (name, routed) in models.iter_mut() {
                if routed.members.len() > 1 {
                    routed.spec = Some(EnsembleSpec {
                        members: members.remove(name).unwrap_or_default(),
                    });
                }
            }
            let max_len = loaded.first().map(|(_, m, _)| m.config.max_len).unwrap_or(128);
            let inputs = predict_inputs(&set, &vocab, max_len);
            route_and_predict(&inputs, &table, backend.as_ref(), &models, a.subtask, a.threshold)?
        }
        _ => return Err(usage("predict needs --checkpoint, or --model with --routing")),
    };
    write_predictions(out, "predictions", &preds)?;
    for (k, e) in &preds.errors {
        eprintln!("{k}: {e}");
    }
    println!("{} items predicted, {} failed", preds.items.len(), preds.errors.len());
    Ok(())
}

#[derive(Args, Debug)]
pub struct EnsembleArgs {
    /// Member prediction files (JSON), comma-separated
    #[arg(long, value_delimiter = ',', required = true)]
    pub members: Vec<PathBuf>,
    /// Voting rule
    #[arg(long, default_value = "majority", value_parser = ["majority"])]
    pub vote: String,
    /// Validation scores of the members, used to break ties
    #[arg(long, value_delimiter = ',')]
    pub scores: Vec<f64>,
}

fn ensemble(cli: &Cli, a: &EnsembleArgs) -> Result<()> {
    let out = out_dir(cli)?;
    let members = a
        .members
        .iter()
        .map(|p| PredictionSet::load(p).map_err(CliError::from))
        .collect::<Result<Vec<_>>>()?;
    if !a.scores.is_empty() && a.scores.len() != members.len() {
        return Err(usage("--scores needs one value per member"));
    }
    let spec = EnsembleSpec {
        members: a
            .members
            .iter()
            .enumerate()
            .map(|(i, p)| EnsembleMember {
                name: p.display().to_string(),
                validation_score: a.scores.get(i).copied().unwrap_or(0.0),
            })
            .collect(),
    };
    let task = members.first().map(|m| m.subtask).ok_or_else(|| usage("no members"))?;
    let voted = ensemble_vote(&members, &spec, task)?;
    write_predictions(out, "ensemble", &voted)?;
    println!("{} items voted by {} members", voted.items.len(), members.len());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub target: String,
    /// identity, lexicon=FILE or remote=URL
    #[arg(long, default_value = "identity")]
    pub backend: String,
}

fn translate(cli: &Cli, a: &TranslateArgs) -> Result<()> {
    let out = out_dir(cli)?;
    let backend = parse_backend(&a.backend)?;
    let target = Language::new(&a.target);
    let mut translated = Vec::new();
    let mut failures = String::new();
    for article in a.data.load()? {
        let source = article.language.clone();
        let result = (|| -> newsclf::Result<Article> {
            Ok(Article {
                id: article.id.clone(),
                language: target.clone(),
                title: translate_text(backend.as_ref(), &article.title, &source, &target)?.text,
                paragraphs: article
                    .paragraphs
                    .iter()
                    .map(|p| translate_text(backend.as_ref(), p, &source, &target).map(|t| t.text))
                    .collect::<newsclf::Result<_>>()?,
            })
        })();
        match result {
            Ok(t) => translated.push(t),
            Err(e) => {
                let _ = writeln!(failures, "{}\t{e}", article.id);
            }
        }
    }
    write_articles(&out.join(&a.target), &translated)?;
    write(&out.join("failures.tsv"), &failures)?;
    println!("{} articles translated, {} failed", translated.len(), failures.lines().count());
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Predictions: label TSV, or JSON written by predict/ensemble
    #[arg(long)]
    pub pred: PathBuf,
    /// Gold label TSV
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub subtask: Subtask,
    /// Score only the gold items that have a prediction, e.g. one split part
    #[arg(long)]
    pub predicted_only: bool,
}

fn rows(table: &LabelTable) -> BTreeMap<String, Vec<bool>> {
    let c = table.subtask.class_count();
    table.entries.iter().map(|(k, l)| (k.to_string(), l.to_row(c))).collect()
}

fn print_summary(r: &MetricsReport) {
    println!("micro\tP={:.4}\tR={:.4}\tF1={:.4}", r.micro.precision, r.micro.recall, r.micro.f1);
    println!("macro\tP={:.4}\tR={:.4}\tF1={:.4}", r.macro_avg.precision, r.macro_avg.recall, r.macro_avg.f1);
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let mut gold = rows(&load_labels(&a.gold, a.subtask)?);
    let names = a.subtask.registry().names().to_vec();
    let (pred, languages) = if a.pred.extension().is_some_and(|e| e == "json") {
        let p = PredictionSet::load(&a.pred)?;
        if p.subtask != a.subtask {
            return Err(usage(format!("{} holds {} predictions", a.pred.display(), p.subtask)));
        }
        (p.labels(), Some(p.languages()))
    } else {
        (rows(&load_labels(&a.pred, a.subtask)?), None)
    };
    if a.predicted_only {
        gold.retain(|k, _| pred.contains_key(k));
    }
    let report = f1_scores(&pred, &gold, &names)?;
    print_summary(&report);
    if let Some(dir) = &cli.out {
        write(&dir.join("report.csv"), report.to_csv())?;
        if let Some(langs) = &languages {
            write(&dir.join("per_language.csv"), per_language_report(&pred, &gold, langs, &names)?.to_csv())?;
        }
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Metrics TSV written by train
    #[arg(long)]
    pub metrics: PathBuf,
}

fn report(cli: &Cli, a: &ReportArgs) -> Result<()> {
    let out = out_dir(cli)?;
    let r = epoch_curve_report(&read(&a.metrics)?)?;
    write(&out.join("curves.csv"), &r.csv)?;
    write(&out.join("curves.svg"), &r.svg)?;
    for (lang, e) in &r.best_epochs {
        println!("{lang}\t{e}");
    }
    Ok(())
}

fn experiment(cli: &Cli) -> Result<()> {
    let out = out_dir(cli)?;
    let (text, _) = config_text(cli)?;
    let mut manifest = ExperimentManifest::from_json(&text)?;
    if let Some(s) = cli.seed {
        manifest.seeds = vec![s];
    }
    let output = run_manifest(&manifest)?;
    for (name, contents) in &output.files {
        write(&out.join(name), contents)?;
    }
    println!("{} files written to {}", output.files.len(), out.display());
    Ok(())
}

fn synth(cli: &Cli) -> Result<()> {
    let out = out_dir(cli)?;
    let mut cfg: SyntheticConfig = match &cli.config {
        Some(_) => parse_config(&config_text(cli)?.0)?,
        None => SyntheticConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let corpus = generate_corpus(&cfg)?;
    corpus.write_to(out)?;
    write(&out.join("synth.json"), to_json(&cfg)?)?;
    println!("{} articles, hash {}", corpus.articles.len(), corpus.hash());
    Ok(())
}
