use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use xltt::config::RunConfig;
use xltt::corpus::{
    load_gold, parse_provider, parse_squad, read_jsonl, serialize_squad, tokenize_corpus,
    translate_corpus, write_jsonl, ParallelText, ProviderMap, Vocabulary,
};
use xltt::eval::{gold_of, run_xlg_with_gold};
use xltt::experiment::{generate, ExperimentSpecs};
use xltt::similarity::{
    normalize_weights, similarity_report, QuestionDocument, WeightEntry, WeightTable,
};
use xltt::synth::SynthConfig;
use xltt::tensor::OpKind;
use xltt::trainer::{trace_csv, Checkpoint, Corpora, Trainer};
use xltt::verify::{gradcheck_suite, TOLERANCE};
use xltt::Error;

const EXIT_VERIFY: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_DEGENERATE: u8 = 3;
const EXIT_PROTOCOL: u8 = 4;
const EXIT_INTERRUPTED: u8 = 130;

#[derive(Parser)]
#[command(name = "xltt", version, about = "Cross-lingual extractive QA with multilingual adaptive attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Translate SQuAD-shaped datasets into parallel-corpus JSON-lines files.
    BuildCorpus(BuildCorpusArgs),
    /// TF-IDF similarity weights of training corpora against a target.
    Similarity(SimilarityArgs),
    /// Train a model on parallel corpora.
    Train(TrainArgs),
    /// Zero-shot evaluation of a trained model on a target corpus.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable component.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic cipher-language experiment to disk.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct BuildCorpusArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Input dataset as ID=PATH (SQuAD v1.1 JSON); repeatable.
    #[arg(long = "input", required = true)]
    inputs: Vec<String>,
    /// Pivot language tag.
    #[arg(long)]
    pivot_language: Option<String>,
    /// Auxiliary language as LANG=PROVIDER; repeatable, in member order.
    #[arg(long = "provider")]
    providers: Vec<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SimilarityArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Parallel-corpus file; repeatable.
    #[arg(long = "corpus")]
    corpora: Vec<PathBuf>,
    /// Target questions: a SQuAD JSON file or a parallel-corpus file.
    #[arg(long)]
    target: PathBuf,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fall back to uniform weights when every similarity is zero.
    #[arg(long)]
    uniform_weights: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long = "corpus")]
    corpora: Vec<PathBuf>,
    /// Similarity report produced by `similarity`.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    uniform_weights: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    pivot_unk_rate: Option<f64>,
    #[arg(long)]
    max_grad_norm: Option<f64>,
    /// Disable the MAA module (heads read [B, B]).
    #[arg(long)]
    no_maa: bool,
    /// Continue from a checkpoint; its stored config is used.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory written by `train` (checkpoint.bin and vocab.json).
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Target parallel-corpus file: target-language pivot plus translations.
    #[arg(long)]
    target: PathBuf,
    /// SQuAD/MLQA-shaped gold file; defaults to the target pivot answers.
    #[arg(long)]
    gold: Option<PathBuf>,
    /// Language tag for the gold file.
    #[arg(long)]
    gold_language: Option<String>,
    /// Allow targets that overlap the training data (report is marked).
    #[arg(long)]
    sanity: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Independent random fixtures per component.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Debug: break the backward rule of one op to exercise the checker.
    #[arg(long)]
    corrupt: Option<String>,
    /// Print the results as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "synthetic")]
    out_dir: PathBuf,
    /// Seed of the generated world.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 128)]
    max_len: usize,
}

/// A command failure and the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::DegenerateWeights => EXIT_DEGENERATE,
            Error::ZeroShotViolation(_) => EXIT_PROTOCOL,
            Error::Schema { .. }
            | Error::File { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Config(_)
            | Error::Alignment(_)
            | Error::AnswerTruncated { .. }
            | Error::QuestionTooLong { .. }
            | Error::EmptyQuestion
            | Error::Provider { .. }
            | Error::Sequence(_)
            | Error::EmptyDataset(_)
            | Error::InvalidWeight(_)
            | Error::MissingWeight(_)
            | Error::UnknownId(_)
            | Error::Checkpoint(_) => EXIT_INPUT,
            _ => EXIT_VERIFY,
        };
        let mut message = e.to_string();
        if code == EXIT_DEGENERATE {
            message += "; rerun with --uniform-weights to use uniform weights";
        }
        Failure { code, message }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BuildCorpus(a) => cmd_build_corpus(a),
        Command::Similarity(a) => cmd_similarity(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn base_config(args: &ConfigArgs) -> xltt::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_seed_env()?;
    Ok(cfg)
}

fn read_json(path: &Path) -> xltt::Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn write_file(path: &Path, contents: &str) -> xltt::Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::file(path, e))
}

fn create_dir(dir: &Path) -> xltt::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))
}

fn parse_pair<'s>(s: &'s str, what: &str) -> xltt::Result<(&'s str, &'s str)> {
    s.split_once('=')
        .filter(|(k, v)| !k.is_empty() && !v.is_empty())
        .ok_or_else(|| Error::Config(format!("{what} `{s}` is not KEY=VALUE")))
}

/// Pivot first, then each provider's language, with the provider map.
fn providers(cfg: &RunConfig) -> xltt::Result<(Vec<String>, ProviderMap)> {
    let mut langs = vec![cfg.pivot_language.clone()];
    let mut map = ProviderMap::new();
    for p in &cfg.providers {
        let (lang, spec) = parse_pair(p, "provider")?;
        if langs.iter().any(|l| l == lang) {
            return Err(Error::Config(format!("language `{lang}` listed twice")));
        }
        langs.push(lang.to_string());
        map.insert(lang.to_string(), parse_provider(spec)?);
    }
    Ok((langs, map))
}

fn cmd_build_corpus(a: BuildCorpusArgs) -> CmdResult {
    let mut cfg = base_config(&a.cfg)?;
    if let Some(l) = a.pivot_language {
        cfg.pivot_language = l;
    }
    if !a.providers.is_empty() {
        cfg.providers = a.providers;
    }
    if let Some(d) = a.out_dir {
        cfg.out_dir = d;
    }
    let (langs, map) = providers(&cfg)?;
    create_dir(&cfg.out_dir)?;
    let mut drops = BTreeMap::new();
    for input in &a.inputs {
        let (id, path) = parse_pair(input, "input")?;
        let doc = read_json(Path::new(path))?;
        let parsed = parse_squad(&doc, id, &cfg.pivot_language)?;
        if parsed.skipped() > 0 {
            log::warn!(
                "{id}: skipped {} mismatched and {} unanswered questions",
                parsed.skipped_mismatch,
                parsed.skipped_unanswered
            );
        }
        let (texts, report) = translate_corpus(&parsed.instances, &map, &langs)?;
        let out = cfg.out_dir.join(format!("{id}.jsonl"));
        write_jsonl(&out, &texts)?;
        log::info!("{id}: {} instances -> {}", texts.len(), out.display());
        drops.insert(id.to_string(), report);
    }
    write_file(
        &cfg.out_dir.join("drops.json"),
        &serde_json::to_string_pretty(&drops).map_err(Error::from)?,
    )?;
    cfg.write_echo(&cfg.out_dir)?;
    Ok(())
}

fn read_corpora(paths: &[PathBuf]) -> xltt::Result<Vec<ParallelText>> {
    if paths.is_empty() {
        return Err(Error::Config("no corpus files given".into()));
    }
    let mut out = Vec::new();
    for p in paths {
        out.extend(read_jsonl(p)?);
    }
    Ok(out)
}

/// Pivot-member questions grouped by source dataset.
fn question_documents(texts: &[ParallelText]) -> xltt::Result<Vec<QuestionDocument>> {
    let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for t in texts {
        let pivot = t
            .members
            .first()
            .ok_or_else(|| Error::Config(format!("instance {} has no members", t.id)))?;
        groups
            .entry(t.source_dataset.as_str())
            .or_default()
            .push(pivot.question.as_str());
    }
    groups
        .into_iter()
        .map(|(id, qs)| QuestionDocument::from_questions(id, qs))
        .collect()
}

fn target_document(path: &Path, language: &str) -> xltt::Result<QuestionDocument> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        let texts = read_jsonl(path)?;
        QuestionDocument::from_questions(
            "target",
            texts.iter().filter_map(|t| t.members.first()).map(|m| m.question.as_str()),
        )
    } else {
        let parsed = parse_squad(&read_json(path)?, "target", language)?;
        QuestionDocument::from_questions("target", parsed.instances.iter().map(|q| q.question.as_str()))
    }
}

fn cmd_similarity(a: SimilarityArgs) -> CmdResult {
    let mut cfg = base_config(&a.cfg)?;
    if !a.corpora.is_empty() {
        cfg.corpora = a.corpora;
    }
    let texts = read_corpora(&cfg.corpora)?;
    let docs = question_documents(&texts)?;
    let target = target_document(&a.target, &cfg.pivot_language)?;
    let report = match similarity_report(&docs, &target) {
        Err(Error::DegenerateWeights) if a.uniform_weights || cfg.uniform_weights => {
            log::warn!("all similarities are zero; using uniform weights");
            let ids: Vec<&str> = docs.iter().map(|d| d.dataset_id.as_str()).collect();
            let uniform = WeightTable::uniform(&ids)?;
            uniform
                .weights
                .into_iter()
                .map(|(id, w)| (id, WeightEntry { raw: 0.0, normalized: w }))
                .collect()
        }
        other => other?,
    };
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    match a.out {
        Some(p) => write_file(&p, &json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn load_weights(path: &Path, datasets: &[String]) -> xltt::Result<WeightTable> {
    let report: BTreeMap<String, WeightEntry> =
        serde_json::from_value(read_json(path)?).map_err(|e| Error::Schema {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    let mut raw = BTreeMap::new();
    for d in datasets {
        let entry = report
            .get(d)
            .ok_or_else(|| Error::MissingWeight(format!("{d} (in {})", path.display())))?;
        raw.insert(d.clone(), entry.normalized);
    }
    normalize_weights(&raw)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut cfg = base_config(&a.cfg)?;
    if !a.corpora.is_empty() {
        cfg.corpora = a.corpora;
    }
    if a.weights.is_some() {
        cfg.weights = a.weights;
    }
    cfg.uniform_weights |= a.uniform_weights;
    if let Some(v) = a.out_dir {
        cfg.out_dir = v;
    }
    if let Some(v) = a.steps {
        cfg.total_steps = v;
    }
    if let Some(v) = a.lr {
        cfg.lr0 = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.pivot_unk_rate {
        cfg.pivot_unk_rate = v;
    }
    if a.max_grad_norm.is_some() {
        cfg.max_grad_norm = a.max_grad_norm;
    }
    if a.no_maa {
        cfg.maa_enabled = false;
    }
    create_dir(&cfg.out_dir)?;

    let texts = read_corpora(&cfg.corpora)?;
    let vocab_path = cfg.out_dir.join("vocab.json");
    let vocab = match &a.resume {
        Some(_) => Vocabulary::load(&vocab_path)?,
        None => Vocabulary::build(texts.iter().flat_map(|t| t.texts())),
    };
    let auxiliaries = texts.first().map_or(0, |t| t.members.len().saturating_sub(1));
    if texts.iter().any(|t| t.members.len() != auxiliaries + 1) {
        return Err(Error::Config("corpus instances differ in member count".into()).into());
    }
    let (instances, _, drops) = tokenize_corpus(texts, &vocab, cfg.max_len)?;
    if drops.total() > 0 {
        log::warn!("dropped {} instances: {:?}", drops.total(), drops.causes);
    }
    let mut corpora = Corpora::new();
    for inst in instances {
        corpora.entry(inst.source_dataset.clone()).or_default().push(inst);
    }
    let datasets: Vec<String> = corpora.keys().cloned().collect();

    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config.model.encoder.vocab_size != vocab.len() {
                return Err(Error::Checkpoint("vocabulary does not match the checkpoint".into()).into());
            }
            log::info!("resuming from step {}", ckpt.step());
            Trainer::from_checkpoint(ckpt)
        }
        None => {
            let weights = match (&cfg.weights, cfg.uniform_weights) {
                (_, true) => WeightTable::uniform(&datasets)?,
                (Some(p), false) => load_weights(p, &datasets)?,
                (None, false) => {
                    return Err(Error::Config(
                        "need --weights REPORT or --uniform-weights".into(),
                    )
                    .into())
                }
            };
            vocab.save(&vocab_path)?;
            Trainer::new(cfg.train_config(vocab.len(), auxiliaries), weights)?
        }
    };
    // On resume the checkpoint's training settings apply; echo those.
    let data = cfg;
    let mut cfg = RunConfig::from_train_config(&trainer.config);
    cfg.pivot_language = data.pivot_language;
    cfg.providers = data.providers;
    cfg.corpora = data.corpora;
    cfg.weights = data.weights;
    cfg.uniform_weights = data.uniform_weights;
    cfg.out_dir = data.out_dir;
    cfg.write_echo(&cfg.out_dir)?;
    log::info!(
        "{} parameters, datasets {:?}, weights {:?}",
        trainer.model.parameter_count(),
        datasets,
        trainer.weights.weights
    );

    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = Arc::clone(&stop);
        ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst))
            .map_err(|e| Error::Config(format!("signal handler: {e}")))?;
    }
    let run = trainer.run(&corpora, Some(&stop));

    let ckpt_path = cfg.out_dir.join("checkpoint.bin");
    trainer.checkpoint().save(&ckpt_path)?;
    let trace_path = cfg.out_dir.join("trace.csv");
    let csv = trace_csv(&trainer.trace, trainer.config.model.auxiliaries);
    if a.resume.is_some() && trace_path.exists() {
        let body: String = csv.lines().skip(1).map(|l| format!("{l}\n")).collect();
        let mut old = std::fs::read_to_string(&trace_path).map_err(|e| Error::file(&trace_path, e))?;
        old.push_str(&body);
        write_file(&trace_path, &old)?;
    } else {
        write_file(&trace_path, &csv)?;
    }
    run?;
    log::info!("checkpoint at step {} -> {}", trainer.step(), ckpt_path.display());
    if stop.load(Ordering::SeqCst) {
        return Err(Failure {
            code: EXIT_INTERRUPTED,
            message: format!("interrupted; resume with --resume {}", ckpt_path.display()),
        });
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let (ckpt_path, vocab_path) = match (&a.run_dir, a.checkpoint, a.vocab) {
        (_, Some(c), Some(v)) => (c, v),
        (Some(d), c, v) => (
            c.unwrap_or_else(|| d.join("checkpoint.bin")),
            v.unwrap_or_else(|| d.join("vocab.json")),
        ),
        _ => {
            return Err(Error::Config("need --run-dir or both --checkpoint and --vocab".into()).into())
        }
    };
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let vocab = Vocabulary::load(&vocab_path)?;
    let texts = read_jsonl(&a.target)?;
    let (target, _, drops) = tokenize_corpus(texts, &vocab, ckpt.config.model.encoder.max_len)?;
    if drops.total() > 0 {
        log::warn!("dropped {} target instances: {:?}", drops.total(), drops.causes);
    }
    let train_datasets: Vec<String> = ckpt.weights.weights.keys().cloned().collect();
    let gold = match &a.gold {
        None => gold_of(&target),
        Some(path) => {
            let language = a
                .gold_language
                .clone()
                .or_else(|| target.first().map(|t| t.pivot.language.clone()))
                .unwrap_or_default();
            let gold = load_gold(&read_json(path)?, &language)?;
            log::info!("{} gold questions in {}", gold.len(), path.display());
            gold
        }
    };
    let report = run_xlg_with_gold(&ckpt.model, &train_datasets, &target, &gold, a.sanity)?;
    print!("{}", report.to_table());
    if let Some(dir) = &a.out_dir {
        create_dir(dir)?;
        write_file(
            &dir.join("report.json"),
            &serde_json::to_string_pretty(&report).map_err(Error::from)?,
        )?;
        write_file(&dir.join("report.txt"), &report.to_table())?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let corrupt = match &a.corrupt {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown op `{name}`; one of {}", known.join(", ")))
        })?),
    };
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()).into());
    }
    let results = gradcheck_suite(a.seeds, corrupt)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&results).map_err(Error::from)?);
    } else {
        println!("{:<12} {:>14} {:>6}  status", "component", "max rel err", "seed");
        for r in &results {
            let status = if r.passed() { "ok" } else { "FAIL" };
            println!("{:<12} {:>14.3e} {:>6}  {status}", r.component, r.max_rel_error, r.worst_seed);
        }
    }
    let failing: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.component.as_str())
        .collect();
    if failing.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_VERIFY,
            message: format!(
                "gradient check failed (tolerance {TOLERANCE:e}) for: {}",
                failing.join(", ")
            ),
        })
    }
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let mut synth = SynthConfig::default();
    if let Some(s) = a.seed {
        synth.seed = s;
    }
    let specs = ExperimentSpecs::default();
    let exp = generate(&synth, &specs, a.max_len)?;
    create_dir(&a.out_dir)?;
    for (id, build) in &exp.train {
        write_jsonl(&a.out_dir.join(format!("{id}.jsonl")), &build.texts)?;
    }
    write_jsonl(&a.out_dir.join(format!("{}.jsonl", specs.heldout.id)), &exp.heldout.texts)?;
    write_jsonl(&a.out_dir.join(format!("{}.jsonl", specs.target.id)), &exp.target.texts)?;
    let questions = serialize_squad(&exp.target_pivot);
    write_file(
        &a.out_dir.join(format!("{}-questions.json", specs.target.id)),
        &serde_json::to_string_pretty(&questions).map_err(Error::from)?,
    )?;
    let meta = serde_json::json!({"synth": synth, "specs": specs});
    write_file(
        &a.out_dir.join("synth.json"),
        &serde_json::to_string_pretty(&meta).map_err(Error::from)?,
    )?;
    log::info!("wrote synthetic experiment to {}", a.out_dir.display());
    Ok(())
}
