use std::cell::OnceCell;
use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::BufReader;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::json;

use ciw_annotate::{api, suggestions_from_predictions, Store, StoreConfig, SystemClock};
use ciw_core::dataset::{
    class_distribution, parse_citation_records, parse_labeled_records, split_dataset, split_dataset_stratified,
    CitationInstance, DatasetRecord, DatasetSplit, IntentLabel, LabeledExample, RecordFormat,
};
use ciw_core::ensemble::{
    accuracy, build_meta_features, cross_val_meta_predict, majority_vote_all, meta_predict, out_of_fold_predictions,
    priority_by_accuracy, priority_from_ids, train_gbdt, train_logistic, BaseLearner, EnsembleError, MetaFeatures,
    MetaKind, MetaModel, PredictionMatrix, ProgramLearner,
};
use ciw_core::eval::{confusion_csv, evaluate, per_class_csv, shot_sweep, sweep_demos};
use ciw_core::lm::{Gateway, ReplayCache};
use ciw_core::optimizer::optimize;
use ciw_core::program::{
    classify_all, manual_prompt, read_predictions, write_predictions, ParseStatus, Prediction, PromptProgram,
    DEFAULT_INSTRUCTION,
};

use crate::backends;
use crate::config::RunConfig;
use crate::error::CliError;
use crate::rundir::{self, sha256_hex, RunDir};
use crate::{
    Cli, ClassifyArgs, Command, DataArgs, EnsembleCommand, EnsemblePredictArgs, EnsembleTrainArgs, EvaluateArgs,
    IngestArgs, MetaArgs, OptimizeArgs, PromptArgs, ServeArgs, SplitArgs, SweepArgs,
};

pub struct Ctx {
    pub config: RunConfig,
    pub run: RunDir,
    cache: OnceCell<Arc<ReplayCache>>,
}

impl Ctx {
    fn cache(&self) -> Result<Arc<ReplayCache>, CliError> {
        if let Some(c) = self.cache.get() {
            return Ok(c.clone());
        }
        let path = self.config.cache.clone().unwrap_or_else(|| self.run.file("lm_cache.jsonl"));
        let cache = Arc::new(ReplayCache::open(&path)?);
        Ok(self.cache.get_or_init(|| cache).clone())
    }

    fn gateway(&self, name: &str) -> Result<Gateway, CliError> {
        backends::gateway(name, self.config.backend(name)?, self.config.lm_mode, self.cache()?)
    }

    /// `explicit`, or the run directory's `default` file when it exists.
    fn input(&self, explicit: Option<&PathBuf>, default: &str, flag: &str) -> Result<PathBuf, CliError> {
        if let Some(p) = explicit {
            return Ok(p.clone());
        }
        let p = self.run.file(default);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::Config(format!("pass {flag} or create {} first", p.display())))
        }
    }

    fn template(&self) -> Result<PromptProgram, CliError> {
        let p = &self.config.prompt;
        let instruction = match (&p.instruction, p.version.as_str()) {
            (Some(text), _) => text.clone(),
            (None, "default") => DEFAULT_INSTRUCTION.to_string(),
            (None, v) => manual_prompt(v)
                .ok_or_else(|| CliError::Config(format!("unknown prompt version {v:?} (expected default, v000 or v001)")))?
                .to_string(),
        };
        let program = PromptProgram::new(instruction);
        Ok(if p.cot { program } else { program.without_cot() })
    }

    /// The labeled corpus: the configured dataset, else the run's ingested copy.
    fn dataset(&self) -> Result<Vec<LabeledExample>, CliError> {
        match &self.config.dataset {
            Some(path) => read_labeled(path, self.config.format),
            None => read_labeled(&self.input(None, "dataset.jsonl", "--dataset")?, RecordFormat::JsonLines),
        }
    }

    fn split_data(&self, data: &DataArgs) -> Result<DatasetSplit, CliError> {
        let existing = |explicit: &Option<PathBuf>, name: &str| {
            explicit.clone().or_else(|| Some(self.run.file(name)).filter(|p| p.exists()))
        };
        match (existing(&data.train, "train.jsonl"), existing(&data.val, "val.jsonl")) {
            (Some(train), Some(val)) => Ok(DatasetSplit {
                train: read_labeled(&train, RecordFormat::JsonLines)?,
                val: read_labeled(&val, RecordFormat::JsonLines)?,
                seed: self.config.split.seed,
                ratio: self.config.split.ratio,
                warnings: Vec::new(),
            }),
            _ => do_split(&self.dataset()?, &self.config),
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

fn read_labeled(path: &Path, format: RecordFormat) -> Result<Vec<LabeledExample>, CliError> {
    let parsed = parse_labeled_records(open(path)?, format)?;
    if parsed.diagnostics.skipped > 0 {
        log::warn!("{}: skipped {} records", path.display(), parsed.diagnostics.skipped);
    }
    Ok(parsed.items)
}

fn read_instances(path: &Path, format: RecordFormat) -> Result<Vec<CitationInstance>, CliError> {
    let parsed = parse_citation_records(open(path)?, format)?;
    if parsed.diagnostics.skipped > 0 {
        log::warn!("{}: skipped {} records", path.display(), parsed.diagnostics.skipped);
    }
    Ok(parsed.items)
}

fn read_preds(path: &Path) -> Result<Vec<Prediction>, CliError> {
    read_predictions(open(path)?).map_err(|e| CliError::io(path, e))
}

fn predictions_text(predictions: &[Prediction]) -> String {
    let mut out = Vec::new();
    write_predictions(&mut out, predictions).expect("writing to memory");
    String::from_utf8(out).expect("utf-8")
}

fn labeled_text(examples: &[LabeledExample]) -> String {
    let mut out = Vec::new();
    ciw_core::dataset::write_labeled_records(&mut out, examples).expect("writing to memory");
    String::from_utf8(out).expect("utf-8")
}

fn do_split(all: &[LabeledExample], config: &RunConfig) -> Result<DatasetSplit, CliError> {
    let s = &config.split;
    Ok(if s.stratify {
        split_dataset_stratified(all, s.ratio, s.seed)?
    } else {
        split_dataset(all, s.ratio, s.seed)?
    })
}

fn apply_prompt(config: &mut RunConfig, args: &PromptArgs) {
    if let Some(text) = &args.instruction {
        config.prompt.instruction = Some(text.clone());
    }
    if let Some(v) = &args.prompt_version {
        config.prompt.version = v.clone();
    }
    if args.no_cot {
        config.prompt.cot = false;
    }
}

fn apply_meta(config: &mut RunConfig, args: &MetaArgs) {
    let e = &mut config.ensemble;
    if let Some(k) = args.kind {
        e.kind = k;
    }
    if let Some(f) = args.folds {
        e.folds = f;
    }
    if let Some(s) = args.seed {
        e.seed = s;
        e.logistic.seed = s;
        e.gbdt.seed = s;
    }
    if let Some(v) = args.learning_rate {
        e.logistic.learning_rate = v;
    }
    if let Some(v) = args.epochs {
        e.logistic.epochs = v;
    }
    if let Some(v) = args.l2 {
        e.logistic.l2 = v;
    }
    if let Some(v) = args.rounds {
        e.gbdt.rounds = v;
    }
    if let Some(v) = args.depth {
        e.gbdt.depth = v;
    }
    if let Some(v) = args.shrinkage {
        e.gbdt.shrinkage = v;
    }
    if let Some(v) = args.lambda {
        e.gbdt.lambda = v;
    }
}

/// Fold subcommand flags into the config.
fn apply_overrides(config: &mut RunConfig, command: &Command) {
    match command {
        Command::Ingest(a) => {
            if let Some(p) = &a.input {
                config.dataset = Some(p.clone());
            }
            if let Some(f) = a.format {
                config.format = f;
            }
        }
        Command::Split(a) => {
            if let Some(p) = &a.dataset {
                config.dataset = Some(p.clone());
            }
            if let Some(r) = a.ratio {
                config.split.ratio = r;
            }
            if let Some(s) = a.seed {
                config.split.seed = s;
            }
            if a.stratify {
                config.split.stratify = true;
            }
        }
        Command::Classify(a) => apply_prompt(config, &a.prompt),
        Command::SweepShots(a) => apply_prompt(config, &a.prompt),
        Command::Optimize(a) => {
            apply_prompt(config, &a.prompt);
            let o = &mut config.optimizer;
            if let Some(m) = &a.model {
                o.model = Some(m.clone());
            }
            if let Some(p) = &a.proposer {
                o.proposer = Some(p.clone());
            }
            if let Some(v) = a.instructions {
                o.instructions = v;
            }
            if let Some(v) = a.fewshot_sets {
                o.fewshot_sets = v;
            }
            if let Some(v) = a.max_demos {
                o.max_demos = v;
            }
            if let Some(v) = a.trials {
                o.trials = v;
            }
            if let Some(v) = a.eval_fraction {
                o.eval_fraction = v;
            }
            if let Some(v) = a.seed {
                o.seed = v;
            }
            if a.balanced {
                o.balanced = true;
            }
        }
        Command::Ensemble(EnsembleCommand::Train(a)) => {
            apply_prompt(config, &a.prompt);
            apply_meta(config, &a.meta);
            if let Some(s) = a.shots {
                config.ensemble.shots = s;
            }
        }
        Command::Ensemble(EnsembleCommand::Predict(_))
        | Command::Evaluate(_)
        | Command::Serve(_)
        | Command::ExportReport(_) => {}
    }
}

fn command_name(command: &Command) -> &'static str {
    match command {
        Command::Ingest(_) => "ingest",
        Command::Split(_) => "split",
        Command::Classify(_) => "classify",
        Command::Optimize(_) => "optimize",
        Command::SweepShots(_) => "sweep-shots",
        Command::Ensemble(EnsembleCommand::Train(_)) => "ensemble train",
        Command::Ensemble(EnsembleCommand::Predict(_)) => "ensemble predict",
        Command::Evaluate(_) => "evaluate",
        Command::Serve(_) => "serve",
        Command::ExportReport(_) => "export-report",
    }
}

pub fn run(cli: Cli) -> Result<String, CliError> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Command::Serve(args) = &cli.command {
        return serve(args);
    }
    let mut config = base.clone();
    if let Some(m) = cli.lm_mode {
        config.lm_mode = m;
    }
    if let Some(c) = &cli.cache {
        config.cache = Some(c.clone());
    }
    apply_overrides(&mut config, &cli.command);
    config.validate()?;

    let base_digest = base.digest();
    let dir = cli
        .run_dir
        .clone()
        .or_else(|| base.run_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&base_digest[..12]));
    rundir::prepare(&dir, &base)?;
    let ctx = Ctx {
        run: RunDir {
            path: dir,
            base_digest,
            digest: config.digest(),
            command: command_name(&cli.command).to_string(),
        },
        config,
        cache: OnceCell::new(),
    };
    match &cli.command {
        Command::Ingest(a) => ingest(&ctx, a),
        Command::Split(a) => split(&ctx, a),
        Command::Classify(a) => classify(&ctx, a),
        Command::Optimize(a) => run_optimize(&ctx, a),
        Command::SweepShots(a) => sweep(&ctx, a),
        Command::Ensemble(EnsembleCommand::Train(a)) => ensemble_train(&ctx, a),
        Command::Ensemble(EnsembleCommand::Predict(a)) => ensemble_predict(&ctx, a),
        Command::Evaluate(a) => run_evaluate(&ctx, a),
        Command::ExportReport(a) => crate::report::export(&ctx.run, &a.output),
        Command::Serve(_) => unreachable!("handled above"),
    }
}

fn ingest(ctx: &Ctx, args: &IngestArgs) -> Result<String, CliError> {
    let input = ctx
        .config
        .dataset
        .clone()
        .ok_or_else(|| CliError::Config("ingest needs --input or `dataset` in the config".into()))?;
    let format = ctx.config.format;
    if args.unlabeled {
        let parsed = parse_citation_records(open(&input)?, format)?;
        let mut text = String::new();
        for instance in &parsed.items {
            let record = DatasetRecord {
                instance: instance.clone(),
                label: None,
                label_source: None,
            };
            text.push_str(&serde_json::to_string(&record).expect("record serializes"));
            text.push('\n');
        }
        let out = ctx.run.write("instances.jsonl", &text)?;
        ctx.run.write_json(
            "ingest.json",
            &json!({"input": input, "output": "instances.jsonl", "diagnostics": parsed.diagnostics}),
        )?;
        return Ok(format!(
            "ingested {} instances ({} skipped) -> {}",
            parsed.items.len(),
            parsed.diagnostics.skipped,
            out.display()
        ));
    }
    let parsed = parse_labeled_records(open(&input)?, format)?;
    if parsed.items.is_empty() {
        return Err(ciw_core::dataset::DatasetError::EmptyDataset.into());
    }
    let hist = class_distribution(&parsed.items);
    let out = ctx.run.write("dataset.jsonl", &labeled_text(&parsed.items))?;
    ctx.run.write_json(
        "ingest.json",
        &json!({
            "input": input,
            "output": "dataset.jsonl",
            "diagnostics": parsed.diagnostics,
            "class_distribution": hist,
        }),
    )?;
    Ok(format!(
        "ingested {} labeled records ({} skipped; {}) -> {}",
        parsed.items.len(),
        parsed.diagnostics.skipped,
        hist.summary(),
        out.display()
    ))
}

fn split(ctx: &Ctx, _args: &SplitArgs) -> Result<String, CliError> {
    let all = ctx.dataset()?;
    let s = do_split(&all, &ctx.config)?;
    ctx.run.write("train.jsonl", &labeled_text(&s.train))?;
    ctx.run.write("val.jsonl", &labeled_text(&s.val))?;
    ctx.run.write_json(
        "split.json",
        &json!({
            "seed": s.seed,
            "ratio": s.ratio,
            "stratify": ctx.config.split.stratify,
            "total": all.len(),
            "train_size": s.train.len(),
            "val_size": s.val.len(),
            "train_distribution": class_distribution(&s.train),
            "val_distribution": class_distribution(&s.val),
            "warnings": s.warnings,
        }),
    )?;
    Ok(format!(
        "split {} examples -> train {} / val {} (ratio {}, seed {}) in {}",
        all.len(),
        s.train.len(),
        s.val.len(),
        s.ratio,
        s.seed,
        ctx.run.path.display()
    ))
}

fn parse_counts(predictions: &[Prediction]) -> (usize, usize) {
    let count = |status| predictions.iter().filter(|p| p.parse_status == status).count();
    (count(ParseStatus::Recovered), count(ParseStatus::Fallback))
}

fn classify(ctx: &Ctx, args: &ClassifyArgs) -> Result<String, CliError> {
    let input = ctx.input(args.input.as_ref(), "val.jsonl", "--input")?;
    let targets = read_instances(&input, RecordFormat::JsonLines)?;
    let program = match &args.program {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None if args.shots > 0 => {
            let pool = read_labeled(&ctx.input(args.demos.as_ref(), "train.jsonl", "--demos")?, RecordFormat::JsonLines)?;
            let demos = sweep_demos(&pool, args.shots, args.seed).ok_or_else(|| {
                CliError::Config(format!("{} shots requested but the pool has {} examples", args.shots, pool.len()))
            })?;
            ctx.template()?.with_demos(demos)
        }
        None => ctx.template()?,
    };
    let gateway = ctx.gateway(&args.model)?;
    let predictions = classify_all(&program, &targets, &gateway)?;
    let name = args.output.clone().unwrap_or_else(|| format!("predictions-{}.jsonl", args.model));
    let out = ctx.run.write(&name, &predictions_text(&predictions))?;
    let (recovered, fallback) = parse_counts(&predictions);
    Ok(format!(
        "classified {} citations with {} ({recovered} recovered, {fallback} fallback) -> {}",
        predictions.len(),
        args.model,
        out.display()
    ))
}

fn run_optimize(ctx: &Ctx, args: &OptimizeArgs) -> Result<String, CliError> {
    let settings = &ctx.config.optimizer;
    let model = settings
        .model
        .clone()
        .ok_or_else(|| CliError::Config("optimize needs --model or optimizer.model in the config".into()))?;
    let proposer_name = settings.proposer.clone().unwrap_or_else(|| model.clone());
    let split = ctx.split_data(&args.data)?;
    let gateway = ctx.gateway(&model)?;
    let proposer = if proposer_name == model {
        gateway.clone()
    } else {
        ctx.gateway(&proposer_name)?
    };
    let mut report = optimize(&settings.to_core(), &ctx.template()?, &split.train, &split.val, &gateway, &proposer)?;
    report.config_digest = Some(ctx.run.digest.clone());
    let out = ctx.run.write_json("optimizer_report.json", &report)?;
    ctx.run.write_json("program.json", &report.best.program)?;
    let c = &report.config;
    Ok(format!(
        "optimized {model}: instructions={} fewshot-sets={} max-demos={} trials={}; best cell (instruction {}, demo set {}) trial {:.3}, validation {:.3} -> {}",
        c.num_instructions,
        c.num_fewshot_sets,
        c.max_bootstrapped_demos,
        c.num_trials,
        report.best.instruction_index,
        report.best.demo_set_index,
        report.best.trial_score,
        report.best.full_val_score,
        out.display()
    ))
}

fn sweep(ctx: &Ctx, args: &SweepArgs) -> Result<String, CliError> {
    let split = ctx.split_data(&args.data)?;
    let gateways = args
        .models
        .iter()
        .map(|m| Ok((m.clone(), ctx.gateway(m)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let refs: Vec<(String, &Gateway)> = gateways.iter().map(|(m, g)| (m.clone(), g)).collect();
    let table = shot_sweep(&ctx.template()?, &refs, &args.shots, &split, args.seed)?;
    let out = ctx.run.write("sweep.csv", &table.to_csv())?;
    ctx.run.write_json("sweep.json", &table)?;
    let failed = table.rows.iter().flat_map(|r| &r.cells).filter(|c| c.accuracy.is_none()).count();
    Ok(format!(
        "swept {} models over {:?} shots on {} validation examples ({failed} failed cells) -> {}",
        table.rows.len(),
        table.shot_counts,
        split.val.len(),
        out.display()
    ))
}

/// `NAME=PATH` or `PATH` (named after the file, minus a `predictions-` prefix).
fn load_columns(specs: &[String]) -> Result<Vec<(String, Vec<Prediction>)>, CliError> {
    specs
        .iter()
        .map(|spec| {
            let (name, path) = match spec.split_once('=') {
                Some((n, p)) => (n.to_string(), PathBuf::from(p)),
                None => {
                    let path = PathBuf::from(spec);
                    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or(spec);
                    (stem.trim_start_matches("predictions-").to_string(), path)
                }
            };
            Ok((name, read_preds(&path)?))
        })
        .collect()
}

fn kind_name(kind: MetaKind) -> &'static str {
    match kind {
        MetaKind::Majority => "majority",
        MetaKind::Logistic => "logistic",
        MetaKind::Gbdt => "gbdt",
    }
}

fn ensemble_train(ctx: &Ctx, args: &EnsembleTrainArgs) -> Result<String, CliError> {
    let settings = &ctx.config.ensemble;
    let (pm, source, dropped) = if !args.base_models.is_empty() {
        let data = read_labeled(&ctx.input(args.data.as_ref(), "train.jsonl", "--data")?, RecordFormat::JsonLines)?;
        let gateways = args
            .base_models
            .iter()
            .map(|m| ctx.gateway(m))
            .collect::<Result<Vec<_>, _>>()?;
        let template = ctx.template()?;
        let learners: Vec<ProgramLearner> = args
            .base_models
            .iter()
            .zip(&gateways)
            .map(|(name, gateway)| ProgramLearner {
                name: name.clone(),
                program: template.clone(),
                gateway,
                shots: settings.shots,
                seed: settings.seed,
            })
            .collect();
        let refs: Vec<&dyn BaseLearner> = learners.iter().map(|l| l as &dyn BaseLearner).collect();
        let oof = out_of_fold_predictions(&refs, &data, settings.folds, settings.seed)?;
        ctx.run.write_json("oof_predictions.json", &json!({"matrix": oof.matrix, "fold_of": oof.fold_of, "warnings": oof.warnings}))?;
        (oof.matrix, "out-of-fold", Vec::new())
    } else {
        if args.predictions.is_empty() {
            return Err(CliError::Config("pass --predictions NAME=PATH ... or --base-models".into()));
        }
        let gold = read_labeled(&ctx.input(args.gold.as_ref(), "val.jsonl", "--gold")?, RecordFormat::JsonLines)?;
        let (pm, dropped) = PredictionMatrix::from_predictions(&load_columns(&args.predictions)?, Some(&gold))?;
        if !dropped.is_empty() {
            log::warn!("{} gold examples lack a prediction from some model and were dropped", dropped.len());
        }
        (pm, "given", dropped)
    };
    let gold = pm.gold.clone().ok_or_else(|| EnsembleError::MissingGold("no gold column".into()))?;
    let solo = pm.solo_accuracies()?;
    let priority = if args.priority.is_empty() {
        priority_by_accuracy(&solo)
    } else {
        priority_from_ids(&pm.model_ids, &args.priority)?
    };
    let majority = accuracy(&majority_vote_all(&pm, &priority), &gold);
    let features = build_meta_features(&pm);
    let kind = settings.kind;
    let train = |f: &MetaFeatures, g: &[IntentLabel]| -> Result<MetaModel, EnsembleError> {
        match kind {
            MetaKind::Majority => MetaModel::majority(&pm.model_ids, priority.clone()),
            MetaKind::Logistic => train_logistic(f, g, &settings.logistic),
            MetaKind::Gbdt => train_gbdt(f, g, &settings.gbdt),
        }
    };
    let mut model = train(&features, &gold)?;
    model.training_meta.fold_scheme = Some(format!("{source}; {}-fold cross-validation, seed {}", settings.folds, settings.seed));
    let fitted: Vec<_> = meta_predict(&model, &features)?.into_iter().map(|p| p.label).collect();
    let train_accuracy = accuracy(&fitted, &gold);
    let cv_accuracy = if kind != MetaKind::Majority && pm.num_examples() >= settings.folds && settings.folds >= 2 {
        Some(accuracy(&cross_val_meta_predict(&features, &gold, settings.folds, settings.seed, train)?, &gold))
    } else {
        None
    };
    let out = ctx.run.write_json("meta_model.json", &model)?;
    let solo_map: BTreeMap<&str, f64> = pm.model_ids.iter().map(String::as_str).zip(solo.iter().copied()).collect();
    ctx.run.write_json(
        "ensemble_train.json",
        &json!({
            "kind": kind,
            "source": source,
            "rows": pm.num_examples(),
            "models": pm.model_ids,
            "solo_accuracies": solo_map,
            "priority": priority.iter().map(|&i| &pm.model_ids[i]).collect::<Vec<_>>(),
            "majority_accuracy": majority,
            "train_accuracy": train_accuracy,
            "cross_validated_accuracy": cv_accuracy,
            "folds": settings.folds,
            "dropped": dropped,
        }),
    )?;
    let best_solo = solo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(format!(
        "trained {} meta-model on {} rows x {} models: best solo {best_solo:.3}, majority {majority:.3}, fitted {train_accuracy:.3}{} -> {}",
        kind_name(kind),
        pm.num_examples(),
        pm.num_models(),
        cv_accuracy.map(|a| format!(", cross-validated {a:.3}")).unwrap_or_default(),
        out.display()
    ))
}

fn ensemble_predict(ctx: &Ctx, args: &EnsemblePredictArgs) -> Result<String, CliError> {
    let path = ctx.input(args.model_file.as_ref(), "meta_model.json", "--model-file")?;
    let model = MetaModel::load(&path)?;
    let fingerprint = sha256_hex(&std::fs::read(&path).map_err(|e| CliError::io(&path, e))?);
    let mut layout: Vec<&str> = Vec::new();
    for c in &model.column_layout {
        if layout.last() != Some(&c.model_id.as_str()) {
            layout.push(&c.model_id);
        }
    }
    let mut columns: HashMap<String, Vec<Prediction>> = load_columns(&args.predictions)?.into_iter().collect();
    let ordered = layout
        .iter()
        .map(|id| {
            columns.remove(*id).map(|p| (id.to_string(), p)).ok_or_else(|| {
                EnsembleError::Malformed(format!("meta-model expects predictions named {layout:?}; {id:?} is missing"))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(extra) = columns.keys().next() {
        return Err(EnsembleError::Malformed(format!("meta-model was not trained on {extra:?}")).into());
    }
    let gold = args
        .gold
        .as_ref()
        .map(|p| read_labeled(p, RecordFormat::JsonLines))
        .transpose()?;
    let (pm, _) = PredictionMatrix::from_predictions(&ordered, gold.as_deref())?;
    let meta = meta_predict(&model, &build_meta_features(&pm))?;
    let model_id = format!("meta-{}", kind_name(model.kind));
    let predictions: Vec<Prediction> = meta
        .iter()
        .map(|m| Prediction {
            example_id: m.example_id.clone(),
            label: m.label,
            parse_status: ParseStatus::Clean,
            model_id: model_id.clone(),
            program_fingerprint: fingerprint.clone(),
            reasoning: None,
            raw_text: String::new(),
        })
        .collect();
    let name = args.output.clone().unwrap_or_else(|| "meta_predictions.jsonl".to_string());
    let out = ctx.run.write(&name, &predictions_text(&predictions))?;
    let acc = pm.gold.as_ref().map(|g| {
        let labels: Vec<_> = predictions.iter().map(|p| p.label).collect();
        format!(" (accuracy {:.3})", accuracy(&labels, g))
    });
    Ok(format!(
        "predicted {} rows with the {} meta-model{} -> {}",
        predictions.len(),
        kind_name(model.kind),
        acc.unwrap_or_default(),
        out.display()
    ))
}

fn run_evaluate(ctx: &Ctx, args: &EvaluateArgs) -> Result<String, CliError> {
    let predictions = read_preds(&args.predictions)?;
    let gold = read_labeled(&ctx.input(args.gold.as_ref(), "val.jsonl", "--gold")?, RecordFormat::JsonLines)?;
    let report = evaluate(&predictions, &gold, args.strict)?;
    let name = args.name.clone().unwrap_or_else(|| {
        args.predictions
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("predictions")
            .to_string()
    });
    let out = ctx.run.write_json(&format!("eval-{name}.json"), &report)?;
    ctx.run.write(&format!("confusion-{name}.csv"), &confusion_csv(&report, false))?;
    ctx.run.write(&format!("confusion-normalized-{name}.csv"), &confusion_csv(&report, true))?;
    ctx.run.write(&format!("per-class-{name}.csv"), &per_class_csv(&report))?;
    Ok(format!(
        "accuracy {:.3} macro-F1 {:.3} on {} examples ({} missing, fallback rate {:.3}) -> {}",
        report.accuracy,
        report.macro_f1,
        report.n_examples,
        report.missing_predictions.len(),
        report.fallback_rate,
        out.display()
    ))
}

fn serve(args: &ServeArgs) -> Result<String, CliError> {
    let dir = &args.data_dir;
    let instances_path = dir.join("instances.jsonl");
    let instances = read_instances(&instances_path, RecordFormat::JsonLines)?;
    let suggestions_path = dir.join("suggestions.jsonl");
    let suggestions = if suggestions_path.exists() {
        suggestions_from_predictions(&read_preds(&suggestions_path)?)
    } else {
        HashMap::new()
    };
    let credentials = args
        .credentials
        .as_ref()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            toml::from_str::<HashMap<String, String>>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
        })
        .transpose()?;
    let config = StoreConfig {
        consensus_threshold: args.consensus_threshold,
        lease_seconds: args.lease_seconds,
        adjudicators: args.adjudicators.clone(),
        credentials,
    };
    if config.consensus_threshold < 2 {
        return Err(CliError::Config("consensus threshold must be at least 2".into()));
    }
    let store = Store::open(dir.join("events.jsonl"), config, Arc::new(SystemClock))?;
    let added = store.add_instances(instances.into_iter().map(|i| {
        let s = suggestions.get(&i.id).cloned();
        (i, s)
    }))?;
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .map_err(|e| CliError::Config(format!("bad listen address: {e}")))?;
    let total = store.stats().instances;
    println!("serving {total} instances ({added} new, {} with suggestions) on http://{addr}", suggestions.len());
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::io(dir, e))?;
    runtime
        .block_on(api::serve(Arc::new(store), addr))
        .map_err(|e| CliError::io(dir, e))?;
    Ok("annotation service stopped".to_string())
}
