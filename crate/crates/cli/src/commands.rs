use std::fs;
use std::io::Write;
use std::path::PathBuf;

use kgc_core::bridge::{BridgeScorer, Endpoint, ScoreItem};
use kgc_core::eval::{
    evaluate_link_prediction, evaluate_relation_prediction, evaluate_triple_classification,
    EvalOptions, EvalReport,
};
use kgc_core::graph::cardinality_table;
use kgc_core::ingest::{
    load_dataset, LoadOptions, SplitRatios, ENTITY_TEXT_FILE, ENTITY_TYPE_FILE, META_FILE,
    RELATION_SYNONYM_FILE, RELATION_TEXT_FILE,
};
use kgc_core::sampling::{shard_rng, Corrupter};
use kgc_core::scorers::checkpoint::Checkpoint;
use kgc_core::scorers::{self, Model, ScorerKind, Task, TrainConfig, DEFAULT_SEED};
use kgc_core::{DatasetBundle, Scorer};
use serde::Serialize;
use serde_json::json;

use crate::args::{
    AblateArgs, Cli, Command, DataArgs, EvalArgs, ExportArgs, IngestArgs, ModelArgs, TrainArgs,
};
use crate::manifest::{checksum, unix_now, InputFile, RunManifest};
use crate::{tables, CliError};

const DATA_FILES: [&str; 10] = [
    "train.tsv",
    "dev.tsv",
    "valid.tsv",
    "test.tsv",
    "all.tsv",
    ENTITY_TEXT_FILE,
    RELATION_TEXT_FILE,
    ENTITY_TYPE_FILE,
    RELATION_SYNONYM_FILE,
    META_FILE,
];

struct Run<'a> {
    cli: &'a Cli,
    seed: u64,
    inputs: Vec<InputFile>,
    outputs: Vec<PathBuf>,
}

impl Run<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.cli.out.join(rel)
    }

    fn load_data(&mut self, d: &DataArgs) -> Result<DatasetBundle, CliError> {
        if !d.data.is_dir() {
            return Err(CliError::io(
                &d.data,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
            ));
        }
        for name in DATA_FILES {
            let p = d.data.join(name);
            if p.is_file() {
                self.inputs.push(checksum(&p)?);
            }
        }
        let [train, dev, test] = d.ratios[..] else {
            return Err(CliError::Usage("--ratios takes three values".into()));
        };
        let opts = LoadOptions {
            literalize: d.literalize,
            ratios: SplitRatios { train, dev, test },
            seed: self.seed,
        };
        Ok(load_dataset(&d.data, &opts)?)
    }

    fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.outputs.push(PathBuf::from(rel));
        Ok(())
    }

    fn write_json(&mut self, rel: &str, value: &impl Serialize) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(kgc_core::Error::from)?;
        text.push('\n');
        self.write_bytes(rel, text.as_bytes())
    }

    fn write_table(&mut self, rel: &str, key: &str, rows: &[tables::Row]) -> Result<(), CliError> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        tables::write(&path, key, rows)?;
        self.outputs.push(PathBuf::from(rel));
        Ok(())
    }
}

pub fn run(cli: &Cli, argv: Vec<String>) -> Result<(), CliError> {
    let started = unix_now();
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Usage("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    fs::create_dir_all(&cli.out).map_err(|e| CliError::io(&cli.out, e))?;
    let mut run = Run {
        cli,
        seed: cli.seed.unwrap_or(DEFAULT_SEED),
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    match &cli.command {
        Command::Ingest(a) => ingest(&mut run, a)?,
        Command::Train(a) => train(&mut run, a)?,
        Command::EvalTc(a) => eval(&mut run, a, Task::Tc)?,
        Command::EvalLp(a) => eval(&mut run, a, Task::Lp)?,
        Command::EvalRp(a) => eval(&mut run, a, Task::Rp)?,
        Command::Ablate(a) => ablate(&mut run, a)?,
        Command::Export(a) => export(&mut run, a)?,
    }
    let manifest = RunManifest {
        tool: "kgc-forge",
        version: env!("CARGO_PKG_VERSION"),
        command: cli.command.name().to_owned(),
        argv,
        config: serde_json::to_value(cli).map_err(kgc_core::Error::from)?,
        seed: run.seed,
        workers: rayon::current_num_threads(),
        inputs: run.inputs.clone(),
        outputs: run.outputs.clone(),
        started_at: (!cli.deterministic).then_some(started),
        finished_at: (!cli.deterministic).then(unix_now),
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(kgc_core::Error::from)?;
    text.push('\n');
    let path = cli.out.join("manifest.json");
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

#[derive(Serialize)]
struct IngestReport {
    entities: usize,
    relations: usize,
    train: usize,
    dev: usize,
    test: usize,
    literals: usize,
    cardinality: std::collections::BTreeMap<String, usize>,
}

fn ingest(run: &mut Run<'_>, a: &IngestArgs) -> Result<(), CliError> {
    let bundle = run.load_data(&a.data)?;
    let dataset_dir = run.path("dataset");
    for p in bundle.write(&dataset_dir)? {
        let rel = p.strip_prefix(&run.cli.out).unwrap_or(&p).to_owned();
        run.outputs.push(rel);
    }
    let kg = &bundle.graph;
    let mut cardinality = std::collections::BTreeMap::new();
    let threshold = kgc_core::graph::DEFAULT_CARDINALITY_THRESHOLD;
    for c in cardinality_table(&bundle.train, kg.num_relations(), threshold)
        .into_iter()
        .flatten()
    {
        *cardinality
            .entry(c.category.as_str().to_owned())
            .or_insert(0) += 1;
    }
    let report = IngestReport {
        entities: kg.num_entities(),
        relations: kg.num_relations(),
        train: bundle.train.len(),
        dev: bundle.dev.len(),
        test: bundle.test.len(),
        literals: bundle.literals.len(),
        cardinality,
    };
    run.write_json("report.json", &report)
}

#[derive(Serialize)]
struct TrainReport {
    scorer: ScorerKind,
    task: Task,
    config: TrainConfig,
    initial_loss: f64,
    epoch_losses: Vec<f64>,
}

fn train(run: &mut Run<'_>, a: &TrainArgs) -> Result<(), CliError> {
    let kind = ScorerKind::from(a.scorer);
    if kind == ScorerKind::Bridge {
        return Err(CliError::Usage(
            "bridge scorers are trained outside this tool".into(),
        ));
    }
    let bundle = run.load_data(&a.data)?;
    let task = Task::from(a.task);
    let cfg = a
        .hyper
        .apply(TrainConfig::defaults(kind, task), Some(run.seed));
    let trained = scorers::train(kind, &bundle, task, &cfg)?;
    let ckpt = Checkpoint::new(task, cfg.clone(), trained.model);
    run.write_bytes("model.json", ckpt.to_json()?.as_bytes())?;
    run.write_json(
        "report.json",
        &TrainReport {
            scorer: kind,
            task,
            config: cfg,
            initial_loss: trained.initial_loss,
            epoch_losses: trained.epoch_losses,
        },
    )
}

fn check_dimensions(model: &Model, bundle: &DatasetBundle) -> Result<(), CliError> {
    let kg = &bundle.graph;
    let (entities, relations) = match model {
        Model::Classifier(s) => (None, s.num_relations()),
        Model::Transe(s) | Model::Distmult(s) => {
            (Some(s.entity_vectors.rows), s.relation_vectors.rows)
        }
    };
    if entities.is_some_and(|e| e != kg.num_entities()) || relations != kg.num_relations() {
        return Err(CliError::Runtime(format!(
            "checkpoint does not match the dataset ({} entities, {} relations)",
            kg.num_entities(),
            kg.num_relations()
        )));
    }
    Ok(())
}

/// Resolves the scorer for an evaluation run.
fn scorer(
    run: &mut Run<'_>,
    m: &ModelArgs,
    bundle: &DatasetBundle,
    task: Task,
) -> Result<(Box<dyn Scorer>, String, serde_json::Value), CliError> {
    let kind = ScorerKind::from(m.scorer);
    if let Some(endpoint) = &m.endpoint {
        let endpoint: Endpoint = endpoint
            .parse()
            .map_err(|e: kgc_core::Error| CliError::Usage(e.to_string()))?;
        let client = BridgeScorer::connect(&endpoint)?;
        return Ok((
            Box::new(client),
            "bridge".into(),
            json!({ "source": "bridge", "endpoint": m.endpoint }),
        ));
    }
    if kind == ScorerKind::Bridge {
        return Err(CliError::Usage(
            "--scorer bridge requires --endpoint".into(),
        ));
    }
    if let Some(path) = &m.model {
        run.inputs.push(checksum(path)?);
        let ckpt = Checkpoint::load(path)?;
        check_dimensions(&ckpt.model, bundle)?;
        let name = ckpt.model.kind().to_string();
        let config = json!({ "source": "checkpoint", "checkpoint": path, "train_config": ckpt.config, "task": ckpt.task });
        return Ok((Box::new(ckpt.model), name, config));
    }
    let cfg = m
        .hyper
        .apply(TrainConfig::defaults(kind, task), Some(run.seed));
    let trained = scorers::train(kind, bundle, task, &cfg)?;
    let config = json!({
        "source": "trained",
        "train_config": cfg,
        "initial_loss": trained.initial_loss,
        "final_loss": trained.epoch_losses.last(),
    });
    Ok((Box::new(trained.model), kind.to_string(), config))
}

fn eval_options(run: &Run<'_>, a: &EvalArgs) -> EvalOptions {
    let m = &a.metrics;
    EvalOptions {
        hits: m.hits.clone(),
        tie: m.tie.into(),
        seed: run.seed,
        cardinality_threshold: m.cardinality_threshold,
        extremes_k: m.top_k,
        min_support: m.min_support,
        threshold_mode: m.threshold.into(),
    }
}

fn finish(
    report: &mut EvalReport,
    name: String,
    config: serde_json::Value,
    a: &EvalArgs,
) -> Result<(), CliError> {
    report.scorer = name;
    report.config = json!({ "model": config, "metrics": a.metrics });
    report
        .check_invariants()
        .map_err(|e| CliError::Runtime(format!("report failed its invariants: {e}")))
}

fn eval(run: &mut Run<'_>, a: &EvalArgs, task: Task) -> Result<(), CliError> {
    if a.metrics.hits.is_empty() || a.metrics.hits.contains(&0) {
        return Err(CliError::Usage("--hits takes positive cut-offs".into()));
    }
    let bundle = run.load_data(&a.data)?;
    let (scorer, name, config) = scorer(run, &a.model, &bundle, task)?;
    let opts = eval_options(run, a);
    let mut report = match task {
        Task::Tc => evaluate_triple_classification(scorer.as_ref(), &bundle, &opts)?,
        Task::Lp => evaluate_link_prediction(scorer.as_ref(), &bundle, &opts)?.0,
        Task::Rp => evaluate_relation_prediction(scorer.as_ref(), &bundle, &opts)?.0,
    };
    finish(&mut report, name, config, a)?;
    run.write_json("report.json", &report)?;
    if task != Task::Tc {
        run.write_table(
            "tables/per_relation.csv",
            "relation",
            &tables::relation_rows(&report),
        )?;
        run.write_table(
            "tables/per_cardinality.csv",
            "category",
            &tables::cardinality_rows(&report.per_cardinality),
        )?;
    }
    Ok(())
}

fn ablate(run: &mut Run<'_>, a: &AblateArgs) -> Result<(), CliError> {
    let e = &a.eval;
    let bundle = run.load_data(&e.data)?;
    let (scorer, name, config) = scorer(run, &e.model, &bundle, Task::Lp)?;
    let opts = eval_options(run, e);
    let (mut report, _) = evaluate_link_prediction(scorer.as_ref(), &bundle, &opts)?;
    report.task = "ablate-cardinality".into();
    finish(&mut report, name, config, e)?;
    run.write_json("report.json", &report)?;
    run.write_table(
        "tables/cardinality.csv",
        "category",
        &tables::cardinality_rows(&report.per_cardinality),
    )
}

#[derive(Serialize)]
struct ExportLine<'a> {
    label: u8,
    head: &'a str,
    relation: &'a str,
    tail: &'a str,
    item: ScoreItem,
}

fn export(run: &mut Run<'_>, a: &ExportArgs) -> Result<(), CliError> {
    if a.negatives == 0 {
        return Err(CliError::Usage("--negatives must be positive".into()));
    }
    let bundle = run.load_data(&a.data)?;
    for p in bundle.write(run.path("dataset"))? {
        let rel = p.strip_prefix(&run.cli.out).unwrap_or(&p).to_owned();
        run.outputs.push(rel);
    }
    let kg = &bundle.graph;
    let corrupter = Corrupter::for_graph(kg);
    for (k, (name, split)) in [
        ("train", &bundle.train),
        ("dev", &bundle.dev),
        ("test", &bundle.test),
    ]
    .into_iter()
    .enumerate()
    {
        let mut rng = shard_rng(run.seed, k as u64);
        let labeled = corrupter.negative_batch(split, a.negatives, &mut rng)?;
        let mut body = Vec::new();
        for l in &labeled {
            let (head, relation, tail) = kg.raw(&l.triple);
            let line = ExportLine {
                label: l.label,
                head,
                relation,
                tail,
                item: ScoreItem::for_triple(kg, &l.triple),
            };
            serde_json::to_writer(&mut body, &line).map_err(kgc_core::Error::from)?;
            body.write_all(b"\n").expect("in-memory write");
        }
        run.write_bytes(&format!("items/{name}.ndjson"), &body)?;
    }
    run.write_json("report.json", &json!({ "exported": run.outputs }))
}
