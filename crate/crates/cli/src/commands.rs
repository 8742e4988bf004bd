use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{json, Value};

use seqnas_core::benchdata::{
    complete_specs, import_csv, import_jsonl, partition_counts, read_bench_file, record_histogram,
    to_surrogate_dataset, write_bench, BenchError, BenchRecord, Method,
};
use seqnas_core::engine::{
    report_top3_curve, EngineError, RunConfig, RunMode, Runner, SearchConfig, SearchState, StateStore, CONFIG_FILE,
};
use seqnas_core::evaluators::{serve_stub, EvalError, EvaluatorConfig};
use seqnas_core::search_space::{canonical_id, PresetError, SpecError};
use seqnas_core::surrogate::PredictorConfig;
use seqnas_core::synthbench::{synthesize, SynthPlan};
use seqnas_core::{ArchitectureSpec, Exec, FeatureLayout, FeatureVector, SearchSpaceConfig};

use crate::args::{BenchCommand, Cli, Command, Curve, GlobalArgs, ImportFormat, SynthCommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Spec(#[from] SpecError),
}

impl CliError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Input(_) => "input",
            CliError::Engine(EngineError::Integrity { .. }) => "integrity",
            CliError::Engine(EngineError::Locked(_)) => "locked",
            CliError::Engine(EngineError::Config(_)) => "config",
            CliError::Engine(_) => "engine",
            CliError::Bench(_) => "bench",
            CliError::Eval(_) => "evaluator",
            CliError::Spec(_) => "spec",
        }
    }
}

impl From<PresetError> for CliError {
    fn from(e: PresetError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<seqnas_core::search_space::ConfigError> for CliError {
    fn from(e: seqnas_core::search_space::ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_owned(), source }
}

/// Contents of `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    preset: Option<String>,
    space: Option<SearchSpaceConfig>,
    search: SearchConfig,
    predictor: PredictorConfig,
    evaluator: Option<EvaluatorConfig>,
}

struct Resolved {
    space: SearchSpaceConfig,
    search: SearchConfig,
    predictor: PredictorConfig,
    evaluator: EvaluatorConfig,
}

fn resolve(global: &GlobalArgs, preset: Option<&str>) -> Result<Resolved, CliError> {
    let file: FileConfig = match &global.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    if file.preset.is_some() && file.space.is_some() {
        return Err(CliError::Config("config sets both `preset` and `space`".into()));
    }
    let space = match (preset, &file.preset, file.space) {
        (Some(name), _, _) => SearchSpaceConfig::preset(name)?,
        (None, Some(name), _) => SearchSpaceConfig::preset(name)?,
        (None, None, Some(space)) => space,
        (None, None, None) => SearchSpaceConfig::default(),
    };
    space.validate()?;
    let mut search = file.search;
    if let Some(seed) = global.seed {
        search.seed = seed;
    }
    let evaluator = file.evaluator.unwrap_or(EvaluatorConfig::Synthetic {
        bench_seed: search.seed,
        noise_std: 0.0,
        prediction_rows: 32,
    });
    Ok(Resolved { space, search, predictor: file.predictor, evaluator })
}

/// Where command output goes.
struct Output {
    path: Option<PathBuf>,
    buf: Vec<u8>,
}

impl Output {
    fn new(path: Option<&Path>) -> Self {
        Self { path: path.map(Path::to_owned), buf: Vec::new() }
    }

    fn line(&mut self, s: impl AsRef<str>) {
        self.buf.extend_from_slice(s.as_ref().as_bytes());
        self.buf.push(b'\n');
    }

    fn finish(self) -> Result<(), CliError> {
        match &self.path {
            Some(path) => fs::write(path, &self.buf).map_err(io_err(path)),
            None => io::stdout().write_all(&self.buf).map_err(io_err(Path::new("<stdout>"))),
        }
    }
}

fn read_lines(input: &str) -> Result<Vec<String>, CliError> {
    let text = if input == "-" {
        let mut s = String::new();
        io::stdin().read_to_string(&mut s).map_err(io_err(Path::new("<stdin>")))?;
        s
    } else {
        fs::read_to_string(input).map_err(io_err(Path::new(input)))?
    };
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_owned).collect())
}

/// Accepts a bare spec or an object carrying it under `spec`.
fn parse_spec_line(line: &str, n: usize) -> Result<ArchitectureSpec, CliError> {
    let bad = |e: serde_json::Error| CliError::Input(format!("line {n}: {e}"));
    let v: Value = serde_json::from_str(line).map_err(bad)?;
    let v = match v.get("spec") {
        Some(inner) => inner.clone(),
        None => v,
    };
    serde_json::from_value(v).map_err(bad)
}

fn spec_line(space: &SearchSpaceConfig, spec: &ArchitectureSpec) -> Result<String, CliError> {
    let id = canonical_id(spec, space)?;
    Ok(json!({ "arch_id": id, "spec": spec.canonicalized() }).to_string())
}

fn require_state_dir(global: &GlobalArgs) -> Result<&Path, CliError> {
    global
        .state_dir
        .as_deref()
        .ok_or_else(|| CliError::Config("no state directory (use --state-dir or SEQNAS_STATE_DIR)".into()))
}

fn summary(state: &SearchState) -> Value {
    let best = state.best().map(|b| json!({ "arch_id": b.arch_id, "score": b.score, "spec": b.spec }));
    json!({
        "records": state.records.len(),
        "iterations": state.iteration,
        "complete": state.complete,
        "best": best,
    })
}

fn plan(command: &str, run: &RunConfig, state_dir: Option<&Path>) -> Result<Value, CliError> {
    Ok(json!({
        "command": command,
        "dry_run": true,
        "records_planned": run.target_records(),
        "cardinality": run.space.cardinality()?.to_string(),
        "space_hash": run.space.hash(),
        "state_dir": state_dir,
        "config": run,
    }))
}

fn run_new(global: &GlobalArgs, run: RunConfig, command: &str) -> Result<(), CliError> {
    let mut out = Output::new(global.out.as_deref());
    run.validate()?;
    if global.dry_run {
        out.line(plan(command, &run, global.state_dir.as_deref())?.to_string());
        return out.finish();
    }
    let evaluator_cfg = run.evaluator.clone().expect("resolved evaluator");
    let evaluator = evaluator_cfg.build(&run.space, run.search.parallelism)?;
    let state = Runner::new(evaluator.as_ref()).start(run, global.state_dir.as_deref())?;
    out.line(summary(&state).to_string());
    out.finish()
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    match cli.command {
        Command::Sample { count, mode, preset } => {
            let r = resolve(g, preset.as_deref())?;
            let mode = mode.unwrap_or(r.search.sampling_mode);
            let mut rng = ChaCha8Rng::seed_from_u64(r.search.seed);
            let mut out = Output::new(g.out.as_deref());
            for _ in 0..count {
                let spec = r.space.sample(&mut rng, mode)?;
                out.line(spec_line(&r.space, &spec)?);
            }
            out.finish()
        }
        Command::Encode { input, preset } => {
            let r = resolve(g, preset.as_deref())?;
            let layout = FeatureLayout::new(&r.space)?;
            let mut out = Output::new(g.out.as_deref());
            for (i, line) in read_lines(&input)?.iter().enumerate() {
                let spec = parse_spec_line(line, i + 1)?;
                let v = layout.encode(&spec).map_err(|e| CliError::Input(format!("line {}: {e}", i + 1)))?;
                out.line(v.to_string());
            }
            out.finish()
        }
        Command::Decode { vectors, preset } => {
            let r = resolve(g, preset.as_deref())?;
            let layout = FeatureLayout::new(&r.space)?;
            let vectors = if vectors.is_empty() { read_lines("-")? } else { vectors };
            let mut out = Output::new(g.out.as_deref());
            for (i, text) in vectors.iter().enumerate() {
                let v: FeatureVector =
                    text.trim().parse().map_err(|e| CliError::Input(format!("vector {}: {e}", i + 1)))?;
                let spec = layout.decode(&v).map_err(|e| CliError::Input(format!("vector {}: {e}", i + 1)))?;
                out.line(spec_line(&r.space, &spec)?);
            }
            out.finish()
        }
        Command::Cardinality { preset } => {
            let r = resolve(g, preset.as_deref())?;
            let mut out = Output::new(g.out.as_deref());
            out.line(r.space.cardinality()?.to_string());
            out.finish()
        }
        Command::Validate { specs, preset } => {
            let r = resolve(g, preset.as_deref())?;
            let run = RunConfig {
                search: r.search,
                space: r.space,
                predictor: r.predictor,
                mode: RunMode::Search,
                evaluator: Some(r.evaluator),
            };
            run.validate()?;
            let mut checked = 0usize;
            if let Some(path) = specs {
                let mut problems = Vec::new();
                for (i, line) in read_lines(&path)?.iter().enumerate() {
                    match parse_spec_line(line, i + 1).and_then(|s| Ok(run.space.validate_spec(&s)?)) {
                        Ok(()) => checked += 1,
                        Err(e) => problems.push(format!("line {}: {e}", i + 1)),
                    }
                }
                if !problems.is_empty() {
                    return Err(CliError::Input(problems.join(" | ")));
                }
            }
            let mut out = Output::new(g.out.as_deref());
            out.line(json!({ "valid": true, "specs_checked": checked, "space_hash": run.space.hash() }).to_string());
            out.finish()
        }
        Command::Search => {
            let r = resolve(g, None)?;
            let run = RunConfig {
                search: r.search,
                space: r.space,
                predictor: r.predictor,
                mode: RunMode::Search,
                evaluator: Some(r.evaluator),
            };
            run_new(g, run, "search")
        }
        Command::RandomSearch { budget, kd } => {
            let r = resolve(g, None)?;
            let run = RunConfig {
                search: r.search,
                space: r.space,
                predictor: r.predictor,
                mode: RunMode::Random { budget, kd_enabled: kd },
                evaluator: Some(r.evaluator),
            };
            run_new(g, run, "random-search")
        }
        Command::Resume => {
            let dir = require_state_dir(g)?;
            let path = dir.join(CONFIG_FILE);
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let stored: RunConfig = serde_json::from_str(&text)
                .map_err(|e| EngineError::Integrity { files: vec![CONFIG_FILE.into()], reason: e.to_string() })?;
            let mut out = Output::new(g.out.as_deref());
            if g.dry_run {
                let snapshot = StateStore::snapshot(dir)?;
                let mut p = plan("resume", &stored, Some(dir))?;
                p["records_done"] = json!(snapshot.records.len());
                p["complete"] = json!(snapshot.complete);
                out.line(p.to_string());
                return out.finish();
            }
            let evaluator_cfg = match (&stored.evaluator, &g.config) {
                (Some(e), _) => e.clone(),
                (None, Some(_)) => resolve(g, None)?.evaluator,
                (None, None) => EvaluatorConfig::Synthetic {
                    bench_seed: stored.search.seed,
                    noise_std: 0.0,
                    prediction_rows: 32,
                },
            };
            let evaluator = evaluator_cfg.build(&stored.space, stored.search.parallelism)?;
            let state = Runner::new(evaluator.as_ref()).resume(dir)?;
            out.line(summary(&state).to_string());
            out.finish()
        }
        Command::Report { curve, k } => {
            let dir = require_state_dir(g)?;
            let state = StateStore::snapshot(dir)?;
            let k = match curve {
                Curve::Top3 => k,
                Curve::Best => 1,
            };
            let series = report_top3_curve(&state.records, k).map_err(|e| CliError::Input(e.to_string()))?;
            let mut out = Output::new(g.out.as_deref());
            out.line("t,value");
            for (t, v) in series {
                out.line(format!("{t},{v}"));
            }
            out.finish()
        }
        Command::Bench(cmd) => bench(g, cmd),
        Command::Synthbench(SynthCommand::Make { plan, noise_std }) => {
            let r = resolve(g, None)?;
            let mut p: SynthPlan = match plan {
                Some(path) => {
                    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
                    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
                }
                None => SynthPlan::released_layout(),
            };
            if let Some(seed) = g.seed {
                p.seed = seed;
            }
            if let Some(n) = noise_std {
                p.noise_std = n;
            }
            let mut out = Output::new(g.out.as_deref());
            if g.dry_run {
                out.line(json!({ "command": "synthbench make", "dry_run": true, "records_planned": p.total(), "plan": p }).to_string());
                return out.finish();
            }
            let records = synthesize(&r.space, &p, Exec::Parallel)?;
            let layout = FeatureLayout::new(&r.space)?;
            write_bench(&mut out.buf, &records, &layout)?;
            out.finish()
        }
        Command::StubTrainer { score } => {
            let r = resolve(g, None)?;
            let stdin = io::stdin();
            serve_stub(stdin.lock(), io::stdout().lock(), &r.space.hash(), score)
                .map_err(io_err(Path::new("<stdio>")))
        }
    }
}

fn load_filtered(
    input: &Path,
    layout: &FeatureLayout,
    dataset: Option<&str>,
    method: Option<&str>,
) -> Result<Vec<BenchRecord>, CliError> {
    let file = read_bench_file(input)?;
    file.check_layout(layout)?;
    let method: Option<Method> = method.map(str::parse).transpose().map_err(CliError::Input)?;
    Ok(file
        .records
        .into_iter()
        .filter(|r| dataset.is_none_or(|d| r.dataset == d) && method.is_none_or(|m| r.method == m))
        .collect())
}

#[derive(serde::Serialize)]
struct CsvRow<'a> {
    dataset: &'a str,
    method: String,
    avec: String,
    best_score: String,
    metric_name: &'a str,
    epochs: Option<u32>,
}

fn bench(g: &GlobalArgs, cmd: BenchCommand) -> Result<(), CliError> {
    let r = resolve(g, None)?;
    let layout = FeatureLayout::new(&r.space)?;
    let mut out = Output::new(g.out.as_deref());
    match cmd {
        BenchCommand::Import { input, format } => {
            let file = fs::File::open(&input).map_err(io_err(&input))?;
            let mut records = match format {
                ImportFormat::Csv => import_csv(file)?,
                ImportFormat::Jsonl => import_jsonl(file)?,
            };
            complete_specs(&mut records, &layout)?;
            write_bench(&mut out.buf, &records, &layout)?;
        }
        BenchCommand::Export { input, format } => {
            let records = load_filtered(&input, &layout, None, None)?;
            match format {
                ImportFormat::Jsonl => {
                    for rec in &records {
                        out.line(serde_json::to_string(rec).expect("record serializes"));
                    }
                }
                ImportFormat::Csv => {
                    let mut w = csv::Writer::from_writer(Vec::new());
                    for rec in &records {
                        w.serialize(CsvRow {
                            dataset: &rec.dataset,
                            method: rec.method.to_string(),
                            avec: rec.feature_vector().to_string(),
                            // Shortest form that parses back to the same bits.
                            best_score: format!("{:?}", rec.best_score),
                            metric_name: &rec.metric_name,
                            epochs: rec.epochs,
                        })
                        .map_err(|e| CliError::Input(e.to_string()))?;
                    }
                    if records.is_empty() {
                        out.line("dataset,method,avec,best_score,metric_name,epochs");
                    }
                    out.buf.extend(w.into_inner().map_err(|e| CliError::Input(e.to_string()))?);
                }
            }
        }
        BenchCommand::Histogram { input, bins, dataset, method } => {
            let records = load_filtered(&input, &layout, dataset.as_deref(), method.as_deref())?;
            out.line("lower_edge,count");
            for (edge, count) in record_histogram(&records, bins)? {
                out.line(format!("{edge},{count}"));
            }
        }
        BenchCommand::ToSurrogate { input, dataset, method } => {
            let records = load_filtered(&input, &layout, dataset.as_deref(), method.as_deref())?;
            let (x, y) = to_surrogate_dataset(&records, layout.fingerprint())?;
            let header: Vec<String> = (0..layout.len()).map(|i| format!("f{i}")).chain(["score".into()]).collect();
            out.line(header.join(","));
            for (i, score) in y.iter().enumerate() {
                let bits: Vec<String> = x.row(i).iter().map(u8::to_string).collect();
                out.line(format!("{},{score:?}", bits.join(",")));
            }
        }
        BenchCommand::Counts { input } => {
            let records = load_filtered(&input, &layout, None, None)?;
            out.line("dataset,method,count");
            for ((dataset, method), count) in partition_counts(&records) {
                out.line(format!("{dataset},{method},{count}"));
            }
        }
    }
    out.finish()
}
