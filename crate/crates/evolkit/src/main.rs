use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use evolkit::config::{Config, ConfigError, GatewayMode, SelectionMode};
use evolkit::fsutil::write_atomic;
use evolkit::harness::{self, EvolutionSettings, HarnessError};
use evolkit::journal::{self, JournalWriter, Recorder};
use evolkit::live::LiveModel;
use evolkit::manifest::{self, ManifestError};
use evolkit::report::{self, EvolutionReport};
use evolkit::store::{KnowledgeStore, StoreError};
use evolkit_core::{
    aggregate, diff_plans, evolve, parse_plan, render_action_list, render_critique, render_plan,
    retrace_trajectory, run_stats, select_completion, select_random, ChatModel, CritiqueError,
    GatewayError, KnowledgeRecord, RetraceError, RunOutcome, SelectionCandidate, SelectionError,
    StdConvention, TaskId, TaskSpec, Trajectory,
};

mod exit {
    pub const OTHER: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const INPUT: u8 = 3;
    pub const PARSE: u8 = 4;
    pub const GATEWAY: u8 = 5;
    pub const STORE: u8 = 6;
    pub const ARITY: u8 = 7;
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl Display) -> Failure {
    Failure {
        code,
        message: message.to_string(),
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => fail(exit::INPUT, e),
            _ => fail(exit::USAGE, e),
        }
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        fail(exit::STORE, e)
    }
}

impl From<ManifestError> for Failure {
    fn from(e: ManifestError) -> Self {
        match e {
            ManifestError::Io { .. }
            | ManifestError::Screenshot { .. }
            | ManifestError::EmptyScreenshot(_)
            | ManifestError::Blob(_) => fail(exit::INPUT, e),
            _ => fail(exit::PARSE, e),
        }
    }
}

impl From<GatewayError> for Failure {
    fn from(e: GatewayError) -> Self {
        fail(exit::GATEWAY, e)
    }
}

impl From<RetraceError> for Failure {
    fn from(e: RetraceError) -> Self {
        match e {
            RetraceError::Gateway(g) => g.into(),
            RetraceError::MissingObservation { .. } => fail(exit::INPUT, e),
            RetraceError::Malformed(_) => fail(exit::PARSE, e),
        }
    }
}

impl From<CritiqueError> for Failure {
    fn from(e: CritiqueError) -> Self {
        match e {
            CritiqueError::Gateway(g) => g.into(),
            CritiqueError::TaskMismatch { .. } | CritiqueError::EmptyInput(_) => {
                fail(exit::USAGE, e)
            }
            CritiqueError::Rejected { ref violations } => {
                let list: Vec<String> = violations.iter().map(|v| format!("  {v}")).collect();
                fail(exit::PARSE, format!("{e}\n{}", list.join("\n")))
            }
            CritiqueError::Malformed { .. } => fail(exit::PARSE, e),
        }
    }
}

impl From<SelectionError> for Failure {
    fn from(e: SelectionError) -> Self {
        match e {
            SelectionError::Gateway(g) => g.into(),
            SelectionError::WrongArity(_) | SelectionError::EmptyCandidates => fail(exit::ARITY, e),
            SelectionError::MalformedSelection(_) => fail(exit::PARSE, e),
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::InvalidWorkers => fail(exit::USAGE, e),
            HarnessError::SelectionArity(_) => fail(exit::ARITY, e),
            HarnessError::MissingKnowledge(_) | HarnessError::Store(_) => fail(exit::STORE, e),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

#[derive(Parser)]
#[command(
    name = "evolkit",
    version,
    about = "Evolve task knowledge for computer-use agents"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Knowledge store directory.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    repeats: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    selection: Option<SelectionArg>,
    /// Standard-deviation convention for run statistics.
    #[arg(long, global = true, value_enum)]
    std: Option<StdArg>,
    /// Gateway mode.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Replay fixture (repeatable). Replaces fixtures from the config.
    #[arg(long = "fixture", global = true)]
    fixtures: Vec<PathBuf>,
    /// Fixture journal written in record mode.
    #[arg(long, global = true)]
    record_to: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionArg {
    Random,
    Completion,
}

#[derive(Clone, Copy, ValueEnum)]
enum StdArg {
    Sample,
    Population,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Live,
    Replay,
    Record,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a trajectory into an objective action list.
    Retrace {
        manifest: PathBuf,
        /// Also write the action list as JSON.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Critique a trajectory against stored knowledge and store the refined plan.
    Evolve {
        task_id: String,
        #[arg(long)]
        trajectory: PathBuf,
        /// Write the accepted critique report here.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run a benchmark, optionally with one evolution cycle.
    Run {
        /// JSON array of task specs.
        #[arg(long)]
        tasks: PathBuf,
        /// Select, retrace, critique and re-run.
        #[arg(long)]
        evolve: bool,
        /// Write the JSON report here instead of stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Also write a markdown summary.
        #[arg(long)]
        markdown: Option<PathBuf>,
    },
    /// Min / max / std / avg of per-run success rates.
    Stats {
        /// Whitespace-separated or JSON array of rates, or an evolution report.
        file: PathBuf,
    },
    /// Pick one of several trajectories for evolution.
    Select {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long)]
        instruction: String,
        /// Current knowledge plan for the task.
        #[arg(long)]
        plan: PathBuf,
    },
    /// Inspect and maintain the knowledge store.
    #[command(subcommand)]
    Store(StoreCommand),
}

#[derive(Subcommand)]
enum StoreCommand {
    /// Version history of one task.
    History { task_id: String },
    /// Freeze a snapshot of the latest versions and print its id.
    Freeze,
    /// Layer records from another store on top of this one.
    Import {
        source: PathBuf,
        #[arg(long)]
        producer: Option<String>,
    },
    /// Add initial knowledge for a task.
    Ingest {
        task_id: String,
        #[arg(long)]
        instruction: String,
        /// Plan document in the five-field step format.
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, default_value = "web-search")]
        producer: String,
    },
    /// Latest version of every task as JSON.
    Export {
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

fn load_config(g: &Global) -> CliResult<Config> {
    let mut cfg = match &g.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = &g.store {
        cfg.store = s.clone();
    }
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    if let Some(r) = g.repeats {
        cfg.repeats = r;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(s) = g.selection {
        cfg.selection = match s {
            SelectionArg::Random => SelectionMode::Random,
            SelectionArg::Completion => SelectionMode::Completion,
        };
    }
    if let Some(s) = g.std {
        cfg.std = match s {
            StdArg::Sample => StdConvention::Sample,
            StdArg::Population => StdConvention::Population,
        };
    }
    if let Some(m) = g.mode {
        cfg.gateway.mode = match m {
            ModeArg::Live => GatewayMode::Live,
            ModeArg::Replay => GatewayMode::Replay,
            ModeArg::Record => GatewayMode::Record,
        };
    }
    if !g.fixtures.is_empty() {
        cfg.gateway.fixtures = g.fixtures.clone();
    }
    if let Some(r) = &g.record_to {
        cfg.gateway.record_to = Some(r.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gateway(cfg: &Config) -> CliResult<Box<dyn ChatModel>> {
    let g = &cfg.gateway;
    match g.mode {
        GatewayMode::Replay => {
            if g.fixtures.is_empty() {
                return Err(fail(
                    exit::USAGE,
                    "replay mode needs at least one --fixture",
                ));
            }
            let model = journal::load_replay_all(&g.fixtures).map_err(|e| fail(exit::INPUT, e))?;
            Ok(Box::new(model))
        }
        GatewayMode::Live => Ok(Box::new(LiveModel::new(g.live.clone()))),
        GatewayMode::Record => {
            let path = g.record_to.as_deref().expect("validated");
            let writer = JournalWriter::open(path).map_err(|e| fail(exit::INPUT, e))?;
            Ok(Box::new(Recorder::new(
                LiveModel::new(g.live.clone()),
                writer,
            )))
        }
    }
}

fn open_store(cfg: &Config) -> CliResult<KnowledgeStore> {
    Ok(KnowledgeStore::open(&cfg.store)?)
}

fn read_file(path: &Path) -> CliResult<String> {
    fs::read_to_string(path)
        .map_err(|e| fail(exit::INPUT, format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> CliResult {
    write_atomic(path, text.as_bytes())
        .map_err(|e| fail(exit::OTHER, format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn load_tasks(path: &Path, max_steps: usize) -> CliResult<Vec<TaskSpec>> {
    let mut tasks: Vec<TaskSpec> = serde_json::from_str(&read_file(path)?)
        .map_err(|e| fail(exit::PARSE, format!("{}: {e}", path.display())))?;
    for t in &mut tasks {
        if t.group.trim().is_empty() {
            return Err(fail(
                exit::PARSE,
                format!("task {} has no group", t.task_id),
            ));
        }
        t.max_steps = t.max_steps.min(max_steps);
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some(dup) = tasks.iter().find(|t| !seen.insert(&t.task_id)) {
        return Err(fail(
            exit::PARSE,
            format!("duplicate task id {}", dup.task_id),
        ));
    }
    Ok(tasks)
}

fn load_trajectory(path: &Path, cfg: &Config) -> CliResult<Trajectory> {
    Ok(manifest::load_trajectory(path, cfg.max_steps)?)
}

fn cmd_retrace(cfg: &Config, manifest: &Path, output: Option<&Path>) -> CliResult {
    let traj = load_trajectory(manifest, cfg)?;
    let model = gateway(cfg)?;
    let seq = retrace_trajectory(&traj, &*model, &cfg.gateway.stages().retrace)?;
    println!("{}", render_action_list(&seq));
    let flagged = seq.indeterminate_count();
    if flagged > 0 {
        eprintln!("{flagged} of {} steps are indeterminate", seq.entries.len());
    }
    if let Some(out) = output {
        write_file(out, &to_json(&seq))?;
    }
    Ok(())
}

fn cmd_evolve(cfg: &Config, task: &str, trajectory: &Path, output: Option<&Path>) -> CliResult {
    let store = open_store(cfg)?;
    let task_id = TaskId::new(task);
    let record = store.get_latest(&task_id)?;
    let traj = load_trajectory(trajectory, cfg)?;
    if traj.task_id != task_id {
        return Err(fail(
            exit::USAGE,
            format!("trajectory belongs to task {}, not {task_id}", traj.task_id),
        ));
    }
    let model = gateway(cfg)?;
    let stages = cfg.gateway.stages();
    let seq = retrace_trajectory(&traj, &*model, &stages.retrace)?;
    let (next, report) = evolve(
        &record,
        &seq,
        &traj.producer_model,
        &*model,
        &stages.critique,
    )?;
    let version = store.put(&next)?;
    println!("{task_id}: v{} -> v{version}", record.version);
    for change in diff_plans(&record.plan, &next.plan) {
        println!(
            "  {}",
            serde_json::to_string(&change).expect("serializable")
        );
    }
    if let Some(out) = output {
        write_file(out, &render_critique(&report))?;
    }
    Ok(())
}

fn cmd_run(
    cfg: &Config,
    tasks: &Path,
    evolve: bool,
    output: Option<&Path>,
    markdown: Option<&Path>,
) -> CliResult {
    let tasks = load_tasks(tasks, cfg.max_steps)?;
    let store = open_store(cfg)?;
    let emit = |json: String, md: String| -> CliResult {
        match output {
            Some(p) => write_file(p, &json)?,
            None => print!("{json}"),
        }
        if let Some(p) = markdown {
            write_file(p, &md)?;
        }
        Ok(())
    };
    if !evolve {
        let snap = store.freeze_snapshot()?;
        let plans = harness::pinned_plans(&store, &snap, &tasks)?;
        let records =
            harness::run_benchmark(&tasks, cfg.repeats, &cfg.executor, cfg.workers, &plans)?;
        let summary = harness::summarize(&records, &tasks, cfg.std, &snap.snapshot_id);
        let md = format!(
            "# Benchmark\n\nStd convention: {}.\n\n{}\n{}",
            cfg.std.as_str(),
            report::stats_table(&[("Run", summary.aggregate.overall)]),
            report::group_table(&[("Run", &summary.aggregate)]),
        );
        eprint!("{md}");
        return emit(to_json(&summary), md);
    }
    let model = gateway(cfg)?;
    let settings = EvolutionSettings {
        repeats: cfg.repeats,
        workers: cfg.workers,
        selection: cfg.selection,
        seed: cfg.seed,
        std: cfg.std,
        stages: cfg.gateway.stages(),
    };
    let rep = harness::evolution_loop(&tasks, &cfg.executor, &*model, &store, &settings)?;
    for (task, err) in &rep.failures {
        eprintln!("warning: {task}: {err}");
    }
    let md = rep.to_markdown();
    eprint!("{md}");
    emit(rep.to_json(), md)
}

fn parse_rates(text: &str) -> Option<Vec<f64>> {
    if let Ok(v) = serde_json::from_str::<Vec<f64>>(text) {
        return Some(v);
    }
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().ok())
        .collect()
}

fn cmd_stats(cfg: &Config, file: &Path) -> CliResult {
    let text = read_file(file)?;
    println!("std convention: {}", cfg.std.as_str());
    if let Ok(rep) = serde_json::from_str::<EvolutionReport>(&text) {
        let groups: BTreeMap<TaskId, String> = rep
            .tasks
            .iter()
            .map(|t| (t.task_id.clone(), t.group.clone()))
            .collect();
        let agg = |o: &[RunOutcome]| aggregate(o, &groups, cfg.std);
        let (a1, a2) = (agg(&rep.phase1.outcomes), agg(&rep.phase2.outcomes));
        print!(
            "{}\n{}",
            report::stats_table(&[
                ("Before evolution", a1.overall),
                ("After evolution", a2.overall)
            ]),
            report::group_table(&[("Before evolution", &a1), ("After evolution", &a2)]),
        );
        return Ok(());
    }
    let rates = parse_rates(&text).ok_or_else(|| {
        fail(
            exit::PARSE,
            format!(
                "{}: expected numbers or an evolution report",
                file.display()
            ),
        )
    })?;
    let s = run_stats(&rates, cfg.std).ok_or_else(|| fail(exit::PARSE, "no values"))?;
    println!(
        "n={} min={:.2} max={:.2} std={:.2} avg={:.2}",
        rates.len(),
        s.min,
        s.max,
        s.std,
        s.avg
    );
    Ok(())
}

fn cmd_select(cfg: &Config, manifests: &[PathBuf], instruction: &str, plan: &Path) -> CliResult {
    let plan = parse_plan(&read_file(plan)?)
        .map_err(|e| fail(exit::PARSE, format!("{}: {e}", plan.display())))?;
    let trajs = manifests
        .iter()
        .map(|m| load_trajectory(m, cfg))
        .collect::<CliResult<Vec<_>>>()?;
    let seed = harness::selection_seed(cfg.seed, &trajs[0].task_id);
    let (index, method) = match cfg.selection {
        SelectionMode::Random => (select_random(trajs.len(), seed)? + 1, "random"),
        SelectionMode::Completion => {
            if trajs.len() != 3 {
                return Err(SelectionError::WrongArity(trajs.len()).into());
            }
            let model = gateway(cfg)?;
            let stages = cfg.gateway.stages();
            let mut candidates = Vec::new();
            for (i, t) in trajs.iter().enumerate() {
                let seq = retrace_trajectory(t, &*model, &stages.retrace)?;
                candidates.push(SelectionCandidate {
                    index: i + 1,
                    action_list: render_action_list(&seq),
                    plan: plan.clone(),
                });
            }
            let s = select_completion(instruction, &candidates, &*model, &stages.selection, seed)?;
            let m = match s.method {
                evolkit_core::SelectionMethod::Completion => "completion",
                evolkit_core::SelectionMethod::RandomFallback => "random-fallback",
                evolkit_core::SelectionMethod::Random => "random",
            };
            (s.index, m)
        }
    };
    println!("{index} {} ({method})", manifests[index - 1].display());
    Ok(())
}

fn cmd_store(cfg: &Config, cmd: &StoreCommand) -> CliResult {
    let store = open_store(cfg)?;
    match cmd {
        StoreCommand::History { task_id } => {
            for s in store.stored_history(&TaskId::new(task_id.as_str()))? {
                let r = &s.record;
                println!(
                    "v{} {:?} producer={} parent={} hash={}",
                    r.version,
                    r.provenance,
                    r.producer_model,
                    r.parent_version.map_or("-".into(), |v| format!("v{v}")),
                    s.hash
                );
            }
        }
        StoreCommand::Freeze => {
            let snap = store.freeze_snapshot()?;
            println!("{} ({} tasks)", snap.snapshot_id, snap.records.len());
        }
        StoreCommand::Import { source, producer } => {
            let other = KnowledgeStore::open(source)?;
            let n = store.import_store(&other, producer.as_deref())?;
            println!("imported {n} record(s)");
        }
        StoreCommand::Ingest {
            task_id,
            instruction,
            plan,
            producer,
        } => {
            let text = read_file(plan)?;
            let plan = parse_plan(&text)
                .map_err(|e| fail(exit::PARSE, format!("{}: {e}", plan.display())))?;
            let rec = KnowledgeRecord::web_search(
                TaskId::new(task_id.as_str()),
                instruction.as_str(),
                plan,
                producer.as_str(),
            );
            let v = store.put(&rec)?;
            println!("{task_id}: v{v}");
            log::debug!("stored plan:\n{}", render_plan(&rec.plan));
        }
        StoreCommand::Export { output } => {
            let json = to_json(&store.export_latest()?);
            match output {
                Some(p) => write_file(p, &json)?,
                None => print!("{json}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { 0 });
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = load_config(&cli.global).and_then(|cfg| match &cli.command {
        Command::Retrace { manifest, output } => cmd_retrace(&cfg, manifest, output.as_deref()),
        Command::Evolve {
            task_id,
            trajectory,
            output,
        } => cmd_evolve(&cfg, task_id, trajectory, output.as_deref()),
        Command::Run {
            tasks,
            evolve,
            output,
            markdown,
        } => cmd_run(&cfg, tasks, *evolve, output.as_deref(), markdown.as_deref()),
        Command::Stats { file } => cmd_stats(&cfg, file),
        Command::Select {
            manifests,
            instruction,
            plan,
        } => cmd_select(&cfg, manifests, instruction, plan),
        Command::Store(cmd) => cmd_store(&cfg, cmd),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
