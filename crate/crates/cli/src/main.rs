//! `ci3p3`: decision tables, trial conduct, simulation and the HTTP service.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 state
//! file integrity error.

mod config;

use std::io::{self, BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use ci3p3_core::scenario::{category_histogram, classify_truth};
use ci3p3_core::simulator::{run_oc, SimConfig, Variant};
use ci3p3_core::view::stop_name;
use ci3p3_core::{
    BetaParams, DcCoord, DecisionTable, Design, DesignParams, DoseGrid, EquivalenceInterval, Error as CoreError, PathChoice,
    Recommendation, Trial,
};

use config::{load_scenarios, ConfigFile};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Integrity(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Integrity(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Integrity(m) => write!(f, "state file integrity error: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

/// Engine errors on user input are configuration errors; tampering is integrity.
fn engine(e: CoreError) -> CliError {
    match e {
        CoreError::Integrity(m) => CliError::Integrity(m),
        CoreError::Io(e) => CliError::Runtime(e.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "ci3p3", version, about = "Rule-based dose finding for two-agent combinations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the up-and-down decision table.
    Table(TableArgs),
    /// Create a new trial state file.
    Init(InitArgs),
    /// Show the next assignment, optionally recording a cohort first.
    Decide(DecideArgs),
    /// Select the MTDC from a trial state file.
    Finalize(FinalizeArgs),
    /// Run operating-characteristic simulations.
    Simulate(SimulateArgs),
    /// Export builtin scenarios with their true classification.
    Scenarios(ScenariosArgs),
    /// Conduct a trial interactively on the terminal.
    Conduct(ConductArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TableFormat {
    Text,
    Csv,
    Json,
}

#[derive(Args)]
struct RuleArgs {
    /// Target toxicity rate.
    #[arg(long = "pt", default_value_t = 0.3)]
    p_t: f64,
    #[arg(long, default_value_t = 0.05)]
    eps1: f64,
    #[arg(long, default_value_t = 0.05)]
    eps2: f64,
    /// Exclusion threshold on Pr(p > p_T | data).
    #[arg(long, default_value_t = 0.95)]
    xi: f64,
}

impl RuleArgs {
    fn interval(&self) -> CliResult<EquivalenceInterval> {
        EquivalenceInterval::new(self.p_t, self.eps1, self.eps2).map_err(engine)
    }
}

#[derive(Args)]
struct TableArgs {
    #[command(flatten)]
    rules: RuleArgs,
    /// Largest number of patients tabulated.
    #[arg(long = "nmax", default_value_t = 12)]
    n_max: u32,
    #[arg(long, value_enum, default_value = "text")]
    format: TableFormat,
    /// Write to a file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InitArgs {
    /// State file to create.
    #[arg(long)]
    state: PathBuf,
    /// Take grid and design parameters from a configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    rows: u32,
    #[arg(long, default_value_t = 3)]
    cols: u32,
    #[command(flatten)]
    rules: RuleArgs,
    #[arg(long, default_value_t = 3)]
    cohort_size: u32,
    #[arg(long, default_value_t = 96)]
    max_n: u32,
    /// Escalation path: P1, P2 or P3.
    #[arg(long, default_value = "P3")]
    ep: String,
    #[arg(long)]
    skip_stage1: bool,
    #[arg(long)]
    modified_rule: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overwrite an existing state file.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct DecideArgs {
    #[arg(long)]
    state: PathBuf,
    /// Combination the cohort was treated at, e.g. `2,1` or `d21`.
    #[arg(long, requires = "dlt")]
    dc: Option<String>,
    /// DLTs observed in the cohort.
    #[arg(long)]
    dlt: Option<u32>,
    /// Allow a cohort away from the current recommendation.
    #[arg(long = "override")]
    allow_override: bool,
    /// Show the outcome without saving it.
    #[arg(long)]
    dry_run: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct FinalizeArgs {
    #[arg(long)]
    state: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Configuration file; without one the defaults and `--suite` are used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Builtin suite or scenario when no configuration lists scenarios.
    #[arg(long, default_value = "study2")]
    suite: String,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    reps: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    workers: Option<usize>,
    /// Directory for oc.csv, oc.json and oc_long.csv.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ScenariosArgs {
    #[arg(long, default_value = "study2")]
    suite: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    rules: RuleArgs,
}

#[derive(Args)]
struct ConductArgs {
    #[arg(long)]
    state: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Directory holding trial event logs.
    #[arg(long, env = "CI3P3_DATA_DIR", default_value = "ci3p3-data")]
    data_dir: PathBuf,
    /// Static UI assets served under `/`.
    #[arg(long = "static")]
    static_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Table(a) => cmd_table(a),
        Command::Init(a) => cmd_init(a),
        Command::Decide(a) => cmd_decide(a),
        Command::Finalize(a) => cmd_finalize(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Scenarios(a) => cmd_scenarios(a),
        Command::Conduct(a) => cmd_conduct(a),
        Command::Serve(a) => cmd_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(path) => std::fs::write(path, text).map_err(io_err(path)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_table(a: TableArgs) -> CliResult {
    let table = DecisionTable::new(a.rules.interval()?, a.rules.xi, 3, a.n_max).map_err(engine)?;
    let text = match a.format {
        TableFormat::Text => table.to_text(),
        TableFormat::Csv => table.to_csv(),
        TableFormat::Json => {
            let cells: Vec<_> = table.cells().map(|(n, y, d)| json!({ "n": n, "y": y, "decision": d })).collect();
            serde_json::to_string_pretty(&json!({ "ei": table.ei, "threshold": table.threshold, "cells": cells })).unwrap() + "\n"
        }
    };
    emit(a.out.as_deref(), &text)
}

fn load_state(path: &Path) -> CliResult<Trial> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Trial::from_json(&text).map_err(|e| match e {
        CoreError::Integrity(m) => CliError::Integrity(format!("{}: {m}", path.display())),
        other => engine(other),
    })
}

fn save_state(path: &Path, trial: &Trial) -> CliResult {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, trial.to_json() + "\n").map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

fn cmd_init(a: InitArgs) -> CliResult {
    if a.state.exists() && !a.force {
        return Err(CliError::Config(format!("{} exists; pass --force to overwrite", a.state.display())));
    }
    let (grid, params) = match &a.config {
        Some(path) => {
            let cfg = ConfigFile::load(path)?;
            let grid = cfg.grid.ok_or_else(|| CliError::Config(format!("{}: no grid given", path.display())))?;
            (grid, cfg.params)
        }
        None => {
            let ep: PathChoice = a.ep.parse().map_err(engine)?;
            let params = DesignParams {
                ei: a.rules.interval()?,
                cohort_size: a.cohort_size,
                max_n: a.max_n,
                exclusion_threshold: a.rules.xi,
                working_prior: BetaParams::UNIFORM,
                ep,
                skip_stage1: a.skip_stage1,
                modified_rule: a.modified_rule,
                rng_seed: a.seed,
                ..DesignParams::default()
            };
            (DoseGrid::new(a.rows, a.cols).map_err(engine)?, params)
        }
    };
    let trial = Trial::new(Arc::new(Design::new(grid, params).map_err(engine)?));
    save_state(&a.state, &trial)?;
    println!("created {} ({}x{} grid); first cohort at {}", a.state.display(), grid.rows, grid.cols, DcCoord::ORIGIN);
    Ok(())
}

fn parse_dc(s: &str) -> CliResult<DcCoord> {
    s.parse().map_err(|e: CoreError| CliError::Config(e.to_string()))
}

fn recommendation_text(r: Recommendation) -> String {
    match r {
        Recommendation::Assign(dc) => format!("next cohort: {dc}"),
        Recommendation::Stop(reason) => format!("trial stopped: {}", stop_name(reason)),
    }
}

fn cmd_decide(a: DecideArgs) -> CliResult {
    let mut trial = load_state(&a.state)?;
    let mut recorded = None;
    if let (Some(dc), Some(dlt)) = (a.dc.as_deref(), a.dlt) {
        let dc = parse_dc(dc)?;
        if let Recommendation::Assign(rec) = trial.next_assignment() {
            if rec != dc && !a.allow_override {
                return Err(CliError::Config(format!(
                    "cohort at {dc} but the recommendation is {rec}; pass --override to record it anyway"
                )));
            }
        }
        trial.record_cohort(dc, dlt).map_err(engine)?;
        recorded = Some((dc, dlt));
        if !a.dry_run {
            save_state(&a.state, &trial)?;
        }
    } else if a.dlt.is_some() {
        return Err(CliError::Config("--dlt needs --dc".into()));
    }

    if a.json {
        let doc = json!({
            "recorded": recorded.map(|(dc, dlt)| json!({ "dc": dc, "dlt": dlt })),
            "saved": recorded.is_some() && !a.dry_run,
            "recommendation": trial.next_assignment(),
            "step": trial.last_step(),
            "view": trial.view(),
        });
        println!("{}", serde_json::to_string_pretty(&doc).unwrap());
    } else {
        if recorded.is_some() && a.dry_run {
            println!("(dry run, state not saved)");
        }
        print!("{}", trial.view().to_text());
    }
    Ok(())
}

fn cmd_finalize(a: FinalizeArgs) -> CliResult {
    let trial = load_state(&a.state)?;
    let result = trial.finalize();
    if a.json {
        println!("{}", result.to_json());
        return Ok(());
    }
    if trial.next_assignment().dc().is_some() {
        println!("note: trial has not stopped; selecting on current data");
    }
    match result.selected {
        Some(dc) => {
            let cell = result.cells.iter().find(|c| c.dc == dc).expect("selected cell listed");
            println!("MTDC: {dc} ({}/{} DLT, estimate {:.3})", cell.obs.y, cell.obs.n, cell.isotonic_estimate);
        }
        None => println!("no combination selected"),
    }
    if result.overridden_cohorts > 0 {
        println!("{} cohort(s) were placed by override", result.overridden_cohorts);
    }
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> CliResult {
    let (cfg, base) = match &a.config {
        Some(path) => (ConfigFile::load(path)?, path.parent().map(Path::to_path_buf).unwrap_or_default()),
        None => (
            ConfigFile {
                schema_version: config::SCHEMA_VERSION,
                grid: None,
                params: DesignParams::default(),
                variant: Variant::Base,
                scenarios: Vec::new(),
                n_reps: None,
                master_seed: None,
                workers: None,
                output: None,
            },
            PathBuf::new(),
        ),
    };
    let mut scenarios = cfg.resolve_scenarios(&base)?;
    if scenarios.is_empty() {
        scenarios = load_scenarios(&a.suite, &base)?;
    }
    let grid = scenarios[0].matrix().grid();
    if let Some(s) = scenarios.iter().find(|s| s.matrix().grid() != grid) {
        return Err(CliError::Config(format!("scenario {} has a different grid size", s.id())));
    }
    if cfg.grid.is_some_and(|g| g != grid) {
        return Err(CliError::Config("configured grid does not match the scenarios".into()));
    }
    let sim = SimConfig {
        params: cfg.params,
        variant: a.variant.unwrap_or(cfg.variant),
        scenarios,
        n_reps: a.reps.or(cfg.n_reps).unwrap_or(1000),
        master_seed: a.seed.or(cfg.master_seed).unwrap_or(0),
        workers: a.workers.or(cfg.workers),
    };
    let report = run_oc(&sim).map_err(engine)?;
    print!("{}", report.to_table());
    if let Some(dir) = a.out_dir.or(cfg.output.map(|o| base.join(o.dir))) {
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (name, text) in [("oc.csv", report.to_csv()), ("oc.json", report.to_json()), ("oc_long.csv", report.to_long_csv())] {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(io_err(&path))?;
        }
        println!("wrote oc.csv, oc.json, oc_long.csv to {}", dir.display());
    }
    Ok(())
}

fn cmd_scenarios(a: ScenariosArgs) -> CliResult {
    let ei = a.rules.interval()?;
    let scenarios = load_scenarios(&a.suite, Path::new(""))?;
    std::fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let mut summary = String::from("id,label,category,mtdcs,fallback\n");
    for s in &scenarios {
        let stem = s.id().replace('/', "_");
        for (ext, text) in [("csv", s.to_csv()), ("json", s.to_json())] {
            let path = a.out.join(format!("{stem}.{ext}"));
            std::fs::write(&path, text).map_err(io_err(&path))?;
        }
        let t = classify_truth(s.matrix(), &ei);
        let mtdcs: Vec<String> = t.mtdc_set.iter().map(ToString::to_string).collect();
        summary.push_str(&format!("{},\"{}\",{},{},{}\n", s.id(), s.label(), t.category, mtdcs.join(" "), t.fallback));
    }
    let path = a.out.join("classification.csv");
    std::fs::write(&path, summary).map_err(io_err(&path))?;
    let hist = category_histogram(&scenarios, &ei);
    let mut text = String::from("category,count\n");
    for key in ["all_safe", "1", "2", "3", ">3", "all_toxic"] {
        text.push_str(&format!("{key},{}\n", hist[key]));
        println!("{key:>9}  {}", hist[key]);
    }
    let path = a.out.join("histogram.csv");
    std::fs::write(&path, text).map_err(io_err(&path))?;
    println!("wrote {} scenarios to {}", scenarios.len(), a.out.display());
    Ok(())
}

const CONDUCT_HELP: &str = "enter the DLT count for the recommended combination, `<dc> <dlt>` to record elsewhere (override), `what <dlt>` to preview, `q` to quit";

fn cmd_conduct(a: ConductArgs) -> CliResult {
    let mut trial = load_state(&a.state)?;
    let stdin = io::stdin();
    let mut lines = stdin.lock().lines();
    println!("{CONDUCT_HELP}");
    loop {
        print!("{}", trial.view().to_text());
        let Recommendation::Assign(rec) = trial.next_assignment() else {
            println!("run `ci3p3 finalize --state {}` for the MTDC", a.state.display());
            return Ok(());
        };
        print!("DLTs at {rec} (0-{})> ", trial.state().params.cohort_size);
        io::stdout().flush().ok();
        let Some(line) = lines.next() else { return Ok(()) };
        let line = line.map_err(|e| CliError::Runtime(e.to_string()))?;
        let words: Vec<&str> = line.split_whitespace().collect();
        let outcome = match words.as_slice() {
            [] => continue,
            ["q" | "quit"] => return Ok(()),
            ["what", y] => {
                match y.parse::<u32>().map_err(|e| e.to_string()).and_then(|y| trial.what_if(y).map_err(|e| e.to_string())) {
                    Ok(step) => println!("if {y} DLTs: {}\n{}", recommendation_text(step.next), step.to_text()),
                    Err(e) => println!("cannot preview: {e}"),
                }
                continue;
            }
            [y] => y.parse::<u32>().map(|y| (rec, y)).map_err(|e| e.to_string()),
            [dc, y] => parse_dc(dc).map_err(|e| e.to_string()).and_then(|dc| y.parse::<u32>().map(|y| (dc, y)).map_err(|e| e.to_string())),
            _ => Err(CONDUCT_HELP.to_string()),
        };
        match outcome.and_then(|(dc, y)| trial.record_cohort(dc, y).map_err(|e| e.to_string())) {
            Ok(_) => save_state(&a.state, &trial)?,
            Err(e) => println!("not recorded: {e}"),
        }
    }
}

fn cmd_serve(a: ServeArgs) -> CliResult {
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(ci3p3_service::serve(a.bind, a.data_dir, a.static_dir)).map_err(|e| {
        if e.downcast_ref::<ci3p3_service::StoreError>().is_some() {
            CliError::Integrity(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    })
}
