//! `slpos`: run sidelink positioning experiments described by JSON documents.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;
use sidelink_core::document::{parse_override, AxisValues, ConfigDocument, SweepGroup, SweepSpec};
use sidelink_core::estimators::EstimatorMethod;
use sidelink_core::harness::{
    apply_axis, evaluate_psl, read_results_csv, result_rows, run, summarize_rows, summary_report, sweep_rows,
    write_results_csv, write_sweep_csv, ExperimentConfig, PslReport, PslRequirement, ResultRow, SummaryReport,
    SweepAxis,
};
use sidelink_core::measurement::RttKind;
use sidelink_core::protocol::{run_session, MeasurementPlan, ProtocolDelays, SessionKind};
use sidelink_core::Error;

#[derive(Parser)]
#[command(name = "slpos", version, about = "Sidelink positioning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment. Documents with a sweep section run the sweep.
    Run(ConfigArgs),
    /// Run a sweep, from the document or from --axis/--values.
    Sweep(SweepArgs),
    /// Check a results CSV against positioning service levels.
    PslCheck(PslArgs),
    /// Write the message trace of one positioning session.
    ProtocolTrace(TraceArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file, or the name of a shipped preset.
    #[arg(long)]
    config: String,
    /// Output directory.
    #[arg(long, default_value = "slpos-out")]
    out: PathBuf,
    /// Override a config key, e.g. `radio.bandwidth_hz=40e6`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    workers: Option<usize>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Sweep axis, replacing the document's sweep section.
    #[arg(long, value_parser = parse_axis, requires = "values")]
    axis: Option<SweepAxis>,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', requires = "axis")]
    values: Vec<f64>,
}

#[derive(Args)]
struct PslArgs {
    /// Results CSV written by `run` or `sweep`.
    #[arg(long)]
    results: PathBuf,
    /// JSON file holding an array of requirements; the default PSL table when omitted.
    #[arg(long)]
    psl: Option<PathBuf>,
}

#[derive(Args)]
struct TraceArgs {
    /// nsl-mt-lr, nsl-mo-lr or usl.
    #[arg(long, value_parser = parse_session)]
    session: Option<SessionKind>,
    /// Config whose protocol, method and anchor count are used.
    #[arg(long)]
    config: Option<String>,
    /// Override a key of --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Positioning method; ignored when --config is given.
    #[arg(long, value_parser = parse_method, default_value = "tdoa")]
    method: EstimatorMethod,
    /// Anchor count; ignored when --config is given.
    #[arg(long, default_value_t = 4)]
    anchors: usize,
    /// Output directory; the trace goes to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Usage(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn from_name<T: serde::de::DeserializeOwned>(s: &str) -> Option<T> {
    serde_json::from_value(Value::String(s.to_string())).ok()
}

fn parse_axis(s: &str) -> std::result::Result<SweepAxis, String> {
    from_name(&s.replace('-', "_")).ok_or_else(|| format!("unknown sweep axis `{s}`"))
}

fn parse_method(s: &str) -> std::result::Result<EstimatorMethod, String> {
    from_name(&s.replace('-', "_")).ok_or_else(|| format!("unknown method `{s}`"))
}

fn parse_session(s: &str) -> std::result::Result<SessionKind, String> {
    let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_lowercase();
    match key.as_str() {
        "nslmtlr" => Ok(SessionKind::NslMtLr),
        "nslmolr" => Ok(SessionKind::NslMoLr),
        "usl" => Ok(SessionKind::Usl),
        _ => Err(format!("unknown session kind `{s}`")),
    }
}

/// Files written by this invocation, removed again if it fails.
struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            created_dir: false,
            written: Vec::new(),
        }
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        if !self.dir.exists() {
            fs::create_dir_all(&self.dir)
                .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", self.dir.display())))?;
            self.created_dir = true;
        }
        let path = self.dir.join(name);
        self.written.push(path.clone());
        fs::write(&path, bytes).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }

    fn discard(&self) {
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

fn load_document(config: &str, overrides: &[String], seed: Option<u64>) -> CliResult<ConfigDocument> {
    let doc = if let Some(text) = sidelink_core::document::preset(config) {
        ConfigDocument::from_json(text)?
    } else {
        let text = fs::read_to_string(config).map_err(|e| Failure::Usage(format!("cannot read config `{config}`: {e}")))?;
        ConfigDocument::from_json(&text)?
    };
    let sets = overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
    let mut doc = doc.with_overrides(&sets)?;
    if let Some(seed) = seed {
        doc.experiment.master_seed = seed;
    }
    Ok(doc)
}

fn workers(requested: Option<usize>) -> CliResult<usize> {
    match requested {
        Some(0) => Err(Failure::Usage("--workers must be at least 1".into())),
        Some(n) => Ok(n),
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("report serializes");
    bytes.push(b'\n');
    bytes
}

fn csv_bytes(rows: &[ResultRow]) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    write_results_csv(&mut buf, rows).map_err(|e| Failure::Runtime(e.to_string()))?;
    Ok(buf)
}

fn axis_value(axis: SweepAxis, v: f64) -> String {
    match axis {
        SweepAxis::BandwidthHz => format!("{} MHz", v / 1e6),
        SweepAxis::NAnchors | SweepAxis::NAntennas => format!("{v}"),
        SweepAxis::SyncStdS if v == 0.0 => "off".into(),
        SweepAxis::SyncStdS => format!("{} ns", v * 1e9),
        SweepAxis::DriftPpm => format!("{v} ppm"),
    }
}

fn availability_line(report: &SummaryReport) -> String {
    report
        .availability
        .iter()
        .map(|a| format!("<={} m {:.1}%", a.threshold_m, 100.0 * a.fraction))
        .collect::<Vec<_>>()
        .join("  ")
}

fn psl_line(r: &PslReport) -> String {
    let clauses: Vec<String> = r
        .clauses
        .iter()
        .map(|c| format!("{} {:.4} vs {:.4}", c.clause, c.achieved, c.required))
        .collect();
    format!("{:<8} {}  {}", r.name, if r.pass { "PASS" } else { "FAIL" }, clauses.join(", "))
}

fn run_single(doc: &ConfigDocument, workers: usize, outputs: &mut Outputs) -> CliResult<()> {
    let cfg = &doc.experiment;
    let records = run(cfg, workers)?;
    let report = summary_report(&cfg.name, &records, &doc.report.availability_thresholds_m, &doc.report.requirements())?;
    outputs.write("results.csv", &csv_bytes(&result_rows(cfg, &records))?)?;
    outputs.write("summary.json", &json_bytes(&report))?;
    println!(
        "{}: {} trials, {}, {} MHz, {} anchors",
        cfg.name,
        records.len(),
        cfg.method,
        cfg.radio.bandwidth_hz / 1e6,
        cfg.scenario.n_anchors
    );
    println!("horizontal p90 {:.3} m  (p50 {:.3} m)", report.horizontal["p90"], report.horizontal["p50"]);
    println!("availability  {}", availability_line(&report));
    for r in &report.psl {
        println!("{}", psl_line(r));
    }
    println!("wrote {}", outputs.dir.display());
    Ok(())
}

#[derive(Serialize)]
struct SweepEntry {
    by_axis: Option<SweepAxis>,
    by_value: Option<f64>,
    axis: SweepAxis,
    value: f64,
    summary: SummaryReport,
}

#[derive(Serialize)]
struct SweepSummary {
    name: String,
    points: Vec<SweepEntry>,
}

fn point_config(base: &ExperimentConfig, group: &SweepGroup, value: f64) -> CliResult<ExperimentConfig> {
    let outer = match group.by {
        Some((axis, v)) => apply_axis(base, axis, v)?,
        None => base.clone(),
    };
    Ok(apply_axis(&outer, group.axis, value)?)
}

fn run_sweep(doc: &ConfigDocument, workers: usize, outputs: &mut Outputs) -> CliResult<()> {
    let groups = doc.run_sweep(workers)?;
    let thresholds = &doc.report.availability_thresholds_m;
    let psl = doc.report.requirements();
    let mut results = Vec::new();
    let mut table = Vec::new();
    let mut entries = Vec::new();
    for group in &groups {
        table.extend(sweep_rows(group.by, group.axis, &group.points, thresholds));
        for pt in &group.points {
            let cfg = point_config(&doc.experiment, group, pt.value)?;
            results.extend(result_rows(&cfg, &pt.records));
            entries.push(SweepEntry {
                by_axis: group.by.map(|(a, _)| a),
                by_value: group.by.map(|(_, v)| v),
                axis: group.axis,
                value: pt.value,
                summary: summary_report(&cfg.name, &pt.records, thresholds, &psl)?,
            });
        }
    }
    let mut sweep_csv = Vec::new();
    write_sweep_csv(&mut sweep_csv, &table).map_err(|e| Failure::Runtime(e.to_string()))?;
    outputs.write("results.csv", &csv_bytes(&results)?)?;
    outputs.write("sweep.csv", &sweep_csv)?;
    let summary = SweepSummary {
        name: doc.experiment.name.clone(),
        points: entries,
    };
    outputs.write("summary.json", &json_bytes(&summary))?;

    let cfg = &doc.experiment;
    println!("{}: {} sweep, {} trials per point", cfg.name, cfg.method, cfg.n_trials);
    let by_header = groups.first().and_then(|g| g.by).map(|(a, _)| a.as_str());
    let axis = groups[0].axis;
    let mut header = String::new();
    if let Some(b) = by_header {
        header.push_str(&format!("{b:<14}"));
    }
    header.push_str(&format!("{:<14}{:>10}{:>10}", axis.as_str(), "h_p50", "h_p90"));
    for t in thresholds {
        header.push_str(&format!("{:>11}", format!("<={t} m")));
    }
    println!("{header}");
    for e in &summary.points {
        let mut line = String::new();
        if let (Some(a), Some(v)) = (e.by_axis, e.by_value) {
            line.push_str(&format!("{:<14}", axis_value(a, v)));
        }
        line.push_str(&format!(
            "{:<14}{:>10.3}{:>10.3}",
            axis_value(e.axis, e.value),
            e.summary.horizontal["p50"],
            e.summary.horizontal["p90"]
        ));
        for a in &e.summary.availability {
            line.push_str(&format!("{:>10.1}%", 100.0 * a.fraction));
        }
        println!("{line}");
    }
    for e in &summary.points {
        let verdicts: Vec<String> = e
            .summary
            .psl
            .iter()
            .map(|r| format!("{} {}", r.name, if r.pass { "pass" } else { "fail" }))
            .collect();
        let at = match (e.by_axis, e.by_value) {
            (Some(a), Some(v)) => format!("{} / {}", axis_value(a, v), axis_value(e.axis, e.value)),
            _ => axis_value(e.axis, e.value),
        };
        println!("{at:<22} {}", verdicts.join("  "));
    }
    println!("wrote {}", outputs.dir.display());
    Ok(())
}

fn cmd_run(args: &ConfigArgs) -> CliResult<()> {
    let doc = load_document(&args.config, &args.overrides, args.seed)?;
    let workers = workers(args.workers)?;
    let mut outputs = Outputs::new(&args.out);
    let result = if doc.sweep.is_some() {
        run_sweep(&doc, workers, &mut outputs)
    } else {
        run_single(&doc, workers, &mut outputs)
    };
    if result.is_err() {
        outputs.discard();
    }
    result
}

fn cmd_sweep(args: &SweepArgs) -> CliResult<()> {
    let mut doc = load_document(&args.config.config, &args.config.overrides, args.config.seed)?;
    if let Some(axis) = args.axis {
        let by = doc.sweep.take().and_then(|s| s.by).filter(|b: &AxisValues| b.axis != axis);
        let text = serde_json::to_value(SweepSpec {
            axis,
            values: args.values.clone(),
            by,
        })
        .expect("sweep serializes");
        let mut value = doc.to_value();
        value["sweep"] = text;
        doc = ConfigDocument::from_value(value)?;
    }
    if doc.sweep.is_none() {
        return Err(Failure::Usage("no sweep: add a sweep section or pass --axis and --values".into()));
    }
    let workers = workers(args.config.workers)?;
    let mut outputs = Outputs::new(&args.config.out);
    let result = run_sweep(&doc, workers, &mut outputs);
    if result.is_err() {
        outputs.discard();
    }
    result
}

fn cmd_psl_check(args: &PslArgs) -> CliResult<()> {
    let file = fs::File::open(&args.results)
        .map_err(|e| Failure::Usage(format!("cannot read results `{}`: {e}", args.results.display())))?;
    let rows = read_results_csv(file)?;
    let table: Vec<PslRequirement> = match &args.psl {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read PSL table `{}`: {e}", path.display())))?;
            let table: Vec<PslRequirement> =
                serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("invalid PSL table: {e}")))?;
            for p in &table {
                p.validate()?;
            }
            table
        }
        None => sidelink_core::harness::default_psl_table(),
    };
    let summaries = summarize_rows(&rows)?;
    println!("{} trials from {}", rows.len(), args.results.display());
    for psl in &table {
        let r = evaluate_psl(&summaries, psl)?;
        let note = if psl.placeholder { "  (placeholder values)" } else { "" };
        println!("{}{note}", psl_line(&r));
    }
    Ok(())
}

fn cmd_protocol_trace(args: &TraceArgs) -> CliResult<()> {
    let (kind, plan, delays) = match &args.config {
        Some(config) => {
            let doc = load_document(config, &args.overrides, None)?;
            let cfg = &doc.experiment;
            (
                args.session.unwrap_or(cfg.protocol.session_kind),
                MeasurementPlan {
                    method: cfg.method,
                    rtt_kind: cfg.rtt.kind,
                    n_anchors: cfg.scenario.n_anchors,
                },
                cfg.protocol.delays.clone(),
            )
        }
        None => {
            if !args.overrides.is_empty() {
                return Err(Failure::Usage("--set needs --config".into()));
            }
            (
                args.session.unwrap_or(SessionKind::Usl),
                MeasurementPlan {
                    method: args.method,
                    rtt_kind: RttKind::DoubleSided,
                    n_anchors: args.anchors,
                },
                ProtocolDelays::default(),
            )
        }
    };
    let session = run_session(kind, plan, &delays)?;
    let mut trace = Vec::new();
    session
        .write_trace_jsonl(&mut trace)
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let latency = session.session_latency_s()?;
    match &args.out {
        Some(dir) => {
            let mut outputs = Outputs::new(dir);
            if let Err(e) = outputs.write("trace.jsonl", &trace) {
                outputs.discard();
                return Err(e);
            }
            println!(
                "{} messages, session latency {:.3} ms, wrote {}",
                trace.iter().filter(|b| **b == b'\n').count(),
                latency * 1e3,
                dir.join("trace.jsonl").display()
            );
        }
        None => print!("{}", String::from_utf8(trace).expect("trace is UTF-8")),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::PslCheck(a) => cmd_psl_check(a),
        Command::ProtocolTrace(a) => cmd_protocol_trace(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("slpos: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("slpos: {msg}");
            ExitCode::from(1)
        }
    }
}
