//! Command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::embeddings::InitStrategy;
use crate::experiments::{estimate_bias, ground_truth, offline_comparison, prepare_run, run_experiment, run_scenario};
use crate::io::config::{load_scenario_file, ScenarioConfig};
use crate::io::eventlog::{read_event_log, EventLogWriter};
use crate::io::report::{write_experiment, write_json, write_offline, write_report, write_run_reports, write_tsv};
use crate::metrics::{cohort_bounds, cvp, cvp_views_min, ArmScope, LedgerBuilder, Metric, MetricReport};
use crate::sim::{EventSink, NullSink};

/// Environment variable overriding the output directory of the scenario file.
pub const OUT_ENV: &str = "LIFECYCLE_SIM_OUT";
pub const EVENT_LOG_FILE: &str = "events.tsv";
pub const SWEEP_FILE: &str = "sweep.tsv";
pub const CVP_QUERY_HEADER: &str = "x\ty\tcvp";

#[derive(Debug, Parser)]
#[command(name = "lifecycle-sim", version, about = "Fresh-content lifecycle simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Scenario file (TOML).
    #[arg(long)]
    pub scenario: PathBuf,
    /// Output directory. Overrides LIFECYCLE_SIM_OUT and the scenario's output.dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario, writing the event log and reports.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Skip the event log even if the scenario asks for it.
        #[arg(long)]
        no_log: bool,
    },
    /// Recompute reports from an event log.
    Metrics {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra CVP queries as `X:Y` or `X:views_min`.
        #[arg(long = "cvp", value_name = "X:Y")]
        cvp: Vec<String>,
    },
    /// Run the scenario's experiment plan over its replicates.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// Skip the ground-truth runs and the bias table.
        #[arg(long)]
        no_bias: bool,
    },
    /// Run the scenario once per value of one knob.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dotted config path, e.g. serving.views_min.
        #[arg(long)]
        knob: String,
        /// Comma separated TOML values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Re-render the tables of a report.json.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score initial embeddings against a held-out impression log.
    Offline {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10_000)]
        impressions: usize,
        #[arg(long, value_parser = parse_strategy, default_value = "genre_average")]
        baseline: InitStrategy,
    },
}

/// `--out`, then the environment override, then the fallback.
pub fn resolve_out(flag: Option<&Path>, fallback: &Path) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => fallback.to_path_buf(),
    }
}

fn load(common: &Common) -> Result<(ScenarioConfig, PathBuf)> {
    let mut scn = load_scenario_file(&common.scenario)
        .with_context(|| format!("loading scenario {}", common.scenario.display()))?;
    if let Some(s) = common.seed {
        scn.seed = s;
    }
    let out = resolve_out(common.out.as_deref(), Path::new(&scn.output.dir));
    Ok((scn, out))
}

fn parse_strategy(s: &str) -> Result<InitStrategy, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Parse `X:Y` or `X:views_min`; `None` for Y means the per-content target.
pub fn parse_cvp_query(s: &str) -> Result<(i64, Option<i64>)> {
    let (x, y) = s.split_once(':').with_context(|| format!("cvp query `{s}` is not X:Y"))?;
    let x: i64 = x.trim().parse().with_context(|| format!("bad X in `{s}`"))?;
    let y = match y.trim() {
        "views_min" => None,
        y => Some(y.parse().with_context(|| format!("bad Y in `{s}`"))?),
    };
    Ok((x, y))
}

fn print_summary(r: &MetricReport) {
    for (k, v) in &r.scalars {
        println!("{}\t{k}\t{v}", r.label);
    }
}

fn simulate(common: &Common, no_log: bool) -> Result<()> {
    let (scn, out) = load(common)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let prepared = prepare_run(&scn, scn.experiment.as_ref(), scn.seed)?;
    let res = if scn.output.write_log && !no_log {
        let path = out.join(EVENT_LOG_FILE);
        let mut w = EventLogWriter::create(&path, &prepared.meta)?;
        let res = prepared.run(&scn, &mut w)?;
        w.finish()?;
        res
    } else {
        prepared.run(&scn, &mut NullSink)?
    };
    write_run_reports(&out, &res.reports.global, &res.reports.arms)?;
    write_json(&out.join("exposure.json"), &res.reports.exposure)?;
    print_summary(&res.reports.global);
    for a in &res.reports.arms {
        print_summary(a);
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn metrics(log: &Path, out: Option<&Path>, queries: &[String]) -> Result<()> {
    let queries: Vec<_> = queries.iter().map(|q| parse_cvp_query(q)).collect::<Result<_>>()?;
    let fallback = log.parent().map(|p| p.join("metrics")).unwrap_or_else(|| PathBuf::from("metrics"));
    let out = resolve_out(out, &fallback);
    let (meta, events) = read_event_log(log).with_context(|| format!("reading {}", log.display()))?;
    let mut collector = meta.collector();
    let mut all = LedgerBuilder::new(ArmScope::All, meta.catalog, meta.metrics.observe_ticks());
    for e in &events {
        collector.record(e);
        all.add(e);
    }
    let reports = meta.reports(collector);
    write_run_reports(&out, &reports.global, &reports.arms)?;
    write_json(&out.join("exposure.json"), &reports.exposure)?;
    if queries.is_empty() {
        print_summary(&reports.global);
        return Ok(());
    }
    let (start, end) = cohort_bounds(&meta.metrics, meta.horizon);
    let ledger = all.finish(start, end, 1.0);
    let mut rows = Vec::new();
    for (x, y) in queries {
        let v = Metric(match y {
            Some(y) => cvp(&ledger, x, y)?,
            None => cvp_views_min(&ledger, x)?,
        });
        let y = y.map_or_else(|| "views_min".to_string(), |y| y.to_string());
        println!("cvp({x}|{y})\t{v}");
        rows.push([x.to_string(), y, v.to_string()]);
    }
    write_tsv(&out.join("cvp_queries.tsv"), CVP_QUERY_HEADER, rows)?;
    Ok(())
}

fn experiment(common: &Common, no_bias: bool) -> Result<()> {
    let (scn, out) = load(common)?;
    let Some(plan) = scn.experiment.clone() else {
        bail!("scenario {} has no [experiment] table", common.scenario.display());
    };
    let res = run_experiment(&plan, &scn)?;
    let bias = if no_bias { None } else { Some(estimate_bias(&res, &ground_truth(&plan, &scn)?)) };
    write_experiment(&out, &res, bias.as_ref())?;
    for d in crate::experiments::arm_deltas(&res) {
        println!("delta\t{}\t{}\t{}\t{}", d.metric, d.arm, d.mean, d.std);
    }
    if let Some(b) = &bias {
        for n in &b.notices {
            eprintln!("note: {n}");
        }
        for r in &b.rows {
            println!("bias\t{}\t{}\t{}", r.metric, r.arm, r.bias);
        }
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn sweep(common: &Common, knob: &str, values: &[String]) -> Result<()> {
    let (scn, out) = load(common)?;
    let mut reports = Vec::new();
    for v in values {
        let s = scn.with_knob(knob, v.trim())?;
        let res = run_scenario(&s, None, s.seed)?;
        let dir = out.join(format!("{}={}", knob, v.trim().trim_matches('"')));
        write_report(&dir, &res.reports.global)?;
        reports.push((v.trim().to_string(), res.reports.global));
    }
    let keys: Vec<String> = reports.first().map(|(_, r)| r.scalars.keys().cloned().collect()).unwrap_or_default();
    let header = std::iter::once("value".to_string()).chain(keys.iter().cloned()).collect::<Vec<_>>().join("\t");
    let rows = reports.iter().map(|(v, r)| {
        std::iter::once(v.clone())
            .chain(keys.iter().map(|k| r.scalars.get(k).copied().unwrap_or(Metric(None)).to_string()))
            .collect::<Vec<_>>()
    });
    write_tsv(&out.join(SWEEP_FILE), &header, rows)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn report(input: &Path, out: Option<&Path>) -> Result<()> {
    let path = if input.is_dir() { input.join("report.json") } else { input.to_path_buf() };
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let r: MetricReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let fallback = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    write_report(&resolve_out(out, &fallback), &r)?;
    Ok(())
}

fn offline(common: &Common, impressions: usize, baseline: InitStrategy) -> Result<()> {
    let (scn, out) = load(common)?;
    let r = offline_comparison(&scn, scn.seed, impressions, baseline)?;
    write_offline(&out, &r)?;
    for row in &r.rows {
        println!("{}\tauc={}\tf1={:.6}\trela_impr={}", row.strategy.as_str(), row.auc, row.f1, row.rela_impr);
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common, no_log } => simulate(&common, no_log),
        Command::Metrics { log, out, cvp } => metrics(&log, out.as_deref(), &cvp),
        Command::Experiment { common, no_bias } => experiment(&common, no_bias),
        Command::Sweep { common, knob, values } => sweep(&common, &knob, &values),
        Command::Report { input, out } => report(&input, out.as_deref()),
        Command::Offline { common, impressions, baseline } => offline(&common, impressions, baseline),
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
