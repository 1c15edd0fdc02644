//! Command-line front end. Every command reads a scenario (or traces),
//! writes its artifacts atomically under `--out`, and prints a short
//! summary in the requested format.
//!
//! Exit status: 0 on success, 1 for validation errors, 2 for failures
//! during a run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::controller::calibrate_t_table;
use crate::error::{Error, Result};
use crate::experiments::{p_table_file, Setting, Setup};
use crate::io::{atomic_write, read_trace, write_trace, TraceSchema};
use crate::metrics::{
    best_delay, effective_groups, g_mean, stsf, tiled_windows, StsfReport, SvfReport,
};
use crate::model::Unit;
use crate::report::{
    g_mean_rows, heatmap_csv, parse_heatmap, parse_summary, render_figures, summary_csv,
    summary_rows, SummaryRow,
};
use crate::scenario::{AnalysisConfig, Scenario};
use crate::sensors::{observe, Region, SensorConfig, SensorMode};
use crate::thermal::block_temperature_trace;

#[derive(Debug, Parser)]
#[command(
    name = "thermoshield",
    version,
    about = "Thermal side-channel simulation and shielding"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Scenario file (TOML).
    #[arg(long)]
    pub scenario: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Format of the summary printed to stdout.
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Unshielded run: cell and block temperature traces.
    Simulate(Common),
    /// Power tables, the increment sweep and the level table.
    Calibrate(Common),
    /// Closed-loop shielded runs and the metrics summary.
    Shield {
        #[command(flatten)]
        common: Common,
        /// Security level to run (defaults to the scenario's).
        #[arg(long)]
        security_level: Option<usize>,
        /// Run every increment in the scenario sweep.
        #[arg(long)]
        sweep: bool,
        /// Include the max_avg row in the summary.
        #[arg(long)]
        max_avg: bool,
    },
    /// Delay, SVF and STSF for an instruction trace and a temperature trace.
    Analyze {
        inst: PathBuf,
        temp: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Scenario whose analysis settings to use.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Attacker observations per sensor and the layer-placement sweep.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Comma-separated sensor ids to use (default: all).
        #[arg(long, value_delimiter = ',')]
        sensors: Option<Vec<String>>,
    },
    /// Aggregate CSV and figures from finished shield runs.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses arguments and runs; returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

/// Runs one command and returns the text it prints.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Simulate(c) => simulate(c),
        Command::Calibrate(c) => calibrate(c),
        Command::Shield {
            common,
            security_level,
            sweep,
            max_avg,
        } => shield(common, *security_level, *sweep, *max_avg),
        Command::Analyze {
            inst,
            temp,
            out,
            scenario,
            format,
        } => analyze(inst, temp, out, scenario.as_deref(), *format),
        Command::Attack { common, sensors } => attack(common, sensors.as_deref()),
        Command::Report { run_dirs, out } => report(run_dirs, out),
    }
}

fn load(c: &Common) -> Result<Scenario> {
    let mut s = Scenario::load(&c.scenario)?;
    if let Some(seed) = c.seed {
        s.seed = seed;
    }
    Ok(s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Renders serializable rows as CSV with a header.
fn rows_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::validation(e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::validation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn render<T: Serialize>(rows: &[T], format: Format) -> Result<String> {
    match format {
        Format::Csv => rows_csv(rows),
        Format::Json => Ok(to_json(&rows)),
    }
}

#[derive(Serialize)]
struct SimulateRow {
    benchmark: String,
    samples: usize,
    cells_file: String,
    blocks_file: String,
}

fn simulate(c: &Common) -> Result<String> {
    let setup = Setup::new(load(c)?)?;
    let ids: Vec<String> = setup
        .floorplan
        .blocks
        .iter()
        .map(|b| b.id.clone())
        .collect();
    let mut rows = Vec::new();
    for w in setup.workloads()? {
        let base = setup.baseline(&w)?;
        let blocks = block_temperature_trace(&base.cells, &ids, &setup.network)?;
        let cells_file = format!("cells_{}.csv", w.name);
        let blocks_file = format!("blocks_{}.csv", w.name);
        write_trace(&c.out.join(&cells_file), &base.cells)?;
        write_trace(&c.out.join(&blocks_file), &blocks)?;
        rows.push(SimulateRow {
            benchmark: w.name,
            samples: base.cells.num_samples(),
            cells_file,
            blocks_file,
        });
    }
    render(&rows, c.format)
}

#[derive(Serialize)]
struct SweepRow {
    benchmark: String,
    delta_t_c: f64,
    svf: f64,
}

fn calibrate(c: &Common) -> Result<String> {
    let mut scenario = load(c)?;
    scenario.shield.p_tables = None;
    let sweep = scenario.shield.sweep.clone();
    if sweep.is_empty() {
        return Err(Error::validation("calibration sweep is empty"));
    }
    let setup = Setup::new(scenario)?;
    for (pair, table) in setup.pairs.iter().zip(&setup.p_tables) {
        write_text(&c.out.join(p_table_file(&pair.protected)), &table.to_csv())?;
    }
    let settings: Vec<Setting> = sweep.iter().map(|&d| Setting::Increment(d)).collect();
    let mut rows = Vec::new();
    let mut original = Vec::new();
    for w in setup.workloads()? {
        let base = setup.baseline(&w)?;
        original.push(base.report.svf);
        for s in &settings {
            let run = setup.shielded(&w, &base, s)?;
            let m = setup.metrics(&w, &base, s, &run, &run)?;
            let Setting::Increment(d) = *s else {
                unreachable!()
            };
            rows.push(SweepRow {
                benchmark: w.name.clone(),
                delta_t_c: d,
                svf: m.svf.svf,
            });
        }
    }
    write_text(&c.out.join("sweep_svf.csv"), &rows_csv(&rows)?)?;
    let per_increment: Vec<(f64, f64)> = sweep
        .iter()
        .map(|&d| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.delta_t_c == d)
                .map(|r| r.svf)
                .collect();
            (d, g_mean(&v))
        })
        .collect();
    let t_table = calibrate_t_table(&per_increment, g_mean(&original))?;
    if !t_table.calibrated {
        log::warn!("no increment lowered the SVF; writing the default level table");
    }
    write_text(&c.out.join("t_table.csv"), &t_table.to_csv())?;
    #[derive(Serialize)]
    struct Row {
        delta_t_c: f64,
        g_mean_abs_svf: f64,
    }
    let summary: Vec<Row> = per_increment
        .iter()
        .map(|&(d, s)| Row {
            delta_t_c: d,
            g_mean_abs_svf: s,
        })
        .collect();
    render(&summary, c.format)
}

fn shield(c: &Common, level: Option<usize>, sweep: bool, with_max_avg: bool) -> Result<String> {
    let setup = Setup::new(load(c)?)?;
    let controller = &setup.scenario.shield.controller;
    let mut settings = Vec::new();
    if sweep {
        settings.extend(
            setup
                .scenario
                .shield
                .sweep
                .iter()
                .map(|&d| Setting::Increment(d)),
        );
    }
    if level.is_some() || !sweep {
        settings.push(Setting::Level {
            level: level.unwrap_or(controller.security_level),
            global: controller.global_range,
        });
    }
    let mut rows: Vec<SummaryRow> = Vec::new();
    for (i, w) in setup.workloads()?.iter().enumerate() {
        let dir = c.out.join("traces").join(&w.name);
        let result = setup.evaluate_with(w, &settings, |view| {
            if view.setting == "max_avg" && !with_max_avg {
                return Ok(());
            }
            match view.run {
                None => write_trace(
                    &dir.join(format!("{}_blocks.csv", view.setting)),
                    &view.baseline.blocks,
                ),
                Some(run) => {
                    write_trace(
                        &dir.join(format!("{}_blocks.csv", view.setting)),
                        &run.observed,
                    )?;
                    write_trace(
                        &dir.join(format!("{}_generator_power.csv", view.setting)),
                        &run.generator_power,
                    )
                }
            }
        })?;
        if i == 0 {
            let base = setup.baseline(w)?;
            write_text(
                &c.out.join("heatmap.csv"),
                &heatmap_csv(&setup.heatmap(w, &base)?)?,
            )?;
        }
        rows.extend(summary_rows(&result, with_max_avg));
    }
    write_text(&c.out.join("summary.csv"), &summary_csv(&rows)?)?;
    render(&rows, c.format)
}

#[derive(Serialize)]
struct AnalysisReport {
    delay_k: usize,
    svf: SvfReport,
    m_eff: usize,
    stsf_effective: f64,
    stsf: Vec<StsfReport>,
    skipped_m: Vec<usize>,
}

fn analyze(
    inst: &Path,
    temp: &Path,
    out: &Path,
    scenario: Option<&Path>,
    format: Format,
) -> Result<String> {
    let a: AnalysisConfig = match scenario {
        Some(p) => Scenario::load(p)?.analysis,
        None => AnalysisConfig::default(),
    };
    let inst = read_trace(inst, &TraceSchema::any(Unit::Instructions))?;
    let temp = read_trace(temp, &TraceSchema::any(Unit::Celsius))?;
    let n = inst.num_samples().min(temp.num_samples());
    let windows = tiled_windows(
        a.warmup.min(n.saturating_sub(1)),
        n.saturating_sub(a.k_max),
        a.window,
        a.stride,
    );
    let (k, report) = best_delay(&inst, &temp, a.k_max, &windows)?;
    let blocks = temp.num_channels();
    let m_eff = effective_groups(&temp.channel_means(), a.epsilon);
    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    for &m in &a.stsf_m {
        if m >= 1 && m <= blocks && blocks % m == 0 {
            reports.push(stsf(blocks, m)?);
        } else {
            skipped.push(m);
        }
    }
    let result = AnalysisReport {
        delay_k: k,
        svf: report,
        m_eff,
        stsf_effective: stsf(blocks, m_eff)?.stsf,
        stsf: reports,
        skipped_m: skipped,
    };
    let mut csv_text = String::from("metric,value\n");
    writeln!(csv_text, "delay_k,{k}").unwrap();
    writeln!(csv_text, "svf,{}", result.svf.svf).unwrap();
    writeln!(csv_text, "abs_svf,{}", result.svf.abs_svf).unwrap();
    writeln!(csv_text, "num_pairs,{}", result.svf.num_pairs).unwrap();
    writeln!(csv_text, "zero_variance,{}", result.svf.zero_variance).unwrap();
    writeln!(csv_text, "m_eff,{m_eff}").unwrap();
    writeln!(csv_text, "stsf_effective,{}", result.stsf_effective).unwrap();
    for r in &result.stsf {
        writeln!(csv_text, "stsf_m{},{}", r.m, r.stsf).unwrap();
    }
    let json = to_json(&result);
    write_text(&out.join("analysis.csv"), &csv_text)?;
    write_text(&out.join("analysis.json"), &json)?;
    Ok(match format {
        Format::Csv => csv_text,
        Format::Json => json,
    })
}

#[derive(Serialize)]
struct AttackRow {
    benchmark: String,
    sensor: String,
    mode: String,
    channels: usize,
    delay_k: usize,
    svf: f64,
}

#[derive(Serialize)]
struct AttenuationRow {
    benchmark: String,
    layer: usize,
    delay_k: usize,
    svf: f64,
}

fn default_sensors(setup: &Setup) -> Vec<SensorConfig> {
    let a = &setup.scenario.analysis;
    let mut out: Vec<SensorConfig> =
        vec![
            SensorConfig::builtin("composite", Region::Blocks(setup.scenario.protected()))
                .with_noise(a.observation_noise, a.observation_quantization),
        ];
    out.push(SensorConfig::ir("ir", 0));
    out
}

fn attack(c: &Common, only: Option<&[String]>) -> Result<String> {
    let setup = Setup::new(load(c)?)?;
    let mut sensors = if setup.scenario.sensors.is_empty() {
        default_sensors(&setup)
    } else {
        setup.scenario.sensors.clone()
    };
    if let Some(ids) = only {
        for id in ids {
            if !sensors.iter().any(|s| &s.id == id) {
                return Err(Error::validation(format!("unknown sensor `{id}`")));
            }
        }
        sensors.retain(|s| ids.contains(&s.id));
    }
    let a = &setup.scenario.analysis;
    let mut rows = Vec::new();
    let mut atten = Vec::new();
    for w in setup.workloads()? {
        let base = setup.baseline(&w)?;
        for (i, sensor) in sensors.iter().enumerate() {
            let seen = observe(
                &base.cells,
                &setup.network,
                sensor,
                base.seed.wrapping_add(i as u64),
            )?;
            write_trace(
                &c.out.join(format!("observed_{}_{}.csv", w.name, sensor.id)),
                &seen,
            )?;
            let inst = if seen.sample_interval() == w.inst.sample_interval() {
                w.inst.clone()
            } else {
                crate::model::resample(&w.inst, seen.sample_interval())?
            };
            let windows = setup.windows(inst.num_samples().min(seen.num_samples()));
            let (k, report) = best_delay(&inst, &seen, a.k_max, &windows)?;
            rows.push(AttackRow {
                benchmark: w.name.clone(),
                sensor: sensor.id.clone(),
                mode: match sensor.mode {
                    SensorMode::Builtin => "builtin",
                    SensorMode::External => "external",
                    SensorMode::IrImage => "ir_image",
                }
                .into(),
                channels: seen.num_channels(),
                delay_k: k,
                svf: report.svf,
            });
        }
        if setup.scenario.attack.is_some() {
            for l in setup.attenuation(&w)? {
                atten.push(AttenuationRow {
                    benchmark: w.name.clone(),
                    layer: l.layer,
                    delay_k: l.k,
                    svf: l.report.svf,
                });
            }
        }
    }
    write_text(&c.out.join("attack_svf.csv"), &rows_csv(&rows)?)?;
    if !atten.is_empty() {
        write_text(&c.out.join("attenuation.csv"), &rows_csv(&atten)?)?;
    }
    render(&rows, c.format)
}

fn report(run_dirs: &[PathBuf], out: &Path) -> Result<String> {
    let mut rows = Vec::new();
    let mut heatmap = Vec::new();
    for dir in run_dirs {
        let path = dir.join("summary.csv");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        rows.extend(parse_summary(&text, &path)?);
        let hpath = dir.join("heatmap.csv");
        if heatmap.is_empty() && hpath.exists() {
            let text = fs::read_to_string(&hpath).map_err(|e| Error::io(&hpath, e))?;
            heatmap = parse_heatmap(&text, &hpath)?;
        }
    }
    if rows.is_empty() {
        return Err(Error::validation("run directories hold no summary rows"));
    }
    let mut all = rows.clone();
    all.extend(g_mean_rows(&rows));
    let aggregate = summary_csv(&all)?;
    write_text(&out.join("aggregate.csv"), &aggregate)?;
    let mut listing = String::from("file\naggregate.csv\n");
    for (name, svg) in render_figures(&all, &heatmap) {
        write_text(&out.join(name), &svg)?;
        listing.push_str(name);
        listing.push('\n');
    }
    Ok(listing)
}
