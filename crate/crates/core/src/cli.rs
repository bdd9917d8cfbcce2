//! Command-line front end: scenario files, single runs, capacity sweeps and price traces.
//!
//! Scenario files are TOML:
//!
//! ```toml
//! [macro]
//! capacity = 80.0
//!
//! [[small_cells]]
//! id = "s"
//! capacity = 50.0
//!
//! [[users]]
//! id = "1"
//! tier = "sue"
//! cell = "s"
//! u_req = 0.8
//! utility = { kind = "sigmoidal", a = 3.0, b = 20.0 }
//! ```
//!
//! MUEs use `tier = "mue"` and may omit `cell` (it defaults to `macro`).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::sharing::{
    run_scenario_traced, run_scenario_with, AllocationReport, CellId, Scenario, SmallCell, Tier,
    UserProfile,
};
use crate::solver::{SolverOptions, UserId};
use crate::utility::{UtilityFunction, UtilityParams};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Column order of the report CSV.
pub const REPORT_COLUMNS: [&str; 13] = [
    "sweep_value",
    "user_id",
    "tier",
    "cell_id",
    "small_cell_rate",
    "escalated",
    "macro_rate",
    "total_rate",
    "utility",
    "u_req",
    "met_requirement",
    "small_cell_price",
    "macro_price",
];

pub const TRACE_COLUMNS: [&str; 8] = [
    "sweep_value",
    "stage",
    "cell_id",
    "iteration",
    "p_lo",
    "p_hi",
    "p_mid",
    "excess_demand",
];

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("{path}: cannot read scenario: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: parse error: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}:{line}: schema violation: {message}")]
    Schema {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: {field}: {message}")]
    Invariant {
        path: String,
        line: usize,
        field: String,
        message: String,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("input error: {0}")]
    Input(String),
    #[error("{0}")]
    Engine(Error),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Engine(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Scenario(ScenarioError::Io { .. }) => EXIT_IO,
            CliError::Scenario(_) | CliError::Input(_) => EXIT_INPUT,
            CliError::Engine(Error::SolverFailure { .. }) => EXIT_SOLVER,
            CliError::Engine(_) => EXIT_INPUT,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    #[serde(rename = "macro")]
    macro_cell: RawMacro,
    #[serde(default)]
    small_cells: Vec<toml::Spanned<RawCell>>,
    #[serde(default)]
    users: Vec<toml::Spanned<RawUser>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMacro {
    capacity: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCell {
    id: String,
    capacity: f64,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RawTier {
    Sue,
    Mue,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawUser {
    id: String,
    tier: RawTier,
    cell: Option<String>,
    u_req: Option<f64>,
    utility: UtilityParams<f64>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn column_of(text: &str, offset: usize) -> usize {
    let offset = offset.min(text.len());
    offset - text[..offset].rfind('\n').map_or(0, |i| i + 1) + 1
}

/// Parses scenario text. `origin` names the source in error messages.
pub fn parse_scenario(text: &str, origin: &str) -> Result<Scenario<f64>, ScenarioError> {
    let path = origin.to_owned();
    if let Err(e) = text.parse::<toml::Table>() {
        let start = e.span().map_or(0, |s| s.start);
        return Err(ScenarioError::Parse {
            path,
            line: line_of(text, start),
            column: column_of(text, start),
            message: e.message().to_owned(),
        });
    }
    let raw: RawScenario = toml::from_str(text).map_err(|e| ScenarioError::Schema {
        path: path.clone(),
        line: line_of(text, e.span().map_or(0, |s| s.start)),
        message: e.message().to_owned(),
    })?;

    let invariant = |offset: usize, field: String, message: String| ScenarioError::Invariant {
        path: path.clone(),
        line: line_of(text, offset),
        field,
        message,
    };

    if !(raw.macro_cell.capacity > 0.0) || !raw.macro_cell.capacity.is_finite() {
        let at = text.find("[macro]").unwrap_or(0);
        return Err(invariant(
            at,
            "macro.capacity".into(),
            format!("must be positive, got {}", raw.macro_cell.capacity),
        ));
    }

    let mut cells = Vec::with_capacity(raw.small_cells.len());
    for (i, c) in raw.small_cells.iter().enumerate() {
        let at = c.span().start;
        let c = c.get_ref();
        if c.id == "macro" {
            return Err(invariant(
                at,
                format!("small_cells[{i}].id"),
                "`macro` is reserved".into(),
            ));
        }
        if cells.iter().any(|x: &SmallCell<f64>| x.id == c.id) {
            return Err(invariant(
                at,
                format!("small_cells[{i}].id"),
                format!("duplicate cell id {}", c.id),
            ));
        }
        if !(c.capacity > 0.0) || !c.capacity.is_finite() {
            return Err(invariant(
                at,
                format!("small_cells[{i}].capacity"),
                format!("must be positive, got {}", c.capacity),
            ));
        }
        cells.push(SmallCell {
            id: c.id.clone(),
            capacity: c.capacity,
        });
    }

    if raw.users.is_empty() {
        return Err(invariant(
            text.len(),
            "users".into(),
            "at least one user is required".into(),
        ));
    }
    let mut users: Vec<UserProfile<f64>> = Vec::with_capacity(raw.users.len());
    for (i, u) in raw.users.iter().enumerate() {
        let at = u.span().start;
        let u = u.get_ref();
        let field = |name: &str| format!("users[{i}].{name}");
        if users.iter().any(|x| x.user_id.0 == u.id) {
            return Err(invariant(
                at,
                field("id"),
                format!("duplicate user id {}", u.id),
            ));
        }
        let utility = UtilityFunction::from_params(u.utility)
            .map_err(|e| invariant(at, field("utility"), e.to_string()))?;
        let (tier, cell) = match u.tier {
            RawTier::Sue => {
                let Some(cell) = u.cell.as_deref() else {
                    return Err(invariant(
                        at,
                        field("cell"),
                        "SUE must name its small cell".into(),
                    ));
                };
                if !cells.iter().any(|c| c.id == cell) {
                    return Err(invariant(
                        at,
                        field("cell"),
                        format!("unknown small cell {cell}"),
                    ));
                }
                match u.u_req {
                    None => return Err(invariant(at, field("u_req"), "SUE requires u_req".into())),
                    Some(r) if !(r > 0.0 && r < 1.0) => {
                        return Err(invariant(
                            at,
                            field("u_req"),
                            format!("must lie in (0, 1), got {r}"),
                        ))
                    }
                    Some(_) => {}
                }
                (Tier::Sue, CellId::Small(cell.to_owned()))
            }
            RawTier::Mue => {
                if u.u_req.is_some() {
                    return Err(invariant(
                        at,
                        field("u_req"),
                        "MUE must not carry u_req".into(),
                    ));
                }
                match u.cell.as_deref() {
                    None | Some("macro") => {}
                    Some(other) => {
                        return Err(invariant(
                            at,
                            field("cell"),
                            format!("MUE must be served by the macro cell, got {other}"),
                        ))
                    }
                }
                (Tier::Mue, CellId::Macro)
            }
        };
        users.push(UserProfile {
            user_id: UserId(u.id.clone()),
            tier,
            cell,
            utility,
            u_req: u.u_req,
        });
    }

    Scenario::new(raw.macro_cell.capacity, cells, users)
        .map_err(|e| invariant(0, "scenario".into(), e.to_string()))
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario<f64>, ScenarioError> {
    let path = path.as_ref();
    let origin = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: origin.clone(),
        source,
    })?;
    parse_scenario(&text, &origin)
}

/// `%.9g`-style rendering: 9 significant digits, trailing zeros trimmed.
pub fn fmt_sig(x: f64) -> String {
    const DIGITS: i32 = 9;
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.*e}", (DIGITS - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if !(-5..DIGITS).contains(&exp) {
        let m = mantissa.trim_end_matches('0').trim_end_matches('.');
        format!("{m}e{exp}")
    } else {
        let decimals = (DIGITS - 1 - exp).max(0) as usize;
        let s = format!("{:.*}", decimals, x);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_owned()
        } else {
            s
        }
    }
}

fn io_err(e: impl std::fmt::Display) -> CliError {
    CliError::Io(e.to_string())
}

/// Appends the report rows (no header) to a CSV writer.
fn write_report_rows<W: std::io::Write>(
    w: &mut csv::Writer<W>,
    report: &AllocationReport<f64>,
    sweep_value: Option<f64>,
) -> Result<(), CliError> {
    let sweep = sweep_value.map(fmt_sig).unwrap_or_default();
    let macro_price = report
        .cell(&CellId::Macro)
        .filter(|c| c.users > 0)
        .map(|c| c.shadow_price);
    for u in &report.users {
        let small_price = match &u.cell {
            CellId::Small(_) => report.cell(&u.cell).map(|c| fmt_sig(c.shadow_price)),
            CellId::Macro => None,
        };
        let in_macro = u.tier == Tier::Mue || u.escalated;
        let row = [
            sweep.clone(),
            u.user_id.to_string(),
            u.tier.to_string(),
            u.cell.to_string(),
            fmt_sig(u.small_cell_rate),
            u.escalated.to_string(),
            fmt_sig(u.macro_rate),
            fmt_sig(u.total_rate),
            fmt_sig(u.utility),
            u.u_req.map(fmt_sig).unwrap_or_default(),
            u.met_requirement
                .map_or_else(|| "n/a".to_owned(), |m| m.to_string()),
            small_price.unwrap_or_default(),
            macro_price
                .filter(|_| in_macro)
                .map(fmt_sig)
                .unwrap_or_default(),
        ];
        w.write_record(&row).map_err(io_err)?;
    }
    Ok(())
}

/// Renders one or more reports as CSV with a single header.
pub fn reports_to_csv(
    reports: &[(Option<f64>, AllocationReport<f64>)],
) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_COLUMNS).map_err(io_err)?;
    for (sweep, report) in reports {
        write_report_rows(&mut w, report, *sweep)?;
    }
    let bytes = w.into_inner().map_err(io_err)?;
    String::from_utf8(bytes).map_err(io_err)
}

#[derive(Serialize)]
struct SweepPointJson<'a> {
    sweep_value: f64,
    report: &'a AllocationReport<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepTarget {
    /// One small cell, or every small cell when `None`.
    SmallCell(Option<String>),
    Macro,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub target: SweepTarget,
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl SweepSpec {
    pub fn new(target: SweepTarget, start: f64, stop: f64, step: f64) -> Result<Self, CliError> {
        if !(start > 0.0) || !(step > 0.0) || !start.is_finite() || !stop.is_finite() {
            return Err(CliError::Input(format!(
                "sweep start and step must be positive, got start={start}, step={step}"
            )));
        }
        if start > stop {
            return Err(CliError::Input(format!(
                "sweep start {start} exceeds stop {stop}"
            )));
        }
        if (stop - start) / step > 1e5 {
            return Err(CliError::Input("sweep has more than 1e5 points".into()));
        }
        Ok(Self {
            target,
            start,
            stop,
            step,
        })
    }

    /// `start + i * step` for every point not beyond `stop`.
    pub fn points(&self) -> Vec<f64> {
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|i| self.start + i as f64 * self.step).collect()
    }

    pub fn apply(&self, scenario: &Scenario<f64>, value: f64) -> Result<Scenario<f64>, CliError> {
        Ok(match &self.target {
            SweepTarget::Macro => scenario.with_macro_capacity(value)?,
            SweepTarget::SmallCell(Some(id)) => scenario.with_small_cell_capacity(id, value)?,
            SweepTarget::SmallCell(None) => {
                let mut sc = scenario.clone();
                for c in scenario.small_cells() {
                    sc = sc.with_small_cell_capacity(&c.id, value)?;
                }
                sc
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(
    name = "spectrum-share",
    version,
    about = "Two-tier utility proportional fairness allocation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct CommonArgs {
    /// Scenario file (TOML).
    pub scenario: PathBuf,
    /// Small-cell capacity override, `<cell_id>=<value>` or `<value>` for every small cell.
    #[arg(long = "rs", value_name = "CELL=RATE")]
    pub rs: Vec<String>,
    /// Macro-cell capacity override.
    #[arg(long = "rb", value_name = "RATE")]
    pub rb: Option<f64>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Capacity tolerance relative to the cell capacity.
    #[arg(long = "tol-cap", value_name = "REL")]
    pub tol_cap: Option<f64>,
    /// Reserved; the allocation is deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one scenario and write the allocation report.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Vary one capacity over a range and write one row group per point.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// `rs`, `rs=<cell_id>` or `rb`.
        #[arg(long)]
        vary: String,
        #[arg(long)]
        start: f64,
        #[arg(long)]
        stop: f64,
        #[arg(long)]
        step: f64,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Write the per-iteration shadow price bisection log of each solved cell.
    Trace {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Check a scenario file against the schema and invariants.
    Validate { scenario: PathBuf },
}

impl CommonArgs {
    fn options(&self) -> Result<SolverOptions<f64>, CliError> {
        let mut opts = SolverOptions::default();
        if let Some(t) = self.tol_cap {
            if !(t > 0.0 && t < 1.0) {
                return Err(CliError::Input(format!(
                    "--tol-cap must lie in (0, 1), got {t}"
                )));
            }
            opts.tol_cap_rel = t;
        }
        Ok(opts)
    }

    fn scenario(&self) -> Result<Scenario<f64>, CliError> {
        let mut sc = load_scenario(&self.scenario)?;
        for spec in &self.rs {
            let (cell, value) = match spec.split_once('=') {
                Some((c, v)) => (Some(c.trim()), v),
                None => (None, spec.as_str()),
            };
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| CliError::Input(format!("bad --rs value `{spec}`")))?;
            sc = SweepSpec {
                target: SweepTarget::SmallCell(cell.map(str::to_owned)),
                start: value,
                stop: value,
                step: 1.0,
            }
            .apply(&sc, value)?;
        }
        if let Some(rb) = self.rb {
            sc = sc.with_macro_capacity(rb)?;
        }
        Ok(sc)
    }
}

fn parse_vary(vary: &str) -> Result<SweepTarget, CliError> {
    match vary.split_once('=') {
        None if vary == "rb" => Ok(SweepTarget::Macro),
        None if vary == "rs" => Ok(SweepTarget::SmallCell(None)),
        Some(("rs", cell)) => Ok(SweepTarget::SmallCell(Some(cell.to_owned()))),
        _ => Err(CliError::Input(format!(
            "--vary must be `rb`, `rs` or `rs=<cell_id>`, got `{vary}`"
        ))),
    }
}

pub fn run_report(common: &CommonArgs) -> Result<AllocationReport<f64>, CliError> {
    let scenario = common.scenario()?;
    Ok(run_scenario_with(&scenario, &common.options()?)?)
}

/// Runs every sweep point; results come back in sweep order.
pub fn sweep_reports(
    scenario: &Scenario<f64>,
    spec: &SweepSpec,
    opts: &SolverOptions<f64>,
) -> Result<Vec<(f64, AllocationReport<f64>)>, CliError> {
    spec.points()
        .par_iter()
        .map(|&v| {
            let sc = spec.apply(scenario, v)?;
            Ok((v, run_scenario_with(&sc, opts)?))
        })
        .collect()
}

pub fn trace_csv(scenario: &Scenario<f64>, opts: &SolverOptions<f64>) -> Result<String, CliError> {
    let (_, traces) = run_scenario_traced(scenario, opts)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRACE_COLUMNS).map_err(io_err)?;
    for (cell, steps) in &traces {
        let stage = match cell {
            CellId::Macro => "macro",
            CellId::Small(_) => "small",
        };
        for s in steps {
            w.write_record([
                String::new(),
                stage.to_owned(),
                cell.to_string(),
                s.iteration.to_string(),
                fmt_sig(s.p_lo),
                fmt_sig(s.p_hi),
                fmt_sig(s.p_mid),
                fmt_sig(s.excess_demand),
            ])
            .map_err(io_err)?;
        }
    }
    String::from_utf8(w.into_inner().map_err(io_err)?).map_err(io_err)
}

fn emit(out: Option<&Path>, body: &str) -> Result<(), CliError> {
    match out {
        Some(path) => {
            std::fs::write(path, body).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
        }
        None => {
            use std::io::Write;
            std::io::stdout().write_all(body.as_bytes()).map_err(io_err)
        }
    }
}

/// Executes a parsed command. Output is written only after the whole computation succeeds.
pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Run { common, format } => {
            let report = run_report(common)?;
            let body = match format {
                Format::Csv => reports_to_csv(&[(None, report)])?,
                Format::Json => serde_json::to_string_pretty(&report).map_err(io_err)? + "\n",
            };
            emit(common.out.as_deref(), &body)
        }
        Command::Sweep {
            common,
            vary,
            start,
            stop,
            step,
            format,
        } => {
            let spec = SweepSpec::new(parse_vary(vary)?, *start, *stop, *step)?;
            let scenario = common.scenario()?;
            let results = sweep_reports(&scenario, &spec, &common.options()?)?;
            let body = match format {
                Format::Csv => {
                    let rows: Vec<_> = results.into_iter().map(|(v, r)| (Some(v), r)).collect();
                    reports_to_csv(&rows)?
                }
                Format::Json => {
                    let points: Vec<_> = results
                        .iter()
                        .map(|(v, r)| SweepPointJson {
                            sweep_value: *v,
                            report: r,
                        })
                        .collect();
                    serde_json::to_string_pretty(&points).map_err(io_err)? + "\n"
                }
            };
            emit(common.out.as_deref(), &body)
        }
        Command::Trace { common } => {
            let scenario = common.scenario()?;
            let body = trace_csv(&scenario, &common.options()?)?;
            emit(common.out.as_deref(), &body)
        }
        Command::Validate { scenario } => {
            let sc = load_scenario(scenario)?;
            let mut msg = String::new();
            let _ = writeln!(
                msg,
                "ok: {} small cell(s), {} user(s), macro capacity {}",
                sc.small_cells().len(),
                sc.users().len(),
                fmt_sig(sc.macro_capacity())
            );
            emit(None, &msg)
        }
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
