//! Command-line front end. Exit codes: 0 success, 1 probe failure, 2 usage.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analysis::{self, levels_from, HierarchyReport, LevelReport};
use crate::backend::{Backend, RealMemory, Simulated};
use crate::cacheprobe::{sample_points, CacheParams, CurveKind, ResponseCurve, SweepOptions};
use crate::characterize::{characterize, ProbeOptions, Probes};
use crate::error::Error;
use crate::l1probe::L1Params;
use crate::refstring::{build_cache_string, build_gap_string, build_tlb_string, MachineEnv};
use crate::sim::{simulate, SimConfig};
use crate::timing::{Stability, DEFAULT_MAX_RUNS, DEFAULT_WINDOW};
use crate::tlbprobe::TlbParams;

pub const EXIT_OK: i32 = 0;
pub const EXIT_PROBE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "memprobe", version, about = "Measure cache and TLB parameters with pointer-chasing microbenchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Lower end of the tested range (bytes; K/M/G suffixes allowed).
    #[arg(long, global = true, value_parser = parse_bytes)]
    pub lb: Option<usize>,

    /// Upper end of the tested range.
    #[arg(long, global = true, value_parser = parse_bytes)]
    pub ub: Option<usize>,

    /// Largest L1 associativity tested; a power of two.
    #[arg(long, global = true, default_value_t = L1Params::default().max_assoc)]
    pub max_assoc: usize,

    /// Runs without a new minimum before a value counts as stable.
    #[arg(long, global = true, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,

    /// Runs allowed per value before giving up.
    #[arg(long, global = true, default_value_t = DEFAULT_MAX_RUNS)]
    pub max_runs: usize,

    /// Seed for string shuffles.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// `real`, or `sim:<config.toml>`.
    #[arg(long, global = true, default_value = "real", value_parser = parse_backend)]
    pub backend: BackendSpec,

    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,

    /// Write output here instead of standard output.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Measure every sample point to stability (no knockout).
    #[arg(long, global = true)]
    pub exhaustive: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// L1 capacity, associativity, line size and latency.
    L1,
    /// Cache levels from the cache-string response curve.
    Cache,
    /// TLB levels from the TLB-string response curve.
    Tlb,
    /// Everything.
    All,
    /// Re-analyze a saved cache curve.
    Analyze { curve: PathBuf },
    /// Run strings on a simulated hierarchy without the timing discipline.
    Simulate {
        config: PathBuf,
        /// `gap:n,k,o`, `cache:bytes` or `tlb:n,bytes`. Without it, prints
        /// the cache-string curve over the range.
        #[arg(long, value_parser = parse_string_spec)]
        string: Option<StringSpec>,
        /// Timed traversals after the warm-up lap.
        #[arg(long, default_value_t = 2)]
        traversals: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Real,
    Sim(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StringSpec {
    Gap { n: usize, gap: usize, offset: usize },
    Cache { footprint: usize },
    Tlb { lines_per_page: usize, footprint: usize },
}

impl std::fmt::Display for StringSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            StringSpec::Gap { n, gap, offset } => write!(f, "gap:{n},{gap},{offset}"),
            StringSpec::Cache { footprint } => write!(f, "cache:{footprint}"),
            StringSpec::Tlb { lines_per_page, footprint } => write!(f, "tlb:{lines_per_page},{footprint}"),
        }
    }
}

pub fn parse_bytes(s: &str) -> Result<usize, String> {
    let v = parse_size::Config::new().with_binary().parse_size(s.trim()).map_err(|e| format!("{s:?}: {e}"))?;
    usize::try_from(v).map_err(|_| format!("{s:?} is too large"))
}

fn parse_backend(s: &str) -> Result<BackendSpec, String> {
    match s.split_once(':') {
        None if s == "real" => Ok(BackendSpec::Real),
        Some(("sim", path)) if !path.is_empty() => Ok(BackendSpec::Sim(PathBuf::from(path))),
        _ => Err(format!("expected `real` or `sim:<config>`, got {s:?}")),
    }
}

fn parse_string_spec(s: &str) -> Result<StringSpec, String> {
    let (kind, rest) = s.split_once(':').ok_or_else(|| format!("expected <kind>:<args>, got {s:?}"))?;
    let args: Vec<&str> = rest.split(',').collect();
    let count = |n: &str| n.trim().parse::<usize>().map_err(|e| format!("{n:?}: {e}"));
    match (kind, args.as_slice()) {
        ("gap", [n, k, o]) => Ok(StringSpec::Gap { n: count(n)?, gap: parse_bytes(k)?, offset: parse_bytes(o)? }),
        ("gap", [n, k]) => Ok(StringSpec::Gap { n: count(n)?, gap: parse_bytes(k)?, offset: 0 }),
        ("cache", [k]) => Ok(StringSpec::Cache { footprint: parse_bytes(k)? }),
        ("tlb", [n, k]) => Ok(StringSpec::Tlb { lines_per_page: count(n)?, footprint: parse_bytes(k)? }),
        _ => Err(format!("expected gap:n,k,o | cache:bytes | tlb:n,bytes, got {s:?}")),
    }
}

enum Failure {
    Usage(String),
    Probe(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Probe(e)
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Probe(e)) => {
            eprintln!("error: {e}");
            EXIT_PROBE
        }
    }
}

fn load_config(path: &Path) -> Result<SimConfig, Failure> {
    SimConfig::from_file(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn make_backend(spec: &BackendSpec) -> Result<Box<dyn Backend>, Failure> {
    Ok(match spec {
        BackendSpec::Real => Box::new(RealMemory::new()),
        BackendSpec::Sim(path) => {
            let label = format!("sim:{}", path.display());
            Box::new(Simulated::new(load_config(path)?)?.with_label(label))
        }
    })
}

fn options(cli: &Cli, pagesize: usize) -> Result<ProbeOptions, Failure> {
    let mut o = ProbeOptions {
        stability: Stability { window: cli.window, max_runs: cli.max_runs },
        sweep: SweepOptions { knockout: !cli.exhaustive },
        ..ProbeOptions::default()
    };
    if cli.window == 0 || cli.max_runs <= cli.window {
        return Err(Failure::Usage("--max-runs must exceed --window, and --window must be positive".into()));
    }
    if let Some(seed) = cli.seed {
        o.seed = seed;
    }
    o.l1.max_assoc = cli.max_assoc;
    let mut tlb = TlbParams::for_pagesize(pagesize);
    let (lower, upper) = match cli.command {
        Command::L1 => (&mut o.l1.lower, &mut o.l1.upper),
        Command::Tlb => (&mut tlb.lower, &mut tlb.upper),
        _ => (&mut o.cache.lower, &mut o.cache.upper),
    };
    *lower = cli.lb.unwrap_or(*lower);
    *upper = cli.ub.unwrap_or(*upper);
    o.tlb = Some(tlb);
    o.l1.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    tlb.validate(pagesize).map_err(|e| Failure::Usage(e.to_string()))?;
    sample_points(o.cache.lower, o.cache.upper).map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(o)
}

fn emit(cli: &Cli, text: &str) -> Result<(), Failure> {
    match &cli.out {
        Some(path) => std::fs::write(path, text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).map_err(|e| Failure::Probe(e.into()))
        }
    }
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output serialises");
    s.push('\n');
    s
}

/// One row per discovered parameter set.
pub fn summary_csv(report: &HierarchyReport) -> String {
    let mut out = String::from("kind,level,capacity_bytes,associativity,linesize_bytes,latency_cycles,entries\n");
    if let Some(l1) = &report.l1 {
        let _ = writeln!(out, "l1,1,{},{},{},{},", l1.capacity, l1.associativity, l1.linesize, l1.latency);
    }
    for l in &report.cache_levels {
        let _ = writeln!(out, "cache,{},{},,,{},", l.level, l.effective_capacity, l.latency);
    }
    for t in &report.tlb_levels {
        let _ = writeln!(out, "tlb,{},{},,,,{}", t.level, t.capacity, t.entries);
    }
    out
}

#[derive(Serialize)]
struct AnalyzeOutput {
    cache_levels: Vec<LevelReport>,
    final_latency: u32,
    dropped_levels: usize,
}

#[derive(Serialize)]
struct SimulateOutput {
    string: String,
    footprint: usize,
    cycles_per_access: f64,
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Analyze { curve } => {
            let text =
                std::fs::read_to_string(curve).map_err(|e| Failure::Usage(format!("{}: {e}", curve.display())))?;
            let curve = ResponseCurve::from_csv(&text, CurveKind::Cache)?;
            let a = analysis::analyze_curve(&curve)?;
            if a.dropped_levels > 0 {
                eprintln!("warning: {} transitions beyond the level cap were dropped", a.dropped_levels);
            }
            let levels = levels_from(&a);
            let text = match cli.format {
                Format::Json => json(&AnalyzeOutput {
                    cache_levels: levels,
                    final_latency: a.final_latency,
                    dropped_levels: a.dropped_levels,
                }),
                Format::Csv => {
                    let mut s = String::from("level,capacity_bytes,latency_cycles\n");
                    for l in levels {
                        let _ = writeln!(s, "{},{},{}", l.level, l.effective_capacity, l.latency);
                    }
                    s
                }
            };
            emit(cli, &text)
        }
        Command::Simulate { config, string, traversals } => {
            let config = load_config(config)?;
            let env = MachineEnv::new(config.pagesize, 8, config.cache_levels.first().map_or(64, |l| l.linesize))?;
            let seed = cli.seed.unwrap_or(ProbeOptions::default().seed);
            let text = match string {
                Some(spec) => {
                    let rs = match *spec {
                        StringSpec::Gap { n, gap, offset } => build_gap_string(n, gap, offset, &env)?,
                        StringSpec::Cache { footprint } => build_cache_string(footprint, &env, seed)?,
                        StringSpec::Tlb { lines_per_page, footprint } => {
                            build_tlb_string(lines_per_page, footprint, &env, seed)?
                        }
                    };
                    let t = simulate(&config, &rs, *traversals)?;
                    match cli.format {
                        Format::Json => json(&SimulateOutput {
                            string: spec.to_string(),
                            footprint: rs.footprint(),
                            cycles_per_access: t,
                        }),
                        Format::Csv => {
                            format!("string,footprint_bytes,cycles_per_access\n{spec},{},{t}\n", rs.footprint())
                        }
                    }
                }
                None => {
                    let defaults = CacheParams::default();
                    let lower = cli.lb.unwrap_or(defaults.lower);
                    let upper = cli.ub.unwrap_or(defaults.upper);
                    let points = sample_points(lower, upper).map_err(|e| Failure::Usage(e.to_string()))?;
                    let mut curve =
                        ResponseCurve { points: Vec::new(), kind: CurveKind::Cache, total_string_runs: 0, cost: 0.0 };
                    for fp in points {
                        let rs = build_cache_string(fp, &env, seed)?;
                        let mut p = crate::cacheprobe::SamplePoint::new(fp);
                        p.min_cycles = simulate(&config, &rs, *traversals)?;
                        p.runs = 1;
                        curve.points.push(p);
                        curve.total_string_runs += 1;
                    }
                    match cli.format {
                        Format::Json => json(&curve),
                        Format::Csv => curve.to_csv(),
                    }
                }
            };
            emit(cli, &text)
        }
        Command::L1 | Command::Cache | Command::Tlb | Command::All => {
            let probes = match cli.command {
                Command::L1 => Probes::L1,
                Command::Cache => Probes::CACHE,
                Command::Tlb => Probes::TLB,
                _ => Probes::ALL,
            };
            let mut backend = make_backend(&cli.backend)?;
            let opts = options(cli, backend.env().pagesize)?;
            let c = characterize(backend.as_mut(), &opts, probes)?;
            for w in &c.report.warnings {
                eprintln!("warning: {w}");
            }
            let text = match (cli.format, &cli.command) {
                (Format::Json, _) => json(&c.report),
                (Format::Csv, Command::Cache) => c.cache_curve.as_ref().map(ResponseCurve::to_csv).unwrap_or_default(),
                (Format::Csv, Command::Tlb) => c.tlb.as_ref().map(|t| t.curve.to_csv()).unwrap_or_default(),
                (Format::Csv, _) => summary_csv(&c.report),
            };
            emit(cli, &text)
        }
    }
}
