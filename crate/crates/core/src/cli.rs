//! The `rldc` command line: calibrate, design, simulate, verify, report.
//!
//! Every subcommand reads one JSON run configuration (see [`crate::config`])
//! and works under the configured output directory:
//!
//! ```text
//! out/
//!   config_echo.json        effective configuration, absolute paths
//!   market_model.json       resolved price model on the contract window
//!   price_fit.json          price-fit diagnostics (calibrating sources only)
//!   load_fit.json           demand-noise fit diagnostics (when configured)
//!   design_manifest.json    variant table, certificates, dedup statistics
//!   contracts/<label>/      policy bundle: contract.json + valuegrid.bin
//!   sim_manifest.json       noise and option bookkeeping for exact replay
//!   sim/<label>_summaries.csv        per-path payoff and budget summaries
//!   sim/<label>_paths.csv            step-by-step records of sampled paths
//!   sim/<agent>_baseline_summaries.csv, ..._baseline_paths.csv
//!   verify/<label>_report.json|csv   per-variant verification reports
//!   verify/sweep.csv        one row per variant, for budget-cap sweeps
//! ```
//!
//! Every artifact is regenerable from `config_echo.json` plus the seed;
//! `--check` recomputes a command's artifacts and diffs them against the
//! directory instead of writing (timestamps and wall times are ignored,
//! everything else must match exactly). `--dry-run` validates the
//! configuration, prints what would run, and touches nothing.
//!
//! Exit codes: 0 ok, 1 validation or parse failure, 2 numerical failure,
//! 3 verification failure (a guarantee check or `--check` diff failed).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::calibrate::{CalibrationResult, PriceUnit};
use crate::config::{MarketSource, RunConfig, TermsSource, CONFIG_ECHO_FILE};
use crate::contract::{
    design_menu, distinct_solve_count, load_bundle, save_bundle, Contract, MenuFailure,
};
use crate::error::{CoreError, Result};
use crate::hjb::{solve_baseline_hjb, GridSpec};
use crate::models::{AgentSpec, ContractTerms, MarketModel, Series, TimeGrid};
use crate::simulate::{
    simulate_closed_loop, NoiseSource, PathRecord, PathSummary, SimOptions, TrajectoryBundle,
};
use crate::verify::{
    compare_to_baseline, verify_conditions, Tolerances, VerificationReport, REPORT_CSV_HEADER,
};

pub const MARKET_MODEL_FILE: &str = "market_model.json";
pub const PRICE_FIT_FILE: &str = "price_fit.json";
pub const LOAD_FIT_FILE: &str = "load_fit.json";
pub const DESIGN_MANIFEST_FILE: &str = "design_manifest.json";
pub const SIM_MANIFEST_FILE: &str = "sim_manifest.json";
pub const CONTRACTS_DIR: &str = "contracts";
pub const SIM_DIR: &str = "sim";
pub const VERIFY_DIR: &str = "verify";
pub const SWEEP_FILE: &str = "verify/sweep.csv";

const SUMMARY_CSV_HEADER: &str = "path,agent_payoff,principal_payoff,compensation,\
budget_terminal,budget_terminal_raw,gamma_dw_sum,gamma_sq_dt_sum,w_min,w_max,x_min,x_max";

const PATHS_CSV_HEADER: &str =
    "path,t,w,price,x,u,y,v,gamma_w,gamma_d,zeta_w,zeta_d,dw_price,dw_demand";

const SWEEP_CSV_HEADER: &str = "label,agent,share,b,s_cap,rho,mean_agent_payoff,\
var_agent_payoff,mean_principal_payoff,var_principal_payoff,var_principal_baseline,\
risk_reduction_pct,mean_delta,principal_ce,participation_pass,risk_pass,budget_pass,all_pass";

/// Design, simulate, and verify risk-limiting load-control contracts.
#[derive(Debug, Parser)]
#[command(name = "rldc", version, arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the price and demand-noise models from the configured CSVs
    Calibrate(RunArgs),
    /// Solve the dynamic program and persist one policy bundle per contract
    Design(RunArgs),
    /// Run contracted and baseline closed loops under common random numbers
    Simulate(RunArgs),
    /// Check simulated payoffs against the contracted guarantees
    Verify(RunArgs),
    /// Print a summary table of designed and verified contracts
    Report(RunArgs),
}

impl Command {
    pub fn args(&self) -> &RunArgs {
        match self {
            Command::Calibrate(a)
            | Command::Design(a)
            | Command::Simulate(a)
            | Command::Verify(a)
            | Command::Report(a) => a,
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration file (JSON)
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,

    /// Worker threads for solves and simulation (0 = one per core)
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub jobs: usize,

    /// Override the configured root seed
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,

    /// Override grid node counts, e.g. 21x21x15
    #[arg(long, value_name = "WxXxY")]
    pub grid: Option<String>,

    /// Override loading-mesh point counts, e.g. 9x5
    #[arg(long, value_name = "GxZ")]
    pub mesh: Option<String>,

    /// Override the Monte-Carlo path count
    #[arg(long, value_name = "N")]
    pub paths: Option<usize>,

    /// Override how many paths are recorded step by step
    #[arg(long, value_name = "N")]
    pub max_export: Option<usize>,

    /// Override the price CSV unit (usd_per_kwh | usd_per_mwh)
    #[arg(long, value_name = "UNIT")]
    pub unit: Option<String>,

    /// Validate the configuration, print what would run, write nothing
    #[arg(long)]
    pub dry_run: bool,

    /// Recompute this command's artifacts and diff them against the
    /// output directory instead of writing
    #[arg(long)]
    pub check: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    let args = cli.command.args();
    let mut cfg = RunConfig::load(&args.config)?;
    apply_overrides(&mut cfg, args)?;
    match &cli.command {
        Command::Calibrate(a) => cmd_calibrate(&cfg, a),
        Command::Design(a) => cmd_design(&cfg, a),
        Command::Simulate(a) => cmd_simulate(&cfg, a),
        Command::Verify(a) => cmd_verify(&cfg, a),
        Command::Report(a) => cmd_report(&cfg, a),
    }
}

/// Fold command-line overrides into the loaded configuration, so the
/// echoed config is the one that actually ran.
fn apply_overrides(cfg: &mut RunConfig, args: &RunArgs) -> Result<()> {
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(p) = args.paths {
        cfg.simulation.paths = p;
    }
    if let Some(m) = args.max_export {
        cfg.simulation.max_export = m;
    }
    if let Some(spec) = &args.grid {
        cfg.solver.nodes = Some(parse_nodes(spec)?);
    }
    if let Some(spec) = &args.mesh {
        let [g, z] = parse_mesh(spec)?;
        cfg.solver.gamma_points = Some(g);
        cfg.solver.zeta_points = Some(z);
    }
    if let Some(unit) = &args.unit {
        let unit: PriceUnit = unit.parse()?;
        match &mut cfg.market {
            MarketSource::Calibrate { unit: u, .. } => *u = unit,
            _ => {
                return Err(CoreError::validation(
                    "--unit only applies when the market source calibrates from a price CSV",
                ))
            }
        }
    }
    cfg.validate()
}

fn parse_nodes(spec: &str) -> Result<[usize; 3]> {
    let err =
        || CoreError::validation(format!("--grid wants node counts like 21x21x15, got '{spec}'"));
    let parts: Vec<&str> = spec.split(['x', 'X']).collect();
    if parts.len() != 3 {
        return Err(err());
    }
    let mut out = [0usize; 3];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part.trim().parse().map_err(|_| err())?;
    }
    Ok(out)
}

fn parse_mesh(spec: &str) -> Result<[usize; 2]> {
    let err =
        || CoreError::validation(format!("--mesh wants point counts like 9x5, got '{spec}'"));
    let parts: Vec<&str> = spec.split(['x', 'X']).collect();
    if parts.len() != 2 {
        return Err(err());
    }
    let mut out = [0usize; 2];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part.trim().parse().map_err(|_| err())?;
    }
    Ok(out)
}

/// Run `f` on a dedicated pool of `jobs` threads, or on the global pool
/// when `jobs` is 0. Results are bit-identical either way; the pool only
/// changes how long it takes.
fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if jobs == 0 {
        return f();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CoreError::validation(format!("cannot build a {jobs}-thread pool: {e}")))?
        .install(f)
}

// ---------------------------------------------------------------------------
// Artifact plumbing
// ---------------------------------------------------------------------------

/// JSON keys whose values record when a run happened rather than what it
/// computed; `--check` ignores them.
const VOLATILE_JSON_KEYS: [&str; 2] = ["designed_at_unix_ms", "elapsed_ms"];

/// Writes artifacts under one root, or — in check mode — recomputes them
/// and compares against what is already on disk without touching anything.
/// JSON artifacts are compared value-wise with volatile keys dropped;
/// everything else byte-wise.
struct ArtifactSink {
    root: PathBuf,
    check: bool,
    files: usize,
    mismatches: Vec<String>,
}

impl ArtifactSink {
    fn new(root: &Path, check: bool) -> Result<ArtifactSink> {
        if !check {
            std::fs::create_dir_all(root).map_err(|e| CoreError::io(root, e))?;
        }
        Ok(ArtifactSink {
            root: root.to_path_buf(),
            check,
            files: 0,
            mismatches: Vec::new(),
        })
    }

    fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        self.files += 1;
        let path = self.root.join(rel);
        if self.check {
            match std::fs::read(&path) {
                Ok(existing) if existing == bytes => {}
                Ok(_) => self.mismatches.push(format!("{rel}: contents differ")),
                Err(e) => self.mismatches.push(format!("{rel}: unreadable ({e})")),
            }
            return Ok(());
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| CoreError::io(&path, e))
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| CoreError::validation(format!("{rel}: serialization failed: {e}")))?;
        text.push('\n');
        if !self.check {
            return self.write_bytes(rel, text.as_bytes());
        }
        self.files += 1;
        let path = self.root.join(rel);
        let fresh: serde_json::Value = serde_json::from_str(&text).expect("just serialized");
        match std::fs::read_to_string(&path) {
            Ok(t) => match serde_json::from_str::<serde_json::Value>(&t) {
                Ok(old) => {
                    if strip_volatile(old) != strip_volatile(fresh) {
                        self.mismatches.push(format!("{rel}: contents differ"));
                    }
                }
                Err(e) => self.mismatches.push(format!("{rel}: not valid JSON ({e})")),
            },
            Err(e) => self.mismatches.push(format!("{rel}: unreadable ({e})")),
        }
        Ok(())
    }

    /// Persist (or, in check mode, diff) one contract bundle directory.
    fn write_bundle(&mut self, rel_dir: &str, contract: &Contract) -> Result<()> {
        self.files += 2; // manifest + value grid
        let dir = self.root.join(rel_dir);
        if self.check {
            match load_bundle(&dir) {
                Ok(old) => self.mismatches.extend(bundle_mismatches(rel_dir, contract, &old)),
                Err(e) => self.mismatches.push(format!("{rel_dir}: unreadable bundle ({e})")),
            }
            return Ok(());
        }
        save_bundle(contract, &dir)
    }

    /// In check mode, report the verdict: `Ok` when every recomputed
    /// artifact matched, an error listing what differed otherwise.
    fn finish(&mut self) -> Result<()> {
        if !self.check {
            return Ok(());
        }
        if self.mismatches.is_empty() {
            println!("check: all {} artifacts match a fresh run", self.files);
            return Ok(());
        }
        for m in &self.mismatches {
            eprintln!("check: {m}");
        }
        Err(CoreError::verification(format!(
            "{} of {} artifacts differ from a fresh run",
            self.mismatches.len(),
            self.files
        )))
    }
}

/// Drop run-time-stamped keys everywhere in a JSON tree.
fn strip_volatile(v: serde_json::Value) -> serde_json::Value {
    match v {
        serde_json::Value::Object(map) => serde_json::Value::Object(
            map.into_iter()
                .filter(|(k, _)| !VOLATILE_JSON_KEYS.contains(&k.as_str()))
                .map(|(k, v)| (k, strip_volatile(v)))
                .collect(),
        ),
        serde_json::Value::Array(items) => {
            serde_json::Value::Array(items.into_iter().map(strip_volatile).collect())
        }
        other => other,
    }
}

/// Field-by-field bundle comparison, ignoring the design timestamp. The
/// on-disk binary round-trips exactly, so value-grid equality here is
/// byte equality of `valuegrid.bin`.
fn bundle_mismatches(rel: &str, fresh: &Contract, old: &Contract) -> Vec<String> {
    let mut out = Vec::new();
    let mut diff = |what: &str, differs: bool| {
        if differs {
            out.push(format!("{rel}: {what} differs"));
        }
    };
    diff("agent id", old.agent_id != fresh.agent_id);
    diff("terms", old.terms != fresh.terms);
    diff("risk aversion", old.theta != fresh.theta);
    diff("fingerprints", old.fingerprints != fresh.fingerprints);
    diff("certificate", old.certificate != fresh.certificate);
    diff("certificate note", old.certificate_note != fresh.certificate_note);
    diff("value grid", *old.policy.vg != *fresh.policy.vg);
    diff("agent spec", old.policy.agent != fresh.policy.agent);
    diff("market model", old.policy.market != fresh.policy.market);
    out
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| CoreError::Parse { path: path.to_path_buf(), message: e.to_string() })
}

fn require_manifest<T: serde::de::DeserializeOwned>(path: &Path, produced_by: &str) -> Result<T> {
    if !path.exists() {
        return Err(CoreError::validation(format!(
            "{} not found; run `rldc {produced_by}` first",
            path.display()
        )));
    }
    read_json(path)
}

fn series_range(s: &Series) -> (f64, f64) {
    let lo = s.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = s.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

fn unit_name(u: PriceUnit) -> &'static str {
    match u {
        PriceUnit::UsdPerKwh => "usd_per_kwh",
        PriceUnit::UsdPerMwh => "usd_per_mwh",
    }
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

/// Baseline optimum recorded when terms are derived from it.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct BaselineTermsRecord {
    agent_id: String,
    expected_payoff: f64,
    payoff_variance: f64,
}

/// One designed contract variant as recorded in `design_manifest.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DesignRecord {
    label: String,
    agent_id: String,
    #[serde(default)]
    share: Option<f64>,
    terms: ContractTerms,
    bundle_dir: String,
    #[serde(default)]
    rho: Option<f64>,
    #[serde(default)]
    exact_instance: Option<bool>,
    #[serde(default)]
    certificate_note: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DesignManifest {
    theta: f64,
    time: TimeGrid,
    grid: GridSpec,
    control_levels: Vec<f64>,
    gamma_pairs: usize,
    /// Truncation bound of the gamma mesh; optimal loadings outside it
    /// are unreachable, so reports must read it alongside the results.
    gamma_max: f64,
    zeta_pairs: usize,
    zeta_max: f64,
    distinct_solves: usize,
    cache_hits: usize,
    elapsed_ms: u64,
    #[serde(default)]
    baseline_terms: Vec<BaselineTermsRecord>,
    variants: Vec<DesignRecord>,
    #[serde(default)]
    failures: Vec<MenuFailure>,
}

/// One simulated variant as recorded in `sim_manifest.json`: everything
/// needed to rebuild the trajectory bundles exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SimVariantRecord {
    label: String,
    agent_id: String,
    #[serde(default)]
    share: Option<f64>,
    terms: ContractTerms,
    bundle_dir: String,
    noise: NoiseSource,
    contract_options: SimOptions,
    baseline_options: SimOptions,
    summaries_csv: String,
    paths_csv: String,
    baseline_summaries_csv: String,
    baseline_paths_csv: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SimManifest {
    seed: u64,
    n_paths: usize,
    max_export: usize,
    time: TimeGrid,
    variants: Vec<SimVariantRecord>,
}

// ---------------------------------------------------------------------------
// Variant planning
// ---------------------------------------------------------------------------

/// One contract to design: an agent with resolved terms, plus where it
/// came from.
#[derive(Debug, Clone)]
struct PlannedVariant {
    label: String,
    agent: AgentSpec,
    base_id: String,
    share: Option<f64>,
}

fn share_label(agent_id: &str, share: f64) -> String {
    format!("{agent_id}-s{:03}", (share * 1000.0).round() as u64)
}

/// Expand the configured terms policy into concrete variants. Baseline
/// shares call the no-contract solver once per agent to anchor the terms.
fn plan_variants(
    cfg: &RunConfig,
    market: &MarketModel,
    base_agents: &[AgentSpec],
) -> Result<(Vec<PlannedVariant>, Vec<BaselineTermsRecord>)> {
    match &cfg.terms {
        TermsSource::Explicit => {
            let variants = base_agents
                .iter()
                .map(|a| PlannedVariant {
                    label: a.id.clone(),
                    agent: a.clone(),
                    base_id: a.id.clone(),
                    share: None,
                })
                .collect();
            Ok((variants, Vec::new()))
        }
        TermsSource::BaselineShares { shares } => {
            let mut unique = Vec::new();
            for &s in shares {
                if !unique.contains(&s) {
                    unique.push(s);
                }
            }
            if unique.len() < shares.len() {
                println!("note: dropped {} duplicate share value(s)", shares.len() - unique.len());
            }
            let grid = cfg.solver.envelope_grid(base_agents, market)?;
            let mut variants = Vec::new();
            let mut records = Vec::new();
            for agent in base_agents {
                let sol = solve_baseline_hjb(agent, &grid)?;
                println!(
                    "{}: baseline expected payoff {:.6}, payoff variance {:.6}",
                    agent.id, sol.b_bar, sol.s_bar
                );
                records.push(BaselineTermsRecord {
                    agent_id: agent.id.clone(),
                    expected_payoff: sol.b_bar,
                    payoff_variance: sol.s_bar,
                });
                for &share in &unique {
                    let label = share_label(&agent.id, share);
                    if variants.iter().any(|v: &PlannedVariant| v.label == label) {
                        return Err(CoreError::validation(format!(
                            "shares {:?} collide at label '{label}'; keep shares at least \
                             0.001 apart",
                            unique
                        )));
                    }
                    let mut variant_agent = agent.clone();
                    variant_agent.id = label.clone();
                    variant_agent.terms =
                        ContractTerms { b: sol.b_bar, s_cap: share * sol.s_bar };
                    variants.push(PlannedVariant {
                        label,
                        agent: variant_agent,
                        base_id: agent.id.clone(),
                        share: Some(share),
                    });
                }
            }
            Ok((variants, records))
        }
    }
}

// ---------------------------------------------------------------------------
// calibrate
// ---------------------------------------------------------------------------

fn cmd_calibrate(cfg: &RunConfig, args: &RunArgs) -> Result<()> {
    if args.dry_run {
        match &cfg.market {
            MarketSource::Inline { .. } => println!("market: inline parameters, nothing to fit"),
            MarketSource::Calibrate { price_csv, unit, seasonal_bins, .. } => println!(
                "market: fit from {} ({}, {} time-of-day bins)",
                cfg.resolve_path(price_csv).display(),
                unit_name(*unit),
                seasonal_bins
            ),
            MarketSource::File { path } => {
                println!("market: read from {}", cfg.resolve_path(path).display())
            }
        }
        match &cfg.consumption_csv {
            Some(p) => println!("demand noise: fit from {}", cfg.resolve_path(p).display()),
            None => println!("demand noise: per-agent load_sigma profiles, nothing to fit"),
        }
        println!("dry run: nothing written");
        return Ok(());
    }

    let out = cfg.resolve_path(&cfg.output_dir);
    let mut sink = ArtifactSink::new(&out, args.check)?;
    sink.write_json(CONFIG_ECHO_FILE, &cfg.canonicalized())?;

    let (market, price_fit) = cfg.resolve_market()?;
    sink.write_json(MARKET_MODEL_FILE, &market)?;
    if let Some(fit) = &price_fit {
        if let CalibrationResult::PriceModel { r0, r0_se, nu, sigma0, log_likelihood, .. } = fit {
            let (nu_lo, nu_hi) = series_range(nu);
            let (s_lo, s_hi) = series_range(sigma0);
            println!(
                "price model: r0 = {r0:.4} +/- {r0_se:.4} per hour, nu in [{nu_lo:.4}, \
                 {nu_hi:.4}], sigma0 in [{s_lo:.4}, {s_hi:.4}], log-likelihood {log_likelihood:.2}"
            );
        }
        sink.write_json(PRICE_FIT_FILE, fit)?;
    } else {
        println!(
            "market: resolved without fitting (lambda0 = {:.6} $/kWh, r0 = {:.4} per hour)",
            market.lambda0, market.r0
        );
    }

    let load_fit = cfg.resolve_load_sigma()?;
    match &load_fit {
        Some((sigma, fit)) => {
            let (lo, hi) = series_range(sigma);
            println!(
                "demand noise: sigma_tilde in [{lo:.4}, {hi:.4}] on the window, \
                 log-likelihood {:.2}",
                fit.log_likelihood()
            );
            sink.write_json(LOAD_FIT_FILE, fit)?;
        }
        None => println!("demand noise: taken from per-agent load_sigma profiles"),
    }

    // surface agents whose noise scale would be unresolvable at design time
    cfg.resolve_agents(load_fit.as_ref().map(|(s, _)| s))?;

    println!("wrote {} artifacts under {}", sink.files, out.display());
    sink.finish()
}

// ---------------------------------------------------------------------------
// design
// ---------------------------------------------------------------------------

fn cmd_design(cfg: &RunConfig, args: &RunArgs) -> Result<()> {
    let (market, price_fit) = cfg.resolve_market()?;
    let load_fit = cfg.resolve_load_sigma()?;
    let base_agents = cfg.resolve_agents(load_fit.as_ref().map(|(s, _)| s))?;

    if args.dry_run {
        return design_dry_run(cfg, &market, &base_agents);
    }

    let out = cfg.resolve_path(&cfg.output_dir);
    let mut sink = ArtifactSink::new(&out, args.check)?;
    sink.write_json(CONFIG_ECHO_FILE, &cfg.canonicalized())?;
    sink.write_json(MARKET_MODEL_FILE, &market)?;
    if let Some(fit) = &price_fit {
        sink.write_json(PRICE_FIT_FILE, fit)?;
    }
    if let Some((_, fit)) = &load_fit {
        sink.write_json(LOAD_FIT_FILE, fit)?;
    }

    let started = Instant::now();
    let (variants, baseline_terms) = plan_variants(cfg, &market, &base_agents)?;
    let agents: Vec<AgentSpec> = variants.iter().map(|v| v.agent.clone()).collect();
    let grid = cfg.solver.envelope_grid(&agents, &market)?;
    let mesh = cfg.solver.shared_mesh(&agents, &grid)?;
    println!(
        "loading meshes truncated at gamma {:.6}, zeta {:.6} ({} and {} pairs)",
        mesh.gamma_max,
        mesh.zeta_max,
        mesh.gamma.len(),
        mesh.zeta.len()
    );

    let mut menu: Vec<ContractTerms> = agents.iter().map(|a| a.terms).collect();
    menu.sort_by(|p, q| p.b.total_cmp(&q.b).then(p.s_cap.total_cmp(&q.s_cap)));
    menu.dedup();

    let outcome = design_menu(&agents, &menu, &market, cfg.theta, &grid, &mesh, args.jobs)?;
    let elapsed = started.elapsed();

    let by_id: BTreeMap<&str, &Contract> =
        outcome.contracts.iter().map(|c| (c.agent_id.as_str(), c)).collect();
    let mut records = Vec::new();
    for v in &variants {
        let Some(contract) = by_id.get(v.label.as_str()) else {
            continue; // recorded under failures
        };
        let bundle_dir = format!("{CONTRACTS_DIR}/{}", v.label);
        sink.write_bundle(&bundle_dir, contract)?;
        let (rho, exact) = match &contract.certificate {
            Some(c) => (Some(c.rho), Some(c.exact_instance)),
            None => (None, None),
        };
        match (rho, &contract.certificate_note) {
            (Some(r), _) => println!(
                "{}: b = {:.6}, s_cap = {:.6}, rho = {:.4}{}",
                v.label,
                v.agent.terms.b,
                v.agent.terms.s_cap,
                r,
                if exact == Some(true) { " (exact instance)" } else { "" }
            ),
            (None, Some(note)) => println!(
                "{}: b = {:.6}, s_cap = {:.6}, no certificate ({note})",
                v.label, v.agent.terms.b, v.agent.terms.s_cap
            ),
            (None, None) => println!(
                "{}: b = {:.6}, s_cap = {:.6}",
                v.label, v.agent.terms.b, v.agent.terms.s_cap
            ),
        }
        records.push(DesignRecord {
            label: v.label.clone(),
            agent_id: v.base_id.clone(),
            share: v.share,
            terms: v.agent.terms,
            bundle_dir,
            rho,
            exact_instance: exact,
            certificate_note: contract.certificate_note.clone(),
        });
    }

    for f in &outcome.failures {
        eprintln!("design failed for {}: {}", f.agent_id, f.message);
    }

    let manifest = DesignManifest {
        theta: cfg.theta,
        time: cfg.time,
        grid: grid.clone(),
        control_levels: mesh.u_levels.clone(),
        gamma_pairs: mesh.gamma.len(),
        gamma_max: mesh.gamma_max,
        zeta_pairs: mesh.zeta.len(),
        zeta_max: mesh.zeta_max,
        distinct_solves: outcome.distinct_solves,
        cache_hits: outcome.cache_hits,
        elapsed_ms: elapsed.as_millis() as u64,
        baseline_terms,
        variants: records,
        failures: outcome.failures.clone(),
    };
    sink.write_json(DESIGN_MANIFEST_FILE, &manifest)?;

    println!(
        "designed {} of {} variants in {:.2} s ({} distinct solves, {} cache hits)",
        manifest.variants.len(),
        variants.len(),
        elapsed.as_secs_f64(),
        outcome.distinct_solves,
        outcome.cache_hits
    );
    sink.finish()?;
    if !outcome.failures.is_empty() {
        return Err(CoreError::validation(format!(
            "{} of {} contract designs failed; see {DESIGN_MANIFEST_FILE}",
            outcome.failures.len(),
            variants.len()
        )));
    }
    Ok(())
}

fn design_dry_run(cfg: &RunConfig, market: &MarketModel, base_agents: &[AgentSpec]) -> Result<()> {
    let grid = cfg.solver.envelope_grid(base_agents, market)?;
    let mesh = cfg.solver.shared_mesh(base_agents, &grid)?;
    let slices = cfg.time.n_steps() + 1;
    let nodes = grid.w.n * grid.x.n * grid.y.n;
    let table_mib = (slices * nodes * 8) as f64 / (1024.0 * 1024.0);

    let (variant_count, distinct, y_note) = match &cfg.terms {
        TermsSource::Explicit => {
            (base_agents.len(), distinct_solve_count(base_agents), String::new())
        }
        TermsSource::BaselineShares { shares } => {
            let mut unique: Vec<f64> = Vec::new();
            for &s in shares {
                if !unique.contains(&s) {
                    unique.push(s);
                }
            }
            let zero_classes =
                unique.iter().map(|s| *s == 0.0).collect::<std::collections::BTreeSet<_>>().len();
            (
                base_agents.len() * unique.len(),
                base_agents.len() * zero_classes,
                "; budget axis extent pends the baseline solves".to_string(),
            )
        }
    };

    println!(
        "configuration valid: {} agent(s), {} variant(s)",
        base_agents.len(),
        variant_count
    );
    println!(
        "window: [{}, {}] h, dt {} h, {} steps",
        cfg.time.t0,
        cfg.time.t1,
        cfg.time.dt,
        cfg.time.n_steps()
    );
    println!(
        "grid: w {} nodes [{:.4}, {:.4}], x {} [{:.2}, {:.2}], y {} [{:.6}, {:.6}]{y_note}",
        grid.w.n, grid.w.min, grid.w.max, grid.x.n, grid.x.min, grid.x.max, grid.y.n, grid.y.min,
        grid.y.max
    );
    println!(
        "mesh: {} control levels, {} gamma pairs (bound {:.4}), {} zeta pairs (bound {:.6})",
        mesh.u_levels.len(),
        mesh.gamma.len(),
        mesh.gamma_max,
        mesh.zeta.len(),
        mesh.zeta_max
    );
    println!(
        "solves: up to {distinct} distinct dynamic programs, value table ~{table_mib:.1} MiB each"
    );
    println!("dry run: nothing solved, nothing written");
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn summaries_to_csv(rows: &[PathSummary]) -> String {
    let mut text = String::from(SUMMARY_CSV_HEADER);
    text.push('\n');
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            i,
            r.agent_payoff,
            r.principal_payoff,
            r.compensation,
            r.budget_terminal,
            r.budget_terminal_raw,
            r.gamma_dw_sum,
            r.gamma_sq_dt_sum,
            r.w_min,
            r.w_max,
            r.x_min,
            r.x_max
        );
    }
    text
}

fn summaries_from_csv(path: &Path) -> Result<Vec<PathSummary>> {
    let parse_err = |line: usize, msg: String| CoreError::Parse {
        path: path.to_path_buf(),
        message: format!("line {line}: {msg}"),
    };
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == SUMMARY_CSV_HEADER => {}
        Some((_, h)) => {
            return Err(parse_err(1, format!("unexpected header '{h}'")));
        }
        None => return Err(parse_err(1, "empty file".into())),
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 12 {
            return Err(parse_err(lineno, format!("expected 12 columns, got {}", cells.len())));
        }
        let field = |i: usize| -> Result<f64> {
            cells[i]
                .parse::<f64>()
                .map_err(|_| parse_err(lineno, format!("bad number '{}'", cells[i])))
        };
        out.push(PathSummary {
            agent_payoff: field(1)?,
            principal_payoff: field(2)?,
            compensation: field(3)?,
            budget_terminal: field(4)?,
            budget_terminal_raw: field(5)?,
            gamma_dw_sum: field(6)?,
            gamma_sq_dt_sum: field(7)?,
            w_min: field(8)?,
            w_max: field(9)?,
            x_min: field(10)?,
            x_max: field(11)?,
        });
    }
    Ok(out)
}

/// Step-by-step records of the exported paths, one row per step plus a
/// terminal row (control and noise cells empty there).
fn paths_to_csv(paths: &[PathRecord]) -> String {
    let mut text = String::from(PATHS_CSV_HEADER);
    text.push('\n');
    for p in paths {
        for s in &p.steps {
            let _ = writeln!(
                text,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                p.index,
                s.t,
                s.w,
                s.w.exp(),
                s.x,
                s.u,
                s.y,
                s.v,
                s.gamma[0],
                s.gamma[1],
                s.zeta[0],
                s.zeta[1],
                s.dw0,
                s.dwi
            );
        }
        let t = &p.terminal;
        let _ = writeln!(
            text,
            "{},{},{},{},{},,{},{},,,,,,",
            p.index,
            t.t,
            t.w,
            t.w.exp(),
            t.x,
            t.y,
            t.v
        );
    }
    text
}

fn cmd_simulate(cfg: &RunConfig, args: &RunArgs) -> Result<()> {
    if cfg.simulation.paths == 0 {
        return Err(CoreError::validation("path count must be at least 1, got 0"));
    }

    let out = cfg.resolve_path(&cfg.output_dir);
    let design: DesignManifest = require_manifest(&out.join(DESIGN_MANIFEST_FILE), "design")?;
    if design.variants.is_empty() {
        return Err(CoreError::validation(
            "the design manifest lists no successful contracts to simulate",
        ));
    }

    if args.dry_run {
        println!(
            "would simulate {} variant(s) x {} paths x {} steps, exporting {} full paths each",
            design.variants.len(),
            cfg.simulation.paths,
            cfg.time.n_steps(),
            cfg.simulation.max_export.min(cfg.simulation.paths)
        );
        println!("dry run: nothing written");
        return Ok(());
    }

    let mut sink = ArtifactSink::new(&out, args.check)?;
    sink.write_json(CONFIG_ECHO_FILE, &cfg.canonicalized())?;

    // base-agent order fixes the noise stream layout, so every variant of
    // one agent (and its baseline) shares the same random numbers
    let stream_of = |agent_id: &str| -> Result<u64> {
        cfg.agents
            .iter()
            .position(|a| a.id == agent_id)
            .map(|i| (i as u64) << 32)
            .ok_or_else(|| {
                CoreError::validation(format!(
                    "design manifest names agent '{agent_id}' which the config does not list"
                ))
            })
    };

    let n_paths = cfg.simulation.paths;
    let max_export = cfg.simulation.max_export;
    let contract_options = SimOptions::default();
    let baseline_options = SimOptions { pay_compensation: false, ..SimOptions::default() };

    let mut baselines: BTreeMap<String, TrajectoryBundle> = BTreeMap::new();
    let mut manifest_rows = Vec::new();

    with_pool(args.jobs, || {
        for rec in &design.variants {
            let contract = load_bundle(&out.join(&rec.bundle_dir))?;
            let agent = &contract.policy.agent;
            let market = contract.policy.market.as_ref().ok_or_else(|| {
                CoreError::validation(format!("bundle {} carries no market model", rec.bundle_dir))
            })?;
            let noise = NoiseSource::new(cfg.seed, stream_of(&rec.agent_id)?);

            let bundle = simulate_closed_loop(
                agent,
                market,
                &contract.policy,
                n_paths,
                &noise,
                &contract_options,
                max_export,
            )?;

            if !baselines.contains_key(&rec.agent_id) {
                let sol = solve_baseline_hjb(agent, &design.grid)?;
                let base_bundle = simulate_closed_loop(
                    agent,
                    market,
                    &sol.policy,
                    n_paths,
                    &noise,
                    &baseline_options,
                    max_export,
                )?;
                baselines.insert(rec.agent_id.clone(), base_bundle);
            }

            let summaries_csv = format!("{SIM_DIR}/{}_summaries.csv", rec.label);
            let paths_csv = format!("{SIM_DIR}/{}_paths.csv", rec.label);
            let baseline_summaries_csv =
                format!("{SIM_DIR}/{}_baseline_summaries.csv", rec.agent_id);
            let baseline_paths_csv = format!("{SIM_DIR}/{}_baseline_paths.csv", rec.agent_id);

            let mean_ja = crate::stats::mean(
                &bundle.summaries.iter().map(|s| s.agent_payoff).collect::<Vec<_>>(),
            );
            let dipped = bundle
                .summaries
                .iter()
                .filter(|s| s.budget_terminal_raw < -1e-9 * rec.terms.s_cap.max(1.0))
                .count();
            println!(
                "{}: {} contracted paths, mean agent payoff {:.6} (promised {:.6}), \
                 raw budget dips on {} paths",
                rec.label, n_paths, mean_ja, rec.terms.b, dipped
            );

            sink.write_bytes(&summaries_csv, summaries_to_csv(&bundle.summaries).as_bytes())?;
            sink.write_bytes(&paths_csv, paths_to_csv(&bundle.exported).as_bytes())?;
            manifest_rows.push(SimVariantRecord {
                label: rec.label.clone(),
                agent_id: rec.agent_id.clone(),
                share: rec.share,
                terms: rec.terms,
                bundle_dir: rec.bundle_dir.clone(),
                noise,
                contract_options,
                baseline_options,
                summaries_csv,
                paths_csv,
                baseline_summaries_csv,
                baseline_paths_csv,
            });
        }
        Ok(())
    })?;

    for (agent_id, base_bundle) in &baselines {
        sink.write_bytes(
            &format!("{SIM_DIR}/{agent_id}_baseline_summaries.csv"),
            summaries_to_csv(&base_bundle.summaries).as_bytes(),
        )?;
        sink.write_bytes(
            &format!("{SIM_DIR}/{agent_id}_baseline_paths.csv"),
            paths_to_csv(&base_bundle.exported).as_bytes(),
        )?;
    }

    let manifest = SimManifest {
        seed: cfg.seed,
        n_paths,
        max_export,
        time: cfg.time,
        variants: manifest_rows,
    };
    sink.write_json(SIM_MANIFEST_FILE, &manifest)?;

    println!(
        "simulated {} variant(s) + {} baseline(s), {} paths each, seed {}",
        manifest.variants.len(),
        baselines.len(),
        n_paths,
        cfg.seed
    );
    sink.finish()
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

fn sweep_row(
    rec: &SimVariantRecord,
    rho: Option<f64>,
    report: &VerificationReport,
) -> String {
    let share = rec.share.map(|s| s.to_string()).unwrap_or_default();
    let rho = rho.map(|r| r.to_string()).unwrap_or_default();
    let check = |name: &str| -> String {
        report
            .checks
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.pass.to_string())
            .unwrap_or_default()
    };
    let baseline = report.baseline.as_ref();
    let base_var = baseline.map(|b| b.var_without_contract.to_string()).unwrap_or_default();
    let reduction = baseline.map(|b| b.risk_reduction_pct.to_string()).unwrap_or_default();
    let delta = baseline.map(|b| b.mean_delta.to_string()).unwrap_or_default();
    let ce = report
        .principal_certainty_equivalent
        .as_ref()
        .map(|c| c.value.to_string())
        .unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        rec.label,
        rec.agent_id,
        share,
        rec.terms.b,
        rec.terms.s_cap,
        rho,
        report.agent_payoff.mean,
        report.agent_payoff.variance,
        report.principal_payoff.mean,
        report.principal_payoff.variance,
        base_var,
        reduction,
        delta,
        ce,
        check("participation_payoff_gap"),
        check("risk_limiting_variance"),
        check("budget_floor_violations"),
        report.all_pass()
    )
}

fn cmd_verify(cfg: &RunConfig, args: &RunArgs) -> Result<()> {
    let out = cfg.resolve_path(&cfg.output_dir);
    let sim: SimManifest = require_manifest(&out.join(SIM_MANIFEST_FILE), "simulate")?;

    if args.dry_run {
        println!(
            "would verify {} variant(s), {} paths each, against promised terms",
            sim.variants.len(),
            sim.n_paths
        );
        println!("dry run: nothing written");
        return Ok(());
    }

    // certificates ride along in the sweep when a design manifest is present
    let rho_by_label: BTreeMap<String, f64> = std::fs::read_to_string(out.join(DESIGN_MANIFEST_FILE))
        .ok()
        .and_then(|t| serde_json::from_str::<DesignManifest>(&t).ok())
        .map(|d| {
            d.variants
                .iter()
                .filter_map(|v| v.rho.map(|r| (v.label.clone(), r)))
                .collect()
        })
        .unwrap_or_default();

    let mut sink = ArtifactSink::new(&out, args.check)?;
    sink.write_json(CONFIG_ECHO_FILE, &cfg.canonicalized())?;

    let tol = Tolerances::default();
    let mut sweep = String::from(SWEEP_CSV_HEADER);
    sweep.push('\n');
    let mut failed_checks = 0usize;
    let mut total_checks = 0usize;

    for rec in &sim.variants {
        let summaries = summaries_from_csv(&out.join(&rec.summaries_csv))?;
        let bundle = TrajectoryBundle {
            grid: sim.time,
            options: rec.contract_options,
            noise: rec.noise,
            summaries,
            exported: Vec::new(),
        };
        let base_summaries = summaries_from_csv(&out.join(&rec.baseline_summaries_csv))?;
        let base_bundle = TrajectoryBundle {
            grid: sim.time,
            options: rec.baseline_options,
            noise: rec.noise,
            summaries: base_summaries,
            exported: Vec::new(),
        };

        let mut report = verify_conditions(&bundle, &rec.terms, &tol, Some(cfg.theta))?;
        report.baseline = Some(compare_to_baseline(&bundle, &base_bundle, cfg.theta)?);

        println!("{}:", rec.label);
        for c in &report.checks {
            total_checks += 1;
            if !c.pass {
                failed_checks += 1;
            }
            println!(
                "  {:<28} {}  estimate {:.6e}, threshold {:.6e}",
                c.name,
                if c.pass { "PASS" } else { "FAIL" },
                c.estimate,
                c.threshold
            );
        }
        if let Some(b) = &report.baseline {
            println!(
                "  principal payoff variance {:.6e} vs {:.6e} without a contract \
                 (risk reduction {:.1}%, {})",
                b.var_with_contract,
                b.var_without_contract,
                b.risk_reduction_pct,
                if b.crn_matched { "paired noise" } else { "independent noise" }
            );
        }

        sweep.push_str(&sweep_row(rec, rho_by_label.get(&rec.label).copied(), &report));
        sweep.push('\n');

        let report_json = serde_json::to_string_pretty(&report)
            .map_err(|e| CoreError::validation(format!("report serialization: {e}")))?
            + "\n";
        sink.write_bytes(&format!("{VERIFY_DIR}/{}_report.json", rec.label), report_json.as_bytes())?;
        let report_csv = format!("{REPORT_CSV_HEADER}\n{}", report.csv_rows(&rec.label));
        sink.write_bytes(&format!("{VERIFY_DIR}/{}_report.csv", rec.label), report_csv.as_bytes())?;
    }

    sink.write_bytes(SWEEP_FILE, sweep.as_bytes())?;
    sink.finish()?;

    if failed_checks > 0 {
        return Err(CoreError::verification(format!(
            "{failed_checks} of {total_checks} guarantee checks failed; see {VERIFY_DIR}/"
        )));
    }
    println!("all {total_checks} guarantee checks passed across {} variant(s)", sim.variants.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

fn cmd_report(cfg: &RunConfig, _args: &RunArgs) -> Result<()> {
    let out = cfg.resolve_path(&cfg.output_dir);
    let design: DesignManifest = require_manifest(&out.join(DESIGN_MANIFEST_FILE), "design")?;

    println!(
        "loading meshes truncated at gamma {:.6}, zeta {:.6}; optima beyond those bounds \
         are unreachable",
        design.gamma_max, design.zeta_max
    );
    let label_width =
        design.variants.iter().map(|v| v.label.len()).max().unwrap_or(5).max("label".len());
    println!(
        "{:<label_width$}  {:>10}  {:>10}  {:>6}  {:>11}  {:>11}  {:>11}  {:>11}  {:>6}  checks",
        "label", "b", "s_cap", "rho", "mean J_A", "var J_A", "var J_P", "base var", "red%"
    );
    let fmt_opt = |v: Option<f64>| match v {
        Some(x) => format!("{x:.4}"),
        None => "-".to_string(),
    };

    for v in &design.variants {
        let report: Option<VerificationReport> =
            read_json(&out.join(format!("{VERIFY_DIR}/{}_report.json", v.label))).ok();
        let (mean_ja, var_ja, var_jp, base_var, red, checks) = match &report {
            Some(r) => {
                let b = r.baseline.as_ref();
                (
                    format!("{:.6}", r.agent_payoff.mean),
                    format!("{:.6}", r.agent_payoff.variance),
                    format!("{:.6}", r.principal_payoff.variance),
                    b.map(|b| format!("{:.6}", b.var_without_contract))
                        .unwrap_or_else(|| "-".into()),
                    b.map(|b| format!("{:.1}", b.risk_reduction_pct)).unwrap_or_else(|| "-".into()),
                    format!(
                        "{}/{} {}",
                        r.checks.iter().filter(|c| c.pass).count(),
                        r.checks.len(),
                        if r.all_pass() { "PASS" } else { "FAIL" }
                    ),
                )
            }
            None => (
                "-".into(),
                "-".into(),
                "-".into(),
                "-".into(),
                "-".into(),
                "not verified".into(),
            ),
        };
        println!(
            "{:<label_width$}  {:>10.6}  {:>10.6}  {:>6}  {:>11}  {:>11}  {:>11}  {:>11}  {:>6}  {}",
            v.label, v.terms.b, v.terms.s_cap, fmt_opt(v.rho), mean_ja, var_ja, var_jp, base_var,
            red, checks
        );
    }

    if !design.failures.is_empty() {
        println!("{} design failure(s):", design.failures.len());
        for f in &design.failures {
            println!("  {}: {}", f.agent_id, f.message);
        }
    }
    println!(
        "{} distinct solves, {} cache hits, designed in {:.2} s",
        design.distinct_solves,
        design.cache_hits,
        design.elapsed_ms as f64 / 1000.0
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{StepRecord, TerminalRecord};

    #[test]
    fn node_and_mesh_specs_parse_or_reject() {
        assert_eq!(parse_nodes("21x21x15").unwrap(), [21, 21, 15]);
        assert_eq!(parse_nodes("7X9X11").unwrap(), [7, 9, 11]);
        assert!(parse_nodes("21x21").is_err());
        assert!(parse_nodes("axbxc").is_err());
        assert_eq!(parse_mesh("9x5").unwrap(), [9, 5]);
        assert!(parse_mesh("9").is_err());
        assert!(parse_mesh("9x5x3").is_err());
    }

    #[test]
    fn share_labels_are_permille_tagged() {
        assert_eq!(share_label("house-1", 0.1), "house-1-s100");
        assert_eq!(share_label("house-1", 0.0), "house-1-s000");
        assert_eq!(share_label("a", 1.0), "a-s1000");
        assert_eq!(share_label("a", 0.25), "a-s250");
    }

    #[test]
    fn volatile_keys_are_stripped_recursively() {
        let v = serde_json::json!({
            "designed_at_unix_ms": 123,
            "kept": 1,
            "inner": [{"elapsed_ms": 5, "x": 2}]
        });
        let stripped = strip_volatile(v);
        assert_eq!(stripped, serde_json::json!({"kept": 1, "inner": [{"x": 2}]}));
    }

    #[test]
    fn summary_csv_round_trips_exactly() {
        let rows = vec![
            PathSummary {
                agent_payoff: -0.1 + 1e-17,
                principal_payoff: 2.0f64.powi(-40),
                compensation: -0.0,
                budget_terminal: 1.0 / 3.0,
                budget_terminal_raw: -1e-300,
                gamma_dw_sum: 0.1 + 0.2,
                gamma_sq_dt_sum: f64::MIN_POSITIVE,
                w_min: -3.2,
                w_max: f64::MAX,
                x_min: 18.0,
                x_max: 22.000000000000004,
            };
            3
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("summaries.csv");
        std::fs::write(&path, summaries_to_csv(&rows)).unwrap();
        let back = summaries_from_csv(&path).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn summary_csv_parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, format!("{SUMMARY_CSV_HEADER}\n0,1,2,notanumber,4,5,6,7,8,9,10,11\n"))
            .unwrap();
        let err = summaries_from_csv(&path).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("line 2"), "missing line number: {text}");
        assert!(text.contains("notanumber"), "missing offending cell: {text}");

        std::fs::write(&path, "wrong,header\n").unwrap();
        assert!(summaries_from_csv(&path).is_err());
    }

    #[test]
    fn paths_csv_has_one_row_per_step_plus_terminal() {
        let step = StepRecord {
            t: 10.0,
            w: -2.0,
            x: 21.0,
            y: 0.01,
            v: -0.5,
            u: 2.0,
            gamma: [0.01, -0.02],
            zeta: [0.0, 0.0],
            dw0: 0.1,
            dwi: -0.1,
        };
        let rec = PathRecord {
            index: 7,
            steps: vec![step; 4],
            terminal: TerminalRecord { t: 11.0, w: -2.1, x: 21.4, y: 0.008, v: -0.45 },
        };
        let text = paths_to_csv(&[rec]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], PATHS_CSV_HEADER);
        assert_eq!(lines.len(), 1 + 4 + 1);
        assert!(lines[1].starts_with("7,10,"));
        // terminal row leaves control and noise cells empty
        assert!(lines[5].contains(",,"));
    }

    #[test]
    fn artifact_sink_check_mode_diffs_instead_of_writing() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("out");

        let mut writer = ArtifactSink::new(&root, false).unwrap();
        writer.write_bytes("a.csv", b"1,2,3\n").unwrap();
        writer
            .write_json("m.json", &serde_json::json!({"x": 1, "elapsed_ms": 10}))
            .unwrap();
        writer.finish().unwrap();

        // identical content, different volatile value: clean
        let mut checker = ArtifactSink::new(&root, true).unwrap();
        checker.write_bytes("a.csv", b"1,2,3\n").unwrap();
        checker
            .write_json("m.json", &serde_json::json!({"x": 1, "elapsed_ms": 999}))
            .unwrap();
        checker.finish().unwrap();

        // changed payload: flagged, not overwritten
        let mut tamper = ArtifactSink::new(&root, true).unwrap();
        tamper.write_bytes("a.csv", b"9,9,9\n").unwrap();
        tamper.write_json("m.json", &serde_json::json!({"x": 2})).unwrap();
        let err = tamper.finish().unwrap_err();
        assert!(matches!(err, CoreError::Verification(_)));
        assert_eq!(err.exit_code(), 3);
        assert_eq!(std::fs::read(root.join("a.csv")).unwrap(), b"1,2,3\n");

        // missing file: flagged
        let mut missing = ArtifactSink::new(&root, true).unwrap();
        missing.write_bytes("ghost.csv", b"x\n").unwrap();
        assert!(missing.finish().is_err());
    }

    #[test]
    fn overrides_rewrite_the_config_before_echo() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("run.json");
        std::fs::write(
            &cfg_path,
            serde_json::json!({
                "output_dir": "out",
                "time": {"t0": 10.0, "t1": 18.0, "dt": 0.25},
                "theta": 1e-2,
                "market": {"source": "inline", "r0": 0.5, "nu": -2.2, "sigma0": 0.3},
                "agents": [{
                    "id": "h1",
                    "load_forecast": 1.0,
                    "load_sigma": 0.4,
                    "tariff": 0.11,
                    "etp": {"alpha": 0.1, "kappa": 1.5, "x0": 21.0, "theta_out": 30.0},
                    "comfort": {"omega": 0.15, "theta_lo": 20.0, "theta_hi": 22.0},
                    "control_set": [0.0, 2.0],
                    "terms": {"b": -0.5, "s_cap": 0.01}
                }]
            })
            .to_string(),
        )
        .unwrap();

        let mut cfg = RunConfig::load(&cfg_path).unwrap();
        let args = RunArgs {
            config: cfg_path.clone(),
            jobs: 0,
            seed: Some(42),
            grid: Some("9x9x7".into()),
            mesh: Some("5x3".into()),
            paths: Some(256),
            max_export: Some(2),
            unit: None,
            dry_run: false,
            check: false,
        };
        apply_overrides(&mut cfg, &args).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.simulation.paths, 256);
        assert_eq!(cfg.simulation.max_export, 2);
        assert_eq!(cfg.solver.nodes, Some([9, 9, 7]));
        assert_eq!(cfg.solver.gamma_points, Some(5));
        assert_eq!(cfg.solver.zeta_points, Some(3));

        // unit override is meaningless without a calibrating market source
        let mut cfg2 = RunConfig::load(&cfg_path).unwrap();
        let args2 = RunArgs { unit: Some("usd_per_mwh".into()), ..args };
        let err = apply_overrides(&mut cfg2, &args2).unwrap_err();
        assert!(err.to_string().contains("--unit"));
    }
}
