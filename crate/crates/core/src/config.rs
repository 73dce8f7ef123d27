//! JSON run configuration for the command-line toolchain.
//!
//! A [`RunConfig`] names everything one end-to-end run needs: the contract
//! window, where the market model comes from (inline parameters, a fit
//! from a price CSV, or a previously written model file), the agents, how
//! contract terms are chosen, solver discretization overrides, simulation
//! controls, the root seed, and the output directory.
//!
//! Time-varying inputs are written as a [`Profile`]: a single number for
//! a constant, or an array whose length evenly divides the window's step
//! count (each value then covers an equal run of steps, so an 8-hour
//! window at 15-minute resolution accepts 8 hourly values). Calibrated
//! daily patterns map onto the window by hour of day via
//! [`daily_to_window`].
//!
//! Every command echoes the effective configuration — with paths made
//! absolute and command-line overrides applied — to `config_echo.json` in
//! the output directory, so any artifact is regenerable from the output
//! directory alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibrate::{
    fit_load_diffusion, fit_ou_params, CalibrationResult, ConsumptionPanel, PriceHistory,
    PriceUnit,
};
use crate::error::{CoreError, Result};
use crate::hjb::{
    AxisSpec, ControlMesh, GridSpec, DEFAULT_GAMMA_POINTS, DEFAULT_GRID_NODES,
    DEFAULT_ZETA_POINTS,
};
use crate::models::{
    AgentSpec, ComfortParams, ContractTerms, EtpParams, MarketModel, Series, TimeGrid,
};

/// File name of the configuration echo every command writes.
pub const CONFIG_ECHO_FILE: &str = "config_echo.json";

/// A time-varying input: one number (constant over the window) or an
/// array whose length evenly divides the window's step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Profile {
    Constant(f64),
    Values(Vec<f64>),
}

impl Profile {
    /// Expand onto `grid`, naming the field in any error.
    pub fn to_series(&self, grid: TimeGrid, name: &str) -> Result<Series> {
        match self {
            Profile::Constant(v) => {
                if !v.is_finite() {
                    return Err(CoreError::validation(format!("{name}: non-finite value {v}")));
                }
                Ok(Series::constant(grid, *v))
            }
            Profile::Values(vs) => Series::expand(grid, vs)
                .map_err(|e| CoreError::validation(format!("{name}: {e}"))),
        }
    }
}

/// Map a daily (hour-of-day) pattern onto a contract window: each window
/// cell reads the pattern at its left endpoint's hour of day.
pub fn daily_to_window(daily: &Series, window: TimeGrid) -> Series {
    let values = (0..window.n_steps())
        .map(|k| daily.at(window.time_at(k).rem_euclid(24.0)))
        .collect();
    Series { grid: window, values }
}

/// Where the market model comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum MarketSource {
    /// Parameters written directly in the config.
    Inline {
        r0: f64,
        nu: Profile,
        sigma0: Profile,
        /// Spot price at the window start, $/kWh; default `exp(nu(t0))`.
        #[serde(default)]
        lambda0: Option<f64>,
        /// Per-agent day-ahead allocation, kW; default 0.
        #[serde(default)]
        p_alloc: Option<Profile>,
    },
    /// Fit the mean-reverting model from a settlement-price CSV
    /// (columns: timestamp plus a price column; see the calibrate module).
    Calibrate {
        price_csv: PathBuf,
        #[serde(default)]
        unit: PriceUnit,
        #[serde(default = "default_seasonal_bins")]
        seasonal_bins: usize,
        #[serde(default)]
        lambda0: Option<f64>,
        #[serde(default)]
        p_alloc: Option<Profile>,
    },
    /// Read a previously written `market_model.json`.
    File { path: PathBuf },
}

fn default_seasonal_bins() -> usize {
    24
}

/// Thermal parameters with a profile-valued outdoor temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtpConfig {
    pub alpha: f64,
    pub kappa: f64,
    pub x0: f64,
    pub theta_out: Profile,
}

/// One agent as written in the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub id: String,
    pub load_forecast: Profile,
    /// Demand noise scale; omit to use the consumption-panel fit.
    #[serde(default)]
    pub load_sigma: Option<Profile>,
    pub tariff: Profile,
    pub etp: EtpConfig,
    pub comfort: ComfortParams,
    pub control_set: Vec<f64>,
    /// Required when `terms.mode = "explicit"`; ignored under a
    /// baseline-shares sweep.
    #[serde(default)]
    pub terms: Option<ContractTerms>,
}

impl AgentConfig {
    /// Expand into a full [`AgentSpec`] on the window grid.
    ///
    /// `calibrated_sigma` is the consumption-panel fit mapped onto the
    /// window; it backs agents that omit `load_sigma`. Agents without
    /// explicit terms get the placeholder `(b, s_cap) = (0, 0)`, to be
    /// overwritten by the terms policy before design.
    pub fn to_agent_spec(
        &self,
        window: TimeGrid,
        calibrated_sigma: Option<&Series>,
    ) -> Result<AgentSpec> {
        let tag = |field: &str| format!("agent '{}': {}", self.id, field);
        let load_sigma = match (&self.load_sigma, calibrated_sigma) {
            (Some(p), _) => p.to_series(window, &tag("load_sigma"))?,
            (None, Some(s)) => s.clone(),
            (None, None) => {
                return Err(CoreError::validation(format!(
                    "agent '{}' omits load_sigma and no consumption_csv is configured to \
                     calibrate it from",
                    self.id
                )))
            }
        };
        let spec = AgentSpec {
            id: self.id.clone(),
            grid: window,
            load_forecast: self.load_forecast.to_series(window, &tag("load_forecast"))?,
            load_sigma,
            tariff: self.tariff.to_series(window, &tag("tariff"))?,
            etp: EtpParams {
                alpha: self.etp.alpha,
                kappa: self.etp.kappa,
                x0: self.etp.x0,
                theta_out: self.etp.theta_out.to_series(window, &tag("etp.theta_out"))?,
            },
            comfort: self.comfort,
            control_set: self.control_set.clone(),
            terms: self.terms.unwrap_or(ContractTerms { b: 0.0, s_cap: 0.0 }),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// How contract terms are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TermsSource {
    /// Use the `(b, s_cap)` written on each agent.
    Explicit,
    /// Derive terms from each agent's no-contract optimum: `b` is the
    /// baseline expected payoff and `s_cap = share * baseline variance`,
    /// one contract variant per share.
    BaselineShares { shares: Vec<f64> },
}

impl Default for TermsSource {
    fn default() -> Self {
        TermsSource::Explicit
    }
}

/// One axis override: full replacement of (min, max, node count).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisConfig {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl AxisConfig {
    fn to_axis(self) -> Result<AxisSpec> {
        AxisSpec::new(self.min, self.max, self.n)
    }
}

/// Solver discretization overrides; everything omitted falls back to the
/// documented defaults derived from the instance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Node counts `[w, x, y]` for defaulted axes.
    #[serde(default)]
    pub nodes: Option<[usize; 3]>,
    #[serde(default)]
    pub w_axis: Option<AxisConfig>,
    #[serde(default)]
    pub x_axis: Option<AxisConfig>,
    #[serde(default)]
    pub y_axis: Option<AxisConfig>,
    #[serde(default)]
    pub gamma_points: Option<usize>,
    #[serde(default)]
    pub zeta_points: Option<usize>,
    /// Bound for the gamma loading mesh; default the noise-offloading
    /// scale capped by the budget axis (see
    /// [`ControlMesh::default_bounds`]).
    #[serde(default)]
    pub gamma_max: Option<f64>,
    /// Bound for the zeta loading mesh; same default policy, tighter cap.
    #[serde(default)]
    pub zeta_max: Option<f64>,
}

impl SolverConfig {
    /// One grid covering every agent: the union of per-agent default
    /// boxes, then any axis overrides.
    pub fn envelope_grid(&self, agents: &[AgentSpec], market: &MarketModel) -> Result<GridSpec> {
        if agents.is_empty() {
            return Err(CoreError::validation("no agents to build a grid for"));
        }
        let (nw, nx, ny) = match self.nodes {
            Some([a, b, c]) => (a, b, c),
            None => DEFAULT_GRID_NODES,
        };
        let mut grid = GridSpec::default_for(&agents[0], market, nw, nx, ny)?;
        for a in &agents[1..] {
            let g = GridSpec::default_for(a, market, nw, nx, ny)?;
            grid.w.min = grid.w.min.min(g.w.min);
            grid.w.max = grid.w.max.max(g.w.max);
            grid.x.min = grid.x.min.min(g.x.min);
            grid.x.max = grid.x.max.max(g.x.max);
            grid.y.max = grid.y.max.max(g.y.max);
        }
        if let Some(a) = self.w_axis {
            grid.w = a.to_axis()?;
        }
        if let Some(a) = self.x_axis {
            grid.x = a.to_axis()?;
        }
        if let Some(a) = self.y_axis {
            grid.y = a.to_axis()?;
        }
        grid.validate()?;
        Ok(grid)
    }

    /// One loading mesh shared by every agent. All agents must offer the
    /// same control levels, since the solve scans one joint mesh.
    pub fn shared_mesh(&self, agents: &[AgentSpec], grid: &GridSpec) -> Result<ControlMesh> {
        if agents.is_empty() {
            return Err(CoreError::validation("no agents to build a mesh for"));
        }
        for a in &agents[1..] {
            if a.control_set != agents[0].control_set {
                return Err(CoreError::validation(format!(
                    "agents '{}' and '{}' offer different control levels; a run shares one \
                     solver mesh, so split them into separate runs",
                    agents[0].id, a.id
                )));
            }
        }
        let (gamma_default, zeta_default) = agents
            .iter()
            .map(|a| ControlMesh::default_bounds(a, grid))
            .fold((0.0f64, 0.0f64), |(g, z), (ga, za)| (g.max(ga), z.max(za)));
        ControlMesh::new(
            agents[0].control_set.clone(),
            self.gamma_points.unwrap_or(DEFAULT_GAMMA_POINTS),
            self.zeta_points.unwrap_or(DEFAULT_ZETA_POINTS),
            self.gamma_max.unwrap_or(gamma_default),
            self.zeta_max.unwrap_or(zeta_default),
        )
    }
}

/// Monte Carlo controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    /// Closed-loop paths per experiment.
    #[serde(default = "default_paths")]
    pub paths: usize,
    /// Fully recorded paths kept for plotting.
    #[serde(default = "default_max_export")]
    pub max_export: usize,
}

fn default_paths() -> usize {
    10_000
}

fn default_max_export() -> usize {
    4
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig { paths: default_paths(), max_export: default_max_export() }
    }
}

/// Everything one end-to-end run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Directory all artifacts land in; created if missing.
    pub output_dir: PathBuf,
    /// Root seed; every per-path and per-agent stream derives from it.
    #[serde(default)]
    pub seed: u64,
    /// Contract window.
    pub time: TimeGrid,
    /// Aggregator's risk-aversion coefficient, 1/$.
    pub theta: f64,
    pub market: MarketSource,
    /// Cumulative-consumption panel CSV backing calibrated demand noise.
    #[serde(default)]
    pub consumption_csv: Option<PathBuf>,
    pub agents: Vec<AgentConfig>,
    #[serde(default)]
    pub terms: TermsSource,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    /// Directory the config was loaded from; relative paths resolve
    /// against it. Not part of the file format.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    /// Parse a config file; relative paths inside it resolve against its
    /// directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CoreError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        cfg.base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.time.validate()?;
        if !self.theta.is_finite() || self.theta <= 0.0 {
            return Err(CoreError::validation(format!(
                "theta must be finite and positive, got {}",
                self.theta
            )));
        }
        if self.agents.is_empty() {
            return Err(CoreError::validation("config lists no agents"));
        }
        let mut ids: Vec<&str> = self.agents.iter().map(|a| a.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(d) = ids.windows(2).find(|p| p[0] == p[1]) {
            return Err(CoreError::validation(format!("duplicate agent id '{}'", d[0])));
        }
        if let TermsSource::Explicit = self.terms {
            for a in &self.agents {
                if a.terms.is_none() {
                    return Err(CoreError::validation(format!(
                        "terms mode is explicit but agent '{}' carries no terms",
                        a.id
                    )));
                }
            }
        }
        if let TermsSource::BaselineShares { shares } = &self.terms {
            if shares.is_empty() {
                return Err(CoreError::validation("baseline_shares lists no shares"));
            }
            if shares.iter().any(|s| !s.is_finite() || *s < 0.0) {
                return Err(CoreError::validation("shares must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Resolve a configured path against the config's directory.
    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// A copy whose file references (including `output_dir`) are
    /// absolute, suitable for echoing into the output directory.
    pub fn canonicalized(&self) -> RunConfig {
        let mut cfg = self.clone();
        cfg.output_dir = self.resolve_path(&self.output_dir);
        cfg.consumption_csv = cfg.consumption_csv.map(|p| self.resolve_path(&p));
        cfg.market = match cfg.market {
            MarketSource::Calibrate { price_csv, unit, seasonal_bins, lambda0, p_alloc } => {
                MarketSource::Calibrate {
                    price_csv: self.resolve_path(&price_csv),
                    unit,
                    seasonal_bins,
                    lambda0,
                    p_alloc,
                }
            }
            MarketSource::File { path } => MarketSource::File { path: self.resolve_path(&path) },
            inline => inline,
        };
        cfg.base_dir = PathBuf::new();
        cfg
    }

    /// Write the effective configuration into `dir` as
    /// [`CONFIG_ECHO_FILE`], with paths made absolute.
    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let path = dir.join(CONFIG_ECHO_FILE);
        let mut text = serde_json::to_string_pretty(&self.canonicalized())
            .map_err(|e| CoreError::validation(format!("config echo serialization: {e}")))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| CoreError::io(&path, e))?;
        Ok(())
    }

    /// Build the market model on the window grid. Calibrating sources
    /// also return the fit diagnostics.
    pub fn resolve_market(&self) -> Result<(MarketModel, Option<CalibrationResult>)> {
        match &self.market {
            MarketSource::Inline { r0, nu, sigma0, lambda0, p_alloc } => {
                let nu = nu.to_series(self.time, "market.nu")?;
                let sigma0 = sigma0.to_series(self.time, "market.sigma0")?;
                let p_alloc = match p_alloc {
                    Some(p) => p.to_series(self.time, "market.p_alloc")?,
                    None => Series::constant(self.time, 0.0),
                };
                let lambda0 = lambda0.unwrap_or_else(|| nu.values[0].exp());
                let market =
                    MarketModel { grid: self.time, r0: *r0, nu, sigma0, lambda0, p_alloc };
                market.validate()?;
                Ok((market, None))
            }
            MarketSource::Calibrate { price_csv, unit, seasonal_bins, lambda0, p_alloc } => {
                let history = PriceHistory::read_csv(&self.resolve_path(price_csv), *unit)?;
                let fit = fit_ou_params(&history, *seasonal_bins)?;
                let CalibrationResult::PriceModel { r0, nu, sigma0, degenerate, .. } = &fit
                else {
                    unreachable!("price fit returns a price model");
                };
                if *degenerate {
                    return Err(CoreError::numerical(
                        "price history shows no movement; the fitted model is degenerate \
                         and cannot drive a design",
                    ));
                }
                let nu_w = daily_to_window(nu, self.time);
                let sigma0_w = daily_to_window(sigma0, self.time);
                let p_alloc = match p_alloc {
                    Some(p) => p.to_series(self.time, "market.p_alloc")?,
                    None => Series::constant(self.time, 0.0),
                };
                let lambda0 = lambda0.unwrap_or_else(|| nu_w.values[0].exp());
                let market = MarketModel {
                    grid: self.time,
                    r0: *r0,
                    nu: nu_w,
                    sigma0: sigma0_w,
                    lambda0,
                    p_alloc,
                };
                market.validate()?;
                Ok((market, Some(fit)))
            }
            MarketSource::File { path } => {
                let full = self.resolve_path(path);
                let text = std::fs::read_to_string(&full).map_err(|e| CoreError::io(&full, e))?;
                let market: MarketModel = serde_json::from_str(&text)
                    .map_err(|e| CoreError::Parse { path: full.clone(), message: e.to_string() })?;
                market.validate()?;
                if !market.grid.same_as(&self.time) {
                    return Err(CoreError::validation(format!(
                        "market model in {} is on grid [{}, {}] dt {} but the config window \
                         is [{}, {}] dt {}",
                        full.display(),
                        market.grid.t0,
                        market.grid.t1,
                        market.grid.dt,
                        self.time.t0,
                        self.time.t1,
                        self.time.dt
                    )));
                }
                Ok((market, None))
            }
        }
    }

    /// Fit demand noise from the consumption panel, if one is configured.
    /// Returns the window-mapped scale and the fit diagnostics.
    pub fn resolve_load_sigma(&self) -> Result<Option<(Series, CalibrationResult)>> {
        let Some(csv) = &self.consumption_csv else {
            return Ok(None);
        };
        let panel = ConsumptionPanel::read_csv(&self.resolve_path(csv))?;
        let fit = fit_load_diffusion(&panel)?;
        let CalibrationResult::LoadDiffusion { sigma_tilde, .. } = &fit else {
            unreachable!("load fit returns a diffusion model");
        };
        Ok(Some((daily_to_window(sigma_tilde, self.time), fit)))
    }

    /// Expand every configured agent onto the window grid.
    pub fn resolve_agents(&self, calibrated_sigma: Option<&Series>) -> Result<Vec<AgentSpec>> {
        self.agents.iter().map(|a| a.to_agent_spec(self.time, calibrated_sigma)).collect()
    }
}
