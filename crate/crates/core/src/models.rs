//! Market, load, tariff, and comfort primitives.
//!
//! Everything downstream (calibration, dynamic programming, simulation,
//! verification) is phrased in terms of the quantities defined here. For a
//! single agent over a contract window `[t0, t1]`:
//!
//! ```text
//! log-price      dw = r0 (nu(t) - w) dt + sigma0(t) dW0,     lambda = exp(w)
//! demand         d(eta) = (l(t) + u) dt + sigma_tilde(t) dWi
//! temperature    dx = [alpha (theta_out(t) - x) - kappa u] dt
//!
//! principal      rP(t,w,u) = (mu(t) - lambda)(u + l(t)) + lambda p(t)
//!                sP(t,w)   = (mu(t) - lambda) sigma_tilde(t)
//! agent          rA(t,x,u) = -mu(t)(l(t) + u) + comfort(x)
//!                sA(t)     = -mu(t) sigma_tilde(t)
//! comfort        comfort(x) = -omega [ (x - theta_hi)+ + (theta_lo - x)+ ]
//! ```
//!
//! `u` is the control the aggregator applies to the agent's flexible load
//! (kW drawn by the air conditioner), `l(t)` the non-controlled load
//! forecast, `mu(t)` the retail tariff, `p(t)` the power procured ahead of
//! time for this agent, and `lambda` the wholesale real-time price. Running
//! payoffs are in $/h; `sP`/`sA` are the $-per-unit-Brownian exposures to
//! the agent's demand noise.
//!
//! All time-varying inputs are piecewise-constant over the cells of a
//! shared [`TimeGrid`]; evaluating one anywhere inside a cell yields the
//! value at the cell's left endpoint.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Relative slack accepted when checking that `(t1 - t0) / dt` is an
/// integer step count.
const GRID_ALIGNMENT_TOL: f64 = 1e-9;

/// Uniform time grid over a contract window, in hours.
///
/// The grid has `n_steps` cells of width `dt`; cell `k` covers
/// `[t0 + k dt, t0 + (k+1) dt)`. Piecewise-constant sequences hold one
/// value per cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    /// Window start, hours (e.g. 10.0 for 10:00).
    pub t0: f64,
    /// Window end, hours.
    pub t1: f64,
    /// Step width, hours.
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, dt: f64) -> Result<Self> {
        let g = TimeGrid { t0, t1, dt };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t0.is_finite() && self.t1.is_finite() && self.dt.is_finite()) {
            return Err(CoreError::validation("time grid parameters must be finite"));
        }
        if self.dt <= 0.0 {
            return Err(CoreError::validation(format!("dt must be positive, got {}", self.dt)));
        }
        if self.t1 <= self.t0 {
            return Err(CoreError::validation(format!(
                "window must have positive length, got [{}, {}]",
                self.t0, self.t1
            )));
        }
        let steps = (self.t1 - self.t0) / self.dt;
        let rounded = steps.round();
        if rounded < 1.0 || (steps - rounded).abs() > GRID_ALIGNMENT_TOL * rounded.max(1.0) {
            return Err(CoreError::validation(format!(
                "window [{}, {}] is not an integer number of dt={} steps",
                self.t0, self.t1, self.dt
            )));
        }
        Ok(())
    }

    /// Number of cells.
    pub fn n_steps(&self) -> usize {
        ((self.t1 - self.t0) / self.dt).round() as usize
    }

    /// Left endpoint of cell `k` (also defined for `k = n_steps`, the
    /// window end).
    pub fn time_at(&self, k: usize) -> f64 {
        self.t0 + self.dt * k as f64
    }

    /// Index of the cell containing `t`, clamped to `[0, n_steps - 1]`.
    ///
    /// A small forward nudge keeps cell boundaries in the cell they open,
    /// so `index_of(time_at(k)) == k`.
    pub fn index_of(&self, t: f64) -> usize {
        let raw = (t - self.t0) / self.dt + GRID_ALIGNMENT_TOL;
        let idx = raw.floor();
        if idx < 0.0 {
            0
        } else {
            (idx as usize).min(self.n_steps() - 1)
        }
    }

    /// Exact grid equality — sequences may only be mixed when their grids
    /// were built from the same numbers.
    pub fn same_as(&self, other: &TimeGrid) -> bool {
        self.t0 == other.t0 && self.t1 == other.t1 && self.dt == other.dt
    }
}

/// Piecewise-constant sequence aligned to a [`TimeGrid`] (one value per
/// cell, left-continuous lookup).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub grid: TimeGrid,
    pub values: Vec<f64>,
}

impl Series {
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        let s = Series { grid, values };
        s.validate()?;
        Ok(s)
    }

    /// Constant sequence on `grid`.
    pub fn constant(grid: TimeGrid, value: f64) -> Self {
        let n = grid.n_steps();
        Series { grid, values: vec![value; n] }
    }

    /// Expand `values` onto `grid` by piecewise-constant repetition.
    /// `values.len()` must divide `grid.n_steps()` evenly.
    pub fn expand(grid: TimeGrid, values: &[f64]) -> Result<Self> {
        let n = grid.n_steps();
        if values.is_empty() || n % values.len() != 0 {
            return Err(CoreError::validation(format!(
                "cannot expand a sequence of length {} onto {} grid cells",
                values.len(),
                n
            )));
        }
        let rep = n / values.len();
        let mut out = Vec::with_capacity(n);
        for &v in values {
            out.extend(std::iter::repeat(v).take(rep));
        }
        Series::new(grid, out)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.values.len() != self.grid.n_steps() {
            return Err(CoreError::validation(format!(
                "sequence has {} values but the grid has {} cells",
                self.values.len(),
                self.grid.n_steps()
            )));
        }
        if let Some(v) = self.values.iter().find(|v| !v.is_finite()) {
            return Err(CoreError::validation(format!("sequence contains non-finite value {v}")));
        }
        Ok(())
    }

    /// Value over the cell containing `t`.
    pub fn at(&self, t: f64) -> f64 {
        self.values[self.grid.index_of(t)]
    }

    /// Value over cell `k` (clamped).
    pub fn at_index(&self, k: usize) -> f64 {
        self.values[k.min(self.values.len() - 1)]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Left-endpoint integral of the sequence over the window.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.dt
    }
}

/// Mean-reverting log-price model of the wholesale market, plus the power
/// procured in advance for one agent.
///
/// `w = ln(lambda)` follows `dw = r0 (nu(t) - w) dt + sigma0(t) dW0`, with
/// `lambda` in $/kWh. `nu` and `sigma0` are piecewise-constant seasonal
/// profiles; `lambda0` is the price at the window start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketModel {
    pub grid: TimeGrid,
    /// Mean-reversion rate, 1/h.
    pub r0: f64,
    /// Log-price attractor profile.
    pub nu: Series,
    /// Log-price volatility profile, 1/sqrt(h).
    pub sigma0: Series,
    /// Spot price at `t0`, $/kWh.
    pub lambda0: f64,
    /// Power procured ahead of time for the agent this model is paired
    /// with, kW (menu designs built from a shared market use the same
    /// per-agent allocation, by default total procurement / n).
    pub p_alloc: Series,
}

impl MarketModel {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        for (name, s) in [("nu", &self.nu), ("sigma0", &self.sigma0), ("p_alloc", &self.p_alloc)] {
            s.validate()?;
            if !s.grid.same_as(&self.grid) {
                return Err(CoreError::validation(format!("market sequence {name} is on a different grid")));
            }
        }
        if !self.r0.is_finite() || self.r0 < 0.0 {
            return Err(CoreError::validation(format!("r0 must be finite and >= 0, got {}", self.r0)));
        }
        if !(self.lambda0.is_finite() && self.lambda0 > 0.0) {
            return Err(CoreError::validation(format!("lambda0 must be positive, got {}", self.lambda0)));
        }
        if self.sigma0.min() < 0.0 {
            return Err(CoreError::validation("sigma0 must be non-negative"));
        }
        if self.p_alloc.min() < 0.0 {
            return Err(CoreError::validation("p_alloc must be non-negative"));
        }
        Ok(())
    }

    /// Initial log-price `w0 = ln(lambda0)`.
    pub fn w0(&self) -> f64 {
        self.lambda0.ln()
    }

    /// Drift of the log-price at `(t, w)`.
    pub fn log_price_drift(&self, t: f64, w: f64) -> f64 {
        self.r0 * (self.nu.at(t) - w)
    }
}

/// Equivalent thermal parameter model of one air-conditioned household.
///
/// `dx = [alpha (theta_out(t) - x) - kappa u] dt`, temperatures in C,
/// `u` in kW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtpParams {
    /// Thermal leakage rate towards the outdoor temperature, 1/h.
    /// Zero models a perfectly insulated interior.
    pub alpha: f64,
    /// Cooling effectiveness, C per kWh.
    pub kappa: f64,
    /// Outdoor temperature profile, C.
    pub theta_out: Series,
    /// Indoor temperature at the window start, C.
    pub x0: f64,
}

impl EtpParams {
    pub fn validate(&self) -> Result<()> {
        self.theta_out.validate()?;
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(CoreError::validation(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !(self.kappa.is_finite() && self.kappa > 0.0) {
            return Err(CoreError::validation(format!("kappa must be positive, got {}", self.kappa)));
        }
        if !self.x0.is_finite() {
            return Err(CoreError::validation("x0 must be finite"));
        }
        Ok(())
    }
}

/// Piecewise-linear discomfort rate around a temperature band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComfortParams {
    /// Discomfort price, $/(C h). Zero disables the comfort term.
    pub omega: f64,
    /// Lower band edge, C.
    pub theta_lo: f64,
    /// Upper band edge, C.
    pub theta_hi: f64,
}

impl ComfortParams {
    pub fn validate(&self) -> Result<()> {
        if !self.omega.is_finite() || self.omega < 0.0 {
            return Err(CoreError::validation(format!("omega must be finite and >= 0, got {}", self.omega)));
        }
        if !(self.theta_lo.is_finite() && self.theta_hi.is_finite() && self.theta_lo < self.theta_hi) {
            return Err(CoreError::validation(format!(
                "comfort band must satisfy theta_lo < theta_hi, got [{}, {}]",
                self.theta_lo, self.theta_hi
            )));
        }
        Ok(())
    }
}

/// Contract terms offered to one agent: promised mean payoff `b` ($) and
/// payoff-variance cap `s_cap` ($^2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractTerms {
    /// Promised expected payoff over the window, $.
    pub b: f64,
    /// Variance cap (risk budget), $^2.
    #[serde(rename = "s_cap")]
    pub s_cap: f64,
}

impl ContractTerms {
    pub fn validate(&self) -> Result<()> {
        if !self.b.is_finite() {
            return Err(CoreError::validation("terms.b must be finite"));
        }
        if !self.s_cap.is_finite() || self.s_cap < 0.0 {
            return Err(CoreError::validation(format!(
                "terms.s_cap must be finite and >= 0, got {}",
                self.s_cap
            )));
        }
        Ok(())
    }
}

/// Everything the toolchain needs to know about one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: String,
    pub grid: TimeGrid,
    /// Non-controlled load forecast `l(t)`, kW.
    pub load_forecast: Series,
    /// Demand diffusion intensity `sigma_tilde(t)`, kW sqrt(h).
    pub load_sigma: Series,
    /// Retail tariff `mu(t)`, $/kWh.
    pub tariff: Series,
    pub etp: EtpParams,
    pub comfort: ComfortParams,
    /// Admissible control levels, kW, strictly ascending.
    pub control_set: Vec<f64>,
    pub terms: ContractTerms,
}

impl AgentSpec {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        for (name, s) in [
            ("load_forecast", &self.load_forecast),
            ("load_sigma", &self.load_sigma),
            ("tariff", &self.tariff),
            ("etp.theta_out", &self.etp.theta_out),
        ] {
            s.validate()?;
            if !s.grid.same_as(&self.grid) {
                return Err(CoreError::validation(format!(
                    "agent {}: sequence {name} is on a different grid",
                    self.id
                )));
            }
        }
        self.etp.validate()?;
        self.comfort.validate()?;
        self.terms.validate()?;
        if self.load_sigma.min() < 0.0 {
            return Err(CoreError::validation(format!("agent {}: load_sigma must be >= 0", self.id)));
        }
        if self.tariff.min() < 0.0 {
            return Err(CoreError::validation(format!("agent {}: tariff must be >= 0", self.id)));
        }
        if self.control_set.is_empty() {
            return Err(CoreError::validation(format!("agent {}: control_set is empty", self.id)));
        }
        if self.control_set.iter().any(|u| !u.is_finite()) {
            return Err(CoreError::validation(format!("agent {}: control_set has non-finite levels", self.id)));
        }
        if self.control_set.windows(2).any(|p| p[0] >= p[1]) {
            return Err(CoreError::validation(format!(
                "agent {}: control_set must be strictly ascending",
                self.id
            )));
        }
        Ok(())
    }
}

/// The aggregator's side of the problem: risk-aversion and the agents it
/// contracts with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrincipalSpec {
    /// Exponential-utility risk-aversion coefficient, 1/$.
    pub theta: f64,
    pub agents: Vec<AgentSpec>,
}

impl PrincipalSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta.is_finite() && self.theta > 0.0) {
            return Err(CoreError::validation(format!("theta must be positive, got {}", self.theta)));
        }
        if self.agents.is_empty() {
            return Err(CoreError::validation("at least one agent is required"));
        }
        for a in &self.agents {
            a.validate()?;
            if !a.grid.same_as(&self.agents[0].grid) {
                return Err(CoreError::validation(format!("agent {} is on a different grid", a.id)));
            }
        }
        Ok(())
    }
}

/// Discomfort rate at temperature `x`: zero inside the band, linear with
/// slope `omega` outside, never positive.
pub fn comfort_rate(x: f64, comfort: &ComfortParams) -> f64 {
    -comfort.omega * ((x - comfort.theta_hi).max(0.0) + (comfort.theta_lo - x).max(0.0))
}

/// Temperature drift `alpha (theta_out(t) - x) - kappa u`.
pub fn etp_drift(t: f64, x: f64, u: f64, etp: &EtpParams) -> f64 {
    etp.alpha * (etp.theta_out.at(t) - x) - etp.kappa * u
}

/// Principal's running payoff rate `(mu - lambda)(u + l) + lambda p`, $/h.
pub fn principal_running_payoff(
    t: f64,
    w: f64,
    u: f64,
    agent: &AgentSpec,
    market: &MarketModel,
) -> f64 {
    let lambda = w.exp();
    (agent.tariff.at(t) - lambda) * (u + agent.load_forecast.at(t)) + lambda * market.p_alloc.at(t)
}

/// Agent's running payoff rate `-mu (l + u) + comfort(x)`, $/h.
pub fn agent_running_payoff(t: f64, x: f64, u: f64, agent: &AgentSpec) -> f64 {
    -agent.tariff.at(t) * (agent.load_forecast.at(t) + u) + comfort_rate(x, &agent.comfort)
}

/// Principal's exposure to the agent's demand noise,
/// `(mu - lambda) sigma_tilde`.
pub fn sigma_principal(t: f64, w: f64, agent: &AgentSpec) -> f64 {
    (agent.tariff.at(t) - w.exp()) * agent.load_sigma.at(t)
}

/// Agent's exposure to their own demand noise, `-mu sigma_tilde`.
pub fn sigma_agent(t: f64, agent: &AgentSpec) -> f64 {
    -agent.tariff.at(t) * agent.load_sigma.at(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn grid() -> TimeGrid {
        TimeGrid::new(10.0, 18.0, 0.01).unwrap()
    }

    /// Minimal single-value grid for pointwise payoff checks.
    fn unit_grid() -> TimeGrid {
        TimeGrid::new(0.0, 1.0, 1.0).unwrap()
    }

    fn test_agent(mu: f64, l: f64, sigma: f64, omega: f64) -> AgentSpec {
        let g = unit_grid();
        AgentSpec {
            id: "test".into(),
            grid: g,
            load_forecast: Series::constant(g, l),
            load_sigma: Series::constant(g, sigma),
            tariff: Series::constant(g, mu),
            etp: EtpParams {
                alpha: 0.1,
                kappa: 1.5,
                theta_out: Series::constant(g, 30.0),
                x0: 24.0,
            },
            comfort: ComfortParams { omega, theta_lo: 20.0, theta_hi: 22.0 },
            control_set: vec![0.0, 2.0],
            terms: ContractTerms { b: 0.0, s_cap: 1.0 },
        }
    }

    #[test]
    fn grid_step_count_and_times() {
        let g = grid();
        assert_eq!(g.n_steps(), 800);
        assert_eq!(g.time_at(0), 10.0);
        assert_relative_eq!(g.time_at(800), 18.0, epsilon = 1e-12);
        assert_eq!(g.index_of(10.0), 0);
        assert_eq!(g.index_of(10.005), 0);
        assert_eq!(g.index_of(17.999), 799);
        // the window end clamps into the last cell
        assert_eq!(g.index_of(18.0), 799);
    }

    #[test]
    fn grid_rejects_bad_parameters() {
        assert!(TimeGrid::new(10.0, 18.0, 0.0).is_err());
        assert!(TimeGrid::new(10.0, 18.0, -0.1).is_err());
        assert!(TimeGrid::new(18.0, 10.0, 0.01).is_err());
        // 8 h is not an integer number of 0.3 h steps
        assert!(TimeGrid::new(10.0, 18.0, 0.3).is_err());
    }

    #[test]
    fn series_lookup_matches_left_endpoint_exactly() {
        let g = TimeGrid::new(0.0, 4.0, 0.5).unwrap();
        let s = Series::new(g, (0..8).map(|k| k as f64 * 1.25).collect()).unwrap();
        for k in 0..8 {
            let left = g.time_at(k);
            for frac in [0.0, 0.1, 0.49, 0.999] {
                let t = left + frac * g.dt;
                assert_eq!(s.at(t), s.at(left), "cell {k} frac {frac}");
            }
        }
    }

    #[test]
    fn series_expand_repeats_hourly_values() {
        let g = TimeGrid::new(0.0, 2.0, 0.25).unwrap();
        let s = Series::expand(g, &[1.0, 3.0]).unwrap();
        assert_eq!(s.values, vec![1.0, 1.0, 1.0, 1.0, 3.0, 3.0, 3.0, 3.0]);
        assert!(Series::expand(g, &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn comfort_rate_inside_band_is_zero() {
        let c = ComfortParams { omega: 0.15, theta_lo: 20.0, theta_hi: 22.0 };
        assert_eq!(comfort_rate(21.0, &c), 0.0);
        assert_eq!(comfort_rate(20.0, &c), 0.0);
        assert_eq!(comfort_rate(22.0, &c), 0.0);
    }

    #[test]
    fn comfort_rate_above_band() {
        let c = ComfortParams { omega: 0.15, theta_lo: 20.0, theta_hi: 22.0 };
        assert_relative_eq!(comfort_rate(23.0, &c), -0.15, epsilon = 1e-12);
        assert_relative_eq!(comfort_rate(18.0, &c), -0.3, epsilon = 1e-12);
    }

    #[test]
    fn etp_drift_values() {
        let g = unit_grid();
        let etp =
            EtpParams { alpha: 0.1, kappa: 1.5, theta_out: Series::constant(g, 30.0), x0: 24.0 };
        assert_relative_eq!(etp_drift(0.0, 20.0, 0.0, &etp), 1.0, epsilon = 1e-12);
        assert_relative_eq!(etp_drift(0.0, 20.0, 2.0, &etp), -2.0, epsilon = 1e-12);
    }

    #[test]
    fn principal_running_payoff_value() {
        let agent = test_agent(0.11, 1.0, 0.3, 0.15);
        let market = MarketModel {
            grid: unit_grid(),
            r0: 0.5,
            nu: Series::constant(unit_grid(), 0.05f64.ln()),
            sigma0: Series::constant(unit_grid(), 0.2),
            lambda0: 0.05,
            p_alloc: Series::constant(unit_grid(), 1.0),
        };
        market.validate().unwrap();
        // (0.11 - 0.05) * (2 + 1) + 0.05 * 1 = 0.23
        let r = principal_running_payoff(0.0, 0.05f64.ln(), 2.0, &agent, &market);
        assert_relative_eq!(r, 0.23, epsilon = 1e-12);
    }

    #[test]
    fn agent_running_payoff_values() {
        let agent = test_agent(0.11, 1.0, 0.3, 0.15);
        // in band: -0.11 * (1 + 2) = -0.33
        assert_relative_eq!(agent_running_payoff(0.0, 21.0, 2.0, &agent), -0.33, epsilon = 1e-12);
        // one degree above band, idle: -0.11 - 0.15 = -0.26
        assert_relative_eq!(agent_running_payoff(0.0, 23.0, 0.0, &agent), -0.26, epsilon = 1e-12);
    }

    #[test]
    fn combined_noise_exposure_is_spot_price_times_demand_noise() {
        // sP + sA = (mu - lambda) sigma - mu sigma = -lambda sigma: the
        // tariff legs cancel and only the wholesale exposure remains.
        let agent = test_agent(0.11, 1.0, 0.3, 0.15);
        for w in [-3.0, -2.0, 0.5] {
            let s = sigma_principal(0.0, w, &agent) + sigma_agent(0.0, &agent);
            assert_relative_eq!(s, -w.exp() * 0.3, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn agent_validation_rejects_bad_control_sets() {
        let mut a = test_agent(0.11, 1.0, 0.3, 0.15);
        a.validate().unwrap();
        a.control_set = vec![];
        assert!(a.validate().is_err());
        a.control_set = vec![2.0, 0.0];
        assert!(a.validate().is_err());
        a.control_set = vec![0.0, 0.0];
        assert!(a.validate().is_err());
    }

    #[test]
    fn comfort_band_and_terms_validation() {
        assert!(ComfortParams { omega: -0.1, theta_lo: 20.0, theta_hi: 22.0 }.validate().is_err());
        assert!(ComfortParams { omega: 0.1, theta_lo: 22.0, theta_hi: 20.0 }.validate().is_err());
        assert!(ContractTerms { b: 0.0, s_cap: -1.0 }.validate().is_err());
        assert!(ContractTerms { b: f64::NAN, s_cap: 1.0 }.validate().is_err());
    }

    proptest! {
        #[test]
        fn comfort_rate_is_never_positive(x in 0.0f64..40.0, omega in 0.0f64..2.0) {
            let c = ComfortParams { omega, theta_lo: 20.0, theta_hi: 22.0 };
            prop_assert!(comfort_rate(x, &c) <= 0.0);
        }

        #[test]
        fn comfort_rate_is_zero_exactly_on_the_band(x in 20.0f64..=22.0) {
            let c = ComfortParams { omega: 0.15, theta_lo: 20.0, theta_hi: 22.0 };
            prop_assert_eq!(comfort_rate(x, &c), 0.0);
        }

        #[test]
        fn series_cell_lookup_is_constant_within_cells(
            k in 0usize..800,
            frac in 0.0f64..0.999,
        ) {
            let g = TimeGrid::new(10.0, 18.0, 0.01).unwrap();
            let s = Series::new(g, (0..800).map(|i| (i % 17) as f64).collect()).unwrap();
            let left = g.time_at(k);
            prop_assert_eq!(s.at(left + frac * g.dt), s.at(left));
        }
    }
}
