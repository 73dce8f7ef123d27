//! Model calibration from historical data.
//!
//! The price side fits the mean-reverting log-price diffusion
//!
//! ```text
//! dw = r0 (nu(t) - w) dt + sigma0(t) dW,   w = ln lambda
//! ```
//!
//! to a settlement-price history, with `nu` and `sigma0` piecewise
//! constant over equal time-of-day bins. For a trial reversion rate the
//! per-bin attractor and volatility maximize the Euler-discretized
//! Gaussian likelihood in closed form, so the whole fit is a
//! one-dimensional profile-likelihood search over `r0`, done by golden
//! section. Before fitting, log prices are centered on their global mean
//! and the attractor shifted back afterward, which keeps the fit invariant
//! (to rounding) under a relabeling of the price unit.
//!
//! The demand side estimates the noise scale `sigma_tilde(t)` of
//! uncontrolled consumption from a panel of daily cumulative trajectories:
//! the across-day variance of each step's increment estimates the local
//! variance rate (any deterministic daily profile cancels), and the
//! profile is rescaled once so the integrated variance equals the
//! across-day variance of total daily consumption exactly.

use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::models::{Series, TimeGrid};
use crate::stats::variance;

/// Lower end of the reversion-rate search.
const R0_FLOOR: f64 = 1e-6;
/// Golden-section interval tolerance (relative).
const SEARCH_TOL: f64 = 1e-10;
/// Fewest increments a seasonal bin may hold.
const MIN_BIN_OBS: usize = 10;

/// Which unit the price column of a CSV is quoted in.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriceUnit {
    #[default]
    UsdPerKwh,
    UsdPerMwh,
}

impl PriceUnit {
    /// Factor converting the quoted value to $/kWh.
    pub fn to_usd_per_kwh(self) -> f64 {
        match self {
            PriceUnit::UsdPerKwh => 1.0,
            PriceUnit::UsdPerMwh => 1e-3,
        }
    }
}

impl std::str::FromStr for PriceUnit {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "usd_per_kwh" => Ok(PriceUnit::UsdPerKwh),
            "usd_per_mwh" => Ok(PriceUnit::UsdPerMwh),
            other => Err(CoreError::validation(format!(
                "unknown price unit '{other}', expected usd_per_kwh or usd_per_mwh"
            ))),
        }
    }
}

/// A settlement-price history: observation times in hours (measured from
/// the first observation's midnight) and spot prices in $/kWh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceHistory {
    pub timestamps: Vec<f64>,
    pub prices: Vec<f64>,
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_local());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt);
        }
    }
    None
}

impl PriceHistory {
    pub fn new(timestamps: Vec<f64>, prices: Vec<f64>) -> Result<PriceHistory> {
        let h = PriceHistory { timestamps, prices };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.timestamps.len() != self.prices.len() {
            return Err(CoreError::validation("timestamps and prices differ in length"));
        }
        if self.timestamps.len() < 2 {
            return Err(CoreError::validation("price history needs at least two observations"));
        }
        if self.timestamps.windows(2).any(|p| p[1] <= p[0]) {
            return Err(CoreError::validation("timestamps must be strictly increasing"));
        }
        if self.prices.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(CoreError::validation(
                "prices must be positive and finite; the log transform needs them",
            ));
        }
        Ok(())
    }

    /// Observation spacing in hours; the fit requires it to be uniform.
    pub fn spacing(&self) -> Result<f64> {
        let dt = self.timestamps[1] - self.timestamps[0];
        for (i, pair) in self.timestamps.windows(2).enumerate() {
            if ((pair[1] - pair[0]) - dt).abs() > 1e-9 * dt.max(1.0) {
                return Err(CoreError::validation(format!(
                    "observations are unevenly spaced at index {}; resample before fitting",
                    i + 1
                )));
            }
        }
        Ok(dt)
    }

    /// Read a history from CSV columns `timestamp_iso8601,<price col>`,
    /// converting the quoted unit to $/kWh. Times become hours measured
    /// from the first observation's midnight, so time-of-day bins line up
    /// with the wall clock.
    pub fn read_csv(path: &Path, unit: PriceUnit) -> Result<PriceHistory> {
        let parse_err = |message: String| CoreError::Parse { path: path.to_path_buf(), message };
        let mut reader = csv::Reader::from_path(path).map_err(|e| parse_err(e.to_string()))?;
        let headers = reader.headers().map_err(|e| parse_err(e.to_string()))?.clone();
        let c_ts = headers
            .iter()
            .position(|h| h == "timestamp_iso8601")
            .ok_or_else(|| parse_err("missing column 'timestamp_iso8601'".into()))?;
        let price_col = match unit {
            PriceUnit::UsdPerKwh => "lmp_usd_per_kwh",
            PriceUnit::UsdPerMwh => "lmp_usd_per_mwh",
        };
        let c_p = headers
            .iter()
            .position(|h| h == price_col)
            .ok_or_else(|| parse_err(format!("missing column '{price_col}'")))?;

        let mut rows: Vec<(NaiveDateTime, f64)> = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let row = row.map_err(|e| parse_err(e.to_string()))?;
            let ts_raw = row
                .get(c_ts)
                .ok_or_else(|| parse_err(format!("row {i}: short record")))?
                .trim();
            let ts = parse_timestamp(ts_raw)
                .ok_or_else(|| parse_err(format!("row {i}: unparseable timestamp '{ts_raw}'")))?;
            let p: f64 = row
                .get(c_p)
                .ok_or_else(|| parse_err(format!("row {i}: short record")))?
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("row {i}: price: {e}")))?;
            rows.push((ts, p * unit.to_usd_per_kwh()));
        }
        if rows.len() < 2 {
            return Err(parse_err("price history needs at least two observations".into()));
        }
        let day0: NaiveDate = rows[0].0.date();
        let origin = day0.and_hms_opt(0, 0, 0).expect("midnight exists");
        let timestamps = rows
            .iter()
            .map(|(ts, _)| (*ts - origin).num_milliseconds() as f64 / 3_600_000.0)
            .collect();
        PriceHistory::new(timestamps, rows.into_iter().map(|r| r.1).collect())
    }
}

/// A stack of daily cumulative-consumption trajectories on one uniform
/// intra-day grid. Trajectories may decrease (net metering); they must
/// all have the same length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsumptionPanel {
    pub grid: TimeGrid,
    pub days: Vec<Vec<f64>>,
}

impl ConsumptionPanel {
    pub fn new(grid: TimeGrid, days: Vec<Vec<f64>>) -> Result<ConsumptionPanel> {
        let p = ConsumptionPanel { grid, days };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.days.is_empty() {
            return Err(CoreError::validation("consumption panel has no days"));
        }
        let want = self.grid.n_steps() + 1;
        for (d, day) in self.days.iter().enumerate() {
            if day.len() != want {
                return Err(CoreError::validation(format!(
                    "day {d} has {} observations, the grid needs {want}",
                    day.len()
                )));
            }
            if day.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::validation(format!("day {d} has non-finite values")));
            }
        }
        Ok(())
    }

    /// Read a panel from CSV columns `day_id,t_hours,cumulative_kwh`.
    /// Days may arrive interleaved; each must cover the same uniform grid.
    pub fn read_csv(path: &Path) -> Result<ConsumptionPanel> {
        let parse_err = |message: String| CoreError::Parse { path: path.to_path_buf(), message };
        let mut reader = csv::Reader::from_path(path).map_err(|e| parse_err(e.to_string()))?;
        let headers = reader.headers().map_err(|e| parse_err(e.to_string()))?.clone();
        let col = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| parse_err(format!("missing column '{name}'")))
        };
        let (c_day, c_t, c_v) = (col("day_id")?, col("t_hours")?, col("cumulative_kwh")?);

        use std::collections::BTreeMap;
        let mut by_day: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
        for (i, row) in reader.records().enumerate() {
            let row = row.map_err(|e| parse_err(e.to_string()))?;
            let get = |c: usize| -> Result<&str> {
                row.get(c).ok_or_else(|| parse_err(format!("row {i}: short record")))
            };
            let day: u64 = get(c_day)?
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("row {i}: day_id: {e}")))?;
            let t: f64 = get(c_t)?
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("row {i}: t_hours: {e}")))?;
            let v: f64 = get(c_v)?
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("row {i}: cumulative_kwh: {e}")))?;
            by_day.entry(day).or_default().push((t, v));
        }
        if by_day.is_empty() {
            return Err(parse_err("no rows".into()));
        }
        let mut reference: Option<Vec<f64>> = None;
        let mut days = Vec::with_capacity(by_day.len());
        for (day, mut rows) in by_day {
            rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let times: Vec<f64> = rows.iter().map(|r| r.0).collect();
            match &reference {
                None => reference = Some(times),
                Some(ref_times) => {
                    if ref_times.len() != times.len()
                        || ref_times.iter().zip(&times).any(|(a, b)| (a - b).abs() > 1e-9)
                    {
                        return Err(parse_err(format!(
                            "day {day} covers a different time grid than earlier days"
                        )));
                    }
                }
            }
            days.push(rows.into_iter().map(|r| r.1).collect());
        }
        let times = reference.unwrap();
        if times.len() < 2 {
            return Err(parse_err("each day needs at least two observations".into()));
        }
        let dt = times[1] - times[0];
        for (i, pair) in times.windows(2).enumerate() {
            if ((pair[1] - pair[0]) - dt).abs() > 1e-9 * dt.max(1.0) {
                return Err(parse_err(format!("uneven observation spacing at index {}", i + 1)));
            }
        }
        let grid = TimeGrid::new(times[0], times[times.len() - 1], dt)?;
        ConsumptionPanel::new(grid, days)
    }
}

/// Point estimates with asymptotic standard errors.
///
/// Standard errors are delta-method asymptotics: for the attractor,
/// `sigma0 / (r0 sqrt(n dt))` per bin; for a volatility, `sigma/sqrt(2n)`
/// per bin; for the reversion rate, the curvature of the profile
/// log-likelihood at its maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CalibrationResult {
    PriceModel {
        r0: f64,
        r0_se: f64,
        /// Attractor per time-of-day bin, on a `[0, 24]` hour grid.
        nu: Series,
        nu_se: Vec<f64>,
        /// Volatility per time-of-day bin, same grid.
        sigma0: Series,
        sigma0_se: Vec<f64>,
        log_likelihood: f64,
        /// Set when the history carries no movement at all; the fit then
        /// reports a frozen price (`r0 = 0`, `sigma0 = 0`, `nu = w`).
        degenerate: bool,
    },
    LoadDiffusion {
        /// Noise scale per panel step, on the panel's own grid.
        sigma_tilde: Series,
        sigma_tilde_se: Vec<f64>,
        log_likelihood: f64,
    },
}

impl CalibrationResult {
    pub fn log_likelihood(&self) -> f64 {
        match self {
            CalibrationResult::PriceModel { log_likelihood, .. } => *log_likelihood,
            CalibrationResult::LoadDiffusion { log_likelihood, .. } => *log_likelihood,
        }
    }
}

/// Per-bin closed-form estimates and profile log-likelihood at fixed
/// `r0`, over centered log prices. Returns `(nu, variance_rate, ll)`.
fn profile_at(
    w: &[f64],
    bin_of: &[usize],
    n_bins: usize,
    dt: f64,
    r0: f64,
) -> (Vec<f64>, Vec<f64>, f64) {
    let mut count = vec![0.0f64; n_bins];
    let mut sum = vec![0.0f64; n_bins];
    let mut sum_sq = vec![0.0f64; n_bins];
    for k in 0..w.len() - 1 {
        // residual against pure decay: r0 nu dt plus noise
        let m = w[k + 1] - w[k] + r0 * w[k] * dt;
        let b = bin_of[k];
        count[b] += 1.0;
        sum[b] += m;
        sum_sq[b] += m * m;
    }
    let mut nu = vec![0.0; n_bins];
    let mut var = vec![0.0; n_bins];
    let mut ll = 0.0;
    for b in 0..n_bins {
        let n = count[b];
        if n == 0.0 {
            continue;
        }
        let mean_m = sum[b] / n;
        nu[b] = mean_m / (r0 * dt);
        let resid = (sum_sq[b] / n - mean_m * mean_m).max(0.0);
        var[b] = resid / dt;
        ll += -0.5 * n * (resid.max(1e-300).ln() + 1.0);
    }
    (nu, var, ll)
}

/// Fit the mean-reverting price model to a history, with `seasonal_bins`
/// equal time-of-day bins for the attractor and volatility.
///
/// Requires uniform observation spacing, positive prices, and at least
/// ten increments per bin. A history with no movement at all comes back
/// flagged degenerate.
pub fn fit_ou_params(history: &PriceHistory, seasonal_bins: usize) -> Result<CalibrationResult> {
    history.validate()?;
    if seasonal_bins == 0 {
        return Err(CoreError::validation("need at least one seasonal bin"));
    }
    let dt = history.spacing()?;
    let bins = TimeGrid::new(0.0, 24.0, 24.0 / seasonal_bins as f64)?;

    let n_inc = history.timestamps.len() - 1;
    let bin_of: Vec<usize> = history.timestamps[..n_inc]
        .iter()
        .map(|&t| bins.index_of(t.rem_euclid(24.0)))
        .collect();
    let mut per_bin = vec![0usize; seasonal_bins];
    for &b in &bin_of {
        per_bin[b] += 1;
    }
    if let Some(b) = per_bin.iter().position(|&c| c < MIN_BIN_OBS) {
        return Err(CoreError::validation(format!(
            "seasonal bin {b} has {} increments, need at least {MIN_BIN_OBS}; \
             use fewer bins or more data",
            per_bin[b]
        )));
    }

    let w_raw: Vec<f64> = history.prices.iter().map(|p| p.ln()).collect();

    // no movement anywhere: a frozen price
    if w_raw.windows(2).all(|p| p[1] == p[0]) {
        return Ok(CalibrationResult::PriceModel {
            r0: 0.0,
            r0_se: 0.0,
            nu: Series::constant(bins, w_raw[0]),
            nu_se: vec![0.0; seasonal_bins],
            sigma0: Series::constant(bins, 0.0),
            sigma0_se: vec![0.0; seasonal_bins],
            log_likelihood: f64::INFINITY,
            degenerate: true,
        });
    }

    // center the log prices so relabeling the price unit (a constant
    // shift of w) cannot perturb the search through rounding; the
    // attractor is shifted back at the end
    let w_bar = w_raw.iter().sum::<f64>() / w_raw.len() as f64;
    let w: Vec<f64> = w_raw.iter().map(|v| v - w_bar).collect();

    let ll = |r0: f64| profile_at(&w, &bin_of, seasonal_bins, dt, r0).2;
    let lo = R0_FLOOR;
    let hi = 0.9 / dt;

    // golden-section maximization of the profile likelihood
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (ll(c), ll(d));
    while (b - a) > SEARCH_TOL * b.max(1.0) {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = ll(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = ll(d);
        }
    }
    let r0 = 0.5 * (a + b);
    let (nu_centered, var, log_likelihood) = profile_at(&w, &bin_of, seasonal_bins, dt, r0);

    // curvature of the profile likelihood gives the reversion rate's SE
    let h = (1e-4 * r0).max(1e-8);
    let curv = (ll(r0 + h) - 2.0 * log_likelihood + ll(r0 - h)) / (h * h);
    let r0_se = if curv < 0.0 { (-1.0 / curv).sqrt() } else { f64::INFINITY };

    let nu: Vec<f64> = nu_centered.iter().map(|v| v + w_bar).collect();
    let sigma0: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    let nu_se: Vec<f64> = (0..seasonal_bins)
        .map(|b| sigma0[b] / (r0 * (per_bin[b] as f64 * dt).sqrt()))
        .collect();
    let sigma0_se: Vec<f64> =
        (0..seasonal_bins).map(|b| sigma0[b] / (2.0 * per_bin[b] as f64).sqrt()).collect();

    Ok(CalibrationResult::PriceModel {
        r0,
        r0_se,
        nu: Series::new(bins, nu)?,
        nu_se,
        sigma0: Series::new(bins, sigma0)?,
        sigma0_se,
        log_likelihood,
        degenerate: false,
    })
}

/// Estimate the demand-noise scale from a consumption panel.
///
/// Per step, the across-day variance of the increment divided by the
/// spacing estimates the local variance rate; any deterministic daily
/// profile cancels in the differences. The profile is rescaled once so
/// the integrated variance equals the across-day variance of total daily
/// consumption exactly — the quantity the risk-budget arithmetic uses.
pub fn fit_load_diffusion(panel: &ConsumptionPanel) -> Result<CalibrationResult> {
    panel.validate()?;
    if panel.days.len() < 2 {
        return Err(CoreError::validation(
            "variance across days is undefined for a single trajectory",
        ));
    }
    let dt = panel.grid.dt;
    let n_steps = panel.grid.n_steps();
    let n_days = panel.days.len();

    let mut var_rate = vec![0.0; n_steps];
    let mut incs = vec![0.0; n_days];
    for k in 0..n_steps {
        for (d, day) in panel.days.iter().enumerate() {
            incs[d] = day[k + 1] - day[k];
        }
        var_rate[k] = variance(&incs) / dt;
    }

    // rescale so the integrated variance matches the totals' variance
    let totals: Vec<f64> = panel.days.iter().map(|day| day[day.len() - 1] - day[0]).collect();
    let total_var = variance(&totals);
    let integral: f64 = var_rate.iter().map(|v| v * dt).sum();
    if integral > 0.0 {
        let scale = total_var / integral;
        for v in var_rate.iter_mut() {
            *v *= scale;
        }
    }
    let sigma_tilde: Vec<f64> = var_rate.iter().map(|v| v.max(0.0).sqrt()).collect();

    // Gaussian log-likelihood of the increments under the fitted scale
    let mut ll = 0.0;
    let mut perfect = true;
    for k in 0..n_steps {
        let s2 = var_rate[k] * dt;
        if s2 > 0.0 {
            perfect = false;
            let mut rss = 0.0;
            let mean_k: f64 =
                panel.days.iter().map(|d| d[k + 1] - d[k]).sum::<f64>() / n_days as f64;
            for day in &panel.days {
                let e = (day[k + 1] - day[k]) - mean_k;
                rss += e * e;
            }
            ll += -0.5 * (n_days as f64 * s2.ln() + rss / s2);
        }
    }
    let log_likelihood = if perfect { f64::INFINITY } else { ll };

    let se: Vec<f64> =
        sigma_tilde.iter().map(|s| s / (2.0 * (n_days as f64 - 1.0)).sqrt()).collect();

    Ok(CalibrationResult::LoadDiffusion {
        sigma_tilde: Series::new(panel.grid, sigma_tilde)?,
        sigma_tilde_se: se,
        log_likelihood,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Two-level daily pattern: calm mornings, loud afternoons.
    fn true_nu(tod: f64) -> f64 {
        if (12.0..18.0).contains(&tod) {
            -2.6
        } else {
            -3.1
        }
    }

    fn true_sigma0(tod: f64) -> f64 {
        if (12.0..18.0).contains(&tod) {
            0.35
        } else {
            0.15
        }
    }

    /// One long OU path over `days` days at 5-minute spacing.
    fn synth_history(days: usize, seed: u64, r0: f64) -> PriceHistory {
        let dt = 1.0 / 12.0;
        let n = days * 288;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = -3.0f64;
        let mut timestamps = Vec::with_capacity(n + 1);
        let mut prices = Vec::with_capacity(n + 1);
        timestamps.push(0.0);
        prices.push(w.exp());
        for k in 0..n {
            let t = k as f64 * dt;
            let tod = t.rem_euclid(24.0);
            let z: f64 = StandardNormal.sample(&mut rng);
            w += r0 * (true_nu(tod) - w) * dt + true_sigma0(tod) * dt.sqrt() * z;
            timestamps.push((k + 1) as f64 * dt);
            prices.push(w.exp());
        }
        PriceHistory::new(timestamps, prices).unwrap()
    }

    fn price_parts(
        r: &CalibrationResult,
    ) -> (f64, &Series, &Series, bool) {
        match r {
            CalibrationResult::PriceModel { r0, nu, sigma0, degenerate, .. } => {
                (*r0, nu, sigma0, *degenerate)
            }
            _ => panic!("expected a price-model result"),
        }
    }

    #[test]
    fn recovers_reversion_and_volatility_pattern() {
        let r0_true = 0.5;
        let history = synth_history(60, 11, r0_true);
        let fit = fit_ou_params(&history, 24).unwrap();
        let (r0, nu, sigma0, degenerate) = price_parts(&fit);
        assert!(!degenerate);
        assert!((r0 - r0_true).abs() < 0.15 * r0_true, "r0 {r0} vs true {r0_true}");
        for b in 0..24 {
            let t = b as f64 + 0.5;
            let got = sigma0.at(t);
            let want = true_sigma0(t);
            assert!((got - want).abs() < 0.08 * want, "sigma0 bin {b}: {got} vs {want}");
        }
        // attractor recovery is noisier; check the two levels on average
        let calm: f64 = (0..12).map(|b| nu.at(b as f64 + 0.5)).sum::<f64>() / 12.0;
        let loud: f64 = (12..18).map(|b| nu.at(b as f64 + 0.5)).sum::<f64>() / 6.0;
        assert!((calm - -3.1).abs() < 0.12, "calm nu {calm}");
        assert!((loud - -2.6).abs() < 0.12, "loud nu {loud}");
    }

    #[test]
    fn price_unit_relabeling_shifts_attractor_only() {
        // quoting the same prices in a unit 1000x smaller shifts the log
        // by ln 1000; the fitted dynamics must not notice beyond rounding
        let history = synth_history(20, 3, 0.5);
        let scaled = PriceHistory::new(
            history.timestamps.clone(),
            history.prices.iter().map(|p| p / 1000.0).collect(),
        )
        .unwrap();
        let fit = fit_ou_params(&history, 24).unwrap();
        let fit_scaled = fit_ou_params(&scaled, 24).unwrap();
        let (r0_a, nu_a, s_a, _) = price_parts(&fit);
        let (r0_b, nu_b, s_b, _) = price_parts(&fit_scaled);
        let shift = 1000.0f64.ln();
        assert!(
            (r0_a - r0_b).abs() < 1e-5 * (1.0 + r0_a),
            "r0 {r0_a} vs scaled {r0_b} (delta {:.3e})",
            (r0_a - r0_b).abs()
        );
        for b in 0..24 {
            let t = b as f64 + 0.5;
            assert!((s_a.at(t) - s_b.at(t)).abs() < 1e-6);
            assert!(
                (nu_b.at(t) - (nu_a.at(t) - shift)).abs() < 1e-5,
                "bin {b} attractor shift off: {} vs {}",
                nu_b.at(t),
                nu_a.at(t) - shift
            );
        }
    }

    #[test]
    fn frozen_price_series_is_flagged_degenerate() {
        // constant price e^3: the noise-free fixed point pins nu = 3
        let n = 400;
        let timestamps: Vec<f64> = (0..n).map(|k| k as f64 * 0.5).collect();
        let prices = vec![3.0f64.exp(); n];
        let history = PriceHistory::new(timestamps, prices).unwrap();
        let fit = fit_ou_params(&history, 4).unwrap();
        let (r0, nu, sigma0, degenerate) = price_parts(&fit);
        assert!(degenerate);
        assert_eq!(r0, 0.0);
        assert!(sigma0.values.iter().all(|&v| v == 0.0));
        assert!(nu.values.iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn rejects_bad_histories_and_thin_bins() {
        // non-positive price
        assert!(PriceHistory::new(vec![0.0, 1.0], vec![1.0, -0.5]).is_err());
        // non-increasing timestamps
        assert!(PriceHistory::new(vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
        // uneven spacing
        let h = PriceHistory::new(vec![0.0, 1.0, 3.0], vec![1.0, 1.0, 1.0]).unwrap();
        assert!(fit_ou_params(&h, 1).is_err());
        // too few observations per bin
        let h = PriceHistory::new(
            (0..30).map(|k| k as f64).collect(),
            vec![1.0; 30],
        )
        .unwrap();
        assert!(fit_ou_params(&h, 24).is_err());
    }

    fn synth_panel(days: usize, seed: u64, with_profile: bool) -> ConsumptionPanel {
        let obs = TimeGrid::new(0.0, 24.0, 1.0 / 12.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dt = obs.dt;
        let sig = |t: f64| if (10.0..16.0).contains(&t) { 0.5 } else { 0.2 };
        let days: Vec<Vec<f64>> = (0..days)
            .map(|_| {
                let mut eta = 0.0;
                let mut day = vec![eta];
                for k in 0..obs.n_steps() {
                    let t = obs.time_at(k);
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let drift = if with_profile { 1.2 + (t / 4.0).sin() } else { 0.0 };
                    eta += drift * dt + sig(t) * dt.sqrt() * z;
                    day.push(eta);
                }
                day
            })
            .collect();
        ConsumptionPanel::new(obs, days).unwrap()
    }

    fn diffusion_parts(r: &CalibrationResult) -> &Series {
        match r {
            CalibrationResult::LoadDiffusion { sigma_tilde, .. } => sigma_tilde,
            _ => panic!("expected a load-diffusion result"),
        }
    }

    #[test]
    fn load_diffusion_recovers_pattern_and_matches_total_variance_exactly() {
        let panel = synth_panel(400, 21, true);
        let fit = fit_load_diffusion(&panel).unwrap();
        let sigma = diffusion_parts(&fit);

        // per-step estimates are noisy; average the variance rate per hour
        let want = |t: f64| if (10.0..16.0).contains(&t) { 0.5 } else { 0.2 };
        let steps_per_hour = (1.0 / panel.grid.dt).round() as usize;
        for b in 0..24 {
            let lo = b * steps_per_hour;
            let mean_var: f64 = sigma.values[lo..lo + steps_per_hour]
                .iter()
                .map(|s| s * s)
                .sum::<f64>()
                / steps_per_hour as f64;
            let got = mean_var.sqrt();
            let w = want(b as f64 + 0.5);
            assert!((got - w).abs() < 0.12 * w, "hour {b}: {got} vs {w}");
        }

        // the integral identity is exact by construction
        let totals: Vec<f64> = panel.days.iter().map(|d| d[d.len() - 1] - d[0]).collect();
        let total_var = variance(&totals);
        let integral: f64 =
            sigma.values.iter().map(|s| s * s * panel.grid.dt).sum();
        assert!(
            (integral - total_var).abs() <= 1e-12 * total_var,
            "integral {integral} vs total variance {total_var}"
        );
    }

    #[test]
    fn load_diffusion_scale_and_shift_properties() {
        let panel = synth_panel(50, 5, true);
        let fit = diffusion_parts(&fit_load_diffusion(&panel).unwrap()).clone();

        // scaling every trajectory by c scales sigma by c
        let c = 3.5;
        let scaled = ConsumptionPanel::new(
            panel.grid,
            panel.days.iter().map(|d| d.iter().map(|v| v * c).collect()).collect(),
        )
        .unwrap();
        let fit_scaled = diffusion_parts(&fit_load_diffusion(&scaled).unwrap()).clone();
        for (a, b) in fit.values.iter().zip(&fit_scaled.values) {
            assert!((b - a * c).abs() <= 1e-9 * (1.0 + a * c), "{b} vs {}", a * c);
        }

        // adding a deterministic profile to every day changes nothing
        let profile: Vec<f64> =
            (0..panel.grid.n_steps() + 1).map(|k| 5.0 + 0.3 * (k as f64).sqrt()).collect();
        let shifted = ConsumptionPanel::new(
            panel.grid,
            panel
                .days
                .iter()
                .map(|d| d.iter().zip(&profile).map(|(v, p)| v + p).collect())
                .collect(),
        )
        .unwrap();
        let fit_shifted = diffusion_parts(&fit_load_diffusion(&shifted).unwrap()).clone();
        for (a, b) in fit.values.iter().zip(&fit_shifted.values) {
            assert!((b - a).abs() <= 1e-9 * (1.0 + a), "{b} vs {a}");
        }
    }

    #[test]
    fn identical_days_give_zero_noise_and_single_day_errors() {
        let obs = TimeGrid::new(0.0, 24.0, 1.0).unwrap();
        let day: Vec<f64> = (0..25).map(|k| k as f64 * 0.8).collect();
        let panel = ConsumptionPanel::new(obs, vec![day.clone(), day.clone(), day.clone()]).unwrap();
        let fit = fit_load_diffusion(&panel).unwrap();
        assert!(diffusion_parts(&fit).values.iter().all(|&v| v == 0.0));

        let single = ConsumptionPanel::new(obs, vec![day]).unwrap();
        assert!(fit_load_diffusion(&single).is_err());
    }

    #[test]
    fn price_csv_parses_iso_timestamps_and_converts_units() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prices.csv");
        std::fs::write(
            &path,
            "timestamp_iso8601,lmp_usd_per_mwh\n\
             2024-06-01T00:00:00,45.0\n\
             2024-06-01T01:00:00,47.5\n\
             2024-06-01T02:00:00,50.0\n",
        )
        .unwrap();
        let h = PriceHistory::read_csv(&path, PriceUnit::UsdPerMwh).unwrap();
        assert_eq!(h.timestamps, vec![0.0, 1.0, 2.0]);
        assert!((h.prices[0] - 0.045).abs() < 1e-15);
        assert!((h.prices[2] - 0.050).abs() < 1e-15);

        // same file quoted per kWh must name its column accordingly
        assert!(PriceHistory::read_csv(&path, PriceUnit::UsdPerKwh).is_err());

        std::fs::write(&path, "timestamp_iso8601,lmp_usd_per_mwh\nnot-a-time,45.0\nx,1\n").unwrap();
        assert!(matches!(
            PriceHistory::read_csv(&path, PriceUnit::UsdPerMwh),
            Err(CoreError::Parse { .. })
        ));
    }

    #[test]
    fn consumption_csv_round_trip_and_grid_checks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("load.csv");
        let mut text = String::from("day_id,t_hours,cumulative_kwh\n");
        for day in 0..3 {
            for k in 0..5 {
                let t = k as f64 * 0.25;
                let v = 0.3 * k as f64 + day as f64 * 0.01;
                text.push_str(&format!("{day},{t},{v}\n"));
            }
        }
        std::fs::write(&path, &text).unwrap();
        let panel = ConsumptionPanel::read_csv(&path).unwrap();
        assert_eq!(panel.days.len(), 3);
        assert_eq!(panel.days[0].len(), 5);
        assert!(panel.grid.same_as(&TimeGrid::new(0.0, 1.0, 0.25).unwrap()));

        // a day on a different grid is rejected
        std::fs::write(&path, format!("{text}9,0.1,0.5\n")).unwrap();
        assert!(ConsumptionPanel::read_csv(&path).is_err());
    }
}
