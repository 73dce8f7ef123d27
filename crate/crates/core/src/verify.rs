//! Monte Carlo verification of contract guarantees and baseline
//! comparisons.
//!
//! A closed-loop experiment leaves behind a [`TrajectoryBundle`] of
//! per-path payoffs. This module reduces such bundles to a
//! [`VerificationReport`]: the participation check (mean agent payoff
//! pinned to the promised payment), the risk-limiting check (agent payoff
//! variance inside the contracted budget), and the budget-floor check
//! (terminal budget nonnegative on almost every path). Failures are
//! report entries, never errors — the raw estimates, standard errors,
//! and thresholds are always included so a reader can judge the margin.
//!
//! [`compare_to_baseline`] sets a contracted run against a no-contract
//! run driven by the same noise source (common random numbers), reporting
//! the aggregator's variance with and without the contract, the percent
//! risk reduction, and the mean-payoff delta.
//!
//! [`risk_sensitive_estimate`] is the exponential-utility certainty
//! equivalent `-(1/theta) log E[exp(-theta X)]`, computed with max-shift
//! stabilization and a leave-one-out jackknife standard error.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::models::ContractTerms;
use crate::simulate::TrajectoryBundle;
use crate::stats::{mean, se_mean, se_variance, variance};

/// Fewest paths a statistical verification is allowed to run on.
pub const MIN_VERIFY_PATHS: usize = 100;

/// Absolute floor on the participation band, relative to `1 + |b|`.
/// Sample means of bit-identical payoffs still pick up a few ulps of
/// accumulator rounding, which would otherwise fail a noiseless run
/// against its 3-standard-error band of exactly zero. The floor is far
/// below any statistical scale, so it only forgives rounding.
const MEAN_ROUNDING_FLOOR: f64 = 1e-12;

/// Header for the flat CSV emission of reports (one row per quantity).
pub const REPORT_CSV_HEADER: &str = "label,kind,name,value,standard_error,threshold,pass";

/// Slack knobs for the pass/fail rules. Every number that feeds a
/// verdict lives here and nowhere else.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Multiplicative slack on the variance budget: the risk-limiting
    /// check passes when `Var(J_A) <= s_cap * (1 + var_slack) + 3 SE`.
    pub var_slack: f64,
    /// How far below zero the raw terminal budget may dip before a path
    /// counts as a violation, relative to the cap: the floor is
    /// `-budget_dip_rel * s_cap`.
    pub budget_dip_rel: f64,
    /// Largest acceptable fraction of violating paths.
    pub max_violation_frac: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        // var_slack covers grid-interpolation slack seen in convergence
        // runs; the budget floor only forgives rounding, not policy.
        Tolerances { var_slack: 0.05, budget_dip_rel: 1e-6, max_violation_frac: 0.01 }
    }
}

/// Certainty-equivalent value of a payoff sample with its jackknife
/// standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CeEstimate {
    pub value: f64,
    pub standard_error: f64,
}

/// One pass/fail line of a report: the quantity, its sampling error,
/// the threshold it was held to, and the verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub estimate: f64,
    pub standard_error: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// First two moments of a payoff sample with standard errors and range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub mean: f64,
    pub se_mean: f64,
    pub variance: f64,
    pub se_variance: f64,
    pub min: f64,
    pub max: f64,
}

impl SampleStats {
    pub fn from_samples(xs: &[f64]) -> SampleStats {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &x in xs {
            lo = lo.min(x);
            hi = hi.max(x);
        }
        SampleStats {
            mean: mean(xs),
            se_mean: se_mean(xs),
            variance: variance(xs),
            se_variance: se_variance(xs),
            min: lo,
            max: hi,
        }
    }
}

/// Side-by-side of a contracted run and a no-contract run on common
/// random numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineComparison {
    /// Both bundles used the same noise source, grid, and path count, so
    /// per-path differences cancel the shared randomness.
    pub crn_matched: bool,
    /// Set when the pairing is broken; the comparison stands but its
    /// deltas carry independent-sample noise.
    pub warning: Option<String>,
    pub var_with_contract: f64,
    pub se_var_with: f64,
    pub var_without_contract: f64,
    pub se_var_without: f64,
    /// `100 * (1 - var_with / var_without)`; 0 when the baseline
    /// variance is 0.
    pub risk_reduction_pct: f64,
    /// `mean(J_P with) - mean(J_P without)`: what the aggregator gives up
    /// (negative) or gains (positive) in expectation by contracting.
    pub mean_delta: f64,
    pub se_mean_delta: f64,
    /// Certainty equivalents at the aversion the comparison was asked
    /// for; plain means when that aversion is zero.
    pub ce_with_contract: f64,
    pub ce_without_contract: f64,
}

/// Everything a verification run concluded, raw numbers included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub n_paths: usize,
    pub tolerances: Tolerances,
    pub checks: Vec<CheckResult>,
    pub agent_payoff: SampleStats,
    pub principal_payoff: SampleStats,
    pub compensation: SampleStats,
    /// Aggregator's certainty equivalent, when an aversion was supplied.
    pub principal_certainty_equivalent: Option<CeEstimate>,
    pub baseline: Option<BaselineComparison>,
}

impl VerificationReport {
    /// True when every check line passed.
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::numerical(format!("report serialization failed: {e}")))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| CoreError::io(path, e))?;
        Ok(())
    }

    /// Flat CSV rows (no header) for spreadsheet plotting; `label` tags
    /// every row so sweep results from many reports can be concatenated.
    pub fn csv_rows(&self, label: &str) -> String {
        let mut out = String::new();
        let mut row = |kind: &str, name: &str, value: f64, se: f64, thr: String, pass: String| {
            out.push_str(&format!("{label},{kind},{name},{value},{se},{thr},{pass}\n"));
        };
        for c in &self.checks {
            row(
                "check",
                &c.name,
                c.estimate,
                c.standard_error,
                c.threshold.to_string(),
                c.pass.to_string(),
            );
        }
        let summaries = [
            ("agent_payoff_mean", self.agent_payoff.mean, self.agent_payoff.se_mean),
            ("agent_payoff_variance", self.agent_payoff.variance, self.agent_payoff.se_variance),
            ("principal_payoff_mean", self.principal_payoff.mean, self.principal_payoff.se_mean),
            (
                "principal_payoff_variance",
                self.principal_payoff.variance,
                self.principal_payoff.se_variance,
            ),
            ("compensation_mean", self.compensation.mean, self.compensation.se_mean),
        ];
        for (name, v, se) in summaries {
            row("summary", name, v, se, String::new(), String::new());
        }
        if let Some(ce) = &self.principal_certainty_equivalent {
            row(
                "summary",
                "principal_certainty_equivalent",
                ce.value,
                ce.standard_error,
                String::new(),
                String::new(),
            );
        }
        if let Some(b) = &self.baseline {
            row("baseline", "var_with_contract", b.var_with_contract, b.se_var_with, String::new(), String::new());
            row(
                "baseline",
                "var_without_contract",
                b.var_without_contract,
                b.se_var_without,
                String::new(),
                String::new(),
            );
            row("baseline", "risk_reduction_pct", b.risk_reduction_pct, 0.0, String::new(), String::new());
            row("baseline", "mean_delta", b.mean_delta, b.se_mean_delta, String::new(), String::new());
            row("baseline", "ce_with_contract", b.ce_with_contract, 0.0, String::new(), String::new());
            row("baseline", "ce_without_contract", b.ce_without_contract, 0.0, String::new(), String::new());
        }
        out
    }

    /// Write header plus this report's rows to one file.
    pub fn write_csv(&self, path: &Path, label: &str) -> Result<()> {
        let text = format!("{REPORT_CSV_HEADER}\n{}", self.csv_rows(label));
        std::fs::write(path, text).map_err(|e| CoreError::io(path, e))?;
        Ok(())
    }
}

/// Exponential-utility certainty equivalent of a payoff sample,
/// `-(1/theta) log mean(exp(-theta x))`, with a leave-one-out jackknife
/// standard error.
///
/// The log-mean-exp runs max-shifted so huge magnitudes cannot overflow,
/// and the jackknife reuses the one shifted sum, so the whole estimate is
/// a single pass plus one pass of leave-one-out arithmetic. Zero aversion
/// is rejected: the degenerate case is the plain sample mean and callers
/// should compute that directly.
pub fn risk_sensitive_estimate(samples: &[f64], theta: f64) -> Result<CeEstimate> {
    if samples.is_empty() {
        return Err(CoreError::validation("certainty equivalent of an empty sample"));
    }
    if !theta.is_finite() || theta == 0.0 {
        return Err(CoreError::validation(
            "risk aversion must be finite and nonzero; at zero the certainty equivalent \
             degenerates to the sample mean — compute that instead",
        ));
    }
    let n = samples.len();
    // z_i = -theta x_i, shifted by the max so every exp is <= 1
    let mut m = f64::NEG_INFINITY;
    for &x in samples {
        m = m.max(-theta * x);
    }
    if !m.is_finite() {
        return Err(CoreError::numerical("certainty equivalent: non-finite sample"));
    }
    let terms: Vec<f64> = samples.iter().map(|&x| (-theta * x - m).exp()).collect();
    let total: f64 = terms.iter().sum();
    let value = -(m + (total / n as f64).ln()) / theta;
    if n < 2 {
        return Ok(CeEstimate { value, standard_error: f64::INFINITY });
    }
    // leave-one-out replicates from the same shifted sum
    let loo: Vec<f64> =
        terms.iter().map(|&e| -(m + ((total - e) / (n - 1) as f64).ln()) / theta).collect();
    if loo.iter().any(|v| !v.is_finite()) {
        // one sample dominates the whole tail; the jackknife is honest
        // about having no idea
        return Ok(CeEstimate { value, standard_error: f64::INFINITY });
    }
    let loo_mean = mean(&loo);
    let ss: f64 = loo.iter().map(|v| (v - loo_mean) * (v - loo_mean)).sum();
    let standard_error = ((n - 1) as f64 / n as f64 * ss).sqrt();
    Ok(CeEstimate { value, standard_error })
}

/// Check a closed-loop bundle against the contract it claims to honor.
///
/// Three lines, in order: the participation check (`|mean(J_A) - b|`
/// within three standard errors), the risk-limiting check (`Var(J_A)`
/// within the budget cap plus slack), and the budget-floor check (the
/// fraction of paths whose raw terminal budget dips below the floor).
/// Pass `Some(theta)` to also report the aggregator's certainty
/// equivalent at that aversion. Failures are report entries; the only
/// errors are malformed inputs. Deterministic given the bundle.
pub fn verify_conditions(
    bundle: &TrajectoryBundle,
    terms: &ContractTerms,
    tol: &Tolerances,
    theta: Option<f64>,
) -> Result<VerificationReport> {
    let n = bundle.summaries.len();
    if n < MIN_VERIFY_PATHS {
        return Err(CoreError::validation(format!(
            "statistical verification needs at least {MIN_VERIFY_PATHS} paths, got {n}"
        )));
    }
    let ja: Vec<f64> = bundle.summaries.iter().map(|s| s.agent_payoff).collect();
    let jp: Vec<f64> = bundle.summaries.iter().map(|s| s.principal_payoff).collect();
    let comp: Vec<f64> = bundle.summaries.iter().map(|s| s.compensation).collect();

    let agent = SampleStats::from_samples(&ja);
    let principal = SampleStats::from_samples(&jp);
    let compensation = SampleStats::from_samples(&comp);

    let mut checks = Vec::with_capacity(3);

    let gap = agent.mean - terms.b;
    let gap_band = 3.0 * agent.se_mean + MEAN_ROUNDING_FLOOR * (1.0 + terms.b.abs());
    checks.push(CheckResult {
        name: "participation_payoff_gap".into(),
        estimate: gap,
        standard_error: agent.se_mean,
        threshold: gap_band,
        pass: gap.abs() <= gap_band,
    });

    // The squared rounding floor keeps a zero-cap contract from failing on
    // the accumulation noise of an exactly-constant payoff.
    let var_floor = (MEAN_ROUNDING_FLOOR * (1.0 + terms.b.abs())).powi(2);
    let var_cap = terms.s_cap * (1.0 + tol.var_slack) + 3.0 * agent.se_variance + var_floor;
    checks.push(CheckResult {
        name: "risk_limiting_variance".into(),
        estimate: agent.variance,
        standard_error: agent.se_variance,
        threshold: var_cap,
        pass: agent.variance <= var_cap,
    });

    let floor = -tol.budget_dip_rel * terms.s_cap;
    let violations =
        bundle.summaries.iter().filter(|s| s.budget_terminal_raw < floor).count();
    let frac = violations as f64 / n as f64;
    let frac_se = (frac * (1.0 - frac) / n as f64).sqrt();
    checks.push(CheckResult {
        name: "budget_floor_violations".into(),
        estimate: frac,
        standard_error: frac_se,
        threshold: tol.max_violation_frac,
        pass: frac <= tol.max_violation_frac,
    });

    let principal_certainty_equivalent = match theta {
        Some(t) => Some(risk_sensitive_estimate(&jp, t)?),
        None => None,
    };

    Ok(VerificationReport {
        n_paths: n,
        tolerances: *tol,
        checks,
        agent_payoff: agent,
        principal_payoff: principal,
        compensation,
        principal_certainty_equivalent,
        baseline: None,
    })
}

/// Set a contracted run against a no-contract run.
///
/// Both bundles should come from the same noise source so per-path
/// differences cancel the shared randomness; when they do not, the
/// comparison still runs but carries a warning and independent-sample
/// error bars. Zero aversion reports plain means as the certainty
/// equivalents.
pub fn compare_to_baseline(
    contracted: &TrajectoryBundle,
    baseline: &TrajectoryBundle,
    theta: f64,
) -> Result<BaselineComparison> {
    if contracted.summaries.len() < 2 || baseline.summaries.len() < 2 {
        return Err(CoreError::validation("baseline comparison needs at least 2 paths per side"));
    }
    let with: Vec<f64> = contracted.summaries.iter().map(|s| s.principal_payoff).collect();
    let without: Vec<f64> = baseline.summaries.iter().map(|s| s.principal_payoff).collect();

    let crn_matched = contracted.noise == baseline.noise
        && contracted.grid == baseline.grid
        && with.len() == without.len();
    let warning = if crn_matched {
        None
    } else {
        Some(
            "noise sources differ between the two runs; the common-random-numbers pairing \
             is lost, so the deltas carry independent-sample noise"
                .to_string(),
        )
    };

    let var_with_contract = variance(&with);
    let var_without_contract = variance(&without);
    let risk_reduction_pct = if var_without_contract > 0.0 {
        100.0 * (1.0 - var_with_contract / var_without_contract)
    } else {
        0.0
    };

    let mean_delta = mean(&with) - mean(&without);
    let se_mean_delta = if crn_matched {
        let deltas: Vec<f64> = with.iter().zip(&without).map(|(a, b)| a - b).collect();
        se_mean(&deltas)
    } else {
        (se_mean(&with).powi(2) + se_mean(&without).powi(2)).sqrt()
    };

    let (ce_with_contract, ce_without_contract) = if theta == 0.0 {
        (mean(&with), mean(&without))
    } else {
        (risk_sensitive_estimate(&with, theta)?.value, risk_sensitive_estimate(&without, theta)?.value)
    };

    Ok(BaselineComparison {
        crn_matched,
        warning,
        var_with_contract,
        se_var_with: se_variance(&with),
        var_without_contract,
        se_var_without: se_variance(&without),
        risk_reduction_pct,
        mean_delta,
        se_mean_delta,
        ce_with_contract,
        ce_without_contract,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contract::design_contract;
    use crate::hjb::{AxisSpec, ControlMesh, GridSpec};
    use crate::models::{AgentSpec, ComfortParams, EtpParams, MarketModel, Series, TimeGrid};
    use crate::simulate::{
        simulate_closed_loop, NoiseSource, PathSummary, SimOptions, TrajectoryBundle,
    };
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_draws(seed: u64, n: usize, m: f64, s: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + s * z
            })
            .collect()
    }

    #[test]
    fn constant_samples_certainty_equivalent_is_the_constant() {
        let xs = vec![1.25; 64];
        let est = risk_sensitive_estimate(&xs, 0.7).unwrap();
        assert_relative_eq!(est.value, 1.25, epsilon = 1e-14);
        // every leave-one-out replicate is identical, so the spread is
        // exactly zero
        assert_eq!(est.standard_error, 0.0);
    }

    #[test]
    fn gaussian_samples_match_the_closed_form() {
        // for X ~ N(m, s^2): CE = m - theta s^2 / 2
        let (m, s, theta) = (0.3, 1.2, 0.5);
        let xs = normal_draws(17, 200_000, m, s);
        let est = risk_sensitive_estimate(&xs, theta).unwrap();
        let exact = m - theta * s * s / 2.0;
        assert!(
            (est.value - exact).abs() <= 4.0 * est.standard_error,
            "CE {} vs closed form {} (SE {})",
            est.value,
            exact,
            est.standard_error
        );
        assert!(est.standard_error > 0.0 && est.standard_error < 0.05);
    }

    #[test]
    fn vanishing_aversion_recovers_the_sample_mean() {
        let xs: Vec<f64> = (0..5000).map(|i| (i as f64 * 0.37).sin()).collect();
        let est = risk_sensitive_estimate(&xs, 1e-6).unwrap();
        // first-order expansion: CE = mean - (theta/2) Var + O(theta^2)
        assert!((est.value - mean(&xs)).abs() < 1e-4);
    }

    #[test]
    fn certainty_equivalent_sits_below_the_mean_and_translates_exactly() {
        let xs = normal_draws(5, 4096, -0.2, 0.9);
        let theta = 0.8;
        let base = risk_sensitive_estimate(&xs, theta).unwrap();
        assert!(base.value <= mean(&xs), "Jensen: CE must not exceed the mean");
        let shift = 3.7;
        let shifted: Vec<f64> = xs.iter().map(|x| x + shift).collect();
        let moved = risk_sensitive_estimate(&shifted, theta).unwrap();
        assert_relative_eq!(moved.value, base.value + shift, epsilon = 1e-11);
        assert_relative_eq!(moved.standard_error, base.standard_error, epsilon = 1e-9);
    }

    #[test]
    fn jackknife_error_shrinks_with_sample_size() {
        let small = risk_sensitive_estimate(&normal_draws(3, 256, 0.0, 1.0), 1.0).unwrap();
        let large = risk_sensitive_estimate(&normal_draws(3, 16384, 0.0, 1.0), 1.0).unwrap();
        assert!(
            large.standard_error < small.standard_error / 4.0,
            "SE should fall roughly like 1/sqrt(n): {} vs {}",
            small.standard_error,
            large.standard_error
        );
    }

    #[test]
    fn zero_aversion_and_empty_samples_are_rejected() {
        assert!(risk_sensitive_estimate(&[], 1.0).is_err());
        assert!(risk_sensitive_estimate(&[1.0, 2.0], 0.0).is_err());
        assert!(risk_sensitive_estimate(&[1.0, 2.0], f64::NAN).is_err());
    }

    /// Synthetic bundle whose agent payoffs are `b + g dW` on one unit
    /// step, with the raw terminal budget `s_cap - g^2`.
    fn synthetic_bundle(seed: u64, n: usize, b: f64, s_cap: f64, g: f64) -> TrajectoryBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let summaries = (0..n)
            .map(|_| {
                let dw: f64 = StandardNormal.sample(&mut rng);
                let gain = g * dw;
                PathSummary {
                    agent_payoff: b + gain,
                    principal_payoff: -(b + gain),
                    compensation: b + gain,
                    budget_terminal: (s_cap - g * g).max(0.0),
                    budget_terminal_raw: s_cap - g * g,
                    gamma_dw_sum: gain,
                    gamma_sq_dt_sum: g * g,
                    w_min: 0.0,
                    w_max: 0.0,
                    x_min: 0.0,
                    x_max: 0.0,
                }
            })
            .collect();
        TrajectoryBundle {
            grid: TimeGrid::new(0.0, 1.0, 1.0).unwrap(),
            options: SimOptions::default(),
            noise: NoiseSource::new(seed, 0),
            summaries,
            exported: Vec::new(),
        }
    }

    #[test]
    fn budget_respecting_bundle_passes_and_overdrawn_loading_fails() {
        let (b, s_cap) = (0.4, 1.0);
        // loading inside the budget: integral of |gamma|^2 dt = 0.5 s_cap
        let good = synthetic_bundle(11, 4096, b, s_cap, (0.5 * s_cap).sqrt());
        let report = verify_conditions(&good, &ContractTerms { b, s_cap }, &Tolerances::default(), None)
            .unwrap();
        assert!(report.all_pass(), "in-budget bundle should pass: {:?}", report.checks);

        // loading at twice the budget: variance lands near 2 s_cap and
        // every raw terminal budget is -s_cap
        let bad = synthetic_bundle(11, 4096, b, s_cap, (2.0 * s_cap).sqrt());
        let report =
            verify_conditions(&bad, &ContractTerms { b, s_cap }, &Tolerances::default(), None)
                .unwrap();
        let by_name = |n: &str| report.checks.iter().find(|c| c.name == n).unwrap();
        assert!(by_name("participation_payoff_gap").pass, "mean is still pinned to b");
        assert!(!by_name("risk_limiting_variance").pass, "variance 2S must breach cap S");
        assert!(!by_name("budget_floor_violations").pass, "every path overdraws");
        assert!(!report.all_pass());
        assert_relative_eq!(by_name("budget_floor_violations").estimate, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn too_few_paths_are_rejected() {
        let tiny = synthetic_bundle(1, 99, 0.0, 1.0, 0.5);
        let err =
            verify_conditions(&tiny, &ContractTerms { b: 0.0, s_cap: 1.0 }, &Tolerances::default(), None)
                .unwrap_err();
        assert!(err.to_string().contains("at least 100"));
    }

    fn tiny_instance() -> (AgentSpec, MarketModel, GridSpec, ControlMesh) {
        let g = TimeGrid::new(0.0, 1.0, 0.25).unwrap();
        let agent = AgentSpec {
            id: "verify-unit".into(),
            grid: g,
            load_forecast: Series::constant(g, 1.0),
            load_sigma: Series::constant(g, 0.0),
            tariff: Series::constant(g, 0.11),
            etp: EtpParams {
                alpha: 0.3,
                kappa: 0.8,
                x0: 21.0,
                theta_out: Series::constant(g, 26.0),
            },
            comfort: ComfortParams { omega: 0.15, theta_lo: 20.0, theta_hi: 22.0 },
            control_set: vec![0.0, 2.0],
            terms: ContractTerms { b: -0.05, s_cap: 0.02 },
        };
        let market = MarketModel {
            grid: g,
            r0: 0.4,
            nu: Series::constant(g, -2.2),
            sigma0: Series::constant(g, 0.0),
            lambda0: (-2.2f64).exp(),
            p_alloc: Series::constant(g, 1.0),
        };
        let grid = GridSpec {
            w: AxisSpec::new(-3.2, -1.2, 7).unwrap(),
            x: AxisSpec::new(18.0, 27.0, 7).unwrap(),
            y: AxisSpec::new(0.0, 0.02, 5).unwrap(),
            time: g,
        };
        let mesh = ControlMesh::new(agent.control_set.clone(), 3, 3, 0.1, 0.1).unwrap();
        (agent, market, grid, mesh)
    }

    #[test]
    fn noiseless_closed_loop_passes_every_check_with_zero_slack() {
        // no price noise, no demand noise: the designed policy loads
        // nothing, so every path pays exactly b and the budget never moves
        let (agent, market, grid, mesh) = tiny_instance();
        let contract = design_contract(&agent, &market, 1e-2, &grid, &mesh).unwrap();
        let bundle = simulate_closed_loop(
            &agent,
            &market,
            &contract.policy,
            128,
            &NoiseSource::new(40, 0),
            &SimOptions::default(),
            0,
        )
        .unwrap();
        let report =
            verify_conditions(&bundle, &agent.terms, &Tolerances::default(), Some(1e-2)).unwrap();
        assert!(report.all_pass());
        let by_name = |n: &str| report.checks.iter().find(|c| c.name == n).unwrap();
        assert!(by_name("participation_payoff_gap").estimate.abs() < 1e-12);
        assert!(by_name("risk_limiting_variance").estimate.abs() < 1e-24);
        assert_eq!(by_name("budget_floor_violations").estimate, 0.0);
        // deterministic payoff: certainty equivalent equals the mean
        let ce = report.principal_certainty_equivalent.unwrap();
        assert_relative_eq!(ce.value, report.principal_payoff.mean, epsilon = 1e-9);
    }

    #[test]
    fn self_comparison_is_flat_and_mismatched_noise_warns() {
        let bundle = synthetic_bundle(23, 512, 0.1, 1.0, 0.6);
        let same = compare_to_baseline(&bundle, &bundle, 0.5).unwrap();
        assert!(same.crn_matched);
        assert!(same.warning.is_none());
        assert_eq!(same.risk_reduction_pct, 0.0);
        assert_eq!(same.mean_delta, 0.0);
        assert_eq!(same.se_mean_delta, 0.0);
        assert_eq!(same.ce_with_contract, same.ce_without_contract);

        let mut other = synthetic_bundle(24, 512, 0.1, 1.0, 0.6);
        other.noise = NoiseSource::new(24, 0);
        let crossed = compare_to_baseline(&bundle, &other, 0.5).unwrap();
        assert!(!crossed.crn_matched);
        let note = crossed.warning.expect("mismatched noise must warn");
        assert!(note.contains("noise sources differ"));
        assert!(crossed.se_mean_delta > 0.0);
    }

    #[test]
    fn smaller_loading_means_less_principal_variance_under_shared_noise() {
        // same draws, half the loading: the comparison must credit the
        // lighter contract with a strictly positive risk reduction
        let heavy = synthetic_bundle(31, 2048, 0.1, 1.0, 0.8);
        let light = synthetic_bundle(31, 2048, 0.1, 1.0, 0.4);
        let cmp = compare_to_baseline(&light, &heavy, 1e-2).unwrap();
        assert!(cmp.crn_matched);
        assert!(
            cmp.risk_reduction_pct > 50.0,
            "quartered variance should report ~75% reduction, got {}",
            cmp.risk_reduction_pct
        );
    }

    #[test]
    fn report_emits_json_and_flat_csv_deterministically() {
        let bundle = synthetic_bundle(7, 256, 0.2, 1.0, 0.5);
        let terms = ContractTerms { b: 0.2, s_cap: 1.0 };
        let mut report =
            verify_conditions(&bundle, &terms, &Tolerances::default(), Some(0.01)).unwrap();
        report.baseline = Some(compare_to_baseline(&bundle, &bundle, 0.01).unwrap());

        let again = {
            let mut r =
                verify_conditions(&bundle, &terms, &Tolerances::default(), Some(0.01)).unwrap();
            r.baseline = Some(compare_to_baseline(&bundle, &bundle, 0.01).unwrap());
            r
        };
        assert_eq!(report, again, "verification must be deterministic given the bundle");

        let dir = tempfile::tempdir().unwrap();
        let json_path = dir.path().join("report.json");
        let csv_path = dir.path().join("report.csv");
        report.write_json(&json_path).unwrap();
        report.write_csv(&csv_path, "unit").unwrap();

        let parsed: VerificationReport =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(parsed, report);

        let csv = std::fs::read_to_string(&csv_path).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), REPORT_CSV_HEADER);
        // 3 checks + 5 summaries + 1 certainty equivalent + 6 baseline rows
        assert_eq!(lines.count(), 15);
        for line in csv.lines().skip(1) {
            assert!(line.starts_with("unit,"));
            assert_eq!(line.split(',').count(), 7);
        }
    }

}
