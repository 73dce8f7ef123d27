//! Per-agent contract design, the menu workflow, and persistence.
//!
//! A designed contract packages the solved value function as a feedback
//! policy, together with the terms it was built for, digests of the
//! inputs, and — for a risk-averse principal — a suboptimality
//! certificate: the ratio of the design's risk-sensitive value to the
//! risk-neutral optimum net of the participation payment. Jensen's
//! inequality caps the ratio at 1, and it tends to 1 as risk aversion
//! shrinks, so it prices what the risk-limiting constraint costs.
//!
//! Menu designs dispatch independent per-agent solves to a worker pool.
//! Two agents whose specs agree in everything except the id and the
//! budget cap share one solve: the cap only moves the starting point on
//! the budget axis, never the value function, so sharing is exact.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::hjb::{
    constrained_substep_schedule, solve_constrained_hjb, solve_risk_neutral_matched, ControlMesh,
    Fingerprints, GridSpec, Policy, ValueGrid,
};
use crate::models::{agent_running_payoff, sigma_agent, AgentSpec, ContractTerms, MarketModel};
use crate::simulate::PathRecord;

/// Hex SHA-256 of a model's canonical JSON form.
fn digest_of<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("models serialize infallibly");
    hex::encode(Sha256::digest(&json))
}

/// Digests binding a contract to the exact inputs it was designed from.
pub fn model_fingerprints(
    agent: &AgentSpec,
    market: &MarketModel,
    theta: f64,
    grid: &GridSpec,
    mesh: &ControlMesh,
) -> Fingerprints {
    Fingerprints {
        agent: digest_of(agent),
        market: digest_of(market),
        solver: digest_of(&(env!("CARGO_PKG_VERSION"), theta, grid, mesh)),
    }
}

/// A zero budget admits no noise loading at all, so the loading mesh
/// collapses to the origin; everything else keeps the caller's mesh.
fn effective_mesh(agent: &AgentSpec, mesh: &ControlMesh) -> Result<ControlMesh> {
    if agent.terms.s_cap == 0.0 {
        ControlMesh::new(agent.control_set.clone(), 1, 1, 0.0, 0.0)
    } else {
        Ok(mesh.clone())
    }
}

/// The agent spec stripped to what actually determines the solve: the id
/// is a label, and the budget cap only selects the starting point on the
/// budget axis — except that a zero cap collapses the loading mesh, which
/// the key must remember.
fn solve_key(agent: &AgentSpec) -> String {
    let mut key = agent.clone();
    key.id.clear();
    key.terms.s_cap = 0.0;
    digest_of(&(key, agent.terms.s_cap == 0.0))
}

/// How many distinct solver invocations a menu over these agents needs,
/// after identical-model deduplication. Cheap (hashing only), so callers
/// can size a run before committing to it.
pub fn distinct_solve_count(agents: &[AgentSpec]) -> usize {
    agents.iter().map(solve_key).collect::<std::collections::BTreeSet<_>>().len()
}

/// Key for the risk-neutral relaxation: terms drop out entirely there
/// (the payment is subtracted outside the solve).
fn relaxation_key(agent: &AgentSpec) -> String {
    let mut key = agent.clone();
    key.id.clear();
    key.terms = ContractTerms { b: 0.0, s_cap: 0.0 };
    digest_of(&key)
}

fn now_unix_ms() -> u64 {
    // honor the reproducible-build convention so fixed-environment runs
    // can produce byte-identical bundles
    if let Ok(v) = std::env::var("SOURCE_DATE_EPOCH") {
        if let Ok(sec) = v.trim().parse::<u64>() {
            return sec * 1000;
        }
    }
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// How far the designed solution sits below the risk-neutral optimum.
///
/// `rho = numerator / denominator` with the numerator the risk-sensitive
/// value of the designed solution and the denominator the risk-neutral
/// optimum net of the participation payment. Defined only when the
/// denominator is positive; `0 < rho <= 1` for a risk-averse principal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuboptimalityCertificate {
    pub numerator: f64,
    pub denominator: f64,
    pub rho: f64,
    /// With a single agent the decomposed problem is the full problem,
    /// so the bound is exact for the instance rather than per-agent.
    pub exact_instance: bool,
}

/// A designed risk-limiting contract: terms, feedback policy, input
/// digests, and (when available) the suboptimality certificate.
#[derive(Debug, Clone)]
pub struct Contract {
    pub agent_id: String,
    pub terms: ContractTerms,
    pub theta: f64,
    pub designed_at_unix_ms: u64,
    pub fingerprints: Fingerprints,
    pub certificate: Option<SuboptimalityCertificate>,
    /// Why the certificate is absent, when it is.
    pub certificate_note: Option<String>,
    pub policy: Policy,
}

/// Build the certificate for an already-solved value grid. The
/// risk-neutral denominator runs on the constrained solve's sub-step
/// schedule so the two values share one time discretization; without
/// that, differing numerical diffusion would contaminate the ratio.
fn certificate_for(
    vg: &ValueGrid,
    agent: &AgentSpec,
    market: &MarketModel,
    grid: &GridSpec,
    mesh: &ControlMesh,
    exact_instance: bool,
) -> Result<SuboptimalityCertificate> {
    let schedule = constrained_substep_schedule(agent, market, vg.theta, grid, mesh)?;
    let relaxed = solve_risk_neutral_matched(agent, market, grid, &schedule)?;
    certificate_from_parts(vg, &relaxed, agent, market, exact_instance)
}

fn certificate_from_parts(
    vg: &ValueGrid,
    relaxed: &ValueGrid,
    agent: &AgentSpec,
    market: &MarketModel,
    exact_instance: bool,
) -> Result<SuboptimalityCertificate> {
    let w0 = market.lambda0.ln();
    let x0 = agent.etp.x0;
    let numerator = vg.value_at_start(w0, x0, agent.terms.s_cap);
    let denominator = relaxed.value_at_start(w0, x0, 0.0) - agent.terms.b;
    if !(denominator > 0.0) {
        return Err(CoreError::verification(format!(
            "suboptimality certificate unavailable: the risk-neutral value net of the \
             participation payment is {denominator:.6}, not positive"
        )));
    }
    Ok(SuboptimalityCertificate { numerator, denominator, rho: numerator / denominator, exact_instance })
}

/// Design one agent's contract: solve the constrained dynamic program,
/// wrap the policy, and attach the certificate when the principal is
/// risk-averse and the certificate's hypothesis holds.
pub fn design_contract(
    agent: &AgentSpec,
    market: &MarketModel,
    theta: f64,
    grid: &GridSpec,
    mesh: &ControlMesh,
) -> Result<Contract> {
    agent.terms.validate()?;
    let mesh = effective_mesh(agent, mesh)?;
    let mut vg = solve_constrained_hjb(agent, market, theta, grid, &mesh)?;
    vg.fingerprints = Fingerprints {
        agent: solve_key(agent),
        ..model_fingerprints(agent, market, theta, grid, &mesh)
    };
    let vg = Arc::new(vg);

    let (certificate, certificate_note) = if theta > 0.0 {
        match certificate_for(&vg, agent, market, grid, &mesh, true) {
            Ok(c) => (Some(c), None),
            Err(CoreError::Verification(msg)) => (None, Some(msg)),
            Err(other) => return Err(other),
        }
    } else {
        (None, Some("risk-seeking principal: the ratio bound needs positive risk aversion".into()))
    };

    Ok(Contract {
        agent_id: agent.id.clone(),
        terms: agent.terms,
        theta,
        designed_at_unix_ms: now_unix_ms(),
        fingerprints: model_fingerprints(agent, market, theta, grid, &mesh),
        certificate,
        certificate_note,
        policy: Policy::new(vg, agent.clone(), market.clone()),
    })
}

/// Standalone certificate computation (solves both problems).
pub fn suboptimality_ratio(
    agent: &AgentSpec,
    market: &MarketModel,
    theta: f64,
    grid: &GridSpec,
    mesh: &ControlMesh,
) -> Result<SuboptimalityCertificate> {
    if !(theta > 0.0) {
        return Err(CoreError::validation(format!(
            "the suboptimality bound needs positive risk aversion, got {theta}"
        )));
    }
    let mesh = effective_mesh(agent, mesh)?;
    let vg = solve_constrained_hjb(agent, market, theta, grid, &mesh)?;
    certificate_for(&vg, agent, market, grid, &mesh, true)
}

/// End-time compensation owed for a recorded path: the terminal value of
/// the pay-state recursion. Before returning it, the recorded value is
/// cross-checked against its expansion from the same increments,
///
/// ```text
/// C = b - sum r^A dt + sum gamma_1 dW0 + sum (gamma_2 - sigma^A) dWi,
/// ```
///
/// which must agree to rounding; disagreement means the path and the
/// terms do not belong together.
pub fn compensation_from_path(
    path: &PathRecord,
    terms: &ContractTerms,
    agent: &AgentSpec,
) -> Result<f64> {
    if path.steps.is_empty() {
        return Err(CoreError::validation(
            "path carries no per-step state; rerun the simulation with path export on",
        ));
    }
    if path.steps[0].v != terms.b {
        return Err(CoreError::validation(format!(
            "path starts its pay state at {}, but the terms promise {}",
            path.steps[0].v, terms.b
        )));
    }
    let c = path.terminal.v;

    let mut acc = terms.b;
    for (i, st) in path.steps.iter().enumerate() {
        let t_next = path.steps.get(i + 1).map(|s| s.t).unwrap_or(path.terminal.t);
        let dt = t_next - st.t;
        let r_a = agent_running_payoff(st.t, st.x, st.u, agent);
        let s_a = sigma_agent(st.t, agent);
        acc += -r_a * dt + st.gamma[0] * st.dw0 + (st.gamma[1] - s_a) * st.dwi;
    }
    if (acc - c).abs() > 1e-9 * (1.0 + c.abs()) {
        return Err(CoreError::verification(format!(
            "recorded terminal compensation {c} disagrees with its increment expansion {acc}; \
             the path is inconsistent with these terms"
        )));
    }
    Ok(c)
}

/// One agent's failure inside a menu run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MenuFailure {
    pub agent_id: String,
    pub message: String,
}

/// What a menu design produced: contracts for the agents that succeeded,
/// an error manifest for the ones that did not, and cache accounting.
#[derive(Debug)]
pub struct MenuOutcome {
    pub contracts: Vec<Contract>,
    pub failures: Vec<MenuFailure>,
    /// Distinct dynamic programs actually solved.
    pub distinct_solves: usize,
    /// Agents served from an already-solved program.
    pub cache_hits: usize,
}

/// Design contracts for a collection of agents whose terms come from a
/// posted menu. Solves are deduplicated by input digest and dispatched
/// to a pool of `jobs` workers (0 = one per CPU); failures are isolated
/// per agent.
pub fn design_menu(
    agents: &[AgentSpec],
    menu: &[ContractTerms],
    market: &MarketModel,
    theta: f64,
    grid: &GridSpec,
    mesh: &ControlMesh,
    jobs: usize,
) -> Result<MenuOutcome> {
    if agents.is_empty() {
        return Err(CoreError::validation("no agents to design for"));
    }
    if menu.is_empty() {
        return Err(CoreError::validation("the menu offers no terms"));
    }
    for a in agents {
        if !menu.iter().any(|t| t.b == a.terms.b && t.s_cap == a.terms.s_cap) {
            return Err(CoreError::validation(format!(
                "agent '{}' carries terms (b={}, S={}) that the menu does not offer",
                a.id, a.terms.b, a.terms.s_cap
            )));
        }
    }

    // Split agents into viable ones and up-front failures, then group the
    // viable ones by what determines their solve.
    let mut failures: Vec<MenuFailure> = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut group_of_key: HashMap<String, usize> = HashMap::new();
    let mut membership: Vec<Option<usize>> = vec![None; agents.len()];

    for (i, a) in agents.iter().enumerate() {
        if let Err(e) = a.validate() {
            failures.push(MenuFailure { agent_id: a.id.clone(), message: e.to_string() });
            continue;
        }
        if a.terms.s_cap > grid.y.max {
            failures.push(MenuFailure {
                agent_id: a.id.clone(),
                message: format!(
                    "budget axis tops out at {} but the contracted cap is {}",
                    grid.y.max, a.terms.s_cap
                ),
            });
            continue;
        }
        let key = solve_key(a);
        let g = *group_of_key.entry(key).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
        membership[i] = Some(g);
    }

    // per-group effective mesh and sub-step schedule (cheap, sequential)
    let preps: Vec<Result<(ControlMesh, Vec<usize>)>> = groups
        .iter()
        .map(|members| {
            let rep = &agents[members[0]];
            let m = effective_mesh(rep, mesh)?;
            let schedule = constrained_substep_schedule(rep, market, theta, grid, &m)?;
            Ok((m, schedule))
        })
        .collect();

    // relaxations are shared by dynamics *and* schedule, so members of
    // groups that happen to march in lockstep reuse one denominator
    let mut relax_reps: Vec<usize> = Vec::new();
    let mut relax_of_key: HashMap<String, usize> = HashMap::new();
    let mut relax_of_group: Vec<Option<usize>> = vec![None; groups.len()];
    if theta > 0.0 {
        for (g, members) in groups.iter().enumerate() {
            let Ok((_, schedule)) = &preps[g] else { continue };
            let rep = &agents[members[0]];
            let rkey = digest_of(&(relaxation_key(rep), schedule));
            let r = *relax_of_key.entry(rkey).or_insert_with(|| {
                relax_reps.push(g);
                relax_reps.len() - 1
            });
            relax_of_group[g] = Some(r);
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CoreError::validation(format!("worker pool: {e}")))?;

    // one constrained solve per group, one relaxation per distinct
    // (dynamics, schedule); both embarrassingly parallel
    let (solved, relaxed): (Vec<Result<Arc<ValueGrid>>>, Vec<Result<Arc<ValueGrid>>>) =
        pool.install(|| {
            rayon::join(
                || {
                    groups
                        .par_iter()
                        .enumerate()
                        .map(|(g, members)| {
                            let rep = &agents[members[0]];
                            let (m, _) = match &preps[g] {
                                Ok(p) => p,
                                Err(e) => return Err(e.clone()),
                            };
                            solve_constrained_hjb(rep, market, theta, grid, m).map(|mut vg| {
                                vg.fingerprints = Fingerprints {
                                    agent: solve_key(rep),
                                    ..model_fingerprints(rep, market, theta, grid, m)
                                };
                                Arc::new(vg)
                            })
                        })
                        .collect()
                },
                || {
                    relax_reps
                        .par_iter()
                        .map(|&g| {
                            let rep = &agents[groups[g][0]];
                            let (_, schedule) = preps[g].as_ref().expect("only prepared groups");
                            solve_risk_neutral_matched(rep, market, grid, schedule).map(Arc::new)
                        })
                        .collect()
                },
            )
        });

    let exact_instance = agents.len() == 1;
    let mut contracts = Vec::new();
    let mut group_used = vec![false; groups.len()];
    let mut cache_hits = 0usize;

    for (i, a) in agents.iter().enumerate() {
        let Some(g) = membership[i] else { continue };
        let vg = match &solved[g] {
            Ok(vg) => vg,
            Err(e) => {
                failures.push(MenuFailure { agent_id: a.id.clone(), message: e.to_string() });
                continue;
            }
        };
        if group_used[g] {
            cache_hits += 1;
        } else {
            group_used[g] = true;
        }
        let (certificate, certificate_note) = if theta > 0.0 {
            match relax_of_group[g].map(|r| &relaxed[r]) {
                Some(Ok(rn)) => match certificate_from_parts(vg, rn, a, market, exact_instance) {
                    Ok(c) => (Some(c), None),
                    Err(CoreError::Verification(msg)) => (None, Some(msg)),
                    Err(other) => {
                        failures
                            .push(MenuFailure { agent_id: a.id.clone(), message: other.to_string() });
                        continue;
                    }
                },
                Some(Err(e)) => (None, Some(format!("risk-neutral relaxation failed: {e}"))),
                None => (None, Some("risk-neutral relaxation was not scheduled".into())),
            }
        } else {
            (None, Some("risk-seeking principal: the ratio bound needs positive risk aversion".into()))
        };
        let mesh_used = &preps[g].as_ref().expect("solved groups were prepared").0;
        contracts.push(Contract {
            agent_id: a.id.clone(),
            terms: a.terms,
            theta,
            designed_at_unix_ms: now_unix_ms(),
            fingerprints: model_fingerprints(a, market, theta, grid, mesh_used),
            certificate,
            certificate_note,
            policy: Policy::new(Arc::clone(vg), a.clone(), market.clone()),
        });
    }

    let distinct_solves = group_used.iter().filter(|u| **u).count();
    Ok(MenuOutcome { contracts, failures, distinct_solves, cache_hits })
}

/// On-disk form of everything but the value grid.
#[derive(Debug, Serialize, Deserialize)]
struct BundleManifest {
    agent_id: String,
    terms: ContractTerms,
    theta: f64,
    designed_at_unix_ms: u64,
    fingerprints: Fingerprints,
    certificate: Option<SuboptimalityCertificate>,
    certificate_note: Option<String>,
    agent: AgentSpec,
    market: MarketModel,
}

const MANIFEST_FILE: &str = "contract.json";
const VALUEGRID_FILE: &str = "valuegrid.bin";

/// Persist a contract as a directory: `contract.json` (terms, ratio,
/// digests, and the full agent/market specs) plus `valuegrid.bin`, so
/// execution later needs no re-solve.
pub fn save_bundle(contract: &Contract, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    contract.policy.vg.write_binary(&dir.join(VALUEGRID_FILE))?;
    let manifest = BundleManifest {
        agent_id: contract.agent_id.clone(),
        terms: contract.terms,
        theta: contract.theta,
        designed_at_unix_ms: contract.designed_at_unix_ms,
        fingerprints: contract.fingerprints.clone(),
        certificate: contract.certificate,
        certificate_note: contract.certificate_note.clone(),
        agent: contract.policy.agent.clone(),
        market: contract
            .policy
            .market
            .clone()
            .ok_or_else(|| CoreError::validation("contract policy carries no market model"))?,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CoreError::validation(format!("manifest serialization: {e}")))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| CoreError::io(&path, e))?;
    Ok(())
}

/// Load a bundle back, checking that the recorded digests still match
/// the specs stored beside them.
pub fn load_bundle(dir: &Path) -> Result<Contract> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
    let manifest: BundleManifest = serde_json::from_str(&text)
        .map_err(|e| CoreError::Parse { path: path.clone(), message: e.to_string() })?;

    if digest_of(&manifest.agent) != manifest.fingerprints.agent {
        return Err(CoreError::validation(
            "bundle fingerprint mismatch: the stored agent spec does not hash to the recorded digest",
        ));
    }
    if digest_of(&manifest.market) != manifest.fingerprints.market {
        return Err(CoreError::validation(
            "bundle fingerprint mismatch: the stored market model does not hash to the recorded digest",
        ));
    }
    if manifest.agent.terms != manifest.terms {
        return Err(CoreError::validation(
            "bundle manifest terms disagree with the stored agent spec",
        ));
    }

    let vg = ValueGrid::read_binary(&dir.join(VALUEGRID_FILE))?;
    if vg.theta != manifest.theta {
        return Err(CoreError::validation(format!(
            "value grid was solved at risk aversion {}, manifest says {}",
            vg.theta, manifest.theta
        )));
    }
    if vg.b != manifest.terms.b {
        return Err(CoreError::validation(format!(
            "value grid was solved for participation payoff {}, manifest says {}",
            vg.b, manifest.terms.b
        )));
    }
    if vg.fingerprints.market != manifest.fingerprints.market
        || vg.fingerprints.solver != manifest.fingerprints.solver
    {
        return Err(CoreError::validation(
            "value grid digests disagree with the manifest; the files come from different designs",
        ));
    }

    Ok(Contract {
        agent_id: manifest.agent_id,
        terms: manifest.terms,
        theta: manifest.theta,
        designed_at_unix_ms: manifest.designed_at_unix_ms,
        fingerprints: manifest.fingerprints,
        certificate: manifest.certificate,
        certificate_note: manifest.certificate_note,
        policy: Policy::new(Arc::new(vg), manifest.agent, manifest.market),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hjb::{AxisSpec, ControlLaw};
    use crate::models::{ComfortParams, EtpParams, Series, TimeGrid};
    use crate::simulate::{
        compensation_step, simulate_closed_loop, NoiseSource, SimOptions, StepRecord,
        TerminalRecord,
    };

    fn grid_t() -> TimeGrid {
        TimeGrid::new(0.0, 1.0, 0.25).unwrap()
    }

    fn small_agent(b: f64, s_cap: f64) -> AgentSpec {
        let g = grid_t();
        AgentSpec {
            id: "unit".into(),
            grid: g,
            load_forecast: Series::constant(g, 1.0),
            load_sigma: Series::constant(g, 0.4),
            tariff: Series::constant(g, 0.11),
            etp: EtpParams { alpha: 0.3, kappa: 0.8, x0: 21.0, theta_out: Series::constant(g, 26.0) },
            comfort: ComfortParams { omega: 0.15, theta_lo: 20.0, theta_hi: 22.0 },
            control_set: vec![0.0, 2.0],
            terms: ContractTerms { b, s_cap },
        }
    }

    fn small_market(sigma0: f64) -> MarketModel {
        let g = grid_t();
        MarketModel {
            grid: g,
            r0: 0.4,
            nu: Series::constant(g, -2.2),
            sigma0: Series::constant(g, sigma0),
            lambda0: (-2.2f64).exp(),
            p_alloc: Series::constant(g, 1.0),
        }
    }

    fn small_grid(s_top: f64) -> GridSpec {
        GridSpec {
            w: AxisSpec::new(-3.2, -1.2, 7).unwrap(),
            x: AxisSpec::new(18.0, 27.0, 7).unwrap(),
            y: AxisSpec::new(0.0, s_top.max(1e-6), 5).unwrap(),
            time: grid_t(),
        }
    }

    fn small_mesh(agent: &AgentSpec, loading: f64) -> ControlMesh {
        ControlMesh::new(agent.control_set.clone(), 3, 3, loading, loading).unwrap()
    }

    #[test]
    fn deterministic_instance_certifies_exactly_one() {
        // no noise anywhere: loading is useless, both solves coincide
        let mut agent = small_agent(-0.05, 0.02);
        agent.load_sigma = Series::constant(grid_t(), 0.0);
        let market = small_market(0.0);
        let grid = small_grid(0.02);
        let mesh = small_mesh(&agent, 0.1);
        let cert = suboptimality_ratio(&agent, &market, 1e-2, &grid, &mesh).unwrap();
        assert!(
            (cert.rho - 1.0).abs() < 1e-6,
            "deterministic instance should be certified exact, got rho {}",
            cert.rho
        );
        assert!(cert.exact_instance);
    }

    #[test]
    fn certificate_is_a_ratio_in_unit_interval_and_tightens_as_aversion_fades() {
        let agent = small_agent(-0.05, 0.02);
        let market = small_market(0.3);
        let grid = small_grid(0.02);
        let mesh = small_mesh(&agent, 0.2);
        let loose = suboptimality_ratio(&agent, &market, 1e-2, &grid, &mesh).unwrap();
        let tight = suboptimality_ratio(&agent, &market, 1e-3, &grid, &mesh).unwrap();
        for c in [&loose, &tight] {
            assert!(c.rho > 0.0 && c.rho <= 1.0 + 1e-12, "rho {}", c.rho);
            assert!(c.denominator > 0.0);
        }
        // shrinking risk aversion moves the risk-sensitive value toward
        // the risk-neutral optimum, so the ratio can only improve
        assert!(
            tight.rho >= loose.rho - 1e-12,
            "rho at 1e-3 ({}) should be at least rho at 1e-2 ({})",
            tight.rho,
            loose.rho
        );
    }

    #[test]
    fn unaffordable_participation_payment_voids_the_certificate() {
        // a huge promised payment makes the net risk-neutral value negative
        let agent = small_agent(50.0, 0.02);
        let market = small_market(0.3);
        let grid = small_grid(0.02);
        let mesh = small_mesh(&agent, 0.2);
        assert!(matches!(
            suboptimality_ratio(&agent, &market, 1e-2, &grid, &mesh),
            Err(CoreError::Verification(_))
        ));
        // the design itself still succeeds, with the reason recorded
        let contract = design_contract(&agent, &market, 1e-2, &grid, &mesh).unwrap();
        assert!(contract.certificate.is_none());
        assert!(contract.certificate_note.as_deref().unwrap().contains("not positive"));
    }

    #[test]
    fn zero_budget_design_never_loads_noise() {
        let agent = small_agent(-0.05, 0.0);
        let market = small_market(0.3);
        let grid = small_grid(0.0);
        let mesh = small_mesh(&agent, 0.2);
        let contract = design_contract(&agent, &market, 1e-2, &grid, &mesh).unwrap();

        // the budget starts at zero and can only shrink, so every
        // reachable query happens at y = 0 and must come back unloaded
        for (wi, xi) in [(0usize, 0usize), (3, 3), (6, 6), (2, 5)] {
            let w = grid.w.node(wi);
            let x = grid.x.node(xi);
            for k in 0..grid.time.n_steps() {
                let d = contract.policy.control(grid.time.time_at(k), w, x, 0.0);
                assert_eq!(d.gamma, [0.0, 0.0]);
                assert_eq!(d.zeta, [0.0, 0.0]);
            }
        }

        // closed loop: the agent's payoff is then the promise, exactly
        let bundle = simulate_closed_loop(
            &agent,
            &market,
            &contract.policy,
            32,
            &NoiseSource { seed: 7, stream_id: 0 },
            &SimOptions::default(),
            0,
        )
        .unwrap();
        for s in &bundle.summaries {
            assert!((s.agent_payoff - agent.terms.b).abs() < 1e-12);
        }
    }

    #[test]
    fn compensation_covers_forgone_payoff_on_a_deterministic_path() {
        // without noise or loadings, the payment is the promise plus the
        // agent's running losses: b + mu (l + u) T for comfort-free flow
        let g = grid_t();
        let mut agent = small_agent(0.1, 0.0);
        agent.comfort.omega = 0.0;
        let dt = g.dt;
        let (mu, l) = (0.11, 1.0);
        let mut v = agent.terms.b;
        let mut steps = Vec::new();
        for k in 0..g.n_steps() {
            let t = g.time_at(k);
            let u = 2.0;
            steps.push(StepRecord {
                t,
                w: -2.2,
                x: 21.0,
                y: 0.0,
                v,
                u,
                gamma: [0.0, 0.0],
                zeta: [0.0, 0.0],
                dw0: 0.0,
                dwi: 0.0,
            });
            let r_a = agent_running_payoff(t, 21.0, u, &agent);
            v = compensation_step(v, dt, r_a, sigma_agent(t, &agent), [0.0, 0.0], 0.0, 0.0);
        }
        let path = PathRecord {
            index: 0,
            steps,
            terminal: TerminalRecord { t: 1.0, w: -2.2, x: 21.0, y: 0.0, v },
        };
        let c = compensation_from_path(&path, &agent.terms, &agent).unwrap();
        let want = agent.terms.b + mu * (l + 2.0) * 1.0;
        assert!((c - want).abs() < 1e-12, "{c} vs {want}");
    }

    #[test]
    fn single_step_compensation_matches_hand_value() {
        // dt=1, running payoff -0.3, noise exposure -0.1, loading (0, 0.5),
        // dWi = 0.2: the payment is b + 0.3 + (0.5 - (-0.1)) * 0.2 = b + 0.42
        let g = TimeGrid::new(0.0, 1.0, 1.0).unwrap();
        let mut agent = small_agent(1.0, 0.0);
        agent.grid = g;
        agent.comfort.omega = 0.0;
        agent.tariff = Series::constant(g, 0.3);
        agent.load_forecast = Series::constant(g, 1.0);
        agent.load_sigma = Series::constant(g, 1.0 / 3.0);
        agent.control_set = vec![0.0];
        agent.etp.theta_out = Series::constant(g, 26.0);
        let b = agent.terms.b;
        let r_a = agent_running_payoff(0.0, 21.0, 0.0, &agent);
        let s_a = sigma_agent(0.0, &agent);
        assert!((r_a - -0.3).abs() < 1e-12);
        assert!((s_a - -0.1).abs() < 1e-12);
        let gamma = [0.0, 0.5];
        let v_t = compensation_step(b, 1.0, r_a, s_a, gamma, 0.0, 0.2);
        let path = PathRecord {
            index: 0,
            steps: vec![StepRecord {
                t: 0.0,
                w: -2.2,
                x: 21.0,
                y: 0.0,
                v: b,
                u: 0.0,
                gamma,
                zeta: [0.0, 0.0],
                dw0: 0.0,
                dwi: 0.2,
            }],
            terminal: TerminalRecord { t: 1.0, w: -2.2, x: 21.0, y: 0.0, v: v_t },
        };
        let c = compensation_from_path(&path, &agent.terms, &agent).unwrap();
        assert!((c - (b + 0.42)).abs() < 1e-12, "{c} vs {}", b + 0.42);
    }

    #[test]
    fn recorded_and_expanded_compensation_agree_on_simulated_paths() {
        let agent = small_agent(-0.05, 0.02);
        let market = small_market(0.3);
        let grid = small_grid(0.02);
        let mesh = small_mesh(&agent, 0.2);
        let contract = design_contract(&agent, &market, 1e-2, &grid, &mesh).unwrap();
        let bundle = simulate_closed_loop(
            &agent,
            &market,
            &contract.policy,
            8,
            &NoiseSource { seed: 42, stream_id: 0 },
            &SimOptions::default(),
            8,
        )
        .unwrap();
        for path in &bundle.exported {
            let c = compensation_from_path(path, &agent.terms, &agent).unwrap();
            assert_eq!(c, path.terminal.v);
            assert_eq!(c, bundle.summaries[path.index].compensation);
        }

        // a corrupted record no longer telescopes
        let mut bad = bundle.exported[0].clone();
        bad.steps[1].gamma[1] += 0.25;
        assert!(matches!(
            compensation_from_path(&bad, &agent.terms, &agent),
            Err(CoreError::Verification(_))
        ));
        // and a summary-only path cannot be priced
        let empty = PathRecord { index: 0, steps: Vec::new(), terminal: bad.terminal };
        assert!(compensation_from_path(&empty, &agent.terms, &agent).is_err());
    }

    #[test]
    fn menu_dedupes_identical_specs_and_isolates_failures() {
        let market = small_market(0.3);
        let grid = small_grid(0.05);
        let mesh = small_mesh(&small_agent(0.0, 0.0), 0.2);
        let menu =
            vec![ContractTerms { b: -0.05, s_cap: 0.02 }, ContractTerms { b: -0.05, s_cap: 0.04 }];

        // four agents, two distinct dynamics; ids and caps differ freely
        let mut a1 = small_agent(-0.05, 0.02);
        a1.id = "a1".into();
        let mut a2 = small_agent(-0.05, 0.04);
        a2.id = "a2".into();
        let mut a3 = small_agent(-0.05, 0.02);
        a3.id = "a3".into();
        a3.etp.alpha = 0.5;
        let mut a4 = small_agent(-0.05, 0.02);
        a4.id = "a4".into();

        let out = design_menu(
            &[a1.clone(), a2.clone(), a3.clone(), a4.clone()],
            &menu,
            &market,
            1e-2,
            &grid,
            &mesh,
            1,
        )
        .unwrap();
        assert_eq!(out.contracts.len(), 4);
        assert!(out.failures.is_empty());
        assert_eq!(out.distinct_solves, 2, "a1/a2/a4 share one solve, a3 gets its own");
        assert_eq!(out.cache_hits, 2);
        // shared solves really share the grid in memory
        let vg1 = &out.contracts[0].policy.vg;
        let vg2 = &out.contracts[1].policy.vg;
        assert!(Arc::ptr_eq(vg1, vg2));
        // but every contract reads the certificate at its own cap
        let c1 = out.contracts[0].certificate.unwrap();
        let c2 = out.contracts[1].certificate.unwrap();
        assert!(c1.numerator <= c2.numerator + 1e-12, "a bigger budget cannot hurt");
        assert!(!c1.exact_instance);

        // an agent whose cap does not fit the grid fails alone
        let mut a5 = small_agent(-0.05, 0.04);
        a5.id = "a5".into();
        a5.terms.s_cap = 10.0;
        let menu5 = vec![menu[0], menu[1], ContractTerms { b: -0.05, s_cap: 10.0 }];
        let out = design_menu(
            &[a1.clone(), a5],
            &menu5,
            &market,
            1e-2,
            &grid,
            &mesh,
            1,
        )
        .unwrap();
        assert_eq!(out.contracts.len(), 1);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].agent_id, "a5");

        // menu violations are rejected outright
        assert!(design_menu(&[a1.clone()], &[], &market, 1e-2, &grid, &mesh, 1).is_err());
        let mut a6 = a1.clone();
        a6.terms.b = 99.0;
        assert!(design_menu(&[a6], &menu, &market, 1e-2, &grid, &mesh, 1).is_err());
    }

    #[test]
    fn bundle_round_trip_preserves_design_and_rejects_tampering() {
        let agent = small_agent(-0.05, 0.02);
        let market = small_market(0.3);
        let grid = small_grid(0.02);
        let mesh = small_mesh(&agent, 0.2);
        let contract = design_contract(&agent, &market, 1e-2, &grid, &mesh).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let bundle_dir = dir.path().join("agent-unit");
        save_bundle(&contract, &bundle_dir).unwrap();
        let loaded = load_bundle(&bundle_dir).unwrap();
        assert_eq!(loaded.agent_id, contract.agent_id);
        assert_eq!(loaded.terms, contract.terms);
        assert_eq!(loaded.certificate, contract.certificate);
        assert_eq!(*loaded.policy.vg, *contract.policy.vg);
        // the reloaded policy decides identically
        let d0 = contract.policy.control(0.1, -2.0, 21.0, 0.01);
        let d1 = loaded.policy.control(0.1, -2.0, 21.0, 0.01);
        assert_eq!(d0, d1);

        // break the recorded digest: the bundle must not load
        let manifest_path = bundle_dir.join("contract.json");
        let mut doc: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&manifest_path).unwrap()).unwrap();
        doc["fingerprints"]["agent"] = serde_json::Value::String("deadbeef".into());
        std::fs::write(&manifest_path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
        assert!(load_bundle(&bundle_dir).is_err());
    }
}

