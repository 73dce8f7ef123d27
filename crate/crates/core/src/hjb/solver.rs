//! Explicit backward sweeps for the three design problems.
//!
//! Each outer step integrates one cell of the model time grid; when the
//! explicit stability bound requires a smaller width the cell is cut into
//! equal sub-steps. Advection terms use sign-matched one-sided differences,
//! diffusion and the quadratic gradient penalty use centered ones, faces
//! fall back to shifted one-sided stencils. After every sub-step of the
//! constrained problem the slice is projected to be non-decreasing in the
//! risk budget `y` — spending less of the budget can never hurt, and the
//! projection keeps the discrete solution consistent with that ordering at
//! machine precision.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::models::{comfort_rate, AgentSpec, MarketModel};

use super::hamiltonian::{DerivSet, EvalCtx};
use super::{
    ControlLaw, ControlMesh, Fingerprints, GridSpec, Policy, ProblemKind, ValueGrid, CFL_TARGET,
    CFL_TRIGGER, MAX_SUBSTEPS,
};

/// Output of the agent-alone design: the no-contract value grid, the
/// participation benchmark `b_bar` (value at the agent's starting
/// temperature), the intrinsic payoff variance `s_bar` accumulated from the
/// tariff exposure, and the maximizing load level per `(step, x-node)`.
#[derive(Debug, Clone)]
pub struct BaselineSolution {
    pub value: Arc<ValueGrid>,
    pub b_bar: f64,
    pub s_bar: f64,
    /// Index into the control set, row-major `(step, x-node)`.
    pub table: Vec<usize>,
    pub policy: Policy,
}

/// Per-step stability bound handling: number of equal sub-steps for one
/// cell, given the total outflow coefficient.
fn substeps_for(dt: f64, coef: f64) -> Result<usize> {
    let ratio = dt * coef;
    if !ratio.is_finite() {
        return Err(CoreError::numerical("non-finite stability ratio; check model parameters"));
    }
    if ratio <= CFL_TRIGGER {
        return Ok(1);
    }
    let m = (ratio / CFL_TARGET).ceil() as usize;
    if m > MAX_SUBSTEPS {
        return Err(CoreError::numerical(format!(
            "stability requires {m} sub-steps per step (ratio {ratio:.3e}); \
             coarsen the state grid or shorten the time step"
        )));
    }
    Ok(m)
}

fn check_common(agent: &AgentSpec, market: &MarketModel, grid: &GridSpec) -> Result<()> {
    agent.validate()?;
    market.validate()?;
    grid.validate()?;
    if !market.grid.same_as(&agent.grid) {
        return Err(CoreError::validation("market and agent use different time grids"));
    }
    if !grid.time.same_as(&agent.grid) {
        return Err(CoreError::validation("solver grid and agent use different time grids"));
    }
    Ok(())
}

/// First non-finite entry of a slice, as grid coordinates.
fn first_bad_node(slice: &[f64], grid: &GridSpec, kind: ProblemKind) -> Option<String> {
    let idx = slice.iter().position(|v| !v.is_finite())?;
    Some(match kind {
        ProblemKind::Constrained => {
            let ny = grid.y.n;
            let nx = grid.x.n;
            let iy = idx % ny;
            let ix = (idx / ny) % nx;
            let iw = idx / (ny * nx);
            format!("w={:.4}, x={:.4}, y={:.6}", grid.w.node(iw), grid.x.node(ix), grid.y.node(iy))
        }
        ProblemKind::RiskNeutral => {
            let nx = grid.x.n;
            let ix = idx % nx;
            let iw = idx / nx;
            format!("w={:.4}, x={:.4}", grid.w.node(iw), grid.x.node(ix))
        }
        ProblemKind::Baseline => format!("x={:.4}", grid.x.node(idx)),
    })
}

/// Per-step model tables shared by every node of a sweep step.
struct StepTables {
    sig0: f64,
    /// `r0 (nu_k - w_i)` per price node.
    aw0: Vec<f64>,
    /// Combined exposure `-(e^w) sigma_tilde_k` per price node.
    s_w: Vec<f64>,
    /// `p_k - l_k - u` per control level.
    c_u: Vec<f64>,
    /// Temperature drift per `(x-node, control level)`, row-major.
    f_xu: Vec<f64>,
}

impl StepTables {
    fn build(
        k: usize,
        agent: &AgentSpec,
        market: &MarketModel,
        grid: &GridSpec,
        ew: &[f64],
    ) -> StepTables {
        let r0 = market.r0;
        let nu = market.nu.at_index(k);
        let sig_t = agent.load_sigma.at_index(k);
        let l = agent.load_forecast.at_index(k);
        let p = market.p_alloc.at_index(k);
        let theta_out = agent.etp.theta_out.at_index(k);
        let n_u = agent.control_set.len();

        let aw0 = (0..grid.w.n).map(|i| r0 * (nu - grid.w.node(i))).collect();
        let s_w = ew.iter().map(|&e| -e * sig_t).collect();
        let c_u = agent.control_set.iter().map(|&u| p - l - u).collect();
        let mut f_xu = Vec::with_capacity(grid.x.n * n_u);
        for j in 0..grid.x.n {
            let x = grid.x.node(j);
            for &u in &agent.control_set {
                f_xu.push(agent.etp.alpha * (theta_out - x) - agent.etp.kappa * u);
            }
        }
        StepTables { sig0: market.sigma0.at_index(k), aw0, s_w, c_u, f_xu }
    }
}

/// One explicit sub-step of the constrained problem: read `src`, write
/// `dst`, then enforce the budget ordering column by column.
#[allow(clippy::too_many_arguments)]
fn substep_constrained(
    src: &[f64],
    dst: &mut [f64],
    tables: &StepTables,
    grid: &GridSpec,
    mesh: &ControlMesh,
    template: &EvalCtx,
    comfort_x: &[f64],
    ew: &[f64],
    dt: f64,
) {
    let (nw, nx, ny) = (grid.w.n, grid.x.n, grid.y.n);
    let (hw, hx, hy) = (grid.w.spacing(), grid.x.spacing(), grid.y.spacing());
    let n_u = template.u_levels.len();
    let plane = nx * ny;

    dst.par_chunks_mut(plane).enumerate().for_each(|(iw, out)| {
        let mut ctx = template.clone();
        ctx.aw0 = tables.aw0[iw];
        ctx.s = tables.s_w[iw];
        ctx.price_scale = ew[iw];
        let mut scratch = Vec::with_capacity(mesh.zeta.len());
        let wp = iw + 1 < nw;
        let wm = iw > 0;

        for ix in 0..nx {
            ctx.comfort = comfort_x[ix];
            ctx.f_u.copy_from_slice(&tables.f_xu[ix * n_u..(ix + 1) * n_u]);
            let xp = ix + 1 < nx;
            let xm = ix > 0;

            for iy in 0..ny {
                let idx = (iw * nx + ix) * ny + iy;
                let v = src[idx];

                let mut d = DerivSet::default();
                // price axis: one-sided pair, centered, second difference
                let vp = if wp { src[idx + plane] } else { v };
                let vm = if wm { src[idx - plane] } else { v };
                d.dwp = if wp { (vp - v) / hw } else { (v - vm) / hw };
                d.dwm = if wm { (v - vm) / hw } else { d.dwp };
                if !wp {
                    d.dwp = d.dwm;
                }
                d.dwc = 0.5 * (d.dwp + d.dwm);
                d.dww = if wp && wm {
                    (vp - 2.0 * v + vm) / (hw * hw)
                } else if wp {
                    (v - 2.0 * src[idx + plane] + src[idx + 2 * plane]) / (hw * hw)
                } else {
                    (v - 2.0 * src[idx - plane] + src[idx - 2 * plane]) / (hw * hw)
                };

                // temperature axis: one-sided pair only
                let txp = if xp { (src[idx + ny] - v) / hx } else { f64::NAN };
                let txm = if xm { (v - src[idx - ny]) / hx } else { f64::NAN };
                d.dxp = if xp { txp } else { txm };
                d.dxm = if xm { txm } else { txp };

                // budget axis
                let yp = iy + 1 < ny;
                let ym = iy > 0;
                let typ = if yp { (src[idx + 1] - v) / hy } else { f64::NAN };
                let tym = if ym { (v - src[idx - 1]) / hy } else { f64::NAN };
                d.dyp = if yp { typ } else { tym };
                d.dym = if ym { tym } else { typ };
                d.dyc = 0.5 * (d.dyp + d.dym);
                d.dyy = if yp && ym {
                    (src[idx + 1] - 2.0 * v + src[idx - 1]) / (hy * hy)
                } else if yp {
                    (v - 2.0 * src[idx + 1] + src[idx + 2]) / (hy * hy)
                } else {
                    (v - 2.0 * src[idx - 1] + src[idx - 2]) / (hy * hy)
                };

                // cross difference with index-clamped corners
                let iwp = if wp { iw + 1 } else { iw };
                let iwm = if wm { iw - 1 } else { iw };
                let iyp = if yp { iy + 1 } else { iy };
                let iym = if ym { iy - 1 } else { iy };
                let corner = |a: usize, b: usize| src[(a * nx + ix) * ny + b];
                let denom = ((iwp - iwm) as f64 * hw) * ((iyp - iym) as f64 * hy);
                d.dwy = (corner(iwp, iyp) - corner(iwp, iym) - corner(iwm, iyp)
                    + corner(iwm, iym))
                    / denom;

                let locked = iy == 0;
                let (_, _, _, h) = ctx.argmax(&d, mesh, locked, &mut scratch);
                out[ix * ny + iy] = v + dt * h;
            }
        }

        // spending less budget can never be worse: enforce per column
        for ix in 0..nx {
            let col = &mut out[ix * ny..(ix + 1) * ny];
            for iy in 1..ny {
                if col[iy] < col[iy - 1] {
                    col[iy] = col[iy - 1];
                }
            }
        }
    });
}

/// Worst-case outflow rate of one constrained step: advection per axis
/// plus diffusion, the quantity the explicit update must keep below
/// `1/dt` per sub-step.
fn constrained_step_coef(
    tables: &StepTables,
    grid: &GridSpec,
    mesh: &ControlMesh,
    theta: f64,
) -> f64 {
    let (hw, hx, hy) = (grid.w.spacing(), grid.x.spacing(), grid.y.spacing());
    let gmax = mesh.gamma_max;
    let zmax = mesh.zeta_max;
    let aw_max = tables.aw0.iter().fold(0.0f64, |m, a| m.max(a.abs()))
        + theta.abs() * tables.sig0 * gmax;
    let ax_max = tables.f_xu.iter().fold(0.0f64, |m, f| m.max(f.abs()));
    let s_max = tables.s_w.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let ay_max = 2.0 * gmax * gmax + theta.abs() * zmax * (2.0 * gmax + s_max);
    aw_max / hw
        + ax_max / hx
        + ay_max / hy
        + tables.sig0 * tables.sig0 / (hw * hw)
        + 2.0 * zmax * zmax / (hy * hy)
        + tables.sig0 * zmax / (hw * hy)
}

/// The per-step sub-step counts the constrained solve will use on these
/// inputs. Running a companion solve on the same schedule makes the two
/// time discretizations carry the same numerical diffusion, which is what
/// lets their start values be compared as a ratio.
pub fn constrained_substep_schedule(
    agent: &AgentSpec,
    market: &MarketModel,
    theta: f64,
    grid: &GridSpec,
    mesh: &ControlMesh,
) -> Result<Vec<usize>> {
    check_common(agent, market, grid)?;
    mesh.validate()?;
    let ew: Vec<f64> = (0..grid.w.n).map(|i| grid.w.node(i).exp()).collect();
    (0..grid.time.n_steps())
        .map(|k| {
            let tables = StepTables::build(k, agent, market, grid, &ew);
            substeps_for(grid.time.dt, constrained_step_coef(&tables, grid, mesh, theta))
        })
        .collect()
}

/// Risk-sensitive, budget-constrained design problem on `(w, x, y)`.
///
/// Integrates the value function backward from `phi(., T) = -b` and
/// returns the full space-time table. The control mesh's levels must be
/// the agent's own control set, and the budget axis must cover the
/// contracted cap so the designed starting point lies inside the grid.
pub fn solve_constrained_hjb(
    agent: &AgentSpec,
    market: &MarketModel,
    theta: f64,
    grid: &GridSpec,
    mesh: &ControlMesh,
) -> Result<ValueGrid> {
    check_common(agent, market, grid)?;
    mesh.validate()?;
    if !(theta.is_finite() && theta != 0.0) {
        return Err(CoreError::validation(format!(
            "risk aversion must be finite and nonzero, got {theta}; \
             the risk-neutral solver handles the zero case"
        )));
    }
    if mesh.u_levels != agent.control_set {
        return Err(CoreError::validation(
            "control mesh levels differ from the agent's control set",
        ));
    }
    if grid.y.max < agent.terms.s_cap {
        return Err(CoreError::validation(format!(
            "budget axis tops out at {} but the contracted cap is {}",
            grid.y.max, agent.terms.s_cap
        )));
    }

    let n_steps = grid.time.n_steps();
    let slice_len = grid.w.n * grid.x.n * grid.y.n;
    let dt = grid.time.dt;

    let ew: Vec<f64> = (0..grid.w.n).map(|i| grid.w.node(i).exp()).collect();
    let comfort_x: Vec<f64> =
        (0..grid.x.n).map(|j| comfort_rate(grid.x.node(j), &agent.comfort)).collect();

    let mut values = vec![0.0; (n_steps + 1) * slice_len];
    values[n_steps * slice_len..].fill(-agent.terms.b);

    let template = EvalCtx {
        theta,
        sig0: 0.0,
        s: 0.0,
        aw0: 0.0,
        price_scale: 0.0,
        comfort: 0.0,
        u_levels: agent.control_set.clone(),
        c_u: Vec::new(),
        f_u: vec![0.0; agent.control_set.len()],
    };

    let mut buf_a = vec![0.0; slice_len];
    let mut buf_b = vec![0.0; slice_len];

    for k in (0..n_steps).rev() {
        let tables = StepTables::build(k, agent, market, grid, &ew);
        let mut ctx = template.clone();
        ctx.sig0 = tables.sig0;
        ctx.c_u = tables.c_u.clone();

        let m = substeps_for(dt, constrained_step_coef(&tables, grid, mesh, theta))?;
        let dt_sub = dt / m as f64;

        let (head, tail) = values.split_at_mut((k + 1) * slice_len);
        let prev = &tail[..slice_len];
        let cur = &mut head[k * slice_len..];

        if m == 1 {
            substep_constrained(prev, cur, &tables, grid, mesh, &ctx, &comfort_x, &ew, dt_sub);
        } else {
            buf_a.copy_from_slice(prev);
            for _ in 0..m {
                substep_constrained(
                    &buf_a, &mut buf_b, &tables, grid, mesh, &ctx, &comfort_x, &ew, dt_sub,
                );
                std::mem::swap(&mut buf_a, &mut buf_b);
            }
            cur.copy_from_slice(&buf_a);
        }

        if let Some(node) = first_bad_node(cur, grid, ProblemKind::Constrained) {
            return Err(CoreError::numerical(format!(
                "value function diverged at time step {k} (t={:.6}), node ({node}); \
                 refine the grid or reduce the loading bound",
                grid.time.time_at(k)
            )));
        }
    }

    Ok(ValueGrid {
        kind: ProblemKind::Constrained,
        grid: grid.clone(),
        theta,
        b: agent.terms.b,
        mesh: mesh.clone(),
        fingerprints: Fingerprints::default(),
        values,
    })
}

/// Risk-neutral relaxation on `(w, x)`: the same running reward with zero
/// loadings and no exposure penalty, integrated backward from 0. Its start
/// value bounds what any risk-limiting design can deliver, which is what
/// makes the suboptimality certificate possible.
pub fn solve_risk_neutral(
    agent: &AgentSpec,
    market: &MarketModel,
    grid: &GridSpec,
) -> Result<ValueGrid> {
    solve_risk_neutral_inner(agent, market, grid, None)
}

/// Risk-neutral relaxation forced onto a companion solve's sub-step
/// schedule (never below its own stability requirement), so the two
/// values share one time discretization. See
/// [`constrained_substep_schedule`].
pub fn solve_risk_neutral_matched(
    agent: &AgentSpec,
    market: &MarketModel,
    grid: &GridSpec,
    schedule: &[usize],
) -> Result<ValueGrid> {
    if schedule.len() != grid.time.n_steps() {
        return Err(CoreError::validation(format!(
            "schedule covers {} steps, the grid has {}",
            schedule.len(),
            grid.time.n_steps()
        )));
    }
    solve_risk_neutral_inner(agent, market, grid, Some(schedule))
}

fn solve_risk_neutral_inner(
    agent: &AgentSpec,
    market: &MarketModel,
    grid: &GridSpec,
    schedule: Option<&[usize]>,
) -> Result<ValueGrid> {
    check_common(agent, market, grid)?;
    let mesh = ControlMesh::new(agent.control_set.clone(), 1, 1, 0.0, 0.0)?;

    let n_steps = grid.time.n_steps();
    let (nw, nx) = (grid.w.n, grid.x.n);
    let slice_len = nw * nx;
    let dt = grid.time.dt;
    let (hw, hx) = (grid.w.spacing(), grid.x.spacing());

    let ew: Vec<f64> = (0..nw).map(|i| grid.w.node(i).exp()).collect();
    let comfort_x: Vec<f64> =
        (0..nx).map(|j| comfort_rate(grid.x.node(j), &agent.comfort)).collect();

    let mut values = vec![0.0; (n_steps + 1) * slice_len];
    let n_u = agent.control_set.len();

    for k in (0..n_steps).rev() {
        let tables = StepTables::build(k, agent, market, grid, &ew);
        let aw_max = tables.aw0.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        let ax_max = tables.f_xu.iter().fold(0.0f64, |m, f| m.max(f.abs()));
        let coef = aw_max / hw + ax_max / hx + tables.sig0 * tables.sig0 / (hw * hw);
        let mut m = substeps_for(dt, coef)?;
        if let Some(sched) = schedule {
            m = m.max(sched[k]);
        }
        let dt_sub = dt / m as f64;

        let mut ctx = EvalCtx {
            theta: 0.0,
            sig0: tables.sig0,
            s: 0.0,
            aw0: 0.0,
            price_scale: 0.0,
            comfort: 0.0,
            u_levels: agent.control_set.clone(),
            c_u: tables.c_u.clone(),
            f_u: vec![0.0; n_u],
        };
        let mut scratch = Vec::new();

        let (head, tail) = values.split_at_mut((k + 1) * slice_len);
        let prev = &tail[..slice_len];
        let cur = &mut head[k * slice_len..];

        let mut src: Vec<f64> = prev.to_vec();
        let mut dst = vec![0.0; slice_len];
        for _ in 0..m {
            for iw in 0..nw {
                ctx.aw0 = tables.aw0[iw];
                ctx.price_scale = ew[iw];
                let wp = iw + 1 < nw;
                let wm = iw > 0;
                for ix in 0..nx {
                    let idx = iw * nx + ix;
                    let v = src[idx];
                    ctx.comfort = comfort_x[ix];
                    ctx.f_u.copy_from_slice(&tables.f_xu[ix * n_u..(ix + 1) * n_u]);

                    let mut d = DerivSet::default();
                    let vp = if wp { src[idx + nx] } else { v };
                    let vm = if wm { src[idx - nx] } else { v };
                    d.dwp = if wp { (vp - v) / hw } else { (v - vm) / hw };
                    d.dwm = if wm { (v - vm) / hw } else { d.dwp };
                    if !wp {
                        d.dwp = d.dwm;
                    }
                    d.dwc = 0.5 * (d.dwp + d.dwm);
                    d.dww = if wp && wm {
                        (vp - 2.0 * v + vm) / (hw * hw)
                    } else if wp {
                        (v - 2.0 * src[idx + nx] + src[idx + 2 * nx]) / (hw * hw)
                    } else {
                        (v - 2.0 * src[idx - nx] + src[idx - 2 * nx]) / (hw * hw)
                    };
                    let xp = ix + 1 < nx;
                    let xm = ix > 0;
                    let txp = if xp { (src[idx + 1] - v) / hx } else { f64::NAN };
                    let txm = if xm { (v - src[idx - 1]) / hx } else { f64::NAN };
                    d.dxp = if xp { txp } else { txm };
                    d.dxm = if xm { txm } else { txp };

                    let (_, _, _, h) = ctx.argmax(&d, &mesh, true, &mut scratch);
                    dst[idx] = v + dt_sub * h;
                }
            }
            std::mem::swap(&mut src, &mut dst);
        }
        cur.copy_from_slice(&src);

        if let Some(node) = first_bad_node(cur, grid, ProblemKind::RiskNeutral) {
            return Err(CoreError::numerical(format!(
                "risk-neutral value diverged at time step {k}, node ({node})"
            )));
        }
    }

    Ok(ValueGrid {
        kind: ProblemKind::RiskNeutral,
        grid: grid.clone(),
        theta: 0.0,
        b: 0.0,
        mesh,
        fingerprints: Fingerprints::default(),
        values,
    })
}

/// Agent-alone baseline on `x`: tariff cost against comfort, no price
/// state, no loadings. Returns the participation benchmark `b_bar`, the
/// intrinsic variance `s_bar = sum (mu sigma_tilde)^2 dt`, and the argmax
/// table used to cross-check policy extraction.
pub fn solve_baseline_hjb(agent: &AgentSpec, grid: &GridSpec) -> Result<BaselineSolution> {
    agent.validate()?;
    grid.validate()?;
    if !grid.time.same_as(&agent.grid) {
        return Err(CoreError::validation("solver grid and agent use different time grids"));
    }

    let n_steps = grid.time.n_steps();
    let nx = grid.x.n;
    let dt = grid.time.dt;
    let hx = grid.x.spacing();
    let n_u = agent.control_set.len();
    let mesh = ControlMesh::new(agent.control_set.clone(), 1, 1, 0.0, 0.0)?;

    let comfort_x: Vec<f64> = (0..nx).map(|j| comfort_rate(grid.x.node(j), &agent.comfort)).collect();

    let mut values = vec![0.0; (n_steps + 1) * nx];
    let mut scratch = Vec::new();

    for k in (0..n_steps).rev() {
        let mu = agent.tariff.at_index(k);
        let l = agent.load_forecast.at_index(k);
        let theta_out = agent.etp.theta_out.at_index(k);
        let c_u: Vec<f64> = agent.control_set.iter().map(|&u| -mu * (l + u)).collect();
        let f_xu: Vec<f64> = (0..nx)
            .flat_map(|j| {
                let x = grid.x.node(j);
                agent
                    .control_set
                    .iter()
                    .map(move |&u| agent.etp.alpha * (theta_out - x) - agent.etp.kappa * u)
            })
            .collect();

        let ax_max = f_xu.iter().fold(0.0f64, |m, f| m.max(f.abs()));
        let m = substeps_for(dt, ax_max / hx)?;
        let dt_sub = dt / m as f64;

        let mut ctx = EvalCtx {
            theta: 0.0,
            sig0: 0.0,
            s: 0.0,
            aw0: 0.0,
            price_scale: 1.0,
            comfort: 0.0,
            u_levels: agent.control_set.clone(),
            c_u,
            f_u: vec![0.0; n_u],
        };

        let (head, tail) = values.split_at_mut((k + 1) * nx);
        let prev = &tail[..nx];
        let cur = &mut head[k * nx..];

        let mut src: Vec<f64> = prev.to_vec();
        let mut dst = vec![0.0; nx];
        for _ in 0..m {
            for ix in 0..nx {
                let v = src[ix];
                ctx.comfort = comfort_x[ix];
                ctx.f_u.copy_from_slice(&f_xu[ix * n_u..(ix + 1) * n_u]);
                let mut d = DerivSet::default();
                let xp = ix + 1 < nx;
                let xm = ix > 0;
                let txp = if xp { (src[ix + 1] - v) / hx } else { f64::NAN };
                let txm = if xm { (v - src[ix - 1]) / hx } else { f64::NAN };
                d.dxp = if xp { txp } else { txm };
                d.dxm = if xm { txm } else { txp };
                let (_, _, _, h) = ctx.argmax(&d, &mesh, true, &mut scratch);
                dst[ix] = v + dt_sub * h;
            }
            std::mem::swap(&mut src, &mut dst);
        }
        cur.copy_from_slice(&src);

        if let Some(node) = first_bad_node(cur, grid, ProblemKind::Baseline) {
            return Err(CoreError::numerical(format!(
                "baseline value diverged at time step {k}, node ({node})"
            )));
        }
    }

    let vg = Arc::new(ValueGrid {
        kind: ProblemKind::Baseline,
        grid: grid.clone(),
        theta: 0.0,
        b: 0.0,
        mesh,
        fingerprints: Fingerprints::default(),
        values,
    });

    let b_bar = vg.interpolate(0, 0.0, agent.etp.x0, 0.0).0;
    let s_bar: f64 = (0..n_steps)
        .map(|k| {
            let e = agent.tariff.at_index(k) * agent.load_sigma.at_index(k);
            e * e * dt
        })
        .sum();

    let policy = Policy::new_baseline(Arc::clone(&vg), agent.clone());
    let mut table = Vec::with_capacity(n_steps * nx);
    for k in 0..n_steps {
        let t = grid.time.time_at(k);
        for ix in 0..nx {
            let d = policy.control(t, 0.0, grid.x.node(ix), 0.0);
            let iu = agent
                .control_set
                .iter()
                .position(|&u| u == d.u)
                .expect("policy returned a level outside the control set");
            table.push(iu);
        }
    }

    Ok(BaselineSolution { value: vg, b_bar, s_bar, table, policy })
}
