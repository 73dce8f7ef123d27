//! Shared Hamiltonian maximization used by both the backward solver and
//! policy extraction.
//!
//! The maximand separates into independent pieces, which turns the naive
//! `|U| x |gamma| x |zeta|` triple scan into a cheap `u`-scan plus a
//! `gamma`-scan with a precomputed `zeta` table:
//!
//! ```text
//! H(u, gamma, zeta) = C0 + Au(u) + B(gamma) + Dz(zeta) + X(gamma, zeta)
//! ```
//!
//! where only the coupling `X = theta (z1 g1 - z2 (s - g2)) * Dphi_y`
//! involves both loadings. Advection terms are applied with the upwind
//! one-sided difference matching their sign; quadratic (variance) terms use
//! the centered estimates. The solver feeds genuinely one-sided stencils;
//! policy extraction feeds interpolant derivatives where the one-sided
//! slots coincide, so both run through the identical arithmetic.

use crate::models::{
    comfort_rate, etp_drift, sigma_agent, sigma_principal, AgentSpec, MarketModel,
};

use super::{ControlDecision, ControlMesh, ProblemKind};

/// Value-function difference stencil at one node or query state.
///
/// `p`/`m` suffixes are the forward/backward one-sided first differences,
/// `c` the centered one; `dww`, `dyy`, `dwy` are second differences. Slots
/// irrelevant for a problem kind stay zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DerivSet {
    pub dwp: f64,
    pub dwm: f64,
    pub dwc: f64,
    pub dxp: f64,
    pub dxm: f64,
    pub dyp: f64,
    pub dym: f64,
    pub dyc: f64,
    pub dww: f64,
    pub dyy: f64,
    pub dwy: f64,
}

/// Everything state-dependent the maximand needs at one `(t, w, x)`.
///
/// The solver reuses one instance per worker, overwriting the scalar
/// fields node to node and the `f_u` row slice per temperature node, so the
/// inner loop allocates nothing.
#[derive(Debug, Clone)]
pub struct EvalCtx {
    pub theta: f64,
    /// Log-price diffusion sigma0 at this time.
    pub sig0: f64,
    /// Combined noise exposure `sP + sA` at this state.
    pub s: f64,
    /// Log-price drift `r0 (nu - w)` at this state.
    pub aw0: f64,
    /// Reward per control level is `price_scale * c_u[i] + comfort`.
    pub price_scale: f64,
    pub comfort: f64,
    pub u_levels: Vec<f64>,
    pub c_u: Vec<f64>,
    /// Temperature drift per control level at this `(t, x)`.
    pub f_u: Vec<f64>,
}

/// `a * (forward or backward difference)` selected by the sign of `a`.
#[inline]
fn upwind(a: f64, dp: f64, dm: f64) -> f64 {
    if a > 0.0 {
        a * dp
    } else if a < 0.0 {
        a * dm
    } else {
        0.0
    }
}

impl EvalCtx {
    /// Build a context directly from model state (policy queries, tests).
    /// The solver instead batches these fields from per-step tables.
    pub fn at_state(
        t: f64,
        w: f64,
        x: f64,
        agent: &AgentSpec,
        market: Option<&MarketModel>,
        theta: f64,
        kind: ProblemKind,
    ) -> EvalCtx {
        let u_levels = agent.control_set.clone();
        let f_u: Vec<f64> = u_levels.iter().map(|&u| etp_drift(t, x, u, &agent.etp)).collect();
        let comfort = comfort_rate(x, &agent.comfort);
        match kind {
            ProblemKind::Constrained | ProblemKind::RiskNeutral => {
                let m = market.expect("market model required for price-state problems");
                let ew = w.exp();
                let c_u: Vec<f64> = u_levels
                    .iter()
                    .map(|&u| m.p_alloc.at(t) - agent.load_forecast.at(t) - u)
                    .collect();
                EvalCtx {
                    theta,
                    sig0: m.sigma0.at(t),
                    s: sigma_principal(t, w, agent) + sigma_agent(t, agent),
                    aw0: m.log_price_drift(t, w),
                    price_scale: ew,
                    comfort,
                    u_levels,
                    c_u,
                    f_u,
                }
            }
            ProblemKind::Baseline => {
                let mu = agent.tariff.at(t);
                let l = agent.load_forecast.at(t);
                let c_u: Vec<f64> = u_levels.iter().map(|&u| -mu * (l + u)).collect();
                EvalCtx {
                    theta: 0.0,
                    sig0: 0.0,
                    s: 0.0,
                    aw0: 0.0,
                    price_scale: 1.0,
                    comfort,
                    u_levels,
                    c_u,
                    f_u,
                }
            }
        }
    }

    /// Control-independent part: price advection and diffusion, the
    /// price-direction gradient penalty, and the comfort rate.
    #[inline]
    fn base(&self, d: &DerivSet) -> f64 {
        let sd = self.sig0 * d.dwc;
        upwind(self.aw0, d.dwp, d.dwm) + 0.5 * self.sig0 * self.sig0 * d.dww
            - 0.5 * self.theta * sd * sd
            + self.comfort
    }

    /// Load-modulation part for level index `iu`.
    #[inline]
    fn u_part(&self, d: &DerivSet, iu: usize) -> f64 {
        upwind(self.f_u[iu], d.dxp, d.dxm) + self.price_scale * self.c_u[iu]
    }

    /// Gamma-only part: loading-induced price advection, budget drain, and
    /// the retained-exposure penalty.
    #[inline]
    fn gamma_part(&self, d: &DerivSet, g: [f64; 2]) -> f64 {
        let gsq = g[0] * g[0] + g[1] * g[1];
        let resid = self.s - g[1];
        upwind(self.theta * self.sig0 * g[0], d.dwp, d.dwm) - gsq * d.dym
            - 0.5 * self.theta * (g[0] * g[0] + resid * resid)
    }

    /// Zeta-only part: budget-direction diffusion and gradient penalty.
    #[inline]
    fn zeta_part(&self, d: &DerivSet, z: [f64; 2]) -> f64 {
        let zd1 = z[0] * d.dyc;
        let zd2 = z[1] * d.dyc;
        -self.theta * (self.sig0 * d.dwc) * zd1 - 0.5 * self.theta * (zd1 * zd1 + zd2 * zd2)
            + self.sig0 * z[0] * d.dwy
            + 0.5 * (z[0] * z[0] + z[1] * z[1]) * d.dyy
    }

    /// Gamma-zeta coupling: the measure-shift drift of the budget.
    #[inline]
    fn coupling(&self, d: &DerivSet, g: [f64; 2], z: [f64; 2]) -> f64 {
        let a2 = self.theta * (z[0] * g[0] - z[1] * (self.s - g[1]));
        upwind(a2, d.dyp, d.dym)
    }

    /// The maximand at one explicit control (diagnostics and tests). The
    /// control's `u` must be one of this context's levels.
    pub fn eval_single(&self, d: &DerivSet, ctl: &ControlDecision) -> f64 {
        let iu = self
            .u_levels
            .iter()
            .position(|&u| u == ctl.u)
            .expect("control level not in the context's control set");
        self.base(d) + self.u_part(d, iu) + self.gamma_part(d, ctl.gamma)
            + self.zeta_part(d, ctl.zeta)
            + self.coupling(d, ctl.gamma, ctl.zeta)
    }

    /// Maximize over the mesh. Returns `(iu, igamma, izeta, H)`.
    ///
    /// With `budget_locked` the loadings are pinned to `(0, 0)` (their
    /// penalty `-theta/2 s^2` still applies) and only `u` is scanned.
    /// Ties keep the earliest candidate; since the mesh is norm-sorted and
    /// levels ascend, that is the least aggressive control.
    pub fn argmax(
        &self,
        d: &DerivSet,
        mesh: &ControlMesh,
        budget_locked: bool,
        zeta_scratch: &mut Vec<f64>,
    ) -> (usize, usize, usize, f64) {
        let mut best_u = 0usize;
        let mut best_au = self.u_part(d, 0);
        for iu in 1..self.u_levels.len() {
            let au = self.u_part(d, iu);
            if au > best_au {
                best_au = au;
                best_u = iu;
            }
        }

        let (best_g, best_z, best_k) = if budget_locked {
            (0usize, 0usize, self.gamma_part(d, [0.0, 0.0]))
        } else {
            zeta_scratch.clear();
            zeta_scratch.extend(mesh.zeta.iter().map(|&z| self.zeta_part(d, z)));
            let mut bg = 0usize;
            let mut bz = 0usize;
            let mut bk = f64::NEG_INFINITY;
            for (gi, &g) in mesh.gamma.iter().enumerate() {
                let b = self.gamma_part(d, g);
                for (zi, (&z, &dz)) in mesh.zeta.iter().zip(zeta_scratch.iter()).enumerate() {
                    let k = b + dz + self.coupling(d, g, z);
                    if k > bk {
                        bk = k;
                        bg = gi;
                        bz = zi;
                    }
                }
            }
            (bg, bz, bk)
        };

        (best_u, best_g, best_z, self.base(d) + best_au + best_k)
    }
}

/// Free-function form of [`EvalCtx::argmax`].
pub fn argmax_controls(
    ctx: &EvalCtx,
    d: &DerivSet,
    mesh: &ControlMesh,
    budget_locked: bool,
    zeta_scratch: &mut Vec<f64>,
) -> (usize, usize, usize, f64) {
    ctx.argmax(d, mesh, budget_locked, zeta_scratch)
}
