//! Projected nested-gradient ascent on `C̃(L) = C(K(L), L)`.
//!
//! Each outer iteration solves the inner problem for the current `L`, then
//! takes one ascent step in one of three geometries (plain, natural,
//! Gauss-Newton) and optionally projects back onto
//! `Ω = {L : Q - LᵀRᵛL ⪰ ζI}`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{LqGame, NashSolution};
use crate::inner_loop::{self, InnerConfig, InnerMethod, InnerResult, Stepsize};
use crate::linalg::{self, Mat, SymMat};
use crate::policy::{self, PolicyEval, PolicyPair};
use crate::trace::{OuterTrace, TraceRecord};

/// Slack below zero still counted as inside Ω.
pub const OMEGA_SLACK: f64 = 1e-12;
pub const DEFAULT_NG_STEP: f64 = 0.1;
pub const DEFAULT_NATURAL_STEP: f64 = 0.05;
pub const DEFAULT_OUTER_TOL: f64 = 1e-8;
pub const DEFAULT_OUTER_MAX_ITER: usize = 100_000;
/// Inner tolerance used by the nested solver unless overridden.
pub const DEFAULT_NESTED_INNER_TOL: f64 = 1e-11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaSet {
    pub zeta: f64,
    /// `M = Q - ζI`.
    pub bound: SymMat,
    #[serde(skip)]
    whitening: Option<Whitening>,
}

#[derive(Debug, Clone, PartialEq)]
struct Whitening {
    rv_sqrt: Mat,
    rv_inv_sqrt: Mat,
    m_sqrt: Mat,
    m_inv_sqrt: Mat,
}

impl OmegaSet {
    pub fn new(game: &LqGame, zeta: f64) -> Result<Self> {
        if !(zeta > 0.0) || !zeta.is_finite() {
            return Err(Error::Config(format!("zeta must be positive, got {zeta}")));
        }
        let d = game.d();
        let bound = SymMat::new(game.q().as_mat() - Mat::identity(d, d) * zeta)?;
        let (m_sqrt, m_inv_sqrt) = bound.sqrt_and_inv_sqrt("Q - zeta I")?;
        let (rv_sqrt, rv_inv_sqrt) = game.rv().sqrt_and_inv_sqrt("Rv")?;
        Ok(OmegaSet {
            zeta,
            bound,
            whitening: Some(Whitening {
                rv_sqrt,
                rv_inv_sqrt,
                m_sqrt,
                m_inv_sqrt,
            }),
        })
    }

    /// `ζ = σ_min(Q̃_{L*}) / 2` when the equilibrium is known and that matrix is
    /// positive definite, otherwise `σ_min(Q) / 2`.
    pub fn default_for(game: &LqGame, oracle: Option<&NashSolution>) -> Result<Self> {
        let from_oracle = match oracle {
            Some(sol) => {
                let margin = game.q_tilde(&sol.l_star)?.min_eigenvalue();
                (margin > 0.0).then_some(margin)
            }
            None => None,
        };
        let base = from_oracle.unwrap_or_else(|| game.q().min_eigenvalue());
        OmegaSet::new(game, 0.5 * base)
    }

    /// `λ_min(Q - LᵀRᵛL - ζI)`.
    pub fn slack(&self, game: &LqGame, l: &Mat) -> f64 {
        let inner = l.transpose() * game.rv().as_mat() * l;
        let m = self.bound.as_mat() - inner;
        let m = (&m + m.transpose()) * 0.5;
        m.symmetric_eigenvalues().min()
    }

    pub fn contains(&self, game: &LqGame, l: &Mat) -> bool {
        self.slack(game, l) >= -OMEGA_SLACK
    }

    /// Whether `ζ < σ_min(Q̃_{L*})`, i.e. the equilibrium lies strictly inside.
    pub fn admits(&self, game: &LqGame, sol: &NashSolution) -> Result<bool> {
        Ok(self.zeta < game.q_tilde(&sol.l_star)?.min_eigenvalue())
    }

    fn whitening(&self, game: &LqGame) -> Whitening {
        match &self.whitening {
            Some(w) => w.clone(),
            None => {
                // Deserialized sets carry only ζ and M; both are validated there.
                let rebuilt = OmegaSet::new(game, self.zeta).expect("Ω was valid when built");
                rebuilt.whitening.expect("constructor fills the whitening")
            }
        }
    }
}

/// Whitened singular-value clipping: with `L̃ = (Rᵛ)^{1/2} L M^{-1/2}`, clip
/// the singular values of `L̃` at one and map back. Points already in Ω are
/// returned unchanged.
pub fn project_omega(l: &Mat, omega: &OmegaSet, game: &LqGame) -> Mat {
    if omega.contains(game, l) {
        return l.clone();
    }
    let w = omega.whitening(game);
    let whitened = &w.rv_sqrt * l * &w.m_inv_sqrt;
    let mut s = linalg::svd(&whitened).expect("finite whitened gain");
    s.singular_values.apply(|x| *x = x.min(1.0));
    &w.rv_inv_sqrt * s.reconstruct() * &w.m_sqrt
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterVariant {
    NestedGradient,
    NaturalNestedGradient,
    GaussNewtonNestedGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    #[default]
    Off,
    WhitenedSvClip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuterConfig {
    pub variant: OuterVariant,
    pub stepsize: Stepsize,
    /// Stop once the gradient-mapping norm is at most `tol`.
    pub tol: f64,
    pub max_iter: usize,
    pub inner: InnerConfig,
    pub projection: Projection,
}

impl OuterConfig {
    /// Defaults: η = 0.1 (plain), 0.05 (natural), `1/(2‖W_L‖)` (Gauss-Newton);
    /// inner loop is Gauss-Newton with α = 1/2.
    pub fn new(variant: OuterVariant) -> Self {
        let stepsize = match variant {
            OuterVariant::NestedGradient => Stepsize::Fixed(DEFAULT_NG_STEP),
            OuterVariant::NaturalNestedGradient => Stepsize::Fixed(DEFAULT_NATURAL_STEP),
            OuterVariant::GaussNewtonNestedGradient => Stepsize::Adaptive,
        };
        OuterConfig {
            variant,
            stepsize,
            tol: DEFAULT_OUTER_TOL,
            max_iter: DEFAULT_OUTER_MAX_ITER,
            inner: InnerConfig::new(InnerMethod::GaussNewton).with_tol(DEFAULT_NESTED_INNER_TOL),
            projection: Projection::Off,
        }
    }

    pub fn with_stepsize(mut self, eta: f64) -> Self {
        self.stepsize = Stepsize::Fixed(eta);
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn with_inner(mut self, inner: InnerConfig) -> Self {
        self.inner = inner;
        self
    }

    pub fn with_projection(mut self, projection: Projection) -> Self {
        self.projection = projection;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!(
                "outer tolerance must be positive, got {}",
                self.tol
            )));
        }
        match self.stepsize {
            Stepsize::Fixed(eta) if !(eta > 0.0) || !eta.is_finite() => {
                Err(Error::Config(format!("outer stepsize must be positive, got {eta}")))
            }
            Stepsize::Adaptive if self.variant != OuterVariant::GaussNewtonNestedGradient => Err(Error::Config(
                "adaptive outer stepsize is only defined for the Gauss-Newton variant".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// `W_L = Rᵛ - Cᵀ[P - PB(Rᵘ + BᵀPB)⁻¹BᵀP]C`, required positive definite.
pub fn w_matrix(game: &LqGame, p: &SymMat) -> Result<SymMat> {
    let (b, c) = (game.b(), game.c());
    let pm = p.as_mat();
    let gram = game.ru().as_mat() + b.transpose() * pm * b;
    let pb = pm * b;
    let reduced = pm - &pb * linalg::inverse(&gram, "Ru + BᵀPB")? * pb.transpose();
    let w = game.rv().as_mat() - c.transpose() * reduced * c;
    let w = SymMat::new((&w + w.transpose()) * 0.5)?;
    let min_eig = w.min_eigenvalue();
    if min_eig <= 0.0 {
        return Err(Error::Indefinite { what: "W_L", min_eig });
    }
    Ok(w)
}

/// `∇_L C̃(L) = 2 F Σ` evaluated at `(K(L), L)`.
pub fn nested_gradient(game: &LqGame, l: &Mat, inner: &InnerResult) -> Result<Mat> {
    Ok(policy::evaluate_gains(game, &inner.k, l)?.grad_l)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OuterStep {
    pub next: Mat,
    /// `(L' - L) / (2η)`.
    pub mapping: Mat,
    pub projected: bool,
    pub stepsize: f64,
}

fn resolve_outer_stepsize(game: &LqGame, ev: &PolicyEval, cfg: &OuterConfig) -> Result<f64> {
    match cfg.stepsize {
        Stepsize::Fixed(eta) => Ok(eta),
        Stepsize::Adaptive => Ok(0.5 / w_matrix(game, &ev.p)?.max_eigenvalue()),
    }
}

fn step_from_eval(game: &LqGame, l: &Mat, ev: &PolicyEval, cfg: &OuterConfig, omega: &OmegaSet) -> Result<OuterStep> {
    let eta = resolve_outer_stepsize(game, ev, cfg)?;
    let direction = match cfg.variant {
        OuterVariant::NestedGradient => ev.grad_l.clone(),
        OuterVariant::NaturalNestedGradient => &ev.f * 2.0,
        OuterVariant::GaussNewtonNestedGradient => {
            let w = w_matrix(game, &ev.p)?;
            linalg::inverse(w.as_mat(), "W_L")? * &ev.f * 2.0
        }
    };
    Ok(apply_step(game, l, direction, eta, cfg.projection, omega))
}

/// `L' = Proj[L + η D]` and its gradient mapping `(L' - L) / (2η)`.
pub fn apply_step(
    game: &LqGame,
    l: &Mat,
    direction: Mat,
    eta: f64,
    projection: Projection,
    omega: &OmegaSet,
) -> OuterStep {
    let raw = l + direction * eta;
    let (next, projected) = match projection {
        Projection::Off => (raw, false),
        Projection::WhitenedSvClip => {
            let inside = omega.contains(game, &raw);
            (project_omega(&raw, omega, game), !inside)
        }
    };
    let mapping = (&next - l) / (2.0 * eta);
    OuterStep {
        next,
        mapping,
        projected,
        stepsize: eta,
    }
}

/// One projected ascent step from `L` given the inner solution `K(L)`.
pub fn outer_step(
    game: &LqGame,
    l: &Mat,
    inner: &InnerResult,
    cfg: &OuterConfig,
    omega: &OmegaSet,
) -> Result<OuterStep> {
    cfg.validate()?;
    let ev = policy::evaluate_gains(game, &inner.k, l)?;
    step_from_eval(game, l, &ev, cfg, omega)
}

/// A failed run together with everything recorded before the failure.
#[derive(Debug, Clone, PartialEq)]
pub struct RunError {
    pub error: Error,
    pub trace: OuterTrace,
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} recorded iterations)", self.error, self.trace.len())
    }
}

impl std::error::Error for RunError {}

/// `K0` for the first outer iteration: the Riccati best response to `L = 0`,
/// or to `L0` itself when the former does not stabilize `L0`.
pub fn initial_gain(game: &LqGame, l0: &Mat) -> Result<Mat> {
    let zero = Mat::zeros(game.m2(), game.d());
    let k0 = inner_loop::solve_inner_riccati(game, &zero, inner_loop::RICCATI_TOL, inner_loop::RICCATI_MAX_ITER)?.k;
    if policy::is_stabilizing(game, &k0, l0) {
        return Ok(k0);
    }
    Ok(inner_loop::solve_inner_riccati(game, l0, inner_loop::RICCATI_TOL, inner_loop::RICCATI_MAX_ITER)?.k)
}

/// Inner solve warm-started at `k_warm`, falling back to the Riccati solve
/// when the warm start does not stabilize the new `L`.
pub fn solve_inner_warm(game: &LqGame, l: &Mat, k_warm: &Mat, cfg: &InnerConfig) -> Result<InnerResult> {
    match inner_loop::solve_inner(game, l, k_warm, cfg) {
        Err(Error::StabilityLost { .. }) | Err(Error::Unstable { .. }) => {
            inner_loop::solve_inner_riccati(game, l, inner_loop::RICCATI_TOL, inner_loop::RICCATI_MAX_ITER)
        }
        other => other,
    }
}

pub(crate) fn record_for(
    t: usize,
    game: &LqGame,
    l: &Mat,
    k: &Mat,
    ev: &PolicyEval,
    grad_map_norm: f64,
    proj_active: bool,
) -> Result<TraceRecord> {
    Ok(TraceRecord {
        t,
        l: l.clone(),
        k: k.clone(),
        cost: ev.cost,
        grad_map_norm,
        grad_norm: ev.grad_l.norm(),
        grad_k_norm: ev.grad_k.norm(),
        lambda_min_qtilde: game.q_tilde(l)?.min_eigenvalue(),
        proj_active,
        rho: ev.rho,
    })
}

/// Alternates the inner solve and [`outer_step`] until the gradient-mapping
/// norm drops to `cfg.tol`. Returns `(K(L_T), L_T)` and the trace.
pub fn solve_nested(
    game: &LqGame,
    l0: &Mat,
    cfg: &OuterConfig,
    omega: &OmegaSet,
) -> std::result::Result<(PolicyPair, OuterTrace), RunError> {
    let mut trace = OuterTrace::new(game.sigma0().min_eigenvalue());
    let fail = |error: Error, trace: OuterTrace| RunError { error, trace };
    if let Err(e) = cfg
        .validate()
        .and_then(|_| game.check_gains(&Mat::zeros(game.m1(), game.d()), l0))
    {
        return Err(fail(e, trace));
    }
    let mut k_warm = match initial_gain(game, l0) {
        Ok(k) => k,
        Err(e) => return Err(fail(e, trace)),
    };
    let mut l = l0.clone();
    for t in 0..=cfg.max_iter {
        let iteration = (|| -> Result<(InnerResult, PolicyEval, OuterStep)> {
            let inner = solve_inner_warm(game, &l, &k_warm, &cfg.inner)?;
            let ev = match policy::evaluate_gains(game, &inner.k, &l) {
                Err(Error::Unstable { rho }) => {
                    return Err(Error::StabilityLost {
                        location: format!("outer iteration {t}"),
                        rho,
                    })
                }
                other => other?,
            };
            let step = step_from_eval(game, &l, &ev, cfg, omega)?;
            Ok((inner, ev, step))
        })();
        let (inner, ev, step) = match iteration {
            Ok(v) => v,
            Err(e) => return Err(fail(e, trace)),
        };
        let map_norm = step.mapping.norm();
        match record_for(t, game, &l, &inner.k, &ev, map_norm, step.projected) {
            Ok(r) => trace.records.push(r),
            Err(e) => return Err(fail(e, trace)),
        }
        trace.nu = w_matrix(game, &ev.p).ok().map(|w| w.min_eigenvalue());
        if map_norm <= cfg.tol {
            return Ok((PolicyPair::new(inner.k, l), trace));
        }
        if t == cfg.max_iter {
            let error = Error::NonConvergence {
                what: "nested outer iteration",
                iterations: t,
                residual: map_norm,
            };
            return Err(fail(error, trace));
        }
        k_warm = inner.k;
        l = step.next;
    }
    unreachable!("loop returns on its last iteration")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{case1, solve_gare_default};
    use crate::inner_loop::solve_inner_riccati;
    use proptest::prelude::*;

    fn scalar_game(q: f64, rv: f64) -> LqGame {
        let m = |x: f64| Mat::from_element(1, 1, x);
        let s = |x: f64| SymMat::new(m(x)).unwrap();
        LqGame::new(m(0.5), m(1.0), m(0.5), s(q), s(1.0), s(rv), s(1.0)).unwrap()
    }

    fn riccati(game: &LqGame, l: &Mat) -> InnerResult {
        solve_inner_riccati(game, l, 1e-13, 1_000_000).unwrap()
    }

    fn nested_cost(game: &LqGame, l: &Mat) -> f64 {
        policy::evaluate_gains(game, &riccati(game, l).k, l).unwrap().cost
    }

    #[test]
    fn w_matrix_trivial_cases() {
        let g = case1();
        let w = w_matrix(&g, &SymMat::zeros(3)).unwrap();
        assert!((w.as_mat() - g.rv().as_mat()).norm() < 1e-15);

        let g0 = LqGame::new(
            g.a().clone(),
            g.b().clone(),
            Mat::zeros(3, 1),
            g.q().clone(),
            g.ru().clone(),
            g.rv().clone(),
            g.sigma0().clone(),
        )
        .unwrap();
        let sol = solve_gare_default(&g).unwrap();
        let w = w_matrix(&g0, &sol.p_star).unwrap();
        assert!((w.as_mat() - g.rv().as_mat()).norm() < 1e-15);

        let w = w_matrix(&g, &sol.p_star).unwrap();
        let c = g.c();
        let lower = SymMat::new(g.rv().as_mat() - c.transpose() * sol.p_star.as_mat() * c).unwrap();
        assert!(w.min_eigenvalue() >= lower.min_eigenvalue() - 1e-12);
        assert!(lower.min_eigenvalue() > 0.0);
    }

    #[test]
    fn w_matrix_rejects_indefinite() {
        let g = scalar_game(1.0, 0.1);
        let p = SymMat::new(Mat::from_element(1, 1, 100.0)).unwrap();
        assert!(matches!(w_matrix(&g, &p), Err(Error::Indefinite { what: "W_L", .. })));
    }

    #[test]
    fn nested_gradient_matches_finite_differences() {
        let g = case1();
        let l = Mat::zeros(1, 3);
        let grad = nested_gradient(&g, &l, &riccati(&g, &l)).unwrap();
        assert!(grad.norm() > 1e-4);
        let h = 1e-5;
        for j in 0..3 {
            let mut plus = l.clone();
            plus[(0, j)] += h;
            let mut minus = l.clone();
            minus[(0, j)] -= h;
            let fd = (nested_cost(&g, &plus) - nested_cost(&g, &minus)) / (2.0 * h);
            let err = (fd - grad[(0, j)]).abs();
            assert!(
                err <= 1e-4 * grad[(0, j)].abs().max(1e-3),
                "entry {j}: fd {fd} vs {}",
                grad[(0, j)]
            );
        }
    }

    #[test]
    fn nested_gradient_scalar_closed_form() {
        // a = 0.5, b = 1, c = 0.5, q = 1, ru = 1, rv = 2, l = 0.2.
        let g = scalar_game(1.0, 2.0);
        let l = Mat::from_element(1, 1, 0.2);
        let inner = riccati(&g, &l);
        let (a_l, q_l): (f64, f64) = (0.5 - 0.5 * 0.2, 1.0 - 2.0 * 0.04);
        // p² + p(1 - q̃ - ã²) - q̃ = 0.
        let bq = 1.0 - q_l - a_l * a_l;
        let p = 0.5 * (-bq + (bq * bq + 4.0 * q_l).sqrt());
        let k = p * a_l / (1.0 + p);
        let acl = 0.5 - k - 0.5 * 0.2;
        let sigma = 1.0 / (1.0 - acl * acl);
        let f = (-2.0 + 0.25 * p) * 0.2 - 0.5 * p * (0.5 - k);
        let grad = nested_gradient(&g, &l, &inner).unwrap();
        assert!((grad[(0, 0)] - 2.0 * f * sigma).abs() < 1e-10);
    }

    #[test]
    fn nash_is_a_fixed_point_of_every_variant() {
        let g = case1();
        let sol = solve_gare_default(&g).unwrap();
        let omega = OmegaSet::default_for(&g, Some(&sol)).unwrap();
        let inner = riccati(&g, &sol.l_star);
        for variant in [
            OuterVariant::NestedGradient,
            OuterVariant::NaturalNestedGradient,
            OuterVariant::GaussNewtonNestedGradient,
        ] {
            let cfg = OuterConfig::new(variant).with_projection(Projection::WhitenedSvClip);
            let step = outer_step(&g, &sol.l_star, &inner, &cfg, &omega).unwrap();
            assert!(step.mapping.norm() < 1e-6, "{variant:?}");
            assert!(!step.projected);
        }
        assert!(nested_gradient(&g, &sol.l_star, &inner).unwrap().norm() < 1e-6);
    }

    #[test]
    fn natural_direction_identity() {
        let g = case1();
        let l = Mat::from_row_slice(1, 3, &[0.01, -0.02, 0.03]);
        let inner = riccati(&g, &l);
        let ev = policy::evaluate_gains(&g, &inner.k, &l).unwrap();
        let sigma_inv = linalg::inverse(ev.sigma.as_mat(), "Σ").unwrap();
        let lhs = &ev.grad_l * sigma_inv;
        assert!((&lhs - &ev.f * 2.0).norm() <= 1e-9 * (1.0 + ev.f.norm()));

        let omega = OmegaSet::default_for(&g, None).unwrap();
        let cfg = OuterConfig::new(OuterVariant::NaturalNestedGradient);
        let step = outer_step(&g, &l, &inner, &cfg, &omega).unwrap();
        assert!((&step.next - &l - &ev.f * (2.0 * 0.05)).norm() < 1e-15);
        assert!((&step.mapping - &ev.f).norm() < 1e-12);
    }

    #[test]
    fn gauss_newton_step_raises_cost() {
        let g = case1();
        let l = Mat::zeros(1, 3);
        let omega = OmegaSet::default_for(&g, None).unwrap();
        let cfg = OuterConfig::new(OuterVariant::GaussNewtonNestedGradient).with_stepsize(0.25);
        let step = outer_step(&g, &l, &riccati(&g, &l), &cfg, &omega).unwrap();
        assert!(nested_cost(&g, &step.next) > nested_cost(&g, &l));
    }

    #[test]
    fn projection_examples() {
        let s = LqGame::new(
            Mat::from_element(1, 1, 0.5),
            Mat::from_element(1, 1, 1.0),
            Mat::from_element(1, 1, 0.5),
            SymMat::identity(1),
            SymMat::identity(1),
            SymMat::identity(1),
            SymMat::identity(1),
        )
        .unwrap();
        let omega = OmegaSet::new(&s, 0.19).unwrap();
        let p = project_omega(&Mat::from_element(1, 1, 2.0), &omega, &s);
        assert!((p[(0, 0)] - 0.9).abs() < 1e-12);
        let n = project_omega(&Mat::from_element(1, 1, -2.0), &omega, &s);
        assert!((n[(0, 0)] + 0.9).abs() < 1e-12);

        let g = case1();
        let zero = Mat::zeros(1, 3);
        let omega = OmegaSet::new(&g, 0.4).unwrap();
        assert_eq!(project_omega(&zero, &omega, &g), zero);
        let sol = solve_gare_default(&g).unwrap();
        assert_eq!(project_omega(&sol.l_star, &omega, &g), sol.l_star);
        assert!(omega.admits(&g, &sol).unwrap());
    }

    #[test]
    fn default_zeta_rules() {
        let g = case1();
        let sol = solve_gare_default(&g).unwrap();
        let with = OmegaSet::default_for(&g, Some(&sol)).unwrap();
        assert!((with.zeta - 0.5 * 0.8739).abs() < 1e-3);
        let without = OmegaSet::default_for(&g, None).unwrap();
        assert!((without.zeta - 0.5).abs() < 1e-12);
        assert!(OmegaSet::new(&g, 0.0).is_err());
        assert!(OmegaSet::new(&g, 1.5).is_err());
    }

    #[test]
    fn config_validation() {
        let g = case1();
        let omega = OmegaSet::default_for(&g, None).unwrap();
        let mut cfg = OuterConfig::new(OuterVariant::NestedGradient);
        cfg.stepsize = Stepsize::Adaptive;
        let l = Mat::zeros(1, 3);
        assert!(matches!(
            solve_nested(&g, &l, &cfg, &omega).unwrap_err().error,
            Error::Config(_)
        ));
        let cfg = OuterConfig::new(OuterVariant::NestedGradient).with_stepsize(-1.0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn starting_at_nash_terminates_immediately() {
        let g = case1();
        let sol = solve_gare_default(&g).unwrap();
        let omega = OmegaSet::default_for(&g, Some(&sol)).unwrap();
        let cfg = OuterConfig::new(OuterVariant::GaussNewtonNestedGradient).with_tol(1e-6);
        let (pi, trace) = solve_nested(&g, &sol.l_star, &cfg, &omega).unwrap();
        assert_eq!(trace.len(), 1);
        assert!((&pi.k - &sol.k_star).norm() < 1e-6);
    }

    #[test]
    fn gauss_newton_nested_converges_on_case1() {
        let g = case1();
        let sol = solve_gare_default(&g).unwrap();
        let omega = OmegaSet::default_for(&g, Some(&sol)).unwrap();
        let cfg = OuterConfig::new(OuterVariant::GaussNewtonNestedGradient).with_projection(Projection::WhitenedSvClip);
        let (pi, trace) = solve_nested(&g, &Mat::zeros(1, 3), &cfg, &omega).unwrap();
        assert!((trace.last().unwrap().cost - sol.value).abs() < 1e-5);
        assert!((&pi.l - &sol.l_star).norm() < 1e-3);
        assert!((&pi.k - &sol.k_star).norm() < 1e-3);
        assert!(trace.monotone_cost());
        assert!(trace.records.iter().all(|r| r.rho < 1.0));
        let rep = policy::check_stationary(&g, &pi, 1e-6).unwrap();
        assert!(rep.stationary, "{rep:?}");
    }

    #[test]
    fn iteration_cap_keeps_trace() {
        let g = case1();
        let omega = OmegaSet::default_for(&g, None).unwrap();
        let cfg = OuterConfig::new(OuterVariant::NestedGradient).with_max_iter(3);
        let err = solve_nested(&g, &Mat::zeros(1, 3), &cfg, &omega).unwrap_err();
        assert!(matches!(err.error, Error::NonConvergence { .. }));
        assert_eq!(err.trace.len(), 4);
    }

    fn spherical_game(rv: f64, q: f64) -> LqGame {
        LqGame::new(
            Mat::identity(2, 2) * 0.3,
            Mat::from_row_slice(2, 1, &[1.0, 0.0]),
            Mat::from_row_slice(2, 2, &[0.0, 0.1, 0.1, 0.0]),
            SymMat::scaled_identity(2, q),
            SymMat::identity(1),
            SymMat::scaled_identity(2, rv),
            SymMat::identity(2),
        )
        .unwrap()
    }

    proptest! {
        #[test]
        fn projection_is_feasible_and_idempotent(entries in prop::collection::vec(-3.0f64..3.0, 3)) {
            let g = case1();
            let omega = OmegaSet::new(&g, 0.3).unwrap();
            let l = Mat::from_row_slice(1, 3, &entries);
            let p = project_omega(&l, &omega, &g);
            prop_assert!(omega.slack(&g, &p) >= -1e-9);
            let pp = project_omega(&p, &omega, &g);
            prop_assert!((&pp - &p).norm() <= 1e-12);
        }

        #[test]
        fn projection_is_firmly_nonexpansive(
            a in prop::collection::vec(-4.0f64..4.0, 4),
            b in prop::collection::vec(-4.0f64..4.0, 4),
        ) {
            let g = spherical_game(2.0, 1.5);
            let omega = OmegaSet::new(&g, 0.5).unwrap();
            let l1 = Mat::from_row_slice(2, 2, &a);
            let l2 = Mat::from_row_slice(2, 2, &b);
            let p1 = project_omega(&l1, &omega, &g);
            let p2 = project_omega(&l2, &omega, &g);
            let dp = &p1 - &p2;
            let lhs = ((&l1 - &l2) * dp.transpose()).trace();
            let rhs = (&dp * dp.transpose()).trace();
            prop_assert!(lhs >= rhs - 1e-10, "{lhs} < {rhs}");
        }
    }
}
