//! Best response of the minimizer to a fixed maximizer gain `L`.
//!
//! For fixed `L` the inner problem is an LQR with state weight
//! `Q̃_L = Q - LᵀRᵛL` and dynamics `Ã_L = A - CL`. Its solution `K(L)` is
//! computed either from the inner Riccati equation or by one of three
//! gradient iterations (plain, natural, Gauss-Newton).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::LqGame;
use crate::linalg::{self, Mat, SymMat};
use crate::policy::{self, PolicyEval};

pub const RICCATI_TOL: f64 = 1e-12;
pub const RICCATI_MAX_ITER: usize = 100_000;
pub const DEFAULT_PG_STEP: f64 = 1e-3;
pub const DEFAULT_GN_STEP: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerMethod {
    PolicyGradient,
    NaturalPolicyGradient,
    GaussNewton,
    Riccati,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stepsize {
    Fixed(f64),
    /// Recomputed every step from the current iterate.
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerConfig {
    pub method: InnerMethod,
    pub stepsize: Stepsize,
    /// Stop once `‖∇_K C‖_F ≤ tol`.
    pub tol: f64,
    pub max_iter: usize,
}

impl InnerConfig {
    /// Defaults: PG α = 1e-3, natural PG adaptive `1/(2‖Rᵘ+BᵀPB‖)`,
    /// Gauss-Newton α = 1/2, Riccati tolerance 1e-12.
    pub fn new(method: InnerMethod) -> Self {
        let (stepsize, tol) = match method {
            InnerMethod::PolicyGradient => (Stepsize::Fixed(DEFAULT_PG_STEP), 1e-10),
            InnerMethod::NaturalPolicyGradient => (Stepsize::Adaptive, 1e-10),
            InnerMethod::GaussNewton => (Stepsize::Fixed(DEFAULT_GN_STEP), 1e-10),
            InnerMethod::Riccati => (Stepsize::Adaptive, RICCATI_TOL),
        };
        InnerConfig {
            method,
            stepsize,
            tol,
            max_iter: RICCATI_MAX_ITER,
        }
    }

    pub fn with_stepsize(mut self, alpha: f64) -> Self {
        self.stepsize = Stepsize::Fixed(alpha);
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

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!(
                "inner tolerance must be positive, got {}",
                self.tol
            )));
        }
        if let Stepsize::Fixed(alpha) = self.stepsize {
            if !(alpha > 0.0) {
                return Err(Error::Config(format!("inner stepsize must be positive, got {alpha}")));
            }
        }
        Ok(())
    }
}

impl Default for InnerConfig {
    fn default() -> Self {
        InnerConfig::new(InnerMethod::GaussNewton)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerRecord {
    pub iter: usize,
    pub cost: f64,
    pub grad_norm: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerResult {
    #[serde(with = "linalg::serde_rows")]
    pub k: Mat,
    pub p: SymMat,
    pub iterations: usize,
    pub final_grad_norm: f64,
    pub trace: Vec<InnerRecord>,
}

impl InnerResult {
    /// Trace as CSV with header `iter,cost,grad_norm,rho`.
    pub fn trace_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.trace {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// `(Rᵘ + BᵀPB)⁻¹ BᵀP (A - CL)`.
pub fn best_response_gain(game: &LqGame, p: &Mat, l: &Mat) -> Result<Mat> {
    let b = game.b();
    let a_l = game.a() - game.c() * l;
    let gram = game.ru().as_mat() + b.transpose() * p * b;
    Ok(linalg::inverse(&gram, "Ru + BᵀPB")? * b.transpose() * p * a_l)
}

/// Solves the inner Riccati equation
/// `P = Q̃_L + Ã_LᵀPÃ_L - Ã_LᵀPB(Rᵘ + BᵀPB)⁻¹BᵀPÃ_L` by fixed-point iteration
/// from `P₀ = Q̃_L`, then forms `K(L)`.
pub fn solve_inner_riccati(game: &LqGame, l: &Mat, tol: f64, max_iter: usize) -> Result<InnerResult> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("Riccati tolerance must be positive, got {tol}")));
    }
    game.check_gains(&Mat::zeros(game.m1(), game.d()), l)?;
    let q_tilde = game.q_tilde(l)?;
    let min_eig = q_tilde.min_eigenvalue();
    if min_eig <= 0.0 {
        return Err(Error::Domain(format!(
            "Q - LᵀRᵛL must be positive definite (smallest eigenvalue {min_eig:.3e})"
        )));
    }
    let b = game.b();
    let a_l = game.a() - game.c() * l;
    let mut p = q_tilde.as_mat().clone();
    let mut residual = f64::INFINITY;
    for iter in 0..max_iter {
        let pa = &p * &a_l;
        let bpa = b.transpose() * &pa;
        let gram = game.ru().as_mat() + b.transpose() * &p * b;
        let gain = linalg::inverse(&gram, "Ru + BᵀPB")? * &bpa;
        let next = q_tilde.as_mat() + a_l.transpose() * &pa - bpa.transpose() * gain;
        let next = (&next + next.transpose()) * 0.5;
        residual = (&next - &p).norm();
        p = next;
        if residual <= tol {
            let k = best_response_gain(game, &p, l)?;
            let ev = policy::evaluate_gains(game, &k, l)?;
            let grad_norm = ev.grad_k.norm();
            return Ok(InnerResult {
                k,
                p: SymMat::new(p)?,
                iterations: iter + 1,
                final_grad_norm: grad_norm,
                trace: vec![InnerRecord {
                    iter: iter + 1,
                    cost: ev.cost,
                    grad_norm,
                    rho: ev.rho,
                }],
            });
        }
        if !residual.is_finite() {
            break;
        }
    }
    Err(Error::NonConvergence {
        what: "inner Riccati iteration",
        iterations: max_iter,
        residual,
    })
}

/// Stepsize actually used for a gradient step at `ev`.
pub fn resolve_stepsize(game: &LqGame, ev: &PolicyEval, cfg: &InnerConfig) -> Result<f64> {
    match (cfg.stepsize, cfg.method) {
        (Stepsize::Fixed(alpha), _) => Ok(alpha),
        (Stepsize::Adaptive, InnerMethod::NaturalPolicyGradient) => Ok(0.5 / linalg::spectral_norm(&ev.ru_block(game))),
        (Stepsize::Adaptive, InnerMethod::GaussNewton) => Ok(DEFAULT_GN_STEP),
        (Stepsize::Adaptive, InnerMethod::PolicyGradient) => Ok(DEFAULT_PG_STEP),
        (Stepsize::Adaptive, InnerMethod::Riccati) => {
            Err(Error::Contract("the Riccati method has no gradient step".into()))
        }
    }
}

/// One gradient update of `K` given the evaluation at `(K, L)`.
pub fn inner_step_from_eval(game: &LqGame, k: &Mat, ev: &PolicyEval, cfg: &InnerConfig) -> Result<Mat> {
    let alpha = resolve_stepsize(game, ev, cfg)?;
    match cfg.method {
        InnerMethod::PolicyGradient => Ok(k - &ev.grad_k * alpha),
        InnerMethod::NaturalPolicyGradient => Ok(k - &ev.e * (2.0 * alpha)),
        InnerMethod::GaussNewton => {
            let gram_inv = linalg::inverse(&ev.ru_block(game), "Ru + BᵀPB")?;
            Ok(k - gram_inv * &ev.e * (2.0 * alpha))
        }
        InnerMethod::Riccati => Err(Error::Contract("the Riccati method has no gradient step".into())),
    }
}

/// `K' = K - α∇_K C` (PG), `K - 2αE` (natural PG) or
/// `K - 2α(Rᵘ + BᵀPB)⁻¹E` (Gauss-Newton).
pub fn inner_step(game: &LqGame, k: &Mat, l: &Mat, cfg: &InnerConfig) -> Result<Mat> {
    cfg.validate()?;
    let ev = policy::evaluate_gains(game, k, l)?;
    debug_assert!(ev.sigma.min_eigenvalue() > 0.0, "Σ_K,L is singular although Σ0 ≻ 0");
    inner_step_from_eval(game, k, &ev, cfg)
}

/// Iterates [`inner_step`] from `k0` until `‖∇_K C‖_F ≤ tol`.
pub fn solve_inner(game: &LqGame, l: &Mat, k0: &Mat, cfg: &InnerConfig) -> Result<InnerResult> {
    cfg.validate()?;
    if cfg.method == InnerMethod::Riccati {
        return solve_inner_riccati(game, l, cfg.tol, cfg.max_iter);
    }
    let mut k = k0.clone();
    let mut trace = Vec::new();
    for iter in 0..=cfg.max_iter {
        let ev = match policy::evaluate_gains(game, &k, l) {
            Ok(ev) => ev,
            Err(Error::Unstable { rho }) => {
                return Err(Error::StabilityLost {
                    location: format!("inner iteration {iter}"),
                    rho,
                })
            }
            Err(e) => return Err(e),
        };
        let grad_norm = ev.grad_k.norm();
        trace.push(InnerRecord {
            iter,
            cost: ev.cost,
            grad_norm,
            rho: ev.rho,
        });
        if grad_norm <= cfg.tol {
            return Ok(InnerResult {
                k,
                p: ev.p,
                iterations: iter,
                final_grad_norm: grad_norm,
                trace,
            });
        }
        if iter == cfg.max_iter {
            return Err(Error::NonConvergence {
                what: "inner gradient iteration",
                iterations: iter,
                residual: grad_norm,
            });
        }
        k = inner_step_from_eval(game, &k, &ev, cfg)?;
    }
    unreachable!("loop returns on its last iteration")
}
