//! Exact evaluation of a linear feedback pair `(K, L)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::LqGame;
use crate::linalg::{self, Mat, SymMat};

/// Closed loops with spectral radius at or above `1 - STABILITY_MARGIN` are
/// treated as unstable.
pub const STABILITY_MARGIN: f64 = 1e-9;

/// Step used by the central finite-difference gradient oracle in tests.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyPair {
    /// Minimizer gain, `u = -K x`.
    #[serde(with = "linalg::serde_rows")]
    pub k: Mat,
    /// Maximizer gain, `v = -L x`.
    #[serde(with = "linalg::serde_rows")]
    pub l: Mat,
}

impl PolicyPair {
    pub fn new(k: Mat, l: Mat) -> Self {
        PolicyPair { k, l }
    }

    pub fn zeros(game: &LqGame) -> Self {
        PolicyPair {
            k: Mat::zeros(game.m1(), game.d()),
            l: Mat::zeros(game.m2(), game.d()),
        }
    }
}

/// Everything derived from one stabilizing pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEval {
    /// Value matrix `P_{K,L}`.
    pub p: SymMat,
    /// State correlation `Σ_{K,L}`.
    pub sigma: SymMat,
    pub cost: f64,
    #[serde(with = "linalg::serde_rows")]
    pub grad_k: Mat,
    #[serde(with = "linalg::serde_rows")]
    pub grad_l: Mat,
    /// `(Rᵘ + BᵀPB)K - BᵀP(A - CL)`, so that `grad_k = 2 E Σ`.
    #[serde(with = "linalg::serde_rows")]
    pub e: Mat,
    /// `(-Rᵛ + CᵀPC)L - CᵀP(A - BK)`, so that `grad_l = 2 F Σ`.
    #[serde(with = "linalg::serde_rows")]
    pub f: Mat,
    pub rho: f64,
}

impl PolicyEval {
    /// `Rᵘ + BᵀPB`.
    pub fn ru_block(&self, game: &LqGame) -> Mat {
        game.ru().as_mat() + game.b().transpose() * self.p.as_mat() * game.b()
    }

    /// `-Rᵛ + CᵀPC`.
    pub fn rv_block(&self, game: &LqGame) -> Mat {
        game.c().transpose() * self.p.as_mat() * game.c() - game.rv().as_mat()
    }
}

/// Spectral radius of the closed loop, erroring unless it clears the margin.
pub fn stable_radius(game: &LqGame, k: &Mat, l: &Mat) -> Result<f64> {
    let rho = linalg::spectral_radius(&game.closed_loop(k, l)?)?;
    if rho >= 1.0 - STABILITY_MARGIN {
        return Err(Error::Unstable { rho });
    }
    Ok(rho)
}

pub fn is_stabilizing(game: &LqGame, k: &Mat, l: &Mat) -> bool {
    stable_radius(game, k, l).is_ok()
}

pub fn evaluate(game: &LqGame, pi: &PolicyPair) -> Result<PolicyEval> {
    evaluate_gains(game, &pi.k, &pi.l)
}

pub fn evaluate_gains(game: &LqGame, k: &Mat, l: &Mat) -> Result<PolicyEval> {
    let rho = stable_radius(game, k, l)?;
    let acl = game.closed_loop(k, l)?;
    let p = linalg::solve_dlyap_transpose(&acl, &game.stage_weight(k, l)?)?;
    let sigma = linalg::solve_dlyap(&acl, game.sigma0())?;
    let (a, b, c) = (game.a(), game.b(), game.c());
    let pm = p.as_mat();
    let e = (game.ru().as_mat() + b.transpose() * pm * b) * k - b.transpose() * pm * (a - c * l);
    let f = (c.transpose() * pm * c - game.rv().as_mat()) * l - c.transpose() * pm * (a - b * k);
    let grad_k = &e * sigma.as_mat() * 2.0;
    let grad_l = &f * sigma.as_mat() * 2.0;
    let cost = (pm * game.sigma0().as_mat()).trace();
    Ok(PolicyEval {
        p,
        sigma,
        cost,
        grad_k,
        grad_l,
        e,
        f,
        rho,
    })
}

/// `E Σ_{t<T} c_t` for `x_0` with covariance `Σ0`; defined for unstable pairs too.
pub fn cost_finite_horizon(game: &LqGame, pi: &PolicyPair, horizon: usize) -> Result<f64> {
    let acl = game.closed_loop(&pi.k, &pi.l)?;
    let w = game.stage_weight(&pi.k, &pi.l)?;
    let mut corr = game.sigma0().as_mat().clone();
    let mut total = 0.0;
    for _ in 0..horizon {
        total += (w.as_mat() * &corr).trace();
        corr = &acl * corr * acl.transpose();
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub stationary: bool,
    pub grad_k_norm: f64,
    pub grad_l_norm: f64,
    /// `λ_min(P_{K,L})`; stationarity needs it positive.
    pub p_min_eig: f64,
    /// `λ_min(Σ_{K,L})`.
    pub sigma_min_eig: f64,
    /// `σ_min(-Rᵛ + CᵀPC)`.
    pub rv_block_sigma_min: f64,
}

/// Full-rank and invertibility threshold used by [`check_stationary`].
pub const RANK_TOL: f64 = 1e-12;

pub fn check_stationary(game: &LqGame, pi: &PolicyPair, tol: f64) -> Result<StationarityReport> {
    let ev = evaluate(game, pi)?;
    let grad_k_norm = ev.grad_k.norm();
    let grad_l_norm = ev.grad_l.norm();
    let p_min_eig = ev.p.min_eigenvalue();
    let sigma_min_eig = ev.sigma.min_eigenvalue();
    let rv_block_sigma_min = linalg::sigma_min(&ev.rv_block(game));
    let stationary = grad_k_norm <= tol
        && grad_l_norm <= tol
        && p_min_eig > 0.0
        && sigma_min_eig >= RANK_TOL
        && rv_block_sigma_min >= RANK_TOL;
    Ok(StationarityReport {
        stationary,
        grad_k_norm,
        grad_l_norm,
        p_min_eig,
        sigma_min_eig,
        rv_block_sigma_min,
    })
}
