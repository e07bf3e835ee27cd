//! Comparison methods without nesting: alternating gradient (a fixed number
//! of minimizer updates per maximizer update) and simultaneous
//! gradient descent-ascent. Neither projects; stability is checked after
//! every sub-step instead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::LqGame;
use crate::inner_loop::{self, InnerConfig, InnerMethod, Stepsize};
use crate::linalg::{self, Mat};
use crate::outer_loop::{record_for, RunError};
use crate::policy::{self, PolicyEval, PolicyPair};
use crate::trace::OuterTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    AlternatingGradient,
    GradientDescentAscent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    PolicyGradient,
    NaturalPolicyGradient,
    GaussNewton,
}

impl Flavor {
    fn inner_method(self) -> InnerMethod {
        match self {
            Flavor::PolicyGradient => InnerMethod::PolicyGradient,
            Flavor::NaturalPolicyGradient => InnerMethod::NaturalPolicyGradient,
            Flavor::GaussNewton => InnerMethod::GaussNewton,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub family: Family,
    pub flavor: Flavor,
    /// Maximizer stepsize η.
    pub stepsize: f64,
    /// Minimizer stepsize α; `Adaptive` follows the inner-loop rules.
    pub k_stepsize: Stepsize,
    /// Minimizer updates per maximizer update (alternating family only).
    pub inner_iters: usize,
    /// When set, the alternating family stops its minimizer updates early
    /// once `‖∇_K C‖_F` reaches this value.
    pub inner_tol: Option<f64>,
    pub max_outer: usize,
    /// Stop once both gradient norms are at most `tol`.
    pub tol: f64,
}

impl BaselineConfig {
    /// Defaults: η = 0.1 / 0.05 / 0.5 for PG / natural PG / Gauss-Newton,
    /// α per the inner-loop defaults, five minimizer updates per round.
    pub fn new(family: Family, flavor: Flavor) -> Self {
        let stepsize = match flavor {
            Flavor::PolicyGradient => 0.1,
            Flavor::NaturalPolicyGradient => 0.05,
            Flavor::GaussNewton => 0.5,
        };
        BaselineConfig {
            family,
            flavor,
            stepsize,
            k_stepsize: InnerConfig::new(flavor.inner_method()).stepsize,
            inner_iters: 5,
            inner_tol: None,
            max_outer: 100_000,
            tol: 1e-8,
        }
    }

    pub fn with_stepsize(mut self, eta: f64) -> Self {
        self.stepsize = eta;
        self
    }

    pub fn with_k_stepsize(mut self, alpha: f64) -> Self {
        self.k_stepsize = Stepsize::Fixed(alpha);
        self
    }

    pub fn with_inner_iters(mut self, iters: usize) -> Self {
        self.inner_iters = iters;
        self
    }

    pub fn with_inner_tol(mut self, tol: f64) -> Self {
        self.inner_tol = Some(tol);
        self
    }

    pub fn with_max_outer(mut self, max_outer: usize) -> Self {
        self.max_outer = max_outer;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stepsize > 0.0) || !self.stepsize.is_finite() {
            return Err(Error::Config(format!(
                "stepsize must be positive, got {}",
                self.stepsize
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tolerance must be positive, got {}", self.tol)));
        }
        if self.family == Family::AlternatingGradient && self.inner_iters == 0 {
            return Err(Error::Config(
                "alternating gradient needs at least one inner iteration".into(),
            ));
        }
        if matches!(self.inner_tol, Some(t) if !(t > 0.0)) {
            return Err(Error::Config("inner tolerance must be positive".into()));
        }
        self.k_config().validate()
    }

    fn k_config(&self) -> InnerConfig {
        let mut cfg = InnerConfig::new(self.flavor.inner_method());
        cfg.stepsize = self.k_stepsize;
        cfg
    }
}

/// Maximizer ascent step of the given flavor: `L + η∇_L C`, `L + 2ηF`, or
/// `L - 2η(-Rᵛ + CᵀPC)⁻¹F`.
pub fn l_step(game: &LqGame, l: &Mat, ev: &PolicyEval, flavor: Flavor, eta: f64) -> Result<Mat> {
    match flavor {
        Flavor::PolicyGradient => Ok(l + &ev.grad_l * eta),
        Flavor::NaturalPolicyGradient => Ok(l + &ev.f * (2.0 * eta)),
        Flavor::GaussNewton => {
            let block_inv = linalg::inverse(&ev.rv_block(game), "-Rv + CᵀPC")?;
            Ok(l - block_inv * &ev.f * (2.0 * eta))
        }
    }
}

fn evaluate_at(game: &LqGame, k: &Mat, l: &Mat, location: impl FnOnce() -> String) -> Result<PolicyEval> {
    match policy::evaluate_gains(game, k, l) {
        Err(Error::Unstable { rho }) => Err(Error::StabilityLost {
            location: location(),
            rho,
        }),
        other => other,
    }
}

pub fn run_baseline(
    game: &LqGame,
    pi0: &PolicyPair,
    cfg: &BaselineConfig,
) -> std::result::Result<(PolicyPair, OuterTrace), RunError> {
    match cfg.family {
        Family::AlternatingGradient => run_ag(game, pi0, cfg),
        Family::GradientDescentAscent => run_gda(game, pi0, cfg),
    }
}

/// Alternating gradient: `inner_iters` minimizer updates, then one maximizer
/// update from the resulting pair.
pub fn run_ag(
    game: &LqGame,
    pi0: &PolicyPair,
    cfg: &BaselineConfig,
) -> std::result::Result<(PolicyPair, OuterTrace), RunError> {
    let mut trace = OuterTrace::new(game.sigma0().min_eigenvalue());
    let k_cfg = cfg.k_config();
    let result = (|| -> Result<PolicyPair> {
        cfg.validate()?;
        game.check_gains(&pi0.k, &pi0.l)?;
        let (mut k, mut l) = (pi0.k.clone(), pi0.l.clone());
        for t in 0..=cfg.max_outer {
            let mut ev = evaluate_at(game, &k, &l, || format!("alternating round {t}, start"))?;
            let mut sub = 0;
            while sub < cfg.inner_iters && cfg.inner_tol.is_none_or(|tol| ev.grad_k.norm() > tol) {
                k = inner_loop::inner_step_from_eval(game, &k, &ev, &k_cfg)?;
                sub += 1;
                ev = evaluate_at(game, &k, &l, || format!("alternating round {t}, minimizer step {sub}"))?;
            }
            let next_l = l_step(game, &l, &ev, cfg.flavor, cfg.stepsize)?;
            let map_norm = (&next_l - &l).norm() / (2.0 * cfg.stepsize);
            trace.records.push(record_for(t, game, &l, &k, &ev, map_norm, false)?);
            if ev.grad_k.norm() <= cfg.tol && ev.grad_l.norm() <= cfg.tol {
                return Ok(PolicyPair::new(k, l));
            }
            if t == cfg.max_outer {
                break;
            }
            l = next_l;
        }
        let last = trace.last().expect("at least one round recorded");
        Err(Error::NonConvergence {
            what: "alternating gradient",
            iterations: cfg.max_outer,
            residual: last.grad_norm.max(last.grad_k_norm),
        })
    })();
    result
        .map(|pi| (pi, trace.clone()))
        .map_err(|error| RunError { error, trace })
}

/// Simultaneous descent-ascent: both players step from the same evaluation.
pub fn run_gda(
    game: &LqGame,
    pi0: &PolicyPair,
    cfg: &BaselineConfig,
) -> std::result::Result<(PolicyPair, OuterTrace), RunError> {
    let mut trace = OuterTrace::new(game.sigma0().min_eigenvalue());
    let k_cfg = cfg.k_config();
    let result = (|| -> Result<PolicyPair> {
        cfg.validate()?;
        game.check_gains(&pi0.k, &pi0.l)?;
        let (mut k, mut l) = (pi0.k.clone(), pi0.l.clone());
        for t in 0..=cfg.max_outer {
            let ev = evaluate_at(game, &k, &l, || format!("descent-ascent iteration {t}"))?;
            let next_k = inner_loop::inner_step_from_eval(game, &k, &ev, &k_cfg)?;
            let next_l = l_step(game, &l, &ev, cfg.flavor, cfg.stepsize)?;
            let map_norm = (&next_l - &l).norm() / (2.0 * cfg.stepsize);
            trace.records.push(record_for(t, game, &l, &k, &ev, map_norm, false)?);
            if ev.grad_k.norm() <= cfg.tol && ev.grad_l.norm() <= cfg.tol {
                return Ok(PolicyPair::new(k, l));
            }
            if t == cfg.max_outer {
                break;
            }
            k = next_k;
            l = next_l;
        }
        let last = trace.last().expect("at least one iteration recorded");
        Err(Error::NonConvergence {
            what: "gradient descent-ascent",
            iterations: cfg.max_outer,
            residual: last.grad_norm.max(last.grad_k_norm),
        })
    })();
    result
        .map(|pi| (pi, trace.clone()))
        .map_err(|error| RunError { error, trace })
}
