//! Sampled-data versions of the nested methods.
//!
//! Gradients come from one-point zeroth-order estimates: perturb the gain on
//! a Frobenius sphere, roll the perturbed closed loop out from a random
//! initial state, and weight the perturbation by the observed cost. The
//! algorithms are written against the [`InnerOracle`] / [`OuterOracle`] and
//! [`InnerSolve`] traits so that exact oracles can be substituted.
//!
//! Randomness is counter based: every trajectory owns a ChaCha stream keyed
//! by `(seed, call path, trajectory index)`, and reductions run in trajectory
//! order, so results do not depend on the thread count. `LQGAME_THREADS`
//! caps the rayon pool used for rollouts.

use std::sync::OnceLock;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::LqGame;
use crate::inner_loop::InnerConfig;
use crate::linalg::{self, Mat, SymMat};
use crate::outer_loop::{self, OmegaSet, OuterVariant, Projection, RunError};
use crate::policy::{self, STABILITY_MARGIN};
use crate::trace::{OuterTrace, TraceRecord};

/// Trajectories handled per parallel batch.
const CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    /// `x0 ~ N(0, Σ0)`.
    #[default]
    Gaussian,
    /// Independent uniform coordinates with variances `diag(Σ0)`; needs a
    /// diagonal `Σ0`.
    UniformCube,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Number of trajectories.
    pub m: usize,
    pub rollout_len: usize,
    /// Frobenius radius of the smoothing perturbation.
    pub radius: f64,
    pub seed: u64,
    #[serde(default)]
    pub initial_state: InitialState,
}

impl EstimatorConfig {
    pub fn new(m: usize, rollout_len: usize, radius: f64, seed: u64) -> Self {
        EstimatorConfig {
            m,
            rollout_len,
            radius,
            seed,
            initial_state: InitialState::Gaussian,
        }
    }

    pub fn with_initial_state(mut self, initial_state: InitialState) -> Self {
        self.initial_state = initial_state;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.rollout_len == 0 {
            return Err(Error::Config(
                "trajectory count and rollout length must be at least 1".into(),
            ));
        }
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(Error::Config(format!(
                "smoothing radius must be positive, got {}",
                self.radius
            )));
        }
        Ok(())
    }
}

/// Smallest rollout length with `rho^R ≤ tail`.
pub fn rollout_len_for(rho: f64, tail: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&rho) || !(tail > 0.0 && tail < 1.0) {
        return Err(Error::Domain(format!(
            "need 0 ≤ rho < 1 and 0 < tail < 1, got {rho}, {tail}"
        )));
    }
    if rho == 0.0 {
        return Ok(1);
    }
    Ok((tail.ln() / rho.ln()).ceil().max(1.0) as usize)
}

/// Position in the tree of random calls; each node owns its own streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stream {
    seed: u64,
    path: u64,
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Stream {
    pub fn root(seed: u64) -> Self {
        Stream { seed, path: 0 }
    }

    pub fn child(&self, index: u64) -> Self {
        let path = mix64(self.path.wrapping_add(0x9e37_79b9_7f4a_7c15) ^ mix64(index.wrapping_add(1)));
        Stream { seed: self.seed, path }
    }

    /// Generator for trajectory `index` of this call.
    pub fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.path.to_le_bytes());
        key[16..24].copy_from_slice(&index.to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }
}

/// Uniform draw from `{U : ‖U‖_F = radius}` by normalizing a Gaussian matrix.
pub fn sample_sphere<R: Rng + ?Sized>(rows: usize, cols: usize, radius: f64, rng: &mut R) -> Mat {
    loop {
        let g = Mat::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = g.norm();
        if norm > 0.0 {
            return g * (radius / norm);
        }
    }
}

fn sample_x0<R: Rng + ?Sized>(factor: &X0Factor, rng: &mut R, out: &mut [f64]) {
    match factor {
        X0Factor::Gaussian(chol) => {
            let d = out.len();
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            for (i, o) in out.iter_mut().enumerate() {
                *o = (0..=i).map(|j| chol[(i, j)] * z[j]).sum();
            }
        }
        X0Factor::Cube(half_widths) => {
            for (o, &a) in out.iter_mut().zip(half_widths) {
                *o = rng.sample(Uniform::new_inclusive(-a, a).expect("finite half width"));
            }
        }
    }
}

enum X0Factor {
    Gaussian(Mat),
    Cube(Vec<f64>),
}

impl X0Factor {
    fn new(game: &LqGame, kind: InitialState) -> Result<Self> {
        let s0 = game.sigma0().as_mat();
        match kind {
            InitialState::Gaussian => {
                let chol = s0.clone().cholesky().ok_or(Error::Indefinite {
                    what: "Sigma0",
                    min_eig: game.sigma0().min_eigenvalue(),
                })?;
                Ok(X0Factor::Gaussian(chol.l()))
            }
            InitialState::UniformCube => {
                let d = s0.nrows();
                let off_diag = (0..d).any(|i| (0..d).any(|j| i != j && s0[(i, j)] != 0.0));
                if off_diag {
                    return Err(Error::Config(
                        "uniform-cube initial states need a diagonal Sigma0".into(),
                    ));
                }
                Ok(X0Factor::Cube((0..d).map(|i| (3.0 * s0[(i, i)]).sqrt()).collect()))
            }
        }
    }
}

/// Rolls `x ← Acl x` for `steps` states starting at `x` (inclusive) and adds
/// every `x xᵀ` into `corr` (row-major, `d × d`).
fn rollout(acl: &[f64], x: &mut [f64], next: &mut [f64], steps: usize, corr: &mut [f64]) {
    match x.len() {
        1 => rollout_fixed::<1>(acl, x, steps, corr),
        2 => rollout_fixed::<2>(acl, x, steps, corr),
        3 => rollout_fixed::<3>(acl, x, steps, corr),
        4 => rollout_fixed::<4>(acl, x, steps, corr),
        _ => rollout_dyn(acl, x, next, steps, corr),
    }
}

/// Same as [`rollout_dyn`] with the dimension known at compile time, so the
/// inner loops unroll. The summation order is identical.
fn rollout_fixed<const N: usize>(acl: &[f64], x: &mut [f64], steps: usize, corr: &mut [f64]) {
    let a: [[f64; N]; N] = std::array::from_fn(|i| std::array::from_fn(|j| acl[i * N + j]));
    let mut c = [[0.0; N]; N];
    let mut v: [f64; N] = std::array::from_fn(|i| x[i]);
    for _ in 0..steps {
        for i in 0..N {
            for j in i..N {
                c[i][j] += v[i] * v[j];
            }
        }
        v = std::array::from_fn(|i| a[i].iter().zip(v.iter()).map(|(p, q)| p * q).sum());
    }
    x.copy_from_slice(&v);
    for i in 0..N {
        for j in 0..N {
            corr[i * N + j] += if j >= i { c[i][j] } else { c[j][i] };
        }
    }
}

fn rollout_dyn(acl: &[f64], x: &mut [f64], next: &mut [f64], steps: usize, corr: &mut [f64]) {
    let d = x.len();
    for _ in 0..steps {
        for i in 0..d {
            let xi = x[i];
            let row = &mut corr[i * d..(i + 1) * d];
            for j in i..d {
                row[j] += xi * x[j];
            }
        }
        for i in 0..d {
            let row = &acl[i * d..(i + 1) * d];
            next[i] = row.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        }
        x.copy_from_slice(next);
    }
    for i in 0..d {
        for j in 0..i {
            corr[i * d + j] = corr[j * d + i];
        }
    }
}

/// One simulated trajectory of the pair `(K, L)`: `Σ_t c_t` and `Σ_t x_t x_tᵀ`
/// over `t = 0, …, R-1`.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub cost: f64,
    pub corr: Mat,
}

fn simulate<R: Rng + ?Sized>(
    game: &LqGame,
    k: &Mat,
    l: &Mat,
    factor: &X0Factor,
    steps: usize,
    rng: &mut R,
) -> Result<Rollout> {
    let d = game.d();
    let acl = linalg::row_major(&game.closed_loop(k, l)?);
    let w = game.stage_weight(k, l)?;
    let mut x = vec![0.0; d];
    let mut next = vec![0.0; d];
    let mut corr = vec![0.0; d * d];
    sample_x0(factor, rng, &mut x);
    rollout(&acl, &mut x, &mut next, steps, &mut corr);
    let corr = Mat::from_row_slice(d, d, &corr);
    let cost = w.as_mat().component_mul(&corr).sum();
    Ok(Rollout { cost, corr })
}

fn check_sample(game: &LqGame, k: &Mat, l: &Mat, index: usize) -> Result<()> {
    let rho = linalg::spectral_radius(&game.closed_loop(k, l)?)?;
    if rho >= 1.0 - STABILITY_MARGIN {
        return Err(Error::Sample { index, rho });
    }
    Ok(())
}

fn thread_pool() -> Option<&'static rayon::ThreadPool> {
    static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("LQGAME_THREADS").ok()?.parse::<usize>().ok()?;
        rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build().ok()
    })
    .as_ref()
}

/// Maps `f` over `0..m` in parallel and returns the results in index order.
fn ordered_map<T, F>(m: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let run = || {
        let mut out = Vec::with_capacity(m);
        for start in (0..m).step_by(CHUNK) {
            let end = (start + CHUNK).min(m);
            let batch: Result<Vec<T>> = (start..end).into_par_iter().map(&f).collect();
            out.extend(batch?);
        }
        Ok(out)
    };
    match thread_pool() {
        Some(pool) => pool.install(run),
        None => run(),
    }
}

/// Sample statistics of the per-trajectory costs behind one estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateDiagnostics {
    pub samples: usize,
    pub cost_mean: f64,
    pub cost_variance: f64,
}

impl EstimateDiagnostics {
    fn from_costs(costs: &[f64]) -> Self {
        let n = costs.len() as f64;
        let mean = costs.iter().sum::<f64>() / n;
        let var = if costs.len() > 1 {
            costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        EstimateDiagnostics {
            samples: costs.len(),
            cost_mean: mean,
            cost_variance: var,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    #[serde(with = "linalg::serde_rows")]
    pub grad: Mat,
    pub sigma: SymMat,
    /// Natural direction `grad · Σ⁻¹` when the oracle knows it exactly.
    #[serde(skip)]
    pub natural: Option<Mat>,
    pub diagnostics: Option<EstimateDiagnostics>,
}

impl Estimate {
    pub fn natural_direction(&self) -> Result<Mat> {
        match &self.natural {
            Some(n) => Ok(n.clone()),
            None => Ok(&self.grad * linalg::inverse(self.sigma.as_mat(), "estimated Sigma")?),
        }
    }
}

fn combine(perturbations: &[Mat], rollouts: &[Rollout], radius: f64) -> Result<Estimate> {
    let m = rollouts.len();
    let (rows, cols) = perturbations[0].shape();
    let scale = (rows * cols) as f64 / (radius * radius);
    let d = rollouts[0].corr.nrows();
    let mut grad = Mat::zeros(rows, cols);
    let mut corr = Mat::zeros(d, d);
    for (u, r) in perturbations.iter().zip(rollouts) {
        grad += u * (scale * r.cost);
        corr += &r.corr;
    }
    let costs: Vec<f64> = rollouts.iter().map(|r| r.cost).collect();
    Ok(Estimate {
        grad: grad / m as f64,
        sigma: SymMat::new(corr / m as f64)?,
        natural: None,
        diagnostics: Some(EstimateDiagnostics::from_costs(&costs)),
    })
}

/// Zeroth-order estimate of `∇_K C(K, L)` and `Σ_{K,L}` from `cfg.m` rollouts.
pub fn estimate_grad_sigma(game: &LqGame, k: &Mat, l: &Mat, cfg: &EstimatorConfig) -> Result<Estimate> {
    estimate_grad_sigma_on(game, k, l, cfg, Stream::root(cfg.seed))
}

fn estimate_grad_sigma_on(game: &LqGame, k: &Mat, l: &Mat, cfg: &EstimatorConfig, stream: Stream) -> Result<Estimate> {
    cfg.validate()?;
    game.check_gains(k, l)?;
    let factor = X0Factor::new(game, cfg.initial_state)?;
    let samples = ordered_map(cfg.m, |i| {
        let mut rng = stream.rng(i as u64);
        let u = sample_sphere(k.nrows(), k.ncols(), cfg.radius, &mut rng);
        let k_hat = k + &u;
        check_sample(game, &k_hat, l, i)?;
        let r = simulate(game, &k_hat, l, &factor, cfg.rollout_len, &mut rng)?;
        Ok((u, r))
    })?;
    let (us, rs): (Vec<Mat>, Vec<Rollout>) = samples.into_iter().unzip();
    combine(&us, &rs, cfg.radius)
}

/// Source of `(∇_K C, Σ)` estimates at `(K, L)`.
pub trait InnerOracle: Sync {
    fn estimate(&self, game: &LqGame, k: &Mat, l: &Mat, stream: Stream) -> Result<Estimate>;
}

/// The sampled estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZerothOrder(pub EstimatorConfig);

impl InnerOracle for ZerothOrder {
    fn estimate(&self, game: &LqGame, k: &Mat, l: &Mat, stream: Stream) -> Result<Estimate> {
        estimate_grad_sigma_on(game, k, l, &self.0, stream)
    }
}

/// Exact gradients from the model, for checking the algorithm wiring.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Analytic;

impl InnerOracle for Analytic {
    fn estimate(&self, game: &LqGame, k: &Mat, l: &Mat, _stream: Stream) -> Result<Estimate> {
        let ev = policy::evaluate_gains(game, k, l)?;
        Ok(Estimate {
            natural: Some(&ev.e * 2.0),
            grad: ev.grad_k,
            sigma: ev.sigma,
            diagnostics: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFreeFlavor {
    PolicyGradient,
    NaturalPolicyGradient,
    /// Not estimable from samples; always rejected.
    GaussNewton,
}

/// Sampled inner loop: `steps` updates `K ← K - α ĝ` (PG) or
/// `K ← K - α ĝ Σ̂⁻¹` (natural PG) from `k0`.
pub fn inner_ng_modelfree(
    game: &LqGame,
    l: &Mat,
    k0: &Mat,
    cfg: &EstimatorConfig,
    steps: usize,
    alpha: f64,
    flavor: ModelFreeFlavor,
) -> Result<Mat> {
    inner_ng_with(
        game,
        l,
        k0,
        &ZerothOrder(*cfg),
        steps,
        alpha,
        flavor,
        Stream::root(cfg.seed),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn inner_ng_with(
    game: &LqGame,
    l: &Mat,
    k0: &Mat,
    oracle: &dyn InnerOracle,
    steps: usize,
    alpha: f64,
    flavor: ModelFreeFlavor,
    stream: Stream,
) -> Result<Mat> {
    if flavor == ModelFreeFlavor::GaussNewton {
        return Err(Error::Contract(
            "the Gauss-Newton update cannot be estimated from samples".into(),
        ));
    }
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("inner stepsize must be positive, got {alpha}")));
    }
    let mut k = k0.clone();
    for tau in 0..steps {
        let est = oracle
            .estimate(game, &k, l, stream.child(tau as u64))
            .map_err(|e| match e {
                Error::Sample { index, rho } => Error::StabilityLost {
                    location: format!("model-free inner step {tau}, sample {index}"),
                    rho,
                },
                Error::Unstable { rho } => Error::StabilityLost {
                    location: format!("model-free inner step {tau}"),
                    rho,
                },
                other => other,
            })?;
        k = match flavor {
            ModelFreeFlavor::PolicyGradient => k - &est.grad * alpha,
            _ => k - est.natural_direction()? * alpha,
        };
    }
    Ok(k)
}

/// Approximate best response `K̂(L)` starting from a warm gain.
pub trait InnerSolve: Sync {
    fn solve(&self, game: &LqGame, l: &Mat, k_warm: &Mat, stream: Stream) -> Result<Mat>;
}

/// Sampled inner loop with a fixed budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelFreeInner {
    pub estimator: EstimatorConfig,
    pub steps: usize,
    pub alpha: f64,
    pub flavor: ModelFreeFlavor,
}

impl InnerSolve for ModelFreeInner {
    fn solve(&self, game: &LqGame, l: &Mat, k_warm: &Mat, stream: Stream) -> Result<Mat> {
        inner_ng_with(
            game,
            l,
            k_warm,
            &ZerothOrder(self.estimator),
            self.steps,
            self.alpha,
            self.flavor,
            stream,
        )
    }
}

/// Exact inner solve, identical to the one inside the nested solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactInner(pub InnerConfig);

impl InnerSolve for ExactInner {
    fn solve(&self, game: &LqGame, l: &Mat, k_warm: &Mat, _stream: Stream) -> Result<Mat> {
        Ok(outer_loop::solve_inner_warm(game, l, k_warm, &self.0)?.k)
    }
}

/// Source of `(∇_L C̃, Σ)` estimates at `L`, plus the gain to warm-start the
/// next inner solve from.
pub trait OuterOracle: Sync {
    fn estimate(
        &self,
        game: &LqGame,
        l: &Mat,
        k_warm: &Mat,
        inner: &dyn InnerSolve,
        stream: Stream,
    ) -> Result<(Estimate, Mat)>;
}

impl OuterOracle for ZerothOrder {
    /// The next warm start is the mean of the perturbed inner solutions.
    fn estimate(
        &self,
        game: &LqGame,
        l: &Mat,
        k_warm: &Mat,
        inner: &dyn InnerSolve,
        stream: Stream,
    ) -> Result<(Estimate, Mat)> {
        let cfg = &self.0;
        cfg.validate()?;
        let factor = X0Factor::new(game, cfg.initial_state)?;
        let samples = ordered_map(cfg.m, |i| {
            let mut rng = stream.rng(i as u64);
            let v = sample_sphere(l.nrows(), l.ncols(), cfg.radius, &mut rng);
            let l_hat = l + &v;
            let k_hat = inner.solve(game, &l_hat, k_warm, stream.child(i as u64))?;
            check_sample(game, &k_hat, &l_hat, i)?;
            let r = simulate(game, &k_hat, &l_hat, &factor, cfg.rollout_len, &mut rng)?;
            Ok((v, r, k_hat))
        })?;
        let mut k_mean = Mat::zeros(k_warm.nrows(), k_warm.ncols());
        let mut vs = Vec::with_capacity(samples.len());
        let mut rs = Vec::with_capacity(samples.len());
        for (v, r, k_hat) in samples {
            k_mean += k_hat;
            vs.push(v);
            rs.push(r);
        }
        let est = combine(&vs, &rs, cfg.radius)?;
        Ok((est, k_mean / cfg.m as f64))
    }
}

impl OuterOracle for Analytic {
    fn estimate(
        &self,
        game: &LqGame,
        l: &Mat,
        k_warm: &Mat,
        inner: &dyn InnerSolve,
        stream: Stream,
    ) -> Result<(Estimate, Mat)> {
        let k = inner.solve(game, l, k_warm, stream)?;
        let ev = policy::evaluate_gains(game, &k, l)?;
        let est = Estimate {
            natural: Some(&ev.f * 2.0),
            grad: ev.grad_l,
            sigma: ev.sigma,
            diagnostics: None,
        };
        Ok((est, k))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelFreeOuterConfig {
    pub estimator: EstimatorConfig,
    pub steps: usize,
    pub eta: f64,
    pub variant: OuterVariant,
    pub projection: Projection,
    pub inner: ModelFreeInner,
}

/// Sampled nested gradient with the zeroth-order estimators throughout.
pub fn outer_ng_modelfree(
    game: &LqGame,
    l0: &Mat,
    k0: &Mat,
    cfg: &ModelFreeOuterConfig,
    omega: &OmegaSet,
) -> std::result::Result<(crate::policy::PolicyPair, OuterTrace), RunError> {
    let oracle = ZerothOrder(cfg.estimator);
    outer_ng_with(
        game,
        l0,
        k0,
        cfg,
        omega,
        &oracle,
        &cfg.inner,
        Stream::root(cfg.estimator.seed),
    )
}

/// Exact-model diagnostics for a trace row; the algorithm itself never
/// reads them.
fn diagnostic_record(game: &LqGame, t: usize, l: &Mat, k: &Mat, map_norm: f64, projected: bool) -> Result<TraceRecord> {
    let lambda_min_qtilde = game.q_tilde(l)?.min_eigenvalue();
    let rho = linalg::spectral_radius(&game.closed_loop(k, l)?)?;
    let ev = policy::evaluate_gains(game, k, l).ok();
    Ok(TraceRecord {
        t,
        l: l.clone(),
        k: k.clone(),
        cost: ev.as_ref().map_or(f64::NAN, |e| e.cost),
        grad_map_norm: map_norm,
        grad_norm: ev.as_ref().map_or(f64::NAN, |e| e.grad_l.norm()),
        grad_k_norm: ev.as_ref().map_or(f64::NAN, |e| e.grad_k.norm()),
        lambda_min_qtilde,
        proj_active: projected,
        rho,
    })
}

/// The sampled outer loop with pluggable oracles. Runs exactly `cfg.steps`
/// updates, then solves the inner problem once more at `L_T`; the final
/// trace row has no gradient mapping (`NaN`).
#[allow(clippy::too_many_arguments)]
pub fn outer_ng_with(
    game: &LqGame,
    l0: &Mat,
    k0: &Mat,
    cfg: &ModelFreeOuterConfig,
    omega: &OmegaSet,
    oracle: &dyn OuterOracle,
    inner: &dyn InnerSolve,
    stream: Stream,
) -> std::result::Result<(crate::policy::PolicyPair, OuterTrace), RunError> {
    let mut trace = OuterTrace::new(game.sigma0().min_eigenvalue());
    let result = (|| -> Result<crate::policy::PolicyPair> {
        if cfg.variant == OuterVariant::GaussNewtonNestedGradient {
            return Err(Error::Contract(
                "the Gauss-Newton update cannot be estimated from samples".into(),
            ));
        }
        if !(cfg.eta > 0.0) {
            return Err(Error::Config(format!(
                "outer stepsize must be positive, got {}",
                cfg.eta
            )));
        }
        game.check_gains(k0, l0)?;
        let mut l = l0.clone();
        let mut k_warm = k0.clone();
        for t in 0..cfg.steps {
            let (est, k_next) = oracle.estimate(game, &l, &k_warm, inner, stream.child(t as u64))?;
            let direction = match cfg.variant {
                OuterVariant::NestedGradient => est.grad.clone(),
                _ => est.natural_direction()?,
            };
            let step = outer_loop::apply_step(game, &l, direction, cfg.eta, cfg.projection, omega);
            trace.records.push(diagnostic_record(
                game,
                t,
                &l,
                &k_next,
                step.mapping.norm(),
                step.projected,
            )?);
            k_warm = k_next;
            l = step.next;
        }
        let k_final = inner.solve(game, &l, &k_warm, stream.child(cfg.steps as u64))?;
        trace
            .records
            .push(diagnostic_record(game, cfg.steps, &l, &k_final, f64::NAN, false)?);
        Ok(crate::policy::PolicyPair::new(k_final, l))
    })();
    result
        .map(|pi| (pi, trace.clone()))
        .map_err(|error| RunError { error, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{case1, solve_gare_default};
    use crate::inner_loop::{self, InnerConfig, InnerMethod};
    use crate::outer_loop::{solve_nested, OuterConfig};

    #[test]
    fn sphere_samples_have_exact_radius_and_zero_mean() {
        let stream = Stream::root(7);
        let mut rng = stream.rng(0);
        let n = 100_000;
        let r = 0.3;
        let mut mean = Mat::zeros(2, 3);
        for _ in 0..n {
            let u = sample_sphere(2, 3, r, &mut rng);
            assert!((u.norm() - r).abs() < 1e-12);
            mean += u;
        }
        mean /= n as f64;
        let bound = 5.0 * r / (n as f64).sqrt() * 4.0;
        assert!(mean.abs().max() <= bound, "{mean}");

        let a = sample_sphere(2, 3, r, &mut stream.rng(1));
        let b = sample_sphere(2, 3, r, &mut stream.rng(2));
        assert_ne!(a, b);
        assert_ne!(Stream::root(7).child(0), Stream::root(7).child(1));
    }

    #[test]
    fn rollout_matches_exact_finite_horizon() {
        let g = case1();
        let l = Mat::zeros(1, 3);
        let k = inner_loop::solve_inner_riccati(&g, &l, 1e-12, 100_000).unwrap().k;
        let acl = g.closed_loop(&k, &l).unwrap();
        let x0 = [0.1, -0.2, 0.3];
        let mut x = x0.to_vec();
        let mut next = vec![0.0; 3];
        let mut corr = vec![0.0; 9];
        rollout(&linalg::row_major(&acl), &mut x, &mut next, 4, &mut corr);
        let mut expect = Mat::zeros(3, 3);
        let mut xv = nalgebra::DVector::from_column_slice(&x0);
        for _ in 0..4 {
            expect += &xv * xv.transpose();
            xv = &acl * xv;
        }
        assert!((Mat::from_row_slice(3, 3, &corr) - expect).norm() < 1e-15);
    }

    #[test]
    fn fixed_and_dynamic_rollouts_agree() {
        let acl = [0.5, 0.1, -0.2, 0.0, 0.7, 0.3, 0.1, 0.0, 0.4];
        let (mut x1, mut x2) = ([0.3, -0.1, 0.2], [0.3, -0.1, 0.2]);
        let (mut c1, mut c2) = ([0.0; 9], [0.0; 9]);
        rollout_fixed::<3>(&acl, &mut x1, 37, &mut c1);
        rollout_dyn(&acl, &mut x2, &mut [0.0; 3], 37, &mut c2);
        assert_eq!(x1, x2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn estimates_are_deterministic_and_thread_independent() {
        let g = case1();
        let l = Mat::zeros(1, 3);
        let k = inner_loop::solve_inner_riccati(&g, &l, 1e-12, 100_000).unwrap().k;
        let cfg = EstimatorConfig::new(3000, 300, 0.01, 11);
        let a = estimate_grad_sigma(&g, &k, &l, &cfg).unwrap();
        let b = estimate_grad_sigma(&g, &k, &l, &cfg).unwrap();
        assert_eq!(a, b);
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = single.install(|| estimate_grad_sigma(&g, &k, &l, &cfg).unwrap());
        assert_eq!(a, c);
        let other = estimate_grad_sigma(&g, &k, &l, &EstimatorConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.grad, other.grad);
    }

    #[test]
    fn uniform_cube_matches_sigma0_covariance() {
        let g = case1();
        let factor = X0Factor::new(&g, InitialState::UniformCube).unwrap();
        let mut rng = Stream::root(3).rng(0);
        let n = 200_000;
        let mut acc = 0.0;
        let mut x = [0.0; 3];
        for _ in 0..n {
            sample_x0(&factor, &mut rng, &mut x);
            assert!(x.iter().all(|v| v.abs() <= 0.3 + 1e-15));
            acc += x[0] * x[0];
        }
        assert!((acc / n as f64 - 0.03).abs() < 0.03 * 0.02);
    }

    #[test]
    fn sigma_estimate_is_close_with_many_rollouts() {
        let g = case1();
        let l = Mat::zeros(1, 3);
        let k = inner_loop::solve_inner_riccati(&g, &l, 1e-12, 100_000).unwrap().k;
        let ev = policy::evaluate_gains(&g, &k, &l).unwrap();
        let len = rollout_len_for(ev.rho, 1e-10).unwrap();
        let cfg = EstimatorConfig::new(4000, len, 1e-3, 5);
        let est = estimate_grad_sigma(&g, &k, &l, &cfg).unwrap();
        let rel = (est.sigma.as_mat() - ev.sigma.as_mat()).norm() / ev.sigma.norm();
        assert!(rel < 0.1, "relative Sigma error {rel}");
        let diag = est.diagnostics.unwrap();
        assert_eq!(diag.samples, 4000);
        assert!((diag.cost_mean - ev.cost).abs() < 0.1 * ev.cost);
    }

    #[test]
    fn destabilizing_samples_are_errors() {
        let g = case1();
        let l = Mat::zeros(1, 3);
        let k = inner_loop::solve_inner_riccati(&g, &l, 1e-12, 100_000).unwrap().k;
        let cfg = EstimatorConfig::new(50, 10, 5.0, 1);
        assert!(matches!(
            estimate_grad_sigma(&g, &k, &l, &cfg),
            Err(Error::Sample { .. })
        ));
        let err = inner_ng_modelfree(&g, &l, &k, &cfg, 3, 1e-3, ModelFreeFlavor::PolicyGradient).unwrap_err();
        assert!(matches!(err, Error::StabilityLost { ref location, .. } if location.contains("step 0")));
    }

    #[test]
    fn gauss_newton_is_rejected() {
        let g = case1();
        let l = Mat::zeros(1, 3);
        let k = Mat::zeros(1, 3);
        let cfg = EstimatorConfig::new(1, 1, 0.01, 0);
        assert!(matches!(
            inner_ng_modelfree(&g, &l, &k, &cfg, 1, 0.1, ModelFreeFlavor::GaussNewton),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn analytic_inner_reproduces_solve_inner() {
        let g = case1();
        let l = Mat::from_row_slice(1, 3, &[0.01, 0.0, -0.02]);
        let k0 = inner_loop::solve_inner_riccati(&g, &Mat::zeros(1, 3), 1e-12, 100_000)
            .unwrap()
            .k;
        for (method, flavor, alpha) in [
            (InnerMethod::PolicyGradient, ModelFreeFlavor::PolicyGradient, 0.5),
            (
                InnerMethod::NaturalPolicyGradient,
                ModelFreeFlavor::NaturalPolicyGradient,
                0.02,
            ),
        ] {
            let cfg = InnerConfig::new(method).with_stepsize(alpha).with_tol(1e-9);
            let exact = inner_loop::solve_inner(&g, &l, &k0, &cfg).unwrap();
            let k = inner_ng_with(&g, &l, &k0, &Analytic, exact.iterations, alpha, flavor, Stream::root(0)).unwrap();
            assert_eq!(k, exact.k, "{method:?}");
        }
    }

    #[test]
    fn analytic_outer_reproduces_solve_nested() {
        let g = case1();
        let omega = OmegaSet::default_for(&g, None).unwrap();
        let l0 = Mat::zeros(1, 3);
        let k0 = outer_loop::initial_gain(&g, &l0).unwrap();
        for variant in [OuterVariant::NestedGradient, OuterVariant::NaturalNestedGradient] {
            let nested_cfg = OuterConfig::new(variant).with_max_iter(10);
            let nested = solve_nested(&g, &l0, &nested_cfg, &omega).unwrap_err().trace;
            let eta = match nested_cfg.stepsize {
                inner_loop::Stepsize::Fixed(eta) => eta,
                inner_loop::Stepsize::Adaptive => unreachable!(),
            };
            let cfg = ModelFreeOuterConfig {
                estimator: EstimatorConfig::new(1, 1, 0.01, 0),
                steps: 10,
                eta,
                variant,
                projection: nested_cfg.projection,
                inner: ModelFreeInner {
                    estimator: EstimatorConfig::new(1, 1, 0.01, 0),
                    steps: 1,
                    alpha: 0.1,
                    flavor: ModelFreeFlavor::NaturalPolicyGradient,
                },
            };
            let exact_inner = ExactInner(nested_cfg.inner);
            let (_, trace) =
                outer_ng_with(&g, &l0, &k0, &cfg, &omega, &Analytic, &exact_inner, Stream::root(0)).unwrap();
            for (a, b) in trace.records.iter().zip(&nested.records) {
                assert_eq!(a.l, b.l, "{variant:?} t = {}", a.t);
                assert_eq!(a.k, b.k);
                assert_eq!(a.cost, b.cost);
            }
            assert_eq!(trace.len(), nested.len());
        }
    }

    #[test]
    fn rollout_length_rule() {
        assert_eq!(rollout_len_for(0.5, 0.25).unwrap(), 2);
        assert!(rollout_len_for(1.0, 0.1).is_err());
        let g = case1();
        let sol = solve_gare_default(&g).unwrap();
        let rho = policy::stable_radius(&g, &sol.k_star, &sol.l_star).unwrap();
        let len = rollout_len_for(rho, 1e-10).unwrap();
        assert!(rho.powi(len as i32) <= 1e-10);
        assert!(rho.powi(len as i32 - 1) > 1e-10);
    }
}
