//! Experiment runner behind the `lqgame` CLI: a JSON config names a game and
//! a list of solvers; each solver produces a CSV trace, a JSON summary and
//! three SVG plots.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{self, BaselineConfig, Family, Flavor};
use crate::error::{Error, Result};
use crate::game::{self, AssumptionReport, LqGame, NashSolution};
use crate::inner_loop::{InnerConfig, InnerMethod, Stepsize};
use crate::linalg::Mat;
use crate::modelfree::{self, EstimatorConfig, InitialState, ModelFreeFlavor, ModelFreeInner, ModelFreeOuterConfig};
use crate::outer_loop::{self, OmegaSet, OuterConfig, OuterVariant, Projection, RunError};
use crate::plot;
use crate::policy::PolicyPair;
use crate::trace::{self, OuterTrace, TraceSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GameSource {
    /// `"case1"` or `"case2"`.
    Builtin(String),
    Path {
        path: PathBuf,
    },
}

impl GameSource {
    pub fn load(&self, base: &Path) -> Result<LqGame> {
        match self {
            GameSource::Builtin(name) => match name.as_str() {
                "case1" => Ok(game::case1()),
                "case2" => Ok(game::case2()),
                other => {
                    let path = base.join(other);
                    if path.is_file() {
                        LqGame::load_json(&path)
                    } else {
                        Err(Error::Config(format!(
                            "unknown game {other:?} (expected case1, case2 or a file)"
                        )))
                    }
                }
            },
            GameSource::Path { path } => {
                let path = base.join(path);
                if !path.is_file() {
                    return Err(Error::Config(format!("game file {} does not exist", path.display())));
                }
                LqGame::load_json(&path)
            }
        }
    }
}

fn default_game() -> GameSource {
    GameSource::Builtin("case1".into())
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerOverrides {
    pub method: Option<InnerMethod>,
    pub stepsize: Option<f64>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SolverSpec {
    Nested {
        name: Option<String>,
        variant: OuterVariant,
        stepsize: Option<f64>,
        tol: Option<f64>,
        max_iter: Option<usize>,
        projection: Option<Projection>,
        inner: Option<InnerOverrides>,
        gap_tol: Option<f64>,
    },
    Ag {
        name: Option<String>,
        flavor: Flavor,
        stepsize: Option<f64>,
        k_stepsize: Option<f64>,
        inner_iters: Option<usize>,
        inner_tol: Option<f64>,
        max_outer: Option<usize>,
        tol: Option<f64>,
        gap_tol: Option<f64>,
    },
    Gda {
        name: Option<String>,
        flavor: Flavor,
        stepsize: Option<f64>,
        k_stepsize: Option<f64>,
        max_outer: Option<usize>,
        tol: Option<f64>,
        gap_tol: Option<f64>,
    },
    Modelfree {
        name: Option<String>,
        variant: OuterVariant,
        m: Option<usize>,
        rollout_len: Option<usize>,
        radius: Option<f64>,
        steps: Option<usize>,
        eta: Option<f64>,
        inner_m: Option<usize>,
        inner_rollout_len: Option<usize>,
        inner_radius: Option<f64>,
        inner_steps: Option<usize>,
        inner_alpha: Option<f64>,
        inner_flavor: Option<ModelFreeFlavor>,
        initial_state: Option<InitialState>,
        projection: Option<Projection>,
        gap_tol: Option<f64>,
    },
}

fn variant_slug(v: OuterVariant) -> &'static str {
    match v {
        OuterVariant::NestedGradient => "ng",
        OuterVariant::NaturalNestedGradient => "natural_ng",
        OuterVariant::GaussNewtonNestedGradient => "gauss_newton_ng",
    }
}

fn flavor_slug(f: Flavor) -> &'static str {
    match f {
        Flavor::PolicyGradient => "pg",
        Flavor::NaturalPolicyGradient => "natural_pg",
        Flavor::GaussNewton => "gauss_newton",
    }
}

/// Default gap tolerance for exact solvers.
pub const EXACT_GAP_TOL: f64 = 1e-5;
/// Default gap tolerance for sampled solvers.
pub const MODELFREE_GAP_TOL: f64 = 0.05;

impl SolverSpec {
    pub fn name(&self) -> String {
        match self {
            SolverSpec::Nested { name, variant, .. } => name
                .clone()
                .unwrap_or_else(|| format!("nested_{}", variant_slug(*variant))),
            SolverSpec::Ag { name, flavor, .. } => {
                name.clone().unwrap_or_else(|| format!("ag_{}", flavor_slug(*flavor)))
            }
            SolverSpec::Gda { name, flavor, .. } => {
                name.clone().unwrap_or_else(|| format!("gda_{}", flavor_slug(*flavor)))
            }
            SolverSpec::Modelfree { name, variant, .. } => name
                .clone()
                .unwrap_or_else(|| format!("modelfree_{}", variant_slug(*variant))),
        }
    }

    pub fn gap_tol(&self) -> f64 {
        match self {
            SolverSpec::Nested { gap_tol, .. } | SolverSpec::Ag { gap_tol, .. } | SolverSpec::Gda { gap_tol, .. } => {
                gap_tol.unwrap_or(EXACT_GAP_TOL)
            }
            SolverSpec::Modelfree { gap_tol, .. } => gap_tol.unwrap_or(MODELFREE_GAP_TOL),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_game")]
    pub game: GameSource,
    pub solvers: Vec<SolverSpec>,
    /// Radius parameter of Ω; defaults to half the equilibrium margin.
    pub zeta: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.solvers.is_empty() {
            return Err(Error::Config("the solver list is empty".into()));
        }
        let mut names: Vec<String> = self.solvers.iter().map(SolverSpec::name).collect();
        names.sort();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate solver name {:?}", w[0])));
        }
        if names.iter().any(|n| n.is_empty() || n.contains(['/', '\\'])) {
            return Err(Error::Config(
                "solver names must be non-empty and contain no path separators".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub name: String,
    pub met_tolerance: bool,
    pub gap_tol: f64,
    pub error: Option<String>,
    pub summary: TraceSummary,
    #[serde(with = "crate::linalg::serde_rows")]
    pub final_k: Mat,
    #[serde(with = "crate::linalg::serde_rows")]
    pub final_l: Mat,
    pub k_error: Option<f64>,
    pub l_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub oracle_value: f64,
    pub assumptions: AssumptionReport,
    pub zeta: f64,
    pub solvers: Vec<SolverReport>,
    pub all_met: bool,
}

impl ExperimentSummary {
    pub fn failing(&self) -> Vec<&str> {
        self.solvers
            .iter()
            .filter(|s| !s.met_tolerance)
            .map(|s| s.name.as_str())
            .collect()
    }
}

fn inner_config(base: InnerConfig, o: Option<InnerOverrides>) -> InnerConfig {
    let Some(o) = o else { return base };
    let mut cfg = match o.method {
        Some(m) if m != base.method => InnerConfig::new(m).with_tol(base.tol),
        _ => base,
    };
    if let Some(a) = o.stepsize {
        cfg = cfg.with_stepsize(a);
    }
    if let Some(t) = o.tol {
        cfg = cfg.with_tol(t);
    }
    if let Some(n) = o.max_iter {
        cfg = cfg.with_max_iter(n);
    }
    cfg
}

type RunOutcome = std::result::Result<(PolicyPair, OuterTrace), RunError>;

fn run_solver(game: &LqGame, spec: &SolverSpec, omega: &OmegaSet, seed: u64) -> RunOutcome {
    let l0 = Mat::zeros(game.m2(), game.d());
    let start = || -> std::result::Result<PolicyPair, RunError> {
        outer_loop::initial_gain(game, &l0)
            .map(|k| PolicyPair::new(k, l0.clone()))
            .map_err(|error| RunError {
                error,
                trace: OuterTrace::default(),
            })
    };
    match spec {
        SolverSpec::Nested {
            variant,
            stepsize,
            tol,
            max_iter,
            projection,
            inner,
            ..
        } => {
            let mut cfg = OuterConfig::new(*variant);
            if let Some(eta) = stepsize {
                cfg = cfg.with_stepsize(*eta);
            }
            if let Some(t) = tol {
                cfg = cfg.with_tol(*t);
            }
            if let Some(n) = max_iter {
                cfg = cfg.with_max_iter(*n);
            }
            if let Some(p) = projection {
                cfg = cfg.with_projection(*p);
            }
            cfg = cfg.with_inner(inner_config(cfg.inner, *inner));
            outer_loop::solve_nested(game, &l0, &cfg, omega)
        }
        SolverSpec::Ag {
            flavor,
            stepsize,
            k_stepsize,
            inner_iters,
            inner_tol,
            max_outer,
            tol,
            ..
        } => {
            let mut cfg = BaselineConfig::new(Family::AlternatingGradient, *flavor);
            apply_baseline(&mut cfg, *stepsize, *k_stepsize, *max_outer, *tol);
            if let Some(n) = inner_iters {
                cfg = cfg.with_inner_iters(*n);
            }
            if let Some(t) = inner_tol {
                cfg = cfg.with_inner_tol(*t);
            }
            baselines::run_ag(game, &start()?, &cfg)
        }
        SolverSpec::Gda {
            flavor,
            stepsize,
            k_stepsize,
            max_outer,
            tol,
            ..
        } => {
            let mut cfg = BaselineConfig::new(Family::GradientDescentAscent, *flavor);
            apply_baseline(&mut cfg, *stepsize, *k_stepsize, *max_outer, *tol);
            baselines::run_gda(game, &start()?, &cfg)
        }
        SolverSpec::Modelfree {
            variant,
            m,
            rollout_len,
            radius,
            steps,
            eta,
            inner_m,
            inner_rollout_len,
            inner_radius,
            inner_steps,
            inner_alpha,
            inner_flavor,
            initial_state,
            projection,
            ..
        } => {
            let init = initial_state.unwrap_or_default();
            let estimator = EstimatorConfig::new(
                m.unwrap_or(100),
                rollout_len.unwrap_or(200),
                radius.unwrap_or(0.05),
                seed,
            )
            .with_initial_state(init);
            let inner_estimator = EstimatorConfig::new(
                inner_m.unwrap_or(100),
                inner_rollout_len.unwrap_or(200),
                inner_radius.unwrap_or(0.05),
                seed,
            )
            .with_initial_state(init);
            let cfg = ModelFreeOuterConfig {
                estimator,
                steps: steps.unwrap_or(50),
                eta: eta.unwrap_or(1e-3),
                variant: *variant,
                projection: projection.unwrap_or_default(),
                inner: ModelFreeInner {
                    estimator: inner_estimator,
                    steps: inner_steps.unwrap_or(5),
                    alpha: inner_alpha.unwrap_or(1e-4),
                    flavor: inner_flavor.unwrap_or(ModelFreeFlavor::PolicyGradient),
                },
            };
            let pi0 = start()?;
            modelfree::outer_ng_modelfree(game, &pi0.l, &pi0.k, &cfg, omega)
        }
    }
}

fn apply_baseline(
    cfg: &mut BaselineConfig,
    eta: Option<f64>,
    alpha: Option<f64>,
    max_outer: Option<usize>,
    tol: Option<f64>,
) {
    if let Some(eta) = eta {
        cfg.stepsize = eta;
    }
    if let Some(alpha) = alpha {
        cfg.k_stepsize = Stepsize::Fixed(alpha);
    }
    if let Some(n) = max_outer {
        cfg.max_outer = n;
    }
    if let Some(t) = tol {
        cfg.tol = t;
    }
}

/// Output location of one solver artifact.
pub fn artifact_path(dir: &Path, name: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{name}{suffix}"))
}

/// Runs every solver, writes its artifacts under `output_dir` (relative
/// paths resolve against `base`), and returns the overall summary, which is
/// also written as `summary.json`.
pub fn run_experiment(cfg: &ExperimentConfig, base: &Path) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let game = cfg.game.load(base)?;
    let sol = game::solve_gare_default(&game)?;
    let assumptions = game::check_assumptions(&game, &sol)?;
    let omega = match cfg.zeta {
        Some(z) => OmegaSet::new(&game, z)?,
        None => OmegaSet::default_for(&game, Some(&sol))?,
    };
    let out = base.join(&cfg.output_dir);
    fs::create_dir_all(&out)?;

    let mut reports = Vec::new();
    for spec in &cfg.solvers {
        let name = spec.name();
        let (pair, trace, error) = match run_solver(&game, spec, &omega, cfg.seed) {
            Ok((pi, trace)) => (Some(pi), trace, None),
            Err(e) => (None, e.trace, Some(e.error)),
        };
        let report = report_for(&name, spec.gap_tol(), pair.as_ref(), &trace, error.as_ref(), &sol);
        write_artifacts(&out, &name, &trace, &report, sol.value)?;
        reports.push(report);
    }
    let summary = ExperimentSummary {
        oracle_value: sol.value,
        assumptions,
        zeta: omega.zeta,
        all_met: reports.iter().all(|r| r.met_tolerance),
        solvers: reports,
    };
    fs::write(out.join("summary.json"), to_json(&summary)?)?;
    Ok(summary)
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn report_for(
    name: &str,
    gap_tol: f64,
    pair: Option<&PolicyPair>,
    trace: &OuterTrace,
    error: Option<&Error>,
    sol: &NashSolution,
) -> SolverReport {
    let summary = trace.summary(error.is_none(), Some(sol.value));
    let (final_k, final_l) = match (pair, trace.last()) {
        (Some(pi), _) => (pi.k.clone(), pi.l.clone()),
        (None, Some(r)) => (r.k.clone(), r.l.clone()),
        (None, None) => (Mat::zeros(0, 0), Mat::zeros(0, 0)),
    };
    let k_error = pair.map(|pi| (&pi.k - &sol.k_star).norm());
    let l_error = pair.map(|pi| (&pi.l - &sol.l_star).norm());
    let met_tolerance = error.is_none() && summary.gap_to_oracle.is_some_and(|g| g <= gap_tol);
    SolverReport {
        name: name.to_owned(),
        met_tolerance,
        gap_tol,
        error: error.map(|e| e.to_string()),
        summary,
        final_k,
        final_l,
        k_error,
        l_error,
    }
}

fn write_artifacts(out: &Path, name: &str, trace: &OuterTrace, report: &SolverReport, oracle: f64) -> Result<()> {
    let csv_path = artifact_path(out, name, ".csv");
    trace.write_csv(fs::File::create(&csv_path)?)?;
    fs::write(artifact_path(out, name, ".json"), to_json(report)?)?;
    // Plots are rendered from the CSV as written, not from the in-memory trace.
    let rows = trace::read_csv(fs::File::open(&csv_path)?)?;
    for (suffix, svg) in plot::trace_plots(name, &rows, Some(oracle)) {
        fs::write(artifact_path(out, name, &format!("_{suffix}.svg")), svg)?;
    }
    Ok(())
}

/// Equilibrium, gains and assumption margins for the `oracle` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub solution: NashSolution,
    pub assumptions: AssumptionReport,
}

pub fn oracle(game: &LqGame) -> Result<OracleReport> {
    let solution = game::solve_gare_default(game)?;
    let assumptions = game::check_assumptions(game, &solution)?;
    Ok(OracleReport { solution, assumptions })
}

impl OracleReport {
    pub fn to_json(&self) -> Result<String> {
        to_json(self)
    }

    pub fn to_text(&self) -> String {
        let s = &self.solution;
        let a = &self.assumptions;
        format!(
            "P* ={}K* ={}L* ={}value = {:.10}\nGARE iterations = {}, residual = {:.3e}\n\
             rv_margin = {:.6} (holds: {})\nql_margin = {:.6} (holds: {})\n",
            s.p_star.as_mat(),
            s.k_star,
            s.l_star,
            s.value,
            s.iterations,
            s.residual,
            a.rv_margin,
            a.part_i_holds,
            a.ql_margin,
            a.part_ii_holds
        )
    }
}

/// One row per solver: name, status, iterations, final gap, fitted rate,
/// monotone flag.
pub fn comparison_table(summary: &ExperimentSummary) -> String {
    let mut out = format!(
        "{:<24} {:>6} {:>8} {:>12} {:>12} {:>9}\n",
        "solver", "ok", "iters", "gap", "rate", "monotone"
    );
    for r in &summary.solvers {
        let rate = r
            .summary
            .fitted_local_rate
            .map_or("-".to_owned(), |v| format!("{v:.4}"));
        let gap = r.summary.gap_to_oracle.map_or("-".to_owned(), |v| format!("{v:.3e}"));
        out.push_str(&format!(
            "{:<24} {:>6} {:>8} {:>12} {:>12} {:>9}\n",
            r.name, r.met_tolerance, r.summary.iters, gap, rate, r.summary.monotone_cost
        ));
    }
    out
}
