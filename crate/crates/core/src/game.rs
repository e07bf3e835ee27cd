//! Zero-sum LQ game data, the generalized Riccati (GARE) oracle for the Nash
//! equilibrium, and the checks on the standing invertibility assumption.
//!
//! Dynamics are `x_{t+1} = A x_t + B u_t + C v_t`; the minimizer plays
//! `u = -K x`, the maximizer `v = -L x`, and the stage cost is
//! `xᵀQx + uᵀRᵘu - vᵀRᵛv` averaged over `x_0` with `E x_0 x_0ᵀ = Σ0`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, SymMat};

/// Default GARE residual tolerance (Frobenius norm).
pub const GARE_TOL: f64 = 1e-10;
/// Default GARE iteration cap.
pub const GARE_MAX_ITER: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GameDocument", into = "GameDocument")]
pub struct LqGame {
    a: Mat,
    b: Mat,
    c: Mat,
    q: SymMat,
    ru: SymMat,
    rv: SymMat,
    sigma0: SymMat,
}

impl LqGame {
    pub fn new(a: Mat, b: Mat, c: Mat, q: SymMat, ru: SymMat, rv: SymMat, sigma0: SymMat) -> Result<Self> {
        let d = a.nrows();
        let dims_ok = a.ncols() == d
            && b.nrows() == d
            && c.nrows() == d
            && q.dim() == d
            && sigma0.dim() == d
            && ru.dim() == b.ncols()
            && rv.dim() == c.ncols();
        if !dims_ok {
            return Err(Error::Dimension(format!(
                "inconsistent game: A {:?}, B {:?}, C {:?}, Q {}, Ru {}, Rv {}, Sigma0 {}",
                a.shape(),
                b.shape(),
                c.shape(),
                q.dim(),
                ru.dim(),
                rv.dim(),
                sigma0.dim()
            )));
        }
        for m in [&a, &b, &c] {
            linalg::check_finite(m)?;
        }
        for (what, m) in [("Q", &q), ("Ru", &ru), ("Rv", &rv), ("Sigma0", &sigma0)] {
            let min_eig = m.min_eigenvalue();
            if min_eig <= 0.0 {
                return Err(Error::Indefinite { what, min_eig });
            }
        }
        Ok(LqGame {
            a,
            b,
            c,
            q,
            ru,
            rv,
            sigma0,
        })
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }
    pub fn b(&self) -> &Mat {
        &self.b
    }
    pub fn c(&self) -> &Mat {
        &self.c
    }
    pub fn q(&self) -> &SymMat {
        &self.q
    }
    pub fn ru(&self) -> &SymMat {
        &self.ru
    }
    pub fn rv(&self) -> &SymMat {
        &self.rv
    }
    pub fn sigma0(&self) -> &SymMat {
        &self.sigma0
    }

    /// State dimension `d`.
    pub fn d(&self) -> usize {
        self.a.nrows()
    }
    /// Minimizer input dimension.
    pub fn m1(&self) -> usize {
        self.b.ncols()
    }
    /// Maximizer input dimension.
    pub fn m2(&self) -> usize {
        self.c.ncols()
    }

    /// Closed-loop matrix `A - BK - CL`.
    pub fn closed_loop(&self, k: &Mat, l: &Mat) -> Result<Mat> {
        self.check_gains(k, l)?;
        Ok(&self.a - &self.b * k - &self.c * l)
    }

    pub fn check_gains(&self, k: &Mat, l: &Mat) -> Result<()> {
        let d = self.d();
        if k.shape() != (self.m1(), d) || l.shape() != (self.m2(), d) {
            return Err(Error::Dimension(format!(
                "gains K {:?} and L {:?} do not match ({}x{d}, {}x{d})",
                k.shape(),
                l.shape(),
                self.m1(),
                self.m2()
            )));
        }
        Ok(())
    }

    /// `Q̃_L = Q - LᵀRᵛL`.
    pub fn q_tilde(&self, l: &Mat) -> Result<SymMat> {
        SymMat::new(self.q.as_mat() - l.transpose() * self.rv.as_mat() * l)
    }

    /// Stage weight `Q + KᵀRᵘK - LᵀRᵛL`.
    pub fn stage_weight(&self, k: &Mat, l: &Mat) -> Result<SymMat> {
        SymMat::new(self.q.as_mat() + k.transpose() * self.ru.as_mat() * k - l.transpose() * self.rv.as_mat() * l)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// On-disk form: dimensions plus row-major flattened matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[allow(non_snake_case)]
struct GameDocument {
    d: usize,
    m1: usize,
    m2: usize,
    A: Vec<f64>,
    B: Vec<f64>,
    C: Vec<f64>,
    Q: Vec<f64>,
    Ru: Vec<f64>,
    Rv: Vec<f64>,
    Sigma0: Vec<f64>,
}

impl TryFrom<GameDocument> for LqGame {
    type Error = Error;

    fn try_from(doc: GameDocument) -> Result<Self> {
        let (d, m1, m2) = (doc.d, doc.m1, doc.m2);
        let sym = |n: usize, v: &[f64]| SymMat::new(linalg::mat(n, n, v)?);
        LqGame::new(
            linalg::mat(d, d, &doc.A)?,
            linalg::mat(d, m1, &doc.B)?,
            linalg::mat(d, m2, &doc.C)?,
            sym(d, &doc.Q)?,
            sym(m1, &doc.Ru)?,
            sym(m2, &doc.Rv)?,
            sym(d, &doc.Sigma0)?,
        )
    }
}

impl From<LqGame> for GameDocument {
    fn from(g: LqGame) -> Self {
        GameDocument {
            d: g.d(),
            m1: g.m1(),
            m2: g.m2(),
            A: linalg::row_major(&g.a),
            B: linalg::row_major(&g.b),
            C: linalg::row_major(&g.c),
            Q: linalg::row_major(&g.q),
            Ru: linalg::row_major(&g.ru),
            Rv: linalg::row_major(&g.rv),
            Sigma0: linalg::row_major(&g.sigma0),
        }
    }
}

const CASE_A: [f64; 9] = [
    0.956488,
    0.0816012,
    -0.0005, //
    0.0741349,
    0.94121,
    -0.000708383, //
    0.0,
    0.0,
    0.132655,
];
const CASE_B: [f64; 3] = [-0.00550808, -0.096, 0.867345];

fn builtin_case(q_scale: f64, c: [f64; 3]) -> LqGame {
    LqGame::new(
        Mat::from_row_slice(3, 3, &CASE_A),
        Mat::from_row_slice(3, 1, &CASE_B),
        Mat::from_row_slice(3, 1, &c),
        SymMat::scaled_identity(3, q_scale),
        SymMat::identity(1),
        SymMat::identity(1),
        SymMat::scaled_identity(3, 0.03),
    )
    .expect("builtin game data is valid")
}

/// Benchmark game where `Q - L*ᵀRᵛL* ≻ 0` holds.
pub fn case1() -> LqGame {
    builtin_case(1.0, [0.00951892, 0.0038373, 0.001])
}

/// Benchmark game where `Q - L*ᵀRᵛL*` is indefinite.
pub fn case2() -> LqGame {
    builtin_case(0.01, [0.00951892, 0.0038373, 0.2])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NashSolution {
    pub p_star: SymMat,
    #[serde(with = "linalg::serde_rows")]
    pub k_star: Mat,
    #[serde(with = "linalg::serde_rows")]
    pub l_star: Mat,
    /// Game value `tr(P* Σ0)`.
    pub value: f64,
    pub iterations: usize,
    pub residual: f64,
}

/// One evaluation of the GARE right-hand side at `p`.
struct GareStep {
    next: Mat,
    k: Mat,
    l: Mat,
}

// Solves [[Ru + BᵀPB, BᵀPC], [CᵀPB, -Rv + CᵀPC]] [K; L] = [BᵀPA; CᵀPA]
// by eliminating the (2,2) block.
fn gare_step(game: &LqGame, p: &Mat) -> Result<GareStep> {
    let (a, b, c) = (game.a(), game.b(), game.c());
    let pb = p * b;
    let pc = p * c;
    let pa = p * a;
    let m11 = game.ru().as_mat() + b.transpose() * &pb;
    let m12 = b.transpose() * &pc;
    let m22 = c.transpose() * &pc - game.rv().as_mat();
    let n1 = b.transpose() * &pa;
    let n2 = c.transpose() * &pa;

    let m22_inv = linalg::inverse(&m22, "GARE block -Rv + CᵀPC")?;
    let schur = &m11 - &m12 * &m22_inv * m12.transpose();
    let schur_inv = linalg::inverse(&schur, "GARE Schur complement")?;
    let k = &schur_inv * (&n1 - &m12 * &m22_inv * &n2);
    let l = &m22_inv * (&n2 - m12.transpose() * &k);

    let next = a.transpose() * &pa + game.q().as_mat() - (&n1.transpose() * &k + n2.transpose() * &l);
    Ok(GareStep {
        next: (&next + next.transpose()) * 0.5,
        k,
        l,
    })
}

/// GARE right-hand side minus `p`, in Frobenius norm.
pub fn gare_residual(game: &LqGame, p: &Mat) -> Result<f64> {
    Ok((gare_step(game, p)?.next - p).norm())
}

/// Value iteration on the GARE from `P₀ = Q`.
pub fn solve_gare(game: &LqGame, tol: f64, max_iter: usize) -> Result<NashSolution> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("GARE tolerance must be positive, got {tol}")));
    }
    let mut p = game.q().as_mat().clone();
    let mut residual = f64::INFINITY;
    for iter in 0..max_iter {
        let step = gare_step(game, &p)?;
        residual = (&step.next - &p).norm();
        p = step.next;
        if residual <= tol {
            let (p, fin, residual) = polish(game, p)?;
            let rho = linalg::spectral_radius(&game.closed_loop(&fin.k, &fin.l)?)?;
            if rho >= 1.0 {
                return Err(Error::SolutionRejected { rho });
            }
            let p_star = SymMat::new(p)?;
            let value = (p_star.as_mat() * game.sigma0().as_mat()).trace();
            return Ok(NashSolution {
                p_star,
                k_star: fin.k,
                l_star: fin.l,
                value,
                iterations: iter + 1,
                residual,
            });
        }
        if !residual.is_finite() {
            break;
        }
    }
    Err(Error::NonConvergence {
        what: "GARE value iteration",
        iterations: max_iter,
        residual,
    })
}

// Newton refinement: re-evaluate P as the Lyapunov solution of the gains it
// induces, keeping each step only while the GARE residual decreases.
fn polish(game: &LqGame, mut p: Mat) -> Result<(Mat, GareStep, f64)> {
    const MAX_NEWTON: usize = 5;
    let mut step = gare_step(game, &p)?;
    let mut residual = (&step.next - &p).norm();
    for _ in 0..MAX_NEWTON {
        let acl = match game.closed_loop(&step.k, &step.l) {
            Ok(acl) => acl,
            Err(_) => break,
        };
        let weight = match game.stage_weight(&step.k, &step.l) {
            Ok(w) => w,
            Err(_) => break,
        };
        let candidate = match linalg::solve_dlyap_transpose(&acl, &weight) {
            Ok(x) => x.into_mat(),
            Err(_) => break,
        };
        let cand_step = gare_step(game, &candidate)?;
        let cand_residual = (&cand_step.next - &candidate).norm();
        if !(cand_residual < residual) {
            break;
        }
        p = candidate;
        step = cand_step;
        residual = cand_residual;
    }
    Ok((p, step, residual))
}

/// [`solve_gare`] with the default tolerance and iteration cap.
pub fn solve_gare_default(game: &LqGame) -> Result<NashSolution> {
    solve_gare(game, GARE_TOL, GARE_MAX_ITER)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// `λ_min(Rᵛ - CᵀP*C)`.
    pub rv_margin: f64,
    /// `λ_min(Q - L*ᵀRᵛL*)`.
    pub ql_margin: f64,
    pub part_i_holds: bool,
    pub part_ii_holds: bool,
}

pub fn check_assumptions(game: &LqGame, sol: &NashSolution) -> Result<AssumptionReport> {
    let c = game.c();
    let rv_block = SymMat::new(game.rv().as_mat() - c.transpose() * sol.p_star.as_mat() * c)?;
    let rv_margin = rv_block.min_eigenvalue();
    let ql_margin = game.q_tilde(&sol.l_star)?.min_eigenvalue();
    Ok(AssumptionReport {
        rv_margin,
        ql_margin,
        part_i_holds: rv_margin > 0.0,
        part_ii_holds: ql_margin > 0.0,
    })
}
