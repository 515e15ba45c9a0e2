//! Small dense semidefinite feasibility/optimization backend.
//!
//! Systems are affine matrix inequalities in a shared vector of scalar
//! variables: each block is `A_j(x) = C_j + sum_i x_i F_{j,i}` and must be
//! positive semidefinite. Strict blocks additionally require a minimum
//! eigenvalue of at least the requested margin.
//!
//! The solver is a two-stage logarithmic-barrier method with damped Newton
//! steps. Stage A maximizes a common shift applied to every block, which
//! yields a strictly interior point (or a proof of infeasibility as the best
//! achievable shift). Stage B then maximizes the margin over strict blocks
//! only, or follows the central path of the requested objective. Problem
//! sizes here are tiny (blocks up to 13x13, at most a few dozen variables),
//! so everything is dense and deterministic: fixed schedules, no randomized
//! initialization.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Symmetry validation tolerance, relative to the block magnitude.
const SYMMETRY_TOL: f64 = 1e-12;
/// Barrier reduction factor per outer iteration.
const MU_SHRINK: f64 = 0.2;
/// Inner Newton iteration cap per barrier value.
const MAX_NEWTON_ITER: usize = 60;
/// Relative accuracy used when classifying a point as feasible.
const FEASIBILITY_TOL: f64 = 1e-8;

/// One affine matrix inequality `C + sum_i x_i F_i >= 0` (or `>= margin*I`
/// when strict).
#[derive(Debug, Clone)]
pub struct AffineMatrixInequality {
    /// Constant block, symmetric.
    pub constant: DMatrix<f64>,
    /// One symmetric coefficient block per scalar variable.
    pub coefficients: Vec<DMatrix<f64>>,
    /// Strict blocks must clear the solver margin; nonstrict blocks only
    /// need positive semidefiniteness.
    pub strict: bool,
}

impl AffineMatrixInequality {
    pub fn new(
        constant: DMatrix<f64>,
        coefficients: Vec<DMatrix<f64>>,
        strict: bool,
    ) -> Result<Self> {
        let d = constant.nrows();
        check_symmetric(&constant, "constant block")?;
        for (i, f) in coefficients.iter().enumerate() {
            if f.nrows() != d || f.ncols() != d {
                return Err(Error::Dimension(format!(
                    "coefficient block {i} is {}x{}, expected {d}x{d}",
                    f.nrows(),
                    f.ncols()
                )));
            }
            check_symmetric(f, &format!("coefficient block {i}"))?;
        }
        Ok(AffineMatrixInequality {
            constant,
            coefficients,
            strict,
        })
    }

    /// Evaluates the block at `x`.
    pub fn evaluate(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut a = self.constant.clone();
        for (xi, f) in x.iter().zip(&self.coefficients) {
            accumulate(&mut a, *xi, f);
        }
        a
    }
}

/// Affine symmetric-matrix expression used as a log-det objective.
#[derive(Debug, Clone)]
pub struct MatrixExpr {
    pub constant: DMatrix<f64>,
    pub coefficients: Vec<DMatrix<f64>>,
}

impl MatrixExpr {
    pub fn evaluate(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut a = self.constant.clone();
        for (xi, f) in x.iter().zip(&self.coefficients) {
            accumulate(&mut a, *xi, f);
        }
        a
    }
}

/// `a += s * f`, elementwise.
fn accumulate(a: &mut DMatrix<f64>, s: f64, f: &DMatrix<f64>) {
    a.iter_mut()
        .zip(f.iter())
        .for_each(|(ai, fi)| *ai += s * fi);
}

#[derive(Debug, Clone)]
pub enum Objective {
    /// Any point meeting the margin qualifies; the solver returns the
    /// max-margin point for determinism.
    Feasibility,
    /// Maximize the minimum eigenvalue over strict blocks.
    MaxMargin,
    /// Maximize a linear functional of the variables.
    MaxLinear(DVector<f64>),
    /// Maximize `log det` of an affine symmetric expression that must be
    /// positive definite on the feasible interior.
    MaxLogDet(MatrixExpr),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdpStatus {
    Optimal,
    Feasible,
    Infeasible,
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub variables: DVector<f64>,
    /// Minimum eigenvalue over strict blocks at the returned point,
    /// recomputed by a direct eigenvalue evaluation.
    pub achieved_margin: f64,
    pub objective_value: f64,
    pub status: SdpStatus,
}

fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "{what} is {}x{}, expected square",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = 1.0f64.max(m.amax());
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::InvalidParameter(format!(
                    "{what} is not symmetric at ({i},{j}): {} vs {}",
                    m[(i, j)],
                    m[(j, i)]
                )));
            }
        }
    }
    Ok(())
}

/// Smallest eigenvalue of a symmetric matrix. Non-symmetric input (beyond a
/// small tolerance) is rejected.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    check_symmetric(m, "matrix")?;
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    Ok(eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min))
}

/// Internal sparse-coefficient affine block used by the barrier solver.
struct BarrierTerm {
    base: DMatrix<f64>,
    /// (variable index, coefficient block); variables absent here do not
    /// touch the block.
    coeffs: Vec<(usize, DMatrix<f64>)>,
    /// Weight 1 for objective terms, the running barrier value otherwise.
    is_objective: bool,
}

impl BarrierTerm {
    fn evaluate(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut a = self.base.clone();
        for (i, f) in &self.coeffs {
            accumulate(&mut a, x[*i], f);
        }
        a
    }
}

fn cholesky_logdet(m: &DMatrix<f64>) -> Option<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64)> {
    let chol = nalgebra::Cholesky::new(m.clone())?;
    let l = chol.l();
    let mut ld = 0.0;
    for i in 0..l.nrows() {
        let d = l[(i, i)];
        if !(d > 0.0 && d.is_finite()) {
            return None;
        }
        ld += d.ln();
    }
    Some((chol, 2.0 * ld))
}

/// Barrier objective value at `x`; None if any term leaves the cone.
fn barrier_value(
    terms: &[BarrierTerm],
    lin: &DVector<f64>,
    mu: f64,
    x: &DVector<f64>,
) -> Option<f64> {
    let mut f = lin.dot(x);
    for t in terms {
        let a = t.evaluate(x);
        let (_, ld) = cholesky_logdet(&a)?;
        f += if t.is_objective { ld } else { mu * ld };
    }
    f.is_finite().then_some(f)
}

/// Damped-Newton central-path follower. Maximizes
/// `lin . x + sum(objective terms log det) + mu * sum(barrier terms log det)`
/// over a decreasing barrier schedule. `x0` must be strictly interior.
fn follow_central_path(
    terms: &[BarrierTerm],
    lin: &DVector<f64>,
    x0: DVector<f64>,
    mu0: f64,
    mu_min: f64,
) -> Result<DVector<f64>> {
    let n = x0.len();
    let mut x = x0;
    if barrier_value(terms, lin, mu0, &x).is_none() {
        return Err(Error::Numerical(
            "barrier start point is not strictly interior".into(),
        ));
    }
    let mut mu = mu0;
    while mu > mu_min {
        for _ in 0..MAX_NEWTON_ITER {
            let mut grad = lin.clone();
            let mut hess = DMatrix::<f64>::zeros(n, n);
            let mut f = lin.dot(&x);
            for t in terms {
                let a = t.evaluate(&x);
                let Some((chol, ld)) = cholesky_logdet(&a) else {
                    return Err(Error::Numerical("barrier iterate left the cone".into()));
                };
                let wt = if t.is_objective { 1.0 } else { mu };
                f += wt * ld;
                let ainv = chol.inverse();
                // w_i = A^-1 F_i; grad_i += wt tr(w_i); hess_ik -= wt tr(w_i A^-1 F_k)
                let ws: Vec<(usize, DMatrix<f64>)> =
                    t.coeffs.iter().map(|(i, fc)| (*i, &ainv * fc)).collect();
                for (i, wi) in &ws {
                    grad[*i] += wt * wi.trace();
                }
                for (ai, (i, wi)) in ws.iter().enumerate() {
                    let wia = wi * &ainv;
                    for (k, fk) in t.coeffs.iter().skip(ai) {
                        // tr(wia * fk) reduces to an elementwise product
                        // because fk is symmetric
                        let v = wt * wia.iter().zip(fk.iter()).map(|(a, b)| a * b).sum::<f64>();
                        hess[(*i, *k)] -= v;
                        if k != i {
                            hess[(*k, *i)] -= v;
                        }
                    }
                }
            }
            // Newton direction: (-H) d = grad, with an escalating ridge.
            let neg_h = -&hess;
            let mut ridge = 1e-13 * (neg_h.trace() / n as f64).max(1e-30);
            let base_ridge = ridge;
            let chol_h = loop {
                let mut reg = neg_h.clone();
                for i in 0..n {
                    reg[(i, i)] += ridge;
                }
                if let Some(c) = nalgebra::Cholesky::new(reg) {
                    break c;
                }
                ridge *= 100.0;
                if ridge > base_ridge * 1e30 {
                    return Err(Error::Numerical(
                        "newton system not positive definite".into(),
                    ));
                }
            };
            let dir = chol_h.solve(&grad);
            let dec = grad.dot(&dir);
            if !dec.is_finite() {
                return Err(Error::Numerical("newton decrement not finite".into()));
            }
            if dec <= 1e-11 * (1.0 + f.abs()) {
                break;
            }
            // Backtracking line search: stay in the cone, increase f.
            let mut step = 1.0;
            let mut moved = false;
            while step > 1e-14 {
                let xt = &x + &dir * step;
                if let Some(ft) = barrier_value(terms, lin, mu, &xt) {
                    if ft > f + 0.01 * step * dec {
                        x = xt;
                        moved = true;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !moved {
                break;
            }
        }
        mu *= MU_SHRINK;
    }
    Ok(x)
}

/// Stage A: maximize a common shift `t` applied to every block, starting
/// from `x = 0`. The result is strictly interior whenever the system has a
/// strictly feasible point, and otherwise certifies the best common margin.
fn stage_interior(system: &[AffineMatrixInequality], n: usize) -> Result<(DVector<f64>, f64)> {
    let mut terms = Vec::with_capacity(system.len());
    for ineq in system {
        let d = ineq.constant.nrows();
        let mut coeffs: Vec<(usize, DMatrix<f64>)> = ineq
            .coefficients
            .iter()
            .enumerate()
            .filter(|(_, f)| f.amax() != 0.0)
            .map(|(i, f)| (i, f.clone()))
            .collect();
        coeffs.push((n, -DMatrix::<f64>::identity(d, d)));
        terms.push(BarrierTerm {
            base: ineq.constant.clone(),
            coeffs,
            is_objective: false,
        });
    }
    let mut m0 = f64::INFINITY;
    for ineq in system {
        m0 = m0.min(min_eigenvalue(&ineq.constant)?);
    }
    let t0 = m0 - (1.0 + 0.5 * m0.abs());
    let mut x0 = DVector::<f64>::zeros(n + 1);
    x0[n] = t0;
    let mut lin = DVector::<f64>::zeros(n + 1);
    lin[n] = 1.0;
    let mu0 = 1.0 + t0.abs();
    let x = follow_central_path(&terms, &lin, x0, mu0, mu0 * 1e-12)?;
    let t = x[n];
    Ok((x.rows(0, n).into_owned(), t))
}

/// Stage B: from a strictly interior point, maximize the margin over strict
/// blocks only; nonstrict blocks act as plain barriers.
fn stage_max_margin(
    system: &[AffineMatrixInequality],
    n: usize,
    x_init: &DVector<f64>,
) -> Result<(DVector<f64>, f64)> {
    let mut terms = Vec::with_capacity(system.len());
    let mut strict_min = f64::INFINITY;
    for ineq in system {
        let d = ineq.constant.nrows();
        let mut coeffs: Vec<(usize, DMatrix<f64>)> = ineq
            .coefficients
            .iter()
            .enumerate()
            .filter(|(_, f)| f.amax() != 0.0)
            .map(|(i, f)| (i, f.clone()))
            .collect();
        if ineq.strict {
            coeffs.push((n, -DMatrix::<f64>::identity(d, d)));
            strict_min = strict_min.min(min_eigenvalue(&ineq.evaluate(x_init))?);
        }
        terms.push(BarrierTerm {
            base: ineq.constant.clone(),
            coeffs,
            is_objective: false,
        });
    }
    if !strict_min.is_finite() {
        // no strict blocks: nothing to maximize
        return Ok((x_init.clone(), strict_min));
    }
    let t0 = strict_min - 0.5 * strict_min.abs().max(1e-12);
    let mut x0 = DVector::<f64>::zeros(n + 1);
    x0.rows_mut(0, n).copy_from(x_init);
    x0[n] = t0;
    let mut lin = DVector::<f64>::zeros(n + 1);
    lin[n] = 1.0;
    let mu0 = 1.0 + t0.abs();
    let x = follow_central_path(&terms, &lin, x0, mu0, mu0 * 1e-12)?;
    let t = x[n];
    Ok((x.rows(0, n).into_owned(), t))
}

/// Central path for a linear or log-det objective over the margin-shifted
/// system, started from a strictly interior point.
fn stage_objective(
    system: &[AffineMatrixInequality],
    objective: &Objective,
    margin: f64,
    x_init: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = x_init.len();
    let mut terms = Vec::with_capacity(system.len() + 1);
    for ineq in system {
        let d = ineq.constant.nrows();
        let shift = if ineq.strict { margin } else { 0.0 };
        let coeffs: Vec<(usize, DMatrix<f64>)> = ineq
            .coefficients
            .iter()
            .enumerate()
            .filter(|(_, f)| f.amax() != 0.0)
            .map(|(i, f)| (i, f.clone()))
            .collect();
        terms.push(BarrierTerm {
            base: &ineq.constant - DMatrix::<f64>::identity(d, d) * shift,
            coeffs,
            is_objective: false,
        });
    }
    let mut lin = DVector::<f64>::zeros(n);
    match objective {
        Objective::MaxLinear(c) => {
            if c.len() != n {
                return Err(Error::Dimension(format!(
                    "linear objective has {} entries, system has {n} variables",
                    c.len()
                )));
            }
            lin = c.clone();
        }
        Objective::MaxLogDet(expr) => {
            if expr.coefficients.len() != n {
                return Err(Error::Dimension(format!(
                    "logdet objective has {} coefficient blocks, system has {n} variables",
                    expr.coefficients.len()
                )));
            }
            if min_eigenvalue(&expr.evaluate(x_init))? <= 0.0 {
                return Err(Error::Numerical(
                    "logdet objective is not positive definite at the interior point".into(),
                ));
            }
            let coeffs = expr
                .coefficients
                .iter()
                .enumerate()
                .filter(|(_, f)| f.amax() != 0.0)
                .map(|(i, f)| (i, f.clone()))
                .collect();
            terms.push(BarrierTerm {
                base: expr.constant.clone(),
                coeffs,
                is_objective: true,
            });
        }
        _ => unreachable!("stage_objective only handles linear/logdet objectives"),
    }
    let mu0 = 1.0 + lin.dot(x_init).abs();
    follow_central_path(&terms, &lin, x_init.clone(), mu0, mu0 * 1e-12)
}

fn strict_margin_at(system: &[AffineMatrixInequality], x: &DVector<f64>) -> Result<f64> {
    let mut m = f64::INFINITY;
    let mut any_strict = false;
    for ineq in system {
        if ineq.strict {
            any_strict = true;
            m = m.min(min_eigenvalue(&ineq.evaluate(x))?);
        }
    }
    if !any_strict {
        for ineq in system {
            m = m.min(min_eigenvalue(&ineq.evaluate(x))?);
        }
    }
    Ok(m)
}

/// Solves the affine matrix-inequality system.
///
/// Strict blocks must reach a minimum eigenvalue of `margin`; nonstrict
/// blocks only need semidefiniteness. Infeasibility is reported as a status
/// together with the best margin achieved. Identical inputs produce
/// identical solutions.
pub fn solve_sdp(
    system: &[AffineMatrixInequality],
    objective: &Objective,
    margin: f64,
) -> Result<SdpSolution> {
    if system.is_empty() {
        return Err(Error::InvalidParameter("empty inequality system".into()));
    }
    let n = system[0].coefficients.len();
    if n == 0 {
        return Err(Error::InvalidParameter(
            "system must have at least one variable".into(),
        ));
    }
    for (j, ineq) in system.iter().enumerate() {
        if ineq.coefficients.len() != n {
            return Err(Error::Dimension(format!(
                "inequality {j} has {} coefficient blocks, expected {n}",
                ineq.coefficients.len()
            )));
        }
    }
    if !(margin.is_finite() && margin >= 0.0) {
        return Err(Error::InvalidParameter(
            "margin must be nonnegative and finite".into(),
        ));
    }

    let numerical_failure = |x: DVector<f64>| -> Result<SdpSolution> {
        let achieved = strict_margin_at(system, &x).unwrap_or(f64::NEG_INFINITY);
        Ok(SdpSolution {
            variables: x,
            achieved_margin: achieved,
            objective_value: f64::NAN,
            status: SdpStatus::NumericalFailure,
        })
    };

    // Stage A: find a strictly interior point (or the best common shift).
    let (x_a, t_a) = match stage_interior(system, n) {
        Ok(v) => v,
        Err(Error::Numerical(_)) => return numerical_failure(DVector::zeros(n)),
        Err(e) => return Err(e),
    };
    let feas_tol = FEASIBILITY_TOL * (1.0 + margin.abs() + t_a.abs());
    if t_a <= feas_tol {
        let achieved = strict_margin_at(system, &x_a)?;
        return Ok(SdpSolution {
            variables: x_a,
            achieved_margin: achieved,
            objective_value: achieved,
            status: SdpStatus::Infeasible,
        });
    }

    match objective {
        Objective::Feasibility | Objective::MaxMargin => {
            let (x_b, t_b) = match stage_max_margin(system, n, &x_a) {
                Ok(v) => v,
                Err(Error::Numerical(_)) => return numerical_failure(x_a),
                Err(e) => return Err(e),
            };
            let achieved = strict_margin_at(system, &x_b)?;
            let status = if achieved >= margin - feas_tol {
                match objective {
                    Objective::MaxMargin => SdpStatus::Optimal,
                    _ => SdpStatus::Feasible,
                }
            } else {
                SdpStatus::Infeasible
            };
            Ok(SdpSolution {
                variables: x_b,
                achieved_margin: achieved,
                objective_value: t_b,
                status,
            })
        }
        Objective::MaxLinear(_) | Objective::MaxLogDet(_) => {
            // The objective stage needs strict blocks clear of the margin.
            let x_start = if t_a > margin + feas_tol {
                x_a
            } else {
                let (x_b, _) = match stage_max_margin(system, n, &x_a) {
                    Ok(v) => v,
                    Err(Error::Numerical(_)) => return numerical_failure(x_a),
                    Err(e) => return Err(e),
                };
                let m_b = strict_margin_at(system, &x_b)?;
                if m_b <= margin + feas_tol {
                    return Ok(SdpSolution {
                        variables: x_b,
                        achieved_margin: m_b,
                        objective_value: m_b,
                        status: SdpStatus::Infeasible,
                    });
                }
                x_b
            };
            let x = match stage_objective(system, objective, margin, &x_start) {
                Ok(v) => v,
                Err(Error::Numerical(_)) => return numerical_failure(x_start),
                Err(e) => return Err(e),
            };
            let achieved = strict_margin_at(system, &x)?;
            let objective_value = match objective {
                Objective::MaxLinear(c) => c.dot(&x),
                Objective::MaxLogDet(expr) => match cholesky_logdet(&expr.evaluate(&x)) {
                    Some((_, ld)) => ld,
                    None => return numerical_failure(x),
                },
                _ => unreachable!(),
            };
            let status = if achieved >= margin - feas_tol {
                SdpStatus::Optimal
            } else {
                SdpStatus::Infeasible
            };
            Ok(SdpSolution {
                variables: x,
                achieved_margin: achieved,
                objective_value,
                status,
            })
        }
    }
}

/// Writes the inequality system in a plain-text format: one `block` header
/// per inequality (dimension, strictness), then the constant block and each
/// coefficient block as whitespace-separated rows.
pub fn dump_system(system: &[AffineMatrixInequality], out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "# affine matrix inequality system v1")?;
    writeln!(out, "blocks {}", system.len())?;
    for (j, ineq) in system.iter().enumerate() {
        let d = ineq.constant.nrows();
        writeln!(
            out,
            "block {j} dim {d} strict {} vars {}",
            ineq.strict as u8,
            ineq.coefficients.len()
        )?;
        write_matrix(out, "constant", &ineq.constant)?;
        for (i, f) in ineq.coefficients.iter().enumerate() {
            write_matrix(out, &format!("coeff {i}"), f)?;
        }
    }
    Ok(())
}

fn write_matrix(out: &mut dyn Write, label: &str, m: &DMatrix<f64>) -> std::io::Result<()> {
    writeln!(out, "{label}")?;
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    Ok(())
}
