//! Regulator equations, feedback-gain synthesis and closed-loop verification.
//!
//! The regulator (Sylvester) pair `(Pi, Gamma)` solves
//! `Pi S = Abar Pi + Bbar Gamma + E` and `Cbar Pi = O`; it yields the
//! steady-state trajectories `x_ss = Pi w`, `u_ss = Gamma w` with zero output
//! error. Gain synthesis then solves three matrix-inequality families in
//! `(Z, Y)`: a contraction block plus one containment block per polytope
//! row. It recovers `Kx = Y Z^-1`, `P = Z^-1`, `Kw = Gamma - Kx Pi`.
//! Everything the synthesis promises is re-checked independently by
//! [`verify_controller`] through plain eigenvalue evaluations.

use nalgebra::{DMatrix, DVector, RowSVector};

use crate::conic::{
    min_eigenvalue, solve_sdp, AffineMatrixInequality, MatrixExpr, Objective, SdpStatus,
};
use crate::error::{Error, Result};
use crate::model::{spectral_radius, LinearModel, Mat6, Mat6x8};

pub type Row6 = RowSVector<f64, 6>;

/// Near-singularity threshold for the vectorized regulator system.
const REGULATOR_COND_LIMIT: f64 = 1e12;
/// Strictness floor for the synthesis matrix inequalities, scaled by the
/// squared state bound.
const SYNTHESIS_MARGIN: f64 = 1e-8;

/// Solution of the regulator equations with its residuals (relative to the
/// Frobenius norms of `E` and `O`).
#[derive(Debug, Clone, PartialEq)]
pub struct SylvesterSolution {
    /// Steady-state state map (states per exogenous), 6x8.
    pub pi: Mat6x8,
    /// Steady-state input map (inputs per exogenous), 6x8.
    pub gamma: Mat6x8,
    /// Relative residual of the dynamics equation.
    pub residual_dynamics: f64,
    /// Relative residual of the output equation.
    pub residual_output: f64,
}

/// Row-normalized polytopes for the state and input tracking errors: each row
/// `g` encodes the half-space `g . e <= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorPolytopes {
    pub state_rows: Vec<Row6>,
    pub input_rows: Vec<Row6>,
}

impl ErrorPolytopes {
    pub fn new(state_rows: Vec<Row6>, input_rows: Vec<Row6>) -> Result<Self> {
        for (what, rows) in [("state", &state_rows), ("input", &input_rows)] {
            if rows.is_empty() {
                return Err(Error::InvalidParameter(format!(
                    "{what} polytope needs at least one row"
                )));
            }
            for (i, r) in rows.iter().enumerate() {
                if !r.iter().all(|v| v.is_finite()) || r.norm() == 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "{what} polytope row {i} must be finite and nonzero"
                    )));
                }
            }
        }
        Ok(ErrorPolytopes {
            state_rows,
            input_rows,
        })
    }

    /// Largest per-row bound `1/|g|`, used for scale-aware margins.
    fn max_state_bound(&self) -> f64 {
        self.state_rows
            .iter()
            .map(|r| 1.0 / r.norm())
            .fold(0.0, f64::max)
    }
}

/// Symmetric box polytopes `|e_i| <= fraction * nominal` for all six state
/// and input coordinates, normalized so each constraint reads `row . e <= 1`.
pub fn build_box_polytopes(
    state_fraction: f64,
    input_fraction: f64,
    state_nominal: f64,
    input_nominal: f64,
) -> Result<ErrorPolytopes> {
    for (name, v) in [
        ("state_fraction", state_fraction),
        ("input_fraction", input_fraction),
        ("state_nominal", state_nominal),
        ("input_nominal", input_nominal),
    ] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "{name} must be strictly positive, got {v}"
            )));
        }
    }
    let mut state_rows = Vec::with_capacity(12);
    let mut input_rows = Vec::with_capacity(12);
    for i in 0..6 {
        for sign in [1.0, -1.0] {
            let mut gs = Row6::zeros();
            gs[i] = sign / (state_fraction * state_nominal);
            state_rows.push(gs);
            let mut hs = Row6::zeros();
            hs[i] = sign / (input_fraction * input_nominal);
            input_rows.push(hs);
        }
    }
    ErrorPolytopes::new(state_rows, input_rows)
}

/// Static feedback controller: `u = kx x + kw w`, with invariant level set
/// `{e : e' p e <= 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    pub kx: Mat6,
    pub kw: Mat6x8,
    pub p: Mat6,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthesisObjective {
    /// Maximize the volume of the invariant level set (log-det of `Z`).
    MaxLogDet,
    /// Maximize the worst strict-block eigenvalue.
    MaxMargin,
}

#[derive(Debug, Clone)]
pub struct SynthesisOptions {
    pub objective: SynthesisObjective,
    /// Pre-computed feedback gain; when present only `Z` is solved for.
    pub fixed_kx: Option<Mat6>,
    /// Force the full 6-state solve even when the problem decomposes per
    /// phase.
    pub monolithic: bool,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions {
            objective: SynthesisObjective::MaxLogDet,
            fixed_kx: None,
            monolithic: false,
        }
    }
}

/// Independent evaluation of every property the synthesis guarantees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerificationReport {
    /// Spectral radius of the closed-loop error dynamics.
    pub spectral_radius: f64,
    /// Minimum eigenvalue of `P - Acl' P Acl`.
    pub contraction_margin: f64,
    /// `max_t g_t' P^-1 g_t`; at most 1 when the level set fits the state
    /// polytope.
    pub max_state_quadratic: f64,
    /// `max_t h_t' Kx P^-1 Kx' h_t`; at most 1 when the input image fits.
    pub max_input_quadratic: f64,
    pub pass: bool,
}

fn to_dyn<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_fn(R, C, |i, j| m[(i, j)])
}

/// Solves the regulator equations by vectorizing both into one linear system
/// over `(vec Pi, vec Gamma)` using the Kronecker identities.
pub fn solve_regulator_equations(model: &LinearModel) -> Result<SylvesterSolution> {
    let a = to_dyn(&model.a_bar);
    let b = to_dyn(&model.b_bar);
    let c = to_dyn(&model.c_bar);
    let e = to_dyn(&model.e);
    let s = to_dyn(&model.s);
    let o = to_dyn(&model.o);
    let (n, nw) = (6usize, 8usize);
    let id_n = DMatrix::<f64>::identity(n, n);
    let id_w = DMatrix::<f64>::identity(nw, nw);

    // vec(Pi S) = (S' (x) I) vec(Pi); vec(A Pi) = (I (x) A) vec(Pi); etc.
    let mut sys = DMatrix::<f64>::zeros(2 * n * nw, 2 * n * nw);
    sys.view_mut((0, 0), (n * nw, n * nw))
        .copy_from(&(s.transpose().kronecker(&id_n) - id_w.kronecker(&a)));
    sys.view_mut((0, n * nw), (n * nw, n * nw))
        .copy_from(&(-id_w.kronecker(&b)));
    sys.view_mut((n * nw, 0), (n * nw, n * nw))
        .copy_from(&id_w.kronecker(&c));

    let mut rhs = DVector::<f64>::zeros(2 * n * nw);
    rhs.rows_mut(0, n * nw)
        .copy_from(&DVector::from_iterator(n * nw, e.iter().cloned()));
    rhs.rows_mut(n * nw, n * nw)
        .copy_from(&DVector::from_iterator(n * nw, o.iter().cloned()));

    let lu = sys.clone().lu();
    let sol = lu.solve(&rhs).ok_or_else(|| {
        let sv = sys.clone().svd(false, false).singular_values;
        Error::Numerical(format!(
            "regulator system is singular (condition estimate {:.3e}); an exogenous \
             frequency coincides with a transmission zero",
            sv.max() / sv.min().max(f64::MIN_POSITIVE)
        ))
    })?;

    let pi = Mat6x8::from_fn(|i, j| sol[j * n + i]);
    let gamma = Mat6x8::from_fn(|i, j| sol[n * nw + j * n + i]);

    let dyn_res = (pi * model.s - model.a_bar * pi - model.b_bar * gamma - model.e).norm();
    let out_res = (model.c_bar * pi - model.o).norm();
    let e_norm = model.e.norm();
    let o_norm = model.o.norm();
    let residual_dynamics = if e_norm > 0.0 {
        dyn_res / e_norm
    } else {
        dyn_res
    };
    let residual_output = if o_norm > 0.0 {
        out_res / o_norm
    } else {
        out_res
    };

    if !(residual_dynamics.is_finite() && residual_output.is_finite()) {
        return Err(Error::Numerical("regulator residuals not finite".into()));
    }
    if residual_dynamics > 1.0 / REGULATOR_COND_LIMIT.sqrt()
        || residual_output > 1.0 / REGULATOR_COND_LIMIT.sqrt()
    {
        let sv = sys.svd(false, false).singular_values;
        return Err(Error::Numerical(format!(
            "regulator system near-singular: residuals ({residual_dynamics:.3e}, \
             {residual_output:.3e}), condition estimate {:.3e}",
            sv.max() / sv.min().max(f64::MIN_POSITIVE)
        )));
    }

    Ok(SylvesterSolution {
        pi,
        gamma,
        residual_dynamics,
        residual_output,
    })
}

/// Index of the upper-triangle entry (i, j), i <= j, in the packed symmetric
/// layout (column by column).
fn sym_index(i: usize, j: usize) -> usize {
    debug_assert!(i <= j);
    j * (j + 1) / 2 + i
}

fn sym_count(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Basis matrix of the packed symmetric entry (i, j).
fn sym_basis(n: usize, i: usize, j: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    m[(i, j)] = 1.0;
    m[(j, i)] = 1.0;
    m
}

/// Synthesis problem over one block of states: `Z` symmetric (packed), `Y`
/// full, or `Z` only when the gain is fixed.
struct GainProblem {
    n: usize,
    fixed_kx: Option<DMatrix<f64>>,
    system: Vec<AffineMatrixInequality>,
    /// Human-readable family name per system block, for diagnostics.
    families: Vec<String>,
    z_expr: MatrixExpr,
}

impl GainProblem {
    fn build(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        g_rows: &[DVector<f64>],
        h_rows: &[DVector<f64>],
        fixed_kx: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let n = a.nrows();
        let nz = sym_count(n);
        let nvars = if fixed_kx.is_some() { nz } else { nz + n * n };

        // Variable layout: packed Z first, then Y row-major when free.
        let z_block = |v: usize| -> Option<DMatrix<f64>> {
            if v >= nz {
                return None;
            }
            for j in 0..n {
                for i in 0..=j {
                    if sym_index(i, j) == v {
                        return Some(sym_basis(n, i, j));
                    }
                }
            }
            unreachable!()
        };
        // Effective Y contribution of variable v, folding any fixed gain in.
        let y_of = |v: usize| -> Option<DMatrix<f64>> {
            match (&fixed_kx, v < nz) {
                (Some(kx), true) => z_block(v).map(|zb| kx * zb),
                (Some(_), false) => None,
                (None, true) => None,
                (None, false) => {
                    let idx = v - nz;
                    let (i, j) = (idx / n, idx % n);
                    let mut m = DMatrix::zeros(n, n);
                    m[(i, j)] = 1.0;
                    Some(m)
                }
            }
        };

        let mut system = Vec::new();
        let mut families = Vec::new();

        // Z positive definite.
        let z_coeffs: Vec<DMatrix<f64>> = (0..nvars)
            .map(|v| z_block(v).unwrap_or_else(|| DMatrix::zeros(n, n)))
            .collect();
        system.push(AffineMatrixInequality::new(
            DMatrix::zeros(n, n),
            z_coeffs.clone(),
            true,
        )?);
        families.push("level-set positivity".into());

        // Contraction block [[Z, (A Z + B Y)'], [A Z + B Y, Z]].
        let mut blocks = Vec::with_capacity(nvars);
        for v in 0..nvars {
            let zb = z_block(v).unwrap_or_else(|| DMatrix::zeros(n, n));
            let mut off = &a * &zb;
            if let Some(yb) = y_of(v) {
                off += &b * &yb;
            }
            let mut m = DMatrix::zeros(2 * n, 2 * n);
            m.view_mut((0, 0), (n, n)).copy_from(&zb);
            m.view_mut((0, n), (n, n)).copy_from(&off.transpose());
            m.view_mut((n, 0), (n, n)).copy_from(&off);
            m.view_mut((n, n), (n, n)).copy_from(&zb);
            blocks.push(m);
        }
        system.push(AffineMatrixInequality::new(
            DMatrix::zeros(2 * n, 2 * n),
            blocks,
            true,
        )?);
        families.push("contraction".into());

        // Per state row: [[Z, Z g], [(Z g)', 1]] >= 0.
        for (t, g) in g_rows.iter().enumerate() {
            let mut coeffs = Vec::with_capacity(nvars);
            for v in 0..nvars {
                let mut m = DMatrix::zeros(n + 1, n + 1);
                if let Some(zb) = z_block(v) {
                    let zg = &zb * g;
                    m.view_mut((0, 0), (n, n)).copy_from(&zb);
                    m.view_mut((0, n), (n, 1)).copy_from(&zg);
                    m.view_mut((n, 0), (1, n)).copy_from(&zg.transpose());
                }
                coeffs.push(m);
            }
            let mut base = DMatrix::zeros(n + 1, n + 1);
            base[(n, n)] = 1.0;
            system.push(AffineMatrixInequality::new(base, coeffs, false)?);
            families.push(format!("state-error containment row {t}"));
        }

        // Per input row: [[Z, Y' h], [(Y' h)', 1]] >= 0.
        for (t, h) in h_rows.iter().enumerate() {
            let mut coeffs = Vec::with_capacity(nvars);
            for v in 0..nvars {
                let mut m = DMatrix::zeros(n + 1, n + 1);
                if let Some(zb) = z_block(v) {
                    m.view_mut((0, 0), (n, n)).copy_from(&zb);
                }
                if let Some(yb) = y_of(v) {
                    let yh = yb.transpose() * h;
                    m.view_mut((0, n), (n, 1)).copy_from(&yh);
                    m.view_mut((n, 0), (1, n)).copy_from(&yh.transpose());
                }
                coeffs.push(m);
            }
            let mut base = DMatrix::zeros(n + 1, n + 1);
            base[(n, n)] = 1.0;
            system.push(AffineMatrixInequality::new(base, coeffs, false)?);
            families.push(format!("input-image row {t}"));
        }

        let z_expr = MatrixExpr {
            constant: DMatrix::zeros(n, n),
            coefficients: z_coeffs,
        };

        Ok(GainProblem {
            n,
            fixed_kx,
            system,
            families,
            z_expr,
        })
    }

    /// Solves for `(Z, Y)` and recovers `(Kx, P)`.
    fn solve(
        &self,
        objective: SynthesisObjective,
        margin: f64,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let obj = match objective {
            SynthesisObjective::MaxLogDet => Objective::MaxLogDet(self.z_expr.clone()),
            SynthesisObjective::MaxMargin => Objective::MaxMargin,
        };
        let sol = solve_sdp(&self.system, &obj, margin)?;
        match sol.status {
            SdpStatus::Optimal | SdpStatus::Feasible => {}
            SdpStatus::Infeasible => {
                // name the most violated family at the best point found
                let mut worst = (0usize, f64::INFINITY);
                for (j, ineq) in self.system.iter().enumerate() {
                    let m = min_eigenvalue(&ineq.evaluate(&sol.variables))?;
                    if m < worst.1 {
                        worst = (j, m);
                    }
                }
                return Err(Error::Infeasible(format!(
                    "gain synthesis infeasible: best margin {:.3e}, most violated family \
                     '{}' (min eigenvalue {:.3e})",
                    sol.achieved_margin, self.families[worst.0], worst.1
                )));
            }
            SdpStatus::NumericalFailure => {
                return Err(Error::Numerical("gain synthesis failed numerically".into()));
            }
        }
        let n = self.n;
        let z = self.z_expr.evaluate(&sol.variables);
        let chol = nalgebra::Cholesky::new(z.clone())
            .ok_or_else(|| Error::Numerical("synthesized Z not positive definite".into()))?;
        let p = chol.inverse();
        let kx = match &self.fixed_kx {
            Some(kx) => kx.clone(),
            None => {
                let nz = sym_count(n);
                let y = DMatrix::from_fn(n, n, |i, j| sol.variables[nz + i * n + j]);
                &y * &p
            }
        };
        Ok((kx, p))
    }
}

/// Splits polytope rows per phase when every row touches only one phase's
/// coordinate pair; returns None when rows couple phases.
fn split_rows_per_phase(rows: &[Row6]) -> Option<[Vec<DVector<f64>>; 3]> {
    let mut out: [Vec<DVector<f64>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for row in rows {
        let mut phase: Option<usize> = None;
        for m in 0..3 {
            if row[2 * m] != 0.0 || row[2 * m + 1] != 0.0 {
                if phase.is_some() {
                    return None;
                }
                phase = Some(m);
            }
        }
        let m = phase?; // all-zero rows are rejected at construction
        out[m].push(DVector::from_vec(vec![row[2 * m], row[2 * m + 1]]));
    }
    Some(out)
}

fn phase_block_of(m6: &Mat6, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(2, 2, |i, j| m6[(2 * m + i, 2 * m + j)])
}

fn is_phase_block_diagonal(m6: &Mat6) -> bool {
    for m in 0..3 {
        for i in 0..2 {
            for j in 0..6 {
                let inside = (2 * m..2 * m + 2).contains(&j);
                if !inside && m6[(2 * m + i, j)] != 0.0 {
                    return false;
                }
            }
        }
    }
    true
}

/// Synthesizes the static feedback controller.
///
/// The plant's per-phase block-diagonal structure is exploited whenever the
/// polytopes (and any fixed gain) decompose per phase: three 2-state
/// problems are solved and reassembled. The monolithic 6-state solve stays
/// available as a cross-check via [`SynthesisOptions::monolithic`].
pub fn synthesize(
    model: &LinearModel,
    polytopes: &ErrorPolytopes,
    options: &SynthesisOptions,
) -> Result<Controller> {
    let sylvester = solve_regulator_equations(model)?;
    let margin = SYNTHESIS_MARGIN * polytopes.max_state_bound().powi(2).max(1.0);

    let per_phase = if options.monolithic {
        None
    } else {
        let decomposable = options
            .fixed_kx
            .map(|kx| is_phase_block_diagonal(&kx))
            .unwrap_or(true);
        if decomposable {
            split_rows_per_phase(&polytopes.state_rows)
                .zip(split_rows_per_phase(&polytopes.input_rows))
        } else {
            None
        }
    };

    let (kx, p) = match per_phase {
        Some((g_phases, h_phases))
            if g_phases.iter().all(|v| !v.is_empty()) && h_phases.iter().all(|v| !v.is_empty()) =>
        {
            let mut kx6 = Mat6::zeros();
            let mut p6 = Mat6::zeros();
            for m in 0..3 {
                let problem = GainProblem::build(
                    phase_block_of(&model.a_bar, m),
                    phase_block_of(&model.b_bar, m),
                    &g_phases[m],
                    &h_phases[m],
                    options.fixed_kx.as_ref().map(|kx| phase_block_of(kx, m)),
                )?;
                let (kxm, pm) = problem.solve(options.objective, margin)?;
                for i in 0..2 {
                    for j in 0..2 {
                        kx6[(2 * m + i, 2 * m + j)] = kxm[(i, j)];
                        p6[(2 * m + i, 2 * m + j)] = pm[(i, j)];
                    }
                }
            }
            (kx6, p6)
        }
        _ => {
            let g_rows: Vec<DVector<f64>> = polytopes
                .state_rows
                .iter()
                .map(|r| DVector::from_iterator(6, r.iter().cloned()))
                .collect();
            let h_rows: Vec<DVector<f64>> = polytopes
                .input_rows
                .iter()
                .map(|r| DVector::from_iterator(6, r.iter().cloned()))
                .collect();
            let problem = GainProblem::build(
                to_dyn(&model.a_bar),
                to_dyn(&model.b_bar),
                &g_rows,
                &h_rows,
                options.fixed_kx.as_ref().map(to_dyn),
            )?;
            let (kx, p) = problem.solve(options.objective, margin)?;
            (
                Mat6::from_fn(|i, j| kx[(i, j)]),
                Mat6::from_fn(|i, j| p[(i, j)]),
            )
        }
    };

    let kw = sylvester.gamma - kx * sylvester.pi;
    Ok(Controller { kx, kw, p })
}

/// Re-checks the four closed-loop guarantees by direct evaluation: spectral
/// radius, Lyapunov contraction, level-set containment in the state polytope
/// and input-image containment.
pub fn verify_controller(
    model: &LinearModel,
    controller: &Controller,
    polytopes: &ErrorPolytopes,
) -> Result<VerificationReport> {
    let acl = model.a_bar + model.b_bar * controller.kx;
    let rho = spectral_radius(&acl);

    let p_dyn = to_dyn(&controller.p);
    let contraction = &p_dyn - to_dyn(&acl).transpose() * &p_dyn * to_dyn(&acl);
    let contraction_margin = min_eigenvalue(&contraction)?;

    let p_inv = nalgebra::Cholesky::new(p_dyn)
        .ok_or_else(|| Error::Numerical("level-set matrix P not positive definite".into()))?
        .inverse();

    let mut max_state = f64::NEG_INFINITY;
    for g in &polytopes.state_rows {
        let gd = DVector::from_iterator(6, g.iter().cloned());
        max_state = max_state.max((gd.transpose() * &p_inv * &gd)[(0, 0)]);
    }
    let kx_dyn = to_dyn(&controller.kx);
    let image = &kx_dyn * &p_inv * kx_dyn.transpose();
    let mut max_input = f64::NEG_INFINITY;
    for h in &polytopes.input_rows {
        let hd = DVector::from_iterator(6, h.iter().cloned());
        max_input = max_input.max((hd.transpose() * &image * &hd)[(0, 0)]);
    }

    let pass = rho < 1.0 && contraction_margin > 0.0 && max_state <= 1.0 && max_input <= 1.0;
    Ok(VerificationReport {
        spectral_radius: rho,
        contraction_margin,
        max_state_quadratic: max_state,
        max_input_quadratic: max_input,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_linear_model, CircuitParams, ExogenousState, PortSpec, Vec6, Vec8};
    use crate::refgen::{build_output_map, solve_sigma_reference};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn mv_params() -> CircuitParams {
        CircuitParams::new(3e-3, 0.05, 4e-3, 1, 2e-5).unwrap()
    }

    fn mv_ports() -> PortSpec {
        PortSpec::new(25e3, 50.0, 0.0, 10e3, 1000.0, 0.0, 80.0, None).unwrap()
    }

    fn mv_model() -> (CircuitParams, PortSpec, LinearModel, f64) {
        let params = mv_params();
        let spec = mv_ports();
        let sigma = solve_sigma_reference(&params, &spec).unwrap();
        let map = build_output_map(&spec, &sigma).unwrap();
        let model = build_linear_model(&params, &spec, &map.matrix()).unwrap();
        (params, spec, model, sigma.amplitude())
    }

    fn mv_polytopes(sigma_amplitude: f64) -> ErrorPolytopes {
        let spec = mv_ports();
        build_box_polytopes(
            0.1,
            0.08,
            spec.grid_peak_current + sigma_amplitude,
            spec.voltage_scale(),
        )
        .unwrap()
    }

    #[test]
    fn regulator_homogeneous_system_is_zero() {
        let (_, _, mut model, _) = mv_model();
        model.e = Mat6x8::zeros();
        model.o = Mat6x8::zeros();
        let sol = solve_regulator_equations(&model).unwrap();
        assert_abs_diff_eq!(sol.pi, Mat6x8::zeros(), epsilon = 1e-12);
        assert_abs_diff_eq!(sol.gamma, Mat6x8::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn regulator_residuals_and_recursion() {
        let (_, spec, model, _) = mv_model();
        let sol = solve_regulator_equations(&model).unwrap();
        assert!(sol.residual_dynamics <= 1e-8, "{}", sol.residual_dynamics);
        assert!(sol.residual_output <= 1e-8, "{}", sol.residual_output);

        // x_ss(k) = Pi w(k) satisfies the one-step recursion exactly, and the
        // steady-state output equals the reference pointwise.
        let mut w: Vec8 = ExogenousState::from_port_spec(&spec, 0.2).0;
        for _ in 0..500 {
            let x_ss = sol.pi * w;
            let u_ss = sol.gamma * w;
            let w_next = model.s * w;
            let x_next = model.a_bar * x_ss + model.b_bar * u_ss + model.e * w;
            assert_abs_diff_eq!(x_next, sol.pi * w_next, epsilon = 1e-8);
            assert_abs_diff_eq!(model.c_bar * x_ss, model.o * w, epsilon = 1e-9);
            w = w_next;
        }
    }

    #[test]
    fn box_polytope_examples() {
        let p = build_box_polytopes(0.1, 0.08, 181.15, 35e3).unwrap();
        assert_eq!(p.state_rows.len(), 12);
        assert_eq!(p.input_rows.len(), 12);
        // bound per coordinate: 18.115 A and 2.8 kV
        assert_relative_eq!(1.0 / p.state_rows[0].norm(), 18.115, max_relative = 1e-12);
        assert_relative_eq!(1.0 / p.input_rows[0].norm(), 2800.0, max_relative = 1e-12);
        // a point on a face touches exactly one row at 1
        let mut e = Vec6::zeros();
        e[0] = 18.115;
        let max_row = p
            .state_rows
            .iter()
            .map(|g| (g * e)[(0, 0)])
            .fold(f64::NEG_INFINITY, f64::max);
        assert_relative_eq!(max_row, 1.0, max_relative = 1e-12);
        assert!(build_box_polytopes(0.0, 0.08, 1.0, 1.0).is_err());
    }

    #[test]
    fn synthesized_controller_verifies() {
        let (_, _, model, amp) = mv_model();
        let polytopes = mv_polytopes(amp);
        let controller = synthesize(&model, &polytopes, &SynthesisOptions::default()).unwrap();
        let report = verify_controller(&model, &controller, &polytopes).unwrap();
        assert!(report.pass, "{report:?}");
        assert!(report.spectral_radius < 1.0);
        assert!(report.contraction_margin > 0.0);
        assert!(report.max_state_quadratic <= 1.0);
        assert!(report.max_input_quadratic <= 1.0);
    }

    #[test]
    fn fixed_gain_reproduces_reported_decay() {
        let (params, _, model, amp) = mv_model();
        let polytopes = mv_polytopes(amp);
        let kx = Mat6::identity() * -148.62;
        let options = SynthesisOptions {
            fixed_kx: Some(kx),
            ..Default::default()
        };
        let controller = synthesize(&model, &polytopes, &options).unwrap();
        assert_eq!(controller.kx, kx);
        let acl = model.a_bar + model.b_bar * controller.kx;
        let rho = spectral_radius(&acl);
        let d = params.discretization_constants();
        let expected = (d.current_decay - 148.62 * d.voltage_to_current).abs();
        assert_relative_eq!(rho, expected, max_relative = 1e-9);
        assert_relative_eq!(rho, 0.0089, max_relative = 0.01);
    }

    #[test]
    fn feedforward_identity() {
        // u = Kx x + Kw w equals u_ss + Kx (x - x_ss) for any state and w.
        let (_, spec, model, amp) = mv_model();
        let polytopes = mv_polytopes(amp);
        let controller = synthesize(&model, &polytopes, &SynthesisOptions::default()).unwrap();
        let sol = solve_regulator_equations(&model).unwrap();
        let w: Vec8 = ExogenousState::from_port_spec(&spec, 1.1).0;
        let x = Vec6::new(3.0, -1.0, 0.5, 2.0, -4.0, 1.5);
        let direct = controller.kx * x + controller.kw * w;
        let via_ss = sol.gamma * w + controller.kx * (x - sol.pi * w);
        assert_abs_diff_eq!(direct, via_ss, epsilon = 1e-9 * direct.norm().max(1.0));
    }

    #[test]
    fn per_phase_and_monolithic_agree() {
        let (_, _, model, amp) = mv_model();
        let polytopes = mv_polytopes(amp);
        let per_phase = synthesize(&model, &polytopes, &SynthesisOptions::default()).unwrap();
        let mono = synthesize(
            &model,
            &polytopes,
            &SynthesisOptions {
                monolithic: true,
                ..Default::default()
            },
        )
        .unwrap();
        // the max-logdet Z is unique; both routes must land on it
        assert_relative_eq!(per_phase.p, mono.p, max_relative = 1e-4);
        let rp = verify_controller(&model, &per_phase, &polytopes).unwrap();
        let rm = verify_controller(&model, &mono, &polytopes).unwrap();
        assert!(rp.pass && rm.pass);
    }

    #[test]
    fn verify_open_loop_stable_plant() {
        let (_, _, model, amp) = mv_model();
        let polytopes = mv_polytopes(amp);
        let controller = Controller {
            kx: Mat6::zeros(),
            kw: Mat6x8::zeros(),
            p: Mat6::identity(),
        };
        let report = verify_controller(&model, &controller, &polytopes).unwrap();
        // contraction margin equals min eig(I - A'A) for P = I, Kx = 0
        let expected = min_eigenvalue(&to_dyn(
            &(Mat6::identity() - model.a_bar.transpose() * model.a_bar),
        ))
        .unwrap();
        assert_relative_eq!(report.contraction_margin, expected, max_relative = 1e-10);
        assert!(report.spectral_radius < 1.0);
    }

    #[test]
    fn boundary_row_touches_level_set() {
        // A row built as a Cholesky factor column of P sits exactly on the
        // containment boundary: g' P^-1 g = 1.
        let (_, _, model, amp) = mv_model();
        let polytopes = mv_polytopes(amp);
        let controller = synthesize(&model, &polytopes, &SynthesisOptions::default()).unwrap();
        let _ = model;
        let p_dyn = to_dyn(&controller.p);
        let chol = nalgebra::Cholesky::new(p_dyn.clone()).unwrap();
        let l = chol.l();
        let g = l.column(0).into_owned();
        let p_inv = chol.inverse();
        let q = (g.transpose() * p_inv * g)[(0, 0)];
        assert_relative_eq!(q, 1.0, max_relative = 1e-10);
    }

    #[test]
    fn error_dynamics_equivalence() {
        // Simulating the plant under u = Kx x + Kw w and subtracting Pi w
        // reproduces e+ = (A + B Kx) e.
        let (_, spec, model, amp) = mv_model();
        let polytopes = mv_polytopes(amp);
        let controller = synthesize(&model, &polytopes, &SynthesisOptions::default()).unwrap();
        let sol = solve_regulator_equations(&model).unwrap();
        let acl = model.a_bar + model.b_bar * controller.kx;
        let mut w: Vec8 = ExogenousState::from_port_spec(&spec, 0.0).0;
        let mut x = sol.pi * w + Vec6::new(5.0, -2.0, 1.0, 0.0, -3.0, 2.5);
        for _ in 0..200 {
            let e = x - sol.pi * w;
            let u = controller.kx * x + controller.kw * w;
            let x_next = model.a_bar * x + model.b_bar * u + model.e * w;
            let w_next = model.s * w;
            let e_next = x_next - sol.pi * w_next;
            assert_abs_diff_eq!(e_next, acl * e, epsilon = 1e-10 * e.norm().max(1.0));
            x = x_next;
            w = w_next;
        }
    }

    #[test]
    fn level_set_invariance() {
        // starting on the boundary of the level set, the error never leaves
        let (_, spec, model, amp) = mv_model();
        let polytopes = mv_polytopes(amp);
        let controller = synthesize(&model, &polytopes, &SynthesisOptions::default()).unwrap();
        let sol = solve_regulator_equations(&model).unwrap();
        let mut w: Vec8 = ExogenousState::from_port_spec(&spec, 0.0).0;
        let dir = Vec6::new(1.0, -0.6, 0.4, 0.9, -0.2, 0.7);
        let level = (dir.transpose() * controller.p * dir)[(0, 0)];
        let e0 = dir / level.sqrt() * 0.999;
        let mut x = sol.pi * w + e0;
        for _ in 0..10_000 {
            let e = x - sol.pi * w;
            let v = (e.transpose() * controller.p * e)[(0, 0)];
            assert!(v <= 1.0 + 1e-9, "level-set value {v} exceeded 1");
            let u = controller.kx * x + controller.kw * w;
            x = model.a_bar * x + model.b_bar * u + model.e * w;
            w = model.s * w;
        }
    }
}
