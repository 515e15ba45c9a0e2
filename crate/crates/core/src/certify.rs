//! Vertex certification of the bilinear current/voltage coupling: a common
//! quadratic form `Q` that contracts the per-phase deviation dynamics at
//! every corner of the insertion-index box certifies contraction over the
//! whole box, because the 8x8 certificate block is affine in the insertion
//! indices.
//!
//! The solve is scale-normalized by fixing `trace(Q)` to the block dimension,
//! which removes the ray ambiguity of the inequality system.

use nalgebra::DMatrix;

use crate::conic::{min_eigenvalue, solve_sdp, AffineMatrixInequality, Objective, SdpStatus};
use crate::error::{Error, Result};
use crate::model::{bilinear_phase_block, CircuitParams, Mat4, Vec8};

/// Common bounds applied to all six insertion indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulingBox {
    pub eta_low: f64,
    pub eta_high: f64,
}

impl SchedulingBox {
    pub fn new(eta_low: f64, eta_high: f64) -> Result<Self> {
        if !(eta_low.is_finite() && eta_high.is_finite())
            || !(-1.0..=1.0).contains(&eta_low)
            || !(-1.0..=1.0).contains(&eta_high)
            || eta_low >= eta_high
        {
            return Err(Error::InvalidParameter(format!(
                "scheduling box requires -1 <= low < high <= 1, got [{eta_low}, {eta_high}]"
            )));
        }
        Ok(SchedulingBox { eta_low, eta_high })
    }
}

/// The four corner pairs `(eta_upper, eta_lower)` of the box, in the fixed
/// order low/low, low/high, high/low, high/high.
pub fn enumerate_vertices(bounds: &SchedulingBox) -> [(f64, f64); 4] {
    let (lo, hi) = (bounds.eta_low, bounds.eta_high);
    [(lo, lo), (lo, hi), (hi, lo), (hi, hi)]
}

/// Per-phase certification outcome. The full 12-state certificate is the
/// threefold block diagonal of `q_phase`.
#[derive(Debug, Clone, PartialEq)]
pub struct CertificationResult {
    /// Certified quadratic form, 4x4 symmetric, trace-normalized.
    pub q_phase: Mat4,
    /// Minimum eigenvalue of the 8x8 certificate block at each vertex, in
    /// enumeration order.
    pub vertex_margins: [((f64, f64), f64); 4],
    pub feasible: bool,
    /// Margin the feasibility decision was made against.
    pub margin_used: f64,
    /// Most violated vertex and the eigendirection of its smallest
    /// eigenvalue; populated when infeasible.
    pub worst_vertex: Option<((f64, f64), Vec8)>,
}

/// Pure evaluation of a supplied quadratic form against the box vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct QCheck {
    /// Minimum eigenvalue of the form itself.
    pub q_min_eigenvalue: f64,
    /// Minimum eigenvalue of `Q - A(v)' Q A(v)` per vertex, in enumeration
    /// order.
    pub vertex_margins: [((f64, f64), f64); 4],
    /// True when the form is positive definite and every vertex margin is
    /// strictly positive.
    pub passes: bool,
}

fn to_dyn4(m: &Mat4) -> DMatrix<f64> {
    DMatrix::from_fn(4, 4, |i, j| m[(i, j)])
}

/// 8x8 certificate block `[[Q, Q A], [A' Q, Q]]`.
fn certificate_block(q: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    let qa = q * a;
    let mut m = DMatrix::zeros(8, 8);
    m.view_mut((0, 0), (4, 4)).copy_from(q);
    m.view_mut((0, 4), (4, 4)).copy_from(&qa);
    m.view_mut((4, 0), (4, 4)).copy_from(&qa.transpose());
    m.view_mut((4, 4), (4, 4)).copy_from(q);
    m
}

/// Basis of traceless symmetric 4x4 matrices (9 of them); `Q = I + sum x_i B_i`
/// spans every symmetric matrix with trace 4.
fn traceless_basis() -> Vec<DMatrix<f64>> {
    let mut basis = Vec::with_capacity(9);
    for k in 1..4 {
        let mut b = DMatrix::zeros(4, 4);
        b[(0, 0)] = 1.0;
        b[(k, k)] = -1.0;
        basis.push(b);
    }
    for i in 0..4 {
        for j in (i + 1)..4 {
            let mut b = DMatrix::zeros(4, 4);
            b[(i, j)] = 1.0;
            b[(j, i)] = 1.0;
            basis.push(b);
        }
    }
    basis
}

/// Searches for a trace-normalized `Q` that clears `margin` at every vertex
/// of the box; reports the best margins found when none exists.
pub fn certify_phase(
    params: &CircuitParams,
    bounds: &SchedulingBox,
    margin: f64,
) -> Result<CertificationResult> {
    if !(margin.is_finite() && margin >= 0.0) {
        return Err(Error::InvalidParameter(
            "certification margin must be nonnegative".into(),
        ));
    }
    let d = params.discretization_constants();
    let vertices = enumerate_vertices(bounds);
    let basis = traceless_basis();

    let mut system = Vec::with_capacity(5);
    // Q > 0 block: I + sum x_i B_i.
    system.push(AffineMatrixInequality::new(
        DMatrix::identity(4, 4),
        basis.clone(),
        true,
    )?);
    // One 8x8 certificate block per vertex.
    for &(eu, el) in &vertices {
        let a = to_dyn4(&bilinear_phase_block(&d, eu, el));
        let id4 = DMatrix::identity(4, 4);
        let base = certificate_block(&id4, &a);
        let coeffs: Vec<DMatrix<f64>> = basis.iter().map(|b| certificate_block(b, &a)).collect();
        system.push(AffineMatrixInequality::new(base, coeffs, true)?);
    }

    let sol = solve_sdp(&system, &Objective::MaxMargin, margin)?;
    if sol.status == SdpStatus::NumericalFailure {
        return Err(Error::Numerical("certification solve failed".into()));
    }
    let mut q_dyn = DMatrix::identity(4, 4);
    for (xi, b) in sol.variables.iter().zip(&basis) {
        q_dyn += b * *xi;
    }
    let q_phase = Mat4::from_fn(|i, j| q_dyn[(i, j)]);

    let mut vertex_margins = [((0.0, 0.0), 0.0); 4];
    let mut worst: Option<((f64, f64), Vec8, f64)> = None;
    for (idx, &(eu, el)) in vertices.iter().enumerate() {
        let a = to_dyn4(&bilinear_phase_block(&d, eu, el));
        let block = certificate_block(&q_dyn, &a);
        let sym = (&block + block.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let (mut min_val, mut min_idx) = (f64::INFINITY, 0);
        for (i, ev) in eig.eigenvalues.iter().enumerate() {
            if *ev < min_val {
                min_val = *ev;
                min_idx = i;
            }
        }
        vertex_margins[idx] = ((eu, el), min_val);
        if worst.as_ref().map(|w| min_val < w.2).unwrap_or(true) {
            let dir = Vec8::from_fn(|i, _| eig.eigenvectors[(i, min_idx)]);
            worst = Some(((eu, el), dir, min_val));
        }
    }
    let feasible = sol.status == SdpStatus::Optimal
        && vertex_margins.iter().all(|&(_, m)| m >= margin)
        && min_eigenvalue(&q_dyn)? > 0.0;

    Ok(CertificationResult {
        q_phase,
        vertex_margins,
        feasible,
        margin_used: margin,
        worst_vertex: if feasible {
            None
        } else {
            worst.map(|(v, dir, _)| (v, dir))
        },
    })
}

/// Evaluates a supplied quadratic form: its own minimum eigenvalue plus the
/// contraction margin `min eig(Q - A(v)' Q A(v))` at each vertex.
pub fn check_q(params: &CircuitParams, q_phase: &Mat4, bounds: &SchedulingBox) -> Result<QCheck> {
    let q_dyn = to_dyn4(q_phase);
    let q_min = min_eigenvalue(&q_dyn)?; // also rejects non-symmetric input
    let d = params.discretization_constants();
    let mut vertex_margins = [((0.0, 0.0), 0.0); 4];
    for (idx, &(eu, el)) in enumerate_vertices(bounds).iter().enumerate() {
        let a = to_dyn4(&bilinear_phase_block(&d, eu, el));
        let m = &q_dyn - a.transpose() * &q_dyn * &a;
        vertex_margins[idx] = ((eu, el), min_eigenvalue(&m)?);
    }
    let passes = q_min > 0.0 && vertex_margins.iter().all(|&(_, m)| m > 0.0);
    Ok(QCheck {
        q_min_eigenvalue: q_min,
        vertex_margins,
        passes,
    })
}
