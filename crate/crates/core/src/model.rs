//! Discrete-time average models of a three-phase AC/AC modular multilevel
//! converter, plus the waveform generators and mode transforms around them.
//!
//! Conventions used throughout the crate:
//! - Reduced (arm-current) state ordering: `[i_u_a, i_l_a, i_u_b, i_l_b, i_u_c, i_l_c]`.
//! - Full state ordering, interleaved per phase: `[i_u, i_l, v_u, v_l]` for
//!   phases a, b, c in turn (currents in amperes, total arm voltages in volts).
//! - Exogenous vector ordering: `[vg_a, vg'_a, vg_b, vg'_b, vg_c, vg'_c, vz, vz']`
//!   where each primed entry is the quadrature complement of its partner:
//!   when `v(k) = V cos(theta_k)` the complement is `v'(k) = -V sin(theta_k)`,
//!   which is the same waveform a quarter period ahead. This is the unique
//!   pairing propagated forward in time by the rotation blocks of `S`.
//! - All angles are radians, all frequencies hertz; conversion happens at the
//!   boundary only.

use nalgebra::{SMatrix, SVector};

use crate::error::{Error, Result};

pub type Vec2 = SVector<f64, 2>;
pub type Vec6 = SVector<f64, 6>;
pub type Vec8 = SVector<f64, 8>;
pub type Vec12 = SVector<f64, 12>;
pub type Mat2 = SMatrix<f64, 2, 2>;
pub type Mat4 = SMatrix<f64, 4, 4>;
pub type Mat6 = SMatrix<f64, 6, 6>;
pub type Mat8 = SMatrix<f64, 8, 8>;
pub type Mat12 = SMatrix<f64, 12, 12>;
pub type Mat6x8 = SMatrix<f64, 6, 8>;
pub type Mat12x8 = SMatrix<f64, 12, 8>;

/// Relative tolerance accepted when checking that a frequency divides the
/// sample rate evenly.
const SAMPLES_PER_PERIOD_TOL: f64 = 1e-6;

/// Physical constants of one MMC arm and the controller sample period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircuitParams {
    /// Arm inductance in henries.
    pub arm_inductance: f64,
    /// Arm resistance in ohms (conduction losses).
    pub arm_resistance: f64,
    /// Capacitance of one submodule in farads.
    pub module_capacitance: f64,
    /// Number of submodules per arm.
    pub modules_per_arm: u32,
    /// Sample period in seconds.
    pub sample_period: f64,
}

/// Forward-Euler discretization constants of the arm dynamics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Discretization {
    /// One-step arm-current decay factor, `1 - R*Ts/L`; always in (0, 1).
    pub current_decay: f64,
    /// Volts-to-amperes gain per step, `Ts/L`; always positive.
    pub voltage_to_current: f64,
    /// Amperes-to-volts coupling per step, `-N*Ts/C`; always negative.
    pub current_to_voltage: f64,
}

impl CircuitParams {
    pub fn new(
        arm_inductance: f64,
        arm_resistance: f64,
        module_capacitance: f64,
        modules_per_arm: u32,
        sample_period: f64,
    ) -> Result<Self> {
        let p = CircuitParams {
            arm_inductance,
            arm_resistance,
            module_capacitance,
            modules_per_arm,
            sample_period,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        let fields = [
            ("arm_inductance", self.arm_inductance),
            ("arm_resistance", self.arm_resistance),
            ("module_capacitance", self.module_capacitance),
            ("sample_period", self.sample_period),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be strictly positive and finite, got {v}"
                )));
            }
        }
        if self.modules_per_arm == 0 {
            return Err(Error::InvalidParameter(
                "modules_per_arm must be at least 1".into(),
            ));
        }
        let decay = 1.0 - self.arm_resistance * self.sample_period / self.arm_inductance;
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "current decay factor 1 - R*Ts/L = {decay} must lie strictly inside (0, 1); \
                 require sample_period < arm_inductance / arm_resistance"
            )));
        }
        Ok(())
    }

    /// Forward-Euler discretization constants of the arm dynamics.
    pub fn discretization_constants(&self) -> Discretization {
        let ts = self.sample_period;
        Discretization {
            current_decay: 1.0 - self.arm_resistance * ts / self.arm_inductance,
            voltage_to_current: ts / self.arm_inductance,
            current_to_voltage: -(self.modules_per_arm as f64) * ts / self.module_capacitance,
        }
    }
}

/// Grid- and output-port waveform descriptors.
///
/// `output_peak_current` may be left unset; the reference solve fills it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PortSpec {
    /// Grid voltage peak per phase, volts.
    pub grid_peak_voltage: f64,
    /// Grid frequency, hertz.
    pub grid_frequency: f64,
    /// Phase lag of the grid-current reference relative to the grid voltage,
    /// radians: the reference is `I cos(w1 t - phase)`.
    pub grid_current_phase: f64,
    /// Output (transformer-side) voltage peak, volts.
    pub output_peak_voltage: f64,
    /// Output frequency, hertz.
    pub output_frequency: f64,
    /// Phase lag of the output-current reference, radians.
    pub output_current_phase: f64,
    /// Grid current peak target per phase, amperes.
    pub grid_peak_current: f64,
    /// Output (common-mode) current peak, amperes; solved when absent.
    pub output_peak_current: Option<f64>,
}

impl PortSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        grid_peak_voltage: f64,
        grid_frequency: f64,
        grid_current_phase: f64,
        output_peak_voltage: f64,
        output_frequency: f64,
        output_current_phase: f64,
        grid_peak_current: f64,
        output_peak_current: Option<f64>,
    ) -> Result<Self> {
        let s = PortSpec {
            grid_peak_voltage,
            grid_frequency,
            grid_current_phase,
            output_peak_voltage,
            output_frequency,
            output_current_phase,
            grid_peak_current,
            output_peak_current,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        let strict = [
            ("grid_peak_voltage", self.grid_peak_voltage),
            ("grid_frequency", self.grid_frequency),
            ("output_peak_voltage", self.output_peak_voltage),
            ("output_frequency", self.output_frequency),
        ];
        for (name, v) in strict {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be strictly positive and finite, got {v}"
                )));
            }
        }
        // Current targets admit zero so that zero-power configurations stay
        // expressible; negative targets are rejected.
        if !(self.grid_peak_current.is_finite() && self.grid_peak_current >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "grid_peak_current must be nonnegative and finite, got {}",
                self.grid_peak_current
            )));
        }
        if let Some(c) = self.output_peak_current {
            if !(c.is_finite() && c >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "output_peak_current must be nonnegative and finite, got {c}"
                )));
            }
        }
        for (name, v) in [
            ("grid_current_phase", self.grid_current_phase),
            ("output_current_phase", self.output_current_phase),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be finite")));
            }
        }
        Ok(())
    }

    /// Grid angular frequency, rad/s.
    pub fn grid_angular_frequency(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.grid_frequency
    }

    /// Output angular frequency, rad/s.
    pub fn output_angular_frequency(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.output_frequency
    }

    /// Sum of both port voltage peaks; normalizes arm voltages into insertion
    /// indices and is the nominal total arm voltage.
    pub fn voltage_scale(&self) -> f64 {
        self.grid_peak_voltage + self.output_peak_voltage
    }

    /// Checks that both port frequencies divide the sample rate into an
    /// integer number of samples per period (required by all period-averaged
    /// quantities in the crate).
    pub fn validate_sampling(&self, params: &CircuitParams) -> Result<()> {
        samples_per_period(self.grid_frequency, params.sample_period)?;
        samples_per_period(self.output_frequency, params.sample_period)?;
        Ok(())
    }
}

/// Number of samples in one period of `frequency` at the given sample period.
///
/// Fails unless `1/(f*Ts)` is an integer within a small relative tolerance.
pub fn samples_per_period(frequency: f64, sample_period: f64) -> Result<usize> {
    if !(frequency > 0.0 && sample_period > 0.0) {
        return Err(Error::InvalidParameter(
            "frequency and sample_period must be positive".into(),
        ));
    }
    let n = 1.0 / (frequency * sample_period);
    let rounded = n.round();
    if rounded < 1.0 || ((n - rounded) / n).abs() > SAMPLES_PER_PERIOD_TOL {
        return Err(Error::InvalidParameter(format!(
            "frequency {frequency} Hz does not give an integer number of samples per period \
             at sample period {sample_period} s (1/(f*Ts) = {n})"
        )));
    }
    Ok(rounded as usize)
}

/// Autonomous exogenous state: three grid-voltage pairs and one output pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExogenousState(pub Vec8);

impl ExogenousState {
    /// Initial exogenous vector with every phase aligned to `theta0`.
    ///
    /// Pairs are `(V cos(theta0), -V sin(theta0))`; the second component is
    /// the quadrature complement that the rotation recursion advances
    /// coherently in time.
    pub fn from_port_spec(spec: &PortSpec, theta0: f64) -> Self {
        let mut w = Vec8::zeros();
        let (s, c) = theta0.sin_cos();
        for m in 0..3 {
            w[2 * m] = spec.grid_peak_voltage * c;
            w[2 * m + 1] = -spec.grid_peak_voltage * s;
        }
        w[6] = spec.output_peak_voltage * c;
        w[7] = -spec.output_peak_voltage * s;
        ExogenousState(w)
    }

    /// Squared amplitude of each (v, v') pair, in vector order.
    pub fn pair_amplitudes_squared(&self) -> [f64; 4] {
        let w = &self.0;
        [
            w[0] * w[0] + w[1] * w[1],
            w[2] * w[2] + w[3] * w[3],
            w[4] * w[4] + w[5] * w[5],
            w[6] * w[6] + w[7] * w[7],
        ]
    }
}

/// Insertion indices for the six arms, each within [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InsertionIndex(pub Vec6);

impl InsertionIndex {
    pub fn new(values: Vec6) -> Result<Self> {
        for (i, v) in values.iter().enumerate() {
            if !(v.is_finite() && (-1.0..=1.0).contains(v)) {
                return Err(Error::InvalidParameter(format!(
                    "insertion index component {i} = {v} outside [-1, 1]"
                )));
            }
        }
        Ok(InsertionIndex(values))
    }
}

/// Discrete-time matrix bundle of the reduced (linear) model together with
/// the exogenous system.
///
/// `x+ = a_bar x + b_bar u + e w`, `y = c_bar x`, `w+ = s w`, `r = o w`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a_bar: Mat6,
    pub b_bar: Mat6,
    pub e: Mat6x8,
    pub c_bar: Mat6,
    pub s: Mat8,
    pub o: Mat6x8,
}

/// Planar rotation advancing a coherent (cos, -sin) pair by `theta`.
pub fn rotation2(theta: f64) -> Mat2 {
    let (s, c) = theta.sin_cos();
    Mat2::new(c, s, -s, c)
}

/// Output matrix mapping arm currents to grid and output currents per phase.
fn output_block() -> Mat2 {
    Mat2::new(1.0, -1.0, 0.5, 0.5)
}

/// Exogenous input matrix of the reduced model (6x8).
pub fn build_input_matrix(params: &CircuitParams) -> Mat6x8 {
    let d = params.discretization_constants();
    let k2 = d.voltage_to_current;
    let mut e = Mat6x8::zeros();
    for m in 0..3 {
        // grid voltage enters the upper arm positively, the lower negatively
        e[(2 * m, 2 * m)] = k2;
        e[(2 * m + 1, 2 * m)] = -k2;
        // output voltage loads both arms equally
        e[(2 * m, 6)] = -k2;
        e[(2 * m + 1, 6)] = -k2;
    }
    e
}

/// Zero-padded 12x8 variant of the input matrix for the full-state models;
/// total-arm-voltage rows receive no direct exogenous drive.
pub fn build_full_input_matrix(params: &CircuitParams) -> Mat12x8 {
    let e = build_input_matrix(params);
    let mut ef = Mat12x8::zeros();
    for m in 0..3 {
        for r in 0..2 {
            for c in 0..8 {
                ef[(4 * m + r, c)] = e[(2 * m + r, c)];
            }
        }
    }
    ef
}

/// Exogenous propagation matrix: three grid rotation blocks and one output
/// rotation block.
pub fn build_exogenous_matrix(params: &CircuitParams, spec: &PortSpec) -> Mat8 {
    let ts = params.sample_period;
    let g = rotation2(spec.grid_angular_frequency() * ts);
    let z = rotation2(spec.output_angular_frequency() * ts);
    let mut s = Mat8::zeros();
    for m in 0..3 {
        s.fixed_view_mut::<2, 2>(2 * m, 2 * m).copy_from(&g);
    }
    s.fixed_view_mut::<2, 2>(6, 6).copy_from(&z);
    s
}

/// Assembles the reduced linear model. The reference map `o` comes from the
/// reference design (see `refgen::build_output_map`).
pub fn build_linear_model(
    params: &CircuitParams,
    spec: &PortSpec,
    output_map: &Mat6x8,
) -> Result<LinearModel> {
    params.validate()?;
    spec.validate()?;
    let d = params.discretization_constants();
    let mut c_bar = Mat6::zeros();
    for m in 0..3 {
        c_bar
            .fixed_view_mut::<2, 2>(2 * m, 2 * m)
            .copy_from(&output_block());
    }
    Ok(LinearModel {
        a_bar: Mat6::identity() * d.current_decay,
        b_bar: Mat6::identity() * d.voltage_to_current,
        e: build_input_matrix(params),
        c_bar,
        s: build_exogenous_matrix(params, spec),
        o: *output_map,
    })
}

/// Per-phase 4x4 block of the bilinear average model at the given insertion
/// indices.
pub fn bilinear_phase_block(d: &Discretization, eta_u: f64, eta_l: f64) -> Mat4 {
    let (k1, k2, k3) = (d.current_decay, d.voltage_to_current, d.current_to_voltage);
    Mat4::new(
        k1,
        0.0,
        k2 * eta_u,
        0.0,
        0.0,
        k1,
        0.0,
        k2 * eta_l,
        k3 * eta_u,
        0.0,
        1.0,
        0.0,
        0.0,
        k3 * eta_l,
        0.0,
        1.0,
    )
}

/// Per-phase block of the ideal dynamics: as the bilinear block but with the
/// total arm voltages held constant.
pub fn ideal_phase_block(d: &Discretization, eta_u: f64, eta_l: f64) -> Mat4 {
    let mut a = bilinear_phase_block(d, eta_u, eta_l);
    a[(2, 0)] = 0.0;
    a[(3, 1)] = 0.0;
    a
}

/// Full 12x12 bilinear state matrix, block diagonal per phase.
pub fn build_bilinear_a(params: &CircuitParams, eta: &InsertionIndex) -> Mat12 {
    let d = params.discretization_constants();
    let mut a = Mat12::zeros();
    for m in 0..3 {
        let blk = bilinear_phase_block(&d, eta.0[2 * m], eta.0[2 * m + 1]);
        a.fixed_view_mut::<4, 4>(4 * m, 4 * m).copy_from(&blk);
    }
    a
}

/// Full 12x12 ideal state matrix: voltage states frozen at their initial
/// values, currents driven exactly as in the bilinear model.
pub fn build_ideal_bilinear_a(params: &CircuitParams, eta: &InsertionIndex) -> Mat12 {
    let d = params.discretization_constants();
    let mut a = Mat12::zeros();
    for m in 0..3 {
        let blk = ideal_phase_block(&d, eta.0[2 * m], eta.0[2 * m + 1]);
        a.fixed_view_mut::<4, 4>(4 * m, 4 * m).copy_from(&blk);
    }
    a
}

/// Common/differential mode decomposition of an (upper, lower) arm pair.
pub fn mode_transform(upper: f64, lower: f64) -> (f64, f64) {
    ((upper - lower) / 2.0, (upper + lower) / 2.0)
}

/// Inverse of [`mode_transform`].
pub fn mode_inverse(delta: f64, sigma: f64) -> (f64, f64) {
    (sigma + delta, sigma - delta)
}

/// Three-branch saturation onto [-1, 1].
pub fn saturate(xi: f64) -> f64 {
    xi.clamp(-1.0, 1.0)
}

/// Normalizes commanded arm voltages into insertion indices, clamping to
/// [-1, 1]. The flag reports whether any component saturated.
pub fn arm_voltage_to_insertion(u: &Vec6, spec: &PortSpec) -> (InsertionIndex, bool) {
    let scale = spec.voltage_scale();
    let mut eta = Vec6::zeros();
    let mut saturated = false;
    for i in 0..6 {
        let xi = u[i] / scale;
        if xi.abs() > 1.0 {
            saturated = true;
        }
        eta[i] = saturate(xi);
    }
    (InsertionIndex(eta), saturated)
}

/// Grid and output currents from the arm currents: per phase
/// `i_g = i_u - i_l` and `i_z = (i_u + i_l)/2`.
pub fn outputs_from_state(x_bar: &Vec6) -> Vec6 {
    let mut y = Vec6::zeros();
    for m in 0..3 {
        let (u, l) = (x_bar[2 * m], x_bar[2 * m + 1]);
        y[2 * m] = u - l;
        y[2 * m + 1] = (u + l) / 2.0;
    }
    y
}

/// Arm currents of the full state, in reduced-state ordering.
pub fn reduced_from_full(x: &Vec12) -> Vec6 {
    let mut r = Vec6::zeros();
    for m in 0..3 {
        r[2 * m] = x[4 * m];
        r[2 * m + 1] = x[4 * m + 1];
    }
    r
}

/// Spectral radius of a small square matrix.
pub fn spectral_radius<const N: usize>(m: &SMatrix<f64, N, N>) -> f64 {
    nalgebra::DMatrix::from_fn(N, N, |i, j| m[(i, j)])
        .complex_eigenvalues()
        .iter()
        .map(|ev| ev.norm())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn lab_params() -> CircuitParams {
        CircuitParams::new(2.36e-3, 0.05, 5e-3, 4, 2e-5).unwrap()
    }

    fn mv_params() -> CircuitParams {
        CircuitParams::new(3e-3, 0.05, 4e-3, 1, 2e-5).unwrap()
    }

    fn mv_ports() -> PortSpec {
        PortSpec::new(25e3, 50.0, 0.0, 10e3, 1000.0, 0.0, 80.0, None).unwrap()
    }

    #[test]
    fn discretization_constants_lab_scale() {
        let d = lab_params().discretization_constants();
        assert_relative_eq!(d.current_decay, 0.99957627, max_relative = 1e-7);
        assert_relative_eq!(d.voltage_to_current, 8.4746e-3, max_relative = 1e-4);
        assert_relative_eq!(d.current_to_voltage, -0.016, max_relative = 1e-12);
    }

    #[test]
    fn discretization_constants_mv_scale() {
        let d = mv_params().discretization_constants();
        assert_relative_eq!(d.current_decay, 0.99966667, max_relative = 1e-7);
        assert_relative_eq!(d.voltage_to_current, 6.6667e-3, max_relative = 1e-4);
        assert_relative_eq!(d.current_to_voltage, -5e-3, max_relative = 1e-12);
    }

    #[test]
    fn lossless_arm_rejected() {
        // R = 0 puts the decay factor exactly at 1.
        assert!(CircuitParams::new(3e-3, 0.0, 4e-3, 1, 2e-5).is_err());
        // Too-long sample period pushes it to or below 0.
        assert!(CircuitParams::new(3e-3, 0.05, 4e-3, 1, 0.06).is_err());
    }

    #[test]
    fn output_block_rows() {
        let model = build_linear_model(&mv_params(), &mv_ports(), &Mat6x8::zeros()).unwrap();
        for m in 0..3 {
            assert_eq!(model.c_bar[(2 * m, 2 * m)], 1.0);
            assert_eq!(model.c_bar[(2 * m, 2 * m + 1)], -1.0);
            assert_eq!(model.c_bar[(2 * m + 1, 2 * m)], 0.5);
            assert_eq!(model.c_bar[(2 * m + 1, 2 * m + 1)], 0.5);
        }
    }

    #[test]
    fn rotation_block_is_orthogonal_with_unit_determinant() {
        let r = rotation2(2.0 * std::f64::consts::PI * 50.0 * 2e-5);
        let rtr = r.transpose() * r;
        assert_abs_diff_eq!(rtr, Mat2::identity(), epsilon = 1e-15);
        assert_relative_eq!(r.determinant(), 1.0, max_relative = 1e-14);
    }

    #[test]
    fn rotation_block_output_frequency_entries() {
        // 1 kHz at 50 kHz sampling rotates by 0.12566 rad per step.
        let r = rotation2(2.0 * std::f64::consts::PI * 1000.0 * 2e-5);
        assert_relative_eq!(r[(0, 0)], 0.992115, max_relative = 1e-5);
        assert_relative_eq!(r[(0, 1)], 0.125333, max_relative = 1e-5);
        assert_relative_eq!(r[(1, 0)], -0.125333, max_relative = 1e-5);
        assert_relative_eq!(r[(1, 1)], 0.992115, max_relative = 1e-5);
    }

    #[test]
    fn input_matrix_structure() {
        let e = build_input_matrix(&mv_params());
        let k2 = mv_params().discretization_constants().voltage_to_current;
        for m in 0..3 {
            assert_eq!(e[(2 * m, 2 * m)], k2);
            assert_eq!(e[(2 * m + 1, 2 * m)], -k2);
            assert_eq!(e[(2 * m, 6)], -k2);
            assert_eq!(e[(2 * m + 1, 6)], -k2);
            // quadrature columns never drive the plant
            assert_eq!(e.column(2 * m + 1).amax(), 0.0);
        }
        assert_eq!(e.column(7).amax(), 0.0);
        let ef = build_full_input_matrix(&mv_params());
        for m in 0..3 {
            assert_eq!(ef.row(4 * m + 2).amax(), 0.0);
            assert_eq!(ef.row(4 * m + 3).amax(), 0.0);
            assert_eq!(ef[(4 * m, 2 * m)], k2);
        }
    }

    #[test]
    fn bilinear_block_zero_insertion_decouples() {
        let p = mv_params();
        let eta = InsertionIndex::new(Vec6::zeros()).unwrap();
        let a = build_bilinear_a(&p, &eta);
        let d = p.discretization_constants();
        for m in 0..3 {
            let blk = a.fixed_view::<4, 4>(4 * m, 4 * m);
            let expect = Mat4::from_diagonal(&SVector::<f64, 4>::new(
                d.current_decay,
                d.current_decay,
                1.0,
                1.0,
            ));
            assert_abs_diff_eq!(blk.into_owned(), expect, epsilon = 0.0);
        }
    }

    #[test]
    fn bilinear_block_single_entry_activation() {
        let p = mv_params();
        let d = p.discretization_constants();
        let mut v = Vec6::zeros();
        v[0] = 1.0; // upper arm of phase a only
        let a = build_bilinear_a(&p, &InsertionIndex::new(v).unwrap());
        assert_eq!(a[(0, 2)], d.voltage_to_current);
        assert_eq!(a[(2, 0)], d.current_to_voltage);
        // all other current/voltage couplings stay zero
        let mut coupled = a;
        coupled[(0, 2)] = 0.0;
        coupled[(2, 0)] = 0.0;
        for m in 0..3 {
            let blk = coupled.fixed_view::<4, 4>(4 * m, 4 * m).into_owned();
            let expect = Mat4::from_diagonal(&SVector::<f64, 4>::new(
                d.current_decay,
                d.current_decay,
                1.0,
                1.0,
            ));
            assert_abs_diff_eq!(blk, expect, epsilon = 0.0);
        }
        assert!(InsertionIndex::new(Vec6::from_element(1.5)).is_err());
    }

    #[test]
    fn coupled_subsystem_eigenvalue_modulus() {
        // For insertion values large enough to make the pair complex, both
        // eigenvalues of [[k1, k2*eta], [k3*eta, 1]] have squared modulus
        // k1 - k2*k3*eta^2 (the block determinant).
        let d = mv_params().discretization_constants();
        for eta in [0.1, 0.5, 1.0] {
            let blk = Mat2::new(
                d.current_decay,
                d.voltage_to_current * eta,
                d.current_to_voltage * eta,
                1.0,
            );
            let expect = d.current_decay - d.voltage_to_current * d.current_to_voltage * eta * eta;
            for ev in blk.complex_eigenvalues().iter() {
                assert_relative_eq!(ev.norm_sqr(), expect, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn ideal_block_freezes_voltages() {
        let p = mv_params();
        let eta = InsertionIndex::new(Vec6::from_element(0.7)).unwrap();
        let a = build_bilinear_a(&p, &eta);
        let at = build_ideal_bilinear_a(&p, &eta);
        let d = p.discretization_constants();
        let diff = at - a;
        for m in 0..3 {
            assert_eq!(diff[(4 * m + 2, 4 * m)], -d.current_to_voltage * 0.7);
            assert_eq!(diff[(4 * m + 3, 4 * m + 1)], -d.current_to_voltage * 0.7);
            // voltage sub-block is the identity
            let vb = at.fixed_view::<2, 2>(4 * m + 2, 4 * m + 2).into_owned();
            assert_abs_diff_eq!(vb, Mat2::identity(), epsilon = 0.0);
        }
        let mut masked = diff;
        for m in 0..3 {
            masked[(4 * m + 2, 4 * m)] = 0.0;
            masked[(4 * m + 3, 4 * m + 1)] = 0.0;
        }
        assert_eq!(masked.amax(), 0.0);

        // voltages propagate unchanged under the ideal block
        let mut x = Vec12::zeros();
        for m in 0..3 {
            x[4 * m + 2] = 35e3;
            x[4 * m + 3] = 35e3;
        }
        let mut xk = x;
        for _ in 0..50 {
            xk = at * xk;
        }
        for m in 0..3 {
            assert_eq!(xk[4 * m + 2], 35e3);
            assert_eq!(xk[4 * m + 3], 35e3);
        }
    }

    #[test]
    fn mode_transform_examples() {
        assert_eq!(mode_transform(3.0, 1.0), (1.0, 2.0));
        assert_eq!(mode_transform(4.2, 4.2), (0.0, 4.2));
    }

    #[test]
    fn saturation_branches() {
        let spec = mv_ports();
        let scale = spec.voltage_scale();
        let (eta, sat) = arm_voltage_to_insertion(&Vec6::from_element(1.5 * scale), &spec);
        assert_eq!(eta.0, Vec6::from_element(1.0));
        assert!(sat);
        let (eta, _) = arm_voltage_to_insertion(&Vec6::from_element(-2.0 * scale), &spec);
        assert_eq!(eta.0, Vec6::from_element(-1.0));
        let (eta, sat) = arm_voltage_to_insertion(&Vec6::from_element(0.3 * scale), &spec);
        assert_abs_diff_eq!(eta.0, Vec6::from_element(0.3), epsilon = 1e-15);
        assert!(!sat);
    }

    #[test]
    fn outputs_from_state_examples() {
        let mut x = Vec6::zeros();
        x[0] = 5.0;
        x[1] = 2.0;
        let y = outputs_from_state(&x);
        assert_eq!(y[0], 3.0);
        assert_eq!(y[1], 3.5);

        // equal arm currents cancel in the grid output
        let y = outputs_from_state(&Vec6::from_element(7.0));
        for m in 0..3 {
            assert_eq!(y[2 * m], 0.0);
            assert_eq!(y[2 * m + 1], 7.0);
        }

        // opposite arm currents cancel in the output current
        let mut x = Vec6::zeros();
        x[0] = 4.0;
        x[1] = -4.0;
        let y = outputs_from_state(&x);
        assert_eq!(y[0], 8.0);
        assert_eq!(y[1], 0.0);
    }

    #[test]
    fn output_map_of_mode_inverse_is_identity() {
        // C applied to the mode inverse recovers (2*delta, sigma).
        let c = output_block();
        for (d, s) in [(1.0, 2.0), (-3.5, 0.25), (0.0, 1.0)] {
            let (u, l) = mode_inverse(d, s);
            let y = c * Vec2::new(u, l);
            assert_relative_eq!(y[0], 2.0 * d, max_relative = 1e-15);
            assert_relative_eq!(y[1], s, max_relative = 1e-15);
        }
    }

    #[test]
    fn exogenous_matrix_is_orthogonal_and_periodic() {
        let p = mv_params();
        let spec = mv_ports();
        let s = build_exogenous_matrix(&p, &spec);
        assert_abs_diff_eq!(s.transpose() * s, Mat8::identity(), epsilon = 1e-12);
        let n1 = samples_per_period(spec.grid_frequency, p.sample_period).unwrap();
        let w0 = ExogenousState::from_port_spec(&spec, 0.3).0;
        let mut w = w0;
        for _ in 0..n1 {
            w = s * w;
        }
        // grid sub-vector returns to its start after one grid period
        for i in 0..6 {
            assert_relative_eq!(w[i], w0[i], max_relative = 1e-9);
        }
    }

    #[test]
    fn sampling_validation() {
        assert_eq!(samples_per_period(50.0, 2e-5).unwrap(), 1000);
        assert_eq!(samples_per_period(1000.0, 2e-5).unwrap(), 50);
        assert!(samples_per_period(48.7, 2e-5).is_err());
        let bad = PortSpec::new(25e3, 48.7, 0.0, 10e3, 1000.0, 0.0, 80.0, None).unwrap();
        assert!(bad.validate_sampling(&mv_params()).is_err());
    }

    proptest! {
        #[test]
        fn mode_roundtrip(u in -1e6f64..1e6, l in -1e6f64..1e6) {
            let (d, s) = mode_transform(u, l);
            let (u2, l2) = mode_inverse(d, s);
            let scale = u.abs().max(l.abs()).max(1.0);
            prop_assert!((u - u2).abs() <= 1e-15 * scale);
            prop_assert!((l - l2).abs() <= 1e-15 * scale);
        }

        #[test]
        fn decay_constants_signs(
            l in 1e-4f64..1e-1,
            r in 1e-3f64..1.0,
            c in 1e-4f64..1e-1,
            n in 1u32..10,
        ) {
            let ts = 2e-5;
            if let Ok(p) = CircuitParams::new(l, r, c, n, ts) {
                let d = p.discretization_constants();
                prop_assert!(d.current_decay > 0.0 && d.current_decay < 1.0);
                prop_assert!(d.voltage_to_current > 0.0);
                prop_assert!(d.current_to_voltage < 0.0);
            }
        }

        #[test]
        fn bilinear_and_ideal_agree_outside_voltage_rows(
            e1 in -1.0f64..1.0, e2 in -1.0f64..1.0, e3 in -1.0f64..1.0,
            e4 in -1.0f64..1.0, e5 in -1.0f64..1.0, e6 in -1.0f64..1.0,
        ) {
            let p = CircuitParams::new(3e-3, 0.05, 4e-3, 1, 2e-5).unwrap();
            let eta = InsertionIndex::new(Vec6::new(e1, e2, e3, e4, e5, e6)).unwrap();
            let a = build_bilinear_a(&p, &eta);
            let at = build_ideal_bilinear_a(&p, &eta);
            for m in 0..3 {
                for r in [0usize, 1] {
                    for c in 0..12 {
                        prop_assert_eq!(a[(4 * m + r, c)], at[(4 * m + r, c)]);
                    }
                }
            }
        }
    }
}
