//! Current reference design: the differential-mode reference follows
//! directly from the grid power target, while the common-mode reference is
//! the solution of a power-balance program that matches period-averaged grid
//! and output power subject to zero average arm power.
//!
//! All period averages are plain discrete sums over exactly one waveform
//! period; arm voltages inside the balance constraint are reconstructed from
//! the discretized arm dynamics using forward differences, mirroring the
//! forward-Euler plant model.

use crate::error::{Error, Result};
use crate::model::{samples_per_period, CircuitParams, Mat6x8, PortSpec};

/// Common-mode current reference `i_sigma(t) = a cos(w2 t) + b sin(w2 t)`
/// together with the achieved power bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaReference {
    /// Cosine coefficient, amperes.
    pub cos_coefficient: f64,
    /// Sine coefficient, amperes.
    pub sin_coefficient: f64,
    /// Signed residual of the power-match objective, watts: average grid-side
    /// power minus average output-side power at the optimum.
    pub power_mismatch: f64,
    /// Absolute arm-power constraint residual at the optimum, watts.
    pub arm_power_residual: f64,
}

impl SigmaReference {
    /// Peak amplitude of the common-mode reference.
    pub fn amplitude(&self) -> f64 {
        self.cos_coefficient.hypot(self.sin_coefficient)
    }

    /// Phase lag of the reference relative to the output voltage, radians:
    /// the waveform is `amplitude * cos(w2 t - phase_lag)`.
    pub fn phase_lag(&self) -> f64 {
        self.sin_coefficient.atan2(self.cos_coefficient)
    }
}

/// Reference map coefficients: `r = O w` with per-phase grid rows built from
/// `(o1, o2)` and the shared output row from `(o3, o4)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputMap {
    pub o1: f64,
    pub o2: f64,
    pub o3: f64,
    pub o4: f64,
    /// Grid-row gain, amperes per volt: `2 * I_delta / V_grid`.
    pub k4: f64,
    /// Output-row gain, amperes per volt: `I_sigma / V_out`.
    pub k5: f64,
}

impl OutputMap {
    /// Assembles the 6x8 reference matrix over the exogenous ordering.
    pub fn matrix(&self) -> Mat6x8 {
        let mut o = Mat6x8::zeros();
        for m in 0..3 {
            o[(2 * m, 2 * m)] = self.o1;
            o[(2 * m, 2 * m + 1)] = self.o2;
            o[(2 * m + 1, 6)] = self.o3;
            o[(2 * m + 1, 7)] = self.o4;
        }
        o
    }
}

/// Differential-mode current reference amplitude and phase from the grid
/// requirement: half the grid current peak, phase passed through.
pub fn grid_current_reference(spec: &PortSpec) -> Result<(f64, f64)> {
    if !(spec.grid_peak_current.is_finite() && spec.grid_peak_current >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "grid peak current must be nonnegative, got {}",
            spec.grid_peak_current
        )));
    }
    Ok((spec.grid_peak_current / 2.0, spec.grid_current_phase))
}

/// Waveform context shared by the closed-form solve and the brute-force
/// search: both evaluate the same period sums, but independently.
struct BalanceSums {
    /// Average grid-side power `avg(v_g * i_delta)` over one grid period.
    grid_power: f64,
    /// Average arm power contributed by the differential mode.
    delta_arm_power: f64,
    n2: usize,
    omega2: f64,
    ts: f64,
    resistance: f64,
    inductance: f64,
    output_peak_voltage: f64,
}

impl BalanceSums {
    fn build(params: &CircuitParams, spec: &PortSpec) -> Result<Self> {
        let n1 = samples_per_period(spec.grid_frequency, params.sample_period)?;
        let n2 = samples_per_period(spec.output_frequency, params.sample_period)?;
        let ts = params.sample_period;
        let w1 = spec.grid_angular_frequency();
        let (i_delta, phase) = grid_current_reference(spec)?;

        let mut grid_power = 0.0;
        let mut delta_arm_power = 0.0;
        for k in 0..n1 {
            let t = k as f64 * ts;
            let vg = spec.grid_peak_voltage * (w1 * t).cos();
            let id = i_delta * (w1 * t - phase).cos();
            let id_next = i_delta * (w1 * (t + ts) - phase).cos();
            let ud = -vg + params.arm_resistance * id + params.arm_inductance * (id_next - id) / ts;
            grid_power += vg * id;
            delta_arm_power += ud * id;
        }
        grid_power /= n1 as f64;
        delta_arm_power /= n1 as f64;

        Ok(BalanceSums {
            grid_power,
            delta_arm_power,
            n2,
            omega2: spec.output_angular_frequency(),
            ts,
            resistance: params.arm_resistance,
            inductance: params.arm_inductance,
            output_peak_voltage: spec.output_peak_voltage,
        })
    }

    /// Average output-side power `avg(v_z * i_sigma)` over one output period.
    fn output_power(&self, alpha: f64, beta: f64) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.n2 {
            let th = self.omega2 * k as f64 * self.ts;
            let vz = self.output_peak_voltage * th.cos();
            acc += vz * (alpha * th.cos() + beta * th.sin());
        }
        acc / self.n2 as f64
    }

    /// Average arm power contributed by the common mode.
    fn sigma_arm_power(&self, alpha: f64, beta: f64) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.n2 {
            let t = k as f64 * self.ts;
            let th = self.omega2 * t;
            let th_next = self.omega2 * (t + self.ts);
            let is = alpha * th.cos() + beta * th.sin();
            let is_next = alpha * th_next.cos() + beta * th_next.sin();
            let vz = self.output_peak_voltage * th.cos();
            let us = vz + self.resistance * is + self.inductance * (is_next - is) / self.ts;
            acc += us * is;
        }
        acc / self.n2 as f64
    }

    /// Total arm-power constraint value at `(alpha, beta)`.
    fn constraint(&self, alpha: f64, beta: f64) -> f64 {
        self.delta_arm_power + self.sigma_arm_power(alpha, beta)
    }

    /// Power-match objective `|avg grid power - avg output power|`.
    fn objective(&self, alpha: f64, beta: f64) -> f64 {
        (self.grid_power - self.output_power(alpha, beta)).abs()
    }
}

/// Solves the common-mode reference: minimize the grid/output power mismatch
/// subject to zero average arm power, over the two Fourier coefficients of a
/// single tone at the output frequency.
///
/// The constraint is a circle in `(alpha, beta)` (the quadratic form of the
/// period sums is isotropic); the objective depends on `alpha` alone, so the
/// optimum is found in closed form on the circle. Ties break toward the
/// smaller amplitude, then the nonnegative sine coefficient.
pub fn solve_sigma_reference(params: &CircuitParams, spec: &PortSpec) -> Result<SigmaReference> {
    let sums = BalanceSums::build(params, spec)?;

    // Extract the exact coefficient structure of the constraint:
    //   constraint(a, b) = K + p_a a + p_b b + quadratic(a, b),
    // where the linear part is the output-voltage coupling and the quadratic
    // part comes from the resistive and difference terms.
    let k_const = sums.constraint(0.0, 0.0);
    let lin_a = sums.output_power(1.0, 0.0);
    let lin_b = sums.output_power(0.0, 1.0);
    let q_aa = sums.sigma_arm_power(1.0, 0.0) - lin_a;
    let q_bb = sums.sigma_arm_power(0.0, 1.0) - lin_b;
    let q_cross = (sums.sigma_arm_power(1.0, 1.0) - lin_a - lin_b - q_aa - q_bb) / 2.0;

    let scale = q_aa.abs().max(1e-300);
    if q_cross.abs() > 1e-9 * scale || (q_aa - q_bb).abs() > 1e-9 * scale {
        return Err(Error::Numerical(format!(
            "arm-power quadratic form is not isotropic (qaa={q_aa}, qbb={q_bb}, qab={q_cross}); \
             expected integer samples per period"
        )));
    }
    if lin_b.abs() > 1e-9 * lin_a.abs().max(1e-300) {
        return Err(Error::Numerical(format!(
            "output power has an unexpected quadrature component {lin_b}"
        )));
    }
    let q = q_aa;
    let p = lin_a;
    if q == 0.0 || p == 0.0 {
        return Err(Error::Numerical(
            "degenerate balance constraint coefficients".into(),
        ));
    }

    // Circle: (a - ac)^2 + b^2 = r^2.
    let ac = -p / (2.0 * q);
    let r_sq = ac * ac - k_const / q;
    if r_sq < 0.0 {
        // No real solution: report the closest achievable residual, reached
        // at the circle center.
        let residual = sums.constraint(ac, 0.0).abs();
        return Err(Error::Infeasible(format!(
            "arm power balance has no solution; closest achievable residual \
             {residual:.6} W at amplitude {:.6} A",
            ac.abs()
        )));
    }
    let r = r_sq.sqrt();

    // The objective |grid_power - p*alpha| is minimized at the feasible alpha
    // closest to grid_power / p. When the target is outside the circle the
    // optimum sits on a circle edge, where beta is exactly zero; otherwise
    // both signs of beta give the same amplitude and the nonnegative root is
    // taken.
    let target = sums.grid_power / p;
    let (alpha, beta) = if target <= ac - r {
        (ac - r, 0.0)
    } else if target >= ac + r {
        (ac + r, 0.0)
    } else {
        let b = (r_sq - (target - ac) * (target - ac)).max(0.0).sqrt();
        (target, b)
    };

    Ok(SigmaReference {
        cos_coefficient: alpha,
        sin_coefficient: beta,
        power_mismatch: sums.grid_power - sums.output_power(alpha, beta),
        arm_power_residual: sums.constraint(alpha, beta).abs(),
    })
}

/// Search box for the brute-force reference solve.
#[derive(Debug, Clone, Copy)]
pub struct OracleGrid {
    pub alpha_range: (f64, f64),
    pub beta_range: (f64, f64),
    /// Grid step in amperes for the first pass.
    pub step: f64,
    /// Constraint slack in watts admitted at the first pass; refined passes
    /// shrink it proportionally to the step.
    pub constraint_slack: f64,
    /// Number of tenfold refinements around the incumbent.
    pub refinement_levels: u32,
}

/// Exhaustive evaluation of the same objective/constraint on a grid,
/// independent of the closed-form path: every candidate is scored by direct
/// waveform sums. Returns the best feasible point.
pub fn brute_force_sigma_oracle(
    params: &CircuitParams,
    spec: &PortSpec,
    grid: &OracleGrid,
) -> Result<SigmaReference> {
    let step_ok = grid.step > 0.0 && grid.step.is_finite();
    let slack_ok = grid.constraint_slack >= 0.0;
    if !step_ok
        || !slack_ok
        || grid.alpha_range.1 < grid.alpha_range.0
        || grid.beta_range.1 < grid.beta_range.0
    {
        return Err(Error::InvalidParameter("malformed oracle grid".into()));
    }
    let sums = BalanceSums::build(params, spec)?;

    let scan = |alo: f64,
                ahi: f64,
                blo: f64,
                bhi: f64,
                step: f64,
                slack: f64|
     -> Option<(f64, f64, f64)> {
        let na = ((ahi - alo) / step).round() as i64;
        let nb = ((bhi - blo) / step).round() as i64;
        let mut best: Option<(f64, f64, f64)> = None;
        for ia in 0..=na {
            let a = alo + ia as f64 * step;
            for ib in 0..=nb {
                let b = blo + ib as f64 * step;
                if sums.constraint(a, b).abs() > slack {
                    continue;
                }
                let obj = sums.objective(a, b);
                // Near-ties in the objective break toward smaller amplitude,
                // then toward nonnegative sine coefficient.
                let better = match best {
                    None => true,
                    Some((bo, ba, bb)) => {
                        let tol = 1e-9 * (1.0 + bo.abs());
                        if obj < bo - tol {
                            true
                        } else if obj <= bo + tol {
                            let (amp, bamp) = (a.hypot(b), ba.hypot(bb));
                            amp < bamp - tol || ((amp - bamp).abs() <= tol && b > bb)
                        } else {
                            false
                        }
                    }
                };
                if better {
                    best = Some((obj, a, b));
                }
            }
        }
        best
    };

    let mut step = grid.step;
    let mut slack = grid.constraint_slack;
    let mut incumbent = scan(
        grid.alpha_range.0,
        grid.alpha_range.1,
        grid.beta_range.0,
        grid.beta_range.1,
        step,
        slack,
    )
    .ok_or_else(|| Error::Infeasible("no feasible point in the oracle grid".into()))?;
    for _ in 0..grid.refinement_levels {
        let half = 5.0 * step;
        let (_, a, b) = incumbent;
        step /= 10.0;
        slack /= 10.0;
        if let Some(found) = scan(a - half, a + half, b - half, b + half, step, slack) {
            incumbent = found;
        }
    }
    let (_, alpha, beta) = incumbent;
    Ok(SigmaReference {
        cos_coefficient: alpha,
        sin_coefficient: beta,
        power_mismatch: sums.grid_power - sums.output_power(alpha, beta),
        arm_power_residual: sums.constraint(alpha, beta).abs(),
    })
}

/// Builds the reference map from the port spec and the solved common-mode
/// reference.
///
/// Grid rows use the configured grid phase; the output row uses the phase
/// realized by the solved `(alpha, beta)` pair, so `O w` reproduces the
/// solved waveform exactly.
pub fn build_output_map(spec: &PortSpec, sigma: &SigmaReference) -> Result<OutputMap> {
    if spec.grid_peak_voltage <= 0.0 || spec.output_peak_voltage <= 0.0 {
        return Err(Error::InvalidParameter(
            "port voltages must be strictly positive".into(),
        ));
    }
    let (i_delta, phase1) = grid_current_reference(spec)?;
    let k4 = 2.0 * i_delta / spec.grid_peak_voltage;
    let k5 = sigma.amplitude() / spec.output_peak_voltage;
    let phase2 = sigma.phase_lag();
    Ok(OutputMap {
        o1: k4 * phase1.cos(),
        o2: -k4 * phase1.sin(),
        o3: k5 * phase2.cos(),
        o4: -k5 * phase2.sin(),
        k4,
        k5,
    })
}
