//! Run configuration: one self-describing TOML file with a versioned schema.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use mmc_core::error::{Error, Result};
use mmc_core::model::{CircuitParams, Mat6, PortSpec};
use mmc_core::sim::{ScenarioKind, SimConfig};
use mmc_core::synthesis::{SynthesisObjective, SynthesisOptions};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub schema_version: u32,
    pub circuit: CircuitSection,
    pub ports: PortsSection,
    pub constraints: ConstraintsSection,
    #[serde(default)]
    pub synthesis: SynthesisSection,
    pub certification: CertificationSection,
    pub simulation: SimulationSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircuitSection {
    pub arm_inductance_h: f64,
    pub arm_resistance_ohm: f64,
    pub module_capacitance_f: f64,
    pub modules_per_arm: u32,
    pub sample_period_s: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortsSection {
    pub grid_peak_voltage_v: f64,
    pub grid_frequency_hz: f64,
    #[serde(default)]
    pub grid_current_phase_rad: f64,
    pub output_peak_voltage_v: f64,
    pub output_frequency_hz: f64,
    #[serde(default)]
    pub output_current_phase_rad: f64,
    pub grid_peak_current_a: f64,
    pub output_peak_current_a: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintsSection {
    pub state_fraction: f64,
    pub input_fraction: f64,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SynthesisSection {
    /// "max-logdet" (default) or "max-margin".
    pub objective: Option<String>,
    /// Scalar diagonal gain: Kx = c * I6.
    pub fixed_kx_diag: Option<f64>,
    /// Full 6x6 gain, row major.
    pub fixed_kx: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub monolithic: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificationSection {
    pub eta_low: f64,
    pub eta_high: f64,
    #[serde(default = "default_cert_margin")]
    pub margin: f64,
}

fn default_cert_margin() -> f64 {
    1e-9
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    /// "linear" or "bilinear".
    pub scenario: String,
    pub steps: usize,
    #[serde(default = "default_stride")]
    pub record_stride: usize,
    #[serde(default)]
    pub initial_exogenous_phase_rad: f64,
    pub total_arm_voltage_init_v: Option<f64>,
    pub initial_reduced_state_a: Option<Vec<f64>>,
    pub initial_full_state: Option<Vec<f64>>,
    #[serde(default = "default_transient")]
    pub transient_discard_periods: usize,
}

fn default_stride() -> usize {
    1
}

fn default_transient() -> usize {
    10
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

/// Validated run configuration in core types.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub circuit: CircuitParams,
    pub ports: PortSpec,
    pub state_fraction: f64,
    pub input_fraction: f64,
    pub synthesis: SynthesisOptions,
    pub eta_low: f64,
    pub eta_high: f64,
    pub certification_margin: f64,
    pub simulation: SimConfig,
    pub transient_discard_periods: usize,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidParameter(format!("cannot read {}: {e}", path.display())))?;
        let raw: RawConfig = toml::from_str(&text)
            .map_err(|e| Error::InvalidParameter(format!("{}: {e}", path.display())))?;
        RunConfig::from_raw(raw)
    }

    pub fn from_raw(raw: RawConfig) -> Result<RunConfig> {
        if raw.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidParameter(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                raw.schema_version
            )));
        }
        let circuit = CircuitParams::new(
            raw.circuit.arm_inductance_h,
            raw.circuit.arm_resistance_ohm,
            raw.circuit.module_capacitance_f,
            raw.circuit.modules_per_arm,
            raw.circuit.sample_period_s,
        )?;
        let ports = PortSpec::new(
            raw.ports.grid_peak_voltage_v,
            raw.ports.grid_frequency_hz,
            raw.ports.grid_current_phase_rad,
            raw.ports.output_peak_voltage_v,
            raw.ports.output_frequency_hz,
            raw.ports.output_current_phase_rad,
            raw.ports.grid_peak_current_a,
            raw.ports.output_peak_current_a,
        )?;
        ports.validate_sampling(&circuit).map_err(|e| {
            Error::InvalidParameter(format!("ports.grid_frequency_hz/output_frequency_hz: {e}"))
        })?;

        for (name, v) in [
            ("constraints.state_fraction", raw.constraints.state_fraction),
            ("constraints.input_fraction", raw.constraints.input_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must lie in (0, 1), got {v}"
                )));
            }
        }

        let objective = match raw.synthesis.objective.as_deref() {
            None | Some("max-logdet") => SynthesisObjective::MaxLogDet,
            Some("max-margin") => SynthesisObjective::MaxMargin,
            Some(other) => {
                return Err(Error::InvalidParameter(format!(
                    "synthesis.objective '{other}' (expected 'max-logdet' or 'max-margin')"
                )))
            }
        };
        let fixed_kx = match (&raw.synthesis.fixed_kx_diag, &raw.synthesis.fixed_kx) {
            (Some(_), Some(_)) => {
                return Err(Error::InvalidParameter(
                    "synthesis.fixed_kx_diag and synthesis.fixed_kx are mutually exclusive".into(),
                ))
            }
            (Some(c), None) => Some(Mat6::identity() * *c),
            (None, Some(rows)) => {
                if rows.len() != 6 || rows.iter().any(|r| r.len() != 6) {
                    return Err(Error::InvalidParameter(
                        "synthesis.fixed_kx must be a 6x6 matrix".into(),
                    ));
                }
                Some(Mat6::from_fn(|i, j| rows[i][j]))
            }
            (None, None) => None,
        };

        let scenario = match raw.simulation.scenario.as_str() {
            "linear" => ScenarioKind::Linear,
            "bilinear" => ScenarioKind::Bilinear,
            other => {
                return Err(Error::InvalidParameter(format!(
                    "simulation.scenario '{other}' (expected 'linear' or 'bilinear')"
                )))
            }
        };
        let initial_reduced_state = match &raw.simulation.initial_reduced_state_a {
            Some(v) if v.len() == 6 => Some(mmc_core::model::Vec6::from_fn(|i, _| v[i])),
            Some(v) => {
                return Err(Error::InvalidParameter(format!(
                    "simulation.initial_reduced_state_a has {} entries, expected 6",
                    v.len()
                )))
            }
            None => None,
        };
        let initial_full_state = match &raw.simulation.initial_full_state {
            Some(v) if v.len() == 12 => Some(mmc_core::model::Vec12::from_fn(|i, _| v[i])),
            Some(v) => {
                return Err(Error::InvalidParameter(format!(
                    "simulation.initial_full_state has {} entries, expected 12",
                    v.len()
                )))
            }
            None => None,
        };
        let simulation = SimConfig {
            scenario,
            steps: raw.simulation.steps,
            initial_reduced_state,
            initial_full_state,
            initial_exogenous_phase: raw.simulation.initial_exogenous_phase_rad,
            total_arm_voltage_init: raw.simulation.total_arm_voltage_init_v,
            record_stride: raw.simulation.record_stride,
        };
        simulation
            .validate(&ports)
            .map_err(|e| Error::InvalidParameter(format!("simulation: {e}")))?;

        if raw.certification.margin < 0.0 || raw.certification.margin.is_nan() {
            return Err(Error::InvalidParameter(
                "certification.margin must be nonnegative".into(),
            ));
        }
        // box bounds validated on use by SchedulingBox; reject NaN early
        if !(raw.certification.eta_low.is_finite() && raw.certification.eta_high.is_finite()) {
            return Err(Error::InvalidParameter(
                "certification.eta_low/eta_high must be finite".into(),
            ));
        }

        Ok(RunConfig {
            circuit,
            ports,
            state_fraction: raw.constraints.state_fraction,
            input_fraction: raw.constraints.input_fraction,
            synthesis: SynthesisOptions {
                objective,
                fixed_kx,
                monolithic: raw.synthesis.monolithic,
            },
            eta_low: raw.certification.eta_low,
            eta_high: raw.certification.eta_high,
            certification_margin: raw.certification.margin,
            simulation,
            transient_discard_periods: raw.simulation.transient_discard_periods,
            output_dir: raw.output.dir.unwrap_or_else(|| PathBuf::from("out")),
        })
    }
}
