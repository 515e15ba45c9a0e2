//! Plain-text file formats: named matrix bundles, trace CSV files, and the
//! atomic write helper every artifact goes through.
//!
//! Bundle format, one section per matrix:
//!
//! ```text
//! # matrix bundle v1
//! [Kx] rows=6 cols=6
//! <rows of space-separated values>
//! ```
//!
//! Values print through Rust's shortest round-trip float formatting, so a
//! read-back reproduces every matrix bit-exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
#[cfg(test)]
use crate::model::Mat6;
use crate::model::{Mat4, Mat6x8, Vec12, Vec6, Vec8};
use crate::sim::{ScenarioKind, SimSummary, SimTrace};
use crate::synthesis::{Controller, SylvesterSolution};

const BUNDLE_HEADER: &str = "# matrix bundle v1";

/// Writes `bytes` to `path` through a temp-file-then-rename sequence, so a
/// failed run never leaves a truncated artifact behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidParameter(format!("invalid path {}", path.display())))?;
    let mut tmp = dir.join(file_name);
    tmp.set_extension(match path.extension() {
        Some(e) => format!("{}.tmp", e.to_string_lossy()),
        None => "tmp".into(),
    });
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Serializes named matrices into the bundle text format.
pub fn format_matrix_bundle(sections: &[(&str, DMatrix<f64>)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{BUNDLE_HEADER}");
    for (name, m) in sections {
        let _ = writeln!(out, "[{name}] rows={} cols={}", m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
    }
    out
}

/// Writes a matrix bundle to disk.
pub fn write_matrix_bundle(path: &Path, sections: &[(&str, DMatrix<f64>)]) -> Result<()> {
    write_atomic(path, format_matrix_bundle(sections).as_bytes())
}

/// Parses a bundle back into its named sections.
pub fn read_matrix_bundle(path: &Path) -> Result<BTreeMap<String, DMatrix<f64>>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == BUNDLE_HEADER => {}
        other => {
            return Err(Error::Parse(format!(
                "{}: expected bundle header, found {other:?}",
                path.display()
            )))
        }
    }
    let mut sections = BTreeMap::new();
    let mut pending: Option<(String, usize, usize, Vec<f64>)> = None;
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            if let Some((name, dims)) = rest.split_once(']') {
                flush_section(&mut sections, pending.take(), path)?;
                let mut rows = None;
                let mut cols = None;
                for part in dims.split_whitespace() {
                    if let Some(v) = part.strip_prefix("rows=") {
                        rows = v.parse::<usize>().ok();
                    } else if let Some(v) = part.strip_prefix("cols=") {
                        cols = v.parse::<usize>().ok();
                    }
                }
                let (rows, cols) = rows.zip(cols).ok_or_else(|| {
                    Error::Parse(format!(
                        "{}: malformed section header '{line}'",
                        path.display()
                    ))
                })?;
                pending = Some((
                    name.to_string(),
                    rows,
                    cols,
                    Vec::with_capacity(rows * cols),
                ));
                continue;
            }
        }
        let Some((_, _, cols, data)) = pending.as_mut() else {
            return Err(Error::Parse(format!(
                "{}: data before any section header",
                path.display()
            )));
        };
        let before = data.len();
        for tok in line.split_whitespace() {
            data.push(tok.parse::<f64>().map_err(|e| {
                Error::Parse(format!("{}: bad float '{tok}': {e}", path.display()))
            })?);
        }
        if data.len() - before != *cols {
            return Err(Error::Parse(format!(
                "{}: row with {} entries, expected {cols}",
                path.display(),
                data.len() - before
            )));
        }
    }
    flush_section(&mut sections, pending.take(), path)?;
    Ok(sections)
}

fn flush_section(
    sections: &mut BTreeMap<String, DMatrix<f64>>,
    pending: Option<(String, usize, usize, Vec<f64>)>,
    path: &Path,
) -> Result<()> {
    if let Some((name, rows, cols, data)) = pending {
        if data.len() != rows * cols {
            return Err(Error::Parse(format!(
                "{}: section '{name}' has {} values, expected {}",
                path.display(),
                data.len(),
                rows * cols
            )));
        }
        sections.insert(name, DMatrix::from_row_slice(rows, cols, &data));
    }
    Ok(())
}

fn to_dyn<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_fn(R, C, |i, j| m[(i, j)])
}

fn section_fixed<const R: usize, const C: usize>(
    sections: &BTreeMap<String, DMatrix<f64>>,
    name: &str,
    path: &Path,
) -> Result<nalgebra::SMatrix<f64, R, C>> {
    let m = sections
        .get(name)
        .ok_or_else(|| Error::Parse(format!("{}: missing section '{name}'", path.display())))?;
    if m.nrows() != R || m.ncols() != C {
        return Err(Error::Parse(format!(
            "{}: section '{name}' is {}x{}, expected {R}x{C}",
            path.display(),
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(nalgebra::SMatrix::<f64, R, C>::from_fn(|i, j| m[(i, j)]))
}

/// Writes the controller bundle: gains, level-set matrix and the regulator
/// pair, under the documented section names.
pub fn write_controller_bundle(
    path: &Path,
    controller: &Controller,
    sylvester: &SylvesterSolution,
) -> Result<()> {
    write_matrix_bundle(
        path,
        &[
            ("Kx", to_dyn(&controller.kx)),
            ("Kw", to_dyn(&controller.kw)),
            ("P", to_dyn(&controller.p)),
            ("Pi", to_dyn(&sylvester.pi)),
            ("Gamma", to_dyn(&sylvester.gamma)),
        ],
    )
}

/// Reads a controller bundle back.
pub fn read_controller_bundle(path: &Path) -> Result<(Controller, SylvesterSolution)> {
    let sections = read_matrix_bundle(path)?;
    let controller = Controller {
        kx: section_fixed::<6, 6>(&sections, "Kx", path)?,
        kw: section_fixed::<6, 8>(&sections, "Kw", path)?,
        p: section_fixed::<6, 6>(&sections, "P", path)?,
    };
    let pi: Mat6x8 = section_fixed::<6, 8>(&sections, "Pi", path)?;
    let gamma: Mat6x8 = section_fixed::<6, 8>(&sections, "Gamma", path)?;
    Ok((
        controller,
        SylvesterSolution {
            pi,
            gamma,
            residual_dynamics: 0.0,
            residual_output: 0.0,
        },
    ))
}

/// Writes the certification bundle: quadratic form, box, margins and the
/// feasibility flag, in the same bundle format as the controller.
pub fn write_certificate_bundle(
    path: &Path,
    q_phase: &Mat4,
    eta_low: f64,
    eta_high: f64,
    vertex_margins: &[((f64, f64), f64)],
    margin_used: f64,
    feasible: bool,
) -> Result<()> {
    let margins = DMatrix::from_fn(vertex_margins.len(), 3, |i, j| match j {
        0 => vertex_margins[i].0 .0,
        1 => vertex_margins[i].0 .1,
        _ => vertex_margins[i].1,
    });
    write_matrix_bundle(
        path,
        &[
            ("Q_phase", to_dyn(q_phase)),
            ("box", DMatrix::from_row_slice(1, 2, &[eta_low, eta_high])),
            ("vertex_margins", margins),
            ("margin_used", DMatrix::from_row_slice(1, 1, &[margin_used])),
            (
                "feasible",
                DMatrix::from_row_slice(1, 1, &[feasible as u8 as f64]),
            ),
        ],
    )
}

/// Semantic column labels of the exogenous vector.
const EXOGENOUS_LABELS: [&str; 8] = [
    "vg_a", "vgq_a", "vg_b", "vgq_b", "vg_c", "vgq_c", "vz", "vzq",
];
/// Semantic column labels of the reduced state.
const REDUCED_LABELS: [&str; 6] = ["iu_a", "il_a", "iu_b", "il_b", "iu_c", "il_c"];

fn matrix_csv(m: &DMatrix<f64>, columns: &[&str]) -> String {
    let mut out = columns.join(",");
    out.push('\n');
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

/// Dumps every model matrix as a CSV file (row per matrix row, header row
/// naming the columns) under `dir`.
pub fn write_model_csv(dir: &Path, model: &crate::model::LinearModel) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let dumps: [(&str, DMatrix<f64>, &[&str]); 6] = [
        ("a_bar.csv", to_dyn(&model.a_bar), &REDUCED_LABELS),
        ("b_bar.csv", to_dyn(&model.b_bar), &REDUCED_LABELS),
        ("e.csv", to_dyn(&model.e), &EXOGENOUS_LABELS),
        ("c_bar.csv", to_dyn(&model.c_bar), &REDUCED_LABELS),
        ("s.csv", to_dyn(&model.s), &EXOGENOUS_LABELS),
        ("o.csv", to_dyn(&model.o), &EXOGENOUS_LABELS),
    ];
    for (name, m, cols) in dumps {
        write_atomic(&dir.join(name), matrix_csv(&m, cols).as_bytes())?;
    }
    Ok(())
}

/// Fixed trace CSV column order. The state block width depends on the
/// scenario: the linear plant records the six arm currents, the bilinear
/// plant the full twelve states plus the deviation columns.
fn trace_header(scenario: ScenarioKind) -> String {
    let mut cols: Vec<String> = vec!["time".into()];
    cols.extend((1..=8).map(|i| format!("w{i}")));
    match scenario {
        ScenarioKind::Linear => cols.extend((1..=6).map(|i| format!("x{i}"))),
        ScenarioKind::Bilinear => cols.extend((1..=12).map(|i| format!("x{i}"))),
    }
    cols.extend((1..=6).map(|i| format!("u{i}")));
    cols.extend((1..=6).map(|i| format!("eta{i}")));
    cols.extend((1..=6).map(|i| format!("y{i}")));
    cols.extend((1..=6).map(|i| format!("r{i}")));
    cols.extend((1..=6).map(|i| format!("ex{i}")));
    cols.extend((1..=6).map(|i| format!("eu{i}")));
    if scenario == ScenarioKind::Bilinear {
        cols.extend((1..=12).map(|i| format!("eps{i}")));
    }
    cols.push("V_lyap".into());
    cols.push("levelset".into());
    cols.push("sat_flag".into());
    cols.join(",")
}

/// Writes a simulation trace as CSV, one row per recorded step.
pub fn write_trace_csv(path: &Path, trace: &SimTrace) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "{}", trace_header(trace.scenario));
    for k in 0..trace.time.len() {
        let mut row: Vec<String> = vec![format!("{}", trace.time[k])];
        row.extend(trace.exogenous[k].iter().map(|v| format!("{v}")));
        match trace.scenario {
            ScenarioKind::Linear => {
                row.extend(trace.reduced_state[k].iter().map(|v| format!("{v}")));
            }
            ScenarioKind::Bilinear => {
                row.extend(trace.full_state[k].iter().map(|v| format!("{v}")));
            }
        }
        row.extend(trace.input[k].iter().map(|v| format!("{v}")));
        row.extend(trace.insertion[k].iter().map(|v| format!("{v}")));
        row.extend(trace.output[k].iter().map(|v| format!("{v}")));
        row.extend(trace.reference[k].iter().map(|v| format!("{v}")));
        row.extend(trace.state_error[k].iter().map(|v| format!("{v}")));
        row.extend(trace.input_error[k].iter().map(|v| format!("{v}")));
        if trace.scenario == ScenarioKind::Bilinear {
            row.extend(trace.deviation[k].iter().map(|v| format!("{v}")));
        }
        row.push(format!("{}", trace.lyapunov[k]));
        row.push(format!("{}", trace.levelset[k]));
        row.push(format!("{}", trace.saturated[k] as u8));
        let _ = writeln!(out, "{}", row.join(","));
    }
    write_atomic(path, out.as_bytes())
}

/// Reads a trace CSV produced by [`write_trace_csv`]. Sample period and
/// stride are reconstructed from the time column; summary statistics are
/// recomputed over the recorded rows.
pub fn read_trace_csv(path: &Path) -> Result<SimTrace> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("{}: empty file", path.display())))?;
    let scenario = if header == trace_header(ScenarioKind::Bilinear) {
        ScenarioKind::Bilinear
    } else if header == trace_header(ScenarioKind::Linear) {
        ScenarioKind::Linear
    } else {
        return Err(Error::Parse(format!(
            "{}: unrecognized trace header",
            path.display()
        )));
    };
    let ncols = header.split(',').count();

    let mut trace = SimTrace {
        scenario,
        sample_period: 0.0,
        record_stride: 1,
        time: Vec::new(),
        exogenous: Vec::new(),
        reduced_state: Vec::new(),
        full_state: Vec::new(),
        input: Vec::new(),
        insertion: Vec::new(),
        output: Vec::new(),
        reference: Vec::new(),
        tracking_error: Vec::new(),
        state_error: Vec::new(),
        input_error: Vec::new(),
        deviation: Vec::new(),
        lyapunov: Vec::new(),
        levelset: Vec::new(),
        saturated: Vec::new(),
        summary: SimSummary {
            total_steps: 0,
            max_tracking_error_norm: 0.0,
            max_reference_norm: 0.0,
            max_levelset: 0.0,
            saturated_steps: 0,
            max_deviation_norm: 0.0,
        },
    };

    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|t| {
                t.parse::<f64>().map_err(|e| {
                    Error::Parse(format!(
                        "{}:{}: bad float '{t}': {e}",
                        path.display(),
                        ln + 2
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if vals.len() != ncols {
            return Err(Error::Parse(format!(
                "{}:{}: {} columns, expected {ncols}",
                path.display(),
                ln + 2,
                vals.len()
            )));
        }
        let mut it = vals.into_iter();
        let mut take = |n: usize| -> Vec<f64> { (&mut it).take(n).collect() };
        trace.time.push(take(1)[0]);
        trace.exogenous.push(Vec8::from_vec(take(8)));
        match scenario {
            ScenarioKind::Linear => {
                let x = Vec6::from_vec(take(6));
                trace.reduced_state.push(x);
            }
            ScenarioKind::Bilinear => {
                let x = Vec12::from_vec(take(12));
                trace
                    .reduced_state
                    .push(crate::model::reduced_from_full(&x));
                trace.full_state.push(x);
            }
        }
        trace.input.push(Vec6::from_vec(take(6)));
        trace.insertion.push(Vec6::from_vec(take(6)));
        let y = Vec6::from_vec(take(6));
        let r = Vec6::from_vec(take(6));
        trace.output.push(y);
        trace.reference.push(r);
        trace.tracking_error.push(y - r);
        trace.state_error.push(Vec6::from_vec(take(6)));
        trace.input_error.push(Vec6::from_vec(take(6)));
        if scenario == ScenarioKind::Bilinear {
            trace.deviation.push(Vec12::from_vec(take(12)));
        }
        trace.lyapunov.push(take(1)[0]);
        trace.levelset.push(take(1)[0]);
        trace.saturated.push(take(1)[0] != 0.0);

        let s = &mut trace.summary;
        s.max_tracking_error_norm = s.max_tracking_error_norm.max((y - r).norm());
        s.max_reference_norm = s.max_reference_norm.max(r.norm());
        s.max_levelset = s.max_levelset.max(*trace.levelset.last().unwrap());
        s.saturated_steps += *trace.saturated.last().unwrap() as usize;
        if let Some(eps) = trace.deviation.last() {
            s.max_deviation_norm = s.max_deviation_norm.max(eps.norm());
        }
    }
    if trace.time.len() >= 2 {
        trace.sample_period = trace.time[1] - trace.time[0];
    }
    trace.summary.total_steps = trace.time.len();
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundle_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle.txt");
        let a = DMatrix::from_fn(3, 2, |i, j| (i as f64 + 1.0) / (j as f64 + 7.0));
        let b = DMatrix::from_row_slice(1, 1, &[f64::MIN_POSITIVE]);
        write_matrix_bundle(&path, &[("A", a.clone()), ("tiny", b.clone())]).unwrap();
        let sections = read_matrix_bundle(&path).unwrap();
        assert_eq!(sections["A"], a);
        assert_eq!(sections["tiny"], b);
    }

    #[test]
    fn controller_bundle_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("controller.bundle");
        let controller = Controller {
            kx: Mat6::identity() * -3.25,
            kw: Mat6x8::from_fn(|i, j| (i * 8 + j) as f64 / 17.0),
            p: Mat6::identity() * 0.125,
        };
        let sylvester = SylvesterSolution {
            pi: Mat6x8::from_fn(|i, j| (i + j) as f64 * 0.3),
            gamma: Mat6x8::from_fn(|i, j| (i as f64 - j as f64) * 1.7),
            residual_dynamics: 1e-12,
            residual_output: 1e-13,
        };
        write_controller_bundle(&path, &controller, &sylvester).unwrap();
        let (c2, s2) = read_controller_bundle(&path).unwrap();
        assert_eq!(c2.kx, controller.kx);
        assert_eq!(c2.kw, controller.kw);
        assert_eq!(c2.p, controller.p);
        assert_eq!(s2.pi, sylvester.pi);
        assert_eq!(s2.gamma, sylvester.gamma);
    }

    #[test]
    fn malformed_bundles_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "not a bundle\n").unwrap();
        assert!(read_matrix_bundle(&path).is_err());
        std::fs::write(&path, "# matrix bundle v1\n[A] rows=2 cols=2\n1 2\n3\n").unwrap();
        assert!(read_matrix_bundle(&path).is_err());
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("file.txt");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "second");
        // no temp file lingers
        let names: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1);
    }
}
