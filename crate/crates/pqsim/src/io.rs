//! File formats: trace CSV, conditional-statistics and metrics documents,
//! scan and phase-curve tables. All writers build the full byte string in
//! memory so identical inputs produce identical files.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::estimator::ConditionalStats;
use crate::metrics::{MetricsReport, PlanarMoments, SubtractionMode, ValueWithError};
use crate::probe::{Trace, TraceLabel, TraceSample};

pub const TRACE_HEADER: &str = "t_us,phi_rad,n_photons,label,trial";

/// Serialize traces as one concatenated CSV. Time is in microseconds with
/// 9 significant digits (exact for pulse-grid times); angles and photon
/// numbers carry full round-trip precision.
pub fn render_traces(with_traces: &[Trace], no_traces: &[Trace]) -> String {
    let mut out = String::new();
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for (label, traces) in [
        (TraceLabel::WithAtoms, with_traces),
        (TraceLabel::NoAtoms, no_traces),
    ] {
        for (trial, trace) in traces.iter().enumerate() {
            for s in &trace.samples {
                let _ = writeln!(
                    out,
                    "{:.8e},{:.16e},{:.16e},{},{}",
                    s.t * 1e6,
                    s.phi,
                    s.n_photons,
                    label.as_str(),
                    trial
                );
            }
        }
    }
    out
}

pub fn write_traces(path: &Path, with_traces: &[Trace], no_traces: &[Trace]) -> Result<()> {
    std::fs::write(path, render_traces(with_traces, no_traces))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parse a trace CSV back into per-trial traces, sorted by time within a
/// trial. Returns (with_atoms, no_atoms) ordered by trial index.
pub fn read_traces(path: &Path, t_e: f64) -> Result<(Vec<Trace>, Vec<Trace>)> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_traces(&text, t_e, &path.display().to_string())
}

pub fn parse_traces(text: &str, t_e: f64, file: &str) -> Result<(Vec<Trace>, Vec<Trace>)> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == TRACE_HEADER => {}
        Some((_, header)) => {
            return Err(Error::TraceFormat {
                file: file.into(),
                line: 1,
                message: format!("unexpected header '{header}'"),
            })
        }
        None => {
            return Err(Error::TraceFormat {
                file: file.into(),
                line: 1,
                message: "empty file".into(),
            })
        }
    }

    let mut groups: std::collections::BTreeMap<(u8, u64), Vec<TraceSample>> =
        std::collections::BTreeMap::new();
    for (idx, raw) in lines {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::TraceFormat {
                file: file.into(),
                line: lineno,
                message: format!("expected 5 fields, found {}", fields.len()),
            });
        }
        let parse_f64 = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::TraceFormat {
                file: file.into(),
                line: lineno,
                message: format!("bad {what} '{s}'"),
            })
        };
        let t_us = parse_f64(fields[0], "time")?;
        let phi = parse_f64(fields[1], "angle")?;
        let n_photons = parse_f64(fields[2], "photon count")?;
        let label = TraceLabel::parse(fields[3]).ok_or_else(|| Error::TraceFormat {
            file: file.into(),
            line: lineno,
            message: format!("unknown label '{}'", fields[3]),
        })?;
        let trial: u64 = fields[4].parse().map_err(|_| Error::TraceFormat {
            file: file.into(),
            line: lineno,
            message: format!("bad trial index '{}'", fields[4]),
        })?;
        if !phi.is_finite() {
            return Err(Error::TraceFormat {
                file: file.into(),
                line: lineno,
                message: "non-finite angle".into(),
            });
        }
        let key = (
            match label {
                TraceLabel::WithAtoms => 0,
                TraceLabel::NoAtoms => 1,
            },
            trial,
        );
        groups.entry(key).or_default().push(TraceSample {
            t: t_us * 1e-6,
            phi,
            n_photons,
        });
    }

    let mut with_traces = Vec::new();
    let mut no_traces = Vec::new();
    for ((label_code, trial), mut samples) in groups {
        samples.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap());
        let label = if label_code == 0 {
            TraceLabel::WithAtoms
        } else {
            TraceLabel::NoAtoms
        };
        let trace = Trace::new(samples, t_e, label, trial)?;
        match label {
            TraceLabel::WithAtoms => with_traces.push(trace),
            TraceLabel::NoAtoms => no_traces.push(trace),
        }
    }
    Ok((with_traces, no_traces))
}

fn write_matrix(out: &mut String, key: &str, m: &Matrix2<f64>) {
    let _ = writeln!(
        out,
        "{key} = {:.8e} {:.8e} {:.8e} {:.8e}",
        m[(0, 0)],
        m[(0, 1)],
        m[(1, 0)],
        m[(1, 1)]
    );
}

/// Conditional statistics plus the planar moments they were computed with,
/// as a flat key/matrix text document (matrices row-major, 9 significant
/// digits).
pub fn render_conditional_stats(stats: &ConditionalStats, moments: &PlanarMoments) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "n_trials = {}", stats.n_trials);
    write_matrix(&mut out, "gamma_f1", &stats.gamma_f1);
    write_matrix(&mut out, "gamma_f2", &stats.gamma_f2);
    write_matrix(&mut out, "gamma_cross", &stats.gamma_cross);
    write_matrix(&mut out, "gamma_cond", &stats.gamma_cond);
    write_matrix(&mut out, "gamma_zero", &stats.gamma_zero);
    write_matrix(&mut out, "std_err", &stats.std_err);
    let _ = writeln!(out, "mean_y = {:.8e}", moments.mean_y);
    let _ = writeln!(out, "mean_z = {:.8e}", moments.mean_z);
    let _ = writeln!(out, "f_par = {:.8e}", moments.f_par);
    let _ = writeln!(out, "n_atoms_in = {:.8e}", moments.n_atoms_in);
    let _ = writeln!(out, "n_tilde = {:.8e}", moments.n_tilde);
    out.push_str("residuals:\n");
    for r in &stats.residuals {
        let _ = writeln!(out, "{:.8e} {:.8e}", r[0], r[1]);
    }
    out
}

pub fn write_conditional_stats(
    path: &Path,
    stats: &ConditionalStats,
    moments: &PlanarMoments,
) -> Result<()> {
    std::fs::write(path, render_conditional_stats(stats, moments))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parse a conditional-statistics document back into the stats and moments.
pub fn parse_conditional_stats(text: &str) -> Result<(ConditionalStats, PlanarMoments)> {
    let mut n_trials: Option<usize> = None;
    let mut matrices: std::collections::BTreeMap<String, Matrix2<f64>> =
        std::collections::BTreeMap::new();
    let mut scalars: std::collections::BTreeMap<String, f64> = std::collections::BTreeMap::new();
    let mut residuals: Vec<Vector2<f64>> = Vec::new();
    let mut in_residuals = false;

    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line == "residuals:" {
            in_residuals = true;
            continue;
        }
        if in_residuals {
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 2 {
                return Err(Error::Config(format!(
                    "stats line {}: residual rows need 2 values",
                    idx + 1
                )));
            }
            let y: f64 = parts[0]
                .parse()
                .map_err(|_| Error::Config(format!("stats line {}: bad residual", idx + 1)))?;
            let z: f64 = parts[1]
                .parse()
                .map_err(|_| Error::Config(format!("stats line {}: bad residual", idx + 1)))?;
            residuals.push(Vector2::new(y, z));
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("stats line {}: expected key = value", idx + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        if key == "n_trials" {
            n_trials = Some(value.parse().map_err(|_| {
                Error::Config(format!("stats line {}: bad n_trials", idx + 1))
            })?);
            continue;
        }
        let nums: Vec<f64> = value
            .split_whitespace()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::Config(format!("stats line {}: bad number '{s}'", idx + 1)))
            })
            .collect::<Result<_>>()?;
        match nums.len() {
            1 => {
                scalars.insert(key.to_string(), nums[0]);
            }
            4 => {
                matrices.insert(
                    key.to_string(),
                    Matrix2::new(nums[0], nums[1], nums[2], nums[3]),
                );
            }
            n => {
                return Err(Error::Config(format!(
                    "stats line {}: expected 1 or 4 values, found {n}",
                    idx + 1
                )));
            }
        }
    }

    let need_matrix = |name: &str| -> Result<Matrix2<f64>> {
        matrices
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("stats document missing {name}")))
    };
    let need_scalar = |name: &str| -> Result<f64> {
        scalars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("stats document missing {name}")))
    };

    let stats = ConditionalStats {
        gamma_f1: need_matrix("gamma_f1")?,
        gamma_f2: need_matrix("gamma_f2")?,
        gamma_cross: need_matrix("gamma_cross")?,
        gamma_cond: need_matrix("gamma_cond")?,
        gamma_zero: need_matrix("gamma_zero")?,
        std_err: need_matrix("std_err")?,
        n_trials: n_trials.ok_or_else(|| Error::Config("stats document missing n_trials".into()))?,
        residuals,
    };
    let gamma = stats.gamma_cond;
    let moments = PlanarMoments {
        mean_y: need_scalar("mean_y")?,
        mean_z: need_scalar("mean_z")?,
        var_y: gamma[(0, 0)],
        var_z: gamma[(1, 1)],
        cov_yz: gamma[(0, 1)],
        f_par: need_scalar("f_par")?,
        n_atoms_in: need_scalar("n_atoms_in")?,
        n_tilde: need_scalar("n_tilde")?,
    };
    Ok((stats, moments))
}

pub fn read_conditional_stats(path: &Path) -> Result<(ConditionalStats, PlanarMoments)> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_conditional_stats(&text)
}

fn fmt_value(v: &ValueWithError) -> String {
    format!("{:.3e} +/- {:.3e}", v.value, v.std_err)
}

/// Metrics document: key: value lines with dimensionless values at 4
/// significant digits plus standard errors, followed by two-column CSV
/// curve blocks.
pub fn render_metrics(report: &MetricsReport, moments: &PlanarMoments) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "mode = {}", report.subtraction_mode.as_str());
    let _ = writeln!(out, "xi_par_sq = {}", fmt_value(&report.xi_par_sq));
    let _ = writeln!(out, "xi_y_sq = {}", fmt_value(&report.xi_y_sq));
    let _ = writeln!(out, "xi_z_sq = {}", fmt_value(&report.xi_z_sq));
    let _ = writeln!(out, "xi_e_sq = {}", fmt_value(&report.xi_e_sq));
    let _ = writeln!(out, "xi_m_sq = {}", fmt_value(&report.xi_m_sq));
    let _ = writeln!(out, "entangled = {}", report.entangled);
    let _ = writeln!(out, "f_par_spins = {:.8e}", moments.f_par);
    let _ = writeln!(out, "n_tilde = {:.8e}", moments.n_tilde);
    let _ = writeln!(out, "sql_rad2 = {:.8e}", report.sql);
    if let Some((phi, v)) = report.min_phase_variance() {
        let _ = writeln!(out, "min_phase_variance_rad2 = {v:.8e}");
        let _ = writeln!(out, "min_phase_variance_phi_rad = {phi:.8e}");
        let _ = writeln!(out, "min_phase_deviation_rad = {:.8e}", v.sqrt());
    }
    out.push_str("phase_curve_rad_rad2:\n");
    for (phi, v) in &report.phase_curve {
        match v {
            Some(v) => {
                let _ = writeln!(out, "{phi:.8e},{v:.8e}");
            }
            None => {
                let _ = writeln!(out, "{phi:.8e},");
            }
        }
    }
    out.push_str("enhancement_db:\n");
    for (phi, v) in &report.enhancement_db {
        match v {
            Some(v) => {
                let _ = writeln!(out, "{phi:.8e},{v:.8e}");
            }
            None => {
                let _ = writeln!(out, "{phi:.8e},");
            }
        }
    }
    out
}

pub fn write_metrics(path: &Path, report: &MetricsReport, moments: &PlanarMoments) -> Result<()> {
    std::fs::write(path, render_metrics(report, moments))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Scan table: axis value, squeezing parameter, its error, and the total
/// conditional variance.
pub fn render_scan(scan: &crate::harness::ScanResult, axis_name: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{axis_name},xi_par_sq,xi_par_sq_stderr,tr_gamma_cond");
    for p in &scan.points {
        let _ = writeln!(
            out,
            "{:.8e},{:.8e},{:.8e},{:.8e}",
            p.axis, p.xi_par_sq.value, p.xi_par_sq.std_err, p.tr_gamma_cond
        );
    }
    out
}

pub fn write_scan(path: &Path, scan: &crate::harness::ScanResult, axis_name: &str) -> Result<()> {
    std::fs::write(path, render_scan(scan, axis_name))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Phase-curve table for plotting: the PQS against the reference states,
/// with empty fields at divergent phases.
pub struct PhaseCurveRow {
    pub phi: f64,
    pub pqs: Option<f64>,
    pub pcss: Option<f64>,
    pub sss: Option<f64>,
    pub db_pqs: Option<f64>,
    pub db_sss: Option<f64>,
}

pub fn render_phase_curve(rows: &[PhaseCurveRow]) -> String {
    let mut out =
        String::from("phi_rad,var_pqs_rad2,var_pcss_rad2,var_sss_rad2,db_pqs_vs_pcss,db_sss_vs_pcss\n");
    let cell = |v: Option<f64>| v.map(|v| format!("{v:.8e}")).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            out,
            "{:.8e},{},{},{},{},{}",
            r.phi,
            cell(r.pqs),
            cell(r.pcss),
            cell(r.sss),
            cell(r.db_pqs),
            cell(r.db_sss)
        );
    }
    out
}

pub fn write_phase_curve(path: &Path, rows: &[PhaseCurveRow]) -> Result<()> {
    std::fs::write(path, render_phase_curve(rows))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Round-trip helper: subtraction mode from a metrics document.
pub fn metrics_mode(text: &str) -> Option<SubtractionMode> {
    text.lines()
        .find_map(|l| l.strip_prefix("mode = "))
        .and_then(SubtractionMode::parse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::TraceLabel;

    fn sample_trace(trial: u64, label: TraceLabel) -> Trace {
        let samples = (0..5)
            .map(|k| TraceSample {
                t: (k as f64 + 0.5) * 3e-6,
                phi: 1e-3 + k as f64 * 1e-5,
                n_photons: 2.74e6,
            })
            .collect();
        Trace::new(samples, 7.5e-6, label, trial).unwrap()
    }

    #[test]
    fn traces_round_trip_losslessly() {
        let with = vec![
            sample_trace(0, TraceLabel::WithAtoms),
            sample_trace(1, TraceLabel::WithAtoms),
        ];
        let no = vec![sample_trace(0, TraceLabel::NoAtoms)];
        let text = render_traces(&with, &no);
        let (w2, n2) = parse_traces(&text, 7.5e-6, "mem").unwrap();
        assert_eq!(w2.len(), 2);
        assert_eq!(n2.len(), 1);
        for (a, b) in with.iter().zip(&w2) {
            for (sa, sb) in a.samples.iter().zip(&b.samples) {
                assert_eq!(sa.phi, sb.phi);
                assert_eq!(sa.n_photons, sb.n_photons);
                assert!((sa.t - sb.t).abs() < 1e-18);
            }
        }
    }

    #[test]
    fn shuffled_rows_are_resorted() {
        let with = vec![sample_trace(0, TraceLabel::WithAtoms)];
        let text = render_traces(&with, &[]);
        let mut lines: Vec<&str> = text.lines().collect();
        lines[1..].reverse();
        let shuffled = lines.join("\n");
        let (w2, _) = parse_traces(&shuffled, 7.5e-6, "mem").unwrap();
        assert_eq!(w2[0].samples.len(), 5);
        for w in w2[0].samples.windows(2) {
            assert!(w[1].t > w[0].t);
        }
    }

    #[test]
    fn truncated_and_malformed_rows_name_the_line() {
        let text = format!("{TRACE_HEADER}\n1.5e0,1e-3,2.74e6,with_atoms\n");
        let err = parse_traces(&text, 0.0, "bad.csv").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad.csv") && msg.contains("line 2"), "{msg}");

        let text2 = format!("{TRACE_HEADER}\n1.5e0,abc,2.74e6,with_atoms,0\n");
        assert!(parse_traces(&text2, 0.0, "x").is_err());

        let text3 = format!("{TRACE_HEADER}\n1.5e0,1e-3,2.74e6,maybe_atoms,0\n");
        assert!(parse_traces(&text3, 0.0, "x").is_err());

        assert!(parse_traces("nonsense header\n", 0.0, "x").is_err());
    }

    #[test]
    fn conditional_stats_round_trip() {
        let stats = ConditionalStats {
            gamma_f1: Matrix2::new(1.0, 0.1, 0.1, 2.0),
            gamma_f2: Matrix2::new(3.0, 0.2, 0.2, 4.0),
            gamma_cross: Matrix2::new(0.5, 0.0, 0.0, 0.5),
            gamma_cond: Matrix2::new(2.32e5, 0.64e5, 0.64e5, 3.00e5),
            gamma_zero: Matrix2::new(1.02e5, 0.14e5, 0.14e5, 1.03e5),
            std_err: Matrix2::new(0.21e5, 0.16e5, 0.16e5, 0.28e5),
            residuals: vec![Vector2::new(1.0, -2.0), Vector2::new(-0.5, 0.25)],
            n_trials: 450,
        };
        let moments = PlanarMoments::new(1.45e6, 0.0, 2.32e5, 3.0e5, 0.64e5, 1.75e6, 0.89, 0.55)
            .unwrap();
        let text = render_conditional_stats(&stats, &moments);
        let (s2, m2) = parse_conditional_stats(&text).unwrap();
        assert_eq!(s2.n_trials, 450);
        assert!((s2.gamma_cond[(0, 0)] - 2.32e5).abs() < 1.0);
        assert!((m2.f_par - 1.45e6).abs() < 1.0);
        assert_eq!(s2.residuals.len(), 2);
    }

    #[test]
    fn stats_parser_reports_missing_fields() {
        let err = parse_conditional_stats("n_trials = 10\n").unwrap_err();
        assert!(err.to_string().contains("missing"));
    }
}
