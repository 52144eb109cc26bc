//! Evaluation metrics, eigenvalue tables, trajectory exports and SVG plots.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::constraints::{bound_slacks, BoundSpec, ResolvedBounds};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::numerics::{eigenvalues, ComplexScalar, DenseMatrix};
use crate::plant::{Dataset, Partition, PlantSystem, SignalSet, STATE_DIM};
use crate::training::{batch_fit_mse, CellKey, CellResult, WindowBatch};

/// Open-loop error on one partition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpenLoop {
    /// Infinite when the rollout diverged.
    pub mse: f64,
    pub diverged: bool,
}

/// Free rollout of `model` over all of `signals` from `x0`, without a
/// tape. Returns `(T+1) x 4` states and the `T` algebraic inputs.
pub fn free_rollout(model: &Model, x0: &[f64], signals: &SignalSet) -> Result<(DenseMatrix, Vec<f64>)> {
    if x0.len() != STATE_DIM {
        return Err(Error::dim("free_rollout", format!("x0 has {} entries", x0.len())));
    }
    let at = model.params.effective_transition()?;
    let (bm, em) = model.input_matrices();
    let t = signals.len();
    let mut states = DenseMatrix::zeros(t + 1, STATE_DIM);
    states.row_slice_mut(0).copy_from_slice(x0);
    let mut u_seq = Vec::with_capacity(t);
    for k in 0..t {
        let u = model.algebraic_term(signals.a[k], signals.b[k])?;
        let x = states.row_slice(k).to_vec();
        let d = signals.disturbance(k);
        let mut next = at.matvec(&x)?;
        let ed = em.matvec(d)?;
        for i in 0..STATE_DIM {
            next[i] += bm[(i, 0)] * u + ed[i];
        }
        if !u.is_finite() || next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                context: "free rollout".into(),
                step: Some(k),
            });
        }
        states.row_slice_mut(k + 1).copy_from_slice(&next);
        u_seq.push(u);
    }
    Ok((states, u_seq))
}

/// `(1/T) sum_k (x_k,i - x~_k,i)^2` of a single rollout over the whole
/// partition, observed state only.
pub fn open_loop_mse(model: &Model, part: &Partition, observed: usize) -> Result<OpenLoop> {
    match free_rollout(model, part.x0(), &part.signals) {
        Ok((pred, _)) => {
            let t = part.len();
            let mse = (1..=t)
                .map(|k| (pred[(k, observed)] - part.states[(k, observed)]).powi(2))
                .sum::<f64>()
                / t as f64;
            if mse.is_finite() {
                Ok(OpenLoop { mse, diverged: false })
            } else {
                Ok(OpenLoop {
                    mse: f64::INFINITY,
                    diverged: true,
                })
            }
        }
        Err(Error::Numeric { .. }) => Ok(OpenLoop {
            mse: f64::INFINITY,
            diverged: true,
        }),
        Err(e) => Err(e),
    }
}

/// Mean over stride-1 windows of the observed-state MSE over `horizon`
/// steps. Slacks do not enter.
pub fn nstep_mse_eval(model: &Model, part: &Partition, horizon: usize, observed: usize) -> Result<f64> {
    let batch = WindowBatch::new(part, horizon, 1, observed)?;
    batch_fit_mse(model, &batch, observed)
}

/// Per-step joint slack: the summed state slack of `x_{k+1}` plus the input
/// slack of `u_k`, for `k = 0..T`.
pub fn joint_slack_profile(states: &DenseMatrix, u: &[f64], bounds: &ResolvedBounds) -> Result<Vec<f64>> {
    let t = u.len();
    if states.rows() != t + 1 || bounds.x_lower.rows() < t + 1 || bounds.u_lower.rows() < t {
        return Err(Error::dim(
            "joint_slack_profile",
            format!("{} states, {} inputs", states.rows(), t),
        ));
    }
    (0..t)
        .map(|k| {
            let (lo, hi) = bound_slacks(
                states.row_slice(k + 1),
                bounds.x_lower.row_slice(k + 1),
                bounds.x_upper.row_slice(k + 1),
            )?;
            let (ul, uh) = bound_slacks(&u[k..=k], bounds.u_lower.row_slice(k), bounds.u_upper.row_slice(k))?;
            Ok(lo.iter().chain(&hi).sum::<f64>() + ul[0] + uh[0])
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlackStats {
    pub mean: f64,
    pub max: f64,
}

/// Joint slack statistics of the open-loop rollout on `part`, computed for
/// any model whether or not it was trained with penalties.
pub fn slack_stats(model: &Model, part: &Partition, bounds: &BoundSpec) -> Result<SlackStats> {
    let resolved = bounds.resolve(part.len())?;
    let (states, u) = free_rollout(model, part.x0(), &part.signals)?;
    let prof = joint_slack_profile(&states, &u, &resolved)?;
    Ok(SlackStats {
        mean: prof.iter().sum::<f64>() / prof.len().max(1) as f64,
        max: prof.iter().cloned().fold(0.0, f64::max),
    })
}

/// One row of the eigenvalue table.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenRow {
    pub label: String,
    pub eigenvalues: Vec<ComplexScalar>,
    /// Euclidean distance of the sorted spectrum to the true one.
    pub distance: f64,
}

/// Distance between two spectra paired in sorted order.
pub fn spectrum_distance(a: &[ComplexScalar], b: &[ComplexScalar]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// Spectra of each model's effective transition, preceded by a `True` row
/// for the plant.
pub fn eigen_report(models: &[(String, &Model)], plant: &PlantSystem) -> Result<Vec<EigenRow>> {
    let truth = eigenvalues(&plant.a)?;
    let mut rows = vec![EigenRow {
        label: "True".into(),
        eigenvalues: truth.clone(),
        distance: 0.0,
    }];
    for (label, model) in models {
        let ev = eigenvalues(&model.params.effective_transition()?)?;
        rows.push(EigenRow {
            label: label.clone(),
            distance: spectrum_distance(&ev, &truth),
            eigenvalues: ev,
        });
    }
    Ok(rows)
}

/// `0.5`, `0.1+0.2i` or `0.1-0.2i`, with `digits` decimals.
pub fn format_complex(z: ComplexScalar, digits: usize) -> String {
    let im = if z.im.abs() < 0.5 * 10f64.powi(-(digits as i32)) { 0.0 } else { z.im };
    if im == 0.0 {
        format!("{:.*}", digits, z.re)
    } else {
        let sign = if im < 0.0 { '-' } else { '+' };
        format!("{:.*}{}{:.*}i", digits, z.re, sign, digits, im.abs())
    }
}

pub fn write_eigen_csv<W: Write>(rows: &[EigenRow], mut w: W) -> Result<()> {
    let n = rows.first().map_or(STATE_DIM, |r| r.eigenvalues.len());
    let mut text = String::from("model");
    for i in 1..=n {
        let _ = write!(text, ",lambda{i}");
    }
    text.push_str(",distance\n");
    for r in rows {
        text.push_str(&r.label);
        for z in &r.eigenvalues {
            let _ = write!(text, ",{}", format_complex(*z, 6));
        }
        let _ = writeln!(text, ",{:.6}", r.distance);
    }
    w.write_all(text.as_bytes())
        .map_err(|e| Error::Validation(format!("eigen table: {e}")))
}

/// Trace CSV with true and predicted states and inputs per step.
pub fn write_trace_csv<W: Write>(
    truth: &DenseMatrix,
    truth_u: &[f64],
    pred: &DenseMatrix,
    pred_u: &[f64],
    mut w: W,
) -> Result<()> {
    let t = truth_u.len();
    if truth.rows() != t + 1 || pred.rows() != t + 1 || pred_u.len() != t {
        return Err(Error::dim("trace", format!("{} vs {} rows", truth.rows(), pred.rows())));
    }
    let mut text = String::from("k,x1,x2,x3,x4,x1_pred,x2_pred,x3_pred,x4_pred,u,u_pred\n");
    for k in 0..=t {
        let _ = write!(text, "{k}");
        for v in truth.row_slice(k).iter().chain(pred.row_slice(k)) {
            let _ = write!(text, ",{v:?}");
        }
        match (truth_u.get(k), pred_u.get(k)) {
            (Some(a), Some(b)) => {
                let _ = writeln!(text, ",{a:?},{b:?}");
            }
            _ => text.push_str(",,\n"),
        }
    }
    w.write_all(text.as_bytes())
        .map_err(|e| Error::Validation(format!("trace: {e}")))
}

/// A named polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Self-contained 800x400 SVG line plot, one polyline per series.
/// Non-finite points are dropped.
pub fn svg_line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (800.0, 400.0);
    let (left, right, top, bottom) = (70.0, 160.0, 40.0, 50.0);
    let finite: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let fold = |f: fn(f64, f64) -> f64, init: f64, pick: fn(&(f64, f64)) -> f64| {
        finite.iter().map(pick).fold(init, f)
    };
    let (mut x0, mut x1) = (fold(f64::min, f64::INFINITY, |p| p.0), fold(f64::max, f64::NEG_INFINITY, |p| p.0));
    let (mut y0, mut y1) = (fold(f64::min, f64::INFINITY, |p| p.1), fold(f64::max, f64::NEG_INFINITY, |p| p.1));
    if finite.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 <= 0.0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 <= 0.0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="800" height="400" viewBox="0 0 800 400">"#
    );
    let _ = writeln!(svg, r#"<rect width="800" height="400" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#,
            sx(xv),
            top + ph + 14.0,
            tick(xv)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="end">{}</text>"#,
            left - 4.0,
            sy(yv) + 3.0,
            tick(yv)
        );
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 14.0 + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            w - right + 10.0,
            w - right + 30.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#,
            w - right + 36.0,
            ly + 4.0,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

/// Metrics of the best cell for one `(variant, constrained, N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportEntry {
    pub label: String,
    pub cell: CellResult,
    pub slack: Option<SlackStats>,
}

/// Everything the report command writes.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub entries: Vec<ReportEntry>,
    pub eigen: Vec<EigenRow>,
    /// One model per variant label used for traces and heatmaps.
    pub selected: Vec<(String, Model)>,
    pub all_cells: Vec<CellResult>,
}

/// Builds the report from the sweep results and their checkpoints.
///
/// `best` holds the best cell per `(variant, constrained, N)`. For traces,
/// heatmaps and the eigenvalue table each variant label is represented by
/// its best cell at the longest horizon present.
pub fn build_report(
    all_cells: &[CellResult],
    best: &[CellResult],
    load: impl Fn(&CellKey) -> Result<Model>,
    dataset: &Dataset,
    plant: &PlantSystem,
    bounds: &BoundSpec,
) -> Result<EvalReport> {
    let mut missing = Vec::new();
    let mut models = Vec::new();
    for cell in best {
        match load(&cell.key) {
            Ok(m) => models.push(m),
            Err(Error::Io { .. }) => missing.push(cell.key.slug()),
            Err(e) => return Err(e),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "missing checkpoints for cells: {}",
            missing.join(", ")
        )));
    }
    let mut entries = Vec::new();
    for (cell, model) in best.iter().zip(&models) {
        entries.push(ReportEntry {
            label: cell.key.spec_label(),
            cell: cell.clone(),
            slack: slack_stats(model, &dataset.test, bounds).ok(),
        });
    }
    let mut selected: Vec<(String, Model, usize)> = Vec::new();
    for (cell, model) in best.iter().zip(&models) {
        let label = cell.key.spec_label();
        match selected.iter_mut().find(|(l, _, _)| *l == label) {
            Some(slot) => {
                if cell.key.horizon > slot.2 {
                    *slot = (label, model.clone(), cell.key.horizon);
                }
            }
            None => selected.push((label, model.clone(), cell.key.horizon)),
        }
    }
    let selected: Vec<(String, Model)> = selected.into_iter().map(|(l, m, _)| (l, m)).collect();
    let refs: Vec<(String, &Model)> = selected.iter().map(|(l, m)| (l.clone(), m)).collect();
    let eigen = eigen_report(&refs, plant)?;
    Ok(EvalReport {
        entries,
        eigen,
        selected,
        all_cells: all_cells.to_vec(),
    })
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    create(path)?
        .write_all(text.as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Writes tables, traces, heatmap matrices and figures under `out_dir`.
/// Returns the written paths.
pub fn export_artifacts(
    report: &EvalReport,
    dataset: &Dataset,
    plant: &PlantSystem,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let tables = out_dir.join("tables");
    let traces = out_dir.join("traces");
    let figures = out_dir.join("figures");

    let path = tables.join("results.csv");
    crate::training::write_results_csv(&report.all_cells, create(&path)?)?;
    written.push(path);

    let mut best = String::from(
        "model,N,lr,restart,nstep_mse_val,nstep_mse_test,openloop_mse_test,mean_slack_test,max_slack_test\n",
    );
    for e in &report.entries {
        let c = &e.cell;
        let (mean, max) = e.slack.map_or((f64::NAN, f64::NAN), |s| (s.mean, s.max));
        let _ = writeln!(
            best,
            "{},{},{:?},{},{:?},{:?},{:?},{:?},{:?}",
            e.label,
            c.key.horizon,
            c.key.lr,
            c.key.restart,
            c.nstep_mse_val,
            c.nstep_mse_test,
            c.openloop_mse_test,
            mean,
            max
        );
    }
    let path = tables.join("best.csv");
    write_text(&path, &best)?;
    written.push(path);

    let path = tables.join("eigenvalues.csv");
    write_eigen_csv(&report.eigen, create(&path)?)?;
    written.push(path);

    for (label, model) in &report.selected {
        let path = tables.join(format!("A_{label}.csv"));
        model.params.effective_transition()?.save_csv(&path)?;
        written.push(path);
    }
    let path = tables.join("A_True.csv");
    plant.a.save_csv(&path)?;
    written.push(path);

    let observed = dataset.observed_index;
    for (label, model) in &report.selected {
        for (name, part) in [("train", &dataset.train), ("val", &dataset.val), ("test", &dataset.test)] {
            let truth_u: Vec<f64> = (0..part.len())
                .map(|k| plant.heat_input(part.signals.a[k], part.signals.b[k]))
                .collect();
            let (pred, pred_u) = match free_rollout(model, part.x0(), &part.signals) {
                Ok(r) => r,
                Err(Error::Numeric { .. }) => continue,
                Err(e) => return Err(e),
            };
            let path = traces.join(format!("{label}_{name}.csv"));
            write_trace_csv(&part.states, &truth_u, &pred, &pred_u, create(&path)?)?;
            written.push(path);
            if name == "test" {
                let series = vec![
                    Series {
                        name: "true".into(),
                        points: (0..=part.len()).map(|k| (k as f64, part.states[(k, observed)])).collect(),
                    },
                    Series {
                        name: label.clone(),
                        points: (0..=part.len()).map(|k| (k as f64, pred[(k, observed)])).collect(),
                    },
                ];
                let path = figures.join(format!("openloop_{label}.svg"));
                write_text(
                    &path,
                    &svg_line_plot(
                        &format!("{label} open-loop test rollout"),
                        "step",
                        "observed state [degC]",
                        &series,
                    ),
                )?;
                written.push(path);
            }
        }
    }

    for (metric, title, pick) in [
        ("nstep", "Best N-step MSE", (|c: &CellResult| c.nstep_mse_test) as fn(&CellResult) -> f64),
        ("openloop", "Best open-loop MSE", |c: &CellResult| c.openloop_mse_test),
    ] {
        let mut series: Vec<Series> = Vec::new();
        for e in &report.entries {
            let point = ((e.cell.key.horizon as f64).log2(), pick(&e.cell).log10());
            match series.iter_mut().find(|s| s.name == e.label) {
                Some(s) => s.points.push(point),
                None => series.push(Series {
                    name: e.label.clone(),
                    points: vec![point],
                }),
            }
        }
        for s in &mut series {
            s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        let path = figures.join(format!("mse_vs_n_{metric}.svg"));
        write_text(&path, &svg_line_plot(title, "log2 N", "log10 test MSE", &series))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn dataset() -> (PlantSystem, Dataset) {
        let plant = PlantSystem::default_building();
        let ds = plant.make_dataset(&mut SeededRng::new(0)).unwrap();
        (plant, ds)
    }

    #[test]
    fn truth_has_zero_error() {
        let (plant, ds) = dataset();
        let m = Model::from_plant(&plant, false);
        let ol = open_loop_mse(&m, &ds.test, 3).unwrap();
        assert!(ol.mse <= 1e-16 && !ol.diverged, "{}", ol.mse);
        assert!(nstep_mse_eval(&m, &ds.test, 8, 3).unwrap() < 1e-16);
    }

    #[test]
    fn full_horizon_matches_open_loop() {
        let (plant, ds) = dataset();
        let mut m = Model::from_plant(&plant, false);
        m.params.b = m.params.b.scale(0.9);
        let ol = open_loop_mse(&m, &ds.val, 3).unwrap().mse;
        let ns = nstep_mse_eval(&m, &ds.val, ds.val.len(), 3).unwrap();
        assert!((ol - ns).abs() <= 1e-9 * ol.max(1.0), "{ol} {ns}");
    }

    #[test]
    fn complex_formatting() {
        let z = ComplexScalar::new(0.5, -0.25);
        assert_eq!(format_complex(z, 2), "0.50-0.25i");
        assert_eq!(format_complex(z.conj(), 2), "0.50+0.25i");
        assert_eq!(format_complex(ComplexScalar::new(1.0, 1e-12), 3), "1.000");
    }

    #[test]
    fn svg_header() {
        let s = svg_line_plot("t", "x", "y", &[Series {
            name: "a".into(),
            points: vec![(0.0, 1.0), (1.0, f64::INFINITY), (2.0, 3.0)],
        }]);
        assert!(s.starts_with("<svg"));
        assert!(s.contains(r#"width="800""#) && s.contains(r#"height="400""#));
        assert_eq!(s.matches("<polyline").count(), 1);
    }
}
