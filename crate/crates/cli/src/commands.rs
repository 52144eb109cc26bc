use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use cnode::analysis::{build_report, export_artifacts, format_complex};
use cnode::autodiff::op_gradient_errors;
use cnode::models::{pf_transition, Model};
use cnode::numerics::{eigenvalues, spectral_radius, DenseMatrix, SeededRng};
use cnode::plant::{load_signals_csv, Dataset, PlantSystem};
use cnode::training::{
    best_cells, read_results_csv, rollout_gradient_errors, sweep, write_results_csv, CellKey,
    CellResult,
};
use cnode::{Error, Result};

use crate::config::{DatasetSource, RunConfig};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.run_dir().join("data")
}

fn checkpoint_dir(cfg: &RunConfig) -> PathBuf {
    cfg.run_dir().join("checkpoints")
}

fn results_path(cfg: &RunConfig) -> PathBuf {
    cfg.run_dir().join("tables").join("results.csv")
}

/// Plant spectrum and provenance of a simulated dataset.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub seed: u64,
    pub source: DatasetSource,
    pub steps_per_partition: usize,
    pub observed_index: usize,
    pub eigenvalues: Vec<String>,
    pub spectral_radius: f64,
    pub plant: PlantSystem,
}

pub fn simulate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let plant = cfg.plant()?;
    let dataset = match &cfg.dataset {
        DatasetSource::Synthetic => plant.make_dataset(&mut SeededRng::new(cfg.seed))?,
        DatasetSource::Csv { path } => plant.dataset_from_signals(&load_signals_csv(path)?)?,
    };
    let dir = data_dir(cfg);
    let mut written = Vec::new();
    for (name, part) in [
        ("train", &dataset.train),
        ("val", &dataset.val),
        ("test", &dataset.test),
    ] {
        let mut buf = Vec::new();
        part.write_csv(&mut buf)?;
        let path = dir.join(format!("{name}.csv"));
        write_file(&path, &buf)?;
        written.push(path);
    }
    let path = dir.join("dataset.json");
    write_file(&path, &serde_json::to_vec(&dataset)?)?;
    written.push(path);

    let mut spectrum = eigenvalues(&plant.a)?;
    cnode::numerics::sort_spectrum(&mut spectrum);
    let manifest = Manifest {
        run_id: cfg.run_id.clone(),
        seed: cfg.seed,
        source: cfg.dataset.clone(),
        steps_per_partition: dataset.train.len(),
        observed_index: dataset.observed_index,
        eigenvalues: spectrum.iter().map(|z| format_complex(*z, 6)).collect(),
        spectral_radius: spectral_radius(&plant.a)?,
        plant,
    };
    let path = dir.join("manifest.json");
    write_file(&path, &serde_json::to_vec_pretty(&manifest)?)?;
    written.push(path);
    Ok(written)
}

fn load_dataset(cfg: &RunConfig) -> Result<(Dataset, PlantSystem)> {
    let dir = data_dir(cfg);
    let read = |name: &str| -> Result<String> {
        let path = dir.join(name);
        fs::read_to_string(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Validation(format!(
                    "no dataset at {}; run `cnode simulate` with the same config first",
                    path.display()
                ))
            } else {
                io_err(&path)(e)
            }
        })
    };
    let dataset: Dataset = serde_json::from_str(&read("dataset.json")?)?;
    let manifest: Manifest = serde_json::from_str(&read("manifest.json")?)?;
    Ok((dataset, manifest.plant))
}

fn read_results(path: &Path) -> Result<Vec<CellResult>> {
    match fs::File::open(path) {
        Ok(f) => read_results_csv(f),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(io_err(path)(e)),
    }
}

pub struct TrainSummary {
    pub trained: usize,
    pub skipped: usize,
    pub failed: usize,
    pub best: Vec<CellResult>,
}

/// Runs the sweep. Cells already listed in the results table are skipped.
/// Every finished cell is appended to the table and checkpointed at once,
/// so an interrupted run resumes where it stopped; at the end the table is
/// rewritten in cell order and only the best checkpoint per
/// `(variant, constrained, N)` is kept.
pub fn train(cfg: &RunConfig, mut progress: impl Write + Send) -> Result<TrainSummary> {
    let (dataset, plant) = load_dataset(cfg)?;
    let sweep_cfg = cfg.sweep(&plant)?;
    let table = results_path(cfg);
    let ckpt = checkpoint_dir(cfg);
    fs::create_dir_all(&ckpt).map_err(io_err(&ckpt))?;

    let previous = read_results(&table)?;
    let done: HashMap<String, CellResult> = previous
        .iter()
        .map(|r| (r.key.slug(), r.clone()))
        .collect();
    if previous.is_empty() {
        let mut buf = Vec::new();
        write_results_csv(&[], &mut buf)?;
        write_file(&table, &buf)?;
    }

    let cells = sweep_cfg.cells();
    let skipped = cells.iter().filter(|(_, k)| done.contains_key(&k.slug())).count();
    let log = Mutex::new((&mut progress, 0usize));
    let total = cells.len();
    let first_error: Mutex<Option<Error>> = Mutex::new(None);
    let record = |res: &CellResult, model: Option<&Model>| {
        let attempt = || -> Result<()> {
            if let Some(m) = model {
                let path = ckpt.join(format!("{}.json", res.key.slug()));
                write_file(&path, &serde_json::to_vec(m)?)?;
            }
            let mut row = Vec::new();
            write_results_csv(std::slice::from_ref(res), &mut row)?;
            let line = String::from_utf8_lossy(&row);
            let body = line.split_once('\n').map(|x| x.1).unwrap_or("");
            let mut f = fs::OpenOptions::new()
                .append(true)
                .open(&table)
                .map_err(io_err(&table))?;
            f.write_all(body.as_bytes()).map_err(io_err(&table))
        };
        let mut guard = log.lock().expect("log lock");
        if let Err(e) = attempt() {
            first_error.lock().expect("error lock").get_or_insert(e);
        }
        guard.1 += 1;
        let count = guard.1;
        let status = match &res.failure {
            None => format!("val {:.4e}", res.nstep_mse_val),
            Some(f) => format!("failed: {f}"),
        };
        let _ = writeln!(
            guard.0,
            "[{}/{}] {} {status}",
            count,
            total - skipped,
            res.key.slug()
        );
    };
    let results = sweep(
        &sweep_cfg,
        &dataset,
        cfg.jobs(),
        |k: &CellKey| done.get(&k.slug()).cloned(),
        record,
    )?;
    drop(log);
    if let Some(e) = first_error.into_inner().expect("error lock") {
        return Err(e);
    }

    let mut merged = results.clone();
    let current: std::collections::HashSet<String> =
        results.iter().map(|r| r.key.slug()).collect();
    merged.extend(previous.into_iter().filter(|r| !current.contains(&r.key.slug())));
    let mut buf = Vec::new();
    write_results_csv(&merged, &mut buf)?;
    write_file(&table, &buf)?;

    let best = best_cells(&merged);
    let keep: std::collections::HashSet<String> = best.iter().map(|r| r.key.slug()).collect();
    for r in &merged {
        let slug = r.key.slug();
        let path = ckpt.join(format!("{slug}.json"));
        if !keep.contains(&slug) && path.exists() {
            fs::remove_file(&path).map_err(io_err(&path))?;
        }
    }
    let fresh: Vec<&CellResult> = results
        .iter()
        .filter(|r| !done.contains_key(&r.key.slug()))
        .collect();
    let failed = fresh.iter().filter(|r| r.failure.is_some()).count();
    let best_here: Vec<CellResult> = best_cells(&results);
    if !fresh.is_empty() && failed == fresh.len() {
        return Err(Error::Numeric {
            context: format!("all {failed} trained cells failed"),
            step: None,
        });
    }
    Ok(TrainSummary {
        trained: fresh.len(),
        skipped,
        failed,
        best: best_here,
    })
}

pub fn format_best(best: &[CellResult]) -> String {
    let mut out = format!(
        "{:<8} {:>4} {:>7} {:>3} {:>12} {:>12} {:>12}\n",
        "model", "N", "lr", "r", "val", "nstep_test", "openloop"
    );
    for r in best {
        out.push_str(&format!(
            "{:<8} {:>4} {:>7} {:>3} {:>12.4e} {:>12.4e} {:>12.4e}\n",
            r.key.spec_label(),
            r.key.horizon,
            r.key.lr,
            r.key.restart,
            r.nstep_mse_val,
            r.nstep_mse_test,
            r.openloop_mse_test
        ));
    }
    out
}

pub fn report(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let ckpt = checkpoint_dir(cfg);
    let has_checkpoints = fs::read_dir(&ckpt)
        .map(|d| {
            d.filter_map(|e| e.ok())
                .any(|e| e.path().extension().is_some_and(|x| x == "json"))
        })
        .unwrap_or(false);
    if !has_checkpoints {
        return Err(Error::Validation(format!(
            "no checkpoints in {}; run `cnode train` first",
            ckpt.display()
        )));
    }
    let (dataset, plant) = load_dataset(cfg)?;
    let all = read_results(&results_path(cfg))?;
    if all.is_empty() {
        return Err(Error::Validation(format!(
            "no results in {}",
            results_path(cfg).display()
        )));
    }
    let best = best_cells(&all);
    let load = |k: &CellKey| -> Result<Model> {
        let path = ckpt.join(format!("{}.json", k.slug()));
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let model: Model = serde_json::from_str(&text)?;
        model.validate()?;
        Ok(model)
    };
    let bounds = cfg.bounds(&plant)?;
    let report = build_report(&all, &best, load, &dataset, &plant, &bounds)?;
    export_artifacts(&report, &dataset, &plant, &cfg.run_dir())
}

/// One self-test outcome.
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Gradient, stability and eigensolver self-tests.
pub fn check(seed: u64) -> Result<Vec<CheckLine>> {
    let mut lines = Vec::new();
    let ops = op_gradient_errors(100, seed, 1e-4)?;
    let worst = ops.iter().cloned().fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    lines.push(CheckLine {
        name: "op gradients".into(),
        passed: worst.1 < 1e-5,
        detail: format!("{} kinds x 100 cases, worst {} {:.2e}", ops.len(), worst.0, worst.1),
    });
    let roll = rollout_gradient_errors(4, seed)?;
    let worst = roll
        .iter()
        .cloned()
        .fold((String::new(), 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    lines.push(CheckLine {
        name: "rollout gradients".into(),
        passed: worst.1 < 1e-4,
        detail: format!("{} cases at N=4, worst {} {:.2e}", roll.len(), worst.0, worst.1),
    });

    let mut rng = SeededRng::new(seed).split(1);
    let mut violations = 0;
    let mut max_radius: f64 = 0.0;
    for _ in 0..1000 {
        let a = rng.uniform(-5.0, 5.0, 4, 4)?;
        let m = rng.uniform(-5.0, 5.0, 4, 4)?;
        let t = pf_transition(&a, &m)?;
        let rho = spectral_radius(&t)?;
        max_radius = max_radius.max(rho);
        let rows_ok = t.row_sums().iter().all(|s| (0.9..1.0).contains(s));
        if t.as_slice().iter().any(|v| *v < 0.0) || !rows_ok || rho >= 1.0 {
            violations += 1;
        }
    }
    lines.push(CheckLine {
        name: "transition stability".into(),
        passed: violations == 0,
        detail: format!("1000 draws, {violations} violations, max radius {max_radius:.6}"),
    });

    let mut worst_residual: f64 = 0.0;
    for _ in 0..500 {
        let a = rng.uniform(-2.0, 2.0, 4, 4)?;
        let scale = 1.0 + a.norm_frobenius();
        for z in eigenvalues(&a)? {
            worst_residual = worst_residual.max(char_poly_residual(&a, z) / scale);
        }
    }
    lines.push(CheckLine {
        name: "eigensolver".into(),
        passed: worst_residual < 1e-6,
        detail: format!("500 matrices, worst |det(A - zI)| / (1 + |A|) {worst_residual:.2e}"),
    });
    Ok(lines)
}

/// `|det(A - zI)|` by complex Gaussian elimination with partial pivoting.
fn char_poly_residual(a: &DenseMatrix, z: cnode::numerics::ComplexScalar) -> f64 {
    use cnode::numerics::ComplexScalar as C;
    let n = a.rows();
    let mut m: Vec<Vec<C>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| C::new(a[(i, j)], 0.0) - if i == j { z } else { C::new(0.0, 0.0) })
                .collect()
        })
        .collect();
    let mut det = C::new(1.0, 0.0);
    for c in 0..n {
        let p = (c..n)
            .max_by(|&x, &y| m[x][c].norm().total_cmp(&m[y][c].norm()))
            .expect("non-empty");
        if m[p][c].norm() == 0.0 {
            return 0.0;
        }
        if p != c {
            m.swap(p, c);
            det = -det;
        }
        det *= m[c][c];
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..n {
                let v = m[c][k];
                m[r][k] -= f * v;
            }
        }
    }
    det.norm()
}
