//! End-to-end acceptance checks. Runs as a plain binary and prints one
//! PASS/FAIL line per check; exits non-zero if any check fails.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::time::{Duration, Instant};

use cnode::analysis::{eigen_report, open_loop_mse, slack_stats, write_eigen_csv};
use cnode::autodiff::{op_gradient_errors, Tape};
use cnode::constraints::BoundSpec;
use cnode::models::{
    pf_transition, AlgebraicParams, AlgebraicVariant, Model, ModelSpec,
    TransitionParams,
};
use cnode::numerics::{eigenvalues, spectral_radius, ComplexScalar, DenseMatrix, SeededRng};
use cnode::plant::{Dataset, PlantSystem};
use cnode::training::{
    best_cells, nstep_loss_on_tape, rollout_gradient_errors, run_cell, sweep, train, train_from,
    write_results_csv, CellKey, CellResult, Scale, SweepConfig, TrainConfig, WindowBatch,
    HORIZONS,
};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn dataset(plant: &PlantSystem) -> Dataset {
    plant.make_dataset(&mut SeededRng::new(0)).expect("dataset")
}

/// `|det(A - zI)|` by complex elimination with partial pivoting.
fn char_poly_residual(a: &DenseMatrix, z: ComplexScalar) -> f64 {
    let n = a.rows();
    let mut m: Vec<Vec<ComplexScalar>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let d = if i == j { z } else { ComplexScalar::new(0.0, 0.0) };
                    ComplexScalar::new(a[(i, j)], 0.0) - d
                })
                .collect()
        })
        .collect();
    let mut det = ComplexScalar::new(1.0, 0.0);
    for c in 0..n {
        let p = (c..n)
            .max_by(|&x, &y| m[x][c].norm().total_cmp(&m[y][c].norm()))
            .unwrap();
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

/// Collatz-Wielandt bracket `[min (Av)_i / v_i, max (Av)_i / v_i]` around the
/// Perron root of a positive matrix, with `v` a power iterate.
fn perron_bracket(a: &DenseMatrix) -> (f64, f64) {
    let mut v = vec![1.0; a.rows()];
    for _ in 0..500 {
        let w = a.matvec(&v).unwrap();
        let norm = w.iter().cloned().fold(0.0, f64::max);
        v = w.iter().map(|x| x / norm).collect();
    }
    let w = a.matvec(&v).unwrap();
    let ratios: Vec<f64> = w.iter().zip(&v).map(|(x, y)| x / y).collect();
    (
        ratios.iter().cloned().fold(f64::MAX, f64::min),
        ratios.iter().cloned().fold(0.0, f64::max),
    )
}

fn stability() -> Outcome {
    let mut rng = SeededRng::new(2024);
    let mut violations = 0;
    let mut max_rho: f64 = 0.0;
    let mut max_formula_gap: f64 = 0.0;
    for _ in 0..1000 {
        let a = rng.uniform(-6.0, 6.0, 4, 4).unwrap();
        let m = rng.uniform(-6.0, 6.0, 4, 4).unwrap();
        let t = pf_transition(&a, &m).unwrap();
        for i in 0..4 {
            let mx = (0..4).map(|j| a[(i, j)]).fold(f64::MIN, f64::max);
            let z: f64 = (0..4).map(|j| (a[(i, j)] - mx).exp()).sum();
            for j in 0..4 {
                let damp = 1.0 - 0.1 / (1.0 + (-m[(i, j)]).exp());
                let want = (a[(i, j)] - mx).exp() / z * damp;
                max_formula_gap = max_formula_gap.max((t[(i, j)] - want).abs());
            }
        }
        let rho = spectral_radius(&t).unwrap();
        let (lo, hi) = perron_bracket(&t);
        max_rho = max_rho.max(rho);
        let rows_ok = t.row_sums().iter().all(|s| (0.9..1.0).contains(s));
        if t.as_slice().iter().any(|v| *v < 0.0)
            || !rows_ok
            || rho >= 1.0
            || hi >= 1.0
            || rho < lo - 1e-12
            || rho > hi + 1e-12
        {
            violations += 1;
        }
    }
    outcome(
        violations == 0 && max_formula_gap < 1e-14,
        format!(
            "1000 draws, {violations} violations, max radius {max_rho:.6}, formula gap {max_formula_gap:.1e}"
        ),
    )
}

fn gradients() -> Outcome {
    let ops = op_gradient_errors(100, 7, 1e-4).unwrap();
    let (op, op_err) = ops
        .iter()
        .cloned()
        .fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let roll = rollout_gradient_errors(4, 7).unwrap();
    let (case, roll_err) = roll
        .iter()
        .cloned()
        .fold((String::new(), 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    outcome(
        op_err < 1e-5 && roll_err < 1e-4,
        format!(
            "{} op kinds x 100: worst {op} {op_err:.1e}; N=4 loss, {} cases: worst {case} {roll_err:.1e}",
            ops.len(),
            roll.len()
        ),
    )
}

fn eigensolver() -> Outcome {
    let mut rng = SeededRng::new(99);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let a = rng.uniform(-3.0, 3.0, 4, 4).unwrap();
        let scale = 1.0 + a.norm_frobenius();
        for z in eigenvalues(&a).unwrap() {
            worst = worst.max(char_poly_residual(&a, z) / scale);
        }
    }
    let mut tri_worst: f64 = 0.0;
    for k in 0..100 {
        let mut a = rng.uniform(-3.0, 3.0, 4, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if (k % 2 == 0 && j > i) || (k % 2 == 1 && j < i) {
                    a[(i, j)] = 0.0;
                }
            }
        }
        let mut got: Vec<f64> = eigenvalues(&a)
            .unwrap()
            .iter()
            .map(|z| {
                tri_worst = tri_worst.max(z.im.abs());
                z.re
            })
            .collect();
        let mut want: Vec<f64> = (0..4).map(|i| a[(i, i)]).collect();
        got.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        for (g, w) in got.iter().zip(&want) {
            tri_worst = tri_worst.max((g - w).abs());
        }
    }
    outcome(
        worst < 1e-6 && tri_worst < 1e-12,
        format!("500 general: worst residual {worst:.1e}; 100 triangular: worst gap {tri_worst:.1e}"),
    )
}

fn plant_spectrum() -> Outcome {
    let plant = PlantSystem::default_building();
    let mut got: Vec<ComplexScalar> = eigenvalues(&plant.a).unwrap();
    got.sort_by(|a, b| b.re.total_cmp(&a.re));
    let want = [1.0, 0.99, 0.98, 0.25];
    let gap = got
        .iter()
        .zip(want)
        .map(|(g, w)| (g - ComplexScalar::new(w, 0.0)).norm())
        .fold(0.0, f64::max);
    outcome(gap < 1e-9, format!("eigenvalues {got:?}, gap {gap:.1e}"))
}

fn exact_model() -> Outcome {
    let plant = PlantSystem::default_building();
    let ds = dataset(&plant);
    let bounds = BoundSpec::default_for(&plant);
    let resolved = bounds.resolve(ds.train.len()).unwrap();
    let mut worst: f64 = 0.0;
    for constrained in [false, true] {
        let model = Model::from_plant(&plant, constrained);
        for n in HORIZONS {
            let batch = WindowBatch::new(&ds.train, n, 1, ds.observed_index).unwrap();
            let mut tape = Tape::new();
            let b = constrained.then_some(&resolved);
            let (loss, _) =
                nstep_loss_on_tape(&mut tape, &model, |_| false, &batch, b, ds.observed_index)
                    .unwrap();
            worst = worst.max(tape.value(loss.total).to_scalar().unwrap());
        }
    }
    let open = open_loop_mse(&Model::from_plant(&plant, false), &ds.test, ds.observed_index).unwrap();
    outcome(
        worst < 1e-12 && open.mse < 1e-12,
        format!("worst N-step training loss {worst:.1e}, open-loop test MSE {:.1e}", open.mse),
    )
}

fn gray_recovery() -> Outcome {
    let plant = PlantSystem::default_building();
    let ds = dataset(&plant);
    let bounds = BoundSpec::default_for(&plant);
    let model = Model::gray_on_plant(&plant, false, &mut SeededRng::new(0)).unwrap();
    let mut cfg = TrainConfig::new(32, Scale::Desk.epochs(), 0.01);
    cfg.freeze = vec!["a".into(), "b".into(), "e".into()];
    let rec = train_from(model, &cfg, &ds, &bounds).unwrap();
    let h = match &rec.model.params.algebraic {
        AlgebraicParams::Gray { gain, scale, .. } => gain[(0, 0)] * scale,
        _ => f64::NAN,
    };
    let rel = (h - plant.heat_capacity).abs() / plant.heat_capacity;
    outcome(
        rel < 0.05,
        format!("H = {h:.2} vs {} (relative error {rel:.2e})", plant.heat_capacity),
    )
}

fn best_by(results: &[CellResult], horizon: usize) -> &CellResult {
    results
        .iter()
        .filter(|r| r.key.horizon == horizon)
        .min_by(|a, b| a.nstep_mse_val.total_cmp(&b.nstep_mse_val))
        .unwrap()
}

fn trends() -> Outcome {
    let plant = PlantSystem::default_building();
    let ds = dataset(&plant);
    let cfg = SweepConfig {
        specs: vec![ModelSpec::new(AlgebraicVariant::Gray, true)],
        horizons: vec![8, 128],
        learning_rates: Scale::Desk.learning_rates(),
        restarts: Scale::Desk.restarts(),
        epochs: Scale::Desk.epochs(),
        seed: 0,
        adamw: Default::default(),
        stride: 1,
        bounds: BoundSpec::default_for(&plant),
    };
    let results = sweep(&cfg, &ds, jobs(), |_: &CellKey| None, |_: &CellResult, _: Option<&Model>| {})
        .unwrap();
    let (short, long) = (best_by(&results, 8), best_by(&results, 128));
    let open_ok = long.openloop_mse_test < short.openloop_mse_test;
    let nstep_ok = long.nstep_mse_test > short.nstep_mse_test;
    let failed = results.iter().filter(|r| r.failure.is_some()).count();
    outcome(
        open_ok && nstep_ok,
        format!(
            "{} cells ({failed} failed); open-loop N=8 {:.4} vs N=128 {:.4}; N-step N=8 {:.4} vs N=128 {:.4}",
            results.len(),
            short.openloop_mse_test,
            long.openloop_mse_test,
            short.nstep_mse_test,
            long.nstep_mse_test
        ),
    )
}

fn constraint_efficacy() -> Outcome {
    let plant = PlantSystem::default_building();
    let ds = dataset(&plant);
    let bounds = BoundSpec::default_for(&plant);
    let mut passed = true;
    let mut parts = Vec::new();
    for variant in [AlgebraicVariant::Black, AlgebraicVariant::Gray, AlgebraicVariant::White] {
        let mut slack = [0.0; 2];
        for (i, constrained) in [false, true].into_iter().enumerate() {
            let spec = ModelSpec::new(variant, constrained);
            let cfg = TrainConfig::new(32, Scale::Desk.epochs(), 0.01);
            let rec = train(&spec, &cfg, &ds, &bounds, &mut SeededRng::new(0).split(0)).unwrap();
            slack[i] = slack_stats(&rec.model, &ds.test, &bounds).unwrap().mean;
            let mut ev = eigenvalues(&rec.model.params.effective_transition().unwrap()).unwrap();
            ev.sort_by(|a, b| b.norm().total_cmp(&a.norm()));
            let dominant = ev[0].norm();
            if !(0.9..1.0).contains(&dominant) {
                passed = false;
            }
            parts.push(format!("{} dominant {dominant:.4}", spec.label()));
        }
        if slack[1] > 0.1 * slack[0] {
            passed = false;
        }
        parts.push(format!(
            "{} slack c {:.3e} vs u {:.3e}",
            variant.name(),
            slack[1],
            slack[0]
        ));
    }
    outcome(passed, parts.join("; "))
}

fn srnn_contrast() -> Outcome {
    let plant = PlantSystem::default_building();
    let ds = dataset(&plant);
    let bounds = BoundSpec::default_for(&plant);
    let spec = ModelSpec::new(AlgebraicVariant::Srnn, false);
    let rec = train(&spec, &TrainConfig::new(8, 200, 0.01), &ds, &bounds, &mut SeededRng::new(3))
        .unwrap();
    let direct = matches!(rec.model.params.transition, TransitionParams::Direct { .. });
    let mut injected = rec.model.clone();
    let (c, s) = (0.9 * 0.5f64.cos(), 0.9 * 0.5f64.sin());
    injected.params.transition = TransitionParams::Direct {
        a: DenseMatrix::from_rows(&[
            vec![c, -s, 0.0, 0.0],
            vec![s, c, 0.0, 0.0],
            vec![0.0, 0.0, 0.5, 0.0],
            vec![0.0, 0.0, 0.0, 0.2],
        ])
        .unwrap(),
    };
    let mut csv = Vec::new();
    let rows = eigen_report(&[("SRNN".to_string(), &injected)], &plant).unwrap();
    write_eigen_csv(&rows, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let line = text.lines().find(|l| l.starts_with("SRNN")).unwrap_or("").to_string();
    let (re, im) = (format!("{c:.6}"), format!("{s:.6}"));
    let pair = line.contains(&format!("{re}+{im}i")) && line.contains(&format!("{re}-{im}i"));
    let has_true = text.lines().any(|l| l.starts_with("True"));
    outcome(
        direct && pair && has_true,
        format!("direct transition {direct}; eigen row {line:?}"),
    )
}

fn determinism() -> Outcome {
    let plant = PlantSystem::default_building();
    let ds = dataset(&plant);
    let cfg = SweepConfig {
        specs: ModelSpec::ode_family(),
        horizons: vec![8],
        learning_rates: vec![0.01],
        restarts: Scale::Desk.restarts(),
        epochs: Scale::Desk.epochs(),
        seed: 17,
        adamw: Default::default(),
        stride: 1,
        bounds: BoundSpec::default_for(&plant),
    };
    let run = || {
        let res = sweep(&cfg, &ds, 2, |_: &CellKey| None, |_: &CellResult, _: Option<&Model>| {})
            .unwrap();
        let mut buf = Vec::new();
        write_results_csv(&res, &mut buf).unwrap();
        buf
    };
    let (a, b) = (run(), run());
    let rows = a.iter().filter(|c| **c == b'\n').count() - 1;
    let best = best_cells(&cnode::training::read_results_csv(&a[..]).unwrap()).len();
    let key = CellKey {
        variant: AlgebraicVariant::Gray,
        constrained: true,
        horizon: 8,
        lr: 0.01,
        restart: 1,
    };
    let spec = ModelSpec::new(key.variant, key.constrained);
    let (single, _) = run_cell(&cfg, &spec, &key, &ds);
    let text = String::from_utf8(a.clone()).unwrap();
    let standalone = text.contains(&format!(
        "gray,true,8,0.01,1,{:?},{:?},{:?}",
        single.nstep_mse_val, single.nstep_mse_test, single.openloop_mse_test
    ));
    outcome(
        a == b && standalone && best == 6,
        format!(
            "{rows} cells x {} epochs, 2 workers: identical bytes {}; cell rerun alone matches {standalone}",
            cfg.epochs,
            a == b
        ),
    )
}

fn main() {
    let checks: [(&str, fn() -> Outcome, Option<Duration>); 10] = [
        ("1 transition stability", stability, Some(Duration::from_secs(5))),
        ("2 autodiff correctness", gradients, Some(Duration::from_secs(30))),
        ("3 eigensolver residuals", eigensolver, None),
        ("4 plant spectrum", plant_spectrum, None),
        ("5 exact white-box model", exact_model, None),
        ("6 gray-box heat capacity recovery", gray_recovery, Some(Duration::from_secs(120))),
        ("7 horizon trends", trends, Some(Duration::from_secs(600))),
        ("8 constraint efficacy", constraint_efficacy, None),
        ("9 S-RNN complex spectrum", srnn_contrast, None),
        ("10 determinism", determinism, None),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failures = 0;
    for (name, check, budget) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.starts_with(f.as_str())) {
            continue;
        }
        let clock = Instant::now();
        let result = std::panic::catch_unwind(check);
        let elapsed = clock.elapsed();
        let (mut passed, mut detail) = match result {
            Ok(o) => (o.passed, o.detail),
            Err(_) => (false, "panicked".to_string()),
        };
        if let Some(limit) = budget {
            if elapsed > limit {
                passed = false;
                detail.push_str(&format!("; over the {}s budget", limit.as_secs()));
            }
        }
        if !passed {
            failures += 1;
        }
        println!(
            "{} [{name}] ({:.1}s) {detail}",
            if passed { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    if failures > 0 {
        println!("{failures} acceptance check(s) failed");
        std::process::exit(1);
    }
}
