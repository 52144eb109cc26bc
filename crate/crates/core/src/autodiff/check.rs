use std::sync::Arc;

use super::{Axis, RowMap, Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, SeededRng};

/// Fourth-order central difference of `f` at offset zero with step `h`.
pub fn five_point(f: &mut impl FnMut(f64) -> Result<f64>, h: f64) -> Result<f64> {
    let (p2, p1, m1, m2) = (f(2.0 * h)?, f(h)?, f(-h)?, f(-2.0 * h)?);
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
}

/// Compares tape gradients with fourth-order central finite differences.
///
/// `f` builds a scalar loss from the given leaves on a fresh tape. Returns
/// the maximum over all leaf entries of
/// `|g_ad - g_fd| / (1e-8 + |g_ad| + |g_fd|)`.
pub fn finite_difference_check<F>(f: F, leaves: &[DenseMatrix], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_difference_check_filtered(f, leaves, eps, |_, _, _| true)
}

/// As [`finite_difference_check`], checking only entries for which
/// `include(leaf_index, entry_index, value)` holds. Used to keep samples
/// away from non-differentiable points such as relu kinks.
pub fn finite_difference_check_filtered<F, P>(
    f: F,
    leaves: &[DenseMatrix],
    eps: f64,
    include: P,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    P: Fn(usize, usize, f64) -> bool,
{
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("eps must be positive, got {eps}")));
    }
    let eval = |values: &[DenseMatrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let value = tape.value(loss).to_scalar()?;
        if !value.is_finite() {
            return Err(Error::Numeric {
                context: "finite-difference evaluation".into(),
                step: None,
            });
        }
        Ok(value)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|v| tape.param(v.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut work: Vec<DenseMatrix> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let zero = DenseMatrix::zeros(leaf.rows(), leaf.cols());
        let ad = grads.get(vars[li]).unwrap_or(&zero);
        for k in 0..leaf.len() {
            let x = leaf.as_slice()[k];
            if !include(li, k, x) {
                continue;
            }
            let mut at = |h: f64| -> Result<f64> {
                work[li].as_mut_slice()[k] = x + h;
                eval(&work)
            };
            let fd = five_point(&mut at, eps)?;
            work[li].as_mut_slice()[k] = x;
            let g = ad.as_slice()[k];
            worst = worst.max((g - fd).abs() / (1e-8 + g.abs() + fd.abs()));
        }
    }
    Ok(worst)
}

/// Operation kinds covered by [`op_gradient_errors`].
pub const CHECKED_OPS: [&str; 21] = [
    "matmul",
    "add",
    "subtract",
    "scale",
    "hadamard",
    "relu",
    "sigmoid",
    "exp",
    "row_softmax",
    "sum_of_squares",
    "concat_rows",
    "concat_cols",
    "slice",
    "transpose",
    "add_row",
    "gather_rows",
    "step_rows",
    "step_rows_4x4",
    "step_rows_broadcast",
    "bound_penalty",
    "column_error",
];

/// Uniform draws in `[lo, hi]` kept at least `gap` away from every point
/// in `kinks`.
fn away_from(
    rng: &mut SeededRng,
    lo: f64,
    hi: f64,
    rows: usize,
    cols: usize,
    kinks: &[f64],
    gap: f64,
) -> Result<DenseMatrix> {
    let mut m = rng.uniform(lo, hi, rows, cols)?;
    for v in m.as_mut_slice() {
        while kinks.iter().any(|k| (*v - k).abs() < gap) {
            *v = rng.uniform_scalar(lo, hi)?;
        }
    }
    Ok(m)
}

/// Random linear read-out `r1 out r2` turning any output into a scalar
/// with a generic cotangent.
fn project(t: &mut Tape, out: Var, rng: &mut SeededRng) -> Result<Var> {
    let r1 = t.constant(rng.uniform(-1.0, 1.0, 1, out.rows())?);
    let r2 = t.constant(rng.uniform(-1.0, 1.0, out.cols(), 1)?);
    let left = t.matmul(r1, out)?;
    t.matmul(left, r2)
}

fn check_case(kind: &str, rng: &mut SeededRng, eps: f64) -> Result<f64> {
    let proj_seed = rng.split(u64::MAX).seed();
    let proj = move |t: &mut Tape, out: Var| project(t, out, &mut SeededRng::new(proj_seed));
    let u = |rng: &mut SeededRng, r: usize, c: usize| rng.uniform(-1.0, 1.0, r, c);
    let idx = |rng: &mut SeededRng, n: usize, below: usize| -> Result<Vec<usize>> {
        (0..n)
            .map(|_| Ok((rng.uniform_scalar(0.0, below as f64)? as usize).min(below - 1)))
            .collect()
    };
    match kind {
        "matmul" => finite_difference_check(
            |t, v| {
                let o = t.matmul(v[0], v[1])?;
                proj(t, o)
            },
            &[u(rng, 3, 4)?, u(rng, 4, 2)?],
            eps,
        ),
        "add" | "subtract" | "hadamard" => finite_difference_check(
            |t, v| {
                let o = match kind {
                    "add" => t.add(v[0], v[1])?,
                    "subtract" => t.sub(v[0], v[1])?,
                    _ => t.hadamard(v[0], v[1])?,
                };
                proj(t, o)
            },
            &[u(rng, 3, 2)?, u(rng, 3, 2)?],
            eps,
        ),
        "scale" => {
            let s = rng.uniform_scalar(-3.0, 3.0)?;
            finite_difference_check(
                |t, v| {
                    let o = t.scale(v[0], s)?;
                    proj(t, o)
                },
                &[u(rng, 2, 3)?],
                eps,
            )
        }
        "relu" => finite_difference_check(
            |t, v| {
                let o = t.relu(v[0])?;
                proj(t, o)
            },
            &[away_from(rng, -1.0, 1.0, 3, 3, &[0.0], 0.01)?],
            eps,
        ),
        "sigmoid" | "exp" | "row_softmax" => finite_difference_check(
            |t, v| {
                let o = match kind {
                    "sigmoid" => t.sigmoid(v[0])?,
                    "exp" => t.exp(v[0])?,
                    _ => t.row_softmax(v[0])?,
                };
                proj(t, o)
            },
            &[rng.uniform(-2.0, 2.0, 3, 4)?],
            eps,
        ),
        "sum_of_squares" => finite_difference_check(|t, v| t.sum_of_squares(v[0]), &[u(rng, 3, 2)?], eps),
        "concat_rows" | "concat_cols" => {
            let (a, b) = if kind == "concat_rows" {
                (u(rng, 2, 3)?, u(rng, 1, 3)?)
            } else {
                (u(rng, 3, 2)?, u(rng, 3, 1)?)
            };
            let axis = if kind == "concat_rows" { Axis::Rows } else { Axis::Cols };
            finite_difference_check(
                |t, v| {
                    let o = t.concat(&[v[0], v[1]], axis)?;
                    proj(t, o)
                },
                &[a, b],
                eps,
            )
        }
        "slice" => finite_difference_check(
            |t, v| {
                let o = t.slice(v[0], (1, 3), (0, 2))?;
                proj(t, o)
            },
            &[u(rng, 4, 3)?],
            eps,
        ),
        "transpose" => finite_difference_check(
            |t, v| {
                let o = t.transpose(v[0])?;
                proj(t, o)
            },
            &[u(rng, 2, 3)?],
            eps,
        ),
        "add_row" => finite_difference_check(
            |t, v| {
                let o = t.add_row(v[0], v[1])?;
                proj(t, o)
            },
            &[u(rng, 3, 4)?, u(rng, 1, 4)?],
            eps,
        ),
        "gather_rows" => {
            let rows = idx(rng, 6, 4)?;
            finite_difference_check(
                |t, v| {
                    let o = t.gather_rows(v[0], rows.clone())?;
                    proj(t, o)
                },
                &[u(rng, 4, 3)?],
                eps,
            )
        }
        "step_rows" | "step_rows_4x4" | "step_rows_broadcast" => {
            let (n, p) = if kind == "step_rows" { (3, 2) } else { (4, 4) };
            let (w, frows) = (5, 9);
            let map = if kind == "step_rows_broadcast" {
                RowMap::Broadcast
            } else {
                let offset = (rng.uniform_scalar(0.0, 3.0)? as usize).min(2);
                RowMap::Shifted {
                    rows: idx(rng, w, frows - offset)?.into(),
                    offset,
                }
            };
            finite_difference_check(
                |t, v| {
                    let o = t.step_rows(v[0], v[1], v[2], map.clone())?;
                    proj(t, o)
                },
                &[u(rng, w, n)?, u(rng, n, p)?, u(rng, frows, p)?],
                eps,
            )
        }
        "bound_penalty" => {
            let (w, c, brows) = (4, 3, 7);
            let lower = rng.uniform(-1.0, -0.2, brows, c)?;
            let upper = rng.uniform(0.2, 1.0, brows, c)?;
            let weighted = rng.uniform_scalar(0.0, 1.0)? < 0.5;
            let weights: Option<Arc<[f64]>> = if weighted {
                Some(rng.uniform(0.5, 3.0, 1, w)?.as_slice().into())
            } else {
                None
            };
            let rows: Arc<[usize]> = idx(rng, w, brows)?.into();
            let map = RowMap::Shifted { rows: rows.clone(), offset: 0 };
            let mut v = rng.uniform(-2.0, 2.0, w, c)?;
            for i in 0..w {
                for j in 0..c {
                    let kinks = [lower[(rows[i], j)], upper[(rows[i], j)]];
                    while kinks.iter().any(|k| (v[(i, j)] - k).abs() < 0.01) {
                        v[(i, j)] = rng.uniform_scalar(-2.0, 2.0)?;
                    }
                }
            }
            finite_difference_check(
                |t, vars| t.bound_penalty(vars[0], vars[1], vars[2], map.clone(), weights.clone()),
                &[v, lower, upper],
                eps,
            )
        }
        "column_error" => {
            let col = (rng.uniform_scalar(0.0, 4.0)? as usize).min(3);
            let map = RowMap::Shifted {
                rows: idx(rng, 5, 6)?.into(),
                offset: 2,
            };
            finite_difference_check(
                |t, v| t.column_error(v[0], v[1], col, map.clone()),
                &[u(rng, 5, 4)?, u(rng, 8, 1)?],
                eps,
            )
        }
        other => Err(Error::Argument(format!("no gradient check for {other:?}"))),
    }
}

/// Worst finite-difference error of each kind in [`CHECKED_OPS`] over
/// `cases` random draws.
pub fn op_gradient_errors(cases: usize, seed: u64, eps: f64) -> Result<Vec<(&'static str, f64)>> {
    let root = SeededRng::new(seed);
    CHECKED_OPS
        .iter()
        .enumerate()
        .map(|(k, &kind)| {
            let mut rng = root.split(k as u64);
            let mut worst: f64 = 0.0;
            for _ in 0..cases {
                worst = worst.max(check_case(kind, &mut rng, eps)?);
            }
            Ok((kind, worst))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    #[test]
    fn linear_function_is_exact() {
        let c = DenseMatrix::from_rows(&[vec![1.5, -2.0, 0.25]]).unwrap();
        let x = DenseMatrix::column(&[0.3, 0.7, -1.1]);
        let err = finite_difference_check(
            |t, v| {
                let cv = t.constant(c.clone());
                t.matmul(cv, v[0])
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn sigmoid_of_matmul() {
        let mut rng = SeededRng::new(1);
        let a = rng.uniform(-1.0, 1.0, 3, 3).unwrap();
        let b = rng.uniform(-1.0, 1.0, 3, 3).unwrap();
        let err = finite_difference_check(
            |t, v| {
                let p = t.matmul(v[0], v[1])?;
                let s = t.sigmoid(p)?;
                t.sum_of_squares(s)
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn relu_kink_excluded() {
        let x = DenseMatrix::row(&[0.0, 1.0, -2.0]);
        let f = |t: &mut Tape, v: &[Var]| {
            let r = t.relu(v[0])?;
            t.sum_of_squares(r)
        };
        let err = finite_difference_check_filtered(f, &[x], 1e-5, |_, _, v| v.abs() > 1e-3).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn bilinear_form_against_central_differences() {
        // loss = (a^T H b)^2 with a=[2], b=[4], H=[3]: u=24, dloss/dH = 2*u*a*b = 384
        let a = DenseMatrix::scalar(2.0);
        let h = DenseMatrix::scalar(3.0);
        let b = DenseMatrix::scalar(4.0);
        let f = |t: &mut Tape, v: &[Var]| {
            let ah = t.matmul(v[0], v[1])?;
            let u = t.matmul(ah, v[2])?;
            t.sum_of_squares(u)
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = [&a, &h, &b].iter().map(|m| tape.param((*m).clone())).collect();
        let l = f(&mut tape, &vars).unwrap();
        let g = tape.backward(l).unwrap();
        let fd = {
            let eval = |hv: f64| (2.0 * hv * 4.0f64).powi(2);
            (eval(3.0 + 1e-5) - eval(3.0 - 1e-5)) / 2e-5
        };
        assert!((g.get(vars[1]).unwrap()[(0, 0)] - fd).abs() / fd.abs() < 1e-8);
        assert!((fd - 384.0).abs() < 1e-5);
        assert!(finite_difference_check(f, &[a, h, b], 1e-5).unwrap() < 1e-8);
    }

    #[test]
    fn every_op_kind_matches_central_differences() {
        for (kind, err) in op_gradient_errors(10, 3, 1e-4).unwrap() {
            assert!(err < 1e-5, "{kind}: {err}");
        }
    }

    #[test]
    fn rejects_non_positive_eps() {
        let x = DenseMatrix::scalar(1.0);
        assert!(finite_difference_check(|t, v| t.sum_of_squares(v[0]), &[x], 0.0).is_err());
    }
}
