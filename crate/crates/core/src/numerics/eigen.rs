//! Eigenvalues of general real square matrices.
//!
//! The matrix is reduced to upper Hessenberg form by Householder
//! similarity transforms, then driven to real Schur form by Francis
//! double-shift QR sweeps (the real-arithmetic form of the Wilkinson
//! shift) with deflation on negligible subdiagonal entries. The sweep
//! structure follows the classic EISPACK `hqr` routine as popularised by
//! JAMA, without eigenvector accumulation.

use std::cmp::Ordering;

use num_complex::Complex64;

use super::DenseMatrix;
use crate::error::{Error, Result};

/// Largest matrix dimension accepted by [`eigenvalues`].
pub const MAX_DIM: usize = 64;

/// Relative deflation threshold on subdiagonal entries.
const DEFLATION_TOL: f64 = f64::EPSILON;

/// QR sweeps allowed per unit of dimension.
const SWEEPS_PER_DIM: usize = 100;

/// Eigenvalues with multiplicity, sorted by descending magnitude and then
/// by descending real part. Conjugate pairs appear adjacent with the
/// positive imaginary part first.
pub fn eigenvalues(m: &DenseMatrix) -> Result<Vec<Complex64>> {
    if !m.is_square() {
        return Err(Error::dim(
            "eigenvalues",
            format!("matrix is {}x{}, expected square", m.rows(), m.cols()),
        ));
    }
    let n = m.rows();
    if n > MAX_DIM {
        return Err(Error::Argument(format!(
            "eigenvalues supports n <= {MAX_DIM}, got {n}"
        )));
    }
    if !m.is_finite() {
        return Err(Error::Numeric {
            context: "eigenvalues input".into(),
            step: None,
        });
    }
    let mut values = if is_triangular(m) {
        (0..n).map(|i| Complex64::new(m[(i, i)], 0.0)).collect()
    } else {
        let mut h = to_rows(m);
        hessenberg(&mut h);
        hqr(&mut h)?
    };
    sort_spectrum(&mut values);
    Ok(values)
}

/// Maximum eigenvalue magnitude.
pub fn spectral_radius(m: &DenseMatrix) -> Result<f64> {
    Ok(eigenvalues(m)?
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

/// Sorts by descending magnitude, ties broken by descending real part and
/// then descending imaginary part. `-0.0` is normalised to `0.0`.
pub fn sort_spectrum(values: &mut [Complex64]) {
    for z in values.iter_mut() {
        if z.im == 0.0 {
            z.im = 0.0;
        }
        if z.re == 0.0 {
            z.re = 0.0;
        }
    }
    values.sort_by(|a, b| {
        b.norm()
            .partial_cmp(&a.norm())
            .unwrap_or(Ordering::Equal)
            .then(b.re.partial_cmp(&a.re).unwrap_or(Ordering::Equal))
            .then(b.im.partial_cmp(&a.im).unwrap_or(Ordering::Equal))
    });
}

fn is_triangular(m: &DenseMatrix) -> bool {
    let n = m.rows();
    let upper = (0..n).all(|i| (0..i).all(|j| m[(i, j)] == 0.0));
    let lower = (0..n).all(|i| (i + 1..n).all(|j| m[(i, j)] == 0.0));
    upper || lower
}

fn to_rows(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row_slice(i).to_vec()).collect()
}

/// In-place Householder reduction to upper Hessenberg form.
fn hessenberg(h: &mut [Vec<f64>]) {
    let n = h.len();
    if n < 3 {
        return;
    }
    let high = n - 1;
    let mut ort = vec![0.0; n];
    for m in 1..high {
        let scale: f64 = (m..=high).map(|i| h[i][m - 1].abs()).sum();
        if scale == 0.0 {
            continue;
        }
        let mut hh = 0.0;
        for i in (m..=high).rev() {
            ort[i] = h[i][m - 1] / scale;
            hh += ort[i] * ort[i];
        }
        let mut g = hh.sqrt();
        if ort[m] > 0.0 {
            g = -g;
        }
        hh -= ort[m] * g;
        ort[m] -= g;

        for j in m..n {
            let f: f64 = (m..=high).rev().map(|i| ort[i] * h[i][j]).sum::<f64>() / hh;
            for i in m..=high {
                h[i][j] -= f * ort[i];
            }
        }
        for row in h.iter_mut() {
            let f: f64 = (m..=high).rev().map(|j| ort[j] * row[j]).sum::<f64>() / hh;
            for j in m..=high {
                row[j] -= f * ort[j];
            }
        }
        h[m][m - 1] = scale * g;
        for i in m + 1..=high {
            h[i][m - 1] = 0.0;
        }
    }
}

/// Shifted QR iteration on an upper Hessenberg matrix.
fn hqr(h: &mut [Vec<f64>]) -> Result<Vec<Complex64>> {
    let nn = h.len();
    let mut re = vec![0.0; nn];
    let mut im = vec![0.0; nn];
    if nn == 0 {
        return Ok(Vec::new());
    }
    let low: isize = 0;
    let mut n: isize = nn as isize - 1;
    let mut exshift = 0.0;
    let (mut p, mut q, mut r) = (0.0f64, 0.0f64, 0.0f64);
    let (mut s, mut z): (f64, f64);
    let (mut x, mut y, mut w);

    let mut norm = 0.0;
    for (i, row) in h.iter().enumerate() {
        for v in &row[i.saturating_sub(1)..nn] {
            norm += v.abs();
        }
    }

    let cap = SWEEPS_PER_DIM * nn;
    let mut sweeps = 0usize;
    let mut iter = 0usize;

    macro_rules! at {
        ($i:expr, $j:expr) => {
            h[($i) as usize][($j) as usize]
        };
    }

    while n >= low {
        let mut l = n;
        while l > low {
            s = at!(l - 1, l - 1).abs() + at!(l, l).abs();
            if s == 0.0 {
                s = norm;
            }
            if at!(l, l - 1).abs() < DEFLATION_TOL * s {
                break;
            }
            l -= 1;
        }

        if l == n {
            at!(n, n) += exshift;
            re[n as usize] = at!(n, n);
            im[n as usize] = 0.0;
            n -= 1;
            iter = 0;
        } else if l == n - 1 {
            w = at!(n, n - 1) * at!(n - 1, n);
            p = (at!(n - 1, n - 1) - at!(n, n)) / 2.0;
            q = p * p + w;
            z = q.abs().sqrt();
            at!(n, n) += exshift;
            at!(n - 1, n - 1) += exshift;
            x = at!(n, n);
            let (i1, i0) = ((n - 1) as usize, n as usize);
            if q >= 0.0 {
                z = if p >= 0.0 { p + z } else { p - z };
                re[i1] = x + z;
                re[i0] = re[i1];
                if z != 0.0 {
                    re[i0] = x - w / z;
                }
                im[i1] = 0.0;
                im[i0] = 0.0;
            } else {
                re[i1] = x + p;
                re[i0] = x + p;
                im[i1] = z;
                im[i0] = -z;
            }
            n -= 2;
            iter = 0;
        } else {
            sweeps += 1;
            if sweeps > cap {
                return Err(Error::Convergence {
                    iterations: cap,
                    residual: at!(n, n - 1).abs(),
                });
            }
            x = at!(n, n);
            y = 0.0;
            w = 0.0;
            if l < n {
                y = at!(n - 1, n - 1);
                w = at!(n, n - 1) * at!(n - 1, n);
            }

            // Exceptional shifts break cycles that plain Francis steps can
            // fall into.
            if iter == 10 {
                exshift += x;
                for i in low..=n {
                    at!(i, i) -= x;
                }
                s = at!(n, n - 1).abs() + at!(n - 1, n - 2).abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            if iter == 30 {
                s = (y - x) / 2.0;
                s = s * s + w;
                if s > 0.0 {
                    s = s.sqrt();
                    if y < x {
                        s = -s;
                    }
                    s = x - w / ((y - x) / 2.0 + s);
                    for i in low..=n {
                        at!(i, i) -= s;
                    }
                    exshift += s;
                    x = 0.964;
                    y = x;
                    w = x;
                }
            }
            iter += 1;

            // Look for two consecutive small subdiagonal elements.
            let mut m = n - 2;
            while m >= l {
                z = at!(m, m);
                r = x - z;
                s = y - z;
                p = (r * s - w) / at!(m + 1, m) + at!(m, m + 1);
                q = at!(m + 1, m + 1) - z - r - s;
                r = at!(m + 2, m + 1);
                s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                if at!(m, m - 1).abs() * (q.abs() + r.abs())
                    < DEFLATION_TOL
                        * (p.abs() * (at!(m - 1, m - 1).abs() + z.abs() + at!(m + 1, m + 1).abs()))
                {
                    break;
                }
                m -= 1;
            }

            for i in m + 2..=n {
                at!(i, i - 2) = 0.0;
                if i > m + 2 {
                    at!(i, i - 3) = 0.0;
                }
            }

            // Double QR step on rows l..=n and columns m..=n.
            let mut k = m;
            while k <= n - 1 {
                let notlast = k != n - 1;
                if k != m {
                    p = at!(k, k - 1);
                    q = at!(k + 1, k - 1);
                    r = if notlast { at!(k + 2, k - 1) } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x == 0.0 {
                        k += 1;
                        continue;
                    }
                    p /= x;
                    q /= x;
                    r /= x;
                }
                s = (p * p + q * q + r * r).sqrt();
                if p < 0.0 {
                    s = -s;
                }
                if s != 0.0 {
                    if k != m {
                        at!(k, k - 1) = -s * x;
                    } else if l != m {
                        at!(k, k - 1) = -at!(k, k - 1);
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    z = r / s;
                    q /= p;
                    r /= p;

                    for j in k..nn as isize {
                        p = at!(k, j) + q * at!(k + 1, j);
                        if notlast {
                            p += r * at!(k + 2, j);
                            at!(k + 2, j) -= p * z;
                        }
                        at!(k, j) -= p * x;
                        at!(k + 1, j) -= p * y;
                    }
                    for i in 0..=n.min(k + 3) {
                        p = x * at!(i, k) + y * at!(i, k + 1);
                        if notlast {
                            p += z * at!(i, k + 2);
                            at!(i, k + 2) -= p * r;
                        }
                        at!(i, k) -= p;
                        at!(i, k + 1) -= p * q;
                    }
                }
                k += 1;
            }
        }
    }

    let out: Vec<Complex64> = re
        .into_iter()
        .zip(im)
        .map(|(a, b)| Complex64::new(a, b))
        .collect();
    if out.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Numeric {
            context: "eigenvalues output".into(),
            step: None,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    #[test]
    fn identity_spectrum() {
        let ev = eigenvalues(&DenseMatrix::identity(4)).unwrap();
        assert_eq!(ev.len(), 4);
        assert!(ev.iter().all(|z| close(*z, Complex64::new(1.0, 0.0), 1e-15)));
    }

    #[test]
    fn rotation_gives_conjugate_pair() {
        let m = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let ev = eigenvalues(&m).unwrap();
        assert!(close(ev[0], Complex64::new(0.0, 1.0), 1e-14), "{ev:?}");
        assert!(close(ev[1], Complex64::new(0.0, -1.0), 1e-14), "{ev:?}");
    }

    #[test]
    fn lower_triangular_returns_diagonal() {
        let m = DenseMatrix::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.3, 0.99, 0.0, 0.0],
            vec![0.1, 0.2, 0.98, 0.0],
            vec![0.02, 0.02, 0.005, 0.25],
        ])
        .unwrap();
        let ev = eigenvalues(&m).unwrap();
        let expected = [1.0, 0.99, 0.98, 0.25];
        for (z, e) in ev.iter().zip(expected) {
            assert!((z.re - e).abs() < 1e-12 && z.im == 0.0);
        }
    }

    #[test]
    fn companion_matrix_roots() {
        // x^3 - 6x^2 + 11x - 6 = (x-1)(x-2)(x-3)
        let m = DenseMatrix::from_rows(&[
            vec![6.0, -11.0, 6.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
        ])
        .unwrap();
        let ev = eigenvalues(&m).unwrap();
        for (z, e) in ev.iter().zip([3.0, 2.0, 1.0]) {
            assert!(close(*z, Complex64::new(e, 0.0), 1e-10), "{ev:?}");
        }
    }

    #[test]
    fn spectral_radius_of_stochastic_matrix() {
        let m = DenseMatrix::filled(2, 2, 0.5);
        assert!((spectral_radius(&m).unwrap() - 1.0).abs() < 1e-14);
        assert!((spectral_radius(&DenseMatrix::identity(3)).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_square() {
        let err = eigenvalues(&DenseMatrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn trace_is_preserved_on_larger_matrix() {
        let n = 12;
        let data: Vec<f64> = (0..n * n)
            .map(|k| ((k * 7919 % 101) as f64 / 50.0) - 1.0)
            .collect();
        let m = DenseMatrix::from_vec(n, n, data).unwrap();
        let ev = eigenvalues(&m).unwrap();
        let trace: f64 = (0..n).map(|i| m[(i, i)]).sum();
        let sum: Complex64 = ev.iter().sum();
        assert!((sum.re - trace).abs() < 1e-9 && sum.im.abs() < 1e-9);
    }
}
