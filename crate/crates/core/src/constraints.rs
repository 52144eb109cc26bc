//! Relu-encoded slacks for lower/upper bounds on states and algebraic
//! inputs.
//!
//! For a value `v` with bounds `lo <= v <= hi` the violations are
//! `s_lo = relu(lo - v)` and `s_hi = relu(v - hi)`; the joint slack
//! `s_lo + s_hi` is zero exactly when the bounds hold.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;
use crate::plant::{PlantSystem, STATE_DIM};

/// A bound that is either constant or given per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundSeq {
    Constant(Vec<f64>),
    /// One row per step, one column per bounded component.
    PerStep(DenseMatrix),
    /// Headerless matrix CSV read when the bound is resolved.
    Csv(PathBuf),
}

impl BoundSeq {
    /// Materialises `steps` rows of `width` columns.
    pub fn resolve(&self, steps: usize, width: usize) -> Result<DenseMatrix> {
        let per_step = |m: &DenseMatrix| -> Result<DenseMatrix> {
            if m.cols() != width || m.rows() < steps {
                return Err(Error::dim(
                    "bounds",
                    format!("per-step bound is {:?}, need at least {steps} x {width}", m.shape()),
                ));
            }
            Ok(m.rows_range(0, steps))
        };
        match self {
            BoundSeq::Constant(v) => {
                if v.len() != width {
                    return Err(Error::dim(
                        "bounds",
                        format!("constant bound has {} entries, expected {width}", v.len()),
                    ));
                }
                let mut m = DenseMatrix::zeros(steps, width);
                for i in 0..steps {
                    m.row_slice_mut(i).copy_from_slice(v);
                }
                Ok(m)
            }
            BoundSeq::PerStep(m) => per_step(m),
            BoundSeq::Csv(path) => per_step(&DenseMatrix::load_csv(path)?),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, BoundSeq::Constant(_))
    }
}

/// Bounds on states and the algebraic input with their penalty weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSpec {
    pub x_lower: BoundSeq,
    pub x_upper: BoundSeq,
    pub u_lower: BoundSeq,
    pub u_upper: BoundSeq,
    /// State penalty weight.
    pub lambda: f64,
    /// Input penalty weight.
    pub mu: f64,
}

impl BoundSpec {
    /// States in `[0, 40]` degC and heat input within `+-m_max c_p dT_max`,
    /// with unit penalty weights.
    pub fn default_for(plant: &PlantSystem) -> Self {
        let u_max = plant.heat_input_bound();
        BoundSpec {
            x_lower: BoundSeq::Constant(vec![0.0; STATE_DIM]),
            x_upper: BoundSeq::Constant(vec![40.0; STATE_DIM]),
            u_lower: BoundSeq::Constant(vec![-u_max]),
            u_upper: BoundSeq::Constant(vec![u_max]),
            lambda: 1.0,
            mu: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.mu >= 0.0) {
            return Err(Error::Validation(format!(
                "penalty weights must be nonnegative (lambda {}, mu {})",
                self.lambda, self.mu
            )));
        }
        Ok(())
    }

    /// Resolves bounds for a partition of `steps` transitions: state bounds
    /// cover the `steps + 1` states, input bounds the `steps` inputs.
    pub fn resolve(&self, steps: usize) -> Result<ResolvedBounds> {
        self.validate()?;
        let r = ResolvedBounds {
            x_lower: self.x_lower.resolve(steps + 1, STATE_DIM)?,
            x_upper: self.x_upper.resolve(steps + 1, STATE_DIM)?,
            u_lower: self.u_lower.resolve(steps, 1)?,
            u_upper: self.u_upper.resolve(steps, 1)?,
            lambda: self.lambda,
            mu: self.mu,
            time_invariant: [&self.x_lower, &self.x_upper, &self.u_lower, &self.u_upper]
                .iter()
                .all(|b| b.is_constant()),
        };
        check_order(&r.x_lower, &r.x_upper, "state")?;
        check_order(&r.u_lower, &r.u_upper, "input")?;
        Ok(r)
    }
}

fn check_order(lower: &DenseMatrix, upper: &DenseMatrix, what: &str) -> Result<()> {
    for (k, (lo, hi)) in lower.as_slice().iter().zip(upper.as_slice()).enumerate() {
        if !(lo <= hi) {
            return Err(Error::Validation(format!(
                "{what} bound inverted at step {} component {}: {lo} > {hi}",
                k / lower.cols(),
                k % lower.cols()
            )));
        }
    }
    Ok(())
}

/// Bounds materialised for one partition.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedBounds {
    /// `(T+1) x 4`.
    pub x_lower: DenseMatrix,
    pub x_upper: DenseMatrix,
    /// `T x 1`.
    pub u_lower: DenseMatrix,
    pub u_upper: DenseMatrix,
    pub lambda: f64,
    pub mu: f64,
    pub time_invariant: bool,
}

/// Lower and upper violation magnitudes of `v` against `[lower, upper]`.
pub fn bound_slacks(v: &[f64], lower: &[f64], upper: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if v.len() != lower.len() || v.len() != upper.len() {
        return Err(Error::dim(
            "bound_slacks",
            format!("value {} vs bounds {}/{}", v.len(), lower.len(), upper.len()),
        ));
    }
    if let Some(i) = (0..v.len()).find(|&i| !(lower[i] <= upper[i])) {
        return Err(Error::Validation(format!(
            "bound inverted at component {i}: {} > {}",
            lower[i], upper[i]
        )));
    }
    let s_lower = v.iter().zip(lower).map(|(x, lo)| (lo - x).max(0.0)).collect();
    let s_upper = v.iter().zip(upper).map(|(x, hi)| (x - hi).max(0.0)).collect();
    Ok((s_lower, s_upper))
}

/// Joint slack `relu(lower - v) + relu(v - upper)` recorded on the tape.
pub fn joint_slack_on_tape(tape: &mut Tape, v: Var, lower: Var, upper: Var) -> Result<Var> {
    let (s_lower, s_upper) = slacks_on_tape(tape, v, lower, upper)?;
    tape.add(s_lower, s_upper)
}

/// `(relu(lower - v), relu(v - upper))` recorded on the tape.
pub fn slacks_on_tape(tape: &mut Tape, v: Var, lower: Var, upper: Var) -> Result<(Var, Var)> {
    let below = tape.sub(lower, v)?;
    let s_lower = tape.relu(below)?;
    let above = tape.sub(v, upper)?;
    let s_upper = tape.relu(above)?;
    Ok((s_lower, s_upper))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn above_upper() {
        let (lo, hi) = bound_slacks(&[5.0], &[0.0], &[4.0]).unwrap();
        assert_eq!((lo[0], hi[0]), (0.0, 1.0));
    }

    #[test]
    fn below_lower() {
        let (lo, hi) = bound_slacks(&[-2.0], &[0.0], &[4.0]).unwrap();
        assert_eq!((lo[0], hi[0]), (2.0, 0.0));
    }

    #[test]
    fn inside_is_zero() {
        let (lo, hi) = bound_slacks(&[1.0, 0.0, 4.0], &[0.0; 3], &[4.0; 3]).unwrap();
        assert!(lo.iter().chain(&hi).all(|s| *s == 0.0));
    }

    #[test]
    fn inverted_bounds_rejected() {
        assert!(matches!(
            bound_slacks(&[1.0], &[2.0], &[1.0]),
            Err(Error::Validation(_))
        ));
        let mut spec = BoundSpec::default_for(&PlantSystem::default_building());
        spec.x_lower = BoundSeq::Constant(vec![50.0; 4]);
        assert!(matches!(spec.resolve(3), Err(Error::Validation(_))));
    }

    #[test]
    fn negative_weights_rejected() {
        let mut spec = BoundSpec::default_for(&PlantSystem::default_building());
        spec.mu = -1.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn tape_slack_matches_plain() {
        let mut t = Tape::new();
        let v = t.constant(DenseMatrix::row(&[-1.0, 2.0, 7.0]));
        let lo = t.constant(DenseMatrix::row(&[0.0, 0.0, 0.0]));
        let hi = t.constant(DenseMatrix::row(&[5.0, 5.0, 5.0]));
        let s = joint_slack_on_tape(&mut t, v, lo, hi).unwrap();
        assert_eq!(t.value(s).as_slice(), &[1.0, 0.0, 2.0]);
    }

    #[test]
    fn resolve_per_step_and_constant() {
        let per = DenseMatrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let m = BoundSeq::PerStep(per).resolve(2, 1).unwrap();
        assert_eq!(m.as_slice(), &[1.0, 2.0]);
        assert!(BoundSeq::Constant(vec![1.0, 2.0]).resolve(2, 1).is_err());
    }

    proptest! {
        #[test]
        fn at_most_one_side_violated(v in -100.0..100.0f64, lo in -50.0..0.0f64, width in 0.001..50.0f64) {
            let hi = lo + width;
            let (sl, su) = bound_slacks(&[v], &[lo], &[hi]).unwrap();
            prop_assert_eq!(sl[0] * su[0], 0.0);
            let s = sl[0] + su[0];
            prop_assert_eq!(s == 0.0, lo <= v && v <= hi);
        }

        #[test]
        fn slack_is_one_lipschitz(v in -100.0..100.0f64, w in -100.0..100.0f64, lo in -50.0..0.0f64, width in 0.0..50.0f64) {
            let hi = lo + width;
            let (a1, b1) = bound_slacks(&[v], &[lo], &[hi]).unwrap();
            let (a2, b2) = bound_slacks(&[w], &[lo], &[hi]).unwrap();
            prop_assert!(((a1[0] + b1[0]) - (a2[0] + b2[0])).abs() <= (v - w).abs() + 1e-12);
        }
    }
}
