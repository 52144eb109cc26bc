//! Ground-truth building thermal plant, signal synthesis and datasets.
//!
//! The plant is the discrete bilinear system
//!
//! ```text
//! x[k+1] = A x[k] + B u[k] + E d[k]
//! u[k]   = a[k] * H * b[k] + h
//! ```
//!
//! with four temperatures (wall, ceiling, floor, room), a heating input
//! formed from mass flow `a` and supply/return temperature difference `b`,
//! and three disturbances (ambient temperature, solar irradiation,
//! internal gains). Only the room temperature is observed.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, SeededRng};

pub const STATE_DIM: usize = 4;
pub const DIST_DIM: usize = 3;
/// Zero-based index of the observed room temperature (the fourth state).
pub const OBSERVED_STATE: usize = 3;
/// Five-minute sampling.
pub const SAMPLE_SECONDS: f64 = 300.0;
pub const STEPS_PER_DAY: usize = 288;
pub const STEPS_PER_WEEK: usize = 2016;
/// Specific heat capacity of water, J/(kg K).
pub const WATER_HEAT_CAPACITY: f64 = 4184.0;

/// Settings for the synthetic input and disturbance signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignalSettings {
    /// Peak supply mass flow, kg/s.
    pub mass_flow_max: f64,
    /// Amplitude of the supply/return temperature difference, K.
    pub delta_t_max: f64,
    pub ambient_mean: f64,
    pub ambient_amplitude: f64,
    /// Amplitude of the slow ambient drift (two-week period), K.
    pub ambient_drift: f64,
    /// Peak solar irradiation, W/m^2.
    pub solar_peak: f64,
    /// Peak internal gains, W.
    pub gains_peak: f64,
    /// Standard deviation scale of additive disturbance noise; 0 disables it.
    pub noise: f64,
}

impl Default for SignalSettings {
    fn default() -> Self {
        SignalSettings {
            mass_flow_max: 0.2,
            delta_t_max: 10.0,
            ambient_mean: 10.0,
            ambient_amplitude: 8.0,
            ambient_drift: 2.0,
            solar_peak: 600.0,
            gains_peak: 300.0,
            noise: 1.0,
        }
    }
}

/// Ground-truth parameters `{A, B, E, H, h}` plus signal settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSystem {
    pub a: DenseMatrix,
    pub b: DenseMatrix,
    pub e: DenseMatrix,
    pub heat_capacity: f64,
    pub offset: f64,
    pub sample_seconds: f64,
    pub signals: SignalSettings,
}

/// Exogenous sequences of equal length `T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSet {
    /// Mass flow, kg/s.
    pub a: Vec<f64>,
    /// Supply/return temperature difference, K.
    pub b: Vec<f64>,
    /// `T x 3`: ambient (deg C), solar (W/m^2), internal gains (W).
    pub d: DenseMatrix,
}

impl SignalSet {
    pub fn new(a: Vec<f64>, b: Vec<f64>, d: DenseMatrix) -> Result<Self> {
        if a.len() != b.len() || d.rows() != a.len() || d.cols() != DIST_DIM {
            return Err(Error::dim(
                "signal_set",
                format!(
                    "a: {}, b: {}, d: {:?} (expected {} x {DIST_DIM})",
                    a.len(),
                    b.len(),
                    d.shape(),
                    a.len()
                ),
            ));
        }
        if let Some(k) = a.iter().position(|v| *v < 0.0) {
            return Err(Error::Validation(format!(
                "negative mass flow {} at step {k}",
                a[k]
            )));
        }
        Ok(SignalSet { a, b, d })
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// Steps `k0..k1`.
    pub fn window(&self, k0: usize, k1: usize) -> SignalSet {
        SignalSet {
            a: self.a[k0..k1].to_vec(),
            b: self.b[k0..k1].to_vec(),
            d: self.d.rows_range(k0, k1),
        }
    }

    pub fn disturbance(&self, k: usize) -> &[f64] {
        self.d.row_slice(k)
    }

    /// Writes CSV with header `a,b,d1,d2,d3`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Validation(format!("csv write: {e}"));
        wr.write_record(["a", "b", "d1", "d2", "d3"]).map_err(io)?;
        for k in 0..self.len() {
            let d = self.disturbance(k);
            wr.write_record(
                [self.a[k], self.b[k], d[0], d[1], d[2]]
                    .iter()
                    .map(|v| format!("{v:?}")),
            )
            .map_err(io)?;
        }
        wr.flush().map_err(|e| Error::Validation(format!("csv flush: {e}")))
    }

    /// Parses CSV with header `a,b,d1,d2,d3`. Line numbers in errors are
    /// 1-based and count the header.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let headers = rd
            .headers()
            .map_err(|e| Error::Parse {
                line: 1,
                message: e.to_string(),
            })?
            .clone();
        let expected = ["a", "b", "d1", "d2", "d3"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header a,b,d1,d2,d3, got {:?}", headers),
            });
        }
        let (mut a, mut b, mut d) = (Vec::new(), Vec::new(), Vec::new());
        for (idx, rec) in rd.records().enumerate() {
            let line = idx + 2;
            let rec = rec.map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            if rec.len() != 5 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 5 fields, got {}", rec.len()),
                });
            }
            let vals = rec
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::Parse {
                            line,
                            message: format!("not a finite number: {f:?}"),
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            if vals[0] < 0.0 {
                return Err(Error::Validation(format!(
                    "negative mass flow {} at line {line}",
                    vals[0]
                )));
            }
            a.push(vals[0]);
            b.push(vals[1]);
            d.extend_from_slice(&vals[2..]);
        }
        let t = a.len();
        SignalSet::new(a, b, DenseMatrix::from_vec(t, DIST_DIM, d)?)
    }
}

/// Loads a signal CSV (`a,b,d1,d2,d3`) from disk.
pub fn load_signals_csv(path: &Path) -> Result<SignalSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    SignalSet::read_csv(std::io::BufReader::new(file))
}

pub fn save_signals_csv(signals: &SignalSet, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    signals.write_csv(std::io::BufWriter::new(file))
}

/// A contiguous slice of simulated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    /// Global step index of the first state.
    pub start: usize,
    /// `(T+1) x 4` states `x[0..=T]`; row 0 is the partition's initial state.
    pub states: DenseMatrix,
    /// Inputs and disturbances for steps `0..T`.
    pub signals: SignalSet,
}

impl Partition {
    pub fn new(start: usize, states: DenseMatrix, signals: SignalSet) -> Result<Self> {
        if states.rows() != signals.len() + 1 || states.cols() != STATE_DIM {
            return Err(Error::dim(
                "partition",
                format!(
                    "states {:?} for {} signal steps",
                    states.shape(),
                    signals.len()
                ),
            ));
        }
        Ok(Partition {
            start,
            states,
            signals,
        })
    }

    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.signals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.is_empty()
    }

    pub fn x0(&self) -> &[f64] {
        self.states.row_slice(0)
    }

    /// Observed (room) temperature for states `0..=T`.
    pub fn observed(&self) -> Vec<f64> {
        self.states.column_values(OBSERVED_STATE)
    }

    /// Writes `T` rows of `x1,x2,x3,x4,a,b,d1,d2,d3`, pairing each step's
    /// signals with the state at the start of that step.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Validation(format!("csv write: {e}"));
        wr.write_record(["x1", "x2", "x3", "x4", "a", "b", "d1", "d2", "d3"])
            .map_err(io)?;
        for k in 0..self.len() {
            let mut row: Vec<f64> = self.states.row_slice(k).to_vec();
            row.push(self.signals.a[k]);
            row.push(self.signals.b[k]);
            row.extend_from_slice(self.signals.disturbance(k));
            wr.write_record(row.iter().map(|v| format!("{v:?}"))).map_err(io)?;
        }
        wr.flush().map_err(|e| Error::Validation(format!("csv flush: {e}")))
    }
}

/// Train / validation / test weeks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Partition,
    pub val: Partition,
    pub test: Partition,
    pub observed_index: usize,
}

impl PlantSystem {
    /// Default four-state building plant.
    ///
    /// `A` is lower triangular with diagonal `(1.0, 0.99, 0.98, 0.25)`, so
    /// its spectrum is exactly that diagonal. The envelope temperatures feed
    /// only into the room row, with the floor coupling weakest.
    pub fn default_building() -> Self {
        let a = DenseMatrix::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.99, 0.0, 0.0],
            vec![0.0, 0.0, 0.98, 0.0],
            vec![0.02, 0.02, 0.005, 0.25],
        ])
        .expect("static shape");
        let b = DenseMatrix::column(&[0.0, 0.0, 0.0, 5e-4]);
        let e = DenseMatrix::from_rows(&[
            vec![5e-5, 4e-6, 0.0],
            vec![0.02, 0.0, 0.0],
            vec![0.0, 0.0, 0.0],
            vec![0.9, 0.004, 0.005],
        ])
        .expect("static shape");
        PlantSystem {
            a,
            b,
            e,
            heat_capacity: WATER_HEAT_CAPACITY,
            offset: 0.0,
            sample_seconds: SAMPLE_SECONDS,
            signals: SignalSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = [
            ("A", self.a.shape(), (STATE_DIM, STATE_DIM)),
            ("B", self.b.shape(), (STATE_DIM, 1)),
            ("E", self.e.shape(), (STATE_DIM, DIST_DIM)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::dim(
                    "plant",
                    format!("{name} is {got:?}, expected {want:?}"),
                ));
            }
        }
        if !(self.a.is_finite() && self.b.is_finite() && self.e.is_finite()) {
            return Err(Error::Validation("plant matrices must be finite".into()));
        }
        if self.a.as_slice().iter().any(|v| *v < 0.0) {
            return Err(Error::Validation("plant A must be nonnegative".into()));
        }
        Ok(())
    }

    /// Algebraic input `u = a H b + h`.
    #[inline]
    pub fn heat_input(&self, a: f64, b: f64) -> f64 {
        a * self.heat_capacity * b + self.offset
    }

    /// Largest admissible heat-input magnitude, `m_max * c_p * dT_max`.
    pub fn heat_input_bound(&self) -> f64 {
        self.signals.mass_flow_max * self.heat_capacity * self.signals.delta_t_max
    }

    /// Synthesises `T` steps of inputs and disturbances starting at global
    /// step 0. The heating inputs are pure day-period sinusoids; the
    /// disturbances add seeded noise and a slow ambient drift.
    pub fn generate_signals(&self, steps: usize, rng: &mut SeededRng) -> Result<SignalSet> {
        if steps == 0 {
            return Err(Error::Argument("signal length must be positive".into()));
        }
        let s = &self.signals;
        let day = STEPS_PER_DAY as f64;
        let phase = |k: usize| 2.0 * PI * k as f64 / day;
        let a: Vec<f64> = (0..steps)
            .map(|k| s.mass_flow_max * (1.0 + phase(k).sin()) / 2.0)
            .collect();
        let b: Vec<f64> = (0..steps).map(|k| s.delta_t_max * phase(k).cos()).collect();

        let days = steps.div_ceil(STEPS_PER_DAY);
        let mut cloud = Vec::with_capacity(days);
        for _ in 0..days {
            cloud.push(if s.noise > 0.0 {
                rng.uniform_scalar(0.6, 1.0)?
            } else {
                1.0
            });
        }
        let mut d = DenseMatrix::zeros(steps, DIST_DIM);
        let quarter = STEPS_PER_DAY / 4;
        for k in 0..steps {
            let mut noise = || {
                if s.noise > 0.0 {
                    s.noise * rng.normal()
                } else {
                    0.0
                }
            };
            // Ambient peaks mid-afternoon.
            let drift = s.ambient_drift * (2.0 * PI * k as f64 / (2 * STEPS_PER_WEEK) as f64).sin();
            let ambient = s.ambient_mean
                + s.ambient_amplitude * (phase(k + STEPS_PER_DAY - quarter - 36)).sin()
                + drift
                + 0.5 * noise();
            let sun = phase(k + STEPS_PER_DAY - quarter).sin().max(0.0);
            let solar = (s.solar_peak * sun * cloud[k / STEPS_PER_DAY] + 10.0 * noise() * sun).max(0.0);
            // Occupied roughly 08:00-18:00 with smooth edges.
            let occ = phase(k + STEPS_PER_DAY - 96 - quarter / 3).sin();
            let gains = (s.gains_peak * (0.55 + 0.45 * (3.0 * occ).tanh()) + 5.0 * noise()).max(0.0);
            d[(k, 0)] = ambient;
            d[(k, 1)] = solar;
            d[(k, 2)] = gains;
        }
        SignalSet::new(a, b, d)
    }

    /// Iterates the plant from `x0`, returning `(T+1) x 4` states.
    pub fn simulate(&self, x0: &[f64], signals: &SignalSet) -> Result<DenseMatrix> {
        if x0.len() != STATE_DIM {
            return Err(Error::dim(
                "simulate_truth",
                format!("x0 has {} entries, expected {STATE_DIM}", x0.len()),
            ));
        }
        let t = signals.len();
        let mut states = DenseMatrix::zeros(t + 1, STATE_DIM);
        states.row_slice_mut(0).copy_from_slice(x0);
        let mut next = [0.0; STATE_DIM];
        for k in 0..t {
            let u = self.heat_input(signals.a[k], signals.b[k]);
            let x = states.row_slice(k);
            let d = signals.disturbance(k);
            for (i, n) in next.iter_mut().enumerate() {
                let mut acc = self.b[(i, 0)] * u;
                for j in 0..STATE_DIM {
                    acc += self.a[(i, j)] * x[j];
                }
                for j in 0..DIST_DIM {
                    acc += self.e[(i, j)] * d[j];
                }
                *n = acc;
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { step: k });
            }
            states.row_slice_mut(k + 1).copy_from_slice(&next);
        }
        Ok(states)
    }

    /// Simulates four weeks from 20 degC, drops the first week and returns
    /// weeks two, three and four as train, validation and test.
    pub fn make_dataset(&self, rng: &mut SeededRng) -> Result<Dataset> {
        let signals = self.generate_signals(4 * STEPS_PER_WEEK, rng)?;
        self.dataset_from_signals(&signals)
    }

    /// As [`PlantSystem::make_dataset`] with externally supplied signals,
    /// which must cover at least four weeks.
    pub fn dataset_from_signals(&self, signals: &SignalSet) -> Result<Dataset> {
        self.validate()?;
        let w = STEPS_PER_WEEK;
        if signals.len() < 4 * w {
            return Err(Error::Argument(format!(
                "dataset needs {} signal steps, got {}",
                4 * w,
                signals.len()
            )));
        }
        let signals = signals.window(0, 4 * w);
        let states = self.simulate(&[20.0; STATE_DIM], &signals)?;
        let part = |week: usize| {
            let k0 = week * w;
            Partition::new(
                k0,
                states.rows_range(k0, k0 + w + 1),
                signals.window(k0, k0 + w),
            )
        };
        Ok(Dataset {
            train: part(1)?,
            val: part(2)?,
            test: part(3)?,
            observed_index: OBSERVED_STATE,
        })
    }
}

/// Default building plant.
pub fn build_default_plant() -> PlantSystem {
    PlantSystem::default_building()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::eigenvalues;

    #[test]
    fn default_spectrum_matches_diagonal() {
        let p = build_default_plant();
        let ev = eigenvalues(&p.a).unwrap();
        for (z, e) in ev.iter().zip([1.0, 0.99, 0.98, 0.25]) {
            assert!((z.re - e).abs() < 1e-9 && z.im.abs() < 1e-9);
        }
        assert!(p.a[(3, 2)] < p.a[(3, 0)] && p.a[(3, 2)] < p.a[(3, 1)]);
        assert_eq!(p.offset, 0.0);
        assert_eq!(p.heat_capacity, 4184.0);
        p.validate().unwrap();
    }

    #[test]
    fn heat_input_arithmetic() {
        let p = build_default_plant();
        assert!((p.heat_input(0.1, 5.0) - 2092.0).abs() < 1e-9);
    }

    #[test]
    fn identity_plant_is_constant() {
        let mut p = build_default_plant();
        p.a = DenseMatrix::identity(4);
        p.b = DenseMatrix::zeros(4, 1);
        p.e = DenseMatrix::zeros(4, 3);
        let sig = p.generate_signals(50, &mut SeededRng::new(1)).unwrap();
        let x = p.simulate(&[1.0, 2.0, 3.0, 4.0], &sig).unwrap();
        for k in 0..=50 {
            assert_eq!(x.row_slice(k), &[1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn signals_are_periodic_without_noise() {
        let mut p = build_default_plant();
        p.signals.noise = 0.0;
        let s = p.generate_signals(3 * STEPS_PER_DAY, &mut SeededRng::new(0)).unwrap();
        for k in 0..2 * STEPS_PER_DAY {
            assert!((s.a[k + 288] - s.a[k]).abs() < 1e-12);
            assert!((s.b[k + 288] - s.b[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn signal_ranges() {
        let p = build_default_plant();
        let s = p.generate_signals(STEPS_PER_WEEK, &mut SeededRng::new(5)).unwrap();
        let m = p.signals.mass_flow_max;
        assert!(s.a.iter().all(|&a| (0.0..=m).contains(&a)));
        assert!((0..s.len()).all(|k| s.d[(k, 1)] >= 0.0 && s.d[(k, 2)] >= 0.0));
    }

    #[test]
    fn dataset_partitions_are_contiguous_weeks() {
        let p = build_default_plant();
        let ds = p.make_dataset(&mut SeededRng::new(0)).unwrap();
        assert_eq!(
            (ds.train.len(), ds.val.len(), ds.test.len()),
            (2016, 2016, 2016)
        );
        assert_eq!(ds.train.start + ds.train.len(), ds.val.start);
        assert_eq!(ds.val.start + ds.val.len(), ds.test.start);
        assert_eq!(ds.train.states.row_slice(2016), ds.val.x0());
        assert_eq!(ds.observed_index, 3);
    }

    #[test]
    fn csv_rejects_bad_rows() {
        let err = SignalSet::read_csv(&b"a,b,d1,d2,d3\n0.1,1,2,3,4\nx,1,2,3,4\n"[..]).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = SignalSet::read_csv(&b"a,b,d1,d2,d3\n-0.1,1,2,3,4\n"[..]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
        let err = SignalSet::read_csv(&b"a,b,d1,d2,d3\n0.1,1,2,3\n"[..]).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }
}
