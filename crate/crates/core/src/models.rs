//! Neural state-space models with structured algebraic inputs.
//!
//! One step of every model is
//!
//! ```text
//! x' = A~ x + B~ u + E~ d,    u = h(a, b)
//! ```
//!
//! where `h` is a black-box MLP, a learnable bilinear term (gray), the
//! known bilinear term (white), or the two-layer recurrent cell of the
//! S-RNN baseline. The ODE variants build `A~` from unconstrained
//! parameters so that it is elementwise positive with row sums in
//! `[0.9, 1)`, which bounds its spectral radius below one.

use serde::{Deserialize, Serialize};

use std::sync::Arc;

use crate::autodiff::{sigmoid, RowMap, Tape, Var};
use crate::constraints::{bound_slacks, ResolvedBounds};
use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, SeededRng};
use crate::plant::{PlantSystem, SignalSet, DIST_DIM, STATE_DIM, WATER_HEAT_CAPACITY};

/// Damping depth of the stable transition: row sums lie in `(1 - DAMPING, 1)`.
pub const DAMPING: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgebraicVariant {
    Black,
    Gray,
    White,
    Srnn,
}

impl AlgebraicVariant {
    pub const ALL: [AlgebraicVariant; 4] = [
        AlgebraicVariant::Black,
        AlgebraicVariant::Gray,
        AlgebraicVariant::White,
        AlgebraicVariant::Srnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlgebraicVariant::Black => "black",
            AlgebraicVariant::Gray => "gray",
            AlgebraicVariant::White => "white",
            AlgebraicVariant::Srnn => "srnn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "black" | "b" => Ok(AlgebraicVariant::Black),
            "gray" | "grey" | "g" => Ok(AlgebraicVariant::Gray),
            "white" | "w" => Ok(AlgebraicVariant::White),
            "srnn" | "s-rnn" => Ok(AlgebraicVariant::Srnn),
            other => Err(Error::Config(format!("unknown model variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub variant: AlgebraicVariant,
    /// Penalise state and input bound violations during training.
    pub constrained: bool,
    pub hidden_units: usize,
    /// Known heat capacity of the white variant; also the scale of the
    /// gray variant's learnable gain.
    pub heat_capacity: f64,
    /// Known offset of the white variant.
    pub heat_offset: f64,
    /// The algebraic input enters the dynamics as `u / input_scale`.
    #[serde(default = "unit_scale")]
    pub input_scale: f64,
    /// Disturbance channel `j` enters the dynamics as `d_j / disturbance_scale[j]`.
    #[serde(default = "unit_disturbance_scale")]
    pub disturbance_scale: [f64; DIST_DIM],
}

fn unit_scale() -> f64 {
    1.0
}

fn unit_disturbance_scale() -> [f64; DIST_DIM] {
    [1.0; DIST_DIM]
}

/// Nominal magnitudes of ambient temperature, solar and internal gains.
pub const NOMINAL_DISTURBANCE_SCALE: [f64; DIST_DIM] = [10.0, 100.0, 100.0];

impl ModelSpec {
    pub fn new(variant: AlgebraicVariant, constrained: bool) -> Self {
        ModelSpec {
            variant,
            constrained,
            hidden_units: 8,
            heat_capacity: WATER_HEAT_CAPACITY,
            heat_offset: 0.0,
            input_scale: match variant {
                AlgebraicVariant::Gray | AlgebraicVariant::White => WATER_HEAT_CAPACITY,
                AlgebraicVariant::Black | AlgebraicVariant::Srnn => 1.0,
            },
            disturbance_scale: NOMINAL_DISTURBANCE_SCALE,
        }
    }

    /// Same spec with unit input and disturbance scales.
    pub fn unscaled(mut self) -> Self {
        self.input_scale = 1.0;
        self.disturbance_scale = [1.0; DIST_DIM];
        self
    }

    /// Short label such as `cODE_G` or `SRNN`.
    pub fn label(&self) -> String {
        let base = match self.variant {
            AlgebraicVariant::Black => "ODE_B",
            AlgebraicVariant::Gray => "ODE_G",
            AlgebraicVariant::White => "ODE_W",
            AlgebraicVariant::Srnn => "SRNN",
        };
        if self.constrained {
            format!("c{base}")
        } else {
            base.to_string()
        }
    }

    /// The six ODE/cODE combinations in table order.
    pub fn ode_family() -> Vec<ModelSpec> {
        [false, true]
            .into_iter()
            .flat_map(|c| {
                [
                    AlgebraicVariant::Black,
                    AlgebraicVariant::Gray,
                    AlgebraicVariant::White,
                ]
                .into_iter()
                .map(move |v| ModelSpec::new(v, c))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransitionParams {
    /// `A~ = rowsoftmax(a_raw) .* (1 - 0.1 sigmoid(m_raw))`.
    PerronFrobenius {
        a_raw: DenseMatrix,
        m_raw: DenseMatrix,
    },
    /// `A~ = a`, unconstrained.
    Direct { a: DenseMatrix },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlgebraicParams {
    /// `u = w2 relu(w1 [a; b] + c1) + c2`.
    Black {
        w1: DenseMatrix,
        c1: DenseMatrix,
        w2: DenseMatrix,
        c2: DenseMatrix,
    },
    /// `u = a H b + h` with `H = scale * gain`, `h = scale * offset`.
    Gray {
        gain: DenseMatrix,
        offset: DenseMatrix,
        scale: f64,
    },
    /// `u = a H b + h` with fixed constants.
    White { heat_capacity: f64, offset: f64 },
    /// `h1 = relu(w1 [a; b])`, `u = relu(w2 h1 + w3 [a; b])`, no biases.
    Srnn {
        w1: DenseMatrix,
        w2: DenseMatrix,
        w3: DenseMatrix,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub transition: TransitionParams,
    /// `4 x 1`.
    pub b: DenseMatrix,
    /// `4 x 3`.
    pub e: DenseMatrix,
    pub algebraic: AlgebraicParams,
}

/// A model variant together with its parameters; the checkpoint unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ModelParams,
}

impl ModelParams {
    /// Named parameter matrices in a fixed order. Fixed constants of the
    /// white variant are not listed.
    pub fn entries(&self) -> Vec<(&'static str, &DenseMatrix)> {
        let mut out = Vec::new();
        match &self.transition {
            TransitionParams::PerronFrobenius { a_raw, m_raw } => {
                out.push(("a_raw", a_raw));
                out.push(("m_raw", m_raw));
            }
            TransitionParams::Direct { a } => out.push(("a", a)),
        }
        out.push(("b", &self.b));
        out.push(("e", &self.e));
        match &self.algebraic {
            AlgebraicParams::Black { w1, c1, w2, c2 } => {
                out.extend([("w1", w1), ("c1", c1), ("w2", w2), ("c2", c2)]);
            }
            AlgebraicParams::Gray { gain, offset, .. } => {
                out.extend([("gain", gain), ("offset", offset)]);
            }
            AlgebraicParams::White { .. } => {}
            AlgebraicParams::Srnn { w1, w2, w3 } => {
                out.extend([("w1", w1), ("w2", w2), ("w3", w3)]);
            }
        }
        out
    }

    /// Mutable view in the same order as [`ModelParams::entries`].
    pub fn entries_mut(&mut self) -> Vec<(&'static str, &mut DenseMatrix)> {
        let mut out = Vec::new();
        match &mut self.transition {
            TransitionParams::PerronFrobenius { a_raw, m_raw } => {
                out.push(("a_raw", a_raw));
                out.push(("m_raw", m_raw));
            }
            TransitionParams::Direct { a } => out.push(("a", a)),
        }
        out.push(("b", &mut self.b));
        out.push(("e", &mut self.e));
        match &mut self.algebraic {
            AlgebraicParams::Black { w1, c1, w2, c2 } => {
                out.extend([("w1", w1), ("c1", c1), ("w2", w2), ("c2", c2)]);
            }
            AlgebraicParams::Gray { gain, offset, .. } => {
                out.extend([("gain", gain), ("offset", offset)]);
            }
            AlgebraicParams::White { .. } => {}
            AlgebraicParams::Srnn { w1, w2, w3 } => {
                out.extend([("w1", w1), ("w2", w2), ("w3", w3)]);
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.entries().iter().all(|(_, m)| m.is_finite())
    }

    /// The effective transition matrix `A~`.
    pub fn effective_transition(&self) -> Result<DenseMatrix> {
        match &self.transition {
            TransitionParams::PerronFrobenius { a_raw, m_raw } => pf_transition(a_raw, m_raw),
            TransitionParams::Direct { a } => Ok(a.clone()),
        }
    }
}

impl Model {
    /// Checks the parameter layout against the spec.
    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        let bad = |what: &str| Err(Error::Config(format!("{}: {what}", self.spec.label())));
        let want = |m: &DenseMatrix, r: usize, c: usize, name: &str| -> Result<()> {
            if m.shape() != (r, c) {
                return Err(Error::dim(
                    "model",
                    format!("{name} is {:?}, expected ({r}, {c})", m.shape()),
                ));
            }
            Ok(())
        };
        match &p.transition {
            TransitionParams::PerronFrobenius { a_raw, m_raw } => {
                if self.spec.variant == AlgebraicVariant::Srnn {
                    return bad("the S-RNN uses an unconstrained transition");
                }
                want(a_raw, STATE_DIM, STATE_DIM, "a_raw")?;
                want(m_raw, STATE_DIM, STATE_DIM, "m_raw")?;
            }
            TransitionParams::Direct { a } => want(a, STATE_DIM, STATE_DIM, "a")?,
        }
        want(&p.b, STATE_DIM, 1, "b")?;
        want(&p.e, STATE_DIM, DIST_DIM, "e")?;
        let scales = std::iter::once(self.spec.input_scale).chain(self.spec.disturbance_scale);
        if scales.into_iter().any(|s| !(s.is_finite() && s > 0.0)) {
            return bad("input and disturbance scales must be positive");
        }
        let h = self.spec.hidden_units;
        match (&self.spec.variant, &p.algebraic) {
            (AlgebraicVariant::Black, AlgebraicParams::Black { w1, c1, w2, c2 }) => {
                want(w1, h, 2, "w1")?;
                want(c1, 1, h, "c1")?;
                want(w2, 1, h, "w2")?;
                want(c2, 1, 1, "c2")?;
            }
            (AlgebraicVariant::Gray, AlgebraicParams::Gray { gain, offset, .. }) => {
                want(gain, 1, 1, "gain")?;
                want(offset, 1, 1, "offset")?;
            }
            (AlgebraicVariant::White, AlgebraicParams::White { .. }) => {}
            (AlgebraicVariant::Srnn, AlgebraicParams::Srnn { w1, w2, w3 }) => {
                want(w1, h, 2, "w1")?;
                want(w2, 1, h, "w2")?;
                want(w3, 1, 2, "w3")?;
            }
            _ => return bad("algebraic parameters do not match the variant"),
        }
        if !p.is_finite() {
            return Err(Error::Numeric {
                context: format!("{} parameters", self.spec.label()),
                step: None,
            });
        }
        Ok(())
    }

    /// A white-box model carrying the plant's own matrices and constants,
    /// with a direct (unconstrained) transition.
    pub fn from_plant(plant: &PlantSystem, constrained: bool) -> Model {
        let mut spec = ModelSpec::new(AlgebraicVariant::White, constrained).unscaled();
        spec.heat_capacity = plant.heat_capacity;
        spec.heat_offset = plant.offset;
        Model {
            spec,
            params: ModelParams {
                transition: TransitionParams::Direct { a: plant.a.clone() },
                b: plant.b.clone(),
                e: plant.e.clone(),
                algebraic: AlgebraicParams::White {
                    heat_capacity: plant.heat_capacity,
                    offset: plant.offset,
                },
            },
        }
    }

    /// `B~` and `E~` in the units of the raw signals, scales folded in.
    pub fn input_matrices(&self) -> (DenseMatrix, DenseMatrix) {
        let b = self.params.b.scale(1.0 / self.spec.input_scale);
        let mut e = self.params.e.clone();
        for i in 0..e.rows() {
            for j in 0..e.cols() {
                e[(i, j)] /= self.spec.disturbance_scale[j];
            }
        }
        (b, e)
    }

    /// A gray-box model whose transition, `B~` and `E~` are the plant's,
    /// with a freshly drawn gain and zero offset.
    pub fn gray_on_plant(plant: &PlantSystem, constrained: bool, rng: &mut SeededRng) -> Result<Model> {
        let mut model = Model::from_plant(plant, constrained);
        model.spec.variant = AlgebraicVariant::Gray;
        model.params.algebraic = AlgebraicParams::Gray {
            gain: rng.uniform(0.0, 2.0, 1, 1)?,
            offset: DenseMatrix::zeros(1, 1),
            scale: model.spec.heat_capacity,
        };
        Ok(model)
    }

    /// Algebraic input for one `(a, b)` pair.
    pub fn algebraic_term(&self, a: f64, b: f64) -> Result<f64> {
        algebraic_term(&self.spec, &self.params.algebraic, a, b)
    }

    /// One model step from `x` with inputs `(a, b, d)`.
    pub fn ssm_step(&self, x: &[f64], a: f64, b: f64, d: &[f64]) -> Result<(Vec<f64>, f64)> {
        if x.len() != STATE_DIM || d.len() != DIST_DIM {
            return Err(Error::dim(
                "ssm_step",
                format!("x has {}, d has {}", x.len(), d.len()),
            ));
        }
        let at = self.params.effective_transition()?;
        let (bm, em) = self.input_matrices();
        let u = self.algebraic_term(a, b)?;
        let mut next = at.matvec(x)?;
        let ed = em.matvec(d)?;
        for i in 0..STATE_DIM {
            next[i] += bm[(i, 0)] * u + ed[i];
        }
        if !u.is_finite() || next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                context: "ssm_step".into(),
                step: None,
            });
        }
        Ok((next, u))
    }

    /// `N`-step rollout from `x0` with shared parameters. Slacks are
    /// computed against `bounds`, whose rows are indexed from the start of
    /// `signals`, when the model is constrained and are zero otherwise.
    pub fn rollout(
        &self,
        x0: &[f64],
        signals: &SignalSet,
        horizon: usize,
        bounds: Option<&ResolvedBounds>,
    ) -> Result<RolloutResult> {
        if signals.len() < horizon {
            return Err(Error::Argument(format!(
                "rollout of {horizon} steps needs that many signal steps, got {}",
                signals.len()
            )));
        }
        if x0.len() != STATE_DIM {
            return Err(Error::dim("rollout", format!("x0 has {} entries", x0.len())));
        }
        let signals = signals.window(0, horizon);
        let mut tape = Tape::new();
        let vars = register(&self.params, &mut tape, |_| false);
        let enc = EncodedSignals::new(&mut tape, &signals);
        let plan = WindowPlan {
            starts: vec![0],
            horizon,
        };
        let x0m = DenseMatrix::row(x0);
        let out = rollout_on_tape(&mut tape, self, &vars, &enc, &x0m, &plan)?;

        let mut states = DenseMatrix::zeros(horizon + 1, STATE_DIM);
        for (k, s) in out.states.iter().enumerate() {
            states.row_slice_mut(k).copy_from_slice(tape.value(*s).as_slice());
        }
        for k in 1..=horizon {
            if states.row_slice(k).iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    context: "rollout".into(),
                    step: Some(k - 1),
                });
            }
        }
        let u_seq = tape.value(out.u).as_slice().to_vec();
        let mut slack_x = DenseMatrix::zeros(horizon, STATE_DIM);
        let mut slack_u = vec![0.0; horizon];
        if let (true, Some(b)) = (self.spec.constrained, bounds) {
            if b.x_lower.rows() <= horizon || b.u_lower.rows() < horizon {
                return Err(Error::dim(
                    "rollout",
                    format!("bounds cover {} states for a {horizon}-step rollout", b.x_lower.rows()),
                ));
            }
            for k in 0..horizon {
                let (lo, hi) = bound_slacks(
                    states.row_slice(k + 1),
                    b.x_lower.row_slice(k + 1),
                    b.x_upper.row_slice(k + 1),
                )?;
                for (c, s) in slack_x.row_slice_mut(k).iter_mut().enumerate() {
                    *s = lo[c] + hi[c];
                }
                let (ul, uh) = bound_slacks(&u_seq[k..=k], b.u_lower.row_slice(k), b.u_upper.row_slice(k))?;
                slack_u[k] = ul[0] + uh[0];
            }
        }
        Ok(RolloutResult {
            states,
            u_seq,
            slack_x,
            slack_u,
        })
    }
}

/// Values of one single-trajectory rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    /// `(N+1) x 4`, row 0 is `x0`.
    pub states: DenseMatrix,
    /// Algebraic inputs for steps `0..N`.
    pub u_seq: Vec<f64>,
    /// `N x 4` joint state slack of predicted states `1..=N`.
    pub slack_x: DenseMatrix,
    /// Joint input slack for steps `0..N`.
    pub slack_u: Vec<f64>,
}

/// Stable transition `rowsoftmax(a_raw) .* (1 - 0.1 sigmoid(m_raw))`.
pub fn pf_transition(a_raw: &DenseMatrix, m_raw: &DenseMatrix) -> Result<DenseMatrix> {
    if a_raw.shape() != m_raw.shape() || !a_raw.is_square() {
        return Err(Error::dim(
            "pf_transition",
            format!("a_raw {:?}, m_raw {:?}", a_raw.shape(), m_raw.shape()),
        ));
    }
    let soft = crate::autodiff::row_softmax(a_raw);
    soft.zip_map(m_raw, "pf_transition", |s, m| s * (1.0 - DAMPING * sigmoid(m)))
}

/// [`pf_transition`] recorded on the tape.
pub fn pf_transition_on_tape(tape: &mut Tape, a_raw: Var, m_raw: Var) -> Result<Var> {
    let soft = tape.row_softmax(a_raw)?;
    let sig = tape.sigmoid(m_raw)?;
    let damp = tape.scale(sig, DAMPING)?;
    let ones = tape.constant(DenseMatrix::filled(m_raw.rows(), m_raw.cols(), 1.0));
    let m = tape.sub(ones, damp)?;
    tape.hadamard(soft, m)
}

/// Plain evaluation of the algebraic input.
pub fn algebraic_term(spec: &ModelSpec, theta: &AlgebraicParams, a: f64, b: f64) -> Result<f64> {
    let mismatch = || {
        Error::Config(format!(
            "{} model carries {} parameters",
            spec.variant.name(),
            match theta {
                AlgebraicParams::Black { .. } => "black",
                AlgebraicParams::Gray { .. } => "gray",
                AlgebraicParams::White { .. } => "white",
                AlgebraicParams::Srnn { .. } => "srnn",
            }
        ))
    };
    let relu = |v: f64| v.max(0.0);
    match (spec.variant, theta) {
        (AlgebraicVariant::White, AlgebraicParams::White { heat_capacity, offset }) => {
            Ok(a * heat_capacity * b + offset)
        }
        (AlgebraicVariant::Gray, AlgebraicParams::Gray { gain, offset, scale }) => {
            Ok(a * scale * gain[(0, 0)] * b + scale * offset[(0, 0)])
        }
        (AlgebraicVariant::Black, AlgebraicParams::Black { w1, c1, w2, c2 }) => {
            let mut u = c2[(0, 0)];
            for j in 0..w1.rows() {
                let z = w1[(j, 0)] * a + w1[(j, 1)] * b + c1[(0, j)];
                u += w2[(0, j)] * relu(z);
            }
            Ok(u)
        }
        (AlgebraicVariant::Srnn, AlgebraicParams::Srnn { w1, w2, w3 }) => {
            let mut acc = w3[(0, 0)] * a + w3[(0, 1)] * b;
            for j in 0..w1.rows() {
                acc += w2[(0, j)] * relu(w1[(j, 0)] * a + w1[(j, 1)] * b);
            }
            Ok(relu(acc))
        }
        _ => Err(mismatch()),
    }
}

/// Random initial parameters for `spec`.
///
/// Transition logits are uniform on `(-1, 1)`; dense weights are uniform on
/// `(-s, s)` with `s = 1/sqrt(fan_in)`; the gray gain is uniform on
/// `(0, 2)`, i.e. `H~` uniform on `(0, 2 H_nominal)`, with zero offset.
pub fn init_params(spec: &ModelSpec, rng: &mut SeededRng) -> Result<ModelParams> {
    let n = STATE_DIM;
    let h = spec.hidden_units;
    if h == 0 {
        return Err(Error::Config("hidden_units must be positive".into()));
    }
    let fan = |k: usize| 1.0 / (k as f64).sqrt();
    let sym = |rng: &mut SeededRng, s: f64, r: usize, c: usize| rng.uniform(-s, s, r, c);

    let transition = match spec.variant {
        AlgebraicVariant::Srnn => TransitionParams::Direct {
            a: sym(rng, fan(n), n, n)?,
        },
        _ => TransitionParams::PerronFrobenius {
            a_raw: rng.uniform(-1.0, 1.0, n, n)?,
            m_raw: rng.uniform(-1.0, 1.0, n, n)?,
        },
    };
    let b = sym(rng, fan(1), n, 1)?;
    let e = sym(rng, fan(DIST_DIM), n, DIST_DIM)?;
    let algebraic = match spec.variant {
        AlgebraicVariant::Black => AlgebraicParams::Black {
            w1: sym(rng, fan(2), h, 2)?,
            c1: sym(rng, fan(2), 1, h)?,
            w2: sym(rng, fan(h), 1, h)?,
            c2: sym(rng, fan(h), 1, 1)?,
        },
        AlgebraicVariant::Gray => AlgebraicParams::Gray {
            gain: rng.uniform(0.0, 2.0, 1, 1)?,
            offset: DenseMatrix::zeros(1, 1),
            scale: spec.heat_capacity,
        },
        AlgebraicVariant::White => AlgebraicParams::White {
            heat_capacity: spec.heat_capacity,
            offset: spec.heat_offset,
        },
        AlgebraicVariant::Srnn => AlgebraicParams::Srnn {
            w1: sym(rng, fan(2), h, 2)?,
            w2: sym(rng, fan(h), 1, h)?,
            w3: sym(rng, fan(2), 1, 2)?,
        },
    };
    Ok(ModelParams {
        transition,
        b,
        e,
        algebraic,
    })
}

/// Parameter handles registered on a tape.
#[derive(Debug, Clone)]
pub struct ParamVars {
    entries: Vec<(&'static str, Var)>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.entries.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }

    fn require(&self, name: &str) -> Result<Var> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, Var)> + '_ {
        self.entries.iter().copied()
    }
}

/// Records every parameter as a leaf; `trainable(name)` selects which
/// leaves receive gradients.
pub fn register(params: &ModelParams, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> ParamVars {
    ParamVars {
        entries: params
            .entries()
            .into_iter()
            .map(|(name, m)| (name, tape.leaf(m.clone(), trainable(name))))
            .collect(),
    }
}

/// Signal constants of one partition recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EncodedSignals {
    /// `T x 2` columns `[a, b]`.
    pub ab: Var,
    /// `T x 1`, `a * b`.
    pub ab_product: Var,
    /// `T x 3`.
    pub d: Var,
    pub len: usize,
}

impl EncodedSignals {
    pub fn new(tape: &mut Tape, signals: &SignalSet) -> Self {
        let t = signals.len();
        let mut ab = DenseMatrix::zeros(t, 2);
        let mut prod = DenseMatrix::zeros(t, 1);
        for k in 0..t {
            ab[(k, 0)] = signals.a[k];
            ab[(k, 1)] = signals.b[k];
            prod[(k, 0)] = signals.a[k] * signals.b[k];
        }
        EncodedSignals {
            ab: tape.constant(ab),
            ab_product: tape.constant(prod),
            d: tape.constant(signals.d.clone()),
            len: t,
        }
    }
}

/// The transition `A~` on the tape.
pub fn transition_on_tape(tape: &mut Tape, params: &ModelParams, vars: &ParamVars) -> Result<Var> {
    match params.transition {
        TransitionParams::PerronFrobenius { .. } => {
            pf_transition_on_tape(tape, vars.require("a_raw")?, vars.require("m_raw")?)
        }
        TransitionParams::Direct { .. } => vars.require("a"),
    }
}

/// Algebraic inputs for every step of a partition, `T x 1`.
pub fn algebraic_on_tape(
    tape: &mut Tape,
    model: &Model,
    vars: &ParamVars,
    sig: &EncodedSignals,
) -> Result<Var> {
    match &model.params.algebraic {
        AlgebraicParams::White { heat_capacity, offset } => {
            let prod = tape.value(sig.ab_product).map(|p| p * heat_capacity + offset);
            Ok(tape.constant(prod))
        }
        AlgebraicParams::Gray { scale, .. } => {
            let gain = tape.scale(vars.require("gain")?, *scale)?;
            let offset = tape.scale(vars.require("offset")?, *scale)?;
            let bilinear = tape.matmul(sig.ab_product, gain)?;
            tape.add_row(bilinear, offset)
        }
        AlgebraicParams::Black { .. } => {
            let w1t = tape.transpose(vars.require("w1")?)?;
            let z = tape.matmul(sig.ab, w1t)?;
            let z = tape.add_row(z, vars.require("c1")?)?;
            let hidden = tape.relu(z)?;
            let w2t = tape.transpose(vars.require("w2")?)?;
            let u = tape.matmul(hidden, w2t)?;
            tape.add_row(u, vars.require("c2")?)
        }
        AlgebraicParams::Srnn { .. } => {
            let w1t = tape.transpose(vars.require("w1")?)?;
            let z = tape.matmul(sig.ab, w1t)?;
            let hidden = tape.relu(z)?;
            let w2t = tape.transpose(vars.require("w2")?)?;
            let w3t = tape.transpose(vars.require("w3")?)?;
            let from_hidden = tape.matmul(hidden, w2t)?;
            let skip = tape.matmul(sig.ab, w3t)?;
            let pre = tape.add(from_hidden, skip)?;
            tape.relu(pre)
        }
    }
}

/// Which windows a batched rollout covers.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPlan {
    /// Start step of each window within the signal set.
    pub starts: Vec<usize>,
    pub horizon: usize,
}

impl WindowPlan {
    /// Windows of `horizon` steps every `stride` steps over `steps` signal
    /// steps: `floor((steps - horizon) / stride) + 1` of them.
    pub fn strided(steps: usize, horizon: usize, stride: usize) -> Result<Self> {
        if horizon == 0 || stride == 0 {
            return Err(Error::Argument("horizon and stride must be positive".into()));
        }
        if horizon > steps {
            return Err(Error::Argument(format!(
                "horizon {horizon} exceeds partition length {steps}"
            )));
        }
        Ok(WindowPlan {
            starts: (0..=steps - horizon).step_by(stride).collect(),
            horizon,
        })
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    /// Start rows as a shared index list for [`RowMap`].
    pub fn rows(&self) -> Arc<[usize]> {
        self.starts.as_slice().into()
    }
}

/// Tape handles of a batched rollout; every state is `W x 4`.
#[derive(Debug, Clone)]
pub struct BatchRollout {
    /// `N + 1` entries, the first being the initial states.
    pub states: Vec<Var>,
    /// `T x 1` algebraic inputs over the whole signal set.
    pub u: Var,
}

/// Rolls out `plan.len()` windows in parallel as a batch.
///
/// `x0` holds one initial state per window. The forcing `B~ u + E~ d` is
/// computed once for every step of the signal set and each step reads the
/// rows belonging to the windows.
pub fn rollout_on_tape(
    tape: &mut Tape,
    model: &Model,
    vars: &ParamVars,
    sig: &EncodedSignals,
    x0: &DenseMatrix,
    plan: &WindowPlan,
) -> Result<BatchRollout> {
    if x0.shape() != (plan.len(), STATE_DIM) {
        return Err(Error::dim(
            "rollout",
            format!("x0 is {:?} for {} windows", x0.shape(), plan.len()),
        ));
    }
    if plan.is_empty() || plan.starts.iter().any(|s| s + plan.horizon > sig.len) {
        return Err(Error::Argument(format!(
            "windows of {} steps exceed {} signal steps",
            plan.horizon, sig.len
        )));
    }
    let at = transition_on_tape(tape, &model.params, vars)?;
    let att = tape.transpose(at)?;
    let u = algebraic_on_tape(tape, model, vars, sig)?;
    let mut bt = tape.transpose(vars.require("b")?)?;
    if model.spec.input_scale != 1.0 {
        bt = tape.scale(bt, 1.0 / model.spec.input_scale)?;
    }
    let mut et = tape.transpose(vars.require("e")?)?;
    if model.spec.disturbance_scale != [1.0; DIST_DIM] {
        let mut inv = DenseMatrix::zeros(DIST_DIM, STATE_DIM);
        for j in 0..DIST_DIM {
            for i in 0..STATE_DIM {
                inv[(j, i)] = 1.0 / model.spec.disturbance_scale[j];
            }
        }
        let inv = tape.constant(inv);
        et = tape.hadamard(et, inv)?;
    }
    let heat = tape.matmul(u, bt)?;
    let dist = tape.matmul(sig.d, et)?;
    let forcing = tape.add(heat, dist)?;

    let rows = plan.rows();
    let mut x = tape.constant(x0.clone());
    let mut states = Vec::with_capacity(plan.horizon + 1);
    states.push(x);
    for j in 0..plan.horizon {
        let map = RowMap::Shifted {
            rows: rows.clone(),
            offset: j,
        };
        x = tape.step_rows(x, att, forcing, map)?;
        states.push(x);
    }
    Ok(BatchRollout { states, u })
}

/// Stacks per-window initial states into a `W x 4` matrix.
pub fn stack_initial_states(states: &DenseMatrix, plan: &WindowPlan) -> DenseMatrix {
    let mut x0 = DenseMatrix::zeros(plan.len(), STATE_DIM);
    for (i, &s) in plan.starts.iter().enumerate() {
        x0.row_slice_mut(i).copy_from_slice(states.row_slice(s));
    }
    x0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::spectral_radius;

    fn white(h: f64, off: f64) -> (ModelSpec, AlgebraicParams) {
        (
            ModelSpec::new(AlgebraicVariant::White, false),
            AlgebraicParams::White {
                heat_capacity: h,
                offset: off,
            },
        )
    }

    #[test]
    fn pf_singleton() {
        let a = pf_transition(&DenseMatrix::scalar(0.0), &DenseMatrix::scalar(0.0)).unwrap();
        assert!((a[(0, 0)] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn pf_row_stochastic_limit() {
        let a = pf_transition(&DenseMatrix::zeros(2, 2), &DenseMatrix::filled(2, 2, -100.0)).unwrap();
        for v in a.as_slice() {
            assert!((v - 0.5).abs() < 1e-12);
        }
        assert!((spectral_radius(&a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pf_tape_matches_plain() {
        let mut rng = SeededRng::new(0);
        let a_raw = rng.uniform(-3.0, 3.0, 4, 4).unwrap();
        let m_raw = rng.uniform(-3.0, 3.0, 4, 4).unwrap();
        let plain = pf_transition(&a_raw, &m_raw).unwrap();
        let mut t = Tape::new();
        let av = t.constant(a_raw);
        let mv = t.constant(m_raw);
        let out = pf_transition_on_tape(&mut t, av, mv).unwrap();
        assert!(t.value(out).max_abs_diff(&plain) < 1e-15);
        let rho = spectral_radius(&plain).unwrap();
        assert!((0.9..1.0).contains(&rho), "{rho}");
    }

    #[test]
    fn white_arithmetic() {
        let (spec, theta) = white(3.0, 1.0);
        assert_eq!(algebraic_term(&spec, &theta, 2.0, 4.0).unwrap(), 25.0);
    }

    #[test]
    fn gray_with_zero_gain_is_offset() {
        let spec = ModelSpec::new(AlgebraicVariant::Gray, false);
        let theta = AlgebraicParams::Gray {
            gain: DenseMatrix::scalar(0.0),
            offset: DenseMatrix::scalar(0.5),
            scale: 2.0,
        };
        for (a, b) in [(0.0, 1.0), (3.0, -7.0), (0.2, 10.0)] {
            assert_eq!(algebraic_term(&spec, &theta, a, b).unwrap(), 1.0);
        }
    }

    #[test]
    fn black_with_zero_weights_is_c2() {
        let spec = ModelSpec::new(AlgebraicVariant::Black, false);
        let theta = AlgebraicParams::Black {
            w1: DenseMatrix::zeros(8, 2),
            c1: DenseMatrix::zeros(1, 8),
            w2: DenseMatrix::zeros(1, 8),
            c2: DenseMatrix::scalar(-1.5),
        };
        assert_eq!(algebraic_term(&spec, &theta, 0.7, 3.0).unwrap(), -1.5);
    }

    #[test]
    fn variant_mismatch_is_config_error() {
        let spec = ModelSpec::new(AlgebraicVariant::Gray, false);
        let (_, theta) = white(1.0, 0.0);
        assert!(matches!(
            algebraic_term(&spec, &theta, 1.0, 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_model_step_is_zero() {
        let spec = ModelSpec::new(AlgebraicVariant::Gray, false);
        let model = Model {
            spec,
            params: ModelParams {
                transition: TransitionParams::Direct {
                    a: DenseMatrix::zeros(4, 4),
                },
                b: DenseMatrix::zeros(4, 1),
                e: DenseMatrix::zeros(4, 3),
                algebraic: AlgebraicParams::Gray {
                    gain: DenseMatrix::scalar(0.0),
                    offset: DenseMatrix::scalar(0.0),
                    scale: 1.0,
                },
            },
        };
        let (x, u) = model.ssm_step(&[0.0; 4], 0.0, 0.0, &[0.0; 3]).unwrap();
        assert_eq!(x, vec![0.0; 4]);
        assert_eq!(u, 0.0);
    }

    #[test]
    fn white_matches_plant_input() {
        let plant = PlantSystem::default_building();
        let model = Model::from_plant(&plant, false);
        for (a, b) in [(0.0, 3.0), (0.13, -7.5), (0.2, 10.0)] {
            assert_eq!(model.algebraic_term(a, b).unwrap(), plant.heat_input(a, b));
        }
    }

    #[test]
    fn init_is_deterministic_and_white_has_no_theta() {
        for variant in AlgebraicVariant::ALL {
            let spec = ModelSpec::new(variant, false);
            let a = init_params(&spec, &mut SeededRng::new(4)).unwrap();
            let b = init_params(&spec, &mut SeededRng::new(4)).unwrap();
            assert_eq!(a, b);
            Model { spec, params: a }.validate().unwrap();
        }
        let spec = ModelSpec::new(AlgebraicVariant::White, true);
        let p = init_params(&spec, &mut SeededRng::new(1)).unwrap();
        let names: Vec<_> = p.entries().iter().map(|(n, _)| *n).collect();
        assert_eq!(names, vec!["a_raw", "m_raw", "b", "e"]);
    }

    #[test]
    fn window_counts() {
        assert_eq!(WindowPlan::strided(2016, 128, 1).unwrap().len(), 1889);
        assert_eq!(WindowPlan::strided(10, 10, 1).unwrap().len(), 1);
        assert!(WindowPlan::strided(10, 11, 1).is_err());
        assert_eq!(WindowPlan::strided(10, 2, 4).unwrap().starts, vec![0, 4, 8]);
    }
}
