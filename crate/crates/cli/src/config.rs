use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cnode::constraints::BoundSpec;
use cnode::models::{AlgebraicVariant, ModelSpec};
use cnode::numerics::DenseMatrix;
use cnode::plant::{PlantSystem, SignalSettings};
use cnode::training::{AdamWSettings, Scale, SweepConfig, HORIZONS};
use cnode::{Error, Result};

/// Run configuration document. Every key is optional; unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_id: String,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub scale: Scale,
    pub plant: PlantOverrides,
    pub dataset: DatasetSource,
    pub models: Vec<ModelEntry>,
    pub horizons: Vec<usize>,
    /// Overrides the scale preset when set.
    pub learning_rates: Option<Vec<f64>>,
    pub restarts: Option<usize>,
    pub epochs: Option<usize>,
    pub stride: usize,
    pub adamw: AdamWSettings,
    /// Defaults to the plant's physical bounds.
    pub bounds: Option<BoundSpec>,
    pub jobs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: "default".into(),
            out_dir: PathBuf::from("out"),
            seed: 0,
            scale: Scale::Desk,
            plant: PlantOverrides::default(),
            dataset: DatasetSource::Synthetic,
            models: ModelSpec::ode_family()
                .into_iter()
                .map(|s| ModelEntry {
                    variant: s.variant,
                    constrained: s.constrained,
                    hidden_units: None,
                })
                .collect(),
            horizons: HORIZONS.to_vec(),
            learning_rates: None,
            restarts: None,
            epochs: None,
            stride: 1,
            adamw: AdamWSettings::default(),
            bounds: None,
            jobs: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantOverrides {
    /// Row-major `4 x 4`.
    pub a: Option<Vec<Vec<f64>>>,
    /// Four entries.
    pub b: Option<Vec<f64>>,
    /// Row-major `4 x 3`.
    pub e: Option<Vec<Vec<f64>>>,
    pub heat_capacity: Option<f64>,
    pub offset: Option<f64>,
    pub signals: Option<SignalSettings>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    #[default]
    Synthetic,
    /// Signal CSV with columns `a,b,d1,d2,d3` covering four weeks.
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub variant: AlgebraicVariant,
    #[serde(default)]
    pub constrained: bool,
    #[serde(default)]
    pub hidden_units: Option<usize>,
}

impl ModelEntry {
    /// Accepts `gray`, `cgray`, `ODE_G`, `cODE_G` and the like.
    pub fn parse(token: &str) -> Result<Self> {
        let t = token.trim();
        let lower = t.to_ascii_lowercase();
        let from_label = |suffix: &str| match suffix {
            "b" => Some(AlgebraicVariant::Black),
            "g" => Some(AlgebraicVariant::Gray),
            "w" => Some(AlgebraicVariant::White),
            _ => None,
        };
        let parsed = if let Some(s) = lower.strip_prefix("code_") {
            from_label(s).map(|v| (v, true))
        } else if let Some(s) = lower.strip_prefix("ode_") {
            from_label(s).map(|v| (v, false))
        } else if let Ok(v) = AlgebraicVariant::parse(&lower) {
            Some((v, false))
        } else if let Some(rest) = lower.strip_prefix('c') {
            AlgebraicVariant::parse(rest).ok().map(|v| (v, true))
        } else {
            None
        };
        let (variant, constrained) =
            parsed.ok_or_else(|| Error::Config(format!("unknown model {t:?}")))?;
        Ok(ModelEntry {
            variant,
            constrained,
            hidden_units: None,
        })
    }

    pub fn spec(&self) -> ModelSpec {
        let mut spec = ModelSpec::new(self.variant, self.constrained);
        if let Some(h) = self.hidden_units {
            spec.hidden_units = h;
        }
        spec
    }
}

/// Command-line values that take precedence over the document.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub scale: Option<Scale>,
    pub out_dir: Option<PathBuf>,
    pub run_id: Option<String>,
    pub models: Option<Vec<ModelEntry>>,
    pub horizons: Option<Vec<usize>>,
    pub learning_rates: Option<Vec<f64>>,
    pub restarts: Option<usize>,
    pub epochs: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.jobs {
            self.jobs = Some(v);
        }
        if let Some(v) = o.scale {
            self.scale = v;
        }
        if let Some(v) = o.out_dir {
            self.out_dir = v;
        }
        if let Some(v) = o.run_id {
            self.run_id = v;
        }
        if let Some(v) = o.models {
            self.models = v;
        }
        if let Some(v) = o.horizons {
            self.horizons = v;
        }
        if let Some(v) = o.learning_rates {
            self.learning_rates = Some(v);
        }
        if let Some(v) = o.restarts {
            self.restarts = Some(v);
        }
        if let Some(v) = o.epochs {
            self.epochs = Some(v);
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_id)
    }

    pub fn plant(&self) -> Result<PlantSystem> {
        let mut plant = PlantSystem::default_building();
        let p = &self.plant;
        if let Some(a) = &p.a {
            plant.a = DenseMatrix::from_rows(a)?;
        }
        if let Some(b) = &p.b {
            plant.b = DenseMatrix::column(b);
        }
        if let Some(e) = &p.e {
            plant.e = DenseMatrix::from_rows(e)?;
        }
        if let Some(h) = p.heat_capacity {
            plant.heat_capacity = h;
        }
        if let Some(h) = p.offset {
            plant.offset = h;
        }
        if let Some(s) = &p.signals {
            plant.signals = s.clone();
        }
        plant.validate()?;
        Ok(plant)
    }

    pub fn bounds(&self, plant: &PlantSystem) -> Result<BoundSpec> {
        let b = self
            .bounds
            .clone()
            .unwrap_or_else(|| BoundSpec::default_for(plant));
        b.validate()?;
        Ok(b)
    }

    pub fn jobs(&self) -> usize {
        self.jobs.unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
    }

    pub fn sweep(&self, plant: &PlantSystem) -> Result<SweepConfig> {
        if self.models.is_empty() {
            return Err(Error::Config("no models selected".into()));
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(Error::Config(format!(
                "horizons must be positive, got {:?}",
                self.horizons
            )));
        }
        let learning_rates = self
            .learning_rates
            .clone()
            .unwrap_or_else(|| self.scale.learning_rates());
        if learning_rates.is_empty() || learning_rates.iter().any(|lr| !(*lr > 0.0 && *lr < 1.0)) {
            return Err(Error::Config(format!(
                "learning rates must lie in (0, 1), got {learning_rates:?}"
            )));
        }
        let restarts = self.restarts.unwrap_or_else(|| self.scale.restarts());
        let epochs = self.epochs.unwrap_or_else(|| self.scale.epochs());
        if restarts == 0 || epochs == 0 || self.stride == 0 {
            return Err(Error::Config(
                "restarts, epochs and stride must be positive".into(),
            ));
        }
        Ok(SweepConfig {
            specs: self.models.iter().map(ModelEntry::spec).collect(),
            horizons: self.horizons.clone(),
            learning_rates,
            restarts,
            epochs,
            seed: self.seed,
            adamw: self.adamw,
            stride: self.stride,
            bounds: self.bounds(plant)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_tokens() {
        let e = ModelEntry::parse("cgray").unwrap();
        assert_eq!((e.variant, e.constrained), (AlgebraicVariant::Gray, true));
        let e = ModelEntry::parse("ODE_W").unwrap();
        assert_eq!((e.variant, e.constrained), (AlgebraicVariant::White, false));
        let e = ModelEntry::parse("cODE_B").unwrap();
        assert_eq!((e.variant, e.constrained), (AlgebraicVariant::Black, true));
        let e = ModelEntry::parse("srnn").unwrap();
        assert_eq!((e.variant, e.constrained), (AlgebraicVariant::Srnn, false));
        assert!(ModelEntry::parse("purple").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"seeed": 3}"#).unwrap_err();
        assert!(err.to_string().contains("seeed"), "{err}");
        let err = serde_json::from_str::<RunConfig>(r#"{"plant": {"mass": 1}}"#).unwrap_err();
        assert!(err.to_string().contains("mass"), "{err}");
    }

    #[test]
    fn scale_determines_grid_unless_overridden() {
        let plant = PlantSystem::default_building();
        let mut cfg: RunConfig = serde_json::from_str(r#"{"scale": "paper"}"#).unwrap();
        let s = cfg.sweep(&plant).unwrap();
        assert_eq!((s.epochs, s.restarts), (15000, 30));
        cfg.epochs = Some(5);
        assert_eq!(cfg.sweep(&plant).unwrap().epochs, 5);
        let desk = RunConfig::default().sweep(&plant).unwrap();
        assert_eq!((desk.epochs, desk.restarts), (2000, 3));
        assert_eq!(desk.specs.len(), 6);
    }

    #[test]
    fn csv_source_round_trip() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"dataset": {"source": "csv", "path": "w.csv"}}"#).unwrap();
        assert_eq!(cfg.dataset, DatasetSource::Csv { path: "w.csv".into() });
    }
}
