use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use mtuc_core::data::{DatasetConfig, Split};
use mtuc_core::model::{ModelConfig, TrainConfig};
use mtuc_core::perception::{NoiseSpec, PathConfig};
use mtuc_core::sim::EpisodeConfig;
use mtuc_core::track::{make_preset_track, CurvatureTrack, Preset, TrackGeometry, DEFAULT_SAMPLE_SPACING};
use serde::{Deserialize, Serialize};

/// Every parameter of a run. Missing sections and fields take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed, copied into every seeded component.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub simulate: SimulateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            simulate: SimulateSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Run in order; each stage continues from the previous parameters.
    pub stages: Vec<TrainConfig>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            stages: vec![TrainConfig::pose_only(), TrainConfig::joint()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub split: Split,
    /// Probability above which a pixel counts as lane line.
    pub threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: Split::Test,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptorKind {
    GroundTruth,
    Network,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    /// Preset name (e.g. `track7_like`, `circle(0.01)`) or a track TOML file.
    pub track: String,
    pub v_ref_kmh: f64,
    /// File stem for outputs; defaults to the track name and speed.
    #[serde(default)]
    pub label: Option<String>,
}

impl EpisodeSpec {
    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| {
            let stem: String = self
                .track
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' })
                .collect();
            format!("{}_{}kmh", stem.trim_matches('-'), self.v_ref_kmh)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub perceptor: PerceptorKind,
    /// Ground-truth perceptor noise; its seed is offset by the episode index.
    pub noise: NoiseSpec,
    pub path: PathConfig,
    /// Shared episode settings; `v_ref` is replaced per episode.
    pub episode: EpisodeConfig,
    pub episodes: Vec<EpisodeSpec>,
    pub sample_spacing: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            perceptor: PerceptorKind::GroundTruth,
            noise: NoiseSpec {
                theta_sigma: 0.01,
                delta_sigma: 0.05,
                ..NoiseSpec::default()
            },
            path: PathConfig::default(),
            episode: EpisodeConfig::default(),
            episodes: vec![
                EpisodeSpec {
                    track: "track7_like".into(),
                    v_ref_kmh: 76.0,
                    label: None,
                },
                EpisodeSpec {
                    track: "track8_like".into(),
                    v_ref_kmh: 50.0,
                    label: None,
                },
            ],
            sample_spacing: DEFAULT_SAMPLE_SPACING,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Applies a seed override and copies the master seed into every
    /// seeded component.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.dataset.seed = self.seed;
        self.simulate.noise.seed = self.seed;
        for st in &mut self.train.stages {
            st.seed = self.seed;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        for st in &self.train.stages {
            st.validate()?;
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            bail!("eval threshold {} outside [0, 1]", self.eval.threshold);
        }
        self.simulate.noise.validate()?;
        let mut labels = Vec::new();
        for e in &self.simulate.episodes {
            if !(e.v_ref_kmh > 0.0 && e.v_ref_kmh.is_finite()) {
                bail!("episode on {} has speed {} km/h", e.track, e.v_ref_kmh);
            }
            let label = e.label();
            if labels.contains(&label) {
                bail!("duplicate episode label {label}");
            }
            labels.push(label);
        }
        if !(self.simulate.sample_spacing > 0.0) {
            bail!("sample spacing must be positive");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing run config")
    }
}

pub fn with_speed(base: &EpisodeConfig, spec: &EpisodeSpec) -> EpisodeConfig {
    EpisodeConfig {
        v_ref: spec.v_ref_kmh / 3.6,
        ..base.clone()
    }
}

/// A preset name or a track file.
pub fn resolve_track(spec: &str, base: &Path) -> Result<CurvatureTrack> {
    if let Ok(p) = Preset::from_str(spec) {
        return Ok(make_preset_track(p)?);
    }
    let path = PathBuf::from(spec);
    let path = if path.is_relative() { base.join(path) } else { path };
    if !path.exists() {
        bail!("{spec:?} is neither a track preset nor a track file");
    }
    Ok(CurvatureTrack::load(&path)?)
}

pub fn geometry(spec: &str, base: &Path, spacing: f64) -> Result<TrackGeometry> {
    Ok(TrackGeometry::new(resolve_track(spec, base)?, spacing)?)
}
