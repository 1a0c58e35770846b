//! Class-balanced synthetic datasets and their on-disk manifest.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::labels::{Class, LeadDistance, RoadType, CLOSE_AREA_FRACTION, STRAIGHT_THETA_LIMIT};
use super::pnm::{read_pnm, write_pnm};
use super::render::{box_area_fraction, distance_for_area_fraction, render_frame, CameraConfig, LabeledFrame, LeadCar, SceneSpec};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FRAME_FORMAT: &str = "ppm-p6-rgb8/pgm-p5-mask8";

/// Realized class fractions must land within this of the targets.
pub const BALANCE_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n: usize,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub lane_width: f64,
    /// Target fractions for (C1L, C1S, C1R).
    pub c1_targets: [f64; 3],
    /// Target fractions for (C2F, C2N, C2C).
    pub c2_targets: [f64; 3],
    /// Train:test ratio.
    pub split: [usize; 2],
    /// Headings are drawn up to this magnitude (rad).
    pub theta_max: f64,
    /// Lateral offsets are drawn from [-offset_max, offset_max] (m).
    pub offset_max: f64,
    /// Curvatures are drawn from [-curvature_max, curvature_max] (1/m).
    pub curvature_max: f64,
    /// When false no lead car is ever placed.
    pub lead_cars: bool,
    pub lead_lateral_max: f64,
    pub lead_min_distance: f64,
    pub lead_max_distance: f64,
    pub camera: CameraConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n: 1200,
            seed: 0,
            width: 48,
            height: 64,
            lane_width: 4.0,
            c1_targets: [1.0 / 3.0; 3],
            c2_targets: [1.0 / 3.0; 3],
            split: [11, 1],
            theta_max: 0.1,
            offset_max: 1.0,
            curvature_max: 0.03,
            lead_cars: true,
            lead_lateral_max: 0.5,
            lead_min_distance: 3.0,
            lead_max_distance: 40.0,
            camera: CameraConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub image: String,
    pub mask: String,
    pub split: Split,
    pub theta: f64,
    pub c1: RoadType,
    pub c2: LeadDistance,
    pub box_area_fraction: f64,
    pub scene: SceneSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub frame_format: String,
    pub width: usize,
    pub height: usize,
    /// Heading targets are divided by this before training.
    pub theta_norm: f64,
    pub config: DatasetConfig,
    pub frames: Vec<FrameRecord>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub frames: Vec<LabeledFrame>,
}

/// Per-class counts by largest remainder, so they sum to `n` exactly.
fn class_counts(n: usize, targets: &[f64; 3]) -> [usize; 3] {
    let raw: Vec<f64> = targets.iter().map(|t| t * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = raw[i].floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let mut missing = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        counts[i] += 1;
        missing -= 1;
    }
    counts
}

fn check_targets(name: &str, n: usize, targets: &[f64; 3]) -> Result<[usize; 3]> {
    if targets.iter().any(|t| !(*t >= 0.0)) || (targets.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::Dataset(format!("{name} targets {targets:?} must be nonnegative and sum to 1")));
    }
    let counts = class_counts(n, targets);
    for i in 0..3 {
        let realized = counts[i] as f64 / n as f64;
        if (realized - targets[i]).abs() > BALANCE_TOLERANCE {
            return Err(Error::Dataset(format!(
                "{name} target {} unreachable with n = {n} (best is {realized:.3})",
                targets[i]
            )));
        }
    }
    Ok(counts)
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Dataset("n must be positive".into()));
        }
        if self.split[0] + self.split[1] == 0 {
            return Err(Error::Dataset("split ratio must not be 0:0".into()));
        }
        if !(self.theta_max > STRAIGHT_THETA_LIMIT + 0.001) {
            return Err(Error::Dataset("theta_max too small to reach turning classes".into()));
        }
        if !(self.offset_max >= 0.0 && self.curvature_max >= 0.0 && self.lead_lateral_max >= 0.0) {
            return Err(Error::Dataset("sampling ranges must be nonnegative".into()));
        }
        check_targets("C1", self.n, &self.c1_targets)?;
        check_targets("C2", self.n, &self.c2_targets)?;
        if !self.lead_cars && (self.c2_targets[1] > 0.0 || self.c2_targets[2] > 0.0) {
            return Err(Error::Dataset(
                "C2 near/close targets are unreachable without lead cars".into(),
            ));
        }
        let probe = self.base_scene();
        probe.validate()?;
        let d_close = distance_for_area_fraction(&probe, CLOSE_AREA_FRACTION);
        if self.c2_targets[2] > 0.0 && d_close <= self.lead_min_distance {
            return Err(Error::Dataset(format!(
                "close lead cars need distance < {d_close:.2} m but the minimum is {}",
                self.lead_min_distance
            )));
        }
        if self.c2_targets[1] > 0.0 && d_close >= self.lead_max_distance {
            return Err(Error::Dataset("near lead cars need a larger maximum distance".into()));
        }
        Ok(())
    }

    fn base_scene(&self) -> SceneSpec {
        SceneSpec {
            lane_width: self.lane_width,
            camera: self.camera,
            ..SceneSpec::new(0.0, 0.0, 0.0, self.width, self.height)
        }
    }

    pub fn test_count(&self) -> usize {
        let total = (self.split[0] + self.split[1]) as f64;
        (self.n as f64 * self.split[1] as f64 / total).round() as usize
    }
}

fn sample_theta(rng: &mut ChaCha8Rng, class: RoadType, theta_max: f64) -> f64 {
    // keep a small gap around the class boundaries
    let edge = STRAIGHT_THETA_LIMIT;
    match class {
        RoadType::Left => -rng.random_range(edge + 0.0005..=theta_max),
        RoadType::Straight => rng.random_range(-(edge - 0.0005)..=edge - 0.0005),
        RoadType::Right => rng.random_range(edge + 0.0005..=theta_max),
    }
}

fn sample_scene(
    cfg: &DatasetConfig,
    d_close: f64,
    index: usize,
    c1: RoadType,
    c2: LeadDistance,
) -> Result<(SceneSpec, LabeledFrame)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    for _ in 0..1000 {
        let lead_car = match c2 {
            LeadDistance::Far => None,
            LeadDistance::Near => Some(rng.random_range(d_close * 1.05..=cfg.lead_max_distance)),
            LeadDistance::Close => Some(rng.random_range(cfg.lead_min_distance..=d_close * 0.95)),
        }
        .map(|distance| LeadCar {
            distance,
            lateral: rng.random_range(-cfg.lead_lateral_max..=cfg.lead_lateral_max),
        });
        let spec = SceneSpec {
            offset: rng.random_range(-cfg.offset_max..=cfg.offset_max),
            heading: sample_theta(&mut rng, c1, cfg.theta_max),
            curvature: rng.random_range(-cfg.curvature_max..=cfg.curvature_max),
            lead_car,
            ..cfg.base_scene()
        };
        if super::labels::label_lead_distance(box_area_fraction(&spec)) != c2 {
            continue;
        }
        let frame = render_frame(&spec)?;
        if frame.c1 == c1 && frame.c2 == c2 && frame.mask.data().iter().any(|&m| m > 0.0) {
            return Ok((spec, frame));
        }
    }
    Err(Error::Dataset(format!("could not realize {c1}/{c2} for frame {index}")))
}

fn file_names(index: usize) -> (String, String) {
    (format!("frames/{index:06}.ppm"), format!("frames/{index:06}_mask.pgm"))
}

impl Dataset {
    /// Renders `cfg.n` frames. Class counts are exact (largest-remainder
    /// rounding of the targets); classes, test membership and scene
    /// parameters all derive from `cfg.seed`.
    pub fn generate(cfg: &DatasetConfig) -> Result<Self> {
        cfg.validate()?;
        let c1_counts = check_targets("C1", cfg.n, &cfg.c1_targets)?;
        let c2_counts = check_targets("C2", cfg.n, &cfg.c2_targets)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let expand = |counts: [usize; 3]| -> Vec<usize> {
            (0..3).flat_map(|i| std::iter::repeat_n(i, counts[i])).collect()
        };
        let mut c1s = expand(c1_counts);
        let mut c2s = expand(c2_counts);
        c1s.shuffle(&mut rng);
        c2s.shuffle(&mut rng);
        let mut order: Vec<usize> = (0..cfg.n).collect();
        order.shuffle(&mut rng);
        let mut split = vec![Split::Train; cfg.n];
        for &i in &order[..cfg.test_count()] {
            split[i] = Split::Test;
        }

        let d_close = distance_for_area_fraction(&cfg.base_scene(), CLOSE_AREA_FRACTION);
        let rendered: Vec<(SceneSpec, LabeledFrame)> = (0..cfg.n)
            .into_par_iter()
            .map(|i| {
                let c1 = RoadType::from_index(c1s[i]).expect("index < 3");
                let c2 = LeadDistance::from_index(c2s[i]).expect("index < 3");
                sample_scene(cfg, d_close, i, c1, c2)
            })
            .collect::<Result<_>>()?;

        let max_theta = rendered.iter().fold(0.0f64, |m, (s, _)| m.max(s.heading.abs()));
        let theta_norm = if max_theta > 1e-9 { max_theta } else { 1.0 };
        let mut records = Vec::with_capacity(cfg.n);
        let mut frames = Vec::with_capacity(cfg.n);
        for (i, (scene, frame)) in rendered.into_iter().enumerate() {
            let (image, mask) = file_names(i);
            records.push(FrameRecord {
                index: i,
                image,
                mask,
                split: split[i],
                theta: frame.theta,
                c1: frame.c1,
                c2: frame.c2,
                box_area_fraction: frame.box_area_fraction,
                scene,
            });
            frames.push(frame);
        }
        Ok(Self {
            manifest: Manifest {
                version: MANIFEST_VERSION,
                frame_format: FRAME_FORMAT.to_string(),
                width: cfg.width,
                height: cfg.height,
                theta_norm,
                config: cfg.clone(),
                frames: records,
            },
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .frames
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.index)
            .collect()
    }

    /// Writes `manifest.json` and the frame images under `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let frames_dir = dir.join("frames");
        std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
        self.manifest
            .frames
            .par_iter()
            .zip(self.frames.par_iter())
            .try_for_each(|(rec, frame)| -> Result<()> {
                write_pnm(&dir.join(&rec.image), &frame.image)?;
                write_pnm(&dir.join(&rec.mask), &frame.mask)
            })?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Loads a dataset written by [`Dataset::write`] and checks its labels.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "{}: manifest version {} is not supported",
                path.display(),
                manifest.version
            )));
        }
        let frames = manifest
            .frames
            .par_iter()
            .map(|rec| -> Result<LabeledFrame> {
                let image = read_pnm(&dir.join(&rec.image))?;
                let mask = read_pnm(&dir.join(&rec.mask))?;
                if image.shape() != [3, manifest.height, manifest.width] || mask.shape() != [1, manifest.height, manifest.width] {
                    return Err(Error::Dataset(format!("frame {} has the wrong size", rec.index)));
                }
                if super::labels::label_road_type(rec.theta) != rec.c1
                    || super::labels::label_lead_distance(rec.box_area_fraction) != rec.c2
                {
                    return Err(Error::Dataset(format!("frame {} labels disagree with its values", rec.index)));
                }
                Ok(LabeledFrame {
                    image,
                    mask,
                    theta: rec.theta,
                    c1: rec.c1,
                    c2: rec.c2,
                    box_area_fraction: rec.box_area_fraction,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { manifest, frames })
    }
}
