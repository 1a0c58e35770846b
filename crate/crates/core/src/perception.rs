//! Per-frame estimates of heading, lateral offset and the two road classes,
//! either from ground truth plus noise or from a trained network.

use std::collections::VecDeque;

use mtuc_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{argmax3, label_lead_distance, label_road_type, render_frame, Class, LeadDistance, RoadType, SceneSpec};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerceptionOutput {
    pub theta_hat: f64,
    pub delta_hat: f64,
    pub c1: RoadType,
    pub c2: LeadDistance,
    /// Frames between the observation and this output.
    pub latency_frames: usize,
    /// False when the lateral offset is a held value after a missed detection.
    pub detected: bool,
}

/// True quantities at the current step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub theta: f64,
    pub delta: f64,
    pub c1: RoadType,
    pub c2: LeadDistance,
}

impl GroundTruth {
    pub fn new(theta: f64, delta: f64, box_area_fraction: f64) -> Self {
        Self {
            theta,
            delta,
            c1: label_road_type(theta),
            c2: label_lead_distance(box_area_fraction),
        }
    }
}

/// What a perceptor may look at: the truth and the scene it would film.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub truth: GroundTruth,
    pub scene: &'a SceneSpec,
}

pub trait Perceptor: Send {
    fn perceive(&mut self, obs: &Observation) -> Result<PerceptionOutput>;

    /// Model forward passes so far (zero for perceptors without a model).
    fn forward_count(&self) -> usize {
        0
    }

    /// Whether frames must be rendered for this perceptor.
    fn needs_frames(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub theta_sigma: f64,
    pub delta_sigma: f64,
    pub class_flip_prob: f64,
    pub latency_frames: usize,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            theta_sigma: 0.0,
            delta_sigma: 0.0,
            class_flip_prob: 0.0,
            latency_frames: 0,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.theta_sigma >= 0.0
            && self.delta_sigma >= 0.0
            && self.theta_sigma.is_finite()
            && self.delta_sigma.is_finite()
            && (0.0..1.0).contains(&self.class_flip_prob);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid noise spec {self:?}")))
        }
    }
}

/// Ground truth with gaussian noise, random class flips and a fixed delay.
#[derive(Debug, Clone)]
pub struct GroundTruthPerceptor {
    noise: NoiseSpec,
    rng: ChaCha8Rng,
    theta_dist: Normal<f64>,
    delta_dist: Normal<f64>,
    queue: VecDeque<PerceptionOutput>,
}

impl GroundTruthPerceptor {
    pub fn new(noise: NoiseSpec) -> Result<Self> {
        noise.validate()?;
        let normal = |s: f64| Normal::new(0.0, s).map_err(|e| Error::Config(e.to_string()));
        Ok(Self {
            noise,
            rng: ChaCha8Rng::seed_from_u64(noise.seed),
            theta_dist: normal(noise.theta_sigma)?,
            delta_dist: normal(noise.delta_sigma)?,
            queue: VecDeque::with_capacity(noise.latency_frames + 1),
        })
    }

    fn flip<C: Class>(&mut self, c: C) -> C {
        let (u, pick) = (self.rng.random::<f64>(), self.rng.random_range(1..3));
        if u < self.noise.class_flip_prob {
            C::from_index((c.index() + pick) % 3).expect("index below 3")
        } else {
            c
        }
    }

    /// The undelayed noisy estimate; draws a fixed number of variates.
    fn noisy(&mut self, t: &GroundTruth) -> PerceptionOutput {
        let dt = self.theta_dist.sample(&mut self.rng);
        let dd = self.delta_dist.sample(&mut self.rng);
        let c1 = self.flip(t.c1);
        let c2 = self.flip(t.c2);
        PerceptionOutput {
            theta_hat: if self.noise.theta_sigma > 0.0 { t.theta + dt } else { t.theta },
            delta_hat: if self.noise.delta_sigma > 0.0 { t.delta + dd } else { t.delta },
            c1,
            c2,
            latency_frames: self.noise.latency_frames,
            detected: true,
        }
    }
}

impl Perceptor for GroundTruthPerceptor {
    /// Until `latency_frames` outputs have been produced, the first
    /// estimate is repeated.
    fn perceive(&mut self, obs: &Observation) -> Result<PerceptionOutput> {
        let out = self.noisy(&obs.truth);
        if self.queue.is_empty() {
            for _ in 0..self.noise.latency_frames {
                self.queue.push_back(out);
            }
        }
        self.queue.push_back(out);
        Ok(self.queue.pop_front().expect("queue holds latency + 1 entries"))
    }
}

/// Settings of the mask-to-offset step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    pub threshold: f64,
    /// Lookahead rows as fractions of the image height, [top, bottom).
    pub band: [f64; 2],
    pub lane_width: f64,
    pub min_rows: usize,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            band: [0.4, 0.6],
            lane_width: crate::track::DEFAULT_LANE_WIDTH,
            min_rows: 3,
        }
    }
}

/// Centers, in continuous column coordinates, of runs of above-threshold
/// pixels in one row.
fn clusters(row: &[f64], threshold: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &p) in row.iter().chain(std::iter::once(&f64::NEG_INFINITY)).enumerate() {
        match (p >= threshold, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s + i) as f64 / 2.0);
                start = None;
            }
            _ => {}
        }
    }
    out
}

/// Lateral offset (positive right of center) from a lane-line probability
/// mask [1, H, W] or [H, W]. In each band row the line clusters on either
/// side of the image center give the lane center and its pixel width; the
/// result is the median of the per-row offsets, or `None` when fewer than
/// `min_rows` rows had both lines.
pub fn path_predict(mask: &Tensor, cfg: &PathConfig) -> Result<Option<f64>> {
    let (h, w) = match *mask.shape() {
        [1, h, w] | [h, w] => (h, w),
        _ => return Err(Error::Config(format!("mask must be [1, H, W], got {:?}", mask.shape()))),
    };
    if mask.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Config("mask values must lie in [0, 1]".into()));
    }
    let top = (cfg.band[0] * h as f64).floor() as usize;
    let bottom = ((cfg.band[1] * h as f64).ceil() as usize).min(h);
    let center = w as f64 / 2.0;
    let mut offsets = Vec::new();
    for row in top..bottom {
        let cs = clusters(&mask.data()[row * w..][..w], cfg.threshold);
        let Some(pair) = cs.windows(2).find(|p| p[0] < center && p[1] >= center) else {
            continue;
        };
        let (left, right) = (pair[0], pair[1]);
        let lane_center = (left + right) / 2.0;
        offsets.push((center - lane_center) * cfg.lane_width / (right - left));
    }
    if offsets.len() < cfg.min_rows.max(1) {
        return Ok(None);
    }
    offsets.sort_by(f64::total_cmp);
    let n = offsets.len();
    Ok(Some(if n % 2 == 1 {
        offsets[n / 2]
    } else {
        (offsets[n / 2 - 1] + offsets[n / 2]) / 2.0
    }))
}

/// Everything one forward pass yields for a frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkEstimate {
    pub theta_hat: f64,
    /// `None` when path prediction found no lane.
    pub delta_hat: Option<f64>,
    pub c1: RoadType,
    pub c2: LeadDistance,
}

/// Single evaluation-mode forward of `image` [3, H, W].
pub fn perceive_nn(model: &Model, image: &Tensor, path: &PathConfig) -> Result<NetworkEstimate> {
    Ok(perceive_nn_with_mask(model, image, path)?.0)
}

/// As [`perceive_nn`], also returning the lane-line probabilities [1, H, W].
pub fn perceive_nn_with_mask(model: &Model, image: &Tensor, path: &PathConfig) -> Result<(NetworkEstimate, Tensor)> {
    let [c, h, w] = model.config.input_shape;
    if image.shape() != [c, h, w] {
        return Err(Error::Config(format!(
            "frame {:?} does not match model input [{c}, {h}, {w}]",
            image.shape()
        )));
    }
    let mut g = Graph::no_grad(0);
    let x = g.input(image.reshape(&[1, c, h, w])?);
    let out = model.forward(&mut g, x, false)?;
    let seg = g.sigmoid(out.seg_logits)?;
    let prob = g.value(seg).reshape(&[1, h, w])?;
    let est = NetworkEstimate {
        theta_hat: g.value(out.heading).item() * model.theta_norm,
        delta_hat: path_predict(&prob, path)?,
        c1: RoadType::from_index(argmax3(g.value(out.c1_probs).data())).expect("three classes"),
        c2: LeadDistance::from_index(argmax3(g.value(out.c2_probs).data())).expect("three classes"),
    };
    Ok((est, prob))
}

/// Consecutive missed detections tolerated before the lane counts as lost.
pub const MAX_FALLBACK_FRAMES: usize = 10;

/// Renders the observed scene and runs the network on it.
#[derive(Debug, Clone)]
pub struct NetworkPerceptor {
    model: Model,
    path: PathConfig,
    last_delta: f64,
    misses: usize,
    forwards: usize,
}

impl NetworkPerceptor {
    pub fn new(model: Model, path: PathConfig) -> Self {
        Self {
            model,
            path,
            last_delta: 0.0,
            misses: 0,
            forwards: 0,
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }
}

impl Perceptor for NetworkPerceptor {
    fn perceive(&mut self, obs: &Observation) -> Result<PerceptionOutput> {
        let frame = render_frame(obs.scene)?;
        self.forwards += 1;
        let est = perceive_nn(&self.model, &frame.image, &self.path)?;
        let detected = est.delta_hat.is_some();
        match est.delta_hat {
            Some(d) => {
                self.last_delta = d;
                self.misses = 0;
            }
            None => {
                self.misses += 1;
                if self.misses > MAX_FALLBACK_FRAMES {
                    return Err(Error::LaneLost { frames: self.misses });
                }
            }
        }
        Ok(PerceptionOutput {
            theta_hat: est.theta_hat,
            delta_hat: self.last_delta,
            c1: est.c1,
            c2: est.c2,
            latency_frames: 0,
            detected,
        })
    }

    fn forward_count(&self) -> usize {
        self.forwards
    }

    fn needs_frames(&self) -> bool {
        true
    }
}
