use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::{
    front_axle, pi_step, stanley_step, vehicle_step, wrap_angle, ControlCommand, PiParams, PiState, PlantConfig,
    StanleyParams, VehicleState,
};
use crate::data::{CameraConfig, LeadDistance, RoadType, SceneSpec};
use crate::error::{Error, Result};
use crate::perception::{GroundTruth, Observation, Perceptor};
use crate::track::TrackGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartMode {
    /// Already at the reference speed.
    Flying,
    /// From rest.
    Standing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Completed,
    LaneDeparture,
    MaxSteps,
    /// The perceptor stopped finding the lane.
    LaneLost,
}

impl Termination {
    pub fn is_failure(self) -> bool {
        matches!(self, Self::LaneDeparture | Self::LaneLost)
    }
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Completed => "completed",
            Self::LaneDeparture => "lane_departure",
            Self::MaxSteps => "max_steps",
            Self::LaneLost => "lane_lost",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    /// Reference speed (m/s).
    pub v_ref: f64,
    pub dt: f64,
    pub max_steps: usize,
    pub start: StartMode,
    /// Arc length of the start point.
    pub start_s: f64,
    /// Initial lateral offset of the front axle, positive right.
    pub start_offset: f64,
    /// Front-axle offset beyond which the episode ends in a departure.
    pub departure_offset: f64,
    /// Reference speed while the lead car is classified close; off when `None`.
    pub close_speed_cap: Option<f64>,
    pub stanley: StanleyParams,
    pub pi: PiParams,
    pub plant: PlantConfig,
    /// Camera used to render frames for network perceptors.
    pub camera: CameraConfig,
    pub frame_width: usize,
    pub frame_height: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            v_ref: 20.0,
            dt: 0.05,
            max_steps: 20_000,
            start: StartMode::Flying,
            start_s: 0.0,
            start_offset: 0.0,
            departure_offset: 2.0,
            close_speed_cap: None,
            stanley: StanleyParams::default(),
            pi: PiParams::default(),
            plant: PlantConfig::default(),
            camera: CameraConfig::default(),
            frame_width: 48,
            frame_height: 64,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        self.stanley.validate()?;
        self.pi.validate()?;
        self.plant.validate()?;
        let ok = self.v_ref > 0.0
            && self.v_ref.is_finite()
            && self.dt > 0.0
            && self.dt <= 0.1
            && self.max_steps > 0
            && self.departure_offset > 0.0
            && self.start_offset.abs() < self.departure_offset
            && self.close_speed_cap.is_none_or(|c| c >= 0.0)
            && self.frame_width > 0
            && self.frame_height > 0;
        if !ok {
            return Err(Error::Config(format!("invalid episode configuration {self:?}")));
        }
        if (self.pi.dtau - self.dt).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "PI integration interval {} differs from the control step {}",
                self.pi.dtau, self.dt
            )));
        }
        Ok(())
    }
}

/// One control step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub s: f64,
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
    pub v_ref: f64,
    pub theta_true: f64,
    pub theta_hat: f64,
    pub delta_true: f64,
    pub delta_hat: f64,
    pub steer_cmd: f64,
    pub accel_cmd: f64,
    pub c1_true: RoadType,
    pub c1_hat: RoadType,
    pub c2_true: LeadDistance,
    pub c2_hat: LeadDistance,
    pub detected: bool,
    pub curvature: f64,
    /// Lateral acceleration implied by speed and steering (m/s^2).
    pub lat_accel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub label: String,
    pub track: String,
    pub dt: f64,
    pub records: Vec<StepRecord>,
    pub termination: Termination,
    /// Arc length covered, counting laps.
    pub distance: f64,
    pub model_forwards: usize,
}

impl EpisodeLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_records(path, &self.records)
    }
}

pub fn write_records(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| Error::csv(path, e))).collect()
}

/// Runs one closed-loop episode. The vehicle starts heading along the
/// tangent at `start_s`, offset by `start_offset`; lane keeping only (no
/// lane change).
pub fn run_episode(
    geom: &TrackGeometry,
    perceptor: &mut dyn Perceptor,
    cfg: &EpisodeConfig,
    label: &str,
) -> Result<EpisodeLog> {
    cfg.validate()?;
    let track = geom.track();
    let length = geom.length();
    if cfg.departure_offset >= 2.0 * track.lane_width {
        return Err(Error::Config(format!(
            "departure offset {} must be below the projection corridor {}",
            cfg.departure_offset,
            2.0 * track.lane_width
        )));
    }
    if cfg.start_s < 0.0 || cfg.start_s >= length {
        return Err(Error::Config(format!("start arc length {} outside [0, {length})", cfg.start_s)));
    }
    let frame = geom.frame_at(cfg.start_s);
    let (fx, fy) = geom.point_at(cfg.start_s, cfg.start_offset);
    let wb = cfg.plant.wheelbase;
    let mut state = VehicleState {
        x: fx - wb * frame.heading.cos(),
        y: fy - wb * frame.heading.sin(),
        psi: frame.heading,
        v: match cfg.start {
            StartMode::Flying => cfg.v_ref,
            StartMode::Standing => 0.0,
        },
    };

    let mut records = Vec::new();
    let mut pi = PiState::new();
    let mut prev_angle = 0.0;
    let mut hint = Some(cfg.start_s);
    let mut last_s = cfg.start_s;
    let mut distance = 0.0;
    let mut termination = Termination::MaxSteps;
    for step in 0..cfg.max_steps {
        let (ax, ay) = front_axle(&state, &cfg.plant);
        let proj = match geom.project(ax, ay, hint) {
            Ok(p) => p,
            Err(Error::OutOfCorridor { .. }) => {
                termination = Termination::LaneDeparture;
                break;
            }
            Err(e) => return Err(e),
        };
        if step > 0 {
            let mut ds = proj.s - last_s;
            if track.closed {
                ds -= length * (ds / length).round();
            }
            distance += ds;
        }
        let wrapped = track.closed && step > 0 && proj.s < last_s - length / 2.0;
        last_s = proj.s;
        hint = Some(proj.s);
        if (wrapped && distance >= 0.99 * length) || (!track.closed && proj.s >= length - 1.0) {
            termination = Termination::Completed;
            break;
        }
        if proj.delta.abs() > cfg.departure_offset {
            termination = Termination::LaneDeparture;
            break;
        }

        let theta = wrap_angle(proj.tangent_heading - state.psi);
        let truth = GroundTruth::new(theta, proj.delta, 0.0);
        let mut scene = SceneSpec::new(proj.delta, theta, proj.curvature, cfg.frame_width, cfg.frame_height);
        scene.lane_width = track.lane_width;
        scene.camera = cfg.camera;
        let est = match perceptor.perceive(&Observation { truth, scene: &scene }) {
            Ok(e) => e,
            Err(Error::LaneLost { .. }) => {
                termination = Termination::LaneLost;
                break;
            }
            Err(e) => return Err(e),
        };

        let v_ref = match (cfg.close_speed_cap, est.c2) {
            (Some(cap), LeadDistance::Close) => cfg.v_ref.min(cap),
            _ => cfg.v_ref,
        };
        let (steer, angle) = stanley_step(est.theta_hat, est.delta_hat, state.v, 0, prev_angle, &cfg.stanley);
        let (accel, next_pi) = pi_step(state.v, v_ref, &pi, &cfg.pi);
        prev_angle = angle;
        pi = next_pi;
        let cmd = ControlCommand::new(steer, accel);
        records.push(StepRecord {
            step,
            t: step as f64 * cfg.dt,
            s: proj.s,
            x: state.x,
            y: state.y,
            psi: state.psi,
            v: state.v,
            v_ref,
            theta_true: theta,
            theta_hat: est.theta_hat,
            delta_true: proj.delta,
            delta_hat: est.delta_hat,
            steer_cmd: cmd.steer,
            accel_cmd: cmd.accel,
            c1_true: truth.c1,
            c1_hat: est.c1,
            c2_true: truth.c2,
            c2_hat: est.c2,
            detected: est.detected,
            curvature: proj.curvature,
            lat_accel: cfg.plant.lateral_accel(state.v, &cmd),
        });
        state = vehicle_step(&state, &cmd, cfg.dt, &cfg.plant)?;
    }
    Ok(EpisodeLog {
        label: label.to_string(),
        track: track.name.clone(),
        dt: cfg.dt,
        records,
        termination,
        distance,
        model_forwards: perceptor.forward_count(),
    })
}
