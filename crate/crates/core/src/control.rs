//! Stanley steering, PI speed control and a kinematic bicycle plant.
//!
//! Sign conventions match [`crate::track`]: `theta` is the lane tangent
//! heading minus the vehicle heading, `delta > 0` means the vehicle is right
//! of the centerline, and a positive steering command yaws the vehicle left.

use std::collections::VecDeque;
use std::f64::consts::FRAC_PI_6;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StanleyParams {
    /// Normalizer from steering angle (rad) to command.
    pub c1: f64,
    /// Damping against the previous steering angle, in [0, 1).
    pub c2: f64,
    /// Cross-track gain.
    pub c3: f64,
    pub lane_width: f64,
    /// Lower bound on speed inside the cross-track arctangent.
    pub v_floor: f64,
}

impl Default for StanleyParams {
    fn default() -> Self {
        Self {
            c1: 1.0 / FRAC_PI_6,
            c2: 0.5,
            c3: 2.5,
            lane_width: 4.0,
            v_floor: 1.0,
        }
    }
}

impl StanleyParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.c1 > 0.0
            && (0.0..1.0).contains(&self.c2)
            && self.c3 > 0.0
            && self.lane_width > 0.0
            && self.v_floor > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Stanley parameters {self:?}")))
        }
    }
}

/// Undamped steering angle. `lane_change` is -1, 0 or 1 and shifts the
/// target by one lane width.
pub fn stanley_raw(theta: f64, delta: f64, v: f64, lane_change: i8, params: &StanleyParams) -> f64 {
    let c = f64::from(lane_change.signum());
    theta + (params.c3 * (delta + c * params.lane_width) / v.max(params.v_floor)).atan()
}

/// One Stanley update. Returns the normalized steering command and the
/// damped steering angle to feed back as `prev_angle` next step.
pub fn stanley_step(
    theta: f64,
    delta: f64,
    v: f64,
    lane_change: i8,
    prev_angle: f64,
    params: &StanleyParams,
) -> (f64, f64) {
    let raw = stanley_raw(theta, delta, v, lane_change, params);
    let angle = raw - params.c2 * (raw - prev_angle);
    ((params.c1 * angle).clamp(-1.0, 1.0), angle)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PiParams {
    pub kp: f64,
    pub ki: f64,
    /// Integration interval (s).
    pub dtau: f64,
    /// Sum only the most recent `window` errors; unbounded when `None`.
    pub window: Option<usize>,
    /// Anti-windup bound on |ki * integral|; off when `None`.
    pub integral_limit: Option<f64>,
}

impl Default for PiParams {
    fn default() -> Self {
        Self {
            kp: 2.0,
            ki: 0.5,
            dtau: 0.05,
            window: None,
            integral_limit: None,
        }
    }
}

impl PiParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.kp >= 0.0
            && self.ki >= 0.0
            && self.dtau > 0.0
            && self.window != Some(0)
            && self.integral_limit.is_none_or(|l| l > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid PI parameters {self:?}")))
        }
    }
}

/// Running integral of speed error.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PiState {
    /// Current value of the error integral (sum of e * dtau).
    pub integral: f64,
    recent: VecDeque<f64>,
}

impl PiState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One PI update on the error `v - v_ref`. The returned command is
/// `tanh(u)`; the plant decelerates for positive commands.
pub fn pi_step(v: f64, v_ref: f64, state: &PiState, params: &PiParams) -> (f64, PiState) {
    let e = v - v_ref;
    let term = e * params.dtau;
    let mut next = state.clone();
    next.integral += term;
    if let Some(n) = params.window {
        next.recent.push_back(term);
        while next.recent.len() > n {
            next.integral -= next.recent.pop_front().expect("non-empty");
        }
    }
    if let (Some(limit), true) = (params.integral_limit, params.ki > 0.0) {
        let bound = limit / params.ki;
        next.integral = next.integral.clamp(-bound, bound);
    }
    let u = params.kp * e + params.ki * next.integral;
    (u.tanh(), next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlCommand {
    pub steer: f64,
    pub accel: f64,
}

impl ControlCommand {
    pub fn new(steer: f64, accel: f64) -> Self {
        Self {
            steer: steer.clamp(-1.0, 1.0),
            accel: accel.clamp(-1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    pub wheelbase: f64,
    pub max_steer: f64,
    pub max_accel: f64,
    /// Recorded for reference; enters only through the aerodynamic term.
    pub mass: f64,
    pub body_length: f64,
    /// Rolling resistance coefficient (deceleration = coeff * g).
    pub rolling_coeff: f64,
    /// Drag coefficient times frontal area (m^2).
    pub drag_area: f64,
    pub air_density: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            wheelbase: 2.7,
            max_steer: FRAC_PI_6,
            max_accel: 4.0,
            mass: 1150.0,
            body_length: 4.52,
            rolling_coeff: 0.015,
            drag_area: 0.66,
            air_density: 1.225,
        }
    }
}

impl PlantConfig {
    /// Pure kinematics, no resistance.
    pub fn frictionless() -> Self {
        Self {
            rolling_coeff: 0.0,
            drag_area: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.wheelbase > 0.0
            && self.max_steer > 0.0
            && self.max_steer < std::f64::consts::FRAC_PI_2
            && self.max_accel > 0.0
            && self.mass > 0.0
            && self.rolling_coeff >= 0.0
            && self.drag_area >= 0.0
            && self.air_density >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid plant parameters {self:?}")))
        }
    }

    /// Passive deceleration at speed `v` (zero when stopped).
    pub fn resistance(&self, v: f64) -> f64 {
        if v <= 0.0 {
            return 0.0;
        }
        self.rolling_coeff * GRAVITY + 0.5 * self.air_density * self.drag_area * v * v / self.mass
    }

    pub fn steer_angle(&self, cmd: &ControlCommand) -> f64 {
        self.max_steer * cmd.steer.clamp(-1.0, 1.0)
    }

    /// Lateral acceleration v^2 tan(steer) / L implied by a command.
    pub fn lateral_accel(&self, v: f64, cmd: &ControlCommand) -> f64 {
        v * v * self.steer_angle(cmd).tan() / self.wheelbase
    }
}

/// Advances the kinematic bicycle (rear-axle reference) by one RK4 step
/// with commands held constant. Speed never goes negative.
pub fn vehicle_step(state: &VehicleState, cmd: &ControlCommand, dt: f64, plant: &PlantConfig) -> Result<VehicleState> {
    if !(dt > 0.0 && dt <= 0.1) {
        return Err(Error::Config(format!("time step {dt} outside (0, 0.1]")));
    }
    let yaw_gain = plant.steer_angle(cmd).tan() / plant.wheelbase;
    let drive = -plant.max_accel * cmd.accel.clamp(-1.0, 1.0);
    let f = |s: [f64; 4]| -> [f64; 4] {
        let v = s[3].max(0.0);
        let mut a = drive - plant.resistance(v);
        if v <= 0.0 && a < 0.0 {
            a = 0.0;
        }
        [v * s[2].cos(), v * s[2].sin(), v * yaw_gain, a]
    };
    let s0 = [state.x, state.y, state.psi, state.v];
    let add = |s: [f64; 4], d: [f64; 4], h: f64| std::array::from_fn(|i| s[i] + h * d[i]);
    let k1 = f(s0);
    let k2 = f(add(s0, k1, 0.5 * dt));
    let k3 = f(add(s0, k2, 0.5 * dt));
    let k4 = f(add(s0, k3, dt));
    let s1: [f64; 4] = std::array::from_fn(|i| s0[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
    Ok(VehicleState {
        x: s1[0],
        y: s1[1],
        psi: s1[2],
        v: s1[3].max(0.0),
    })
}

/// Front-axle position of the vehicle.
pub fn front_axle(state: &VehicleState, plant: &PlantConfig) -> (f64, f64) {
    (
        state.x + plant.wheelbase * state.psi.cos(),
        state.y + plant.wheelbase * state.psi.sin(),
    )
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(std::f64::consts::TAU);
    if w > std::f64::consts::PI {
        w - std::f64::consts::TAU
    } else {
        w
    }
}
