use std::f64::consts::{FRAC_PI_6, TAU};

use mtuc_core::control::{
    pi_step, stanley_raw, stanley_step, vehicle_step, ControlCommand, PiParams, PiState, PlantConfig, StanleyParams,
    VehicleState,
};
use proptest::prelude::*;

#[test]
fn stanley_equilibrium_and_worked_example() {
    let p = StanleyParams::default();
    assert_eq!(stanley_step(0.0, 0.0, 10.0, 0, 0.0, &p), (0.0, 0.0));
    let raw = (2.5f64 * 1.0 / 10.0).atan();
    assert!((raw - 0.244979).abs() < 1e-6);
    let (cmd, s) = stanley_step(0.0, 1.0, 10.0, 0, 0.0, &p);
    assert!((s - 0.122489).abs() < 1e-6);
    assert!((s - raw / 2.0).abs() < 1e-15);
    assert!((cmd - s / FRAC_PI_6).abs() < 1e-15);
}

#[test]
fn lane_change_equals_one_lane_offset() {
    let p = StanleyParams::default();
    assert_eq!(stanley_raw(0.02, 0.0, 7.0, 1, &p), stanley_raw(0.02, 4.0, 7.0, 0, &p));
    assert_eq!(stanley_step(0.0, 0.0, 7.0, 1, 0.1, &p), stanley_step(0.0, 4.0, 7.0, 0, 0.1, &p));
}

#[test]
fn stanley_speed_floor() {
    let p = StanleyParams::default();
    assert_eq!(stanley_raw(0.0, 1.0, 0.0, 0, &p), stanley_raw(0.0, 1.0, 1.0, 0, &p));
}

#[test]
fn pi_worked_example() {
    let p = PiParams::default();
    let (cmd, st) = pi_step(9.0, 10.0, &PiState::new(), &p);
    assert!((st.integral + 0.05).abs() < 1e-15);
    assert!((cmd - (-2.025f64).tanh()).abs() < 1e-15);
    // the commonly quoted -0.9664 is off in the fourth digit; tanh(-2.025) = -0.965752
    assert!((cmd + 0.965752).abs() < 1e-6);
    assert!((cmd + 0.9664).abs() < 1e-3);
    let next = vehicle_step(
        &VehicleState { x: 0.0, y: 0.0, psi: 0.0, v: 9.0 },
        &ControlCommand::new(0.0, cmd),
        0.05,
        &PlantConfig::frictionless(),
    )
    .unwrap();
    assert!((next.v - (9.0 - cmd * 4.0 * 0.05)).abs() < 1e-12);
    assert_eq!(pi_step(10.0, 10.0, &PiState::new(), &p).0, 0.0);
}

#[test]
fn pi_window_and_antiwindup() {
    let p = PiParams { window: Some(3), ..Default::default() };
    let mut st = PiState::new();
    for e in [1.0, 2.0, 3.0, 4.0] {
        st = pi_step(10.0 + e, 10.0, &st, &p).1;
    }
    assert!((st.integral - (2.0 + 3.0 + 4.0) * 0.05).abs() < 1e-12);

    let p = PiParams { integral_limit: Some(1.0), ..Default::default() };
    let mut st = PiState::new();
    for _ in 0..1000 {
        st = pi_step(0.0, 30.0, &st, &p).1;
    }
    assert!((0.5 * st.integral + 1.0).abs() < 1e-12);
}

#[test]
fn straight_motion_with_zero_commands() {
    let s0 = VehicleState { x: 1.0, y: 2.0, psi: 0.7, v: 12.5 };
    let s1 = vehicle_step(&s0, &ControlCommand::default(), 0.05, &PlantConfig::frictionless()).unwrap();
    assert_eq!(s1.psi, s0.psi);
    assert_eq!(s1.v, s0.v);
    let dist = (s1.x - s0.x).hypot(s1.y - s0.y);
    assert!((dist - 12.5 * 0.05).abs() < 1e-14);
}

#[test]
fn constant_steer_traces_a_circle() {
    let plant = PlantConfig::frictionless();
    let cmd = ControlCommand::new(0.4, 0.0);
    let radius = plant.wheelbase / plant.steer_angle(&cmd).tan();
    let v = 5.0;
    let dt = 0.01;
    let period = TAU * radius / v;
    let steps = (period / dt).floor() as usize;
    let mut s = VehicleState { x: 0.0, y: 0.0, psi: 0.0, v };
    for _ in 0..steps {
        s = vehicle_step(&s, &cmd, dt, &plant).unwrap();
    }
    let rest = period - steps as f64 * dt;
    if rest > 0.0 {
        s = vehicle_step(&s, &cmd, rest, &plant).unwrap();
    }
    assert!(s.x.hypot(s.y) < 1e-4, "gap {}", s.x.hypot(s.y));
    // centre of the circle sits at (0, R)
    assert!((s.x.hypot(s.y - radius) - radius).abs() < 1e-4);
}

#[test]
fn stopped_vehicle_stays_put() {
    let s0 = VehicleState { x: 3.0, y: -1.0, psi: 0.2, v: 0.0 };
    for plant in [PlantConfig::default(), PlantConfig::frictionless()] {
        let s1 = vehicle_step(&s0, &ControlCommand::new(1.0, 0.0), 0.1, &plant).unwrap();
        assert_eq!(s1, s0);
        // braking at standstill does not reverse
        let s2 = vehicle_step(&s0, &ControlCommand::new(-1.0, 1.0), 0.1, &plant).unwrap();
        assert_eq!(s2, s0);
    }
}

#[test]
fn time_step_bounds() {
    let s0 = VehicleState { x: 0.0, y: 0.0, psi: 0.0, v: 1.0 };
    let plant = PlantConfig::default();
    assert!(vehicle_step(&s0, &ControlCommand::default(), 0.0, &plant).is_err());
    assert!(vehicle_step(&s0, &ControlCommand::default(), 0.11, &plant).is_err());
    assert!(vehicle_step(&s0, &ControlCommand::default(), 0.1, &plant).is_ok());
}

/// Speed-only loop used by the regulation tests.
fn regulate(ki: f64, seconds: f64, v0: f64, v_ref: f64) -> Vec<f64> {
    let p = PiParams { ki, ..Default::default() };
    let plant = PlantConfig::default();
    let mut st = PiState::new();
    let mut s = VehicleState { x: 0.0, y: 0.0, psi: 0.0, v: v0 };
    let mut out = Vec::new();
    for _ in 0..(seconds / p.dtau).round() as usize {
        let (a, next) = pi_step(s.v, v_ref, &st, &p);
        st = next;
        s = vehicle_step(&s, &ControlCommand::new(0.0, a), p.dtau, &plant).unwrap();
        out.push(s.v);
    }
    out
}

#[test]
fn pi_settles_after_step() {
    let trace = regulate(0.5, 60.0, 10.0, 15.0);
    let settle = trace.iter().rposition(|v| (v - 15.0).abs() >= 0.02 * 15.0).map_or(0, |i| i + 1);
    let t_settle = settle as f64 * 0.05;
    assert!(t_settle < 30.0, "settled at {t_settle}s");
    assert!((trace.last().unwrap() - 15.0).abs() < 1e-3);
}

#[test]
fn proportional_only_leaves_offset() {
    let trace = regulate(0.0, 60.0, 10.0, 15.0);
    let err = 15.0 - trace.last().unwrap();
    assert!(err > 0.01, "steady-state error {err}");
}

proptest! {
    #[test]
    fn commands_stay_normalized(theta in -10.0f64..10.0, delta in -50.0f64..50.0, v in 0.0f64..60.0, c in -1i8..=1, prev in -5.0f64..5.0) {
        let (cmd, _) = stanley_step(theta, delta, v, c, prev, &StanleyParams::default());
        prop_assert!((-1.0..=1.0).contains(&cmd));
        let (a, _) = pi_step(v, 20.0 - theta, &PiState::new(), &PiParams::default());
        prop_assert!((-1.0..=1.0).contains(&a));
    }

    #[test]
    fn damping_interpolates(theta in -0.5f64..0.5, delta in -2.0f64..2.0, prev in -0.5f64..0.5, c2 in 0.0f64..0.999) {
        let p0 = StanleyParams { c2: 0.0, ..Default::default() };
        let raw = stanley_raw(theta, delta, 10.0, 0, &p0);
        prop_assert_eq!(stanley_step(theta, delta, 10.0, 0, prev, &p0).1, raw);
        let p = StanleyParams { c2, ..Default::default() };
        let s = stanley_step(theta, delta, 10.0, 0, prev, &p).1;
        prop_assert!(s >= raw.min(prev) - 1e-12 && s <= raw.max(prev) + 1e-12);
        let p_hi = StanleyParams { c2: (c2 + 1.0) / 2.0, ..Default::default() };
        let s_hi = stanley_step(theta, delta, 10.0, 0, prev, &p_hi).1;
        prop_assert!((s_hi - prev).abs() <= (s - prev).abs() + 1e-12);
        let near_one = StanleyParams { c2: 1.0 - 1e-12, ..Default::default() };
        prop_assert!((stanley_step(theta, delta, 10.0, 0, prev, &near_one).1 - prev).abs() < 1e-9);
    }

    #[test]
    fn proportional_only_is_memoryless(v in 0.0f64..40.0, i1 in -100.0f64..100.0) {
        let p = PiParams { ki: 0.0, ..Default::default() };
        let mut st = PiState::new();
        st.integral = i1;
        prop_assert_eq!(pi_step(v, 15.0, &st, &p).0, pi_step(v, 15.0, &PiState::new(), &p).0);
    }

    #[test]
    fn clamp_inactive_within_steer_range(s in -FRAC_PI_6..FRAC_PI_6) {
        let p = StanleyParams { c2: 0.0, ..Default::default() };
        let (cmd, angle) = stanley_step(s, 0.0, 10.0, 0, 0.0, &p);
        prop_assert_eq!(angle, s);
        prop_assert!((cmd - s / FRAC_PI_6).abs() < 1e-15);
    }
}
