use std::f64::consts::{FRAC_PI_2, PI, TAU};

use mtuc_core::track::{
    build_centerline, make_preset_track, CurvatureTrack, Preset, TrackGeometry, DEFAULT_SAMPLE_SPACING,
};
use mtuc_core::Error;
use proptest::prelude::*;

fn constant(k: f64, len: f64, closed: bool) -> CurvatureTrack {
    CurvatureTrack::new("c", vec![0.0, len], vec![k, k], 4.0, closed).unwrap()
}

/// Exact integral of a piecewise-linear profile from 0 to s.
fn heading_oracle(t: &CurvatureTrack, s: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..t.stations.len() - 1 {
        let (a, b) = (t.stations[i], t.stations[i + 1]);
        if s <= a {
            break;
        }
        let e = s.min(b);
        let (ka, kb) = (t.curvatures[i], t.curvatures[i + 1]);
        let ke = ka + (kb - ka) * (e - a) / (b - a);
        acc += 0.5 * (ka + ke) * (e - a);
    }
    acc
}

#[test]
fn straight_endpoint() {
    let frames = build_centerline(&constant(0.0, 100.0, false), 1.0).unwrap();
    let end = frames.last().unwrap();
    assert_eq!(end.s, 100.0);
    assert!((end.x - 100.0).abs() < 1e-12 && end.y.abs() < 1e-12 && end.heading == 0.0);
}

#[test]
fn full_circle_closes() {
    let len = TAU / 0.03;
    let frames = build_centerline(&constant(0.03, len, true), 0.5).unwrap();
    let end = frames.last().unwrap();
    assert!(end.x.hypot(end.y) < 1e-6, "gap {}", end.x.hypot(end.y));
    assert!((end.heading - TAU).abs() < 1e-9);
    // every sample lies on the radius-33.33 circle centred at (0, 33.33)
    let r = 1.0 / 0.03;
    for f in &frames {
        assert!((f.x.hypot(f.y - r) - r).abs() < 1e-6);
    }
}

#[test]
fn quarter_circle_heading() {
    let frames = build_centerline(&constant(0.03, 52.36, false), 0.25).unwrap();
    let end = frames.last().unwrap();
    assert!((end.heading - 1.5708).abs() < 1e-12);
    assert!((end.heading - FRAC_PI_2).abs() < 1e-4);
}

#[test]
fn heading_matches_curvature_integral() {
    let t = make_preset_track(Preset::Track8Like).unwrap();
    let frames = build_centerline(&t, 1.0).unwrap();
    for f in frames.iter().step_by(37) {
        assert!((f.heading - heading_oracle(&t, f.s)).abs() < 1e-9, "s = {}", f.s);
    }
}

#[test]
fn projection_on_straight() {
    let g = TrackGeometry::new(make_preset_track(Preset::Straight).unwrap(), 0.5).unwrap();
    let p = g.project(10.0, -1.0, None).unwrap();
    assert!((p.s - 10.0).abs() < 1e-9);
    assert!((p.delta - 1.0).abs() < 1e-12);
    for x in [0.0, 3.3, 250.0, 999.0] {
        let p = g.project(x, 0.0, Some(x)).unwrap();
        assert_eq!(p.delta, 0.0);
    }
    assert!(matches!(g.project(10.0, 9.0, None), Err(Error::OutOfCorridor { .. })));
}

#[test]
fn projection_on_circle() {
    let r = 1.0 / 0.03;
    let g = TrackGeometry::new(constant(0.03, TAU * r, true), 0.5).unwrap();
    // circle centre is (0, r); radius r - 1 is inside the (left) turn
    for ang in [0.3, 1.7, 4.0] {
        let (x, y) = ((r - 1.0) * f64::sin(ang), r - (r - 1.0) * f64::cos(ang));
        let p = g.project(x, y, None).unwrap();
        assert!((p.delta.abs() - 1.0).abs() < 1e-6);
        assert!(p.delta < 0.0);
        assert!((p.s - ang * r).abs() < 1e-6);
    }
}

#[test]
fn track7_like_shape() {
    let t = make_preset_track(Preset::Track7Like).unwrap();
    assert!(t.closed);
    assert!((t.length() - 2843.0).abs() <= 1.0, "length {}", t.length());
    assert!((t.max_abs_curvature() - 0.030).abs() <= 0.001);
}

#[test]
fn track8_like_has_sharp_flip_near_2800() {
    let t = make_preset_track(Preset::Track8Like).unwrap();
    assert!((t.length() - 3919.0).abs() <= 1.0, "length {}", t.length());
    let found = (0..=200).any(|i| {
        let a = 2700.0 + i as f64;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for j in 0..=100 {
            let k = t.curvature_at(a + j as f64);
            lo = lo.min(k);
            hi = hi.max(k);
        }
        lo < 0.0 && hi > 0.0 && hi - lo > 0.04
    });
    assert!(found);
}

#[test]
fn closed_presets_close_and_wind_once() {
    for preset in [Preset::Track7Like, Preset::Track8Like, Preset::Circle(0.01), Preset::Circle(-0.05)] {
        let t = make_preset_track(preset).unwrap();
        let frames = build_centerline(&t, DEFAULT_SAMPLE_SPACING).unwrap();
        let end = frames.last().unwrap();
        let gap = end.x.hypot(end.y);
        assert!(gap <= 1e-3 * t.length(), "{preset}: gap {gap}");
        let winding = (t.total_turning() / TAU).round();
        assert_eq!(winding.abs(), 1.0, "{preset}");
        assert!((t.total_turning() - TAU * winding).abs() < 1e-3);
        assert!((end.heading - TAU * winding).abs() < 1e-3);
    }
}

#[test]
fn closed_presets_do_not_self_intersect() {
    for preset in [Preset::Track7Like, Preset::Track8Like] {
        let g = TrackGeometry::new(make_preset_track(preset).unwrap(), 2.0).unwrap();
        let f = g.frames();
        let len = g.length();
        for i in 0..f.len() {
            for j in i + 1..f.len() {
                let along = (f[j].s - f[i].s).min(len - (f[j].s - f[i].s));
                if along > 60.0 {
                    let d = (f[i].x - f[j].x).hypot(f[i].y - f[j].y);
                    assert!(d > 4.0 * g.track().lane_width, "{preset}: s {} and {} only {d} m apart", f[i].s, f[j].s);
                }
            }
        }
    }
}

#[test]
fn open_presets() {
    let s = make_preset_track(Preset::SBend).unwrap();
    assert!(!s.closed);
    assert!(s.total_turning().abs() < 1e-12);
    assert!(matches!("oval".parse::<Preset>(), Err(Error::UnknownPreset(_))));
    let _ = PI;
}

#[test]
fn track_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let t = make_preset_track(Preset::Track8Like).unwrap();
    let path = dir.path().join("track8.toml");
    t.save(&path).unwrap();
    assert_eq!(CurvatureTrack::load(&path).unwrap(), t);

    let g = TrackGeometry::new(t, 1.0).unwrap();
    let csv_path = dir.path().join("centerline.csv");
    g.write_centerline_csv(&csv_path).unwrap();
    let text = std::fs::read_to_string(csv_path).unwrap();
    assert!(text.starts_with("s,x,y,heading,curvature\n"));
    assert_eq!(text.lines().count(), g.frames().len() + 1);

    std::fs::write(dir.path().join("bad.toml"), "name = 'x'\nlane_width = 4.0\nclosed = false\nstations = [0.0, 5.0, 2.0]\ncurvatures = [0.0, 0.0, 0.0]\n").unwrap();
    assert!(CurvatureTrack::load(&dir.path().join("bad.toml")).is_err());
}

fn geometry(preset: Preset) -> &'static TrackGeometry {
    use std::sync::OnceLock;
    static T7: OnceLock<TrackGeometry> = OnceLock::new();
    static T8: OnceLock<TrackGeometry> = OnceLock::new();
    let cell = if preset == Preset::Track7Like { &T7 } else { &T8 };
    cell.get_or_init(|| TrackGeometry::new(make_preset_track(preset).unwrap(), DEFAULT_SAMPLE_SPACING).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn project_inverts_normal_offset(u in 0.0f64..1.0, d in -4.0f64..4.0, which in 0usize..2) {
        let g = geometry([Preset::Track7Like, Preset::Track8Like][which]);
        let s = u * g.length();
        let (x, y) = g.point_at(s, d);
        for hint in [None, Some(s + 3.0)] {
            let p = g.project(x, y, hint).unwrap();
            let ds = (p.s - s).abs().min(g.length() - (p.s - s).abs());
            prop_assert!(ds < 1e-4, "s {} -> {}", s, p.s);
            prop_assert!((p.delta - d).abs() < 1e-4);
        }
    }
}
