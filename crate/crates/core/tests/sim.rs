use std::sync::OnceLock;

use mtuc_core::data::{LeadDistance, RoadType};
use mtuc_core::perception::{GroundTruthPerceptor, NoiseSpec, Observation, PerceptionOutput, Perceptor};
use mtuc_core::sim::{
    dynamic_metrics, emit_report, plot_files, read_metrics, read_records, run_episode, seg_metrics, EpisodeConfig,
    EpisodeLog, MetricReport, StartMode, StepRecord, Termination,
};
use mtuc_core::track::{make_preset_track, Preset, TrackGeometry, DEFAULT_SAMPLE_SPACING};
use mtuc_core::Result;
use mtuc_tensor::Tensor;
use proptest::prelude::*;

fn geometry(preset: Preset) -> TrackGeometry {
    TrackGeometry::new(make_preset_track(preset).unwrap(), DEFAULT_SAMPLE_SPACING).unwrap()
}

fn straight() -> &'static TrackGeometry {
    static G: OnceLock<TrackGeometry> = OnceLock::new();
    G.get_or_init(|| geometry(Preset::Straight))
}

fn gt(noise: NoiseSpec) -> GroundTruthPerceptor {
    GroundTruthPerceptor::new(noise).unwrap()
}

fn episode(v_ref: f64, max_steps: usize) -> EpisodeConfig {
    EpisodeConfig {
        v_ref,
        max_steps,
        ..EpisodeConfig::default()
    }
}

/// Feeds the truth straight through.
struct Direct;

impl Perceptor for Direct {
    fn perceive(&mut self, obs: &Observation) -> Result<PerceptionOutput> {
        Ok(PerceptionOutput {
            theta_hat: obs.truth.theta,
            delta_hat: obs.truth.delta,
            c1: obs.truth.c1,
            c2: obs.truth.c2,
            latency_frames: 0,
            detected: true,
        })
    }
}

fn record(v: f64, theta_true: f64, theta_hat: f64, delta_true: f64) -> StepRecord {
    StepRecord {
        step: 0,
        t: 0.0,
        s: 0.0,
        x: 0.0,
        y: 0.0,
        psi: 0.0,
        v,
        v_ref: v,
        theta_true,
        theta_hat,
        delta_true,
        delta_hat: delta_true,
        steer_cmd: 0.0,
        accel_cmd: 0.0,
        c1_true: RoadType::Straight,
        c1_hat: RoadType::Straight,
        c2_true: LeadDistance::Far,
        c2_hat: LeadDistance::Far,
        detected: true,
        curvature: 0.0,
        lat_accel: 0.0,
    }
}

#[test]
fn straight_equilibrium() {
    let g = straight();
    let log = run_episode(g, &mut gt(NoiseSpec::default()), &episode(20.0, 1500), "eq").unwrap();
    assert_eq!(log.termination, Termination::Completed);
    assert!(log.records.iter().all(|r| r.delta_true.abs() < 1e-9));
    for w in log.records.windows(2) {
        assert!((w[1].t - w[0].t - 0.05).abs() < 1e-12);
        assert_eq!(w[1].step, w[0].step + 1);
    }
}

#[test]
fn offset_start_converges_without_overshoot() {
    let g = straight();
    let cfg = EpisodeConfig {
        v_ref: 10.0,
        start_offset: 1.0,
        max_steps: 600,
        ..EpisodeConfig::default()
    };
    let log = run_episode(g, &mut gt(NoiseSpec::default()), &cfg, "conv").unwrap();
    assert_eq!(log.termination, Termination::MaxSteps);
    let peak = log.records.iter().map(|r| r.delta_true.abs()).fold(0.0, f64::max);
    assert!(peak <= 1.2, "peak {peak}");
    let late = log.records.iter().filter(|r| r.s >= 150.0);
    assert!(late.clone().count() > 100);
    for r in late {
        assert!(r.delta_true.abs() < 0.02, "delta {} at s {}", r.delta_true, r.s);
    }
}

#[test]
fn zero_noise_matches_direct_feed_bitwise() {
    let g = geometry(Preset::SBend);
    let cfg = episode(15.0, 2000);
    let a = run_episode(&g, &mut gt(NoiseSpec { seed: 9, ..NoiseSpec::default() }), &cfg, "a").unwrap();
    let b = run_episode(&g, &mut Direct, &cfg, "a").unwrap();
    assert_eq!(a, b);
    assert_eq!(a.termination, Termination::Completed);
}

#[test]
fn circle_and_straight_keep_lane_up_to_20() {
    for preset in [Preset::Straight, Preset::Circle(0.01)] {
        let g = geometry(preset);
        for v in [5.0, 12.0, 20.0] {
            let log = run_episode(&g, &mut gt(NoiseSpec::default()), &episode(v, 20_000), "k").unwrap();
            assert_eq!(log.termination, Termination::Completed, "{preset} at {v}");
        }
    }
}

#[test]
fn circle_lap_distance() {
    let g = geometry(Preset::Circle(0.01));
    let log = run_episode(&g, &mut gt(NoiseSpec::default()), &episode(20.0, 20_000), "c").unwrap();
    assert_eq!(log.termination, Termination::Completed);
    assert!(log.distance >= 0.99 * g.length() && log.distance < g.length() + 2.0);
    let m = dynamic_metrics(&log.records).unwrap();
    assert!(m.dma_delta < 0.02, "{m:?}");
}

#[test]
fn departure_and_max_steps() {
    let g = straight();
    // A perceptor with a constant offset bias steers the car out of the lane.
    struct Biased;
    impl Perceptor for Biased {
        fn perceive(&mut self, obs: &Observation) -> Result<PerceptionOutput> {
            Ok(PerceptionOutput {
                theta_hat: obs.truth.theta,
                delta_hat: obs.truth.delta - 3.0,
                c1: obs.truth.c1,
                c2: obs.truth.c2,
                latency_frames: 0,
                detected: true,
            })
        }
    }
    let log = run_episode(g, &mut Biased, &episode(10.0, 2000), "b").unwrap();
    assert_eq!(log.termination, Termination::LaneDeparture);
    assert!(log.termination.is_failure());
    let log = run_episode(g, &mut Direct, &episode(10.0, 7), "m").unwrap();
    assert_eq!(log.termination, Termination::MaxSteps);
    assert_eq!(log.records.len(), 7);
}

#[test]
fn standing_start_reaches_speed() {
    let g = straight();
    let cfg = EpisodeConfig {
        v_ref: 15.0,
        start: StartMode::Standing,
        max_steps: 1200,
        ..EpisodeConfig::default()
    };
    let log = run_episode(g, &mut Direct, &cfg, "s").unwrap();
    assert_eq!(log.records[0].v, 0.0);
    let last = log.records.last().unwrap();
    assert!((last.v - 15.0).abs() < 0.3, "{}", last.v);
    let m = dynamic_metrics(&log.records).unwrap();
    assert!(m.moving_steps < log.records.len());
}

#[test]
fn rejects_inconsistent_config() {
    let g = straight();
    let bad = [
        EpisodeConfig { v_ref: 0.0, ..EpisodeConfig::default() },
        EpisodeConfig { dt: 0.02, ..EpisodeConfig::default() },
        EpisodeConfig { start_offset: 3.0, ..EpisodeConfig::default() },
        EpisodeConfig { departure_offset: 9.0, ..EpisodeConfig::default() },
        EpisodeConfig { start_s: 5000.0, ..EpisodeConfig::default() },
    ];
    for cfg in bad {
        assert!(run_episode(g, &mut Direct, &cfg, "x").is_err(), "{cfg:?}");
    }
}

#[test]
fn close_lead_caps_speed() {
    struct AlwaysClose;
    impl Perceptor for AlwaysClose {
        fn perceive(&mut self, obs: &Observation) -> Result<PerceptionOutput> {
            let mut o = Direct.perceive(obs)?;
            o.c2 = LeadDistance::Close;
            Ok(o)
        }
    }
    let g = straight();
    let cfg = EpisodeConfig {
        v_ref: 20.0,
        close_speed_cap: Some(12.0),
        max_steps: 1000,
        ..EpisodeConfig::default()
    };
    let log = run_episode(g, &mut AlwaysClose, &cfg, "cap").unwrap();
    assert!(log.records.iter().all(|r| r.v_ref == 12.0));
    assert!((log.records.last().unwrap().v - 12.0).abs() < 0.3);
    let free = run_episode(g, &mut AlwaysClose, &EpisodeConfig { close_speed_cap: None, ..cfg }, "free").unwrap();
    assert!(free.records.iter().all(|r| r.v_ref == 20.0));
}

fn noisy_lap(preset: Preset, kmh: f64, seed: u64) -> (TrackGeometry, EpisodeLog) {
    let g = geometry(preset);
    let noise = NoiseSpec {
        theta_sigma: 0.01,
        delta_sigma: 0.05,
        seed,
        ..NoiseSpec::default()
    };
    let log = run_episode(&g, &mut gt(noise), &episode(kmh / 3.6, 40_000), &preset.to_string()).unwrap();
    (g, log)
}

#[test]
fn noisy_laps_on_both_tracks() {
    for (preset, kmh) in [(Preset::Track7Like, 76.0), (Preset::Track8Like, 50.0)] {
        let (_, log) = noisy_lap(preset, kmh, 1);
        assert_eq!(log.termination, Termination::Completed, "{preset}");
        let m = dynamic_metrics(&log.records).unwrap();
        assert!(m.dma_delta <= 0.30, "{preset}: {m:?}");
        assert!(m.theta_dmae <= 0.03, "{preset}: {m:?}");
    }
}

#[test]
fn deterministic_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (_, a) = noisy_lap(Preset::SBend, 60.0, 4);
    let (_, b) = noisy_lap(Preset::SBend, 60.0, 4);
    a.write_csv(&dir.path().join("a.csv")).unwrap();
    b.write_csv(&dir.path().join("b.csv")).unwrap();
    let ra = std::fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(ra, std::fs::read(dir.path().join("b.csv")).unwrap());
    let (_, c) = noisy_lap(Preset::SBend, 60.0, 5);
    assert_ne!(a.records, c.records);
}

#[test]
fn report_files_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (g, log) = noisy_lap(Preset::SBend, 60.0, 2);
    let metrics = vec![MetricReport::from_episode(&log)];
    let written = emit_report(&[(&log, &g)], &metrics, dir.path()).unwrap();
    assert_eq!(written.len(), 6);
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    let mut expected: Vec<String> = plot_files("s_bend").into();
    expected.extend(["episode_s_bend.csv".to_string(), "metrics.csv".to_string()]);
    expected.sort();
    assert_eq!(names, expected);
    for p in plot_files("s_bend") {
        let svg = std::fs::read_to_string(dir.path().join(p)).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("polyline"));
    }

    let back = read_records(&dir.path().join("episode_s_bend.csv")).unwrap();
    assert_eq!(back, log.records);
    let (m0, m1) = (dynamic_metrics(&log.records).unwrap(), dynamic_metrics(&back).unwrap());
    assert!((m0.theta_dmae - m1.theta_dmae).abs() <= 1e-12);
    assert!((m0.dma_delta - m1.dma_delta).abs() <= 1e-12);
    assert_eq!(read_metrics(&dir.path().join("metrics.csv")).unwrap(), metrics);
}

#[test]
fn empty_report_is_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let written = emit_report(&[], &[], dir.path()).unwrap();
    assert_eq!(written.len(), 1);
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("label,track,termination,"));
    assert!(read_metrics(&dir.path().join("metrics.csv")).unwrap().is_empty());
}

#[test]
fn report_rejects_unsafe_label() {
    let dir = tempfile::tempdir().unwrap();
    let g = straight();
    let log = run_episode(g, &mut Direct, &episode(10.0, 5), "../x").unwrap();
    assert!(emit_report(&[(&log, g)], &[], dir.path()).is_err());
}

#[test]
fn dynamic_metrics_examples() {
    let recs: Vec<StepRecord> = (0..20).map(|i| record(10.0, 0.001 * i as f64, 0.001 * i as f64 + 0.01, 0.0)).collect();
    let m = dynamic_metrics(&recs).unwrap();
    assert!((m.theta_dmae - 0.01).abs() < 1e-15);
    assert_eq!(m.dma_delta, 0.0);
    assert!(dynamic_metrics(&[]).is_err());
    assert!(dynamic_metrics(&[record(0.5, 0.0, 1.0, 1.0)]).is_err());
    let m = dynamic_metrics(&[record(0.0, 0.0, 5.0, 5.0), record(1.0, 0.0, 0.2, -0.4)]).unwrap();
    assert_eq!((m.theta_dmae, m.dma_delta, m.moving_steps), (0.2, 0.4, 1));
}

#[test]
fn seg_metrics_examples() {
    let t = |v: Vec<f64>| Tensor::new(&[1, 2, 2], v).unwrap();
    let m = seg_metrics(&t(vec![1.0, 1.0, 0.0, 0.0]), &t(vec![1.0, 0.0, 1.0, 0.0])).unwrap();
    assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (0.5, 0.5, 0.5, 0.5));
    let gt_mask = t(vec![1.0, 0.0, 1.0, 0.0]);
    let m = seg_metrics(&gt_mask, &gt_mask).unwrap();
    assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
    let m = seg_metrics(&t(vec![0.0; 4]), &t(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
    assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (0.75, 0.0, 0.0, 0.0));
    assert!(seg_metrics(&t(vec![0.0; 4]), &Tensor::zeros(&[4])).is_err());
}

fn seg_oracle(p: &[bool], g: &[bool]) -> [f64; 4] {
    let count = |a: bool, b: bool| p.iter().zip(g).filter(|(x, y)| **x == a && **y == b).count() as f64;
    let (tp, fp, fn_, tn) = (count(true, true), count(true, false), count(false, true), count(false, false));
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let (pr, re) = (div(tp, tp + fp), div(tp, tp + fn_));
    [div(tp + tn, tp + fp + fn_ + tn), pr, re, div(2.0 * pr * re, pr + re)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dynamic_metrics_ignore_order(mut rows in prop::collection::vec((0.0f64..30.0, -0.1f64..0.1, -0.1f64..0.1, -2.0f64..2.0), 1..40), seed in any::<u64>()) {
        rows.push((5.0, 0.0, 0.0, 0.0));
        let recs: Vec<StepRecord> = rows.iter().map(|&(v, a, b, d)| record(v, a, b, d)).collect();
        let mut shuffled = recs.clone();
        let n = shuffled.len();
        for i in 0..n {
            shuffled.swap(i, (seed as usize).wrapping_mul(i + 7) % n);
        }
        let (a, b) = (dynamic_metrics(&recs).unwrap(), dynamic_metrics(&shuffled).unwrap());
        prop_assert!((a.theta_dmae - b.theta_dmae).abs() < 1e-12);
        prop_assert!((a.dma_delta - b.dma_delta).abs() < 1e-12);
        prop_assert_eq!(a.moving_steps, b.moving_steps);
        prop_assert!(a.theta_dmae >= 0.0 && a.dma_delta >= 0.0);
    }

    #[test]
    fn seg_metrics_match_oracle(cells in prop::collection::vec((any::<bool>(), any::<bool>()), 1..64)) {
        let p: Vec<bool> = cells.iter().map(|c| c.0).collect();
        let g: Vec<bool> = cells.iter().map(|c| c.1).collect();
        let t = |v: &[bool]| Tensor::new(&[v.len()], v.iter().map(|&b| f64::from(u8::from(b))).collect()).unwrap();
        let m = seg_metrics(&t(&p), &t(&g)).unwrap();
        let o = seg_oracle(&p, &g);
        for (a, b) in [m.accuracy, m.precision, m.recall, m.f1].iter().zip(o) {
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(a));
        }
    }
}

