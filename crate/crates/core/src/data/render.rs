//! Flat-ground pinhole rendering of a lane with an optional lead car.

use mtuc_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::labels::{label_lead_distance, label_road_type, LeadDistance, RoadType};
use crate::error::{Error, Result};

/// Forward-looking camera mounted on the vehicle centerline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    /// Height above ground (m).
    pub height: f64,
    /// Rotation about the lateral axis; negative looks down (rad).
    pub pitch: f64,
    /// Horizontal field of view (rad).
    pub hfov: f64,
    /// Ground beyond this distance is drawn without markings (m).
    pub max_range: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            height: 1.2,
            pitch: -0.03,
            hfov: std::f64::consts::FRAC_PI_2,
            max_range: 60.0,
        }
    }
}

impl CameraConfig {
    pub fn focal_px(&self, width: usize) -> f64 {
        width as f64 / 2.0 / (self.hfov / 2.0).tan()
    }
}

/// Lead car position in the vehicle frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeadCar {
    /// Distance ahead of the camera (m).
    pub distance: f64,
    /// Lateral position, positive to the right (m).
    pub lateral: f64,
}

pub const LEAD_CAR_WIDTH: f64 = 1.94;
pub const LEAD_CAR_HEIGHT: f64 = 1.45;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Lateral offset of the camera from the lane center, positive right (m).
    pub offset: f64,
    /// Lane tangent heading minus vehicle heading (rad).
    pub heading: f64,
    /// Road curvature at the vehicle, positive left (1/m).
    pub curvature: f64,
    pub lane_width: f64,
    pub lead_car: Option<LeadCar>,
    pub width: usize,
    pub height: usize,
    pub camera: CameraConfig,
    /// Also paint a center line (not part of the mask).
    #[serde(default)]
    pub center_line: bool,
}

impl SceneSpec {
    pub fn new(offset: f64, heading: f64, curvature: f64, width: usize, height: usize) -> Self {
        Self {
            offset,
            heading,
            curvature,
            lane_width: 4.0,
            lead_car: None,
            width,
            height,
            camera: CameraConfig::default(),
            center_line: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.camera;
        let fail = |m: &str| Err(Error::Scene(m.to_string()));
        if !(self.lane_width > 0.0) {
            return fail("lane width must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return fail("resolution must be positive");
        }
        if !(c.height > 0.0) {
            return fail("camera must be above the ground");
        }
        if !(c.hfov > 0.0 && c.hfov < std::f64::consts::PI) || c.pitch.abs() >= std::f64::consts::FRAC_PI_2 {
            return fail("degenerate projection");
        }
        if !(c.max_range > 0.0) {
            return fail("max range must be positive");
        }
        if let Some(car) = self.lead_car {
            if !(car.distance > 0.5) || !car.lateral.is_finite() {
                return fail("lead car must be in front of the camera");
            }
        }
        if ![self.offset, self.heading, self.curvature].iter().all(|v| v.is_finite()) {
            return fail("non-finite pose");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    /// RGB in [0, 1], shape [3, H, W].
    pub image: Tensor,
    /// Lane-line mask in {0, 1}, shape [1, H, W].
    pub mask: Tensor,
    pub theta: f64,
    pub c1: RoadType,
    pub c2: LeadDistance,
    pub box_area_fraction: f64,
}

/// 8-bit palette so images survive a PPM round trip exactly.
const SKY: [u8; 3] = [135, 206, 235];
const GRASS: [u8; 3] = [60, 128, 50];
const ASPHALT: [u8; 3] = [90, 90, 90];
const PAINT: [u8; 3] = [255, 255, 255];
const CAR: [u8; 3] = [200, 25, 25];

const MIN_LINE_HALF_WIDTH: f64 = 0.075;
const SHOULDER: f64 = 0.75;

struct Projector {
    f: f64,
    cx: f64,
    cy: f64,
    h: f64,
    cp: f64,
    sp: f64,
}

impl Projector {
    fn new(spec: &SceneSpec) -> Self {
        let c = &spec.camera;
        Self {
            f: c.focal_px(spec.width),
            cx: spec.width as f64 / 2.0,
            cy: spec.height as f64 / 2.0,
            h: c.height,
            cp: c.pitch.cos(),
            sp: c.pitch.sin(),
        }
    }

    /// Ray through a pixel center in vehicle axes (forward, left, up).
    fn ray(&self, col: usize, row: usize) -> [f64; 3] {
        let xn = (col as f64 + 0.5 - self.cx) / self.f;
        let yn = (row as f64 + 0.5 - self.cy) / self.f;
        [self.cp + yn * self.sp, -xn, self.sp - yn * self.cp]
    }

    /// Vehicle-frame point (forward, left, up above ground) to pixel coords.
    fn project(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        let z = p[2] - self.h;
        let depth = p[0] * self.cp + z * self.sp;
        if depth <= 1e-6 {
            return None;
        }
        let up = -p[0] * self.sp + z * self.cp;
        Some((self.cx - self.f * p[1] / depth, self.cy - self.f * up / depth))
    }
}

/// Signed distance (positive left) from a point in lane coordinates to a
/// constant-curvature centerline leaving the origin along +u.
fn lateral_from_arc(u: f64, w: f64, k: f64) -> f64 {
    (2.0 * w - k * (u * u + w * w)) / (1.0 + ((k * u).powi(2) + (1.0 - k * w).powi(2)).sqrt())
}

/// Pixel rectangle [c0, c1) x [r0, r1) of the lead car, in continuous
/// image coordinates and clipped to the image.
pub fn lead_car_box(spec: &SceneSpec) -> Option<(f64, f64, f64, f64)> {
    let car = spec.lead_car?;
    let pr = Projector::new(spec);
    let half = LEAD_CAR_WIDTH / 2.0;
    let (mut c0, mut c1, mut r0, mut r1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for dy in [-half, half] {
        for z in [0.0, LEAD_CAR_HEIGHT] {
            let (c, r) = pr.project([car.distance, -car.lateral + dy, z])?;
            c0 = c0.min(c);
            c1 = c1.max(c);
            r0 = r0.min(r);
            r1 = r1.max(r);
        }
    }
    let (w, h) = (spec.width as f64, spec.height as f64);
    let clipped = (c0.max(0.0), c1.min(w), r0.max(0.0), r1.min(h));
    (clipped.1 > clipped.0 && clipped.3 > clipped.2).then_some(clipped)
}

/// Fraction of the frame covered by the lead car's (clipped) box.
pub fn box_area_fraction(spec: &SceneSpec) -> f64 {
    lead_car_box(spec).map_or(0.0, |(c0, c1, r0, r1)| {
        (c1 - c0) * (r1 - r0) / (spec.width * spec.height) as f64
    })
}

pub fn render_frame(spec: &SceneSpec) -> Result<LabeledFrame> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let pr = Projector::new(spec);
    let cam = &spec.camera;
    let (ct, st) = (spec.heading.cos(), spec.heading.sin());
    let half_lane = spec.lane_width / 2.0;
    let car_box = lead_car_box(spec);

    let mut image = vec![0.0; 3 * h * w];
    let mut mask = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            let ray = pr.ray(col, row);
            let mut color = SKY;
            let mut line = false;
            if ray[2] < 0.0 {
                let t = cam.height / -ray[2];
                let (x, y) = (t * ray[0], t * ray[1]);
                // lane frame: vehicle yawed by -heading, sitting at w = -offset
                let u = x * ct + y * st;
                let lw = -spec.offset - x * st + y * ct;
                let ground = x.hypot(y);
                let e = lateral_from_arc(u, lw, spec.curvature);
                let visible = ground <= cam.max_range && u > 0.0 && 1.0 - spec.curvature * lw > 0.0;
                color = if visible && e.abs() <= half_lane + SHOULDER { ASPHALT } else { GRASS };
                if visible {
                    let footprint = (t * (ray[0].powi(2) + ray[1].powi(2) + ray[2].powi(2)).sqrt()) / pr.f;
                    let hw = MIN_LINE_HALF_WIDTH.max(0.6 * footprint);
                    if (e.abs() - half_lane).abs() <= hw {
                        color = PAINT;
                        line = true;
                    } else if spec.center_line && e.abs() <= hw && (u / 3.0).floor() as i64 % 2 == 0 {
                        color = PAINT;
                    }
                }
            }
            if let Some((c0, c1, r0, r1)) = car_box {
                let (pc, pr_) = (col as f64 + 0.5, row as f64 + 0.5);
                if pc >= c0 && pc < c1 && pr_ >= r0 && pr_ < r1 {
                    color = CAR;
                    line = false;
                }
            }
            for ch in 0..3 {
                image[(ch * h + row) * w + col] = f64::from(color[ch]) / 255.0;
            }
            mask[row * w + col] = if line { 1.0 } else { 0.0 };
        }
    }
    let box_area_fraction = box_area_fraction(spec);
    Ok(LabeledFrame {
        image: Tensor::new(&[3, h, w], image)?,
        mask: Tensor::new(&[1, h, w], mask)?,
        theta: spec.heading,
        c1: label_road_type(spec.heading),
        c2: label_lead_distance(box_area_fraction),
        box_area_fraction,
    })
}

/// Lead-car distance at which the box area fraction equals `fraction`,
/// for a centred car (bisection on the monotone area curve).
pub fn distance_for_area_fraction(spec: &SceneSpec, fraction: f64) -> f64 {
    let area = |d: f64| {
        box_area_fraction(&SceneSpec {
            lead_car: Some(LeadCar {
                distance: d,
                lateral: 0.0,
            }),
            ..*spec
        })
    };
    let (mut lo, mut hi) = (0.6, 1000.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if area(mid) >= fraction {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}
