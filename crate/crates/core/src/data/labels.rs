use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// |theta| up to this value (inclusive) is a straight road.
pub const STRAIGHT_THETA_LIMIT: f64 = 0.006;

/// Lead-car box area, as a fraction of the frame, at or above which the car
/// is "close": 3200 px^2 of a 640x480 frame.
pub const CLOSE_AREA_FRACTION: f64 = 3200.0 / (640.0 * 480.0);

/// Road-type class from the heading angle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RoadType {
    #[serde(rename = "C1L")]
    Left,
    #[serde(rename = "C1S")]
    Straight,
    #[serde(rename = "C1R")]
    Right,
}

/// Lead-car distance class from the projected box area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LeadDistance {
    #[serde(rename = "C2F")]
    Far,
    #[serde(rename = "C2N")]
    Near,
    #[serde(rename = "C2C")]
    Close,
}

pub fn label_road_type(theta: f64) -> RoadType {
    if theta < -STRAIGHT_THETA_LIMIT {
        RoadType::Left
    } else if theta > STRAIGHT_THETA_LIMIT {
        RoadType::Right
    } else {
        RoadType::Straight
    }
}

pub fn label_lead_distance(box_area_fraction: f64) -> LeadDistance {
    if box_area_fraction <= 0.0 {
        LeadDistance::Far
    } else if box_area_fraction < CLOSE_AREA_FRACTION {
        LeadDistance::Near
    } else {
        LeadDistance::Close
    }
}

/// Shared behaviour of the two three-way label sets.
pub trait Class: Copy + Eq + fmt::Display + 'static {
    const ALL: [Self; 3];

    fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("class listed in ALL")
    }

    fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    fn one_hot(self) -> [f64; 3] {
        let mut v = [0.0; 3];
        v[self.index()] = 1.0;
        v
    }
}

impl Class for RoadType {
    const ALL: [Self; 3] = [Self::Left, Self::Straight, Self::Right];
}

impl Class for LeadDistance {
    const ALL: [Self; 3] = [Self::Far, Self::Near, Self::Close];
}

impl fmt::Display for RoadType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Left => "C1L",
            Self::Straight => "C1S",
            Self::Right => "C1R",
        })
    }
}

impl fmt::Display for LeadDistance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Far => "C2F",
            Self::Near => "C2N",
            Self::Close => "C2C",
        })
    }
}

fn parse_class<C: Class>(s: &str) -> Result<C> {
    C::ALL
        .into_iter()
        .find(|c| c.to_string() == s)
        .ok_or_else(|| Error::Label(format!("unknown class `{s}`")))
}

impl FromStr for RoadType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        parse_class(s)
    }
}

impl FromStr for LeadDistance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        parse_class(s)
    }
}

/// Index of the largest of three scores; ties go to the lower index.
pub fn argmax3(scores: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..scores.len().min(3) {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    best
}
