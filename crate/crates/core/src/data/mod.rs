//! Synthetic road scenes, labels and datasets.

mod dataset;
mod labels;
mod pnm;
mod render;

pub use dataset::{Dataset, DatasetConfig, FrameRecord, Manifest, Split, FRAME_FORMAT, MANIFEST_FILE, MANIFEST_VERSION};
pub use labels::{
    argmax3, label_lead_distance, label_road_type, Class, LeadDistance, RoadType, CLOSE_AREA_FRACTION,
    STRAIGHT_THETA_LIMIT,
};
pub use pnm::{read_pnm, write_pnm};
pub use render::{
    box_area_fraction, distance_for_area_fraction, lead_car_box, render_frame, CameraConfig, LabeledFrame, LeadCar,
    SceneSpec, LEAD_CAR_HEIGHT, LEAD_CAR_WIDTH,
};
