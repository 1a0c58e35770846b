//! Multi-task UNet variants, their losses, training and complexity counts.

mod complexity;
mod loss;
mod net;
mod optim;
mod train;

pub use complexity::{count_complexity, ComplexityReport, FPS_RUNS};
pub use loss::{binary_cls_loss, cls_loss, C1Loss, reg_loss, seg_loss, total_loss, BatchLabels, LossParts, PixelBalance, PROB_EPS};
pub use net::{build_model, LossWeights, Model, ModelConfig, ModelOutputs, Network, Variant};
pub use optim::{Adam, Sgd};
pub use train::{evaluate_loss, make_batch, train, EpochRecord, Stage, TrainConfig, TrainReport};

impl Model {
    /// Complexity of this model at its configured input shape.
    pub fn complexity(&self) -> crate::Result<ComplexityReport> {
        let desc = serde_json::to_string(&self.config).expect("config serializes");
        count_complexity(self, &desc)
    }
}
