use mtuc_tensor::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{total_loss, BatchLabels, LossParts};
use super::net::{LossWeights, Model};
use super::optim::{Adam, Sgd};
use crate::data::{Class, LabeledFrame};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Pose heads only (segmentation weight forced to 0), SGD with momentum.
    PoseOnly,
    /// All four losses, Adam.
    Joint,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PoseOnly => "pose_only",
            Self::Joint => "joint",
        })
    }
}

/// Fields left out of a serialized schedule take the defaults of its stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "PartialTrainConfig")]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate.
    pub lr: f64,
    /// SGD momentum (pose-only stage).
    pub momentum: f64,
    /// Pose-only stage: lr is multiplied by `lr_decay` every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    /// Joint stage: lr drops to `late_lr` after `late_fraction` of the epochs.
    pub late_lr: f64,
    pub late_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Replaces the model's loss weights when set.
    pub loss_weights: Option<LossWeights>,
    pub seed: u64,
    pub shuffle: bool,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Stop at the end of the first epoch whose mean total loss is below this.
    pub target_loss: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialTrainConfig {
    stage: Stage,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    momentum: Option<f64>,
    lr_decay: Option<f64>,
    decay_every: Option<usize>,
    late_lr: Option<f64>,
    late_fraction: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    eps: Option<f64>,
    loss_weights: Option<LossWeights>,
    seed: Option<u64>,
    shuffle: Option<bool>,
    max_steps: Option<usize>,
    target_loss: Option<f64>,
}

impl From<PartialTrainConfig> for TrainConfig {
    fn from(p: PartialTrainConfig) -> Self {
        let d = match p.stage {
            Stage::PoseOnly => Self::pose_only(),
            Stage::Joint => Self::joint(),
        };
        Self {
            stage: p.stage,
            epochs: p.epochs.unwrap_or(d.epochs),
            batch_size: p.batch_size.unwrap_or(d.batch_size),
            lr: p.lr.unwrap_or(d.lr),
            momentum: p.momentum.unwrap_or(d.momentum),
            lr_decay: p.lr_decay.unwrap_or(d.lr_decay),
            decay_every: p.decay_every.unwrap_or(d.decay_every),
            late_lr: p.late_lr.unwrap_or(d.late_lr),
            late_fraction: p.late_fraction.unwrap_or(d.late_fraction),
            beta1: p.beta1.unwrap_or(d.beta1),
            beta2: p.beta2.unwrap_or(d.beta2),
            eps: p.eps.unwrap_or(d.eps),
            loss_weights: p.loss_weights.or(d.loss_weights),
            seed: p.seed.unwrap_or(d.seed),
            shuffle: p.shuffle.unwrap_or(d.shuffle),
            max_steps: p.max_steps.or(d.max_steps),
            target_loss: p.target_loss.or(d.target_loss),
        }
    }
}

impl TrainConfig {
    pub fn pose_only() -> Self {
        Self {
            stage: Stage::PoseOnly,
            epochs: 100,
            batch_size: 20,
            lr: 0.01,
            momentum: 0.9,
            lr_decay: 0.9,
            decay_every: 5,
            late_lr: 0.0,
            late_fraction: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            loss_weights: None,
            seed: 0,
            shuffle: true,
            max_steps: None,
            target_loss: None,
        }
    }

    pub fn joint() -> Self {
        Self {
            stage: Stage::Joint,
            epochs: 100,
            batch_size: 1,
            lr: 1e-4,
            late_lr: 1e-5,
            late_fraction: 0.75,
            ..Self::pose_only()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.lr >= 0.0
            && self.late_lr >= 0.0
            && (0.0..=1.0).contains(&self.late_fraction)
            && (0.0..1.0).contains(&self.momentum)
            && self.lr_decay > 0.0
            && self.decay_every > 0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training schedule {self:?}")))
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.stage {
            Stage::PoseOnly => self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32),
            Stage::Joint => {
                let switch = (self.late_fraction * self.epochs as f64).round() as usize;
                if epoch < switch {
                    self.lr
                } else {
                    self.late_lr
                }
            }
        }
    }

    fn weights(&self, model: &Model) -> LossWeights {
        let mut w = self.loss_weights.unwrap_or(model.config.loss_weights);
        if self.stage == Stage::PoseOnly {
            w.seg = 0.0;
        }
        w
    }
}

/// Mean training losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    /// Optimizer steps taken so far (cumulative).
    pub steps: usize,
    pub seg: f64,
    pub reg: f64,
    pub c1: f64,
    pub c2: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub steps: usize,
    /// Batches where every pixel was lane or every pixel was background.
    pub degenerate_batches: usize,
    /// Step count at the end of the epoch that met `target_loss`.
    pub reached_target_at: Option<usize>,
}

impl TrainReport {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Stacks frames into a [B, C, H, W] input and its labels. Headings are
/// divided by `theta_norm`.
pub fn make_batch(frames: &[&LabeledFrame], theta_norm: f64) -> Result<(Tensor, BatchLabels)> {
    let lift = |t: &Tensor| -> Result<Tensor> {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        Ok(t.reshape(&s)?)
    };
    let images = frames.iter().map(|f| lift(&f.image)).collect::<Result<Vec<_>>>()?;
    let masks = frames.iter().map(|f| lift(&f.mask)).collect::<Result<Vec<_>>>()?;
    let b = frames.len();
    let heading = Tensor::new(&[b, 1], frames.iter().map(|f| f.theta / theta_norm).collect())?;
    let c1 = Tensor::new(&[b, 3], frames.iter().flat_map(|f| f.c1.one_hot()).collect())?;
    let c2 = Tensor::new(&[b, 3], frames.iter().flat_map(|f| f.c2.one_hot()).collect())?;
    Ok((
        Tensor::cat_batch(&images)?,
        BatchLabels {
            mask: Tensor::cat_batch(&masks)?,
            heading,
            c1,
            c2,
        },
    ))
}

enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step as u64
}

/// Trains `model` in place. Steps are strictly sequential; with a fixed
/// seed the loss curve and the final parameters are reproducible bit for
/// bit.
pub fn train(model: &mut Model, frames: &[LabeledFrame], theta_norm: f64, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if !(theta_norm > 0.0) {
        return Err(Error::Dataset(format!("heading scale {theta_norm} must be positive")));
    }
    let weights = cfg.weights(model);
    model.theta_norm = theta_norm;
    let mut opt = match cfg.stage {
        Stage::PoseOnly => Optimizer::Sgd(Sgd::new(&model.params, cfg.momentum)),
        Stage::Joint => Optimizer::Adam(Adam::new(&model.params, cfg.beta1, cfg.beta2, cfg.eps)),
    };
    model.params.zero_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut report = TrainReport {
        records: Vec::new(),
        steps: 0,
        degenerate_batches: 0,
        reached_target_at: None,
    };
    'epochs: for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut sum = LossParts::default();
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                break;
            }
            let batch: Vec<&LabeledFrame> = chunk.iter().map(|&i| &frames[i]).collect();
            let (x, labels) = make_batch(&batch, theta_norm)?;
            let mut g = Graph::with_seed(step_seed(cfg.seed, report.steps));
            let xv = g.input(x);
            let out = model.forward(&mut g, xv, true)?;
            let (loss, parts, balance) = total_loss(&mut g, &out, &labels, &weights, model.config.c1_loss)?;
            if !parts.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: report.steps,
                    detail: format!("loss {parts:?}"),
                });
            }
            if weights.seg > 0.0 && balance.is_degenerate() {
                report.degenerate_batches += 1;
            }
            g.backward(loss)?;
            g.accumulate_param_grads(&mut model.params);
            match &mut opt {
                Optimizer::Sgd(o) => o.step(&mut model.params, lr),
                Optimizer::Adam(o) => o.step(&mut model.params, lr),
            }
            report.steps += 1;
            let n = chunk.len() as f64;
            sum.seg += parts.seg * n;
            sum.reg += parts.reg * n;
            sum.c1 += parts.c1 * n;
            sum.c2 += parts.c2 * n;
            sum.total += parts.total * n;
            seen += chunk.len();
        }
        if seen == 0 {
            break;
        }
        let n = seen as f64;
        let rec = EpochRecord {
            stage: cfg.stage,
            epoch,
            steps: report.steps,
            seg: sum.seg / n,
            reg: sum.reg / n,
            c1: sum.c1 / n,
            c2: sum.c2 / n,
            total: sum.total / n,
            lr,
        };
        report.records.push(rec);
        if cfg.target_loss.is_some_and(|t| rec.total < t) {
            report.reached_target_at = Some(report.steps);
            break 'epochs;
        }
    }
    Ok(report)
}

/// Mean evaluation-mode losses over `frames` (one frame per forward pass).
pub fn evaluate_loss(model: &Model, frames: &[LabeledFrame], weights: &LossWeights) -> Result<LossParts> {
    let mut sum = LossParts::default();
    for f in frames {
        let (x, labels) = make_batch(&[f], model.theta_norm)?;
        let mut g = Graph::no_grad(0);
        let xv = g.input(x);
        let out = model.forward(&mut g, xv, false)?;
        let (_, p, _) = total_loss(&mut g, &out, &labels, weights, model.config.c1_loss)?;
        sum.seg += p.seg;
        sum.reg += p.reg;
        sum.c1 += p.c1;
        sum.c2 += p.c2;
        sum.total += p.total;
    }
    let n = frames.len().max(1) as f64;
    Ok(LossParts {
        seg: sum.seg / n,
        reg: sum.reg / n,
        c1: sum.c1 / n,
        c2: sum.c2 / n,
        total: sum.total / n,
    })
}
