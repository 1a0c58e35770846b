use std::path::Path;

use mtuc_tensor::{checkpoint, Graph, ParamId, ParamSet, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::C1Loss;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Encoder-decoder without skip connections.
    Plain,
    /// Residual blocks with encoder-to-decoder skip connections.
    Residual,
    /// Residual variant with depthwise-separable 3x3 convolutions.
    Ds,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Self::Plain),
            "residual" => Ok(Self::Residual),
            "ds" => Ok(Self::Ds),
            _ => Err(Error::Config(format!("unknown model variant `{s}` (plain, residual, ds)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Plain => "plain",
            Self::Residual => "residual",
            Self::Ds => "ds",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub seg: f64,
    pub reg: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            seg: 1.0,
            reg: 1.0,
            c1: 1.0,
            c2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.seg, self.reg, self.c1, self.c2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// (channels, height, width)
    pub input_shape: [usize; 3],
    pub encoder_widths: Vec<usize>,
    pub pose_fc_width: usize,
    pub dropout_rate: f64,
    pub loss_weights: LossWeights,
    pub c1_loss: C1Loss,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Residual,
            input_shape: [3, 64, 48],
            encoder_widths: vec![8, 16, 32, 64],
            pose_fc_width: 32,
            dropout_rate: 0.5,
            loss_weights: LossWeights::default(),
            c1_loss: C1Loss::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config("input shape must be positive".into()));
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(Error::Config("encoder widths must be a nonempty list of positive counts".into()));
        }
        let factor = 1usize << (self.encoder_widths.len() - 1);
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by {factor} for {} encoder levels",
                self.encoder_widths.len()
            )));
        }
        if self.pose_fc_width == 0 {
            return Err(Error::Config("pose FC width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        let lw = self.loss_weights.as_array();
        if lw.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// 3x3 "same" convolution (standard or depthwise-separable) or 1x1 conv.
#[derive(Debug, Clone, Copy)]
enum Conv {
    Standard { kernel: ParamId, bias: ParamId, pad: usize },
    Separable { depthwise: ParamId, pointwise: ParamId, bias: ParamId },
}

impl Conv {
    fn apply(&self, g: &mut Graph, p: &ParamSet, x: Var) -> Result<Var> {
        Ok(match *self {
            Conv::Standard { kernel, bias, pad } => {
                let (k, b) = (g.param(p, kernel), g.param(p, bias));
                g.conv2d(x, k, b, 1, pad)?
            }
            Conv::Separable { depthwise, pointwise, bias } => {
                let (d, pw, b) = (g.param(p, depthwise), g.param(p, pointwise), g.param(p, bias));
                g.depthwise_separable_conv2d(x, d, pw, b)?
            }
        })
    }
}

/// Two 3x3 convolutions, optionally with an identity/1x1 skip.
#[derive(Debug, Clone)]
struct Block {
    first: Conv,
    second: Conv,
    residual: bool,
    projection: Option<Conv>,
}

impl Block {
    fn apply(&self, g: &mut Graph, p: &ParamSet, x: Var) -> Result<Var> {
        let a = self.first.apply(g, p, x)?;
        let a = g.relu(a)?;
        let b = self.second.apply(g, p, a)?;
        if !self.residual {
            return Ok(g.relu(b)?);
        }
        let skip = match &self.projection {
            Some(proj) => proj.apply(g, p, x)?,
            None => x,
        };
        let sum = g.add(b, skip)?;
        Ok(g.relu(sum)?)
    }
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    up_conv: Conv,
    block: Block,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

impl Dense {
    fn apply(&self, g: &mut Graph, p: &ParamSet, x: Var) -> Result<Var> {
        let (w, b) = (g.param(p, self.weight), g.param(p, self.bias));
        Ok(g.dense(x, w, b)?)
    }
}

#[derive(Debug, Clone, Copy)]
struct PoseBranch {
    fc1: Dense,
    fc2: Dense,
}

/// Graph handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutputs {
    /// [B, 1, H, W] per-pixel lane logits.
    pub seg_logits: Var,
    /// [B, 1] normalized heading.
    pub heading: Var,
    /// [B, 3] road-type logits and their per-class sigmoid.
    pub c1_logits: Var,
    pub c1_probs: Var,
    /// [B, 3] lead-distance logits and their softmax.
    pub c2_logits: Var,
    pub c2_probs: Var,
}

/// Anything with parameters and a single-input evaluation forward pass.
pub trait Network {
    fn params(&self) -> &ParamSet;
    /// (channels, height, width) of one input image.
    fn input_shape(&self) -> [usize; 3];
    /// Evaluation-mode forward of a [B, C, H, W] input; returns the
    /// network's final outputs (their values are not used for counting).
    fn forward_eval(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>>;
}

/// A built multi-task UNet.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    /// Heading outputs are multiplied by this to give radians.
    pub theta_norm: f64,
    encoder: Vec<Block>,
    decoder: Vec<DecoderLevel>,
    seg_head: Conv,
    pose_convs: [Conv; 2],
    branches: [PoseBranch; 3],
}

struct Builder {
    params: ParamSet,
    rng: ChaCha8Rng,
    separable: bool,
}

impl Builder {
    fn he(&mut self, name: String, shape: &[usize], fan_in: usize) -> ParamId {
        let t = Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), &mut self.rng);
        self.params.insert(name, t)
    }

    fn zeros(&mut self, name: String, n: usize) -> ParamId {
        self.params.insert(name, Tensor::zeros(&[n]))
    }

    fn conv3(&mut self, name: &str, cin: usize, cout: usize) -> Conv {
        if self.separable {
            Conv::Separable {
                depthwise: self.he(format!("{name}.dw"), &[cin, 1, 3, 3], 9),
                pointwise: self.he(format!("{name}.pw"), &[cout, cin, 1, 1], cin),
                bias: self.zeros(format!("{name}.b"), cout),
            }
        } else {
            Conv::Standard {
                kernel: self.he(format!("{name}.w"), &[cout, cin, 3, 3], 9 * cin),
                bias: self.zeros(format!("{name}.b"), cout),
                pad: 1,
            }
        }
    }

    fn conv1(&mut self, name: &str, cin: usize, cout: usize) -> Conv {
        Conv::Standard {
            kernel: self.he(format!("{name}.w"), &[cout, cin, 1, 1], cin),
            bias: self.zeros(format!("{name}.b"), cout),
            pad: 0,
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, residual: bool) -> Block {
        Block {
            first: self.conv3(&format!("{name}.conv1"), cin, cout),
            second: self.conv3(&format!("{name}.conv2"), cout, cout),
            residual,
            projection: (residual && cin != cout).then(|| self.conv1(&format!("{name}.proj"), cin, cout)),
        }
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Dense {
        Dense {
            weight: self.he(format!("{name}.w"), &[fan_out, fan_in], fan_in),
            bias: self.zeros(format!("{name}.b"), fan_out),
        }
    }
}

pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let widths = &config.encoder_widths;
    let residual = config.variant != Variant::Plain;
    let mut b = Builder {
        params: ParamSet::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        separable: config.variant == Variant::Ds,
    };
    let mut encoder = Vec::new();
    let mut cin = config.input_shape[0];
    for (i, &w) in widths.iter().enumerate() {
        encoder.push(b.block(&format!("enc{i}"), cin, w, residual));
        cin = w;
    }
    let mut decoder = Vec::new();
    for i in (0..widths.len() - 1).rev() {
        let up_conv = b.conv3(&format!("dec{i}.up"), widths[i + 1], widths[i]);
        let block_in = if residual { 2 * widths[i] } else { widths[i] };
        decoder.push(DecoderLevel {
            up_conv,
            block: b.block(&format!("dec{i}"), block_in, widths[i], residual),
        });
    }
    let seg_head = b.conv1("seg", widths[0], 1);
    let last = *widths.last().expect("validated");
    let pose_convs = [b.conv3("pose.conv1", last, last), b.conv3("pose.conv2", last, last)];
    let branch = |b: &mut Builder, name: &str, out: usize| PoseBranch {
        fc1: b.dense(&format!("{name}.fc1"), last, config.pose_fc_width),
        fc2: b.dense(&format!("{name}.fc2"), config.pose_fc_width, out),
    };
    let branches = [branch(&mut b, "heading", 1), branch(&mut b, "c1", 3), branch(&mut b, "c2", 3)];
    let params = b.params;
    Ok(Model {
        config: config.clone(),
        params,
        theta_norm: 1.0,
        encoder,
        decoder,
        seg_head,
        pose_convs,
        branches,
    })
}

impl Model {
    /// Full forward pass. `train` enables dropout; the dropout stream comes
    /// from the graph's seed.
    pub fn forward(&self, g: &mut Graph, x: Var, train: bool) -> Result<ModelOutputs> {
        let [c, h, w] = self.config.input_shape;
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::Config(format!(
                "model expects input [B, {c}, {h}, {w}], got {shape:?}"
            )));
        }
        let p = &self.params;
        let residual = self.config.variant != Variant::Plain;
        let mut skips = Vec::new();
        let mut cur = x;
        for (i, block) in self.encoder.iter().enumerate() {
            if i > 0 {
                cur = g.maxpool2(cur)?;
            }
            cur = block.apply(g, p, cur)?;
            skips.push(cur);
        }
        let bottleneck = cur;
        for (level, dec) in self.decoder.iter().enumerate() {
            let up = g.upsample2(cur)?;
            let up = dec.up_conv.apply(g, p, up)?;
            let up = g.relu(up)?;
            let skip = skips[skips.len() - 2 - level];
            let joined = if residual { g.concat_channels(&[up, skip])? } else { up };
            cur = dec.block.apply(g, p, joined)?;
        }
        let seg_logits = self.seg_head.apply(g, p, cur)?;

        let mut pose = bottleneck;
        for conv in &self.pose_convs {
            pose = conv.apply(g, p, pose)?;
            pose = g.relu(pose)?;
        }
        let rate = self.config.dropout_rate;
        let mut heads = [pose; 3];
        for (head, branch) in heads.iter_mut().zip(&self.branches) {
            let gap = g.global_avg_pool(pose)?;
            let gap = g.dropout(gap, rate, train)?;
            let hidden = branch.fc1.apply(g, p, gap)?;
            let hidden = g.relu(hidden)?;
            let hidden = g.dropout(hidden, rate, train)?;
            *head = branch.fc2.apply(g, p, hidden)?;
        }
        let [heading, c1_logits, c2_logits] = heads;
        let c1_probs = g.sigmoid(c1_logits)?;
        let c2_probs = g.softmax(c2_logits)?;
        Ok(ModelOutputs {
            seg_logits,
            heading,
            c1_logits,
            c1_probs,
            c2_logits,
            c2_probs,
        })
    }

    /// Writes `<stem>.ckpt` (parameters) and `<stem>.json` (config and
    /// heading scale).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save(&self.params, &dir.join(format!("{stem}.ckpt")))?;
        let meta = ModelMeta {
            config: self.config.clone(),
            theta_norm: self.theta_norm,
        };
        let path = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let path = dir.join(format!("{stem}.json"));
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: ModelMeta =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut model = build_model(&meta.config, 0)?;
        let stored = checkpoint::load(&dir.join(format!("{stem}.ckpt")))?;
        model.params.load_from(&stored)?;
        model.theta_norm = meta.theta_norm;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: ModelConfig,
    theta_norm: f64,
}

impl Network for Model {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn input_shape(&self) -> [usize; 3] {
        self.config.input_shape
    }

    fn forward_eval(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let o = self.forward(g, x, false)?;
        Ok(vec![o.seg_logits, o.heading, o.c1_probs, o.c2_probs])
    }
}
