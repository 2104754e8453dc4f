//! ResNet34 backbone and its ablation variants.
//!
//! - A: the first block of stages 2–4 becomes an [`InceptionDown`].
//! - B: the 7×7 stem conv becomes a [`MultiScaleStem`] (the max-pool stays).
//! - C: every remaining residual block gets an [`SeBlock`].

use std::fmt;

use crate::autograd::{Graph, Var};
use crate::blocks::{ConvBn, InceptionDown, MultiScaleStem, ResidualBlock};
use crate::error::{Error, Result};
use crate::ops;
use crate::params::{Bindings, Mode, ParamBuilder, ParamId, ParamStore, Session};
use crate::tensor::{Scalar, Tensor};

pub const RESNET34_WIDTHS: [usize; 4] = [64, 128, 256, 512];
pub const RESNET34_DEPTHS: [usize; 4] = [3, 4, 6, 3];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// A: Inception-v2 downsampling in place of strided residual blocks.
    pub use_inception_down: bool,
    /// B: multi-scale input stem in place of the 7×7 conv.
    pub use_multiscale_stem: bool,
    /// C: squeeze-and-excitation in every residual block.
    pub use_se: bool,
    pub num_classes: usize,
    pub in_channels: usize,
    pub stage_widths: [usize; 4],
    pub stage_depths: [usize; 4],
    pub input_resolution: usize,
    pub se_reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            use_inception_down: false,
            use_multiscale_stem: false,
            use_se: false,
            num_classes: 4,
            in_channels: 3,
            stage_widths: RESNET34_WIDTHS,
            stage_depths: RESNET34_DEPTHS,
            input_resolution: 224,
            se_reduction: 16,
        }
    }
}

impl ModelConfig {
    /// Ablation row `index` (1-based): 1 baseline, 2 A, 3 B, 4 C, 5 A+B+C.
    pub fn preset(index: usize, num_classes: usize) -> Result<Self> {
        let (a, b, c) = match index {
            1 => (false, false, false),
            2 => (true, false, false),
            3 => (false, true, false),
            4 => (false, false, true),
            5 => (true, true, true),
            other => return Err(Error::config(format!("model preset must be 1..=5, got {other}"))),
        };
        Ok(ModelConfig {
            use_inception_down: a,
            use_multiscale_stem: b,
            use_se: c,
            num_classes,
            ..ModelConfig::default()
        })
    }

    pub fn with_flags(mut self, a: bool, b: bool, c: bool) -> Self {
        self.use_inception_down = a;
        self.use_multiscale_stem = b;
        self.use_se = c;
        self
    }

    /// Which ablation row these flags correspond to, if any.
    pub fn preset_index(&self) -> Option<usize> {
        match (self.use_inception_down, self.use_multiscale_stem, self.use_se) {
            (false, false, false) => Some(1),
            (true, false, false) => Some(2),
            (false, true, false) => Some(3),
            (false, false, true) => Some(4),
            (true, true, true) => Some(5),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::config(format!("in_channels must be 1 or 3, got {}", self.in_channels)));
        }
        let r = self.input_resolution;
        if r < 64 || !r.is_multiple_of(32) {
            return Err(Error::config(format!("resolution must be >= 64 and divisible by 32, got {r}")));
        }
        if self.stage_widths.contains(&0) || self.stage_depths.contains(&0) {
            return Err(Error::config("stage widths and depths must be positive"));
        }
        if self.use_inception_down {
            for s in 0..3 {
                let (w, next) = (self.stage_widths[s], self.stage_widths[s + 1]);
                if w % 2 != 0 || next != 2 * w {
                    return Err(Error::config(format!(
                        "inception downsampling doubles width: stage {} width {next} must be 2 x {w}",
                        s + 2
                    )));
                }
            }
        }
        if self.use_multiscale_stem && !self.stage_widths[0].is_multiple_of(2) {
            return Err(Error::config("multi-scale stem needs an even stage-1 width"));
        }
        if self.use_se && self.stage_widths.iter().any(|w| self.se_reduction == 0 || w % self.se_reduction != 0) {
            return Err(Error::config(format!(
                "SE reduction {} must divide every stage width {:?}",
                self.se_reduction, self.stage_widths
            )));
        }
        Ok(())
    }

    pub fn flags_label(&self) -> String {
        let mark = |b: bool| if b { "1" } else { "0" };
        format!(
            "A={} B={} C={}",
            mark(self.use_inception_down),
            mark(self.use_multiscale_stem),
            mark(self.use_se)
        )
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.preset_index() {
            Some(i) => write!(f, "Model {i} ({})", self.flags_label()),
            None => write!(f, "custom ({})", self.flags_label()),
        }
    }
}

/// The five ablation rows, in order.
pub fn ablation_configs(num_classes: usize) -> Vec<ModelConfig> {
    (1..=5)
        .map(|i| ModelConfig::preset(i, num_classes).expect("preset indices 1..=5 are valid"))
        .collect()
}

#[derive(Debug, Clone)]
pub enum Stem {
    Plain(ConvBn),
    MultiScale(MultiScaleStem),
}

#[derive(Debug, Clone)]
pub enum Block {
    Residual(ResidualBlock),
    InceptionDown(InceptionDown),
}

impl Block {
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        match self {
            Block::Residual(b) => b.forward(s, x),
            Block::InceptionDown(b) => b.forward(s, x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    store: ParamStore<T>,
    stem: Stem,
    stages: Vec<Vec<Block>>,
    fc_weight: ParamId,
    fc_bias: ParamId,
}

/// Output of [`Model::forward`]: logits plus the parameter bindings needed
/// to read gradients and apply batch-norm updates.
pub struct ForwardPass<T> {
    pub logits: Var,
    pub bindings: Bindings<T>,
}

/// Class predictions with softmax probabilities (one row per sample).
#[derive(Debug, Clone)]
pub struct Prediction<T> {
    pub classes: Vec<usize>,
    pub probs: Tensor<T>,
}

pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut b = ParamBuilder::new(&mut store, seed);
    let w0 = config.stage_widths[0];
    let stem = if config.use_multiscale_stem {
        Stem::MultiScale(MultiScaleStem::new(&mut b, "stem", config.in_channels, w0 / 2)?)
    } else {
        Stem::Plain(ConvBn::new(&mut b, "stem", config.in_channels, w0, 7, 2)?)
    };
    let se = config.use_se.then_some(config.se_reduction);
    let mut stages = Vec::with_capacity(4);
    let mut cin = w0;
    for (s, (&width, &depth)) in config.stage_widths.iter().zip(&config.stage_depths).enumerate() {
        let mut blocks = Vec::with_capacity(depth);
        for i in 0..depth {
            let name = format!("layer{}.{i}", s + 1);
            let block = if i == 0 && s > 0 {
                if config.use_inception_down {
                    Block::InceptionDown(InceptionDown::new(&mut b, &name, cin)?)
                } else {
                    Block::Residual(ResidualBlock::downsample(&mut b, &name, cin, width, se)?)
                }
            } else if i == 0 && cin != width {
                Block::Residual(ResidualBlock::downsample(&mut b, &name, cin, width, se)?)
            } else {
                Block::Residual(ResidualBlock::plain(&mut b, &name, width, se)?)
            };
            blocks.push(block);
            cin = width;
        }
        stages.push(blocks);
    }
    let fin = config.stage_widths[3];
    let fc_weight = b.kaiming("fc.weight", &[config.num_classes, fin], fin)?;
    let fc_bias = b.filled("fc.bias", &[config.num_classes], 0.0)?;
    Ok(Model {
        config: config.clone(),
        store,
        stem,
        stages,
        fc_weight,
        fc_bias,
    })
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn stem(&self) -> &Stem {
        &self.stem
    }

    pub fn stages(&self) -> &[Vec<Block>] {
        &self.stages
    }

    /// Exact number of learnable scalars.
    pub fn count_params(&self) -> usize {
        self.store.count_learnable()
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.store.entries().iter().map(|e| e.name.as_str()).collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let r = self.config.input_resolution;
        match shape {
            [_, c, h, w] if *c == self.config.in_channels && *h == r && *w == r => Ok(()),
            other => Err(Error::shape(format!(
                "model expects N×{}×{r}×{r} input, got {other:?}",
                self.config.in_channels
            ))),
        }
    }

    /// Logits for `x` inside an existing session.
    pub fn forward_in<'a>(&self, s: &mut Session<'a, T>, x: Var) -> Result<Var> {
        self.check_input(s.graph.value(x).shape())?;
        let mut h = match &self.stem {
            Stem::Plain(unit) => unit.forward_relu(s, x)?,
            Stem::MultiScale(stem) => stem.forward(s, x)?,
        };
        h = s.graph.maxpool2d(h, 3, 2, 1)?;
        for stage in &self.stages {
            for block in stage {
                h = block.forward(s, h)?;
            }
        }
        let n = s.graph.value(h).shape()[0];
        let c = s.graph.value(h).shape()[1];
        let z = s.graph.global_avg_pool(h)?;
        let z = s.graph.reshape(z, &[n, c])?;
        let w = s.param(self.fc_weight);
        let b = s.param(self.fc_bias);
        s.graph.linear(z, w, b)
    }

    /// Runs a forward pass on `batch` in `graph`.
    pub fn forward(&self, graph: &mut Graph<T>, batch: Tensor<T>, mode: Mode) -> Result<ForwardPass<T>> {
        let x = graph.constant(batch);
        let mut s = Session::new(graph, &self.store, mode);
        let logits = self.forward_in(&mut s, x)?;
        Ok(ForwardPass {
            logits,
            bindings: s.finish(),
        })
    }

    /// Eval-mode logits.
    pub fn logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let pass = self.forward(&mut g, batch.clone(), Mode::Eval)?;
        Ok(g.value(pass.logits).clone())
    }

    /// Eval-mode class predictions; never touches parameters or running statistics.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Prediction<T>> {
        let logits = self.logits(batch)?;
        predict_from_logits(&logits)
    }
}

/// Argmax and softmax probabilities of `[N, K]` logits.
pub fn predict_from_logits<T: Scalar>(logits: &Tensor<T>) -> Result<Prediction<T>> {
    let (_, k) = logits.dims2()?;
    let probs = ops::softmax(logits)?;
    let classes = logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect();
    Ok(Prediction { classes, probs })
}
