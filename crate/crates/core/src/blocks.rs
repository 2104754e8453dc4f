//! Composite building blocks: conv→BN units, residual blocks, squeeze-and-
//! excitation, the four-branch Inception-v2 downsampling module, and the
//! multi-scale input stem.
//!
//! Blocks hold only [`ParamId`]s; values live in a [`ParamStore`] and are
//! bound per forward pass through a [`Session`].

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Mode, ParamBuilder, ParamId, Session, BN_EPS};
use crate::tensor::Scalar;

fn channels<T: Scalar>(s: &Session<'_, T>, x: Var) -> Result<(usize, usize, usize, usize)> {
    s.graph.value(x).dims4()
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    /// `k×k` convolution with `floor(k/2)` padding and a bias.
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Self::build(b, name, cin, cout, kernel, stride, true)
    }

    /// As [`Conv::new`] without a bias, for convs followed by batch norm
    /// (which cancels any per-channel offset).
    pub fn no_bias<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Self::build(b, name, cin, cout, kernel, stride, false)
    }

    fn build<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        with_bias: bool,
    ) -> Result<Self> {
        if cin == 0 || cout == 0 || kernel == 0 || stride == 0 {
            return Err(Error::arg(format!("{name}: conv extents and stride must be positive")));
        }
        let weight = b.kaiming(&format!("{name}.weight"), &[cout, cin, kernel, kernel], cin * kernel * kernel)?;
        let bias = if with_bias {
            Some(b.filled(&format!("{name}.bias"), &[cout], 0.0)?)
        } else {
            None
        };
        Ok(Conv {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|id| s.param(id));
        s.graph.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            scale: b.filled(&format!("{name}.scale"), &[channels], 1.0)?,
            shift: b.filled(&format!("{name}.shift"), &[channels], 0.0)?,
            running_mean: b.running(&format!("{name}.running_mean"), &[channels], 0.0)?,
            running_var: b.running(&format!("{name}.running_var"), &[channels], 1.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let scale = s.param(self.scale);
        let shift = s.param(self.shift);
        match s.mode() {
            Mode::Train => {
                let (y, stats) = s.graph.batchnorm_train(x, scale, shift, BN_EPS)?;
                s.record_stats(self.running_mean, self.running_var, stats);
                Ok(y)
            }
            Mode::Eval => {
                let mean = s.stored(self.running_mean);
                let var = s.stored(self.running_var);
                s.graph.batchnorm_eval(x, scale, shift, mean, var, BN_EPS)
            }
        }
    }
}

/// Convolution followed by batch norm (no activation).
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBn {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(ConvBn {
            conv: Conv::no_bias(b, &format!("{name}.conv"), cin, cout, kernel, stride)?,
            bn: BatchNorm::new(b, &format!("{name}.bn"), cout)?,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        self.bn.forward(s, y)
    }

    /// conv → BN → ReLU.
    pub fn forward_relu<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.forward(s, x)?;
        Ok(s.graph.relu(y))
    }
}

/// Squeeze-and-excitation channel attention.
///
/// squeeze: `z = GAP(u)`; excitation: `s = sigmoid(W2 relu(W1 z))`;
/// scale: `out[n,c] = s[n,c] * u[n,c]`.
#[derive(Debug, Clone)]
pub struct SeBlock {
    pub fc1_weight: ParamId,
    pub fc1_bias: ParamId,
    pub fc2_weight: ParamId,
    pub fc2_bias: ParamId,
    pub channels: usize,
    pub reduction: usize,
}

impl SeBlock {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::arg(format!(
                "{name}: SE reduction {reduction} must divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        Ok(SeBlock {
            fc1_weight: b.kaiming(&format!("{name}.fc1.weight"), &[hidden, channels], channels)?,
            fc1_bias: b.filled(&format!("{name}.fc1.bias"), &[hidden], 0.0)?,
            fc2_weight: b.kaiming(&format!("{name}.fc2.weight"), &[channels, hidden], hidden)?,
            fc2_bias: b.filled(&format!("{name}.fc2.bias"), &[channels], 0.0)?,
            channels,
            reduction,
        })
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }

    /// Per-channel weights `s`, shaped N×C.
    pub fn excitation<T: Scalar>(&self, s: &mut Session<'_, T>, u: Var) -> Result<Var> {
        let (n, c, _, _) = channels(s, u)?;
        if c != self.channels {
            return Err(Error::shape(format!("SE block expects {} channels, got {c}", self.channels)));
        }
        let z = s.graph.global_avg_pool(u)?;
        let z = s.graph.reshape(z, &[n, c])?;
        let (w1, b1, w2, b2) = (
            s.param(self.fc1_weight),
            s.param(self.fc1_bias),
            s.param(self.fc2_weight),
            s.param(self.fc2_bias),
        );
        let h = s.graph.linear(z, w1, b1)?;
        let h = s.graph.relu(h);
        let e = s.graph.linear(h, w2, b2)?;
        Ok(s.graph.sigmoid(e))
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, u: Var) -> Result<Var> {
        let weights = self.excitation(s, u)?;
        s.graph.scale_channels(u, weights)
    }
}

/// Two 3×3 conv→BN units with a shortcut: `relu(F(x) + shortcut(x))`.
///
/// The downsampling variant uses stride 2 in the first conv and a 1×1
/// stride-2 conv→BN shortcut. With SE enabled, `F(x)` is channel-scaled
/// before the addition.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub shortcut: Option<ConvBn>,
    pub se: Option<SeBlock>,
    pub cin: usize,
    pub cout: usize,
}

impl ResidualBlock {
    /// Identity-shortcut block of width `channels`.
    pub fn plain<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        se_reduction: Option<usize>,
    ) -> Result<Self> {
        Self::build(b, name, channels, channels, 1, se_reduction)
    }

    /// Stride-2 block mapping `cin` channels to `cout`.
    pub fn downsample<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        se_reduction: Option<usize>,
    ) -> Result<Self> {
        Self::build(b, name, cin, cout, 2, se_reduction)
    }

    fn build<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        se_reduction: Option<usize>,
    ) -> Result<Self> {
        let conv1 = ConvBn::new(b, &format!("{name}.conv1"), cin, cout, 3, stride)?;
        let conv2 = ConvBn::new(b, &format!("{name}.conv2"), cout, cout, 3, 1)?;
        let shortcut = if stride != 1 || cin != cout {
            Some(ConvBn::new(b, &format!("{name}.shortcut"), cin, cout, 1, stride)?)
        } else {
            None
        };
        let se = se_reduction
            .map(|r| SeBlock::new(b, &format!("{name}.se"), cout, r))
            .transpose()?;
        Ok(ResidualBlock {
            conv1,
            conv2,
            shortcut,
            se,
            cin,
            cout,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (_, c, _, _) = channels(s, x)?;
        if c != self.cin {
            return Err(Error::shape(format!("residual block expects {} channels, got {c}", self.cin)));
        }
        let f = self.conv1.forward_relu(s, x)?;
        let mut f = self.conv2.forward(s, f)?;
        if let Some(se) = &self.se {
            f = se.forward(s, f)?;
        }
        let skip = match &self.shortcut {
            Some(sc) => sc.forward(s, x)?,
            None => x,
        };
        let h = s.graph.add(f, skip)?;
        Ok(s.graph.relu(h))
    }
}

/// Four-branch downsampling module; each branch halves the resolution and
/// emits `C/2` channels, so the concatenation has `2C` channels.
///
/// - branch 1: 3×3 stride 2
/// - branch 2: 1×1, then 3×3 stride 2
/// - branch 3: 1×1, 3×3, then 3×3 stride 2
/// - branch 4: 3×3 max-pool stride 2, then 3×3
#[derive(Debug, Clone)]
pub struct InceptionDown {
    pub branch1: ConvBn,
    pub branch2: [ConvBn; 2],
    pub branch3: [ConvBn; 3],
    pub branch4: ConvBn,
    pub channels: usize,
}

impl InceptionDown {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        if channels < 2 || !channels.is_multiple_of(2) {
            return Err(Error::arg(format!("{name}: inception downsampling needs an even width, got {channels}")));
        }
        let half = channels / 2;
        Ok(InceptionDown {
            branch1: ConvBn::new(b, &format!("{name}.branch1.0"), channels, half, 3, 2)?,
            branch2: [
                ConvBn::new(b, &format!("{name}.branch2.0"), channels, half, 1, 1)?,
                ConvBn::new(b, &format!("{name}.branch2.1"), half, half, 3, 2)?,
            ],
            branch3: [
                ConvBn::new(b, &format!("{name}.branch3.0"), channels, half, 1, 1)?,
                ConvBn::new(b, &format!("{name}.branch3.1"), half, half, 3, 1)?,
                ConvBn::new(b, &format!("{name}.branch3.2"), half, half, 3, 2)?,
            ],
            branch4: ConvBn::new(b, &format!("{name}.branch4.1"), channels, half, 3, 1)?,
            channels,
        })
    }

    pub fn out_channels(&self) -> usize {
        2 * self.channels
    }

    /// The four branch outputs, in concatenation order.
    pub fn branches<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<[Var; 4]> {
        let (_, c, h, w) = channels(s, x)?;
        if c != self.channels {
            return Err(Error::shape(format!("inception downsampling expects {} channels, got {c}", self.channels)));
        }
        if h < 3 || w < 3 {
            return Err(Error::arg(format!("inception downsampling needs at least 3×3 input, got {h}×{w}")));
        }
        let b1 = self.branch1.forward_relu(s, x)?;
        let mut b2 = x;
        for unit in &self.branch2 {
            b2 = unit.forward_relu(s, b2)?;
        }
        let mut b3 = x;
        for unit in &self.branch3 {
            b3 = unit.forward_relu(s, b3)?;
        }
        let pooled = s.graph.maxpool2d(x, 3, 2, 1)?;
        let b4 = self.branch4.forward_relu(s, pooled)?;
        Ok([b1, b2, b3, b4])
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let parts = self.branches(s, x)?;
        s.graph.concat_channels(&parts)
    }
}

/// Multi-scale input stem.
///
/// Four parallel stride-2 convs (k = 3, 5, 7, 11) emit `width` channels each;
/// outputs are summed pairwise (3+5, 7+11); the two sums pass through a 3×3
/// and a 5×5 conv respectively and are concatenated to `2 * width` channels.
#[derive(Debug, Clone)]
pub struct MultiScaleStem {
    pub first: [ConvBn; 4],
    pub second: [ConvBn; 2],
    pub in_channels: usize,
    pub width: usize,
}

pub const STEM_KERNELS: [usize; 4] = [3, 5, 7, 11];

impl MultiScaleStem {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, in_channels: usize, width: usize) -> Result<Self> {
        let first = [
            ConvBn::new(b, &format!("{name}.k3"), in_channels, width, 3, 2)?,
            ConvBn::new(b, &format!("{name}.k5"), in_channels, width, 5, 2)?,
            ConvBn::new(b, &format!("{name}.k7"), in_channels, width, 7, 2)?,
            ConvBn::new(b, &format!("{name}.k11"), in_channels, width, 11, 2)?,
        ];
        let second = [
            ConvBn::new(b, &format!("{name}.merge_a.k3"), width, width, 3, 1)?,
            ConvBn::new(b, &format!("{name}.merge_b.k5"), width, width, 5, 1)?,
        ];
        Ok(MultiScaleStem {
            first,
            second,
            in_channels,
            width,
        })
    }

    pub fn out_channels(&self) -> usize {
        2 * self.width
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (_, c, h, w) = channels(s, x)?;
        if c != self.in_channels {
            return Err(Error::shape(format!("stem expects {} channels, got {c}", self.in_channels)));
        }
        if h < 11 || w < 11 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::arg(format!(
                "multi-scale stem needs even spatial extents of at least 11, got {h}×{w}"
            )));
        }
        let mut y = Vec::with_capacity(4);
        for unit in &self.first {
            y.push(unit.forward_relu(s, x)?);
        }
        let m1 = s.graph.add(y[0], y[1])?;
        let m2 = s.graph.add(y[2], y[3])?;
        let a = self.second[0].forward_relu(s, m1)?;
        let b = self.second[1].forward_relu(s, m2)?;
        s.graph.concat_channels(&[a, b])
    }
}
