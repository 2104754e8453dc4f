//! Named gradient checks for every primitive op and composite block.
//!
//! Each case builds random 64-bit inputs from a seed and reduces the op's
//! output to a scalar with random weights. Inputs of the bare max-pool and
//! ReLU cases are kept away from ties and zero; inside composite blocks the
//! checker's kink detection handles it, and a smaller step keeps truncation
//! error negligible next to the small gradients deep in a block.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::{grad_check, GradCheckReport};
use crate::autograd::{Graph, Var};
use crate::blocks::{InceptionDown, MultiScaleStem, ResidualBlock, SeBlock};
use crate::error::Result;
use crate::params::{ParamBuilder, ParamStore, Session, BN_EPS};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const PRIMITIVE_EPS: f64 = 1e-4;
pub const BLOCK_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseKind {
    Primitive,
    Block,
}

#[derive(Clone, Copy)]
pub struct CheckCase {
    pub name: &'static str,
    pub kind: CaseKind,
    run: fn(u64) -> Result<GradCheckReport>,
}

impl CheckCase {
    pub fn run(&self, seed: u64) -> Result<GradCheckReport> {
        (self.run)(seed)
    }
}

impl std::fmt::Debug for CheckCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CheckCase").field("name", &self.name).field("kind", &self.kind).finish()
    }
}

fn normal(r: &mut Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| { let z: f64 = StandardNormal.sample(r); std * z }).expect("non-empty test shape")
}

/// Normal values pushed at least `gap` away from zero.
fn off_zero(r: &mut Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    normal(r, shape, 1.0).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

/// A shuffled ramp: every pair of values differs by at least `step`.
fn distinct(r: &mut Rng, shape: &[usize], step: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * step).collect();
    v.shuffle(r);
    Tensor::new(shape, v).expect("non-empty test shape")
}

fn reduce(g: &mut Graph<f64>, y: Var, r: &mut Rng) -> Result<Var> {
    let w = normal(r, g.value(y).shape(), 1.0);
    g.weighted_sum(y, w)
}

fn stream(seed: u64, name: &str) -> Rng {
    rng::stream(seed, "gradcheck", &[rng::derive_seed(0, name, &[])])
}

fn check_op(
    seed: u64,
    name: &str,
    inputs: impl FnOnce(&mut Rng) -> Vec<Tensor<f64>>,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut r = stream(seed, name);
    let inputs = inputs(&mut r);
    let wseed = r.gen::<u64>();
    grad_check(&inputs, PRIMITIVE_EPS, |g, v| {
        let y = f(g, v)?;
        reduce(g, y, &mut rng::stream(wseed, "weights", &[]))
    })
}

/// A block built into its own store, checked with respect to the input and
/// every learnable parameter (perturbed away from their initial values).
fn check_block<B>(
    seed: u64,
    name: &str,
    input_shape: &[usize],
    build: impl FnOnce(&mut ParamBuilder<'_, f64>) -> Result<B>,
    forward: impl Fn(&B, &mut Session<'_, f64>, Var) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut r = stream(seed, name);
    let mut store = ParamStore::new();
    let block = build(&mut ParamBuilder::new(&mut store, r.gen()))?;
    let mut inputs = vec![normal(&mut r, input_shape, 1.0)];
    for id in store.learnable_ids() {
        let jitter = normal(&mut r, store.get(id).shape(), 0.2);
        let mut t = store.get(id).clone();
        t.add_assign(&jitter)?;
        inputs.push(t);
    }
    let wseed = r.gen::<u64>();
    grad_check(&inputs, BLOCK_EPS, |g, v| {
        let mut s = Session::with_bound(g, &store, &v[1..])?;
        let y = forward(&block, &mut s, v[0])?;
        reduce(s.graph, y, &mut rng::stream(wseed, "weights", &[]))
    })
}

fn conv2d(seed: u64) -> Result<GradCheckReport> {
    check_op(
        seed,
        "conv2d",
        |r| vec![normal(r, &[2, 3, 6, 5], 1.0), normal(r, &[4, 3, 3, 3], 0.5), normal(r, &[4], 0.5)],
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1),
    )
}

fn conv2d_strided(seed: u64) -> Result<GradCheckReport> {
    check_op(
        seed,
        "conv2d_strided",
        |r| vec![normal(r, &[2, 2, 7, 7], 1.0), normal(r, &[3, 2, 5, 5], 0.5), normal(r, &[3], 0.5)],
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 2),
    )
}

fn conv2d_no_bias(seed: u64) -> Result<GradCheckReport> {
    check_op(
        seed,
        "conv2d_no_bias",
        |r| vec![normal(r, &[1, 2, 5, 5], 1.0), normal(r, &[3, 2, 1, 1], 0.5)],
        |g, v| g.conv2d(v[0], v[1], None, 2, 0),
    )
}

fn maxpool2d(seed: u64) -> Result<GradCheckReport> {
    check_op(
        seed,
        "maxpool2d",
        |r| vec![distinct(r, &[2, 2, 6, 6], 0.01)],
        |g, v| g.maxpool2d(v[0], 3, 2, 1),
    )
}

fn global_avg_pool(seed: u64) -> Result<GradCheckReport> {
    check_op(seed, "global_avg_pool", |r| vec![normal(r, &[2, 3, 4, 5], 1.0)], |g, v| {
        g.global_avg_pool(v[0])
    })
}

fn relu(seed: u64) -> Result<GradCheckReport> {
    check_op(seed, "relu", |r| vec![off_zero(r, &[3, 2, 3, 3], 0.01)], |g, v| Ok(g.relu(v[0])))
}

fn sigmoid(seed: u64) -> Result<GradCheckReport> {
    check_op(seed, "sigmoid", |r| vec![normal(r, &[3, 7], 2.0)], |g, v| Ok(g.sigmoid(v[0])))
}

fn batchnorm_train(seed: u64) -> Result<GradCheckReport> {
    check_op(
        seed,
        "batchnorm_train",
        |r| {
            let scale = normal(r, &[3], 0.3).map(|v| v + 1.0);
            vec![normal(r, &[3, 3, 3, 2], 1.5), scale, normal(r, &[3], 0.3)]
        },
        |g, v| Ok(g.batchnorm_train(v[0], v[1], v[2], BN_EPS)?.0),
    )
}

fn batchnorm_eval(seed: u64) -> Result<GradCheckReport> {
    let mut r = stream(seed, "batchnorm_eval.stats");
    let mean = normal(&mut r, &[3], 0.5);
    let var = normal(&mut r, &[3], 0.3).map(|v| 0.5 + v.abs());
    check_op(
        seed,
        "batchnorm_eval",
        |r| vec![normal(r, &[2, 3, 3, 3], 1.0), normal(r, &[3], 0.3).map(|v| v + 1.0), normal(r, &[3], 0.3)],
        |g, v| g.batchnorm_eval(v[0], v[1], v[2], &mean, &var, BN_EPS),
    )
}

fn linear(seed: u64) -> Result<GradCheckReport> {
    check_op(
        seed,
        "linear",
        |r| vec![normal(r, &[3, 5], 1.0), normal(r, &[4, 5], 0.5), normal(r, &[4], 0.5)],
        |g, v| g.linear(v[0], v[1], v[2]),
    )
}

fn add(seed: u64) -> Result<GradCheckReport> {
    check_op(
        seed,
        "add",
        |r| vec![normal(r, &[2, 3, 2, 2], 1.0), normal(r, &[2, 3, 2, 2], 1.0)],
        |g, v| {
            // fan-out: x feeds both operands of the second add
            let s = g.add(v[0], v[1])?;
            g.add(s, v[0])
        },
    )
}

fn scale_channels(seed: u64) -> Result<GradCheckReport> {
    check_op(
        seed,
        "scale_channels",
        |r| vec![normal(r, &[2, 3, 3, 2], 1.0), normal(r, &[2, 3], 1.0)],
        |g, v| g.scale_channels(v[0], v[1]),
    )
}

fn concat_channels(seed: u64) -> Result<GradCheckReport> {
    check_op(
        seed,
        "concat_channels",
        |r| {
            vec![
                normal(r, &[2, 1, 3, 3], 1.0),
                normal(r, &[2, 3, 3, 3], 1.0),
                normal(r, &[2, 2, 3, 3], 1.0),
            ]
        },
        |g, v| g.concat_channels(&[v[0], v[1], v[2]]),
    )
}

fn reshape(seed: u64) -> Result<GradCheckReport> {
    check_op(seed, "reshape", |r| vec![normal(r, &[2, 6, 1, 1], 1.0)], |g, v| g.reshape(v[0], &[3, 4]))
}

fn softmax_cross_entropy(seed: u64) -> Result<GradCheckReport> {
    let mut r = stream(seed, "softmax_cross_entropy");
    let logits = normal(&mut r, &[5, 4], 2.0);
    let labels: Vec<usize> = (0..5).map(|_| r.gen_range(0..4)).collect();
    grad_check(&[logits], PRIMITIVE_EPS, |g, v| g.softmax_cross_entropy(v[0], &labels))
}

fn sum(seed: u64) -> Result<GradCheckReport> {
    let mut r = stream(seed, "sum");
    grad_check(&[normal(&mut r, &[2, 3, 4], 1.0)], PRIMITIVE_EPS, |g, v| Ok(g.sum(v[0])))
}

fn residual(seed: u64) -> Result<GradCheckReport> {
    check_block(
        seed,
        "residual",
        &[2, 4, 5, 5],
        |b| ResidualBlock::plain(b, "res", 4, None),
        |blk, s, x| blk.forward(s, x),
    )
}

fn residual_downsample(seed: u64) -> Result<GradCheckReport> {
    check_block(
        seed,
        "residual_downsample",
        &[2, 3, 6, 6],
        |b| ResidualBlock::downsample(b, "down", 3, 4, None),
        |blk, s, x| blk.forward(s, x),
    )
}

fn se(seed: u64) -> Result<GradCheckReport> {
    check_block(
        seed,
        "se",
        &[3, 8, 3, 3],
        |b| SeBlock::new(b, "se", 8, 4),
        |blk, s, x| blk.forward(s, x),
    )
}

fn residual_se(seed: u64) -> Result<GradCheckReport> {
    check_block(
        seed,
        "residual_se",
        &[2, 4, 4, 4],
        |b| ResidualBlock::plain(b, "res", 4, Some(2)),
        |blk, s, x| blk.forward(s, x),
    )
}

fn inception_down(seed: u64) -> Result<GradCheckReport> {
    check_block(
        seed,
        "inception_down",
        &[2, 4, 6, 6],
        |b| InceptionDown::new(b, "inc", 4),
        |blk, s, x| blk.forward(s, x),
    )
}

fn multiscale_stem(seed: u64) -> Result<GradCheckReport> {
    check_block(
        seed,
        "multiscale_stem",
        &[2, 1, 12, 12],
        |b| MultiScaleStem::new(b, "stem", 1, 2),
        |blk, s, x| blk.forward(s, x),
    )
}

/// Every primitive op followed by every composite block.
pub fn cases() -> Vec<CheckCase> {
    use CaseKind::{Block, Primitive};
    let case = |name, kind, run| CheckCase { name, kind, run };
    vec![
        case("conv2d", Primitive, conv2d as fn(u64) -> Result<GradCheckReport>),
        case("conv2d_strided", Primitive, conv2d_strided),
        case("conv2d_no_bias", Primitive, conv2d_no_bias),
        case("maxpool2d", Primitive, maxpool2d),
        case("global_avg_pool", Primitive, global_avg_pool),
        case("relu", Primitive, relu),
        case("sigmoid", Primitive, sigmoid),
        case("batchnorm_train", Primitive, batchnorm_train),
        case("batchnorm_eval", Primitive, batchnorm_eval),
        case("linear", Primitive, linear),
        case("add", Primitive, add),
        case("scale_channels", Primitive, scale_channels),
        case("concat_channels", Primitive, concat_channels),
        case("reshape", Primitive, reshape),
        case("softmax_cross_entropy", Primitive, softmax_cross_entropy),
        case("sum", Primitive, sum),
        case("residual", Block, residual),
        case("residual_downsample", Block, residual_downsample),
        case("se", Block, se),
        case("residual_se", Block, residual_se),
        case("inception_down", Block, inception_down),
        case("multiscale_stem", Block, multiscale_stem),
    ]
}

/// Worst result of one case over a range of seeds.
#[derive(Debug, Clone)]
pub struct CaseSummary {
    pub name: &'static str,
    pub kind: CaseKind,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub failures: usize,
}

impl CaseSummary {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

pub fn run_case(case: &CheckCase, seeds: std::ops::Range<u64>, tolerance: f64) -> Result<CaseSummary> {
    let mut summary = CaseSummary {
        name: case.name,
        kind: case.kind,
        seeds: 0,
        max_rel_error: 0.0,
        worst_seed: seeds.start,
        failures: 0,
    };
    for seed in seeds {
        let report = case.run(seed)?;
        summary.seeds += 1;
        if !report.passes(tolerance) {
            summary.failures += 1;
        }
        let err = if report.non_finite { f64::INFINITY } else { report.max_rel_error };
        if err > summary.max_rel_error {
            summary.max_rel_error = err;
            summary.worst_seed = seed;
        }
    }
    Ok(summary)
}
