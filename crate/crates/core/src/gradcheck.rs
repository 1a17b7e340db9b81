//! Central-difference gradient checking for tape programs.
//!
//! A program is any function that records a scalar loss on a fresh `f64`
//! tape from a list of parameter variables. Each checked coordinate is
//! perturbed by `±eps`; the two-sided difference quotient is compared with
//! the reverse-mode gradient. Coordinates whose perturbation flips a ReLU
//! sign or a max-pool winner straddle a kink and are skipped and counted.

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// At most this many coordinates per parameter tensor; larger tensors
    /// are subsampled.
    pub max_coords: usize,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// numerically zero are compared in absolute terms.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            // Near the cube root of f64 epsilon, which balances truncation
            // against cancellation in the difference quotient.
            eps: 1e-5,
            tol: 1e-5,
            max_coords: 64,
            abs_floor: 1e-6,
            seed: 0x6772_6164,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub index: usize,
    pub shape: Vec<usize>,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst coordinate.
    pub worst: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub tol: f64,
    pub max_rel_err: f64,
    pub params: Vec<ParamCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.params.iter().map(|p| p.skipped_kinks).sum()
    }
}

/// Relative error with a floor on the denominator.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>]) -> Result<(f64, u64)>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&tape, &vars)?;
    let v = loss.value().item();
    Ok((v, tape.kink_signature()))
}

pub fn grad_check<F>(name: &str, f: F, params: &[Tensor<f64>], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&tape, &vars)?;
    let base_sig = tape.kink_signature();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.get(*v)).collect();

    let mut rng = RngState::new(cfg.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut all);
            all.truncate(cfg.max_coords);
            all.sort_unstable();
            all
        };
        let mut pc = ParamCheck {
            index: pi,
            shape: p.shape().to_vec(),
            checked: 0,
            skipped_kinks: 0,
            max_rel_err: 0.0,
            worst: None,
        };
        for c in coords {
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = orig + cfg.eps;
            let (fp, sp) = evaluate(&f, &work)?;
            work[pi].data_mut()[c] = orig - cfg.eps;
            let (fm, sm) = evaluate(&f, &work)?;
            work[pi].data_mut()[c] = orig;
            if sp != base_sig || sm != base_sig {
                pc.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.eps);
            let e = rel_err(analytic[pi].data()[c], numeric, cfg.abs_floor);
            pc.checked += 1;
            if e > pc.max_rel_err || pc.worst.is_none() {
                pc.max_rel_err = pc.max_rel_err.max(e);
                pc.worst = Some(c);
            }
        }
        checks.push(pc);
    }
    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let checked: usize = checks.iter().map(|c| c.checked).sum();
    let skipped: usize = checks.iter().map(|c| c.skipped_kinks).sum();
    // A check that skipped most coordinates has not shown anything.
    let passed = max_rel_err < cfg.tol && checked > 0 && skipped <= checked;
    Ok(GradCheckReport {
        name: name.to_string(),
        tol: cfg.tol,
        max_rel_err,
        params: checks,
        passed,
    })
}

/// Tolerances used by [`standard_suite`].
#[derive(Clone, Copy, Debug)]
pub struct SuiteConfig {
    pub ops: GradCheckConfig,
    pub network: GradCheckConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            ops: GradCheckConfig::default(),
            network: GradCheckConfig {
                eps: 1e-4,
                tol: 1e-4,
                max_coords: 16,
                ..GradCheckConfig::default()
            },
        }
    }
}

fn randn(shape: &[usize], rng: &mut RngState) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.normal(0.0, 1.0))
}

/// `Σ r ⊙ y` with fixed random weights `r`, so that every output element
/// carries a distinct upstream gradient.
fn weighted<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let r = randn(&y.shape(), &mut RngState::new(seed));
    y.mul(&tape.constant(r)?)?.sum()
}

/// Finite-difference check of every tape op, both attention blocks and a
/// tiny full network. Each report is named after what it covers.
pub fn standard_suite(cfg: SuiteConfig) -> Result<Vec<GradCheckReport>> {
    use crate::attention::{DependentAttention, SpecificAttention};
    use crate::autodiff::{concat, gated_fuse, ConvSpec, PoolMode};
    use crate::model::{joint_loss, BackboneConfig, Model, ModelConfig, NetworkSpec, Variant};
    use crate::params::ParamSet;

    let mut rng = RngState::new(cfg.ops.seed ^ 0x5eed);
    let mut r = |shape: &[usize]| randn(shape, &mut rng);
    let ops = cfg.ops;
    let mut out = Vec::new();

    out.push(grad_check("reshape", |t, p| weighted(t, p[0].reshape(vec![6, 2])?, 1), &[r(&[3, 4])], ops)?);
    out.push(grad_check("matmul", |t, p| weighted(t, p[0].matmul(&p[1])?, 2), &[r(&[3, 4]), r(&[4, 5])], ops)?);
    out.push(grad_check(
        "linear",
        |t, p| weighted(t, p[0].linear(&p[1], Some(&p[2]))?, 3),
        &[r(&[4, 6]), r(&[3, 6]), r(&[3])],
        ops,
    )?);
    out.push(grad_check(
        "conv2d",
        |t, p| weighted(t, p[0].conv2d(&p[1], Some(&p[2]), ConvSpec::same(3))?, 4),
        &[r(&[2, 3, 6, 6]), r(&[4, 3, 3, 3]), r(&[4])],
        ops,
    )?);
    out.push(grad_check(
        "conv2d_strided",
        |t, p| weighted(t, p[0].conv2d(&p[1], None, ConvSpec::new(2, 1))?, 5),
        &[r(&[2, 2, 7, 7]), r(&[3, 2, 3, 3])],
        ops,
    )?);
    for (i, mode) in [
        PoolMode::GlobalAvg,
        PoolMode::GlobalMax,
        PoolMode::ChannelAvg,
        PoolMode::ChannelMax,
        PoolMode::SpatialAvg { window: (2, 2) },
        PoolMode::SpatialMax { window: (2, 2) },
    ]
    .into_iter()
    .enumerate()
    {
        out.push(grad_check(
            mode.name(),
            |t, p| weighted(t, p[0].pool(mode)?, 10 + i as u64),
            &[r(&[2, 3, 4, 4])],
            ops,
        )?);
    }
    out.push(grad_check("add", |t, p| weighted(t, p[0].add(&p[1])?, 20), &[r(&[2, 3]), r(&[2, 3])], ops)?);
    out.push(grad_check(
        "mul_broadcast_channel",
        |t, p| weighted(t, p[0].mul(&p[1])?, 21),
        &[r(&[2, 3, 4, 4]), r(&[2, 3])],
        ops,
    )?);
    out.push(grad_check(
        "mul_broadcast_spatial",
        |t, p| weighted(t, p[0].mul(&p[1])?, 22),
        &[r(&[2, 1, 4, 4]), r(&[2, 3, 4, 4])],
        ops,
    )?);
    out.push(grad_check("relu", |t, p| weighted(t, p[0].relu()?, 23), &[r(&[4, 5])], ops)?);
    out.push(grad_check("sigmoid", |t, p| weighted(t, p[0].sigmoid()?, 24), &[r(&[4, 5])], ops)?);
    out.push(grad_check("scale", |t, p| weighted(t, p[0].scale(-0.7)?, 25), &[r(&[4])], ops)?);
    out.push(grad_check("sum", |_, p| p[0].sum(), &[r(&[3, 2])], ops)?);
    out.push(grad_check(
        "concat",
        |t, p| weighted(t, concat(&[p[0], p[1]], 1)?, 26),
        &[r(&[2, 1, 3, 3]), r(&[2, 2, 3, 3])],
        ops,
    )?);
    out.push(grad_check(
        "dropout",
        |t, p| weighted(t, p[0].dropout(0.3, &mut RngState::new(27), true)?, 28),
        &[r(&[4, 6])],
        ops,
    )?);
    out.push(grad_check(
        "softmax_cross_entropy",
        |_, p| p[0].softmax_cross_entropy(&[0, 2, 1, 2]),
        &[r(&[4, 3])],
        ops,
    )?);
    out.push(grad_check(
        "gated_fuse",
        |t, p| weighted(t, gated_fuse(&p[0], &p[1].sigmoid()?, &p[2])?, 29),
        &[r(&[2, 8]), r(&[2, 8]), r(&[2, 8])],
        ops,
    )?);

    let mut prng = RngState::new(ops.seed ^ 0xb10c);
    let block = SpecificAttention::new("s", 8, 4, 3, true)?;
    let mut bp = ParamSet::<f64>::new();
    block.init(&mut bp, &mut prng)?;
    randomize_biases(&mut bp, &mut prng);
    let n = bp.len();
    let mut tensors = bp.tensors().to_vec();
    tensors.push(r(&[2, 8, 5, 5]));
    out.push(grad_check(
        "specific_attention",
        |t, v| {
            let b = bp.bind_vars(&v[..n])?;
            weighted(t, block.forward(&b, v[n])?.output, 30)
        },
        &tensors,
        ops,
    )?);

    let dep = DependentAttention::new("d", 8, 4, true)?;
    let mut dp = ParamSet::<f64>::new();
    dep.init(&mut dp, &mut prng)?;
    randomize_biases(&mut dp, &mut prng);
    let n = dp.len();
    let mut tensors = dp.tensors().to_vec();
    tensors.push(r(&[2, 8]));
    tensors.push(r(&[2, 8]));
    out.push(grad_check(
        "dependent_attention",
        |t, v| {
            let b = dp.bind_vars(&v[..n])?;
            let gate = dep.gate(&b, v[n])?;
            weighted(t, gated_fuse(&v[n + 1], &gate, &v[n])?, 31)
        },
        &tensors,
        ops,
    )?);

    let model = Model::new(NetworkSpec {
        model: ModelConfig {
            proj_dim: 32,
            reduction: 4,
            spatial_kernel: 3,
            ..ModelConfig::default()
        },
        backbone: BackboneConfig {
            widths: vec![8, 16],
            strides: vec![1, 2],
            kernel: 3,
        },
        variant: Variant::FULL,
    })?;
    let mut mp = model.init::<f64>(&mut prng)?;
    randomize_biases(&mut mp, &mut prng);
    let n = mp.len();
    let mut tensors = mp.tensors().to_vec();
    tensors.push(r(&[2, 3, 16, 16]));
    out.push(grad_check(
        "canet_joint_loss",
        |_, v| {
            let b = mp.bind_vars(&v[..n])?;
            let o = model.forward(&b, v[n], None)?;
            joint_loss(&o, &[0, 1], &[2, 1], 0.25)
        },
        &tensors,
        cfg.network,
    )?);
    Ok(out)
}

/// Bias tensors start at zero; give them small values so their gradients
/// are exercised away from the symmetric point.
fn randomize_biases(p: &mut crate::params::ParamSet<f64>, rng: &mut RngState) {
    let names = p.names().to_vec();
    for (name, t) in names.iter().zip(p.tensors_mut()) {
        let leaf = name.rsplit('.').next().unwrap_or("");
        if leaf.starts_with('b') || leaf == "conv_b" {
            for v in t.data_mut() {
                *v = rng.normal(0.0, 0.1);
            }
        }
    }
}
