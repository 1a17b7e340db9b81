//! Disease-specific and disease-dependent attention blocks.
//!
//! The disease-specific block gates a shared feature map `F` first per
//! channel and then per spatial position:
//!
//! ```text
//! A_c = σ(MLP(avgpool(F)) + MLP(maxpool(F)))          MLP = W1·ReLU(W0·x)
//! F_i = A_c ⊗ F                                         (broadcast over H×W)
//! A_s = σ(conv_k×k([mean_c(F_i); max_c(F_i)]))
//! F'  = A_s ⊗ F_i                                       (broadcast over C)
//! ```
//!
//! The disease-dependent block gates one branch's pooled features and adds
//! them to the other branch:
//!
//! ```text
//! A   = σ(W1·ReLU(W0·G_src))
//! G'  = G_dst ⊕ A ⊗ G_src
//! ```
//!
//! All functions accept either unbatched (`C×H×W`, `D`) or batched
//! (`N×C×H×W`, `N×D`) inputs.

use crate::autodiff::{concat, gated_fuse, ConvSpec, PoolMode, Var};
use crate::error::{Error, Result};
use crate::params::{kaiming_uniform, Bound, ParamSet};
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};

/// Two-layer bottleneck MLP with a ReLU between the layers.
#[derive(Clone, Debug)]
struct BottleneckMlp {
    prefix: String,
    dim: usize,
    hidden: usize,
    bias: bool,
}

impl BottleneckMlp {
    fn names(&self) -> [String; 4] {
        let p = &self.prefix;
        [format!("{p}.w0"), format!("{p}.b0"), format!("{p}.w1"), format!("{p}.b1")]
    }

    fn init<T: Real>(&self, params: &mut ParamSet<T>, rng: &mut RngState) -> Result<()> {
        let [w0, b0, w1, b1] = self.names();
        params.insert(w0, kaiming_uniform(&[self.hidden, self.dim], self.dim, rng))?;
        params.insert(w1, kaiming_uniform(&[self.dim, self.hidden], self.hidden, rng))?;
        if self.bias {
            params.insert(b0, Tensor::zeros(vec![self.hidden]))?;
            params.insert(b1, Tensor::zeros(vec![self.dim]))?;
        }
        Ok(())
    }

    fn numel(&self) -> usize {
        let w = 2 * self.dim * self.hidden;
        if self.bias {
            w + self.hidden + self.dim
        } else {
            w
        }
    }

    /// `x` is `N×dim`.
    fn forward<'t, T: Real>(&self, p: &Bound<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let [w0, b0, w1, b1] = self.names();
        let h = x.linear(&p.var(&w0)?, p.opt_var(&b0).as_ref())?.relu()?;
        h.linear(&p.var(&w1)?, p.opt_var(&b1).as_ref())
    }
}

/// Lifts an unbatched vector to `1×D` for the MLP; returns whether it did.
fn as_rows<'t, T: Real>(x: Var<'t, T>) -> Result<(Var<'t, T>, bool)> {
    let s = x.shape();
    if s.len() == 1 {
        Ok((x.reshape(vec![1, s[0]])?, true))
    } else {
        Ok((x, false))
    }
}

fn unrow<'t, T: Real>(x: Var<'t, T>, lifted: bool) -> Result<Var<'t, T>> {
    if lifted {
        let d = x.shape()[1];
        x.reshape(vec![d])
    } else {
        Ok(x)
    }
}

/// Channel axis of a `C×H×W` or `N×C×H×W` map.
fn channel_axis(op: &'static str, shape: &[usize]) -> Result<usize> {
    match shape.len() {
        3 => Ok(0),
        4 => Ok(1),
        _ => Err(Error::dim(op, format!("expected C×H×W or N×C×H×W, got {shape:?}"))),
    }
}

/// Per-disease channel-then-spatial attention.
#[derive(Clone, Debug)]
pub struct SpecificAttention {
    prefix: String,
    channels: usize,
    reduction: usize,
    kernel: usize,
    mlp: BottleneckMlp,
}

/// Intermediate maps of one disease-specific block.
pub struct SpecificMaps<'t, T: Real> {
    pub channel_gate: Var<'t, T>,
    pub spatial_gate: Var<'t, T>,
    pub output: Var<'t, T>,
}

impl SpecificAttention {
    /// `prefix` names the parameters, e.g. `specific.dr`.
    /// `bias` adds bias terms to both MLP layers and the spatial conv.
    pub fn new(prefix: &str, channels: usize, reduction: usize, kernel: usize, bias: bool) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) || channels / reduction == 0 {
            return Err(Error::Parameter(format!(
                "reduction {reduction} must divide channel count {channels}"
            )));
        }
        if kernel.is_multiple_of(2) {
            return Err(Error::Parameter(format!(
                "spatial kernel size {kernel} must be odd to preserve H×W"
            )));
        }
        Ok(SpecificAttention {
            prefix: prefix.to_string(),
            channels,
            reduction,
            kernel,
            mlp: BottleneckMlp {
                prefix: prefix.to_string(),
                dim: channels,
                hidden: channels / reduction,
                bias,
            },
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    fn conv_names(&self) -> (String, String) {
        (format!("{}.conv", self.prefix), format!("{}.conv_b", self.prefix))
    }

    pub fn init<T: Real>(&self, params: &mut ParamSet<T>, rng: &mut RngState) -> Result<()> {
        self.mlp.init(params, rng)?;
        let k = self.kernel;
        let (conv, conv_b) = self.conv_names();
        params.insert(conv, kaiming_uniform(&[1, 2, k, k], 2 * k * k, rng))?;
        if self.mlp.bias {
            params.insert(conv_b, Tensor::zeros(vec![1]))?;
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn numel(&self) -> usize {
        self.mlp.numel() + 2 * self.kernel * self.kernel + self.mlp.bias as usize
    }

    /// `A_c`: one gate per channel, shaped `C` or `N×C`.
    pub fn channel_attention<'t, T: Real>(&self, p: &Bound<'t, '_, T>, f: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = f.shape();
        let ax = channel_axis("channel_attention", &shape)?;
        if shape[ax] != self.channels {
            return Err(Error::dim(
                "channel_attention",
                format!("input has {} channels, block expects {}", shape[ax], self.channels),
            ));
        }
        let (avg, lifted) = as_rows(f.pool(PoolMode::GlobalAvg)?)?;
        let (max, _) = as_rows(f.pool(PoolMode::GlobalMax)?)?;
        let logits = self.mlp.forward(p, avg)?.add(&self.mlp.forward(p, max)?)?;
        unrow(logits.sigmoid()?, lifted)
    }

    /// `A_s`: one gate per position, shaped `1×H×W` or `N×1×H×W`.
    pub fn spatial_attention<'t, T: Real>(&self, p: &Bound<'t, '_, T>, fi: Var<'t, T>) -> Result<Var<'t, T>> {
        let ax = channel_axis("spatial_attention", &fi.shape())?;
        let pooled = concat(&[fi.pool(PoolMode::ChannelAvg)?, fi.pool(PoolMode::ChannelMax)?], ax)?;
        let (conv, conv_b) = self.conv_names();
        pooled
            .conv2d(&p.var(&conv)?, p.opt_var(&conv_b).as_ref(), ConvSpec::same(self.kernel))?
            .sigmoid()
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, '_, T>, f: Var<'t, T>) -> Result<SpecificMaps<'t, T>> {
        let channel_gate = self.channel_attention(p, f)?;
        let fi = apply_channel(channel_gate, f)?;
        let spatial_gate = self.spatial_attention(p, fi)?;
        let output = spatial_gate.mul(&fi)?;
        Ok(SpecificMaps {
            channel_gate,
            spatial_gate,
            output,
        })
    }
}

/// `F_i = A_c ⊗ F` with the channel gate broadcast over `H×W`.
pub fn apply_channel<'t, T: Real>(gate: Var<'t, T>, f: Var<'t, T>) -> Result<Var<'t, T>> {
    let (gs, fs) = (gate.shape(), f.shape());
    let ax = channel_axis("apply_channel", &fs)?;
    if gs[..] != fs[..=ax] {
        return Err(Error::dim(
            "apply_channel",
            format!("gate {gs:?} does not match feature map {fs:?}"),
        ));
    }
    f.mul(&gate)
}

/// Cross-branch gate computed from the source branch's pooled features.
#[derive(Clone, Debug)]
pub struct DependentAttention {
    dim: usize,
    reduction: usize,
    mlp: BottleneckMlp,
}

impl DependentAttention {
    /// `prefix` names the parameters, e.g. `dependent.dr2dme`.
    pub fn new(prefix: &str, dim: usize, reduction: usize, mlp_bias: bool) -> Result<Self> {
        if reduction == 0 || !dim.is_multiple_of(reduction) || dim / reduction == 0 {
            return Err(Error::Parameter(format!(
                "reduction {reduction} must divide feature dimension {dim}"
            )));
        }
        Ok(DependentAttention {
            dim,
            reduction,
            mlp: BottleneckMlp {
                prefix: prefix.to_string(),
                dim,
                hidden: dim / reduction,
                bias: mlp_bias,
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.dim / self.reduction
    }

    pub fn init<T: Real>(&self, params: &mut ParamSet<T>, rng: &mut RngState) -> Result<()> {
        self.mlp.init(params, rng)
    }

    pub fn numel(&self) -> usize {
        self.mlp.numel()
    }

    /// Gate `A = σ(W1·ReLU(W0·g_src))`, same shape as `g_src`.
    pub fn gate<'t, T: Real>(&self, p: &Bound<'t, '_, T>, g_src: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = g_src.shape();
        if s.last() != Some(&self.dim) || s.len() > 2 {
            return Err(Error::dim(
                "dependent_attention",
                format!("features {s:?} do not match block dimension {}", self.dim),
            ));
        }
        let (x, lifted) = as_rows(g_src)?;
        unrow(self.mlp.forward(p, x)?.sigmoid()?, lifted)
    }
}

/// `G' = G_dst ⊕ A ⊗ G_src`.
pub fn dependent_fuse<'t, T: Real>(g_dst: Var<'t, T>, gate: Var<'t, T>, g_src: Var<'t, T>) -> Result<Var<'t, T>> {
    gated_fuse(&g_dst, &gate, &g_src)
}
