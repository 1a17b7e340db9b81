//! Backbone, attention stack, classification heads and the joint loss.
//!
//! ```text
//! x ─ backbone ─ dropout ─┬─ specific.dr ─ pool+FC ─ G_a ──┬─ head.dr.specific
//!                         │                                ├─ (+ A_dme2dr ⊗ G_b) ─ G'_a ─ head.dr.refined
//!                         └─ specific.dme ─ pool+FC ─ G_b ─┼─ head.dme.specific
//!                                                          └─ (+ A_dr2dme ⊗ G_a) ─ G'_b ─ head.dme.refined
//! ```
//!
//! Disease A is DR, disease B is DME. The baselines drop the attention
//! stack and classify the pooled backbone features directly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{dependent_fuse, DependentAttention, SpecificAttention};
use crate::autodiff::{ConvSpec, PoolMode, Var};
use crate::error::{Error, Result};
use crate::params::{kaiming_uniform, Bound, ParamSet};
use crate::rng::{RngSnapshot, RngState};
use crate::tensor::{Real, Tensor};

/// Strided 3×3 conv + ReLU stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            widths: vec![32, 64, 96, 128],
            strides: vec![2, 2, 2, 2],
            kernel: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "backbone needs one stride per stage, got {} widths and {} strides",
                self.widths.len(),
                self.strides.len()
            )));
        }
        if self.widths.contains(&0) || self.strides.contains(&0) {
            return Err(Error::Config("backbone widths and strides must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("backbone kernel {} must be odd", self.kernel)));
        }
        Ok(())
    }

    /// Output channel count `C`.
    pub fn channels(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    /// Spatial size of the deepest feature map for an `h×w` input.
    pub fn feature_size(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.kernel / 2;
        self.strides.iter().fold((h, w), |(h, w), &s| {
            let step = |e: usize| (e + 2 * pad).saturating_sub(self.kernel) / s + 1;
            (step(h), step(w))
        })
    }

    /// Smallest square input side giving at least a 2×2 feature map.
    pub fn min_input(&self) -> usize {
        (1..).find(|&s| self.feature_size(s, s).0 >= 2).unwrap()
    }
}

/// Which network is built. The first three are the comparison rows of the
/// ablation; `Canet` with both flags off is the "specific attention only"
/// row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Variant {
    IndividualA,
    IndividualB,
    JointBaseline,
    Canet { dep_a_to_b: bool, dep_b_to_a: bool },
}

impl Variant {
    pub const FULL: Variant = Variant::Canet {
        dep_a_to_b: true,
        dep_b_to_a: true,
    };
    pub const SPECIFIC_ONLY: Variant = Variant::Canet {
        dep_a_to_b: false,
        dep_b_to_a: false,
    };

    pub fn has_a(&self) -> bool {
        !matches!(self, Variant::IndividualB)
    }

    pub fn has_b(&self) -> bool {
        !matches!(self, Variant::IndividualA)
    }

    pub fn label(&self) -> &'static str {
        match self {
            Variant::IndividualA => "individual_a",
            Variant::IndividualB => "individual_b",
            Variant::JointBaseline => "joint_baseline",
            Variant::Canet {
                dep_a_to_b: false,
                dep_b_to_a: false,
            } => "canet_ds",
            Variant::Canet {
                dep_a_to_b: true,
                dep_b_to_a: false,
            } => "canet_ds_a2b",
            Variant::Canet {
                dep_a_to_b: false,
                dep_b_to_a: true,
            } => "canet_ds_b2a",
            Variant::Canet { .. } => "canet",
        }
    }
}

/// Ablation switches as they appear in a run config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub individual_a: bool,
    pub individual_b: bool,
    pub joint_baseline: bool,
    pub d_specific: bool,
    pub dep_a_to_b: bool,
    pub dep_b_to_a: bool,
}

impl AblationFlags {
    pub fn from_variant(v: Variant) -> Self {
        let mut f = AblationFlags::default();
        match v {
            Variant::IndividualA => f.individual_a = true,
            Variant::IndividualB => f.individual_b = true,
            Variant::JointBaseline => f.joint_baseline = true,
            Variant::Canet { dep_a_to_b, dep_b_to_a } => {
                f.d_specific = true;
                f.dep_a_to_b = dep_a_to_b;
                f.dep_b_to_a = dep_b_to_a;
            }
        }
        f
    }

    /// Resolves the flags to one network; all-false means the full network.
    pub fn variant(&self) -> Result<Variant> {
        let modes = [self.individual_a, self.individual_b, self.joint_baseline, self.d_specific]
            .iter()
            .filter(|&&b| b)
            .count();
        let deps = self.dep_a_to_b || self.dep_b_to_a;
        if modes > 1 {
            return Err(Error::Usage(
                "at most one of individual_a, individual_b, joint_baseline, d_specific may be set".into(),
            ));
        }
        if deps && !self.d_specific && modes == 1 {
            return Err(Error::Usage("dependent attention requires d_specific".into()));
        }
        Ok(if self.individual_a {
            Variant::IndividualA
        } else if self.individual_b {
            Variant::IndividualB
        } else if self.joint_baseline {
            Variant::JointBaseline
        } else if self.d_specific {
            Variant::Canet {
                dep_a_to_b: self.dep_a_to_b,
                dep_b_to_a: self.dep_b_to_a,
            }
        } else if deps {
            return Err(Error::Usage("dependent attention requires d_specific".into()));
        } else {
            Variant::FULL
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_classes_a: usize,
    pub num_classes_b: usize,
    /// Projected feature dimension `D`.
    pub proj_dim: usize,
    pub dropout: f64,
    pub reduction: usize,
    pub spatial_kernel: usize,
    /// Bias terms on the attention FC layers and the spatial conv.
    pub attention_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes_a: 2,
            num_classes_b: 3,
            proj_dim: 1024,
            dropout: 0.3,
            reduction: 16,
            spatial_kernel: 7,
            attention_bias: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes_a < 2 || self.num_classes_b < 2 {
            return Err(Error::Config("each disease needs at least 2 classes".into()));
        }
        if self.proj_dim == 0 {
            return Err(Error::Config("proj_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub model: ModelConfig,
    pub backbone: BackboneConfig,
    pub variant: Variant,
}

/// Intermediate tensors of the attention stack.
pub struct AttentionMaps<'t, T: Real> {
    pub channel_a: Var<'t, T>,
    pub spatial_a: Var<'t, T>,
    pub channel_b: Var<'t, T>,
    pub spatial_b: Var<'t, T>,
    pub g_a: Var<'t, T>,
    pub g_b: Var<'t, T>,
    pub gate_a_to_b: Option<Var<'t, T>>,
    pub gate_b_to_a: Option<Var<'t, T>>,
    pub g_a_refined: Var<'t, T>,
    pub g_b_refined: Var<'t, T>,
}

/// Head outputs. `logits_*` are the prediction heads (refined heads for
/// CANet); `specific_*` exist only for CANet.
pub struct Output<'t, T: Real> {
    pub logits_a: Option<Var<'t, T>>,
    pub logits_b: Option<Var<'t, T>>,
    pub specific_a: Option<Var<'t, T>>,
    pub specific_b: Option<Var<'t, T>>,
    pub maps: Option<AttentionMaps<'t, T>>,
}

/// Per-module scalar parameter counts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub backbone: usize,
    pub specific: usize,
    pub project: usize,
    pub dependent: usize,
    pub heads: usize,
}

impl ParamCount {
    pub fn attention(&self) -> usize {
        self.specific + self.dependent
    }

    pub fn total(&self) -> usize {
        self.backbone + self.specific + self.project + self.dependent + self.heads
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: NetworkSpec,
    specific: Option<[SpecificAttention; 2]>,
    a_to_b: Option<DependentAttention>,
    b_to_a: Option<DependentAttention>,
}

const DISEASE: [&str; 2] = ["dr", "dme"];

impl Model {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.model.validate()?;
        spec.backbone.validate()?;
        let m = &spec.model;
        let c = spec.backbone.channels();
        let (specific, a_to_b, b_to_a) = match spec.variant {
            Variant::Canet { dep_a_to_b, dep_b_to_a } => {
                let blk = |d: &str| {
                    SpecificAttention::new(
                        &format!("specific.{d}"),
                        c,
                        m.reduction,
                        m.spatial_kernel,
                        m.attention_bias,
                    )
                };
                let dep = |name: &str, on: bool| -> Result<Option<DependentAttention>> {
                    on.then(|| DependentAttention::new(name, m.proj_dim, m.reduction, m.attention_bias))
                        .transpose()
                };
                (
                    Some([blk("dr")?, blk("dme")?]),
                    dep("dependent.dr2dme", dep_a_to_b)?,
                    dep("dependent.dme2dr", dep_b_to_a)?,
                )
            }
            _ => (None, None, None),
        };
        Ok(Model {
            spec,
            specific,
            a_to_b,
            b_to_a,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn variant(&self) -> Variant {
        self.spec.variant
    }

    fn classes(&self) -> [usize; 2] {
        [self.spec.model.num_classes_a, self.spec.model.num_classes_b]
    }

    fn heads_present(&self) -> [bool; 2] {
        [self.spec.variant.has_a(), self.spec.variant.has_b()]
    }

    /// Fresh Kaiming-uniform parameters with zero biases.
    pub fn init<T: Real>(&self, rng: &mut RngState) -> Result<ParamSet<T>> {
        let mut p = ParamSet::new();
        let bb = &self.spec.backbone;
        let k = bb.kernel;
        let mut cin = 3;
        for (i, &w) in bb.widths.iter().enumerate() {
            p.insert(format!("backbone.conv{i}.w"), kaiming_uniform(&[w, cin, k, k], cin * k * k, rng))?;
            p.insert(format!("backbone.conv{i}.b"), Tensor::zeros(vec![w]))?;
            cin = w;
        }
        let c = bb.channels();
        let d = self.spec.model.proj_dim;
        let classes = self.classes();
        match &self.specific {
            Some(blocks) => {
                for blk in blocks {
                    blk.init(&mut p, rng)?;
                }
                for name in DISEASE {
                    p.insert(format!("project.{name}.w"), kaiming_uniform(&[d, c], c, rng))?;
                    p.insert(format!("project.{name}.b"), Tensor::zeros(vec![d]))?;
                }
                for dep in self.a_to_b.iter().chain(&self.b_to_a) {
                    dep.init(&mut p, rng)?;
                }
                for (name, k) in DISEASE.iter().zip(classes) {
                    for kind in ["refined", "specific"] {
                        p.insert(format!("head.{name}.{kind}.w"), kaiming_uniform(&[k, d], d, rng))?;
                        p.insert(format!("head.{name}.{kind}.b"), Tensor::zeros(vec![k]))?;
                    }
                }
            }
            None => {
                for ((name, k), on) in DISEASE.iter().zip(classes).zip(self.heads_present()) {
                    if on {
                        p.insert(format!("head.{name}.w"), kaiming_uniform(&[k, c], c, rng))?;
                        p.insert(format!("head.{name}.b"), Tensor::zeros(vec![k]))?;
                    }
                }
            }
        }
        Ok(p)
    }

    /// Closed-form parameter counts, without allocating anything.
    pub fn param_count(&self) -> ParamCount {
        let bb = &self.spec.backbone;
        let k2 = bb.kernel * bb.kernel;
        let mut cin = 3;
        let mut pc = ParamCount::default();
        for &w in &bb.widths {
            pc.backbone += w * cin * k2 + w;
            cin = w;
        }
        let c = bb.channels();
        let d = self.spec.model.proj_dim;
        let [ka, kb] = self.classes();
        match &self.specific {
            Some(blocks) => {
                pc.specific = blocks.iter().map(SpecificAttention::numel).sum();
                pc.project = 2 * (d * c + d);
                pc.dependent = self.a_to_b.iter().chain(&self.b_to_a).map(|b| b.numel()).sum();
                pc.heads = 2 * ((ka + kb) * d + ka + kb);
            }
            None => {
                let [a, b] = self.heads_present();
                pc.heads = (a as usize) * (ka * c + ka) + (b as usize) * (kb * c + kb);
            }
        }
        pc
    }

    /// `N×3×H×W` → `N×C×h×w`.
    pub fn backbone<'t, T: Real>(&self, p: &Bound<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        let bb = &self.spec.backbone;
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::dim("backbone", format!("expected N×3×H×W, got {s:?}")));
        }
        let (fh, fw) = bb.feature_size(s[2], s[3]);
        if fh < 2 || fw < 2 {
            return Err(Error::dim(
                "backbone",
                format!(
                    "input {}×{} is too small, need at least {m}×{m}",
                    s[2],
                    s[3],
                    m = bb.min_input()
                ),
            ));
        }
        let mut h = x;
        for (i, &stride) in bb.strides.iter().enumerate() {
            let w = p.var(&format!("backbone.conv{i}.w"))?;
            let b = p.var(&format!("backbone.conv{i}.b"))?;
            h = h.conv2d(&w, Some(&b), ConvSpec::new(stride, bb.kernel / 2))?.relu()?;
        }
        Ok(h)
    }

    /// Runs the network. `train` carries the dropout stream; `None` is
    /// evaluation mode.
    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, '_, T>,
        x: Var<'t, T>,
        train: Option<&mut RngState>,
    ) -> Result<Output<'t, T>> {
        let f = self.backbone(p, x)?;
        let f = match train {
            Some(rng) => f.dropout(self.spec.model.dropout, rng, true)?,
            None => f,
        };
        let Some([sa, sb]) = &self.specific else {
            let pooled = f.pool(PoolMode::GlobalAvg)?;
            let [a, b] = self.heads_present();
            let head = |name: &str| -> Result<Var<'t, T>> {
                pooled.linear(&p.var(&format!("head.{name}.w"))?, Some(&p.var(&format!("head.{name}.b"))?))
            };
            return Ok(Output {
                logits_a: a.then(|| head("dr")).transpose()?,
                logits_b: b.then(|| head("dme")).transpose()?,
                specific_a: None,
                specific_b: None,
                maps: None,
            });
        };
        let ma = sa.forward(p, f)?;
        let mb = sb.forward(p, f)?;
        let g_a = project_features(ma.output, p.var("project.dr.w")?, p.opt_var("project.dr.b"))?;
        let g_b = project_features(mb.output, p.var("project.dme.w")?, p.opt_var("project.dme.b"))?;
        let gate_a_to_b = self.a_to_b.as_ref().map(|d| d.gate(p, g_a)).transpose()?;
        let gate_b_to_a = self.b_to_a.as_ref().map(|d| d.gate(p, g_b)).transpose()?;
        let g_a_refined = match gate_b_to_a {
            Some(a) => dependent_fuse(g_a, a, g_b)?,
            None => g_a,
        };
        let g_b_refined = match gate_a_to_b {
            Some(a) => dependent_fuse(g_b, a, g_a)?,
            None => g_b,
        };
        let head = |name: &str, g: Var<'t, T>| -> Result<Var<'t, T>> {
            g.linear(&p.var(&format!("head.{name}.w"))?, Some(&p.var(&format!("head.{name}.b"))?))
        };
        Ok(Output {
            logits_a: Some(head("dr.refined", g_a_refined)?),
            logits_b: Some(head("dme.refined", g_b_refined)?),
            specific_a: Some(head("dr.specific", g_a)?),
            specific_b: Some(head("dme.specific", g_b)?),
            maps: Some(AttentionMaps {
                channel_a: ma.channel_gate,
                spatial_a: ma.spatial_gate,
                channel_b: mb.channel_gate,
                spatial_b: mb.spatial_gate,
                g_a,
                g_b,
                gate_a_to_b,
                gate_b_to_a,
                g_a_refined,
                g_b_refined,
            }),
        })
    }
}

/// `G = FC(global_avg_pool(F'))`: `N×C×H×W` → `N×D`.
pub fn project_features<'t, T: Real>(
    f_prime: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let pooled = f_prime.pool(PoolMode::GlobalAvg)?;
    let pooled = if pooled.shape().len() == 1 {
        let c = pooled.shape()[0];
        pooled.reshape(vec![1, c])?
    } else {
        pooled
    };
    pooled.linear(&weight, bias.as_ref())
}

/// `L = L_a + L_b + λ (L'_a + L'_b)`: cross-entropy of the prediction heads
/// plus λ times that of the disease-specific heads. Heads the variant does
/// not have contribute nothing.
pub fn joint_loss<'t, T: Real>(
    out: &Output<'t, T>,
    labels_a: &[usize],
    labels_b: &[usize],
    lambda: f64,
) -> Result<Var<'t, T>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Parameter(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let terms = [
        (out.logits_a, labels_a, 1.0),
        (out.logits_b, labels_b, 1.0),
        (out.specific_a, labels_a, lambda),
        (out.specific_b, labels_b, lambda),
    ];
    let mut total: Option<Var<'t, T>> = None;
    for (logits, labels, w) in terms {
        let Some(logits) = logits else { continue };
        let mut l = logits.softmax_cross_entropy(labels)?;
        if w != 1.0 {
            l = l.scale(w)?;
        }
        total = Some(match total {
            Some(t) => t.add(&l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::Usage("output has no heads".into()))
}

/// Row-wise argmax of `N×K` logits; ties go to the lowest class index.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[logits.ndim() - 1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Row-wise softmax of `N×K` logits.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.shape()[logits.ndim() - 1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

impl<T: Real> Output<'_, T> {
    /// Per-sample grades from the prediction heads.
    pub fn predict(&self) -> (Option<Vec<usize>>, Option<Vec<usize>>) {
        (
            self.logits_a.map(|v| argmax_rows(&v.value())),
            self.logits_b.map(|v| argmax_rows(&v.value())),
        )
    }
}

/// Checkpoint manifest stored next to the parameter tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub network: NetworkSpec,
    pub epoch: usize,
    pub step: usize,
    pub rng: Option<RngSnapshot>,
    /// Images are resized to `resize_to` and center-cropped to
    /// `input_size` before evaluation.
    pub resize_to: usize,
    pub input_size: usize,
    pub normalization: Option<crate::data::Normalization>,
    pub metrics: Option<serde_json::Value>,
    /// Free-form copy of the run configuration.
    pub config: Option<serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn new(network: NetworkSpec, resize_to: usize, input_size: usize) -> Self {
        Manifest {
            format_version: 1,
            network,
            resize_to,
            epoch: 0,
            step: 0,
            rng: None,
            input_size,
            normalization: None,
            metrics: None,
            config: None,
            tensors: Vec::new(),
        }
    }
}

/// Writes `manifest.json` and one CANT file per parameter into `dir`.
pub fn save_checkpoint<T: Real>(dir: &Path, manifest: &Manifest, params: &ParamSet<T>) -> Result<()> {
    params.save_dir(dir)?;
    let mut m = manifest.clone();
    m.tensors = params
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&m)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Rebuilds the model described by the manifest in `dir` and loads its
/// parameters.
pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<(Model, Manifest, ParamSet<T>)> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != 1 {
        return Err(Error::Config(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    let model = Model::new(manifest.network.clone())?;
    let mut params = model.init::<T>(&mut RngState::new(0))?;
    let expected: Vec<&str> = params.names().iter().map(String::as_str).collect();
    let listed: Vec<&str> = manifest.tensors.iter().map(|t| t.name.as_str()).collect();
    if expected != listed {
        return Err(Error::Config(format!(
            "checkpoint {} lists tensors that do not match its network",
            dir.display()
        )));
    }
    params.load_dir(dir)?;
    Ok((model, manifest, params))
}
