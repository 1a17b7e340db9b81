//! Adam, cosine learning-rate decay, augmentation and the epoch loop.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{GradingSample, Normalization};
use crate::error::{Error, Result};
use crate::metrics::{joint_accuracy, DiseaseMetrics, MetricsReport};
use crate::model::{joint_loss, save_checkpoint, softmax_rows, Manifest, Model};
use crate::params::ParamSet;
use crate::rng::{RngSnapshot, RngState};
use crate::tensor::{Real, Tensor};

/// Adam with bias-corrected moments and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ParamSet<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update `θ ← θ − lr·m̂/(√v̂ + eps)`. `grads` is aligned with the
    /// parameter order.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || params.len() != self.m.len() {
            return Err(Error::Usage(format!(
                "adam step with {} gradients for {} parameters ({} moment slots)",
                grads.len(),
                params.len(),
                self.m.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Usage(format!(
                    "gradient for `{name}` has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let c1 = T::of(1.0 / (1.0 - self.beta1.powi(self.t as i32)));
        let c2 = T::of(1.0 / (1.0 - self.beta2.powi(self.t as i32)));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                *w -= lr * (m[j] * c1) / ((v[j] * c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `lr_base` at step 0 to 0 at `total_steps`. With a
/// restart period the schedule repeats every `period` steps instead.
pub fn cosine_lr(step: usize, total_steps: usize, lr_base: f64, restart_period: Option<usize>) -> f64 {
    let (s, t) = match restart_period {
        Some(p) if p > 0 => (step % p, p),
        _ => {
            if total_steps == 0 || step >= total_steps {
                return if total_steps == 0 { lr_base } else { 0.0 };
            }
            (step, total_steps)
        }
    };
    (lr_base * (1.0 + (PI * s as f64 / t as f64).cos()) / 2.0).max(0.0)
}

/// Bilinear sample of a `C×H×W` image onto an `oh×ow` grid. `map` turns an
/// output pixel into a source position in pixel-centre coordinates.
fn resample(img: &Tensor<f32>, oh: usize, ow: usize, map: impl Fn(usize, usize) -> (f64, f64)) -> Tensor<f32> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = img.data();
    let mut out = vec![0.0f32; c * oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let (sy, sx) = map(i, j);
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(ch * h + y) * w + x];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(ch * oh + i) * ow + j] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out).expect("resample shape")
}

fn image_hw(op: &'static str, img: &Tensor<f32>) -> Result<(usize, usize)> {
    match img.shape() {
        &[_, h, w] if h > 0 && w > 0 => Ok((h, w)),
        s => Err(Error::dim(op, format!("expected C×H×W, got {s:?}"))),
    }
}

/// Half-pixel-centred bilinear resize.
pub fn resize_bilinear(img: &Tensor<f32>, oh: usize, ow: usize) -> Result<Tensor<f32>> {
    let (h, w) = image_hw("resize", img)?;
    if (h, w) == (oh, ow) {
        return Ok(img.clone());
    }
    let (ry, rx) = (h as f64 / oh as f64, w as f64 / ow as f64);
    Ok(resample(img, oh, ow, |i, j| ((i as f64 + 0.5) * ry - 0.5, (j as f64 + 0.5) * rx - 0.5)))
}

pub fn center_crop(img: &Tensor<f32>, crop: usize) -> Result<Tensor<f32>> {
    let (h, w) = image_hw("center_crop", img)?;
    if crop > h || crop > w {
        return Err(Error::Parameter(format!("crop {crop} larger than image {h}×{w}")));
    }
    let (oy, ox) = ((h - crop) / 2, (w - crop) / 2);
    let c = img.shape()[0];
    let mut out = Vec::with_capacity(c * crop * crop);
    for ch in 0..c {
        for i in 0..crop {
            let start = (ch * h + oy + i) * w + ox;
            out.extend_from_slice(&img.data()[start..start + crop]);
        }
    }
    Tensor::new(vec![c, crop, crop], out)
}

/// Mirrors along the width (`horizontal`) and/or height (`vertical`).
pub fn flip(img: &Tensor<f32>, horizontal: bool, vertical: bool) -> Tensor<f32> {
    if !horizontal && !vertical {
        return img.clone();
    }
    let s = img.shape();
    let w = s[s.len() - 1];
    let h = s[s.len() - 2];
    let mut out = img.clone();
    for (src, dst) in img.data().chunks(h * w).zip(out.data_mut().chunks_mut(h * w)) {
        for i in 0..h {
            let si = if vertical { h - 1 - i } else { i };
            let row = &src[si * w..(si + 1) * w];
            let d = &mut dst[i * w..(i + 1) * w];
            d.copy_from_slice(row);
            if horizontal {
                d.reverse();
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub resize_to: usize,
    pub crop_to: usize,
    pub seed: u64,
    pub lambda: f64,
    pub eval_every: usize,
    /// Cosine restart period in steps; `None` decays once over the run.
    pub restart_period: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Range of the random area scale before cropping.
    pub scale_range: [f64; 2],
    pub augment: bool,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            lr: 3e-4,
            resize_to: 72,
            crop_to: 64,
            seed: 0,
            lambda: 0.25,
            eval_every: 1,
            restart_period: None,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            scale_range: [0.8, 1.0],
            augment: true,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.crop_to == 0 || self.crop_to > self.resize_to {
            return bad(format!("need 0 < crop_to <= resize_to, got {} and {}", self.crop_to, self.resize_to));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be >= 0", self.lambda));
        }
        let [lo, hi] = self.scale_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return bad(format!("scale_range {:?} must satisfy 0 < lo <= hi <= 1", self.scale_range));
        }
        if self.augment && ((self.resize_to as f64 * lo.sqrt()).round() as usize) < self.crop_to {
            return bad(format!(
                "resize_to {} scaled by area {lo} is smaller than crop_to {}",
                self.resize_to, self.crop_to
            ));
        }
        Ok(())
    }
}

/// Random area scale in `scale_range`, random `crop_to` crop, then
/// independent horizontal and vertical flips with probability 0.5.
pub fn augment(img: &Tensor<f32>, rng: &mut RngState, cfg: &TrainConfig) -> Result<Tensor<f32>> {
    let (h, w) = image_hw("augment", img)?;
    let area = rng.uniform_in(cfg.scale_range[0], cfg.scale_range[1]);
    let f = area.sqrt();
    let (sh, sw) = ((h as f64 * f).round() as usize, (w as f64 * f).round() as usize);
    let crop = cfg.crop_to;
    if crop > sh || crop > sw {
        return Err(Error::Parameter(format!(
            "crop {crop} larger than the scaled image {sh}×{sw}"
        )));
    }
    let oy = rng.below(sh - crop + 1);
    let ox = rng.below(sw - crop + 1);
    let (ry, rx) = (h as f64 / sh as f64, w as f64 / sw as f64);
    let out = resample(img, crop, crop, |i, j| {
        (((oy + i) as f64 + 0.5) * ry - 0.5, ((ox + j) as f64 + 0.5) * rx - 0.5)
    });
    Ok(flip(&out, rng.bernoulli(0.5), rng.bernoulli(0.5)))
}

/// Images resized to `resize_to` and normalized, with their labels.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub ids: Vec<String>,
    pub images: Vec<Tensor<f32>>,
    pub labels_a: Vec<usize>,
    pub labels_b: Vec<usize>,
}

impl Prepared {
    pub fn new(samples: &[GradingSample], norm: &Normalization, resize_to: usize) -> Result<Self> {
        let mut p = Prepared {
            ids: Vec::with_capacity(samples.len()),
            images: Vec::with_capacity(samples.len()),
            labels_a: Vec::with_capacity(samples.len()),
            labels_b: Vec::with_capacity(samples.len()),
        };
        for s in samples {
            p.ids.push(s.id.clone());
            p.images.push(norm.apply(&resize_bilinear(&s.image, resize_to, resize_to)?));
            p.labels_a.push(s.grade_a);
            p.labels_b.push(s.grade_b);
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Subset in the order of `idx`.
    pub fn select(&self, idx: &[usize]) -> Prepared {
        Prepared {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels_a: idx.iter().map(|&i| self.labels_a[i]).collect(),
            labels_b: idx.iter().map(|&i| self.labels_b[i]).collect(),
        }
    }
}

/// Stacks equally shaped `C×H×W` images into `N×C×H×W`.
pub fn stack(images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Usage("cannot stack an empty batch".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.numel() * images.len());
    for img in images {
        if img.shape() != shape {
            return Err(Error::dim("stack", format!("{:?} vs {:?}", img.shape(), shape)));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::new(full, data)
}

/// Per-head predictions with row-major `N×K` softmax scores.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Predictions {
    pub a: Option<(Vec<usize>, Vec<f64>)>,
    pub b: Option<(Vec<usize>, Vec<f64>)>,
}

/// Forward passes in evaluation mode over already cropped images.
pub fn predict<T: Real>(model: &Model, params: &ParamSet<T>, images: &[Tensor<f32>], batch: usize) -> Result<Predictions> {
    let mut out = Predictions {
        a: model.variant().has_a().then(Default::default),
        b: model.variant().has_b().then(Default::default),
    };
    for chunk in images.chunks(batch.max(1)) {
        let tape = Tape::<T>::new();
        let p = params.bind(&tape)?;
        let x = tape.constant(stack(chunk)?.cast())?;
        let o = model.forward(&p, x, None)?;
        for (logits, slot) in [(o.logits_a, &mut out.a), (o.logits_b, &mut out.b)] {
            if let (Some(l), Some((preds, probs))) = (logits, slot.as_mut()) {
                let l = l.value();
                preds.extend(crate::model::argmax_rows(&l));
                probs.extend(softmax_rows(&l).to_f64_vec());
            }
        }
    }
    Ok(out)
}

/// Metrics of `model` on `data` under the deterministic eval transform.
pub fn evaluate<T: Real>(
    model: &Model,
    params: &ParamSet<T>,
    data: &Prepared,
    crop_to: usize,
    batch: usize,
) -> Result<(MetricsReport, Predictions)> {
    let images = data
        .images
        .iter()
        .map(|im| center_crop(im, crop_to))
        .collect::<Result<Vec<_>>>()?;
    let pred = predict(model, params, &images, batch)?;
    let (ka, kb) = (model.spec().model.num_classes_a, model.spec().model.num_classes_b);
    let a = pred
        .a
        .as_ref()
        .map(|(p, s)| DiseaseMetrics::compute(p, s, &data.labels_a, ka))
        .transpose()?;
    let b = pred
        .b
        .as_ref()
        .map(|(p, s)| DiseaseMetrics::compute(p, s, &data.labels_b, kb))
        .transpose()?;
    let joint_accuracy = match (&pred.a, &pred.b) {
        (Some((pa, _)), Some((pb, _))) => {
            let p: Vec<_> = pa.iter().copied().zip(pb.iter().copied()).collect();
            let l: Vec<_> = data.labels_a.iter().copied().zip(data.labels_b.iter().copied()).collect();
            Some(joint_accuracy(&p, &l)?)
        }
        _ => None,
    };
    Ok((
        MetricsReport {
            n: data.len(),
            joint_accuracy,
            a,
            b,
        },
        pred,
    ))
}

/// Score used to pick the best checkpoint: Joint Ac when both diseases are
/// predicted, otherwise the accuracy of the single head.
pub fn selection_score(r: &MetricsReport) -> f64 {
    r.joint_accuracy
        .or_else(|| r.a.as_ref().map(|m| m.accuracy))
        .or_else(|| r.b.as_ref().map(|m| m.accuracy))
        .unwrap_or(f64::NAN)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_joint_ac: Option<f64>,
    pub eval_ac_a: Option<f64>,
    pub eval_ac_b: Option<f64>,
}

pub const HISTORY_HEADER: &str = "epoch,step,lr,train_loss,eval_joint_ac,eval_ac_a,eval_ac_b";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.step,
            r.lr,
            r.train_loss,
            o(r.eval_joint_ac),
            o(r.eval_ac_a),
            o(r.eval_ac_b)
        );
    }
    s
}

/// Where the loop writes `history.csv` and the `best/` checkpoint.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub dir: PathBuf,
    /// Template for checkpoint manifests; epoch, step, rng and metrics are
    /// filled in at save time.
    pub manifest: Manifest,
}

impl RunDir {
    pub fn history_path(&self) -> PathBuf {
        self.dir.join("history.csv")
    }

    pub fn best_dir(&self) -> PathBuf {
        self.dir.join("best")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: ParamSet<f32>,
    pub last: ParamSet<f32>,
    pub best_epoch: usize,
    pub best_report: Option<MetricsReport>,
    pub history: Vec<HistoryRow>,
    pub steps: usize,
    pub rng: RngSnapshot,
}

fn batches_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Total optimizer steps the run will take.
pub fn total_steps(n: usize, cfg: &TrainConfig) -> usize {
    let all = cfg.epochs * batches_per_epoch(n, cfg.batch_size);
    cfg.max_steps.map_or(all, |m| m.min(all))
}

fn diverged(epoch: usize, batch: usize, ids: &[&str], detail: impl Into<String>) -> Error {
    let shown: Vec<&str> = ids.iter().take(4).copied().collect();
    let more = if ids.len() > 4 { ", ..." } else { "" };
    Error::Diverged {
        at: format!("epoch {epoch} batch {batch} (samples {}{more})", shown.join(", ")),
        detail: detail.into(),
    }
}

/// One optimizer step on a prepared batch. Returns the loss.
pub fn train_step(
    model: &Model,
    params: &mut ParamSet<f32>,
    adam: &mut Adam<f32>,
    x: Tensor<f32>,
    labels_a: &[usize],
    labels_b: &[usize],
    lambda: f64,
    lr: f64,
    dropout_rng: Option<&mut RngState>,
) -> Result<f64> {
    let grads = {
        let tape = Tape::<f32>::new();
        let p = params.bind(&tape)?;
        let x = tape.constant(x)?;
        let out = model.forward(&p, x, dropout_rng)?;
        let loss = joint_loss(&out, labels_a, labels_b, lambda)?;
        let value = loss.value().item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "loss".into() });
        }
        let mut g = tape.backward(loss)?;
        (p.gradients(&mut g), value)
    };
    let (grads, value) = grads;
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Usage(format!(
            "non-finite gradient for `{}`",
            params.names()[i]
        )));
    }
    adam.step(params, &grads, lr)?;
    Ok(value)
}

/// Trains from `init`. Each epoch shuffles the
/// training set with its own stream; each sample's augmentation stream is
/// split off by sample index. The best checkpoint by [`selection_score`] on
/// `eval` (or on `train` when `eval` is `None`) is kept.
pub fn train(
    model: &Model,
    init: ParamSet<f32>,
    train: &Prepared,
    eval: Option<&Prepared>,
    cfg: &TrainConfig,
    run: Option<&RunDir>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if let Some(r) = run {
        std::fs::create_dir_all(&r.dir).map_err(|e| Error::io(&r.dir, e))?;
    }
    let root = RngState::new(cfg.seed);
    let total = total_steps(train.len(), cfg);
    let mut params = init;
    let mut adam = Adam::with_betas(&params, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut best: Option<(f64, usize, ParamSet<f32>, MetricsReport)> = None;
    let mut history = Vec::new();
    let mut step = 0usize;
    let mut last_rng = root.snapshot();

    'epochs: for epoch in 0..cfg.epochs {
        if step >= total {
            break;
        }
        let ep = root.split(epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        ep.split(0).shuffle(&mut order);
        let aug = ep.split(1);
        let drop = ep.split(2);
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        let mut lr = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let images = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        augment(&train.images[i], &mut aug.split(i as u64), cfg)
                    } else {
                        center_crop(&train.images[i], cfg.crop_to)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let la: Vec<usize> = chunk.iter().map(|&i| train.labels_a[i]).collect();
            let lb: Vec<usize> = chunk.iter().map(|&i| train.labels_b[i]).collect();
            lr = cosine_lr(step, total, cfg.lr, cfg.restart_period);
            let mut drng = drop.split(bi as u64);
            let ids: Vec<&str> = chunk.iter().map(|&i| train.ids[i].as_str()).collect();
            let loss = train_step(model, &mut params, &mut adam, stack(&images)?, &la, &lb, cfg.lambda, lr, Some(&mut drng))
                .map_err(|e| match e {
                    Error::NonFinite { op } => diverged(epoch, bi, &ids, format!("non-finite value in {op}")),
                    Error::Usage(m) if m.starts_with("non-finite gradient") => diverged(epoch, bi, &ids, m),
                    e => e,
                })?;
            last_rng = drng.snapshot();
            loss_sum += loss * chunk.len() as f64;
            loss_n += chunk.len();
            step += 1;
            if step >= total {
                let row = finish_epoch(model, &params, train, eval, cfg, epoch, step, lr, loss_sum / loss_n as f64, true, &mut best)?;
                history.push(row);
                write_progress(run, &history, &best, step, &last_rng)?;
                break 'epochs;
            }
        }
        let due = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let row = finish_epoch(model, &params, train, eval, cfg, epoch, step, lr, loss_sum / loss_n as f64, due, &mut best)?;
        history.push(row);
        write_progress(run, &history, &best, step, &last_rng)?;
    }

    let (best_params, best_epoch, best_report) = match best {
        Some((_, e, p, r)) => (p, e, Some(r)),
        None => (params.clone(), cfg.epochs.saturating_sub(1), None),
    };
    Ok(TrainOutcome {
        best: best_params,
        last: params,
        best_epoch,
        best_report,
        history,
        steps: step,
        rng: last_rng,
    })
}

#[allow(clippy::too_many_arguments)]
fn finish_epoch(
    model: &Model,
    params: &ParamSet<f32>,
    train: &Prepared,
    eval: Option<&Prepared>,
    cfg: &TrainConfig,
    epoch: usize,
    step: usize,
    lr: f64,
    train_loss: f64,
    evaluate_now: bool,
    best: &mut Option<(f64, usize, ParamSet<f32>, MetricsReport)>,
) -> Result<HistoryRow> {
    let mut row = HistoryRow {
        epoch,
        step,
        lr,
        train_loss,
        eval_joint_ac: None,
        eval_ac_a: None,
        eval_ac_b: None,
    };
    if evaluate_now {
        let (report, _) = evaluate(model, params, eval.unwrap_or(train), cfg.crop_to, cfg.batch_size.max(32))?;
        row.eval_joint_ac = report.joint_accuracy;
        row.eval_ac_a = report.a.as_ref().map(|m| m.accuracy);
        row.eval_ac_b = report.b.as_ref().map(|m| m.accuracy);
        let score = selection_score(&report);
        if best.as_ref().is_none_or(|(s, ..)| score > *s) {
            *best = Some((score, epoch, params.clone(), report));
        }
    }
    Ok(row)
}

fn write_progress(
    run: Option<&RunDir>,
    history: &[HistoryRow],
    best: &Option<(f64, usize, ParamSet<f32>, MetricsReport)>,
    step: usize,
    rng: &RngSnapshot,
) -> Result<()> {
    let Some(run) = run else { return Ok(()) };
    let path = run.history_path();
    std::fs::write(&path, history_csv(history)).map_err(|e| Error::io(&path, e))?;
    if let Some((_, epoch, params, report)) = best {
        if history.last().map(|r| r.epoch) == Some(*epoch) {
            let dir = run.best_dir();
            let mut m = run.manifest.clone();
            m.epoch = *epoch;
            m.step = step;
            m.rng = Some(*rng);
            m.metrics = Some(serde_json::to_value(report)?);
            save_checkpoint(&dir, &m, params)?;
        }
    }
    Ok(())
}
