use crate::error::{Error, Result};
use crate::tensor::{image_dims, Real, Tensor};

/// Pooling reductions over a `C×H×W` (or batched `N×C×H×W`) feature map.
///
/// Max modes route the gradient to the first maximal element in scan
/// order; average modes spread it uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    /// Non-overlapping `kh×kw` windows, stride equal to the window.
    SpatialMax { window: (usize, usize) },
    SpatialAvg { window: (usize, usize) },
    /// `C×H×W → C`.
    GlobalMax,
    GlobalAvg,
    /// `C×H×W → 1×H×W`.
    ChannelMax,
    ChannelAvg,
}

impl PoolMode {
    pub fn name(&self) -> &'static str {
        match self {
            PoolMode::SpatialMax { .. } => "spatial_max",
            PoolMode::SpatialAvg { .. } => "spatial_avg",
            PoolMode::GlobalMax => "global_max",
            PoolMode::GlobalAvg => "global_avg",
            PoolMode::ChannelMax => "channel_max",
            PoolMode::ChannelAvg => "channel_avg",
        }
    }

    fn is_max(&self) -> bool {
        matches!(
            self,
            PoolMode::SpatialMax { .. } | PoolMode::GlobalMax | PoolMode::ChannelMax
        )
    }
}

/// For each output element, the flat input indices it reduces over.
fn windows(mode: PoolMode, shape: &[usize]) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
    let batched = shape.len() == 4;
    let (n, c, h, w) = image_dims(mode.name(), shape)?;
    let at = |s: usize, ch: usize, y: usize, x: usize| ((s * c + ch) * h + y) * w + x;
    let lead = |rest: &[usize]| {
        let mut v = if batched { vec![n] } else { Vec::new() };
        v.extend_from_slice(rest);
        v
    };
    let mut groups = Vec::new();
    let out_shape = match mode {
        PoolMode::GlobalMax | PoolMode::GlobalAvg => {
            for s in 0..n {
                for ch in 0..c {
                    groups.push((0..h * w).map(|p| at(s, ch, 0, 0) + p).collect());
                }
            }
            lead(&[c])
        }
        PoolMode::ChannelMax | PoolMode::ChannelAvg => {
            for s in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        groups.push((0..c).map(|ch| at(s, ch, y, x)).collect());
                    }
                }
            }
            lead(&[1, h, w])
        }
        PoolMode::SpatialMax { window: (kh, kw) } | PoolMode::SpatialAvg { window: (kh, kw) } => {
            if kh == 0 || kw == 0 || kh > h || kw > w {
                return Err(Error::dim(
                    mode.name(),
                    format!("window {kh}×{kw} does not fit input {h}×{w}"),
                ));
            }
            let (ho, wo) = (h / kh, w / kw);
            for s in 0..n {
                for ch in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut g = Vec::with_capacity(kh * kw);
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    g.push(at(s, ch, oy * kh + dy, ox * kw + dx));
                                }
                            }
                            groups.push(g);
                        }
                    }
                }
            }
            lead(&[c, ho, wo])
        }
    };
    Ok((out_shape, groups))
}

pub(crate) fn forward<T: Real>(x: &Tensor<T>, mode: PoolMode) -> Result<(Tensor<T>, Vec<usize>)> {
    let (shape, groups) = windows(mode, x.shape())?;
    let d = x.data();
    let mut out = Vec::with_capacity(groups.len());
    let mut argmax = Vec::new();
    if mode.is_max() {
        argmax.reserve(groups.len());
        for g in &groups {
            let mut best = g[0];
            for &i in &g[1..] {
                if d[i] > d[best] {
                    best = i;
                }
            }
            out.push(d[best]);
            argmax.push(best);
        }
    } else {
        for g in &groups {
            let s: T = g.iter().map(|&i| d[i]).sum();
            out.push(s / T::of(g.len() as f64));
        }
    }
    Ok((Tensor::from_parts(shape, out), argmax))
}

pub(crate) fn backward<T: Real>(
    g: &Tensor<T>,
    input_shape: &[usize],
    mode: PoolMode,
    argmax: &[usize],
) -> Result<Tensor<T>> {
    let n: usize = input_shape.iter().product();
    let mut dx = vec![T::zero(); n];
    if mode.is_max() {
        for (&i, &gv) in argmax.iter().zip(g.data()) {
            dx[i] += gv;
        }
    } else {
        let (_, groups) = windows(mode, input_shape)?;
        for (grp, &gv) in groups.iter().zip(g.data()) {
            let share = gv / T::of(grp.len() as f64);
            for &i in grp {
                dx[i] += share;
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), dx))
}
