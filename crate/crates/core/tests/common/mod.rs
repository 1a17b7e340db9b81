//! Straight-line loop implementations of the network equations, used as
//! independent oracles for the vectorized code.
#![allow(dead_code)]

use canet::params::ParamSet;
use canet::rng::RngState;
use canet::tensor::Tensor;

pub fn randn(shape: &[usize], rng: &mut RngState) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.normal(0.0, 1.0))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Replaces every parameter with N(0, std²) noise so biases are exercised too.
pub fn randomize(params: &mut ParamSet<f64>, std: f64, rng: &mut RngState) {
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.normal(0.0, std);
        }
    }
}

pub fn zero_all(params: &mut ParamSet<f64>) {
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = 0.0;
        }
    }
}

/// `W1·ReLU(W0·x + b0) + b1`, weights row-major `[out, in]`.
pub fn mlp(p: &ParamSet<f64>, prefix: &str, x: &[f64]) -> Vec<f64> {
    let w0 = p.get(&format!("{prefix}.w0")).unwrap();
    let w1 = p.get(&format!("{prefix}.w1")).unwrap();
    let b0 = p.get(&format!("{prefix}.b0")).ok();
    let b1 = p.get(&format!("{prefix}.b1")).ok();
    let (hid, d) = (w0.shape()[0], w0.shape()[1]);
    let mut h = vec![0.0; hid];
    for j in 0..hid {
        let mut s = b0.map_or(0.0, |b| b.data()[j]);
        for i in 0..d {
            s += w0.get(&[j, i]) * x[i];
        }
        h[j] = s.max(0.0);
    }
    let out = w1.shape()[0];
    let mut y = vec![0.0; out];
    for o in 0..out {
        let mut s = b1.map_or(0.0, |b| b.data()[o]);
        for j in 0..hid {
            s += w1.get(&[o, j]) * h[j];
        }
        y[o] = s;
    }
    y
}

/// Channel gate from one `C×H×W` map.
pub fn channel_attention(p: &ParamSet<f64>, prefix: &str, f: &Tensor<f64>) -> Vec<f64> {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let mut avg = vec![0.0; c];
    let mut max = vec![f64::NEG_INFINITY; c];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = f.get(&[ch, y, x]);
                avg[ch] += v / (h * w) as f64;
                max[ch] = max[ch].max(v);
            }
        }
    }
    let a = mlp(p, prefix, &avg);
    let m = mlp(p, prefix, &max);
    a.iter().zip(&m).map(|(a, m)| sigmoid(a + m)).collect()
}

/// Spatial gate `H×W` from one `C×H×W` map.
pub fn spatial_attention(p: &ParamSet<f64>, prefix: &str, fi: &Tensor<f64>) -> Vec<f64> {
    let (c, h, w) = (fi.shape()[0], fi.shape()[1], fi.shape()[2]);
    let k = p.get(&format!("{prefix}.conv")).unwrap();
    let kb = p.get(&format!("{prefix}.conv_b")).map_or(0.0, |b| b.data()[0]);
    let ks = k.shape()[2];
    let pad = (ks / 2) as isize;
    let mut mean = vec![0.0; h * w];
    let mut max = vec![f64::NEG_INFINITY; h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = fi.get(&[ch, y, x]);
                mean[y * w + x] += v / c as f64;
                max[y * w + x] = max[y * w + x].max(v);
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = kb;
            for dy in 0..ks {
                for dx in 0..ks {
                    let iy = y as isize + dy as isize - pad;
                    let ix = x as isize + dx as isize - pad;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    let idx = iy as usize * w + ix as usize;
                    s += k.get(&[0, 0, dy, dx]) * mean[idx] + k.get(&[0, 1, dy, dx]) * max[idx];
                }
            }
            out[y * w + x] = sigmoid(s);
        }
    }
    out
}

/// Full disease-specific block on one `C×H×W` map.
pub fn specific_forward(p: &ParamSet<f64>, prefix: &str, f: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let ac = channel_attention(p, prefix, f);
    let fi = Tensor::from_fn(vec![c, h, w], |i| ac[i / (h * w)] * f.data()[i]);
    let as_ = spatial_attention(p, prefix, &fi);
    Tensor::from_fn(vec![c, h, w], |i| as_[i % (h * w)] * fi.data()[i])
}

pub fn dependent_gate(p: &ParamSet<f64>, prefix: &str, g: &[f64]) -> Vec<f64> {
    mlp(p, prefix, g).into_iter().map(sigmoid).collect()
}

pub fn fuse(dst: &[f64], gate: &[f64], src: &[f64]) -> Vec<f64> {
    (0..dst.len()).map(|i| dst[i] + gate[i] * src[i]).collect()
}

/// Mean cross-entropy over rows of `logits` (`N×M`).
pub fn cross_entropy(logits: &Tensor<f64>, labels: &[usize]) -> f64 {
    let (n, m) = (logits.shape()[0], logits.shape()[1]);
    let mut total = 0.0;
    for r in 0..n {
        let row: Vec<f64> = (0..m).map(|j| logits.get(&[r, j])).collect();
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[labels[r]];
    }
    total / n as f64
}
