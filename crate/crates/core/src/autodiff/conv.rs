//! Convolution by im2col + GEMM.
//!
//! The whole batch is unfolded into one `(C_in·kh·kw) × (N·H'·W')` column
//! matrix so the forward pass is a single matrix product with the flattened
//! kernel. The column matrix is kept for the kernel gradient.

use crate::error::{Error, Result};
use crate::tensor::{image_dims, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvSpec {
            stride: (stride, stride),
            padding: (padding, padding),
        }
    }

    /// Stride 1 with the padding that keeps `H×W` for an odd `kernel`.
    pub fn same(kernel: usize) -> Self {
        Self::new(1, kernel / 2)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

fn out_extent(op: &'static str, input: usize, pad: usize, k: usize, stride: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if k == 0 || k > padded {
        return Err(Error::dim(
            op,
            format!("kernel extent {k} does not fit padded input extent {padded}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

/// Output columns `lo..hi` whose input column `ow·stride + k − pad` lies
/// inside `0..w`.
fn valid_range(wo: usize, w: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride).min(wo);
    // Largest ow with ow·stride + k − pad ≤ w − 1.
    let hi = if w + pad > k { ((w + pad - k - 1) / stride + 1).min(wo) } else { 0 };
    (lo, hi.max(lo))
}

fn im2col<T: Real>(x: &[T], g: &Geometry) -> Vec<T> {
    let (ncols, plane) = (g.cols(), g.ho * g.wo);
    let (sh, sw) = g.spec.stride;
    let (ph, pw) = g.spec.padding;
    let mut cols = vec![T::zero(); g.rows() * ncols];
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_range(g.wo, g.w, sw, kj, pw);
                for n in 0..g.n {
                    let src = &x[(n * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for oh in 0..g.ho {
                        let ih = (oh * sh + ki) as isize - ph as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[ih as usize * g.w..][..g.w];
                        let dst = &mut dst_row[n * plane + oh * g.wo..][..g.wo];
                        if sw == 1 {
                            let start = lo + kj - pw;
                            dst[lo..hi].copy_from_slice(&src_row[start..start + hi - lo]);
                        } else {
                            for ow in lo..hi {
                                dst[ow] = src_row[ow * sw + kj - pw];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &Geometry) -> Vec<T> {
    let (ncols, plane) = (g.cols(), g.ho * g.wo);
    let (sh, sw) = g.spec.stride;
    let (ph, pw) = g.spec.padding;
    let mut x = vec![T::zero(); g.n * g.cin * g.h * g.w];
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let dst = &mut x[(n * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for oh in 0..g.ho {
                        let ih = (oh * sh + ki) as isize - ph as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[ih as usize * g.w..][..g.w];
                        let src = &src_row[n * plane + oh * g.wo..][..g.wo];
                        for (ow, &s) in src.iter().enumerate() {
                            let iw = (ow * sw + kj) as isize - pw as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst_row[iw as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn forward<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<(Tensor<T>, Geometry, Vec<T>)> {
    let batched = x.ndim() == 4;
    let (n, cin, h, w) = image_dims("conv2d", x.shape())?;
    let &[cout, kcin, kh, kw] = k.shape() else {
        return Err(Error::dim(
            "conv2d",
            format!("kernel must be C_out×C_in×kh×kw, got {:?}", k.shape()),
        ));
    };
    if kcin != cin {
        return Err(Error::dim(
            "conv2d",
            format!("kernel {:?} expects {kcin} input channels, input {:?} has {cin}", k.shape(), x.shape()),
        ));
    }
    if spec.stride.0 == 0 || spec.stride.1 == 0 {
        return Err(Error::dim("conv2d", "stride must be at least 1"));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::dim(
                "conv2d",
                format!("bias {:?} does not match {cout} output channels", b.shape()),
            ));
        }
    }
    let ho = out_extent("conv2d", h, spec.padding.0, kh, spec.stride.0)?;
    let wo = out_extent("conv2d", w, spec.padding.1, kw, spec.stride.1)?;
    let geom = Geometry {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        ho,
        wo,
        spec,
    };
    let cols = im2col(x.data(), &geom);
    let (rows, ncols, plane) = (geom.rows(), geom.cols(), ho * wo);
    let mut y2 = vec![T::zero(); cout * ncols];
    T::gemm(cout, rows, ncols, k.data(), [rows, 1], &cols, [ncols, 1], &mut y2, [ncols, 1], false);
    // (C_out, N, H'W') -> (N, C_out, H'W')
    let mut y = vec![T::zero(); n * cout * plane];
    for co in 0..cout {
        let b = bias.map_or(T::zero(), |b| b.data()[co]);
        for s in 0..n {
            let src = &y2[co * ncols + s * plane..][..plane];
            let dst = &mut y[(s * cout + co) * plane..][..plane];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v + b;
            }
        }
    }
    let shape = if batched {
        vec![n, cout, ho, wo]
    } else {
        vec![cout, ho, wo]
    };
    Ok((Tensor::from_parts(shape, y), geom, cols))
}

/// Gradients for `(input, kernel, bias)`, each computed only when requested.
/// The input gradient comes back as `N×C×H×W`.
pub(crate) fn backward<T: Real>(
    g: &Tensor<T>,
    k: &Tensor<T>,
    geom: &Geometry,
    cols: &[T],
    wants: [bool; 3],
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (rows, ncols, plane, cout) = (geom.rows(), geom.cols(), geom.ho * geom.wo, geom.cout);
    let gd = g.data();
    let mut g2 = vec![T::zero(); cout * ncols];
    for co in 0..cout {
        for s in 0..geom.n {
            g2[co * ncols + s * plane..][..plane].copy_from_slice(&gd[(s * cout + co) * plane..][..plane]);
        }
    }
    let dx = wants[0].then(|| {
        let mut dcols = vec![T::zero(); rows * ncols];
        T::gemm(rows, cout, ncols, k.data(), [1, rows], &g2, [ncols, 1], &mut dcols, [ncols, 1], false);
        Tensor::from_parts(vec![geom.n, geom.cin, geom.h, geom.w], col2im(&dcols, geom))
    });
    let dk = wants[1].then(|| {
        let mut dk = vec![T::zero(); cout * rows];
        T::gemm(cout, ncols, rows, &g2, [ncols, 1], cols, [1, ncols], &mut dk, [rows, 1], false);
        Tensor::from_parts(k.shape().to_vec(), dk)
    });
    let db = wants[2].then(|| {
        let db = g2.chunks_exact(ncols).map(|r| r.iter().copied().sum()).collect();
        Tensor::from_parts(vec![cout], db)
    });
    (dx, dk, db)
}
