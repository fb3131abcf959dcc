//! Raw numeric kernels behind the tape ops.
//!
//! Every output element accumulates its terms in a fixed order (ascending
//! reduction index), so results are bit-reproducible and match naive loop
//! implementations exactly.

use rayon::prelude::*;

use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        let (&[b, c, h, w], &[f, kc, kh, kw]) = (input, kernel) else {
            return Err(TensorError::shape("conv2d", input, kernel));
        };
        if stride == 0 {
            return Err(TensorError::Contract("conv2d stride must be positive".into()));
        }
        if kc != c || kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(TensorError::shape("conv2d", input, kernel));
        }
        Ok(ConvGeometry {
            batch: b,
            in_channels: c,
            height: h,
            width: w,
            filters: f,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.filters, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn sample_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// Source index for output row `i`, kernel row `u`; `None` when it lands in padding.
    #[inline]
    fn source(&self, out: usize, k: usize, extent: usize) -> Option<usize> {
        (out * self.stride + k)
            .checked_sub(self.padding)
            .filter(|&s| s < extent)
    }

    /// Unfold one sample into a `[C·kh·kw, out_h·out_w]` patch matrix.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p_len = self.positions();
        for c in 0..self.in_channels {
            let plane = &x[c * self.height * self.width..];
            for u in 0..self.kernel_h {
                for v in 0..self.kernel_w {
                    let k = (c * self.kernel_h + u) * self.kernel_w + v;
                    let row = &mut cols[k * p_len..(k + 1) * p_len];
                    for i in 0..self.out_h {
                        let ih = self.source(i, u, self.height);
                        for j in 0..self.out_w {
                            row[i * self.out_w + j] = match (ih, self.source(j, v, self.width)) {
                                (Some(ih), Some(iw)) => plane[ih * self.width + iw],
                                _ => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p_len = self.positions();
        for c in 0..self.in_channels {
            let plane = &mut dx[c * self.height * self.width..(c + 1) * self.height * self.width];
            for u in 0..self.kernel_h {
                for v in 0..self.kernel_w {
                    let k = (c * self.kernel_h + u) * self.kernel_w + v;
                    let row = &cols[k * p_len..(k + 1) * p_len];
                    for i in 0..self.out_h {
                        let Some(ih) = self.source(i, u, self.height) else {
                            continue;
                        };
                        for j in 0..self.out_w {
                            if let Some(iw) = self.source(j, v, self.width) {
                                plane[ih * self.width + iw] += row[i * self.out_w + j];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor, TensorError> {
    let geo = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let (k_len, p_len) = (geo.patch_len(), geo.positions());
    let mut out = vec![0.0; geo.batch * geo.filters * p_len];
    let x = input.data();
    let w = kernel.data();
    out.par_chunks_mut(geo.filters * p_len)
        .enumerate()
        .for_each(|(b, out_b)| {
            let mut cols = vec![0.0; k_len * p_len];
            geo.im2col(&x[b * geo.sample_len()..(b + 1) * geo.sample_len()], &mut cols);
            for f in 0..geo.filters {
                let row = &mut out_b[f * p_len..(f + 1) * p_len];
                for k in 0..k_len {
                    let wv = w[f * k_len + k];
                    let col = &cols[k * p_len..(k + 1) * p_len];
                    for (o, &xv) in row.iter_mut().zip(col) {
                        *o += xv * wv;
                    }
                }
            }
        });
    Tensor::new(geo.output_shape().to_vec(), out)
}

/// Gradients of a convolution w.r.t. its input and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Tensor>, Option<Tensor>), TensorError> {
    let geo = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    if grad_out.shape() != geo.output_shape() {
        return Err(TensorError::shape(
            "conv2d backward",
            grad_out.shape(),
            &geo.output_shape(),
        ));
    }
    let (k_len, p_len) = (geo.patch_len(), geo.positions());
    let x = input.data();
    let w = kernel.data();
    let dy = grad_out.data();

    let per_sample: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (0..geo.batch)
        .into_par_iter()
        .map(|b| {
            let dy_b = &dy[b * geo.filters * p_len..(b + 1) * geo.filters * p_len];
            let dw_b = need_kernel.then(|| {
                let mut cols = vec![0.0; k_len * p_len];
                geo.im2col(&x[b * geo.sample_len()..(b + 1) * geo.sample_len()], &mut cols);
                let mut dw = vec![0.0; geo.filters * k_len];
                for f in 0..geo.filters {
                    let g = &dy_b[f * p_len..(f + 1) * p_len];
                    for k in 0..k_len {
                        let col = &cols[k * p_len..(k + 1) * p_len];
                        dw[f * k_len + k] = g.iter().zip(col).fold(0.0, |acc, (a, b)| acc + a * b);
                    }
                }
                dw
            });
            let dx_b = need_input.then(|| {
                let mut dcols = vec![0.0; k_len * p_len];
                for k in 0..k_len {
                    let row = &mut dcols[k * p_len..(k + 1) * p_len];
                    for f in 0..geo.filters {
                        let wv = w[f * k_len + k];
                        for (o, &g) in row.iter_mut().zip(&dy_b[f * p_len..(f + 1) * p_len]) {
                            *o += wv * g;
                        }
                    }
                }
                let mut dx = vec![0.0; geo.sample_len()];
                geo.col2im(&dcols, &mut dx);
                dx
            });
            (dx_b, dw_b)
        })
        .collect();

    let grad_input = if need_input {
        let mut dx = Vec::with_capacity(x.len());
        for (dx_b, _) in &per_sample {
            dx.extend_from_slice(dx_b.as_deref().unwrap_or_default());
        }
        Some(Tensor::new(input.shape().to_vec(), dx)?)
    } else {
        None
    };
    let grad_kernel = if need_kernel {
        let mut dw = vec![0.0; w.len()];
        for (_, dw_b) in &per_sample {
            for (acc, v) in dw.iter_mut().zip(dw_b.as_deref().unwrap_or_default()) {
                *acc += v;
            }
        }
        Some(Tensor::new(kernel.shape().to_vec(), dw)?)
    } else {
        None
    };
    Ok((grad_input, grad_kernel))
}

/// `[m,k] x [k,n]`, row-major.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            for (o, &bv) in row.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *o += aik * bv;
            }
        }
    }
    c
}

/// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
pub fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = a[i * k..(i + 1) * k]
                .iter()
                .zip(&b[j * k..(j + 1) * k])
                .fold(0.0, |acc, (x, y)| acc + x * y);
        }
    }
    c
}

/// `aᵀ · b` for `a: [m,k]`, `b: [m,n]`.
pub fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            for (o, &bv) in c[kk * n..(kk + 1) * n].iter_mut().zip(&b[i * n..(i + 1) * n]) {
                *o += aik * bv;
            }
        }
    }
    c
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let [m, k] = a.dims2("matmul")?;
    let [k2, n] = b.dims2("matmul")?;
    if k != k2 {
        return Err(TensorError::shape("matmul", a.shape(), b.shape()));
    }
    Tensor::new(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
