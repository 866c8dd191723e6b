//! im2col + GEMM convolution kernels on `[N,C,H,W]` buffers.

use super::{Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub const fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            padding: kernel / 2,
        }
    }

    pub const fn strided(kernel: usize, stride: usize) -> Self {
        Self {
            stride,
            padding: kernel / 2,
        }
    }
}

/// `floor((input + 2*padding - kernel) / stride) + 1`, or `None` when the
/// kernel does not fit.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], bias: &[usize], spec: Conv2dSpec) -> Result<Self> {
        const OP: &str = "conv2d";
        let (n, cin, h, w) = match *input {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(TensorError::Rank {
                    op: OP,
                    expected: "3 or 4 for input",
                    got: input.len(),
                })
            }
        };
        let [cout, kcin, kh, kw] = *kernel else {
            return Err(TensorError::Rank {
                op: OP,
                expected: "4 for kernel [C_out,C_in,K,K]",
                got: kernel.len(),
            });
        };
        if kcin != cin {
            return Err(TensorError::Dimension {
                op: OP,
                dim: "kernel C_in",
                expected: cin.to_string(),
                got: kcin,
            });
        }
        if kh != kw {
            return Err(TensorError::Dimension {
                op: OP,
                dim: "kernel width",
                expected: format!("{kh} (square kernels only)"),
                got: kw,
            });
        }
        if bias != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                expected: vec![cout],
                got: bias.to_vec(),
            });
        }
        let out = |size: usize, dim: &'static str| {
            conv_output_size(size, kh, spec.stride, spec.padding).ok_or(TensorError::Dimension {
                op: OP,
                dim,
                expected: format!(">= {} for kernel {kh}, padding {}", kh.saturating_sub(2 * spec.padding), spec.padding),
                got: size,
            })
        };
        let ho = out(h, "input height")?;
        let wo = out(w, "input width")?;
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride: spec.stride,
            pad: spec.padding,
            ho,
            wo,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_hw(&self) -> usize {
        self.ho * self.wo
    }

    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ohw = g.out_hw();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, slot) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *slot = if iw < 0 || iw >= g.w as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ohw = g.out_hw();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let line = &src[oh * g.wo..(oh + 1) * g.wo];
                    for (ow, &v) in line.iter().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha * a(m×k) · b(k×n) + beta * c` with explicit row/col strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every slice covers the index range implied by its dimensions
    // and strides; the callers below derive both from the same `ConvGeom`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn forward(x: &[f64], weight: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let rows = g.rows();
    let ohw = g.out_hw();
    let mut out = vec![0.0; g.n * g.cout * ohw];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * ohw] };
    for b in 0..g.n {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let ob = &mut out[b * g.cout * ohw..(b + 1) * g.cout * ohw];
        for (co, chunk) in ob.chunks_mut(ohw).enumerate() {
            chunk.fill(bias[co]);
        }
        let cols_ref: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        gemm(
            g.cout,
            rows,
            ohw,
            weight,
            (rows as isize, 1),
            cols_ref,
            (ohw as isize, 1),
            1.0,
            ob,
        );
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads {
    let (need_x, need_w, need_b) = need;
    let rows = g.rows();
    let ohw = g.out_hw();
    let mut dx = need_x.then(|| vec![0.0; g.n * g.in_len()]);
    let mut dw = need_w.then(|| vec![0.0; g.cout * rows]);
    let mut db = need_b.then(|| vec![0.0; g.cout]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * ohw] };
    let mut dcols = if need_x && !g.is_pointwise() { vec![0.0; rows * ohw] } else { Vec::new() };

    for b in 0..g.n {
        let dyb = &dy[b * g.cout * ohw..(b + 1) * g.cout * ohw];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in dyb.chunks(ohw).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        if let Some(dw) = dw.as_mut() {
            let cols_ref: &[f64] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            // dW += dY_b · cols^T
            gemm(
                g.cout,
                ohw,
                rows,
                dyb,
                (ohw as isize, 1),
                cols_ref,
                (1, ohw as isize),
                1.0,
                dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * g.in_len()..(b + 1) * g.in_len()];
            // dcols = W^T · dY_b
            if g.is_pointwise() {
                gemm(
                    rows,
                    g.cout,
                    ohw,
                    weight,
                    (1, rows as isize),
                    dyb,
                    (ohw as isize, 1),
                    1.0,
                    dxb,
                );
            } else {
                gemm(
                    rows,
                    g.cout,
                    ohw,
                    weight,
                    (1, rows as isize),
                    dyb,
                    (ohw as isize, 1),
                    0.0,
                    &mut dcols,
                );
                col2im(&dcols, g, dxb);
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}
