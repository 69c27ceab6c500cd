//! 2-D convolution through im2col and `matrixmultiply::sgemm`.

use crate::tensor::{BackwardOp, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output size of a convolution along one axis: `(n + 2p - k) / s + 1`.
pub fn conv_output_size(n: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn im2col(x: &[f32], g: &Geometry, cols: &mut [f32]) {
    let l = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &Geometry, dx: &mut [f32]) {
    let l = g.cols();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = beta*c + a[m×k] · b[k×n]` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices whose extents cover the strided views
    // (checked by the debug assertions below).
    debug_assert!(a.len() > (m - 1) * rsa + k.saturating_sub(1) * csa || k == 0);
    debug_assert!(b.len() > k.saturating_sub(1) * rsb + (n - 1) * csb || k == 0);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

struct Conv2dOp {
    geo: Geometry,
    n: usize,
    o: usize,
    has_bias: bool,
}

impl BackwardOp for Conv2dOp {
    fn backward(&self, inputs: &[Tensor], _: &Tensor, grad: &[f32]) -> Vec<Option<Vec<f32>>> {
        let g = &self.geo;
        let (x, w) = (&inputs[0], &inputs[1]);
        let (rows, l) = (g.rows(), g.cols());
        let in_plane = g.c * g.h * g.w;
        let out_plane = self.o * l;
        let mut dx = x.requires_grad().then(|| vec![0.0f32; x.elem_count()]);
        let mut dw = w.requires_grad().then(|| vec![0.0f32; w.elem_count()]);
        let mut cols = vec![0.0f32; rows * l];
        let mut dcols = vec![0.0f32; rows * l];
        for n in 0..self.n {
            let gout = &grad[n * out_plane..(n + 1) * out_plane];
            if let Some(dw) = dw.as_mut() {
                im2col(&x.data()[n * in_plane..(n + 1) * in_plane], g, &mut cols);
                // dW[o, r] += sum_l gout[o, l] * cols[r, l]
                gemm(self.o, l, rows, gout, l, 1, &cols, 1, l, 1.0, dw, rows, 1);
            }
            if let Some(dx) = dx.as_mut() {
                // dcols[r, l] = sum_o W[o, r] * gout[o, l]
                gemm(rows, self.o, l, w.data(), 1, rows, gout, l, 1, 0.0, &mut dcols, l, 1);
                col2im(&dcols, g, &mut dx[n * in_plane..(n + 1) * in_plane]);
            }
        }
        let mut out = vec![dx, dw];
        if self.has_bias {
            let db = inputs[2].requires_grad().then(|| {
                let mut db = vec![0.0f32; self.o];
                for n in 0..self.n {
                    for (o, acc) in db.iter_mut().enumerate() {
                        let start = n * out_plane + o * l;
                        *acc += grad[start..start + l].iter().map(|&v| v as f64).sum::<f64>() as f32;
                    }
                }
                db
            });
            out.push(db);
        }
        out
    }
}

struct ConvTranspose2x2Op {
    n: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    has_bias: bool,
}

impl ConvTranspose2x2Op {
    // Map between the [co*4, h*w] gemm layout and the [co, 2h, 2w] output plane.
    fn out_index(&self, r: usize, l: usize) -> usize {
        let (co, ab) = (r / 4, r % 4);
        let (a, b) = (ab / 2, ab % 2);
        let (y, x) = (l / self.w, l % self.w);
        (co * 2 * self.h + 2 * y + a) * 2 * self.w + 2 * x + b
    }
}

impl BackwardOp for ConvTranspose2x2Op {
    fn backward(&self, inputs: &[Tensor], _: &Tensor, grad: &[f32]) -> Vec<Option<Vec<f32>>> {
        let (x, w) = (&inputs[0], &inputs[1]);
        let r4 = self.co * 4;
        let l = self.h * self.w;
        let in_plane = self.ci * l;
        let out_plane = self.co * 4 * l;
        let mut dx = x.requires_grad().then(|| vec![0.0f32; x.elem_count()]);
        let mut dw = w.requires_grad().then(|| vec![0.0f32; w.elem_count()]);
        let mut gy = vec![0.0f32; r4 * l];
        for n in 0..self.n {
            let gout = &grad[n * out_plane..(n + 1) * out_plane];
            for r in 0..r4 {
                for li in 0..l {
                    gy[r * l + li] = gout[self.out_index(r, li)];
                }
            }
            let xs = &x.data()[n * in_plane..(n + 1) * in_plane];
            if let Some(dx) = dx.as_mut() {
                // dX[ci, l] = sum_r w[ci, r] * gy[r, l]
                gemm(self.ci, r4, l, w.data(), r4, 1, &gy, l, 1, 0.0, &mut dx[n * in_plane..(n + 1) * in_plane], l, 1);
            }
            if let Some(dw) = dw.as_mut() {
                // dw[ci, r] += sum_l gy[r, l] * x[ci, l]; computed as [r, ci] with transposed c strides
                gemm(r4, l, self.ci, &gy, l, 1, xs, 1, l, 1.0, dw, 1, r4);
            }
        }
        let mut out = vec![dx, dw];
        if self.has_bias {
            let db = inputs[2].requires_grad().then(|| {
                let mut db = vec![0.0f32; self.co];
                for n in 0..self.n {
                    for (co, acc) in db.iter_mut().enumerate() {
                        let start = n * out_plane + co * 4 * l;
                        *acc += grad[start..start + 4 * l].iter().map(|&v| v as f64).sum::<f64>() as f32;
                    }
                }
                db
            });
            out.push(db);
        }
        out
    }
}

impl Tensor {
    /// Cross-correlation of an NCHW input with an `[O, C, k, k]` kernel,
    /// zero padding `pad` on every side.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        let (o, wc, kh, kw) = weight.dims4()?;
        if wc != c || kh != kw {
            return Err(Error::Shape(format!(
                "conv2d: input {:?} with kernel {:?}",
                self.shape(),
                weight.shape()
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [o] {
                return Err(Error::Shape(format!("conv2d: bias {:?} for {o} outputs", b.shape())));
            }
        }
        let (Some(oh), Some(ow)) = (
            conv_output_size(h, kh, stride, pad),
            conv_output_size(w, kw, stride, pad),
        ) else {
            return Err(Error::Shape(format!(
                "conv2d: {h}x{w} input too small for kernel {kh} / pad {pad}"
            )));
        };
        let geo = Geometry { c, h, w, k: kh, stride, pad, oh, ow };
        let (rows, l) = (geo.rows(), geo.cols());
        let mut out = vec![0.0f32; n * o * l];
        let mut cols = vec![0.0f32; rows * l];
        let in_plane = c * h * w;
        for b in 0..n {
            im2col(&self.data()[b * in_plane..(b + 1) * in_plane], &geo, &mut cols);
            let dst = &mut out[b * o * l..(b + 1) * o * l];
            gemm(o, rows, l, weight.data(), rows, 1, &cols, l, 1, 0.0, dst, l, 1);
            if let Some(bias) = bias {
                for (oc, chunk) in dst.chunks_mut(l).enumerate() {
                    let bv = bias.data()[oc];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let op = Conv2dOp { geo, n, o, has_bias: bias.is_some() };
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(Tensor::from_op(vec![n, o, oh, ow], out, &inputs, op))
    }

    /// Transposed convolution with a 2×2 kernel and stride 2 (exact 2× upsampling).
    /// Kernel layout `[C_in, C_out, 2, 2]`.
    pub fn conv_transpose2x2(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (n, ci, h, w) = self.dims4()?;
        let (wci, co, kh, kw) = weight.dims4()?;
        if wci != ci || kh != 2 || kw != 2 {
            return Err(Error::Shape(format!(
                "conv_transpose2x2: input {:?} with kernel {:?}",
                self.shape(),
                weight.shape()
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(Error::Shape(format!("conv_transpose2x2: bias {:?}", b.shape())));
            }
        }
        let op = ConvTranspose2x2Op { n, ci, co, h, w, has_bias: bias.is_some() };
        let r4 = co * 4;
        let l = h * w;
        let mut y = vec![0.0f32; r4 * l];
        let mut out = vec![0.0f32; n * co * 4 * l];
        for b in 0..n {
            let xs = &self.data()[b * ci * l..(b + 1) * ci * l];
            // y[r, l] = sum_ci w[ci, r] * x[ci, l]
            gemm(r4, ci, l, weight.data(), 1, r4, xs, l, 1, 0.0, &mut y, l, 1);
            let dst = &mut out[b * r4 * l..(b + 1) * r4 * l];
            for r in 0..r4 {
                let bv = bias.map_or(0.0, |t| t.data()[r / 4]);
                for li in 0..l {
                    dst[op.out_index(r, li)] = y[r * l + li] + bv;
                }
            }
        }
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(Tensor::from_op(vec![n, co, 2 * h, 2 * w], out, &inputs, op))
    }
}
