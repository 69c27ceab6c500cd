use crate::tensor::{BackwardOp, Tensor};
use crate::{Error, Result};

struct MaxPool2x2 {
    argmax: Vec<usize>,
}

impl BackwardOp for MaxPool2x2 {
    fn backward(&self, inputs: &[Tensor], _: &Tensor, grad: &[f32]) -> Vec<Option<Vec<f32>>> {
        let mut dx = vec![0.0f32; inputs[0].elem_count()];
        for (&src, g) in self.argmax.iter().zip(grad) {
            dx[src] += g;
        }
        vec![Some(dx)]
    }
}

struct InstanceNorm {
    plane: usize,
    inv_std: Vec<f32>,
}

impl BackwardOp for InstanceNorm {
    fn backward(&self, _: &[Tensor], out: &Tensor, grad: &[f32]) -> Vec<Option<Vec<f32>>> {
        // dx = inv_std * (g - mean(g) - xhat * mean(g * xhat)), per plane
        let xhat = out.data();
        let mut dx = vec![0.0f32; grad.len()];
        let n = self.plane as f64;
        for (p, &inv_std) in self.inv_std.iter().enumerate() {
            let r = p * self.plane..(p + 1) * self.plane;
            let (g, xh) = (&grad[r.clone()], &xhat[r.clone()]);
            let mean_g = g.iter().map(|&v| v as f64).sum::<f64>() / n;
            let mean_gx = g.iter().zip(xh).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / n;
            for ((d, &gv), &xv) in dx[r].iter_mut().zip(g).zip(xh) {
                *d = (inv_std as f64 * (gv as f64 - mean_g - xv as f64 * mean_gx)) as f32;
            }
        }
        vec![Some(dx)]
    }
}

impl Tensor {
    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2x2(&self) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::Shape(format!("max_pool2x2 on {h}x{w}")));
        }
        let x = self.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xo;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xo + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(Tensor::from_op(
            vec![n, c, oh, ow],
            out,
            &[self],
            MaxPool2x2 { argmax },
        ))
    }

    /// Per-sample, per-channel normalization over the spatial plane (no affine).
    pub fn instance_norm(&self, eps: f32) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        let plane = h * w;
        let mut out = vec![0.0f32; self.elem_count()];
        let mut inv_std = Vec::with_capacity(n * c);
        for (p, (src, dst)) in self
            .data()
            .chunks(plane)
            .zip(out.chunks_mut(plane))
            .enumerate()
        {
            debug_assert!(p < n * c);
            let mean = src.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
            let var = src
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / plane as f64;
            let is = 1.0 / (var + eps as f64).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = ((s as f64 - mean) * is) as f32;
            }
            inv_std.push(is as f32);
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            &[self],
            InstanceNorm { plane, inv_std },
        ))
    }
}
