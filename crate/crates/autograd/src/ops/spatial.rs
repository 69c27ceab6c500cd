//! Index-remapping ops on NCHW tensors: padding, cropping, flips, channel
//! concatenation and forward differences.

use crate::tensor::{BackwardOp, Tensor};
use crate::{Error, Result};

/// Mirror an index into `0..n` with reflect (no edge repeat) semantics.
/// Works for offsets larger than `n` by folding with period `2(n-1)`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Output-plane to input-plane index map shared by every (n, c) plane.
struct PlaneGather {
    in_plane: usize,
    map: Vec<usize>,
}

impl BackwardOp for PlaneGather {
    fn backward(&self, inputs: &[Tensor], _: &Tensor, grad: &[f32]) -> Vec<Option<Vec<f32>>> {
        let mut dx = vec![0.0f32; inputs[0].elem_count()];
        let out_plane = self.map.len();
        for (p, g) in grad.chunks(out_plane).enumerate() {
            let dst = &mut dx[p * self.in_plane..(p + 1) * self.in_plane];
            for (&src, &gv) in self.map.iter().zip(g) {
                dst[src] += gv;
            }
        }
        vec![Some(dx)]
    }
}

struct Concat {
    // per input: channels
    channels: Vec<usize>,
    plane: usize,
    n: usize,
}

impl BackwardOp for Concat {
    fn backward(&self, _: &[Tensor], _: &Tensor, grad: &[f32]) -> Vec<Option<Vec<f32>>> {
        let total: usize = self.channels.iter().sum();
        let mut out: Vec<Vec<f32>> = self
            .channels
            .iter()
            .map(|c| Vec::with_capacity(self.n * c * self.plane))
            .collect();
        for b in 0..self.n {
            let mut offset = b * total * self.plane;
            for (i, &c) in self.channels.iter().enumerate() {
                out[i].extend_from_slice(&grad[offset..offset + c * self.plane]);
                offset += c * self.plane;
            }
        }
        out.into_iter().map(Some).collect()
    }
}

struct Narrow {
    c: usize,
    start: usize,
    len: usize,
    plane: usize,
}

impl BackwardOp for Narrow {
    fn backward(&self, inputs: &[Tensor], _: &Tensor, grad: &[f32]) -> Vec<Option<Vec<f32>>> {
        let mut dx = vec![0.0f32; inputs[0].elem_count()];
        let chunk = self.len * self.plane;
        for (b, g) in grad.chunks(chunk).enumerate() {
            let start = (b * self.c + self.start) * self.plane;
            dx[start..start + chunk].copy_from_slice(g);
        }
        vec![Some(dx)]
    }
}

#[derive(Clone, Copy)]
enum Axis {
    X,
    Y,
}

struct ForwardDiff {
    axis: Axis,
    h: usize,
    w: usize,
}

impl BackwardOp for ForwardDiff {
    fn backward(&self, _: &[Tensor], _: &Tensor, grad: &[f32]) -> Vec<Option<Vec<f32>>> {
        let (h, w) = (self.h, self.w);
        let mut dx = vec![0.0f32; grad.len()];
        for (g, d) in grad.chunks(h * w).zip(dx.chunks_mut(h * w)) {
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let next = match self.axis {
                        Axis::X if x + 1 < w => i + 1,
                        Axis::Y if y + 1 < h => i + w,
                        _ => continue,
                    };
                    d[next] += g[i];
                    d[i] -= g[i];
                }
            }
        }
        vec![Some(dx)]
    }
}

impl Tensor {
    fn gather_planes(&self, oh: usize, ow: usize, map: Vec<usize>) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        let in_plane = h * w;
        let mut out = Vec::with_capacity(n * c * map.len());
        for src in self.data().chunks(in_plane) {
            out.extend(map.iter().map(|&i| src[i]));
        }
        Ok(Tensor::from_op(
            vec![n, c, oh, ow],
            out,
            &[self],
            PlaneGather { in_plane, map },
        ))
    }

    /// Reflect padding; pads may exceed the input size (the mirror folds).
    pub fn pad_reflect(&self, top: usize, bottom: usize, left: usize, right: usize) -> Result<Tensor> {
        let (_, _, h, w) = self.dims4()?;
        let (oh, ow) = (h + top + bottom, w + left + right);
        let mut map = Vec::with_capacity(oh * ow);
        for y in 0..oh {
            let sy = reflect_index(y as isize - top as isize, h);
            for x in 0..ow {
                map.push(sy * w + reflect_index(x as isize - left as isize, w));
            }
        }
        self.gather_planes(oh, ow, map)
    }

    /// Spatial window `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
        let (_, _, ih, iw) = self.dims4()?;
        if y0 + h > ih || x0 + w > iw || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "crop {h}x{w}+{y0}+{x0} outside {ih}x{iw}"
            )));
        }
        let map = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y0 + y) * iw + x0 + x))
            .collect();
        self.gather_planes(h, w, map)
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Result<Tensor> {
        let (_, _, h, w) = self.dims4()?;
        let map = (0..h)
            .flat_map(|y| (0..w).map(move |x| y * w + (w - 1 - x)))
            .collect();
        self.gather_planes(h, w, map)
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn cat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cat_channels of nothing".into()))?;
        let (n, _, h, w) = first.dims4()?;
        let mut channels = Vec::with_capacity(parts.len());
        for p in parts {
            let (pn, pc, ph, pw) = p.dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "cat_channels: {:?} vs {:?}",
                    first.shape(),
                    p.shape()
                )));
            }
            channels.push(pc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (p, &c) in parts.iter().zip(&channels) {
                out.extend_from_slice(&p.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let op = Concat { channels, plane, n };
        Ok(Tensor::from_op(vec![n, total, h, w], out, parts, op))
    }

    /// Channels `start..start+len`.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if start + len > c || len == 0 {
            return Err(Error::Shape(format!(
                "narrow_channels {start}+{len} of {c}"
            )));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let s = (b * c + start) * plane;
            out.extend_from_slice(&self.data()[s..s + len * plane]);
        }
        Ok(Tensor::from_op(
            vec![n, len, h, w],
            out,
            &[self],
            Narrow { c, start, len, plane },
        ))
    }

    fn forward_diff(&self, axis: Axis) -> Result<Tensor> {
        let (_, _, h, w) = self.dims4()?;
        let mut out = vec![0.0f32; self.elem_count()];
        for (src, dst) in self.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    dst[i] = match axis {
                        Axis::X if x + 1 < w => src[i + 1] - src[i],
                        Axis::Y if y + 1 < h => src[i + w] - src[i],
                        _ => 0.0,
                    };
                }
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            &[self],
            ForwardDiff { axis, h, w },
        ))
    }

    /// `out[.., i, j] = x[.., i, j+1] - x[.., i, j]`, zero in the last column.
    pub fn diff_x(&self) -> Result<Tensor> {
        self.forward_diff(Axis::X)
    }

    /// `out[.., i, j] = x[.., i+1, j] - x[.., i, j]`, zero in the last row.
    pub fn diff_y(&self) -> Result<Tensor> {
        self.forward_diff(Axis::Y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_index_folds() {
        let got: Vec<usize> = (-4..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect_index(5, 1), 0);
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let x = Tensor::new((0..2 * 5 * 3).map(|v| v as f32).collect(), &[1, 2, 5, 3]).unwrap();
        let y = x.pad_reflect(3, 6, 2, 7).unwrap();
        assert_eq!(y.shape(), &[1, 2, 14, 12]);
        let z = y.crop(3, 2, 5, 3).unwrap();
        assert_eq!(z.data(), x.data());
    }
}
