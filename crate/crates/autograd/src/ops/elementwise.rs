use crate::tensor::{BackwardOp, Tensor};
use crate::{Error, Result};

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

struct Add;
impl BackwardOp for Add {
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        vec![Some(g.to_vec()), Some(g.to_vec())]
    }
}

struct Sub;
impl BackwardOp for Sub {
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
    }
}

struct Mul;
impl BackwardOp for Mul {
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        let ga = a
            .requires_grad()
            .then(|| g.iter().zip(b.data()).map(|(g, b)| g * b).collect());
        let gb = b
            .requires_grad()
            .then(|| g.iter().zip(a.data()).map(|(g, a)| g * a).collect());
        vec![ga, gb]
    }
}

struct Affine {
    scale: f32,
}
impl BackwardOp for Affine {
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        vec![Some(g.iter().map(|v| v * self.scale).collect())]
    }
}

struct ChannelAffine {
    channels: usize,
    plane: usize,
    scale: Vec<f32>,
}
impl BackwardOp for ChannelAffine {
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let mut out = g.to_vec();
        for (i, chunk) in out.chunks_mut(self.plane).enumerate() {
            let s = self.scale[i % self.channels];
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        vec![Some(out)]
    }
}

struct LeakyRelu {
    slope: f32,
}
impl BackwardOp for LeakyRelu {
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let x = inputs[0].data();
        let out = g
            .iter()
            .zip(x)
            .map(|(g, &x)| if x > 0.0 { *g } else { g * self.slope })
            .collect();
        vec![Some(out)]
    }
}

struct Sigmoid;
impl BackwardOp for Sigmoid {
    fn backward(&self, _: &[Tensor], out: &Tensor, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let y = out.data();
        vec![Some(g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect())]
    }
}

pub(crate) fn sigmoid_f32(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape(self, rhs, "add")?;
        let data = self.data().iter().zip(rhs.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), data, &[self, rhs], Add))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape(self, rhs, "sub")?;
        let data = self.data().iter().zip(rhs.data()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), data, &[self, rhs], Sub))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape(self, rhs, "mul")?;
        let data = self.data().iter().zip(rhs.data()).map(|(a, b)| a * b).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), data, &[self, rhs], Mul))
    }

    /// `self * scale + shift`, element-wise with scalar coefficients.
    pub fn affine(&self, scale: f32, shift: f32) -> Tensor {
        let data = self.data().iter().map(|v| v * scale + shift).collect();
        Tensor::from_op(self.shape().to_vec(), data, &[self], Affine { scale })
    }

    pub fn scale(&self, scale: f32) -> Tensor {
        self.affine(scale, 0.0)
    }

    /// Per-channel `x * scale[c] + shift[c]` on an NCHW tensor.
    pub fn channel_affine(&self, scale: &[f32], shift: &[f32]) -> Result<Tensor> {
        let (_, c, h, w) = self.dims4()?;
        if scale.len() != c || shift.len() != c {
            return Err(Error::Shape(format!(
                "channel_affine: {c} channels but {} scales / {} shifts",
                scale.len(),
                shift.len()
            )));
        }
        let plane = h * w;
        let mut data = self.to_vec();
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            let (s, b) = (scale[i % c], shift[i % c]);
            chunk.iter_mut().for_each(|v| *v = *v * s + b);
        }
        let op = ChannelAffine {
            channels: c,
            plane,
            scale: scale.to_vec(),
        };
        Ok(Tensor::from_op(self.shape().to_vec(), data, &[self], op))
    }

    pub fn relu(&self) -> Tensor {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(&self, slope: f32) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { x * slope })
            .collect();
        Tensor::from_op(self.shape().to_vec(), data, &[self], LeakyRelu { slope })
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self.data().iter().map(|&x| sigmoid_f32(x)).collect();
        Tensor::from_op(self.shape().to_vec(), data, &[self], Sigmoid)
    }
}
