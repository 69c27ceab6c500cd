//! Scalar reductions and pointwise losses. Accumulation is done in `f64`.

use crate::ops::elementwise::sigmoid_f32;
use crate::tensor::{BackwardOp, Tensor};
use crate::{Error, Result};

struct Sum {
    n: usize,
    scale: f32,
}
impl BackwardOp for Sum {
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        vec![Some(vec![g[0] * self.scale; self.n])]
    }
}

struct Mse;
impl BackwardOp for Mse {
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        let k = 2.0 * g[0] / a.elem_count() as f32;
        let ga: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| k * (x - y)).collect();
        let gb = b.requires_grad().then(|| ga.iter().map(|v| -v).collect());
        vec![a.requires_grad().then_some(ga), gb]
    }
}

struct L1;
impl BackwardOp for L1 {
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        let k = g[0] / a.elem_count() as f32;
        let ga: Vec<f32> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| {
                let d = x - y;
                if d > 0.0 {
                    k
                } else if d < 0.0 {
                    -k
                } else {
                    0.0
                }
            })
            .collect();
        let gb = b.requires_grad().then(|| ga.iter().map(|v| -v).collect());
        vec![a.requires_grad().then_some(ga), gb]
    }
}

struct BceWithLogits {
    target: f32,
}
impl BackwardOp for BceWithLogits {
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let x = &inputs[0];
        let k = g[0] / x.elem_count() as f32;
        let gx = x
            .data()
            .iter()
            .map(|&v| k * (sigmoid_f32(v) - self.target))
            .collect();
        vec![Some(gx)]
    }
}

fn paired(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.elem_count() == 0 {
        return Err(Error::Shape(format!("{what}: empty tensors")));
    }
    Ok(())
}

impl Tensor {
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        let op = Sum {
            n: self.elem_count(),
            scale: 1.0,
        };
        Tensor::from_op(Vec::new(), vec![s as f32], &[self], op)
    }

    pub fn mean(&self) -> Tensor {
        let n = self.elem_count().max(1);
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        let op = Sum {
            n: self.elem_count(),
            scale: 1.0 / n as f32,
        };
        Tensor::from_op(Vec::new(), vec![(s / n as f64) as f32], &[self], op)
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&self, other: &Tensor) -> Result<Tensor> {
        paired(self, other, "mse")?;
        let s: f64 = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum();
        let v = (s / self.elem_count() as f64) as f32;
        Ok(Tensor::from_op(Vec::new(), vec![v], &[self, other], Mse))
    }

    /// Mean absolute difference, a scalar.
    pub fn l1(&self, other: &Tensor) -> Result<Tensor> {
        paired(self, other, "l1")?;
        let s: f64 = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        let v = (s / self.elem_count() as f64) as f32;
        Ok(Tensor::from_op(Vec::new(), vec![v], &[self, other], L1))
    }

    /// Mean binary cross-entropy of `sigmoid(self)` against a constant label.
    pub fn bce_with_logits(&self, target: f32) -> Result<Tensor> {
        if self.elem_count() == 0 {
            return Err(Error::Shape("bce_with_logits: empty tensor".into()));
        }
        let t = target as f64;
        let s: f64 = self
            .data()
            .iter()
            .map(|&x| {
                let x = x as f64;
                x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
            })
            .sum();
        let v = (s / self.elem_count() as f64) as f32;
        Ok(Tensor::from_op(
            Vec::new(),
            vec![v],
            &[self],
            BceWithLogits { target },
        ))
    }
}
