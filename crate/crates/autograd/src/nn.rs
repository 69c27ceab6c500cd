//! Parameters, deterministic initialization and the two convolution layers.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result, Tensor};

/// A named, replaceable tensor slot.
#[derive(Debug)]
pub struct Param {
    name: String,
    trainable: bool,
    value: RwLock<Tensor>,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// Current value. For trainable params this is a gradient-tracking leaf.
    pub fn tensor(&self) -> Tensor {
        self.value.read().expect("param lock poisoned").clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tensor().shape().to_vec()
    }

    /// Replace the values; shape is kept.
    pub fn set_data(&self, data: Vec<f32>) -> Result<()> {
        let mut slot = self.value.write().expect("param lock poisoned");
        let shape = slot.shape().to_vec();
        *slot = if self.trainable {
            Tensor::variable(data, &shape)?
        } else {
            Tensor::new(data, &shape)?
        };
        Ok(())
    }
}

/// Ordered collection of the parameters of one network.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Arc<Param>>,
}

impl ParamStore {
    pub fn iter(&self) -> impl Iterator<Item = &Arc<Param>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor().elem_count()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Param>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Copy of every value, keyed by name.
    pub fn snapshot(&self) -> BTreeMap<String, (Vec<usize>, Vec<f32>)> {
        self.params
            .iter()
            .map(|p| {
                let t = p.tensor();
                (p.name.clone(), (t.shape().to_vec(), t.to_vec()))
            })
            .collect()
    }

    /// Overwrite every parameter from `values`; names and shapes must match.
    pub fn load(&self, values: &BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        for p in &self.params {
            let (shape, data) = values
                .get(&p.name)
                .ok_or_else(|| Error::MissingTensor(p.name.clone()))?;
            if *shape != p.shape() {
                return Err(Error::Shape(format!(
                    "{}: stored {shape:?}, expected {:?}",
                    p.name,
                    p.shape()
                )));
            }
            p.set_data(data.clone())?;
        }
        Ok(())
    }

    /// Gradient of every parameter in store order, zeros where none flowed.
    pub fn collect_grads(&self, grads: &crate::Gradients) -> Vec<Vec<f32>> {
        self.params
            .iter()
            .map(|p| {
                let t = p.tensor();
                grads
                    .get(&t)
                    .map(<[f32]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.elem_count()])
            })
            .collect()
    }
}

/// Builds layers into a [`ParamStore`], drawing initial values from a seeded stream.
pub struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
    trainable: bool,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            trainable: true,
        }
    }

    /// Builder whose parameters are constants (never differentiated).
    pub fn frozen(seed: u64) -> Self {
        Self {
            trainable: false,
            ..Self::new(seed)
        }
    }

    fn uniform(&mut self, name: &str, shape: &[usize], bound: f32) -> Arc<Param> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.push(name, shape, data)
    }

    fn push(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Arc<Param> {
        assert!(
            self.store.get(name).is_none(),
            "duplicate parameter name {name}"
        );
        let value = if self.trainable {
            Tensor::variable(data, shape)
        } else {
            Tensor::new(data, shape)
        }
        .expect("initializer length matches shape");
        let p = Arc::new(Param {
            name: name.to_string(),
            trainable: self.trainable,
            value: RwLock::new(value),
        });
        self.store.params.push(Arc::clone(&p));
        p
    }

    /// `k×k` convolution, uniform(±1/√fan_in) init for weight and bias.
    pub fn conv2d(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Conv2d {
        let mut conv = self.conv2d_no_bias(name, cin, cout, k, stride, pad);
        let bound = 1.0 / ((cin * k * k) as f32).sqrt();
        conv.bias = Some(self.uniform(&format!("{name}.bias"), &[cout], bound));
        conv
    }

    /// Convolution without bias, for layers followed by a normalization.
    pub fn conv2d_no_bias(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Conv2d {
        let bound = 1.0 / ((cin * k * k) as f32).sqrt();
        let weight = self.uniform(&format!("{name}.weight"), &[cout, cin, k, k], bound);
        Conv2d { weight, bias: None, stride, pad }
    }

    pub fn conv_transpose2x2(&mut self, name: &str, cin: usize, cout: usize) -> ConvTranspose2x2 {
        let bound = 1.0 / ((cout * 4) as f32).sqrt();
        let weight = self.uniform(&format!("{name}.weight"), &[cin, cout, 2, 2], bound);
        let bias = self.uniform(&format!("{name}.bias"), &[cout], bound);
        ConvTranspose2x2 { weight, bias }
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Arc<Param>,
    pub bias: Option<Arc<Param>>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.bias.as_ref().map(|b| b.tensor());
        x.conv2d(&self.weight.tensor(), b.as_ref(), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2x2 {
    pub weight: Arc<Param>,
    pub bias: Arc<Param>,
}

impl ConvTranspose2x2 {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (w, b) = (self.weight.tensor(), self.bias.tensor());
        x.conv_transpose2x2(&w, Some(&b))
    }
}
