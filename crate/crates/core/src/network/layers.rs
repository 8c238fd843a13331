use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{he_normal, ConvSpec, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named trainable tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        let shape = self.tensors[id.0].shape().to_vec();
        self.tensors[id.0] = Tensor::new(&shape, data)?.with_requires_grad(true);
        Ok(())
    }

    /// Puts every parameter on `tape`: trainable leaves when `train`,
    /// constants otherwise.
    pub fn bind(&self, tape: &mut Tape, train: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if train { tape.param(t) } else { tape.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    /// Adds the tape gradients of a bound forward pass into the grad slots.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) -> Result<()> {
        let grads = self.collect_grads(tape, bound);
        self.add_grads(&grads)
    }

    /// Gradients of every parameter from a bound pass, zeros where none
    /// reached it.
    pub fn collect_grads(&self, tape: &Tape, bound: &Bound) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .zip(&bound.vars)
            .map(|(t, &v)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect()
    }

    pub fn add_grads(&mut self, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.tensors.len()
            )));
        }
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            t.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// L2 norm over all gradient slots.
    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        self.tensors.iter_mut().for_each(|t| t.scale_grad(factor));
    }
}

/// Tape handles for every parameter of one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles in parameter registration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv {
    /// He-initialised weights, zero bias.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        spec: ConvSpec,
        bias: bool,
    ) -> Self {
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        let w = store.add(format!("{name}.weight"), he_normal(&spec.weight_shape(), fan_in, rng));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels])));
        Self { w, b, spec }
    }

    /// Like [`Conv::new`] but with `N(0, std^2)` weights.
    pub fn with_std(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        spec: ConvSpec,
        std: f64,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), normal(&spec.weight_shape(), std, rng));
        let b = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels])));
        Self { w, b, spec }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p.var(self.w), &self.spec)?;
        match self.b {
            Some(b) => tape.add_channel_bias(y, p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.weight"), he_normal(&[fan_out, fan_in], fan_in, rng));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    pub fn with_std(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), normal(&[fan_out, fan_in], std, rng));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.w), p.var(self.b))
    }
}

fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n = Normal::new(0.0, std).expect("finite std");
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| n.sample(rng)).collect()).expect("shape matches")
}
