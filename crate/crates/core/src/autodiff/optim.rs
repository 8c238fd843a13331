use crate::error::{Error, Result};

use super::Tensor;

/// Momentum SGD with L2 weight decay folded into the gradient:
/// `v = momentum * v + (g + decay * p)`, `p -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Updates `params` in place. The parameter list must keep the same
    /// order and shapes across calls.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for (idx, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(Error::MissingGrad(format!("#{idx} {:?}", p.shape())));
            }
        }
        for (p, v) in params.into_iter().zip(&mut self.velocity) {
            let g = p.grad().expect("checked").to_vec();
            for ((w, vi), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *w;
                *w -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

/// One stateless-looking step over `params` using the caller's optimizer state.
pub fn sgd_step<'a>(
    opt: &mut Sgd,
    params: impl IntoIterator<Item = &'a mut Tensor>,
) -> Result<()> {
    opt.step(params)
}
