//! Dense `f64` tensors with a per-forward-pass reverse-mode tape.

pub mod gradcheck;
mod kernels;
mod optim;
mod tape;
mod tensor;

pub use optim::{sgd_step, Sgd};
pub use tape::{sigmoid, Region, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::softmax_in_place;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};

/// Square-kernel convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 || in_channels == 0 || out_channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv spec needs positive kernel/stride/channels, got k={kernel} s={stride} \
                 in={in_channels} out={out_channels}"
            )));
        }
        Ok(Self {
            kernel,
            stride,
            padding,
            in_channels,
            out_channels,
        })
    }

    /// `floor((extent + 2 pad - k) / s) + 1`, rejected when < 1.
    pub fn output_extent(&self, extent: usize) -> Result<usize> {
        let padded = extent + 2 * self.padding;
        if padded < self.kernel {
            return Err(shape_err!(
                "kernel {} does not fit extent {extent} with padding {}",
                self.kernel,
                self.padding
            ));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }
}

/// He-normal initialisation: `N(0, 2 / fan_in)`.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data)
        .expect("shape matches")
        .with_requires_grad(true)
}
