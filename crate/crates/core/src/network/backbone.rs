use rand::Rng;

use crate::autodiff::{ConvSpec, Tape, Var};
use crate::error::{shape_err, Result};

use super::layers::{Bound, Conv, ParamStore};

/// `y = relu(conv3x3(relu(conv3x3_s(x))) + proj(x))`; `proj` is a strided
/// 1x1 conv when shape changes, identity otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ResUnit {
    pub conv1: Conv,
    pub conv2: Conv,
    pub proj: Option<Conv>,
}

impl ResUnit {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Result<Self> {
        let conv1 = Conv::new(store, rng, &format!("{name}.conv1"), ConvSpec::new(c_in, c_out, 3, stride, 1)?, true);
        let conv2 = Conv::new(store, rng, &format!("{name}.conv2"), ConvSpec::new(c_out, c_out, 3, 1, 1)?, true);
        let proj = if c_in != c_out || stride != 1 {
            Some(Conv::new(store, rng, &format!("{name}.proj"), ConvSpec::new(c_in, c_out, 1, stride, 0)?, false))
        } else {
            None
        };
        Ok(Self { conv1, conv2, proj })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, p, x)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, p, h)?;
        let s = match &self.proj {
            Some(proj) => proj.forward(tape, p, x)?,
            None => x,
        };
        let y = tape.add(h, s)?;
        Ok(tape.relu(y))
    }
}

pub const BLOCK_STRIDES: [usize; 4] = [1, 2, 2, 2];

/// Stem (stride-2 conv, max-pool) then four residual blocks at strides
/// 4, 8, 16, 32.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub stem: Conv,
    pub blocks: Vec<Vec<ResUnit>>,
    pub channels: [usize; 4],
}

impl Backbone {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        in_channels: usize,
        stem_channels: usize,
        channels: [usize; 4],
        units_per_block: usize,
    ) -> Result<Self> {
        let stem = Conv::new(store, rng, "stem", ConvSpec::new(in_channels, stem_channels, 3, 2, 1)?, true);
        let mut blocks = Vec::with_capacity(4);
        let mut c_in = stem_channels;
        for (i, (&c_out, &stride)) in channels.iter().zip(&BLOCK_STRIDES).enumerate() {
            let mut units = Vec::with_capacity(units_per_block);
            for u in 0..units_per_block {
                let (ci, s) = if u == 0 { (c_in, stride) } else { (c_out, 1) };
                units.push(ResUnit::new(store, rng, &format!("c{}.u{}", i + 1, u), ci, c_out, s)?);
            }
            blocks.push(units);
            c_in = c_out;
        }
        Ok(Self { stem, blocks, channels })
    }

    /// Stem output at stride 4.
    pub fn stem_forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (_, _, h, w) = tape.value(x).dims4()?;
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(shape_err!(
                "input {h}x{w} is not divisible by 32; pad to {}x{}",
                h.div_ceil(32).max(1) * 32,
                w.div_ceil(32).max(1) * 32
            ));
        }
        let s = self.stem.forward(tape, p, x)?;
        let s = tape.relu(s);
        tape.max_pool2(s)
    }

    /// `[C1, C2, C3, C4]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<[Var; 4]> {
        let mut h = self.stem_forward(tape, p, x)?;
        let mut out = [h; 4];
        for (i, units) in self.blocks.iter().enumerate() {
            for u in units {
                h = u.forward(tape, p, h)?;
            }
            out[i] = h;
        }
        Ok(out)
    }
}
