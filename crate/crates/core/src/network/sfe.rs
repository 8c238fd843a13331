use rand::Rng;

use crate::autodiff::{ConvSpec, Tape, Var};
use crate::error::{shape_err, Result};

use super::layers::{Bound, Conv, ParamStore};

/// Top-down recoding of `C1..C4` into `M1..M4`:
/// `M1 = L(C4)`, `M_k = L(C_{5-k}) + U(M_{k-1})`.
///
/// With `enabled == false` only `L(C4)` is built (single coarse map).
#[derive(Debug, Clone, PartialEq)]
pub struct Sfe {
    /// Lateral 1x1 convs indexed by backbone block (`laterals[3]` reads C4).
    pub laterals: Vec<Option<Conv>>,
    /// Optional 3x3 smoothing per `M_k`, indexed by `k - 1`.
    pub smooth: Vec<Option<Conv>>,
    pub width: usize,
    pub enabled: bool,
}

/// Encoder output. `raw[k - 1]` is `M_k` before smoothing; `maps` are the
/// head inputs ordered finest first.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub raw: Vec<Var>,
    pub maps: Vec<Var>,
}

impl Sfe {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        channels: [usize; 4],
        width: usize,
        enabled: bool,
        smoothing: bool,
    ) -> Result<Self> {
        let mut laterals = vec![None, None, None, None];
        let first = if enabled { 0 } else { 3 };
        for i in first..4 {
            let spec = ConvSpec::new(channels[i], width, 1, 1, 0)?;
            laterals[i] = Some(Conv::new(store, rng, &format!("sfe.lateral{}", i + 1), spec, true));
        }
        let levels = if enabled { 4 } else { 1 };
        let mut smooth = vec![None; levels];
        if smoothing {
            for (k, s) in smooth.iter_mut().enumerate() {
                let spec = ConvSpec::new(width, width, 3, 1, 1)?;
                *s = Some(Conv::new(store, rng, &format!("sfe.smooth{}", k + 1), spec, true));
            }
        }
        Ok(Self {
            laterals,
            smooth,
            width,
            enabled,
        })
    }

    fn lateral(&self, tape: &mut Tape, p: &Bound, i: usize, c: Var) -> Result<Var> {
        let conv = self.laterals[i].as_ref().expect("lateral exists for used level");
        let got = tape.value(c).dims4()?.1;
        if got != conv.spec.in_channels {
            return Err(shape_err!(
                "C{} has {got} channels, lateral expects {}",
                i + 1,
                conv.spec.in_channels
            ));
        }
        conv.forward(tape, p, c)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, c: &[Var; 4]) -> Result<Pyramid> {
        let mut raw = Vec::with_capacity(4);
        let mut m = self.lateral(tape, p, 3, c[3])?;
        raw.push(m);
        if self.enabled {
            for k in 2..=4 {
                let l = self.lateral(tape, p, 4 - k, c[4 - k])?;
                let u = tape.upsample2(m)?;
                if tape.shape(u) != tape.shape(l) {
                    return Err(shape_err!(
                        "upsampled M{} {:?} does not match lateral of C{} {:?}",
                        k - 1,
                        tape.shape(u),
                        5 - k,
                        tape.shape(l)
                    ));
                }
                m = tape.add(l, u)?;
                raw.push(m);
            }
        }
        let mut maps = Vec::with_capacity(raw.len());
        for (k, &mk) in raw.iter().enumerate().rev() {
            maps.push(match &self.smooth[k] {
                Some(conv) => conv.forward(tape, p, mk)?,
                None => mk,
            });
        }
        Ok(Pyramid { raw, maps })
    }
}
