//! Differentiable building blocks with explicit forward caches and hand-written
//! backward passes.

pub mod asp;
pub mod block;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod params;
pub mod se;
pub mod tensor;

pub use asp::AttentiveStatsPool;
pub use block::{ConvBn, ResBlock, ResStack, TConvBn};
pub use conv::{Conv2d, ConvTranspose2d};
pub use linear::Linear;
pub use norm::{BatchNorm2d, BnUpdate};
pub use params::{Builder, Grads, Param, ParamId, ParamKind, ParamStore};
pub use se::SqueezeExcite;
pub use tensor::Tensor4;

use crate::scalar::Scalar;

/// On/off pattern of every rectifier and variance floor, in evaluation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gates {
    pub masks: Vec<Vec<bool>>,
}

#[derive(Debug, Default)]
enum GateMode {
    #[default]
    Free,
    Record(Gates),
    Replay(Gates, usize),
}

/// Per-pass state: batch-norm mode, the running-statistic updates it
/// produced, and optionally a recorded or replayed activation pattern.
#[derive(Debug)]
pub struct Ctx<S> {
    /// Batch statistics when true, running statistics otherwise.
    pub train: bool,
    /// Collect running-statistic updates (disabled for gradient checks).
    pub record_stats: bool,
    pub bn_updates: Vec<BnUpdate<S>>,
    gates: GateMode,
}

impl<S> Ctx<S> {
    fn with(train: bool, record_stats: bool) -> Self {
        Self { train, record_stats, bn_updates: Vec::new(), gates: GateMode::Free }
    }

    pub fn train() -> Self {
        Self::with(true, true)
    }

    pub fn eval() -> Self {
        Self::with(false, false)
    }

    /// Training-mode statistics without recording running updates.
    pub fn probe() -> Self {
        Self::with(true, false)
    }

    /// Records the activation pattern of the next pass.
    pub fn recording_gates(mut self) -> Self {
        self.gates = GateMode::Record(Gates::default());
        self
    }

    /// Forces a previously recorded activation pattern, so the pass evaluates
    /// the smooth piece of the network that the pattern selects.
    pub fn replaying_gates(mut self, gates: Gates) -> Self {
        self.gates = GateMode::Replay(gates, 0);
        self
    }

    pub fn take_gates(&mut self) -> Option<Gates> {
        match std::mem::take(&mut self.gates) {
            GateMode::Record(g) | GateMode::Replay(g, _) => Some(g),
            GateMode::Free => None,
        }
    }

    /// Returns `compute()` unless a pattern is being replayed.
    pub(crate) fn gate(&mut self, compute: impl FnOnce() -> Vec<bool>) -> Vec<bool> {
        match &mut self.gates {
            GateMode::Free => compute(),
            GateMode::Record(g) => {
                let m = compute();
                g.masks.push(m.clone());
                m
            }
            GateMode::Replay(g, cursor) => {
                let m = g.masks.get(*cursor).cloned().expect("replayed gate pattern is shorter than the pass");
                *cursor += 1;
                m
            }
        }
    }
}

impl<S: Scalar> Ctx<S> {
    pub(crate) fn relu(&mut self, x: &mut [S]) {
        let open = self.gate(|| x.iter().map(|&v| v > S::zero()).collect());
        x.iter_mut().zip(open).for_each(|(v, on)| {
            if !on {
                *v = S::zero();
            }
        });
    }
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        (S::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}
