//! Differentiable building blocks with hand-written backward passes.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod lstm;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use layers::{BatchNorm, BnCache, BnStats, Dense, Embedding};
pub use loss::{focal_loss, focal_loss_logits, LossConfig};
pub use lstm::{Lstm, LstmLayer, LstmState};
pub use tensor::{Op, Tensor};

/// A fixed-order collection of trainable tensors. Gradient containers use the
/// same type, so visiting a model and its gradient yields aligned tensors.
pub trait ParamSet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn zeroed(&self) -> Self
    where
        Self: Clone,
    {
        let mut g = self.clone();
        g.visit_mut("", &mut |_, t| t.fill(0.0));
        g
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    /// Copies every trainable value into one vector.
    fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        self.visit("", &mut |_, t| v.extend_from_slice(t.data()));
        v
    }
}
