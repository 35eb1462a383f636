//! A small differentiable-computation substrate: parameters, a gradient
//! tape, the layers used by the event networks and the Adam optimizer.

mod adam;
pub mod check;
mod embed;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use embed::sinusoidal_step_embedding;
pub use params::{Grads, ParamId, ParamStore, CHECKPOINT_MAGIC};
pub use tape::{Gradients, Tape, Var, LEAKY_SLOPE};
pub use tensor::Tensor;

use rand::Rng;

use crate::error::Result;

/// Fully connected layer `x · W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let w = store.add_uniform(&format!("{name}.w"), d_in, d_out, rng);
        let b = store.add_zeros(&format!("{name}.b"), 1, d_out);
        Self { w, b, d_in, d_out }
    }

    /// A layer whose weights start at zero, so its output starts at zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add_zeros(&format!("{name}.w"), d_in, d_out);
        let b = store.add_zeros(&format!("{name}.b"), 1, d_out);
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        tape.dense(x, self.w, Some(self.b))
    }
}

/// Stack of dense layers with a leaky rectifier after every layer except,
/// optionally, the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Dense>,
    activate_last: bool,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        activate_last: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self {
            layers,
            activate_last,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, mut x: Var) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, x)?;
            if i < last || self.activate_last {
                x = tape.leaky_relu(x);
            }
        }
        Ok(x)
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.d_out)
    }
}

/// Learned softmax pooling over groups of neighbor features: each row gets
/// a scalar score `f · w`, and each group is reduced to the
/// softmax-weighted sum of its rows.
#[derive(Debug, Clone, Copy)]
pub struct AttentionPool {
    pub score: ParamId,
}

impl AttentionPool {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            score: store.add_uniform(&format!("{name}.score"), dim, 1, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, values: Var, offsets: Vec<usize>) -> Result<Var> {
        let scores = tape.dense(values, self.score, None)?;
        tape.group_attention(values, scores, offsets)
    }
}
