//! Radiance fields: `(position, direction) -> (density, color)`.

mod analytic;
mod checkpoint;
mod encoding;
mod mlp;

pub use analytic::{AnalyticField, AnalyticShape, Sphere};
pub use checkpoint::{Checkpoint, TensorEntry};
pub use encoding::{encode, encoded_dim, positional_encode, EncodingConfig};
pub use mlp::{BoundField, DensityActivation, ModelConfig, NeuralField};

pub(crate) use checkpoint::write_atomic;

use crate::autodiff::{Graph, Var};

/// A field that can be evaluated on a batch of points inside a graph.
pub trait FieldQuery {
    /// `positions: [P, 3]`, unit `directions: [P, 3]` to
    /// `(sigma: [P], rgb: [P, 3])` with `sigma >= 0` and `rgb` in `[0, 1]`.
    fn query(&self, g: &mut Graph, positions: Var, directions: Var) -> (Var, Var);

    /// Density only. Fields whose density ignores direction can skip the
    /// color head.
    fn query_density(&self, g: &mut Graph, positions: Var) -> Var {
        let n = g.shape(positions)[0];
        let mut dirs = vec![0.0; 3 * n];
        for d in dirs.chunks_mut(3) {
            d[2] = -1.0;
        }
        let dirs = g.constant(crate::autodiff::Tensor::new([n, 3], dirs));
        self.query(g, positions, dirs).0
    }
}
