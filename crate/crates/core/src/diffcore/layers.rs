//! Layer primitives: shared per-vertex affine maps (1x1 convolutions),
//! instance normalization, LeakyReLU, and fully-connected layers.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;

use super::tape::{Graph, Var};

/// Epsilon added to the variance inside instance normalization.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Negative slope for every LeakyReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Weights and bias of one affine layer. A 1x1 convolution over vertices and
/// a fully-connected layer are the same map; only the input layout differs.
#[derive(Debug, Clone)]
pub struct LayerParams {
    /// (d_out, d_in)
    pub weight: Arc<Array2<f64>>,
    /// (d_out, 1)
    pub bias: Arc<Array2<f64>>,
}

impl LayerParams {
    pub fn d_out(&self) -> usize {
        self.weight.dim().0
    }

    pub fn d_in(&self) -> usize {
        self.weight.dim().1
    }

    /// Inject this layer's parameters into a graph.
    pub fn to_vars(&self, g: &mut Graph, trainable: bool) -> LayerVars {
        LayerVars {
            weight: g.param_shared(self.weight.clone(), trainable),
            bias: g.param_shared(self.bias.clone(), trainable),
        }
    }
}

/// Graph handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
}

/// Seeded uniform init in +-sqrt(1/d_in), which keeps initial activations
/// around unit scale.
pub fn init_layer(d_out: usize, d_in: usize, rng: &mut impl Rng) -> LayerParams {
    let bound = (1.0 / d_in as f64).sqrt();
    let weight = Array2::from_shape_fn((d_out, d_in), |_| rng.gen_range(-bound..bound));
    let bias = Array2::from_shape_fn((d_out, 1), |_| rng.gen_range(-bound..bound));
    LayerParams { weight: Arc::new(weight), bias: Arc::new(bias) }
}

/// Shared per-vertex affine map: out[:, n] = W x[:, n] + b for every vertex
/// column n. `x` is (d_in, n).
pub fn pointwise_linear(g: &mut Graph, x: Var, p: LayerVars) -> Var {
    let y = g.matmul(p.weight, x);
    g.add_col(y, p.bias)
}

/// Fully-connected layer on a (d_in, s) batch of column vectors. Same affine
/// map as [`pointwise_linear`]; kept separate to mirror how the architecture
/// uses it.
pub fn fully_connected(g: &mut Graph, x: Var, p: LayerVars) -> Var {
    pointwise_linear(g, x, p)
}

/// Instance normalization over the vertex axis of a (d, n) feature block.
/// Returns (normalized, mean, std); gradients flow through the statistics.
pub fn instance_norm(g: &mut Graph, x: Var) -> (Var, Var, Var) {
    let mu = g.row_mean(x);
    let neg_mu = g.neg(mu);
    let centered = g.add_col(x, neg_mu);
    let sq = g.mul(centered, centered);
    let var = g.row_mean(sq);
    let var_eps = g.add_const(var, INSTANCE_NORM_EPS);
    let sigma = g.sqrt(var_eps);
    let inv_sigma = g.recip(sigma);
    let normalized = g.mul_col(centered, inv_sigma);
    (normalized, mu, sigma)
}

/// Elementwise max(x, slope * x).
pub fn leaky_relu(g: &mut Graph, x: Var, slope: f64) -> Var {
    g.leaky_relu(x, slope)
}
