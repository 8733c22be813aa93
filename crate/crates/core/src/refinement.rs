//! Mesh refinement: a conditional normalization layer that blends the warped
//! features' own statistics with parameters learned from identity features,
//! residual blocks built on it, and the stack that maps the warped mesh to
//! the final output coordinates.

use ndarray::Array2;
use rand::Rng;

use crate::diffcore::{
    fully_connected, init_layer, instance_norm, pointwise_linear, Graph, LayerParams, LayerVars,
    Var, LEAKY_SLOPE,
};
use crate::error::{Error, Result};

/// How the blend weight w is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum BlendMode {
    /// Sigmoid of the blend layer output; w in (0,1) elementwise.
    #[default]
    Adaptive,
    /// w = 0: the layer reduces to the identity map on the warped features.
    ForceZero,
    /// w = 1: denormalization purely from identity features (the ablation
    /// variant that drops the elastic blend).
    ForceOne,
}

/// Parameters of one conditional normalization layer at channel width d:
/// a 1x1 conv adapting identity features to d, two 1x1 convs producing the
/// scale and shift, and the blend layer mapping 2d channel means to d.
#[derive(Debug, Clone)]
pub struct ElainParams {
    pub conv_id: LayerParams,
    pub conv_gamma: LayerParams,
    pub conv_beta: LayerParams,
    pub fc_blend: LayerParams,
}

impl ElainParams {
    pub fn init(d: usize, feature_dim: usize, rng: &mut impl Rng) -> Self {
        ElainParams {
            conv_id: init_layer(d, feature_dim, rng),
            conv_gamma: init_layer(d, d, rng),
            conv_beta: init_layer(d, d, rng),
            fc_blend: init_layer(d, 2 * d, rng),
        }
    }

    pub fn to_vars(&self, g: &mut Graph, trainable: bool) -> ElainVars {
        ElainVars {
            conv_id: self.conv_id.to_vars(g, trainable),
            conv_gamma: self.conv_gamma.to_vars(g, trainable),
            conv_beta: self.conv_beta.to_vars(g, trainable),
            fc_blend: self.fc_blend.to_vars(g, trainable),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ElainVars {
    pub conv_id: LayerVars,
    pub conv_gamma: LayerVars,
    pub conv_beta: LayerVars,
    pub fc_blend: LayerVars,
}

/// Conditional normalization of `h_warp` (d, n) driven by identity features
/// `f_id` (feature_dim, n):
///
/// - normalize h_warp with its own per-channel mean and std,
/// - h_id = conv_id(f_id); gamma, beta = two convs of h_id,
/// - w = sigmoid(fc_blend([mean(h_warp); mean(h_id)])), one weight per channel,
/// - scale with w*gamma + (1-w)*std, shift with w*beta + (1-w)*mean.
///
/// With w = 0 the denormalization undoes the normalization exactly, so the
/// layer is the identity on h_warp.
pub fn elain(g: &mut Graph, h_warp: Var, f_id: Var, p: ElainVars, mode: BlendMode) -> Var {
    let (d, n) = g.shape(h_warp);
    assert_eq!(
        g.shape(f_id).1,
        n,
        "elain: identity features have {} vertices, warped features {}",
        g.shape(f_id).1,
        n
    );

    let (xhat, mu, sigma) = instance_norm(g, h_warp);

    let h_id = pointwise_linear(g, f_id, p.conv_id);
    let gamma = pointwise_linear(g, h_id, p.conv_gamma);
    let beta = pointwise_linear(g, h_id, p.conv_beta);

    let w = match mode {
        BlendMode::Adaptive => {
            let m_id = g.row_mean(h_id);
            let cat = g.concat_rows(mu, m_id);
            let pre = fully_connected(g, cat, p.fc_blend);
            g.sigmoid(pre)
        }
        BlendMode::ForceZero => g.constant(Array2::zeros((d, 1))),
        BlendMode::ForceOne => g.constant(Array2::ones((d, 1))),
    };
    let neg_w = g.neg(w);
    let one_minus_w = g.add_const(neg_w, 1.0);

    let gamma_w = g.mul_col(gamma, w);
    let sigma_part = g.mul(one_minus_w, sigma);
    let gamma_prime = g.add_col(gamma_w, sigma_part);

    let beta_w = g.mul_col(beta, w);
    let mu_part = g.mul(one_minus_w, mu);
    let beta_prime = g.add_col(beta_w, mu_part);

    let scaled = g.mul(gamma_prime, xhat);
    g.add(scaled, beta_prime)
}

/// Parameters of one refinement residual block: the normalization layer and
/// the following 1x1 conv.
#[derive(Debug, Clone)]
pub struct ResBlockParams {
    pub elain: ElainParams,
    pub conv: LayerParams,
}

impl ResBlockParams {
    pub fn init(d: usize, feature_dim: usize, rng: &mut impl Rng) -> Self {
        ResBlockParams { elain: ElainParams::init(d, feature_dim, rng), conv: init_layer(d, d, rng) }
    }

    pub fn to_vars(&self, g: &mut Graph, trainable: bool) -> ResBlockVars {
        ResBlockVars { elain: self.elain.to_vars(g, trainable), conv: self.conv.to_vars(g, trainable) }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ResBlockVars {
    pub elain: ElainVars,
    pub conv: LayerVars,
}

/// Residual block: h + conv(LeakyReLU(elain(h, f_id))).
pub fn elain_resblock(g: &mut Graph, h: Var, f_id: Var, p: ResBlockVars, mode: BlendMode) -> Var {
    let normed = elain(g, h, f_id, p.elain, mode);
    let act = g.leaky_relu(normed, LEAKY_SLOPE);
    let conv = pointwise_linear(g, act, p.conv);
    g.add(h, conv)
}

/// Stack layout of the refinement module: an input conv and a second conv at
/// the widest width, then one residual block per entry of `widths` with 1x1
/// convs mapping between consecutive widths, and a final conv down to 3
/// coordinate channels.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RefinementConfig {
    /// Residual block widths, widest first.
    pub widths: Vec<usize>,
    /// Channel count of the identity feature map conditioning the blocks.
    pub feature_dim: usize,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig { widths: vec![1024, 512, 256], feature_dim: 256 }
    }
}

impl RefinementConfig {
    /// Number of residual blocks.
    pub fn res_blocks(&self) -> usize {
        self.widths.len()
    }

    /// Output channel width of every layer row in the stack, in order.
    pub fn row_widths(&self) -> Vec<usize> {
        let mut rows = vec![self.widths[0], self.widths[0]];
        for k in 0..self.widths.len() {
            rows.push(self.widths[k]);
            let next = self.widths.get(k + 1).copied().unwrap_or(3);
            rows.push(next);
        }
        rows
    }

    /// Same topology with widths divided by `factor`.
    pub fn scaled_down(&self, factor: usize) -> Self {
        RefinementConfig {
            widths: self.widths.iter().map(|w| (w / factor).max(1)).collect(),
            feature_dim: (self.feature_dim / factor).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) || self.feature_dim == 0 {
            return Err(Error::Config("refinement widths must be nonempty and positive".into()));
        }
        Ok(())
    }
}

/// All refinement parameters, in stack order.
#[derive(Debug, Clone)]
pub struct RefinementParams {
    pub conv_in: LayerParams,
    pub conv_mid: LayerParams,
    pub blocks: Vec<ResBlockParams>,
    /// Width-changing convs between blocks; blocks[k] is followed by downs[k]
    /// for k < blocks-1.
    pub downs: Vec<LayerParams>,
    pub conv_out: LayerParams,
}

impl RefinementParams {
    pub fn init(cfg: &RefinementConfig, rng: &mut impl Rng) -> Self {
        let w0 = cfg.widths[0];
        let conv_in = init_layer(w0, 3, rng);
        let conv_mid = init_layer(w0, w0, rng);
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        for (k, &w) in cfg.widths.iter().enumerate() {
            blocks.push(ResBlockParams::init(w, cfg.feature_dim, rng));
            if let Some(&next) = cfg.widths.get(k + 1) {
                downs.push(init_layer(next, w, rng));
            }
        }
        let conv_out = init_layer(3, *cfg.widths.last().unwrap(), rng);
        RefinementParams { conv_in, conv_mid, blocks, downs, conv_out }
    }

    pub fn to_vars(&self, g: &mut Graph, trainable: bool) -> RefinementVars {
        RefinementVars {
            conv_in: self.conv_in.to_vars(g, trainable),
            conv_mid: self.conv_mid.to_vars(g, trainable),
            blocks: self.blocks.iter().map(|b| b.to_vars(g, trainable)).collect(),
            downs: self.downs.iter().map(|d| d.to_vars(g, trainable)).collect(),
            conv_out: self.conv_out.to_vars(g, trainable),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefinementVars {
    pub conv_in: LayerVars,
    pub conv_mid: LayerVars,
    pub blocks: Vec<ResBlockVars>,
    pub downs: Vec<LayerVars>,
    pub conv_out: LayerVars,
}

/// Map warped coordinates (3, n) and identity features (feature_dim, n) to
/// refined coordinates (3, n). Every residual block is conditioned on the
/// identity features; the final conv has no activation.
pub fn refine(
    g: &mut Graph,
    v_warp: Var,
    f_id: Var,
    vars: &RefinementVars,
    mode: BlendMode,
) -> Var {
    assert_eq!(g.shape(v_warp).0, 3, "refine: expected (3, n) warped coordinates");
    let mut h = pointwise_linear(g, v_warp, vars.conv_in);
    h = g.leaky_relu(h, LEAKY_SLOPE);
    h = pointwise_linear(g, h, vars.conv_mid);
    h = g.leaky_relu(h, LEAKY_SLOPE);
    for (k, block) in vars.blocks.iter().enumerate() {
        h = elain_resblock(g, h, f_id, *block, mode);
        if let Some(down) = vars.downs.get(k) {
            h = pointwise_linear(g, h, *down);
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
    }
    pointwise_linear(g, h, vars.conv_out)
}
