//! Correspondence learning: per-vertex feature extraction, cosine-similarity
//! correlation, entropic optimal transport via Sinkhorn scaling, and
//! barycentric warping of the pose mesh.

use ndarray::{Array2, Axis};
use rand::Rng;

use crate::diffcore::{
    init_layer, instance_norm, pointwise_linear, Graph, LayerParams, LayerVars, Var, LEAKY_SLOPE,
};
use crate::error::{Error, Result};
use crate::mesh::Mesh;

/// Norm floor applied to feature columns before cosine normalization.
pub const NORM_FLOOR: f64 = 1e-12;

/// Channel widths of the feature extractor and its adaptive tail.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ExtractorConfig {
    /// Input width followed by the three stacked conv widths.
    pub widths: Vec<usize>,
    /// Residual blocks in the adaptive feature block.
    pub res_blocks: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig { widths: vec![3, 64, 128, 256], res_blocks: 4 }
    }
}

impl ExtractorConfig {
    /// Output channel count (the last conv width).
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("extractor needs at least one width")
    }

    /// Same topology with every hidden width divided by `factor`; used for
    /// gradient-check sized instances.
    pub fn scaled_down(&self, factor: usize) -> Self {
        let mut widths = self.widths.clone();
        for w in widths.iter_mut().skip(1) {
            *w = (*w / factor).max(1);
        }
        ExtractorConfig { widths, res_blocks: self.res_blocks }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("extractor widths must be >= 2 positive entries".into()));
        }
        Ok(())
    }
}

/// Parameters of the shared feature extractor: three conv+norm+activation
/// stages, a stack of residual blocks, and a final 1x1 conv.
#[derive(Debug, Clone)]
pub struct ExtractorParams {
    pub convs: Vec<LayerParams>,
    pub res: Vec<(LayerParams, LayerParams)>,
    pub out: LayerParams,
}

impl ExtractorParams {
    pub fn init(cfg: &ExtractorConfig, rng: &mut impl Rng) -> Self {
        let convs = cfg.widths.windows(2).map(|w| init_layer(w[1], w[0], rng)).collect();
        let d = cfg.feature_dim();
        let res = (0..cfg.res_blocks)
            .map(|_| (init_layer(d, d, rng), init_layer(d, d, rng)))
            .collect();
        let out = init_layer(d, d, rng);
        ExtractorParams { convs, res, out }
    }

    pub fn to_vars(&self, g: &mut Graph, trainable: bool) -> ExtractorVars {
        ExtractorVars {
            convs: self.convs.iter().map(|p| p.to_vars(g, trainable)).collect(),
            res: self
                .res
                .iter()
                .map(|(a, b)| (a.to_vars(g, trainable), b.to_vars(g, trainable)))
                .collect(),
            out: self.out.to_vars(g, trainable),
        }
    }
}

/// Graph handles for the extractor parameters.
#[derive(Debug, Clone)]
pub struct ExtractorVars {
    pub convs: Vec<LayerVars>,
    pub res: Vec<(LayerVars, LayerVars)>,
    pub out: LayerVars,
}

impl ExtractorVars {
    pub fn all_layer_vars(&self) -> Vec<LayerVars> {
        let mut v: Vec<LayerVars> = self.convs.clone();
        for (a, b) in &self.res {
            v.push(*a);
            v.push(*b);
        }
        v.push(self.out);
        v
    }
}

/// Per-vertex feature extraction on a (3, n) vertex block: three
/// conv/instance-norm/LeakyReLU stages, then the residual adaptive block and
/// a final 1x1 conv. Output is (feature_dim, n). Per-vertex maps plus
/// permutation-invariant statistics make this permutation equivariant.
pub fn extract_features(g: &mut Graph, x: Var, vars: &ExtractorVars) -> Var {
    let mut h = x;
    for conv in &vars.convs {
        h = pointwise_linear(g, h, *conv);
        let (normed, _, _) = instance_norm(g, h);
        h = g.leaky_relu(normed, LEAKY_SLOPE);
    }
    for (a, b) in &vars.res {
        let mut r = pointwise_linear(g, h, *a);
        let (n1, _, _) = instance_norm(g, r);
        r = g.leaky_relu(n1, LEAKY_SLOPE);
        r = pointwise_linear(g, r, *b);
        let (n2, _, _) = instance_norm(g, r);
        h = g.add(h, n2);
    }
    pointwise_linear(g, h, vars.out)
}

/// Normalize every column of a (d, n) block to unit length, flooring squared
/// norms at `NORM_FLOOR`^2 so zero columns stay finite.
fn normalize_columns(g: &mut Graph, f: Var) -> Var {
    let sq = g.mul(f, f);
    let sums = g.col_sum(sq);
    let floored = g.clamp_min(sums, NORM_FLOOR * NORM_FLOOR);
    let norms = g.sqrt(floored);
    let inv = g.recip(norms);
    g.mul_row(f, inv)
}

/// Cosine-similarity correlation between identity features (d, n_id) and
/// pose features (d, n_pose), giving an (n_id, n_pose) score matrix.
pub fn correlation_graph(g: &mut Graph, f_id: Var, f_pose: Var) -> Var {
    assert_eq!(g.shape(f_id).0, g.shape(f_pose).0, "correlation: channel mismatch");
    let ni = normalize_columns(g, f_id);
    let np = normalize_columns(g, f_pose);
    let nit = g.transpose(ni);
    g.matmul(nit, np)
}

/// Cosine-similarity correlation on plain arrays. Warns on zero-norm columns
/// (they are clamped to the norm floor).
pub fn correlation(f_id: &Array2<f64>, f_pose: &Array2<f64>) -> Result<Array2<f64>> {
    if f_id.dim().0 != f_pose.dim().0 {
        return Err(Error::ShapeMismatch(format!(
            "correlation: channel mismatch {} vs {}",
            f_id.dim().0,
            f_pose.dim().0
        )));
    }
    for (label, f) in [("identity", f_id), ("pose", f_pose)] {
        for (j, col) in f.columns().into_iter().enumerate() {
            let n2: f64 = col.iter().map(|x| x * x).sum();
            if n2 < NORM_FLOOR * NORM_FLOOR {
                eprintln!("warning: zero-norm {label} feature column {j}; clamping");
            }
        }
    }
    let mut g = Graph::new();
    let a = g.constant(f_id.clone());
    let b = g.constant(f_pose.clone());
    let c = correlation_graph(&mut g, a, b);
    Ok(g.value(c).clone())
}

/// Cost matrix for the transport problem: Z = 1 - C.
pub fn cost_from_correlation(g: &mut Graph, c: Var) -> Var {
    let neg = g.neg(c);
    g.add_const(neg, 1.0)
}

/// Nonnegative transport plan between the two vertex sets, with the
/// regularization strength and iteration count that produced it.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    /// (n_id, n_pose); rows sum to 1/n_id after the final row scaling.
    pub matrix: Array2<f64>,
    pub epsilon: f64,
    pub iterations: usize,
}

impl TransportPlan {
    pub fn n_id(&self) -> usize {
        self.matrix.dim().0
    }

    pub fn n_pose(&self) -> usize {
        self.matrix.dim().1
    }

    /// Worst absolute deviation of a row sum from 1/n_id.
    pub fn row_sum_error(&self) -> f64 {
        let target = 1.0 / self.n_id() as f64;
        self.matrix
            .sum_axis(Axis(1))
            .iter()
            .map(|s| (s - target).abs())
            .fold(0.0, f64::max)
    }

    /// L1 distance of the column marginal from the uniform target. Reported,
    /// not assumed: a truncated iteration count leaves column error behind.
    pub fn col_marginal_l1_error(&self) -> f64 {
        col_l1_error(&self.matrix)
    }

    /// Hard correspondence: for each identity vertex, the pose vertex with
    /// the largest plan entry.
    pub fn row_argmax(&self) -> Vec<usize> {
        self.matrix
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(j, _)| j)
                    .unwrap()
            })
            .collect()
    }
}

fn col_l1_error(t: &Array2<f64>) -> f64 {
    let target = 1.0 / t.dim().1 as f64;
    t.sum_axis(Axis(0)).iter().map(|s| (s - target).abs()).sum()
}

fn check_sinkhorn_args(z: &Array2<f64>, epsilon: f64, i_max: usize) -> Result<()> {
    if z.is_empty() {
        return Err(Error::InvalidArgument("sinkhorn: empty cost matrix".into()));
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("sinkhorn cost matrix".into()));
    }
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument(format!("sinkhorn: epsilon must be > 0, got {epsilon}")));
    }
    if i_max == 0 {
        return Err(Error::InvalidArgument("sinkhorn: i_max must be >= 1".into()));
    }
    Ok(())
}

/// Entropic optimal transport by alternating scaling: U = exp(-Z/eps), a
/// uniform row marginal 1/n_id and column marginal 1/n_pose, i_max rounds of
/// column then row scaling, plan = diag(a) U diag(b). Runs in the log domain
/// (with eps = 0.03 and costs up to 2, U entries reach 1e-29, far below
/// where the plain scaling keeps relative precision); the iterates are
/// algebraically identical to the scaling form. Ends on the row scaling, so
/// row sums are exact up to rounding.
pub fn sinkhorn(z: &Array2<f64>, epsilon: f64, i_max: usize) -> Result<TransportPlan> {
    check_sinkhorn_args(z, epsilon, i_max)?;
    let (t, _) = sinkhorn_log_domain(z, epsilon, i_max, false);
    Ok(TransportPlan { matrix: t, epsilon, iterations: i_max })
}

/// Like [`sinkhorn`], additionally returning the column-marginal L1 error of
/// the interim plan after every iteration.
pub fn sinkhorn_with_trace(
    z: &Array2<f64>,
    epsilon: f64,
    i_max: usize,
) -> Result<(TransportPlan, Vec<f64>)> {
    check_sinkhorn_args(z, epsilon, i_max)?;
    let (t, trace) = sinkhorn_log_domain(z, epsilon, i_max, true);
    Ok((TransportPlan { matrix: t, epsilon, iterations: i_max }, trace))
}

fn sinkhorn_log_domain(
    z: &Array2<f64>,
    epsilon: f64,
    i_max: usize,
    trace: bool,
) -> (Array2<f64>, Vec<f64>) {
    let (n, m) = z.dim();
    let k = z.mapv(|x| -x / epsilon);
    let log_an = -(n as f64).ln();
    let log_bm = -(m as f64).ln();

    let mut alpha = vec![log_an; n];
    let mut beta = vec![0.0f64; m];
    let mut errors = Vec::new();

    for _ in 0..i_max {
        for (j, b) in beta.iter_mut().enumerate() {
            *b = log_bm - lse((0..n).map(|i| k[(i, j)] + alpha[i]));
        }
        for (i, a) in alpha.iter_mut().enumerate() {
            *a = log_an - lse((0..m).map(|j| k[(i, j)] + beta[j]));
        }
        if trace {
            errors.push(col_l1_error(&assemble(&k, &alpha, &beta)));
        }
    }
    (assemble(&k, &alpha, &beta), errors)
}

fn assemble(k: &Array2<f64>, alpha: &[f64], beta: &[f64]) -> Array2<f64> {
    Array2::from_shape_fn(k.dim(), |(i, j)| (alpha[i] + k[(i, j)] + beta[j]).exp())
}

fn lse(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Differentiable Sinkhorn: the same log-domain recurrence unrolled on the
/// tape, so gradients flow through all i_max iterations into the cost matrix.
pub fn sinkhorn_graph(g: &mut Graph, z: Var, epsilon: f64, i_max: usize) -> Var {
    assert!(epsilon > 0.0, "sinkhorn: epsilon must be > 0");
    assert!(i_max >= 1, "sinkhorn: i_max must be >= 1");
    let (n, m) = g.shape(z);
    let k = g.scale(z, -1.0 / epsilon);
    let log_an = g.constant(Array2::from_elem((n, 1), -(n as f64).ln()));
    let log_bm = g.constant(Array2::from_elem((1, m), -(m as f64).ln()));

    let mut alpha = log_an;
    let mut beta = log_bm; // overwritten on the first iteration
    for _ in 0..i_max {
        let ka = g.add_col(k, alpha);
        let cl = g.col_lse(ka);
        beta = g.sub(log_bm, cl);
        let kb = g.add_row(k, beta);
        let rl = g.row_lse(kb);
        alpha = g.sub(log_an, rl);
    }
    let ka = g.add_col(k, alpha);
    let kab = g.add_row(ka, beta);
    g.exp(kab)
}

/// Warp the pose vertices through a transport plan: each output vertex is
/// n_id * sum_j T(i,j) * v_pose(j). The n_id factor turns the 1/n_id row
/// mass into convex weights; without it the warped mesh collapses toward the
/// origin.
pub fn warp(plan: &TransportPlan, v_pose: &Array2<f64>) -> Result<Array2<f64>> {
    if plan.n_pose() != v_pose.dim().0 || v_pose.dim().1 != 3 {
        return Err(Error::ShapeMismatch(format!(
            "warp: plan is {}x{} but pose vertices are {}x{}",
            plan.n_id(),
            plan.n_pose(),
            v_pose.dim().0,
            v_pose.dim().1
        )));
    }
    for (i, row) in plan.matrix.rows().into_iter().enumerate() {
        let s: f64 = row.sum();
        if s < 1e-15 {
            return Err(Error::InvalidArgument(format!(
                "warp: transport plan row {i} sums to {s:.3e}, below 1e-15"
            )));
        }
    }
    Ok(plan.matrix.dot(v_pose) * plan.n_id() as f64)
}

/// Tape version of [`warp`] on an (n_id, n_pose) plan node and an
/// (n_pose, 3) vertex node.
pub fn warp_graph(g: &mut Graph, plan: Var, v_pose: Var) -> Var {
    let n_id = g.shape(plan).0;
    let w = g.matmul(plan, v_pose);
    g.scale(w, n_id as f64)
}

/// Rebuild a mesh from warped coordinates: the output inherits the identity
/// mesh's faces, vertex count, and order.
pub fn build_warped_mesh(v_warp: &Array2<f64>, identity: &Mesh) -> Result<Mesh> {
    if v_warp.dim() != (identity.vertex_count(), 3) {
        return Err(Error::ShapeMismatch(format!(
            "build_warped_mesh: {} warped vertices for identity mesh with {}",
            v_warp.dim().0,
            identity.vertex_count()
        )));
    }
    let vertices = v_warp
        .rows()
        .into_iter()
        .map(|r| [r[0], r[1], r[2]])
        .collect();
    Ok(Mesh {
        vertices,
        faces: identity.faces.clone(),
        name: format!("{}_warped", identity.name),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check_graph;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Independent oracle: the plain scaling form of the alternating
    /// projection, iterated until both marginals are within `tol`.
    pub(crate) fn fixed_point_oracle(z: &Array2<f64>, epsilon: f64, tol: f64) -> Array2<f64> {
        let (n, m) = z.dim();
        let u = z.mapv(|x| (-x / epsilon).exp());
        let mut a = vec![1.0 / n as f64; n];
        let mut b = vec![1.0 / m as f64; m];
        for _ in 0..100_000 {
            for j in 0..m {
                let s: f64 = (0..n).map(|i| u[(i, j)] * a[i]).sum();
                b[j] = (1.0 / m as f64) / s;
            }
            for (i, ai) in a.iter_mut().enumerate() {
                let s: f64 = (0..m).map(|j| u[(i, j)] * b[j]).sum();
                *ai = (1.0 / n as f64) / s;
            }
            let t = plan_from(&u, &a, &b);
            let row_err = {
                let target = 1.0 / n as f64;
                t.sum_axis(Axis(1)).iter().map(|s| (s - target).abs()).fold(0.0, f64::max)
            };
            if row_err < tol && col_l1_error(&t) < tol {
                break;
            }
        }
        plan_from(&u, &a, &b)
    }

    fn plan_from(u: &Array2<f64>, a: &[f64], b: &[f64]) -> Array2<f64> {
        Array2::from_shape_fn(u.dim(), |(i, j)| a[i] * u[(i, j)] * b[j])
    }

    #[test]
    fn sinkhorn_single_cell() {
        let plan = sinkhorn(&array![[0.7]], 0.03, 5).unwrap();
        assert!((plan.matrix[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sinkhorn_constant_cost_is_uniform() {
        let z = Array2::from_elem((2, 2), 1.3);
        let plan = sinkhorn(&z, 0.03, 5).unwrap();
        for &v in plan.matrix.iter() {
            assert!((v - 0.25).abs() < 1e-14);
        }
    }

    #[test]
    fn sinkhorn_antidiagonal_cost_concentrates() {
        let z = array![[0.0, 1.0], [1.0, 0.0]];
        let plan = sinkhorn(&z, 0.03, 200).unwrap();
        assert!((plan.matrix[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((plan.matrix[(1, 1)] - 0.5).abs() < 1e-12);
        assert!(plan.matrix[(0, 1)] <= 1e-14);
        assert!(plan.matrix[(1, 0)] <= 1e-14);

        let oracle = fixed_point_oracle(&z, 0.03, 1e-12);
        for (a, b) in plan.matrix.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sinkhorn_matches_oracle_rectangular() {
        // Small random instances can converge slowly at eps = 0.03; 800
        // rounds is past this one's slow mode.
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let z = Array2::from_shape_fn((7, 11), |_| rng.gen_range(0.0..2.0));
        let plan = sinkhorn(&z, 0.03, 800).unwrap();
        let oracle = fixed_point_oracle(&z, 0.03, 1e-12);
        for (a, b) in plan.matrix.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(plan.row_sum_error() <= 1e-12);
    }

    #[test]
    fn sinkhorn_col_error_non_increasing() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let z = Array2::from_shape_fn((32, 48), |_| rng.gen_range(0.0..2.0));
        let (_, trace) = sinkhorn_with_trace(&z, 0.03, 50).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "column error increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn sinkhorn_graph_matches_plain() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let z = Array2::from_shape_fn((5, 8), |_| rng.gen_range(0.0..2.0));
        let plan = sinkhorn(&z, 0.03, 5).unwrap();
        let mut g = Graph::new();
        let zv = g.constant(z);
        let t = sinkhorn_graph(&mut g, zv, 0.03, 5);
        for (a, b) in g.value(t).iter().zip(plan.matrix.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn sinkhorn_rejects_bad_args() {
        let z = array![[0.0, 1.0], [1.0, 0.0]];
        assert!(sinkhorn(&z, 0.0, 5).is_err());
        assert!(sinkhorn(&z, -1.0, 5).is_err());
        assert!(sinkhorn(&z, 0.03, 0).is_err());
        assert!(sinkhorn(&array![[f64::NAN]], 0.03, 5).is_err());
    }

    #[test]
    fn sinkhorn_gradient_flows_through_unrolled_loop() {
        // The chain rule through the unrolled iterations is epsilon-agnostic;
        // check it at a moderate epsilon where the plan has no entries near
        // the round-off floor (tiny-epsilon plans are mostly ~0, and central
        // differences on those coordinates measure pure cancellation noise).
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let z = Array2::from_shape_fn((4, 6), |_| rng.gen_range(0.0..2.0));
        let err = grad_check_graph(
            |g, vars| {
                let t = sinkhorn_graph(g, vars[0], 0.3, 4);
                let sq = g.mul(t, t);
                g.sum_all(sq)
            },
            &[z],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "err {err}");
    }

    #[test]
    fn permutation_recovery_row_argmax() {
        let mut rng = ChaCha12Rng::seed_from_u64(100);
        let n = 16;
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        // Permuted-diagonal cost with margin >= 0.3.
        let z = Array2::from_shape_fn((n, n), |(i, j)| {
            if perm[i] == j {
                rng.gen_range(0.0..0.2)
            } else {
                rng.gen_range(0.5..2.0)
            }
        });
        let plan = sinkhorn(&z, 0.03, 50).unwrap();
        assert_eq!(plan.row_argmax(), perm);
    }

    #[test]
    fn correlation_basic_cases() {
        let f_id = array![[1.0, 0.0, -1.0], [0.0, 1.0, 0.0]];
        let f_pose = array![[1.0, 0.0], [0.0, 1.0]];
        let c = correlation(&f_id, &f_pose).unwrap();
        assert!((c[(0, 0)] - 1.0).abs() < 1e-12); // identical direction
        assert!(c[(0, 1)].abs() < 1e-12); // orthogonal
        assert!((c[(2, 0)] + 1.0).abs() < 1e-12); // opposite
    }

    #[test]
    fn correlation_zero_column_clamped() {
        let f_id = array![[0.0], [0.0]];
        let f_pose = array![[1.0], [0.0]];
        let c = correlation(&f_id, &f_pose).unwrap();
        assert!(c[(0, 0)].abs() < 1e-6);
        assert!(c[(0, 0)].is_finite());
    }

    #[test]
    fn extractor_output_shape_and_default_widths() {
        let cfg = ExtractorConfig::default();
        assert_eq!(cfg.widths, vec![3, 64, 128, 256]);
        assert_eq!(cfg.res_blocks, 4);

        let small = cfg.scaled_down(32);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let params = ExtractorParams::init(&small, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Array2::from_shape_fn((3, 10), |(i, j)| (i + j) as f64 * 0.1));
        let vars = params.to_vars(&mut g, false);
        let f = extract_features(&mut g, x, &vars);
        assert_eq!(g.shape(f), (small.feature_dim(), 10));
    }

    #[test]
    fn extractor_paper_scale_output_shape() {
        // Full default widths at the body-scan vertex count: 6890 x 256.
        let cfg = ExtractorConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(60);
        let params = ExtractorParams::init(&cfg, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Array2::from_shape_fn((3, 6890), |_| rng.gen_range(-1.0..1.0)));
        let vars = params.to_vars(&mut g, false);
        let f = extract_features(&mut g, x, &vars);
        assert_eq!(g.shape(f), (256, 6890));
    }

    #[test]
    fn scalar_readout_gradient_wrt_vertices() {
        // d(sum f^2)/dV through the whole extractor.
        let cfg = ExtractorConfig { widths: vec![3, 2, 2, 4], res_blocks: 1 };
        let mut rng = ChaCha12Rng::seed_from_u64(61);
        let params = ExtractorParams::init(&cfg, &mut rng);
        let v = Array2::from_shape_fn((3, 7), |_| rng.gen_range(-1.0..1.0));
        let err = grad_check_graph(
            |g, vars| {
                let ev = params.to_vars(g, false);
                let f = extract_features(g, vars[0], &ev);
                let sq = g.mul(f, f);
                g.sum_all(sq)
            },
            &[v],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "err {err}");
    }

    #[test]
    fn extractor_permutation_equivariant() {
        let cfg = ExtractorConfig::default().scaled_down(16);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let params = ExtractorParams::init(&cfg, &mut rng);
        let n = 12;
        let x = Array2::from_shape_fn((3, n), |_| rng.gen_range(-1.0..1.0));
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            p.shuffle(&mut rng);
            p
        };
        let mut xp = Array2::zeros((3, n));
        for (old, &new) in perm.iter().enumerate() {
            xp.column_mut(new).assign(&x.column(old));
        }

        let run = |input: Array2<f64>| {
            let mut g = Graph::new();
            let xv = g.constant(input);
            let vars = params.to_vars(&mut g, false);
            let f = extract_features(&mut g, xv, &vars);
            g.value(f).clone()
        };
        let f = run(x);
        let fp = run(xp);
        for (old, &new) in perm.iter().enumerate() {
            for d in 0..cfg.feature_dim() {
                assert!((f[(d, old)] - fp[(d, new)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn warp_permutation_plan_selects() {
        let n = 4;
        let mut t = Array2::zeros((n, n));
        let perm = [2usize, 0, 3, 1];
        for (i, &j) in perm.iter().enumerate() {
            t[(i, j)] = 1.0 / n as f64;
        }
        let plan = TransportPlan { matrix: t, epsilon: 0.03, iterations: 1 };
        let v = array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let w = warp(&plan, &v).unwrap();
        for (i, &j) in perm.iter().enumerate() {
            assert!((w[(i, 0)] - v[(j, 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_uniform_plan_gives_centroid() {
        let n_id = 3;
        let n_pose = 5;
        let plan = TransportPlan {
            matrix: Array2::from_elem((n_id, n_pose), 1.0 / (n_id * n_pose) as f64),
            epsilon: 0.03,
            iterations: 1,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let v = Array2::from_shape_fn((n_pose, 3), |_| rng.gen_range(-1.0..1.0));
        let centroid = v.mean_axis(Axis(0)).unwrap();
        let w = warp(&plan, &v).unwrap();
        for i in 0..n_id {
            for c in 0..3 {
                assert!((w[(i, c)] - centroid[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn warp_degenerate_row_reports_index() {
        let mut t = Array2::from_elem((2, 2), 0.25);
        t[(1, 0)] = 0.0;
        t[(1, 1)] = 0.0;
        let plan = TransportPlan { matrix: t, epsilon: 0.03, iterations: 1 };
        let v = array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let err = warp(&plan, &v).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }

    #[test]
    fn build_warped_mesh_inherits_identity_structure() {
        let identity = Mesh::new(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2]],
            "id",
        )
        .unwrap();
        let v = array![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
        let m = build_warped_mesh(&v, &identity).unwrap();
        assert_eq!(m.faces, identity.faces);
        assert_eq!(m.vertex_count(), identity.vertex_count());

        let same = build_warped_mesh(
            &Array2::from_shape_fn((3, 3), |(i, j)| identity.vertices[i][j]),
            &identity,
        )
        .unwrap();
        assert_eq!(same.vertices, identity.vertices);

        assert!(build_warped_mesh(&Array2::zeros((5, 3)), &identity).is_err());
    }

    #[test]
    fn end_to_end_warp_gradient_reaches_extractor() {
        // Toy pair: gradient of sum(V_warp^2) w.r.t. extractor parameters.
        let cfg = ExtractorConfig { widths: vec![3, 2, 2, 3], res_blocks: 1 };
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let params = ExtractorParams::init(&cfg, &mut rng);
        let v_id = Array2::from_shape_fn((3, 6), |_| rng.gen_range(-1.0..1.0));
        let v_pose = Array2::from_shape_fn((3, 6), |_| rng.gen_range(-1.0..1.0));

        // Check gradients w.r.t. the first conv weight and the output weight.
        let flat: Vec<Array2<f64>> =
            vec![params.convs[0].weight.as_ref().clone(), params.out.weight.as_ref().clone()];
        let build = |g: &mut Graph, vars: &[Var]| {
            let conv0_b = g.param_shared(params.convs[0].bias.clone(), false);
            let out_b = g.param_shared(params.out.bias.clone(), false);
            let mut layer_vars: Vec<LayerVars> = vec![LayerVars { weight: vars[0], bias: conv0_b }];
            for lp in params.convs.iter().skip(1) {
                layer_vars.push(lp.to_vars(g, false));
            }
            let res_vars: Vec<(LayerVars, LayerVars)> =
                params.res.iter().map(|(a, b)| (a.to_vars(g, false), b.to_vars(g, false))).collect();
            let ev = ExtractorVars {
                convs: layer_vars,
                res: res_vars,
                out: LayerVars { weight: vars[1], bias: out_b },
            };
            let xi = g.constant(v_id.clone());
            let xp = g.constant(v_pose.clone());
            let fi = extract_features(g, xi, &ev);
            let fp = extract_features(g, xp, &ev);
            let c = correlation_graph(g, fi, fp);
            let z = cost_from_correlation(g, c);
            let t = sinkhorn_graph(g, z, 0.1, 3);
            let vp = g.constant(v_pose.t().to_owned());
            let w = warp_graph(g, t, vp);
            let sq = g.mul(w, w);
            g.sum_all(sq)
        };
        let err = grad_check_graph(build, &flat, 1e-6).unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn correlation_entries_bounded(seed in 0u64..500) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let f_id = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-3.0..3.0));
            let f_pose = Array2::from_shape_fn((4, 5), |_| rng.gen_range(-3.0..3.0));
            let c = correlation(&f_id, &f_pose).unwrap();
            for &v in c.iter() {
                prop_assert!(v >= -1.0 - 1e-9 && v <= 1.0 + 1e-9);
            }
        }

        #[test]
        fn sinkhorn_plan_nonnegative_rows_exact(seed in 0u64..500) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let z = Array2::from_shape_fn((6, 9), |_| rng.gen_range(0.0..2.0));
            let plan = sinkhorn(&z, 0.03, 5).unwrap();
            for &v in plan.matrix.iter() {
                prop_assert!(v >= 0.0);
            }
            prop_assert!(plan.row_sum_error() <= 1e-12);
        }

        #[test]
        fn warped_vertices_inside_pose_hull(seed in 0u64..200) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let z = Array2::from_shape_fn((5, 7), |_| rng.gen_range(0.0..2.0));
            let plan = sinkhorn(&z, 0.1, 20).unwrap();
            let v = Array2::from_shape_fn((7, 3), |_| rng.gen_range(-2.0..2.0));
            let w = warp(&plan, &v).unwrap();
            for c in 0..3 {
                let lo = v.column(c).iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = v.column(c).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for i in 0..5 {
                    prop_assert!(w[(i, c)] >= lo - 1e-9 && w[(i, c)] <= hi + 1e-9);
                }
            }
        }
    }
}
