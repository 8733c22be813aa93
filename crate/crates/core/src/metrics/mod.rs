//! Training losses and evaluation metrics: reconstruction and edge losses,
//! point-wise mesh distance, Chamfer distance, and Earth Mover's Distance.
//!
//! Conventions: the reconstruction loss and the point-wise mesh distance are
//! the mean over vertices of the squared Euclidean distance (they share one
//! formula); Chamfer uses squared distances; EMD uses unsquared distances
//! with an exact assignment solve.

mod assignment;
mod kdtree;

use std::sync::Arc;

use ndarray::Array2;

pub use assignment::solve_assignment;
pub use kdtree::KdTree;

use crate::diffcore::{Graph, Var};
use crate::error::{Error, Result};
use crate::mesh::Adjacency;

/// Default weight of the reconstruction term in the combined loss.
pub const LAMBDA_REC_DEFAULT: f64 = 2000.0;

/// One training step's loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub rec: f64,
    pub edge: f64,
    pub total: f64,
    pub lambda_rec: f64,
}

/// Evaluation metrics for one transfer, in raw model units. The conventional
/// report scales PMD and CD by 1e3 and EMD by 1e2; see the scaled accessors.
#[derive(Debug, Clone, Copy)]
pub struct EvalReport {
    pub pmd: f64,
    pub cd: f64,
    pub emd: f64,
}

impl EvalReport {
    pub fn pmd_scaled(&self) -> f64 {
        self.pmd * 1e3
    }

    pub fn cd_scaled(&self) -> f64 {
        self.cd * 1e3
    }

    pub fn emd_scaled(&self) -> f64 {
        self.emd * 1e2
    }
}

fn check_same_len(a: &[[f64; 3]], b: &[[f64; 3]], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{what}: {} vs {} points", a.len(), b.len())));
    }
    Ok(())
}

fn sq_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Mean over vertices of the squared distance between corresponding entries.
/// Requires equal counts and identical ordering.
pub fn rec_loss(v_out: &[[f64; 3]], v_gt: &[[f64; 3]]) -> Result<f64> {
    check_same_len(v_out, v_gt, "rec_loss")?;
    if v_out.is_empty() {
        return Err(Error::InvalidArgument("rec_loss: empty vertex set".into()));
    }
    let sum: f64 = v_out.iter().zip(v_gt).map(|(a, b)| sq_dist(*a, *b)).sum();
    Ok(sum / v_out.len() as f64)
}

/// Tape version of [`rec_loss`] on (3, n) coordinate blocks.
pub fn rec_loss_graph(g: &mut Graph, v_out: Var, v_gt: Var) -> Var {
    let (_, n) = g.shape(v_out);
    assert_eq!(g.shape(v_out), g.shape(v_gt), "rec_loss: shape mismatch");
    let diff = g.sub(v_out, v_gt);
    let sq = g.mul(diff, diff);
    let total = g.sum_all(sq);
    g.scale(total, 1.0 / n as f64)
}

/// Sum over vertices v and neighbors p of |v - p|^2. Every undirected edge
/// is counted from both endpoints, matching the neighbor-sum form.
pub fn edge_loss(vertices: &[[f64; 3]], adj: &Adjacency) -> Result<f64> {
    if adj.vertex_count() != vertices.len() {
        return Err(Error::ShapeMismatch(format!(
            "edge_loss: adjacency over {} vertices, got {}",
            adj.vertex_count(),
            vertices.len()
        )));
    }
    let mut total = 0.0;
    for (v, ns) in adj.neighbors.iter().enumerate() {
        for &p in ns {
            if p >= vertices.len() {
                return Err(Error::InvalidArgument(format!(
                    "edge_loss: neighbor index {p} out of range"
                )));
            }
            total += sq_dist(vertices[v], vertices[p]);
        }
    }
    Ok(total)
}

/// Tape version of [`edge_loss`] on a (3, n) coordinate block and a directed
/// edge list (both orientations of every edge).
pub fn edge_loss_graph(g: &mut Graph, v_out: Var, directed_edges: Arc<Vec<[usize; 2]>>) -> Var {
    g.edge_sq_sum(v_out, directed_edges)
}

/// Combined loss: lambda_rec * rec + edge.
pub fn total_loss(rec: f64, edge: f64, lambda_rec: f64) -> Result<LossReport> {
    if lambda_rec <= 0.0 {
        return Err(Error::InvalidArgument(format!("lambda_rec must be > 0, got {lambda_rec}")));
    }
    Ok(LossReport { rec, edge, total: lambda_rec * rec + edge, lambda_rec })
}

/// Point-wise mesh distance: mean squared per-vertex distance between
/// equally ordered vertex sets. Identical formula to [`rec_loss`].
pub fn pmd(v_out: &[[f64; 3]], v_gt: &[[f64; 3]]) -> Result<f64> {
    rec_loss(v_out, v_gt)
}

/// Chamfer distance with squared distances: mean over P of the nearest
/// squared distance into Q, plus the same with the roles swapped. Accelerated
/// with a kd-tree per direction.
pub fn chamfer(p: &[[f64; 3]], q: &[[f64; 3]]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::InvalidArgument("chamfer: empty point set".into()));
    }
    let tq = KdTree::build(q);
    let tp = KdTree::build(p);
    let pq: f64 = p.iter().map(|x| tq.nearest_sq(*x)).sum::<f64>() / p.len() as f64;
    let qp: f64 = q.iter().map(|x| tp.nearest_sq(*x)).sum::<f64>() / q.len() as f64;
    Ok(pq + qp)
}

/// Earth Mover's Distance between equal-size point sets: the minimum over
/// bijections of the mean (unsquared) distance, solved exactly.
pub fn emd(p: &[[f64; 3]], q: &[[f64; 3]]) -> Result<f64> {
    check_same_len(p, q, "emd")?;
    if p.is_empty() {
        return Err(Error::InvalidArgument("emd: empty point set".into()));
    }
    let n = p.len();
    let cost = Array2::from_shape_fn((n, n), |(i, j)| sq_dist(p[i], q[j]).sqrt());
    let (_, total) = solve_assignment(&cost);
    Ok(total / n as f64)
}

/// All three evaluation metrics between an output and its ground truth.
pub fn evaluate_pair(v_out: &[[f64; 3]], v_gt: &[[f64; 3]]) -> Result<EvalReport> {
    Ok(EvalReport { pmd: pmd(v_out, v_gt)?, cd: chamfer(v_out, v_gt)?, emd: emd(v_out, v_gt)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check_graph;
    use crate::mesh::{vertex_neighbors, Mesh};
    use itertools::Itertools;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_points(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect()
    }

    fn emd_enumeration(p: &[[f64; 3]], q: &[[f64; 3]]) -> f64 {
        let n = p.len();
        (0..n)
            .permutations(n)
            .map(|perm| {
                perm.iter().enumerate().map(|(i, &j)| sq_dist(p[i], q[j]).sqrt()).sum::<f64>()
                    / n as f64
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn chamfer_brute(p: &[[f64; 3]], q: &[[f64; 3]]) -> f64 {
        let pq: f64 = p
            .iter()
            .map(|x| q.iter().map(|y| sq_dist(*x, *y)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / p.len() as f64;
        let qp: f64 = q
            .iter()
            .map(|x| p.iter().map(|y| sq_dist(*x, *y)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / q.len() as f64;
        pq + qp
    }

    #[test]
    fn rec_loss_cases() {
        let v = random_points(10, 1);
        assert_eq!(rec_loss(&v, &v).unwrap(), 0.0);

        let shifted: Vec<[f64; 3]> = v.iter().map(|p| [p[0] + 0.1, p[1], p[2]]).collect();
        let loss = rec_loss(&v, &shifted).unwrap();
        assert!((loss - 0.01).abs() < 1e-15, "{loss}");

        assert!(rec_loss(&v, &v[..5]).is_err());
    }

    #[test]
    fn rec_loss_gradient_is_scaled_difference() {
        let n = 6;
        let v = random_points(n, 2);
        let gt = random_points(n, 3);
        let to_cols = |pts: &[[f64; 3]]| {
            Array2::from_shape_fn((3, pts.len()), |(d, i)| pts[i][d])
        };
        let v_arr = to_cols(&v);
        let gt_arr = to_cols(&gt);

        let mut g = Graph::new();
        let vv = g.param(v_arr.clone());
        let gv = g.constant(gt_arr.clone());
        let loss = rec_loss_graph(&mut g, vv, gv);
        let grads = g.backward(loss);
        let grad = grads.get(vv).unwrap();
        for d in 0..3 {
            for i in 0..n {
                let expect = 2.0 * (v_arr[(d, i)] - gt_arr[(d, i)]) / n as f64;
                assert!((grad[(d, i)] - expect).abs() < 1e-14);
            }
        }

        let err = grad_check_graph(
            |g, vars| {
                let gv = g.constant(gt_arr.clone());
                rec_loss_graph(g, vars[0], gv)
            },
            &[v_arr],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "err {err}");
    }

    #[test]
    fn edge_loss_unit_edge_and_triangle() {
        // Single unit edge counted from both endpoints.
        let m = Mesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]],
            vec![[0, 1, 2]],
            "t",
        )
        .unwrap();
        let adj = Adjacency { neighbors: vec![vec![1], vec![0], vec![]] };
        assert_eq!(edge_loss(&m.vertices, &adj).unwrap(), 2.0);

        // Equilateral triangle with unit sides: 3 edges x 2 directions.
        let h = 3.0f64.sqrt() / 2.0;
        let tri = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, h, 0.0]];
        let tri_mesh = Mesh::new(tri.clone(), vec![[0, 1, 2]], "tri").unwrap();
        let adj = vertex_neighbors(&tri_mesh);
        let loss = edge_loss(&tri, &adj).unwrap();
        assert!((loss - 6.0).abs() < 1e-12, "{loss}");

        // Coincident vertices.
        let zeros = vec![[0.0; 3]; 3];
        assert_eq!(edge_loss(&zeros, &adj).unwrap(), 0.0);
    }

    #[test]
    fn edge_loss_graph_matches_plain_and_checks_gradient() {
        let m = Mesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.1, 0.0], [0.3, 1.0, 0.2], [0.9, 0.8, -0.4]],
            vec![[0, 1, 2], [1, 3, 2]],
            "m",
        )
        .unwrap();
        let adj = vertex_neighbors(&m);
        let edges = Arc::new(adj.directed_edges());
        let cols = Array2::from_shape_fn((3, 4), |(d, i)| m.vertices[i][d]);

        let mut g = Graph::new();
        let v = g.constant(cols.clone());
        let l = edge_loss_graph(&mut g, v, edges.clone());
        let plain = edge_loss(&m.vertices, &adj).unwrap();
        assert!((g.scalar(l) - plain).abs() < 1e-12);

        let err = grad_check_graph(
            |g, vars| edge_loss_graph(g, vars[0], edges.clone()),
            &[cols],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn total_loss_arithmetic() {
        let r = total_loss(0.0, 0.0, LAMBDA_REC_DEFAULT).unwrap();
        assert_eq!(r.total, 0.0);

        let r = total_loss(0.001, 0.5, 2000.0).unwrap();
        assert!((r.total - 2.5).abs() < 1e-12);

        assert_eq!(LAMBDA_REC_DEFAULT, 2000.0);
        assert!(total_loss(0.1, 0.1, 0.0).is_err());
    }

    #[test]
    fn pmd_cases() {
        let v = random_points(8, 4);
        assert_eq!(pmd(&v, &v).unwrap(), 0.0);

        let delta = 0.37;
        let shifted: Vec<[f64; 3]> = v.iter().map(|p| [p[0] + delta, p[1], p[2]]).collect();
        assert!((pmd(&v, &shifted).unwrap() - delta * delta).abs() < 1e-12);
        assert_eq!(pmd(&v, &shifted).unwrap(), pmd(&shifted, &v).unwrap());
    }

    #[test]
    fn chamfer_cases_and_oracle() {
        let p = random_points(100, 5);
        assert_eq!(chamfer(&p, &p).unwrap(), 0.0);

        let a = vec![[0.0, 0.0, 0.0]];
        let b = vec![[1.0, 0.0, 0.0]];
        assert_eq!(chamfer(&a, &b).unwrap(), 2.0);

        let q = random_points(80, 6);
        assert_eq!(chamfer(&p, &q).unwrap(), chamfer_brute(&p, &q));
        assert!(chamfer(&p, &[]).is_err());
    }

    #[test]
    fn emd_cases_and_oracle() {
        let p = random_points(6, 7);
        assert_eq!(emd(&p, &p).unwrap(), 0.0);

        let a = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let b = vec![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        assert_eq!(emd(&a, &b).unwrap(), 0.0);

        for seed in 0..10 {
            let p = random_points(6, 100 + seed);
            let q = random_points(6, 200 + seed);
            let fast = emd(&p, &q).unwrap();
            let slow = emd_enumeration(&p, &q);
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
        assert!(emd(&p, &p[..3]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn metrics_symmetric_and_translation_invariant(seed in 0u64..300) {
            let p = random_points(12, seed);
            let q = random_points(12, seed + 1000);
            let t = [0.83, -0.41, 0.27];
            let pt: Vec<[f64; 3]> = p.iter().map(|v| [v[0]+t[0], v[1]+t[1], v[2]+t[2]]).collect();
            let qt: Vec<[f64; 3]> = q.iter().map(|v| [v[0]+t[0], v[1]+t[1], v[2]+t[2]]).collect();

            let cd = chamfer(&p, &q).unwrap();
            prop_assert!((cd - chamfer(&q, &p).unwrap()).abs() < 1e-12);
            prop_assert!((cd - chamfer(&pt, &qt).unwrap()).abs() < 1e-9);

            let e = emd(&p, &q).unwrap();
            prop_assert!((e - emd(&q, &p).unwrap()).abs() < 1e-12);
            prop_assert!((e - emd(&pt, &qt).unwrap()).abs() < 1e-9);

            // Identity bijection is feasible, so it upper-bounds EMD.
            let identity_mean: f64 =
                p.iter().zip(&q).map(|(a, b)| sq_dist(*a, *b).sqrt()).sum::<f64>() / p.len() as f64;
            prop_assert!(e <= identity_mean + 1e-12);
            prop_assert!(e >= 0.0);
        }

        #[test]
        fn total_loss_identity_holds(rec in 0.0f64..10.0, edge in 0.0f64..10.0, lambda in 0.1f64..5000.0) {
            let r = total_loss(rec, edge, lambda).unwrap();
            prop_assert!((r.total - (lambda * rec + edge)).abs() < 1e-12);
        }

        #[test]
        fn edge_loss_contracts_quadratically(s in 0.05f64..0.95) {
            let m = Mesh::new(
                vec![[0.2, 0.0, 0.1], [1.0, 0.2, 0.0], [0.4, 1.1, 0.3], [0.8, 0.9, -0.5]],
                vec![[0, 1, 2], [1, 3, 2]],
                "m",
            ).unwrap();
            let adj = vertex_neighbors(&m);
            let centroid = {
                let mut c = [0.0; 3];
                for v in &m.vertices {
                    for k in 0..3 { c[k] += v[k] / 4.0; }
                }
                c
            };
            let contracted: Vec<[f64; 3]> = m
                .vertices
                .iter()
                .map(|v| [centroid[0] + s*(v[0]-centroid[0]), centroid[1] + s*(v[1]-centroid[1]), centroid[2] + s*(v[2]-centroid[2])])
                .collect();
            let full = edge_loss(&m.vertices, &adj).unwrap();
            let small = edge_loss(&contracted, &adj).unwrap();
            prop_assert!((small - s * s * full).abs() < 1e-9 * full.max(1.0));
            prop_assert!(small < full);
        }
    }
}
