//! Minimal 3D kd-tree for nearest-neighbor queries.

const NONE: u32 = u32::MAX;

struct Node {
    p: [f64; 3],
    axis: u8,
    left: u32,
    right: u32,
}

pub struct KdTree {
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn build(points: &[[f64; 3]]) -> Self {
        let mut pts = points.to_vec();
        let mut nodes = Vec::with_capacity(points.len());
        build_rec(&mut pts, 0, &mut nodes);
        KdTree { nodes }
    }

    /// Squared distance from `q` to the closest stored point.
    pub fn nearest_sq(&self, q: [f64; 3]) -> f64 {
        assert!(!self.nodes.is_empty(), "nearest_sq on empty tree");
        let mut best = f64::INFINITY;
        self.search(0, q, &mut best);
        best
    }

    fn search(&self, id: u32, q: [f64; 3], best: &mut f64) {
        if id == NONE {
            return;
        }
        let node = &self.nodes[id as usize];
        let d2 = dist_sq(node.p, q);
        if d2 < *best {
            *best = d2;
        }
        let axis = node.axis as usize;
        let delta = q[axis] - node.p[axis];
        let (near, far) = if delta < 0.0 { (node.left, node.right) } else { (node.right, node.left) };
        self.search(near, q, best);
        if delta * delta < *best {
            self.search(far, q, best);
        }
    }
}

fn build_rec(pts: &mut [[f64; 3]], depth: usize, nodes: &mut Vec<Node>) -> u32 {
    if pts.is_empty() {
        return NONE;
    }
    let axis = depth % 3;
    let mid = pts.len() / 2;
    pts.select_nth_unstable_by(mid, |a, b| a[axis].partial_cmp(&b[axis]).unwrap());
    let id = nodes.len() as u32;
    nodes.push(Node { p: pts[mid], axis: axis as u8, left: NONE, right: NONE });
    let (lo, rest) = pts.split_at_mut(mid);
    let (_, hi) = rest.split_at_mut(1);
    let left = build_rec(lo, depth + 1, nodes);
    let right = build_rec(hi, depth + 1, nodes);
    nodes[id as usize].left = left;
    nodes[id as usize].right = right;
    id
}

fn dist_sq(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}
