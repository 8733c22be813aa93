//! Procedural articulated-body generator with separable identity and pose
//! parameters, so ground-truth triples (identity mesh, pose mesh, target)
//! exist exactly. Bodies are built from ten capped-tube segments (torso,
//! head, four two-bone limbs) joined at nine one-axis joints and posed with
//! two-bone linear blend skinning near each joint.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{apply_permutation, center_mesh, shuffle_vertices, Mesh};

pub const SEGMENTS: usize = 10;
pub const JOINTS: usize = 9;

/// Allowed range for identity scale factors.
pub const SCALE_MIN: f64 = 0.5;
pub const SCALE_MAX: f64 = 2.0;

/// Canonical segment order. Vertices are emitted segment by segment.
pub const SEGMENT_NAMES: [&str; SEGMENTS] = [
    "torso",
    "head",
    "upper_arm_l",
    "forearm_l",
    "upper_arm_r",
    "forearm_r",
    "thigh_l",
    "shin_l",
    "thigh_r",
    "shin_r",
];

/// Canonical joint order; `PoseParams::angles` follows it.
pub const JOINT_NAMES: [&str; JOINTS] = [
    "neck",
    "shoulder_l",
    "elbow_l",
    "shoulder_r",
    "elbow_r",
    "hip_l",
    "knee_l",
    "hip_r",
    "knee_r",
];

// Rest dimensions (length, radius) per segment before identity scaling.
// Sized so edge lengths at the default 386-vertex tessellation sit in the
// range a few-thousand-vertex body scan would have; the edge loss is an
// absolute-scale term, so this keeps its strength relative to the
// reconstruction term in the intended regime.
const BASE_DIMS: [(f64, f64); SEGMENTS] = [
    (0.275, 0.0700), // torso
    (0.110, 0.0500), // head
    (0.150, 0.0250), // upper_arm_l
    (0.130, 0.0225), // forearm_l
    (0.150, 0.0250), // upper_arm_r
    (0.130, 0.0225), // forearm_r
    (0.190, 0.0350), // thigh_l
    (0.180, 0.0250), // shin_l
    (0.190, 0.0350), // thigh_r
    (0.180, 0.0250), // shin_r
];

/// Per-segment scale factors for a fixed skeleton.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    /// (length, radius) scale per segment, in canonical order.
    pub scales: Vec<(f64, f64)>,
}

impl IdentityParams {
    pub fn unit() -> Self {
        IdentityParams { scales: vec![(1.0, 1.0); SEGMENTS] }
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        IdentityParams {
            scales: (0..SEGMENTS)
                .map(|_| (rng.gen_range(0.75..1.35), rng.gen_range(0.75..1.35)))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.len() != SEGMENTS {
            return Err(Error::InvalidArgument(format!(
                "identity params need {SEGMENTS} segment scales, got {}",
                self.scales.len()
            )));
        }
        for (i, &(l, r)) in self.scales.iter().enumerate() {
            if !(SCALE_MIN..=SCALE_MAX).contains(&l) || !(SCALE_MIN..=SCALE_MAX).contains(&r) {
                return Err(Error::InvalidArgument(format!(
                    "identity scale for segment {} out of [{SCALE_MIN}, {SCALE_MAX}]: ({l}, {r})",
                    SEGMENT_NAMES[i]
                )));
            }
        }
        Ok(())
    }

    /// Uniformly scale every factor (clamping to the legal range is the
    /// caller's concern).
    pub fn scaled(&self, factor: f64) -> Self {
        IdentityParams { scales: self.scales.iter().map(|&(l, r)| (l * factor, r * factor)).collect() }
    }
}

/// Joint rotation angles in radians, canonical joint order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub angles: Vec<f64>,
}

impl PoseParams {
    pub fn zero() -> Self {
        PoseParams { angles: vec![0.0; JOINTS] }
    }

    pub fn random(rng: &mut impl Rng, limit: f64) -> Self {
        PoseParams { angles: (0..JOINTS).map(|_| rng.gen_range(-0.85 * limit..0.85 * limit)).collect() }
    }

    pub fn validate(&self, limit: f64) -> Result<()> {
        if self.angles.len() != JOINTS {
            return Err(Error::InvalidArgument(format!(
                "pose params need {JOINTS} joint angles, got {}",
                self.angles.len()
            )));
        }
        for (i, &a) in self.angles.iter().enumerate() {
            if a.abs() > limit {
                return Err(Error::InvalidArgument(format!(
                    "joint angle for {} exceeds limit {limit}: {a}",
                    JOINT_NAMES[i]
                )));
            }
        }
        Ok(())
    }
}

/// Generator configuration. Total vertex count is 2 poles per segment plus
/// `sides` vertices per ring; the ring total is (total_vertices - 20) /
/// sides, distributed evenly with the remainder going to the first segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub total_vertices: usize,
    pub sides: usize,
    /// Quadruped regime: horizontal torso, all four limbs as legs.
    pub quadruped: bool,
    /// Joint angle limit in radians.
    pub joint_limit: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { total_vertices: 386, sides: 6, quadruped: false, joint_limit: 1.0 }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sides < 3 {
            return Err(Error::Config("generator: sides must be >= 3".into()));
        }
        if self.joint_limit <= 0.0 {
            return Err(Error::Config("generator: joint_limit must be > 0".into()));
        }
        let poles = 2 * SEGMENTS;
        if self.total_vertices <= poles {
            return Err(Error::Config(format!(
                "generator: total_vertices must exceed {poles}"
            )));
        }
        let ring_vertices = self.total_vertices - poles;
        if ring_vertices % self.sides != 0 {
            return Err(Error::Config(format!(
                "generator: total_vertices - {poles} must be divisible by sides ({})",
                self.sides
            )));
        }
        if ring_vertices / self.sides < 2 * SEGMENTS {
            return Err(Error::Config("generator: fewer than 2 rings per segment".into()));
        }
        Ok(())
    }

    /// Rings per segment, canonical order.
    fn ring_plan(&self) -> Vec<usize> {
        let total_rings = (self.total_vertices - 2 * SEGMENTS) / self.sides;
        let base = total_rings / SEGMENTS;
        let extra = total_rings % SEGMENTS;
        (0..SEGMENTS).map(|i| base + usize::from(i < extra)).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct SegmentGeo {
    start: [f64; 3],
    axis: [f64; 3],
    length: f64,
    radius: f64,
    parent: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct JointGeo {
    pivot: [f64; 3],
    axis: [f64; 3],
    /// Segment whose motion the joint drives.
    child: usize,
}

struct Skeleton {
    segments: Vec<SegmentGeo>,
    joints: Vec<JointGeo>,
}

fn vadd(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn vscale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn vsub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    vscale(a, 1.0 / n)
}

const X: [f64; 3] = [1.0, 0.0, 0.0];
const Y: [f64; 3] = [0.0, 1.0, 0.0];
const Z: [f64; 3] = [0.0, 0.0, 1.0];
const NEG_X: [f64; 3] = [-1.0, 0.0, 0.0];
const NEG_Y: [f64; 3] = [0.0, -1.0, 0.0];

fn build_skeleton(id: &IdentityParams, quadruped: bool) -> Skeleton {
    let dim = |i: usize| -> (f64, f64) {
        let (bl, br) = BASE_DIMS[i];
        let (sl, sr) = id.scales[i];
        (bl * sl, br * sr)
    };
    let (torso_len, torso_r) = dim(0);
    let mut segments = vec![SegmentGeo {
        start: [0.0; 3],
        axis: if quadruped { Z } else { Y },
        length: torso_len,
        radius: torso_r,
        parent: None,
    }];
    let torso_end = vadd(segments[0].start, vscale(segments[0].axis, torso_len));

    let mut joints = Vec::new();

    // Head at the torso end.
    let (head_len, head_r) = dim(1);
    let head_axis = if quadruped { Z } else { Y };
    joints.push(JointGeo { pivot: torso_end, axis: X, child: 1 });
    segments.push(SegmentGeo {
        start: torso_end,
        axis: head_axis,
        length: head_len,
        radius: head_r,
        parent: Some(0),
    });

    // Limb roots: arms at the torso end, legs at the torso start (biped), or
    // front/hind leg sockets along the horizontal torso (quadruped).
    let limb = |segments: &mut Vec<SegmentGeo>,
                joints: &mut Vec<JointGeo>,
                root: [f64; 3],
                upper_idx: usize,
                lower_idx: usize,
                upper_axis: [f64; 3],
                joint_axis: [f64; 3],
                dims: &dyn Fn(usize) -> (f64, f64)| {
        let (ul, ur) = dims(upper_idx);
        joints.push(JointGeo { pivot: root, axis: joint_axis, child: upper_idx });
        segments.push(SegmentGeo { start: root, axis: upper_axis, length: ul, radius: ur, parent: Some(0) });
        let elbow = vadd(root, vscale(upper_axis, ul));
        let (ll, lr) = dims(lower_idx);
        joints.push(JointGeo { pivot: elbow, axis: joint_axis, child: lower_idx });
        segments.push(SegmentGeo {
            start: elbow,
            axis: upper_axis,
            length: ll,
            radius: lr,
            parent: Some(upper_idx),
        });
    };

    if quadruped {
        let front_z = torso_len * 0.85;
        let hind_z = torso_len * 0.15;
        let side = torso_r * 0.7;
        limb(&mut segments, &mut joints, [-side, 0.0, front_z], 2, 3, NEG_Y, X, &dim);
        limb(&mut segments, &mut joints, [side, 0.0, front_z], 4, 5, NEG_Y, X, &dim);
        limb(&mut segments, &mut joints, [-side, 0.0, hind_z], 6, 7, NEG_Y, X, &dim);
        limb(&mut segments, &mut joints, [side, 0.0, hind_z], 8, 9, NEG_Y, X, &dim);
    } else {
        let shoulder_l = [-torso_r, torso_len, 0.0];
        let shoulder_r = [torso_r, torso_len, 0.0];
        limb(&mut segments, &mut joints, shoulder_l, 2, 3, NEG_X, Z, &dim);
        limb(&mut segments, &mut joints, shoulder_r, 4, 5, X, Z, &dim);
        let hip_l = [-torso_r * 0.6, 0.0, 0.0];
        let hip_r = [torso_r * 0.6, 0.0, 0.0];
        limb(&mut segments, &mut joints, hip_l, 6, 7, NEG_Y, X, &dim);
        limb(&mut segments, &mut joints, hip_r, 8, 9, NEG_Y, X, &dim);
    }

    // `limb` pushes upper then lower, so segment and joint order match the
    // canonical tables.
    Skeleton { segments, joints }
}

/// Affine map x -> m x + t.
#[derive(Debug, Clone, Copy)]
struct Affine {
    m: [[f64; 3]; 3],
    t: [f64; 3],
}

impl Affine {
    fn identity() -> Self {
        Affine { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], t: [0.0; 3] }
    }

    fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        [
            self.m[0][0] * v[0] + self.m[0][1] * v[1] + self.m[0][2] * v[2] + self.t[0],
            self.m[1][0] * v[0] + self.m[1][1] * v[1] + self.m[1][2] * v[2] + self.t[1],
            self.m[2][0] * v[0] + self.m[2][1] * v[1] + self.m[2][2] * v[2] + self.t[2],
        ]
    }

    /// self ∘ other (apply `other` first).
    fn compose(&self, other: &Affine) -> Affine {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = (0..3).map(|k| self.m[i][k] * other.m[k][j]).sum();
            }
        }
        Affine { m, t: self.apply(other.t) }
    }

    /// Rotation by `angle` about the line through `pivot` with direction
    /// `axis` (Rodrigues form).
    fn rotation_about(pivot: [f64; 3], axis: [f64; 3], angle: f64) -> Affine {
        let (s, c) = angle.sin_cos();
        let [x, y, z] = axis;
        let ic = 1.0 - c;
        let m = [
            [c + x * x * ic, x * y * ic - z * s, x * z * ic + y * s],
            [y * x * ic + z * s, c + y * y * ic, y * z * ic - x * s],
            [z * x * ic - y * s, z * y * ic + x * s, c + z * z * ic],
        ];
        let rp = [
            m[0][0] * pivot[0] + m[0][1] * pivot[1] + m[0][2] * pivot[2],
            m[1][0] * pivot[0] + m[1][1] * pivot[1] + m[1][2] * pivot[2],
            m[2][0] * pivot[0] + m[2][1] * pivot[1] + m[2][2] * pivot[2],
        ];
        Affine { m, t: vsub(pivot, rp) }
    }
}

/// Deterministic mesh generator for one skeleton family.
#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Generator { config })
    }

    /// Build the mesh for one (identity, pose) pair. Deterministic: equal
    /// parameters give bitwise-equal meshes.
    pub fn build_mesh(&self, id: &IdentityParams, pose: &PoseParams) -> Result<Mesh> {
        id.validate()?;
        pose.validate(self.config.joint_limit)?;
        let skeleton = build_skeleton(id, self.config.quadruped);

        // World transform per segment: parent chain with this joint's
        // rotation applied at its pivot.
        let mut transforms = vec![Affine::identity(); SEGMENTS];
        // joints are in canonical joint order; each drives one segment.
        for (angle_idx, joint) in skeleton.joints.iter().enumerate() {
            let rot = Affine::rotation_about(joint.pivot, joint.axis, pose.angles[angle_idx]);
            let parent = skeleton.segments[joint.child].parent.expect("jointed segment has parent");
            transforms[joint.child] = transforms[parent].compose(&rot);
        }

        let rings = self.config.ring_plan();
        let sides = self.config.sides;
        let mut vertices = Vec::with_capacity(self.config.total_vertices);
        let mut faces = Vec::new();

        for (seg_idx, seg) in skeleton.segments.iter().enumerate() {
            let n_rings = rings[seg_idx];
            let own = transforms[seg_idx];
            let parent_tf = seg.parent.map(|p| transforms[p]).unwrap_or_else(Affine::identity);
            let blend_len = 0.3 * seg.length;

            // Orthonormal frame perpendicular to the segment axis.
            let reference = if seg.axis[0].abs() < 0.9 { X } else { Y };
            let u = normalize(cross(reference, seg.axis));
            let w = cross(seg.axis, u);

            let skin = |rest: [f64; 3], t_axial: f64| -> [f64; 3] {
                if seg.parent.is_none() {
                    return own.apply(rest);
                }
                let ratio = (t_axial / blend_len).min(1.0);
                let wc = 0.5 + 0.5 * ratio;
                let a = own.apply(rest);
                let b = parent_tf.apply(rest);
                vadd(vscale(a, wc), vscale(b, 1.0 - wc))
            };

            let base = vertices.len();
            for k in 0..n_rings {
                let t = seg.length * (k + 1) as f64 / (n_rings + 1) as f64;
                let center = vadd(seg.start, vscale(seg.axis, t));
                for j in 0..sides {
                    let theta = 2.0 * std::f64::consts::PI * j as f64 / sides as f64;
                    let offset = vadd(vscale(u, seg.radius * theta.cos()), vscale(w, seg.radius * theta.sin()));
                    vertices.push(skin(vadd(center, offset), t));
                }
            }
            let pole_start = vertices.len();
            vertices.push(skin(seg.start, 0.0));
            let pole_end = vertices.len();
            vertices.push(skin(vadd(seg.start, vscale(seg.axis, seg.length)), seg.length));

            let ring_vertex = |k: usize, j: usize| base + k * sides + (j % sides);
            for k in 0..n_rings.saturating_sub(1) {
                for j in 0..sides {
                    let (a, b, c, d) =
                        (ring_vertex(k, j), ring_vertex(k, j + 1), ring_vertex(k + 1, j + 1), ring_vertex(k + 1, j));
                    faces.push([a, b, c]);
                    faces.push([a, c, d]);
                }
            }
            for j in 0..sides {
                faces.push([pole_start, ring_vertex(0, j + 1), ring_vertex(0, j)]);
                faces.push([pole_end, ring_vertex(n_rings - 1, j), ring_vertex(n_rings - 1, j + 1)]);
            }
        }

        debug_assert_eq!(vertices.len(), self.config.total_vertices);
        Mesh::new(vertices, faces, "generated")
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent per-sample seed from a dataset seed and sample index.
pub fn per_sample_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64 + 1))
}

pub fn make_identity_pool(count: usize, seed: u64) -> Vec<IdentityParams> {
    let mut rng = ChaCha12Rng::seed_from_u64(splitmix64(seed ^ 0x1DE7));
    (0..count).map(|_| IdentityParams::random(&mut rng)).collect()
}

pub fn make_pose_pool(count: usize, seed: u64, limit: f64) -> Vec<PoseParams> {
    let mut rng = ChaCha12Rng::seed_from_u64(splitmix64(seed ^ 0x905E));
    (0..count).map(|_| PoseParams::random(&mut rng, limit)).collect()
}

/// One training/evaluation sample: identity mesh, pose mesh, and the ground
/// truth sharing the identity mesh's (post-shuffle) vertex order.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub sample_id: usize,
    pub m_id: Mesh,
    pub m_pose: Mesh,
    pub m_gt: Mesh,
    pub identity_index: usize,
    pub pose_index: usize,
    /// Permutations applied to the centered canonical meshes.
    pub id_perm: Vec<usize>,
    pub pose_perm: Vec<usize>,
}

/// Draw `n` samples: identity A supplies the identity mesh (in a random pool
/// pose), identity B and pose P supply the pose mesh, and the ground truth
/// is A's identity in pose P. All meshes are centered; identity and pose
/// meshes are independently vertex-shuffled; the ground truth keeps the
/// identity mesh's order.
pub fn sample_pairs_from_pools(
    generator: &Generator,
    n: usize,
    ids: &[IdentityParams],
    poses: &[PoseParams],
    seed: u64,
) -> Result<Vec<PairSample>> {
    if ids.is_empty() || poses.is_empty() {
        return Err(Error::InvalidArgument("sample_pairs: empty identity or pose pool".into()));
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let s = per_sample_seed(seed, i);
        let mut rng = ChaCha12Rng::seed_from_u64(s);
        let a = rng.gen_range(0..ids.len());
        let b = rng.gen_range(0..ids.len());
        let p = rng.gen_range(0..poses.len());
        let p_a = rng.gen_range(0..poses.len());

        let m_id_raw = center_mesh(&generator.build_mesh(&ids[a], &poses[p_a])?);
        let m_pose_raw = center_mesh(&generator.build_mesh(&ids[b], &poses[p])?);
        let m_gt_raw = center_mesh(&generator.build_mesh(&ids[a], &poses[p])?);

        let (mut m_id, id_perm) = shuffle_vertices(&m_id_raw, splitmix64(s ^ 1));
        let (mut m_pose, pose_perm) = shuffle_vertices(&m_pose_raw, splitmix64(s ^ 2));
        let mut m_gt = apply_permutation(&m_gt_raw, &id_perm);
        m_id.name = format!("sample{i}_id");
        m_pose.name = format!("sample{i}_pose");
        m_gt.name = format!("sample{i}_gt");

        samples.push(PairSample {
            sample_id: i,
            m_id,
            m_pose,
            m_gt,
            identity_index: a,
            pose_index: p,
            id_perm,
            pose_perm,
        });
    }
    Ok(samples)
}

/// Pool-count convenience over [`sample_pairs_from_pools`].
pub fn sample_pairs(
    generator: &Generator,
    n: usize,
    id_pool: usize,
    pose_pool: usize,
    seed: u64,
) -> Result<Vec<PairSample>> {
    let ids = make_identity_pool(id_pool, seed);
    let poses = make_pose_pool(pose_pool, seed, generator.config.joint_limit);
    sample_pairs_from_pools(generator, n, &ids, &poses, seed)
}

/// On-disk dataset description, one entry per sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: usize,
    pub id_obj: String,
    pub pose_obj: String,
    pub gt_obj: String,
    pub identity_index: usize,
    pub pose_index: usize,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("manifest {}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text).map_err(|source| Error::Io { path: path.into(), source })
    }

    /// Load one sample's meshes, resolving paths relative to the manifest
    /// location.
    pub fn load_sample(&self, manifest_dir: &Path, entry: &ManifestEntry) -> Result<(Mesh, Mesh, Mesh)> {
        let read = |rel: &str| crate::mesh::load_obj(manifest_dir.join(rel));
        Ok((read(&entry.id_obj)?, read(&entry.pose_obj)?, read(&entry.gt_obj)?))
    }
}

/// Write samples as OBJ files plus a manifest into `dir`. Returns the
/// manifest path.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    generator: &Generator,
    samples: &[PairSample],
    seed: u64,
    manifest_name: &str,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.into(), source })?;
    let mut entries = Vec::new();
    for s in samples {
        let id_obj = format!("sample{:04}_id.obj", s.sample_id);
        let pose_obj = format!("sample{:04}_pose.obj", s.sample_id);
        let gt_obj = format!("sample{:04}_gt.obj", s.sample_id);
        crate::mesh::save_obj(&s.m_id, dir.join(&id_obj))?;
        crate::mesh::save_obj(&s.m_pose, dir.join(&pose_obj))?;
        crate::mesh::save_obj(&s.m_gt, dir.join(&gt_obj))?;
        entries.push(ManifestEntry {
            sample_id: s.sample_id,
            id_obj,
            pose_obj,
            gt_obj,
            identity_index: s.identity_index,
            pose_index: s.pose_index,
        });
    }
    let manifest = Manifest { seed, generator: generator.config.clone(), samples: entries };
    let path = dir.join(manifest_name);
    manifest.save(&path)?;
    Ok(path)
}
