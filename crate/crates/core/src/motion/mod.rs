//! Motion representation: per-joint unit quaternions, root velocity, binary
//! foot-contact labels, and the packed network tensor layout.

pub mod cleanup;
pub mod fk_graph;
pub mod quat;

pub use cleanup::ik_foot_cleanup;
pub use quat::{EulerOrder, Quat};

use thiserror::Error;

use crate::skeleton::SkeletonTopology;
use crate::tensor::{Real, TensorData};

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("usage error: {0}")]
    Usage(String),
}

pub type MotionResult<T> = Result<T, MotionError>;

/// Feature lanes per entity in the packed tensor (quaternion width).
pub const LANES: usize = 4;

/// A motion clip: rotations `[T × J]`, per-frame root velocity, contacts.
#[derive(Debug, Clone, PartialEq)]
pub struct Motion {
    /// Row-major `[t * joints + j]` unit quaternions.
    pub rotations: Vec<Quat>,
    /// Root displacement per frame, length units/frame.
    pub root_velocity: Vec<[f64; 3]>,
    /// Per-frame left/right foot contact labels.
    pub contacts: Vec<[bool; 2]>,
    pub fps: f64,
}

impl Motion {
    pub fn frames(&self) -> usize {
        self.root_velocity.len()
    }

    pub fn joints(&self) -> usize {
        if self.root_velocity.is_empty() {
            0
        } else {
            self.rotations.len() / self.root_velocity.len()
        }
    }

    pub fn rotation(&self, t: usize, j: usize) -> Quat {
        self.rotations[t * self.joints() + j]
    }

    /// Identity-pose motion: all identity rotations, zero velocity, zero
    /// contacts.
    pub fn identity(frames: usize, joints: usize, fps: f64) -> Self {
        Self {
            rotations: vec![Quat::IDENTITY; frames * joints],
            root_velocity: vec![[0.0; 3]; frames],
            contacts: vec![[false; 2]; frames],
            fps,
        }
    }
}

/// Packed `[T × E × K]` block with `E = J + 3`: per-joint quaternion lanes,
/// zero-padded root-velocity entity, zero-padded contact entities.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionTensor {
    pub frames: usize,
    pub entities: usize,
    /// Row-major `[t][e][k]`, `k < 4`.
    pub data: Vec<f64>,
}

impl MotionTensor {
    pub fn zeros(frames: usize, entities: usize) -> Self {
        Self { frames, entities, data: vec![0.0; frames * entities * LANES] }
    }

    #[inline]
    pub fn get(&self, t: usize, e: usize, k: usize) -> f64 {
        self.data[(t * self.entities + e) * LANES + k]
    }

    #[inline]
    pub fn set(&mut self, t: usize, e: usize, k: usize, v: f64) {
        self.data[(t * self.entities + e) * LANES + k] = v;
    }

    pub fn joints(&self) -> usize {
        self.entities - 3
    }

    /// Network layout `[K, E, T]` as tensor data.
    pub fn to_network<F: Real>(&self) -> TensorData<F> {
        let (t_n, e_n) = (self.frames, self.entities);
        let mut out = vec![F::zero(); t_n * e_n * LANES];
        for t in 0..t_n {
            for e in 0..e_n {
                for k in 0..LANES {
                    out[(k * e_n + e) * t_n + t] = F::from_f64(self.get(t, e, k));
                }
            }
        }
        TensorData::new(vec![LANES, e_n, t_n], out)
    }

    /// Back from network layout `[K, E, T]`.
    pub fn from_network<F: Real>(t: &TensorData<F>) -> MotionResult<Self> {
        if t.ndim() != 3 || t.shape[0] != LANES {
            return Err(MotionError::Usage(format!(
                "expected [4, E, T] network block, got {:?}",
                t.shape
            )));
        }
        let (e_n, t_n) = (t.shape[1], t.shape[2]);
        let mut out = MotionTensor::zeros(t_n, e_n);
        for k in 0..LANES {
            for e in 0..e_n {
                for tt in 0..t_n {
                    out.set(tt, e, k, t.data[(k * e_n + e) * t_n + tt].as_f64());
                }
            }
        }
        Ok(out)
    }
}

/// Pack a motion into the network tensor layout. Quaternions are validated
/// (unit norm within 1e-6) and stored with `w ≥ 0`.
pub fn encode_motion(m: &Motion) -> MotionResult<MotionTensor> {
    let (t_n, j_n) = (m.frames(), m.joints());
    if m.rotations.len() != t_n * j_n || m.contacts.len() != t_n {
        return Err(MotionError::Validation("field lengths disagree".into()));
    }
    let mut out = MotionTensor::zeros(t_n, j_n + 3);
    for t in 0..t_n {
        for j in 0..j_n {
            let q = m.rotation(t, j);
            if (q.norm() - 1.0).abs() > 1e-6 {
                return Err(MotionError::Validation(format!(
                    "non-unit quaternion at frame {t}, joint {j}: norm {}",
                    q.norm()
                )));
            }
            let q = q.canonical();
            out.set(t, j, 0, q.w);
            out.set(t, j, 1, q.x);
            out.set(t, j, 2, q.y);
            out.set(t, j, 3, q.z);
        }
        for c in 0..3 {
            out.set(t, j_n, c, m.root_velocity[t][c]);
        }
        out.set(t, j_n + 1, 0, if m.contacts[t][0] { 1.0 } else { 0.0 });
        out.set(t, j_n + 2, 0, if m.contacts[t][1] { 1.0 } else { 0.0 });
    }
    Ok(out)
}

/// Unpack a network tensor into a motion. Quaternion lanes are re-normalized
/// (zero-norm lanes become the identity and are reported in the warnings);
/// contact lanes are thresholded through a sigmoid at 0.5.
pub fn decode_motion(t: &MotionTensor, fps: f64) -> (Motion, Vec<String>) {
    let (t_n, j_n) = (t.frames, t.joints());
    let mut warnings = Vec::new();
    let mut rotations = Vec::with_capacity(t_n * j_n);
    let mut root_velocity = Vec::with_capacity(t_n);
    let mut contacts = Vec::with_capacity(t_n);
    for tt in 0..t_n {
        for j in 0..j_n {
            let q = Quat::new(t.get(tt, j, 0), t.get(tt, j, 1), t.get(tt, j, 2), t.get(tt, j, 3));
            if q.norm() < 1e-12 {
                warnings.push(format!("zero-norm quaternion at frame {tt}, joint {j}; replaced by identity"));
                rotations.push(Quat::IDENTITY);
            } else {
                rotations.push(q.normalized().canonical());
            }
        }
        root_velocity.push([t.get(tt, j_n, 0), t.get(tt, j_n, 1), t.get(tt, j_n, 2)]);
        // sigmoid(x) > 0.5  ⇔  x > 0
        contacts.push([t.get(tt, j_n + 1, 0) > 0.0, t.get(tt, j_n + 2, 0) > 0.0]);
    }
    (Motion { rotations, root_velocity, contacts, fps }, warnings)
}

/// Cumulative root positions: `P[0] = 0`, `P[t] = P[t−1] + V[t]`.
pub fn integrate_root(v: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let mut p = Vec::with_capacity(v.len());
    let mut acc = [0.0f64; 3];
    for (t, vt) in v.iter().enumerate() {
        if t > 0 {
            for c in 0..3 {
                acc[c] += vt[c];
            }
        }
        p.push(acc);
    }
    p
}

/// Global joint positions `[T × J]` by composing rotations down the tree.
pub fn forward_kinematics(m: &Motion, topo: &SkeletonTopology) -> MotionResult<Vec<[f64; 3]>> {
    let (t_n, j_n) = (m.frames(), m.joints());
    if topo.joint_count() != j_n {
        return Err(MotionError::Usage(format!(
            "topology has {} joints, motion has {j_n}",
            topo.joint_count()
        )));
    }
    let root = topo.root();
    let order = {
        // Parents before children.
        let mut po = topo.post_order();
        po.reverse();
        po
    };
    let root_pos = integrate_root(&m.root_velocity);
    let mut out = vec![[0.0f64; 3]; t_n * j_n];
    let mut glob = vec![Quat::IDENTITY; j_n];
    for t in 0..t_n {
        for &j in &order {
            match topo.parents[j] {
                None => {
                    glob[root] = m.rotation(t, root);
                    out[t * j_n + root] = root_pos[t];
                }
                Some(p) => {
                    let off = topo.offsets[j];
                    let rotated = glob[p].rotate(off);
                    let pp = out[t * j_n + p];
                    out[t * j_n + j] = [pp[0] + rotated[0], pp[1] + rotated[1], pp[2] + rotated[2]];
                    glob[j] = glob[p].mul(&m.rotation(t, j));
                }
            }
        }
    }
    Ok(out)
}

/// Forward-difference foot speeds, one magnitude per foot per frame; frame 0
/// copies frame 1.
pub fn foot_velocity(positions: &[[f64; 3]], joints: usize, feet: [usize; 2]) -> MotionResult<Vec<[f64; 2]>> {
    let t_n = positions.len() / joints;
    if t_n < 2 {
        return Err(MotionError::Usage("foot_velocity needs at least 2 frames".into()));
    }
    let mut out = vec![[0.0f64; 2]; t_n];
    for t in 1..t_n {
        for (fi, &f) in feet.iter().enumerate() {
            let a = positions[(t - 1) * joints + f];
            let b = positions[t * joints + f];
            let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            out[t][fi] = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        }
    }
    out[0] = out[1];
    Ok(out)
}

/// Contact labels: a foot is in contact when its height above the motion's
/// own minimum foot height is below `height_eps` and its speed is below
/// `vel_eps`.
pub fn extract_foot_contact(
    positions: &[[f64; 3]],
    joints: usize,
    feet: [usize; 2],
    height_eps: f64,
    vel_eps: f64,
) -> MotionResult<Vec<[bool; 2]>> {
    let t_n = positions.len() / joints;
    let speeds = foot_velocity(positions, joints, feet)?;
    let ground = feet
        .iter()
        .flat_map(|&f| (0..t_n).map(move |t| (t, f)))
        .map(|(t, f)| positions[t * joints + f][1])
        .fold(f64::INFINITY, f64::min);
    let mut out = vec![[false; 2]; t_n];
    for t in 0..t_n {
        for (fi, &f) in feet.iter().enumerate() {
            let h = positions[t * joints + f][1] - ground;
            out[t][fi] = h < height_eps && speeds[t][fi] < vel_eps;
        }
    }
    Ok(out)
}

/// Scale-relative default contact thresholds: height 2% of leg length,
/// speed 0.5% of leg length per frame.
pub fn default_contact_thresholds(topo: &SkeletonTopology) -> (f64, f64) {
    let leg = 0.5 * (topo.leg_length(topo.feet[0]) + topo.leg_length(topo.feet[1]));
    (0.02 * leg, 0.005 * leg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn random_motion(rng: &mut ChaCha20Rng, frames: usize, joints: usize) -> Motion {
        let rotations = (0..frames * joints)
            .map(|_| {
                Quat::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
                .normalized()
                .canonical()
            })
            .collect();
        Motion {
            rotations,
            root_velocity: (0..frames)
                .map(|_| [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)])
                .collect(),
            contacts: (0..frames).map(|_| [rng.gen_bool(0.5), rng.gen_bool(0.5)]).collect(),
            fps: 30.0,
        }
    }

    #[test]
    fn identity_pose_encodes_to_unit_w_lanes() {
        let m = Motion::identity(4, 5, 30.0);
        let t = encode_motion(&m).unwrap();
        assert_eq!((t.frames, t.entities), (4, 8));
        for tt in 0..4 {
            for j in 0..5 {
                assert_eq!(t.get(tt, j, 0), 1.0);
                for k in 1..4 {
                    assert_eq!(t.get(tt, j, k), 0.0);
                }
            }
            for e in 5..8 {
                for k in 0..4 {
                    assert_eq!(t.get(tt, e, k), 0.0);
                }
            }
        }
    }

    #[test]
    fn encode_decode_round_trip_on_random_motions() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        for _ in 0..100 {
            let m = random_motion(&mut rng, 8, 6);
            let t = encode_motion(&m).unwrap();
            let (back, warnings) = decode_motion(&t, m.fps);
            assert!(warnings.is_empty());
            assert_eq!(back.contacts, m.contacts);
            for (a, b) in back.rotations.iter().zip(m.rotations.iter()) {
                assert!((a.w - b.w).abs() < 1e-7 && (a.x - b.x).abs() < 1e-7);
                assert!((a.y - b.y).abs() < 1e-7 && (a.z - b.z).abs() < 1e-7);
            }
            for (a, b) in back.root_velocity.iter().zip(m.root_velocity.iter()) {
                for c in 0..3 {
                    assert!((a[c] - b[c]).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn reference_block_dimensions() {
        let m = Motion::identity(64, 17, 30.0);
        let t = encode_motion(&m).unwrap();
        assert_eq!((t.frames, t.entities, LANES), (64, 20, 4));
    }

    #[test]
    fn non_unit_quaternion_is_rejected() {
        let mut m = Motion::identity(2, 3, 30.0);
        m.rotations[0] = Quat::new(2.0, 0.0, 0.0, 0.0);
        assert!(encode_motion(&m).is_err());
    }

    #[test]
    fn zero_norm_lane_decodes_to_identity_with_warning() {
        let t = MotionTensor::zeros(2, 6);
        let (m, warnings) = decode_motion(&t, 30.0);
        assert_eq!(m.rotation(0, 0), Quat::IDENTITY);
        assert_eq!(warnings.len(), 6);
    }

    #[test]
    fn contact_preactivation_thresholds() {
        let mut t = MotionTensor::zeros(1, 6);
        t.set(0, 4, 0, 3.0);
        t.set(0, 5, 0, -3.0);
        // Make quaternion lanes valid to avoid warnings.
        for j in 0..3 {
            t.set(0, j, 0, 1.0);
        }
        let (m, w) = decode_motion(&t, 30.0);
        assert!(w.is_empty());
        assert_eq!(m.contacts[0], [true, false]);
    }

    #[test]
    fn integrate_root_conventions() {
        assert_eq!(integrate_root(&[[0.0; 3]; 4]), vec![[0.0; 3]; 4]);
        let v = vec![[0.0, 0.0, 1.0]; 4];
        let p = integrate_root(&v);
        let z: Vec<f64> = p.iter().map(|p| p[2]).collect();
        assert_eq!(z, vec![0.0, 1.0, 2.0, 3.0]);
        // Differencing recovers V[1..].
        for t in 1..4 {
            for c in 0..3 {
                assert!((p[t][c] - p[t - 1][c] - v[t][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fk_identity_pose_sums_ancestor_offsets() {
        let topo = crate::skeleton::SkeletonTopology::humanoid17();
        let m = Motion::identity(3, 17, 30.0);
        let pos = forward_kinematics(&m, &topo).unwrap();
        // head = spine + chest + neck + head offsets
        let head = pos[4];
        assert!((head[1] - 0.7).abs() < 1e-12);
        // Frame-constant when V = 0.
        for j in 0..17 {
            for c in 0..3 {
                assert_eq!(pos[j][c], pos[17 + j][c]);
            }
        }
    }

    #[test]
    fn fk_two_bone_chain_rotated_90_about_z() {
        // root -> a (offset +X), a -> b (offset +X, length 1 each); rotating
        // the root 90° about +Z sends a to (0,1,0).
        let topo = crate::skeleton::SkeletonTopology::new(
            vec!["root".into(), "a".into(), "b".into(), "f1".into(), "f2".into()],
            vec![None, Some(0), Some(1), Some(0), Some(0)],
            vec![[0.0; 3], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.1, -0.1, 0.0], [-0.1, -0.1, 0.0]],
            [3, 4],
        )
        .unwrap();
        let mut m = Motion::identity(1, 5, 30.0);
        m.rotations[0] = Quat::about_axis(2, std::f64::consts::FRAC_PI_2);
        let pos = forward_kinematics(&m, &topo).unwrap();
        assert!((pos[1][0]).abs() < 1e-12 && (pos[1][1] - 1.0).abs() < 1e-12);
        // b continues along the rotated chain: (0, 2, 0).
        assert!((pos[2][0]).abs() < 1e-12 && (pos[2][1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn fk_constant_velocity_moves_root_linearly() {
        let topo = crate::skeleton::SkeletonTopology::humanoid7();
        let mut m = Motion::identity(5, 7, 30.0);
        for v in &mut m.root_velocity {
            *v = [1.0, 0.0, 0.0];
        }
        let pos = forward_kinematics(&m, &topo).unwrap();
        for t in 0..5 {
            assert!((pos[t * 7][0] - t as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn fk_translation_equivariance() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let topo = crate::skeleton::SkeletonTopology::humanoid7();
        let m = {
            let mut m = random_motion(&mut rng, 6, 7);
            m.fps = 30.0;
            m
        };
        let mut shifted = m.clone();
        let delta = [0.3, -0.1, 0.2];
        for v in &mut shifted.root_velocity {
            for c in 0..3 {
                v[c] += delta[c];
            }
        }
        let p0 = forward_kinematics(&m, &topo).unwrap();
        let p1 = forward_kinematics(&shifted, &topo).unwrap();
        for t in 0..6 {
            for j in 0..7 {
                for c in 0..3 {
                    let expected = p0[t * 7 + j][c] + t as f64 * delta[c];
                    assert!((p1[t * 7 + j][c] - expected).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn static_feet_on_ground_are_all_contact() {
        let topo = crate::skeleton::SkeletonTopology::humanoid7();
        let m = Motion::identity(6, 7, 30.0);
        let pos = forward_kinematics(&m, &topo).unwrap();
        let (h_eps, v_eps) = default_contact_thresholds(&topo);
        let f = extract_foot_contact(&pos, 7, topo.feet, h_eps, v_eps).unwrap();
        assert!(f.iter().all(|c| c[0] && c[1]));
    }

    #[test]
    fn airborne_feet_are_not_in_contact() {
        let topo = crate::skeleton::SkeletonTopology::humanoid7();
        let mut m = Motion::identity(6, 7, 30.0);
        // Lift the root 0.5 for the middle frames; ground level is set by the
        // standing frames.
        m.root_velocity[2] = [0.0, 0.5, 0.0];
        m.root_velocity[4] = [0.0, -0.5, 0.0];
        let pos = forward_kinematics(&m, &topo).unwrap();
        let (h_eps, v_eps) = default_contact_thresholds(&topo);
        let f = extract_foot_contact(&pos, 7, topo.feet, h_eps, v_eps).unwrap();
        assert_eq!(f[3], [false, false]);
        assert_eq!(f[1], [true, true]);
    }

    #[test]
    fn foot_velocity_matches_direct_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(15);
        let topo = crate::skeleton::SkeletonTopology::humanoid7();
        let m = random_motion(&mut rng, 8, 7);
        let pos = forward_kinematics(&m, &topo).unwrap();
        let v = foot_velocity(&pos, 7, topo.feet).unwrap();
        for t in 1..8 {
            for (fi, &f) in topo.feet.iter().enumerate() {
                let a = pos[(t - 1) * 7 + f];
                let b = pos[t * 7 + f];
                let d = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt();
                assert!((v[t][fi] - d).abs() < 1e-12);
            }
        }
        assert_eq!(v[0], v[1]);
        // Uniform translation: every speed equals |delta|.
        let mut m2 = Motion::identity(4, 7, 30.0);
        for v in &mut m2.root_velocity {
            *v = [0.3, 0.0, 0.4];
        }
        let pos2 = forward_kinematics(&m2, &topo).unwrap();
        let v2 = foot_velocity(&pos2, 7, topo.feet).unwrap();
        for t in 0..4 {
            for f in 0..2 {
                assert!((v2[t][f] - 0.5).abs() < 1e-12);
            }
        }
        // T < 2 is a usage error.
        assert!(foot_velocity(&pos2[..7], 7, topo.feet).is_err());
    }
}
