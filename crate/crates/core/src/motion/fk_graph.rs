//! Forward kinematics expressed as graph ops, so position-based losses
//! differentiate through joint rotations, root velocity and contact lanes.
//!
//! Data layout throughout: network blocks `[B, K=4, E, T]`.

use crate::skeleton::SkeletonTopology;
use crate::tensor::{Graph, Real, TensorResult, Var};

/// Quaternion with per-component `[B, T]` graph values.
#[derive(Clone, Copy)]
pub struct GQuat {
    pub w: Var,
    pub x: Var,
    pub y: Var,
    pub z: Var,
}

fn lane<F: Real>(g: &mut Graph<F>, x: Var, k: usize, e: usize) -> TensorResult<Var> {
    let shape = g.shape(x).to_vec(); // [B, K, E, T]
    let s1 = g.slice(x, 1, k, 1)?;
    let s2 = g.slice(s1, 2, e, 1)?;
    g.reshape(s2, &[shape[0], shape[3]])
}

/// Normalized quaternion of joint `j` (1e-8 guard inside the square root).
pub fn joint_quat<F: Real>(g: &mut Graph<F>, x: Var, j: usize) -> TensorResult<GQuat> {
    let w = lane(g, x, 0, j)?;
    let qx = lane(g, x, 1, j)?;
    let qy = lane(g, x, 2, j)?;
    let qz = lane(g, x, 3, j)?;
    let mut ssq = g.square(w);
    for c in [qx, qy, qz] {
        let s = g.square(c);
        ssq = g.add(ssq, s)?;
    }
    let guarded = g.add_scalar(ssq, 1e-8);
    let norm = g.sqrt(guarded);
    Ok(GQuat {
        w: g.div(w, norm)?,
        x: g.div(qx, norm)?,
        y: g.div(qy, norm)?,
        z: g.div(qz, norm)?,
    })
}

/// Hamilton product of per-frame quaternions.
pub fn qmul<F: Real>(g: &mut Graph<F>, a: &GQuat, b: &GQuat) -> TensorResult<GQuat> {
    let mut term = |p: Var, q: Var| g.mul(p, q);
    let ww = term(a.w, b.w)?;
    let xx = term(a.x, b.x)?;
    let yy = term(a.y, b.y)?;
    let zz = term(a.z, b.z)?;
    let w1 = g.sub(ww, xx)?;
    let w2 = g.sub(w1, yy)?;
    let w = g.sub(w2, zz)?;

    let wx = g.mul(a.w, b.x)?;
    let xw = g.mul(a.x, b.w)?;
    let yz = g.mul(a.y, b.z)?;
    let zy = g.mul(a.z, b.y)?;
    let x1 = g.add(wx, xw)?;
    let x2 = g.add(x1, yz)?;
    let x = g.sub(x2, zy)?;

    let wy = g.mul(a.w, b.y)?;
    let yw = g.mul(a.y, b.w)?;
    let zx = g.mul(a.z, b.x)?;
    let xz = g.mul(a.x, b.z)?;
    let y1 = g.add(wy, yw)?;
    let y2 = g.add(y1, zx)?;
    let y = g.sub(y2, xz)?;

    let wz = g.mul(a.w, b.z)?;
    let zw = g.mul(a.z, b.w)?;
    let xy = g.mul(a.x, b.y)?;
    let yx = g.mul(a.y, b.x)?;
    let z1 = g.add(wz, zw)?;
    let z2 = g.add(z1, xy)?;
    let z = g.sub(z2, yx)?;
    Ok(GQuat { w, x, y, z })
}

/// Rotate the constant offset `v` by per-frame quaternions:
/// `v' = v + 2w (q_v × v) + 2 q_v × (q_v × v)`.
pub fn qrotate_const<F: Real>(g: &mut Graph<F>, q: &GQuat, v: [f64; 3]) -> TensorResult<[Var; 3]> {
    // c1 = q_v × v (v constant, components fold into scalar muls)
    let c1 = [
        {
            let a = g.mul_scalar(q.y, v[2]);
            let b = g.mul_scalar(q.z, v[1]);
            g.sub(a, b)?
        },
        {
            let a = g.mul_scalar(q.z, v[0]);
            let b = g.mul_scalar(q.x, v[2]);
            g.sub(a, b)?
        },
        {
            let a = g.mul_scalar(q.x, v[1]);
            let b = g.mul_scalar(q.y, v[0]);
            g.sub(a, b)?
        },
    ];
    // c2 = q_v × c1
    let c2 = [
        {
            let a = g.mul(q.y, c1[2])?;
            let b = g.mul(q.z, c1[1])?;
            g.sub(a, b)?
        },
        {
            let a = g.mul(q.z, c1[0])?;
            let b = g.mul(q.x, c1[2])?;
            g.sub(a, b)?
        },
        {
            let a = g.mul(q.x, c1[1])?;
            let b = g.mul(q.y, c1[0])?;
            g.sub(a, b)?
        },
    ];
    let mut out = Vec::with_capacity(3);
    for c in 0..3 {
        let wc1 = g.mul(q.w, c1[c])?;
        let sum = g.add(wc1, c2[c])?;
        let twice = g.mul_scalar(sum, 2.0);
        out.push(g.add_scalar(twice, v[c]));
    }
    Ok([out[0], out[1], out[2]])
}

/// Root-velocity lanes `[B, 3, T]`.
pub fn velocity_lanes<F: Real>(g: &mut Graph<F>, x: Var, joints: usize) -> TensorResult<Var> {
    let shape = g.shape(x).to_vec();
    let s1 = g.slice(x, 1, 0, 3)?;
    let s2 = g.slice(s1, 2, joints, 1)?;
    g.reshape(s2, &[shape[0], 3, shape[3]])
}

/// Contact pre-activation lanes `[B, 2, T]`.
pub fn contact_logits<F: Real>(g: &mut Graph<F>, x: Var, joints: usize) -> TensorResult<Var> {
    let shape = g.shape(x).to_vec();
    let s1 = g.slice(x, 1, 0, 1)?;
    let s2 = g.slice(s1, 2, joints + 1, 2)?;
    g.reshape(s2, &[shape[0], 2, shape[3]])
}

/// Integrated root positions `[B, 3, T]` with `P[0] = 0`.
pub fn root_positions<F: Real>(g: &mut Graph<F>, x: Var, joints: usize) -> TensorResult<Var> {
    let v = velocity_lanes(g, x, joints)?;
    let t = g.shape(v)[2];
    // Zero the first frame, then cumulative-sum.
    let tail = g.slice(v, 2, 1, t - 1)?;
    let shifted = g.embed_slice(tail, 2, 1, t)?;
    g.cumsum(shifted, 2)
}

/// Global joint positions `[B, J, 3, T]` from a network block.
pub fn fk_positions<F: Real>(g: &mut Graph<F>, x: Var, topo: &SkeletonTopology) -> TensorResult<Var> {
    let shape = g.shape(x).to_vec();
    let (b, t) = (shape[0], shape[3]);
    let j_n = topo.joint_count();
    let root = topo.root();
    let rp = root_positions(g, x, j_n)?;
    let root_pos: [Var; 3] = {
        let mut out = Vec::with_capacity(3);
        for c in 0..3 {
            let s = g.slice(rp, 1, c, 1)?;
            out.push(g.reshape(s, &[b, t])?);
        }
        [out[0], out[1], out[2]]
    };

    let mut glob_q: Vec<Option<GQuat>> = vec![None; j_n];
    let mut pos: Vec<Option<[Var; 3]>> = vec![None; j_n];
    let order = {
        let mut po = topo.post_order();
        po.reverse();
        po
    };
    for &j in &order {
        let q_local = joint_quat(g, x, j)?;
        match topo.parents[j] {
            None => {
                glob_q[root] = Some(q_local);
                pos[root] = Some(root_pos);
            }
            Some(p) => {
                let pq = glob_q[p].expect("parents processed first");
                let rotated = qrotate_const(g, &pq, topo.offsets[j])?;
                let pp = pos[p].expect("parents processed first");
                let mut out = Vec::with_capacity(3);
                for c in 0..3 {
                    out.push(g.add(pp[c], rotated[c])?);
                }
                pos[j] = Some([out[0], out[1], out[2]]);
                glob_q[j] = Some(qmul(g, &pq, &q_local)?);
            }
        }
    }

    let mut rows = Vec::with_capacity(j_n * 3);
    for j in 0..j_n {
        let p = pos[j].expect("all joints reached");
        for c in 0..3 {
            rows.push(g.reshape(p[c], &[b, 1, t])?);
        }
    }
    let stacked = g.concat(&rows, 1)?;
    g.reshape(stacked, &[b, j_n, 3, t])
}

/// Squared forward-difference foot speeds `[B, 2, T]`; frame 0 copies
/// frame 1.
pub fn foot_speed_sq<F: Real>(g: &mut Graph<F>, positions: Var, feet: [usize; 2]) -> TensorResult<Var> {
    let shape = g.shape(positions).to_vec(); // [B, J, 3, T]
    let (b, t) = (shape[0], shape[3]);
    let mut rows = Vec::with_capacity(2);
    for &f in &feet {
        let pf = g.slice(positions, 1, f, 1)?;
        let pf = g.reshape(pf, &[b, 3, t])?;
        let next = g.slice(pf, 2, 1, t - 1)?;
        let prev = g.slice(pf, 2, 0, t - 1)?;
        let d = g.sub(next, prev)?;
        let d2 = g.square(d);
        let s = g.sum_axes(d2, &[1], false)?; // [B, T-1]
        let first = g.slice(s, 1, 0, 1)?;
        let full = g.concat(&[first, s], 1)?; // [B, T]
        rows.push(g.reshape(full, &[b, 1, t])?);
    }
    g.concat(&rows, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{encode_motion, forward_kinematics, Motion};
    use crate::skeleton::SkeletonTopology;
    use crate::tensor::{finite_diff_check, Graph, TensorData};
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn random_motion(rng: &mut ChaCha20Rng, frames: usize, joints: usize) -> Motion {
        use crate::motion::Quat;
        Motion {
            rotations: (0..frames * joints)
                .map(|_| {
                    Quat::new(
                        rng.gen_range(-1.0..1.0f64),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                    .normalized()
                    .canonical()
                })
                .collect(),
            root_velocity: (0..frames).map(|_| [rng.gen_range(-0.2..0.2), 0.0, rng.gen_range(-0.2..0.2)]).collect(),
            contacts: vec![[true, true]; frames],
            fps: 30.0,
        }
    }

    #[test]
    fn graph_fk_matches_host_fk() {
        let mut rng = ChaCha20Rng::seed_from_u64(101);
        let topo = SkeletonTopology::humanoid17();
        for _ in 0..5 {
            let m = random_motion(&mut rng, 6, 17);
            let host = forward_kinematics(&m, &topo).unwrap();
            let block = encode_motion(&m).unwrap().to_network::<f64>();
            let mut g = Graph::<f64>::new();
            let shape = vec![1, 4, 20, 6];
            let mut data = vec![0.0f64; 4 * 20 * 6];
            data.copy_from_slice(&block.data);
            let x = g.constant(TensorData::new(shape, data));
            let pos = fk_positions(&mut g, x, &topo).unwrap();
            assert_eq!(g.shape(pos), &[1, 17, 3, 6]);
            let pv = g.value(pos);
            for t in 0..6 {
                for j in 0..17 {
                    for c in 0..3 {
                        let got = pv.data[(j * 3 + c) * 6 + t];
                        let want = host[t * 17 + j][c];
                        assert!((got - want).abs() < 1e-6, "t{t} j{j} c{c}: {got} vs {want}");
                    }
                }
            }
        }
    }

    #[test]
    fn graph_fk_gradients_pass_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(103);
        let topo = SkeletonTopology::humanoid7();
        let m = random_motion(&mut rng, 4, 7);
        let block = encode_motion(&m).unwrap().to_network::<f64>();
        let point = TensorData::new(vec![1, 4, 10, 4], block.data);
        let probe = {
            use rand_distr::StandardNormal;
            let n = 7 * 3 * 4;
            TensorData::<f64>::new(vec![1, 7, 3, 4], (0..n).map(|_| rng.sample(StandardNormal)).collect())
        };
        let topo2 = topo.clone();
        let err = finite_diff_check(
            &move |g, x| {
                let pos = fk_positions(g, x, &topo2)?;
                let p = g.constant(probe.clone());
                let q = g.mul(pos, p)?;
                g.sum_all(q)
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "fk grad err {err}");
    }

    #[test]
    fn foot_speed_gradients_pass_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(105);
        let topo = SkeletonTopology::humanoid7();
        let m = random_motion(&mut rng, 4, 7);
        let block = encode_motion(&m).unwrap().to_network::<f64>();
        let point = TensorData::new(vec![1, 4, 10, 4], block.data);
        let feet = topo.feet;
        let topo2 = topo.clone();
        let err = finite_diff_check(
            &move |g, x| {
                let pos = fk_positions(g, x, &topo2)?;
                let ss = foot_speed_sq(g, pos, feet)?;
                g.sum_all(ss)
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "foot speed grad err {err}");
    }
}
