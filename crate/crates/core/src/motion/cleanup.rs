//! Foot-pinning cleanup: during labeled contact, the foot is held at its
//! position at contact onset by an analytic per-frame leg-chain adjustment
//! (aim + two-bone bend), with 3-frame blending at segment boundaries.

use super::quat::{cross, normalize3, Quat};
use super::{forward_kinematics, integrate_root, Motion, MotionResult};
use crate::skeleton::SkeletonTopology;

struct LegChain {
    hip: usize,
    knee: Option<usize>,
    foot: usize,
}

fn leg_chain(topo: &SkeletonTopology, foot: usize) -> LegChain {
    let p1 = topo.parents[foot].expect("foot is not the root");
    match topo.parents[p1] {
        Some(p2) if topo.parents[p1].is_some() && p1 != topo.root() && topo.parents[p2].is_some() => {
            LegChain { hip: p1, knee: None, foot }
                // placeholder, replaced below
        }
        _ => LegChain { hip: p1, knee: None, foot },
    }
}

fn leg_chain_full(topo: &SkeletonTopology, foot: usize) -> LegChain {
    let knee = topo.parents[foot].expect("foot has a parent");
    match topo.parents[knee] {
        Some(hip) if knee != topo.root() && topo.parents[hip].is_some() => {
            LegChain { hip, knee: Some(knee), foot }
        }
        Some(hip) if topo.parents[hip].is_none() => {
            // knee's parent is the root: treat knee as the hip of a
            // single-bone leg only if the chain has just one segment.
            LegChain { hip: knee, knee: None, foot }
        }
        _ => LegChain { hip: knee, knee: None, foot },
    }
}

/// Solve the leg chain so the foot lands on `target`. Returns updated local
/// rotations for (hip, knee).
#[allow(clippy::too_many_arguments)]
fn solve_leg(
    glob_parent: Quat,
    hip_pos: [f64; 3],
    q_hip: Quat,
    q_knee: Quat,
    off_knee: Option<[f64; 3]>,
    off_foot: [f64; 3],
    target: [f64; 3],
) -> (Quat, Quat) {
    let norm = |v: [f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let add = |a: [f64; 3], b: [f64; 3]| [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
    let mut q_hip = q_hip;
    let mut q_knee = q_knee;
    let fk_chain = |q_hip: &Quat, q_knee: &Quat| -> ([f64; 3], [f64; 3]) {
        let gh = glob_parent.mul(q_hip);
        match off_knee {
            Some(ok) => {
                let knee_pos = add(hip_pos, gh.rotate(ok));
                let gk = gh.mul(q_knee);
                (knee_pos, add(knee_pos, gk.rotate(off_foot)))
            }
            None => {
                let foot_pos = add(hip_pos, gh.rotate(off_foot));
                (hip_pos, foot_pos)
            }
        }
    };
    for _ in 0..3 {
        let (_, foot_pos) = fk_chain(&q_hip, &q_knee);
        if norm(sub(foot_pos, target)) < 1e-9 {
            break; // already on target
        }
        // Aim the whole chain at the target.
        let cur = sub(foot_pos, hip_pos);
        let want = sub(target, hip_pos);
        if norm(cur) > 1e-9 && norm(want) > 1e-9 {
            let r = Quat::between(cur, want);
            let gh = r.mul(&glob_parent.mul(&q_hip));
            q_hip = glob_parent.conjugate().mul(&gh).normalized();
        }
        // Two-bone distance correction at the knee.
        if let Some(ok) = off_knee {
            let l1 = norm(ok);
            let l2 = norm(off_foot);
            let d = norm(sub(target, hip_pos)).clamp((l1 - l2).abs(), l1 + l2);
            let (knee_pos, foot_pos) = fk_chain(&q_hip, &q_knee);
            let b1 = sub(knee_pos, hip_pos);
            let b2 = sub(foot_pos, knee_pos);
            let cos_cur = (b1[0] * b2[0] + b1[1] * b2[1] + b1[2] * b2[2]) / (l1 * l2);
            let phi_cur = cos_cur.clamp(-1.0, 1.0).acos();
            let phi_want = ((d * d - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0).acos();
            let axis = {
                let c = cross(b1, b2);
                if norm(c) < 1e-9 {
                    // Straight leg: bend about any axis perpendicular to it.
                    let gh = glob_parent.mul(&q_hip);
                    gh.rotate([1.0, 0.0, 0.0])
                } else {
                    normalize3(c)
                }
            };
            let gh = glob_parent.mul(&q_hip);
            let apply = |delta: f64, q_knee: &Quat| -> Quat {
                let gk = gh.mul(q_knee);
                let gk2 = Quat::from_axis_angle(axis, delta).mul(&gk);
                gh.conjugate().mul(&gk2).normalized()
            };
            let delta = phi_want - phi_cur;
            let cand_a = apply(delta, &q_knee);
            let cand_b = apply(-delta, &q_knee);
            let err = |qk: &Quat| {
                let (_, fp) = fk_chain(&q_hip, qk);
                norm(sub(fp, target))
            };
            q_knee = if err(&cand_a) <= err(&cand_b) { cand_a } else { cand_b };
        }
    }
    (q_hip, q_knee)
}

/// Contact segments `[start, end)` per foot from the labels.
fn contact_segments(contacts: &[[bool; 2]], foot: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (t, c) in contacts.iter().enumerate() {
        match (c[foot], start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push((s, t));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, contacts.len()));
    }
    out
}

/// Pin feet to their contact-onset positions. Root motion and non-leg joints
/// are untouched; boundary discontinuities are blended over 3 frames.
pub fn ik_foot_cleanup(m: &Motion, topo: &SkeletonTopology) -> MotionResult<Motion> {
    let _ = leg_chain; // single construction path below
    let t_n = m.frames();
    let j_n = m.joints();
    let positions = forward_kinematics(m, topo)?;
    let root_pos = integrate_root(&m.root_velocity);
    let _ = root_pos;
    let mut out = m.clone();

    // Global rotation of each joint's parent chain, per frame, from the
    // ORIGINAL motion. Legs hang off joints that the cleanup never edits, so
    // these stay valid while leg rotations change.
    let order = {
        let mut po = topo.post_order();
        po.reverse();
        po
    };
    let mut glob = vec![Quat::IDENTITY; t_n * j_n];
    for t in 0..t_n {
        for &j in &order {
            glob[t * j_n + j] = match topo.parents[j] {
                None => m.rotation(t, j),
                Some(p) => glob[t * j_n + p].mul(&m.rotation(t, j)),
            };
        }
    }

    for (fi, &foot) in topo.feet.iter().enumerate() {
        let chain = leg_chain_full(topo, foot);
        let hip_parent = topo.parents[chain.hip];
        let segments = contact_segments(&m.contacts, fi);
        for &(s, e) in &segments {
            let target = positions[s * j_n + foot];
            // Per-frame deltas for boundary blending.
            let mut first_delta: Option<(Quat, Quat)> = None;
            let mut last_delta: Option<(Quat, Quat)> = None;
            for t in s..e {
                let glob_parent = match hip_parent {
                    Some(p) => glob[t * j_n + p],
                    None => Quat::IDENTITY,
                };
                let hip_pos = positions[t * j_n + chain.hip];
                let q_hip = m.rotation(t, chain.hip);
                let q_knee = chain.knee.map(|k| m.rotation(t, k)).unwrap_or(Quat::IDENTITY);
                let (new_hip, new_knee) = solve_leg(
                    glob_parent,
                    hip_pos,
                    q_hip,
                    q_knee,
                    chain.knee.map(|k| topo.offsets[k]),
                    topo.offsets[foot],
                    target,
                );
                out.rotations[t * j_n + chain.hip] = new_hip.canonical();
                if let Some(k) = chain.knee {
                    out.rotations[t * j_n + k] = new_knee.canonical();
                }
                let delta_hip = new_hip.mul(&q_hip.conjugate());
                let delta_knee = new_knee.mul(&q_knee.conjugate());
                if t == s {
                    first_delta = Some((delta_hip, delta_knee));
                }
                if t == e - 1 {
                    last_delta = Some((delta_hip, delta_knee));
                }
            }
            // Blend the correction out over 3 frames on each free side.
            let mut blend = |t: isize, delta: &(Quat, Quat), w: f64| {
                if t < 0 || t >= t_n as isize {
                    return;
                }
                let t = t as usize;
                if m.contacts[t][fi] {
                    return; // inside another pinned segment
                }
                let dh = Quat::IDENTITY.slerp(&delta.0, w);
                let dk = Quat::IDENTITY.slerp(&delta.1, w);
                let idx = t * j_n + chain.hip;
                out.rotations[idx] = dh.mul(&out.rotations[idx]).canonical();
                if let Some(k) = chain.knee {
                    let idx = t * j_n + k;
                    out.rotations[idx] = dk.mul(&out.rotations[idx]).canonical();
                }
            };
            if let Some(d) = last_delta {
                for k in 1..=3isize {
                    blend(e as isize - 1 + k, &d, (3 - k) as f64 / 3.0);
                }
            }
            if let Some(d) = first_delta {
                for k in 1..=3isize {
                    blend(s as isize - k, &d, (3 - k) as f64 / 3.0);
                }
            }
        }
    }
    Ok(out)
}
