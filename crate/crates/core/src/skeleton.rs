//! Skeletal graph, coarse-to-fine hierarchy, pooling maps and neighbor masks.
//!
//! A joint is identified with the edge directed towards it; the root joint
//! carries an abstract edge starting at the origin. Besides the rotation
//! entities the motion tensor holds one root-velocity entity and two
//! foot-contact entities, so `E = J + 3` at the finest level.

use std::collections::BTreeSet;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type SkeletonResult<T> = Result<T, SkeletonError>;

// ── Topology ─────────────────────────────────────────────────────────────

/// Static skeleton description: tree structure, bone offsets, feet.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTopology {
    pub names: Vec<String>,
    /// Parent joint per joint; `None` marks the root.
    pub parents: Vec<Option<usize>>,
    /// Bone offset from the parent joint, length units (Y up).
    pub offsets: Vec<[f64; 3]>,
    /// Exactly two foot joints, both leaves — order defines the contact lanes.
    pub feet: [usize; 2],
}

impl SkeletonTopology {
    pub fn new(
        names: Vec<String>,
        parents: Vec<Option<usize>>,
        offsets: Vec<[f64; 3]>,
        feet: [usize; 2],
    ) -> SkeletonResult<Self> {
        let t = Self { names, parents, offsets, feet };
        t.validate()?;
        Ok(t)
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    /// Number of motion-tensor entities: rotations + velocity + 2 contacts.
    pub fn entity_count(&self) -> usize {
        self.joint_count() + 3
    }

    pub fn root(&self) -> usize {
        self.parents.iter().position(|p| p.is_none()).expect("validated topology has a root")
    }

    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut ch = vec![Vec::new(); self.joint_count()];
        for (j, p) in self.parents.iter().enumerate() {
            if let Some(p) = p {
                ch[*p].push(j);
            }
        }
        ch
    }

    pub fn is_leaf(&self, j: usize) -> bool {
        !self.parents.iter().any(|p| *p == Some(j))
    }

    /// Joints ordered children-before-parent (depth-first, children ascending).
    pub fn post_order(&self) -> Vec<usize> {
        let ch = self.children();
        let mut out = Vec::with_capacity(self.joint_count());
        fn rec(j: usize, ch: &[Vec<usize>], out: &mut Vec<usize>) {
            for &c in &ch[j] {
                rec(c, ch, out);
            }
            out.push(j);
        }
        rec(self.root(), &ch, &mut out);
        out
    }

    /// Length of the leg chain from the hip down to the given foot.
    pub fn leg_length(&self, foot: usize) -> f64 {
        let mut len = 0.0;
        let mut j = foot;
        while let Some(p) = self.parents[j] {
            let o = self.offsets[j];
            len += (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt();
            if p == self.root() {
                break;
            }
            j = p;
        }
        len
    }

    /// Mean bone length over all non-root joints.
    pub fn mean_bone_length(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (j, p) in self.parents.iter().enumerate() {
            if p.is_some() {
                let o = self.offsets[j];
                sum += (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt();
                n += 1;
            }
        }
        sum / n.max(1) as f64
    }

    fn validate(&self) -> SkeletonResult<()> {
        let j = self.joint_count();
        if j == 0 || self.offsets.len() != j || self.names.len() != j {
            return Err(SkeletonError::InvalidTopology("field lengths disagree".into()));
        }
        let roots = self.parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(SkeletonError::InvalidTopology(format!("expected 1 root, found {roots}")));
        }
        // Every joint must reach the root without cycles.
        for start in 0..j {
            let mut seen = 0usize;
            let mut cur = start;
            while let Some(p) = self.parents[cur] {
                if p >= j {
                    return Err(SkeletonError::InvalidTopology(format!("parent index {p} out of range")));
                }
                cur = p;
                seen += 1;
                if seen > j {
                    return Err(SkeletonError::InvalidTopology("cycle in parent indices".into()));
                }
            }
        }
        let [f0, f1] = self.feet;
        if f0 == f1 || f0 >= j || f1 >= j {
            return Err(SkeletonError::InvalidTopology("feet must be two distinct joints".into()));
        }
        for f in self.feet {
            if !self.is_leaf(f) {
                return Err(SkeletonError::InvalidTopology(format!("foot joint {f} is not a leaf")));
            }
        }
        let mut names = self.names.clone();
        names.sort();
        names.dedup();
        if names.len() != j {
            return Err(SkeletonError::InvalidTopology("joint names must be unique".into()));
        }
        Ok(())
    }

    /// Plain-text description: one `name parent_index dx dy dz [foot]` line
    /// per joint, `-1` parent for the root, `#` comments.
    pub fn from_text(text: &str) -> SkeletonResult<Self> {
        let mut names = Vec::new();
        let mut parents = Vec::new();
        let mut offsets = Vec::new();
        let mut feet = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.len() < 5 {
                return Err(SkeletonError::Parse {
                    line: ln + 1,
                    msg: "expected `name parent dx dy dz [foot]`".into(),
                });
            }
            let parent: i64 = tok[1]
                .parse()
                .map_err(|_| SkeletonError::Parse { line: ln + 1, msg: "bad parent index".into() })?;
            let mut off = [0.0f64; 3];
            for (k, o) in off.iter_mut().enumerate() {
                *o = tok[2 + k]
                    .parse()
                    .map_err(|_| SkeletonError::Parse { line: ln + 1, msg: "bad offset".into() })?;
            }
            if tok.len() > 5 && tok[5] == "foot" {
                feet.push(names.len());
            }
            names.push(tok[0].to_string());
            parents.push(if parent < 0 { None } else { Some(parent as usize) });
            offsets.push(off);
        }
        if feet.is_empty() {
            for (j, n) in names.iter().enumerate() {
                if n.to_lowercase().contains("foot") {
                    feet.push(j);
                }
            }
        }
        if feet.len() != 2 {
            return Err(SkeletonError::InvalidTopology(format!(
                "expected exactly 2 feet, found {}",
                feet.len()
            )));
        }
        Self::new(names, parents, offsets, [feet[0], feet[1]])
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for j in 0..self.joint_count() {
            let p = self.parents[j].map(|p| p as i64).unwrap_or(-1);
            let o = self.offsets[j];
            let foot = if self.feet.contains(&j) { " foot" } else { "" };
            out.push_str(&format!("{} {} {} {} {}{}\n", self.names[j], p, o[0], o[1], o[2], foot));
        }
        out
    }

    /// 17-joint reference humanoid: torso/head chain, two 3-segment legs,
    /// two 3-segment arms.
    pub fn humanoid17() -> Self {
        let spec: [(&str, i64, [f64; 3]); 17] = [
            ("pelvis", -1, [0.0, 0.0, 0.0]),
            ("spine", 0, [0.0, 0.20, 0.0]),
            ("chest", 1, [0.0, 0.20, 0.0]),
            ("neck", 2, [0.0, 0.15, 0.0]),
            ("head", 3, [0.0, 0.15, 0.0]),
            ("hip_l", 0, [0.11, -0.05, 0.0]),
            ("knee_l", 5, [0.0, -0.45, 0.0]),
            ("foot_l", 6, [0.0, -0.45, 0.0]),
            ("hip_r", 0, [-0.11, -0.05, 0.0]),
            ("knee_r", 8, [0.0, -0.45, 0.0]),
            ("foot_r", 9, [0.0, -0.45, 0.0]),
            ("shoulder_l", 2, [0.18, 0.05, 0.0]),
            ("elbow_l", 11, [0.0, -0.26, 0.0]),
            ("wrist_l", 12, [0.0, -0.25, 0.0]),
            ("shoulder_r", 2, [-0.18, 0.05, 0.0]),
            ("elbow_r", 14, [0.0, -0.26, 0.0]),
            ("wrist_r", 15, [0.0, -0.25, 0.0]),
        ];
        let names = spec.iter().map(|s| s.0.to_string()).collect();
        let parents = spec.iter().map(|s| if s.1 < 0 { None } else { Some(s.1 as usize) }).collect();
        let offsets = spec.iter().map(|s| s.2).collect();
        Self::new(names, parents, offsets, [7, 10]).expect("built-in skeleton is valid")
    }

    /// 7-joint compact humanoid used by the synthetic corpus: single-bone
    /// legs and a 2-segment right arm.
    pub fn humanoid7() -> Self {
        let spec: [(&str, i64, [f64; 3]); 7] = [
            ("root", -1, [0.0, 0.0, 0.0]),
            ("hip_l", 0, [0.12, -0.05, 0.0]),
            ("foot_l", 1, [0.0, -0.85, 0.0]),
            ("hip_r", 0, [-0.12, -0.05, 0.0]),
            ("foot_r", 3, [0.0, -0.85, 0.0]),
            ("shoulder_r", 0, [-0.18, 0.45, 0.0]),
            ("elbow_r", 5, [0.0, -0.28, 0.0]),
        ];
        let names = spec.iter().map(|s| s.0.to_string()).collect();
        let parents = spec.iter().map(|s| if s.1 < 0 { None } else { Some(s.1 as usize) }).collect();
        let offsets = spec.iter().map(|s| s.2).collect();
        Self::new(names, parents, offsets, [2, 4]).expect("built-in skeleton is valid")
    }
}

// ── Hierarchy ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntityKind {
    Rotation,
    Velocity,
    Contact,
    /// Velocity and contact lanes merged; at the coarsest level it may also
    /// absorb the rotations.
    Global,
}

#[derive(Debug, Clone)]
pub struct Entity {
    pub kind: EntityKind,
    /// Finest-level edge (joint) indices this entity covers. Empty for pure
    /// velocity/contact entities.
    pub edges: Vec<usize>,
    /// Parent entity index in this level's rotation tree. Velocity, contact
    /// and global entities hang off the root entity.
    pub parent: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct HierarchyLevel {
    pub entities: Vec<Entity>,
    pub frames: usize,
}

impl HierarchyLevel {
    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }
}

/// Binary entity-relation mask (`rows = E_out`, `cols = E_in`).
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }
}

/// Coarse-to-fine hierarchy; level 0 is the coarsest (generator input side),
/// level `L−1` matches the data layout.
#[derive(Debug, Clone)]
pub struct SkeletonHierarchy {
    pub topology: SkeletonTopology,
    pub levels: Vec<HierarchyLevel>,
    /// `pools[l][i]` = fine entity indices at level `l+1` merged into coarse
    /// entity `i` of level `l`.
    pools: Vec<Vec<Vec<usize>>>,
}

/// Internal working representation of one level during coarsening.
#[derive(Clone)]
struct WEntity {
    kind: EntityKind,
    edges: Vec<usize>,
    parent: Option<usize>, // rotation-tree parent (index into the same list)
}

/// Build the coarse-to-fine hierarchy.
///
/// The finest level (index `num_levels−1`) mirrors the topology. Each
/// coarsening pass merges pairs of adjacent edges by a deterministic
/// post-order maximum matching; the two contact entities merge on the first
/// pass, the velocity/contact entities merge into one global entity once
/// fewer than eight rotation entities remain, and (for hierarchies of three
/// or more levels) the last two passes collapse all rotations into one
/// entity and then everything into a single entity, matching the generator's
/// single-entity input block.
pub fn build_hierarchy(
    topology: &SkeletonTopology,
    num_levels: usize,
    frames_finest: usize,
) -> SkeletonResult<SkeletonHierarchy> {
    if num_levels < 2 {
        return Err(SkeletonError::Usage("num_levels must be ≥ 2".into()));
    }
    let halvings = num_levels - 1;
    if frames_finest % (1 << halvings) != 0 || frames_finest == 0 {
        return Err(SkeletonError::Config(format!(
            "frame count {frames_finest} not divisible by 2^{halvings}"
        )));
    }

    // Finest level: one rotation entity per joint (entity index = joint
    // index), then velocity, then the two contacts in feet order.
    let j = topology.joint_count();
    let mut levels_rev: Vec<Vec<WEntity>> = Vec::new();
    let mut pools_rev: Vec<Vec<Vec<usize>>> = Vec::new();
    let mut current: Vec<WEntity> = (0..j)
        .map(|i| WEntity { kind: EntityKind::Rotation, edges: vec![i], parent: topology.parents[i] })
        .collect();
    current.push(WEntity { kind: EntityKind::Velocity, edges: vec![], parent: None });
    current.push(WEntity { kind: EntityKind::Contact, edges: vec![], parent: None });
    current.push(WEntity { kind: EntityKind::Contact, edges: vec![], parent: None });
    levels_rev.push(current.clone());

    for pass in 0..halvings {
        let target_level = num_levels - 2 - pass; // level index being produced
        let collapse_all = num_levels >= 3 && target_level == 0;
        let collapse_rot = num_levels >= 3 && target_level == 1;
        let (next, pool) = coarsen_pass(&current, pass == 0, collapse_rot, collapse_all)?;
        pools_rev.push(pool);
        levels_rev.push(next.clone());
        current = next;
    }

    let mut levels = Vec::with_capacity(num_levels);
    for (i, lv) in levels_rev.into_iter().rev().enumerate() {
        let frames = frames_finest >> (num_levels - 1 - i);
        levels.push(HierarchyLevel {
            entities: lv
                .into_iter()
                .map(|e| Entity { kind: e.kind, edges: e.edges, parent: e.parent })
                .collect(),
            frames,
        });
    }
    let pools: Vec<Vec<Vec<usize>>> = pools_rev.into_iter().rev().collect();
    Ok(SkeletonHierarchy { topology: topology.clone(), levels, pools })
}

/// One coarsening pass; returns the coarse entities and the coarse→fine map.
fn coarsen_pass(
    fine: &[WEntity],
    first_pass: bool,
    collapse_rot: bool,
    collapse_all: bool,
) -> SkeletonResult<(Vec<WEntity>, Vec<Vec<usize>>)> {
    let rot: Vec<usize> = (0..fine.len()).filter(|&i| fine[i].kind == EntityKind::Rotation).collect();

    // Groups of fine indices forming each coarse entity.
    let mut groups: Vec<(EntityKind, Vec<usize>)> = Vec::new();

    if collapse_all {
        groups.push((EntityKind::Global, (0..fine.len()).collect()));
    } else {
        // Rotation entities.
        if collapse_rot {
            if !rot.is_empty() {
                groups.push((EntityKind::Rotation, rot.clone()));
            }
        } else {
            let matching = rotation_matching(fine, &rot);
            if matching.is_empty() && rot.len() > 1 {
                return Err(SkeletonError::Config(
                    "no adjacent rotation entities left to merge; topology too small for the requested depth"
                        .into(),
                ));
            }
            if rot.len() <= 1 {
                return Err(SkeletonError::Config(
                    "cannot coarsen below a single rotation entity; topology too small for the requested depth"
                        .into(),
                ));
            }
            let mut consumed = vec![false; fine.len()];
            let mut merged: Vec<Vec<usize>> = Vec::new();
            for &(a, b) in &matching {
                merged.push(vec![a.min(b), a.max(b)]);
                consumed[a] = true;
                consumed[b] = true;
            }
            for &r in &rot {
                if !consumed[r] {
                    merged.push(vec![r]);
                }
            }
            // Deterministic order: by smallest covered finest edge.
            merged.sort_by_key(|g| fine[g[0]].edges.iter().min().copied().unwrap_or(usize::MAX));
            for m in merged {
                groups.push((EntityKind::Rotation, m));
            }
        }

        // Non-rotation entities.
        let vel: Vec<usize> = (0..fine.len()).filter(|&i| fine[i].kind == EntityKind::Velocity).collect();
        let contact: Vec<usize> = (0..fine.len()).filter(|&i| fine[i].kind == EntityKind::Contact).collect();
        let global: Vec<usize> = (0..fine.len()).filter(|&i| fine[i].kind == EntityKind::Global).collect();
        let rot_after = groups.iter().filter(|g| g.0 == EntityKind::Rotation).count();
        let merge_global = collapse_rot || rot_after < 8;
        if merge_global {
            let all: Vec<usize> = vel.iter().chain(contact.iter()).chain(global.iter()).copied().collect();
            if !all.is_empty() {
                groups.push((EntityKind::Global, all));
            }
        } else {
            for v in vel {
                groups.push((EntityKind::Velocity, vec![v]));
            }
            if first_pass && contact.len() == 2 {
                groups.push((EntityKind::Contact, contact));
            } else {
                for c in contact {
                    groups.push((EntityKind::Contact, vec![c]));
                }
            }
            for g in global {
                groups.push((EntityKind::Global, vec![g]));
            }
        }
    }

    // Materialize coarse entities with rotation-tree parents.
    let mut fine_to_group = vec![usize::MAX; fine.len()];
    for (gi, (_, members)) in groups.iter().enumerate() {
        for &m in members {
            fine_to_group[m] = gi;
        }
    }
    let mut coarse = Vec::with_capacity(groups.len());
    for (kind, members) in &groups {
        let mut edges = BTreeSet::new();
        for &m in members {
            edges.extend(fine[m].edges.iter().copied());
        }
        // Parent group: the group owning some member's parent outside this group.
        let mut parent = None;
        if *kind == EntityKind::Rotation {
            for &m in members {
                if let Some(p) = fine[m].parent {
                    if fine_to_group[p] != fine_to_group[m] {
                        parent = Some(fine_to_group[p]);
                        break;
                    }
                }
            }
        }
        coarse.push(WEntity { kind: *kind, edges: edges.into_iter().collect(), parent });
    }
    let pool: Vec<Vec<usize>> = groups.into_iter().map(|(_, m)| m).collect();
    Ok((coarse, pool))
}

/// Deterministic greedy maximum matching on the rotation-entity tree:
/// post-order visit, each vertex pairs with its smallest unmatched child.
fn rotation_matching(fine: &[WEntity], rot: &[usize]) -> Vec<(usize, usize)> {
    let key = |i: usize| fine[i].edges.iter().min().copied().unwrap_or(usize::MAX);
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); fine.len()];
    let mut roots = Vec::new();
    for &r in rot {
        match fine[r].parent {
            Some(p) => children[p].push(r),
            None => roots.push(r),
        }
    }
    for ch in &mut children {
        ch.sort_by_key(|&c| key(c));
    }
    roots.sort_by_key(|&r| key(r));

    let mut order = Vec::with_capacity(rot.len());
    fn rec(v: usize, children: &[Vec<usize>], order: &mut Vec<usize>) {
        for &c in &children[v] {
            rec(c, children, order);
        }
        order.push(v);
    }
    for &r in &roots {
        rec(r, &children, &mut order);
    }

    let mut matched = vec![false; fine.len()];
    let mut pairs = Vec::new();
    for &v in &order {
        if matched[v] {
            continue;
        }
        if let Some(&c) = children[v].iter().find(|&&c| !matched[c]) {
            matched[v] = true;
            matched[c] = true;
            pairs.push((v, c));
        }
    }
    pairs
}

impl SkeletonHierarchy {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn entity_count(&self, level: usize) -> usize {
        self.levels[level].entity_count()
    }

    pub fn frames(&self, level: usize) -> usize {
        self.levels[level].frames
    }

    pub fn entity_counts(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.entity_count()).collect()
    }

    pub fn frame_counts(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.frames).collect()
    }

    /// Stored coarse→fine pooling map between `level` and `level+1`.
    pub fn pooling_map(&self, level: usize) -> SkeletonResult<&Vec<Vec<usize>>> {
        if level + 1 >= self.num_levels() {
            return Err(SkeletonError::Usage(format!(
                "pooling map defined for levels 0..{}, got {level}",
                self.num_levels() - 1
            )));
        }
        Ok(&self.pools[level])
    }

    /// Index of the entity containing the root edge at `level`.
    pub fn root_entity(&self, level: usize) -> usize {
        self.levels[level]
            .entities
            .iter()
            .position(|e| e.edges.contains(&self.topology.root()))
            .expect("some entity contains the root edge")
    }

    /// Undirected adjacency between entities at `level`: rotation entities
    /// connect along the coarsened tree; velocity/contact/global entities
    /// attach to the root entity.
    pub fn adjacency(&self, level: usize) -> Vec<Vec<usize>> {
        let lv = &self.levels[level];
        let n = lv.entity_count();
        let mut adj = vec![Vec::new(); n];
        let root = self.root_entity(level);
        for (i, e) in lv.entities.iter().enumerate() {
            match e.kind {
                EntityKind::Rotation => {
                    if let Some(p) = e.parent {
                        adj[i].push(p);
                        adj[p].push(i);
                    }
                }
                EntityKind::Velocity | EntityKind::Contact | EntityKind::Global => {
                    if i != root {
                        adj[i].push(root);
                        adj[root].push(i);
                    }
                }
            }
        }
        for a in &mut adj {
            a.sort_unstable();
            a.dedup();
        }
        adj
    }

    /// `mask[i][j] = 1` iff entity `j` lies within graph distance `dist` of
    /// entity `i` at this level (self always included).
    pub fn neighbor_mask(&self, level: usize, dist: usize) -> BinaryMask {
        let n = self.entity_count(level);
        let adj = self.adjacency(level);
        let mut data = vec![false; n * n];
        for i in 0..n {
            // BFS to depth `dist`.
            let mut depth = vec![usize::MAX; n];
            depth[i] = 0;
            let mut queue = std::collections::VecDeque::from([i]);
            while let Some(v) = queue.pop_front() {
                if depth[v] == dist {
                    continue;
                }
                for &w in &adj[v] {
                    if depth[w] == usize::MAX {
                        depth[w] = depth[v] + 1;
                        queue.push_back(w);
                    }
                }
            }
            for jj in 0..n {
                data[i * n + jj] = depth[jj] != usize::MAX;
            }
        }
        BinaryMask { rows: n, cols: n, data }
    }

    /// Scaler mask between coarse `level` and fine `level+1`: coarse entity
    /// `i` sees fine entity `j` iff `j` is pooled into `i` or neighbors one
    /// of `i`'s pooled entities at the fine level.
    pub fn pool_mask(&self, level: usize) -> SkeletonResult<BinaryMask> {
        let pool = self.pooling_map(level)?.clone();
        let fine_n = self.entity_count(level + 1);
        let coarse_n = self.entity_count(level);
        let fine_adj = self.adjacency(level + 1);
        let mut data = vec![false; coarse_n * fine_n];
        for (i, members) in pool.iter().enumerate() {
            for &m in members {
                data[i * fine_n + m] = true;
                for &nb in &fine_adj[m] {
                    data[i * fine_n + nb] = true;
                }
            }
        }
        Ok(BinaryMask { rows: coarse_n, cols: fine_n, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_hierarchy_matches_published_dimensions() {
        let topo = SkeletonTopology::humanoid17();
        let h = build_hierarchy(&topo, 5, 64).unwrap();
        assert_eq!(h.entity_counts(), vec![1, 2, 7, 12, 20]);
        assert_eq!(h.frame_counts(), vec![4, 8, 16, 32, 64]);
    }

    #[test]
    fn compact_hierarchy_counts() {
        let topo = SkeletonTopology::humanoid7();
        let h = build_hierarchy(&topo, 4, 64).unwrap();
        assert_eq!(h.entity_counts(), vec![1, 2, 5, 10]);
        assert_eq!(h.frame_counts(), vec![8, 16, 32, 64]);
    }

    #[test]
    fn two_joint_chain_merges_into_one_rotation_entity() {
        let chain = SkeletonTopology::new(
            vec!["root".into(), "a".into(), "b".into()],
            vec![None, Some(0), Some(0)],
            vec![[0.0, 0.0, 0.0], [0.1, -0.5, 0.0], [-0.1, -0.5, 0.0]],
            [1, 2],
        )
        .unwrap();
        let h = build_hierarchy(&chain, 2, 8).unwrap();
        let coarse = &h.levels[0];
        let rot: Vec<_> = coarse.entities.iter().filter(|e| e.kind == EntityKind::Rotation).collect();
        assert_eq!(rot.len(), 2, "3 rotation edges pair into 2 entities");
        let fine = &h.levels[1];
        assert_eq!(fine.entity_count(), 6);
    }

    #[test]
    fn star_topology_rejected_beyond_its_merge_depth() {
        // Root with two spokes: rotation entities 3 → 2 → 1, then stuck.
        let topo = SkeletonTopology::new(
            vec!["root".into(), "a".into(), "b".into()],
            vec![None, Some(0), Some(0)],
            vec![[0.0, 0.0, 0.0], [0.2, -0.4, 0.0], [-0.2, -0.4, 0.0]],
            [1, 2],
        )
        .unwrap();
        // Hierarchies that stay within the merge budget succeed…
        assert!(build_hierarchy(&topo, 2, 16).is_ok());
        // …and one more pairwise pass than the topology supports fails.
        // With 5 levels, passes into levels 3 and 2 are pairwise: 3→2→1 is
        // fine, but with 6 levels the pass into level 3 hits a single entity.
        let err = build_hierarchy(&topo, 6, 64);
        assert!(err.is_err(), "expected configuration error, got {err:?}");
    }

    #[test]
    fn pooling_maps_total_and_disjoint_on_reference() {
        let topo = SkeletonTopology::humanoid17();
        let h = build_hierarchy(&topo, 5, 64).unwrap();
        for level in 0..4 {
            let pool = h.pooling_map(level).unwrap();
            let fine_n = h.entity_count(level + 1);
            let mut seen = vec![0usize; fine_n];
            for members in pool {
                for &m in members {
                    seen[m] += 1;
                }
            }
            assert!(seen.iter().all(|&c| c == 1), "level {level}: {seen:?}");
        }
        // Level 3→4 map covers all 20 fine entities.
        let covered: usize = h.pooling_map(3).unwrap().iter().map(|m| m.len()).sum();
        assert_eq!(covered, 20);
    }

    #[test]
    fn pooling_map_level_out_of_range_is_usage_error() {
        let topo = SkeletonTopology::humanoid7();
        let h = build_hierarchy(&topo, 4, 64).unwrap();
        assert!(h.pooling_map(3).is_err());
    }

    #[test]
    fn neighbor_mask_dist0_is_identity() {
        let topo = SkeletonTopology::humanoid17();
        let h = build_hierarchy(&topo, 5, 64).unwrap();
        let m = h.neighbor_mask(4, 0);
        for i in 0..m.rows {
            for j in 0..m.cols {
                assert_eq!(m.get(i, j), i == j);
            }
        }
    }

    #[test]
    fn neighbor_mask_large_dist_is_all_ones() {
        let topo = SkeletonTopology::humanoid17();
        let h = build_hierarchy(&topo, 5, 64).unwrap();
        let e = h.entity_count(4);
        let m = h.neighbor_mask(4, e);
        assert_eq!(m.count_ones(), e * e);
    }

    #[test]
    fn neighbor_mask_three_joint_chain_tridiagonal_plus_globals() {
        // root -> a -> b: rotation entities 0,1,2 in a chain; velocity (3)
        // and contacts (4,5) attach to the root entity.
        let topo = SkeletonTopology::new(
            vec!["root".into(), "a".into(), "b".into(), "c".into(), "d".into()],
            vec![None, Some(0), Some(1), Some(0), Some(0)],
            vec![[0.0; 3], [0.0, -0.3, 0.0], [0.0, -0.3, 0.0], [0.1, -0.5, 0.0], [-0.1, -0.5, 0.0]],
            [3, 4],
        )
        .unwrap();
        let h = build_hierarchy(&topo, 2, 8).unwrap();
        let m = h.neighbor_mask(1, 1);
        // Chain part: 0-1-2 tridiagonal.
        assert!(m.get(0, 1) && m.get(1, 0) && m.get(1, 2) && m.get(2, 1));
        assert!(!m.get(0, 2) && !m.get(2, 0));
        // Feet joints 3,4 neighbor the root; velocity (5) and contacts (6,7)
        // neighbor the root entity 0 and themselves only.
        for ent in 5..8 {
            assert!(m.get(ent, 0) && m.get(0, ent));
            assert!(m.get(ent, ent));
            assert!(!m.get(ent, 1));
        }
    }

    #[test]
    fn mask_symmetric_for_rotation_entities() {
        let topo = SkeletonTopology::humanoid17();
        let h = build_hierarchy(&topo, 5, 64).unwrap();
        for level in 0..5 {
            for dist in 0..3 {
                let m = h.neighbor_mask(level, dist);
                for i in 0..m.rows {
                    for j in 0..m.cols {
                        assert_eq!(m.get(i, j), m.get(j, i), "level {level} dist {dist} ({i},{j})");
                    }
                }
            }
        }
    }

    #[test]
    fn hierarchy_composition_partitions_finest_entities() {
        let topo = SkeletonTopology::humanoid17();
        let h = build_hierarchy(&topo, 5, 64).unwrap();
        // Compose pooling maps from level 0 down to the finest level.
        let mut groups: Vec<Vec<usize>> = (0..h.entity_count(0)).map(|i| vec![i]).collect();
        for level in 0..h.num_levels() - 1 {
            let pool = h.pooling_map(level).unwrap();
            groups = groups
                .iter()
                .map(|g| g.iter().flat_map(|&i| pool[i].iter().copied()).collect())
                .collect();
        }
        let mut all: Vec<usize> = groups.concat();
        all.sort_unstable();
        assert_eq!(all, (0..h.entity_count(4)).collect::<Vec<_>>());
        assert_eq!(groups.len(), h.entity_count(0));
    }

    #[test]
    fn pool_mask_follows_pool_plus_neighbor_rule() {
        let topo = SkeletonTopology::humanoid17();
        let h = build_hierarchy(&topo, 5, 64).unwrap();
        for level in 0..4 {
            let pm = h.pool_mask(level).unwrap();
            let pool = h.pooling_map(level).unwrap();
            let adj = h.adjacency(level + 1);
            for i in 0..pm.rows {
                for j in 0..pm.cols {
                    let expected = pool[i].contains(&j)
                        || pool[i].iter().any(|&m| adj[m].contains(&j));
                    assert_eq!(pm.get(i, j), expected, "level {level} ({i},{j})");
                }
            }
        }
    }

    /// Random topology generator for property tests: `n` joints, random
    /// parents forming a tree, two leaf feet.
    fn random_tree(n: usize, seed: u64) -> Option<SkeletonTopology> {
        use rand::prelude::*;
        use rand_chacha::ChaCha20Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut parents = vec![None];
        for i in 1..n {
            parents.push(Some(rng.gen_range(0..i)));
        }
        let leaves: Vec<usize> = (0..n)
            .filter(|&j| !parents.iter().any(|p| *p == Some(j)))
            .collect();
        if leaves.len() < 2 {
            return None;
        }
        let names = (0..n).map(|i| format!("j{i}")).collect();
        let offsets = (0..n)
            .map(|_| [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.0), rng.gen_range(-0.2..0.2)])
            .collect();
        SkeletonTopology::new(names, parents, offsets, [leaves[0], leaves[1]]).ok()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn pooling_disjointness_over_random_trees(n in 4usize..24, seed in 0u64..10_000) {
            if let Some(topo) = random_tree(n, seed) {
                // Deepest hierarchy the tree supports, capped at 5.
                for levels in (2..=5).rev() {
                    if let Ok(h) = build_hierarchy(&topo, levels, 1 << (levels + 1)) {
                        for l in 0..h.num_levels() - 1 {
                            let pool = h.pooling_map(l).unwrap();
                            let fine_n = h.entity_count(l + 1);
                            let mut seen = vec![0usize; fine_n];
                            for members in pool {
                                for &m in members {
                                    seen[m] += 1;
                                }
                            }
                            prop_assert!(seen.iter().all(|&c| c == 1));
                        }
                        break;
                    }
                }
            }
        }
    }
}
