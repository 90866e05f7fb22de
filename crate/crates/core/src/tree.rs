//! Binary vessel trees: node attributes, preorder serialization with null
//! markers, normalization, binarization of general trees and augmentation.

use std::collections::HashMap;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bspline::{chord_length_params, OpenSpline, PeriodicSpline};

/// Radius-spline control values per cross-section.
pub const RADII: usize = 16;
/// Attribute vector length: position plus radii.
pub const ATTR_DIM: usize = 3 + RADII;
/// Entries whose largest absolute component is below this are null markers.
pub const NULL_THRESHOLD: f64 = 1e-2;

pub type Attr = [f64; ATTR_DIM];
/// Preorder attribute sequence; absent children appear as all-zero entries.
pub type SerializedTree = Vec<Attr>;

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("sequence ended after {consumed} entries before the tree was complete")]
    Truncated { consumed: usize },
    #[error("tree complete after {consumed} entries but sequence has {len}")]
    TrailingEntries { consumed: usize, len: usize },
    #[error("sequence starts with a null marker; tree is empty")]
    EmptyTree,
    #[error("degenerate tree: cannot normalize with scale {0}")]
    DegenerateScale(f64),
    #[error("graph contains a loop through nodes {witness:?}")]
    Cycle { witness: Vec<usize> },
    #[error("invalid tree: {0}")]
    Invalid(String),
    #[error("tree has no normalization record")]
    NotNormalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VesselNode {
    pub position: [f64; 3],
    pub radii: [f64; RADII],
}

impl VesselNode {
    pub fn new(position: [f64; 3], radii: [f64; RADII]) -> Self {
        Self { position, radii }
    }

    /// Node with a circular cross-section.
    pub fn circular(position: [f64; 3], radius: f64) -> Self {
        Self {
            position,
            radii: [radius; RADII],
        }
    }

    pub fn attrs(&self) -> Attr {
        let mut a = [0.0; ATTR_DIM];
        a[..3].copy_from_slice(&self.position);
        a[3..].copy_from_slice(&self.radii);
        a
    }

    pub fn from_attrs(a: &Attr) -> Self {
        let mut position = [0.0; 3];
        let mut radii = [0.0; RADII];
        position.copy_from_slice(&a[..3]);
        radii.copy_from_slice(&a[3..]);
        Self { position, radii }
    }

    pub fn pos(&self) -> Vector3<f64> {
        Vector3::from(self.position)
    }

    pub fn cross_section(&self) -> PeriodicSpline {
        PeriodicSpline::new(self.radii.to_vec()).expect("16 controls")
    }

    pub fn mean_radius(&self) -> f64 {
        self.radii.iter().sum::<f64>() / RADII as f64
    }

    /// Cross-sectional area of the radius spline.
    pub fn area(&self) -> f64 {
        self.cross_section().area()
    }
}

pub fn is_null(a: &Attr, threshold: f64) -> bool {
    a.iter().all(|v| v.abs() < threshold)
}

/// Maps normalized coordinates back: `x = x̂·scale + center`, `r = r̂·scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: [f64; 3],
    pub scale: f64,
}

/// Binary tree stored as an arena in preorder. Node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct VesselTree {
    nodes: Vec<VesselNode>,
    left: Vec<Option<usize>>,
    right: Vec<Option<usize>>,
    normalization: Option<Normalization>,
}

impl VesselTree {
    pub fn leaf(node: VesselNode) -> Self {
        Self {
            nodes: vec![node],
            left: vec![None],
            right: vec![None],
            normalization: None,
        }
    }

    /// Builds a tree from arbitrary indexed child links, validating that
    /// every node is reached exactly once from `root`. The result is
    /// re-indexed into preorder.
    pub fn from_links(
        nodes: Vec<VesselNode>,
        left: Vec<Option<usize>>,
        right: Vec<Option<usize>>,
        root: usize,
    ) -> Result<Self, TreeError> {
        let n = nodes.len();
        if n == 0 {
            return Err(TreeError::EmptyTree);
        }
        if left.len() != n || right.len() != n || root >= n {
            return Err(TreeError::Invalid(
                "link arrays do not match node count".into(),
            ));
        }
        let children: Vec<Vec<usize>> = (0..n)
            .map(|i| left[i].iter().chain(right[i].iter()).copied().collect())
            .collect();
        for (i, c) in children.iter().enumerate() {
            if let Some(&bad) = c.iter().find(|&&c| c >= n) {
                return Err(TreeError::Invalid(format!(
                    "node {i} links to missing node {bad}"
                )));
            }
        }
        check_tree_graph(&children, root)?;

        let mut out = Self {
            nodes: Vec::with_capacity(n),
            left: Vec::with_capacity(n),
            right: Vec::with_capacity(n),
            normalization: None,
        };
        // (old index, new parent, is right child)
        let mut stack = vec![(root, None::<(usize, bool)>)];
        while let Some((old, parent)) = stack.pop() {
            let new = out.nodes.len();
            out.nodes.push(nodes[old]);
            out.left.push(None);
            out.right.push(None);
            if let Some((p, is_right)) = parent {
                if is_right {
                    out.right[p] = Some(new);
                } else {
                    out.left[p] = Some(new);
                }
            }
            if let Some(r) = right[old] {
                stack.push((r, Some((new, true))));
            }
            if let Some(l) = left[old] {
                stack.push((l, Some((new, false))));
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[VesselNode] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &VesselNode {
        &self.nodes[i]
    }

    pub fn left(&self, i: usize) -> Option<usize> {
        self.left[i]
    }

    pub fn right(&self, i: usize) -> Option<usize> {
        self.right[i]
    }

    pub fn children(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.left[i].into_iter().chain(self.right[i])
    }

    pub fn child_count(&self, i: usize) -> usize {
        self.left[i].is_some() as usize + self.right[i].is_some() as usize
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    pub fn set_normalization(&mut self, n: Option<Normalization>) {
        self.normalization = n;
    }

    pub fn parents(&self) -> Vec<Option<usize>> {
        let mut p = vec![None; self.len()];
        for i in 0..self.len() {
            for c in self.children(i) {
                p[c] = Some(i);
            }
        }
        p
    }

    /// Level of each node; the root is at depth 1.
    pub fn depths(&self) -> Vec<usize> {
        let mut d = vec![1; self.len()];
        // preorder: parents precede children
        for i in 0..self.len() {
            for c in self.children(i).collect::<Vec<_>>() {
                d[c] = d[i] + 1;
            }
        }
        d
    }

    /// Number of levels; a single node has height 1.
    pub fn height(&self) -> usize {
        self.depths().into_iter().max().unwrap_or(0)
    }

    /// Drops every node deeper than `cap` levels.
    pub fn trimmed(&self, cap: usize) -> Self {
        let cap = cap.max(1);
        let depths = self.depths();
        let keep = |i: usize| depths[i] <= cap;
        let left = (0..self.len())
            .map(|i| self.left[i].filter(|&c| keep(c)))
            .collect();
        let right = (0..self.len())
            .map(|i| self.right[i].filter(|&c| keep(c)))
            .collect();
        // Unreachable nodes are discarded by re-indexing from the root.
        let mut t = prune_unreachable(self.nodes.clone(), left, right);
        t.normalization = self.normalization;
        t
    }

    /// `(parent, child)` pairs.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.len())
            .flat_map(|i| self.children(i).map(move |c| (i, c)))
            .collect()
    }

    pub fn serialize(&self) -> SerializedTree {
        let mut out = Vec::with_capacity(2 * self.len() + 1);
        let mut stack = vec![Some(0usize)];
        while let Some(slot) = stack.pop() {
            match slot {
                None => out.push([0.0; ATTR_DIM]),
                Some(i) => {
                    out.push(self.nodes[i].attrs());
                    stack.push(self.right[i]);
                    stack.push(self.left[i]);
                }
            }
        }
        out
    }

    /// Rebuilds a tree from a preorder sequence, consuming exactly the
    /// whole sequence.
    pub fn deserialize(seq: &[Attr], null_threshold: f64) -> Result<Self, TreeError> {
        let (tree, consumed) = Self::deserialize_prefix(seq, null_threshold)?;
        if consumed != seq.len() {
            return Err(TreeError::TrailingEntries {
                consumed,
                len: seq.len(),
            });
        }
        Ok(tree)
    }

    /// Like [`deserialize`](Self::deserialize) but stops as soon as the tree
    /// is complete, returning the number of entries consumed.
    pub fn deserialize_prefix(
        seq: &[Attr],
        null_threshold: f64,
    ) -> Result<(Self, usize), TreeError> {
        let first = seq.first().ok_or(TreeError::Truncated { consumed: 0 })?;
        if is_null(first, null_threshold) {
            return Err(TreeError::EmptyTree);
        }
        let mut t = Self::leaf(VesselNode::from_attrs(first));
        let mut pos = 1;
        let mut stack = vec![(0usize, true), (0usize, false)];
        while let Some((parent, is_right)) = stack.pop() {
            let Some(entry) = seq.get(pos) else {
                return Err(TreeError::Truncated { consumed: pos });
            };
            pos += 1;
            if is_null(entry, null_threshold) {
                continue;
            }
            let idx = t.nodes.len();
            t.nodes.push(VesselNode::from_attrs(entry));
            t.left.push(None);
            t.right.push(None);
            if is_right {
                t.right[parent] = Some(idx);
            } else {
                t.left[parent] = Some(idx);
            }
            stack.push((idx, true));
            stack.push((idx, false));
        }
        Ok((t, pos))
    }

    /// Translates the root to the origin and scales positions and radii by
    /// one factor so the largest absolute attribute is exactly 1. The stored
    /// record composes with any earlier one and maps back to original units.
    pub fn normalize(&self) -> Result<(Self, Normalization), TreeError> {
        let center = self.nodes[0].position;
        let mut scale: f64 = 0.0;
        for n in &self.nodes {
            for (x, c) in n.position.iter().zip(&center) {
                scale = scale.max((x - c).abs());
            }
            for r in &n.radii {
                scale = scale.max(r.abs());
            }
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(TreeError::DegenerateScale(scale));
        }
        let mut out = self.clone();
        for n in &mut out.nodes {
            for (x, c) in n.position.iter_mut().zip(&center) {
                *x = (*x - c) / scale;
            }
            for r in &mut n.radii {
                *r /= scale;
            }
        }
        let step = Normalization { center, scale };
        out.normalization = Some(match self.normalization {
            None => step,
            Some(prev) => Normalization {
                center: [
                    center[0] * prev.scale + prev.center[0],
                    center[1] * prev.scale + prev.center[1],
                    center[2] * prev.scale + prev.center[2],
                ],
                scale: scale * prev.scale,
            },
        });
        Ok((out, step))
    }

    /// Applies the stored normalization record in reverse.
    pub fn denormalize(&self) -> Result<Self, TreeError> {
        let rec = self.normalization.ok_or(TreeError::NotNormalized)?;
        Ok(self.with_normalization_applied(&rec))
    }

    /// Maps normalized attributes through `rec` into world units.
    pub fn with_normalization_applied(&self, rec: &Normalization) -> Self {
        let mut out = self.clone();
        for n in &mut out.nodes {
            for k in 0..3 {
                n.position[k] = n.position[k] * rec.scale + rec.center[k];
            }
            for r in &mut n.radii {
                *r *= rec.scale;
            }
        }
        out.normalization = None;
        out
    }

    /// Node index chains between bifurcations and leaves. A branch starts at
    /// the root or at a bifurcating node and follows single-child links
    /// until a node with zero or two children. Every branch has at least two
    /// nodes unless the tree is a single node.
    pub fn branches(&self) -> Vec<Vec<usize>> {
        if self.len() == 1 {
            return vec![vec![0]];
        }
        let mut out = Vec::new();
        let mut starts: Vec<(usize, usize)> = Vec::new(); // (branch start, first child)
        if self.child_count(0) == 1 {
            starts.push((0, self.children(0).next().expect("one child")));
        } else {
            for c in self.children(0).collect::<Vec<_>>().into_iter().rev() {
                starts.push((0, c));
            }
        }
        while let Some((start, first)) = starts.pop() {
            let mut chain = vec![start, first];
            let mut cur = first;
            while self.child_count(cur) == 1 {
                cur = self.children(cur).next().expect("one child");
                chain.push(cur);
            }
            if self.child_count(cur) == 2 {
                for c in self.children(cur).collect::<Vec<_>>().into_iter().rev() {
                    starts.push((cur, c));
                }
            }
            out.push(chain);
        }
        out
    }

    /// Branch whose frame each node's cross-section is expressed in: the
    /// branch containing the edge from its parent (the first branch for the
    /// root).
    pub fn radius_owner(&self) -> Vec<usize> {
        let mut owner = vec![usize::MAX; self.len()];
        for (b, chain) in self.branches().iter().enumerate() {
            for (k, &i) in chain.iter().enumerate() {
                if (k > 0 || i == 0) && owner[i] == usize::MAX {
                    owner[i] = b;
                }
            }
        }
        owner
    }

    pub fn branch_points(&self, branch: &[usize]) -> Vec<Vector3<f64>> {
        branch.iter().map(|&i| self.nodes[i].pos()).collect()
    }

    /// Rigid rotation about the root. Cross-sections are re-phased so each
    /// surface stays attached to the same material directions after the
    /// reference frame of its branch changes.
    pub fn rotated(&self, rot: &Matrix3<f64>) -> Self {
        let origin = self.nodes[0].pos();
        let branches = self.branches();
        let owner = self.radius_owner();
        let phase: Vec<f64> = branches
            .iter()
            .map(|b| {
                let Some(d) = first_direction(&self.branch_points(b)) else {
                    return 0.0;
                };
                let rd = rot * d;
                let carried = rot * reference_normal(&d);
                let fresh = reference_normal(&rd);
                // angle from the new reference normal to the carried one
                let s = rd.dot(&fresh.cross(&carried));
                let c = fresh.dot(&carried);
                s.atan2(c)
            })
            .collect();
        let mut out = self.clone();
        for (i, n) in out.nodes.iter_mut().enumerate() {
            let p = rot * (n.pos() - origin) + origin;
            n.position = [p.x, p.y, p.z];
            let phi = phase.get(owner[i]).copied().unwrap_or(0.0);
            if phi.abs() > 1e-15 {
                let r = n.cross_section().rotated(-phi);
                n.radii.copy_from_slice(r.control_values());
            }
        }
        out
    }

    /// Centerline resampled per branch to `max(2, round(n·rate))` nodes by
    /// re-evaluating a fitted branch spline; radii are interpolated linearly
    /// in chord length. Returns `None` when some branch would keep fewer
    /// than two nodes.
    pub fn resampled(&self, rate: f64) -> Option<Self> {
        if self.len() == 1 {
            return Some(self.clone());
        }
        let branches = self.branches();
        // New node lists per branch, excluding the shared start node.
        let mut new_nodes: Vec<VesselNode> = vec![self.nodes[0]];
        let mut left = vec![None];
        let mut right = vec![None];
        // old branch-end index -> new index
        let mut mapped: HashMap<usize, usize> = HashMap::from([(0, 0)]);
        for b in &branches {
            let m = (b.len() as f64 * rate).round() as usize;
            if m < 2 {
                return None;
            }
            let samples = resample_branch(self, b, m);
            let mut prev = mapped[&b[0]];
            let is_right_start = self.right[b[0]] == Some(b[1]);
            for (k, node) in samples.into_iter().enumerate().skip(1) {
                let idx = new_nodes.len();
                new_nodes.push(node);
                left.push(None);
                right.push(None);
                if k == 1 && is_right_start {
                    right[prev] = Some(idx);
                } else {
                    left[prev] = Some(idx);
                }
                prev = idx;
            }
            mapped.insert(*b.last().expect("non-empty"), prev);
        }
        let mut t = Self::from_links(new_nodes, left, right, 0).expect("resampled tree is a tree");
        t.normalization = self.normalization;
        Some(t)
    }

    /// Checks attributes are finite and radii non-negative.
    pub fn validate(&self) -> Result<(), TreeError> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.attrs().iter().any(|v| !v.is_finite()) {
                return Err(TreeError::Invalid(format!(
                    "node {i} has non-finite attributes"
                )));
            }
            if n.radii.iter().any(|&r| r < 0.0) {
                return Err(TreeError::Invalid(format!(
                    "node {i} has a negative radius"
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> TreeJson {
        TreeJson {
            nodes: (0..self.len())
                .map(|i| NodeJson {
                    id: i as u64,
                    position: self.nodes[i].position,
                    radii: self.nodes[i].radii.to_vec(),
                    left: self.left[i].map(|c| c as u64),
                    right: self.right[i].map(|c| c as u64),
                    children: None,
                })
                .collect(),
            root: 0,
            normalization: self.normalization,
        }
    }

    pub fn from_json(j: &TreeJson) -> Result<Self, TreeError> {
        let mut index = HashMap::new();
        for (k, n) in j.nodes.iter().enumerate() {
            if index.insert(n.id, k).is_some() {
                return Err(TreeError::Invalid(format!("duplicate node id {}", n.id)));
            }
            if n.radii.len() != RADII {
                return Err(TreeError::Invalid(format!(
                    "node {} has {} radii, expected {RADII}",
                    n.id,
                    n.radii.len()
                )));
            }
        }
        let lookup = |id: u64| {
            index
                .get(&id)
                .copied()
                .ok_or_else(|| TreeError::Invalid(format!("reference to missing node id {id}")))
        };
        let root = lookup(j.root)?;
        let nodes: Vec<VesselNode> = j
            .nodes
            .iter()
            .map(|n| {
                let mut radii = [0.0; RADII];
                radii.copy_from_slice(&n.radii);
                VesselNode::new(n.position, radii)
            })
            .collect();
        let general = j.nodes.iter().any(|n| n.children.is_some());
        let mut tree = if general {
            let mut children = Vec::with_capacity(nodes.len());
            for n in &j.nodes {
                let mut c = Vec::new();
                for id in n
                    .children
                    .iter()
                    .flatten()
                    .chain(n.left.iter())
                    .chain(n.right.iter())
                {
                    c.push(lookup(*id)?);
                }
                children.push(c);
            }
            binarize(&GeneralTree {
                nodes,
                children,
                root,
            })?
        } else {
            let opt = |v: Option<u64>| v.map(lookup).transpose();
            let left = j
                .nodes
                .iter()
                .map(|n| opt(n.left))
                .collect::<Result<Vec<_>, _>>()?;
            let right = j
                .nodes
                .iter()
                .map(|n| opt(n.right))
                .collect::<Result<Vec<_>, _>>()?;
            Self::from_links(nodes, left, right, root)?
        };
        tree.normalization = j.normalization;
        tree.validate()?;
        Ok(tree)
    }
}

/// Direction of the first non-degenerate polyline segment.
pub fn first_direction(points: &[Vector3<f64>]) -> Option<Vector3<f64>> {
    points.windows(2).find_map(|w| {
        let d = w[1] - w[0];
        let n = d.norm();
        (n > 1e-12).then(|| d / n)
    })
}

/// Reference normal for a branch frame: the x axis projected off `tangent`,
/// or the y axis when the tangent is nearly parallel to x.
pub fn reference_normal(tangent: &Vector3<f64>) -> Vector3<f64> {
    let t = tangent.normalize();
    for axis in [Vector3::x(), Vector3::y()] {
        let n = axis - t * t.dot(&axis);
        if n.norm() > 0.1 {
            return n.normalize();
        }
    }
    unreachable!("x and y cannot both be parallel to a unit vector")
}

fn resample_branch(tree: &VesselTree, branch: &[usize], m: usize) -> Vec<VesselNode> {
    let pts = tree.branch_points(branch);
    let params = chord_length_params(&pts);
    let distinct = 1 + pts
        .windows(2)
        .filter(|w| (w[1] - w[0]).norm() > 1e-12)
        .count();
    let q = distinct.clamp(2, 8);
    let spline = OpenSpline::fit(&pts, q).ok().map(|f| f.spline);
    (0..m)
        .map(|k| {
            let t = k as f64 / (m - 1) as f64;
            let position = if k == 0 {
                pts[0]
            } else if k == m - 1 {
                *pts.last().expect("non-empty")
            } else if let Some(s) = &spline {
                s.point(t)
            } else {
                lerp_polyline(&pts, &params, t)
            };
            let radii = lerp_radii(tree, branch, &params, t);
            VesselNode::new([position.x, position.y, position.z], radii)
        })
        .collect()
}

fn bracket(params: &[f64], t: f64) -> (usize, f64) {
    let j = params
        .partition_point(|&p| p <= t)
        .clamp(1, params.len() - 1);
    let (a, b) = (params[j - 1], params[j]);
    let w = if b > a {
        ((t - a) / (b - a)).clamp(0.0, 1.0)
    } else {
        1.0
    };
    (j, w)
}

fn lerp_polyline(pts: &[Vector3<f64>], params: &[f64], t: f64) -> Vector3<f64> {
    let (j, w) = bracket(params, t);
    pts[j - 1] * (1.0 - w) + pts[j] * w
}

fn lerp_radii(tree: &VesselTree, branch: &[usize], params: &[f64], t: f64) -> [f64; RADII] {
    let (j, w) = bracket(params, t);
    let (a, b) = (
        &tree.nodes[branch[j - 1]].radii,
        &tree.nodes[branch[j]].radii,
    );
    std::array::from_fn(|k| a[k] * (1.0 - w) + b[k] * w)
}

fn prune_unreachable(
    nodes: Vec<VesselNode>,
    left: Vec<Option<usize>>,
    right: Vec<Option<usize>>,
) -> VesselTree {
    // from_links validates reachability, so rebuild only what the root sees.
    let n = nodes.len();
    let mut reach = vec![false; n];
    let mut stack = vec![0usize];
    while let Some(i) = stack.pop() {
        reach[i] = true;
        stack.extend(left[i].iter().chain(right[i].iter()));
    }
    let map: Vec<Option<usize>> = {
        let mut next = 0;
        reach
            .iter()
            .map(|&r| {
                r.then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    };
    let keep: Vec<usize> = (0..n).filter(|&i| reach[i]).collect();
    let remap = |v: Option<usize>| v.and_then(|c| map[c]);
    VesselTree::from_links(
        keep.iter().map(|&i| nodes[i]).collect(),
        keep.iter().map(|&i| remap(left[i])).collect(),
        keep.iter().map(|&i| remap(right[i])).collect(),
        0,
    )
    .expect("subtree of a tree")
}

/// Confirms `children` describes a tree rooted at `root`: no directed cycle,
/// no node with two parents, and every node reachable.
fn check_tree_graph(children: &[Vec<usize>], root: usize) -> Result<(), TreeError> {
    let n = children.len();
    let mut parent: Vec<Option<usize>> = vec![None; n];
    let mut state = vec![0u8; n]; // 0 unseen, 1 on stack, 2 done
    let mut path: Vec<usize> = Vec::new();
    // iterative DFS with explicit child cursor
    let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
    state[root] = 1;
    path.push(root);
    while let Some(&mut (v, ref mut cursor)) = stack.last_mut() {
        if *cursor < children[v].len() {
            let c = children[v][*cursor];
            *cursor += 1;
            match state[c] {
                0 => {
                    parent[c] = Some(v);
                    state[c] = 1;
                    path.push(c);
                    stack.push((c, 0));
                }
                1 => {
                    let from = path.iter().position(|&p| p == c).expect("on path");
                    let mut witness = path[from..].to_vec();
                    witness.push(c);
                    return Err(TreeError::Cycle { witness });
                }
                _ => {
                    // second parent: undirected loop through both parents
                    let p0 = parent[c].unwrap_or(c);
                    return Err(TreeError::Cycle {
                        witness: vec![p0, c, v],
                    });
                }
            }
        } else {
            state[v] = 2;
            path.pop();
            stack.pop();
        }
    }
    if let Some(i) = state.iter().position(|&s| s == 0) {
        return Err(TreeError::Invalid(format!(
            "node {i} is not reachable from the root"
        )));
    }
    Ok(())
}

/// Rooted tree with any number of ordered children per node.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralTree {
    pub nodes: Vec<VesselNode>,
    pub children: Vec<Vec<usize>>,
    pub root: usize,
}

/// Converts a general tree to binary form. Children are ordered by
/// decreasing cross-sectional area (stable). A node with more than two
/// children keeps its first child on the left and gains a duplicate of
/// itself on the right that carries the remaining children, repeating as
/// needed. Graphs with loops are rejected.
pub fn binarize(g: &GeneralTree) -> Result<VesselTree, TreeError> {
    let n = g.nodes.len();
    if n == 0 {
        return Err(TreeError::EmptyTree);
    }
    if g.children.len() != n || g.root >= n {
        return Err(TreeError::Invalid(
            "children list does not match node count".into(),
        ));
    }
    if let Some((i, &c)) = g
        .children
        .iter()
        .enumerate()
        .find_map(|(i, c)| c.iter().find(|&&x| x >= n).map(|x| (i, x)))
    {
        return Err(TreeError::Invalid(format!(
            "node {i} links to missing node {c}"
        )));
    }
    check_tree_graph(&g.children, g.root)?;

    let areas: Vec<f64> = g.nodes.iter().map(VesselNode::area).collect();
    let mut nodes = g.nodes.clone();
    let mut left = vec![None; n];
    let mut right = vec![None; n];
    for v in 0..n {
        let mut kids = g.children[v].clone();
        kids.sort_by(|&a, &b| areas[b].total_cmp(&areas[a]));
        let mut holder = v;
        let mut rest = kids.as_slice();
        loop {
            match rest {
                [] => break,
                [a] => {
                    left[holder] = Some(*a);
                    break;
                }
                [a, b] => {
                    left[holder] = Some(*a);
                    right[holder] = Some(*b);
                    break;
                }
                [a, tail @ ..] => {
                    left[holder] = Some(*a);
                    let dup = nodes.len();
                    nodes.push(g.nodes[v]);
                    left.push(None);
                    right.push(None);
                    right[holder] = Some(dup);
                    holder = dup;
                    rest = tail;
                }
            }
        }
    }
    VesselTree::from_links(nodes, left, right, g.root)
}

/// Uniformly distributed random rotation.
pub fn random_rotation(rng: &mut impl rand::Rng) -> Matrix3<f64> {
    let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
    q.to_rotation_matrix().into_inner()
}

/// Augmentation variants of one tree: the resampled centerlines at each
/// rate, followed by `rotations` uniformly random rotations. Variants whose
/// resampling would leave a branch with fewer than two nodes are skipped.
pub fn augment(tree: &VesselTree, rates: &[f64], rotations: usize, seed: u64) -> Vec<VesselTree> {
    let mut rng = crate::rng::substream(seed, "augment");
    let mut out = Vec::new();
    for &rate in rates {
        match tree.resampled(rate) {
            Some(t) => out.push(t),
            None => {
                log::warn!("resampling at rate {rate} leaves a branch below two nodes; skipped")
            }
        }
    }
    for _ in 0..rotations {
        let r = random_rotation(&mut rng);
        out.push(tree.rotated(&r));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeJson {
    pub id: u64,
    pub position: [f64; 3],
    pub radii: Vec<f64>,
    #[serde(default)]
    pub left: Option<u64>,
    #[serde(default)]
    pub right: Option<u64>,
    /// General (n-ary) child list; when present on any node the tree is
    /// binarized on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub children: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeJson {
    pub nodes: Vec<NodeJson>,
    pub root: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    pub(crate) fn node(x: f64, y: f64, z: f64, r: f64) -> VesselNode {
        VesselNode::circular([x, y, z], r)
    }

    /// Random tree with `n` nodes and attributes bounded away from the null
    /// threshold.
    pub(crate) fn random_tree(rng: &mut impl rand::Rng, n: usize) -> VesselTree {
        let mut nodes = Vec::with_capacity(n);
        let mut left = vec![None; n];
        let mut right = vec![None; n];
        for i in 0..n {
            let mut radii = [0.0; RADII];
            for r in &mut radii {
                *r = rng.random_range(0.05..1.0);
            }
            let pos = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            nodes.push(VesselNode::new(pos, radii));
            if i > 0 {
                loop {
                    let p = rng.random_range(0..i);
                    let slot = if rng.random_bool(0.5) {
                        &mut left[p]
                    } else {
                        &mut right[p]
                    };
                    if slot.is_none() {
                        *slot = Some(i);
                        break;
                    }
                }
            }
        }
        VesselTree::from_links(nodes, left, right, 0).unwrap()
    }

    /// Independent recursive preorder walk.
    fn recursive_walk(t: &VesselTree, i: Option<usize>, out: &mut Vec<Option<usize>>) {
        out.push(i);
        if let Some(i) = i {
            recursive_walk(t, t.left(i), out);
            recursive_walk(t, t.right(i), out);
        }
    }

    #[test]
    fn single_node_serializes_with_two_markers() {
        let a = node(0.1, 0.2, 0.3, 0.5);
        let s = VesselTree::leaf(a).serialize();
        assert_eq!(s, vec![a.attrs(), [0.0; ATTR_DIM], [0.0; ATTR_DIM]]);
        let back = VesselTree::deserialize(&s, NULL_THRESHOLD).unwrap();
        assert_eq!(back, VesselTree::leaf(a));
    }

    #[test]
    fn left_child_only_expansion() {
        let (a, b) = (node(0.0, 0.0, 0.0, 0.5), node(0.0, 0.0, 1.0, 0.4));
        let t =
            VesselTree::from_links(vec![a, b], vec![Some(1), None], vec![None, None], 0).unwrap();
        let z = [0.0; ATTR_DIM];
        assert_eq!(t.serialize(), vec![a.attrs(), b.attrs(), z, z, z]);
    }

    #[test]
    fn near_zero_entry_is_null() {
        let mut e = [0.0; ATTR_DIM];
        e[5] = 0.009;
        assert!(is_null(&e, NULL_THRESHOLD));
        e[5] = 0.011;
        assert!(!is_null(&e, NULL_THRESHOLD));
    }

    #[test]
    fn random_roundtrips() {
        let mut rng = crate::rng::seeded(7);
        for _ in 0..100 {
            let n = rng.random_range(1..=64);
            let t = random_tree(&mut rng, n);
            let s = t.serialize();
            assert_eq!(s.len(), 2 * n + 1);
            assert_eq!(
                s.iter().filter(|e| is_null(e, NULL_THRESHOLD)).count(),
                n + 1
            );
            assert_eq!(VesselTree::deserialize(&s, NULL_THRESHOLD).unwrap(), t);
        }
    }

    #[test]
    fn noisy_markers_keep_structure() {
        let mut rng = crate::rng::seeded(8);
        for _ in 0..50 {
            let n = rng.random_range(1..=40);
            let t = random_tree(&mut rng, n);
            let mut s = t.serialize();
            for e in s.iter_mut().filter(|e| e.iter().all(|&v| v == 0.0)) {
                for v in e.iter_mut() {
                    *v = rng.random_range(-1e-3..1e-3);
                }
            }
            let back = VesselTree::deserialize(&s, NULL_THRESHOLD).unwrap();
            assert_eq!(back.left, t.left);
            assert_eq!(back.right, t.right);
        }
    }

    #[test]
    fn preorder_index_matches_recursive_walker() {
        let mut rng = crate::rng::seeded(9);
        let t = random_tree(&mut rng, 30);
        let mut walk = Vec::new();
        recursive_walk(&t, Some(0), &mut walk);
        let real: Vec<usize> = walk.iter().flatten().copied().collect();
        assert_eq!(real, (0..30).collect::<Vec<_>>());
        let s = t.serialize();
        for (k, slot) in walk.iter().enumerate() {
            match slot {
                Some(i) => assert_eq!(s[k], t.node(*i).attrs()),
                None => assert!(is_null(&s[k], NULL_THRESHOLD)),
            }
        }
    }

    #[test]
    fn truncation_reports_consumed() {
        let t = random_tree(&mut crate::rng::seeded(1), 5);
        let s = t.serialize();
        assert_eq!(
            VesselTree::deserialize(&s[..6], NULL_THRESHOLD).unwrap_err(),
            TreeError::Truncated { consumed: 6 }
        );
        let mut longer = s.clone();
        longer.push([0.0; ATTR_DIM]);
        assert!(matches!(
            VesselTree::deserialize(&longer, NULL_THRESHOLD),
            Err(TreeError::TrailingEntries {
                consumed: 11,
                len: 12
            })
        ));
        assert_eq!(
            VesselTree::deserialize_prefix(&longer, NULL_THRESHOLD)
                .unwrap()
                .1,
            11
        );
    }

    #[test]
    fn normalize_bounds_and_inverse() {
        let nodes = vec![
            node(3.0, 4.0, 5.0, 1.0),
            node(-10.0 + 3.0, 10.0 + 4.0, 0.0 + 5.0, 0.5),
            node(10.0 + 3.0, -10.0 + 4.0, 10.0 + 5.0, 0.3),
        ];
        let t = VesselTree::from_links(
            nodes,
            vec![Some(1), None, None],
            vec![Some(2), None, None],
            0,
        )
        .unwrap();
        let (n, rec) = t.normalize().unwrap();
        assert_eq!(rec.scale, 10.0);
        assert_eq!(n.node(0).position, [0.0; 3]);
        let max = n
            .nodes()
            .iter()
            .flat_map(|v| v.attrs())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert_eq!(max, 1.0);
        let back = n.denormalize().unwrap();
        for (a, b) in back.nodes().iter().zip(t.nodes()) {
            for (x, y) in a.attrs().iter().zip(b.attrs()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalizing_twice_composes_records() {
        let t = random_tree(&mut crate::rng::seeded(3), 12);
        let (a, _) = t.normalize().unwrap();
        let moved = a.rotated(&random_rotation(&mut crate::rng::seeded(4)));
        let (b, _) = moved.normalize().unwrap();
        let world = b.denormalize().unwrap();
        let world_ref = moved.denormalize().unwrap();
        for (x, y) in world.nodes().iter().zip(world_ref.nodes()) {
            for (p, q) in x.attrs().iter().zip(y.attrs()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_tree_rejected() {
        let t = VesselTree::leaf(node(1.0, 1.0, 1.0, 0.0));
        assert!(matches!(t.normalize(), Err(TreeError::DegenerateScale(_))));
    }

    #[test]
    fn three_children_gain_one_chain_node() {
        let g = GeneralTree {
            nodes: vec![
                node(0.0, 0.0, 0.0, 1.0),
                node(1.0, 0.0, 0.0, 0.3),
                node(0.0, 1.0, 0.0, 0.5),
                node(0.0, 0.0, 1.0, 0.4),
            ],
            children: vec![vec![1, 2, 3], vec![], vec![], vec![]],
            root: 0,
        };
        let t = binarize(&g).unwrap();
        assert_eq!(t.len(), 5);
        // root: left = largest child, right = duplicate of root
        let l = t.left(0).unwrap();
        let r = t.right(0).unwrap();
        assert_eq!(t.node(l).radii[0], 0.5);
        assert_eq!(t.node(r), t.node(0));
        assert_eq!(t.node(t.left(r).unwrap()).radii[0], 0.4);
        assert_eq!(t.node(t.right(r).unwrap()).radii[0], 0.3);
    }

    #[test]
    fn binary_tree_unchanged_by_binarize() {
        let t = VesselTree::from_links(
            vec![
                node(0.0, 0.0, 0.0, 1.0),
                node(1.0, 0.0, 0.0, 0.6),
                node(0.0, 1.0, 0.0, 0.4),
            ],
            vec![Some(1), None, None],
            vec![Some(2), None, None],
            0,
        )
        .unwrap();
        let g = GeneralTree {
            nodes: t.nodes().to_vec(),
            children: (0..t.len()).map(|i| t.children(i).collect()).collect(),
            root: 0,
        };
        assert_eq!(binarize(&g).unwrap(), t);
    }

    #[test]
    fn cycles_rejected_with_witness() {
        let g = GeneralTree {
            nodes: vec![node(0.0, 0.0, 0.0, 1.0), node(1.0, 0.0, 0.0, 1.0)],
            children: vec![vec![1], vec![0]],
            root: 0,
        };
        assert_eq!(
            binarize(&g).unwrap_err(),
            TreeError::Cycle {
                witness: vec![0, 1, 0]
            }
        );
        let diamond = GeneralTree {
            nodes: vec![node(0.0, 0.0, 0.0, 1.0); 4],
            children: vec![vec![1, 2], vec![3], vec![3], vec![]],
            root: 0,
        };
        assert!(matches!(binarize(&diamond), Err(TreeError::Cycle { .. })));
    }

    #[test]
    fn height_and_trim() {
        // chain of 25 levels
        let n = 25;
        let nodes: Vec<_> = (0..n).map(|i| node(0.0, 0.0, i as f64, 0.5)).collect();
        let left: Vec<_> = (0..n).map(|i| (i + 1 < n).then_some(i + 1)).collect();
        let t = VesselTree::from_links(nodes, left, vec![None; n], 0).unwrap();
        assert_eq!(t.height(), 25);
        let c = t.trimmed(20);
        assert_eq!(c.height(), 20);
        assert_eq!(c.len(), 20);
        assert_eq!(VesselTree::leaf(node(0.0, 0.0, 0.0, 1.0)).height(), 1);
    }

    fn y_tree() -> VesselTree {
        // trunk of 4 nodes, bifurcating into two 3-node arms
        let mut nodes = Vec::new();
        for i in 0..4 {
            nodes.push(node(0.0, 0.0, i as f64, 0.5));
        }
        for i in 1..=3 {
            nodes.push(node(i as f64 * 0.7, 0.0, 3.0 + i as f64 * 0.7, 0.4));
        }
        for i in 1..=3 {
            nodes.push(node(
                -(i as f64) * 0.7,
                0.1 * i as f64,
                3.0 + i as f64 * 0.7,
                0.3,
            ));
        }
        let mut left = vec![None; 10];
        let mut right = vec![None; 10];
        left[0] = Some(1);
        left[1] = Some(2);
        left[2] = Some(3);
        left[3] = Some(4);
        right[3] = Some(7);
        left[4] = Some(5);
        left[5] = Some(6);
        left[7] = Some(8);
        left[8] = Some(9);
        VesselTree::from_links(nodes, left, right, 0).unwrap()
    }

    #[test]
    fn branches_split_at_bifurcations() {
        let t = y_tree();
        let b = t.branches();
        assert_eq!(
            b,
            vec![vec![0, 1, 2, 3], vec![3, 4, 5, 6], vec![3, 7, 8, 9]]
        );
        assert_eq!(t.radius_owner(), vec![0, 0, 0, 0, 1, 1, 1, 2, 2, 2]);
    }

    #[test]
    fn rotation_is_an_isometry() {
        let t = y_tree();
        let r = random_rotation(&mut crate::rng::seeded(11));
        let u = t.rotated(&r);
        for i in 0..t.len() {
            for j in 0..t.len() {
                let d0 = (t.node(i).pos() - t.node(j).pos()).norm();
                let d1 = (u.node(i).pos() - u.node(j).pos()).norm();
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
        // circular sections are unaffected by re-phasing
        for (a, b) in t.nodes().iter().zip(u.nodes()) {
            for (x, y) in a.radii.iter().zip(&b.radii) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rotation_rephases_by_frame_twist() {
        let mut t = y_tree();
        for (i, n) in t.nodes.iter_mut().enumerate() {
            for (k, r) in n.radii.iter_mut().enumerate() {
                *r = 0.3 + 0.1 * ((k as f64) * std::f64::consts::TAU / 16.0 + i as f64).cos();
            }
        }
        // rotation about the trunk axis leaves the trunk's reference normal
        // rotated by the same angle, so cross-sections in the trunk need a
        // compensating phase of exactly that angle
        let ang = 0.7f64;
        let r = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), ang).into_inner();
        let u = t.rotated(&r);
        let before = t.node(1).cross_section();
        let after = u.node(1).cross_section();
        for k in 0..32 {
            let th = k as f64 * 0.2;
            assert!((after.eval(th) - before.eval(th - ang)).abs() < 5e-3);
        }
    }

    #[test]
    fn resample_half_counts() {
        let t = y_tree();
        let h = t.resampled(0.5).unwrap();
        let (b0, b1) = (t.branches(), h.branches());
        assert_eq!(b0.len(), b1.len());
        for (a, b) in b0.iter().zip(&b1) {
            let expect = a.len() as f64 * 0.5;
            assert!(
                (b.len() as f64 - expect).abs() <= 1.0,
                "{} vs {}",
                b.len(),
                a.len()
            );
        }
        // endpoints of every branch are kept
        assert_eq!(h.node(0).position, t.node(0).position);
        let same = t.resampled(1.0).unwrap();
        assert_eq!(same.len(), t.len());
        assert!(t.resampled(0.2).is_none());
    }

    #[test]
    fn augment_is_deterministic() {
        let t = y_tree();
        let a = augment(&t, &[0.5, 0.75, 1.0], 2, 99);
        let b = augment(&t, &[0.5, 0.75, 1.0], 2, 99);
        assert_eq!(a.len(), 5);
        assert_eq!(a, b);
    }

    #[test]
    fn json_roundtrip_and_general_children() {
        let t = y_tree();
        let j = t.to_json();
        let text = serde_json::to_string(&j).unwrap();
        let back = VesselTree::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, t);

        let text = r#"{"root":7,"nodes":[
            {"id":7,"position":[0,0,0],"radii":[1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1],"children":[1,2,3]},
            {"id":1,"position":[1,0,0],"radii":[0.2,0.2,0.2,0.2,0.2,0.2,0.2,0.2,0.2,0.2,0.2,0.2,0.2,0.2,0.2,0.2],"children":[]},
            {"id":2,"position":[0,1,0],"radii":[0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5]},
            {"id":3,"position":[0,0,1],"radii":[0.3,0.3,0.3,0.3,0.3,0.3,0.3,0.3,0.3,0.3,0.3,0.3,0.3,0.3,0.3,0.3]}]}"#;
        let g: TreeJson = serde_json::from_str(text).unwrap();
        assert_eq!(VesselTree::from_json(&g).unwrap().len(), 5);
    }

    #[test]
    fn json_rejects_bad_references() {
        let mut j = y_tree().to_json();
        j.nodes[2].left = Some(99);
        assert!(matches!(
            VesselTree::from_json(&j),
            Err(TreeError::Invalid(_))
        ));
        let mut j = y_tree().to_json();
        j.nodes[5].left = Some(1);
        assert!(matches!(
            VesselTree::from_json(&j),
            Err(TreeError::Cycle { .. })
        ));
    }

    proptest! {
        #[test]
        fn roundtrip_property(seed in any::<u64>(), n in 1usize..48) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = random_tree(&mut rng, n);
            let s = t.serialize();
            prop_assert_eq!(s.iter().filter(|e| is_null(e, NULL_THRESHOLD)).count(), n + 1);
            prop_assert_eq!(VesselTree::deserialize(&s, NULL_THRESHOLD).unwrap(), t);
        }

        #[test]
        fn normalization_max_is_one(seed in any::<u64>(), n in 2usize..20, scale in 0.01f64..100.0) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut t = random_tree(&mut rng, n);
            for v in &mut t.nodes {
                for p in &mut v.position { *p *= scale; }
                for r in &mut v.radii { *r *= scale; }
            }
            let (u, _) = t.normalize().unwrap();
            let m = u.nodes().iter().flat_map(|v| v.attrs()).fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert_eq!(m, 1.0);
        }
    }
}
