//! Surface reconstruction: per-branch centerline splines with
//! rotation-minimizing frames, a swept signed-distance field unioned over
//! branches, marching cubes and OBJ export.

mod tables;

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::bspline::{chord_length_params, OpenSpline, PeriodicSpline, SplineError};
use crate::tree::{reference_normal, VesselNode, VesselTree};

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("branch has {0} distinct nodes, at least 2 are needed")]
    TooFewNodes(usize),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error("grid resolution {0} is too small")]
    Resolution(usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
}

/// Orthonormal frame at a curve parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub t: f64,
    pub point: Vector3<f64>,
    pub tangent: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub binormal: Vector3<f64>,
}

/// A branch ready for sweeping: centerline spline, dense frames and the
/// cross-sections at each node's parameter.
#[derive(Debug, Clone)]
pub struct BranchSweep {
    pub centerline: OpenSpline,
    pub params: Vec<f64>,
    pub sections: Vec<PeriodicSpline>,
    pub frames: Vec<Frame>,
    max_radius: f64,
    half_gap: f64,
    lo: Vector3<f64>,
    hi: Vector3<f64>,
}

const MAX_CONTROLS: usize = 8;

/// Double-reflection frames at `ts`, starting from `n0`.
pub fn rotation_minimizing_frames(curve: &OpenSpline, ts: &[f64], n0: Vector3<f64>) -> Vec<Frame> {
    let mut frames: Vec<Frame> = Vec::with_capacity(ts.len());
    for &t in ts {
        let point = curve.point(t);
        let tangent = curve.derivative(t).normalize();
        let normal = match frames.last() {
            None => (n0 - tangent * tangent.dot(&n0)).normalize(),
            Some(prev) => {
                let v1 = point - prev.point;
                let c1 = v1.dot(&v1);
                let (r_l, t_l) = if c1 > 1e-30 {
                    (
                        prev.normal - v1 * (2.0 / c1 * v1.dot(&prev.normal)),
                        prev.tangent - v1 * (2.0 / c1 * v1.dot(&prev.tangent)),
                    )
                } else {
                    (prev.normal, prev.tangent)
                };
                let v2 = tangent - t_l;
                let c2 = v2.dot(&v2);
                let r = if c2 > 1e-30 {
                    r_l - v2 * (2.0 / c2 * v2.dot(&r_l))
                } else {
                    r_l
                };
                (r - tangent * tangent.dot(&r)).normalize()
            }
        };
        frames.push(Frame {
            t,
            point,
            tangent,
            normal,
            binormal: tangent.cross(&normal),
        });
    }
    frames
}

impl BranchSweep {
    /// Fits the centerline of an ordered node chain. Consecutive coincident
    /// nodes are merged with a warning.
    pub fn new(nodes: &[VesselNode]) -> Result<Self, MeshError> {
        let mut kept: Vec<&VesselNode> = Vec::with_capacity(nodes.len());
        for n in nodes {
            if let Some(last) = kept.last() {
                if (n.pos() - last.pos()).norm() <= 1e-12 {
                    log::warn!("merging coincident centerline nodes at {:?}", n.position);
                    continue;
                }
            }
            kept.push(n);
        }
        if kept.len() < 2 {
            return Err(MeshError::TooFewNodes(kept.len()));
        }
        let pts: Vec<Vector3<f64>> = kept.iter().map(|n| n.pos()).collect();
        let centerline = OpenSpline::fit(&pts, pts.len().min(MAX_CONTROLS))?.spline;
        let params = chord_length_params(&pts);
        let sections: Vec<PeriodicSpline> = kept.iter().map(|n| n.cross_section()).collect();
        let samples = (8 * (pts.len() - 1) + 1).max(65);
        let ts: Vec<f64> = (0..samples)
            .map(|k| k as f64 / (samples - 1) as f64)
            .collect();
        let n0 = reference_normal(&centerline.derivative(0.0));
        let frames = rotation_minimizing_frames(&centerline, &ts, n0);
        let max_radius = sections
            .iter()
            .flat_map(|s| s.control_values().iter().copied())
            .fold(0.0, f64::max);
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for f in &frames {
            lo = lo.inf(&f.point);
            hi = hi.sup(&f.point);
        }
        let pad = Vector3::repeat(max_radius);
        let half_gap = frames
            .windows(2)
            .map(|w| 0.5 * (w[1].point - w[0].point).norm())
            .fold(0.0, f64::max);
        Ok(Self {
            centerline,
            params,
            sections,
            frames,
            max_radius,
            half_gap,
            lo: lo - pad,
            hi: hi + pad,
        })
    }

    /// Upper bound of the cross-section radii.
    pub fn max_radius(&self) -> f64 {
        self.max_radius
    }

    /// Axis-aligned box enclosing the swept surface.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        (self.lo, self.hi)
    }

    /// Frame at any parameter, interpolated between the stored frames and
    /// re-orthogonalized against the exact tangent.
    pub fn frame_at(&self, t: f64) -> Frame {
        let t = t.clamp(0.0, 1.0);
        let m = self.frames.len() - 1;
        let k = ((t * m as f64).floor() as usize).min(m - 1);
        let w = t * m as f64 - k as f64;
        let n_l = self.frames[k].normal * (1.0 - w) + self.frames[k + 1].normal * w;
        let tangent = self.centerline.derivative(t).normalize();
        let normal = (n_l - tangent * tangent.dot(&n_l)).normalize();
        Frame {
            t,
            point: self.centerline.point(t),
            tangent,
            normal,
            binormal: tangent.cross(&normal),
        }
    }

    /// Cross-section radius at parameter `t` and angle `theta`, linear in
    /// `t` between the bracketing nodes.
    pub fn radius(&self, t: f64, theta: f64) -> f64 {
        let i = match self.params.iter().position(|&p| p > t) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => self.params.len() - 2,
        }
        .min(self.params.len() - 2);
        let (a, b) = (self.params[i], self.params[i + 1]);
        let w = ((t - a) / (b - a)).clamp(0.0, 1.0);
        (1.0 - w) * self.sections[i].eval(theta) + w * self.sections[i + 1].eval(theta)
    }

    /// Parameter of the centerline point nearest to `p`: best dense sample,
    /// then golden-section search on its neighbouring interval.
    pub fn nearest_param(&self, p: &Vector3<f64>) -> f64 {
        self.refine(p, self.nearest_sample(p).0)
    }

    fn nearest_sample(&self, p: &Vector3<f64>) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (k, f) in self.frames.iter().enumerate() {
            let d = (f.point - p).norm_squared();
            if d < best.1 {
                best = (k, d);
            }
        }
        (best.0, best.1.sqrt())
    }

    /// Lower bound on the field at `p`, from the nearest dense sample.
    fn coarse_bound(&self, sample_distance: f64) -> f64 {
        sample_distance - self.half_gap - self.max_radius
    }

    fn refine(&self, p: &Vector3<f64>, k: usize) -> f64 {
        let m = self.frames.len() - 1;
        let (mut a, mut b) = (
            self.frames[k.saturating_sub(1)].t,
            self.frames[(k + 1).min(m)].t,
        );
        let f = |t: f64| (self.centerline.point(t) - p).norm_squared();
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let mut x1 = b - g * (b - a);
        let mut x2 = a + g * (b - a);
        let (mut f1, mut f2) = (f(x1), f(x2));
        while b - a > 1e-12 {
            if f1 <= f2 {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - g * (b - a);
                f1 = f(x1);
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + g * (b - a);
                f2 = f(x2);
            }
        }
        0.5 * (a + b)
    }

    /// Signed distance estimate: `ρ − r(t*, θ)` around the nearest
    /// centerline point, closed by flat discs at both ends.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.distance_at(p, self.nearest_param(p))
    }

    /// [`Self::signed_distance`] where it could be below `band`; elsewhere a
    /// positive lower bound that is at least `band`.
    pub fn signed_distance_banded(&self, p: &Vector3<f64>, band: f64) -> f64 {
        let (k, d) = self.nearest_sample(p);
        let lb = self.coarse_bound(d);
        if lb >= band {
            return lb;
        }
        self.distance_at(p, self.refine(p, k))
    }

    fn distance_at(&self, p: &Vector3<f64>, t: f64) -> f64 {
        let fr = self.frame_at(t);
        let d = p - fr.point;
        let axial = d.dot(&fr.tangent);
        let q = d - fr.tangent * axial;
        let rho = q.norm();
        let theta = q.dot(&fr.binormal).atan2(q.dot(&fr.normal)).rem_euclid(TAU);
        let r = self.radius(t, theta);
        let beyond = if t <= 1e-9 && axial < 0.0 {
            Some(-axial)
        } else if t >= 1.0 - 1e-9 && axial > 0.0 {
            Some(axial)
        } else {
            None
        };
        if let Some(out) = beyond {
            return if rho <= r { out } else { out.hypot(rho - r) };
        }
        let mut v = rho - r;
        for (end, sign) in [
            (&self.frames[0], -1.0),
            (self.frames.last().expect("frames"), 1.0),
        ] {
            if fr.tangent.dot(&end.tangent) > 0.5 {
                v = v.max(sign * (p - end.point).dot(&end.tangent));
            }
        }
        v
    }
}

/// Sweeps for every branch of a tree; single-node trees have none.
pub fn tree_sweeps(tree: &VesselTree) -> Result<Vec<BranchSweep>, MeshError> {
    tree.branches()
        .into_iter()
        .filter(|b| b.len() >= 2)
        .map(|b| {
            let nodes: Vec<VesselNode> = b.iter().map(|&i| *tree.node(i)).collect();
            BranchSweep::new(&nodes)
        })
        .collect()
}

fn box_distance(p: &Vector3<f64>, lo: &Vector3<f64>, hi: &Vector3<f64>) -> f64 {
    let d = (lo - p).sup(&(p - hi)).sup(&Vector3::zeros());
    d.norm()
}

/// Union of branch fields by pointwise minimum. Branches whose bounding
/// box is farther than the current best value are skipped.
pub fn union_distance(sweeps: &[BranchSweep], p: &Vector3<f64>) -> f64 {
    union_distance_banded(sweeps, p, f64::INFINITY)
}

/// [`union_distance`] exact below `band`; farther points get a positive
/// lower bound of at least `band`.
pub fn union_distance_banded(sweeps: &[BranchSweep], p: &Vector3<f64>, band: f64) -> f64 {
    let mut order: Vec<(f64, usize)> = sweeps
        .iter()
        .enumerate()
        .map(|(i, s)| (box_distance(p, &s.lo, &s.hi), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut best = f64::INFINITY;
    for (lb, i) in order {
        if lb > 0.0 && lb >= best {
            break;
        }
        best = best.min(sweeps[i].signed_distance_banded(p, band));
    }
    best
}

/// Scalar samples on a regular cubic-voxel grid, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    pub dims: [usize; 3],
    pub origin: Vector3<f64>,
    pub spacing: f64,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn sample(
        dims: [usize; 3],
        origin: Vector3<f64>,
        spacing: f64,
        mut f: impl FnMut(&Vector3<f64>) -> f64,
    ) -> Self {
        let mut values = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    values.push(f(
                        &(origin + Vector3::new(i as f64, j as f64, k as f64) * spacing)
                    ));
                }
            }
        }
        Self {
            dims,
            origin,
            spacing,
            values,
        }
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64, j as f64, k as f64) * self.spacing
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }
}

/// Cubic grid of `n` points per axis around `lo..hi` with at least
/// `margin` voxels of clearance on every side.
pub fn fit_grid(
    lo: Vector3<f64>,
    hi: Vector3<f64>,
    n: usize,
    margin: f64,
) -> Result<([usize; 3], Vector3<f64>, f64), MeshError> {
    if (n as f64) < 2.0 * margin + 4.0 {
        return Err(MeshError::Resolution(n));
    }
    let extent = (hi - lo).max().max(1e-9);
    let h = extent / ((n - 1) as f64 - 2.0 * margin);
    let center = (lo + hi) * 0.5;
    let origin = center - Vector3::repeat(0.5 * (n - 1) as f64 * h);
    Ok(([n; 3], origin, h))
}

/// Union field of a tree's branches on an `n³` grid whose bounds clear the
/// surface by more than two voxels. Values are exact within three voxels of
/// the surface; only their sign matters farther out.
pub fn sweep_sdf(sweeps: &[BranchSweep], n: usize) -> Result<ScalarGrid, MeshError> {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for s in sweeps {
        lo = lo.inf(&s.lo);
        hi = hi.sup(&s.hi);
    }
    if sweeps.is_empty() {
        return Err(MeshError::TooFewNodes(1));
    }
    let (dims, origin, h) = fit_grid(lo, hi, n, 2.5)?;
    Ok(ScalarGrid::sample(dims, origin, h, |p| {
        union_distance_banded(sweeps, p, 3.0 * h)
    }))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    fn edge_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut edges = HashMap::new();
        for t in &self.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        edges
    }

    /// Every edge belongs to exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        !self.is_empty() && self.edge_counts().values().all(|&c| c == 2)
    }

    /// `V − E + F` over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &v in t {
                used[v] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edge_counts().len() as i64 + self.triangles.len() as i64
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn min_triangle_area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| self.triangle_area(t))
            .fold(f64::INFINITY, f64::min)
    }

    /// Divergence-theorem volume; positive for outward winding.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i]);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }
}

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Interpolation weights are kept this far from cube corners so vertices
/// on different edges never coincide.
const CORNER_GAP: f64 = 1e-3;

/// Triangulates the `iso` level set. Corners below `iso` are inside;
/// triangles wind counter-clockwise seen from the positive side. Vertices
/// are shared through their grid edge, so a closed level set yields a
/// closed mesh. A grid without a sign change gives an empty mesh.
pub fn marching_cubes(grid: &ScalarGrid, iso: f64) -> TriMesh {
    let [nx, ny, nz] = grid.dims;
    let mut mesh = TriMesh::default();
    if nx < 2 || ny < 2 || nz < 2 {
        return mesh;
    }
    let mut shared: HashMap<(usize, usize), usize> = HashMap::new();
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let idx = CORNERS.map(|c| grid.index(i + c[0], j + c[1], k + c[2]));
                let vals = idx.map(|g| grid.values[g]);
                let mut case = 0usize;
                for (c, &v) in vals.iter().enumerate() {
                    if v < iso {
                        case |= 1 << c;
                    }
                }
                let crossed = tables::EDGE_TABLE[case];
                if crossed == 0 {
                    continue;
                }
                let mut ev = [usize::MAX; 12];
                for (e, &[a, b]) in EDGES.iter().enumerate() {
                    if crossed & (1 << e) == 0 {
                        continue;
                    }
                    let key = (idx[a].min(idx[b]), idx[a].max(idx[b]));
                    ev[e] = *shared.entry(key).or_insert_with(|| {
                        let (lo, hi) = if idx[a] < idx[b] { (a, b) } else { (b, a) };
                        let w = ((iso - vals[lo]) / (vals[hi] - vals[lo]))
                            .clamp(CORNER_GAP, 1.0 - CORNER_GAP);
                        let pa =
                            grid.point(i + CORNERS[lo][0], j + CORNERS[lo][1], k + CORNERS[lo][2]);
                        let pb =
                            grid.point(i + CORNERS[hi][0], j + CORNERS[hi][1], k + CORNERS[hi][2]);
                        mesh.vertices.push(pa + (pb - pa) * w);
                        mesh.vertices.len() - 1
                    });
                }
                for tri in tables::TRIANGLE_TABLE[case].chunks(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    mesh.triangles.push([
                        ev[tri[0] as usize],
                        ev[tri[2] as usize],
                        ev[tri[1] as usize],
                    ]);
                }
            }
        }
    }
    mesh
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshReport {
    pub mesh: TriMesh,
    pub spacing: f64,
    pub watertight: bool,
    pub euler: i64,
}

/// Full reconstruction of a tree at grid resolution `n`.
pub fn mesh_tree(tree: &VesselTree, n: usize) -> Result<MeshReport, MeshError> {
    let sweeps = tree_sweeps(tree)?;
    let grid = sweep_sdf(&sweeps, n)?;
    let mesh = marching_cubes(&grid, 0.0);
    Ok(MeshReport {
        watertight: mesh.is_watertight(),
        euler: mesh.euler_characteristic(),
        spacing: grid.spacing,
        mesh,
    })
}

/// ASCII OBJ with 9 significant digits per coordinate.
pub fn obj_string(mesh: &TriMesh) -> String {
    let mut s = String::with_capacity(mesh.vertices.len() * 48 + mesh.triangles.len() * 24);
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {:.8e} {:.8e} {:.8e}", v.x, v.y, v.z);
    }
    for t in &mesh.triangles {
        let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    s
}

pub fn export_obj(mesh: &TriMesh, path: &Path) -> Result<(), MeshError> {
    fs::write(path, obj_string(mesh)).map_err(|source| MeshError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads the `v` and `f` lines of an OBJ file; face entries may carry
/// `/`-separated texture or normal indices, which are ignored.
pub fn import_obj(path: &Path) -> Result<TriMesh, MeshError> {
    let text = fs::read_to_string(path).map_err(|source| MeshError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let err = |line: usize, msg: &str| MeshError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.to_string(),
    };
    let mut mesh = TriMesh::default();
    for (ln, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it
                    .take(3)
                    .map(|x| x.parse().map_err(|_| err(ln + 1, "bad coordinate")))
                    .collect::<Result<_, _>>()?;
                if c.len() != 3 {
                    return Err(err(ln + 1, "vertex needs three coordinates"));
                }
                mesh.vertices.push(Vector3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let ix: Vec<usize> = it
                    .map(|x| {
                        x.split('/')
                            .next()
                            .and_then(|s| s.parse::<usize>().ok())
                            .filter(|&i| i >= 1)
                            .ok_or_else(|| err(ln + 1, "bad face index"))
                    })
                    .collect::<Result<_, _>>()?;
                if ix.len() != 3 {
                    return Err(err(ln + 1, "only triangles are supported"));
                }
                mesh.triangles.push([ix[0] - 1, ix[1] - 1, ix[2] - 1]);
            }
            _ => {}
        }
    }
    if mesh
        .triangles
        .iter()
        .flatten()
        .any(|&i| i >= mesh.vertices.len())
    {
        return Err(err(0, "face index out of range"));
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tube(len: f64, r: f64, nodes: usize) -> Vec<VesselNode> {
        (0..nodes)
            .map(|k| {
                VesselNode::circular(
                    [0.0, 0.0, -len / 2.0 + len * k as f64 / (nodes - 1) as f64],
                    r,
                )
            })
            .collect()
    }

    #[test]
    fn straight_branch_has_constant_frames() {
        let s = BranchSweep::new(&tube(4.0, 1.0, 5)).unwrap();
        for f in &s.frames {
            assert!((f.normal - Vector3::x()).norm() < 1e-12);
            assert!((f.tangent - Vector3::z()).norm() < 1e-12);
        }
    }

    #[test]
    fn tube_distance_is_analytic() {
        let s = BranchSweep::new(&tube(4.0, 1.0, 5)).unwrap();
        assert!((s.signed_distance(&Vector3::new(2.0, 0.0, 0.0)) - 1.0).abs() < 1e-9);
        let mut rng = crate::rng::seeded(1);
        use rand::Rng as _;
        for _ in 0..200 {
            let a: f64 = rng.random_range(0.0..TAU);
            let z: f64 = rng.random_range(-1.5..1.5);
            let v = s.signed_distance(&Vector3::new(a.cos(), a.sin(), z));
            assert!(v.abs() < 1e-6, "{v}");
        }
        assert!((s.signed_distance(&Vector3::new(0.0, 0.0, 3.0)) - 1.0).abs() < 1e-9);
        assert!((s.signed_distance(&Vector3::new(0.0, 0.0, -2.5)) - 0.5).abs() < 1e-9);
        assert!((s.signed_distance(&Vector3::new(0.0, 0.0, 1.9)) + 0.1).abs() < 1e-9);
    }

    #[test]
    fn planar_arc_frames_keep_binormal() {
        let nodes: Vec<VesselNode> = (0..9)
            .map(|k| {
                let a = std::f64::consts::PI * k as f64 / 8.0;
                VesselNode::circular([3.0 * a.cos(), 3.0 * a.sin(), 0.0], 0.3)
            })
            .collect();
        let s = BranchSweep::new(&nodes).unwrap();
        let b0 = s.frames[0].binormal;
        for w in s.frames.windows(2) {
            assert!((w[1].binormal - b0).norm() < 1e-6 || (w[1].binormal + b0).norm() < 1e-6);
            assert!(w[0].normal.dot(&w[1].normal) > (30f64).to_radians().cos());
        }
    }

    #[test]
    fn frames_are_orthonormal() {
        let nodes: Vec<VesselNode> = (0..7)
            .map(|k| {
                let t = k as f64 * 0.7;
                VesselNode::circular([t.cos(), t.sin(), 0.4 * t], 0.2)
            })
            .collect();
        let s = BranchSweep::new(&nodes).unwrap();
        for k in 0..100 {
            let f = s.frame_at(k as f64 / 99.0);
            let m = nalgebra::Matrix3::from_columns(&[f.tangent, f.normal, f.binormal]);
            let e = (m.transpose() * m - nalgebra::Matrix3::identity())
                .abs()
                .max();
            assert!(e < 1e-9, "{e}");
        }
        for w in s.frames.windows(2) {
            assert!(w[0].normal.dot(&w[1].normal) > (30f64).to_radians().cos());
        }
    }

    #[test]
    fn coincident_nodes_are_merged() {
        let mut nodes = tube(2.0, 0.5, 3);
        nodes.insert(1, nodes[1]);
        let s = BranchSweep::new(&nodes).unwrap();
        assert_eq!(s.params.len(), 3);
        assert!(s.params.windows(2).all(|w| w[1] > w[0]));
        assert!(matches!(
            BranchSweep::new(&[nodes[0], nodes[0]]),
            Err(MeshError::TooFewNodes(1))
        ));
    }

    #[test]
    fn union_is_min_of_parallel_tubes() {
        let a = BranchSweep::new(&tube(4.0, 0.5, 4)).unwrap();
        let shifted: Vec<VesselNode> = tube(3.0, 0.7, 5)
            .into_iter()
            .map(|mut n| {
                n.position[0] += 1.5;
                n
            })
            .collect();
        let b = BranchSweep::new(&shifted).unwrap();
        let both = [a.clone(), b.clone()];
        let mut rng = crate::rng::seeded(2);
        use rand::Rng as _;
        for _ in 0..1000 {
            let p = Vector3::new(
                rng.random_range(-2.0..4.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-3.0..3.0),
            );
            let want = a.signed_distance(&p).min(b.signed_distance(&p));
            assert_eq!(union_distance(&both, &p), want);
        }
    }

    #[test]
    fn sign_inside_and_outside() {
        let nodes: Vec<VesselNode> = (0..6)
            .map(|k| {
                let t = k as f64 * 0.5;
                VesselNode::circular([t, 0.3 * t * t, 0.1 * t], 0.3)
            })
            .collect();
        let s = BranchSweep::new(&nodes).unwrap();
        for k in 1..40 {
            let t = k as f64 / 40.0;
            let f = s.frame_at(t);
            for j in 0..8 {
                let a = TAU * j as f64 / 8.0;
                let dir = f.normal * a.cos() + f.binormal * a.sin();
                let r = s.radius(t, a);
                assert!(s.signed_distance(&(f.point + dir * 0.85 * r)) < 0.0);
                assert!(s.signed_distance(&(f.point + dir * 1.15 * r)) > 0.0);
            }
        }
    }

    fn sphere_mesh(n: usize) -> (TriMesh, f64) {
        let h = 2.0 / (n - 1) as f64;
        let grid = ScalarGrid::sample([n; 3], Vector3::repeat(-1.0), h, |p| p.norm() - 0.5);
        (marching_cubes(&grid, 0.0), h)
    }

    #[test]
    fn sphere_is_closed_and_accurate() {
        let (m, h) = sphere_mesh(64);
        assert!(m.is_watertight());
        assert_eq!(m.euler_characteristic(), 2);
        let err = m
            .vertices
            .iter()
            .map(|v| (v.norm() - 0.5).abs())
            .fold(0.0, f64::max);
        assert!(err < 2.0 * h, "{err}");
        let vol = m.signed_volume();
        let want = 4.0 / 3.0 * std::f64::consts::PI * 0.125;
        assert!((vol - want).abs() < 0.02 * want, "{vol}");
        assert!(m.min_triangle_area() > 1e-12);
    }

    #[test]
    fn positive_grid_gives_empty_mesh() {
        let grid = ScalarGrid::sample([8; 3], Vector3::zeros(), 1.0, |_| 1.0);
        assert!(marching_cubes(&grid, 0.0).is_empty());
    }

    #[test]
    fn obj_roundtrip() {
        let tri = TriMesh {
            vertices: vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0 / 3.0, 0.0),
            ],
            triangles: vec![[0, 1, 2]],
        };
        let s = obj_string(&tri);
        assert_eq!(s.lines().filter(|l| l.starts_with("v ")).count(), 3);
        assert_eq!(s.lines().filter(|l| l.starts_with("f ")).count(), 1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.obj");
        let (m, _) = sphere_mesh(16);
        export_obj(&m, &p).unwrap();
        let back = import_obj(&p).unwrap();
        assert_eq!(back.triangles, m.triangles);
        assert_eq!(back.vertices.len(), m.vertices.len());
        for (a, b) in back.vertices.iter().zip(&m.vertices) {
            assert!((a - b).abs().max() <= 1e-8 * b.abs().max().max(1e-300));
        }
    }

    pub(crate) fn capped_cylinder_distance(v: &Vector3<f64>, half_len: f64, r: f64) -> f64 {
        let dx = v.x.hypot(v.y) - r;
        let dz = v.z.abs() - half_len;
        (dx.max(dz).min(0.0) + dx.max(0.0).hypot(dz.max(0.0))).abs()
    }

    #[test]
    fn tube_mesh_converges() {
        let mut errs = Vec::new();
        for n in [64, 128] {
            let s = BranchSweep::new(&tube(4.0, 1.0, 5)).unwrap();
            let grid = sweep_sdf(&[s], n).unwrap();
            let m = marching_cubes(&grid, 0.0);
            assert!(m.is_watertight());
            assert_eq!(m.euler_characteristic(), 2);
            let err = m
                .vertices
                .iter()
                .map(|v| capped_cylinder_distance(v, 2.0, 1.0))
                .fold(0.0, f64::max);
            assert!(err < 2.0 * grid.spacing);
            errs.push(err);
        }
        assert!(errs[0] / errs[1] >= 1.8, "{errs:?}");
    }
}
