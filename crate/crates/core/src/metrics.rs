//! Evaluation metrics: surface point sampling, squared Chamfer distance,
//! MMD / COV / 1-NNA over sets of clouds, branch tortuosity, total
//! centerline length and histogram cosine similarity.

use std::fmt::Write as _;

use nalgebra::Vector3;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::meshing::TriMesh;
use crate::tree::VesselTree;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("cannot sample points from an empty mesh")]
    EmptyMesh,
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("1-NNA needs at least two clouds in total")]
    Singleton,
    #[error("branch endpoints coincide, tortuosity is infinite")]
    CoincidentEndpoints,
    #[error("a branch needs at least two points")]
    TooFewPoints,
    #[error("bin count must be positive")]
    NoBins,
}

pub type PointCloud = Vec<Vector3<f64>>;

/// `n` points uniformly distributed over the mesh surface: triangles by
/// area, then uniform barycentric coordinates.
pub fn sample_points(mesh: &TriMesh, n: usize, seed: u64) -> Result<PointCloud, MetricError> {
    let mut cum = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cum.push(total);
    }
    if cum.is_empty() || total.is_nan() || total <= 0.0 {
        return Err(MetricError::EmptyMesh);
    }
    let mut rng = crate::rng::substream(seed, "metrics.sample");
    Ok((0..n)
        .map(|_| {
            let u = rng.random::<f64>() * total;
            let t = cum.partition_point(|&c| c <= u).min(cum.len() - 1);
            let [a, b, c] = mesh.triangles[t].map(|i| mesh.vertices[i]);
            let s = rng.random::<f64>().sqrt();
            let r = rng.random::<f64>();
            a * (1.0 - s) + b * (s * (1.0 - r)) + c * (s * r)
        })
        .collect())
}

fn nearest_sq(p: &Vector3<f64>, cloud: &[Vector3<f64>]) -> f64 {
    cloud
        .iter()
        .map(|q| (p - q).norm_squared())
        .fold(f64::INFINITY, f64::min)
}

/// Mean nearest squared distance from `a` to `b` plus from `b` to `a`.
pub fn chamfer(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    let ab: f64 = a.iter().map(|p| nearest_sq(p, b)).sum::<f64>() / a.len() as f64;
    let ba: f64 = b.iter().map(|p| nearest_sq(p, a)).sum::<f64>() / b.len() as f64;
    ab + ba
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub mmd: f64,
    pub cov: f64,
    /// Raw leave-one-out accuracy; 0.5 means the sets are
    /// indistinguishable.
    pub nna_1: f64,
}

/// MMD, COV and 1-NNA under the Chamfer distance.
///
/// COV counts references that are the nearest reference (lowest index on
/// ties) of some generated cloud. In 1-NNA an exact distance tie is
/// resolved toward the opposite set.
pub fn mmd_cov_1nna(
    generated: &[PointCloud],
    reference: &[PointCloud],
) -> Result<SetMetrics, MetricError> {
    if generated.is_empty() {
        return Err(MetricError::Empty("generated set"));
    }
    if reference.is_empty() {
        return Err(MetricError::Empty("reference set"));
    }
    let (g, r) = (generated.len(), reference.len());
    let gr: Vec<Vec<f64>> = generated
        .iter()
        .map(|x| reference.iter().map(|y| chamfer(x, y)).collect())
        .collect();
    let mmd = (0..r)
        .map(|j| (0..g).map(|i| gr[i][j]).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / r as f64;
    let mut covered = vec![false; r];
    for row in &gr {
        let mut best = 0;
        for j in 1..r {
            if row[j] < row[best] {
                best = j;
            }
        }
        covered[best] = true;
    }
    let cov = covered.iter().filter(|&&c| c).count() as f64 / r as f64;
    let all: Vec<(&PointCloud, bool)> = generated
        .iter()
        .map(|c| (c, true))
        .chain(reference.iter().map(|c| (c, false)))
        .collect();
    if all.len() < 2 {
        return Err(MetricError::Singleton);
    }
    let dist = |a: usize, b: usize| -> f64 {
        match (a < g, b < g) {
            (true, false) => gr[a][b - g],
            (false, true) => gr[b][a - g],
            _ => chamfer(all[a].0, all[b].0),
        }
    };
    let mut correct = 0usize;
    for i in 0..all.len() {
        let mut best: Option<(f64, bool)> = None;
        for j in (0..all.len()).filter(|&j| j != i) {
            let d = dist(i, j);
            let same = all[j].1 == all[i].1;
            best = match best {
                None => Some((d, same)),
                Some((bd, bs)) if d < bd || (d == bd && bs && !same) => Some((d, same)),
                keep => keep,
            };
        }
        if best.is_some_and(|(_, same)| same) {
            correct += 1;
        }
    }
    Ok(SetMetrics {
        mmd,
        cov,
        nna_1: correct as f64 / all.len() as f64,
    })
}

/// Path length over chord length. Monotone collinear points give exactly
/// 1.
pub fn tortuosity(points: &[Vector3<f64>]) -> Result<f64, MetricError> {
    if points.len() < 2 {
        return Err(MetricError::TooFewPoints);
    }
    let (first, last) = (points[0], points[points.len() - 1]);
    let chord = (last - first).norm();
    if chord <= 1e-12 * first.norm().max(last.norm()).max(1.0) {
        return Err(MetricError::CoincidentEndpoints);
    }
    let axis = (last - first) / chord;
    let mut prev_s = 0.0;
    let mut straight = true;
    for p in &points[1..] {
        let d = p - first;
        let s = d.dot(&axis);
        if (d - axis * s).norm() > 1e-12 * chord || s < prev_s {
            straight = false;
            break;
        }
        prev_s = s;
    }
    if straight {
        return Ok(1.0);
    }
    let path: f64 = points.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    Ok((path / chord).max(1.0))
}

/// Tortuosity of every branch of a tree; branches with coincident
/// endpoints are skipped.
pub fn branch_tortuosities(tree: &VesselTree) -> Vec<f64> {
    tree.branches()
        .iter()
        .filter_map(|b| tortuosity(&tree.branch_points(b)).ok())
        .collect()
}

/// Sum of parent-to-child edge lengths.
pub fn total_length(tree: &VesselTree) -> f64 {
    tree.edges()
        .iter()
        .map(|&(p, c)| (tree.node(p).pos() - tree.node(c).pos()).norm())
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramPair {
    /// `bins + 1` shared edges over the pooled range.
    pub edges: Vec<f64>,
    pub real: Vec<u64>,
    pub generated: Vec<u64>,
    pub cosine: f64,
}

impl HistogramPair {
    pub fn new(real: &[f64], generated: &[f64], bins: usize) -> Result<Self, MetricError> {
        if bins == 0 {
            return Err(MetricError::NoBins);
        }
        if real.is_empty() {
            return Err(MetricError::Empty("real values"));
        }
        if generated.is_empty() {
            return Err(MetricError::Empty("generated values"));
        }
        let lo = real
            .iter()
            .chain(generated)
            .copied()
            .fold(f64::INFINITY, f64::min);
        let hi = real
            .iter()
            .chain(generated)
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let width = hi - lo;
        let count = |vals: &[f64]| {
            let mut h = vec![0u64; bins];
            for &v in vals {
                let b = if width > 0.0 {
                    (((v - lo) / width * bins as f64) as usize).min(bins - 1)
                } else {
                    0
                };
                h[b] += 1;
            }
            h
        };
        let (hr, hg) = (count(real), count(generated));
        let dot: f64 = hr.iter().zip(&hg).map(|(&a, &b)| a as f64 * b as f64).sum();
        let sq = |h: &[u64]| h.iter().map(|&a| (a as f64).powi(2)).sum::<f64>();
        let edges = (0..=bins)
            .map(|i| lo + width * i as f64 / bins as f64)
            .collect();
        Ok(Self {
            edges,
            cosine: (dot / (sq(&hr) * sq(&hg)).sqrt()).min(1.0),
            real: hr,
            generated: hg,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,real,generated\n");
        for i in 0..self.real.len() {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                self.edges[i],
                self.edges[i + 1],
                self.real[i],
                self.generated[i]
            );
        }
        s
    }
}

/// Cosine similarity of the two histograms over shared bins.
pub fn histogram_cosine(real: &[f64], generated: &[f64], bins: usize) -> Result<f64, MetricError> {
    Ok(HistogramPair::new(real, generated, bins)?.cosine)
}

pub const DEFAULT_BINS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub generated: usize,
    pub reference: usize,
    pub mmd: f64,
    pub cov: f64,
    pub nna_1: f64,
    pub tortuosity: HistogramPair,
    pub length: HistogramPair,
}

impl MetricReport {
    pub fn compute(
        generated_clouds: &[PointCloud],
        reference_clouds: &[PointCloud],
        generated_trees: &[VesselTree],
        reference_trees: &[VesselTree],
        bins: usize,
    ) -> Result<Self, MetricError> {
        let set = mmd_cov_1nna(generated_clouds, reference_clouds)?;
        let tort = |ts: &[VesselTree]| ts.iter().flat_map(branch_tortuosities).collect::<Vec<_>>();
        let len = |ts: &[VesselTree]| ts.iter().map(total_length).collect::<Vec<_>>();
        Ok(Self {
            generated: generated_clouds.len(),
            reference: reference_clouds.len(),
            mmd: set.mmd,
            cov: set.cov,
            nna_1: set.nna_1,
            tortuosity: HistogramPair::new(&tort(reference_trees), &tort(generated_trees), bins)?,
            length: HistogramPair::new(&len(reference_trees), &len(generated_trees), bins)?,
        })
    }

    pub fn to_table(&self) -> String {
        let rows = [
            ("generated", self.generated.to_string()),
            ("reference", self.reference.to_string()),
            ("MMD", format!("{:.6}", self.mmd)),
            ("COV", format!("{:.4}", self.cov)),
            ("1-NNA", format!("{:.4}", self.nna_1)),
            (
                "tortuosity cosine",
                format!("{:.4}", self.tortuosity.cosine),
            ),
            ("length cosine", format!("{:.4}", self.length.cosine)),
        ];
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut s = String::new();
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<w$}  {v:>12}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::VesselNode;

    fn cloud(rng: &mut crate::rng::Rng, n: usize, offset: f64) -> PointCloud {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random::<f64>() + offset,
                    rng.random::<f64>(),
                    rng.random::<f64>(),
                )
            })
            .collect()
    }

    fn square() -> TriMesh {
        TriMesh {
            vertices: vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(1.0, 1.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
        }
    }

    #[test]
    fn square_samples_are_uniform() {
        let pts = sample_points(&square(), 10_000, 3).unwrap();
        assert_eq!(pts.len(), 10_000);
        let mean = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
        assert!((mean.x - 0.5).abs() < 0.02 && (mean.y - 0.5).abs() < 0.02);
        assert!(pts
            .iter()
            .all(|p| p.z == 0.0 && (0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y)));
        assert_eq!(pts, sample_points(&square(), 10_000, 3).unwrap());
        assert_eq!(
            sample_points(&TriMesh::default(), 5, 0),
            Err(MetricError::EmptyMesh)
        );
    }

    #[test]
    fn samples_lie_on_triangles() {
        let m = TriMesh {
            vertices: vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(2.0, 0.5, 1.0),
                Vector3::new(-1.0, 1.0, 3.0),
            ],
            triangles: vec![[0, 1, 2]],
        };
        let n = (m.vertices[1] - m.vertices[0])
            .cross(&(m.vertices[2] - m.vertices[0]))
            .normalize();
        for p in sample_points(&m, 500, 1).unwrap() {
            assert!((p - m.vertices[0]).dot(&n).abs() < 1e-9);
        }
    }

    #[test]
    fn chamfer_basics() {
        let a = vec![Vector3::zeros()];
        let b = vec![Vector3::x()];
        assert_eq!(chamfer(&a, &b), 2.0);
        let mut rng = crate::rng::seeded(5);
        let c = cloud(&mut rng, 20, 0.0);
        let d = cloud(&mut rng, 13, 0.3);
        assert_eq!(chamfer(&c, &c), 0.0);
        assert_eq!(chamfer(&c, &d), chamfer(&d, &c));
    }

    #[test]
    fn identical_sets_edge_case() {
        let mut rng = crate::rng::seeded(6);
        let set: Vec<PointCloud> = (0..4).map(|_| cloud(&mut rng, 10, 0.0)).collect();
        let m = mmd_cov_1nna(&set, &set).unwrap();
        assert_eq!(m.mmd, 0.0);
        assert_eq!(m.cov, 1.0);
        assert_eq!(m.nna_1, 0.0);
    }

    #[test]
    fn separated_sets_are_fully_classified() {
        let mut rng = crate::rng::seeded(7);
        let a: Vec<PointCloud> = (0..5).map(|_| cloud(&mut rng, 10, 0.0)).collect();
        let b: Vec<PointCloud> = (0..5).map(|_| cloud(&mut rng, 10, 100.0)).collect();
        assert_eq!(mmd_cov_1nna(&a, &b).unwrap().nna_1, 1.0);
        assert_eq!(
            mmd_cov_1nna(&[], &b),
            Err(MetricError::Empty("generated set"))
        );
    }

    #[test]
    fn tortuosity_cases() {
        let line: Vec<Vector3<f64>> = (0..7)
            .map(|k| Vector3::new(0.3, -1.0, 2.0) * (k as f64).powf(1.3))
            .collect();
        assert_eq!(tortuosity(&line).unwrap(), 1.0);
        let arc: Vec<Vector3<f64>> = (0..=2000)
            .map(|k| {
                let a = std::f64::consts::PI * k as f64 / 2000.0;
                Vector3::new(a.cos(), a.sin(), 0.0)
            })
            .collect();
        assert!((tortuosity(&arc).unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-3);
        let rot = nalgebra::Rotation3::from_euler_angles(0.3, -1.1, 2.0);
        let moved: Vec<Vector3<f64>> = arc
            .iter()
            .map(|p| rot * p + Vector3::new(4.0, 5.0, 6.0))
            .collect();
        assert!((tortuosity(&moved).unwrap() - tortuosity(&arc).unwrap()).abs() < 1e-12);
        let loop_ = vec![Vector3::zeros(), Vector3::x(), Vector3::zeros()];
        assert_eq!(tortuosity(&loop_), Err(MetricError::CoincidentEndpoints));
    }

    #[test]
    fn length_of_small_trees() {
        let leaf = |x: f64, y: f64| VesselNode::circular([x, y, 0.0], 0.1);
        let two = VesselTree::from_links(
            vec![leaf(0.0, 0.0), leaf(3.0, 0.0)],
            vec![Some(1), None],
            vec![None, None],
            0,
        )
        .unwrap();
        assert_eq!(total_length(&two), 3.0);
        let three = VesselTree::from_links(
            vec![leaf(0.0, 0.0), leaf(1.0, 0.0), leaf(0.0, 1.0)],
            vec![Some(1), None, None],
            vec![Some(2), None, None],
            0,
        )
        .unwrap();
        assert_eq!(total_length(&three), 2.0);
    }

    #[test]
    fn histogram_similarity() {
        let v = [1.0, 2.0, 2.5, 7.0, 3.3];
        assert_eq!(histogram_cosine(&v, &v, 32).unwrap(), 1.0);
        assert_eq!(
            histogram_cosine(&[0.0, 0.1], &[9.9, 10.0], 32).unwrap(),
            0.0
        );
        assert!(histogram_cosine(&[], &v, 32).is_err());
        let h = HistogramPair::new(&v, &[4.0], 4).unwrap();
        assert_eq!(h.real.iter().sum::<u64>(), 5);
        assert_eq!(h.to_csv().lines().count(), 5);
    }
}
