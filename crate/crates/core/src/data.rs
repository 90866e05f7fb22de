//! Corpus ingestion, synthetic tree generation and train/validation splits.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Rotation3, Unit, Vector3};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;
use crate::tree::{reference_normal, TreeError, TreeJson, VesselNode, VesselTree, RADII};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("no valid trees found ({skipped} files skipped)")]
    EmptyCorpus { skipped: usize },
    #[error("split fractions {0:?} must be non-negative and sum to 1")]
    BadFractions(Vec<f64>),
    #[error("split {index} would be empty ({groups} source trees, fractions {fractions:?})")]
    EmptySplit {
        index: usize,
        groups: usize,
        fractions: Vec<f64>,
    },
    #[error("invalid synthetic config: {0}")]
    BadConfig(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Synthetic,
    Augmented { source: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub id: String,
    pub provenance: Provenance,
    pub file: Option<String>,
    pub tree: VesselTree,
}

impl CorpusEntry {
    /// Id of the original tree this entry derives from.
    pub fn group(&self) -> &str {
        match &self.provenance {
            Provenance::Augmented { source } => source,
            _ => &self.id,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub entries: Vec<CorpusEntry>,
    pub height_cap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub provenance: Provenance,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub height_cap: usize,
    pub entries: Vec<ManifestEntry>,
}

/// Outcome of [`load_corpus`]: the corpus and one message per skipped file.
#[derive(Debug)]
pub struct Loaded {
    pub corpus: Corpus,
    pub skipped: Vec<String>,
}

/// Brings a tree into corpus form: height-trimmed and normalized. Trees that
/// already carry a normalization record are kept as they are.
pub fn prepare_tree(tree: VesselTree, height_cap: usize) -> Result<VesselTree, TreeError> {
    let trimmed = tree.trimmed(height_cap);
    if trimmed.normalization().is_some() {
        let bad = trimmed
            .nodes()
            .iter()
            .flat_map(|n| n.attrs())
            .any(|v| v.abs() > 1.0 + 1e-9);
        if bad || trimmed.node(0).position != [0.0; 3] {
            return Err(TreeError::Invalid(
                "tree carries a normalization record but is not normalized".into(),
            ));
        }
        return Ok(trimmed);
    }
    Ok(trimmed.normalize()?.0)
}

/// Reads every `*.json` tree file in `dir` (sorted by name). A
/// `manifest.json`, when present, supplies ids and provenance tags.
/// Malformed files are skipped with a warning.
pub fn load_corpus(dir: &Path, height_cap: usize) -> Result<Loaded, DataError> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Option<CorpusManifest> = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        Some(serde_json::from_str(&text).map_err(|e| DataError::Parse {
            path: manifest_path.clone(),
            message: e.to_string(),
        })?)
    } else {
        None
    };
    let tags: BTreeMap<String, (String, Provenance)> = manifest
        .iter()
        .flat_map(|m| &m.entries)
        .map(|e| (e.file.clone(), (e.id.clone(), e.provenance.clone())))
        .collect();

    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && p.file_name() != Some("manifest.json".as_ref())
        })
        .collect();
    files.sort();

    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for path in files {
        let name = path
            .file_name()
            .expect("file")
            .to_string_lossy()
            .to_string();
        let parsed = fs::read_to_string(&path)
            .map_err(|e| e.to_string())
            .and_then(|text| serde_json::from_str::<TreeJson>(&text).map_err(|e| e.to_string()))
            .and_then(|j| VesselTree::from_json(&j).map_err(|e| e.to_string()))
            .and_then(|t| prepare_tree(t, height_cap).map_err(|e| e.to_string()));
        match parsed {
            Ok(tree) => {
                let (id, provenance) = tags.get(&name).cloned().unwrap_or_else(|| {
                    let stem = path
                        .file_stem()
                        .expect("stem")
                        .to_string_lossy()
                        .to_string();
                    (stem, Provenance::Real)
                });
                entries.push(CorpusEntry {
                    id,
                    provenance,
                    file: Some(name),
                    tree,
                });
            }
            Err(msg) => {
                log::warn!("skipping {}: {msg}", path.display());
                skipped.push(format!("{name}: {msg}"));
            }
        }
    }
    if entries.is_empty() {
        return Err(DataError::EmptyCorpus {
            skipped: skipped.len(),
        });
    }
    let mut seen = std::collections::HashSet::new();
    for e in &entries {
        if !seen.insert(e.id.clone()) {
            return Err(DataError::Parse {
                path: dir.to_path_buf(),
                message: format!("duplicate tree id {}", e.id),
            });
        }
    }
    Ok(Loaded {
        corpus: Corpus {
            entries,
            height_cap,
        },
        skipped,
    })
}

/// Writes one JSON file per tree plus `manifest.json`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<CorpusManifest, DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = CorpusManifest {
        height_cap: corpus.height_cap,
        entries: Vec::new(),
    };
    for e in &corpus.entries {
        let file = format!("{}.json", e.id);
        let path = dir.join(&file);
        let text = serde_json::to_string_pretty(&e.tree.to_json()).expect("tree json");
        fs::write(&path, text).map_err(io_err(&path))?;
        manifest.entries.push(ManifestEntry {
            id: e.id.clone(),
            provenance: e.provenance.clone(),
            file,
        });
    }
    let path = dir.join("manifest.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(&manifest).expect("manifest json"),
    )
    .map_err(io_err(&path))?;
    Ok(manifest)
}

/// Adds resampled and rotated variants of every non-augmented entry, each
/// renormalized and tagged with its source id.
pub fn augment_corpus(
    corpus: &mut Corpus,
    rates: &[f64],
    rotations: usize,
    seed: u64,
) -> Result<usize, DataError> {
    let mut added = Vec::new();
    for e in &corpus.entries {
        if matches!(e.provenance, Provenance::Augmented { .. }) {
            continue;
        }
        let s = crate::rng::derive_seed(seed, &e.id);
        let variants = crate::tree::augment(&e.tree, rates, rotations, s);
        for (j, v) in variants.into_iter().enumerate() {
            let tree = v.trimmed(corpus.height_cap).normalize()?.0;
            added.push(CorpusEntry {
                id: format!("{}_aug{j}", e.id),
                provenance: Provenance::Augmented {
                    source: e.id.clone(),
                },
                file: None,
                tree,
            });
        }
    }
    let n = added.len();
    corpus.entries.extend(added);
    Ok(n)
}

/// Seeded partition of the corpus. Entries are grouped by source tree so an
/// augmented variant always lands with its original.
pub fn make_splits(
    corpus: &Corpus,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<Vec<CorpusEntry>>, DataError> {
    let sum: f64 = fractions.iter().sum();
    if fractions.is_empty() || fractions.iter().any(|&f| f < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions(fractions.to_vec()));
    }
    let mut groups: Vec<String> = Vec::new();
    for e in &corpus.entries {
        if !groups.iter().any(|g| g == e.group()) {
            groups.push(e.group().to_string());
        }
    }
    let mut rng = crate::rng::substream(seed, "splits");
    groups.shuffle(&mut rng);
    let n = groups.len();
    let mut bounds = Vec::with_capacity(fractions.len() + 1);
    let mut acc = 0.0;
    bounds.push(0);
    for f in &fractions[..fractions.len() - 1] {
        acc += f;
        bounds.push(((acc * n as f64).round() as usize).min(n));
    }
    bounds.push(n);
    let mut out = Vec::with_capacity(fractions.len());
    for (index, w) in bounds.windows(2).enumerate() {
        if w[1] <= w[0] {
            return Err(DataError::EmptySplit {
                index,
                groups: n,
                fractions: fractions.to_vec(),
            });
        }
        let members = &groups[w[0]..w[1]];
        out.push(
            corpus
                .entries
                .iter()
                .filter(|e| members.iter().any(|g| g == e.group()))
                .cloned()
                .collect(),
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Branch generations; 1 gives a single unbranched vessel.
    pub max_depth: usize,
    /// Inclusive range of new nodes per branch.
    pub branch_nodes: (usize, usize),
    pub bifurcation_prob: f64,
    /// Murray-style exponent: children get `2^(-1/exponent)` of the parent
    /// radius.
    pub radius_exponent: f64,
    /// Strength of the low-pass filtered direction noise.
    pub tortuosity: f64,
    pub root_radius: f64,
    pub step: f64,
    /// Largest relative elliptic deformation of a cross-section.
    pub ellipticity: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            max_depth: 3,
            branch_nodes: (3, 6),
            bifurcation_prob: 0.8,
            radius_exponent: 3.0,
            tortuosity: 0.3,
            root_radius: 0.4,
            step: 1.0,
            ellipticity: 0.15,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::BadConfig(m.into()));
        if self.max_depth < 1 {
            return bad("max_depth must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.bifurcation_prob) {
            return bad("bifurcation_prob must lie in [0, 1]");
        }
        if self.branch_nodes.0 < 1 || self.branch_nodes.1 < self.branch_nodes.0 {
            return bad("branch_nodes must be a non-empty range starting at 1 or more");
        }
        if !(self.radius_exponent > 0.0 && self.root_radius > 0.0 && self.step > 0.0) {
            return bad("radius_exponent, root_radius and step must be positive");
        }
        if !(0.0..1.0).contains(&self.ellipticity) || self.tortuosity < 0.0 {
            return bad("ellipticity must lie in [0, 1) and tortuosity be non-negative");
        }
        Ok(())
    }

    pub fn child_ratio(&self) -> f64 {
        2f64.powf(-1.0 / self.radius_exponent)
    }
}

fn unit_normal(rng: &mut Rng) -> Vector3<f64> {
    Vector3::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    )
}

fn elliptic_section(rng: &mut Rng, radius: f64, ellipticity: f64) -> [f64; RADII] {
    let e = rng.random_range(0.0..=ellipticity);
    let phase = rng.random_range(0.0..std::f64::consts::PI);
    std::array::from_fn(|k| {
        let th = std::f64::consts::TAU * k as f64 / RADII as f64;
        radius * (1.0 + e * (2.0 * (th - phase)).cos())
    })
}

struct Grower<'a> {
    cfg: &'a SynthConfig,
    rng: Rng,
    nodes: Vec<VesselNode>,
    left: Vec<Option<usize>>,
    right: Vec<Option<usize>>,
}

impl Grower<'_> {
    fn push(&mut self, node: VesselNode, parent: Option<(usize, bool)>) -> usize {
        let i = self.nodes.len();
        self.nodes.push(node);
        self.left.push(None);
        self.right.push(None);
        if let Some((p, right)) = parent {
            if right {
                self.right[p] = Some(i);
            } else {
                self.left[p] = Some(i);
            }
        }
        i
    }

    /// Grows one branch from node `start`, then recurses at its end.
    fn branch(&mut self, start: usize, slot: bool, dir: Vector3<f64>, radius: f64, depth: usize) {
        let cfg = self.cfg;
        let count = self
            .rng
            .random_range(cfg.branch_nodes.0..=cfg.branch_nodes.1);
        let mut pos = self.nodes[start].pos();
        let mut dir = dir.normalize();
        let mut noise = Vector3::zeros();
        let mut prev = start;
        for k in 0..count {
            noise = noise * 0.7 + unit_normal(&mut self.rng) * 0.3;
            let mut perturbed = dir + (noise - dir * dir.dot(&noise)) * cfg.tortuosity;
            if perturbed.norm() < 1e-9 {
                perturbed = dir;
            }
            dir = perturbed.normalize();
            pos += dir * cfg.step;
            let radii = elliptic_section(&mut self.rng, radius, cfg.ellipticity);
            let parent = Some((prev, k == 0 && slot));
            prev = self.push(VesselNode::new([pos.x, pos.y, pos.z], radii), parent);
        }
        if depth < cfg.max_depth && self.rng.random_bool(cfg.bifurcation_prob) {
            let base = radius * cfg.child_ratio();
            let asym = self.rng.random_range(0.0..0.1);
            let (big, small) = (base * (1.0 + asym), base * (1.0 - asym));
            let axis = Unit::new_normalize(
                Rotation3::from_axis_angle(
                    &Unit::new_normalize(dir),
                    self.rng.random_range(0.0..std::f64::consts::TAU),
                ) * reference_normal(&dir),
            );
            let a1 = self.rng.random_range(0.35..0.7);
            let a2 = self.rng.random_range(0.35..0.7);
            let d1 = Rotation3::from_axis_angle(&axis, a1) * dir;
            let d2 = Rotation3::from_axis_angle(&axis, -a2) * dir;
            self.branch(prev, false, d1, big, depth + 1);
            self.branch(prev, true, d2, small, depth + 1);
        }
    }
}

/// Random vessel tree: branches are smooth random walks, child radii shrink
/// by the Murray-style ratio and cross-sections are mildly elliptic. The
/// left child always carries the larger radius.
pub fn synth_tree(cfg: &SynthConfig) -> Result<VesselTree, DataError> {
    cfg.validate()?;
    let mut g = Grower {
        cfg,
        rng: crate::rng::substream(cfg.seed, "synth"),
        nodes: Vec::new(),
        left: Vec::new(),
        right: Vec::new(),
    };
    let radii = elliptic_section(&mut g.rng, cfg.root_radius, cfg.ellipticity);
    g.push(VesselNode::new([0.0; 3], radii), None);
    let dir = unit_normal(&mut g.rng);
    g.branch(0, false, dir, cfg.root_radius, 1);
    for i in 0..g.nodes.len() {
        if let (Some(l), Some(r)) = (g.left[i], g.right[i]) {
            if g.nodes[r].area() > g.nodes[l].area() {
                g.left[i] = Some(r);
                g.right[i] = Some(l);
            }
        }
    }
    Ok(VesselTree::from_links(g.nodes, g.left, g.right, 0)?)
}

/// `count` synthetic trees with per-tree seeds derived from `cfg.seed`,
/// prepared for training.
pub fn synth_corpus(
    cfg: &SynthConfig,
    count: usize,
    height_cap: usize,
) -> Result<Corpus, DataError> {
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let c = SynthConfig {
            seed: crate::rng::derive_seed(cfg.seed, &format!("tree{i}")),
            ..cfg.clone()
        };
        let tree = prepare_tree(synth_tree(&c)?, height_cap)?;
        entries.push(CorpusEntry {
            id: format!("synth_{i:04}"),
            provenance: Provenance::Synthetic,
            file: None,
            tree,
        });
    }
    Ok(Corpus {
        entries,
        height_cap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::NULL_THRESHOLD;

    #[test]
    fn depth_one_is_one_branch() {
        let cfg = SynthConfig {
            max_depth: 1,
            seed: 3,
            ..SynthConfig::default()
        };
        let t = synth_tree(&cfg).unwrap();
        assert!((0..t.len()).all(|i| t.child_count(i) <= 1));
        assert_eq!(t.branches().len(), 1);
    }

    #[test]
    fn same_seed_same_tree() {
        let cfg = SynthConfig {
            seed: 17,
            ..SynthConfig::default()
        };
        assert_eq!(synth_tree(&cfg).unwrap(), synth_tree(&cfg).unwrap());
        let other = SynthConfig {
            seed: 18,
            ..cfg.clone()
        };
        assert_ne!(synth_tree(&cfg).unwrap(), synth_tree(&other).unwrap());
    }

    #[test]
    fn murray_ratio_over_many_trees() {
        let mut ratios = Vec::new();
        for s in 0..100 {
            let cfg = SynthConfig {
                seed: s,
                max_depth: 2,
                bifurcation_prob: 1.0,
                ..SynthConfig::default()
            };
            let t = synth_tree(&cfg).unwrap();
            for i in 0..t.len() {
                if t.child_count(i) == 2 {
                    for c in t.children(i) {
                        ratios.push(t.node(c).mean_radius() / t.node(i).mean_radius());
                    }
                }
            }
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((mean - 0.794).abs() < 0.05, "{mean}");
    }

    #[test]
    fn synthetic_trees_roundtrip_and_respect_invariants() {
        let corpus = synth_corpus(&SynthConfig::default(), 20, 15).unwrap();
        for e in &corpus.entries {
            let t = &e.tree;
            assert!(t.height() <= 15);
            assert_eq!(t.node(0).position, [0.0; 3]);
            let mut back = VesselTree::deserialize(&t.serialize(), NULL_THRESHOLD).unwrap();
            back.set_normalization(t.normalization().copied());
            assert_eq!(&back, t);
            for i in 0..t.len() {
                if t.child_count(i) == 2 {
                    let (l, r) = (t.left(i).unwrap(), t.right(i).unwrap());
                    assert!(t.node(l).area() >= t.node(r).area());
                }
            }
        }
    }

    #[test]
    fn load_skips_malformed_and_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = synth_corpus(&SynthConfig::default(), 3, 20).unwrap();
        save_corpus(&corpus, dir.path()).unwrap();
        fs::write(dir.path().join("broken.json"), "{ not json").unwrap();
        let loaded = load_corpus(dir.path(), 20).unwrap();
        assert_eq!(loaded.corpus.entries.len(), 3);
        assert_eq!(loaded.skipped.len(), 1);
        for (a, b) in loaded.corpus.entries.iter().zip(&corpus.entries) {
            assert_eq!(a.tree, b.tree);
            assert_eq!(a.id, b.id);
        }
    }

    #[test]
    fn load_trims_height() {
        let dir = tempfile::tempdir().unwrap();
        let n = 25;
        let nodes: Vec<_> = (0..n)
            .map(|i| VesselNode::circular([0.0, 0.0, i as f64], 0.5))
            .collect();
        let left: Vec<_> = (0..n).map(|i| (i + 1 < n).then_some(i + 1)).collect();
        let t = VesselTree::from_links(nodes, left, vec![None; n], 0).unwrap();
        fs::write(
            dir.path().join("tall.json"),
            serde_json::to_string(&t.to_json()).unwrap(),
        )
        .unwrap();
        let loaded = load_corpus(dir.path(), 20).unwrap();
        assert_eq!(loaded.corpus.entries[0].tree.height(), 20);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_corpus(dir.path(), 20),
            Err(DataError::EmptyCorpus { .. })
        ));
    }

    #[test]
    fn splits_are_seeded_and_keep_groups() {
        let mut corpus = synth_corpus(&SynthConfig::default(), 10, 20).unwrap();
        let s = make_splits(&corpus, &[0.8, 0.2], 5).unwrap();
        assert_eq!((s[0].len(), s[1].len()), (8, 2));
        let again = make_splits(&corpus, &[0.8, 0.2], 5).unwrap();
        assert_eq!(s, again);
        augment_corpus(&mut corpus, &[0.5, 1.0], 1, 2).unwrap();
        let s = make_splits(&corpus, &[0.8, 0.2], 5).unwrap();
        for (k, split) in s.iter().enumerate() {
            for e in split {
                assert!(s[1 - k].iter().all(|o| o.group() != e.group()));
            }
        }
        assert!(matches!(
            make_splits(
                &synth_corpus(&SynthConfig::default(), 1, 20).unwrap(),
                &[0.8, 0.2],
                1
            ),
            Err(DataError::EmptySplit { .. })
        ));
    }
}
