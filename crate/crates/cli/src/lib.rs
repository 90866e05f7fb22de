//! Pipeline stages behind the `vesselgpt` binary. Every stage reads and
//! writes below the run directory and refreshes `manifest.json` there.

pub mod config;
pub mod manifest;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vesselgpt::data::{self, Corpus, CorpusEntry};
use vesselgpt::gpt::{self, GptEpochStats, RejectReason, TokenSequence};
use vesselgpt::meshing::{self, TriMesh};
use vesselgpt::metrics::{self, MetricReport};
use vesselgpt::rng::derive_seed;
use vesselgpt::tensor::{read_checkpoint, Resume};
use vesselgpt::tree::{TreeJson, NULL_THRESHOLD};
use vesselgpt::vqvae::{self, EpochStats, Evaluation};
use vesselgpt::{Gpt, VesselTree, VqVae};

pub use config::PipelineConfig;

/// Fixed layout of a run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Self {
            root: cfg.run_dir.clone(),
        }
    }

    pub fn train_trees(&self) -> PathBuf {
        self.root.join("dataset/train")
    }
    pub fn val_trees(&self) -> PathBuf {
        self.root.join("dataset/val")
    }
    pub fn dataset_stats(&self) -> PathBuf {
        self.root.join("dataset/stats.json")
    }
    pub fn vq_checkpoint(&self) -> PathBuf {
        self.root.join("vqvae/model.ckpt")
    }
    pub fn vq_log(&self) -> PathBuf {
        self.root.join("vqvae/log.csv")
    }
    pub fn vq_eval(&self) -> PathBuf {
        self.root.join("vqvae/eval.json")
    }
    pub fn train_tokens(&self) -> PathBuf {
        self.root.join("tokens/train.jsonl")
    }
    pub fn val_tokens(&self) -> PathBuf {
        self.root.join("tokens/val.jsonl")
    }
    pub fn gpt_checkpoint(&self) -> PathBuf {
        self.root.join("gpt/model.ckpt")
    }
    pub fn gpt_log(&self) -> PathBuf {
        self.root.join("gpt/log.csv")
    }
    pub fn gpt_eval(&self) -> PathBuf {
        self.root.join("gpt/eval.json")
    }
    pub fn generated_trees(&self) -> PathBuf {
        self.root.join("generated/trees")
    }
    pub fn generated_tokens(&self) -> PathBuf {
        self.root.join("generated/tokens.jsonl")
    }
    pub fn generate_report(&self) -> PathBuf {
        self.root.join("generated/report.json")
    }
    pub fn generated_meshes(&self) -> PathBuf {
        self.root.join("meshes/generated")
    }
    pub fn reference_meshes(&self) -> PathBuf {
        self.root.join("meshes/reference")
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    create_parent(path)?;
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Removes and recreates `dir`.
fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn finish(cfg: &PipelineConfig) -> Result<()> {
    manifest::refresh(&cfg.run_dir)?;
    Ok(())
}

/// Tree JSON files of a directory as `(stem, tree)`, sorted by file name.
/// The corpus `manifest.json` is not a tree and is skipped.
pub fn read_tree_dir(dir: &Path) -> Result<Vec<(String, VesselTree)>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && p.file_name() != Some("manifest.json".as_ref())
        })
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let j: TreeJson = read_json(&p)?;
            let tree = VesselTree::from_json(&j).with_context(|| format!("in {}", p.display()))?;
            Ok((stem(&p), tree))
        })
        .collect()
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .expect("file stem")
        .to_string_lossy()
        .into_owned()
}

pub fn read_tokens(path: &Path) -> Result<Vec<TokenSequence>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1))
        })
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    write_file(path, s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub trees: usize,
    pub nodes: usize,
    pub dir: PathBuf,
}

/// Writes a synthetic corpus to the corpus directory.
pub fn cmd_synth(cfg: &PipelineConfig) -> Result<SynthSummary> {
    let gen = vesselgpt::SynthConfig {
        seed: derive_seed(cfg.seed, "synth"),
        ..cfg.synth.generator.clone()
    };
    let corpus = data::synth_corpus(&gen, cfg.synth.count, cfg.data.height_cap)?;
    let dir = cfg.corpus_dir();
    fresh_dir(&dir)?;
    data::save_corpus(&corpus, &dir)?;
    let summary = SynthSummary {
        trees: corpus.entries.len(),
        nodes: corpus.entries.iter().map(|e| e.tree.len()).sum(),
        dir,
    };
    log::info!(
        "synthesized {} trees ({} nodes)",
        summary.trees,
        summary.nodes
    );
    finish(cfg)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitStats {
    pub trees: usize,
    pub nodes: usize,
    /// Null markers in the serialized sequences.
    pub markers: usize,
    pub augmented: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub loaded: usize,
    pub skipped: Vec<String>,
    pub augmented: usize,
    pub train: SplitStats,
    pub val: SplitStats,
}

fn split_stats(entries: &[CorpusEntry]) -> SplitStats {
    let mut s = SplitStats::default();
    for e in entries {
        s.trees += 1;
        s.nodes += e.tree.len();
        s.markers += vqvae::marker_count(&e.tree.serialize(), NULL_THRESHOLD);
        if matches!(e.provenance, data::Provenance::Augmented { .. }) {
            s.augmented += 1;
        }
    }
    s
}

/// Loads, augments and splits the corpus into the train/val datasets.
pub fn cmd_preprocess(cfg: &PipelineConfig) -> Result<DatasetStats> {
    let layout = Layout::new(cfg);
    let loaded = data::load_corpus(&cfg.corpus_dir(), cfg.data.height_cap)?;
    for s in &loaded.skipped {
        log::warn!("skipped {s}");
    }
    let count = loaded.corpus.entries.len();
    let mut corpus = loaded.corpus;
    let augmented = if cfg.data.augment {
        data::augment_corpus(
            &mut corpus,
            &cfg.data.rates,
            cfg.data.rotations,
            derive_seed(cfg.seed, "augment"),
        )?
    } else {
        0
    };
    let v = cfg.data.val_fraction;
    let (train, val) = if v > 0.0 {
        let mut s = data::make_splits(&corpus, &[1.0 - v, v], derive_seed(cfg.seed, "splits"))?;
        let val = s.pop().expect("two splits");
        (s.pop().expect("two splits"), val)
    } else {
        (corpus.entries.clone(), Vec::new())
    };
    for (dir, entries) in [(layout.train_trees(), &train), (layout.val_trees(), &val)] {
        fresh_dir(&dir)?;
        let part = Corpus {
            entries: entries.clone(),
            height_cap: corpus.height_cap,
        };
        data::save_corpus(&part, &dir)?;
    }
    let stats = DatasetStats {
        loaded: count,
        skipped: loaded.skipped,
        augmented,
        train: split_stats(&train),
        val: split_stats(&val),
    };
    write_json(&layout.dataset_stats(), &stats)?;
    finish(cfg)?;
    Ok(stats)
}

fn dataset(dir: &Path) -> Result<Vec<(String, VesselTree)>> {
    if !dir.exists() {
        bail!("{} missing; run `preprocess` first", dir.display());
    }
    read_tree_dir(dir)
}

fn epochs_done(ck: &vesselgpt::tensor::Checkpoint) -> Result<usize> {
    ck.meta["extra"]["epochs_done"]
        .as_u64()
        .map(|e| e as usize)
        .context("checkpoint does not record epochs_done")
}

/// Keeps the CSV header and the first `rows` data rows of a previous log.
fn log_prefix(path: &Path, rows: usize) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let lines: Vec<String> = text.lines().map(str::to_string).collect();
    if lines.len() < rows + 1 {
        bail!("{} has fewer than {rows} epochs", path.display());
    }
    Ok(lines[..=rows].to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqSummary {
    pub epochs_done: usize,
    pub stopped_early: bool,
    pub train: Evaluation,
    pub val: Option<Evaluation>,
}

/// Trains the VQ-VAE on the train split and tokenizes both splits.
pub fn cmd_train_vqvae(cfg: &PipelineConfig, resume: bool) -> Result<VqSummary> {
    let layout = Layout::new(cfg);
    let train: Vec<(String, VesselTree)> = dataset(&layout.train_trees())?;
    let val: Vec<(String, VesselTree)> = dataset(&layout.val_trees())?;
    let trees: Vec<VesselTree> = train.iter().map(|(_, t)| t.clone()).collect();
    let ck_path = layout.vq_checkpoint();

    let (mut model, state, mut log) = if resume && ck_path.exists() {
        let ck = read_checkpoint(&ck_path)?;
        let (model, adam) = VqVae::from_checkpoint(&ck)?;
        if model.config != cfg.vqvae.model {
            bail!("checkpoint model config differs from vqvae.model");
        }
        let done = epochs_done(&ck)?;
        let adam = adam.context("checkpoint has no optimizer state to resume from")?;
        log::info!("resuming VQ-VAE after epoch {done} (step {})", adam.step);
        let log = log_prefix(&layout.vq_log(), done)?;
        (
            model,
            Some(Resume {
                adam,
                epochs_done: done,
            }),
            log,
        )
    } else {
        let model = VqVae::new(cfg.vqvae.model.clone(), derive_seed(cfg.seed, "vqvae.init"))?;
        (
            model,
            None,
            vec!["epoch,loss,reconstruction,perplexity,codes_used,reseeded".to_string()],
        )
    };
    let start = state.as_ref().map_or(0, |r| r.epochs_done);
    let (report, adam) = vqvae::train(
        &mut model,
        &trees,
        &cfg.vqvae.train,
        derive_seed(cfg.seed, "vqvae.train"),
        state,
        |e: &EpochStats| {
            if e.epoch.is_multiple_of(50) {
                log::info!(
                    "vqvae epoch {}: loss {:.5} recon {:.5}",
                    e.epoch,
                    e.loss,
                    e.reconstruction
                );
            }
        },
    )?;
    for e in &report.epochs {
        log.push(format!(
            "{},{},{},{},{},{}",
            e.epoch, e.loss, e.reconstruction, e.perplexity, e.codes_used, e.reseeded
        ));
    }
    let done = start + report.epochs.len();
    create_parent(&ck_path)?;
    model.save(
        &ck_path,
        Some(&adam),
        serde_json::json!({ "epochs_done": done, "stopped_early": report.stopped_early }),
    )?;
    write_file(&layout.vq_log(), log.join("\n") + "\n")?;

    let thr = cfg.vqvae.train.null_threshold;
    let val_trees: Vec<VesselTree> = val.iter().map(|(_, t)| t.clone()).collect();
    let summary = VqSummary {
        epochs_done: done,
        stopped_early: report.stopped_early,
        train: vqvae::evaluate(&model, &trees, thr)?,
        val: if val_trees.is_empty() {
            None
        } else {
            Some(vqvae::evaluate(&model, &val_trees, thr)?)
        },
    };
    write_json(&layout.vq_eval(), &summary)?;
    for (path, set) in [(layout.train_tokens(), &train), (layout.val_tokens(), &val)] {
        let rows = set
            .iter()
            .map(|(id, t)| {
                Ok(TokenSequence {
                    tree_id: id.clone(),
                    indices: model.tokenize(&t.serialize())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_jsonl(&path, &rows)?;
    }
    finish(cfg)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GptSummary {
    pub epochs_done: usize,
    pub memorized_at: Option<usize>,
    pub memorized: bool,
    pub train_perplexity: f64,
    pub val_perplexity: Option<f64>,
}

fn vq_codebook_size(layout: &Layout) -> Result<usize> {
    let ck = read_checkpoint(&layout.vq_checkpoint())
        .context("reading the VQ-VAE checkpoint; run `train-vqvae` first")?;
    Ok(VqVae::from_checkpoint(&ck)?.0.config.codebook_size)
}

/// Trains the transformer on the train token corpus.
pub fn cmd_train_gpt(cfg: &PipelineConfig, resume: bool) -> Result<GptSummary> {
    let layout = Layout::new(cfg);
    let k = vq_codebook_size(&layout)?;
    if k != cfg.gpt.model.codebook_size {
        bail!(
            "configuration error: VQ-VAE checkpoint has K = {k} but gpt.model.codebook_size is {}",
            cfg.gpt.model.codebook_size
        );
    }
    let train = read_tokens(&layout.train_tokens())?;
    let val_path = layout.val_tokens();
    let val = if val_path.exists() {
        read_tokens(&val_path)?
    } else {
        Vec::new()
    };
    let ck_path = layout.gpt_checkpoint();

    let (mut model, state, mut log) = if resume && ck_path.exists() {
        let ck = read_checkpoint(&ck_path)?;
        let (model, adam) = Gpt::from_checkpoint(&ck)?;
        if model.config != cfg.gpt.model {
            bail!("checkpoint model config differs from gpt.model");
        }
        let done = epochs_done(&ck)?;
        let adam = adam.context("checkpoint has no optimizer state to resume from")?;
        log::info!("resuming GPT after epoch {done} (step {})", adam.step);
        let log = log_prefix(&layout.gpt_log(), done)?;
        (
            model,
            Some(Resume {
                adam,
                epochs_done: done,
            }),
            log,
        )
    } else {
        let model = Gpt::new(cfg.gpt.model.clone(), derive_seed(cfg.seed, "gpt.init"))?;
        (model, None, vec!["epoch,loss,perplexity".to_string()])
    };
    let start = state.as_ref().map_or(0, |r| r.epochs_done);
    let (report, adam) = gpt::train(
        &mut model,
        &train,
        &cfg.gpt.train,
        derive_seed(cfg.seed, "gpt.train"),
        state,
        |e: &GptEpochStats| {
            if e.epoch.is_multiple_of(10) {
                log::info!(
                    "gpt epoch {}: nll {:.5} ppl {:.4}",
                    e.epoch,
                    e.loss,
                    e.perplexity
                );
            }
        },
    )?;
    for e in &report.epochs {
        log.push(format!("{},{},{}", e.epoch, e.loss, e.perplexity));
    }
    let done = start + report.epochs.len();
    create_parent(&ck_path)?;
    model.save(
        &ck_path,
        Some(&adam),
        serde_json::json!({ "epochs_done": done, "memorized_at": report.memorized_at }),
    )?;
    write_file(&layout.gpt_log(), log.join("\n") + "\n")?;

    let forms = |s: &[TokenSequence]| -> Vec<Vec<usize>> {
        s.iter().map(|t| t.training_form(&model.config)).collect()
    };
    let train_forms = forms(&train);
    let summary = GptSummary {
        epochs_done: done,
        memorized_at: report.memorized_at,
        memorized: gpt::is_memorized(&model, &train_forms)?,
        train_perplexity: gpt::perplexity(&model, &train_forms)?,
        val_perplexity: if val.is_empty() {
            None
        } else {
            Some(gpt::perplexity(&model, &forms(&val))?)
        },
    };
    write_json(&layout.gpt_eval(), &summary)?;
    finish(cfg)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub seed: u64,
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub accepted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reject: Option<RejectReason>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Training tree whose token sequence this sample reproduces exactly.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matches_training: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nodes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateReport {
    pub requested: usize,
    pub accepted: usize,
    pub acceptance_rate: f64,
    pub rejects: BTreeMap<RejectReason, usize>,
    pub reject_rates: BTreeMap<RejectReason, f64>,
    pub samples: Vec<SampleRecord>,
}

/// Samples `n` sequences and decodes the valid ones to tree files.
pub fn cmd_generate(cfg: &PipelineConfig, n: usize) -> Result<GenerateReport> {
    let layout = Layout::new(cfg);
    let vq = VqVae::load(&layout.vq_checkpoint()).context("loading the VQ-VAE checkpoint")?;
    let model = Gpt::load(&layout.gpt_checkpoint()).context("loading the GPT checkpoint")?;
    if vq.config.codebook_size != model.config.codebook_size {
        bail!(
            "configuration error: VQ-VAE codebook has K = {} but the GPT was trained for K = {}",
            vq.config.codebook_size,
            model.config.codebook_size
        );
    }
    let known: BTreeMap<Vec<usize>, String> = if layout.train_tokens().exists() {
        read_tokens(&layout.train_tokens())?
            .into_iter()
            .map(|t| (t.training_form(&model.config), t.tree_id))
            .collect()
    } else {
        BTreeMap::new()
    };
    let out = layout.generated_trees();
    fresh_dir(&out)?;
    let thr = cfg.vqvae.train.null_threshold;
    let mut samples = Vec::with_capacity(n);
    let mut rejects: BTreeMap<RejectReason, usize> = BTreeMap::new();
    for index in 0..n {
        let seed = derive_seed(cfg.seed, &format!("generate.{index}"));
        let sampler = vesselgpt::SamplerConfig {
            seed,
            ..cfg.generate.sampler.clone()
        };
        let g = gpt::generate(&model, &sampler)?;
        let mut rec = SampleRecord {
            index,
            seed,
            tokens: g.tokens.clone(),
            log_prob: g.log_prob,
            accepted: false,
            reject: None,
            error: None,
            matches_training: known.get(&g.tokens).cloned(),
            nodes: None,
        };
        let decoded = if g.truncated {
            Err((
                RejectReason::Truncated,
                "reached max_tokens without END".to_string(),
            ))
        } else {
            gpt::tokens_to_tree(
                &g.tokens,
                &model.config,
                &vq,
                cfg.generate.length_policy,
                thr,
            )
            .map_err(|e| (RejectReason::of(&e), e.to_string()))
            .and_then(|t| match t.validate() {
                Ok(()) => Ok(t),
                Err(e) => Err((RejectReason::MalformedTree, e.to_string())),
            })
        };
        match decoded {
            Ok(tree) => {
                rec.accepted = true;
                rec.nodes = Some(tree.len());
                write_json(
                    &out.join(format!("sample_{index:04}.json")),
                    &tree.to_json(),
                )?;
            }
            Err((reason, msg)) => {
                log::warn!("sample {index} rejected ({reason:?}): {msg}");
                *rejects.entry(reason).or_default() += 1;
                rec.reject = Some(reason);
                rec.error = Some(msg);
            }
        }
        samples.push(rec);
    }
    write_jsonl(&layout.generated_tokens(), &samples)?;
    let accepted = samples.iter().filter(|s| s.accepted).count();
    let rate = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    let report = GenerateReport {
        requested: n,
        accepted,
        acceptance_rate: rate(accepted),
        reject_rates: rejects.iter().map(|(&k, &c)| (k, rate(c))).collect(),
        rejects,
        samples,
    };
    write_json(&layout.generate_report(), &report)?;
    finish(cfg)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshRecord {
    pub tree: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    pub vertices: usize,
    pub triangles: usize,
    pub watertight: bool,
    pub euler: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshSummary {
    pub resolution: usize,
    pub meshed: usize,
    pub failed: usize,
    pub records: Vec<MeshRecord>,
}

fn mesh_one(name: &str, tree: &VesselTree, n: usize, out: &Path) -> MeshRecord {
    let failed = |error: String| MeshRecord {
        tree: name.to_string(),
        file: None,
        vertices: 0,
        triangles: 0,
        watertight: false,
        euler: 0,
        error: Some(error),
    };
    match meshing::mesh_tree(tree, n) {
        Ok(r) if r.mesh.is_empty() => failed("empty field: no surface crossing on the grid".into()),
        Ok(r) => {
            let file = format!("{name}.obj");
            match meshing::export_obj(&r.mesh, &out.join(&file)) {
                Ok(()) => MeshRecord {
                    tree: name.to_string(),
                    file: Some(file),
                    vertices: r.mesh.vertices.len(),
                    triangles: r.mesh.triangles.len(),
                    watertight: r.watertight,
                    euler: r.euler,
                    error: None,
                },
                Err(e) => failed(e.to_string()),
            }
        }
        Err(e) => failed(e.to_string()),
    }
}

/// Runs `f` over `items` on all available cores, keeping input order.
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut out: Vec<(usize, R)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut mine = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        if i >= items.len() {
                            break mine;
                        }
                        mine.push((i, f(&items[i])));
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    out.sort_by_key(|(i, _)| *i);
    out.into_iter().map(|(_, r)| r).collect()
}

/// Meshes every tree file of `trees` into `out`, one OBJ per tree. Failures
/// are recorded and the run continues.
pub fn cmd_mesh(cfg: &PipelineConfig, trees: &Path, out: &Path) -> Result<MeshSummary> {
    let items = read_tree_dir(trees)?;
    fresh_dir(out)?;
    let n = cfg.mesh.resolution;
    let records = par_map(&items, |(name, tree)| mesh_one(name, tree, n, out));
    for r in &records {
        match &r.error {
            Some(e) => log::warn!("{}: meshing failed: {e}", r.tree),
            None if !r.watertight => log::warn!("{}: mesh is not watertight", r.tree),
            None => {}
        }
    }
    let summary = MeshSummary {
        resolution: n,
        meshed: records.iter().filter(|r| r.error.is_none()).count(),
        failed: records.iter().filter(|r| r.error.is_some()).count(),
        records,
    };
    write_json(&out.join("report.json"), &summary)?;
    finish(cfg)?;
    Ok(summary)
}

/// Meshes the generated samples and the training reference set.
pub fn cmd_mesh_all(cfg: &PipelineConfig) -> Result<(MeshSummary, MeshSummary)> {
    let layout = Layout::new(cfg);
    let g = cmd_mesh(cfg, &layout.generated_trees(), &layout.generated_meshes())?;
    let r = cmd_mesh(cfg, &layout.train_trees(), &layout.reference_meshes())?;
    Ok((g, r))
}

/// Inputs of one side of an evaluation.
#[derive(Debug, Clone)]
pub struct EvalSide {
    pub trees: PathBuf,
    pub meshes: PathBuf,
}

fn load_side(
    side: &EvalSide,
    cfg: &PipelineConfig,
) -> Result<(Vec<metrics::PointCloud>, Vec<VesselTree>)> {
    let trees = read_tree_dir(&side.trees)?;
    let mut clouds = Vec::new();
    for (name, _) in &trees {
        let obj = side.meshes.join(format!("{name}.obj"));
        if !obj.exists() {
            log::warn!(
                "{name}: no mesh in {}, left out of point metrics",
                side.meshes.display()
            );
            continue;
        }
        let mesh: TriMesh = meshing::import_obj(&obj)?;
        let seed = derive_seed(cfg.seed, &format!("evaluate.{name}"));
        clouds.push(metrics::sample_points(&mesh, cfg.metrics.points, seed)?);
    }
    Ok((clouds, trees.into_iter().map(|(_, t)| t).collect()))
}

/// Point-cloud and vascular metrics of `generated` against `reference`.
pub fn cmd_evaluate(
    cfg: &PipelineConfig,
    generated: &EvalSide,
    reference: &EvalSide,
    out: &Path,
) -> Result<MetricReport> {
    let (gc, gt) = load_side(generated, cfg)?;
    let (rc, rt) = load_side(reference, cfg)?;
    if gc.len() < 2 || rc.len() < 2 {
        bail!(
            "need at least two meshes per side for 1-NNA (generated {}, reference {})",
            gc.len(),
            rc.len()
        );
    }
    let report = MetricReport::compute(&gc, &rc, &gt, &rt, cfg.metrics.bins)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("report.json"), &report)?;
    write_file(&out.join("report.txt"), report.to_table())?;
    write_file(&out.join("tortuosity_hist.csv"), report.tortuosity.to_csv())?;
    write_file(&out.join("length_hist.csv"), report.length.to_csv())?;
    finish(cfg)?;
    Ok(report)
}

/// Evaluates the run's generated meshes against its reference meshes.
pub fn cmd_evaluate_run(cfg: &PipelineConfig) -> Result<MetricReport> {
    let layout = Layout::new(cfg);
    let generated = EvalSide {
        trees: layout.generated_trees(),
        meshes: layout.generated_meshes(),
    };
    let reference = EvalSide {
        trees: layout.train_trees(),
        meshes: layout.reference_meshes(),
    };
    cmd_evaluate(cfg, &generated, &reference, &layout.eval_dir())
}

/// Every stage in order, starting from a synthetic corpus unless
/// `paths.corpus` points at existing data.
pub fn cmd_pipeline(cfg: &PipelineConfig) -> Result<MetricReport> {
    if cfg.paths.corpus.is_none() {
        cmd_synth(cfg)?;
    }
    cmd_preprocess(cfg)?;
    cmd_train_vqvae(cfg, false)?;
    cmd_train_gpt(cfg, false)?;
    cmd_generate(cfg, cfg.generate.count)?;
    cmd_mesh_all(cfg)?;
    cmd_evaluate_run(cfg)
}
