//! Declarative pipeline configuration, read from a single TOML file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vesselgpt::gpt::{GptTrainConfig, LengthPolicy};
use vesselgpt::vqvae::VqTrainConfig;
use vesselgpt::{GptConfig, SamplerConfig, SynthConfig, VqConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root of every random stream in the pipeline.
    pub seed: u64,
    /// Every output lands below this directory.
    pub run_dir: PathBuf,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub vqvae: VqSection,
    #[serde(default)]
    pub gpt: GptSection,
    #[serde(default)]
    pub generate: GenerateSection,
    #[serde(default)]
    pub mesh: MeshSection,
    #[serde(default)]
    pub metrics: MetricsSection,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory of tree JSON files; `<run_dir>/corpus` when unset.
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub count: usize,
    /// The generator seed is derived from the global seed; the value here
    /// is ignored.
    pub generator: SynthConfig,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            count: 12,
            generator: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub height_cap: usize,
    pub augment: bool,
    pub rates: Vec<f64>,
    pub rotations: usize,
    pub val_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            height_cap: 20,
            augment: true,
            rates: vec![0.5, 0.75, 1.0],
            rotations: 1,
            val_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqSection {
    pub model: VqConfig,
    pub train: VqTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GptSection {
    pub model: GptConfig,
    pub train: GptTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub count: usize,
    pub length_policy: LengthPolicy,
    /// Per-sample seeds are derived from the global seed; `sampler.seed` is
    /// ignored.
    pub sampler: SamplerConfig,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            count: 20,
            length_policy: LengthPolicy::Reject,
            sampler: SamplerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshSection {
    /// Grid cells along the longest bounding-box axis.
    pub resolution: usize,
}

impl Default for MeshSection {
    fn default() -> Self {
        Self { resolution: 128 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub points: usize,
    pub bins: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            points: 1000,
            bins: vesselgpt::metrics::DEFAULT_BINS,
        }
    }
}

impl PipelineConfig {
    pub fn new(seed: u64, run_dir: impl Into<PathBuf>) -> Self {
        Self {
            seed,
            run_dir: run_dir.into(),
            paths: Paths::default(),
            synth: SynthSection::default(),
            data: DataSection::default(),
            vqvae: VqSection::default(),
            gpt: GptSection::default(),
            generate: GenerateSection::default(),
            mesh: MeshSection::default(),
            metrics: MetricsSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing pipeline config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.run_dir = base.join(&cfg.run_dir);
        if let Some(c) = &cfg.paths.corpus {
            cfg.paths.corpus = Some(base.join(c));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.vqvae.model.validate()?;
        self.gpt.model.validate()?;
        self.synth.generator.validate()?;
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            bail!("data.val_fraction must lie in [0, 1)");
        }
        if self.data.augment && self.data.rates.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            bail!("data.rates must lie in (0, 1]");
        }
        if self.gpt.model.codebook_size != self.vqvae.model.codebook_size {
            bail!(
                "gpt.model.codebook_size ({}) differs from vqvae.model.codebook_size ({})",
                self.gpt.model.codebook_size,
                self.vqvae.model.codebook_size
            );
        }
        if self.mesh.resolution < 4 {
            bail!("mesh.resolution must be at least 4");
        }
        if self.metrics.points == 0 || self.metrics.bins == 0 {
            bail!("metrics.points and metrics.bins must be positive");
        }
        Ok(())
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.paths
            .corpus
            .clone()
            .unwrap_or_else(|| self.run_dir.join("corpus"))
    }
}
