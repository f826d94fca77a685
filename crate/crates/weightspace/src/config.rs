//! Run configuration and provenance for the command-line pipeline.
//!
//! One JSON document configures every pipeline stage; unknown keys are
//! rejected so typos fail loudly. Each stage writes a resolved copy of its
//! effective configuration plus SHA-256 hashes of its inputs next to its
//! outputs, making reruns auditable and byte-comparable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::AutoencoderConfig;
use crate::error::{Error, Result};
use crate::sample::SampleConfig;
use crate::zoo::{derive_seed, Architecture, TaskSpec, TrainSettings};

/// Friendly architecture spec for config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ArchSpec {
    Mlp {
        /// Feature extents including input and output, e.g. [2, 16, 16, 4].
        dims: Vec<usize>,
    },
    ConvBn {
        height: usize,
        width: usize,
        channels: usize,
        conv_channels: Vec<usize>,
        kernel: usize,
        classes: usize,
    },
}

impl ArchSpec {
    pub fn build(&self) -> Architecture {
        match self {
            ArchSpec::Mlp { dims } => Architecture::mlp(dims),
            ArchSpec::ConvBn {
                height,
                width,
                channels,
                conv_channels,
                kernel,
                classes,
            } => Architecture::conv_bn_net(
                *height,
                *width,
                *channels,
                conv_channels,
                *kernel,
                *classes,
            ),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZooSection {
    pub arch: ArchSpec,
    pub task: TaskSpec,
    pub n_models: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub train: TrainSettings,
    /// Alignment reference model id; defaults to the first train-split model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedSection {
    /// Inference chunk size; defaults to the training window size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ws_inf: Option<usize>,
    /// Halo width; defaults to ws/4.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub halo: Option<usize>,
}

impl Default for EmbedSection {
    fn default() -> Self {
        Self {
            ws_inf: None,
            halo: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 1e-3,
            batch_size: 32,
        }
    }
}

/// Whole-pipeline configuration; the single source of randomness is `seed`,
/// from which every stage derives its own stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub zoo: ZooSection,
    pub autoencoder: AutoencoderConfig,
    #[serde(default)]
    pub sample: SampleConfig,
    #[serde(default)]
    pub embed: EmbedSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
}

/// Stable per-stage seed streams.
pub mod streams {
    pub const ZOO: u64 = 1;
    pub const TASK: u64 = 2;
    pub const PRETRAIN: u64 = 3;
    pub const SAMPLE: u64 = 4;
    pub const FINETUNE: u64 = 5;
    pub const EVAL_DATA: u64 = 6;
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Data(format!("config file {} not found", path.display())));
        }
        let text = std::fs::read_to_string(path)?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Propagate the run seed into per-stage seeds (deterministic streams).
    fn resolve(&mut self) {
        self.zoo.task.seed = derive_seed(self.seed, streams::TASK);
        self.autoencoder.seed = derive_seed(self.seed, streams::PRETRAIN);
        self.sample.seed = derive_seed(self.seed, streams::SAMPLE);
    }

    fn validate(&self) -> Result<()> {
        if self.zoo.n_models < 10 {
            return Err(Error::Config("zoo.n_models: need at least 10 models".into()));
        }
        if self.autoencoder.d_t == 0 {
            return Err(Error::Config("autoencoder.d_t: must be positive".into()));
        }
        self.sample.validate()?;
        Ok(())
    }

    // canonical stage output directories
    pub fn zoo_dir(&self) -> PathBuf {
        self.out_dir.join("zoo")
    }
    pub fn aligned_dir(&self) -> PathBuf {
        self.out_dir.join("zoo_aligned")
    }
    pub fn autoencoder_dir(&self) -> PathBuf {
        self.out_dir.join("autoencoder")
    }
    pub fn embeddings_dir(&self) -> PathBuf {
        self.out_dir.join("embeddings")
    }
    pub fn probe_dir(&self) -> PathBuf {
        self.out_dir.join("probe")
    }
    pub fn analyze_dir(&self) -> PathBuf {
        self.out_dir.join("analyze")
    }
    pub fn sample_dir(&self) -> PathBuf {
        self.out_dir.join("sample")
    }
    pub fn finetune_dir(&self) -> PathBuf {
        self.out_dir.join("finetune")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.out_dir.join("report")
    }
}

/// SHA-256 of a file's bytes, hex-encoded.
pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Content hash of a file or directory: files are hashed directly;
/// directories hash (relative path, file hash) pairs in sorted order.
pub fn hash_artifact(path: &Path) -> Result<String> {
    if path.is_file() {
        return hash_file(path);
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in files {
        hasher.update(rel.as_bytes());
        hasher.update(b"\0");
        hasher.update(hash_file(&path.join(&rel))?.as_bytes());
        hasher.update(b"\n");
    }
    Ok(hex(&hasher.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let p = entry.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(
                p.strip_prefix(root)
                    .expect("entry under root")
                    .to_string_lossy()
                    .into_owned(),
            );
        }
    }
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub config_hash: String,
    /// (artifact path, content hash) for each input the stage consumed.
    pub inputs: Vec<(String, String)>,
}

/// Write the resolved stage config and input provenance into `dir`.
pub fn write_stage_metadata(
    dir: &Path,
    stage: &str,
    config: &RunConfig,
    inputs: &[&Path],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let resolved = serde_json::to_string_pretty(config)?;
    std::fs::write(dir.join("resolved_config.json"), &resolved)?;
    let provenance = Provenance {
        stage: stage.to_string(),
        config_hash: hex(&Sha256::digest(resolved.as_bytes())),
        inputs: inputs
            .iter()
            .map(|p| Ok((p.to_string_lossy().into_owned(), hash_artifact(p)?)))
            .collect::<Result<_>>()?,
    };
    std::fs::write(
        dir.join("provenance.json"),
        serde_json::to_string_pretty(&provenance)?,
    )?;
    Ok(())
}
