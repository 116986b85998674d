//! The pipeline configuration file: one TOML document holding every module's
//! settings, validated across modules at load time.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::MelConfig;
use crate::codebook::ClusterConfig;
use crate::data::PrepConfig;
use crate::error::{Error, Result};
use crate::sfen::SfenConfig;
use crate::training::TrainConfig;
use crate::tts::{FtsConfig, PriorInput, TtsConfig};

/// Environment variable that replaces `paths.work_dir`.
pub const WORK_DIR_ENV: &str = "ELF_WORK_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    /// Root that manifest-relative audio paths resolve against.
    pub data_root: PathBuf,
    /// Manifest location, relative to `data_root` unless absolute.
    pub manifest: PathBuf,
    pub work_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data"),
            manifest: PathBuf::from("manifest.jsonl"),
            work_dir: PathBuf::from("work"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookSettings {
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for CodebookSettings {
    fn default() -> Self {
        let c = ClusterConfig::default();
        Self {
            k: c.k,
            seed: c.seed,
            restarts: c.restarts,
            max_iters: c.max_iters,
            tol: c.tol,
        }
    }
}

impl CodebookSettings {
    pub fn cluster_config(&self) -> ClusterConfig {
        ClusterConfig {
            k: self.k,
            max_iters: self.max_iters,
            tol: self.tol,
            restarts: self.restarts,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSettings {
    /// Leading and trailing audio quieter than this, relative to the peak,
    /// is trimmed.
    pub trim_db: f64,
}

impl Default for PreprocessSettings {
    fn default() -> Self {
        Self { trim_db: -40.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub audio: MelConfig,
    pub preprocess: PreprocessSettings,
    pub sfen: SfenConfig,
    pub tts: TtsConfig,
    pub fts: FtsConfig,
    pub codebook: CodebookSettings,
    pub paths: Paths,
    pub training: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl PipelineConfig {
    /// Desk-scale settings: 22.05 kHz, hop 256, 64-dim latents.
    pub fn toy() -> Self {
        Self {
            audio: MelConfig {
                fft_size: 1024,
                window_size: 1024,
                hop_size: 256,
                ..MelConfig::default()
            },
            preprocess: PreprocessSettings::default(),
            sfen: SfenConfig::toy(),
            tts: TtsConfig::toy(),
            fts: TtsConfig::fts_toy(),
            codebook: CodebookSettings::default(),
            paths: Paths::default(),
            training: TrainConfig::default(),
        }
    }

    /// Full-size model dimensions.
    pub fn paper() -> Self {
        let tts = TtsConfig::paper();
        Self {
            audio: MelConfig::default(),
            preprocess: PreprocessSettings::default(),
            sfen: SfenConfig::paper(),
            fts: TtsConfig {
                prior_input: PriorInput::Codebook,
                ..tts.clone()
            },
            tts,
            codebook: CodebookSettings {
                k: 512,
                ..CodebookSettings::default()
            },
            paths: Paths::default(),
            training: TrainConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.audio.validate()?;
        self.sfen.validate(&self.audio)?;
        self.tts.validate(&self.audio)?;
        self.fts.validate(&self.audio)?;
        self.training.validate()?;
        if self.tts.prior_input != PriorInput::Text {
            return Err(Error::Config("tts.prior_input must be `text`".into()));
        }
        if self.fts.prior_input != PriorInput::Codebook {
            return Err(Error::Config("fts.prior_input must be `codebook`".into()));
        }
        for (name, h) in [("tts", self.tts.latent_dim), ("fts", self.fts.latent_dim)] {
            if h != self.sfen.latent_dim {
                return Err(Error::Config(format!(
                    "{name}.latent_dim {h} differs from sfen.latent_dim {}",
                    self.sfen.latent_dim
                )));
            }
        }
        if self.codebook.k == 0 || self.codebook.restarts == 0 {
            return Err(Error::Config(
                "codebook.k and codebook.restarts must be positive".into(),
            ));
        }
        if !(self.preprocess.trim_db < 0.0) {
            return Err(Error::Config("preprocess.trim_db must be negative".into()));
        }
        Ok(())
    }

    /// Parse TOML, apply `key.path=value` overrides, validate.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Replace `paths.work_dir` by `value` when given.
    pub fn with_work_dir_override(mut self, value: Option<&str>) -> Self {
        if let Some(v) = value.filter(|v| !v.is_empty()) {
            self.paths.work_dir = PathBuf::from(v);
        }
        self
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.paths.data_root.join(&self.paths.manifest)
    }

    pub fn prep_config(&self) -> PrepConfig {
        PrepConfig {
            mel: self.audio.clone(),
            trim_db: self.preprocess.trim_db,
        }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.paths.work_dir.join("dataset")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.paths.work_dir.join("checkpoints")
    }

    pub fn codebook_dir(&self) -> PathBuf {
        self.paths.work_dir.join("codebooks")
    }

    pub fn codebook_path(&self, speaker_id: &str) -> PathBuf {
        self.codebook_dir().join(format!("{speaker_id}.elfc"))
    }

    pub fn loss_log_path(&self, kind: crate::checkpoint::ModelKind) -> PathBuf {
        self.paths
            .work_dir
            .join("logs")
            .join(format!("{kind}.jsonl"))
    }
}

/// Set the leaf at a dotted path. The value is read as a TOML literal when
/// it parses as one and as a bare string otherwise.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not `key=value`")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override key `{path}`")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (leaf, parents) = keys.split_last().expect("non-empty");
    let mut node = root;
    for k in parents {
        node = node
            .as_table_mut()
            .and_then(|t| t.get_mut(*k))
            .ok_or_else(|| Error::Config(format!("unknown config section `{path}`")))?;
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("`{path}` does not name a table entry")))?;
    if !table.contains_key(*leaf) {
        return Err(Error::Config(format!("unknown config key `{path}`")));
    }
    table.insert(leaf.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = PipelineConfig::toy();
        c.validate().unwrap();
        let back = PipelineConfig::from_toml(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, c);
        PipelineConfig::paper().validate().unwrap();
    }

    #[test]
    fn overrides() {
        let text = PipelineConfig::toy().to_toml().unwrap();
        let c = PipelineConfig::from_toml(
            &text,
            &[
                "training.optimizer.lr=0.001".into(),
                "paths.work_dir=/tmp/w".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.training.optimizer.lr, 0.001);
        assert_eq!(c.paths.work_dir, PathBuf::from("/tmp/w"));
        assert!(PipelineConfig::from_toml(&text, &["training.nope=1".into()]).is_err());
        assert!(PipelineConfig::from_toml(&text, &["training.batch_size".into()]).is_err());
    }
}
