//! Pipeline configuration file and its content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vox2p1d::cv::CvConfig;
use vox2p1d::decomposition::ExtractorDescriptor;
use vox2p1d::eval::FusionScheme;
use vox2p1d::net1d::TrainConfig;
use vox2p1d::pooling::{ChannelSelection, SelectionRule};
use vox2p1d::{Error, Result};

/// Where per-slice feature maps come from. Exactly one source per config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ExtractorSource {
    /// Deterministic stand-in extractor.
    Stub { seed: u64, descriptor: ExtractorDescriptor },
    /// Precomputed `{subject}_{metric}_{view}_{k}.v21t` files.
    Import {
        dir: PathBuf,
        #[serde(default)]
        out_dims: Option<(usize, usize, usize)>,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub skip_decomposition: bool,
    pub skip_global_pooling: bool,
    pub skip_fusion: bool,
    pub skip_net1d: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Dataset manifest; relative paths resolve against the config file.
    pub manifest: PathBuf,
    pub extractor: ExtractorSource,
    #[serde(default)]
    pub selection: SelectionRule,
    #[serde(default)]
    pub channel_selection: ChannelSelection,
    #[serde(default)]
    pub fusion: FusionScheme,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_folds")]
    pub n_folds: usize,
    #[serde(default = "default_repeats")]
    pub n_repeats: usize,
    #[serde(default = "default_base_seed")]
    pub base_seed: u64,
    #[serde(default = "default_folds")]
    pub inner_folds: usize,
    #[serde(default)]
    pub ablation: Ablation,
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Directory relative paths resolve against: the config file's parent.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_folds() -> usize {
    5
}

fn default_repeats() -> usize {
    10
}

fn default_base_seed() -> u64 {
    CvConfig::default().base_seed
}

/// Hex SHA-256 of a serializable value's canonical JSON.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("config serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl PipelineConfig {
    /// Parses a config file. Parse and validation failures are validation errors.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.extractor {
            ExtractorSource::Stub { descriptor, .. } => descriptor.validate()?,
            ExtractorSource::Import { .. } if self.ablation.skip_decomposition => {
                return Err(Error::invalid(
                    "skip_decomposition needs the stub extractor: imported maps are per sub-volume",
                ))
            }
            ExtractorSource::Import { .. } => {}
        }
        if self.selection.slice_divisor == 0 || self.selection.channel_divisor == 0 {
            return Err(Error::invalid("selection divisors must be positive"));
        }
        self.cv_config().validate()
    }

    pub fn cv_config(&self) -> CvConfig {
        CvConfig {
            n_folds: self.n_folds,
            n_repeats: self.n_repeats,
            base_seed: self.base_seed,
            train: self.train.clone(),
            selection: self.selection,
            channel_selection: self.channel_selection,
            fusion: self.fusion,
            skip_global_pooling: self.ablation.skip_global_pooling,
            skip_net1d: self.ablation.skip_net1d,
            skip_fusion: self.ablation.skip_fusion,
            inner_folds: self.inner_folds,
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.base_dir.join(&self.manifest)
    }

    /// Directory of imported feature files, if that is the source.
    pub fn import_dir(&self) -> Option<PathBuf> {
        match &self.extractor {
            ExtractorSource::Import { dir, .. } => Some(self.base_dir.join(dir)),
            ExtractorSource::Stub { .. } => None,
        }
    }

    /// Hash of the whole config as written, embedded in every artifact.
    pub fn config_hash(&self) -> String {
        hash_json(self)
    }

    /// Hash of just the fields that determine extracted feature maps.
    pub fn extraction_hash(&self) -> String {
        hash_json(&(&self.extractor, self.ablation.skip_decomposition))
    }

    pub fn resolve_out(&self, cli_out: Option<&Path>) -> Result<PathBuf> {
        cli_out
            .map(Path::to_path_buf)
            .or_else(|| self.out_dir.as_ref().map(|o| self.base_dir.join(o)))
            .ok_or_else(|| Error::invalid("no output directory: pass --out or set out_dir"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const STUB: &str = r#"{
        "manifest": "m.json",
        "extractor": {"stub": {"seed": 3, "descriptor": {
            "input_height": 8, "input_width": 8, "channel_mode": "single",
            "intensity_range": [0.0, 1.0], "out_dims": [1, 1, 8]}}}
    }"#;

    #[test]
    fn defaults_match_the_cv_defaults() {
        let cfg = PipelineConfig::from_json(STUB).unwrap();
        assert_eq!(cfg.cv_config(), CvConfig::default());
        assert_eq!(cfg.ablation, Ablation::default());
    }

    #[test]
    fn both_extractor_sources_is_rejected() {
        let text = STUB.replace(r#""extractor": {"stub""#, r#""extractor": {"import": {"dir": "x"}, "stub""#);
        let err = PipelineConfig::from_json(&text).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn skip_decomposition_with_import_is_rejected() {
        let text = r#"{"manifest": "m.json", "extractor": {"import": {"dir": "f"}},
                       "ablation": {"skip_decomposition": true}}"#;
        assert!(PipelineConfig::from_json(text).unwrap_err().is_validation());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = STUB.replacen('{', r#"{"n_fold": 3,"#, 1);
        assert!(PipelineConfig::from_json(&text).unwrap_err().is_validation());
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = PipelineConfig::from_json(STUB).unwrap();
        let mut b = a.clone();
        assert_eq!(a.config_hash(), b.config_hash());
        b.train.epochs += 1;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.extraction_hash(), b.extraction_hash());
        b.ablation.skip_decomposition = true;
        assert_ne!(a.extraction_hash(), b.extraction_hash());
        assert_eq!(a.config_hash().len(), 64);
    }

    #[test]
    fn out_dir_precedence() {
        let mut cfg = PipelineConfig::from_json(STUB).unwrap();
        assert!(cfg.resolve_out(None).is_err());
        cfg.out_dir = Some("a".into());
        assert_eq!(cfg.resolve_out(None).unwrap(), PathBuf::from("a"));
        assert_eq!(cfg.resolve_out(Some(Path::new("b"))).unwrap(), PathBuf::from("b"));
    }
}
