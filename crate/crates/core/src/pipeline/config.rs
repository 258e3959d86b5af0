use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{HttpBackendConfig, RetryPolicy, RetryPolicyError};
use crate::media::DEFAULT_MAX_DIM;
use crate::prompts::{PromptError, PromptSet, TemplateKind};
use crate::segmentation::DEFAULT_MAX_SEGMENT_LEN;
use crate::stage::StageSettings;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    Naive,
    NoSeg,
    NoDiag,
    NoSum,
    AgenttrekBaseline,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::Naive,
        Variant::NoSeg,
        Variant::NoDiag,
        Variant::NoSum,
        Variant::AgenttrekBaseline,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Naive => "naive",
            Variant::NoSeg => "no_seg",
            Variant::NoDiag => "no_diag",
            Variant::NoSum => "no_sum",
            Variant::AgenttrekBaseline => "agenttrek_baseline",
        }
    }

    pub fn templates(&self) -> &'static [TemplateKind] {
        use TemplateKind::*;
        match self {
            Variant::Full => &[Segment, Diagnose, Summarize],
            Variant::Naive => &[Naive],
            Variant::NoSeg => &[Diagnose, Summarize],
            Variant::NoDiag => &[Segment, BareVerdict, Summarize],
            Variant::NoSum => &[Segment, Diagnose],
            Variant::AgenttrekBaseline => &[Agenttrek],
        }
    }

    pub fn has_segmentation(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoDiag | Variant::NoSum)
    }

    pub fn has_diagnoses(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoSeg | Variant::NoSum)
    }

    pub fn has_bare_verdicts(&self) -> bool {
        matches!(self, Variant::NoDiag)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_lowercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == norm || (norm == "agenttrek" && *v == Variant::AgenttrekBaseline))
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(Variant::as_str).collect();
                format!("unknown variant {s:?}; expected one of {}", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSettings {
    pub kind: BackendKind,
    /// Script file for the mock backend.
    pub mock_script: Option<PathBuf>,
    pub http: HttpBackendConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Parallelism {
    pub trajectories: usize,
    pub subtasks: usize,
}

impl Default for Parallelism {
    fn default() -> Self {
        Self { trajectories: 4, subtasks: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageSettings {
    /// Longest side after downscaling.
    pub max_dim: u32,
    /// Fail ingestion when a referenced screenshot is missing.
    pub verify: bool,
}

impl Default for ImageSettings {
    fn default() -> Self {
        Self { max_dim: DEFAULT_MAX_DIM, verify: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub variant: Variant,
    pub seed: u64,
    pub max_segment_len: usize,
    /// Naive variant sends the transcript without screenshots.
    pub naive_text_only: bool,
    pub retry: RetryPolicy,
    pub backend: BackendSettings,
    pub stages: StageSettings,
    pub parallelism: Parallelism,
    pub images: ImageSettings,
    /// TOML file of template overrides, resolved against the config file.
    pub prompts_path: Option<PathBuf>,
    #[serde(skip)]
    pub prompts: PromptSet,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            seed: 0,
            max_segment_len: DEFAULT_MAX_SEGMENT_LEN,
            naive_text_only: false,
            retry: RetryPolicy::default(),
            backend: BackendSettings::default(),
            stages: StageSettings::default(),
            parallelism: Parallelism::default(),
            images: ImageSettings::default(),
            prompts_path: None,
            prompts: PromptSet::builtin(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("retry policy: {0}")]
    Retry(#[from] RetryPolicyError),
    #[error("max_segment_len must be at least 1")]
    MaxSegmentLen,
    #[error("the mock backend needs a script (backend.mock_script or --mock-script)")]
    MissingMockScript,
    #[error("cannot load mock script {path}: {message}")]
    MockScript { path: String, message: String },
    #[error("the http backend needs backend.http.model")]
    MissingModel,
}

impl PipelineConfig {
    /// Reads a TOML config. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let body = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg: PipelineConfig = toml::from_str(&body).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.message().to_owned(),
        })?;
        let dir = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(x) = p.as_mut() {
                if x.is_relative() {
                    *x = dir.join(&*x);
                }
            }
        };
        rebase(&mut cfg.prompts_path);
        rebase(&mut cfg.backend.mock_script);
        if let Some(p) = &cfg.prompts_path {
            cfg.prompts = PromptSet::load(p)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.retry.validate()?;
        if self.max_segment_len == 0 {
            return Err(ConfigError::MaxSegmentLen);
        }
        self.prompts.validate_for(self.variant.templates())?;
        Ok(())
    }

    pub fn prompt_hashes(&self) -> BTreeMap<String, String> {
        self.prompts.version_hashes()
    }

    /// Stable hash over every setting that can change a verdict. Worker
    /// counts and file locations are left out so that a run can be resumed
    /// with different parallelism or from a moved config.
    pub fn fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct View<'a> {
            variant: Variant,
            seed: u64,
            max_segment_len: usize,
            naive_text_only: bool,
            retry: &'a RetryPolicy,
            backend_kind: BackendKind,
            http_endpoint: Option<&'a str>,
            http_model: Option<&'a str>,
            stages: &'a StageSettings,
            max_dim: u32,
            prompt_hashes: BTreeMap<String, String>,
        }
        let http = self.backend.kind == BackendKind::Http;
        let view = View {
            variant: self.variant,
            seed: self.seed,
            max_segment_len: self.max_segment_len,
            naive_text_only: self.naive_text_only,
            retry: &self.retry,
            backend_kind: self.backend.kind,
            http_endpoint: http.then_some(self.backend.http.endpoint.as_str()),
            http_model: http.then_some(self.backend.http.model.as_str()),
            stages: &self.stages,
            max_dim: self.images.max_dim,
            prompt_hashes: self.prompt_hashes(),
        };
        let bytes = serde_json::to_vec(&view).expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..12])
    }
}
