//! Run configuration: a declarative TOML file merged with command-line
//! overrides (flags win), plus backend construction.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sigllm_core::backend::{
    Backend, BackendDescriptor, BackendKind, OracleStub, PersistenceStub, ReplayStub,
};
use sigllm_core::codec::{self, CodecConfig, QuantizedSeries};
use sigllm_core::detector::DetectorConfig;
use sigllm_core::eval::load_signal_csv;
use sigllm_core::prompter::PrompterConfig;

use crate::CliError;

/// Which detection pipeline a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    Prompter,
    Detector,
    Mavg,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Prompter => "prompter",
            Pipeline::Detector => "detector",
            Pipeline::Mavg => "mavg",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "prompter" => Ok(Pipeline::Prompter),
            "detector" => Ok(Pipeline::Detector),
            "mavg" => Ok(Pipeline::Mavg),
            other => Err(CliError::Config(format!(
                "unknown pipeline '{other}' (expected prompter, detector or mavg)"
            ))),
        }
    }
}

/// Backend selection and its knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    /// One of `http`, `persistence`, `oracle`, `replay`.
    pub kind: String,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Send chat-style messages instead of a bare prompt.
    pub chat: bool,
    /// The model's tokenizer chunks multi-digit numbers (controls the
    /// default digit spacing).
    pub chunked_tokenizer: bool,
    /// Attach the numeric logit-bias map (http only).
    pub logit_bias: bool,
    pub parallelism: usize,
    /// Transcript to replay (replay kind).
    pub replay_path: Option<PathBuf>,
    /// CSV with the series the oracle stub should predict; defaults to
    /// the input signal itself.
    pub oracle_truth: Option<PathBuf>,
    /// Oracle noise standard deviation, in signal units.
    pub sigma: f64,
    /// Make the persistence stub refuse constant windows.
    pub reject_repetitive: bool,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: "persistence".into(),
            endpoint: None,
            model: None,
            chat: false,
            chunked_tokenizer: false,
            logit_bias: true,
            parallelism: 4,
            replay_path: None,
            oracle_truth: None,
            sigma: 0.01,
            reject_repetitive: false,
        }
    }
}

/// Moving-average baseline knobs; post-processing reuses the detector
/// configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MavgConfig {
    pub ma_window: usize,
}

impl Default for MavgConfig {
    fn default() -> Self {
        Self { ma_window: 10 }
    }
}

/// Fully resolved configuration for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub pipeline: Pipeline,
    pub seed: u64,
    pub backend: BackendConfig,
    pub codec: CodecConfig,
    pub prompter: PrompterConfig,
    pub detector: DetectorConfig,
    pub mavg: MavgConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pipeline: Pipeline::Detector,
            seed: 0,
            backend: BackendConfig::default(),
            codec: CodecConfig::default(),
            prompter: PrompterConfig::default(),
            detector: DetectorConfig::default(),
            mavg: MavgConfig::default(),
        }
    }
}

/// The declarative config file; every field optional so flags and
/// defaults can fill the rest.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub pipeline: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub backend: Option<BackendConfig>,
    pub codec: Option<CodecConfig>,
    pub prompter: Option<PrompterConfig>,
    pub detector: Option<DetectorConfig>,
    pub mavg: Option<MavgConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let data = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&data).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Fold the file over the defaults; command-line flags are applied
    /// afterwards by the caller.
    pub fn into_run_config(self) -> Result<RunConfig, CliError> {
        let mut config = RunConfig::default();
        if let Some(p) = self.pipeline {
            config.pipeline = Pipeline::parse(&p)?;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(backend) = self.backend {
            config.backend = backend;
        }
        if let Some(codec) = self.codec {
            config.codec = codec;
        }
        if let Some(prompter) = self.prompter {
            config.prompter = prompter;
        }
        if let Some(detector) = self.detector {
            config.detector = detector;
        }
        if let Some(mavg) = self.mavg {
            config.mavg = mavg;
        }
        Ok(config)
    }
}

impl RunConfig {
    /// Quantize a series exactly the way the pipelines will, so stub
    /// construction and the run agree on the textual representation.
    pub fn quantize_for_run(&self, values: &[f64]) -> Result<QuantizedSeries<f64>, CliError> {
        let (scaled, transform) = if self.codec.scale {
            codec::scale(values).map_err(|e| CliError::Data(e.to_string()))?
        } else {
            (values.to_vec(), codec::ScaleTransform::identity())
        };
        let decimals = self
            .codec
            .decimals
            .unwrap_or_else(|| codec::auto_decimals(&scaled));
        codec::quantize(&scaled, decimals, transform).map_err(|e| CliError::Data(e.to_string()))
    }

    /// Build the backend named by the config. `observed` is the input
    /// signal's values, needed to register the oracle stub.
    pub fn build_backend(&self, observed: &[f64]) -> Result<Box<dyn Backend>, CliError> {
        match self.backend.kind.as_str() {
            "http" | "http-openai-compatible" => {
                let endpoint = self.backend.endpoint.clone().ok_or_else(|| {
                    CliError::Config("http backend requires --endpoint".into())
                })?;
                let model = self
                    .backend
                    .model
                    .clone()
                    .ok_or_else(|| CliError::Config("http backend requires --model".into()))?;
                let mut descriptor = BackendDescriptor::http(endpoint, model);
                descriptor.chat_style = self.backend.chat;
                descriptor.chunked_tokenizer = self.backend.chunked_tokenizer;
                descriptor.supports_logit_bias = self.backend.logit_bias;
                descriptor.parallelism = self.backend.parallelism;
                let client = sigllm_client::HttpBackend::new(descriptor)
                    .map_err(|e| CliError::Config(e.to_string()))?;
                Ok(Box::new(client))
            }
            "persistence" | "stub-persistence" => {
                let mut stub = PersistenceStub::new();
                if self.backend.reject_repetitive {
                    stub = stub.rejecting_repetitive();
                }
                Ok(Box::new(stub))
            }
            "oracle" | "stub-oracle" => {
                let q_observed = self.quantize_for_run(observed)?;
                let q_truth = match &self.backend.oracle_truth {
                    Some(path) => {
                        let truth = load_signal_csv::<f64>(path)
                            .map_err(|e| CliError::Data(e.to_string()))?;
                        // quantize under the observed series' transform,
                        // clamping below its minimum
                        let shifted: Vec<f64> = truth
                            .values()
                            .iter()
                            .map(|v| {
                                if self.codec.scale {
                                    (v - q_observed.scale.min_offset).max(0.0)
                                } else {
                                    *v
                                }
                            })
                            .collect();
                        codec::quantize(
                            &shifted,
                            q_observed.decimals,
                            q_observed.scale,
                        )
                        .map_err(|e| CliError::Data(e.to_string()))?
                        .values
                    }
                    None => q_observed.values.clone(),
                };
                let sigma_quantized =
                    self.backend.sigma * 10f64.powi(q_observed.decimals as i32);
                Ok(Box::new(OracleStub::new(
                    q_observed.values,
                    q_truth,
                    sigma_quantized,
                    self.seed,
                )))
            }
            "replay" | "stub-replay" => {
                let path = self.backend.replay_path.clone().ok_or_else(|| {
                    CliError::Config("replay backend requires --replay <transcript>".into())
                })?;
                let stub = ReplayStub::from_path(&path)
                    .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
                Ok(Box::new(stub))
            }
            other => Err(CliError::Config(format!(
                "unknown backend '{other}' (expected http, persistence, oracle or replay)"
            ))),
        }
    }

    /// Descriptor-shaped snapshot for the detection record, without
    /// constructing the backend.
    pub fn backend_kind(&self) -> Result<BackendKind, CliError> {
        match self.backend.kind.as_str() {
            "http" | "http-openai-compatible" => Ok(BackendKind::HttpOpenAiCompatible),
            "persistence" | "stub-persistence" => Ok(BackendKind::StubPersistence),
            "oracle" | "stub-oracle" => Ok(BackendKind::StubOracle),
            "replay" | "stub-replay" => Ok(BackendKind::StubReplay),
            other => Err(CliError::Config(format!("unknown backend '{other}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_config_partial_sections_fill_defaults() {
        let parsed: FileConfig = toml::from_str(
            r#"
            pipeline = "prompter"
            seed = 9

            [prompter]
            alpha = 0.2

            [backend]
            kind = "persistence"
            "#,
        )
        .unwrap();
        let config = parsed.into_run_config().unwrap();
        assert_eq!(config.pipeline, Pipeline::Prompter);
        assert_eq!(config.seed, 9);
        assert_eq!(config.prompter.alpha, 0.2);
        // untouched fields keep their defaults
        assert_eq!(config.prompter.beta, 0.9);
        assert_eq!(config.prompter.window_size, 200);
        assert_eq!(config.detector.window_size, 140);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let parsed: Result<FileConfig, _> = toml::from_str("pipelin = \"detector\"");
        assert!(parsed.is_err());
    }

    #[test]
    fn http_backend_requires_endpoint_and_model() {
        let mut config = RunConfig::default();
        config.backend.kind = "http".into();
        assert!(matches!(
            config.build_backend(&[1.0]),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn unknown_backend_kind_is_config_error() {
        let mut config = RunConfig::default();
        config.backend.kind = "quantum".into();
        assert!(matches!(
            config.build_backend(&[1.0]),
            Err(CliError::Config(_))
        ));
    }
}
