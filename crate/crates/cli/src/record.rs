//! Machine-readable detection records.
//!
//! A record bundles the detected intervals with the exact configuration
//! and enough run metadata to re-run the experiment. With a stub backend
//! and a fixed seed, the canonical form (wall-clock zeroed) is
//! byte-reproducible.

use serde::{Deserialize, Serialize};

use sigllm_core::codec::CodecConfig;
use sigllm_core::detector::DetectorConfig;
use sigllm_core::prompter::PrompterConfig;
use sigllm_core::{AnomalyInterval, RunMetadata};

use crate::config::{BackendConfig, MavgConfig, Pipeline, RunConfig};

/// Everything needed to reproduce the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub seed: u64,
    pub backend: BackendSnapshot,
    pub codec: CodecConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompter: Option<PrompterConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detector: Option<DetectorConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mavg: Option<MavgConfig>,
}

/// Backend identity without secrets or local paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSnapshot {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub chat: bool,
    pub chunked_tokenizer: bool,
    pub parallelism: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMetadata {
    pub signal_length: usize,
    pub timestamp_start: i64,
    pub timestamp_end: i64,
    #[serde(flatten)]
    pub run: RunMetadata,
    /// Set when the run aborted and these are partial results.
    pub partial: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One pipeline run over one signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub signal_id: String,
    pub pipeline: String,
    pub config: ConfigSnapshot,
    pub intervals: Vec<AnomalyInterval>,
    pub metadata: RecordMetadata,
}

impl DetectionRecord {
    pub fn new(
        signal_id: String,
        config: &RunConfig,
        timestamps: &[i64],
        intervals: Vec<AnomalyInterval>,
        run: RunMetadata,
    ) -> Self {
        Self {
            signal_id,
            pipeline: config.pipeline.name().to_string(),
            config: ConfigSnapshot::from_run_config(config),
            intervals,
            metadata: RecordMetadata {
                signal_length: timestamps.len(),
                timestamp_start: *timestamps.first().unwrap_or(&0),
                timestamp_end: *timestamps.last().unwrap_or(&0),
                run,
                partial: false,
                error: None,
            },
        }
    }

    pub fn mark_partial(mut self, error: String) -> Self {
        self.metadata.partial = true;
        self.metadata.error = Some(error);
        self
    }

    /// The byte-reproducible form: identical runs produce identical
    /// canonical records regardless of wall-clock timing.
    pub fn canonical(&self) -> DetectionRecord {
        let mut record = self.clone();
        record.metadata.run.elapsed_ms = 0;
        record
    }

    pub fn to_json(&self) -> String {
        let mut json = serde_json::to_string_pretty(self).expect("record serializes");
        json.push('\n');
        json
    }
}

impl ConfigSnapshot {
    pub fn from_run_config(config: &RunConfig) -> Self {
        Self {
            seed: config.seed,
            backend: BackendSnapshot::from_backend_config(&config.backend),
            codec: config.codec.clone(),
            prompter: (config.pipeline == Pipeline::Prompter).then(|| config.prompter.clone()),
            detector: (config.pipeline != Pipeline::Prompter).then(|| config.detector.clone()),
            mavg: (config.pipeline == Pipeline::Mavg).then(|| config.mavg.clone()),
        }
    }
}

impl BackendSnapshot {
    fn from_backend_config(backend: &BackendConfig) -> Self {
        Self {
            kind: backend.kind.clone(),
            endpoint: backend.endpoint.clone(),
            model: backend.model.clone(),
            chat: backend.chat,
            chunked_tokenizer: backend.chunked_tokenizer,
            parallelism: backend.parallelism,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_form_zeroes_timing_only() {
        let config = RunConfig::default();
        let run = RunMetadata {
            elapsed_ms: 1234,
            windows_total: 7,
            ..RunMetadata::default()
        };
        let record = DetectionRecord::new(
            "sig".into(),
            &config,
            &[0, 1, 2],
            vec![AnomalyInterval::new(1, 2, 0.5)],
            run,
        );
        let canonical = record.canonical();
        assert_eq!(canonical.metadata.run.elapsed_ms, 0);
        assert_eq!(canonical.metadata.run.windows_total, 7);
        assert_eq!(canonical.intervals, record.intervals);
    }

    #[test]
    fn record_round_trips_through_json() {
        let config = RunConfig::default();
        let record = DetectionRecord::new(
            "sig".into(),
            &config,
            &[10, 20, 30],
            vec![],
            RunMetadata::default(),
        );
        let json = record.to_json();
        let parsed: DetectionRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed, record);
    }

    #[test]
    fn snapshot_keeps_only_the_active_pipeline_section() {
        let config = RunConfig {
            pipeline: Pipeline::Prompter,
            ..RunConfig::default()
        };
        let snapshot = ConfigSnapshot::from_run_config(&config);
        assert!(snapshot.prompter.is_some());
        assert!(snapshot.detector.is_none());
        assert!(snapshot.mavg.is_none());
    }
}
