//! Shared fixtures and configuration builders for the integration and
//! acceptance tests. The fixture generator and the tests that consume
//! the generated files must agree on these exact settings.

#![allow(dead_code)]

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use sigllm_cli::config::{Pipeline, RunConfig};
use sigllm_core::codec::CodecConfig;
use sigllm_core::detector::DetectorConfig;
use sigllm_core::prompter::PrompterConfig;

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// A sine wave with point spikes injected at the given indices.
/// Returns (observed, clean).
pub fn sine_with_spikes(
    len: usize,
    period: f64,
    amplitude: f64,
    spikes: &[(usize, f64)],
) -> (Vec<f64>, Vec<f64>) {
    let clean: Vec<f64> = (0..len)
        .map(|t| amplitude * (TAU * t as f64 / period).sin())
        .collect();
    let mut observed = clean.clone();
    for &(idx, value) in spikes {
        observed[idx] = value;
    }
    (observed, clean)
}

/// The small synthetic signal bundled as a fixture: 150 points, two
/// spikes.
pub fn small_sine() -> (Vec<f64>, Vec<f64>, Vec<(i64, i64)>) {
    let spikes = [(60usize, 8.0), (110usize, 8.0)];
    let (observed, clean) = sine_with_spikes(150, 50.0, 1.0, &spikes);
    let truth = spikes.iter().map(|&(i, _)| (i as i64, i as i64)).collect();
    (observed, clean, truth)
}

/// Spike positions for the 2000-point synthetic detection check. Spread
/// so each spike dominates at least one sliding threshold window;
/// EWMA-smeared spikes sharing a window mask each other under the
/// 4-sigma rule.
pub fn spread_spike_positions() -> Vec<usize> {
    vec![300, 918, 1185, 1378, 1964]
}

/// The signal behind the prompter replay fixture: steady values with a
/// single dip at index 6.
pub fn prompter_signal() -> Vec<f64> {
    vec![
        0.30, 0.31, 0.29, 0.32, 0.30, 0.31, 0.002, 0.33, 0.31, 0.30, 0.29, 0.32,
    ]
}

/// Index of the dip in [`prompter_signal`].
pub const PROMPTER_DIP_INDEX: usize = 6;

fn replay_codec() -> CodecConfig {
    CodecConfig {
        scale: true,
        decimals: Some(3),
        space: Some(false),
    }
}

/// Configuration of the prompter replay fixture run.
pub fn prompter_replay_config(transcript: &Path) -> RunConfig {
    let mut config = RunConfig {
        pipeline: Pipeline::Prompter,
        seed: 7,
        codec: replay_codec(),
        ..RunConfig::default()
    };
    config.backend.kind = "replay".into();
    config.backend.replay_path = Some(transcript.to_path_buf());
    config.prompter = PrompterConfig {
        window_size: 8,
        step_size: 2,
        n_samples: 4,
        alpha: 0.5,
        beta: 0.9,
        saturation_cutoff: 0.5,
        temperature: 1.0,
    };
    config
}

fn small_sine_detector() -> DetectorConfig {
    DetectorConfig {
        window_size: 30,
        step_size: 1,
        horizon: 5,
        n_samples: 4,
        ..DetectorConfig::default()
    }
}

/// Configuration of the detector oracle fixture run (records the golden
/// JSON and the transcript the replay run consumes).
pub fn detector_oracle_config(clean_csv: &Path) -> RunConfig {
    let mut config = RunConfig {
        pipeline: Pipeline::Detector,
        seed: 7,
        detector: small_sine_detector(),
        ..RunConfig::default()
    };
    config.backend.kind = "oracle".into();
    config.backend.oracle_truth = Some(clean_csv.to_path_buf());
    config.backend.sigma = 0.01;
    config.codec = CodecConfig {
        scale: true,
        decimals: Some(2),
        space: Some(false),
    };
    config
}

/// Configuration of the detector replay fixture run.
pub fn detector_replay_config(transcript: &Path) -> RunConfig {
    let mut config = RunConfig {
        pipeline: Pipeline::Detector,
        seed: 7,
        detector: small_sine_detector(),
        ..RunConfig::default()
    };
    config.backend.kind = "replay".into();
    config.backend.replay_path = Some(transcript.to_path_buf());
    config.codec = CodecConfig {
        scale: true,
        decimals: Some(2),
        space: Some(false),
    };
    config
}

/// Write a signal CSV in the format the loader expects.
pub fn write_csv(path: &Path, values: &[f64]) {
    let mut out = String::from("timestamp,value\n");
    for (t, v) in values.iter().enumerate() {
        out.push_str(&format!("{t},{v}\n"));
    }
    std::fs::write(path, out).unwrap();
}
