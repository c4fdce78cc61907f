//! The four subcommand implementations: convert, detect, evaluate and
//! sweep. Each returns data for the binary to print or write, keeping
//! process concerns (stdout, exit codes) in `main`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sigllm_core::backend::{Backend, RecordingBackend};
use sigllm_core::codec;
use sigllm_core::detector::{
    collect_forecasts, detect_from_forecasts, run_detector, DetectorTrace, ErrorKind,
    SampleStatistic,
};
use sigllm_core::eval::{
    aggregate_report, load_ground_truth, load_signal_csv, moving_average_detect,
    overlap_confusion, ScoreReport,
};
use sigllm_core::prompter::{collect_votes, merge_detections, run_prompter};
use sigllm_core::{AnomalyInterval, Detection, PipelineFailure, Signal};

use crate::config::{Pipeline, RunConfig};
use crate::record::DetectionRecord;
use crate::CliError;

// ============================================================================
// convert
// ============================================================================

#[derive(Debug, Clone)]
pub struct ConvertOptions {
    pub window: Option<usize>,
    pub step: Option<usize>,
    pub decimals: Option<u32>,
    pub space: bool,
    pub scale: bool,
}

/// Render the signal as serialized windows, one per line.
pub fn run_convert(signal_path: &Path, options: &ConvertOptions) -> Result<String, CliError> {
    let signal: Signal = load_signal_csv(signal_path).map_err(|e| CliError::Data(e.to_string()))?;
    let (scaled, transform) = if options.scale {
        codec::scale(signal.values()).map_err(|e| CliError::Data(e.to_string()))?
    } else {
        (signal.values().to_vec(), codec::ScaleTransform::identity())
    };
    let decimals = options
        .decimals
        .unwrap_or_else(|| codec::auto_decimals(&scaled));
    let quantized =
        codec::quantize(&scaled, decimals, transform).map_err(|e| CliError::Data(e.to_string()))?;

    let window = options.window.unwrap_or(quantized.len());
    let step = options.step.unwrap_or(window);
    let windows = codec::make_windows(&quantized.values, window, step)
        .map_err(|e| CliError::Config(e.to_string()))?;

    let mut out = String::new();
    for w in &windows.windows {
        out.push_str(&codec::serialize_window(w, options.space));
        out.push('\n');
    }
    Ok(out)
}

// ============================================================================
// detect
// ============================================================================

/// A finished or partially finished detection run.
pub enum DetectOutcome {
    Complete(DetectionRecord),
    /// The backend gave out mid-run; the record carries what merged.
    Partial(DetectionRecord),
}

impl DetectOutcome {
    pub fn record(&self) -> &DetectionRecord {
        match self {
            DetectOutcome::Complete(r) | DetectOutcome::Partial(r) => r,
        }
    }
}

pub fn run_detect(
    config: &RunConfig,
    signal_path: &Path,
    signal_id: Option<String>,
    record_transcript: Option<&Path>,
    debug_csv: Option<&Path>,
) -> Result<DetectOutcome, CliError> {
    let signal: Signal = load_signal_csv(signal_path).map_err(|e| CliError::Data(e.to_string()))?;
    let signal_id = signal_id.unwrap_or_else(|| {
        signal_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "signal".into())
    });

    if config.pipeline == Pipeline::Mavg {
        let run = moving_average_detect(&signal, config.mavg.ma_window, &config.detector)
            .map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(path) = debug_csv {
            write_debug_csv(path, &signal, &run.trace)?;
        }
        let record = DetectionRecord::new(
            signal_id,
            config,
            signal.timestamps(),
            run.detection.intervals,
            run.detection.metadata,
        );
        return Ok(DetectOutcome::Complete(record));
    }

    let backend = config.build_backend(signal.values())?;
    let recorder = RecordingBackend::new(backend.as_ref());
    let active: &dyn Backend = if record_transcript.is_some() {
        &recorder
    } else {
        backend.as_ref()
    };

    let result: Result<(Detection, Option<DetectorTrace<f64>>), PipelineFailure> =
        match config.pipeline {
            Pipeline::Prompter => run_prompter(&signal, &config.prompter, &config.codec, active)
                .map(|detection| (detection, None)),
            Pipeline::Detector => run_detector(&signal, &config.detector, &config.codec, active)
                .map(|run| (run.detection, Some(run.trace))),
            Pipeline::Mavg => unreachable!("handled above"),
        };

    match result {
        Ok((detection, trace)) => {
            if let Some(path) = record_transcript {
                recorder
                    .transcript()
                    .save(path)
                    .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            }
            if let (Some(path), Some(trace)) = (debug_csv, trace.as_ref()) {
                write_debug_csv(path, &signal, trace)?;
            }
            let record = DetectionRecord::new(
                signal_id,
                config,
                signal.timestamps(),
                detection.intervals,
                detection.metadata,
            );
            Ok(DetectOutcome::Complete(record))
        }
        Err(failure) => {
            if matches!(
                failure.error,
                sigllm_core::backend::BackendError::InvalidRequest(_)
            ) {
                return Err(CliError::Config(failure.error.to_string()));
            }
            let record = DetectionRecord::new(
                signal_id,
                config,
                signal.timestamps(),
                failure.partial.intervals,
                failure.partial.metadata,
            )
            .mark_partial(failure.error.to_string());
            Ok(DetectOutcome::Partial(record))
        }
    }
}

fn write_debug_csv(
    path: &Path,
    signal: &Signal,
    trace: &DetectorTrace<f64>,
) -> Result<(), CliError> {
    let mut out = String::from("index,timestamp,actual,predicted,error,smoothed,flagged\n");
    for (i, predicted) in trace.predicted.iter().enumerate() {
        let index = trace.start() + i;
        let smoothed = trace
            .smoothed
            .as_ref()
            .map(|s| s.values[i].to_string())
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{index},{},{},{predicted},{},{smoothed},{}",
            signal.timestamps()[index],
            signal.values()[index],
            trace.error.values[i],
            u8::from(trace.mask[i]),
        );
    }
    std::fs::write(path, out).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

// ============================================================================
// evaluate
// ============================================================================

pub struct EvaluateOutput {
    pub report: ScoreReport,
    pub table: String,
    pub json: String,
}

pub fn run_evaluate(detections_path: &Path, truth_path: &Path) -> Result<EvaluateOutput, CliError> {
    let records = load_records(detections_path)?;
    let truth_by_id = load_truth(truth_path, &records)?;

    let mut missing: Vec<String> = Vec::new();
    for record in &records {
        if !truth_by_id.contains_key(&record.signal_id) {
            missing.push(record.signal_id.clone());
        }
    }
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(CliError::Data(format!(
            "ground truth missing for signal id(s): {}",
            missing.join(", ")
        )));
    }

    let mut rows = Vec::with_capacity(records.len());
    let duplicate_ids = records.len() > 1;
    for (i, record) in records.iter().enumerate() {
        let truth = &truth_by_id[&record.signal_id];
        for interval in truth {
            if interval.start < record.metadata.timestamp_start
                || interval.end > record.metadata.timestamp_end
            {
                return Err(CliError::Data(format!(
                    "truth interval ({}, {}) outside signal '{}' range ({}, {})",
                    interval.start,
                    interval.end,
                    record.signal_id,
                    record.metadata.timestamp_start,
                    record.metadata.timestamp_end
                )));
            }
        }
        let label = if duplicate_ids {
            format!("{i}:{}", record.signal_id)
        } else {
            record.signal_id.clone()
        };
        rows.push((label, overlap_confusion(&record.intervals, truth)));
    }

    let report = aggregate_report(rows);
    let table = report.to_table();
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    Ok(EvaluateOutput {
        report,
        table,
        json,
    })
}

fn load_records(path: &Path) -> Result<Vec<DetectionRecord>, CliError> {
    let data = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&data)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let records = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|r| vec![r])
    }
    .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if records.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no detection records",
            path.display()
        )));
    }
    Ok(records)
}

fn load_truth(
    path: &Path,
    records: &[DetectionRecord],
) -> Result<BTreeMap<String, Vec<AnomalyInterval>>, CliError> {
    let data = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&data)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;

    if value.is_array() {
        // bare interval array: applies to a single signal id
        let ids: std::collections::BTreeSet<&str> =
            records.iter().map(|r| r.signal_id.as_str()).collect();
        if ids.len() != 1 {
            return Err(CliError::Data(format!(
                "{}: a bare interval array needs a single signal id; found {:?} \
                 (use an object keyed by signal id)",
                path.display(),
                ids
            )));
        }
        let intervals = load_ground_truth(path).map_err(|e| CliError::Data(e.to_string()))?;
        let id = ids.into_iter().next().unwrap().to_string();
        return Ok(BTreeMap::from([(id, intervals)]));
    }

    #[derive(serde::Deserialize)]
    struct RawInterval {
        start: i64,
        end: i64,
    }
    let map: BTreeMap<String, Vec<RawInterval>> = serde_json::from_value(value)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(map
        .into_iter()
        .map(|(id, intervals)| {
            (
                id,
                intervals
                    .into_iter()
                    .map(|i| AnomalyInterval::new(i.start, i.end, 0.0))
                    .collect(),
            )
        })
        .collect())
}

// ============================================================================
// sweep
// ============================================================================

/// Run the hyperparameter grids, reusing one set of completions per
/// pipeline: the full alpha/beta grid for the prompting pipeline, the
/// statistic x error x smoothing grid for the forecasting one.
pub fn run_sweep(
    config: &RunConfig,
    signal_path: &Path,
    signal_id: Option<String>,
) -> Result<Vec<DetectionRecord>, CliError> {
    let signal: Signal = load_signal_csv(signal_path).map_err(|e| CliError::Data(e.to_string()))?;
    let signal_id = signal_id.unwrap_or_else(|| {
        signal_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "signal".into())
    });
    let backend = config.build_backend(signal.values())?;

    match config.pipeline {
        Pipeline::Prompter => {
            let votes = collect_votes(
                &signal,
                &config.prompter,
                &config.codec,
                backend.as_ref(),
            )
            .map_err(|failure| match failure.error {
                sigllm_core::backend::BackendError::InvalidRequest(msg) => CliError::Config(msg),
                other => CliError::Backend(other.to_string()),
            })?;
            let grid = (1..=10).map(|i| i as f64 / 10.0);
            let mut records = Vec::with_capacity(100);
            for alpha in grid.clone() {
                for beta in grid.clone() {
                    let detection = merge_detections(&signal, &votes, alpha, beta);
                    let mut cell = config.clone();
                    cell.prompter.alpha = alpha;
                    cell.prompter.beta = beta;
                    records.push(DetectionRecord::new(
                        signal_id.clone(),
                        &cell,
                        signal.timestamps(),
                        detection.intervals,
                        detection.metadata,
                    ));
                }
            }
            Ok(records)
        }
        Pipeline::Detector => {
            let ensemble =
                collect_forecasts(&signal, &config.detector, &config.codec, backend.as_ref())
                    .map_err(|e| CliError::Config(e.to_string()))?;
            if let Some(error) = &ensemble.fatal {
                return Err(CliError::Backend(error.to_string()));
            }
            let mut records = Vec::with_capacity(16);
            for statistic in SampleStatistic::ALL {
                for error in ErrorKind::ALL {
                    for smoothing in [true, false] {
                        let mut cell = config.clone();
                        cell.detector.statistic = statistic;
                        cell.detector.error = error;
                        cell.detector.smoothing = smoothing;
                        let run = detect_from_forecasts(&signal, &ensemble, &cell.detector);
                        records.push(DetectionRecord::new(
                            signal_id.clone(),
                            &cell,
                            signal.timestamps(),
                            run.detection.intervals,
                            run.detection.metadata,
                        ));
                    }
                }
            }
            Ok(records)
        }
        Pipeline::Mavg => Err(CliError::Config(
            "sweep supports the prompter and detector pipelines".into(),
        )),
    }
}

/// Serialize a record list the way `detect` serializes a single record.
pub fn records_to_json(records: &[DetectionRecord]) -> String {
    let mut json = serde_json::to_string_pretty(records).expect("records serialize");
    json.push('\n');
    json
}

#[cfg(test)]
mod tests {
    use super::*;
    use sigllm_core::codec::ScaleTransform;

    #[test]
    fn convert_options_defaults_produce_single_window() {
        let _ = ScaleTransform::<f64>::identity();
        let dir = std::env::temp_dir().join("sigllm-cli-convert");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tiny.csv");
        std::fs::write(&path, "timestamp,value\n1,0.2437\n2,0.3087\n3,0.002\n4,0.462\n").unwrap();
        let out = run_convert(
            &path,
            &ConvertOptions {
                window: None,
                step: None,
                decimals: Some(3),
                space: false,
                scale: false,
            },
        )
        .unwrap();
        assert_eq!(out, "244,309,2,462\n");
    }

    #[test]
    fn convert_rejects_missing_file() {
        let err = run_convert(
            Path::new("/nonexistent/x.csv"),
            &ConvertOptions {
                window: None,
                step: None,
                decimals: None,
                space: false,
                scale: true,
            },
        )
        .unwrap_err();
        assert!(matches!(err, CliError::Data(_)));
    }
}
