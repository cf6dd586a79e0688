//! Recordings: the raw multichannel optical-density input of the pipeline.
//!
//! A recording on disk is a pair of CSV files plus an entry in a directory
//! `manifest.json`:
//!
//! * `<id>.csv` with one row per sample and columns `t, <ch>_wl1, <ch>_wl2, ...`
//! * `<id>.markers.csv` with columns `onset_sample,task` (`task` is `MI`, `MA`
//!   or `IS`)
//!
//! Values are written with the shortest representation that parses back to
//! the same `f64`, so a write/load cycle is bit-exact.

mod io;
mod synth;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::task::Task;

pub use io::{
    load_recording, load_recording_dir, write_recording, write_recording_dir, RecordingEntry,
    RecordingFormat, RecordingManifest, MANIFEST_FILE,
};
pub use synth::{canonical_hrf, synthesize_recording, task_response, SynthesisConfig};

/// Seconds of signal required before each trial onset.
pub const PRE_TRIAL_S: f64 = 5.0;
/// Seconds of signal required after each trial onset.
pub const POST_TRIAL_S: f64 = 25.0;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: invalid manifest: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: non-numeric cell at row {row}, column `{column}`: {value:?}")]
    NonNumericCell {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
    },
    #[error("{path}: invalid task at row {row}: {value:?}")]
    InvalidTask {
        path: PathBuf,
        row: usize,
        value: String,
    },
    #[error("marker {index} at sample {onset_sample} needs [{first}, {last}] but the series has {len} samples")]
    MarkerOutOfBounds {
        index: usize,
        onset_sample: usize,
        first: i64,
        last: i64,
        len: usize,
    },
    #[error("markers are not sorted by onset (marker {index})")]
    UnsortedMarkers { index: usize },
    #[error("channel `{channel}` has length {found}, expected {expected}")]
    LengthMismatch {
        channel: String,
        expected: usize,
        found: usize,
    },
    #[error("channel `{channel}` has a non-finite value at sample {index}")]
    NonFinite { channel: String, index: usize },
    #[error("sample rate must be positive and finite, got {0}")]
    InvalidSampleRate(f64),
    #[error("invalid synthesis config: {0}")]
    InvalidConfig(String),
}

/// Optical-density change of one channel at its two wavelengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSeries {
    pub channel_id: String,
    pub od_wl1: Vec<f64>,
    pub od_wl2: Vec<f64>,
}

impl ChannelSeries {
    pub fn len(&self) -> usize {
        self.od_wl1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.od_wl1.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialMarker {
    pub onset_sample: usize,
    pub task: Task,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub subject_id: String,
    pub sample_rate_hz: f64,
    pub channels: Vec<ChannelSeries>,
    pub markers: Vec<TrialMarker>,
}

/// Samples that must precede an onset: `ceil(5 s × rate)`.
pub fn pre_trial_samples(rate: f64) -> usize {
    (PRE_TRIAL_S * rate).ceil() as usize
}

/// Samples that must follow an onset: `ceil(25 s × rate)`.
pub fn post_trial_samples(rate: f64) -> usize {
    (POST_TRIAL_S * rate).ceil() as usize
}

impl Recording {
    /// Builds a recording and checks every invariant.
    pub fn new(
        subject_id: impl Into<String>,
        sample_rate_hz: f64,
        channels: Vec<ChannelSeries>,
        markers: Vec<TrialMarker>,
    ) -> Result<Self, IngestError> {
        let rec = Recording {
            subject_id: subject_id.into(),
            sample_rate_hz,
            channels,
            markers,
        };
        rec.validate()?;
        Ok(rec)
    }

    /// Number of samples per series (0 for a recording without channels).
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, ChannelSeries::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel_ids(&self) -> Vec<&str> {
        self.channels.iter().map(|c| c.channel_id.as_str()).collect()
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let rate = self.sample_rate_hz;
        if !(rate.is_finite() && rate > 0.0) {
            return Err(IngestError::InvalidSampleRate(rate));
        }
        let len = self.len();
        for ch in &self.channels {
            for series in [&ch.od_wl1, &ch.od_wl2] {
                if series.len() != len {
                    return Err(IngestError::LengthMismatch {
                        channel: ch.channel_id.clone(),
                        expected: len,
                        found: series.len(),
                    });
                }
                if let Some(index) = series.iter().position(|v| !v.is_finite()) {
                    return Err(IngestError::NonFinite {
                        channel: ch.channel_id.clone(),
                        index,
                    });
                }
            }
        }
        let pre = pre_trial_samples(rate);
        let post = post_trial_samples(rate);
        for (index, m) in self.markers.iter().enumerate() {
            if index > 0 && m.onset_sample < self.markers[index - 1].onset_sample {
                return Err(IngestError::UnsortedMarkers { index });
            }
            if m.onset_sample < pre || m.onset_sample + post > len {
                return Err(IngestError::MarkerOutOfBounds {
                    index,
                    onset_sample: m.onset_sample,
                    first: m.onset_sample as i64 - pre as i64,
                    last: (m.onset_sample + post) as i64 - 1,
                    len,
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel(len: usize) -> ChannelSeries {
        ChannelSeries {
            channel_id: "ch1".into(),
            od_wl1: vec![0.0; len],
            od_wl2: vec![0.0; len],
        }
    }

    #[test]
    fn marker_bounds_at_default_rate() {
        // ceil(5 * 13.3) = 67 and ceil(25 * 13.3) = 333
        assert_eq!(pre_trial_samples(13.3), 67);
        assert_eq!(post_trial_samples(13.3), 333);
        let ok = Recording::new(
            "s",
            13.3,
            vec![channel(400)],
            vec![TrialMarker {
                onset_sample: 67,
                task: Task::Idle,
            }],
        );
        assert!(ok.is_ok());
        let early = Recording::new(
            "s",
            13.3,
            vec![channel(400)],
            vec![TrialMarker {
                onset_sample: 66,
                task: Task::Idle,
            }],
        );
        assert!(matches!(early, Err(IngestError::MarkerOutOfBounds { .. })));
        let late = Recording::new(
            "s",
            13.3,
            vec![channel(399)],
            vec![TrialMarker {
                onset_sample: 67,
                task: Task::Idle,
            }],
        );
        assert!(matches!(late, Err(IngestError::MarkerOutOfBounds { .. })));
    }

    #[test]
    fn rejects_ragged_and_non_finite() {
        let mut ch = channel(10);
        ch.od_wl2.pop();
        let err = Recording::new("s", 1.0, vec![ch], vec![]).unwrap_err();
        assert!(matches!(err, IngestError::LengthMismatch { .. }));

        let mut ch = channel(10);
        ch.od_wl1[3] = f64::NAN;
        let err = Recording::new("s", 1.0, vec![ch], vec![]).unwrap_err();
        assert!(matches!(err, IngestError::NonFinite { index: 3, .. }));

        let err = Recording::new("s", 0.0, vec![channel(3)], vec![]).unwrap_err();
        assert!(matches!(err, IngestError::InvalidSampleRate(_)));
    }

    #[test]
    fn rejects_unsorted_markers() {
        let markers = vec![
            TrialMarker {
                onset_sample: 9,
                task: Task::Idle,
            },
            TrialMarker {
                onset_sample: 8,
                task: Task::Idle,
            },
        ];
        let err = Recording::new("s", 0.05, vec![channel(20)], markers).unwrap_err();
        assert!(matches!(err, IngestError::UnsortedMarkers { index: 1 }));
    }
}
