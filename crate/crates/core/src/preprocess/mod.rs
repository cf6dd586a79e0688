//! Optical density to haemoglobin, zero-phase band-pass, epochs, baseline.
//!
//! [`preprocess_recording`] runs the whole chain on one recording: the
//! continuous OD series are converted and filtered first, then cut into
//! `[-5, 25] s` epochs around each marker and baseline-corrected on
//! `[-1, 0] s`.

mod beer_lambert;
mod epoch;
mod filter;

use serde::{Deserialize, Serialize};

use crate::ingest::Recording;

pub use beer_lambert::{od_to_hb, BeerLambertCoefficients, HbSeries};
pub use epoch::{
    baseline_correct, epoch_len, segment_epochs, Epoch, BASELINE_WINDOW_S, EPOCH_END_S, EPOCH_START_S,
};
pub use filter::{
    butterworth_coefficients, filtfilt, frequency_response, padding_len, Biquad, FilterSpec,
};

#[derive(Debug, thiserror::Error)]
pub enum PreprocessError {
    #[error("extinction matrix is singular (det = {det:e})")]
    SingularCoefficients { det: f64 },
    #[error("invalid coefficients: {0}")]
    InvalidCoefficients(String),
    #[error("invalid pass band [{low_hz}, {high_hz}] Hz at {sample_rate_hz} Hz: {reason}")]
    InvalidBand {
        low_hz: f64,
        high_hz: f64,
        sample_rate_hz: f64,
        reason: &'static str,
    },
    #[error("series of length {len} is too short for filtering (needs more than {min})")]
    SeriesTooShort { len: usize, min: usize },
    #[error("marker {index} at sample {onset_sample}: epoch window [{first}, {last}] falls outside 0..{len}")]
    MarkerOutOfBounds {
        index: usize,
        onset_sample: usize,
        first: i64,
        last: i64,
        len: usize,
    },
    #[error("channel `{0}`: hbo and hbr lengths differ")]
    LengthMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub filter: FilterSpec,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            filter: FilterSpec::default(),
        }
    }
}

/// Converts, filters, segments and baseline-corrects one recording.
pub fn preprocess_recording(
    rec: &Recording,
    coeff: &BeerLambertCoefficients,
    filter: &FilterSpec,
) -> Result<Vec<Epoch>, PreprocessError> {
    let cascade = butterworth_coefficients(filter, rec.sample_rate_hz)?;
    let hb = rec
        .channels
        .iter()
        .map(|ch| {
            let raw = od_to_hb(ch, coeff)?;
            Ok(HbSeries {
                channel_id: raw.channel_id,
                hbo: filtfilt(&raw.hbo, &cascade)?,
                hbr: filtfilt(&raw.hbr, &cascade)?,
            })
        })
        .collect::<Result<Vec<_>, PreprocessError>>()?;
    let epochs = segment_epochs(&hb, &rec.markers, rec.sample_rate_hz)?;
    Ok(epochs
        .iter()
        .map(|e| Epoch {
            subject_id: rec.subject_id.clone(),
            ..baseline_correct(e)
        })
        .collect())
}
