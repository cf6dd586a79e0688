use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{HbSeries, PreprocessError};
use crate::ingest::TrialMarker;
use crate::task::Task;

pub const EPOCH_START_S: f64 = -5.0;
pub const EPOCH_END_S: f64 = 25.0;
/// Pre-stimulus second used for baseline correction (both ends inclusive).
pub const BASELINE_WINDOW_S: (f64, f64) = (-1.0, 0.0);

/// Slack for deciding whether a sample time lies on a window edge.
const EDGE_TOL: f64 = 1e-9;

/// One trial's HbO/HbR segment on `[-5, 25] s` around the onset.
///
/// Sample `i` sits at `first_offset + i` samples from the onset, with
/// `first_offset = round(t_start_s * rate)`; its length is
/// `round((t_end_s - t_start_s) * rate) + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Epoch {
    #[serde(default)]
    pub subject_id: String,
    pub trial_index: usize,
    pub task: Task,
    pub t_start_s: f64,
    pub t_end_s: f64,
    pub first_offset: i64,
    pub sample_rate_hz: f64,
    pub channels: Vec<HbSeries>,
}

/// `round((end - start) * rate) + 1`, inclusive of both endpoints.
pub fn epoch_len(t_start_s: f64, t_end_s: f64, rate: f64) -> usize {
    ((t_end_s - t_start_s) * rate).round() as usize + 1
}

impl Epoch {
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, HbSeries::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Seconds from the onset to sample `i`.
    pub fn sample_time(&self, i: usize) -> f64 {
        (self.first_offset + i as i64) as f64 / self.sample_rate_hz
    }

    /// Indices of samples with `lo <= t < hi` (or `t <= hi` when
    /// `hi_inclusive`).
    pub fn window(&self, lo: f64, hi: f64, hi_inclusive: bool) -> Range<usize> {
        let rate = self.sample_rate_hz;
        let lo_k = lo * rate - EDGE_TOL;
        let hi_k = if hi_inclusive { hi * rate + EDGE_TOL } else { hi * rate - EDGE_TOL };
        let inside = |i: usize| {
            let k = (self.first_offset + i as i64) as f64;
            k >= lo_k && (if hi_inclusive { k <= hi_k } else { k < hi_k })
        };
        let n = self.len();
        let start = (0..n).find(|&i| inside(i)).unwrap_or(n);
        let end = (start..n).find(|&i| !inside(i)).unwrap_or(n);
        start..end
    }

    pub fn channel(&self, id: &str) -> Option<&HbSeries> {
        self.channels.iter().find(|c| c.channel_id == id)
    }
}

/// Cuts one epoch per marker from the continuous HbO/HbR series.
pub fn segment_epochs(
    rec_hb: &[HbSeries],
    markers: &[TrialMarker],
    rate: f64,
) -> Result<Vec<Epoch>, PreprocessError> {
    let len = rec_hb.first().map_or(0, HbSeries::len);
    for ch in rec_hb {
        if ch.hbo.len() != len || ch.hbr.len() != len {
            return Err(PreprocessError::LengthMismatch(ch.channel_id.clone()));
        }
    }
    let first_offset = (EPOCH_START_S * rate).round() as i64;
    let n = epoch_len(EPOCH_START_S, EPOCH_END_S, rate);
    markers
        .iter()
        .enumerate()
        .map(|(index, m)| {
            let first = m.onset_sample as i64 + first_offset;
            let last = first + n as i64 - 1;
            if first < 0 || last >= len as i64 {
                return Err(PreprocessError::MarkerOutOfBounds {
                    index,
                    onset_sample: m.onset_sample,
                    first,
                    last,
                    len,
                });
            }
            let span = first as usize..=last as usize;
            Ok(Epoch {
                subject_id: String::new(),
                trial_index: index,
                task: m.task,
                t_start_s: EPOCH_START_S,
                t_end_s: EPOCH_END_S,
                first_offset,
                sample_rate_hz: rate,
                channels: rec_hb
                    .iter()
                    .map(|ch| HbSeries {
                        channel_id: ch.channel_id.clone(),
                        hbo: ch.hbo[span.clone()].to_vec(),
                        hbr: ch.hbr[span.clone()].to_vec(),
                    })
                    .collect(),
            })
        })
        .collect()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Subtracts the `[-1, 0] s` mean from every HbO and HbR trace.
///
/// An epoch without samples in that window is returned unchanged.
pub fn baseline_correct(epoch: &Epoch) -> Epoch {
    let w = epoch.window(BASELINE_WINDOW_S.0, BASELINE_WINDOW_S.1, true);
    let mut out = epoch.clone();
    if w.is_empty() {
        return out;
    }
    for ch in &mut out.channels {
        for series in [&mut ch.hbo, &mut ch.hbr] {
            let m = mean(&series[w.clone()]);
            series.iter_mut().for_each(|v| *v -= m);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const RATE: f64 = 13.3;

    fn continuous(len: usize, f: impl Fn(usize) -> f64) -> Vec<HbSeries> {
        vec![HbSeries {
            channel_id: "ch1".into(),
            hbo: (0..len).map(&f).collect(),
            hbr: (0..len).map(|i| -f(i)).collect(),
        }]
    }

    fn marker(onset: usize, task: Task) -> TrialMarker {
        TrialMarker {
            onset_sample: onset,
            task,
        }
    }

    #[test]
    fn default_rate_epoch_has_400_samples() {
        let hb = continuous(1000, |i| i as f64);
        let epochs = segment_epochs(&hb, &[marker(200, Task::MotorImagery)], RATE).unwrap();
        assert_eq!(epochs.len(), 1);
        let e = &epochs[0];
        assert_eq!(e.len(), 400);
        assert_eq!(e.first_offset, -67);
        // Sample i maps to absolute sample onset + round(-5 * rate) + i.
        for i in [0, 1, 67, 399] {
            assert_eq!(e.channels[0].hbo[i], (200 - 67 + i) as f64);
        }
        assert_eq!(e.sample_time(67), 0.0);
        assert_eq!(e.task, Task::MotorImagery);
    }

    #[test]
    fn no_markers_no_epochs() {
        let hb = continuous(500, |_| 0.0);
        assert!(segment_epochs(&hb, &[], RATE).unwrap().is_empty());
    }

    #[test]
    fn overrunning_marker() {
        let hb = continuous(500, |_| 0.0);
        let err = segment_epochs(&hb, &[marker(200, Task::Idle)], RATE).unwrap_err();
        assert!(matches!(err, PreprocessError::MarkerOutOfBounds { index: 0, .. }));
        let err = segment_epochs(&hb, &[marker(10, Task::Idle)], RATE).unwrap_err();
        assert!(matches!(err, PreprocessError::MarkerOutOfBounds { .. }));
    }

    #[test]
    fn labels_follow_markers() {
        let hb = continuous(3000, |i| (i as f64).sin());
        let tasks = [Task::Idle, Task::MotorImagery, Task::MentalArithmetic, Task::Idle];
        let markers: Vec<_> = tasks
            .iter()
            .enumerate()
            .map(|(k, &t)| marker(100 + 500 * k, t))
            .collect();
        let epochs = segment_epochs(&hb, &markers, RATE).unwrap();
        assert_eq!(epochs.len(), markers.len());
        for (k, (e, t)) in epochs.iter().zip(tasks).enumerate() {
            assert_eq!(e.task, t);
            assert_eq!(e.trial_index, k);
        }
    }

    #[test]
    fn baseline_window_indices() {
        let hb = continuous(1000, |_| 0.0);
        let e = &segment_epochs(&hb, &[marker(200, Task::Idle)], RATE).unwrap()[0];
        // t in [-1, 0]: k from -13 (-0.977 s) to 0.
        let w = e.window(-1.0, 0.0, true);
        assert_eq!(w, (67 - 13)..68);
    }

    #[test]
    fn constant_epoch_becomes_zero() {
        let hb = continuous(1000, |_| 4.25);
        let e = &segment_epochs(&hb, &[marker(200, Task::Idle)], RATE).unwrap()[0];
        let c = baseline_correct(e);
        assert!(c.channels[0].hbo.iter().chain(&c.channels[0].hbr).all(|&v| v == 0.0));
    }

    #[test]
    fn zero_mean_baseline_is_untouched() {
        let hb = continuous(1000, |_| 0.0);
        let mut e = segment_epochs(&hb, &[marker(200, Task::Idle)], RATE).unwrap()[0].clone();
        let w = e.window(-1.0, 0.0, true);
        for (j, i) in w.clone().enumerate() {
            e.channels[0].hbo[i] = if j % 2 == 0 { 1.0 } else { -1.0 };
        }
        // 14 samples in the window, alternating signs: zero mean.
        assert_eq!(w.len() % 2, 0);
        e.channels[0].hbo[300] = 7.0;
        let c = baseline_correct(&e);
        for (a, b) in c.channels[0].hbo.iter().zip(&e.channels[0].hbo) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    proptest! {
        #[test]
        fn baseline_is_idempotent_and_zeroes_window(
            values in proptest::collection::vec(-1e3..1e3f64, 1000),
        ) {
            let hb = continuous(1000, |i| values[i]);
            let e = &segment_epochs(&hb, &[marker(300, Task::Idle)], RATE).unwrap()[0];
            let once = baseline_correct(e);
            let twice = baseline_correct(&once);
            let w = once.window(-1.0, 0.0, true);
            for ch in &once.channels {
                for s in [&ch.hbo, &ch.hbr] {
                    prop_assert!(mean(&s[w.clone()]).abs() <= 1e-12);
                }
            }
            for (a, b) in once.channels.iter().zip(&twice.channels) {
                for (p, q) in a.hbo.iter().chain(&a.hbr).zip(b.hbo.iter().chain(&b.hbr)) {
                    prop_assert!((p - q).abs() <= 1e-12);
                }
            }
        }
    }
}
