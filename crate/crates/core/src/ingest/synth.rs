//! Labelled synthetic recordings.
//!
//! Each trial adds a task response to every channel: the canonical
//! double-gamma haemodynamic response convolved with a 10 s task boxcar,
//! normalized to unit peak and scaled by the per-channel gain of the trial's
//! task. Wavelength 1 carries the response as is, wavelength 2 carries
//! `-HBR_RATIO` times it (an HbR-like mirror). Independent Gaussian noise and
//! two sinusoidal drifts (0.5 Hz and 0.005 Hz, random phase) are added per
//! wavelength.
//!
//! Draw order from the seeded ChaCha8 stream is fixed: trial order shuffle,
//! onset jitters, then per channel the four drift phases followed by the
//! noise samples (wavelength 1 then 2).

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ChannelSeries, IngestError, Recording, TrialMarker};
use crate::rng::seeded;
use crate::task::Task;

/// Signal before the first onset, in seconds.
pub const LEAD_IN_S: f64 = 30.0;
/// Minimum onset-to-onset spacing, in seconds.
pub const TRIAL_SPACING_S: f64 = 30.0;
/// Onset jitter is uniform on `[0, TRIAL_JITTER_S)`.
pub const TRIAL_JITTER_S: f64 = 5.0;
/// Signal after the last onset, in seconds.
pub const TAIL_S: f64 = 35.0;
/// Task duration (boxcar length), in seconds.
pub const TASK_DURATION_S: f64 = 10.0;
/// Wavelength-2 response relative to wavelength 1.
pub const HBR_RATIO: f64 = 0.3;

const DRIFT_FREQS_HZ: [f64; 2] = [0.5, 0.005];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub subject_id: String,
    pub sample_rate_hz: f64,
    pub n_trials_per_class: usize,
    pub noise_sd: f64,
    pub drift_amplitude: f64,
    pub seed: u64,
    /// Per-channel response gain for every task. All vectors have one entry
    /// per channel; channels are named `ch1`, `ch2`, ...
    pub class_response_gains: BTreeMap<Task, Vec<f64>>,
}

impl Default for SynthesisConfig {
    /// 16 channels at 13.3 Hz, 30 trials per class. Channels 1-4 respond
    /// positively to MI and negatively to MA, the rest respond weakly.
    fn default() -> Self {
        let n = 16;
        let strength = |c: usize| if c < 4 { 1.0 } else { 0.15 };
        let mut gains = BTreeMap::new();
        gains.insert(Task::MotorImagery, (0..n).map(strength).collect());
        gains.insert(
            Task::MentalArithmetic,
            (0..n).map(|c| -strength(c)).collect(),
        );
        gains.insert(Task::Idle, vec![0.0; n]);
        SynthesisConfig {
            subject_id: "S01".into(),
            sample_rate_hz: 13.3,
            n_trials_per_class: 30,
            noise_sd: 1.0,
            drift_amplitude: 0.5,
            seed: 0,
            class_response_gains: gains,
        }
    }
}

impl SynthesisConfig {
    pub fn n_channels(&self) -> usize {
        self.class_response_gains.values().next().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |m: &str| Err(IngestError::InvalidConfig(m.to_string()));
        if self.n_trials_per_class == 0 {
            return bad("n_trials_per_class must be at least 1");
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return bad("noise_sd must be finite and non-negative");
        }
        if !self.drift_amplitude.is_finite() {
            return bad("drift_amplitude must be finite");
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return bad("sample_rate_hz must be positive");
        }
        let n = self.n_channels();
        if n == 0 {
            return bad("class_response_gains must name at least one channel");
        }
        for task in Task::ALL {
            match self.class_response_gains.get(&task) {
                None => return bad(&format!("missing gains for task {task}")),
                Some(g) if g.len() != n => {
                    return bad(&format!("gain vector for {task} has {} entries, expected {n}", g.len()))
                }
                Some(g) if g.iter().any(|v| !v.is_finite()) => {
                    return bad(&format!("gain vector for {task} is not finite"))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// Canonical double-gamma haemodynamic response at `t` seconds after onset:
/// a gamma(6, 1) peak minus 1/6 of a gamma(16, 1) undershoot.
pub fn canonical_hrf(t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let gamma_pdf = |shape: i32, gamma_fn: f64| t.powi(shape - 1) * (-t).exp() / gamma_fn;
    // Γ(6) = 5!, Γ(16) = 15!
    gamma_pdf(6, 120.0) - gamma_pdf(16, 1_307_674_368_000.0) / 6.0
}

/// Boxcar-convolved response sampled at `rate`, normalized to unit peak.
/// Index `k` is `k / rate` seconds after onset.
pub fn task_response(rate: f64, n_samples: usize) -> Vec<f64> {
    let dt = 1.0 / rate;
    let box_len = (TASK_DURATION_S * rate).round() as usize;
    let hrf: Vec<f64> = (0..n_samples).map(|k| canonical_hrf(k as f64 * dt)).collect();
    let mut resp: Vec<f64> = (0..n_samples)
        .map(|k| {
            let hi = k.min(box_len.saturating_sub(1));
            (0..=hi).map(|j| hrf[k - j]).sum::<f64>() * dt
        })
        .collect();
    let peak = resp.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        resp.iter_mut().for_each(|v| *v /= peak);
    }
    resp
}

/// Generates a labelled recording. Identical configs give bit-identical
/// recordings.
pub fn synthesize_recording(cfg: &SynthesisConfig) -> Result<Recording, IngestError> {
    cfg.validate()?;
    let rate = cfg.sample_rate_hz;
    let mut rng = seeded(cfg.seed);

    let mut order: Vec<Task> = Task::ALL
        .iter()
        .flat_map(|&t| std::iter::repeat_n(t, cfg.n_trials_per_class))
        .collect();
    order.shuffle(&mut rng);

    let mut markers = Vec::with_capacity(order.len());
    let mut t = LEAD_IN_S;
    for &task in &order {
        markers.push(TrialMarker {
            onset_sample: (t * rate).round() as usize,
            task,
        });
        t += TRIAL_SPACING_S + rng.random::<f64>() * TRIAL_JITTER_S;
    }
    let last_onset = markers.last().map_or(0, |m| m.onset_sample);
    let len = last_onset + (TAIL_S * rate).round() as usize;

    let response = task_response(rate, (TAIL_S * rate).round() as usize);
    let n_ch = cfg.n_channels();
    let mut channels = Vec::with_capacity(n_ch);
    for c in 0..n_ch {
        let mut clean = vec![0.0; len];
        for m in &markers {
            let gain = cfg.class_response_gains[&m.task][c];
            for (k, r) in response.iter().enumerate() {
                if let Some(v) = clean.get_mut(m.onset_sample + k) {
                    *v += gain * r;
                }
            }
        }
        let phases: [f64; 4] = std::array::from_fn(|_| rng.random::<f64>() * 2.0 * PI);
        let drift = |i: usize, wl: usize| -> f64 {
            let t = i as f64 / rate;
            DRIFT_FREQS_HZ
                .iter()
                .enumerate()
                .map(|(j, f)| (2.0 * PI * f * t + phases[2 * wl + j]).sin())
                .sum::<f64>()
                * cfg.drift_amplitude
        };
        let mut noise = |_| -> f64 { rng.sample::<f64, _>(StandardNormal) * cfg.noise_sd };
        let od_wl1: Vec<f64> = (0..len)
            .map(|i| clean[i] + drift(i, 0) + noise(i) + 0.0)
            .collect();
        let od_wl2: Vec<f64> = (0..len)
            .map(|i| -HBR_RATIO * clean[i] + drift(i, 1) + noise(i) + 0.0)
            .collect();
        channels.push(ChannelSeries {
            channel_id: format!("ch{}", c + 1),
            od_wl1,
            od_wl2,
        });
    }
    Recording::new(cfg.subject_id.clone(), rate, channels, markers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthesisConfig {
        let mut cfg = SynthesisConfig {
            n_trials_per_class: 4,
            seed,
            ..SynthesisConfig::default()
        };
        for g in cfg.class_response_gains.values_mut() {
            g.truncate(3);
        }
        cfg
    }

    #[test]
    fn same_seed_same_recording() {
        let a = synthesize_recording(&small(7)).unwrap();
        let b = synthesize_recording(&small(7)).unwrap();
        assert_eq!(a, b);
        let bits = |r: &Recording| -> Vec<u64> {
            r.channels
                .iter()
                .flat_map(|c| c.od_wl1.iter().chain(&c.od_wl2).map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        let c = synthesize_recording(&small(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_everything_gives_zero_signal() {
        let mut cfg = small(1);
        cfg.noise_sd = 0.0;
        cfg.drift_amplitude = 0.0;
        for g in cfg.class_response_gains.values_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let rec = synthesize_recording(&cfg).unwrap();
        for ch in &rec.channels {
            assert!(ch.od_wl1.iter().chain(&ch.od_wl2).all(|&v| v == 0.0));
            assert!(ch.od_wl2.iter().all(|v| v.is_sign_positive()));
        }
    }

    #[test]
    fn ten_trials_per_class() {
        let cfg = SynthesisConfig {
            n_trials_per_class: 10,
            ..small(3)
        };
        let rec = synthesize_recording(&cfg).unwrap();
        assert_eq!(rec.markers.len(), 30);
        for task in Task::ALL {
            assert_eq!(rec.markers.iter().filter(|m| m.task == task).count(), 10);
        }
        rec.validate().unwrap();
    }

    #[test]
    fn order_is_shuffled() {
        let rec = synthesize_recording(&SynthesisConfig {
            n_trials_per_class: 10,
            ..small(5)
        })
        .unwrap();
        let blocked: Vec<Task> = Task::ALL
            .iter()
            .flat_map(|&t| std::iter::repeat_n(t, 10))
            .collect();
        let got: Vec<Task> = rec.markers.iter().map(|m| m.task).collect();
        assert_ne!(got, blocked);
    }

    #[test]
    fn response_peaks_after_onset() {
        let rate = 13.3;
        let hrf_peak = (0..400)
            .max_by(|&a, &b| {
                canonical_hrf(a as f64 / rate).total_cmp(&canonical_hrf(b as f64 / rate))
            })
            .unwrap() as f64
            / rate;
        assert!((4.5..=6.5).contains(&hrf_peak), "hrf peak at {hrf_peak}");
        let resp = task_response(rate, 400);
        let (k, &peak) = resp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        assert_eq!(peak, 1.0);
        let t_peak = k as f64 / rate;
        assert!((10.0..16.0).contains(&t_peak), "boxcar response peak at {t_peak}");
        assert_eq!(resp[0], 0.0);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = small(0);
        cfg.n_trials_per_class = 0;
        assert!(synthesize_recording(&cfg).is_err());
        let mut cfg = small(0);
        cfg.class_response_gains.remove(&Task::Idle);
        assert!(synthesize_recording(&cfg).is_err());
        let mut cfg = small(0);
        cfg.class_response_gains
            .get_mut(&Task::Idle)
            .unwrap()
            .push(0.0);
        assert!(synthesize_recording(&cfg).is_err());
        let mut cfg = small(0);
        cfg.noise_sd = -1.0;
        assert!(synthesize_recording(&cfg).is_err());
    }
}
