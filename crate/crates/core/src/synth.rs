//! Synthetic EEG-like datasets with class-specific oscillations.
//!
//! Every channel of a class-`c` trial carries the same two sinusoids (see
//! [`class_frequencies`]) with per-channel random phase, a per-subject channel
//! gain, Gaussian noise, a DC offset and 50 Hz line interference.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{EadError, Result};
use crate::matrix::Matrix;
use crate::montage::{MontageMap, MontageTarget, BFM_CHANNELS};
use crate::signal::Recording;
use crate::manifest::Split;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub num_channels: usize,
    pub num_timesteps: usize,
    pub sample_rate_hz: f64,
    /// Subjects in the train, val and test splits.
    pub subjects: [usize; 3],
    pub trials_per_subject_class: usize,
    pub amplitude: f64,
    pub noise_std: f64,
    pub line_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// 4 classes, 16 × 256 trials; 800/200/200 trials across 40/10/10 subjects.
    fn default() -> Self {
        SynthConfig {
            num_classes: 4,
            num_channels: 16,
            num_timesteps: 256,
            sample_rate_hz: 256.0,
            subjects: [40, 10, 10],
            trials_per_subject_class: 5,
            amplitude: 1.0,
            noise_std: 1.0,
            line_noise: 0.5,
            seed: 0,
        }
    }
}

/// The pair of frequencies (Hz) that identifies class `c`.
pub fn class_frequencies(class: usize) -> [f64; 2] {
    let base = 5.0 + 4.0 * class as f64;
    [base, base + 2.0]
}

pub fn synth_channel_labels(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("S{i:02}")).collect()
}

/// Maps every standard target to two synthetic sources, `S(i)` and `S(i + 5)` modulo `n`.
pub fn synth_montage(num_sources: usize) -> Result<MontageMap> {
    if num_sources == 0 {
        return Err(EadError::Config("synthetic montage needs at least one source".into()));
    }
    let labels = synth_channel_labels(num_sources);
    let targets = BFM_CHANNELS
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut sources = vec![labels[i % num_sources].clone()];
            let second = &labels[(i + 5) % num_sources];
            if !sources.contains(second) {
                sources.push(second.clone());
            }
            MontageTarget {
                target_label: t.to_string(),
                sources,
            }
        })
        .collect();
    MontageMap::new(targets)
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub class_names: Vec<String>,
    pub recordings: Vec<Recording>,
    pub splits: Vec<Split>,
}

impl SynthDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Recording> {
        self.recordings
            .iter()
            .zip(&self.splits)
            .filter(move |(_, s)| **s == split)
            .map(|(r, _)| r)
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.num_classes == 0 || cfg.num_channels == 0 || cfg.num_timesteps == 0 {
        return Err(EadError::Config("synthetic dataset dimensions must be positive".into()));
    }
    let top = class_frequencies(cfg.num_classes - 1)[1];
    if 2.0 * top >= cfg.sample_rate_hz {
        return Err(EadError::Config(format!(
            "class frequency {top} Hz aliases at {} Hz",
            cfg.sample_rate_hz
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_std)
        .map_err(|e| EadError::Config(format!("noise standard deviation: {e}")))?;
    let labels = synth_channel_labels(cfg.num_channels);
    let mut recordings = Vec::new();
    let mut splits = Vec::new();
    let mut subject = 0;
    for (split, &count) in [Split::Train, Split::Val, Split::Test].iter().zip(&cfg.subjects) {
        for _ in 0..count {
            subject += 1;
            let subject_id = format!("sub{subject:03}");
            let gains: Vec<f64> = (0..cfg.num_channels).map(|_| rng.gen_range(0.7..1.3)).collect();
            let offsets: Vec<f64> = (0..cfg.num_channels).map(|_| rng.gen_range(-5.0..5.0)).collect();
            for class in 0..cfg.num_classes {
                let freqs = class_frequencies(class);
                for _ in 0..cfg.trials_per_subject_class {
                    let mut data = Matrix::zeros(cfg.num_channels, cfg.num_timesteps);
                    let line_phase = rng.gen_range(0.0..2.0 * PI);
                    for c in 0..cfg.num_channels {
                        let phases = [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)];
                        let row = data.row_mut(c);
                        for (t, v) in row.iter_mut().enumerate() {
                            let time = t as f64 / cfg.sample_rate_hz;
                            let signal: f64 = freqs
                                .iter()
                                .zip(phases)
                                .map(|(f, p)| (2.0 * PI * f * time + p).sin())
                                .sum();
                            *v = gains[c] * cfg.amplitude * signal
                                + cfg.line_noise * (2.0 * PI * 50.0 * time + line_phase).sin()
                                + offsets[c]
                                + noise.sample(&mut rng);
                        }
                    }
                    recordings.push(Recording::new(
                        labels.clone(),
                        cfg.sample_rate_hz,
                        data,
                        subject_id.clone(),
                        Some(class),
                    )?);
                    splits.push(*split);
                }
            }
        }
    }
    Ok(SynthDataset {
        class_names: (0..cfg.num_classes).map(|c| format!("class{c}")).collect(),
        recordings,
        splits,
    })
}
