//! Core EEG containers, ADC-count conversion, length fitting and windowing.

use serde::{Deserialize, Serialize};

use crate::error::{EadError, Result};
use crate::matrix::Matrix;

/// One subject/trial of multichannel EEG in microvolts, `E` channels by `T` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub channel_labels: Vec<String>,
    pub sample_rate_hz: f64,
    pub data: Matrix,
    pub subject_id: String,
    pub label: Option<usize>,
}

impl Recording {
    pub fn new(
        channel_labels: Vec<String>,
        sample_rate_hz: f64,
        data: Matrix,
        subject_id: impl Into<String>,
        label: Option<usize>,
    ) -> Result<Self> {
        let rec = Recording {
            channel_labels,
            sample_rate_hz,
            data,
            subject_id: subject_id.into(),
            label,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.rows() != self.channel_labels.len() {
            return Err(EadError::Dimension(format!(
                "{} data rows but {} channel labels",
                self.data.rows(),
                self.channel_labels.len()
            )));
        }
        if self.data.cols() == 0 {
            return Err(EadError::Dimension("recording has no samples".into()));
        }
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return Err(EadError::Domain(format!(
                "sample rate must be positive, got {}",
                self.sample_rate_hz
            )));
        }
        if !self.data.is_finite() {
            return Err(EadError::Numeric("recording contains non-finite samples".into()));
        }
        Ok(())
    }

    pub fn num_channels(&self) -> usize {
        self.data.rows()
    }

    pub fn num_samples(&self) -> usize {
        self.data.cols()
    }

    pub fn channel_index(&self, label: &str) -> Option<usize> {
        let label = label.trim();
        self.channel_labels.iter().position(|l| l.trim() == label)
    }
}

/// Raw ADC counts plus the per-channel resolution in microvolts per count.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedRecording {
    pub channel_labels: Vec<String>,
    pub sample_rate_hz: f64,
    /// `E` rows of `T` integer counts.
    pub counts: Vec<Vec<i64>>,
    pub resolution: Vec<f64>,
    pub subject_id: String,
    pub label: Option<usize>,
}

/// A fixed-length, non-overlapping slice of a recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleWindow {
    pub data: Matrix,
    pub label: Option<usize>,
    pub subject_id: String,
    pub recording: usize,
    pub window: usize,
}

/// `V = R × Q`, channel by channel.
pub fn quantized_to_microvolts(q: &QuantizedRecording) -> Result<Recording> {
    let channels = q.counts.len();
    if q.resolution.len() != channels {
        return Err(EadError::Dimension(format!(
            "{} resolution values for {channels} channels",
            q.resolution.len()
        )));
    }
    if let Some((c, r)) = q
        .resolution
        .iter()
        .enumerate()
        .find(|(_, r)| !(**r > 0.0 && r.is_finite()))
    {
        return Err(EadError::Domain(format!(
            "resolution of channel {c} must be positive, got {r}"
        )));
    }
    let rows: Vec<Vec<f64>> = q
        .counts
        .iter()
        .zip(&q.resolution)
        .map(|(row, &r)| row.iter().map(|&count| r * count as f64).collect())
        .collect();
    Recording::new(
        q.channel_labels.clone(),
        q.sample_rate_hz,
        Matrix::from_rows(&rows)?,
        q.subject_id.clone(),
        q.label,
    )
}

/// Trims (keeping the head) or periodically tiles `signal` to exactly `target_len` samples.
pub fn fit_length(signal: &[f64], target_len: usize) -> Result<Vec<f64>> {
    if signal.is_empty() {
        return Err(EadError::Domain("cannot fit an empty signal".into()));
    }
    if target_len == 0 {
        return Err(EadError::Domain("target length must be at least 1".into()));
    }
    Ok(signal.iter().copied().cycle().take(target_len).collect())
}

/// Cuts `rec` into `floor(T / window_len)` consecutive windows; the remainder is dropped.
pub fn extract_windows(
    rec: &Recording,
    recording_index: usize,
    window_len: usize,
) -> Result<Vec<SampleWindow>> {
    if window_len == 0 {
        return Err(EadError::Domain("window length must be at least 1".into()));
    }
    let count = rec.num_samples() / window_len;
    let windows = (0..count)
        .map(|k| {
            let start = k * window_len;
            let data = Matrix::from_fn(rec.num_channels(), window_len, |c, t| {
                rec.data.get(c, start + t)
            });
            SampleWindow {
                data,
                label: rec.label,
                subject_id: rec.subject_id.clone(),
                recording: recording_index,
                window: k,
            }
        })
        .collect();
    Ok(windows)
}
