//! Mapping an arbitrary acquisition montage onto the 23-channel base-model layout.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EadError, Result};
use crate::matrix::Matrix;
use crate::signal::{fit_length, Recording};

/// Channel order expected by the base model.
pub const BFM_CHANNELS: [&str; 23] = [
    "FP1", "FP2", "F3", "F4", "C3", "C4", "P3", "P4", "O1", "O2", "F7", "F8", "T3", "T4", "T5",
    "T6", "A1", "A2", "FZ", "CZ", "PZ", "T1", "T2",
];

/// EEG-ImageNet electrodes per base-model channel. The first entry is the nearest
/// single electrode; the whole list is the mixing neighbourhood.
const TABLE1: [(&str, [&str; 5]); 23] = [
    ("FP1", ["Fp1", "Afp1", "AF3", "AF7", "AFF5h"]),
    ("FP2", ["Fp2", "Afp2", "AF4", "AF8", "AFF6h"]),
    ("F3", ["F3", "F5", "F1", "FFC5h", "FFC3h"]),
    ("F4", ["F4", "F2", "F6", "FFC4h", "FFC6h"]),
    ("C3", ["C3", "C5", "C1", "CCP5h", "CCP3h"]),
    ("C4", ["C4", "C6", "C2", "CCP4h", "CCP6h"]),
    ("P3", ["P3", "P1", "P5", "CPP5h", "CPP3h"]),
    ("P4", ["P4", "P2", "P6", "CPP4h", "CPP6h"]),
    ("O1", ["O1", "POO1", "PO3", "PO7", "POO9h"]),
    ("O2", ["O2", "POO2", "PO4", "PO8", "POO10h"]),
    ("F7", ["F7", "F5", "F9", "FFT9h", "FFT7h"]),
    ("F8", ["F8", "F6", "F10", "FFT8h", "FFT10h"]),
    ("T3", ["T7", "TTP7h", "C5", "FTT7h", "FTT9h"]),
    ("T4", ["T8", "TTP8h", "C6", "FTT8h", "FTT10h"]),
    ("T5", ["TP7", "TTP7h", "CP5", "TPP7h", "TPP9h"]),
    ("T6", ["TP8", "TTP8h", "CP6", "TPP8h", "TPP10h"]),
    ("A1", ["TP9", "TP7", "T7", "FTT9h", "FT9"]),
    ("A2", ["TP10", "TP8", "T8", "FTT10h", "FT10"]),
    ("FZ", ["Fz", "AFF1h", "AFF2h", "FFC1h", "FFC2h"]),
    ("CZ", ["Cz", "FCC1h", "FCC2h", "CCP1h", "CCP2h"]),
    ("PZ", ["Pz", "CPP1h", "CPP2h", "POO1h", "PPO2h"]),
    ("T1", ["TTP7h", "C5", "TP7", "CP5", "CCP5h"]),
    ("T2", ["TTP8h", "C6", "TP8", "CP6", "CCP6h"]),
];

pub const BUILTIN_TABLE1: &str = "builtin-table1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MontageTarget {
    pub target_label: String,
    pub sources: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MontageMap {
    targets: Vec<MontageTarget>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlignmentMode {
    Select,
    Mix { target_len: usize },
}

impl MontageMap {
    /// Validates the 23-target layout: base-model order, no duplicates, nonempty sources.
    pub fn new(targets: Vec<MontageTarget>) -> Result<Self> {
        if targets.len() != BFM_CHANNELS.len() {
            return Err(EadError::Config(format!(
                "montage map must have {} targets, got {}",
                BFM_CHANNELS.len(),
                targets.len()
            )));
        }
        let targets: Vec<MontageTarget> = targets
            .into_iter()
            .map(|t| MontageTarget {
                target_label: t.target_label.trim().to_string(),
                sources: t.sources.iter().map(|s| s.trim().to_string()).collect(),
            })
            .collect();
        for (i, (t, expected)) in targets.iter().zip(BFM_CHANNELS).enumerate() {
            if targets[..i].iter().any(|o| o.target_label == t.target_label) {
                return Err(EadError::Config(format!(
                    "duplicate montage target `{}`",
                    t.target_label
                )));
            }
            if t.target_label != expected {
                return Err(EadError::Config(format!(
                    "montage target {i} is `{}`, expected `{expected}`",
                    t.target_label
                )));
            }
            if t.sources.is_empty() || t.sources.iter().any(String::is_empty) {
                return Err(EadError::Config(format!(
                    "montage target `{}` needs nonempty source labels",
                    t.target_label
                )));
            }
        }
        Ok(MontageMap { targets })
    }

    /// The EEG-ImageNet to base-model table.
    pub fn builtin_table1() -> Self {
        let targets = TABLE1
            .iter()
            .map(|(t, s)| MontageTarget {
                target_label: t.to_string(),
                sources: s.iter().map(|x| x.to_string()).collect(),
            })
            .collect();
        MontageMap { targets }
    }

    pub fn targets(&self) -> &[MontageTarget] {
        &self.targets
    }

    /// Keeps only the first source of every target.
    pub fn nearest_only(&self) -> Self {
        MontageMap {
            targets: self
                .targets
                .iter()
                .map(|t| MontageTarget {
                    target_label: t.target_label.clone(),
                    sources: t.sources[..1].to_vec(),
                })
                .collect(),
        }
    }

    pub fn max_sources(&self) -> usize {
        self.targets.iter().map(|t| t.sources.len()).max().unwrap_or(0)
    }

    /// Parses `TARGET: src1,src2,...` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut targets = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (target, sources) = line.split_once(':').ok_or_else(|| {
                EadError::Config(format!("montage line {}: expected `TARGET: sources`", n + 1))
            })?;
            targets.push(MontageTarget {
                target_label: target.trim().to_string(),
                sources: sources
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect(),
            });
        }
        MontageMap::new(targets)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.targets {
            let _ = writeln!(out, "{}: {}", t.target_label, t.sources.join(","));
        }
        out
    }

    /// `builtin-table1` or a path to a montage text file.
    pub fn load(spec: &str) -> Result<Self> {
        if spec == BUILTIN_TABLE1 {
            return Ok(Self::builtin_table1());
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).map_err(|e| EadError::io(path, e))?;
        Self::parse(&text)
    }
}

fn source_rows<'a>(
    rec: &'a Recording,
    target: &MontageTarget,
) -> Result<Vec<&'a [f64]>> {
    target
        .sources
        .iter()
        .map(|label| {
            rec.channel_index(label)
                .map(|i| rec.data.row(i))
                .ok_or_else(|| EadError::Alignment {
                    target: target.target_label.clone(),
                    label: label.clone(),
                })
        })
        .collect()
}

fn aligned(rec: &Recording, rows: Vec<Vec<f64>>) -> Result<Recording> {
    Ok(Recording {
        channel_labels: BFM_CHANNELS.iter().map(|s| s.to_string()).collect(),
        sample_rate_hz: rec.sample_rate_hz,
        data: Matrix::from_rows(&rows)?,
        subject_id: rec.subject_id.clone(),
        label: rec.label,
    })
}

/// Row `i` is the first source electrode of target `i`, length-fitted to `target_len`.
pub fn nearest_channel_select(
    rec: &Recording,
    map: &MontageMap,
    target_len: usize,
) -> Result<Recording> {
    let rows = map
        .targets
        .iter()
        .map(|t| {
            let label = &t.sources[0];
            let idx = rec.channel_index(label).ok_or_else(|| EadError::Alignment {
                target: t.target_label.clone(),
                label: label.clone(),
            })?;
            fit_length(rec.data.row(idx), target_len)
        })
        .collect::<Result<Vec<_>>>()?;
    aligned(rec, rows)
}

/// Segment lengths for `k` sources sharing `target_len` samples; earlier sources
/// take the remainder.
pub fn mix_segment_lengths(target_len: usize, k: usize) -> Vec<usize> {
    let base = target_len / k;
    let extra = target_len % k;
    (0..k).map(|i| base + usize::from(i < extra)).collect()
}

/// Row `i` concatenates every source of target `i` in listed order, each fitted to
/// its share of `target_len`.
pub fn mix_channels(rec: &Recording, map: &MontageMap, target_len: usize) -> Result<Recording> {
    let rows = map
        .targets
        .iter()
        .map(|t| {
            let k = t.sources.len();
            if k > target_len {
                return Err(EadError::Domain(format!(
                    "target `{}` mixes {k} sources into only {target_len} samples",
                    t.target_label
                )));
            }
            let sources = source_rows(rec, t)?;
            let mut row = Vec::with_capacity(target_len);
            for (src, len) in sources.iter().zip(mix_segment_lengths(target_len, k)) {
                row.extend(fit_length(src, len)?);
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    aligned(rec, rows)
}
