//! Dataset manifests, recording file formats and subject-independent splits.
//!
//! A manifest is a TOML document:
//!
//! ```toml
//! montage = "builtin-table1"        # or a path to a montage map file
//!
//! [splitting]                       # required when any entry is unassigned
//! fractions = [0.6, 0.2, 0.2]       # train, val, test
//! seed = 7
//!
//! [classes]                         # optional; inferred from labels if absent
//! rest = 0
//! task = 1
//!
//! [[recording]]
//! path = "rec/s01_rest.bin"         # relative to the manifest's directory
//! format = "f32-binary"             # or "delimited-text"
//! channels = ["Fp1", "Fp2"]
//! sample_rate_hz = 250.0
//! resolution = [0.1, 0.1]           # optional: file holds ADC counts
//! label = "rest"
//! subject = "s01"
//! split = "train"                   # train | val | test | unassigned (default)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EadError, Result};
use crate::matrix::Matrix;
use crate::montage::BUILTIN_TABLE1;
use crate::signal::{quantized_to_microvolts, QuantizedRecording, Recording};

/// First 8 bytes of a binary recording file.
pub const RECORDING_MAGIC: &[u8; 8] = b"EADREC01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub const ASSIGNED: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = EadError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(EadError::Manifest(format!(
                "unknown split `{other}` (expected train, val, test or unassigned)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordingFormat {
    #[serde(rename = "f32-binary")]
    F32Binary,
    #[serde(rename = "delimited-text")]
    DelimitedText,
}

impl RecordingFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordingFormat::F32Binary => "f32-binary",
            RecordingFormat::DelimitedText => "delimited-text",
        }
    }
}

impl FromStr for RecordingFormat {
    type Err = EadError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32-binary" => Ok(RecordingFormat::F32Binary),
            "delimited-text" => Ok(RecordingFormat::DelimitedText),
            other => Err(EadError::Manifest(format!(
                "unknown format `{other}` (expected f32-binary or delimited-text)"
            ))),
        }
    }
}

/// Writes `EADREC01`, channels and timesteps as u64 LE, then row-major f32 LE samples.
pub fn write_recording_bin(path: &Path, data: &Matrix) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| EadError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| EadError::io(path, e));
    put(RECORDING_MAGIC)?;
    put(&(data.rows() as u64).to_le_bytes())?;
    put(&(data.cols() as u64).to_le_bytes())?;
    for &v in data.as_slice() {
        put(&(v as f32).to_le_bytes())?;
    }
    w.flush().map_err(|e| EadError::io(path, e))
}

pub fn read_recording_bin(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| EadError::io(path, e))?;
    let integrity = |reason: String| EadError::Integrity {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 24 || &bytes[..8] != RECORDING_MAGIC {
        return Err(integrity("missing EADREC01 header".into()));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| integrity("shape overflows".into()))?;
    if bytes.len() - 24 != expected {
        return Err(integrity(format!(
            "{rows}x{cols} needs {expected} data bytes, found {}",
            bytes.len() - 24
        )));
    }
    let data = bytes[24..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// One channel per line; values separated by commas and/or whitespace; `#` starts a comment line.
pub fn read_recording_text(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path).map_err(|e| EadError::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>().map_err(|_| {
                    EadError::Manifest(format!("{}:{}: `{t}` is not a number", path.display(), n + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Matrix::from_rows(&rows)
}

pub fn write_recording_text(path: &Path, data: &Matrix) -> Result<()> {
    let mut out = String::new();
    for row in data.iter_rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| EadError::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub format: RecordingFormat,
    pub channel_labels: Vec<String>,
    pub sample_rate_hz: f64,
    pub resolution: Option<Vec<f64>>,
    pub label: String,
    pub subject_id: String,
    pub split: Split,
    /// 1-based line of the entry in its manifest, 0 if built in memory.
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStrategy {
    pub fractions: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Class names by index.
    pub classes: Vec<String>,
    /// `builtin-table1` or a montage file path.
    pub montage: String,
    pub splitting: Option<SplitStrategy>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    montage: Option<String>,
    splitting: Option<SplitStrategy>,
    classes: Option<BTreeMap<String, i64>>,
    #[serde(default)]
    recording: Vec<toml::Spanned<RawEntry>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    path: String,
    format: String,
    channels: Vec<String>,
    sample_rate_hz: f64,
    resolution: Option<Vec<f64>>,
    label: String,
    subject: String,
    split: Option<String>,
}

#[derive(Serialize)]
struct ManifestOut<'a> {
    montage: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    splitting: Option<&'a SplitStrategy>,
    classes: BTreeMap<&'a str, usize>,
    recording: Vec<EntryOut<'a>>,
}

#[derive(Serialize)]
struct EntryOut<'a> {
    path: String,
    format: &'a str,
    channels: &'a [String],
    sample_rate_hz: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    resolution: Option<&'a [f64]>,
    label: &'a str,
    subject: &'a str,
    split: &'a str,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn subjects(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.subject_id.as_str()).collect()
    }

    /// Parses manifest text; relative recording paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawManifest = toml::from_str(text).map_err(|e| {
            let at = e.span().map(|s| format!(" (line {})", line_of(text, s.start))).unwrap_or_default();
            EadError::Manifest(format!("{}{at}", e.message()))
        })?;

        let mut entries = Vec::with_capacity(raw.recording.len());
        for (i, spanned) in raw.recording.into_iter().enumerate() {
            let line = line_of(text, spanned.span().start);
            let r = spanned.into_inner();
            let name = |msg: String| EadError::Manifest(format!("recording {i} (line {line}, {}): {msg}", r.path));
            let format = r.format.parse::<RecordingFormat>().map_err(|e| name(e.to_string()))?;
            let split = match &r.split {
                Some(s) => s.parse::<Split>().map_err(|e| name(e.to_string()))?,
                None => Split::Unassigned,
            };
            if r.channels.is_empty() {
                return Err(name("no channels listed".into()));
            }
            if let Some(res) = &r.resolution {
                if res.len() != r.channels.len() {
                    return Err(name(format!(
                        "{} resolution values for {} channels",
                        res.len(),
                        r.channels.len()
                    )));
                }
            }
            if !(r.sample_rate_hz > 0.0 && r.sample_rate_hz.is_finite()) {
                return Err(name(format!("sample rate must be positive, got {}", r.sample_rate_hz)));
            }
            let path = base_dir.join(&r.path);
            if !path.is_file() {
                return Err(name(format!("file {} does not exist", path.display())));
            }
            entries.push(ManifestEntry {
                path,
                format,
                channel_labels: r.channels,
                sample_rate_hz: r.sample_rate_hz,
                resolution: r.resolution,
                label: r.label,
                subject_id: r.subject,
                split,
                line,
            });
        }
        if entries.is_empty() {
            return Err(EadError::Manifest("manifest lists no recordings".into()));
        }

        let classes = match raw.classes {
            Some(table) => {
                let mut by_index: BTreeMap<i64, String> = BTreeMap::new();
                for (name, idx) in table {
                    if let Some(prev) = by_index.insert(idx, name.clone()) {
                        return Err(EadError::Manifest(format!(
                            "classes `{prev}` and `{name}` share index {idx}"
                        )));
                    }
                }
                if by_index.keys().copied().ne(0..by_index.len() as i64) {
                    return Err(EadError::Manifest(
                        "class indices must be dense 0..K-1".into(),
                    ));
                }
                by_index.into_values().collect()
            }
            None => entries
                .iter()
                .map(|e| e.label.clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
        };
        let manifest = DatasetManifest {
            entries,
            classes,
            montage: raw.montage.unwrap_or_else(|| BUILTIN_TABLE1.to_string()),
            splitting: raw.splitting,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            if self.class_index(&e.label).is_none() {
                return Err(EadError::Manifest(format!(
                    "recording {i} (line {}, {}): label `{}` is not in the class table",
                    e.line,
                    e.path.display(),
                    e.label
                )));
            }
        }
        if self.entries.iter().any(|e| e.split == Split::Unassigned) && self.splitting.is_none() {
            return Err(EadError::Manifest(
                "some recordings are unassigned but no [splitting] strategy is configured".into(),
            ));
        }
        Ok(())
    }

    /// Reads entry `i` and converts it to microvolts.
    pub fn load_recording(&self, i: usize) -> Result<Recording> {
        let e = self
            .entries
            .get(i)
            .ok_or_else(|| EadError::Manifest(format!("no recording {i}")))?;
        let data = match e.format {
            RecordingFormat::F32Binary => read_recording_bin(&e.path)?,
            RecordingFormat::DelimitedText => read_recording_text(&e.path)?,
        };
        if data.rows() != e.channel_labels.len() {
            return Err(EadError::Manifest(format!(
                "recording {i} (line {}, {}): file has {} channels, manifest lists {}",
                e.line,
                e.path.display(),
                data.rows(),
                e.channel_labels.len()
            )));
        }
        let label = self.class_index(&e.label);
        match &e.resolution {
            None => Recording::new(e.channel_labels.clone(), e.sample_rate_hz, data, e.subject_id.clone(), label),
            Some(resolution) => {
                let counts = data
                    .iter_rows()
                    .map(|row| {
                        row.iter()
                            .map(|&v| {
                                if v.fract() != 0.0 {
                                    Err(EadError::Manifest(format!(
                                        "recording {i} ({}): ADC count {v} is not an integer",
                                        e.path.display()
                                    )))
                                } else {
                                    Ok(v as i64)
                                }
                            })
                            .collect::<Result<Vec<i64>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                quantized_to_microvolts(&QuantizedRecording {
                    channel_labels: e.channel_labels.clone(),
                    sample_rate_hz: e.sample_rate_hz,
                    counts,
                    resolution: resolution.clone(),
                    subject_id: e.subject_id.clone(),
                    label,
                })
            }
        }
    }

    /// Serialises back to TOML with paths made relative to `base_dir` where possible.
    pub fn to_toml(&self, base_dir: &Path) -> String {
        let out = ManifestOut {
            montage: &self.montage,
            splitting: self.splitting.as_ref(),
            classes: self.classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect(),
            recording: self
                .entries
                .iter()
                .map(|e| EntryOut {
                    path: e
                        .path
                        .strip_prefix(base_dir)
                        .unwrap_or(&e.path)
                        .to_string_lossy()
                        .into_owned(),
                    format: e.format.as_str(),
                    channels: &e.channel_labels,
                    sample_rate_hz: e.sample_rate_hz,
                    resolution: e.resolution.as_deref(),
                    label: &e.label,
                    subject: &e.subject_id,
                    split: e.split.as_str(),
                })
                .collect(),
        };
        toml::to_string(&out).expect("manifest serializes")
    }

    /// Assigns missing splits with the configured strategy; fixed splits are kept.
    pub fn resolve_splits(self) -> Result<Self> {
        if self.entries.iter().all(|e| e.split != Split::Unassigned) {
            return Ok(self);
        }
        let strategy = self
            .splitting
            .clone()
            .ok_or_else(|| EadError::Manifest("no [splitting] strategy configured".into()))?;
        split_subject_independent(self, &strategy.fractions, strategy.seed)
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| EadError::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    DatasetManifest::parse(&text, base)
}

/// Subject counts per split: floor of `n * f`, remainders by largest fraction,
/// then every split with a positive fraction is topped up to at least one subject.
pub fn split_counts(n: usize, fractions: &[f64]) -> Result<Vec<usize>> {
    let total: f64 = fractions.iter().sum();
    if fractions.is_empty() || fractions.iter().any(|f| !(*f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(EadError::Config(format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    let wanted = fractions.iter().filter(|f| **f > 0.0).count();
    if n < wanted {
        return Err(EadError::Config(format!(
            "{n} subjects cannot fill {wanted} splits"
        )));
    }
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    for i in 0..counts.len() {
        if fractions[i] > 0.0 && counts[i] == 0 {
            let donor = (0..counts.len()).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).expect("nonempty");
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    Ok(counts)
}

/// Shuffles subjects with `seed` and assigns each subject, with all of its
/// recordings, to train/val/test according to `fractions`.
pub fn split_subject_independent(mut manifest: DatasetManifest, fractions: &[f64], seed: u64) -> Result<DatasetManifest> {
    if fractions.len() != 3 {
        return Err(EadError::Config(format!(
            "expected train/val/test fractions, got {} values",
            fractions.len()
        )));
    }
    let mut subjects: Vec<String> = manifest.subjects().into_iter().map(String::from).collect();
    let counts = split_counts(subjects.len(), fractions)?;
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment: BTreeMap<String, Split> = BTreeMap::new();
    let mut it = subjects.into_iter();
    for (split, count) in Split::ASSIGNED.iter().zip(counts) {
        for s in it.by_ref().take(count) {
            assignment.insert(s, *split);
        }
    }
    for e in &mut manifest.entries {
        e.split = assignment[&e.subject_id];
    }
    Ok(manifest)
}
