//! On-disk containers for checkpoints and window sets, and embedding export.
//!
//! Both binary files share one layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic, `EADCKPT1` or `EADWIN01` |
//! | 4 | u32 format version |
//! | 8 | u64 header length `h` |
//! | h | UTF-8 JSON header |
//! | 8 | u64 value count `n` |
//! | 8n | f64 payload |
//! | 32 | SHA-256 of every preceding byte |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{AdapterConfig, AdapterParams};
use crate::bfm::{Bfm, BfmConfig, EmbeddingBatch, EncoderParams};
use crate::error::{EadError, Result};
use crate::matrix::Matrix;
use crate::model::{Adapter, Model};
use crate::nn::ParamSet;
use crate::pipeline::{Fingerprint, WindowSet};
use crate::signal::SampleWindow;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EADCKPT1";
pub const WINDOWS_MAGIC: &[u8; 8] = b"EADWIN01";
pub const FORMAT_VERSION: u32 = 1;

/// Flags, seed and versions of the run that produced an output.
pub type RunHeader = BTreeMap<String, String>;

/// Writes the container to a sibling temporary file, then renames it into place.
pub fn write_container(path: &Path, magic: &[u8; 8], header: &[u8], payload: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(60 + header.len() + 8 * payload.len());
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(header);
    bytes.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    fs::write(&tmp, &bytes).map_err(|e| EadError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| EadError::io(path, e))
}

/// Returns the JSON header and payload after checking magic, checksum and version.
pub fn read_container(path: &Path, magic: &[u8; 8]) -> Result<(Vec<u8>, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| EadError::io(path, e))?;
    let integrity = |reason: String| EadError::Integrity {
        path: path.to_path_buf(),
        reason,
    };
    let u64_at = |at: usize| -> Result<usize> {
        bytes
            .get(at..at + 8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
            .ok_or_else(|| integrity(format!("file ends at byte {} inside the layout", bytes.len())))
    };
    if bytes.len() < 8 || &bytes[..8] != magic {
        return Err(integrity(format!(
            "not a {} file",
            String::from_utf8_lossy(magic)
        )));
    }
    if bytes.len() < 12 + 8 + 8 + 32 {
        return Err(integrity(format!("{} bytes is shorter than the fixed layout", bytes.len())));
    }
    let header_len = u64_at(12)?;
    let count_at = 20usize
        .checked_add(header_len)
        .ok_or_else(|| integrity("header length overflows".into()))?;
    let count = u64_at(count_at)?;
    let payload_at = count_at + 8;
    let expected = count
        .checked_mul(8)
        .and_then(|n| n.checked_add(payload_at + 32))
        .ok_or_else(|| integrity("payload length overflows".into()))?;
    if bytes.len() != expected {
        return Err(integrity(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let body = &bytes[..expected - 32];
    if Sha256::digest(body).as_slice() != &bytes[expected - 32..] {
        return Err(integrity("checksum mismatch".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(EadError::Version {
            path: path.to_path_buf(),
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let payload = bytes[payload_at..expected - 32]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((bytes[20..count_at].to_vec(), payload))
}

fn parse_header<T: for<'de> Deserialize<'de>>(path: &Path, header: &[u8]) -> Result<T> {
    serde_json::from_slice(header).map_err(|e| EadError::Integrity {
        path: path.to_path_buf(),
        reason: format!("malformed header: {e}"),
    })
}

/// A trained model with everything needed to reuse it safely.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Names of the classes the head predicts, by head index.
    pub classes: Vec<String>,
    /// Dataset class index behind each head index.
    pub class_indices: Vec<usize>,
    pub fingerprint: Fingerprint,
    pub run: RunHeader,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    adapter: Option<AdapterConfig>,
    bfm: BfmConfig,
    classes: Vec<String>,
    class_indices: Vec<usize>,
    fingerprint: Fingerprint,
    run: RunHeader,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Errors unless `found` matches the preprocessing the model was trained under.
    pub fn check_fingerprint(&self, found: &Fingerprint) -> Result<()> {
        if &self.fingerprint != found {
            return Err(EadError::Fingerprint {
                expected: self.fingerprint.to_string(),
                found: found.to_string(),
            });
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let header = CheckpointHeader {
        adapter: ckpt.model.adapter.as_ref().map(|a| a.config.clone()),
        bfm: ckpt.model.bfm.config.clone(),
        classes: ckpt.classes.clone(),
        class_indices: ckpt.class_indices.clone(),
        fingerprint: ckpt.fingerprint.clone(),
        run: ckpt.run.clone(),
        tensors: ckpt
            .model
            .tensors()
            .into_iter()
            .map(|(name, t)| TensorEntry { name, len: t.len() })
            .collect(),
    };
    let json = serde_json::to_vec_pretty(&header).expect("header serializes");
    write_container(path, CHECKPOINT_MAGIC, &json, &ckpt.model.flatten())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (header, payload) = read_container(path, CHECKPOINT_MAGIC)?;
    let h: CheckpointHeader = parse_header(path, &header)?;
    let inconsistent = |reason: String| EadError::Integrity {
        path: path.to_path_buf(),
        reason,
    };
    let adapter = h
        .adapter
        .map(|config| {
            let params = AdapterParams::zeros(&config);
            Adapter::from_parts(config, params)
        })
        .transpose()
        .map_err(|e| inconsistent(e.to_string()))?;
    let bfm = Bfm::from_parts(h.bfm.clone(), EncoderParams::zeros(&h.bfm)).map_err(|e| inconsistent(e.to_string()))?;
    let mut model = Model::from_parts(adapter, bfm).map_err(|e| inconsistent(e.to_string()))?;
    let layout: Vec<(String, usize)> = model.tensors().into_iter().map(|(n, t)| (n, t.len())).collect();
    let stored: Vec<(String, usize)> = h.tensors.into_iter().map(|t| (t.name, t.len)).collect();
    if layout != stored {
        return Err(inconsistent("tensor table does not match the stored configuration".into()));
    }
    model.assign(&payload).map_err(|e| inconsistent(e.to_string()))?;
    if h.classes.len() != model.num_classes() || h.class_indices.len() != h.classes.len() {
        return Err(inconsistent(format!(
            "{} class names for a {}-class head",
            h.classes.len(),
            model.num_classes()
        )));
    }
    Ok(Checkpoint {
        model,
        classes: h.classes,
        class_indices: h.class_indices,
        fingerprint: h.fingerprint,
        run: h.run,
    })
}

#[derive(Serialize, Deserialize)]
struct WindowMeta {
    rows: usize,
    cols: usize,
    label: Option<usize>,
    subject_id: String,
    recording: usize,
    window: usize,
}

#[derive(Serialize, Deserialize)]
struct WindowsHeader {
    classes: Vec<String>,
    filters: crate::dsp::FilterSettings,
    window_len: usize,
    alignment: Option<crate::pipeline::Alignment>,
    recordings: Vec<crate::pipeline::RecordingInfo>,
    windows: Vec<WindowMeta>,
    run: RunHeader,
}

pub fn save_windows(path: &Path, set: &WindowSet, run: &RunHeader) -> Result<()> {
    let header = WindowsHeader {
        classes: set.classes.clone(),
        filters: set.filters.clone(),
        window_len: set.window_len,
        alignment: set.alignment.clone(),
        recordings: set.recordings.clone(),
        windows: set
            .windows
            .iter()
            .map(|w| WindowMeta {
                rows: w.data.rows(),
                cols: w.data.cols(),
                label: w.label,
                subject_id: w.subject_id.clone(),
                recording: w.recording,
                window: w.window,
            })
            .collect(),
        run: run.clone(),
    };
    let payload: Vec<f64> = set.windows.iter().flat_map(|w| w.data.as_slice().iter().copied()).collect();
    let json = serde_json::to_vec(&header).expect("header serializes");
    write_container(path, WINDOWS_MAGIC, &json, &payload)
}

/// Loads a window set together with the run header that produced it.
pub fn load_windows(path: &Path) -> Result<(WindowSet, RunHeader)> {
    let (header, payload) = read_container(path, WINDOWS_MAGIC)?;
    let h: WindowsHeader = parse_header(path, &header)?;
    let mut offset = 0;
    let mut windows = Vec::with_capacity(h.windows.len());
    for m in h.windows {
        let n = m.rows * m.cols;
        let chunk = payload.get(offset..offset + n).ok_or_else(|| EadError::Integrity {
            path: path.to_path_buf(),
            reason: "payload shorter than the window table".into(),
        })?;
        offset += n;
        if m.recording >= h.recordings.len() {
            return Err(EadError::Integrity {
                path: path.to_path_buf(),
                reason: format!("window refers to missing recording {}", m.recording),
            });
        }
        windows.push(SampleWindow {
            data: Matrix::from_vec(m.rows, m.cols, chunk.to_vec())?,
            label: m.label,
            subject_id: m.subject_id,
            recording: m.recording,
            window: m.window,
        });
    }
    if offset != payload.len() {
        return Err(EadError::Integrity {
            path: path.to_path_buf(),
            reason: "payload longer than the window table".into(),
        });
    }
    let set = WindowSet {
        classes: h.classes,
        filters: h.filters,
        window_len: h.window_len,
        alignment: h.alignment,
        recordings: h.recordings,
        windows,
    };
    Ok((set, h.run))
}

/// `# key = value` lines for text outputs.
pub fn format_run_header(run: &RunHeader) -> String {
    let mut out = String::new();
    for (k, v) in run {
        let _ = writeln!(out, "# {k} = {v}");
    }
    out
}

/// Comma-separated: run header comments, a column line, then one row per sample
/// holding the embedding values, the label index and the subject id.
pub fn write_embeddings(path: &Path, batch: &EmbeddingBatch, run: &RunHeader) -> Result<()> {
    let mut out = format_run_header(run);
    let dim = batch.embeddings.cols();
    let columns: Vec<String> = (0..dim).map(|j| format!("e{j}")).collect();
    let _ = writeln!(out, "{},label,subject_id", columns.join(","));
    for (i, row) in batch.embeddings.iter_rows().enumerate() {
        for v in row {
            let _ = write!(out, "{v:?},");
        }
        let _ = writeln!(out, "{},{}", batch.labels[i], batch.subject_ids[i]);
    }
    fs::write(path, out).map_err(|e| EadError::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingBatch> {
    let text = fs::read_to_string(path).map_err(|e| EadError::io(path, e))?;
    let bad = |line: usize, msg: &str| EadError::Config(format!("{}:{line}: {msg}", path.display()));
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut subjects = Vec::new();
    let mut seen_columns = false;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !seen_columns {
            seen_columns = true;
            if line.starts_with("e0,") {
                continue;
            }
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() < 3 {
            return Err(bad(n + 1, "expected embedding values, label and subject id"));
        }
        let (values, tail) = cells.split_at(cells.len() - 2);
        let row = values
            .iter()
            .map(|c| c.trim().parse::<f64>().map_err(|_| bad(n + 1, "embedding value is not a number")))
            .collect::<Result<Vec<f64>>>()?;
        labels.push(tail[0].trim().parse::<usize>().map_err(|_| bad(n + 1, "label is not a class index"))?);
        subjects.push(tail[1].trim().to_string());
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(EadError::Config(format!("{} holds no embeddings", path.display())));
    }
    EmbeddingBatch::new(Matrix::from_rows(&rows)?, labels, subjects)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::FilterSettings;
    use crate::pipeline::{build_model, prepare, preprocess, Architecture, Mode};
    use crate::synth::{generate, SynthConfig};
    use tempfile::TempDir;

    fn window_set() -> WindowSet {
        let ds = generate(&SynthConfig {
            subjects: [1, 1, 1],
            trials_per_subject_class: 1,
            num_timesteps: 128,
            ..SynthConfig::default()
        })
        .unwrap();
        preprocess(&ds.recordings, &ds.splits, ds.class_names, &FilterSettings::default(), 128).unwrap()
    }

    fn checkpoint(mode: Mode) -> Checkpoint {
        let (_, fp) = prepare(&window_set(), mode, None).unwrap();
        let model = build_model(&fp, 4, &Architecture::default(), 9).unwrap();
        Checkpoint {
            model,
            classes: (0..4).map(|c| format!("class{c}")).collect(),
            class_indices: (0..4).collect(),
            fingerprint: fp,
            run: RunHeader::from([("seed".to_string(), "9".to_string())]),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = TempDir::new().unwrap();
        for mode in [Mode::Adapter, Mode::Raw] {
            let path = dir.path().join(format!("{mode}.ckpt"));
            let ckpt = checkpoint(mode);
            save_checkpoint(&path, &ckpt).unwrap();
            let back = load_checkpoint(&path).unwrap();
            let a: Vec<u64> = ckpt.model.flatten().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.model.flatten().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
            assert_eq!(back, ckpt);
        }
    }

    #[test]
    fn truncated_or_flipped_file_is_integrity_error() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &checkpoint(Mode::Raw)).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [10, 30, bytes.len() / 2, bytes.len() - 1] {
            fs::write(&path, &bytes[..cut]).unwrap();
            assert!(matches!(load_checkpoint(&path), Err(EadError::Integrity { .. })), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 100;
        flipped[mid] ^= 1;
        fs::write(&path, &flipped).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn unknown_version_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &checkpoint(Mode::Raw)).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let n = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..n]);
        bytes[n..].copy_from_slice(&digest);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(EadError::Version { found: 2, .. })));
    }

    #[test]
    fn fingerprint_mismatch_on_channel_count() {
        let ckpt = checkpoint(Mode::Raw);
        let mut other = ckpt.fingerprint.clone();
        other.input_channels = 128;
        assert!(matches!(ckpt.check_fingerprint(&other), Err(EadError::Fingerprint { .. })));
        assert!(ckpt.check_fingerprint(&ckpt.fingerprint).is_ok());
    }

    #[test]
    fn windows_round_trip() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("w.ead");
        let set = window_set();
        let run = RunHeader::from([("command".to_string(), "preprocess".to_string())]);
        save_windows(&path, &set, &run).unwrap();
        let (back, run_back) = load_windows(&path).unwrap();
        assert_eq!(back, set);
        assert_eq!(run_back, run);
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn embeddings_round_trip() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("e.csv");
        let batch = EmbeddingBatch::new(
            Matrix::from_rows(&[vec![0.1, -2.5e-7], vec![3.0, 1.0 / 3.0]]).unwrap(),
            vec![4, 5],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        write_embeddings(&path, &batch, &RunHeader::from([("seed".into(), "1".into())])).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# seed = 1\ne0,e1,label,subject_id\n"));
        assert_eq!(read_embeddings(&path).unwrap(), batch);
    }
}
