//! Preprocessing, alignment and model assembly for the four input modes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::bfm::{BfmConfig, EmbeddingBatch, RAW_CHANNEL_VOCAB};
use crate::dsp::FilterSettings;
use crate::error::{EadError, Result};
use crate::manifest::{DatasetManifest, Split};
use crate::matrix::Matrix;
use crate::model::Model;
use crate::montage::{mix_channels, nearest_channel_select, MontageMap, BFM_CHANNELS};
use crate::signal::{extract_windows, Recording, SampleWindow};
use crate::train::{predict, train_loop, Example, MetricsReport, Prediction, TrainConfig, TrainOutcome};

/// How recordings reach the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Learned convolutional adapter in front of the 23-channel encoder.
    Adapter,
    /// Nearest-electrode montage mapping.
    Select,
    /// Composite montage mixing.
    Mix,
    /// Native channels straight into an encoder with a 128-row channel table.
    Raw,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Adapter => "adapter",
            Mode::Select => "select",
            Mode::Mix => "mix",
            Mode::Raw => "raw",
        }
    }

    fn alignment_kind(self) -> Option<AlignKind> {
        match self {
            Mode::Select => Some(AlignKind::Select),
            Mode::Mix => Some(AlignKind::Mix),
            Mode::Adapter | Mode::Raw => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = EadError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adapter" => Ok(Mode::Adapter),
            "select" => Ok(Mode::Select),
            "mix" => Ok(Mode::Mix),
            "raw" => Ok(Mode::Raw),
            other => Err(EadError::Config(format!(
                "unknown mode `{other}` (expected adapter, select, mix or raw)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignKind {
    Select,
    Mix,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub kind: AlignKind,
    /// `builtin-table1` or the montage file it was loaded from.
    pub montage: String,
    pub target_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingInfo {
    pub channel_labels: Vec<String>,
    pub subject_id: String,
    pub split: Split,
    pub sample_rate_hz: f64,
}

/// Filtered, windowed (and possibly aligned) data ready for training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSet {
    pub classes: Vec<String>,
    pub filters: FilterSettings,
    pub window_len: usize,
    pub alignment: Option<Alignment>,
    pub recordings: Vec<RecordingInfo>,
    pub windows: Vec<SampleWindow>,
}

impl WindowSet {
    pub fn split_of(&self, w: &SampleWindow) -> Split {
        self.recordings[w.recording].split
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &SampleWindow> {
        self.windows.iter().filter(move |w| self.split_of(w) == split)
    }

    /// Channel count shared by every window.
    pub fn channels(&self) -> Result<usize> {
        let first = self
            .windows
            .first()
            .ok_or_else(|| EadError::Config("window set is empty".into()))?
            .data
            .rows();
        if let Some(w) = self.windows.iter().find(|w| w.data.rows() != first) {
            return Err(EadError::Dimension(format!(
                "windows mix {first} and {} channels; adapter and raw modes need one montage",
                w.data.rows()
            )));
        }
        Ok(first)
    }

    pub fn timesteps(&self) -> usize {
        self.alignment.as_ref().map_or(self.window_len, |a| a.target_len)
    }
}

/// Filters every recording (notch, then bandpass) and cuts it into windows.
pub fn preprocess(
    recordings: &[Recording],
    splits: &[Split],
    classes: Vec<String>,
    filters: &FilterSettings,
    window_len: usize,
) -> Result<WindowSet> {
    if recordings.len() != splits.len() {
        return Err(EadError::Dimension("one split per recording required".into()));
    }
    let mut infos = Vec::with_capacity(recordings.len());
    let mut windows = Vec::new();
    for (i, (rec, split)) in recordings.iter().zip(splits).enumerate() {
        let filtered = filters.apply(rec)?;
        let w = extract_windows(&filtered, i, window_len)?;
        if w.is_empty() {
            log::warn!(
                "recording {i} ({} samples) is shorter than one {window_len}-sample window",
                rec.num_samples()
            );
        }
        windows.extend(w);
        infos.push(RecordingInfo {
            channel_labels: rec.channel_labels.clone(),
            subject_id: rec.subject_id.clone(),
            split: *split,
            sample_rate_hz: rec.sample_rate_hz,
        });
    }
    Ok(WindowSet {
        classes,
        filters: filters.clone(),
        window_len,
        alignment: None,
        recordings: infos,
        windows,
    })
}

/// Resolves splits, loads every entry and runs [`preprocess`].
pub fn preprocess_manifest(manifest: DatasetManifest, filters: &FilterSettings, window_len: usize) -> Result<WindowSet> {
    let manifest = manifest.resolve_splits()?;
    let recordings = (0..manifest.entries.len())
        .map(|i| manifest.load_recording(i))
        .collect::<Result<Vec<_>>>()?;
    let splits: Vec<Split> = manifest.entries.iter().map(|e| e.split).collect();
    preprocess(&recordings, &splits, manifest.classes.clone(), filters, window_len)
}

/// Maps every window onto the 23 standard channels at `target_len` samples.
pub fn align_windows(
    set: &WindowSet,
    kind: AlignKind,
    map: &MontageMap,
    montage_name: &str,
    target_len: usize,
) -> Result<WindowSet> {
    if set.alignment.is_some() {
        return Err(EadError::Config("window set is already aligned".into()));
    }
    let windows = set
        .windows
        .iter()
        .map(|w| {
            let info = &set.recordings[w.recording];
            let rec = Recording::new(
                info.channel_labels.clone(),
                info.sample_rate_hz,
                w.data.clone(),
                w.subject_id.clone(),
                w.label,
            )?;
            let aligned = match kind {
                AlignKind::Select => nearest_channel_select(&rec, map, target_len)?,
                AlignKind::Mix => mix_channels(&rec, map, target_len)?,
            };
            Ok(SampleWindow {
                data: aligned.data,
                ..w.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<String> = map.targets().iter().map(|t| t.target_label.clone()).collect();
    Ok(WindowSet {
        classes: set.classes.clone(),
        filters: set.filters.clone(),
        window_len: set.window_len,
        alignment: Some(Alignment {
            kind,
            montage: montage_name.to_string(),
            target_len,
        }),
        recordings: set
            .recordings
            .iter()
            .map(|r| RecordingInfo {
                channel_labels: labels.clone(),
                ..r.clone()
            })
            .collect(),
        windows,
    })
}

/// Everything about the data a trained model depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub mode: Mode,
    pub filters: FilterSettings,
    pub window_len: usize,
    pub alignment: Option<Alignment>,
    pub input_channels: usize,
    pub input_timesteps: usize,
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fl = &self.filters;
        write!(
            f,
            "mode={} input={}x{} window={} notch={}Hz/Q{} band={}-{}Hz/order{}",
            self.mode,
            self.input_channels,
            self.input_timesteps,
            self.window_len,
            fl.notch_hz,
            fl.notch_quality,
            fl.band_low_hz,
            fl.band_high_hz,
            fl.band_order
        )?;
        match &self.alignment {
            Some(a) => write!(f, " align={:?}:{}:{}", a.kind, a.montage, a.target_len),
            None => write!(f, " align=none"),
        }
    }
}

/// Brings `set` into the shape `mode` consumes and fingerprints the result.
///
/// Select and mix modes align unaligned data with `montage` at the window
/// length; already aligned data must have been aligned the same way.
pub fn prepare(set: &WindowSet, mode: Mode, montage: Option<(&MontageMap, &str)>) -> Result<(WindowSet, Fingerprint)> {
    let prepared = match (mode.alignment_kind(), &set.alignment) {
        (Some(kind), None) => {
            let (map, name) = montage
                .ok_or_else(|| EadError::Config(format!("{mode} mode needs a montage map")))?;
            align_windows(set, kind, map, name, set.window_len)?
        }
        (Some(kind), Some(a)) if a.kind != kind => {
            return Err(EadError::Config(format!(
                "{mode} mode cannot use data aligned with {:?}",
                a.kind
            )))
        }
        _ => set.clone(),
    };
    let channels = prepared.channels()?;
    if mode == Mode::Raw && channels > RAW_CHANNEL_VOCAB {
        return Err(EadError::Config(format!(
            "raw mode supports at most {RAW_CHANNEL_VOCAB} channels, data has {channels}"
        )));
    }
    let fingerprint = Fingerprint {
        mode,
        filters: prepared.filters.clone(),
        window_len: prepared.window_len,
        alignment: prepared.alignment.clone(),
        input_channels: channels,
        input_timesteps: prepared.timesteps(),
    };
    Ok((prepared, fingerprint))
}

/// Encoder and adapter sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub patch_len: usize,
    /// Encoder input length in adapter mode.
    pub adapter_timesteps: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            embed_dim: 32,
            num_layers: 2,
            num_heads: 4,
            ff_dim: 128,
            patch_len: 16,
            adapter_timesteps: 64,
        }
    }
}

impl Architecture {
    fn bfm(&self, channels: usize, timesteps: usize, num_classes: usize) -> BfmConfig {
        BfmConfig {
            num_channels: channels,
            input_timesteps: timesteps,
            patch_len: self.patch_len,
            embed_dim: self.embed_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            ff_dim: self.ff_dim,
            num_classes,
            channel_vocab: channels,
        }
    }
}

pub fn build_model(fp: &Fingerprint, num_classes: usize, arch: &Architecture, seed: u64) -> Result<Model> {
    let (c, t) = (fp.input_channels, fp.input_timesteps);
    match fp.mode {
        Mode::Adapter => {
            let i_ch = BFM_CHANNELS.len();
            let adapter = AdapterConfig::default_for(c, t, i_ch, arch.adapter_timesteps)?;
            Model::new(Some(adapter), arch.bfm(i_ch, arch.adapter_timesteps, num_classes), seed)
        }
        Mode::Select | Mode::Mix => Model::new(None, arch.bfm(c, t, num_classes), seed),
        Mode::Raw => {
            let bfm = BfmConfig {
                channel_vocab: RAW_CHANNEL_VOCAB,
                ..arch.bfm(c, t, num_classes)
            };
            Model::new(None, bfm, seed)
        }
    }
}

/// Labelled examples of one split. With `classes`, only windows of those
/// dataset classes are kept and relabelled by their position in the list.
pub fn examples(set: &WindowSet, split: Split, classes: Option<&[usize]>) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for w in set.in_split(split) {
        let label = w.label.ok_or_else(|| {
            EadError::Config(format!("window {} of recording {} has no label", w.window, w.recording))
        })?;
        let label = match classes {
            Some(keep) => match keep.iter().position(|&c| c == label) {
                Some(p) => p,
                None => continue,
            },
            None => label,
        };
        out.push(Example {
            input: w.data.clone(),
            label,
            subject_id: w.subject_id.clone(),
        });
    }
    Ok(out)
}

/// Pooled embeddings of every labelled window in `split`, with dataset labels.
pub fn embed_split(model: &Model, set: &WindowSet, split: Split) -> Result<EmbeddingBatch> {
    let windows: Vec<&SampleWindow> = set.in_split(split).filter(|w| w.label.is_some()).collect();
    let rows = windows
        .iter()
        .map(|w| model.embed(&w.data))
        .collect::<Result<Vec<_>>>()?;
    let embeddings = if rows.is_empty() {
        Matrix::zeros(0, model.bfm.config.embed_dim)
    } else {
        Matrix::from_rows(&rows)?
    };
    EmbeddingBatch::new(
        embeddings,
        windows.iter().map(|w| w.label.expect("filtered")).collect(),
        windows.iter().map(|w| w.subject_id.clone()).collect(),
    )
}

/// Validated list of dataset classes a model is trained on; all classes when `None`.
pub fn class_selection(set: &WindowSet, classes: Option<&[usize]>) -> Result<Vec<usize>> {
    let k = set.classes.len();
    let chosen: Vec<usize> = classes.map_or_else(|| (0..k).collect(), <[usize]>::to_vec);
    if chosen.len() < 2 {
        return Err(EadError::Config("training needs at least two classes".into()));
    }
    for (i, &c) in chosen.iter().enumerate() {
        if c >= k {
            return Err(EadError::Config(format!("class {c} does not exist ({k} classes)")));
        }
        if chosen[..i].contains(&c) {
            return Err(EadError::Config(format!("class {c} listed twice")));
        }
    }
    Ok(chosen)
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub outcome: TrainOutcome,
    pub fingerprint: Fingerprint,
    /// Dataset class behind each head index.
    pub class_indices: Vec<usize>,
    /// `set` as the model consumes it.
    pub prepared: WindowSet,
}

/// Prepares `set` for `mode`, builds a model seeded by `cfg.seed` and trains it
/// on the train split, selecting by validation accuracy.
pub fn fit(
    set: &WindowSet,
    mode: Mode,
    montage: Option<(&MontageMap, &str)>,
    arch: &Architecture,
    cfg: &TrainConfig,
    classes: Option<&[usize]>,
) -> Result<FitOutput> {
    if cfg.freeze_bfm && mode != Mode::Adapter {
        return Err(EadError::Config("freezing the encoder leaves nothing to train outside adapter mode".into()));
    }
    let class_indices = class_selection(set, classes)?;
    let (prepared, fingerprint) = prepare(set, mode, montage)?;
    let train = examples(&prepared, Split::Train, Some(&class_indices))?;
    let val = examples(&prepared, Split::Val, Some(&class_indices))?;
    let model = build_model(&fingerprint, class_indices.len(), arch, cfg.seed)?;
    log::info!(
        "{mode} mode: {} parameters, {} train / {} val examples",
        crate::nn::ParamSet::num_params(&model),
        train.len(),
        val.len()
    );
    let outcome = train_loop(model, &train, &val, cfg)?;
    Ok(FitOutput {
        outcome,
        fingerprint,
        class_indices,
        prepared,
    })
}

/// Per-window predictions on `split` (head indices) and their metrics.
pub fn evaluate_split(
    model: &Model,
    prepared: &WindowSet,
    split: Split,
    class_indices: &[usize],
) -> Result<(Vec<Prediction>, MetricsReport)> {
    let ex = examples(prepared, split, Some(class_indices))?;
    if ex.is_empty() {
        return Err(EadError::Config(format!("the {split} split has no labelled windows")));
    }
    let preds = predict(model, &ex)?;
    let truth: Vec<usize> = preds.iter().map(|p| p.label).collect();
    let guess: Vec<usize> = preds.iter().map(|p| p.predicted).collect();
    let report = MetricsReport::from_predictions(&truth, &guess, class_indices.len())?;
    Ok((preds, report))
}
