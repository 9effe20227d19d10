//! Recordings and annotations to model-ready epoch sequences.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{apply_filter, resample_linear, DspError, FilterSpec};
use crate::ingest::{
    AnnotationSet, ChannelRole, EventAnnotation, IngestError, PsgRecording, RawStage, StageAnnotation,
    SubjectMetadata, EPOCH_S, IGNORE_LABEL, N_EVENT_KINDS,
};

pub use crate::ingest::SubjectEpochs;

/// Aggregator sequence length; longer nights are rejected.
pub const MAX_SEQ_LEN: usize = 1500;
pub const N_STAGES: usize = 5;
pub const N_CHANNELS: usize = 9;

/// Split sizes of the source cohort (train, val, test).
pub const SHHS_SPLIT_COUNTS: [usize; 3] = [6728, 788, 841];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("recording of {duration_s} s is shorter than one 30 s epoch")]
    TooShort { duration_s: f64 },
    #[error("channel {role:?} has {got} samples after resampling, need {need}")]
    ChannelTooShort { role: ChannelRole, got: usize, need: usize },
    #[error("missing channel {0:?}")]
    MissingChannel(ChannelRole),
    #[error("clinical statistics have not been computed")]
    StatsMissing,
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("sequence of {len} epochs exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("{0}")]
    Mismatch(String),
    #[error("common rate {0} Hz does not give a whole number of samples per epoch")]
    BadCommonRate(f64),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StageLabel {
    Wake = 0,
    N1 = 1,
    N2 = 2,
    N3 = 3,
    Rem = 4,
}

impl StageLabel {
    pub const ALL: [StageLabel; 5] = [StageLabel::Wake, StageLabel::N1, StageLabel::N2, StageLabel::N3, StageLabel::Rem];
    pub const NAMES: [&'static str; 5] = ["Wake", "N1", "N2", "N3", "REM"];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        Self::NAMES[self.index()]
    }
}

/// R&K to five-class mapping; stages 3 and 4 both become N3.
pub fn harmonize_stage(raw: RawStage) -> Option<StageLabel> {
    match raw {
        RawStage::Wake => Some(StageLabel::Wake),
        RawStage::S1 => Some(StageLabel::N1),
        RawStage::S2 => Some(StageLabel::N2),
        RawStage::S3 | RawStage::S4 => Some(StageLabel::N3),
        RawStage::Rem => Some(StageLabel::Rem),
        RawStage::Unscored => None,
    }
}

/// Per-epoch label bytes, [`IGNORE_LABEL`] for unscored epochs.
pub fn harmonize_labels(raw: &StageAnnotation) -> Vec<u8> {
    raw.stages
        .iter()
        .map(|&s| harmonize_stage(s).map_or(IGNORE_LABEL, |l| l.index() as u8))
        .collect()
}

/// Per-channel filter table plus working rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub common_rate_hz: f64,
    /// Channels absent from the map are resampled without filtering.
    pub filters: BTreeMap<ChannelRole, FilterSpec>,
    /// Upper filter edges are capped at this fraction of the lower of the
    /// native and common rates, so the filter doubles as anti-aliasing.
    pub max_edge_fraction: f64,
    /// An event flags an epoch when their overlap exceeds this many seconds.
    pub overlap_min_s: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        let filters = [
            (ChannelRole::Eeg, FilterSpec::bandpass(1.0, 50.0)),
            (ChannelRole::Ecg, FilterSpec::bandpass(0.5, 50.0)),
            (ChannelRole::EogLeft, FilterSpec::bandpass(0.1, 15.0)),
            (ChannelRole::EogRight, FilterSpec::bandpass(0.1, 15.0)),
            (ChannelRole::Thoracic, FilterSpec::lowpass(1.0)),
            (ChannelRole::Abdominal, FilterSpec::lowpass(1.0)),
        ];
        Self {
            common_rate_hz: 25.0,
            filters: filters.into_iter().collect(),
            max_edge_fraction: 0.45,
            overlap_min_s: 0.0,
        }
    }
}

impl PreprocessConfig {
    pub fn samples_per_epoch(&self) -> Result<usize> {
        let s = EPOCH_S * self.common_rate_hz;
        if !(s >= 1.0) || (s - s.round()).abs() > 1e-9 {
            return Err(DatasetError::BadCommonRate(self.common_rate_hz));
        }
        Ok(s.round() as usize)
    }

    /// The filter actually applied to `role` at `native_hz`.
    pub fn effective_filter(&self, role: ChannelRole, native_hz: f64) -> Option<FilterSpec> {
        let mut spec = self.filters.get(&role)?.clone();
        let cap = self.max_edge_fraction * native_hz.min(self.common_rate_hz);
        if spec.high_hz > cap {
            spec.high_hz = cap;
        }
        Some(spec)
    }
}

/// Filters, resamples, z-normalises and cuts a recording into `[T, 9, S]`.
///
/// `T = floor(duration / 30)`; the trailing partial epoch is dropped. Channel
/// statistics are taken over the retained samples.
pub fn segment_epochs(rec: &PsgRecording, cfg: &PreprocessConfig) -> Result<(usize, usize, Vec<f32>)> {
    let s = cfg.samples_per_epoch()?;
    let t = (rec.duration_s / EPOCH_S + 1e-9).floor() as usize;
    if t == 0 {
        return Err(DatasetError::TooShort {
            duration_s: rec.duration_s,
        });
    }
    let mut out = vec![0f32; t * N_CHANNELS * s];
    for role in ChannelRole::ALL {
        let ch = rec.channel(role).ok_or(DatasetError::MissingChannel(role))?;
        let filtered = match cfg.effective_filter(role, ch.sample_rate_hz) {
            Some(spec) => apply_filter(&spec, &ch.samples, ch.sample_rate_hz)?,
            None => ch.samples.clone(),
        };
        let resampled = resample_linear(&filtered, ch.sample_rate_hz, cfg.common_rate_hz)?;
        let need = t * s;
        if resampled.len() < need {
            return Err(DatasetError::ChannelTooShort {
                role,
                got: resampled.len(),
                need,
            });
        }
        let kept = &resampled[..need];
        let mean = kept.iter().sum::<f64>() / need as f64;
        let var = kept.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / need as f64;
        let inv = if var.sqrt() > 1e-12 { 1.0 / var.sqrt() } else { 0.0 };
        let c = role.index();
        for ti in 0..t {
            let dst = &mut out[(ti * N_CHANNELS + c) * s..(ti * N_CHANNELS + c + 1) * s];
            for (d, v) in dst.iter_mut().zip(&kept[ti * s..(ti + 1) * s]) {
                *d = ((v - mean) * inv) as f32;
            }
        }
    }
    Ok((t, s, out))
}

/// `out[t][k] = 1` iff an event of kind `k` overlaps `[30t, 30t + 30)` by more
/// than `overlap_min_s`.
pub fn build_event_vectors(events: &[EventAnnotation], n_epochs: usize, overlap_min_s: f64) -> Vec<[u8; N_EVENT_KINDS]> {
    let mut out = vec![[0u8; N_EVENT_KINDS]; n_epochs];
    for e in events {
        let first = (e.start_s / EPOCH_S).floor().max(0.0) as usize;
        let last = ((e.end_s() / EPOCH_S).ceil() as usize).min(n_epochs);
        for (t, row) in out.iter_mut().enumerate().take(last).skip(first) {
            let lo = t as f64 * EPOCH_S;
            let overlap = e.end_s().min(lo + EPOCH_S) - e.start_s.max(lo);
            if overlap > overlap_min_s {
                row[e.kind.index()] = 1;
            }
        }
    }
    out
}

/// Training-split statistics for clinical z-scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalStats {
    pub age_mean: f64,
    pub age_std: f64,
    pub bmi_mean: f64,
    pub bmi_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return (0.0, 1.0);
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
    (mean, if std > 1e-12 { std } else { 1.0 })
}

impl ClinicalStats {
    /// Population mean and standard deviation over present values.
    pub fn from_training(meta: &[&SubjectMetadata]) -> Self {
        let (age_mean, age_std) = mean_std(meta.iter().filter_map(|m| m.age_years));
        let (bmi_mean, bmi_std) = mean_std(meta.iter().filter_map(|m| m.bmi_kg_m2));
        Self {
            age_mean,
            age_std,
            bmi_mean,
            bmi_std,
        }
    }
}

/// `[z(age), sex, z(BMI)]`; a missing age or BMI takes the training mean.
pub fn build_clinical_vector(meta: &SubjectMetadata, stats: Option<&ClinicalStats>) -> Result<[f32; 3]> {
    let st = stats.ok_or(DatasetError::StatsMissing)?;
    let age = meta.age_years.map_or(0.0, |a| (a - st.age_mean) / st.age_std);
    let bmi = meta.bmi_kg_m2.map_or(0.0, |b| (b - st.bmi_mean) / st.bmi_std);
    Ok([age as f32, meta.sex.code() as f32, bmi as f32])
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl SplitManifest {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .find(|&s| self.ids(s).iter().any(|x| x == id))
    }
}

pub fn shhs_split_ratios() -> [f64; 3] {
    let total: usize = SHHS_SPLIT_COUNTS.iter().sum();
    SHHS_SPLIT_COUNTS.map(|c| c as f64 / total as f64)
}

/// Seeded shuffle of the sorted ids, cut into train/val/test. Train and val
/// sizes are `round(n · ratio)`; test takes the remainder.
pub fn split_subjects(ids: &[String], ratios: [f64; 3], seed: u64) -> Result<SplitManifest> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DatasetError::BadRatios(ratios));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    let before = sorted.len();
    sorted.dedup();
    if sorted.len() != before {
        return Err(DatasetError::Mismatch("duplicate subject ids in split input".into()));
    }
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = sorted.len();
    let n_train = ((n as f64 * ratios[0]).round() as usize).min(n);
    let n_val = ((n as f64 * ratios[1]).round() as usize).min(n - n_train);
    let test = sorted.split_off(n_train + n_val);
    let val = sorted.split_off(n_train);
    Ok(SplitManifest {
        seed,
        train: sorted,
        val,
        test,
    })
}

/// A `[max_len, D]` sequence with labels and validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedSequence {
    pub data: Vec<f64>,
    pub dim: usize,
    pub len: usize,
    /// Zero wherever `mask` is false.
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Zero-pads `[T, dim]` to `[max_len, dim]`. The mask is true exactly at the
/// original, scored epochs.
pub fn pad_and_mask(seq: &[f64], dim: usize, labels: &[u8], max_len: usize) -> Result<PaddedSequence> {
    let t = labels.len();
    if seq.len() != t * dim {
        return Err(DatasetError::Mismatch(format!(
            "sequence holds {} values, expected {t}×{dim}",
            seq.len()
        )));
    }
    if t > max_len {
        return Err(DatasetError::SequenceTooLong { len: t, max: max_len });
    }
    let mut data = seq.to_vec();
    data.resize(max_len * dim, 0.0);
    let mut mask: Vec<bool> = labels.iter().map(|&l| (l as usize) < N_STAGES).collect();
    mask.resize(max_len, false);
    let mut out_labels: Vec<usize> = labels
        .iter()
        .map(|&l| if (l as usize) < N_STAGES { l as usize } else { 0 })
        .collect();
    out_labels.resize(max_len, 0);
    Ok(PaddedSequence {
        data,
        dim,
        len: max_len,
        labels: out_labels,
        mask,
    })
}

/// Builds one subject's stored record from parsed inputs.
pub fn build_subject(
    rec: &PsgRecording,
    ann: &AnnotationSet,
    meta: &SubjectMetadata,
    stats: Option<&ClinicalStats>,
    cfg: &PreprocessConfig,
) -> Result<SubjectEpochs> {
    let (t, s, epochs) = segment_epochs(rec, cfg)?;
    if t > MAX_SEQ_LEN {
        return Err(DatasetError::SequenceTooLong { len: t, max: MAX_SEQ_LEN });
    }
    let mut labels = harmonize_labels(&ann.stages);
    labels.resize(t, IGNORE_LABEL);
    Ok(SubjectEpochs {
        subject_id: rec.subject_id.clone(),
        n_channels: N_CHANNELS,
        samples_per_epoch: s,
        epochs,
        labels,
        events: build_event_vectors(&ann.events, t, cfg.overlap_min_s),
        clinical: build_clinical_vector(meta, stats)?,
    })
}

/// Subjects keyed by id, with split lookup through a manifest.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochDataset {
    pub subjects: Vec<SubjectEpochs>,
}

impl EpochDataset {
    pub fn new(subjects: Vec<SubjectEpochs>) -> Self {
        Self { subjects }
    }

    pub fn get(&self, id: &str) -> Option<&SubjectEpochs> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }

    /// Subjects in the order given by `ids`.
    pub fn select(&self, ids: &[String]) -> Result<Vec<&SubjectEpochs>> {
        ids.iter()
            .map(|id| {
                self.get(id)
                    .ok_or_else(|| DatasetError::Mismatch(format!("subject `{id}` not in dataset")))
            })
            .collect()
    }

    pub fn total_epochs(&self) -> usize {
        self.subjects.iter().map(SubjectEpochs::n_epochs).sum()
    }

    pub fn scored_epochs(&self) -> usize {
        self.subjects.iter().map(SubjectEpochs::n_scored).sum()
    }
}
