//! Readers and writers for recordings, annotations, subject metadata and the
//! preprocessed epoch store.

mod annotations;
mod edf;
mod epoch_store;
mod metadata;

pub use annotations::{
    parse_annotation_xml, write_annotation_xml, AnnotationSet, ConceptTable, ConceptTarget, EventAnnotation, EventKind,
    RawStage, StageAnnotation, EPOCH_S,
};
pub use edf::{parse_edf, recording_to_edf, ChannelAliases, EdfFile, EdfHeader, EdfSignal};
pub use epoch_store::{
    read_epoch_store, write_epoch_store, SubjectEpochs, EPOCH_STORE_MAGIC, EPOCH_STORE_VERSION, IGNORE_LABEL,
    N_EVENT_KINDS,
};
pub use metadata::{parse_metadata_table, write_metadata_table, Sex, SubjectMetadata};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("not an EDF file: {0}")]
    NotEdf(String),
    #[error("truncated input: {0}")]
    Truncated(String),
    #[error("malformed header field `{field}`: {value:?}")]
    HeaderField { field: &'static str, value: String },
    #[error("signal `{label}` has dig_min == dig_max")]
    DigitalRangeZero { label: String },
    #[error("header declares {declared} data records but the file holds {actual}")]
    RecordCountMismatch { declared: usize, actual: usize },
    #[error("subject {subject} excluded: missing required channels {missing:?}")]
    ExcludedSubject { subject: String, missing: Vec<ChannelRole> },
    #[error("annotation XML: {0}")]
    Xml(String),
    #[error("event at {start_s} s lasting {duration_s} s lies outside the {recording_s} s recording")]
    EventOutOfRange { start_s: f64, duration_s: f64, recording_s: f64 },
    #[error("metadata: {0}")]
    Metadata(String),
    #[error("duplicate subject id `{0}`")]
    DuplicateSubject(String),
    #[error("missing required column `{0}`")]
    MissingColumn(&'static str),
    #[error("epoch store: unsupported version {0}")]
    VersionMismatch(u32),
    #[error("epoch store: checksum mismatch in block of subject `{subject}`")]
    Checksum { subject: String },
    #[error("epoch store: {0}")]
    Store(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = IngestError> = std::result::Result<T, E>;

/// The nine model input channels, in model channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChannelRole {
    SpO2,
    Ecg,
    Emg,
    EogLeft,
    EogRight,
    Eeg,
    Thoracic,
    Abdominal,
    Position,
}

impl ChannelRole {
    pub const ALL: [ChannelRole; 9] = [
        ChannelRole::SpO2,
        ChannelRole::Ecg,
        ChannelRole::Emg,
        ChannelRole::EogLeft,
        ChannelRole::EogRight,
        ChannelRole::Eeg,
        ChannelRole::Thoracic,
        ChannelRole::Abdominal,
        ChannelRole::Position,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSignal {
    pub label: String,
    pub role: ChannelRole,
    pub sample_rate_hz: f64,
    pub physical_unit: String,
    pub samples: Vec<f64>,
}

/// One night of polysomnography with exactly one channel per role.
#[derive(Clone, Debug, PartialEq)]
pub struct PsgRecording {
    pub subject_id: String,
    /// EDF start date and time, `dd.mm.yy hh.mm.ss`.
    pub start_time: String,
    pub duration_s: f64,
    pub channels: Vec<ChannelSignal>,
}

impl PsgRecording {
    pub fn channel(&self, role: ChannelRole) -> Option<&ChannelSignal> {
        self.channels.iter().find(|c| c.role == role)
    }

    pub fn missing_roles(&self) -> Vec<ChannelRole> {
        ChannelRole::ALL
            .into_iter()
            .filter(|r| self.channel(*r).is_none())
            .collect()
    }
}
