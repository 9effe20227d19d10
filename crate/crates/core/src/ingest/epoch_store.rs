//! "EPST" container for preprocessed epochs.
//!
//! ```text
//! "EPST" | version: u32 | n_subjects: u32
//! per subject:
//!   id_len: u32 | id: UTF-8 | T: u32 | C: u32 | S: u32
//!   labels: u8 × T (255 = ignore) | events: u8 × 7T
//!   clinical: f32 × 3 | epochs: f32 × T·C·S
//!   crc32: u32 over the block above
//! ```
//!
//! All integers and floats are little-endian.

use serde::{Deserialize, Serialize};

use super::{IngestError, Result};

pub const EPOCH_STORE_MAGIC: &[u8; 4] = b"EPST";
pub const EPOCH_STORE_VERSION: u32 = 1;

/// Label value for epochs excluded from loss and metrics.
pub const IGNORE_LABEL: u8 = 255;
pub const N_EVENT_KINDS: usize = 7;

/// One subject's epochs, labels and context, as persisted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectEpochs {
    pub subject_id: String,
    pub n_channels: usize,
    pub samples_per_epoch: usize,
    /// Row-major `[T, C, S]`.
    pub epochs: Vec<f32>,
    /// Stage index 0..5, or [`IGNORE_LABEL`].
    pub labels: Vec<u8>,
    pub events: Vec<[u8; N_EVENT_KINDS]>,
    /// `[z(age), sex, z(BMI)]`.
    pub clinical: [f32; 3],
}

impl SubjectEpochs {
    pub fn n_epochs(&self) -> usize {
        self.labels.len()
    }

    pub fn epoch_len(&self) -> usize {
        self.n_channels * self.samples_per_epoch
    }

    /// `[C, S]` slice for epoch `t`.
    pub fn epoch(&self, t: usize) -> &[f32] {
        let n = self.epoch_len();
        &self.epochs[t * n..(t + 1) * n]
    }

    pub fn mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != IGNORE_LABEL).collect()
    }

    pub fn n_scored(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_LABEL).count()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.n_epochs();
        let bad = |m: String| Err(IngestError::Store(format!("subject `{}`: {m}", self.subject_id)));
        if self.events.len() != t {
            return bad(format!("{} event rows for {t} epochs", self.events.len()));
        }
        if self.epochs.len() != t * self.epoch_len() {
            return bad(format!("{} samples, expected {t}×{}", self.epochs.len(), self.epoch_len()));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= 5 && l != IGNORE_LABEL) {
            return bad(format!("label {l} out of range"));
        }
        if self.events.iter().flatten().any(|&e| e > 1) {
            return bad("event entries must be 0 or 1".into());
        }
        if u32::try_from(t).is_err() || u32::try_from(self.n_channels).is_err() {
            return bad("dimension exceeds u32".into());
        }
        Ok(())
    }
}

pub fn write_epoch_store(subjects: &[SubjectEpochs]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(EPOCH_STORE_MAGIC);
    out.extend_from_slice(&EPOCH_STORE_VERSION.to_le_bytes());
    out.extend_from_slice(&(subjects.len() as u32).to_le_bytes());
    for s in subjects {
        s.validate()?;
        let start = out.len();
        out.extend_from_slice(&(s.subject_id.len() as u32).to_le_bytes());
        out.extend_from_slice(s.subject_id.as_bytes());
        for d in [s.n_epochs(), s.n_channels, s.samples_per_epoch] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&s.labels);
        out.extend(s.events.iter().flatten());
        for v in s.clinical.iter().chain(&s.epochs) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            IngestError::Truncated(format!("epoch store ends inside {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn read_epoch_store(bytes: &[u8]) -> Result<Vec<SubjectEpochs>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != EPOCH_STORE_MAGIC {
        return Err(IngestError::Store("bad magic".into()));
    }
    let version = c.u32("version")?;
    if version != EPOCH_STORE_VERSION {
        return Err(IngestError::VersionMismatch(version));
    }
    let n = c.u32("subject count")? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let start = c.pos;
        let id_len = c.u32("id length")? as usize;
        let id_bytes = c.take(id_len, "subject id")?;
        let subject_id = String::from_utf8_lossy(id_bytes).into_owned();
        let t = c.u32("epoch count")? as usize;
        let ch = c.u32("channel count")? as usize;
        let s = c.u32("samples per epoch")? as usize;
        let n_samples = t
            .checked_mul(ch)
            .and_then(|x| x.checked_mul(s))
            .ok_or_else(|| IngestError::Checksum {
                subject: subject_id.clone(),
            })?;
        let labels = c.take(t, "labels")?.to_vec();
        let events = c
            .take(t * N_EVENT_KINDS, "event vectors")?
            .chunks_exact(N_EVENT_KINDS)
            .map(|r| r.try_into().unwrap())
            .collect();
        let f32s = |raw: &[u8]| -> Vec<f32> {
            raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect()
        };
        let clinical: [f32; 3] = f32s(c.take(12, "clinical vector")?).try_into().unwrap();
        let epochs = f32s(c.take(n_samples * 4, "epoch tensor")?);
        let block_end = c.pos;
        let crc = c.u32("checksum")?;
        if crc32fast::hash(&bytes[start..block_end]) != crc {
            return Err(IngestError::Checksum { subject: subject_id });
        }
        let subject = SubjectEpochs {
            subject_id: String::from_utf8(id_bytes.to_vec())
                .map_err(|e| IngestError::Store(format!("subject id: {e}")))?,
            n_channels: ch,
            samples_per_epoch: s,
            epochs,
            labels,
            events,
            clinical,
        };
        subject.validate()?;
        out.push(subject);
    }
    if c.pos != bytes.len() {
        return Err(IngestError::Store(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn subject(id: &str, t: usize, seed: u32) -> SubjectEpochs {
        let (c, s) = (9, 4);
        SubjectEpochs {
            subject_id: id.into(),
            n_channels: c,
            samples_per_epoch: s,
            epochs: (0..t * c * s).map(|i| (i as f32 * 0.37 + seed as f32).sin()).collect(),
            labels: (0..t).map(|i| if i % 7 == 6 { IGNORE_LABEL } else { (i % 5) as u8 }).collect(),
            events: (0..t).map(|i| std::array::from_fn(|k| ((i + k) % 3 == 0) as u8)).collect(),
            clinical: [0.5, 1.0, -1.25],
        }
    }

    #[test]
    fn roundtrip_and_empty() {
        let data = vec![subject("s001", 5, 1), subject("s002", 3, 2)];
        assert_eq!(read_epoch_store(&write_epoch_store(&data).unwrap()).unwrap(), data);
        let empty = write_epoch_store(&[]).unwrap();
        assert_eq!(empty.len(), 12);
        assert!(read_epoch_store(&empty).unwrap().is_empty());
    }

    #[test]
    fn corrupted_byte_names_subject() {
        let data = vec![subject("s001", 5, 1), subject("s002", 3, 2)];
        let mut b = write_epoch_store(&data).unwrap();
        let n = b.len();
        b[n - 10] ^= 0x40;
        match read_epoch_store(&b) {
            Err(IngestError::Checksum { subject }) => assert_eq!(subject, "s002"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn version_mismatch() {
        let mut b = write_epoch_store(&[]).unwrap();
        b[4] = 9;
        assert!(matches!(read_epoch_store(&b), Err(IngestError::VersionMismatch(9))));
    }

    proptest! {
        #[test]
        fn bit_exact_roundtrip(
            values in proptest::collection::vec(proptest::num::f32::ANY, 36),
            clinical in proptest::array::uniform3(proptest::num::f32::ANY),
        ) {
            let mut s = subject("p", 1, 0);
            s.epochs = values;
            s.clinical = clinical;
            let back = read_epoch_store(&write_epoch_store(&[s.clone()]).unwrap()).unwrap();
            prop_assert!(back[0].epochs.iter().zip(&s.epochs).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert!(back[0].clinical.iter().zip(&s.clinical).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
