//! EDF reader/writer (fixed-width ASCII header, 16-bit little-endian records).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ChannelRole, ChannelSignal, IngestError, PsgRecording, Result};

const GLOBAL_HEADER: usize = 256;
const SIGNAL_HEADER: usize = 256;
const VERSION: &str = "0       ";

#[derive(Clone, Debug, PartialEq)]
pub struct EdfHeader {
    pub patient: String,
    pub recording: String,
    /// `dd.mm.yy`
    pub start_date: String,
    /// `hh.mm.ss`
    pub start_time: String,
    pub n_records: usize,
    pub record_duration_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdfSignal {
    pub label: String,
    pub transducer: String,
    pub physical_dim: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
    pub prefilter: String,
    pub samples_per_record: usize,
    /// Physical values.
    pub samples: Vec<f64>,
}

impl EdfSignal {
    /// Signal with a calibration spanning the data range over the full
    /// 16-bit digital range.
    pub fn from_physical(label: &str, physical_dim: &str, samples_per_record: usize, samples: Vec<f64>) -> Self {
        let (mut lo, mut hi) = samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            lo = 0.0;
            hi = 1.0;
        }
        if hi - lo < 1e-6 {
            lo -= 1.0;
            hi += 1.0;
        }
        Self {
            label: label.to_string(),
            transducer: String::new(),
            physical_dim: physical_dim.to_string(),
            physical_min: format_bound(lo, false).1,
            physical_max: format_bound(hi, true).1,
            digital_min: -32768,
            digital_max: 32767,
            prefilter: String::new(),
            samples_per_record,
            samples,
        }
    }

    pub fn sample_rate_hz(&self, record_duration_s: f64) -> f64 {
        self.samples_per_record as f64 / record_duration_s
    }

    fn to_physical(&self, digital: i16) -> f64 {
        let (dmin, dmax) = (self.digital_min as f64, self.digital_max as f64);
        (digital as f64 - dmin) * (self.physical_max - self.physical_min) / (dmax - dmin) + self.physical_min
    }

    fn to_digital(&self, physical: f64) -> i16 {
        let (dmin, dmax) = (self.digital_min as f64, self.digital_max as f64);
        let d = (physical - self.physical_min) / (self.physical_max - self.physical_min) * (dmax - dmin) + dmin;
        d.round().clamp(dmin, dmax) as i16
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdfFile {
    pub header: EdfHeader,
    pub signals: Vec<EdfSignal>,
}

fn field(bytes: &[u8], start: usize, len: usize) -> String {
    String::from_utf8_lossy(&bytes[start..start + len]).trim().to_string()
}

fn parse_num<T: std::str::FromStr>(field_name: &'static str, raw: &str) -> Result<T> {
    raw.trim().parse().map_err(|_| IngestError::HeaderField {
        field: field_name,
        value: raw.to_string(),
    })
}

/// Shortest decimal representation of `v` that fits in 8 ASCII characters,
/// rounded outward (down for a lower bound, up for an upper bound).
fn format_bound(v: f64, upper: bool) -> (String, f64) {
    let plain = format!("{v}");
    if plain.len() <= 8 {
        return (plain, v);
    }
    for decimals in (0..=6).rev() {
        let scale = 10f64.powi(decimals);
        let r = if upper { (v * scale).ceil() / scale } else { (v * scale).floor() / scale };
        let s = format!("{r:.*}", decimals as usize);
        if s.len() <= 8 {
            let parsed: f64 = s.parse().unwrap();
            return (s, parsed);
        }
    }
    let r = if upper { v.ceil() } else { v.floor() };
    (format!("{r:.0}"), r)
}

fn pad(s: &str, len: usize) -> Vec<u8> {
    let mut b: Vec<u8> = s.bytes().filter(|c| c.is_ascii() && !c.is_ascii_control()).take(len).collect();
    b.resize(len, b' ');
    b
}

fn format_number(v: f64) -> String {
    let (s, _) = format_bound(v, false);
    s
}

impl EdfFile {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < GLOBAL_HEADER {
            return Err(IngestError::Truncated(format!("{} bytes, header needs 256", bytes.len())));
        }
        if &bytes[..8] != VERSION.as_bytes() {
            return Err(IngestError::NotEdf(format!("version field {:?}", String::from_utf8_lossy(&bytes[..8]))));
        }
        let header_bytes: usize = parse_num("header bytes", &field(bytes, 184, 8))?;
        let declared: i64 = parse_num("number of data records", &field(bytes, 236, 8))?;
        let record_duration_s: f64 = parse_num("record duration", &field(bytes, 244, 8))?;
        let ns: usize = parse_num("number of signals", &field(bytes, 252, 4))?;
        if header_bytes != GLOBAL_HEADER + SIGNAL_HEADER * ns {
            return Err(IngestError::HeaderField {
                field: "header bytes",
                value: header_bytes.to_string(),
            });
        }
        if bytes.len() < header_bytes {
            return Err(IngestError::Truncated(format!(
                "{} bytes, header declares {header_bytes}",
                bytes.len()
            )));
        }
        if !(record_duration_s > 0.0) {
            return Err(IngestError::HeaderField {
                field: "record duration",
                value: record_duration_s.to_string(),
            });
        }

        let sig = |offset: usize, width: usize, i: usize| field(bytes, GLOBAL_HEADER + offset * ns + width * i, width);
        let mut signals = Vec::with_capacity(ns);
        for i in 0..ns {
            let label = sig(0, 16, i);
            let signal = EdfSignal {
                transducer: sig(16, 80, i),
                physical_dim: sig(96, 8, i),
                physical_min: parse_num("physical minimum", &sig(104, 8, i))?,
                physical_max: parse_num("physical maximum", &sig(112, 8, i))?,
                digital_min: parse_num("digital minimum", &sig(120, 8, i))?,
                digital_max: parse_num("digital maximum", &sig(128, 8, i))?,
                prefilter: sig(136, 80, i),
                samples_per_record: parse_num("samples per record", &sig(216, 8, i))?,
                samples: Vec::new(),
                label,
            };
            if signal.digital_min == signal.digital_max {
                return Err(IngestError::DigitalRangeZero { label: signal.label });
            }
            signals.push(signal);
        }

        let record_bytes: usize = signals.iter().map(|s| s.samples_per_record * 2).sum();
        let data = &bytes[header_bytes..];
        if record_bytes == 0 {
            return Err(IngestError::HeaderField {
                field: "samples per record",
                value: "0".into(),
            });
        }
        if data.len() % record_bytes != 0 {
            return Err(IngestError::Truncated(format!(
                "data section of {} bytes is not a whole number of {record_bytes}-byte records",
                data.len()
            )));
        }
        let actual = data.len() / record_bytes;
        if declared >= 0 && declared as usize != actual {
            return Err(IngestError::RecordCountMismatch {
                declared: declared as usize,
                actual,
            });
        }
        for s in &mut signals {
            s.samples.reserve(actual * s.samples_per_record);
        }
        let mut pos = 0;
        for _ in 0..actual {
            for s in &mut signals {
                for _ in 0..s.samples_per_record {
                    let d = i16::from_le_bytes([data[pos], data[pos + 1]]);
                    pos += 2;
                    let v = s.to_physical(d);
                    s.samples.push(v);
                }
            }
        }

        Ok(Self {
            header: EdfHeader {
                patient: field(bytes, 8, 80),
                recording: field(bytes, 88, 80),
                start_date: field(bytes, 168, 8),
                start_time: field(bytes, 176, 8),
                n_records: actual,
                record_duration_s,
            },
            signals,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let ns = self.signals.len();
        let n_records = self.header.n_records;
        for s in &self.signals {
            if s.samples.len() != n_records * s.samples_per_record {
                return Err(IngestError::Store(format!(
                    "signal `{}` has {} samples, expected {} records × {}",
                    s.label,
                    s.samples.len(),
                    n_records,
                    s.samples_per_record
                )));
            }
            if s.digital_min == s.digital_max {
                return Err(IngestError::DigitalRangeZero { label: s.label.clone() });
            }
        }
        let header_bytes = GLOBAL_HEADER + SIGNAL_HEADER * ns;
        let record_samples: usize = self.signals.iter().map(|s| s.samples_per_record).sum();
        let mut out = Vec::with_capacity(header_bytes + 2 * record_samples * n_records);
        out.extend(pad(VERSION, 8));
        out.extend(pad(&self.header.patient, 80));
        out.extend(pad(&self.header.recording, 80));
        out.extend(pad(&self.header.start_date, 8));
        out.extend(pad(&self.header.start_time, 8));
        out.extend(pad(&header_bytes.to_string(), 8));
        out.extend(pad("", 44));
        out.extend(pad(&n_records.to_string(), 8));
        out.extend(pad(&format_number(self.header.record_duration_s), 8));
        out.extend(pad(&ns.to_string(), 4));
        let columns: [(usize, Box<dyn Fn(&EdfSignal) -> String>); 10] = [
            (16, Box::new(|s| s.label.clone())),
            (80, Box::new(|s| s.transducer.clone())),
            (8, Box::new(|s| s.physical_dim.clone())),
            (8, Box::new(|s| format_number(s.physical_min))),
            (8, Box::new(|s| format_number(s.physical_max))),
            (8, Box::new(|s| s.digital_min.to_string())),
            (8, Box::new(|s| s.digital_max.to_string())),
            (80, Box::new(|s| s.prefilter.clone())),
            (8, Box::new(|s| s.samples_per_record.to_string())),
            (32, Box::new(|_| String::new())),
        ];
        for (width, get) in &columns {
            for s in &self.signals {
                out.extend(pad(&get(s), *width));
            }
        }
        for r in 0..n_records {
            for s in &self.signals {
                let spr = s.samples_per_record;
                for &v in &s.samples[r * spr..(r + 1) * spr] {
                    out.extend_from_slice(&s.to_digital(v).to_le_bytes());
                }
            }
        }
        Ok(out)
    }
}

/// Maps EDF channel labels onto model roles. Labels compare
/// case-insensitively after trimming; within a role, earlier aliases win.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelAliases {
    pub aliases: BTreeMap<ChannelRole, Vec<String>>,
}

impl Default for ChannelAliases {
    fn default() -> Self {
        let table: [(ChannelRole, &[&str]); 9] = [
            (ChannelRole::SpO2, &["SaO2", "SpO2", "SAO2", "Sat"]),
            (ChannelRole::Ecg, &["ECG", "EKG", "ECG1"]),
            (ChannelRole::Emg, &["EMG", "Chin EMG", "EMG1"]),
            (ChannelRole::EogLeft, &["EOG(L)", "EOGL", "LOC", "E1"]),
            (ChannelRole::EogRight, &["EOG(R)", "EOGR", "ROC", "E2"]),
            // C4-A1 is the primary derivation; "EEG(sec)" (C3-A2) is not used.
            (ChannelRole::Eeg, &["EEG", "C4-A1", "C4A1", "EEG C4-A1"]),
            (ChannelRole::Thoracic, &["THOR RES", "Thor", "THORACIC", "Chest"]),
            (ChannelRole::Abdominal, &["ABDO RES", "Abdo", "ABDOMINAL", "ABD"]),
            (ChannelRole::Position, &["POSITION", "Pos", "Body"]),
        ];
        Self {
            aliases: table
                .into_iter()
                .map(|(r, names)| (r, names.iter().map(|s| s.to_string()).collect()))
                .collect(),
        }
    }
}

impl ChannelAliases {
    /// Index into `labels` of the channel that fills `role`.
    pub fn resolve(&self, role: ChannelRole, labels: &[&str]) -> Option<usize> {
        let wanted = self.aliases.get(&role)?;
        wanted.iter().find_map(|alias| {
            let alias = alias.trim().to_ascii_lowercase();
            labels.iter().position(|l| l.trim().to_ascii_lowercase() == alias)
        })
    }

    /// Label written for `role` when exporting.
    pub fn primary(&self, role: ChannelRole) -> String {
        self.aliases
            .get(&role)
            .and_then(|v| v.first().cloned())
            .unwrap_or_else(|| format!("{role:?}"))
    }
}

/// Parses an EDF file and selects one channel per required role. A file
/// lacking any role yields [`IngestError::ExcludedSubject`].
pub fn parse_edf(bytes: &[u8], subject_id: &str, aliases: &ChannelAliases) -> Result<PsgRecording> {
    let edf = EdfFile::parse(bytes)?;
    let labels: Vec<&str> = edf.signals.iter().map(|s| s.label.as_str()).collect();
    let mut missing = Vec::new();
    let mut channels = Vec::new();
    for role in ChannelRole::ALL {
        match aliases.resolve(role, &labels) {
            Some(i) => {
                let s = &edf.signals[i];
                channels.push(ChannelSignal {
                    label: s.label.clone(),
                    role,
                    sample_rate_hz: s.sample_rate_hz(edf.header.record_duration_s),
                    physical_unit: s.physical_dim.clone(),
                    samples: s.samples.clone(),
                });
            }
            None => missing.push(role),
        }
    }
    if !missing.is_empty() {
        return Err(IngestError::ExcludedSubject {
            subject: subject_id.to_string(),
            missing,
        });
    }
    Ok(PsgRecording {
        subject_id: subject_id.to_string(),
        start_time: format!("{} {}", edf.header.start_date, edf.header.start_time),
        duration_s: edf.header.n_records as f64 * edf.header.record_duration_s,
        channels,
    })
}

/// Encodes a recording as EDF with one-second data records.
pub fn recording_to_edf(rec: &PsgRecording, aliases: &ChannelAliases) -> Result<EdfFile> {
    let n_records = rec.duration_s.round() as usize;
    let mut signals = Vec::with_capacity(rec.channels.len());
    for c in &rec.channels {
        let spr = c.sample_rate_hz.round() as usize;
        if (spr as f64 - c.sample_rate_hz).abs() > 1e-9 || spr == 0 {
            return Err(IngestError::Store(format!(
                "channel `{}` rate {} Hz is not a whole number of samples per second",
                c.label, c.sample_rate_hz
            )));
        }
        let label = if c.label.is_empty() { aliases.primary(c.role) } else { c.label.clone() };
        signals.push(EdfSignal::from_physical(&label, &c.physical_unit, spr, c.samples.clone()));
    }
    let (date, time) = rec.start_time.split_once(' ').unwrap_or(("01.01.00", "00.00.00"));
    Ok(EdfFile {
        header: EdfHeader {
            patient: rec.subject_id.clone(),
            recording: "synthetic".into(),
            start_date: date.to_string(),
            start_time: time.to_string(),
            n_records,
            record_duration_s: 1.0,
        },
        signals,
    })
}
