//! Subject metadata tables (CSV or TSV with a header row).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{IngestError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
}

impl Sex {
    /// Male = 1, female = 0.
    pub fn code(self) -> f64 {
        match self {
            Sex::Male => 1.0,
            Sex::Female => 0.0,
        }
    }

    fn parse(raw: &str) -> Option<Self> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "m" | "male" | "1" => Some(Sex::Male),
            "f" | "female" | "0" => Some(Sex::Female),
            _ => None,
        }
    }
}

/// `None` in age or BMI marks the value for imputation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetadata {
    pub subject_id: String,
    pub age_years: Option<f64>,
    pub sex: Sex,
    pub bmi_kg_m2: Option<f64>,
}

impl SubjectMetadata {
    pub fn needs_imputation(&self) -> bool {
        self.age_years.is_none() || self.bmi_kg_m2.is_none()
    }
}

const ID_COLUMNS: &[&str] = &["subject_id", "nsrrid", "id", "subject"];
const AGE_COLUMNS: &[&str] = &["age_years", "age", "age_s1"];
const SEX_COLUMNS: &[&str] = &["sex", "gender"];
const BMI_COLUMNS: &[&str] = &["bmi_kg_m2", "bmi", "bmi_s1"];

fn find(headers: &[String], names: &[&str]) -> Option<usize> {
    names.iter().find_map(|n| headers.iter().position(|h| h == n))
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim().to_ascii_lowercase().as_str(), "" | "na" | "nan" | "null" | ".")
}

fn parse_bounded(cell: &str, what: &str, id: &str, lo: f64, hi: f64) -> Result<Option<f64>> {
    if is_missing(cell) {
        return Ok(None);
    }
    let v: f64 = cell
        .trim()
        .parse()
        .map_err(|_| IngestError::Metadata(format!("{id}: {what} {cell:?} is not a number")))?;
    if !(v > lo && v < hi) {
        return Err(IngestError::Metadata(format!("{id}: {what} {v} outside ({lo}, {hi})")));
    }
    Ok(Some(v))
}

/// Parses a delimited table; the delimiter (tab or comma) is taken from the
/// header line.
pub fn parse_metadata_table(text: &str) -> Result<Vec<SubjectMetadata>> {
    let first = text.lines().next().unwrap_or("");
    let delimiter = if first.contains('\t') { b'\t' } else { b',' };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| IngestError::Metadata(e.to_string()))?
        .iter()
        .map(|h| h.to_ascii_lowercase())
        .collect();
    let id_col = find(&headers, ID_COLUMNS).ok_or(IngestError::MissingColumn("subject_id"))?;
    let age_col = find(&headers, AGE_COLUMNS);
    let sex_col = find(&headers, SEX_COLUMNS).ok_or(IngestError::MissingColumn("sex"))?;
    let bmi_col = find(&headers, BMI_COLUMNS);

    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| IngestError::Metadata(e.to_string()))?;
        let cell = |i: usize| record.get(i).unwrap_or("");
        let id = cell(id_col).to_string();
        if id.is_empty() {
            return Err(IngestError::Metadata("row with empty subject_id".into()));
        }
        if !seen.insert(id.clone()) {
            return Err(IngestError::DuplicateSubject(id));
        }
        let sex = Sex::parse(cell(sex_col))
            .ok_or_else(|| IngestError::Metadata(format!("{id}: unrecognised sex {:?}", cell(sex_col))))?;
        let age_years = match age_col {
            Some(c) => parse_bounded(cell(c), "age", &id, 0.0, 120.0)?,
            None => None,
        };
        let bmi_kg_m2 = match bmi_col {
            Some(c) => parse_bounded(cell(c), "BMI", &id, 10.0, 80.0)?,
            None => None,
        };
        out.push(SubjectMetadata {
            subject_id: id,
            age_years,
            sex,
            bmi_kg_m2,
        });
    }
    Ok(out)
}

pub fn write_metadata_table(rows: &[SubjectMetadata]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["subject_id", "age_years", "sex", "bmi_kg_m2"])
        .expect("in-memory write");
    for r in rows {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let sex = match r.sex {
            Sex::Male => "M",
            Sex::Female => "F",
        };
        w.write_record([r.subject_id.clone(), opt(r.age_years), sex.to_string(), opt(r.bmi_kg_m2)])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
}
