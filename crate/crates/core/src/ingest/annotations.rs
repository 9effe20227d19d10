//! NSRR-style scored-event XML.
//!
//! ```xml
//! <PSGAnnotation>
//!   <EpochLength>30</EpochLength>
//!   <ScoredEvents>
//!     <ScoredEvent>
//!       <EventType>Stages|Stages</EventType>
//!       <EventConcept>Stage 2 sleep|2</EventConcept>
//!       <Start>0</Start>
//!       <Duration>90</Duration>
//!     </ScoredEvent>
//!   </ScoredEvents>
//! </PSGAnnotation>
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{IngestError, Result};

pub const EPOCH_S: f64 = 30.0;

/// Slack for floating-point event bounds, in seconds.
const BOUND_TOL_S: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RawStage {
    Wake,
    S1,
    S2,
    S3,
    S4,
    Rem,
    Unscored,
}

impl RawStage {
    pub const ALL: [RawStage; 7] = [
        RawStage::Wake,
        RawStage::S1,
        RawStage::S2,
        RawStage::S3,
        RawStage::S4,
        RawStage::Rem,
        RawStage::Unscored,
    ];

    fn concept(self) -> &'static str {
        match self {
            RawStage::Wake => "Wake|0",
            RawStage::S1 => "Stage 1 sleep|1",
            RawStage::S2 => "Stage 2 sleep|2",
            RawStage::S3 => "Stage 3 sleep|3",
            RawStage::S4 => "Stage 4 sleep|4",
            RawStage::Rem => "REM sleep|5",
            RawStage::Unscored => "Unscored|9",
        }
    }
}

/// Event kinds in event-vector column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    Hypopnea,
    ObstructiveApnea,
    CentralApnea,
    MixedApnea,
    Desaturation,
    RespEffortArousal,
    PeriodicBreathing,
}

impl EventKind {
    pub const ALL: [EventKind; 7] = [
        EventKind::Hypopnea,
        EventKind::ObstructiveApnea,
        EventKind::CentralApnea,
        EventKind::MixedApnea,
        EventKind::Desaturation,
        EventKind::RespEffortArousal,
        EventKind::PeriodicBreathing,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_respiratory(self) -> bool {
        matches!(
            self,
            EventKind::Hypopnea | EventKind::ObstructiveApnea | EventKind::CentralApnea | EventKind::MixedApnea
        )
    }

    fn concept(self) -> (&'static str, &'static str) {
        match self {
            EventKind::Hypopnea => ("Respiratory|Respiratory", "Hypopnea|Hypopnea"),
            EventKind::ObstructiveApnea => ("Respiratory|Respiratory", "Obstructive apnea|Obstructive Apnea"),
            EventKind::CentralApnea => ("Respiratory|Respiratory", "Central apnea|Central Apnea"),
            EventKind::MixedApnea => ("Respiratory|Respiratory", "Mixed apnea|Mixed Apnea"),
            EventKind::Desaturation => ("Respiratory|Respiratory", "SpO2 desaturation|SpO2 desaturation"),
            EventKind::RespEffortArousal => (
                "Arousals|Arousals",
                "Arousal resulting from respiratory effort|Arousal (RERA)",
            ),
            EventKind::PeriodicBreathing => ("Respiratory|Respiratory", "Periodic breathing|Periodic Breathing"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventAnnotation {
    pub kind: EventKind,
    pub start_s: f64,
    pub duration_s: f64,
}

impl EventAnnotation {
    pub fn end_s(&self) -> f64 {
        self.start_s + self.duration_s
    }
}

/// One raw stage per whole 30-s epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageAnnotation {
    pub stages: Vec<RawStage>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    pub stages: StageAnnotation,
    pub events: Vec<EventAnnotation>,
    /// Scored events whose concept is not in the table.
    pub skipped_unknown: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptTarget {
    Stage(RawStage),
    Event(EventKind),
}

/// Concept name → target. Keys are matched against the part of
/// `EventConcept` before `|`, trimmed and lowercased.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptTable {
    pub concepts: BTreeMap<String, ConceptTarget>,
}

impl Default for ConceptTable {
    fn default() -> Self {
        use ConceptTarget::{Event, Stage};
        let table = [
            ("wake", Stage(RawStage::Wake)),
            ("stage 1 sleep", Stage(RawStage::S1)),
            ("stage 2 sleep", Stage(RawStage::S2)),
            ("stage 3 sleep", Stage(RawStage::S3)),
            ("stage 4 sleep", Stage(RawStage::S4)),
            ("rem sleep", Stage(RawStage::Rem)),
            ("unscored", Stage(RawStage::Unscored)),
            ("movement", Stage(RawStage::Unscored)),
            ("hypopnea", Event(EventKind::Hypopnea)),
            ("obstructive apnea", Event(EventKind::ObstructiveApnea)),
            ("central apnea", Event(EventKind::CentralApnea)),
            ("mixed apnea", Event(EventKind::MixedApnea)),
            ("spo2 desaturation", Event(EventKind::Desaturation)),
            ("arousal resulting from respiratory effort", Event(EventKind::RespEffortArousal)),
            ("rera", Event(EventKind::RespEffortArousal)),
            ("periodic breathing", Event(EventKind::PeriodicBreathing)),
        ];
        Self {
            concepts: table.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }
}

impl ConceptTable {
    pub fn lookup(&self, concept: &str) -> Option<ConceptTarget> {
        let key = concept.split('|').next().unwrap_or("").trim().to_lowercase();
        self.concepts.get(&key).copied()
    }
}

fn child_text<'a>(node: roxmltree::Node<'a, 'a>, tag: &str) -> Option<&'a str> {
    node.children()
        .find(|c| c.is_element() && c.tag_name().name() == tag)
        .and_then(|c| c.text())
        .map(str::trim)
}

fn parse_seconds(what: &str, raw: Option<&str>) -> Result<f64> {
    let raw = raw.ok_or_else(|| IngestError::Xml(format!("ScoredEvent without <{what}>")))?;
    let v: f64 = raw
        .parse()
        .map_err(|_| IngestError::Xml(format!("<{what}> is not a number: {raw:?}")))?;
    if !v.is_finite() {
        return Err(IngestError::Xml(format!("<{what}> is not finite: {raw:?}")));
    }
    Ok(v)
}

/// Parses scored events, expanding stage events onto
/// `floor(recording_s / 30)` epochs (uncovered epochs stay Unscored).
pub fn parse_annotation_xml(bytes: &[u8], recording_s: f64, table: &ConceptTable) -> Result<AnnotationSet> {
    let text = std::str::from_utf8(bytes).map_err(|e| IngestError::Xml(e.to_string()))?;
    let doc = roxmltree::Document::parse(text).map_err(|e| IngestError::Xml(e.to_string()))?;
    let n_epochs = (recording_s / EPOCH_S + 1e-9).floor().max(0.0) as usize;
    let mut stages = vec![RawStage::Unscored; n_epochs];
    let mut events = Vec::new();
    let mut skipped_unknown = 0;

    for ev in doc.descendants().filter(|n| n.is_element() && n.tag_name().name() == "ScoredEvent") {
        let Some(concept) = child_text(ev, "EventConcept") else {
            return Err(IngestError::Xml("ScoredEvent without <EventConcept>".into()));
        };
        let Some(target) = table.lookup(concept) else {
            skipped_unknown += 1;
            continue;
        };
        let start_s = parse_seconds("Start", child_text(ev, "Start"))?;
        let duration_s = parse_seconds("Duration", child_text(ev, "Duration"))?;
        if start_s < 0.0 || duration_s < 0.0 || start_s + duration_s > recording_s + BOUND_TOL_S {
            return Err(IngestError::EventOutOfRange {
                start_s,
                duration_s,
                recording_s,
            });
        }
        match target {
            ConceptTarget::Stage(stage) => {
                let first = (start_s / EPOCH_S).round() as usize;
                let last = (((start_s + duration_s) / EPOCH_S).round() as usize).min(n_epochs);
                for s in stages.iter_mut().take(last).skip(first) {
                    *s = stage;
                }
            }
            ConceptTarget::Event(kind) => {
                if duration_s <= 0.0 {
                    return Err(IngestError::Xml(format!("{kind:?} at {start_s} s has zero duration")));
                }
                events.push(EventAnnotation {
                    kind,
                    start_s,
                    duration_s,
                });
            }
        }
    }

    Ok(AnnotationSet {
        stages: StageAnnotation { stages },
        events,
        skipped_unknown,
    })
}

fn push_event(out: &mut String, event_type: &str, concept: &str, start: f64, duration: f64) {
    let _ = write!(
        out,
        "<ScoredEvent>\n<EventType>{event_type}</EventType>\n<EventConcept>{concept}</EventConcept>\n\
         <Start>{start}</Start>\n<Duration>{duration}</Duration>\n</ScoredEvent>\n"
    );
}

/// Writes stages (merged into runs) and events. Numbers use the shortest
/// representation that parses back to the same value.
pub fn write_annotation_xml(stages: &StageAnnotation, events: &[EventAnnotation], recording_s: f64) -> String {
    let mut out = String::from(
        "<?xml version=\"1.0\" encoding=\"UTF-8\" standalone=\"no\"?>\n<PSGAnnotation>\n\
         <SoftwareVersion>somnus</SoftwareVersion>\n<EpochLength>30</EpochLength>\n<ScoredEvents>\n",
    );
    push_event(&mut out, "", "Recording Start Time", 0.0, recording_s);
    let s = &stages.stages;
    let mut i = 0;
    while i < s.len() {
        let j = (i..s.len()).find(|&j| s[j] != s[i]).unwrap_or(s.len());
        push_event(
            &mut out,
            "Stages|Stages",
            s[i].concept(),
            i as f64 * EPOCH_S,
            (j - i) as f64 * EPOCH_S,
        );
        i = j;
    }
    for e in events {
        let (event_type, concept) = e.kind.concept();
        push_event(&mut out, event_type, concept, e.start_s, e.duration_s);
    }
    out.push_str("</ScoredEvents>\n</PSGAnnotation>\n");
    out
}
