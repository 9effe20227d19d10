//! Subcommand implementations. Each reads from and writes to the run's
//! `output_dir`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use somnus_core::dataset::{
    build_subject, split_subjects, ClinicalStats, EpochDataset, SplitManifest,
};
use somnus_core::gradsuite::{run_suite, OpCheck, TOLERANCE};
use somnus_core::ingest::{
    parse_annotation_xml, parse_edf, parse_metadata_table, read_epoch_store, write_epoch_store, AnnotationSet,
    IngestError, PsgRecording, SubjectEpochs, SubjectMetadata,
};
use somnus_core::model::{init_encoder, init_head, ContextConfig, ModelBundle};
use somnus_core::seed::derive_seed;
use somnus_core::synth::write_cohort;
use somnus_core::train::{
    ablation_csv, confusion_csv, encode_subjects, evaluate_bundle, prepare_subjects, render_ablation, run_ablation,
    train_stage1, train_stage2, EpochRecord, EvalReport, TrainConfig, TrainOutcome,
};

use crate::config::RunConfig;
use crate::error::CliError;

pub const EPOCH_STORE_FILE: &str = "epochs.epst";
pub const SPLIT_FILE: &str = "split.json";
pub const ENCODER_DIR: &str = "encoder";
pub const ABLATION_DIR: &str = "ablation";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_file(path: &Path, hint: &str) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::Data(format!("cannot read {} ({hint}): {e}", path.display())))
}

pub fn model_dir(out: &Path, ctx: ContextConfig) -> PathBuf {
    out.join(format!("model-{}", ctx.tag()))
}

pub fn eval_dir(out: &Path, ctx: ContextConfig) -> PathBuf {
    out.join(format!("eval-{}", ctx.tag()))
}

#[derive(Debug, Serialize)]
pub struct SynthSummary {
    pub subjects: usize,
    pub respiratory_events: usize,
    pub locked_arousals: usize,
    pub fragmented_epochs: usize,
}

pub fn synth(cfg: &RunConfig) -> Result<SynthSummary, CliError> {
    let dir = cfg.raw_dir();
    let manifest = write_cohort(&dir, &cfg.synth)?;
    let s = &manifest.subjects;
    Ok(SynthSummary {
        subjects: s.len(),
        respiratory_events: s.iter().map(|t| t.respiratory_events).sum(),
        locked_arousals: s.iter().map(|t| t.locked_arousals).sum(),
        fragmented_epochs: s.iter().map(|t| t.fragmented.len()).sum(),
    })
}

enum Loaded {
    Ok(PsgRecording, AnnotationSet),
    Excluded(String),
}

fn load_subject(cfg: &RunConfig, id: &str) -> Result<Loaded, CliError> {
    let raw = cfg.raw_dir();
    let (edf_path, xml_path) = (raw.join(format!("{id}.edf")), raw.join(format!("{id}.xml")));
    for p in [&edf_path, &xml_path] {
        if !p.exists() {
            return Ok(Loaded::Excluded(format!("missing {}", p.display())));
        }
    }
    let rec = match parse_edf(&read_file(&edf_path, "recording")?, id, &cfg.data.aliases) {
        Ok(r) => r,
        Err(e @ IngestError::ExcludedSubject { .. }) => return Ok(Loaded::Excluded(e.to_string())),
        Err(e) => return Err(CliError::Data(format!("{}: {e}", edf_path.display()))),
    };
    let ann = parse_annotation_xml(&read_file(&xml_path, "annotations")?, rec.duration_s, &cfg.data.concepts)
        .map_err(|e| CliError::Data(format!("{}: {e}", xml_path.display())))?;
    Ok(Loaded::Ok(rec, ann))
}

fn load_metadata(cfg: &RunConfig) -> Result<Vec<SubjectMetadata>, CliError> {
    let path = cfg.metadata_path();
    let bytes = read_file(&path, "subject metadata")?;
    let text = String::from_utf8(bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(parse_metadata_table(&text)?)
}

#[derive(Debug, Serialize)]
pub struct IngestedSubject {
    pub subject_id: String,
    pub duration_s: f64,
    pub stage_epochs: usize,
    pub stage_counts: BTreeMap<String, usize>,
    pub event_counts: BTreeMap<String, usize>,
    pub skipped_unknown: usize,
}

#[derive(Debug, Serialize)]
pub struct Exclusion {
    pub subject_id: String,
    pub reason: String,
}

#[derive(Debug, Serialize)]
pub struct IngestSummary {
    pub included: Vec<IngestedSubject>,
    pub excluded: Vec<Exclusion>,
}

/// Parses every subject listed in the metadata table and writes `ingest.json`.
pub fn ingest(cfg: &RunConfig) -> Result<IngestSummary, CliError> {
    let mut summary = IngestSummary {
        included: Vec::new(),
        excluded: Vec::new(),
    };
    for meta in load_metadata(cfg)? {
        let id = meta.subject_id;
        match load_subject(cfg, &id)? {
            Loaded::Excluded(reason) => summary.excluded.push(Exclusion { subject_id: id, reason }),
            Loaded::Ok(rec, ann) => {
                let mut stage_counts = BTreeMap::new();
                for s in &ann.stages.stages {
                    *stage_counts.entry(format!("{s:?}")).or_insert(0) += 1;
                }
                let mut event_counts = BTreeMap::new();
                for e in &ann.events {
                    *event_counts.entry(format!("{:?}", e.kind)).or_insert(0) += 1;
                }
                summary.included.push(IngestedSubject {
                    subject_id: id,
                    duration_s: rec.duration_s,
                    stage_epochs: ann.stages.stages.len(),
                    stage_counts,
                    event_counts,
                    skipped_unknown: ann.skipped_unknown,
                });
            }
        }
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("ingest.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Serialize)]
pub struct PreprocessSummary {
    pub subjects: usize,
    pub excluded: Vec<Exclusion>,
    pub epochs: usize,
    pub scored_epochs: usize,
    pub clinical_stats: ClinicalStats,
    pub split: SplitManifest,
}

/// Splits included subjects, normalises clinical variables with training
/// statistics and writes `epochs.epst` plus `split.json`.
pub fn preprocess(cfg: &RunConfig) -> Result<PreprocessSummary, CliError> {
    let metas = load_metadata(cfg)?;
    let mut included = Vec::new();
    let mut excluded = Vec::new();
    for meta in &metas {
        match load_subject(cfg, &meta.subject_id)? {
            Loaded::Ok(..) => included.push(meta),
            Loaded::Excluded(reason) => excluded.push(Exclusion {
                subject_id: meta.subject_id.clone(),
                reason,
            }),
        }
    }
    let ids: Vec<String> = included.iter().map(|m| m.subject_id.clone()).collect();
    let split = split_subjects(&ids, cfg.data.split_ratios, cfg.data.split_seed)?;
    let train_meta: Vec<&SubjectMetadata> = included
        .iter()
        .copied()
        .filter(|m| split.train.contains(&m.subject_id))
        .collect();
    let stats = ClinicalStats::from_training(&train_meta);
    let pcfg = cfg.data.preprocess();
    let mut subjects = Vec::with_capacity(included.len());
    for meta in &included {
        // Recordings are re-read here so only one is resident at a time.
        if let Loaded::Ok(rec, ann) = load_subject(cfg, &meta.subject_id)? {
            subjects.push(build_subject(&rec, &ann, meta, Some(&stats), &pcfg)?);
        }
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join(EPOCH_STORE_FILE), write_epoch_store(&subjects)?)?;
    write_json(&cfg.output_dir.join(SPLIT_FILE), &split)?;
    let summary = PreprocessSummary {
        subjects: subjects.len(),
        excluded,
        epochs: subjects.iter().map(SubjectEpochs::n_epochs).sum(),
        scored_epochs: subjects.iter().map(SubjectEpochs::n_scored).sum(),
        clinical_stats: stats,
        split,
    };
    write_json(&cfg.output_dir.join("preprocess.json"), &summary)?;
    Ok(summary)
}

/// The preprocessed store and its split.
pub struct Prepared {
    pub dataset: EpochDataset,
    pub split: SplitManifest,
}

impl Prepared {
    pub fn load(out: &Path) -> Result<Self, CliError> {
        let store = read_file(&out.join(EPOCH_STORE_FILE), "run `preprocess` first")?;
        let split = read_file(&out.join(SPLIT_FILE), "run `preprocess` first")?;
        Ok(Self {
            dataset: EpochDataset::new(read_epoch_store(&store)?),
            split: serde_json::from_slice(&split)?,
        })
    }

    pub fn parts(&self) -> Result<[Vec<&SubjectEpochs>; 3], CliError> {
        let s = &self.split;
        Ok([
            self.dataset.select(&s.train)?,
            self.dataset.select(&s.val)?,
            self.dataset.select(&s.test)?,
        ])
    }
}

#[derive(Debug, Serialize)]
pub struct History<'a> {
    pub selected_epoch: usize,
    pub epochs: &'a [EpochRecord],
    pub step_losses: &'a [f64],
    pub encoder_hash: String,
}

fn write_history(dir: &Path, outcome: &TrainOutcome) -> Result<(), CliError> {
    let h = History {
        selected_epoch: outcome.selected_epoch,
        epochs: &outcome.history,
        step_losses: &outcome.step_losses,
        encoder_hash: outcome.bundle.encoder.content_hash(),
    };
    write_json(&dir.join("history.json"), &h)
}

/// Stage 1 on the training split; writes `encoder/`.
pub fn train_encoder(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    let data = Prepared::load(&cfg.output_dir)?;
    let [train, val, _] = data.parts()?;
    let enc = &cfg.model.encoder;
    let t = &TrainConfig {
        stage: 1,
        ..cfg.train.stage1.clone()
    };
    let mut init = init_encoder(enc, derive_seed(t.seed, "encoder/init"))?;
    init.extend(init_head(enc, derive_seed(t.seed, "head/init"))?);
    let dir = cfg.output_dir.join(ENCODER_DIR);
    let ckpt = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt)?;
    let mut outcome = train_stage1(&train, &val, enc, init, t, Some(&ckpt))?;
    outcome.bundle.meta.aggregator = cfg.model.aggregator.clone();
    outcome.bundle.meta.feature_mode = cfg.model.feature_mode;
    outcome.bundle.save(&dir)?;
    write_history(&dir, &outcome)?;
    Ok(outcome)
}

fn load_encoder(out: &Path) -> Result<ModelBundle, CliError> {
    let dir = out.join(ENCODER_DIR);
    if !dir.join("bundle.json").exists() {
        return Err(CliError::Data(format!(
            "no encoder bundle in {}; run `train-encoder` first",
            dir.display()
        )));
    }
    Ok(ModelBundle::load(&dir)?)
}

fn stage2_config(cfg: &RunConfig, ctx: ContextConfig) -> TrainConfig {
    TrainConfig {
        stage: 2,
        context: ctx,
        ..cfg.train.stage2.clone()
    }
}

/// Stage 2 for one context on the frozen encoder; writes `model-<tag>/`.
pub fn train_aggregator(cfg: &RunConfig, ctx: ContextConfig) -> Result<TrainOutcome, CliError> {
    let data = Prepared::load(&cfg.output_dir)?;
    let [train, val, _] = data.parts()?;
    let stage1 = load_encoder(&cfg.output_dir)?;
    let m = &stage1.meta;
    let t = stage2_config(cfg, ctx);
    let d = m.feature_mode.dim(&m.encoder);
    let encode = |s: &[&SubjectEpochs]| encode_subjects(&stage1.encoder, &m.encoder, m.feature_mode, s, t.encode_chunk);
    let tr = prepare_subjects(ctx, &encode(&train)?, d, &train)?;
    let va = prepare_subjects(ctx, &encode(&val)?, d, &val)?;
    let dir = model_dir(&cfg.output_dir, ctx);
    let ckpt = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt)?;
    let outcome = train_stage2(&tr, &va, &stage1, &cfg.model.aggregator, &t, Some(&ckpt))?;
    outcome.bundle.save(&dir)?;
    write_history(&dir, &outcome)?;
    Ok(outcome)
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("report.json"), report)?;
    std::fs::write(dir.join("confusion.csv"), confusion_csv(report))?;
    Ok(())
}

/// Scores `model-<tag>/` on the test split; writes `eval-<tag>/`.
pub fn evaluate(cfg: &RunConfig, ctx: ContextConfig) -> Result<EvalReport, CliError> {
    let data = Prepared::load(&cfg.output_dir)?;
    let [_, _, test] = data.parts()?;
    let dir = model_dir(&cfg.output_dir, ctx);
    if !dir.join("bundle.json").exists() {
        return Err(CliError::Data(format!(
            "no model in {}; run `train-aggregator` first",
            dir.display()
        )));
    }
    let bundle = ModelBundle::load(&dir)?;
    let report = evaluate_bundle(&bundle, &test, cfg.train.stage2.encode_chunk)?;
    write_report(&eval_dir(&cfg.output_dir, ctx), &report)?;
    Ok(report)
}

/// Runs whatever earlier stages are missing, then trains and scores every
/// context arm on the shared encoder.
pub fn ablate(cfg: &RunConfig, jobs: usize) -> Result<Vec<EvalReport>, CliError> {
    let out = &cfg.output_dir;
    if !out.join(EPOCH_STORE_FILE).exists() {
        if cfg.data.raw_dir.is_none() && !cfg.metadata_path().exists() {
            synth(cfg)?;
        }
        preprocess(cfg)?;
    }
    if !out.join(ENCODER_DIR).join("bundle.json").exists() {
        train_encoder(cfg)?;
    }
    let data = Prepared::load(out)?;
    let [train, val, test] = data.parts()?;
    let stage1 = load_encoder(out)?;
    let arms = run_ablation(
        &train,
        &val,
        &test,
        &stage1,
        &cfg.model.aggregator,
        &stage2_config(cfg, ContextConfig::None),
        &ContextConfig::ALL,
        jobs,
    )?;
    let dir = out.join(ABLATION_DIR);
    std::fs::create_dir_all(&dir)?;
    let reports: Vec<EvalReport> = arms.iter().map(|a| a.report.clone()).collect();
    for arm in &arms {
        let arm_dir = dir.join(&arm.report.config);
        write_report(&arm_dir, &arm.report)?;
        write_history(&arm_dir, &arm.outcome)?;
    }
    std::fs::write(dir.join("ablation.csv"), ablation_csv(&reports))?;
    std::fs::write(dir.join("ablation.txt"), render_ablation(&reports))?;
    Ok(reports)
}

#[derive(Debug, Serialize)]
pub struct GradcheckEntry {
    pub op: String,
    pub max_rel_err: f64,
    pub entries: usize,
    pub passed: bool,
}

/// Finite-difference suite; the bool is true when every op is within tolerance.
pub fn gradcheck() -> Result<(Vec<GradcheckEntry>, bool), CliError> {
    let checks: Vec<OpCheck> = run_suite()?;
    let entries: Vec<GradcheckEntry> = checks
        .iter()
        .map(|c| GradcheckEntry {
            op: c.name.clone(),
            max_rel_err: c.max_rel_err,
            entries: c.entries,
            passed: c.passed(),
        })
        .collect();
    let ok = entries.iter().all(|e| e.passed);
    Ok((entries, ok))
}

/// Tolerance applied by [`gradcheck`].
pub const GRADCHECK_TOLERANCE: f64 = TOLERANCE;
