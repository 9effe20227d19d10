//! Two-stage training, checkpoint selection, metrics and the context ablation.

use std::path::Path;

use num_bigint::BigUint;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{StageLabel, SubjectEpochs, N_STAGES};
use crate::ingest::{IGNORE_LABEL, N_EVENT_KINDS};
use crate::model::{
    aggregator_forward, cone_len, encode_epochs, encoder_forward, fuse_for, head_forward, init_aggregator, mtl_forward,
    AggregatorConfig, BundleMeta, ContextConfig, EncoderConfig, FeatureMode, ModelBundle, ModelError,
};
use crate::seed::derive_seed;
use crate::tensor::{Adam, AdamConfig, Graph, ParamStore, Reduction, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("missing context: {0}")]
    MissingContext(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } | TensorError::NonFiniteGradient { .. } => TrainError::Numeric(e.to_string()),
            other => TrainError::Tensor(other),
        }
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MtlWeights {
    pub event: f64,
    pub sex: f64,
    pub age: f64,
    pub bmi: f64,
}

impl Default for MtlWeights {
    fn default() -> Self {
        Self {
            event: 1.0,
            sex: 1.0,
            age: 1.0,
            bmi: 1.0,
        }
    }
}

/// How per-epoch Stage-2 losses combine into a batch loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceReduction {
    /// Sum over a subject's valid epochs, mean over subjects in the batch.
    #[default]
    SumThenBatchMean,
    /// Mean over a subject's valid epochs, mean over subjects.
    MeanThenBatchMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub max_epochs: usize,
    /// Stops training after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub stage: u8,
    pub context: ContextConfig,
    pub mtl_weights: MtlWeights,
    pub sequence_reduction: SequenceReduction,
    pub adam: AdamConfig,
    /// Epochs per forward pass when encoding without gradients.
    pub encode_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr0: 1e-4,
            lr_decay: 0.90,
            max_epochs: 100,
            max_steps: None,
            seed: 0,
            stage: 1,
            context: ContextConfig::None,
            mtl_weights: MtlWeights::default(),
            sequence_reduction: SequenceReduction::default(),
            adam: AdamConfig::default(),
            encode_chunk: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(TrainError::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(TrainError::Config(format!("lr_decay must be in (0, 1], got {}", self.lr_decay)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.encode_chunk == 0 {
            return Err(TrainError::Config("batch_size, max_epochs and encode_chunk must be positive".into()));
        }
        if !matches!(self.stage, 1 | 2) {
            return Err(TrainError::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        let w = self.mtl_weights;
        if [w.event, w.sex, w.age, w.bmi].iter().any(|x| !(*x >= 0.0)) {
            return Err(TrainError::Config("MTL weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Splits a finite double into `(mantissa digits, decimal exponent)` using its
/// shortest round-trip representation.
fn decimal_parts(x: f64) -> (BigUint, i64) {
    let s = format!("{x:e}");
    let (mant, exp) = s.split_once('e').expect("`{:e}` always has an exponent");
    let exp: i64 = exp.parse().expect("integer exponent");
    let (int, frac) = mant.split_once('.').unwrap_or((mant, ""));
    let digits: BigUint = format!("{int}{frac}").parse().expect("decimal digits");
    (digits, exp - frac.len() as i64)
}

/// `lr0 · decay^epoch`, evaluated exactly on the decimal values of `lr0` and
/// `decay` and rounded once to the nearest double.
pub fn learning_rate(lr0: f64, decay: f64, epoch: usize) -> f64 {
    if decay == 1.0 || epoch == 0 {
        return lr0;
    }
    let (m0, e0) = decimal_parts(lr0);
    let (md, ed) = decimal_parts(decay);
    let m = m0 * md.pow(epoch as u32);
    format!("{m}e{}", e0 + ed * epoch as i64).parse().expect("valid float literal")
}

/// One training epoch's bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Mean optimised loss over the epoch's batches.
    pub train_loss: f64,
    /// Mean staging cross-entropy over the epoch's batches (no MTL terms).
    pub train_ce: f64,
    pub val_loss: f64,
}

/// Index of the lowest validation loss; ties go to the earliest epoch.
pub fn select_checkpoint(val_losses: &[f64]) -> Result<usize> {
    if val_losses.is_empty() {
        return Err(TrainError::EmptyDataset("checkpoint history is empty".into()));
    }
    let mut best = 0;
    for (i, &v) in val_losses.iter().enumerate() {
        if v < val_losses[best] {
            best = i;
        }
    }
    Ok(best)
}

/// A finished training run: per-epoch history, every optimizer step's loss,
/// and the bundle at the selected epoch.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
    pub selected_epoch: usize,
    pub bundle: ModelBundle,
}

fn check_finite(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::Numeric(format!("{what} is {v}")))
    }
}

fn save_checkpoint(dir: Option<&Path>, epoch: usize, params: &ParamStore) -> Result<()> {
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
        params.save(&dir.join(format!("epoch_{epoch:03}.somn")))?;
    }
    Ok(())
}

fn scored_examples(subjects: &[&SubjectEpochs]) -> Vec<(usize, usize)> {
    subjects
        .iter()
        .enumerate()
        .flat_map(|(s, subj)| {
            subj.labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l != IGNORE_LABEL)
                .map(move |(t, _)| (s, t))
        })
        .collect()
}

fn stage1_batch_loss<'p>(
    g: &mut Graph<'p>,
    params: &'p ParamStore,
    enc: &EncoderConfig,
    subjects: &[&SubjectEpochs],
    batch: &[(usize, usize)],
    trainable: bool,
    rng: Option<&mut ChaCha8Rng>,
    reduction: Reduction,
) -> Result<Var> {
    let epochs: Vec<&[f32]> = batch.iter().map(|&(s, t)| subjects[s].epoch(t)).collect();
    let labels: Vec<usize> = batch.iter().map(|&(s, t)| subjects[s].labels[t] as usize).collect();
    let out = encoder_forward(g, params, enc, &epochs, trainable, rng)?;
    let logits = head_forward(g, params, enc, out.tokens, trainable)?;
    Ok(g.masked_cross_entropy(logits, &labels, &vec![true; labels.len()], reduction)?)
}

/// Mean cross-entropy of the encoder and head over all scored epochs.
pub fn stage1_loss(params: &ParamStore, enc: &EncoderConfig, subjects: &[&SubjectEpochs], chunk: usize) -> Result<f64> {
    let examples = scored_examples(subjects);
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset("no scored epochs".into()));
    }
    let mut total = 0.0;
    for part in examples.chunks(chunk.max(1)) {
        let mut g = Graph::new();
        let loss = stage1_batch_loss(&mut g, params, enc, subjects, part, false, None, Reduction::Sum)?;
        total += g.scalar(loss);
    }
    check_finite("validation loss", total / examples.len() as f64)
}

/// Stage 1: encoder and per-epoch head trained on shuffled independent
/// epochs. `init` holds `enc.*` and `head.*` weights. With `checkpoint_dir`,
/// every epoch's weights are written there as `epoch_NNN.somn`.
pub fn train_stage1(
    train: &[&SubjectEpochs],
    val: &[&SubjectEpochs],
    enc: &EncoderConfig,
    init: ParamStore,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.stage != 1 {
        return Err(TrainError::Config("train_stage1 needs stage = 1".into()));
    }
    let mut examples = scored_examples(train);
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset("no scored training epochs".into()));
    }
    if scored_examples(val).is_empty() {
        return Err(TrainError::EmptyDataset("no scored validation epochs".into()));
    }
    let mut params = init;
    let mut adam = Adam::new(cfg.adam);
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 0..cfg.max_epochs {
        if cfg.max_steps.is_some_and(|m| step_losses.len() >= m) {
            break;
        }
        let lr = learning_rate(cfg.lr0, cfg.lr_decay, epoch);
        examples.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("stage1/shuffle/{epoch}"))));
        let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("stage1/dropout/{epoch}")));
        let (mut sum, mut steps) = (0.0, 0);
        for batch in examples.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step_losses.len() >= m) {
                break;
            }
            let (loss, grads) = {
                let mut g = Graph::new();
                let rng = (enc.dropout > 0.0).then_some(&mut drop_rng);
                let loss = stage1_batch_loss(&mut g, &params, enc, train, batch, true, rng, Reduction::Mean)?;
                (g.scalar(loss), g.backward(loss)?)
            };
            check_finite("training loss", loss)?;
            params.zero_grad();
            params.accumulate(&grads)?;
            adam.step(&mut params, lr)?;
            step_losses.push(loss);
            sum += loss;
            steps += 1;
        }
        let val_loss = stage1_loss(&params, enc, val, cfg.encode_chunk)?;
        save_checkpoint(checkpoint_dir, epoch, &params)?;
        let mean = if steps > 0 { sum / steps as f64 } else { f64::NAN };
        history.push(EpochRecord {
            epoch,
            lr,
            steps,
            train_loss: mean,
            train_ce: mean,
            val_loss,
        });
        if best.as_ref().map_or(true, |b| val_loss < b.0) {
            best = Some((val_loss, epoch, params.clone()));
        }
    }
    let (_, selected_epoch, chosen) = best.ok_or_else(|| TrainError::EmptyDataset("no epochs were run".into()))?;
    debug_assert_eq!(
        select_checkpoint(&history.iter().map(|r| r.val_loss).collect::<Vec<_>>()).ok(),
        Some(selected_epoch)
    );
    let bundle = ModelBundle {
        meta: BundleMeta {
            encoder: enc.clone(),
            aggregator: AggregatorConfig::default(),
            context: ContextConfig::None,
            feature_mode: FeatureMode::Pooled,
            encoder_frozen: false,
        },
        encoder: chosen.subset("enc."),
        head: chosen.subset("head."),
        aggregator: ParamStore::new(),
    };
    Ok(TrainOutcome {
        history,
        step_losses,
        selected_epoch,
        bundle,
    })
}

/// Frozen-encoder features for each subject, `[T, mode.dim(enc)]` row-major.
pub fn encode_subjects(
    encoder: &ParamStore,
    enc: &EncoderConfig,
    mode: FeatureMode,
    subjects: &[&SubjectEpochs],
    chunk: usize,
) -> Result<Vec<Vec<f64>>> {
    subjects
        .iter()
        .map(|s| {
            let epochs: Vec<&[f32]> = (0..s.n_epochs()).map(|t| s.epoch(t)).collect();
            if epochs.is_empty() {
                return Ok(Vec::new());
            }
            let (tokens, pooled) = encode_epochs(encoder, enc, &epochs, chunk)?;
            Ok(match mode {
                FeatureMode::Pooled => pooled,
                FeatureMode::Flattened => tokens,
            })
        })
        .collect()
}

/// One night ready for the aggregator.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSubject {
    pub subject_id: String,
    /// `[T, in_dim]` row-major.
    pub x: Vec<f64>,
    pub in_dim: usize,
    /// Stage index per epoch, 0 where unscored.
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
    pub events: Vec<[u8; N_EVENT_KINDS]>,
    /// `[z(age), sex, z(BMI)]`, used as MTL targets.
    pub clinical: [f32; 3],
}

impl PreparedSubject {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Fuses context onto precomputed features per `ctx`.
pub fn prepare_subjects(
    ctx: ContextConfig,
    features: &[Vec<f64>],
    d: usize,
    subjects: &[&SubjectEpochs],
) -> Result<Vec<PreparedSubject>> {
    subjects
        .iter()
        .zip(features)
        .map(|(s, f)| {
            if ctx.uses_events() && s.events.len() != s.n_epochs() {
                return Err(TrainError::MissingContext(format!(
                    "subject `{}` has {} event rows for {} epochs",
                    s.subject_id,
                    s.events.len(),
                    s.n_epochs()
                )));
            }
            if s.n_scored() == 0 {
                return Err(TrainError::EmptyDataset(format!("subject `{}` has no scored epochs", s.subject_id)));
            }
            let x = fuse_for(ctx, f, d, s)?;
            Ok(PreparedSubject {
                subject_id: s.subject_id.clone(),
                in_dim: d + ctx.dims(),
                x,
                labels: s.labels.iter().map(|&l| if l == IGNORE_LABEL { 0 } else { l as usize }).collect(),
                mask: s.mask(),
                events: s.events.clone(),
                clinical: s.clinical,
            })
        })
        .collect()
}

/// Loss terms for one subject.
pub struct SubjectLoss {
    /// Optimised objective: staging loss plus weighted MTL terms.
    pub total: Var,
    /// Staging cross-entropy alone.
    pub ce: Var,
    /// `[pad_len, 5]`
    pub logits: Var,
}

/// Builds the Stage-2 objective for `s` zero-padded to `pad_len` rows.
/// Rows past the subject's length are masked out of every term.
#[allow(clippy::too_many_arguments)]
pub fn stage2_subject_loss<'p>(
    g: &mut Graph<'p>,
    params: &'p ParamStore,
    agg: &AggregatorConfig,
    ctx: ContextConfig,
    weights: &MtlWeights,
    reduction: SequenceReduction,
    s: &PreparedSubject,
    pad_len: usize,
    trainable: bool,
) -> Result<SubjectLoss> {
    let t = s.len();
    if pad_len < t || pad_len > agg.max_len {
        return Err(TrainError::Config(format!("pad length {pad_len} outside [{t}, {}]", agg.max_len)));
    }
    let mut data = s.x.clone();
    data.resize(pad_len * s.in_dim, 0.0);
    let mut labels = s.labels.clone();
    labels.resize(pad_len, 0);
    let mut mask = s.mask.clone();
    mask.resize(pad_len, false);
    let x = g.constant(Tensor::new(vec![pad_len, s.in_dim], data)?);
    let out = aggregator_forward(g, params, agg, x, trainable)?;
    let red = match reduction {
        SequenceReduction::SumThenBatchMean => Reduction::Sum,
        SequenceReduction::MeanThenBatchMean => Reduction::Mean,
    };
    let ce = g.masked_cross_entropy(out.logits, &labels, &mask, red)?;
    let mut total = ce;
    if ctx == ContextConfig::Mtl {
        let m = mtl_forward(g, params, out.hidden, &mask, trainable)?;
        let mut targets: Vec<f64> = s.events.iter().flat_map(|r| r.iter().map(|&v| v as f64)).collect();
        targets.resize(pad_len * N_EVENT_KINDS, 0.0);
        let ev = g.bce_with_logits(m.event_logits, &targets, &mask, red)?;
        let sex = g.bce_with_logits(m.sex_logit, &[s.clinical[1] as f64], &[true], Reduction::Sum)?;
        let age = g.squared_error(m.age_pred, &[s.clinical[0] as f64])?;
        let bmi = g.squared_error(m.bmi_pred, &[s.clinical[2] as f64])?;
        for (term, w) in [(ev, weights.event), (sex, weights.sex), (age, weights.age), (bmi, weights.bmi)] {
            if w != 0.0 {
                let scaled = g.scale(term, w)?;
                total = g.add(total, scaled)?;
            }
        }
    }
    Ok(SubjectLoss {
        total,
        ce,
        logits: out.logits,
    })
}

/// Mean over subjects of the staging loss (no MTL terms).
pub fn stage2_loss(params: &ParamStore, agg: &AggregatorConfig, reduction: SequenceReduction, subjects: &[PreparedSubject]) -> Result<f64> {
    if subjects.is_empty() {
        return Err(TrainError::EmptyDataset("no subjects".into()));
    }
    let mut total = 0.0;
    for s in subjects {
        let mut g = Graph::new();
        let l = stage2_subject_loss(
            &mut g,
            params,
            agg,
            ContextConfig::None,
            &MtlWeights::default(),
            reduction,
            s,
            cone_len(s.len(), agg),
            false,
        )?;
        total += g.scalar(l.ce);
    }
    check_finite("validation loss", total / subjects.len() as f64)
}

/// Stage 2: aggregator (and MTL heads) over frozen-encoder features. The
/// returned bundle carries `stage1`'s encoder and head unchanged.
pub fn train_stage2(
    train: &[PreparedSubject],
    val: &[PreparedSubject],
    stage1: &ModelBundle,
    agg: &AggregatorConfig,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.stage != 2 {
        return Err(TrainError::Config("train_stage2 needs stage = 2".into()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::EmptyDataset("Stage 2 needs training and validation subjects".into()));
    }
    let in_dim = train[0].in_dim;
    if let Some(s) = train.iter().chain(val).find(|s| s.in_dim != in_dim) {
        return Err(TrainError::Config(format!("subject `{}` has width {} not {in_dim}", s.subject_id, s.in_dim)));
    }
    let mut params = init_aggregator(agg, in_dim, cfg.context, derive_seed(cfg.seed, "stage2/init"))?;
    let mut adam = Adam::new(cfg.adam);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 0..cfg.max_epochs {
        if cfg.max_steps.is_some_and(|m| step_losses.len() >= m) {
            break;
        }
        let lr = learning_rate(cfg.lr0, cfg.lr_decay, epoch);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("stage2/shuffle/{epoch}"))));
        let (mut sum, mut ce_sum, mut steps) = (0.0, 0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step_losses.len() >= m) {
                break;
            }
            params.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            let (mut loss, mut ce) = (0.0, 0.0);
            for &i in batch {
                let s = &train[i];
                let grads = {
                    let mut g = Graph::new();
                    let l = stage2_subject_loss(
                        &mut g,
                        &params,
                        agg,
                        cfg.context,
                        &cfg.mtl_weights,
                        cfg.sequence_reduction,
                        s,
                        cone_len(s.len(), agg),
                        true,
                    )?;
                    let scaled = g.scale(l.total, scale)?;
                    loss += g.scalar(scaled);
                    ce += g.scalar(l.ce) * scale;
                    g.backward(scaled)?
                };
                params.accumulate(&grads)?;
            }
            check_finite("training loss", loss)?;
            adam.step(&mut params, lr)?;
            step_losses.push(loss);
            sum += loss;
            ce_sum += ce;
            steps += 1;
        }
        let val_loss = stage2_loss(&params, agg, cfg.sequence_reduction, val)?;
        save_checkpoint(checkpoint_dir, epoch, &params)?;
        let n = steps.max(1) as f64;
        history.push(EpochRecord {
            epoch,
            lr,
            steps,
            train_loss: sum / n,
            train_ce: ce_sum / n,
            val_loss,
        });
        if best.as_ref().map_or(true, |b| val_loss < b.0) {
            best = Some((val_loss, epoch, params.clone()));
        }
    }
    let (_, selected_epoch, chosen) = best.ok_or_else(|| TrainError::EmptyDataset("no epochs were run".into()))?;
    let bundle = ModelBundle {
        meta: BundleMeta {
            aggregator: agg.clone(),
            context: cfg.context,
            encoder_frozen: true,
            ..stage1.meta.clone()
        },
        encoder: stage1.encoder.clone(),
        head: stage1.head.clone(),
        aggregator: chosen,
    };
    Ok(TrainOutcome {
        history,
        step_losses,
        selected_epoch,
        bundle,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub per_class: Vec<f64>,
    pub macro_f1: f64,
    pub micro_f1: f64,
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        0.0
    } else {
        (2 * tp) as f64 / den as f64
    }
}

/// Per-class, macro and micro F1 of a confusion matrix (rows true, columns
/// predicted). A class with no true or predicted members scores 0.
pub fn compute_f1<const N: usize>(confusion: &[[u64; N]; N]) -> F1Scores {
    let mut per_class = Vec::with_capacity(N);
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    for k in 0..N {
        let tp = confusion[k][k];
        let fp = (0..N).filter(|&i| i != k).map(|i| confusion[i][k]).sum::<u64>();
        let fn_ = (0..N).filter(|&j| j != k).map(|j| confusion[k][j]).sum::<u64>();
        per_class.push(f1(tp, fp, fn_));
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
    }
    let macro_f1 = if N == 0 { 0.0 } else { per_class.iter().sum::<f64>() / N as f64 };
    F1Scores {
        per_class,
        macro_f1,
        micro_f1: f1(tp_all, fp_all, fn_all),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: String,
    /// Rows true stage, columns predicted.
    pub confusion: [[u64; N_STAGES]; N_STAGES],
    pub per_class_f1: Vec<f64>,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub n_epochs: u64,
}

impl EvalReport {
    pub fn from_confusion(config: &str, confusion: [[u64; N_STAGES]; N_STAGES]) -> Self {
        let f = compute_f1(&confusion);
        Self {
            config: config.to_string(),
            confusion,
            per_class_f1: f.per_class,
            macro_f1: f.macro_f1,
            micro_f1: f.micro_f1,
            n_epochs: confusion.iter().flatten().sum(),
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Stage predictions for every epoch of `s`.
pub fn predict(params: &ParamStore, agg: &AggregatorConfig, s: &PreparedSubject) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let l = stage2_subject_loss(
        &mut g,
        params,
        agg,
        ContextConfig::None,
        &MtlWeights::default(),
        SequenceReduction::SumThenBatchMean,
        s,
        cone_len(s.len(), agg),
        false,
    )?;
    let logits = g.value(l.logits);
    Ok((0..s.len()).map(|t| argmax(&logits[t * N_STAGES..(t + 1) * N_STAGES])).collect())
}

/// Confusion matrix and F1 scores over the mask-true epochs of `subjects`.
pub fn evaluate(params: &ParamStore, agg: &AggregatorConfig, config: &str, subjects: &[PreparedSubject]) -> Result<EvalReport> {
    let mut confusion = [[0u64; N_STAGES]; N_STAGES];
    for s in subjects {
        let pred = predict(params, agg, s)?;
        for t in 0..s.len() {
            if s.mask[t] {
                confusion[s.labels[t]][pred[t]] += 1;
            }
        }
    }
    Ok(EvalReport::from_confusion(config, confusion))
}

/// Encodes and evaluates raw subjects with a trained bundle.
pub fn evaluate_bundle(bundle: &ModelBundle, subjects: &[&SubjectEpochs], chunk: usize) -> Result<EvalReport> {
    let m = &bundle.meta;
    let features = encode_subjects(&bundle.encoder, &m.encoder, m.feature_mode, subjects, chunk)?;
    let prepared = prepare_subjects(m.context, &features, m.feature_mode.dim(&m.encoder), subjects)?;
    evaluate(&bundle.aggregator, &m.aggregator, m.context.tag(), &prepared)
}

/// One arm of the context ablation.
#[derive(Clone, Debug)]
pub struct ArmResult {
    pub report: EvalReport,
    pub outcome: TrainOutcome,
}

/// Trains and evaluates one Stage-2 model per context configuration from the
/// same Stage-1 bundle and seed. Arms run on up to `jobs` threads; results do
/// not depend on `jobs`.
pub fn run_ablation(
    train: &[&SubjectEpochs],
    val: &[&SubjectEpochs],
    test: &[&SubjectEpochs],
    stage1: &ModelBundle,
    agg: &AggregatorConfig,
    base: &TrainConfig,
    configs: &[ContextConfig],
    jobs: usize,
) -> Result<Vec<ArmResult>> {
    let m = &stage1.meta;
    let d = m.feature_mode.dim(&m.encoder);
    let encode = |s: &[&SubjectEpochs]| encode_subjects(&stage1.encoder, &m.encoder, m.feature_mode, s, base.encode_chunk);
    let (f_train, f_val, f_test) = (encode(train)?, encode(val)?, encode(test)?);
    let run_arm = |ctx: ContextConfig| -> Result<ArmResult> {
        let cfg = TrainConfig {
            stage: 2,
            context: ctx,
            ..base.clone()
        };
        let tr = prepare_subjects(ctx, &f_train, d, train)?;
        let va = prepare_subjects(ctx, &f_val, d, val)?;
        let te = prepare_subjects(ctx, &f_test, d, test)?;
        let outcome = train_stage2(&tr, &va, stage1, agg, &cfg, None)?;
        let report = evaluate(&outcome.bundle.aggregator, agg, ctx.tag(), &te)?;
        Ok(ArmResult { report, outcome })
    };
    let jobs = jobs.clamp(1, configs.len().max(1));
    if jobs == 1 {
        return configs.iter().map(|&c| run_arm(c)).collect();
    }
    let mut slots: Vec<Option<Result<ArmResult>>> = (0..configs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|w| {
                let run_arm = &run_arm;
                scope.spawn(move || {
                    (w..configs.len())
                        .step_by(jobs)
                        .map(|i| (i, run_arm(configs[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("ablation worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every arm ran")).collect()
}

/// `config,macro_f1,micro_f1` with one row per report.
pub fn ablation_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("config,macro_f1,micro_f1\n");
    for r in reports {
        out.push_str(&format!("{},{:.6},{:.6}\n", r.config, r.macro_f1, r.micro_f1));
    }
    out
}

/// 5×5 counts with stage names heading rows (true) and columns (predicted).
pub fn confusion_csv(report: &EvalReport) -> String {
    let mut out = String::from("true\\pred");
    for name in StageLabel::NAMES {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (name, row) in StageLabel::NAMES.iter().zip(&report.confusion) {
        out.push_str(name);
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Plain-text comparison table followed by each arm's confusion matrix.
pub fn render_ablation(reports: &[EvalReport]) -> String {
    let mut out = format!("{:<10} {:>9} {:>9}\n", "config", "macro-F1", "micro-F1");
    for r in reports {
        out.push_str(&format!("{:<10} {:>9.4} {:>9.4}\n", r.config, r.macro_f1, r.micro_f1));
    }
    for r in reports {
        out.push_str(&format!("\n{} (rows true, columns predicted)\n{:<6}", r.config, ""));
        for name in StageLabel::NAMES {
            out.push_str(&format!("{name:>7}"));
        }
        out.push('\n');
        for (name, row) in StageLabel::NAMES.iter().zip(&r.confusion) {
            out.push_str(&format!("{name:<6}"));
            for v in row {
                out.push_str(&format!("{v:>7}"));
            }
            out.push('\n');
        }
    }
    out
}
