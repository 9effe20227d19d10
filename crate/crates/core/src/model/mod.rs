//! Epoch encoder (Stage 1), context fusion and whole-night aggregator (Stage 2).

mod aggregator;
mod encoder;

pub use aggregator::{
    aggregator_forward, cone_len, init_aggregator, mtl_forward, AggregatorOutput, MtlOutput,
};
pub use encoder::{
    encode_epochs, encoder_forward, head_forward, init_encoder, init_head, positional_encoding, EncoderOutput,
};

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::SubjectEpochs;
use crate::ingest::N_EVENT_KINDS;
use crate::tensor::{xavier_uniform_init, Graph, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("bundle: {0}")]
    Bundle(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

impl ModelError {
    /// Collapses into a tensor error, for closures that must return one.
    pub fn into_tensor(self) -> TensorError {
        match self {
            ModelError::Tensor(t) => t,
            other => TensorError::InvalidArgument(other.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub patch_len: usize,
    pub n_channels: usize,
    pub samples_per_epoch: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            n_heads: 8,
            d_model: 128,
            d_ff: 512,
            patch_len: 25,
            n_channels: 9,
            samples_per_epoch: 750,
            mlp_hidden: 256,
            dropout: 0.0,
            ln_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn n_patches(&self) -> usize {
        self.samples_per_epoch / self.patch_len
    }

    pub fn patch_dim(&self) -> usize {
        self.n_channels * self.patch_len
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model < 2 || self.d_ff == 0 || self.mlp_hidden == 0 {
            return bad("encoder sizes must be positive (d_model >= 2)".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.patch_len == 0 || self.samples_per_epoch % self.patch_len != 0 {
            return bad(format!(
                "patch_len {} does not divide samples_per_epoch {}",
                self.patch_len, self.samples_per_epoch
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregatorConfig {
    pub n_layers: usize,
    pub d_hidden: usize,
    pub kernel: usize,
    pub out_dim: usize,
    /// Padded sequence length.
    pub max_len: usize,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            n_layers: 12,
            d_hidden: 512,
            kernel: 7,
            out_dim: 5,
            max_len: crate::dataset::MAX_SEQ_LEN,
        }
    }
}

impl AggregatorConfig {
    /// `1 + n_layers · (kernel − 1)` epochs.
    pub fn receptive_field(&self) -> usize {
        1 + self.n_layers * (self.kernel - 1)
    }

    /// Epochs on either side that can influence one output.
    pub fn radius(&self) -> usize {
        self.n_layers * (self.kernel / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 || self.d_hidden == 0 || self.kernel % 2 == 0 || self.out_dim != 5 || self.max_len == 0 {
            return Err(ModelError::Config(format!(
                "aggregator needs >= 2 layers, odd kernel and 5 outputs: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Which context reaches the aggregator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ContextConfig {
    None,
    Clinical,
    Event,
    Both,
    #[serde(rename = "MTL")]
    Mtl,
}

impl ContextConfig {
    pub const ALL: [ContextConfig; 5] = [
        ContextConfig::None,
        ContextConfig::Clinical,
        ContextConfig::Event,
        ContextConfig::Both,
        ContextConfig::Mtl,
    ];

    pub fn dims(self) -> usize {
        match self {
            ContextConfig::None | ContextConfig::Mtl => 0,
            ContextConfig::Clinical => 3,
            ContextConfig::Event => N_EVENT_KINDS,
            ContextConfig::Both => 3 + N_EVENT_KINDS,
        }
    }

    pub fn uses_clinical(self) -> bool {
        matches!(self, ContextConfig::Clinical | ContextConfig::Both)
    }

    pub fn uses_events(self) -> bool {
        matches!(self, ContextConfig::Event | ContextConfig::Both)
    }

    pub fn tag(self) -> &'static str {
        match self {
            ContextConfig::None => "None",
            ContextConfig::Clinical => "Clinical",
            ContextConfig::Event => "Event",
            ContextConfig::Both => "Both",
            ContextConfig::Mtl => "MTL",
        }
    }
}

/// Per-epoch feature handed from the encoder to the aggregator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// Mean over tokens, `d_model` values.
    #[default]
    Pooled,
    /// All tokens, `P · d_model` values.
    Flattened,
}

impl FeatureMode {
    pub fn dim(self, enc: &EncoderConfig) -> usize {
        match self {
            FeatureMode::Pooled => enc.d_model,
            FeatureMode::Flattened => enc.d_model * enc.n_patches(),
        }
    }
}

/// Appends context columns to `[T, d]` epoch features, in the order
/// `[embedding | clinical | events]`.
pub fn fuse_context(
    features: &[f64],
    d: usize,
    clinical: Option<&[f32; 3]>,
    events: Option<&[[u8; N_EVENT_KINDS]]>,
) -> Result<Vec<f64>> {
    if d == 0 || features.len() % d != 0 {
        return Err(ModelError::Shape(format!("{} feature values with width {d}", features.len())));
    }
    let t = features.len() / d;
    if let Some(ev) = events {
        if ev.len() != t {
            return Err(ModelError::Shape(format!("{t} epochs but {} event rows", ev.len())));
        }
    }
    let width = d + clinical.map_or(0, |_| 3) + events.map_or(0, |_| N_EVENT_KINDS);
    let mut out = Vec::with_capacity(t * width);
    for i in 0..t {
        out.extend_from_slice(&features[i * d..(i + 1) * d]);
        if let Some(c) = clinical {
            out.extend(c.iter().map(|&v| v as f64));
        }
        if let Some(ev) = events {
            out.extend(ev[i].iter().map(|&v| v as f64));
        }
    }
    Ok(out)
}

/// Context-fused features for `subject` under `ctx`.
pub fn fuse_for(ctx: ContextConfig, features: &[f64], d: usize, subject: &SubjectEpochs) -> Result<Vec<f64>> {
    fuse_context(
        features,
        d,
        ctx.uses_clinical().then_some(&subject.clinical),
        ctx.uses_events().then_some(subject.events.as_slice()),
    )
}

/// Fetches a parameter as a trainable or frozen leaf.
pub(crate) fn leaf<'p>(g: &mut Graph<'p>, params: &'p ParamStore, name: &str, trainable: bool) -> Result<Var> {
    let t = params.require(name)?;
    Ok(if trainable { g.param(name, t) } else { g.frozen(t) })
}

/// `x[..., in] · w[in, out] + b[out]`.
pub(crate) fn linear<'p>(g: &mut Graph<'p>, params: &'p ParamStore, prefix: &str, x: Var, trainable: bool) -> Result<Var> {
    let w = leaf(g, params, &format!("{prefix}.w"), trainable)?;
    let b = leaf(g, params, &format!("{prefix}.b"), trainable)?;
    let y = g.matmul(x, w)?;
    Ok(g.add(y, b)?)
}

pub(crate) fn insert_linear(p: &mut ParamStore, prefix: &str, n_in: usize, n_out: usize, seed: u64) -> Result<()> {
    let name = format!("{prefix}.w");
    let w = xavier_uniform_init(&[n_in, n_out], crate::seed::derive_seed(seed, &name))?;
    p.insert(name, w);
    p.insert(format!("{prefix}.b"), Tensor::zeros(&[n_out]));
    Ok(())
}

/// Trained weights plus the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub meta: BundleMeta,
    pub encoder: ParamStore,
    pub head: ParamStore,
    /// Aggregator weights, plus `mtl.*` heads in the MTL arm.
    pub aggregator: ParamStore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleMeta {
    pub encoder: EncoderConfig,
    pub aggregator: AggregatorConfig,
    pub context: ContextConfig,
    pub feature_mode: FeatureMode,
    pub encoder_frozen: bool,
}

impl ModelBundle {
    /// Writes `bundle.json`, `encoder.somn`, `head.somn` and `aggregator.somn`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(&self.meta).map_err(|e| ModelError::Bundle(e.to_string()))?;
        std::fs::write(dir.join("bundle.json"), json)?;
        self.encoder.save(&dir.join("encoder.somn"))?;
        self.head.save(&dir.join("head.somn"))?;
        self.aggregator.save(&dir.join("aggregator.somn"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: BundleMeta = serde_json::from_slice(&std::fs::read(dir.join("bundle.json"))?)
            .map_err(|e| ModelError::Bundle(e.to_string()))?;
        Ok(Self {
            meta,
            encoder: ParamStore::load(&dir.join("encoder.somn"))?,
            head: ParamStore::load(&dir.join("head.somn"))?,
            aggregator: ParamStore::load(&dir.join("aggregator.somn"))?,
        })
    }
}
