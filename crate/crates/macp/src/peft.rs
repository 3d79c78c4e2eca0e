//! Parameter-efficient adaptation modules and variant construction: channel
//! bottleneck adapters for sparse/dense maps, per-channel scale-shift,
//! dense per-cell bottleneck adapters for the ablation, plus the freeze
//! partitioning and parameter accounting behind each named variant.

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::ParamStore;
use crate::geom::{DenseGrid, SparseTensor};
use crate::nnops::{gelu_dense, gelu_sparse, pointwise_conv_dense, pointwise_conv_sparse, ConvKernel, NnError};
use crate::perception::{Model, ModelConfig};

#[derive(Debug, Error)]
pub enum PeftError {
    #[error("bottleneck must be strictly smaller than the channel count ({bottleneck} >= {channels})")]
    BottleneckTooWide { bottleneck: usize, channels: usize },
    #[error("adapter kernels must be pointwise (k = 1)")]
    NotPointwise,
    #[error("down/up kernels disagree: down {0}->{1}, up {2}->{3}")]
    KernelChain(usize, usize, usize, usize),
    #[error("unknown variant '{0}' (expected full|head|adapter|ssf|conada|macp)")]
    UnknownVariant(String),
    #[error("compression factor {factor} must divide the encoder width {width}")]
    BadFactor { factor: u32, width: usize },
    #[error("checkpoint/architecture shape mismatch for: {}", .0.join(", "))]
    ShapeMismatch(Vec<String>),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Bottleneck adapter: pointwise down-projection, GELU, pointwise
/// up-projection. The down/up pair doubles as the communication channel's
/// compressor/decompressor.
#[derive(Debug, Clone)]
pub struct ConAda {
    pub down: ConvKernel,
    pub up: ConvKernel,
}

impl ConAda {
    pub fn new(down: ConvKernel, up: ConvKernel) -> Result<Self, PeftError> {
        if down.k != 1 || up.k != 1 {
            return Err(PeftError::NotPointwise);
        }
        if down.c_out != up.c_in || down.c_in != up.c_out {
            return Err(PeftError::KernelChain(down.c_in, down.c_out, up.c_in, up.c_out));
        }
        if down.c_out >= down.c_in {
            return Err(PeftError::BottleneckTooWide { bottleneck: down.c_out, channels: down.c_in });
        }
        Ok(Self { down, up })
    }

    pub fn channels(&self) -> usize {
        self.down.c_in
    }

    pub fn latent_channels(&self) -> usize {
        self.down.c_out
    }

    /// Materializes the adapter stored under `prefix` in a parameter store.
    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self, PeftError> {
        let t = |name: &str| {
            let id = store.id(&format!("{prefix}.{name}")).unwrap_or_else(|| panic!("missing {prefix}.{name}"));
            store.value(id).clone()
        };
        let dw = t("down_w");
        let db = t("down_b");
        let uw = t("up_w");
        let ub = t("up_b");
        let down = ConvKernel::new(1, dw.shape()[0], dw.shape()[1], dw.data().to_vec(), db.data().to_vec())?;
        let up = ConvKernel::new(1, uw.shape()[0], uw.shape()[1], uw.data().to_vec(), ub.data().to_vec())?;
        Self::new(down, up)
    }
}

/// Full adapter map on a dense grid: up(gelu(down(x))).
pub fn conada_forward_dense(x: &DenseGrid, m: &ConAda) -> Result<DenseGrid, NnError> {
    pointwise_conv_dense(&gelu_dense(&pointwise_conv_dense(x, &m.down)?), &m.up)
}

/// Full adapter map on a sparse tensor; the coordinate set is preserved.
pub fn conada_forward_sparse(x: &SparseTensor, m: &ConAda) -> Result<SparseTensor, NnError> {
    pointwise_conv_sparse(&gelu_sparse(&pointwise_conv_sparse(x, &m.down)?), &m.up)
}

/// Sender half: gelu(down(x)) — the compressed latent for broadcasting.
pub fn conada_compress(x: &DenseGrid, m: &ConAda) -> Result<DenseGrid, NnError> {
    Ok(gelu_dense(&pointwise_conv_dense(x, &m.down)?))
}

/// Receiver half: up(latent). By construction
/// `conada_decompress(conada_compress(x)) == conada_forward(x)` bitwise.
pub fn conada_decompress(latent: &DenseGrid, m: &ConAda) -> Result<DenseGrid, NnError> {
    pointwise_conv_dense(latent, &m.up)
}

/// Channel ratio of the down convolution (the compression factor).
pub fn compression_factor(m: &ConAda) -> f64 {
    m.down.c_in as f64 / m.down.c_out as f64
}

/// Per-channel learnable scale and shift.
#[derive(Debug, Clone)]
pub struct SSFModule {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl SSFModule {
    pub fn identity(c: usize) -> Self {
        Self { gamma: vec![1.0; c], beta: vec![0.0; c] }
    }

    pub fn apply(&self, grid: &DenseGrid) -> Result<DenseGrid, NnError> {
        crate::nnops::scale_shift(grid, &self.gamma, &self.beta)
    }
}

/// Dense per-cell bottleneck adapter (the classic two-projection adapter);
/// structurally a [`ConAda`] restricted to dense application.
#[derive(Debug, Clone)]
pub struct HoulsbyAdapter(pub ConAda);

impl HoulsbyAdapter {
    pub fn apply(&self, grid: &DenseGrid) -> Result<DenseGrid, NnError> {
        conada_forward_dense(grid, &self.0)
    }
}

/// The six fine-tuning variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    FullFinetune,
    HeadOnly,
    AdapterOnly,
    SsfOnly,
    ConAdaOnly,
    Macp,
}

impl VariantKind {
    pub const ALL: [VariantKind; 6] = [
        VariantKind::FullFinetune,
        VariantKind::HeadOnly,
        VariantKind::AdapterOnly,
        VariantKind::SsfOnly,
        VariantKind::ConAdaOnly,
        VariantKind::Macp,
    ];

    /// The CLI name contract.
    pub fn as_str(&self) -> &'static str {
        match self {
            VariantKind::FullFinetune => "full",
            VariantKind::HeadOnly => "head",
            VariantKind::AdapterOnly => "adapter",
            VariantKind::SsfOnly => "ssf",
            VariantKind::ConAdaOnly => "conada",
            VariantKind::Macp => "macp",
        }
    }
}

impl FromStr for VariantKind {
    type Err = PeftError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(VariantKind::FullFinetune),
            "head" => Ok(VariantKind::HeadOnly),
            "adapter" => Ok(VariantKind::AdapterOnly),
            "ssf" => Ok(VariantKind::SsfOnly),
            "conada" => Ok(VariantKind::ConAdaOnly),
            "macp" => Ok(VariantKind::Macp),
            other => Err(PeftError::UnknownVariant(other.to_string())),
        }
    }
}

/// Variant plus its adapter hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VariantConfig {
    pub kind: VariantKind,
    /// Encoder-adapter bottleneck width.
    pub bottleneck: usize,
    /// Channel compression factor (input/latent channel ratio).
    pub compression_factor: u32,
}

impl VariantConfig {
    pub fn new(kind: VariantKind, bottleneck: usize, compression_factor: u32) -> Self {
        Self { kind, bottleneck, compression_factor }
    }
}

fn arch_for(kind: VariantKind, base_cfg: &ModelConfig, v: &VariantConfig) -> ModelConfig {
    let mut cfg = base_cfg.clone();
    cfg.adapter_bottleneck = v.bottleneck;
    cfg.channel_adapter = true;
    cfg.compression_factor = v.compression_factor;
    cfg.encoder.adapters = false;
    cfg.ssf = false;
    cfg.houlsby = false;
    match kind {
        // The full fine-tune shares the adapter-bearing architecture so the
        // trainable sets nest: head_only < macp < full_finetune.
        VariantKind::FullFinetune | VariantKind::Macp => {
            cfg.encoder.adapters = true;
            cfg.ssf = true;
        }
        VariantKind::HeadOnly => {}
        VariantKind::AdapterOnly => cfg.houlsby = true,
        VariantKind::SsfOnly => cfg.ssf = true,
        VariantKind::ConAdaOnly => cfg.encoder.adapters = true,
    }
    cfg
}

/// Frozen-name rule shared by every PEFT variant: the pre-trained encoder
/// and prediction convolutions freeze, everything else (adapters, channel,
/// fusion, heads) trains.
fn is_pretrained_backbone(name: &str) -> bool {
    (name.starts_with("encoder.") && !name.contains(".conada.")) || name.starts_with("prednet.conv")
}

/// Constructs a variant around a pre-trained checkpoint: copies every
/// parameter the checkpoint shares with the variant architecture, leaves
/// freshly initialized adapters in place, and applies the variant's freeze
/// partition. Shape disagreements are collected and reported together.
pub fn build_variant(
    v: &VariantConfig,
    base: &ParamStore,
    base_cfg: &ModelConfig,
    seed: u64,
) -> Result<Model, PeftError> {
    let width = base_cfg.encoder_width();
    if v.compression_factor == 0 || width % v.compression_factor as usize != 0 {
        return Err(PeftError::BadFactor { factor: v.compression_factor, width });
    }
    let cfg = arch_for(v.kind, base_cfg, v);
    let mut model = Model::new(cfg, seed);

    let mut mismatched = Vec::new();
    for (_, p) in base.iter() {
        if let Some(id) = model.store.id(&p.name) {
            if model.store.value(id).shape() != p.value.shape() {
                mismatched.push(p.name.clone());
            } else {
                model.store.get_mut(id).value = p.value.clone();
            }
        }
    }
    if !mismatched.is_empty() {
        return Err(PeftError::ShapeMismatch(mismatched));
    }

    match v.kind {
        VariantKind::FullFinetune => {
            model.store.freeze_where(|_| false);
        }
        _ => {
            model.store.freeze_where(is_pretrained_backbone);
        }
    }
    Ok(model)
}

/// Exact element counts over all parameters, split by the frozen flag.
pub fn count_params(model: &Model) -> (usize, usize) {
    model.store.count_elements()
}

/// Names of the trainable parameters (used by the nesting invariant tests).
pub fn trainable_names(model: &Model) -> Vec<String> {
    model.store.iter().filter(|(_, p)| !p.frozen).map(|(_, p)| p.name.clone()).collect()
}
