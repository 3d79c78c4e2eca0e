//! The single-agent detection model and its cooperative extensions: a
//! sparse pillar feature encoder (optionally with bottleneck adapter blocks),
//! a dense prediction net (optionally with per-channel scale-shift), a
//! center-based target encoder, the detection loss, and box decoding.
//!
//! All vehicles share one [`Model`]; forward passes are recorded on an
//! autodiff [`Tape`] so the same code path serves training and inference.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdError, ParamId, ParamStore, Tape, TapeOp, Tensor, Value};
use crate::geom::{voxelize, DenseGrid, PointCloud, VoxelConfig};
use crate::nnops::{
    subm_neighbors, AddOp, Conv2dOp, GeluOp, LinearOp, ScaleShiftOp, ScatterOp, SigmoidOp, SubmConvOp,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Focal-loss focusing exponent on positives.
pub const FOCAL_ALPHA: f64 = 2.0;
/// Penalty-reduction exponent on the soft negatives around each peak.
pub const FOCAL_BETA: f64 = 4.0;
/// Default decoding score threshold.
pub const SCORE_THRESH: f64 = 0.3;
/// Default decoding detection cap.
pub const MAX_DETECTIONS: usize = 64;

/// Heatmap head bias init: sigmoid(-2.19) ~ 0.1 keeps the focal loss stable
/// on the first steps.
const HEATMAP_BIAS_INIT: f64 = -2.19;

/// Scored, oriented BEV box in the ego frame. Serialized as one JSON line
/// `{x, y, l, w, yaw, score}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    #[serde(rename = "l")]
    pub length: f64,
    #[serde(rename = "w")]
    pub width: f64,
    pub yaw: f64,
    pub score: f64,
}

/// Unscored oriented box (ground truth / world object).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxGt {
    pub x: f64,
    pub y: f64,
    #[serde(rename = "l")]
    pub length: f64,
    #[serde(rename = "w")]
    pub width: f64,
    pub yaw: f64,
}

/// Encoder shape: one subm-conv block per width entry, plus the pointwise
/// embedding in front.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub widths: Vec<usize>,
    pub adapters: bool,
}

/// Full architecture description. `channel_adapter` owns the V2V
/// compression-decompression channel; `compression_factor` divides the
/// encoder width to give the latent channel count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid: VoxelConfig,
    pub input_channels: usize,
    pub encoder: EncoderConfig,
    pub adapter_bottleneck: usize,
    pub ssf: bool,
    pub houlsby: bool,
    pub channel_adapter: bool,
    pub compression_factor: u32,
}

impl ModelConfig {
    /// Desk-scale single-agent architecture: no adapter modules anywhere.
    pub fn single_agent_desk() -> Self {
        Self {
            grid: VoxelConfig::desk(),
            input_channels: 2,
            encoder: EncoderConfig { widths: vec![32, 32, 32], adapters: false },
            adapter_bottleneck: 8,
            ssf: false,
            houlsby: false,
            channel_adapter: false,
            compression_factor: 1,
        }
    }

    /// A tiny architecture for gradient checks and fast tests.
    pub fn tiny(h: usize, w: usize, width: usize, blocks: usize) -> Self {
        Self {
            grid: VoxelConfig { origin: (-4.0, -4.0), cell: (8.0 / h as f64, 8.0 / w as f64), extent: (h, w), channels: 2 },
            input_channels: 2,
            encoder: EncoderConfig { widths: vec![width; blocks], adapters: false },
            adapter_bottleneck: (width / 4).max(1),
            ssf: false,
            houlsby: false,
            channel_adapter: false,
            compression_factor: 1,
        }
    }

    pub fn encoder_width(&self) -> usize {
        *self.encoder.widths.last().expect("at least one encoder block")
    }

    pub fn latent_channels(&self) -> usize {
        (self.encoder_width() / self.compression_factor as usize).max(1)
    }
}

/// The model: a parameter store plus the architecture map over it.
#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    pub cfg: ModelConfig,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())
}

impl Model {
    /// Builds a freshly initialized model. Pre-trained-style weights get
    /// uniform +-1/sqrt(fan_in) init; adapter up-projections start at zero
    /// so every adapter block is an exact identity at step 0; scale-shift
    /// starts at (gamma = 1, beta = 0) for the same reason.
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let add = |store: &mut ParamStore, name: String, t: Tensor| {
            store.add(name, t, false).expect("unique param names");
        };

        let c_in = cfg.input_channels;
        let mut prev = c_in;
        let w0 = cfg.encoder.widths[0];
        add(&mut store, "encoder.embed.w".into(), uniform(&mut rng, vec![prev, w0], 1.0 / (prev as f64).sqrt()));
        add(&mut store, "encoder.embed.b".into(), Tensor::zeros(&[w0]));
        prev = w0;
        for (i, &width) in cfg.encoder.widths.iter().enumerate() {
            let bound = 1.0 / ((9 * prev) as f64).sqrt();
            add(&mut store, format!("encoder.block{i}.conv.w"), uniform(&mut rng, vec![3, 3, prev, width], bound));
            add(&mut store, format!("encoder.block{i}.conv.b"), Tensor::zeros(&[width]));
            if cfg.encoder.adapters {
                let d = bottleneck(width, cfg.adapter_bottleneck);
                add(&mut store, format!("encoder.block{i}.conada.down_w"), uniform(&mut rng, vec![width, d], 1.0 / (width as f64).sqrt()));
                add(&mut store, format!("encoder.block{i}.conada.down_b"), Tensor::zeros(&[d]));
                add(&mut store, format!("encoder.block{i}.conada.up_w"), Tensor::zeros(&[d, width]));
                add(&mut store, format!("encoder.block{i}.conada.up_b"), Tensor::zeros(&[width]));
            }
            prev = width;
        }
        let c = prev;

        if cfg.channel_adapter {
            // Unlike the residual adapters, the channel has no bypass: a
            // zero up-projection would just silence every partner at the
            // start of fine-tuning, so both halves get live inits. Ego-only
            // behavior is untouched (the channel only sees received maps).
            let latent = cfg.latent_channels();
            add(&mut store, "channel.down_w".into(), uniform(&mut rng, vec![c, latent], 1.0 / (c as f64).sqrt()));
            add(&mut store, "channel.down_b".into(), Tensor::zeros(&[latent]));
            add(&mut store, "channel.up_w".into(), uniform(&mut rng, vec![latent, c], 1.0 / (latent as f64).sqrt()));
            add(&mut store, "channel.up_b".into(), Tensor::zeros(&[c]));
        }

        let bound3 = 1.0 / ((9 * c) as f64).sqrt();
        // No bias on the post-fusion conv: the channel normalization right
        // behind it removes per-channel constants, so a bias would be a
        // dead parameter with an identically zero gradient.
        add(&mut store, "fusion.post.w".into(), uniform(&mut rng, vec![3, 3, c, c], bound3));
        add(&mut store, "fusion.norm.gamma".into(), Tensor::new(vec![c], vec![1.0; c]));
        add(&mut store, "fusion.norm.beta".into(), Tensor::zeros(&[c]));
        add(&mut store, "fusion.reduce.w".into(), uniform(&mut rng, vec![2 * c, c], 1.0 / ((2 * c) as f64).sqrt()));
        add(&mut store, "fusion.reduce.b".into(), Tensor::zeros(&[c]));

        for i in 0..2 {
            add(&mut store, format!("prednet.conv{i}.w"), uniform(&mut rng, vec![3, 3, c, c], bound3));
            add(&mut store, format!("prednet.conv{i}.b"), Tensor::zeros(&[c]));
            if cfg.houlsby {
                let d = bottleneck(c, cfg.adapter_bottleneck);
                add(&mut store, format!("prednet.adapter{i}.down_w"), uniform(&mut rng, vec![c, d], 1.0 / (c as f64).sqrt()));
                add(&mut store, format!("prednet.adapter{i}.down_b"), Tensor::zeros(&[d]));
                add(&mut store, format!("prednet.adapter{i}.up_w"), Tensor::zeros(&[d, c]));
                add(&mut store, format!("prednet.adapter{i}.up_b"), Tensor::zeros(&[c]));
            }
            if cfg.ssf {
                add(&mut store, format!("prednet.ssf{i}.gamma"), Tensor::new(vec![c], vec![1.0; c]));
                add(&mut store, format!("prednet.ssf{i}.beta"), Tensor::zeros(&[c]));
            }
        }

        let hb = 1.0 / (c as f64).sqrt();
        add(&mut store, "head.heatmap.w".into(), uniform(&mut rng, vec![c, 1], hb));
        add(&mut store, "head.heatmap.b".into(), Tensor::new(vec![1], vec![HEATMAP_BIAS_INIT]));
        add(&mut store, "head.offset.w".into(), uniform(&mut rng, vec![c, 2], hb));
        add(&mut store, "head.offset.b".into(), Tensor::zeros(&[2]));
        add(&mut store, "head.size.w".into(), uniform(&mut rng, vec![c, 2], hb));
        add(&mut store, "head.size.b".into(), Tensor::new(vec![2], vec![4.5_f64.ln(), 1.9_f64.ln()]));
        add(&mut store, "head.yaw.w".into(), uniform(&mut rng, vec![c, 2], hb));
        add(&mut store, "head.yaw.b".into(), Tensor::zeros(&[2]));

        Self { store, cfg }
    }

    /// Rebuilds a model around a loaded checkpoint, inferring the adapter
    /// flags and channel factor from the parameter names and shapes.
    pub fn from_store(store: ParamStore, grid: VoxelConfig) -> Result<Self, AdError> {
        let shape_of = |name: &str| -> Result<Vec<usize>, AdError> {
            store
                .id(name)
                .map(|id| store.value(id).shape().to_vec())
                .ok_or_else(|| AdError::UnknownParam(name.to_string()))
        };
        let embed = shape_of("encoder.embed.w")?;
        let input_channels = embed[0];
        let mut widths = Vec::new();
        let mut i = 0;
        while let Some(id) = store.id(&format!("encoder.block{i}.conv.w")) {
            widths.push(store.value(id).shape()[3]);
            i += 1;
        }
        if widths.is_empty() {
            return Err(AdError::Corrupt("checkpoint holds no encoder blocks".into()));
        }
        let c = *widths.last().unwrap();
        let adapters = store.id("encoder.block0.conada.down_w").is_some();
        let houlsby = store.id("prednet.adapter0.down_w").is_some();
        let ssf = store.id("prednet.ssf0.gamma").is_some();
        let channel_adapter = store.id("channel.down_w").is_some();
        let compression_factor = if channel_adapter {
            let latent = shape_of("channel.down_w")?[1];
            (c / latent.max(1)) as u32
        } else {
            1
        };
        let adapter_bottleneck = if adapters {
            shape_of("encoder.block0.conada.down_w")?[1]
        } else if houlsby {
            shape_of("prednet.adapter0.down_w")?[1]
        } else {
            (c / 4).max(1)
        };
        let cfg = ModelConfig {
            grid,
            input_channels,
            encoder: EncoderConfig { widths, adapters },
            adapter_bottleneck,
            ssf,
            houlsby,
            channel_adapter,
            compression_factor,
        };
        Ok(Self { store, cfg })
    }

    pub fn pid(&self, name: &str) -> ParamId {
        self.store.id(name).unwrap_or_else(|| panic!("model is missing parameter '{name}'"))
    }

    fn p(&self, tape: &mut Tape, name: &str) -> Value {
        tape.param(&self.store, self.pid(name))
    }

    /// Sparse encoder: voxelize, pointwise embed, then subm-conv blocks
    /// (each optionally wrapped by a residual adapter branch), scattered to
    /// a dense grid at the end. Empty clouds produce an all-zero grid.
    pub fn encode_features_t(&self, tape: &mut Tape, cloud: &PointCloud) -> Result<Value, AdError> {
        let st = voxelize(cloud, &self.cfg.grid);
        let n = st.len();
        let feats = Tensor::new(vec![n, self.cfg.input_channels], st.feats().to_vec());
        let mut x = tape.constant(feats);

        let ew = self.p(tape, "encoder.embed.w");
        let eb = self.p(tape, "encoder.embed.b");
        x = tape.apply(Box::new(LinearOp), &[x, ew, eb])?;

        for i in 0..self.cfg.encoder.widths.len() {
            let neighbors = subm_neighbors(&st, 3);
            let w = self.p(tape, &format!("encoder.block{i}.conv.w"));
            let b = self.p(tape, &format!("encoder.block{i}.conv.b"));
            let conv = tape.apply(Box::new(SubmConvOp { neighbors, k: 3 }), &[x, w, b])?;
            let pre_act = if self.cfg.encoder.adapters {
                let branch = self.adapter_branch_t(tape, conv, &format!("encoder.block{i}.conada"))?;
                tape.apply(Box::new(AddOp), &[conv, branch])?
            } else {
                conv
            };
            x = tape.apply(Box::new(GeluOp), &[pre_act])?;
        }

        let (h, w) = self.cfg.grid.extent;
        let cells = st.coords().iter().map(|&(r, c)| (r as usize) * w + c as usize).collect();
        tape.apply(Box::new(ScatterOp { cells, h, w }), &[x])
    }

    /// Bottleneck residual branch: up(gelu(down(x))), with the up projection
    /// zero-initialized so the branch vanishes at step 0.
    fn adapter_branch_t(&self, tape: &mut Tape, x: Value, prefix: &str) -> Result<Value, AdError> {
        let dw = self.p(tape, &format!("{prefix}.down_w"));
        let db = self.p(tape, &format!("{prefix}.down_b"));
        let uw = self.p(tape, &format!("{prefix}.up_w"));
        let ub = self.p(tape, &format!("{prefix}.up_b"));
        let h = tape.apply(Box::new(LinearOp), &[x, dw, db])?;
        let h = tape.apply(Box::new(GeluOp), &[h])?;
        tape.apply(Box::new(LinearOp), &[h, uw, ub])
    }

    /// Sender half of the communication channel: gelu(down(x)).
    pub fn channel_compress_t(&self, tape: &mut Tape, x: Value) -> Result<Value, AdError> {
        let dw = self.p(tape, "channel.down_w");
        let db = self.p(tape, "channel.down_b");
        let h = tape.apply(Box::new(LinearOp), &[x, dw, db])?;
        tape.apply(Box::new(GeluOp), &[h])
    }

    /// Receiver half of the communication channel: up(latent).
    pub fn channel_decompress_t(&self, tape: &mut Tape, latent: Value) -> Result<Value, AdError> {
        let uw = self.p(tape, "channel.up_w");
        let ub = self.p(tape, "channel.up_b");
        tape.apply(Box::new(LinearOp), &[latent, uw, ub])
    }

    /// Spatial-misalignment correction after fusion: 3x3 conv, channel
    /// normalization, GELU.
    pub fn post_fusion_t(&self, tape: &mut Tape, fused: Value) -> Result<Value, AdError> {
        let w = self.p(tape, "fusion.post.w");
        let c = self.cfg.encoder_width();
        let b = tape.constant(Tensor::zeros(&[c]));
        let x = tape.apply(Box::new(Conv2dOp), &[fused, w, b])?;
        let g = self.p(tape, "fusion.norm.gamma");
        let bt = self.p(tape, "fusion.norm.beta");
        let x = tape.apply(Box::new(crate::nnops::ChannelNormOp), &[x, g, bt])?;
        tape.apply(Box::new(GeluOp), &[x])
    }

    /// Prediction net: two 3x3 conv blocks (conv, optional adapter or
    /// scale-shift, GELU) followed by the four 1x1 heads. The heatmap is
    /// passed through a sigmoid.
    pub fn predict_heads_t(&self, tape: &mut Tape, fused: Value) -> Result<HeadValues, AdError> {
        let mut x = fused;
        for i in 0..2 {
            let w = self.p(tape, &format!("prednet.conv{i}.w"));
            let b = self.p(tape, &format!("prednet.conv{i}.b"));
            x = tape.apply(Box::new(Conv2dOp), &[x, w, b])?;
            if self.cfg.houlsby {
                let branch = self.adapter_branch_t(tape, x, &format!("prednet.adapter{i}"))?;
                x = tape.apply(Box::new(AddOp), &[x, branch])?;
            }
            if self.cfg.ssf {
                let g = self.p(tape, &format!("prednet.ssf{i}.gamma"));
                let bt = self.p(tape, &format!("prednet.ssf{i}.beta"));
                x = tape.apply(Box::new(ScaleShiftOp), &[x, g, bt])?;
            }
            x = tape.apply(Box::new(GeluOp), &[x])?;
        }
        let head = |tape: &mut Tape, name: &str| -> Result<Value, AdError> {
            let w = self.p(tape, &format!("head.{name}.w"));
            let b = self.p(tape, &format!("head.{name}.b"));
            tape.apply(Box::new(LinearOp), &[x, w, b])
        };
        let logits = head(tape, "heatmap")?;
        let heatmap = tape.apply(Box::new(SigmoidOp), &[logits])?;
        Ok(HeadValues { heatmap, offset: head(tape, "offset")?, size: head(tape, "size")?, yaw: head(tape, "yaw")? })
    }
}

fn bottleneck(width: usize, requested: usize) -> usize {
    requested.min(width.saturating_sub(1)).max(1)
}

/// Tape handles of the four head maps.
#[derive(Debug, Clone, Copy)]
pub struct HeadValues {
    pub heatmap: Value,
    pub offset: Value,
    pub size: Value,
    pub yaw: Value,
}

/// Materialized head maps.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub heatmap: DenseGrid,
    pub offset: DenseGrid,
    pub size: DenseGrid,
    pub yaw: DenseGrid,
}

pub fn tensor_to_grid(t: &Tensor) -> DenseGrid {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected an HxWxC tensor");
    DenseGrid::from_data(s[0], s[1], s[2], t.data().to_vec())
}

pub fn grid_to_tensor(g: &DenseGrid) -> Tensor {
    Tensor::new(vec![g.h, g.w, g.c], g.data.clone())
}

impl HeadValues {
    pub fn materialize(&self, tape: &Tape) -> HeadOutput {
        HeadOutput {
            heatmap: tensor_to_grid(tape.tensor(self.heatmap)),
            offset: tensor_to_grid(tape.tensor(self.offset)),
            size: tensor_to_grid(tape.tensor(self.size)),
            yaw: tensor_to_grid(tape.tensor(self.yaw)),
        }
    }
}

/// Non-tape convenience wrapper over the sparse encoder.
pub fn encode_features(cloud: &PointCloud, model: &Model) -> Result<DenseGrid, AdError> {
    let mut tape = Tape::new();
    let v = model.encode_features_t(&mut tape, cloud)?;
    Ok(tensor_to_grid(tape.tensor(v)))
}

/// Non-tape convenience wrapper over the prediction net.
pub fn predict_heads(fused: &DenseGrid, model: &Model) -> Result<HeadOutput, AdError> {
    let mut tape = Tape::new();
    let f = tape.constant(grid_to_tensor(fused));
    let heads = model.predict_heads_t(&mut tape, f)?;
    Ok(heads.materialize(&tape))
}

// ---------------------------------------------------------------------------
// Targets, loss, decoding.
// ---------------------------------------------------------------------------

/// Ground-truth maps for one frame plus the positive-cell list.
#[derive(Debug, Clone)]
pub struct TargetMaps {
    pub maps: HeadOutput,
    /// Flat cell indices holding exact peaks (regression supervision).
    pub positives: Vec<usize>,
    /// Ground-truth boxes whose center fell outside the grid.
    pub skipped: usize,
}

/// Splats center-Gaussian heatmap targets (elementwise max across objects;
/// peak exactly 1.0 at each center cell) and writes offset/size/yaw targets
/// at the center cells only.
pub fn splat_targets(gts: &[BoxGt], cfg: &VoxelConfig) -> TargetMaps {
    let (h, w) = cfg.extent;
    let mut heat = DenseGrid::zeros(h, w, 1);
    let mut offset = DenseGrid::zeros(h, w, 2);
    let mut size = DenseGrid::zeros(h, w, 2);
    let mut yaw = DenseGrid::zeros(h, w, 2);
    let mut positives = Vec::new();
    let mut skipped = 0;
    let cell = cfg.cell.0.min(cfg.cell.1);
    for gt in gts {
        let Some((r0, c0)) = cfg.cell_of(gt.x, gt.y) else {
            skipped += 1;
            continue;
        };
        let sigma = (gt.length.min(gt.width) / (6.0 * cell)).max(1.0);
        let radius = (3.0 * sigma).ceil() as i64;
        for r in (r0 - radius).max(0)..=(r0 + radius).min(h as i64 - 1) {
            for c in (c0 - radius).max(0)..=(c0 + radius).min(w as i64 - 1) {
                let d2 = ((r - r0) * (r - r0) + (c - c0) * (c - c0)) as f64;
                let v = (-d2 / (2.0 * sigma * sigma)).exp();
                let slot = heat.at_mut(r as usize, c as usize, 0);
                if v > *slot {
                    *slot = v;
                }
            }
        }
        let (cx, cy) = cfg.cell_center(r0, c0);
        let cell_idx = (r0 as usize) * w + c0 as usize;
        // A rectangle is symmetric under a half turn, so heading is only
        // identifiable mod pi; canonicalize to [-pi/2, pi/2) to keep the
        // (sin, cos) targets consistent across label conventions.
        let mut canon = crate::geom::normalize_angle(gt.yaw);
        if canon >= std::f64::consts::FRAC_PI_2 {
            canon -= std::f64::consts::PI;
        } else if canon < -std::f64::consts::FRAC_PI_2 {
            canon += std::f64::consts::PI;
        }
        *heat.at_mut(r0 as usize, c0 as usize, 0) = 1.0;
        *offset.at_mut(r0 as usize, c0 as usize, 0) = (gt.x - cx) / cfg.cell.0;
        *offset.at_mut(r0 as usize, c0 as usize, 1) = (gt.y - cy) / cfg.cell.1;
        *size.at_mut(r0 as usize, c0 as usize, 0) = gt.length.ln();
        *size.at_mut(r0 as usize, c0 as usize, 1) = gt.width.ln();
        *yaw.at_mut(r0 as usize, c0 as usize, 0) = canon.sin();
        *yaw.at_mut(r0 as usize, c0 as usize, 1) = canon.cos();
        if !positives.contains(&cell_idx) {
            positives.push(cell_idx);
        }
    }
    TargetMaps { maps: HeadOutput { heatmap: heat, offset, size, yaw }, positives, skipped }
}

/// Penalty-reduced focal loss on the probability heatmap, normalized by the
/// positive count. Probabilities are clamped away from {0, 1} before logs.
pub struct FocalLossOp {
    pub target: Vec<f64>,
    pub n_pos: usize,
}

const P_CLAMP: f64 = 1e-12;

impl TapeOp for FocalLossOp {
    fn name(&self) -> &'static str {
        "focal_loss"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AdError> {
        let p = inputs[0];
        if p.numel() != self.target.len() {
            return Err(AdError::ShapeMismatch { op: "focal_loss", detail: format!("{} vs {}", p.numel(), self.target.len()) });
        }
        let norm = self.n_pos.max(1) as f64;
        let mut loss = 0.0;
        for (&pv, &t) in p.data().iter().zip(&self.target) {
            let pv = pv.clamp(P_CLAMP, 1.0 - P_CLAMP);
            if t == 1.0 {
                loss -= (1.0 - pv).powf(FOCAL_ALPHA) * pv.ln();
            } else {
                loss -= (1.0 - t).powf(FOCAL_BETA) * pv.powf(FOCAL_ALPHA) * (1.0 - pv).ln();
            }
        }
        Ok(Tensor::scalar(loss / norm))
    }
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, gout: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let p = inputs[0];
        let norm = self.n_pos.max(1) as f64;
        let g = gout.item() / norm;
        let mut dp = Vec::with_capacity(p.numel());
        for (&pv, &t) in p.data().iter().zip(&self.target) {
            let pv = pv.clamp(P_CLAMP, 1.0 - P_CLAMP);
            let d = if t == 1.0 {
                FOCAL_ALPHA * (1.0 - pv).powf(FOCAL_ALPHA - 1.0) * pv.ln() - (1.0 - pv).powf(FOCAL_ALPHA) / pv
            } else {
                (1.0 - t).powf(FOCAL_BETA)
                    * (pv.powf(FOCAL_ALPHA) / (1.0 - pv) - FOCAL_ALPHA * pv.powf(FOCAL_ALPHA - 1.0) * (1.0 - pv).ln())
            };
            dp.push(g * d);
        }
        Ok(vec![Some(Tensor::new(p.shape().to_vec(), dp))])
    }
}

/// L1 regression loss restricted to the positive cells, normalized by the
/// positive count.
pub struct MaskedL1Op {
    pub target: Vec<f64>,
    pub positives: Vec<usize>,
    pub channels: usize,
}

impl TapeOp for MaskedL1Op {
    fn name(&self) -> &'static str {
        "masked_l1"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AdError> {
        let x = inputs[0];
        if x.numel() != self.target.len() {
            return Err(AdError::ShapeMismatch { op: "masked_l1", detail: format!("{} vs {}", x.numel(), self.target.len()) });
        }
        let norm = self.positives.len().max(1) as f64;
        let mut loss = 0.0;
        for &cell in &self.positives {
            for ch in 0..self.channels {
                let i = cell * self.channels + ch;
                loss += (x.data()[i] - self.target[i]).abs();
            }
        }
        Ok(Tensor::scalar(loss / norm))
    }
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, gout: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let x = inputs[0];
        let norm = self.positives.len().max(1) as f64;
        let g = gout.item() / norm;
        let mut dx = vec![0.0; x.numel()];
        for &cell in &self.positives {
            for ch in 0..self.channels {
                let i = cell * self.channels + ch;
                let d = x.data()[i] - self.target[i];
                dx[i] = g * if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
        }
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), dx))])
    }
}

/// Records the full detection loss on the tape: focal heatmap term plus L1
/// offset/size/yaw terms at positive cells, equally weighted.
pub fn detection_loss_t(tape: &mut Tape, heads: &HeadValues, target: &TargetMaps) -> Result<Value, AdError> {
    let focal = tape.apply(
        Box::new(FocalLossOp { target: target.maps.heatmap.data.clone(), n_pos: target.positives.len() }),
        &[heads.heatmap],
    )?;
    let mut total = focal;
    for (value, maps) in [
        (heads.offset, &target.maps.offset),
        (heads.size, &target.maps.size),
        (heads.yaw, &target.maps.yaw),
    ] {
        let term = tape.apply(
            Box::new(MaskedL1Op { target: maps.data.clone(), positives: target.positives.clone(), channels: maps.c }),
            &[value],
        )?;
        total = tape.apply(Box::new(AddOp), &[total, term])?;
    }
    Ok(total)
}

/// Non-tape detection loss (same ops, evaluated directly).
pub fn detection_loss(pred: &HeadOutput, target: &TargetMaps) -> Result<f64, AdError> {
    let mut tape = Tape::new();
    let heads = HeadValues {
        heatmap: tape.constant(grid_to_tensor(&pred.heatmap)),
        offset: tape.constant(grid_to_tensor(&pred.offset)),
        size: tape.constant(grid_to_tensor(&pred.size)),
        yaw: tape.constant(grid_to_tensor(&pred.yaw)),
    };
    let loss = detection_loss_t(&mut tape, &heads, &target.clone())?;
    let v = tape.tensor(loss).item();
    if !v.is_finite() {
        return Err(AdError::NonFinite("detection_loss"));
    }
    Ok(v)
}

/// Writes detections as JSON lines: `{"x":..,"y":..,"l":..,"w":..,"yaw":..,"score":..}`.
pub fn write_detections_jsonl<W: std::io::Write>(mut w: W, dets: &[Detection]) -> std::io::Result<()> {
    for d in dets {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads the JSON-lines detection format.
pub fn read_detections_jsonl(text: &str) -> Result<Vec<Detection>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

/// Decodes boxes from head maps: 3x3 local-maximum suppression on the
/// heatmap, score threshold, box reconstruction as the inverse of the
/// target encoding, capped at `max_det` best scores.
pub fn decode_detections(head: &HeadOutput, cfg: &VoxelConfig, score_thresh: f64, max_det: usize) -> Vec<Detection> {
    let (h, w) = (head.heatmap.h, head.heatmap.w);
    let mut peaks: Vec<(f64, usize, usize)> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = head.heatmap.at(r, c, 0);
            if v < score_thresh {
                continue;
            }
            let mut is_max = true;
            'scan: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    if head.heatmap.at(nr as usize, nc as usize, 0) > v {
                        is_max = false;
                        break 'scan;
                    }
                }
            }
            if is_max {
                peaks.push((v, r, c));
            }
        }
    }
    peaks.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    peaks.truncate(max_det);
    peaks
        .into_iter()
        .map(|(score, r, c)| {
            let (cx, cy) = cfg.cell_center(r as i64, c as i64);
            let x = cx + head.offset.at(r, c, 0) * cfg.cell.0;
            let y = cy + head.offset.at(r, c, 1) * cfg.cell.1;
            let length = head.size.at(r, c, 0).exp();
            let width = head.size.at(r, c, 1).exp();
            let yaw = head.yaw.at(r, c, 0).atan2(head.yaw.at(r, c, 1));
            Detection { x, y, length, width, yaw, score }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::geom::Point;
    use rand::Rng;
    use rand::SeedableRng;

    fn cloud_with(points: &[(f64, f64)]) -> PointCloud {
        PointCloud::new(points.iter().map(|&(x, y)| Point { x, y, z: 1.0, intensity: 0.5 }).collect())
    }

    fn tiny_model(seed: u64) -> Model {
        Model::new(ModelConfig::tiny(8, 8, 6, 2), seed)
    }

    #[test]
    fn shared_model_gives_identical_grids() {
        let model = tiny_model(1);
        let cloud = cloud_with(&[(0.5, 0.5), (-1.0, 2.0), (3.0, -2.5)]);
        let a = encode_features(&cloud, &model).unwrap();
        let b = encode_features(&cloud, &model).unwrap();
        let bits = |g: &DenseGrid| g.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn empty_cloud_encodes_to_zero_grid() {
        let model = tiny_model(2);
        let grid = encode_features(&PointCloud::default(), &model).unwrap();
        assert!(grid.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_init_adapters_do_not_change_the_encoder() {
        let mut cfg = ModelConfig::tiny(8, 8, 6, 2);
        let plain = Model::new(cfg.clone(), 7);
        cfg.encoder.adapters = true;
        let mut adapted = Model::new(cfg, 7);
        // Align the backbone weights explicitly; the adapter params stay at
        // their identity init.
        for (_, p) in plain.store.iter() {
            if let Some(id) = adapted.store.id(&p.name) {
                adapted.store.get_mut(id).value = p.value.clone();
            }
        }
        let cloud = cloud_with(&[(0.0, 0.0), (1.5, -2.0), (-3.0, 1.0)]);
        let a = encode_features(&cloud, &plain).unwrap();
        let b = encode_features(&cloud, &adapted).unwrap();
        let bits = |g: &DenseGrid| g.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn identity_ssf_matches_ssf_free_net() {
        let mut cfg = ModelConfig::tiny(6, 6, 4, 1);
        let plain = Model::new(cfg.clone(), 9);
        cfg.ssf = true;
        let mut ssf = Model::new(cfg, 9);
        for (_, p) in plain.store.iter() {
            if let Some(id) = ssf.store.id(&p.name) {
                ssf.store.get_mut(id).value = p.value.clone();
            }
        }
        let fused = {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            DenseGrid::from_data(6, 6, 4, (0..144).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        let a = predict_heads(&fused, &plain).unwrap();
        let b = predict_heads(&fused, &ssf).unwrap();
        assert_eq!(a.heatmap.data, b.heatmap.data);
        assert_eq!(a.size.data, b.size.data);
    }

    #[test]
    fn heatmap_stays_in_unit_interval() {
        let model = tiny_model(4);
        let fused = {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            DenseGrid::from_data(8, 8, 6, (0..384).map(|_| rng.random_range(-3.0..3.0)).collect())
        };
        let heads = predict_heads(&fused, &model).unwrap();
        assert!(heads.heatmap.data.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn splat_single_peak_is_exactly_one() {
        let cfg = VoxelConfig::desk();
        let gt = BoxGt { x: 0.25, y: 0.25, length: 4.0, width: 2.0, yaw: 0.3 };
        let t = splat_targets(&[gt], &cfg);
        let max = t.maps.heatmap.data.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(max, 1.0);
        assert_eq!(t.positives.len(), 1);
        let cell = t.positives[0];
        assert_eq!(t.maps.heatmap.data[cell], 1.0);
        assert_eq!(t.skipped, 0);
    }

    #[test]
    fn splat_two_distant_boxes_two_peaks() {
        let cfg = VoxelConfig::desk();
        let gts = [
            BoxGt { x: -10.0, y: -10.0, length: 4.0, width: 2.0, yaw: 0.0 },
            BoxGt { x: 10.0, y: 12.0, length: 4.5, width: 1.8, yaw: 1.0 },
        ];
        let t = splat_targets(&gts, &cfg);
        let peaks = t.maps.heatmap.data.iter().filter(|&&v| v == 1.0).count();
        assert_eq!(peaks, 2);
    }

    #[test]
    fn splat_overlapping_gaussians_take_elementwise_max() {
        let cfg = VoxelConfig::desk();
        let gts = [
            BoxGt { x: 0.0, y: 0.0, length: 5.0, width: 2.2, yaw: 0.0 },
            BoxGt { x: 1.5, y: 0.5, length: 4.0, width: 1.8, yaw: 0.4 },
        ];
        let t = splat_targets(&gts, &cfg);
        // Oracle: per-object Gaussian loop with explicit max, inside each
        // object's splat window.
        let mut oracle = DenseGrid::zeros(128, 128, 1);
        let cell = 0.5;
        for gt in &gts {
            let (r0, c0) = cfg.cell_of(gt.x, gt.y).unwrap();
            let sigma = (gt.length.min(gt.width) / (6.0 * cell)).max(1.0);
            let radius = (3.0 * sigma).ceil() as i64;
            for r in 0..128i64 {
                for c in 0..128i64 {
                    if (r - r0).abs() > radius || (c - c0).abs() > radius {
                        continue;
                    }
                    let d2 = ((r - r0).pow(2) + (c - c0).pow(2)) as f64;
                    let mut v = (-d2 / (2.0 * sigma * sigma)).exp();
                    if r == r0 && c == c0 {
                        v = 1.0;
                    }
                    let slot = oracle.at_mut(r as usize, c as usize, 0);
                    *slot = slot.max(v);
                }
            }
        }
        for i in 0..oracle.data.len() {
            assert!((oracle.data[i] - t.maps.heatmap.data[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn splat_skips_out_of_extent() {
        let cfg = VoxelConfig::desk();
        let t = splat_targets(&[BoxGt { x: 500.0, y: 0.0, length: 4.0, width: 2.0, yaw: 0.0 }], &cfg);
        assert_eq!(t.skipped, 1);
        assert!(t.positives.is_empty());
    }

    #[test]
    fn loss_zero_regression_when_pred_matches_target() {
        let cfg = VoxelConfig::desk();
        let gt = BoxGt { x: 1.0, y: -2.0, length: 4.2, width: 1.9, yaw: 0.7 };
        let t = splat_targets(&[gt], &cfg);
        let pred = t.maps.clone();
        let loss = detection_loss(&pred, &t).unwrap();
        // Regression terms vanish exactly: the total equals the focal term
        // alone (soft negative cells still contribute to it).
        let focal_only = FocalLossOp { target: t.maps.heatmap.data.clone(), n_pos: t.positives.len() }
            .forward(&[&grid_to_tensor(&pred.heatmap)])
            .unwrap()
            .item();
        assert_eq!(loss.to_bits(), focal_only.to_bits(), "loss {loss} focal {focal_only}");
    }

    #[test]
    fn focal_hand_value_single_positive() {
        let mut heat = DenseGrid::zeros(4, 4, 1);
        *heat.at_mut(1, 2, 0) = 1.0;
        let target = TargetMaps {
            maps: HeadOutput {
                heatmap: heat,
                offset: DenseGrid::zeros(4, 4, 2),
                size: DenseGrid::zeros(4, 4, 2),
                yaw: DenseGrid::zeros(4, 4, 2),
            },
            positives: vec![4 + 2],
            skipped: 0,
        };
        let mut pred_heat = DenseGrid::zeros(4, 4, 1);
        *pred_heat.at_mut(1, 2, 0) = 0.5;
        // Other cells are exactly 0 => their p^2 ln(1-p) terms are 0.
        let pred = HeadOutput {
            heatmap: pred_heat,
            offset: DenseGrid::zeros(4, 4, 2),
            size: DenseGrid::zeros(4, 4, 2),
            yaw: DenseGrid::zeros(4, 4, 2),
        };
        let loss = detection_loss(&pred, &target).unwrap();
        let expect = -(1.0_f64 - 0.5).powi(2) * 0.5_f64.ln();
        assert!((loss - expect).abs() < 1e-9, "loss {loss} expect {expect}");
    }

    #[test]
    fn loss_grad_check_small() {
        let cfg = VoxelConfig { origin: (-2.0, -2.0), cell: (1.0, 1.0), extent: (4, 4), channels: 2 };
        let gt = BoxGt { x: 0.3, y: -0.4, length: 2.0, width: 1.0, yaw: 0.5 };
        let target = splat_targets(&[gt], &cfg);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = store
            .add("logits", Tensor::new(vec![4, 4, 1], (0..16).map(|_| rng.random_range(-2.0..2.0)).collect()), false)
            .unwrap();
        let offset = store
            .add("offset", Tensor::new(vec![4, 4, 2], (0..32).map(|_| rng.random_range(-0.5..0.5)).collect()), false)
            .unwrap();
        let size = store
            .add("size", Tensor::new(vec![4, 4, 2], (0..32).map(|_| rng.random_range(-0.5..0.5)).collect()), false)
            .unwrap();
        let yaw = store
            .add("yaw", Tensor::new(vec![4, 4, 2], (0..32).map(|_| rng.random_range(-0.5..0.5)).collect()), false)
            .unwrap();
        let err = grad_check(&mut store, 1e-6, |tape, store| {
            let lg = tape.param(store, logits);
            let heat = tape.apply(Box::new(SigmoidOp), &[lg])?;
            let heads = HeadValues {
                heatmap: heat,
                offset: tape.param(store, offset),
                size: tape.param(store, size),
                yaw: tape.param(store, yaw),
            };
            detection_loss_t(tape, &heads, &target)
        })
        .unwrap();
        assert!(err < 1e-4, "loss grad err {err}");
    }

    #[test]
    fn decode_empty_heatmap_gives_nothing() {
        let cfg = VoxelConfig::desk();
        let heads = HeadOutput {
            heatmap: DenseGrid::zeros(128, 128, 1),
            offset: DenseGrid::zeros(128, 128, 2),
            size: DenseGrid::zeros(128, 128, 2),
            yaw: DenseGrid::zeros(128, 128, 2),
        };
        assert!(decode_detections(&heads, &cfg, SCORE_THRESH, MAX_DETECTIONS).is_empty());
    }

    #[test]
    fn decode_hand_constructed_box() {
        let cfg = VoxelConfig::desk();
        let mut heads = HeadOutput {
            heatmap: DenseGrid::zeros(128, 128, 1),
            offset: DenseGrid::zeros(128, 128, 2),
            size: DenseGrid::zeros(128, 128, 2),
            yaw: DenseGrid::zeros(128, 128, 2),
        };
        *heads.heatmap.at_mut(40, 50, 0) = 0.9;
        *heads.size.at_mut(40, 50, 0) = 4.0_f64.ln();
        *heads.size.at_mut(40, 50, 1) = 2.0_f64.ln();
        *heads.yaw.at_mut(40, 50, 0) = 1.0; // sin
        *heads.yaw.at_mut(40, 50, 1) = 0.0; // cos
        let dets = decode_detections(&heads, &cfg, 0.3, 8);
        assert_eq!(dets.len(), 1);
        let d = dets[0];
        let (cx, cy) = cfg.cell_center(40, 50);
        assert!((d.x - cx).abs() < 1e-12 && (d.y - cy).abs() < 1e-12);
        assert!((d.length - 4.0).abs() < 1e-12 && (d.width - 2.0).abs() < 1e-12);
        assert!((d.yaw - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert_eq!(d.score, 0.9);
    }

    #[test]
    fn decode_splat_round_trip() {
        let cfg = VoxelConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let gts: Vec<BoxGt> = (0..6)
            .map(|_| BoxGt {
                x: rng.random_range(-25.0..25.0),
                y: rng.random_range(-25.0..25.0),
                length: rng.random_range(3.5..5.5),
                width: rng.random_range(1.6..2.2),
                yaw: rng.random_range(-3.0..3.0),
            })
            .collect();
        let t = splat_targets(&gts, &cfg);
        let dets = decode_detections(&t.maps, &cfg, 0.99, 64);
        assert_eq!(dets.len(), gts.len());
        for gt in &gts {
            let best = dets
                .iter()
                .min_by(|a, b| {
                    let da = (a.x - gt.x).hypot(a.y - gt.y);
                    let db = (b.x - gt.x).hypot(b.y - gt.y);
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            let err = (best.x - gt.x).hypot(best.y - gt.y);
            assert!(err < 0.25, "center error {err}"); // half a cell
            assert!((best.length - gt.length).abs() / gt.length < 1e-6);
            assert!((best.width - gt.width).abs() / gt.width < 1e-6);
            // Heading is recovered mod pi (half-turn box symmetry).
            let dyaw = crate::geom::normalize_angle(best.yaw - gt.yaw).abs();
            let dyaw = dyaw.min(std::f64::consts::PI - dyaw);
            assert!(dyaw < 1e-6, "yaw error {dyaw}");
        }
    }

    #[test]
    fn detections_jsonl_round_trip() {
        let dets = vec![
            Detection { x: 1.5, y: -2.25, length: 4.2, width: 1.9, yaw: 0.7, score: 0.83 },
            Detection { x: -7.0, y: 3.5, length: 5.0, width: 2.1, yaw: -1.2, score: 0.41 },
        ];
        let mut buf = Vec::new();
        write_detections_jsonl(&mut buf, &dets).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().next().unwrap().contains("\"l\""));
        let back = read_detections_jsonl(&text).unwrap();
        assert_eq!(back, dets);
    }

    #[test]
    fn checkpoint_reconstruction_infers_architecture() {
        let mut cfg = ModelConfig::tiny(8, 8, 8, 2);
        cfg.encoder.adapters = true;
        cfg.ssf = true;
        cfg.channel_adapter = true;
        cfg.compression_factor = 4;
        let model = Model::new(cfg.clone(), 33);
        let rebuilt = Model::from_store(model.store.clone(), cfg.grid).unwrap();
        assert_eq!(rebuilt.cfg, cfg);
    }

    use rand_chacha::ChaCha8Rng;
}
