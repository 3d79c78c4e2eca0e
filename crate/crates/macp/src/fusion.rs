//! Frame alignment of received feature maps and the feature fusion
//! strategies, plus the early (raw points) and late (boxes) fusion
//! baseline paths.

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Value};
use crate::geom::{transform_points, DenseGrid, PointCloud, Pose2D, VoxelConfig};
use crate::nnops::{channel_norm, dense_conv2d, gelu_dense, pointwise_conv_dense, ConvKernel, NnError};
use crate::nnops::{AddOp, ConcatChannelsOp, GatherCellsOp, LinearOp, ScaleOp};
use crate::perception::{Detection, Model};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("fused grids must share the ego shape: {0}")]
    Shape(String),
    #[error("unknown fusion method '{0}' (expected weighted_sum|mean|sum|concat)")]
    UnknownMethod(String),
    #[error("concat fusion needs the reducing kernel")]
    MissingReduce,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// Feature-map combination strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    WeightedSum,
    Mean,
    Sum,
    Concat,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 4] =
        [FusionMethod::WeightedSum, FusionMethod::Mean, FusionMethod::Sum, FusionMethod::Concat];

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMethod::WeightedSum => "weighted_sum",
            FusionMethod::Mean => "mean",
            FusionMethod::Sum => "sum",
            FusionMethod::Concat => "concat",
        }
    }
}

impl FromStr for FusionMethod {
    type Err = FusionError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "weighted_sum" => Ok(FusionMethod::WeightedSum),
            "mean" => Ok(FusionMethod::Mean),
            "sum" => Ok(FusionMethod::Sum),
            "concat" => Ok(FusionMethod::Concat),
            other => Err(FusionError::UnknownMethod(other.to_string())),
        }
    }
}

/// Per-cell source table for resampling a sender grid into the ego frame:
/// entry j holds the flat sender cell supplying ego cell j, or -1 when the
/// mapped location falls outside the sender grid. Each ego cell center is
/// mapped through ego-local -> world -> sender-local and binned
/// nearest-neighbor (the containing cell).
pub fn warp_map(sender: Pose2D, ego: Pose2D, cfg: &VoxelConfig) -> Vec<i64> {
    let (h, w) = cfg.extent;
    let mut map = vec![-1i64; h * w];
    for r in 0..h {
        for c in 0..w {
            let (ex, ey) = cfg.cell_center(r as i64, c as i64);
            let (wx, wy) = ego.local_to_world(ex, ey);
            let (sx, sy) = sender.world_to_local(wx, wy);
            if let Some((sr, sc)) = cfg.cell_of(sx, sy) {
                map[r * w + c] = sr * w as i64 + sc;
            }
        }
    }
    map
}

/// Resamples a sender-frame grid into the ego frame (nearest neighbor;
/// out-of-range cells zero).
pub fn warp_to_ego(grid: &DenseGrid, sender: Pose2D, ego: Pose2D, cfg: &VoxelConfig) -> DenseGrid {
    let map = warp_map(sender, ego, cfg);
    let (h, w) = cfg.extent;
    let mut out = DenseGrid::zeros(h, w, grid.c);
    for (j, &src) in map.iter().enumerate() {
        if src >= 0 {
            let s = src as usize;
            out.data[j * grid.c..(j + 1) * grid.c].copy_from_slice(&grid.data[s * grid.c..(s + 1) * grid.c]);
        }
    }
    out
}

/// Tape version of the warp (a differentiable gather).
pub fn warp_to_ego_t(tape: &mut Tape, grid: Value, sender: Pose2D, ego: Pose2D, cfg: &VoxelConfig) -> Result<Value, AdError> {
    let map = warp_map(sender, ego, cfg);
    let (h, w) = cfg.extent;
    tape.apply(Box::new(GatherCellsOp { map, out_h: h, out_w: w }), &[grid])
}

fn check_shapes(ego: &DenseGrid, others: &[DenseGrid]) -> Result<(), FusionError> {
    for o in others {
        if (o.h, o.w, o.c) != (ego.h, ego.w, ego.c) {
            return Err(FusionError::Shape(format!(
                "{}x{}x{} vs ego {}x{}x{}",
                o.h, o.w, o.c, ego.h, ego.w, ego.c
            )));
        }
    }
    Ok(())
}

/// Combines aligned feature maps. `weighted_sum` keeps the ego map at
/// weight 1 and every surrounding map at 1/N; with no surrounding maps it
/// degrades to the ego map unchanged. `concat` appends the mean of the
/// surrounding maps (zero-filled when there are none) and reduces back to C
/// channels with the given pointwise kernel.
pub fn fuse_maps(
    ego: &DenseGrid,
    others: &[DenseGrid],
    method: FusionMethod,
    reduce: Option<&ConvKernel>,
) -> Result<DenseGrid, FusionError> {
    check_shapes(ego, others)?;
    let n = others.len();
    match method {
        FusionMethod::WeightedSum => {
            if n == 0 {
                return Ok(ego.clone());
            }
            let mut acc = others[0].data.clone();
            for o in &others[1..] {
                for (a, b) in acc.iter_mut().zip(&o.data) {
                    *a += b;
                }
            }
            let inv = 1.0 / n as f64;
            let data = ego.data.iter().zip(&acc).map(|(e, a)| e + inv * a).collect();
            Ok(DenseGrid::from_data(ego.h, ego.w, ego.c, data))
        }
        FusionMethod::Mean => {
            let mut acc = ego.data.clone();
            for o in others {
                for (a, b) in acc.iter_mut().zip(&o.data) {
                    *a += b;
                }
            }
            let inv = 1.0 / (n + 1) as f64;
            acc.iter_mut().for_each(|a| *a *= inv);
            Ok(DenseGrid::from_data(ego.h, ego.w, ego.c, acc))
        }
        FusionMethod::Sum => {
            let mut acc = ego.data.clone();
            for o in others {
                for (a, b) in acc.iter_mut().zip(&o.data) {
                    *a += b;
                }
            }
            Ok(DenseGrid::from_data(ego.h, ego.w, ego.c, acc))
        }
        FusionMethod::Concat => {
            let reduce = reduce.ok_or(FusionError::MissingReduce)?;
            let partner = if n == 0 {
                DenseGrid::zeros(ego.h, ego.w, ego.c)
            } else {
                let mut acc = others[0].data.clone();
                for o in &others[1..] {
                    for (a, b) in acc.iter_mut().zip(&o.data) {
                        *a += b;
                    }
                }
                let inv = 1.0 / n as f64;
                acc.iter_mut().for_each(|a| *a *= inv);
                DenseGrid::from_data(ego.h, ego.w, ego.c, acc)
            };
            let mut cat = Vec::with_capacity(ego.data.len() * 2);
            for i in 0..ego.h * ego.w {
                cat.extend_from_slice(&ego.data[i * ego.c..(i + 1) * ego.c]);
                cat.extend_from_slice(&partner.data[i * ego.c..(i + 1) * ego.c]);
            }
            let doubled = DenseGrid::from_data(ego.h, ego.w, 2 * ego.c, cat);
            Ok(pointwise_conv_dense(&doubled, reduce)?)
        }
    }
}

/// Tape version of [`fuse_maps`]; the concat reduction reads the model's
/// `fusion.reduce` parameters so it trains with the fusion group.
pub fn fuse_maps_t(
    tape: &mut Tape,
    model: &Model,
    ego: Value,
    others: &[Value],
    method: FusionMethod,
) -> Result<Value, AdError> {
    let n = others.len();
    let sum_of = |tape: &mut Tape, values: &[Value]| -> Result<Value, AdError> {
        let mut acc = values[0];
        for &v in &values[1..] {
            acc = tape.apply(Box::new(AddOp), &[acc, v])?;
        }
        Ok(acc)
    };
    match method {
        FusionMethod::WeightedSum => {
            if n == 0 {
                return Ok(ego);
            }
            let total = sum_of(tape, others)?;
            let scaled = tape.apply(Box::new(ScaleOp(1.0 / n as f64)), &[total])?;
            tape.apply(Box::new(AddOp), &[ego, scaled])
        }
        FusionMethod::Mean => {
            let mut all = vec![ego];
            all.extend_from_slice(others);
            let total = sum_of(tape, &all)?;
            tape.apply(Box::new(ScaleOp(1.0 / (n + 1) as f64)), &[total])
        }
        FusionMethod::Sum => {
            let mut all = vec![ego];
            all.extend_from_slice(others);
            sum_of(tape, &all)
        }
        FusionMethod::Concat => {
            let partner = if n == 0 {
                let shape = tape.tensor(ego).shape().to_vec();
                tape.constant(crate::autodiff::Tensor::zeros(&shape))
            } else {
                let total = sum_of(tape, others)?;
                tape.apply(Box::new(ScaleOp(1.0 / n as f64)), &[total])?
            };
            let cat = tape.apply(Box::new(ConcatChannelsOp), &[ego, partner])?;
            let w = tape.param(&model.store, model.pid("fusion.reduce.w"));
            let b = tape.param(&model.store, model.pid("fusion.reduce.b"));
            tape.apply(Box::new(LinearOp), &[cat, w, b])
        }
    }
}

/// Post-fusion correction applied outside the tape: 3x3 conv, channel
/// normalization, GELU, with the model's fusion parameters.
pub fn post_fusion_conv(grid: &DenseGrid, model: &Model) -> Result<DenseGrid, FusionError> {
    let wt = model.store.value(model.pid("fusion.post.w"));
    // Bias-free: the channel normalization that follows would cancel it.
    let conv = ConvKernel::new(
        wt.shape()[0],
        wt.shape()[2],
        wt.shape()[3],
        wt.data().to_vec(),
        vec![0.0; wt.shape()[3]],
    )?;
    let x = dense_conv2d(grid, &conv)?;
    let gamma = model.store.value(model.pid("fusion.norm.gamma")).data().to_vec();
    let beta = model.store.value(model.pid("fusion.norm.beta")).data().to_vec();
    Ok(gelu_dense(&channel_norm(&x, &gamma, &beta)?))
}

/// Early fusion: every cloud transformed into the ego frame and
/// concatenated.
pub fn early_fuse_clouds(clouds: &[(PointCloud, Pose2D)], ego: Pose2D) -> PointCloud {
    let mut points = Vec::with_capacity(clouds.iter().map(|(c, _)| c.len()).sum());
    for (cloud, pose) in clouds {
        points.extend(transform_points(cloud, *pose, ego).points);
    }
    PointCloud::new(points)
}

/// Transforms a detection from a sender frame into the ego frame.
pub fn transform_detection(d: &Detection, from: Pose2D, to: Pose2D) -> Detection {
    let (wx, wy) = from.local_to_world(d.x, d.y);
    let (x, y) = to.world_to_local(wx, wy);
    Detection {
        x,
        y,
        length: d.length,
        width: d.width,
        yaw: crate::geom::normalize_angle(d.yaw + from.yaw - to.yaw),
        score: d.score,
    }
}

/// Late fusion: per-agent detections mapped into the ego frame and merged
/// with greedy score-descending suppression at the given rotated-IoU
/// threshold.
pub fn late_fuse_detections(sets: &[(Vec<Detection>, Pose2D)], ego: Pose2D, nms_iou: f64) -> Vec<Detection> {
    debug_assert!(nms_iou > 0.0 && nms_iou < 1.0);
    let mut pool: Vec<Detection> = Vec::new();
    for (dets, pose) in sets {
        pool.extend(dets.iter().map(|d| transform_detection(d, *pose, ego)));
    }
    pool.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.x.partial_cmp(&b.x).unwrap()));
    let mut kept: Vec<Detection> = Vec::new();
    'candidates: for d in pool {
        for k in &kept {
            if crate::eval::rotated_iou_det(&d, k) > nms_iou {
                continue 'candidates;
            }
        }
        kept.push(d);
    }
    kept
}
