//! Rotated-box IoU via convex polygon clipping, greedy score-ordered
//! matching with all-point-interpolated average precision, the four
//! pipeline modes (no/late/early fusion and cooperative mid fusion), and
//! the experiment report.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Tape};
use crate::comms::{am_megabytes, decode_message, encode_message, ChannelStats, WireError};
use crate::fusion::{fuse_maps_t, warp_to_ego_t, FusionMethod};
use crate::geom::PointCloud;
use crate::perception::{
    decode_detections, grid_to_tensor, tensor_to_grid, BoxGt, Detection, Model, MAX_DETECTIONS,
};
use crate::scenario::{mask_fov, Frame};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate zero-area box")]
    DegenerateBox,
    #[error("IoU threshold must lie in (0, 1), got {0}")]
    BadThreshold(f64),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

// ---------------------------------------------------------------------------
// Rotated IoU.
// ---------------------------------------------------------------------------

type Pt = (f64, f64);

fn corners(x: f64, y: f64, l: f64, w: f64, yaw: f64) -> [Pt; 4] {
    let (s, c) = yaw.sin_cos();
    let (hl, hw) = (l / 2.0, w / 2.0);
    // Counterclockwise.
    [(hl, -hw), (hl, hw), (-hl, hw), (-hl, -hw)]
        .map(|(px, py)| (c * px - s * py + x, s * px + c * py + y))
}

fn shoelace(poly: &[Pt]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let (x1, y1) = poly[i];
        let (x2, y2) = poly[(i + 1) % poly.len()];
        acc += x1 * y2 - x2 * y1;
    }
    acc.abs() / 2.0
}

/// Sutherland-Hodgman clip of a polygon against one directed edge (inside =
/// left of a->b for counterclockwise clip polygons).
fn clip_edge(poly: &[Pt], a: Pt, b: Pt) -> Vec<Pt> {
    let inside = |p: Pt| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0) >= 0.0;
    let intersect = |p: Pt, q: Pt| -> Pt {
        let d1 = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        let d2 = (b.0 - a.0) * (q.1 - a.1) - (b.1 - a.1) * (q.0 - a.0);
        let t = d1 / (d1 - d2);
        (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
    };
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let cur = poly[i];
        let prev = poly[(i + poly.len() - 1) % poly.len()];
        match (inside(prev), inside(cur)) {
            (true, true) => out.push(cur),
            (true, false) => out.push(intersect(prev, cur)),
            (false, true) => {
                out.push(intersect(prev, cur));
                out.push(cur);
            }
            (false, false) => {}
        }
    }
    out
}

fn intersection_area(a: &[Pt; 4], b: &[Pt; 4]) -> f64 {
    let mut poly: Vec<Pt> = a.to_vec();
    for i in 0..4 {
        if poly.is_empty() {
            return 0.0;
        }
        poly = clip_edge(&poly, b[i], b[(i + 1) % 4]);
    }
    shoelace(&poly)
}

/// IoU of two oriented BEV rectangles via convex clipping and the shoelace
/// area. Zero-area boxes are rejected.
pub fn rotated_iou(a: &Detection, b: &Detection) -> Result<f64, EvalError> {
    if a.length * a.width <= 0.0 || b.length * b.width <= 0.0 {
        return Err(EvalError::DegenerateBox);
    }
    let ca = corners(a.x, a.y, a.length, a.width, a.yaw);
    let cb = corners(b.x, b.y, b.length, b.width, b.yaw);
    let inter = intersection_area(&ca, &cb);
    let area_a = a.length * a.width;
    let area_b = b.length * b.width;
    Ok((inter / (area_a + area_b - inter)).clamp(0.0, 1.0))
}

/// Infallible IoU for boxes already known to be non-degenerate.
pub fn rotated_iou_det(a: &Detection, b: &Detection) -> f64 {
    rotated_iou(a, b).expect("non-degenerate boxes")
}

fn gt_as_det(b: &BoxGt) -> Detection {
    Detection { x: b.x, y: b.y, length: b.length, width: b.width, yaw: b.yaw, score: 1.0 }
}

// ---------------------------------------------------------------------------
// Matching and average precision.
// ---------------------------------------------------------------------------

/// Greedy matching: detections in descending score order each claim the
/// unmatched ground-truth box of highest IoU >= threshold. Returns one
/// true/false flag per detection, in the same descending-score order.
fn greedy_match(dets: &[Detection], gts: &[BoxGt], iou_thresh: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.partial_cmp(&dets[i].score).unwrap().then(i.cmp(&j)));
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for &i in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let iou = rotated_iou_det(&dets[i], &gt_as_det(gt));
            if iou >= iou_thresh && best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            flags.push(true);
        } else {
            flags.push(false);
        }
    }
    flags
}

/// Area under the precision envelope of a PR curve given per-detection
/// true-positive flags in descending score order.
fn ap_from_flags(flags_scores: &mut Vec<(f64, bool)>, n_gt: usize) -> f64 {
    if n_gt == 0 {
        // Stability convention: perfect when nothing was there to find and
        // nothing was claimed.
        return if flags_scores.is_empty() { 1.0 } else { 0.0 };
    }
    if flags_scores.is_empty() {
        return 0.0;
    }
    flags_scores.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(flags_scores.len());
    for (rank, (_, is_tp)) in flags_scores.iter().enumerate() {
        if *is_tp {
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (rank as f64 + 1.0)));
    }
    // All-point interpolation: integrate the running max precision from the
    // high-recall end.
    let mut ap = 0.0;
    let mut max_prec = 0.0_f64;
    let mut prev_recall = points.last().unwrap().0;
    for &(recall, precision) in points.iter().rev() {
        max_prec = max_prec.max(precision);
        ap += (prev_recall - recall) * max_prec;
        prev_recall = recall;
    }
    ap += prev_recall * max_prec;
    ap
}

/// AP over a single scene at one IoU threshold.
pub fn match_and_ap(dets: &[Detection], gts: &[BoxGt], iou_thresh: f64) -> Result<f64, EvalError> {
    if !(0.0..1.0).contains(&iou_thresh) || iou_thresh == 0.0 {
        return Err(EvalError::BadThreshold(iou_thresh));
    }
    let flags = greedy_match(dets, gts, iou_thresh);
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.partial_cmp(&dets[i].score).unwrap().then(i.cmp(&j)));
    let mut flags_scores: Vec<(f64, bool)> =
        order.iter().zip(&flags).map(|(&i, &f)| (dets[i].score, f)).collect();
    Ok(ap_from_flags(&mut flags_scores, gts.len()))
}

/// AP pooled across frames: matching stays per frame, the PR curve is
/// global over all detections sorted by score.
pub fn ap_pooled(per_frame: &[(Vec<Detection>, Vec<BoxGt>)], iou_thresh: f64) -> f64 {
    let mut flags_scores: Vec<(f64, bool)> = Vec::new();
    let mut n_gt = 0usize;
    for (dets, gts) in per_frame {
        n_gt += gts.len();
        let flags = greedy_match(dets, gts, iou_thresh);
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&i, &j| dets[j].score.partial_cmp(&dets[i].score).unwrap().then(i.cmp(&j)));
        flags_scores.extend(order.iter().zip(&flags).map(|(&i, &f)| (dets[i].score, f)));
    }
    if n_gt == 0 && flags_scores.is_empty() {
        return 1.0;
    }
    ap_from_flags(&mut flags_scores, n_gt)
}

// ---------------------------------------------------------------------------
// Pipelines and reports.
// ---------------------------------------------------------------------------

/// Table-style pipeline modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    NoFusion,
    LateFusion,
    EarlyFusion,
    Cooperative,
}

impl PipelineMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PipelineMode::NoFusion => "no_fusion",
            PipelineMode::LateFusion => "late_fusion",
            PipelineMode::EarlyFusion => "early_fusion",
            PipelineMode::Cooperative => "cooperative",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub fusion: FusionMethod,
    pub score_thresh: f64,
    pub max_det: usize,
    pub nms_iou: f64,
    /// Cap on participating agents including the ego (cooperation sweep).
    pub max_agents: Option<usize>,
    /// Axis-aligned square mask removed from the ego cloud: (cx, cy, half).
    pub ego_mask: Option<(f64, f64, f64)>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            fusion: FusionMethod::WeightedSum,
            score_thresh: 0.1,
            max_det: MAX_DETECTIONS,
            nms_iou: 0.5,
            max_agents: None,
            ego_mask: None,
        }
    }
}

/// Distance buckets (meters from the ego); the last bucket absorbs
/// everything beyond its lower edge so the buckets partition the gt set.
pub const BUCKETS: [(&str, f64, f64); 3] =
    [("0-10m", 0.0, 10.0), ("10-20m", 10.0, 20.0), ("20-32m", 20.0, f64::INFINITY)];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApEntry {
    pub iou: f64,
    pub bucket: String,
    pub ap: f64,
    pub n_gt: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub entries: Vec<ApEntry>,
    pub n_detections: usize,
    pub n_gts: usize,
    pub n_frames: usize,
    pub am_mb: f64,
    pub params_total: usize,
    pub params_trainable: usize,
}

impl EvalReport {
    pub fn ap(&self, iou: f64, bucket: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.iou == iou && e.bucket == bucket).map(|e| e.ap)
    }

    pub fn overall(&self, iou: f64) -> f64 {
        self.ap(iou, "overall").unwrap_or(0.0)
    }

    /// CSV rows matching the report contract:
    /// `mode,iou,bucket,ap,am_mb,params_total,params_trainable`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,iou,bucket,ap,am_mb,params_total,params_trainable\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{},{}\n",
                self.mode, e.iou, e.bucket, e.ap, self.am_mb, self.params_total, self.params_trainable
            ));
        }
        out
    }
}

fn masked_ego_cloud(frame: &Frame, opts: &EvalOptions) -> PointCloud {
    match opts.ego_mask {
        Some((cx, cy, half)) => mask_fov(&frame.clouds[frame.ego], (cx, cy), half),
        None => frame.clouds[frame.ego].clone(),
    }
}

fn participating_others(frame: &Frame, opts: &EvalOptions) -> Vec<usize> {
    let cap = opts.max_agents.unwrap_or(usize::MAX).max(1);
    let mut others: Vec<usize> = (0..frame.poses.len()).filter(|&i| i != frame.ego).collect();
    others.sort_unstable();
    others.truncate(cap.saturating_sub(1));
    others
}

/// Runs one frame through the selected pipeline; returns the detections in
/// the ego frame plus the bytes the ego downloaded this frame.
pub fn run_frame(model: &Model, frame: &Frame, mode: PipelineMode, opts: &EvalOptions) -> Result<(Vec<Detection>, ChannelStats), EvalError> {
    let cfg = &model.cfg.grid;
    let ego_pose = frame.poses[frame.ego];
    let mut stats = ChannelStats::default();
    let dets = match mode {
        PipelineMode::NoFusion => {
            let mut tape = Tape::new();
            let feat = model.encode_features_t(&mut tape, &masked_ego_cloud(frame, opts))?;
            let post = model.post_fusion_t(&mut tape, feat)?;
            let heads = model.predict_heads_t(&mut tape, post)?.materialize(&tape);
            decode_detections(&heads, cfg, opts.score_thresh, opts.max_det)
        }
        PipelineMode::Cooperative => {
            let mut tape = Tape::new();
            let ego_feat = model.encode_features_t(&mut tape, &masked_ego_cloud(frame, opts))?;
            let mut warped = Vec::new();
            for other in participating_others(frame, opts) {
                let feat = model.encode_features_t(&mut tape, &frame.clouds[other])?;
                let latent = model.channel_compress_t(&mut tape, feat)?;
                let latent_grid = tensor_to_grid(tape.tensor(latent));
                let bytes = encode_message(
                    &latent_grid,
                    other as u32,
                    frame.poses[other],
                    model.cfg.compression_factor,
                )?;
                stats.record(bytes.len());
                let msg = decode_message(&bytes)?;
                let received = tape.constant(grid_to_tensor(&msg.grid));
                let dec = model.channel_decompress_t(&mut tape, received)?;
                warped.push(warp_to_ego_t(&mut tape, dec, msg.pose, ego_pose, cfg)?);
            }
            let fused = fuse_maps_t(&mut tape, model, ego_feat, &warped, opts.fusion)?;
            let post = model.post_fusion_t(&mut tape, fused)?;
            let heads = model.predict_heads_t(&mut tape, post)?.materialize(&tape);
            decode_detections(&heads, cfg, opts.score_thresh, opts.max_det)
        }
        PipelineMode::EarlyFusion => {
            let mut pairs: Vec<(PointCloud, crate::geom::Pose2D)> =
                vec![(masked_ego_cloud(frame, opts), ego_pose)];
            for other in participating_others(frame, opts) {
                let cloud = frame.clouds[other].clone();
                // Raw-point transfer cost: the binary frame format.
                stats.record(crate::comms::HEADER_BYTES.max(8) + 16 * cloud.len());
                pairs.push((cloud, frame.poses[other]));
            }
            let merged = crate::fusion::early_fuse_clouds(&pairs, ego_pose);
            let mut tape = Tape::new();
            let feat = model.encode_features_t(&mut tape, &merged)?;
            let post = model.post_fusion_t(&mut tape, feat)?;
            let heads = model.predict_heads_t(&mut tape, post)?.materialize(&tape);
            decode_detections(&heads, cfg, opts.score_thresh, opts.max_det)
        }
        PipelineMode::LateFusion => {
            let mut sets = Vec::new();
            for agent in std::iter::once(frame.ego).chain(participating_others(frame, opts)) {
                let cloud =
                    if agent == frame.ego { masked_ego_cloud(frame, opts) } else { frame.clouds[agent].clone() };
                let mut tape = Tape::new();
                let feat = model.encode_features_t(&mut tape, &cloud)?;
                let post = model.post_fusion_t(&mut tape, feat)?;
                let heads = model.predict_heads_t(&mut tape, post)?.materialize(&tape);
                let dets = decode_detections(&heads, cfg, opts.score_thresh, opts.max_det);
                if agent != frame.ego {
                    // Box transfer cost: the JSON-lines serialization.
                    let mut bytes = 0usize;
                    for d in &dets {
                        bytes += serde_json::to_string(d).map(|s| s.len() + 1).unwrap_or(0);
                    }
                    if bytes > 0 {
                        stats.messages += 1;
                        stats.payload_bytes += bytes;
                    }
                }
                sets.push((dets, frame.poses[agent]));
            }
            crate::fusion::late_fuse_detections(&sets, ego_pose, opts.nms_iou)
        }
    };
    Ok((dets, stats))
}

/// Evaluates a pipeline over a test split: per-frame runs in parallel,
/// pooled AP at IoU 0.5 and 0.7 overall and per distance bucket, byte
/// accounting of what the ego downloaded, and the model's parameter counts.
pub fn evaluate(frames: &[Frame], model: &Model, mode: PipelineMode, opts: &EvalOptions) -> Result<EvalReport, EvalError> {
    evaluate_with_detections(frames, model, mode, opts).map(|(r, _)| r)
}

/// [`evaluate`] plus the per-frame detections (ego frame, frame order).
pub fn evaluate_with_detections(
    frames: &[Frame],
    model: &Model,
    mode: PipelineMode,
    opts: &EvalOptions,
) -> Result<(EvalReport, Vec<Vec<Detection>>), EvalError> {
    let per_frame: Result<Vec<(Vec<Detection>, ChannelStats)>, EvalError> =
        frames.par_iter().map(|f| run_frame(model, f, mode, opts)).collect();
    let per_frame = per_frame?;

    let mut stats = ChannelStats::default();
    for (_, s) in &per_frame {
        stats.merge(s);
    }
    let pooled: Vec<(Vec<Detection>, Vec<BoxGt>)> = per_frame
        .iter()
        .zip(frames)
        .map(|((dets, _), f)| (dets.clone(), f.gts.clone()))
        .collect();

    let mut entries = Vec::new();
    for iou in [0.5, 0.7] {
        entries.push(ApEntry {
            iou,
            bucket: "overall".into(),
            ap: ap_pooled(&pooled, iou),
            n_gt: pooled.iter().map(|(_, g)| g.len()).sum(),
        });
        for (name, lo, hi) in BUCKETS {
            let filtered: Vec<(Vec<Detection>, Vec<BoxGt>)> = pooled
                .iter()
                .map(|(dets, gts)| {
                    let in_bucket = |x: f64, y: f64| {
                        let d = x.hypot(y);
                        d >= lo && d < hi
                    };
                    (
                        dets.iter().filter(|d| in_bucket(d.x, d.y)).cloned().collect(),
                        gts.iter().filter(|g| in_bucket(g.x, g.y)).cloned().collect(),
                    )
                })
                .collect();
            entries.push(ApEntry {
                iou,
                bucket: name.into(),
                ap: ap_pooled(&filtered, iou),
                n_gt: filtered.iter().map(|(_, g)| g.len()).sum(),
            });
        }
    }

    let (params_total, params_trainable) = model.store.count_elements();
    let n_frames = frames.len().max(1);
    let report = EvalReport {
        mode: mode.as_str().into(),
        n_detections: pooled.iter().map(|(d, _)| d.len()).sum(),
        n_gts: pooled.iter().map(|(_, g)| g.len()).sum(),
        n_frames: frames.len(),
        am_mb: am_megabytes(&stats, n_frames)?,
        params_total,
        params_trainable,
        entries,
    };
    Ok((report, per_frame.into_iter().map(|(d, _)| d).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Pose2D;
    use crate::perception::ModelConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(x: f64, y: f64, l: f64, w: f64, yaw: f64, score: f64) -> Detection {
        Detection { x, y, length: l, width: w, yaw, score }
    }

    fn gt(x: f64, y: f64, l: f64, w: f64, yaw: f64) -> BoxGt {
        BoxGt { x, y, length: l, width: w, yaw }
    }

    #[test]
    fn iou_identical_and_disjoint() {
        let a = det(1.0, 2.0, 4.0, 2.0, 0.7, 1.0);
        assert!((rotated_iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = det(50.0, 2.0, 4.0, 2.0, 0.7, 1.0);
        assert_eq!(rotated_iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn iou_unit_squares_offset_half() {
        let a = det(0.0, 0.0, 1.0, 1.0, 0.0, 1.0);
        let b = det(0.5, 0.0, 1.0, 1.0, 0.0, 1.0);
        let iou = rotated_iou(&a, &b).unwrap();
        assert!((iou - 1.0 / 3.0).abs() < 1e-6, "iou {iou}");
    }

    /// Rasterization oracle: fraction of a fine grid inside both boxes.
    fn raster_iou(a: &Detection, b: &Detection, step: f64) -> f64 {
        let inside = |d: &Detection, x: f64, y: f64| {
            let (s, c) = d.yaw.sin_cos();
            let lx = c * (x - d.x) + s * (y - d.y);
            let ly = -s * (x - d.x) + c * (y - d.y);
            lx.abs() <= d.length / 2.0 && ly.abs() <= d.width / 2.0
        };
        let lo_x = (a.x - 4.0).min(b.x - 4.0);
        let hi_x = (a.x + 4.0).max(b.x + 4.0);
        let lo_y = (a.y - 4.0).min(b.y - 4.0);
        let hi_y = (a.y + 4.0).max(b.y + 4.0);
        let (mut inter, mut in_a, mut in_b) = (0u64, 0u64, 0u64);
        let mut x = lo_x + step / 2.0;
        while x < hi_x {
            let mut y = lo_y + step / 2.0;
            while y < hi_y {
                let ia = inside(a, x, y);
                let ib = inside(b, x, y);
                in_a += ia as u64;
                in_b += ib as u64;
                inter += (ia && ib) as u64;
                y += step;
            }
            x += step;
        }
        inter as f64 / (in_a + in_b - inter) as f64
    }

    #[test]
    fn iou_matches_rasterization_at_rotations() {
        let cases = [
            (det(0.0, 0.0, 1.0, 1.0, 0.0, 1.0), det(0.5, 0.0, 1.0, 1.0, std::f64::consts::FRAC_PI_4, 1.0)),
            (det(0.0, 0.0, 2.0, 1.0, 0.3, 1.0), det(0.4, 0.2, 1.5, 1.2, -0.9, 1.0)),
            (det(0.0, 0.0, 1.0, 1.0, std::f64::consts::FRAC_PI_4, 1.0), det(0.0, 0.0, 1.0, 1.0, 0.0, 1.0)),
        ];
        for (a, b) in cases {
            let exact = rotated_iou(&a, &b).unwrap();
            let approx = raster_iou(&a, &b, 1e-3);
            assert!((exact - approx).abs() < 1e-3, "exact {exact} raster {approx}");
        }
    }

    #[test]
    fn iou_invariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = det(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(1.0..5.0),
                rng.random_range(1.0..3.0),
                rng.random_range(-3.0..3.0),
                1.0,
            );
            let b = det(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(1.0..5.0),
                rng.random_range(1.0..3.0),
                rng.random_range(-3.0..3.0),
                1.0,
            );
            let ab = rotated_iou(&a, &b).unwrap();
            let ba = rotated_iou(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-9, "symmetry");
            assert!((0.0..=1.0).contains(&ab), "range");
            // Joint rigid motion.
            let pose = Pose2D::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-3.0..3.0));
            let mv = |d: &Detection| crate::fusion::transform_detection(d, pose, Pose2D::identity());
            let moved = rotated_iou(&mv(&a), &mv(&b)).unwrap();
            assert!((ab - moved).abs() < 1e-9, "rigid-motion invariance: {ab} vs {moved}");
        }
    }

    #[test]
    fn iou_rejects_degenerate_boxes() {
        let a = det(0.0, 0.0, 0.0, 1.0, 0.0, 1.0);
        let b = det(0.0, 0.0, 1.0, 1.0, 0.0, 1.0);
        assert!(matches!(rotated_iou(&a, &b), Err(EvalError::DegenerateBox)));
    }

    #[test]
    fn ap_single_true_positive() {
        let gts = vec![gt(0.0, 0.0, 4.0, 2.0, 0.0)];
        let dets = vec![det(0.1, 0.0, 4.0, 2.0, 0.0, 0.9)];
        assert_eq!(match_and_ap(&dets, &gts, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn ap_hand_enumerated_pr_curve() {
        // Two gts; det1 TP at 0.9, det2 FP at 0.8:
        // PR points (r=0.5, p=1.0), (r=0.5, p=0.5); all-point AP = 0.5.
        let gts = vec![gt(0.0, 0.0, 4.0, 2.0, 0.0), gt(20.0, 0.0, 4.0, 2.0, 0.0)];
        let dets = vec![det(0.0, 0.0, 4.0, 2.0, 0.0, 0.9), det(40.0, 0.0, 4.0, 2.0, 0.0, 0.8)];
        let ap = match_and_ap(&dets, &gts, 0.5).unwrap();
        assert!((ap - 0.5).abs() < 1e-12, "ap {ap}");
    }

    #[test]
    fn ap_empty_conventions() {
        assert_eq!(match_and_ap(&[], &[], 0.5).unwrap(), 1.0);
        assert_eq!(match_and_ap(&[det(0.0, 0.0, 1.0, 1.0, 0.0, 0.5)], &[], 0.5).unwrap(), 0.0);
        assert_eq!(match_and_ap(&[], &[gt(0.0, 0.0, 1.0, 1.0, 0.0)], 0.5).unwrap(), 0.0);
        assert!(match_and_ap(&[], &[], 0.0).is_err());
    }

    /// Independent oracle: a from-scratch greedy matcher plus direct PR
    /// integration by scanning recall levels.
    fn brute_force_ap(dets: &[Detection], gts: &[BoxGt], thresh: f64) -> f64 {
        if gts.is_empty() {
            return if dets.is_empty() { 1.0 } else { 0.0 };
        }
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&i, &j| dets[j].score.partial_cmp(&dets[i].score).unwrap().then(i.cmp(&j)));
        let mut used = vec![false; gts.len()];
        let mut tps = Vec::new();
        for &i in &order {
            let mut best = None;
            let mut best_iou = thresh;
            for (g, b) in gts.iter().enumerate() {
                if used[g] {
                    continue;
                }
                let iou = rotated_iou_det(&dets[i], &gt_as_det(b));
                if iou > best_iou || (iou == best_iou && iou >= thresh && best.is_none()) {
                    best = Some(g);
                    best_iou = iou;
                }
            }
            if let Some(g) = best {
                used[g] = true;
                tps.push(true);
            } else {
                tps.push(false);
            }
        }
        // Direct all-point integration: for each achieved recall level, the
        // best precision at recall >= r, summed over recall increments.
        let mut curve = Vec::new();
        let mut tp = 0.0;
        for (k, &is_tp) in tps.iter().enumerate() {
            if is_tp {
                tp += 1.0;
            }
            curve.push((tp / gts.len() as f64, tp / (k as f64 + 1.0)));
        }
        let recalls: Vec<f64> = curve.iter().map(|&(r, _)| r).collect();
        let mut ap = 0.0;
        let mut prev_r = 0.0;
        let mut uniq: Vec<f64> = recalls.clone();
        uniq.dedup();
        for r in uniq {
            if r <= prev_r {
                continue;
            }
            let best_p = curve.iter().filter(|&&(cr, _)| cr >= r).map(|&(_, p)| p).fold(0.0, f64::max);
            ap += (r - prev_r) * best_p;
            prev_r = r;
        }
        ap
    }

    #[test]
    fn ap_matches_brute_force_on_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for case in 0..60 {
            let n_gt = rng.random_range(0..=6);
            let n_det = rng.random_range(0..=6);
            let gts: Vec<BoxGt> = (0..n_gt)
                .map(|_| gt(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), 4.0, 2.0, rng.random_range(-1.0..1.0)))
                .collect();
            let dets: Vec<Detection> = (0..n_det)
                .map(|_| {
                    // Half the detections perturb a gt, half are noise.
                    if !gts.is_empty() && rng.random_range(0.0..1.0) < 0.5 {
                        let g = &gts[rng.random_range(0..gts.len())];
                        det(
                            g.x + rng.random_range(-1.0..1.0),
                            g.y + rng.random_range(-1.0..1.0),
                            4.0,
                            2.0,
                            g.yaw + rng.random_range(-0.2..0.2),
                            rng.random_range(0.1..1.0),
                        )
                    } else {
                        det(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), 4.0, 2.0, 0.0, rng.random_range(0.1..1.0))
                    }
                })
                .collect();
            let fast = match_and_ap(&dets, &gts, 0.5).unwrap();
            let slow = brute_force_ap(&dets, &gts, 0.5);
            assert!((fast - slow).abs() < 1e-9, "case {case}: {fast} vs {slow}");
        }
    }

    #[test]
    fn ap_invariant_under_monotone_score_rescaling() {
        let gts = vec![gt(0.0, 0.0, 4.0, 2.0, 0.0), gt(15.0, 3.0, 4.0, 2.0, 0.5)];
        let dets = vec![
            det(0.2, 0.1, 4.0, 2.0, 0.0, 0.9),
            det(15.1, 3.0, 4.0, 2.0, 0.5, 0.4),
            det(-8.0, 2.0, 4.0, 2.0, 0.0, 0.6),
        ];
        let base = match_and_ap(&dets, &gts, 0.5).unwrap();
        let rescaled: Vec<Detection> =
            dets.iter().map(|d| Detection { score: 0.1 + 0.5 * d.score.powi(3), ..*d }).collect();
        let after = match_and_ap(&rescaled, &gts, 0.5).unwrap();
        assert_eq!(base.to_bits(), after.to_bits());
    }

    fn tiny_coop_model(seed: u64) -> Model {
        let mut cfg = ModelConfig::tiny(8, 8, 4, 1);
        cfg.encoder.adapters = true;
        cfg.ssf = true;
        cfg.channel_adapter = true;
        cfg.compression_factor = 2;
        Model::new(cfg, seed)
    }

    fn tiny_frame(seed: u64, agents: usize) -> Frame {
        let cfg = crate::scenario::ScenarioConfig {
            bounds: (14.0, 14.0),
            objects: (3, 5),
            agents: (agents, agents),
            eval_range: 4.0,
            ..Default::default()
        };
        let world = crate::scenario::gen_world(seed, &cfg).unwrap();
        crate::scenario::frame_from_world(&world, &cfg)
    }

    #[test]
    fn no_fusion_equals_cooperative_with_zero_messages() {
        let model = tiny_coop_model(15);
        let frame = tiny_frame(16, 3);
        let opts = EvalOptions::default();
        let (a, stats_a) = run_frame(&model, &frame, PipelineMode::NoFusion, &opts).unwrap();
        let solo = EvalOptions { max_agents: Some(1), ..opts };
        let (b, stats_b) = run_frame(&model, &frame, PipelineMode::Cooperative, &solo).unwrap();
        assert_eq!(stats_a.messages, 0);
        assert_eq!(stats_b.messages, 0);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.score.to_bits(), y.score.to_bits());
            assert_eq!(x.x.to_bits(), y.x.to_bits());
            assert_eq!(x.yaw.to_bits(), y.yaw.to_bits());
        }
    }

    #[test]
    fn report_buckets_partition_the_gt_set() {
        let model = tiny_coop_model(17);
        let frames: Vec<Frame> = (0..3).map(|i| tiny_frame(20 + i, 2)).collect();
        let report = evaluate(&frames, &model, PipelineMode::Cooperative, &EvalOptions::default()).unwrap();
        for iou in [0.5, 0.7] {
            let overall = report.entries.iter().find(|e| e.iou == iou && e.bucket == "overall").unwrap();
            let bucket_sum: usize =
                report.entries.iter().filter(|e| e.iou == iou && e.bucket != "overall").map(|e| e.n_gt).sum();
            assert_eq!(overall.n_gt, bucket_sum);
            for e in report.entries.iter().filter(|e| e.iou == iou) {
                assert!((0.0..=1.0).contains(&e.ap), "ap out of range");
            }
        }
        assert_eq!(report.n_frames, 3);
        // CSV has a header plus one row per entry.
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 1 + report.entries.len());
    }

    #[test]
    fn cooperative_counts_ego_download_bytes() {
        let model = tiny_coop_model(18);
        let frame = tiny_frame(19, 3);
        let (_, stats) = run_frame(&model, &frame, PipelineMode::Cooperative, &EvalOptions::default()).unwrap();
        assert_eq!(stats.messages, 2, "two senders, one message each");
        // 8x8 grid, latent channels = 4/2 = 2 at f32.
        assert_eq!(stats.payload_bytes, 2 * 8 * 8 * 2 * 4);
        let am = am_megabytes(&stats, 1).unwrap();
        assert!(am > 0.0);
    }

    #[test]
    fn late_and_early_pipelines_run() {
        let model = tiny_coop_model(22);
        let frame = tiny_frame(23, 2);
        for mode in [PipelineMode::LateFusion, PipelineMode::EarlyFusion] {
            let (dets, _) = run_frame(&model, &frame, mode, &EvalOptions::default()).unwrap();
            for d in &dets {
                assert!(d.score > 0.0 && d.score < 1.0);
                assert!(d.length > 0.0 && d.width > 0.0);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn iou_symmetric_and_bounded(
            x in -3.0f64..3.0, y in -3.0f64..3.0,
            l1 in 1.0f64..5.0, w1 in 1.0f64..3.0, yaw1 in -3.0f64..3.0,
            l2 in 1.0f64..5.0, w2 in 1.0f64..3.0, yaw2 in -3.0f64..3.0,
        ) {
            let a = det(0.0, 0.0, l1, w1, yaw1, 1.0);
            let b = det(x, y, l2, w2, yaw2, 1.0);
            let ab = rotated_iou(&a, &b).unwrap();
            let ba = rotated_iou(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }
}
