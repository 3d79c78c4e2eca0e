//! Deterministic synthetic traffic worlds and the 2D LiDAR ray caster that
//! produces single-agent (pretraining) and cooperative (fine-tuning)
//! datasets with natural occlusion, plus the diagnostic and robustness
//! perturbations used by the experiment driver.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{GeomError, Point, PointCloud, Pose2D};
use crate::perception::BoxGt;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("failed to place {placed} of {requested} objects after {attempts} attempts")]
    PlacementFailed { placed: usize, requested: usize, attempts: usize },
    #[error("dataset manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Ray-caster settings shared by every agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub beams: usize,
    pub max_range: f64,
    pub range_noise: f64,
    pub dropout: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self { beams: 720, max_range: 60.0, range_noise: 0.02, dropout: 0.02 }
    }
}

/// World generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Field half-sizes in meters: objects/agents spawn in
    /// (-bounds.0/2, bounds.0/2) x (-bounds.1/2, bounds.1/2).
    pub bounds: (f64, f64),
    pub objects: (usize, usize),
    pub agents: (usize, usize),
    pub length_range: (f64, f64),
    pub width_range: (f64, f64),
    pub sensor: SensorConfig,
    /// Ground truth keeps objects whose center lies within this half-extent
    /// of the ego, matching the model grid.
    pub eval_range: f64,
    /// Optional spawn region ((x_lo, x_hi), (y_lo, y_hi)) for the ego
    /// (agent 0); used to build occlusion-heavy splits where the ego faces
    /// the scene from a disadvantaged viewpoint.
    #[serde(default)]
    pub ego_spawn: Option<((f64, f64), (f64, f64))>,
    /// Optional half-extent keeping the other agents within a square around
    /// the ego, so their views overlap the ego's evaluation range.
    #[serde(default)]
    pub partner_spread: Option<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            bounds: (120.0, 60.0),
            objects: (8, 24),
            agents: (2, 7),
            length_range: (3.5, 5.5),
            width_range: (1.6, 2.2),
            sensor: SensorConfig::default(),
            eval_range: 32.0,
            ego_spawn: None,
            partner_spread: None,
        }
    }
}

/// A static world snapshot: rectangular vehicles plus sensing agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub seed: u64,
    pub objects: Vec<BoxGt>,
    pub agents: Vec<Pose2D>,
}

/// One dataset sample: per-agent clouds in each agent's own frame, and
/// ground truth expressed in the ego frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Frame {
    pub poses: Vec<Pose2D>,
    pub clouds: Vec<PointCloud>,
    pub ego: usize,
    pub gts: Vec<BoxGt>,
}

/// Dataset flavor: one sensing agent per frame, or a cooperative group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Single,
    Cooperative,
}

/// splitmix64; used to derive independent per-frame and per-agent streams.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded world generation: places agents, then non-overlapping rectangular
/// vehicles by rejection sampling. Identical seeds produce bitwise-identical
/// worlds.
pub fn gen_world(seed: u64, cfg: &ScenarioConfig) -> Result<World, ScenarioError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (bx, by) = (cfg.bounds.0 / 2.0, cfg.bounds.1 / 2.0);
    let n_agents = rng.random_range(cfg.agents.0..=cfg.agents.1);
    let n_objects = rng.random_range(cfg.objects.0..=cfg.objects.1);

    let mut agents: Vec<Pose2D> = Vec::with_capacity(n_agents);
    for i in 0..n_agents {
        let (xr, yr) = match (i, &cfg.ego_spawn, &cfg.partner_spread) {
            (0, Some((xr, yr)), _) => (*xr, *yr),
            (_, _, Some(spread)) if i > 0 => {
                let ego = agents[0];
                (
                    ((ego.x - spread).max(-bx), (ego.x + spread).min(bx)),
                    ((ego.y - spread).max(-by), (ego.y + spread).min(by)),
                )
            }
            _ => ((-bx, bx), (-by, by)),
        };
        agents.push(Pose2D::new(
            rng.random_range(xr.0..xr.1),
            rng.random_range(yr.0..yr.1),
            rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        ));
    }

    let mut objects: Vec<BoxGt> = Vec::with_capacity(n_objects);
    let max_attempts = 200 * n_objects.max(1);
    let mut attempts = 0;
    while objects.len() < n_objects {
        if attempts >= max_attempts {
            return Err(ScenarioError::PlacementFailed { placed: objects.len(), requested: n_objects, attempts });
        }
        attempts += 1;
        let cand = BoxGt {
            x: rng.random_range(-bx..bx),
            y: rng.random_range(-by..by),
            length: rng.random_range(cfg.length_range.0..cfg.length_range.1),
            width: rng.random_range(cfg.width_range.0..cfg.width_range.1),
            yaw: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        };
        let clear_of_agents = agents.iter().all(|a| (a.x - cand.x).hypot(a.y - cand.y) > 4.0);
        let disjoint = objects
            .iter()
            .all(|o| crate::eval::rotated_iou(&det_of(o), &det_of(&cand)).unwrap_or(1.0) == 0.0);
        if clear_of_agents && disjoint {
            objects.push(cand);
        }
    }
    Ok(World { seed, objects, agents })
}

fn det_of(b: &BoxGt) -> crate::perception::Detection {
    crate::perception::Detection { x: b.x, y: b.y, length: b.length, width: b.width, yaw: b.yaw, score: 1.0 }
}

/// Ray/oriented-rectangle intersection: entry distance along the ray, if
/// the rectangle is hit in front of the origin.
fn ray_rect(ox: f64, oy: f64, dx: f64, dy: f64, rect: &BoxGt) -> Option<f64> {
    // Into the box frame.
    let (s, c) = rect.yaw.sin_cos();
    let rx = ox - rect.x;
    let ry = oy - rect.y;
    let lox = c * rx + s * ry;
    let loy = -s * rx + c * ry;
    let ldx = c * dx + s * dy;
    let ldy = -s * dx + c * dy;
    let (hx, hy) = (rect.length / 2.0, rect.width / 2.0);

    let mut tmin = f64::NEG_INFINITY;
    let mut tmax = f64::INFINITY;
    for (o, d, h) in [(lox, ldx, hx), (loy, ldy, hy)] {
        if d.abs() < 1e-12 {
            if o.abs() > h {
                return None;
            }
        } else {
            let t1 = (-h - o) / d;
            let t2 = (h - o) / d;
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            tmin = tmin.max(lo);
            tmax = tmax.min(hi);
            if tmin > tmax {
                return None;
            }
        }
    }
    (tmin > 1e-9).then_some(tmin)
}

/// Casts the agent's beam fan against every object; first hit wins, which
/// is what produces occlusion. Returns the cloud in the agent's own frame
/// plus the per-point source object index.
pub fn lidar_scan_with_hits(world: &World, agent: usize, cfg: &ScenarioConfig) -> (PointCloud, Vec<usize>) {
    let pose = world.agents[agent];
    let sensor = &cfg.sensor;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(world.seed, 0x5EED_0000 + agent as u64));
    let noise = Normal::new(0.0, sensor.range_noise).expect("valid noise sigma");
    let mut points = Vec::new();
    let mut hits = Vec::new();
    for beam in 0..sensor.beams {
        let phi = pose.yaw + 2.0 * std::f64::consts::PI * beam as f64 / sensor.beams as f64;
        let (s, c) = phi.sin_cos();
        let mut best: Option<(f64, usize)> = None;
        for (idx, obj) in world.objects.iter().enumerate() {
            if let Some(t) = ray_rect(pose.x, pose.y, c, s, obj) {
                if t <= sensor.max_range && best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t, idx));
                }
            }
        }
        let Some((t, idx)) = best else { continue };
        if sensor.dropout > 0.0 && rng.random_range(0.0..1.0) < sensor.dropout {
            continue;
        }
        let t = if sensor.range_noise > 0.0 { (t + noise.sample(&mut rng)).max(0.0) } else { t };
        let wx = pose.x + c * t;
        let wy = pose.y + s * t;
        let (lx, ly) = pose.world_to_local(wx, wy);
        points.push(Point {
            x: lx,
            y: ly,
            z: rng.random_range(0.2..1.8),
            intensity: rng.random_range(0.3..1.0),
        });
        hits.push(idx);
    }
    (PointCloud::new(points), hits)
}

/// The agent's LiDAR sweep in its own frame.
pub fn lidar_scan(world: &World, agent: usize, cfg: &ScenarioConfig) -> PointCloud {
    lidar_scan_with_hits(world, agent, cfg).0
}

/// Generates `n_frames` independent worlds and scans. Ground truth keeps
/// every object with at least one LiDAR return from any participating
/// agent and a center inside the ego-frame evaluation range; boxes are
/// expressed in the ego frame. Frames are generated in parallel from
/// per-frame derived seeds, so regeneration is bitwise identical.
pub fn make_dataset(kind: DatasetKind, n_frames: usize, seed: u64, cfg: &ScenarioConfig) -> Result<Vec<Frame>, ScenarioError> {
    let mut cfg = cfg.clone();
    if kind == DatasetKind::Single {
        cfg.agents = (1, 1);
    }
    (0..n_frames)
        .into_par_iter()
        .map(|i| {
            let world = gen_world(derive_seed(seed, i as u64), &cfg)?;
            Ok(frame_from_world(&world, &cfg))
        })
        .collect()
}

/// Scans every agent of a world and assembles the frame (ego = agent 0).
pub fn frame_from_world(world: &World, cfg: &ScenarioConfig) -> Frame {
    let ego = 0usize;
    let ego_pose = world.agents[ego];
    let mut clouds = Vec::with_capacity(world.agents.len());
    let mut visible: HashSet<usize> = HashSet::new();
    for agent in 0..world.agents.len() {
        let (cloud, hits) = lidar_scan_with_hits(world, agent, cfg);
        visible.extend(hits);
        clouds.push(cloud);
    }
    let mut gts = Vec::new();
    for (idx, obj) in world.objects.iter().enumerate() {
        if !visible.contains(&idx) {
            continue;
        }
        let (ex, ey) = ego_pose.world_to_local(obj.x, obj.y);
        if ex.abs() >= cfg.eval_range || ey.abs() >= cfg.eval_range {
            continue;
        }
        gts.push(BoxGt {
            x: ex,
            y: ey,
            length: obj.length,
            width: obj.width,
            yaw: crate::geom::normalize_angle(obj.yaw - ego_pose.yaw),
        });
    }
    Frame { poses: world.agents.clone(), clouds, ego, gts }
}

/// Removes every point whose (x, y) lies inside the axis-aligned square of
/// the given half extent around `center` (both in the cloud's own frame).
pub fn mask_fov(cloud: &PointCloud, center: (f64, f64), half_extent: f64) -> PointCloud {
    debug_assert!(half_extent > 0.0);
    PointCloud::new(
        cloud
            .points
            .iter()
            .copied()
            .filter(|p| (p.x - center.0).abs() > half_extent || (p.y - center.1).abs() > half_extent)
            .collect(),
    )
}

/// Signed-range histogram per agent role: per point, distance to the ego
/// with the sign of `heading . (p - ego)` (ties count as positive),
/// bucketed over [-max_range, max_range].
#[derive(Debug, Clone, Serialize)]
pub struct RangeHistogram {
    pub edges: Vec<f64>,
    /// counts[agent_role][bin]; role 0 is the ego.
    pub counts: Vec<Vec<u64>>,
}

pub fn signed_range_histogram(frames: &[Frame], bins: usize, max_range: f64) -> RangeHistogram {
    assert!(bins >= 2, "need at least two bins");
    let max_agents = frames.iter().map(|f| f.poses.len()).max().unwrap_or(0);
    let edges: Vec<f64> = (0..=bins).map(|i| -max_range + 2.0 * max_range * i as f64 / bins as f64).collect();
    let mut counts = vec![vec![0u64; bins]; max_agents];
    for frame in frames {
        let ego = frame.poses[frame.ego];
        let (hs, hc) = ego.yaw.sin_cos();
        for (role, (cloud, pose)) in frame.clouds.iter().zip(&frame.poses).enumerate() {
            for p in &cloud.points {
                let (wx, wy) = pose.local_to_world(p.x, p.y);
                let dx = wx - ego.x;
                let dy = wy - ego.y;
                let dist = dx.hypot(dy);
                let signed = if hc * dx + hs * dy >= 0.0 { dist } else { -dist };
                let t = (signed + max_range) / (2.0 * max_range);
                if (0.0..1.0).contains(&t) {
                    let bin = ((t * bins as f64) as usize).min(bins - 1);
                    counts[role][bin] += 1;
                }
            }
        }
    }
    RangeHistogram { edges, counts }
}

// ---------------------------------------------------------------------------
// On-disk dataset layout.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub kind: DatasetKind,
    pub n_frames: usize,
    pub scenario: ScenarioConfig,
    pub frames: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FrameMeta {
    ego: usize,
    poses: Vec<Pose2D>,
}

/// Writes a dataset directory: `manifest.json`, then per frame a directory
/// holding one binary cloud per agent, the poses, and the ground truth as
/// JSON lines.
pub fn save_dataset(
    dir: &Path,
    frames: &[Frame],
    seed: u64,
    kind: DatasetKind,
    cfg: &ScenarioConfig,
) -> Result<(), ScenarioError> {
    std::fs::create_dir_all(dir)?;
    let mut names = Vec::with_capacity(frames.len());
    for (i, frame) in frames.iter().enumerate() {
        let rel = format!("frames/{i:06}");
        let fdir = dir.join(&rel);
        std::fs::create_dir_all(&fdir)?;
        for (a, cloud) in frame.clouds.iter().enumerate() {
            cloud.save(&fdir.join(format!("agent_{a}.pc")))?;
        }
        let meta = FrameMeta { ego: frame.ego, poses: frame.poses.clone() };
        std::fs::write(fdir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
        let mut gt = Vec::new();
        for b in &frame.gts {
            serde_json::to_writer(&mut gt, b)?;
            gt.write_all(b"\n")?;
        }
        std::fs::write(fdir.join("gt.jsonl"), gt)?;
        names.push(rel);
    }
    let manifest = DatasetManifest { seed, kind, n_frames: frames.len(), scenario: cfg.clone(), frames: names };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest, ScenarioError> {
    let bytes = std::fs::read(dir.join("manifest.json"))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Frame>), ScenarioError> {
    let manifest = load_manifest(dir)?;
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for rel in &manifest.frames {
        let fdir = dir.join(rel);
        let meta: FrameMeta = serde_json::from_slice(&std::fs::read(fdir.join("meta.json"))?)?;
        let mut clouds = Vec::with_capacity(meta.poses.len());
        for a in 0..meta.poses.len() {
            clouds.push(PointCloud::load(&fdir.join(format!("agent_{a}.pc")))?);
        }
        let mut gts = Vec::new();
        for line in std::fs::read_to_string(fdir.join("gt.jsonl"))?.lines() {
            if !line.trim().is_empty() {
                gts.push(serde_json::from_str(line)?);
            }
        }
        frames.push(Frame { poses: meta.poses, clouds, ego: meta.ego, gts });
    }
    Ok((manifest, frames))
}
