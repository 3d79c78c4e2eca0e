//! Point clouds, planar poses, voxelization and the sparse/dense BEV
//! containers shared by every other module.
//!
//! The world is planar: vehicles live in SE(2), LiDAR returns carry a z
//! coordinate and an intensity but all gridding happens on 2D pillars.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Magic header of the binary point-cloud frame format.
pub const POINTCLOUD_MAGIC: &[u8; 8] = b"MACPPC01";

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("coordinate ({row}, {col}) outside grid extent {h}x{w}")]
    OutOfBounds { row: i64, col: i64, h: usize, w: usize },
    #[error("feature length {got} does not match channel count {expect}")]
    ChannelMismatch { got: usize, expect: usize },
    #[error("duplicate coordinate ({0}, {1})")]
    DuplicateCoord(i64, i64),
    #[error("bad point-cloud magic: expected {POINTCLOUD_MAGIC:?}, got {0:?}")]
    BadMagic([u8; 8]),
    #[error("point-cloud payload of {0} bytes is not a whole number of 16-byte records")]
    RaggedPayload(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One LiDAR return: position in meters plus unitless intensity in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

/// A set of LiDAR returns expressed in some agent's local frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Writes the binary frame format: 8-byte magic, then one 16-byte record
    /// per point holding (x, y, z, intensity) as little-endian f32.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), GeomError> {
        w.write_all(POINTCLOUD_MAGIC)?;
        let mut buf = Vec::with_capacity(self.points.len() * 16);
        for p in &self.points {
            buf.extend_from_slice(&(p.x as f32).to_le_bytes());
            buf.extend_from_slice(&(p.y as f32).to_le_bytes());
            buf.extend_from_slice(&(p.z as f32).to_le_bytes());
            buf.extend_from_slice(&(p.intensity as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, GeomError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != POINTCLOUD_MAGIC {
            return Err(GeomError::BadMagic(magic));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() % 16 != 0 {
            return Err(GeomError::RaggedPayload(payload.len()));
        }
        let points = payload
            .chunks_exact(16)
            .map(|rec| {
                let f = |i: usize| {
                    f32::from_le_bytes([rec[i], rec[i + 1], rec[i + 2], rec[i + 3]]) as f64
                };
                Point { x: f(0), y: f(4), z: f(8), intensity: f(12) }
            })
            .collect();
        Ok(Self { points })
    }

    pub fn save(&self, path: &Path) -> Result<(), GeomError> {
        let mut f = std::fs::File::create(path)?;
        self.write_to(&mut f)
    }

    pub fn load(path: &Path) -> Result<Self, GeomError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Planar vehicle pose; yaw is kept normalized to (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw: normalize_angle(yaw) }
    }

    pub fn identity() -> Self {
        Self { x: 0.0, y: 0.0, yaw: 0.0 }
    }

    /// Maps a point from this pose's local frame into the world frame.
    pub fn local_to_world(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (c * x - s * y + self.x, s * x + c * y + self.y)
    }

    /// Maps a world-frame point into this pose's local frame.
    pub fn world_to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let dx = x - self.x;
        let dy = y - self.y;
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

/// Normalizes an angle to (-pi, pi].
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// BEV pillar grid layout: `origin` is the minimum (x, y) corner, cells are
/// half-open (points landing exactly on a cell's max boundary fall into the
/// next cell, and outside the extent they are dropped). Rows index y,
/// columns index x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelConfig {
    pub origin: (f64, f64),
    pub cell: (f64, f64),
    pub extent: (usize, usize),
    pub channels: usize,
}

impl VoxelConfig {
    /// Desk-scale default: 0.5 m pillars on a 128x128 grid centered on the
    /// agent, two feature channels per pillar.
    pub fn desk() -> Self {
        Self { origin: (-32.0, -32.0), cell: (0.5, 0.5), extent: (128, 128), channels: 2 }
    }

    pub fn is_valid(&self) -> bool {
        self.cell.0 > 0.0 && self.cell.1 > 0.0 && self.extent.0 >= 1 && self.extent.1 >= 1
    }

    /// Cell coordinates of a planar point, or None when out of extent.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(i64, i64)> {
        let col = ((x - self.origin.0) / self.cell.0).floor();
        let row = ((y - self.origin.1) / self.cell.1).floor();
        if row < 0.0 || col < 0.0 || row >= self.extent.0 as f64 || col >= self.extent.1 as f64 {
            return None;
        }
        Some((row as i64, col as i64))
    }

    /// Planar position of a cell's center.
    pub fn cell_center(&self, row: i64, col: i64) -> (f64, f64) {
        (
            self.origin.0 + (col as f64 + 0.5) * self.cell.0,
            self.origin.1 + (row as f64 + 0.5) * self.cell.1,
        )
    }
}

/// Occupied integer grid sites with per-site feature vectors and an O(1)
/// average coordinate index.
#[derive(Debug, Clone)]
pub struct SparseTensor {
    coords: Vec<(i64, i64)>,
    feats: Vec<f64>,
    index: HashMap<(i64, i64), usize>,
    channels: usize,
}

impl SparseTensor {
    pub fn empty(channels: usize) -> Self {
        Self { coords: Vec::new(), feats: Vec::new(), index: HashMap::new(), channels }
    }

    pub fn new(coords: Vec<(i64, i64)>, feats: Vec<f64>, channels: usize) -> Result<Self, GeomError> {
        if feats.len() != coords.len() * channels {
            return Err(GeomError::ChannelMismatch { got: feats.len(), expect: coords.len() * channels });
        }
        let mut index = HashMap::with_capacity(coords.len());
        for (slot, &rc) in coords.iter().enumerate() {
            if index.insert(rc, slot).is_some() {
                return Err(GeomError::DuplicateCoord(rc.0, rc.1));
            }
        }
        Ok(Self { coords, feats, index, channels })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn coords(&self) -> &[(i64, i64)] {
        &self.coords
    }

    pub fn feats(&self) -> &[f64] {
        &self.feats
    }

    pub fn feat(&self, slot: usize) -> &[f64] {
        &self.feats[slot * self.channels..(slot + 1) * self.channels]
    }

    /// Slot of a coordinate, if occupied.
    pub fn lookup(&self, row: i64, col: i64) -> Option<usize> {
        self.index.get(&(row, col)).copied()
    }

    /// Same coordinate set, new features (used by feature-space ops that
    /// preserve the occupancy pattern).
    pub fn with_feats(&self, feats: Vec<f64>, channels: usize) -> Result<Self, GeomError> {
        if feats.len() != self.coords.len() * channels {
            return Err(GeomError::ChannelMismatch { got: feats.len(), expect: self.coords.len() * channels });
        }
        Ok(Self { coords: self.coords.clone(), feats, index: self.index.clone(), channels })
    }
}

/// Dense row-major H x W x C feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl DenseGrid {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c, data: vec![0.0; h * w * c] }
    }

    pub fn from_data(h: usize, w: usize, c: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w * c, "value count must equal H*W*C");
        Self { h, w, c, data }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.w + col) * self.c + ch]
    }

    #[inline]
    pub fn at_mut(&mut self, row: usize, col: usize, ch: usize) -> &mut f64 {
        &mut self.data[(row * self.w + col) * self.c + ch]
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let base = (row * self.w + col) * self.c;
        &self.data[base..base + self.c]
    }
}

/// Rigid SE(2) change of frame applied to (x, y); z and intensity pass
/// through untouched.
pub fn transform_points(cloud: &PointCloud, from: Pose2D, to: Pose2D) -> PointCloud {
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let (wx, wy) = from.local_to_world(p.x, p.y);
            let (lx, ly) = to.world_to_local(wx, wy);
            Point { x: lx, y: ly, z: p.z, intensity: p.intensity }
        })
        .collect();
    PointCloud { points }
}

/// Bins points into pillars. Per occupied pillar the feature vector is
/// `[min(n/16, 1), mean intensity]`; points outside the extent are dropped.
pub fn voxelize(cloud: &PointCloud, cfg: &VoxelConfig) -> SparseTensor {
    debug_assert!(cfg.is_valid());
    let mut index: HashMap<(i64, i64), usize> = HashMap::new();
    let mut coords: Vec<(i64, i64)> = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    let mut intensity_sums: Vec<f64> = Vec::new();
    for p in &cloud.points {
        let Some(rc) = cfg.cell_of(p.x, p.y) else { continue };
        let slot = *index.entry(rc).or_insert_with(|| {
            coords.push(rc);
            counts.push(0.0);
            intensity_sums.push(0.0);
            coords.len() - 1
        });
        counts[slot] += 1.0;
        intensity_sums[slot] += p.intensity;
    }
    let mut feats = Vec::with_capacity(coords.len() * 2);
    for slot in 0..coords.len() {
        feats.push((counts[slot] / 16.0).min(1.0));
        feats.push(intensity_sums[slot] / counts[slot]);
    }
    SparseTensor { coords, feats, index, channels: 2 }
}

/// Scatters occupied sites onto a dense grid; everything else is zero.
pub fn to_dense(st: &SparseTensor, cfg: &VoxelConfig) -> Result<DenseGrid, GeomError> {
    let (h, w) = cfg.extent;
    let c = st.channels;
    let mut grid = DenseGrid::zeros(h, w, c);
    for (slot, &(row, col)) in st.coords.iter().enumerate() {
        if row < 0 || col < 0 || row >= h as i64 || col >= w as i64 {
            return Err(GeomError::OutOfBounds { row, col, h, w });
        }
        let base = ((row as usize) * w + col as usize) * c;
        grid.data[base..base + c].copy_from_slice(st.feat(slot));
    }
    Ok(grid)
}
