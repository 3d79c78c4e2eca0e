//! Cooperative bird's-eye-view perception by parameter-efficient adaptation.
//!
//! A frozen single-agent LiDAR detector is extended to multi-vehicle
//! cooperative perception by training only small adapter modules: channel
//! bottleneck adapters (down-projection / GELU / up-projection) beside the
//! frozen sparse convolutions, per-channel scale-shift operators in the
//! prediction net, and a compression-decompression channel that carries
//! BEV feature maps between simulated vehicles as bit-exact messages.
//!
//! Module map:
//! - [`geom`] — point clouds, planar poses, voxel grids, sparse/dense containers
//! - [`autodiff`] — reverse-mode tape, named parameters, AdamW, cosine schedule
//! - [`nnops`] — differentiable primitives (submanifold/dense conv, GELU, ...)
//! - [`peft`] — adapter modules, variant construction, freeze partitioning
//! - [`perception`] — the detection model: encoder, heads, targets, loss, decode
//! - [`comms`] — the V2V feature channel: wire format, broadcast, byte accounting
//! - [`fusion`] — frame alignment and feature/cloud/box fusion strategies
//! - [`scenario`] — deterministic synthetic worlds and the LiDAR ray caster
//! - [`eval`] — rotated IoU, average precision, experiment reports
//! - [`train`] — the optimization loop shared by pretraining and fine-tuning

pub mod autodiff;
pub mod comms;
pub mod eval;
pub mod fusion;
pub mod geom;
pub mod nnops;
pub mod peft;
pub mod perception;
pub mod scenario;
pub mod train;
