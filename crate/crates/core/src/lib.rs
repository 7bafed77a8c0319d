//! Temporal stereo matching for event cameras.
//!
//! Events are binned into voxel grids, matched across views with a cost
//! volume, and carried through time by a stereoscopic flow that warps both
//! features and costs from the previous step.

pub mod config;
pub mod cost;
pub mod engine;
pub mod error;
pub mod event;
pub mod flow;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod synth;
pub mod warp;

pub use config::{Mode, RunConfig};
pub use cost::{CostVolume, ProbabilityVolume, SENTINEL_COST};
pub use engine::{run_sequence, step, StepOutput, StereoFrame, TemporalState};
pub use error::{Error, Result};
pub use event::{voxelize, Event, EventStream, Polarity, VoxelGrid};
pub use flow::{estimate_flow, EpipolarConstraint, FlowEstimate, FlowEstimatorConfig};
pub use metrics::{evaluate, CameraIntrinsics, MetricReport};
pub use synth::{render_sequence, OracleFrame, PlaneSpec, SceneSpec};
pub use warp::{DisparityMap, FeatureGrid, ScalarField, StereoscopicFlow};
