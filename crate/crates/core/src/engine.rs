//! Per-timestep orchestration of the temporal stereo pipeline.
//!
//! One step: voxelize both views and pool them to the working scale;
//! estimate stereoscopic flow against the stored previous features; warp
//! and fuse the previous features; build, aggregate and regress the cost
//! volume; warp the previous cost and entropy and fuse by entropy; regress
//! the final disparity and upsample it to sensor resolution.
//!
//! [`TemporalState`] holds a fixed set of grids whose size depends only on
//! the configuration, never on how many steps have run.

use std::time::{Duration, Instant};

use ndarray::{Array2, Zip};
use serde::Serialize;

use crate::config::RunConfig;
use crate::cost::{
    aggregate_cost, build_cost_volume, cost_to_probability, entropy_map, reliability_fuse, soft_argmin,
    upsample_disparity, CostVolume, EntropyMap,
};
use crate::error::{Error, Result};
use crate::event::{downsample_grid, voxelize, EventStream};
use crate::flow::{estimate_flow, FlowEstimate};
use crate::loss::{contrast_loss, smooth_l1, tdc_loss, total_loss, FlowTerms, StereoTerms, View};
use crate::metrics::{evaluate, MetricReport};
use crate::warp::{warp_features, warp_field, DisparityMap, FeatureGrid, StereoscopicFlow};
use crate::cost::SENTINEL_COST;

/// Information carried from one step to the next.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TemporalState {
    pub prev_left: Option<FeatureGrid>,
    pub prev_right: Option<FeatureGrid>,
    pub prev_cost: Option<CostVolume>,
    pub prev_entropy: Option<EntropyMap>,
    /// Steps since the state was last cleared.
    pub age: usize,
}

/// Size summary of a [`TemporalState`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StateFootprint {
    pub fields_present: usize,
    pub cells: usize,
}

impl TemporalState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.prev_left.is_none() && self.prev_cost.is_none()
    }

    pub fn footprint(&self) -> StateFootprint {
        let sizes = [
            self.prev_left.as_ref().map(|g| g.data.len()),
            self.prev_right.as_ref().map(|g| g.data.len()),
            self.prev_cost.as_ref().map(|c| c.data.len()),
            self.prev_entropy.as_ref().map(|e| e.data.len()),
        ];
        StateFootprint {
            fields_present: sizes.iter().flatten().count(),
            cells: sizes.iter().flatten().sum(),
        }
    }
}

/// Ground truth available for a step, at sensor resolution.
#[derive(Debug, Clone, Copy)]
pub struct StepTruth<'a> {
    pub disparity: &'a DisparityMap,
    pub prev_disparity: Option<&'a DisparityMap>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub flow: Option<FlowTerms>,
    pub stereo: StereoTerms,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub losses: Option<LossReport>,
    pub metrics: Option<MetricReport>,
    /// Wall-clock time of the step; informational only.
    #[serde(skip)]
    pub elapsed: Duration,
    pub used_temporal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Final disparity at sensor resolution.
    pub disparity: DisparityMap,
    /// Regression from the initial (unaggregated) cost, sensor resolution.
    pub d0: DisparityMap,
    /// Regression from the aggregated current cost before temporal fusion.
    pub d1: DisparityMap,
    /// Flow at the working scale; zero on the first step.
    pub flow: StereoscopicFlow,
    pub flow_confident: Array2<bool>,
    /// Entropy of the final cost at the working scale.
    pub entropy: EntropyMap,
    pub diagnostics: StepDiagnostics,
}

/// Voxelizes a stream and pools it to the working scale. Each grid is
/// divided by its RMS so matching costs do not depend on event density.
pub fn features(stream: &EventStream, config: &RunConfig) -> Result<FeatureGrid> {
    let grid = voxelize(stream, config.bins)?;
    let mut pooled = downsample_grid(&grid, config.scale)?;
    let rms = (pooled.data.iter().map(|v| v * v).sum::<f64>() / pooled.data.len() as f64).sqrt();
    if rms > 0.0 {
        pooled.data.mapv_inplace(|v| v / rms);
    }
    Ok(pooled.into())
}

/// `(current + warped) / 2` where the warp is valid, else `current`.
fn fuse_features(current: &FeatureGrid, warped: &FeatureGrid, validity: &Array2<bool>) -> FeatureGrid {
    let mut out = current.clone();
    Zip::indexed(&mut out.data)
        .and(&warped.data)
        .for_each(|(_, y, x), c, &w| {
            if validity[[y, x]] {
                *c = 0.5 * (*c + w);
            }
        });
    out
}

fn check_pair(left: &EventStream, right: &EventStream) -> Result<()> {
    if left.t_start() != right.t_start() || left.t_end() != right.t_end() {
        return Err(Error::Sequencing(format!(
            "left window [{}, {}) differs from right window [{}, {})",
            left.t_start(),
            left.t_end(),
            right.t_start(),
            right.t_end()
        )));
    }
    if (left.width(), left.height()) != (right.width(), right.height()) {
        return Err(Error::Sequencing("left and right sensors differ in size".into()));
    }
    Ok(())
}

/// Runs one timestep, consuming the previous state and returning the next.
pub fn step(
    state: TemporalState,
    left: &EventStream,
    right: &EventStream,
    config: &RunConfig,
    truth: Option<StepTruth<'_>>,
) -> Result<(StepOutput, TemporalState)> {
    step_with_flow(state, left, right, config, truth, None)
}

/// [`step`] with an externally supplied working-scale flow in place of the
/// estimate. The flow is ignored when the state is empty.
pub fn step_with_flow(
    state: TemporalState,
    left: &EventStream,
    right: &EventStream,
    config: &RunConfig,
    truth: Option<StepTruth<'_>>,
    flow: Option<&StereoscopicFlow>,
) -> Result<(StepOutput, TemporalState)> {
    let started = Instant::now();
    config.validate()?;
    check_pair(left, right)?;
    let (full_h, full_w) = (left.height(), left.width());
    let scale = config.scale;
    let candidates = config.working_disparities();

    let state = if config.reset_every > 0 && state.age >= config.reset_every {
        TemporalState::new()
    } else {
        state
    };

    let cur_left = features(left, config)?;
    let cur_right = features(right, config)?;
    let (h, w) = cur_left.spatial_dim();

    let estimate = match (&state.prev_left, &state.prev_right) {
        (Some(pl), Some(pr)) => {
            if pl.data.dim() != cur_left.data.dim() {
                return Err(Error::Sequencing("temporal state was built at another resolution".into()));
            }
            match flow {
                Some(f) => {
                    if f.dim() != (h, w) {
                        return Err(Error::Dimension(format!(
                            "supplied flow is {:?}, working grid is {h}x{w}",
                            f.dim()
                        )));
                    }
                    f.validate()?;
                    Some(FlowEstimate {
                        flow: f.clone(),
                        confident: Array2::from_elem((h, w), true),
                    })
                }
                None => Some(estimate_flow(pl, pr, &cur_left, &cur_right, &config.flow_config())?),
            }
        }
        _ => None,
    };

    let (fused_left, fused_right) = match (&estimate, &state.prev_left, &state.prev_right) {
        (Some(est), Some(pl), Some(pr)) if config.mode.warps_features() => {
            let f = &est.flow;
            let (wl, vl) = warp_features(pl, &f.dx_left, &f.dy)?;
            let (wr, vr) = warp_features(pr, &f.dx_right, f.right_vertical())?;
            (fuse_features(&cur_left, &wl, &vl), fuse_features(&cur_right, &wr, &vr))
        }
        _ => (cur_left, cur_right),
    };

    let initial = build_cost_volume(&fused_left, &fused_right, candidates, config.cost_window)?;
    let d0 = soft_argmin(&cost_to_probability(&initial, config.temperature)?);
    let cost = aggregate_cost(&initial, config.aggregation_window)?;
    let prob = cost_to_probability(&cost, config.temperature)?;
    let entropy = entropy_map(&prob);
    let d1 = soft_argmin(&prob);

    let mut used_temporal = false;
    let (final_cost, final_prob) = match (&estimate, &state.prev_cost, &state.prev_entropy) {
        (Some(est), Some(pc), Some(pe)) if config.mode.warps_cost() => {
            used_temporal = true;
            let f = &est.flow;
            let (warped, validity) = crate::warp::warp_cost_volume(pc, f)?;
            let warped_entropy = warp_field(pe, &f.dx_left, &f.dy)?;
            let fused = reliability_fuse(&cost, &warped, &entropy, &warped_entropy, &validity, config.sharpness)?;
            let p = cost_to_probability(&fused, config.temperature)?;
            (fused, p)
        }
        _ => (cost, prob),
    };
    used_temporal |= estimate.is_some() && config.mode.warps_features();
    let final_entropy = entropy_map(&final_prob);
    let disparity_work = soft_argmin(&final_prob);

    let up = |d: &DisparityMap| upsample_disparity(d, scale, full_h, full_w);
    let disparity = up(&disparity_work);
    let d0 = up(&d0);
    let d1 = up(&d1);

    let (flow, flow_confident) = match estimate {
        Some(est) => (est.flow, est.confident),
        None => (StereoscopicFlow::zeros(h, w, scale), Array2::from_elem((h, w), false)),
    };
    let has_flow = !state.is_empty();

    let (losses, metrics) = match truth {
        Some(t) => {
            let beta = config.weights.beta;
            let stereo = StereoTerms {
                d0: smooth_l1(&d0, t.disparity, beta)?.value,
                d1: smooth_l1(&d1, t.disparity, beta)?.value,
                d_final: smooth_l1(&disparity, t.disparity, beta)?.value,
            };
            let flow_terms = match (has_flow, t.prev_disparity) {
                (true, Some(prev)) => {
                    let full_flow = flow.upsample(scale, full_h, full_w);
                    Some(FlowTerms {
                        tdc: tdc_loss(&full_flow, prev, t.disparity, beta)?.value,
                        contrast: contrast_loss(left, &flow, View::Left)?,
                    })
                }
                _ => None,
            };
            let total = total_loss(&flow_terms.unwrap_or_default(), &stereo, &config.weights);
            let report = LossReport {
                flow: flow_terms,
                stereo,
                total,
            };
            let metrics = evaluate(&disparity, t.disparity, Some(&config.intrinsics()))?;
            (Some(report), Some(metrics))
        }
        None => (None, None),
    };

    let next = TemporalState {
        prev_left: Some(fused_left),
        prev_right: Some(fused_right),
        prev_cost: Some(final_cost),
        prev_entropy: Some(final_entropy.clone()),
        age: state.age + 1,
    };
    let output = StepOutput {
        disparity,
        d0,
        d1,
        flow,
        flow_confident,
        entropy: final_entropy,
        diagnostics: StepDiagnostics {
            losses,
            metrics,
            elapsed: started.elapsed(),
            used_temporal,
        },
    };
    Ok((output, next))
}

/// One stereo pair of event streams over a shared window.
#[derive(Debug, Clone)]
pub struct StereoFrame {
    pub left: EventStream,
    pub right: EventStream,
}

/// Folds [`step`] over the frames, threading the temporal state.
pub fn run_sequence(
    frames: &[StereoFrame],
    config: &RunConfig,
    gt: Option<&[DisparityMap]>,
) -> Result<Vec<StepOutput>> {
    if let Some(gt) = gt {
        if gt.len() != frames.len() {
            return Err(Error::Parameter(format!(
                "{} ground-truth maps for {} frames",
                gt.len(),
                frames.len()
            )));
        }
    }
    let mut state = TemporalState::new();
    let mut outputs = Vec::with_capacity(frames.len());
    for (k, frame) in frames.iter().enumerate() {
        let truth = gt.map(|g| StepTruth {
            disparity: &g[k],
            prev_disparity: k.checked_sub(1).map(|p| &g[p]),
        });
        let (out, next) = step(state, &frame.left, &frame.right, config, truth)?;
        outputs.push(out);
        state = next;
    }
    Ok(outputs)
}

/// Fraction of final-cost columns that can still match at candidate 0,
/// i.e. are not entirely sentinel. Always 1 for a well-formed volume.
pub fn computed_fraction(cost: &CostVolume) -> f64 {
    let (_, h, w) = cost.data.dim();
    let computed = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| cost.data[[0, y, x]] < SENTINEL_COST)
        .count();
    computed as f64 / (h * w) as f64
}
