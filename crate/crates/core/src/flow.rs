//! Block-matching estimator for stereoscopic flow.
//!
//! Under the hard epipolar constraint the two views are scored jointly:
//! each candidate `(dx_left, dx_right, dy)` costs the left SAD at
//! `(dy, dx_left)` plus the right SAD at `(dy, dx_right)`, so a single
//! vertical displacement has to explain both views. The soft variant
//! matches each view on its own and returns a separate right vertical
//! plane.

use ndarray::{Array2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::warp::{FeatureGrid, StereoscopicFlow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpipolarConstraint {
    /// One vertical plane shared by both views.
    #[default]
    Hard,
    /// Independent per-view estimation.
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowEstimatorConfig {
    pub search_radius: usize,
    /// Odd block side length.
    pub block: usize,
    pub constraint: EpipolarConstraint,
}

impl Default for FlowEstimatorConfig {
    fn default() -> Self {
        Self {
            search_radius: 4,
            block: 9,
            constraint: EpipolarConstraint::Hard,
        }
    }
}

/// Estimated flow plus a mask of pixels that had texture to match.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowEstimate {
    pub flow: StereoscopicFlow,
    pub confident: Array2<bool>,
}

/// Joint (hard-constraint) estimate with the given search radius and block.
pub fn estimate_stereoscopic_flow(
    prev_left: &FeatureGrid,
    prev_right: &FeatureGrid,
    cur_left: &FeatureGrid,
    cur_right: &FeatureGrid,
    search_radius: usize,
    block: usize,
) -> Result<FlowEstimate> {
    let config = FlowEstimatorConfig {
        search_radius,
        block,
        constraint: EpipolarConstraint::Hard,
    };
    estimate_flow(prev_left, prev_right, cur_left, cur_right, &config)
}

pub fn estimate_flow(
    prev_left: &FeatureGrid,
    prev_right: &FeatureGrid,
    cur_left: &FeatureGrid,
    cur_right: &FeatureGrid,
    config: &FlowEstimatorConfig,
) -> Result<FlowEstimate> {
    let dim = cur_left.data.dim();
    for (name, g) in [("previous left", prev_left), ("previous right", prev_right), ("current right", cur_right)] {
        if g.data.dim() != dim {
            return Err(Error::Dimension(format!(
                "{name} features are {:?}, expected {dim:?}",
                g.data.dim()
            )));
        }
    }
    if config.block == 0 || config.block.is_multiple_of(2) {
        return Err(Error::Parameter(format!(
            "block size must be a positive odd integer, got {}",
            config.block
        )));
    }
    let left = SadTable::build(prev_left, cur_left, config.search_radius, config.block);
    let right = SadTable::build(prev_right, cur_right, config.search_radius, config.block);
    let (_, h, w) = dim;
    let r = config.search_radius as isize;

    let rows: Vec<Vec<PixelFlow>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let left_ok = left.energy[[y, x]] > 0.0;
                    let right_ok = right.energy[[y, x]] > 0.0;
                    let mut px = PixelFlow {
                        confident: left_ok && right_ok,
                        ..PixelFlow::default()
                    };
                    match config.constraint {
                        EpipolarConstraint::Hard => {
                            if !(left_ok || right_ok) {
                                return px;
                            }
                            let (dy, dxl, dxr) = joint_argmin(&left, &right, y, x, r);
                            let sub_y = refine(|k| Some(left.at(y, x, k, dxl)? + right.at(y, x, k, dxr)?), dy);
                            px.dx_left = dxl as f64 + left.refine_x(y, x, dy, dxl);
                            px.dx_right = dxr as f64 + right.refine_x(y, x, dy, dxr);
                            px.dy = dy as f64 + sub_y;
                            px.dy_right = px.dy;
                        }
                        EpipolarConstraint::Soft => {
                            if left_ok {
                                let (dy, dx) = left.argmin(y, x, r);
                                px.dx_left = dx as f64 + left.refine_x(y, x, dy, dx);
                                px.dy = dy as f64 + left.refine_y(y, x, dy, dx);
                            }
                            if right_ok {
                                let (dy, dx) = right.argmin(y, x, r);
                                px.dx_right = dx as f64 + right.refine_x(y, x, dy, dx);
                                px.dy_right = dy as f64 + right.refine_y(y, x, dy, dx);
                            }
                        }
                    }
                    px
                })
                .collect()
        })
        .collect();

    let mut flow = StereoscopicFlow::zeros(h, w, cur_left.scale);
    let mut confident = Array2::from_elem((h, w), false);
    let mut dy_right = Array2::zeros((h, w));
    for (y, row) in rows.into_iter().enumerate() {
        for (x, px) in row.into_iter().enumerate() {
            flow.dx_left[[y, x]] = px.dx_left;
            flow.dx_right[[y, x]] = px.dx_right;
            flow.dy[[y, x]] = px.dy;
            dy_right[[y, x]] = px.dy_right;
            confident[[y, x]] = px.confident;
        }
    }
    if config.constraint == EpipolarConstraint::Soft {
        flow.dy_right = Some(dy_right);
    }
    Ok(FlowEstimate { flow, confident })
}

#[derive(Debug, Clone, Copy, Default)]
struct PixelFlow {
    dx_left: f64,
    dx_right: f64,
    dy: f64,
    dy_right: f64,
    confident: bool,
}

/// Block SAD of the current grid against the previous grid displaced by
/// every `(dy, dx)` in the search window.
struct SadTable {
    radius: isize,
    side: usize,
    /// Indexed by `(dy + r) * side + (dx + r)`.
    sad: Vec<Array2<f64>>,
    /// Block sum of |current|, zero for featureless blocks.
    energy: Array2<f64>,
}

impl SadTable {
    fn build(prev: &FeatureGrid, cur: &FeatureGrid, radius: usize, block: usize) -> Self {
        let (c, h, w) = cur.data.dim();
        let r = radius as isize;
        let side = 2 * radius + 1;
        let half = block / 2;
        let shifts: Vec<(isize, isize)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
            .collect();
        let sad = shifts
            .par_iter()
            .map(|&(dy, dx)| {
                let ad = Array2::from_shape_fn((h, w), |(y, x)| {
                    let py = y as isize + dy;
                    let px = x as isize + dx;
                    let inside = py >= 0 && px >= 0 && (py as usize) < h && (px as usize) < w;
                    let mut acc = 0.0;
                    for ch in 0..c {
                        let p = if inside { prev.data[[ch, py as usize, px as usize]] } else { 0.0 };
                        acc += (cur.data[[ch, y, x]] - p).abs();
                    }
                    acc
                });
                box_sum(&ad, half)
            })
            .collect();
        let magnitude = Array2::from_shape_fn((h, w), |(y, x)| {
            (0..c).map(|ch| cur.data[[ch, y, x]].abs()).sum::<f64>()
        });
        Self {
            radius: r,
            side,
            sad,
            energy: box_sum(&magnitude, half),
        }
    }

    fn at(&self, y: usize, x: usize, dy: isize, dx: isize) -> Option<f64> {
        if dy.abs() > self.radius || dx.abs() > self.radius {
            return None;
        }
        let idx = (dy + self.radius) as usize * self.side + (dx + self.radius) as usize;
        Some(self.sad[idx][[y, x]])
    }

    /// Best horizontal shift for a fixed vertical shift. Ties go to the
    /// smaller displacement.
    fn best_dx(&self, y: usize, x: usize, dy: isize, r: isize) -> (isize, f64) {
        let mut best: (isize, f64) = (0, f64::INFINITY);
        for dx in -r..=r {
            let s = self.at(y, x, dy, dx).expect("within radius");
            if s < best.1 || (s == best.1 && dx.abs() < best.0.abs()) {
                best = (dx, s);
            }
        }
        best
    }

    fn argmin(&self, y: usize, x: usize, r: isize) -> (isize, isize) {
        let mut best: (isize, isize, f64) = (0, 0, f64::INFINITY);
        for dy in -r..=r {
            let (dx, s) = self.best_dx(y, x, dy, r);
            if s < best.2 || (s == best.2 && dy.abs() + dx.abs() < best.0.abs() + best.1.abs()) {
                best = (dy, dx, s);
            }
        }
        (best.0, best.1)
    }

    fn refine_x(&self, y: usize, x: usize, dy: isize, dx: isize) -> f64 {
        refine(|k| self.at(y, x, dy, k), dx)
    }

    fn refine_y(&self, y: usize, x: usize, dy: isize, dx: isize) -> f64 {
        refine(|k| self.at(y, x, k, dx), dy)
    }
}

fn joint_argmin(left: &SadTable, right: &SadTable, y: usize, x: usize, r: isize) -> (isize, isize, isize) {
    let mut best: (isize, isize, isize, f64) = (0, 0, 0, f64::INFINITY);
    for dy in -r..=r {
        let (dxl, sl) = left.best_dx(y, x, dy, r);
        let (dxr, sr) = right.best_dx(y, x, dy, r);
        let s = sl + sr;
        let mag = dy.abs() + dxl.abs() + dxr.abs();
        let best_mag = best.0.abs() + best.1.abs() + best.2.abs();
        if s < best.3 || (s == best.3 && mag < best_mag) {
            best = (dy, dxl, dxr, s);
        }
    }
    (best.0, best.1, best.2)
}

/// Parabolic sub-pixel offset around an integer minimum, in `[-0.5, 0.5]`.
/// Zero for an exact match, when a neighbour is outside the search window,
/// or when the fit is flat.
fn refine(score: impl Fn(isize) -> Option<f64>, at: isize) -> f64 {
    let (Some(lo), Some(mid), Some(hi)) = (score(at - 1), score(at), score(at + 1)) else {
        return 0.0;
    };
    let curvature = lo - 2.0 * mid + hi;
    if mid <= 0.0 || curvature <= 0.0 {
        return 0.0;
    }
    (0.5 * (lo - hi) / curvature).clamp(-0.5, 0.5)
}

/// Clipped square box sum with half-width `half`.
fn box_sum(plane: &Array2<f64>, half: usize) -> Array2<f64> {
    if half == 0 {
        return plane.clone();
    }
    let (h, w) = plane.dim();
    let mut rows = Array2::<f64>::zeros((h, w));
    Zip::indexed(&mut rows).for_each(|(y, x), v| {
        let lo = x.saturating_sub(half);
        let hi = (x + half).min(w - 1);
        *v = (lo..=hi).map(|k| plane[[y, k]]).sum();
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        let lo = y.saturating_sub(half);
        let hi = (y + half).min(h - 1);
        (lo..=hi).map(|k| rows[[k, x]]).sum()
    })
}
