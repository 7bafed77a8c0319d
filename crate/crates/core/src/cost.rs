//! Matching-cost construction and aggregation, probability conversion,
//! soft-argmin regression, entropy maps and entropy-weighted fusion of the
//! current and the warped previous cost volumes.

use ndarray::{Array2, Array3, ArrayView2, Axis, Zip};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::warp::{upsample_plane, DisparityMap, FeatureGrid, ScalarField};

/// Cost assigned to candidates whose match falls left of the right image.
pub const SENTINEL_COST: f64 = 1e4;

/// Per-pixel entropy of a probability column, in nats.
pub type EntropyMap = ScalarField;

/// Matching cost per `(candidate, row, column)`; lower is a better match.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    pub data: Array3<f64>,
    pub scale: usize,
}

impl CostVolume {
    pub fn new(data: Array3<f64>, scale: usize) -> Self {
        Self { data, scale }
    }

    pub fn candidates(&self) -> usize {
        self.data.dim().0
    }

    pub fn spatial_dim(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }
}

/// Softmax of negated costs over the candidate axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVolume {
    pub data: Array3<f64>,
}

impl ProbabilityVolume {
    pub fn candidates(&self) -> usize {
        self.data.dim().0
    }
}

fn check_window(window: usize) -> Result<usize> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::Parameter(format!(
            "window must be a positive odd integer, got {window}"
        )));
    }
    Ok(window / 2)
}

/// Clipped box sum along one axis of a plane.
fn box_sum_axis(plane: &ArrayView2<f64>, radius: usize, axis: Axis) -> Array2<f64> {
    let (h, w) = plane.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (c, n) = if axis == Axis(1) { (x, w) } else { (y, h) };
        let lo = c.saturating_sub(radius);
        let hi = (c + radius).min(n - 1);
        let mut acc = 0.0;
        for k in lo..=hi {
            acc += if axis == Axis(1) { plane[[y, k]] } else { plane[[k, x]] };
        }
        acc
    })
}

/// Mean over the in-bounds `mask`ed cells of a square window. Cells whose
/// window holds no masked cell are `None`.
fn masked_box_mean(values: &Array2<f64>, mask: &Array2<bool>, radius: usize) -> Array2<Option<f64>> {
    if radius == 0 {
        return Zip::from(values)
            .and(mask)
            .map_collect(|&v, &m| m.then_some(v));
    }
    let weighted = Zip::from(values)
        .and(mask)
        .map_collect(|&v, &m| if m { v } else { 0.0 });
    let counts = mask.mapv(|m| if m { 1.0 } else { 0.0 });
    let sums = box_sum_axis(&box_sum_axis(&weighted.view(), radius, Axis(1)).view(), radius, Axis(0));
    let norms = box_sum_axis(&box_sum_axis(&counts.view(), radius, Axis(1)).view(), radius, Axis(0));
    Zip::from(&sums)
        .and(&norms)
        .map_collect(|&s, &n| (n > 0.0).then(|| s / n))
}

/// Window-mean absolute difference between left features and right
/// features shifted by each candidate disparity.
///
/// Candidates whose match column `x - d` is negative hold [`SENTINEL_COST`].
/// Window cells whose own match is out of range are left out of the mean.
pub fn build_cost_volume(
    left: &FeatureGrid,
    right: &FeatureGrid,
    max_disparity: usize,
    window: usize,
) -> Result<CostVolume> {
    if left.data.dim() != right.data.dim() {
        return Err(Error::Dimension(format!(
            "left features {:?} vs right {:?}",
            left.data.dim(),
            right.data.dim()
        )));
    }
    let radius = check_window(window)?;
    let (c, h, w) = left.data.dim();
    if max_disparity == 0 || max_disparity > w {
        return Err(Error::Parameter(format!(
            "disparity range {max_disparity} must be in 1..={w}"
        )));
    }
    let planes: Vec<Array2<f64>> = (0..max_disparity)
        .into_par_iter()
        .map(|d| {
            let mut ad = Array2::zeros((h, w));
            let mut mask = Array2::from_elem((h, w), false);
            for y in 0..h {
                for x in d..w {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        acc += (left.data[[ch, y, x]] - right.data[[ch, y, x - d]]).abs();
                    }
                    ad[[y, x]] = acc;
                    mask[[y, x]] = true;
                }
            }
            let mean = masked_box_mean(&ad, &mask, radius);
            Array2::from_shape_fn((h, w), |(y, x)| {
                if x < d {
                    SENTINEL_COST
                } else {
                    mean[[y, x]].unwrap_or(SENTINEL_COST)
                }
            })
        })
        .collect();
    let mut data = Array3::zeros((max_disparity, h, w));
    for (d, plane) in planes.into_iter().enumerate() {
        data.index_axis_mut(Axis(0), d).assign(&plane);
    }
    Ok(CostVolume::new(data, left.scale))
}

/// Box filter over each disparity plane. Sentinel cells neither contribute
/// to nor receive the mean.
pub fn aggregate_cost(cost: &CostVolume, window: usize) -> Result<CostVolume> {
    let radius = check_window(window)?;
    let (dn, h, w) = cost.data.dim();
    let planes: Vec<Array2<f64>> = cost
        .data
        .axis_iter(Axis(0))
        .into_par_iter()
        .map(|plane| {
            let plane = plane.to_owned();
            let mask = plane.mapv(|v| v < SENTINEL_COST);
            let mean = masked_box_mean(&plane, &mask, radius);
            Zip::from(&plane)
                .and(&mask)
                .and(&mean)
                .map_collect(|&v, &m, &avg| if m { avg.unwrap_or(v) } else { v })
        })
        .collect();
    let mut data = Array3::zeros((dn, h, w));
    for (d, plane) in planes.into_iter().enumerate() {
        data.index_axis_mut(Axis(0), d).assign(&plane);
    }
    Ok(CostVolume::new(data, cost.scale))
}

/// `p(d) = softmax_d(-cost(d) / temperature)` for every pixel column.
pub fn cost_to_probability(cost: &CostVolume, temperature: f64) -> Result<ProbabilityVolume> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let mut data = cost.data.mapv(|c| -c / temperature);
    data.lanes_mut(Axis(0)).into_iter().for_each(|mut col| {
        let max = col.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        col.mapv_inplace(|v| (v - max).exp());
        let total = col.sum();
        col.mapv_inplace(|v| v / total);
    });
    Ok(ProbabilityVolume { data })
}

/// Expected candidate index under the probability column. Values are in
/// the volume's own pixel units.
pub fn soft_argmin(prob: &ProbabilityVolume) -> DisparityMap {
    let data = prob
        .data
        .lanes(Axis(0))
        .into_iter()
        .map(|col| col.iter().enumerate().map(|(d, &p)| d as f64 * p).sum::<f64>())
        .collect::<Vec<_>>();
    let (_, h, w) = prob.data.dim();
    DisparityMap::dense(Array2::from_shape_vec((h, w), data).expect("lane count matches"))
}

/// Shannon entropy (natural log) of each probability column, with
/// `0 ln 0 = 0`. Rounding noise is clamped into `[0, ln D]`.
pub fn entropy_map(prob: &ProbabilityVolume) -> EntropyMap {
    let max = (prob.candidates() as f64).ln();
    let data = prob
        .data
        .lanes(Axis(0))
        .into_iter()
        .map(|col| {
            let e: f64 = col
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum();
            e.clamp(0.0, max)
        })
        .collect::<Vec<_>>();
    let (_, h, w) = prob.data.dim();
    EntropyMap::dense(Array2::from_shape_vec((h, w), data).expect("lane count matches"))
}

/// Entropy-weighted blend of the current and warped previous costs.
///
/// Per pixel, `(w_cur, w_prev) = softmax(-sharpness * (e_cur, e_prev))`.
/// The previous volume is ignored (`w_prev = 0`) wherever `prev_validity`
/// or the warped previous entropy is invalid, and wherever the current cost
/// is a sentinel.
pub fn reliability_fuse(
    current: &CostVolume,
    warped_prev: &CostVolume,
    e_current: &EntropyMap,
    e_prev_warped: &EntropyMap,
    prev_validity: &Array3<bool>,
    sharpness: f64,
) -> Result<CostVolume> {
    let dim = current.data.dim();
    let (_, h, w) = dim;
    if warped_prev.data.dim() != dim
        || prev_validity.dim() != dim
        || e_current.dim() != (h, w)
        || e_prev_warped.dim() != (h, w)
    {
        return Err(Error::Dimension(format!(
            "fusion inputs disagree: cost {dim:?}, previous {:?}, validity {:?}, entropies {:?}/{:?}",
            warped_prev.data.dim(),
            prev_validity.dim(),
            e_current.dim(),
            e_prev_warped.dim()
        )));
    }
    if !(sharpness > 0.0) {
        return Err(Error::Parameter(format!(
            "sharpness must be positive, got {sharpness}"
        )));
    }
    // w_prev = 1 / (1 + exp(sharpness * (e_prev - e_cur)))
    let w_prev = Zip::from(&e_current.data)
        .and(&e_prev_warped.data)
        .map_collect(|&ec, &ep| 1.0 / (1.0 + (sharpness * (ep - ec)).exp()));
    let mut data = current.data.clone();
    Zip::indexed(&mut data)
        .and(&warped_prev.data)
        .and(prev_validity)
        .for_each(|(_, y, x), out, &prev, &valid| {
            let cur = *out;
            if !valid || !e_prev_warped.validity[[y, x]] || cur >= SENTINEL_COST {
                return;
            }
            let wp = w_prev[[y, x]];
            *out = (1.0 - wp) * cur + wp * prev;
        });
    Ok(CostVolume::new(data, current.scale))
}

/// Bilinear upsampling of a disparity map by `factor`, converting values
/// to the finer pixel units.
pub fn upsample_disparity(disp: &DisparityMap, factor: usize, height: usize, width: usize) -> DisparityMap {
    if factor == 1 && disp.dim() == (height, width) {
        return disp.clone();
    }
    let data = upsample_plane(&disp.data, factor, height, width) * factor as f64;
    let validity = Array2::from_shape_fn((height, width), |(y, x)| {
        let (ch, cw) = disp.dim();
        disp.validity[[(y / factor).min(ch - 1), (x / factor).min(cw - 1)]]
    });
    DisparityMap { data, validity }
}
