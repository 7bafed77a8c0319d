//! Stereoscopic flow, backward warping of 2D fields and 3D cost volumes,
//! and the disparity bookkeeping derived from the flow.
//!
//! Conventions used throughout the crate:
//!
//! * `x` is the column (width) axis, `y` the row (height) axis.
//! * Disparity is non-negative; the right-image match of left pixel `(y, x)`
//!   with disparity `d` sits at column `x - d`.
//! * Flows are backward: the position of a point at `t-1` is its position at
//!   `t` plus the flow sampled at `t`.
//!
//! Samples are bilinear (trilinear for volumes). A sample whose position
//! falls outside the grid, or that touches an invalid input cell with a
//! non-zero weight, is written as `0` and flagged invalid.

use ndarray::{Array2, Array3, ArrayView2, Axis, Zip};
use rayon::prelude::*;

use crate::cost::{CostVolume, SENTINEL_COST};
use crate::error::{Error, Result};
use crate::event::{block_mean3, VoxelGrid};

/// A real-valued plane with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub data: Array2<f64>,
    pub validity: Array2<bool>,
}

/// Per-pixel disparity in pixels.
pub type DisparityMap = ScalarField;

impl ScalarField {
    /// A field that is valid everywhere.
    pub fn dense(data: Array2<f64>) -> Self {
        let validity = Array2::from_elem(data.dim(), true);
        Self { data, validity }
    }

    pub fn new(data: Array2<f64>, validity: Array2<bool>) -> Result<Self> {
        if data.dim() != validity.dim() {
            return Err(Error::Dimension(format!(
                "field {:?} vs validity {:?}",
                data.dim(),
                validity.dim()
            )));
        }
        Ok(Self { data, validity })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::dense(Array2::from_elem((height, width), value))
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn valid_count(&self) -> usize {
        self.validity.iter().filter(|&&v| v).count()
    }

    /// Cells that are valid in both fields.
    pub fn joint_validity(&self, other: &ScalarField) -> Array2<bool> {
        let mut out = self.validity.clone();
        Zip::from(&mut out)
            .and(&other.validity)
            .for_each(|a, &b| *a = *a && b);
        out
    }
}

/// Multi-channel feature map, `channels x height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub data: Array3<f64>,
    pub scale: usize,
}

impl FeatureGrid {
    pub fn new(data: Array3<f64>, scale: usize) -> Self {
        Self { data, scale }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn spatial_dim(&self) -> (usize, usize) {
        (self.height(), self.width())
    }
}

impl From<VoxelGrid> for FeatureGrid {
    fn from(grid: VoxelGrid) -> Self {
        Self {
            data: grid.data,
            scale: grid.scale,
        }
    }
}

/// Backward flow of a rectified stereo pair: one horizontal plane per view
/// and a vertical plane shared by both views.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoscopicFlow {
    pub dx_left: Array2<f64>,
    pub dx_right: Array2<f64>,
    pub dy: Array2<f64>,
    /// Separate right-view vertical flow. Only used to warp right features;
    /// `None` means the shared `dy` applies.
    pub dy_right: Option<Array2<f64>>,
    pub scale: usize,
}

impl StereoscopicFlow {
    pub fn zeros(height: usize, width: usize, scale: usize) -> Self {
        let z = Array2::zeros((height, width));
        Self {
            dx_left: z.clone(),
            dx_right: z.clone(),
            dy: z,
            dy_right: None,
            scale,
        }
    }

    /// Flow that is constant over the grid.
    pub fn constant(
        height: usize,
        width: usize,
        dx_left: f64,
        dx_right: f64,
        dy: f64,
        scale: usize,
    ) -> Self {
        Self {
            dx_left: Array2::from_elem((height, width), dx_left),
            dx_right: Array2::from_elem((height, width), dx_right),
            dy: Array2::from_elem((height, width), dy),
            dy_right: None,
            scale,
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.dx_left.dim()
    }

    /// Vertical flow used for the right view.
    pub fn right_vertical(&self) -> &Array2<f64> {
        self.dy_right.as_ref().unwrap_or(&self.dy)
    }

    pub fn has_shared_vertical(&self) -> bool {
        self.dy_right.is_none()
    }

    /// Checks that all planes share one shape and hold finite values.
    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        let planes = [
            ("dx_right", &self.dx_right),
            ("dy", &self.dy),
        ];
        for (name, p) in planes {
            if p.dim() != dim {
                return Err(Error::Dimension(format!(
                    "flow plane {name} is {:?}, expected {dim:?}",
                    p.dim()
                )));
            }
        }
        if let Some(p) = &self.dy_right {
            if p.dim() != dim {
                return Err(Error::Dimension(format!(
                    "flow plane dy_right is {:?}, expected {dim:?}",
                    p.dim()
                )));
            }
        }
        let all_finite = self
            .planes()
            .iter()
            .all(|p| p.iter().all(|v| v.is_finite()));
        if !all_finite {
            return Err(Error::Parameter("flow contains non-finite values".into()));
        }
        Ok(())
    }

    /// All stored planes in dump order: dx_left, dx_right, dy, then dy_right
    /// when present.
    pub fn planes(&self) -> Vec<&Array2<f64>> {
        let mut v = vec![&self.dx_left, &self.dx_right, &self.dy];
        if let Some(p) = &self.dy_right {
            v.push(p);
        }
        v
    }

    /// Block-averages the flow and converts it to the coarser pixel units.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        let pool = |p: &Array2<f64>| -> Result<Array2<f64>> {
            let stacked = p.clone().insert_axis(Axis(0));
            let pooled = block_mean3(&stacked, factor)?;
            Ok(pooled.index_axis_move(Axis(0), 0) / factor as f64)
        };
        Ok(Self {
            dx_left: pool(&self.dx_left)?,
            dx_right: pool(&self.dx_right)?,
            dy: pool(&self.dy)?,
            dy_right: self.dy_right.as_ref().map(pool).transpose()?,
            scale: self.scale * factor,
        })
    }

    /// Bilinear upsampling to a finer grid, with values converted to the
    /// finer pixel units.
    pub fn upsample(&self, factor: usize, height: usize, width: usize) -> Self {
        let up = |p: &Array2<f64>| upsample_plane(p, factor, height, width) * factor as f64;
        Self {
            dx_left: up(&self.dx_left),
            dx_right: up(&self.dx_right),
            dy: up(&self.dy),
            dy_right: self.dy_right.as_ref().map(up),
            scale: (self.scale / factor).max(1),
        }
    }
}

/// Bilinear upsampling of a plane with pixel-centre alignment: fine pixel
/// `x` maps to coarse coordinate `(x + 0.5) / factor - 0.5`, clamped to the
/// coarse grid.
pub fn upsample_plane(plane: &Array2<f64>, factor: usize, height: usize, width: usize) -> Array2<f64> {
    let (ch, cw) = plane.dim();
    let coord = |i: usize, n: usize| -> f64 {
        let c = (i as f64 + 0.5) / factor as f64 - 0.5;
        c.clamp(0.0, (n - 1) as f64)
    };
    Array2::from_shape_fn((height, width), |(y, x)| {
        let (y0, y1, fy) = axis_taps(coord(y, ch), ch).expect("clamped");
        let (x0, x1, fx) = axis_taps(coord(x, cw), cw).expect("clamped");
        let top = lerp(plane[[y0, x0]], plane[[y0, x1]], fx);
        let bottom = lerp(plane[[y1, x0]], plane[[y1, x1]], fx);
        lerp(top, bottom, fy)
    })
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a * (1.0 - t) + b * t
    }
}

/// Interpolation taps along one axis: lower index, upper index and the
/// fractional weight of the upper index. `None` when `pos` is outside
/// `[0, n - 1]`.
#[inline]
pub(crate) fn axis_taps(pos: f64, n: usize) -> Option<(usize, usize, f64)> {
    if n == 0 || !(pos >= 0.0) || pos > (n - 1) as f64 {
        return None;
    }
    let lower = pos.floor();
    let i0 = lower as usize;
    if i0 >= n - 1 {
        return Some((n - 1, n - 1, 0.0));
    }
    Some((i0, i0 + 1, pos - lower))
}

/// Bilinear sample of `plane` at `(y, x)`. Corners with zero weight are
/// ignored when checking `validity`.
#[inline]
pub(crate) fn sample_bilinear(
    plane: &ArrayView2<f64>,
    validity: Option<&ArrayView2<bool>>,
    y: f64,
    x: f64,
) -> Option<f64> {
    let (h, w) = plane.dim();
    let (y0, y1, fy) = axis_taps(y, h)?;
    let (x0, x1, fx) = axis_taps(x, w)?;
    if let Some(valid) = validity {
        let corners = [
            (y0, x0, true),
            (y0, x1, fx > 0.0),
            (y1, x0, fy > 0.0),
            (y1, x1, fx > 0.0 && fy > 0.0),
        ];
        if corners.iter().any(|&(r, c, used)| used && !valid[[r, c]]) {
            return None;
        }
    }
    let top = lerp(plane[[y0, x0]], plane[[y0, x1]], fx);
    let bottom = if fy > 0.0 {
        lerp(plane[[y1, x0]], plane[[y1, x1]], fx)
    } else {
        0.0
    };
    Some(lerp(top, bottom, fy))
}

fn check_flow_shape(what: &str, dim: (usize, usize), dx: &Array2<f64>, dy: &Array2<f64>) -> Result<()> {
    if dx.dim() != dim || dy.dim() != dim {
        return Err(Error::Dimension(format!(
            "{what} is {dim:?} but flow planes are {:?} / {:?}",
            dx.dim(),
            dy.dim()
        )));
    }
    Ok(())
}

/// Backward-warps every channel of `grid`:
/// `out(c, y, x) = grid(c, y + dy(y, x), x + dx(y, x))`.
pub fn warp_features(
    grid: &FeatureGrid,
    dx: &Array2<f64>,
    dy: &Array2<f64>,
) -> Result<(FeatureGrid, Array2<bool>)> {
    let (c, h, w) = grid.data.dim();
    check_flow_shape("feature grid", (h, w), dx, dy)?;
    let rows: Vec<(Vec<f64>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut vals = vec![0.0; c * w];
            let mut valid = vec![false; w];
            for x in 0..w {
                let sy = y as f64 + dy[[y, x]];
                let sx = x as f64 + dx[[y, x]];
                let (Some((y0, y1, fy)), Some((x0, x1, fx))) = (axis_taps(sy, h), axis_taps(sx, w))
                else {
                    continue;
                };
                valid[x] = true;
                for ch in 0..c {
                    let top = lerp(grid.data[[ch, y0, x0]], grid.data[[ch, y0, x1]], fx);
                    let bottom = lerp(grid.data[[ch, y1, x0]], grid.data[[ch, y1, x1]], fx);
                    vals[ch * w + x] = lerp(top, bottom, fy);
                }
            }
            (vals, valid)
        })
        .collect();
    let mut data = Array3::zeros((c, h, w));
    let mut validity = Array2::from_elem((h, w), false);
    for (y, (vals, valid)) in rows.into_iter().enumerate() {
        for x in 0..w {
            validity[[y, x]] = valid[x];
            for ch in 0..c {
                data[[ch, y, x]] = vals[ch * w + x];
            }
        }
    }
    Ok((FeatureGrid::new(data, grid.scale), validity))
}

/// Backward-warps a masked scalar field. Output cells are invalid when the
/// sample leaves the grid or touches an invalid input cell.
pub fn warp_field(field: &ScalarField, dx: &Array2<f64>, dy: &Array2<f64>) -> Result<ScalarField> {
    check_flow_shape("field", field.dim(), dx, dy)?;
    Ok(warp_plane_masked(&field.data.view(), Some(&field.validity.view()), dx, dy))
}

/// Backward-warps a plane that is valid everywhere.
pub fn warp_plane(plane: &Array2<f64>, dx: &Array2<f64>, dy: &Array2<f64>) -> Result<ScalarField> {
    check_flow_shape("plane", plane.dim(), dx, dy)?;
    Ok(warp_plane_masked(&plane.view(), None, dx, dy))
}

fn warp_plane_masked(
    plane: &ArrayView2<f64>,
    validity: Option<&ArrayView2<bool>>,
    dx: &Array2<f64>,
    dy: &Array2<f64>,
) -> ScalarField {
    let (h, w) = plane.dim();
    let rows: Vec<Vec<Option<f64>>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    sample_bilinear(
                        plane,
                        validity,
                        y as f64 + dy[[y, x]],
                        x as f64 + dx[[y, x]],
                    )
                })
                .collect()
        })
        .collect();
    let mut data = Array2::zeros((h, w));
    let mut valid = Array2::from_elem((h, w), false);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, s) in row.into_iter().enumerate() {
            if let Some(v) = s {
                data[[y, x]] = v;
                valid[[y, x]] = true;
            }
        }
    }
    ScalarField { data, validity: valid }
}

/// Per-candidate disparity change between `t` and `t-1`, `D x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityFlow {
    pub data: Array3<f64>,
    pub validity: Array3<bool>,
}

/// Disparity flow of every candidate: the left horizontal flow minus the
/// right horizontal flow read at the candidate's matching column,
/// `dd(d, y, x) = dx_left(y, x) - dx_right(y, x - d)`.
///
/// Adding `dd` to a current candidate gives the disparity of the same
/// tracked pair at `t-1`.
pub fn derive_disparity_flow(flow: &StereoscopicFlow, candidates: usize) -> Result<DisparityFlow> {
    flow.validate()?;
    if candidates == 0 {
        return Err(Error::Parameter("need at least one disparity candidate".into()));
    }
    let (h, w) = flow.dim();
    let mut data = Array3::zeros((candidates, h, w));
    let mut validity = Array3::from_elem((candidates, h, w), false);
    Zip::indexed(data.view_mut())
        .and(validity.view_mut())
        .par_for_each(|(d, y, x), out, valid| {
            let pos = x as f64 - d as f64;
            if let Some((x0, x1, fx)) = axis_taps(pos, w) {
                let right = lerp(flow.dx_right[[y, x0]], flow.dx_right[[y, x1]], fx);
                *out = flow.dx_left[[y, x]] - right;
                *valid = true;
            }
        });
    Ok(DisparityFlow { data, validity })
}

/// Aligns the previous cost volume to the current frame by trilinear
/// backward sampling at `(d + dd, y + dy, x + dx_left)`.
///
/// Cells whose disparity flow is undefined, whose sample leaves the volume,
/// or whose sample touches a sentinel (unmatchable) cell are zero and
/// invalid.
pub fn warp_cost_volume(prev: &CostVolume, flow: &StereoscopicFlow) -> Result<(CostVolume, Array3<bool>)> {
    let (dn, h, w) = prev.data.dim();
    if flow.dim() != (h, w) {
        return Err(Error::Dimension(format!(
            "cost volume is {h}x{w} but flow is {:?}",
            flow.dim()
        )));
    }
    let dflow = derive_disparity_flow(flow, dn)?;
    let mut data = Array3::zeros((dn, h, w));
    let mut validity = Array3::from_elem((dn, h, w), false);
    let src = &prev.data;
    Zip::indexed(data.view_mut())
        .and(validity.view_mut())
        .par_for_each(|(d, y, x), out, valid| {
            if !dflow.validity[[d, y, x]] {
                return;
            }
            let sd = d as f64 + dflow.data[[d, y, x]];
            let sy = y as f64 + flow.dy[[y, x]];
            let sx = x as f64 + flow.dx_left[[y, x]];
            let (Some((d0, d1, fd)), Some((y0, y1, fy)), Some((x0, x1, fx))) =
                (axis_taps(sd, dn), axis_taps(sy, h), axis_taps(sx, w))
            else {
                return;
            };
            let mut acc = 0.0;
            for (di, wd) in [(d0, 1.0 - fd), (d1, fd)] {
                if wd == 0.0 {
                    continue;
                }
                for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                    if wy == 0.0 {
                        continue;
                    }
                    for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                        if wx == 0.0 {
                            continue;
                        }
                        let v = src[[di, yi, xi]];
                        if v >= SENTINEL_COST {
                            return;
                        }
                        acc += wd * wy * wx * v;
                    }
                }
            }
            *out = acc;
            *valid = true;
        });
    Ok((CostVolume::new(data, prev.scale), validity))
}

/// Change in disparity value between `t-1` and `t` implied by the flow at
/// the current ground-truth matches: the right horizontal flow read at the
/// matching column minus the left horizontal flow.
pub fn residual_disparity(flow: &StereoscopicFlow, disp_current: &DisparityMap) -> Result<ScalarField> {
    flow.validate()?;
    if disp_current.dim() != flow.dim() {
        return Err(Error::Dimension(format!(
            "disparity is {:?} but flow is {:?}",
            disp_current.dim(),
            flow.dim()
        )));
    }
    let neg_disp = disp_current.data.mapv(|d| -d);
    let zeros = Array2::zeros(flow.dim());
    let mut out = warp_plane(&flow.dx_right, &neg_disp, &zeros)?;
    Zip::from(&mut out.data)
        .and(&mut out.validity)
        .and(&flow.dx_left)
        .and(&disp_current.validity)
        .for_each(|v, valid, &dxl, &gt_valid| {
            *valid = *valid && gt_valid;
            *v = if *valid { *v - dxl } else { 0.0 };
        });
    Ok(out)
}

/// Previous disparity moved to the current frame: spatially warped along
/// the left flow, plus the residual disparity of the current disparity.
pub fn warp_gt_disparity(
    disp_prev: &DisparityMap,
    flow: &StereoscopicFlow,
    disp_current: &DisparityMap,
) -> Result<DisparityMap> {
    if disp_prev.dim() != disp_current.dim() {
        return Err(Error::Dimension(format!(
            "previous disparity {:?} vs current {:?}",
            disp_prev.dim(),
            disp_current.dim()
        )));
    }
    let moved = warp_field(disp_prev, &flow.dx_left, &flow.dy)?;
    let residual = residual_disparity(flow, disp_current)?;
    let mut out = moved;
    Zip::from(&mut out.data)
        .and(&mut out.validity)
        .and(&residual.data)
        .and(&residual.validity)
        .and(&disp_current.validity)
        .for_each(|v, valid, &r, &r_valid, &cur_valid| {
            *valid = *valid && r_valid && cur_valid;
            *v = if *valid { *v + r } else { 0.0 };
        });
    Ok(out)
}
