//! Smooth-L1, temporal disparity consistency (TDC), contrast and stereo
//! losses, and the total objective.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::EventStream;
use crate::warp::{warp_gt_disparity, DisparityMap, StereoscopicFlow};

/// Loss weights. Defaults follow the indoor-flying setting; see
/// [`LossWeights::driving`] for the lighter flow weights used on faster
/// driving sequences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_t: f64,
    pub lambda_c: f64,
    pub lambda_0: f64,
    pub lambda_1: f64,
    pub lambda_f: f64,
    /// Smooth-L1 transition point.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_t: 0.1,
            lambda_c: 1e-5,
            lambda_0: 0.5,
            lambda_1: 0.7,
            lambda_f: 1.0,
            beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn driving() -> Self {
        Self {
            lambda_t: 0.01,
            lambda_c: 1e-8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_t, self.lambda_c, self.lambda_0, self.lambda_1, self.lambda_f];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Parameter("loss weights must be finite and non-negative".into()));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Parameter(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }

    /// Every lambda multiplied by `factor`; `beta` unchanged.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            lambda_t: self.lambda_t * factor,
            lambda_c: self.lambda_c * factor,
            lambda_0: self.lambda_0 * factor,
            lambda_1: self.lambda_1 * factor,
            lambda_f: self.lambda_f * factor,
            beta: self.beta,
        }
    }
}

/// A masked mean loss and the number of pixels it averaged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskedLoss {
    pub value: f64,
    pub valid_pixels: usize,
}

impl MaskedLoss {
    /// No pixel contributed; `value` is 0.
    pub fn is_empty(&self) -> bool {
        self.valid_pixels == 0
    }
}

/// Smooth-L1 penalty of a single residual.
pub fn smooth_l1_penalty(e: f64, beta: f64) -> f64 {
    let a = e.abs();
    if a < beta {
        0.5 * e * e / beta
    } else {
        a - 0.5 * beta
    }
}

/// Mean smooth-L1 over pixels valid in both maps.
pub fn smooth_l1(pred: &DisparityMap, target: &DisparityMap, beta: f64) -> Result<MaskedLoss> {
    if pred.dim() != target.dim() {
        return Err(Error::Dimension(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    Zip::from(&pred.data)
        .and(&pred.validity)
        .and(&target.data)
        .and(&target.validity)
        .for_each(|&p, &pv, &t, &tv| {
            if pv && tv {
                sum += smooth_l1_penalty(p - t, beta);
                count += 1;
            }
        });
    if count == 0 {
        log::warn!("smooth-L1 over an empty mask");
        return Ok(MaskedLoss { value: 0.0, valid_pixels: 0 });
    }
    Ok(MaskedLoss {
        value: sum / count as f64,
        valid_pixels: count,
    })
}

/// Smooth-L1 between the current disparity and the previous disparity
/// carried forward by the flow.
pub fn tdc_loss(
    flow: &StereoscopicFlow,
    disp_prev: &DisparityMap,
    disp_current: &DisparityMap,
    beta: f64,
) -> Result<MaskedLoss> {
    let warped = warp_gt_disparity(disp_prev, flow, disp_current)?;
    smooth_l1(&warped, disp_current, beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Left,
    Right,
}

/// Image of warped events: every event is carried to the window end along
/// the forward motion implied by the backward flow at its pixel, scaled by
/// the fraction of the window still remaining, and splatted bilinearly.
pub fn warped_event_image(stream: &EventStream, flow: &StereoscopicFlow, view: View) -> Result<Array2<f64>> {
    let (w, h) = (stream.width(), stream.height());
    let s = flow.scale.max(1);
    let (fh, fw) = flow.dim();
    if fh * s < h || fw * s < w {
        return Err(Error::Dimension(format!(
            "flow {fh}x{fw} at scale {s} does not cover a {h}x{w} stream"
        )));
    }
    let (fx, fy) = match view {
        View::Left => (&flow.dx_left, &flow.dy),
        View::Right => (&flow.dx_right, flow.right_vertical()),
    };
    let mut image = Array2::zeros((h, w));
    let duration = stream.duration().max(1) as f64;
    for e in stream.events() {
        let (x, y) = (e.x as usize, e.y as usize);
        let remaining = (stream.t_end() - e.t) as f64 / duration;
        let cell = [y / s, x / s];
        let px = x as f64 - fx[cell] * s as f64 * remaining;
        let py = y as f64 - fy[cell] * s as f64 * remaining;
        splat(&mut image, py, px);
    }
    Ok(image)
}

fn splat(image: &mut Array2<f64>, y: f64, x: f64) {
    let (h, w) = image.dim();
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let yy = y0 as isize + dy;
            let xx = x0 as isize + dx;
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && wy * wx > 0.0 {
                image[[yy as usize, xx as usize]] += wy * wx;
            }
        }
    }
}

/// Negative variance of the warped event image; sharper images score lower.
pub fn contrast_loss(stream: &EventStream, flow: &StereoscopicFlow, view: View) -> Result<f64> {
    if stream.is_empty() {
        return Ok(0.0);
    }
    let image = warped_event_image(stream, flow, view)?;
    let n = image.len() as f64;
    let mean = image.sum() / n;
    let var = image.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(-var)
}

/// Weighted smooth-L1 of the two auxiliary predictions and the final one.
pub fn stereo_loss(
    d0: &DisparityMap,
    d1: &DisparityMap,
    d_final: &DisparityMap,
    gt: &DisparityMap,
    weights: &LossWeights,
) -> Result<f64> {
    let l0 = smooth_l1(d0, gt, weights.beta)?.value;
    let l1 = smooth_l1(d1, gt, weights.beta)?.value;
    let lf = smooth_l1(d_final, gt, weights.beta)?.value;
    Ok(combine_stereo(l0, l1, lf, weights))
}

pub fn combine_stereo(l0: f64, l1: f64, l_final: f64, weights: &LossWeights) -> f64 {
    weights.lambda_0 * l0 + weights.lambda_1 * l1 + weights.lambda_f * l_final
}

/// Unweighted flow-loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FlowTerms {
    pub tdc: f64,
    pub contrast: f64,
}

/// Unweighted stereo-loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StereoTerms {
    pub d0: f64,
    pub d1: f64,
    pub d_final: f64,
}

/// `lambda_t * tdc + lambda_c * contrast + stereo`.
pub fn total_loss(flow: &FlowTerms, stereo: &StereoTerms, weights: &LossWeights) -> f64 {
    weights.lambda_t * flow.tdc
        + weights.lambda_c * flow.contrast
        + combine_stereo(stereo.d0, stereo.d1, stereo.d_final, weights)
}
