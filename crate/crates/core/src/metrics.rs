//! Disparity and depth error metrics.

use std::fmt::Write as _;

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::warp::{DisparityMap, ScalarField};

/// Disparities at or below this many pixels have no finite depth.
pub const DEPTH_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    /// Focal length in pixels.
    pub focal: f64,
    /// Stereo baseline in meters.
    pub baseline: f64,
}

impl CameraIntrinsics {
    pub fn new(focal: f64, baseline: f64) -> Result<Self> {
        let cam = Self { focal, baseline };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0 && self.baseline > 0.0) || !self.focal.is_finite() || !self.baseline.is_finite() {
            return Err(Error::Parameter(format!(
                "focal ({}) and baseline ({}) must be positive",
                self.focal, self.baseline
            )));
        }
        Ok(())
    }
}

/// `Z = focal * baseline / d` in meters; invalid where `d <= DEPTH_EPSILON`.
pub fn disparity_to_depth(disp: &DisparityMap, cam: &CameraIntrinsics) -> Result<ScalarField> {
    cam.validate()?;
    let fb = cam.focal * cam.baseline;
    let mut out = disp.clone();
    Zip::from(&mut out.data)
        .and(&mut out.validity)
        .for_each(|v, valid| {
            if *valid && *v > DEPTH_EPSILON {
                *v = fb / *v;
            } else {
                *valid = false;
                *v = 0.0;
            }
        });
    Ok(out)
}

/// Evaluation summary. Every value is `None` when no pixel was valid.
///
/// Thresholds: 1PA counts `|e| <= 1`, 1PE/2PE count `|e| > 1` / `|e| > 2`,
/// so 1PA and 1PE are exact complements.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub valid_pixels: usize,
    pub mean_depth_error_cm: Option<f64>,
    pub median_depth_error_cm: Option<f64>,
    pub mean_disparity_error: Option<f64>,
    /// Percent.
    pub one_pixel_accuracy: Option<f64>,
    /// Percent.
    pub one_pixel_error: Option<f64>,
    /// Percent.
    pub two_pixel_error: Option<f64>,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
}

impl MetricReport {
    pub fn is_empty(&self) -> bool {
        self.valid_pixels == 0
    }

    /// Ordered `(key, value)` pairs; `None` values print as `nan`.
    pub fn entries(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("valid_pixels", Some(self.valid_pixels as f64)),
            ("mean_depth_error_cm", self.mean_depth_error_cm),
            ("median_depth_error_cm", self.median_depth_error_cm),
            ("mean_disparity_error", self.mean_disparity_error),
            ("one_pixel_accuracy", self.one_pixel_accuracy),
            ("one_pixel_error", self.one_pixel_error),
            ("two_pixel_error", self.two_pixel_error),
            ("mae", self.mae),
            ("rmse", self.rmse),
        ]
    }

    /// One `key=value` line per metric, plus `empty=true|false`.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        writeln!(s, "empty={}", self.is_empty()).unwrap();
        for (k, v) in self.entries() {
            match v {
                Some(v) if k == "valid_pixels" => writeln!(s, "{k}={}", v as usize).unwrap(),
                Some(v) => writeln!(s, "{k}={v}").unwrap(),
                None => writeln!(s, "{k}=nan").unwrap(),
            }
        }
        s
    }

    pub fn to_human(&self) -> String {
        if self.is_empty() {
            return "no valid pixels\n".to_string();
        }
        let mut s = String::new();
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        writeln!(s, "valid pixels        {}", self.valid_pixels).unwrap();
        writeln!(s, "mean depth error    {} cm", fmt(self.mean_depth_error_cm)).unwrap();
        writeln!(s, "median depth error  {} cm", fmt(self.median_depth_error_cm)).unwrap();
        writeln!(s, "mean disp. error    {} px", fmt(self.mean_disparity_error)).unwrap();
        writeln!(s, "1PA                 {} %", fmt(self.one_pixel_accuracy)).unwrap();
        writeln!(s, "1PE                 {} %", fmt(self.one_pixel_error)).unwrap();
        writeln!(s, "2PE                 {} %", fmt(self.two_pixel_error)).unwrap();
        writeln!(s, "RMSE                {} px", fmt(self.rmse)).unwrap();
        s
    }
}

/// Compares a predicted disparity map with ground truth over pixels valid
/// in both. Depth errors need camera intrinsics.
pub fn evaluate(pred: &DisparityMap, gt: &DisparityMap, cam: Option<&CameraIntrinsics>) -> Result<MetricReport> {
    if pred.dim() != gt.dim() {
        return Err(Error::Dimension(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    if let Some(cam) = cam {
        cam.validate()?;
    }
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut within1 = 0usize;
    let mut over2 = 0usize;
    let mut n = 0usize;
    let mut depth_errors = Vec::new();
    Zip::from(&pred.data)
        .and(&pred.validity)
        .and(&gt.data)
        .and(&gt.validity)
        .for_each(|&p, &pv, &g, &gv| {
            if !(pv && gv) {
                return;
            }
            let e = (p - g).abs();
            abs_sum += e;
            sq_sum += e * e;
            if e <= 1.0 {
                within1 += 1;
            }
            if e > 2.0 {
                over2 += 1;
            }
            n += 1;
            if let Some(cam) = cam {
                if p > DEPTH_EPSILON && g > DEPTH_EPSILON {
                    let fb = cam.focal * cam.baseline;
                    depth_errors.push((fb / p - fb / g).abs() * 100.0);
                }
            }
        });
    if n == 0 {
        return Ok(MetricReport::default());
    }
    let nf = n as f64;
    let mae = abs_sum / nf;
    let one_pa = 100.0 * within1 as f64 / nf;
    let (mean_depth, median_depth) = if depth_errors.is_empty() {
        (None, None)
    } else {
        let mean = depth_errors.iter().sum::<f64>() / depth_errors.len() as f64;
        (Some(mean), Some(median(&mut depth_errors)))
    };
    Ok(MetricReport {
        valid_pixels: n,
        mean_depth_error_cm: mean_depth,
        median_depth_error_cm: median_depth,
        mean_disparity_error: Some(mae),
        one_pixel_accuracy: Some(one_pa),
        one_pixel_error: Some(100.0 * (n - within1) as f64 / nf),
        two_pixel_error: Some(100.0 * over2 as f64 / nf),
        mae: Some(mae),
        rmse: Some((sq_sum / nf).sqrt()),
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
