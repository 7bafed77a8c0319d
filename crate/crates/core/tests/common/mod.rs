//! Oracles and scene builders shared by the integration tests.
#![allow(dead_code)]

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tess_core::synth::{PlaneSpec, SceneSpec};
use tess_core::warp::{DisparityMap, StereoscopicFlow};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_array3(rng: &mut ChaCha8Rng, shape: (usize, usize, usize), lo: f64, hi: f64) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.random_range(lo..hi))
}

pub fn random_plane(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((h, w), || rng.random_range(lo..hi))
}

pub fn random_int_plane(rng: &mut ChaCha8Rng, h: usize, w: usize, r: i64) -> Array2<f64> {
    Array2::from_shape_simple_fn((h, w), || rng.random_range(-r..=r) as f64)
}

pub fn flow_from(dxl: Array2<f64>, dxr: Array2<f64>, dy: Array2<f64>) -> StereoscopicFlow {
    StereoscopicFlow {
        dx_left: dxl,
        dx_right: dxr,
        dy,
        dy_right: None,
        scale: 1,
    }
}

/// Value of a row at fractional column `pos` by linear interpolation, or
/// `None` off the row. Written from scratch for comparison purposes.
fn row_at(row: &[f64], pos: f64) -> Option<f64> {
    let n = row.len() as f64;
    if pos < 0.0 || pos > n - 1.0 {
        return None;
    }
    let lo = pos.floor();
    let frac = pos - lo;
    let i = lo as usize;
    if frac == 0.0 {
        return Some(row[i]);
    }
    Some(row[i] * (1.0 - frac) + row[i + 1] * frac)
}

/// Disparity change of each candidate pair by explicit tracking: the left
/// pixel and its right match are each followed back along their own flow
/// and the disparity of the tracked pair is compared with the candidate.
pub fn pair_tracking_oracle(flow: &StereoscopicFlow, candidates: usize) -> Array3<Option<f64>> {
    let (h, w) = flow.dim();
    let mut out = Array3::from_elem((candidates, h, w), None);
    for d in 0..candidates {
        for y in 0..h {
            let right_row: Vec<f64> = flow.dx_right.row(y).to_vec();
            for x in 0..w {
                let left_now = x as f64;
                let right_now = x as f64 - d as f64;
                let Some(right_motion) = row_at(&right_row, right_now) else {
                    continue;
                };
                let left_then = left_now + flow.dx_left[[y, x]];
                let right_then = right_now + right_motion;
                let disparity_then = left_then - right_then;
                out[[d, y, x]] = Some(disparity_then - d as f64);
            }
        }
    }
    out
}

/// Trilinear gather of `src` at `(d, y, x)` by enumerating the eight
/// surrounding lattice points. `None` outside the volume.
pub fn gather(src: &Array3<f64>, d: f64, y: f64, x: f64) -> Option<f64> {
    let (dn, h, w) = src.dim();
    let inside = |v: f64, n: usize| v >= 0.0 && v <= (n - 1) as f64;
    if !(inside(d, dn) && inside(y, h) && inside(x, w)) {
        return None;
    }
    let corners = |v: f64, n: usize| -> [(usize, f64); 2] {
        let lo = v.floor();
        let f = v - lo;
        let lo = lo as usize;
        let hi = (lo + 1).min(n - 1);
        [(lo, 1.0 - f), (hi, f)]
    };
    let mut acc = 0.0;
    for (di, wd) in corners(d, dn) {
        for (yi, wy) in corners(y, h) {
            for (xi, wx) in corners(x, w) {
                acc += wd * wy * wx * src[[di, yi, xi]];
            }
        }
    }
    Some(acc)
}

/// Cost warp by index gather: every current cell reads the previous volume
/// at its tracked disparity and position.
pub fn cost_warp_oracle(prev: &Array3<f64>, flow: &StereoscopicFlow) -> Array3<Option<f64>> {
    let (dn, h, w) = prev.dim();
    let tracked = pair_tracking_oracle(flow, dn);
    Array3::from_shape_fn((dn, h, w), |(d, y, x)| {
        let dd = tracked[[d, y, x]]?;
        gather(
            prev,
            d as f64 + dd,
            y as f64 + flow.dy[[y, x]],
            x as f64 + flow.dx_left[[y, x]],
        )
    })
}

/// Metric reduction written as plain loops over flattened pixels.
pub struct ScriptedMetrics {
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    pub one_pa: f64,
    pub two_pe: f64,
}

pub fn scripted_metrics(pred: &[f64], gt: &[f64], mask: &[bool]) -> ScriptedMetrics {
    let errors: Vec<f64> = pred
        .iter()
        .zip(gt)
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|((p, g), _)| (p - g).abs())
        .collect();
    let n = errors.len();
    let nf = n as f64;
    ScriptedMetrics {
        n,
        mae: errors.iter().sum::<f64>() / nf,
        rmse: (errors.iter().map(|e| e * e).sum::<f64>() / nf).sqrt(),
        one_pa: 100.0 * errors.iter().filter(|e| **e <= 1.0).count() as f64 / nf,
        two_pe: 100.0 * errors.iter().filter(|e| **e > 2.0).count() as f64 / nf,
    }
}

pub fn base_scene(width: usize, height: usize, focal: f64, planes: Vec<PlaneSpec>) -> SceneSpec {
    SceneSpec {
        width,
        height,
        focal,
        baseline: 0.1,
        duration: None,
        frame_window: 0.05,
        contrast_threshold: 0.15,
        threshold_jitter: 0.0,
        substeps: 16,
        planes,
    }
}

pub fn plane(depth: f64, velocity: [f64; 2], seed: u64, cell: f64, extent: Option<[f64; 4]>) -> PlaneSpec {
    PlaneSpec {
        depth: vec![[0.0, depth]],
        velocity,
        texture_seed: seed,
        texture_cell: cell,
        extent,
    }
}

/// Left pixels whose right-view match is hidden behind a nearer surface:
/// another pixel on the row lands on the same right column with a larger
/// disparity.
pub fn occluded(gt: &DisparityMap) -> Array2<bool> {
    let (h, w) = gt.dim();
    let mut out = Array2::from_elem((h, w), false);
    for y in 0..h {
        let target = |x: usize| -> Option<usize> {
            if !gt.validity[[y, x]] {
                return None;
            }
            let r = (x as f64 - gt.data[[y, x]]).round();
            (r >= 0.0).then_some(r as usize)
        };
        let mut nearest = vec![f64::NEG_INFINITY; w];
        for x in 0..w {
            if let Some(r) = target(x) {
                nearest[r] = nearest[r].max(gt.data[[y, x]]);
            }
        }
        for x in 0..w {
            if let Some(r) = target(x) {
                out[[y, x]] = nearest[r] > gt.data[[y, x]] + 0.5;
            }
        }
    }
    out
}

/// Ground-truth pixels that have a visible match at least `margin` pixels
/// inside the right image.
pub fn matchable(gt: &DisparityMap, margin: f64) -> Array2<bool> {
    let occ = occluded(gt);
    Array2::from_shape_fn(gt.dim(), |(y, x)| {
        gt.validity[[y, x]] && !occ[[y, x]] && x as f64 - gt.data[[y, x]] >= margin
    })
}

/// Mean absolute error over a mask.
pub fn masked_mae(pred: &DisparityMap, gt: &DisparityMap, mask: &Array2<bool>) -> f64 {
    let (mut n, mut sum) = (0usize, 0.0);
    for ((idx, &m), &g) in mask.indexed_iter().zip(gt.data.iter()) {
        if m {
            sum += (pred.data[idx] - g).abs();
            n += 1;
        }
    }
    sum / n as f64
}
