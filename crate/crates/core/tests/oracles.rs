mod common;

use common::*;
use ndarray::{Array2, Array3};
use rand::Rng;
use tess_core::cost::{build_cost_volume, cost_to_probability, soft_argmin, CostVolume};
use tess_core::loss::{smooth_l1_penalty, tdc_loss};
use tess_core::warp::{derive_disparity_flow, warp_cost_volume, DisparityMap, FeatureGrid};

#[test]
fn constant_flows_match_pair_oracle() {
    let dxl = Array2::from_elem((8, 8), 3.0);
    let dxr = Array2::from_elem((8, 8), 1.0);
    let flow = flow_from(dxl, dxr, Array2::zeros((8, 8)));
    let got = derive_disparity_flow(&flow, 4).unwrap();
    let want = pair_tracking_oracle(&flow, 4);
    for ((v, ok), o) in got.data.iter().zip(&got.validity).zip(&want) {
        assert_eq!(*ok, o.is_some());
        if *ok {
            assert_eq!(*v, 2.0);
            assert_eq!(o.unwrap(), 2.0);
        }
    }
}

#[test]
fn fractional_flows_match_pair_oracle() {
    let mut r = rng(11);
    for _ in 0..20 {
        let flow = flow_from(
            random_plane(&mut r, 8, 12, -3.0, 3.0),
            random_plane(&mut r, 8, 12, -3.0, 3.0),
            random_plane(&mut r, 8, 12, -1.0, 1.0),
        );
        let got = derive_disparity_flow(&flow, 5).unwrap();
        let want = pair_tracking_oracle(&flow, 5);
        for ((v, ok), o) in got.data.iter().zip(&got.validity).zip(&want) {
            assert_eq!(*ok, o.is_some());
            if let Some(o) = o {
                assert!((v - o).abs() <= 1e-6, "{v} vs {o}");
            }
        }
    }
}

#[test]
fn small_integer_cost_warps_match_gather() {
    let mut r = rng(12);
    for _ in 0..30 {
        let prev = random_array3(&mut r, (4, 6, 6), 0.0, 5.0);
        let flow = flow_from(
            random_int_plane(&mut r, 6, 6, 2),
            random_int_plane(&mut r, 6, 6, 2),
            random_int_plane(&mut r, 6, 6, 1),
        );
        let (warped, valid) = warp_cost_volume(&CostVolume::new(prev.clone(), 1), &flow).unwrap();
        let want = cost_warp_oracle(&prev, &flow);
        for ((v, ok), o) in warped.data.iter().zip(&valid).zip(&want) {
            assert_eq!(*ok, o.is_some());
            if let Some(o) = o {
                assert!((v - o).abs() <= 1e-6);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }
}

/// Left texture and a right view holding the same texture `shift` columns
/// further left, so the true disparity is `shift` everywhere.
fn shifted_pair(shift: usize) -> (FeatureGrid, FeatureGrid) {
    let mut r = rng(13);
    let (h, w) = (16, 16 + shift);
    let wide = random_array3(&mut r, (2, h, w), -1.0, 1.0);
    let left = wide.slice(ndarray::s![.., .., ..16]).to_owned();
    let right = Array3::from_shape_fn((2, h, 16), |(c, y, x)| wide[[c, y, x + shift]]);
    (FeatureGrid::new(left, 1), FeatureGrid::new(right, 1))
}

#[test]
fn shifted_texture_argmin_is_the_shift() {
    let (left, right) = shifted_pair(3);
    let cost = build_cost_volume(&left, &right, 8, 1).unwrap();
    for y in 0..16 {
        for x in 3..16 {
            let col: Vec<f64> = (0..8).map(|d| cost.data[[d, y, x]]).collect();
            let best = (0..8).min_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
            assert_eq!(best, 3, "pixel ({y}, {x})");
        }
    }
}

#[test]
fn low_temperature_soft_argmin_converges_to_shift() {
    let (left, right) = shifted_pair(3);
    let cost = build_cost_volume(&left, &right, 8, 3).unwrap();
    let disp = soft_argmin(&cost_to_probability(&cost, 0.01).unwrap());
    for y in 1..15 {
        for x in 4..15 {
            assert!((disp.data[[y, x]] - 3.0).abs() <= 0.1, "pixel ({y}, {x}): {}", disp.data[[y, x]]);
        }
    }
}

fn bilinear(p: &Array2<f64>, y: f64, x: f64) -> (f64, f64) {
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let v = (1.0 - fy) * ((1.0 - fx) * p[[y0, x0]] + fx * p[[y0, x0 + 1]])
        + fy * ((1.0 - fx) * p[[y0 + 1, x0]] + fx * p[[y0 + 1, x0 + 1]]);
    let dvdx = (1.0 - fy) * (p[[y0, x0 + 1]] - p[[y0, x0]]) + fy * (p[[y0 + 1, x0 + 1]] - p[[y0 + 1, x0]]);
    (v, dvdx)
}

fn smooth_l1_slope(e: f64, beta: f64) -> f64 {
    if e.abs() < beta {
        e / beta
    } else {
        e.signum()
    }
}

#[test]
fn tdc_gradient_matches_bilinear_propagation() {
    let mut r = rng(14);
    let (h, w) = (10, 14);
    let beta = 1.0;
    for trial in 0..5 {
        let prev = DisparityMap::dense(random_plane(&mut r, h, w, 2.0, 4.0));
        let cur = DisparityMap::dense(Array2::from_shape_fn((h, w), |_| r.random_range(2.3..2.7)));
        let flow = flow_from(
            random_plane(&mut r, h, w, 0.2, 0.8),
            random_plane(&mut r, h, w, 0.2, 0.8),
            random_plane(&mut r, h, w, 0.2, 0.8),
        );
        let base = tdc_loss(&flow, &prev, &cur, beta).unwrap();
        let (y, x) = (4, 6 + trial);
        let eps = 1e-6;

        let mut plus = flow.clone();
        plus.dx_left[[y, x]] += eps;
        let mut minus = flow.clone();
        minus.dx_left[[y, x]] -= eps;
        let lp = tdc_loss(&plus, &prev, &cur, beta).unwrap();
        let lm = tdc_loss(&minus, &prev, &cur, beta).unwrap();
        assert_eq!(lp.valid_pixels, base.valid_pixels);
        let numeric = (lp.value - lm.value) / (2.0 * eps);

        let (moved, slope) = bilinear(&prev.data, y as f64 + flow.dy[[y, x]], x as f64 + flow.dx_left[[y, x]]);
        let d = cur.data[[y, x]];
        let right_pos = x as f64 - d;
        let (right_flow, _) = bilinear(&flow.dx_right, y as f64, right_pos);
        let e = moved + right_flow - flow.dx_left[[y, x]] - d;
        let analytic = smooth_l1_slope(e, beta) * (slope - 1.0) / base.valid_pixels as f64;

        let rel = (numeric - analytic).abs() / analytic.abs().max(1e-12);
        assert!(rel <= 1e-4, "numeric {numeric} vs analytic {analytic}");
        assert!(smooth_l1_penalty(e, beta) >= 0.0);
    }
}

#[test]
fn warp_oracle_agrees_on_fractional_identity_region() {
    let mut r = rng(15);
    let prev = random_array3(&mut r, (6, 8, 8), 0.0, 1.0);
    let flow = flow_from(
        Array2::from_elem((8, 8), 0.25),
        Array2::from_elem((8, 8), 0.75),
        Array2::from_elem((8, 8), -0.5),
    );
    let (warped, valid) = warp_cost_volume(&CostVolume::new(prev.clone(), 1), &flow).unwrap();
    let want = cost_warp_oracle(&prev, &flow);
    let mut checked = 0;
    for ((v, ok), o) in warped.data.iter().zip(&valid).zip(&want) {
        if let (true, Some(o)) = (*ok, o) {
            assert!((v - o).abs() <= 1e-9);
            checked += 1;
        }
    }
    assert!(checked > 100);
}
