//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails or overruns its time budget.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use tempfile::tempdir;

use common::*;
use tess_core::config::{Mode, RunConfig};
use tess_core::cost::{cost_to_probability, entropy_map, soft_argmin, CostVolume, ProbabilityVolume};
use tess_core::engine::{features, run_sequence, step, StereoFrame, TemporalState};
use tess_core::event::{Event, EventStream, Polarity};
use tess_core::flow::{estimate_flow, EpipolarConstraint};
use tess_core::io::{self, DisparityFormat, EventFormat};
use tess_core::loss::{contrast_loss, tdc_loss, View};
use tess_core::metrics::evaluate;
use tess_core::synth::{dropout_events, render_sequence, OracleFrame, SceneSpec};
use tess_core::warp::{derive_disparity_flow, warp_cost_volume, warp_features, DisparityMap, FeatureGrid, StereoscopicFlow};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Working configuration for the 256x256 simulator scenes (64x64 at the
/// working scale, 12 candidates).
fn desk_config(mode: Mode) -> RunConfig {
    RunConfig {
        width: 256,
        height: 256,
        focal: 200.0,
        baseline: 0.1,
        temperature: 0.2,
        mode,
        ..RunConfig::default()
    }
}

fn stereo_frames(frames: &[OracleFrame]) -> Vec<StereoFrame> {
    frames
        .iter()
        .map(|f| StereoFrame {
            left: f.left_events.clone(),
            right: f.right_events.clone(),
        })
        .collect()
}

fn max_abs_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn warping_identities() -> Outcome {
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    let mut all_valid = true;
    let mut expected_mask = true;
    for _ in 0..100 {
        let grid = FeatureGrid::new(random_array3(&mut r, (5, 16, 16), -3.0, 3.0), 1);
        let z = Array2::zeros((16, 16));
        let (out, valid) = warp_features(&grid, &z, &z).unwrap();
        worst = worst.max(max_abs_diff(&out.data, &grid.data));
        all_valid &= valid.iter().all(|&v| v);

        let cost = CostVolume::new(random_array3(&mut r, (8, 16, 16), 0.0, 50.0), 1);
        let (warped, valid) = warp_cost_volume(&cost, &StereoscopicFlow::zeros(16, 16, 1)).unwrap();
        for ((d, y, x), &v) in valid.indexed_iter() {
            // candidates without a right-image match have no disparity flow
            expected_mask &= v == (x >= d);
            if v {
                worst = worst.max((warped.data[[d, y, x]] - cost.data[[d, y, x]]).abs());
            }
        }
    }
    outcome(
        worst <= 1e-9 && all_valid && expected_mask,
        format!("max diff {worst:.1e}; feature warp fully valid: {all_valid}; cost warp valid exactly where x >= d: {expected_mask}"),
    )
}

fn disparity_flow_oracle() -> Outcome {
    let mut r = rng(2);
    let (h, w, dn) = (8, 8, 4);
    let mut integer_exact = true;
    let mut frac_worst: f64 = 0.0;
    let mut validity_agrees = true;
    for i in 0..100 {
        let fractional = i >= 50;
        let flow = if fractional {
            flow_from(
                random_plane(&mut r, h, w, -3.0, 3.0),
                random_plane(&mut r, h, w, -3.0, 3.0),
                random_plane(&mut r, h, w, -2.0, 2.0),
            )
        } else {
            flow_from(
                random_int_plane(&mut r, h, w, 3),
                random_int_plane(&mut r, h, w, 3),
                random_int_plane(&mut r, h, w, 2),
            )
        };
        let got = derive_disparity_flow(&flow, dn).unwrap();
        let want = pair_tracking_oracle(&flow, dn);
        for (idx, expected) in want.indexed_iter() {
            validity_agrees &= got.validity[idx] == expected.is_some();
            if let Some(e) = expected {
                let v = got.data[idx];
                if fractional {
                    frac_worst = frac_worst.max((v - e).abs());
                } else {
                    integer_exact &= v == *e;
                }
            }
        }
    }
    outcome(
        integer_exact && frac_worst <= 1e-6 && validity_agrees,
        format!("integer exact: {integer_exact}, fractional max diff {frac_worst:.1e}, validity agrees: {validity_agrees}"),
    )
}

fn cost_warp_oracle_check() -> Outcome {
    let mut r = rng(3);
    let (dn, h, w) = (8, 16, 16);
    let mut worst: f64 = 0.0;
    let mut validity_agrees = true;
    let mut valid_cells = 0usize;
    for _ in 0..50 {
        let prev = random_array3(&mut r, (dn, h, w), 0.0, 20.0);
        let flow = flow_from(
            random_plane(&mut r, h, w, -2.5, 2.5),
            random_plane(&mut r, h, w, -2.5, 2.5),
            random_plane(&mut r, h, w, -2.0, 2.0),
        );
        let (got, valid) = warp_cost_volume(&CostVolume::new(prev.clone(), 1), &flow).unwrap();
        let want = cost_warp_oracle(&prev, &flow);
        for (idx, expected) in want.indexed_iter() {
            validity_agrees &= valid[idx] == expected.is_some();
            if let (true, Some(e)) = (valid[idx], expected) {
                worst = worst.max((got.data[idx] - e).abs());
                valid_cells += 1;
            }
        }
    }
    outcome(
        worst <= 1e-6 && validity_agrees && valid_cells > 0,
        format!("max diff {worst:.1e} over {valid_cells} valid cells, validity agrees: {validity_agrees}"),
    )
}

fn tdc_zero_point() -> Outcome {
    let mut r = rng(4);
    let mut worst_gt: f64 = 0.0;
    let mut worst_ratio = f64::INFINITY;
    for seq in 0..10u64 {
        let z0 = r.random_range(1.0..2.0);
        let z1 = z0 * r.random_range(0.6..0.9);
        let velocity = [r.random_range(-60.0..60.0), r.random_range(-40.0..40.0)];
        let mut p = plane(z0, velocity, seq, 5.0, None);
        p.depth = vec![[0.0, z0], [0.1, z1]];
        let spec = base_scene(64, 48, 120.0, vec![p]);
        let frames = render_sequence(&spec, 2, seq).unwrap();
        let (prev, cur) = (&frames[0].disp_gt, &frames[1].disp_gt);
        let flow = &frames[1].flow_gt;
        let at_gt = tdc_loss(flow, prev, cur, 1.0).unwrap();
        let mut perturbed = flow.clone();
        perturbed.dx_left.mapv_inplace(|v| v + 2.0);
        let off = tdc_loss(&perturbed, prev, cur, 1.0).unwrap();
        if at_gt.is_empty() || off.is_empty() {
            return outcome(false, format!("sequence {seq} has no valid pixels"));
        }
        worst_gt = worst_gt.max(at_gt.value);
        worst_ratio = worst_ratio.min(off.value / at_gt.value.max(f64::MIN_POSITIVE));
    }
    outcome(
        worst_gt <= 1e-3 && worst_ratio >= 10.0,
        format!("max loss at GT flow {worst_gt:.2e}, min perturbed/GT ratio {worst_ratio:.1e}"),
    )
}

fn entropy_arithmetic() -> Outcome {
    let uniform = ProbabilityVolume {
        data: Array3::from_elem((48, 2, 3), 1.0 / 48.0),
    };
    let e = entropy_map(&uniform).data[[1, 2]];
    let ln48_ok = (e - 48f64.ln()).abs() <= 1e-9 && (e - 3.8712).abs() < 5e-5;

    let mut one_hot = Array3::zeros((12, 1, 1));
    one_hot[[7, 0, 0]] = 1.0;
    let argmin = soft_argmin(&ProbabilityVolume { data: one_hot }).data[[0, 0]];
    let one_hot_ok = argmin == 7.0;

    let mut r = rng(5);
    let cost = random_array3(&mut r, (16, 4, 4), 0.0, 30.0);
    let a = cost_to_probability(&CostVolume::new(cost.clone(), 1), 1.0).unwrap();
    let b = cost_to_probability(&CostVolume::new(cost + 123.456, 1), 1.0).unwrap();
    let shift = max_abs_diff(&a.data, &b.data);
    outcome(
        ln48_ok && one_hot_ok && shift <= 1e-9,
        format!("H(uniform 48) = {e:.10}, one-hot argmin = {argmin}, shift diff {shift:.1e}"),
    )
}

fn two_plane_scene(seed: u64) -> SceneSpec {
    base_scene(
        256,
        256,
        200.0,
        vec![
            plane(1.0, [100.0, 40.0], 1 + seed, 6.0, None),
            plane(0.5, [-60.0, 20.0], 2 + seed, 6.0, Some([80.0, 80.0, 176.0, 176.0])),
        ],
    )
}

fn stereo_correctness() -> Outcome {
    let config = desk_config(Mode::Single);
    let (mut n, mut good) = (0usize, 0usize);
    let mut worst_seed: f64 = 100.0;
    for seed in 0..3u64 {
        let frames = render_sequence(&two_plane_scene(seed), 1, seed).unwrap();
        let f = &frames[0];
        let (out, _) = step(TemporalState::new(), &f.left_events, &f.right_events, &config, None).unwrap();
        let s = config.scale;
        let mut textured = Array2::from_elem((256 / s, 256 / s), false);
        for e in f.left_events.events() {
            textured[[e.y as usize / s, e.x as usize / s]] = true;
        }
        let mask = matchable(&f.disp_gt, 8.0);
        let (mut sn, mut sg) = (0usize, 0usize);
        for ((y, x), &m) in mask.indexed_iter() {
            if m && textured[[y / s, x / s]] {
                sn += 1;
                if (out.disparity.data[[y, x]] - f.disp_gt.data[[y, x]]).abs() <= 1.0 {
                    sg += 1;
                }
            }
        }
        worst_seed = worst_seed.min(100.0 * sg as f64 / sn as f64);
        n += sn;
        good += sg;
    }
    let pa = 100.0 * good as f64 / n as f64;
    outcome(pa >= 95.0, format!("1PA {pa:.2}% over {n} pixels (worst seed {worst_seed:.2}%)"))
}

fn temporal_benefit() -> Outcome {
    let modes = [Mode::Single, Mode::FeatureWarp, Mode::CostWarp, Mode::Full];
    let mut mean = [0.0; 4];
    let mut wins = 0;
    for seed in 0..10u64 {
        let mut spec = base_scene(256, 256, 200.0, vec![plane(1.0, [60.0, 24.0], 10 + seed, 6.0, None)]);
        spec.contrast_threshold = 0.3;
        spec.threshold_jitter = 0.5;
        let mut frames = render_sequence(&spec, 4, seed).unwrap();
        let last = frames.len() - 1;
        frames[last] = dropout_events(&frames[last], 0.5, 1000 + seed).unwrap();
        let input = stereo_frames(&frames);
        let gt = &frames[last].disp_gt;
        let mask = matchable(gt, 8.0);
        let mut errors = [0.0; 4];
        for (i, mode) in modes.into_iter().enumerate() {
            let outs = run_sequence(&input, &desk_config(mode), None).unwrap();
            errors[i] = masked_mae(&outs[last].disparity, gt, &mask);
            mean[i] += errors[i] / 10.0;
        }
        if errors[3] < errors[0] {
            wins += 1;
        }
    }
    let ordered = mean[3] <= mean[2] && mean[2] <= mean[1] && mean[1] <= mean[0];
    outcome(
        wins >= 8 && ordered,
        format!(
            "full beats single on {wins}/10 seeds; mean error full {:.4} <= cost-warp {:.4} <= feature-warp {:.4} <= single {:.4}: {ordered}",
            mean[3], mean[2], mean[1], mean[0]
        ),
    )
}

fn hard_vs_soft() -> Outcome {
    let mut mean = [0.0; 2];
    for seed in 0..10u64 {
        let vy = [30.0, -40.0, 50.0, -20.0, 35.0][seed as usize % 5];
        let mut spec = base_scene(
            256,
            256,
            200.0,
            vec![
                plane(1.0, [40.0, vy], 20 + seed, 6.0, None),
                plane(0.625, [-30.0, vy], 40 + seed, 6.0, Some([64.0, 64.0, 192.0, 192.0])),
            ],
        );
        spec.contrast_threshold = 0.3;
        spec.threshold_jitter = 0.5;
        let frames = render_sequence(&spec, 2, seed).unwrap();
        let mut config = desk_config(Mode::Full);
        let grids: Vec<(FeatureGrid, FeatureGrid)> = frames
            .iter()
            .map(|f| (features(&f.left_events, &config).unwrap(), features(&f.right_events, &config).unwrap()))
            .collect();
        let gt = frames[1].flow_gt.downsample(config.scale).unwrap();
        for (i, c) in [EpipolarConstraint::Hard, EpipolarConstraint::Soft].into_iter().enumerate() {
            config.constraint = c;
            let est = estimate_flow(&grids[0].0, &grids[0].1, &grids[1].0, &grids[1].1, &config.flow_config()).unwrap();
            let left = (&est.flow.dy - &gt.dy).mapv(f64::abs).mean().unwrap();
            let right = (est.flow.right_vertical() - gt.right_vertical()).mapv(f64::abs).mean().unwrap();
            mean[i] += 0.5 * (left + right) / 10.0;
        }
    }
    outcome(
        mean[0] <= mean[1],
        format!("mean vertical flow error hard {:.4} vs soft {:.4} px", mean[0], mean[1]),
    )
}

fn contrast_direction() -> Outcome {
    let mut r = rng(9);
    let mut better = 0;
    for scene in 0..20u64 {
        let speed = r.random_range(80.0..200.0) * if r.random_bool(0.5) { 1.0 } else { -1.0 };
        let vy = r.random_range(-60.0..60.0);
        let edge = r.random_range(20.0..44.0);
        // The textured side trails its edge, so every event pixel is still
        // on the plane at the window end, where the backward flow is defined.
        let extent = if speed > 0.0 {
            [-1000.0, -1000.0, edge, 1000.0]
        } else {
            [edge, -1000.0, 1000.0, 1000.0]
        };
        let spec = base_scene(64, 64, 100.0, vec![plane(1.0, [speed, vy], scene, 6.0, Some(extent))]);
        let frames = render_sequence(&spec, 2, scene).unwrap();
        let f = &frames[1];
        let gt = contrast_loss(&f.left_events, &f.flow_gt, View::Left).unwrap();
        let zero = contrast_loss(&f.left_events, &StereoscopicFlow::zeros(64, 64, 1), View::Left).unwrap();
        if gt < zero {
            better += 1;
        }
    }
    outcome(better >= 19, format!("GT flow sharper than zero flow on {better}/20 scenes"))
}

fn determinism_and_streaming() -> Outcome {
    let mut spec = two_plane_scene(5);
    spec.width = 128;
    spec.height = 96;
    let frames = render_sequence(&spec, 8, 5).unwrap();
    let input = stereo_frames(&frames);
    let config = RunConfig {
        width: 128,
        height: 96,
        ..desk_config(Mode::Full)
    };
    let a = run_sequence(&input, &config, None).unwrap();
    let b = run_sequence(&input, &config, None).unwrap();
    let identical = a.iter().zip(&b).all(|(x, y)| {
        x.disparity == y.disparity && x.d0 == y.d0 && x.d1 == y.d1 && x.flow == y.flow && x.entropy == y.entropy
    });

    let mut state = TemporalState::new();
    let mut footprints = Vec::new();
    for f in &input {
        let (_, next) = step(state, &f.left, &f.right, &config, None).unwrap();
        footprints.push(next.footprint());
        state = next;
    }
    let (h, w) = (96 / config.scale, 128 / config.scale);
    let expected = 2 * config.bins * h * w + config.working_disparities() * h * w + h * w;
    let constant = footprints.iter().all(|f| f.fields_present == 4 && f.cells == expected);
    outcome(
        identical && constant,
        format!("8-step runs bit-identical: {identical}; state footprint {expected} cells at every step: {constant}"),
    )
}

fn io_round_trips() -> Outcome {
    let dir = tempdir().unwrap();
    let mut r = rng(11);
    let (w, h) = (346usize, 260usize);
    let mut t = 0u64;
    let events: Vec<Event> = (0..10_000)
        .map(|_| {
            t += r.random_range(0..50);
            let p = if r.random_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
            Event::new(t, r.random_range(0..w as u16), r.random_range(0..h as u16), p)
        })
        .collect();
    let stream = EventStream::new(events, w, h, 0, t + 1).unwrap();
    let mut ok = Vec::new();
    for (name, fmt) in [("events.csv", EventFormat::Csv), ("events.bin", EventFormat::Binary)] {
        let path = dir.path().join(name);
        io::write_events(&path, &stream, fmt).unwrap();
        let back = io::read_events(&path, fmt, w, h, Some((0, t + 1))).unwrap();
        ok.push((name, back == stream));
    }

    let data = Array2::from_shape_simple_fn((40, 50), || r.random_range(0.0..60.0));
    let validity = Array2::from_shape_simple_fn((40, 50), || r.random_bool(0.9));
    let disp = DisparityMap::new(data.clone(), validity.clone()).unwrap();
    let pfm = dir.path().join("d.pfm");
    io::write_disparity(&pfm, &disp, DisparityFormat::Pfm).unwrap();
    let back = io::read_disparity(&pfm, DisparityFormat::Pfm).unwrap();
    let pfm_ok = back.validity == validity
        && back
            .data
            .indexed_iter()
            .all(|(i, &v)| !validity[i] || v == data[i] as f32 as f64);
    ok.push(("pfm", pfm_ok));

    let quantized = data.mapv(|v| (v * 256.0).round().max(1.0) / 256.0);
    let disp16 = DisparityMap::new(quantized.clone(), validity.clone()).unwrap();
    let pgm = dir.path().join("d.pgm");
    io::write_disparity(&pgm, &disp16, DisparityFormat::Pgm16).unwrap();
    let back = io::read_disparity(&pgm, DisparityFormat::Pgm16).unwrap();
    let pgm_ok = back.validity == validity
        && back
            .data
            .indexed_iter()
            .all(|(i, &v)| !validity[i] || v == quantized[i]);
    ok.push(("pgm16", pgm_ok));

    let mut flow = flow_from(
        random_plane(&mut r, 20, 30, -4.0, 4.0),
        random_plane(&mut r, 20, 30, -4.0, 4.0),
        random_plane(&mut r, 20, 30, -4.0, 4.0),
    );
    flow.dy_right = Some(random_plane(&mut r, 20, 30, -4.0, 4.0));
    let fpath = dir.path().join("f.tsf");
    io::write_flow(&fpath, &flow).unwrap();
    let back = io::read_flow(&fpath, 1).unwrap();
    let f32_view = |f: &StereoscopicFlow| -> Vec<Array2<f64>> { f.planes().iter().map(|p| p.mapv(|v| v as f32 as f64)).collect() };
    let flow_ok = back.planes().iter().map(|p| (*p).clone()).collect::<Vec<_>>() == f32_view(&flow);
    ok.push(("flow", flow_ok));

    let pass = ok.iter().all(|(_, v)| *v);
    let detail = ok.iter().map(|(n, v)| format!("{n}={v}")).collect::<Vec<_>>().join(" ");
    outcome(pass, detail)
}

fn metric_double_entry() -> Outcome {
    let gt = DisparityMap::dense(Array2::from_shape_vec((1, 4), vec![5.0, 5.0, 5.0, 5.0]).unwrap());
    let pred = DisparityMap::dense(Array2::from_shape_vec((1, 4), vec![5.0, 5.0, 7.0, 3.0]).unwrap());
    let hand = evaluate(&pred, &gt, None).unwrap();
    let hand_ok = hand.mae == Some(1.0) && hand.rmse == Some(2f64.sqrt()) && hand.one_pixel_accuracy == Some(50.0);

    let mut spec = two_plane_scene(7);
    spec.width = 128;
    spec.height = 128;
    let frames = render_sequence(&spec, 2, 7).unwrap();
    let config = RunConfig {
        width: 128,
        height: 128,
        ..desk_config(Mode::Full)
    };
    let outs = run_sequence(&stereo_frames(&frames), &config, None).unwrap();
    let mut worst: f64 = 0.0;
    let mut counts_ok = true;
    for (out, frame) in outs.iter().zip(&frames) {
        let report = evaluate(&out.disparity, &frame.disp_gt, None).unwrap();
        let mask: Vec<bool> = out
            .disparity
            .validity
            .iter()
            .zip(&frame.disp_gt.validity)
            .map(|(a, b)| *a && *b)
            .collect();
        let pred: Array1<f64> = out.disparity.data.iter().copied().collect();
        let truth: Array1<f64> = frame.disp_gt.data.iter().copied().collect();
        let s = scripted_metrics(pred.as_slice().unwrap(), truth.as_slice().unwrap(), &mask);
        counts_ok &= s.n == report.valid_pixels;
        for (a, b) in [
            (report.mae.unwrap(), s.mae),
            (report.rmse.unwrap(), s.rmse),
            (report.one_pixel_accuracy.unwrap(), s.one_pa),
            (report.two_pixel_error.unwrap(), s.two_pe),
        ] {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(
        hand_ok && counts_ok && worst <= 1e-9,
        format!("hand case exact: {hand_ok}; simulator max diff {worst:.1e}; pixel counts agree: {counts_ok}"),
    )
}

type Criterion = (&'static str, Duration, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        ("warping identities", Duration::from_secs(1), warping_identities),
        ("disparity flow oracle", Duration::from_secs(5), disparity_flow_oracle),
        ("cost warp oracle", Duration::from_secs(10), cost_warp_oracle_check),
        ("TDC zero point", Duration::from_secs(30), tdc_zero_point),
        ("entropy and regression arithmetic", Duration::from_secs(1), entropy_arithmetic),
        ("stereo correctness at desk scale", Duration::from_secs(30), stereo_correctness),
        ("temporal benefit and mode ordering", Duration::from_secs(180), temporal_benefit),
        ("hard vs soft epipolar constraint", Duration::from_secs(120), hard_vs_soft),
        ("contrast loss direction", Duration::from_secs(60), contrast_direction),
        ("determinism and streaming state", Duration::from_secs(60), determinism_and_streaming),
        ("I/O round trips", Duration::from_secs(30), io_round_trips),
        ("metric double entry", Duration::from_secs(30), metric_double_entry),
    ];
    let mut failures = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let result = run();
        let elapsed = started.elapsed();
        let in_time = elapsed <= *budget;
        let pass = result.pass && in_time;
        if !pass {
            failures += 1;
        }
        println!(
            "{} {:>2} {name}: {} ({:.2} s, budget {} s{})",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            result.detail,
            elapsed.as_secs_f64(),
            budget.as_secs(),
            if in_time { "" } else { ", over budget" }
        );
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
