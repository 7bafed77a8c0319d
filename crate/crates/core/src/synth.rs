//! Synthetic rectified stereo event camera with exact ground truth.
//!
//! A scene is a stack of textured fronto-parallel planes. Each plane
//! translates in the image at a fixed velocity and its depth follows a
//! piecewise-linear schedule; as depth changes the texture magnifies about
//! the principal point. Because a fronto-parallel plane appears in the right
//! view as the left view shifted by a constant disparity, ground-truth
//! disparity and stereoscopic flow are closed-form.
//!
//! Events come from a per-pixel log-intensity crossing model: each time the
//! log intensity moves one contrast threshold away from the pixel's
//! reference level an event is emitted, timestamped by linear interpolation
//! between simulation substeps.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{Event, EventStream, Polarity};
use crate::metrics::CameraIntrinsics;
use crate::warp::{DisparityMap, StereoscopicFlow};

fn default_window() -> f64 {
    0.05
}

fn default_threshold() -> f64 {
    0.2
}

fn default_substeps() -> usize {
    24
}

fn default_cell() -> f64 {
    4.0
}

/// Scene description, loadable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels.
    pub focal: f64,
    /// Baseline in meters.
    pub baseline: f64,
    /// Optional cap on the rendered time span, seconds.
    #[serde(default)]
    pub duration: Option<f64>,
    /// Frame window, seconds.
    #[serde(default = "default_window")]
    pub frame_window: f64,
    /// Log-intensity contrast threshold.
    #[serde(default = "default_threshold")]
    pub contrast_threshold: f64,
    /// Relative standard deviation of a per-pixel threshold offset.
    #[serde(default)]
    pub threshold_jitter: f64,
    /// Log-intensity samples per frame window.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(rename = "plane", default)]
    pub planes: Vec<PlaneSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSpec {
    /// `(time s, depth m)` keyframes, linearly interpolated and held
    /// constant outside their range.
    pub depth: Vec<[f64; 2]>,
    /// Image-plane velocity in px/s.
    #[serde(default)]
    pub velocity: [f64; 2],
    #[serde(default)]
    pub texture_seed: u64,
    /// Texture lattice spacing in pixels.
    #[serde(default = "default_cell")]
    pub texture_cell: f64,
    /// `[x0, y0, x1, y1]` in left-image pixels at `t = 0`; `None` covers
    /// the whole image plane.
    #[serde(default)]
    pub extent: Option<[f64; 4]>,
}

impl PlaneSpec {
    pub fn constant(depth: f64, velocity: [f64; 2], texture_seed: u64) -> Self {
        Self {
            depth: vec![[0.0, depth]],
            velocity,
            texture_seed,
            texture_cell: default_cell(),
            extent: None,
        }
    }

    pub fn depth_at(&self, t: f64) -> f64 {
        let keys = &self.depth;
        if t <= keys[0][0] {
            return keys[0][1];
        }
        for pair in keys.windows(2) {
            let ([t0, z0], [t1, z1]) = (pair[0], pair[1]);
            if t <= t1 {
                if t1 <= t0 {
                    return z1;
                }
                return z0 + (z1 - z0) * (t - t0) / (t1 - t0);
            }
        }
        keys[keys.len() - 1][1]
    }

    fn magnification(&self, t: f64) -> f64 {
        self.depth_at(0.0) / self.depth_at(t)
    }

    fn contains(&self, a: f64, b: f64) -> bool {
        match self.extent {
            None => true,
            Some([x0, y0, x1, y1]) => a >= x0 && a < x1 && b >= y0 && b < y1,
        }
    }
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)
            .map_err(|e| Error::Parameter(format!("scene description: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.width > u16::MAX as usize || self.height > u16::MAX as usize {
            return Err(Error::Parameter(format!("bad sensor size {}x{}", self.width, self.height)));
        }
        CameraIntrinsics::new(self.focal, self.baseline)?;
        if !(self.frame_window > 0.0) || !(self.contrast_threshold > 0.0) || self.substeps == 0 {
            return Err(Error::Parameter(
                "frame window, contrast threshold and substeps must be positive".into(),
            ));
        }
        if !(self.threshold_jitter >= 0.0) {
            return Err(Error::Parameter("threshold jitter must be non-negative".into()));
        }
        for (i, p) in self.planes.iter().enumerate() {
            if p.depth.is_empty() || p.depth.iter().any(|&[_, z]| !(z > 0.0) || !z.is_finite()) {
                return Err(Error::Parameter(format!("plane {i}: depths must be positive")));
            }
            if p.depth.windows(2).any(|w| w[1][0] < w[0][0]) {
                return Err(Error::Parameter(format!("plane {i}: depth keyframes out of order")));
            }
            if !(p.texture_cell > 0.0) {
                return Err(Error::Parameter(format!("plane {i}: texture cell must be positive")));
            }
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            focal: self.focal,
            baseline: self.baseline,
        }
    }

    fn principal_point(&self) -> (f64, f64) {
        ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }

    fn plane_disparity(&self, plane: &PlaneSpec, t: f64) -> f64 {
        self.focal * self.baseline / plane.depth_at(t)
    }

    /// Texture coordinate of left-image position `(u, v)` at time `t`.
    fn texcoord(&self, plane: &PlaneSpec, u: f64, v: f64, t: f64) -> (f64, f64) {
        let (cx, cy) = self.principal_point();
        let m = plane.magnification(t);
        (
            cx + (u - cx) / m - plane.velocity[0] * t,
            cy + (v - cy) / m - plane.velocity[1] * t,
        )
    }

    /// Left-image position of texture coordinate `(a, b)` at time `t`.
    fn project(&self, plane: &PlaneSpec, a: f64, b: f64, t: f64) -> (f64, f64) {
        let (cx, cy) = self.principal_point();
        let m = plane.magnification(t);
        (
            cx + (a + plane.velocity[0] * t - cx) * m,
            cy + (b + plane.velocity[1] * t - cy) * m,
        )
    }

    /// Nearest plane covering a pixel of the given view at time `t`.
    fn visible(&self, view_right: bool, u: f64, v: f64, t: f64) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in self.planes.iter().enumerate() {
            let u_left = if view_right { u + self.plane_disparity(p, t) } else { u };
            let (a, b) = self.texcoord(p, u_left, v, t);
            if !p.contains(a, b) {
                continue;
            }
            let z = p.depth_at(t);
            if best.is_none_or(|(_, bz)| z < bz) {
                best = Some((i, z));
            }
        }
        best.map(|(i, _)| i)
    }

    /// Ground-truth left disparity at `(u, v)`, time `t`.
    pub fn disparity_at(&self, u: f64, v: f64, t: f64) -> Option<f64> {
        let i = self.visible(false, u, v, t)?;
        Some(self.plane_disparity(&self.planes[i], t))
    }

    /// Backward flow `(dx, dy)` of the left view from `t` to `t_prev`.
    pub fn left_flow_at(&self, u: f64, v: f64, t_prev: f64, t: f64) -> Option<(f64, f64)> {
        let p = &self.planes[self.visible(false, u, v, t)?];
        let (a, b) = self.texcoord(p, u, v, t);
        let (up, vp) = self.project(p, a, b, t_prev);
        Some((up - u, vp - v))
    }

    /// Backward flow `(dx, dy)` of the right view from `t` to `t_prev`.
    pub fn right_flow_at(&self, u_right: f64, v: f64, t_prev: f64, t: f64) -> Option<(f64, f64)> {
        let p = &self.planes[self.visible(true, u_right, v, t)?];
        let u_left = u_right + self.plane_disparity(p, t);
        let (a, b) = self.texcoord(p, u_left, v, t);
        let (up, vp) = self.project(p, a, b, t_prev);
        let u_right_prev = up - self.plane_disparity(p, t_prev);
        Some((u_right_prev - u_right, vp - v))
    }

    fn log_intensity(&self, textures: &[u64], view_right: bool, u: f64, v: f64, t: f64) -> f64 {
        match self.visible(view_right, u, v, t) {
            None => BACKGROUND_INTENSITY.ln(),
            Some(i) => {
                let p = &self.planes[i];
                let u_left = if view_right { u + self.plane_disparity(p, t) } else { u };
                let (a, b) = self.texcoord(p, u_left, v, t);
                let tex = value_noise(textures[i], a / p.texture_cell, b / p.texture_cell);
                (0.1 + 0.9 * tex).ln()
            }
        }
    }
}

const BACKGROUND_INTENSITY: f64 = 0.5;

/// One rendered frame: both event streams over the frame window and the
/// ground truth at the window end.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleFrame {
    pub left_events: EventStream,
    pub right_events: EventStream,
    pub disp_gt: DisparityMap,
    /// Backward flow from this frame's end time to the previous frame's.
    pub flow_gt: StereoscopicFlow,
    /// Pixels of the right view covered by a plane.
    pub right_coverage: Array2<bool>,
    /// Frame end time, seconds.
    pub time: f64,
}

fn mix(seed: u64, salt: u64) -> u64 {
    splitmix(seed ^ splitmix(salt.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, i: i64, j: i64) -> f64 {
    let h = mix(mix(seed, i as u64), j as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smoothstep-interpolated value noise in `[0, 1]`.
fn value_noise(seed: u64, a: f64, b: f64) -> f64 {
    let (i, j) = (a.floor(), b.floor());
    let (fa, fb) = (a - i, b - j);
    let (sa, sb) = (fa * fa * (3.0 - 2.0 * fa), fb * fb * (3.0 - 2.0 * fb));
    let (i, j) = (i as i64, j as i64);
    let v00 = lattice(seed, i, j);
    let v10 = lattice(seed, i + 1, j);
    let v01 = lattice(seed, i, j + 1);
    let v11 = lattice(seed, i + 1, j + 1);
    let top = v00 + (v10 - v00) * sa;
    let bottom = v01 + (v11 - v01) * sa;
    top + (bottom - top) * sb
}

/// Renders `n_frames` consecutive frames of the scene.
pub fn render_sequence(spec: &SceneSpec, n_frames: usize, seed: u64) -> Result<Vec<OracleFrame>> {
    spec.validate()?;
    if n_frames == 0 {
        return Err(Error::Parameter("need at least one frame".into()));
    }
    if let Some(limit) = spec.duration {
        if n_frames as f64 * spec.frame_window > limit + 1e-9 {
            return Err(Error::Parameter(format!(
                "{n_frames} frames of {} s exceed the scene duration {limit} s",
                spec.frame_window
            )));
        }
    }
    let textures: Vec<u64> = spec.planes.iter().map(|p| mix(p.texture_seed, seed)).collect();
    let window_us = (spec.frame_window * 1e6).round() as u64;
    if window_us == 0 {
        return Err(Error::Parameter("frame window shorter than a microsecond".into()));
    }
    let (w, h) = (spec.width, spec.height);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut thresholds = [Array2::zeros((h, w)), Array2::zeros((h, w))];
    for plane in &mut thresholds {
        for c in plane.iter_mut() {
            let jitter: f64 = if spec.threshold_jitter > 0.0 {
                StandardNormal.sample(&mut rng)
            } else {
                0.0
            };
            *c = spec.contrast_threshold * (1.0 + spec.threshold_jitter * jitter).max(0.1);
        }
    }

    let mut per_view = Vec::with_capacity(2);
    for (view, threshold) in thresholds.iter().enumerate() {
        let right = view == 1;
        let rows: Vec<Vec<Vec<Event>>> = (0..h)
            .into_par_iter()
            .map(|y| simulate_row(spec, &textures, right, y, threshold, n_frames, window_us))
            .collect();
        let mut frames: Vec<Vec<Event>> = vec![Vec::new(); n_frames];
        for row in rows {
            for (k, evs) in row.into_iter().enumerate() {
                frames[k].extend(evs);
            }
        }
        for evs in &mut frames {
            evs.sort_by_key(|e| (e.t, e.y, e.x, e.polarity.as_bit()));
        }
        per_view.push(frames);
    }
    let right_frames = per_view.pop().expect("two views");
    let left_frames = per_view.pop().expect("two views");

    let mut out = Vec::with_capacity(n_frames);
    for (k, (left, right)) in left_frames.into_iter().zip(right_frames).enumerate() {
        let t0 = k as u64 * window_us;
        let t1 = t0 + window_us;
        let time = t1 as f64 * 1e-6;
        let t_prev = t0 as f64 * 1e-6;
        let (disp_gt, flow_gt, right_coverage) = ground_truth(spec, t_prev, time);
        out.push(OracleFrame {
            left_events: EventStream::new(left, w, h, t0, t1)?,
            right_events: EventStream::new(right, w, h, t0, t1)?,
            disp_gt,
            flow_gt,
            right_coverage,
            time,
        });
    }
    Ok(out)
}

fn simulate_row(
    spec: &SceneSpec,
    textures: &[u64],
    right: bool,
    y: usize,
    threshold: &Array2<f64>,
    n_frames: usize,
    window_us: u64,
) -> Vec<Vec<Event>> {
    let w = spec.width;
    let v = y as f64;
    let mut out = vec![Vec::new(); n_frames];
    let mut reference: Vec<f64> = (0..w)
        .map(|x| spec.log_intensity(textures, right, x as f64, v, 0.0))
        .collect();
    let mut last = reference.clone();
    let step_us = window_us as f64 / spec.substeps as f64;
    for (k, events) in out.iter_mut().enumerate() {
        let frame_start = k as u64 * window_us;
        let frame_end = frame_start + window_us;
        for j in 1..=spec.substeps {
            let t_hi = frame_start as f64 + j as f64 * step_us;
            let t_lo = t_hi - step_us;
            for x in 0..w {
                let c = threshold[[y, x]];
                let now = spec.log_intensity(textures, right, x as f64, v, t_hi * 1e-6);
                let before = last[x];
                let delta = now - before;
                let mut emit = |level: f64, polarity: Polarity| {
                    let frac = if delta != 0.0 { (level - before) / delta } else { 1.0 };
                    let t = (t_lo + frac.clamp(0.0, 1.0) * step_us).floor() as u64;
                    let t = t.clamp(frame_start, frame_end - 1);
                    events.push(Event::new(t, x as u16, y as u16, polarity));
                };
                while now - reference[x] >= c {
                    reference[x] += c;
                    emit(reference[x], Polarity::Positive);
                }
                while reference[x] - now >= c {
                    reference[x] -= c;
                    emit(reference[x], Polarity::Negative);
                }
                last[x] = now;
            }
        }
    }
    out
}

fn ground_truth(spec: &SceneSpec, t_prev: f64, t: f64) -> (DisparityMap, StereoscopicFlow, Array2<bool>) {
    let (w, h) = (spec.width, spec.height);
    let mut disp = DisparityMap::new(Array2::zeros((h, w)), Array2::from_elem((h, w), false)).expect("same shape");
    let mut flow = StereoscopicFlow::zeros(h, w, 1);
    let mut dy_right = Array2::zeros((h, w));
    let mut right_coverage = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64, y as f64);
            if let Some(d) = spec.disparity_at(u, v, t) {
                disp.data[[y, x]] = d;
                disp.validity[[y, x]] = true;
            }
            if let Some((dx, dy)) = spec.left_flow_at(u, v, t_prev, t) {
                flow.dx_left[[y, x]] = dx;
                flow.dy[[y, x]] = dy;
            }
            if let Some((dx, dy)) = spec.right_flow_at(u, v, t_prev, t) {
                flow.dx_right[[y, x]] = dx;
                dy_right[[y, x]] = dy;
                right_coverage[[y, x]] = true;
            }
        }
    }
    if dy_right != flow.dy {
        flow.dy_right = Some(dy_right);
    }
    (disp, flow, right_coverage)
}

/// Independently drops each event with probability `rate`. Ground truth is
/// left untouched.
pub fn dropout_events(frame: &OracleFrame, rate: f64, seed: u64) -> Result<OracleFrame> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut thin = |s: &EventStream| -> Result<EventStream> {
        let kept = s
            .events()
            .iter()
            .filter(|_| !rng.random_bool(rate))
            .copied()
            .collect();
        s.with_events(kept)
    };
    let left_events = thin(&frame.left_events)?;
    let right_events = thin(&frame.right_events)?;
    Ok(OracleFrame {
        left_events,
        right_events,
        ..frame.clone()
    })
}
