//! `tess`: command-line front end for the temporal event-stereo pipeline.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use tess_core::config::{RunConfig, CONFIG_KEYS};
use tess_core::engine::{features, step, StepTruth, TemporalState};
use tess_core::event::{downsample_grid, voxelize, EventStream};
use tess_core::flow::estimate_flow;
use tess_core::io::{
    read_disparity, read_events, read_flow, write_disparity, write_events, write_flow, write_voxels,
    DisparityFormat, EventFormat,
};
use tess_core::loss::{contrast_loss, smooth_l1, tdc_loss, total_loss, FlowTerms, StereoTerms, View};
use tess_core::metrics::{evaluate, MetricReport};
use tess_core::synth::{render_sequence, SceneSpec};
use tess_core::warp::DisparityMap;

const META_FILE: &str = "meta.txt";

/// Bad invocation: exit code 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Usage(msg.into()).into())
}

#[derive(Parser)]
#[command(name = "tess", version, about = "Temporal event stereo pipeline")]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

/// Run configuration: `--config FILE` plus one flag per key. Flags win
/// over the file, the file wins over defaults.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Plain-text `key = value` configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    bins: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    scale: Option<String>,
    #[arg(long = "max_disparity", alias = "max-disparity", global = true, value_name = "PX")]
    max_disparity: Option<String>,
    #[arg(long = "window_ms", alias = "window-ms", global = true, value_name = "MS")]
    window_ms: Option<String>,
    #[arg(long = "cost_window", alias = "cost-window", global = true, value_name = "N")]
    cost_window: Option<String>,
    #[arg(long = "aggregation_window", alias = "aggregation-window", global = true, value_name = "N")]
    aggregation_window: Option<String>,
    #[arg(long, global = true, value_name = "T")]
    temperature: Option<String>,
    #[arg(long, global = true, value_name = "S")]
    sharpness: Option<String>,
    #[arg(long = "search_radius", alias = "search-radius", global = true, value_name = "N")]
    search_radius: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    block: Option<String>,
    #[arg(long = "lambda_t", alias = "lambda-t", global = true, value_name = "W")]
    lambda_t: Option<String>,
    #[arg(long = "lambda_c", alias = "lambda-c", global = true, value_name = "W")]
    lambda_c: Option<String>,
    #[arg(long = "lambda_0", alias = "lambda-0", global = true, value_name = "W")]
    lambda_0: Option<String>,
    #[arg(long = "lambda_1", alias = "lambda-1", global = true, value_name = "W")]
    lambda_1: Option<String>,
    #[arg(long = "lambda_f", alias = "lambda-f", global = true, value_name = "W")]
    lambda_f: Option<String>,
    #[arg(long, global = true, value_name = "B")]
    beta: Option<String>,
    #[arg(long, global = true, value_name = "PX")]
    focal: Option<String>,
    #[arg(long, global = true, value_name = "M")]
    baseline: Option<String>,
    #[arg(long, global = true, value_name = "PX")]
    width: Option<String>,
    #[arg(long, global = true, value_name = "PX")]
    height: Option<String>,
    /// single | feature-warp | cost-warp | full
    #[arg(long, global = true)]
    mode: Option<String>,
    /// hard | soft
    #[arg(long, global = true)]
    constraint: Option<String>,
    #[arg(long = "reset_every", alias = "reset-every", global = true, value_name = "N")]
    reset_every: Option<String>,
}

impl ConfigArgs {
    fn flag(&self, key: &str) -> Option<&String> {
        match key {
            "bins" => self.bins.as_ref(),
            "scale" => self.scale.as_ref(),
            "max_disparity" => self.max_disparity.as_ref(),
            "window_ms" => self.window_ms.as_ref(),
            "cost_window" => self.cost_window.as_ref(),
            "aggregation_window" => self.aggregation_window.as_ref(),
            "temperature" => self.temperature.as_ref(),
            "sharpness" => self.sharpness.as_ref(),
            "search_radius" => self.search_radius.as_ref(),
            "block" => self.block.as_ref(),
            "lambda_t" => self.lambda_t.as_ref(),
            "lambda_c" => self.lambda_c.as_ref(),
            "lambda_0" => self.lambda_0.as_ref(),
            "lambda_1" => self.lambda_1.as_ref(),
            "lambda_f" => self.lambda_f.as_ref(),
            "beta" => self.beta.as_ref(),
            "focal" => self.focal.as_ref(),
            "baseline" => self.baseline.as_ref(),
            "width" => self.width.as_ref(),
            "height" => self.height.as_ref(),
            "mode" => self.mode.as_ref(),
            "constraint" => self.constraint.as_ref(),
            "reset_every" => self.reset_every.as_ref(),
            _ => None,
        }
    }

    /// Defaults, then `base` lines (sequence metadata), then the config
    /// file, then flags.
    fn resolve(&self, base: Option<&str>) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        if let Some(text) = base {
            config.apply_text(text).map_err(|e| Usage(format!("sequence metadata: {e}")))?;
        }
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            config
                .apply_text(&text)
                .map_err(|e| Usage(format!("{}: {e}", path.display())))?;
        }
        for key in CONFIG_KEYS {
            if let Some(value) = self.flag(key) {
                config.set(key, value).map_err(|e| Usage(format!("--{key}: {e}")))?;
            }
        }
        config.validate().map_err(|e| Usage(e.to_string()))?;
        Ok(config)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Bin,
}

impl From<FormatArg> for EventFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => EventFormat::Csv,
            FormatArg::Bin => EventFormat::Binary,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ViewArg {
    Left,
    Right,
}

#[derive(Subcommand)]
enum Command {
    /// Events to a voxel-grid dump.
    Voxelize {
        events: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Event file format; inferred from the extension when omitted.
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
        /// Window start in microseconds; the window lasts `window_ms`.
        #[arg(long, default_value_t = 0)]
        t0: u64,
        /// Pool the grid by this factor.
        #[arg(long, default_value_t = 1)]
        factor: usize,
    },
    /// Render a synthetic scene to event files and ground truth.
    Synth {
        /// Scene description (TOML).
        scene: PathBuf,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stereoscopic flow between two consecutive stereo frames.
    Flow {
        #[arg(long)]
        prev_left: PathBuf,
        #[arg(long)]
        prev_right: PathBuf,
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start of the previous window in microseconds.
        #[arg(long, default_value_t = 0)]
        t0: u64,
    },
    /// Run the pipeline over a sequence of stereo event files.
    Run {
        /// Directory written by `synth`; replaces --left/--right/--gt.
        #[arg(long, conflicts_with_all = ["left", "right"])]
        sequence: Option<PathBuf>,
        #[arg(long, num_args = 1..)]
        left: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        right: Vec<PathBuf>,
        /// Ground-truth disparity per frame (pfm or pgm).
        #[arg(long, num_args = 1..)]
        gt: Vec<PathBuf>,
        /// Start of the first window in microseconds.
        #[arg(long, default_value_t = 0)]
        t0: u64,
        /// Directory for per-step disparity maps.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a predicted disparity map with ground truth.
    Eval {
        pred: PathBuf,
        gt: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Human-readable table instead of key=value lines.
        #[arg(long)]
        human: bool,
        /// Leave out depth errors.
        #[arg(long)]
        no_depth: bool,
    },
    /// Print the resolved configuration as `key = value` lines.
    ShowConfig,
    /// Evaluate the training losses on given inputs.
    Losses {
        /// Flow dump.
        #[arg(long)]
        flow: Option<PathBuf>,
        /// Resolution scale of the flow dump.
        #[arg(long, default_value_t = 1)]
        flow_scale: usize,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        gt_prev: Option<PathBuf>,
        /// Events for the contrast term.
        #[arg(long)]
        events: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "left")]
        view: ViewArg,
        #[arg(long, default_value_t = 0)]
        t0: u64,
        /// Final prediction.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Auxiliary predictions; default to the final one.
        #[arg(long)]
        d0: Option<PathBuf>,
        #[arg(long)]
        d1: Option<PathBuf>,
    },
}

fn event_format(path: &Path, explicit: Option<FormatArg>) -> EventFormat {
    explicit.map_or_else(|| EventFormat::from_path(path), Into::into)
}

fn load_stream(path: &Path, config: &RunConfig, t0: u64) -> Result<EventStream> {
    let window = (t0, t0 + config.window_us());
    Ok(read_events(
        path,
        EventFormat::from_path(path),
        config.width,
        config.height,
        Some(window),
    )?)
}

fn load_disparity(path: &Path) -> Result<DisparityMap> {
    let format = DisparityFormat::from_path(path).map_err(|e| Usage(e.to_string()))?;
    Ok(read_disparity(path, format)?)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn cmd_voxelize(cfg: &ConfigArgs, events: &Path, out: &Path, format: Option<FormatArg>, t0: u64, factor: usize) -> Result<()> {
    let config = cfg.resolve(None)?;
    let window = (t0, t0 + config.window_us());
    let stream = read_events(events, event_format(events, format), config.width, config.height, Some(window))?;
    let grid = voxelize(&stream, config.bins)?;
    let grid = downsample_grid(&grid, factor).map_err(|e| Usage(e.to_string()))?;
    write_voxels(out, &grid)?;
    println!("events={}", stream.len());
    println!("bins={} height={} width={}", grid.bins(), grid.height(), grid.width());
    Ok(())
}

fn frame_name(k: usize, what: &str) -> String {
    format!("frame_{k:03}_{what}")
}

fn cmd_synth(scene: &Path, frames: usize, seed: u64, out: &Path) -> Result<()> {
    let spec = SceneSpec::load(scene).map_err(|e| Usage(e.to_string()))?;
    let rendered = render_sequence(&spec, frames, seed).map_err(|e| Usage(e.to_string()))?;
    create_dir(out)?;
    for (k, f) in rendered.iter().enumerate() {
        write_events(&out.join(frame_name(k, "left.bin")), &f.left_events, EventFormat::Binary)?;
        write_events(&out.join(frame_name(k, "right.bin")), &f.right_events, EventFormat::Binary)?;
        write_disparity(&out.join(frame_name(k, "disp.pfm")), &f.disp_gt, DisparityFormat::Pfm)?;
        write_flow(&out.join(frame_name(k, "flow.flow")), &f.flow_gt)?;
    }
    let window_us = (spec.frame_window * 1e6).round() as u64;
    if !window_us.is_multiple_of(1000) {
        bail!(Usage(format!("frame window {} s is not a whole number of milliseconds", spec.frame_window)));
    }
    let meta = format!(
        "frames = {frames}\nwidth = {}\nheight = {}\nfocal = {}\nbaseline = {}\nwindow_ms = {}\n",
        spec.width,
        spec.height,
        spec.focal,
        spec.baseline,
        window_us / 1000
    );
    fs::write(out.join(META_FILE), meta).with_context(|| format!("writing {}", out.display()))?;
    let events: usize = rendered.iter().map(|f| f.left_events.len() + f.right_events.len()).sum();
    println!("frames={frames} events={events}");
    Ok(())
}

fn cmd_flow(cfg: &ConfigArgs, paths: [&Path; 4], out: &Path, t0: u64) -> Result<()> {
    let config = cfg.resolve(None)?;
    let t1 = t0 + config.window_us();
    let prev_left = features(&load_stream(paths[0], &config, t0)?, &config)?;
    let prev_right = features(&load_stream(paths[1], &config, t0)?, &config)?;
    let left = features(&load_stream(paths[2], &config, t1)?, &config)?;
    let right = features(&load_stream(paths[3], &config, t1)?, &config)?;
    let estimate = estimate_flow(&prev_left, &prev_right, &left, &right, &config.flow_config())?;
    write_flow(out, &estimate.flow)?;
    let (h, w) = estimate.flow.dim();
    let confident = estimate.confident.iter().filter(|&&c| c).count();
    println!("height={h} width={w} scale={}", estimate.flow.scale);
    println!("confident_fraction={}", confident as f64 / (h * w) as f64);
    Ok(())
}

/// Files of a directory written by `synth`.
struct Sequence {
    /// Metadata lines that are config keys.
    config: String,
    left: Vec<PathBuf>,
    right: Vec<PathBuf>,
    gt: Vec<PathBuf>,
}

fn read_sequence(dir: &Path) -> Result<Sequence> {
    let meta_path = dir.join(META_FILE);
    let meta = fs::read_to_string(&meta_path).with_context(|| format!("reading {}", meta_path.display()))?;
    let mut frames = None;
    let mut config_lines = String::new();
    for line in meta.lines() {
        match line.split_once('=') {
            Some((k, v)) if k.trim() == "frames" => {
                frames = Some(v.trim().parse::<usize>().context("frame count in sequence metadata")?);
            }
            _ => {
                config_lines.push_str(line);
                config_lines.push('\n');
            }
        }
    }
    let n = frames.context("sequence metadata lacks a frame count")?;
    let list = |what: &str| (0..n).map(|k| dir.join(frame_name(k, what))).collect::<Vec<_>>();
    Ok(Sequence {
        config: config_lines,
        left: list("left.bin"),
        right: list("right.bin"),
        gt: list("disp.pfm"),
    })
}

fn cmd_run(cfg: &ConfigArgs, sequence: Option<&Path>, left: &[PathBuf], right: &[PathBuf], gt: &[PathBuf], t0: u64, out: &Path) -> Result<()> {
    let (meta, left, right, gt) = match sequence {
        Some(dir) => {
            let seq = read_sequence(dir)?;
            let gt = if gt.is_empty() { seq.gt } else { gt.to_vec() };
            (Some(seq.config), seq.left, seq.right, gt)
        }
        None => (None, left.to_vec(), right.to_vec(), gt.to_vec()),
    };
    if left.len() != right.len() {
        return usage(format!("{} left files but {} right files", left.len(), right.len()));
    }
    if !gt.is_empty() && gt.len() != left.len() {
        return usage(format!("{} ground-truth files for {} frames", gt.len(), left.len()));
    }
    let config = cfg.resolve(meta.as_deref())?;
    create_dir(out)?;

    let truth: Vec<DisparityMap> = gt.iter().map(|p| load_disparity(p)).collect::<Result<_>>()?;
    let mut state = TemporalState::new();
    let mut reports: Vec<Option<MetricReport>> = Vec::new();
    for k in 0..left.len() {
        let start = t0 + k as u64 * config.window_us();
        let l = load_stream(&left[k], &config, start)?;
        let r = load_stream(&right[k], &config, start)?;
        let step_truth = truth.get(k).map(|d| StepTruth {
            disparity: d,
            prev_disparity: k.checked_sub(1).and_then(|p| truth.get(p)),
        });
        let (output, next) = step(state, &l, &r, &config, step_truth)?;
        state = next;
        write_disparity(&out.join(format!("step_{k:03}_disp.pfm")), &output.disparity, DisparityFormat::Pfm)?;
        info!("step {k}: {:.1} ms", output.diagnostics.elapsed.as_secs_f64() * 1e3);
        let mut line = format!("step={k} temporal={}", output.diagnostics.used_temporal);
        if let Some(m) = &output.diagnostics.metrics {
            for (key, v) in m.entries() {
                line.push_str(&format!(" {key}={}", v.map_or("nan".to_string(), |v| v.to_string())));
            }
        }
        if let Some(loss) = &output.diagnostics.losses {
            line.push_str(&format!(" loss_total={}", loss.total));
        }
        println!("{line}");
        reports.push(output.diagnostics.metrics);
    }
    if !truth.is_empty() {
        let json = serde_json::to_string_pretty(&reports)?;
        fs::write(out.join("metrics.json"), json).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn cmd_eval(cfg: &ConfigArgs, pred: &Path, gt: &Path, json: Option<&Path>, human: bool, no_depth: bool) -> Result<()> {
    let config = cfg.resolve(None)?;
    let pred = load_disparity(pred)?;
    let gt = load_disparity(gt)?;
    let cam = config.intrinsics();
    let report = evaluate(&pred, &gt, (!no_depth).then_some(&cam))?;
    if human {
        print!("{}", report.to_human());
    } else {
        print!("{}", report.to_key_value());
    }
    if let Some(path) = json {
        fs::write(path, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_losses(
    cfg: &ConfigArgs,
    flow: Option<&Path>,
    flow_scale: usize,
    gt: &Path,
    gt_prev: Option<&Path>,
    events: Option<&Path>,
    view: ViewArg,
    t0: u64,
    preds: [Option<&Path>; 3],
) -> Result<()> {
    let config = cfg.resolve(None)?;
    let weights = &config.weights;
    let gt_map = load_disparity(gt)?;
    let (h, w) = gt_map.dim();
    let flow = match flow {
        Some(p) => Some(read_flow(p, flow_scale)?),
        None => None,
    };
    let mut flow_terms = FlowTerms::default();
    if let (Some(f), Some(prev)) = (&flow, gt_prev) {
        let full = if f.scale > 1 { f.upsample(f.scale, h, w) } else { f.clone() };
        let loss = tdc_loss(&full, &load_disparity(prev)?, &gt_map, weights.beta)?;
        flow_terms.tdc = loss.value;
        println!("tdc={} tdc_pixels={}", loss.value, loss.valid_pixels);
    }
    if let Some(path) = events {
        let Some(f) = &flow else {
            return usage("--events needs --flow");
        };
        let stream = load_stream(path, &config, t0)?;
        let view = match view {
            ViewArg::Left => View::Left,
            ViewArg::Right => View::Right,
        };
        flow_terms.contrast = contrast_loss(&stream, f, view)?;
        println!("contrast={}", flow_terms.contrast);
    }
    let mut stereo = StereoTerms::default();
    if let Some(final_path) = preds[2] {
        let d_final = load_disparity(final_path)?;
        let term = |p: Option<&Path>| -> Result<f64> {
            let map = match p {
                Some(p) => load_disparity(p)?,
                None => d_final.clone(),
            };
            Ok(smooth_l1(&map, &gt_map, weights.beta)?.value)
        };
        stereo = StereoTerms {
            d0: term(preds[0])?,
            d1: term(preds[1])?,
            d_final: term(None)?,
        };
        println!("stereo_d0={} stereo_d1={} stereo_final={}", stereo.d0, stereo.d1, stereo.d_final);
    }
    println!("total={}", total_loss(&flow_terms, &stereo, weights));
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("TESS_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .map_err(|_| Usage(format!("TESS_THREADS must be a non-negative integer, got '{value}'")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    configure_threads()?;
    let cfg = &cli.config;
    match &cli.command {
        Command::Voxelize { events, out, format, t0, factor } => cmd_voxelize(cfg, events, out, *format, *t0, *factor),
        Command::Synth { scene, frames, seed, out } => cmd_synth(scene, *frames, *seed, out),
        Command::Flow { prev_left, prev_right, left, right, out, t0 } => {
            cmd_flow(cfg, [prev_left, prev_right, left, right], out, *t0)
        }
        Command::Run { sequence, left, right, gt, t0, out } => cmd_run(cfg, sequence.as_deref(), left, right, gt, *t0, out),
        Command::Eval { pred, gt, json, human, no_depth } => cmd_eval(cfg, pred, gt, json.as_deref(), *human, *no_depth),
        Command::ShowConfig => {
            print!("{}", cfg.resolve(None)?.to_text());
            Ok(())
        }
        Command::Losses { flow, flow_scale, gt, gt_prev, events, view, t0, pred, d0, d1 } => cmd_losses(
            cfg,
            flow.as_deref(),
            *flow_scale,
            gt,
            gt_prev.as_deref(),
            events.as_deref(),
            *view,
            *t0,
            [d0.as_deref(), d1.as_deref(), pred.as_deref()],
        ),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<tess_core::Error>() {
        Some(tess_core::Error::Parameter(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
