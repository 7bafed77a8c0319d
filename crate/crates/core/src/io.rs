//! File formats: event streams (CSV and packed binary), disparity maps
//! (PFM and 16-bit PGM) and raw float32 plane dumps for flows and voxel
//! grids.
//!
//! Plane dump layout (all little-endian):
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic (`TSFL` flow, `TSVX` voxels) |
//! | 4      | 4    | width, u32                    |
//! | 8      | 4    | height, u32                   |
//! | 12     | 4    | plane count, u32              |
//! | 16     | ...  | f32 values, plane-major, row-major |

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::event::{Event, EventStream, Polarity, VoxelGrid};
use crate::warp::{DisparityMap, StereoscopicFlow};

pub const FLOW_MAGIC: [u8; 4] = *b"TSFL";
pub const VOXEL_MAGIC: [u8; 4] = *b"TSVX";

/// Bytes per binary event record: u64 t, u16 x, u16 y, i8 polarity.
pub const EVENT_RECORD_BYTES: usize = 13;

/// PGM16 stores `disparity * 256`.
pub const PGM_DISPARITY_SCALE: f64 = 256.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Binary,
}

impl EventFormat {
    /// Guesses from the extension: `.csv`/`.txt` are CSV, anything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") | Some("txt") => EventFormat::Csv,
            _ => EventFormat::Binary,
        }
    }
}

impl FromStr for EventFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(EventFormat::Csv),
            "binary" | "bin" => Ok(EventFormat::Binary),
            other => Err(Error::Parameter(format!("unknown event format '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DisparityFormat {
    Pfm,
    Pgm16,
}

impl DisparityFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("pfm") => Ok(DisparityFormat::Pfm),
            Some("pgm") => Ok(DisparityFormat::Pgm16),
            _ => Err(Error::Parameter(format!(
                "cannot infer disparity format of {}",
                path.display()
            ))),
        }
    }
}

impl FromStr for DisparityFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pfm" => Ok(DisparityFormat::Pfm),
            "pgm" | "pgm16" => Ok(DisparityFormat::Pgm16),
            other => Err(Error::Parameter(format!("unknown disparity format '{other}'"))),
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Reads an event file. Without an explicit `window`, the stream spans
/// from the first event to one microsecond past the last (or `[0, 0)` when
/// empty).
pub fn read_events(
    path: &Path,
    format: EventFormat,
    width: usize,
    height: usize,
    window: Option<(u64, u64)>,
) -> Result<EventStream> {
    let events = match format {
        EventFormat::Csv => parse_csv_events(path)?,
        EventFormat::Binary => parse_binary_events(path)?,
    };
    for (i, (e, what)) in events.iter().enumerate() {
        if e.x as usize >= width || e.y as usize >= height {
            return Err(Error::format(
                path,
                format!("{what}: coordinate ({}, {}) outside {width}x{height} sensor", e.x, e.y),
            ));
        }
        if i > 0 && events[i - 1].0.t > e.t {
            return Err(Error::format(
                path,
                format!("{what}: timestamp {} precedes {}", e.t, events[i - 1].0.t),
            ));
        }
        if let Some((t0, t1)) = window {
            if e.t < t0 || e.t >= t1 {
                return Err(Error::format(
                    path,
                    format!("{what}: timestamp {} outside window [{t0}, {t1})", e.t),
                ));
            }
        }
    }
    let (t0, t1) = window.unwrap_or_else(|| match (events.first(), events.last()) {
        (Some(a), Some(b)) => (a.0.t, b.0.t + 1),
        _ => (0, 0),
    });
    let events = events.into_iter().map(|(e, _)| e).collect();
    EventStream::new(events, width, height, t0, t1).map_err(|e| Error::format(path, e.to_string()))
}

fn parse_csv_events(path: &Path) -> Result<Vec<(Event, String)>> {
    let reader = open(path)?;
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let where_ = format!("line {}", i + 1);
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::format(path, format!("{where_}: expected t_us,x,y,p")));
        }
        let bad = |what: &str| Error::format(path, format!("{where_}: bad {what} '{trimmed}'"));
        let t: u64 = fields[0].parse().map_err(|_| bad("timestamp"))?;
        let x: u16 = fields[1].parse().map_err(|_| bad("x"))?;
        let y: u16 = fields[2].parse().map_err(|_| bad("y"))?;
        let bit: u8 = fields[3].parse().map_err(|_| bad("polarity"))?;
        let p = Polarity::from_bit(bit).ok_or_else(|| bad("polarity"))?;
        out.push((Event::new(t, x, y, p), where_));
    }
    Ok(out)
}

fn parse_binary_events(path: &Path) -> Result<Vec<(Event, String)>> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() % EVENT_RECORD_BYTES != 0 {
        return Err(Error::format(
            path,
            format!("size {} is not a multiple of {EVENT_RECORD_BYTES}", bytes.len()),
        ));
    }
    bytes
        .chunks_exact(EVENT_RECORD_BYTES)
        .enumerate()
        .map(|(i, r)| {
            let t = u64::from_le_bytes(r[0..8].try_into().unwrap());
            let x = u16::from_le_bytes(r[8..10].try_into().unwrap());
            let y = u16::from_le_bytes(r[10..12].try_into().unwrap());
            let p = Polarity::from_sign(r[12] as i8)
                .ok_or_else(|| Error::format(path, format!("record {i}: polarity {}", r[12] as i8)))?;
            Ok((Event::new(t, x, y, p), format!("record {i}")))
        })
        .collect()
}

pub fn write_events(path: &Path, stream: &EventStream, format: EventFormat) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    match format {
        EventFormat::Csv => {
            for e in stream.events() {
                writeln!(w, "{},{},{},{}", e.t, e.x, e.y, e.polarity.as_bit()).map_err(io)?;
            }
        }
        EventFormat::Binary => {
            for e in stream.events() {
                w.write_all(&e.t.to_le_bytes()).map_err(io)?;
                w.write_all(&e.x.to_le_bytes()).map_err(io)?;
                w.write_all(&e.y.to_le_bytes()).map_err(io)?;
                w.write_all(&[e.polarity.as_i8() as u8]).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

/// Reads the whitespace-separated header tokens of a PNM-style file,
/// skipping `#` comments. Consumes exactly one whitespace byte after the
/// last token.
fn read_header_tokens(reader: &mut impl BufRead, count: usize, path: &Path) -> Result<Vec<String>> {
    let mut tokens = Vec::with_capacity(count);
    let mut current = String::new();
    let mut in_comment = false;
    let mut byte = [0u8; 1];
    while tokens.len() < count {
        let n = reader.read(&mut byte).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::format(path, "truncated header"));
        }
        let c = byte[0] as char;
        if in_comment {
            in_comment = c != '\n';
            continue;
        }
        if c == '#' {
            in_comment = true;
        } else if c.is_ascii_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else {
            current.push(c);
        }
    }
    Ok(tokens)
}

pub fn read_disparity(path: &Path, format: DisparityFormat) -> Result<DisparityMap> {
    match format {
        DisparityFormat::Pfm => read_pfm(path),
        DisparityFormat::Pgm16 => read_pgm16(path),
    }
}

pub fn write_disparity(path: &Path, disp: &DisparityMap, format: DisparityFormat) -> Result<()> {
    match format {
        DisparityFormat::Pfm => write_pfm(path, disp),
        DisparityFormat::Pgm16 => write_pgm16(path, disp),
    }
}

/// Single-channel PFM. Rows are stored bottom to top; a negative scale
/// marks little-endian data. Non-finite values read as invalid pixels.
pub fn read_pfm(path: &Path) -> Result<DisparityMap> {
    let mut r = open(path)?;
    let header = read_header_tokens(&mut r, 4, path)?;
    if header[0] != "Pf" {
        return Err(Error::format(path, format!("expected single-channel 'Pf', found '{}'", header[0])));
    }
    let parse = |s: &str, what: &str| -> Result<f64> {
        s.parse::<f64>().map_err(|_| Error::format(path, format!("bad {what} '{s}'")))
    };
    let width = parse(&header[1], "width")? as usize;
    let height = parse(&header[2], "height")? as usize;
    let scale = parse(&header[3], "scale")?;
    if scale == 0.0 {
        return Err(Error::format(path, "scale must be non-zero"));
    }
    let little = scale < 0.0;
    let mut bytes = vec![0u8; width * height * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::format(path, "truncated pixel data"))?;
    let mut data = Array2::zeros((height, width));
    let mut validity = Array2::from_elem((height, width), false);
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let raw: [u8; 4] = chunk.try_into().unwrap();
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, x) = (i / width, i % width);
        let y = height - 1 - row;
        if v.is_finite() {
            data[[y, x]] = v as f64;
            validity[[y, x]] = true;
        }
    }
    Ok(DisparityMap { data, validity })
}

/// Writes little-endian PFM; invalid pixels are stored as `+inf`.
pub fn write_pfm(path: &Path, disp: &DisparityMap) -> Result<()> {
    let (h, w) = disp.dim();
    let mut out = create(path)?;
    let io = |e| Error::io(path, e);
    write!(out, "Pf\n{w} {h}\n-1.0\n").map_err(io)?;
    for y in (0..h).rev() {
        for x in 0..w {
            let v = if disp.validity[[y, x]] { disp.data[[y, x]] as f32 } else { f32::INFINITY };
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

/// 16-bit PGM with `disparity = raw / 256`; raw 0 is an invalid pixel.
pub fn read_pgm16(path: &Path) -> Result<DisparityMap> {
    let mut r = open(path)?;
    let header = read_header_tokens(&mut r, 4, path)?;
    if header[0] != "P5" {
        return Err(Error::format(path, format!("expected binary PGM 'P5', found '{}'", header[0])));
    }
    let parse = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>().map_err(|_| Error::format(path, format!("bad {what} '{s}'")))
    };
    let width = parse(&header[1], "width")?;
    let height = parse(&header[2], "height")?;
    let maxval = parse(&header[3], "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(path, format!("maxval {maxval} out of range")));
    }
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let mut bytes = vec![0u8; width * height * bytes_per];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::format(path, "truncated pixel data"))?;
    let mut data = Array2::zeros((height, width));
    let mut validity = Array2::from_elem((height, width), false);
    for i in 0..width * height {
        let raw = if bytes_per == 2 {
            u16::from_be_bytes([bytes[2 * i], bytes[2 * i + 1]])
        } else {
            bytes[i] as u16
        };
        if raw > 0 {
            let (y, x) = (i / width, i % width);
            data[[y, x]] = raw as f64 / PGM_DISPARITY_SCALE;
            validity[[y, x]] = true;
        }
    }
    Ok(DisparityMap { data, validity })
}

/// Writes 16-bit PGM. Valid disparities are rounded to 1/256 px and kept
/// inside `1..=65535` so they stay valid on reading.
pub fn write_pgm16(path: &Path, disp: &DisparityMap) -> Result<()> {
    let (h, w) = disp.dim();
    let mut out = create(path)?;
    let io = |e| Error::io(path, e);
    write!(out, "P5\n{w} {h}\n65535\n").map_err(io)?;
    for y in 0..h {
        for x in 0..w {
            let raw = if disp.validity[[y, x]] && disp.data[[y, x]].is_finite() {
                (disp.data[[y, x]] * PGM_DISPARITY_SCALE).round().clamp(1.0, 65535.0) as u16
            } else {
                0
            };
            out.write_all(&raw.to_be_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

/// Writes planes as a raw float32 dump with the given magic.
pub fn write_planes(path: &Path, magic: [u8; 4], planes: &[&Array2<f64>]) -> Result<()> {
    let (h, w) = planes.first().map_or((0, 0), |p| p.dim());
    if planes.iter().any(|p| p.dim() != (h, w)) {
        return Err(Error::Dimension("planes in one dump must share a shape".into()));
    }
    let mut out = create(path)?;
    let io = |e| Error::io(path, e);
    out.write_all(&magic).map_err(io)?;
    for v in [w as u32, h as u32, planes.len() as u32] {
        out.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    for p in planes {
        for &v in p.iter() {
            out.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

/// Reads a plane dump, checking the magic.
pub fn read_planes(path: &Path, magic: [u8; 4]) -> Result<Vec<Array2<f64>>> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::format(path, "truncated header"));
    }
    if bytes[0..4] != magic {
        return Err(Error::format(
            path,
            format!(
                "magic {:?} does not match {:?}",
                String::from_utf8_lossy(&bytes[0..4]),
                String::from_utf8_lossy(&magic)
            ),
        ));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (w, h, n) = (word(4), word(8), word(12));
    let expected = 16 + w * h * n * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes for {n} planes of {w}x{h}, found {}", bytes.len()),
        ));
    }
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(values
        .chunks_exact((w * h).max(1))
        .take(n)
        .map(|c| Array2::from_shape_vec((h, w), c.to_vec()).expect("sized chunk"))
        .collect())
}

/// Flow dump: dx_left, dx_right, dy and optionally dy_right.
pub fn write_flow(path: &Path, flow: &StereoscopicFlow) -> Result<()> {
    write_planes(path, FLOW_MAGIC, &flow.planes())
}

/// Reads a flow dump; the dump does not record the resolution scale, so
/// the caller supplies it.
pub fn read_flow(path: &Path, scale: usize) -> Result<StereoscopicFlow> {
    let mut planes = read_planes(path, FLOW_MAGIC)?;
    if !(3..=4).contains(&planes.len()) {
        return Err(Error::format(path, format!("flow needs 3 or 4 planes, found {}", planes.len())));
    }
    let dy_right = (planes.len() == 4).then(|| planes.pop().unwrap());
    let dy = planes.pop().unwrap();
    let dx_right = planes.pop().unwrap();
    let dx_left = planes.pop().unwrap();
    Ok(StereoscopicFlow {
        dx_left,
        dx_right,
        dy,
        dy_right,
        scale,
    })
}

pub fn write_voxels(path: &Path, grid: &VoxelGrid) -> Result<()> {
    let planes: Vec<Array2<f64>> = grid.data.axis_iter(Axis(0)).map(|p| p.to_owned()).collect();
    write_planes(path, VOXEL_MAGIC, &planes.iter().collect::<Vec<_>>())
}

pub fn read_voxels(path: &Path, scale: usize) -> Result<VoxelGrid> {
    let planes = read_planes(path, VOXEL_MAGIC)?;
    let (h, w) = planes.first().map_or((0, 0), |p| p.dim());
    let mut data = Array3::zeros((planes.len(), h, w));
    for (i, p) in planes.iter().enumerate() {
        data.index_axis_mut(Axis(0), i).assign(p);
    }
    Ok(VoxelGrid { data, scale })
}
