//! File formats: event streams (CSV and `EVT1` binary), flow sequences
//! (`EFCM` binary), and image exports (flow-wheel PNG, 16-bit grayscale
//! PNG/PGM).
//!
//! Every writer/reader pair here is a lossless round trip. The CSV writer is
//! canonical (header always present, shortest float representation), so
//! write -> read -> write reproduces the file byte for byte.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::event::{CameraGeometry, Event, Polarity};
use crate::flow::{DisplacementMap, FlowMap};
use crate::scalar::Scalar;

/// On-disk encodings for event streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventFormat {
    /// `t_us,x,y,p` per line, header optional, p in {0, 1} with 0 = negative.
    Csv,
    /// `EVT1` binary: carries the sensor geometry alongside the events.
    Bin,
}

/// Events plus whatever geometry the container recorded (`EVT1` only).
#[derive(Clone, Debug)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub geometry: Option<CameraGeometry>,
}

const CSV_HEADER: &str = "t_us,x,y,p";
const EVT1_MAGIC: &[u8; 4] = b"EVT1";
const EFCM_MAGIC: &[u8; 4] = b"EFCM";

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

/// Reads an event stream, validating field syntax and timestamp order.
///
/// Errors name the offending 1-based line (CSV) or record (binary).
pub fn read_events(path: impl AsRef<Path>, format: EventFormat) -> Result<EventStream> {
    let path = path.as_ref();
    match format {
        EventFormat::Csv => read_events_csv(path),
        EventFormat::Bin => read_events_bin(path),
    }
}

fn read_events_csv(path: &Path) -> Result<EventStream> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path_str(path),
        line,
        msg,
    };
    let reader = BufReader::new(File::open(path)?);
    let mut events = Vec::new();
    let mut prev_t: Option<u64> = None;
    let mut first_content = true;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == CSV_HEADER {
            if first_content {
                first_content = false;
                continue;
            }
            return Err(parse_err(line_no, "unexpected header row".into()));
        }
        first_content = false;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(parse_err(
                line_no,
                format!("expected 4 comma-separated fields, got {}", fields.len()),
            ));
        }
        let t_us: u64 = fields[0]
            .parse()
            .map_err(|e| parse_err(line_no, format!("bad timestamp `{}`: {e}", fields[0])))?;
        let x: f32 = fields[1]
            .parse()
            .map_err(|e| parse_err(line_no, format!("bad x `{}`: {e}", fields[1])))?;
        let y: f32 = fields[2]
            .parse()
            .map_err(|e| parse_err(line_no, format!("bad y `{}`: {e}", fields[2])))?;
        if !x.is_finite() || !y.is_finite() || x < 0.0 || y < 0.0 {
            return Err(parse_err(
                line_no,
                format!("coordinates must be finite and non-negative, got ({x}, {y})"),
            ));
        }
        let bit: u8 = fields[3]
            .parse()
            .map_err(|e| parse_err(line_no, format!("bad polarity `{}`: {e}", fields[3])))?;
        let polarity = Polarity::from_bit(bit)
            .map_err(|_| parse_err(line_no, format!("polarity must be 0 or 1, got {bit}")))?;
        if let Some(p) = prev_t {
            if t_us < p {
                return Err(parse_err(
                    line_no,
                    format!("timestamp inversion: {t_us} us after {p} us"),
                ));
            }
        }
        prev_t = Some(t_us);
        events.push(Event { t_us, x, y, polarity });
    }
    Ok(EventStream { events, geometry: None })
}

fn read_events_bin(path: &Path) -> Result<EventStream> {
    let format_err = |msg: String| Error::FileFormat { path: path_str(path), msg };
    let mut data = Vec::new();
    File::open(path)?.read_to_end(&mut data)?;
    if data.len() < 20 || &data[..4] != EVT1_MAGIC {
        return Err(format_err("missing EVT1 header".into()));
    }
    let width = u32::from_le_bytes(data[4..8].try_into().unwrap());
    let height = u32::from_le_bytes(data[8..12].try_into().unwrap());
    let count = u64::from_le_bytes(data[12..20].try_into().unwrap());
    let geometry = CameraGeometry::new(width, height)?;
    const RECORD: usize = 8 + 2 + 2 + 1;
    let body = &data[20..];
    let expected = count as usize * RECORD;
    if body.len() != expected {
        return Err(format_err(format!(
            "header promises {count} events ({expected} bytes), file holds {} bytes",
            body.len()
        )));
    }
    let mut events = Vec::with_capacity(count as usize);
    let mut prev_t = 0u64;
    for (i, rec) in body.chunks_exact(RECORD).enumerate() {
        let record_err = |msg: String| Error::Parse {
            path: path_str(path),
            line: i + 1,
            msg,
        };
        let t_us = u64::from_le_bytes(rec[0..8].try_into().unwrap());
        let x = u16::from_le_bytes(rec[8..10].try_into().unwrap());
        let y = u16::from_le_bytes(rec[10..12].try_into().unwrap());
        let p = rec[12];
        if u32::from(x) >= width || u32::from(y) >= height {
            return Err(record_err(format!(
                "event at ({x}, {y}) outside the {width}x{height} frame"
            )));
        }
        let polarity = Polarity::from_bit(p)
            .map_err(|_| record_err(format!("polarity byte must be 0 or 1, got {p}")))?;
        if i > 0 && t_us < prev_t {
            return Err(record_err(format!(
                "timestamp inversion: {t_us} us after {prev_t} us"
            )));
        }
        prev_t = t_us;
        events.push(Event {
            t_us,
            x: f32::from(x),
            y: f32::from(y),
            polarity,
        });
    }
    Ok(EventStream { events, geometry: Some(geometry) })
}

/// Writes events as CSV with the canonical `t_us,x,y,p` header.
pub fn write_events_csv(path: impl AsRef<Path>, events: &[Event]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    writeln!(out, "{CSV_HEADER}")?;
    for e in events {
        writeln!(out, "{},{},{},{}", e.t_us, e.x, e.y, e.polarity.bit())?;
    }
    out.flush()?;
    Ok(())
}

/// Writes events in the `EVT1` binary layout.
///
/// The layout stores integer pixel coordinates; fractional (warped) events
/// are rejected.
pub fn write_events_bin(
    path: impl AsRef<Path>,
    events: &[Event],
    geometry: CameraGeometry,
) -> Result<()> {
    let path = path.as_ref();
    for (i, e) in events.iter().enumerate() {
        if !geometry.contains_pixel(e.x, e.y) || e.x > f32::from(u16::MAX) || e.y > f32::from(u16::MAX)
        {
            return Err(Error::FileFormat {
                path: path_str(path),
                msg: format!(
                    "event {i} at ({}, {}) is not an integer pixel of the {}x{} frame",
                    e.x, e.y, geometry.width, geometry.height
                ),
            });
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(EVT1_MAGIC)?;
    out.write_all(&geometry.width.to_le_bytes())?;
    out.write_all(&geometry.height.to_le_bytes())?;
    out.write_all(&(events.len() as u64).to_le_bytes())?;
    for e in events {
        out.write_all(&e.t_us.to_le_bytes())?;
        out.write_all(&(e.x as u16).to_le_bytes())?;
        out.write_all(&(e.y as u16).to_le_bytes())?;
        out.write_all(&[e.polarity.bit()])?;
    }
    out.flush()?;
    Ok(())
}

/// Contents of an `EFCM` flow file.
///
/// `maps` holds however many flow maps the file carried — one flow sequence
/// per training window, concatenated in window order. `dt_input_us` is the
/// input-partition span each map covers.
#[derive(Clone, Debug)]
pub struct FlowFile {
    pub geometry: CameraGeometry,
    pub dt_input_us: f64,
    pub maps: Vec<FlowMap<f32>>,
}

/// Writes flow maps in the `EFCM` binary layout (planes stored as f32).
pub fn write_flow<'a, T, I>(path: impl AsRef<Path>, maps: I, dt_input_us: f64) -> Result<()>
where
    T: Scalar + 'a,
    I: IntoIterator<Item = &'a FlowMap<T>>,
{
    let path = path.as_ref();
    let maps: Vec<&FlowMap<T>> = maps.into_iter().collect();
    let first = maps.first().ok_or_else(|| Error::FileFormat {
        path: path_str(path),
        msg: "refusing to write a flow file with zero maps".into(),
    })?;
    let geometry = first.geometry();
    if !(dt_input_us.is_finite() && dt_input_us > 0.0) {
        return Err(Error::Config(format!(
            "dt_input_us must be positive and finite, got {dt_input_us}"
        )));
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(EFCM_MAGIC)?;
    out.write_all(&geometry.width.to_le_bytes())?;
    out.write_all(&geometry.height.to_le_bytes())?;
    out.write_all(&(maps.len() as u32).to_le_bytes())?;
    out.write_all(&dt_input_us.to_le_bytes())?;
    for map in maps {
        if map.geometry() != geometry {
            return Err(Error::GeometryMismatch(format!(
                "flow maps disagree on frame size: {}x{} vs {}x{}",
                map.width(),
                map.height(),
                geometry.width,
                geometry.height
            )));
        }
        for plane in [&map.u, &map.v] {
            for value in plane.iter() {
                out.write_all(&value.to_f32().unwrap().to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads an `EFCM` flow file.
pub fn read_flow(path: impl AsRef<Path>) -> Result<FlowFile> {
    let path = path.as_ref();
    let format_err = |msg: String| Error::FileFormat { path: path_str(path), msg };
    let mut data = Vec::new();
    File::open(path)?.read_to_end(&mut data)?;
    if data.len() < 24 || &data[..4] != EFCM_MAGIC {
        return Err(format_err("missing EFCM header".into()));
    }
    let width = u32::from_le_bytes(data[4..8].try_into().unwrap());
    let height = u32::from_le_bytes(data[8..12].try_into().unwrap());
    let n_maps = u32::from_le_bytes(data[12..16].try_into().unwrap());
    let dt_input_us = f64::from_le_bytes(data[16..24].try_into().unwrap());
    let geometry = CameraGeometry::new(width, height)?;
    if !(dt_input_us.is_finite() && dt_input_us > 0.0) {
        return Err(format_err(format!("bad dt_input_us {dt_input_us}")));
    }
    let (w, h) = (width as usize, height as usize);
    let plane_len = w * h * 4;
    let expected = n_maps as usize * 2 * plane_len;
    let body = &data[24..];
    if body.len() != expected {
        return Err(format_err(format!(
            "header promises {n_maps} maps ({expected} bytes), file holds {} bytes",
            body.len()
        )));
    }
    let read_plane = |bytes: &[u8]| -> Array2<f32> {
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Array2::from_shape_vec((h, w), values).expect("plane length checked above")
    };
    let mut maps = Vec::with_capacity(n_maps as usize);
    for k in 0..n_maps as usize {
        let at = k * 2 * plane_len;
        let u = read_plane(&body[at..at + plane_len]);
        let v = read_plane(&body[at + plane_len..at + 2 * plane_len]);
        maps.push(FlowMap::new(u, v)?);
    }
    Ok(FlowFile { geometry, dt_input_us, maps })
}

/// What a render call should draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderTarget {
    Flow,
    Iwe,
    TimestampImage,
}

/// Options for image export.
#[derive(Clone, Copy, Debug)]
pub struct RenderSpec {
    pub target: RenderTarget,
    /// Reference partition boundary for warped-image targets.
    pub t_ref: Option<usize>,
    /// Flow magnitude mapped to full saturation; defaults to the map's max.
    pub color_max: Option<f64>,
}

impl RenderSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(m) = self.color_max {
            if !(m.is_finite() && m > 0.0) {
                return Err(Error::Config(format!(
                    "color_max must be positive and finite, got {m}"
                )));
            }
        }
        Ok(())
    }
}

/// One pixel of the flow color wheel: hue from the flow direction,
/// saturation from magnitude / `color_max` (clipped to 1), full value.
/// Zero flow is white.
pub fn flow_wheel_rgb(u: f64, v: f64, color_max: f64) -> [u8; 3] {
    let mag = u.hypot(v);
    let sat = (mag / color_max).min(1.0);
    let hue = v.atan2(u).to_degrees().rem_euclid(360.0);
    // Standard HSV -> RGB with V = 1.
    let c = sat;
    let hp = hue / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r1, g1, b1) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = 1.0 - c;
    let to_byte = |f: f64| ((f + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [to_byte(r1), to_byte(g1), to_byte(b1)]
}

fn wheel_image<T: Scalar>(
    u: &Array2<T>,
    v: &Array2<T>,
    valid: Option<&Array2<bool>>,
    color_max: Option<f64>,
) -> Result<image::RgbImage> {
    let (h, w) = u.dim();
    for value in u.iter().chain(v.iter()) {
        if !value.is_finite() {
            return Err(Error::Config("flow must be finite to render".into()));
        }
    }
    let color_max = match color_max {
        Some(m) => m,
        None => {
            let mut max = 0.0f64;
            for (uu, vv) in u.iter().zip(v.iter()) {
                max = max.max(uu.to_f64().unwrap().hypot(vv.to_f64().unwrap()));
            }
            if max > 0.0 {
                max
            } else {
                1.0
            }
        }
    };
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (y, row) in img.rows_mut().enumerate() {
        for (x, px) in row.enumerate() {
            let rgb = if valid.is_some_and(|m| !m[(y, x)]) {
                [0, 0, 0]
            } else {
                flow_wheel_rgb(
                    u[(y, x)].to_f64().unwrap(),
                    v[(y, x)].to_f64().unwrap(),
                    color_max,
                )
            };
            *px = image::Rgb(rgb);
        }
    }
    Ok(img)
}

fn save_png(path: &Path, img: &image::RgbImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::FileFormat {
            path: path_str(path),
            msg: format!("PNG encode failed: {e}"),
        })
}

/// Renders a flow map as an 8-bit RGB color-wheel PNG.
pub fn render_flow_png<T: Scalar>(
    path: impl AsRef<Path>,
    map: &FlowMap<T>,
    spec: &RenderSpec,
) -> Result<()> {
    spec.validate()?;
    let img = wheel_image(&map.u, &map.v, None, spec.color_max)?;
    save_png(path.as_ref(), &img)
}

/// Renders a displacement map as a color-wheel PNG; invalid pixels are black.
pub fn render_displacement_png<T: Scalar>(
    path: impl AsRef<Path>,
    map: &DisplacementMap<T>,
    spec: &RenderSpec,
) -> Result<()> {
    spec.validate()?;
    let img = wheel_image(&map.dx, &map.dy, Some(&map.valid), spec.color_max)?;
    save_png(path.as_ref(), &img)
}

fn normalize_u16<T: Scalar>(image: &Array2<T>) -> Result<Vec<u16>> {
    let mut max = 0.0f64;
    for value in image.iter() {
        let f = value.to_f64().unwrap();
        if !f.is_finite() || f < 0.0 {
            return Err(Error::Config(format!(
                "scalar image must be finite and non-negative, got {f}"
            )));
        }
        max = max.max(f);
    }
    let scale = if max > 0.0 { 65535.0 / max } else { 0.0 };
    Ok(image
        .iter()
        .map(|v| (v.to_f64().unwrap() * scale).round() as u16)
        .collect())
}

/// Writes a scalar image (IWE channel, timestamp surface, ...) as a
/// max-normalized 16-bit binary PGM.
pub fn write_pgm16<T: Scalar>(path: impl AsRef<Path>, image: &Array2<T>) -> Result<()> {
    let (h, w) = image.dim();
    let values = normalize_u16(image)?;
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    write!(out, "P5\n{w} {h}\n65535\n")?;
    for v in values {
        out.write_all(&v.to_be_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Writes a scalar image as a max-normalized 16-bit grayscale PNG.
pub fn render_scalar_png<T: Scalar>(path: impl AsRef<Path>, image: &Array2<T>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = image.dim();
    let values = normalize_u16(image)?;
    let img: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_vec(w as u32, h as u32, values)
            .expect("buffer length matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::FileFormat {
            path: path_str(path),
            msg: format!("PNG encode failed: {e}"),
        })
}
