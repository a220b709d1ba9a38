//! Readers and writers for the interchange formats: KITTI-style 16-bit flow and
//! disparity PNGs, 8-bit mask PNGs, 16-bit image PNGs, PFM float maps, KITTI pose
//! files and `key value` intrinsics files. Byte-level layouts are in `docs/formats.md`.
//!
//! Every format has an in-memory `encode_*`/`decode_*` pair and a path-based
//! `read_*`/`write_*` pair.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use log::warn;
use nalgebra::{Matrix3, Vector3};

use crate::camera::{DisparityMap, FlowField, PinholeCamera};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid, Image};
use crate::lie::RigidTransform;

/// Flow channels store `round(64 f) + 2^15`.
pub const FLOW_SCALE: f64 = 64.0;
pub const FLOW_OFFSET: f64 = 32768.0;
/// Disparity stores `round(256 d)`; 0 marks an invalid pixel.
pub const DISPARITY_SCALE: f64 = 256.0;
/// Rotation blocks further than this from orthonormal are renormalized with a warning.
pub const POSE_ORTHO_TOL: f64 = 1e-6;

// IHDR field offsets from the start of a PNG file
const IHDR_BIT_DEPTH: usize = 24;
const IHDR_COLOR_TYPE: usize = 25;

const MEMORY: &str = "<memory>";

fn png_error(context: &str, e: impl std::fmt::Display) -> Error {
    Error::Png {
        path: context.into(),
        message: e.to_string(),
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Re-labels errors produced while decoding in memory with the file they came from.
fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    let name = path.display().to_string();
    r.map_err(|e| match e {
        Error::Png { message, .. } => Error::Png {
            path: path.to_path_buf(),
            message,
        },
        Error::Parse {
            offset, message, ..
        } => Error::Parse {
            context: name,
            offset,
            message,
        },
        other => other,
    })
}

struct RawPng {
    width: usize,
    height: usize,
    channels: usize,
    depth: png::BitDepth,
    data: Vec<u8>,
}

impl RawPng {
    fn sample16(&self, i: usize) -> u16 {
        u16::from_be_bytes([self.data[2 * i], self.data[2 * i + 1]])
    }

    /// Sample scaled to `[0, 1]`.
    fn unit(&self, i: usize) -> f64 {
        match self.depth {
            png::BitDepth::Sixteen => f64::from(self.sample16(i)) / 65535.0,
            _ => f64::from(self.data[i]) / 255.0,
        }
    }
}

fn decode_png(bytes: &[u8], context: &str, expand: bool) -> Result<RawPng> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(if expand {
        png::Transformations::EXPAND
    } else {
        png::Transformations::IDENTITY
    });
    let mut reader = decoder.read_info().map_err(|e| png_error(context, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_error(context, "image too large"))?;
    let mut data = vec![0; size];
    let info = reader
        .next_frame(&mut data)
        .map_err(|e| png_error(context, e))?;
    data.truncate(info.buffer_size());
    Ok(RawPng {
        width: info.width as usize,
        height: info.height as usize,
        channels: info.color_type.samples(),
        depth: info.bit_depth,
        data,
    })
}

fn require_format(
    raw: &RawPng,
    bytes: &[u8],
    context: &str,
    depth: png::BitDepth,
    channels: usize,
    what: &str,
) -> Result<()> {
    if raw.depth != depth {
        return Err(Error::Parse {
            context: context.into(),
            offset: IHDR_BIT_DEPTH,
            message: format!(
                "{what} needs bit depth {}, found {}",
                depth as u8,
                bytes.get(IHDR_BIT_DEPTH).copied().unwrap_or(0)
            ),
        });
    }
    if raw.channels != channels {
        return Err(Error::Parse {
            context: context.into(),
            offset: IHDR_COLOR_TYPE,
            message: format!(
                "{what} needs {channels} channel(s), found {} (color type {})",
                raw.channels,
                bytes.get(IHDR_COLOR_TYPE).copied().unwrap_or(0)
            ),
        });
    }
    Ok(())
}

fn encode_png(
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
) -> Result<Vec<u8>> {
    let (w, h) = match (u32::try_from(width), u32::try_from(height)) {
        (Ok(w), Ok(h)) if w > 0 && h > 0 => (w, h),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "cannot encode a {width}x{height} PNG"
            )))
        }
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w, h);
        enc.set_color(color);
        enc.set_depth(depth);
        enc.set_compression(png::Compression::Balanced);
        let mut writer = enc.write_header().map_err(|e| png_error(MEMORY, e))?;
        writer
            .write_image_data(data)
            .map_err(|e| png_error(MEMORY, e))?;
        writer.finish().map_err(|e| png_error(MEMORY, e))?;
    }
    Ok(out)
}

fn push16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_be_bytes());
}

/// Nearest value representable in a flow PNG.
pub fn quantize_flow(f: f64) -> f64 {
    (f * FLOW_SCALE).round() / FLOW_SCALE
}

/// Nearest value representable in a disparity PNG.
pub fn quantize_disparity(d: f64) -> f64 {
    (d * DISPARITY_SCALE).round() / DISPARITY_SCALE
}

fn flow_raw(f: f64) -> Result<u16> {
    let raw = (f * FLOW_SCALE).round() + FLOW_OFFSET;
    if !(0.0..=65535.0).contains(&raw) {
        return Err(Error::OutOfRange {
            format: "flow PNG",
            value: f,
        });
    }
    Ok(raw as u16)
}

/// 16-bit RGB: `(u, v, valid)`. Invalid pixels are written as `(0, 0, 0)`.
pub fn encode_flow_png(flow: &FlowField) -> Result<Vec<u8>> {
    let (w, h) = flow.dims();
    let mut data = Vec::with_capacity(w * h * 6);
    for y in 0..h {
        for x in 0..w {
            match flow.at(x, y) {
                Some([u, v]) => {
                    push16(&mut data, flow_raw(u)?);
                    push16(&mut data, flow_raw(v)?);
                    push16(&mut data, 1);
                }
                None => data.extend_from_slice(&[0; 6]),
            }
        }
    }
    encode_png(w, h, png::ColorType::Rgb, png::BitDepth::Sixteen, &data)
}

/// Any non-zero third channel marks a valid pixel; invalid pixels decode to zero flow.
pub fn decode_flow_png(bytes: &[u8]) -> Result<FlowField> {
    decode_flow_png_in(bytes, MEMORY)
}

fn decode_flow_png_in(bytes: &[u8], context: &str) -> Result<FlowField> {
    let raw = decode_png(bytes, context, false)?;
    require_format(&raw, bytes, context, png::BitDepth::Sixteen, 3, "flow PNG")?;
    let mut flow = Grid::filled(raw.width, raw.height, [0.0; 2]);
    let mut valid = Grid::filled(raw.width, raw.height, false);
    for i in 0..raw.width * raw.height {
        if raw.sample16(3 * i + 2) != 0 {
            let u = (f64::from(raw.sample16(3 * i)) - FLOW_OFFSET) / FLOW_SCALE;
            let v = (f64::from(raw.sample16(3 * i + 1)) - FLOW_OFFSET) / FLOW_SCALE;
            flow.as_mut_slice()[i] = [u, v];
            valid.as_mut_slice()[i] = true;
        }
    }
    Ok(FlowField { flow, valid })
}

/// 16-bit grayscale `round(256 d)`; invalid pixels are 0. A valid disparity that
/// would round to 0 or overflow 16 bits is an error.
pub fn encode_disparity_png(disp: &DisparityMap) -> Result<Vec<u8>> {
    let (w, h) = disp.dims();
    let mut data = Vec::with_capacity(w * h * 2);
    for y in 0..h {
        for x in 0..w {
            let raw = match disp.at(x, y) {
                Some(d) => {
                    let r = (d * DISPARITY_SCALE).round();
                    if !(1.0..=65535.0).contains(&r) {
                        return Err(Error::OutOfRange {
                            format: "disparity PNG",
                            value: d,
                        });
                    }
                    r as u16
                }
                None => 0,
            };
            push16(&mut data, raw);
        }
    }
    encode_png(
        w,
        h,
        png::ColorType::Grayscale,
        png::BitDepth::Sixteen,
        &data,
    )
}

pub fn decode_disparity_png(bytes: &[u8]) -> Result<DisparityMap> {
    decode_disparity_png_in(bytes, MEMORY)
}

fn decode_disparity_png_in(bytes: &[u8], context: &str) -> Result<DisparityMap> {
    let raw = decode_png(bytes, context, false)?;
    require_format(
        &raw,
        bytes,
        context,
        png::BitDepth::Sixteen,
        1,
        "disparity PNG",
    )?;
    let values = (0..raw.width * raw.height)
        .map(|i| f64::from(raw.sample16(i)) / DISPARITY_SCALE)
        .collect();
    Ok(DisparityMap::from_values(Grid::from_vec(
        raw.width, raw.height, values,
    )?))
}

/// 8-bit grayscale, 255 for set pixels and 0 otherwise.
pub fn encode_mask_png(mask: &BinaryMask) -> Result<Vec<u8>> {
    let data: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    encode_png(
        mask.width(),
        mask.height(),
        png::ColorType::Grayscale,
        png::BitDepth::Eight,
        &data,
    )
}

/// Any non-zero value is set.
pub fn decode_mask_png(bytes: &[u8]) -> Result<BinaryMask> {
    decode_mask_png_in(bytes, MEMORY)
}

fn decode_mask_png_in(bytes: &[u8], context: &str) -> Result<BinaryMask> {
    let raw = decode_png(bytes, context, false)?;
    require_format(&raw, bytes, context, png::BitDepth::Eight, 1, "mask PNG")?;
    Grid::from_vec(
        raw.width,
        raw.height,
        raw.data.iter().map(|&v| v != 0).collect(),
    )
}

/// 16-bit RGB, `round(65535 c)`. Channels must lie in `[0, 1]`.
pub fn encode_image_png(image: &Image) -> Result<Vec<u8>> {
    let mut data = Vec::with_capacity(image.len() * 6);
    for px in image.iter() {
        for &c in px {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::OutOfRange {
                    format: "image PNG",
                    value: c,
                });
            }
            push16(&mut data, (c * 65535.0).round() as u16);
        }
    }
    encode_png(
        image.width(),
        image.height(),
        png::ColorType::Rgb,
        png::BitDepth::Sixteen,
        &data,
    )
}

/// 8-bit RGB, for visualizations.
pub fn encode_rgb8_png(image: &Grid<[u8; 3]>) -> Result<Vec<u8>> {
    let data: Vec<u8> = image.iter().flatten().copied().collect();
    encode_png(
        image.width(),
        image.height(),
        png::ColorType::Rgb,
        png::BitDepth::Eight,
        &data,
    )
}

pub fn write_rgb8_png(path: impl AsRef<Path>, image: &Grid<[u8; 3]>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_rgb8_png(image)?)
}

/// Accepts 8- or 16-bit gray, gray+alpha, RGB, RGBA or palette images; alpha is
/// dropped and gray is replicated.
pub fn decode_image_png(bytes: &[u8]) -> Result<Image> {
    decode_image_png_in(bytes, MEMORY)
}

fn decode_image_png_in(bytes: &[u8], context: &str) -> Result<Image> {
    let raw = decode_png(bytes, context, true)?;
    if !matches!(raw.depth, png::BitDepth::Eight | png::BitDepth::Sixteen) {
        return Err(Error::Parse {
            context: context.into(),
            offset: IHDR_BIT_DEPTH,
            message: format!("unsupported image bit depth {}", raw.depth as u8),
        });
    }
    let c = raw.channels;
    let pixels = (0..raw.width * raw.height)
        .map(|i| {
            if c >= 3 {
                [raw.unit(c * i), raw.unit(c * i + 1), raw.unit(c * i + 2)]
            } else {
                [raw.unit(c * i); 3]
            }
        })
        .collect();
    Grid::from_vec(raw.width, raw.height, pixels)
}

/// Little-endian PFM (scale −1), rows stored bottom-up, `f32` samples. `Pf` for one
/// channel, `PF` for three.
pub fn encode_pfm<const C: usize>(grid: &Grid<[f64; C]>) -> Result<Vec<u8>> {
    let tag = match C {
        1 => "Pf",
        3 => "PF",
        _ => {
            return Err(Error::InvalidArgument(format!(
                "PFM has 1 or 3 channels, not {C}"
            )))
        }
    };
    let (w, h) = grid.dims();
    let mut out = format!("{tag}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * C * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            for &v in grid.get(x, y) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn encode_pfm_scalar(grid: &Grid<f64>) -> Result<Vec<u8>> {
    encode_pfm(&grid.map(|&v| [v]))
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: &'a str,
}

impl<'a> HeaderReader<'a> {
    fn fail<T>(&self, offset: usize, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            context: self.context.into(),
            offset,
            message: message.into(),
        })
    }

    /// Next whitespace-delimited token, consuming exactly one trailing whitespace byte.
    fn token(&mut self) -> Result<(usize, &'a str)> {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return self.fail(start, "unexpected end of header");
        }
        if self.pos >= self.bytes.len() {
            return self.fail(self.pos, "header is not terminated by whitespace");
        }
        let bytes: &'a [u8] = self.bytes;
        let tok = std::str::from_utf8(&bytes[start..self.pos]);
        self.pos += 1;
        match tok {
            Ok(t) => Ok((start, t)),
            Err(_) => self.fail(start, "header is not ASCII"),
        }
    }
}

pub fn decode_pfm<const C: usize>(bytes: &[u8]) -> Result<Grid<[f64; C]>> {
    decode_pfm_in(bytes, MEMORY)
}

fn decode_pfm_in<const C: usize>(bytes: &[u8], context: &str) -> Result<Grid<[f64; C]>> {
    let mut cur = HeaderReader {
        bytes,
        pos: 0,
        context,
    };
    let (at, tag) = cur.token()?;
    let channels = match tag {
        "Pf" => 1,
        "PF" => 3,
        _ => return cur.fail(at, format!("bad PFM magic {tag:?}")),
    };
    if channels != C {
        return cur.fail(at, format!("expected {C} channel(s), file has {channels}"));
    }
    let mut dim = |name: &str| -> Result<usize> {
        let (at, t) = cur.token()?;
        match t.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => cur.fail(at, format!("bad {name} {t:?}")),
        }
    };
    let w = dim("width")?;
    let h = dim("height")?;
    let (at, t) = cur.token()?;
    let little = match t.parse::<f64>() {
        Ok(s) if s < 0.0 => true,
        Ok(s) if s > 0.0 => false,
        _ => return cur.fail(at, format!("bad scale {t:?}")),
    };
    let start = cur.pos;
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(C * 4))
        .ok_or_else(|| Error::Parse {
            context: context.into(),
            offset: at,
            message: "dimensions overflow".into(),
        })?;
    if bytes.len() - start != need {
        return cur.fail(
            start,
            format!(
                "expected {need} data bytes for {w}x{h}x{C}, found {}",
                bytes.len() - start
            ),
        );
    }
    let mut data = vec![[0.0; C]; w * h];
    for (k, chunk) in bytes[start..].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (px, c) = (k / C, k % C);
        let (x, row) = (px % w, px / w);
        data[(h - 1 - row) * w + x][c] = f64::from(v);
    }
    Grid::from_vec(w, h, data)
}

pub fn decode_pfm_scalar(bytes: &[u8]) -> Result<Grid<f64>> {
    Ok(decode_pfm::<1>(bytes)?.map(|v| v[0]))
}

/// One pose per line: the 12 entries of the row-major 3x4 matrix `[R | t]`, written
/// in shortest round-trip decimal form.
pub fn encode_poses(poses: &[RigidTransform]) -> String {
    let mut out = String::new();
    for p in poses {
        let r = p.rotation_matrix();
        let t = p.translation;
        let mut vals = Vec::with_capacity(12);
        for i in 0..3 {
            vals.extend([r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]]);
        }
        let line: Vec<String> = vals.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Blank lines are skipped. Rotation blocks within [`POSE_ORTHO_TOL`] of
/// orthonormal are projected silently; larger deviations are projected with a
/// warning, and reflections or near-singular blocks are errors.
pub fn decode_poses(text: &str) -> Result<Vec<RigidTransform>> {
    decode_poses_in(text, MEMORY)
}

fn decode_poses_in(text: &str, context: &str) -> Result<Vec<RigidTransform>> {
    let fail = |offset: usize, message: String| Error::Parse {
        context: context.into(),
        offset,
        message,
    };
    let mut poses = Vec::new();
    let mut offset = 0;
    for (lineno, line) in text.split_inclusive('\n').enumerate() {
        let line_start = offset;
        offset += line.len();
        if line.trim().is_empty() {
            continue;
        }
        let mut vals = Vec::with_capacity(12);
        let mut pos = line_start;
        for tok in line.split_ascii_whitespace() {
            let at = pos + line[pos - line_start..].find(tok).unwrap_or(0);
            pos = at + tok.len();
            let v: f64 = tok
                .parse()
                .map_err(|_| fail(at, format!("line {}: bad number {tok:?}", lineno + 1)))?;
            if !v.is_finite() {
                return Err(fail(at, format!("line {}: non-finite value", lineno + 1)));
            }
            vals.push(v);
        }
        if vals.len() != 12 {
            return Err(fail(
                line_start,
                format!(
                    "line {}: expected 12 values, found {}",
                    lineno + 1,
                    vals.len()
                ),
            ));
        }
        let m = Matrix3::new(
            vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10],
        );
        let t = Vector3::new(vals[3], vals[7], vals[11]);
        let dev = (m.transpose() * m - Matrix3::identity()).abs().max();
        if m.determinant() <= 0.5 {
            return Err(fail(
                line_start,
                format!("line {}: rotation block is not a rotation", lineno + 1),
            ));
        }
        if dev > POSE_ORTHO_TOL {
            warn!(
                "{context}: pose on line {} is {dev:.3e} from orthonormal; renormalizing",
                lineno + 1
            );
        }
        let svd = m.svd(true, true);
        let r = svd.u.expect("requested") * svd.v_t.expect("requested");
        poses.push(RigidTransform::from_matrix(&r, t)?);
    }
    Ok(poses)
}

/// `key value` lines (also `key: value` or `key = value`) with keys `fx fy cx cy`
/// and optional `baseline`; `#` starts a comment.
pub fn decode_intrinsics(text: &str) -> Result<PinholeCamera> {
    decode_intrinsics_in(text, MEMORY)
}

fn decode_intrinsics_in(text: &str, context: &str) -> Result<PinholeCamera> {
    let fail = |offset: usize, message: String| Error::Parse {
        context: context.into(),
        offset,
        message,
    };
    const KEYS: [&str; 5] = ["fx", "fy", "cx", "cy", "baseline"];
    let mut vals: [Option<f64>; 5] = [None; 5];
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        let body = line.split('#').next().unwrap_or("");
        let body = body.trim_start();
        if body.trim().is_empty() {
            continue;
        }
        let at = start + (line.len() - line.trim_start().len());
        let cleaned = body.replacen([':', '='], " ", 1);
        let mut parts = cleaned.split_whitespace();
        let key = parts.next().unwrap_or("");
        let Some(k) = KEYS.iter().position(|&name| name == key) else {
            return Err(fail(at, format!("unknown intrinsics key {key:?}")));
        };
        let value = match (parts.next(), parts.next()) {
            (Some(v), None) => v
                .parse::<f64>()
                .map_err(|_| fail(at, format!("bad value {v:?} for {key}")))?,
            _ => return Err(fail(at, format!("expected one value for {key}"))),
        };
        if vals[k].replace(value).is_some() {
            return Err(fail(at, format!("duplicate key {key}")));
        }
    }
    let get =
        |k: usize| vals[k].ok_or_else(|| fail(text.len(), format!("missing key {}", KEYS[k])));
    PinholeCamera::new(get(0)?, get(1)?, get(2)?, get(3)?, vals[4].unwrap_or(0.0))
}

pub fn encode_intrinsics(cam: &PinholeCamera) -> String {
    format!(
        "fx {:?}\nfy {:?}\ncx {:?}\ncy {:?}\nbaseline {:?}\n",
        cam.fx, cam.fy, cam.cx, cam.cy, cam.baseline
    )
}

macro_rules! path_pair {
    ($read:ident, $write:ident, $decode_in:ident, $encode:ident, $t:ty) => {
        pub fn $read(path: impl AsRef<Path>) -> Result<$t> {
            let path = path.as_ref();
            let bytes = read_bytes(path)?;
            with_path(path, $decode_in(&bytes, &path.display().to_string()))
        }

        pub fn $write(path: impl AsRef<Path>, value: &$t) -> Result<()> {
            write_bytes(path.as_ref(), &$encode(value)?)
        }
    };
}

path_pair!(
    read_flow_png,
    write_flow_png,
    decode_flow_png_in,
    encode_flow_png,
    FlowField
);
path_pair!(
    read_disparity_png,
    write_disparity_png,
    decode_disparity_png_in,
    encode_disparity_png,
    DisparityMap
);
path_pair!(
    read_mask_png,
    write_mask_png,
    decode_mask_png_in,
    encode_mask_png,
    BinaryMask
);
path_pair!(
    read_image_png,
    write_image_png,
    decode_image_png_in,
    encode_image_png,
    Image
);

pub fn read_pfm<const C: usize>(path: impl AsRef<Path>) -> Result<Grid<[f64; C]>> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    with_path(path, decode_pfm_in(&bytes, &path.display().to_string()))
}

pub fn write_pfm<const C: usize>(path: impl AsRef<Path>, grid: &Grid<[f64; C]>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pfm(grid)?)
}

/// Single-channel PFM, e.g. depth.
pub fn read_pfm_scalar(path: impl AsRef<Path>) -> Result<Grid<f64>> {
    Ok(read_pfm::<1>(path)?.map(|v| v[0]))
}

pub fn write_pfm_scalar(path: impl AsRef<Path>, grid: &Grid<f64>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pfm_scalar(grid)?)
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        offset: e.utf8_error().valid_up_to(),
        message: "file is not UTF-8".into(),
    })
}

pub fn read_poses(path: impl AsRef<Path>) -> Result<Vec<RigidTransform>> {
    let path = path.as_ref();
    decode_poses_in(&read_text(path)?, &path.display().to_string())
}

pub fn write_poses(path: impl AsRef<Path>, poses: &[RigidTransform]) -> Result<()> {
    write_bytes(path.as_ref(), encode_poses(poses).as_bytes())
}

pub fn read_intrinsics(path: impl AsRef<Path>) -> Result<PinholeCamera> {
    let path = path.as_ref();
    decode_intrinsics_in(&read_text(path)?, &path.display().to_string())
}

pub fn write_intrinsics(path: impl AsRef<Path>, cam: &PinholeCamera) -> Result<()> {
    write_bytes(path.as_ref(), encode_intrinsics(cam).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::Twist;
    use proptest::prelude::*;

    #[test]
    fn zero_flow_raw_values() {
        let f = FlowField::zeros(3, 2);
        let bytes = encode_flow_png(&f).unwrap();
        let raw = decode_png(&bytes, MEMORY, false).unwrap();
        assert_eq!(
            (raw.sample16(0), raw.sample16(1), raw.sample16(2)),
            (32768, 32768, 1)
        );
        assert_eq!(decode_flow_png(&bytes).unwrap(), f);
    }

    #[test]
    fn flow_quantization_arithmetic() {
        let f = FlowField::constant(1, 1, [65.0 / 64.0, -2.5]);
        let bytes = encode_flow_png(&f).unwrap();
        let raw = decode_png(&bytes, MEMORY, false).unwrap();
        assert_eq!(raw.sample16(0), 32768 + 65);
        assert_eq!(raw.sample16(1), 32768 - 160);
        assert_eq!(decode_flow_png(&bytes).unwrap(), f);
    }

    #[test]
    fn flow_range_limits() {
        assert!(encode_flow_png(&FlowField::constant(1, 1, [-512.0, 511.984375])).is_ok());
        for bad in [512.0, -512.01, f64::NAN] {
            assert!(matches!(
                encode_flow_png(&FlowField::constant(1, 1, [bad, 0.0])),
                Err(Error::OutOfRange { .. })
            ));
        }
        // invalid pixels are not range-checked
        let mut f = FlowField::constant(2, 1, [1e6, 0.0]);
        f.valid = Grid::filled(2, 1, false);
        let back = decode_flow_png(&encode_flow_png(&f).unwrap()).unwrap();
        assert!(back.valid.iter().all(|&v| !v));
    }

    #[test]
    fn disparity_raw_value() {
        let d = DisparityMap::from_values(Grid::from_vec(2, 1, vec![10.0, 0.0]).unwrap());
        let bytes = encode_disparity_png(&d).unwrap();
        let raw = decode_png(&bytes, MEMORY, false).unwrap();
        assert_eq!((raw.sample16(0), raw.sample16(1)), (2560, 0));
        assert_eq!(decode_disparity_png(&bytes).unwrap(), d);
        let tiny = DisparityMap::from_values(Grid::filled(1, 1, 0.001));
        assert!(encode_disparity_png(&tiny).is_err());
        let huge = DisparityMap::from_values(Grid::filled(1, 1, 256.0));
        assert!(encode_disparity_png(&huge).is_err());
    }

    #[test]
    fn wrong_bit_depth_reports_ihdr_offset() {
        let mask = Grid::from_fn(3, 3, |x, y| x == y);
        let bytes = encode_mask_png(&mask).unwrap();
        match decode_flow_png(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, IHDR_BIT_DEPTH),
            other => panic!("{other:?}"),
        }
        let disp = DisparityMap::from_values(Grid::filled(2, 2, 3.0));
        match decode_flow_png(&encode_disparity_png(&disp).unwrap()) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, IHDR_COLOR_TYPE),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            decode_flow_png(b"not a png"),
            Err(Error::Png { .. })
        ));
    }

    #[test]
    fn mask_and_image_round_trip() {
        let mask = Grid::from_fn(5, 4, |x, y| (x + y) % 3 == 0);
        assert_eq!(
            decode_mask_png(&encode_mask_png(&mask).unwrap()).unwrap(),
            mask
        );
        let img = Grid::from_fn(4, 3, |x, y| [x as f64 / 65535.0, y as f64 / 3.0, 1.0]);
        let back = decode_image_png(&encode_image_png(&img).unwrap()).unwrap();
        for (a, b) in img.iter().zip(back.iter()) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 0.5 / 65535.0);
            }
        }
        assert!(encode_image_png(&Grid::filled(1, 1, [1.5, 0.0, 0.0])).is_err());
    }

    #[test]
    fn eight_bit_gray_image_is_accepted() {
        let bytes = encode_png(
            2,
            1,
            png::ColorType::Grayscale,
            png::BitDepth::Eight,
            &[0, 255],
        )
        .unwrap();
        let img = decode_image_png(&bytes).unwrap();
        assert_eq!(img.as_slice(), &[[0.0; 3], [1.0; 3]]);
    }

    #[test]
    fn pfm_layout_is_bottom_up_little_endian() {
        let g = Grid::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_pfm_scalar(&g).unwrap();
        let header = b"Pf\n2 2\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        let first = f32::from_le_bytes(bytes[header.len()..header.len() + 4].try_into().unwrap());
        assert_eq!(first, 3.0);
        assert_eq!(decode_pfm_scalar(&bytes).unwrap(), g);
    }

    #[test]
    fn pfm_big_endian_and_errors() {
        let mut bytes = b"PF\n1 1\n1.0\n".to_vec();
        for v in [1.5f32, -2.0, 0.25] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        assert_eq!(
            decode_pfm::<3>(&bytes).unwrap().as_slice(),
            &[[1.5, -2.0, 0.25]]
        );
        assert!(matches!(
            decode_pfm::<1>(&bytes),
            Err(Error::Parse { offset: 0, .. })
        ));
        match decode_pfm::<3>(&bytes[..bytes.len() - 1]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 11),
            other => panic!("{other:?}"),
        }
        match decode_pfm::<1>(b"Pf\n2 x\n-1\n") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn poses_round_trip_and_renormalize() {
        let poses: Vec<RigidTransform> = (0..5)
            .map(|i| {
                let k = i as f64;
                Twist::from_array([k, -0.5 * k, 2.0, 0.1 * k, 0.3, -0.2 * k])
                    .exp()
                    .unwrap()
            })
            .collect();
        let back = decode_poses(&encode_poses(&poses)).unwrap();
        for (a, b) in poses.iter().zip(&back) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
        let sloppy = "1.000001 0 0 1\n0 1 0 2\n0 0 1 3\n";
        let err = decode_poses(sloppy).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 0, .. }), "{err:?}");
        let p = decode_poses("1.00001 0 0 1 0 0.99999 0 2 0 0 1 3\n\n").unwrap();
        assert_eq!(p.len(), 1);
        assert!(
            p[0].max_abs_diff(&RigidTransform::from_translation(Vector3::new(
                1.0, 2.0, 3.0
            ))) < 1e-4
        );
        match decode_poses("1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 x 0 1 0 0 0 0 1 0\n") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 30),
            other => panic!("{other:?}"),
        }
        assert!(decode_poses("-1 0 0 0 0 1 0 0 0 0 1 0\n").is_err());
    }

    #[test]
    fn intrinsics_parsing() {
        let cam =
            decode_intrinsics("# calib\nfx 700\nfy: 710.5\ncx=320 # principal\ncy 96\n").unwrap();
        assert_eq!(
            (cam.fx, cam.fy, cam.cx, cam.cy, cam.baseline),
            (700.0, 710.5, 320.0, 96.0, 0.0)
        );
        let full = PinholeCamera::new(70.0, 70.0, 39.5, 29.5, 0.54).unwrap();
        assert_eq!(decode_intrinsics(&encode_intrinsics(&full)).unwrap(), full);
        match decode_intrinsics("fx 1\nfz 2\n") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
        assert!(decode_intrinsics("fx 1\nfy 1\ncx 0\n").is_err());
        assert!(decode_intrinsics("fx 1\nfx 1\n").is_err());
    }

    #[test]
    fn file_errors_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        fs::write(&p, b"junk").unwrap();
        match read_flow_png(&p) {
            Err(Error::Png { path, .. }) => assert_eq!(path, p),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            read_mask_png(dir.path().join("missing.png")),
            Err(Error::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn quantized_flow_round_trips(
            w in 1usize..8, h in 1usize..8,
            raw in prop::collection::vec((0u16..=65535, 0u16..=65535, any::<bool>()), 64)
        ) {
            let flow = Grid::from_fn(w, h, |x, y| {
                let r = raw[(y * w + x) % 64];
                [(f64::from(r.0) - FLOW_OFFSET) / FLOW_SCALE, (f64::from(r.1) - FLOW_OFFSET) / FLOW_SCALE]
            });
            let valid = Grid::from_fn(w, h, |x, y| raw[(y * w + x) % 64].2);
            let f = FlowField { flow: flow.clone(), valid: valid.clone() };
            let back = decode_flow_png(&encode_flow_png(&f).unwrap()).unwrap();
            prop_assert_eq!(&back.valid, &valid);
            for y in 0..h { for x in 0..w {
                if *valid.get(x, y) { prop_assert_eq!(back.flow.get(x, y), flow.get(x, y)); }
            }}
        }

        #[test]
        fn pfm_round_trips_f32_values(values in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..60)) {
            let n = values.len();
            let g = Grid::from_vec(n, 1, values.iter().map(|&v| [f64::from(v); 3]).collect()).unwrap();
            prop_assert_eq!(decode_pfm::<3>(&encode_pfm(&g).unwrap()).unwrap(), g);
        }
    }
}
