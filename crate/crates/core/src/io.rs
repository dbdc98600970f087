//! Readers and writers for panoptic maps, semantic maps, tensors and images.
//!
//! * Panoptic PNG: 8-bit RGB, `id = R + 256·G + 65536·B`.
//! * Semantic PNG: 8-bit grayscale, class index = pixel value.
//! * Tensor fixture: a `tensor <n> <c> <h> <w>` header line followed by
//!   `n·c·h·w` whitespace-separated decimals in row-major order, written with
//!   17 significant digits (one tensor row per line).
//! * Image PNG: 8-bit RGB from a `(1, 3, H, W)` tensor in `[-1, 1]`, each
//!   value mapped to `floor((v + 1) / 2 · 255 + 0.5)` clamped to `[0, 255]`.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::maps::{PanopticMap, SemanticMap};
use crate::tensor::{Scalar, Tensor};

/// Largest id a panoptic PNG can hold, plus one.
pub const PNG_ID_LIMIT: u32 = 1 << 24;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

struct RawPng {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

fn read_png(path: &Path, expected: ColorType) -> Result<RawPng> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| format_err(path, format!("cannot decode PNG header: {e}")))?;
    let info = reader.info();
    if info.bit_depth != BitDepth::Eight {
        return Err(format_err(
            path,
            format!("expected 8-bit samples, found {:?}", info.bit_depth),
        ));
    }
    if info.color_type != expected {
        return Err(format_err(
            path,
            format!("expected {expected:?} pixels, found {:?}", info.color_type),
        ));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| format_err(path, "image too large"))?;
    let mut data = vec![0; size];
    let frame = reader
        .next_frame(&mut data)
        .map_err(|e| format_err(path, format!("cannot decode pixel data: {e}")))?;
    let (width, height) = (frame.width as usize, frame.height as usize);
    let channels = expected.samples();
    if frame.line_size != width * channels {
        return Err(format_err(path, "unexpected scanline layout"));
    }
    data.truncate(frame.line_size * height);
    Ok(RawPng {
        width,
        height,
        data,
    })
}

fn write_png(path: &Path, width: usize, height: usize, color: ColorType, data: &[u8]) -> Result<()> {
    let (w, h) = (
        u32::try_from(width).map_err(|_| format_err(path, "image too wide"))?,
        u32::try_from(height).map_err(|_| format_err(path, "image too tall"))?,
    );
    let file = File::create(path).map_err(io_err(path))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w, h);
    encoder.set_color(color);
    encoder.set_depth(BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| format_err(path, format!("cannot write PNG header: {e}")))?;
    writer
        .write_image_data(data)
        .map_err(|e| format_err(path, format!("cannot write PNG data: {e}")))?;
    writer
        .finish()
        .map_err(|e| format_err(path, format!("cannot finish PNG: {e}")))
}

pub fn read_panoptic_png(path: impl AsRef<Path>) -> Result<PanopticMap> {
    let path = path.as_ref();
    let raw = read_png(path, ColorType::Rgb)?;
    let ids = raw
        .data
        .chunks_exact(3)
        .map(|px| px[0] as u32 + 256 * px[1] as u32 + 65536 * px[2] as u32)
        .collect();
    PanopticMap::new(raw.height, raw.width, ids)
}

pub fn write_panoptic_png(map: &PanopticMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut data = Vec::with_capacity(map.ids().len() * 3);
    for (pos, &id) in map.ids().iter().enumerate() {
        if id >= PNG_ID_LIMIT {
            return Err(Error::Domain(format!(
                "id {id} at pixel ({}, {}) does not fit in 24 bits",
                pos / map.width(),
                pos % map.width()
            )));
        }
        data.extend_from_slice(&[id as u8, (id >> 8) as u8, (id >> 16) as u8]);
    }
    write_png(path, map.width(), map.height(), ColorType::Rgb, &data)
}

/// Reads a grayscale class map; every value must be below `num_classes`.
pub fn read_semantic_png(path: impl AsRef<Path>, num_classes: usize) -> Result<SemanticMap> {
    let path = path.as_ref();
    let raw = read_png(path, ColorType::Grayscale)?;
    if let Some(pos) = raw.data.iter().position(|&v| v as usize >= num_classes) {
        return Err(format_err(
            path,
            format!(
                "class {} at row {}, column {} is not below {num_classes}",
                raw.data[pos],
                pos / raw.width,
                pos % raw.width
            ),
        ));
    }
    let classes = raw.data.iter().map(|&v| v as u32).collect();
    SemanticMap::new(raw.height, raw.width, classes, num_classes)
}

pub fn write_semantic_png(map: &SemanticMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if map.num_classes() > 256 {
        return Err(Error::Domain(format!(
            "{} classes do not fit in 8-bit grayscale",
            map.num_classes()
        )));
    }
    let data: Vec<u8> = map.classes().iter().map(|&c| c as u8).collect();
    write_png(path, map.width(), map.height(), ColorType::Grayscale, &data)
}

/// Formats a tensor in the fixture text format.
pub fn format_tensor_fixture<T: Scalar>(x: &Tensor<T>) -> String {
    let [n, c, h, w] = x.shape();
    let mut out = format!("tensor {n} {c} {h} {w}\n");
    if w > 0 {
        for row in x.data().chunks(w) {
            let mut first = true;
            for v in row {
                if !first {
                    out.push(' ');
                }
                first = false;
                let _ = write!(out, "{:.16e}", v.as_f64());
            }
            out.push('\n');
        }
    }
    out
}

/// Parses the fixture text format. `origin` only labels error messages.
pub fn parse_tensor_fixture<T: Scalar>(text: &str, origin: &Path) -> Result<Tensor<T>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 || fields[0] != "tensor" {
        return Err(parse_err(
            1,
            format!("expected `tensor <n> <c> <h> <w>`, found `{header}`"),
        ));
    }
    let mut shape = [0usize; 4];
    for (slot, field) in shape.iter_mut().zip(&fields[1..]) {
        *slot = field
            .parse()
            .map_err(|_| parse_err(1, format!("bad dimension `{field}`")))?;
    }
    let expected: usize = shape.iter().product();
    let mut data = Vec::with_capacity(expected);
    for (idx, line) in lines {
        for token in line.split_whitespace() {
            if data.len() == expected {
                return Err(parse_err(
                    idx + 1,
                    format!("more than the {expected} values announced by the header"),
                ));
            }
            let v: f64 = token
                .parse()
                .map_err(|_| parse_err(idx + 1, format!("bad number `{token}`")))?;
            data.push(T::from_f64(v));
        }
    }
    if data.len() != expected {
        return Err(parse_err(
            text.lines().count(),
            format!("header announces {expected} values, found {}", data.len()),
        ));
    }
    Tensor::from_vec(shape, data)
}

pub fn write_tensor_fixture<T: Scalar>(x: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_tensor_fixture(x)).map_err(io_err(path))
}

pub fn read_tensor_fixture<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_tensor_fixture(&text, path)
}

/// Quantizes one value in `[-1, 1]` to a byte with round-half-up.
pub fn quantize_unit(v: f64) -> Option<u8> {
    if v.is_nan() {
        return None;
    }
    let scaled = ((v + 1.0) / 2.0 * 255.0 + 0.5).floor();
    Some(scaled.clamp(0.0, 255.0) as u8)
}

/// RGB bytes, row-major and interleaved, of a `(1, 3, H, W)` tensor.
pub fn image_bytes<T: Scalar>(x: &Tensor<T>) -> Result<Vec<u8>> {
    let [n, c, h, w] = x.shape();
    if n != 1 || c != 3 {
        return Err(Error::Dimension(format!(
            "image tensor must be (1, 3, H, W), got {:?}",
            x.shape()
        )));
    }
    let mut data = vec![0u8; h * w * 3];
    for ch in 0..3 {
        for (pos, &v) in x.plane(0, ch).iter().enumerate() {
            data[pos * 3 + ch] = quantize_unit(v.as_f64()).ok_or_else(|| {
                Error::Domain(format!(
                    "NaN in channel {ch} at row {}, column {}",
                    pos / w,
                    pos % w
                ))
            })?;
        }
    }
    Ok(data)
}

pub fn write_image_png<T: Scalar>(x: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let data = image_bytes(x)?;
    write_png(path.as_ref(), x.width(), x.height(), ColorType::Rgb, &data)
}

/// Reads an 8-bit RGB PNG back as raw interleaved bytes, with its size.
pub fn read_rgb_png(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let raw = read_png(path.as_ref(), ColorType::Rgb)?;
    Ok((raw.height, raw.width, raw.data))
}
