//! 8-bit PNG reading and writing for canvases, masks and heatmaps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::lpg::{Canvas, Mask};

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Png {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(width: usize, height: usize, color: ColorType, bytes: &[u8], out: impl Write, path: &Path) -> Result<()> {
    let mut enc = png::Encoder::new(out, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| png_err(path, e))?;
    w.write_image_data(bytes).map_err(|e| png_err(path, e))?;
    w.finish().map_err(|e| png_err(path, e))
}

fn write_png(path: &Path, width: usize, height: usize, color: ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    encode(width, height, color, bytes, &mut out, path)?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// PNG bytes of a 1- or 3-channel canvas.
pub fn encode_canvas(canvas: &Canvas) -> Result<Vec<u8>> {
    let color = canvas_color(canvas)?;
    let bytes: Vec<u8> = canvas.data().iter().map(|&v| quantize(v)).collect();
    let mut out = Vec::new();
    encode(canvas.width(), canvas.height(), color, &bytes, &mut out, Path::new("<memory>"))?;
    Ok(out)
}

fn canvas_color(canvas: &Canvas) -> Result<ColorType> {
    match canvas.channels() {
        1 => Ok(ColorType::Grayscale),
        3 => Ok(ColorType::Rgb),
        c => Err(Error::contract(format!("cannot store a {c}-channel canvas as PNG"))),
    }
}

pub fn write_canvas(path: &Path, canvas: &Canvas) -> Result<()> {
    let color = canvas_color(canvas)?;
    let bytes: Vec<u8> = canvas.data().iter().map(|&v| quantize(v)).collect();
    write_png(path, canvas.width(), canvas.height(), color, &bytes)
}

/// Reads any 8-bit PNG as an RGB canvas (gray is replicated, alpha dropped).
pub fn read_canvas(path: &Path) -> Result<Canvas> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(Transformations::EXPAND | Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let src_channels = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(png_err(path, "unexpanded palette image")),
    };
    let mut data = Vec::with_capacity(w * h * 3);
    for px in buf[..info.buffer_size()].chunks(info.line_size / w).take(w * h) {
        match src_channels {
            1 | 2 => data.extend([f32::from(px[0]) / 255.0; 3]),
            _ => data.extend(px[..3].iter().map(|&b| f32::from(b) / 255.0)),
        }
    }
    Canvas::new(h, w, 3, data)
}

/// Single-channel mask: 0 keeps, 255 generates.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let bytes: Vec<u8> = mask.data().iter().map(|&v| if v != 0.0 { 255 } else { 0 }).collect();
    write_png(path, mask.width(), mask.height(), ColorType::Grayscale, &bytes)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let canvas = read_canvas(path)?;
    let data = canvas
        .data()
        .chunks(3)
        .map(|px| if px[0] >= 0.5 { 1.0 } else { 0.0 })
        .collect();
    Mask::new(canvas.height(), canvas.width(), data)
}

pub fn write_gray(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    if bytes.len() != width * height {
        return Err(Error::contract(format!("{} bytes for a {width}×{height} image", bytes.len())));
    }
    write_png(path, width, height, ColorType::Grayscale, bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canvas_round_trip_at_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        let data: Vec<f32> = (0..4 * 5 * 3).map(|i| (i * 4) as f32 / 255.0).collect();
        let c = Canvas::new(4, 5, 3, data).unwrap();
        write_canvas(&p, &c).unwrap();
        let back = read_canvas(&p).unwrap();
        for (a, b) in c.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(std::fs::read(&p).unwrap(), encode_canvas(&c).unwrap());
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = Mask::new(2, 3, vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        write_mask(&p, &m).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
    }

    #[test]
    fn missing_and_garbage_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_canvas(&dir.path().join("none.png")), Err(Error::Io { .. })));
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not a png").unwrap();
        assert!(matches!(read_canvas(&p), Err(Error::Png { .. })));
    }
}
