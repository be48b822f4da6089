//! PNG images and `DPT1` depth maps.
//!
//! `DPT1` layout, little-endian: magic `b"DPT1"`, width `u32`, height `u32`,
//! then `width * height` `f32` depths, row-major; background is `+inf`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::image::{quantize_u8, RgbImage};

const DEPTH_MAGIC: &[u8; 4] = b"DPT1";

/// 8-bit RGB PNG. Channels are rounded to the nearest 1/255.
pub fn write_png(path: &Path, image: &RgbImage) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), image.width as u32, image.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = image.data.iter().map(|&c| quantize_u8(c)).collect();
    let mut w = enc
        .write_header()
        .map_err(|e| Error::format(path, e.to_string()))?;
    w.write_image_data(&bytes)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_png(path: &Path) -> Result<RgbImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let dec = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = dec.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "expected 8-bit RGB"));
    }
    let data = buf[..info.buffer_size()]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    RgbImage::from_data(info.width as usize, info.height as usize, data)
}

pub fn write_depth(path: &Path, width: usize, height: usize, depth: &[f32]) -> Result<()> {
    if depth.len() != width * height {
        return Err(Error::ShapeMismatch("depth map size".into()));
    }
    let mut out = Vec::with_capacity(12 + depth.len() * 4);
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    for d in depth {
        out.extend_from_slice(&d.to_le_bytes());
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&out)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_depth(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != DEPTH_MAGIC {
        return Err(Error::format(path, "bad magic, expected DPT1"));
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + w * h * 4 {
        return Err(Error::format(path, "depth payload size mismatch"));
    }
    let depth = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((w, h, depth))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_of_quantized_image() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let mut img = RgbImage::from_data(3, 2, (0..18).map(|i| i as f32 / 17.0).collect()).unwrap();
        img.quantize();
        write_png(&p, &img).unwrap();
        assert_eq!(read_png(&p).unwrap(), img);
    }

    #[test]
    fn depth_roundtrip_keeps_infinity() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.dpt");
        let d = vec![1.5, f32::INFINITY, 0.25, 2.0];
        write_depth(&p, 2, 2, &d).unwrap();
        assert_eq!(read_depth(&p).unwrap(), (2, 2, d));
        std::fs::write(&p, b"XXXX").unwrap();
        assert!(read_depth(&p).is_err());
    }
}
