//! In-memory images and PNG encoding.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb8 {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    /// Quantizes linear values in [0,1] (clamped) to 8 bits.
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Self {
        Self {
            width,
            height,
            data: values.iter().map(|&v| quantize_unit(v)).collect(),
        }
    }

    pub fn pixel_unit(&self, i: usize) -> [f64; 3] {
        [0, 1, 2].map(|c| self.data[3 * i + c] as f64 / 255.0)
    }

    pub fn to_unit(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64 / 255.0).collect()
    }
}

pub fn quantize_unit(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Depth in millimeters, 0 meaning "no surface".
pub fn quantize_depth_mm(meters: f64) -> u16 {
    if meters.is_finite() && meters > 0.0 {
        (meters * 1000.0).round().clamp(1.0, u16::MAX as f64) as u16
    } else {
        0
    }
}

pub fn depth_mm_to_meters(mm: u16) -> Option<f64> {
    (mm > 0).then(|| mm as f64 / 1000.0)
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(data).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

pub fn write_rgb8(path: &Path, img: &Rgb8) -> Result<()> {
    write_png(path, img.width, img.height, png::ColorType::Rgb, png::BitDepth::Eight, &img.data)
}

pub fn write_gray8(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    write_png(path, width, height, png::ColorType::Grayscale, png::BitDepth::Eight, data)
}

pub fn write_gray16(path: &Path, width: usize, height: usize, data: &[u16]) -> Result<()> {
    // PNG stores 16-bit samples big-endian.
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_be_bytes()).collect();
    write_png(path, width, height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
}

/// Decoded PNG samples.
pub struct Decoded {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub sixteen_bit: bool,
    pub bytes: Vec<u8>,
}

pub fn read_png(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    buf.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(png_err(path, "indexed color is not supported")),
    };
    let sixteen_bit = match info.bit_depth {
        png::BitDepth::Eight => false,
        png::BitDepth::Sixteen => true,
        other => return Err(png_err(path, format!("unsupported bit depth {other:?}"))),
    };
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        sixteen_bit,
        bytes: buf,
    })
}

pub fn read_rgb8(path: &Path) -> Result<Rgb8> {
    let d = read_png(path)?;
    if d.sixteen_bit || d.channels < 3 {
        return Err(png_err(path, "expected 8-bit RGB"));
    }
    let data = d
        .bytes
        .chunks_exact(d.channels)
        .flat_map(|px| [px[0], px[1], px[2]])
        .collect();
    Ok(Rgb8 {
        width: d.width,
        height: d.height,
        data,
    })
}

pub fn read_gray8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let d = read_png(path)?;
    if d.sixteen_bit || d.channels != 1 {
        return Err(png_err(path, "expected 8-bit grayscale"));
    }
    Ok((d.width, d.height, d.bytes))
}

pub fn read_gray16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let d = read_png(path)?;
    if !d.sixteen_bit || d.channels != 1 {
        return Err(png_err(path, "expected 16-bit grayscale"));
    }
    let data = d.bytes.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
    Ok((d.width, d.height, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let img = Rgb8 {
            width: 3,
            height: 2,
            data: (0..18).map(|v| (v * 13) as u8).collect(),
        };
        let p = dir.path().join("c.png");
        write_rgb8(&p, &img).unwrap();
        assert_eq!(read_rgb8(&p).unwrap(), img);

        let depth = vec![0u16, 1, 2999, 65535, 300, 7];
        let p = dir.path().join("d.png");
        write_gray16(&p, 3, 2, &depth).unwrap();
        assert_eq!(read_gray16(&p).unwrap().2, depth);

        assert!(matches!(read_png(&dir.path().join("none.png")), Err(Error::MissingFile(_))));
    }

    #[test]
    fn depth_quantization() {
        assert_eq!(quantize_depth_mm(f64::INFINITY), 0);
        assert_eq!(quantize_depth_mm(2.5004), 2500);
        assert_eq!(depth_mm_to_meters(0), None);
        assert_eq!(depth_mm_to_meters(1500), Some(1.5));
    }
}
