use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::RasterError;

/// Decoded 8-bit PNG with interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PngImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

fn png_err(e: impl std::fmt::Display) -> RasterError {
    RasterError::Png(e.to_string())
}

fn check_plane(name: &str, plane: &[u8], width: usize, height: usize) -> Result<(), RasterError> {
    if width == 0 || height == 0 {
        return Err(RasterError::Empty { width, height });
    }
    if plane.len() != width * height {
        return Err(RasterError::PlaneSize { band: name.into(), expected: width * height, got: plane.len() });
    }
    Ok(())
}

fn encode(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<(), RasterError> {
    let file = BufWriter::new(File::create(path)?);
    let mut encoder = png::Encoder::new(file, width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_compression(png::Compression::Fast);
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(data).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

/// 8-bit grayscale PNG from one quantized plane.
pub fn write_png_gray(path: impl AsRef<Path>, width: usize, height: usize, plane: &[u8]) -> Result<(), RasterError> {
    check_plane("gray", plane, width, height)?;
    encode(path.as_ref(), width, height, png::ColorType::Grayscale, plane)
}

/// 8-bit RGB PNG from three quantized planes, in R, G, B order.
pub fn write_png_rgb(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    planes: [&[u8]; 3],
) -> Result<(), RasterError> {
    for (name, plane) in ["red", "green", "blue"].iter().zip(planes) {
        check_plane(name, plane, width, height)?;
    }
    let mut interleaved = Vec::with_capacity(width * height * 3);
    for i in 0..width * height {
        interleaved.extend(planes.iter().map(|p| p[i]));
    }
    encode(path.as_ref(), width, height, png::ColorType::Rgb, &interleaved)
}

/// Writes an interleaved gray (1 channel) or RGB (3 channel) image.
pub fn write_png(path: impl AsRef<Path>, img: &PngImage) -> Result<(), RasterError> {
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        n => return Err(RasterError::UnsupportedLayout(format!("{n}-channel PNG"))),
    };
    check_plane("interleaved", &img.data, img.width * img.channels, img.height)?;
    encode(path.as_ref(), img.width, img.height, color, &img.data)
}

/// Reads an 8-bit grayscale or RGB PNG.
pub fn read_png(path: impl AsRef<Path>) -> Result<PngImage, RasterError> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info().map_err(png_err)?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| png_err("image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(RasterError::UnsupportedLayout(format!("{:?} bit depth", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(RasterError::UnsupportedLayout(format!("{other:?} PNG"))),
    };
    buf.truncate(info.buffer_size());
    Ok(PngImage { width: info.width as usize, height: info.height as usize, channels, data: buf })
}
