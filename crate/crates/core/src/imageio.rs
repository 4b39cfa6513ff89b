//! 8-bit PNG reading and writing for [`PlanarTensor`] images in `[0, 1]`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::PlanarTensor;

fn image_err(path: &Path, msg: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

/// Reads a PNG as `channels` (1 or 3) planes. Grayscale is replicated to RGB,
/// RGB is averaged to gray, alpha is dropped.
pub fn read_png(path: &Path, channels: usize) -> Result<PlanarTensor> {
    if channels != 1 && channels != 3 {
        return Err(image_err(path, format!("unsupported channel count {channels}")));
    }
    let file = File::open(path)?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let src_channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(image_err(path, format!("unsupported color type {other:?}"))),
    };
    let stride = info.line_size;
    let mut out = PlanarTensor::filled(channels, h, w, 0.0);
    for y in 0..h {
        let row = &buf[y * stride..];
        for x in 0..w {
            let px = &row[x * src_channels..];
            let rgb = if src_channels >= 3 {
                [px[0], px[1], px[2]]
            } else {
                [px[0]; 3]
            };
            if channels == 3 {
                for (c, v) in rgb.iter().enumerate() {
                    out.set(c, y, x, *v as f64 / 255.0);
                }
            } else {
                let mean = rgb.iter().map(|v| *v as f64).sum::<f64>() / 3.0;
                out.set(0, y, x, mean / 255.0);
            }
        }
    }
    Ok(out)
}

/// Quantises `[0, 1]` values to 8 bits (clamped, rounded).
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1-channel image as grayscale or a 3-channel image as RGB.
pub fn write_png(path: &Path, img: &PlanarTensor) -> Result<()> {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(image_err(path, format!("cannot write {c} channels"))),
    };
    let mut bytes = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                bytes.push(to_u8(img.get(ch, y, x)));
            }
        }
    }
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(&bytes).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))?;
    Ok(())
}

/// Draws a one-pixel rectangle outline `(x, y, w, h)` in `color`, clipped to
/// the image.
pub fn draw_rect(img: &mut PlanarTensor, x: usize, y: usize, w: usize, h: usize, color: &[f64]) {
    if w == 0 || h == 0 || x >= img.width() || y >= img.height() {
        return;
    }
    let x1 = (x + w - 1).min(img.width() - 1);
    let y1 = (y + h - 1).min(img.height() - 1);
    let channels = img.channels().min(color.len());
    for c in 0..channels {
        for xx in x..=x1 {
            img.set(c, y, xx, color[c]);
            img.set(c, y1, xx, color[c]);
        }
        for yy in y..=y1 {
            img.set(c, yy, x, color[c]);
            img.set(c, yy, x1, color[c]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let mut img = PlanarTensor::filled(3, 5, 7, 0.0);
        for (k, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((k * 29) % 256) as f64 / 255.0;
        }
        write_png(&path, &img).unwrap();
        let back = read_png(&path, 3).unwrap();
        assert_eq!(back, img);
        let gray = read_png(&path, 1).unwrap();
        assert_eq!((gray.channels(), gray.height(), gray.width()), (1, 5, 7));
    }

    #[test]
    fn gray_is_replicated_to_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mut m = PlanarTensor::filled(1, 3, 3, 0.0);
        m.set(0, 1, 1, 1.0);
        write_png(&path, &m).unwrap();
        let rgb = read_png(&path, 3).unwrap();
        for c in 0..3 {
            assert_eq!(rgb.get(c, 1, 1), 1.0);
            assert_eq!(rgb.get(c, 0, 0), 0.0);
        }
    }

    #[test]
    fn missing_file_is_an_error() {
        assert!(read_png(Path::new("/nonexistent/x.png"), 3).is_err());
    }

    #[test]
    fn rectangle_outline() {
        let mut img = PlanarTensor::filled(3, 8, 8, 0.0);
        draw_rect(&mut img, 2, 2, 4, 3, &[1.0, 0.0, 0.0]);
        assert_eq!(img.get(0, 2, 2), 1.0);
        assert_eq!(img.get(0, 4, 5), 1.0);
        assert_eq!(img.get(0, 3, 3), 0.0);
        assert_eq!(img.get(1, 2, 2), 0.0);
    }
}
