//! 8-bit PNG IO. Images load as `[3,H,W]` f64 in [0,1] (grayscale replicated
//! to 3 channels); masks load as `[H,W]` integer labels.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::{Array2, Array3, IxDyn};
use radenc_core::error::{Error, Result};
use radenc_core::tensor::Arr;

pub fn write_png_gray(path: &Path, img: &Array2<u8>) -> Result<()> {
    let (h, w) = img.dim();
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Io(format!("png header: {e}")))?;
    writer
        .write_image_data(img.as_slice().expect("contiguous mask"))
        .map_err(|e| Error::Io(format!("png data: {e}")))?;
    Ok(())
}

pub fn write_png_rgb(path: &Path, img: &Array3<u8>) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::shape(format!("write_png_rgb expects 3 channels, got {c}")));
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                data.push(img[(ch, i, j)]);
            }
        }
    }
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Io(format!("png header: {e}")))?;
    writer
        .write_image_data(&data)
        .map_err(|e| Error::Io(format!("png data: {e}")))?;
    Ok(())
}

fn decode(path: &Path) -> Result<(Vec<u8>, png::OutputInfo)> {
    let file = File::open(path)
        .map_err(|e| Error::data(format!("missing file `{}`: {e}", path.display())))?;
    let decoder = png::Decoder::new(file);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::data(format!("png `{}`: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::data(format!("png `{}`: {e}", path.display())))?;
    buf.truncate(info.buffer_size());
    Ok((buf, info))
}

/// Load an image as `[3,H,W]` in [0,1].
pub fn read_png_image(path: &Path) -> Result<Arr> {
    let (buf, info) = decode(path)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::data(format!(
            "unsupported bit depth in `{}`",
            path.display()
        )));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::GrayscaleAlpha => 2,
        other => {
            return Err(Error::data(format!(
                "unsupported png color type {:?} in `{}`",
                other,
                path.display()
            )))
        }
    };
    let mut out = Arr::zeros(IxDyn(&[3, h, w]));
    for i in 0..h {
        for j in 0..w {
            let base = (i * w + j) * channels;
            let (r, g, b) = match channels {
                1 | 2 => {
                    let v = buf[base] as f64 / 255.0;
                    (v, v, v)
                }
                _ => (
                    buf[base] as f64 / 255.0,
                    buf[base + 1] as f64 / 255.0,
                    buf[base + 2] as f64 / 255.0,
                ),
            };
            out[[0, i, j]] = r;
            out[[1, i, j]] = g;
            out[[2, i, j]] = b;
        }
    }
    Ok(out)
}

/// Load a single-channel integer-label mask.
pub fn read_png_mask(path: &Path) -> Result<Array2<u8>> {
    let (buf, info) = decode(path)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::data(format!(
            "mask `{}` must be 8-bit grayscale",
            path.display()
        )));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    Ok(Array2::from_shape_vec((h, w), buf).expect("mask buffer size"))
}
