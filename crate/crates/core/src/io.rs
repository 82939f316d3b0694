//! PNG loading/saving, resizing and dataset discovery.
//!
//! Dataset layout: `<root>/images/<id>.png` with optional `<root>/masks/<id>.png`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BinaryMask, Image, SampleRecord};

pub const DEFAULT_IMAGE_SIZE: usize = 256;

fn decode(path: &Path) -> Result<DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            message: "zero-dimension image".into(),
        });
    }
    Ok(img)
}

/// Decode an 8- or 16-bit raster into `[0, 1]` intensities. Grayscale stays
/// single-channel, everything else becomes RGB. `target_size` resizes to a
/// square with corner-aligned bilinear sampling; `None` keeps native size.
pub fn load_image<T: Scalar>(path: &Path, target_size: Option<usize>) -> Result<Image<T>> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data): (usize, Vec<f64>) = match &img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
            let g = img.to_luma8();
            (1, g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect())
        }
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            let g = img.to_luma16();
            (1, g.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect())
        }
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => {
            let c = img.to_rgb16();
            (3, c.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect())
        }
        _ => {
            let c = img.to_rgb8();
            (3, c.into_raw().into_iter().map(|v| v as f64 / 255.0).collect())
        }
    };
    let data = match target_size {
        Some(t) if t != w || t != h => {
            if t == 0 {
                return Err(Error::InvalidInput("target size must be positive".into()));
            }
            resize_bilinear(&data, h, w, channels, t, t)
        }
        _ => data,
    };
    let (oh, ow) = target_size.map_or((h, w), |t| (t, t));
    Image::new(oh, ow, channels, data.into_iter().map(T::lit).collect())
}

/// Decode a mask, resize with nearest-neighbor sampling and binarize at
/// `> 127` on the 8-bit scale.
pub fn load_mask(path: &Path, target_size: Option<usize>) -> Result<BinaryMask> {
    let img = decode(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let (oh, ow) = target_size.map_or((h, w), |t| (t, t));
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidInput("target size must be positive".into()));
    }
    let resized = if (oh, ow) == (h, w) {
        raw
    } else {
        resize_nearest(&raw, h, w, oh, ow)
    };
    BinaryMask::new(oh, ow, resized.into_iter().map(|v| u8::from(v > 127)).collect())
}

/// Corner-aligned bilinear resize of interleaved data: output pixel `i` samples
/// source coordinate `i * (in - 1) / (out - 1)`.
pub fn resize_bilinear<T: Scalar>(
    src: &[T],
    h: usize,
    w: usize,
    channels: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let coords = |out: usize, inp: usize| -> Vec<(usize, usize, T)> {
        (0..out)
            .map(|i| {
                let s = if out == 1 {
                    (inp as f64 - 1.0) / 2.0
                } else {
                    i as f64 * (inp as f64 - 1.0) / (out as f64 - 1.0)
                };
                let i0 = (s.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, T::lit(s - i0 as f64))
            })
            .collect()
    };
    let xs = coords(out_w, w);
    let ys = coords(out_h, h);
    let mut out = Vec::with_capacity(out_h * out_w * channels);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..channels {
                let at = |x: usize, y: usize| src[(y * w + x) * channels + c];
                let top = at(x0, y0) * (T::one() - fx) + at(x1, y0) * fx;
                let bot = at(x0, y1) * (T::one() - fx) + at(x1, y1) * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    out
}

/// Nearest-neighbor resize of a single-channel grid using pixel-center mapping.
pub fn resize_nearest<V: Copy>(src: &[V], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<V> {
    let map = |i: usize, inp: usize, out: usize| -> usize {
        (((i as f64 + 0.5) * inp as f64 / out as f64).floor() as usize).min(inp - 1)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = map(y, h, out_h);
        for x in 0..out_w {
            out.push(src[sy * w + map(x, w, out_w)]);
        }
    }
    out
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

fn save_dynamic(img: DynamicImage, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Write an image as 8-bit grayscale or RGB PNG.
pub fn save_image<T: Scalar>(img: &Image<T>, path: &Path) -> Result<()> {
    let (h, w) = img.dims();
    let raw: Vec<u8> = img.data().iter().map(|v| to_u8(v.as_f64())).collect();
    let dynamic = if img.channels() == 1 {
        DynamicImage::ImageLuma8(
            ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, raw).expect("buffer size"),
        )
    } else {
        DynamicImage::ImageRgb8(
            ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, raw).expect("buffer size"),
        )
    };
    save_dynamic(dynamic, path)
}

/// Write a mask as 8-bit PNG with values `{0, 255}`.
pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let raw: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    let buf = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw)
        .expect("buffer size");
    save_dynamic(DynamicImage::ImageLuma8(buf), path)
}

/// Enumerate `<root>/images/*.png`, pairing each with `<root>/masks/<id>.png`
/// when present. Records are sorted by id.
pub fn list_dataset(root: &Path) -> Result<Vec<SampleRecord>> {
    let images = root.join("images");
    let masks = root.join("masks");
    let entries = fs::read_dir(&images).map_err(|e| Error::io(&images, e))?;
    let mut records = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&images, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let mask_path = masks.join(format!("{id}.png"));
        records.push(SampleRecord {
            id: id.to_string(),
            image_path: path.clone(),
            mask_path: mask_path.is_file().then_some(mask_path),
        });
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    if records.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no PNG images under {}",
            images.display()
        )));
    }
    Ok(records)
}

/// Every `*.png` in a directory keyed by file stem, sorted.
pub fn list_pngs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(id) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((id.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}
