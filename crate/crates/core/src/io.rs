//! PNG reading and writing for images, mattes and trimaps.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};

use crate::domain::{AlphaMatte, Grid, Image, Label, Trimap};
use crate::error::{LfpError, Result};

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => LfpError::io(path, e),
        source => LfpError::Image {
            path: path.to_path_buf(),
            source,
        },
    })
}

fn save<P, C>(path: &Path, buf: &ImageBuffer<P, C>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| LfpError::io(dir, e))?;
    }
    buf.save(path).map_err(|source| LfpError::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads an RGB image, scaling 8-bit samples by `1/255` (16-bit by `1/65535`).
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) | DynamicImage::ImageLuma16(_) => {
            let rgb = img.to_rgb16();
            planar(&rgb.into_raw(), h, w, |v| v as f64 / 65535.0)
        }
        _ => {
            let rgb = img.to_rgb8();
            planar(&rgb.into_raw(), h, w, |v| v as f64 / 255.0)
        }
    };
    Image::new(h, w, data)
}

fn planar<T: Copy>(interleaved: &[T], h: usize, w: usize, f: impl Fn(T) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; 3 * h * w];
    for (i, px) in interleaved.chunks(3).enumerate() {
        for c in 0..3 {
            out[c * h * w + i] = f(px[c]);
        }
    }
    out
}

pub fn write_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let (h, w) = img.dims();
    let buf = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([to_u8(img.get(0, y, x)), to_u8(img.get(1, y, x)), to_u8(img.get(2, y, x))])
    });
    save(path.as_ref(), &buf)
}

/// Reads a greyscale matte (8- or 16-bit).
pub fn read_alpha(path: impl AsRef<Path>) -> Result<AlphaMatte> {
    let path = path.as_ref();
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        other => other.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
    };
    AlphaMatte::new(h, w, data)
}

pub fn write_alpha(path: impl AsRef<Path>, alpha: &AlphaMatte) -> Result<()> {
    let (h, w) = alpha.dims();
    let buf = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(alpha.at(y as usize, x as usize))]));
    save(path.as_ref(), &buf)
}

/// Reads a trimap coded `0 = BG`, `128 = U`, `255 = FG`. Any other value is
/// an error, never rounded.
pub fn read_trimap(path: impl AsRef<Path>) -> Result<Trimap> {
    let path = path.as_ref();
    let img = open(path)?;
    let (w, h) = (img.width(), img.height());
    let codes: Vec<u16> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(u16::from).collect(),
        DynamicImage::ImageLuma16(buf) => buf
            .into_raw()
            .into_iter()
            .map(|v| if v % 257 == 0 { v / 257 } else { v })
            .collect(),
        other => {
            return Err(LfpError::Data(format!(
                "trimap {} must be single-channel greyscale, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let labels = codes
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            Label::from_code(v).ok_or(LfpError::TrimapCode {
                value: v,
                x: i as u32 % w,
                y: i as u32 / w,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Trimap::new(h as usize, w as usize, labels)
}

pub fn write_trimap(path: impl AsRef<Path>, t: &Trimap) -> Result<()> {
    let (h, w) = t.dims();
    let buf = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([t.at(y as usize, x as usize).code()]));
    save(path.as_ref(), &buf)
}

/// Writes any single-channel grid, scaled so `max` maps to white.
pub fn write_gray(path: impl AsRef<Path>, grid: &Grid<f64>, max: f64) -> Result<()> {
    let (h, w) = grid.dims();
    let buf = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([to_u8(grid.get(0, y as usize, x as usize) / max)])
    });
    save(path.as_ref(), &buf)
}
