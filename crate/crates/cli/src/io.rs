//! Image, mask and transform files. Images are 8-bit RGB on disk and
//! `[0, 1]` floats in memory.

use std::fs;
use std::path::Path;

use guided_inpaint_core::domain::{denormalize, normalize, UnitImage};
use guided_inpaint_core::{AffineTransform, HoleSpec, ImageTensor};
use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};

use crate::error::{data, io_at, CliResult};

fn open(path: &Path) -> CliResult<image::DynamicImage> {
    image::open(path).map_err(|e| data(format!("{}: {e}", path.display())))
}

pub fn rgb_to_unit(img: &RgbImage) -> CliResult<UnitImage> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(UnitImage::from_fn(h, w, |c, y, x| img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)?)
}

pub fn unit_to_rgb(img: &UnitImage) -> RgbImage {
    let (w, h) = (img.width(), img.height());
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb([0, 1, 2].map(|c| (img.at(c, y as usize, x as usize) * 255.0).round().clamp(0.0, 255.0) as u8))
    })
}

/// Rounds a network-form image to what [`save_rgb`] would write.
pub fn quantize(img: &ImageTensor) -> RgbImage {
    unit_to_rgb(&denormalize(img))
}

pub fn load_rgb(path: &Path) -> CliResult<RgbImage> {
    Ok(open(path)?.to_rgb8())
}

/// Largest centered square, resized to `side x side` with a triangle filter.
pub fn square_crop(img: &RgbImage, side: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let s = w.min(h);
    let cropped = imageops::crop_imm(img, (w - s) / 2, (h - s) / 2, s, s).to_image();
    if s == side {
        cropped
    } else {
        imageops::resize(&cropped, side, side, FilterType::Triangle)
    }
}

/// Resizes (without cropping) when the size differs.
pub fn resize_rgb(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    if img.dimensions() == (width, height) {
        img.clone()
    } else {
        imageops::resize(img, width, height, FilterType::Triangle)
    }
}

pub fn load_network_image(path: &Path) -> CliResult<ImageTensor> {
    Ok(normalize(&rgb_to_unit(&load_rgb(path)?)?))
}

pub fn save_rgb(path: &Path, img: &RgbImage) -> CliResult<()> {
    img.save(path).map_err(|e| data(format!("{}: {e}", path.display())))
}

pub fn save_network_image(path: &Path, img: &ImageTensor) -> CliResult<()> {
    save_rgb(path, &quantize(img))
}

/// Gray mask, hole where the value is at least 128.
pub fn load_mask_gray(path: &Path) -> CliResult<GrayImage> {
    let m = open(path)?.to_luma8();
    Ok(GrayImage::from_fn(m.width(), m.height(), |x, y| image::Luma([if m.get_pixel(x, y)[0] >= 128 { 255 } else { 0 }])))
}

pub fn gray_to_hole(m: &GrayImage) -> CliResult<HoleSpec> {
    let bits: Vec<u8> = m.pixels().map(|p| (p[0] >= 128) as u8).collect();
    Ok(HoleSpec::from_mask(m.height() as usize, m.width() as usize, &bits)?)
}

pub fn load_mask(path: &Path) -> CliResult<HoleSpec> {
    gray_to_hole(&load_mask_gray(path)?)
}

/// Hole pixels 255, context 0.
pub fn save_mask(path: &Path, hole: &HoleSpec) -> CliResult<()> {
    let (w, h) = (hole.width() as u32, hole.height() as u32);
    let img = GrayImage::from_fn(w, h, |x, y| image::Luma([if hole.contains(x as usize, y as usize) { 255 } else { 0 }]));
    img.save(path).map_err(|e| data(format!("{}: {e}", path.display())))
}

/// Six whitespace-separated reals `a b tx c d ty`.
pub fn read_transform(path: &Path) -> CliResult<AffineTransform> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| data(format!("{}: {t:?}: {e}", path.display()))))
        .collect::<CliResult<_>>()?;
    let theta: [f64; 6] =
        vals.try_into().map_err(|v: Vec<f64>| data(format!("{}: expected 6 numbers, got {}", path.display(), v.len())))?;
    let t = AffineTransform::new(theta);
    if !t.is_finite() {
        return Err(data(format!("{}: non-finite transform", path.display())));
    }
    Ok(t)
}

pub fn write_transform(path: &Path, t: &AffineTransform) -> CliResult<()> {
    let line: Vec<String> = t.theta.iter().map(|v| format!("{v:?}")).collect();
    fs::write(path, line.join(" ") + "\n").map_err(io_at(path))
}

pub fn ensure_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(io_at(path))
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(io_at(&tmp))?;
    fs::rename(&tmp, path).map_err(io_at(path))
}
