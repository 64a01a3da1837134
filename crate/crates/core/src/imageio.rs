use std::io::Cursor;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::{GrayImage, ImageFormat, RgbImage};

use crate::{Error, Result};

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn save_gray_png(img: &GrayImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

fn encode<I: image::ImageEncoder>(
    enc: I,
    raw: &[u8],
    w: u32,
    h: u32,
    ty: image::ExtendedColorType,
) -> Result<()> {
    enc.write_image(raw, w, h, ty)
        .map_err(|e| Error::Image(e.to_string()))
}

pub fn rgb_to_png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    encode(
        image::codecs::png::PngEncoder::new(&mut buf),
        img.as_raw(),
        img.width(),
        img.height(),
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(buf)
}

pub fn gray_to_png_bytes(img: &GrayImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    encode(
        image::codecs::png::PngEncoder::new(&mut buf),
        img.as_raw(),
        img.width(),
        img.height(),
        image::ExtendedColorType::L8,
    )?;
    Ok(buf)
}

pub fn rgb_to_base64_png(img: &RgbImage) -> Result<String> {
    Ok(B64.encode(rgb_to_png_bytes(img)?))
}

pub fn gray_to_base64_png(img: &GrayImage) -> Result<String> {
    Ok(B64.encode(gray_to_png_bytes(img)?))
}

fn decode_base64_image(data: &str) -> Result<image::DynamicImage> {
    let bytes = B64
        .decode(data.trim())
        .map_err(|e| Error::Image(format!("bad base64: {e}")))?;
    image::load(Cursor::new(bytes), ImageFormat::Png).map_err(|e| Error::Image(e.to_string()))
}

pub fn rgb_from_base64_png(data: &str) -> Result<RgbImage> {
    decode_base64_image(data).map(|i| i.to_rgb8())
}

pub fn gray_from_base64_png(data: &str) -> Result<GrayImage> {
    decode_base64_image(data).map(|i| i.to_luma8())
}
