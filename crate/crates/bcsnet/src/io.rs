//! PNG slices and masks, and the `images/` + `masks/` dataset layout.

use std::fs;
use std::path::{Path, PathBuf};

use bcsnet_core::data::{CtSlice, DatasetRecord, SegMask};
use image::{DynamicImage, GrayImage, ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};

pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Grayscale images load as-is, colour images through luma.
pub fn load_slice(path: &Path) -> Result<CtSlice> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let id = stem(path);
    let slice = match img {
        DynamicImage::ImageLuma8(g) => CtSlice::from_gray8(h, w, g.as_raw(), id)?,
        other => CtSlice::from_rgb8(h, w, other.to_rgb8().as_raw(), id)?,
    };
    Ok(slice)
}

/// Mask pixels above 127 are foreground.
pub fn load_mask(path: &Path) -> Result<SegMask> {
    let img = open(path)?.to_luma8();
    Ok(SegMask::from_gray8(img.height() as usize, img.width() as usize, img.as_raw())?)
}

pub fn load_record(image: &Path, mask: &Path) -> Result<DatasetRecord> {
    let slice = load_slice(image)?;
    let mask = load_mask(mask)?;
    Ok(DatasetRecord::new(stem(image), slice, mask)?)
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found"),
        ));
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Every `images/<stem>.png` paired with `masks/<stem>.png`, sorted by stem.
pub fn load_dataset(root: &Path) -> Result<Vec<DatasetRecord>> {
    let images = png_files(&root.join(IMAGES_DIR))?;
    let masks_dir = root.join(MASKS_DIR);
    if !masks_dir.is_dir() {
        return Err(Error::io(
            &masks_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "masks directory not found"),
        ));
    }
    if images.is_empty() {
        return Err(bcsnet_core::Error::Validation(format!("no PNG images under {}", root.join(IMAGES_DIR).display())).into());
    }
    images
        .iter()
        .map(|img| {
            let mask = masks_dir.join(format!("{}.png", stem(img)));
            if !mask.is_file() {
                return Err(Error::io(
                    &mask,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "mask missing for image"),
                ));
            }
            load_record(img, &mask)
        })
        .collect()
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save(img: DynamicImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Row-major values in `[0, 1]` written as 8-bit gray, `round(255·v)`.
pub fn save_gray(values: &[f64], height: usize, width: usize, path: &Path) -> Result<()> {
    let raw: Vec<u8> = values.iter().map(|&v| to_u8(v)).collect();
    let img = GrayImage::from_raw(width as u32, height as u32, raw).expect("buffer matches size");
    save(DynamicImage::ImageLuma8(img), path)
}

/// Binary map written as 0 / 255.
pub fn save_binary(pixels: &[u8], height: usize, width: usize, path: &Path) -> Result<()> {
    let raw: Vec<u8> = pixels.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(width as u32, height as u32, raw).expect("buffer matches size");
    save(DynamicImage::ImageLuma8(img), path)
}

pub fn save_rgb(raw: Vec<u8>, height: usize, width: usize, path: &Path) -> Result<()> {
    let img: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(width as u32, height as u32, raw).expect("buffer matches size");
    save(DynamicImage::ImageRgb8(img), path)
}

/// Write records in the dataset layout under `root`.
pub fn write_dataset(records: &[DatasetRecord], root: &Path) -> Result<()> {
    for sub in [IMAGES_DIR, MASKS_DIR] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for r in records {
        let name = format!("{}.png", r.id);
        save_gray(r.slice.channel(0), r.height(), r.width(), &root.join(IMAGES_DIR).join(&name))?;
        save_binary(r.mask.0.pixels(), r.height(), r.width(), &root.join(MASKS_DIR).join(&name))?;
    }
    Ok(())
}
