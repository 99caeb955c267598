//! Reading and writing the 8-bit images used for datasets, predictions and
//! masks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, ImageReader};
use ndarray::{Array2, Array3};

use crate::{Error, Result};

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))
}

/// RGB image as `H x W x 3` in `[0, 1]`, optionally resized (bilinear).
pub fn read_rgb(path: &Path, size: Option<(usize, usize)>) -> Result<Array3<f64>> {
    let mut img = open(path)?.into_rgb8();
    if let Some((h, w)) = size {
        if img.dimensions() != (w as u32, h as u32) {
            img = image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle);
        }
    }
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        raw[(y * w as usize + x) * 3 + c] as f64 / 255.0
    }))
}

/// Single-channel 8-bit codes (luma for colour inputs), optionally resized
/// with nearest-neighbour sampling.
pub fn read_gray(path: &Path, size: Option<(usize, usize)>) -> Result<Array2<u8>> {
    let mut img = open(path)?.into_luma8();
    if let Some((h, w)) = size {
        if img.dimensions() != (w as u32, h as u32) {
            img = image::imageops::resize(&img, w as u32, h as u32, FilterType::Nearest);
        }
    }
    let (w, h) = img.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).map_err(|e| image_err(path, e))
}

/// `(height, width)` read from the file header.
pub fn dimensions(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| image_err(path, e))?;
    Ok((h as usize, w as usize))
}

/// Bilinear resize of 8-bit codes.
pub fn resize_gray(codes: &Array2<u8>, height: usize, width: usize) -> Array2<u8> {
    let (h, w) = codes.dim();
    if (h, w) == (height, width) {
        return codes.clone();
    }
    let img = GrayImage::from_raw(w as u32, h as u32, codes.iter().copied().collect()).expect("sizes agree");
    let out = image::imageops::resize(&img, width as u32, height as u32, FilterType::Triangle);
    Array2::from_shape_vec((height, width), out.into_raw()).expect("sizes agree")
}

/// Mask codes above 127 are foreground.
pub fn binarize_codes(codes: &Array2<u8>) -> Array2<bool> {
    codes.mapv(|c| c > 127)
}

/// Quantizes a `[0, 1]` map as `round(255 p)`.
pub fn quantize(map: &Array2<f64>) -> Array2<u8> {
    map.mapv(|p| (255.0 * p.clamp(0.0, 1.0)).round() as u8)
}

/// Writes an 8-bit grayscale PNG.
pub fn write_gray(path: &Path, codes: &Array2<u8>) -> Result<()> {
    let (h, w) = codes.dim();
    let img = GrayImage::from_raw(w as u32, h as u32, codes.iter().copied().collect())
        .ok_or_else(|| image_err(path, "buffer size mismatch"))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

/// Writes an `H x W x 3` `[0, 1]` image as an 8-bit RGB PNG.
pub fn write_rgb(path: &Path, data: &Array3<f64>) -> Result<()> {
    let (h, w, _) = data.dim();
    let raw: Vec<u8> = data.iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8).collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| image_err(path, "buffer size mismatch"))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

/// Image files of a directory keyed by file stem. When two files share a
/// stem the lexicographically first path wins.
pub fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    for p in paths {
        if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
            if out.contains_key(stem) {
                log::warn!("{}: duplicate stem `{stem}` ignored", p.display());
                continue;
            }
            out.insert(stem.to_string(), p);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let codes = Array2::from_shape_fn((3, 5), |(y, x)| (y * 60 + x * 7) as u8);
        write_gray(&path, &codes).unwrap();
        assert_eq!(read_gray(&path, None).unwrap(), codes);
    }

    #[test]
    fn mask_threshold_and_quantize() {
        let codes = ndarray::array![[0u8, 127, 128, 255]];
        assert_eq!(binarize_codes(&codes), ndarray::array![[false, false, true, true]]);
        let q = quantize(&ndarray::array![[0.0, 0.5, 1.0, 0.998]]);
        assert_eq!(q, ndarray::array![[0u8, 128, 255, 254]]);
    }

    #[test]
    fn listing_filters_and_sorts() {
        let dir = tempfile::tempdir().unwrap();
        let codes = Array2::<u8>::zeros((2, 2));
        for name in ["b.png", "a.png", "c.PNG"] {
            write_gray(&dir.path().join(name), &codes).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let listed: Vec<_> = list_images(dir.path()).unwrap().into_keys().collect();
        assert_eq!(listed, ["a", "b", "c"]);
    }

    #[test]
    fn resize_and_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let codes = Array2::from_elem((6, 10), 200u8);
        write_gray(&path, &codes).unwrap();
        assert_eq!(dimensions(&path).unwrap(), (6, 10));
        let r = resize_gray(&codes, 3, 4);
        assert_eq!(r, Array2::from_elem((3, 4), 200u8));
    }

    #[test]
    fn corrupt_file_is_an_image_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"not an image").unwrap();
        assert!(matches!(read_gray(&path, None), Err(Error::Image { .. })));
    }
}
