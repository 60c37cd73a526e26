//! Atomic file output, content digests and PNG conversion.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{shape_err, FicoError, Result};
use crate::tensor::Tensor;

pub fn sha256_hex(bytes: &[u8]) -> String {
    crate::nn::hex(&Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(
        &fs::read(path).map_err(|e| FicoError::io(path, e))?,
    ))
}

fn temp_sibling(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}

pub fn create_dir_all(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| FicoError::io(path, e))
}

/// Writes to a temporary sibling, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir_all(parent)?;
    }
    let tmp = temp_sibling(path);
    fs::write(&tmp, bytes).map_err(|e| FicoError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| FicoError::io(path, e))
}

pub fn write_json_atomic<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| FicoError::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Builds a directory next to `path` with `fill`, then swaps it into place.
pub fn write_dir_atomic(path: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir_all(parent)?;
    }
    let tmp = temp_sibling(path);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| FicoError::io(&tmp, e))?;
    }
    create_dir_all(&tmp)?;
    if let Err(e) = fill(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if path.exists() {
        let old = path.with_file_name(format!(
            ".{}.old-{}",
            path.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            std::process::id()
        ));
        fs::rename(path, &old).map_err(|e| FicoError::io(path, e))?;
        fs::rename(&tmp, path).map_err(|e| FicoError::io(path, e))?;
        fs::remove_dir_all(&old).map_err(|e| FicoError::io(&old, e))?;
    } else {
        fs::rename(&tmp, path).map_err(|e| FicoError::io(path, e))?;
    }
    Ok(())
}

/// Reads an RGB PNG as a `[3, H, W]` tensor in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    read_rgb_sized(path, None)
}

/// Like [`read_rgb`], resizing (bilinear) to `size x size` when the stored size differs.
pub fn read_rgb_sized(path: &Path, size: Option<usize>) -> Result<Tensor<f32>> {
    let mut img = image::open(path)?.to_rgb8();
    if let Some(s) = size.filter(|&s| (s as u32, s as u32) != img.dimensions()) {
        img = image::imageops::resize(
            &img,
            s as u32,
            s as u32,
            image::imageops::FilterType::Triangle,
        );
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    }))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_rgb(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let [c, h, w] = image.shape() else {
        return Err(shape_err!("expected 3xHxW image, got {:?}", image.shape()));
    };
    if *c != 3 {
        return Err(shape_err!("expected 3 channels, got {c}"));
    }
    let (h, w) = (*h, *w);
    let d = image.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb([to_u8(d[p]), to_u8(d[h * w + p]), to_u8(d[2 * h * w + p])])
    });
    png_bytes(image::DynamicImage::ImageRgb8(img))
}

/// Encodes an `H x W` array with values in `[0, 1]` as 8-bit grayscale.
pub fn encode_gray(values: &[f32], h: usize, w: usize) -> Result<Vec<u8>> {
    if values.len() != h * w {
        return Err(shape_err!(
            "gray image: {} values for {}x{}",
            values.len(),
            h,
            w
        ));
    }
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([to_u8(values[y as usize * w + x as usize])])
    });
    png_bytes(image::DynamicImage::ImageLuma8(img))
}

fn png_bytes(img: image::DynamicImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn write_rgb(path: &Path, image: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &encode_rgb(image)?)
}

/// Reads a grayscale mask; any non-zero pixel counts as foreground.
pub fn read_mask(path: &Path) -> Result<(Vec<bool>, usize, usize)> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.as_raw().iter().map(|&v| v > 0).collect(), h, w))
}

/// Sorted `*.png` files of a directory.
pub fn list_png(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| FicoError::io(dir, e))? {
        let p = entry.map_err(|e| FicoError::io(dir, e))?.path();
        if p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Sorted names of the sub-directories of `dir`.
pub fn list_dirs(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| FicoError::io(dir, e))? {
        let entry = entry.map_err(|e| FicoError::io(dir, e))?;
        if entry.path().is_dir() {
            out.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/a.json");
        write_json_atomic(&p, &vec![1, 2, 3]).unwrap();
        write_json_atomic(&p, &vec![4]).unwrap();
        let back: Vec<i32> = read_json(&p).unwrap();
        assert_eq!(back, vec![4]);
        assert_eq!(fs::read_dir(dir.path().join("sub")).unwrap().count(), 1);
    }

    #[test]
    fn directory_swap_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt");
        write_dir_atomic(&p, |d| write_atomic(&d.join("x"), b"1")).unwrap();
        write_dir_atomic(&p, |d| write_atomic(&d.join("y"), b"2")).unwrap();
        assert!(!p.join("x").exists());
        assert_eq!(fs::read(p.join("y")).unwrap(), b"2");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_fn(&[3, 4, 5], |i| ((i * 37) % 256) as f32 / 255.0);
        let p = dir.path().join("a.png");
        write_rgb(&p, &img).unwrap();
        assert_eq!(read_rgb(&p).unwrap(), img);
    }
}
