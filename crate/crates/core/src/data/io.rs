//! Directory-of-images ingestion and export (one subdirectory per class).

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};

use crate::autodiff::Array;

use super::{DataError, LabeledImageSet};

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug)]
pub struct LoadReport {
    pub set: LabeledImageSet,
    /// Files that failed to decode, with the decoder's message.
    pub skipped: Vec<(PathBuf, String)>,
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| io_err(dir, e)))
        .collect::<Result<_, _>>()?;
    out.sort();
    Ok(out)
}

fn decode(path: &Path, size: usize, channels: usize) -> Result<Vec<f64>, String> {
    let img = image::open(path).map_err(|e| e.to_string())?;
    let img = img.resize_exact(size as u32, size as u32, FilterType::Triangle);
    let raw: Vec<u8> = if channels == 1 {
        img.to_luma8().into_raw()
    } else {
        img.to_rgb8().into_raw()
    };
    // Interleaved HWC to planar CHW.
    let hw = size * size;
    let mut out = vec![0.0; channels * hw];
    for (i, &v) in raw.iter().enumerate() {
        let (pix, ch) = (i / channels, i % channels);
        out[ch * hw + pix] = f64::from(v) / 255.0;
    }
    Ok(out)
}

/// Loads `root/<class>/<image>` files, classes and files in path order,
/// resized bilinearly to `size`×`size` with 1 or 3 channels.
pub fn load_directory(root: &Path, size: usize, channels: usize) -> Result<LoadReport, DataError> {
    if channels != 1 && channels != 3 {
        return Err(DataError::Invalid(format!("channels must be 1 or 3, got {channels}")));
    }
    if size == 0 {
        return Err(DataError::Invalid("image size must be positive".into()));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(DataError::Invalid(format!(
            "{} has no class subdirectories",
            root.display()
        )));
    }
    let mut names = Vec::new();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut skipped = Vec::new();
    for (class, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let mut count = 0;
        for file in sorted_entries(dir)? {
            let ext = file
                .extension()
                .map(|e| e.to_string_lossy().to_ascii_lowercase())
                .unwrap_or_default();
            if !file.is_file() || !EXTENSIONS.contains(&ext.as_str()) {
                continue;
            }
            match decode(&file, size, channels) {
                Ok(px) => {
                    data.extend(px);
                    labels.push(class);
                    count += 1;
                }
                Err(msg) => {
                    log::warn!("skipping {}: {msg}", file.display());
                    skipped.push((file, msg));
                }
            }
        }
        if count == 0 {
            return Err(DataError::Invalid(format!("class `{name}` has no readable images")));
        }
        names.push(name);
    }
    let n = labels.len();
    let set = LabeledImageSet::new(
        Array::new(vec![n, channels, size, size], data),
        labels,
        names,
        format!("directory({})", root.display()),
    )?;
    Ok(LoadReport { set, skipped })
}

/// Converts one planar image in `[0, 1]` to an 8-bit image.
pub fn to_image(pixels: &[f64], channels: usize, h: usize, w: usize) -> DynamicImage {
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let hw = h * w;
    if channels == 1 {
        let raw = pixels.iter().map(|&v| q(v)).collect();
        DynamicImage::ImageLuma8(GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer size"))
    } else {
        let mut raw = Vec::with_capacity(3 * hw);
        for pix in 0..hw {
            for ch in 0..3 {
                raw.push(q(pixels[ch.min(channels - 1) * hw + pix]));
            }
        }
        DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size"))
    }
}

/// Writes `root/<class>/<index>.png`, the layout `load_directory` reads.
pub fn save_directory(set: &LabeledImageSet, root: &Path) -> Result<(), DataError> {
    let (c, h, w) = set.image_dims();
    for name in &set.class_names {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    }
    for i in 0..set.len() {
        let path = root.join(&set.class_names[set.labels[i]]).join(format!("{i:06}.png"));
        to_image(set.image(i), c, h, w)
            .save(&path)
            .map_err(|e| DataError::Invalid(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

/// Tiles images into a grid PNG, `cols` per row, with a 1-pixel gap.
pub fn save_grid(images: &Array, cols: usize, path: &Path) -> Result<(), DataError> {
    let s = images.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let cols = cols.clamp(1, n.max(1));
    let rows = n.div_ceil(cols);
    let (gw, gh) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let mut canvas = vec![0.0; c * gh * gw];
    let per = c * h * w;
    for i in 0..n {
        let (r, col) = (i / cols, i % cols);
        let (oy, ox) = (1 + r * (h + 1), 1 + col * (w + 1));
        let img = &images.data()[i * per..(i + 1) * per];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    canvas[ch * gh * gw + (oy + y) * gw + ox + x] = img[ch * h * w + y * w + x];
                }
            }
        }
    }
    to_image(&canvas, c, gh, gw)
        .save(path)
        .map_err(|e| DataError::Invalid(format!("{}: {e}", path.display())))
}
