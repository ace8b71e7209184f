//! Image-folder datasets on disk.
//!
//! Layout: `root/<class>/<id>.png` with optional `root/masks/<id>.png`
//! single-channel ground truth. Class labels follow the sorted order of the
//! class directory names. Decodable formats: PNG, BMP, PNM.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GenericImageView};
use log::warn;

use crate::error::{Error, Result};

use super::SampleRecord;

#[derive(Debug, Clone, Copy)]
pub struct FolderOptions {
    /// Convert every image to this many channels (1 = luma, 3 = rgb).
    pub channels: usize,
    /// Center-crop to square and resize to this side length.
    pub resize_to: Option<usize>,
}

impl Default for FolderOptions {
    fn default() -> Self {
        FolderOptions {
            channels: 1,
            resize_to: None,
        }
    }
}

pub struct LoadReport {
    pub records: Vec<SampleRecord>,
    /// Sorted class directory names; index = label.
    pub class_names: Vec<String>,
    /// Files that could not be decoded and were skipped with a warning.
    pub skipped: usize,
}

const EXTENSIONS: [&str; 5] = ["png", "bmp", "ppm", "pgm", "pbm"];

pub fn load_folder(
    root: &Path,
    masks_root: Option<&Path>,
    opts: &FolderOptions,
) -> Result<LoadReport> {
    if opts.channels != 1 && opts.channels != 3 {
        return Err(Error::Data(format!("channels = {} (1 or 3)", opts.channels)));
    }
    if !root.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", root.display())));
    }
    let default_masks = root.join("masks");
    let masks_dir: Option<PathBuf> = match masks_root {
        Some(p) => Some(p.to_path_buf()),
        None if default_masks.is_dir() => Some(default_masks),
        None => None,
    };

    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name().is_some_and(|n| n != "masks")
                && masks_dir.as_deref() != Some(p.as_path())
        })
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!(
            "{} contains no class subdirectories",
            root.display()
        )));
    }

    let class_names: Vec<String> = class_dirs
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();

    let mut records = Vec::new();
    let mut skipped = 0usize;
    for (label, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .and_then(|e| e.to_str())
                        .map(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                        .unwrap_or(false)
            })
            .collect();
        files.sort();
        let mut loaded_any = false;
        for file in files {
            let img = match image::open(&file) {
                Ok(img) => img,
                Err(e) => {
                    warn!("skipping unreadable image {}: {e}", file.display());
                    skipped += 1;
                    continue;
                }
            };
            let stem = file.file_stem().unwrap().to_string_lossy().into_owned();
            let gt_mask = match &masks_dir {
                Some(md) => load_mask(md, &stem, img.dimensions())?,
                None => None,
            };
            let record = convert(img, stem, label, gt_mask, opts);
            records.push(record);
            loaded_any = true;
        }
        if !loaded_any {
            return Err(Error::Data(format!(
                "class directory {} contains no readable images",
                dir.display()
            )));
        }
    }
    Ok(LoadReport {
        records,
        class_names,
        skipped,
    })
}

fn load_mask(masks_dir: &Path, stem: &str, image_dims: (u32, u32)) -> Result<Option<Vec<bool>>> {
    let path = EXTENSIONS
        .iter()
        .map(|ext| masks_dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file());
    let Some(path) = path else {
        return Ok(None);
    };
    let img = image::open(&path)?;
    if img.dimensions() != image_dims {
        return Err(Error::Data(format!(
            "mask {} is {:?}, image is {:?}",
            path.display(),
            img.dimensions(),
            image_dims
        )));
    }
    // values {0,255} (or any 8-bit) binarize at 128
    Ok(Some(img.into_luma8().pixels().map(|p| p.0[0] >= 128).collect()))
}

fn convert(
    img: DynamicImage,
    id: String,
    label: usize,
    gt_mask: Option<Vec<bool>>,
    opts: &FolderOptions,
) -> SampleRecord {
    let (img, gt_mask) = match opts.resize_to {
        Some(side) => {
            let (w, h) = img.dimensions();
            let square = w.min(h);
            let (x0, y0) = ((w - square) / 2, (h - square) / 2);
            let cropped = img.crop_imm(x0, y0, square, square);
            let resized = cropped.resize_exact(side as u32, side as u32, FilterType::Triangle);
            let mask = gt_mask.map(|m| {
                let full = image::GrayImage::from_raw(
                    w,
                    h,
                    m.iter().map(|&b| if b { 255 } else { 0 }).collect(),
                )
                .expect("mask buffer");
                let cropped = image::imageops::crop_imm(&full, x0, y0, square, square).to_image();
                let resized =
                    image::imageops::resize(&cropped, side as u32, side as u32, FilterType::Nearest);
                resized.pixels().map(|p| p.0[0] >= 128).collect()
            });
            (resized, mask)
        }
        None => (img, gt_mask),
    };

    let (w, h) = img.dimensions();
    let image = if opts.channels == 1 {
        img.into_luma8()
            .pixels()
            .map(|p| p.0[0] as f64 / 255.0)
            .collect()
    } else {
        let rgb = img.into_rgb8();
        let mut planes = vec![0.0; 3 * (w * h) as usize];
        for (i, p) in rgb.pixels().enumerate() {
            for c in 0..3 {
                planes[c * (w * h) as usize + i] = p.0[c] as f64 / 255.0;
            }
        }
        planes
    };
    SampleRecord {
        id,
        label,
        image,
        channels: opts.channels,
        height: h as usize,
        width: w as usize,
        gt_mask,
    }
}

/// Write records as `dir/class_<label>/<id>.png` plus `dir/masks/<id>.png`.
pub fn write_dataset(dir: &Path, records: &[SampleRecord]) -> Result<()> {
    let masks_dir = dir.join("masks");
    std::fs::create_dir_all(&masks_dir)?;
    for r in records {
        let class_dir = dir.join(format!("class_{}", r.label));
        std::fs::create_dir_all(&class_dir)?;
        let path = class_dir.join(format!("{}.png", r.id));
        save_png(&path, r)?;
        if let Some(mask) = &r.gt_mask {
            let mpath = masks_dir.join(format!("{}.png", r.id));
            let buf: Vec<u8> = mask.iter().map(|&b| if b { 255 } else { 0 }).collect();
            image::GrayImage::from_raw(r.width as u32, r.height as u32, buf)
                .expect("mask buffer")
                .save(&mpath)?;
        }
    }
    Ok(())
}

fn save_png(path: &Path, r: &SampleRecord) -> Result<()> {
    let to_u8 = |v: f64| (255.0 * v.clamp(0.0, 1.0)).round() as u8;
    match r.channels {
        1 => {
            let buf: Vec<u8> = r.image.iter().map(|&v| to_u8(v)).collect();
            image::GrayImage::from_raw(r.width as u32, r.height as u32, buf)
                .expect("image buffer")
                .save(path)?;
        }
        3 => {
            let n = r.pixels();
            let mut buf = Vec::with_capacity(3 * n);
            for i in 0..n {
                for c in 0..3 {
                    buf.push(to_u8(r.image[c * n + i]));
                }
            }
            image::RgbImage::from_raw(r.width as u32, r.height as u32, buf)
                .expect("image buffer")
                .save(path)?;
        }
        other => {
            return Err(Error::Data(format!("cannot write {other}-channel PNG")));
        }
    }
    Ok(())
}

/// Load one standalone image for prediction.
pub fn load_image_file(path: &Path, opts: &FolderOptions) -> Result<SampleRecord> {
    let img = image::open(path)?;
    let stem = path
        .file_stem()
        .ok_or_else(|| Error::Data(format!("{} has no file name", path.display())))?
        .to_string_lossy()
        .into_owned();
    Ok(convert(img, stem, 0, None, opts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthSpec};

    #[test]
    fn roundtrip_through_disk_preserves_labels_and_masks() {
        let spec = SynthSpec {
            n_train: 8,
            n_valid: 2,
            n_test: 2,
            ..SynthSpec::default()
        };
        let (train, _, _) = gen_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &train).unwrap();

        let report = load_folder(dir.path(), None, &FolderOptions::default()).unwrap();
        assert_eq!(report.class_names, vec!["class_0", "class_1"]);
        assert_eq!(report.records.len(), train.len());
        assert_eq!(report.skipped, 0);

        for loaded in &report.records {
            let orig = train.iter().find(|r| r.id == loaded.id).unwrap();
            assert_eq!(loaded.label, orig.label);
            assert_eq!(loaded.gt_mask, orig.gt_mask, "mask must survive 0/255 roundtrip");
            assert_eq!(loaded.image.len(), orig.image.len());
            // 8-bit quantization error only
            for (a, b) in loaded.image.iter().zip(&orig.image) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
            }
        }
    }

    #[test]
    fn labels_follow_sorted_directory_order() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["malignant", "benign"] {
            let class = dir.path().join(name);
            std::fs::create_dir_all(&class).unwrap();
            image::GrayImage::from_pixel(4, 4, image::Luma([128]))
                .save(class.join("x.png"))
                .unwrap();
        }
        let report = load_folder(dir.path(), None, &FolderOptions::default()).unwrap();
        assert_eq!(report.class_names, vec!["benign", "malignant"]);
        let benign = report.records.iter().find(|r| r.label == 0).unwrap();
        assert_eq!(benign.label, 0);
    }

    #[test]
    fn unreadable_files_are_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let class = dir.path().join("only");
        std::fs::create_dir_all(&class).unwrap();
        image::GrayImage::from_pixel(4, 4, image::Luma([10]))
            .save(class.join("good.png"))
            .unwrap();
        std::fs::write(class.join("broken.png"), b"not a png").unwrap();
        // needs another class to be a valid dataset
        let other = dir.path().join("second");
        std::fs::create_dir_all(&other).unwrap();
        image::GrayImage::from_pixel(4, 4, image::Luma([200]))
            .save(other.join("ok.png"))
            .unwrap();

        let report = load_folder(dir.path(), None, &FolderOptions::default()).unwrap();
        assert_eq!(report.skipped, 1);
        assert_eq!(report.records.len(), 2);
    }

    #[test]
    fn empty_class_dir_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("a")).unwrap();
        std::fs::create_dir_all(dir.path().join("b")).unwrap();
        image::GrayImage::from_pixel(4, 4, image::Luma([10]))
            .save(dir.path().join("a").join("x.png"))
            .unwrap();
        assert!(load_folder(dir.path(), None, &FolderOptions::default()).is_err());
    }

    #[test]
    fn resize_produces_requested_dimensions_for_image_and_mask() {
        let dir = tempfile::tempdir().unwrap();
        let class = dir.path().join("c");
        let masks = dir.path().join("masks");
        std::fs::create_dir_all(&class).unwrap();
        std::fs::create_dir_all(&masks).unwrap();
        image::GrayImage::from_fn(10, 6, |x, _| image::Luma([(x * 25) as u8]))
            .save(class.join("img.png"))
            .unwrap();
        image::GrayImage::from_fn(10, 6, |x, _| image::Luma([if x < 5 { 0 } else { 255 }]))
            .save(masks.join("img.png"))
            .unwrap();
        // one more class for validity
        let class2 = dir.path().join("d");
        std::fs::create_dir_all(&class2).unwrap();
        image::GrayImage::from_pixel(10, 6, image::Luma([7]))
            .save(class2.join("img2.png"))
            .unwrap();

        let opts = FolderOptions {
            channels: 1,
            resize_to: Some(8),
        };
        let report = load_folder(dir.path(), None, &opts).unwrap();
        for r in &report.records {
            assert_eq!((r.height, r.width), (8, 8));
            if let Some(m) = &r.gt_mask {
                assert_eq!(m.len(), 64);
            }
        }
    }

    #[test]
    fn mask_dimension_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let class = dir.path().join("c");
        let masks = dir.path().join("masks");
        std::fs::create_dir_all(&class).unwrap();
        std::fs::create_dir_all(&masks).unwrap();
        image::GrayImage::from_pixel(6, 6, image::Luma([5]))
            .save(class.join("img.png"))
            .unwrap();
        image::GrayImage::from_pixel(4, 4, image::Luma([255]))
            .save(masks.join("img.png"))
            .unwrap();
        let class2 = dir.path().join("d");
        std::fs::create_dir_all(&class2).unwrap();
        image::GrayImage::from_pixel(6, 6, image::Luma([9]))
            .save(class2.join("img2.png"))
            .unwrap();
        assert!(load_folder(dir.path(), None, &FolderOptions::default()).is_err());
    }
}
