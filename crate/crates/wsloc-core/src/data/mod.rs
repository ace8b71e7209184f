//! Datasets: synthetic generation, folder ingestion, splits, augmentation.
//!
//! Images are stored as `[0,1]` buffers; normalization to `[-1,1]` happens
//! at access time through [`augment_normalize`], which co-transforms the
//! ground-truth mask with the image.

mod folder;
mod synth;

pub use folder::{load_folder, load_image_file, write_dataset, FolderOptions, LoadReport};
pub use synth::{gen_synthetic, render_sample, ClassSpec, ShapeKind, SynthSpec, TextureKind};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;

/// One dataset element: image, label, optional pixel ground truth.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub id: String,
    pub label: usize,
    /// `channels * height * width`, row-major per channel.
    pub image: Vec<f64>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `height * width` foreground indicator, when pixel labels exist.
    pub gt_mask: Option<Vec<bool>>,
}

impl SampleRecord {
    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Stratified train/valid split. Deterministic for a given seed; the two
/// sides are disjoint by id and each class splits in the given proportion
/// (rounded to the nearest sample).
pub fn make_splits(
    records: &[SampleRecord],
    fractions: (f64, f64),
    seed: u64,
) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    let (f_train, f_valid) = fractions;
    if (f_train + f_valid - 1.0).abs() > 1e-9 || f_train <= 0.0 || f_valid <= 0.0 {
        return Err(Error::Data(format!(
            "split fractions ({f_train}, {f_valid}) must be positive and sum to 1"
        )));
    }
    let max_label = records.iter().map(|r| r.label).max().unwrap_or(0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); max_label + 1];
    for (i, r) in records.iter().enumerate() {
        by_class[r.label].push(i);
    }

    let mut train = Vec::new();
    let mut valid = Vec::new();
    for (label, mut members) in by_class.into_iter().enumerate() {
        if members.len() < 2 {
            return Err(Error::Data(format!(
                "class {label} has {} samples; need at least 2 to split",
                members.len()
            )));
        }
        let mut class_rng = rng::derive(seed, "split", &[label as u64]);
        members.shuffle(&mut class_rng);
        let n_train = ((members.len() as f64 * f_train).round() as usize)
            .clamp(1, members.len() - 1);
        for (pos, idx) in members.into_iter().enumerate() {
            if pos < n_train {
                train.push(records[idx].clone());
            } else {
                valid.push(records[idx].clone());
            }
        }
    }
    // stable presentation order
    train.sort_by(|a, b| a.id.cmp(&b.id));
    valid.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((train, valid))
}

/// Plain-text split manifest, one id per line.
pub fn write_split_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&r.id);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Augmentation switches; each enabled op is drawn independently per access.
#[derive(Debug, Clone, Copy)]
pub struct AugmentOps {
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
}

impl AugmentOps {
    pub fn none() -> AugmentOps {
        AugmentOps {
            hflip: false,
            vflip: false,
            rot90: false,
        }
    }
}

/// In train mode, apply one random composition of the enabled flips and a
/// quarter rotation to image and mask alike; always normalize the image to
/// `(x - 0.5) / 0.5`. Eval mode normalizes only.
pub fn augment_normalize(
    record: &SampleRecord,
    ops: &AugmentOps,
    train_mode: bool,
    rng: &mut ChaCha8Rng,
) -> SampleRecord {
    let mut out = record.clone();
    if train_mode {
        if ops.hflip && rng.gen::<bool>() {
            flip_h(&mut out);
        }
        if ops.vflip && rng.gen::<bool>() {
            flip_v(&mut out);
        }
        if ops.rot90 {
            let quarters = rng.gen_range(0..4);
            for _ in 0..quarters {
                rot90(&mut out);
            }
        }
    }
    for v in &mut out.image {
        *v = (*v - 0.5) / 0.5;
    }
    out
}

fn flip_h(r: &mut SampleRecord) {
    let (h, w) = (r.height, r.width);
    for c in 0..r.channels {
        let plane = &mut r.image[c * h * w..(c + 1) * h * w];
        for row in 0..h {
            plane[row * w..(row + 1) * w].reverse();
        }
    }
    if let Some(mask) = &mut r.gt_mask {
        for row in 0..h {
            mask[row * w..(row + 1) * w].reverse();
        }
    }
}

fn flip_v(r: &mut SampleRecord) {
    let (h, w) = (r.height, r.width);
    for c in 0..r.channels {
        let plane = &mut r.image[c * h * w..(c + 1) * h * w];
        for row in 0..h / 2 {
            for col in 0..w {
                plane.swap(row * w + col, (h - 1 - row) * w + col);
            }
        }
    }
    if let Some(mask) = &mut r.gt_mask {
        for row in 0..h / 2 {
            for col in 0..w {
                mask.swap(row * w + col, (h - 1 - row) * w + col);
            }
        }
    }
}

/// Rotate 90 degrees counterclockwise; height and width swap.
fn rot90(r: &mut SampleRecord) {
    let (h, w) = (r.height, r.width);
    let mut image = vec![0.0; r.image.len()];
    for c in 0..r.channels {
        let src = &r.image[c * h * w..(c + 1) * h * w];
        let dst = &mut image[c * h * w..(c + 1) * h * w];
        for row in 0..h {
            for col in 0..w {
                dst[(w - 1 - col) * h + row] = src[row * w + col];
            }
        }
    }
    r.image = image;
    if let Some(mask) = &r.gt_mask {
        let mut rotated = vec![false; mask.len()];
        for row in 0..h {
            for col in 0..w {
                rotated[(w - 1 - col) * h + row] = mask[row * w + col];
            }
        }
        r.gt_mask = Some(rotated);
    }
    r.height = w;
    r.width = h;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, label: usize) -> SampleRecord {
        SampleRecord {
            id: id.to_string(),
            label,
            image: (0..16).map(|i| i as f64 / 15.0).collect(),
            channels: 1,
            height: 4,
            width: 4,
            gt_mask: Some((0..16).map(|i| i % 3 == 0).collect()),
        }
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let records: Vec<SampleRecord> = (0..20)
            .map(|i| sample(&format!("s{i:02}"), i % 2))
            .collect();
        let (train, valid) = make_splits(&records, (0.8, 0.2), 0).unwrap();
        assert_eq!(train.len(), 16);
        assert_eq!(valid.len(), 4);
        for label in 0..2 {
            assert_eq!(train.iter().filter(|r| r.label == label).count(), 8);
            assert_eq!(valid.iter().filter(|r| r.label == label).count(), 2);
        }
        for v in &valid {
            assert!(!train.iter().any(|t| t.id == v.id));
        }
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let records: Vec<SampleRecord> = (0..30)
            .map(|i| sample(&format!("s{i:02}"), i % 3))
            .collect();
        let (t1, v1) = make_splits(&records, (0.8, 0.2), 5).unwrap();
        let (t2, v2) = make_splits(&records, (0.8, 0.2), 5).unwrap();
        let ids = |rs: &[SampleRecord]| rs.iter().map(|r| r.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&t1), ids(&t2));
        assert_eq!(ids(&v1), ids(&v2));
        let (t3, _) = make_splits(&records, (0.8, 0.2), 6).unwrap();
        assert_ne!(ids(&t1), ids(&t3), "different seeds should shuffle differently");
    }

    #[test]
    fn split_rejects_tiny_classes_and_bad_fractions() {
        let records = vec![sample("a", 0), sample("b", 1), sample("c", 1)];
        assert!(make_splits(&records, (0.8, 0.2), 0).is_err());
        let ok: Vec<SampleRecord> = (0..4).map(|i| sample(&i.to_string(), i % 2)).collect();
        assert!(make_splits(&ok, (0.7, 0.2), 0).is_err());
    }

    #[test]
    fn hflip_twice_is_identity() {
        let orig = sample("x", 0);
        let mut r = orig.clone();
        flip_h(&mut r);
        assert_ne!(r.image, orig.image);
        flip_h(&mut r);
        assert_eq!(r.image, orig.image);
        assert_eq!(r.gt_mask, orig.gt_mask);
    }

    #[test]
    fn rot90_four_times_is_identity_and_cotransforms_mask() {
        let orig = sample("x", 0);
        let mut r = orig.clone();
        for _ in 0..4 {
            rot90(&mut r);
        }
        assert_eq!(r.image, orig.image);
        assert_eq!(r.gt_mask, orig.gt_mask);

        // one rotation moves image and mask identically
        let mut once = orig.clone();
        rot90(&mut once);
        let mask = once.gt_mask.as_ref().unwrap();
        for row in 0..4 {
            for col in 0..4 {
                let src = row * 4 + col;
                let dst = (4 - 1 - col) * 4 + row;
                assert_eq!(once.image[dst], orig.image[src]);
                assert_eq!(mask[dst], orig.gt_mask.as_ref().unwrap()[src]);
            }
        }
    }

    #[test]
    fn normalization_is_the_affine_map() {
        let mut r = sample("x", 0);
        r.image = vec![0.0, 0.5, 1.0, 0.25];
        r.image.resize(16, 0.0);
        let mut rng = rng::derive(0, "aug", &[]);
        let out = augment_normalize(&r, &AugmentOps::none(), false, &mut rng);
        assert_eq!(out.image[0], -1.0);
        assert_eq!(out.image[1], 0.0);
        assert_eq!(out.image[2], 1.0);
        assert_eq!(out.image[3], -0.5);
    }

    #[test]
    fn eval_mode_never_flips() {
        let r = sample("x", 0);
        let ops = AugmentOps { hflip: true, vflip: true, rot90: true };
        let mut rng = rng::derive(0, "aug", &[]);
        let a = augment_normalize(&r, &ops, false, &mut rng);
        let b = augment_normalize(&r, &ops, false, &mut rng);
        assert_eq!(a.image, b.image);
        assert_eq!(a.gt_mask, r.gt_mask);
    }

    #[test]
    fn train_mode_transforms_image_and_mask_together() {
        let r = sample("x", 0);
        let ops = AugmentOps { hflip: true, vflip: true, rot90: true };
        // find a draw that actually transforms
        let mut rng = rng::derive(3, "aug", &[]);
        let out = augment_normalize(&r, &ops, true, &mut rng);
        // undo normalization, then compare multisets of (value, mask) pairs:
        // the pairing must be preserved by any composition of flips/rotations
        let quantize = |v: f64| (v * 15.0).round() as i64; // inputs are i/15
        let mut pairs_orig: Vec<(i64, bool)> = r
            .image
            .iter()
            .zip(r.gt_mask.as_ref().unwrap())
            .map(|(v, m)| (quantize(*v), *m))
            .collect();
        let mut pairs_out: Vec<(i64, bool)> = out
            .image
            .iter()
            .map(|v| quantize(v * 0.5 + 0.5))
            .zip(out.gt_mask.as_ref().unwrap().iter().copied())
            .collect();
        pairs_orig.sort_unstable();
        pairs_out.sort_unstable();
        assert_eq!(pairs_orig, pairs_out);
    }
}
