//! Deterministic shapes-on-noise dataset generator.
//!
//! Each class pairs a foreground texture with a shape family; the background
//! is the same noise distribution for every class, so only the foreground
//! carries class evidence and pixel-level evaluation against the generated
//! masks is meaningful. Setting the instance range to `0..=0` produces
//! background-only images for leakage checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;

use super::SampleRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureKind {
    /// Near-white fill.
    Bright,
    /// Near-black fill.
    Dark,
    /// Vertical bright/dark stripes, period 4 px.
    Stripes,
    /// 2x2 bright/dark checkerboard.
    Checker,
}

impl TextureKind {
    fn parse(s: &str) -> Result<TextureKind> {
        match s {
            "bright" => Ok(TextureKind::Bright),
            "dark" => Ok(TextureKind::Dark),
            "stripes" => Ok(TextureKind::Stripes),
            "checker" => Ok(TextureKind::Checker),
            other => Err(Error::Data(format!("unknown texture `{other}`"))),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            TextureKind::Bright => "bright",
            TextureKind::Dark => "dark",
            TextureKind::Stripes => "stripes",
            TextureKind::Checker => "checker",
        }
    }

    /// Fill value at `(x, y)`; `contrast` in (0,1] scales the amplitude
    /// around mid-gray, so weak instances sink toward the background range.
    fn value(&self, x: usize, y: usize, contrast: f64, rng: &mut ChaCha8Rng) -> f64 {
        let hi = 0.5 + contrast * (0.38 + 0.12 * rng.gen::<f64>());
        let lo = 0.5 - contrast * (0.38 + 0.12 * rng.gen::<f64>());
        match self {
            TextureKind::Bright => hi,
            TextureKind::Dark => lo,
            TextureKind::Stripes => {
                if (x / 2).is_multiple_of(2) {
                    hi
                } else {
                    lo
                }
            }
            TextureKind::Checker => {
                if (x / 2 + y / 2).is_multiple_of(2) {
                    hi
                } else {
                    lo
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Cross,
}

impl ShapeKind {
    fn parse(s: &str) -> Result<ShapeKind> {
        match s {
            "ellipse" => Ok(ShapeKind::Ellipse),
            "rectangle" => Ok(ShapeKind::Rectangle),
            "cross" => Ok(ShapeKind::Cross),
            other => Err(Error::Data(format!("unknown shape `{other}`"))),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Cross => "cross",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassSpec {
    pub texture: TextureKind,
    pub shape: ShapeKind,
}

const PALETTE: [ClassSpec; 6] = [
    ClassSpec { texture: TextureKind::Bright, shape: ShapeKind::Ellipse },
    ClassSpec { texture: TextureKind::Dark, shape: ShapeKind::Rectangle },
    ClassSpec { texture: TextureKind::Stripes, shape: ShapeKind::Cross },
    ClassSpec { texture: TextureKind::Checker, shape: ShapeKind::Ellipse },
    ClassSpec { texture: TextureKind::Bright, shape: ShapeKind::Cross },
    ClassSpec { texture: TextureKind::Dark, shape: ShapeKind::Ellipse },
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: Vec<ClassSpec>,
    pub image_size: usize,
    pub channels: usize,
    pub instances_min: usize,
    pub instances_max: usize,
    /// Shape bounding size range in pixels.
    pub shape_min: usize,
    pub shape_max: usize,
    /// Lower bound of the per-instance texture contrast; 1 disables the
    /// variation, smaller values make some instances much fainter than
    /// others (the heterogeneous multi-instance setting).
    pub contrast_min: f64,
    pub bg_low: f64,
    pub bg_high: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: PALETTE[..2].to_vec(),
            image_size: 64,
            channels: 1,
            instances_min: 1,
            instances_max: 3,
            shape_min: 18,
            shape_max: 32,
            contrast_min: 1.0,
            bg_low: 0.25,
            bg_high: 0.75,
            seed: 0,
            n_train: 200,
            n_valid: 50,
            n_test: 100,
        }
    }
}

impl SynthSpec {
    pub fn load(path: &std::path::Path) -> Result<SynthSpec> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        SynthSpec::parse(&text)
    }

    pub fn parse(text: &str) -> Result<SynthSpec> {
        let mut spec = SynthSpec::default();
        let mut class_overrides: Vec<(usize, ClassSpec)> = Vec::new();
        let mut n_classes: Option<usize> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Data(format!("spec line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let parse_err =
                |k: &str, v: &str| Error::Data(format!("spec line {}: bad value `{v}` for {k}", lineno + 1));
            match key {
                "classes" => n_classes = Some(value.parse().map_err(|_| parse_err(key, value))?),
                "image_size" => spec.image_size = value.parse().map_err(|_| parse_err(key, value))?,
                "channels" => spec.channels = value.parse().map_err(|_| parse_err(key, value))?,
                "instances_min" => spec.instances_min = value.parse().map_err(|_| parse_err(key, value))?,
                "instances_max" => spec.instances_max = value.parse().map_err(|_| parse_err(key, value))?,
                "shape_min" => spec.shape_min = value.parse().map_err(|_| parse_err(key, value))?,
                "shape_max" => spec.shape_max = value.parse().map_err(|_| parse_err(key, value))?,
                "contrast_min" => spec.contrast_min = value.parse().map_err(|_| parse_err(key, value))?,
                "bg_low" => spec.bg_low = value.parse().map_err(|_| parse_err(key, value))?,
                "bg_high" => spec.bg_high = value.parse().map_err(|_| parse_err(key, value))?,
                "seed" => spec.seed = value.parse().map_err(|_| parse_err(key, value))?,
                "n_train" => spec.n_train = value.parse().map_err(|_| parse_err(key, value))?,
                "n_valid" => spec.n_valid = value.parse().map_err(|_| parse_err(key, value))?,
                "n_test" => spec.n_test = value.parse().map_err(|_| parse_err(key, value))?,
                other if other.starts_with("class_") => {
                    let idx: usize = other["class_".len()..]
                        .parse()
                        .map_err(|_| parse_err(other, value))?;
                    let (tex, shape) = value
                        .split_once(':')
                        .ok_or_else(|| parse_err(other, value))?;
                    class_overrides.push((
                        idx,
                        ClassSpec {
                            texture: TextureKind::parse(tex.trim())?,
                            shape: ShapeKind::parse(shape.trim())?,
                        },
                    ));
                }
                other => return Err(Error::Data(format!("spec line {}: unknown key `{other}`", lineno + 1))),
            }
        }
        if let Some(n) = n_classes {
            if n > PALETTE.len() && class_overrides.len() < n {
                return Err(Error::Data(format!(
                    "classes = {n} exceeds the built-in palette of {}; give class_i overrides",
                    PALETTE.len()
                )));
            }
            spec.classes = PALETTE[..n.min(PALETTE.len())].to_vec();
            if n > PALETTE.len() {
                spec.classes.resize(n, PALETTE[0]);
            }
        }
        for (idx, cs) in class_overrides {
            if idx >= spec.classes.len() {
                return Err(Error::Data(format!("class_{idx} out of range")));
            }
            spec.classes[idx] = cs;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_key_value(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "classes = {}", self.classes.len());
        let _ = writeln!(s, "image_size = {}", self.image_size);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "instances_min = {}", self.instances_min);
        let _ = writeln!(s, "instances_max = {}", self.instances_max);
        let _ = writeln!(s, "shape_min = {}", self.shape_min);
        let _ = writeln!(s, "shape_max = {}", self.shape_max);
        let _ = writeln!(s, "contrast_min = {}", self.contrast_min);
        let _ = writeln!(s, "bg_low = {}", self.bg_low);
        let _ = writeln!(s, "bg_high = {}", self.bg_high);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "n_train = {}", self.n_train);
        let _ = writeln!(s, "n_valid = {}", self.n_valid);
        let _ = writeln!(s, "n_test = {}", self.n_test);
        for (i, c) in self.classes.iter().enumerate() {
            let _ = writeln!(s, "class_{i} = {}:{}", c.texture.name(), c.shape.name());
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Data("need at least 2 classes".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Data(format!("channels = {} (1 or 3)", self.channels)));
        }
        if self.shape_min < 4 || self.shape_min > self.shape_max {
            return Err(Error::Data(format!(
                "shape size range [{}, {}] invalid",
                self.shape_min, self.shape_max
            )));
        }
        if self.shape_max >= self.image_size {
            return Err(Error::Data(format!(
                "shape_max = {} does not fit in a {}px image",
                self.shape_max, self.image_size
            )));
        }
        if self.instances_min > self.instances_max {
            return Err(Error::Data("instances_min > instances_max".into()));
        }
        if !(self.contrast_min > 0.0 && self.contrast_min <= 1.0) {
            return Err(Error::Data(format!(
                "contrast_min = {} (need in (0,1])",
                self.contrast_min
            )));
        }
        if !(0.0 <= self.bg_low && self.bg_low < self.bg_high && self.bg_high <= 1.0) {
            return Err(Error::Data(format!(
                "background range [{}, {}) invalid",
                self.bg_low, self.bg_high
            )));
        }
        if self.n_train == 0 || self.n_valid == 0 || self.n_test == 0 {
            return Err(Error::Data("n_train, n_valid, n_test must be positive".into()));
        }
        Ok(())
    }
}

/// Render one sample of the given class. Exposed for fixtures.
pub fn render_sample(spec: &SynthSpec, label: usize, id: String, rng: &mut ChaCha8Rng) -> SampleRecord {
    let size = spec.image_size;
    let n = size * size;
    let class = &spec.classes[label];

    // class-independent background
    let mut luma: Vec<f64> = (0..n)
        .map(|_| spec.bg_low + (spec.bg_high - spec.bg_low) * rng.gen::<f64>())
        .collect();
    let mut mask = vec![false; n];

    let count = if spec.instances_max == 0 {
        0
    } else {
        rng.gen_range(spec.instances_min..=spec.instances_max)
    };
    for _ in 0..count {
        let extent = rng.gen_range(spec.shape_min..=spec.shape_max);
        let half = extent / 2;
        let cy = rng.gen_range(half..size - half);
        let cx = rng.gen_range(half..size - half);
        let contrast = if spec.contrast_min < 1.0 {
            spec.contrast_min + (1.0 - spec.contrast_min) * rng.gen::<f64>()
        } else {
            1.0
        };
        stamp(class, cx, cy, extent, contrast, size, &mut luma, &mut mask, rng);
    }

    let image = if spec.channels == 1 {
        luma
    } else {
        let mut img = Vec::with_capacity(3 * n);
        for _ in 0..3 {
            img.extend_from_slice(&luma);
        }
        img
    };
    SampleRecord {
        id,
        label,
        image,
        channels: spec.channels,
        height: size,
        width: size,
        gt_mask: Some(mask),
    }
}

#[allow(clippy::too_many_arguments)]
fn stamp(
    class: &ClassSpec,
    cx: usize,
    cy: usize,
    extent: usize,
    contrast: f64,
    size: usize,
    luma: &mut [f64],
    mask: &mut [bool],
    rng: &mut ChaCha8Rng,
) {
    let half = (extent / 2) as isize;
    let (cx, cy) = (cx as isize, cy as isize);
    let inside = |x: isize, y: isize| -> bool {
        let dx = x - cx;
        let dy = y - cy;
        match class.shape {
            ShapeKind::Ellipse => {
                // mildly anisotropic: ry = half, rx = 3/4 half
                let rx = (half * 3) / 4;
                let rx = rx.max(2);
                dy * dy * rx * rx + dx * dx * half * half <= half * half * rx * rx
            }
            ShapeKind::Rectangle => dx.abs() <= (half * 3) / 4 && dy.abs() <= half,
            ShapeKind::Cross => {
                let bar = (half / 2).max(1);
                (dx.abs() <= bar && dy.abs() <= half) || (dy.abs() <= bar && dx.abs() <= half)
            }
        }
    };
    for y in (cy - half).max(0)..(cy + half + 1).min(size as isize) {
        for x in (cx - half).max(0)..(cx + half + 1).min(size as isize) {
            if inside(x, y) {
                let i = (y as usize) * size + x as usize;
                luma[i] = class.texture.value(x as usize, y as usize, contrast, rng);
                mask[i] = true;
            }
        }
    }
}

/// Generate train/valid/test splits, each class-balanced to within one
/// sample and bitwise deterministic for a given spec.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>, Vec<SampleRecord>)> {
    spec.validate()?;
    let make = |split: &str, split_idx: u64, count: usize| -> Vec<SampleRecord> {
        let mut rng = rng::derive(spec.seed, "synth", &[split_idx]);
        let c = spec.classes.len();
        // round-robin labels, then shuffle for arbitrary order with exact balance
        let mut labels: Vec<usize> = (0..count).map(|i| i % c).collect();
        use rand::seq::SliceRandom;
        labels.shuffle(&mut rng);
        labels
            .into_iter()
            .enumerate()
            .map(|(i, label)| {
                render_sample(spec, label, format!("{split}_{i:05}_c{label}"), &mut rng)
            })
            .collect()
    };
    Ok((
        make("train", 0, spec.n_train),
        make("valid", 1, spec.n_valid),
        make("test", 2, spec.n_test),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_bitwise_deterministic() {
        let spec = SynthSpec {
            n_train: 12,
            n_valid: 4,
            n_test: 6,
            ..SynthSpec::default()
        };
        let (t1, v1, e1) = gen_synthetic(&spec).unwrap();
        let (t2, v2, e2) = gen_synthetic(&spec).unwrap();
        for (a, b) in t1.iter().zip(&t2).chain(v1.iter().zip(&v2)).chain(e1.iter().zip(&e2)) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.label, b.label);
            assert_eq!(a.image, b.image);
            assert_eq!(a.gt_mask, b.gt_mask);
        }
    }

    #[test]
    fn classes_are_balanced_within_one() {
        let spec = SynthSpec {
            n_train: 11,
            n_valid: 5,
            n_test: 7,
            ..SynthSpec::default()
        };
        let (train, _, _) = gen_synthetic(&spec).unwrap();
        let c0 = train.iter().filter(|r| r.label == 0).count();
        let c1 = train.iter().filter(|r| r.label == 1).count();
        assert!(c0.abs_diff(c1) <= 1, "{c0} vs {c1}");
    }

    #[test]
    fn single_instance_masks_are_one_connected_component() {
        let spec = SynthSpec {
            instances_min: 1,
            instances_max: 1,
            n_train: 24,
            n_valid: 2,
            n_test: 2,
            ..SynthSpec::default()
        };
        let (train, _, _) = gen_synthetic(&spec).unwrap();
        for r in &train {
            let mask = r.gt_mask.as_ref().unwrap();
            assert!(mask.iter().any(|&b| b), "mask must be non-empty");
            assert_eq!(components(mask, r.width), 1, "sample {}", r.id);
        }
    }

    /// 4-connected component count (flood fill).
    fn components(mask: &[bool], w: usize) -> usize {
        let h = mask.len() / w;
        let mut seen = vec![false; mask.len()];
        let mut count = 0;
        for start in 0..mask.len() {
            if !mask[start] || seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (y, x) = (i / w, i % w);
                let mut push = |j: usize| {
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    push(i - 1);
                }
                if x + 1 < w {
                    push(i + 1);
                }
                if y > 0 {
                    push(i - w);
                }
                if y + 1 < h {
                    push(i + w);
                }
            }
        }
        count
    }

    #[test]
    fn background_only_mode_has_empty_masks() {
        let spec = SynthSpec {
            instances_min: 0,
            instances_max: 0,
            n_train: 6,
            n_valid: 2,
            n_test: 2,
            ..SynthSpec::default()
        };
        let (train, _, _) = gen_synthetic(&spec).unwrap();
        for r in &train {
            assert!(r.gt_mask.as_ref().unwrap().iter().all(|&b| !b));
            assert!(r.image.iter().all(|&v| (0.25..0.75).contains(&v)));
        }
    }

    #[test]
    fn spec_roundtrip_and_validation() {
        let spec = SynthSpec {
            classes: vec![
                ClassSpec { texture: TextureKind::Checker, shape: ShapeKind::Cross },
                ClassSpec { texture: TextureKind::Dark, shape: ShapeKind::Ellipse },
                ClassSpec { texture: TextureKind::Bright, shape: ShapeKind::Rectangle },
            ],
            ..SynthSpec::default()
        };
        let parsed = SynthSpec::parse(&spec.to_key_value()).unwrap();
        assert_eq!(parsed, spec);

        assert!(SynthSpec::parse("shape_max = 64").is_err(), "shape larger than image");
        assert!(SynthSpec::parse("bg_low = 0.9\nbg_high = 0.2").is_err());
        assert!(SynthSpec::parse("classes = 1").is_err());
    }

    #[test]
    fn normalized_values_stay_in_unit_interval() {
        let spec = SynthSpec {
            n_train: 8,
            n_valid: 2,
            n_test: 2,
            ..SynthSpec::default()
        };
        let (train, _, _) = gen_synthetic(&spec).unwrap();
        for r in &train {
            assert!(r.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let mut rng = crate::rng::derive(0, "aug", &[]);
            let norm = crate::data::augment_normalize(&r.clone(), &crate::data::AugmentOps::none(), false, &mut rng);
            assert!(norm.image.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        }
    }
}
