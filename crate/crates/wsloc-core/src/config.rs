//! Run configuration: every tunable constant in one place, parsed from a
//! plain-text `key = value` file and echoed back verbatim into checkpoints
//! and manifests so a run can be reproduced from its artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct HyperConfig {
    pub seed: u64,
    pub classes: usize,
    pub image_size: usize,
    pub channels: usize,

    // Mask sharpening and trust schedule.
    pub omega: f64,
    pub sigma_prime: f64,
    pub sigma: f64,
    /// Maximum erasing recursion depth; 0 disables mining entirely.
    pub u: usize,

    // Score pooling.
    pub kmax: f64,
    pub kmin: f64,
    pub alpha: f64,
    pub modalities: usize,
    pub dropout: f64,

    // Optimization.
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_step: usize,
    pub lr_floor: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without validation improvement; 0 trains
    /// the full budget (the best epoch is kept either way).
    pub patience: usize,

    // Architecture.
    pub shared_backbone: bool,
    pub backbone_channels: Vec<usize>,

    // Loss term weights; unweighted sum unless overridden for ablations.
    pub w_pos: f64,
    pub w_neg: f64,
    pub w_sec: f64,

    // Augmentation switches (training only).
    pub augment_hflip: bool,
    pub augment_vflip: bool,
    pub augment_rot90: bool,

    /// Dataset directory for training (`train/`, optional `valid/` inside).
    pub data_root: Option<PathBuf>,
    /// Worker threads for per-sample batch parallelism; 0 = one per core.
    pub threads: usize,
}

impl Default for HyperConfig {
    fn default() -> Self {
        HyperConfig {
            seed: 0,
            classes: 2,
            image_size: 64,
            channels: 1,
            omega: 8.0,
            sigma_prime: 0.5,
            sigma: 10.0,
            u: 4,
            kmax: 0.09,
            kmin: 0.09,
            alpha: 0.0,
            modalities: 5,
            dropout: 0.5,
            lr: 0.001,
            lr_decay: 0.1,
            lr_step: 40,
            lr_floor: 1e-7,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 1e-5,
            max_epochs: 60,
            batch_size: 8,
            patience: 0,
            shared_backbone: true,
            backbone_channels: vec![16, 32, 64, 64],
            w_pos: 1.0,
            w_neg: 1.0,
            w_sec: 1.0,
            augment_hflip: true,
            augment_vflip: true,
            augment_rot90: true,
            data_root: None,
            threads: 0,
        }
    }
}

impl HyperConfig {
    /// Total spatial downsampling of the backbone (one stride-2 step per
    /// block after the first).
    pub fn backbone_stride(&self) -> usize {
        1 << self.backbone_channels.len().saturating_sub(1)
    }

    pub fn load(path: &Path) -> Result<HyperConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        HyperConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<HyperConfig> {
        let mut cfg = HyperConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
            value
                .parse::<T>()
                .map_err(|_| format!("invalid value `{value}` for {key}"))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "classes" => self.classes = num(key, value)?,
            "image_size" => self.image_size = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "omega" => self.omega = num(key, value)?,
            "sigma_prime" => self.sigma_prime = num(key, value)?,
            "sigma" => self.sigma = num(key, value)?,
            "u" => self.u = num(key, value)?,
            "kmax" => self.kmax = num(key, value)?,
            "kmin" => self.kmin = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "modalities" => self.modalities = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_decay" => self.lr_decay = num(key, value)?,
            "lr_step" => self.lr_step = num(key, value)?,
            "lr_floor" => self.lr_floor = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "nesterov" => self.nesterov = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "shared_backbone" => self.shared_backbone = num(key, value)?,
            "backbone_channels" => {
                self.backbone_channels = value
                    .split(',')
                    .map(|p| num("backbone_channels", p.trim()))
                    .collect::<std::result::Result<_, _>>()?;
            }
            "w_pos" => self.w_pos = num(key, value)?,
            "w_neg" => self.w_neg = num(key, value)?,
            "w_sec" => self.w_sec = num(key, value)?,
            "augment_hflip" => self.augment_hflip = num(key, value)?,
            "augment_vflip" => self.augment_vflip = num(key, value)?,
            "augment_rot90" => self.augment_rot90 = num(key, value)?,
            "data_root" => self.data_root = Some(PathBuf::from(value)),
            "threads" => self.threads = num(key, value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.classes < 2 {
            return fail(format!("classes = {} (need >= 2)", self.classes));
        }
        let stride = self.backbone_stride();
        if self.image_size < stride {
            return fail(format!(
                "image_size = {} (need >= backbone stride {stride})",
                self.image_size
            ));
        }
        if self.channels == 0 {
            return fail("channels = 0".into());
        }
        if !(self.omega > 0.0) {
            return fail(format!("omega = {} (need > 0)", self.omega));
        }
        if !self.sigma_prime.is_finite() {
            return fail("sigma_prime must be finite".into());
        }
        if !(self.sigma > 0.0) {
            return fail(format!("sigma = {} (need > 0)", self.sigma));
        }
        for (name, k) in [("kmax", self.kmax), ("kmin", self.kmin)] {
            if !(k > 0.0 && k <= 1.0) {
                return fail(format!("{name} = {k} (need in (0,1])"));
            }
        }
        if !(self.alpha >= 0.0) {
            return fail(format!("alpha = {} (need >= 0)", self.alpha));
        }
        if self.modalities == 0 {
            return fail("modalities = 0".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout = {} (need in [0,1))", self.dropout));
        }
        if !(self.lr > 0.0) {
            return fail(format!("lr = {} (need > 0)", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail(format!("lr_decay = {} (need in (0,1])", self.lr_decay));
        }
        if self.lr_step == 0 {
            return fail("lr_step = 0".into());
        }
        if !(self.lr_floor >= 0.0) {
            return fail(format!("lr_floor = {}", self.lr_floor));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum = {} (need in [0,1))", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay = {}", self.weight_decay));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return fail("max_epochs and batch_size must be >= 1".into());
        }
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return fail(format!(
                "backbone_channels = {:?} (need non-empty, non-zero)",
                self.backbone_channels
            ));
        }
        for (name, w) in [
            ("w_pos", self.w_pos),
            ("w_neg", self.w_neg),
            ("w_sec", self.w_sec),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return fail(format!("{name} = {w} (need finite, >= 0)"));
            }
        }
        Ok(())
    }

    /// Echo as `key = value` text; parsing it back yields an equal config.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let channels = self
            .backbone_channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "classes = {}", self.classes);
        let _ = writeln!(s, "image_size = {}", self.image_size);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "omega = {}", self.omega);
        let _ = writeln!(s, "sigma_prime = {}", self.sigma_prime);
        let _ = writeln!(s, "sigma = {}", self.sigma);
        let _ = writeln!(s, "u = {}", self.u);
        let _ = writeln!(s, "kmax = {}", self.kmax);
        let _ = writeln!(s, "kmin = {}", self.kmin);
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "modalities = {}", self.modalities);
        let _ = writeln!(s, "dropout = {}", self.dropout);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "lr_decay = {}", self.lr_decay);
        let _ = writeln!(s, "lr_step = {}", self.lr_step);
        let _ = writeln!(s, "lr_floor = {}", self.lr_floor);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "nesterov = {}", self.nesterov);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "max_epochs = {}", self.max_epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "shared_backbone = {}", self.shared_backbone);
        let _ = writeln!(s, "backbone_channels = {channels}");
        let _ = writeln!(s, "w_pos = {}", self.w_pos);
        let _ = writeln!(s, "w_neg = {}", self.w_neg);
        let _ = writeln!(s, "w_sec = {}", self.w_sec);
        let _ = writeln!(s, "augment_hflip = {}", self.augment_hflip);
        let _ = writeln!(s, "augment_vflip = {}", self.augment_vflip);
        let _ = writeln!(s, "augment_rot90 = {}", self.augment_rot90);
        if let Some(root) = &self.data_root {
            let _ = writeln!(s, "data_root = {}", root.display());
        }
        let _ = writeln!(s, "threads = {}", self.threads);
        s
    }

    /// Learning rate at a 0-based epoch: stepwise decay with a floor.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.lr_step) as i32;
        (self.lr * self.lr_decay.powi(steps)).max(self.lr_floor)
    }
}
