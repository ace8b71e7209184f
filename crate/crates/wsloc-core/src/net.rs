//! Localizer and classifier networks.
//!
//! The localizer is fully convolutional: a small conv backbone followed by a
//! 1x1 conv head emitting `classes * modalities` spatial maps. Modalities
//! are averaged into one map per class, each map is pooled into a class
//! score (top-k mean, optionally plus a weighted bottom-k mean), and the
//! softmax of the scores is the localizer's own class posterior. The
//! classifier shares the backbone (by default) and ends in global average
//! pooling plus a linear layer.
//!
//! Long-lived parameters are plain `f64` buffers in a [`ParamSet`]; every
//! forward binds them to fresh leaf tensors through a [`ParamBinding`], so
//! graphs from different samples never share mutable state.

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::config::HyperConfig;
use crate::error::{Error, Result};
use crate::rng;

pub type ParamId = usize;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Weight decay applies to weights only, never biases.
    pub decay: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub params: Vec<Param>,
}

impl ParamSet {
    fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>, decay: bool) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param {
            name: name.into(),
            shape: shape.to_vec(),
            data,
            decay,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Bind every parameter to a fresh leaf tensor for one forward/backward.
    pub fn binding(&self, requires_grad: bool) -> ParamBinding {
        let tensors = self
            .params
            .iter()
            .map(|p| {
                if requires_grad {
                    Tensor::leaf(p.data.clone(), &p.shape).expect("param tensor")
                } else {
                    Tensor::from_vec(p.data.clone(), &p.shape).expect("param tensor")
                }
            })
            .collect();
        ParamBinding { tensors }
    }
}

/// Leaf tensors for one sample's graphs. Gradients accumulate here across
/// any number of backward calls and are read out once per sample.
pub struct ParamBinding {
    tensors: Vec<Tensor>,
}

impl ParamBinding {
    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    /// Accumulated gradient per parameter, aligned with the `ParamSet`.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| t.grad()).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvBlock {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

/// Stack of 3x3 conv + relu blocks; every block after the first halves the
/// spatial dims, so the output is `ceil(input / 2^(blocks-1))` per side.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub blocks: Vec<ConvBlock>,
}

impl Backbone {
    fn init(params: &mut ParamSet, prefix: &str, in_ch: usize, channels: &[usize], rng: &mut ChaCha8Rng) -> Backbone {
        let mut blocks = Vec::with_capacity(channels.len());
        let mut prev = in_ch;
        for (i, &ch) in channels.iter().enumerate() {
            let fan_in = prev * 9;
            let std = (2.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..ch * prev * 9).map(|_| rng::normal(rng) * std).collect();
            let wid = params.add(format!("{prefix}.block{i}.w"), &[ch, prev, 3, 3], w, true);
            // Slightly negative bias: weak (noise) responses die at the relu,
            // so featureless regions yield near-zero activations and the
            // aggregated map stays below the mask threshold there.
            let bid = params.add(format!("{prefix}.block{i}.b"), &[ch], vec![-0.2; ch], false);
            blocks.push(ConvBlock {
                w: wid,
                b: bid,
                stride: if i == 0 { 1 } else { 2 },
            });
            prev = ch;
        }
        Backbone { blocks }
    }

    fn forward(&self, bind: &ParamBinding, x: &Tensor) -> Result<Tensor> {
        let mut t = x.clone();
        for blk in &self.blocks {
            t = Tensor::conv2d(&t, bind.tensor(blk.w), bind.tensor(blk.b), blk.stride, 1)?;
            t = t.relu()?;
        }
        Ok(t)
    }
}

/// Per-class spatial maps plus the localizer's class posterior.
pub struct ActivationStack {
    /// `(classes, h', w')` modality-averaged maps, without dropout.
    pub maps: Tensor,
    /// `[classes]` pooled scores.
    pub scores: Tensor,
    /// `[classes]` softmax of the scores.
    pub probs: Tensor,
}

impl ActivationStack {
    pub fn probs_vec(&self) -> Vec<f64> {
        self.probs.data_vec()
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.probs.data())
    }
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Top-k mean pooling of one class map into a scalar score.
pub fn wildcat_pool(map: &Tensor, kmax: f64, kmin: f64, alpha: f64) -> Result<Tensor> {
    map.top_k_mean(kmax, kmin, alpha)
}

/// Zero each location with probability `rate` and scale survivors by
/// `1/(1-rate)`; identity in eval mode.
pub fn spatial_dropout(
    map: &Tensor,
    rate: f64,
    train_mode: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(
            "spatial_dropout",
            format!("rate {rate} outside [0,1)"),
        ));
    }
    if !train_mode || rate == 0.0 {
        return Ok(map.clone());
    }
    use rand::Rng;
    let scale = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..map.numel())
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
        .collect();
    map.dropout_apply(Rc::new(mask))
}

pub struct Model {
    pub params: ParamSet,
    pub backbone_loc: Backbone,
    pub backbone_cls: Backbone,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub lin_w: ParamId,
    pub lin_b: ParamId,
    pub classes: usize,
    pub modalities: usize,
    pub kmax: f64,
    pub kmin: f64,
    pub alpha: f64,
    pub dropout: f64,
    pub shared: bool,
    loc_forwards: AtomicU64,
    cls_forwards: AtomicU64,
}

impl Model {
    /// Fresh model with deterministic initialization from the config seed.
    pub fn new(cfg: &HyperConfig) -> Model {
        let mut rng = rng::derive(cfg.seed, "model-init", &[]);
        let mut params = ParamSet::default();

        let backbone_loc = Backbone::init(&mut params, "backbone", cfg.channels, &cfg.backbone_channels, &mut rng);
        let backbone_cls = if cfg.shared_backbone {
            backbone_loc.clone()
        } else {
            Backbone::init(&mut params, "backbone_cls", cfg.channels, &cfg.backbone_channels, &mut rng)
        };

        let feat_ch = *cfg.backbone_channels.last().expect("validated non-empty");
        let head_out = cfg.classes * cfg.modalities;
        let std = (2.0 / feat_ch as f64).sqrt();
        let head_w_data: Vec<f64> = (0..head_out * feat_ch).map(|_| rng::normal(&mut rng) * std).collect();
        let head_w = params.add("head.w", &[head_out, feat_ch, 1, 1], head_w_data, true);
        let head_b = params.add("head.b", &[head_out], vec![0.0; head_out], false);

        let lin_std = (2.0 / feat_ch as f64).sqrt();
        let lin_w_data: Vec<f64> = (0..cfg.classes * feat_ch).map(|_| rng::normal(&mut rng) * lin_std).collect();
        let lin_w = params.add("classifier.w", &[cfg.classes, feat_ch], lin_w_data, true);
        let lin_b = params.add("classifier.b", &[cfg.classes], vec![0.0; cfg.classes], false);

        Model {
            params,
            backbone_loc,
            backbone_cls,
            head_w,
            head_b,
            lin_w,
            lin_b,
            classes: cfg.classes,
            modalities: cfg.modalities,
            kmax: cfg.kmax,
            kmin: cfg.kmin,
            alpha: cfg.alpha,
            dropout: cfg.dropout,
            shared: cfg.shared_backbone,
            loc_forwards: AtomicU64::new(0),
            cls_forwards: AtomicU64::new(0),
        }
    }

    /// Rebuild a model around restored parameter values. Shapes must match
    /// what `Model::new` would produce for this config.
    pub fn from_restored(cfg: &HyperConfig, restored: Vec<Param>) -> Result<Model> {
        let model = Model::new(cfg);
        if restored.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: checkpoint has {}, config implies {}",
                restored.len(),
                model.params.len()
            )));
        }
        let mut model = model;
        for (slot, loaded) in model.params.params.iter_mut().zip(restored) {
            if slot.name != loaded.name || slot.shape != loaded.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    slot.name, slot.shape, loaded.name, loaded.shape
                )));
            }
            slot.data = loaded.data;
        }
        Ok(model)
    }

    pub fn binding(&self, requires_grad: bool) -> ParamBinding {
        self.params.binding(requires_grad)
    }

    /// Run the localizer. Dropout is applied only to the internal pooling
    /// map in train mode; the returned `maps` (which feed the final mask)
    /// never see dropout.
    pub fn localizer_forward(
        &self,
        bind: &ParamBinding,
        x: &Tensor,
        train_mode: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ActivationStack> {
        let feat = self.backbone_loc.forward(bind, x)?;
        let pre = Tensor::conv2d(&feat, bind.tensor(self.head_w), bind.tensor(self.head_b), 1, 0)?;
        let maps = pre.channel_group_mean(self.modalities)?;

        let pooled_src = if train_mode && self.dropout > 0.0 {
            let rng = rng.ok_or_else(|| {
                Error::invalid("localizer_forward", "train mode with dropout requires an rng")
            })?;
            spatial_dropout(&maps, self.dropout, true, rng)?
        } else {
            maps.clone()
        };

        let mut per_class = Vec::with_capacity(self.classes);
        for k in 0..self.classes {
            let map_k = pooled_src.slice_channel(k)?;
            per_class.push(wildcat_pool(&map_k, self.kmax, self.kmin, self.alpha)?);
        }
        let scores = Tensor::concat(&per_class)?;
        let probs = scores.softmax()?;

        self.loc_forwards.fetch_add(1, Ordering::Relaxed);
        Ok(ActivationStack { maps, scores, probs })
    }

    /// Run the classifier on a (masked) image; returns the class posterior.
    pub fn classifier_forward(&self, bind: &ParamBinding, x_masked: &Tensor) -> Result<Tensor> {
        let feat = self.backbone_cls.forward(bind, x_masked)?;
        let pooled = feat.spatial_avg()?;
        let logits = Tensor::linear(&pooled, bind.tensor(self.lin_w), bind.tensor(self.lin_b))?;
        let probs = logits.softmax()?;
        self.cls_forwards.fetch_add(1, Ordering::Relaxed);
        Ok(probs)
    }

    pub fn loc_forward_count(&self) -> u64 {
        self.loc_forwards.load(Ordering::Relaxed)
    }

    pub fn cls_forward_count(&self) -> u64 {
        self.cls_forwards.load(Ordering::Relaxed)
    }

    pub fn reset_forward_counts(&self) {
        self.loc_forwards.store(0, Ordering::Relaxed);
        self.cls_forwards.store(0, Ordering::Relaxed);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn small_cfg() -> HyperConfig {
        HyperConfig {
            image_size: 16,
            backbone_channels: vec![4, 8],
            modalities: 3,
            ..HyperConfig::default()
        }
    }

    #[test]
    fn zero_image_gives_uniform_scores() {
        let cfg = small_cfg();
        let model = Model::new(&cfg);
        let bind = model.binding(false);
        let x = Tensor::zeros(&[1, 16, 16]);
        let stack = model.localizer_forward(&bind, &x, false, None).unwrap();
        assert_eq!(stack.probs_vec(), vec![0.5, 0.5]);
        let p = model.classifier_forward(&bind, &x).unwrap();
        assert_eq!(&*p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn probs_are_a_distribution() {
        let cfg = small_cfg();
        let model = Model::new(&cfg);
        let bind = model.binding(false);
        let mut rng = crate::rng::derive(3, "test-input", &[]);
        let x = Tensor::from_vec((0..256).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(), &[1, 16, 16]).unwrap();
        let stack = model.localizer_forward(&bind, &x, false, None).unwrap();
        let p = stack.probs_vec();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(stack.maps.all_finite());
    }

    #[test]
    fn fixed_seed_forward_is_reproducible() {
        let cfg = small_cfg();
        let a = Model::new(&cfg);
        let b = Model::new(&cfg);
        let x = Tensor::from_vec((0..256).map(|i| (i as f64 * 0.37).sin()).collect(), &[1, 16, 16]).unwrap();
        let sa = a.localizer_forward(&a.binding(false), &x, false, None).unwrap();
        let sb = b.localizer_forward(&b.binding(false), &x, false, None).unwrap();
        assert_eq!(sa.maps.data_vec(), sb.maps.data_vec());
        assert_eq!(sa.probs_vec(), sb.probs_vec());
    }

    #[test]
    fn backbone_output_is_ceil_input_over_stride() {
        let cfg = HyperConfig {
            image_size: 64,
            ..HyperConfig::default()
        };
        let model = Model::new(&cfg);
        let bind = model.binding(false);
        for size in [64usize, 37, 9] {
            let x = Tensor::zeros(&[1, size, size]);
            let feat = model.backbone_loc.forward(&bind, &x).unwrap();
            let expect = size.div_ceil(8);
            assert_eq!(feat.shape(), vec![64, expect, expect], "size {size}");
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let cfg = small_cfg();
        let model = Model::new(&cfg);
        let bind = model.binding(false);
        let x = Tensor::zeros(&[3, 16, 16]); // model expects 1 channel
        assert!(model.localizer_forward(&bind, &x, false, None).is_err());
    }

    #[test]
    fn shared_backbone_is_one_parameter_set() {
        let cfg = small_cfg();
        let model = Model::new(&cfg);
        for (a, b) in model.backbone_loc.blocks.iter().zip(&model.backbone_cls.blocks) {
            assert_eq!(a.w, b.w);
            assert_eq!(a.b, b.b);
        }

        let unshared = Model::new(&HyperConfig {
            shared_backbone: false,
            ..small_cfg()
        });
        for (a, b) in unshared.backbone_loc.blocks.iter().zip(&unshared.backbone_cls.blocks) {
            assert_ne!(a.w, b.w);
        }
    }

    #[test]
    fn mutating_shared_backbone_changes_both_forwards() {
        let cfg = small_cfg();
        let mut model = Model::new(&cfg);
        let x = Tensor::from_vec((0..256).map(|i| (i as f64 * 0.11).cos()).collect(), &[1, 16, 16]).unwrap();

        let before_loc = model
            .localizer_forward(&model.binding(false), &x, false, None)
            .unwrap()
            .probs_vec();
        let before_cls = model.classifier_forward(&model.binding(false), &x).unwrap().data_vec();

        let wid = model.backbone_loc.blocks[0].w;
        for v in &mut model.params.params[wid].data {
            *v += 0.1;
        }

        let after_loc = model
            .localizer_forward(&model.binding(false), &x, false, None)
            .unwrap()
            .probs_vec();
        let after_cls = model.classifier_forward(&model.binding(false), &x).unwrap().data_vec();
        assert_ne!(before_loc, after_loc);
        assert_ne!(before_cls, after_cls, "classifier must see the localizer's backbone edit");
    }

    #[test]
    fn wildcat_pool_matches_bruteforce_on_small_maps() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for n in 1..=64usize {
            let vals: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let kmax = rng.gen::<f64>().max(1e-6);
            let kmin = rng.gen::<f64>().max(1e-6);
            let alpha = if rng.gen::<bool>() { rng.gen::<f64>() } else { 0.0 };

            let t = Tensor::from_vec(vals.clone(), &[n]).unwrap();
            let got = wildcat_pool(&t, kmax, kmin, alpha).unwrap().item();

            // independent oracle: full sorts, mean of slices
            let mut desc = vals.clone();
            desc.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let mut asc = vals.clone();
            asc.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let k_top = (kmax * n as f64).ceil() as usize;
            let k_bot = (kmin * n as f64).ceil() as usize;
            let mut expect = desc[..k_top].iter().sum::<f64>() / k_top as f64;
            if alpha != 0.0 {
                expect += alpha * asc[..k_bot].iter().sum::<f64>() / k_bot as f64;
            }

            assert_eq!(got, expect, "n={n} kmax={kmax} kmin={kmin} alpha={alpha}");
        }
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let t = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let eval = spatial_dropout(&t, 0.9, false, &mut rng).unwrap();
        assert_eq!(eval.data_vec(), t.data_vec());
        let zero_rate = spatial_dropout(&t, 0.0, true, &mut rng).unwrap();
        assert_eq!(zero_rate.data_vec(), t.data_vec());
        assert!(spatial_dropout(&t, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_survivor_fraction_near_expectation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let n = 10_000;
        let t = Tensor::from_vec(vec![1.0; n], &[100, 100]).unwrap();
        let dropped = spatial_dropout(&t, 0.75, true, &mut rng).unwrap();
        let survivors = dropped.data().iter().filter(|&&v| v != 0.0).count();
        let frac = survivors as f64 / n as f64;
        assert!((frac - 0.25).abs() < 0.02, "surviving fraction {frac}");
        // survivors carry the 1/(1-rate) scale
        assert!(dropped.data().iter().all(|&v| v == 0.0 || v == 4.0));
    }

    #[test]
    fn classifier_tail_gradient_passes_fd_check() {
        // -log softmax(W x + b)[y] as a function of W
        let x = Tensor::from_vec(vec![0.3, -0.7, 1.2, 0.05], &[4]).unwrap();
        let b = Tensor::from_vec(vec![0.0, 0.0], &[2]).unwrap();
        let w0: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin() * 0.5).collect();
        let report = crate::autodiff::grad_check(
            |w| {
                Tensor::linear(&x, w, &b)?
                    .softmax()?
                    .log_clamped()?
                    .pick(1)?
                    .scalar_affine(-1.0, 0.0)
            },
            &w0,
            &[2, 4],
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }
}
