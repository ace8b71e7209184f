//! Training loop, optimizer, evaluation path, checkpoints and manifests.
//!
//! One training step per mini-batch: every sample runs the recursive
//! erasing loop (accumulating localizer gradients), then the classifier
//! sees the foreground- and background-masked images and its losses are
//! backpropagated into the same per-sample gradient buffer. Per-sample
//! gradients are summed in sample order, normalized by the batch size and
//! applied with Nesterov-momentum SGD. Samples are independent, so the
//! batch fans out across threads; every random draw comes from a stream
//! keyed by (seed, epoch, step, sample), which makes the result identical
//! whatever the thread count.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{backward, Tensor};
use crate::config::HyperConfig;
use crate::data::{augment_normalize, AugmentOps, SampleRecord};
use crate::erasing::{erase_sample, EraseOptions, StepRecord};
use crate::error::{Error, Result};
use crate::loss::{loss_negative, loss_positive, total_loss, LossBundle, SampleLoss};
use crate::mask::{apply_mask, build_mask};
use crate::metrics::EvalSample;
use crate::net::{argmax, Model, Param, ParamSet};
use crate::rng;

/// Stochastic gradient descent with Nesterov momentum. Weight decay applies
/// only to parameters flagged as weights.
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
    momentum: f64,
    nesterov: bool,
    weight_decay: f64,
}

impl Sgd {
    pub fn new(params: &ParamSet, cfg: &HyperConfig) -> Sgd {
        Sgd {
            velocity: params.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            momentum: cfg.momentum,
            nesterov: cfg.nesterov,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>], lr: f64) {
        for ((param, grad), vel) in params.params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let wd = if param.decay { self.weight_decay } else { 0.0 };
            for ((p, &g), v) in param.data.iter_mut().zip(grad).zip(vel.iter_mut()) {
                let g = g + wd * *p;
                *v = self.momentum * *v + g;
                let update = if self.nesterov { g + self.momentum * *v } else { *v };
                *p -= lr * update;
            }
        }
    }
}

/// Everything one sample contributes to a training step.
struct SampleRun {
    grads: Vec<Vec<f64>>,
    loss: SampleLoss,
    steps: Vec<StepRecord>,
}

/// Full per-sample pass of the training step: mining loop plus classifier
/// pass, both accumulating into one gradient buffer.
fn run_sample(
    model: &Model,
    record: &SampleRecord,
    cfg: &HyperConfig,
    step_seed: u64,
    position: u64,
    opts: EraseOptions,
) -> Result<SampleRun> {
    let shape = record.shape();
    let bind = model.binding(true);
    let mut dropout_rng = rng::derive(step_seed, "dropout", &[position]);
    let erasure = erase_sample(
        model,
        &bind,
        &record.image,
        &shape,
        record.label,
        &record.id,
        cfg,
        &mut dropout_rng,
        opts,
    )?;

    // Classifier pass on the accumulated masks; the masks are data here.
    let r_star = Tensor::from_vec(erasure.r_star_plus.clone(), &[record.height, record.width])?;
    let r_star_minus = r_star.scalar_affine(-1.0, 1.0)?;
    let x = Tensor::from_vec(record.image.clone(), &shape)?;
    let x_plus = apply_mask(&x, &r_star)?;
    let x_minus = apply_mask(&x, &r_star_minus)?;

    let p_plus = model.classifier_forward(&bind, &x_plus)?;
    let p_minus = model.classifier_forward(&bind, &x_minus)?;
    let l_pos = loss_positive(&p_plus, record.label)?;
    let l_neg = loss_negative(&p_minus, cfg.classes)?;
    let l_pos_val = l_pos.item();
    let l_neg_val = l_neg.item();
    if !l_pos_val.is_finite() || !l_neg_val.is_finite() {
        return Err(Error::Training(format!(
            "non-finite classifier loss for sample {}",
            record.id
        )));
    }
    let weighted = |node: Tensor, w: f64| -> Result<Tensor> {
        if w != 1.0 {
            node.scalar_affine(w, 0.0)
        } else {
            Ok(node)
        }
    };
    let combined = weighted(l_pos, cfg.w_pos)?.add(&weighted(l_neg, cfg.w_neg)?)?;
    backward(&combined)?;

    Ok(SampleRun {
        grads: bind.grads(),
        loss: SampleLoss {
            id: record.id.clone(),
            l_pos: cfg.w_pos * l_pos_val,
            l_neg: cfg.w_neg * l_neg_val,
            l_sec: erasure.l_sec,
        },
        steps: erasure.steps,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub l_pos: f64,
    pub l_neg: f64,
    pub l_sec: f64,
    pub total: f64,
    pub valid_error: f64,
    /// Localizer forwards spent on training batches this epoch.
    pub train_loc_forwards: u64,
    pub train_samples: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_valid_error: f64,
    /// Per-(sample, step) erasing log, when requested.
    pub erasing_log: Vec<StepRecord>,
}

/// Train in place; on return the model holds the parameters of the best
/// validation epoch.
pub fn train_model(
    model: &mut Model,
    train_set: &[SampleRecord],
    valid_set: &[SampleRecord],
    cfg: &HyperConfig,
    log_erasing: bool,
) -> Result<TrainOutcome> {
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::Training("empty train or valid set".into()));
    }
    for r in train_set.iter().chain(valid_set) {
        if r.label >= cfg.classes {
            return Err(Error::Training(format!(
                "sample {} has label {} but config says {} classes",
                r.id, r.label, cfg.classes
            )));
        }
    }
    let ops = AugmentOps {
        hflip: cfg.augment_hflip,
        vflip: cfg.augment_vflip,
        rot90: cfg.augment_rot90,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Training(format!("thread pool: {e}")))?;

    let mut sgd = Sgd::new(&model.params, cfg);
    let mut history = Vec::new();
    let mut erasing_log = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_valid_error = f64::INFINITY;
    let mut best_params: Vec<Vec<f64>> = snapshot(&model.params);

    for epoch in 0..cfg.max_epochs {
        let lr = cfg.lr_at_epoch(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        {
            use rand::seq::SliceRandom;
            let mut shuffle_rng = rng::derive(cfg.seed, "shuffle", &[epoch as u64]);
            order.shuffle(&mut shuffle_rng);
        }

        let loc_forwards_before = model.loc_forward_count();
        let mut epoch_losses: Vec<SampleLoss> = Vec::with_capacity(train_set.len());
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step_seed = rng::derive(cfg.seed, "train-step", &[epoch as u64, step as u64])
                .next_seed();
            let opts = EraseOptions::default();

            let runs: Vec<Result<SampleRun>> = pool.install(|| {
                use rayon::prelude::*;
                chunk
                    .par_iter()
                    .enumerate()
                    .map(|(pos, &idx)| {
                        let mut aug_rng =
                            rng::derive(step_seed, "augment", &[pos as u64]);
                        let record =
                            augment_normalize(&train_set[idx], &ops, true, &mut aug_rng);
                        run_sample(model, &record, cfg, step_seed, pos as u64, opts)
                    })
                    .collect()
            });

            // sum per-sample gradients in sample order, then normalize by n
            let mut grads: Vec<Vec<f64>> = model
                .params
                .params
                .iter()
                .map(|p| vec![0.0; p.data.len()])
                .collect();
            let n = chunk.len() as f64;
            for run in runs {
                let run = run.map_err(|e| {
                    Error::Training(format!("epoch {epoch}, batch {step}: {e}"))
                })?;
                for (acc, g) in grads.iter_mut().zip(&run.grads) {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                if log_erasing {
                    erasing_log.extend(run.steps);
                }
                epoch_losses.push(run.loss);
            }
            for g in &mut grads {
                for v in g.iter_mut() {
                    *v /= n;
                }
            }
            sgd.step(&mut model.params, &grads, lr);
        }
        let train_loc_forwards = model.loc_forward_count() - loc_forwards_before;

        let bundle: LossBundle = total_loss(epoch_losses)
            .map_err(|e| Error::Training(format!("epoch {epoch}: {e}")))?;
        if !bundle.total.is_finite() {
            return Err(Error::Training(format!(
                "epoch {epoch}: loss became non-finite"
            )));
        }

        let eval = evaluate_model(model, valid_set, cfg)?;
        let preds: Vec<usize> = eval.samples.iter().map(|s| s.predicted).collect();
        let labels: Vec<usize> = eval.samples.iter().map(|s| s.label).collect();
        let valid_error = crate::metrics::classification_error(&preds, &labels)?;

        if valid_error < best_valid_error {
            best_valid_error = valid_error;
            best_epoch = epoch;
            best_params = snapshot(&model.params);
        }
        history.push(EpochStats {
            epoch,
            lr,
            l_pos: bundle.l_pos,
            l_neg: bundle.l_neg,
            l_sec: bundle.l_sec,
            total: bundle.total,
            valid_error,
            train_loc_forwards,
            train_samples: train_set.len(),
        });
        log::info!(
            "epoch {epoch}: loss {:.4} (pos {:.4} neg {:.4} sec {:.4}), valid error {valid_error:.2}%",
            bundle.total,
            bundle.l_pos,
            bundle.l_neg,
            bundle.l_sec
        );

        if cfg.patience > 0 && epoch - best_epoch >= cfg.patience {
            break;
        }
    }

    restore(&mut model.params, &best_params);
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_valid_error,
        erasing_log,
    })
}

fn snapshot(params: &ParamSet) -> Vec<Vec<f64>> {
    params.params.iter().map(|p| p.data.clone()).collect()
}

fn restore(params: &mut ParamSet, values: &[Vec<f64>]) {
    for (p, v) in params.params.iter_mut().zip(values) {
        p.data.copy_from_slice(v);
    }
}

trait NextSeed {
    fn next_seed(&mut self) -> u64;
}

impl NextSeed for rand_chacha::ChaCha8Rng {
    fn next_seed(&mut self) -> u64 {
        use rand::Rng;
        self.gen()
    }
}

pub struct EvalRun {
    pub samples: Vec<EvalSample>,
    /// Localizer forwards spent: exactly one per sample, since the erasing
    /// loop never runs at inference.
    pub loc_forwards: u64,
    pub cls_forwards: u64,
}

/// Single-forward inference over a dataset: one localizer pass builds the
/// mask, one classifier pass on the foreground-masked image predicts the
/// label.
pub fn evaluate_model(model: &Model, records: &[SampleRecord], cfg: &HyperConfig) -> Result<EvalRun> {
    let loc_before = model.loc_forward_count();
    let cls_before = model.cls_forward_count();
    let bind = model.binding(false);
    let mut dummy_rng = rng::derive(0, "eval-unused", &[]);
    let mut samples = Vec::with_capacity(records.len());
    for record in records {
        let normalized = augment_normalize(record, &AugmentOps::none(), false, &mut dummy_rng);
        let x = Tensor::from_vec(normalized.image.clone(), &normalized.shape())?;
        let stack = model.localizer_forward(&bind, &x, false, None)?;
        let pm = build_mask(&stack, record.height, record.width, cfg.omega, cfg.sigma_prime)?;
        let x_plus = apply_mask(&x, &pm.r_plus)?;
        let probs = model.classifier_forward(&bind, &x_plus)?;
        let predicted = argmax(&probs.data());
        samples.push(EvalSample {
            id: record.id.clone(),
            label: record.label,
            predicted,
            mask: Some(pm.r_plus.data_vec()),
            gt_mask: record.gt_mask.clone(),
        });
    }
    Ok(EvalRun {
        samples,
        loc_forwards: model.loc_forward_count() - loc_before,
        cls_forwards: model.cls_forward_count() - cls_before,
    })
}

/// Content hash of a dataset: ids, labels, dimensions, pixel bytes, masks.
pub fn dataset_hash(records: &[SampleRecord]) -> String {
    let mut hasher = Sha256::new();
    for r in records {
        hasher.update(r.id.as_bytes());
        hasher.update((r.label as u64).to_le_bytes());
        hasher.update((r.channels as u64).to_le_bytes());
        hasher.update((r.height as u64).to_le_bytes());
        hasher.update((r.width as u64).to_le_bytes());
        for v in &r.image {
            hasher.update(v.to_le_bytes());
        }
        match &r.gt_mask {
            Some(m) => {
                hasher.update([1u8]);
                for &b in m {
                    hasher.update([b as u8]);
                }
            }
            None => hasher.update([0u8]),
        }
    }
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything needed to reproduce and audit a run.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: String,
    pub seed: u64,
    pub dataset_hash: String,
    pub train_ids: Vec<String>,
    pub valid_ids: Vec<String>,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_valid_error: f64,
    pub checkpoint: String,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

const CKPT_MAGIC: &[u8; 8] = b"WSLOCKPT";
const CKPT_VERSION: u32 = 1;

/// Versioned little-endian binary checkpoint: magic, version, config echo,
/// then every parameter as (name, decay flag, shape, f64 data).
pub fn save_checkpoint(path: &Path, model: &Model, cfg: &HyperConfig) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_u32::<LittleEndian>(CKPT_VERSION)?;
    let config = cfg.to_key_value();
    w.write_u64::<LittleEndian>(config.len() as u64)?;
    w.write_all(config.as_bytes())?;
    w.write_u64::<LittleEndian>(model.params.params.len() as u64)?;
    for p in &model.params.params {
        w.write_u64::<LittleEndian>(p.name.len() as u64)?;
        w.write_all(p.name.as_bytes())?;
        w.write_u8(p.decay as u8)?;
        w.write_u64::<LittleEndian>(p.shape.len() as u64)?;
        for &d in &p.shape {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in &p.data {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(HyperConfig, Model)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short".into()))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg_len = r.read_u64::<LittleEndian>()? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)?;
    let config_text = String::from_utf8(cfg_bytes)
        .map_err(|_| Error::Checkpoint("config echo is not utf-8".into()))?;
    let cfg = HyperConfig::parse(&config_text)?;

    let count = r.read_u64::<LittleEndian>()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.read_u64::<LittleEndian>()? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let decay = r.read_u8()? != 0;
        let ndim = r.read_u64::<LittleEndian>()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u64::<LittleEndian>()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.read_f64::<LittleEndian>()?);
        }
        params.push(Param {
            name: String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?,
            shape,
            data,
            decay,
        });
    }
    let model = Model::from_restored(&cfg, params)?;
    Ok((cfg, model))
}
