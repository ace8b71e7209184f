//! Command implementations behind the `wsloc` binary.
//!
//! Each command is an ordinary function over paths so integration tests can
//! drive the full pipeline without spawning processes.

use std::path::{Path, PathBuf};

use wsloc_core::config::HyperConfig;
use wsloc_core::data::{
    gen_synthetic, load_folder, make_splits, write_split_manifest, FolderOptions, SampleRecord,
    SynthSpec,
};
use wsloc_core::erasing::write_step_log_csv;
use wsloc_core::mask::{write_binary_png, write_mask_png};
use wsloc_core::metrics::{build_report, write_metrics_csv, write_pr_csv, MetricsReport};
use wsloc_core::net::Model;
use wsloc_core::train::{
    dataset_hash, evaluate_model, load_checkpoint, save_checkpoint, train_model, RunManifest,
};
use wsloc_core::{Error, Result};

/// Binarization threshold for evaluation and mask export.
pub const MASK_THRESHOLD: f64 = 0.5;

fn folder_options(cfg: &HyperConfig) -> FolderOptions {
    FolderOptions {
        channels: cfg.channels,
        resize_to: Some(cfg.image_size),
    }
}

/// Generate a synthetic dataset on disk:
/// `out/{train,valid,test}/class_<k>/<id>.png` plus `masks/`, one manifest
/// per split, and an echo of the spec.
pub fn cmd_synth(spec_path: &Path, out_dir: &Path) -> Result<()> {
    let spec = SynthSpec::load(spec_path)?;
    let (train, valid, test) = gen_synthetic(&spec)?;
    std::fs::create_dir_all(out_dir)?;
    for (name, records) in [("train", &train), ("valid", &valid), ("test", &test)] {
        let dir = out_dir.join(name);
        wsloc_core::data::write_dataset(&dir, records)?;
        write_split_manifest(&out_dir.join(format!("{name}_manifest.txt")), records)?;
    }
    std::fs::write(out_dir.join("synth_spec.txt"), spec.to_key_value())?;
    log::info!(
        "wrote {} train / {} valid / {} test samples to {}",
        train.len(),
        valid.len(),
        test.len(),
        out_dir.display()
    );
    Ok(())
}

/// Train from a config file; artifacts (checkpoint, manifest, logs) land in
/// `out_dir`.
pub fn cmd_train(config_path: &Path, out_dir: &Path, log_erasing: bool) -> Result<PathBuf> {
    let cfg = HyperConfig::load(config_path)?;
    let root = cfg
        .data_root
        .clone()
        .ok_or_else(|| Error::Config("data_root must be set for training".into()))?;
    std::fs::create_dir_all(out_dir)?;

    let opts = folder_options(&cfg);
    let train_report = load_folder(&root.join("train"), None, &opts)?;
    if train_report.class_names.len() != cfg.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, config says {}",
            train_report.class_names.len(),
            cfg.classes
        )));
    }
    let (train_set, valid_set) = if root.join("valid").is_dir() {
        let valid_report = load_folder(&root.join("valid"), None, &opts)?;
        if valid_report.class_names != train_report.class_names {
            return Err(Error::Config("train/valid class directories differ".into()));
        }
        (train_report.records, valid_report.records)
    } else {
        log::info!("no valid/ directory; splitting train 80/20");
        make_splits(&train_report.records, (0.8, 0.2), cfg.seed)?
    };
    write_split_manifest(&out_dir.join("train_split.txt"), &train_set)?;
    write_split_manifest(&out_dir.join("valid_split.txt"), &valid_set)?;

    let hash = {
        let mut all: Vec<SampleRecord> = train_set.clone();
        all.extend(valid_set.iter().cloned());
        dataset_hash(&all)
    };

    let mut model = Model::new(&cfg);
    let outcome = train_model(&mut model, &train_set, &valid_set, &cfg, log_erasing)?;

    let ckpt_path = out_dir.join("model.ckpt");
    save_checkpoint(&ckpt_path, &model, &cfg)?;

    if log_erasing {
        write_step_log_csv(&out_dir.join("erasing_log.csv"), &outcome.erasing_log)?;
    }
    write_training_log(&out_dir.join("training_log.csv"), &outcome.history)?;

    let manifest = RunManifest {
        config: cfg.to_key_value(),
        seed: cfg.seed,
        dataset_hash: hash,
        train_ids: train_set.iter().map(|r| r.id.clone()).collect(),
        valid_ids: valid_set.iter().map(|r| r.id.clone()).collect(),
        epochs: outcome.history,
        best_epoch: outcome.best_epoch,
        best_valid_error: outcome.best_valid_error,
        checkpoint: ckpt_path.display().to_string(),
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    log::info!(
        "best epoch {} with validation error {:.2}%",
        manifest.best_epoch,
        manifest.best_valid_error
    );
    Ok(ckpt_path)
}

fn write_training_log(path: &Path, history: &[wsloc_core::train::EpochStats]) -> Result<()> {
    let mut out =
        String::from("epoch,lr,l_pos,l_neg,l_sec,total,valid_error,train_loc_forwards\n");
    for e in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            e.epoch, e.lr, e.l_pos, e.l_neg, e.l_sec, e.total, e.valid_error, e.train_loc_forwards
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Evaluate a checkpoint on a dataset folder; writes `metrics.csv`,
/// `pr_foreground.csv` / `pr_background.csv` when pixel labels exist, and a
/// human-readable `summary.txt`.
pub fn cmd_eval(ckpt_path: &Path, data_dir: &Path, out_dir: &Path) -> Result<MetricsReport> {
    let (cfg, model) = load_checkpoint(ckpt_path)?;
    let report = load_folder(data_dir, None, &folder_options(&cfg))?;
    if report.class_names.len() != cfg.classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, checkpoint was trained for {}",
            report.class_names.len(),
            cfg.classes
        )));
    }
    std::fs::create_dir_all(out_dir)?;

    let n = report.records.len() as u64;
    let run = evaluate_model(&model, &report.records, &cfg)?;
    if run.loc_forwards != n {
        return Err(Error::Training(format!(
            "inference must use exactly one localizer forward per sample; saw {} for {n} samples",
            run.loc_forwards
        )));
    }

    let metrics = build_report(&run.samples, MASK_THRESHOLD)?;
    write_metrics_csv(&out_dir.join("metrics.csv"), &metrics)?;
    if let Some(curve) = &metrics.pr_foreground {
        write_pr_csv(&out_dir.join("pr_foreground.csv"), curve)?;
    }
    if let Some(curve) = &metrics.pr_background {
        write_pr_csv(&out_dir.join("pr_background.csv"), curve)?;
    }
    std::fs::write(out_dir.join("summary.txt"), summary_text(&metrics))?;
    Ok(metrics)
}

fn summary_text(m: &MetricsReport) -> String {
    let mut s = String::new();
    s.push_str(&format!("classification_error_percent = {}\n", m.classification_error));
    match (m.f1_plus, m.f1_minus) {
        (Some(fp), Some(fm)) => {
            s.push_str(&format!("f1_plus_percent = {fp}\n"));
            s.push_str(&format!("f1_minus_percent = {fm}\n"));
            if let Some(b) = &m.baseline {
                s.push_str(&format!("all_ones_f1_plus_percent = {}\n", b.f1_plus));
                s.push_str(&format!("all_ones_f1_minus_percent = {}\n", b.f1_minus));
            }
        }
        _ => s.push_str("pixel_metrics = absent (no ground-truth masks)\n"),
    }
    s
}

/// Predict masks and labels for standalone images: writes `<id>_mask.png`,
/// `<id>_bin.png` and one `labels.csv`.
pub fn cmd_predict(ckpt_path: &Path, images: &[PathBuf], out_dir: &Path) -> Result<()> {
    let (cfg, model) = load_checkpoint(ckpt_path)?;
    std::fs::create_dir_all(out_dir)?;
    let opts = folder_options(&cfg);

    let mut rows = String::from("id,predicted\n");
    let mut predicted_any = false;
    for path in images {
        let record = match wsloc_core::data::load_image_file(path, &opts) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let run = evaluate_model(&model, std::slice::from_ref(&record), &cfg)?;
        let sample = &run.samples[0];
        let mask = sample.mask.as_ref().expect("eval always produces a mask");
        write_mask_png(
            &out_dir.join(format!("{}_mask.png", record.id)),
            mask,
            record.height,
            record.width,
        )?;
        write_binary_png(
            &out_dir.join(format!("{}_bin.png", record.id)),
            mask,
            record.height,
            record.width,
            MASK_THRESHOLD,
        )?;
        rows.push_str(&format!("{},{}\n", record.id, sample.predicted));
        predicted_any = true;
    }
    if !predicted_any {
        return Err(Error::Data("no readable input images".into()));
    }
    std::fs::write(out_dir.join("labels.csv"), rows)?;
    Ok(())
}

