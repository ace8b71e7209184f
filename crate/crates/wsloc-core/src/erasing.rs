//! Incremental recursive erasing with trust coefficients.
//!
//! During a training forward, each sample runs up to `u+1` localizer passes.
//! Every pass mines the currently most discriminative region, accumulates it
//! into a per-sample temporal mask (elementwise max of trust-scaled masks),
//! accumulates the localizer gradient of that pass, and erases the mined
//! region from the working image before the next pass. A pass is trusted
//! only if the localizer still predicts the true class and its loss has not
//! risen above the unmasked baseline; the first untrusted pass stops the
//! sample for the rest of the loop. Each pass backpropagates and releases
//! its own graph, so memory stays flat in `u`.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{backward, Tensor};
use crate::config::HyperConfig;
use crate::error::{Error, Result};
use crate::loss::loss_secondary;
use crate::mask::build_mask;
use crate::net::{argmax, Model, ParamBinding};
use crate::rng;

/// Per-sample state of the mining loop.
pub struct ErasingState {
    pub t: usize,
    /// Working copy of the image; already-mined regions are multiplied away.
    pub x_star: Vec<f64>,
    /// Accumulated trust-scaled mask, reset to zero on every training forward.
    pub r_star_plus: Vec<f64>,
    /// Secondary loss of the very first (unmasked) pass.
    pub h0: f64,
    pub psi: f64,
    pub stopped: bool,
}

/// One row of the erasing log: everything the trust decision saw at step `t`.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub sample_id: String,
    pub t: usize,
    pub psi: f64,
    pub gamma: f64,
    pub h_t: f64,
    pub predicted: usize,
    pub trusted: bool,
}

/// Trust of the mask mined at step `t`: the exponential step decay times the
/// per-sample factor, which is the true-class probability when the localizer
/// still predicts the true class without losing confidence, zero otherwise.
/// Argmax ties resolve to the lowest class index.
pub fn compute_trust(
    t: usize,
    p_hat_s: &[f64],
    y: usize,
    h_t: f64,
    h_0: f64,
    sigma: f64,
) -> Result<(f64, f64)> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("compute_trust", format!("sigma = {sigma}")));
    }
    if y >= p_hat_s.len() {
        return Err(Error::invalid(
            "compute_trust",
            format!("class {y} out of range for {} classes", p_hat_s.len()),
        ));
    }
    let gamma = if argmax(p_hat_s) == y && h_t <= h_0 {
        p_hat_s[y]
    } else {
        0.0
    };
    let psi = (-(t as f64) / sigma).exp() * gamma;
    Ok((psi, gamma))
}

/// `r_star := max(r_star, psi * r_t)` elementwise.
pub fn accumulate_mask(r_star: &mut [f64], r_t: &[f64], psi: f64) -> Result<()> {
    if r_star.len() != r_t.len() {
        return Err(Error::ShapeMismatch {
            op: "accumulate_mask",
            lhs: vec![r_star.len()],
            rhs: vec![r_t.len()],
        });
    }
    if !(0.0..=1.0).contains(&psi) {
        return Err(Error::invalid("accumulate_mask", format!("psi = {psi}")));
    }
    for (acc, &r) in r_star.iter_mut().zip(r_t) {
        *acc = acc.max(psi * r);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EraseOptions {
    /// Keep a snapshot of the accumulator after every step (tests only).
    pub record_mask_history: bool,
}

/// What one sample's mining loop produced.
pub struct SampleErasure {
    pub r_star_plus: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub mask_history: Vec<Vec<f64>>,
    /// Sum of the (weighted) secondary losses over trusted steps; this is
    /// the loss whose gradient sits in the binding afterwards.
    pub l_sec: f64,
    pub forwards: usize,
}

/// Run the mining loop for one sample, accumulating localizer gradients
/// into `bind`. The image must already be normalized.
#[allow(clippy::too_many_arguments)]
pub fn erase_sample(
    model: &Model,
    bind: &ParamBinding,
    image: &[f64],
    shape: &[usize],
    y: usize,
    sample_id: &str,
    cfg: &HyperConfig,
    dropout_rng: &mut ChaCha8Rng,
    opts: EraseOptions,
) -> Result<SampleErasure> {
    let (h, w) = (shape[1], shape[2]);
    let channels = shape[0];
    let hw = h * w;

    let mut state = ErasingState {
        t: 0,
        x_star: image.to_vec(),
        r_star_plus: vec![0.0; hw],
        h0: f64::NAN,
        psi: 0.0,
        stopped: false,
    };
    let mut steps = Vec::new();
    let mut mask_history = Vec::new();
    let mut l_sec = 0.0;

    while state.t <= cfg.u && !state.stopped {
        let x_t = Tensor::from_vec(state.x_star.clone(), shape)?;
        let stack = model.localizer_forward(bind, &x_t, true, Some(dropout_rng))?;
        let pm = build_mask(&stack, h, w, cfg.omega, cfg.sigma_prime)?;
        let h_node = loss_secondary(&stack.probs, y)?;
        let h_t = h_node.item();
        if !h_t.is_finite() {
            return Err(Error::Training(format!(
                "non-finite secondary loss for sample {sample_id} at erasing step {}",
                state.t
            )));
        }
        if state.t == 0 {
            state.h0 = h_t;
        }
        let probs = stack.probs_vec();
        let (psi, gamma) = compute_trust(state.t, &probs, y, h_t, state.h0, cfg.sigma)?;
        state.psi = psi;
        steps.push(StepRecord {
            sample_id: sample_id.to_string(),
            t: state.t,
            psi,
            gamma,
            h_t,
            predicted: argmax(&probs),
            trusted: psi != 0.0,
        });

        if psi != 0.0 {
            accumulate_mask(&mut state.r_star_plus, &pm.r_plus.data(), psi)?;
            let grad_node = if cfg.w_sec != 1.0 {
                h_node.scalar_affine(cfg.w_sec, 0.0)?
            } else {
                h_node
            };
            backward(&grad_node)?;
            l_sec += cfg.w_sec * h_t;
            // Erase: x_star := x_star (.) r_star_minus, channel-broadcast.
            for c in 0..channels {
                let plane = &mut state.x_star[c * hw..(c + 1) * hw];
                for (px, acc) in plane.iter_mut().zip(&state.r_star_plus) {
                    *px *= 1.0 - acc;
                }
            }
        } else {
            state.stopped = true;
        }
        if opts.record_mask_history {
            mask_history.push(state.r_star_plus.clone());
        }
        state.t += 1;
    }

    let forwards = steps.len();
    Ok(SampleErasure {
        r_star_plus: state.r_star_plus,
        steps,
        mask_history,
        l_sec,
        forwards,
    })
}

/// Output of [`run_recursive_erasing`] over a batch.
pub struct ErasingRun {
    pub per_sample: Vec<SampleErasure>,
    /// Localizer gradient summed over samples, aligned with the model's
    /// parameter set.
    pub grad: Vec<Vec<f64>>,
    pub log: Vec<StepRecord>,
}

/// Run the mining loop over a batch of (image, label, id) triples and sum
/// the per-sample localizer gradients. `step_seed` pins every sample's
/// dropout stream, so results do not depend on processing order.
pub fn run_recursive_erasing(
    batch: &[(Vec<f64>, usize, String)],
    shape: &[usize],
    model: &Model,
    cfg: &HyperConfig,
    step_seed: u64,
    opts: EraseOptions,
) -> Result<ErasingRun> {
    let mut per_sample = Vec::with_capacity(batch.len());
    let mut grad: Vec<Vec<f64>> = model
        .params
        .params
        .iter()
        .map(|p| vec![0.0; p.data.len()])
        .collect();

    for (i, (image, y, id)) in batch.iter().enumerate() {
        let bind = model.binding(true);
        let mut rng = rng::derive(step_seed, "dropout", &[i as u64]);
        let erasure = erase_sample(model, &bind, image, shape, *y, id, cfg, &mut rng, opts)?;
        for (acc, g) in grad.iter_mut().zip(bind.grads()) {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        per_sample.push(erasure);
    }

    let log = per_sample
        .iter()
        .flat_map(|s| s.steps.iter().cloned())
        .collect();
    Ok(ErasingRun {
        per_sample,
        grad,
        log,
    })
}

/// Write the erasing log as CSV, one row per (sample, step).
pub fn write_step_log_csv(path: &std::path::Path, log: &[StepRecord]) -> Result<()> {
    use std::io::Write;
    let mut out = String::from("sample,step,psi,gamma,h_t,predicted,trusted\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.sample_id, r.t, r.psi, r.gamma, r.h_t, r.predicted, r.trusted
        ));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::loss_secondary;
    use crate::net::ParamSet;

    #[test]
    fn trust_at_step_zero_is_true_class_probability() {
        let (psi, gamma) = compute_trust(0, &[0.2, 0.8], 1, 0.4, 0.4, 10.0).unwrap();
        assert_eq!(gamma, 0.8);
        assert_eq!(psi, 0.8);
    }

    #[test]
    fn wrong_prediction_gets_zero_trust() {
        let (psi, gamma) = compute_trust(0, &[0.7, 0.3], 1, 0.4, 0.4, 10.0).unwrap();
        assert_eq!((psi, gamma), (0.0, 0.0));
    }

    #[test]
    fn rising_loss_gets_zero_trust() {
        let (psi, _) = compute_trust(2, &[0.1, 0.9], 1, 0.5, 0.4, 10.0).unwrap();
        assert_eq!(psi, 0.0);
    }

    #[test]
    fn step_decay_matches_exponential() {
        // gamma = 1 via certain prediction
        let (psi, gamma) = compute_trust(10, &[0.0, 1.0], 1, 0.1, 0.2, 10.0).unwrap();
        assert_eq!(gamma, 1.0);
        assert!((psi - (-1.0f64).exp()).abs() < 1e-15);
        assert!((psi - 0.367_879_441).abs() < 1e-9);
    }

    #[test]
    fn argmax_ties_break_to_lowest_index() {
        // tie at 0.5: argmax = 0
        let (psi0, _) = compute_trust(0, &[0.5, 0.5], 0, 0.1, 0.1, 10.0).unwrap();
        assert_eq!(psi0, 0.5);
        let (psi1, _) = compute_trust(0, &[0.5, 0.5], 1, 0.1, 0.1, 10.0).unwrap();
        assert_eq!(psi1, 0.0);
    }

    #[test]
    fn accumulate_examples() {
        let mut acc = vec![0.0, 0.0];
        accumulate_mask(&mut acc, &[0.3, 0.9], 1.0).unwrap();
        assert_eq!(acc, vec![0.3, 0.9]);

        let mut acc = vec![0.4, 0.1];
        accumulate_mask(&mut acc, &[0.9, 0.9], 0.0).unwrap();
        assert_eq!(acc, vec![0.4, 0.1]);

        let mut acc = vec![0.2, 0.9];
        accumulate_mask(&mut acc, &[0.8, 0.4], 0.5).unwrap();
        assert_eq!(acc, vec![0.4, 0.9]);
    }

    #[test]
    fn accumulate_rejects_bad_args() {
        let mut acc = vec![0.0];
        assert!(accumulate_mask(&mut acc, &[0.1, 0.2], 0.5).is_err());
        assert!(accumulate_mask(&mut acc, &[0.1], 1.5).is_err());
    }

    fn fixture_cfg() -> HyperConfig {
        HyperConfig {
            classes: 3,
            image_size: 32,
            channels: 2,
            modalities: 1,
            backbone_channels: vec![2],
            kmax: 0.05,
            kmin: 0.05,
            alpha: 0.0,
            dropout: 0.0,
            u: 4,
            ..HyperConfig::default()
        }
    }

    /// Hand-set weights: the backbone passes both input channels through
    /// untouched; the class-0 map reads blob A strongly and blob B weakly;
    /// class 2 is a competing score that lives only on blob A, so erasing A
    /// collapses it and confidence in class 0 rises, unlocking blob B.
    fn fixture_model() -> Model {
        let cfg = fixture_cfg();
        let mut model = Model::new(&cfg);

        let wid = model.backbone_loc.blocks[0].w; // (2, 2, 3, 3)
        let params: &mut ParamSet = &mut model.params;
        let wdata = &mut params.params[wid].data;
        wdata.iter_mut().for_each(|v| *v = 0.0);
        // identity taps: out0 <- in0 center (offset 4), out1 <- in1 center (offset 31)
        wdata[4] = 1.0;
        wdata[31] = 1.0;
        let bid = model.backbone_loc.blocks[0].b;
        params.params[bid].data.fill(0.0);

        let hw_id = model.head_w; // (3, 2, 1, 1)
        let hdata = &mut params.params[hw_id].data;
        hdata.copy_from_slice(&[
            2.0, 1.2, // class 0 (the label): strong on A, weak on B
            0.0, 0.0, // class 1: dead
            5.8, 0.0, // class 2: sacrificial competitor, lives on A only
        ]);
        let hb_id = model.head_b;
        params.params[hb_id].data.copy_from_slice(&[0.0, -20.0, -4.04]);
        model
    }

    fn two_blob_image() -> Vec<f64> {
        // channel 0: blob A, channel 1: blob B, 32x32
        let mut img = vec![0.0; 2 * 32 * 32];
        for r in 4..12 {
            for c in 4..12 {
                img[r * 32 + c] = 1.0;
            }
        }
        for r in 20..28 {
            for c in 20..28 {
                img[1024 + r * 32 + c] = 1.0;
            }
        }
        img
    }

    fn support(mask: &[f64]) -> Vec<usize> {
        mask.iter()
            .enumerate()
            .filter(|(_, &v)| v >= 0.5)
            .map(|(i, _)| i)
            .collect()
    }

    #[test]
    fn two_blob_mining_strictly_grows_the_support() {
        let cfg = fixture_cfg();
        let model = fixture_model();
        let img = two_blob_image();
        let bind = model.binding(true);
        let mut rng = crate::rng::derive(0, "test", &[]);
        let out = erase_sample(
            &model,
            &bind,
            &img,
            &[2, 32, 32],
            0,
            "blob",
            &cfg,
            &mut rng,
            EraseOptions {
                record_mask_history: true,
            },
        )
        .unwrap();

        let first = support(&out.mask_history[0]);
        let last = support(&out.r_star_plus);
        assert!(!first.is_empty(), "step 0 must mine blob A");
        assert!(first.len() < last.len(), "mining must add pixels");
        for px in &first {
            assert!(last.contains(px), "support must only grow");
        }
        // the added pixels are blob B's: check one interior pixel
        let b_center = 24 * 32 + 24;
        assert!(!first.contains(&b_center));
        assert!(last.contains(&b_center));

        // accumulator history non-decreasing elementwise
        for pair in out.mask_history.windows(2) {
            for (a, b) in pair[0].iter().zip(&pair[1]) {
                assert!(b >= a);
            }
        }
        // trusted steps predicted the true class without loss rising
        let h0 = out.steps[0].h_t;
        for s in &out.steps {
            if s.trusted {
                assert_eq!(s.predicted, 0);
                assert!(s.h_t <= h0);
            }
        }
        assert!(out.forwards <= cfg.u + 1);
    }

    #[test]
    fn zero_depth_means_exactly_one_forward_and_no_erasing() {
        let cfg = HyperConfig {
            u: 0,
            ..fixture_cfg()
        };
        let model = fixture_model();
        let img = two_blob_image();
        model.reset_forward_counts();
        let bind = model.binding(true);
        let mut rng = crate::rng::derive(0, "test", &[]);
        let out = erase_sample(
            &model, &bind, &img, &[2, 32, 32], 0, "s", &cfg, &mut rng,
            EraseOptions::default(),
        )
        .unwrap();
        assert_eq!(out.forwards, 1);
        assert_eq!(model.loc_forward_count(), 1);
        // accumulator equals psi_0 * r_plus_0, support only blob A
        let sup = support(&out.r_star_plus);
        assert!(!sup.is_empty());
        assert!(!sup.contains(&(24 * 32 + 24)));
    }

    #[test]
    fn misclassified_sample_keeps_zero_accumulator_and_stops() {
        let cfg = fixture_cfg();
        let model = fixture_model();
        let img = two_blob_image();
        let bind = model.binding(true);
        let mut rng = crate::rng::derive(0, "test", &[]);
        // true class 1 is never predicted by the fixture
        let out = erase_sample(
            &model, &bind, &img, &[2, 32, 32], 1, "s", &cfg, &mut rng,
            EraseOptions::default(),
        )
        .unwrap();
        assert_eq!(out.forwards, 1, "loop must stop after the untrusted step");
        assert!(out.r_star_plus.iter().all(|&v| v == 0.0));
        assert!(!out.steps[0].trusted);
        // no gradient was accumulated either
        assert!(bind.grads().iter().all(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn u_zero_gradient_bitwise_equals_plain_backward() {
        let cfg = HyperConfig {
            u: 0,
            dropout: 0.5,
            ..fixture_cfg()
        };
        let model = fixture_model();
        let img = two_blob_image();

        let bind_a = model.binding(true);
        let mut rng_a = crate::rng::derive(7, "dropout", &[0]);
        let out = erase_sample(
            &model, &bind_a, &img, &[2, 32, 32], 0, "s", &cfg, &mut rng_a,
            EraseOptions::default(),
        )
        .unwrap();
        assert!(out.steps[0].trusted, "fixture sample must be trusted at t=0");

        // plain forward + backward of the secondary loss, same dropout stream
        let bind_b = model.binding(true);
        let mut rng_b = crate::rng::derive(7, "dropout", &[0]);
        let x = Tensor::from_vec(img.clone(), &[2, 32, 32]).unwrap();
        let stack = model
            .localizer_forward(&bind_b, &x, true, Some(&mut rng_b))
            .unwrap();
        let loss = loss_secondary(&stack.probs, 0).unwrap();
        backward(&loss).unwrap();

        for (ga, gb) in bind_a.grads().iter().zip(bind_b.grads().iter()) {
            assert_eq!(ga.len(), gb.len());
            for (a, b) in ga.iter().zip(gb) {
                assert_eq!(a.to_bits(), b.to_bits(), "gradients must match bitwise");
            }
        }
    }

    #[test]
    fn batch_run_sums_sample_gradients_in_order() {
        let cfg = HyperConfig { u: 1, ..fixture_cfg() };
        let model = fixture_model();
        let img = two_blob_image();
        let batch = vec![
            (img.clone(), 0usize, "a".to_string()),
            (img.clone(), 1usize, "b".to_string()),
        ];
        let run = run_recursive_erasing(&batch, &[2, 32, 32], &model, &cfg, 3, EraseOptions::default()).unwrap();
        assert_eq!(run.per_sample.len(), 2);
        assert_eq!(run.log.len(), run.per_sample.iter().map(|s| s.steps.len()).sum::<usize>());
        // sample b is misclassified: all its gradient contributions are zero,
        // so the batch gradient equals sample a's alone
        let solo = run_recursive_erasing(&batch[..1], &[2, 32, 32], &model, &cfg, 3, EraseOptions::default()).unwrap();
        for (g1, g2) in run.grad.iter().zip(solo.grad.iter()) {
            assert_eq!(g1, g2);
        }
    }
}
