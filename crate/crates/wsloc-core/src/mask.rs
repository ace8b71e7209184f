//! Relevance-mask construction and application.
//!
//! The localizer's per-class maps are aggregated into one map weighted by
//! the class posterior, upsampled to image resolution with the gradient
//! detached, and pushed through a sharp sigmoid to yield a pseudo-binary
//! foreground mask in (0,1). The background mask is its exact complement.
//! Because the upsampling is detached, masks act as plain data for the
//! classifier: its losses train the classifier (and shared backbone), while
//! the localizer learns through its own classification head.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::net::ActivationStack;

/// Foreground/background relevance pair with `r_plus + r_minus = 1`
/// elementwise, exactly.
pub struct PseudoMask {
    pub r_plus: Tensor,
    pub r_minus: Tensor,
}

impl PseudoMask {
    pub fn from_r_plus(r_plus: Tensor) -> Result<PseudoMask> {
        {
            let d = r_plus.data();
            if !d.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
                return Err(Error::invalid(
                    "pseudo_mask",
                    "entries must be finite and within [0,1]",
                ));
            }
        }
        let r_minus = complement(&r_plus)?;
        Ok(PseudoMask { r_plus, r_minus })
    }

    /// Hard masks at `threshold`. The background view is the exact logical
    /// complement of the foreground view, so their support sizes always sum
    /// to the pixel count.
    pub fn binarize(&self, threshold: f64) -> (Vec<bool>, Vec<bool>) {
        let m_plus: Vec<bool> = self.r_plus.data().iter().map(|&v| v >= threshold).collect();
        let m_minus: Vec<bool> = m_plus.iter().map(|&b| !b).collect();
        (m_plus, m_minus)
    }
}

/// Class-posterior-weighted aggregation of the per-class maps:
/// `T = sum_k p_hat_s[k] * A[k]`. Differentiable in both inputs.
pub fn aggregate_maps(stack: &ActivationStack) -> Result<Tensor> {
    Tensor::channel_weighted_sum(&stack.maps, &stack.probs)
}

/// Sharp sigmoid pseudo-threshold: `1 / (1 + exp(-omega * (t - sigma_prime)))`.
pub fn pseudo_threshold(t_up: &Tensor, omega: f64, sigma_prime: f64) -> Result<Tensor> {
    if !(omega > 0.0) {
        return Err(Error::invalid(
            "pseudo_threshold",
            format!("omega = {omega} (need > 0)"),
        ));
    }
    t_up.check_finite("pseudo_threshold")?;
    t_up.scalar_affine(omega, -omega * sigma_prime)?.sigmoid()
}

/// `1 - r` elementwise; exact in IEEE double for r in [0,1].
pub fn complement(r_plus: &Tensor) -> Result<Tensor> {
    {
        let d = r_plus.data();
        if !d.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::invalid("complement", "entries must be in [0,1]"));
        }
    }
    r_plus.scalar_affine(-1.0, 1.0)
}

/// Hadamard product of a `(d,h,w)` image with an `(h,w)` mask broadcast
/// over channels.
pub fn apply_mask(x: &Tensor, r: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let rs = r.shape();
    if xs.len() != 3 || rs.len() != 2 || xs[1] != rs[0] || xs[2] != rs[1] {
        return Err(Error::ShapeMismatch {
            op: "apply_mask",
            lhs: xs,
            rhs: rs,
        });
    }
    x.mul(&r.repeat_channel(xs[0])?)
}

/// Full single-pass mask pipeline: aggregate, detached upsample to
/// `(out_h, out_w)`, pseudo-threshold.
pub fn build_mask(
    stack: &ActivationStack,
    out_h: usize,
    out_w: usize,
    omega: f64,
    sigma_prime: f64,
) -> Result<PseudoMask> {
    let t = aggregate_maps(stack)?;
    let t_up = t.bilinear_upsample(out_h, out_w, true)?;
    let r_plus = pseudo_threshold(&t_up, omega, sigma_prime)?;
    PseudoMask::from_r_plus(r_plus)
}

/// Write a mask as an 8-bit single-channel PNG, `round(255 * r)` per pixel.
pub fn write_mask_png(path: &Path, values: &[f64], h: usize, w: usize) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::invalid("write_mask_png", "size mismatch"));
    }
    let pixels: Vec<u8> = values
        .iter()
        .map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels)
        .expect("buffer sized to dimensions");
    img.save(path)?;
    Ok(())
}

/// Write the binarized view, foreground 255 / background 0.
pub fn write_binary_png(path: &Path, values: &[f64], h: usize, w: usize, threshold: f64) -> Result<()> {
    let bin: Vec<f64> = values
        .iter()
        .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
        .collect();
    write_mask_png(path, &bin, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::backward;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stack_from(maps: Tensor, scores: Vec<f64>) -> ActivationStack {
        let scores = Tensor::from_vec(scores, &[maps.shape()[0]]).unwrap();
        let probs = scores.softmax().unwrap();
        ActivationStack { maps, scores, probs }
    }

    fn stack_with_probs(maps: Tensor, probs: Vec<f64>) -> ActivationStack {
        let c = maps.shape()[0];
        let probs = Tensor::from_vec(probs, &[c]).unwrap();
        ActivationStack {
            maps,
            scores: Tensor::zeros(&[c]),
            probs,
        }
    }

    #[test]
    fn one_hot_scores_select_single_map() {
        let maps = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], &[2, 2, 2]).unwrap();
        let stack = stack_with_probs(maps, vec![0.0, 1.0]);
        let t = aggregate_maps(&stack).unwrap();
        assert_eq!(t.data_vec(), vec![5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn equal_maps_any_distribution_returns_the_map() {
        let maps = Tensor::from_vec(vec![0.3, 0.7, 0.1, 0.9, 0.3, 0.7, 0.1, 0.9], &[2, 2, 2]).unwrap();
        let stack = stack_from(maps, vec![1.3, -0.2]);
        let t = aggregate_maps(&stack).unwrap();
        for (got, want) in t.data().iter().zip([0.3, 0.7, 0.1, 0.9]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_sum_matches_direct_evaluation() {
        let maps = Tensor::from_vec(vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0], &[2, 2, 2]).unwrap();
        let stack = stack_with_probs(maps, vec![0.3, 0.7]);
        let t = aggregate_maps(&stack).unwrap();
        for &v in t.data().iter() {
            assert!((v - 1.7).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_midpoint_and_tails() {
        let t = Tensor::from_vec(vec![0.5, 1.5, -0.5], &[3]).unwrap();
        let r = pseudo_threshold(&t, 8.0, 0.5).unwrap();
        let d = r.data();
        assert_eq!(d[0], 0.5);
        assert!((d[1] - 1.0 / (1.0 + (-8.0f64).exp())).abs() < 1e-15);
        assert!((d[1] - 0.999_664_6).abs() < 1e-6);
        assert!((d[2] - 1.0 / (1.0 + 8.0f64.exp())).abs() < 1e-15);
        assert!((d[2] - 3.353_501e-4).abs() < 1e-9);
    }

    #[test]
    fn pseudo_threshold_rejects_bad_inputs() {
        let t = Tensor::from_vec(vec![f64::NAN], &[1]).unwrap();
        assert!(pseudo_threshold(&t, 8.0, 0.5).is_err());
        let ok = Tensor::from_vec(vec![0.0], &[1]).unwrap();
        assert!(pseudo_threshold(&ok, 0.0, 0.5).is_err());
    }

    #[test]
    fn pseudo_threshold_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut vals: Vec<f64> = (0..64).map(|_| rng.gen::<f64>() * 6.0 - 3.0).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let t = Tensor::from_vec(vals, &[64]).unwrap();
        let r = t.scalar_affine(8.0, -4.0).unwrap().sigmoid().unwrap();
        let d = r.data();
        for pair in d.windows(2) {
            assert!(pair[0] <= pair[1]);
        }
    }

    #[test]
    fn complement_of_extremes() {
        let zero = Tensor::from_vec(vec![0.0, 0.5], &[2]).unwrap();
        let c = complement(&zero).unwrap();
        assert_eq!(c.data_vec(), vec![1.0, 0.5]);
    }

    #[test]
    fn masks_of_ones_and_zeros() {
        let x = Tensor::from_vec(vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 0.7, 0.8], &[2, 2, 2]).unwrap();
        let ones = Tensor::from_vec(vec![1.0; 4], &[2, 2]).unwrap();
        let zeros = Tensor::from_vec(vec![0.0; 4], &[2, 2]).unwrap();
        assert_eq!(apply_mask(&x, &ones).unwrap().data_vec(), x.data_vec());
        assert!(apply_mask(&x, &zeros).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apply_mask_rejects_shape_mismatch() {
        let x = Tensor::zeros(&[1, 4, 4]);
        let r = Tensor::zeros(&[3, 3]);
        assert!(apply_mask(&x, &r).is_err());
    }

    proptest! {
        #[test]
        fn complement_sums_to_one_exactly(vals in proptest::collection::vec(0.0f64..=1.0, 1..64)) {
            let n = vals.len();
            let r = Tensor::from_vec(vals, &[n]).unwrap();
            let c = complement(&r).unwrap();
            for (a, b) in r.data().iter().zip(c.data().iter()) {
                prop_assert_eq!(a + b, 1.0);
            }
        }

        #[test]
        fn decomposition_reconstructs_image(
            img in proptest::collection::vec(-2.0f64..2.0, 16),
            mask in proptest::collection::vec(0.0f64..=1.0, 16),
        ) {
            let x = Tensor::from_vec(img.clone(), &[1, 4, 4]).unwrap();
            let pm = PseudoMask::from_r_plus(Tensor::from_vec(mask, &[4, 4]).unwrap()).unwrap();
            let plus = apply_mask(&x, &pm.r_plus).unwrap();
            let minus = apply_mask(&x, &pm.r_minus).unwrap();
            let back = plus.add(&minus).unwrap();
            for (orig, rec) in img.iter().zip(back.data().iter()) {
                prop_assert!((orig - rec).abs() <= 4.0 * f64::EPSILON * orig.abs().max(1.0));
            }
        }

        #[test]
        fn binarized_supports_partition_the_pixels(vals in proptest::collection::vec(0.0f64..=1.0, 1..64)) {
            let n = vals.len();
            let pm = PseudoMask::from_r_plus(Tensor::from_vec(vals, &[n]).unwrap()).unwrap();
            let (mp, mm) = pm.binarize(0.5);
            let l0 = mp.iter().filter(|&&b| b).count() + mm.iter().filter(|&&b| b).count();
            prop_assert_eq!(l0, n);
        }
    }

    #[test]
    fn detached_pipeline_blocks_gradient_to_maps_but_not_image() {
        // maps as a differentiable leaf standing in for the localizer output
        let maps = Tensor::leaf(vec![0.6, -0.2, 0.8, 0.1, 0.0, 0.4, 0.9, -0.5], &[2, 2, 2]).unwrap();
        let probs = Tensor::from_vec(vec![0.5, 0.5], &[2]).unwrap();
        let t = Tensor::channel_weighted_sum(&maps, &probs).unwrap();
        let t_up = t.bilinear_upsample(4, 4, true).unwrap();
        let r_plus = pseudo_threshold(&t_up, 8.0, 0.5).unwrap();

        let image = Tensor::leaf(vec![0.5; 16], &[1, 4, 4]).unwrap();
        let masked = apply_mask(&image, &r_plus).unwrap();
        let loss = masked.sum().unwrap();
        backward(&loss).unwrap();

        assert!(maps.grad().iter().all(|&g| g == 0.0), "detach must cut the map path");
        assert!(image.grad().iter().any(|&g| g != 0.0), "image path stays differentiable");
    }

    #[test]
    fn png_export_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let vals = vec![0.0, 0.25, 0.5004, 1.0];
        let p1 = dir.path().join("m.png");
        let p2 = dir.path().join("b.png");
        write_mask_png(&p1, &vals, 2, 2).unwrap();
        write_binary_png(&p2, &vals, 2, 2, 0.5).unwrap();

        let m = image::open(&p1).unwrap().into_luma8();
        assert_eq!(m.as_raw(), &vec![0u8, 64, 128, 255]);
        let b = image::open(&p2).unwrap().into_luma8();
        assert_eq!(b.as_raw(), &vec![0u8, 0, 255, 255]);
    }
}
