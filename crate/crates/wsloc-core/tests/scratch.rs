// temporary diagnostics; not part of the suite
use wsloc_core::autodiff::Tensor;
use wsloc_core::config::HyperConfig;
use wsloc_core::data::{augment_normalize, gen_synthetic, AugmentOps, SynthSpec};
use wsloc_core::mask::aggregate_maps;
use wsloc_core::net::Model;

#[test]
#[ignore]
fn map_statistics_at_init() {
    let cfg = HyperConfig::default();
    let model = Model::new(&cfg);
    let spec = SynthSpec::default();
    let (train, _, _) = gen_synthetic(&spec).unwrap();
    let bind = model.binding(false);
    let mut rng = wsloc_core::rng::derive(0, "x", &[]);

    for r in train.iter().take(4) {
        let n = augment_normalize(r, &AugmentOps::none(), false, &mut rng);
        let x = Tensor::from_vec(n.image.clone(), &n.shape()).unwrap();
        let stack = model.localizer_forward(&bind, &x, false, None).unwrap();
        let t = aggregate_maps(&stack).unwrap();
        let d = t.data_vec();
        let (min, max) = d
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let over = d.iter().filter(|&&v| v > 0.5).count();
        let maps = stack.maps.data_vec();
        let mmax = maps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mmin = maps.iter().cloned().fold(f64::INFINITY, f64::min);
        println!(
            "sample {} label {}: T min {min:.3} mean {mean:.3} max {max:.3}, cells>0.5: {over}/64, raw maps [{mmin:.3},{mmax:.3}], probs {:?}",
            r.id, r.label, stack.probs_vec()
        );
    }
}
