//! Logits against an independent numpy forward pass (tests/oracle/forward.py)
//! on closed-form parameters and images.

use std::path::Path;

use apla::vit::{init_params, predict, LoraConfig, LoraTarget, ViTConfig};
use apla::{Rng, Tensor};

fn closed_form(cfg: &ViTConfig) -> apla::vit::ViTParams {
    let mut params = init_params(cfg, &mut Rng::new(0)).unwrap();
    params.add_extensions(cfg, &mut Rng::new(0)).unwrap();
    for (t, (name, tensor)) in params.named_mut().into_iter().enumerate() {
        let leaf = name.rsplit('.').next().unwrap();
        let gamma_like = leaf == "gamma" || leaf.starts_with("ls");
        for (i, v) in tensor.data_mut().iter_mut().enumerate() {
            let a = 0.37 * i as f64 + 1.3 * t as f64 + 0.5;
            *v = if gamma_like { 1.0 + 0.1 * a.cos() } else { 0.25 * a.sin() };
        }
    }
    params
}

fn check(cfg: &ViTConfig, golden: &str) {
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(golden)).unwrap();
    let params = closed_form(cfg);
    let s = cfg.image_size;
    let imgs: Vec<Tensor> = (0..3)
        .map(|b| Tensor::from_fn(&[cfg.channels, s, s], |k| (0.11 * k as f64 + 0.7 * b as f64).sin()))
        .collect();
    let logits = predict(&imgs, &params, cfg).unwrap();
    for (b, line) in text.lines().enumerate() {
        let want: Vec<f64> = line.split_whitespace().map(|v| v.parse().unwrap()).collect();
        assert_eq!(want.len(), cfg.num_classes);
        for (c, w) in want.iter().enumerate() {
            let got = logits.at(b, c);
            assert!((got - w).abs() <= 1e-10 * w.abs().max(1.0), "{golden} image {b} class {c}: {got} vs {w}");
        }
    }
}

#[test]
fn plain_model_matches_numpy() {
    let mut cfg = ViTConfig::new(8, 4, 3, 16, 4, 2, 5);
    cfg.use_layerscale = true;
    check(&cfg, "forward_plain.txt");
}

#[test]
fn adapters_and_head_layers_match_numpy() {
    let mut cfg = ViTConfig::new(6, 2, 2, 12, 3, 2, 4);
    cfg.head_hidden_layers = 1;
    cfg.lora = Some(LoraConfig { rank: 2, alpha: 4.0, targets: vec![LoraTarget::WQ, LoraTarget::WV, LoraTarget::WO] });
    check(&cfg, "forward_extended.txt");
}
