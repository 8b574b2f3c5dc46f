mod common;

use apla::adaptation::{score_columns, select_top, Strategy};
use apla::vit::{init_params, ViTConfig};
use apla::{Error, Rng};
use common::{fd_scalar, images};

fn toy() -> ViTConfig {
    ViTConfig::new(4, 2, 1, 8, 2, 2, 3)
}

fn column_norms(values: &[f64], d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| values.iter().skip(j).step_by(d).map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

#[test]
fn gradient_scores_agree_with_finite_differences() {
    let cfg = toy();
    let d = cfg.embed_dim;
    let params = init_params(&cfg, &mut Rng::new(6)).unwrap();
    let imgs = images(&cfg, 6, &mut Rng::new(7));
    let labels = [0, 1, 2, 2, 1, 0];
    let scores = score_columns(Strategy::Gradient, &params, &cfg, &imgs, &labels).unwrap();
    assert_eq!(scores.len(), cfg.depth);
    for s in &scores {
        let name = format!("blocks.{}.attn.w_o", s.block);
        let fd: Vec<f64> = (0..d * d)
            .map(|i| fd_scalar(&params, &cfg, &imgs, &labels, &name, i, 1e-5))
            .collect();
        let oracle = column_norms(&fd, d);
        for (a, b) in s.scores.data().iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-7 * (1.0 + b.abs()), "{name}: {a} vs {b}");
        }
        assert_eq!(s.top(2).unwrap(), select_top(&oracle, 2).unwrap(), "{name}");
    }
}

#[test]
fn magnitude_scores_are_weight_column_norms() {
    let cfg = toy();
    let params = init_params(&cfg, &mut Rng::new(8)).unwrap();
    let imgs = images(&cfg, 1, &mut Rng::new(9));
    let scores = score_columns(Strategy::Magnitude, &params, &cfg, &imgs, &[0]).unwrap();
    for s in scores {
        let w = &params.blocks[s.block].w_o;
        assert_eq!(s.scores.data(), column_norms(w.data(), cfg.embed_dim).as_slice());
    }
}

#[test]
fn activation_scores_are_positive_means() {
    let cfg = toy();
    let params = init_params(&cfg, &mut Rng::new(10)).unwrap();
    let imgs = images(&cfg, 3, &mut Rng::new(11));
    let scores = score_columns(Strategy::Activation, &params, &cfg, &imgs, &[0, 1, 2]).unwrap();
    for s in scores {
        assert_eq!(s.scores.numel(), cfg.embed_dim);
        assert!(s.scores.data().iter().all(|&v| v > 0.0 && v.is_finite()));
    }
}

#[test]
fn scoring_rejects_bad_requests() {
    let cfg = toy();
    let params = init_params(&cfg, &mut Rng::new(12)).unwrap();
    let imgs = images(&cfg, 1, &mut Rng::new(13));
    assert!(matches!(score_columns(Strategy::Random, &params, &cfg, &imgs, &[0]), Err(Error::Config(_))));
    assert!(matches!(score_columns(Strategy::Gradient, &params, &cfg, &[], &[]), Err(Error::Data(_))));
}
