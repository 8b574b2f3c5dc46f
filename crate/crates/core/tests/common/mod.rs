#![allow(dead_code)]

use apla::vit::{self, init_params, Selection, TrainSet, ViTConfig, ViTParams};
use apla::{Rng, Tensor};

/// d=16, h=2, L=2 on 4×4 single-channel images with 2×2 patches: 4 patch tokens.
pub fn tiny_cfg() -> ViTConfig {
    let mut cfg = ViTConfig::new(4, 2, 1, 16, 2, 2, 3);
    cfg.use_layerscale = true;
    cfg.layerscale_init = 1.0;
    cfg
}

pub fn images(cfg: &ViTConfig, n: usize, rng: &mut Rng) -> Vec<Tensor> {
    let s = cfg.image_size;
    (0..n)
        .map(|_| Tensor::from_fn(&[cfg.channels, s, s], |_| rng.normal()))
        .collect()
}

/// Parameters redrawn at a scale where no GELU unit saturates and no
/// attention row collapses, so gradient entries stay well above the
/// finite-difference noise floor (about 1e-11 at step 1e-5).
pub fn lively_params(cfg: &ViTConfig, seed: u64) -> ViTParams {
    let mut rng = Rng::new(seed);
    let mut p = init_params(cfg, &mut rng).unwrap();
    for (name, t) in p.named_mut() {
        let gamma_like = name.ends_with("gamma") || name.contains("ls");
        for v in t.data_mut() {
            *v = if gamma_like { 1.0 + 0.2 * rng.normal() } else { 0.3 * rng.normal() };
        }
    }
    p
}

pub fn full_set(params: &ViTParams) -> TrainSet {
    let all = params
        .named()
        .into_iter()
        .map(|(n, _)| (n, Selection::Full))
        .collect();
    TrainSet::new(params, all).unwrap()
}

pub fn rel_err(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8)
}

/// Central finite difference of the mean loss with respect to one scalar.
pub fn fd_scalar(
    params: &ViTParams,
    cfg: &ViTConfig,
    images: &[Tensor],
    labels: &[usize],
    name: &str,
    idx: usize,
    step: f64,
) -> f64 {
    let mut p = params.clone();
    let orig = p.get(name).unwrap().data()[idx];
    p.get_mut(name).unwrap().data_mut()[idx] = orig + step;
    let up = vit::loss(images, labels, &p, cfg).unwrap();
    p.get_mut(name).unwrap().data_mut()[idx] = orig - step;
    let down = vit::loss(images, labels, &p, cfg).unwrap();
    (up - down) / (2.0 * step)
}

/// Key biases shift every attention logit of a query row by the same amount,
/// so softmax cancels them and their exact gradient is zero.
pub fn structurally_zero(name: &str) -> bool {
    name.ends_with("attn.b_k")
}

/// Worst relative error per tensor over every scalar of every tensor, key
/// biases excepted (see [`structurally_zero`]).
pub fn gradient_check(
    params: &ViTParams,
    cfg: &ViTConfig,
    images: &[Tensor],
    labels: &[usize],
) -> Vec<(String, f64)> {
    let set = full_set(params);
    let (_, grads) = vit::loss_and_backward(images, labels, params, cfg, &set).unwrap();
    let mut out = Vec::new();
    for (name, g) in grads.iter().filter(|(n, _)| !structurally_zero(n)) {
        let mut worst = 0.0f64;
        for (i, &a) in g.data().iter().enumerate() {
            let fd = fd_scalar(params, cfg, images, labels, name, i, 1e-5);
            worst = worst.max(rel_err(a, fd));
        }
        out.push((name.to_string(), worst));
    }
    out
}
