//! Batched forward pass. Activations for a batch of `B` images are stored as
//! `(B·T) × d` row-major buffers, sample-major, so every weight gradient is a
//! single `xᵀ·dy` over all rows of the batch.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};
use crate::vit::config::{LoraTarget, ViTConfig};
use crate::vit::params::{BlockParams, LoraPair, ViTParams};

/// Splits a `channels × S × S` image into `N` flattened patches, patches in
/// row-major grid order, each patch channel-major then row-major.
pub fn patchify(image: &Tensor, cfg: &ViTConfig) -> Result<Tensor> {
    let s = cfg.image_size;
    if image.shape() != [cfg.channels, s, s] {
        return Err(Error::dim(format!(
            "image shape {:?}, expected {:?}",
            image.shape(),
            [cfg.channels, s, s]
        )));
    }
    let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    patchify_into(image.data(), cfg, &mut out);
    Tensor::new(vec![cfg.num_patches(), cfg.patch_dim()], out)
}

fn patchify_into(pixels: &[f64], cfg: &ViTConfig, out: &mut Vec<f64>) {
    let (s, p, g) = (cfg.image_size, cfg.patch_size, cfg.grid());
    for gy in 0..g {
        for gx in 0..g {
            for ch in 0..cfg.channels {
                for py in 0..p {
                    let row = ch * s * s + (gy * p + py) * s + gx * p;
                    out.extend_from_slice(&pixels[row..row + p]);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttnCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
    pub u: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// `B × h × T × T` attention weights.
    pub probs: Vec<f64>,
    /// Concatenated head outputs, the input of `W_O`.
    pub concat: Vec<f64>,
    /// Output of the projection layer (bias included), before LayerScale.
    pub proj: Vec<f64>,
    /// `x·A` for each adapter pair, in the block's adapter order.
    pub lora_xa: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
    pub u: Vec<f64>,
    pub pre: Vec<f64>,
    pub act: Vec<f64>,
    pub out: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    pub attn: AttnCache,
    pub mlp: MlpCache,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub batch: usize,
    pub patches: Vec<f64>,
    pub blocks: Vec<BlockCache>,
    pub final_xhat: Vec<f64>,
    pub final_rstd: Vec<f64>,
    /// Input of each head layer: `[0]` is the normalized class row, the last
    /// entry feeds `W_pred`.
    pub head_inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden head layer.
    pub head_pre: Vec<Vec<f64>>,
}

fn linear(x: &[f64], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![0.0; rows * dout];
    kernels::matmul(x, w.data(), &mut y, rows, din, dout);
    kernels::add_bias(&mut y, b.data());
    y
}

/// Adds `(x·A)·B·(alpha/rank)` to `y` and returns `x·A`.
fn add_lora(x: &[f64], rows: usize, pair: &LoraPair, scale: f64, y: &mut [f64]) -> Vec<f64> {
    let (din, rank) = (pair.a.shape()[0], pair.a.shape()[1]);
    let dout = pair.b.shape()[1];
    let mut xa = vec![0.0; rows * rank];
    kernels::matmul(x, pair.a.data(), &mut xa, rows, din, rank);
    let mut delta = vec![0.0; rows * dout];
    kernels::matmul(&xa, pair.b.data(), &mut delta, rows, rank, dout);
    for (o, dv) in y.iter_mut().zip(&delta) {
        *o += dv * scale;
    }
    xa
}

/// `(x·A)·B·(alpha/rank)`: the adapter's contribution to a projection output.
pub fn lora_forward_delta(x: &Tensor, pair: &LoraPair, alpha: f64, rank: usize) -> Result<Tensor> {
    let (rows, din) = x.dims2();
    if pair.a.shape() != [din, rank] || pair.b.shape()[0] != rank {
        return Err(Error::dim(format!(
            "adapter shapes A{:?} B{:?} do not fit input {:?} at rank {rank}",
            pair.a.shape(),
            pair.b.shape(),
            x.shape()
        )));
    }
    let dout = pair.b.shape()[1];
    let mut y = vec![0.0; rows * dout];
    add_lora(x.data(), rows, pair, alpha / rank as f64, &mut y);
    Tensor::new(vec![rows, dout], y)
}

fn layernorm_rows(x: &[f64], gamma: &Tensor, beta: &Tensor, eps: f64, d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    kernels::layernorm(x, gamma.data(), beta.data(), eps, d, &mut out, &mut xhat, &mut rstd);
    (out, xhat, rstd)
}

/// Attention sub-block on `batch` samples: `z += ls1 ⊙ (concat_i(head_i)·W_O + b_O)`.
pub(crate) fn attention_forward(
    z: &mut [f64],
    batch: usize,
    bp: &BlockParams,
    cfg: &ViTConfig,
) -> AttnCache {
    let d = cfg.embed_dim;
    let t = cfg.tokens();
    let h = cfg.num_heads;
    let dh = cfg.head_dim();
    let rows = batch * t;
    let lora_scale = cfg.lora.as_ref().map_or(0.0, |l| l.scale());

    let (u, xhat, rstd) = layernorm_rows(z, &bp.ln1_gamma, &bp.ln1_beta, cfg.ln_eps, d);
    let mut q = linear(&u, rows, &bp.w_q, &bp.b_q);
    let mut k = linear(&u, rows, &bp.w_k, &bp.b_k);
    let mut v = linear(&u, rows, &bp.w_v, &bp.b_v);
    let mut lora_xa = Vec::with_capacity(bp.lora.len());
    for pair in &bp.lora {
        match pair.target {
            LoraTarget::WQ => lora_xa.push(add_lora(&u, rows, pair, lora_scale, &mut q)),
            LoraTarget::WK => lora_xa.push(add_lora(&u, rows, pair, lora_scale, &mut k)),
            LoraTarget::WV => lora_xa.push(add_lora(&u, rows, pair, lora_scale, &mut v)),
            LoraTarget::WO => lora_xa.push(Vec::new()),
        }
    }

    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; batch * h * t * t];
    let mut concat = vec![0.0; rows * d];
    for b in 0..batch {
        for head in 0..h {
            let off = head * dh;
            let a = &mut probs[(b * h + head) * t * t..(b * h + head + 1) * t * t];
            for i in 0..t {
                let qi = &q[(b * t + i) * d + off..(b * t + i) * d + off + dh];
                for j in 0..t {
                    let kj = &k[(b * t + j) * d + off..(b * t + j) * d + off + dh];
                    let mut acc = 0.0;
                    for (x, y) in qi.iter().zip(kj) {
                        acc += x * y;
                    }
                    a[i * t + j] = acc * scale;
                }
                kernels::softmax_in_place(&mut a[i * t..(i + 1) * t]);
            }
            for i in 0..t {
                let out = &mut concat[(b * t + i) * d + off..(b * t + i) * d + off + dh];
                for j in 0..t {
                    let w = a[i * t + j];
                    let vj = &v[(b * t + j) * d + off..(b * t + j) * d + off + dh];
                    for (o, x) in out.iter_mut().zip(vj) {
                        *o += w * x;
                    }
                }
            }
        }
    }

    let mut proj = linear(&concat, rows, &bp.w_o, &bp.b_o);
    for (slot, pair) in bp.lora.iter().enumerate() {
        if pair.target == LoraTarget::WO {
            lora_xa[slot] = add_lora(&concat, rows, pair, lora_scale, &mut proj);
        }
    }
    add_residual(z, &proj, bp.ls1.as_ref());

    AttnCache {
        xhat,
        rstd,
        u,
        q,
        k,
        v,
        probs,
        concat,
        proj,
        lora_xa,
    }
}

fn add_residual(z: &mut [f64], branch: &[f64], ls: Option<&Tensor>) {
    match ls {
        Some(ls) => {
            let d = ls.numel();
            for (zr, br) in z.chunks_exact_mut(d).zip(branch.chunks_exact(d)) {
                for ((zv, bv), s) in zr.iter_mut().zip(br).zip(ls.data()) {
                    *zv += s * bv;
                }
            }
        }
        None => {
            for (zv, bv) in z.iter_mut().zip(branch) {
                *zv += bv;
            }
        }
    }
}

pub(crate) fn mlp_forward(z: &mut [f64], batch: usize, bp: &BlockParams, cfg: &ViTConfig) -> MlpCache {
    let d = cfg.embed_dim;
    let rows = batch * cfg.tokens();
    let (u, xhat, rstd) = layernorm_rows(z, &bp.ln2_gamma, &bp.ln2_beta, cfg.ln_eps, d);
    let pre = linear(&u, rows, &bp.w_fc1, &bp.b_fc1);
    let act: Vec<f64> = pre.iter().map(|&x| kernels::gelu(x)).collect();
    let out = linear(&act, rows, &bp.w_fc2, &bp.b_fc2);
    add_residual(z, &out, bp.ls2.as_ref());
    MlpCache {
        xhat,
        rstd,
        u,
        pre,
        act,
        out,
    }
}

/// One pre-norm attention sub-block on a single `(N+1) × d` token matrix.
pub fn attention_block(z_in: &Tensor, bp: &BlockParams, cfg: &ViTConfig) -> Result<(Tensor, AttnCache)> {
    if z_in.shape() != [cfg.tokens(), cfg.embed_dim] {
        return Err(Error::dim(format!(
            "attention input {:?}, expected {:?}",
            z_in.shape(),
            [cfg.tokens(), cfg.embed_dim]
        )));
    }
    let mut z = z_in.data().to_vec();
    let cache = attention_forward(&mut z, 1, bp, cfg);
    Ok((Tensor::new(z_in.shape().to_vec(), z)?, cache))
}

/// Full forward pass: returns `B × num_classes` logits and the activation cache.
pub fn forward(images: &[Tensor], params: &ViTParams, cfg: &ViTConfig) -> Result<(Tensor, ForwardCache)> {
    if images.is_empty() {
        return Err(Error::data("empty batch"));
    }
    let batch = images.len();
    let d = cfg.embed_dim;
    let t = cfg.tokens();
    let n = cfg.num_patches();
    let s = cfg.image_size;

    let mut patches = Vec::with_capacity(batch * n * cfg.patch_dim());
    for img in images {
        if img.shape() != [cfg.channels, s, s] {
            return Err(Error::dim(format!(
                "image shape {:?}, expected {:?}",
                img.shape(),
                [cfg.channels, s, s]
            )));
        }
        patchify_into(img.data(), cfg, &mut patches);
    }
    let embedded = linear(&patches, batch * n, &params.w_e, &params.b_e);

    let mut z = vec![0.0; batch * t * d];
    let pos = params.pos.data();
    for b in 0..batch {
        for tok in 0..t {
            let src: &[f64] = if tok == 0 {
                params.cls_token.data()
            } else {
                &embedded[(b * n + tok - 1) * d..(b * n + tok) * d]
            };
            let dst = &mut z[(b * t + tok) * d..(b * t + tok + 1) * d];
            for ((o, x), p) in dst.iter_mut().zip(src).zip(&pos[tok * d..(tok + 1) * d]) {
                *o = x + p;
            }
        }
    }

    let mut blocks = Vec::with_capacity(params.blocks.len());
    for bp in &params.blocks {
        let attn = attention_forward(&mut z, batch, bp, cfg);
        let mlp = mlp_forward(&mut z, batch, bp, cfg);
        blocks.push(BlockCache { attn, mlp });
    }

    let mut cls_rows = Vec::with_capacity(batch * d);
    for b in 0..batch {
        cls_rows.extend_from_slice(&z[b * t * d..(b * t + 1) * d]);
    }
    let (mut x, final_xhat, final_rstd) =
        layernorm_rows(&cls_rows, &params.final_ln_gamma, &params.final_ln_beta, cfg.ln_eps, d);
    let mut head_inputs = Vec::with_capacity(params.head_hidden.len() + 1);
    let mut head_pre = Vec::with_capacity(params.head_hidden.len());
    for layer in &params.head_hidden {
        let pre = linear(&x, batch, &layer.weight, &layer.bias);
        let next: Vec<f64> = pre.iter().map(|&v| kernels::gelu(v)).collect();
        head_inputs.push(x);
        head_pre.push(pre);
        x = next;
    }
    let logits = linear(&x, batch, &params.w_pred, &params.b_pred);
    head_inputs.push(x);

    let cache = ForwardCache {
        batch,
        patches,
        blocks,
        final_xhat,
        final_rstd,
        head_inputs,
        head_pre,
    };
    Ok((Tensor::new(vec![batch, cfg.num_classes], logits)?, cache))
}

/// Logits only.
pub fn predict(images: &[Tensor], params: &ViTParams, cfg: &ViTConfig) -> Result<Tensor> {
    forward(images, params, cfg).map(|(logits, _)| logits)
}
