//! Analytic reverse pass restricted to a trainable set.
//!
//! Sub-blocks are ordered bottom to top: embedding (0), attention of block
//! `l` (`2l+1`), MLP of block `l` (`2l+2`), final norm and head (`2L+1`). The
//! gradient is pushed down only as far as the lowest sub-block holding a
//! trainable tensor, and inside a sub-block only as deep as its trainable
//! tensors require. Weight gradients accumulate over the batch rows in
//! ascending order, identically for full and column-restricted entries.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};
use crate::vit::config::{LoraTarget, ViTConfig};
use crate::vit::forward::{forward, AttnCache, ForwardCache, MlpCache};
use crate::vit::grads::{GradSet, Selection, TrainSet};
use crate::vit::params::{BlockParams, ViTParams};

/// Sub-block position of a parameter name (see module docs).
pub fn position(name: &str, depth: usize) -> usize {
    if let Some(rest) = name.strip_prefix("blocks.") {
        let mut parts = rest.splitn(2, '.');
        let l: usize = parts.next().and_then(|s| s.parse().ok()).unwrap_or(0);
        let leaf = parts.next().unwrap_or("");
        if leaf.starts_with("ln2") || leaf.starts_with("mlp") || leaf.starts_with("ls2") {
            2 * l + 2
        } else {
            2 * l + 1
        }
    } else if name.starts_with("patch_embed") || name == "cls_token" || name == "pos_embed" {
        0
    } else {
        2 * depth + 1
    }
}

struct Acc<'a> {
    set: &'a TrainSet,
    bufs: HashMap<&'a str, Vec<f64>>,
}

impl<'a> Acc<'a> {
    fn new(set: &'a TrainSet) -> Self {
        let bufs = set
            .entries()
            .iter()
            .map(|e| (e.name.as_str(), vec![0.0; e.scalars()]))
            .collect();
        Acc { set, bufs }
    }

    fn has(&self, name: &str) -> bool {
        self.set.contains(name)
    }

    fn any(&self, names: &[String]) -> bool {
        names.iter().any(|n| self.has(n))
    }

    /// Full-tensor buffer for a trainable name.
    fn buf(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.bufs.get_mut(name)
    }

    /// `dW += xᵀ·dy`, restricted to the selected columns when the entry is masked.
    fn weight(&mut self, name: &str, x: &[f64], dy: &[f64], rows: usize, din: usize, dout: usize) {
        let Some(sel) = self.set.selection(name) else { return };
        let buf = self.bufs.get_mut(name).expect("buffer for trainable entry");
        match sel {
            Selection::Full => kernels::matmul_at_b_acc(x, dy, buf, rows, din, dout),
            Selection::Columns(cols) => {
                kernels::matmul_at_b_cols_acc(x, dy, buf, rows, din, dout, cols)
            }
        }
    }

    fn bias(&mut self, name: &str, dy: &[f64]) {
        if let Some(buf) = self.bufs.get_mut(name) {
            kernels::col_sum_acc(dy, buf);
        }
    }

    /// `d(scale) += Σ_rows x ⊙ dy`.
    fn scale(&mut self, name: &str, x: &[f64], dy: &[f64]) {
        if let Some(buf) = self.bufs.get_mut(name) {
            let d = buf.len();
            for (xr, dr) in x.chunks_exact(d).zip(dy.chunks_exact(d)) {
                for ((g, a), b) in buf.iter_mut().zip(xr).zip(dr) {
                    *g += a * b;
                }
            }
        }
    }

    fn finish(mut self) -> Result<GradSet> {
        let mut out = Vec::with_capacity(self.set.entries().len());
        for e in self.set.entries() {
            let data = self.bufs.remove(e.name.as_str()).expect("buffer present");
            out.push((e.name.clone(), Tensor::new(e.grad_shape(), data)?));
        }
        Ok(GradSet::new(out))
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (batch, classes) = logits.dims2();
    if labels.len() != batch {
        return Err(Error::data(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(Error::data(format!(
            "label {y} at batch position {i} outside 0..{classes}"
        )));
    }
    let mut grad = logits.clone();
    let mut total = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let row = &mut grad.data_mut()[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[y];
        kernels::softmax_in_place(row);
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v /= batch as f64;
        }
    }
    Ok((total / batch as f64, grad))
}

/// Mean cross-entropy over the batch plus exact gradients for every entry
/// of `set` (and nothing else).
pub fn loss_and_backward(
    images: &[Tensor],
    labels: &[usize],
    params: &ViTParams,
    cfg: &ViTConfig,
    set: &TrainSet,
) -> Result<(f64, GradSet)> {
    let (logits, cache) = forward(images, params, cfg)?;
    let (loss, dlogits) = cross_entropy(&logits, labels)?;
    let grads = backward(&cache, &dlogits, params, cfg, set)?;
    Ok((loss, grads))
}

/// Loss only, through the same forward path.
pub fn loss(images: &[Tensor], labels: &[usize], params: &ViTParams, cfg: &ViTConfig) -> Result<f64> {
    let (logits, _) = forward(images, params, cfg)?;
    cross_entropy(&logits, labels).map(|(l, _)| l)
}

pub fn backward(
    cache: &ForwardCache,
    dlogits: &Tensor,
    params: &ViTParams,
    cfg: &ViTConfig,
    set: &TrainSet,
) -> Result<GradSet> {
    let mut acc = Acc::new(set);
    for e in set.entries() {
        if params.get(&e.name).map(|t| t.shape()) != Some(e.shape.as_slice()) {
            return Err(Error::Internal(format!(
                "trainable {} does not match the parameter set",
                e.name
            )));
        }
    }
    let Some(lowest) = set.entries().iter().map(|e| position(&e.name, cfg.depth)).min() else {
        return acc.finish();
    };

    let batch = cache.batch;
    let d = cfg.embed_dim;
    let t = cfg.tokens();
    let rows = batch * t;
    let classes = cfg.num_classes;
    let top = 2 * cfg.depth + 1;

    // Head.
    let x_last = cache.head_inputs.last().expect("head input");
    acc.weight("head.w_pred", x_last, dlogits.data(), batch, d, classes);
    acc.bias("head.b_pred", dlogits.data());
    let hidden = params.head_hidden.len();
    let head_deeper = lowest < top
        || (0..hidden).any(|i| acc.has(&format!("head_mlp.{i}.weight")) || acc.has(&format!("head_mlp.{i}.bias")))
        || acc.has("final_ln.gamma")
        || acc.has("final_ln.beta");
    if !head_deeper {
        return acc.finish();
    }
    let mut dx = vec![0.0; batch * d];
    kernels::matmul_a_bt(dlogits.data(), params.w_pred.data(), &mut dx, batch, classes, d);
    for i in (0..hidden).rev() {
        let layer = &params.head_hidden[i];
        let pre = &cache.head_pre[i];
        let dpre: Vec<f64> = dx.iter().zip(pre).map(|(g, &p)| g * kernels::gelu_grad(p)).collect();
        acc.weight(&format!("head_mlp.{i}.weight"), &cache.head_inputs[i], &dpre, batch, d, d);
        acc.bias(&format!("head_mlp.{i}.bias"), &dpre);
        kernels::matmul_a_bt(&dpre, layer.weight.data(), &mut dx, batch, d, d);
    }
    let mut dcls = vec![0.0; batch * d];
    {
        let (dg, db) = split_two(&mut acc, "final_ln.gamma", "final_ln.beta");
        kernels::layernorm_backward(
            &dx,
            &cache.final_xhat,
            &cache.final_rstd,
            params.final_ln_gamma.data(),
            d,
            dg,
            db,
            (lowest < top).then_some(dcls.as_mut_slice()),
        );
    }
    if lowest >= top {
        return acc.finish();
    }

    let mut dz = vec![0.0; rows * d];
    for b in 0..batch {
        dz[b * t * d..(b * t + 1) * d].copy_from_slice(&dcls[b * d..(b + 1) * d]);
    }

    for l in (0..cfg.depth).rev() {
        let bp = &params.blocks[l];
        let bc = &cache.blocks[l];
        let mlp_pos = 2 * l + 2;
        if lowest > mlp_pos {
            return acc.finish();
        }
        mlp_backward(&mut acc, &mut dz, l, bp, &bc.mlp, cfg, rows, lowest < mlp_pos);
        let attn_pos = 2 * l + 1;
        if lowest > attn_pos {
            return acc.finish();
        }
        attn_backward(&mut acc, &mut dz, l, bp, &bc.attn, cfg, batch, lowest < attn_pos);
    }

    if lowest == 0 {
        embedding_backward(&mut acc, &dz, cache, cfg);
    }
    acc.finish()
}

fn split_two<'s>(acc: &'s mut Acc<'_>, a: &str, b: &str) -> (Option<&'s mut [f64]>, Option<&'s mut [f64]>) {
    let mut first = None;
    let mut second = None;
    for (name, buf) in acc.bufs.iter_mut() {
        if *name == a {
            first = Some(buf.as_mut_slice());
        } else if *name == b {
            second = Some(buf.as_mut_slice());
        }
    }
    (first, second)
}

/// Multiplies the residual-branch gradient by LayerScale, accumulating the
/// scale's own gradient.
fn through_layerscale(acc: &mut Acc<'_>, name: &str, ls: Option<&Tensor>, branch: &[f64], dz: &[f64]) -> Vec<f64> {
    match ls {
        Some(ls) => {
            acc.scale(name, branch, dz);
            let d = ls.numel();
            let mut out = dz.to_vec();
            for row in out.chunks_exact_mut(d) {
                for (v, s) in row.iter_mut().zip(ls.data()) {
                    *v *= s;
                }
            }
            out
        }
        None => dz.to_vec(),
    }
}

#[allow(clippy::too_many_arguments)]
fn mlp_backward(
    acc: &mut Acc<'_>,
    dz: &mut [f64],
    l: usize,
    bp: &BlockParams,
    mc: &MlpCache,
    cfg: &ViTConfig,
    rows: usize,
    needs_input: bool,
) {
    let d = cfg.embed_dim;
    let hidden = cfg.mlp_hidden();
    let p = |s: &str| format!("blocks.{l}.{s}");

    let dm = through_layerscale(acc, &p("ls2"), bp.ls2.as_ref(), &mc.out, dz);
    acc.bias(&p("mlp.b_fc2"), &dm);
    acc.weight(&p("mlp.w_fc2"), &mc.act, &dm, rows, hidden, d);

    let ln_names = [p("ln2.gamma"), p("ln2.beta")];
    let fc1_names = [p("mlp.w_fc1"), p("mlp.b_fc1")];
    let ln_trainable = acc.any(&ln_names);
    if !(needs_input || ln_trainable || acc.any(&fc1_names)) {
        return;
    }
    let mut dact = vec![0.0; rows * hidden];
    kernels::matmul_a_bt(&dm, bp.w_fc2.data(), &mut dact, rows, d, hidden);
    let dpre: Vec<f64> = dact
        .iter()
        .zip(&mc.pre)
        .map(|(g, &x)| g * kernels::gelu_grad(x))
        .collect();
    acc.bias(&p("mlp.b_fc1"), &dpre);
    acc.weight(&p("mlp.w_fc1"), &mc.u, &dpre, rows, d, hidden);
    if !(needs_input || ln_trainable) {
        return;
    }
    let mut du = vec![0.0; rows * d];
    kernels::matmul_a_bt(&dpre, bp.w_fc1.data(), &mut du, rows, hidden, d);
    ln_backward_into(acc, &ln_names, &du, &mc.xhat, &mc.rstd, &bp.ln2_gamma, d, dz, needs_input);
}

#[allow(clippy::too_many_arguments)]
fn ln_backward_into(
    acc: &mut Acc<'_>,
    names: &[String; 2],
    du: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gamma: &Tensor,
    d: usize,
    dz: &mut [f64],
    needs_input: bool,
) {
    let mut dx = needs_input.then(|| vec![0.0; du.len()]);
    {
        let (dg, db) = split_two(acc, &names[0], &names[1]);
        kernels::layernorm_backward(du, xhat, rstd, gamma.data(), d, dg, db, dx.as_deref_mut());
    }
    if let Some(dx) = dx {
        for (a, b) in dz.iter_mut().zip(&dx) {
            *a += b;
        }
    }
}

/// Backward through an adapter pair given the gradient `dy` of the adapted
/// projection's output. Accumulates `dA`, `dB` and, when requested, the
/// adapter's contribution to the input gradient.
#[allow(clippy::too_many_arguments)]
fn lora_backward(
    acc: &mut Acc<'_>,
    l: usize,
    target: LoraTarget,
    a: &Tensor,
    b: &Tensor,
    scale: f64,
    x: &[f64],
    xa: &[f64],
    dy: &[f64],
    rows: usize,
    dx: Option<&mut [f64]>,
) {
    let (din, rank) = (a.shape()[0], a.shape()[1]);
    let dout = b.shape()[1];
    let tag = target.tag();
    let a_name = format!("blocks.{l}.attn.lora_{tag}.a");
    let b_name = format!("blocks.{l}.attn.lora_{tag}.b");
    let dys: Vec<f64> = dy.iter().map(|g| g * scale).collect();
    acc.weight(&b_name, xa, &dys, rows, rank, dout);
    if !acc.has(&a_name) && dx.is_none() {
        return;
    }
    let mut dxa = vec![0.0; rows * rank];
    kernels::matmul_a_bt(&dys, b.data(), &mut dxa, rows, dout, rank);
    acc.weight(&a_name, x, &dxa, rows, din, rank);
    if let Some(dx) = dx {
        let mut extra = vec![0.0; rows * din];
        kernels::matmul_a_bt(&dxa, a.data(), &mut extra, rows, rank, din);
        for (o, e) in dx.iter_mut().zip(&extra) {
            *o += e;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attn_backward(
    acc: &mut Acc<'_>,
    dz: &mut [f64],
    l: usize,
    bp: &BlockParams,
    ac: &AttnCache,
    cfg: &ViTConfig,
    batch: usize,
    needs_input: bool,
) {
    let d = cfg.embed_dim;
    let t = cfg.tokens();
    let h = cfg.num_heads;
    let dh = cfg.head_dim();
    let rows = batch * t;
    let lora_scale = cfg.lora.as_ref().map_or(0.0, |c| c.scale());
    let p = |s: &str| format!("blocks.{l}.{s}");

    let dproj = through_layerscale(acc, &p("ls1"), bp.ls1.as_ref(), &ac.proj, dz);
    acc.bias(&p("attn.b_o"), &dproj);
    acc.weight(&p("attn.w_o"), &ac.concat, &dproj, rows, d, d);

    let ln_names = [p("ln1.gamma"), p("ln1.beta")];
    let qkv_names: Vec<String> = ["w_q", "b_q", "w_k", "b_k", "w_v", "b_v"]
        .iter()
        .map(|s| p(&format!("attn.{s}")))
        .collect();
    let lora_qkv_trainable = bp
        .lora
        .iter()
        .filter(|pair| pair.target != LoraTarget::WO)
        .any(|pair| {
            let tag = pair.target.tag();
            acc.has(&p(&format!("attn.lora_{tag}.a"))) || acc.has(&p(&format!("attn.lora_{tag}.b")))
        });
    let ln_trainable = acc.any(&ln_names);
    let deep = needs_input || ln_trainable || acc.any(&qkv_names) || lora_qkv_trainable;

    let mut dconcat = deep.then(|| {
        let mut dc = vec![0.0; rows * d];
        kernels::matmul_a_bt(&dproj, bp.w_o.data(), &mut dc, rows, d, d);
        dc
    });
    for (slot, pair) in bp.lora.iter().enumerate() {
        if pair.target == LoraTarget::WO {
            lora_backward(
                acc,
                l,
                pair.target,
                &pair.a,
                &pair.b,
                lora_scale,
                &ac.concat,
                &ac.lora_xa[slot],
                &dproj,
                rows,
                dconcat.as_deref_mut(),
            );
        }
    }
    let Some(dconcat) = dconcat else { return };

    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; rows * d];
    let mut dk = vec![0.0; rows * d];
    let mut dv = vec![0.0; rows * d];
    let mut da = vec![0.0; t * t];
    for b in 0..batch {
        for head in 0..h {
            let off = head * dh;
            let a = &ac.probs[(b * h + head) * t * t..(b * h + head + 1) * t * t];
            let row = |i: usize| (b * t + i) * d + off;
            for i in 0..t {
                let dhi = &dconcat[row(i)..row(i) + dh];
                for j in 0..t {
                    let vj = &ac.v[row(j)..row(j) + dh];
                    let mut s = 0.0;
                    for (x, y) in dhi.iter().zip(vj) {
                        s += x * y;
                    }
                    da[i * t + j] = s;
                }
            }
            for j in 0..t {
                for i in 0..t {
                    let w = a[i * t + j];
                    let (src, dst) = (row(i), row(j));
                    for e in 0..dh {
                        dv[dst + e] += w * dconcat[src + e];
                    }
                }
            }
            for i in 0..t {
                let ar = &a[i * t..(i + 1) * t];
                let dar = &mut da[i * t..(i + 1) * t];
                let dot: f64 = ar.iter().zip(dar.iter()).map(|(x, y)| x * y).sum();
                for (g, &w) in dar.iter_mut().zip(ar) {
                    *g = w * (*g - dot) * scale;
                }
            }
            for i in 0..t {
                for j in 0..t {
                    let g = da[i * t + j];
                    let (ri, rj) = (row(i), row(j));
                    for e in 0..dh {
                        dq[ri + e] += g * ac.k[rj + e];
                        dk[rj + e] += g * ac.q[ri + e];
                    }
                }
            }
        }
    }

    for (w, bname, dy) in [("attn.w_q", "attn.b_q", &dq), ("attn.w_k", "attn.b_k", &dk), ("attn.w_v", "attn.b_v", &dv)] {
        acc.bias(&p(bname), dy);
        acc.weight(&p(w), &ac.u, dy, rows, d, d);
    }
    let want_du = needs_input || ln_trainable;
    let mut du = want_du.then(|| {
        let mut du = vec![0.0; rows * d];
        let mut tmp = vec![0.0; rows * d];
        for (dy, w) in [(&dq, &bp.w_q), (&dk, &bp.w_k), (&dv, &bp.w_v)] {
            kernels::matmul_a_bt(dy, w.data(), &mut tmp, rows, d, d);
            for (o, v) in du.iter_mut().zip(&tmp) {
                *o += v;
            }
        }
        du
    });
    for (slot, pair) in bp.lora.iter().enumerate() {
        let dy = match pair.target {
            LoraTarget::WQ => &dq,
            LoraTarget::WK => &dk,
            LoraTarget::WV => &dv,
            LoraTarget::WO => continue,
        };
        lora_backward(
            acc,
            l,
            pair.target,
            &pair.a,
            &pair.b,
            lora_scale,
            &ac.u,
            &ac.lora_xa[slot],
            dy,
            rows,
            du.as_deref_mut(),
        );
    }
    if let Some(du) = du {
        ln_backward_into(acc, &ln_names, &du, &ac.xhat, &ac.rstd, &bp.ln1_gamma, d, dz, needs_input);
    }
}

fn embedding_backward(acc: &mut Acc<'_>, dz: &[f64], cache: &ForwardCache, cfg: &ViTConfig) {
    let d = cfg.embed_dim;
    let t = cfg.tokens();
    let n = cfg.num_patches();
    let batch = cache.batch;
    if let Some(g) = acc.buf("pos_embed") {
        for b in 0..batch {
            for (gv, v) in g.iter_mut().zip(&dz[b * t * d..(b + 1) * t * d]) {
                *gv += v;
            }
        }
    }
    if let Some(g) = acc.buf("cls_token") {
        for b in 0..batch {
            for (gv, v) in g.iter_mut().zip(&dz[b * t * d..(b * t + 1) * d]) {
                *gv += v;
            }
        }
    }
    if acc.has("patch_embed.weight") || acc.has("patch_embed.bias") {
        let mut de = Vec::with_capacity(batch * n * d);
        for b in 0..batch {
            de.extend_from_slice(&dz[(b * t + 1) * d..(b + 1) * t * d]);
        }
        acc.weight("patch_embed.weight", &cache.patches, &de, batch * n, cfg.patch_dim(), d);
        acc.bias("patch_embed.bias", &de);
    }
}
