//! Forward and backward passes over a subset of token slots.
//!
//! Keys at MISSING slots are masked for every query, so dropping those
//! tokens from the sequence leaves every other output bit-identical. Training
//! runs on the non-missing slots only; the full `L`-token pass is the special
//! case where the subset is every slot.

use rand::Rng;

use super::params::{BlockParams, ModelConfig, ModelParams};
use crate::data::{CellState, MaskPlan, PatientRow};
use crate::error::{Error, Result};
use crate::math::{
    attention_backward, attention_forward, gelu_backward, gelu_forward, layer_norm, layer_norm_backward, linear,
    linear_backward, BoolMatrix, LayerNormCache, Matrix,
};
use crate::rng::SplitMix64;

/// Input tokens `z₀ = x_emb + P` for the slots in `subset`.
///
/// OBSERVED cells embed as `value · w_s + b_s`, MASKED cells as the mask
/// token, MISSING cells as the all-zero sentinel.
pub fn encode_subset(row: &PatientRow, plan: &MaskPlan, params: &ModelParams, subset: &[usize]) -> Result<Matrix> {
    let l = params.pos.rows();
    if plan.len() != l || row.n_features() * 4 != l {
        return Err(Error::dim(format!(
            "encode: plan has {} slots, row {} features, model expects {l} slots",
            plan.len(),
            row.n_features()
        )));
    }
    let d = params.pos.cols();
    let mut z = Matrix::zeros(subset.len(), d);
    for (i, &s) in subset.iter().enumerate() {
        let out = z.row_mut(i);
        match plan.cells[s] {
            CellState::Observed => {
                let x = row
                    .cell(s)
                    .ok_or_else(|| Error::dim(format!("slot {s} marked observed but has no value")))?;
                let (w, b) = (params.value_weight.row(s), params.value_bias.row(s));
                for j in 0..d {
                    out[j] = x * w[j] + b[j];
                }
            }
            CellState::Masked => out.copy_from_slice(params.mask_token.row(0)),
            CellState::Missing => {}
        }
        for (o, p) in out.iter_mut().zip(params.pos.row(s)) {
            *o += p;
        }
    }
    Ok(z)
}

/// Full-length input encoding, `L × d`.
pub fn encode_input(row: &PatientRow, plan: &MaskPlan, params: &ModelParams) -> Result<Matrix> {
    let all: Vec<usize> = (0..plan.len()).collect();
    encode_subset(row, plan, params, &all)
}

/// Key-wise mask: column `j` is false when slot `j` is MISSING; the diagonal
/// is always true.
pub fn build_attention_mask(plan: &MaskPlan) -> BoolMatrix {
    let all: Vec<usize> = (0..plan.len()).collect();
    subset_mask(plan, &all)
}

fn subset_mask(plan: &MaskPlan, subset: &[usize]) -> BoolMatrix {
    let n = subset.len();
    let mut m = BoolMatrix::filled(n, n, true);
    for (j, &s) in subset.iter().enumerate() {
        if plan.cells[s] == CellState::Missing {
            for i in 0..n {
                m.set(i, j, i == j);
            }
        }
    }
    m
}

/// Slots that are not MISSING, plus `extra`, in ascending order.
pub fn active_slots(plan: &MaskPlan, extra: &[usize]) -> Vec<usize> {
    let mut v: Vec<usize> = (0..plan.len())
        .filter(|&s| plan.cells[s] != CellState::Missing || extra.contains(&s))
        .collect();
    v.dedup();
    v
}

struct BlockCache {
    ln1: LayerNormCache,
    a: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    ctx: Matrix,
    drop1: Option<Matrix>,
    ln2: LayerNormCache,
    b: Matrix,
    f1: Matrix,
    g: Matrix,
    drop2: Option<Matrix>,
}

/// Cached activations of one forward pass.
pub struct Trace {
    pub subset: Vec<usize>,
    pub preds: Vec<f64>,
    enc: Vec<BlockCache>,
    enc_ln: LayerNormCache,
    dec: Vec<BlockCache>,
    dec_ln: LayerNormCache,
    h: Matrix,
}

fn head_slice(m: &Matrix, h: usize, dk: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), dk);
    for i in 0..m.rows() {
        out.row_mut(i).copy_from_slice(&m.row(i)[h * dk..(h + 1) * dk]);
    }
    out
}

fn put_head(dst: &mut Matrix, src: &Matrix, h: usize, dk: usize) {
    for i in 0..src.rows() {
        dst.row_mut(i)[h * dk..(h + 1) * dk].copy_from_slice(src.row(i));
    }
}

fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut SplitMix64) -> Matrix {
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

fn mul_assign(x: &mut Matrix, m: &Matrix) {
    for (a, b) in x.data_mut().iter_mut().zip(m.data()) {
        *a *= b;
    }
}

fn block_forward(
    p: &BlockParams,
    x: &Matrix,
    mask: &BoolMatrix,
    n_heads: usize,
    dropout: &mut Option<(f64, &mut SplitMix64)>,
) -> Result<(Matrix, BlockCache)> {
    let d = x.cols();
    let dk = d / n_heads;
    let (a, ln1) = layer_norm(x, p.ln1_gamma.data(), p.ln1_beta.data());
    let q = linear(&a, &p.w_q, p.b_q.data());
    let k = linear(&a, &p.w_k, p.b_k.data());
    let v = linear(&a, &p.w_v, p.b_v.data());
    let mut ctx = Matrix::zeros(x.rows(), d);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (o, pr) = attention_forward(
            &head_slice(&q, h, dk),
            &head_slice(&k, h, dk),
            &head_slice(&v, h, dk),
            Some(mask),
        )?;
        put_head(&mut ctx, &o, h, dk);
        probs.push(pr);
    }
    let mut attn = linear(&ctx, &p.w_o, p.b_o.data());
    let drop1 = dropout.as_mut().map(|(r, rng)| dropout_mask(attn.rows(), d, *r, rng));
    if let Some(m) = &drop1 {
        mul_assign(&mut attn, m);
    }
    let mut hdn = x.clone();
    hdn.add_assign(&attn);
    let (b, ln2) = layer_norm(&hdn, p.ln2_gamma.data(), p.ln2_beta.data());
    let f1 = linear(&b, &p.w_ff1, p.b_ff1.data());
    let g = gelu_forward(&f1);
    let mut ff = linear(&g, &p.w_ff2, p.b_ff2.data());
    let drop2 = dropout.as_mut().map(|(r, rng)| dropout_mask(ff.rows(), d, *r, rng));
    if let Some(m) = &drop2 {
        mul_assign(&mut ff, m);
    }
    hdn.add_assign(&ff);
    let cache = BlockCache {
        ln1,
        a,
        q,
        k,
        v,
        probs,
        ctx,
        drop1,
        ln2,
        b,
        f1,
        g,
        drop2,
    };
    Ok((hdn, cache))
}

fn add_vec(dst: &mut Matrix, src: &[f64]) {
    for (a, b) in dst.data_mut().iter_mut().zip(src) {
        *a += b;
    }
}

fn block_backward(p: &BlockParams, c: &BlockCache, d_out: &Matrix, g: &mut BlockParams, n_heads: usize) -> Matrix {
    let d = d_out.cols();
    let dk = d / n_heads;
    // MLP branch
    let mut d_ff = d_out.clone();
    if let Some(m) = &c.drop2 {
        mul_assign(&mut d_ff, m);
    }
    let d_g = linear_backward(&c.g, &p.w_ff2, &d_ff, &mut g.w_ff2, g.b_ff2.data_mut());
    let d_f1 = gelu_backward(&c.f1, &d_g);
    let d_b = linear_backward(&c.b, &p.w_ff1, &d_f1, &mut g.w_ff1, g.b_ff1.data_mut());
    let (d_hln, dg2, db2) = layer_norm_backward(&d_b, &c.ln2, p.ln2_gamma.data());
    add_vec(&mut g.ln2_gamma, &dg2);
    add_vec(&mut g.ln2_beta, &db2);
    let mut d_h = d_out.clone();
    d_h.add_assign(&d_hln);
    // attention branch
    let mut d_attn = d_h.clone();
    if let Some(m) = &c.drop1 {
        mul_assign(&mut d_attn, m);
    }
    let d_ctx = linear_backward(&c.ctx, &p.w_o, &d_attn, &mut g.w_o, g.b_o.data_mut());
    let mut d_q = Matrix::zeros(c.q.rows(), d);
    let mut d_k = Matrix::zeros(c.k.rows(), d);
    let mut d_v = Matrix::zeros(c.v.rows(), d);
    for h in 0..n_heads {
        let (dq, dkk, dv) = attention_backward(
            &head_slice(&c.q, h, dk),
            &head_slice(&c.k, h, dk),
            &head_slice(&c.v, h, dk),
            &c.probs[h],
            &head_slice(&d_ctx, h, dk),
        );
        put_head(&mut d_q, &dq, h, dk);
        put_head(&mut d_k, &dkk, h, dk);
        put_head(&mut d_v, &dv, h, dk);
    }
    let mut d_a = linear_backward(&c.a, &p.w_q, &d_q, &mut g.w_q, g.b_q.data_mut());
    d_a.add_assign(&linear_backward(&c.a, &p.w_k, &d_k, &mut g.w_k, g.b_k.data_mut()));
    d_a.add_assign(&linear_backward(&c.a, &p.w_v, &d_v, &mut g.w_v, g.b_v.data_mut()));
    let (d_xln, dg1, db1) = layer_norm_backward(&d_a, &c.ln1, p.ln1_gamma.data());
    add_vec(&mut g.ln1_gamma, &dg1);
    add_vec(&mut g.ln1_beta, &db1);
    d_h.add_assign(&d_xln);
    d_h
}

/// Runs the model on `subset` (ascending slot indices). `dropout_rng` is
/// consulted only when `cfg.dropout_rate > 0`.
pub fn forward_subset(
    row: &PatientRow,
    plan: &MaskPlan,
    params: &ModelParams,
    cfg: &ModelConfig,
    subset: &[usize],
    dropout_rng: Option<&mut SplitMix64>,
) -> Result<Trace> {
    if subset.is_empty() {
        return Err(Error::FullyMaskedRow { row: 0 });
    }
    let x0 = encode_subset(row, plan, params, subset)?;
    let mask = subset_mask(plan, subset);
    let mut dropout = match dropout_rng {
        Some(rng) if cfg.dropout_rate > 0.0 => Some((cfg.dropout_rate, rng)),
        _ => None,
    };
    let mut x = x0;
    let mut enc = Vec::with_capacity(params.encoder.len());
    for b in &params.encoder {
        let (y, c) = block_forward(b, &x, &mask, cfg.n_heads, &mut dropout)?;
        enc.push(c);
        x = y;
    }
    let (mut x, enc_ln) = layer_norm(&x, params.enc_norm_gamma.data(), params.enc_norm_beta.data());
    let mut dec = Vec::with_capacity(params.decoder.len());
    for b in &params.decoder {
        let (y, c) = block_forward(b, &x, &mask, cfg.n_heads, &mut dropout)?;
        dec.push(c);
        x = y;
    }
    let (h, dec_ln) = layer_norm(&x, params.dec_norm_gamma.data(), params.dec_norm_beta.data());
    let preds = subset
        .iter()
        .enumerate()
        .map(|(i, &s)| crate::math::dot(h.row(i), params.head_weight.row(s)) + params.head_bias.get(0, s))
        .collect();
    Ok(Trace {
        subset: subset.to_vec(),
        preds,
        enc,
        enc_ln,
        dec,
        dec_ln,
        h,
    })
}

/// Predictions for all `L` slots in normalized space.
pub fn forward(row: &PatientRow, plan: &MaskPlan, params: &ModelParams, cfg: &ModelConfig) -> Result<Vec<f64>> {
    let all: Vec<usize> = (0..plan.len()).collect();
    Ok(forward_subset(row, plan, params, cfg, &all, None)?.preds)
}

/// Accumulates parameter gradients given `d_preds` (one per subset slot).
/// Returns the gradient with respect to the input tokens `z₀`.
pub fn backward(
    trace: &Trace,
    row: &PatientRow,
    plan: &MaskPlan,
    params: &ModelParams,
    cfg: &ModelConfig,
    d_preds: &[f64],
    grads: &mut ModelParams,
) -> Matrix {
    let d = params.pos.cols();
    let mut d_h = Matrix::zeros(trace.subset.len(), d);
    for (i, &s) in trace.subset.iter().enumerate() {
        let gp = d_preds[i];
        if gp == 0.0 {
            continue;
        }
        crate::math::axpy(gp, params.head_weight.row(s), d_h.row_mut(i));
        crate::math::axpy(gp, trace.h.row(i), grads.head_weight.row_mut(s));
        let hb = grads.head_bias.get(0, s);
        grads.head_bias.set(0, s, hb + gp);
    }
    let (mut dx, dg, db) = layer_norm_backward(&d_h, &trace.dec_ln, params.dec_norm_gamma.data());
    add_vec(&mut grads.dec_norm_gamma, &dg);
    add_vec(&mut grads.dec_norm_beta, &db);
    for (l, c) in trace.dec.iter().enumerate().rev() {
        dx = block_backward(&params.decoder[l], c, &dx, &mut grads.decoder[l], cfg.n_heads);
    }
    let (mut dx, dg, db) = layer_norm_backward(&dx, &trace.enc_ln, params.enc_norm_gamma.data());
    add_vec(&mut grads.enc_norm_gamma, &dg);
    add_vec(&mut grads.enc_norm_beta, &db);
    for (l, c) in trace.enc.iter().enumerate().rev() {
        dx = block_backward(&params.encoder[l], c, &dx, &mut grads.encoder[l], cfg.n_heads);
    }
    for (i, &s) in trace.subset.iter().enumerate() {
        let g = dx.row(i);
        crate::math::axpy(1.0, g, grads.pos.row_mut(s));
        match plan.cells[s] {
            CellState::Observed => {
                let x = row.cell(s).unwrap_or(0.0);
                crate::math::axpy(x, g, grads.value_weight.row_mut(s));
                crate::math::axpy(1.0, g, grads.value_bias.row_mut(s));
            }
            CellState::Masked => crate::math::axpy(1.0, g, grads.mask_token.row_mut(0)),
            CellState::Missing => {}
        }
    }
    dx
}

/// Mean squared error over non-MISSING cells of a single row.
pub fn masked_loss(pred: &[f64], target: &[Option<f64>], plan: &MaskPlan) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != plan.len() {
        return Err(Error::dim("masked_loss: pred, target and plan lengths differ"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in 0..pred.len() {
        if plan.cells[s] == CellState::Missing {
            continue;
        }
        let t = target[s].ok_or_else(|| Error::dim(format!("masked_loss: slot {s} contributes but has no target")))?;
        sum += (pred[s] - t) * (pred[s] - t);
        n += 1;
    }
    if n == 0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(sum / n as f64)
}
