//! Pre-norm self-attention encoder with learned positions.
//!
//! Only the first output row feeds the scorer, so the last layer computes
//! queries, the feed-forward block and the final norm for the leading
//! `rows_out` rows only. Keys and values always cover the whole sequence.

use super::ops::{self, LnCache};
use super::params::{EncoderConfig, LayerLayout, Layout};
use crate::seed::Rng;
use crate::{Error, Result};

pub(crate) struct Dropout<'a> {
    pub p: f32,
    pub rng: &'a mut Rng,
}

impl Dropout<'_> {
    fn mask(&mut self, len: usize) -> Option<Vec<f32>> {
        (self.p > 0.0).then(|| ops::dropout_mask(len, self.p, self.rng))
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    rows: usize,
    ln1: LnCache,
    a1: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    probs: Vec<f32>,
    ctx: Vec<f32>,
    attn_mask: Option<Vec<f32>>,
    ln2: LnCache,
    a2: Vec<f32>,
    h_pre: Vec<f32>,
    h_act: Vec<f32>,
    ffn_mask: Option<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderCache {
    tokens: Vec<u32>,
    emb_mask: Option<Vec<f32>>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
}

pub(crate) struct Encoder<'a> {
    pub cfg: &'a EncoderConfig,
    pub layout: &'a Layout,
    pub params: &'a [f32],
}

impl Encoder<'_> {
    fn p(&self, r: &std::ops::Range<usize>) -> &[f32] {
        &self.params[r.clone()]
    }

    /// Encodes `tokens` and returns the first `rows_out` output rows after the
    /// final norm, flattened.
    pub fn forward(
        &self,
        tokens: &[u32],
        rows_out: usize,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<(Vec<f32>, EncoderCache)> {
        let len = tokens.len();
        if len == 0 {
            return Err(Error::Domain("cannot encode an empty token sequence".into()));
        }
        if len > self.cfg.max_positions {
            return Err(Error::SequenceTooLong {
                len,
                max: self.cfg.max_positions,
            });
        }
        let d = self.cfg.d_model;
        let vocab = self.layout.tok_emb.len() / d;
        let tok = self.p(&self.layout.tok_emb);
        let pos = self.p(&self.layout.pos_emb);
        let mut x = Vec::with_capacity(len * d);
        for (i, &t) in tokens.iter().enumerate() {
            let t = (t as usize).min(vocab - 1);
            x.extend(
                tok[t * d..(t + 1) * d]
                    .iter()
                    .zip(&pos[i * d..(i + 1) * d])
                    .map(|(a, b)| a + b),
            );
        }
        let emb_mask = dropout.as_deref_mut().and_then(|dr| dr.mask(x.len()));
        if let Some(m) = &emb_mask {
            ops::mul_in_place(&mut x, m);
        }

        let n_layers = self.layout.layers.len();
        let mut layers = Vec::with_capacity(n_layers);
        for (li, l) in self.layout.layers.iter().enumerate() {
            let rows = if li + 1 == n_layers { rows_out.min(len) } else { len };
            let (y, cache) = self.layer_forward(l, &x, rows, dropout.as_deref_mut());
            layers.push(cache);
            x = y;
        }
        let (out, lnf) = ops::layer_norm(&x, d, self.p(&self.layout.lnf_g), self.p(&self.layout.lnf_b));
        Ok((
            out,
            EncoderCache {
                tokens: tokens.to_vec(),
                emb_mask,
                layers,
                lnf,
            },
        ))
    }

    fn layer_forward(
        &self,
        l: &LayerLayout,
        x: &[f32],
        rows: usize,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> (Vec<f32>, LayerCache) {
        let d = self.cfg.d_model;
        let h = self.cfg.num_heads;
        let dh = d / h;
        let len = x.len() / d;
        let scale = 1.0 / (dh as f32).sqrt();

        let (a1, ln1) = ops::layer_norm(x, d, self.p(&l.ln1_g), self.p(&l.ln1_b));
        let q = ops::linear(&a1[..rows * d], rows, self.p(&l.wq), self.p(&l.bq), d);
        let k = ops::linear(&a1, len, self.p(&l.wk), self.p(&l.bk), d);
        let v = ops::linear(&a1, len, self.p(&l.wv), self.p(&l.bv), d);

        let mut probs = vec![0.0f32; h * rows * len];
        let mut ctx = vec![0.0f32; rows * d];
        for hh in 0..h {
            let off = hh * dh;
            for i in 0..rows {
                let qi = &q[i * d + off..i * d + off + dh];
                let pr = &mut probs[(hh * rows + i) * len..(hh * rows + i + 1) * len];
                for (j, s) in pr.iter_mut().enumerate() {
                    *s = ops::dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
                }
                ops::softmax_in_place(pr);
                let ci = &mut ctx[i * d + off..i * d + off + dh];
                for (j, &pj) in pr.iter().enumerate() {
                    for (c, vv) in ci.iter_mut().zip(&v[j * d + off..j * d + off + dh]) {
                        *c += pj * vv;
                    }
                }
            }
        }
        let mut attn_out = ops::linear(&ctx, rows, self.p(&l.wo), self.p(&l.bo), d);
        let attn_mask = dropout.as_deref_mut().and_then(|dr| dr.mask(attn_out.len()));
        if let Some(m) = &attn_mask {
            ops::mul_in_place(&mut attn_out, m);
        }
        let mut x_mid: Vec<f32> = x[..rows * d].to_vec();
        for (a, b) in x_mid.iter_mut().zip(&attn_out) {
            *a += b;
        }

        let f = self.cfg.ffn_dim;
        let (a2, ln2) = ops::layer_norm(&x_mid, d, self.p(&l.ln2_g), self.p(&l.ln2_b));
        let h_pre = ops::linear(&a2, rows, self.p(&l.w1), self.p(&l.b1), f);
        let h_act: Vec<f32> = h_pre.iter().map(|&z| ops::gelu(z)).collect();
        let mut ffn_out = ops::linear(&h_act, rows, self.p(&l.w2), self.p(&l.b2), d);
        let ffn_mask = dropout.and_then(|dr| dr.mask(ffn_out.len()));
        if let Some(m) = &ffn_mask {
            ops::mul_in_place(&mut ffn_out, m);
        }
        for (a, b) in x_mid.iter_mut().zip(&ffn_out) {
            *a += b;
        }
        (
            x_mid,
            LayerCache {
                rows,
                ln1,
                a1,
                q,
                k,
                v,
                probs,
                ctx,
                attn_mask,
                ln2,
                a2,
                h_pre,
                h_act,
                ffn_mask,
            },
        )
    }

    /// Accumulates parameter gradients for upstream gradient `d_out`
    /// (shape of the forward output) into `grads`.
    pub fn backward(&self, cache: &EncoderCache, d_out: &[f32], grads: &mut [f32]) {
        let d = self.cfg.d_model;
        let lay = self.layout;
        let mut dx = {
            let (dg, db) = grads_pair(grads, &lay.lnf_g, &lay.lnf_b);
            ops::layer_norm_backward(d_out, &cache.lnf, self.p(&lay.lnf_g), dg, db)
        };
        for (l, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            dx = self.layer_backward(l, lc, &dx, grads);
        }
        if let Some(m) = &cache.emb_mask {
            ops::mul_in_place(&mut dx, m);
        }
        let vocab = lay.tok_emb.len() / d;
        for (i, &t) in cache.tokens.iter().enumerate() {
            let t = (t as usize).min(vocab - 1);
            let row = &dx[i * d..(i + 1) * d];
            let te = lay.tok_emb.start + t * d;
            let pe = lay.pos_emb.start + i * d;
            for k in 0..d {
                grads[te + k] += row[k];
                grads[pe + k] += row[k];
            }
        }
    }

    fn layer_backward(&self, l: &LayerLayout, c: &LayerCache, dy: &[f32], grads: &mut [f32]) -> Vec<f32> {
        let d = self.cfg.d_model;
        let f = self.cfg.ffn_dim;
        let h = self.cfg.num_heads;
        let dh = d / h;
        let rows = c.rows;
        let len = c.a1.len() / d;
        let scale = 1.0 / (dh as f32).sqrt();

        // feed-forward branch
        let mut d_ffn = dy.to_vec();
        if let Some(m) = &c.ffn_mask {
            ops::mul_in_place(&mut d_ffn, m);
        }
        {
            let (dw, db) = grads_pair(grads, &l.w2, &l.b2);
            ops::linear_param_grad(&c.h_act, &d_ffn, rows, d, dw, db);
        }
        let mut dh_act = vec![0.0; rows * f];
        ops::linear_input_grad(&d_ffn, rows, self.p(&l.w2), d, &mut dh_act);
        for (g, &z) in dh_act.iter_mut().zip(&c.h_pre) {
            *g *= ops::gelu_grad(z);
        }
        {
            let (dw, db) = grads_pair(grads, &l.w1, &l.b1);
            ops::linear_param_grad(&c.a2, &dh_act, rows, f, dw, db);
        }
        let mut da2 = vec![0.0; rows * d];
        ops::linear_input_grad(&dh_act, rows, self.p(&l.w1), f, &mut da2);
        let mut dx_mid = {
            let (dg, db) = grads_pair(grads, &l.ln2_g, &l.ln2_b);
            ops::layer_norm_backward(&da2, &c.ln2, self.p(&l.ln2_g), dg, db)
        };
        for (a, b) in dx_mid.iter_mut().zip(dy) {
            *a += b;
        }

        // attention branch
        let mut dx_in = vec![0.0f32; len * d];
        dx_in[..rows * d].copy_from_slice(&dx_mid);
        let mut d_attn = dx_mid;
        if let Some(m) = &c.attn_mask {
            ops::mul_in_place(&mut d_attn, m);
        }
        {
            let (dw, db) = grads_pair(grads, &l.wo, &l.bo);
            ops::linear_param_grad(&c.ctx, &d_attn, rows, d, dw, db);
        }
        let mut dctx = vec![0.0; rows * d];
        ops::linear_input_grad(&d_attn, rows, self.p(&l.wo), d, &mut dctx);

        let mut dq = vec![0.0f32; rows * d];
        let mut dk = vec![0.0f32; len * d];
        let mut dv = vec![0.0f32; len * d];
        let mut dp = vec![0.0f32; len];
        for hh in 0..h {
            let off = hh * dh;
            for i in 0..rows {
                let pr = &c.probs[(hh * rows + i) * len..(hh * rows + i + 1) * len];
                let dci = &dctx[i * d + off..i * d + off + dh];
                for j in 0..len {
                    let vj = &c.v[j * d + off..j * d + off + dh];
                    dp[j] = ops::dot(dci, vj);
                    for (g, x) in dv[j * d + off..j * d + off + dh].iter_mut().zip(dci) {
                        *g += pr[j] * x;
                    }
                }
                let inner = ops::dot(pr, &dp);
                let qi = &c.q[i * d + off..i * d + off + dh];
                for j in 0..len {
                    let ds = pr[j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &c.k[j * d + off..j * d + off + dh];
                    for (g, x) in dq[i * d + off..i * d + off + dh].iter_mut().zip(kj) {
                        *g += ds * x;
                    }
                    for (g, x) in dk[j * d + off..j * d + off + dh].iter_mut().zip(qi) {
                        *g += ds * x;
                    }
                }
            }
        }
        let mut da1 = vec![0.0f32; len * d];
        {
            let (dw, db) = grads_pair(grads, &l.wq, &l.bq);
            ops::linear_param_grad(&c.a1[..rows * d], &dq, rows, d, dw, db);
        }
        ops::linear_input_grad(&dq, rows, self.p(&l.wq), d, &mut da1[..rows * d]);
        {
            let (dw, db) = grads_pair(grads, &l.wk, &l.bk);
            ops::linear_param_grad(&c.a1, &dk, len, d, dw, db);
        }
        ops::linear_input_grad(&dk, len, self.p(&l.wk), d, &mut da1);
        {
            let (dw, db) = grads_pair(grads, &l.wv, &l.bv);
            ops::linear_param_grad(&c.a1, &dv, len, d, dw, db);
        }
        ops::linear_input_grad(&dv, len, self.p(&l.wv), d, &mut da1);
        let dx_ln1 = {
            let (dg, db) = grads_pair(grads, &l.ln1_g, &l.ln1_b);
            ops::layer_norm_backward(&da1, &c.ln1, self.p(&l.ln1_g), dg, db)
        };
        for (a, b) in dx_in.iter_mut().zip(&dx_ln1) {
            *a += b;
        }
        dx_in
    }
}

/// Two disjoint mutable windows of the gradient buffer; `a` must precede `b`.
pub(crate) fn grads_pair<'g>(
    grads: &'g mut [f32],
    a: &std::ops::Range<usize>,
    b: &std::ops::Range<usize>,
) -> (&'g mut [f32], &'g mut [f32]) {
    assert!(a.end <= b.start, "parameter ranges out of order");
    let (lo, hi) = grads.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}
