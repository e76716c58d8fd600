//! Post-norm encoder-decoder Transformer with explicit reverse-mode passes.
//!
//! Sequences of a batch are processed one at a time; every layer keeps the
//! activations its backward pass needs in a cache struct.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ops::{
    self, add_assign, gemm, layer_norm, layer_norm_backward, linear, linear_backward,
    masked_softmax_row, LayerNormCache,
};
use super::params::{AttnIdx, FfIdx, GradStore, Layout, LnIdx, NamedTensor, ParameterStore};
use super::{Batch, ModelConfig, ModelError};
use crate::corpus::special::PAD;
use crate::rng;

/// Logits of shape `batch x len x vocab`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub batch: usize,
    pub len: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.len, self.vocab)
    }

    pub fn at(&self, b: usize, t: usize) -> &[f64] {
        let start = (b * self.len + t) * self.vocab;
        &self.data[start..start + self.vocab]
    }
}

/// Token-level loss of one batch: the mean is what gets optimized, the sum
/// is the summed negative log-likelihood used for objective bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossStats {
    pub mean: f64,
    pub sum: f64,
    pub tokens: usize,
}

struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    fn mask(&mut self, n: usize) -> Option<Vec<f64>> {
        let rng = self.rng.as_mut()?;
        let keep = 1.0 - self.rate;
        Some(
            (0..n)
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect(),
        )
    }
}

fn apply_mask(x: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        for (v, s) in x.iter_mut().zip(m) {
            *v *= s;
        }
    }
}

fn two_mut(t: &mut [NamedTensor], i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
    assert_ne!(i, j);
    if i < j {
        let (a, b) = t.split_at_mut(j);
        (&mut a[i].data, &mut b[0].data)
    } else {
        let (a, b) = t.split_at_mut(i);
        (&mut b[0].data, &mut a[j].data)
    }
}

fn head_cols(x: &[f64], rows: usize, d: usize, h: usize, dk: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * dk);
    for r in 0..rows {
        out.extend_from_slice(&x[r * d + h * dk..r * d + (h + 1) * dk]);
    }
    out
}

fn scatter_head(dst: &mut [f64], src: &[f64], rows: usize, d: usize, h: usize, dk: usize) {
    for r in 0..rows {
        dst[r * d + h * dk..r * d + (h + 1) * dk].copy_from_slice(&src[r * dk..(r + 1) * dk]);
    }
}

struct AttnCache {
    xq: Vec<f64>,
    xkv: Vec<f64>,
    tq: usize,
    tk: usize,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads x tq x tk`
    probs: Vec<f64>,
    ctx: Vec<f64>,
}

struct FfCache {
    x: Vec<f64>,
    hidden: Vec<f64>,
}

struct EncoderCache {
    attn: AttnCache,
    drop_attn: Option<Vec<f64>>,
    ln1: LayerNormCache,
    ff: FfCache,
    drop_ff: Option<Vec<f64>>,
    ln2: LayerNormCache,
}

struct DecoderCache {
    self_attn: AttnCache,
    drop_self: Option<Vec<f64>>,
    ln1: LayerNormCache,
    cross: AttnCache,
    drop_cross: Option<Vec<f64>>,
    ln2: LayerNormCache,
    ff: FfCache,
    drop_ff: Option<Vec<f64>>,
    ln3: LayerNormCache,
}

struct SeqCache {
    src: Vec<u32>,
    tgt: Vec<u32>,
    drop_src: Option<Vec<f64>>,
    encoder: Vec<EncoderCache>,
    drop_tgt: Option<Vec<f64>>,
    decoder: Vec<DecoderCache>,
    dec_out: Vec<f64>,
}

/// Read-only view of the weights for one forward/backward computation.
pub(crate) struct Net<'a> {
    p: &'a [NamedTensor],
    lay: Layout,
    cfg: &'a ModelConfig,
    pe: Vec<f64>,
}

impl<'a> Net<'a> {
    pub(crate) fn new(store: &'a ParameterStore, max_positions: usize) -> Self {
        Net {
            p: &store.tensors,
            lay: store.layout(),
            cfg: &store.config,
            pe: ops::sinusoidal_encoding(max_positions, store.config.d_model),
        }
    }

    fn w(&self, i: usize) -> &[f64] {
        &self.p[i].data
    }

    fn d(&self) -> usize {
        self.cfg.d_model
    }

    fn embed(&self, ids: &[u32]) -> Vec<f64> {
        let d = self.d();
        let scale = (d as f64).sqrt();
        let table = self.w(self.lay.embedding);
        let mut x = vec![0.0; ids.len() * d];
        for (pos, &id) in ids.iter().enumerate() {
            let row = &table[id as usize * d..(id as usize + 1) * d];
            for j in 0..d {
                x[pos * d + j] = row[j] * scale + self.pe[pos * d + j];
            }
        }
        x
    }

    fn embed_backward(&self, ids: &[u32], dx: &[f64], grads: &mut [NamedTensor]) {
        let d = self.d();
        let scale = (d as f64).sqrt();
        let table = &mut grads[self.lay.embedding].data;
        for (pos, &id) in ids.iter().enumerate() {
            let row = &mut table[id as usize * d..(id as usize + 1) * d];
            for j in 0..d {
                row[j] += scale * dx[pos * d + j];
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        a: &AttnIdx,
        xq: &[f64],
        tq: usize,
        xkv: &[f64],
        tk: usize,
        key_valid: &[bool],
        causal: bool,
    ) -> (Vec<f64>, AttnCache) {
        let d = self.d();
        let heads = self.cfg.n_heads;
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let q = linear(xq, tq, self.w(a.wq), self.w(a.bq));
        let k = linear(xkv, tk, self.w(a.wk), self.w(a.bk));
        let v = linear(xkv, tk, self.w(a.wv), self.w(a.bv));
        let mut probs = vec![0.0; heads * tq * tk];
        let mut ctx = vec![0.0; tq * d];
        let mut ctx_h = vec![0.0; tq * dk];
        for h in 0..heads {
            let qh = head_cols(&q, tq, d, h, dk);
            let kh = head_cols(&k, tk, d, h, dk);
            let vh = head_cols(&v, tk, d, h, dk);
            let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
            gemm(false, true, tq, tk, dk, scale, &qh, &kh, 0.0, p);
            for (i, row) in p.chunks_mut(tk).enumerate() {
                masked_softmax_row(row, |j| key_valid[j] && (!causal || j <= i));
            }
            gemm(false, false, tq, dk, tk, 1.0, p, &vh, 0.0, &mut ctx_h);
            scatter_head(&mut ctx, &ctx_h, tq, d, h, dk);
        }
        let out = linear(&ctx, tq, self.w(a.wo), self.w(a.bo));
        let cache = AttnCache {
            xq: xq.to_vec(),
            xkv: xkv.to_vec(),
            tq,
            tk,
            q,
            k,
            v,
            probs,
            ctx,
        };
        (out, cache)
    }

    /// Returns `(d xq, d xkv)`.
    fn attention_backward(
        &self,
        a: &AttnIdx,
        c: &AttnCache,
        dout: &[f64],
        grads: &mut [NamedTensor],
    ) -> (Vec<f64>, Vec<f64>) {
        let d = self.d();
        let heads = self.cfg.n_heads;
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (tq, tk) = (c.tq, c.tk);
        let dctx = {
            let (dw, db) = two_mut(grads, a.wo, a.bo);
            linear_backward(&c.ctx, dout, tq, self.w(a.wo), dw, db)
        };
        let mut dq = vec![0.0; tq * d];
        let mut dk_all = vec![0.0; tk * d];
        let mut dv = vec![0.0; tk * d];
        let mut dp = vec![0.0; tq * tk];
        let mut dvh = vec![0.0; tk * dk];
        let mut dqh = vec![0.0; tq * dk];
        let mut dkh = vec![0.0; tk * dk];
        for h in 0..heads {
            let qh = head_cols(&c.q, tq, d, h, dk);
            let kh = head_cols(&c.k, tk, d, h, dk);
            let vh = head_cols(&c.v, tk, d, h, dk);
            let dctx_h = head_cols(&dctx, tq, d, h, dk);
            let p = &c.probs[h * tq * tk..(h + 1) * tq * tk];
            gemm(false, true, tq, tk, dk, 1.0, &dctx_h, &vh, 0.0, &mut dp);
            gemm(true, false, tk, dk, tq, 1.0, p, &dctx_h, 0.0, &mut dvh);
            for (prow, dprow) in p.chunks(tk).zip(dp.chunks_mut(tk)) {
                let dot: f64 = prow.iter().zip(dprow.iter()).map(|(a, b)| a * b).sum();
                for (g, &pv) in dprow.iter_mut().zip(prow) {
                    *g = pv * (*g - dot);
                }
            }
            gemm(false, false, tq, dk, tk, scale, &dp, &kh, 0.0, &mut dqh);
            gemm(true, false, tk, dk, tq, scale, &dp, &qh, 0.0, &mut dkh);
            scatter_head(&mut dq, &dqh, tq, d, h, dk);
            scatter_head(&mut dk_all, &dkh, tk, d, h, dk);
            scatter_head(&mut dv, &dvh, tk, d, h, dk);
        }
        let dxq = {
            let (dw, db) = two_mut(grads, a.wq, a.bq);
            linear_backward(&c.xq, &dq, tq, self.w(a.wq), dw, db)
        };
        let mut dxkv = {
            let (dw, db) = two_mut(grads, a.wk, a.bk);
            linear_backward(&c.xkv, &dk_all, tk, self.w(a.wk), dw, db)
        };
        let dxv = {
            let (dw, db) = two_mut(grads, a.wv, a.bv);
            linear_backward(&c.xkv, &dv, tk, self.w(a.wv), dw, db)
        };
        add_assign(&mut dxkv, &dxv);
        (dxq, dxkv)
    }

    fn feed_forward(&self, f: &FfIdx, x: &[f64], rows: usize) -> (Vec<f64>, FfCache) {
        let mut hidden = linear(x, rows, self.w(f.w1), self.w(f.b1));
        for v in &mut hidden {
            *v = v.max(0.0);
        }
        let y = linear(&hidden, rows, self.w(f.w2), self.w(f.b2));
        (
            y,
            FfCache {
                x: x.to_vec(),
                hidden,
            },
        )
    }

    fn feed_forward_backward(
        &self,
        f: &FfIdx,
        c: &FfCache,
        dy: &[f64],
        grads: &mut [NamedTensor],
    ) -> Vec<f64> {
        let rows = dy.len() / self.d();
        let mut dh = {
            let (dw, db) = two_mut(grads, f.w2, f.b2);
            linear_backward(&c.hidden, dy, rows, self.w(f.w2), dw, db)
        };
        for (g, h) in dh.iter_mut().zip(&c.hidden) {
            if *h <= 0.0 {
                *g = 0.0;
            }
        }
        let (dw, db) = two_mut(grads, f.w1, f.b1);
        linear_backward(&c.x, &dh, rows, self.w(f.w1), dw, db)
    }

    fn norm(&self, l: &LnIdx, x: &[f64]) -> (Vec<f64>, LayerNormCache) {
        layer_norm(x, self.w(l.gain), self.w(l.bias))
    }

    fn norm_backward(
        &self,
        l: &LnIdx,
        c: &LayerNormCache,
        dy: &[f64],
        grads: &mut [NamedTensor],
    ) -> Vec<f64> {
        let (dg, db) = two_mut(grads, l.gain, l.bias);
        layer_norm_backward(c, dy, self.w(l.gain), dg, db)
    }

    fn encode(
        &self,
        src: &[u32],
        src_valid: &[bool],
        drop: &mut Dropout,
    ) -> (Vec<f64>, Option<Vec<f64>>, Vec<EncoderCache>) {
        let n = src.len();
        let mut x = self.embed(src);
        let drop_src = drop.mask(x.len());
        apply_mask(&mut x, &drop_src);
        let mut caches = Vec::with_capacity(self.lay.encoder.len());
        for layer in &self.lay.encoder {
            let (mut a, attn) = self.attention(&layer.self_attn, &x, n, &x, n, src_valid, false);
            let drop_attn = drop.mask(a.len());
            apply_mask(&mut a, &drop_attn);
            add_assign(&mut a, &x);
            let (h, ln1) = self.norm(&layer.ln1, &a);
            let (mut f, ff) = self.feed_forward(&layer.ff, &h, n);
            let drop_ff = drop.mask(f.len());
            apply_mask(&mut f, &drop_ff);
            add_assign(&mut f, &h);
            let (out, ln2) = self.norm(&layer.ln2, &f);
            x = out;
            caches.push(EncoderCache {
                attn,
                drop_attn,
                ln1,
                ff,
                drop_ff,
                ln2,
            });
        }
        (x, drop_src, caches)
    }

    fn decode(
        &self,
        memory: &[f64],
        src_valid: &[bool],
        tgt: &[u32],
        drop: &mut Dropout,
    ) -> (Vec<f64>, Option<Vec<f64>>, Vec<DecoderCache>) {
        let t = tgt.len();
        let s = src_valid.len();
        let tgt_valid: Vec<bool> = tgt.iter().map(|&id| id != PAD).collect();
        let mut y = self.embed(tgt);
        let drop_tgt = drop.mask(y.len());
        apply_mask(&mut y, &drop_tgt);
        let mut caches = Vec::with_capacity(self.lay.decoder.len());
        for layer in &self.lay.decoder {
            let (mut a, self_attn) =
                self.attention(&layer.self_attn, &y, t, &y, t, &tgt_valid, true);
            let drop_self = drop.mask(a.len());
            apply_mask(&mut a, &drop_self);
            add_assign(&mut a, &y);
            let (y1, ln1) = self.norm(&layer.ln1, &a);
            let (mut c, cross) =
                self.attention(&layer.cross_attn, &y1, t, memory, s, src_valid, false);
            let drop_cross = drop.mask(c.len());
            apply_mask(&mut c, &drop_cross);
            add_assign(&mut c, &y1);
            let (y2, ln2) = self.norm(&layer.ln2, &c);
            let (mut f, ff) = self.feed_forward(&layer.ff, &y2, t);
            let drop_ff = drop.mask(f.len());
            apply_mask(&mut f, &drop_ff);
            add_assign(&mut f, &y2);
            let (out, ln3) = self.norm(&layer.ln3, &f);
            y = out;
            caches.push(DecoderCache {
                self_attn,
                drop_self,
                ln1,
                cross,
                drop_cross,
                ln2,
                ff,
                drop_ff,
                ln3,
            });
        }
        (y, drop_tgt, caches)
    }

    /// `rows x vocab` logits from decoder states.
    fn project(&self, y: &[f64], rows: usize) -> Vec<f64> {
        let v = self.cfg.vocab_size;
        let d = self.d();
        let mut logits = vec![0.0; rows * v];
        match self.lay.output_weight {
            Some(w) => gemm(false, false, rows, v, d, 1.0, y, self.w(w), 0.0, &mut logits),
            None => gemm(
                false,
                true,
                rows,
                v,
                d,
                1.0,
                y,
                self.w(self.lay.embedding),
                0.0,
                &mut logits,
            ),
        }
        let bias = self.w(self.lay.output_bias);
        for row in logits.chunks_mut(v) {
            add_assign(row, bias);
        }
        logits
    }

    fn project_backward(&self, y: &[f64], dlogits: &[f64], grads: &mut [NamedTensor]) -> Vec<f64> {
        let v = self.cfg.vocab_size;
        let d = self.d();
        let rows = dlogits.len() / v;
        let db = &mut grads[self.lay.output_bias].data;
        for row in dlogits.chunks(v) {
            add_assign(db, row);
        }
        let mut dy = vec![0.0; rows * d];
        match self.lay.output_weight {
            Some(w) => {
                gemm(true, false, d, v, rows, 1.0, y, dlogits, 1.0, &mut grads[w].data);
                gemm(false, true, rows, d, v, 1.0, dlogits, self.w(w), 0.0, &mut dy);
            }
            None => {
                let e = self.lay.embedding;
                gemm(true, false, v, d, rows, 1.0, dlogits, y, 1.0, &mut grads[e].data);
                gemm(false, false, rows, d, v, 1.0, dlogits, self.w(e), 0.0, &mut dy);
            }
        }
        dy
    }

    fn forward_seq(
        &self,
        src: &[u32],
        src_valid: &[bool],
        tgt: &[u32],
        drop: &mut Dropout,
    ) -> (Vec<f64>, SeqCache) {
        let (memory, drop_src, encoder) = self.encode(src, src_valid, drop);
        let (dec_out, drop_tgt, decoder) = self.decode(&memory, src_valid, tgt, drop);
        let logits = self.project(&dec_out, tgt.len());
        let cache = SeqCache {
            src: src.to_vec(),
            tgt: tgt.to_vec(),
            drop_src,
            encoder,
            drop_tgt,
            decoder,
            dec_out,
        };
        (logits, cache)
    }

    fn backward_seq(&self, c: &SeqCache, dlogits: &[f64], grads: &mut [NamedTensor]) {
        let d = self.d();
        let mut dy = self.project_backward(&c.dec_out, dlogits, grads);
        let mut dmemory = vec![0.0; c.src.len() * d];
        for (layer, lc) in self.lay.decoder.iter().zip(&c.decoder).rev() {
            let dres3 = self.norm_backward(&layer.ln3, &lc.ln3, &dy, grads);
            let mut df = dres3.clone();
            apply_mask(&mut df, &lc.drop_ff);
            let mut dy2 = self.feed_forward_backward(&layer.ff, &lc.ff, &df, grads);
            add_assign(&mut dy2, &dres3);
            let dres2 = self.norm_backward(&layer.ln2, &lc.ln2, &dy2, grads);
            let mut dc = dres2.clone();
            apply_mask(&mut dc, &lc.drop_cross);
            let (mut dy1, dmem) = self.attention_backward(&layer.cross_attn, &lc.cross, &dc, grads);
            add_assign(&mut dmemory, &dmem);
            add_assign(&mut dy1, &dres2);
            let dres1 = self.norm_backward(&layer.ln1, &lc.ln1, &dy1, grads);
            let mut da = dres1.clone();
            apply_mask(&mut da, &lc.drop_self);
            let (dq, dkv) = self.attention_backward(&layer.self_attn, &lc.self_attn, &da, grads);
            dy = dres1;
            add_assign(&mut dy, &dq);
            add_assign(&mut dy, &dkv);
        }
        apply_mask(&mut dy, &c.drop_tgt);
        self.embed_backward(&c.tgt, &dy, grads);

        let mut dx = dmemory;
        for (layer, lc) in self.lay.encoder.iter().zip(&c.encoder).rev() {
            let dres2 = self.norm_backward(&layer.ln2, &lc.ln2, &dx, grads);
            let mut df = dres2.clone();
            apply_mask(&mut df, &lc.drop_ff);
            let mut dh = self.feed_forward_backward(&layer.ff, &lc.ff, &df, grads);
            add_assign(&mut dh, &dres2);
            let dres1 = self.norm_backward(&layer.ln1, &lc.ln1, &dh, grads);
            let mut da = dres1.clone();
            apply_mask(&mut da, &lc.drop_attn);
            let (dq, dkv) = self.attention_backward(&layer.self_attn, &lc.attn, &da, grads);
            dx = dres1;
            add_assign(&mut dx, &dq);
            add_assign(&mut dx, &dkv);
        }
        apply_mask(&mut dx, &c.drop_src);
        self.embed_backward(&c.src, &dx, grads);
    }
}

fn validate_batch(cfg: &ModelConfig, batch: &Batch) -> Result<(), ModelError> {
    let (s, t) = (batch.src_len(), batch.tgt_len());
    let longest = s.max(t);
    if longest > cfg.max_len {
        return Err(ModelError::SequenceTooLong {
            len: longest,
            max: cfg.max_len,
        });
    }
    for &id in batch.source.iter().chain(&batch.target).flatten() {
        if id as usize >= cfg.vocab_size {
            return Err(ModelError::IdOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
    }
    Ok(())
}

/// Logits for every target position; position `t` predicts target token
/// `t + 1`. Dropout is disabled.
pub fn forward(params: &ParameterStore, batch: &Batch) -> Result<Logits, ModelError> {
    validate_batch(&params.config, batch)?;
    let net = Net::new(params, batch.src_len().max(batch.tgt_len()));
    let v = params.config.vocab_size;
    let mut data = Vec::with_capacity(batch.len() * batch.tgt_len() * v);
    for b in 0..batch.len() {
        let (logits, _) = net.forward_seq(
            &batch.source[b],
            &batch.source_mask[b],
            &batch.target[b],
            &mut Dropout::off(),
        );
        data.extend(logits);
    }
    Ok(Logits {
        batch: batch.len(),
        len: batch.tgt_len(),
        vocab: v,
        data,
    })
}

/// Smoothed cross-entropy of one position and its gradient w.r.t. the
/// logits. The gold entry keeps mass `1 - eps`; `eps` is shared evenly by
/// the remaining non-PAD entries.
pub fn smoothed_xent(row: &[f64], gold: u32, eps: f64) -> (f64, Vec<f64>) {
    let logp = ops::log_softmax(row);
    let v = row.len();
    let mut grad: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let g = gold as usize;
    if eps == 0.0 {
        grad[g] -= 1.0;
        return (-logp[g], grad);
    }
    let other = eps / (v - 2) as f64;
    let mut loss = 0.0;
    for j in 0..v {
        let q = if j == g {
            1.0 - eps
        } else if j == PAD as usize {
            0.0
        } else {
            other
        };
        if q > 0.0 {
            loss -= q * logp[j];
        }
        grad[j] -= q;
    }
    (loss, grad)
}

fn gold_at(target: &[u32], t: usize) -> u32 {
    target.get(t + 1).copied().unwrap_or(PAD)
}

/// Mean smoothed cross-entropy over non-PAD gold positions.
pub fn loss(logits: &Logits, target: &[Vec<u32>], eps: f64) -> Result<f64, ModelError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (b, row) in target.iter().enumerate().take(logits.batch) {
        for t in 0..logits.len {
            let gold = gold_at(row, t);
            if gold == PAD {
                continue;
            }
            sum += smoothed_xent(logits.at(b, t), gold, eps).0;
            n += 1;
        }
    }
    if n == 0 {
        return Err(ModelError::AllPadded);
    }
    Ok(sum / n as f64)
}

fn trimmed_len(row: &[u32]) -> usize {
    row.iter().rposition(|&id| id != PAD).map_or(0, |i| i + 1)
}

/// Loss and exact gradients of the batch mean loss. With `dropout_seed`
/// set, the config's dropout rate is applied with masks drawn from a stream
/// keyed by that seed and the row index.
pub fn gradients(
    params: &ParameterStore,
    batch: &Batch,
    eps: f64,
    dropout_seed: Option<u64>,
) -> Result<(LossStats, GradStore), ModelError> {
    validate_batch(&params.config, batch)?;
    let tokens: usize = batch
        .target
        .iter()
        .map(|row| trimmed_len(row).saturating_sub(1))
        .sum();
    if tokens == 0 {
        return Err(ModelError::AllPadded);
    }
    let net = Net::new(params, batch.src_len().max(batch.tgt_len()));
    let mut grads = GradStore::zeros_like(params);
    let v = params.config.vocab_size;
    let inv = 1.0 / tokens as f64;
    let mut sum = 0.0;
    for b in 0..batch.len() {
        // Trailing padding cannot influence earlier positions, so it is cut.
        let src_n = trimmed_len(&batch.source[b]).max(1);
        let tgt_full = &batch.target[b];
        let tgt_n = trimmed_len(tgt_full);
        if tgt_n < 2 {
            continue;
        }
        let tgt_in = &tgt_full[..tgt_n - 1];
        let mut drop = match dropout_seed {
            Some(seed) if params.config.dropout_rate > 0.0 => Dropout {
                rate: params.config.dropout_rate,
                rng: Some(rng::stream(seed, &[b as u64])),
            },
            _ => Dropout::off(),
        };
        let (logits, cache) = net.forward_seq(
            &batch.source[b][..src_n],
            &batch.source_mask[b][..src_n],
            tgt_in,
            &mut drop,
        );
        let mut dlogits = vec![0.0; logits.len()];
        for t in 0..tgt_in.len() {
            let gold = gold_at(tgt_full, t);
            if gold == PAD {
                continue;
            }
            let (l, g) = smoothed_xent(&logits[t * v..(t + 1) * v], gold, eps);
            sum += l;
            for (d, x) in dlogits[t * v..(t + 1) * v].iter_mut().zip(g) {
                *d = x * inv;
            }
        }
        net.backward_seq(&cache, &dlogits, &mut grads.tensors);
    }
    Ok((
        LossStats {
            mean: sum * inv,
            sum,
            tokens,
        },
        grads,
    ))
}

/// Encoder output for one source sequence, reused across decoding steps.
pub struct EncodedSource {
    memory: Vec<f64>,
    valid: Vec<bool>,
}

pub struct Decoder<'a> {
    net: Net<'a>,
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a ParameterStore) -> Self {
        Decoder {
            net: Net::new(params, params.config.max_len),
        }
    }

    pub fn encode(&self, src: &[u32]) -> Result<EncodedSource, ModelError> {
        let cfg = self.net.cfg;
        if src.len() > cfg.max_len {
            return Err(ModelError::SequenceTooLong {
                len: src.len(),
                max: cfg.max_len,
            });
        }
        if let Some(&id) = src.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(ModelError::IdOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
        let valid: Vec<bool> = src.iter().map(|&id| id != PAD).collect();
        let (memory, _, _) = self.net.encode(src, &valid, &mut Dropout::off());
        Ok(EncodedSource { memory, valid })
    }

    /// Log-probabilities of the token following `prefix` (which starts with
    /// BOS).
    pub fn next_log_probs(&self, enc: &EncodedSource, prefix: &[u32]) -> Vec<f64> {
        let (y, _, _) = self
            .net
            .decode(&enc.memory, &enc.valid, prefix, &mut Dropout::off());
        let d = self.net.d();
        let last = &y[(prefix.len() - 1) * d..];
        ops::log_softmax(&self.net.project(last, 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    EncoderSelf,
    DecoderSelf,
    DecoderCross,
}

/// Attention weights of one head in one layer, `rows x cols`.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub kind: AttentionKind,
    pub layer: usize,
    pub head: usize,
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

/// All attention maps for row `b` of a batch (dropout off).
pub fn attention_maps(params: &ParameterStore, batch: &Batch, b: usize) -> Result<Vec<AttentionMap>, ModelError> {
    validate_batch(&params.config, batch)?;
    let net = Net::new(params, batch.src_len().max(batch.tgt_len()));
    let (_, cache) = net.forward_seq(
        &batch.source[b],
        &batch.source_mask[b],
        &batch.target[b],
        &mut Dropout::off(),
    );
    let heads = params.config.n_heads;
    let mut maps = Vec::new();
    let mut push = |kind, layer, c: &AttnCache| {
        let n = c.tq * c.tk;
        for h in 0..heads {
            maps.push(AttentionMap {
                kind,
                layer,
                head: h,
                rows: c.tq,
                cols: c.tk,
                weights: c.probs[h * n..(h + 1) * n].to_vec(),
            });
        }
    };
    for (l, c) in cache.encoder.iter().enumerate() {
        push(AttentionKind::EncoderSelf, l, &c.attn);
    }
    for (l, c) in cache.decoder.iter().enumerate() {
        push(AttentionKind::DecoderSelf, l, &c.self_attn);
        push(AttentionKind::DecoderCross, l, &c.cross);
    }
    Ok(maps)
}
