//! Compact trainable stand-in for the base foundation model.
//!
//! Each channel is cut into patches of `patch_len` samples. A temporal
//! convolution with kernel and stride `patch_len` embeds every patch, then learned
//! channel and patch-position embeddings are added. The resulting
//! `C · (T / patch_len)` tokens run through a pre-norm transformer encoder, are
//! mean-pooled, and feed a linear classification head.
//!
//! Raw-input mode uses a 128-row channel table so recordings with up to 128
//! electrodes go straight in; rows past the recording's channel count stay idle.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EadError, Result};
use crate::matrix::Matrix;
use crate::nn::{
    affine, affine_backward, gelu, gelu_grad, layer_norm, layer_norm_backward, softmax_in_place,
    uniform_init, uniform_matrix, LayerNormCache, ParamSet,
};

pub const RAW_CHANNEL_VOCAB: usize = 128;
const EMBEDDING_INIT: f64 = 0.02;
const HEAD_INIT: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BfmConfig {
    pub num_channels: usize,
    pub input_timesteps: usize,
    pub patch_len: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub num_classes: usize,
    pub channel_vocab: usize,
}

impl BfmConfig {
    /// Desk-scale defaults: 32-dim embeddings, 2 layers, 4 heads, 16-sample patches.
    pub fn desk(num_channels: usize, input_timesteps: usize, num_classes: usize) -> Self {
        BfmConfig {
            num_channels,
            input_timesteps,
            patch_len: 16,
            embed_dim: 32,
            num_layers: 2,
            num_heads: 4,
            ff_dim: 128,
            num_classes,
            channel_vocab: num_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.num_channels,
            self.input_timesteps,
            self.patch_len,
            self.embed_dim,
            self.num_heads,
            self.ff_dim,
            self.num_classes,
        ];
        if positive.contains(&0) {
            return Err(EadError::Config("encoder dimensions must be positive".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(EadError::Config(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.input_timesteps % self.patch_len != 0 {
            return Err(EadError::Dimension(format!(
                "{} timesteps do not split into patches of {}",
                self.input_timesteps, self.patch_len
            )));
        }
        if self.channel_vocab < self.num_channels {
            return Err(EadError::Config(format!(
                "channel table has {} rows for {} channels",
                self.channel_vocab, self.num_channels
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.input_timesteps / self.patch_len
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub wq: Matrix,
    pub bq: Vec<f64>,
    pub wk: Matrix,
    pub bk: Vec<f64>,
    pub wv: Matrix,
    pub bv: Vec<f64>,
    pub wo: Matrix,
    pub bo: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl EncoderLayer {
    fn zeros(d: usize, f: usize) -> Self {
        EncoderLayer {
            ln1_gamma: vec![0.0; d],
            ln1_beta: vec![0.0; d],
            wq: Matrix::zeros(d, d),
            bq: vec![0.0; d],
            wk: Matrix::zeros(d, d),
            bk: vec![0.0; d],
            wv: Matrix::zeros(d, d),
            bv: vec![0.0; d],
            wo: Matrix::zeros(d, d),
            bo: vec![0.0; d],
            ln2_gamma: vec![0.0; d],
            ln2_beta: vec![0.0; d],
            w1: Matrix::zeros(d, f),
            b1: vec![0.0; f],
            w2: Matrix::zeros(f, d),
            b2: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// `patch_len × embed_dim`
    pub patch_w: Matrix,
    pub patch_b: Vec<f64>,
    /// `channel_vocab × embed_dim`
    pub channel_emb: Matrix,
    /// `num_patches × embed_dim`
    pub time_emb: Matrix,
    pub layers: Vec<EncoderLayer>,
    pub final_gamma: Vec<f64>,
    pub final_beta: Vec<f64>,
    /// `embed_dim × num_classes`
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

impl EncoderParams {
    pub fn zeros(cfg: &BfmConfig) -> Self {
        let d = cfg.embed_dim;
        EncoderParams {
            patch_w: Matrix::zeros(cfg.patch_len, d),
            patch_b: vec![0.0; d],
            channel_emb: Matrix::zeros(cfg.channel_vocab, d),
            time_emb: Matrix::zeros(cfg.num_patches(), d),
            layers: (0..cfg.num_layers)
                .map(|_| EncoderLayer::zeros(d, cfg.ff_dim))
                .collect(),
            final_gamma: vec![0.0; d],
            final_beta: vec![0.0; d],
            head_w: Matrix::zeros(d, cfg.num_classes),
            head_b: vec![0.0; cfg.num_classes],
        }
    }

    /// Affine weights uniform in `±sqrt(1 / fan_in)`, embeddings and head small,
    /// layer-norm gains one, all biases zero.
    pub fn init(cfg: &BfmConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.embed_dim;
        let f = cfg.ff_dim;
        let bound = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
        let mut p = Self::zeros(cfg);
        p.patch_w = uniform_matrix(rng, cfg.patch_len, d, bound(cfg.patch_len));
        p.channel_emb = uniform_matrix(rng, cfg.channel_vocab, d, EMBEDDING_INIT);
        p.time_emb = uniform_matrix(rng, cfg.num_patches(), d, EMBEDDING_INIT);
        for layer in &mut p.layers {
            layer.ln1_gamma = vec![1.0; d];
            layer.ln2_gamma = vec![1.0; d];
            layer.wq = uniform_matrix(rng, d, d, bound(d));
            layer.wk = uniform_matrix(rng, d, d, bound(d));
            layer.wv = uniform_matrix(rng, d, d, bound(d));
            layer.wo = uniform_matrix(rng, d, d, bound(d));
            layer.w1 = uniform_matrix(rng, d, f, bound(d));
            layer.w2 = uniform_matrix(rng, f, d, bound(f));
        }
        p.final_gamma = vec![1.0; d];
        p.head_w = Matrix::from_vec(d, cfg.num_classes, uniform_init(rng, d * cfg.num_classes, HEAD_INIT))
            .expect("shape");
        p
    }

    pub fn check_shapes(&self, cfg: &BfmConfig) -> Result<()> {
        let expect = Self::zeros(cfg);
        let a = self.tensors();
        let b = expect.tensors();
        if a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.1.len() == y.1.len()) {
            Ok(())
        } else {
            Err(EadError::Dimension("encoder parameters do not match config".into()))
        }
    }
}

impl ParamSet for EncoderParams {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("bfm.patch_w".into(), self.patch_w.as_slice()),
            ("bfm.patch_b".into(), &self.patch_b),
            ("bfm.channel_emb".into(), self.channel_emb.as_slice()),
            ("bfm.time_emb".into(), self.time_emb.as_slice()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let name = |s: &str| format!("bfm.layer{i}.{s}");
            out.extend([
                (name("ln1_gamma"), l.ln1_gamma.as_slice()),
                (name("ln1_beta"), &l.ln1_beta),
                (name("wq"), l.wq.as_slice()),
                (name("bq"), &l.bq),
                (name("wk"), l.wk.as_slice()),
                (name("bk"), &l.bk),
                (name("wv"), l.wv.as_slice()),
                (name("bv"), &l.bv),
                (name("wo"), l.wo.as_slice()),
                (name("bo"), &l.bo),
                (name("ln2_gamma"), &l.ln2_gamma),
                (name("ln2_beta"), &l.ln2_beta),
                (name("w1"), l.w1.as_slice()),
                (name("b1"), &l.b1),
                (name("w2"), l.w2.as_slice()),
                (name("b2"), &l.b2),
            ]);
        }
        out.extend([
            ("bfm.final_gamma".into(), self.final_gamma.as_slice()),
            ("bfm.final_beta".into(), &self.final_beta),
            ("bfm.head_w".into(), self.head_w.as_slice()),
            ("bfm.head_b".into(), &self.head_b),
        ]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.patch_w.as_mut_slice(),
            &mut self.patch_b,
            self.channel_emb.as_mut_slice(),
            self.time_emb.as_mut_slice(),
        ];
        for l in &mut self.layers {
            out.extend([
                l.ln1_gamma.as_mut_slice(),
                &mut l.ln1_beta,
                l.wq.as_mut_slice(),
                &mut l.bq,
                l.wk.as_mut_slice(),
                &mut l.bk,
                l.wv.as_mut_slice(),
                &mut l.bv,
                l.wo.as_mut_slice(),
                &mut l.bo,
                &mut l.ln2_gamma,
                &mut l.ln2_beta,
                l.w1.as_mut_slice(),
                &mut l.b1,
                l.w2.as_mut_slice(),
                &mut l.b2,
            ]);
        }
        out.extend([
            self.final_gamma.as_mut_slice(),
            &mut self.final_beta,
            self.head_w.as_mut_slice(),
            &mut self.head_b,
        ]);
        out
    }
}

/// Mean-pooled representations with their labels and subjects, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub embeddings: Matrix,
    pub labels: Vec<usize>,
    pub subject_ids: Vec<String>,
}

impl EmbeddingBatch {
    pub fn new(embeddings: Matrix, labels: Vec<usize>, subject_ids: Vec<String>) -> Result<Self> {
        if embeddings.rows() != labels.len() || labels.len() != subject_ids.len() {
            return Err(EadError::Dimension(format!(
                "{} embeddings, {} labels, {} subjects",
                embeddings.rows(),
                labels.len(),
                subject_ids.len()
            )));
        }
        if !embeddings.is_finite() {
            return Err(EadError::Numeric("embeddings contain non-finite values".into()));
        }
        Ok(EmbeddingBatch {
            embeddings,
            labels,
            subject_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Keeps the rows whose label satisfies `keep`.
    pub fn filter_labels(&self, keep: impl Fn(usize) -> bool) -> EmbeddingBatch {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        let d = self.embeddings.cols();
        EmbeddingBatch {
            embeddings: Matrix::from_fn(idx.len(), d, |r, c| self.embeddings.get(idx[r], c)),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            subject_ids: idx.iter().map(|&i| self.subject_ids[i].clone()).collect(),
        }
    }
}

fn check_input(x: &Matrix, cfg: &BfmConfig) -> Result<()> {
    if x.cols() % cfg.patch_len != 0 || x.cols() != cfg.input_timesteps {
        return Err(EadError::Dimension(format!(
            "encoder expects {} timesteps in patches of {}, got {}",
            cfg.input_timesteps,
            cfg.patch_len,
            x.cols()
        )));
    }
    if x.rows() != cfg.num_channels || x.rows() > cfg.channel_vocab {
        return Err(EadError::Dimension(format!(
            "encoder expects {} channels (table of {}), got {}",
            cfg.num_channels,
            cfg.channel_vocab,
            x.rows()
        )));
    }
    Ok(())
}

/// Tokens `(c, p)` in channel-major order: patch embedding plus channel and
/// position embeddings.
pub fn patchify(x: &Matrix, params: &EncoderParams, cfg: &BfmConfig) -> Result<Matrix> {
    check_input(x, cfg)?;
    let p_count = cfg.num_patches();
    let l = cfg.patch_len;
    let d = cfg.embed_dim;
    let mut tokens = Matrix::zeros(x.rows() * p_count, d);
    for c in 0..x.rows() {
        for p in 0..p_count {
            let patch = &x.row(c)[p * l..(p + 1) * l];
            let tok = tokens.row_mut(c * p_count + p);
            for j in 0..d {
                tok[j] = params.patch_b[j] + params.channel_emb.get(c, j) + params.time_emb.get(p, j);
            }
            for (k, &v) in patch.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                for (t, w) in tok.iter_mut().zip(params.patch_w.row(k)) {
                    *t += v * w;
                }
            }
        }
    }
    Ok(tokens)
}

fn patchify_backward(
    x: &Matrix,
    dtokens: &Matrix,
    params: &EncoderParams,
    cfg: &BfmConfig,
    grads: &mut EncoderParams,
) -> Matrix {
    let p_count = cfg.num_patches();
    let l = cfg.patch_len;
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    for c in 0..x.rows() {
        for p in 0..p_count {
            let g = dtokens.row(c * p_count + p);
            for (j, &gj) in g.iter().enumerate() {
                grads.patch_b[j] += gj;
            }
            for (e, gj) in grads.channel_emb.row_mut(c).iter_mut().zip(g) {
                *e += gj;
            }
            for (e, gj) in grads.time_emb.row_mut(p).iter_mut().zip(g) {
                *e += gj;
            }
            for k in 0..l {
                let v = x.get(c, p * l + k);
                for (w, gj) in grads.patch_w.row_mut(k).iter_mut().zip(g) {
                    *w += v * gj;
                }
                let dv: f64 = params.patch_w.row(k).iter().zip(g).map(|(w, gj)| w * gj).sum();
                dx.set(c, p * l + k, dv);
            }
        }
    }
    dx
}

struct LayerCache {
    ln1: LayerNormCache,
    h1: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// One `N × N` attention matrix per head.
    attn: Vec<Matrix>,
    heads_out: Matrix,
    ln2: LayerNormCache,
    h2: Matrix,
    ff_pre: Matrix,
    ff_act: Matrix,
}

/// Intermediates of [`encode_cached`] for [`Bfm::backward`].
pub struct EncodeCache {
    layers: Vec<LayerCache>,
    final_ln: LayerNormCache,
    pooled: Vec<f64>,
    num_tokens: usize,
}

impl EncodeCache {
    pub fn pooled(&self) -> &[f64] {
        &self.pooled
    }

    /// Attention matrices of layer `l`, one per head.
    pub fn attention(&self, l: usize) -> &[Matrix] {
        &self.layers[l].attn
    }
}

fn head_slice(m: &Matrix, h: usize, hd: usize) -> Matrix {
    Matrix::from_fn(m.rows(), hd, |r, c| m.get(r, h * hd + c))
}

fn attention_forward(q: &Matrix, k: &Matrix, v: &Matrix, cfg: &BfmConfig) -> (Matrix, Vec<Matrix>) {
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let n = q.rows();
    let mut out = Matrix::zeros(n, cfg.embed_dim);
    let mut attn = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = head_slice(q, h, hd);
        let kh = head_slice(k, h, hd);
        let vh = head_slice(v, h, hd);
        let mut s = qh.matmul_t(&kh);
        for r in 0..n {
            let row = s.row_mut(r);
            for v in row.iter_mut() {
                *v *= scale;
            }
            softmax_in_place(row);
        }
        let oh = s.matmul(&vh);
        for r in 0..n {
            out.row_mut(r)[h * hd..(h + 1) * hd].copy_from_slice(oh.row(r));
        }
        attn.push(s);
    }
    (out, attn)
}

/// Pre-norm transformer stack followed by a final layer norm and mean pooling.
pub fn encode_cached(tokens: &Matrix, params: &EncoderParams, cfg: &BfmConfig) -> Result<EncodeCache> {
    if tokens.rows() == 0 {
        return Err(EadError::Dimension("encoder needs at least one token".into()));
    }
    if tokens.cols() != cfg.embed_dim {
        return Err(EadError::Dimension(format!(
            "tokens have width {}, expected {}",
            tokens.cols(),
            cfg.embed_dim
        )));
    }
    let mut x = tokens.clone();
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for lp in &params.layers {
        let (h1, ln1) = layer_norm(&x, &lp.ln1_gamma, &lp.ln1_beta);
        let q = affine(&h1, &lp.wq, &lp.bq);
        let k = affine(&h1, &lp.wk, &lp.bk);
        let v = affine(&h1, &lp.wv, &lp.bv);
        let (heads_out, attn) = attention_forward(&q, &k, &v, cfg);
        x.add_assign(&affine(&heads_out, &lp.wo, &lp.bo));

        let (h2, ln2) = layer_norm(&x, &lp.ln2_gamma, &lp.ln2_beta);
        let ff_pre = affine(&h2, &lp.w1, &lp.b1);
        let ff_act = ff_pre.map(gelu);
        x.add_assign(&affine(&ff_act, &lp.w2, &lp.b2));

        layers.push(LayerCache {
            ln1,
            h1,
            q,
            k,
            v,
            attn,
            heads_out,
            ln2,
            h2,
            ff_pre,
            ff_act,
        });
    }
    let (y, final_ln) = layer_norm(&x, &params.final_gamma, &params.final_beta);
    let n = y.rows();
    let mut pooled = vec![0.0; cfg.embed_dim];
    y.accumulate_col_sums(&mut pooled);
    for v in &mut pooled {
        *v /= n as f64;
    }
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(EadError::Numeric("encoder produced a non-finite embedding".into()));
    }
    Ok(EncodeCache {
        layers,
        final_ln,
        pooled,
        num_tokens: n,
    })
}

pub fn encode(tokens: &Matrix, params: &EncoderParams, cfg: &BfmConfig) -> Result<Vec<f64>> {
    encode_cached(tokens, params, cfg).map(|c| c.pooled)
}

/// `embedding · head_w + head_b`; logits, no softmax.
pub fn classify(embedding: &[f64], params: &EncoderParams) -> Vec<f64> {
    let mut logits = params.head_b.clone();
    for (e, w) in embedding.iter().zip(params.head_w.iter_rows()) {
        for (l, wk) in logits.iter_mut().zip(w) {
            *l += e * wk;
        }
    }
    logits
}

fn encode_backward(
    cache: &EncodeCache,
    dpooled: &[f64],
    params: &EncoderParams,
    cfg: &BfmConfig,
    grads: &mut EncoderParams,
) -> Matrix {
    let n = cache.num_tokens;
    let d = cfg.embed_dim;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let dy = Matrix::from_fn(n, d, |_, j| dpooled[j] / n as f64);
    let mut dx = layer_norm_backward(
        &dy,
        &cache.final_ln,
        &params.final_gamma,
        &mut grads.final_gamma,
        &mut grads.final_beta,
    );

    for (l, lc) in cache.layers.iter().enumerate().rev() {
        let lp = &params.layers[l];
        let lg = &mut grads.layers[l];

        // feed-forward residual branch
        let dact = affine_backward(&dx, &lc.ff_act, &lp.w2, &mut lg.w2, &mut lg.b2);
        let mut dpre = dact;
        for (g, &v) in dpre.as_mut_slice().iter_mut().zip(lc.ff_pre.as_slice()) {
            *g *= gelu_grad(v);
        }
        let dh2 = affine_backward(&dpre, &lc.h2, &lp.w1, &mut lg.w1, &mut lg.b1);
        dx.add_assign(&layer_norm_backward(
            &dh2,
            &lc.ln2,
            &lp.ln2_gamma,
            &mut lg.ln2_gamma,
            &mut lg.ln2_beta,
        ));

        // attention residual branch
        let dheads = affine_backward(&dx, &lc.heads_out, &lp.wo, &mut lg.wo, &mut lg.bo);
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        for h in 0..cfg.num_heads {
            let a = &lc.attn[h];
            let qh = head_slice(&lc.q, h, hd);
            let kh = head_slice(&lc.k, h, hd);
            let vh = head_slice(&lc.v, h, hd);
            let doh = head_slice(&dheads, h, hd);
            let da = doh.matmul_t(&vh);
            let dvh = a.t_matmul(&doh);
            let mut ds = Matrix::zeros(n, n);
            for r in 0..n {
                let arow = a.row(r);
                let darow = da.row(r);
                let inner: f64 = arow.iter().zip(darow).map(|(p, g)| p * g).sum();
                for (o, (p, g)) in ds.row_mut(r).iter_mut().zip(arow.iter().zip(darow)) {
                    *o = p * (g - inner) * scale;
                }
            }
            let dqh = ds.matmul(&kh);
            let dkh = ds.t_matmul(&qh);
            for r in 0..n {
                dq.row_mut(r)[h * hd..(h + 1) * hd].copy_from_slice(dqh.row(r));
                dk.row_mut(r)[h * hd..(h + 1) * hd].copy_from_slice(dkh.row(r));
                dv.row_mut(r)[h * hd..(h + 1) * hd].copy_from_slice(dvh.row(r));
            }
        }
        let mut dh1 = affine_backward(&dq, &lc.h1, &lp.wq, &mut lg.wq, &mut lg.bq);
        dh1.add_assign(&affine_backward(&dk, &lc.h1, &lp.wk, &mut lg.wk, &mut lg.bk));
        dh1.add_assign(&affine_backward(&dv, &lc.h1, &lp.wv, &mut lg.wv, &mut lg.bv));
        dx.add_assign(&layer_norm_backward(
            &dh1,
            &lc.ln1,
            &lp.ln1_gamma,
            &mut lg.ln1_gamma,
            &mut lg.ln1_beta,
        ));
    }
    dx
}

/// Encoder configuration and weights together.
#[derive(Debug, Clone, PartialEq)]
pub struct Bfm {
    pub config: BfmConfig,
    pub params: EncoderParams,
}

/// Everything [`Bfm::backward`] needs from a forward pass.
pub struct BfmForward {
    pub logits: Vec<f64>,
    pub input: Matrix,
    pub encode: EncodeCache,
}

impl Bfm {
    pub fn new(config: BfmConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let params = EncoderParams::init(&config, rng);
        Ok(Bfm { config, params })
    }

    pub fn from_parts(config: BfmConfig, params: EncoderParams) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Bfm { config, params })
    }

    pub fn forward(&self, x: &Matrix) -> Result<BfmForward> {
        let tokens = patchify(x, &self.params, &self.config)?;
        let encode = encode_cached(&tokens, &self.params, &self.config)?;
        let logits = classify(&encode.pooled, &self.params);
        Ok(BfmForward {
            logits,
            input: x.clone(),
            encode,
        })
    }

    pub fn embed(&self, x: &Matrix) -> Result<Vec<f64>> {
        let tokens = patchify(x, &self.params, &self.config)?;
        encode(&tokens, &self.params, &self.config)
    }

    /// Gradients of `dot(upstream, logits)` with respect to every parameter and the input.
    pub fn backward(&self, fwd: &BfmForward, upstream: &[f64]) -> Result<(EncoderParams, Matrix)> {
        if upstream.len() != self.config.num_classes {
            return Err(EadError::Dimension(format!(
                "upstream has {} entries for {} classes",
                upstream.len(),
                self.config.num_classes
            )));
        }
        let mut grads = EncoderParams::zeros(&self.config);
        let pooled = &fwd.encode.pooled;
        for (j, &e) in pooled.iter().enumerate() {
            for (g, u) in grads.head_w.row_mut(j).iter_mut().zip(upstream) {
                *g += e * u;
            }
        }
        for (g, u) in grads.head_b.iter_mut().zip(upstream) {
            *g += u;
        }
        let dpooled: Vec<f64> = self
            .params
            .head_w
            .iter_rows()
            .map(|w| w.iter().zip(upstream).map(|(a, b)| a * b).sum())
            .collect();
        let dtokens = encode_backward(&fwd.encode, &dpooled, &self.params, &self.config, &mut grads);
        let dx = patchify_backward(&fwd.input, &dtokens, &self.params, &self.config, &mut grads);
        Ok((grads, dx))
    }
}

/// Forward then backward through the whole encoder and head.
pub fn bfm_grad(bfm: &Bfm, x: &Matrix, upstream: &[f64]) -> Result<(EncoderParams, Matrix)> {
    let fwd = bfm.forward(x)?;
    bfm.backward(&fwd, upstream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::dot;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> BfmConfig {
        BfmConfig {
            num_channels: 3,
            input_timesteps: 16,
            patch_len: 4,
            embed_dim: 16,
            num_layers: 2,
            num_heads: 2,
            ff_dim: 24,
            num_classes: 4,
            channel_vocab: 5,
        }
    }

    fn randomize(p: &mut EncoderParams, rng: &mut impl Rng, scale: f64) {
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.gen_range(-scale..scale);
            }
        }
    }

    fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn token_count() {
        let cfg = BfmConfig::desk(23, 64, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bfm = Bfm::new(cfg.clone(), &mut rng).unwrap();
        let tokens = patchify(&Matrix::zeros(23, 64), &bfm.params, &cfg).unwrap();
        assert_eq!(tokens.shape(), (92, 32));
    }

    #[test]
    fn zero_input_tokens_are_embedding_sums() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bfm = Bfm::new(cfg.clone(), &mut rng).unwrap();
        let tokens = patchify(&Matrix::zeros(3, 16), &bfm.params, &cfg).unwrap();
        for c in 0..3 {
            for p in 0..4 {
                for j in 0..16 {
                    let expect = bfm.params.channel_emb.get(c, j) + bfm.params.time_emb.get(p, j);
                    assert_eq!(tokens.get(c * 4 + p, j), expect);
                }
            }
        }
    }

    #[test]
    fn tokens_match_per_patch_loop() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut bfm = Bfm::new(cfg.clone(), &mut rng).unwrap();
        randomize(&mut bfm.params, &mut rng, 0.3);
        let x = random_matrix(&mut rng, 3, 16);
        let tokens = patchify(&x, &bfm.params, &cfg).unwrap();
        for c in 0..3 {
            for p in 0..4 {
                for j in 0..16 {
                    let mut acc = bfm.params.patch_b[j];
                    for k in 0..4 {
                        acc += x.get(c, p * 4 + k) * bfm.params.patch_w.get(k, j);
                    }
                    acc += bfm.params.channel_emb.get(c, j) + bfm.params.time_emb.get(p, j);
                    assert!((tokens.get(c * 4 + p, j) - acc).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn bad_input_shapes_rejected() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bfm = Bfm::new(cfg.clone(), &mut rng).unwrap();
        assert!(matches!(patchify(&Matrix::zeros(3, 15), &bfm.params, &cfg), Err(EadError::Dimension(_))));
        assert!(matches!(patchify(&Matrix::zeros(4, 16), &bfm.params, &cfg), Err(EadError::Dimension(_))));
        let mut bad = cfg.clone();
        bad.input_timesteps = 18;
        assert!(bad.validate().is_err());
        bad = cfg.clone();
        bad.num_heads = 3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn single_token_reduces_to_value_path() {
        let cfg = BfmConfig { num_layers: 1, ..small_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = EncoderParams::init(&cfg, &mut rng);
        randomize(&mut params, &mut rng, 0.2);
        let token = random_matrix(&mut rng, 1, 16);
        let pooled = encode(&token, &params, &cfg).unwrap();

        // one token attends only to itself, so attention output is its value vector
        let lp = &params.layers[0];
        let (h1, _) = layer_norm(&token, &lp.ln1_gamma, &lp.ln1_beta);
        let v = affine(&h1, &lp.wv, &lp.bv);
        let mut x = token.clone();
        x.add_assign(&affine(&v, &lp.wo, &lp.bo));
        let (h2, _) = layer_norm(&x, &lp.ln2_gamma, &lp.ln2_beta);
        let f = affine(&affine(&h2, &lp.w1, &lp.b1).map(gelu), &lp.w2, &lp.b2);
        x.add_assign(&f);
        let (y, _) = layer_norm(&x, &params.final_gamma, &params.final_beta);
        for (a, b) in pooled.iter().zip(y.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bfm = Bfm::new(cfg.clone(), &mut rng).unwrap();
        let fwd = bfm.forward(&random_matrix(&mut rng, 3, 16).map(|v| 5.0 * v)).unwrap();
        for l in 0..cfg.num_layers {
            for a in fwd.encode.attention(l) {
                for row in a.iter_rows() {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn pooled_output_is_permutation_invariant() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut bfm = Bfm::new(cfg.clone(), &mut rng).unwrap();
        randomize(&mut bfm.params, &mut rng, 0.2);
        let tokens = patchify(&random_matrix(&mut rng, 3, 16), &bfm.params, &cfg).unwrap();
        let mut order: Vec<usize> = (0..tokens.rows()).collect();
        order.shuffle(&mut rng);
        let permuted = Matrix::from_fn(tokens.rows(), tokens.cols(), |r, c| tokens.get(order[r], c));
        let a = encode(&tokens, &bfm.params, &cfg).unwrap();
        let b = encode(&permuted, &bfm.params, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn classify_is_affine() {
        let cfg = small_cfg();
        let mut params = EncoderParams::zeros(&cfg);
        let e: Vec<f64> = (0..16).map(|i| i as f64 - 3.5).collect();
        assert!(classify(&e, &params).iter().all(|&v| v == 0.0));
        // logit 2 reads component 7
        params.head_w.set(7, 2, 1.0);
        assert_eq!(classify(&e, &params)[2], e[7]);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        randomize(&mut params, &mut rng, 1.0);
        let logits = classify(&e, &params);
        for k in 0..4 {
            let col: Vec<f64> = (0..16).map(|j| params.head_w.get(j, k)).collect();
            assert!((logits[k] - (dot(&e, &col) + params.head_b[k])).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bfm = Bfm::new(cfg.clone(), &mut rng).unwrap();
        let (g, dx) = bfm_grad(&bfm, &random_matrix(&mut rng, 3, 16), &[0.0; 4]).unwrap();
        assert!(g.flatten().iter().chain(dx.as_slice()).all(|&v| v == 0.0));
    }

    #[test]
    fn unused_channel_rows_get_no_gradient() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bfm = Bfm::new(cfg.clone(), &mut rng).unwrap();
        let (g, _) = bfm_grad(&bfm, &random_matrix(&mut rng, 3, 16), &[0.3, -1.0, 0.2, 0.5]).unwrap();
        for c in 3..5 {
            assert!(g.channel_emb.row(c).iter().all(|&v| v == 0.0));
        }
        assert!(g.channel_emb.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut bfm = Bfm::new(cfg.clone(), &mut rng).unwrap();
        randomize(&mut bfm.params, &mut rng, 0.1);
        let x = random_matrix(&mut rng, 3, 16);
        let upstream = [0.7, -0.4, 1.1, -0.2];
        let objective = |b: &Bfm, x: &Matrix| dot(&b.forward(x).unwrap().logits, &upstream);
        let (g, dx) = bfm_grad(&bfm, &x, &upstream).unwrap();
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        let flat = bfm.params.flatten();
        let analytic = g.flatten();
        let mut coords: Vec<usize> = (0..flat.len()).collect();
        coords.shuffle(&mut rng);
        for &i in coords.iter().take(400) {
            let mut b = bfm.clone();
            let mut v = flat.clone();
            v[i] += h;
            b.params.assign(&v).unwrap();
            let up = objective(&b, &x);
            v[i] -= 2.0 * h;
            b.params.assign(&v).unwrap();
            let down = objective(&b, &x);
            let fd = (up - down) / (2.0 * h);
            assert!(rel(analytic[i], fd) <= 1e-4, "param {i}: {} vs {fd}", analytic[i]);
        }
        for i in 0..x.as_slice().len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[i] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[i] -= h;
            let fd = (objective(&bfm, &xp) - objective(&bfm, &xm)) / (2.0 * h);
            assert!(rel(dx.as_slice()[i], fd) <= 1e-4, "input {i}");
        }
    }
}
