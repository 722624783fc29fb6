//! Pre-norm decoder-only transformer with a last-token classification head.
//!
//! Parameters live in one flat `Vec<f32>`; [`Layout`] names the segments.
//! Weight matrices are stored `[in, out]` row-major.

use std::ops::Range;

use alchemy_core::codec::{NUM_CLASSES, PAD, VOCAB_SIZE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ops::{cross_entropy, gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward};
use crate::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    #[default]
    LearnedAbsolute,
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub dropout: f32,
    pub vocab_size: usize,
    pub n_classes: usize,
    pub max_seq_len: usize,
    pub positional: Positional,
    pub init_std: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 256,
            d_ff: 512,
            n_heads: 4,
            dropout: 0.1,
            vocab_size: VOCAB_SIZE,
            n_classes: NUM_CLASSES,
            max_seq_len: 192,
            positional: Positional::LearnedAbsolute,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 {
            return bad("n_layers, d_model, d_ff and n_heads must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.positional == Positional::Sinusoidal && !self.d_model.is_multiple_of(2) {
            return bad("sinusoidal positions need an even d_model".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size == 0 || self.n_classes == 0 || self.max_seq_len == 0 {
            return bad("vocab_size, n_classes and max_seq_len must be positive".into());
        }
        if (PAD as usize) >= self.vocab_size {
            return bad(format!("vocab_size {} does not contain the PAD token", self.vocab_size));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return bad(format!("init_std {} must be positive", self.init_std));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        let pos = match self.positional {
            Positional::LearnedAbsolute => self.max_seq_len * d,
            Positional::Sinusoidal => 0,
        };
        let block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        self.vocab_size * d + pos + self.n_layers * block + 2 * d + d * self.n_classes + self.n_classes
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BlockLayout {
    ln1_g: Range<usize>,
    ln1_b: Range<usize>,
    w_qkv: Range<usize>,
    b_qkv: Range<usize>,
    w_o: Range<usize>,
    b_o: Range<usize>,
    ln2_g: Range<usize>,
    ln2_b: Range<usize>,
    w_fc1: Range<usize>,
    b_fc1: Range<usize>,
    w_fc2: Range<usize>,
    b_fc2: Range<usize>,
}

/// A named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub range: Range<usize>,
    /// Matrices and embeddings; biases and norm parameters are excluded.
    pub decay: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    tok_emb: Range<usize>,
    pos_emb: Option<Range<usize>>,
    blocks: Vec<BlockLayout>,
    lnf_g: Range<usize>,
    lnf_b: Range<usize>,
    head_w: Range<usize>,
    head_b: Range<usize>,
    segments: Vec<Segment>,
    total: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut segments = Vec::new();
        let mut at = 0usize;
        let mut take = |name: String, len: usize, decay: bool| {
            let r = at..at + len;
            at += len;
            segments.push(Segment {
                name,
                range: r.clone(),
                decay,
            });
            r
        };
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let tok_emb = take("tok_emb".into(), cfg.vocab_size * d, true);
        let pos_emb = (cfg.positional == Positional::LearnedAbsolute).then(|| take("pos_emb".into(), cfg.max_seq_len * d, true));
        let blocks = (0..cfg.n_layers)
            .map(|l| BlockLayout {
                ln1_g: take(format!("h{l}.ln1.g"), d, false),
                ln1_b: take(format!("h{l}.ln1.b"), d, false),
                w_qkv: take(format!("h{l}.attn.w_qkv"), d * 3 * d, true),
                b_qkv: take(format!("h{l}.attn.b_qkv"), 3 * d, false),
                w_o: take(format!("h{l}.attn.w_o"), d * d, true),
                b_o: take(format!("h{l}.attn.b_o"), d, false),
                ln2_g: take(format!("h{l}.ln2.g"), d, false),
                ln2_b: take(format!("h{l}.ln2.b"), d, false),
                w_fc1: take(format!("h{l}.mlp.w_fc1"), d * f, true),
                b_fc1: take(format!("h{l}.mlp.b_fc1"), f, false),
                w_fc2: take(format!("h{l}.mlp.w_fc2"), f * d, true),
                b_fc2: take(format!("h{l}.mlp.b_fc2"), d, false),
            })
            .collect();
        let lnf_g = take("ln_f.g".into(), d, false);
        let lnf_b = take("ln_f.b".into(), d, false);
        let head_w = take("head.w".into(), d * cfg.n_classes, true);
        let head_b = take("head.b".into(), cfg.n_classes, false);
        Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            segments,
            total: at,
        }
    }
}

/// Logits of shape `(batch, seq, n_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub batch: usize,
    pub seq: usize,
    pub n_classes: usize,
    pub data: Vec<f32>,
}

impl Logits {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.seq, self.n_classes)
    }

    pub fn at(&self, b: usize, t: usize) -> &[f32] {
        let o = (b * self.seq + t) * self.n_classes;
        &self.data[o..o + self.n_classes]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    cfg: ModelConfig,
    layout: Layout,
    params: Vec<f32>,
}

impl PartialEq for Layout {
    fn eq(&self, other: &Self) -> bool {
        self.segments == other.segments
    }
}

struct BlockCache {
    xhat1: Vec<f32>,
    rstd1: Vec<f32>,
    h1: Vec<f32>,
    qkv: Vec<f32>,
    probs: Vec<f32>,
    attn: Vec<f32>,
    drop1: Option<Vec<f32>>,
    xhat2: Vec<f32>,
    rstd2: Vec<f32>,
    h2: Vec<f32>,
    pre: Vec<f32>,
    act: Vec<f32>,
    drop2: Option<Vec<f32>>,
}

struct Cache {
    t: usize,
    tokens: Vec<u8>,
    positions: Vec<usize>,
    drop0: Option<Vec<f32>>,
    blocks: Vec<BlockCache>,
    xhatf: Vec<f32>,
    rstdf: Vec<f32>,
    hf: Vec<f32>,
}

fn dropout_mask(rng: &mut ChaCha8Rng, p: f32, n: usize) -> Vec<f32> {
    let keep = 1.0 / (1.0 - p);
    (0..n).map(|_| if rng.random::<f32>() < p { 0.0 } else { keep }).collect()
}

fn apply_mask(x: &mut [f32], mask: &Option<Vec<f32>>) {
    if let Some(m) = mask {
        for (v, s) in x.iter_mut().zip(m) {
            *v *= s;
        }
    }
}

/// Position of each token counted over non-pad tokens before it.
pub fn content_positions(tokens: &[u8]) -> Vec<usize> {
    let mut seen = 0;
    tokens
        .iter()
        .map(|&tok| {
            let p = seen;
            if tok != PAD {
                seen += 1;
            }
            p
        })
        .collect()
}

fn sinusoid(pos: usize, i: usize, d: usize) -> f32 {
    let freq = 1.0 / 10000f64.powf((i / 2 * 2) as f64 / d as f64);
    let a = pos as f64 * freq;
    (if i.is_multiple_of(2) { a.sin() } else { a.cos() }) as f32
}

impl Transformer {
    /// Deterministic initialization from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut params = vec![0.0f32; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = cfg.init_std;
        let resid_std = std / (2.0 * cfg.n_layers as f32).sqrt();
        let mut fill = |params: &mut [f32], r: &Range<usize>, s: f32| {
            let dist = Normal::new(0.0, s).expect("positive std");
            for v in &mut params[r.clone()] {
                *v = dist.sample(&mut rng);
            }
        };
        fill(&mut params, &layout.tok_emb, std);
        if let Some(p) = &layout.pos_emb {
            fill(&mut params, p, std);
        }
        for b in &layout.blocks {
            params[b.ln1_g.clone()].fill(1.0);
            params[b.ln2_g.clone()].fill(1.0);
            fill(&mut params, &b.w_qkv, std);
            fill(&mut params, &b.w_o, resid_std);
            fill(&mut params, &b.w_fc1, std);
            fill(&mut params, &b.w_fc2, resid_std);
        }
        params[layout.lnf_g.clone()].fill(1.0);
        fill(&mut params, &layout.head_w, std * 0.1);
        Ok(Self { cfg, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn segments(&self) -> &[Segment] {
        &self.layout.segments
    }

    pub fn set_params(&mut self, params: Vec<f32>) -> Result<(), ModelError> {
        if params.len() != self.params.len() {
            return Err(ModelError::ShapeMismatch {
                what: "parameters",
                expected: self.params.len(),
                got: params.len(),
            });
        }
        self.params = params;
        Ok(())
    }

    /// Parameter range for a named segment.
    pub fn segment(&self, name: &str) -> Option<Range<usize>> {
        self.layout.segments.iter().find(|s| s.name == name).map(|s| s.range.clone())
    }

    fn check_tokens(&self, tokens: &[u8]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::ShapeMismatch {
                what: "sequence length",
                expected: 1,
                got: 0,
            });
        }
        if tokens.len() > self.cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.cfg.max_seq_len,
            });
        }
        if let Some((position, &token)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= self.cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange { token, position });
        }
        Ok(())
    }

    /// Logits at every position, dropout disabled. `tokens` is `batch * seq` row-major.
    pub fn forward(&self, tokens: &[u8], batch: usize, seq: usize) -> Result<Logits, ModelError> {
        if tokens.len() != batch * seq {
            return Err(ModelError::ShapeMismatch {
                what: "token batch",
                expected: batch * seq,
                got: tokens.len(),
            });
        }
        let c = self.cfg.n_classes;
        let d = self.cfg.d_model;
        let mut data = vec![0.0f32; batch * seq * c];
        for (row, out) in tokens.chunks_exact(seq.max(1)).zip(data.chunks_exact_mut(seq * c)) {
            self.check_tokens(row)?;
            let cache = self.run(row, None);
            linear(&cache.hf, &self.params[self.layout.head_w.clone()], &self.params[self.layout.head_b.clone()], seq, d, c, out);
        }
        Ok(Logits {
            batch,
            seq,
            n_classes: c,
            data,
        })
    }

    /// Logits at the final position of one sequence, dropout disabled.
    pub fn final_logits(&self, tokens: &[u8]) -> Result<Vec<f32>, ModelError> {
        self.check_tokens(tokens)?;
        let cache = self.run(tokens, None);
        Ok(self.head_last(&cache))
    }

    fn head_last(&self, cache: &Cache) -> Vec<f32> {
        let (d, c) = (self.cfg.d_model, self.cfg.n_classes);
        let mut logits = vec![0.0f32; c];
        let last = &cache.hf[(cache.t - 1) * d..cache.t * d];
        linear(last, &self.params[self.layout.head_w.clone()], &self.params[self.layout.head_b.clone()], 1, d, c, &mut logits);
        logits
    }

    /// Cross-entropy at the final position. Adds `scale * dloss/dparams` into `grad`
    /// and returns the unscaled loss and the final logits. Dropout is active when
    /// `dropout_seed` is given and the configured rate is positive.
    pub fn loss_and_grad(
        &self,
        tokens: &[u8],
        label: usize,
        dropout_seed: Option<u64>,
        scale: f32,
        grad: &mut [f32],
    ) -> Result<(f64, Vec<f32>), ModelError> {
        self.check_tokens(tokens)?;
        if label >= self.cfg.n_classes {
            return Err(ModelError::LabelOutOfRange(label));
        }
        if grad.len() != self.params.len() {
            return Err(ModelError::ShapeMismatch {
                what: "gradient buffer",
                expected: self.params.len(),
                got: grad.len(),
            });
        }
        let mut rng = dropout_seed
            .filter(|_| self.cfg.dropout > 0.0)
            .map(ChaCha8Rng::seed_from_u64);
        let cache = self.run(tokens, rng.as_mut());
        let logits = self.head_last(&cache);
        let mut dlogits = vec![0.0f32; logits.len()];
        let loss = cross_entropy(&logits, label, &mut dlogits, scale);
        self.backward(&cache, &dlogits, grad);
        Ok((loss, logits))
    }

    fn run(&self, tokens: &[u8], mut rng: Option<&mut ChaCha8Rng>) -> Cache {
        let cfg = &self.cfg;
        let p = &self.params;
        let (t, d, f) = (tokens.len(), cfg.d_model, cfg.d_ff);
        let positions = content_positions(tokens);
        let pad: Vec<bool> = tokens.iter().map(|&tok| tok == PAD).collect();

        let mut x = vec![0.0f32; t * d];
        let tok_emb = &p[self.layout.tok_emb.clone()];
        for (j, row) in x.chunks_exact_mut(d).enumerate() {
            let e = &tok_emb[tokens[j] as usize * d..(tokens[j] as usize + 1) * d];
            match &self.layout.pos_emb {
                Some(r) => {
                    let pe = &p[r.start + positions[j] * d..r.start + (positions[j] + 1) * d];
                    for i in 0..d {
                        row[i] = e[i] + pe[i];
                    }
                }
                None => {
                    for i in 0..d {
                        row[i] = e[i] + sinusoid(positions[j], i, d);
                    }
                }
            }
        }
        let mut mask = |n: usize| rng.as_deref_mut().map(|r| dropout_mask(r, cfg.dropout, n));
        let drop0 = mask(t * d);
        apply_mask(&mut x, &drop0);

        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for b in &self.layout.blocks {
            let mut xhat1 = vec![0.0; t * d];
            let mut rstd1 = vec![0.0; t];
            let mut h1 = vec![0.0; t * d];
            layer_norm(&x, &p[b.ln1_g.clone()], &p[b.ln1_b.clone()], d, &mut h1, &mut xhat1, &mut rstd1);
            let mut qkv = vec![0.0; t * 3 * d];
            linear(&h1, &p[b.w_qkv.clone()], &p[b.b_qkv.clone()], t, d, 3 * d, &mut qkv);
            let (probs, attn) = self.attention(&qkv, &pad, t);
            let mut o = vec![0.0; t * d];
            linear(&attn, &p[b.w_o.clone()], &p[b.b_o.clone()], t, d, d, &mut o);
            let drop1 = mask(t * d);
            apply_mask(&mut o, &drop1);
            for (xv, ov) in x.iter_mut().zip(&o) {
                *xv += ov;
            }

            let mut xhat2 = vec![0.0; t * d];
            let mut rstd2 = vec![0.0; t];
            let mut h2 = vec![0.0; t * d];
            layer_norm(&x, &p[b.ln2_g.clone()], &p[b.ln2_b.clone()], d, &mut h2, &mut xhat2, &mut rstd2);
            let mut pre = vec![0.0; t * f];
            linear(&h2, &p[b.w_fc1.clone()], &p[b.b_fc1.clone()], t, d, f, &mut pre);
            let act: Vec<f32> = pre.iter().map(|&v| gelu(v)).collect();
            let mut out = vec![0.0; t * d];
            linear(&act, &p[b.w_fc2.clone()], &p[b.b_fc2.clone()], t, f, d, &mut out);
            let drop2 = mask(t * d);
            apply_mask(&mut out, &drop2);
            for (xv, ov) in x.iter_mut().zip(&out) {
                *xv += ov;
            }
            blocks.push(BlockCache {
                xhat1,
                rstd1,
                h1,
                qkv,
                probs,
                attn,
                drop1,
                xhat2,
                rstd2,
                h2,
                pre,
                act,
                drop2,
            });
        }
        let mut xhatf = vec![0.0; t * d];
        let mut rstdf = vec![0.0; t];
        let mut hf = vec![0.0; t * d];
        layer_norm(&x, &p[self.layout.lnf_g.clone()], &p[self.layout.lnf_b.clone()], d, &mut hf, &mut xhatf, &mut rstdf);
        Cache {
            t,
            tokens: tokens.to_vec(),
            positions,
            drop0,
            blocks,
            xhatf,
            rstdf,
            hf,
        }
    }

    /// Causal self-attention. A position never attends to pad keys other than itself.
    fn attention(&self, qkv: &[f32], pad: &[bool], t: usize) -> (Vec<f32>, Vec<f32>) {
        let d = self.cfg.d_model;
        let nh = self.cfg.n_heads;
        let dh = d / nh;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut probs = vec![0.0f32; nh * t * t];
        let mut attn = vec![0.0f32; t * d];
        for h in 0..nh {
            let s = &mut probs[h * t * t..(h + 1) * t * t];
            crate::ops::gemm(t, dh, t, scale, &qkv[h * dh..], (3 * d, 1), &qkv[d + h * dh..], (1, 3 * d), 0.0, s, (t, 1));
            for (i, row) in s.chunks_exact_mut(t).enumerate() {
                let allowed = |j: usize| j <= i && (!pad[j] || j == i);
                let mut max = f32::NEG_INFINITY;
                for (j, &v) in row.iter().enumerate() {
                    if allowed(j) && v > max {
                        max = v;
                    }
                }
                let mut sum = 0.0f32;
                for (j, v) in row.iter_mut().enumerate() {
                    if allowed(j) {
                        *v = (*v - max).exp();
                        sum += *v;
                    } else {
                        *v = 0.0;
                    }
                }
                let inv = 1.0 / sum;
                for v in row.iter_mut() {
                    *v *= inv;
                }
            }
            crate::ops::gemm(t, t, dh, 1.0, s, (t, 1), &qkv[2 * d + h * dh..], (3 * d, 1), 0.0, &mut attn[h * dh..], (d, 1));
        }
        (probs, attn)
    }

    fn backward(&self, cache: &Cache, dlogits: &[f32], grad: &mut [f32]) {
        let cfg = &self.cfg;
        let p = &self.params;
        let l = &self.layout;
        let (t, d, f) = (cache.t, cfg.d_model, cfg.d_ff);
        let nh = cfg.n_heads;
        let dh = d / nh;
        let scale = 1.0 / (dh as f32).sqrt();

        let last = t - 1;
        let mut dhf_last = vec![0.0f32; d];
        {
            let (dw, db) = split_two(grad, &l.head_w, &l.head_b);
            linear_backward(
                &cache.hf[last * d..t * d],
                &p[l.head_w.clone()],
                dlogits,
                1,
                d,
                cfg.n_classes,
                dw,
                db,
                Some(&mut dhf_last),
            );
        }
        let mut dx = vec![0.0f32; t * d];
        {
            let (dg, db) = split_two(grad, &l.lnf_g, &l.lnf_b);
            layer_norm_backward(
                &dhf_last,
                &cache.xhatf[last * d..t * d],
                &cache.rstdf[last..t],
                &p[l.lnf_g.clone()],
                d,
                dg,
                db,
                &mut dx[last * d..t * d],
            );
        }

        let mut dtmp = vec![0.0f32; t * d];
        let mut dact = vec![0.0f32; t * f];
        let mut dqkv = vec![0.0f32; t * 3 * d];
        let mut dprob = vec![0.0f32; t * t];
        for (b, c) in l.blocks.iter().zip(&cache.blocks).rev() {
            // Feed-forward branch.
            let mut dbranch = dx.clone();
            apply_mask(&mut dbranch, &c.drop2);
            {
                let (dw, db) = split_two(grad, &b.w_fc2, &b.b_fc2);
                linear_backward(&c.act, &p[b.w_fc2.clone()], &dbranch, t, f, d, dw, db, Some(&mut dact));
            }
            for (g, &z) in dact.iter_mut().zip(&c.pre) {
                *g *= gelu_grad(z);
            }
            {
                let (dw, db) = split_two(grad, &b.w_fc1, &b.b_fc1);
                linear_backward(&c.h2, &p[b.w_fc1.clone()], &dact, t, d, f, dw, db, Some(&mut dtmp));
            }
            {
                let (dg, db) = split_two(grad, &b.ln2_g, &b.ln2_b);
                layer_norm_backward(&dtmp, &c.xhat2, &c.rstd2, &p[b.ln2_g.clone()], d, dg, db, &mut dx);
            }

            // Attention branch.
            let mut dbranch = dx.clone();
            apply_mask(&mut dbranch, &c.drop1);
            let mut dattn = vec![0.0f32; t * d];
            {
                let (dw, db) = split_two(grad, &b.w_o, &b.b_o);
                linear_backward(&c.attn, &p[b.w_o.clone()], &dbranch, t, d, d, dw, db, Some(&mut dattn));
            }
            dqkv.fill(0.0);
            for h in 0..nh {
                let probs = &c.probs[h * t * t..(h + 1) * t * t];
                let (q_off, k_off, v_off) = (h * dh, d + h * dh, 2 * d + h * dh);
                // dP = dA · Vᵀ
                crate::ops::gemm(t, dh, t, 1.0, &dattn[h * dh..], (d, 1), &c.qkv[v_off..], (1, 3 * d), 0.0, &mut dprob, (t, 1));
                // dV = Pᵀ · dA
                crate::ops::gemm(t, t, dh, 1.0, probs, (1, t), &dattn[h * dh..], (d, 1), 0.0, &mut dqkv[v_off..], (3 * d, 1));
                for (prow, drow) in probs.chunks_exact(t).zip(dprob.chunks_exact_mut(t)) {
                    let dot: f32 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                    for (dv, &pv) in drow.iter_mut().zip(prow) {
                        *dv = pv * (*dv - dot);
                    }
                }
                // dQ = dS · K, dK = dSᵀ · Q
                crate::ops::gemm(t, t, dh, scale, &dprob, (t, 1), &c.qkv[k_off..], (3 * d, 1), 0.0, &mut dqkv[q_off..], (3 * d, 1));
                crate::ops::gemm(t, t, dh, scale, &dprob, (1, t), &c.qkv[q_off..], (3 * d, 1), 0.0, &mut dqkv[k_off..], (3 * d, 1));
            }
            {
                let (dw, db) = split_two(grad, &b.w_qkv, &b.b_qkv);
                linear_backward(&c.h1, &p[b.w_qkv.clone()], &dqkv, t, d, 3 * d, dw, db, Some(&mut dtmp));
            }
            {
                let (dg, db) = split_two(grad, &b.ln1_g, &b.ln1_b);
                layer_norm_backward(&dtmp, &c.xhat1, &c.rstd1, &p[b.ln1_g.clone()], d, dg, db, &mut dx);
            }
        }

        apply_mask(&mut dx, &cache.drop0);
        let tokens = &cache.tokens;
        for (j, row) in dx.chunks_exact(d).enumerate() {
            let te = l.tok_emb.start + tokens[j] as usize * d;
            for (g, v) in grad[te..te + d].iter_mut().zip(row) {
                *g += v;
            }
            if let Some(r) = &l.pos_emb {
                let pe = r.start + cache.positions[j] * d;
                for (g, v) in grad[pe..pe + d].iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
    }
}

/// Disjoint mutable views of two segments, `a` before `b`.
fn split_two<'a>(grad: &'a mut [f32], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [f32], &'a mut [f32]) {
    debug_assert!(a.end <= b.start);
    let (left, right) = grad.split_at_mut(b.start);
    (&mut left[a.clone()], &mut right[..b.len()])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            d_ff: 32,
            n_heads: 2,
            max_seq_len: 24,
            ..Default::default()
        }
    }

    #[test]
    fn closed_form_count_matches_layout() {
        for cfg in [ModelConfig::default(), small()] {
            let m = Transformer::new(cfg.clone(), 0).unwrap();
            assert_eq!(m.num_params(), cfg.param_count());
            let covered: usize = m.segments().iter().map(|s| s.range.len()).sum();
            assert_eq!(covered, m.num_params());
        }
        assert_eq!(ModelConfig::default().param_count(), 2_191_724);
        let sin = ModelConfig {
            positional: Positional::Sinusoidal,
            ..ModelConfig::default()
        };
        assert_eq!(sin.param_count(), 2_191_724 - 192 * 256);
    }

    #[test]
    fn invalid_configs() {
        let bad_heads = ModelConfig {
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(Transformer::new(bad_heads, 0), Err(ModelError::InvalidConfig(_))));
        let bad_dropout = ModelConfig {
            dropout: 1.0,
            ..ModelConfig::default()
        };
        assert!(bad_dropout.validate().is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = Transformer::new(small(), 3).unwrap();
        let b = Transformer::new(small(), 3).unwrap();
        let c = Transformer::new(small(), 4).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        let g = a.segment("h0.ln1.g").unwrap();
        assert!(a.params()[g].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn content_positions_skip_padding() {
        assert_eq!(content_positions(&[PAD, PAD, 1, 2, PAD, 3]), vec![0, 0, 0, 1, 2, 2]);
    }

    #[test]
    fn input_errors() {
        let m = Transformer::new(small(), 0).unwrap();
        assert!(matches!(m.forward(&[1, 2, 3], 2, 2), Err(ModelError::ShapeMismatch { .. })));
        assert!(matches!(m.final_logits(&[1, 23]), Err(ModelError::TokenOutOfRange { token: 23, position: 1 })));
        assert!(matches!(m.final_logits(&[1; 25]), Err(ModelError::SequenceTooLong { .. })));
        let mut g = vec![0.0; m.num_params()];
        assert!(matches!(m.loss_and_grad(&[1, 2], 108, None, 1.0, &mut g), Err(ModelError::LabelOutOfRange(108))));
    }

    #[test]
    fn final_logits_match_full_forward() {
        let m = Transformer::new(small(), 1).unwrap();
        let toks = [PAD, 0, 4, 7, 10, 13, 20];
        let full = m.forward(&toks, 1, toks.len()).unwrap();
        assert_eq!(full.shape(), (1, 7, 108));
        let last = m.final_logits(&toks).unwrap();
        for (a, b) in full.at(0, 6).iter().zip(&last) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn pad_embedding_gets_no_gradient() {
        let m = Transformer::new(small(), 2).unwrap();
        let toks = [PAD, PAD, PAD, 1, 4, 7, 12, 13, 20, 2, 5, 8, 9, 19, 21, 1, 4, 7, 12, 14, 20];
        let mut g = vec![0.0f32; m.num_params()];
        m.loss_and_grad(&toks, 17, Some(3), 1.0, &mut g).unwrap();
        let r = m.segment("tok_emb").unwrap();
        let d = m.config().d_model;
        let pad_row = &g[r.start + PAD as usize * d..r.start + (PAD as usize + 1) * d];
        assert!(pad_row.iter().all(|&v| v == 0.0));
        let used_row = &g[r.start + d..r.start + 2 * d];
        assert!(used_row.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn eval_ignores_dropout_config() {
        let m = Transformer::new(small(), 2).unwrap();
        let toks = [0, 4, 7, 10, 13, 20];
        assert_eq!(m.final_logits(&toks).unwrap(), m.final_logits(&toks).unwrap());
        let mut g1 = vec![0.0f32; m.num_params()];
        let mut g2 = vec![0.0f32; m.num_params()];
        let (l1, _) = m.loss_and_grad(&toks, 3, Some(1), 1.0, &mut g1).unwrap();
        let (l2, _) = m.loss_and_grad(&toks, 3, Some(2), 1.0, &mut g2).unwrap();
        assert_ne!(l1, l2);
    }
}
