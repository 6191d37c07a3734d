//! Transformer encoder with mixed local-softmax and Performer heads.
//!
//! Each block is
//! `h = x + α₁·MHA(ScaleNorm(x))`, `y = h + α₂·PFF(ScaleNorm(h))`
//! with both gates starting at zero, so an untrained stack is the identity.

use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::params::{gaussian, ParamId, ParamStore};
use crate::rng::{self, Rng};

/// Smallest Performer normaliser accepted before reporting a collapse.
pub const MIN_NORMALIZER: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_local_heads: usize,
    pub local_window: usize,
    pub n_random_features: usize,
    pub pff_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { d: 64, n_layers: 2, n_heads: 4, n_local_heads: 3, local_window: 38, n_random_features: 32, pff_hidden: 256 }
    }
}

impl EncoderConfig {
    /// The full-size configuration (280 hidden, 5 layers, 10 heads of which 7 local).
    pub fn large() -> Self {
        Self { d: 280, n_layers: 5, n_heads: 10, n_local_heads: 7, local_window: 38, n_random_features: 436, pff_hidden: 2210 }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn n_performer_heads(&self) -> usize {
        self.n_heads - self.n_local_heads
    }

    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, r: String| Err(Error::config(format!("encoder.{f}"), r));
        if self.d == 0 {
            return err("d", "must be positive".into());
        }
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return err("n_heads", format!("must be positive and divide d={}", self.d));
        }
        if self.n_local_heads > self.n_heads {
            return err("n_local_heads", format!("{} exceeds n_heads={}", self.n_local_heads, self.n_heads));
        }
        if self.local_window == 0 {
            return err("local_window", "must be at least 1".into());
        }
        if self.n_random_features == 0 {
            return err("n_random_features", "must be at least 1".into());
        }
        if self.pff_hidden == 0 {
            return err("pff_hidden", "must be positive".into());
        }
        Ok(())
    }
}

/// Random projection matrices (r × d_h) for every Performer head, by layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    pub layers: Vec<Vec<Array2<f64>>>,
}

impl FeatureBank {
    pub fn draw(cfg: &EncoderConfig, seed: u64) -> Self {
        let mut r = rng::child(seed, "features");
        let layers = (0..cfg.n_layers)
            .map(|_| {
                (0..cfg.n_performer_heads())
                    .map(|_| orthogonal_features(&mut r, cfg.n_random_features, cfg.head_dim()))
                    .collect()
            })
            .collect();
        Self { layers }
    }

    /// Bank used for training step `step`.
    pub fn for_step(cfg: &EncoderConfig, seed: u64, step: u64) -> Self {
        Self::draw(cfg, rng::derive_indexed(seed, "step", step))
    }
}

/// `r` Gaussian directions in `d` dimensions, exactly orthogonal within each
/// block of `d`, with chi-distributed row norms.
pub fn orthogonal_features(rng: &mut Rng, r: usize, d: usize) -> Array2<f64> {
    let mut out = Array2::zeros((r, d));
    let mut row = 0;
    while row < r {
        let block = gaussian(rng, (d, d), 1.0);
        let mut basis: Vec<Array1<f64>> = Vec::with_capacity(d);
        for v in block.outer_iter() {
            let mut u = v.to_owned();
            for b in &basis {
                let p = u.dot(b);
                u.scaled_add(-p, b);
            }
            let n = u.dot(&u).sqrt();
            if n > 1e-10 {
                basis.push(u / n);
            }
        }
        let norms = gaussian(rng, (d, d), 1.0);
        for (k, b) in basis.iter().enumerate() {
            if row == r {
                break;
            }
            let len = norms.row(k).dot(&norms.row(k)).sqrt();
            out.row_mut(row).assign(&(b * len));
            row += 1;
        }
    }
    out
}

/// `mask[i][j]`: may query `i` attend to key `j`.
pub fn attention_mask(padding: &[bool], window: Option<usize>) -> Array2<bool> {
    let l = padding.len();
    let half = window.map(|w| w / 2);
    Array2::from_shape_fn((l, l), |(i, j)| !padding[j] && half.map_or(true, |h| i.abs_diff(j) <= h))
}

/// `softmax(QKᵀ/√d_h)V` over allowed keys.
pub fn softmax_attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: &Array2<bool>) -> Var {
    let p = softmax_weights(tape, q, k, mask);
    tape.matmul(p, v)
}

fn softmax_weights(tape: &mut Tape, q: Var, k: Var, mask: &Array2<bool>) -> Var {
    let dh = tape.shape(q).1 as f64;
    let scores = tape.matmul_nt(q, k);
    let scores = tape.scale(scores, 1.0 / dh.sqrt());
    tape.softmax(scores, Some(mask))
}

/// Softmax attention restricted to keys within `⌊w/2⌋` positions.
pub fn local_softmax_attention(tape: &mut Tape, q: Var, k: Var, v: Var, window: usize, padding: &[bool]) -> Var {
    softmax_attention(tape, q, k, v, &attention_mask(padding, Some(window)))
}

/// Feature logits `ωx − ‖x‖²/2` of rows of `x` (already scaled by `d_h^{-1/4}`).
fn feature_logits(tape: &mut Tape, x: Var, omega: &Array2<f64>) -> Var {
    let om = tape.constant(omega.clone());
    let proj = tape.matmul_nt(x, om);
    let sq = tape.square(x);
    let sq = tape.row_sum(sq);
    let sq = tape.scale(sq, -0.5);
    tape.add_col(proj, sq)
}

/// Query features are kept below `exp(QUERY_EXP_CAP)`.
const QUERY_EXP_CAP: f64 = 300.0;

struct PerformerParts {
    out: Var,
    q_feat: Var,
    k_feat: Var,
    den: Var,
}

fn performer_parts(tape: &mut Tape, q: Var, k: Var, v: Var, omega: &Array2<f64>, padding: &[bool]) -> Result<PerformerParts> {
    let l = padding.len();
    let r = omega.nrows();
    let dh = tape.shape(q).1 as f64;
    let c = dh.powf(-0.25);
    let inv_sqrt_r = 1.0 / (r as f64).sqrt();

    // keys: one global stabiliser over non-pad rows, pad rows zeroed
    let ks = tape.scale(k, c);
    let kl = feature_logits(tape, ks, omega);
    let mut kmax = f64::NEG_INFINITY;
    for (row, &pad) in tape.value(kl).outer_iter().zip(padding) {
        if !pad {
            kmax = row.fold(kmax, |a, &b| a.max(b));
        }
    }
    if kmax == f64::NEG_INFINITY {
        kmax = 0.0;
    }
    let kl = tape.add_const(kl, &Array2::from_elem((1, 1), -kmax));
    let k_feat = tape.exp(kl);
    let k_feat = tape.scale(k_feat, inv_sqrt_r);
    let keep = Arc::new(Array2::from_shape_fn((l, 1), |(i, _)| if padding[i] { 0.0 } else { 1.0 }));
    let k_feat = tape.mul_const(k_feat, keep);
    let ksum = tape.col_sum(k_feat);

    // queries: per-row stabiliser chosen so the largest term of the
    // normaliser is exactly 1/r; it cancels in the ratio
    let qs = tape.scale(q, c);
    let ql = feature_logits(tape, qs, omega);
    let log_mass: Vec<f64> = tape.value(ksum).iter().map(|&m| (m * (r as f64).sqrt()).ln()).collect();
    let stab = Array2::from_shape_fn((l, 1), |(i, _)| {
        let row = tape.value(ql).row(i);
        let plain = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let balanced = row.iter().zip(&log_mass).fold(f64::NEG_INFINITY, |a, (&x, &m)| a.max(x + m));
        -balanced.max(plain - QUERY_EXP_CAP)
    });
    let ql = tape.add_const(ql, &stab);
    let q_feat = tape.exp(ql);
    let q_feat = tape.scale(q_feat, inv_sqrt_r);

    let kv = tape.matmul_tn(k_feat, v);
    let num = tape.matmul(q_feat, kv);
    let den = tape.matmul_nt(q_feat, ksum);
    let mut patch = Array2::zeros((l, 1));
    for (i, &d) in tape.value(den).iter().enumerate() {
        if !d.is_finite() || d < MIN_NORMALIZER {
            if padding[i] {
                patch[[i, 0]] = 1.0;
            } else {
                return Err(Error::CollapsedNormalizer { row: i, value: d });
            }
        }
    }
    let den = tape.add_const(den, &patch);
    let out = tape.div_col(num, den);
    Ok(PerformerParts { out, q_feat, k_feat, den })
}

/// FAVOR+ attention `D̂⁻¹(Q′(K′ᵀV))`, `D̂ = diag(Q′(K′ᵀ1))`. Never forms an
/// L×L matrix; padded keys contribute nothing.
pub fn performer_attention(tape: &mut Tape, q: Var, k: Var, v: Var, omega: &Array2<f64>, padding: &[bool]) -> Result<Var> {
    Ok(performer_parts(tape, q, k, v, omega, padding)?.out)
}

/// `g·x/‖x‖` per row.
pub fn scale_norm(tape: &mut Tape, x: Var, g: Var) -> Var {
    let n = tape.row_normalize(x);
    tape.scale_by(n, g)
}

/// Dense layer `xW + b`.
pub fn dense(tape: &mut Tape, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Var {
    let w = store.var(tape, w);
    let b = store.var(tape, b);
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        Self {
            w: store.add(format!("{name}.weight"), gaussian(rng, (fan_in, fan_out), 1.0 / (fan_in as f64).sqrt())),
            b: store.add(format!("{name}.bias"), Array2::zeros((1, fan_out))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        dense(tape, store, x, self.w, self.b)
    }
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub norm_attn: ParamId,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub gate_attn: ParamId,
    pub norm_pff: ParamId,
    pub pff_in: Linear,
    pub pff_out: Linear,
    pub gate_pff: ParamId,
}

/// Position-wise `swish(xW₁+b₁)W₂+b₂`.
pub fn pff(tape: &mut Tape, store: &ParamStore, x: Var, inner: &Linear, outer: &Linear) -> Var {
    let h = inner.forward(tape, store, x);
    let h = tape.swish(h);
    outer.forward(tape, store, h)
}

/// Attention matrices of one forward pass: `[layer][head]`, each L×L, local
/// heads first. Performer entries are the implied `q′ᵢ·k′ⱼ / D̂ᵢ`.
pub type AttentionTrace = Vec<Vec<Array2<f64>>>;

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub layers: Vec<Layer>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("encoder.{l}");
                Layer {
                    norm_attn: store.add(format!("{p}.attn.norm"), Array2::from_elem((1, 1), (d as f64).sqrt())),
                    query: Linear::new(store, &format!("{p}.attn.query"), d, d, rng),
                    key: Linear::new(store, &format!("{p}.attn.key"), d, d, rng),
                    value: Linear::new(store, &format!("{p}.attn.value"), d, d, rng),
                    output: Linear::new(store, &format!("{p}.attn.output"), d, d, rng),
                    gate_attn: store.add(format!("{p}.attn.gate"), Array2::zeros((1, 1))),
                    norm_pff: store.add(format!("{p}.pff.norm"), Array2::from_elem((1, 1), (d as f64).sqrt())),
                    pff_in: Linear::new(store, &format!("{p}.pff.inner"), d, cfg.pff_hidden, rng),
                    pff_out: Linear::new(store, &format!("{p}.pff.outer"), cfg.pff_hidden, d, rng),
                    gate_pff: store.add(format!("{p}.pff.gate"), Array2::zeros((1, 1))),
                }
            })
            .collect();
        Ok(Self { cfg: cfg.clone(), layers })
    }

    /// Multi-head attention of one layer (before its gate).
    pub fn attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: usize,
        x: Var,
        padding: &[bool],
        bank: &FeatureBank,
        mut trace: Option<&mut Vec<Array2<f64>>>,
    ) -> Result<Var> {
        let ly = &self.layers[layer];
        let dh = self.cfg.head_dim();
        let q = ly.query.forward(tape, store, x);
        let k = ly.key.forward(tape, store, x);
        let v = ly.value.forward(tape, store, x);
        let local_mask = attention_mask(padding, Some(self.cfg.local_window));
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = (tape.slice_cols(q, a, b), tape.slice_cols(k, a, b), tape.slice_cols(v, a, b));
            if h < self.cfg.n_local_heads {
                let p = softmax_weights(tape, qh, kh, &local_mask);
                if let Some(t) = trace.as_deref_mut() {
                    t.push(tape.value(p).clone());
                }
                heads.push(tape.matmul(p, vh));
            } else {
                let omega = &bank.layers[layer][h - self.cfg.n_local_heads];
                let parts = performer_parts(tape, qh, kh, vh, omega, padding)?;
                if let Some(t) = trace.as_deref_mut() {
                    let a = tape.value(parts.q_feat).dot(&tape.value(parts.k_feat).t());
                    t.push(a / tape.value(parts.den));
                }
                heads.push(parts.out);
            }
        }
        let cat = tape.concat_cols(&heads);
        Ok(ly.output.forward(tape, store, cat))
    }

    pub fn block(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: usize,
        x: Var,
        padding: &[bool],
        bank: &FeatureBank,
        trace: Option<&mut Vec<Array2<f64>>>,
    ) -> Result<Var> {
        let ly = &self.layers[layer];
        let g = store.var(tape, ly.norm_attn);
        let n = scale_norm(tape, x, g);
        let a = self.attention(tape, store, layer, n, padding, bank, trace)?;
        let gate = store.var(tape, ly.gate_attn);
        let a = tape.scale_by(a, gate);
        let h = tape.add(x, a);
        let g = store.var(tape, ly.norm_pff);
        let n = scale_norm(tape, h, g);
        let f = pff(tape, store, n, &ly.pff_in, &ly.pff_out);
        let gate = store.var(tape, ly.gate_pff);
        let f = tape.scale_by(f, gate);
        Ok(tape.add(h, f))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, padding: &[bool], bank: &FeatureBank) -> Result<Var> {
        self.run(tape, store, x, padding, bank, None)
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        padding: &[bool],
        bank: &FeatureBank,
    ) -> Result<(Var, AttentionTrace)> {
        let mut trace = Vec::new();
        let y = self.run(tape, store, x, padding, bank, Some(&mut trace))?;
        Ok((y, trace))
    }

    fn run(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mut x: Var,
        padding: &[bool],
        bank: &FeatureBank,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        if bank.layers.len() < self.layers.len() {
            return Err(Error::invalid("feature bank has fewer layers than the encoder"));
        }
        for l in 0..self.layers.len() {
            let mut layer_trace = Vec::new();
            let t = trace.as_ref().map(|_| &mut layer_trace);
            x = self.block(tape, store, l, x, padding, bank, t)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(layer_trace);
            }
        }
        Ok(x)
    }
}

/// Mean attention each key receives from non-pad queries (rows of `a` summed
/// over queries and divided by their count).
pub fn received_attention(a: &Array2<f64>, padding: &[bool]) -> Vec<f64> {
    let n = padding.iter().filter(|&&p| !p).count().max(1) as f64;
    let mut out = vec![0.0; a.ncols()];
    for (row, &p) in a.outer_iter().zip(padding) {
        if !p {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v / n;
            }
        }
    }
    out
}

/// Sum over axis 1 helper for tests and diagnostics.
pub fn row_sums(a: &Array2<f64>) -> Vec<f64> {
    a.sum_axis(Axis(1)).to_vec()
}
