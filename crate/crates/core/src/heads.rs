//! Task decoders on top of the encoder output.

use std::sync::Arc;

use ndarray::Array2;

use crate::embedder::Embedder;
use crate::encoder::{scale_norm, Linear};
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::params::{gaussian, ParamId, ParamStore};
use crate::rng::Rng;
use crate::synthgen::{N_ITEMS, N_LEVELS};

/// Masked-token decoder tied to the concept embeddings:
/// `scale · norm(tanh(xW+b)) · norm(E − mean(E))ᵀ`.
#[derive(Clone, Debug)]
pub struct MlmHead {
    pub dense: Linear,
    pub scale: f64,
}

impl MlmHead {
    pub fn new(store: &mut ParamStore, d: usize, scale: f64, rng: &mut Rng) -> Self {
        Self { dense: Linear::new(store, "head.mlm.dense", d, d, rng), scale }
    }

    /// Logits (rows × vocab) for the given contextual rows.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, rows: Var, emb: &Embedder) -> Var {
        let h = self.dense.forward(tape, store, rows);
        let h = tape.tanh(h);
        let h = tape.row_normalize(h);
        let e = store.var(tape, emb.concept);
        let e = tape.col_mean_center(e);
        let e = tape.row_normalize(e);
        let s = tape.matmul_nt(h, e);
        tape.scale(s, self.scale)
    }
}

/// Order-prediction decoder on the `[CLS]` row: `ScaleNorm(swish(xW₁+b₁))W₂+b₂`.
#[derive(Clone, Debug)]
pub struct SopHead {
    pub inner: Linear,
    pub norm: ParamId,
    pub outer: Linear,
}

impl SopHead {
    pub fn new(store: &mut ParamStore, d: usize, rng: &mut Rng) -> Self {
        Self {
            inner: Linear::new(store, "head.sop.inner", d, d, rng),
            norm: store.add("head.sop.norm", Array2::from_elem((1, 1), (d as f64).sqrt())),
            outer: Linear::new(store, "head.sop.outer", d, 3, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, cls: Var) -> Var {
        let h = self.inner.forward(tape, store, cls);
        let h = tape.swish(h);
        let g = store.var(tape, self.norm);
        let h = scale_norm(tape, h, g);
        self.outer.forward(tape, store, h)
    }
}

/// Additive-attention pooling over non-pad rows followed by a two-layer
/// classifier. The pooled vector is the person summary.
#[derive(Clone, Debug)]
pub struct PooledHead {
    pub attend: Linear,
    pub context: ParamId,
    pub inner: Linear,
    pub outer: Linear,
}

pub struct Pooled {
    pub weights: Var,
    pub summary: Var,
    pub logits: Var,
}

impl PooledHead {
    pub fn new(store: &mut ParamStore, d: usize, n_classes: usize, rng: &mut Rng) -> Self {
        Self {
            attend: Linear::new(store, "head.pooled.attend", d, d, rng),
            context: store.add("head.pooled.context", gaussian(rng, (d, 1), 1.0 / (d as f64).sqrt())),
            inner: Linear::new(store, "head.pooled.inner", d, d, rng),
            outer: Linear::new(store, "head.pooled.outer", d, n_classes, rng),
        }
    }

    /// Attention weights (1×L) and the weighted average (1×d).
    pub fn pool(&self, tape: &mut Tape, store: &ParamStore, x: Var, padding: &[bool]) -> Result<(Var, Var)> {
        if padding.iter().all(|&p| p) {
            return Err(Error::invalid("cannot pool a sequence with no non-pad tokens"));
        }
        let l = padding.len();
        let h = self.attend.forward(tape, store, x);
        let h = tape.tanh(h);
        let c = store.var(tape, self.context);
        let e = tape.matmul(h, c);
        let e = tape.reshape(e, (1, l));
        let mask = Array2::from_shape_fn((1, l), |(_, j)| !padding[j]);
        let w = tape.softmax(e, Some(&mask));
        let summary = tape.matmul(w, x);
        Ok((w, summary))
    }

    pub fn classify(&self, tape: &mut Tape, store: &ParamStore, summary: Var) -> Var {
        let h = self.inner.forward(tape, store, summary);
        let h = tape.swish(h);
        self.outer.forward(tape, store, h)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, padding: &[bool]) -> Result<Pooled> {
        let (weights, summary) = self.pool(tape, store, x, padding)?;
        let logits = self.classify(tape, store, summary);
        Ok(Pooled { weights, summary, logits })
    }
}

/// Multi-item ordinal decoder on the `[CLS]` row; logits are items × levels.
#[derive(Clone, Debug)]
pub struct OrdinalHead {
    pub inner: Linear,
    pub outer: Linear,
}

impl OrdinalHead {
    pub fn new(store: &mut ParamStore, d: usize, rng: &mut Rng) -> Self {
        Self {
            inner: Linear::new(store, "head.ordinal.inner", d, d, rng),
            outer: Linear::new(store, "head.ordinal.outer", d, N_ITEMS * N_LEVELS, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, cls: Var) -> Var {
        let h = self.inner.forward(tape, store, cls);
        let h = tape.swish(h);
        let o = self.outer.forward(tape, store, h);
        tape.reshape(o, (N_ITEMS, N_LEVELS))
    }
}

/// Row `i` of `x` as a 1×d var.
pub fn row(tape: &mut Tape, x: Var, i: usize) -> Var {
    tape.gather(x, Arc::new(vec![i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;

    #[test]
    fn pooling_one_token_returns_that_row() {
        let mut store = ParamStore::new();
        let head = PooledHead::new(&mut store, 3, 2, &mut rng::rng(0));
        let mut t = Tape::new();
        let x = t.constant(array![[1.0, 2.0, 3.0], [9.0, 9.0, 9.0], [4.0, 4.0, 4.0]]);
        let (w, s) = head.pool(&mut t, &store, x, &[true, false, true]).unwrap();
        assert_eq!(t.value(s), &array![[9.0, 9.0, 9.0]]);
        assert_eq!(t.value(w), &array![[0.0, 1.0, 0.0]]);
        assert!(head.pool(&mut t, &store, x, &[true; 3]).is_err());
    }

    #[test]
    fn sop_zero_weights_returns_bias() {
        let mut store = ParamStore::new();
        let head = SopHead::new(&mut store, 3, &mut rng::rng(0));
        store.set(head.outer.w, Array2::zeros((3, 3)));
        store.set(head.outer.b, array![[0.5, -1.0, 2.0]]);
        let mut t = Tape::new();
        let x = t.constant(array![[1.0, 2.0, 3.0]]);
        let y = head.forward(&mut t, &store, x);
        assert_eq!(t.value(y), &array![[0.5, -1.0, 2.0]]);
    }

    #[test]
    fn mlm_aligned_row_gets_max_logit() {
        let mut store = ParamStore::new();
        let emb = Embedder::new(&mut store, 6, 4, &mut rng::rng(1));
        let head = MlmHead::new(&mut store, 4, 10.0, &mut rng::rng(2));
        // make tanh(xW+b) equal a chosen direction: W = I, b = 0, x = atanh(target)
        store.set(head.dense.w, Array2::eye(4));
        store.set(head.dense.b, Array2::zeros((1, 4)));
        let eff = emb.effective_matrix(&store);
        let target = eff.row(5).mapv(|v| v * 0.1);
        let x = target.mapv(f64::atanh).insert_axis(ndarray::Axis(0));
        let mut t = Tape::new();
        let x = t.constant(x);
        let logits = head.forward(&mut t, &store, x, &emb);
        let v = t.value(logits);
        assert!((v[[0, 5]] - 10.0).abs() < 1e-9);
        assert!(v.iter().all(|&l| l <= 10.0 + 1e-9));
    }
}
