//! Token and temporal embeddings.
//!
//! Row `i` of the output is the mean-removed concept embedding of token `i`
//! plus `α·T_age(age) + β·T_pos(abs_position) + γ·E_seg(segment)`, where the
//! two `T` are time2vec encoders. The three mixing scalars start at zero.

use std::sync::Arc;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::params::{gaussian, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tokenizer::{EncodedSequence, NO_TIME};

/// Days per year used to express absolute positions in years before time2vec.
pub const DAYS_PER_YEAR: f64 = 365.25;

/// Scalar time2vec: component 0 is linear, the rest are cosines.
pub fn time2vec(x: f64, omega: &[f64], phi: &[f64]) -> Vec<f64> {
    omega
        .iter()
        .zip(phi)
        .enumerate()
        .map(|(z, (w, p))| if z == 0 { w * x + p } else { (w * x + p).cos() })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Embedder {
    pub d: usize,
    pub vocab_size: usize,
    pub concept: ParamId,
    pub age_omega: ParamId,
    pub age_phi: ParamId,
    pub pos_omega: ParamId,
    pub pos_phi: ParamId,
    pub segment: ParamId,
    pub alpha: ParamId,
    pub beta: ParamId,
    pub gamma: ParamId,
}

/// Per-token time inputs of one sequence, as tape-ready columns.
struct TimeColumns {
    age: Array2<f64>,
    pos: Array2<f64>,
    age_valid: Arc<Array2<f64>>,
    pos_valid: Arc<Array2<f64>>,
}

fn time_columns(seq: &EncodedSequence) -> TimeColumns {
    let l = seq.len();
    let col = |f: &dyn Fn(usize) -> f64| Array2::from_shape_fn((l, 1), |(i, _)| f(i));
    let valid = |v: &[i32]| Arc::new(col(&|i| if v[i] == NO_TIME { 0.0 } else { 1.0 }));
    TimeColumns {
        age: col(&|i| if seq.age[i] == NO_TIME { 0.0 } else { seq.age[i] as f64 }),
        pos: col(&|i| if seq.abs_position[i] == NO_TIME { 0.0 } else { seq.abs_position[i] as f64 / DAYS_PER_YEAR }),
        age_valid: valid(&seq.age),
        pos_valid: valid(&seq.abs_position),
    }
}

impl Embedder {
    pub fn new(store: &mut ParamStore, vocab_size: usize, d: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Self {
            d,
            vocab_size,
            concept: store.add("embedding.concept", gaussian(rng, (vocab_size, d), std)),
            age_omega: store.add("embedding.age.omega", gaussian(rng, (1, d), std)),
            age_phi: store.add("embedding.age.phi", gaussian(rng, (1, d), std)),
            pos_omega: store.add("embedding.position.omega", gaussian(rng, (1, d), std)),
            pos_phi: store.add("embedding.position.phi", gaussian(rng, (1, d), std)),
            segment: store.add("embedding.segment", gaussian(rng, (3, d), std)),
            alpha: store.add("embedding.mix.alpha", Array2::zeros((1, 1))),
            beta: store.add("embedding.mix.beta", Array2::zeros((1, 1))),
            gamma: store.add("embedding.mix.gamma", Array2::zeros((1, 1))),
        }
    }

    pub fn check_ids(&self, seq: &EncodedSequence) -> Result<()> {
        match seq.token_ids.iter().find(|&&t| t as usize >= self.vocab_size) {
            Some(&id) => Err(Error::TokenOutOfRange { id, size: self.vocab_size }),
            None => Ok(()),
        }
    }

    /// Mean-removed concept rows for `ids`.
    pub fn concepts(&self, tape: &mut Tape, store: &ParamStore, ids: &[u32]) -> Var {
        let e = store.var(tape, self.concept);
        let centred = tape.col_mean_center(e);
        tape.gather(centred, Arc::new(ids.iter().map(|&t| t as usize).collect()))
    }

    fn time2vec_rows(&self, tape: &mut Tape, store: &ParamStore, x: Array2<f64>, valid: Arc<Array2<f64>>, w: ParamId, b: ParamId) -> Var {
        let x = tape.constant(x);
        let w = store.var(tape, w);
        let b = store.var(tape, b);
        let lin = tape.matmul(x, w);
        let lin = tape.add_row(lin, b);
        let t = tape.time2vec_act(lin);
        tape.mul_const(t, valid)
    }

    /// Temporal part `α·T_age + β·T_pos + γ·E_seg`, L×d.
    pub fn temporal(&self, tape: &mut Tape, store: &ParamStore, seq: &EncodedSequence) -> Result<Var> {
        if let Some(&s) = seq.segment.iter().find(|&&s| s > 2) {
            return Err(Error::invalid(format!("segment {s} outside {{0,1,2}}")));
        }
        let cols = time_columns(seq);
        let age = self.time2vec_rows(tape, store, cols.age, cols.age_valid, self.age_omega, self.age_phi);
        let pos = self.time2vec_rows(tape, store, cols.pos, cols.pos_valid, self.pos_omega, self.pos_phi);
        let table = store.var(tape, self.segment);
        let seg = tape.gather(table, Arc::new(seq.segment.iter().map(|&s| s as usize).collect()));
        let (a, b, g) = (store.var(tape, self.alpha), store.var(tape, self.beta), store.var(tape, self.gamma));
        let age = tape.scale_by(age, a);
        let pos = tape.scale_by(pos, b);
        let seg = tape.scale_by(seg, g);
        let t = tape.add(age, pos);
        Ok(tape.add(t, seg))
    }

    /// Full input embedding of a sequence, L×d.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, seq: &EncodedSequence) -> Result<Var> {
        self.check_ids(seq)?;
        let c = self.concepts(tape, store, &seq.token_ids);
        let t = self.temporal(tape, store, seq)?;
        Ok(tape.add(c, t))
    }

    /// The looked-up (mean-removed) embedding matrix.
    pub fn effective_matrix(&self, store: &ParamStore) -> Array2<f64> {
        let e = store.get(self.concept);
        let mean = e.mean_axis(ndarray::Axis(0)).unwrap();
        e - &mean
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tokenizer::TemporalStamp;

    fn setup(vocab: usize, d: usize) -> (ParamStore, Embedder) {
        let mut store = ParamStore::new();
        let emb = Embedder::new(&mut store, vocab, d, &mut rng::rng(3));
        (store, emb)
    }

    fn seq(ids: Vec<u32>, stamps: Vec<TemporalStamp>) -> EncodedSequence {
        EncodedSequence {
            person_id: 0,
            abs_position: stamps.iter().map(|s| s.abs_position).collect(),
            age: stamps.iter().map(|s| s.age).collect(),
            segment: stamps.iter().map(|s| s.segment).collect(),
            padding_mask: vec![false; ids.len()],
            token_ids: ids,
        }
    }

    fn stamp(p: i32, a: i32, s: u8) -> TemporalStamp {
        TemporalStamp { abs_position: p, age: a, segment: s }
    }

    #[test]
    fn time2vec_trivial_cases() {
        assert_eq!(time2vec(3.0, &[0.0; 4], &[0.0; 4]), vec![0.0, 1.0, 1.0, 1.0]);
        let phi = [0.3, 0.2, -1.0];
        let out = time2vec(0.0, &[1.0, 2.0, 3.0], &phi);
        assert_eq!(out, vec![0.3, 0.2f64.cos(), (-1.0f64).cos()]);
    }

    #[test]
    fn zero_mix_gives_pure_mean_removed_lookup() {
        let (store, emb) = setup(7, 4);
        let s = seq(vec![0, 5, 6], vec![TemporalStamp::BACKGROUND, stamp(10, 30, 1), stamp(400, 31, 2)]);
        let mut tape = Tape::new();
        let x = emb.forward(&mut tape, &store, &s).unwrap();
        let eff = emb.effective_matrix(&store);
        for (r, &t) in s.token_ids.iter().enumerate() {
            for c in 0..4 {
                assert!((tape.value(x)[[r, c]] - eff[[t as usize, c]]).abs() < 1e-12);
            }
        }
        assert!(eff.mean_axis(ndarray::Axis(0)).unwrap().iter().all(|m| m.abs() < 1e-6));
    }

    #[test]
    fn sentinel_stamps_contribute_only_segment() {
        let (mut store, emb) = setup(6, 4);
        store.set(emb.alpha, Array2::ones((1, 1)));
        store.set(emb.beta, Array2::ones((1, 1)));
        let s = seq(vec![5], vec![TemporalStamp::BACKGROUND]);
        let mut tape = Tape::new();
        let t = emb.temporal(&mut tape, &store, &s).unwrap();
        assert!(tape.value(t).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn alpha_only_yields_time2vec_of_age() {
        let (mut store, emb) = setup(6, 4);
        store.set(emb.alpha, Array2::ones((1, 1)));
        let s = seq(vec![5], vec![stamp(100, 42, 1)]);
        let mut tape = Tape::new();
        let t = emb.temporal(&mut tape, &store, &s).unwrap();
        let w: Vec<f64> = store.get(emb.age_omega).iter().copied().collect();
        let p: Vec<f64> = store.get(emb.age_phi).iter().copied().collect();
        let expect = time2vec(42.0, &w, &p);
        for c in 0..4 {
            assert!((tape.value(t)[[0, c]] - expect[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let (store, emb) = setup(6, 4);
        let s = seq(vec![6], vec![TemporalStamp::BACKGROUND]);
        assert!(matches!(emb.forward(&mut Tape::new(), &store, &s), Err(Error::TokenOutOfRange { id: 6, size: 6 })));
    }
}
