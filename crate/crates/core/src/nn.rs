//! Parameterized layers shared by the encoder, sampler and decoder. Layers
//! hold only [`ParamId`]s; values live in a [`ParamStore`] and are bound to a
//! tape per forward pass.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Bound, ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Additive score for disallowed attention pairs. Finite so the tape's
/// finiteness check stays meaningful; `exp` of it underflows to exactly 0.
pub const MASKED: f64 = -1e9;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.randn(&format!("{name}.w"), &[d_in, d_out], (1.0 / d_in as f64).sqrt(), rng);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[d_out])));
        Linear { w, b, d_in, d_out }
    }

    /// Applies to the last axis of `x`.
    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.d_in) {
            return Err(Error::dim(format!("linear expects last dim {}, got {shape:?}", self.d_in)));
        }
        let rows = shape[..shape.len() - 1].iter().product();
        let flat = if shape.len() == 2 { x } else { tape.reshape(x, &[rows, self.d_in])? };
        let mut y = tape.matmul(flat, p.var(self.w))?;
        if let Some(b) = self.b {
            y = tape.add(y, p.var(b))?;
        }
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.d_out;
        tape.reshape(y, &out_shape)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta), LN_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Real>(store: &mut ParamStore<R>, rng: &mut impl Rng, name: &str, dim: usize, mult: usize) -> Self {
        FeedForward {
            up: Linear::new(store, rng, &format!("{name}.up"), dim, dim * mult, true),
            down: Linear::new(store, rng, &format!("{name}.down"), dim * mult, dim, true),
        }
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, p, h)
    }
}

/// Scaled dot-product attention over `G` independent groups.
///
/// `q` is `[G, Tq, C]`, `k`/`v` are `[G, Tk, C]`; `mask` (additive) is
/// `[G, Tq, Tk]` or `[Tq, Tk]`. Returns the output `[G, Tq, C]` and the
/// attention weights `[H, G, Tq, Tk]`.
pub fn attend<R: Real>(
    tape: &mut Tape<R>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<(Var, Var)> {
    let qs = tape.shape(q).to_vec();
    let ks = tape.shape(k).to_vec();
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || tape.shape(v) != ks.as_slice() {
        return Err(Error::dim(format!(
            "attention q {qs:?}, k {ks:?}, v {:?}",
            tape.shape(v)
        )));
    }
    let (g, tq, c) = (qs[0], qs[1], qs[2]);
    let tk = ks[1];
    if heads == 0 || c % heads != 0 {
        return Err(Error::dim(format!("{c} channels not divisible into {heads} heads")));
    }
    let dh = c / heads;
    let split = |tape: &mut Tape<R>, x: Var, t: usize| -> Result<Var> {
        let x = tape.reshape(x, &[g, t, heads, dh])?;
        let x = tape.permute(x, &[2, 0, 1, 3])?;
        tape.reshape(x, &[heads * g, t, dh])
    };
    let qh = split(tape, q, tq)?;
    let kh = split(tape, k, tk)?;
    let vh = split(tape, v, tk)?;
    let scores = tape.bmm(qh, kh, true)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let mut scores = tape.reshape(scores, &[heads, g, tq, tk])?;
    if let Some(m) = mask {
        scores = tape.add(scores, m)?;
    }
    let probs = tape.softmax(scores, 3)?;
    let p = tape.reshape(probs, &[heads * g, tq, tk])?;
    let out = tape.bmm(p, vh, false)?;
    let out = tape.reshape(out, &[heads, g, tq, dh])?;
    let out = tape.permute(out, &[1, 2, 0, 3])?;
    let out = tape.reshape(out, &[g, tq, c])?;
    Ok((out, probs))
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Real>(store: &mut ParamStore<R>, rng: &mut impl Rng, name: &str, dim: usize, heads: usize) -> Self {
        MultiHeadAttention {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim, true),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim, true),
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim, true),
            heads,
        }
    }

    /// `x_q` `[G, Tq, C]` attends over `x_kv` `[G, Tk, C]`.
    pub fn forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        p: &Bound,
        x_q: Var,
        x_kv: Var,
        mask: Option<Var>,
    ) -> Result<(Var, Var)> {
        let q = self.q.forward(tape, p, x_q)?;
        let k = self.k.forward(tape, p, x_kv)?;
        let v = self.v.forward(tape, p, x_kv)?;
        let (out, probs) = attend(tape, q, k, v, self.heads, mask)?;
        Ok((self.o.forward(tape, p, out)?, probs))
    }
}
