//! Spatial self-attention and its first-frame-anchored variant.
//!
//! In the anchored variant every frame's queries attend to the keys and
//! values of frame 1, which enter the computation under stop-gradient. Frame
//! 1 therefore attends to itself exactly as in standard attention, while all
//! other frames become convex combinations of frame-1 values.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tape::{GatherIndex, Tape, Var};
use crate::tensor::Tensor;

/// Per-frame token matrices: `q`, `k` are `tokens × D`, `v` is `tokens × d_v`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTensors {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

impl AttentionTensors {
    pub fn new(q: Tensor, k: Tensor, v: Tensor) -> Result<Self> {
        let t = Self { q, k, v };
        t.check()?;
        Ok(t)
    }

    fn check(&self) -> Result<()> {
        let (q, k, v) = (self.q.shape(), self.k.shape(), self.v.shape());
        if q.len() != 2 || k.len() != 2 || v.len() != 2 {
            return Err(Error::Shape("attention tensors must be 2-D".into()));
        }
        if q[1] == 0 || q[1] != k[1] {
            return Err(Error::Shape(format!("query dim {} vs key dim {}", q[1], k[1])));
        }
        if k[0] != v[0] || k[0] == 0 {
            return Err(Error::Shape(format!("{} keys but {} values", k[0], v[0])));
        }
        Ok(())
    }

    pub fn key_dim(&self) -> usize {
        self.q.shape()[1]
    }
}

/// `softmax(Q Kᵀ / √D) V` for `queries` against another frame's keys/values.
fn attend(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let d = q.shape()[1];
    let add_batch = |t: &Tensor| t.clone().reshape([1, t.shape()[0], t.shape()[1]]);
    let (qv, kv, vv) = (
        tape.constant(add_batch(q)),
        tape.constant(add_batch(k)),
        tape.constant(add_batch(v)),
    );
    let out = tape.attention(qv, kv, vv, 1.0 / (d as f64).sqrt());
    let o = tape.value(out).clone();
    let s = o.shape().to_vec();
    o.reshape([s[1], s[2]])
}

/// Standard per-frame spatial self-attention.
pub fn standard_attention(t: &AttentionTensors) -> Result<Tensor> {
    t.check()?;
    Ok(attend(&t.q, &t.k, &t.v))
}

/// First-frame-anchored attention: frame `n` uses `Q_n` against `K_1`, `V_1`.
pub fn aligned_attention(frames: &[AttentionTensors]) -> Result<Vec<Tensor>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Invalid("aligned attention needs at least one frame".into()))?;
    for f in frames {
        f.check()?;
        if f.q.shape() != first.q.shape() || f.v.shape() != first.v.shape() {
            return Err(Error::Shape("frames differ in token count or dimensionality".into()));
        }
    }
    Ok(frames
        .iter()
        .map(|f| attend(&f.q, &first.k, &first.v))
        .collect())
}

/// Output of a recorded attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[frames, tokens, d_v]` attention output, before any projection.
    pub out: Var,
    /// The original (pre-stop-gradient) frame-1 keys and values when the
    /// layer ran anchored; useful for checking that no gradient reaches them.
    pub anchor: Option<(Var, Var)>,
}

/// Index map broadcasting frame 0 of a `[frames, rest]` tensor to every frame.
fn broadcast_first_frame(frames: usize, per_frame: usize) -> Arc<Vec<GatherIndex>> {
    Arc::new(
        (0..frames)
            .flat_map(|_| (0..per_frame).map(|i| Some((0u32, i as u32))))
            .collect(),
    )
}

/// Splits `[B, T, H·Dh]` into `[B·H, T, Dh]`.
fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Var {
    let s = tape.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let mut index = Vec::with_capacity(b * t * d);
    for bb in 0..b {
        for h in 0..heads {
            for tt in 0..t {
                for j in 0..dh {
                    index.push(Some((0, ((bb * t + tt) * d + h * dh + j) as u32)));
                }
            }
        }
    }
    tape.gather(&[x], [b * heads, t, dh], Arc::new(index))
}

fn merge_heads(tape: &mut Tape, x: Var, heads: usize) -> Var {
    let s = tape.shape(x).to_vec();
    let (bh, t, dh) = (s[0], s[1], s[2]);
    let b = bh / heads;
    let d = dh * heads;
    let mut index = Vec::with_capacity(b * t * d);
    for bb in 0..b {
        for tt in 0..t {
            for h in 0..heads {
                for j in 0..dh {
                    index.push(Some((0, (((bb * heads + h) * t + tt) * dh + j) as u32)));
                }
            }
        }
    }
    tape.gather(&[x], [b, t, d], Arc::new(index))
}

/// Multi-head spatial self-attention over `[frames, tokens, dim]` inputs.
///
/// With `aligned`, keys and values of frame 1 are detached and broadcast to
/// every frame before the heads are split, so the substitution applies to
/// each head identically.
pub fn spatial_self_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    aligned: bool,
) -> AttentionOutput {
    let qs = tape.shape(q).to_vec();
    assert!(heads >= 1 && qs[2].is_multiple_of(heads), "dim {} not divisible by {heads} heads", qs[2]);
    let frames = qs[0];
    let (k_used, v_used, anchor) = if aligned {
        let k_sg = tape.detach(k);
        let v_sg = tape.detach(v);
        let ks = tape.shape(k).to_vec();
        let vs = tape.shape(v).to_vec();
        let k_b = tape.gather(&[k_sg], ks.clone(), broadcast_first_frame(frames, ks[1] * ks[2]));
        let v_b = tape.gather(&[v_sg], vs.clone(), broadcast_first_frame(frames, vs[1] * vs[2]));
        (k_b, v_b, Some((k, v)))
    } else {
        (k, v, None)
    };
    let scale = 1.0 / ((qs[2] / heads) as f64).sqrt();
    let out = if heads == 1 {
        tape.attention(q, k_used, v_used, scale)
    } else {
        let (qh, kh, vh) = (
            split_heads(tape, q, heads),
            split_heads(tape, k_used, heads),
            split_heads(tape, v_used, heads),
        );
        let o = tape.attention(qh, kh, vh, scale);
        merge_heads(tape, o, heads)
    };
    AttentionOutput { out, anchor }
}
