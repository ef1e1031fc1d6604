//! Reusable parameter bundles: linear maps, layer norm, feed-forward blocks,
//! and multi-head attention, each with a `register` step that places the
//! tensors on a tape under stable dotted names.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Val};
use crate::tensor::Tensor;

/// Layer-norm eps is fixed crate-wide.
pub const LN_EPS: f64 = 1e-5;

/// Additive mask value for disallowed attention logits. Finite, but far
/// enough below any real logit that exp underflows to exactly zero.
pub const ATTN_MASK: f64 = -1e30;

pub fn uniform_fan_in(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (cols as f64).sqrt();
    Tensor::uniform(&[rows, cols], bound, rng)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor, // [in x out]
    pub bias: Tensor,   // [out]
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: uniform_fan_in(input, output, rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn register(&self, tape: &mut Tape, prefix: &str) -> LinearVals {
        LinearVals {
            weight: tape.param(&format!("{prefix}.weight"), &self.weight),
            bias: tape.param(&format!("{prefix}.bias"), &self.bias),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVals {
    pub weight: Val,
    pub bias: Val,
}

impl LinearVals {
    pub fn apply(&self, tape: &mut Tape, x: Val) -> Result<Val> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_row(y, self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Tensor, // [d]
    pub bias: Tensor, // [d]
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gain: Tensor::filled(&[d], 1.0),
            bias: Tensor::zeros(&[d]),
        }
    }

    pub fn register(&self, tape: &mut Tape, prefix: &str) -> LayerNormVals {
        LayerNormVals {
            gain: tape.param(&format!("{prefix}.gain"), &self.gain),
            bias: tape.param(&format!("{prefix}.bias"), &self.bias),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.gain"), &self.gain);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.gain"), &mut self.gain);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormVals {
    pub gain: Val,
    pub bias: Val,
}

impl LayerNormVals {
    pub fn apply(&self, tape: &mut Tape, x: Val) -> Result<Val> {
        tape.layer_norm(x, self.gain, self.bias, LN_EPS)
    }
}

/// Projection weights of one multi-head attention block: W_Q, W_K, W_V plus
/// the output mixer W_O that recombines head concatenation, all d x d.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub heads: usize,
}

impl AttentionWeights {
    pub fn new(d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads >= 1 && d % heads == 0, "head count must divide width");
        AttentionWeights {
            wq: uniform_fan_in(d, d, rng),
            wk: uniform_fan_in(d, d, rng),
            wv: uniform_fan_in(d, d, rng),
            wo: uniform_fan_in(d, d, rng),
            heads,
        }
    }

    pub fn register(&self, tape: &mut Tape, prefix: &str) -> AttentionVals {
        AttentionVals {
            wq: tape.param(&format!("{prefix}.wq"), &self.wq),
            wk: tape.param(&format!("{prefix}.wk"), &self.wk),
            wv: tape.param(&format!("{prefix}.wv"), &self.wv),
            wo: tape.param(&format!("{prefix}.wo"), &self.wo),
            heads: self.heads,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.wq"), &self.wq);
        f(format!("{prefix}.wk"), &self.wk);
        f(format!("{prefix}.wv"), &self.wv);
        f(format!("{prefix}.wo"), &self.wo);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.wq"), &mut self.wq);
        f(format!("{prefix}.wk"), &mut self.wk);
        f(format!("{prefix}.wv"), &mut self.wv);
        f(format!("{prefix}.wo"), &mut self.wo);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVals {
    pub wq: Val,
    pub wk: Val,
    pub wv: Val,
    pub wo: Val,
    pub heads: usize,
}

impl AttentionVals {
    /// Multi-head attention with queries from `q_in` and keys/values from
    /// `kv_in`, logit scale 1/sqrt(d/heads). With `causal` set, query row i
    /// only attends to key rows <= i (requires equal row counts).
    pub fn attend(&self, tape: &mut Tape, q_in: Val, kv_in: Val, causal: bool) -> Result<Val> {
        let d = tape.dims(q_in)[1];
        if tape.dims(kv_in).len() != 2 || tape.dims(kv_in)[1] != d {
            return Err(Error::shape(
                "attention",
                format!(
                    "query width {} does not match key/value dims {:?}",
                    d,
                    tape.dims(kv_in)
                ),
            ));
        }
        let nq = tape.dims(q_in)[0];
        let nk = tape.dims(kv_in)[0];
        if causal && nq != nk {
            return Err(Error::shape(
                "attention",
                format!("causal attention needs square shape, got {}x{}", nq, nk),
            ));
        }
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let q = tape.matmul(q_in, self.wq)?;
        let k = tape.matmul(kv_in, self.wk)?;
        let v = tape.matmul(kv_in, self.wv)?;

        let mask = if causal {
            let mut m = vec![0.0; nq * nk];
            for i in 0..nq {
                for j in (i + 1)..nk {
                    m[i * nk + j] = ATTN_MASK;
                }
            }
            Some(tape.constant(&[nq, nk], m))
        } else {
            None
        };

        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.narrow_cols(q, h * dh, dh)?;
            let kh = tape.narrow_cols(k, h * dh, dh)?;
            let vh = tape.narrow_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(scores, scale)?;
            if let Some(mask) = mask {
                scores = tape.add(scores, mask)?;
            }
            let weights = tape.softmax_rows(scores)?;
            head_outputs.push(tape.matmul(weights, vh)?);
        }
        let concat = tape.concat_cols(&head_outputs)?;
        tape.matmul(concat, self.wo)
    }
}

/// Two-layer feed-forward with a silu gate in between.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn new(d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            lin1: Linear::new(d, hidden, rng),
            lin2: Linear::new(hidden, d, rng),
        }
    }

    pub fn register(&self, tape: &mut Tape, prefix: &str) -> FeedForwardVals {
        FeedForwardVals {
            lin1: self.lin1.register(tape, &format!("{prefix}.lin1")),
            lin2: self.lin2.register(tape, &format!("{prefix}.lin2")),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.lin1.visit(&format!("{prefix}.lin1"), f);
        self.lin2.visit(&format!("{prefix}.lin2"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.lin1.visit_mut(&format!("{prefix}.lin1"), f);
        self.lin2.visit_mut(&format!("{prefix}.lin2"), f);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForwardVals {
    pub lin1: LinearVals,
    pub lin2: LinearVals,
}

impl FeedForwardVals {
    pub fn apply(&self, tape: &mut Tape, x: Val) -> Result<Val> {
        let h = self.lin1.apply(tape, x)?;
        let h = tape.silu(h)?;
        self.lin2.apply(tape, h)
    }
}
