//! Global-guided autoregressive decompression: a causal transformer expands
//! the compact context (global tokens plus the pooled local grid, continuous
//! or de-quantized) back into the dense token grid, one raster position per
//! step. Every layer self-attends over the dense prefix and cross-attends to
//! the same compact context.
//!
//! Training is teacher-forced against dense targets with
//! total = l_reg + lambda_cb * l_cb, where l_reg is mean squared error in
//! dense feature space and l_cb keeps predictions consistent with the shared
//! codebook.

use rand::Rng;

use crate::basetok::{dequantize, vq_straight_through, Codebook, PatchCodec, TokenGrid};
use crate::compressor::{parse_sequence, IndexSequence};
use crate::error::{Error, Result};
use crate::globals::GlobalTokens;
use crate::image::Image;
use crate::impl_grad_checkable;
use crate::layers::{
    uniform_fan_in, AttentionVals, AttentionWeights, FeedForward, FeedForwardVals, LayerNorm,
    LayerNormVals, Linear, LinearVals,
};
use crate::tape::{Tape, Val};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: AttentionWeights,
    pub ln2: LayerNorm,
    pub cross_attn: AttentionWeights,
    pub ln3: LayerNorm,
    pub ff: FeedForward,
}

pub struct DecoderLayerVals {
    ln1: LayerNormVals,
    self_attn: AttentionVals,
    ln2: LayerNormVals,
    cross_attn: AttentionVals,
    ln3: LayerNormVals,
    ff: FeedForwardVals,
}

impl DecoderLayer {
    fn new(d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        DecoderLayer {
            ln1: LayerNorm::new(d),
            self_attn: AttentionWeights::new(d, heads, rng),
            ln2: LayerNorm::new(d),
            cross_attn: AttentionWeights::new(d, heads, rng),
            ln3: LayerNorm::new(d),
            ff: FeedForward::new(d, 4 * d, rng),
        }
    }

    fn register(&self, tape: &mut Tape, prefix: &str) -> DecoderLayerVals {
        DecoderLayerVals {
            ln1: self.ln1.register(tape, &format!("{prefix}.ln1")),
            self_attn: self
                .self_attn
                .register(tape, &format!("{prefix}.self_attn")),
            ln2: self.ln2.register(tape, &format!("{prefix}.ln2")),
            cross_attn: self
                .cross_attn
                .register(tape, &format!("{prefix}.cross_attn")),
            ln3: self.ln3.register(tape, &format!("{prefix}.ln3")),
            ff: self.ff.register(tape, &format!("{prefix}.ff")),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.self_attn.visit(&format!("{prefix}.self_attn"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.cross_attn.visit(&format!("{prefix}.cross_attn"), f);
        self.ln3.visit(&format!("{prefix}.ln3"), f);
        self.ff.visit(&format!("{prefix}.ff"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.self_attn.visit_mut(&format!("{prefix}.self_attn"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.cross_attn
            .visit_mut(&format!("{prefix}.cross_attn"), f);
        self.ln3.visit_mut(&format!("{prefix}.ln3"), f);
        self.ff.visit_mut(&format!("{prefix}.ff"), f);
    }
}

/// All learnables of the decompressor, built for one target grid and one
/// compact-context length (n_g + pooled token count, identical in every
/// layer).
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub grid_h: usize,
    pub grid_w: usize,
    pub ctx_len: usize,
    pub layers: Vec<DecoderLayer>,
    pub dense_pos: Tensor, // [T x d]
    pub ctx_pos: Tensor,   // [ctx_len x d]
    pub start: Tensor,     // [1 x d]
    pub ctx_ln: LayerNorm,
    pub final_ln: LayerNorm,
    pub head: Linear, // d -> d
}

pub struct DecoderVals {
    layers: Vec<DecoderLayerVals>,
    dense_pos: Val,
    ctx_pos: Val,
    start: Val,
    ctx_ln: LayerNormVals,
    final_ln: LayerNormVals,
    head: LinearVals,
}

/// Loss components of one teacher-forced pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconLossReport {
    pub l_reg: f64,
    pub l_cb: f64,
    pub lambda_cb: f64,
    pub total: f64,
}

impl DecoderParams {
    pub fn new(
        grid_h: usize,
        grid_w: usize,
        ctx_len: usize,
        d: usize,
        layers: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let t = grid_h * grid_w;
        DecoderParams {
            grid_h,
            grid_w,
            ctx_len,
            layers: (0..layers)
                .map(|_| DecoderLayer::new(d, heads, rng))
                .collect(),
            dense_pos: uniform_fan_in(t, d, rng),
            ctx_pos: uniform_fan_in(ctx_len, d, rng),
            start: uniform_fan_in(1, d, rng),
            ctx_ln: LayerNorm::new(d),
            final_ln: LayerNorm::new(d),
            head: Linear::new(d, d, rng),
        }
    }

    pub fn token_count(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn embed_dim(&self) -> usize {
        self.start.cols()
    }

    pub fn register(&self, tape: &mut Tape, prefix: &str) -> DecoderVals {
        DecoderVals {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.register(tape, &format!("{prefix}.layer{i}")))
                .collect(),
            dense_pos: tape.param(&format!("{prefix}.dense_pos"), &self.dense_pos),
            ctx_pos: tape.param(&format!("{prefix}.ctx_pos"), &self.ctx_pos),
            start: tape.param(&format!("{prefix}.start"), &self.start),
            ctx_ln: self.ctx_ln.register(tape, &format!("{prefix}.ctx_ln")),
            final_ln: self.final_ln.register(tape, &format!("{prefix}.final_ln")),
            head: self.head.register(tape, &format!("{prefix}.head")),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.layer{i}"), f);
        }
        f(format!("{prefix}.dense_pos"), &self.dense_pos);
        f(format!("{prefix}.ctx_pos"), &self.ctx_pos);
        f(format!("{prefix}.start"), &self.start);
        self.ctx_ln.visit(&format!("{prefix}.ctx_ln"), f);
        self.final_ln.visit(&format!("{prefix}.final_ln"), f);
        self.head.visit(&format!("{prefix}.head"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.layer{i}"), f);
        }
        f(format!("{prefix}.dense_pos"), &mut self.dense_pos);
        f(format!("{prefix}.ctx_pos"), &mut self.ctx_pos);
        f(format!("{prefix}.start"), &mut self.start);
        self.ctx_ln.visit_mut(&format!("{prefix}.ctx_ln"), f);
        self.final_ln.visit_mut(&format!("{prefix}.final_ln"), f);
        self.head.visit_mut(&format!("{prefix}.head"), f);
    }

    /// Concatenate global and local context rows and add the learned context
    /// positional embeddings: positional identity survives quantization this
    /// way, since it rides on row order rather than row content.
    pub fn context_on_tape(
        &self,
        tape: &mut Tape,
        vals: &DecoderVals,
        ctx_g: Option<Val>,
        ctx_x: Val,
    ) -> Result<Val> {
        let joined = match ctx_g {
            Some(g) => tape.concat_rows(&[g, ctx_x])?,
            None => ctx_x,
        };
        let n = tape.dims(joined)[0];
        if n != self.ctx_len {
            return Err(Error::shape(
                "decompressor",
                format!("context rows {} do not match expected {}", n, self.ctx_len),
            ));
        }
        // global rows arrive layer-normed (unit scale) while pooled rows keep
        // the tokenizer's scale; normalizing here puts both on equal footing
        // for the shared key/value projections
        let normed = vals.ctx_ln.apply(tape, joined)?;
        tape.add(normed, vals.ctx_pos)
    }

    /// One pre-norm block stack over `rows` (positions already embedded),
    /// causally self-attending and cross-attending to `ctx` at every layer,
    /// then final norm and the output head.
    fn backbone(&self, tape: &mut Tape, vals: &DecoderVals, rows: Val, ctx: Val) -> Result<Val> {
        let mut x = rows;
        for layer in &vals.layers {
            let normed = layer.ln1.apply(tape, x)?;
            let sa = layer.self_attn.attend(tape, normed, normed, true)?;
            x = tape.add(x, sa)?;
            let normed = layer.ln2.apply(tape, x)?;
            let ca = layer.cross_attn.attend(tape, normed, ctx, false)?;
            x = tape.add(x, ca)?;
            let normed = layer.ln3.apply(tape, x)?;
            let ff = layer.ff.apply(tape, normed)?;
            x = tape.add(x, ff)?;
        }
        let x = vals.final_ln.apply(tape, x)?;
        vals.head.apply(tape, x)
    }

    /// Teacher-forced predictions for all T raster positions: input row t is
    /// the ground-truth token t-1 (the learned start token at t = 0), so the
    /// causal mask makes prediction t a function of targets < t only.
    pub fn teacher_forced_on_tape(
        &self,
        tape: &mut Tape,
        vals: &DecoderVals,
        targets: Val,
        ctx: Val,
    ) -> Result<Val> {
        let t = self.token_count();
        if tape.dims(targets) != [t, self.embed_dim()] {
            return Err(Error::shape(
                "teacher_forced",
                format!(
                    "targets {:?} do not match grid {}x{} of width {}",
                    tape.dims(targets),
                    self.grid_h,
                    self.grid_w,
                    self.embed_dim()
                ),
            ));
        }
        // the ground-truth prefix is an input, never a gradient path
        let frozen = tape.detach(targets)?;
        let inputs = if t > 1 {
            let prefix = tape.narrow_rows(frozen, 0, t - 1)?;
            tape.concat_rows(&[vals.start, prefix])?
        } else {
            vals.start
        };
        let positioned = tape.add(inputs, vals.dense_pos)?;
        self.backbone(tape, vals, positioned, ctx)
    }

    /// Prediction for dense position t given the t already-generated tokens
    /// (raster order). The learned start token seeds position 0.
    pub fn decode_step(
        &self,
        prefix: &Tensor,
        ctx_g: Option<&GlobalTokens>,
        ctx_x: &Tensor,
    ) -> Result<Vec<f64>> {
        let t = prefix.dims()[0];
        if t >= self.token_count() {
            return Err(Error::shape(
                "decode_step",
                format!(
                    "prefix of {} rows leaves no position to predict in a {}-token grid",
                    t,
                    self.token_count()
                ),
            ));
        }
        let mut tape = Tape::new();
        let vals = self.register(&mut tape, "decomp");
        let gv = ctx_g.map(|g| tape.leaf(&g.values));
        let xv = tape.leaf(ctx_x);
        let ctx = self.context_on_tape(&mut tape, &vals, gv, xv)?;
        let inputs = if t > 0 {
            let p = tape.leaf(prefix);
            tape.concat_rows(&[vals.start, p])?
        } else {
            vals.start
        };
        let pos = tape.narrow_rows(vals.dense_pos, 0, t + 1)?;
        let positioned = tape.add(inputs, pos)?;
        let out = self.backbone(&mut tape, &vals, positioned, ctx)?;
        let last = tape.narrow_rows(out, t, 1)?;
        Ok(tape.value(last).to_vec())
    }

    /// Expand the compact context to the full dense grid, one raster position
    /// per step, deterministically (pure feature-space regression, no
    /// sampling).
    pub fn decode_full(&self, ctx_g: Option<&GlobalTokens>, ctx_x: &Tensor) -> Result<TokenGrid> {
        let t = self.token_count();
        let d = self.embed_dim();
        let mut rows: Vec<f64> = Vec::with_capacity(t * d);
        for step in 0..t {
            let prefix = Tensor::from_vec(vec![step, d], rows.clone())?;
            let next = self.decode_step(&prefix, ctx_g, ctx_x)?;
            rows.extend_from_slice(&next);
        }
        TokenGrid::new(
            self.grid_h,
            self.grid_w,
            Tensor::from_vec(vec![t, d], rows)?,
        )
    }

    /// Loss pieces on the tape: (total, l_reg, l_cb).
    pub fn teacher_forced_loss_on_tape(
        &self,
        tape: &mut Tape,
        vals: &DecoderVals,
        targets: Val,
        ctx: Val,
        codes: Val,
        lambda_cb: f64,
        beta: f64,
    ) -> Result<(Val, Val, Val)> {
        let preds = self.teacher_forced_on_tape(tape, vals, targets, ctx)?;
        let frozen_targets = tape.detach(targets)?;
        let l_reg = tape.mse(preds, frozen_targets)?;
        let (_, l_cb) = vq_straight_through(tape, preds, codes, beta)?;
        let scaled = tape.scale(l_cb, lambda_cb)?;
        let total = tape.add(l_reg, scaled)?;
        Ok((total, l_reg, l_cb))
    }

    /// Plain-value teacher-forced loss report.
    pub fn teacher_forced_loss(
        &self,
        x_target: &TokenGrid,
        ctx_g: Option<&GlobalTokens>,
        ctx_x: &Tensor,
        cb: &Codebook,
        lambda_cb: f64,
        beta: f64,
    ) -> Result<ReconLossReport> {
        let mut tape = Tape::new();
        let vals = self.register(&mut tape, "decomp");
        let tv = tape.leaf(&x_target.tokens);
        let gv = ctx_g.map(|g| tape.leaf(&g.values));
        let xv = tape.leaf(ctx_x);
        let ctx = self.context_on_tape(&mut tape, &vals, gv, xv)?;
        let cv = tape.leaf(&cb.codes);
        let (total, l_reg, l_cb) =
            self.teacher_forced_loss_on_tape(&mut tape, &vals, tv, ctx, cv, lambda_cb, beta)?;
        Ok(ReconLossReport {
            l_reg: tape.scalar_value(l_reg),
            l_cb: tape.scalar_value(l_cb),
            lambda_cb,
            total: tape.scalar_value(total),
        })
    }

    /// Teacher-forced predictions as a plain tensor (diagnostics, oracles).
    pub fn teacher_forced_predictions(
        &self,
        targets: &Tensor,
        ctx_g: Option<&Tensor>,
        ctx_x: &Tensor,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vals = self.register(&mut tape, "decomp");
        let tv = tape.leaf(targets);
        let gv = ctx_g.map(|g| tape.leaf(g));
        let xv = tape.leaf(ctx_x);
        let ctx = self.context_on_tape(&mut tape, &vals, gv, xv)?;
        let preds = self.teacher_forced_on_tape(&mut tape, &vals, tv, ctx)?;
        Ok(tape.to_tensor(preds))
    }
}

impl_grad_checkable!(DecoderParams, "decomp");

/// End-to-end discrete generation: parse the wire sequence, de-quantize both
/// streams through the shared codebook, expand with the decompressor, and
/// decode pixels. Errors propagate before any image is produced.
pub fn generate_image_from_indices(
    seq: &IndexSequence,
    cb: &Codebook,
    decoder: &DecoderParams,
    codec: &PatchCodec,
) -> Result<Image> {
    let (zg, zx) = parse_sequence(seq)?;
    let ctx_x = dequantize(&zx, cb)?;
    let dense = if zg.is_empty() {
        decoder.decode_full(None, &ctx_x)?
    } else {
        let ctx_g = GlobalTokens {
            values: dequantize(&zg, cb)?,
        };
        decoder.decode_full(Some(&ctx_g), &ctx_x)?
    };
    codec.decode_tokens(&dense)
}
