//! The off-the-shelf discrete tokenizer the compression stack plugs into:
//! a linear patch encoder (image to token grid), a shared VQ codebook with
//! straight-through training losses, and a linear patch decoder back to
//! pixels. Deliberately minimal — the plug-in treats it as a given.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::layers::{Linear, LinearVals};
use crate::tape::{Tape, Val};
use crate::tensor::Tensor;

/// Dense continuous visual tokens laid out as a grid_h x grid_w grid of
/// d-dim embeddings, flattened to (grid_h * grid_w) rows in row-major raster
/// order. That raster order is the canonical rasterization used by pooling
/// and decompression.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub tokens: Tensor,
}

impl TokenGrid {
    pub fn new(grid_h: usize, grid_w: usize, tokens: Tensor) -> Result<Self> {
        if tokens.dims().len() != 2 || tokens.dims()[0] != grid_h * grid_w {
            return Err(Error::shape(
                "token_grid",
                format!(
                    "{:?} tokens do not form a {}x{} grid",
                    tokens.dims(),
                    grid_h,
                    grid_w
                ),
            ));
        }
        Ok(TokenGrid {
            grid_h,
            grid_w,
            tokens,
        })
    }

    pub fn token_count(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn embed_dim(&self) -> usize {
        self.tokens.cols()
    }
}

/// K learnable d-dim code vectors shared by the global and local streams.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub codes: Tensor,
}

impl Codebook {
    /// Uniform init in [-1/sqrt(d), 1/sqrt(d)].
    pub fn init(size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        Codebook {
            codes: Tensor::uniform(&[size, dim], bound, rng),
        }
    }

    pub fn size(&self) -> usize {
        self.codes.rows()
    }

    pub fn dim(&self) -> usize {
        self.codes.cols()
    }
}

/// Nearest code by squared Euclidean distance; 1-based index, ties broken
/// toward the lowest index.
pub fn quantize(v: &[f64], cb: &Codebook) -> Result<u32> {
    if cb.size() == 0 {
        return Err(Error::Config("codebook is empty".to_string()));
    }
    if v.len() != cb.dim() {
        return Err(Error::shape(
            "quantize",
            format!("vector dim {} vs codebook dim {}", v.len(), cb.dim()),
        ));
    }
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    for k in 0..cb.size() {
        let code = cb.codes.row(k);
        let dist: f64 = v.iter().zip(code).map(|(&a, &b)| (a - b) * (a - b)).sum();
        if dist < best_dist {
            best_dist = dist;
            best = k;
        }
    }
    Ok(best as u32 + 1)
}

/// Quantize every row of a matrix.
pub fn quantize_rows(rows: &Tensor, cb: &Codebook) -> Result<Vec<u32>> {
    (0..rows.rows())
        .map(|i| quantize(rows.row(i), cb))
        .collect()
}

/// Codebook lookup: row i of the output equals the code at `indices[i]`
/// (1-based). Out-of-range indices report the offending position.
pub fn dequantize(indices: &[u32], cb: &Codebook) -> Result<Tensor> {
    let d = cb.dim();
    let mut data = Vec::with_capacity(indices.len() * d);
    for (position, &idx) in indices.iter().enumerate() {
        if idx == 0 || idx as usize > cb.size() {
            return Err(Error::Decode {
                position,
                detail: format!("index {} outside 1..={}", idx, cb.size()),
            });
        }
        data.extend_from_slice(cb.codes.row(idx as usize - 1));
    }
    Tensor::from_vec(vec![indices.len(), d], data)
}

/// Straight-through quantization of each row of `pre_q` against the codebook
/// registered on the tape as `codes`, plus the VQ training loss
/// mean_rows(||sg(pre_q) - code||^2 + beta * ||pre_q - sg(code)||^2).
///
/// Forward value of the returned tensor is exactly the selected code rows;
/// backward passes gradients through to `pre_q` unchanged.
pub fn vq_straight_through(
    tape: &mut Tape,
    pre_q: Val,
    codes: Val,
    beta: f64,
) -> Result<(Val, Val)> {
    let k = tape.dims(codes)[0];
    if k == 0 {
        return Err(Error::Config("codebook is empty".to_string()));
    }
    let d = tape.dims(codes)[1];
    if tape.dims(pre_q).len() != 2 || tape.dims(pre_q)[1] != d {
        return Err(Error::shape(
            "vq_straight_through",
            format!("pre_q dims {:?} vs codebook dim {}", tape.dims(pre_q), d),
        ));
    }
    let n = tape.dims(pre_q)[0];

    // Nearest-neighbor assignment on current values; not differentiated.
    let mut picks = Vec::with_capacity(n);
    {
        let pq = tape.value(pre_q);
        let cd = tape.value(codes);
        for i in 0..n {
            let row = &pq[i * d..(i + 1) * d];
            let mut best = 0usize;
            let mut best_dist = f64::INFINITY;
            for kk in 0..k {
                let code = &cd[kk * d..(kk + 1) * d];
                let dist: f64 = row.iter().zip(code).map(|(&a, &b)| (a - b) * (a - b)).sum();
                if dist < best_dist {
                    best_dist = dist;
                    best = kk;
                }
            }
            picks.push(best);
        }
    }

    let selected = tape.gather_rows(codes, &picks)?;

    // quantized = pre_q + sg(code - pre_q): forward is the code, backward is identity.
    let residual = tape.sub(selected, pre_q)?;
    let residual_sg = tape.detach(residual)?;
    let quantized = tape.add(pre_q, residual_sg)?;

    // ||sg(pre_q) - code||^2 pulls codes toward the stream.
    let pre_sg = tape.detach(pre_q)?;
    let code_err = tape.sub(pre_sg, selected)?;
    let code_sq = tape.mul_elem(code_err, code_err)?;
    let code_term = tape.sum_all(code_sq)?;

    // beta * ||pre_q - sg(code)||^2 commits the stream to its codes.
    let sel_sg = tape.detach(selected)?;
    let commit_err = tape.sub(pre_q, sel_sg)?;
    let commit_sq = tape.mul_elem(commit_err, commit_err)?;
    let commit_term = tape.sum_all(commit_sq)?;
    let commit_scaled = tape.scale(commit_term, beta)?;

    let total = tape.add(code_term, commit_scaled)?;
    let loss = tape.scale(total, 1.0 / n as f64)?;
    Ok((quantized, loss))
}

/// Plain-value wrapper over [`vq_straight_through`].
pub fn vq_losses(pre_q: &Tensor, cb: &Codebook, beta: f64) -> Result<(Tensor, f64)> {
    let mut tape = Tape::new();
    let pv = tape.leaf(pre_q);
    let cv = tape.leaf(&cb.codes);
    let (quantized, loss) = vq_straight_through(&mut tape, pv, cv, beta)?;
    Ok((tape.to_tensor(quantized), tape.scalar_value(loss)))
}

/// Linear patch autoencoder: each patch_size^2 * channels patch maps through
/// an affine layer to a d-dim token (plus a learned per-position embedding),
/// and back. Stands in for the base encoder / image decoder of a production
/// tokenizer at desk scale.
#[derive(Debug, Clone)]
pub struct PatchCodec {
    pub patch: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub enc: Linear,
    pub pos: Tensor,
    pub dec: Linear,
}

pub struct PatchCodecVals {
    pub enc: LinearVals,
    pub pos: Val,
    pub dec: LinearVals,
}

impl PatchCodec {
    pub fn new(
        image_h: usize,
        image_w: usize,
        channels: usize,
        patch: usize,
        embed_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if patch == 0 || image_h % patch != 0 || image_w % patch != 0 {
            return Err(Error::shape(
                "patch_codec",
                format!("image {image_h}x{image_w} not divisible by patch {patch}"),
            ));
        }
        let grid_h = image_h / patch;
        let grid_w = image_w / patch;
        let pvec = patch * patch * channels;
        let bound = 1.0 / (embed_dim as f64).sqrt();
        Ok(PatchCodec {
            patch,
            channels,
            embed_dim,
            grid_h,
            grid_w,
            enc: Linear::new(pvec, embed_dim, rng),
            pos: Tensor::uniform(&[grid_h * grid_w, embed_dim], bound, rng),
            dec: Linear::new(embed_dim, pvec, rng),
        })
    }

    pub fn token_count(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn register(&self, tape: &mut Tape, prefix: &str) -> PatchCodecVals {
        PatchCodecVals {
            enc: self.enc.register(tape, &format!("{prefix}.enc")),
            pos: tape.param(&format!("{prefix}.pos"), &self.pos),
            dec: self.dec.register(tape, &format!("{prefix}.dec")),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.enc.visit(&format!("{prefix}.enc"), f);
        f(format!("{prefix}.pos"), &self.pos);
        self.dec.visit(&format!("{prefix}.dec"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.enc.visit_mut(&format!("{prefix}.enc"), f);
        f(format!("{prefix}.pos"), &mut self.pos);
        self.dec.visit_mut(&format!("{prefix}.dec"), f);
    }

    /// Flatten an image into one row per patch, raster order, channels
    /// innermost within each patch row.
    pub fn patch_rows(&self, img: &Image) -> Result<Tensor> {
        if img.height() != self.grid_h * self.patch
            || img.width() != self.grid_w * self.patch
            || img.channels() != self.channels
        {
            return Err(Error::shape(
                "encode_image",
                format!(
                    "image {}x{}x{} does not match codec built for {}x{}x{} (patch {})",
                    img.width(),
                    img.height(),
                    img.channels(),
                    self.grid_w * self.patch,
                    self.grid_h * self.patch,
                    self.channels,
                    self.patch
                ),
            ));
        }
        let pvec = self.patch * self.patch * self.channels;
        let mut data = Vec::with_capacity(self.token_count() * pvec);
        for gy in 0..self.grid_h {
            for gx in 0..self.grid_w {
                for py in 0..self.patch {
                    for px in 0..self.patch {
                        for c in 0..self.channels {
                            data.push(img.get(gx * self.patch + px, gy * self.patch + py, c));
                        }
                    }
                }
            }
        }
        Tensor::from_vec(vec![self.token_count(), pvec], data)
    }

    /// Token grid value for already-flattened patch rows: affine patch
    /// embedding plus the learned 2D positional embedding.
    pub fn encode_rows_on_tape(
        &self,
        tape: &mut Tape,
        vals: &PatchCodecVals,
        patches: Val,
    ) -> Result<Val> {
        let embedded = vals.enc.apply(tape, patches)?;
        tape.add(embedded, vals.pos)
    }

    /// Token grid value on the tape for an image.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        vals: &PatchCodecVals,
        img: &Image,
    ) -> Result<Val> {
        let patches = self.patch_rows(img)?;
        let p = tape.leaf(&patches);
        self.encode_rows_on_tape(tape, vals, p)
    }

    pub fn encode_image(&self, img: &Image) -> Result<TokenGrid> {
        let mut tape = Tape::new();
        let vals = self.register(&mut tape, "basetok");
        let x = self.encode_on_tape(&mut tape, &vals, img)?;
        TokenGrid::new(self.grid_h, self.grid_w, tape.to_tensor(x))
    }

    /// Per-token affine map back to flattened patches; no clamping.
    pub fn decode_on_tape(
        &self,
        tape: &mut Tape,
        vals: &PatchCodecVals,
        tokens: Val,
    ) -> Result<Val> {
        if tape.dims(tokens) != [self.token_count(), self.embed_dim] {
            return Err(Error::shape(
                "decode_tokens",
                format!(
                    "tokens {:?} do not match codec grid {}x{} of width {}",
                    tape.dims(tokens),
                    self.grid_h,
                    self.grid_w,
                    self.embed_dim
                ),
            ));
        }
        vals.dec.apply(tape, tokens)
    }

    /// Unclamped pixel features for a token matrix (linearity surface).
    pub fn decode_features(&self, tokens: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vals = self.register(&mut tape, "basetok");
        let t = tape.leaf(tokens);
        let out = self.decode_on_tape(&mut tape, &vals, t)?;
        Ok(tape.to_tensor(out))
    }

    /// Flattened patch rows back to an image, clamped to [0, 1].
    pub fn patches_to_image(&self, rows: &Tensor) -> Result<Image> {
        let pvec = self.patch * self.patch * self.channels;
        if rows.dims() != [self.token_count(), pvec] {
            return Err(Error::shape(
                "patches_to_image",
                format!(
                    "rows {:?} vs expected {}x{}",
                    rows.dims(),
                    self.token_count(),
                    pvec
                ),
            ));
        }
        let mut img = Image::zeros(
            self.grid_w * self.patch,
            self.grid_h * self.patch,
            self.channels,
        );
        for gy in 0..self.grid_h {
            for gx in 0..self.grid_w {
                let row = rows.row(gy * self.grid_w + gx);
                let mut i = 0;
                for py in 0..self.patch {
                    for px in 0..self.patch {
                        for c in 0..self.channels {
                            img.set(
                                gx * self.patch + px,
                                gy * self.patch + py,
                                c,
                                row[i].clamp(0.0, 1.0),
                            );
                            i += 1;
                        }
                    }
                }
            }
        }
        Ok(img)
    }

    pub fn decode_tokens(&self, grid: &TokenGrid) -> Result<Image> {
        if grid.grid_h != self.grid_h || grid.grid_w != self.grid_w {
            return Err(Error::shape(
                "decode_tokens",
                format!(
                    "grid {}x{} does not match codec {}x{}",
                    grid.grid_h, grid.grid_w, self.grid_h, self.grid_w
                ),
            ));
        }
        let features = self.decode_features(&grid.tokens)?;
        self.patches_to_image(&features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{check_grad_wrt_input, rand_tensor, rng};
    use rand::Rng;

    fn small_codebook() -> Codebook {
        // 10 codes in 2 dims laid out on a line: code k at (k, 0), 0-based k.
        let data: Vec<f64> = (0..10).flat_map(|k| [k as f64, 0.0]).collect();
        Codebook {
            codes: Tensor::from_vec(vec![10, 2], data).unwrap(),
        }
    }

    #[test]
    fn quantize_exact_code_hits_its_index() {
        let cb = small_codebook();
        // code 7 (1-based) sits at (6, 0)
        assert_eq!(quantize(&[6.0, 0.0], &cb).unwrap(), 7);
    }

    #[test]
    fn quantize_breaks_ties_toward_lowest_index() {
        // codes at indices 3 and 9 equidistant from the query
        let mut data = vec![100.0; 10 * 2];
        data[2 * 2] = 1.0; // index 3 (1-based) at (1, 0)
        data[2 * 2 + 1] = 0.0;
        data[8 * 2] = -1.0; // index 9 (1-based) at (-1, 0)
        data[8 * 2 + 1] = 0.0;
        let cb = Codebook {
            codes: Tensor::from_vec(vec![10, 2], data).unwrap(),
        };
        assert_eq!(quantize(&[0.0, 0.0], &cb).unwrap(), 3);
    }

    #[test]
    fn quantize_matches_exhaustive_scan() {
        let mut r = rng(101);
        for trial in 0..50 {
            let cb = Codebook::init(8, 4, &mut r);
            let v: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
            // independent oracle: plain exhaustive scan
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for k in 0..8 {
                let d: f64 = v
                    .iter()
                    .zip(cb.codes.row(k))
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            assert_eq!(
                quantize(&v, &cb).unwrap(),
                best as u32 + 1,
                "trial {trial} disagrees with oracle"
            );
        }
    }

    #[test]
    fn quantize_rejects_empty_codebook() {
        let cb = Codebook {
            codes: Tensor::zeros(&[0, 4]),
        };
        assert!(matches!(quantize(&[0.0; 4], &cb), Err(Error::Config(_))));
    }

    #[test]
    fn dequantize_repeats_and_mixed_lookup() {
        let cb = small_codebook();
        let t = dequantize(&[1, 1, 1], &cb).unwrap();
        for i in 0..3 {
            assert_eq!(t.row(i), cb.codes.row(0));
        }
        let t = dequantize(&[2, 5, 2], &cb).unwrap();
        assert_eq!(t.row(0), cb.codes.row(1));
        assert_eq!(t.row(1), cb.codes.row(4));
        assert_eq!(t.row(2), cb.codes.row(1));
    }

    #[test]
    fn dequantize_then_quantize_is_identity_over_all_codes() {
        let mut r = rng(103);
        let cb = Codebook::init(16, 4, &mut r);
        let all: Vec<u32> = (1..=16).collect();
        let rows = dequantize(&all, &cb).unwrap();
        for (i, &k) in all.iter().enumerate() {
            assert_eq!(quantize(rows.row(i), &cb).unwrap(), k);
        }
    }

    #[test]
    fn dequantize_reports_offending_position() {
        let cb = small_codebook();
        let err = dequantize(&[3, 11, 2], &cb).unwrap_err();
        match err {
            Error::Decode { position, .. } => assert_eq!(position, 1),
            other => panic!("unexpected error {other:?}"),
        }
        let err = dequantize(&[0], &cb).unwrap_err();
        assert!(matches!(err, Error::Decode { position: 0, .. }));
    }

    #[test]
    fn nearest_neighbor_property_exhaustive() {
        let mut r = rng(107);
        let cb = Codebook::init(64, 8, &mut r);
        for _ in 0..200 {
            let v: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
            let pick = quantize(&v, &cb).unwrap() as usize - 1;
            let pick_d: f64 = v
                .iter()
                .zip(cb.codes.row(pick))
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            for k in 0..64 {
                let d: f64 = v
                    .iter()
                    .zip(cb.codes.row(k))
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum();
                assert!(d >= pick_d, "code {k} strictly closer than pick {pick}");
            }
        }
    }

    #[test]
    fn vq_loss_zero_when_on_codes() {
        let mut r = rng(109);
        let cb = Codebook::init(6, 3, &mut r);
        let pre = dequantize(&[2, 4, 6], &cb).unwrap();
        let (quantized, loss) = vq_losses(&pre, &cb, 0.25).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(quantized.data(), pre.data());
    }

    #[test]
    fn vq_quantized_forward_is_code_rows() {
        let mut r = rng(113);
        let cb = Codebook::init(5, 3, &mut r);
        let pre = rand_tensor(&[4, 3], &mut r);
        let (quantized, _) = vq_losses(&pre, &cb, 0.25).unwrap();
        for i in 0..4 {
            let k = quantize(pre.row(i), &cb).unwrap();
            assert_eq!(quantized.row(i), cb.codes.row(k as usize - 1));
        }
    }

    #[test]
    fn vq_beta_zero_reduces_to_codebook_term() {
        let mut r = rng(127);
        let cb = Codebook::init(5, 3, &mut r);
        let pre = rand_tensor(&[4, 3], &mut r);
        let (_, loss) = vq_losses(&pre, &cb, 0.0).unwrap();
        let mut expect = 0.0;
        for i in 0..4 {
            let k = quantize(pre.row(i), &cb).unwrap() as usize - 1;
            expect += pre
                .row(i)
                .iter()
                .zip(cb.codes.row(k))
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        expect /= 4.0;
        assert!((loss - expect).abs() < 1e-12);

        // with beta = 0 the pre-quantized stream receives no loss gradient
        let mut tape = Tape::new();
        let pv = tape.leaf(&pre.clone().with_grad());
        let cv = tape.leaf(&cb.codes);
        let (_, lv) = vq_straight_through(&mut tape, pv, cv, 0.0).unwrap();
        tape.backward(lv).unwrap();
        assert!(tape.grad(pv).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn vq_loss_gradient_matches_finite_differences() {
        // sg(x) branches are constants of the differentiation, so the probe
        // pins them at their unperturbed values; the code assignment is kept
        // stable by a Voronoi margin on the samples.
        use crate::tape::{finite_diff_grad, max_relative_error};
        let beta = 0.25;
        let mut r = rng(131);
        let cb = Codebook::init(6, 3, &mut r);
        let pre = loop {
            let cand = rand_tensor(&[4, 3], &mut r);
            if rows_have_margin(&cand, &cb, 1e-2) {
                break cand;
            }
        };
        let n = pre.rows() as f64;
        let picks = quantize_rows(&pre, &cb).unwrap();
        let frozen_codes = dequantize(&picks, &cb).unwrap();

        // analytic, with respect to pre_q
        let mut tape = Tape::new();
        let pv = tape.leaf(&pre.clone().with_grad());
        let cv = tape.leaf(&cb.codes);
        let (_, loss) = vq_straight_through(&mut tape, pv, cv, beta).unwrap();
        tape.backward(loss).unwrap();
        let analytic_pre = tape.grad(pv).to_vec();

        // probe: codebook term sees sg(pre_q) = the original values
        let pre0 = pre.clone();
        let fc = frozen_codes.clone();
        let numeric_pre = finite_diff_grad(
            |p| {
                let mut term = 0.0;
                for i in 0..p.numel() {
                    let d0 = pre0.data()[i] - fc.data()[i];
                    let d1 = p.data()[i] - fc.data()[i];
                    term += d0 * d0 + beta * d1 * d1;
                }
                Ok(term / n)
            },
            &pre,
            1e-4,
        )
        .unwrap();
        let err = max_relative_error(&analytic_pre, numeric_pre.data());
        assert!(err <= 1e-5, "pre_q gradient error {err:.3e}");

        // analytic, with respect to the codebook
        let mut tape = Tape::new();
        let pv = tape.leaf(&pre);
        let cv = tape.leaf(&cb.codes.clone().with_grad());
        let (_, loss) = vq_straight_through(&mut tape, pv, cv, beta).unwrap();
        tape.backward(loss).unwrap();
        let analytic_cb = tape.grad(cv).to_vec();

        // probe: commitment term sees sg(code) = the original code rows
        let pre0 = pre.clone();
        let picks0 = picks.clone();
        let numeric_cb = finite_diff_grad(
            |c| {
                let probe_cb = Codebook { codes: c.clone() };
                let sel = dequantize(&picks0, &probe_cb).unwrap();
                let mut term = 0.0;
                for i in 0..pre0.numel() {
                    let d0 = pre0.data()[i] - sel.data()[i];
                    term += d0 * d0;
                }
                Ok(term / n)
            },
            &cb.codes,
            1e-4,
        )
        .unwrap();
        let err = max_relative_error(&analytic_cb, numeric_cb.data());
        assert!(err <= 1e-5, "codebook gradient error {err:.3e}");
    }

    fn rows_have_margin(rows: &Tensor, cb: &Codebook, margin: f64) -> bool {
        (0..rows.rows()).all(|i| {
            let mut dists: Vec<f64> = (0..cb.size())
                .map(|k| {
                    rows.row(i)
                        .iter()
                        .zip(cb.codes.row(k))
                        .map(|(&a, &b)| (a - b) * (a - b))
                        .sum()
                })
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            dists[1] - dists[0] > margin
        })
    }

    #[test]
    fn encode_paper_scale_grid_arithmetic() {
        // 512x512 with patch 16 gives 32x32 = 1024 tokens
        let mut r = rng(137);
        let codec = PatchCodec::new(512, 512, 1, 16, 8, &mut r).unwrap();
        let img = Image::zeros(512, 512, 1);
        let grid = codec.encode_image(&img).unwrap();
        assert_eq!((grid.grid_h, grid.grid_w), (32, 32));
        assert_eq!(grid.token_count(), 1024);
    }

    #[test]
    fn encode_toy_scale_grid_arithmetic() {
        let mut r = rng(139);
        let codec = PatchCodec::new(32, 32, 1, 4, 32, &mut r).unwrap();
        let grid = codec.encode_image(&Image::zeros(32, 32, 1)).unwrap();
        assert_eq!(grid.token_count(), 64);
    }

    #[test]
    fn encode_rejects_non_divisible_dims() {
        let mut r = rng(149);
        assert!(matches!(
            PatchCodec::new(30, 32, 1, 4, 8, &mut r),
            Err(Error::Shape { .. })
        ));
        // image that does not match the codec shape
        let codec = PatchCodec::new(32, 32, 1, 4, 8, &mut r).unwrap();
        assert!(codec.encode_image(&Image::zeros(36, 32, 1)).is_err());
    }

    #[test]
    fn zero_image_with_zero_bias_and_pos_encodes_to_zero() {
        let mut r = rng(151);
        let mut codec = PatchCodec::new(16, 16, 1, 4, 8, &mut r).unwrap();
        codec.enc.bias = Tensor::zeros(&[8]);
        codec.pos = Tensor::zeros(&[16, 8]);
        let grid = codec.encode_image(&Image::zeros(16, 16, 1)).unwrap();
        assert!(grid.tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_grid_with_zero_bias_decodes_to_zero_image() {
        let mut r = rng(157);
        let mut codec = PatchCodec::new(16, 16, 1, 4, 8, &mut r).unwrap();
        codec.dec.bias = Tensor::zeros(&[16]);
        let grid = TokenGrid::new(4, 4, Tensor::zeros(&[16, 8])).unwrap();
        let img = codec.decode_tokens(&grid).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_of_encode_preserves_shape() {
        let mut r = rng(163);
        let codec = PatchCodec::new(32, 32, 1, 4, 16, &mut r).unwrap();
        let img = Image::zeros(32, 32, 1);
        let out = codec
            .decode_tokens(&codec.encode_image(&img).unwrap())
            .unwrap();
        assert_eq!((out.width(), out.height(), out.channels()), (32, 32, 1));
    }

    #[test]
    fn codec_maps_are_linear_in_convex_combinations() {
        // with weights a + b = 1 the affine bias and positional terms cancel,
        // so f(a*x + b*y) = a*f(x) + b*f(y) must hold exactly up to rounding
        let mut r = rng(167);
        let codec = PatchCodec::new(16, 16, 1, 4, 8, &mut r).unwrap();
        let (a, b) = (0.3, 0.7);
        let ia_data: Vec<f64> = (0..256).map(|_| r.gen_range(0.0..1.0)).collect();
        let ib_data: Vec<f64> = (0..256).map(|_| r.gen_range(0.0..1.0)).collect();
        let mix_data: Vec<f64> = ia_data
            .iter()
            .zip(&ib_data)
            .map(|(&x, &y)| a * x + b * y)
            .collect();
        let ia = Image::new(16, 16, 1, ia_data).unwrap();
        let ib = Image::new(16, 16, 1, ib_data).unwrap();
        let mix = Image::new(16, 16, 1, mix_data).unwrap();
        let ga = codec.encode_image(&ia).unwrap();
        let gb = codec.encode_image(&ib).unwrap();
        let gmix = codec.encode_image(&mix).unwrap();
        for i in 0..gmix.tokens.numel() {
            let expect = a * ga.tokens.data()[i] + b * gb.tokens.data()[i];
            assert!((gmix.tokens.data()[i] - expect).abs() < 1e-12);
        }
        // decoder side, on unclamped features
        let ta = rand_tensor(&[16, 8], &mut r);
        let tb = rand_tensor(&[16, 8], &mut r);
        let mix_tokens = Tensor::from_vec(
            vec![16, 8],
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| a * x + b * y)
                .collect(),
        )
        .unwrap();
        let fa = codec.decode_features(&ta).unwrap();
        let fb = codec.decode_features(&tb).unwrap();
        let fmix = codec.decode_features(&mix_tokens).unwrap();
        for i in 0..fmix.numel() {
            let expect = a * fa.data()[i] + b * fb.data()[i];
            assert!((fmix.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn codec_gradients_match_finite_differences() {
        let mut r = rng(173);
        let codec = PatchCodec::new(8, 8, 1, 4, 6, &mut r).unwrap();
        let img_data: Vec<f64> = (0..64).map(|_| r.gen_range(0.0..1.0)).collect();
        let img = Image::new(8, 8, 1, img_data).unwrap();
        // loss through encode -> decode, gradient wrt encoder weight
        let c2 = codec.clone();
        let img2 = img.clone();
        check_grad_wrt_input(
            move |tape, enc_w| {
                let patches = c2.patch_rows(&img2)?;
                let p = tape.leaf(&patches);
                let h = tape.matmul(p, enc_w)?;
                let bias = tape.leaf(&c2.enc.bias);
                let h = tape.add_row(h, bias)?;
                let pos = tape.leaf(&c2.pos);
                let x = tape.add(h, pos)?;
                let dec_w = tape.leaf(&c2.dec.weight);
                let out = tape.matmul(x, dec_w)?;
                let dec_b = tape.leaf(&c2.dec.bias);
                let out = tape.add_row(out, dec_b)?;
                let target = tape.leaf(&patches);
                tape.mse(out, target)
            },
            &codec.enc.weight,
            1e-5,
        );
    }
}
