//! Two-stage training orchestration.
//!
//! Stage one trains the tokenizer side: the patch codec on pixel
//! reconstruction, the shared codebook on both compact streams, and the
//! extractor/decompressor on the teacher-forced reconstruction objective with
//! continuous contexts. Stage two freezes all of that, encodes the dataset
//! into compact records, and trains the sequence model on them.
//!
//! When stride is 1 and no global tokens are configured there is nothing to
//! compress: the stack degenerates to the base tokenizer (codec + codebook)
//! and stage one trains exactly that, which also serves as the uncompressed
//! baseline arm for benchmarks.
//!
//! Every run directory is guarded by an exclusive lock file; a fixed
//! (seed, config) pair reproduces checkpoints and loss curves byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::basetok::{
    dequantize, quantize_rows, vq_straight_through, Codebook, PatchCodec, PatchCodecVals, TokenGrid,
};
use crate::checkpoint::load_checkpoint;
use crate::compressor::{
    assemble_with_layout, avg_pool_grid, max_pool_grid, upsample_nearest, CompressedGrid,
    IndexSequence,
};
use crate::config::{CompressorKind, RunConfig};
use crate::dataset::{make_dataset, stream_seed, SyntheticSample};
use crate::decompressor::{generate_image_from_indices, DecoderParams, DecoderVals};
use crate::error::{Error, Result};
use crate::globals::{GlobalExtractor, GlobalExtractorVals, GlobalTokens};
use crate::image::Image;
use crate::layers::LinearVals;
use crate::optim::Adam;
use crate::seqmodel::{
    train_multitask, PromptRecord, SequenceModel, StepLoss, UnderstandingRecord,
};
use crate::tape::{Tape, Val};
use crate::tensor::Tensor;

pub const STAGE1_CKPT: &str = "stage1.ckpt";
pub const STAGE2_CKPT: &str = "stage2.ckpt";
pub const STAGE1_CSV: &str = "stage1_loss.csv";
pub const STAGE2_CSV: &str = "stage2_loss.csv";

/// Exclusive per-run-directory lock; removed on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(format!(
                "{} exists; another process owns this run directory",
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// The tokenizer-side model set for one configuration.
#[derive(Clone)]
pub struct TokenizerStack {
    pub cfg: RunConfig,
    pub codec: PatchCodec,
    pub codebook: Codebook,
    pub extractor: Option<GlobalExtractor>,
    pub decoder: Option<DecoderParams>,
}

pub struct StackVals {
    pub codec: PatchCodecVals,
    pub codes: Val,
    pub extractor: Option<GlobalExtractorVals>,
    pub decoder: Option<DecoderVals>,
}

impl TokenizerStack {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut codec_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, "basetok"));
        let codec = PatchCodec::new(
            cfg.image_h,
            cfg.image_w,
            cfg.channels,
            cfg.patch_size,
            cfg.embed_dim,
            &mut codec_rng,
        )?;
        let mut cb_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, "codebook"));
        let codebook = Codebook::init(cfg.codebook_size, cfg.embed_dim, &mut cb_rng);
        let extractor = if cfg.n_g > 0 {
            let mut g_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, "globals"));
            Some(GlobalExtractor::new(
                cfg.global_kind,
                cfg.n_g,
                cfg.embed_dim,
                cfg.heads,
                &mut g_rng,
            ))
        } else {
            None
        };
        let decoder = if cfg.plugin_active() {
            let mut d_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, "decomp"));
            Some(DecoderParams::new(
                cfg.grid_h(),
                cfg.grid_w(),
                cfg.n_g + cfg.pooled_count(),
                cfg.embed_dim,
                cfg.decoder_layers,
                cfg.heads,
                &mut d_rng,
            ))
        } else {
            None
        };
        Ok(TokenizerStack {
            cfg: cfg.clone(),
            codec,
            codebook,
            extractor,
            decoder,
        })
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Tensor)) {
        self.codec.visit("basetok", f);
        f("codebook.codes".to_string(), &self.codebook.codes);
        if let Some(ex) = &self.extractor {
            ex.visit("globals", f);
        }
        if let Some(dec) = &self.decoder {
            dec.visit("decomp", f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.codec.visit_mut("basetok", f);
        f("codebook.codes".to_string(), &mut self.codebook.codes);
        if let Some(ex) = &mut self.extractor {
            ex.visit_mut("globals", f);
        }
        if let Some(dec) = &mut self.decoder {
            dec.visit_mut("decomp", f);
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t.clone())));
        out
    }

    /// Overwrite parameters from checkpoint entries; cites missing and
    /// unexpected names.
    pub fn apply_tensors(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let mut missing = Vec::new();
        let mut used = vec![false; entries.len()];
        let mut shape_issue = None;
        self.visit_mut(
            &mut |name, t| match entries.iter().position(|(n, _)| *n == name) {
                Some(i) => {
                    if entries[i].1.dims() != t.dims() {
                        shape_issue.get_or_insert(format!(
                            "{name}: checkpoint dims {:?} vs model dims {:?}",
                            entries[i].1.dims(),
                            t.dims()
                        ));
                    } else {
                        *t = entries[i].1.clone();
                        used[i] = true;
                    }
                }
                None => missing.push(name),
            },
        );
        if let Some(issue) = shape_issue {
            return Err(Error::Config(format!("checkpoint mismatch: {issue}")));
        }
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "checkpoint is missing tensors: {}",
                missing.join(", ")
            )));
        }
        let extra: Vec<&str> = entries
            .iter()
            .zip(&used)
            .filter(|(_, &u)| !u)
            .map(|((n, _), _)| n.as_str())
            .collect();
        if !extra.is_empty() {
            return Err(Error::Config(format!(
                "checkpoint has unexpected tensors: {}",
                extra.join(", ")
            )));
        }
        Ok(())
    }

    /// Register every tensor on the tape. With `freeze_base` the patch codec
    /// goes on as plain leaves: same forward, no gradients, no updates.
    pub fn register(&self, tape: &mut Tape, freeze_base: bool) -> StackVals {
        let codec = if freeze_base {
            PatchCodecVals {
                enc: LinearVals {
                    weight: tape.leaf(&self.codec.enc.weight),
                    bias: tape.leaf(&self.codec.enc.bias),
                },
                pos: tape.leaf(&self.codec.pos),
                dec: LinearVals {
                    weight: tape.leaf(&self.codec.dec.weight),
                    bias: tape.leaf(&self.codec.dec.bias),
                },
            }
        } else {
            self.codec.register(tape, "basetok")
        };
        StackVals {
            codec,
            codes: tape.param("codebook.codes", &self.codebook.codes),
            extractor: self
                .extractor
                .as_ref()
                .map(|ex| ex.register(tape, "globals")),
            decoder: self.decoder.as_ref().map(|d| d.register(tape, "decomp")),
        }
    }

    // ── plain-value forward pieces (inference) ──────────────────────────

    pub fn encode(&self, img: &Image) -> Result<TokenGrid> {
        self.codec.encode_image(img)
    }

    pub fn pool(&self, x: &TokenGrid) -> Result<CompressedGrid> {
        match self.cfg.compressor_kind {
            CompressorKind::Avg => avg_pool_grid(x, self.cfg.stride),
            CompressorKind::Max => max_pool_grid(x, self.cfg.stride),
        }
    }

    pub fn extract(&self, x: &TokenGrid) -> Result<Option<GlobalTokens>> {
        match &self.extractor {
            Some(ex) => Ok(Some(ex.extract(x)?)),
            None => Ok(None),
        }
    }

    /// Dense grid, globals (if configured), and the pooled grid for an image.
    pub fn encode_streams(
        &self,
        img: &Image,
    ) -> Result<(TokenGrid, Option<GlobalTokens>, CompressedGrid)> {
        let x = self.encode(img)?;
        let g = self.extract(&x)?;
        let xc = self.pool(&x)?;
        Ok((x, g, xc))
    }

    /// Quantize both streams and assemble the wire sequence.
    pub fn encode_to_sequence(&self, img: &Image) -> Result<IndexSequence> {
        let (_, g, xc) = self.encode_streams(img)?;
        let zg = match &g {
            Some(g) => quantize_rows(&g.values, &self.codebook)?,
            None => Vec::new(),
        };
        let zx = quantize_rows(&xc.tokens, &self.codebook)?;
        assemble_with_layout(self.cfg.sequence_layout(), &zg, &zx)
    }

    /// Decode a wire sequence to pixels: through the decompressor when one is
    /// configured, otherwise directly from the de-quantized dense tokens (the
    /// original tokenizer path).
    pub fn decode_sequence(&self, seq: &IndexSequence) -> Result<Image> {
        match &self.decoder {
            Some(decoder) => generate_image_from_indices(seq, &self.codebook, decoder, &self.codec),
            None => {
                let (zg, zx) = crate::compressor::parse_sequence(seq)?;
                if !zg.is_empty() {
                    return Err(Error::Config(
                        "global indices present but no decompressor is configured".to_string(),
                    ));
                }
                let rows = dequantize(&zx, &self.codebook)?;
                let grid = TokenGrid::new(self.cfg.grid_h(), self.cfg.grid_w(), rows)?;
                self.codec.decode_tokens(&grid)
            }
        }
    }

    /// The full discrete round trip for one image.
    pub fn reconstruct_discrete(&self, img: &Image) -> Result<(IndexSequence, Image)> {
        let seq = self.encode_to_sequence(img)?;
        let out = self.decode_sequence(&seq)?;
        Ok((seq, out))
    }

    /// Dense-feature reconstruction through the decompressor on continuous
    /// contexts, optionally with the global tokens zeroed out.
    pub fn feature_recon_mse(&self, img: &Image, zero_globals: bool) -> Result<f64> {
        let decoder = self.decoder.as_ref().ok_or_else(|| {
            Error::Config("feature reconstruction needs the decompressor".to_string())
        })?;
        let (x, g, xc) = self.encode_streams(img)?;
        let g = match g {
            Some(mut g) => {
                if zero_globals {
                    g.values = Tensor::zeros(g.values.dims());
                }
                Some(g)
            }
            None => None,
        };
        let dense = decoder.decode_full(g.as_ref(), &xc.tokens)?;
        Ok(mse_slices(dense.tokens.data(), x.tokens.data()))
    }

    /// Nearest-neighbor upsampling of the pooled grid against the dense grid:
    /// the no-model decompression baseline.
    pub fn upsample_baseline_mse(&self, img: &Image) -> Result<f64> {
        let (x, _, xc) = self.encode_streams(img)?;
        let up = upsample_nearest(&xc);
        Ok(mse_slices(up.tokens.data(), x.tokens.data()))
    }
}

pub fn mse_slices(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64
}

/// Pixel MSE of the best constant predictor (the per-set mean value).
pub fn constant_baseline_mse(samples: &[SyntheticSample]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in samples {
        sum += s.image.data().iter().sum::<f64>();
        n += s.image.data().len();
    }
    let mean = sum / n as f64;
    let mut acc = 0.0;
    for s in samples {
        acc += s
            .image
            .data()
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<f64>();
    }
    acc / n as f64
}

pub fn train_dataset(cfg: &RunConfig) -> Vec<SyntheticSample> {
    make_dataset(
        stream_seed(cfg.seed, "data.train"),
        cfg.train_count,
        cfg.image_w,
        cfg.image_h,
        cfg.channels,
        cfg.classes,
    )
}

pub fn holdout_dataset(cfg: &RunConfig) -> Vec<SyntheticSample> {
    make_dataset(
        stream_seed(cfg.seed, "data.holdout"),
        cfg.holdout_count,
        cfg.image_w,
        cfg.image_h,
        cfg.channels,
        cfg.classes,
    )
}

#[derive(Debug, Clone, Copy)]
pub struct StageOneLoss {
    pub step: usize,
    pub total: f64,
    pub l_reg: f64,
    pub l_cb: f64,
}

pub struct StageOneArtifacts {
    pub stack: TokenizerStack,
    pub curve: Vec<StageOneLoss>,
    pub ckpt_path: PathBuf,
}

/// One sample's stage-one loss on the tape: (total, l_reg, l_cb).
fn stage_one_sample_loss(
    tape: &mut Tape,
    stack: &TokenizerStack,
    vals: &StackVals,
    sample: &SyntheticSample,
) -> Result<(Val, Val, Val)> {
    let cfg = &stack.cfg;
    let patches = stack.codec.patch_rows(&sample.image)?;
    let p = tape.leaf(&patches);
    let x = stack.codec.encode_rows_on_tape(tape, &vals.codec, p)?;
    let decoded = stack.codec.decode_on_tape(tape, &vals.codec, x)?;
    let l_pix = tape.mse(decoded, p)?;

    if !cfg.plugin_active() {
        // base tokenizer alone: pixel reconstruction plus dense-stream VQ
        let (_, l_vq) = vq_straight_through(tape, x, vals.codes, cfg.beta)?;
        let total = tape.add(l_pix, l_vq)?;
        let zero_a = tape.constant(&[1], vec![0.0]);
        let zero_b = tape.constant(&[1], vec![0.0]);
        return Ok((total, zero_a, zero_b));
    }

    let decoder = stack
        .decoder
        .as_ref()
        .expect("active plug-in has a decompressor");
    let dvals = vals.decoder.as_ref().expect("registered decompressor");

    let g = match (&stack.extractor, &vals.extractor) {
        (Some(ex), Some(exv)) => Some(ex.extract_on_tape(tape, exv, x)?),
        _ => None,
    };
    let xc = match cfg.compressor_kind {
        CompressorKind::Avg => tape.avg_pool_grid(x, cfg.grid_h(), cfg.grid_w(), cfg.stride)?,
        CompressorKind::Max => tape.max_pool_grid(x, cfg.grid_h(), cfg.grid_w(), cfg.stride)?,
    };

    // VQ terms keep the shared codebook tracking both compact streams so the
    // discrete generation path stays faithful.
    let mut stream_vq = match g {
        Some(g) => {
            let (_, l) = vq_straight_through(tape, g, vals.codes, cfg.beta)?;
            Some(l)
        }
        None => None,
    };
    let (_, l_vq_x) = vq_straight_through(tape, xc, vals.codes, cfg.beta)?;
    stream_vq = Some(match stream_vq {
        Some(prev) => tape.add(prev, l_vq_x)?,
        None => l_vq_x,
    });

    // teacher-forced reconstruction with continuous contexts
    let ctx = decoder.context_on_tape(tape, dvals, g, xc)?;
    let (l_recon, l_reg, l_cb) = decoder.teacher_forced_loss_on_tape(
        tape,
        dvals,
        x,
        ctx,
        vals.codes,
        cfg.lambda_cb,
        cfg.beta,
    )?;

    let total = tape.add(l_recon, stream_vq.unwrap())?;
    let total = tape.add(total, l_pix)?;
    Ok((total, l_reg, l_cb))
}

/// Stage one: train the tokenizer stack on the synthetic set, emitting the
/// checkpoint and the loss CSV into `out_dir`. A non-finite loss aborts with
/// the last-good checkpoint on disk.
pub fn stage_one_train(cfg: &RunConfig, out_dir: &Path) -> Result<StageOneArtifacts> {
    cfg.validate()?;
    let _lock = RunLock::acquire(out_dir)?;
    fs::write(out_dir.join("config.txt"), cfg.to_text())?;

    let train = train_dataset(cfg);
    let mut stack = TokenizerStack::new(cfg)?;
    let mut opt = Adam::new(cfg.lr);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, "stage1.batches"));
    let mut curve = Vec::with_capacity(cfg.stage1_steps);
    let ckpt_path = out_dir.join(STAGE1_CKPT);

    for step in 0..cfg.stage1_steps {
        let mut tape = Tape::new();
        let vals = stack.register(&mut tape, cfg.freeze_base);
        let mut acc: Option<(Val, Val, Val)> = None;
        for _ in 0..cfg.batch {
            let sample = &train[batch_rng.gen_range(0..train.len())];
            let (t, r, c) = stage_one_sample_loss(&mut tape, &stack, &vals, sample)?;
            acc = Some(match acc {
                Some((ta, ra, ca)) => (tape.add(ta, t)?, tape.add(ra, r)?, tape.add(ca, c)?),
                None => (t, r, c),
            });
        }
        let (t, r, c) = acc.expect("batch is non-empty");
        let inv = 1.0 / cfg.batch as f64;
        let total = tape.scale(t, inv)?;
        let l_reg = tape.scale(r, inv)?;
        let l_cb = tape.scale(c, inv)?;

        let point = StageOneLoss {
            step,
            total: tape.scalar_value(total),
            l_reg: tape.scalar_value(l_reg),
            l_cb: tape.scalar_value(l_cb),
        };
        if !point.total.is_finite() {
            // keep the last parameters that produced a finite loss
            crate::checkpoint::save_checkpoint(&ckpt_path, &stack.named_tensors())?;
            write_stage1_csv(&out_dir.join(STAGE1_CSV), &curve)?;
            return Err(Error::Diverged { step });
        }
        curve.push(point);

        tape.backward(total)?;
        opt.begin_step();
        stack.visit_mut(&mut |name, tensor| {
            opt.update(&name, tensor, tape.param_grad(&name));
        });
    }

    crate::checkpoint::save_checkpoint(&ckpt_path, &stack.named_tensors())?;
    write_stage1_csv(&out_dir.join(STAGE1_CSV), &curve)?;
    Ok(StageOneArtifacts {
        stack,
        curve,
        ckpt_path,
    })
}

fn write_stage1_csv(path: &Path, curve: &[StageOneLoss]) -> Result<()> {
    let mut text = String::from("step,loss_total,loss_reg,loss_cb\n");
    for p in curve {
        text.push_str(&format!("{},{},{},{}\n", p.step, p.total, p.l_reg, p.l_cb));
    }
    fs::write(path, text)?;
    Ok(())
}

fn write_stage2_csv(path: &Path, curve: &[StepLoss]) -> Result<()> {
    let mut text = String::from("step,loss_total,loss_gen,loss_und\n");
    for p in curve {
        text.push_str(&format!(
            "{},{},{},{}\n",
            p.step, p.total, p.generation, p.understanding
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

pub struct StageTwoArtifacts {
    pub stack: TokenizerStack,
    pub model: SequenceModel,
    pub curve: Vec<StepLoss>,
    pub ckpt_path: PathBuf,
}

/// Compact training records for every sample, produced through the frozen
/// stack: the discrete target sequence for generation and the continuous
/// pair for the understanding probe.
pub fn build_records(
    stack: &TokenizerStack,
    samples: &[SyntheticSample],
) -> Result<(Vec<PromptRecord>, Vec<UnderstandingRecord>)> {
    let vocab = stack.cfg.vocab();
    let mut gen = Vec::with_capacity(samples.len());
    let mut und = Vec::with_capacity(samples.len());
    for s in samples {
        let (_, g, xc) = stack.encode_streams(&s.image)?;
        let seq = stack.encode_to_sequence(&s.image)?;
        gen.push(PromptRecord::new(vec![vocab.class_id(s.class_id)], seq)?);
        und.push(UnderstandingRecord {
            globals: match &g {
                Some(g) => g.values.clone(),
                None => Tensor::zeros(&[0, stack.cfg.embed_dim]),
            },
            locals: xc.tokens.clone(),
            class: s.class_id,
        });
    }
    Ok((gen, und))
}

pub fn init_sequence_model(cfg: &RunConfig) -> SequenceModel {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, "seqmodel"));
    SequenceModel::new(
        cfg.vocab(),
        cfg.lm_width,
        cfg.lm_layers,
        cfg.lm_heads,
        cfg.sequence_layout().total_len() + 1,
        cfg.embed_dim,
        &mut rng,
    )
}

/// Stage two: load the stage-one checkpoint, freeze it, train the sequence
/// model on compact records, and checkpoint everything together. Tokenizer
/// tensors are byte-identical before and after.
pub fn stage_two_train(cfg: &RunConfig, out_dir: &Path) -> Result<StageTwoArtifacts> {
    cfg.validate()?;
    let _lock = RunLock::acquire(out_dir)?;
    let entries = load_checkpoint(out_dir.join(STAGE1_CKPT))?;
    let mut stack = TokenizerStack::new(cfg)?;
    stack.apply_tensors(&entries)?;

    let train = train_dataset(cfg);
    let (gen, und) = build_records(&stack, &train)?;
    let mut model = init_sequence_model(cfg);
    let curve = train_multitask(
        &mut model,
        &gen,
        &und,
        cfg.stage2_steps,
        cfg.lr,
        cfg.batch,
        stream_seed(cfg.seed, "stage2.batches"),
    )?;

    let mut tensors = stack.named_tensors();
    model.visit("seqmodel", &mut |name, t| tensors.push((name, t.clone())));
    let ckpt_path = out_dir.join(STAGE2_CKPT);
    crate::checkpoint::save_checkpoint(&ckpt_path, &tensors)?;
    write_stage2_csv(&out_dir.join(STAGE2_CSV), &curve)?;
    Ok(StageTwoArtifacts {
        stack,
        model,
        curve,
        ckpt_path,
    })
}

/// Load both models back from a stage-two checkpoint.
pub fn load_stage_two(cfg: &RunConfig, out_dir: &Path) -> Result<(TokenizerStack, SequenceModel)> {
    let entries = load_checkpoint(out_dir.join(STAGE2_CKPT))?;
    let (stack_entries, model_entries): (Vec<_>, Vec<_>) = entries
        .into_iter()
        .partition(|(name, _)| !name.starts_with("seqmodel."));
    let mut stack = TokenizerStack::new(cfg)?;
    stack.apply_tensors(&stack_entries)?;
    let mut model = init_sequence_model(cfg);
    let mut missing = Vec::new();
    model.visit_mut(
        "seqmodel",
        &mut |name, t| match model_entries.iter().find(|(n, _)| *n == name) {
            Some((_, v)) => *t = v.clone(),
            None => missing.push(name),
        },
    );
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "checkpoint is missing tensors: {}",
            missing.join(", ")
        )));
    }
    Ok((stack, model))
}

/// End-to-end generation: emit a sequence conditioned on a class token and
/// decode it to pixels.
pub fn generate_image(
    stack: &TokenizerStack,
    model: &SequenceModel,
    class: usize,
    temperature: f64,
    seed: u64,
) -> Result<(IndexSequence, Image)> {
    let vocab = stack.cfg.vocab();
    let seq = model.generate_sequence(
        &[vocab.class_id(class)],
        stack.cfg.sequence_layout(),
        temperature,
        seed,
    )?;
    let img = stack.decode_sequence(&seq)?;
    Ok((seq, img))
}

/// Fraction of held-out samples whose class the probe recovers.
pub fn probe_accuracy(
    stack: &TokenizerStack,
    model: &SequenceModel,
    samples: &[SyntheticSample],
) -> Result<f64> {
    let mut hits = 0usize;
    for s in samples {
        let (_, g, xc) = stack.encode_streams(&s.image)?;
        let globals = match &g {
            Some(g) => g.values.clone(),
            None => Tensor::zeros(&[0, stack.cfg.embed_dim]),
        };
        if model.classify(&globals, &xc.tokens)? == s.class_id {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Mean pixel MSE of the full discrete round trip over a sample set.
pub fn discrete_recon_pixel_mse(
    stack: &TokenizerStack,
    samples: &[SyntheticSample],
) -> Result<f64> {
    let mut acc = 0.0;
    for s in samples {
        let (_, out) = stack.reconstruct_discrete(&s.image)?;
        acc += out.mse(&s.image);
    }
    Ok(acc / samples.len() as f64)
}

/// Mean dense-feature reconstruction MSE over a sample set (continuous
/// contexts through the decompressor).
pub fn feature_recon_mse_set(
    stack: &TokenizerStack,
    samples: &[SyntheticSample],
    zero_globals: bool,
) -> Result<f64> {
    let mut acc = 0.0;
    for s in samples {
        acc += stack.feature_recon_mse(&s.image, zero_globals)?;
    }
    Ok(acc / samples.len() as f64)
}

/// Mean nearest-neighbor-upsample baseline MSE over a sample set.
pub fn upsample_baseline_mse_set(
    stack: &TokenizerStack,
    samples: &[SyntheticSample],
) -> Result<f64> {
    let mut acc = 0.0;
    for s in samples {
        acc += stack.upsample_baseline_mse(&s.image)?;
    }
    Ok(acc / samples.len() as f64)
}

/// Mean pixel MSE of the plain autoencoder path decode(encode(img)).
pub fn autoencoder_pixel_mse(stack: &TokenizerStack, samples: &[SyntheticSample]) -> Result<f64> {
    let mut acc = 0.0;
    for s in samples {
        let out = stack
            .codec
            .decode_tokens(&stack.codec.encode_image(&s.image)?)?;
        acc += out.mse(&s.image);
    }
    Ok(acc / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compressor::parse_sequence;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.image_h = 8;
        cfg.image_w = 8;
        cfg.patch_size = 2;
        cfg.embed_dim = 8;
        cfg.codebook_size = 8;
        cfg.stride = 2;
        cfg.n_g = 2;
        cfg.heads = 2;
        cfg.decoder_layers = 1;
        cfg.batch = 4;
        cfg.stage1_steps = 30;
        cfg.stage2_steps = 25;
        cfg.train_count = 16;
        cfg.holdout_count = 8;
        cfg.lm_width = 16;
        cfg.lm_layers = 1;
        cfg.seed = 11;
        cfg
    }

    #[test]
    fn stage_one_smoke_runs_and_reproduces_bitwise() {
        let cfg = tiny_cfg();
        let dir1 = tempfile::tempdir().unwrap();
        let a = stage_one_train(&cfg, dir1.path()).unwrap();
        assert_eq!(a.curve.len(), 30);
        assert!(a.curve.iter().all(|p| p.total.is_finite()));

        let dir2 = tempfile::tempdir().unwrap();
        let b = stage_one_train(&cfg, dir2.path()).unwrap();
        for (x, y) in a.curve.iter().zip(&b.curve) {
            assert_eq!(x.total.to_bits(), y.total.to_bits());
        }
        let bytes1 = fs::read(dir1.path().join(STAGE1_CKPT)).unwrap();
        let bytes2 = fs::read(dir2.path().join(STAGE1_CKPT)).unwrap();
        assert_eq!(bytes1, bytes2);
        let csv1 = fs::read(dir1.path().join(STAGE1_CSV)).unwrap();
        let csv2 = fs::read(dir2.path().join(STAGE1_CSV)).unwrap();
        assert_eq!(csv1, csv2);
    }

    #[test]
    fn lock_file_excludes_concurrent_writers() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(
            RunLock::acquire(dir.path()),
            Err(Error::Locked(_))
        ));
        drop(lock);
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn divergent_learning_rate_aborts_with_checkpoint() {
        let mut cfg = tiny_cfg();
        cfg.lr = 1e200;
        cfg.stage1_steps = 6;
        let dir = tempfile::tempdir().unwrap();
        match stage_one_train(&cfg, dir.path()) {
            Err(Error::Diverged { step }) => {
                assert!(step > 0);
                assert!(dir.path().join(STAGE1_CKPT).exists());
            }
            other => panic!("expected divergence, got {:?}", other.map(|_| "ok")),
        }
    }

    #[test]
    fn stage_two_freezes_tokenizer_bytes_and_trains() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        stage_one_train(&cfg, dir.path()).unwrap();
        let stage1_bytes = fs::read(dir.path().join(STAGE1_CKPT)).unwrap();

        let two = stage_two_train(&cfg, dir.path()).unwrap();
        assert_eq!(two.curve.len(), cfg.stage2_steps);
        // tokenizer subset of the stage-two checkpoint matches stage one
        let frozen = crate::checkpoint::checkpoint_bytes(&two.stack.named_tensors());
        assert_eq!(frozen, stage1_bytes);
        // and the losses moved
        assert!(two.curve.last().unwrap().total < two.curve[0].total);
    }

    #[test]
    fn discrete_path_equals_index_generation_bitwise() {
        // encoding, pooling, quantizing, assembling, then decoding from the
        // indices must reproduce the stage-side reconstruction exactly
        let cfg = tiny_cfg();
        let stack = TokenizerStack::new(&cfg).unwrap();
        let sample = &train_dataset(&cfg)[0];
        let (seq, img) = stack.reconstruct_discrete(&sample.image).unwrap();
        parse_sequence(&seq).unwrap();

        let decoder = stack.decoder.as_ref().unwrap();
        let img2 =
            generate_image_from_indices(&seq, &stack.codebook, decoder, &stack.codec).unwrap();
        assert_eq!(img.data().len(), img2.data().len());
        for (a, b) in img.data().iter().zip(img2.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn degenerate_config_trains_the_bare_tokenizer() {
        let mut cfg = tiny_cfg();
        cfg.stride = 1;
        cfg.n_g = 0;
        let stack = TokenizerStack::new(&cfg).unwrap();
        assert!(stack.extractor.is_none());
        assert!(stack.decoder.is_none());
        let names: Vec<String> = stack.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert!(names
            .iter()
            .all(|n| n.starts_with("basetok.") || n.starts_with("codebook.")));

        let dir = tempfile::tempdir().unwrap();
        let art = stage_one_train(&cfg, dir.path()).unwrap();
        assert!(art.curve.iter().all(|p| p.l_reg == 0.0 && p.l_cb == 0.0));
        // the dense wire format still works end to end
        let sample = &train_dataset(&cfg)[1];
        let (seq, _img) = art.stack.reconstruct_discrete(&sample.image).unwrap();
        assert_eq!(seq.layout.n_g, 0);
        assert_eq!(seq.len(), cfg.token_count() + 3);
    }

    #[test]
    fn freeze_base_leaves_codec_untouched() {
        let mut cfg = tiny_cfg();
        cfg.freeze_base = true;
        cfg.stage1_steps = 5;
        let before = TokenizerStack::new(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let art = stage_one_train(&cfg, dir.path()).unwrap();
        assert_eq!(
            art.stack.codec.enc.weight.data(),
            before.codec.enc.weight.data()
        );
        assert_eq!(
            art.stack.codec.dec.weight.data(),
            before.codec.dec.weight.data()
        );
        // while the codebook still moved
        assert_ne!(
            art.stack.codebook.codes.data(),
            before.codebook.codes.data()
        );
    }

    #[test]
    fn checkpoint_apply_reports_missing_and_unexpected() {
        let cfg = tiny_cfg();
        let stack = TokenizerStack::new(&cfg).unwrap();
        let mut entries = stack.named_tensors();
        let removed = entries.remove(0);
        let mut target = TokenizerStack::new(&cfg).unwrap();
        let err = target.apply_tensors(&entries).unwrap_err();
        assert!(err.to_string().contains(&removed.0));

        let mut entries = stack.named_tensors();
        entries.push(("ghost.weight".to_string(), Tensor::zeros(&[1])));
        let err = target.apply_tensors(&entries).unwrap_err();
        assert!(err.to_string().contains("ghost.weight"));
    }
}
