//! Run configuration: a flat `key = value` text format with `#` comments.
//! Unknown keys are errors; every field has a toy-scale default.

use crate::error::{Error, Result};
use crate::globals::GlobalKind;

/// Which pooling the compressor applies to the local stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompressorKind {
    Avg,
    Max,
}

impl CompressorKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(CompressorKind::Avg),
            "max" => Ok(CompressorKind::Max),
            other => Err(Error::Config(format!(
                "unknown compressor kind {other:?} (expected avg or max)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CompressorKind::Avg => "avg",
            CompressorKind::Max => "max",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub codebook_size: usize,
    pub stride: usize,
    pub n_g: usize,
    pub heads: usize,
    pub decoder_layers: usize,
    pub lambda_cb: f64,
    pub beta: f64,
    pub lr: f64,
    pub batch: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub seed: u64,
    pub classes: usize,
    pub train_count: usize,
    pub holdout_count: usize,
    pub global_kind: GlobalKind,
    pub compressor_kind: CompressorKind,
    pub freeze_base: bool,
    pub lm_width: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            image_h: 32,
            image_w: 32,
            channels: 1,
            patch_size: 4,
            embed_dim: 32,
            codebook_size: 64,
            stride: 2,
            n_g: 4,
            heads: 2,
            decoder_layers: 2,
            lambda_cb: 0.25,
            beta: 0.25,
            lr: 1e-3,
            batch: 16,
            stage1_steps: 3000,
            stage2_steps: 2000,
            seed: 0,
            classes: 4,
            train_count: 200,
            holdout_count: 40,
            global_kind: GlobalKind::Meta,
            compressor_kind: CompressorKind::Avg,
            freeze_base: false,
            lm_width: 64,
            lm_layers: 2,
            lm_heads: 2,
        }
    }
}

impl RunConfig {
    pub fn grid_h(&self) -> usize {
        self.image_h / self.patch_size
    }

    pub fn grid_w(&self) -> usize {
        self.image_w / self.patch_size
    }

    pub fn token_count(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn pooled_count(&self) -> usize {
        self.token_count() / (self.stride * self.stride)
    }

    /// The plug-in is inert exactly when nothing is compressed and no global
    /// stream exists; the stack then degenerates to the base tokenizer.
    pub fn plugin_active(&self) -> bool {
        self.stride > 1 || self.n_g > 0
    }

    pub fn sequence_layout(&self) -> crate::compressor::SequenceLayout {
        crate::compressor::SequenceLayout {
            n_g: self.n_g,
            t_local: self.pooled_count(),
        }
    }

    pub fn vocab(&self) -> crate::compressor::Vocab {
        crate::compressor::Vocab {
            codebook_size: self.codebook_size,
            classes: self.classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0
            || self.image_h % self.patch_size != 0
            || self.image_w % self.patch_size != 0
        {
            return fail(format!(
                "image {}x{} not divisible by patch_size {}",
                self.image_w, self.image_h, self.patch_size
            ));
        }
        if !matches!(self.stride, 1 | 2 | 4 | 8) {
            return fail(format!(
                "stride {} outside the supported keep-ratio grid {{1,2,4,8}}",
                self.stride
            ));
        }
        if self.grid_h() % self.stride != 0 || self.grid_w() % self.stride != 0 {
            return fail(format!(
                "token grid {}x{} not divisible by stride {}",
                self.grid_h(),
                self.grid_w(),
                self.stride
            ));
        }
        if !matches!(self.n_g, 0 | 2 | 4 | 8 | 16) {
            return fail(format!(
                "n_g {} outside the supported grid {{0,2,4,8,16}}",
                self.n_g
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return fail(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.embed_dim % self.heads != 0 {
            return fail(format!(
                "heads {} must divide embed_dim {}",
                self.heads, self.embed_dim
            ));
        }
        if self.lm_width % self.lm_heads != 0 {
            return fail(format!(
                "lm_heads {} must divide lm_width {}",
                self.lm_heads, self.lm_width
            ));
        }
        if self.codebook_size == 0 {
            return fail("codebook_size must be positive".to_string());
        }
        if self.classes < 2 || self.classes > 6 {
            return fail(format!("classes must be in 2..=6, got {}", self.classes));
        }
        if self.batch == 0 || self.train_count == 0 {
            return fail("batch and train_count must be positive".to_string());
        }
        Ok(())
    }

    /// Parse the flat text format on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            cfg.apply(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "image_h" => self.image_h = num(key, value)?,
            "image_w" => self.image_w = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "patch_size" => self.patch_size = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "codebook_size" => self.codebook_size = num(key, value)?,
            "stride" => self.stride = num(key, value)?,
            "n_g" => self.n_g = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "decoder_layers" => self.decoder_layers = num(key, value)?,
            "lambda_cb" => self.lambda_cb = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "stage1_steps" => self.stage1_steps = num(key, value)?,
            "stage2_steps" => self.stage2_steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "classes" => self.classes = num(key, value)?,
            "train_count" => self.train_count = num(key, value)?,
            "holdout_count" => self.holdout_count = num(key, value)?,
            "global_kind" => self.global_kind = GlobalKind::parse(value)?,
            "compressor_kind" => self.compressor_kind = CompressorKind::parse(value)?,
            "freeze_base" => {
                self.freeze_base = match value {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    other => {
                        return Err(Error::Config(format!(
                            "bad value {other:?} for freeze_base"
                        )))
                    }
                }
            }
            "lm_width" => self.lm_width = num(key, value)?,
            "lm_layers" => self.lm_layers = num(key, value)?,
            "lm_heads" => self.lm_heads = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// The effective configuration in the same text format.
    pub fn to_text(&self) -> String {
        format!(
            "image_h = {}\nimage_w = {}\nchannels = {}\npatch_size = {}\nembed_dim = {}\n\
             codebook_size = {}\nstride = {}\nn_g = {}\nheads = {}\ndecoder_layers = {}\n\
             lambda_cb = {}\nbeta = {}\nlr = {}\nbatch = {}\nstage1_steps = {}\n\
             stage2_steps = {}\nseed = {}\nclasses = {}\ntrain_count = {}\nholdout_count = {}\n\
             global_kind = {}\ncompressor_kind = {}\nfreeze_base = {}\nlm_width = {}\n\
             lm_layers = {}\nlm_heads = {}\n",
            self.image_h,
            self.image_w,
            self.channels,
            self.patch_size,
            self.embed_dim,
            self.codebook_size,
            self.stride,
            self.n_g,
            self.heads,
            self.decoder_layers,
            self.lambda_cb,
            self.beta,
            self.lr,
            self.batch,
            self.stage1_steps,
            self.stage2_steps,
            self.seed,
            self.classes,
            self.train_count,
            self.holdout_count,
            self.global_kind.name(),
            self.compressor_kind.name(),
            self.freeze_base,
            self.lm_width,
            self.lm_layers,
            self.lm_heads,
        )
    }
}
