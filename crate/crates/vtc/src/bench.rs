//! Efficiency and ablation measurements: sequence-length/FLOP accounting,
//! end-to-end generation wall-clock, and the keep-ratio / global-token /
//! compressor sweeps. Sweeps train their arms sequentially (never in
//! parallel, to keep timings clean) and reuse checkpoints already present in
//! the arm directory.
//!
//! FLOP figures count multiply-accumulates times two and exclude
//! normalization and softmax work; every CSV carries that note in its header
//! comment.

use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::config::{CompressorKind, RunConfig};
use crate::error::{Error, Result};
use crate::globals::GlobalKind;
use crate::pipeline::{
    discrete_recon_pixel_mse, feature_recon_mse_set, generate_image, holdout_dataset,
    load_stage_two, probe_accuracy, stage_one_train, stage_two_train, TokenizerStack, STAGE1_CKPT,
    STAGE2_CKPT, STAGE2_CSV,
};
use crate::seqmodel::SequenceModel;

/// Transformer cost model over one stack of causal layers: per layer the
/// attention term 2*n^2*d plus projections 4*n*d^2 plus feed-forward 8*n*d^2.
#[derive(Debug, Clone, Copy)]
pub struct CostModel {
    pub width: usize,
    pub layers: usize,
}

impl CostModel {
    /// One full forward pass over n positions.
    pub fn forward_flops(&self, n: usize) -> u64 {
        let (n, d, l) = (n as u64, self.width as u64, self.layers as u64);
        l * (2 * n * n * d + 4 * n * d * d + 8 * n * d * d)
    }

    /// Autoregressive generation of n tokens without caching: the sum of full
    /// forward passes over every prefix length.
    pub fn autoregressive_flops(&self, n: usize) -> u64 {
        (1..=n).map(|t| self.forward_flops(t)).sum()
    }

    /// The attention term alone, for scaling arguments.
    pub fn attention_flops(&self, n: usize) -> u64 {
        let (n, d, l) = (n as u64, self.width as u64, self.layers as u64);
        l * 2 * n * n * d
    }
}

/// Per-step cost summed over prefix lengths 1..=n.
pub fn flops_autoregressive(n: usize, width: usize, layers: usize) -> u64 {
    CostModel { width, layers }.autoregressive_flops(n)
}

/// One measured configuration.
#[derive(Debug, Clone)]
pub struct BenchReport {
    pub config_id: String,
    pub param: String,
    pub keep_ratio: (u32, u32),
    pub dense_tokens: usize,
    pub compact_tokens: usize,
    pub ar_steps: usize,
    pub flops_generation: u64,
    pub wall_mean_s: Option<f64>,
    pub wall_std_s: Option<f64>,
    pub repeats: usize,
    pub recon_feature_mse: Option<f64>,
    pub recon_pixel_mse: Option<f64>,
    pub probe_acc: Option<f64>,
    pub lm_final_loss: Option<f64>,
    pub status: String,
}

impl BenchReport {
    fn skipped(config_id: String, param: String, why: String) -> Self {
        BenchReport {
            config_id,
            param,
            keep_ratio: (0, 0),
            dense_tokens: 0,
            compact_tokens: 0,
            ar_steps: 0,
            flops_generation: 0,
            wall_mean_s: None,
            wall_std_s: None,
            repeats: 0,
            recon_feature_mse: None,
            recon_pixel_mse: None,
            probe_acc: None,
            lm_final_loss: None,
            status: format!("skipped: {why}"),
        }
    }
}

pub const CSV_HEADER: &str = "config_id,param,keep_ratio,dense_tokens,compact_tokens,ar_steps,flops_generation,wall_mean_s,wall_std_s,repeats,recon_feature_mse,recon_pixel_mse,probe_accuracy,lm_final_loss,status";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn reports_to_csv(reports: &[BenchReport]) -> String {
    let mut text = String::from(
        "# flops count multiply-accumulates x2; normalization and softmax are excluded\n",
    );
    text.push_str(CSV_HEADER);
    text.push('\n');
    for r in reports {
        text.push_str(&format!(
            "{},{},{}/{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.config_id,
            r.param,
            r.keep_ratio.0,
            r.keep_ratio.1,
            r.dense_tokens,
            r.compact_tokens,
            r.ar_steps,
            r.flops_generation,
            opt(r.wall_mean_s),
            opt(r.wall_std_s),
            r.repeats,
            opt(r.recon_feature_mse),
            opt(r.recon_pixel_mse),
            opt(r.probe_acc),
            opt(r.lm_final_loss),
            r.status,
        ));
    }
    text
}

/// Wall-clock of `count` end-to-end generations (sequence emission,
/// de-quantization, decompression, pixel decode), repeated `repeats` times;
/// the timed region runs on this single thread.
pub struct GenerationTiming {
    pub ar_steps_per_image: usize,
    pub times_s: Vec<f64>,
    pub mean_s: f64,
    pub std_s: f64,
}

pub fn time_generation(
    stack: &TokenizerStack,
    model: &SequenceModel,
    count: usize,
    repeats: usize,
) -> Result<GenerationTiming> {
    if repeats < 5 {
        return Err(Error::Config(format!(
            "timing runs need at least 5 repeats, got {repeats}"
        )));
    }
    let mut times = Vec::with_capacity(repeats);
    for rep in 0..repeats {
        let t0 = Instant::now();
        for i in 0..count {
            let class = i % stack.cfg.classes;
            let _ = generate_image(stack, model, class, 0.0, rep as u64)?;
        }
        times.push(t0.elapsed().as_secs_f64());
    }
    let mean = times.iter().sum::<f64>() / repeats as f64;
    let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (repeats - 1) as f64;
    Ok(GenerationTiming {
        ar_steps_per_image: stack.cfg.sequence_layout().total_len(),
        times_s: times,
        mean_s: mean,
        std_s: var.sqrt(),
    })
}

/// Measurement knobs shared by the sweeps.
#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    pub repeats: usize,
    pub time_count: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            repeats: 5,
            time_count: 2,
        }
    }
}

fn read_final_stage2_loss(dir: &Path) -> Option<f64> {
    let text = fs::read_to_string(dir.join(STAGE2_CSV)).ok()?;
    let last = text.lines().filter(|l| !l.is_empty()).next_back()?;
    last.split(',').nth(1)?.parse().ok()
}

/// Train (only if the checkpoints are absent) and measure one configuration.
pub fn run_arm(
    cfg: &RunConfig,
    arm_dir: &Path,
    param: String,
    opts: SweepOptions,
) -> Result<BenchReport> {
    fs::create_dir_all(arm_dir)?;
    if !arm_dir.join(STAGE1_CKPT).exists() {
        stage_one_train(cfg, arm_dir)?;
    }
    if !arm_dir.join(STAGE2_CKPT).exists() {
        stage_two_train(cfg, arm_dir)?;
    }
    let (stack, model) = load_stage_two(cfg, arm_dir)?;
    let holdout = holdout_dataset(cfg);

    let recon_feature = if stack.decoder.is_some() {
        Some(feature_recon_mse_set(&stack, &holdout, false)?)
    } else {
        None
    };
    let recon_pixel = Some(discrete_recon_pixel_mse(&stack, &holdout)?);
    let probe = Some(probe_accuracy(&stack, &model, &holdout)?);
    let timing = time_generation(&stack, &model, opts.time_count, opts.repeats)?;
    let layout = cfg.sequence_layout();
    let lm = CostModel {
        width: cfg.lm_width,
        layers: cfg.lm_layers,
    };

    Ok(BenchReport {
        config_id: arm_dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "arm".to_string()),
        param,
        keep_ratio: crate::compressor::keep_ratio(cfg.stride)?,
        dense_tokens: cfg.token_count(),
        compact_tokens: layout.total_len(),
        ar_steps: timing.ar_steps_per_image,
        flops_generation: lm.autoregressive_flops(layout.total_len()),
        wall_mean_s: Some(timing.mean_s),
        wall_std_s: Some(timing.std_s),
        repeats: opts.repeats,
        recon_feature_mse: recon_feature,
        recon_pixel_mse: recon_pixel,
        probe_acc: probe,
        lm_final_loss: read_final_stage2_loss(arm_dir),
        status: "ok".to_string(),
    })
}

/// Keep-ratio sweep over strides; non-divisible strides become explicit
/// warning rows rather than silent omissions.
pub fn sweep_keep_ratio(
    base: &RunConfig,
    strides: &[usize],
    out_dir: &Path,
    opts: SweepOptions,
) -> Result<Vec<BenchReport>> {
    let mut reports = Vec::new();
    for &s in strides {
        let mut cfg = base.clone();
        cfg.stride = s;
        let param = format!("s={s}");
        let id = format!("ratio_s{s}");
        match cfg.validate() {
            Ok(()) => reports.push(run_arm(&cfg, &out_dir.join(&id), param, opts)?),
            Err(e) => reports.push(BenchReport::skipped(id, param, e.to_string())),
        }
    }
    fs::write(out_dir.join("keep_ratio.csv"), reports_to_csv(&reports))?;
    Ok(reports)
}

/// Global-token-count sweep.
pub fn sweep_global_tokens(
    base: &RunConfig,
    counts: &[usize],
    out_dir: &Path,
    opts: SweepOptions,
) -> Result<Vec<BenchReport>> {
    let mut reports = Vec::new();
    for &n_g in counts {
        let mut cfg = base.clone();
        cfg.n_g = n_g;
        let param = format!("n_g={n_g}");
        let id = format!("ng_{n_g}");
        match cfg.validate() {
            Ok(()) => reports.push(run_arm(&cfg, &out_dir.join(&id), param, opts)?),
            Err(e) => reports.push(BenchReport::skipped(id, param, e.to_string())),
        }
    }
    fs::write(out_dir.join("global_tokens.csv"), reports_to_csv(&reports))?;
    Ok(reports)
}

/// Global-token-type ablation at matched budget.
pub fn ablate_global_type(
    base: &RunConfig,
    kinds: &[GlobalKind],
    out_dir: &Path,
    opts: SweepOptions,
) -> Result<Vec<BenchReport>> {
    let mut reports = Vec::new();
    for &kind in kinds {
        let mut cfg = base.clone();
        cfg.global_kind = kind;
        let param = format!("kind={}", kind.name());
        let id = format!("gtype_{}", kind.name());
        reports.push(run_arm(&cfg, &out_dir.join(&id), param, opts)?);
    }
    fs::write(out_dir.join("global_type.csv"), reports_to_csv(&reports))?;
    Ok(reports)
}

/// Compressor ablation at the same token budget.
pub fn ablate_compressor(
    base: &RunConfig,
    kinds: &[CompressorKind],
    out_dir: &Path,
    opts: SweepOptions,
) -> Result<Vec<BenchReport>> {
    let mut reports = Vec::new();
    for &kind in kinds {
        let mut cfg = base.clone();
        cfg.compressor_kind = kind;
        let param = format!("kind={}", kind.name());
        let id = format!("comp_{}", kind.name());
        reports.push(run_arm(&cfg, &out_dir.join(&id), param, opts)?);
    }
    fs::write(out_dir.join("compressor.csv"), reports_to_csv(&reports))?;
    Ok(reports)
}

/// The headline comparison: the configured compact arm against the
/// uncompressed dense baseline (stride 1, no globals, no decompressor).
pub fn compare_with_dense_baseline(
    cfg: &RunConfig,
    out_dir: &Path,
    opts: SweepOptions,
) -> Result<(BenchReport, BenchReport)> {
    let compact = run_arm(
        cfg,
        &out_dir.join("compact"),
        format!("s={},n_g={}", cfg.stride, cfg.n_g),
        opts,
    )?;
    let mut dense_cfg = cfg.clone();
    dense_cfg.stride = 1;
    dense_cfg.n_g = 0;
    let dense = run_arm(
        &dense_cfg,
        &out_dir.join("dense"),
        "s=1,n_g=0".to_string(),
        opts,
    )?;
    let both = vec![compact.clone(), dense.clone()];
    fs::write(out_dir.join("benchmark.csv"), reports_to_csv(&both))?;
    Ok((compact, dense))
}
