//! Command-line front end: two-stage training, reconstruction and generation
//! on PGM/PPM images, and the benchmark/ablation sweeps.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use vtc::bench::{
    ablate_compressor, ablate_global_type, compare_with_dense_baseline, flops_autoregressive,
    sweep_global_tokens, sweep_keep_ratio, SweepOptions,
};
use vtc::config::{CompressorKind, RunConfig};
use vtc::globals::GlobalKind;
use vtc::image::{read_pnm, write_pnm};
use vtc::pipeline::{
    generate_image, load_stage_two, stage_one_train, stage_two_train, TokenizerStack, STAGE1_CKPT,
};

#[derive(Parser)]
#[command(
    name = "vtc",
    about = "plug-in visual token compression stack",
    version
)]
struct Cli {
    /// Run configuration file (flat `key = value` text); defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed override on top of the configuration
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory for checkpoints, CSVs, and generated files
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stage one: train the tokenizer stack (codec, codebook, extractor, decompressor)
    TrainTokenizer,
    /// Stage two: freeze the tokenizer and train the sequence model on compact records
    TrainLm,
    /// Round-trip one image through the compressed discrete path
    Reconstruct {
        /// Input image (binary PGM or PPM, maxval 255)
        image: PathBuf,
    },
    /// Sample a sequence for a class token and decode it to an image
    Generate {
        /// Class id to condition on
        #[arg(long)]
        prompt: usize,
        /// Softmax temperature; 0 means argmax
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
    },
    /// Compare the compact configuration against the dense baseline
    Benchmark {
        /// Images generated per timed repeat
        #[arg(long, default_value_t = 2)]
        count: usize,
        /// Timed repeats (at least 5)
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Run one of the ablation sweeps
    Ablate {
        #[arg(value_enum)]
        what: AblateWhat,
    },
}

#[derive(Copy, Clone, ValueEnum)]
enum AblateWhat {
    /// keep-ratio sweep over strides 1, 2, 4, 8
    Ratio,
    /// global-token-count sweep over 0, 2, 4, 8, 16
    Ng,
    /// global token type: meta, mean_pool, cls
    GlobalType,
    /// local compressor: avg vs max pooling
    Compressor,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    let out = cli.out.clone();
    fs::create_dir_all(&out)?;

    match cli.command {
        Command::TrainTokenizer => {
            let art = stage_one_train(&cfg, &out)?;
            let first = art.curve.first().map(|p| p.total).unwrap_or(f64::NAN);
            let last = art.curve.last().map(|p| p.total).unwrap_or(f64::NAN);
            println!(
                "stage one done: {} steps, loss {first:.6} -> {last:.6}",
                art.curve.len()
            );
            println!("checkpoint: {}", art.ckpt_path.display());
        }
        Command::TrainLm => {
            let art = stage_two_train(&cfg, &out)?;
            let first = art.curve.first().map(|p| p.total).unwrap_or(f64::NAN);
            let last = art.curve.last().map(|p| p.total).unwrap_or(f64::NAN);
            println!(
                "stage two done: {} steps, loss {first:.6} -> {last:.6}",
                art.curve.len()
            );
            println!("checkpoint: {}", art.ckpt_path.display());
        }
        Command::Reconstruct { image } => {
            let entries = vtc::checkpoint::load_checkpoint(out.join(STAGE1_CKPT))
                .context("stage-one checkpoint not found; run train-tokenizer first")?;
            let mut stack = TokenizerStack::new(&cfg)?;
            stack.apply_tensors(&entries)?;
            let img = read_pnm(&image)?;
            let (seq, recon) = stack.reconstruct_discrete(&img)?;
            let stem = image
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".to_string());
            let out_img = out.join(format!(
                "{stem}_recon.{}",
                if recon.channels() == 1 { "pgm" } else { "ppm" }
            ));
            write_pnm(&out_img, &recon)?;
            let out_seq = out.join(format!("{stem}_tokens.txt"));
            fs::write(&out_seq, format!("{}\n", seq.to_text_line()))?;
            println!("mse: {:.6}", recon.mse(&img));
            println!("tokens: {}", out_seq.display());
            println!("reconstruction: {}", out_img.display());
        }
        Command::Generate {
            prompt,
            temperature,
        } => {
            if prompt >= cfg.classes {
                bail!("prompt class {prompt} outside 0..{}", cfg.classes);
            }
            let (stack, model) = load_stage_two(&cfg, &out)
                .context("stage-two checkpoint not found; run train-lm first")?;
            let (seq, img) = generate_image(&stack, &model, prompt, temperature, cfg.seed)?;
            let ext = if img.channels() == 1 { "pgm" } else { "ppm" };
            let img_path = out.join(format!("gen_class{prompt}.{ext}"));
            write_pnm(&img_path, &img)?;
            let seq_path = out.join(format!("gen_class{prompt}_tokens.txt"));
            fs::write(&seq_path, format!("{}\n", seq.to_text_line()))?;
            println!("sequence: {}", seq_path.display());
            println!("image: {}", img_path.display());
        }
        Command::Benchmark { count, repeats } => {
            let opts = SweepOptions {
                repeats,
                time_count: count,
            };
            let (compact, dense) = compare_with_dense_baseline(&cfg, &out, opts)?;
            let flop_ratio = compact.flops_generation as f64 / dense.flops_generation as f64;
            println!(
                "compact: {} ar steps, wall {:.4}s +/- {:.4}s",
                compact.ar_steps,
                compact.wall_mean_s.unwrap_or(f64::NAN),
                compact.wall_std_s.unwrap_or(f64::NAN),
            );
            println!(
                "dense:   {} ar steps, wall {:.4}s +/- {:.4}s",
                dense.ar_steps,
                dense.wall_mean_s.unwrap_or(f64::NAN),
                dense.wall_std_s.unwrap_or(f64::NAN),
            );
            println!(
                "flop model ratio (compact/dense): {:.4} ({} vs {})",
                flop_ratio,
                flops_autoregressive(compact.ar_steps, cfg.lm_width, cfg.lm_layers),
                flops_autoregressive(dense.ar_steps, cfg.lm_width, cfg.lm_layers),
            );
            println!("report: {}", out.join("benchmark.csv").display());
        }
        Command::Ablate { what } => {
            let opts = SweepOptions::default();
            let (reports, csv) = match what {
                AblateWhat::Ratio => (
                    sweep_keep_ratio(&cfg, &[1, 2, 4, 8], &out, opts)?,
                    "keep_ratio.csv",
                ),
                AblateWhat::Ng => (
                    sweep_global_tokens(&cfg, &[0, 2, 4, 8, 16], &out, opts)?,
                    "global_tokens.csv",
                ),
                AblateWhat::GlobalType => (
                    ablate_global_type(
                        &cfg,
                        &[GlobalKind::Meta, GlobalKind::MeanPool, GlobalKind::Cls],
                        &out,
                        opts,
                    )?,
                    "global_type.csv",
                ),
                AblateWhat::Compressor => (
                    ablate_compressor(
                        &cfg,
                        &[CompressorKind::Avg, CompressorKind::Max],
                        &out,
                        opts,
                    )?,
                    "compressor.csv",
                ),
            };
            for r in &reports {
                println!(
                    "{:<12} {:<12} recon_px={} probe={} wall={} status={}",
                    r.config_id,
                    r.param,
                    r.recon_pixel_mse
                        .map(|v| format!("{v:.5}"))
                        .unwrap_or_default(),
                    r.probe_acc.map(|v| format!("{v:.3}")).unwrap_or_default(),
                    r.wall_mean_s
                        .map(|v| format!("{v:.3}s"))
                        .unwrap_or_default(),
                    r.status,
                );
            }
            println!("report: {}", out.join(csv).display());
        }
    }
    Ok(())
}
