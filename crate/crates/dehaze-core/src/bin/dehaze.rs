use clap::{Parser, Subcommand};
use dehaze_core::ckpt::Checkpoint;
use dehaze_core::config::{apply_key, load_config, ModelConfig, Stage, TrainConfig};
use dehaze_core::haze;
use dehaze_core::imgio;
use dehaze_core::infer::{
    decode_with_mode, DecodeMode, DecodeOptions, SampleMode,
};
use dehaze_core::nn::DehazeModel;
use dehaze_core::train::{model_from_checkpoint, Pair, Trainer};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "dehaze",
    about = "Codebook-based single image dehazing with iterative predictor-critic decoding"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic (clean, hazy) paired dataset with a manifest.
    Synth {
        /// Output directory for pairs and manifest.json
        #[arg(long)]
        out: PathBuf,
        /// Number of pairs to synthesize
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Patch size (square)
        #[arg(long, default_value_t = 64)]
        patch: usize,
        /// Directory of clean source PNGs; generated procedurally if omitted
        #[arg(long)]
        clean_dir: Option<PathBuf>,
        /// Procedural source image count (when --clean-dir is omitted)
        #[arg(long, default_value_t = 16)]
        sources: usize,
        /// Procedural source image size
        #[arg(long, default_value_t = 96)]
        source_size: usize,
    },
    /// Train one stage: vqgan, predictor, or critic.
    Train {
        #[arg(long)]
        stage: Stage,
        /// Dataset directory containing manifest.json
        #[arg(long)]
        data: PathBuf,
        /// Where to write the final checkpoint
        #[arg(long)]
        out: PathBuf,
        /// Flat key = value config file
        #[arg(long)]
        config: Option<PathBuf>,
        /// Inline overrides, e.g. --set max_steps=100
        #[arg(long = "set")]
        sets: Vec<String>,
        /// Initialize weights from a previous stage's checkpoint
        #[arg(long)]
        init: Option<PathBuf>,
        /// Resume an interrupted run from its checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Metrics CSV path (stdout if omitted)
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 25)]
        log_every: usize,
    },
    /// Dehaze one image.
    Dehaze {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Output PNG (default: <input>.dehazed.png)
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        iters: usize,
        /// critic | confidence | nn | oneshot
        #[arg(long, default_value = "critic")]
        mode: DecodeMode,
        /// multinomial | argmax
        #[arg(long, default_value = "multinomial")]
        sample: String,
        /// Sampling temperature for multinomial mode
        #[arg(long, default_value_t = 1.0)]
        temp: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for trace JSON and per-iteration frames
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Keep codes at retained positions across iterations
        #[arg(long, default_value_t = false)]
        freeze_unmasked: bool,
    },
    /// Evaluate a checkpoint over a paired manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8)]
        iters: usize,
        #[arg(long, default_value = "critic")]
        mode: DecodeMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Code sampling: multinomial | argmax
        #[arg(long, default_value = "multinomial")]
        sample: String,
        /// Sampling temperature for multinomial mode
        #[arg(long, default_value_t = 1.0)]
        temp: f64,
        /// Keep codes at retained positions between iterations
        #[arg(long)]
        freeze_unmasked: bool,
        /// CSV output path (stdout if omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate across several iteration counts.
    SweepT {
        /// Comma-separated iteration counts
        #[arg(long, default_value = "3,4,6,8,10")]
        values: String,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "critic")]
        mode: DecodeMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Code sampling: multinomial | argmax
        #[arg(long, default_value = "multinomial")]
        sample: String,
        /// Sampling temperature for multinomial mode
        #[arg(long, default_value_t = 1.0)]
        temp: f64,
        /// Keep codes at retained positions between iterations
        #[arg(long)]
        freeze_unmasked: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Synth {
            out,
            count,
            seed,
            patch,
            clean_dir,
            sources,
            source_size,
        } => {
            let clean_dir = match clean_dir {
                Some(d) => d,
                None => {
                    let dir = out.join("clean_src");
                    haze::make_clean_images(&dir, sources, source_size, seed)?;
                    dir
                }
            };
            let manifest = haze::make_dataset(&clean_dir, count, seed, &out, patch)?;
            println!(
                "wrote {} pairs to {} (manifest.json included)",
                manifest.len(),
                out.display()
            );
        }
        Cmd::Train {
            stage,
            data,
            out,
            config,
            sets,
            init,
            resume,
            log,
            log_every,
        } => {
            let pairs = load_pairs_for_training(&data)?;
            let mut trainer = if let Some(resume) = resume {
                Trainer::from_checkpoint(&Checkpoint::load(&resume)?)?
            } else {
                let mut model_cfg = ModelConfig::toy();
                let mut train_cfg = TrainConfig::toy(stage);
                if let Some(path) = &config {
                    load_config(path, &mut model_cfg, &mut train_cfg)?;
                }
                for kv in &sets {
                    let (k, v) = kv.split_once('=').ok_or_else(|| {
                        anyhow::anyhow!("--set expects key=value, got '{kv}'")
                    })?;
                    apply_key(&mut model_cfg, &mut train_cfg, k.trim(), v.trim())?;
                }
                model_cfg.validate()?;
                train_cfg.validate()?;
                let model = DehazeModel::<f32>::new(model_cfg, train_cfg.seed)?;
                if let Some(init) = &init {
                    Checkpoint::load(init)?.restore_params(&model.all_params())?;
                }
                let trainer = Trainer::new(model, stage, train_cfg)?;
                if stage == Stage::Predictor && init.is_some() {
                    trainer.init_enc_l_from_enc_h();
                }
                trainer
            };
            let stdout = std::io::stdout();
            let mut sink: Box<dyn std::io::Write> = match &log {
                Some(p) => Box::new(std::fs::File::create(p)?),
                None => Box::new(stdout.lock()),
            };
            trainer.run(&pairs, Some(&mut sink), log_every)?;
            trainer.to_checkpoint().save(&out)?;
            println!("saved checkpoint to {}", out.display());
        }
        Cmd::Dehaze {
            input,
            ckpt,
            output,
            iters,
            mode,
            sample,
            temp,
            seed,
            trace,
            freeze_unmasked,
        } => {
            let model = model_from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            let img = imgio::load_png(&input)?;
            let opts = DecodeOptions {
                iters,
                sample: parse_sample(&sample)?,
                temperature: temp,
                freeze_unmasked,
                trace_images: trace.is_some(),
                ..DecodeOptions::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (out_img, tr) = decode_with_mode(&img, &model, mode, &opts, &mut rng)?;
            let out_path = output.unwrap_or_else(|| input.with_extension("dehazed.png"));
            imgio::save_png(&out_path, &out_img)?;
            if let Some(dir) = trace {
                std::fs::create_dir_all(&dir)?;
                tr.save_json(&dir.join("trace.json"))?;
                tr.save_frames(&dir)?;
            }
            println!("wrote {}", out_path.display());
        }
        Cmd::Eval {
            manifest,
            ckpt,
            iters,
            mode,
            seed,
            sample,
            temp,
            freeze_unmasked,
            out,
        } => {
            let model = model_from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            let pairs = load_pairs_for_eval(&manifest)?;
            let opts = DecodeOptions {
                iters,
                sample: parse_sample(&sample)?,
                temperature: temp,
                freeze_unmasked,
                ..DecodeOptions::default()
            };
            let report = dehaze_core::infer::evaluate_pairs(&model, &pairs, mode, &opts, seed)?;
            let csv = report.to_csv();
            match out {
                Some(p) => std::fs::write(&p, &csv)?,
                None => print!("{csv}"),
            }
            eprintln!(
                "mean psnr {:.3} dB, ssim {:.4}, code accuracy {:.4}",
                report.mean_psnr(),
                report.mean_ssim(),
                report.mean_code_accuracy()
            );
        }
        Cmd::SweepT {
            values,
            manifest,
            ckpt,
            mode,
            seed,
            sample,
            temp,
            freeze_unmasked,
            out,
        } => {
            let model = model_from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            let pairs = load_pairs_for_eval(&manifest)?;
            let mut csv = String::from("T,psnr,ssim,code_accuracy\n");
            for tok in values.split(',') {
                let t: usize = tok.trim().parse()?;
                let opts = DecodeOptions {
                    iters: t,
                    sample: parse_sample(&sample)?,
                    temperature: temp,
                    freeze_unmasked,
                    ..DecodeOptions::default()
                };
                let report =
                    dehaze_core::infer::evaluate_pairs(&model, &pairs, mode, &opts, seed)?;
                csv.push_str(&format!(
                    "{},{:.6},{:.6},{:.6}\n",
                    t,
                    report.mean_psnr(),
                    report.mean_ssim(),
                    report.mean_code_accuracy()
                ));
            }
            match out {
                Some(p) => std::fs::write(&p, &csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn parse_sample(s: &str) -> anyhow::Result<SampleMode> {
    match s {
        "multinomial" => Ok(SampleMode::Multinomial),
        "argmax" => Ok(SampleMode::Argmax),
        other => anyhow::bail!("unknown sample mode '{other}'"),
    }
}

fn load_pairs_for_training(data_dir: &Path) -> anyhow::Result<Vec<Pair>> {
    let manifest = haze::load_manifest(&data_dir.join("manifest.json"))?;
    let mut pairs = Vec::with_capacity(manifest.len());
    for entry in &manifest {
        pairs.push((
            imgio::load_png(&entry.clean_path)?,
            imgio::load_png(&entry.hazy_path)?,
        ));
    }
    Ok(pairs)
}

fn load_pairs_for_eval(
    manifest_path: &Path,
) -> anyhow::Result<Vec<(String, Array3<f32>, Array3<f32>)>> {
    let manifest = haze::load_manifest(manifest_path)?;
    let mut pairs = Vec::with_capacity(manifest.len());
    for entry in &manifest {
        let name = entry
            .clean_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        pairs.push((
            name,
            imgio::load_png(&entry.clean_path)?,
            imgio::load_png(&entry.hazy_path)?,
        ));
    }
    Ok(pairs)
}
