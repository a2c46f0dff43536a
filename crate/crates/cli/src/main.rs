use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hymunet::bench::{ablate, bench_scan, Variant};
use hymunet::config::RunConfig;
use hymunet::data::{
    generate_synthetic, load_rgb, read_dataset, resize_bilinear, save_gray, save_mask, split, write_dataset,
    ArtifactLevel, Sample, Split,
};
use hymunet::mask::Mask;
use hymunet::model::{model_grad_check, ModelState};
use hymunet::tensor::GradCheckOptions;
use hymunet::train::{evaluate, train};
use hymunet::{Error, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "hymunet", version, about = "Hybrid CNN / selective-scan lesion segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `section.key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic lesion dataset with a train/val/test manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        /// none | normal | heavy
        #[arg(long)]
        artifacts: Option<ArtifactLevel>,
        #[command(flatten)]
        common: Common,
    },
    /// Train on a dataset directory; writes best.ckpt, last.ckpt, train_log.txt, timing.txt and config.txt.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on one split of a dataset directory.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train | val | test
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Also write `key = value` metrics here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict masks for image files; writes `<stem>_prob.png` and `<stem>_mask.png`.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Finite-difference check of the full model on one random input.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Entries sampled per parameter tensor.
        #[arg(long, default_value_t = 2)]
        entries: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Time the selective scan against naive attention over sequence lengths.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[arg(long, default_value_t = 8)]
        state: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the tab-separated records here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and test each model variant over several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "full,concat,cnn,mamba")]
        variants: Vec<Variant>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

const CALIBRATION_BATCHES: usize = 30;

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn splits(data: &Path) -> Result<[Vec<Sample>; 3]> {
    let mut parts = read_dataset(data)?;
    Ok([Split::Train, Split::Val, Split::Test].map(|s| parts.remove(&s).unwrap_or_default()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            seed,
            count,
            size,
            artifacts,
            common,
        } => {
            let mut cfg = run_config(&common)?.data;
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.count = count.unwrap_or(cfg.count);
            cfg.size = size.unwrap_or(cfg.size);
            cfg.artifacts = artifacts.unwrap_or(cfg.artifacts);
            let samples = generate_synthetic(cfg.seed, cfg.count, cfg.size, cfg.artifacts)?;
            let [tr, va, te] = split(&samples, &cfg.split)?;
            write_dataset(&out, &[(Split::Train, &tr), (Split::Val, &va), (Split::Test, &te)])?;
            println!(
                "wrote {} samples ({} train / {} val / {} test) to {}",
                samples.len(),
                tr.len(),
                va.len(),
                te.len(),
                out.display()
            );
        }
        Command::Train {
            data,
            out,
            epochs,
            seed,
            common,
        } => {
            let mut cfg = run_config(&common)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let [tr, va, _] = splits(&data)?;
            if let Some(s) = tr.first() {
                cfg.model.input_size = s.height();
            }
            create_dir(&out)?;
            write(&out.join("config.txt"), &cfg.to_text())?;
            let init = ModelState::init(cfg.model.clone(), cfg.train.seed)?;
            println!("{} parameters, {} train / {} val", init.count_params(), tr.len(), va.len());
            let outcome = train(&init, &tr, &va, &cfg.train, |r| println!("{}", r.to_line(true)))?;
            write(&out.join("train_log.txt"), &outcome.log.to_text(false))?;
            let timing: String = outcome
                .log
                .epochs
                .iter()
                .map(|r| format!("epoch={} wall_s={:.3}\n", r.epoch, r.wall_secs))
                .collect();
            write(&out.join("timing.txt"), &timing)?;
            outcome.best.save(&out.join("best.ckpt"))?;
            outcome.last.save(&out.join("last.ckpt"))?;
            if let Some(e) = outcome.best_epoch {
                println!("best validation DSC at epoch {e}");
            }
            if let Some(why) = outcome.halted {
                return Err(Error::Training(why));
            }
        }
        Command::Eval {
            data,
            checkpoint,
            split,
            threshold,
            out,
        } => {
            let state = ModelState::load(&checkpoint)?;
            let mut parts = read_dataset(&data)?;
            let samples = parts.remove(&split).unwrap_or_default();
            let report = evaluate(&state, &samples, threshold)?;
            print!("{}", report.to_table());
            if let Some(p) = out {
                write(&p, &report.to_key_values())?;
            }
        }
        Command::Predict {
            checkpoint,
            input,
            out,
            threshold,
        } => {
            let state = ModelState::load(&checkpoint)?;
            let size = state.config.input_size;
            create_dir(&out)?;
            for path in &input {
                let img = load_rgb(path)?;
                let (h, w) = (img.shape()[1], img.shape()[2]);
                let x = Tensor::new(vec![1, 3, size, size], resize_bilinear(img.data(), 3, (h, w), (size, size)))?;
                let probs = state.predict(&x)?;
                let probs = resize_bilinear(probs.data(), 1, (size, size), (h, w));
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                save_gray(&out.join(format!("{stem}_prob.png")), &probs, h, w)?;
                save_mask(&out.join(format!("{stem}_mask.png")), &Mask::binarize(&probs, h, w, threshold)?)?;
                println!("{}", path.display());
            }
        }
        Command::Gradcheck {
            seed,
            size,
            entries,
            tolerance,
            common,
        } => {
            let mut cfg = run_config(&common)?.model;
            cfg.input_size = size;
            let mut state = ModelState::init(cfg, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = state.config.in_channels;
            // Eval mode with running statistics taken from random batches:
            // a single 32x32 image in training mode normalizes 1x1 maps to
            // exactly beta and parks the following ReLUs on their kink.
            let batches: Vec<Tensor> = (0..CALIBRATION_BATCHES)
                .map(|_| Tensor::rand_uniform(&[4, c, size, size], 0.0, 1.0, &mut rng))
                .collect();
            state.calibrate_norms(&batches)?;
            state.training = false;
            let x = Tensor::rand_uniform(&[1, c, size, size], 0.0, 1.0, &mut rng);
            let opts = GradCheckOptions {
                max_entries_per_input: Some(entries),
                seed,
                ..Default::default()
            };
            let report = model_grad_check(&state, &x, &opts)?;
            println!(
                "checked {} entries, max relative error {:.3e} (kink retries {})",
                report.checked, report.max_rel_error, report.kink_retries
            );
            if !(report.max_rel_error < tolerance) {
                return Err(Error::Training(format!(
                    "gradient check failed: {:.3e} >= {tolerance:e}",
                    report.max_rel_error
                )));
            }
        }
        Command::Bench {
            lengths,
            reps,
            channels,
            state,
            seed,
            out,
        } => {
            let report = bench_scan(&lengths, reps, channels, state, seed)?;
            let text = report.to_text();
            print!("{text}");
            if let Some(p) = out {
                write(&p, &text)?;
            }
        }
        Command::Ablate {
            data,
            variants,
            seeds,
            epochs,
            common,
        } => {
            let mut cfg = run_config(&common)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let [tr, va, te] = splits(&data)?;
            if let Some(s) = tr.first() {
                cfg.model.input_size = s.height();
            }
            let report = ablate(&cfg.model, &cfg.train, &variants, &seeds, [&tr, &va, &te], |v, s, r| {
                println!("{} seed {s}: test DSC {:.4}", v.name(), r.dsc().mean);
            })?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
