//! `stat` command-line pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stat_core::allocation::{apply_policy, DropMask, InferencePolicy};
use stat_core::ar::{
    make_sequence_at, mean_cross_entropy, train_ar, write_ar_log, write_token_dump, ArModel,
    TokenizedSet,
};
use stat_core::checkpoint::Checkpoint;
use stat_core::config::RunConfig;
use stat_core::dataset::{load_ppm_dir, Dataset, Sample};
use stat_core::eval::{
    evaluate_samples, run_variant, summarize, write_comparison_csv, write_profiles_csv,
    write_samples_csv, Variant,
};
use stat_core::io::write_csv_atomic;
use stat_core::losses::Stage;
use stat_core::model::Tokenizer;
use stat_core::trainer::{load_tokenizer, Trainer, TrainingLog};
use stat_core::{Result, StatError};

#[derive(Parser)]
#[command(
    name = "stat",
    version,
    about = "Adaptive-length 1D image tokenizer pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus as PPM files plus manifest.csv.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `train` or `eval` (the held-out range).
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Stage 1: hard tail dropping.
    TrainStage1 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Continue from the periodic checkpoint at --out.
        #[arg(long)]
        resume: bool,
    },
    /// Stage 2: soft tail dropping from a stage-1 checkpoint.
    TrainStage2 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        resume: bool,
    },
    /// Train the class-conditional generator on tokenizer outputs.
    TrainAr {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-image codes, kept count, T and keep profile as CSV.
    Tokenize {
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value = "threshold:0.5")]
        policy: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode, truncate by policy, decode, write PPMs.
    Reconstruct {
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value = "threshold:0.5")]
        policy: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample code sequences and decode them to images.
    Generate {
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        ar: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 1.5)]
        guidance: f64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruction and token-complexity report as JSON.
    Eval {
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value = "threshold:0.5")]
        policy: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-image table.
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Also write the stat / fixcount / harddrop comparison table.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Keep-probability profiles as CSV.
    ExportProfiles {
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid usage");
            eprintln!(
                "error: kind=usage message={}",
                first.trim_start_matches("error: ")
            );
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = init_threads().and_then(|_| run(cli.command)) {
        let (code, kind) = classify(&e);
        let msg = e.to_string().replace('\n', " ");
        eprintln!("error: kind={kind} message={msg}");
        return ExitCode::from(code);
    }
    ExitCode::SUCCESS
}

fn classify(e: &StatError) -> (u8, &'static str) {
    match e {
        StatError::Config(_) | StatError::InvalidArgument(_) | StatError::Json(_) => (2, "config"),
        _ => (3, "runtime"),
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("STAT_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        StatError::Config(format!(
            "STAT_THREADS must be a positive integer, got `{v}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| StatError::Config(format!("STAT_THREADS: {e}")))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, out, split } => {
            let cfg = RunConfig::load(&config)?;
            let data = match split.as_str() {
                "train" => cfg.train_set()?,
                "eval" => cfg.eval_set()?,
                other => {
                    return Err(StatError::InvalidArgument(format!(
                        "--split must be train or eval, got `{other}`"
                    )))
                }
            };
            data.write_dir(&out)?;
            log::info!("wrote {} images to {}", data.len(), out.display());
            Ok(())
        }
        Command::TrainStage1 {
            config,
            out,
            seed,
            resume,
        } => {
            let cfg = RunConfig::load(&config)?;
            let trainer = if resume {
                Trainer::resume(
                    &Checkpoint::load(&out)?,
                    cfg.trainer.clone(),
                    cfg.losses.clone(),
                )?
            } else {
                Trainer::stage1(
                    cfg.tokenizer.clone(),
                    cfg.trainer.clone(),
                    cfg.losses.clone(),
                    seed,
                )?
            };
            train(trainer, &cfg, &out, resume, Stage::One)
        }
        Command::TrainStage2 {
            config,
            init,
            out,
            seed,
            resume,
        } => {
            let cfg = RunConfig::load(&config)?;
            let trainer = if resume {
                Trainer::resume(
                    &Checkpoint::load(&out)?,
                    cfg.trainer.clone(),
                    cfg.losses.clone(),
                )?
            } else {
                let model = load_tokenizer(&Checkpoint::load(&init)?)?;
                if model.config != cfg.tokenizer {
                    return Err(StatError::Config(format!(
                        "tokenizer section does not match the architecture stored in {}",
                        init.display()
                    )));
                }
                Trainer::stage2(model, cfg.trainer.clone(), cfg.losses.clone(), seed)?
            };
            train(trainer, &cfg, &out, resume, Stage::Two)
        }
        Command::TrainAr {
            config,
            tokenizer,
            out,
            seed,
        } => {
            let cfg = RunConfig::load(&config)?;
            let tok = load_tokenizer(&Checkpoint::load(&tokenizer)?)?;
            let mut data = cfg.train_set()?;
            if let Some(cs) = &cfg.data.ar_classes {
                data = data.filter_classes(cs);
            }
            let set = TokenizedSet::from_dataset(&tok, &data, cfg.eval.batch_size)?;
            let (model, log) = train_ar(
                cfg.ar.clone(),
                &set,
                tok.config.codebook_size,
                cfg.data.num_classes,
                seed,
            )?;
            let seqs: Vec<_> = (0..set.len())
                .map(|i| make_sequence_at(set.labels[i], set.codes_row(i), set.p_row(i), 0.5))
                .collect();
            log::info!(
                "AR cross-entropy at tau=0.5: {:.4} nats",
                mean_cross_entropy(&model, &seqs)?
            );
            write_ar_log(&log, &sidecar(&out, "log.csv"))?;
            model.to_checkpoint()?.save(&out)
        }
        Command::Tokenize {
            tokenizer,
            images,
            policy,
            out,
        } => {
            let tok = load_tokenizer(&Checkpoint::load(&tokenizer)?)?;
            let policy = parse_policy(&policy, &tok)?;
            let data = load_images(&images, &tok)?;
            let l = tok.config.latent_len;
            let mut rows = Vec::with_capacity(data.len());
            for (chunk, b) in data.samples.chunks(64).zip(data.sequential_batches(64)) {
                let a = tok.analyze(&b.pixels)?;
                let mask = apply_policy(&a.p, a.batch, l, policy);
                for (j, s) in chunk.iter().enumerate() {
                    let mut rec = vec![
                        s.id.to_string(),
                        s.label.to_string(),
                        mask.kept(j).to_string(),
                        a.expected_tokens(j).to_string(),
                    ];
                    rec.extend(a.codes_row(j).iter().zip(mask.row(j)).map(|(&c, &m)| {
                        if m == 1 {
                            c.to_string()
                        } else {
                            "-1".into()
                        }
                    }));
                    rec.extend(a.p_row(j).iter().map(|v| v.to_string()));
                    rows.push(rec);
                }
            }
            write_csv_atomic(&out, |w| {
                let mut header: Vec<String> = ["id", "label", "k", "T"].map(String::from).to_vec();
                header.extend((0..l).map(|i| format!("code_{i}")));
                header.extend((0..l).map(|i| format!("p_{i}")));
                w.write_record(&header)?;
                for r in &rows {
                    w.write_record(r)?;
                }
                Ok(())
            })
        }
        Command::Reconstruct {
            tokenizer,
            images,
            policy,
            out,
        } => {
            let tok = load_tokenizer(&Checkpoint::load(&tokenizer)?)?;
            let policy = parse_policy(&policy, &tok)?;
            let data = load_images(&images, &tok)?;
            let n = data.samples.first().map_or(0, |s| s.pixels.len());
            let mut samples = Vec::with_capacity(data.len());
            for (chunk, b) in data.samples.chunks(64).zip(data.sequential_batches(64)) {
                let (x_hat, _, _) = tok.reconstruct(&b.pixels, policy)?;
                for (j, s) in chunk.iter().enumerate() {
                    samples.push(Sample {
                        pixels: x_hat.data()[j * n..(j + 1) * n].to_vec(),
                        ..s.clone()
                    });
                }
            }
            Dataset { samples, ..data }.write_dir(&out)
        }
        Command::Generate {
            tokenizer,
            ar,
            class,
            n,
            guidance,
            temperature,
            seed,
            out,
        } => {
            let tok = load_tokenizer(&Checkpoint::load(&tokenizer)?)?;
            let model = ArModel::from_checkpoint(&Checkpoint::load(&ar)?, Default::default())?;
            if model.codebook_size != tok.config.codebook_size
                || model.latent_len != tok.config.latent_len
            {
                return Err(StatError::Config(format!(
                    "AR model ({} codes, L={}) does not match the tokenizer ({} codes, L={})",
                    model.codebook_size,
                    model.latent_len,
                    tok.config.codebook_size,
                    tok.config.latent_len
                )));
            }
            let seqs = model.sample_many(class, n, temperature, guidance, seed)?;
            let l = tok.config.latent_len;
            let mut codes = Vec::with_capacity(n * l);
            let mut ks = Vec::with_capacity(n);
            for s in &seqs {
                codes.extend(s.codes.iter().copied().chain(std::iter::repeat(0)).take(l));
                ks.push(s.eos_pos());
            }
            let size = tok.config.image_size;
            let per = 3 * size * size;
            let mut samples = Vec::with_capacity(n);
            for start in (0..n).step_by(64) {
                let end = (start + 64).min(n);
                let mask = DropMask::prefixes(l, &ks[start..end]);
                let img = tok.decode_codes(&codes[start * l..end * l], &mask)?;
                for j in 0..end - start {
                    samples.push(Sample {
                        id: (start + j) as u64,
                        label: class,
                        detail_level: None,
                        pixels: img.data()[j * per..(j + 1) * per].to_vec(),
                    });
                }
            }
            let data = Dataset {
                height: size,
                width: size,
                samples,
            };
            data.write_dir(&out)?;
            write_token_dump(&seqs, &out.join("tokens.csv"))
        }
        Command::Eval {
            tokenizer,
            images,
            policy,
            out,
            samples,
            compare,
        } => {
            let tok = load_tokenizer(&Checkpoint::load(&tokenizer)?)?;
            let policy = parse_policy(&policy, &tok)?;
            let data = load_images(&images, &tok)?;
            let per = evaluate_samples(&tok, &data, policy, 64)?;
            let report = summarize(&per, tok.config.latent_len, policy)?;
            report.write_json(&out)?;
            if let Some(p) = samples {
                write_samples_csv(&per, &p)?;
            }
            if let Some(p) = compare {
                let mut rows = vec![("stat".to_string(), report)];
                for v in [Variant::FixCount, Variant::HardDrop] {
                    rows.push((v.name().to_string(), run_variant(&tok, &data, v)?));
                }
                write_comparison_csv(&rows, &p)?;
            }
            Ok(())
        }
        Command::ExportProfiles {
            tokenizer,
            images,
            out,
        } => {
            let tok = load_tokenizer(&Checkpoint::load(&tokenizer)?)?;
            let data = load_images(&images, &tok)?;
            let mut p = Vec::with_capacity(data.len() * tok.config.latent_len);
            for b in data.sequential_batches(64) {
                p.extend(tok.analyze(&b.pixels)?.p);
            }
            let ids: Vec<u64> = data.samples.iter().map(|s| s.id).collect();
            write_profiles_csv(&ids, &p, tok.config.latent_len, &out)
        }
    }
}

/// Runs a trainer to the end of its stage, saving checkpoint and log every
/// `checkpoint_every` steps and at the end.
fn train(
    mut trainer: Trainer,
    cfg: &RunConfig,
    out: &Path,
    resume: bool,
    stage: Stage,
) -> Result<()> {
    if trainer.stage != stage {
        return Err(StatError::Config(format!(
            "{} holds a stage {:?} run",
            out.display(),
            trainer.stage
        )));
    }
    let log_path = sidecar(out, "log.csv");
    let mut log = if resume && log_path.exists() {
        let mut l = TrainingLog::read_csv(&log_path)?;
        l.rows.retain(|r| r.step < trainer.step);
        l
    } else {
        TrainingLog::default()
    };
    let data = cfg.train_set()?;
    let total = trainer.total_steps();
    let every = match cfg.trainer.checkpoint_every {
        0 => total,
        n => n,
    };
    loop {
        let until = ((trainer.step / every + 1) * every).min(total);
        trainer.run_until(&data, until, &mut log, None)?;
        trainer.to_checkpoint()?.save(out)?;
        log.write_csv(&log_path)?;
        if trainer.step >= total {
            break;
        }
    }
    if !log.skipped.is_empty() {
        log::warn!(
            "{} steps skipped for non-finite gradients",
            log.skipped.len()
        );
    }
    Ok(())
}

/// `model.stk` -> `model.<suffix>` next to it.
fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    out.with_extension(suffix)
}

fn parse_policy(s: &str, tok: &Tokenizer) -> Result<InferencePolicy> {
    let p: InferencePolicy = s.parse()?;
    p.validate(tok.config.latent_len)?;
    Ok(p)
}

fn load_images(dir: &Path, tok: &Tokenizer) -> Result<Dataset> {
    let data = load_ppm_dir(dir)?;
    let s = tok.config.image_size;
    if data.height != s || data.width != s {
        return Err(StatError::Geometry(format!(
            "images in {} are {}x{}, the tokenizer expects {s}x{s}",
            dir.display(),
            data.width,
            data.height
        )));
    }
    Ok(data)
}
