//! Command-line surface for the masked Bernoulli latent diffusion pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. Every stochastic
//! subcommand requires --seed and prints it.

use anyhow::{anyhow, bail, Context};
use bitdiff::anomaly::{masked_inference, AnomalyResult};
use bitdiff::codec::{binarize, AeTrainer, Codec, LearnedCodec};
use bitdiff::config::{CodecKind, RunConfig};
use bitdiff::datagen;
use bitdiff::denoiser::ConvDenoiser;
use bitdiff::diffusion::generate;
use bitdiff::eval::{dice, grid_search, psnr, GridSearchResult, LabeledImage};
use bitdiff::io;
use bitdiff::rng::{derive_seed, RngStream};
use bitdiff::schedule::NoiseSchedule;
use bitdiff::tensor::{BitTensor, Dims, Image};
use bitdiff::training::DiffusionTrainer;
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const SPLIT_TRAIN: u64 = 1;
const SPLIT_TEST_HEALTHY: u64 = 2;
const SPLIT_TEST_ANOMALOUS: u64 = 3;
const LABEL_ENCODE: u64 = 0x656e63;
const LABEL_INIT: u64 = 0x696e69;

#[derive(Parser)]
#[command(name = "bitdiff", version, about = "Masked Bernoulli latent diffusion anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset (train/test splits plus masks).
    Datagen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        n_train: usize,
        #[arg(long, default_value_t = 16)]
        n_test_healthy: usize,
        #[arg(long, default_value_t = 16)]
        n_test_anomalous: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Train the learned binarizing autoencoder.
    TrainAe {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: u64,
    },
    /// Train the latent diffusion denoiser on encoded healthy images.
    TrainDiffusion {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        /// Learned codec checkpoint (required when codec.kind = learned).
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: u64,
    },
    /// Draw unconditional samples from a trained model and decode them.
    Sample {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Latent height/width (defaults to the config image size / rate).
        #[arg(long)]
        latent_size: Option<usize>,
        #[arg(long)]
        seed: u64,
    },
    /// Masked inference on one image: reconstruction, anomaly map, mask,
    /// segmentation, metrics row.
    Detect {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        codec: Option<PathBuf>,
        /// Ground-truth mask for a Dice column.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        noise_level: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        seed: u64,
    },
    /// Evaluate a labeled test split at the configured (P, L).
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        noise_level: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Record wall time per image instead of zeros.
        #[arg(long)]
        timing: bool,
        #[arg(long)]
        seed: u64,
    },
    /// Grid search over P and L lists; writes per-image and per-cell CSVs.
    Gridsearch {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        codec: Option<PathBuf>,
        /// Comma-separated thresholds, e.g. 0.3,0.5,0.7.
        #[arg(long = "P", value_name = "LIST")]
        p_list: String,
        /// Comma-separated noise levels, e.g. 100,200,300.
        #[arg(long = "L", value_name = "LIST")]
        l_list: String,
        #[arg(long)]
        timing: bool,
        #[arg(long)]
        seed: u64,
    },
    /// Dump the noise schedule tables as CSV.
    ScheduleDump {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            if matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{err}");
                return ExitCode::SUCCESS;
            }
            eprint!("{err}");
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: Option<&PathBuf>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn build_codec(cfg: &RunConfig, codec_path: Option<&Path>) -> anyhow::Result<Codec> {
    match cfg.codec_kind {
        CodecKind::Bitplane => Ok(cfg.build_bitplane_codec()?),
        CodecKind::Learned => {
            let path = codec_path
                .map(Path::to_path_buf)
                .or_else(|| (!cfg.codec_path.is_empty()).then(|| PathBuf::from(&cfg.codec_path)))
                .ok_or_else(|| anyhow!("codec.kind = learned needs --codec or paths.codec"))?;
            let ck = io::load_codec_checkpoint(&path)?;
            Ok(Codec::Learned(LearnedCodec::from_params(ck.arch, ck.params)?))
        }
    }
}

fn load_model(
    cfg: &RunConfig,
    model_path: Option<&Path>,
) -> anyhow::Result<(ConvDenoiser, NoiseSchedule)> {
    let path = model_path
        .map(Path::to_path_buf)
        .or_else(|| (!cfg.model_path.is_empty()).then(|| PathBuf::from(&cfg.model_path)))
        .ok_or_else(|| anyhow!("a trained model is required: pass --model or set paths.model"))?;
    let ck = io::load_diffusion_checkpoint(&path)?;
    let denoiser = ConvDenoiser::from_params(ck.arch, ck.params)?;
    Ok((denoiser, ck.schedule))
}

fn read_bdt_images(dir: &Path) -> anyhow::Result<Vec<(String, Image)>> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "bdt"))
        .collect();
    names.sort();
    let mut out = Vec::new();
    for path in names {
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
        if stem.starts_with("mask_") {
            continue;
        }
        let img = io::read_image(&path).with_context(|| format!("reading {}", path.display()))?;
        out.push((stem, img));
    }
    if out.is_empty() {
        bail!("no .bdt images found in {}", dir.display());
    }
    Ok(out)
}

fn train_split_dir(data: &Path) -> PathBuf {
    let train = data.join("train");
    if train.is_dir() {
        train
    } else {
        data.to_path_buf()
    }
}

fn test_split_dir(data: &Path) -> PathBuf {
    let test = data.join("test");
    if test.is_dir() {
        test
    } else {
        data.to_path_buf()
    }
}

fn load_labeled_dataset(data: &Path) -> anyhow::Result<Vec<LabeledImage>> {
    let dir = test_split_dir(data);
    let images = read_bdt_images(&dir)?;
    let mut out = Vec::with_capacity(images.len());
    for (id, image) in images {
        let truth = if let Some(num) = id.strip_prefix("anomalous_") {
            let mask_path = dir.join(format!("mask_{num}.bdt"));
            io::read_bit_tensor(&mask_path)
                .with_context(|| format!("reading {}", mask_path.display()))?
        } else {
            BitTensor::zeros(Dims::new(1, image.dims().h, image.dims().w))
        };
        out.push(LabeledImage { id, image, truth });
    }
    Ok(out)
}

fn write_loss_csv(path: &Path, history: &[f64]) -> anyhow::Result<()> {
    let mut csv = String::from("iteration,loss\n");
    for (i, loss) in history.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i + 1, loss));
    }
    io::atomic_write(path, csv.as_bytes())?;
    Ok(())
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> anyhow::Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| anyhow!("cannot parse {what} entry '{s}'")))
        .collect()
}

fn write_detect_outputs(
    out: &Path,
    id: &str,
    result: &AnomalyResult,
    dice_col: Option<f64>,
    psnr_val: f64,
) -> anyhow::Result<()> {
    fs::create_dir_all(out)?;
    io::write_image(&out.join("reconstruction.bdt"), &result.reconstruction)?;
    io::write_image_pgms(out, "reconstruction", &result.reconstruction)?;
    io::write_scalar_map(&out.join("anomaly_map.bdt"), &result.anomaly_map)?;
    let display = result.anomaly_map.normalized();
    io::write_pgm(&out.join("anomaly_map.pgm"), display.height(), display.width(), display.data())?;
    io::write_bit_tensor(&out.join("segmentation.bdt"), &result.segmentation)?;
    let seg_plane: Vec<f64> = result.segmentation.data().iter().map(|&b| f64::from(b)).collect();
    io::write_pgm(
        &out.join("segmentation.pgm"),
        result.segmentation.dims().h,
        result.segmentation.dims().w,
        &seg_plane,
    )?;
    io::write_bit_tensor(&out.join("mask.bdt"), &result.mask)?;
    let mdims = result.mask.dims();
    for c in 0..mdims.c {
        let plane: Vec<f64> = result.mask.data()[c * mdims.h * mdims.w..(c + 1) * mdims.h * mdims.w]
            .iter()
            .map(|&b| f64::from(b))
            .collect();
        io::write_pgm(&out.join(format!("mask_c{c}.pgm")), mdims.h, mdims.w, &plane)?;
    }
    let dice_str = dice_col.map(|d| d.to_string()).unwrap_or_default();
    let csv = format!(
        "image_id,mask_fraction,dice,psnr\n{},{},{},{}\n",
        id, result.mask_fraction, dice_str, psnr_val
    );
    io::atomic_write(&out.join("metrics.csv"), csv.as_bytes())?;
    Ok(())
}

fn write_grid_outputs(out: &Path, result: &GridSearchResult) -> anyhow::Result<()> {
    fs::create_dir_all(out)?;
    io::atomic_write(&out.join("per_image.csv"), result.rows_csv().as_bytes())?;
    io::atomic_write(&out.join("cells.csv"), result.cells_csv().as_bytes())?;
    Ok(())
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Datagen { config, out, n_train, n_test_healthy, n_test_anomalous, seed } => {
            println!("seed: {seed}");
            let cfg = load_config(config.as_ref())?;
            let spec = cfg.phantom_spec();
            let train_dir = out.join("train");
            let test_dir = out.join("test");
            fs::create_dir_all(&train_dir)?;
            fs::create_dir_all(&test_dir)?;

            let train = datagen::generate_healthy(&spec, n_train, derive_seed(seed, SPLIT_TRAIN))?;
            for (i, img) in train.iter().enumerate() {
                io::write_image(&train_dir.join(format!("healthy_{i:03}.bdt")), img)?;
                io::write_image_pgms(&train_dir, &format!("healthy_{i:03}"), img)?;
            }
            let healthy = datagen::generate_healthy(
                &spec,
                n_test_healthy,
                derive_seed(seed, SPLIT_TEST_HEALTHY),
            )?;
            for (i, img) in healthy.iter().enumerate() {
                io::write_image(&test_dir.join(format!("healthy_{i:03}.bdt")), img)?;
                io::write_image_pgms(&test_dir, &format!("healthy_{i:03}"), img)?;
            }
            let anomalous = datagen::generate_anomalous(
                &spec,
                n_test_anomalous,
                derive_seed(seed, SPLIT_TEST_ANOMALOUS),
            )?;
            for (i, (img, mask)) in anomalous.iter().enumerate() {
                io::write_image(&test_dir.join(format!("anomalous_{i:03}.bdt")), img)?;
                io::write_image_pgms(&test_dir, &format!("anomalous_{i:03}"), img)?;
                io::write_bit_tensor(&test_dir.join(format!("mask_{i:03}.bdt")), mask)?;
            }
            println!(
                "wrote {} train, {} healthy test, {} anomalous test images to {}",
                n_train,
                n_test_healthy,
                n_test_anomalous,
                out.display()
            );
            Ok(())
        }

        Command::TrainAe { config, data, out, loss_csv, iterations, seed } => {
            println!("seed: {seed}");
            let mut cfg = load_config(config.as_ref())?;
            if let Some(it) = iterations {
                cfg.iterations = it;
            }
            let images: Vec<Image> =
                read_bdt_images(&train_split_dir(&data))?.into_iter().map(|(_, x)| x).collect();
            let arch = cfg.learned_arch();
            let mut init_rng = RngStream::with_stream(seed, LABEL_INIT);
            let mut codec = LearnedCodec::init(arch, &mut init_rng)?;
            let train_cfg = cfg.train_config(seed);
            let mut trainer = AeTrainer::new(train_cfg, codec.params().len())?;
            let mut history = Vec::new();
            let mut remaining = cfg.iterations;
            let chunk =
                if cfg.checkpoint_every == 0 { cfg.iterations } else { cfg.checkpoint_every };
            while remaining > 0 {
                let step = chunk.min(remaining);
                history.extend(trainer.run(&images, &mut codec, step)?);
                remaining -= step;
                io::save_codec_checkpoint(
                    &out,
                    &io::CodecCheckpoint {
                        arch,
                        params: codec.params().to_vec(),
                        iteration: trainer.iteration() as u64,
                        seed,
                    },
                )?;
            }
            if let Some(csv) = loss_csv {
                write_loss_csv(&csv, &history)?;
            }
            println!(
                "trained autoencoder for {} iterations, final loss {}",
                history.len(),
                history.last().copied().unwrap_or(f64::NAN)
            );
            Ok(())
        }

        Command::TrainDiffusion { config, data, out, loss_csv, codec, iterations, seed } => {
            println!("seed: {seed}");
            let mut cfg = load_config(config.as_ref())?;
            if let Some(it) = iterations {
                cfg.iterations = it;
            }
            let codec = build_codec(&cfg, codec.as_deref())?;
            let images = read_bdt_images(&train_split_dir(&data))?;
            let encode_root = RngStream::with_stream(seed, LABEL_ENCODE);
            let mut latents = Vec::with_capacity(images.len());
            for (i, (_, img)) in images.iter().enumerate() {
                let y = codec.encode(img)?;
                let mut rng = encode_root.derive(i as u64);
                latents.push(binarize(&y, cfg.binarize_mode, &mut rng));
            }
            let schedule = cfg.build_schedule()?;
            let arch = cfg.denoiser_arch(latents[0].dims().c);
            let mut init_rng = RngStream::with_stream(seed, LABEL_INIT);
            let mut denoiser = ConvDenoiser::init(arch, &mut init_rng)?;
            let train_cfg = cfg.train_config(seed);
            let mut trainer = DiffusionTrainer::new(train_cfg, denoiser.params().len())?;
            let mut history = Vec::new();
            let mut remaining = cfg.iterations;
            let chunk =
                if cfg.checkpoint_every == 0 { cfg.iterations } else { cfg.checkpoint_every };
            while remaining > 0 {
                let step = chunk.min(remaining);
                history.extend(trainer.run(&latents, &mut denoiser, &schedule, step)?);
                remaining -= step;
                io::save_diffusion_checkpoint(
                    &out,
                    &io::DiffusionCheckpoint {
                        schedule: schedule.clone(),
                        arch,
                        params: denoiser.params().to_vec(),
                        iteration: trainer.iteration() as u64,
                        seed,
                    },
                )?;
            }
            if let Some(csv) = loss_csv {
                write_loss_csv(&csv, &history)?;
            }
            println!(
                "trained denoiser for {} iterations on {} latents, final loss {}",
                history.len(),
                latents.len(),
                history.last().copied().unwrap_or(f64::NAN)
            );
            Ok(())
        }

        Command::Sample { config, model, codec, out, count, latent_size, seed } => {
            println!("seed: {seed}");
            let cfg = load_config(config.as_ref())?;
            let (denoiser, schedule) = load_model(&cfg, Some(&model))?;
            let codec = build_codec(&cfg, codec.as_deref())?;
            let side = latent_size.unwrap_or(cfg.image_size / cfg.downsample);
            let dims = Dims::new(denoiser.arch().in_channels, side, side);
            fs::create_dir_all(&out)?;
            let root = RngStream::new(seed);
            for i in 0..count {
                let mut rng = root.derive(i as u64);
                let z0 = generate(&denoiser, dims, &schedule, &mut rng)?;
                io::write_bit_tensor(&out.join(format!("latent_{i:03}.bdt")), &z0)?;
                let img = codec.decode(&z0)?;
                io::write_image(&out.join(format!("sample_{i:03}.bdt")), &img)?;
                io::write_image_pgms(&out, &format!("sample_{i:03}"), &img)?;
            }
            println!("wrote {count} samples to {}", out.display());
            Ok(())
        }

        Command::Detect { config, input, out, model, codec, truth, noise_level, threshold, seed } => {
            println!("seed: {seed}");
            let mut cfg = load_config(config.as_ref())?;
            if let Some(l) = noise_level {
                cfg.noise_level = l;
            }
            if let Some(p) = threshold {
                cfg.mask_threshold = p;
            }
            let codec = build_codec(&cfg, codec.as_deref())?;
            let (denoiser, schedule) = load_model(&cfg, model.as_deref())?;
            let image = io::read_image(&input)?;
            let infer = cfg.inference_config(seed);
            let result = masked_inference(&image, &codec, &denoiser, &schedule, &infer)?;
            let id = input.file_stem().unwrap_or_default().to_string_lossy().to_string();
            let dice_col = match truth {
                Some(path) => Some(dice(&result.segmentation, &io::read_bit_tensor(&path)?)?),
                None => None,
            };
            let psnr_val = psnr(&image, &result.reconstruction)?;
            write_detect_outputs(&out, &id, &result, dice_col, psnr_val)?;
            println!(
                "mask fraction {:.4}%, psnr {:.2} dB, outputs in {}",
                result.mask_fraction,
                psnr_val,
                out.display()
            );
            Ok(())
        }

        Command::Eval { config, data, out, model, codec, noise_level, threshold, timing, seed } => {
            println!("seed: {seed}");
            let mut cfg = load_config(config.as_ref())?;
            if let Some(l) = noise_level {
                cfg.noise_level = l;
            }
            if let Some(p) = threshold {
                cfg.mask_threshold = p;
            }
            let codec = build_codec(&cfg, codec.as_deref())?;
            let (denoiser, schedule) = load_model(&cfg, model.as_deref())?;
            let dataset = load_labeled_dataset(&data)?;
            let infer = cfg.inference_config(seed);
            let result =
                bitdiff::eval::evaluate(&dataset, &codec, &denoiser, &schedule, &infer, timing)?;
            write_grid_outputs(&out, &result)?;
            let cell = &result.cells[0];
            println!(
                "P={} L={}: mean dice {:.4}, mean psnr {:.2}, mean mask fraction {:.4}%",
                cell.p, cell.l, cell.mean_dice, cell.mean_psnr, cell.mean_mask_fraction
            );
            Ok(())
        }

        Command::Gridsearch { config, data, out, model, codec, p_list, l_list, timing, seed } => {
            println!("seed: {seed}");
            let cfg = load_config(config.as_ref())?;
            let p_values: Vec<f64> = parse_list(&p_list, "P")?;
            let l_values: Vec<usize> = parse_list(&l_list, "L")?;
            let codec = build_codec(&cfg, codec.as_deref())?;
            let (denoiser, schedule) = load_model(&cfg, model.as_deref())?;
            let dataset = load_labeled_dataset(&data)?;
            let infer = cfg.inference_config(seed);
            let result = grid_search(
                &dataset,
                &codec,
                &denoiser,
                &schedule,
                &p_values,
                &l_values,
                &infer,
                timing,
            )?;
            write_grid_outputs(&out, &result)?;
            let best = result
                .cells
                .iter()
                .max_by(|a, b| a.mean_dice.partial_cmp(&b.mean_dice).unwrap())
                .unwrap();
            println!(
                "{} cells evaluated; best mean dice {:.4} at P={} L={}",
                result.cells.len(),
                best.mean_dice,
                best.p,
                best.l
            );
            Ok(())
        }

        Command::ScheduleDump { config, out } => {
            let cfg = load_config(config.as_ref())?;
            let schedule = cfg.build_schedule()?;
            let csv = schedule.to_csv();
            match out {
                Some(path) => {
                    io::atomic_write(&path, csv.as_bytes())?;
                    println!("wrote schedule table to {}", path.display());
                }
                None => {
                    // Tolerate a closed pipe (e.g. `bitdiff schedule-dump | head`).
                    use std::io::Write;
                    let _ = std::io::stdout().write_all(csv.as_bytes());
                }
            }
            Ok(())
        }
    }
}
