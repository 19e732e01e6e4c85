//! Command-line surface for the reconstruction pipeline.
//!
//! Exit codes: 0 success, 2 usage/consistency error, 3 I/O or file-format
//! error, 4 numeric divergence.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use gsdif_core::baselines::{fdk_reconstruct, sart_reconstruct};
use gsdif_core::error::Error;
use gsdif_core::formats::{
    default_config, geometry_from_config, load_checkpoint, load_projections, load_volume,
    model_config_from_config, sart_config_from_config, save_checkpoint, save_projections,
    save_volume, tto_config_from_config, Config,
};
use gsdif_core::metrics::{psnr, ssim};
use gsdif_core::model::{reconstruct, train, ModelParams};
use gsdif_core::projector::drr;
use gsdif_core::tto::tto_finetune;
use gsdif_core::volume::{generate_phantom, random_phantom_spec, VoxelVolume};

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;

#[derive(Parser)]
#[command(name = "gsdif", about = "Sparse-view CBCT reconstruction pipeline")]
struct Cli {
    /// Worker threads (0 = all cores). Never changes numeric results.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Model,
    Sart,
    Fdk,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    X,
    Y,
    Z,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural ellipsoid phantom volume.
    Phantom {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Voxels per axis (cubic volume).
        #[arg(long, default_value_t = 32)]
        dims: usize,
        /// Voxel pitch in mm.
        #[arg(long, default_value_t = 4.0)]
        spacing: f64,
        /// Phantom body half-extent in mm.
        #[arg(long, default_value_t = 60.0)]
        half_extent: f64,
    },
    /// Forward-project a volume into a projection stack.
    Project {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the configured view count.
        #[arg(long)]
        views: Option<usize>,
        /// Samples per ray.
        #[arg(long, default_value_t = 512)]
        n_r: usize,
    },
    /// Train a model on a directory of matching .vol/.proj pairs.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Optional path for the per-epoch loss log.
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Reconstruct a volume from projections.
    Reconstruct {
        #[arg(long)]
        proj: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Model)]
        method: Method,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        dims: usize,
        #[arg(long, default_value_t = 4.0)]
        spacing: f64,
    },
    /// Fine-tune a checkpoint against measured projections.
    Tto {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        proj: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Reconstruction-volume extent the Gaussian field spans.
        #[arg(long, default_value_t = 32)]
        dims: usize,
        #[arg(long, default_value_t = 4.0)]
        spacing: f64,
    },
    /// Print PSNR/SSIM of a reconstruction against a reference.
    Eval {
        recon: PathBuf,
        reference: PathBuf,
    },
    /// Export one slice as a binary PGM image.
    Slice {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::BadMagic { .. } | Error::TruncatedPayload { .. } | Error::Parse(_) => {
            EXIT_IO
        }
        Error::Divergence(_) => EXIT_DIVERGENCE,
        _ => EXIT_USAGE,
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<Config, Error> {
    match path {
        Some(p) => Config::parse(&fs::read_to_string(p)?),
        None => Ok(default_config()),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Phantom {
            seed,
            out,
            dims,
            spacing,
            half_extent,
        } => {
            let spec = random_phantom_spec(seed, half_extent);
            let vol = generate_phantom(&spec, (dims, dims, dims), [spacing; 3])?;
            save_volume(out, &vol)
        }
        Command::Project {
            volume,
            out,
            config,
            views,
            n_r,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(k) = views {
                cfg.sections
                    .entry("geometry".into())
                    .or_default()
                    .insert("n_views".into(), k.to_string());
            }
            let geom = geometry_from_config(&cfg)?;
            let vol = load_volume(volume)?;
            let stack = drr(&vol, &geom, n_r)?;
            save_projections(out, &stack)
        }
        Command::Train {
            data,
            out,
            seed,
            config,
            loss_log,
        } => {
            let cfg = load_config(&config)?;
            let model_cfg = model_config_from_config(&cfg)?;
            let dataset = load_dataset(&data)?;
            let (mut params, log) = train::<f32>(&dataset, model_cfg, seed)?;
            let mut log_text = String::new();
            for e in &log {
                log_text.push_str(&format!("epoch={} lr={:.6e} mse={:.6e}\n", e.epoch, e.lr, e.mse));
            }
            print!("{log_text}");
            if let Some(p) = loss_log {
                fs::write(p, log_text)?;
            }
            save_checkpoint(out, &mut params)
        }
        Command::Reconstruct {
            proj,
            out,
            method,
            checkpoint,
            config,
            dims,
            spacing,
        } => {
            let stack = load_projections(proj)?;
            let vol = match method {
                Method::Model => {
                    let ckpt = checkpoint.ok_or_else(|| {
                        Error::InvalidParameter(
                            "--method model requires --checkpoint".into(),
                        )
                    })?;
                    let params: ModelParams<f32> = load_checkpoint(ckpt)?;
                    if params.config.k_views != stack.n_views() {
                        return Err(Error::InvalidParameter(format!(
                            "checkpoint expects K={} views but projection file has K={}",
                            params.config.k_views,
                            stack.n_views()
                        )));
                    }
                    reconstruct(&params, &stack, (dims, dims, dims), [spacing; 3], 4096)?
                }
                Method::Sart => {
                    let cfg = load_config(&config)?;
                    let sart_cfg = sart_config_from_config(&cfg)?;
                    sart_reconstruct(&stack, (dims, dims, dims), [spacing; 3], &sart_cfg)?
                }
                Method::Fdk => fdk_reconstruct(&stack, (dims, dims, dims), [spacing; 3])?,
            };
            save_volume(out, &vol)
        }
        Command::Tto {
            checkpoint,
            proj,
            out,
            seed,
            config,
            dims,
            spacing,
        } => {
            let cfg = load_config(&config)?;
            let tto_cfg = tto_config_from_config(&cfg)?;
            let stack = load_projections(proj)?;
            let mut params: ModelParams<f32> = load_checkpoint(checkpoint)?;
            if params.config.k_views != stack.n_views() {
                return Err(Error::InvalidParameter(format!(
                    "checkpoint expects K={} views but projection file has K={}",
                    params.config.k_views,
                    stack.n_views()
                )));
            }
            let (lo, hi) = VoxelVolume::centered((dims, dims, dims), [spacing; 3]).bounds();
            let log = tto_finetune(&mut params, &stack, lo, hi, &tto_cfg, seed)?;
            for (i, loss) in log.iter().enumerate() {
                println!("step={i} loss={loss:.6e}");
            }
            save_checkpoint(out, &mut params)
        }
        Command::Eval { recon, reference } => {
            let a = load_volume(recon)?;
            let b = load_volume(reference)?;
            let p = psnr(&a, &b, 1.0)?;
            let s = ssim(&a, &b, 1.0)?;
            println!("psnr_db={p:.4}, ssim={s:.4}");
            Ok(())
        }
        Command::Slice {
            volume,
            axis,
            index,
            out,
        } => {
            let vol = load_volume(volume)?;
            let pgm = slice_pgm(&vol, axis, index)?;
            fs::write(out, pgm)?;
            Ok(())
        }
    }
}

/// Load `name.vol` + `name.proj` pairs from a directory, sorted by name.
fn load_dataset(
    dir: &PathBuf,
) -> Result<Vec<(VoxelVolume, gsdif_core::projector::ProjectionStack)>, Error> {
    let mut stems: Vec<String> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("vol") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    if stems.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "no .vol files in {}",
            dir.display()
        )));
    }
    let mut out = Vec::with_capacity(stems.len());
    for stem in stems {
        let vol = load_volume(dir.join(format!("{stem}.vol")))?;
        let proj_path = dir.join(format!("{stem}.proj"));
        if !proj_path.exists() {
            return Err(Error::InvalidParameter(format!(
                "missing projection file for sample '{stem}'"
            )));
        }
        let stack = load_projections(proj_path)?;
        out.push((vol, stack));
    }
    Ok(out)
}

/// Render one slice as a binary P5 graymap, 8-bit linear over [0, 1].
fn slice_pgm(vol: &VoxelVolume, axis: Axis, index: usize) -> Result<Vec<u8>, Error> {
    let (nx, ny, nz) = vol.dims;
    let (w, h, bound) = match axis {
        Axis::X => (ny, nz, nx),
        Axis::Y => (nx, nz, ny),
        Axis::Z => (nx, ny, nz),
    };
    if index >= bound {
        return Err(Error::InvalidParameter(format!(
            "slice index {index} out of range 0..{bound}"
        )));
    }
    let mut pixels = Vec::with_capacity(w * h);
    for row in 0..h {
        for col in 0..w {
            let v = match axis {
                Axis::X => vol.at(index, col, row),
                Axis::Y => vol.at(col, index, row),
                Axis::Z => vol.at(col, row, index),
            };
            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels);
    Ok(out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successful exits; real usage errors
            // map to status 2.
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_USAGE)
            };
        }
    };
    if cli.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global()
        {
            eprintln!("error: cannot configure {} workers: {e}", cli.workers);
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
