//! `wxdet`: dataset synthesis, training, evaluation, enhancement,
//! ablations and plots.

mod plot;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use wxdet::checkpoint::Checkpoint;
use wxdet::dataset::{build_pairs, fog_directory, read_png, read_split, write_png, write_split};
use wxdet::eval::{evaluate, write_ap_csv, APResult, WeatherDetections};
use wxdet::scene::FogPair;
use wxdet::train::{
    load_model, run_ablation, train, AblationMatrix, ExperimentConfig, TrainOptions, TrainSample, Variant, WeatherSplit,
};
use wxdet::FeatureMap;

/// Environment variable naming the default output root.
const OUT_ENV: &str = "WXDET_OUT";

#[derive(Parser, Debug)]
#[command(name = "wxdet", version, about = "Weather-robust monocular 3D detection at desk scale")]
struct Cli {
    /// Experiment config (TOML); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Experiment seed (weights, batch order). For `synth`, the first scene seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to $WXDET_OUT, then `runs`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Weather {
    Clear,
    Foggy,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train and validation splits with every configured density.
    Synth {
        /// Overrides `data.train_scenes`.
        #[arg(long)]
        train_scenes: Option<usize>,
        /// Overrides `data.val_scenes`.
        #[arg(long)]
        val_scenes: Option<usize>,
        /// Densities to emit (comma separated); defaults to the config list.
        #[arg(long, value_delimiter = ',')]
        density: Vec<f64>,
    },
    /// Fog a directory of clear images with depth.
    Fog {
        /// Split written by `synth` (clear images plus depth maps).
        #[arg(long = "in")]
        input: PathBuf,
        /// Fog density δ (1/m).
        #[arg(long)]
        density: f64,
    },
    /// Train one model.
    Train {
        /// Split written by `synth`; generated in memory when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Held-out split for periodic evaluation.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Fog density of the training pairs; overrides `data.density`.
        #[arg(long)]
        density: Option<f64>,
        /// Diffusion steps T; overrides `diffusion.timesteps`.
        #[arg(long)]
        timesteps: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Evaluate a checkpoint (clear, foggy and the clear-fraction sweep).
    Eval {
        /// Checkpoint; its config is read from `config.toml` beside it
        /// unless --config is given.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split written by `synth`; the validation scenes are generated in
        /// memory when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Fog density of the foggy images.
        #[arg(long)]
        density: Option<f64>,
        /// Evaluate only this seeded clear/foggy mixture.
        #[arg(long)]
        clear_fraction: Option<f64>,
        /// Evaluate only this weather.
        #[arg(long, value_enum, conflicts_with = "clear_fraction")]
        weather: Option<Weather>,
    },
    /// Enhance one image and write feature-energy maps.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PNG image to enhance.
        #[arg(long)]
        image: PathBuf,
    },
    /// Module and timestep ablation.
    Ablate {
        /// Number of seeds, starting at --seed (default 0).
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Diffusion step counts (comma separated).
        #[arg(long, value_delimiter = ',', default_value = "5,10,15,20")]
        timesteps: Vec<usize>,
        /// Variants (comma separated).
        #[arg(long, value_delimiter = ',', default_value = "baseline,+WAD,+WC+WAD")]
        variants: Vec<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        density: Option<f64>,
    },
    /// Render a CSV written by `eval`, `ablate` or `train` to a PNG.
    Plot {
        /// `eval.csv`, `ablation.csv` or `metrics.csv`.
        #[arg(long)]
        input: PathBuf,
    },
}

/// Bad input detected before any computation.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<Usage>() { 2 } else { 1 })
        }
    }
}

fn out_root(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            ExperimentConfig::load(p).map_err(|e| usage(format!("config {}: {e}", p.display())))
        }
    }
}

fn validated(cfg: ExperimentConfig) -> Result<ExperimentConfig> {
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn check_density(d: f64) -> Result<()> {
    if !(d >= 0.0 && d.is_finite()) {
        return Err(usage(format!("density {d} must be a nonnegative number")));
    }
    Ok(())
}

fn check_dir(p: &Path) -> Result<()> {
    if !p.is_dir() {
        return Err(usage(format!("{} is not a directory", p.display())));
    }
    Ok(())
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

/// Records the invocation and config hash next to the outputs.
fn log_invocation(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    create_dir(dir)?;
    let line = std::env::args().collect::<Vec<_>>().join(" ");
    log::info!("{line}");
    log::info!("config hash {}", cfg.hash());
    fs::write(dir.join("command.txt"), format!("{line}\nconfig_hash={}\n", cfg.hash()))
        .context("writing command.txt")?;
    fs::write(dir.join("config.toml"), cfg.to_toml()).context("writing config.toml")
}

fn pairs_from(dir: Option<&Path>, cfg: &ExperimentConfig, first_seed: u64, count: usize) -> Result<Vec<FogPair>> {
    Ok(match dir {
        Some(d) => read_split(d, cfg.data.density).with_context(|| format!("reading {}", d.display()))?,
        None => build_pairs(&cfg.data.scene, first_seed, count, cfg.data.density)?,
    })
}

fn run(cli: Cli) -> Result<()> {
    let root = out_root(&cli);
    let mut cfg = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Synth {
            train_scenes,
            val_scenes,
            density,
        } => {
            if let Some(s) = cli.seed {
                cfg.data.train_first_seed = s;
            }
            if let Some(n) = train_scenes {
                cfg.data.train_scenes = *n;
            }
            if let Some(n) = val_scenes {
                cfg.data.val_scenes = *n;
            }
            if !density.is_empty() {
                cfg.data.densities = density.clone();
            }
            cfg.data.densities.iter().try_for_each(|d| check_density(*d))?;
            let cfg = validated(cfg)?;
            if cfg.data.densities.is_empty() {
                return Err(usage("no densities to synthesize"));
            }
            log_invocation(&root, &cfg)?;
            for (split, first, n) in [
                ("train", cfg.data.train_first_seed, cfg.data.train_scenes),
                ("val", cfg.data.val_first_seed, cfg.data.val_scenes),
            ] {
                let variants = cfg
                    .data
                    .densities
                    .iter()
                    .map(|&d| build_pairs(&cfg.data.scene, first, n, d))
                    .collect::<wxdet::Result<Vec<_>>>()?;
                let rows = write_split(&root.join(split), &variants)?;
                println!("{split}: {} scenes, {} pairs", n, rows.len());
            }
        }
        Command::Fog { input, density } => {
            check_density(*density)?;
            check_dir(input)?;
            let rows = fog_directory(input, &root, *density)?;
            println!("fogged {} images at density {density} into {}", rows.len(), root.display());
        }
        Command::Train {
            data,
            val,
            density,
            timesteps,
            epochs,
            max_steps,
        } => {
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(d) = density {
                check_density(*d)?;
                cfg.data.density = *d;
            }
            if let Some(t) = timesteps {
                cfg.diffusion.timesteps = *t;
            }
            if let Some(e) = epochs {
                cfg.optim.epochs = *e;
            }
            let cfg = validated(cfg)?;
            for d in [data, val].into_iter().flatten() {
                check_dir(d)?;
            }
            log_invocation(&root, &cfg)?;
            let pairs = pairs_from(data.as_deref(), &cfg, cfg.data.train_first_seed, cfg.data.train_scenes)?;
            let samples: Vec<TrainSample> = pairs.iter().map(TrainSample::from).collect();
            let val_split = if val.is_some() || cfg.optim.eval_every > 0 {
                let vp = pairs_from(val.as_deref(), &cfg, cfg.data.val_first_seed, cfg.data.val_scenes)?;
                Some(WeatherSplit::from_pairs(&vp))
            } else {
                None
            };
            let opts = TrainOptions {
                out_dir: Some(root.clone()),
                max_steps: *max_steps,
            };
            let (_, report) = train(&cfg, &samples, val_split.as_ref(), &opts)?;
            println!(
                "trained {} steps in {:.1}s, final loss {:.5}, checkpoint {}",
                report.steps.len(),
                report.wall_seconds,
                report.final_loss().unwrap_or(f64::NAN),
                root.join("final.ckpt").display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            density,
            clear_fraction,
            weather,
        } => {
            if let Some(f) = clear_fraction {
                if !(0.0..=1.0).contains(f) {
                    return Err(usage(format!("--clear-fraction {f} outside [0, 1]")));
                }
            }
            let cfg = checkpoint_config(cli.config.as_deref(), checkpoint)?;
            let mut data_cfg = cfg.clone();
            if let Some(d) = density {
                check_density(*d)?;
                data_cfg.data.density = *d;
            }
            if let Some(d) = data {
                check_dir(d)?;
            }
            let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let model = load_model(&cfg, &ck)?;
            create_dir(&root)?;
            log_invocation(&root, &cfg)?;
            let pairs = pairs_from(data.as_deref(), &data_cfg, cfg.data.val_first_seed, cfg.data.val_scenes)?;
            let split = WeatherSplit::from_pairs(&pairs);
            let det = WeatherDetections::compute(&model, &split.clear, &split.foggy)?;
            let (iou, thr, seed) = (cfg.eval.iou_threshold, &cfg.data.scene.difficulty, cfg.eval.mixture_seed);
            let mut results: Vec<(String, Option<f64>, APResult)> = Vec::new();
            match (clear_fraction, weather) {
                (Some(f), _) => results.push(("mixed".into(), Some(*f), det.evaluate_mixture(*f, seed, iou, thr)?)),
                (None, Some(Weather::Clear)) => results.push(("clear".into(), None, evaluate(&det.clear, iou, thr)?)),
                (None, Some(Weather::Foggy)) => results.push(("foggy".into(), None, evaluate(&det.foggy, iou, thr)?)),
                (None, None) => {
                    results.push(("clear".into(), None, evaluate(&det.clear, iou, thr)?));
                    results.push(("foggy".into(), None, evaluate(&det.foggy, iou, thr)?));
                    for (f, r) in det.robustness_curve(&cfg.eval.clear_fractions, seed, iou, thr)? {
                        results.push(("mixed".into(), Some(f), r));
                    }
                }
            }
            let path = root.join("eval.csv");
            write_ap_csv(&path, &results)?;
            for (label, f, r) in &results {
                let tag = f.map_or(label.clone(), |f| format!("{label}@{f:.2}"));
                println!(
                    "{tag:<12} 3D {:.4} {:.4} {:.4} | BEV {:.4} {:.4} {:.4}",
                    r.values[0][0], r.values[0][1], r.values[0][2], r.values[1][0], r.values[1][1], r.values[1][2]
                );
            }
            println!("wrote {}", path.display());
        }
        Command::Enhance { checkpoint, image } => {
            let cfg = checkpoint_config(cli.config.as_deref(), checkpoint)?;
            if !image.is_file() {
                return Err(usage(format!("{} is not a file", image.display())));
            }
            let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let model = load_model(&cfg, &ck)?;
            let img = read_png(image)?;
            let raw = model.encoder.encode(&model.params, &img)?;
            let enhanced = model.enhance(&img)?;
            create_dir(&root)?;
            let scale = model.encoder.stride();
            let (lo, hi) = energy_range(&[&raw, &enhanced]);
            write_png(&root.join("feature.png"), &plot::energy_image(&raw, scale, lo, hi))?;
            write_png(&root.join("enhanced.png"), &plot::energy_image(&enhanced, scale, lo, hi))?;
            let diff = raw.tensor().max_abs_diff(enhanced.tensor());
            println!(
                "wrote feature.png and enhanced.png to {} (max |enhanced − raw| = {diff:.4})",
                root.display()
            );
        }
        Command::Ablate {
            seeds,
            timesteps,
            variants,
            data,
            val,
            density,
        } => {
            if *seeds == 0 {
                return Err(usage("--seeds must be at least 1"));
            }
            if let Some(d) = density {
                check_density(*d)?;
                cfg.data.density = *d;
            }
            let variants = variants
                .iter()
                .map(|v| Variant::parse(v).map_err(|e| usage(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            let first = cli.seed.unwrap_or(0);
            let matrix = AblationMatrix {
                variants,
                timesteps: timesteps.clone(),
                seeds: (first..first + seeds).collect(),
            };
            let cfg = validated(cfg)?;
            for d in [data, val].into_iter().flatten() {
                check_dir(d)?;
            }
            log_invocation(&root, &cfg)?;
            let pairs = pairs_from(data.as_deref(), &cfg, cfg.data.train_first_seed, cfg.data.train_scenes)?;
            let samples: Vec<TrainSample> = pairs.iter().map(TrainSample::from).collect();
            let vp = pairs_from(val.as_deref(), &cfg, cfg.data.val_first_seed, cfg.data.val_scenes)?;
            let report = run_ablation(&cfg, &matrix, &samples, &WeatherSplit::from_pairs(&vp))?;
            report.write_csv(&root.join("ablation.csv"))?;
            let md = report.markdown();
            fs::write(root.join("ablation.md"), &md).context("writing ablation.md")?;
            print!("{md}");
        }
        Command::Plot { input } => {
            if !input.is_file() {
                return Err(usage(format!("{} is not a file", input.display())));
            }
            create_dir(&root)?;
            let stem = input.file_stem().map_or("plot".into(), |s| s.to_string_lossy().into_owned());
            let path = root.join(format!("{stem}.png"));
            let legend = plot::plot_csv(input, &path)?;
            for (name, color) in &legend {
                println!("{name}: rgb({}, {}, {})", color[0], color[1], color[2]);
            }
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

/// Config of a checkpoint: `--config` when given, else the `config.toml`
/// written beside the checkpoint.
fn checkpoint_config(explicit: Option<&Path>, checkpoint: &Path) -> Result<ExperimentConfig> {
    if !checkpoint.is_file() {
        return Err(usage(format!("checkpoint {} not found", checkpoint.display())));
    }
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => checkpoint.with_file_name("config.toml"),
    };
    if !path.is_file() {
        return Err(usage(format!("no config for checkpoint (looked for {})", path.display())));
    }
    load_config(Some(&path))
}

fn energy_range(maps: &[&FeatureMap]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for m in maps {
        for e in plot::energies(m) {
            lo = lo.min(e);
            hi = hi.max(e);
        }
    }
    (lo, hi)
}
