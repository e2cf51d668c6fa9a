//! Command-line entry point: training, evaluation, attention export,
//! synthetic dataset generation and the gradient verification suite.
//!
//! Results go to standard out in documented, machine-parseable columns;
//! diagnostics go to standard error. Exit code 2 flags configuration or
//! usage errors, 1 any runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use msapr_core::config::{ConfigError, RunConfig};
use msapr_core::data::{self, ChannelStats, ImageSource};
use msapr_core::gradcheck;
use msapr_core::model::{export_attention, Branch};
use msapr_core::nn::Mode;
use msapr_core::pose::PoseErrorSummary;
use msapr_core::rng::RngState;
use msapr_core::train::{self, Checkpoint};

#[derive(Parser)]
#[command(
    name = "msapr",
    about = "Multi-scene absolute pose regression with transformers",
    version
)]
struct Cli {
    /// Override the seed of any command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a dataset manifest.
    Train {
        /// key=value config file (model + training keys).
        #[arg(long)]
        config: PathBuf,
        /// Dataset manifest path.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and the training log.
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint written with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Config overrides, e.g. --set lr=3e-4 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate a checkpoint: per-scene medians and scene accuracy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report CSV path.
        #[arg(long, default_value = "eval_report.csv")]
        out: PathBuf,
    },
    /// Export encoder attention heatmap and decoder activation norms.
    Attention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image (binary PPM or MSTR raw tensor).
        #[arg(long)]
        image: PathBuf,
        /// Which transformer branch to visualize.
        #[arg(long)]
        branch: Branch,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a deterministic synthetic multi-scene dataset.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        scenes: usize,
        #[arg(long = "per-scene")]
        per_scene: usize,
        #[arg(long, default_value_t = 64)]
        hw: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient verification suite.
    Gradcheck {},
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, data, out, resume, set } => {
            cmd_train(&config, &data, &out, resume.as_deref(), &set, cli.seed)
        }
        Command::Eval { checkpoint, data, out } => cmd_eval(&checkpoint, &data, &out),
        Command::Attention { checkpoint, image, branch, out } => {
            cmd_attention(&checkpoint, &image, branch, &out)
        }
        Command::Synth { seed, scenes, per_scene, hw, out } => {
            cmd_synth(cli.seed.unwrap_or(seed), scenes, per_scene, hw, &out)
        }
        Command::Gradcheck {} => cmd_gradcheck(cli.seed.unwrap_or(gradcheck::SUITE_SEED)),
    }
}

fn load_config(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let text =
        fs::read_to_string(path).with_context(|| format!("read config {}", path.display()))?;
    let mut cfg = RunConfig::parse(&text)?;
    let pairs: Vec<(String, String)> = overrides
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| anyhow!(ConfigError::Malformed { line: 0, text: kv.clone() }))
        })
        .collect::<Result<_>>()?;
    cfg.apply_overrides(&pairs)?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn cmd_train(
    config: &Path,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<ExitCode> {
    let cfg = load_config(config, overrides, seed)?;
    let manifest = data::load_manifest(data)?;
    log::info!(
        "training: {} samples, {} scenes, {} steps",
        manifest.len(),
        manifest.n_scenes(),
        cfg.train.max_steps
    );
    let outcome = train::run_training(&cfg, &manifest, out, resume)?;
    println!(
        "step={} loss={} checkpoint={}",
        outcome.steps_run,
        outcome.final_loss,
        outcome.checkpoint_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn print_report(summary: &PoseErrorSummary, scene_names: &[String]) {
    println!(
        "{:<24} {:>14} {:>15} {:>8} {:>9}",
        "scene", "median_pos_m", "median_ori_deg", "samples", "accuracy"
    );
    for (scene, s) in &summary.per_scene {
        println!(
            "{:<24} {:>14.4} {:>15.3} {:>8} {:>9.3}",
            scene_names.get(*scene).map(String::as_str).unwrap_or("?"),
            s.median_position_m,
            s.median_orientation_deg,
            s.samples,
            s.accuracy
        );
    }
    let total: usize = summary.per_scene.values().map(|s| s.samples).sum();
    println!(
        "{:<24} {:>14.4} {:>15.3} {:>8} {:>9.3}",
        "average",
        summary.median_position_m,
        summary.median_orientation_deg,
        total,
        summary.scene_accuracy
    );
}

fn cmd_eval(checkpoint: &Path, data: &Path, out: &Path) -> Result<ExitCode> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.restore_model()?;
    let manifest = data::load_manifest(data)?;
    if manifest.n_scenes() != model.config.n_scenes {
        bail!(
            "dataset has {} scenes but the checkpoint embeds {}",
            manifest.n_scenes(),
            model.config.n_scenes
        );
    }
    let samples = train::load_samples(&manifest, model.config.input_hw)?;
    let summary = train::evaluate(&model, &samples)?;
    print_report(&summary, &manifest.scene_names);

    let mut csv = String::from("scene,median_position_m,median_orientation_deg,samples,accuracy\n");
    for (scene, s) in &summary.per_scene {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            manifest.scene_names[*scene],
            s.median_position_m,
            s.median_orientation_deg,
            s.samples,
            s.accuracy
        ));
    }
    let total: usize = summary.per_scene.values().map(|s| s.samples).sum();
    csv.push_str(&format!(
        "average,{},{},{},{}\n",
        summary.median_position_m, summary.median_orientation_deg, total, summary.scene_accuracy
    ));
    fs::write(out, csv).with_context(|| format!("write report {}", out.display()))?;
    log::info!("report written to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_attention(checkpoint: &Path, image: &Path, branch: Branch, out: &Path) -> Result<ExitCode> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.restore_model()?;
    let raw = data::decode_image(image)?;
    let prepared = data::load_image(
        &ImageSource::Memory(raw),
        model.config.input_hw,
        &ChannelStats::default(),
    )?;
    let mut rng = RngState::new(0);
    let output = model.forward(&prepared, None, Mode::eval(), &mut rng)?;
    fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    let tag = match branch {
        Branch::Position => "position",
        Branch::Orientation => "orientation",
    };
    let heatmap = out.join(format!("attention_{tag}.pgm"));
    let csv = out.join(format!("decoder_{tag}.csv"));
    export_attention(&output, branch, &model.config, &heatmap, &csv)?;
    println!("heatmap={} decoder_csv={}", heatmap.display(), csv.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(seed: u64, scenes: usize, per_scene: usize, hw: usize, out: &Path) -> Result<ExitCode> {
    if scenes == 0 || per_scene == 0 {
        return Err(anyhow!(ConfigError::Invalid(
            "synth needs scenes >= 1 and per-scene >= 1".into()
        )));
    }
    let manifest = data::synth_dataset(seed, scenes, per_scene, hw);
    let path = data::write_dataset(&manifest, out)?;
    println!("manifest={}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(seed: u64) -> Result<ExitCode> {
    let mut rng = RngState::new(seed);
    let started = std::time::Instant::now();
    let mut all_pass = true;
    for check in gradcheck::full_suite() {
        let err = (check.run)(&mut rng);
        let pass = err < gradcheck::FD_TOLERANCE;
        all_pass &= pass;
        println!("{:<28} {:>12.3e} {}", check.name, err, if pass { "pass" } else { "FAIL" });
    }
    log::info!("gradient suite finished in {:?}", started.elapsed());
    Ok(if all_pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
