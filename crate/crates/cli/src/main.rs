use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use relight_core::augment::relight_dataset_from_files;
use relight_core::eval::io::{run_eval, synthesize_pairs, EvalConfig, EvalTask, PairManifest};
use relight_core::manifest::DatasetManifest;
use relight_core::probe::{build_scene_agnostic_set, probe_file_name, render_probe, ProbeSet, ProbeSpec};
use relight_core::synth::{build_toy_dataset, default_light_specs};
use relight_core::train::{fit, FitOptions, TrainingData, TrainingSetup, LAST_CHECKPOINT};
use relight_core::vae::{sample_probe, train_vae, vae_corpus, VaeConfig, VaeModel};
use relight_core::{Error, Result};

#[derive(Parser)]
#[command(name = "relight-aug", version, about = "Relighting-based data augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render light probes from a JSON spec (one object or an array).
    RenderProbes {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average per-scene probes into one scene-agnostic probe per illumination.
    AvgProbes {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the procedural toy dataset.
    SynthData {
        #[arg(long, default_value_t = 32)]
        scenes: usize,
        #[arg(long, default_value_t = 8)]
        lights: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 64)]
        probe_size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the relighting network.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        probes: PathBuf,
        /// JSON with optional "model", "train" and "extractor" sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/last.ckpt`.
        #[arg(long)]
        resume: bool,
    },
    /// Train the probe VAE.
    TrainVae {
        #[arg(long)]
        probes: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "vae.ckpt")]
        out: PathBuf,
    },
    /// Decode a probe from a latent vector.
    SampleProbe {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated latent coordinates.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        z: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write relit variants of every image plus a pool index.
    Augment {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        probes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Synthesize warped evaluation pairs from a directory of PNGs.
    MakePairs {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        strength: f64,
    },
    /// Score keypoint matches.
    Eval {
        task: Task,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value_t = 3.0)]
        threshold: f64,
        /// Corner error bound for the homography task.
        #[arg(long, default_value_t = 3.0)]
        corner_eps: f64,
        #[arg(long, default_value_t = 500)]
        max_keypoints: usize,
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Mma,
    Homography,
    Pr,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::RenderProbes { spec, out } => {
            let value: serde_json::Value = serde_json::from_str(&read_text(&spec)?)?;
            let specs: Vec<ProbeSpec> = match value {
                serde_json::Value::Array(_) => serde_json::from_value(value)?,
                other => vec![serde_json::from_value(other)?],
            };
            mkdir(&out)?;
            for (id, s) in specs.iter().enumerate() {
                let path = out.join(probe_file_name(id as u32));
                render_probe(s)?.with_id(id as u32).save(&path)?;
                println!("{}", path.display());
            }
        }
        Command::AvgProbes { manifest, out } => {
            let m = DatasetManifest::load_unchecked(&manifest)?;
            let set = build_scene_agnostic_set(&m)?;
            mkdir(&out)?;
            for p in set.save_dir(&out)? {
                println!("{}", p.display());
            }
        }
        Command::SynthData {
            scenes,
            lights,
            size,
            probe_size,
            seed,
            out,
        } => {
            let specs = default_light_specs(lights, probe_size);
            build_toy_dataset(scenes, size, &specs, &out, seed)?;
            println!("{}", out.join("manifest.json").display());
        }
        Command::Train {
            manifest,
            probes,
            config,
            out,
            resume,
        } => {
            let setup = match config {
                Some(p) => TrainingSetup::load(p)?,
                None => TrainingSetup::default(),
            };
            let manifest = DatasetManifest::load(&manifest)?;
            let probes = ProbeSet::load_dir(&probes)?;
            let mut data = TrainingData::new(manifest, probes, setup.train.image_size, setup.train.cache_images)?;
            let outcome = fit(
                &mut data,
                &setup,
                &FitOptions {
                    out_dir: Some(out.clone()),
                    resume: resume.then(|| out.join(LAST_CHECKPOINT)),
                    stop_after: None,
                    verbose: true,
                },
            )?;
            if let Some(best) = outcome.best_val {
                println!("best validation loss {best:.6} at epoch {}", outcome.best_epoch.unwrap_or(0));
            }
        }
        Command::TrainVae { probes, config, out } => {
            let config: VaeConfig = match config {
                Some(p) => serde_json::from_str(&read_text(&p)?)?,
                None => VaeConfig::default(),
            };
            let set = ProbeSet::load_dir(&probes)?;
            let corpus = vae_corpus(&set, &config)?;
            let (model, history) = train_vae(&corpus, &config)?;
            model.save(&out)?;
            println!(
                "trained on {} probes, final loss {:.6}; wrote {}",
                corpus.len(),
                history.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::SampleProbe { ckpt, z, out } => {
            let model = VaeModel::load(&ckpt)?;
            sample_probe(&model, &z)?.save(&out)?;
        }
        Command::Augment {
            ckpt,
            images,
            probes,
            out,
            overwrite,
        } => {
            let report = relight_dataset_from_files(&ckpt, &images, &probes, &out, overwrite)?;
            for (file, reason) in &report.failures {
                eprintln!("skipped {file}: {reason}");
            }
            println!("wrote {} variants for {} images", report.written, report.pool.len());
            if !report.failures.is_empty() {
                return Err(Error::Empty(format!("{} images could not be processed", report.failures.len())));
            }
        }
        Command::MakePairs {
            images,
            out,
            seed,
            strength,
        } => {
            synthesize_pairs(&pngs(&images)?, &out, seed, strength)?;
            println!("{}", out.join("pairs.json").display());
        }
        Command::Eval {
            task,
            pairs,
            threshold,
            corner_eps,
            max_keypoints,
            report,
        } => {
            let config = EvalConfig {
                pixel_threshold: threshold,
                corner_eps,
                max_keypoints,
                ..EvalConfig::default()
            };
            let task = match task {
                Task::Mma => EvalTask::Mma,
                Task::Homography => EvalTask::Homography,
                Task::Pr => EvalTask::Pr,
            };
            let r = run_eval(&PairManifest::load(&pairs)?, task, &config)?;
            std::fs::write(&report, serde_json::to_string_pretty(&r)?).map_err(|e| Error::io(&report, e))?;
            println!("{}", serde_json::to_string(&r.aggregate)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
