use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use ddslab::config::{preset, RunConfig};
use ddslab::diffusion::{sample_batch, SamplerConfig};
use ddslab::editor::{edit, EditMethod, EditTask, Monitor, Optimizer};
use ddslab::eval::experiments::{report_dir, run_experiment, REGISTRY};
use ddslab::eval::{source_fidelity, target_fidelity, CLIP_PROXY, LPIPS_PROXY};
use ddslab::image::{save_grid, Image};
use ddslab::pipeline::{self, load_classifier, load_denoiser, load_translator, translator_path, Split};
use ddslab::synthdata::{gen_image, import_dataset, support_of, Caption, SceneSpec};
use ddslab::translator::{I2IVariant, TaskSpec};
use ddslab::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_VERDICT: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// SDS/DDS laboratory on synthetic captioned shapes.
#[derive(Parser, Debug)]
#[command(name = "ddslab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// JSON configuration overlay; its `preset` key picks the base preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset when no configuration file is given.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Global seed; every module stream derives from it.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> ddslab::Result<RunConfig> {
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => preset(&self.preset)?,
        };
        let seed = self.seed.unwrap_or(cfg.seed);
        Ok(cfg.with_seed(seed).with_env())
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the train and held-out datasets.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the conditional denoiser on the generated training split.
    TrainDenoiser {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the attribute classifier used as the fidelity proxy.
    TrainClassifier {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Draw guided samples from a denoiser checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Caption such as `red circle on black` (`_` leaves a slot null).
        #[arg(long)]
        caption: Caption,
        /// Guidance scale; there is no default.
        #[arg(long)]
        omega: f64,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-shot edit of a rendered scene toward a target caption.
    Edit(EditArgs),
    /// Train the feed-forward translator with the frozen denoiser.
    TrainI2i(TrainI2iArgs),
    /// Translate one image with a trained translator.
    Translate {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a registered experiment and write its report.
    Experiment {
        /// One of the registered experiment names.
        name: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Summarise the latest report of every experiment.
    Report {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Args, Debug)]
struct EditArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene spec JSON (inline or a file path).
    #[arg(long)]
    source_spec: String,
    /// Scene spec JSON (inline or a file path).
    #[arg(long)]
    target_spec: String,
    /// `dds`, `sds`, `sds-reg` or `sds-reg:<lambda>`.
    #[arg(long, default_value = "dds")]
    method: EditMethod,
    #[arg(long, default_value_t = 7.5)]
    omega: f64,
    #[arg(long, default_value_t = 200)]
    iters: usize,
    #[arg(long, value_parser = ["sgd", "adam"], default_value = "sgd")]
    optimizer: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Classifier checkpoint for the target-fidelity column.
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// Keep every k-th iterate in the trajectory grid.
    #[arg(long, default_value_t = 20)]
    trajectory_every: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainI2iArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Denoiser checkpoint (default: the configured checkpoint directory).
    #[arg(long)]
    denoiser: Option<PathBuf>,
    /// Training dataset directory (default: the configured train split).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// JSON list of {name, init_caption_attrs, target_caption_attrs}.
    #[arg(long)]
    tasks: Option<PathBuf>,
    #[arg(long, default_value = "full")]
    variant: I2IVariant,
    /// Output directory (default: the configured checkpoint directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_VERDICT),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::UnknownExperiment { .. } => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            })
        }
    }
}

fn scene_spec(arg: &str) -> ddslab::Result<SceneSpec> {
    let text = if arg.trim_start().starts_with('{') { arg.to_string() } else { std::fs::read_to_string(arg)? };
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("scene spec: {e}")))
}

fn write_effective_config(cfg: &RunConfig, dir: &Path) -> ddslab::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), cfg.to_json()?)?;
    Ok(())
}

/// Returns whether every verdict passed.
fn run(command: Command) -> ddslab::Result<bool> {
    match command {
        Command::GenData { cfg } => {
            let cfg = cfg.resolve()?;
            pipeline::gen_data(&cfg)?;
            write_effective_config(&cfg, &cfg.paths.data_dir)?;
        }
        Command::TrainDenoiser { cfg } => {
            let cfg = cfg.resolve()?;
            let (_, meta) = pipeline::train_denoiser_stage(&cfg)?;
            write_effective_config(&cfg, &cfg.paths.checkpoint_dir)?;
            println!("validation loss {}", meta.validation.loss);
        }
        Command::TrainClassifier { cfg } => {
            let cfg = cfg.resolve()?;
            let clf = pipeline::train_classifier_stage(&cfg)?;
            write_effective_config(&cfg, &cfg.paths.checkpoint_dir)?;
            println!("held-out accuracy {:?}", clf.heldout);
        }
        Command::Sample { checkpoint, caption, omega, steps, count, seed, out } => {
            let (den, _) = load_denoiser(&checkpoint)?;
            let images = sample_batch(&den, &vec![caption; count], omega, steps, seed, SamplerConfig::default())?;
            if count == 1 {
                images[0].save_png(&out)?;
            } else {
                save_grid(&images, count.min(8), &out)?;
            }
            info!("wrote {}", out.display());
        }
        Command::Edit(a) => run_edit(a)?,
        Command::TrainI2i(a) => run_train_i2i(a)?,
        Command::Translate { net, task, input, out } => {
            let (net, _) = load_translator(&net)?;
            let img = Image::load_png(&input)?;
            let y = ddslab::translator::translate(&net, &img, net.task_index(&task)?)?;
            y.save_png(&out)?;
            info!("wrote {}", out.display());
        }
        Command::Experiment { name, cfg } => {
            if !REGISTRY.contains(&name.as_str()) {
                return Err(Error::UnknownExperiment { name, registry: REGISTRY.join(", ") });
            }
            let cfg = cfg.resolve()?;
            let dir = report_dir(&cfg, &name);
            let report = run_experiment(&name, &cfg, &dir)?;
            for c in &report.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            println!("report: {}", dir.display());
            return Ok(report.passed());
        }
        Command::Report { cfg } => return summarise(&cfg.resolve()?),
    }
    Ok(true)
}

fn run_edit(a: EditArgs) -> ddslab::Result<()> {
    let (den, meta) = load_denoiser(&a.checkpoint)?;
    let canvas = meta.arch.canvas;
    let source = scene_spec(&a.source_spec)?;
    let target = scene_spec(&a.target_spec)?;
    let zhat = gen_image(&source, canvas)?;
    let mut task = EditTask::new(zhat.clone(), Some(source.caption()), target.caption(), a.seed).with_omega(a.omega).with_iters(a.iters);
    task.settings.optimizer = if a.optimizer == "adam" { Optimizer::Adam } else { Optimizer::Sgd };
    task.settings.trajectory_every = a.trajectory_every;
    let mask = support_of(&source, canvas)?.union(&support_of(&target, canvas)?)?;
    let clf = a.classifier.as_deref().map(load_classifier).transpose()?;
    let res = edit(&den, &task, a.method, Monitor { classifier: clf.as_ref(), mask: Some(&mask) })?;
    res.export(&zhat, &a.out)?;
    let z = res.z_final.clamped();
    let off = source_fidelity(&z, &zhat, &mask)?;
    match &clf {
        Some(c) => println!("{CLIP_PROXY} {} {LPIPS_PROXY} {off}", target_fidelity(c, &z, &task.y)?),
        None => println!("{LPIPS_PROXY} {off}"),
    }
    Ok(())
}

fn run_train_i2i(a: TrainI2iArgs) -> ddslab::Result<()> {
    let cfg = a.cfg.resolve()?;
    let den_path = a.denoiser.unwrap_or_else(|| pipeline::denoiser_path(&cfg));
    if !den_path.exists() {
        return Err(Error::MissingPrerequisite {
            what: format!("denoiser checkpoint {}", den_path.display()),
            command: "ddslab train-denoiser --config <config.json>".into(),
        });
    }
    let (den, _) = load_denoiser(&den_path)?;
    let train = match &a.dataset {
        Some(dir) => import_dataset(dir)?,
        None => pipeline::load_split(&cfg, Split::Train)?,
    };
    let tasks: Vec<TaskSpec> = match &a.tasks {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).map_err(|e| Error::Config(format!("tasks: {e}")))?,
        None => cfg.i2i.tasks.clone(),
    };
    let (net, meta) = pipeline::train_translator_with(&den, &train, &tasks, &cfg.i2i.train, a.variant)?;
    let out = match a.out {
        Some(dir) => dir.join(format!("i2i-{}.ckpt", a.variant)),
        None => translator_path(&cfg, a.variant),
    };
    pipeline::save_translator(&net, &meta, &out)?;
    pipeline::write_translator_log(&meta, &out.with_extension("log.csv"))?;
    if let Some(dir) = out.parent() {
        write_effective_config(&cfg, dir)?;
    }
    info!("wrote {}", out.display());
    Ok(())
}

fn summarise(cfg: &RunConfig) -> ddslab::Result<bool> {
    let mut all = true;
    let mut rows = Vec::new();
    for name in REGISTRY {
        let dir = cfg.paths.runs_dir.join(name);
        let latest = std::fs::read_dir(&dir).ok().and_then(|d| d.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.join("report.json").exists()).max());
        let Some(latest) = latest else {
            println!("{name:<20} no report");
            continue;
        };
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(latest.join("report.json"))?)?;
        let passed = v["passed"].as_bool().unwrap_or(false);
        all &= passed;
        println!("{name:<20} {} {}", if passed { "PASS" } else { "FAIL" }, latest.display());
        rows.push(serde_json::json!({"name": name, "passed": passed, "dir": latest}));
    }
    std::fs::create_dir_all(&cfg.paths.runs_dir)?;
    std::fs::write(cfg.paths.runs_dir.join("summary.json"), serde_json::to_string_pretty(&rows)?)?;
    Ok(all)
}
