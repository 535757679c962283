//! `bica`: data generation, training, evaluation and captioning.
//!
//! Configuration precedence, lowest first: the `--config` preset or file,
//! the `BICA_SEED` environment variable, then `--set key=value` flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bica_core::checkpoint::Checkpoint;
use bica_core::config::{Config, Variant};
use bica_core::datasynth::{
    generate_dataset,
    scene::{color_of, size_of},
    Dataset, SceneOptions, COLORS, SIZES,
};
use bica_core::evalmetrics::{evaluate, predictions_to_text};
use bica_core::heads::greedy_decode;
use bica_core::inference::{check_vocab, eval_scenes, model_from_checkpoint, predict_scene, words};
use bica_core::training::{model_gradcheck, run_ablation, RunOptions, Trainer, GRADCHECK_TOL};
use bica_core::{BicaError, Result};
use clap::{Args, Parser, Subcommand};

const VERSION: &str = env!("BICA_GIT_DESCRIBE");

#[derive(Parser)]
#[command(name = "bica", version = VERSION, about = "3D dense captioning with bi-directional contextual attention")]
struct Cli {
    /// Worker threads for per-scene work; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Preset name (`tiny`, `paper`) or path to a key = value config file.
    #[arg(long)]
    config: Option<String>,
    /// Override one config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        /// Dataset seed; defaults to BICA_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 32)]
        scenes: usize,
        #[arg(long, default_value_t = 2)]
        objects_min: usize,
        #[arg(long, default_value_t = 4)]
        objects_max: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Train one stage or the whole pipeline.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// `all`, `1`, `2` or `3`.
        #[arg(long, default_value = "all")]
        stage: String,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Accept a checkpoint whose config differs from the requested one.
        #[arg(long)]
        force: bool,
        /// Save latest.ckpt every N steps (0 only at stage ends).
        #[arg(long, default_value_t = 100)]
        checkpoint_every: usize,
        /// Stop once this global step is reached.
        #[arg(long)]
        stop_at_step: Option<u64>,
    },
    /// Evaluate a checkpoint with the m@k protocol.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        nms_iou: f64,
        /// Beam width for captions; defaults to the checkpoint config.
        #[arg(long)]
        beam: Option<usize>,
        /// Report file; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write every prediction with its caption.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Caption the objects detected in one scene.
    Caption {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file holding the scene.
        #[arg(long)]
        scene_file: PathBuf,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        /// Decode greedily instead of with beam search.
        #[arg(long)]
        greedy: bool,
        #[arg(long, default_value_t = 0.5)]
        min_score: f64,
    },
    /// Finite-difference check of the full training loss.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        /// Seed of the two-object scene.
        #[arg(long, default_value_t = 1)]
        scene_seed: u64,
    },
    /// Train and evaluate BiCA variants into one comparison table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Variants to compare (repeatable); all four by default.
        #[arg(long = "variant")]
        variants: Vec<Variant>,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        /// Table file; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("BICA_SEED") {
        Ok(v) => {
            v.trim().parse().map(Some).map_err(|_| {
                BicaError::Config(format!("BICA_SEED {v:?} is not an unsigned integer"))
            })
        }
        Err(_) => Ok(None),
    }
}

impl ConfigArgs {
    fn base(&self) -> Result<Option<Config>> {
        let Some(c) = &self.config else {
            return Ok(None);
        };
        if Path::new(c).exists() {
            Config::load(Path::new(c)).map(Some)
        } else {
            Config::preset(c).map(Some)
        }
    }

    fn apply(&self, mut cfg: Config) -> Result<Config> {
        if let Some(s) = env_seed()? {
            cfg.seed = s;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| BicaError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&self) -> Result<Config> {
        let base = self.base()?.unwrap_or_else(Config::tiny);
        self.apply(base)
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads.max(1);
    match cli.command {
        Command::GenData {
            seed,
            scenes,
            objects_min,
            objects_max,
            out,
            overwrite,
        } => {
            if out.exists() && !overwrite {
                return Err(BicaError::Invalid(format!(
                    "{} exists (use --overwrite)",
                    out.display()
                )));
            }
            let seed = match seed {
                Some(s) => s,
                None => env_seed()?.unwrap_or(0),
            };
            let data = generate_dataset(
                seed,
                scenes,
                objects_min,
                objects_max,
                &SceneOptions::default(),
            )?;
            data.save(&out)?;
            println!(
                "wrote {} scenes, {} objects to {}",
                data.scenes.len(),
                data.n_objects(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            cfg,
            data,
            stage,
            out_dir,
            resume,
            force,
            checkpoint_every,
            stop_at_step,
        } => {
            let stage: Option<u32> = match stage.as_str() {
                "all" => None,
                "1" | "2" | "3" => Some(stage.parse().unwrap()),
                s => {
                    return Err(BicaError::Invalid(format!(
                        "--stage must be all, 1, 2 or 3, not {s:?}"
                    )))
                }
            };
            let data = Dataset::load(&data)?;
            let mut trainer = match &resume {
                Some(path) => {
                    let ck = Checkpoint::load(path)?;
                    let requested = cfg.apply(cfg.base()?.map_or_else(|| ck.config(), Ok)?)?;
                    ck.check_config(&requested, force)?;
                    Trainer::from_checkpoint_with(&ck, &requested, &data, threads)?
                }
                None => Trainer::new(&cfg.resolve()?, &data, threads)?,
            };
            trainer.version = VERSION.into();
            if let Some(s) = stage {
                if trainer.progress.completed_stage + 1 < s {
                    return Err(BicaError::Invalid(format!(
                        "stage {s} needs a checkpoint with stage {} completed",
                        s - 1
                    )));
                }
            }
            std::fs::create_dir_all(&out_dir)?;
            let opts = RunOptions {
                out_dir: Some(out_dir.clone()),
                checkpoint_every,
                stop_at_global_step: stop_at_step,
            };
            eprintln!(
                "config {} version {} scenes {} threads {threads}",
                trainer.cfg.hash(),
                VERSION,
                data.scenes.len()
            );
            match stage {
                None => trainer.run_all(&opts)?,
                Some(s) => trainer.run_stage(s, &opts)?,
            }
            if let Some(last) = trainer.history.last() {
                println!("{}", last.log_line());
            }
            println!(
                "completed stage {} at step {}; checkpoints in {}",
                trainer.progress.completed_stage,
                trainer.progress.global_step,
                out_dir.display()
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            nms_iou,
            beam,
            out,
            predictions,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let (model, store, vocab) = model_from_checkpoint(&ck)?;
            let data = Dataset::load(&data)?;
            check_vocab(&vocab, &data)?;
            if !(0.0..=1.0).contains(&nms_iou) {
                return Err(BicaError::Invalid(format!(
                    "--nms-iou {nms_iou} outside [0, 1]"
                )));
            }
            let beam = beam.unwrap_or(model.cfg.beam);
            eprintln!("config {} version {}", model.cfg.hash(), VERSION);
            let scenes = eval_scenes(&model, &store, &data, nms_iou, beam, threads)?;
            let report = evaluate(&scenes, nms_iou)?;
            if let Some(p) = predictions {
                std::fs::write(p, predictions_to_text(&scenes))?;
            }
            match out {
                Some(p) => std::fs::write(p, report.to_text())?,
                None => print!("{}", report.to_text()),
            }
            Ok(())
        }
        Command::Caption {
            checkpoint,
            scene_file,
            scene,
            beam,
            greedy,
            min_score,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let (model, store, vocab) = model_from_checkpoint(&ck)?;
            let data = Dataset::load(&scene_file)?;
            check_vocab(&vocab, &data)?;
            let sample = data.scenes.get(scene).ok_or_else(|| {
                BicaError::Invalid(format!(
                    "scene {scene} out of range ({} scenes in file)",
                    data.scenes.len()
                ))
            })?;
            if beam == 0 {
                return Err(BicaError::Invalid("--beam must be at least 1".into()));
            }
            let pred = predict_scene(&model, &store, sample);
            let mut out = String::new();
            for i in pred.kept(model.cfg.nms_iou) {
                let b = &pred.boxes[i];
                if b.score() <= min_score {
                    continue;
                }
                let tokens = if greedy {
                    let stepper = model.caption.stepper(&store, pred.prefix.gather_rows(&[i]));
                    greedy_decode(&stepper, model.cfg.max_len).tokens
                } else {
                    pred.caption(&model, &store, i, beam).tokens
                };
                let c = b.class_id();
                let [cx, cy, cz] = b.center;
                let [sx, sy, sz] = b.size;
                writeln!(
                    out,
                    "{:.3} {} {} center {cx:.2} {cy:.2} {cz:.2} size {sx:.2} {sy:.2} {sz:.2} | {}",
                    b.score(),
                    SIZES[size_of(c)],
                    COLORS[color_of(c)],
                    words(&vocab, &tokens).join(" ")
                )
                .unwrap();
            }
            print!("{out}");
            Ok(())
        }
        Command::Gradcheck {
            cfg,
            samples,
            scene_seed,
        } => {
            let cfg = cfg.resolve()?;
            let report = model_gradcheck(&cfg, samples, scene_seed)?;
            let worst = report
                .checks
                .iter()
                .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error));
            if let Some(w) = worst {
                println!(
                    "worst {}[{}] analytic {:.6e} numeric {:.6e}",
                    w.param, w.index, w.analytic, w.numeric
                );
            }
            let err = report.max_rel_error();
            let pass = report.passes(GRADCHECK_TOL);
            println!(
                "max_rel_error {err:.3e} over {} coordinates: {}",
                report.checks.len(),
                if pass { "PASS" } else { "FAIL" }
            );
            if pass {
                Ok(())
            } else {
                Err(BicaError::Divergence(format!(
                    "gradient check failed: {err:.3e} >= {GRADCHECK_TOL:e}"
                )))
            }
        }
        Command::Ablate {
            cfg,
            variants,
            data,
            seeds,
            out,
        } => {
            let cfg = cfg.resolve()?;
            let data = Dataset::load(&data)?;
            let variants = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants
            };
            let report = run_ablation(&cfg, &data, &variants, &seeds, threads, |r| {
                eprintln!(
                    "{} seed {}: cider@0.5 {:.4} det_ar@0.5 {:.4}",
                    r.variant.as_str(),
                    r.seed,
                    r.report.cider50(),
                    r.report.ar50
                )
            })?;
            match out {
                Some(p) => std::fs::write(p, report.to_table())?,
                None => print!("{}", report.to_table()),
            }
            Ok(())
        }
    }
}
