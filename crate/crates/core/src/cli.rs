//! Command-line entry points.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::analysis::{convergence_grid, monotonicity_report};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{preset, RunConfig};
use crate::cost::{flops_estimate, savings, CostReport, CostSettings, TargetPass};
use crate::engine::Trainer;
use crate::error::{Error, Result};
use crate::masking::keep_count;
use crate::metrics::{read_metrics, MetricsWriter};
use crate::readout::{train_and_eval_readout, ReadoutBudget, ReadoutReport, ReadoutTask};
use crate::schedule::FreezeSchedule;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "layerlock", version, about = "Progressive layer freezing for video masked autoencoding")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a run and write metrics plus checkpoints under --out.
    Train {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "LAYERLOCK_SEED")]
        seed: Option<u64>,
        /// Overrides both the run length and the learning-rate horizon.
        #[arg(long)]
        steps: Option<u64>,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the layer/freeze-step convergence grid and write it as CSV.
    AnalyzeConvergence {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        layers: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        freeze_steps: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "LAYERLOCK_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, default_value_t = 1000)]
        window: usize,
        /// Tolerance of the monotonicity report, in percentage points.
        #[arg(long, default_value_t = 2.0)]
        tolerance: f64,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Analytic FLOPs and memory series of a schedule against no freezing.
    EstimateCost {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        /// `start,interval,jump,max_frozen`; defaults to the config's schedule.
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = PassArg::PixelOnly)]
        target_pass: PassArg,
        #[arg(long, default_value_t = 4)]
        bytes_per_value: usize,
    },
    /// Sweep cross-attention readouts over a checkpoint's frozen features.
    EvalReadout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        train_clips: usize,
        #[arg(long, default_value_t = 128)]
        test_clips: usize,
        #[arg(long, default_value_t = 2000)]
        readout_steps: u64,
        #[arg(long, env = "LAYERLOCK_SEED")]
        seed: Option<u64>,
        /// Train on shuffled labels (control arm).
        #[arg(long)]
        shuffle_labels: bool,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PassArg {
    PixelOnly,
    Truncated,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TaskArg {
    Classify,
    Dense,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Io(_) | Error::Integrity(_) => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

/// Resolved config plus the verbatim text to echo (the file's bytes, or the
/// preset rendered as JSON).
fn resolve(config: &Option<PathBuf>, name: &Option<String>) -> Result<(RunConfig, String)> {
    match (config, name) {
        (Some(p), _) => {
            let text = fs::read_to_string(p)?;
            Ok((RunConfig::from_json(&text)?, text))
        }
        (None, Some(n)) => {
            let c = preset(n)?;
            let text = c.to_json()?;
            Ok((c, text))
        }
        (None, None) => Err(Error::config("config", "pass --config PATH or --preset NAME")),
    }
}

fn apply_overrides(cfg: &mut RunConfig, seed: Option<u64>, steps: Option<u64>) -> Result<()> {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = steps {
        cfg.steps = n;
        cfg.optim.total_steps = n;
    }
    cfg.validate()
}

fn echo_config(out: &Path, verbatim: &str, resolved: &RunConfig) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), verbatim)?;
    fs::write(out.join("resolved_config.json"), resolved.to_json()?)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, preset, out, seed, steps, resume } => train(config, preset, out, seed, steps, resume),
        Command::AnalyzeConvergence { config, preset, layers, freeze_steps, out, seed, steps, window, tolerance, jobs } => {
            let (mut cfg, text) = resolve(&config, &preset)?;
            apply_overrides(&mut cfg, seed, steps)?;
            echo_config(&out, &text, &cfg)?;
            let grid = convergence_grid(&cfg, &layers, &freeze_steps, cfg.steps, window, jobs)?;
            grid.save_csv(&out.join("convergence_grid.csv"))?;
            let report = monotonicity_report(std::slice::from_ref(&grid), &layers, &freeze_steps, tolerance)?;
            fs::write(out.join("monotonicity.json"), serde_json::to_string_pretty(&report)?)?;
            println!("base loss {:.6}; {} ordering breaks, {} beyond {tolerance} points", grid.base_loss, report.violations.len(), report.beyond_tolerance().len());
            Ok(())
        }
        Command::EstimateCost { config, preset, schedule, steps, out, target_pass, bytes_per_value } => {
            let (mut cfg, _) = resolve(&config, &preset)?;
            apply_overrides(&mut cfg, None, steps)?;
            let sched = match schedule {
                Some(s) => parse_schedule(&s)?,
                None => cfg.effective_schedule(),
            };
            sched.validate(cfg.model.encoder_depth())?;
            let settings = CostSettings {
                bytes_per_value,
                target_pass: match target_pass {
                    PassArg::PixelOnly => TargetPass::PixelOnly,
                    PassArg::Truncated => TargetPass::Truncated,
                },
                ..CostSettings::new(cfg.data.batch_size, keep_count(cfg.model.n_tokens(), cfg.mask.mask_ratio))
            };
            let frozen = flops_estimate(&cfg.model, &sched, &settings, cfg.steps);
            let base = flops_estimate(&cfg.model, &FreezeSchedule::disabled(), &settings, cfg.steps);
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            let mut f = std::io::BufWriter::new(fs::File::create(&out)?);
            write_cost_csv(&mut f, &frozen, &base)?;
            f.flush()?;
            let peak = 1.0 - frozen.max_memory() / base.max_memory();
            let final_mem = 1.0 - frozen.peak_memory.last().unwrap_or(&0.0) / base.peak_memory.last().unwrap_or(&1.0);
            println!(
                "cumulative FLOPs savings {:.6}%; final-step memory savings {:.6}%; peak memory savings {:.6}%",
                100.0 * savings(&frozen, &base),
                100.0 * final_mem,
                100.0 * peak
            );
            Ok(())
        }
        Command::EvalReadout { checkpoint, task, out, train_clips, test_clips, readout_steps, seed, shuffle_labels, jobs } => {
            if !checkpoint.join(crate::checkpoint::MANIFEST_FILE).exists() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("no checkpoint at {}", checkpoint.display()),
                )));
            }
            let trainer = load_checkpoint(&checkpoint)?;
            let mut budget = ReadoutBudget { train_clips, test_clips, shuffle_labels, jobs, ..ReadoutBudget::default() };
            budget.readout.steps = readout_steps;
            if let Some(s) = seed {
                budget.seed = s;
            }
            let task = match task {
                TaskArg::Classify => ReadoutTask::Classify,
                TaskArg::Dense => ReadoutTask::Dense,
            };
            let report = train_and_eval_readout(trainer.backbone(), &trainer.state.params, task, &budget)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            let mut f = std::io::BufWriter::new(fs::File::create(&out)?);
            write_readout_csv(&mut f, &report)?;
            f.flush()?;
            println!(
                "best {}: {:.6} at lr {} depth fraction {} (layer {})",
                task, report.best.metric, report.best.lr, report.best.depth_fraction, report.best.layer
            );
            Ok(())
        }
    }
}

fn train(config: Option<PathBuf>, name: Option<String>, out: PathBuf, seed: Option<u64>, steps: Option<u64>, resume: Option<PathBuf>) -> Result<()> {
    let mut trainer = match &resume {
        Some(dir) => {
            let mut t = load_checkpoint(dir)?;
            if let Some(n) = steps {
                let mut cfg = t.cfg().clone();
                apply_overrides(&mut cfg, None, Some(n))?;
                t = Trainer::with_state(cfg, t.state)?;
            }
            fs::create_dir_all(&out)?;
            t
        }
        None => {
            let (mut cfg, text) = resolve(&config, &name)?;
            apply_overrides(&mut cfg, seed, steps)?;
            echo_config(&out, &text, &cfg)?;
            Trainer::new(cfg)?
        }
    };
    let metrics_path = out.join("metrics.jsonl");
    let mut writer = if resume.is_some() && metrics_path.exists() {
        let start = trainer.state.step;
        let kept: Vec<_> = read_metrics(&metrics_path)?.into_iter().filter(|r| r.step < start).collect();
        let mut w = MetricsWriter::create(&metrics_path)?;
        for r in &kept {
            w.write(r)?;
        }
        w
    } else if resume.is_some() {
        MetricsWriter::append(&metrics_path)?
    } else {
        MetricsWriter::create(&metrics_path)?
    };
    let total = trainer.cfg().steps;
    let every = trainer.cfg().checkpoint_every;
    let ckpt_root = out.join("checkpoints");
    while trainer.state.step < total {
        let rec = trainer.train_step()?;
        writer.write(&rec)?;
        let done = trainer.state.step;
        if every > 0 && done % every == 0 && done < total {
            writer.flush()?;
            save_checkpoint(&trainer, &ckpt_root.join(format!("step_{done:08}")))?;
        }
    }
    writer.flush()?;
    save_checkpoint(&trainer, &ckpt_root.join("final"))?;
    Ok(())
}

/// Parses `start,interval,jump,max_frozen`.
pub fn parse_schedule(s: &str) -> Result<FreezeSchedule> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(Error::config("schedule", "expected start,interval,jump,max_frozen"));
    }
    let num = |i: usize| -> Result<u64> { parts[i].parse().map_err(|_| Error::config("schedule", format!("`{}` is not an integer", parts[i]))) };
    Ok(FreezeSchedule::new(num(0)?, num(1)?, num(2)? as usize, num(3)? as usize))
}

/// One row per step: the frozen run's series, the unfrozen baseline's and
/// an event marker.
pub fn write_cost_csv(w: &mut impl Write, frozen: &CostReport, base: &CostReport) -> Result<()> {
    writeln!(w, "step,frozen_prefix,forward,backward,target,total,cumulative,memory_bytes,baseline_total,baseline_cumulative,baseline_memory_bytes,event")?;
    for (i, (c, b)) in frozen.per_step.iter().zip(&base.per_step).enumerate() {
        let event = frozen.events.contains(&(i as u64));
        writeln!(
            w,
            "{i},{},{},{},{},{},{},{},{},{},{},{}",
            c.frozen,
            c.forward,
            c.backward,
            c.target,
            c.total,
            frozen.cumulative[i],
            c.memory_bytes,
            b.total,
            base.cumulative[i],
            b.memory_bytes,
            u8::from(event)
        )?;
    }
    Ok(())
}

pub fn write_readout_csv(w: &mut impl Write, report: &ReadoutReport) -> Result<()> {
    writeln!(w, "task,lr,depth_fraction,layer,metric,best")?;
    for r in &report.rows {
        let best = r == &report.best;
        writeln!(w, "{},{},{},{},{},{}", report.task, r.lr, r.depth_fraction, r.layer, r.metric, u8::from(best))?;
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
