use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vidinsert::codec::{read_givvid, read_pnm_dir, write_givvid, write_pnm_dir, GivvidArray, Mask, Video};
use vidinsert::harness::{
    edit, eval_dirs, grad_check_suite, train_dir, AdamWConfig, Checkpoint, EditRequest, RunConfig, CONFIG_FILE,
    LOSS_FILE,
};
use vidinsert::sampler::GuidanceConfig;
use vidinsert::synth::{build_dataset, SynthConfig, MANIFEST_FILE};
use vidinsert::{Error, Result};

#[derive(Parser)]
#[command(
    name = "vidinsert",
    version,
    about = "Insert a reference subject into a video with a diffusion transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of training quintuples.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 9)]
        frames: usize,
    },
    /// Train a model on a synthetic dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print the running loss every this many steps.
        #[arg(long, default_value_t = 50)]
        log_every: u64,
    },
    /// Insert the reference subject into a condition video.
    Edit {
        #[arg(long)]
        ckpt: PathBuf,
        /// Condition video (`.givvid` file or frame directory).
        #[arg(long)]
        cond: PathBuf,
        /// Reference images; repeat for several.
        #[arg(long = "ref", num_args = 1.., required = true)]
        refs: Vec<PathBuf>,
        #[arg(long, default_value = "")]
        prompt: String,
        /// First-frame placement mask; omitted means no placement hint.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        s1: Option<f64>,
        #[arg(long)]
        s2: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output `.givvid` file, or a directory for PPM frames.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generated videos against targets.
    Eval {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// JSONL with `id` and `prompt` per line.
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and the model loss.
    GradCheck {
        #[arg(long, num_args = 1.., default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
}

fn read_array(path: &Path) -> Result<GivvidArray> {
    if path.is_dir() {
        read_pnm_dir(path)
    } else {
        read_givvid(path)
    }
}

fn read_video(path: &Path) -> Result<Video> {
    read_array(path)?.into_video(path)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            count,
            seed,
            out,
            height,
            width,
            frames,
        } => {
            let cfg = SynthConfig {
                height,
                width,
                frames,
                ..SynthConfig::default()
            };
            let manifest = build_dataset(count, seed, &out, &cfg)?;
            println!(
                "wrote {} records to {}",
                manifest.records.len(),
                out.join(MANIFEST_FILE).display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            resume,
            log_every,
        } => {
            let cfg = RunConfig::load(&config)?;
            let mut window = 0.0;
            let state = train_dir(&cfg, &data, &out, resume.as_deref(), &mut |step, loss| {
                window += loss;
                if log_every > 0 && step % log_every == 0 {
                    eprintln!("step {step:>6}  loss {:.6}", window / log_every as f64);
                    window = 0.0;
                }
            })?;
            println!(
                "trained {} steps, last loss {:.6}, best {:.6}; wrote {} and {}",
                state.step,
                state.last_loss,
                state.best_loss,
                out.join(LOSS_FILE).display(),
                out.join(CONFIG_FILE).display()
            );
        }
        Command::Edit {
            ckpt,
            cond,
            refs,
            prompt,
            mask,
            s1,
            s2,
            steps,
            seed,
            out,
        } => {
            let checkpoint = Checkpoint::load(&ckpt, AdamWConfig::default())?;
            let defaults = GuidanceConfig::default();
            let mask = match mask {
                Some(p) => {
                    let m = read_array(&p)?.into_mask(&p)?;
                    Some(Mask::new(1, m.height(), m.width(), m.frame(0).to_vec())?)
                }
                None => None,
            };
            let req = EditRequest {
                cond: read_video(&cond)?,
                refs: refs.iter().map(|p| read_video(p)).collect::<Result<_>>()?,
                prompt,
                mask,
                guidance: GuidanceConfig {
                    s1: s1.unwrap_or(defaults.s1),
                    s2: s2.unwrap_or(defaults.s2),
                    steps: steps.unwrap_or(defaults.steps),
                },
                seed,
            };
            let video = edit(&checkpoint, &req)?;
            let array = GivvidArray::from(&video);
            if out.extension().is_some_and(|e| e == "givvid") {
                write_givvid(&out, &array)?;
            } else {
                write_pnm_dir(&out, &array)?;
            }
            println!("wrote {}", out.display());
        }
        Command::Eval {
            gen,
            target,
            prompts,
            out,
        } => {
            let report = eval_dirs(&gen, &target, &prompts, out.as_deref())?;
            println!("{}", report.to_json_line());
            print!("{}", report.table());
        }
        Command::GradCheck { seeds } => {
            let results = grad_check_suite(&seeds)?;
            let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
            for r in &results {
                println!(
                    "{:<width$}  seed {}  rel.err {:.3e}  tol {:.0e}  {}",
                    r.name,
                    r.seed,
                    r.error,
                    r.tolerance,
                    if r.passed() { "ok" } else { "FAILED" }
                );
            }
            let failed = results.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                return Err(Error::Contract {
                    op: "grad-check",
                    detail: format!("{failed} of {} checks exceeded tolerance", results.len()),
                });
            }
            println!("all {} checks passed", results.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
