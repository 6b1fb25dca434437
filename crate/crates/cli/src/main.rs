use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use deid_forge::commands::{cmd_deid, cmd_eval, cmd_gen_toy, cmd_train};
use deid_forge::config::{Overrides, PipelineConfig};

#[derive(Parser)]
#[command(name = "deid-forge", version, about = "Face de-identification by identity transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the shared encoder and per-donor decoders.
    Train(Common),
    /// De-identify frame directories.
    Deid(Common),
    /// Score de-identification with the paired and self protocols.
    Eval(Common),
    /// Render a synthetic face corpus.
    GenToy(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    donor: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<PipelineConfig> {
        PipelineConfig::load(
            &self.config,
            &Overrides {
                donor: self.donor.clone(),
                seed: self.seed,
                out: self.out.clone(),
            },
        )
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(c) => {
            let s = cmd_train(&c.load()?)?;
            println!("trained {} iterations -> {}", s.iterations, s.checkpoint.display());
            for (id, loss) in s.final_losses {
                println!("  {id}: {loss:.5}");
            }
        }
        Command::Deid(c) => {
            let s = cmd_deid(&c.load()?)?;
            for job in &s.manifest.jobs {
                let ok = deid_forge::commands::ok_entries(job).count();
                println!("{}: {ok}/{} frames as `{}`", job.job, job.entries.len(), job.donor);
            }
            println!("mean {:.3} s/frame", s.timings.mean_seconds);
        }
        Command::Eval(c) => {
            let r = cmd_eval(&c.load()?)?;
            println!(
                "paired: {} pairs, same {:.3} -> {:.3}, effective {:.3}, ssim {:.4} +- {:.4}",
                r.paired.n_pairs,
                r.paired.pre_deid_same_rate,
                r.paired.post_deid_same_rate,
                r.paired.effective_rate,
                r.paired.ssim_mean,
                r.paired.ssim_std
            );
            println!(
                "self:   {} images, effective {:.3}, ssim {:.4}",
                r.self_deid.n_pairs, r.self_deid.effective_rate, r.self_deid.ssim_mean
            );
        }
        Command::GenToy(c) => {
            let s = cmd_gen_toy(&c.load()?)?;
            let names: Vec<&str> = s.subjects.iter().map(|x| x.subject.as_str()).collect();
            println!("rendered {} with {} pairs", names.join(", "), s.pairs);
        }
    }
    Ok(())
}
