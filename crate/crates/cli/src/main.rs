use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use vesselgpt_cli::{self as cli, EvalSide, Layout, PipelineConfig};

#[derive(Parser)]
#[command(name = "vesselgpt", version, about = "Vessel-tree generation pipeline")]
struct Args {
    /// Pipeline config (TOML).
    #[arg(short, long, global = true, default_value = "vesselgpt.toml")]
    config: PathBuf,
    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the run directory.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus.
    Synth {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Normalize, trim, augment and split the corpus.
    Preprocess {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        no_augment: bool,
    },
    /// Train the VQ-VAE and tokenize the dataset.
    TrainVqvae {
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from the existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Train the transformer on the token corpus.
    TrainGpt {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        resume: bool,
    },
    /// Sample sequences and decode them to trees.
    Generate {
        #[arg(short, long)]
        n: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        beams: Option<usize>,
    },
    /// Mesh tree files to OBJ. Without `--trees`, meshes the generated and
    /// reference sets of the run.
    Mesh {
        #[arg(long, requires = "out")]
        trees: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Compare generated and reference sets.
    Evaluate {
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long)]
        generated_meshes: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        reference_meshes: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every stage in order.
    Pipeline,
    /// Print the effective configuration.
    Config,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let mut cfg = PipelineConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(d) = args.run_dir {
        cfg.run_dir = d;
    }
    std::fs::create_dir_all(&cfg.run_dir)?;
    let layout = Layout::new(&cfg);
    match args.command {
        Command::Synth { count } => {
            if let Some(c) = count {
                cfg.synth.count = c;
            }
            let s = cli::cmd_synth(&cfg)?;
            println!(
                "{} trees, {} nodes -> {}",
                s.trees,
                s.nodes,
                s.dir.display()
            );
        }
        Command::Preprocess { corpus, no_augment } => {
            if corpus.is_some() {
                cfg.paths.corpus = corpus;
            }
            cfg.data.augment &= !no_augment;
            let s = cli::cmd_preprocess(&cfg)?;
            println!(
                "loaded {} trees, skipped {}, augmented {}",
                s.loaded,
                s.skipped.len(),
                s.augmented
            );
            for (name, st) in [("train", s.train), ("val", s.val)] {
                println!(
                    "{name:<5} trees {:>5}  nodes {:>7}  markers {:>7}",
                    st.trees, st.nodes, st.markers
                );
            }
        }
        Command::TrainVqvae { epochs, resume } => {
            if let Some(e) = epochs {
                cfg.vqvae.train.max_epochs = e;
            }
            let s = cli::cmd_train_vqvae(&cfg, resume)?;
            println!(
                "{} epochs; train L1 {:.5}, topology {}/{}",
                s.epochs_done, s.train.mean_l1, s.train.topology_recovered, s.train.trees
            );
            if let Some(v) = s.val {
                println!(
                    "val L1 {:.5}, topology {}/{}",
                    v.mean_l1, v.topology_recovered, v.trees
                );
            }
        }
        Command::TrainGpt { epochs, resume } => {
            if let Some(e) = epochs {
                cfg.gpt.train.max_epochs = e;
            }
            let s = cli::cmd_train_gpt(&cfg, resume)?;
            println!(
                "{} epochs; memorized {}; train ppl {:.4}",
                s.epochs_done, s.memorized, s.train_perplexity
            );
            if let Some(p) = s.val_perplexity {
                println!("val ppl {p:.4}");
            }
        }
        Command::Generate {
            n,
            temperature,
            beams,
        } => {
            if let Some(t) = temperature {
                cfg.generate.sampler.temperature = t;
            }
            if let Some(b) = beams {
                cfg.generate.sampler.beams = b;
            }
            let r = cli::cmd_generate(&cfg, n.unwrap_or(cfg.generate.count))?;
            println!("{}/{} accepted", r.accepted, r.requested);
            for (reason, c) in &r.rejects {
                println!("  rejected {reason:?}: {c}");
            }
        }
        Command::Mesh {
            trees,
            out,
            resolution,
        } => {
            if let Some(n) = resolution {
                cfg.mesh.resolution = n;
            }
            let summaries = match (trees, out) {
                (Some(t), Some(o)) => vec![cli::cmd_mesh(&cfg, &t, &o)?],
                _ => {
                    let (g, r) = cli::cmd_mesh_all(&cfg)?;
                    vec![g, r]
                }
            };
            for s in summaries {
                println!("meshed {}, failed {}", s.meshed, s.failed);
            }
        }
        Command::Evaluate {
            generated,
            generated_meshes,
            reference,
            reference_meshes,
            out,
        } => {
            let g = EvalSide {
                trees: generated.unwrap_or_else(|| layout.generated_trees()),
                meshes: generated_meshes.unwrap_or_else(|| layout.generated_meshes()),
            };
            let r = EvalSide {
                trees: reference.unwrap_or_else(|| layout.train_trees()),
                meshes: reference_meshes.unwrap_or_else(|| layout.reference_meshes()),
            };
            let report =
                cli::cmd_evaluate(&cfg, &g, &r, &out.unwrap_or_else(|| layout.eval_dir()))?;
            print!("{}", report.to_table());
        }
        Command::Pipeline => {
            let report = cli::cmd_pipeline(&cfg)?;
            print!("{}", report.to_table());
        }
        Command::Config => print!("{}", cfg.to_toml()),
    }
    Ok(())
}
