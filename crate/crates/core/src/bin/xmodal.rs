use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xmodal::config::RunConfig;
use xmodal::data::Dataset;
use xmodal::eval::{evaluate, Direction, GalleryMode};
use xmodal::network::{checkpoint, Mtmfe};
use xmodal::{diagnostics, train, Error};

#[derive(Parser)]
#[command(name = "xmodal", about = "Cross-modality person matching on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` configuration file; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct Protocol {
    /// single or multi.
    #[arg(long)]
    mode: Option<String>,
    /// ir2rgb or rgb2ir.
    #[arg(long)]
    direction: Option<String>,
    /// Gallery images per identity in multi-shot mode.
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    redraws: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write it to `<out>/dataset.xmds`.
    GenData(Common),
    /// Train, checkpoint every epoch and evaluate on held-out images.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        protocol: Protocol,
    },
    /// Evaluate a checkpoint on the held-out images.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        protocol: Protocol,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset container from `gen-data`; regenerated from the config otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference audit of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        cases: usize,
    },
    /// Run the ablation matrix over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        protocol: Protocol,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

fn load_config(common: &Common, protocol: Option<&Protocol>) -> xmodal::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.eval.seed = seed;
    }
    if let Some(p) = protocol {
        if let Some(m) = &p.mode {
            cfg.eval.mode = GalleryMode::from_str(m)?;
        }
        if let Some(d) = &p.direction {
            cfg.eval.direction = Direction::from_str(d)?;
        }
        if let Some(s) = p.shots {
            cfg.eval.shots = s;
        }
        if let Some(r) = p.redraws {
            cfg.eval.redraws = r;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> xmodal::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(std::fs::write(path, text)?)
}

enum Failure {
    Error(Error),
    Acceptance(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData(common) => {
            let mut cfg = load_config(&common, None)?;
            if let Some(seed) = common.seed {
                cfg.data.seed = seed;
            }
            let data = Dataset::generate(&cfg.data)?;
            let path = common.out.join("dataset.xmds");
            std::fs::create_dir_all(&common.out).map_err(Error::from)?;
            data.save(&path)?;
            write(&common.out.join("config.txt"), &cfg.to_kv())?;
            println!("wrote {} samples to {}", data.len(), path.display());
        }
        Command::Train { common, protocol } => {
            let cfg = load_config(&common, Some(&protocol))?;
            print!("{}", cfg.to_kv());
            let out = train::run(&cfg, Some(&common.out))?;
            for log in &out.curve {
                println!("epoch {:>3}  loss {:.6}", log.epoch, log.mean_loss);
            }
            println!("{}", out.result.to_json()?);
        }
        Command::Eval {
            common,
            protocol,
            checkpoint: ckpt,
            data,
        } => {
            let cfg = load_config(&common, Some(&protocol))?;
            let dataset = match data {
                Some(path) => Dataset::load(&path)?,
                None => Dataset::generate(&cfg.data)?,
            };
            let (_, test) = dataset.split(cfg.train_per_identity)?;
            let net = Mtmfe::new(cfg.model.clone(), cfg.ablation)?;
            // every tensor is overwritten by the checkpoint
            let mut store = net.init_params(&mut ChaCha8Rng::seed_from_u64(0));
            checkpoint::load_into(&mut store, &ckpt)?;
            let result = evaluate(&net, &store, &test, &cfg.eval, None)?;
            let json = result.to_json()?;
            write(&common.out.join("eval.json"), &json)?;
            write(&common.out.join("cmc.csv"), &result.to_csv())?;
            println!("{json}");
        }
        Command::Gradcheck { seed, cases } => {
            let report = diagnostics::run(seed, cases, 6)?;
            for op in &report.ops {
                println!("{:<24} {:>3} cases  max rel err {:.3e}", op.op, op.cases, op.max_rel_err);
            }
            println!("network                   max rel err {:.3e}", report.network_max());
            println!("elapsed {:.2}s", report.elapsed.as_secs_f64());
            if report.op_max() > 1e-4 || report.network_max() > 1e-3 {
                return Err(Failure::Acceptance(format!(
                    "gradient mismatch: ops {:.3e}, network {:.3e}",
                    report.op_max(),
                    report.network_max()
                )));
            }
        }
        Command::Ablate {
            common,
            protocol,
            seeds,
        } => {
            let cfg = load_config(&common, Some(&protocol))?;
            let seeds: Vec<u64> = (0..seeds).map(|s| cfg.seed + s).collect();
            let rows = train::run_ablation(&cfg, &train::ablation_variants(), &seeds, |name, seed, out| {
                eprintln!("{name:<9} seed {seed}: rank-1 {:.4}  mAP {:.4}", out.rank1(), out.result.map);
            })?;
            let table = train::ablation_table(&rows);
            print!("{table}");
            write(&common.out.join("ablation.txt"), &table)?;
            write(
                &common.out.join("ablation.json"),
                &serde_json::to_string_pretty(&rows).map_err(Error::from)?,
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Acceptance(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(4)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::UnknownKey(_) | Error::InvalidValue { .. } => 2,
                Error::NonFinite(_) => 3,
                _ => 1,
            })
        }
    }
}
