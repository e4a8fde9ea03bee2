use std::path::PathBuf;
use std::process::ExitCode;

use attackprint::pipeline::{verify, Pipeline, Preset, RunConfig, REPORT_METHODS};
use attackprint::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "attackprint", version, about = "Attribute adversarial examples to the attack that made them")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset the configuration starts from: desk or paper-imagenette.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Configuration override, `key.path=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (the ATTACKPRINT_OUT environment variable also sets it).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Taxo {
    /// Use the expanded taxonomy (extra PGD-L2 ε values).
    #[arg(long)]
    expanded_eps: bool,
}

impl Taxo {
    fn version(&self) -> u32 {
        if self.expanded_eps {
            2
        } else {
            1
        }
    }
}

#[derive(Args, Debug, Clone)]
struct Methods {
    /// Fingerprint method (true-delta, raw-image, jpeg-q<N>, cs); repeatable.
    #[arg(long = "method")]
    methods: Vec<String>,
}

impl Methods {
    fn or_all(&self) -> Vec<String> {
        if self.methods.is_empty() {
            REPORT_METHODS.iter().map(|m| m.to_string()).collect()
        } else {
            self.methods.clone()
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the victim classifier.
    TrainVictim,
    /// Attack the source images and store the successful records.
    Generate {
        #[command(flatten)]
        taxo: Taxo,
    },
    /// Compute fingerprints of a stored pool.
    Fingerprint {
        #[command(flatten)]
        taxo: Taxo,
        #[command(flatten)]
        methods: Methods,
    },
    /// Choose train, validation and test source images.
    BuildSplits {
        #[command(flatten)]
        taxo: Taxo,
    },
    /// Train attribution replicates.
    TrainAttributor {
        #[command(flatten)]
        taxo: Taxo,
        #[command(flatten)]
        methods: Methods,
        /// Replicates per method (default from the configuration, 4).
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Score trained attributors on the test split.
    Evaluate {
        #[command(flatten)]
        taxo: Taxo,
        #[command(flatten)]
        methods: Methods,
    },
    /// Image-quality and label-distribution analysis of a pool.
    Analyze {
        #[command(flatten)]
        taxo: Taxo,
    },
    /// Accuracy table across fingerprint methods.
    Report {
        #[command(flatten)]
        taxo: Taxo,
    },
    /// Re-hash every artifact listed in the manifest.
    Verify,
    /// Every stage in order, skipping those already recorded.
    Run {
        #[command(flatten)]
        taxo: Taxo,
        #[command(flatten)]
        methods: Methods,
        #[arg(long)]
        replicates: Option<usize>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Io { .. } | Error::InvalidInput(_) => 2,
        Error::Integrity(_) | Error::Format { .. } | Error::Json(_) => 3,
    }
}

fn load_config(cli: &Cli, replicates: Option<usize>) -> Result<RunConfig> {
    let preset = cli.preset.as_deref().map(str::parse::<Preset>).transpose()?;
    let mut overrides = cli.overrides.clone();
    if let Some(r) = replicates {
        overrides.push(format!("attribution.protocol.replicates={r}"));
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), preset, &overrides)?.with_env_out_dir();
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("--jobs: {e}")))?;
    }
    if let Command::Verify = cli.command {
        let cfg = load_config(cli, None)?;
        let n = verify(&cfg.out_dir)?;
        println!("verified {n} artifacts in {}", cfg.out_dir.display());
        return Ok(());
    }
    let replicates = match &cli.command {
        Command::TrainAttributor { replicates, .. } | Command::Run { replicates, .. } => *replicates,
        _ => None,
    };
    let mut p = Pipeline::open(load_config(cli, replicates)?)?;
    match &cli.command {
        Command::TrainVictim => {
            let acc = p.train_victim()?;
            println!("victim test accuracy {:.2}%", acc * 100.0);
        }
        Command::Generate { taxo } => {
            let n = p.generate(taxo.version())?;
            let entry = &p.manifest().stages[&format!("generate-v{}", taxo.version())];
            println!("{n} successful records; taxonomy of {} classes", entry.info["classes"]);
            for w in &entry.warnings {
                println!("warning: {w}");
            }
        }
        Command::Fingerprint { taxo, methods } => {
            for m in methods.or_all() {
                let n = p.fingerprint(taxo.version(), &m)?;
                println!("{m}: {n} fingerprints");
            }
        }
        Command::BuildSplits { taxo } => {
            let s = p.build_splits(taxo.version())?;
            println!("sources: {} train, {} val, {} test", s.train.len(), s.val.len(), s.test.len());
        }
        Command::TrainAttributor { taxo, methods, .. } => {
            for m in methods.or_all() {
                let best = p.train_attributor(taxo.version(), &m)?;
                println!("{m}: best validation accuracy per replicate {best:?}");
            }
        }
        Command::Evaluate { taxo, methods } => {
            for m in methods.or_all() {
                let s = p.evaluate(taxo.version(), &m)?;
                println!(
                    "{m}: accuracy {:.2}% ± {:.2}% over {} replicates",
                    s.mean_accuracy * 100.0,
                    s.std_accuracy * 100.0,
                    s.replicates.len()
                );
            }
        }
        Command::Analyze { taxo } => {
            let a = p.analyze(taxo.version())?;
            println!("spearman(mse, ssim) = {:.4} over {} records", a.spearman_mse_ssim, a.records);
            println!("untargeted records on their true label: {} of {}", a.untargeted_true_label_hits, a.untargeted_records);
            println!("pgd-linf / square-linf top-1 agreement: {} of {}", a.top1_agree, a.top1_compared);
        }
        Command::Report { taxo } => print!("{}", p.report(taxo.version())?.render()),
        Command::Run { taxo, methods, .. } => print!("{}", p.run(taxo.version(), &methods.or_all())?.render()),
        Command::Verify => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
