//! `dyngate` command-line entry point.

mod config;
mod report;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dyngate_core::checkpoint::Checkpoint;
use dyngate_core::data::{self, DomainDataset, DomainSpec, Manifest, ManifestEntry, Split};
use dyngate_core::gate::{GateSampler, GateSampling};
use dyngate_core::net::ForwardOptions;
use dyngate_core::train::{self, TrainData};
use dyngate_core::verify::{self, VerifyOptions};
use dyngate_core::{Error, Result};

use config::RunConfig;

const SEED_ENV: &str = "DYNGATE_SEED";

#[derive(Parser)]
#[command(name = "dyngate", version, about = "Prompt-conditioned dynamic gating for small CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic domain datasets and a manifest.
    GenData(GenDataArgs),
    /// Train one variant and write checkpoint.bin, metrics.csv and val.dyn.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset file.
    Eval(EvalArgs),
    /// Compare runs from their metrics.csv files.
    Report(ReportArgs),
    /// Run the gradient and invariant oracle battery.
    Gradcheck(GradcheckArgs),
    /// Print the resolved run configuration with every default filled in.
    Config(ConfigArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated domains; `name:preset` renders `name` with another preset.
    /// The first domain is the training source.
    #[arg(long, default_value = "photo,sketch,cartoon,art")]
    domains: String,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 400)]
    per_domain: usize,
    /// Falls back to DYNGATE_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ConfigSource {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// base, dynamic, normal or slot.
    #[arg(long)]
    variant: Option<String>,
    /// Precedence: this flag, the config file, DYNGATE_SEED, 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Write the eval-mode masks of one sample, one line per layer.
    #[arg(long)]
    dump_masks: Option<PathBuf>,
    #[arg(long, default_value_t = 0, requires = "dump_masks")]
    sample: usize,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    metrics: Vec<PathBuf>,
    /// Output directory for comparison.csv, curves.csv and curves.gp.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Falls back to DYNGATE_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = verify::DEFAULT_SEEDS)]
    seeds: usize,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct ConfigArgs {
    #[command(flatten)]
    source: ConfigSource,
}

enum Failure {
    Core(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Validation(format!("{SEED_ENV}='{v}' is not a seed"))),
        Err(_) => Ok(None),
    }
}

fn flag_or_env_seed(flag: Option<u64>) -> Result<u64> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    })
}

fn resolve_config(source: &ConfigSource) -> Result<RunConfig> {
    let mut cfg = match &source.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cwd = std::env::current_dir()?;
    for s in &source.sets {
        cfg.set_dotted(s, &cwd)?;
    }
    Ok(cfg)
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let seed = flag_or_env_seed(a.seed)?;
    let mut specs = Vec::new();
    let mut names = BTreeSet::new();
    for item in a.domains.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let spec = match item.split_once(':') {
            Some((name, preset)) => DomainSpec {
                name: name.trim().to_string(),
                preset: data::Preset::parse(preset.trim())?,
            },
            None => DomainSpec::preset(item)?,
        };
        if !names.insert(spec.name.clone()) {
            return Err(Error::Validation(format!("domain '{}' listed twice", spec.name)));
        }
        specs.push(spec);
    }
    if specs.is_empty() {
        return Err(Error::Validation("no domains given".into()));
    }
    let sets = specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let split = if i == 0 { Split::Train } else { Split::Test };
            data::generate(spec, a.classes, a.per_domain, seed, split)
        })
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(&a.out)?;
    let mut manifest = Manifest::default();
    for ds in &sets {
        let path = a.out.join(format!("{}.dyn", ds.domain));
        ds.save(&path)?;
        let counts = ds.class_counts().iter().map(|c| c.to_string()).collect::<Vec<_>>().join("/");
        println!("{} ({}): {} samples, per class {counts} -> {}", ds.domain, ds.split, ds.len(), path.display());
        manifest.entries.push(ManifestEntry { role: ds.split, path });
    }
    let mpath = a.out.join("manifest.txt");
    std::fs::write(&mpath, manifest.render(&a.out))?;
    println!("manifest -> {}", mpath.display());
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.source)?;
    if let Some(v) = &a.variant {
        cfg.network.set("variant", v)?;
    }
    if let Some(m) = &a.manifest {
        cfg.data.manifest = Some(m.clone());
    }
    cfg.train.seed = match (a.seed, cfg.seed_set) {
        (Some(s), _) => s,
        (None, true) => cfg.train.seed,
        (None, false) => env_seed()?.unwrap_or(0),
    };
    cfg.validate()?;
    let mpath = cfg
        .data
        .manifest
        .clone()
        .ok_or_else(|| Error::Validation("no manifest: pass --manifest or set data.manifest".into()))?;
    let manifest = Manifest::load(&mpath)?;
    let data = TrainData::from_manifest(&manifest, cfg.train.val_fraction)?;
    let prompts = cfg.data.prompt_bank(&cfg.network)?;
    let quiet = a.quiet;
    let outcome = train::train(&cfg.network, &cfg.train, &data, &prompts, &mut |r| {
        if !quiet {
            println!(
                "epoch {:>3} p={:.4} loss={:.4} bound={:.4}/{:.4} train_acc={:.4} val_acc={:.4} unseen_acc={:.4} mac_ratio={:.4}",
                r.epoch,
                r.p,
                r.total_loss,
                r.bound_low,
                r.bound_up,
                r.train_accuracy,
                r.val_accuracy,
                r.unseen_accuracy(),
                r.mac_ratio
            );
        }
    })?;
    outcome.write(&a.out_dir)?;
    let mut resolved = cfg.clone();
    resolved.data.manifest = Some(mpath);
    std::fs::write(a.out_dir.join("config.txt"), resolved.render())?;
    let best = outcome.best_row();
    println!(
        "best epoch {} val_acc={:.6} unseen_acc={:.6} mac_ratio={:.6} -> {}",
        best.epoch,
        best.val_accuracy,
        best.unseen_accuracy(),
        best.mac_ratio,
        a.out_dir.display()
    );
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let net = ckpt.network()?;
    let ds = DomainDataset::load(&a.dataset)?;
    let r = train::evaluate(&net, &ds, &ckpt.prompts)?;
    println!(
        "checkpoint: variant {} epoch {} recorded val_acc {:.6}",
        net.config().variant.name(),
        ckpt.state.epoch,
        ckpt.state.val_accuracy
    );
    println!("dataset: {} ({}, {} samples)", ds.domain, ds.split, ds.len());
    println!("accuracy: {:.6} ({}/{})", r.accuracy, r.correct, r.total);
    if !r.layers.is_empty() {
        println!("layer density_c density_s");
        for l in &r.layers {
            println!("{} {:.6} {:.6}", l.name, l.channel, l.spatial);
        }
    }
    println!("mac_ratio: {:.6}", r.mac_ratio());
    if let Some(path) = &a.dump_masks {
        if a.sample >= ds.len() {
            return Err(Error::Validation(format!("sample {} ≥ dataset size {}", a.sample, ds.len())));
        }
        let (x, _) = ds.batch(&[a.sample])?;
        let prompt = ckpt.prompts.resolve(&ds.domain)?;
        let cfg = net.config();
        let mut sampler = GateSampler::new(GateSampling::Eval, cfg.temperature, cfg.threshold);
        let out = net.infer(&x, &prompt, &mut sampler, &ForwardOptions::eval())?;
        let masks = out.sample_masks(0, cfg.threshold)?;
        let mut text = String::new();
        for (name, pair) in cfg.block_names().iter().zip(masks.chunks(2)) {
            for m in pair {
                writeln!(text, "{name} {m}").unwrap();
            }
        }
        std::fs::write(path, text)?;
        println!("masks of sample {} -> {}", a.sample, path.display());
    }
    Ok(())
}

fn run_report(a: &ReportArgs) -> Result<()> {
    let labels = report::labels(&a.metrics);
    let runs = a
        .metrics
        .iter()
        .zip(&labels)
        .map(|(p, l)| {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Validation(format!("cannot read {}: {e}", p.display())))?;
            report::Run::parse(l, &text).map_err(|e| Error::Validation(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(&a.out)?;
    let comparison = report::comparison_csv(&runs);
    std::fs::write(a.out.join("comparison.csv"), &comparison)?;
    std::fs::write(a.out.join("curves.csv"), report::curves_csv(&runs))?;
    std::fs::write(a.out.join("curves.gp"), report::gnuplot_script(&runs))?;
    print!("{comparison}");
    println!("wrote comparison.csv, curves.csv, curves.gp -> {}", a.out.display());
    Ok(())
}

fn run_gradcheck(a: &GradcheckArgs) -> std::result::Result<(), Failure> {
    let opts = VerifyOptions {
        seed: flag_or_env_seed(a.seed)?,
        seeds: a.seeds,
        inject_fault: a.inject_fault,
        ..Default::default()
    };
    let report = verify::run(&opts)?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().iter().map(|c| c.name).collect();
        Err(Failure::Verification(format!("failing checks: {}", names.join(", "))))
    }
}

fn dispatch(cli: &Cli) -> std::result::Result<(), Failure> {
    match &cli.command {
        Command::GenData(a) => gen_data(a)?,
        Command::Train(a) => run_train(a)?,
        Command::Eval(a) => run_eval(a)?,
        Command::Report(a) => run_report(a)?,
        Command::Gradcheck(a) => run_gradcheck(a)?,
        Command::Config(a) => print!("{}", resolve_config(&a.source)?.render()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Divergence { .. } => 3,
                Error::Oracle(_) => 1,
                _ => 2,
            })
        }
    }
}
