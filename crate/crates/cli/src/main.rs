//! `progmem` command-line driver.
//!
//! Every subcommand prints its result to stdout. Failures print a single
//! line `error code=<code> message=<json string>` to stderr and exit with
//! status 1 (2 for unparsable arguments).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use progmem::config::RunConfig;
use progmem::data::{write_synthetic, DatasetDir, DomainSource, DomainSpec, LabelSet, SynthSuite};
use progmem::error::{Error, Result};
use progmem::ida::{
    accuracy, load_checkpoint, run_schedule, DomainSchedule, IdaMethod, IdaRun, ScheduleEntry,
};
use progmem::layers::CellKind;
use progmem::model::grad_check_model;
use progmem::report::{load_runs, report_matrix, Format, Pairing, ReportOptions, RUN_SUFFIX};
use progmem::theory::{verify_theorem, AttentionMode, QueryMode, SimulationConfig};

#[derive(Parser)]
#[command(
    name = "progmem",
    version,
    about = "Progressive memory banks for incremental domain adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-domain dataset.
    GenData {
        /// JSON suite description or list of domain specs; defaults to the built-in suite.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the first domain from scratch and save a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Domain to train on; defaults to the first domain directory.
        #[arg(long)]
        domain: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an incremental schedule, evaluating every domain after each stage.
    Ida {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated domains in training order.
        #[arg(long, value_delimiter = ',')]
        schedule: Option<Vec<String>>,
        #[arg(long)]
        method: Option<String>,
        /// Slots added per later domain.
        #[arg(long)]
        slots: Option<usize>,
        /// Dataset directory; without one the synthetic suite from the config is generated in memory.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Test accuracy of a checkpoint on every domain in a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        domains: Option<Vec<String>>,
        /// Accepted like everywhere else; evaluation draws no random numbers.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Monte Carlo check of the memory-versus-state expansion bound.
    VerifyTheorem {
        #[arg(long = "D", default_value_t = 8)]
        state_dim: usize,
        #[arg(long = "d", default_value_t = 4)]
        expand_dim: usize,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long = "N", default_value_t = 8)]
        old_slots: usize,
        #[arg(long = "M", default_value_t = 2)]
        new_slots: usize,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Mode::Sampled)]
        attention_mode: Mode,
        /// Unnormalized weights for `--attention-mode fixed`, N + M values.
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        #[arg(long, value_enum, default_value_t = Query::Resample)]
        query: Query,
        /// Print the JSON report instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Gradient check of the full memory-augmented classifier.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Cell::Lstm)]
        cell: Cell,
    },
    /// Render accuracy matrices and method comparisons for saved runs.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, default_value = "markdown")]
        format: String,
        #[arg(long, value_enum, default_value_t = PairingArg::Bootstrap)]
        pairing: PairingArg,
        /// Reference method for comparisons.
        #[arg(long)]
        reference: Option<String>,
        /// Bootstrap seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Sampled,
    Conditioned,
    Fixed,
}

#[derive(Clone, Copy, ValueEnum)]
enum Query {
    Resample,
    Fixed,
}

#[derive(Clone, Copy, ValueEnum)]
enum Cell {
    Lstm,
    Gru,
    Vanilla,
}

#[derive(Clone, Copy, ValueEnum)]
enum PairingArg {
    Bootstrap,
    Seeds,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn gen_data(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut specs: Vec<DomainSpec> = match spec {
        None => SynthSuite::default().specs(),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            match serde_json::from_str::<Vec<DomainSpec>>(&text) {
                Ok(specs) => specs,
                Err(_) => {
                    let mut suite: SynthSuite = serde_json::from_str(&text)?;
                    if let Some(s) = seed {
                        suite.seed = s;
                    }
                    suite.specs()
                }
            }
        }
    };
    if spec.is_none() {
        if let Some(s) = seed {
            specs = SynthSuite {
                seed: s,
                ..SynthSuite::default()
            }
            .specs();
        }
    }
    std::fs::create_dir_all(out)?;
    let manifest = write_synthetic(&specs, out)?;
    print_json(&serde_json::json!({
        "out": out,
        "domains": manifest.specs.iter().map(|s| &s.name).collect::<Vec<_>>(),
        "files": manifest.files,
    }))
}

fn train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    domain: Option<String>,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let source = DatasetDir::new(data);
    let domain = match domain {
        Some(d) => d,
        None => source.domains()?.into_iter().next().ok_or_else(|| {
            Error::InvalidArgument(format!("no domains under {}", data.display()))
        })?,
    };
    let entry = ScheduleEntry {
        domain: domain.clone(),
        method: "finetune_only".parse()?,
        slots: cfg.model.memory_slots,
        epochs: None,
        patience: None,
    };
    let run = IdaRun::start(&cfg, &entry, &source, false)?;
    run.checkpoint().save(out)?;
    let test = run.evaluate(std::slice::from_ref(&domain), &source)?[0];
    print_json(&serde_json::json!({
        "domain": domain,
        "checkpoint": out,
        "params": run.model.param_count(),
        "valid_accuracy": run.outcomes[0].best_valid_accuracy,
        "test_accuracy": test,
        "epochs": run.outcomes[0].epochs_run,
    }))
}

fn ida(
    config: Option<&Path>,
    domains: Option<Vec<String>>,
    method: Option<String>,
    slots: Option<usize>,
    data: Option<PathBuf>,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let data_dir = data.or_else(|| cfg.data_dir.clone());
    let synthetic;
    let dir_source;
    let source: &dyn DomainSource = match &data_dir {
        Some(d) => {
            dir_source = DatasetDir::new(d);
            &dir_source
        }
        None => {
            let mut suite = cfg.synth.clone();
            suite.seed = cfg.seed;
            synthetic = progmem::data::gen_synthetic(&suite.specs())?;
            &synthetic
        }
    };
    let method_given = method.is_some() || cfg.method.is_some();
    let schedule = match (
        &cfg.schedule,
        domains.is_some() || method_given || slots.is_some(),
    ) {
        (Some(entries), false) => DomainSchedule {
            entries: entries.clone(),
        },
        _ => {
            let method: IdaMethod = method
                .or_else(|| cfg.method.clone())
                .unwrap_or_else(|| "mem_expand+vocab".into())
                .parse()?;
            let domains = match domains {
                Some(d) => d,
                None => match (&cfg.schedule, &data_dir) {
                    (Some(entries), _) => entries.iter().map(|e| e.domain.clone()).collect(),
                    (None, Some(d)) => DatasetDir::new(d).domains()?,
                    (None, None) => cfg.synth.domains.clone(),
                },
            };
            let increment = slots.or(cfg.slots).unwrap_or(cfg.model.memory_slots);
            DomainSchedule::uniform(&domains, method, cfg.model.memory_slots, increment)
        }
    };
    std::fs::create_dir_all(out)?;
    let result = run_schedule(&schedule, source, &cfg, Some(out))?;
    let record = &result.record;
    record.save(&out.join(format!("{}{RUN_SUFFIX}", record.run_id)))?;
    cfg.save(&out.join("config.json"))?;
    print!(
        "{}",
        report_matrix(std::slice::from_ref(record), &ReportOptions::default())?
    );
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, domains: Option<Vec<String>>) -> Result<()> {
    let model = load_checkpoint(ckpt)?;
    let source = DatasetDir::new(data);
    let domains = match domains {
        Some(d) => d,
        None => source.domains()?,
    };
    let labels = LabelSet::default();
    let mut out = serde_json::Map::new();
    for d in &domains {
        let test = progmem::data::encode_examples(&source.test(d)?, &model.vocab, &labels)?;
        out.insert(d.clone(), accuracy(&model, &test)?.into());
    }
    print_json(&out)
}

#[allow(clippy::too_many_arguments)]
fn theorem(
    state_dim: usize,
    expand_dim: usize,
    sigma: f64,
    old_slots: usize,
    new_slots: usize,
    trials: usize,
    seed: u64,
    mode: Mode,
    weights: Option<Vec<f64>>,
    query: Query,
    json: bool,
) -> Result<()> {
    let attention = match (mode, weights) {
        (Mode::Sampled, _) => AttentionMode::Sampled,
        (Mode::Conditioned, _) => AttentionMode::SampledConditioned,
        (Mode::Fixed, Some(w)) => AttentionMode::Fixed(w),
        (Mode::Fixed, None) => {
            return Err(Error::InvalidArgument(
                "--attention-mode fixed needs --weights".into(),
            ));
        }
    };
    let cfg = SimulationConfig {
        state_dim,
        expand_dim,
        sigma,
        old_slots,
        new_slots,
        trials,
        seed,
        attention,
        query: match query {
            Query::Resample => QueryMode::Resample,
            Query::Fixed => QueryMode::Fixed,
        },
    };
    let report = verify_theorem(&cfg)?;
    if json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.table());
    }
    Ok(())
}

fn gradcheck(seed: u64, cell: Cell) -> Result<()> {
    let kind = match cell {
        Cell::Lstm => CellKind::Lstm,
        Cell::Gru => CellKind::Gru,
        Cell::Vanilla => CellKind::Vanilla,
    };
    let report = grad_check_model(kind, &mut ChaCha8Rng::seed_from_u64(seed))?;
    for p in &report.params {
        println!(
            "{:<28} checked {:>5}  max rel err {:.3e}",
            p.name, p.checked, p.max_rel_error
        );
    }
    println!("max relative error {:.3e}", report.max_rel_error());
    Ok(())
}

fn report(
    runs: &Path,
    format: &str,
    pairing: PairingArg,
    reference: Option<String>,
    seed: u64,
) -> Result<()> {
    let records = load_runs(runs)?;
    let opts = ReportOptions {
        format: format.parse::<Format>()?,
        pairing: match pairing {
            PairingArg::Bootstrap => Pairing::Bootstrap,
            PairingArg::Seeds => Pairing::AcrossSeeds,
        },
        reference,
        seed,
        ..ReportOptions::default()
    };
    print!("{}", report_matrix(&records, &opts)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out, seed } => gen_data(spec.as_deref(), &out, seed),
        Command::Train {
            config,
            data,
            out,
            domain,
            seed,
        } => train(config.as_deref(), &data, &out, domain, seed),
        Command::Ida {
            config,
            schedule,
            method,
            slots,
            data,
            out,
            seed,
        } => ida(config.as_deref(), schedule, method, slots, data, &out, seed),
        Command::Eval {
            ckpt,
            data,
            domains,
            ..
        } => eval(&ckpt, &data, domains),
        Command::VerifyTheorem {
            state_dim,
            expand_dim,
            sigma,
            old_slots,
            new_slots,
            trials,
            seed,
            attention_mode,
            weights,
            query,
            json,
        } => theorem(
            state_dim,
            expand_dim,
            sigma,
            old_slots,
            new_slots,
            trials,
            seed,
            attention_mode,
            weights,
            query,
            json,
        ),
        Command::Gradcheck { seed, cell } => gradcheck(seed, cell),
        Command::Report {
            runs,
            format,
            pairing,
            reference,
            seed,
        } => report(&runs, &format, pairing, reference, seed),
    }
}

fn error_line(code: &str, message: &str) -> String {
    format!(
        "error code={code} message={}",
        serde_json::Value::from(message)
    )
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_line("usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(e.code(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
