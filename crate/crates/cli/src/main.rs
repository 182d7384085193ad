use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{ArgGroup, Parser, Subcommand};
use railchan::cdl::{builtin, builtin_tables};
use railchan::config;
use railchan::io::{write_atomic, OutputSet, RunManifest};
use railchan::pipeline::{self, AnalyzeOptions, LinkContext, Metric, Reference};
use railchan::Error;

const EXIT_VALIDATION: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_FORMAT: u8 = 4;

#[derive(Parser)]
#[command(name = "railchan", version, about = "High-speed-railway cluster channel simulator and analysis toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one link and write trace, evolution log, MPCs and geometry.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract channel statistics from a trace or an MPC table.
    Analyze {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(Metric::NAMES))]
        metric: String,
        #[arg(long)]
        out: PathBuf,
        /// Optional config for the [analysis] settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Simulate many links and compare fitted statistics with a reference.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Reference CSV (`metric,mu,sigma`) or `builtin:rural`.
        #[arg(long)]
        reference: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// List or export the built-in CDL tables.
    #[command(group(ArgGroup::new("action").required(true).args(["list", "export"])))]
    Cdl {
        #[arg(long)]
        list: bool,
        #[arg(long, value_name = "NAME")]
        export: Option<String>,
        /// Write the export here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::Format { .. } | Error::Csv(_) | Error::Json(_) => EXIT_FORMAT,
        _ => EXIT_USAGE,
    }
}

fn commit(out: OutputSet, dir: &Path, mut manifest: RunManifest, started: Instant) -> Result<(), Error> {
    manifest.duration_s = started.elapsed().as_secs_f64();
    let m = out.commit(dir, manifest)?;
    log::info!("wrote {} files to {}", m.outputs.len(), dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<u8, Error> {
    let started = Instant::now();
    match cli.command {
        Command::Simulate { config: path, seed, out } => {
            let (cfg, hash) = config::load(&path)?;
            let sim = pipeline::simulate(&cfg, seed)?;
            let mut manifest = RunManifest::new("simulate");
            manifest.config_hash = Some(hash);
            manifest.seed = Some(seed);
            manifest.inputs = vec![path];
            commit(pipeline::simulation_outputs(&sim)?, &out, manifest, started)?;
            Ok(0)
        }
        Command::Analyze { input, metric, out, config: cfg_path } => {
            let metric = Metric::parse(&metric).expect("clap restricts the metric names");
            let mut manifest = RunManifest::new(&format!("analyze --metric {}", metric.as_str()));
            let analysis = match &cfg_path {
                Some(p) => {
                    let (c, hash) = config::load(p)?;
                    manifest.config_hash = Some(hash);
                    c.analysis
                }
                None => config::AnalysisConfig::default(),
            };
            let bytes = std::fs::read(&input).map_err(|e| Error::Io { path: input.clone(), source: e })?;
            let parsed = pipeline::parse_input(&bytes)?;
            let opts = AnalyzeOptions {
                analysis,
                link: LinkContext::beside(&input)?,
            };
            let set = pipeline::analyze(&parsed, metric, &opts)?;
            manifest.inputs = vec![input];
            manifest.inputs.extend(cfg_path);
            commit(set, &out, manifest, started)?;
            Ok(0)
        }
        Command::Validate {
            config: path,
            seed,
            reference,
            out,
        } => {
            let (cfg, hash) = config::load(&path)?;
            let r = Reference::load(&reference)?;
            let v = pipeline::validate(&cfg, seed, &r)?;
            for row in &v.rows {
                println!(
                    "{:<13} {:<15} ref {:>10.4} fit {:>10.4} rel {:>7.4} {}",
                    row.metric, row.parameter, row.reference, row.fitted, row.rel_error, row.status
                );
            }
            let passed = v.passed();
            let mut manifest = RunManifest::new("validate");
            manifest.config_hash = Some(hash);
            manifest.seed = Some(seed);
            manifest.inputs = vec![path, PathBuf::from(reference)];
            commit(v.outputs, &out, manifest, started)?;
            println!("validation {}", if passed { "PASSED" } else { "FAILED" });
            Ok(if passed { 0 } else { EXIT_VALIDATION })
        }
        Command::Cdl { list, export, out } => {
            if list {
                for t in builtin_tables() {
                    println!("{}\t{} clusters\tRMS DS {:.2} ns", t.name, t.rows.len(), t.rms_delay_spread_s() * 1e9);
                }
                return Ok(0);
            }
            let name = export.expect("clap requires --list or --export");
            let Some(table) = builtin(&name) else {
                eprintln!("error: no built-in CDL table `{name}`");
                return Ok(EXIT_USAGE);
            };
            let mut buf = Vec::new();
            table.write_csv(&mut buf)?;
            match out {
                Some(p) => write_atomic(&p, &buf)?,
                None => print!("{}", String::from_utf8_lossy(&buf)),
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
