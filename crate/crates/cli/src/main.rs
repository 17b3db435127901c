use std::error::Error;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hedgefilter::checks::{run_all, run_check, Scale};
use hedgefilter::config::{DataSource, FeedbackMode, RunConfig, PRESETS};
use hedgefilter::detect::HedgeMode;
use hedgefilter::harness::{corrupt_stream, generate_stream, seeded_rng, RngPurpose};
use hedgefilter::hedge::{FeedbackRequest, FeedbackSource, Label};
use hedgefilter::record::{write_jsonl, ErrorRecord, InputRecord};
use hedgefilter::simulate::simulate;
use hedgefilter_service::{feed_lines, feed_records, serve, spawn, ServiceOptions};
use rand::Rng;

type CliResult = Result<ExitCode, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "hedgefilter", version, about = "Streaming anomaly detection with adaptive thresholds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a synthetic experiment; writes stream.jsonl, report.txt and regret.csv.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory (default: the config's, else ./out).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score JSONL observations, one output line per input line.
    Detect {
        #[command(flatten)]
        run: RunArgs,
        /// Read observations from this file instead of the configured source.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Serve the stream for human feedback at this address.
        #[arg(long)]
        serve: Option<String>,
    },
    /// Run the acceptance checks (reduced scale unless --full).
    Verify {
        #[arg(long)]
        full: bool,
        /// Run only these check numbers.
        #[arg(long, num_args = 1..)]
        only: Vec<u8>,
    },
    /// Print a built-in preset.
    Preset {
        #[arg(value_parser = PRESETS)]
        name: String,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration.
    #[arg(long, value_parser = PRESETS)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Feedback mode: full, label, arbitrary or service.
    #[arg(long)]
    mode: Option<String>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig, Box<dyn Error>> {
        let mut config = match (&self.config, &self.preset) {
            (Some(path), _) => RunConfig::load(path).map_err(|e| format!("{}: {e}", path.display()))?,
            (None, Some(name)) => RunConfig::preset(name)?,
            (None, None) => return Err("one of --config or --preset is required".into()),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(mode) = &self.mode {
            config.mode = FeedbackMode::parse(mode)?;
        }
        Ok(config)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { run, out } => cmd_simulate(&run, out),
        Command::Detect { run, input, serve } => cmd_detect(&run, input, serve),
        Command::Verify { full, only } => cmd_verify(full, &only),
        Command::Preset { name } => {
            print!("{}", RunConfig::preset_source(&name).unwrap_or_default());
            Ok(ExitCode::SUCCESS)
        }
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::from(2)
    })
}

fn cmd_simulate(run: &RunArgs, out: Option<PathBuf>) -> CliResult {
    let config = run.load()?;
    let dir = out.or_else(|| config.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let sim = simulate(&config)?;
    fs::create_dir_all(&dir)?;

    let mut stream = BufWriter::new(File::create(dir.join("stream.jsonl"))?);
    for record in &sim.records {
        write_jsonl(&mut stream, record)?;
    }
    stream.flush()?;
    let mut csv = BufWriter::new(File::create(dir.join("regret.csv"))?);
    sim.ledger.write_csv(&mut csv)?;
    csv.flush()?;
    fs::write(dir.join("report.txt"), sim.report.to_string())?;

    print!("{}", sim.report);
    eprintln!("wrote {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

/// Feedback carried on the input line itself.
struct LineFeedback {
    y: Option<Label>,
    volunteered: bool,
}

impl FeedbackSource for LineFeedback {
    fn feedback(&mut self, request: &FeedbackRequest) -> hedgefilter::Result<Option<Label>> {
        Ok(if request.requested || self.volunteered { self.y } else { None })
    }
}

/// Generator source turned into detector input, with labels and clean observations.
fn generated_inputs(config: &RunConfig) -> hedgefilter::Result<Vec<InputRecord>> {
    let spec = config.piecewise_spec()?.expect("generator source");
    let clean = generate_stream(&spec)?;
    let zs = corrupt_stream(&config.model, &config.channel, &clean.xs, config.seed)?;
    Ok(zs
        .into_iter()
        .zip(clean.xs)
        .zip(clean.labels)
        .map(|((z, x), y)| InputRecord { z, y: Some(y), x: Some(x) })
        .collect())
}

enum Input {
    Lines(Box<dyn BufRead + Send>),
    Generated(Vec<InputRecord>),
}

fn open_input(config: &RunConfig, input: Option<PathBuf>) -> Result<Input, Box<dyn Error>> {
    let path = match (input, &config.data) {
        (Some(p), _) => p,
        (None, DataSource::File(p)) => p.clone(),
        (None, DataSource::Stdin) => return Ok(Input::Lines(Box::new(BufReader::new(io::stdin())))),
        (None, DataSource::Generator(_)) => return Ok(Input::Generated(generated_inputs(config)?)),
    };
    let file = File::open(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(Input::Lines(Box::new(BufReader::new(file))))
}

fn cmd_detect(run: &RunArgs, input: Option<PathBuf>, serve_at: Option<String>) -> CliResult {
    let config = run.load()?;
    let input = open_input(&config, input)?;
    if serve_at.is_some() || config.mode == FeedbackMode::Service {
        let address = serve_at.or_else(|| config.service.address.clone()).unwrap_or_else(|| "127.0.0.1:8080".into());
        return serve_detection(&config, input, &address);
    }

    let mode = config.hedge_mode();
    let mut detector = config.detector()?;
    let mut coins = seeded_rng(config.seed, RngPurpose::QueryCoins);
    let mut coin = |q: f64| coins.random::<f64>() < q;
    let stdout = io::stdout();
    let mut out = stdout.lock();

    let lines: Box<dyn Iterator<Item = (u64, Result<InputRecord, String>)>> = match input {
        Input::Lines(reader) => Box::new(reader.lines().enumerate().filter_map(|(i, line)| {
            let n = i as u64 + 1;
            match line {
                Ok(l) if l.trim().is_empty() => None,
                Ok(l) => Some((n, InputRecord::parse(&l).map_err(|e| e.to_string()))),
                Err(e) => Some((n, Err(e.to_string()))),
            }
        })),
        Input::Generated(records) => Box::new(records.into_iter().enumerate().map(|(i, r)| (i as u64 + 1, Ok(r)))),
    };

    for (line, parsed) in lines {
        let outcome = parsed.and_then(|r| {
            if mode == HedgeMode::Full && r.y.is_none() {
                return Err("full feedback mode needs a label y on every line".to_string());
            }
            let mut source = LineFeedback { y: r.y, volunteered: mode == HedgeMode::Arbitrary };
            detector.step(&r.z, r.x.as_deref(), r.y, mode, &mut coin, &mut source).map_err(|e| e.to_string())
        });
        match outcome {
            Ok(record) => write_jsonl(&mut out, &record)?,
            Err(error) => write_jsonl(&mut out, &ErrorRecord { line, error })?,
        }
        out.flush()?;
    }
    Ok(ExitCode::SUCCESS)
}

fn serve_detection(config: &RunConfig, input: Input, address: &str) -> CliResult {
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(address).await?;
        eprintln!("serving /state, /queries and /feedback at http://{}", listener.local_addr()?);
        let rx = match input {
            Input::Lines(reader) => feed_lines(reader),
            Input::Generated(records) => feed_records(records),
        };
        let options = ServiceOptions::from_config(config);
        if let Some(path) = &options.log_path {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
        }
        let (handle, engine) = spawn(config.detector()?, options, rx, Some(Box::new(io::stdout())))?;
        tokio::select! {
            served = serve(listener, handle) => served?,
            stopped = engine => { stopped??; },
            _ = tokio::signal::ctrl_c() => {},
        }
        Ok(ExitCode::SUCCESS)
    })
}

fn cmd_verify(full: bool, only: &[u8]) -> CliResult {
    let scale = if full { Scale::full() } else { Scale::reduced() };
    let outcomes =
        if only.is_empty() { run_all(&scale) } else { only.iter().filter_map(|&id| run_check(id, &scale)).collect() };
    for outcome in &outcomes {
        println!("{outcome}");
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} passed, {failed} failed", outcomes.len() - failed);
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
