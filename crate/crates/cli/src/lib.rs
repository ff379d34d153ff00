//! `efim` command-line tool.

pub mod serve;

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use efim::config::Config;
use efim::corpus::{synthetic_corpus, DEFAULT_VOCAB_SIZE};
use efim::fragment::{self, DataMode, PrepareOptions, SegmentRange};
use efim::report;
use efim::sim::{self, MetricsReport, Scheme};
use efim::tokenizer::{TokenId, Vocabulary};
use efim::workload::{self, WorkloadSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "efim", version, about = "Infilling gateway, serving simulator and data tools")]
pub struct Cli {
    /// Config file (JSON). Falls back to $EFIM_CONFIG, then to defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train, apply and invert the tokenizer.
    #[command(subcommand)]
    Tokenizer(TokenizerCmd),
    /// Generate workload traces.
    #[command(subcommand)]
    Workload(WorkloadCmd),
    /// Run one scheme over a trace.
    Simulate(SimulateArgs),
    /// Run one scheme over a range of user counts.
    Sweep(SweepArgs),
    /// Turn a source tree into tokenized training shards.
    PrepareData(PrepareArgs),
    /// Compare simulation reports.
    #[command(subcommand)]
    Report(ReportCmd),
    /// Run the HTTP infilling gateway.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum TokenizerCmd {
    /// Train a vocabulary on a directory of text, or on synthetic code.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the token ids of a text as a JSON array.
    Encode {
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Text to encode; stdin when absent.
        #[arg(long)]
        text: Option<String>,
    },
    /// Print the text of a JSON array of token ids.
    Decode {
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// JSON array of ids; stdin when absent.
        #[arg(long)]
        ids: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum WorkloadCmd {
    /// Write a seeded trace as JSONL.
    Gen {
        /// Workload spec (JSON); missing fields take defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub scheme: Scheme,
    /// Report JSON; the per-round CSV goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub scheme: Scheme,
    /// Comma-separated, strictly ascending.
    #[arg(long, value_delimiter = ',', required = true)]
    pub users: Vec<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sweep JSON; a summary CSV goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, value_parser = parse_data_mode)]
    pub mode: DataMode,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Share of documents given the FIM split.
    #[arg(long, default_value_t = 1.0)]
    pub fim_rate: f64,
    /// Share of FIM documents in SPM order.
    #[arg(long, default_value_t = 0.5)]
    pub spm_rate: f64,
    #[arg(long, default_value_t = 1)]
    pub min_segment: usize,
    #[arg(long, default_value_t = 200)]
    pub max_segment: usize,
    #[arg(long, default_value_t = 1000)]
    pub shard_size: usize,
    /// Output directory for shards and stats.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum ReportCmd {
    /// Table of metrics with changes relative to the first report.
    Compare {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        /// Also write `<out>.json` and `<out>.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Listen address; overrides the config.
    #[arg(long)]
    pub bind: Option<String>,
}

fn parse_data_mode(s: &str) -> Result<DataMode, String> {
    match s {
        "fim" => Ok(DataMode::Fim),
        "fragment" => Ok(DataMode::Fragment),
        other => Err(format!("unknown mode {other:?} (expected fim or fragment)")),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let config = Config::resolve(cli.config.as_deref()).context("loading config")?;
    match cli.command {
        Command::Tokenizer(cmd) => tokenizer(cmd, &config),
        Command::Workload(WorkloadCmd::Gen {
            spec,
            users,
            rounds,
            seed,
            out,
        }) => {
            let mut spec = load_spec(spec.as_deref(), &config)?;
            if let Some(u) = users {
                spec.num_users = u;
            }
            if let Some(r) = rounds {
                spec.rounds = r;
            }
            if let Some(s) = seed {
                spec.seed = s;
            }
            let scripts = workload::generate(&spec, spec.seed)?;
            let file = fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            workload::write_jsonl(&scripts, io::BufWriter::new(file))?;
            tracing::info!(users = spec.num_users, rounds = spec.rounds, "wrote {}", out.display());
            Ok(())
        }
        Command::Simulate(args) => simulate(args, &config),
        Command::Sweep(args) => sweep(args, &config),
        Command::PrepareData(args) => prepare_data(args, &config),
        Command::Report(ReportCmd::Compare { reports, out }) => compare(&reports, out.as_deref()),
        Command::Serve(args) => {
            let mut config = config;
            if let Some(bind) = args.bind {
                config.bind = bind;
            }
            serve::run_blocking(config)
        }
    }
}

fn load_spec(path: Option<&Path>, config: &Config) -> Result<WorkloadSpec> {
    let spec: WorkloadSpec = match path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => WorkloadSpec {
            seed: config.seed,
            ..WorkloadSpec::default()
        },
    };
    spec.validate()?;
    Ok(spec)
}

fn vocabulary(flag: Option<&Path>, config: &Config) -> Result<Vocabulary> {
    match flag {
        Some(p) => Vocabulary::load(p).with_context(|| format!("loading vocabulary {}", p.display())),
        None => Ok(config.vocabulary()?),
    }
}

fn read_arg_or_stdin(arg: Option<String>) -> Result<Vec<u8>> {
    match arg {
        Some(s) => Ok(s.into_bytes()),
        None => {
            let mut buf = Vec::new();
            io::stdin().read_to_end(&mut buf)?;
            Ok(buf)
        }
    }
}

fn tokenizer(cmd: TokenizerCmd, config: &Config) -> Result<()> {
    match cmd {
        TokenizerCmd::Train { corpus, size, out } => {
            let texts: Vec<Vec<u8>> = match corpus {
                Some(dir) => fragment::load_corpus_dir(&dir)?.into_iter().map(|d| d.text).collect(),
                None => synthetic_corpus(config.seed, 8, 3000).into_iter().map(String::into_bytes).collect(),
            };
            if texts.is_empty() {
                bail!("training corpus is empty");
            }
            let vocab = Vocabulary::train(&texts, size, config.specials.clone())?;
            vocab.save(&out)?;
            println!("{} tokens -> {}", vocab.len(), out.display());
        }
        TokenizerCmd::Encode { vocab, text } => {
            let vocab = vocabulary(vocab.as_deref(), config)?;
            let text = read_arg_or_stdin(text)?;
            println!("{}", serde_json::to_string(&vocab.encode(&text))?);
        }
        TokenizerCmd::Decode { vocab, ids } => {
            let vocab = vocabulary(vocab.as_deref(), config)?;
            let raw = read_arg_or_stdin(ids)?;
            let ids: Vec<TokenId> = serde_json::from_slice(&raw).context("ids must be a JSON array of integers")?;
            let mut stdout = io::stdout().lock();
            stdout.write_all(&vocab.decode(&ids)?)?;
            stdout.flush()?;
        }
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn simulate(args: SimulateArgs, config: &Config) -> Result<()> {
    let scripts = workload::from_jsonl(&args.trace).with_context(|| format!("reading {}", args.trace.display()))?;
    let vocab = config.vocabulary()?;
    let report = sim::run(&scripts, &config.engine(args.scheme), &vocab)?;
    write_json(&args.out, &report)?;
    fs::write(args.out.with_extension("csv"), report.rounds_csv())?;
    println!(
        "{}: avg latency {:.1}, {:.5} req/unit, reuse {:.1}%",
        report.scheme,
        report.avg_latency,
        report.request_throughput,
        100.0 * report.reuse_rate
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct SweepPoint {
    users: usize,
    report: MetricsReport,
}

fn sweep(args: SweepArgs, config: &Config) -> Result<()> {
    let mut spec = load_spec(args.spec.as_deref(), config)?;
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    let vocab = config.vocabulary()?;
    let points = sim::sweep_users(&spec, &config.engine(args.scheme), &vocab, &args.users)?;
    let mut csv = String::from("users,avg_latency,request_throughput,input_token_throughput,reuse_rate\n");
    for (users, r) in &points {
        csv.push_str(&format!(
            "{users},{:.6},{:.9},{:.6},{:.6}\n",
            r.avg_latency, r.request_throughput, r.input_token_throughput, r.reuse_rate
        ));
    }
    let points: Vec<SweepPoint> = points.into_iter().map(|(users, report)| SweepPoint { users, report }).collect();
    write_json(&args.out, &points)?;
    fs::write(args.out.with_extension("csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn prepare_data(args: PrepareArgs, config: &Config) -> Result<()> {
    if args.shard_size == 0 {
        bail!("--shard-size must be positive");
    }
    let vocab = vocabulary(args.vocab.as_deref(), config)?;
    let docs = fragment::load_corpus_dir(&args.corpus).with_context(|| format!("reading corpus {}", args.corpus.display()))?;
    let opts = PrepareOptions {
        mode: args.mode,
        fim_rate: args.fim_rate,
        spm_rate: args.spm_rate,
        segments: SegmentRange {
            min_len: args.min_segment,
            max_len: args.max_segment,
        },
    };
    let (samples, stats) = fragment::prepare_corpus(&docs, &vocab, args.seed.unwrap_or(config.seed), &opts)?;
    fs::create_dir_all(&args.out)?;
    for (i, chunk) in samples.chunks(args.shard_size).enumerate() {
        let path = args.out.join(format!("shard-{i:05}.jsonl"));
        let file = fs::File::create(&path)?;
        fragment::write_shard(chunk, io::BufWriter::new(file))?;
    }
    write_json(&args.out.join("stats.json"), &stats)?;
    println!("{}", serde_json::to_string(&stats)?);
    Ok(())
}

fn compare(paths: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let reports = paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<MetricsReport>(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let cmp = report::compare(&reports)?;
    print!("{}", cmp.to_table());
    if let Some(out) = out {
        write_json(&out.with_extension("json"), &cmp)?;
        fs::write(out.with_extension("csv"), cmp.to_csv())?;
    }
    Ok(())
}
