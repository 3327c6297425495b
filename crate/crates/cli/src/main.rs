//! `docgroup`: run the pipeline, benchmark a corpus, generate synthetic
//! documents, or start the HTTP service.
//!
//! Exit codes: 0 on success, 1 on invalid input, 2 on internal failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};

use docgroup_core::config::PipelineConfig;
use docgroup_core::document::DocumentModel;
use docgroup_core::edits::render_svg;
use docgroup_core::model::checkpoint_bytes;
use docgroup_core::pipeline::run_pipeline;
use docgroup_core::synth::{generate_document, run_benchmark, Corpus, SynthSpec};
use docgroup_core::Error;
use docgroup_service::{serve, AppState, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "docgroup", version, about = "Group document words by style, content and geometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the full pipeline on one document file.
    ///
    /// Writes clusters.json, projection.json, report.json, render.svg and
    /// model.ckpt into the output directory.
    Run {
        /// Document file (JSON).
        doc: PathBuf,
        /// Flat `section.key=value` configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Master seed; overrides the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also write the generated constraint set to constraints.json.
        #[arg(long)]
        dump_constraints: bool,
    },
    /// Benchmark a synthetic corpus and write bench.csv and bench.json.
    Bench {
        /// Corpus file: `{"documents": [SynthSpec, ...]}`.
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
    },
    /// Generate a synthetic document and its ground truth.
    ///
    /// Writes document.json and ground_truth.json.
    Synth {
        /// Synthetic document spec (JSON).
        spec: PathBuf,
        /// Overrides the seed in the spec.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long, env = "DOCGROUP_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "DOCGROUP_DATA_DIR", default_value = "docgroup-data")]
        data_dir: PathBuf,
        #[arg(long, env = "DOCGROUP_SEED", default_value_t = 0)]
        seed: u64,
        /// Runs slower than this answer 202 with a job handle.
        #[arg(long, default_value_t = 120)]
        sync_timeout_secs: u64,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
}

/// Failure with its exit code.
#[derive(Debug)]
enum Failure {
    Input(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        if err.is_user_error() {
            Failure::Input(err.to_string())
        } else {
            Failure::Internal(err.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn read_input(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| Failure::Input(format!("cannot read {}: {e}", path.display())))
}

fn write_output(dir: &Path, name: &str, bytes: &[u8]) -> CliResult<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Failure::Internal(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::Internal(format!("cannot create {}: {e}", dir.display())))
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = String::from_utf8(read_input(p)?)
                .map_err(|_| Failure::Input(format!("{} is not UTF-8", p.display())))?;
            PipelineConfig::from_kv(&text)?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn to_json<T: serde::Serialize>(value: &T) -> CliResult<Vec<u8>> {
    serde_json::to_vec_pretty(value).map_err(|e| Failure::Internal(e.to_string()))
}

fn run(doc: &Path, config: Option<&Path>, seed: Option<u64>, out: &Path, dump_constraints: bool) -> CliResult<()> {
    let cfg = load_config(config, seed)?;
    let doc = DocumentModel::from_json_bytes(&read_input(doc)?)?;
    let state = run_pipeline(doc, &cfg)?;
    create_dir(out)?;
    write_output(out, "clusters.json", state.assignment.to_json().as_bytes())?;
    write_output(out, "projection.json", &to_json(&state.projection_payload())?)?;
    write_output(out, "report.json", &to_json(&state.report())?)?;
    let page = (800.0, 800.0 / state.doc.aspect_ratio);
    write_output(out, "render.svg", render_svg(&state.doc, Some(&state.assignment), page)?.as_bytes())?;
    write_output(out, "model.ckpt", &checkpoint_bytes(&state.model))?;
    if dump_constraints {
        write_output(out, "constraints.json", &to_json(&state.constraints)?)?;
    }
    let s = state.summary();
    println!(
        "{}: {} words, {} lines, {} clusters ({} singletons) in {:.1}s",
        state.doc.doc_id, s.words, s.lines, s.clusters, s.singletons, state.timings.total
    );
    Ok(())
}

fn bench(corpus: &Path, config: Option<&Path>, seed: Option<u64>, out: &Path) -> CliResult<()> {
    let cfg = load_config(config, seed)?;
    let corpus: Corpus = serde_json::from_slice(&read_input(corpus)?).map_err(Error::from)?;
    for spec in &corpus.documents {
        spec.validate()?;
    }
    let report = run_benchmark(&corpus.documents, &cfg)?;
    create_dir(out)?;
    write_output(out, "bench.csv", report.to_csv().as_bytes())?;
    write_output(out, "bench.json", &to_json(&report)?)?;
    for t in &report.templates {
        let scribbles: Vec<String> = t.mean_scribbles.iter().map(|(c, s)| format!("{c} {s:.2}")).collect();
        println!(
            "{:<10} docs {:>3}  purity {:.3}  scribbles {}",
            t.template.name(),
            t.documents,
            t.mean_purity,
            scribbles.join(", ")
        );
    }
    println!("{} documents in {:.1}s", report.documents.len(), report.seconds);
    Ok(())
}

fn synth(spec: &Path, seed: Option<u64>, out: &Path) -> CliResult<()> {
    let mut spec: SynthSpec = serde_json::from_slice(&read_input(spec)?).map_err(Error::from)?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let (doc, truth) = generate_document(&spec)?;
    create_dir(out)?;
    write_output(out, "document.json", doc.to_json_string().as_bytes())?;
    write_output(out, "ground_truth.json", &to_json(&truth)?)?;
    println!("{}: {} words", doc.doc_id, doc.words.len());
    Ok(())
}

fn serve_cmd(port: u16, host: std::net::IpAddr, data_dir: PathBuf, seed: u64, sync_timeout_secs: u64) -> CliResult<()> {
    let mut cfg = ServiceConfig::new(data_dir, seed);
    cfg.sync_timeout = Duration::from_secs(sync_timeout_secs);
    let state = AppState::open(cfg)?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Internal(e.to_string()))?;
    runtime
        .block_on(serve(state, std::net::SocketAddr::new(host, port)))
        .map_err(|e| Failure::Internal(format!("server failed: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run {
            doc,
            config,
            seed,
            out,
            dump_constraints,
        } => run(&doc, config.as_deref(), seed, &out, dump_constraints),
        Command::Bench { corpus, config, seed, out } => bench(&corpus, config.as_deref(), seed, &out),
        Command::Synth { spec, seed, out } => synth(&spec, seed, &out),
        Command::Serve {
            port,
            data_dir,
            seed,
            sync_timeout_secs,
            host,
        } => serve_cmd(port, host, data_dir, seed, sync_timeout_secs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}
