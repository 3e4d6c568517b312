use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rvfuzz::campaign::{dcv, dcv_trend_non_decreasing, read_curve, run_campaign, CampaignConfig, DcvValue};
use rvfuzz::dataset::DatasetReader;
use rvfuzz::diff::{replay, Bundle};
use rvfuzz::generators::external::serve;
use rvfuzz::generators::{CoverageVector, GeneratorKind, GeneratorRequest, NgramTable};

#[derive(Parser)]
#[command(name = "rvfuzz", version, about = "Coverage-guided RV32IM pipeline fuzzer")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a fuzzing campaign.
    Fuzz(FuzzArgs),
    /// Re-run a mismatch bundle and check it reproduces exactly.
    Replay {
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Summarize coverage curves and their convergence difficulty.
    Eval {
        #[arg(long, num_args = 1.., required = true)]
        curves: Vec<PathBuf>,
        #[arg(long)]
        dcv_window: u64,
    },
    Dataset {
        #[command(subcommand)]
        command: DatasetCmd,
    },
    /// Serve an n-gram table over the external generator protocol.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
        /// Exit after the first connection closes.
        #[arg(long)]
        once: bool,
    },
}

#[derive(Args)]
struct FuzzArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    generator: Option<GeneratorKind>,
    #[arg(long)]
    no_addr_fix: bool,
    /// JSONL output of <tokens, coverage> records.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Trained n-gram table for `--generator ngram`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// `tcp://host:port` or `exec:cmd` for `--generator external`.
    #[arg(long)]
    endpoint: Option<String>,
    /// Directory for curve.csv, report.json and mismatch bundles.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Train an n-gram table from a JSONL dataset.
    TrainNgram {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn fuzz(a: FuzzArgs) -> Result<ExitCode> {
    let mut cfg = CampaignConfig::load(&a.config).with_context(|| format!("loading {}", a.config.display()))?;
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.budget = a.budget.unwrap_or(cfg.budget);
    cfg.generator = a.generator.unwrap_or(cfg.generator);
    cfg.address_correction &= !a.no_addr_fix;
    cfg.dataset = a.dataset.or(cfg.dataset);
    cfg.ngram_model = a.model.or(cfg.ngram_model);
    cfg.endpoint = a.endpoint.or(cfg.endpoint);
    let out = a.out;
    fs::create_dir_all(&out)?;
    if cfg.bundle_dir.is_none() {
        cfg.bundle_dir = Some(out.join("bundles"));
    }
    let report = run_campaign(&cfg)?;
    report.write_curve_csv(&out.join("curve.csv"))?;
    let mut w = BufWriter::new(File::create(out.join("report.json"))?);
    serde_json::to_writer_pretty(&mut w, &report)?;
    w.flush()?;
    println!(
        "programs {} generated {} executed {} coverage {} mismatches {}",
        report.stats.programs,
        report.stats.generated_instructions,
        report.stats.executed_instructions,
        report.final_coverage,
        report.mismatches.len()
    );
    for m in &report.mismatches {
        println!(
            "mismatch program {} seed {:#x} at retirement {} ({:?}){}",
            m.program,
            m.seed,
            m.record.retired_index,
            m.record.field,
            m.bundle.as_ref().map(|b| format!(" bundle {}", b.display())).unwrap_or_default()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn replay_cmd(bundle: PathBuf) -> Result<ExitCode> {
    let b = Bundle::read_from(&bundle).with_context(|| format!("reading bundle {}", bundle.display()))?;
    let out = replay(&b)?;
    let r = &b.mismatch.record;
    println!(
        "recorded mismatch at retirement {} ({:?}) pc dut {:#010x} ref {:#010x}",
        r.retired_index, r.field, r.pc_dut, r.pc_ref
    );
    println!("reproduced: {}", out.reproduced);
    println!("reference step agrees: {}", out.ref_step_matches);
    Ok(if out.reproduced && out.ref_step_matches {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn eval(curves: Vec<PathBuf>, window: u64) -> Result<ExitCode> {
    if window == 0 {
        bail!("--dcv-window must be positive");
    }
    for path in curves {
        let curve = read_curve(File::open(&path).with_context(|| format!("opening {}", path.display()))?)?;
        let last = curve.last().context("empty curve")?;
        println!("{}: instructions {} coverage {}", path.display(), last.instructions, last.coverage);
        let points = dcv::<f64>(&curve, window)?;
        for p in &points {
            match p.value {
                DcvValue::Finite(v) => println!("  coverage {:>8} dcv {:.3}", p.coverage, v),
                DcvValue::Infinite => println!("  coverage {:>8} dcv inf", p.coverage),
            }
        }
        println!("  dcv non-decreasing: {}", dcv_trend_non_decreasing(&points));
    }
    Ok(ExitCode::SUCCESS)
}

fn train_ngram(input: PathBuf, out: PathBuf) -> Result<ExitCode> {
    let reader = DatasetReader::new(BufReader::new(File::open(&input)?));
    let records = reader.collect::<Result<Vec<_>, _>>()?;
    let model = NgramTable::train(&records)?;
    model.write_to(BufWriter::new(File::create(&out)?))?;
    println!("trained on {} records -> {}", records.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn serve_cmd(model: PathBuf, listen: String, once: bool) -> Result<ExitCode> {
    let model = NgramTable::read_from(BufReader::new(File::open(&model)?))?;
    let listener = TcpListener::bind(&listen)?;
    println!("listening on {}", listener.local_addr()?);
    std::io::stdout().flush()?;
    for conn in listener.incoming() {
        let s = conn?;
        let served = serve(s.try_clone()?, s, |req| {
            let r = GeneratorRequest::new(CoverageVector::from_f32(req.coverage), req.batch, req.seed);
            model.generate(&r).map(|(t, _)| t).unwrap_or_default()
        });
        match served {
            Ok(n) => log::info!("connection closed after {n} requests"),
            Err(e) => log::warn!("connection dropped: {e}"),
        }
        if once {
            break;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Fuzz(a) => fuzz(a),
        Cmd::Replay { bundle } => replay_cmd(bundle),
        Cmd::Eval { curves, dcv_window } => eval(curves, dcv_window),
        Cmd::Dataset {
            command: DatasetCmd::TrainNgram { input, out },
        } => train_ngram(input, out),
        Cmd::Serve { model, listen, once } => serve_cmd(model, listen, once),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
