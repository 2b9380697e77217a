use std::fs;
use std::io::{self, BufReader};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hdd_core::provider::{serve, serve_tcp, LogitProvider};
use hdd_core::runner::{
    build_provider, prepare_suite, probe_inertia, record_benchmark, run_benchmark, snapshot, summary_text,
    synthetic_inertia_probe, write_probe, write_report, InertiaProbe, ProviderSpec, RunConfig, DEFAULT_SWEEP,
};
use hdd_core::sim::{SimProvider, SimWorld, Subset};
use hdd_core::suite::TaskKind;
use hdd_core::Strategy;

#[derive(Parser)]
#[command(name = "hdd", version, about = "Hallucination-disentangled decoding benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode a suite with vanilla and fused decoding and write a report.
    Benchmark {
        #[command(flatten)]
        run: RunArgs,
        /// Also sweep these α values (comma separated).
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<f64>,
    },
    /// Sweep α over one suite (defaults to 0.2,0.4,0.6,0.8,1.0).
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',')]
        alphas: Vec<f64>,
    },
    /// Blank-image context-swap probe: yes-logits under neutral and biased context words.
    Probe {
        #[command(flatten)]
        run: RunArgs,
        /// Probe definition (JSON). Defaults to the synthetic probe built from `--scenes` and `--seed`.
        #[arg(long)]
        probe_file: Option<PathBuf>,
    },
    /// Run a benchmark and save every provider response to a trace.
    Record {
        #[command(flatten)]
        run: RunArgs,
        /// Trace path (default: OUT/trace.jsonl).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run a benchmark against a recorded trace.
    Replay {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        trace: PathBuf,
    },
    /// Write the configured suite as JSON, with the simulator scenes beside it.
    Suite {
        #[command(flatten)]
        run: RunArgs,
        /// Output file (default: OUT/suite.json).
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Serve the simulator for the configured suite over the wire protocol.
    Serve {
        #[command(flatten)]
        run: RunArgs,
        /// Listen on this TCP address instead of stdin/stdout.
        #[arg(long)]
        listen: Option<String>,
    },
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// TOML run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// synthetic | replay:PATH | adapter:COMMAND | adapter:tcp://HOST:PORT
    #[arg(long)]
    provider: Option<ProviderSpec>,
    /// Shorthand for `--provider adapter:TARGET`.
    #[arg(long, env = "HDD_ADAPTER")]
    adapter: Option<String>,
    #[arg(long, env = "HDD_TIMEOUT_SECS")]
    timeout_secs: Option<u64>,
    /// pope | caption
    #[arg(long)]
    kind: Option<TaskKind>,
    /// random | popular | adversarial
    #[arg(long)]
    subset: Option<Subset>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Load the suite from a file instead of generating it.
    #[arg(long)]
    suite_file: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    segment_fraction: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    /// greedy | beam | multinomial
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    no_vanilla: bool,
    #[arg(long)]
    no_hdd: bool,
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Concurrent decodes (0 = one per CPU).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    sample_seed: Option<u64>,
    /// Fetch the four streams one after another.
    #[arg(long)]
    serial_fetch: bool,
    /// Synonym table for caption object extraction.
    #[arg(long)]
    synonyms: Option<PathBuf>,
    /// Keep absolute areas in segment images (ablation).
    #[arg(long)]
    absolute_segment_areas: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(t) = &self.adapter {
            cfg.provider = ProviderSpec::Adapter(t.clone());
        }
        if let Some(p) = &self.provider {
            cfg.provider = p.clone();
        }
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { cfg.$($field).+ = v; })*
            };
        }
        set!(
            timeout_secs => timeout_secs,
            kind => suite.kind,
            subset => suite.subset,
            scenes => suite.scenes,
            seed => suite.seed,
            alpha => hdd.alpha,
            beta => hdd.beta,
            segment_fraction => hdd.segment_fraction,
            temperature => hdd.temperature,
            strategy => hdd.strategy,
            beam_width => hdd.beam_width,
            max_new_tokens => hdd.max_new_tokens,
            out => output_dir,
            workers => workers,
            sample_seed => sample_seed,
        );
        if let Some(f) = &self.suite_file {
            cfg.suite.file = Some(f.clone());
        }
        if let Some(s) = &self.synonyms {
            cfg.synonyms = Some(s.clone());
        }
        if self.no_vanilla {
            cfg.methods.vanilla = false;
        }
        if self.no_hdd {
            cfg.methods.hdd = false;
        }
        if self.serial_fetch {
            cfg.concurrent_fetch = false;
        }
        if self.absolute_segment_areas {
            cfg.sim.renormalize_segments = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn benchmark(cfg: &RunConfig, alphas: &[f64]) -> Result<()> {
    let prepared = prepare_suite(cfg)?;
    let provider = build_provider(cfg, &prepared)?;
    let report = run_benchmark(cfg, &provider, &prepared.suite, alphas)?;
    let snap = snapshot(cfg, provider.as_ref(), &prepared.suite, alphas);
    write_report(&cfg.output_dir, &report, &snap)?;
    print!("{}", summary_text(&report, &snap));
    eprintln!("report written to {}", cfg.output_dir.display());
    Ok(())
}

fn probe(cfg: &RunConfig, probe_file: Option<&Path>) -> Result<()> {
    let prepared = prepare_suite(cfg)?;
    let probe: InertiaProbe = match probe_file {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => synthetic_inertia_probe(&SimWorld::new(cfg.sim.clone()), cfg.suite.scenes, cfg.suite.seed),
    };
    let provider = build_provider(cfg, &prepared)?;
    let report = probe_inertia(provider.as_ref(), &probe)?;
    write_probe(&cfg.output_dir, &report)?;
    println!("provider  {}", report.provider);
    for c in &report.cases {
        println!(
            "{:<48} neutral {:>8.3}  biased {:>8.3}  diff {:>+8.3}",
            c.label, c.neutral_yes_logit, c.biased_yes_logit, c.difference
        );
    }
    println!("biased yes-logit higher in {}/{} cases", report.increased, report.total);
    Ok(())
}

fn record(cfg: &RunConfig, trace: Option<PathBuf>) -> Result<()> {
    let prepared = prepare_suite(cfg)?;
    let provider = build_provider(cfg, &prepared)?;
    let (report, trace_file) = record_benchmark(cfg, Arc::clone(&provider), &prepared.suite, &[])?;
    let snap = snapshot(cfg, provider.as_ref(), &prepared.suite, &[]);
    write_report(&cfg.output_dir, &report, &snap)?;
    let path = trace.unwrap_or_else(|| cfg.output_dir.join("trace.jsonl"));
    trace_file.save(&path)?;
    print!("{}", summary_text(&report, &snap));
    eprintln!("{} records written to {}", trace_file.records.len(), path.display());
    Ok(())
}

fn write_suite(cfg: &RunConfig, file: Option<PathBuf>) -> Result<()> {
    let prepared = prepare_suite(cfg)?;
    let path = file.unwrap_or_else(|| cfg.output_dir.join("suite.json"));
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    prepared.suite.save(&path)?;
    eprintln!("{} items written to {}", prepared.suite.len(), path.display());
    if let Some((_, sim)) = &prepared.sim {
        let scenes = dir.join("scenes.json");
        fs::write(&scenes, serde_json::to_string_pretty(sim)? + "\n")?;
        eprintln!("{} scenes written to {}", sim.scenes.len(), scenes.display());
    }
    Ok(())
}

fn serve_sim(cfg: &RunConfig, listen: Option<String>) -> Result<()> {
    if cfg.provider != ProviderSpec::Synthetic {
        bail!("serve only exposes the synthetic provider");
    }
    let prepared = prepare_suite(cfg)?;
    let Some((world, sim)) = &prepared.sim else {
        bail!("serve needs a generated suite");
    };
    let provider = SimProvider::new(Arc::clone(world), sim);
    match listen {
        Some(addr) => {
            let listener = TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
            eprintln!("serving {} on {}", provider.describe(), listener.local_addr()?);
            serve_tcp(Arc::new(provider), listener)?;
        }
        None => {
            let n = serve(&provider, BufReader::new(io::stdin().lock()), io::stdout().lock())?;
            eprintln!("answered {n} requests");
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Benchmark { run, sweep } => benchmark(&run.resolve()?, &sweep),
        Command::Sweep { run, alphas } => {
            let alphas = if alphas.is_empty() { DEFAULT_SWEEP.to_vec() } else { alphas };
            benchmark(&run.resolve()?, &alphas)
        }
        Command::Probe { run, probe_file } => probe(&run.resolve()?, probe_file.as_deref()),
        Command::Record { run, trace } => record(&run.resolve()?, trace),
        Command::Replay { mut run, trace } => {
            run.provider = Some(ProviderSpec::Replay(trace));
            run.adapter = None;
            benchmark(&run.resolve()?, &[])
        }
        Command::Suite { run, file } => write_suite(&run.resolve()?, file),
        Command::Serve { run, listen } => serve_sim(&run.resolve()?, listen),
    }
}
