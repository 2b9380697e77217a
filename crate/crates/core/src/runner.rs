//! Benchmark runs: decode a suite with vanilla and/or fused decoding,
//! score it, and write report files.
//!
//! Output directory layout:
//!
//! | file | content |
//! |---|---|
//! | `config.json` | full run configuration plus provider identity and crate version |
//! | `metrics.json` | metrics per method; deterministic for deterministic providers |
//! | `metrics.csv` | the same as one row per method |
//! | `outputs.jsonl` | generated tokens and text per item and method |
//! | `delta_histogram.csv` | first-token δ counts in ten bins over `[0, 1]` |
//! | `sweep.csv` | α sweep rows, when a sweep ran |
//! | `latency.json` | per-token latency statistics (wall clock, not deterministic) |
//! | `summary.txt` | human-readable digest |

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::{DecodeError, DecodeState, Decoder};
use crate::fusion::{HddConfig, ImageRef};
use crate::metrics::{
    chair_metrics, fraction_at_most, histogram_unit, latency_stats, parse_yes_no, pope_metrics, BinaryOutcome,
    CaptionRecord, ChairMetrics, LatencyStats, MetricsError, PopeMetrics, SynonymTable,
};
use crate::provider::{
    LogitProvider, LogitRequest, ProviderError, RecordingProvider, ReplayProvider, TokenId, TraceFile, WireClient,
};
use crate::sim::{make_caption_suite, make_pope_suite, SimConfig, SimProvider, SimSuite, SimWorld, Subset};
use crate::suite::{Suite, TaskKind, Truth};

pub const REPORT_FORMAT: &str = "hdd-report";
pub const REPORT_VERSION: u32 = 1;
/// Upper edge of the "near zero" δ bucket reported alongside the histogram.
pub const DELTA_NEAR_ZERO: f64 = 0.06;
pub const DEFAULT_SWEEP: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("item {item}: {source}")]
    Decode {
        item: String,
        #[source]
        source: DecodeError,
    },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, RunError>;

/// Where logits come from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum ProviderSpec {
    /// The built-in simulator, answering for the generated synthetic suite.
    #[default]
    Synthetic,
    /// A recorded trace.
    Replay(PathBuf),
    /// An external adapter: `tcp://host:port` or a shell command speaking the
    /// wire protocol on stdio.
    Adapter(String),
}

impl fmt::Display for ProviderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProviderSpec::Synthetic => f.write_str("synthetic"),
            ProviderSpec::Replay(p) => write!(f, "replay:{}", p.display()),
            ProviderSpec::Adapter(t) => write!(f, "adapter:{t}"),
        }
    }
}

impl FromStr for ProviderSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "synthetic" {
            return Ok(ProviderSpec::Synthetic);
        }
        match s.split_once(':') {
            Some(("replay", p)) if !p.is_empty() => Ok(ProviderSpec::Replay(p.into())),
            Some(("adapter", t)) if !t.is_empty() => Ok(ProviderSpec::Adapter(t.into())),
            _ => {
                Err(format!("bad provider `{s}` (expected synthetic, replay:PATH or adapter:COMMAND|tcp://HOST:PORT)"))
            }
        }
    }
}

impl Serialize for ProviderSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ProviderSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Which suite to run. A `file` takes precedence over generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteSpec {
    pub kind: TaskKind,
    pub subset: Subset,
    pub scenes: usize,
    pub seed: u64,
    pub file: Option<PathBuf>,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self { kind: TaskKind::Pope, subset: Subset::Random, scenes: 100, seed: 7, file: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Methods {
    pub vanilla: bool,
    pub hdd: bool,
}

impl Default for Methods {
    fn default() -> Self {
        Self { vanilla: true, hdd: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub hdd: HddConfig,
    pub provider: ProviderSpec,
    pub suite: SuiteSpec,
    pub sim: SimConfig,
    pub methods: Methods,
    pub output_dir: PathBuf,
    /// Concurrent decodes. 0 means one per available CPU.
    pub workers: usize,
    /// Seed for multinomial sampling.
    pub sample_seed: u64,
    /// Issue the four per-step fetches in parallel.
    pub concurrent_fetch: bool,
    pub timeout_secs: u64,
    /// Synonym table for caption object extraction.
    pub synonyms: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            hdd: HddConfig::default(),
            provider: ProviderSpec::Synthetic,
            suite: SuiteSpec::default(),
            sim: SimConfig::default(),
            methods: Methods::default(),
            output_dir: PathBuf::from("hdd-out"),
            workers: 1,
            sample_seed: 0,
            concurrent_fetch: true,
            timeout_secs: crate::provider::DEFAULT_TIMEOUT.as_secs(),
            synonyms: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.hdd.validate().map_err(|e| RunError::Config(e.to_string()))?;
        if !self.methods.vanilla && !self.methods.hdd {
            return Err(RunError::Config("no decoding method selected".into()));
        }
        if self.suite.file.is_none() && self.suite.scenes == 0 {
            return Err(RunError::Config("suite needs at least one scene".into()));
        }
        if self.timeout_secs == 0 {
            return Err(RunError::Config("timeout must be positive".into()));
        }
        Ok(())
    }
}

/// The suite a run iterates over, plus the simulator scenes when generated.
pub struct PreparedSuite {
    pub suite: Suite,
    pub sim: Option<(Arc<SimWorld>, SimSuite)>,
}

pub fn prepare_suite(cfg: &RunConfig) -> Result<PreparedSuite> {
    if let Some(path) = &cfg.suite.file {
        let suite = Suite::load(path).map_err(RunError::Config)?;
        return Ok(PreparedSuite { suite, sim: None });
    }
    let world = Arc::new(SimWorld::new(cfg.sim.clone()));
    let s = &cfg.suite;
    let sim = match s.kind {
        TaskKind::Pope => make_pope_suite(&world, s.scenes, s.subset, s.seed, cfg.hdd.segment_fraction),
        TaskKind::Caption => make_caption_suite(&world, s.scenes, s.seed, cfg.hdd.segment_fraction),
    };
    Ok(PreparedSuite { suite: sim.suite.clone(), sim: Some((world, sim)) })
}

pub fn build_provider(cfg: &RunConfig, prepared: &PreparedSuite) -> Result<Arc<dyn LogitProvider>> {
    let timeout = Duration::from_secs(cfg.timeout_secs);
    Ok(match &cfg.provider {
        ProviderSpec::Synthetic => {
            let (world, sim) = prepared.sim.as_ref().ok_or_else(|| {
                RunError::Config("the synthetic provider needs a generated suite, not a suite file".into())
            })?;
            Arc::new(SimProvider::new(Arc::clone(world), sim))
        }
        ProviderSpec::Replay(path) => Arc::new(ReplayProvider::load(path)?),
        ProviderSpec::Adapter(target) => match target.strip_prefix("tcp://") {
            Some(addr) => Arc::new(WireClient::connect(addr, timeout)?),
            None => Arc::new(WireClient::spawn(target, timeout)?),
        },
    })
}

/// Generated output for one suite item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemOutput {
    pub id: String,
    pub method: String,
    pub tokens: Vec<TokenId>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskMetrics {
    Pope {
        #[serde(flatten)]
        metrics: PopeMetrics,
        /// Answers without a yes/no keyword, counted as "no".
        unparsed: usize,
    },
    Caption {
        #[serde(flatten)]
        metrics: ChairMetrics,
    },
}

impl TaskMetrics {
    pub fn pope(&self) -> Option<&PopeMetrics> {
        match self {
            TaskMetrics::Pope { metrics, .. } => Some(metrics),
            TaskMetrics::Caption { .. } => None,
        }
    }

    pub fn chair(&self) -> Option<&ChairMetrics> {
        match self {
            TaskMetrics::Caption { metrics } => Some(metrics),
            TaskMetrics::Pope { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSummary {
    pub count: usize,
    pub mean: f64,
    /// Ten equal bins over `[0, 1]`.
    pub histogram: Vec<usize>,
    pub fraction_near_zero: f64,
}

impl DeltaSummary {
    pub fn from_values(values: &[f64]) -> Self {
        let count = values.len();
        Self {
            count,
            mean: if count == 0 { 0.0 } else { values.iter().sum::<f64>() / count as f64 },
            histogram: histogram_unit(values, 10),
            fraction_near_zero: fraction_at_most(values, DELTA_NEAR_ZERO),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub metrics: TaskMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<DeltaSummary>,
    #[serde(skip)]
    pub latency: Option<LatencyStats>,
    #[serde(skip)]
    pub outputs: Vec<ItemOutput>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    Hdd,
}

/// Decodes every item of `suite`, preserving suite order.
pub fn decode_suite(
    provider: &Arc<dyn LogitProvider>,
    suite: &Suite,
    hdd: &HddConfig,
    method: Method,
    cfg: &RunConfig,
) -> Result<Vec<DecodeState>> {
    let decoder = Decoder::from_arc(Arc::clone(provider))
        .with_seed(cfg.sample_seed)
        .with_concurrency(cfg.concurrent_fetch)
        .with_fetch_threads(3 * worker_count(cfg.workers));
    let one = |item: &crate::suite::SuiteItem| {
        let r = match method {
            Method::Vanilla => decoder.decode_vanilla(&item.quad.original, &item.prompt_tokens, hdd),
            Method::Hdd => decoder.decode(&item.quad, &item.prompt_tokens, hdd),
        };
        r.map_err(|source| RunError::Decode { item: item.id.clone(), source })
    };
    if cfg.workers == 1 {
        return suite.items.iter().map(one).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(cfg.workers))
        .build()
        .map_err(|e| RunError::Config(format!("worker pool: {e}")))?;
    pool.install(|| suite.items.par_iter().map(one).collect())
}

fn worker_count(workers: usize) -> usize {
    if workers == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        workers
    }
}

fn content_tokens(state: &DecodeState) -> &[TokenId] {
    let g = &state.generated;
    if state.ended_with_eos() {
        &g[..g.len() - 1]
    } else {
        g
    }
}

/// Scores decoded states against the suite's ground truth.
pub fn evaluate(
    suite: &Suite,
    states: &[DecodeState],
    method: &str,
    synonyms: Option<&SynonymTable>,
) -> Result<MethodResult> {
    if states.len() != suite.items.len() {
        return Err(RunError::Config(format!("{} states for {} items", states.len(), suite.items.len())));
    }
    let vocab = &suite.vocabulary;
    let outputs: Vec<ItemOutput> = suite
        .items
        .iter()
        .zip(states)
        .map(|(item, s)| ItemOutput {
            id: item.id.clone(),
            method: method.to_string(),
            tokens: s.generated.clone(),
            text: vocab.render(content_tokens(s)),
            first_delta: s.first_delta(),
        })
        .collect();
    let metrics = match suite.kind {
        TaskKind::Pope => {
            let mut unparsed = 0;
            let mut outcomes = Vec::with_capacity(states.len());
            for (item, out) in suite.items.iter().zip(&outputs) {
                let Truth::Pope { present, .. } = item.truth else {
                    return Err(RunError::Config(format!("item {} lacks a yes/no truth", item.id)));
                };
                let predicted = parse_yes_no(&out.text).unwrap_or_else(|| {
                    unparsed += 1;
                    false
                });
                outcomes.push(BinaryOutcome { predicted, actual: present });
            }
            TaskMetrics::Pope { metrics: pope_metrics(&outcomes)?, unparsed }
        }
        TaskKind::Caption => {
            let identity;
            let table = match synonyms {
                Some(t) => t,
                None => {
                    identity = SynonymTable::identity(vocab.token_text.values());
                    &identity
                }
            };
            let mut records = Vec::with_capacity(states.len());
            for (item, s) in suite.items.iter().zip(states) {
                let Truth::Caption { objects } = &item.truth else {
                    return Err(RunError::Config(format!("item {} lacks caption truth", item.id)));
                };
                let tokens = content_tokens(s);
                let truth = objects.iter().map(|o| table.canonical(o).unwrap_or(o).to_string());
                records.push(CaptionRecord::from_sentences(&vocab.sentences(tokens), truth, table, tokens.len()));
            }
            TaskMetrics::Caption { metrics: chair_metrics(&records)? }
        }
    };
    let deltas: Vec<f64> = states.iter().filter_map(DecodeState::first_delta).collect();
    let delta = (!deltas.is_empty()).then(|| DeltaSummary::from_values(&deltas));
    let latency = latency_stats(states).ok();
    Ok(MethodResult { method: method.to_string(), metrics, delta, latency, outputs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub result: MethodResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format: String,
    pub version: u32,
    pub suite: String,
    pub kind: TaskKind,
    pub items: usize,
    pub methods: Vec<MethodResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepRow>,
}

impl Report {
    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == name)
    }
}

/// Runs the configured methods (and an optional α sweep) over a prepared suite.
pub fn run_benchmark(
    cfg: &RunConfig,
    provider: &Arc<dyn LogitProvider>,
    suite: &Suite,
    sweep_alphas: &[f64],
) -> Result<Report> {
    cfg.validate()?;
    let synonyms = cfg.synonyms.as_ref().map(SynonymTable::load).transpose()?;
    let mut methods = Vec::new();
    if cfg.methods.vanilla {
        let states = decode_suite(provider, suite, &cfg.hdd, Method::Vanilla, cfg)?;
        methods.push(evaluate(suite, &states, "vanilla", synonyms.as_ref())?);
    }
    if cfg.methods.hdd {
        let states = decode_suite(provider, suite, &cfg.hdd, Method::Hdd, cfg)?;
        methods.push(evaluate(suite, &states, "hdd", synonyms.as_ref())?);
    }
    let mut sweep = Vec::new();
    for &alpha in sweep_alphas {
        let hdd = HddConfig { alpha, ..cfg.hdd.clone() };
        let states = decode_suite(provider, suite, &hdd, Method::Hdd, cfg)?;
        let result = evaluate(suite, &states, &format!("hdd[alpha={alpha}]"), synonyms.as_ref())?;
        sweep.push(SweepRow { alpha, result });
    }
    Ok(Report {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        suite: suite.name.clone(),
        kind: suite.kind,
        items: suite.len(),
        methods,
        sweep,
    })
}

/// Runs a benchmark through a recording wrapper and returns the trace too.
pub fn record_benchmark<P: LogitProvider + 'static>(
    cfg: &RunConfig,
    provider: P,
    suite: &Suite,
    sweep_alphas: &[f64],
) -> Result<(Report, TraceFile)> {
    let recorder = Arc::new(RecordingProvider::new(provider));
    let shared: Arc<dyn LogitProvider> = recorder.clone();
    let report = run_benchmark(cfg, &shared, suite, sweep_alphas)?;
    Ok((report, recorder.record_trace()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCase {
    pub label: String,
    pub neutral_prompt: Vec<TokenId>,
    pub biased_prompt: Vec<TokenId>,
}

/// A blank-image context-swap probe: the same question asked under a
/// neutral and a biased context word with no visual input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InertiaProbe {
    pub blank: ImageRef,
    pub yes_token: TokenId,
    pub no_token: TokenId,
    pub cases: Vec<ProbeCase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub label: String,
    pub neutral_yes_logit: f64,
    pub biased_yes_logit: f64,
    pub neutral_margin: f64,
    pub biased_margin: f64,
    pub difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub provider: String,
    pub cases: Vec<ProbeResult>,
    pub increased: usize,
    pub total: usize,
}

/// Builds the synthetic probe: for each of `n` seeded scenes, ask about its
/// largest object under the neutral context and under the context the
/// object is most associated with.
pub fn synthetic_inertia_probe(world: &SimWorld, n: usize, seed: u64) -> InertiaProbe {
    use crate::sim::{generate_scenes, sim_ref, SimView, NEUTRAL_CONTEXT, NO_TOKEN, TASK_POPE, YES_TOKEN};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let cases = generate_scenes(world, n, &mut rng)
        .iter()
        .map(|scene| {
            let target = scene
                .objects
                .iter()
                .max_by(|a, b| a.area.total_cmp(&b.area).then(b.object.cmp(&a.object)))
                .map(|o| o.object)
                .unwrap_or(0);
            let ctx = world.strongest_context(target);
            ProbeCase {
                label: format!(
                    "scene-{:05} {} / {}",
                    scene.id,
                    world.object_name(target),
                    world.context_names[ctx as usize]
                ),
                neutral_prompt: vec![TASK_POPE, NEUTRAL_CONTEXT, target],
                biased_prompt: vec![TASK_POPE, ctx, target],
            }
        })
        .collect();
    InertiaProbe { blank: sim_ref(0, SimView::Blank), yes_token: YES_TOKEN, no_token: NO_TOKEN, cases }
}

pub fn probe_inertia(provider: &dyn LogitProvider, probe: &InertiaProbe) -> Result<ProbeReport> {
    let mut cases = Vec::with_capacity(probe.cases.len());
    let fetch = |id: u64, prompt: &[TokenId]| -> Result<(f64, f64)> {
        let resp = provider.fetch_logits(&LogitRequest::new(id, probe.blank.clone(), prompt.to_vec(), vec![]))?;
        let get = |t: TokenId| {
            resp.logits
                .get(t as usize)
                .copied()
                .ok_or_else(|| RunError::Config(format!("token {t} outside vocabulary of {}", resp.logits.len())))
        };
        Ok((get(probe.yes_token)?, get(probe.no_token)?))
    };
    for (i, case) in probe.cases.iter().enumerate() {
        let (ny, nn) = fetch(2 * i as u64 + 1, &case.neutral_prompt)?;
        let (by, bn) = fetch(2 * i as u64 + 2, &case.biased_prompt)?;
        cases.push(ProbeResult {
            label: case.label.clone(),
            neutral_yes_logit: ny,
            biased_yes_logit: by,
            neutral_margin: ny - nn,
            biased_margin: by - bn,
            difference: by - ny,
        });
    }
    let increased = cases.iter().filter(|c| c.difference > 0.0).count();
    Ok(ProbeReport { provider: provider.describe(), total: cases.len(), increased, cases })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub tool: String,
    pub version: String,
    pub provider: String,
    pub suite: String,
    pub sweep_alphas: Vec<f64>,
    pub config: RunConfig,
}

pub fn snapshot(cfg: &RunConfig, provider: &dyn LogitProvider, suite: &Suite, sweep_alphas: &[f64]) -> ConfigSnapshot {
    ConfigSnapshot {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        provider: provider.describe(),
        suite: suite.name.clone(),
        sweep_alphas: sweep_alphas.to_vec(),
        config: cfg.clone(),
    }
}

fn write(path: PathBuf, content: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, content).map_err(|source| RunError::Io { path, source })
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes") + "\n"
}

fn csv_string(rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

fn metric_header(kind: TaskKind) -> Vec<String> {
    let cols: &[&str] = match kind {
        TaskKind::Pope => &["accuracy", "precision", "recall", "f1", "yes_ratio", "f1_undefined", "unparsed"],
        TaskKind::Caption => &["chair_s", "chair_i", "recall", "avg_length", "macro_chair_s", "macro_chair_i"],
    };
    cols.iter().map(|s| s.to_string()).collect()
}

fn metric_cells(m: &TaskMetrics) -> Vec<String> {
    match m {
        TaskMetrics::Pope { metrics: p, unparsed } => vec![
            p.accuracy.to_string(),
            p.precision.to_string(),
            p.recall.to_string(),
            p.f1.to_string(),
            p.yes_ratio.to_string(),
            p.f1_undefined.to_string(),
            unparsed.to_string(),
        ],
        TaskMetrics::Caption { metrics: c } => vec![
            c.chair_s.to_string(),
            c.chair_i.to_string(),
            c.recall.to_string(),
            c.avg_length.to_string(),
            c.macro_chair_s.to_string(),
            c.macro_chair_i.to_string(),
        ],
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

pub fn summary_text(report: &Report, snapshot: &ConfigSnapshot) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "suite     {} ({} items, {})", report.suite, report.items, report.kind);
    let _ = writeln!(s, "provider  {}", snapshot.provider);
    let h = &snapshot.config.hdd;
    let _ = writeln!(
        s,
        "config    alpha={} beta={} segment_fraction={} temperature={} strategy={} beam_width={} max_new_tokens={}",
        h.alpha, h.beta, h.segment_fraction, h.temperature, h.strategy, h.beam_width, h.max_new_tokens
    );
    let _ = writeln!(s);
    for m in &report.methods {
        match &m.metrics {
            TaskMetrics::Pope { metrics: p, unparsed } => {
                let _ = writeln!(
                    s,
                    "{:<8} acc {:>6}  prec {:>6}  rec {:>6}  f1 {:>6}  yes {:>6}  unparsed {}",
                    m.method,
                    pct(p.accuracy),
                    pct(p.precision),
                    pct(p.recall),
                    pct(p.f1),
                    pct(p.yes_ratio),
                    unparsed
                );
            }
            TaskMetrics::Caption { metrics: c } => {
                let _ = writeln!(
                    s,
                    "{:<8} CHAIR_S {:>6}  CHAIR_I {:>6}  recall {:>6}  len {:.2}",
                    m.method,
                    pct(c.chair_s),
                    pct(c.chair_i),
                    pct(c.recall),
                    c.avg_length
                );
            }
        }
        if let Some(l) = &m.latency {
            let _ =
                writeln!(s, "{:<8} latency {:.3} ms/token (p50 {:.3}, p95 {:.3})", "", l.mean_ms, l.p50_ms, l.p95_ms);
        }
    }
    if let Some(d) = report.method("hdd").and_then(|m| m.delta.as_ref()) {
        let _ = writeln!(
            s,
            "\nfirst-token delta ({} values, mean {:.4}, {:.1}% in [0, {DELTA_NEAR_ZERO}])",
            d.count,
            d.mean,
            100.0 * d.fraction_near_zero
        );
        let peak = d.histogram.iter().copied().max().unwrap_or(0).max(1);
        for (i, &c) in d.histogram.iter().enumerate() {
            let bar = "#".repeat((40 * c).div_ceil(peak));
            let _ = writeln!(
                s,
                "  [{:.1}, {:.1}{} {:>6} {bar}",
                i as f64 / 10.0,
                (i + 1) as f64 / 10.0,
                if i == 9 { "]" } else { ")" },
                c
            );
        }
    }
    if !report.sweep.is_empty() {
        let _ = writeln!(s, "\nalpha sweep");
        for row in &report.sweep {
            match &row.result.metrics {
                TaskMetrics::Pope { metrics: p, .. } => {
                    let _ = writeln!(
                        s,
                        "  alpha {:<4} acc {:>6}  f1 {:>6}  yes {:>6}",
                        row.alpha,
                        pct(p.accuracy),
                        pct(p.f1),
                        pct(p.yes_ratio)
                    );
                }
                TaskMetrics::Caption { metrics: c } => {
                    let _ = writeln!(
                        s,
                        "  alpha {:<4} CHAIR_S {:>6}  CHAIR_I {:>6}  recall {:>6}",
                        row.alpha,
                        pct(c.chair_s),
                        pct(c.chair_i),
                        pct(c.recall)
                    );
                }
            }
        }
    }
    s
}

/// Writes every report file into `dir`, creating it if needed.
pub fn write_report(dir: &Path, report: &Report, snapshot: &ConfigSnapshot) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| RunError::Io { path: dir.to_path_buf(), source })?;
    write(dir.join("config.json"), json(snapshot))?;
    write(dir.join("metrics.json"), json(report))?;

    let mut rows = vec![[vec!["method".to_string()], metric_header(report.kind)].concat()];
    for m in report.methods.iter().chain(report.sweep.iter().map(|r| &r.result)) {
        rows.push([vec![m.method.clone()], metric_cells(&m.metrics)].concat());
    }
    write(dir.join("metrics.csv"), csv_string(&rows))?;

    let mut outputs = String::new();
    for m in &report.methods {
        for o in &m.outputs {
            outputs.push_str(&serde_json::to_string(o).expect("output serializes"));
            outputs.push('\n');
        }
    }
    write(dir.join("outputs.jsonl"), outputs)?;

    if let Some(d) = report.method("hdd").and_then(|m| m.delta.as_ref()) {
        let mut rows = vec![vec!["bin_low".to_string(), "bin_high".into(), "count".into()]];
        for (i, c) in d.histogram.iter().enumerate() {
            rows.push(vec![format!("{:.1}", i as f64 / 10.0), format!("{:.1}", (i + 1) as f64 / 10.0), c.to_string()]);
        }
        write(dir.join("delta_histogram.csv"), csv_string(&rows))?;
    }
    if !report.sweep.is_empty() {
        let mut rows = vec![[vec!["alpha".to_string()], metric_header(report.kind)].concat()];
        if let Some(v) = report.method("vanilla") {
            rows.push([vec!["vanilla".to_string()], metric_cells(&v.metrics)].concat());
        }
        for r in &report.sweep {
            rows.push([vec![r.alpha.to_string()], metric_cells(&r.result.metrics)].concat());
        }
        write(dir.join("sweep.csv"), csv_string(&rows))?;
    }
    let latency: Vec<_> = report
        .methods
        .iter()
        .chain(report.sweep.iter().map(|r| &r.result))
        .filter_map(|m| m.latency.as_ref().map(|l| (m.method.clone(), l.clone())))
        .collect();
    write(dir.join("latency.json"), json(&latency.into_iter().collect::<std::collections::BTreeMap<_, _>>()))?;
    write(dir.join("summary.txt"), summary_text(report, snapshot))
}

pub fn write_probe(dir: &Path, report: &ProbeReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| RunError::Io { path: dir.to_path_buf(), source })?;
    write(dir.join("probe.json"), json(report))?;
    let mut rows = vec![["case", "neutral_yes_logit", "biased_yes_logit", "difference"].map(String::from).to_vec()];
    for c in &report.cases {
        rows.push(vec![
            c.label.clone(),
            c.neutral_yes_logit.to_string(),
            c.biased_yes_logit.to_string(),
            c.difference.to_string(),
        ]);
    }
    write(dir.join("probe.csv"), csv_string(&rows))
}
