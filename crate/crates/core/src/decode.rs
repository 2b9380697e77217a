//! Autoregressive generation over a [`LogitProvider`].
//!
//! [`Decoder::decode`] runs the four-stream fused decoder, [`Decoder::decode_vanilla`]
//! the single-stream baseline. Both support greedy, beam and multinomial
//! selection and record wall-clock latency per generated token.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex, OnceLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dist::{self, DistError, Logits};
use crate::fusion::{self, FusionError, HddConfig, ImageQuad, ImageRef, StepDiagnostics, Strategy};
use crate::provider::{LogitProvider, LogitRequest, LogitResponse, ProviderError, TokenId};

static NEXT_REQUEST_ID: AtomicU64 = AtomicU64::new(1);

fn next_request_id() -> u64 {
    NEXT_REQUEST_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Hdd,
    Vanilla,
}

/// Everything a decode call produced. For HDD runs `step_diagnostics` has
/// one entry per generated token; vanilla runs leave it empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeState {
    pub mode: DecodeMode,
    pub quad: ImageQuad,
    pub prompt_tokens: Vec<TokenId>,
    pub generated: Vec<TokenId>,
    pub step_diagnostics: Vec<StepDiagnostics>,
    pub per_token_latency_ms: Vec<f64>,
    pub total_ms: f64,
    pub eos_token_id: Option<TokenId>,
    /// Beam score of the returned hypothesis (sum of fused log-probabilities).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cumulative_log_prob: Option<f64>,
}

impl DecodeState {
    fn new(mode: DecodeMode, quad: ImageQuad, prompt: &[TokenId]) -> Self {
        Self {
            mode,
            quad,
            prompt_tokens: prompt.to_vec(),
            generated: Vec::new(),
            step_diagnostics: Vec::new(),
            per_token_latency_ms: Vec::new(),
            total_ms: 0.0,
            eos_token_id: None,
            cumulative_log_prob: None,
        }
    }

    pub fn ended_with_eos(&self) -> bool {
        self.eos_token_id.is_some() && self.generated.last().copied() == self.eos_token_id
    }

    /// δ of the first generated token, if any.
    pub fn first_delta(&self) -> Option<f64> {
        self.step_diagnostics.first().map(|d| d.delta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamHypothesis {
    pub tokens: Vec<TokenId>,
    pub cumulative_log_prob: f64,
    pub finished: bool,
    diagnostics: Vec<StepDiagnostics>,
    latency_ms: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid decode request: {0}")]
    Invalid(String),
    #[error("provider failed after {} generated tokens: {source}", partial.generated.len())]
    Provider {
        #[source]
        source: ProviderError,
        partial: Box<DecodeState>,
    },
    #[error("fusion failed after {} generated tokens: {source}", partial.generated.len())]
    Fusion {
        #[source]
        source: FusionError,
        partial: Box<DecodeState>,
    },
}

impl DecodeError {
    pub fn partial(&self) -> Option<&DecodeState> {
        match self {
            DecodeError::Invalid(_) => None,
            DecodeError::Provider { partial, .. } | DecodeError::Fusion { partial, .. } => Some(partial),
        }
    }
}

enum StepError {
    Provider(ProviderError),
    Fusion(FusionError),
}

impl From<ProviderError> for StepError {
    fn from(e: ProviderError) -> Self {
        StepError::Provider(e)
    }
}

impl From<FusionError> for StepError {
    fn from(e: FusionError) -> Self {
        StepError::Fusion(e)
    }
}

impl From<DistError> for StepError {
    fn from(e: DistError) -> Self {
        StepError::Fusion(e.into())
    }
}

struct StepOutput {
    logits: Logits,
    diagnostics: Option<StepDiagnostics>,
    eos: TokenId,
}

type FetchResult = Result<LogitResponse, ProviderError>;
type FetchJob = (LogitRequest, Sender<FetchResult>);

/// Long-lived threads that run provider fetches, so a fused step does not
/// pay for thread creation.
struct FetchPool {
    jobs: Option<Sender<FetchJob>>,
    workers: Vec<JoinHandle<()>>,
}

impl FetchPool {
    fn new<P: LogitProvider + ?Sized + 'static>(provider: Arc<P>, threads: usize) -> Self {
        let (tx, rx) = mpsc::channel::<FetchJob>();
        let rx = Arc::new(Mutex::new(rx));
        let workers = (0..threads)
            .map(|i| {
                let rx: Arc<Mutex<Receiver<FetchJob>>> = Arc::clone(&rx);
                let provider = Arc::clone(&provider);
                std::thread::Builder::new()
                    .name(format!("fetch-{i}"))
                    .spawn(move || loop {
                        let job = rx.lock().expect("fetch queue lock").recv();
                        let Ok((req, reply)) = job else { break };
                        let _ = reply.send(provider.fetch_logits(&req));
                    })
                    .expect("spawn fetch worker")
            })
            .collect();
        Self { jobs: Some(tx), workers }
    }

    fn submit(&self, req: LogitRequest) -> Receiver<FetchResult> {
        let (tx, rx) = mpsc::channel();
        self.jobs.as_ref().expect("pool alive").send((req, tx)).expect("fetch workers alive");
        rx
    }
}

impl Drop for FetchPool {
    fn drop(&mut self) {
        self.jobs.take();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

/// Drives decoding against one provider.
pub struct Decoder<P: ?Sized> {
    provider: Arc<P>,
    concurrent: bool,
    fetch_threads: usize,
    pool: OnceLock<FetchPool>,
    seed: u64,
}

impl<P: LogitProvider + 'static> Decoder<P> {
    pub fn new(provider: P) -> Self {
        Self::from_arc(Arc::new(provider))
    }
}

impl<P: LogitProvider + ?Sized + 'static> Decoder<P> {
    pub fn from_arc(provider: Arc<P>) -> Self {
        Self { provider, concurrent: true, fetch_threads: 3, pool: OnceLock::new(), seed: 0 }
    }

    /// Issue the four per-step fetches in parallel (default) or one after another.
    pub fn with_concurrency(mut self, concurrent: bool) -> Self {
        self.concurrent = concurrent;
        self
    }

    /// Background fetch threads used for concurrent steps. Three serve one
    /// decode at a time; raise it when sharing the decoder across threads.
    pub fn with_fetch_threads(mut self, threads: usize) -> Self {
        self.fetch_threads = threads.max(1);
        self
    }

    /// Base seed for multinomial sampling. Each decode call derives its own
    /// generator from this seed and its inputs.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn provider(&self) -> &P {
        &self.provider
    }

    pub fn decode(&self, quad: &ImageQuad, prompt: &[TokenId], cfg: &HddConfig) -> Result<DecodeState, DecodeError> {
        self.run(DecodeMode::Hdd, quad.clone(), prompt, cfg)
    }

    pub fn decode_vanilla(
        &self,
        image: &ImageRef,
        prompt: &[TokenId],
        cfg: &HddConfig,
    ) -> Result<DecodeState, DecodeError> {
        self.run(DecodeMode::Vanilla, ImageQuad::trivial(image.clone()), prompt, cfg)
    }

    fn run(
        &self,
        mode: DecodeMode,
        quad: ImageQuad,
        prompt: &[TokenId],
        cfg: &HddConfig,
    ) -> Result<DecodeState, DecodeError> {
        cfg.validate().map_err(|e| DecodeError::Invalid(e.to_string()))?;
        if prompt.is_empty() {
            return Err(DecodeError::Invalid("prompt must not be empty".into()));
        }
        let start = Instant::now();
        let mut state = DecodeState::new(mode, quad, prompt);
        let result = match cfg.strategy {
            Strategy::Greedy | Strategy::Multinomial => self.sample_loop(&mut state, cfg),
            Strategy::Beam => self.beam_loop(&mut state, cfg),
        };
        state.total_ms = ms(start.elapsed());
        match result {
            Ok(()) => Ok(state),
            Err(StepError::Provider(source)) => Err(DecodeError::Provider { source, partial: Box::new(state) }),
            Err(StepError::Fusion(source)) => Err(DecodeError::Fusion { source, partial: Box::new(state) }),
        }
    }

    fn rng_for(&self, state: &DecodeState) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for r in state.quad.refs() {
            h.update((r.as_str().len() as u64).to_le_bytes());
            h.update(r.as_str().as_bytes());
        }
        for t in &state.prompt_tokens {
            h.update(t.to_le_bytes());
        }
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    fn sample_loop(&self, state: &mut DecodeState, cfg: &HddConfig) -> Result<(), StepError> {
        let mut rng = self.rng_for(state);
        while state.generated.len() < cfg.max_new_tokens {
            let t0 = Instant::now();
            let out = self.step(state.mode, &state.quad, &state.prompt_tokens, &state.generated, cfg)?;
            check_eos(state.eos_token_id, out.eos)?;
            state.eos_token_id = Some(out.eos);
            let token = match cfg.strategy {
                Strategy::Multinomial => {
                    let probs = dist::softmax(&out.logits, cfg.temperature)?;
                    let index = WeightedIndex::new(probs.iter().copied()).map_err(|_| DistError::Degenerate)?;
                    index.sample(&mut rng)
                }
                _ => out.logits.argmax().ok_or(DistError::Degenerate)?,
            } as TokenId;
            if out.logits[token as usize] == f64::NEG_INFINITY {
                return Err(DistError::Degenerate.into());
            }
            state.generated.push(token);
            if let Some(d) = out.diagnostics {
                state.step_diagnostics.push(d);
            }
            state.per_token_latency_ms.push(ms(t0.elapsed()));
            if token == out.eos {
                break;
            }
        }
        Ok(())
    }

    /// Beam search scored by the sum of fused, masked log-probabilities.
    /// No length normalization. Candidates are ordered by score, then by raw
    /// logit, then by token id, so width 1 reproduces greedy exactly.
    fn beam_loop(&self, state: &mut DecodeState, cfg: &HddConfig) -> Result<(), StepError> {
        let width = cfg.beam_width;
        let mut beams = vec![BeamHypothesis {
            tokens: Vec::new(),
            cumulative_log_prob: 0.0,
            finished: false,
            diagnostics: Vec::new(),
            latency_ms: Vec::new(),
        }];
        let mut result = Ok(());
        for _ in 0..cfg.max_new_tokens {
            if beams.iter().all(|b| b.finished) {
                break;
            }
            let t0 = Instant::now();
            // (score, raw logit, token, parent, diagnostics)
            let mut candidates: Vec<(f64, f64, TokenId, usize, Option<StepDiagnostics>)> = Vec::new();
            let mut carried = Vec::new();
            for (parent, hyp) in beams.iter().enumerate() {
                if hyp.finished {
                    carried.push(hyp.clone());
                    continue;
                }
                let out = match self.step(state.mode, &state.quad, &state.prompt_tokens, &hyp.tokens, cfg) {
                    Ok(out) => out,
                    Err(e) => {
                        result = Err(e);
                        break;
                    }
                };
                if let Err(e) = check_eos(state.eos_token_id, out.eos) {
                    result = Err(e);
                    break;
                }
                state.eos_token_id = Some(out.eos);
                let log_probs = dist::log_softmax(&out.logits, cfg.temperature)?;
                for (tok, (&lp, &raw)) in log_probs.iter().zip(out.logits.iter()).enumerate() {
                    if raw == f64::NEG_INFINITY || lp == f64::NEG_INFINITY {
                        continue;
                    }
                    candidates.push((hyp.cumulative_log_prob + lp, raw, tok as TokenId, parent, out.diagnostics));
                }
            }
            if result.is_err() {
                break;
            }
            let elapsed = ms(t0.elapsed());
            let mut next: Vec<(f64, f64, TokenId, BeamHypothesis)> =
                carried.into_iter().map(|h| (h.cumulative_log_prob, f64::INFINITY, 0, h)).collect();
            for (score, raw, tok, parent, diag) in candidates {
                let p = &beams[parent];
                let mut tokens = p.tokens.clone();
                tokens.push(tok);
                let mut diagnostics = p.diagnostics.clone();
                diagnostics.extend(diag);
                let mut latency_ms = p.latency_ms.clone();
                latency_ms.push(elapsed);
                let finished = Some(tok) == state.eos_token_id;
                next.push((
                    score,
                    raw,
                    tok,
                    BeamHypothesis { tokens, cumulative_log_prob: score, finished, diagnostics, latency_ms },
                ));
            }
            if next.is_empty() {
                result = Err(DistError::Degenerate.into());
                break;
            }
            next.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)));
            next.truncate(width);
            beams = next.into_iter().map(|(_, _, _, h)| h).collect();
        }
        let best = &beams[0];
        state.generated = best.tokens.clone();
        state.step_diagnostics = best.diagnostics.clone();
        state.per_token_latency_ms = best.latency_ms.clone();
        state.cumulative_log_prob = Some(best.cumulative_log_prob);
        result
    }

    fn step(
        &self,
        mode: DecodeMode,
        quad: &ImageQuad,
        prompt: &[TokenId],
        prefix: &[TokenId],
        cfg: &HddConfig,
    ) -> Result<StepOutput, StepError> {
        match mode {
            DecodeMode::Vanilla => {
                let resp = self.fetch(&quad.original, prompt, prefix)?;
                Ok(StepOutput { eos: resp.eos_token_id, logits: resp.logits.into(), diagnostics: None })
            }
            DecodeMode::Hdd => {
                let [orig, a, b, blank] = self.fetch_quad(quad, prompt, prefix)?;
                let eos = orig.eos_token_id;
                let vocab = orig.logits.len();
                for r in [&a, &b, &blank] {
                    if r.eos_token_id != eos || r.logits.len() != vocab {
                        return Err(
                            ProviderError::Session("the four streams disagree on vocabulary or EOS".into()).into()
                        );
                    }
                }
                let (fused, mut diag) = fusion::hdd_fuse(&orig.logits, &a.logits, &b.logits, &blank.logits, cfg)?;
                let p_orig = dist::softmax(&orig.logits, cfg.temperature)?;
                let (masked, count) = fusion::plausibility_mask(&fused, &p_orig, cfg.beta)?;
                diag.masked_count = count;
                Ok(StepOutput { logits: masked, diagnostics: Some(diag), eos })
            }
        }
    }

    fn fetch(&self, image: &ImageRef, prompt: &[TokenId], prefix: &[TokenId]) -> Result<LogitResponse, ProviderError> {
        let req = LogitRequest::new(next_request_id(), image.clone(), prompt.to_vec(), prefix.to_vec());
        check_vocab(self.provider.fetch_logits(&req)?)
    }

    fn fetch_quad(
        &self,
        quad: &ImageQuad,
        prompt: &[TokenId],
        prefix: &[TokenId],
    ) -> Result<[LogitResponse; 4], ProviderError> {
        let refs = quad.refs();
        let mut out = Vec::with_capacity(4);
        if self.concurrent {
            let pool = self.pool.get_or_init(|| FetchPool::new(Arc::clone(&self.provider), self.fetch_threads));
            let pending: Vec<_> = refs[1..]
                .iter()
                .map(|r| {
                    pool.submit(LogitRequest::new(next_request_id(), (*r).clone(), prompt.to_vec(), prefix.to_vec()))
                })
                .collect();
            let first = self.fetch(refs[0], prompt, prefix);
            let rest: Vec<FetchResult> = pending
                .into_iter()
                .map(|rx| rx.recv().unwrap_or_else(|_| Err(ProviderError::Transport("fetch worker exited".into()))))
                .collect();
            out.push(first?);
            for r in rest {
                out.push(check_vocab(r?)?);
            }
        } else {
            for r in refs {
                out.push(self.fetch(r, prompt, prefix)?);
            }
        }
        Ok(out.try_into().expect("four responses"))
    }
}

fn check_vocab(resp: LogitResponse) -> Result<LogitResponse, ProviderError> {
    if resp.logits.len() != resp.vocab_size {
        return Err(ProviderError::Session(format!(
            "response has {} logits but declares vocab_size {}",
            resp.logits.len(),
            resp.vocab_size
        )));
    }
    Ok(resp)
}

fn check_eos(known: Option<TokenId>, got: TokenId) -> Result<(), StepError> {
    match known {
        Some(k) if k != got => Err(ProviderError::Session(format!("EOS token changed from {k} to {got}")).into()),
        _ => Ok(()),
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::StaticProvider;
    use std::collections::HashMap;

    /// Logits chosen by prefix; unknown prefixes get `default`.
    struct TableProvider {
        table: HashMap<Vec<TokenId>, Vec<f64>>,
        default: Vec<f64>,
        eos: TokenId,
    }

    impl LogitProvider for TableProvider {
        fn fetch_logits(&self, req: &LogitRequest) -> Result<LogitResponse, ProviderError> {
            let logits = self.table.get(&req.prefix_tokens).unwrap_or(&self.default).clone();
            Ok(LogitResponse { request_id: req.request_id, vocab_size: logits.len(), logits, eos_token_id: self.eos })
        }

        fn describe(&self) -> String {
            "table".into()
        }
    }

    fn cfg(strategy: Strategy) -> HddConfig {
        HddConfig { strategy, max_new_tokens: 5, ..HddConfig::default() }
    }

    fn peaked() -> Vec<f64> {
        let mut v = vec![0.0; 10];
        v[7] = 5.0;
        v
    }

    #[test]
    fn fixed_point_repeats_until_limit() {
        let d = Decoder::new(StaticProvider::new(peaked(), 9));
        let quad = ImageQuad::trivial("x".into());
        let s = d.decode(&quad, &[1], &cfg(Strategy::Greedy)).unwrap();
        assert_eq!(s.generated, vec![7; 5]);
        assert_eq!(s.step_diagnostics.len(), 5);
        assert_eq!(s.per_token_latency_ms.len(), 5);
        assert!(s.per_token_latency_ms.iter().sum::<f64>() <= s.total_ms);
        let v = d.decode_vanilla(&"x".into(), &[1], &cfg(Strategy::Greedy)).unwrap();
        assert_eq!(v.generated, s.generated);
        assert!(v.step_diagnostics.is_empty());
    }

    fn two_step() -> TableProvider {
        TableProvider {
            table: [(vec![], vec![1.0, 3.0, 2.0, 0.0]), (vec![1], vec![0.0, 0.5, 4.0, 1.0])].into(),
            default: vec![0.0, 0.0, 0.0, 9.0],
            eos: 3,
        }
    }

    #[test]
    fn greedy_hand_trace() {
        // step 0 argmax 1, step 1 argmax 2, then EOS
        let d = Decoder::new(two_step());
        let s = d.decode_vanilla(&"x".into(), &[0], &cfg(Strategy::Greedy)).unwrap();
        assert_eq!(s.generated, vec![1, 2, 3]);
        assert!(s.ended_with_eos());
    }

    #[test]
    fn beam_width_one_is_greedy() {
        let d = Decoder::new(two_step());
        let quad = ImageQuad::trivial("x".into());
        let g = d.decode(&quad, &[0], &cfg(Strategy::Greedy)).unwrap();
        let b = d.decode(&quad, &[0], &HddConfig { beam_width: 1, ..cfg(Strategy::Beam) }).unwrap();
        assert_eq!(g.generated, b.generated);
        assert_eq!(g.step_diagnostics, b.step_diagnostics);
    }

    #[test]
    fn beam_finds_better_path_than_greedy() {
        // greedy takes 0 (p≈0.6) then a flat tail; beam prefers 1 then a sure EOS
        let provider = TableProvider {
            table: [(vec![], vec![1.0, 0.6, -9.0]), (vec![0], vec![0.0, 0.0, 0.0]), (vec![1], vec![-9.0, -9.0, 9.0])]
                .into(),
            default: vec![-9.0, -9.0, 9.0],
            eos: 2,
        };
        let d = Decoder::new(provider);
        let base = HddConfig { beta: 0.0, max_new_tokens: 2, ..HddConfig::default() };
        let g = d.decode_vanilla(&"x".into(), &[0], &HddConfig { strategy: Strategy::Greedy, ..base.clone() }).unwrap();
        let b = d
            .decode_vanilla(&"x".into(), &[0], &HddConfig { strategy: Strategy::Beam, beam_width: 2, ..base })
            .unwrap();
        assert_eq!(g.generated[0], 0);
        assert_eq!(b.generated, vec![1, 2]);
    }

    #[test]
    fn multinomial_is_seeded() {
        let p = StaticProvider::new(vec![0.0, 0.1, 0.2, -50.0], 3);
        let c = HddConfig { beta: 0.0, ..cfg(Strategy::Multinomial) };
        let a = Decoder::new(p.clone()).with_seed(4).decode_vanilla(&"x".into(), &[1], &c).unwrap();
        let b = Decoder::new(p.clone()).with_seed(4).decode_vanilla(&"x".into(), &[1], &c).unwrap();
        assert_eq!(a.generated, b.generated);
        let others: Vec<_> = (0..10)
            .map(|s| Decoder::new(p.clone()).with_seed(s).decode_vanilla(&"x".into(), &[1], &c).unwrap().generated)
            .collect();
        assert!(others.iter().any(|g| g != &a.generated));
    }

    #[test]
    fn low_temperature_sampling_is_greedy() {
        let p = two_step();
        let c = HddConfig { temperature: 1e-3, ..cfg(Strategy::Multinomial) };
        let s = Decoder::new(p).decode_vanilla(&"x".into(), &[0], &c).unwrap();
        assert_eq!(s.generated, vec![1, 2, 3]);
    }

    struct Failing;
    impl LogitProvider for Failing {
        fn fetch_logits(&self, req: &LogitRequest) -> Result<LogitResponse, ProviderError> {
            if req.prefix_tokens.len() >= 2 {
                return Err(ProviderError::Transport("boom".into()));
            }
            Ok(LogitResponse { request_id: req.request_id, logits: vec![1.0, 0.0], vocab_size: 2, eos_token_id: 1 })
        }
        fn describe(&self) -> String {
            "failing".into()
        }
    }

    #[test]
    fn provider_failure_keeps_partial_state() {
        let d = Decoder::new(Failing);
        let err = d.decode(&ImageQuad::trivial("x".into()), &[0], &cfg(Strategy::Greedy)).unwrap_err();
        let partial = err.partial().unwrap();
        assert_eq!(partial.generated, vec![0, 0]);
        assert!(matches!(err, DecodeError::Provider { source: ProviderError::Transport(_), .. }));
    }

    #[test]
    fn empty_prompt_rejected() {
        let d = Decoder::new(StaticProvider::new(vec![0.0], 0));
        assert!(matches!(d.decode_vanilla(&"x".into(), &[], &cfg(Strategy::Greedy)), Err(DecodeError::Invalid(_))));
    }

    #[test]
    fn serial_and_concurrent_agree() {
        let quad = ImageQuad::new("o".into(), "a".into(), "b".into(), "z".into());
        let c = cfg(Strategy::Beam);
        let x = Decoder::new(two_step()).decode(&quad, &[0], &c).unwrap();
        let y = Decoder::new(two_step()).with_concurrency(false).decode(&quad, &[0], &c).unwrap();
        assert_eq!(x.generated, y.generated);
        assert_eq!(x.step_diagnostics, y.step_diagnostics);
    }
}
