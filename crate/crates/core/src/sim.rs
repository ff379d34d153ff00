//! Discrete-event simulation of an inference engine serving closed-loop
//! infilling users.
//!
//! One FCFS resource serves requests one at a time. Service time is linear
//! in tokens:
//!
//! ```text
//! service = prefill_cost * (prompt_tokens - reused_tokens) + decode_cost * output_tokens
//! ```
//!
//! Reused tokens come from a block-granular [`CacheTree`]: the prompt's
//! cached prefix is matched when service starts and the prompt is inserted
//! when it completes. Each user submits round `r + 1` at the instant round
//! `r` completes.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{GatewayError, InfillRequest, Outcome, SessionPool};
use crate::kv_cache::{CacheError, CacheLease, CacheTree};
use crate::prompt::PromptLayout;
use crate::tokenizer::{TokenSeq, Vocabulary};
use crate::workload::{self, UserScript, WorkloadError, WorkloadSpec};

/// Prompt length of the prefill/decode calibration point.
pub const CALIBRATION_PROMPT_TOKENS: f64 = 2100.0;
/// Output length of the calibration point.
pub const CALIBRATION_OUTPUT_TOKENS: f64 = 32.0;
/// Prefill time over decode time at the calibration point, without reuse.
pub const CALIBRATION_PREFILL_TO_DECODE: f64 = 9.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("workload has no requests")]
    EmptyWorkload,
    #[error("invalid engine config: {0}")]
    InvalidConfig(String),
    #[error("user counts must be positive and strictly ascending")]
    InvalidUserCounts,
    #[error("throughput gain must exceed -1, got {0}")]
    InvalidGain(f64),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// PSM prompts, no cross-request reuse.
    Baseline,
    /// PSM prompts with prefix caching.
    Fim,
    /// Gateway-rewritten prompts with prefix caching.
    Efim,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Baseline, Scheme::Fim, Scheme::Efim];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Baseline => "baseline",
            Scheme::Fim => "fim",
            Scheme::Efim => "efim",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Scheme::Baseline),
            "fim" => Ok(Scheme::Fim),
            "efim" => Ok(Scheme::Efim),
            other => Err(format!("unknown scheme {other:?} (expected baseline, fim or efim)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub prefill_cost_per_token: f64,
    pub decode_cost_per_token: f64,
    /// Wall-clock seconds per abstract time unit, for reporting only.
    pub seconds_per_time_unit: f64,
}

impl Default for CostModel {
    /// One time unit per decoded token; prefill priced so that a 2100-token
    /// prompt takes nine times as long as decoding 32 tokens.
    fn default() -> Self {
        let decode = 1.0;
        Self {
            prefill_cost_per_token: CALIBRATION_PREFILL_TO_DECODE * CALIBRATION_OUTPUT_TOKENS * decode
                / CALIBRATION_PROMPT_TOKENS,
            decode_cost_per_token: decode,
            seconds_per_time_unit: 0.02,
        }
    }
}

impl CostModel {
    pub fn prefill_time(&self, tokens: usize) -> f64 {
        self.prefill_cost_per_token * tokens as f64
    }

    pub fn decode_time(&self, tokens: usize) -> f64 {
        self.decode_cost_per_token * tokens as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub block_size: usize,
    pub cache_capacity_tokens: usize,
    #[serde(flatten)]
    pub cost: CostModel,
    pub scheme: Scheme,
}

impl Default for EngineConfig {
    /// 16-token blocks and room for 120k cached tokens, roughly what an
    /// 80 GB accelerator leaves for the KV cache of a 7B fp16 model.
    fn default() -> Self {
        Self {
            block_size: 16,
            cache_capacity_tokens: 120_000,
            cost: CostModel::default(),
            scheme: Scheme::Efim,
        }
    }
}

impl EngineConfig {
    pub fn with_scheme(&self, scheme: Scheme) -> Self {
        Self { scheme, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.block_size == 0 {
            return Err(SimError::InvalidConfig("block_size must be positive".into()));
        }
        let c = &self.cost;
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(c.prefill_cost_per_token) || !positive(c.decode_cost_per_token) || !positive(c.seconds_per_time_unit) {
            return Err(SimError::InvalidConfig("costs must be positive and finite".into()));
        }
        Ok(())
    }

    /// Baseline runs without a cache regardless of the configured capacity.
    pub fn effective_capacity(&self) -> usize {
        match self.scheme {
            Scheme::Baseline => 0,
            _ => self.cache_capacity_tokens,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundBreakdown {
    pub round: usize,
    pub requests: usize,
    pub prefill_time: f64,
    pub decode_time: f64,
    pub reused_tokens: u64,
    pub computed_tokens: u64,
    pub avg_latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scheme: Scheme,
    pub workload_fingerprint: String,
    pub num_users: usize,
    pub num_requests: usize,
    pub block_size: usize,
    pub cache_capacity_tokens: usize,
    pub makespan: f64,
    pub avg_latency: f64,
    pub avg_latency_seconds: f64,
    pub request_throughput: f64,
    pub input_token_throughput: f64,
    pub reuse_rate: f64,
    pub total_prompt_tokens: u64,
    pub reused_tokens: u64,
    pub computed_tokens: u64,
    pub evicted_tokens: u64,
    pub prefill_time: f64,
    pub decode_time: f64,
    pub gateway_outcomes: BTreeMap<String, usize>,
    pub per_round_breakdown: Vec<RoundBreakdown>,
}

impl MetricsReport {
    /// Per-round rows in a fixed column order:
    /// `round,requests,prefill_time,decode_time,reused_tokens,computed_tokens,avg_latency`.
    pub fn rounds_csv(&self) -> String {
        let mut out = String::from("round,requests,prefill_time,decode_time,reused_tokens,computed_tokens,avg_latency\n");
        for r in &self.per_round_breakdown {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{},{},{:.6}\n",
                r.round, r.requests, r.prefill_time, r.decode_time, r.reused_tokens, r.computed_tokens, r.avg_latency
            ));
        }
        out
    }
}

/// One request as served by the simulated engine.
#[derive(Debug, Clone, PartialEq)]
pub struct ServedRequest {
    pub user_id: String,
    pub round: usize,
    pub outcome: Option<Outcome>,
    pub tokens: TokenSeq,
    pub reused_tokens: usize,
    pub output_tokens: usize,
    pub arrival: f64,
    pub start: f64,
    pub completion: f64,
}

impl ServedRequest {
    pub fn computed_tokens(&self) -> usize {
        self.tokens.len() - self.reused_tokens
    }

    pub fn latency(&self) -> f64 {
        self.completion - self.arrival
    }
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub report: MetricsReport,
    /// Requests in service order.
    pub served: Vec<ServedRequest>,
}

/// Stable hash of a workload, used to refuse comparing unrelated runs.
pub fn workload_fingerprint(scripts: &[UserScript]) -> String {
    let mut buf = Vec::new();
    workload::write_jsonl(scripts, &mut buf).expect("writing to memory");
    hex::encode(&Sha256::digest(&buf)[..8])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Completion,
    Arrival { user: usize, round: usize },
}

#[derive(Debug)]
struct Event {
    time: f64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed: BinaryHeap is a max-heap. Completions precede arrivals at
    // the same instant, arrivals are ordered by user.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then_with(|| other.kind.cmp(&self.kind))
    }
}

struct Pending {
    user: usize,
    round: usize,
    arrival: f64,
    outcome: Option<Outcome>,
    tokens: TokenSeq,
    output_tokens: usize,
}

struct InService {
    pending: Pending,
    lease: CacheLease,
    start: f64,
}

/// Runs the workload and returns the metrics.
pub fn run(scripts: &[UserScript], config: &EngineConfig, vocab: &Vocabulary) -> Result<MetricsReport, SimError> {
    run_traced(scripts, config, vocab).map(|o| o.report)
}

/// Runs the workload and also returns every served request.
pub fn run_traced(scripts: &[UserScript], config: &EngineConfig, vocab: &Vocabulary) -> Result<SimOutcome, SimError> {
    config.validate()?;
    if scripts.iter().all(|s| s.rounds.is_empty()) {
        return Err(SimError::EmptyWorkload);
    }
    let specials = vocab.specials();
    let mut cache = CacheTree::new(config.block_size, config.effective_capacity())?;
    let pool = SessionPool::new();
    let mut events = BinaryHeap::new();
    let mut queue: VecDeque<Pending> = VecDeque::new();
    let mut busy: Option<InService> = None;
    let mut served: Vec<ServedRequest> = Vec::new();

    for (user, script) in scripts.iter().enumerate() {
        if !script.rounds.is_empty() {
            events.push(Event {
                time: 0.0,
                kind: EventKind::Arrival { user, round: 0 },
            });
        }
    }

    let start_next = |now: f64, queue: &mut VecDeque<Pending>, cache: &mut CacheTree, events: &mut BinaryHeap<Event>| {
        let pending = queue.pop_front()?;
        let lease = cache.match_prefix(&pending.tokens);
        let service = config.cost.prefill_time(pending.tokens.len() - lease.matched_len())
            + config.cost.decode_time(pending.output_tokens);
        events.push(Event {
            time: now + service,
            kind: EventKind::Completion,
        });
        Some(InService {
            pending,
            lease,
            start: now,
        })
    };

    while let Some(Event { time: now, kind }) = events.pop() {
        match kind {
            EventKind::Arrival { user, round } => {
                let script = &scripts[user];
                let ev = &script.rounds[round];
                let (outcome, tokens) = match config.scheme {
                    Scheme::Efim => {
                        let req = InfillRequest {
                            user_id: script.user_id.clone(),
                            prefix: ev.prefix.clone(),
                            suffix: ev.suffix.clone(),
                            max_new_tokens: ev.expected_output_tokens.max(1),
                        };
                        let decision = pool.handle_request(&req, specials)?;
                        (Some(decision.outcome), decision.encode(vocab))
                    }
                    Scheme::Fim | Scheme::Baseline => (
                        None,
                        PromptLayout::psm(ev.prefix.as_bytes(), ev.suffix.as_bytes()).encode(vocab, &[]),
                    ),
                };
                queue.push_back(Pending {
                    user,
                    round,
                    arrival: now,
                    outcome,
                    tokens,
                    output_tokens: ev.expected_output_tokens as usize,
                });
                if busy.is_none() {
                    busy = start_next(now, &mut queue, &mut cache, &mut events);
                }
            }
            EventKind::Completion => {
                let InService {
                    pending,
                    mut lease,
                    start,
                } = busy.take().expect("completion without a request in service");
                let reused = lease.matched_len();
                cache.insert(&mut lease, &pending.tokens);
                cache.release(lease)?;
                let script = &scripts[pending.user];
                if pending.round + 1 < script.rounds.len() {
                    events.push(Event {
                        time: now,
                        kind: EventKind::Arrival {
                            user: pending.user,
                            round: pending.round + 1,
                        },
                    });
                }
                served.push(ServedRequest {
                    user_id: script.user_id.clone(),
                    round: pending.round,
                    outcome: pending.outcome,
                    tokens: pending.tokens,
                    reused_tokens: reused,
                    output_tokens: pending.output_tokens,
                    arrival: pending.arrival,
                    start,
                    completion: now,
                });
                busy = start_next(now, &mut queue, &mut cache, &mut events);
            }
        }
    }

    let report = summarize(scripts, config, &cache, &served);
    Ok(SimOutcome { report, served })
}

fn summarize(scripts: &[UserScript], config: &EngineConfig, cache: &CacheTree, served: &[ServedRequest]) -> MetricsReport {
    let n = served.len();
    let makespan = served.iter().map(|s| s.completion).fold(0.0, f64::max);
    let total_prompt: u64 = served.iter().map(|s| s.tokens.len() as u64).sum();
    let reused: u64 = served.iter().map(|s| s.reused_tokens as u64).sum();
    let computed = total_prompt - reused;
    let avg_latency = served.iter().map(ServedRequest::latency).sum::<f64>() / n as f64;
    let cost = &config.cost;

    let mut rounds: BTreeMap<usize, (RoundBreakdown, f64)> = BTreeMap::new();
    let mut outcomes = BTreeMap::new();
    for s in served {
        let (row, latency_sum) = rounds.entry(s.round).or_insert_with(|| {
            (
                RoundBreakdown {
                    round: s.round,
                    ..RoundBreakdown::default()
                },
                0.0,
            )
        });
        row.requests += 1;
        row.prefill_time += cost.prefill_time(s.computed_tokens());
        row.decode_time += cost.decode_time(s.output_tokens);
        row.reused_tokens += s.reused_tokens as u64;
        row.computed_tokens += s.computed_tokens() as u64;
        *latency_sum += s.latency();
        if let Some(o) = s.outcome {
            *outcomes.entry(o.as_str().to_string()).or_insert(0) += 1;
        }
    }
    let per_round_breakdown: Vec<RoundBreakdown> = rounds
        .into_values()
        .map(|(mut row, latency_sum)| {
            row.avg_latency = latency_sum / row.requests as f64;
            row
        })
        .collect();
    let prefill_time = per_round_breakdown.iter().map(|r| r.prefill_time).sum();
    let decode_time = per_round_breakdown.iter().map(|r| r.decode_time).sum();
    let stats = cache.stats();
    debug_assert_eq!(stats.reused_tokens, reused);

    MetricsReport {
        scheme: config.scheme,
        workload_fingerprint: workload_fingerprint(scripts),
        num_users: scripts.len(),
        num_requests: n,
        block_size: config.block_size,
        cache_capacity_tokens: config.effective_capacity(),
        makespan,
        avg_latency,
        avg_latency_seconds: avg_latency * cost.seconds_per_time_unit,
        request_throughput: n as f64 / makespan,
        input_token_throughput: total_prompt as f64 / makespan,
        reuse_rate: if total_prompt == 0 { 0.0 } else { reused as f64 / total_prompt as f64 },
        total_prompt_tokens: total_prompt,
        reused_tokens: reused,
        computed_tokens: computed,
        evicted_tokens: stats.evicted_tokens,
        prefill_time,
        decode_time,
        gateway_outcomes: outcomes,
        per_round_breakdown,
    }
}

/// One run per user count. Every count reuses `spec.seed`, and user `i`'s
/// script is the same in every run.
pub fn sweep_users(
    spec: &WorkloadSpec,
    config: &EngineConfig,
    vocab: &Vocabulary,
    user_counts: &[usize],
) -> Result<Vec<(usize, MetricsReport)>, SimError> {
    if user_counts.is_empty() || user_counts[0] == 0 || user_counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SimError::InvalidUserCounts);
    }
    user_counts
        .iter()
        .map(|&users| {
            let spec = WorkloadSpec {
                num_users: users,
                ..spec.clone()
            };
            let scripts = workload::generate(&spec, spec.seed)?;
            Ok((users, run(&scripts, config, vocab)?))
        })
        .collect()
}

/// Serving-cost reduction implied by a throughput gain: `1 - 1 / (1 + gain)`.
pub fn cost_reduction(throughput_gain: f64) -> Result<f64, SimError> {
    if throughput_gain.is_nan() || throughput_gain <= -1.0 {
        return Err(SimError::InvalidGain(throughput_gain));
    }
    Ok(1.0 - 1.0 / (1.0 + throughput_gain))
}
