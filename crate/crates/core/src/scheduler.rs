//! Request scheduling over the simulated GPU and the event loop that drives
//! it.
//!
//! Requests go through admission (prefix match, memory check, reactive
//! loads, path pinning) and then dispatch (prefill, then batched decode).
//! Admission reserves every byte the request will need, so an admitted
//! request can always run once the GPU is free.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::CostModel;
use crate::engine::{EventKind, EventQueue};
use crate::metrics::{Summary, TraceRow, TransferRow};
use crate::radix_cache::{
    is_legal_transition, update_fixed_heuristic, CacheError, EvictionPolicy, EvictionPriority, NodeId,
    NodeStatus, RadixCache, StatusEvent, Token,
};
use crate::step_graph::{next_step_agents, AgentId, AggregationKind, Step, StepGraphError, StepMap};
use crate::tier::{BackupScope, TierError, TierManager, TierMode, TransferJob};
use crate::workload::Workload;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// LRU eviction, victims discarded.
    LruGpuOnly,
    /// LRU eviction with a host backup tier and on-demand loads.
    LruReactiveHicache,
    /// Step-graph priorities, host backup of fixed prompts, prefetching and
    /// status-aware dispatch.
    Kvflow,
    /// Step-graph priorities with victims discarded; isolates the eviction
    /// policy from the tiering machinery.
    WorkflowGpuOnly,
}

impl Policy {
    pub const ALL: [Policy; 4] = [
        Policy::LruGpuOnly,
        Policy::LruReactiveHicache,
        Policy::Kvflow,
        Policy::WorkflowGpuOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::LruGpuOnly => "lru_gpu_only",
            Policy::LruReactiveHicache => "lru_reactive_hicache",
            Policy::Kvflow => "kvflow",
            Policy::WorkflowGpuOnly => "workflow_gpu_only",
        }
    }

    pub fn eviction(self) -> EvictionPolicy {
        match self {
            Policy::LruGpuOnly | Policy::LruReactiveHicache => EvictionPolicy::Lru,
            Policy::Kvflow | Policy::WorkflowGpuOnly => EvictionPolicy::WorkflowAware,
        }
    }

    pub fn tier_mode(self) -> TierMode {
        match self {
            Policy::LruGpuOnly | Policy::WorkflowGpuOnly => TierMode::Discard,
            Policy::LruReactiveHicache | Policy::Kvflow => TierMode::Offload,
        }
    }

    pub fn backup_scope(self) -> BackupScope {
        match self {
            Policy::Kvflow => BackupScope::FixedPrompts,
            _ => BackupScope::All,
        }
    }

    pub fn prefetches(self) -> bool {
        self == Policy::Kvflow
    }

    pub fn status_aware(self) -> bool {
        self == Policy::Kvflow
    }

    pub fn uses_steps(self) -> bool {
        matches!(self, Policy::Kvflow | Policy::WorkflowGpuOnly)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Policy::ALL
            .into_iter()
            .find(|p| p.as_str() == norm)
            .ok_or_else(|| format!("unknown policy `{s}`"))
    }
}

/// How agent fixed-prompt boundaries are learned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    /// The workload tells the cache where each fixed part ends.
    Explicit,
    /// Inferred from the common prefix of consecutive invocations.
    Heuristic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub policy: Policy,
    pub max_concurrent_prefetch: usize,
    pub max_running: usize,
    pub prefetch_enabled: bool,
    /// Share of the uncached prefill that can hide a pending load.
    pub overlap_fraction: f64,
    pub boundary: BoundaryMode,
    pub heuristic_window: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            policy: Policy::Kvflow,
            max_concurrent_prefetch: 2,
            max_running: 256,
            prefetch_enabled: true,
            overlap_fraction: 0.5,
            boundary: BoundaryMode::Explicit,
            heuristic_window: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub cost: CostModel,
    pub gpu_capacity_bytes: u64,
    pub cpu_capacity_bytes: Option<u64>,
    pub scheduler: SchedulerConfig,
    /// Check accounting and status legality after every event.
    pub check_invariants: bool,
}

impl SimConfig {
    pub fn new(cost: CostModel, gpu_capacity_bytes: u64, policy: Policy) -> Self {
        Self {
            cost,
            gpu_capacity_bytes,
            cpu_capacity_bytes: None,
            scheduler: SchedulerConfig {
                policy,
                ..SchedulerConfig::default()
            },
            check_invariants: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("simulation stalled at t={time:.6}s with {pending} unfinished requests")]
    Deadlock { time: f64, pending: usize },
    #[error(transparent)]
    Tier(#[from] TierError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Graph(#[from] StepGraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestState {
    Queued,
    WaitingLoad,
    RunningPrefill,
    RunningDecode,
    Done,
}

#[derive(Debug, Clone)]
pub struct Request {
    pub id: usize,
    pub client: usize,
    pub agent: AgentId,
    pub iteration: usize,
    pub invocation: usize,
    pub measured: bool,
    pub prompt: Vec<Token>,
    pub output: Vec<Token>,
    pub fixed_len: usize,
    pub arrival: f64,
    pub state: RequestState,
    pub step_metadata: StepMap,
    admitted: bool,
    /// Prompt tokens matched and pinned at admission.
    pinned: usize,
    /// Prompt tokens locked while running.
    locked: usize,
    /// GPU bytes allocated to this request but not yet owned by a node.
    held: u64,
    blocked_since: Option<f64>,
    wait_until: f64,
    wake_at: Option<f64>,
    generated: usize,
    pub prefill_start: f64,
    pub first_token: f64,
    pub done: f64,
    pub hit_tokens: usize,
    pub loaded_tokens: usize,
    pub loaded_bytes: u64,
    pub stall: f64,
}

#[derive(Debug, Clone, Default)]
struct ClientRt {
    iter: usize,
    iter_start: f64,
    released: Vec<bool>,
    finished_inv: Vec<bool>,
    pending: BTreeSet<AgentId>,
    finished: bool,
    at_barrier: bool,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub policy: Policy,
    pub label: String,
    pub rows: Vec<TraceRow>,
    pub transfers: Vec<TransferRow>,
    pub summary: Summary,
    /// (client, iteration, latency) for measured iterations.
    pub workflow_latencies: Vec<(usize, usize, f64)>,
    pub measure_start: f64,
    pub end_time: f64,
    pub events: u64,
    pub violations: Vec<String>,
    pub status_log: Vec<StatusEvent>,
    /// Final cache snapshot.
    pub cache: RadixCache,
}

#[derive(Debug, PartialEq, Eq)]
enum Attempt {
    Dispatched,
    Blocked,
}

const MAX_VIOLATIONS: usize = 64;

pub struct Simulator<'w> {
    cfg: SimConfig,
    workload: &'w Workload,
    cache: RadixCache,
    tier: TierManager,
    events: EventQueue,
    now: f64,
    requests: Vec<Option<Request>>,
    /// Request id offset per (client, iteration).
    id_base: Vec<Vec<usize>>,
    queue: Vec<usize>,
    decode_batch: Vec<usize>,
    current_decode: Vec<usize>,
    gpu_busy: bool,
    running: usize,
    clients: Vec<ClientRt>,
    all_steps: StepMap,
    priorities_dirty: bool,
    barrier_pending: bool,
    measure_start: f64,
    last_prompt: BTreeMap<AgentId, Vec<Token>>,
    lcp_history: BTreeMap<AgentId, Vec<usize>>,
    latencies: Vec<(usize, usize, f64)>,
    violations: Vec<String>,
    log_checked: usize,
    event_count: u64,
}

fn lcp(a: &[Token], b: &[Token]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// Runs `workload` to completion under `cfg`.
pub fn simulate(cfg: &SimConfig, workload: &Workload) -> Result<SimOutput, SimError> {
    Simulator::new(cfg.clone(), workload)?.run()
}

impl<'w> Simulator<'w> {
    pub fn new(cfg: SimConfig, workload: &'w Workload) -> Result<Self, SimError> {
        cfg.cost.validate().map_err(|e| SimError::Config(e.to_string()))?;
        let s = &cfg.scheduler;
        if !(0.0..=1.0).contains(&s.overlap_fraction) {
            return Err(SimError::Config(format!(
                "overlap_fraction must be in [0, 1], got {}",
                s.overlap_fraction
            )));
        }
        if s.max_running == 0 {
            return Err(SimError::Config("max_running must be at least 1".into()));
        }
        let mut cache = RadixCache::new(cfg.cost.bytes_per_token);
        if cfg.check_invariants {
            cache.enable_status_log();
        }
        let mut tier = TierManager::new(cfg.gpu_capacity_bytes, cfg.cost);
        tier.cpu_capacity = cfg.cpu_capacity_bytes;

        let mut id_base = Vec::new();
        let mut next = 0;
        for c in &workload.clients {
            let mut bases = Vec::new();
            for it in &c.iterations {
                bases.push(next);
                next += it.invocations.len();
            }
            id_base.push(bases);
        }
        let mut all_steps = StepMap::new();
        for c in &workload.clients {
            for a in c.graph.agents() {
                all_steps.insert(a.clone(), Step::Unreachable);
            }
        }
        Ok(Self {
            cache,
            tier,
            events: EventQueue::new(),
            now: 0.0,
            requests: vec![None; next],
            id_base,
            queue: Vec::new(),
            decode_batch: Vec::new(),
            current_decode: Vec::new(),
            gpu_busy: false,
            running: 0,
            clients: vec![ClientRt::default(); workload.clients.len()],
            all_steps,
            priorities_dirty: true,
            barrier_pending: false,
            measure_start: 0.0,
            last_prompt: BTreeMap::new(),
            lcp_history: BTreeMap::new(),
            latencies: Vec::new(),
            violations: Vec::new(),
            log_checked: 0,
            event_count: 0,
            cfg,
            workload,
        })
    }

    fn policy(&self) -> Policy {
        self.cfg.scheduler.policy
    }

    pub fn run(mut self) -> Result<SimOutput, SimError> {
        for (c, wf) in self.workload.clients.iter().enumerate() {
            if wf.iterations.is_empty() {
                self.clients[c].finished = true;
            } else {
                self.events.push(wf.start_time, EventKind::Arrival { client: c });
            }
        }
        while let Some(ev) = self.events.pop() {
            debug_assert!(ev.time >= self.now, "clock went backwards");
            self.now = ev.time;
            self.cache.set_time(self.now);
            self.event_count += 1;
            match ev.kind {
                EventKind::Arrival { client } => self.start_iteration(client)?,
                EventKind::PrefillDone { request } => self.on_prefill_done(request),
                EventKind::DecodeIter => self.on_decode_iter(),
                EventKind::TransferDone { job } => {
                    self.tier.complete(&mut self.cache, job)?;
                    self.check_barrier();
                }
                EventKind::WorkflowStepDone { request } => self.on_step_done(request)?,
                EventKind::Wake => {}
            }
            self.schedule()?;
            if self.cfg.check_invariants {
                self.check_invariants();
            }
        }
        let pending = self
            .requests
            .iter()
            .filter(|r| r.as_ref().is_none_or(|r| r.state != RequestState::Done))
            .count();
        if pending > 0 {
            return Err(SimError::Deadlock {
                time: self.now,
                pending,
            });
        }
        Ok(self.finish())
    }

    fn finish(self) -> SimOutput {
        let leftover: u64 = self
            .cache
            .node_ids()
            .map(|id| self.cache.node(id))
            .filter(|n| n.prefetched_unused)
            .map(|n| n.kv_bytes())
            .sum();
        let wasted = self.tier.wasted_prefetch_bytes + leftover;
        let rows: Vec<TraceRow> = self
            .requests
            .iter()
            .flatten()
            .map(|r| {
                let prompt_tokens = r.prompt.len();
                let matched = r.hit_tokens + r.loaded_tokens;
                TraceRow {
                    request_id: r.id,
                    client: self.workload.clients[r.client].client.0,
                    agent: r.agent.name.clone(),
                    arrival: r.arrival,
                    prefill_start: r.prefill_start,
                    first_token: r.first_token,
                    done: r.done,
                    matched_tokens: matched,
                    recomputed_tokens: prompt_tokens - matched,
                    loaded_bytes: r.loaded_bytes,
                    stall_time: r.stall,
                    iteration: r.iteration,
                    measured: r.measured,
                    submit: self.workload.clients[r.client].start_time,
                    prompt_tokens,
                    hit_tokens: r.hit_tokens,
                    loaded_tokens: r.loaded_tokens,
                    fixed_tokens: r.fixed_len,
                    fixed_hit: r.fixed_len > 0 && matched >= r.fixed_len,
                }
            })
            .collect();
        let lat: Vec<f64> = self.latencies.iter().map(|l| l.2).collect();
        let end = rows.iter().filter(|r| r.measured).map(|r| r.done).fold(self.measure_start, f64::max);
        let summary = Summary::from_run(
            self.policy().as_str(),
            &self.workload.label,
            &rows,
            &lat,
            end - self.measure_start,
            wasted,
        );
        SimOutput {
            policy: self.policy(),
            label: self.workload.label.clone(),
            transfers: self.tier.completed_jobs().iter().map(TransferRow::from).collect(),
            rows,
            summary,
            workflow_latencies: self.latencies,
            measure_start: self.measure_start,
            end_time: self.now,
            events: self.event_count,
            violations: self.violations,
            status_log: self.cache.status_log().to_vec(),
            cache: self.cache,
        }
    }

    fn push_job(&mut self, job: &TransferJob) {
        self.events
            .push(job.completion_time, EventKind::TransferDone { job: job.id });
    }

    fn req(&self, id: usize) -> &Request {
        self.requests[id].as_ref().expect("released request")
    }

    fn req_mut(&mut self, id: usize) -> &mut Request {
        self.requests[id].as_mut().expect("released request")
    }

    // ---- workflow progress -------------------------------------------------

    fn start_iteration(&mut self, c: usize) -> Result<(), SimError> {
        let workload = self.workload;
        let wf = &workload.clients[c];
        let rt = &mut self.clients[c];
        let n = wf.iterations[rt.iter].invocations.len();
        rt.iter_start = self.now;
        rt.released = vec![false; n];
        rt.finished_inv = vec![false; n];
        rt.at_barrier = false;
        let iter = rt.iter;
        for i in 0..n {
            if wf.iterations[iter].invocations[i].deps.is_empty() {
                self.release(c, i);
            }
        }
        self.update_steps(c)?;
        self.attach_steps(c);
        Ok(())
    }

    fn release(&mut self, c: usize, i: usize) {
        let workload = self.workload;
        let wf = &workload.clients[c];
        let rt = &mut self.clients[c];
        let it = &wf.iterations[rt.iter];
        let inv = &it.invocations[i];
        rt.released[i] = true;
        rt.pending.insert(inv.agent.clone());
        let id = self.id_base[c][rt.iter] + i;
        self.requests[id] = Some(Request {
            id,
            client: c,
            agent: inv.agent.clone(),
            iteration: rt.iter,
            invocation: i,
            measured: !it.warmup,
            prompt: inv.prompt.clone(),
            output: inv.output.clone(),
            fixed_len: inv.fixed_len,
            arrival: self.now,
            state: RequestState::Queued,
            step_metadata: StepMap::new(),
            admitted: false,
            pinned: 0,
            locked: 0,
            held: 0,
            blocked_since: None,
            wait_until: 0.0,
            wake_at: None,
            generated: 0,
            prefill_start: 0.0,
            first_token: 0.0,
            done: 0.0,
            hit_tokens: 0,
            loaded_tokens: 0,
            loaded_bytes: 0,
            stall: 0.0,
        });
        self.queue.push(id);
    }

    /// Copies the client's current steps onto its newly released requests.
    fn attach_steps(&mut self, c: usize) {
        let agents: Vec<AgentId> = self.workload.clients[c].graph.agents().to_vec();
        let steps: StepMap = agents
            .iter()
            .map(|a| (a.clone(), self.all_steps.get(a).copied().unwrap_or(Step::Unreachable)))
            .collect();
        let ids: Vec<usize> = self.queue.clone();
        for id in ids {
            let r = self.req_mut(id);
            if r.client == c && r.step_metadata.is_empty() {
                r.step_metadata = steps.clone();
            }
        }
    }

    /// Recomputes steps-to-execution for client `c` from its pending agents
    /// (or, between iterations, the agents that will start the next one).
    fn update_steps(&mut self, c: usize) -> Result<(), SimError> {
        if !self.policy().uses_steps() {
            return Ok(());
        }
        let workload = self.workload;
        let wf = &workload.clients[c];
        let rt = &self.clients[c];
        let active: BTreeSet<AgentId> = if !rt.pending.is_empty() {
            rt.pending.clone()
        } else if !rt.finished && rt.iter < wf.iterations.len() {
            wf.iterations[rt.iter]
                .invocations
                .iter()
                .filter(|i| i.deps.is_empty())
                .map(|i| i.agent.clone())
                .collect()
        } else {
            BTreeSet::new()
        };
        let steps = if active.is_empty() {
            StepMap::new()
        } else {
            wf.graph.compute_steps(&active)?
        };
        for a in wf.graph.agents() {
            let s = steps.get(a).copied().unwrap_or(Step::Unreachable);
            self.all_steps.insert(a.clone(), s);
        }
        self.priorities_dirty = true;
        Ok(())
    }

    fn ensure_priorities(&mut self) {
        if self.policy().uses_steps() && self.priorities_dirty {
            self.cache.refresh_priorities(&self.all_steps);
            self.priorities_dirty = false;
        }
    }

    fn on_step_done(&mut self, id: usize) -> Result<(), SimError> {
        self.finalize_request(id)?;
        let (c, i, agent) = {
            let r = self.req(id);
            (r.client, r.invocation, r.agent.clone())
        };
        let workload = self.workload;
        let wf = &workload.clients[c];
        let rt = &mut self.clients[c];
        rt.finished_inv[i] = true;
        rt.pending.remove(&agent);
        let it = &wf.iterations[rt.iter];
        let ready: Vec<usize> = (0..it.invocations.len())
            .filter(|&j| !rt.released[j] && !it.invocations[j].deps.is_empty())
            .filter(|&j| {
                let inv = &it.invocations[j];
                let mut done = inv.deps.iter().map(|&d| rt.finished_inv[d]);
                match inv.release {
                    AggregationKind::MaxPlusOne => done.all(|d| d),
                    AggregationKind::MinPlusOne => done.any(|d| d),
                }
            })
            .collect();
        for j in ready {
            self.release(c, j);
        }
        let rt = &mut self.clients[c];
        if rt.finished_inv.iter().all(|&d| d) {
            let it = &wf.iterations[rt.iter];
            if !it.warmup {
                self.latencies.push((c, rt.iter, self.now - rt.iter_start));
            }
            rt.iter += 1;
            if rt.iter == wf.iterations.len() {
                rt.finished = true;
            } else if it.warmup && !wf.iterations[rt.iter].warmup {
                rt.at_barrier = true;
                if self.clients.iter().all(|c| c.finished || c.at_barrier) {
                    self.finish_warmup()?;
                }
            } else {
                self.start_iteration(c)?;
                return Ok(());
            }
        }
        self.update_steps(c)?;
        self.attach_steps(c);
        Ok(())
    }

    /// Backs up every GPU-only fixed prompt, then waits for the links to
    /// drain before measured iterations start.
    fn finish_warmup(&mut self) -> Result<(), SimError> {
        if self.policy().tier_mode() == TierMode::Offload {
            let nodes: Vec<NodeId> = self
                .cache
                .node_ids()
                .filter(|&id| id != self.cache.root())
                .filter(|&id| {
                    let n = self.cache.node(id);
                    n.status == NodeStatus::InGpu && !n.cpu_copy && !n.backup_pending
                })
                .filter(|&id| self.cache.is_fixed_prompt_node(id))
                .collect();
            for n in nodes {
                let job = self.tier.begin_backup(&mut self.cache, n, self.now)?;
                self.push_job(&job);
            }
        }
        self.barrier_pending = true;
        self.check_barrier();
        Ok(())
    }

    fn check_barrier(&mut self) {
        if !self.barrier_pending || self.tier.in_flight().next().is_some() {
            return;
        }
        self.barrier_pending = false;
        self.measure_start = self.now;
        for (c, rt) in self.clients.iter().enumerate() {
            if rt.at_barrier {
                let at = self.now + self.workload.clients[c].start_time;
                self.events.push(at, EventKind::Arrival { client: c });
            }
        }
    }

    // ---- scheduling --------------------------------------------------------

    fn schedule(&mut self) -> Result<(), SimError> {
        if !self.gpu_busy {
            self.dispatch_or_decode()?;
        }
        self.maybe_prefetch()
    }

    fn dispatch_or_decode(&mut self) -> Result<(), SimError> {
        if self.running < self.cfg.scheduler.max_running {
            let status_aware = self.policy().status_aware();
            for id in self.queue.clone() {
                match self.try_dispatch(id)? {
                    Attempt::Dispatched => return Ok(()),
                    Attempt::Blocked if !status_aware => break,
                    Attempt::Blocked => {}
                }
            }
        }
        if !self.decode_batch.is_empty() {
            self.current_decode = self.decode_batch.clone();
            let t = self.cfg.cost.decode_iter_time(self.current_decode.len());
            self.events.push(self.now + t, EventKind::DecodeIter);
            self.gpu_busy = true;
        }
        Ok(())
    }

    fn block(&mut self, id: usize, until: f64) {
        let now = self.now;
        let r = self.req_mut(id);
        r.state = RequestState::WaitingLoad;
        r.blocked_since.get_or_insert(now);
        r.wait_until = until;
    }

    fn uncached_prefill(&self, id: usize, matched: usize) -> f64 {
        let r = self.req(id);
        self.cfg.cost.prefill_time((r.prompt.len() - matched) as u64)
    }

    fn try_dispatch(&mut self, id: usize) -> Result<Attempt, SimError> {
        if !self.req(id).admitted && self.admit(id)? == Attempt::Blocked {
            return Ok(Attempt::Blocked);
        }
        let pinned = self.req(id).pinned;
        let path = self.cache.peek_prefix(&self.req(id).prompt[..pinned]).node_path;
        let latest = path
            .iter()
            .filter(|&&n| self.cache.node(n).status == NodeStatus::Loading)
            .filter_map(|&n| self.tier.job_for(n).map(|j| j.completion_time))
            .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.max(t))));
        if let Some(done) = latest {
            let overlap = self.cfg.scheduler.overlap_fraction * self.uncached_prefill(id, pinned);
            let ready = (done - overlap).max(self.now);
            if ready > self.now {
                self.block(id, ready);
                if self.req(id).wake_at != Some(ready) {
                    self.req_mut(id).wake_at = Some(ready);
                    self.events.push(ready, EventKind::Wake);
                }
                return Ok(Attempt::Blocked);
            }
        }
        self.dispatch(id)?;
        Ok(Attempt::Dispatched)
    }

    /// Frees GPU memory until `bytes` are available, counting offloads
    /// already in flight. Returns whether they are available now.
    fn make_room(&mut self, bytes: u64, filter: impl Fn(&crate::radix_cache::CacheNode) -> bool) -> Result<bool, SimError> {
        let free = self.tier.pool.free();
        if free >= bytes {
            return Ok(true);
        }
        let deficit = bytes - free;
        let pending = self.tier.pending_offload_bytes();
        if pending < deficit {
            self.ensure_priorities();
            let p = self.policy();
            match self.tier.evict(
                &mut self.cache,
                deficit - pending,
                p.eviction(),
                p.tier_mode(),
                p.backup_scope(),
                self.now,
                filter,
            ) {
                Ok(out) => {
                    for job in out.offloads {
                        let job = self.tier.job(job).expect("in flight").clone();
                        self.push_job(&job);
                    }
                }
                Err(TierError::Cache(CacheError::InsufficientEvictable { .. })) => return Ok(false),
                Err(e) => return Err(e.into()),
            }
        }
        Ok(self.tier.pool.free() >= bytes)
    }

    /// Matches the prompt, reserves memory for the whole request, issues
    /// loads for host-only prefix nodes and pins the matched path.
    fn admit(&mut self, id: usize) -> Result<Attempt, SimError> {
        let prompt = self.req(id).prompt.clone();
        let mut m = self.cache.match_prefix(&prompt);
        if let Some((node, k)) = m.partial {
            if self.cache.node(node).status.is_transferring() {
                let until = self.tier.job_for(node).map_or(self.now, |j| j.completion_time);
                self.block(id, until);
                return Ok(Attempt::Blocked);
            }
            self.cache.split(node, k);
            m = self.cache.peek_prefix(&prompt);
        }
        let path = m.node_path;
        let matched = m.matched_tokens;
        if let Some(&n) = path
            .iter()
            .find(|&&n| self.cache.node(n).status == NodeStatus::Offloading)
        {
            let until = self.tier.job_for(n).map_or(self.now, |j| j.completion_time);
            self.block(id, until);
            return Ok(Attempt::Blocked);
        }
        let cpu_nodes: Vec<NodeId> = path
            .iter()
            .copied()
            .filter(|&n| self.cache.node(n).status == NodeStatus::BackupInCpu)
            .collect();
        let load_bytes: u64 = cpu_nodes.iter().map(|&n| self.cache.node(n).kv_bytes()).sum();
        let bpt = self.cfg.cost.bytes_per_token;
        let new_bytes = (prompt.len() - matched + self.req(id).output.len()) as u64 * bpt;

        self.cache.lock_path(&path);
        if !self.make_room(load_bytes + new_bytes, |_| true)? {
            self.cache.unlock_path(&path)?;
            let r = self.req_mut(id);
            if r.state == RequestState::WaitingLoad {
                r.state = RequestState::Queued;
            }
            return Ok(Attempt::Blocked);
        }
        self.tier.pool.allocate(new_bytes)?;

        let mut hit = 0;
        let mut loaded = 0;
        let mut loaded_bytes = 0;
        for &n in &path {
            let node = self.cache.node_mut(n);
            let from_host = node.status != NodeStatus::InGpu || node.prefetched_unused;
            node.prefetched_unused = false;
            node.hit_count += 1;
            if from_host {
                loaded += node.len();
                loaded_bytes += node.kv_bytes();
            } else {
                hit += node.len();
            }
        }
        if !cpu_nodes.is_empty() {
            let job = self.tier.begin_load(&mut self.cache, &cpu_nodes, self.now, false)?;
            self.push_job(&job);
        }
        let r = self.req_mut(id);
        r.admitted = true;
        r.pinned = matched;
        r.held = new_bytes;
        r.hit_tokens = hit;
        r.loaded_tokens = loaded;
        r.loaded_bytes = loaded_bytes;
        Ok(Attempt::Dispatched)
    }

    fn dispatch(&mut self, id: usize) -> Result<(), SimError> {
        let now = self.now;
        let (prompt, pinned, agent, fixed_len) = {
            let r = self.req(id);
            (r.prompt.clone(), r.pinned, r.agent.clone(), r.fixed_len)
        };
        let pinned_path = self.cache.peek_prefix(&prompt[..pinned]).node_path;
        self.cache.unlock_path(&pinned_path)?;
        let out = self.cache.insert(&prompt);
        let new_bytes = out.new_tokens as u64 * self.cfg.cost.bytes_per_token;

        let boundary = match self.cfg.scheduler.boundary {
            BoundaryMode::Explicit => Some(fixed_len),
            BoundaryMode::Heuristic => {
                let prev = self.last_prompt.insert(agent.clone(), prompt.clone());
                let hist = self.lcp_history.entry(agent.clone()).or_default();
                if let Some(prev) = prev {
                    hist.push(lcp(&prev, &prompt));
                }
                update_fixed_heuristic(hist, self.cfg.scheduler.heuristic_window).ok()
            }
        };
        if let Some(k) = boundary.filter(|&k| k > 0 && k <= out.covered_tokens) {
            let before = self.cache.boundary(&agent);
            let node = self.cache.mark_fixed_boundary(&agent, &prompt, k)?;
            if before != Some(node) {
                self.priorities_dirty = true;
            }
        }
        let locked = out.covered_tokens;
        let lock_path = self.cache.peek_prefix(&prompt[..locked]).node_path;
        self.cache.lock_path(&lock_path);

        let prefill = self.uncached_prefill(id, pinned);
        let r = self.req_mut(id);
        debug_assert!(new_bytes <= r.held);
        r.held -= new_bytes;
        r.locked = locked;
        if let Some(since) = r.blocked_since.take() {
            r.stall += (r.wait_until.min(now) - since).max(0.0);
        }
        r.state = RequestState::RunningPrefill;
        r.prefill_start = now;
        self.queue.retain(|&q| q != id);
        self.running += 1;
        self.gpu_busy = true;
        self.events.push(now + prefill, EventKind::PrefillDone { request: id });
        Ok(())
    }

    fn on_prefill_done(&mut self, id: usize) {
        let now = self.now;
        self.gpu_busy = false;
        let r = self.req_mut(id);
        r.first_token = now;
        if r.output.is_empty() {
            r.done = now;
            r.state = RequestState::Done;
            self.running -= 1;
            self.events.push(now, EventKind::WorkflowStepDone { request: id });
        } else {
            r.state = RequestState::RunningDecode;
            self.decode_batch.push(id);
        }
    }

    fn on_decode_iter(&mut self) {
        let now = self.now;
        self.gpu_busy = false;
        for id in std::mem::take(&mut self.current_decode) {
            let r = self.req_mut(id);
            r.generated += 1;
            if r.generated == r.output.len() {
                r.done = now;
                r.state = RequestState::Done;
                self.running -= 1;
                self.decode_batch.retain(|&d| d != id);
                self.events.push(now, EventKind::WorkflowStepDone { request: id });
            }
        }
    }

    /// Caches the generated tokens and releases the request's locks and
    /// leftover memory.
    fn finalize_request(&mut self, id: usize) -> Result<(), SimError> {
        let (full, prompt_len, locked, held) = {
            let r = self.req(id);
            let mut full = r.prompt.clone();
            full.extend_from_slice(&r.output);
            (full, r.prompt.len(), r.locked, r.held)
        };
        let out = if locked == prompt_len {
            self.cache.insert(&full)
        } else {
            Default::default()
        };
        let new_bytes = out.new_tokens as u64 * self.cfg.cost.bytes_per_token;
        debug_assert!(new_bytes <= held);
        self.tier.pool.release(held - new_bytes.min(held));
        let path = self.cache.peek_prefix(&full[..locked]).node_path;
        self.cache.unlock_path(&path)?;
        self.req_mut(id).held = 0;
        Ok(())
    }

    /// Starts host-to-device loads for agents expected to run next.
    fn maybe_prefetch(&mut self) -> Result<(), SimError> {
        let cap = self.cfg.scheduler.max_concurrent_prefetch;
        if !self.policy().prefetches() || !self.cfg.scheduler.prefetch_enabled || cap == 0 {
            return Ok(());
        }
        // Requests that already arrived come first: no prefetch while one
        // of them still waits for memory.
        if self.queue.iter().any(|&id| !self.req(id).admitted) {
            return Ok(());
        }
        let candidates = next_step_agents(&self.all_steps);
        for agent in candidates {
            if self.tier.in_flight_prefetches() >= cap {
                break;
            }
            let Some(b) = self.cache.boundary(&agent) else { continue };
            let path = self.cache.path_to(b);
            if path.iter().any(|&n| self.cache.node(n).status.is_transferring()) {
                continue;
            }
            let cpu: Vec<NodeId> = path
                .iter()
                .copied()
                .filter(|&n| self.cache.node(n).status == NodeStatus::BackupInCpu)
                .collect();
            if cpu.is_empty() {
                continue;
            }
            let bytes: u64 = cpu.iter().map(|&n| self.cache.node(n).kv_bytes()).sum();
            let prio = EvictionPriority::from(self.all_steps[&agent]);
            if !self.make_room(bytes, |n| n.priority > prio)? {
                continue;
            }
            let job = self.tier.begin_load(&mut self.cache, &cpu, self.now, true)?;
            self.push_job(&job);
        }
        Ok(())
    }

    // ---- invariants --------------------------------------------------------

    fn violation(&mut self, msg: String) {
        if self.violations.len() < MAX_VIOLATIONS {
            self.violations.push(format!("t={:.9}: {msg}", self.now));
        }
    }

    fn check_invariants(&mut self) {
        let held: u64 = self
            .requests
            .iter()
            .flatten()
            .map(|r| r.held)
            .sum();
        let pool = self.tier.pool;
        let node_bytes = self.cache.gpu_node_bytes();
        if pool.used_bytes != node_bytes + held {
            self.violation(format!(
                "used {} != node bytes {} + held {}",
                pool.used_bytes, node_bytes, held
            ));
        }
        let loading = self.cache.loading_bytes();
        if pool.reserved_bytes != loading {
            self.violation(format!("reserved {} != loading {}", pool.reserved_bytes, loading));
        }
        if pool.used_bytes + pool.reserved_bytes > pool.capacity_bytes {
            self.violation(format!(
                "used {} + reserved {} exceeds capacity {}",
                pool.used_bytes, pool.reserved_bytes, pool.capacity_bytes
            ));
        }
        let cap = self.cfg.scheduler.max_concurrent_prefetch;
        if self.tier.in_flight_prefetches() > cap {
            self.violation(format!("{} prefetches in flight", self.tier.in_flight_prefetches()));
        }
        let mut seen = BTreeSet::new();
        let dup = self
            .tier
            .in_flight()
            .flat_map(|j| j.nodes.iter().copied())
            .find(|n| !seen.insert(*n));
        if let Some(n) = dup {
            self.violation(format!("node {n:?} in two transfers"));
        }
        let log = self.cache.status_log();
        let bad: Vec<String> = log[self.log_checked..]
            .iter()
            .filter_map(|e| match *e {
                StatusEvent::Changed { uid, from, to } if !is_legal_transition(from, Some(to)) => {
                    Some(format!("node {uid}: {from:?} -> {to:?}"))
                }
                StatusEvent::Removed { uid, from } if !is_legal_transition(from, None) => {
                    Some(format!("node {uid}: {from:?} removed"))
                }
                _ => None,
            })
            .collect();
        self.log_checked = log.len();
        for b in bad {
            self.violation(b);
        }
    }
}
