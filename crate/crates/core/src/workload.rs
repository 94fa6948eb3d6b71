//! Synthetic agentic workloads.
//!
//! Every client runs one workflow instance. Agent prompts are a fixed part
//! (identical across invocations) followed by a fresh dynamic part. Token
//! ids are drawn so that prompts of different clients never share a prefix:
//! ids below [`MARKER_BASE`] are random content, ids above it are
//! client/agent markers placed at the start of each fixed prompt.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::radix_cache::Token;
use crate::step_graph::{AgentId, AggregationKind, ClientId, StepGraph, StepGraphError};

pub const VOCAB_SIZE: u32 = 32_000;
/// Content tokens are drawn from `0..MARKER_BASE`.
pub const MARKER_BASE: u32 = 16_000;
const AGENTS_PER_CLIENT_SLOT: u32 = 16;
pub const MAX_CLIENTS: usize = ((VOCAB_SIZE - MARKER_BASE) / AGENTS_PER_CLIENT_SLOT) as usize;

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("num_workflows must be between 1 and {MAX_CLIENTS}, got {0}")]
    Workflows(usize),
    #[error("topology needs between 1 and 15 agents, got {0}")]
    Agents(usize),
    #[error("unknown agent `{0}` in workflow")]
    UnknownAgent(String),
    #[error("iterations must be at least 1")]
    Iterations,
    #[error("shared_prefix_len ({shared}) must be shorter than fixed_len ({fixed})")]
    SharedPrefix { shared: usize, fixed: usize },
    #[error("invalid length distribution: {0}")]
    Distribution(String),
    #[error(transparent)]
    Graph(#[from] StepGraphError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Topology {
    /// A chain of agents repeated every iteration.
    Sequential { agents: usize },
    /// A ring of agents; with four agents they are named after the
    /// Planner/Executor/Expresser/Reviewer loop.
    Cyclic { agents: usize },
    /// Planner fans out to two executors; Expresser waits for both.
    BranchMax,
    /// Planner picks one of two executors; Expresser runs after it.
    BranchMin,
    /// Four-agent plan/execute/express/review loop with sampled lengths.
    PeerStyle,
    /// User-supplied graph. Every agent runs once per iteration. An edge
    /// from an earlier to a later agent in `agents` gates it within the
    /// iteration; any other edge only loops back to the next iteration.
    Custom {
        agents: Vec<String>,
        #[serde(default)]
        edges: Vec<(String, String)>,
        /// Agents not listed use `max_plus_one`.
        #[serde(default)]
        aggregation: BTreeMap<String, AggregationKind>,
    },
}

/// Log-normal length distributions for PEER-style agents. The medians are
/// configuration defaults, not measured values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeerLengths {
    pub fixed_median: f64,
    pub dyn_median: f64,
    pub out_median: f64,
    pub sigma: f64,
}

impl Default for PeerLengths {
    fn default() -> Self {
        Self {
            fixed_median: 300.0,
            dyn_median: 100.0,
            out_median: 150.0,
            sigma: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub topology: Topology,
    /// Measured iterations per workflow.
    pub iterations: usize,
    pub fixed_len: usize,
    pub dyn_len: usize,
    pub out_len: usize,
    pub num_workflows: usize,
    /// Tokens shared by all agents of one client.
    pub shared_prefix_len: usize,
    pub seed: u64,
    /// Unmeasured iterations run before measurement starts.
    pub warmup_rounds: usize,
    /// Delay between consecutive clients' start times (seconds).
    pub arrival_stagger: f64,
    pub peer: PeerLengths,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            topology: Topology::Sequential { agents: 10 },
            iterations: 10,
            fixed_len: 8192,
            dyn_len: 32,
            out_len: 32,
            num_workflows: 1,
            shared_prefix_len: 0,
            seed: 0,
            warmup_rounds: 2,
            arrival_stagger: 0.0,
            peer: PeerLengths::default(),
        }
    }
}

impl WorkloadSpec {
    /// `fixed/dynamic/output` label, or `peer` for sampled lengths.
    pub fn label(&self) -> String {
        match self.topology {
            Topology::PeerStyle => "peer".to_string(),
            _ => format!("{}/{}/{}", self.fixed_len, self.dyn_len, self.out_len),
        }
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.num_workflows == 0 || self.num_workflows > MAX_CLIENTS {
            return Err(SpecError::Workflows(self.num_workflows));
        }
        if self.iterations == 0 {
            return Err(SpecError::Iterations);
        }
        let agents = agent_names(&self.topology).len();
        if agents == 0 || agents >= AGENTS_PER_CLIENT_SLOT as usize {
            return Err(SpecError::Agents(agents));
        }
        if !matches!(self.topology, Topology::PeerStyle)
            && self.shared_prefix_len > 0
            && self.shared_prefix_len >= self.fixed_len
        {
            return Err(SpecError::SharedPrefix {
                shared: self.shared_prefix_len,
                fixed: self.fixed_len,
            });
        }
        let p = &self.peer;
        if !(p.sigma >= 0.0 && p.sigma.is_finite()) {
            return Err(SpecError::Distribution(format!("sigma {}", p.sigma)));
        }
        for m in [p.fixed_median, p.dyn_median, p.out_median] {
            if !(m > 0.0 && m.is_finite()) {
                return Err(SpecError::Distribution(format!("median {m}")));
            }
        }
        Ok(())
    }

    /// Largest fixed prompt any agent can get, in tokens.
    pub fn max_fixed_len(&self) -> usize {
        match self.topology {
            Topology::PeerStyle => {
                let mut worst = 0;
                for c in 0..self.num_workflows {
                    let mut rng = client_rng(self.seed, c);
                    let lens = sample_peer_lengths(&self.peer, &mut rng, 4);
                    worst = worst.max(lens.iter().map(|l| l.fixed).max().unwrap_or(0));
                }
                worst
            }
            _ => self.fixed_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgentLengths {
    pub fixed: usize,
    pub dynamic: usize,
    pub output: usize,
}

/// Per-agent lengths drawn from the configured log-normal distributions.
/// A zero sigma yields the medians exactly.
pub fn sample_peer_lengths(params: &PeerLengths, rng: &mut impl Rng, agents: usize) -> Vec<AgentLengths> {
    let draw = |median: f64, rng: &mut dyn rand::RngCore| -> usize {
        if params.sigma == 0.0 {
            return median.round().max(1.0) as usize;
        }
        let dist = LogNormal::new(median.ln(), params.sigma).expect("validated parameters");
        dist.sample(rng).round().max(1.0) as usize
    };
    (0..agents)
        .map(|_| AgentLengths {
            fixed: draw(params.fixed_median, rng),
            dynamic: draw(params.dyn_median, rng),
            output: draw(params.out_median, rng),
        })
        .collect()
}

/// One agent call within a workflow iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Invocation {
    pub agent: AgentId,
    /// Fixed part followed by the dynamic part.
    pub prompt: Vec<Token>,
    pub fixed_len: usize,
    pub output: Vec<Token>,
    /// Indices of invocations in the same iteration that gate this one.
    pub deps: Vec<usize>,
    /// `MaxPlusOne`: all deps must finish; `MinPlusOne`: any one suffices.
    pub release: AggregationKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Iteration {
    pub index: usize,
    pub warmup: bool,
    pub invocations: Vec<Invocation>,
}

#[derive(Debug, Clone)]
pub struct ClientWorkflow {
    pub client: ClientId,
    pub graph: StepGraph,
    pub start_time: f64,
    /// Warmup iterations first, then measured ones.
    pub iterations: Vec<Iteration>,
}

#[derive(Debug, Clone)]
pub struct Workload {
    pub label: String,
    pub clients: Vec<ClientWorkflow>,
}

impl Workload {
    pub fn request_count(&self) -> usize {
        self.clients
            .iter()
            .flat_map(|c| &c.iterations)
            .map(|i| i.invocations.len())
            .sum()
    }

    pub fn warmup_request_count(&self) -> usize {
        self.clients
            .iter()
            .flat_map(|c| &c.iterations)
            .filter(|i| i.warmup)
            .map(|i| i.invocations.len())
            .sum()
    }
}

fn agent_names(topology: &Topology) -> Vec<String> {
    let numbered = |n: usize| (0..n).map(|i| format!("agent{i:02}")).collect();
    match *topology {
        Topology::Sequential { agents } => numbered(agents),
        Topology::Cyclic { agents: 4 } => peer_names(),
        Topology::Cyclic { agents } => numbered(agents),
        Topology::BranchMax | Topology::BranchMin => ["Planner", "Executor1", "Executor2", "Expresser"]
            .map(String::from)
            .to_vec(),
        Topology::PeerStyle => peer_names(),
        Topology::Custom { ref agents, .. } => agents.clone(),
    }
}

fn peer_names() -> Vec<String> {
    ["Planner", "Executor", "Expresser", "Reviewer"]
        .map(String::from)
        .to_vec()
}

fn client_rng(seed: u64, client: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (client as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn random_tokens(rng: &mut impl Rng, len: usize) -> Vec<Token> {
    (0..len).map(|_| rng.gen_range(0..MARKER_BASE)).collect()
}

fn client_marker(client: usize) -> Token {
    MARKER_BASE + client as u32 * AGENTS_PER_CLIENT_SLOT
}

/// Fixed prompt: optional client-wide shared prefix, an agent marker, then
/// random content.
fn fixed_prompt(rng: &mut impl Rng, client: usize, agent: usize, shared: &[Token], len: usize) -> Vec<Token> {
    if len == 0 {
        return Vec::new();
    }
    let mut tokens = shared[..shared.len().min(len - 1)].to_vec();
    tokens.push(client_marker(client) + 1 + agent as u32);
    let rest = len - tokens.len();
    tokens.extend(random_tokens(rng, rest));
    tokens
}

/// Builds the step graph and per-iteration invocation plans of every client.
pub fn generate(spec: &WorkloadSpec) -> Result<Workload, SpecError> {
    spec.validate()?;
    let names = agent_names(&spec.topology);
    let total_iters = spec.warmup_rounds + spec.iterations;
    let mut clients = Vec::with_capacity(spec.num_workflows);

    for c in 0..spec.num_workflows {
        let client = ClientId(c as u32);
        let mut rng = client_rng(spec.seed, c);
        let ids: Vec<AgentId> = names.iter().map(|n| AgentId::new(client, n.clone())).collect();

        let lengths: Vec<AgentLengths> = match spec.topology {
            Topology::PeerStyle => sample_peer_lengths(&spec.peer, &mut rng, names.len()),
            _ => vec![
                AgentLengths {
                    fixed: spec.fixed_len,
                    dynamic: spec.dyn_len,
                    output: spec.out_len,
                };
                names.len()
            ],
        };

        let min_fixed = lengths.iter().map(|l| l.fixed).min().unwrap_or(0);
        let shared_len = spec.shared_prefix_len.min(min_fixed.saturating_sub(1));
        let shared = if shared_len > 0 {
            let mut s = vec![client_marker(c)];
            s.extend(random_tokens(&mut rng, shared_len - 1));
            s
        } else {
            Vec::new()
        };
        let fixed: Vec<Vec<Token>> = lengths
            .iter()
            .enumerate()
            .map(|(i, l)| fixed_prompt(&mut rng, c, i, &shared, l.fixed))
            .collect();

        let (graph, plan) = topology_plan(&spec.topology, &ids, total_iters > 1)?;

        let mut iterations = Vec::with_capacity(total_iters);
        for it in 0..total_iters {
            let steps = match &plan {
                Plan::Fixed(steps) => steps.clone(),
                Plan::BranchMin => {
                    let pick = if rng.gen_bool(0.5) { 1 } else { 2 };
                    vec![
                        (0, vec![], AggregationKind::MaxPlusOne),
                        (pick, vec![0], AggregationKind::MaxPlusOne),
                        (3, vec![1], AggregationKind::MinPlusOne),
                    ]
                }
            };
            let invocations = steps
                .into_iter()
                .map(|(agent, deps, release)| {
                    let l = lengths[agent];
                    let mut prompt = fixed[agent].clone();
                    prompt.extend(random_tokens(&mut rng, l.dynamic));
                    Invocation {
                        agent: ids[agent].clone(),
                        prompt,
                        fixed_len: l.fixed,
                        output: random_tokens(&mut rng, l.output),
                        deps,
                        release,
                    }
                })
                .collect();
            iterations.push(Iteration {
                index: it,
                warmup: it < spec.warmup_rounds,
                invocations,
            });
        }

        clients.push(ClientWorkflow {
            client,
            graph,
            start_time: c as f64 * spec.arrival_stagger,
            iterations,
        });
    }

    Ok(Workload {
        label: spec.label(),
        clients,
    })
}

/// The unmeasured warmup iterations of every client.
pub fn warmup(spec: &WorkloadSpec) -> Result<Vec<(ClientId, Iteration)>, SpecError> {
    Ok(generate(spec)?
        .clients
        .into_iter()
        .flat_map(|c| {
            let id = c.client;
            c.iterations.into_iter().filter(|i| i.warmup).map(move |i| (id, i))
        })
        .collect())
}

type PlanStep = (usize, Vec<usize>, AggregationKind);

enum Plan {
    Fixed(Vec<PlanStep>),
    BranchMin,
}

fn topology_plan(topology: &Topology, ids: &[AgentId], repeats: bool) -> Result<(StepGraph, Plan), SpecError> {
    use AggregationKind::*;
    let n = ids.len();
    let edge = |a: usize, b: usize| (ids[a].clone(), ids[b].clone());
    match topology {
        Topology::Sequential { .. } | Topology::Cyclic { .. } | Topology::PeerStyle => {
            let mut edges: Vec<_> = (1..n).map(|i| edge(i - 1, i)).collect();
            let cyclic = !matches!(topology, Topology::Sequential { .. }) || repeats;
            if cyclic && n > 1 {
                edges.push(edge(n - 1, 0));
            }
            let graph = StepGraph::build(ids.iter().map(|a| (a.clone(), MaxPlusOne)).collect(), &edges)?;
            let steps = (0..n)
                .map(|i| (i, if i == 0 { vec![] } else { vec![i - 1] }, MaxPlusOne))
                .collect();
            Ok((graph, Plan::Fixed(steps)))
        }
        Topology::Custom {
            agents,
            edges,
            aggregation,
        } => {
            let index = |name: &str| {
                agents
                    .iter()
                    .position(|a| a == name)
                    .ok_or_else(|| SpecError::UnknownAgent(name.to_string()))
            };
            for name in aggregation.keys() {
                index(name)?;
            }
            let kind = |i: usize| aggregation.get(&agents[i]).copied().unwrap_or(MaxPlusOne);
            let mut pairs = Vec::with_capacity(edges.len());
            for (a, b) in edges {
                pairs.push((index(a)?, index(b)?));
            }
            let graph = StepGraph::build(
                (0..n).map(|i| (ids[i].clone(), kind(i))).collect(),
                &pairs.iter().map(|&(a, b)| edge(a, b)).collect::<Vec<_>>(),
            )?;
            let steps = (0..n)
                .map(|v| {
                    let mut deps: Vec<usize> = pairs.iter().filter(|&&(a, b)| b == v && a < v).map(|p| p.0).collect();
                    deps.sort_unstable();
                    deps.dedup();
                    (v, deps, kind(v))
                })
                .collect();
            Ok((graph, Plan::Fixed(steps)))
        }
        Topology::BranchMax | Topology::BranchMin => {
            let join = if matches!(topology, Topology::BranchMax) { MaxPlusOne } else { MinPlusOne };
            let kinds = vec![
                (ids[0].clone(), MaxPlusOne),
                (ids[1].clone(), MaxPlusOne),
                (ids[2].clone(), MaxPlusOne),
                (ids[3].clone(), join),
            ];
            let edges = [edge(0, 1), edge(0, 2), edge(1, 3), edge(2, 3), edge(3, 0)];
            let graph = StepGraph::build(kinds, &edges)?;
            let plan = if join == MaxPlusOne {
                Plan::Fixed(vec![
                    (0, vec![], MaxPlusOne),
                    (1, vec![0], MaxPlusOne),
                    (2, vec![0], MaxPlusOne),
                    (3, vec![1, 2], MaxPlusOne),
                ])
            } else {
                Plan::BranchMin
            };
            Ok((graph, plan))
        }
    }
}
