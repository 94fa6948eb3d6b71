//! Agent step graphs and steps-to-execution.
//!
//! A workflow is a directed graph of agents. Every node carries an
//! aggregation rule that decides how its distance from the currently active
//! agents is derived from its predecessors: `MaxPlusOne` for barriers (all
//! inputs required), `MinPlusOne` for alternatives (any input suffices).
//! Cycles are allowed so repeating workflows can be expressed directly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifies a workflow instance (one application / client).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClientId(pub u32);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

/// An agent, unique across clients.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgentId {
    pub client: ClientId,
    pub name: String,
}

impl AgentId {
    pub fn new(client: ClientId, name: impl Into<String>) -> Self {
        Self {
            client,
            name: name.into(),
        }
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.client, self.name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationKind {
    /// All predecessors must finish: `max(preds) + 1`.
    #[default]
    MaxPlusOne,
    /// Any predecessor suffices: `min(preds) + 1`.
    MinPlusOne,
}

/// Steps-to-execution of one agent. `Unreachable` orders after every finite
/// value, so sorting by step puts the least urgent agents last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Step {
    Finite(u32),
    Unreachable,
}

impl Step {
    pub fn finite(self) -> Option<u32> {
        match self {
            Step::Finite(k) => Some(k),
            Step::Unreachable => None,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Step::Finite(_))
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Step::Finite(k) => write!(f, "{k}"),
            Step::Unreachable => f.write_str("inf"),
        }
    }
}

pub type StepMap = BTreeMap<AgentId, Step>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StepGraphError {
    #[error("unknown agent {0}")]
    UnknownAgent(AgentId),
    #[error("self loop on agent {0}")]
    SelfLoop(AgentId),
    #[error("agent {0} declared twice")]
    DuplicateAgent(AgentId),
    #[error("active set is empty")]
    EmptyActiveSet,
}

/// Validated agent step graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepGraph {
    agents: Vec<AgentId>,
    kinds: Vec<AggregationKind>,
    index: BTreeMap<AgentId, usize>,
    /// Predecessor lists, sorted and deduplicated.
    preds: Vec<Vec<usize>>,
    succs: Vec<Vec<usize>>,
}

impl StepGraph {
    pub fn build(
        agents: Vec<(AgentId, AggregationKind)>,
        edges: &[(AgentId, AgentId)],
    ) -> Result<Self, StepGraphError> {
        let mut index = BTreeMap::new();
        let mut ids = Vec::with_capacity(agents.len());
        let mut kinds = Vec::with_capacity(agents.len());
        for (id, kind) in agents {
            if index.insert(id.clone(), ids.len()).is_some() {
                return Err(StepGraphError::DuplicateAgent(id));
            }
            ids.push(id);
            kinds.push(kind);
        }

        let mut pred_sets = vec![BTreeSet::new(); ids.len()];
        let mut succ_sets = vec![BTreeSet::new(); ids.len()];
        for (from, to) in edges {
            let f = *index
                .get(from)
                .ok_or_else(|| StepGraphError::UnknownAgent(from.clone()))?;
            let t = *index
                .get(to)
                .ok_or_else(|| StepGraphError::UnknownAgent(to.clone()))?;
            if f == t {
                return Err(StepGraphError::SelfLoop(from.clone()));
            }
            pred_sets[t].insert(f);
            succ_sets[f].insert(t);
        }

        Ok(Self {
            agents: ids,
            kinds,
            index,
            preds: pred_sets.into_iter().map(|s| s.into_iter().collect()).collect(),
            succs: succ_sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn agents(&self) -> &[AgentId] {
        &self.agents
    }

    pub fn contains(&self, agent: &AgentId) -> bool {
        self.index.contains_key(agent)
    }

    pub fn kind(&self, agent: &AgentId) -> Option<AggregationKind> {
        self.index.get(agent).map(|&i| self.kinds[i])
    }

    pub fn predecessors(&self, agent: &AgentId) -> Vec<&AgentId> {
        self.index
            .get(agent)
            .map(|&i| self.preds[i].iter().map(|&p| &self.agents[p]).collect())
            .unwrap_or_default()
    }

    pub fn successors(&self, agent: &AgentId) -> Vec<&AgentId> {
        self.index
            .get(agent)
            .map(|&i| self.succs[i].iter().map(|&s| &self.agents[s]).collect())
            .unwrap_or_default()
    }

    pub fn edge_count(&self) -> usize {
        self.preds.iter().map(Vec::len).sum()
    }

    /// Steps-to-execution of every agent given the currently active set.
    ///
    /// Reachability is settled first: a node is finite iff some active agent
    /// reaches it. Values then start from the breadth-first distance and are
    /// raised by synchronous rounds of the aggregation rule until nothing
    /// changes. Non-finite predecessors are ignored and values are capped at
    /// the node count, so a barrier that sits on a cycle cannot diverge.
    pub fn compute_steps(&self, active: &BTreeSet<AgentId>) -> Result<StepMap, StepGraphError> {
        if active.is_empty() {
            return Err(StepGraphError::EmptyActiveSet);
        }
        let n = self.agents.len();
        let mut is_active = vec![false; n];
        for a in active {
            let i = *self
                .index
                .get(a)
                .ok_or_else(|| StepGraphError::UnknownAgent(a.clone()))?;
            is_active[i] = true;
        }

        // Breadth-first distance: the MIN aggregation everywhere, and the
        // reachable set.
        let mut dist: Vec<Option<u32>> = vec![None; n];
        let mut frontier: Vec<usize> = (0..n).filter(|&i| is_active[i]).collect();
        for &i in &frontier {
            dist[i] = Some(0);
        }
        let mut depth = 0;
        while !frontier.is_empty() {
            depth += 1;
            let mut next = Vec::new();
            for &u in &frontier {
                for &v in &self.succs[u] {
                    if dist[v].is_none() {
                        dist[v] = Some(depth);
                        next.push(v);
                    }
                }
            }
            frontier = next;
        }

        let cap = n as u32;
        let mut values = dist;
        // Each non-final round raises at least one capped value, so n*n + 1
        // rounds always reach the fixed point.
        for _ in 0..=(n * n) {
            let mut changed = false;
            let mut next = values.clone();
            for v in 0..n {
                if is_active[v] || values[v].is_none() {
                    continue;
                }
                let finite = self.preds[v].iter().filter_map(|&p| values[p]);
                let agg = match self.kinds[v] {
                    AggregationKind::MaxPlusOne => finite.max(),
                    AggregationKind::MinPlusOne => finite.min(),
                };
                if let Some(best) = agg {
                    let candidate = (best + 1).min(cap);
                    if Some(candidate) != values[v] {
                        next[v] = Some(candidate);
                        changed = true;
                    }
                }
            }
            values = next;
            if !changed {
                break;
            }
        }

        Ok(self
            .agents
            .iter()
            .zip(values)
            .map(|(a, v)| (a.clone(), v.map_or(Step::Unreachable, Step::Finite)))
            .collect())
    }
}

/// Agents expected to run next (step exactly 1).
pub fn next_step_agents(steps: &StepMap) -> BTreeSet<AgentId> {
    steps
        .iter()
        .filter(|(_, s)| **s == Step::Finite(1))
        .map(|(a, _)| a.clone())
        .collect()
}
