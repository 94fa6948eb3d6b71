//! Token-segment radix tree holding KV prefix caches.
//!
//! Nodes live in an arena and carry per-node tier status, eviction priority,
//! a reference count of in-flight requests and the set of agents whose fixed
//! prompt ends at that node. The tree never stores tensors; `kv_bytes` is
//! accounting only.
//!
//! Eviction is leaf-first: a node is a candidate only when none of its
//! children still hold GPU memory, which keeps every GPU-resident path
//! contiguous from the root.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::step_graph::{AgentId, Step, StepMap};

pub type Token = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeStatus {
    InGpu,
    BackupInCpu,
    Loading,
    Offloading,
}

impl NodeStatus {
    /// Holds (or is about to hold) GPU memory.
    pub fn is_resident(self) -> bool {
        !matches!(self, NodeStatus::BackupInCpu)
    }

    pub fn is_transferring(self) -> bool {
        matches!(self, NodeStatus::Loading | NodeStatus::Offloading)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NodeStatus::InGpu => "gpu",
            NodeStatus::BackupInCpu => "cpu",
            NodeStatus::Loading => "loading",
            NodeStatus::Offloading => "offloading",
        }
    }
}

/// Legal status changes. `None` stands for "node removed from the tree".
pub fn is_legal_transition(from: NodeStatus, to: Option<NodeStatus>) -> bool {
    use NodeStatus::*;
    matches!(
        (from, to),
        (InGpu, Some(Offloading))
            | (Offloading, Some(BackupInCpu))
            | (BackupInCpu, Some(Loading))
            | (Loading, Some(InGpu))
            // valid CPU copy already exists
            | (InGpu, Some(BackupInCpu))
            | (InGpu, None)
            // CPU store over its cap
            | (BackupInCpu, None)
    )
}

/// Ordered by evictability: `Step(0)` is kept longest, `Suffix` goes first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EvictionPriority {
    Step(u32),
    Unreachable,
    Suffix,
}

impl From<Step> for EvictionPriority {
    fn from(s: Step) -> Self {
        match s {
            Step::Finite(k) => EvictionPriority::Step(k),
            Step::Unreachable => EvictionPriority::Unreachable,
        }
    }
}

impl fmt::Display for EvictionPriority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvictionPriority::Step(k) => write!(f, "step{k}"),
            EvictionPriority::Unreachable => f.write_str("unreachable"),
            EvictionPriority::Suffix => f.write_str("suffix"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictionPolicy {
    Lru,
    WorkflowAware,
}

/// Virtual access time with a sequence tie-break.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Stamp {
    pub time: f64,
    pub seq: u64,
}

impl Eq for Stamp {}

impl PartialOrd for Stamp {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Stamp {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.seq.cmp(&other.seq))
    }
}

#[derive(Debug, Clone)]
pub struct CacheNode {
    key: Vec<Token>,
    parent: Option<NodeId>,
    children: BTreeMap<Token, NodeId>,
    pub status: NodeStatus,
    pub priority: EvictionPriority,
    pub last_access: Stamp,
    pub lock_count: u32,
    pub fixed_boundary_for: BTreeSet<AgentId>,
    /// Stable identity across arena slot reuse.
    pub uid: u64,
    pub cpu_copy: bool,
    /// A write-through backup to host memory is in flight.
    pub backup_pending: bool,
    pub hit_count: u64,
    /// Loaded ahead of use and not yet consumed by a request.
    pub prefetched_unused: bool,
    pub loaded_at: Option<f64>,
    kv_bytes: u64,
}

impl CacheNode {
    pub fn key(&self) -> &[Token] {
        &self.key
    }

    pub fn len(&self) -> usize {
        self.key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.key.is_empty()
    }

    pub fn parent(&self) -> Option<NodeId> {
        self.parent
    }

    pub fn children(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.children.values().copied()
    }

    pub fn kv_bytes(&self) -> u64 {
        self.kv_bytes
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// Total prefix length found in the tree, including a partial node.
    pub matched_tokens: usize,
    /// Fully matched nodes, root excluded.
    pub node_path: Vec<NodeId>,
    pub statuses: Vec<NodeStatus>,
    /// Node matched only partway, with the matched token count.
    pub partial: Option<(NodeId, usize)>,
}

impl MatchResult {
    pub fn full_tokens(&self) -> usize {
        self.matched_tokens - self.partial.map_or(0, |(_, n)| n)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InsertOutcome {
    /// Root-to-leaf path covering the inserted prefix.
    pub path: Vec<NodeId>,
    pub new_nodes: Vec<NodeId>,
    pub new_tokens: usize,
    /// Tokens actually covered by `path` (short only when a split was refused).
    pub covered_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatusEvent {
    Created { uid: u64, status: NodeStatus },
    Changed { uid: u64, from: NodeStatus, to: NodeStatus },
    Removed { uid: u64, from: NodeStatus },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CacheError {
    #[error("unlock of node {0:?} with zero lock count")]
    UnderflowUnlock(NodeId),
    #[error("no cached node for boundary of agent {0}")]
    UnknownBoundaryNode(AgentId),
    #[error("boundary at {requested} tokens but only {cached} are cached")]
    BoundaryBeyondCache { requested: usize, cached: usize },
    #[error("illegal status change {from:?} -> {to:?}")]
    IllegalTransition {
        from: NodeStatus,
        to: Option<NodeStatus>,
    },
    #[error("insufficient evictable memory: needed {needed} bytes, found {freed}")]
    InsufficientEvictable { needed: u64, freed: u64 },
    #[error("node {0:?} still has children")]
    HasChildren(NodeId),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("need at least 2 recorded invocations, have {0}")]
pub struct InsufficientHistory(pub usize);

/// Infers an agent's fixed-prompt length from its per-invocation hit
/// lengths: the prefix hit on every one of the last `window` invocations.
pub fn update_fixed_heuristic(history: &[usize], window: usize) -> Result<usize, InsufficientHistory> {
    if history.len() < 2 {
        return Err(InsufficientHistory(history.len()));
    }
    let start = history.len().saturating_sub(window.max(2));
    Ok(history[start..].iter().copied().min().unwrap_or(0))
}

#[derive(Debug, Clone)]
pub struct RadixCache {
    nodes: Vec<Option<CacheNode>>,
    free_slots: Vec<usize>,
    root: NodeId,
    bytes_per_token: u64,
    now: f64,
    seq: u64,
    next_uid: u64,
    boundaries: BTreeMap<AgentId, NodeId>,
    log: Option<Vec<StatusEvent>>,
}

fn common_prefix(a: &[Token], b: &[Token]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

impl RadixCache {
    pub fn new(bytes_per_token: u64) -> Self {
        let root = CacheNode {
            key: Vec::new(),
            parent: None,
            children: BTreeMap::new(),
            status: NodeStatus::InGpu,
            priority: EvictionPriority::Step(0),
            last_access: Stamp::default(),
            lock_count: 0,
            fixed_boundary_for: BTreeSet::new(),
            uid: 0,
            cpu_copy: false,
            backup_pending: false,
            hit_count: 0,
            prefetched_unused: false,
            loaded_at: None,
            kv_bytes: 0,
        };
        Self {
            nodes: vec![Some(root)],
            free_slots: Vec::new(),
            root: NodeId(0),
            bytes_per_token,
            now: 0.0,
            seq: 0,
            next_uid: 1,
            boundaries: BTreeMap::new(),
            log: None,
        }
    }

    /// Starts recording every status change.
    pub fn enable_status_log(&mut self) {
        self.log.get_or_insert_with(Vec::new);
    }

    pub fn status_log(&self) -> &[StatusEvent] {
        self.log.as_deref().unwrap_or(&[])
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn bytes_per_token(&self) -> u64 {
        self.bytes_per_token
    }

    pub fn set_time(&mut self, now: f64) {
        debug_assert!(now >= self.now);
        self.now = now;
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    fn stamp(&mut self) -> Stamp {
        self.seq += 1;
        Stamp {
            time: self.now,
            seq: self.seq,
        }
    }

    pub fn node(&self, id: NodeId) -> &CacheNode {
        self.nodes[id.0].as_ref().expect("live node")
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut CacheNode {
        self.nodes[id.0].as_mut().expect("live node")
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.get(id.0).is_some_and(Option::is_some)
    }

    /// Live non-root nodes in arena order.
    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, n)| n.is_some())
            .map(|(i, _)| NodeId(i))
    }

    pub fn node_count(&self) -> usize {
        self.node_ids().count()
    }

    pub fn total_tokens(&self) -> usize {
        self.node_ids().map(|id| self.node(id).len()).sum()
    }

    /// Bytes held in GPU memory by nodes (resident or being offloaded).
    pub fn gpu_node_bytes(&self) -> u64 {
        self.node_ids()
            .map(|id| self.node(id))
            .filter(|n| matches!(n.status, NodeStatus::InGpu | NodeStatus::Offloading))
            .map(|n| n.kv_bytes)
            .sum()
    }

    pub fn loading_bytes(&self) -> u64 {
        self.node_ids()
            .map(|id| self.node(id))
            .filter(|n| n.status == NodeStatus::Loading)
            .map(|n| n.kv_bytes)
            .sum()
    }

    pub fn cpu_bytes(&self) -> u64 {
        self.node_ids()
            .map(|id| self.node(id))
            .filter(|n| n.cpu_copy)
            .map(|n| n.kv_bytes)
            .sum()
    }

    /// Root-exclusive path from the root down to `id`.
    pub fn path_to(&self, id: NodeId) -> Vec<NodeId> {
        let mut path = Vec::new();
        let mut cur = Some(id);
        while let Some(c) = cur {
            if c == self.root {
                break;
            }
            path.push(c);
            cur = self.node(c).parent;
        }
        path.reverse();
        path
    }

    /// Token prefix spelled by the path from the root to `id`.
    pub fn prefix_of(&self, id: NodeId) -> Vec<Token> {
        self.path_to(id)
            .into_iter()
            .flat_map(|n| self.node(n).key.iter().copied())
            .collect()
    }

    fn alloc(&mut self, node: CacheNode) -> NodeId {
        if let Some(log) = self.log.as_mut() {
            log.push(StatusEvent::Created {
                uid: node.uid,
                status: node.status,
            });
        }
        match self.free_slots.pop() {
            Some(slot) => {
                self.nodes[slot] = Some(node);
                NodeId(slot)
            }
            None => {
                self.nodes.push(Some(node));
                NodeId(self.nodes.len() - 1)
            }
        }
    }

    fn walk(&self, tokens: &[Token]) -> MatchResult {
        let mut cur = self.root;
        let mut pos = 0;
        let mut path = Vec::new();
        let mut statuses = Vec::new();
        let mut partial = None;
        while pos < tokens.len() {
            let Some(&child) = self.node(cur).children.get(&tokens[pos]) else {
                break;
            };
            let key = &self.node(child).key;
            let common = common_prefix(key, &tokens[pos..]);
            pos += common;
            if common < key.len() {
                partial = Some((child, common));
                break;
            }
            path.push(child);
            statuses.push(self.node(child).status);
            cur = child;
        }
        MatchResult {
            matched_tokens: pos,
            node_path: path,
            statuses,
            partial,
        }
    }

    /// Longest cached prefix of `tokens`, refreshing access times along it.
    pub fn match_prefix(&mut self, tokens: &[Token]) -> MatchResult {
        let m = self.walk(tokens);
        let stamp = self.stamp();
        for &id in m.node_path.iter().chain(m.partial.as_ref().map(|(id, _)| id)) {
            self.node_mut(id).last_access = stamp;
        }
        m
    }

    /// Same as [`match_prefix`](Self::match_prefix) without side effects.
    pub fn peek_prefix(&self, tokens: &[Token]) -> MatchResult {
        self.walk(tokens)
    }

    /// Splits `id` after `at` tokens. The original id keeps the tail (so
    /// boundaries, children and outstanding references stay valid) and a
    /// new node holding the head is returned.
    pub fn split(&mut self, id: NodeId, at: usize) -> NodeId {
        let bpt = self.bytes_per_token;
        let uid = self.next_uid;
        self.next_uid += 1;
        let (head_node, first_token, parent) = {
            let n = self.node_mut(id);
            assert!(at > 0 && at < n.key.len(), "split inside the key");
            let tail = n.key.split_off(at);
            let head = std::mem::replace(&mut n.key, tail);
            n.kv_bytes = n.key.len() as u64 * bpt;
            let head_node = CacheNode {
                kv_bytes: head.len() as u64 * bpt,
                key: head,
                parent: n.parent,
                children: BTreeMap::new(),
                status: n.status,
                priority: n.priority,
                last_access: n.last_access,
                lock_count: n.lock_count,
                fixed_boundary_for: BTreeSet::new(),
                uid,
                cpu_copy: n.cpu_copy,
                backup_pending: n.backup_pending,
                hit_count: n.hit_count,
                prefetched_unused: n.prefetched_unused,
                loaded_at: n.loaded_at,
            };
            (head_node, n.key[0], n.parent.expect("non-root"))
        };
        let head_first = head_node.key[0];
        let head_id = self.alloc(head_node);
        self.node_mut(head_id).children.insert(first_token, id);
        self.node_mut(id).parent = Some(head_id);
        self.node_mut(parent).children.insert(head_first, head_id);
        head_id
    }

    /// Inserts `tokens`, splitting at divergence points. New nodes are
    /// GPU-resident suffixes. Insertion stops early rather than split a node
    /// that is mid-transfer or extend below a node that is (or is about to
    /// be) host-only. Extending below a loading node is fine.
    pub fn insert(&mut self, tokens: &[Token]) -> InsertOutcome {
        let stamp = self.stamp();
        let mut cur = self.root;
        let mut pos = 0;
        let mut path = Vec::new();
        let mut new_nodes = Vec::new();
        let mut new_tokens = 0;
        while pos < tokens.len() {
            match self.node(cur).children.get(&tokens[pos]).copied() {
                Some(child) => {
                    let common = common_prefix(&self.node(child).key, &tokens[pos..]);
                    let next = if common < self.node(child).len() {
                        if self.node(child).status.is_transferring() {
                            break;
                        }
                        self.split(child, common)
                    } else {
                        child
                    };
                    self.node_mut(next).last_access = stamp;
                    path.push(next);
                    pos += common;
                    cur = next;
                }
                None => {
                    let parent = self.node(cur).status;
                    if cur != self.root && matches!(parent, NodeStatus::BackupInCpu | NodeStatus::Offloading) {
                        break;
                    }
                    let key = tokens[pos..].to_vec();
                    let len = key.len();
                    let uid = self.next_uid;
                    self.next_uid += 1;
                    let node = CacheNode {
                        kv_bytes: len as u64 * self.bytes_per_token,
                        key,
                        parent: Some(cur),
                        children: BTreeMap::new(),
                        status: NodeStatus::InGpu,
                        priority: EvictionPriority::Suffix,
                        last_access: stamp,
                        lock_count: 0,
                        fixed_boundary_for: BTreeSet::new(),
                        uid,
                        cpu_copy: false,
                        backup_pending: false,
                        hit_count: 0,
                        prefetched_unused: false,
                        loaded_at: None,
                    };
                    let id = self.alloc(node);
                    self.node_mut(cur).children.insert(tokens[pos], id);
                    path.push(id);
                    new_nodes.push(id);
                    new_tokens += len;
                    pos += len;
                    cur = id;
                }
            }
        }
        InsertOutcome {
            path,
            new_nodes,
            new_tokens,
            covered_tokens: pos,
        }
    }

    pub fn lock_path(&mut self, path: &[NodeId]) {
        for &id in path {
            self.node_mut(id).lock_count += 1;
        }
    }

    pub fn unlock_path(&mut self, path: &[NodeId]) -> Result<(), CacheError> {
        if let Some(&bad) = path.iter().find(|&&id| self.node(id).lock_count == 0) {
            return Err(CacheError::UnderflowUnlock(bad));
        }
        for &id in path {
            self.node_mut(id).lock_count -= 1;
        }
        Ok(())
    }

    pub fn set_status(&mut self, id: NodeId, to: NodeStatus) -> Result<(), CacheError> {
        let from = self.node(id).status;
        if !is_legal_transition(from, Some(to)) {
            return Err(CacheError::IllegalTransition { from, to: Some(to) });
        }
        let uid = self.node(id).uid;
        self.node_mut(id).status = to;
        if let Some(log) = self.log.as_mut() {
            log.push(StatusEvent::Changed { uid, from, to });
        }
        Ok(())
    }

    /// Removes a childless node. Any agent boundary recorded on it is dropped.
    pub fn remove(&mut self, id: NodeId) -> Result<CacheNode, CacheError> {
        let node = self.node(id);
        if !node.children.is_empty() {
            return Err(CacheError::HasChildren(id));
        }
        if !is_legal_transition(node.status, None) {
            return Err(CacheError::IllegalTransition {
                from: node.status,
                to: None,
            });
        }
        let node = self.nodes[id.0].take().expect("live node");
        self.free_slots.push(id.0);
        if let Some(parent) = node.parent {
            self.node_mut(parent).children.remove(&node.key[0]);
        }
        for agent in &node.fixed_boundary_for {
            self.boundaries.remove(agent);
        }
        if let Some(log) = self.log.as_mut() {
            log.push(StatusEvent::Removed {
                uid: node.uid,
                from: node.status,
            });
        }
        Ok(node)
    }

    /// Records where `agent`'s fixed prompt ends within `prompt`, splitting
    /// a node if the boundary falls inside it.
    pub fn mark_fixed_boundary(
        &mut self,
        agent: &AgentId,
        prompt: &[Token],
        token_count: usize,
    ) -> Result<NodeId, CacheError> {
        let requested = token_count.min(prompt.len());
        let m = self.walk(&prompt[..requested]);
        if m.matched_tokens < requested || requested == 0 {
            return Err(CacheError::BoundaryBeyondCache {
                requested: token_count,
                cached: m.matched_tokens,
            });
        }
        let node = match m.partial {
            Some((id, n)) => {
                if self.node(id).status.is_transferring() {
                    return Err(CacheError::BoundaryBeyondCache {
                        requested: token_count,
                        cached: m.full_tokens(),
                    });
                }
                self.split(id, n)
            }
            None => *m.node_path.last().expect("non-empty match"),
        };
        if let Some(old) = self.boundaries.insert(agent.clone(), node) {
            if old != node && self.contains(old) {
                self.node_mut(old).fixed_boundary_for.remove(agent);
            }
        }
        self.node_mut(node).fixed_boundary_for.insert(agent.clone());
        Ok(node)
    }

    pub fn boundary(&self, agent: &AgentId) -> Option<NodeId> {
        self.boundaries.get(agent).copied()
    }

    pub fn boundaries(&self) -> &BTreeMap<AgentId, NodeId> {
        &self.boundaries
    }

    /// True when `id` lies on the root path of some recorded fixed prompt.
    pub fn is_fixed_prompt_node(&self, id: NodeId) -> bool {
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            let node = self.node(n);
            if !node.fixed_boundary_for.is_empty() {
                return true;
            }
            stack.extend(node.children.values().copied());
        }
        false
    }

    /// Assigns priorities from steps-to-execution. Each agent's step is
    /// written on its boundary node and every ancestor; shared nodes keep the
    /// smallest step. Everything off those paths becomes `Suffix`. Agents
    /// missing from `steps` count as unreachable.
    pub fn set_agent_priorities(
        &mut self,
        boundaries: &BTreeMap<AgentId, NodeId>,
        steps: &StepMap,
    ) -> Result<(), CacheError> {
        for (agent, &node) in boundaries {
            if !self.contains(node) || node == self.root {
                return Err(CacheError::UnknownBoundaryNode(agent.clone()));
            }
        }
        let ids: Vec<NodeId> = self.node_ids().collect();
        for id in ids {
            self.node_mut(id).priority = EvictionPriority::Suffix;
        }
        for (agent, &node) in boundaries {
            let prio: EvictionPriority = steps.get(agent).copied().unwrap_or(Step::Unreachable).into();
            let mut cur = Some(node);
            while let Some(c) = cur {
                if c == self.root {
                    break;
                }
                let n = self.node_mut(c);
                if n.priority > prio {
                    n.priority = prio;
                }
                cur = n.parent;
            }
        }
        Ok(())
    }

    /// [`set_agent_priorities`](Self::set_agent_priorities) over the
    /// boundaries recorded in this cache.
    pub fn refresh_priorities(&mut self, steps: &StepMap) {
        let boundaries = self.boundaries.clone();
        self.set_agent_priorities(&boundaries, steps)
            .expect("recorded boundaries are live");
    }

    fn resident_child_count(&self, id: NodeId) -> usize {
        self.node(id)
            .children
            .values()
            .filter(|&&c| self.node(c).status.is_resident())
            .count()
    }

    /// Eviction candidate right now, ignoring any filter.
    pub fn is_evictable(&self, id: NodeId) -> bool {
        if id == self.root {
            return false;
        }
        let n = self.node(id);
        n.status == NodeStatus::InGpu
            && n.lock_count == 0
            && !n.backup_pending
            && self.resident_child_count(id) == 0
    }

    fn evict_key(&self, id: NodeId, policy: EvictionPolicy) -> (Reverse<EvictionPriority>, Stamp, NodeId) {
        let n = self.node(id);
        let prio = match policy {
            EvictionPolicy::Lru => EvictionPriority::Suffix,
            EvictionPolicy::WorkflowAware => n.priority,
        };
        (Reverse(prio), n.last_access, id)
    }

    /// Chooses victims, in order, until at least `bytes_needed` would be
    /// freed. Parents become candidates once their last resident child is
    /// chosen. Nothing is mutated.
    pub fn plan_eviction(
        &self,
        bytes_needed: u64,
        policy: EvictionPolicy,
        filter: impl Fn(&CacheNode) -> bool,
    ) -> Result<Vec<NodeId>, CacheError> {
        let mut remaining_children: HashMap<NodeId, usize> = HashMap::new();
        let mut heap = BinaryHeap::new();
        for id in self.node_ids() {
            if self.is_evictable(id) && filter(self.node(id)) {
                heap.push(Reverse(self.evict_key(id, policy)));
            }
        }
        let mut victims = Vec::new();
        let mut freed = 0u64;
        while freed < bytes_needed {
            let Some(Reverse((_, _, id))) = heap.pop() else {
                return Err(CacheError::InsufficientEvictable {
                    needed: bytes_needed,
                    freed,
                });
            };
            victims.push(id);
            freed += self.node(id).kv_bytes;
            let Some(parent) = self.node(id).parent else { continue };
            if parent == self.root {
                continue;
            }
            let left = remaining_children
                .entry(parent)
                .or_insert_with(|| self.resident_child_count(parent));
            *left -= 1;
            if *left == 0 {
                let p = self.node(parent);
                if p.status == NodeStatus::InGpu && p.lock_count == 0 && !p.backup_pending && filter(p) {
                    heap.push(Reverse(self.evict_key(parent, policy)));
                }
            }
        }
        Ok(victims)
    }

    /// Deterministic pre-order rendering for golden tests.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let mut stack = vec![(self.root, 0usize)];
        while let Some((id, depth)) = stack.pop() {
            let n = self.node(id);
            if id == self.root {
                let _ = writeln!(out, "root");
            } else {
                let _ = writeln!(
                    out,
                    "{:indent$}len={} status={} prio={} lock={}",
                    "",
                    n.len(),
                    n.status.as_str(),
                    n.priority,
                    n.lock_count,
                    indent = depth * 2
                );
            }
            for &c in n.children.values().rev() {
                stack.push((c, depth + 1));
            }
        }
        out
    }
}
