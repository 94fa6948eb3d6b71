//! GPU/CPU tiers and the full-duplex PCIe link between them.
//!
//! Transfers are modeled as jobs on two independent FIFO channels. The
//! event loop schedules a completion event at each job's `completion` time
//! and calls back into [`TierManager::complete`].

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{CostModel, Direction};
use crate::radix_cache::{CacheError, CacheNode, EvictionPolicy, NodeId, NodeStatus, RadixCache};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TierError {
    #[error("node {node:?} is {status:?}, operation not allowed")]
    IllegalState { node: NodeId, status: NodeStatus },
    #[error("out of GPU memory: need {needed} bytes, {free} free")]
    OutOfGpuMemory { needed: u64, free: u64 },
    #[error(transparent)]
    Cache(#[from] CacheError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TierMode {
    /// Victims are dropped and must be recomputed.
    Discard,
    /// Victims are kept in host memory and can be loaded back.
    Offload,
}

/// Which victims deserve a host copy when evicted without one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackupScope {
    /// Every evicted node.
    All,
    /// Only nodes on a recorded fixed-prompt path.
    FixedPrompts,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GpuPool {
    pub capacity_bytes: u64,
    pub used_bytes: u64,
    /// Claimed by in-flight loads.
    pub reserved_bytes: u64,
}

impl GpuPool {
    pub fn new(capacity_bytes: u64) -> Self {
        Self {
            capacity_bytes,
            ..Self::default()
        }
    }

    pub fn free(&self) -> u64 {
        self.capacity_bytes
            .saturating_sub(self.used_bytes + self.reserved_bytes)
    }

    pub fn allocate(&mut self, bytes: u64) -> Result<(), TierError> {
        if bytes > self.free() {
            return Err(TierError::OutOfGpuMemory {
                needed: bytes,
                free: self.free(),
            });
        }
        self.used_bytes += bytes;
        Ok(())
    }

    pub fn release(&mut self, bytes: u64) {
        debug_assert!(bytes <= self.used_bytes);
        self.used_bytes -= bytes;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct JobId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobKind {
    /// GPU copy released at completion.
    Offload,
    /// Write-through copy; the node stays in GPU memory.
    Backup,
    Load { prefetch: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferJob {
    pub id: JobId,
    pub direction: Direction,
    pub kind: JobKind,
    pub nodes: Vec<NodeId>,
    pub bytes: u64,
    pub enqueue_time: f64,
    pub start_time: f64,
    pub completion_time: f64,
}

#[derive(Debug, Clone)]
pub struct TransferChannel {
    pub direction: Direction,
    pub busy_until: f64,
    queue: VecDeque<JobId>,
}

impl TransferChannel {
    pub fn new(direction: Direction) -> Self {
        Self {
            direction,
            busy_until: 0.0,
            queue: VecDeque::new(),
        }
    }

    /// Returns `(start, completion)` for a job enqueued now.
    fn schedule(&mut self, id: JobId, bytes: u64, now: f64, cost: &CostModel) -> (f64, f64) {
        let start = now.max(self.busy_until);
        let completion = start + cost.transfer_time(bytes, self.direction);
        self.busy_until = completion;
        self.queue.push_back(id);
        (start, completion)
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvictOutcome {
    pub victims: Vec<NodeId>,
    /// Bytes released immediately.
    pub freed_now: u64,
    /// Bytes released when pending offloads complete.
    pub pending: u64,
    pub offloads: Vec<JobId>,
}

#[derive(Debug, Clone)]
pub struct TierManager {
    pub pool: GpuPool,
    pub cost: CostModel,
    pub cpu_capacity: Option<u64>,
    h2d: TransferChannel,
    d2h: TransferChannel,
    jobs: BTreeMap<JobId, TransferJob>,
    completed: Vec<TransferJob>,
    next_job: u64,
    /// GPU bytes of nodes currently offloading.
    offloading_bytes: u64,
    /// Bytes of prefetched nodes evicted before any request used them.
    pub wasted_prefetch_bytes: u64,
}

impl TierManager {
    pub fn new(capacity_bytes: u64, cost: CostModel) -> Self {
        Self {
            pool: GpuPool::new(capacity_bytes),
            cost,
            cpu_capacity: None,
            h2d: TransferChannel::new(Direction::H2D),
            d2h: TransferChannel::new(Direction::D2H),
            jobs: BTreeMap::new(),
            completed: Vec::new(),
            next_job: 0,
            offloading_bytes: 0,
            wasted_prefetch_bytes: 0,
        }
    }

    pub fn job(&self, id: JobId) -> Option<&TransferJob> {
        self.jobs.get(&id)
    }

    pub fn in_flight(&self) -> impl Iterator<Item = &TransferJob> {
        self.jobs.values()
    }

    pub fn completed_jobs(&self) -> &[TransferJob] {
        &self.completed
    }

    pub fn pending_offload_bytes(&self) -> u64 {
        self.offloading_bytes
    }

    /// In-flight job currently moving `node`, if any.
    pub fn job_for(&self, node: NodeId) -> Option<&TransferJob> {
        self.jobs.values().find(|j| j.nodes.contains(&node))
    }

    pub fn in_flight_prefetches(&self) -> usize {
        self.jobs
            .values()
            .filter(|j| j.kind == JobKind::Load { prefetch: true })
            .count()
    }

    fn enqueue(&mut self, direction: Direction, kind: JobKind, nodes: Vec<NodeId>, bytes: u64, now: f64) -> TransferJob {
        let id = JobId(self.next_job);
        self.next_job += 1;
        let channel = match direction {
            Direction::H2D => &mut self.h2d,
            Direction::D2H => &mut self.d2h,
        };
        let (start, completion) = channel.schedule(id, bytes, now, &self.cost);
        let job = TransferJob {
            id,
            direction,
            kind,
            nodes,
            bytes,
            enqueue_time: now,
            start_time: start,
            completion_time: completion,
        };
        self.jobs.insert(id, job.clone());
        job
    }

    pub fn begin_offload(&mut self, cache: &mut RadixCache, node: NodeId, now: f64) -> Result<TransferJob, TierError> {
        let n = cache.node(node);
        if n.status != NodeStatus::InGpu || n.lock_count > 0 || n.backup_pending {
            return Err(TierError::IllegalState {
                node,
                status: n.status,
            });
        }
        let bytes = n.kv_bytes();
        cache.set_status(node, NodeStatus::Offloading)?;
        self.offloading_bytes += bytes;
        Ok(self.enqueue(Direction::D2H, JobKind::Offload, vec![node], bytes, now))
    }

    /// Copies a GPU node to host memory while keeping it resident.
    pub fn begin_backup(&mut self, cache: &mut RadixCache, node: NodeId, now: f64) -> Result<TransferJob, TierError> {
        let n = cache.node_mut(node);
        if n.status != NodeStatus::InGpu || n.cpu_copy || n.backup_pending {
            return Err(TierError::IllegalState {
                node,
                status: n.status,
            });
        }
        n.backup_pending = true;
        let bytes = n.kv_bytes();
        Ok(self.enqueue(Direction::D2H, JobKind::Backup, vec![node], bytes, now))
    }

    /// Reserves GPU memory and starts copying `nodes` back from the host.
    pub fn begin_load(
        &mut self,
        cache: &mut RadixCache,
        nodes: &[NodeId],
        now: f64,
        prefetch: bool,
    ) -> Result<TransferJob, TierError> {
        for &node in nodes {
            let status = cache.node(node).status;
            if status != NodeStatus::BackupInCpu {
                return Err(TierError::IllegalState { node, status });
            }
        }
        let bytes: u64 = nodes.iter().map(|&n| cache.node(n).kv_bytes()).sum();
        if bytes > self.pool.free() {
            return Err(TierError::OutOfGpuMemory {
                needed: bytes,
                free: self.pool.free(),
            });
        }
        self.pool.reserved_bytes += bytes;
        for &node in nodes {
            cache.set_status(node, NodeStatus::Loading)?;
        }
        Ok(self.enqueue(Direction::H2D, JobKind::Load { prefetch }, nodes.to_vec(), bytes, now))
    }

    /// Applies the effects of a finished job. Called at its completion time.
    pub fn complete(&mut self, cache: &mut RadixCache, id: JobId) -> Result<TransferJob, TierError> {
        let job = self.jobs.remove(&id).expect("known job");
        let channel = match job.direction {
            Direction::H2D => &mut self.h2d,
            Direction::D2H => &mut self.d2h,
        };
        debug_assert_eq!(channel.queue.front(), Some(&id), "FIFO completion");
        channel.queue.retain(|j| *j != id);
        let now = job.completion_time;
        match job.kind {
            JobKind::Offload => {
                let node = job.nodes[0];
                cache.set_status(node, NodeStatus::BackupInCpu)?;
                cache.node_mut(node).cpu_copy = true;
                self.pool.release(job.bytes);
                self.offloading_bytes -= job.bytes;
                self.enforce_cpu_cap(cache);
            }
            JobKind::Backup => {
                let n = cache.node_mut(job.nodes[0]);
                n.backup_pending = false;
                n.cpu_copy = true;
                self.enforce_cpu_cap(cache);
            }
            JobKind::Load { prefetch } => {
                for &node in &job.nodes {
                    cache.set_status(node, NodeStatus::InGpu)?;
                    let n = cache.node_mut(node);
                    n.loaded_at = Some(now);
                    n.prefetched_unused = prefetch;
                }
                self.pool.reserved_bytes -= job.bytes;
                self.pool.used_bytes += job.bytes;
            }
        }
        self.completed.push(job.clone());
        Ok(job)
    }

    pub fn complete_offload(&mut self, cache: &mut RadixCache, id: JobId) -> Result<TransferJob, TierError> {
        self.complete(cache, id)
    }

    pub fn complete_load(&mut self, cache: &mut RadixCache, id: JobId) -> Result<TransferJob, TierError> {
        self.complete(cache, id)
    }

    fn note_dropped(&mut self, node: &CacheNode) {
        if node.prefetched_unused {
            self.wasted_prefetch_bytes += node.kv_bytes();
        }
    }

    /// Frees at least `bytes_needed` of GPU memory (counting pending
    /// offloads) by evicting nodes allowed by `filter`.
    #[allow(clippy::too_many_arguments)]
    pub fn evict(
        &mut self,
        cache: &mut RadixCache,
        bytes_needed: u64,
        policy: EvictionPolicy,
        mode: TierMode,
        scope: BackupScope,
        now: f64,
        filter: impl Fn(&CacheNode) -> bool,
    ) -> Result<EvictOutcome, TierError> {
        let victims = cache.plan_eviction(bytes_needed, policy, filter)?;
        let mut out = EvictOutcome::default();
        for &v in &victims {
            let node = cache.node(v);
            let bytes = node.kv_bytes();
            let has_children = node.children().next().is_some();
            let cpu_copy = node.cpu_copy;
            let keep = match mode {
                TierMode::Discard => false,
                TierMode::Offload => {
                    has_children
                        || cpu_copy
                        || match scope {
                            BackupScope::All => true,
                            BackupScope::FixedPrompts => cache.is_fixed_prompt_node(v),
                        }
                }
            };
            if !keep {
                let removed = cache.remove(v)?;
                self.note_dropped(&removed);
                self.pool.release(bytes);
                out.freed_now += bytes;
            } else if cpu_copy {
                if cache.node(v).prefetched_unused {
                    self.wasted_prefetch_bytes += bytes;
                    cache.node_mut(v).prefetched_unused = false;
                }
                cache.set_status(v, NodeStatus::BackupInCpu)?;
                self.pool.release(bytes);
                out.freed_now += bytes;
            } else {
                let job = self.begin_offload(cache, v, now)?;
                out.pending += bytes;
                out.offloads.push(job.id);
            }
        }
        out.victims = victims;
        Ok(out)
    }

    /// Drops least recently used host-only leaves until under the CPU cap.
    fn enforce_cpu_cap(&mut self, cache: &mut RadixCache) {
        let Some(cap) = self.cpu_capacity else { return };
        loop {
            if cache.cpu_bytes() <= cap {
                return;
            }
            let victim = cache
                .node_ids()
                .filter(|&id| {
                    let n = cache.node(id);
                    n.status == NodeStatus::BackupInCpu && n.children().next().is_none()
                })
                .min_by_key(|&id| (cache.node(id).last_access, id));
            match victim {
                Some(id) => {
                    cache.remove(id).expect("childless cpu leaf");
                }
                None => return,
            }
        }
    }
}
