//! Reference models written without reference to the library internals.

use std::collections::{BTreeMap, BTreeSet};

use agentcache::radix_cache::NodeStatus;

/// Hit (true) or miss per reference under Belady's MIN: on a miss with a
/// full cache, drop the item whose next use is farthest away.
pub fn belady(refs: &[usize], slots: usize) -> Vec<bool> {
    let mut cache: BTreeSet<usize> = BTreeSet::new();
    let mut out = Vec::with_capacity(refs.len());
    for (i, &r) in refs.iter().enumerate() {
        if cache.contains(&r) {
            out.push(true);
            continue;
        }
        out.push(false);
        if cache.len() == slots {
            let next_use = |item: usize| {
                refs[i + 1..]
                    .iter()
                    .position(|&x| x == item)
                    .unwrap_or(usize::MAX)
            };
            let victim = *cache
                .iter()
                .max_by_key(|&&item| (next_use(item), item))
                .expect("full cache");
            cache.remove(&victim);
        }
        cache.insert(r);
    }
    out
}

/// Set of inserted sequences; the longest cached prefix of a query is its
/// longest common prefix with any of them.
#[derive(Default)]
pub struct PlainTrie {
    seqs: BTreeSet<Vec<u32>>,
}

impl PlainTrie {
    pub fn insert(&mut self, s: &[u32]) {
        if !s.is_empty() {
            self.seqs.insert(s.to_vec());
        }
    }

    pub fn longest_match(&self, q: &[u32]) -> usize {
        self.seqs
            .iter()
            .map(|s| s.iter().zip(q).take_while(|(a, b)| a == b).count())
            .max()
            .unwrap_or(0)
    }

    /// Distinct non-empty prefixes, i.e. token slots a compressed trie
    /// must hold.
    pub fn distinct_prefixes(&self) -> usize {
        let mut all: BTreeSet<&[u32]> = BTreeSet::new();
        for s in &self.seqs {
            for l in 1..=s.len() {
                all.insert(&s[..l]);
            }
        }
        all.len()
    }
}

/// Step oracle for graphs given as predecessor lists over `0..n`, where
/// every edge goes from a lower to a higher index except along an optional
/// ring over `0..ring` (i -> i+1 mod ring). `max[i]` selects max+1 over
/// min+1. `None` means unreachable.
pub fn steps_oracle(
    n: usize,
    ring: usize,
    preds: &[Vec<usize>],
    max: &[bool],
    active: &[bool],
) -> Vec<Option<u32>> {
    // Reachability by repeated sweeps.
    let mut reach = active.to_vec();
    loop {
        let mut grew = false;
        for v in 0..n {
            if !reach[v] && preds[v].iter().any(|&p| reach[p]) {
                reach[v] = true;
                grew = true;
            }
        }
        if !grew {
            break;
        }
    }
    let mut val: Vec<Option<u32>> = vec![None; n];
    // Ring nodes have exactly one predecessor, so the value is the walk back
    // to the nearest active ring node.
    for v in 0..ring {
        if !reach[v] {
            continue;
        }
        let mut d = 0;
        let mut cur = v;
        while !active[cur] {
            cur = (cur + ring - 1) % ring;
            d += 1;
        }
        val[v] = Some(d);
    }
    // Everything above the ring is acyclic in index order.
    for v in ring..n {
        if !reach[v] {
            continue;
        }
        if active[v] {
            val[v] = Some(0);
            continue;
        }
        let finite: Vec<u32> = preds[v].iter().filter_map(|&p| val[p]).collect();
        let agg = if max[v] { finite.iter().max() } else { finite.iter().min() };
        val[v] = agg.map(|a| a + 1);
    }
    val
}

/// Status changes allowed by the four-state lifecycle, plus discarding a
/// GPU copy and dropping a host copy. `None` is removal.
pub fn legal(from: NodeStatus, to: Option<NodeStatus>) -> bool {
    use NodeStatus::*;
    match from {
        InGpu => matches!(to, Some(Offloading) | Some(BackupInCpu) | None),
        Offloading => to == Some(BackupInCpu),
        BackupInCpu => matches!(to, Some(Loading) | None),
        Loading => to == Some(InGpu),
    }
}

/// Brute-force node priority: the smallest step over agents whose fixed
/// prompt runs through the node.
pub fn min_over_paths(
    node_prefix: &[u32],
    fixed: &BTreeMap<String, (Vec<u32>, Option<Option<u32>>)>,
) -> Option<Option<u32>> {
    // Outer None: no agent passes here (suffix). Inner None: unreachable.
    let mut best: Option<Option<u32>> = None;
    for (prefix, step) in fixed.values() {
        if node_prefix.is_empty() || !prefix.starts_with(node_prefix) {
            continue;
        }
        let s = step.unwrap_or(None);
        best = Some(match (best, s) {
            (None, s) => s,
            (Some(Some(a)), Some(b)) => Some(a.min(b)),
            (Some(Some(a)), None) => Some(a),
            (Some(None), s) => s,
        });
    }
    best
}
