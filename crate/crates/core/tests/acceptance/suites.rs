//! Randomized suites behind criterion 5. Each returns a short summary or
//! the first failure.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use proptest::collection::vec;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

use agentcache::cost::{CostModel, Direction};
use agentcache::radix_cache::{EvictionPriority, NodeStatus, RadixCache, StatusEvent};
use agentcache::scheduler::{simulate, Policy, SimConfig};
use agentcache::step_graph::{AgentId, AggregationKind, ClientId, Step, StepGraph};
use agentcache::workload::{generate, Topology, WorkloadSpec};

use crate::oracles::{legal, min_over_paths, steps_oracle, PlainTrie};

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

/// (a) 1000 random insert/match workloads against the plain trie.
pub fn radix_vs_trie() -> Result<String, String> {
    let op = (any::<bool>(), vec(0u32..4, 0..10));
    runner(1000)
        .run(&vec(op, 1..40), |ops| {
            let mut cache = RadixCache::new(1);
            let mut trie = PlainTrie::default();
            for (is_insert, seq) in &ops {
                if *is_insert {
                    let before = trie.distinct_prefixes();
                    let out = cache.insert(seq);
                    trie.insert(seq);
                    prop_assert_eq!(out.new_tokens, trie.distinct_prefixes() - before);
                    prop_assert_eq!(out.covered_tokens, seq.len());
                }
                let m = cache.match_prefix(seq);
                prop_assert_eq!(m.matched_tokens, trie.longest_match(seq));
                prop_assert_eq!(cache.total_tokens(), trie.distinct_prefixes());
                prop_assert_eq!(cache.gpu_node_bytes(), trie.distinct_prefixes() as u64);
            }
            Ok(())
        })
        .map_err(|e| format!("radix vs trie: {e}"))?;
    Ok("1000 trie workloads".into())
}

/// (b) Priority propagation against min over root paths.
pub fn priority_propagation() -> Result<String, String> {
    // Step choice: 0..=5 finite, 6 unreachable, 7 absent from the map.
    let agent = (any::<prop::sample::Index>(), any::<prop::sample::Index>(), 0u8..8);
    let max_nodes = Cell::new(0usize);
    runner(300)
        .run(
            &(vec(vec(0u32..3, 1..16), 1..60), vec(agent, 1..8)),
            |(seqs, agents)| {
                let mut cache = RadixCache::new(1);
                for s in &seqs {
                    cache.insert(s);
                }
                let mut fixed: BTreeMap<String, (Vec<u32>, Option<Option<u32>>)> = BTreeMap::new();
                let mut steps = BTreeMap::new();
                for (i, (si, li, st)) in agents.iter().enumerate() {
                    let s = &seqs[si.index(seqs.len())];
                    let l = 1 + li.index(s.len());
                    let name = format!("a{i}");
                    let id = AgentId::new(ClientId(0), name.clone());
                    cache
                        .mark_fixed_boundary(&id, s, l)
                        .map_err(|e| TestCaseError::fail(e.to_string()))?;
                    let step = match st {
                        0..=5 => Some(Some(*st as u32)),
                        6 => Some(None),
                        _ => None,
                    };
                    match step {
                        Some(Some(k)) => steps.insert(id, Step::Finite(k)),
                        Some(None) => steps.insert(id, Step::Unreachable),
                        None => None,
                    };
                    fixed.insert(name, (s[..l].to_vec(), step));
                }
                cache.refresh_priorities(&steps);
                let ids: Vec<_> = cache.node_ids().filter(|&n| n != cache.root()).collect();
                prop_assert!(ids.len() <= 200);
                max_nodes.set(max_nodes.get().max(ids.len()));
                for n in ids {
                    let want = match min_over_paths(&cache.prefix_of(n), &fixed) {
                        None => EvictionPriority::Suffix,
                        Some(None) => EvictionPriority::Unreachable,
                        Some(Some(k)) => EvictionPriority::Step(k),
                    };
                    prop_assert_eq!(cache.node(n).priority, want);
                }
                Ok(())
            },
        )
        .map_err(|e| format!("priority propagation: {e}"))?;
    Ok(format!("300 trees, up to {} nodes", max_nodes.get()))
}

fn agent(i: usize) -> AgentId {
    AgentId::new(ClientId(0), format!("n{i}"))
}

fn kind(max: bool) -> AggregationKind {
    if max {
        AggregationKind::MaxPlusOne
    } else {
        AggregationKind::MinPlusOne
    }
}

/// Graph with a ring over `0..ring` (or none when `ring` is 0) and forward
/// edges above it chosen by `mask`.
fn build(n: usize, ring: usize, mask: &[Vec<bool>], max: &[bool]) -> (StepGraph, Vec<Vec<usize>>) {
    let mut preds = vec![Vec::new(); n];
    let mut edges = Vec::new();
    if ring >= 2 {
        for i in 0..ring {
            let j = (i + 1) % ring;
            preds[j].push(i);
            edges.push((agent(i), agent(j)));
        }
    }
    for j in ring.max(1)..n {
        for (i, row) in mask.iter().enumerate().take(j) {
            if row[j] && !(ring >= 2 && j < ring) {
                preds[j].push(i);
                edges.push((agent(i), agent(j)));
            }
        }
    }
    let nodes = (0..n).map(|i| (agent(i), kind(max[i]))).collect();
    (StepGraph::build(nodes, &edges).expect("valid graph"), preds)
}

fn as_option(s: Step) -> Option<u32> {
    s.finite()
}

fn graph_case() -> impl Strategy<Value = (usize, usize, Vec<Vec<bool>>, Vec<bool>, Vec<bool>)> {
    (1usize..=20).prop_flat_map(|n| {
        let ring = prop_oneof![Just(0usize), 2usize..=n.max(2)].prop_map(move |r| r.min(n));
        (
            Just(n),
            ring,
            vec(vec(prop::bool::weighted(0.25), n), n),
            vec(any::<bool>(), n),
            vec(prop::bool::weighted(0.2), n),
        )
    })
}

/// (e) Step values against the oracle, plus chain, bound and (for min-only
/// graphs) monotonicity under a growing active set.
pub fn step_graph_props() -> Result<String, String> {
    let rings = Cell::new(0u32);
    runner(1000)
        .run(&(graph_case(), any::<prop::sample::Index>()), |((n, ring, mask, max, mut active), extra)| {
            let ring = if ring < 2 { 0 } else { ring };
            if !active.iter().any(|&a| a) {
                active[0] = true;
            }
            let (g, preds) = build(n, ring, &mask, &max);
            let set: BTreeSet<AgentId> = (0..n).filter(|&i| active[i]).map(agent).collect();
            let got = g.compute_steps(&set).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let want = steps_oracle(n, ring, &preds, &max, &active);
            for i in 0..n {
                let s = as_option(got[&agent(i)]);
                prop_assert_eq!(s, want[i], "node {}", i);
                if let Some(k) = s {
                    prop_assert!(k as usize <= n);
                }
                if active[i] {
                    prop_assert_eq!(s, Some(0));
                }
            }
            if ring >= 2 {
                rings.set(rings.get() + 1);
            }

            // Min-only graphs: activating one more agent never raises a step.
            let min_max = vec![false; n];
            let (gm, _) = build(n, ring, &mask, &min_max);
            let before = gm.compute_steps(&set).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let mut grown = set.clone();
            grown.insert(agent(extra.index(n)));
            let after = gm.compute_steps(&grown).map_err(|e| TestCaseError::fail(e.to_string()))?;
            for i in 0..n {
                let a = agent(i);
                let (b, c) = (as_option(before[&a]), as_option(after[&a]));
                match (b, c) {
                    (Some(x), Some(y)) => prop_assert!(y <= x, "node {} rose {} -> {}", i, x, y),
                    (Some(_), None) => prop_assert!(false, "node {} became unreachable", i),
                    _ => {}
                }
            }
            Ok(())
        })
        .map_err(|e| format!("step graph: {e}"))?;

    // Chains of every length up to 20: step i from the head.
    for n in 1..=20 {
        for max in [true, false] {
            let mask: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| j == i + 1).collect()).collect();
            let (g, _) = build(n, 0, &mask, &vec![max; n]);
            let steps = g
                .compute_steps(&BTreeSet::from([agent(0)]))
                .map_err(|e| e.to_string())?;
            for i in 0..n {
                if steps[&agent(i)] != Step::Finite(i as u32) {
                    return Err(format!("chain of {n}: node {i} has {:?}", steps[&agent(i)]));
                }
            }
        }
    }
    Ok(format!("1000 graphs ({} with a ring), chains 1..=20", rings.get()))
}

fn sim_case() -> impl Strategy<Value = (WorkloadSpec, Policy, u64, usize, f64)> {
    let topology = prop_oneof![
        (2usize..6).prop_map(|a| Topology::Sequential { agents: a }),
        (2usize..6).prop_map(|a| Topology::Cyclic { agents: a }),
        Just(Topology::BranchMax),
        Just(Topology::BranchMin),
        Just(Topology::PeerStyle),
    ];
    (
        topology,
        (8usize..64, 1usize..16, 1usize..8),
        (1usize..5, 1usize..3, 0usize..2),
        (0usize..8, any::<u64>(), prop::bool::ANY),
        (0usize..Policy::ALL.len(), 0u64..6, 1usize..4, 0.0f64..=1.0),
    )
        .prop_map(|(topology, (f, d, o), (nw, iters, warm), (shared, seed, stagger), (p, slack, pf, overlap))| {
            let mut spec = WorkloadSpec {
                topology,
                iterations: iters,
                fixed_len: f,
                dyn_len: d,
                out_len: o,
                num_workflows: nw,
                shared_prefix_len: shared.min(f - 1),
                seed,
                warmup_rounds: warm,
                arrival_stagger: if stagger { 0.01 } else { 0.0 },
                ..WorkloadSpec::default()
            };
            spec.peer.fixed_median = f as f64;
            spec.peer.dyn_median = d as f64;
            spec.peer.out_median = o as f64;
            (spec, Policy::ALL[p], slack, pf, overlap)
        })
}

/// (c) and (d): status legality against the lifecycle table and the
/// simulator's per-event accounting checks, over whole runs.
pub fn simulation_traces() -> Result<String, String> {
    let events = Cell::new(0u64);
    let transitions = Cell::new(0usize);
    runner(256)
        .run(&sim_case(), |(spec, policy, slack, pf, overlap)| {
            let w = generate(&spec).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let mut cost = CostModel::a10g_llama8b();
            cost.bytes_per_token = 16;
            let biggest = w
                .clients
                .iter()
                .flat_map(|c| c.iterations.iter().flat_map(|it| it.invocations.iter()))
                .map(|inv| inv.prompt.len() + inv.output.len())
                .max()
                .unwrap_or(1) as u64;
            let cap = (biggest + slack * 24) * cost.bytes_per_token;
            let mut cfg = SimConfig::new(cost, cap, policy);
            cfg.check_invariants = true;
            cfg.scheduler.max_concurrent_prefetch = pf;
            cfg.scheduler.overlap_fraction = overlap;
            let out = simulate(&cfg, &w).map_err(|e| TestCaseError::fail(e.to_string()))?;
            events.set(events.get() + out.events);
            prop_assert!(out.violations.is_empty(), "{:?}", out.violations);
            prop_assert_eq!(out.rows.len(), w.request_count());

            let gpu_only = matches!(policy, Policy::LruGpuOnly | Policy::WorkflowGpuOnly);
            let mut state: HashMap<u64, NodeStatus> = HashMap::new();
            for e in &out.status_log {
                match *e {
                    StatusEvent::Created { uid, status } => {
                        prop_assert!(!status.is_transferring(), "node {} born {:?}", uid, status);
                        prop_assert!(state.insert(uid, status).is_none(), "uid {} reused", uid);
                    }
                    StatusEvent::Changed { uid, from, to } => {
                        let cur = state.get(&uid).copied();
                        prop_assert_eq!(cur, Some(from), "node {} log disagrees", uid);
                        prop_assert!(legal(from, Some(to)), "node {}: {:?} -> {:?}", uid, from, to);
                        state.insert(uid, to);
                    }
                    StatusEvent::Removed { uid, from } => {
                        prop_assert_eq!(state.remove(&uid), Some(from), "node {} log disagrees", uid);
                        prop_assert!(legal(from, None), "node {}: {:?} removed", uid, from);
                    }
                }
                if gpu_only {
                    prop_assert!(state.values().all(|s| *s == NodeStatus::InGpu));
                }
            }
            transitions.set(transitions.get() + out.status_log.len());

            // Channels are FIFO and never overlap within a direction.
            for dir in [Direction::H2D, Direction::D2H] {
                let mut last = f64::NEG_INFINITY;
                for t in out.transfers.iter().filter(|t| t.direction == dir.as_str()) {
                    prop_assert!(t.start >= t.enqueue && t.complete >= t.start);
                    prop_assert!(t.start >= last - 1e-12, "overlapping {} jobs", dir.as_str());
                    last = t.complete;
                }
            }
            for r in &out.rows {
                prop_assert_eq!(r.hit_tokens + r.loaded_tokens + r.recomputed_tokens, r.prompt_tokens);
            }
            Ok(())
        })
        .map_err(|e| format!("simulation traces: {e}"))?;
    Ok(format!("256 runs, {} events, {} status records", events.get(), transitions.get()))
}
