//! Per-request traces, transfer traces and run aggregates.

use std::io::Write;

use serde::Serialize;

use crate::tier::TransferJob;

/// One row per request. Column order is stable; see the README.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub request_id: usize,
    pub client: u32,
    pub agent: String,
    pub arrival: f64,
    pub prefill_start: f64,
    pub first_token: f64,
    pub done: f64,
    pub matched_tokens: usize,
    pub recomputed_tokens: usize,
    pub loaded_bytes: u64,
    pub stall_time: f64,
    pub iteration: usize,
    pub measured: bool,
    /// Scheduled start of the client's workflow, identical across policies.
    pub submit: f64,
    pub prompt_tokens: usize,
    pub hit_tokens: usize,
    pub loaded_tokens: usize,
    pub fixed_tokens: usize,
    /// The whole fixed part was reused (from GPU or via a load).
    pub fixed_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferRow {
    pub job_id: u64,
    pub direction: &'static str,
    pub bytes: u64,
    pub enqueue: f64,
    pub start: f64,
    pub complete: f64,
}

impl From<&TransferJob> for TransferRow {
    fn from(j: &TransferJob) -> Self {
        Self {
            job_id: j.id.0,
            direction: j.direction.as_str(),
            bytes: j.bytes,
            enqueue: j.enqueue_time,
            start: j.start_time,
            complete: j.completion_time,
        }
    }
}

/// Aggregates over measured requests and workflow iterations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub policy: String,
    pub workload: String,
    pub requests: usize,
    pub workflow_iterations: usize,
    pub mean_latency: f64,
    pub median_latency: f64,
    pub p99_latency: f64,
    pub makespan: f64,
    pub hit_token_ratio: f64,
    pub fixed_hit_rate: f64,
    pub recomputed_tokens: u64,
    pub loaded_bytes: u64,
    pub stall_time: f64,
    pub wasted_prefetch_bytes: u64,
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => 0.0,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

/// Nearest-rank percentile, `q` in (0, 1].
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let rank = (q * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

impl Summary {
    pub fn from_run(
        policy: &str,
        workload: &str,
        rows: &[TraceRow],
        workflow_latencies: &[f64],
        makespan: f64,
        wasted_prefetch_bytes: u64,
    ) -> Self {
        let measured: Vec<&TraceRow> = rows.iter().filter(|r| r.measured).collect();
        let prompt: usize = measured.iter().map(|r| r.prompt_tokens).sum();
        let hit: usize = measured.iter().map(|r| r.hit_tokens + r.loaded_tokens).sum();
        let fixed_rows: Vec<_> = measured.iter().filter(|r| r.fixed_tokens > 0).collect();
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        Self {
            policy: policy.to_string(),
            workload: workload.to_string(),
            requests: measured.len(),
            workflow_iterations: workflow_latencies.len(),
            mean_latency: mean(workflow_latencies),
            median_latency: median(workflow_latencies),
            p99_latency: percentile(workflow_latencies, 0.99),
            makespan,
            hit_token_ratio: ratio(hit, prompt),
            fixed_hit_rate: ratio(fixed_rows.iter().filter(|r| r.fixed_hit).count(), fixed_rows.len()),
            recomputed_tokens: measured.iter().map(|r| r.recomputed_tokens as u64).sum(),
            loaded_bytes: measured.iter().map(|r| r.loaded_bytes).sum(),
            stall_time: measured.iter().map(|r| r.stall_time).sum(),
            wasted_prefetch_bytes,
        }
    }
}

/// Serializes `rows` as CSV with a header line.
pub fn write_csv<T: Serialize>(out: impl Write, rows: &[T]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv_string<T: Serialize>(rows: &[T]) -> String {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows).expect("in-memory write");
    String::from_utf8(buf).expect("csv is utf-8")
}
