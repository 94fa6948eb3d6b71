//! Cost model: token counts to simulated bytes and seconds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("cost parameter `{0}` must be strictly positive")]
    NonPositive(&'static str),
    #[error("pcie_efficiency must be in (0, 1], got {0}")]
    Efficiency(f64),
    #[error("unknown cost profile `{0}`")]
    UnknownProfile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Host to device (loads).
    H2D,
    /// Device to host (offloads).
    D2H,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::H2D => "h2d",
            Direction::D2H => "d2h",
        }
    }
}

/// Model shape used to derive the per-token KV footprint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub layers: u64,
    pub kv_heads: u64,
    pub head_dim: u64,
    pub dtype_bytes: u64,
}

impl ModelShape {
    /// K and V for every layer and KV head.
    pub fn bytes_per_token(&self) -> u64 {
        2 * self.layers * self.kv_heads * self.head_dim * self.dtype_bytes
    }
}

pub const LLAMA_3_1_8B: ModelShape = ModelShape {
    layers: 32,
    kv_heads: 8,
    head_dim: 128,
    dtype_bytes: 2,
};

pub const QWEN_2_5_32B: ModelShape = ModelShape {
    layers: 64,
    kv_heads: 8,
    head_dim: 128,
    dtype_bytes: 2,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub bytes_per_token: u64,
    /// Prefill seconds per uncached token.
    pub prefill_a: f64,
    /// Prefill fixed cost per request (seconds).
    pub prefill_b: f64,
    pub decode_base: f64,
    pub decode_per_seq: f64,
    /// Nominal bandwidths in bytes/second.
    pub h2d_bw: f64,
    pub d2h_bw: f64,
    pub pcie_efficiency: f64,
    pub fixed_latency: f64,
}

impl CostModel {
    /// Llama-3.1-8B on a 24 GB A10G with a 2 GB/s link.
    pub fn a10g_llama8b() -> Self {
        Self {
            bytes_per_token: LLAMA_3_1_8B.bytes_per_token(),
            prefill_a: 2.4e-4,
            prefill_b: 0.015,
            decode_base: 0.028,
            decode_per_seq: 5.0e-4,
            h2d_bw: 2.0e9,
            d2h_bw: 2.0e9,
            pcie_efficiency: 0.6,
            fixed_latency: 50e-6,
        }
    }

    /// Qwen2.5-32B on an 80 GB H100 with a 64 GB/s link.
    pub fn h100_qwen32b() -> Self {
        Self {
            bytes_per_token: QWEN_2_5_32B.bytes_per_token(),
            prefill_a: 1.2e-4,
            prefill_b: 0.02,
            decode_base: 0.035,
            decode_per_seq: 2.0e-4,
            h2d_bw: 64.0e9,
            d2h_bw: 64.0e9,
            pcie_efficiency: 0.6,
            fixed_latency: 50e-6,
        }
    }

    pub fn profile(name: &str) -> Result<Self, CostError> {
        match name {
            "a10g-llama8b" => Ok(Self::a10g_llama8b()),
            "h100-qwen32b" => Ok(Self::h100_qwen32b()),
            other => Err(CostError::UnknownProfile(other.to_string())),
        }
    }

    /// Bytes of KV memory available on the GPU for each shipped profile.
    pub fn profile_kv_capacity(name: &str) -> Option<u64> {
        const GIB: u64 = 1 << 30;
        match name {
            // 24 GB minus ~16 GB of weights and activation headroom.
            "a10g-llama8b" => Some(5 * GIB),
            // 80 GB minus ~64 GB of weights and activation headroom.
            "h100-qwen32b" => Some(12 * GIB),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), CostError> {
        let positive = [
            ("prefill_a", self.prefill_a),
            ("prefill_b", self.prefill_b),
            ("decode_base", self.decode_base),
            ("decode_per_seq", self.decode_per_seq),
            ("h2d_bw", self.h2d_bw),
            ("d2h_bw", self.d2h_bw),
            ("fixed_latency", self.fixed_latency),
        ];
        if self.bytes_per_token == 0 {
            return Err(CostError::NonPositive("bytes_per_token"));
        }
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CostError::NonPositive(name));
            }
        }
        if !(self.pcie_efficiency > 0.0 && self.pcie_efficiency <= 1.0) {
            return Err(CostError::Efficiency(self.pcie_efficiency));
        }
        Ok(())
    }

    pub fn kv_bytes(&self, tokens: u64) -> u64 {
        tokens * self.bytes_per_token
    }

    pub fn prefill_time(&self, new_tokens: u64) -> f64 {
        self.prefill_a * new_tokens as f64 + self.prefill_b
    }

    pub fn decode_iter_time(&self, batch: usize) -> f64 {
        self.decode_base + self.decode_per_seq * batch as f64
    }

    pub fn effective_bandwidth(&self, dir: Direction) -> f64 {
        let nominal = match dir {
            Direction::H2D => self.h2d_bw,
            Direction::D2H => self.d2h_bw,
        };
        nominal * self.pcie_efficiency
    }

    pub fn transfer_time(&self, bytes: u64, dir: Direction) -> f64 {
        bytes as f64 / self.effective_bandwidth(dir) + self.fixed_latency
    }
}
