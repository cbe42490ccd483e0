use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::page_store::DEFAULT_PAGE_SIZE;
use crate::weight_plan::resident_weight_bytes;

/// Per-degree serving characteristics of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfModel {
    pub throughput_by_tp: BTreeMap<usize, f64>,
    pub prefill_rate_by_tp: BTreeMap<usize, f64>,
    pub kv_capacity_by_tp: BTreeMap<usize, u64>,
}

impl Default for PerfModel {
    /// Measured Qwen2.5-32B figures on H20 GPUs. Prefill runs at the decode
    /// token rate, which keeps a full TP1 prefill (3750 tokens) under 10 s.
    fn default() -> Self {
        let throughput = BTreeMap::from([(1, 448.0), (2, 670.0), (4, 767.0)]);
        PerfModel {
            prefill_rate_by_tp: throughput.clone(),
            throughput_by_tp: throughput,
            kv_capacity_by_tp: BTreeMap::from([(1, 3_750), (2, 41_250), (4, 120_500)]),
        }
    }
}

impl PerfModel {
    pub fn validate(&self) -> Result<(), String> {
        if self.throughput_by_tp.is_empty() {
            return Err("perf model has no TP degrees".into());
        }
        let tps: Vec<usize> = self.throughput_by_tp.keys().copied().collect();
        if self.prefill_rate_by_tp.keys().copied().collect::<Vec<_>>() != tps {
            return Err("prefill rates must cover the same TP degrees as throughput".into());
        }
        if self.kv_capacity_by_tp.keys().copied().collect::<Vec<_>>() != tps {
            return Err("KV capacities must cover the same TP degrees as throughput".into());
        }
        if self
            .throughput_by_tp
            .values()
            .chain(self.prefill_rate_by_tp.values())
            .any(|&r| !(r > 0.0 && r.is_finite()))
        {
            return Err("rates must be positive".into());
        }
        let caps: Vec<u64> = self.kv_capacity_by_tp.values().copied().collect();
        if caps.windows(2).any(|w| w[1] < w[0]) || caps.first() == Some(&0) {
            return Err("KV capacity must be positive and non-decreasing in TP".into());
        }
        Ok(())
    }

    pub fn supported_tp(&self) -> Vec<usize> {
        self.throughput_by_tp.keys().copied().collect()
    }

    pub fn min_tp(&self) -> usize {
        self.throughput_by_tp.keys().next().copied().unwrap_or(1)
    }

    pub fn max_tp(&self) -> usize {
        self.throughput_by_tp
            .keys()
            .next_back()
            .copied()
            .unwrap_or(1)
    }

    pub fn throughput(&self, tp: usize) -> f64 {
        self.throughput_by_tp.get(&tp).copied().unwrap_or(0.0)
    }

    pub fn prefill_rate(&self, tp: usize) -> f64 {
        self.prefill_rate_by_tp.get(&tp).copied().unwrap_or(0.0)
    }

    pub fn kv_capacity(&self, tp: usize) -> u64 {
        self.kv_capacity_by_tp.get(&tp).copied().unwrap_or(0)
    }

    /// Smallest degree whose KV capacity holds `tokens`.
    pub fn min_tp_for(&self, tokens: u64) -> Option<usize> {
        self.kv_capacity_by_tp
            .iter()
            .find(|(_, &c)| c >= tokens)
            .map(|(&tp, _)| tp)
    }

    /// Replace capacities with what fits in `gpu_bytes` after resident
    /// weights and the activation reservation.
    pub fn with_capacity_from_memory(
        mut self,
        model: &ModelConfig,
        gpu_bytes: u64,
        activation_bytes: u64,
    ) -> Self {
        for (&tp, cap) in self.kv_capacity_by_tp.iter_mut() {
            let weights =
                resident_weight_bytes(model, tp, false, DEFAULT_PAGE_SIZE).unwrap_or(u64::MAX);
            let free = gpu_bytes.saturating_sub(weights + activation_bytes);
            *cap = free / model.kv_bytes_per_token(tp);
        }
        self
    }
}
