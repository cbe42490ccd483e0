//! Model descriptions loaded from TOML.
//!
//! ```toml
//! name = "Qwen2.5-32B"
//! hidden_size = 5120
//! inter_size = 27648
//! num_experts = 1
//! num_layers = 64
//! num_kv_heads = 8
//! head_dim = 128
//! element_bytes = 2
//! weights_gb = 62.34
//! supported_tp = [1, 2, 4]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::page_store::GB;
use crate::weight_plan::{TensorRole, TensorSpec};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing model config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid model config: {0}")]
    Invalid(String),
    #[error("unknown model preset {0:?}")]
    UnknownPreset(String),
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub hidden_size: u64,
    pub inter_size: u64,
    #[serde(default = "one")]
    pub num_experts: u64,
    pub num_layers: usize,
    pub num_kv_heads: u64,
    pub head_dim: u64,
    pub element_bytes: u64,
    /// Total weight size in decimal GB.
    pub weights_gb: f64,
    pub supported_tp: Vec<usize>,
    /// Whether gate and up projections are stored as one fused tensor.
    /// Defaults to true for expert models, false for dense ones.
    #[serde(default)]
    pub fused_gate_up: Option<bool>,
}

impl ModelConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ModelError> {
        let cfg: ModelConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            self.hidden_size,
            self.inter_size,
            self.num_experts,
            self.num_kv_heads,
            self.head_dim,
            self.element_bytes,
        ];
        if dims.contains(&0) || self.num_layers == 0 {
            return Err(ModelError::Invalid("all dimensions must be >= 1".into()));
        }
        if !(self.weights_gb > 0.0) {
            return Err(ModelError::Invalid("weights_gb must be positive".into()));
        }
        if self.supported_tp.is_empty() || self.supported_tp.contains(&0) {
            return Err(ModelError::Invalid(
                "supported_tp must list positive degrees".into(),
            ));
        }
        Ok(())
    }

    pub fn is_fused(&self) -> bool {
        self.fused_gate_up.unwrap_or(self.num_experts > 1)
    }

    pub fn max_tp(&self) -> usize {
        self.supported_tp.iter().copied().max().unwrap_or(1)
    }

    pub fn weight_bytes(&self) -> u64 {
        (self.weights_gb * GB as f64).round() as u64
    }

    /// MLP tensors of one transformer layer.
    pub fn mlp_tensors(&self) -> Vec<TensorSpec> {
        let spec = |name: &str, role| TensorSpec {
            name: name.to_string(),
            hidden_size: self.hidden_size,
            inter_size: self.inter_size,
            num_experts: self.num_experts,
            element_bytes: self.element_bytes,
            role,
        };
        if self.is_fused() {
            vec![
                spec("gate_up_proj", TensorRole::GateUpProj),
                spec("down_proj", TensorRole::DownProj),
            ]
        } else {
            vec![
                spec("gate_proj", TensorRole::UpProj),
                spec("up_proj", TensorRole::UpProj),
                spec("down_proj", TensorRole::DownProj),
            ]
        }
    }

    pub fn mlp_bytes_per_layer(&self) -> u64 {
        self.mlp_tensors().iter().map(TensorSpec::bytes).sum()
    }

    pub fn mlp_bytes(&self) -> u64 {
        self.mlp_bytes_per_layer() * self.num_layers as u64
    }

    /// Attention, embedding and norm weights; kept replicated on every worker.
    pub fn non_mlp_bytes(&self) -> u64 {
        self.weight_bytes().saturating_sub(self.mlp_bytes())
    }

    pub fn mlp_fraction(&self) -> f64 {
        self.mlp_bytes() as f64 / self.weight_bytes() as f64
    }

    /// KV bytes one token occupies in one layer on one worker at `tp`.
    pub fn kv_bytes_per_token_layer(&self, tp: usize) -> u64 {
        2 * (self.num_kv_heads / tp as u64).max(1) * self.head_dim * self.element_bytes
    }

    /// KV bytes one token occupies across all layers on one worker at `tp`.
    pub fn kv_bytes_per_token(&self, tp: usize) -> u64 {
        self.kv_bytes_per_token_layer(tp) * self.num_layers as u64
    }

    pub fn preset(name: &str) -> Result<Self, ModelError> {
        let key: String = name
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match key.as_str() {
            "qwen2532b" => presets::qwen2_5_32b(),
            "qwen332b" => presets::qwen3_32b(),
            "llama27b" => presets::llama2_7b(),
            "llama38b" => presets::llama3_8b(),
            "llama3170b" => presets::llama3_1_70b(),
            "gptoss120b" => presets::gpt_oss_120b(),
            "gptoss20b" => presets::gpt_oss_20b(),
            _ => return Err(ModelError::UnknownPreset(name.to_string())),
        })
    }
}

/// Built-in model shapes. Weight sizes for Llama2-7B, Llama3-8B and the two
/// 32B models are the BF16 checkpoint sizes used throughout the tests; the
/// others are BF16 parameter-count estimates.
pub mod presets {
    use super::ModelConfig;

    #[allow(clippy::too_many_arguments)]
    fn dense(
        name: &str,
        hidden: u64,
        inter: u64,
        layers: usize,
        kv_heads: u64,
        head_dim: u64,
        weights_gb: f64,
    ) -> ModelConfig {
        ModelConfig {
            name: name.into(),
            hidden_size: hidden,
            inter_size: inter,
            num_experts: 1,
            num_layers: layers,
            num_kv_heads: kv_heads,
            head_dim,
            element_bytes: 2,
            weights_gb,
            supported_tp: vec![1, 2, 4],
            fused_gate_up: None,
        }
    }

    pub fn qwen2_5_32b() -> ModelConfig {
        dense("Qwen2.5-32B", 5120, 27648, 64, 8, 128, 62.34)
    }

    pub fn qwen3_32b() -> ModelConfig {
        dense("Qwen3-32B", 5120, 25600, 64, 8, 128, 62.34)
    }

    pub fn llama2_7b() -> ModelConfig {
        dense("Llama2-7B", 4096, 11008, 32, 32, 128, 15.67)
    }

    pub fn llama3_8b() -> ModelConfig {
        dense("Llama3-8B", 4096, 14336, 32, 8, 128, 16.66)
    }

    pub fn llama3_1_70b() -> ModelConfig {
        dense("Llama-3.1-70B", 8192, 28672, 80, 8, 128, 141.12)
    }

    pub fn gpt_oss_120b() -> ModelConfig {
        ModelConfig {
            num_experts: 128,
            ..dense("GPT-OSS-120B", 2880, 2880, 36, 8, 64, 233.7)
        }
    }

    pub fn gpt_oss_20b() -> ModelConfig {
        ModelConfig {
            num_experts: 32,
            ..dense("GPT-OSS-20B", 2880, 2880, 24, 8, 64, 41.8)
        }
    }

    pub fn all() -> Vec<ModelConfig> {
        vec![
            gpt_oss_120b(),
            gpt_oss_20b(),
            llama3_1_70b(),
            qwen2_5_32b(),
            llama2_7b(),
            llama3_8b(),
            qwen3_32b(),
        ]
    }
}
