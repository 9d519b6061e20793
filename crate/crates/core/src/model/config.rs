use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Order of the two interaction blocks inside each layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlockOrder {
    /// Temporal block, then spatial block.
    #[default]
    TemporalSpatial,
    SpatialTemporal,
}

/// Network hyperparameters.
///
/// `node_embed_total` is the per-node embedding width before it is unfolded
/// into `window` time-varying heads, so it must be a multiple of `window`.
/// The per-step slice (`node_embed_total / window`) is what gets concatenated
/// to the input features and averaged for the spatial attention keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_nodes: usize,
    pub window: usize,
    pub input_hidden: usize,
    pub node_embed_total: usize,
    pub node_embed_key_dim: usize,
    pub model_dim: usize,
    pub projected_dim: usize,
    pub n_layers: usize,
    pub ffn_hidden: usize,
    pub n_heads: usize,
    pub day_unit: usize,
    pub layer_norm_eps: f64,
    pub block_order: BlockOrder,
    /// When false the temporal attention is replaced by the identity map.
    pub temporal_attention: bool,
    /// When false the spatial aggregation is replaced by the identity map.
    pub spatial_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_nodes: 32,
            window: 24,
            input_hidden: 16,
            node_embed_total: 96,
            node_embed_key_dim: 16,
            model_dim: 64,
            projected_dim: 6,
            n_layers: 3,
            ffn_hidden: 128,
            n_heads: 1,
            day_unit: 24,
            layer_norm_eps: 1e-5,
            block_order: BlockOrder::TemporalSpatial,
            temporal_attention: true,
            spatial_attention: true,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by gradient checks.
    pub fn tiny(n_nodes: usize, window: usize) -> Self {
        Self {
            n_nodes,
            window,
            input_hidden: 4,
            node_embed_total: 2 * window,
            node_embed_key_dim: 4,
            model_dim: 16,
            projected_dim: 3,
            n_layers: 2,
            ffn_hidden: 16,
            ..Self::default()
        }
    }

    pub fn embed_per_step(&self) -> usize {
        self.node_embed_total / self.window
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_nodes", self.n_nodes),
            ("window", self.window),
            ("input_hidden", self.input_hidden),
            ("node_embed_total", self.node_embed_total),
            ("node_embed_key_dim", self.node_embed_key_dim),
            ("model_dim", self.model_dim),
            ("projected_dim", self.projected_dim),
            ("n_layers", self.n_layers),
            ("ffn_hidden", self.ffn_hidden),
            ("n_heads", self.n_heads),
            ("day_unit", self.day_unit),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.projected_dim >= self.window {
            return Err(Error::Config(format!(
                "projected_dim ({}) must be smaller than window ({})",
                self.projected_dim, self.window
            )));
        }
        if self.node_embed_key_dim >= self.model_dim {
            return Err(Error::Config(format!(
                "node_embed_key_dim ({}) must be smaller than model_dim ({})",
                self.node_embed_key_dim, self.model_dim
            )));
        }
        if self.node_embed_total % self.window != 0 {
            return Err(Error::Config(format!(
                "node_embed_total ({}) must be divisible by window ({})",
                self.node_embed_total, self.window
            )));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim ({}) must be divisible by n_heads ({})",
                self.model_dim, self.n_heads
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny(4, 8).validate().unwrap();
    }

    #[test]
    fn rejects_projection_not_below_window() {
        let cfg = ModelConfig {
            projected_dim: 24,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_indivisible_node_embedding() {
        let cfg = ModelConfig {
            node_embed_total: 100,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_key_dim_not_below_model_dim() {
        let cfg = ModelConfig {
            node_embed_key_dim: 64,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<ModelConfig>(r#"{"model_dim": 8, "bogus": 1}"#);
        assert!(err.is_err());
    }
}
