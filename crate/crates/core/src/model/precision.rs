use serde::{Deserialize, Serialize};

use super::{LayerId, LayerKind};
use crate::error::{invalid, Result};
use crate::quant::QuantSpec;

pub const POLICY_SCHEMA: &str = "snip.policy.v1";

/// Quantization of the three GEMM inputs of one linear layer. `None` is high
/// precision: the tensor passes through unquantized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct LayerPrecision {
    /// Input activations.
    pub x: Option<QuantSpec>,
    /// Weights.
    pub w: Option<QuantSpec>,
    /// Output gradients.
    pub g: Option<QuantSpec>,
}

impl LayerPrecision {
    pub fn high() -> Self {
        Self::default()
    }

    /// E4M3 everywhere: tiles for activations and gradients, blocks for weights.
    pub fn fp8() -> Self {
        Self {
            x: Some(QuantSpec::fp8_tile()),
            w: Some(QuantSpec::fp8_block()),
            g: Some(QuantSpec::fp8_tile()),
        }
    }

    /// E2M1 everywhere, gradients with stochastic rounding.
    pub fn fp4() -> Self {
        Self {
            x: Some(QuantSpec::fp4_tile()),
            w: Some(QuantSpec::fp4_block()),
            g: Some(QuantSpec::fp4_grad()),
        }
    }

    pub fn is_high(&self) -> bool {
        self.x.is_none() && self.w.is_none() && self.g.is_none()
    }

    /// Overrides the block edge of every tile/block granularity.
    pub fn with_block(self, nb: usize) -> Self {
        Self {
            x: self.x.map(|s| s.with_block(nb)),
            w: self.w.map(|s| s.with_block(nb)),
            g: self.g.map(|s| s.with_block(nb)),
        }
    }

    fn is_fp4_spec(spec: Option<QuantSpec>) -> bool {
        spec.map(|s| s.is_fp4()).unwrap_or(false)
    }

    /// Fraction of the layer's three GEMMs (forward, dgrad, wgrad) whose two
    /// inputs are both FP4.
    pub fn fp4_gemm_fraction(&self) -> f64 {
        let (x, w, g) = (Self::is_fp4_spec(self.x), Self::is_fp4_spec(self.w), Self::is_fp4_spec(self.g));
        let gemms = [x && w, g && w, g && x];
        gemms.iter().filter(|b| **b).count() as f64 / 3.0
    }

    /// Short label such as `x4w4g8` (`h` marks high precision).
    pub fn label(&self) -> String {
        let tag = |s: Option<QuantSpec>| match s {
            None => "h".to_string(),
            Some(s) => (1 + s.format.exp_bits() + s.format.mantissa_bits()).to_string(),
        };
        format!("x{}w{}g{}", tag(self.x), tag(self.w), tag(self.g))
    }
}

/// One precision per linear layer, indexed by [`LayerId::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionPolicy {
    pub label: String,
    layers: Vec<LayerPrecision>,
}

#[derive(Serialize, Deserialize)]
struct PolicyRow {
    block: usize,
    kind: LayerKind,
    x: Option<QuantSpec>,
    w: Option<QuantSpec>,
    g: Option<QuantSpec>,
}

#[derive(Serialize, Deserialize)]
struct PolicyDoc {
    schema: String,
    label: String,
    layers: Vec<PolicyRow>,
}

impl PrecisionPolicy {
    pub fn uniform(n_blocks: usize, precision: LayerPrecision, label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            layers: vec![precision; n_blocks * LayerKind::ALL.len()],
        }
    }

    pub fn high_precision(n_blocks: usize) -> Self {
        Self::uniform(n_blocks, LayerPrecision::high(), "high")
    }

    pub fn from_layers(layers: Vec<LayerPrecision>, label: impl Into<String>) -> Result<Self> {
        if layers.is_empty() || layers.len() % LayerKind::ALL.len() != 0 {
            return Err(invalid(format!(
                "policy needs a multiple of {} layers, got {}",
                LayerKind::ALL.len(),
                layers.len()
            )));
        }
        Ok(Self {
            label: label.into(),
            layers,
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.layers.len() / LayerKind::ALL.len()
    }

    pub fn get(&self, id: LayerId) -> &LayerPrecision {
        &self.layers[id.index()]
    }

    pub fn set(&mut self, id: LayerId, p: LayerPrecision) {
        self.layers[id.index()] = p;
    }

    pub fn layers(&self) -> &[LayerPrecision] {
        &self.layers
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = PolicyDoc {
            schema: POLICY_SCHEMA.into(),
            label: self.label.clone(),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let id = LayerId::from_index(i);
                    PolicyRow {
                        block: id.block,
                        kind: id.kind,
                        x: p.x,
                        w: p.w,
                        g: p.g,
                    }
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Parses a policy document; every `(block, kind)` of `n_blocks` blocks
    /// must appear exactly once.
    pub fn from_json(s: &str, n_blocks: usize) -> Result<Self> {
        let doc: PolicyDoc = serde_json::from_str(s)?;
        if doc.schema != POLICY_SCHEMA {
            return Err(invalid(format!("unsupported policy schema {:?}", doc.schema)));
        }
        let n = n_blocks * LayerKind::ALL.len();
        let mut layers: Vec<Option<LayerPrecision>> = vec![None; n];
        for row in doc.layers {
            if row.block >= n_blocks {
                return Err(invalid(format!("policy names block {} of {n_blocks}", row.block)));
            }
            let id = LayerId::new(row.block, row.kind);
            let slot = &mut layers[id.index()];
            if slot.is_some() {
                return Err(invalid(format!("layer {id} listed twice")));
            }
            *slot = Some(LayerPrecision {
                x: row.x,
                w: row.w,
                g: row.g,
            });
        }
        let layers = layers
            .into_iter()
            .enumerate()
            .map(|(i, p)| p.ok_or_else(|| invalid(format!("layer {} missing from policy", LayerId::from_index(i)))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            label: doc.label,
            layers,
        })
    }
}
