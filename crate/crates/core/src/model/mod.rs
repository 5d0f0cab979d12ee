//! Toy Llama-style transformer used as the training substrate.
//!
//! Each block is `RMSNorm → Q/K/V → causal attention → O → residual →
//! RMSNorm → Gate/Up → SwiGLU → Down → residual`. Only the seven linear layers
//! per block take part in precision selection; embeddings, norms, attention
//! and the output head always run at working precision.

mod adamw;
mod data;
mod flops;
mod precision;
mod transformer;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SnipError};
use crate::rng::{purpose, RngStream};
use crate::tensor::Tensor;

pub use adamw::{AdamW, AdamWHyper};
pub use data::{Batch, MarkovSource, IGNORE_TARGET};
pub use flops::{layer_dims, layer_flops, total_linear_flops};
pub use precision::{LayerPrecision, PrecisionPolicy, POLICY_SCHEMA};
pub use transformer::{ForwardCache, GradSet, InjectionSite, LinearGrads, Pass};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_blocks: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: 2 blocks, d_model 32, 256-token vocabulary.
    pub fn toy() -> Self {
        Self {
            vocab: 256,
            d_model: 32,
            n_heads: 4,
            d_ff: 128,
            n_blocks: 2,
            seq_len: 32,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("vocab", self.vocab),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_blocks", self.n_blocks),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(invalid(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_linear_layers(&self) -> usize {
        LayerKind::ALL.len() * self.n_blocks
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerKind {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl LayerKind {
    pub const ALL: [LayerKind; 7] = [
        LayerKind::Q,
        LayerKind::K,
        LayerKind::V,
        LayerKind::O,
        LayerKind::Gate,
        LayerKind::Up,
        LayerKind::Down,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Q => "Q",
            LayerKind::K => "K",
            LayerKind::V => "V",
            LayerKind::O => "O",
            LayerKind::Gate => "Gate",
            LayerKind::Up => "Up",
            LayerKind::Down => "Down",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerKind {
    type Err = SnipError;
    fn from_str(s: &str) -> Result<Self> {
        LayerKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid(format!("unknown layer kind {s:?}")))
    }
}

/// A quantizable linear layer: `(block, kind)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerId {
    pub block: usize,
    pub kind: LayerKind,
}

impl LayerId {
    pub fn new(block: usize, kind: LayerKind) -> Self {
        Self { block, kind }
    }

    /// All linear layers in forward order.
    pub fn all(n_blocks: usize) -> Vec<LayerId> {
        (0..n_blocks)
            .flat_map(|b| LayerKind::ALL.into_iter().map(move |k| LayerId::new(b, k)))
            .collect()
    }

    /// Position in [`LayerId::all`].
    pub fn index(&self) -> usize {
        self.block * LayerKind::ALL.len() + self.kind.ordinal()
    }

    pub fn from_index(i: usize) -> Self {
        LayerId::new(i / LayerKind::ALL.len(), LayerKind::ALL[i % LayerKind::ALL.len()])
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.block, self.kind)
    }
}

/// Parameter slots per transformer block.
const BLOCK_SLOTS: usize = 9;
const SLOT_ATTN_NORM: usize = 0;
const SLOT_FFN_NORM: usize = 5;

/// Index arithmetic over the flat parameter list:
/// `tok_emb, pos_emb, [attn_norm, Q, K, V, O, ffn_norm, Gate, Up, Down] × n_blocks, final_norm, lm_head`.
#[derive(Debug, Clone, Copy)]
pub struct ParamLayout {
    n_blocks: usize,
}

impl ParamLayout {
    pub fn new(n_blocks: usize) -> Self {
        Self { n_blocks }
    }

    pub const TOK_EMB: usize = 0;
    pub const POS_EMB: usize = 1;

    fn block_base(&self, block: usize) -> usize {
        2 + block * BLOCK_SLOTS
    }

    pub fn attn_norm(&self, block: usize) -> usize {
        self.block_base(block) + SLOT_ATTN_NORM
    }

    pub fn ffn_norm(&self, block: usize) -> usize {
        self.block_base(block) + SLOT_FFN_NORM
    }

    pub fn linear(&self, id: LayerId) -> usize {
        let base = self.block_base(id.block);
        match id.kind {
            LayerKind::Q => base + 1,
            LayerKind::K => base + 2,
            LayerKind::V => base + 3,
            LayerKind::O => base + 4,
            LayerKind::Gate => base + 6,
            LayerKind::Up => base + 7,
            LayerKind::Down => base + 8,
        }
    }

    pub fn final_norm(&self) -> usize {
        2 + self.n_blocks * BLOCK_SLOTS
    }

    pub fn lm_head(&self) -> usize {
        self.final_norm() + 1
    }

    pub fn len(&self) -> usize {
        self.lm_head() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for b in 0..self.n_blocks {
            names.push(format!("block{b}.attn_norm"));
            for k in &LayerKind::ALL[..4] {
                names.push(format!("block{b}.{}", k.name().to_lowercase()));
            }
            names.push(format!("block{b}.ffn_norm"));
            for k in &LayerKind::ALL[4..] {
                names.push(format!("block{b}.{}", k.name().to_lowercase()));
            }
        }
        names.push("final_norm".into());
        names.push("lm_head".into());
        names
    }
}

/// Model parameters plus a version counter that invalidates forward caches
/// when the weights change.
#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Tensor>,
    version: u64,
    passes: AtomicU64,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            version: self.version,
            passes: AtomicU64::new(self.passes()),
        }
    }
}

pub(crate) const INIT_STD: f64 = 0.02;

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn next_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config.n_blocks);
        let (d, v) = (config.d_model, config.vocab);
        let base = RngStream::new(config.seed).derive(purpose::INIT);
        let residual_std = INIT_STD / (2.0 * config.n_blocks as f64).sqrt();
        let normal = |shape: &[usize], std: f64, slot: usize| {
            let mut g = base.derive(slot as u64).generator();
            let dist = Normal::new(0.0, std).expect("positive std");
            let n: usize = shape.iter().product();
            Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(&mut g)).collect())
        };
        let mut params = Vec::with_capacity(layout.len());
        params.push(normal(&[v, d], INIT_STD, ParamLayout::TOK_EMB));
        params.push(normal(&[config.seq_len, d], INIT_STD, ParamLayout::POS_EMB));
        for b in 0..config.n_blocks {
            params.push(Tensor::full(&[d], 1.0));
            for kind in LayerKind::ALL {
                let id = LayerId::new(b, kind);
                let (n_out, k_in) = layer_dims(id, &config);
                let std = if matches!(kind, LayerKind::O | LayerKind::Down) {
                    residual_std
                } else {
                    INIT_STD
                };
                if kind == LayerKind::Gate {
                    params.push(Tensor::full(&[d], 1.0));
                }
                params.push(normal(&[n_out, k_in], std, layout.linear(id)));
            }
        }
        params.push(Tensor::full(&[d], 1.0));
        params.push(normal(&[v, d], INIT_STD, layout.lm_head()));
        debug_assert_eq!(params.len(), layout.len());
        Ok(Self {
            config,
            params,
            version: next_version(),
            passes: AtomicU64::new(0),
        })
    }

    /// Rebuilds a model from stored parameters, checking every shape.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        let fresh = Model::new(config.clone())?;
        if fresh.params.len() != params.len() {
            return Err(invalid(format!(
                "expected {} parameter tensors, got {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for (i, (a, b)) in fresh.params.iter().zip(&params).enumerate() {
            if a.shape() != b.shape() {
                return Err(crate::error::shape_err(format!(
                    "parameter {i}: expected {:?}, got {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(Self {
            config,
            params,
            version: next_version(),
            passes: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.config.n_blocks)
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn weight(&self, id: LayerId) -> &Tensor {
        &self.params[self.layout().linear(id)]
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Completed backward passes since construction.
    pub fn passes(&self) -> u64 {
        self.passes.load(Ordering::Relaxed)
    }

    fn count_pass(&self) {
        self.passes.fetch_add(1, Ordering::Relaxed);
    }

    /// Mutable access for tests and tools; bumps the version.
    pub fn params_mut(&mut self) -> &mut [Tensor] {
        self.version = next_version();
        &mut self.params
    }

    /// Applies one AdamW update with `grads` (one tensor per parameter).
    pub fn apply_adamw(&mut self, opt: &mut AdamW, grads: &[Tensor]) -> Result<()> {
        opt.step(&mut self.params, grads)?;
        self.version = next_version();
        Ok(())
    }

    pub fn layer_ids(&self) -> Vec<LayerId> {
        LayerId::all(self.config.n_blocks)
    }
}
