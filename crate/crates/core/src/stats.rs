//! Statistics passes over a fixed batch: the high-precision baseline and the
//! two noise-injection passes, plus standalone checks of the perturbation
//! estimators they rely on.

use serde::{Deserialize, Serialize};

use crate::divergence::Catalog;
use crate::error::{invalid, Result, SnipError};
use crate::model::{
    layer_dims, AdamW, AdamWHyper, Batch, GradSet, InjectionSite, LayerId, Model, ModelConfig, Pass, PrecisionPolicy,
};
use crate::quant::fake_quantize;
use crate::rng::{purpose, RngStream};
use crate::tensor::{sample_gaussian, Tensor};

pub const BUNDLE_SCHEMA: &str = "snip.stats.v1";

/// Relative injection size used when the caller does not pick one.
pub const DEFAULT_EPS_REL: f64 = 1e-4;

const TINY: f64 = 1e-30;

/// Frobenius norms recorded for one linear layer `Y = X·Wᵀ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerNorms {
    #[serde(with = "crate::decimal")]
    pub x: f64,
    #[serde(with = "crate::decimal")]
    pub w: f64,
    #[serde(with = "crate::decimal")]
    pub y: f64,
    #[serde(with = "crate::decimal")]
    pub dy: f64,
    #[serde(with = "crate::decimal")]
    pub dx: f64,
    #[serde(with = "crate::decimal")]
    pub dw: f64,
}

/// Quantization error norms `‖q(T) − T‖_F` of one catalog option.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OptionErrors {
    #[serde(with = "crate::decimal")]
    pub x: f64,
    #[serde(with = "crate::decimal")]
    pub w: f64,
    #[serde(with = "crate::decimal")]
    pub g: f64,
}

impl OptionErrors {
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            x: self.x * s,
            w: self.w * s,
            g: self.g * s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: LayerId,
    pub norms: LayerNorms,
    /// Tokens (rows of X).
    pub m: usize,
    /// Input features.
    pub k: usize,
    /// Output features.
    pub n: usize,
    /// Indexed by catalog option id.
    pub errors: Vec<OptionErrors>,
    /// `‖(1−β₁)/(√v+ε) − (1−β₂)·m·g/(√v(√v+ε)²)‖_F` at the moments the next
    /// update would produce.
    #[serde(with = "crate::decimal")]
    pub opt_sens_norm: f64,
}

/// Per-layer weight-gradient response to noise injected at the last block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationProfile {
    pub pass: Pass,
    #[serde(with = "crate::decimal")]
    pub epsilon: f64,
    pub n_samples: usize,
    pub batch_digest: String,
    /// `‖∇_W L(injected) − ∇_W L(baseline)‖_F`, averaged over samples,
    /// indexed by [`LayerId::index`].
    #[serde(with = "crate::decimal::vec")]
    pub grad_diff_norm: Vec<f64>,
}

impl PerturbationProfile {
    /// `grad_diff_norm / ε`.
    pub fn sens(&self, layer: usize) -> f64 {
        self.grad_diff_norm[layer] / self.epsilon
    }

    pub fn sens_all(&self) -> Vec<f64> {
        (0..self.grad_diff_norm.len()).map(|l| self.sens(l)).collect()
    }
}

/// Output of the baseline pass.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub loss: f64,
    pub batch_digest: String,
    pub layers: Vec<LayerStats>,
    pub grads: GradSet,
    /// `‖h‖_F` of the last block output.
    pub last_block_output_norm: f64,
}

/// Everything planning needs, detached from the live model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsBundle {
    pub schema: String,
    pub step: u64,
    pub batch_digest: String,
    pub config: ModelConfig,
    pub adamw: AdamWHyper,
    /// Index of the optimizer update the statistics describe (≥ 1).
    pub t: u64,
    pub tokens: usize,
    #[serde(with = "crate::decimal")]
    pub baseline_loss: f64,
    pub catalog: Catalog,
    pub layers: Vec<LayerStats>,
    pub profiles: Vec<PerturbationProfile>,
}

impl StatsBundle {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let b: StatsBundle = serde_json::from_str(s)?;
        b.validate()?;
        Ok(b)
    }

    pub fn profile(&self, pass: Pass) -> Option<&PerturbationProfile> {
        self.profiles.iter().find(|p| p.pass == pass)
    }

    /// Structural completeness and snapshot consistency.
    pub fn validate(&self) -> Result<()> {
        if self.schema != BUNDLE_SCHEMA {
            return Err(invalid(format!("unsupported stats schema {:?}", self.schema)));
        }
        self.config.validate()?;
        self.catalog.validate()?;
        let n = self.config.n_linear_layers();
        if self.layers.len() != n {
            return Err(SnipError::State(format!("bundle has {} layer entries, expected {n}", self.layers.len())));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.layer.index() != i {
                return Err(SnipError::State(format!("layer entry {i} is {}", l.layer)));
            }
            if l.errors.len() != self.catalog.len() {
                return Err(SnipError::State(format!("layer {} lacks error norms for some options", l.layer)));
            }
            let norms = [l.norms.x, l.norms.w, l.norms.y, l.norms.dy, l.norms.dx, l.norms.dw, l.opt_sens_norm];
            let errs = l.errors.iter().flat_map(|e| [e.x, e.w, e.g]);
            if norms.into_iter().chain(errs).any(|v| !(v >= 0.0) || !v.is_finite()) {
                return Err(SnipError::State(format!("layer {} has an invalid norm", l.layer)));
            }
        }
        for p in &self.profiles {
            if p.batch_digest != self.batch_digest {
                return Err(SnipError::State(format!("{:?} profile comes from a different batch", p.pass)));
            }
            if p.grad_diff_norm.len() != n || !(p.epsilon > 0.0) {
                return Err(SnipError::State(format!("{:?} profile is incomplete", p.pass)));
            }
        }
        if self.t == 0 {
            return Err(invalid("bundle step counter t must be at least 1"));
        }
        Ok(())
    }
}

fn quant_err(t: &Tensor, spec: Option<&crate::quant::QuantSpec>, rng: &RngStream) -> Result<f64> {
    match spec {
        None => Ok(0.0),
        Some(s) => Ok(fake_quantize(t, s, rng)?.abs_err_norm),
    }
}

/// Step 1: one high-precision forward and backward with no update. Records
/// norms, per-option quantization errors and the optimizer sensitivity.
pub fn collect_baseline(model: &Model, opt: &AdamW, batch: &Batch, catalog: &Catalog, rng: &RngStream) -> Result<Baseline> {
    let cfg = model.config();
    if opt.m.len() != model.params().len() {
        return Err(invalid("optimizer state does not match the model"));
    }
    let hp = PrecisionPolicy::high_precision(cfg.n_blocks);
    let (loss, cache) = model.forward(batch, &hp, None, rng)?;
    let grads = model.backward(&cache, &hp, None, rng)?;
    let layout = model.layout();
    let tokens = batch.n_tokens();
    let err_rng = rng.derive(purpose::PLAN);
    let mut layers = Vec::with_capacity(cfg.n_linear_layers());
    for id in model.layer_ids() {
        let (n, k) = layer_dims(id, cfg);
        let pidx = layout.linear(id);
        let w = model.weight(id);
        let lg = &grads.linear[id.index()];
        let dw = &grads.params[pidx];
        let x = cache.x(id);
        let errors = catalog
            .options()
            .iter()
            .map(|o| {
                let r = err_rng.derive_path(&[id.index() as u64, o.id as u64]);
                Ok(OptionErrors {
                    x: quant_err(x, o.precision.x.as_ref(), &r.derive(purpose::QUANT_X))?,
                    w: quant_err(w, o.precision.w.as_ref(), &r.derive(purpose::QUANT_W))?,
                    g: quant_err(&lg.dy, o.precision.g.as_ref(), &r.derive(purpose::QUANT_G))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let opt_sens_norm = opt.update_sensitivity(pidx, dw)?.norm();
        layers.push(LayerStats {
            layer: id,
            norms: LayerNorms {
                x: x.norm(),
                w: w.norm(),
                y: cache.y_norm(id),
                dy: lg.dy.norm(),
                dx: lg.dx.norm(),
                dw: dw.norm(),
            },
            m: tokens,
            k,
            n,
            errors,
            opt_sens_norm,
        });
    }
    Ok(Baseline {
        loss,
        batch_digest: batch.digest(),
        layers,
        last_block_output_norm: cache.last_block_output().norm(),
        grads,
    })
}

/// Default injection size for `pass`: `DEFAULT_EPS_REL·‖target‖_F`.
pub fn default_epsilon(baseline: &Baseline, pass: Pass, eps_rel: f64) -> f64 {
    let target = match pass {
        Pass::Forward => baseline.last_block_output_norm,
        Pass::Backward => baseline.grads.last_block_grad_norm,
    };
    eps_rel * target
}

/// Steps 2 and 3: forward and backward with noise at the last block, no
/// update; per-layer weight-gradient differences against the baseline.
/// Each of the `n_samples` passes draws fresh noise.
pub fn run_injection(
    model: &Model,
    batch: &Batch,
    pass: Pass,
    epsilon: f64,
    baseline: &Baseline,
    rng: &RngStream,
    n_samples: usize,
) -> Result<PerturbationProfile> {
    if n_samples == 0 {
        return Err(invalid("n_samples must be at least 1"));
    }
    if batch.digest() != baseline.batch_digest {
        return Err(invalid("injection batch differs from the baseline batch"));
    }
    let site = InjectionSite::new(pass, epsilon)?;
    let cfg = model.config();
    let hp = PrecisionPolicy::high_precision(cfg.n_blocks);
    let layout = model.layout();
    let ids = model.layer_ids();
    let mut acc = vec![0.0; ids.len()];
    for sample in 0..n_samples {
        let r = rng.derive_path(&[purpose::INJECT, sample as u64]);
        let (_, cache) = model.forward(batch, &hp, Some(&site), &r)?;
        let g = model.backward(&cache, &hp, Some(&site), &r)?;
        for id in &ids {
            let p = layout.linear(*id);
            acc[id.index()] += g.params[p].sub(&baseline.grads.params[p])?.norm();
        }
    }
    Ok(PerturbationProfile {
        pass,
        epsilon,
        n_samples,
        batch_digest: baseline.batch_digest.clone(),
        grad_diff_norm: acc.into_iter().map(|a| a / n_samples as f64).collect(),
    })
}

/// Steps 1–3 on one batch, packaged as a bundle. The model and optimizer are
/// only read.
pub fn snapshot(
    model: &Model,
    opt: &AdamW,
    batch: &Batch,
    catalog: &Catalog,
    step: u64,
    eps_rel: f64,
    rng: &RngStream,
) -> Result<StatsBundle> {
    let base = collect_baseline(model, opt, batch, catalog, rng)?;
    let mut profiles = Vec::with_capacity(2);
    for pass in [Pass::Backward, Pass::Forward] {
        let eps = default_epsilon(&base, pass, eps_rel);
        profiles.push(run_injection(model, batch, pass, eps, &base, rng, 1)?);
    }
    Ok(StatsBundle {
        schema: BUNDLE_SCHEMA.into(),
        step,
        batch_digest: base.batch_digest.clone(),
        config: model.config().clone(),
        adamw: opt.hyper,
        t: opt.t + 1,
        tokens: batch.n_tokens(),
        baseline_loss: base.loss,
        catalog: catalog.clone(),
        layers: base.layers,
        profiles,
    })
}

/// Monte-Carlo estimate of `‖J_g(x)‖_F²` as `ε⁻²·mean ‖g(x+δ) − g(x)‖²` with
/// `δ ~ N(0, ε²I)`.
pub fn estimate_jacobian_sq_norm<F>(g: F, x: &Tensor, epsilon: f64, n_samples: usize, rng: &RngStream) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if n_samples == 0 {
        return Err(invalid("n_samples must be at least 1"));
    }
    let gx = g(x)?;
    let mut acc = 0.0;
    for s in 0..n_samples {
        let delta = sample_gaussian(x.shape(), epsilon, &rng.derive(s as u64))?;
        let gy = g(&x.add(&delta)?)?;
        acc += gy.sub(&gx)?.sum_squares();
    }
    Ok(acc / (n_samples as f64 * epsilon * epsilon))
}

/// Counts trials where `‖g(x+δ) − g(x)‖ ≤ c·jac_norm·ε/√d` for
/// `δ ~ N(0, ε²/d·I)` and `d = x.len()`.
pub fn perturbation_bound_hits<F>(
    g: F,
    x: &Tensor,
    jac_norm: f64,
    epsilon: f64,
    c: f64,
    trials: usize,
    rng: &RngStream,
) -> Result<usize>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let d = x.len() as f64;
    let gx = g(x)?;
    let bound = c * jac_norm * epsilon / d.sqrt();
    let mut hits = 0;
    for s in 0..trials {
        let delta = sample_gaussian(x.shape(), epsilon / d.sqrt(), &rng.derive(s as u64))?;
        if g(&x.add(&delta)?)?.sub(&gx)?.norm() <= bound {
            hits += 1;
        }
    }
    Ok(hits)
}

/// `max(‖x‖, 1e-30)`, the guard used for relative quantities.
pub fn guarded(norm: f64) -> f64 {
    norm.max(TINY)
}
