//! Estimated versus measured per-layer divergence.

use serde::{Deserialize, Serialize};

use crate::divergence::{loss_divergence, optimizer_sensitivity, propagation_sens, weight_divergence, Catalog};
use crate::error::{invalid, Result, SnipError};
use crate::metrics::{pearson, spearman};
use crate::model::{AdamW, Batch, LayerKind, Model, PrecisionPolicy};
use crate::rng::{purpose, RngStream};
use crate::stats::{guarded, snapshot, StatsBundle};
use crate::tensor::Tensor;

pub const EVAL_SCHEMA: &str = "snip.eval.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub block: usize,
    pub kind: LayerKind,
    #[serde(rename = "dL_est")]
    pub dl_est: f64,
    #[serde(rename = "dL_true")]
    pub dl_true: f64,
    #[serde(rename = "dW_est")]
    pub dw_est: f64,
    #[serde(rename = "dW_true")]
    pub dw_true: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub option: usize,
    pub label: String,
    pub rows: Vec<EstimateRow>,
    pub spearman_dl: Option<f64>,
    pub pearson_dl: Option<f64>,
    pub spearman_dw: Option<f64>,
    pub pearson_dw: Option<f64>,
}

impl EvalReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| SnipError::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| SnipError::Format(e.to_string()))
    }
}

/// Linear-layer weights after one AdamW step with `grads`.
fn stepped_weights(model: &Model, opt: &AdamW, grads: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut params = model.params().to_vec();
    let mut o = opt.clone();
    o.step(&mut params, grads)?;
    let layout = model.layout();
    Ok(model.layer_ids().iter().map(|id| params[layout.linear(*id)].clone()).collect())
}

/// For each layer alone set to catalog option `option` (everything else at
/// high precision): the estimated loss and weight divergence from the
/// statistics passes, and the measured ones. Measured loss divergence is
/// `|L' − L|/|L|` from a quantized forward pass; measured weight divergence
/// is `Σ_l ‖W'_l − W_l‖/‖W_l‖ / N` over all `N` linear layers after one AdamW
/// step whose backward pass quantizes that layer.
pub fn evaluate_estimates(
    model: &Model,
    opt: &AdamW,
    batch: &Batch,
    catalog: &Catalog,
    option: usize,
    eps_rel: f64,
    rng: &RngStream,
) -> Result<(EvalReport, StatsBundle)> {
    if option >= catalog.len() {
        return Err(invalid(format!("option {option} not in catalog of {}", catalog.len())));
    }
    let bundle = snapshot(model, opt, batch, catalog, opt.t, eps_rel, rng)?;
    let sens = propagation_sens(&bundle, false)?;
    let c = bundle
        .layers
        .iter()
        .map(|l| optimizer_sensitivity(l, &bundle.adamw, bundle.t))
        .collect::<Result<Vec<_>>>()?;

    let n_blocks = model.config().n_blocks;
    let hp = PrecisionPolicy::high_precision(n_blocks);
    let eval_rng = rng.derive(purpose::EVAL);
    let (l0, cache) = model.forward(batch, &hp, None, &eval_rng)?;
    let g0 = model.backward(&cache, &hp, None, &eval_rng)?;
    let w_ref = stepped_weights(model, opt, &g0.params)?;
    let w_norms: Vec<f64> = model.layer_ids().iter().map(|id| guarded(model.weight(*id).norm())).collect();
    let n = w_ref.len() as f64;
    let precision = catalog.get(option).precision;

    let mut rows = Vec::with_capacity(bundle.layers.len());
    for (i, st) in bundle.layers.iter().enumerate() {
        let errs = &st.errors[option];
        let dl_est = loss_divergence(st, errs, bundle.baseline_loss)?;
        let dw_est = weight_divergence(i, errs, &bundle.layers, &sens, &c)?;

        let mut pol = hp.clone();
        pol.set(st.layer, precision);
        let lq = model.loss(batch, &pol, &eval_rng)?;
        let dl_true = (lq - l0).abs() / l0.abs();

        let gq = model.backward(&cache, &pol, None, &eval_rng)?;
        let w_q = stepped_weights(model, opt, &gq.params)?;
        let dw_true = w_q
            .iter()
            .zip(&w_ref)
            .zip(&w_norms)
            .map(|((a, b), wn)| Ok(a.sub(b)?.norm() / wn))
            .sum::<Result<f64>>()?
            / n;
        rows.push(EstimateRow {
            block: st.layer.block,
            kind: st.layer.kind,
            dl_est,
            dl_true,
            dw_est,
            dw_true,
        });
    }
    let col = |f: fn(&EstimateRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let (de, dt, we, wt) = (col(|r| r.dl_est), col(|r| r.dl_true), col(|r| r.dw_est), col(|r| r.dw_true));
    let report = EvalReport {
        schema: EVAL_SCHEMA.into(),
        option,
        label: precision.label(),
        spearman_dl: spearman(&de, &dt),
        pearson_dl: pearson(&de, &dt),
        spearman_dw: spearman(&we, &wt),
        pearson_dw: pearson(&we, &wt),
        rows,
    };
    Ok((report, bundle))
}
