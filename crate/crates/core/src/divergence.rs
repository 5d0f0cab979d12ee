//! Per-layer, per-option quality loss (loss and weight divergence) and
//! efficiency gain, computed from a statistics bundle alone.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SnipError};
use crate::model::{layer_flops, total_linear_flops, AdamWHyper, LayerId, LayerKind, LayerPrecision, Pass};
use crate::quant::QuantSpec;
use crate::stats::{guarded, LayerStats, OptionErrors, PerturbationProfile, StatsBundle};

pub const REPORT_SCHEMA: &str = "snip.report.v1";

/// One precision setting a layer may take.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantOption {
    pub id: usize,
    pub precision: LayerPrecision,
    /// Share of the layer's FLOPs executed with both GEMM inputs in FP4.
    pub fp4_fraction: f64,
}

/// The option list. Option 0 is all-FP8 and some option is all-FP4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<QuantOption>", into = "Vec<QuantOption>")]
pub struct Catalog {
    options: Vec<QuantOption>,
}

impl TryFrom<Vec<QuantOption>> for Catalog {
    type Error = SnipError;
    fn try_from(v: Vec<QuantOption>) -> Result<Self> {
        let c = Catalog::new(v.iter().map(|o| o.precision).collect())?;
        if c.options != v {
            return Err(invalid("catalog ids or FP4 fractions are inconsistent"));
        }
        Ok(c)
    }
}

impl From<Catalog> for Vec<QuantOption> {
    fn from(c: Catalog) -> Self {
        c.options
    }
}

fn is_fp8(s: Option<QuantSpec>) -> bool {
    matches!(s, Some(s) if !s.is_fp4())
}

impl Catalog {
    pub fn new(precisions: Vec<LayerPrecision>) -> Result<Self> {
        let options = precisions
            .into_iter()
            .enumerate()
            .map(|(id, precision)| QuantOption {
                id,
                precision,
                fp4_fraction: precision.fp4_gemm_fraction(),
            })
            .collect();
        let c = Self { options };
        c.validate()?;
        Ok(c)
    }

    /// The eight FP8/FP4 combinations of activations, weights and gradients,
    /// all-FP8 first and all-FP4 last, with block edge `nb`.
    pub fn standard(nb: usize) -> Self {
        let fp8 = LayerPrecision::fp8().with_block(nb);
        let fp4 = LayerPrecision::fp4().with_block(nb);
        let precisions = (0..8)
            .map(|bits| LayerPrecision {
                x: if bits & 4 != 0 { fp4.x } else { fp8.x },
                w: if bits & 2 != 0 { fp4.w } else { fp8.w },
                g: if bits & 1 != 0 { fp4.g } else { fp8.g },
            })
            .collect();
        Self::new(precisions).expect("standard catalog is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.options.first().ok_or_else(|| invalid("empty option catalog"))?;
        let p = first.precision;
        if !(is_fp8(p.x) && is_fp8(p.w) && is_fp8(p.g)) {
            return Err(invalid("catalog option 0 must be all-FP8"));
        }
        if self.all_fp4().is_none() {
            return Err(invalid("catalog must contain an all-FP4 option"));
        }
        Ok(())
    }

    pub fn options(&self) -> &[QuantOption] {
        &self.options
    }

    pub fn len(&self) -> usize {
        self.options.len()
    }

    pub fn is_empty(&self) -> bool {
        self.options.is_empty()
    }

    pub fn get(&self, id: usize) -> &QuantOption {
        &self.options[id]
    }

    pub fn all_fp4(&self) -> Option<usize> {
        self.options.iter().position(|o| o.fp4_fraction == 1.0)
    }

    /// Option id whose precision equals `p`.
    pub fn find(&self, p: &LayerPrecision) -> Option<usize> {
        self.options.iter().position(|o| o.precision == *p)
    }
}

/// Loss divergence of `errors` relative to `|baseline_loss|`, omitting the
/// cross term.
pub fn loss_divergence(stats: &LayerStats, errors: &OptionErrors, baseline_loss: f64) -> Result<f64> {
    if baseline_loss == 0.0 || !baseline_loss.is_finite() {
        return Err(invalid(format!("baseline loss must be nonzero and finite, got {baseline_loss}")));
    }
    let (m, k, n) = (stats.m as f64, stats.k as f64, stats.n as f64);
    let tx = stats.norms.dx * errors.x / (m * k).sqrt();
    let tw = stats.norms.dw * errors.w / (n * k).sqrt();
    Ok((tx * tx + tw * tw).sqrt() / baseline_loss.abs())
}

/// `c_i = α·√(1−β₂ᵗ)/(1−β₁ᵗ)·opt_sens_norm/√(NK)`.
pub fn optimizer_sensitivity(stats: &LayerStats, hyper: &AdamWHyper, t: u64) -> Result<f64> {
    if t == 0 {
        return Err(invalid("optimizer step t must be at least 1"));
    }
    Ok(hyper.lr * hyper.bias_factor(t) * stats.opt_sens_norm / ((stats.n * stats.k) as f64).sqrt())
}

/// Per-element error magnitude of an option:
/// `‖δ_X‖/√(MK) + ‖δ_W‖/√(NK) + ‖δ_G‖/√(MN)`.
pub fn normalized_error(stats: &LayerStats, errors: &OptionErrors) -> f64 {
    let (m, k, n) = (stats.m as f64, stats.k as f64, stats.n as f64);
    errors.x / (m * k).sqrt() + errors.w / (n * k).sqrt() + errors.g / (m * n).sqrt()
}

/// Expected error of the layer's own weight gradient `∇_Y Lᵀ X` when `X` and
/// `∇_Y L` carry errors of the given norms:
/// `(‖∇_Y L‖·‖δ_X‖ + ‖X‖·‖δ_G‖)/√M`.
pub fn wgrad_error(stats: &LayerStats, errors: &OptionErrors) -> f64 {
    (stats.norms.dy * errors.x + stats.norms.x * errors.g) / (stats.m as f64).sqrt()
}

/// Expected error of the input gradient `∇_Y L·W` sent to earlier layers:
/// `‖∇_Y L‖·‖δ_W‖·√(M/NK) + ‖W‖·‖δ_G‖·√(K/MN)`.
pub fn dgrad_error(stats: &LayerStats, errors: &OptionErrors) -> f64 {
    let (m, k, n) = (stats.m as f64, stats.k as f64, stats.n as f64);
    stats.norms.dy * errors.w * (m / (n * k)).sqrt() + stats.norms.w * errors.g * (k / (m * n)).sqrt()
}

/// Whether the weight gradient of `l` depends on the input gradient of `i`:
/// `l` runs before `i` and is not a sibling reading the same input
/// (Q/K/V, Gate/Up).
pub fn is_upstream(l: LayerId, i: LayerId) -> bool {
    use LayerKind::*;
    if l.index() >= i.index() {
        return false;
    }
    let siblings = matches!((l.kind, i.kind), (Q | K | V, Q | K | V) | (Gate | Up, Gate | Up));
    !(l.block == i.block && siblings)
}

/// Weight divergence of quantizing layer `i` with `errors`, averaged over
/// all `N` layers: the layer's own gradient error through `c_i/‖W_i‖`, plus
/// its input-gradient error reaching each upstream layer `l` with the gain
/// `sens_l` measured by backward noise injection, through `c_l/‖W_l‖`.
pub fn weight_divergence(i: usize, errors: &OptionErrors, stats: &[LayerStats], sens: &[f64], c: &[f64]) -> Result<f64> {
    if sens.len() != stats.len() || c.len() != stats.len() || i >= stats.len() {
        return Err(invalid("profile or sensitivity list does not cover every layer"));
    }
    let st = &stats[i];
    let own = wgrad_error(st, errors) * c[i] / guarded(st.norms.w);
    let dx = dgrad_error(st, errors);
    let upstream: f64 = (0..i)
        .filter(|&l| is_upstream(stats[l].layer, st.layer))
        .map(|l| sens[l] * dx * c[l] / guarded(stats[l].norms.w))
        .sum();
    Ok((own + upstream) / stats.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceWeights {
    pub w_l: f64,
    pub w_w: f64,
    /// Average the forward-injection profile into the propagation gains.
    pub use_forward_profile: bool,
}

impl Default for DivergenceWeights {
    fn default() -> Self {
        Self {
            w_l: 1.0,
            w_w: 1.0,
            use_forward_profile: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub block: usize,
    pub kind: LayerKind,
    pub option: usize,
    pub label: String,
    #[serde(rename = "dL", with = "crate::decimal")]
    pub d_l: f64,
    #[serde(rename = "dW", with = "crate::decimal")]
    pub d_w: f64,
    #[serde(with = "crate::decimal")]
    pub q: f64,
    #[serde(with = "crate::decimal")]
    pub e: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub schema: String,
    pub batch_digest: String,
    pub step: u64,
    pub n_layers: usize,
    pub n_options: usize,
    pub weights: DivergenceWeights,
    pub total_flops: u64,
    /// Optimizer sensitivity `c_i` per layer.
    #[serde(with = "crate::decimal::vec")]
    pub c: Vec<f64>,
    /// Layer-major: row `i·n_options + j`.
    pub rows: Vec<ReportRow>,
}

impl DivergenceReport {
    pub fn row(&self, layer: usize, option: usize) -> &ReportRow {
        &self.rows[layer * self.n_options + option]
    }

    pub fn q_matrix(&self) -> Vec<Vec<f64>> {
        self.rows.chunks(self.n_options).map(|r| r.iter().map(|x| x.q).collect()).collect()
    }

    pub fn e_matrix(&self) -> Vec<Vec<f64>> {
        self.rows.chunks(self.n_options).map(|r| r.iter().map(|x| x.e).collect()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: DivergenceReport = serde_json::from_str(s)?;
        if r.schema != REPORT_SCHEMA {
            return Err(invalid(format!("unsupported report schema {:?}", r.schema)));
        }
        if r.rows.len() != r.n_layers * r.n_options {
            return Err(SnipError::State("report row count does not match its dimensions".into()));
        }
        Ok(r)
    }

    /// Heatmap CSV: one row per layer, one `q` column per option.
    pub fn heatmap_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["block".to_string(), "kind".to_string()];
        header.extend(self.rows[..self.n_options].iter().map(|r| r.label.clone()));
        w.write_record(&header)?;
        for chunk in self.rows.chunks(self.n_options) {
            let mut rec = vec![chunk[0].block.to_string(), chunk[0].kind.to_string()];
            rec.extend(chunk.iter().map(|r| format!("{:?}", r.q)));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| SnipError::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| SnipError::Format(e.to_string()))
    }
}

fn profile<'a>(profiles: &'a [PerturbationProfile], pass: Pass, digest: &str) -> Result<&'a PerturbationProfile> {
    let p = profiles
        .iter()
        .find(|p| p.pass == pass)
        .ok_or_else(|| invalid(format!("missing {pass:?} injection profile")))?;
    if p.batch_digest != digest {
        return Err(SnipError::State(format!(
            "{pass:?} profile digest {} differs from statistics digest {digest}",
            p.batch_digest
        )));
    }
    Ok(p)
}

/// Per-layer sensitivities used for propagation gains.
pub fn propagation_sens(bundle: &StatsBundle, use_forward_profile: bool) -> Result<Vec<f64>> {
    let bwd = profile(&bundle.profiles, Pass::Backward, &bundle.batch_digest)?;
    let fwd = profile(&bundle.profiles, Pass::Forward, &bundle.batch_digest)?;
    let b = bwd.sens_all();
    if !use_forward_profile {
        return Ok(b);
    }
    // The forward profile is rescaled to the backward one at the last layer
    // before averaging, keeping the backward gains' units.
    let f = fwd.sens_all();
    let (bl, fl) = (guarded(*b.last().unwrap_or(&1.0)), guarded(*f.last().unwrap_or(&1.0)));
    Ok(b.iter().zip(&f).map(|(x, y)| 0.5 * (x + y * bl / fl)).collect())
}

/// Fills `q = w_L·max(0, dL_j − dL_0) + w_W·max(0, dW_j − dW_0)` (option 0
/// is the FP8 baseline) and `e = fp4_fraction_j·flops_i/total` for every
/// `(layer, option)`.
pub fn build_report(bundle: &StatsBundle, weights: DivergenceWeights) -> Result<DivergenceReport> {
    bundle.validate()?;
    let sens = propagation_sens(bundle, weights.use_forward_profile)?;
    let cfg = &bundle.config;
    let total = total_linear_flops(cfg, bundle.tokens);
    let c = bundle
        .layers
        .iter()
        .map(|l| optimizer_sensitivity(l, &bundle.adamw, bundle.t))
        .collect::<Result<Vec<_>>>()?;
    let n_options = bundle.catalog.len();
    let mut rows = Vec::with_capacity(bundle.layers.len() * n_options);
    for (i, st) in bundle.layers.iter().enumerate() {
        let id: LayerId = st.layer;
        let share = layer_flops(id, cfg, bundle.tokens) as f64 / total as f64;
        let mut dl = Vec::with_capacity(n_options);
        let mut dw = Vec::with_capacity(n_options);
        for o in bundle.catalog.options() {
            let errs = &st.errors[o.id];
            dl.push(loss_divergence(st, errs, bundle.baseline_loss)?);
            dw.push(weight_divergence(i, errs, &bundle.layers, &sens, &c)?);
        }
        for o in bundle.catalog.options() {
            let q = weights.w_l * (dl[o.id] - dl[0]).max(0.0) + weights.w_w * (dw[o.id] - dw[0]).max(0.0);
            rows.push(ReportRow {
                block: id.block,
                kind: id.kind,
                option: o.id,
                label: o.precision.label(),
                d_l: dl[o.id],
                d_w: dw[o.id],
                q,
                e: o.fp4_fraction * share,
            });
        }
    }
    Ok(DivergenceReport {
        schema: REPORT_SCHEMA.into(),
        batch_digest: bundle.batch_digest.clone(),
        step: bundle.step,
        n_layers: bundle.layers.len(),
        n_options,
        weights,
        total_flops: total,
        c,
        rows,
    })
}
