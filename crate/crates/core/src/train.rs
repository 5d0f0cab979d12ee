//! The outer training loop: fake-quantized training with periodic planning
//! (statistics passes, divergence analysis, ILP) and policy swaps at step
//! boundaries, plus the run artifacts it writes.

use std::fs;
use std::path::{Path, PathBuf};
use std::thread::JoinHandle;
use std::time::Duration;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::divergence::{build_report, Catalog, DivergenceReport, DivergenceWeights};
use crate::error::{invalid, Result, SnipError};
use crate::metrics::tail_mean;
use crate::model::{layer_flops, total_linear_flops, AdamW, AdamWHyper, LayerId, LayerPrecision, MarkovSource, Model, ModelConfig, PrecisionPolicy};
use crate::policy::{contiguous_groups, solve_grouped, IlpInstance, IlpSolution};
use crate::rng::{purpose, RngStream};
use crate::stats::{snapshot, StatsBundle, DEFAULT_EPS_REL};

pub const RUN_CONFIG_SCHEMA: &str = "snip.run.v1";
pub const TRAIN_LOG_SCHEMA: &str = "snip.trainlog.v1";
pub const SUMMARY_SCHEMA: &str = "snip.summary.v1";

/// How the active precision policy is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyMode {
    /// Planned from statistics every refresh interval.
    Snip,
    /// Layers in random order switched to all-FP4 until the target is met,
    /// redrawn every refresh interval.
    Random,
    Fp8,
    Fp4,
    High,
}

fn default_schema() -> String {
    RUN_CONFIG_SCHEMA.into()
}
fn default_block() -> usize {
    32
}
fn one() -> f64 {
    1.0
}
fn default_refresh() -> u64 {
    100
}
fn default_eps_rel() -> f64 {
    DEFAULT_EPS_REL
}
fn default_groups() -> usize {
    1
}
fn default_batch() -> usize {
    8
}
fn default_time_limit() -> f64 {
    30.0
}
fn default_window() -> usize {
    50
}
fn default_mode() -> PolicyMode {
    PolicyMode::Snip
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_schema")]
    pub schema: String,
    pub model: ModelConfig,
    #[serde(default)]
    pub adamw: AdamWHyper,
    /// Edge of the tiles and blocks sharing one scale.
    #[serde(default = "default_block")]
    pub quant_block: usize,
    /// Defaults to the eight FP8/FP4 combinations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalog: Option<Catalog>,
    pub e_t: f64,
    #[serde(default = "one")]
    pub w_l: f64,
    #[serde(default = "one")]
    pub w_w: f64,
    #[serde(default)]
    pub use_forward_profile: bool,
    #[serde(default = "default_refresh")]
    pub refresh_interval: u64,
    /// Injection size relative to the target tensor norm.
    #[serde(default = "default_eps_rel")]
    pub eps_rel: f64,
    #[serde(default = "default_groups")]
    pub groups: usize,
    pub seed: u64,
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_mode")]
    pub policy: PolicyMode,
    #[serde(default = "default_time_limit")]
    pub time_limit_secs: f64,
    /// Window of the trailing mean reported as the smoothed loss.
    #[serde(default = "default_window")]
    pub smooth_window: usize,
    /// Run directory; relative paths resolve against the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Desk-scale defaults around [`ModelConfig::toy`].
    pub fn toy(e_t: f64, steps: u64, seed: u64) -> Self {
        Self {
            schema: default_schema(),
            model: ModelConfig::toy(),
            adamw: AdamWHyper::default(),
            quant_block: default_block(),
            catalog: None,
            e_t,
            w_l: 1.0,
            w_w: 1.0,
            use_forward_profile: false,
            refresh_interval: default_refresh(),
            eps_rel: DEFAULT_EPS_REL,
            groups: 1,
            seed,
            steps,
            batch_size: default_batch(),
            policy: PolicyMode::Snip,
            time_limit_secs: default_time_limit(),
            smooth_window: default_window(),
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != RUN_CONFIG_SCHEMA {
            return Err(invalid(format!("unsupported run config schema {:?}", self.schema)));
        }
        self.model.validate()?;
        self.adamw.validate()?;
        self.catalog().validate()?;
        if !(0.0..=1.0).contains(&self.e_t) {
            return Err(invalid(format!("E_t must lie in [0, 1], got {}", self.e_t)));
        }
        if self.refresh_interval == 0 {
            return Err(invalid("refresh_interval must be at least 1"));
        }
        if self.quant_block == 0 || self.batch_size == 0 || self.smooth_window == 0 {
            return Err(invalid("quant_block, batch_size and smooth_window must be at least 1"));
        }
        if !(self.eps_rel > 0.0 && self.eps_rel <= 1e-2) {
            return Err(invalid(format!("eps_rel must lie in (0, 1e-2], got {}", self.eps_rel)));
        }
        if self.groups == 0 || self.groups > self.model.n_linear_layers() {
            return Err(invalid(format!("groups must lie in [1, {}]", self.model.n_linear_layers())));
        }
        if !(self.w_l >= 0.0 && self.w_w >= 0.0) {
            return Err(invalid("Q weights must be nonnegative"));
        }
        if !(self.time_limit_secs > 0.0) {
            return Err(invalid("time limit must be positive"));
        }
        Ok(())
    }

    pub fn catalog(&self) -> Catalog {
        self.catalog.clone().unwrap_or_else(|| Catalog::standard(self.quant_block))
    }

    pub fn weights(&self) -> DivergenceWeights {
        DivergenceWeights {
            w_l: self.w_l,
            w_w: self.w_w,
            use_forward_profile: self.use_forward_profile,
        }
    }

    pub fn time_limit(&self) -> Duration {
        Duration::from_secs_f64(self.time_limit_secs)
    }

    /// Model configuration with the run seed applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..self.model.clone()
        }
    }

    pub fn tokens(&self) -> usize {
        self.batch_size * self.model.seq_len
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Training batch of `step`; depends only on the seed and the step.
pub fn batch_for_step(cfg: &RunConfig, step: u64) -> Result<crate::model::Batch> {
    let src = MarkovSource::new(cfg.model.vocab, cfg.seed);
    src.batch(
        cfg.batch_size,
        cfg.model.seq_len,
        &RngStream::new(cfg.seed).derive_path(&[purpose::DATA, step]),
    )
}

/// Held-out batch used by the offline commands.
pub fn eval_batch(cfg: &RunConfig) -> Result<crate::model::Batch> {
    let src = MarkovSource::new(cfg.model.vocab, cfg.seed);
    src.batch(cfg.batch_size, cfg.model.seq_len, &RngStream::new(cfg.seed).derive(purpose::EVAL))
}

/// `Σ FP4-GEMM FLOPs / Σ linear FLOPs` of `policy`, in integer FLOPs.
pub fn fp4_fraction(policy: &PrecisionPolicy, config: &ModelConfig, tokens: usize) -> f64 {
    let num: u64 = LayerId::all(config.n_blocks)
        .into_iter()
        .map(|id| {
            let p = policy.get(id);
            let gemms = (p.fp4_gemm_fraction() * 3.0).round() as u64;
            gemms * (layer_flops(id, config, tokens) / 3)
        })
        .sum();
    num as f64 / total_linear_flops(config, tokens) as f64
}

/// The ILP instance of a report with `K` contiguous layer groups.
pub fn instance_from_report(report: &DivergenceReport, e_t: f64, groups: usize) -> Result<IlpInstance> {
    let inst = IlpInstance::new(report.q_matrix(), report.e_matrix(), e_t)?;
    if groups > 1 {
        inst.with_groups(contiguous_groups(report.n_layers, groups)?)
    } else {
        Ok(inst)
    }
}

/// Policy choosing `choice[i]` from the catalog for layer `i`.
pub fn policy_from_choice(catalog: &Catalog, choice: &[usize], n_blocks: usize, label: impl Into<String>) -> Result<PrecisionPolicy> {
    if choice.len() != 7 * n_blocks {
        return Err(invalid("choice length differs from layer count"));
    }
    PrecisionPolicy::from_layers(choice.iter().map(|&j| catalog.get(j).precision).collect(), label)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub report: DivergenceReport,
    pub solution: IlpSolution,
    pub policy: PrecisionPolicy,
}

/// Steps 4–5 from a bundle alone.
pub fn plan(
    bundle: &StatsBundle,
    e_t: f64,
    groups: usize,
    weights: DivergenceWeights,
    time_limit: Duration,
) -> Result<Plan> {
    let report = build_report(bundle, weights)?;
    let inst = instance_from_report(&report, e_t, groups)?;
    let solution = solve_grouped(&inst, time_limit)?;
    if !solution.optimal {
        log::warn!("ILP time limit reached; using the best assignment found");
    }
    let policy = policy_from_choice(&bundle.catalog, &solution.choice, bundle.config.n_blocks, format!("snip@{}", bundle.step))?;
    Ok(Plan { report, solution, policy })
}

/// Random baseline: layers in shuffled order switch to all-FP4 until the
/// FP4 fraction reaches `e_t`.
pub fn random_policy(cfg: &RunConfig, step: u64) -> Result<PrecisionPolicy> {
    let catalog = cfg.catalog();
    let fp4 = catalog.all_fp4().ok_or_else(|| invalid("catalog lacks an all-FP4 option"))?;
    let mc = cfg.model_config();
    let total = total_linear_flops(&mc, cfg.tokens()) as f64;
    let mut ids = LayerId::all(mc.n_blocks);
    let mut g = RngStream::new(cfg.seed).derive_path(&[purpose::RANDOM_POLICY, step]).generator();
    ids.shuffle(&mut g);
    let mut choice = vec![0usize; ids.len()];
    let mut e = 0.0;
    for id in ids {
        if e >= cfg.e_t - crate::policy::FEASIBILITY_TOL {
            break;
        }
        choice[id.index()] = fp4;
        e += layer_flops(id, &mc, cfg.tokens()) as f64 / total;
    }
    policy_from_choice(&catalog, &choice, mc.n_blocks, format!("random@{step}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub policy: String,
    pub fp4_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleLog {
    /// Step whose batch the statistics came from.
    pub step: u64,
    /// First step trained with the new policy.
    pub applied_from: u64,
    pub batch_digest: Option<String>,
    /// Forward+backward passes spent on statistics.
    pub extra_passes: u64,
    pub policy: String,
    pub total_q: Option<f64>,
    pub total_e: f64,
    pub optimal: Option<bool>,
    pub report: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub schema: String,
    pub e_t: f64,
    pub mode: PolicyMode,
    pub steps: Vec<StepLog>,
    pub cycles: Vec<CycleLog>,
    pub total_passes: u64,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

pub struct TrainOutcome {
    pub log: TrainLog,
    pub model: Model,
    pub opt: AdamW,
    pub final_policy: PrecisionPolicy,
    /// Every planned solution in cycle order (SNIP mode only).
    pub plans: Vec<Plan>,
}

impl TrainOutcome {
    pub fn smoothed_loss(&self, window: usize) -> f64 {
        tail_mean(&self.log.losses(), window).unwrap_or(f64::NAN)
    }
}

struct Pending {
    step: u64,
    extra_passes: u64,
    digest: Option<String>,
    job: PendingJob,
}

enum PendingJob {
    Planner(JoinHandle<Result<Plan>>),
    Ready(PrecisionPolicy),
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn static_policy(cfg: &RunConfig) -> PrecisionPolicy {
    let n = cfg.model.n_blocks;
    let nb = cfg.quant_block;
    match cfg.policy {
        PolicyMode::Fp4 => PrecisionPolicy::uniform(n, LayerPrecision::fp4().with_block(nb), "fp4"),
        PolicyMode::High => PrecisionPolicy::high_precision(n),
        _ => PrecisionPolicy::uniform(n, LayerPrecision::fp8().with_block(nb), "fp8"),
    }
}

/// Runs `cfg.steps` training steps. With `out_dir`, writes the loss CSV,
/// train log, per-cycle bundles/reports/policies and a final checkpoint.
///
/// Planning for a cycle starting at step `s` runs on a worker thread while
/// step `s` trains with the previous policy; the result is installed at the
/// `s → s+1` boundary, waiting for the worker if needed.
pub fn train(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mc = cfg.model_config();
    let mut model = Model::new(mc.clone())?;
    let mut opt = AdamW::for_params(cfg.adamw, model.params())?;
    let catalog = cfg.catalog();
    let tokens = cfg.tokens();
    let root = RngStream::new(cfg.seed);
    let mut policy = static_policy(cfg);
    let planned = matches!(cfg.policy, PolicyMode::Snip | PolicyMode::Random);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), cfg.to_json()?)?;
    }

    let mut log = TrainLog {
        schema: TRAIN_LOG_SCHEMA.into(),
        e_t: cfg.e_t,
        mode: cfg.policy,
        steps: Vec::with_capacity(cfg.steps as usize),
        cycles: Vec::new(),
        total_passes: 0,
    };
    let mut plans = Vec::new();
    let mut loss_csv = String::from("step,loss,policy,fp4_fraction\n");

    for step in 0..cfg.steps {
        let batch = batch_for_step(cfg, step)?;
        let mut pending = None;
        if planned && step % cfg.refresh_interval == 0 {
            pending = Some(match cfg.policy {
                PolicyMode::Snip => {
                    let before = model.passes();
                    let bundle = snapshot(&model, &opt, &batch, &catalog, step, cfg.eps_rel, &root.derive_path(&[purpose::PLAN, step]))?;
                    let extra = model.passes() - before;
                    if let Some(dir) = out_dir {
                        fs::create_dir_all(dir.join("bundles"))?;
                        fs::write(dir.join("bundles").join(format!("step_{step:06}.json")), bundle.to_json()?)?;
                    }
                    let digest = Some(bundle.batch_digest.clone());
                    let (e_t, groups, weights, limit) = (cfg.e_t, cfg.groups, cfg.weights(), cfg.time_limit());
                    let handle = std::thread::spawn(move || plan(&bundle, e_t, groups, weights, limit));
                    Pending {
                        step,
                        extra_passes: extra,
                        digest,
                        job: PendingJob::Planner(handle),
                    }
                }
                _ => Pending {
                    step,
                    extra_passes: 0,
                    digest: None,
                    job: PendingJob::Ready(random_policy(cfg, step)?),
                },
            });
        }

        let step_rng = root.derive_path(&[purpose::STEP, step]);
        let (loss, cache) = model.forward(&batch, &policy, None, &step_rng)?;
        let grads = model.backward(&cache, &policy, None, &step_rng)?;
        model.apply_adamw(&mut opt, &grads.params)?;
        let frac = fp4_fraction(&policy, &mc, tokens);
        loss_csv.push_str(&format!("{step},{loss:?},{},{frac:?}\n", policy.label));
        log.steps.push(StepLog {
            step,
            loss,
            policy: policy.label.clone(),
            fp4_fraction: frac,
        });

        if let Some(p) = pending {
            let (new_policy, cycle) = match p.job {
                PendingJob::Planner(h) => {
                    let planned = h.join().map_err(|_| SnipError::State("planner thread panicked".into()))??;
                    let report_path = format!("reports/step_{:06}.json", p.step);
                    if let Some(dir) = out_dir {
                        write_json(&dir.join(&report_path), &planned.report)?;
                    }
                    let cycle = CycleLog {
                        step: p.step,
                        applied_from: step + 1,
                        batch_digest: p.digest,
                        extra_passes: p.extra_passes,
                        policy: planned.policy.label.clone(),
                        total_q: Some(planned.solution.total_q),
                        total_e: planned.solution.total_e,
                        optimal: Some(planned.solution.optimal),
                        report: out_dir.map(|_| report_path),
                    };
                    let pol = planned.policy.clone();
                    plans.push(planned);
                    (pol, cycle)
                }
                PendingJob::Ready(pol) => {
                    let cycle = CycleLog {
                        step: p.step,
                        applied_from: step + 1,
                        batch_digest: None,
                        extra_passes: 0,
                        policy: pol.label.clone(),
                        total_q: None,
                        total_e: fp4_fraction(&pol, &mc, tokens),
                        optimal: None,
                        report: None,
                    };
                    (pol, cycle)
                }
            };
            if let Some(dir) = out_dir {
                fs::create_dir_all(dir.join("policies"))?;
                fs::write(dir.join("policies").join(format!("step_{:06}.json", p.step)), new_policy.to_json()?)?;
            }
            log.cycles.push(cycle);
            policy = new_policy;
        }
    }
    log.total_passes = model.passes();

    if let Some(dir) = out_dir {
        fs::write(dir.join("loss.csv"), &loss_csv)?;
        write_json(&dir.join("train_log.json"), &log)?;
        fs::create_dir_all(dir.join("policies"))?;
        fs::write(dir.join("policies").join("final.json"), policy.to_json()?)?;
        checkpoint::save(&dir.join("checkpoint"), &model, Some(&opt), cfg.adamw, cfg.steps)?;
    }
    Ok(TrainOutcome {
        log,
        model,
        opt,
        final_policy: policy,
        plans,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema: String,
    pub steps: usize,
    pub e_t: Option<f64>,
    pub mode: Option<PolicyMode>,
    pub final_loss: Option<f64>,
    pub smoothed_loss: Option<f64>,
    pub mean_fp4_fraction: Option<f64>,
    pub min_fp4_fraction_after_first_cycle: Option<f64>,
    pub planning_cycles: Option<usize>,
    pub missing: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct LossRow {
    step: u64,
    loss: f64,
    #[allow(dead_code)]
    policy: String,
    fp4_fraction: f64,
}

/// Writes `report/loss_curve.csv`, `report/policy_heatmap.csv` and
/// `report/summary.json` under `run_dir`. Missing inputs are listed in the
/// summary instead of failing the whole report.
pub fn write_run_report(run_dir: &Path) -> Result<RunSummary> {
    let out = run_dir.join("report");
    fs::create_dir_all(&out)?;
    let mut missing = Vec::new();
    let cfg = fs::read_to_string(run_dir.join("config.json"))
        .ok()
        .and_then(|s| RunConfig::from_json(&s).ok());
    if cfg.is_none() {
        missing.push("config.json".to_string());
    }
    let log: Option<TrainLog> = fs::read_to_string(run_dir.join("train_log.json"))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok());
    if log.is_none() {
        missing.push("train_log.json".to_string());
    }

    let mut rows: Vec<LossRow> = Vec::new();
    match csv::Reader::from_path(run_dir.join("loss.csv")) {
        Ok(mut r) => {
            for rec in r.deserialize() {
                rows.push(rec?);
            }
        }
        Err(_) => missing.push("loss.csv".to_string()),
    }
    let window = cfg.as_ref().map(|c| c.smooth_window).unwrap_or(default_window());
    let losses: Vec<f64> = rows.iter().map(|r| r.loss).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "loss", "smoothed_loss", "fp4_fraction"])?;
    for (i, r) in rows.iter().enumerate() {
        let sm = tail_mean(&losses[..=i], window).unwrap_or(r.loss);
        w.write_record([r.step.to_string(), format!("{:?}", r.loss), format!("{sm:?}"), format!("{:?}", r.fp4_fraction)])?;
    }
    fs::write(out.join("loss_curve.csv"), w.into_inner().map_err(|e| SnipError::Io(e.into_error()))?)?;

    let policy = cfg.as_ref().and_then(|c| {
        fs::read_to_string(run_dir.join("policies").join("final.json"))
            .ok()
            .and_then(|s| PrecisionPolicy::from_json(&s, c.model.n_blocks).ok())
    });
    match (&policy, &cfg) {
        (Some(p), Some(c)) => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["block", "kind", "x", "w", "g", "label", "fp4_fraction"])?;
            let tag = |s: Option<crate::quant::QuantSpec>| s.map(|s| s.format.name()).unwrap_or_else(|| "high".into());
            for id in LayerId::all(c.model.n_blocks) {
                let lp = p.get(id);
                w.write_record([
                    id.block.to_string(),
                    id.kind.to_string(),
                    tag(lp.x),
                    tag(lp.w),
                    tag(lp.g),
                    lp.label(),
                    format!("{:?}", lp.fp4_gemm_fraction()),
                ])?;
            }
            fs::write(out.join("policy_heatmap.csv"), w.into_inner().map_err(|e| SnipError::Io(e.into_error()))?)?;
        }
        _ => missing.push("policies/final.json".to_string()),
    }

    let first_applied = log.as_ref().and_then(|l| l.cycles.first().map(|c| c.applied_from));
    let after: Vec<f64> = match first_applied {
        Some(s) => rows.iter().filter(|r| r.step >= s).map(|r| r.fp4_fraction).collect(),
        None => Vec::new(),
    };
    let summary = RunSummary {
        schema: SUMMARY_SCHEMA.into(),
        steps: rows.len(),
        e_t: cfg.as_ref().map(|c| c.e_t),
        mode: cfg.as_ref().map(|c| c.policy),
        final_loss: losses.last().copied(),
        smoothed_loss: tail_mean(&losses, window),
        mean_fp4_fraction: tail_mean(&rows.iter().map(|r| r.fp4_fraction).collect::<Vec<_>>(), usize::MAX),
        min_fp4_fraction_after_first_cycle: after.iter().cloned().reduce(f64::min),
        planning_cycles: log.as_ref().map(|l| l.cycles.len()),
        missing,
    };
    for m in &summary.missing {
        log::warn!("partial report: missing {m}");
    }
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}
