use serde::{Deserialize, Serialize};

use super::{Batch, LayerId, LayerKind, Model, PrecisionPolicy, IGNORE_TARGET};
use crate::error::{invalid, shape_err, Result, SnipError};
use crate::quant::{fake_quantize, QuantSpec};
use crate::rng::{purpose, RngStream};
use crate::tensor::{sample_gaussian, Tensor};

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pass {
    Forward,
    Backward,
}

impl Pass {
    fn label(self) -> u64 {
        match self {
            Pass::Forward => 1,
            Pass::Backward => 2,
        }
    }
}

/// Gaussian noise `N(0, ε²/d)` added to the output activation (forward) or
/// output gradient (backward) of the last transformer block, where `d` is the
/// element count of that tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectionSite {
    pub pass: Pass,
    pub epsilon: f64,
}

impl InjectionSite {
    pub fn new(pass: Pass, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(invalid(format!("injection epsilon must be positive, got {epsilon}")));
        }
        Ok(Self { pass, epsilon })
    }

    fn noise(&self, target: &Tensor, rng: &RngStream) -> Result<Tensor> {
        let norm = target.norm();
        if !(self.epsilon > 0.0) || self.epsilon > 1e-2 * norm {
            return Err(invalid(format!(
                "injection epsilon {} outside (0, 1e-2·‖target‖ = {}]",
                self.epsilon,
                1e-2 * norm
            )));
        }
        let sigma = self.epsilon / (target.len() as f64).sqrt();
        sample_gaussian(target.shape(), sigma, &rng.derive_path(&[purpose::INJECT, self.pass.label()]))
    }
}

#[derive(Debug, Clone)]
struct LinearCache {
    x: Tensor,
    xq: Tensor,
    wq: Tensor,
    x_spec: Option<QuantSpec>,
    w_spec: Option<QuantSpec>,
    y_norm: f64,
}

#[derive(Debug, Clone)]
struct BlockCache {
    h_in: Tensor,
    attn_rms: Vec<f64>,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Vec<f64>,
    h_mid: Tensor,
    ffn_rms: Vec<f64>,
    gate: Tensor,
    up: Tensor,
}

/// Everything backward needs, tied to the model version it came from.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    batch: Batch,
    blocks: Vec<BlockCache>,
    linears: Vec<LinearCache>,
    h_out: Tensor,
    final_rms: Vec<f64>,
    z: Tensor,
    probs: Tensor,
    n_valid: usize,
    pub loss: f64,
}

impl ForwardCache {
    pub fn batch(&self) -> &Batch {
        &self.batch
    }

    /// `‖X‖_F` of the high-precision input to each linear layer.
    pub fn x_norm(&self, id: LayerId) -> f64 {
        self.linears[id.index()].x.norm()
    }

    pub fn x(&self, id: LayerId) -> &Tensor {
        &self.linears[id.index()].x
    }

    pub fn y_norm(&self, id: LayerId) -> f64 {
        self.linears[id.index()].y_norm
    }

    /// Output activation of the last block (the forward injection target).
    pub fn last_block_output(&self) -> &Tensor {
        &self.h_out
    }
}

/// Gradients of one linear layer's input and output.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub dx: Tensor,
    pub dy: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradSet {
    /// One gradient per model parameter, in parameter order.
    pub params: Vec<Tensor>,
    /// Indexed by [`LayerId::index`].
    pub linear: Vec<LinearGrads>,
    /// `‖∇L‖_F` at the last block output before any injected noise.
    pub last_block_grad_norm: f64,
}

fn quantize(t: &Tensor, spec: Option<&QuantSpec>, rng: &RngStream) -> Result<Tensor> {
    match spec {
        None => Ok(t.clone()),
        Some(s) => Ok(fake_quantize(t, s, rng)?.tensor),
    }
}

fn quant_stream(rng: &RngStream, id: LayerId, which: u64) -> RngStream {
    rng.derive_path(&[id.index() as u64, which])
}

/// Row-wise RMSNorm with gain; returns the output and per-row RMS.
fn rmsnorm(x: &Tensor, gain: &Tensor) -> (Tensor, Vec<f64>) {
    let (rows, d) = x.matrix_dims();
    let g = gain.data();
    let mut out = vec![0.0; rows * d];
    let mut rms = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let s = (ms + RMS_EPS).sqrt();
        for c in 0..d {
            out[r * d + c] = g[c] * row[c] / s;
        }
        rms.push(s);
    }
    (Tensor::from_parts(vec![rows, d], out), rms)
}

/// Returns `(dx, dgain)`.
fn rmsnorm_backward(x: &Tensor, gain: &Tensor, rms: &[f64], dy: &Tensor) -> (Tensor, Tensor) {
    let (rows, d) = x.matrix_dims();
    let g = gain.data();
    let mut dx = vec![0.0; rows * d];
    let mut dg = vec![0.0; d];
    for r in 0..rows {
        let xr = x.row(r);
        let dyr = dy.row(r);
        let s = rms[r];
        let mut dot = 0.0;
        for c in 0..d {
            dg[c] += dyr[c] * xr[c] / s;
            dot += g[c] * dyr[c] * xr[c];
        }
        let k = dot / (d as f64 * s * s * s);
        for c in 0..d {
            dx[r * d + c] = g[c] * dyr[c] / s - xr[c] * k;
        }
    }
    (Tensor::from_parts(vec![rows, d], dx), Tensor::from_parts(vec![d], dg))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Model {
    fn linear_forward(
        &self,
        id: LayerId,
        x: &Tensor,
        policy: &PrecisionPolicy,
        rng: &RngStream,
        caches: &mut Vec<LinearCache>,
    ) -> Result<Tensor> {
        let p = policy.get(id);
        let xq = quantize(x, p.x.as_ref(), &quant_stream(rng, id, purpose::QUANT_X))?;
        let wq = quantize(self.weight(id), p.w.as_ref(), &quant_stream(rng, id, purpose::QUANT_W))?;
        let y = xq.matmul_nt(&wq)?;
        debug_assert_eq!(caches.len(), id.index());
        caches.push(LinearCache {
            x: x.clone(),
            xq,
            wq,
            x_spec: p.x,
            w_spec: p.w,
            y_norm: y.norm(),
        });
        Ok(y)
    }

    /// Computes the mean next-token cross-entropy. `injection` applies only
    /// when its pass is [`Pass::Forward`].
    pub fn forward(
        &self,
        batch: &Batch,
        policy: &PrecisionPolicy,
        injection: Option<&InjectionSite>,
        rng: &RngStream,
    ) -> Result<(f64, ForwardCache)> {
        let cfg = &self.config;
        if policy.n_blocks() != cfg.n_blocks {
            return Err(invalid(format!(
                "policy covers {} blocks, model has {}",
                policy.n_blocks(),
                cfg.n_blocks
            )));
        }
        if batch.seq_len > cfg.seq_len {
            return Err(invalid(format!(
                "batch sequence length {} exceeds model context {}",
                batch.seq_len, cfg.seq_len
            )));
        }
        if let Some(t) = batch.tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
            return Err(invalid(format!("token {t} out of range for vocabulary {}", cfg.vocab)));
        }
        if let Some(t) = batch
            .targets
            .iter()
            .find(|&&t| t != IGNORE_TARGET && t as usize >= cfg.vocab)
        {
            return Err(invalid(format!("target {t} out of range for vocabulary {}", cfg.vocab)));
        }
        let layout = self.layout();
        let d = cfg.d_model;
        let (bs, s) = (batch.batch_size, batch.seq_len);
        let n = bs * s;
        let tok_emb = &self.params[super::ParamLayout::TOK_EMB];
        let pos_emb = &self.params[super::ParamLayout::POS_EMB];
        let mut h = vec![0.0; n * d];
        for (i, &t) in batch.tokens.iter().enumerate() {
            let te = tok_emb.row(t as usize);
            let pe = pos_emb.row(i % s);
            for c in 0..d {
                h[i * d + c] = te[c] + pe[c];
            }
        }
        let mut h = Tensor::from_parts(vec![n, d], h);

        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        let mut linears = Vec::with_capacity(cfg.n_linear_layers());
        let (nh, dh) = (cfg.n_heads, cfg.head_dim());
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for b in 0..cfg.n_blocks {
            let id = |k| LayerId::new(b, k);
            let (a, attn_rms) = rmsnorm(&h, &self.params[layout.attn_norm(b)]);
            let q = self.linear_forward(id(LayerKind::Q), &a, policy, rng, &mut linears)?;
            let k = self.linear_forward(id(LayerKind::K), &a, policy, rng, &mut linears)?;
            let v = self.linear_forward(id(LayerKind::V), &a, policy, rng, &mut linears)?;

            let mut probs = vec![0.0; bs * nh * s * s];
            let mut att = vec![0.0; n * d];
            let (qd, kd, vd) = (q.data(), k.data(), v.data());
            for sq in 0..bs {
                for hd in 0..nh {
                    let base = (sq * nh + hd) * s * s;
                    let off = hd * dh;
                    for i in 0..s {
                        let qi = &qd[(sq * s + i) * d + off..][..dh];
                        let row = &mut probs[base + i * s..base + (i + 1) * s];
                        let mut mx = f64::NEG_INFINITY;
                        for j in 0..=i {
                            let kj = &kd[(sq * s + j) * d + off..][..dh];
                            let sc = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt;
                            row[j] = sc;
                            mx = mx.max(sc);
                        }
                        let mut z = 0.0;
                        for p in row.iter_mut().take(i + 1) {
                            *p = (*p - mx).exp();
                            z += *p;
                        }
                        for p in row.iter_mut().take(i + 1) {
                            *p /= z;
                        }
                        let out = &mut att[(sq * s + i) * d + off..][..dh];
                        for j in 0..=i {
                            let vj = &vd[(sq * s + j) * d + off..][..dh];
                            let pj = row[j];
                            for (o, vv) in out.iter_mut().zip(vj) {
                                *o += pj * vv;
                            }
                        }
                    }
                }
            }
            let att = Tensor::from_parts(vec![n, d], att);
            let o = self.linear_forward(id(LayerKind::O), &att, policy, rng, &mut linears)?;
            let h_mid = h.add(&o)?;

            let (f, ffn_rms) = rmsnorm(&h_mid, &self.params[layout.ffn_norm(b)]);
            let gate = self.linear_forward(id(LayerKind::Gate), &f, policy, rng, &mut linears)?;
            let up = self.linear_forward(id(LayerKind::Up), &f, policy, rng, &mut linears)?;
            let act: Vec<f64> = gate
                .data()
                .iter()
                .zip(up.data())
                .map(|(&g, &u)| g * sigmoid(g) * u)
                .collect();
            let act = Tensor::from_parts(gate.shape().to_vec(), act);
            let down = self.linear_forward(id(LayerKind::Down), &act, policy, rng, &mut linears)?;
            let mut h_out = h_mid.add(&down)?;
            if b + 1 == cfg.n_blocks {
                if let Some(inj) = injection.filter(|i| i.pass == Pass::Forward) {
                    let noise = inj.noise(&h_out, rng)?;
                    h_out.add_assign(&noise)?;
                }
            }
            blocks.push(BlockCache {
                h_in: h,
                attn_rms,
                q,
                k,
                v,
                probs,
                h_mid,
                ffn_rms,
                gate,
                up,
            });
            h = h_out;
        }

        let (z, final_rms) = rmsnorm(&h, &self.params[layout.final_norm()]);
        let logits = z.matmul_nt(&self.params[layout.lm_head()])?;
        let v = cfg.vocab;
        let mut probs = logits.into_data();
        let mut loss = 0.0;
        let mut n_valid = 0usize;
        for (r, &t) in batch.targets.iter().enumerate() {
            let row = &mut probs[r * v..(r + 1) * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut zsum = 0.0;
            for p in row.iter_mut() {
                *p = (*p - mx).exp();
                zsum += *p;
            }
            for p in row.iter_mut() {
                *p /= zsum;
            }
            if t != IGNORE_TARGET {
                loss -= row[t as usize].max(f64::MIN_POSITIVE).ln();
                n_valid += 1;
            }
        }
        let loss = if n_valid == 0 { 0.0 } else { loss / n_valid as f64 };
        let cache = ForwardCache {
            version: self.version,
            batch: batch.clone(),
            blocks,
            linears,
            h_out: h,
            final_rms,
            z,
            probs: Tensor::from_parts(vec![n, v], probs),
            n_valid,
            loss,
        };
        Ok((loss, cache))
    }

    /// Reverse-mode gradients for `cache`. The backward GEMMs quantize their
    /// inputs per `policy`; when a layer's forward spec matches, the forward
    /// quantized tensor is reused.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        policy: &PrecisionPolicy,
        injection: Option<&InjectionSite>,
        rng: &RngStream,
    ) -> Result<GradSet> {
        if cache.version != self.version {
            return Err(SnipError::State(format!(
                "forward cache from model version {} used with version {}",
                cache.version, self.version
            )));
        }
        if policy.n_blocks() != self.config.n_blocks {
            return Err(invalid("policy block count differs from model"));
        }
        let cfg = &self.config;
        let layout = self.layout();
        let d = cfg.d_model;
        let (bs, s) = (cache.batch.batch_size, cache.batch.seq_len);
        let n = bs * s;
        let v = cfg.vocab;
        let mut grads: Vec<Tensor> = self.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let mut linear: Vec<Option<LinearGrads>> = vec![None; cfg.n_linear_layers()];

        let mut dlogits = cache.probs.data().to_vec();
        for (r, &t) in cache.batch.targets.iter().enumerate() {
            let row = &mut dlogits[r * v..(r + 1) * v];
            if t == IGNORE_TARGET {
                row.iter_mut().for_each(|x| *x = 0.0);
            } else {
                row[t as usize] -= 1.0;
                let inv = 1.0 / cache.n_valid as f64;
                row.iter_mut().for_each(|x| *x *= inv);
            }
        }
        let dlogits = Tensor::from_parts(vec![n, v], dlogits);
        let head = &self.params[layout.lm_head()];
        grads[layout.lm_head()] = dlogits.matmul_tn(&cache.z)?;
        let dz = dlogits.matmul(head)?;
        let (mut dh, dg) = rmsnorm_backward(&cache.h_out, &self.params[layout.final_norm()], &cache.final_rms, &dz);
        grads[layout.final_norm()] = dg;
        let last_block_grad_norm = dh.norm();
        if let Some(inj) = injection.filter(|i| i.pass == Pass::Backward) {
            let noise = inj.noise(&dh, rng)?;
            dh.add_assign(&noise)?;
        }

        let (nh, dh_sz) = (cfg.n_heads, cfg.head_dim());
        let inv_sqrt = 1.0 / (dh_sz as f64).sqrt();
        for b in (0..cfg.n_blocks).rev() {
            let bc = &cache.blocks[b];
            let id = |k| LayerId::new(b, k);

            // Feed-forward half.
            let dact = self.linear_backward(id(LayerKind::Down), &dh, cache, policy, rng, &mut grads, &mut linear)?;
            let mut dgate = vec![0.0; dact.len()];
            let mut dup = vec![0.0; dact.len()];
            for (i, ((&da, &g), &u)) in dact.data().iter().zip(bc.gate.data()).zip(bc.up.data()).enumerate() {
                let sg = sigmoid(g);
                dup[i] = da * g * sg;
                dgate[i] = da * u * sg * (1.0 + g * (1.0 - sg));
            }
            let dgate = Tensor::from_parts(bc.gate.shape().to_vec(), dgate);
            let dup = Tensor::from_parts(bc.up.shape().to_vec(), dup);
            let mut df = self.linear_backward(id(LayerKind::Gate), &dgate, cache, policy, rng, &mut grads, &mut linear)?;
            df.add_assign(&self.linear_backward(id(LayerKind::Up), &dup, cache, policy, rng, &mut grads, &mut linear)?)?;
            let (dmid, dg) = rmsnorm_backward(&bc.h_mid, &self.params[layout.ffn_norm(b)], &bc.ffn_rms, &df);
            grads[layout.ffn_norm(b)] = dg;
            let dh_mid = dh.add(&dmid)?;

            // Attention half.
            let datt = self.linear_backward(id(LayerKind::O), &dh_mid, cache, policy, rng, &mut grads, &mut linear)?;
            let (qd, kd, vd) = (bc.q.data(), bc.k.data(), bc.v.data());
            let ad = datt.data();
            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            let mut dp = vec![0.0; s];
            for sq in 0..bs {
                for hd in 0..nh {
                    let base = (sq * nh + hd) * s * s;
                    let off = hd * dh_sz;
                    for i in 0..s {
                        let p = &bc.probs[base + i * s..base + (i + 1) * s];
                        let dout = &ad[(sq * s + i) * d + off..][..dh_sz];
                        let mut dot = 0.0;
                        for j in 0..=i {
                            let vj = &vd[(sq * s + j) * d + off..][..dh_sz];
                            dp[j] = dout.iter().zip(vj).map(|(a, b)| a * b).sum();
                            dot += p[j] * dp[j];
                            let dvj = &mut dv[(sq * s + j) * d + off..][..dh_sz];
                            for (x, o) in dvj.iter_mut().zip(dout) {
                                *x += p[j] * o;
                            }
                        }
                        for j in 0..=i {
                            let ds = p[j] * (dp[j] - dot) * inv_sqrt;
                            let qi_row = (sq * s + i) * d + off;
                            let kj_row = (sq * s + j) * d + off;
                            for c in 0..dh_sz {
                                dq[qi_row + c] += ds * kd[kj_row + c];
                                dk[kj_row + c] += ds * qd[qi_row + c];
                            }
                        }
                    }
                }
            }
            let dq = Tensor::from_parts(vec![n, d], dq);
            let dk = Tensor::from_parts(vec![n, d], dk);
            let dv = Tensor::from_parts(vec![n, d], dv);
            let mut da = self.linear_backward(id(LayerKind::Q), &dq, cache, policy, rng, &mut grads, &mut linear)?;
            da.add_assign(&self.linear_backward(id(LayerKind::K), &dk, cache, policy, rng, &mut grads, &mut linear)?)?;
            da.add_assign(&self.linear_backward(id(LayerKind::V), &dv, cache, policy, rng, &mut grads, &mut linear)?)?;
            let (din, dg) = rmsnorm_backward(&bc.h_in, &self.params[layout.attn_norm(b)], &bc.attn_rms, &da);
            grads[layout.attn_norm(b)] = dg;
            dh = dh_mid.add(&din)?;
        }

        let dhd = dh.data();
        for (i, &t) in cache.batch.tokens.iter().enumerate() {
            let row = &dhd[i * d..(i + 1) * d];
            let tok = &mut grads[super::ParamLayout::TOK_EMB].data_mut()[t as usize * d..][..d];
            for (g, x) in tok.iter_mut().zip(row) {
                *g += x;
            }
            let pos = &mut grads[super::ParamLayout::POS_EMB].data_mut()[(i % s) * d..][..d];
            for (g, x) in pos.iter_mut().zip(row) {
                *g += x;
            }
        }

        let linear = linear
            .into_iter()
            .map(|l| l.ok_or_else(|| shape_err("linear layer skipped in backward")))
            .collect::<Result<Vec<_>>>()?;
        self.count_pass();
        Ok(GradSet {
            params: grads,
            linear,
            last_block_grad_norm,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn linear_backward(
        &self,
        id: LayerId,
        dy: &Tensor,
        cache: &ForwardCache,
        policy: &PrecisionPolicy,
        rng: &RngStream,
        grads: &mut [Tensor],
        linear: &mut [Option<LinearGrads>],
    ) -> Result<Tensor> {
        let lc = &cache.linears[id.index()];
        let p = policy.get(id);
        let xq = if p.x == lc.x_spec {
            lc.xq.clone()
        } else {
            quantize(&lc.x, p.x.as_ref(), &quant_stream(rng, id, purpose::QUANT_X))?
        };
        let wq = if p.w == lc.w_spec {
            lc.wq.clone()
        } else {
            quantize(self.weight(id), p.w.as_ref(), &quant_stream(rng, id, purpose::QUANT_W))?
        };
        let gq = quantize(dy, p.g.as_ref(), &quant_stream(rng, id, purpose::QUANT_G))?;
        let dx = gq.matmul(&wq)?;
        grads[self.layout().linear(id)] = gq.matmul_tn(&xq)?;
        linear[id.index()] = Some(LinearGrads {
            dx: dx.clone(),
            dy: dy.clone(),
        });
        Ok(dx)
    }

    /// Loss only.
    pub fn loss(&self, batch: &Batch, policy: &PrecisionPolicy, rng: &RngStream) -> Result<f64> {
        Ok(self.forward(batch, policy, None, rng)?.0)
    }

    /// Forward and backward under one policy.
    pub fn loss_and_grads(&self, batch: &Batch, policy: &PrecisionPolicy, rng: &RngStream) -> Result<(f64, GradSet)> {
        let (loss, cache) = self.forward(batch, policy, None, rng)?;
        let grads = self.backward(&cache, policy, None, rng)?;
        Ok((loss, grads))
    }
}
