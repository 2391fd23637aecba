//! Latent relation encoder over clip sets.
//!
//! A permutation-invariant encoder maps a set of (features, motion) pairs
//! to a diagonal Gaussian over a per-speaker style code. During episodic
//! training the divergence between the code inferred from the query set and
//! the one inferred from the support set regularizes few-shot adaptation:
//! what the model learns from one clip should agree with what a larger
//! sample of the same speaker implies.

use std::cmp::Ordering;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{FeatureClip, ModelConfig, MotionClip};
use crate::params::{ParameterSet, VarSet};
use crate::seed::{hash_name, normal_vec, rng_for};
use rand::Rng;

/// Log-variance outputs are clamped to this symmetric range.
const LOG_VAR_LIMIT: f64 = 10.0;

/// Which clip set the style code is drawn from during training episodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZSource {
    Query,
    Support,
}

impl ZSource {
    pub fn parse(text: &str) -> Result<ZSource> {
        match text {
            "query" => Ok(ZSource::Query),
            "support" => Ok(ZSource::Support),
            other => Err(Error::Config(format!(
                "z_source must be 'query' or 'support', got {other:?}"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ZSource::Query => "query",
            ZSource::Support => "support",
        }
    }
}

// ── Distribution type ──

/// Diagonal Gaussian over the latent style code.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDistribution {
    pub mean: Tensor,
    pub log_var: Tensor,
}

impl LatentDistribution {
    pub fn new(mean: Tensor, log_var: Tensor) -> Result<LatentDistribution> {
        if mean.shape() != log_var.shape() || mean.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "latent_distribution",
                lhs: mean.shape().to_vec(),
                rhs: log_var.shape().to_vec(),
            });
        }
        if !mean.all_finite() || !log_var.all_finite() {
            return Err(Error::NonFinite {
                op: "latent_distribution",
            });
        }
        Ok(LatentDistribution { mean, log_var })
    }

    /// Standard normal of the given dimension.
    pub fn unit(dim: usize) -> LatentDistribution {
        LatentDistribution {
            mean: Tensor::zeros(&[dim]),
            log_var: Tensor::zeros(&[dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.numel()
    }

    /// Reparameterized draw: mean + exp(log_var/2) * eps.
    pub fn sample(&self, seed: u64) -> Tensor {
        let mut rng = rng_for(seed, &[hash_name("latent.sample")]);
        let eps = normal_vec(&mut rng, self.dim());
        let data: Vec<f64> = self
            .mean
            .data()
            .iter()
            .zip(self.log_var.data())
            .zip(&eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        Tensor::new(vec![self.dim()], data).expect("sample shape")
    }
}

/// Closed-form KL(q || p) for diagonal Gaussians; exactly zero when q == p.
pub fn kl_gaussian(q: &LatentDistribution, p: &LatentDistribution) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::ShapeMismatch {
            op: "kl_gaussian",
            lhs: q.mean.shape().to_vec(),
            rhs: p.mean.shape().to_vec(),
        });
    }
    let mut acc = 0.0;
    for i in 0..q.dim() {
        let (mq, lq) = (q.mean.data()[i], q.log_var.data()[i]);
        let (mp, lp) = (p.mean.data()[i], p.log_var.data()[i]);
        acc += 0.5 * ((lq - lp).exp() + (mq - mp) * (mq - mp) * (-lp).exp() - 1.0 + (lp - lq));
    }
    Ok(acc)
}

// ── Encoder parameters ──

/// Starting log-variance: a small posterior spread, so early training codes
/// are dominated by the encoder mean rather than by reparameterization
/// noise. The clamp range still allows the spread to widen if useful.
const LOG_VAR_INIT: f64 = -4.0;

/// Per-coordinate statistics pooled from one clip pair (means, second
/// moments, lag-1 autocovariances over frames).
fn pooled_dim(cfg: &ModelConfig) -> usize {
    3 * (cfg.feature_dim + cfg.motion_dim())
}

/// Encoder weights under the `enc.` prefix, sized for the model config.
/// Weights are variance-preserving uniform; the log-variance head starts
/// biased at a small spread.
pub fn init_encoder(cfg: &ModelConfig, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    let specs = [
        ("enc.embed.w", vec![pooled_dim(cfg), cfg.hidden_dim]),
        ("enc.embed.b", vec![1, cfg.hidden_dim]),
        ("enc.mu.w", vec![cfg.hidden_dim, cfg.latent_dim]),
        ("enc.mu.b", vec![1, cfg.latent_dim]),
        ("enc.logvar.w", vec![cfg.hidden_dim, cfg.latent_dim]),
        ("enc.logvar.b", vec![1, cfg.latent_dim]),
    ];
    let mut params = ParameterSet::new(cfg.hash());
    for (name, shape) in specs {
        let tensor = if name == "enc.logvar.b" {
            Tensor::from_fn(&shape, |_| LOG_VAR_INIT)
        } else if name.ends_with(".b") {
            Tensor::zeros(&shape)
        } else {
            let bound = (3.0 / shape[0] as f64).sqrt();
            let mut rng = rng_for(seed, &[hash_name(name)]);
            Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound))
        };
        params.insert(name, tensor)?;
    }
    Ok(params)
}

// ── Set encoding ──

/// Per-coordinate temporal statistics of a clip pair: `[1, 3(d_a + 3L)]`.
fn pool_pair(cfg: &ModelConfig, features: &FeatureClip, motion: &MotionClip) -> Result<Tensor> {
    if features.feature_dim() != cfg.feature_dim || motion.vertex_count() != cfg.vertex_count {
        return Err(Error::ShapeMismatch {
            op: "encode_set",
            lhs: features.frames.shape().to_vec(),
            rhs: motion.frames.shape().to_vec(),
        });
    }
    if features.frame_count() != motion.frame_count() {
        return Err(Error::ShapeMismatch {
            op: "encode_set",
            lhs: vec![features.frame_count()],
            rhs: vec![motion.frame_count()],
        });
    }
    let frames = features.frame_count();
    let width = cfg.feature_dim + cfg.motion_dim();
    // Layout: [mean | second moment | lag-1 autocovariance], each a
    // feature-then-motion block. The lag-1 terms expose per-coordinate
    // temporal correlation that plain means average away.
    let mut pooled = vec![0.0f64; 3 * width];
    let coord = |t: usize, d: usize| -> f64 {
        if d < cfg.feature_dim {
            features.frames.data()[t * cfg.feature_dim + d]
        } else {
            motion.frames.data()[t * cfg.motion_dim() + (d - cfg.feature_dim)]
        }
    };
    for d in 0..width {
        let (mut sum, mut sum_sq, mut sum_lag) = (0.0, 0.0, 0.0);
        for t in 0..frames {
            let x = coord(t, d);
            sum += x;
            sum_sq += x * x;
            if t + 1 < frames {
                sum_lag += x * coord(t + 1, d);
            }
        }
        pooled[d] = sum / frames as f64;
        pooled[width + d] = sum_sq / frames as f64;
        pooled[2 * width + d] = sum_lag / (frames - 1) as f64;
    }
    Tensor::new(vec![1, pooled.len()], pooled)
}

/// Encodes a clip set to a latent Gaussian on the tape.
///
/// Pooled rows are sorted by their bit patterns before aggregation, so the
/// result is bitwise invariant to the order of `pairs`. Log-variances are
/// clamped to [-10, 10]. Returns `[1, latent]` mean and log-variance vars.
pub fn encode_set_on_tape<'t>(
    cfg: &ModelConfig,
    tape: &'t Tape,
    vars: &VarSet<'t>,
    pairs: &[(&FeatureClip, &MotionClip)],
) -> Result<(Var<'t>, Var<'t>)> {
    if pairs.is_empty() {
        return Err(Error::Sizing("encode_set needs at least one clip pair".into()));
    }
    let mut pooled: Vec<Tensor> = pairs
        .iter()
        .map(|(f, m)| pool_pair(cfg, f, m))
        .collect::<Result<_>>()?;
    pooled.sort_by(|x, y| {
        for (a, b) in x.data().iter().zip(y.data()) {
            match a.to_bits().cmp(&b.to_bits()) {
                Ordering::Equal => continue,
                other => return other,
            }
        }
        Ordering::Equal
    });

    let w = vars.get("enc.embed.w")?;
    let b = vars.get("enc.embed.b")?;
    let mut acc: Option<Var> = None;
    for row in pooled {
        let emb = tape.constant(row)?.matmul(w)?.add(b)?.tanh()?;
        acc = Some(match acc {
            None => emb,
            Some(sum) => sum.add(emb)?,
        });
    }
    let mean_emb = acc.expect("non-empty").scale(1.0 / pairs.len() as f64)?;

    let mu = mean_emb
        .matmul(vars.get("enc.mu.w")?)?
        .add(vars.get("enc.mu.b")?)?;
    let raw = mean_emb
        .matmul(vars.get("enc.logvar.w")?)?
        .add(vars.get("enc.logvar.b")?)?;
    // clamp(x) = limit - relu(2*limit - relu(x + limit)), exact at the rails.
    let shifted = raw.add(tape.constant(Tensor::scalar(LOG_VAR_LIMIT))?)?.relu()?;
    let folded = tape
        .constant(Tensor::scalar(2.0 * LOG_VAR_LIMIT))?
        .sub(shifted)?
        .relu()?;
    let log_var = tape.constant(Tensor::scalar(LOG_VAR_LIMIT))?.sub(folded)?;
    Ok((mu, log_var))
}

/// Plain-tensor encoding: runs a private tape and snapshots the Gaussian.
pub fn encode_set(
    cfg: &ModelConfig,
    params: &ParameterSet,
    pairs: &[(&FeatureClip, &MotionClip)],
) -> Result<LatentDistribution> {
    let tape = Tape::new();
    let vars = VarSet::lift(&tape, params, |_| false)?;
    let (mu, log_var) = encode_set_on_tape(cfg, &tape, &vars, pairs)?;
    LatentDistribution::new(
        mu.value().reshape(&[cfg.latent_dim])?,
        log_var.value().reshape(&[cfg.latent_dim])?,
    )
}

// ── Tape-side sampling and divergence ──

/// Reparameterized draw on the tape; `eps` enters as a constant, so
/// gradients flow to mean and log-variance only.
pub fn sample_latent_on_tape<'t>(
    tape: &'t Tape,
    mean: Var<'t>,
    log_var: Var<'t>,
    eps: &Tensor,
) -> Result<Var<'t>> {
    let eps = tape.constant(eps.clone())?;
    mean.add(log_var.scale(0.5)?.exp()?.mul(eps)?)
}

/// KL(q || p) between diagonal Gaussians as a scalar var. Exactly zero when
/// both arguments are the same vars.
pub fn kl_on_tape<'t>(
    q_mean: Var<'t>,
    q_log_var: Var<'t>,
    p_mean: Var<'t>,
    p_log_var: Var<'t>,
) -> Result<Var<'t>> {
    let ratio = q_log_var.sub(p_log_var)?.exp()?;
    let gap = q_mean
        .sub(p_mean)?
        .square()?
        .mul(p_log_var.scale(-1.0)?.exp()?)?;
    let logs = p_log_var.sub(q_log_var)?;
    let dim = q_mean.shape().iter().product::<usize>() as f64;
    let dim_const = q_mean.tape_ref().constant(Tensor::scalar(dim))?;
    ratio
        .add(gap)?
        .add(logs)?
        .sum()?
        .sub(dim_const)?
        .scale(0.5)
}
