//! The sequence-to-vertex regression network with low-rank adapters.
//!
//! Architecture, frame-parallel with a causal state mixer:
//! per-frame linear embed, then `num_layers` blocks of
//! (concat latent code, linear, tanh, causal exponential-moving-average mix
//! across frames), then a linear head to vertex offsets. Every linear map
//! carries a rank-`u` adapter pair (B, A); merged weights are `W + B·A`.
//! The adapters are the only tensors that move during few-shot adaptation
//! in the default scope.

use std::ops::Range;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{ParameterSet, VarSet};
use crate::seed::{hash_name, rng_for};
use rand::Rng;

/// Decay of the causal exponential-moving-average state mixer.
const MIXER_DECAY: f64 = 0.5;

// ── Configuration ──

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub vertex_count: usize,
    pub lip_start: usize,
    pub lip_end: usize,
    pub latent_dim: usize,
    pub lora_rank: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 16,
            hidden_dim: 32,
            num_layers: 2,
            vertex_count: 64,
            lip_start: 0,
            lip_end: 16,
            latent_dim: 8,
            lora_rank: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("vertex_count", self.vertex_count),
            ("latent_dim", self.latent_dim),
            ("lora_rank", self.lora_rank),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        let cap = self.hidden_dim.min(3 * self.vertex_count);
        if self.lora_rank >= cap {
            return Err(Error::Config(format!(
                "lora_rank {} must be < min(hidden_dim, 3*vertex_count) = {cap}",
                self.lora_rank
            )));
        }
        if self.lip_start >= self.lip_end || self.lip_end > self.vertex_count {
            return Err(Error::Config(format!(
                "lip range {}..{} invalid for {} vertices",
                self.lip_start, self.lip_end, self.vertex_count
            )));
        }
        Ok(())
    }

    pub fn lip_range(&self) -> Range<usize> {
        self.lip_start..self.lip_end
    }

    /// Flattened per-frame output width.
    pub fn motion_dim(&self) -> usize {
        3 * self.vertex_count
    }

    /// Stable hash of every field, embedded in parameter sets and
    /// checkpoints to catch config drift.
    pub fn hash(&self) -> u64 {
        hash_name(&format!(
            "feature_dim={};hidden_dim={};num_layers={};vertex_count={};lip={}..{};latent_dim={};lora_rank={}",
            self.feature_dim,
            self.hidden_dim,
            self.num_layers,
            self.vertex_count,
            self.lip_start,
            self.lip_end,
            self.latent_dim,
            self.lora_rank
        ))
    }

    /// Every linear map as (name, input_dim, output_dim), in network order.
    pub fn linear_specs(&self) -> Vec<(String, usize, usize)> {
        let mut specs = vec![(
            "embed".to_string(),
            self.feature_dim,
            self.hidden_dim,
        )];
        for i in 0..self.num_layers {
            specs.push((
                format!("layer{i}"),
                self.hidden_dim + self.latent_dim,
                self.hidden_dim,
            ));
        }
        specs.push(("head".to_string(), self.hidden_dim, self.motion_dim()));
        specs
    }
}

// ── Clip types ──

/// Per-frame vertex offsets from the shared neutral template, `[T, L, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionClip {
    pub frames: Tensor,
    pub frame_rate: f64,
}

impl MotionClip {
    pub fn new(frames: Tensor, frame_rate: f64) -> Result<MotionClip> {
        let s = frames.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::ShapeMismatch {
                op: "motion_clip",
                lhs: s.to_vec(),
                rhs: vec![0, 0, 3],
            });
        }
        if s[0] < 2 {
            return Err(Error::Config(format!(
                "motion clips need at least 2 frames, got {}",
                s[0]
            )));
        }
        if !frames.all_finite() {
            return Err(Error::NonFinite { op: "motion_clip" });
        }
        if !(frame_rate.is_finite() && frame_rate > 0.0) {
            return Err(Error::Config(format!("bad frame rate {frame_rate}")));
        }
        Ok(MotionClip { frames, frame_rate })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn vertex_count(&self) -> usize {
        self.frames.shape()[1]
    }

    /// `[T, L*3]` view for loss computation.
    pub fn flat(&self) -> Tensor {
        let s = self.frames.shape();
        self.frames
            .reshape(&[s[0], s[1] * 3])
            .expect("element count unchanged")
    }
}

/// Frame-aligned input features, `[T, d_a]`; one row per motion frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureClip {
    pub frames: Tensor,
}

impl FeatureClip {
    pub fn new(frames: Tensor) -> Result<FeatureClip> {
        if frames.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "feature_clip",
                lhs: frames.shape().to_vec(),
                rhs: vec![0, 0],
            });
        }
        if !frames.all_finite() {
            return Err(Error::NonFinite { op: "feature_clip" });
        }
        Ok(FeatureClip { frames })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.shape()[1]
    }
}

// ── Adaptation scope ──

/// Which parameters few-shot adaptation is allowed to move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptScope {
    All,
    LoraOnly,
}

impl AdaptScope {
    pub fn trains(&self, name: &str) -> bool {
        match self {
            AdaptScope::All => name.starts_with("base.") || name.starts_with("lora."),
            AdaptScope::LoraOnly => name.starts_with("lora."),
        }
    }

    pub fn parse(text: &str) -> Result<AdaptScope> {
        match text {
            "all" => Ok(AdaptScope::All),
            "lora-only" => Ok(AdaptScope::LoraOnly),
            other => Err(Error::Config(format!(
                "adapt_scope must be 'all' or 'lora-only', got {other:?}"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AdaptScope::All => "all",
            AdaptScope::LoraOnly => "lora-only",
        }
    }
}

// ── Initialization ──

/// Backbone weights (variance-preserving uniform), zero biases, and adapter
/// pairs with small-random B and zero A, so every merged delta starts at
/// zero.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut params = ParameterSet::new(cfg.hash());
    for (name, fan_in, fan_out) in cfg.linear_specs() {
        let w_name = format!("base.{name}.w");
        let bound = (3.0 / fan_in as f64).sqrt();
        let mut rng = rng_for(seed, &[hash_name(&w_name)]);
        let w = Tensor::from_fn(&[fan_in, fan_out], |_| rng.gen_range(-bound..bound));
        params.insert(w_name, w)?;
        params.insert(format!("base.{name}.b"), Tensor::zeros(&[1, fan_out]))?;

        let b_name = format!("lora.{name}.b");
        let mut rng = rng_for(seed, &[hash_name(&b_name)]);
        let b = Tensor::from_fn(&[fan_in, cfg.lora_rank], |_| rng.gen_range(-bound..bound));
        params.insert(b_name, b)?;
        params.insert(
            format!("lora.{name}.a"),
            Tensor::zeros(&[cfg.lora_rank, fan_out]),
        )?;
    }
    Ok(params)
}

// ── Low-rank adapters ──

/// One adapter pair attached to a named base matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub base_name: String,
    pub b: Tensor,
    pub a: Tensor,
}

impl LoraAdapter {
    pub fn trainable_elements(&self) -> usize {
        self.b.numel() + self.a.numel()
    }
}

/// `X + B·A`; pure, the base tensor is never touched.
pub fn lora_merge(base: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    let delta = adapter.b.matmul(&adapter.a)?;
    if delta.shape() != base.shape() {
        return Err(Error::ShapeMismatch {
            op: "lora_merge",
            lhs: base.shape().to_vec(),
            rhs: delta.shape().to_vec(),
        });
    }
    base.add(&delta)
}

// ── Forward pass ──

/// Merged weight for one linear map: base plus B·A when the var set holds
/// adapter factors for it.
fn effective_weight<'t>(vars: &VarSet<'t>, name: &str) -> Result<Var<'t>> {
    let w = vars.get(&format!("base.{name}.w"))?;
    let b_name = format!("lora.{name}.b");
    if vars.contains(&b_name) {
        let b = vars.get(&b_name)?;
        let a = vars.get(&format!("lora.{name}.a"))?;
        w.add(b.matmul(a)?)
    } else {
        Ok(w)
    }
}

/// Causal exponential moving average as a lower-triangular matrix:
/// row t weights frame j <= t by (1-decay)·decay^(t-j).
fn causal_mixer(frames: usize) -> Tensor {
    Tensor::from_fn(&[frames, frames], |flat| {
        let (t, j) = (flat / frames, flat % frames);
        if j <= t {
            (1.0 - MIXER_DECAY) * MIXER_DECAY.powi((t - j) as i32)
        } else {
            0.0
        }
    })
}

/// Differentiable forward pass producing flat motion `[T, L*3]`.
///
/// `z` is a `[1, latent_dim]` code broadcast to every frame; pass zeros to
/// run the model unconditioned.
pub fn forward_on_tape<'t>(
    cfg: &ModelConfig,
    tape: &'t Tape,
    vars: &VarSet<'t>,
    features: &FeatureClip,
    z: Var<'t>,
) -> Result<Var<'t>> {
    if features.feature_dim() != cfg.feature_dim {
        return Err(Error::ShapeMismatch {
            op: "forward",
            lhs: features.frames.shape().to_vec(),
            rhs: vec![features.frame_count(), cfg.feature_dim],
        });
    }
    if z.shape() != [1, cfg.latent_dim] {
        return Err(Error::ShapeMismatch {
            op: "forward",
            lhs: z.shape(),
            rhs: vec![1, cfg.latent_dim],
        });
    }
    let frames = features.frame_count();
    let x = tape.constant(features.frames.clone())?;
    let mixer = tape.constant(causal_mixer(frames))?;
    let z_rows = z.broadcast(&[frames, cfg.latent_dim])?;

    let embed_b = vars.get("base.embed.b")?.broadcast(&[frames, cfg.hidden_dim])?;
    let mut h = x.matmul(effective_weight(vars, "embed")?)?.add(embed_b)?;
    for i in 0..cfg.num_layers {
        let name = format!("layer{i}");
        let w = effective_weight(vars, &name)?;
        let b = vars
            .get(&format!("base.{name}.b"))?
            .broadcast(&[frames, cfg.hidden_dim])?;
        let u = Var::concat(&[h, z_rows])?.matmul(w)?.add(b)?.tanh()?;
        h = mixer.matmul(u)?;
    }
    let head_b = vars
        .get("base.head.b")?
        .broadcast(&[frames, cfg.motion_dim()])?;
    h.matmul(effective_weight(vars, "head")?)?.add(head_b)
}

/// Plain-tensor forward: runs the tape internally and shapes the result as
/// a motion clip at the given frame rate.
pub fn forward(
    cfg: &ModelConfig,
    params: &ParameterSet,
    features: &FeatureClip,
    z: &Tensor,
    frame_rate: f64,
) -> Result<MotionClip> {
    if z.numel() != cfg.latent_dim {
        return Err(Error::ShapeMismatch {
            op: "forward",
            lhs: z.shape().to_vec(),
            rhs: vec![cfg.latent_dim],
        });
    }
    let tape = Tape::new();
    let vars = VarSet::lift(&tape, params, |_| false)?;
    let z_var = tape.constant(z.reshape(&[1, cfg.latent_dim])?)?;
    let flat = forward_on_tape(cfg, &tape, &vars, features, z_var)?;
    let frames = flat
        .value()
        .reshape(&[features.frame_count(), cfg.vertex_count, 3])?;
    MotionClip::new(frames, frame_rate)
}

// ── Trainable accounting ──

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainableReport {
    pub full_count: usize,
    pub lora_count: usize,
    pub trained_count: usize,
    pub ratio: f64,
}

/// Parameter counts for the model (encoder entries excluded).
pub fn trainable_report(params: &ParameterSet, scope: AdaptScope) -> TrainableReport {
    let full_count =
        params.element_count(|n| n.starts_with("base.") || n.starts_with("lora."));
    let lora_count = params.element_count(|n| n.starts_with("lora."));
    let trained_count = match scope {
        AdaptScope::All => full_count,
        AdaptScope::LoraOnly => lora_count,
    };
    TrainableReport {
        full_count,
        lora_count,
        trained_count,
        ratio: lora_count as f64 / full_count as f64,
    }
}
