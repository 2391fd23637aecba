//! Episodic meta-training and few-shot personalization.
//!
//! Each outer step samples one task per speaker, runs a short inner
//! gradient descent on the task's support clips, measures the adapted
//! model on its query clips, and updates the shared initialization with
//! the gradient of the summed query losses. In second-order mode that
//! gradient differentiates through the inner descent; first-order mode
//! detaches the inner gradients and is cheaper but biased.

use rayon::prelude::*;

use crate::autodiff::{Tape, Tensor, Var};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{forward_on_tape, AdaptScope, FeatureClip, ModelConfig, MotionClip};
use crate::objectives::{l2_metrics, recon_loss, velocity_loss, LossWeights};
use crate::params::{ParameterSet, VarSet};
use crate::relation::{
    encode_set, encode_set_on_tape, kl_on_tape, sample_latent_on_tape, LatentDistribution,
    ZSource,
};
use crate::seed::{hash_name, normal_vec, rng_for};
use rand::Rng;

// ── Task sampling ──

/// One episode's clip assignment: support clips adapt, query clips grade.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub speaker_idx: usize,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaOrder {
    Second,
    First,
}

impl MetaOrder {
    pub fn parse(text: &str) -> Result<MetaOrder> {
        match text {
            "second" => Ok(MetaOrder::Second),
            "first" => Ok(MetaOrder::First),
            other => Err(Error::Config(format!(
                "meta_order must be 'second' or 'first', got {other:?}"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            MetaOrder::Second => "second",
            MetaOrder::First => "first",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub inner_steps: usize,
    /// Tasks per outer step, one per distinct speaker.
    pub n_way: usize,
    pub k_shot: usize,
    pub query_size: usize,
    pub order: MetaOrder,
    pub adapt_scope: AdaptScope,
    /// Latent relation regularizer on/off.
    pub use_relation: bool,
    /// Which clip set conditions the query decode during training.
    pub z_source: ZSource,
    /// Personalization mix between the few-shot loss and the proximal pull.
    pub lambda: f64,
    pub proximal_weight: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_lr: 5e-5,
            outer_lr: 1e-4,
            inner_steps: 3,
            n_way: 11,
            k_shot: 1,
            query_size: 1,
            order: MetaOrder::Second,
            adapt_scope: AdaptScope::LoraOnly,
            use_relation: true,
            z_source: ZSource::Query,
            lambda: 0.5,
            proximal_weight: 0.0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("inner_lr", self.inner_lr), ("outer_lr", self.outer_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n_way == 0 || self.k_shot == 0 || self.query_size == 0 {
            return Err(Error::Config(
                "n_way, k_shot, and query_size must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.proximal_weight.is_finite() && self.proximal_weight >= 0.0) {
            return Err(Error::Config(format!(
                "proximal_weight must be >= 0, got {}",
                self.proximal_weight
            )));
        }
        Ok(())
    }
}

/// Draws `n_way` tasks for one outer step, one per distinct train speaker,
/// with disjoint support and query clips. Deterministic in
/// (seed, outer_step).
pub fn sample_tasks(
    corpus: &Corpus,
    train_speakers: &[usize],
    mcfg: &MetaConfig,
    seed: u64,
    outer_step: usize,
) -> Result<Vec<Task>> {
    if mcfg.n_way > train_speakers.len() {
        return Err(Error::Sizing(format!(
            "n_way {} exceeds the {} available train speakers",
            mcfg.n_way,
            train_speakers.len()
        )));
    }
    let mut order: Vec<usize> = train_speakers.to_vec();
    let mut rng = rng_for(seed, &[hash_name("tasks.speakers"), outer_step as u64]);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let need = mcfg.k_shot + mcfg.query_size;
    order[..mcfg.n_way]
        .iter()
        .map(|&speaker_idx| {
            let clips = corpus.speakers[speaker_idx].clips.len();
            if need > clips {
                return Err(Error::Sizing(format!(
                    "speaker {speaker_idx} has {clips} clips, task needs {need}"
                )));
            }
            let mut idx: Vec<usize> = (0..clips).collect();
            let mut rng = rng_for(
                seed,
                &[hash_name("tasks.clips"), outer_step as u64, speaker_idx as u64],
            );
            for i in (1..idx.len()).rev() {
                let j = rng.gen_range(0..=i);
                idx.swap(i, j);
            }
            Ok(Task {
                speaker_idx,
                support: idx[..mcfg.k_shot].to_vec(),
                query: idx[mcfg.k_shot..need].to_vec(),
            })
        })
        .collect()
}

// ── Episode abstraction ──

/// Query loss with its unweighted components, for traces.
pub struct EpisodeLoss<'t> {
    pub total: Var<'t>,
    pub recon: f64,
    pub vel: f64,
    pub lnp: f64,
    /// Mean per-vertex error of the adapted model on the query clips.
    pub post_l2: f64,
}

/// A differentiable task: the meta-engine only needs a loss to descend in
/// the inner loop and a loss to grade the adapted parameters.
pub trait Episode: Sync {
    fn support_loss<'t>(&self, tape: &'t Tape, vars: &VarSet<'t>) -> Result<Var<'t>>;
    fn query_loss<'t>(&self, tape: &'t Tape, vars: &VarSet<'t>) -> Result<EpisodeLoss<'t>>;
}

/// Runs `steps` inner gradient steps on the support loss, moving only
/// trainable vars whose name passes `scope`. The updated parameters are
/// new tape nodes, so outer gradients can flow through the inner descent;
/// first-order mode detaches the inner gradients instead.
pub fn inner_adapt<'t>(
    episode: &dyn Episode,
    tape: &'t Tape,
    vars: &VarSet<'t>,
    scope: &dyn Fn(&str) -> bool,
    inner_lr: f64,
    steps: usize,
    order: MetaOrder,
) -> Result<VarSet<'t>> {
    let mut current = vars.clone();
    for step in 0..steps {
        let loss = episode
            .support_loss(tape, &current)
            .map_err(|e| e.at_step(step))?;
        let moving: Vec<(String, Var)> = current
            .trainable()
            .into_iter()
            .filter(|(name, _)| scope(name))
            .map(|(name, var)| (name.to_string(), var))
            .collect();
        let wrt: Vec<Var> = moving.iter().map(|(_, v)| *v).collect();
        let grads = loss.gradient(&wrt).map_err(|e| e.at_step(step))?;
        for ((name, var), grad) in moving.iter().zip(grads) {
            let grad = match order {
                MetaOrder::Second => grad,
                MetaOrder::First => grad.detach(),
            };
            let updated = var.sub(grad.scale(inner_lr)?)?;
            current.rebind(name, updated)?;
        }
    }
    Ok(current)
}

// ── Outer step ──

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuterStats {
    pub query_total: f64,
    pub recon: f64,
    pub vel: f64,
    pub lnp: f64,
    pub post_l2: f64,
}

/// Sum over episodes of the query-loss gradient w.r.t. the shared
/// initialization, in parameter insertion order, plus per-task mean stats.
/// Episodes run in parallel; the reduction order is fixed by task index,
/// so results are bit-reproducible regardless of thread scheduling.
pub fn meta_gradient<E: Episode>(
    params: &ParameterSet,
    episodes: &[E],
    scope: &(dyn Fn(&str) -> bool + Sync),
    inner_lr: f64,
    inner_steps: usize,
    order: MetaOrder,
) -> Result<(Vec<Tensor>, OuterStats)> {
    if episodes.is_empty() {
        return Err(Error::Sizing("meta step needs at least one episode".into()));
    }
    let per_task: Vec<(Vec<Tensor>, OuterStats)> = episodes
        .par_iter()
        .map(|episode| {
            let tape = Tape::new();
            let vars = VarSet::lift(&tape, params, |_| true)?;
            let adapted = inner_adapt(episode, &tape, &vars, scope, inner_lr, inner_steps, order)?;
            let q = episode.query_loss(&tape, &adapted)?;
            let wrt: Vec<Var> = vars.trainable().into_iter().map(|(_, v)| v).collect();
            let grads = q.total.gradient_values(&wrt)?;
            let stats = OuterStats {
                query_total: q.total.value().scalar_value()?,
                recon: q.recon,
                vel: q.vel,
                lnp: q.lnp,
                post_l2: q.post_l2,
            };
            Ok((grads, stats))
        })
        .collect::<Result<_>>()?;

    let n = per_task.len() as f64;
    let mut sum_grads = per_task[0].0.clone();
    let mut stats = per_task[0].1;
    for (grads, s) in &per_task[1..] {
        for (acc, g) in sum_grads.iter_mut().zip(grads) {
            *acc = acc.add(g)?;
        }
        stats.query_total += s.query_total;
        stats.recon += s.recon;
        stats.vel += s.vel;
        stats.lnp += s.lnp;
        stats.post_l2 += s.post_l2;
    }
    stats.query_total /= n;
    stats.recon /= n;
    stats.vel /= n;
    stats.lnp /= n;
    stats.post_l2 /= n;
    Ok((sum_grads, stats))
}

/// One outer update: every parameter moves against the summed task
/// gradient at the outer rate.
pub fn meta_outer_step<E: Episode>(
    params: &ParameterSet,
    episodes: &[E],
    mcfg: &MetaConfig,
) -> Result<(ParameterSet, OuterStats)> {
    let scope = mcfg.adapt_scope;
    let (grads, stats) = meta_gradient(
        params,
        episodes,
        &move |name: &str| scope.trains(name),
        mcfg.inner_lr,
        mcfg.inner_steps,
        mcfg.order,
    )?;
    let mut updated = params.clone();
    for ((name, value), grad) in params.iter().zip(&grads) {
        updated.update(name, value.sub(&grad.scale(mcfg.outer_lr))?)?;
    }
    Ok((updated, stats))
}

// ── Face episodes ──

/// A speaker's few-shot episode over real clip pairs.
pub struct FaceEpisode<'c> {
    pub model_cfg: &'c ModelConfig,
    pub weights: &'c LossWeights,
    pub support: Vec<(&'c FeatureClip, &'c MotionClip)>,
    pub query: Vec<(&'c FeatureClip, &'c MotionClip)>,
    pub use_relation: bool,
    pub z_source: ZSource,
    /// Derives the reparameterization draws for this episode.
    pub eps_seed: u64,
}

impl<'c> FaceEpisode<'c> {
    fn eps(&self, label: &str) -> Tensor {
        let mut rng = rng_for(self.eps_seed, &[hash_name(label)]);
        let data = normal_vec(&mut rng, self.model_cfg.latent_dim);
        Tensor::new(vec![1, self.model_cfg.latent_dim], data).expect("eps shape")
    }

    fn zero_z<'t>(&self, tape: &'t Tape) -> Result<Var<'t>> {
        tape.constant(Tensor::zeros(&[1, self.model_cfg.latent_dim]))
    }
}

/// Mean weighted data loss over a clip set, with unweighted components and
/// the plain per-vertex error of the current prediction.
struct ClipSetLoss<'t> {
    total: Var<'t>,
    recon: f64,
    vel: f64,
    l2_face: f64,
}

fn clip_set_loss<'t>(
    cfg: &ModelConfig,
    weights: &LossWeights,
    tape: &'t Tape,
    vars: &VarSet<'t>,
    pairs: &[(&FeatureClip, &MotionClip)],
    z: Var<'t>,
) -> Result<ClipSetLoss<'t>> {
    if pairs.is_empty() {
        return Err(Error::Sizing("clip set loss needs at least one pair".into()));
    }
    let mut total: Option<Var> = None;
    let mut recon_acc = 0.0;
    let mut vel_acc = 0.0;
    let mut l2_acc = 0.0;
    for (features, motion) in pairs {
        let pred = forward_on_tape(cfg, tape, vars, features, z)?;
        let gt = tape.constant(motion.flat())?;
        let recon = recon_loss(pred, gt)?;
        let vel = velocity_loss(pred, gt)?;
        recon_acc += recon.value().scalar_value()?;
        vel_acc += vel.value().scalar_value()?;
        let pred3 = pred
            .value()
            .reshape(&[features.frame_count(), cfg.vertex_count, 3])?;
        l2_acc += l2_metrics(&pred3, &motion.frames, &cfg.lip_range())?.l2_face;
        let term = recon.scale(weights.w_recon)?.add(vel.scale(weights.w_vel)?)?;
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(term)?,
        });
    }
    let k = pairs.len() as f64;
    Ok(ClipSetLoss {
        total: total.expect("non-empty").scale(1.0 / k)?,
        recon: recon_acc / k,
        vel: vel_acc / k,
        l2_face: l2_acc / k,
    })
}

impl Episode for FaceEpisode<'_> {
    fn support_loss<'t>(&self, tape: &'t Tape, vars: &VarSet<'t>) -> Result<Var<'t>> {
        let z = if self.use_relation {
            let (mu, lv) = encode_set_on_tape(self.model_cfg, tape, vars, &self.support)?;
            sample_latent_on_tape(tape, mu, lv, &self.eps("eps.support"))?
        } else {
            self.zero_z(tape)?
        };
        Ok(clip_set_loss(self.model_cfg, self.weights, tape, vars, &self.support, z)?.total)
    }

    fn query_loss<'t>(&self, tape: &'t Tape, vars: &VarSet<'t>) -> Result<EpisodeLoss<'t>> {
        let (z, kl) = if self.use_relation {
            let (mu_s, lv_s) = encode_set_on_tape(self.model_cfg, tape, vars, &self.support)?;
            let (mu_q, lv_q) = encode_set_on_tape(self.model_cfg, tape, vars, &self.query)?;
            let z = match self.z_source {
                ZSource::Query => sample_latent_on_tape(tape, mu_q, lv_q, &self.eps("eps.query"))?,
                ZSource::Support => {
                    sample_latent_on_tape(tape, mu_s, lv_s, &self.eps("eps.support"))?
                }
            };
            (z, Some(kl_on_tape(mu_q, lv_q, mu_s, lv_s)?))
        } else {
            (self.zero_z(tape)?, None)
        };
        let data = clip_set_loss(self.model_cfg, self.weights, tape, vars, &self.query, z)?;
        let (total, lnp) = match kl {
            Some(kl) => (
                data.total.add(kl.scale(self.weights.w_lnp)?)?,
                kl.value().scalar_value()?,
            ),
            None => (data.total, 0.0),
        };
        Ok(EpisodeLoss {
            total,
            recon: data.recon,
            vel: data.vel,
            lnp,
            post_l2: data.l2_face,
        })
    }
}

/// Resolves a sampled task against the corpus.
pub fn build_episode<'c>(
    corpus: &'c Corpus,
    task: &Task,
    model_cfg: &'c ModelConfig,
    weights: &'c LossWeights,
    mcfg: &MetaConfig,
    eps_seed: u64,
) -> Result<FaceEpisode<'c>> {
    let speaker = corpus
        .speakers
        .get(task.speaker_idx)
        .ok_or_else(|| Error::Sizing(format!("task speaker {} out of range", task.speaker_idx)))?;
    let resolve = |indices: &[usize]| -> Result<Vec<(&'c FeatureClip, &'c MotionClip)>> {
        indices
            .iter()
            .map(|&c| {
                speaker
                    .clips
                    .get(c)
                    .map(|clip| (&clip.features, &clip.motion))
                    .ok_or_else(|| {
                        Error::Sizing(format!(
                            "clip {c} out of range for speaker {}",
                            task.speaker_idx
                        ))
                    })
            })
            .collect()
    };
    Ok(FaceEpisode {
        model_cfg,
        weights,
        support: resolve(&task.support)?,
        query: resolve(&task.query)?,
        use_relation: mcfg.use_relation,
        z_source: mcfg.z_source,
        eps_seed,
    })
}

// ── Few-shot personalization ──

/// Adapted parameters plus the support-conditioned latent used to decode.
pub struct Personalized {
    pub params: ParameterSet,
    pub conditioning: Option<LatentDistribution>,
}

/// Test-time adaptation to a new speaker's support clips. Descends
/// `lambda * data_loss + proximal_weight * (1 - lambda) * ||theta - start||^2`
/// over the scope's parameters at the inner rate, holding the latent code
/// fixed to one support-conditioned draw.
pub fn personalize(
    model_cfg: &ModelConfig,
    weights: &LossWeights,
    start: &ParameterSet,
    support: &[(&FeatureClip, &MotionClip)],
    mcfg: &MetaConfig,
    steps: usize,
) -> Result<Personalized> {
    model_cfg.validate()?;
    mcfg.validate()?;
    if support.is_empty() {
        return Err(Error::Sizing("personalization needs at least one clip".into()));
    }
    let conditioning = if mcfg.use_relation {
        Some(encode_set(model_cfg, start, support)?)
    } else {
        None
    };
    // Inference-time conditioning is the posterior mean: sampling is a
    // training-only device for the divergence objective, and a stochastic
    // code would leak draw noise into every personalized result.
    let z_row = match &conditioning {
        Some(dist) => dist.mean.reshape(&[1, model_cfg.latent_dim])?,
        None => Tensor::zeros(&[1, model_cfg.latent_dim]),
    };

    let mut params = start.clone();
    for step in 0..steps {
        let tape = Tape::new();
        let vars = VarSet::lift(&tape, &params, |name| mcfg.adapt_scope.trains(name))?;
        let z = tape.constant(z_row.clone())?;
        let data = clip_set_loss(model_cfg, weights, &tape, &vars, support, z)
            .map_err(|e| e.at_step(step))?;
        let mut loss = data.total.scale(mcfg.lambda)?;
        let prox_weight = mcfg.proximal_weight * (1.0 - mcfg.lambda);
        if prox_weight > 0.0 {
            let mut prox: Option<Var> = None;
            for (name, var) in vars.trainable() {
                let anchor = tape.constant(start.get(name)?.clone())?;
                let term = var.sub(anchor)?.square()?.sum()?;
                prox = Some(match prox {
                    None => term,
                    Some(acc) => acc.add(term)?,
                });
            }
            if let Some(p) = prox {
                loss = loss.add(p.scale(prox_weight)?)?;
            }
        }
        let moving = vars.trainable();
        let wrt: Vec<Var> = moving.iter().map(|(_, v)| *v).collect();
        let grads = loss.gradient_values(&wrt).map_err(|e| e.at_step(step))?;
        for ((name, _), grad) in moving.iter().zip(grads) {
            let updated = params.get(name)?.sub(&grad.scale(mcfg.inner_lr))?;
            params.update(name, updated).map_err(|e| e.at_step(step))?;
        }
    }
    Ok(Personalized {
        params,
        conditioning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use crate::model::init_params;
    use crate::relation::init_encoder;

    /// Decoupled quadratics: support loss sum_d (theta_d - a_d)^2, query
    /// loss sum_d (theta_d - c_d)^2. After n inner steps at rate alpha,
    /// theta_hat = a + (1 - 2 alpha)^n (theta - a), and the exact
    /// meta-gradient is 2 (theta_hat - c) * (1 - 2 alpha)^n per dimension.
    struct QuadraticEpisode {
        a: Vec<f64>,
        c: Vec<f64>,
    }

    impl QuadraticEpisode {
        fn offset_loss<'t>(
            &self,
            tape: &'t Tape,
            vars: &VarSet<'t>,
            target: &[f64],
        ) -> Result<Var<'t>> {
            let theta = vars.get("theta")?;
            let t = tape.constant(Tensor::new(vec![target.len()], target.to_vec())?)?;
            theta.sub(t)?.square()?.sum()
        }
    }

    impl Episode for QuadraticEpisode {
        fn support_loss<'t>(&self, tape: &'t Tape, vars: &VarSet<'t>) -> Result<Var<'t>> {
            self.offset_loss(tape, vars, &self.a)
        }

        fn query_loss<'t>(&self, tape: &'t Tape, vars: &VarSet<'t>) -> Result<EpisodeLoss<'t>> {
            let total = self.offset_loss(tape, vars, &self.c)?;
            let recon = total.value().scalar_value()?;
            Ok(EpisodeLoss {
                total,
                recon,
                vel: 0.0,
                lnp: 0.0,
                post_l2: 0.0,
            })
        }
    }

    fn quad_params(theta: &[f64]) -> ParameterSet {
        let mut p = ParameterSet::new(0);
        p.insert("theta", Tensor::new(vec![theta.len()], theta.to_vec()).unwrap())
            .unwrap();
        p
    }

    fn closed_form_meta_grad(
        theta: &[f64],
        tasks: &[(&[f64], &[f64])],
        alpha: f64,
        steps: usize,
    ) -> Vec<f64> {
        let shrink = (1.0 - 2.0 * alpha).powi(steps as i32);
        let mut grad = vec![0.0; theta.len()];
        for (a, c) in tasks {
            for d in 0..theta.len() {
                let adapted = a[d] + shrink * (theta[d] - a[d]);
                grad[d] += 2.0 * (adapted - c[d]) * shrink;
            }
        }
        grad
    }

    #[test]
    fn second_order_meta_gradient_matches_closed_form() {
        let theta = [0.7, -0.4];
        let t1 = (vec![0.2, 0.5], vec![-0.3, 0.9]);
        let t2 = (vec![-0.6, 0.1], vec![0.4, -0.2]);
        let episodes = vec![
            QuadraticEpisode {
                a: t1.0.clone(),
                c: t1.1.clone(),
            },
            QuadraticEpisode {
                a: t2.0.clone(),
                c: t2.1.clone(),
            },
        ];
        let (alpha, steps) = (0.1, 3);
        let params = quad_params(&theta);
        let (grads, _) = meta_gradient(
            &params,
            &episodes,
            &|_: &str| true,
            alpha,
            steps,
            MetaOrder::Second,
        )
        .unwrap();
        let want = closed_form_meta_grad(
            &theta,
            &[(&t1.0, &t1.1), (&t2.0, &t2.1)],
            alpha,
            steps,
        );
        for d in 0..2 {
            let got = grads[0].data()[d];
            let rel = (got - want[d]).abs() / want[d].abs().max(1e-12);
            assert!(rel < 1e-12, "dim {d}: got {got}, want {}", want[d]);
        }
    }

    #[test]
    fn first_order_detaches_the_inner_curvature() {
        let theta = [0.7, -0.4];
        let task = (vec![0.2, 0.5], vec![-0.3, 0.9]);
        let episodes = vec![QuadraticEpisode {
            a: task.0.clone(),
            c: task.1.clone(),
        }];
        let (alpha, steps) = (0.1f64, 3);
        let shrink = (1.0 - 2.0 * alpha).powi(steps as i32);
        let params = quad_params(&theta);
        let (fo, _) = meta_gradient(
            &params,
            &episodes,
            &|_: &str| true,
            alpha,
            steps,
            MetaOrder::First,
        )
        .unwrap();
        // First order drops the shrink factor on the outer chain rule.
        for d in 0..2 {
            let adapted = task.0[d] + shrink * (theta[d] - task.0[d]);
            let want = 2.0 * (adapted - task.1[d]);
            let got = fo[0].data()[d];
            assert!(
                (got - want).abs() < 1e-12,
                "dim {d}: got {got}, want {want}"
            );
            let second = want * shrink;
            assert!((got - second).abs() > 1e-3, "orders should disagree here");
        }
    }

    /// With a linear inner loss the inner gradient is constant, so
    /// detaching it changes nothing and both orders agree exactly.
    struct LinearInnerEpisode {
        b: Vec<f64>,
        c: Vec<f64>,
    }

    impl Episode for LinearInnerEpisode {
        fn support_loss<'t>(&self, tape: &'t Tape, vars: &VarSet<'t>) -> Result<Var<'t>> {
            let theta = vars.get("theta")?;
            let b = tape.constant(Tensor::new(vec![self.b.len()], self.b.clone())?)?;
            theta.mul(b)?.sum()
        }

        fn query_loss<'t>(&self, tape: &'t Tape, vars: &VarSet<'t>) -> Result<EpisodeLoss<'t>> {
            let theta = vars.get("theta")?;
            let c = tape.constant(Tensor::new(vec![self.c.len()], self.c.clone())?)?;
            let total = theta.sub(c)?.square()?.sum()?;
            Ok(EpisodeLoss {
                total,
                recon: 0.0,
                vel: 0.0,
                lnp: 0.0,
                post_l2: 0.0,
            })
        }
    }

    #[test]
    fn orders_agree_when_inner_loss_is_linear() {
        let episodes = vec![LinearInnerEpisode {
            b: vec![0.3, -1.1],
            c: vec![0.2, 0.4],
        }];
        let params = quad_params(&[0.5, 0.6]);
        let run = |order| {
            let (g, _) =
                meta_gradient(&params, &episodes, &|_: &str| true, 0.05, 4, order).unwrap();
            g[0].data().to_vec()
        };
        let so = run(MetaOrder::Second);
        let fo = run(MetaOrder::First);
        for d in 0..2 {
            assert!((so[d] - fo[d]).abs() < 1e-14);
        }
    }

    #[test]
    fn inner_adapt_moves_only_the_scope() {
        let mut params = ParameterSet::new(0);
        params
            .insert("theta", Tensor::new(vec![2], vec![0.5, 0.6]).unwrap())
            .unwrap();
        params
            .insert("frozen_like", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let episode = QuadraticEpisode {
            a: vec![0.0, 0.0],
            c: vec![0.0, 0.0],
        };
        let tape = Tape::new();
        let vars = VarSet::lift(&tape, &params, |_| true).unwrap();
        let adapted = inner_adapt(
            &episode,
            &tape,
            &vars,
            &|name: &str| name == "theta",
            0.1,
            2,
            MetaOrder::Second,
        )
        .unwrap();
        let theta = adapted.get("theta").unwrap().value();
        assert!((theta.data()[0] - 0.5 * 0.64).abs() < 1e-12);
        let untouched = adapted.get("frozen_like").unwrap().value();
        assert_eq!(untouched.data(), &[1.0, 2.0]);
    }

    #[test]
    fn repeated_outer_steps_descend_the_query_loss() {
        let episodes = vec![
            QuadraticEpisode {
                a: vec![0.3, -0.2],
                c: vec![0.1, 0.2],
            },
            QuadraticEpisode {
                a: vec![-0.1, 0.4],
                c: vec![0.0, -0.3],
            },
        ];
        let mcfg = MetaConfig {
            inner_lr: 0.05,
            outer_lr: 0.05,
            inner_steps: 2,
            n_way: 2,
            ..MetaConfig::default()
        };
        let mut params = quad_params(&[2.0, -2.0]);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..40 {
            let (next, stats) = meta_outer_step(&params, &episodes, &mcfg).unwrap();
            params = next;
            first.get_or_insert(stats.query_total);
            last = stats.query_total;
        }
        assert!(
            last < 0.25 * first.unwrap(),
            "query loss {} -> {last} did not descend",
            first.unwrap()
        );
    }

    #[test]
    fn task_sampling_is_deterministic_and_disjoint() {
        let corpus = generate_corpus(&CorpusConfig {
            seed: 3,
            num_speakers: 6,
            clips_per_speaker: 5,
            t_min: 4,
            t_max: 6,
            feature_dim: 3,
            vertex_count: 4,
            frame_rate: 25.0,
            noise_std: 0.01,
        })
        .unwrap();
        let mcfg = MetaConfig {
            n_way: 4,
            k_shot: 2,
            query_size: 2,
            ..MetaConfig::default()
        };
        let train = [0, 1, 2, 4, 5];
        let a = sample_tasks(&corpus, &train, &mcfg, 11, 7).unwrap();
        let b = sample_tasks(&corpus, &train, &mcfg, 11, 7).unwrap();
        assert_eq!(a, b);
        let other_step = sample_tasks(&corpus, &train, &mcfg, 11, 8).unwrap();
        assert_ne!(a, other_step);

        assert_eq!(a.len(), 4);
        let mut speakers: Vec<usize> = a.iter().map(|t| t.speaker_idx).collect();
        speakers.sort_unstable();
        speakers.dedup();
        assert_eq!(speakers.len(), 4, "tasks must use distinct speakers");
        assert!(speakers.iter().all(|s| train.contains(s)));
        for task in &a {
            assert_eq!(task.support.len(), 2);
            assert_eq!(task.query.len(), 2);
            let mut all: Vec<usize> = task.support.iter().chain(&task.query).copied().collect();
            all.sort_unstable();
            all.dedup();
            assert_eq!(all.len(), 4, "support and query clips must not overlap");
        }

        let too_many = MetaConfig {
            n_way: 6,
            ..mcfg.clone()
        };
        assert!(matches!(
            sample_tasks(&corpus, &train, &too_many, 11, 0),
            Err(Error::Sizing(_))
        ));
    }

    fn tiny_setup() -> (ModelConfig, CorpusConfig) {
        let model_cfg = ModelConfig {
            feature_dim: 3,
            hidden_dim: 4,
            num_layers: 1,
            vertex_count: 4,
            lip_start: 0,
            lip_end: 2,
            latent_dim: 2,
            lora_rank: 1,
        };
        let corpus_cfg = CorpusConfig {
            seed: 5,
            num_speakers: 3,
            clips_per_speaker: 4,
            t_min: 5,
            t_max: 8,
            feature_dim: 3,
            vertex_count: 4,
            frame_rate: 25.0,
            noise_std: 0.01,
        };
        (model_cfg, corpus_cfg)
    }

    fn tiny_params(model_cfg: &ModelConfig, seed: u64) -> ParameterSet {
        let mut params = init_params(model_cfg, seed).unwrap();
        params.absorb(init_encoder(model_cfg, seed).unwrap()).unwrap();
        params
    }

    #[test]
    fn face_outer_step_touches_the_right_parameters() {
        let (model_cfg, corpus_cfg) = tiny_setup();
        let corpus = generate_corpus(&corpus_cfg).unwrap();
        let weights = LossWeights::default();
        let params = tiny_params(&model_cfg, 1);

        let mcfg = MetaConfig {
            n_way: 2,
            inner_steps: 1,
            adapt_scope: AdaptScope::All,
            ..MetaConfig::default()
        };
        let tasks = sample_tasks(&corpus, &[0, 1, 2], &mcfg, 9, 0).unwrap();
        let episodes: Vec<FaceEpisode> = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| {
                build_episode(&corpus, t, &model_cfg, &weights, &mcfg, 100 + i as u64).unwrap()
            })
            .collect();
        let (updated, stats) = meta_outer_step(&params, &episodes, &mcfg).unwrap();
        assert!(stats.query_total.is_finite());
        assert!(stats.recon > 0.0);
        // Relation on: encoder weights receive gradient through z and KL.
        let before = params.get("enc.embed.w").unwrap();
        let after = updated.get("enc.embed.w").unwrap();
        assert!(before.data() != after.data());

        // Relation off: encoder entries are untouched, bit for bit.
        let mcfg_off = MetaConfig {
            use_relation: false,
            ..mcfg.clone()
        };
        let episodes_off: Vec<FaceEpisode> = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| {
                build_episode(&corpus, t, &model_cfg, &weights, &mcfg_off, 100 + i as u64).unwrap()
            })
            .collect();
        let (updated_off, stats_off) = meta_outer_step(&params, &episodes_off, &mcfg_off).unwrap();
        assert_eq!(stats_off.lnp, 0.0);
        for name in ["enc.embed.w", "enc.mu.w", "enc.logvar.w"] {
            assert_eq!(
                params.get(name).unwrap().data(),
                updated_off.get(name).unwrap().data()
            );
        }
        // Base and adapters still move.
        assert!(
            params.get("base.head.w").unwrap().data()
                != updated_off.get("base.head.w").unwrap().data()
        );
    }

    #[test]
    fn lora_scope_keeps_base_fixed_through_inner_loop() {
        let (model_cfg, corpus_cfg) = tiny_setup();
        let corpus = generate_corpus(&corpus_cfg).unwrap();
        let weights = LossWeights::default();
        let params = tiny_params(&model_cfg, 2);
        let mcfg = MetaConfig {
            n_way: 1,
            inner_steps: 2,
            adapt_scope: AdaptScope::LoraOnly,
            ..MetaConfig::default()
        };
        let tasks = sample_tasks(&corpus, &[0, 1, 2], &mcfg, 4, 0).unwrap();
        let episode = build_episode(&corpus, &tasks[0], &model_cfg, &weights, &mcfg, 7).unwrap();

        let tape = Tape::new();
        let vars = VarSet::lift(&tape, &params, |_| true).unwrap();
        let adapted = inner_adapt(
            &episode,
            &tape,
            &vars,
            &|name: &str| mcfg.adapt_scope.trains(name),
            mcfg.inner_lr,
            mcfg.inner_steps,
            mcfg.order,
        )
        .unwrap();
        // Inner loop rebinds adapters only; base vars are the same nodes.
        assert_eq!(
            adapted.get("base.head.w").unwrap().value().data(),
            params.get("base.head.w").unwrap().data()
        );
        assert!(
            adapted.get("lora.head.a").unwrap().value().data()
                != params.get("lora.head.a").unwrap().data()
        );
    }

    #[test]
    fn personalize_with_zero_lambda_and_proximal_is_identity() {
        let (model_cfg, corpus_cfg) = tiny_setup();
        let corpus = generate_corpus(&corpus_cfg).unwrap();
        let weights = LossWeights::default();
        let params = tiny_params(&model_cfg, 3);
        let mcfg = MetaConfig {
            lambda: 0.0,
            proximal_weight: 0.0,
            ..MetaConfig::default()
        };
        let clip = &corpus.speakers[0].clips[0];
        let out = personalize(
            &model_cfg,
            &weights,
            &params,
            &[(&clip.features, &clip.motion)],
            &mcfg,
            3,
        )
        .unwrap();
        assert!(out.params.bits_equal(&params));
    }

    #[test]
    fn personalize_descends_the_support_loss() {
        let (model_cfg, corpus_cfg) = tiny_setup();
        let corpus = generate_corpus(&corpus_cfg).unwrap();
        let weights = LossWeights::default();
        let params = tiny_params(&model_cfg, 4);
        let mcfg = MetaConfig {
            inner_lr: 1e-3,
            lambda: 1.0,
            adapt_scope: AdaptScope::All,
            use_relation: false,
            ..MetaConfig::default()
        };
        let clip = &corpus.speakers[1].clips[0];
        let support = [(&clip.features, &clip.motion)];

        let measure = |p: &ParameterSet| {
            let tape = Tape::new();
            let vars = VarSet::lift(&tape, p, |_| false).unwrap();
            let z = tape
                .constant(Tensor::zeros(&[1, model_cfg.latent_dim]))
                .unwrap();
            let loss = clip_set_loss(&model_cfg, &weights, &tape, &vars, &support, z).unwrap();
            loss.total.value().scalar_value().unwrap()
        };
        let before = measure(&params);
        let out = personalize(&model_cfg, &weights, &params, &support, &mcfg, 20).unwrap();
        let after = measure(&out.params);
        assert!(after < before, "support loss {before} -> {after}");
        // Proximal-free lambda=1 run still returns no conditioning when the
        // relation encoder is off.
        assert!(out.conditioning.is_none());

        // Lora-only personalization leaves every base tensor bit-identical.
        let mcfg_lora = MetaConfig {
            adapt_scope: AdaptScope::LoraOnly,
            use_relation: true,
            ..mcfg
        };
        let out = personalize(&model_cfg, &weights, &params, &support, &mcfg_lora, 5).unwrap();
        assert!(out.conditioning.is_some());
        for (name, value) in params.iter() {
            if name.starts_with("base.") || name.starts_with("enc.") {
                assert_eq!(value.data(), out.params.get(name).unwrap().data());
            }
        }
        assert!(
            params.get("lora.head.a").unwrap().data()
                != out.params.get("lora.head.a").unwrap().data()
        );
    }
}
