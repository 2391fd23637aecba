//! End-to-end drivers: meta-training, the joint baseline, few-shot
//! adaptation, and held-out evaluation.
//!
//! The joint baseline reuses the episodic machinery with zero inner steps
//! and support == query (one clip per speaker per step), so both training
//! regimes share one code path and differ only in what the episodes are.

use std::fmt::Write as _;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::meta::{
    build_episode, meta_outer_step, personalize, sample_tasks, FaceEpisode, MetaConfig,
    Personalized, Task,
};
use crate::model::{forward, init_params, ModelConfig};
use crate::objectives::{dtw_lip_sync, l2_metrics, LossWeights, MetricReport};
use crate::params::ParameterSet;
use crate::relation::init_encoder;
use crate::seed::{derive_seed, hash_name, rng_for};
use crate::autodiff::Tensor;
use rand::Rng;

// ── Traces ──

/// One outer step's diagnostics: unweighted query losses plus the adapted
/// model's per-vertex error on the query clips.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub recon: f64,
    pub vel: f64,
    pub lnp: f64,
    pub post_adapt_l2: f64,
}

pub const TRACE_HEADER: &str = "step\trecon\tvel\tlnp\tpost_adapt_l2";

impl TraceRow {
    pub fn to_line(&self) -> String {
        let mut line = String::new();
        write!(
            line,
            "{}\t{:.16e}\t{:.16e}\t{:.16e}\t{:.16e}",
            self.step, self.recon, self.vel, self.lnp, self.post_adapt_l2
        )
        .expect("write to string");
        line
    }

    pub fn parse_line(line: &str) -> Result<TraceRow> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Config(format!(
                "trace row needs 5 fields, got {}",
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Config(format!("bad trace number {s:?}")))
        };
        Ok(TraceRow {
            step: fields[0]
                .parse()
                .map_err(|_| Error::Config(format!("bad trace step {:?}", fields[0])))?,
            recon: num(fields[1])?,
            vel: num(fields[2])?,
            lnp: num(fields[3])?,
            post_adapt_l2: num(fields[4])?,
        })
    }
}

pub fn trace_to_text(rows: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_line());
        out.push('\n');
    }
    out
}

/// Parses trace text, skipping `#` metadata lines above the column header.
pub fn trace_from_text(text: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text.lines().skip_while(|l| l.starts_with('#'));
    match lines.next() {
        Some(TRACE_HEADER) => {}
        other => {
            return Err(Error::Config(format!(
                "trace header missing, got {other:?}"
            )))
        }
    }
    lines.map(TraceRow::parse_line).collect()
}

// ── Initialization ──

/// Model and relation-encoder parameters in one set, from one seed.
pub fn init_all_params(model_cfg: &ModelConfig, seed: u64) -> Result<ParameterSet> {
    let mut params = init_params(model_cfg, derive_seed(seed, &[hash_name("init.model")]))?;
    params.absorb(init_encoder(
        model_cfg,
        derive_seed(seed, &[hash_name("init.encoder")]),
    )?)?;
    Ok(params)
}

// ── Training loops ──

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParameterSet,
    pub trace: Vec<TraceRow>,
}

fn run_outer_loop<F>(
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    weights: &LossWeights,
    mcfg: &MetaConfig,
    outer_steps: usize,
    seed: u64,
    mut tasks_for_step: F,
    mut progress: impl FnMut(&TraceRow),
) -> Result<TrainOutcome>
where
    F: FnMut(usize) -> Result<Vec<Task>>,
{
    model_cfg.validate()?;
    mcfg.validate()?;
    weights.validate()?;
    let mut params = init_all_params(model_cfg, seed)?;
    let mut trace = Vec::with_capacity(outer_steps);
    for step in 0..outer_steps {
        let tasks = tasks_for_step(step)?;
        let episodes: Vec<FaceEpisode> = tasks
            .iter()
            .enumerate()
            .map(|(i, task)| {
                build_episode(
                    corpus,
                    task,
                    model_cfg,
                    weights,
                    mcfg,
                    derive_seed(seed, &[hash_name("episode.eps"), step as u64, i as u64]),
                )
            })
            .collect::<Result<_>>()?;
        let (next, stats) = meta_outer_step(&params, &episodes, mcfg).map_err(|e| e.at_step(step))?;
        params = next;
        let row = TraceRow {
            step,
            recon: stats.recon,
            vel: stats.vel,
            lnp: stats.lnp,
            post_adapt_l2: stats.post_l2,
        };
        progress(&row);
        trace.push(row);
    }
    Ok(TrainOutcome { params, trace })
}

/// Episodic meta-training over the train speakers.
pub fn meta_train(
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    weights: &LossWeights,
    mcfg: &MetaConfig,
    train_speakers: &[usize],
    outer_steps: usize,
    seed: u64,
    progress: impl FnMut(&TraceRow),
) -> Result<TrainOutcome> {
    run_outer_loop(
        corpus,
        model_cfg,
        weights,
        mcfg,
        outer_steps,
        seed,
        |step| sample_tasks(corpus, train_speakers, mcfg, derive_seed(seed, &[hash_name("tasks")]), step),
        progress,
    )
}

/// Joint multi-speaker baseline: same step budget and optimizer, no inner
/// adaptation. Each step fits one fresh clip per train speaker; with the
/// relation encoder on, the code conditions on the clip itself, and the
/// divergence term is identically zero because support and query coincide.
pub fn joint_train(
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    weights: &LossWeights,
    mcfg: &MetaConfig,
    train_speakers: &[usize],
    outer_steps: usize,
    seed: u64,
    progress: impl FnMut(&TraceRow),
) -> Result<TrainOutcome> {
    let joint_cfg = MetaConfig {
        inner_steps: 0,
        k_shot: 1,
        query_size: 1,
        n_way: train_speakers.len().max(1),
        ..mcfg.clone()
    };
    let pick_tasks = |step: usize| -> Result<Vec<Task>> {
        train_speakers
            .iter()
            .map(|&speaker_idx| {
                let clips = corpus.speakers[speaker_idx].clips.len();
                let mut rng = rng_for(
                    seed,
                    &[hash_name("joint.clip"), step as u64, speaker_idx as u64],
                );
                let c = rng.gen_range(0..clips);
                Ok(Task {
                    speaker_idx,
                    support: vec![c],
                    query: vec![c],
                })
            })
            .collect()
    };
    run_outer_loop(
        corpus,
        model_cfg,
        weights,
        &joint_cfg,
        outer_steps,
        seed,
        pick_tasks,
        progress,
    )
}

// ── Adaptation and evaluation ──

/// Personalizes the initialization to a held-out speaker's adapt clips.
pub fn adapt_to_speaker(
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    weights: &LossWeights,
    mcfg: &MetaConfig,
    start: &ParameterSet,
    speaker_idx: usize,
    adapt_clips: &[usize],
    adapt_steps: usize,
) -> Result<Personalized> {
    let speaker = corpus
        .speakers
        .get(speaker_idx)
        .ok_or_else(|| Error::Sizing(format!("speaker {speaker_idx} out of range")))?;
    let support = adapt_clips
        .iter()
        .map(|&c| {
            speaker
                .clips
                .get(c)
                .map(|clip| (&clip.features, &clip.motion))
                .ok_or_else(|| {
                    Error::Sizing(format!("clip {c} out of range for speaker {speaker_idx}"))
                })
        })
        .collect::<Result<Vec<_>>>()?;
    personalize(model_cfg, weights, start, &support, mcfg, adapt_steps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub per_clip: Vec<MetricReport>,
    pub mean: MetricReport,
}

/// Runs the personalized model over a speaker's evaluation clips. The
/// latent code is the support conditioning's mean (zeros when the relation
/// encoder is off), fixed across clips, so evaluation is deterministic.
pub fn evaluate_on_clips(
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    personalized: &Personalized,
    speaker_idx: usize,
    eval_clips: &[usize],
) -> Result<EvalOutcome> {
    let speaker = corpus
        .speakers
        .get(speaker_idx)
        .ok_or_else(|| Error::Sizing(format!("speaker {speaker_idx} out of range")))?;
    if eval_clips.is_empty() {
        return Err(Error::Sizing("evaluation needs at least one clip".into()));
    }
    let z = match &personalized.conditioning {
        Some(dist) => dist.mean.clone(),
        None => Tensor::zeros(&[model_cfg.latent_dim]),
    };
    let lip = model_cfg.lip_range();
    let mut per_clip = Vec::with_capacity(eval_clips.len());
    for &c in eval_clips {
        let clip = speaker.clips.get(c).ok_or_else(|| {
            Error::Sizing(format!("clip {c} out of range for speaker {speaker_idx}"))
        })?;
        let pred = forward(
            model_cfg,
            &personalized.params,
            &clip.features,
            &z,
            clip.motion.frame_rate,
        )?;
        let stats = l2_metrics(&pred.frames, &clip.motion.frames, &lip)?;
        let lip_sync = dtw_lip_sync(&pred.frames, &clip.motion.frames, &lip)?;
        per_clip.push(MetricReport::for_clip(stats, lip_sync));
    }
    let mean = MetricReport::mean(&per_clip)?;
    Ok(EvalOutcome { per_clip, mean })
}

/// Metric floor from the generator's own noise: the noiseless oracle motion
/// scored against the stored noisy motion on the same clips.
pub fn noise_floor(
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    speaker_idx: usize,
    eval_clips: &[usize],
) -> Result<MetricReport> {
    let speaker = corpus
        .speakers
        .get(speaker_idx)
        .ok_or_else(|| Error::Sizing(format!("speaker {speaker_idx} out of range")))?;
    let lip = model_cfg.lip_range();
    let mut per_clip = Vec::with_capacity(eval_clips.len());
    for &c in eval_clips {
        let clip = speaker.clips.get(c).ok_or_else(|| {
            Error::Sizing(format!("clip {c} out of range for speaker {speaker_idx}"))
        })?;
        let oracle = clip.oracle.as_ref().ok_or_else(|| {
            Error::Corpus("oracle motion unavailable; attach oracles first".into())
        })?;
        let stats = l2_metrics(&oracle.frames, &clip.motion.frames, &lip)?;
        let lip_sync = dtw_lip_sync(&oracle.frames, &clip.motion.frames, &lip)?;
        per_clip.push(MetricReport::for_clip(stats, lip_sync));
    }
    MetricReport::mean(&per_clip)
}
