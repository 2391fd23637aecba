//! Synthetic multi-speaker corpus with known style structure.
//!
//! Every speaker shares one base feature-to-motion mixing matrix; a speaker
//! is a low-rank perturbation of it plus scalar style knobs (amplitude, a
//! causal phase lag, feature smoothing). The generator is a pure function
//! of its config, so corpora regenerate bit-identically from the manifest,
//! and noiseless oracle motion is available for noise-floor estimates.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::codec;
use crate::error::{Error, Result};
use crate::model::{FeatureClip, MotionClip};
use crate::seed::{hash_name, normal_vec, rng_for};
use rand::Rng;

/// Entry scale of the shared base mixing matrix.
const BASE_STD: f64 = 0.2;
/// Entry scale of each per-speaker low-rank factor.
const FACTOR_STD: f64 = 0.35;
/// Rank of the per-speaker mixing perturbation.
const STYLE_RANK: usize = 2;

// ── Config and manifest ──

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub num_speakers: usize,
    pub clips_per_speaker: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub feature_dim: usize,
    pub vertex_count: usize,
    pub frame_rate: f64,
    pub noise_std: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 0,
            num_speakers: 12,
            clips_per_speaker: 10,
            t_min: 24,
            t_max: 48,
            feature_dim: 16,
            vertex_count: 64,
            frame_rate: 25.0,
            noise_std: 0.01,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers == 0 || self.clips_per_speaker == 0 {
            return Err(Error::Config("corpus needs speakers and clips".into()));
        }
        if self.t_min < 2 || self.t_max < self.t_min {
            return Err(Error::Config(format!(
                "frame range {}..={} invalid (need 2 <= t_min <= t_max)",
                self.t_min, self.t_max
            )));
        }
        if self.feature_dim == 0 || self.vertex_count == 0 {
            return Err(Error::Config("corpus dims must be >= 1".into()));
        }
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return Err(Error::Config(format!("bad frame rate {}", self.frame_rate)));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config(format!("bad noise_std {}", self.noise_std)));
        }
        Ok(())
    }

    fn motion_dim(&self) -> usize {
        3 * self.vertex_count
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeakerEntry {
    pub id: String,
    pub clips: usize,
}

/// On-disk description of a corpus directory. Styles are not persisted:
/// they re-derive from the seed, which keeps the manifest small and makes
/// tampering detectable by regeneration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub version: u32,
    #[serde(flatten)]
    pub config: CorpusConfig,
    pub speakers: Vec<SpeakerEntry>,
}

pub const MANIFEST_VERSION: u32 = 1;

// ── Styles ──

/// Per-speaker generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerStyle {
    pub speaker_id: String,
    /// Feature-to-motion map, `[d_a, 3L]`: base plus rank-2 perturbation.
    pub mixing: Tensor,
    /// Output gain in [0.5, 2].
    pub amplitude: f64,
    /// Motion at frame t responds to features at frame t - lag; 0..=3.
    pub phase_lag: usize,
    /// One-pole feature smoothing coefficient in (0, 1).
    pub smoothing: f64,
}

pub fn speaker_id(index: usize) -> String {
    format!("spk{index:02}")
}

fn base_mixing(cfg: &CorpusConfig) -> Tensor {
    let mut rng = rng_for(cfg.seed, &[hash_name("corpus.base_mixing")]);
    let data = normal_vec(&mut rng, cfg.feature_dim * cfg.motion_dim());
    Tensor::new(
        vec![cfg.feature_dim, cfg.motion_dim()],
        data.into_iter().map(|v| v * BASE_STD).collect(),
    )
    .expect("mixing shape")
}

pub fn derive_style(cfg: &CorpusConfig, speaker_idx: usize, base: &Tensor) -> SpeakerStyle {
    let mut rng = rng_for(cfg.seed, &[hash_name("corpus.style"), speaker_idx as u64]);
    let u = normal_vec(&mut rng, cfg.feature_dim * STYLE_RANK);
    let v = normal_vec(&mut rng, STYLE_RANK * cfg.motion_dim());
    let u = Tensor::new(
        vec![cfg.feature_dim, STYLE_RANK],
        u.into_iter().map(|x| x * FACTOR_STD).collect(),
    )
    .expect("factor shape");
    let v = Tensor::new(
        vec![STYLE_RANK, cfg.motion_dim()],
        v.into_iter().map(|x| x * FACTOR_STD).collect(),
    )
    .expect("factor shape");
    let mixing = base
        .add(&u.matmul(&v).expect("factor product"))
        .expect("same shape");
    SpeakerStyle {
        speaker_id: speaker_id(speaker_idx),
        mixing,
        amplitude: rng.gen_range(0.5..=2.0),
        phase_lag: rng.gen_range(0..=3usize),
        smoothing: rng.gen_range(0.2..0.8),
    }
}

pub fn derive_styles(cfg: &CorpusConfig) -> Vec<SpeakerStyle> {
    let base = base_mixing(cfg);
    (0..cfg.num_speakers)
        .map(|s| derive_style(cfg, s, &base))
        .collect()
}

// ── Clip generation ──

#[derive(Debug, Clone, PartialEq)]
pub struct ClipPair {
    pub features: FeatureClip,
    pub motion: MotionClip,
    /// Noiseless target; present only on generated (not loaded) corpora.
    pub oracle: Option<MotionClip>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Speaker {
    pub id: String,
    pub clips: Vec<ClipPair>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub speakers: Vec<Speaker>,
}

fn generate_clip(cfg: &CorpusConfig, style: &SpeakerStyle, speaker_idx: usize, clip_idx: usize) -> ClipPair {
    let mut rng = rng_for(
        cfg.seed,
        &[hash_name("corpus.clip"), speaker_idx as u64, clip_idx as u64],
    );
    let frames = rng.gen_range(cfg.t_min..=cfg.t_max);
    let d_a = cfg.feature_dim;
    let m_dim = cfg.motion_dim();

    // One-pole smoothed white noise, rescaled to unit stationary variance.
    let s = style.smoothing;
    let gain = ((1.0 + s) / (1.0 - s)).sqrt();
    let driver = normal_vec(&mut rng, frames * d_a);
    let mut features = vec![0.0f64; frames * d_a];
    for d in 0..d_a {
        let mut state = 0.0;
        for t in 0..frames {
            state = s * state + (1.0 - s) * driver[t * d_a + d];
            features[t * d_a + d] = gain * state;
        }
    }

    let noise = normal_vec(&mut rng, frames * m_dim);
    let mut motion = vec![0.0f64; frames * m_dim];
    let mut oracle = vec![0.0f64; frames * m_dim];
    for t in 0..frames {
        for j in 0..m_dim {
            let mut mixed = 0.0;
            if t >= style.phase_lag {
                let src = t - style.phase_lag;
                for d in 0..d_a {
                    mixed += features[src * d_a + d] * style.mixing.data()[d * m_dim + j];
                }
            }
            let clean = style.amplitude * mixed.tanh();
            oracle[t * m_dim + j] = clean;
            motion[t * m_dim + j] = clean + cfg.noise_std * noise[t * m_dim + j];
        }
    }

    let features = FeatureClip::new(Tensor::new(vec![frames, d_a], features).expect("shape"))
        .expect("finite features");
    let motion = MotionClip::new(
        Tensor::new(vec![frames, cfg.vertex_count, 3], motion).expect("shape"),
        cfg.frame_rate,
    )
    .expect("finite motion");
    let oracle = MotionClip::new(
        Tensor::new(vec![frames, cfg.vertex_count, 3], oracle).expect("shape"),
        cfg.frame_rate,
    )
    .expect("finite oracle");
    ClipPair {
        features,
        motion,
        oracle: Some(oracle),
    }
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let styles = derive_styles(cfg);
    let speakers = styles
        .iter()
        .enumerate()
        .map(|(s, style)| Speaker {
            id: style.speaker_id.clone(),
            clips: (0..cfg.clips_per_speaker)
                .map(|c| generate_clip(cfg, style, s, c))
                .collect(),
        })
        .collect();
    Ok(Corpus {
        config: cfg.clone(),
        speakers,
    })
}

impl Corpus {
    pub fn manifest(&self) -> CorpusManifest {
        CorpusManifest {
            version: MANIFEST_VERSION,
            config: self.config.clone(),
            speakers: self
                .speakers
                .iter()
                .map(|s| SpeakerEntry {
                    id: s.id.clone(),
                    clips: s.clips.len(),
                })
                .collect(),
        }
    }

    pub fn speaker_index(&self, id: &str) -> Result<usize> {
        self.speakers
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| Error::Corpus(format!("no speaker named {id:?}")))
    }

    /// Reattaches noiseless oracle motion by regenerating from the config,
    /// verifying the stored clips match the regeneration bit for bit.
    pub fn attach_oracles(&mut self) -> Result<()> {
        let fresh = generate_corpus(&self.config)?;
        if fresh.speakers.len() != self.speakers.len() {
            return Err(Error::Corpus("speaker count drifted from config".into()));
        }
        for (mine, theirs) in self.speakers.iter_mut().zip(fresh.speakers) {
            if mine.clips.len() != theirs.clips.len() {
                return Err(Error::Corpus(format!(
                    "clip count for {} drifted from config",
                    mine.id
                )));
            }
            for (mc, tc) in mine.clips.iter_mut().zip(theirs.clips) {
                if mc.features.frames.data() != tc.features.frames.data()
                    || mc.motion.frames.data() != tc.motion.frames.data()
                {
                    return Err(Error::Corpus(format!(
                        "stored clip for {} does not match its regeneration; \
                         corpus was edited or built by a different version",
                        mine.id
                    )));
                }
                mc.oracle = tc.oracle;
            }
        }
        Ok(())
    }
}

// ── Disk layout ──

fn clip_path(dir: &Path, speaker_id: &str, clip_idx: usize) -> std::path::PathBuf {
    dir.join(speaker_id).join(format!("clip{clip_idx:03}.bin"))
}

/// Writes `manifest.json` plus one directory of clip files per speaker.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = corpus.manifest();
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    for speaker in &corpus.speakers {
        fs::create_dir_all(dir.join(&speaker.id))?;
        for (c, clip) in speaker.clips.iter().enumerate() {
            let file = fs::File::create(clip_path(dir, &speaker.id, c))?;
            let mut w = BufWriter::new(file);
            codec::write_clip(&mut w, &clip.features, &clip.motion)?;
            w.flush()?;
        }
    }
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Corpus(format!("cannot read {}: {e}", path.display())))?;
    let manifest: CorpusManifest = serde_json::from_str(&text)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Corpus(format!(
            "manifest version {} unsupported (want {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    manifest.config.validate()?;
    Ok(manifest)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest = load_manifest(dir)?;
    let mut speakers = Vec::with_capacity(manifest.speakers.len());
    for entry in &manifest.speakers {
        let mut clips = Vec::with_capacity(entry.clips);
        for c in 0..entry.clips {
            let path = clip_path(dir, &entry.id, c);
            let file = fs::File::open(&path)
                .map_err(|e| Error::Corpus(format!("cannot open {}: {e}", path.display())))?;
            let (features, motion) = codec::read_clip(&mut BufReader::new(file))?;
            if motion.vertex_count() != manifest.config.vertex_count
                || features.feature_dim() != manifest.config.feature_dim
            {
                return Err(Error::Corpus(format!(
                    "clip {} dims disagree with the manifest",
                    path.display()
                )));
            }
            clips.push(ClipPair {
                features,
                motion,
                oracle: None,
            });
        }
        speakers.push(Speaker {
            id: entry.id.clone(),
            clips,
        });
    }
    Ok(Corpus {
        config: manifest.config,
        speakers,
    })
}

// ── Splits ──

#[derive(Debug, Clone, PartialEq)]
pub struct HeldOutSpeaker {
    pub speaker_idx: usize,
    pub adapt_clips: Vec<usize>,
    pub eval_clips: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train_speakers: Vec<usize>,
    pub held_out: Vec<HeldOutSpeaker>,
}

fn clip_permutation(corpus: &Corpus, speaker_idx: usize) -> Vec<usize> {
    let n = corpus.speakers[speaker_idx].clips.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = rng_for(
        corpus.config.seed,
        &[hash_name("corpus.split"), speaker_idx as u64],
    );
    // Fisher-Yates, deterministic per (seed, speaker).
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

/// Splits held-out speakers into adaptation and evaluation clips; all other
/// speakers train. Adaptation pools with different sizes are nested (both
/// draw from the front of one per-speaker permutation), and the evaluation
/// set is everything past `max_adapt_count`, so evaluation clips stay fixed
/// when comparing adaptation budgets up to that bound.
pub fn split_with_budget(
    corpus: &Corpus,
    held_out_speakers: &[usize],
    adapt_clip_count: usize,
    max_adapt_count: usize,
) -> Result<Split> {
    if adapt_clip_count == 0 || adapt_clip_count > max_adapt_count {
        return Err(Error::Sizing(format!(
            "adapt_clip_count {adapt_clip_count} must be in 1..={max_adapt_count}"
        )));
    }
    let mut seen = vec![false; corpus.speakers.len()];
    for &s in held_out_speakers {
        if s >= corpus.speakers.len() {
            return Err(Error::Sizing(format!(
                "held-out speaker {s} out of range (corpus has {})",
                corpus.speakers.len()
            )));
        }
        if std::mem::replace(&mut seen[s], true) {
            return Err(Error::Sizing(format!("held-out speaker {s} listed twice")));
        }
    }
    let mut held_out = Vec::with_capacity(held_out_speakers.len());
    for &s in held_out_speakers {
        let clips = corpus.speakers[s].clips.len();
        if max_adapt_count >= clips {
            return Err(Error::Sizing(format!(
                "speaker {s} has {clips} clips; cannot reserve {max_adapt_count} for adaptation \
                 and still evaluate"
            )));
        }
        let perm = clip_permutation(corpus, s);
        held_out.push(HeldOutSpeaker {
            speaker_idx: s,
            adapt_clips: perm[..adapt_clip_count].to_vec(),
            eval_clips: perm[max_adapt_count..].to_vec(),
        });
    }
    let train_speakers = (0..corpus.speakers.len()).filter(|s| !seen[*s]).collect();
    Ok(Split {
        train_speakers,
        held_out,
    })
}

pub fn split(corpus: &Corpus, held_out_speakers: &[usize], adapt_clip_count: usize) -> Result<Split> {
    split_with_budget(corpus, held_out_speakers, adapt_clip_count, adapt_clip_count)
}
