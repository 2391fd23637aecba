//! Run configuration: one flat key=value namespace shared by every command.
//!
//! Precedence is defaults < config file < command-line flags. Every run
//! directory gets the merged result written back as `config.<command>.txt`,
//! so a run can be reproduced from that file alone. Unknown keys are
//! rejected rather than ignored; a typo must not silently fall back to a
//! default.

use std::env;
use std::path::{Path, PathBuf};

use metaface_core::corpus::CorpusConfig;
use metaface_core::meta::{MetaConfig, MetaOrder};
use metaface_core::model::{AdaptScope, ModelConfig};
use metaface_core::objectives::LossWeights;
use metaface_core::relation::ZSource;
use metaface_core::{Error, Result};

/// Environment variable naming the default output root.
pub const RUN_DIR_ENV: &str = "METAFACE_RUN_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub speakers: usize,
    pub clips: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub feature_dim: usize,
    pub vertex_count: usize,
    pub frame_rate: f64,
    pub noise_std: f64,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub lip_start: usize,
    pub lip_end: usize,
    pub latent_dim: usize,
    pub lora_rank: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub inner_steps: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub query_size: usize,
    pub order: MetaOrder,
    pub adapt_scope: AdaptScope,
    pub use_relation: bool,
    pub z_source: ZSource,
    pub lambda: f64,
    pub proximal_weight: f64,
    pub w_recon: f64,
    pub w_vel: f64,
    pub w_lnp: f64,
    pub outer_steps: usize,
    pub adapt_steps: usize,
    pub adapt_clips: usize,
    /// Clip budget reserved for adaptation when splitting a held-out
    /// speaker. Evaluation clips start after the budget, so runs with
    /// different `adapt_clips` (up to the budget) score on the same set.
    pub adapt_budget: usize,
    /// Held-out speaker indices; empty means "the last speaker".
    pub held_out: Vec<usize>,
    pub ablate_seeds: usize,
    pub run_dir: Option<PathBuf>,
    pub corpus_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        let model = ModelConfig::default();
        let meta = MetaConfig::default();
        let weights = LossWeights::default();
        RunConfig {
            seed: 7,
            speakers: corpus.num_speakers,
            clips: corpus.clips_per_speaker,
            t_min: corpus.t_min,
            t_max: corpus.t_max,
            feature_dim: corpus.feature_dim,
            vertex_count: corpus.vertex_count,
            frame_rate: corpus.frame_rate,
            noise_std: corpus.noise_std,
            hidden_dim: model.hidden_dim,
            num_layers: model.num_layers,
            lip_start: model.lip_start,
            lip_end: model.lip_end,
            latent_dim: model.latent_dim,
            lora_rank: model.lora_rank,
            inner_lr: meta.inner_lr,
            outer_lr: meta.outer_lr,
            inner_steps: meta.inner_steps,
            n_way: meta.n_way,
            k_shot: meta.k_shot,
            query_size: meta.query_size,
            order: meta.order,
            adapt_scope: meta.adapt_scope,
            use_relation: meta.use_relation,
            z_source: meta.z_source,
            lambda: meta.lambda,
            proximal_weight: meta.proximal_weight,
            w_recon: weights.w_recon,
            w_vel: weights.w_vel,
            w_lnp: weights.w_lnp,
            outer_steps: 200,
            adapt_steps: 500,
            adapt_clips: 4,
            adapt_budget: 4,
            held_out: Vec::new(),
            ablate_seeds: 5,
            run_dir: None,
            corpus_dir: None,
        }
    }
}

fn parse_with<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("config key {key}: cannot parse value {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!(
            "config key {key}: expected true or false, got {other:?}"
        ))),
    }
}

/// Accepts a speaker index either bare (`7`) or in id form (`spk07`).
pub fn parse_speaker_token(token: &str) -> Result<usize> {
    let t = token.trim();
    let digits = t.strip_prefix("spk").unwrap_or(t);
    digits
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse speaker {token:?}")))
}

fn parse_speaker_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            parse_speaker_token(s)
                .map_err(|_| Error::Config(format!("config key {key}: bad speaker {s:?}")))
        })
        .collect()
}

impl RunConfig {
    /// Applies one key=value assignment. Unknown keys are an error.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_with(key, value)?,
            "speakers" => self.speakers = parse_with(key, value)?,
            "clips" => self.clips = parse_with(key, value)?,
            "t_min" => self.t_min = parse_with(key, value)?,
            "t_max" => self.t_max = parse_with(key, value)?,
            "feature_dim" => self.feature_dim = parse_with(key, value)?,
            "vertex_count" => self.vertex_count = parse_with(key, value)?,
            "frame_rate" => self.frame_rate = parse_with(key, value)?,
            "noise_std" => self.noise_std = parse_with(key, value)?,
            "hidden_dim" => self.hidden_dim = parse_with(key, value)?,
            "num_layers" => self.num_layers = parse_with(key, value)?,
            "lip_start" => self.lip_start = parse_with(key, value)?,
            "lip_end" => self.lip_end = parse_with(key, value)?,
            "latent_dim" => self.latent_dim = parse_with(key, value)?,
            "lora_rank" => self.lora_rank = parse_with(key, value)?,
            "inner_lr" => self.inner_lr = parse_with(key, value)?,
            "outer_lr" => self.outer_lr = parse_with(key, value)?,
            "inner_steps" => self.inner_steps = parse_with(key, value)?,
            "n_way" => self.n_way = parse_with(key, value)?,
            "k_shot" => self.k_shot = parse_with(key, value)?,
            "query_size" => self.query_size = parse_with(key, value)?,
            "order" => self.order = MetaOrder::parse(value.trim())?,
            "adapt_scope" => self.adapt_scope = AdaptScope::parse(value.trim())?,
            "use_relation" => self.use_relation = parse_bool(key, value)?,
            "z_source" => self.z_source = ZSource::parse(value.trim())?,
            "lambda" => self.lambda = parse_with(key, value)?,
            "proximal_weight" => self.proximal_weight = parse_with(key, value)?,
            "w_recon" => self.w_recon = parse_with(key, value)?,
            "w_vel" => self.w_vel = parse_with(key, value)?,
            "w_lnp" => self.w_lnp = parse_with(key, value)?,
            "outer_steps" => self.outer_steps = parse_with(key, value)?,
            "adapt_steps" => self.adapt_steps = parse_with(key, value)?,
            "adapt_clips" => self.adapt_clips = parse_with(key, value)?,
            "adapt_budget" => self.adapt_budget = parse_with(key, value)?,
            "held_out" => self.held_out = parse_speaker_list(key, value)?,
            "ablate_seeds" => self.ablate_seeds = parse_with(key, value)?,
            "run_dir" => self.run_dir = Some(PathBuf::from(value.trim())),
            "corpus_dir" => self.corpus_dir = Some(PathBuf::from(value.trim())),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses a flat key=value file. Blank lines and `#` comments are
    /// allowed; anything else must be an assignment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key=value, got {line:?}",
                    path.display(),
                    idx + 1
                ))
            })?;
            self.apply(key.trim(), value)?;
        }
        Ok(())
    }

    /// Builds the merged config: defaults, then the file, then flag
    /// overrides in the order given (flags win).
    pub fn from_sources(file: Option<&Path>, overrides: &[(&str, String)]) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            cfg.apply_file(path)?;
        }
        for (key, value) in overrides {
            cfg.apply(key, value)?;
        }
        Ok(cfg)
    }

    /// Output root: explicit setting, else $METAFACE_RUN_DIR, else `runs`.
    pub fn resolve_run_dir(&self) -> PathBuf {
        if let Some(dir) = &self.run_dir {
            return dir.clone();
        }
        if let Some(dir) = env::var_os(RUN_DIR_ENV) {
            if !dir.is_empty() {
                return PathBuf::from(dir);
            }
        }
        PathBuf::from("runs")
    }

    /// Corpus location: explicit setting, else `<run dir>/corpus`.
    pub fn resolve_corpus_dir(&self) -> PathBuf {
        match &self.corpus_dir {
            Some(dir) => dir.clone(),
            None => self.resolve_run_dir().join("corpus"),
        }
    }

    /// Held-out speaker indices, defaulting to the last speaker.
    pub fn resolve_held_out(&self) -> Result<Vec<usize>> {
        let held = if self.held_out.is_empty() {
            vec![self.speakers - 1]
        } else {
            self.held_out.clone()
        };
        for &s in &held {
            if s >= self.speakers {
                return Err(Error::Config(format!(
                    "held-out speaker {s} out of range for {} speakers",
                    self.speakers
                )));
            }
        }
        let mut dedup = held.clone();
        dedup.sort_unstable();
        dedup.dedup();
        if dedup.len() != held.len() {
            return Err(Error::Config("held_out lists a speaker twice".into()));
        }
        if dedup.len() >= self.speakers {
            return Err(Error::Config("held_out leaves no training speakers".into()));
        }
        Ok(held)
    }

    /// Training speakers: everything not held out.
    pub fn resolve_train_speakers(&self) -> Result<Vec<usize>> {
        let held = self.resolve_held_out()?;
        Ok((0..self.speakers).filter(|s| !held.contains(s)).collect())
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            seed: self.seed,
            num_speakers: self.speakers,
            clips_per_speaker: self.clips,
            t_min: self.t_min,
            t_max: self.t_max,
            feature_dim: self.feature_dim,
            vertex_count: self.vertex_count,
            frame_rate: self.frame_rate,
            noise_std: self.noise_std,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            feature_dim: self.feature_dim,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            vertex_count: self.vertex_count,
            lip_start: self.lip_start,
            lip_end: self.lip_end,
            latent_dim: self.latent_dim,
            lora_rank: self.lora_rank,
        }
    }

    pub fn meta_config(&self) -> MetaConfig {
        MetaConfig {
            inner_lr: self.inner_lr,
            outer_lr: self.outer_lr,
            inner_steps: self.inner_steps,
            n_way: self.n_way,
            k_shot: self.k_shot,
            query_size: self.query_size,
            order: self.order,
            adapt_scope: self.adapt_scope,
            use_relation: self.use_relation,
            z_source: self.z_source,
            lambda: self.lambda,
            proximal_weight: self.proximal_weight,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            w_recon: self.w_recon,
            w_vel: self.w_vel,
            w_lnp: self.w_lnp,
        }
    }

    /// Serializes the merged config with resolved paths, one key per line.
    /// The output parses back via [`RunConfig::apply_file`].
    pub fn to_text(&self) -> String {
        let held = if self.held_out.is_empty() {
            vec![self.speakers.saturating_sub(1)]
        } else {
            self.held_out.clone()
        };
        let held: Vec<String> = held.iter().map(|s| s.to_string()).collect();
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        push("seed", self.seed.to_string());
        push("speakers", self.speakers.to_string());
        push("clips", self.clips.to_string());
        push("t_min", self.t_min.to_string());
        push("t_max", self.t_max.to_string());
        push("feature_dim", self.feature_dim.to_string());
        push("vertex_count", self.vertex_count.to_string());
        push("frame_rate", self.frame_rate.to_string());
        push("noise_std", self.noise_std.to_string());
        push("hidden_dim", self.hidden_dim.to_string());
        push("num_layers", self.num_layers.to_string());
        push("lip_start", self.lip_start.to_string());
        push("lip_end", self.lip_end.to_string());
        push("latent_dim", self.latent_dim.to_string());
        push("lora_rank", self.lora_rank.to_string());
        push("inner_lr", self.inner_lr.to_string());
        push("outer_lr", self.outer_lr.to_string());
        push("inner_steps", self.inner_steps.to_string());
        push("n_way", self.n_way.to_string());
        push("k_shot", self.k_shot.to_string());
        push("query_size", self.query_size.to_string());
        push("order", self.order.as_str().to_string());
        push("adapt_scope", self.adapt_scope.as_str().to_string());
        push("use_relation", self.use_relation.to_string());
        push("z_source", self.z_source.as_str().to_string());
        push("lambda", self.lambda.to_string());
        push("proximal_weight", self.proximal_weight.to_string());
        push("w_recon", self.w_recon.to_string());
        push("w_vel", self.w_vel.to_string());
        push("w_lnp", self.w_lnp.to_string());
        push("outer_steps", self.outer_steps.to_string());
        push("adapt_steps", self.adapt_steps.to_string());
        push("adapt_clips", self.adapt_clips.to_string());
        push("adapt_budget", self.adapt_budget.to_string());
        push("held_out", held.join(","));
        push("ablate_seeds", self.ablate_seeds.to_string());
        push("run_dir", self.resolve_run_dir().display().to_string());
        push("corpus_dir", self.resolve_corpus_dir().display().to_string());
        out
    }
}
