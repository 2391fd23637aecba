//! Implementations of the workbench subcommands.
//!
//! Every command acquires the run-dir lock, writes the merged config back
//! as `config.<command>.txt`, and keeps its outputs byte-deterministic for
//! a fixed config and corpus. Progress goes to stdout; artifacts go to the
//! run directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use metaface_core::autodiff::Tensor;
use metaface_core::corpus::{
    generate_corpus, load_corpus, save_corpus, split_with_budget, Corpus,
};
use metaface_core::meta::{MetaConfig, Personalized};
use metaface_core::model::AdaptScope;
use metaface_core::objectives::{dtw_lip_sync, l2_metrics, MetricReport};
use metaface_core::seed::{derive_seed, hash_bytes, hash_name};
use metaface_core::trainer::{
    adapt_to_speaker, evaluate_on_clips, init_all_params, joint_train, meta_train, noise_floor,
    trace_from_text, EvalOutcome, TraceRow, TrainOutcome, TRACE_HEADER,
};
use metaface_core::{Error, Result};

use crate::checkpoint::Checkpoint;
use crate::config::{parse_speaker_token, RunConfig};
use crate::lock::RunLock;

// ── Shared plumbing ──

fn write_config_snapshot(run_dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(run_dir)?;
    let path = run_dir.join(format!("config.{command}.txt"));
    fs::write(&path, cfg.to_text())?;
    Ok(())
}

/// Loads the corpus and insists the config agrees with it on every key
/// that shapes the model or the split protocol.
fn load_corpus_checked(cfg: &RunConfig, corpus_dir: &Path) -> Result<Corpus> {
    let corpus = load_corpus(corpus_dir)?;
    let stored = &corpus.config;
    let pairs = [
        ("speakers", stored.num_speakers, cfg.speakers),
        ("clips", stored.clips_per_speaker, cfg.clips),
        ("feature_dim", stored.feature_dim, cfg.feature_dim),
        ("vertex_count", stored.vertex_count, cfg.vertex_count),
    ];
    for (key, in_corpus, in_config) in pairs {
        if in_corpus != in_config {
            return Err(Error::Config(format!(
                "config {key}={in_config} does not match corpus at {} ({key}={in_corpus})",
                corpus_dir.display()
            )));
        }
    }
    Ok(corpus)
}

fn manifest_hash(corpus_dir: &Path) -> Result<u64> {
    let bytes = fs::read(corpus_dir.join("manifest.json"))?;
    Ok(hash_bytes(&bytes))
}

fn default_checkpoint_path(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoint.bin")
}

/// Picks the held-out speaker to work on: the flag value if given, else
/// the first held-out speaker. The speaker must be in the held-out set.
fn resolve_target_speaker(
    cfg: &RunConfig,
    corpus: &Corpus,
    flag: Option<&str>,
) -> Result<(usize, Vec<usize>)> {
    let held = cfg.resolve_held_out()?;
    let idx = match flag {
        None => held[0],
        Some(token) => {
            let idx = parse_speaker_token(token)?;
            if idx >= corpus.speakers.len() {
                return Err(Error::Config(format!(
                    "speaker {token} out of range (corpus has {})",
                    corpus.speakers.len()
                )));
            }
            idx
        }
    };
    if !held.contains(&idx) {
        return Err(Error::Config(format!(
            "speaker {} is not held out (held-out speakers: {})",
            idx,
            held.iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(",")
        )));
    }
    Ok((idx, held))
}

fn file_len(path: &Path) -> Result<u64> {
    Ok(fs::metadata(path)?.len())
}

// ── gen-data ──

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    if cfg.speakers < 2 {
        return Err(Error::Sizing(format!(
            "corpus needs at least 2 speakers (got {}); meta-training holds one out \
             and still needs a training pool",
            cfg.speakers
        )));
    }
    let run_dir = cfg.resolve_run_dir();
    let _lock = RunLock::acquire(&run_dir)?;
    write_config_snapshot(&run_dir, "gen-data", cfg)?;

    let corpus_dir = cfg.resolve_corpus_dir();
    let corpus_cfg = cfg.corpus_config();
    corpus_cfg.validate()?;
    let corpus = generate_corpus(&corpus_cfg)?;
    save_corpus(&corpus, &corpus_dir).map_err(|e| {
        Error::Corpus(format!(
            "cannot write corpus to {}: {e}",
            corpus_dir.display()
        ))
    })?;
    let hash = manifest_hash(&corpus_dir)?;
    let clip_total: usize = corpus.speakers.iter().map(|s| s.clips.len()).sum();
    println!(
        "corpus dir={} speakers={} clips={}",
        corpus_dir.display(),
        corpus.speakers.len(),
        clip_total
    );
    println!("manifest hash={hash:016x}");
    Ok(())
}

// ── meta-train ──

/// Writes the trace header, then one row per completed outer step. Rows are
/// flushed as they land so an aborted run keeps everything it finished.
struct TraceWriter {
    file: fs::File,
    failure: Option<std::io::Error>,
}

impl TraceWriter {
    fn create(path: &Path, order_label: &str) -> Result<TraceWriter> {
        let mut file = fs::File::create(path)?;
        write!(file, "# order={order_label}\n{TRACE_HEADER}\n")?;
        file.flush()?;
        Ok(TraceWriter {
            file,
            failure: None,
        })
    }

    fn append(&mut self, row: &TraceRow) {
        if self.failure.is_some() {
            return;
        }
        let result = writeln!(self.file, "{}", row.to_line()).and_then(|_| self.file.flush());
        if let Err(e) = result {
            self.failure = Some(e);
        }
    }

    fn finish(self) -> Result<()> {
        match self.failure {
            None => Ok(()),
            Some(e) => Err(Error::Io(e)),
        }
    }
}

pub fn run_meta_train(cfg: &RunConfig) -> Result<()> {
    let run_dir = cfg.resolve_run_dir();
    let _lock = RunLock::acquire(&run_dir)?;
    write_config_snapshot(&run_dir, "meta-train", cfg)?;

    let corpus_dir = cfg.resolve_corpus_dir();
    let corpus = load_corpus_checked(cfg, &corpus_dir)?;
    let model_cfg = cfg.model_config();
    model_cfg.validate()?;
    let mcfg = cfg.meta_config();
    mcfg.validate()?;
    let weights = cfg.loss_weights();
    weights.validate()?;
    let train_speakers = cfg.resolve_train_speakers()?;

    let trace_path = run_dir.join("trace.tsv");
    let mut trace = TraceWriter::create(&trace_path, mcfg.order.as_str())?;
    println!(
        "meta-train steps={} order={} speakers={} corpus={:016x}",
        cfg.outer_steps,
        mcfg.order.as_str(),
        train_speakers.len(),
        manifest_hash(&corpus_dir)?
    );
    let stride = (cfg.outer_steps / 8).max(1);
    let outcome: TrainOutcome = meta_train(
        &corpus,
        &model_cfg,
        &weights,
        &mcfg,
        &train_speakers,
        cfg.outer_steps,
        cfg.seed,
        |row| {
            trace.append(row);
            if row.step % stride == 0 || row.step + 1 == cfg.outer_steps {
                println!(
                    "step {} recon={:.6e} vel={:.6e} lnp={:.6e} post_l2={:.6e}",
                    row.step, row.recon, row.vel, row.lnp, row.post_adapt_l2
                );
            }
        },
    )?;
    trace.finish()?;

    let ckpt = Checkpoint::new(outcome.params, cfg.outer_steps as u64, cfg.seed);
    let ckpt_path = default_checkpoint_path(&run_dir);
    ckpt.save(&ckpt_path)?;
    println!(
        "checkpoint {} params={} hash={:016x}",
        ckpt_path.display(),
        ckpt.params.len(),
        ckpt.params.content_hash()
    );
    Ok(())
}

// ── adapt ──

pub struct AdaptArgs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub speaker: Option<&'a str>,
    pub out: Option<&'a Path>,
}

pub fn run_adapt(cfg: &RunConfig, args: &AdaptArgs) -> Result<()> {
    let run_dir = cfg.resolve_run_dir();
    let _lock = RunLock::acquire(&run_dir)?;
    write_config_snapshot(&run_dir, "adapt", cfg)?;

    let corpus_dir = cfg.resolve_corpus_dir();
    let corpus = load_corpus_checked(cfg, &corpus_dir)?;
    let model_cfg = cfg.model_config();
    model_cfg.validate()?;
    let mcfg = cfg.meta_config();
    mcfg.validate()?;

    let ckpt_path = args
        .checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_checkpoint_path(&run_dir));
    let ckpt = Checkpoint::load(&ckpt_path)?;
    ckpt.check_config_hash(model_cfg.hash(), &ckpt_path)?;

    let (speaker_idx, held) = resolve_target_speaker(cfg, &corpus, args.speaker)?;
    let budget = cfg.adapt_budget.max(cfg.adapt_clips);
    let split = split_with_budget(&corpus, &held, cfg.adapt_clips, budget)?;
    let slot = split
        .held_out
        .iter()
        .find(|h| h.speaker_idx == speaker_idx)
        .expect("target speaker is in the held-out set");

    let personalized = adapt_to_speaker(
        &corpus,
        &model_cfg,
        &cfg.loss_weights(),
        &mcfg,
        &ckpt.params,
        speaker_idx,
        &slot.adapt_clips,
        cfg.adapt_steps,
    )?;

    let scope = mcfg.adapt_scope;
    let trained = Checkpoint::new(personalized.params, cfg.adapt_steps as u64, cfg.seed);
    let delta = trained.delta(
        |name| scope.trains(name),
        personalized.conditioning,
        cfg.adapt_steps as u64,
    )?;
    let out_path = args
        .out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dir.join(format!("adapted-spk{speaker_idx:02}.bin")));
    delta.save(&out_path)?;

    let delta_len = file_len(&out_path)?;
    let full_len = file_len(&ckpt_path)?;
    println!(
        "adapted speaker={} clips={} steps={} scope={}",
        speaker_idx,
        slot.adapt_clips.len(),
        cfg.adapt_steps,
        scope.as_str()
    );
    println!(
        "delta {} bytes={} full_bytes={} ratio={:.4}",
        out_path.display(),
        delta_len,
        full_len,
        delta_len as f64 / full_len as f64
    );
    Ok(())
}

// ── eval ──

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalBaseline {
    /// Evaluate the checkpoint (plus optional delta).
    None,
    /// Predict all-zero motion; scores the raw magnitude of the data.
    Zero,
    /// Score the generator's noiseless motion; the attainable floor.
    Oracle,
}

impl EvalBaseline {
    pub fn parse(text: &str) -> Result<EvalBaseline> {
        match text {
            "none" => Ok(EvalBaseline::None),
            "zero" => Ok(EvalBaseline::Zero),
            "oracle" => Ok(EvalBaseline::Oracle),
            other => Err(Error::Config(format!(
                "unknown baseline {other:?} (expected none, zero, or oracle)"
            ))),
        }
    }
}

pub struct EvalArgs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub delta: Option<&'a Path>,
    pub speaker: Option<&'a str>,
    pub baseline: EvalBaseline,
}

fn zeroed_like(model_cfg: &metaface_core::model::ModelConfig) -> Result<Personalized> {
    let mut params = init_all_params(model_cfg, 0)?;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let shape = params.get(&name)?.shape().to_vec();
        params.update(&name, Tensor::zeros(&shape))?;
    }
    Ok(Personalized {
        params,
        conditioning: None,
    })
}

/// Scores the stored noisy motion against the noiseless oracle, clip by
/// clip. This is what a perfect predictor of the clean signal would get.
fn oracle_eval(
    corpus: &Corpus,
    model_cfg: &metaface_core::model::ModelConfig,
    speaker_idx: usize,
    eval_clips: &[usize],
) -> Result<EvalOutcome> {
    let speaker = &corpus.speakers[speaker_idx];
    let lip = model_cfg.lip_range();
    let mut per_clip = Vec::with_capacity(eval_clips.len());
    for &c in eval_clips {
        let clip = &speaker.clips[c];
        let oracle = clip.oracle.as_ref().ok_or_else(|| {
            Error::Corpus("oracle motion unavailable; attach oracles first".into())
        })?;
        let stats = l2_metrics(&oracle.frames, &clip.motion.frames, &lip)?;
        let lip_sync = dtw_lip_sync(&oracle.frames, &clip.motion.frames, &lip)?;
        per_clip.push(MetricReport::for_clip(stats, lip_sync));
    }
    let mean = MetricReport::mean(&per_clip)?;
    Ok(EvalOutcome { per_clip, mean })
}

pub fn run_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let run_dir = cfg.resolve_run_dir();
    let _lock = RunLock::acquire(&run_dir)?;
    write_config_snapshot(&run_dir, "eval", cfg)?;

    let corpus_dir = cfg.resolve_corpus_dir();
    let mut corpus = load_corpus_checked(cfg, &corpus_dir)?;
    corpus.attach_oracles()?;
    let model_cfg = cfg.model_config();
    model_cfg.validate()?;
    let mcfg = cfg.meta_config();
    mcfg.validate()?;

    let (speaker_idx, held) = resolve_target_speaker(cfg, &corpus, args.speaker)?;
    let budget = cfg.adapt_budget.max(cfg.adapt_clips);
    let split = split_with_budget(&corpus, &held, cfg.adapt_clips, budget)?;
    let slot = split
        .held_out
        .iter()
        .find(|h| h.speaker_idx == speaker_idx)
        .expect("target speaker is in the held-out set");

    let outcome = match args.baseline {
        EvalBaseline::Oracle => oracle_eval(&corpus, &model_cfg, speaker_idx, &slot.eval_clips)?,
        EvalBaseline::Zero => {
            let zero = zeroed_like(&model_cfg)?;
            evaluate_on_clips(&corpus, &model_cfg, &zero, speaker_idx, &slot.eval_clips)?
        }
        EvalBaseline::None => {
            let ckpt_path = args
                .checkpoint
                .map(Path::to_path_buf)
                .unwrap_or_else(|| default_checkpoint_path(&run_dir));
            let mut ckpt = Checkpoint::load(&ckpt_path)?;
            ckpt.check_config_hash(model_cfg.hash(), &ckpt_path)?;
            let personalized = match args.delta {
                Some(delta_path) => {
                    let delta = Checkpoint::load(delta_path)?;
                    ckpt.apply_delta(&delta, delta_path)?;
                    Personalized {
                        params: ckpt.params,
                        conditioning: ckpt.conditioning,
                    }
                }
                // No delta: weights stay at the initialization, but the
                // relation encoder still conditions on the adapt clips
                // (zero personalization steps).
                None => adapt_to_speaker(
                    &corpus,
                    &model_cfg,
                    &cfg.loss_weights(),
                    &mcfg,
                    &ckpt.params,
                    speaker_idx,
                    &slot.adapt_clips,
                    0,
                )?,
            };
            evaluate_on_clips(&corpus, &model_cfg, &personalized, speaker_idx, &slot.eval_clips)?
        }
    };
    let floor = noise_floor(&corpus, &model_cfg, speaker_idx, &slot.eval_clips)?;

    let speaker_id = &corpus.speakers[speaker_idx].id;
    let eval_dir = run_dir.join("eval").join(speaker_id);
    fs::create_dir_all(&eval_dir)?;
    for (slot_idx, report) in slot.eval_clips.iter().zip(&outcome.per_clip) {
        fs::write(
            eval_dir.join(format!("clip{slot_idx:03}.txt")),
            report.to_text(),
        )?;
    }
    fs::write(eval_dir.join("aggregate.txt"), outcome.mean.to_text())?;
    fs::write(eval_dir.join("noise_floor.txt"), floor.to_text())?;

    println!(
        "eval speaker={speaker_id} clips={} baseline={:?}",
        slot.eval_clips.len(),
        args.baseline
    );
    print!("{}", outcome.mean.to_text());
    println!("noise floor l2_face={:.16e}", floor.l2_face);
    println!("reports in {}", eval_dir.display());
    Ok(())
}

// ── ablate ──

const ABLATION_HEADER: &str = "regime,relation,scope,clips,seed,l2_face,l2_lip,lip_max,lip_sync,status";

struct CellKey {
    regime: &'static str,
    relation: bool,
    scope: AdaptScope,
    clips: usize,
}

impl CellKey {
    /// The four identifying columns, with a trailing comma so callers
    /// append the seed label and metric body directly.
    fn prefix(&self) -> String {
        format!(
            "{},{},{},{},",
            self.regime,
            if self.relation { "on" } else { "off" },
            self.scope.as_str(),
            self.clips
        )
    }
}

fn csv_metrics(report: &MetricReport) -> String {
    format!(
        "{:.16e},{:.16e},{:.16e},{:.16e},ok",
        report.l2_face, report.l2_lip, report.lip_max, report.lip_sync
    )
}

/// Trains one ablation cell and scores every held-out speaker, returning
/// the mean across speakers.
fn ablate_cell_eval(
    cfg: &RunConfig,
    corpus: &Corpus,
    start: &metaface_core::params::ParameterSet,
    mcfg: &MetaConfig,
    held: &[usize],
    clips: usize,
) -> Result<MetricReport> {
    let model_cfg = cfg.model_config();
    let budget = cfg.adapt_budget.max(cfg.adapt_clips);
    let split = split_with_budget(corpus, held, budget, budget)?;
    let mut reports = Vec::new();
    for slot in &split.held_out {
        // Average over the budget's disjoint same-size pools, so a small
        // clip count measures the budget level, not one subset's luck.
        for pool in slot.adapt_clips.chunks(clips) {
            if pool.len() != clips {
                continue;
            }
            let personalized = adapt_to_speaker(
                corpus,
                &model_cfg,
                &cfg.loss_weights(),
                mcfg,
                start,
                slot.speaker_idx,
                pool,
                cfg.adapt_steps,
            )?;
            let outcome = evaluate_on_clips(
                corpus,
                &model_cfg,
                &personalized,
                slot.speaker_idx,
                &slot.eval_clips,
            )?;
            reports.push(outcome.mean);
        }
    }
    MetricReport::mean(&reports)
}

pub fn run_ablate(cfg: &RunConfig) -> Result<()> {
    let run_dir = cfg.resolve_run_dir();
    let _lock = RunLock::acquire(&run_dir)?;
    write_config_snapshot(&run_dir, "ablate", cfg)?;

    let corpus_dir = cfg.resolve_corpus_dir();
    let corpus = load_corpus_checked(cfg, &corpus_dir)?;
    cfg.model_config().validate()?;
    cfg.meta_config().validate()?;
    let held = cfg.resolve_held_out()?;
    let train_speakers = cfg.resolve_train_speakers()?;

    let csv_path = run_dir.join("ablation.csv");
    let mut csv = fs::File::create(&csv_path)?;
    writeln!(csv, "{ABLATION_HEADER}")?;
    csv.flush()?;

    // Rows per training cell: both adaptation scopes at the default clip
    // count, plus the clip-count sweep on the full configuration.
    let regimes: [(&'static str, bool); 4] = [
        ("meta", true),
        ("meta", false),
        ("joint", true),
        ("joint", false),
    ];
    let budget = cfg.adapt_budget.max(cfg.adapt_clips);

    let mut results: Vec<(String, Option<MetricReport>)> = Vec::new();
    for seed_idx in 0..cfg.ablate_seeds {
        let seed = derive_seed(cfg.seed, &[hash_name("ablate.seed"), seed_idx as u64]);
        for (regime, relation) in regimes {
            let mcfg = MetaConfig {
                use_relation: relation,
                ..cfg.meta_config()
            };
            let trained: Result<TrainOutcome> = if regime == "meta" {
                meta_train(
                    &corpus,
                    &cfg.model_config(),
                    &cfg.loss_weights(),
                    &mcfg,
                    &train_speakers,
                    cfg.outer_steps,
                    seed,
                    |_| {},
                )
            } else {
                joint_train(
                    &corpus,
                    &cfg.model_config(),
                    &cfg.loss_weights(),
                    &mcfg,
                    &train_speakers,
                    cfg.outer_steps,
                    seed,
                    |_| {},
                )
            };

            let mut cells: Vec<CellKey> = vec![
                CellKey {
                    regime,
                    relation,
                    scope: AdaptScope::LoraOnly,
                    clips: cfg.adapt_clips,
                },
                CellKey {
                    regime,
                    relation,
                    scope: AdaptScope::All,
                    clips: cfg.adapt_clips,
                },
            ];
            if regime == "meta" && relation {
                for clips in 1..=budget {
                    if clips != cfg.adapt_clips {
                        cells.push(CellKey {
                            regime,
                            relation,
                            scope: AdaptScope::LoraOnly,
                            clips,
                        });
                    }
                }
            }

            for cell in cells {
                let outcome = match &trained {
                    Err(e) => Err(Error::Config(format!("training failed: {e}"))),
                    Ok(t) => {
                        let adapt_cfg = MetaConfig {
                            adapt_scope: cell.scope,
                            ..mcfg.clone()
                        };
                        ablate_cell_eval(cfg, &corpus, &t.params, &adapt_cfg, &held, cell.clips)
                    }
                };
                let (body, report) = match outcome {
                    Ok(report) => (csv_metrics(&report), Some(report)),
                    Err(e) => {
                        let msg = e.to_string().replace([',', '\n'], ";");
                        (format!(",,,,error: {msg}"), None)
                    }
                };
                let line = format!("{}{seed_idx},{body}", cell.prefix());
                writeln!(csv, "{line}")?;
                csv.flush()?;
                println!("{line}");
                results.push((cell.prefix(), report));
            }
        }
    }

    // Aggregates across seeds, keyed by the cell columns. Min and max are
    // taken per metric, so those rows are envelopes, not single seeds.
    let mut seen: Vec<String> = Vec::new();
    for (key, _) in &results {
        if !seen.contains(key) {
            seen.push(key.clone());
        }
    }
    for key in seen {
        let owned: Vec<MetricReport> = results
            .iter()
            .filter(|(k, r)| *k == key && r.is_some())
            .map(|(_, r)| r.clone().unwrap())
            .collect();
        if owned.is_empty() {
            continue;
        }
        let mean = MetricReport::mean(&owned)?;
        let envelope = |better: fn(f64, f64) -> f64, init: f64| -> String {
            let pick = |f: fn(&MetricReport) -> f64| {
                owned.iter().map(|r| f(r)).fold(init, better)
            };
            format!(
                "{:.16e},{:.16e},{:.16e},{:.16e},ok",
                pick(|r| r.l2_face),
                pick(|r| r.l2_lip),
                pick(|r| r.lip_max),
                pick(|r| r.lip_sync)
            )
        };
        let mean_line = format!("{key}mean,{}", csv_metrics(&mean));
        writeln!(csv, "{mean_line}")?;
        writeln!(csv, "{key}min,{}", envelope(f64::min, f64::INFINITY))?;
        writeln!(csv, "{key}max,{}", envelope(f64::max, f64::NEG_INFINITY))?;
        println!("{mean_line}");
    }
    csv.flush()?;
    println!("ablation table {}", csv_path.display());
    Ok(())
}

// ── report ──

pub fn run_report(cfg: &RunConfig) -> Result<()> {
    let run_dir = cfg.resolve_run_dir();
    let _lock = RunLock::acquire(&run_dir)?;

    let mut found_any = false;

    let trace_path = run_dir.join("trace.tsv");
    if trace_path.exists() {
        found_any = true;
        let text = fs::read_to_string(&trace_path)?;
        let order = text
            .lines()
            .find(|l| l.starts_with("# order="))
            .map(|l| l.trim_start_matches("# order=").to_string());
        let rows = trace_from_text(&text)?;
        let csv_path = run_dir.join("trace.csv");
        let mut out = String::from("step,recon,vel,lnp,post_adapt_l2\n");
        for row in &rows {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                row.step, row.recon, row.vel, row.lnp, row.post_adapt_l2
            ));
        }
        fs::write(&csv_path, &out)?;
        println!(
            "trace rows={} order={}",
            rows.len(),
            order.as_deref().unwrap_or("unknown")
        );
        if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
            println!(
                "  first recon={:.6e} post_l2={:.6e}",
                first.recon, first.post_adapt_l2
            );
            println!(
                "  last  recon={:.6e} post_l2={:.6e}",
                last.recon, last.post_adapt_l2
            );
        }
        println!("  plot data {}", csv_path.display());
    }

    let eval_root = run_dir.join("eval");
    if eval_root.is_dir() {
        let mut speaker_dirs: Vec<PathBuf> = fs::read_dir(&eval_root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        speaker_dirs.sort();
        for dir in speaker_dirs {
            let aggregate = dir.join("aggregate.txt");
            if !aggregate.exists() {
                continue;
            }
            found_any = true;
            let report = MetricReport::from_text(&fs::read_to_string(&aggregate)?)?;
            let name = dir.file_name().unwrap_or_default().to_string_lossy();
            println!(
                "eval {name}: l2_face={:.6e} l2_lip={:.6e} lip_sync={:.6e} clips={}",
                report.l2_face, report.l2_lip, report.lip_sync, report.clip_count
            );
        }
    }

    let ablation_path = run_dir.join("ablation.csv");
    if ablation_path.exists() {
        found_any = true;
        let text = fs::read_to_string(&ablation_path)?;
        println!("ablation means:");
        for line in text.lines() {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.get(4) == Some(&"mean") {
                println!("  {line}");
            }
        }
    }

    if !found_any {
        println!("no artifacts in {}", run_dir.display());
    }
    Ok(())
}
