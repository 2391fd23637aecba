//! Training losses and evaluation metrics.
//!
//! Losses operate on tape variables (differentiable, motion kept flat as
//! `[T, L*3]`); metrics operate on plain `[T, L, 3]` tensors. The dynamic
//! program for the lip-sync alignment ships with a brute-force enumeration
//! twin used to validate it.

use std::ops::Range;

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

// ── Loss weights ──

/// Weights for the combined training objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_recon: f64,
    pub w_vel: f64,
    pub w_lnp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_recon: 1000.0,
            w_vel: 1000.0,
            w_lnp: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("w_recon", self.w_recon),
            ("w_vel", self.w_vel),
            ("w_lnp", self.w_lnp),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }
}

// ── Differentiable losses ──

/// Mean squared error over every scalar component.
pub fn recon_loss<'t>(pred: Var<'t>, gt: Var<'t>) -> Result<Var<'t>> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            op: "recon_loss",
            lhs: pred.shape(),
            rhs: gt.shape(),
        });
    }
    pred.sub(gt)?.square()?.mean()
}

/// Frame-difference operator: row t maps x to x[t+1] - x[t].
fn diff_matrix(frames: usize) -> Tensor {
    Tensor::from_fn(&[frames - 1, frames], |flat| {
        let (t, j) = (flat / frames, flat % frames);
        if j == t {
            -1.0
        } else if j == t + 1 {
            1.0
        } else {
            0.0
        }
    })
}

/// Mean squared error between frame-to-frame differences of prediction and
/// ground truth: averaging over the (T-1)·N difference components applies
/// the 1/(T-1) outer and 1/N inner normalization in one step.
pub fn velocity_loss<'t>(pred: Var<'t>, gt: Var<'t>) -> Result<Var<'t>> {
    let shape = pred.shape();
    if shape != gt.shape() {
        return Err(Error::ShapeMismatch {
            op: "velocity_loss",
            lhs: shape,
            rhs: gt.shape(),
        });
    }
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::Config(format!(
            "velocity loss needs [T>=2, N] motion, got {shape:?}"
        )));
    }
    let d = pred.tape_ref().constant(diff_matrix(shape[0]))?;
    d.matmul(pred.sub(gt)?)?.square()?.mean()
}

/// Weighted sum of the three loss components.
pub fn total_loss<'t>(
    recon: Var<'t>,
    vel: Var<'t>,
    lnp: Var<'t>,
    weights: &LossWeights,
) -> Result<Var<'t>> {
    recon
        .scale(weights.w_recon)?
        .add(vel.scale(weights.w_vel)?)?
        .add(lnp.scale(weights.w_lnp)?)
}

// ── Metrics over [T, L, 3] motion tensors ──

fn expect_motion_shape(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![0, 0, 3],
        });
    }
    Ok((s[0], s[1]))
}

fn check_lip_range(lip: &Range<usize>, vertex_count: usize) -> Result<()> {
    if lip.start >= lip.end || lip.end > vertex_count {
        return Err(Error::Config(format!(
            "lip range {}..{} invalid for {} vertices",
            lip.start, lip.end, vertex_count
        )));
    }
    Ok(())
}

fn vertex_distance(pred: &[f64], gt: &[f64], base: usize) -> f64 {
    let dx = pred[base] - gt[base];
    let dy = pred[base + 1] - gt[base + 1];
    let dz = pred[base + 2] - gt[base + 2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Per-vertex Euclidean error statistics for one clip pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L2Stats {
    /// Mean over frames and all vertices.
    pub l2_face: f64,
    /// Mean over frames and lip vertices.
    pub l2_lip: f64,
    /// Mean over frames of the worst lip vertex per frame.
    pub lip_max: f64,
}

pub fn l2_metrics(pred: &Tensor, gt: &Tensor, lip: &Range<usize>) -> Result<L2Stats> {
    let (frames, vertices) = expect_motion_shape(pred, "l2_metrics")?;
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            op: "l2_metrics",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    check_lip_range(lip, vertices)?;
    let (p, g) = (pred.data(), gt.data());
    let (mut face_sum, mut lip_sum, mut max_sum) = (0.0, 0.0, 0.0);
    for t in 0..frames {
        let mut frame_max = 0.0f64;
        for l in 0..vertices {
            let d = vertex_distance(p, g, (t * vertices + l) * 3);
            face_sum += d;
            if lip.contains(&l) {
                lip_sum += d;
                frame_max = frame_max.max(d);
            }
        }
        max_sum += frame_max;
    }
    let frames_f = frames as f64;
    Ok(L2Stats {
        l2_face: face_sum / (frames_f * vertices as f64),
        l2_lip: lip_sum / (frames_f * lip.len() as f64),
        lip_max: max_sum / frames_f,
    })
}

/// Cost matrix for the lip alignment: mean per-vertex distance between lip
/// regions of prediction frame i and ground-truth frame j.
fn lip_cost_matrix(pred: &Tensor, gt: &Tensor, lip: &Range<usize>) -> Result<Vec<Vec<f64>>> {
    let (tp, vp) = expect_motion_shape(pred, "dtw_lip_sync")?;
    let (tg, vg) = expect_motion_shape(gt, "dtw_lip_sync")?;
    if vp != vg {
        return Err(Error::ShapeMismatch {
            op: "dtw_lip_sync",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    check_lip_range(lip, vp)?;
    let (p, g) = (pred.data(), gt.data());
    let lip_len = lip.len() as f64;
    let mut cost = vec![vec![0.0; tg]; tp];
    for (i, row) in cost.iter_mut().enumerate() {
        for (j, slot) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for l in lip.clone() {
                let pb = (i * vp + l) * 3;
                let gb = (j * vg + l) * 3;
                let dx = p[pb] - g[gb];
                let dy = p[pb + 1] - g[gb + 1];
                let dz = p[pb + 2] - g[gb + 2];
                acc += (dx * dx + dy * dy + dz * dz).sqrt();
            }
            *slot = acc / lip_len;
        }
    }
    Ok(cost)
}

/// Dynamic-time-warping lip-sync error: minimal accumulated lip distance
/// over monotone alignments with steps (1,0), (0,1), (1,1), divided by the
/// alignment's path length. Ties in cost resolve to the shorter path.
pub fn dtw_lip_sync(pred: &Tensor, gt: &Tensor, lip: &Range<usize>) -> Result<f64> {
    let cost = lip_cost_matrix(pred, gt, lip)?;
    let (m, n) = (cost.len(), cost[0].len());
    // (accumulated cost, path length) per cell.
    let mut dp = vec![vec![(0.0f64, 0u32); n]; m];
    for i in 0..m {
        for j in 0..n {
            let c = cost[i][j];
            let mut best: Option<(f64, u32)> = None;
            if i == 0 && j == 0 {
                best = Some((0.0, 0));
            }
            let mut consider = |cand: (f64, u32)| match best {
                None => best = Some(cand),
                Some(b) if cand.0 < b.0 || (cand.0 == b.0 && cand.1 < b.1) => {
                    best = Some(cand)
                }
                _ => {}
            };
            if i > 0 {
                consider(dp[i - 1][j]);
            }
            if j > 0 {
                consider(dp[i][j - 1]);
            }
            if i > 0 && j > 0 {
                consider(dp[i - 1][j - 1]);
            }
            let (pc, pl) = best.expect("every cell has a predecessor or is the origin");
            dp[i][j] = (pc + c, pl + 1);
        }
    }
    let (total, len) = dp[m - 1][n - 1];
    Ok(total / len as f64)
}

/// Brute-force twin of [`dtw_lip_sync`]: enumerates every monotone path.
/// Exponential in T; for validating the dynamic program on short clips.
pub fn dtw_lip_sync_exhaustive(pred: &Tensor, gt: &Tensor, lip: &Range<usize>) -> Result<f64> {
    let cost = lip_cost_matrix(pred, gt, lip)?;
    let (m, n) = (cost.len(), cost[0].len());
    if m > 8 || n > 8 {
        return Err(Error::Config(format!(
            "exhaustive alignment is for short clips only, got {m}x{n}"
        )));
    }
    fn walk(
        cost: &[Vec<f64>],
        i: usize,
        j: usize,
        acc: f64,
        len: u32,
        best: &mut Option<(f64, u32)>,
    ) {
        let acc = acc + cost[i][j];
        let len = len + 1;
        if i + 1 == cost.len() && j + 1 == cost[0].len() {
            let cand = (acc, len);
            match best {
                None => *best = Some(cand),
                Some(b) if cand.0 < b.0 || (cand.0 == b.0 && cand.1 < b.1) => {
                    *best = Some(cand)
                }
                _ => {}
            }
            return;
        }
        if i + 1 < cost.len() {
            walk(cost, i + 1, j, acc, len, best);
        }
        if j + 1 < cost[0].len() {
            walk(cost, i, j + 1, acc, len, best);
        }
        if i + 1 < cost.len() && j + 1 < cost[0].len() {
            walk(cost, i + 1, j + 1, acc, len, best);
        }
    }
    let mut best = None;
    walk(&cost, 0, 0, 0.0, 0, &mut best);
    let (total, len) = best.expect("at least the staircase path exists");
    Ok(total / len as f64)
}

// ── Metric report ──

/// Aggregated evaluation metrics for a set of clips.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub l2_face: f64,
    pub l2_lip: f64,
    pub lip_max: f64,
    pub lip_sync: f64,
    pub clip_count: usize,
}

impl MetricReport {
    pub fn for_clip(stats: L2Stats, lip_sync: f64) -> MetricReport {
        MetricReport {
            l2_face: stats.l2_face,
            l2_lip: stats.l2_lip,
            lip_max: stats.lip_max,
            lip_sync,
            clip_count: 1,
        }
    }

    /// Arithmetic mean across reports; clip counts accumulate.
    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport> {
        if reports.is_empty() {
            return Err(Error::Config("cannot aggregate zero reports".to_string()));
        }
        let n = reports.len() as f64;
        Ok(MetricReport {
            l2_face: reports.iter().map(|r| r.l2_face).sum::<f64>() / n,
            l2_lip: reports.iter().map(|r| r.l2_lip).sum::<f64>() / n,
            lip_max: reports.iter().map(|r| r.lip_max).sum::<f64>() / n,
            lip_sync: reports.iter().map(|r| r.lip_sync).sum::<f64>() / n,
            clip_count: reports.iter().map(|r| r.clip_count).sum(),
        })
    }

    /// Flat key-value lines, one metric per line, 17 significant digits.
    pub fn to_text(&self) -> String {
        format!(
            "l2_face={:.16e}\nl2_lip={:.16e}\nlip_max={:.16e}\nlip_sync={:.16e}\nclip_count={}\n",
            self.l2_face, self.l2_lip, self.lip_max, self.lip_sync, self.clip_count
        )
    }

    pub fn from_text(text: &str) -> Result<MetricReport> {
        let mut fields: [Option<f64>; 4] = [None; 4];
        let mut clip_count: Option<usize> = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("metric line missing '=': {line:?}"))
            })?;
            let slot = match key {
                "l2_face" => 0,
                "l2_lip" => 1,
                "lip_max" => 2,
                "lip_sync" => 3,
                "clip_count" => {
                    clip_count = Some(value.parse().map_err(|_| {
                        Error::Config(format!("bad clip_count: {value:?}"))
                    })?);
                    continue;
                }
                other => {
                    return Err(Error::Config(format!("unknown metric key {other:?}")))
                }
            };
            fields[slot] = Some(
                value
                    .parse()
                    .map_err(|_| Error::Config(format!("bad value for {key}: {value:?}")))?,
            );
        }
        let get = |i: usize, name: &str| {
            fields[i].ok_or_else(|| Error::Config(format!("missing metric {name}")))
        };
        Ok(MetricReport {
            l2_face: get(0, "l2_face")?,
            l2_lip: get(1, "l2_lip")?,
            lip_max: get(2, "lip_max")?,
            lip_sync: get(3, "lip_sync")?,
            clip_count: clip_count
                .ok_or_else(|| Error::Config("missing metric clip_count".to_string()))?,
        })
    }
}
