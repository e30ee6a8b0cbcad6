//! Affine maps into the joint space, cosine similarity, the rank-weighted
//! hard-negative ranking loss, the L2 baseline loss and the combined
//! objective.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

/// `x W + b`.
#[derive(Clone, Debug)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Affine {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        group: &str,
        input_dim: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (input_dim as f64).sqrt();
        Ok(Affine {
            w: store.register(
                &format!("{prefix}.w"),
                group,
                Tensor::uniform(&[input_dim, output_dim], bound, rng),
            )?,
            b: store.register(
                &format!("{prefix}.b"),
                group,
                Tensor::uniform(&[output_dim], bound, rng),
            )?,
            input_dim,
            output_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let got = tape.value(x).len();
        if tape.value(x).shape().len() != 1 || got != self.input_dim {
            return Err(Error::shape(
                "embed",
                format!("expected a {}-d input, got {:?}", self.input_dim, tape.value(x).shape()),
            ));
        }
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

/// Cosine similarity of two plain vectors.
pub fn cosine(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("similarity", format!("{} vs {}", x.len(), y.len())));
    }
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    let d: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok((d / (nx * ny)).clamp(-1.0, 1.0))
}

/// `1 + 1 / (n - r + 1)` for a rank `r` in `1..=n`.
pub fn rank_weight(r: usize, n: usize) -> Result<f64> {
    if r == 0 || r > n {
        return Err(Error::invalid(format!("rank {r} outside 1..={n}")));
    }
    Ok(1.0 + 1.0 / (n - r + 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Ranking margin.
    pub margin: f64,
    /// Weight of the question decoder loss.
    pub a: f64,
    /// Weight of the embedding loss.
    pub b: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.2,
            a: 2.0,
            b: 1000.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) || self.a < 0.0 || self.b < 0.0 {
            return Err(Error::invalid(format!("invalid loss config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatLossKind {
    Ranking,
    L2,
}

impl fmt::Display for FeatLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ranking => "ranking",
            Self::L2 => "l2",
        })
    }
}

impl FromStr for FeatLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ranking" => Ok(Self::Ranking),
            "l2" => Ok(Self::L2),
            _ => Err(Error::invalid(format!("unknown feature loss `{s}`"))),
        }
    }
}

/// Hard-negative indices and ranks chosen during the forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingBatch {
    /// For video `i`: the most similar non-matching dialog.
    pub hard_dialog: Vec<usize>,
    /// For dialog `i`: the most similar non-matching video.
    pub hard_video: Vec<usize>,
    /// Rank of dialog `i` among all dialogs as seen from video `i`.
    pub rank_v: Vec<usize>,
    /// Rank of video `i` among all videos as seen from dialog `i`.
    pub rank_s: Vec<usize>,
    /// Value of the video-anchored sum.
    pub video_term: f64,
    /// Value of the dialog-anchored sum.
    pub dialog_term: f64,
}

/// Index of the largest entry other than `skip`; ties go to the lowest index.
fn argmax_excluding(scores: impl Iterator<Item = f64>, skip: usize) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    for (j, v) in scores.enumerate() {
        if j == skip {
            continue;
        }
        if best == usize::MAX || v > best_v {
            best = j;
            best_v = v;
        }
    }
    best
}

/// 1-based rank of entry `own`, counting entries that score higher or tie
/// with a lower index.
fn rank_of(scores: &[f64], own: usize) -> usize {
    let s = scores[own];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < own))
        .count()
}

/// Two-directional rank-weighted hinge loss with in-batch hard negatives.
///
/// `dialogs[i]` and `videos[i]` are matching joint-space embeddings. The
/// selection of hard negatives and ranks is fixed by the forward values;
/// gradients flow only through the similarities.
pub fn ranking_loss(tape: &mut Tape, dialogs: &[Var], videos: &[Var], cfg: &LossConfig) -> Result<(Var, RankingBatch)> {
    let n = dialogs.len();
    if n < 2 {
        return Err(Error::invalid("ranking loss needs a batch of at least 2"));
    }
    if videos.len() != n {
        return Err(Error::invalid(format!("{n} dialogs but {} videos", videos.len())));
    }
    let d = tape.stack_rows(dialogs)?;
    let v = tape.stack_rows(videos)?;
    let dn = tape.l2_normalize(d)?;
    let vn = tape.l2_normalize(v)?;
    let vt = tape.transpose(vn)?;
    // sim[i][j] = S(dialog i, video j)
    let sim = tape.matmul(dn, vt)?;
    let s = tape.value(sim).data().to_vec();
    let at = |i: usize, j: usize| s[i * n + j];

    let mut batch = RankingBatch {
        hard_dialog: Vec::with_capacity(n),
        hard_video: Vec::with_capacity(n),
        rank_v: Vec::with_capacity(n),
        rank_s: Vec::with_capacity(n),
        video_term: 0.0,
        dialog_term: 0.0,
    };
    let mut terms = Vec::with_capacity(2 * n);
    for i in 0..n {
        // video anchor: compare all dialogs against video i (column i)
        let col: Vec<f64> = (0..n).map(|j| at(j, i)).collect();
        let hd = argmax_excluding(col.iter().copied(), i);
        let rv = rank_of(&col, i);
        let wv = rank_weight(rv, n)?;
        batch.video_term += wv * (cfg.margin - at(i, i) + at(hd, i)).max(0.0);
        let pos = tape.element(sim, i * n + i)?;
        let neg = tape.element(sim, hd * n + i)?;
        terms.push(weighted_hinge(tape, pos, neg, cfg.margin, wv)?);

        // dialog anchor: compare all videos against dialog i (row i)
        let row: Vec<f64> = (0..n).map(|j| at(i, j)).collect();
        let hv = argmax_excluding(row.iter().copied(), i);
        let rs = rank_of(&row, i);
        let ws = rank_weight(rs, n)?;
        batch.dialog_term += ws * (cfg.margin - at(i, i) + at(i, hv)).max(0.0);
        let neg = tape.element(sim, i * n + hv)?;
        terms.push(weighted_hinge(tape, pos, neg, cfg.margin, ws)?);

        batch.hard_dialog.push(hd);
        batch.hard_video.push(hv);
        batch.rank_v.push(rv);
        batch.rank_s.push(rs);
    }
    let loss = tape.add_all(&terms)?;
    Ok((loss, batch))
}

fn weighted_hinge(tape: &mut Tape, pos: Var, neg: Var, margin: f64, weight: f64) -> Result<Var> {
    let diff = tape.sub(neg, pos)?;
    let shifted = tape.add_scalar(diff, margin);
    let hinge = tape.relu(shifted);
    Ok(tape.scale(hinge, weight))
}

/// Mean squared Euclidean distance between matching pairs.
pub fn l2_loss(tape: &mut Tape, dialogs: &[Var], videos: &[Var]) -> Result<Var> {
    if dialogs.is_empty() || dialogs.len() != videos.len() {
        return Err(Error::invalid("l2 loss needs equal, non-empty batches"));
    }
    let d = tape.stack_rows(dialogs)?;
    let v = tape.stack_rows(videos)?;
    let diff = tape.sub(d, v)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / dialogs.len() as f64))
}

/// `a * dialog_loss + b * feat_loss`.
pub fn total_loss(tape: &mut Tape, dialog_loss: Var, feat_loss: Var, cfg: &LossConfig) -> Result<Var> {
    let d = tape.scale(dialog_loss, cfg.a);
    let f = tape.scale(feat_loss, cfg.b);
    tape.add(d, f)
}

pub fn total_loss_value(dialog_loss: f64, feat_loss: f64, cfg: &LossConfig) -> Result<f64> {
    if !dialog_loss.is_finite() || !feat_loss.is_finite() {
        return Err(Error::NonFinite("loss component".into()));
    }
    Ok(cfg.a * dialog_loss + cfg.b * feat_loss)
}
